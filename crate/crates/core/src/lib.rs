pub mod geometry;
pub mod nn;
pub mod scalar;

pub use geometry::{align_2d, align_2d_grad, apply_similarity, GeometryError};
pub use scalar::Scalar;

/// Scalar type the pipeline runs at. The numeric core is generic; everything
/// above it (data generation, file formats, training) is pinned to f64.
pub type Real = f64;

pub type Similarity2 = geometry::Similarity2D<Real>;
pub type Points2 = geometry::PointSet2D<Real>;
pub type Tensor = nn::Tensor2<Real>;
pub type Model = nn::AlignmentModel<Real>;
