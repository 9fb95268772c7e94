//! 2D similarity transforms and the closed-form point-set alignment used for the
//! self-similarity loss and for gauge registration at evaluation time.
//!
//! The alignment estimator centers both clouds, normalizes by the centered
//! Frobenius radius, and averages per-point angle differences through their
//! (sin, cos) components, renormalizing the averaged pair to unit length before
//! building the rotation. Gradients of the alignment residual with respect to
//! the source points are computed in closed form, including the dependence of
//! the estimated rotation, scale and translation on the source.

use crate::scalar::Scalar;
use thiserror::Error;

/// Points whose centered norm falls below this are excluded from the angle
/// average; clouds whose radius falls below it are rejected as degenerate.
const DEGENERACY_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("point sets have different lengths: target {target_len}, source {source_len}")]
    LengthMismatch { target_len: usize, source_len: usize },
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(&'static str),
    #[error("point set must contain at least one finite point")]
    InvalidPointSet,
}

/// Rigid-plus-scale transform on the plane: rotation angle, positive scale,
/// translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity2D<S> {
    pub theta: S,
    pub scale: S,
    pub translation: [S; 2],
}

impl<S: Scalar> Similarity2D<S> {
    pub fn new(theta: S, scale: S, translation: [S; 2]) -> Result<Self, GeometryError> {
        let finite = theta.is_finite()
            && scale.is_finite()
            && translation[0].is_finite()
            && translation[1].is_finite();
        if !finite || scale <= S::zero() {
            return Err(GeometryError::DegenerateCloud("invalid similarity parameters"));
        }
        Ok(Self { theta, scale, translation })
    }

    pub fn identity() -> Self {
        Self { theta: S::zero(), scale: S::one(), translation: [S::zero(); 2] }
    }

    /// Rotation matrix rows for this transform: [[cos, sin], [-sin, cos]].
    pub fn rotation(&self) -> [[S; 2]; 2] {
        let (sin, cos) = self.theta.sin_cos();
        [[cos, sin], [-sin, cos]]
    }

    /// scale * R * p + translation
    pub fn transform_point(&self, p: [S; 2]) -> [S; 2] {
        let r = self.rotation();
        [
            self.scale * (r[0][0] * p[0] + r[0][1] * p[1]) + self.translation[0],
            self.scale * (r[1][0] * p[0] + r[1][1] * p[1]) + self.translation[1],
        ]
    }
}

/// Ordered list of 2D points in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet2D<S> {
    points: Vec<[S; 2]>,
}

impl<S: Scalar> PointSet2D<S> {
    pub fn new(points: Vec<[S; 2]>) -> Result<Self, GeometryError> {
        if points.is_empty() || points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(GeometryError::InvalidPointSet);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[S; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[inline]
fn sub<S: Scalar>(a: [S; 2], b: [S; 2]) -> [S; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn dot<S: Scalar>(a: [S; 2], b: [S; 2]) -> S {
    a[0] * b[0] + a[1] * b[1]
}

/// z-component of the cross product a x b.
#[inline]
fn cross<S: Scalar>(a: [S; 2], b: [S; 2]) -> S {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
fn norm<S: Scalar>(a: [S; 2]) -> S {
    a[0].hypot(a[1])
}

/// Applies `t` to every point of `p`.
pub fn apply_similarity<S: Scalar>(t: &Similarity2D<S>, p: &PointSet2D<S>) -> PointSet2D<S> {
    PointSet2D {
        points: p.points.iter().map(|&q| t.transform_point(q)).collect(),
    }
}

struct AlignParts<S> {
    centroid_target: [S; 2],
    centroid_source: [S; 2],
    centered_target: Vec<[S; 2]>,
    centered_source: Vec<[S; 2]>,
    radius_target: S,
    radius_source: S,
    /// Unit direction pairs (target, source) for points kept in the angle
    /// average; None for points too close to either centroid.
    directions: Vec<Option<([S; 2], [S; 2])>>,
    valid_count: usize,
    mean_sin: S,
    mean_cos: S,
    hypot: S,
    sin: S,
    cos: S,
    scale: S,
}

fn align_parts<S: Scalar>(
    target: &PointSet2D<S>,
    source: &PointSet2D<S>,
) -> Result<AlignParts<S>, GeometryError> {
    if target.len() != source.len() {
        return Err(GeometryError::LengthMismatch {
            target_len: target.len(),
            source_len: source.len(),
        });
    }
    let n = target.len();
    let inv_n = S::one() / S::from(n).unwrap();
    let eps = S::from(DEGENERACY_EPS).unwrap();

    let mut centroid_target = [S::zero(); 2];
    let mut centroid_source = [S::zero(); 2];
    for i in 0..n {
        centroid_target[0] = centroid_target[0] + target.points[i][0];
        centroid_target[1] = centroid_target[1] + target.points[i][1];
        centroid_source[0] = centroid_source[0] + source.points[i][0];
        centroid_source[1] = centroid_source[1] + source.points[i][1];
    }
    centroid_target = [centroid_target[0] * inv_n, centroid_target[1] * inv_n];
    centroid_source = [centroid_source[0] * inv_n, centroid_source[1] * inv_n];

    let centered_target: Vec<[S; 2]> =
        target.points.iter().map(|&p| sub(p, centroid_target)).collect();
    let centered_source: Vec<[S; 2]> =
        source.points.iter().map(|&p| sub(p, centroid_source)).collect();

    let radius_target = centered_target.iter().map(|p| dot(*p, *p)).sum::<S>().sqrt();
    let radius_source = centered_source.iter().map(|p| dot(*p, *p)).sum::<S>().sqrt();
    if radius_target < eps {
        return Err(GeometryError::DegenerateCloud("target cloud radius below 1e-12"));
    }
    if radius_source < eps {
        return Err(GeometryError::DegenerateCloud("source cloud radius below 1e-12"));
    }

    let mut directions = Vec::with_capacity(n);
    let mut valid_count = 0usize;
    let mut sum_sin = S::zero();
    let mut sum_cos = S::zero();
    for i in 0..n {
        let nt = norm(centered_target[i]);
        let ns = norm(centered_source[i]);
        if nt < eps || ns < eps {
            directions.push(None);
            continue;
        }
        let u = [centered_target[i][0] / nt, centered_target[i][1] / nt];
        let v = [centered_source[i][0] / ns, centered_source[i][1] / ns];
        // angle difference source-minus-target through its sine and cosine
        sum_sin = sum_sin + cross(u, v);
        sum_cos = sum_cos + dot(u, v);
        directions.push(Some((u, v)));
        valid_count += 1;
    }
    if valid_count == 0 {
        return Err(GeometryError::DegenerateCloud("no points define an angle"));
    }
    let inv_m = S::one() / S::from(valid_count).unwrap();
    let mean_sin = sum_sin * inv_m;
    let mean_cos = sum_cos * inv_m;
    let hypot = mean_sin.hypot(mean_cos);
    if hypot < eps {
        return Err(GeometryError::DegenerateCloud("angle average cancelled"));
    }

    Ok(AlignParts {
        centroid_target,
        centroid_source,
        centered_target,
        centered_source,
        radius_target,
        radius_source,
        directions,
        valid_count,
        mean_sin,
        mean_cos,
        hypot,
        sin: mean_sin / hypot,
        cos: mean_cos / hypot,
        scale: radius_target / radius_source,
    })
}

impl<S: Scalar> AlignParts<S> {
    fn similarity(&self) -> Similarity2D<S> {
        let theta = self.mean_sin.atan2(self.mean_cos);
        let r = [[self.cos, self.sin], [-self.sin, self.cos]];
        let ms = self.centroid_source;
        let rotated = [r[0][0] * ms[0] + r[0][1] * ms[1], r[1][0] * ms[0] + r[1][1] * ms[1]];
        Similarity2D {
            theta,
            scale: self.scale,
            translation: [
                self.centroid_target[0] - self.scale * rotated[0],
                self.centroid_target[1] - self.scale * rotated[1],
            ],
        }
    }

    /// Per-point residuals target - (scale R source + tau) and their summed
    /// squared norm.
    fn residuals(&self) -> (Vec<[S; 2]>, S) {
        let r = [[self.cos, self.sin], [-self.sin, self.cos]];
        let mut out = Vec::with_capacity(self.centered_target.len());
        let mut sq = S::zero();
        for i in 0..self.centered_target.len() {
            let d = self.centered_source[i];
            let rd = [r[0][0] * d[0] + r[0][1] * d[1], r[1][0] * d[0] + r[1][1] * d[1]];
            let res = [
                self.centered_target[i][0] - self.scale * rd[0],
                self.centered_target[i][1] - self.scale * rd[1],
            ];
            sq = sq + dot(res, res);
            out.push(res);
        }
        (out, sq)
    }
}

/// Estimates the similarity mapping `source` onto `target`. Both sets must be
/// index-aligned: entry n of each refers to the same object.
pub fn align_2d<S: Scalar>(
    target: &PointSet2D<S>,
    source: &PointSet2D<S>,
) -> Result<Similarity2D<S>, GeometryError> {
    Ok(align_parts(target, source)?.similarity())
}

/// Frobenius norm of the post-alignment residual matrix (not squared).
pub fn alignment_residual<S: Scalar>(
    target: &PointSet2D<S>,
    source: &PointSet2D<S>,
) -> Result<S, GeometryError> {
    let parts = align_parts(target, source)?;
    Ok(parts.residuals().1.sqrt())
}

/// Gradient of `alignment_residual` with respect to every source point, scaled
/// by `upstream`. Accounts for the dependence of the estimated rotation, scale
/// and translation on the source points. At an exact minimum (residual ~ 0,
/// where the norm has a cone point) the gradient is defined as zero.
pub fn align_2d_grad<S: Scalar>(
    target: &PointSet2D<S>,
    source: &PointSet2D<S>,
    upstream: S,
) -> Result<Vec<[S; 2]>, GeometryError> {
    Ok(residual_and_grad(target, source, upstream)?.1)
}

/// Residual value plus its source-point gradient in one pass.
pub(crate) fn residual_and_grad<S: Scalar>(
    target: &PointSet2D<S>,
    source: &PointSet2D<S>,
    upstream: S,
) -> Result<(S, Vec<[S; 2]>), GeometryError> {
    let parts = align_parts(target, source)?;
    let n = target.len();
    let (residuals, sq) = parts.residuals();
    let loss = sq.sqrt();

    // Cone point of the norm: treat the subgradient at an exact fit as zero.
    let guard = S::from(DEGENERACY_EPS).unwrap() * parts.radius_target;
    if loss <= guard {
        return Ok((loss, vec![[S::zero(); 2]; n]));
    }

    let rot = [[parts.cos, parts.sin], [-parts.sin, parts.cos]];
    // derivative of R with respect to theta
    let rot_d = [[-parts.sin, parts.cos], [-parts.cos, -parts.sin]];

    let lambda = parts.scale;
    let inv_n = S::one() / S::from(n).unwrap();
    let h2 = parts.hypot * parts.hypot;

    // coefficient of d(lambda): A = sum r_i . (R d_i); coefficient of d(theta):
    // B = sum r_i . (R' d_i)
    let mut coeff_scale = S::zero();
    let mut coeff_angle = S::zero();
    // theta sensitivity to each source point, and residuals rotated back
    let mut theta_grad: Vec<[S; 2]> = vec![[S::zero(); 2]; n];
    let mut theta_grad_mean = [S::zero(); 2];
    let mut rot_res: Vec<[S; 2]> = Vec::with_capacity(n);
    let mut rot_res_mean = [S::zero(); 2];

    for i in 0..n {
        let d = parts.centered_source[i];
        let rd = [rot[0][0] * d[0] + rot[0][1] * d[1], rot[1][0] * d[0] + rot[1][1] * d[1]];
        let rpd = [
            rot_d[0][0] * d[0] + rot_d[0][1] * d[1],
            rot_d[1][0] * d[0] + rot_d[1][1] * d[1],
        ];
        coeff_scale = coeff_scale + dot(residuals[i], rd);
        coeff_angle = coeff_angle + dot(residuals[i], rpd);

        // R^T r_i
        let rr = [
            rot[0][0] * residuals[i][0] + rot[1][0] * residuals[i][1],
            rot[0][1] * residuals[i][0] + rot[1][1] * residuals[i][1],
        ];
        rot_res_mean = [rot_res_mean[0] + rr[0] * inv_n, rot_res_mean[1] + rr[1] * inv_n];
        rot_res.push(rr);

        if let Some((u, v)) = parts.directions[i] {
            // d(theta)/d(d_i) = (I - v v^T)(cos_mean * perp(u) - sin_mean * u) / (M h^2 |d_i|)
            let perp_u = [-u[1], u[0]];
            let w = [
                parts.mean_cos * perp_u[0] - parts.mean_sin * u[0],
                parts.mean_cos * perp_u[1] - parts.mean_sin * u[1],
            ];
            let vw = dot(v, w);
            let proj = [w[0] - v[0] * vw, w[1] - v[1] * vw];
            let denom = S::from(parts.valid_count).unwrap() * h2 * norm(d);
            let g = [proj[0] / denom, proj[1] / denom];
            theta_grad[i] = g;
            theta_grad_mean = [theta_grad_mean[0] + g[0] * inv_n, theta_grad_mean[1] + g[1] * inv_n];
        }
    }

    let rs2 = parts.radius_source * parts.radius_source;
    let mut grads = Vec::with_capacity(n);
    let scale_factor = upstream / loss;
    for i in 0..n {
        let d = parts.centered_source[i];
        // d(lambda)/d(s_i) = -(lambda / rs^2) d_i
        let dl = [-(lambda / rs2) * d[0], -(lambda / rs2) * d[1]];
        let dt = [theta_grad[i][0] - theta_grad_mean[0], theta_grad[i][1] - theta_grad_mean[1]];
        let dr = [rot_res[i][0] - rot_res_mean[0], rot_res[i][1] - rot_res_mean[1]];
        let gx = -(coeff_scale * dl[0] + lambda * coeff_angle * dt[0] + lambda * dr[0]);
        let gy = -(coeff_scale * dl[1] + lambda * coeff_angle * dt[1] + lambda * dr[1]);
        grads.push([gx * scale_factor, gy * scale_factor]);
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[[f64; 2]]) -> PointSet2D<f64> {
        PointSet2D::new(v.to_vec()).unwrap()
    }

    #[test]
    fn apply_identity_keeps_points() {
        let p = pts(&[[1.0, 2.0], [-3.0, 0.5]]);
        let out = apply_similarity(&Similarity2D::identity(), &p);
        assert_eq!(out.points(), p.points());
    }

    #[test]
    fn apply_quarter_turn() {
        let t = Similarity2D::new(std::f64::consts::FRAC_PI_2, 1.0, [0.0, 0.0]).unwrap();
        let out = apply_similarity(&t, &pts(&[[1.0, 0.0]]));
        assert!((out.points()[0][0] - 0.0).abs() < 1e-15);
        assert!((out.points()[0][1] - -1.0).abs() < 1e-15);
    }

    #[test]
    fn apply_matches_reference_matrix_product() {
        // independent oracle: explicit matrix product evaluated by hand
        // R(pi/4) = [[c, s], [-s, c]], c = s = sqrt(2)/2
        // 2 R (1,0) + (1,1) = (sqrt2 + 1, -sqrt2 + 1)
        // 2 R (0,1) + (1,1) = (sqrt2 + 1,  sqrt2 + 1)
        let t = Similarity2D::new(std::f64::consts::FRAC_PI_4, 2.0, [1.0, 1.0]).unwrap();
        let out = apply_similarity(&t, &pts(&[[1.0, 0.0], [0.0, 1.0]]));
        let sq2 = std::f64::consts::SQRT_2;
        assert!((out.points()[0][0] - (sq2 + 1.0)).abs() < 1e-12);
        assert!((out.points()[0][1] - (1.0 - sq2)).abs() < 1e-12);
        assert!((out.points()[1][0] - (sq2 + 1.0)).abs() < 1e-12);
        assert!((out.points()[1][1] - (sq2 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let t = Similarity2D::<f64>::new(1.234, 3.0, [0.0, 0.0]).unwrap();
        let r = t.rotation();
        let rrt = [
            r[0][0] * r[0][0] + r[0][1] * r[0][1],
            r[0][0] * r[1][0] + r[0][1] * r[1][1],
            r[1][0] * r[1][0] + r[1][1] * r[1][1],
        ];
        assert!((rrt[0] - 1.0).abs() < 1e-12);
        assert!(rrt[1].abs() < 1e-12);
        assert!((rrt[2] - 1.0).abs() < 1e-12);
        let det = r[0][0] * r[1][1] - r[0][1] * r[1][0];
        assert!((det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn align_identity_case() {
        let p = pts(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]);
        let t = align_2d(&p, &p).unwrap();
        assert!(t.theta.abs() < 1e-12);
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!(t.translation[0].abs() < 1e-12);
        assert!(t.translation[1].abs() < 1e-12);
    }

    #[test]
    fn align_pure_translation() {
        let target = pts(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]);
        let source = pts(&[[-3.0, -4.0], [-2.0, -4.0], [-3.0, -2.0]]);
        let t = align_2d(&target, &source).unwrap();
        assert!(t.theta.abs() < 1e-12);
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!((t.translation[0] - 3.0).abs() < 1e-12);
        assert!((t.translation[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn align_rejects_single_point_and_mismatch() {
        let one = pts(&[[1.0, 1.0]]);
        assert!(matches!(align_2d(&one, &one), Err(GeometryError::DegenerateCloud(_))));
        let a = pts(&[[0.0, 0.0], [1.0, 0.0]]);
        let b = pts(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        assert_eq!(
            align_2d(&a, &b),
            Err(GeometryError::LengthMismatch { target_len: 2, source_len: 3 })
        );
    }

    #[test]
    fn align_rejects_coincident_cloud() {
        let coincident = pts(&[[2.0, 2.0], [2.0, 2.0], [2.0, 2.0]]);
        let target = pts(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            align_2d(&target, &coincident),
            Err(GeometryError::DegenerateCloud(_))
        ));
    }

    #[test]
    fn zero_radius_points_excluded_from_angle_average() {
        // middle point sits exactly on both centroids; alignment must still
        // recover the rotation from the outer two
        let target = pts(&[[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]]);
        let theta = 0.7;
        let t = Similarity2D::new(theta, 1.0, [0.0, 0.0]).unwrap();
        // source such that target = R(theta) * source: apply inverse rotation
        let inv = Similarity2D::new(-theta, 1.0, [0.0, 0.0]).unwrap();
        let source = apply_similarity(&inv, &target);
        let got = align_2d(&target, &source).unwrap();
        assert!((got.theta - theta).abs() < 1e-12);
        let mapped = apply_similarity(&got, &source);
        for (a, b) in mapped.points().iter().zip(target.points()) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> PointSet2D<f64> {
        PointSet2D::new(
            (0..n)
                .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
                .collect(),
        )
        .unwrap()
    }

    fn random_similarity(rng: &mut ChaCha8Rng) -> Similarity2D<f64> {
        Similarity2D::new(
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.random_range(0.5..2.0),
            [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
        )
        .unwrap()
    }

    #[test]
    fn exact_recovery_of_random_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(2..=12);
            let target = random_set(&mut rng, n);
            // skip clouds that are accidentally degenerate for alignment
            let forward = match align_2d(&target, &target) {
                Ok(_) => true,
                Err(_) => false,
            };
            if !forward {
                continue;
            }
            let t = random_similarity(&mut rng);
            // source maps onto target under t: target = t(source) => source = t^{-1}(target)
            let inv_scale = 1.0 / t.scale;
            let inv = Similarity2D::new(-t.theta, inv_scale, [0.0, 0.0]).unwrap();
            let shifted = PointSet2D::new(
                target
                    .points()
                    .iter()
                    .map(|p| [p[0] - t.translation[0], p[1] - t.translation[1]])
                    .collect(),
            )
            .unwrap();
            let source = apply_similarity(&inv, &shifted);
            let got = align_2d(&target, &source).unwrap();
            let mapped = apply_similarity(&got, &source);
            for (a, b) in mapped.points().iter().zip(target.points()) {
                let res = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                assert!(res < 1e-9, "residual {res}");
            }
        }
    }

    #[test]
    fn grad_zero_at_exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = random_set(&mut rng, 5);
        let t = random_similarity(&mut rng);
        let inv = Similarity2D::new(-t.theta, 1.0 / t.scale, [0.0, 0.0]).unwrap();
        let shifted = PointSet2D::new(
            target
                .points()
                .iter()
                .map(|p| [p[0] - t.translation[0], p[1] - t.translation[1]])
                .collect(),
        )
        .unwrap();
        let source = apply_similarity(&inv, &shifted);
        let (loss, grads) = residual_and_grad(&target, &source, 1.0).unwrap();
        assert!(loss < 1e-10);
        for g in grads {
            assert!(g[0].abs() < 1e-10 && g[1].abs() < 1e-10);
        }
    }

    #[test]
    fn f32_instantiation_compiles_and_aligns() {
        let target = PointSet2D::<f32>::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]).unwrap();
        let source = PointSet2D::<f32>::new(vec![[1.0, 1.0], [2.0, 1.0], [1.0, 3.0]]).unwrap();
        let t = align_2d(&target, &source).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-5);
        assert!((t.translation[0] - -1.0).abs() < 1e-5);
    }
}
