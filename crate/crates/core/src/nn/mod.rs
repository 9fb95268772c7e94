//! The three-stage alignment model: linear encoder with GeLU, four graph
//! message-passing layers (GCN or GAT), and a linear decoder to 2D map
//! coordinates. Reverse-mode gradients are assembled from per-layer adjoints.

pub mod layers;
pub mod tensor;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{gauss_cdf, gelu, gelu_grad, GatLayer, GcnLayer, Linear, Neighborhood};
pub use tensor::{matmul, matmul_a_bt, matmul_at_b, NnError, Tensor2};

use crate::scalar::Scalar;
use layers::{GatTrace, GcnTrace};

pub const GNN_LAYERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Gcn,
    Gat,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Architecture::Gcn => write!(f, "gcn"),
            Architecture::Gat => write!(f, "gat"),
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Architecture::Gcn),
            "gat" => Ok(Architecture::Gat),
            other => Err(format!("unsupported architecture: {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GnnLayer<S> {
    Gcn(GcnLayer<S>),
    Gat(GatLayer<S>),
}

/// Model parameters. The input embedding width is 2 + (n_classes + 1) + 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentModel<S> {
    pub arch: Architecture,
    pub n_classes: usize,
    pub width: usize,
    pub encoder: Linear<S>,
    pub layers: Vec<GnnLayer<S>>,
    pub decoder: Linear<S>,
}

/// Gradient accumulators, tensor-for-tensor parallel to the model.
#[derive(Debug, Clone)]
pub struct ModelGrads<S> {
    pub encoder: Linear<S>,
    pub layers: Vec<GnnLayer<S>>,
    pub decoder: Linear<S>,
}

pub fn embedding_dim(n_classes: usize) -> usize {
    2 + n_classes + 1 + 4
}

fn xavier<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2<S> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from(rng.random_range(-bound..bound)).unwrap())
        .collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

impl<S: Scalar> AlignmentModel<S> {
    /// Seeded initialization: uniform Xavier weights, zero biases.
    pub fn init(arch: Architecture, n_classes: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_dim = embedding_dim(n_classes);
        let encoder = Linear { weight: xavier(&mut rng, input_dim, width), bias: Tensor2::zeros(1, width) };
        let layers = (0..GNN_LAYERS)
            .map(|_| match arch {
                Architecture::Gcn => GnnLayer::Gcn(GcnLayer { weight: xavier(&mut rng, width, width) }),
                Architecture::Gat => GnnLayer::Gat(GatLayer {
                    w_src: xavier(&mut rng, width, width),
                    w_dst: xavier(&mut rng, width, width),
                    attn: xavier(&mut rng, 1, width),
                    theta: xavier(&mut rng, width, width),
                }),
            })
            .collect();
        let decoder = Linear { weight: xavier(&mut rng, width, 2), bias: Tensor2::zeros(1, 2) };
        Self { arch, n_classes, width, encoder, layers, decoder }
    }

    pub fn input_dim(&self) -> usize {
        embedding_dim(self.n_classes)
    }

    /// Encoder stage: GeLU(X W + b).
    pub fn encode(&self, embeddings: &Tensor2<S>) -> Result<Tensor2<S>, NnError> {
        Ok(self.encoder.forward(embeddings)?.map(gelu))
    }

    /// Decoder stage: h W + b, rows are predicted global-map coordinates.
    pub fn decode(&self, h: &Tensor2<S>) -> Result<Tensor2<S>, NnError> {
        self.decoder.forward(h)
    }

    /// Parameter tensors in a fixed traversal order.
    pub fn params(&self) -> Vec<&Tensor2<S>> {
        let mut out = vec![&self.encoder.weight, &self.encoder.bias];
        for layer in &self.layers {
            match layer {
                GnnLayer::Gcn(l) => out.push(&l.weight),
                GnnLayer::Gat(l) => {
                    out.extend([&l.w_src, &l.w_dst, &l.attn, &l.theta]);
                }
            }
        }
        out.extend([&self.decoder.weight, &self.decoder.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2<S>> {
        let mut out: Vec<&mut Tensor2<S>> = vec![&mut self.encoder.weight, &mut self.encoder.bias];
        for layer in &mut self.layers {
            match layer {
                GnnLayer::Gcn(l) => out.push(&mut l.weight),
                GnnLayer::Gat(l) => {
                    out.push(&mut l.w_src);
                    out.push(&mut l.w_dst);
                    out.push(&mut l.attn);
                    out.push(&mut l.theta);
                }
            }
        }
        out.push(&mut self.decoder.weight);
        out.push(&mut self.decoder.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.data().len()).sum()
    }
}

impl<S: Scalar> ModelGrads<S> {
    pub fn zeros_like(model: &AlignmentModel<S>) -> Self {
        let width = model.width;
        Self {
            encoder: Linear::zeros(model.input_dim(), width),
            layers: model
                .layers
                .iter()
                .map(|l| match l {
                    GnnLayer::Gcn(_) => GnnLayer::Gcn(GcnLayer::zeros(width)),
                    GnnLayer::Gat(_) => GnnLayer::Gat(GatLayer::zeros(width)),
                })
                .collect(),
            decoder: Linear::zeros(width, 2),
        }
    }

    pub fn params(&self) -> Vec<&Tensor2<S>> {
        let mut out = vec![&self.encoder.weight, &self.encoder.bias];
        for layer in &self.layers {
            match layer {
                GnnLayer::Gcn(l) => out.push(&l.weight),
                GnnLayer::Gat(l) => out.extend([&l.w_src, &l.w_dst, &l.attn, &l.theta]),
            }
        }
        out.extend([&self.decoder.weight, &self.decoder.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor2<S>> {
        let mut out: Vec<&mut Tensor2<S>> = vec![&mut self.encoder.weight, &mut self.encoder.bias];
        for layer in &mut self.layers {
            match layer {
                GnnLayer::Gcn(l) => out.push(&mut l.weight),
                GnnLayer::Gat(l) => {
                    out.push(&mut l.w_src);
                    out.push(&mut l.w_dst);
                    out.push(&mut l.attn);
                    out.push(&mut l.theta);
                }
            }
        }
        out.push(&mut self.decoder.weight);
        out.push(&mut self.decoder.bias);
        out
    }

    pub fn add_scaled(&mut self, other: &Self, s: S) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.add_scaled(b, s);
        }
    }

    pub fn scale(&mut self, s: S) {
        for t in self.params_mut() {
            t.scale(s);
        }
    }
}

enum StageTrace<S> {
    Gcn(GcnTrace<S>),
    Gat(GatTrace<S>),
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardTrace<S> {
    enc_pre: Tensor2<S>,
    /// Input to each GNN layer (post-activation of the previous stage).
    layer_inputs: Vec<Tensor2<S>>,
    /// Pre-activation output of each GNN layer.
    layer_pres: Vec<Tensor2<S>>,
    stages: Vec<StageTrace<S>>,
    decoder_input: Tensor2<S>,
}

/// Full pipeline: decode(L4(...L1(encode(x))...)). GeLU between stages except
/// after the last GNN layer.
pub fn forward<S: Scalar>(
    model: &AlignmentModel<S>,
    nbhd: &Neighborhood<S>,
    embeddings: &Tensor2<S>,
) -> Result<(Tensor2<S>, ForwardTrace<S>), NnError> {
    let enc_pre = model.encoder.forward(embeddings)?;
    let mut h = enc_pre.map(gelu);
    let mut layer_inputs = Vec::with_capacity(model.layers.len());
    let mut layer_pres = Vec::with_capacity(model.layers.len());
    let mut stages = Vec::with_capacity(model.layers.len());
    let last = model.layers.len() - 1;
    for (k, layer) in model.layers.iter().enumerate() {
        layer_inputs.push(h.clone());
        let (pre, stage) = match layer {
            GnnLayer::Gcn(l) => {
                let (pre, trace) = l.forward(nbhd, &h)?;
                (pre, StageTrace::Gcn(trace))
            }
            GnnLayer::Gat(l) => {
                let (pre, trace) = l.forward(nbhd, &h)?;
                (pre, StageTrace::Gat(trace))
            }
        };
        h = if k < last { pre.map(gelu) } else { pre.clone() };
        layer_pres.push(pre);
        stages.push(stage);
    }
    let pred = model.decoder.forward(&h)?;
    debug_assert!(pred.is_finite(), "non-finite values in forward pass");
    Ok((
        pred,
        ForwardTrace { enc_pre, layer_inputs, layer_pres, stages, decoder_input: h },
    ))
}

/// Accumulates parameter gradients for d(loss)/d(pred) into `grads`.
pub fn backward<S: Scalar>(
    model: &AlignmentModel<S>,
    nbhd: &Neighborhood<S>,
    embeddings: &Tensor2<S>,
    trace: &ForwardTrace<S>,
    d_pred: &Tensor2<S>,
    grads: &mut ModelGrads<S>,
) {
    let mut d_h = model.decoder.backward(&trace.decoder_input, d_pred, &mut grads.decoder);
    let last = model.layers.len() - 1;
    for k in (0..model.layers.len()).rev() {
        if k < last {
            // activation between stages
            let pre = &trace.layer_pres[k];
            for (d, &z) in d_h.data_mut().iter_mut().zip(pre.data()) {
                *d = *d * gelu_grad(z);
            }
        }
        d_h = match (&model.layers[k], &trace.stages[k], &mut grads.layers[k]) {
            (GnnLayer::Gcn(l), StageTrace::Gcn(t), GnnLayer::Gcn(g)) => l.backward(nbhd, t, &d_h, g),
            (GnnLayer::Gat(l), StageTrace::Gat(t), GnnLayer::Gat(g)) => {
                l.backward(nbhd, &trace.layer_inputs[k], t, &d_h, g)
            }
            _ => unreachable!("trace/grads shape follows the model"),
        };
    }
    for (d, &z) in d_h.data_mut().iter_mut().zip(trace.enc_pre.data()) {
        *d = *d * gelu_grad(z);
    }
    model.encoder.backward(embeddings, &d_h, &mut grads.encoder);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_zero_weights_gives_zeros() {
        let mut model = AlignmentModel::<f64>::init(Architecture::Gcn, 5, 8, 0);
        model.encoder.weight.fill(0.0);
        model.encoder.bias.fill(0.0);
        let x = Tensor2::from_vec(2, model.input_dim(), vec![1.0; 2 * model.input_dim()]).unwrap();
        let h = model.encode(&x).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_identity_scalar_matches_gaussian_cdf_value() {
        // one input feature routed through an identity-like weight
        let mut model = AlignmentModel::<f64>::init(Architecture::Gcn, 0, 1, 0);
        model.encoder.weight.fill(0.0);
        model.encoder.weight.set(0, 0, 1.0);
        model.encoder.bias.fill(0.0);
        let mut x = Tensor2::zeros(1, model.input_dim());
        x.set(0, 0, 1.0);
        let h = model.encode(&x).unwrap();
        assert!((h.at(0, 0) - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn decode_identity_when_width_two() {
        let mut model = AlignmentModel::<f64>::init(Architecture::Gcn, 5, 2, 0);
        model.decoder.weight = Tensor2::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        model.decoder.bias.fill(0.0);
        let h = Tensor2::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = model.decode(&h).unwrap();
        assert_eq!(out.data(), h.data());
    }

    #[test]
    fn forward_is_deterministic() {
        for arch in [Architecture::Gcn, Architecture::Gat] {
            let model = AlignmentModel::<f64>::init(arch, 3, 8, 42);
            let n = 4;
            let adj = [
                0u8, 1, 0, 1, //
                1, 0, 1, 0, //
                0, 1, 0, 1, //
                1, 0, 1, 0,
            ];
            let nbhd = Neighborhood::from_dense(n, &adj).unwrap();
            let x = Tensor2::from_vec(
                n,
                embedding_dim(3),
                (0..n * embedding_dim(3)).map(|i| (i as f64 * 0.37).sin()).collect(),
            )
            .unwrap();
            let (a, _) = forward(&model, &nbhd, &x).unwrap();
            let (b, _) = forward(&model, &nbhd, &x).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_shapes_consistent() {
        let a = AlignmentModel::<f64>::init(Architecture::Gat, 5, 16, 7);
        let b = AlignmentModel::<f64>::init(Architecture::Gat, 5, 16, 7);
        assert_eq!(a, b);
        assert_eq!(a.params().len(), 2 + 4 * 4 + 2);
        let c = AlignmentModel::<f64>::init(Architecture::Gat, 5, 16, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let model = AlignmentModel::<f64>::init(Architecture::Gcn, 5, 8, 0);
        let bad = Tensor2::<f64>::zeros(2, 3);
        assert!(matches!(model.encode(&bad), Err(NnError::ShapeMismatch(_))));
    }
}
