//! Layers of the alignment model: linear encoder/decoder, symmetric-normalized
//! graph convolution, and single-head attention aggregation. Every layer has a
//! hand-derived backward pass; exactness is enforced by finite-difference tests.

use serde::{Deserialize, Serialize};

use super::tensor::{matmul, matmul_a_bt, matmul_at_b, NnError, Tensor2};
use crate::scalar::Scalar;

const LEAKY_SLOPE: f64 = 0.2;

/// Standard normal CDF.
pub fn gauss_cdf<S: Scalar>(x: S) -> S {
    let half = S::from(0.5).unwrap();
    half * (S::one() + (x / S::SQRT_2()).erf())
}

/// Exact GeLU: x * Phi(x).
pub fn gelu<S: Scalar>(x: S) -> S {
    x * gauss_cdf(x)
}

/// d/dx GeLU = Phi(x) + x * phi(x).
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let inv_sqrt_2pi = S::from(1.0 / (2.0 * std::f64::consts::PI).sqrt()).unwrap();
    let half = S::from(0.5).unwrap();
    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
    gauss_cdf(x) + x * pdf
}

fn leaky<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        x
    } else {
        S::from(LEAKY_SLOPE).unwrap() * x
    }
}

fn leaky_grad<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one()
    } else {
        S::from(LEAKY_SLOPE).unwrap()
    }
}

/// Self-inclusive neighbor lists plus the symmetric normalization coefficients
/// (d_u d_v)^{-1/2} of the self-looped adjacency.
#[derive(Debug, Clone)]
pub struct Neighborhood<S> {
    n: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    gcn_coeff: Vec<S>,
}

impl<S: Scalar> Neighborhood<S> {
    /// `adj` is a dense row-major n x n 0/1 matrix with zero diagonal.
    pub fn from_dense(n: usize, adj: &[u8]) -> Result<Self, NnError> {
        if adj.len() != n * n {
            return Err(NnError::ShapeMismatch(format!(
                "adjacency for {n} nodes needs {} entries, got {}",
                n * n,
                adj.len()
            )));
        }
        let mut degrees = vec![S::zero(); n];
        for (u, d) in degrees.iter_mut().enumerate() {
            let mut count = 1usize; // self loop
            for v in 0..n {
                if adj[u * n + v] != 0 {
                    count += 1;
                }
            }
            *d = S::from(count).unwrap();
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::new();
        let mut gcn_coeff = Vec::new();
        offsets.push(0);
        for u in 0..n {
            for v in 0..n {
                if v == u || adj[u * n + v] != 0 {
                    targets.push(v);
                    gcn_coeff.push(S::one() / (degrees[u] * degrees[v]).sqrt());
                }
            }
            offsets.push(targets.len());
        }
        Ok(Self { n, offsets, targets, gcn_coeff })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.targets[self.offsets[u]..self.offsets[u + 1]]
    }

    fn coeffs(&self, u: usize) -> &[S] {
        &self.gcn_coeff[self.offsets[u]..self.offsets[u + 1]]
    }

    /// out[u] = sum over self-inclusive neighbors v of coeff(u,v) h[v].
    /// The coefficient matrix is symmetric, so this also applies its transpose.
    pub fn aggregate(&self, h: &Tensor2<S>) -> Tensor2<S> {
        let cols = h.cols();
        let mut out = Tensor2::zeros(self.n, cols);
        for u in 0..self.n {
            let (targets, coeffs) = (self.neighbors(u), self.coeffs(u));
            let orow = &mut out.row_mut(u)[..];
            for (&v, &c) in targets.iter().zip(coeffs) {
                let hrow = h.row(v);
                for (o, &x) in orow.iter_mut().zip(hrow) {
                    *o = *o + c * x;
                }
            }
        }
        out
    }
}

/// Fully connected layer, weight laid out input x output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<S> {
    pub weight: Tensor2<S>,
    pub bias: Tensor2<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor2::zeros(input, output), bias: Tensor2::zeros(1, output) }
    }

    /// x W + b
    pub fn forward(&self, x: &Tensor2<S>) -> Result<Tensor2<S>, NnError> {
        if x.cols() != self.weight.rows() {
            return Err(NnError::ShapeMismatch(format!(
                "linear layer expects {} input columns, got {}",
                self.weight.rows(),
                x.cols()
            )));
        }
        let mut out = matmul(x, &self.weight);
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for (o, &b) in row.iter_mut().zip(self.bias.data()) {
                *o = *o + b;
            }
        }
        Ok(out)
    }

    /// Returns d_input and accumulates weight/bias grads.
    pub fn backward(
        &self,
        x: &Tensor2<S>,
        d_out: &Tensor2<S>,
        grads: &mut Linear<S>,
    ) -> Tensor2<S> {
        grads.weight.add_assign(&matmul_at_b(x, d_out));
        grads.bias.add_assign(&d_out.col_sums());
        matmul_a_bt(d_out, &self.weight)
    }
}

/// Graph convolution: Theta applied to the symmetric-normalized, self-looped
/// neighborhood average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnLayer<S> {
    pub weight: Tensor2<S>,
}

pub struct GcnTrace<S> {
    aggregated: Tensor2<S>,
}

impl<S: Scalar> GcnLayer<S> {
    pub fn zeros(width: usize) -> Self {
        Self { weight: Tensor2::zeros(width, width) }
    }

    pub fn forward(
        &self,
        nbhd: &Neighborhood<S>,
        h: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, GcnTrace<S>), NnError> {
        if h.rows() != nbhd.node_count() || h.cols() != self.weight.rows() {
            return Err(NnError::ShapeMismatch(format!(
                "gcn layer expects {}x{}, got {}x{}",
                nbhd.node_count(),
                self.weight.rows(),
                h.rows(),
                h.cols()
            )));
        }
        let aggregated = nbhd.aggregate(h);
        let out = matmul(&aggregated, &self.weight);
        Ok((out, GcnTrace { aggregated }))
    }

    pub fn backward(
        &self,
        nbhd: &Neighborhood<S>,
        trace: &GcnTrace<S>,
        d_out: &Tensor2<S>,
        grads: &mut GcnLayer<S>,
    ) -> Tensor2<S> {
        grads.weight.add_assign(&matmul_at_b(&trace.aggregated, d_out));
        let d_agg = matmul_a_bt(d_out, &self.weight);
        nbhd.aggregate(&d_agg)
    }
}

/// Single-head attention layer. Scores are a . LeakyReLU(W_src h_u + W_dst h_v),
/// normalized by softmax over the self-inclusive neighborhood of u; values go
/// through Theta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayer<S> {
    pub w_src: Tensor2<S>,
    pub w_dst: Tensor2<S>,
    pub attn: Tensor2<S>,
    pub theta: Tensor2<S>,
}

pub struct GatTrace<S> {
    p: Tensor2<S>,
    q: Tensor2<S>,
    m: Tensor2<S>,
    /// Attention weights aligned with the neighborhood's target list.
    alpha: Vec<S>,
}

impl<S: Scalar> GatTrace<S> {
    pub fn alpha(&self) -> &[S] {
        &self.alpha
    }
}

impl<S: Scalar> GatLayer<S> {
    pub fn zeros(width: usize) -> Self {
        Self {
            w_src: Tensor2::zeros(width, width),
            w_dst: Tensor2::zeros(width, width),
            attn: Tensor2::zeros(1, width),
            theta: Tensor2::zeros(width, width),
        }
    }

    pub fn forward(
        &self,
        nbhd: &Neighborhood<S>,
        h: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, GatTrace<S>), NnError> {
        let width = self.theta.rows();
        if h.rows() != nbhd.node_count() || h.cols() != width {
            return Err(NnError::ShapeMismatch(format!(
                "gat layer expects {}x{}, got {}x{}",
                nbhd.node_count(),
                width,
                h.rows(),
                h.cols()
            )));
        }
        let p = matmul(h, &self.w_src);
        let q = matmul(h, &self.w_dst);
        let m = matmul(h, &self.theta);
        let a = self.attn.data();

        let mut alpha = vec![S::zero(); nbhd.targets.len()];
        let mut out = Tensor2::zeros(h.rows(), width);
        let mut scores: Vec<S> = Vec::new();
        for u in 0..nbhd.node_count() {
            let targets = nbhd.neighbors(u);
            scores.clear();
            let prow = p.row(u);
            let mut max = S::neg_infinity();
            for &v in targets {
                let qrow = q.row(v);
                let mut e = S::zero();
                for f in 0..width {
                    e = e + a[f] * leaky(prow[f] + qrow[f]);
                }
                if e > max {
                    max = e;
                }
                scores.push(e);
            }
            let mut denom = S::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom = denom + *s;
            }
            let orow = out.row_mut(u);
            for (k, &v) in targets.iter().enumerate() {
                let w = scores[k] / denom;
                alpha[nbhd.offsets[u] + k] = w;
                let mrow = m.row(v);
                for (o, &x) in orow.iter_mut().zip(mrow) {
                    *o = *o + w * x;
                }
            }
        }
        Ok((out, GatTrace { p, q, m, alpha }))
    }

    pub fn backward(
        &self,
        nbhd: &Neighborhood<S>,
        input: &Tensor2<S>,
        trace: &GatTrace<S>,
        d_out: &Tensor2<S>,
        grads: &mut GatLayer<S>,
    ) -> Tensor2<S> {
        let width = self.theta.rows();
        let n = nbhd.node_count();
        let a = self.attn.data();
        let mut d_p = Tensor2::zeros(n, width);
        let mut d_q = Tensor2::zeros(n, width);
        let mut d_m = Tensor2::zeros(n, width);
        let mut d_a = vec![S::zero(); width];

        for u in 0..n {
            let targets = nbhd.neighbors(u);
            let span = nbhd.offsets[u]..nbhd.offsets[u + 1];
            let alpha = &trace.alpha[span];
            let drow = d_out.row(u);

            // dalpha_k = d_out[u] . m[v_k]; softmax backward per neighborhood
            let mut d_alpha: Vec<S> = Vec::with_capacity(targets.len());
            let mut inner = S::zero();
            for (k, &v) in targets.iter().enumerate() {
                let mrow = trace.m.row(v);
                let mut da = S::zero();
                for f in 0..width {
                    da = da + drow[f] * mrow[f];
                }
                inner = inner + alpha[k] * da;
                d_alpha.push(da);
            }
            let prow = trace.p.row(u);
            for (k, &v) in targets.iter().enumerate() {
                // accumulate value-path gradient
                for f in 0..width {
                    let dm = d_m.row_mut(v);
                    dm[f] = dm[f] + alpha[k] * drow[f];
                }
                let d_e = alpha[k] * (d_alpha[k] - inner);
                let qrow = trace.q.row(v);
                for f in 0..width {
                    let z = prow[f] + qrow[f];
                    let through = d_e * a[f] * leaky_grad(z);
                    d_p.row_mut(u)[f] = d_p.row(u)[f] + through;
                    d_q.row_mut(v)[f] = d_q.row(v)[f] + through;
                    d_a[f] = d_a[f] + d_e * leaky(z);
                }
            }
        }

        grads.w_src.add_assign(&matmul_at_b(input, &d_p));
        grads.w_dst.add_assign(&matmul_at_b(input, &d_q));
        grads.theta.add_assign(&matmul_at_b(input, &d_m));
        for (g, d) in grads.attn.data_mut().iter_mut().zip(&d_a) {
            *g = *g + *d;
        }

        let mut d_h = matmul_a_bt(&d_p, &self.w_src);
        d_h.add_assign(&matmul_a_bt(&d_q, &self.w_dst));
        d_h.add_assign(&matmul_a_bt(&d_m, &self.theta));
        d_h
    }
}
