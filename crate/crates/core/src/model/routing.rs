//! Top-K routing and the per-token mixture, without a tape.

use alloc::vec;
use alloc::vec::Vec;

use super::params::{ExpertParams, MoeLayerParams};
use crate::autodiff::select_top_k;
use crate::error::{Error, Result};

/// Experts chosen for one token and their mixture weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    /// Selected experts, highest logit first.
    pub indices: Vec<usize>,
    /// Softmax over the selected logits only; sums to 1.
    pub weights: Vec<f64>,
}

/// Selects the `k` largest gate logits after removing `masked` experts and
/// renormalizes over the survivors.
pub fn route_top_k(gate_logits: &[f64], k: usize, masked: &[usize]) -> Result<Routing> {
    if gate_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gate logits".into()));
    }
    let indices = select_top_k(gate_logits, k, masked)?;
    let max = indices.first().map_or(0.0, |&i| gate_logits[i]);
    let exps: Vec<f64> = indices.iter().map(|&i| libm::exp(gate_logits[i] - max)).collect();
    let total: f64 = exps.iter().sum();
    let weights = exps.into_iter().map(|e| e / total).collect();
    Ok(Routing { indices, weights })
}

fn silu(x: f64) -> f64 {
    x / (1.0 + libm::exp(-x))
}

/// `x` times a row-major `rows x cols` matrix.
fn vec_mat(x: &[f64], m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (p, &xv) in x.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(&m[p * cols..(p + 1) * cols]) {
            *o += xv * w;
        }
    }
    out
}

impl ExpertParams {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let h = self.up.last_dim();
        let d = self.down.last_dim();
        let up = vec_mat(x, self.up.data(), h);
        let gate = vec_mat(x, self.gate.data(), h);
        let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        vec_mat(&act, self.down.data(), d)
    }
}

impl MoeLayerParams {
    pub fn num_experts(&self) -> usize {
        self.gate_weights.last_dim()
    }

    pub fn gate_logits(&self, x: &[f64]) -> Vec<f64> {
        vec_mat(x, self.gate_weights.data(), self.num_experts())
    }

    /// Routing-weighted sum of the selected experts' outputs for a single
    /// token. Unselected experts are never evaluated.
    pub fn forward_token(&self, x: &[f64], k: usize, masked: &[usize]) -> Result<Vec<f64>> {
        let d = self.gate_weights.shape()[0];
        if x.len() != d {
            return Err(Error::ShapeMismatch {
                op: "moe_layer_forward",
                left: vec![x.len()],
                right: self.gate_weights.shape().to_vec(),
            });
        }
        let routing = route_top_k(&self.gate_logits(x), k, masked)?;
        let mut y = vec![0.0; d];
        for (&e, &w) in routing.indices.iter().zip(&routing.weights) {
            for (acc, v) in y.iter_mut().zip(self.experts[e].forward(x)) {
                *acc += w * v;
            }
        }
        Ok(y)
    }
}
