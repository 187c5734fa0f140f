use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the seeded normal initialization.
pub const INIT_SCALE: f64 = 0.02;

/// One SwiGLU expert: `down(silu(x gate) * (x up))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// `model_dim x hidden_dim`
    pub up: Tensor,
    /// `model_dim x hidden_dim`
    pub gate: Tensor,
    /// `hidden_dim x model_dim`
    pub down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayerParams {
    /// Router `W_g`, `model_dim x num_experts`; column `e` scores expert `e`.
    pub gate_weights: Tensor,
    pub experts: Vec<ExpertParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub moe_norm: Tensor,
    pub moe: MoeLayerParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `vocab_size x model_dim`, also used (transposed) as the output head.
    pub embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Tensor,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn matrix(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| self.normal.sample(&mut self.rng))
            .collect();
        Tensor::new(vec![rows, cols], data).expect("shape matches data")
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::vector(vec![1.0; n])
}

impl ModelParams {
    /// Draws every weight matrix from `N(0, scale^2)` with a ChaCha8 stream
    /// seeded by `config.seed`. Norm gains start at 1.
    pub fn init(config: &ModelConfig, scale: f64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, scale)
            .map_err(|_| Error::InvalidConfig(alloc::format!("bad init scale {scale}")))?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            normal,
        };
        let (d, h) = (config.model_dim, config.hidden_dim);
        let embedding = init.matrix(config.vocab_size, d);
        let blocks = (0..config.num_layers)
            .map(|_| {
                let attn_norm = ones(d);
                let wq = init.matrix(d, d);
                let wk = init.matrix(d, d);
                let wv = init.matrix(d, d);
                let wo = init.matrix(d, d);
                let moe_norm = ones(d);
                let gate_weights = init.matrix(d, config.num_experts);
                let experts = (0..config.num_experts)
                    .map(|_| ExpertParams {
                        up: init.matrix(d, h),
                        gate: init.matrix(d, h),
                        down: init.matrix(h, d),
                    })
                    .collect();
                BlockParams {
                    attn_norm,
                    wq,
                    wk,
                    wv,
                    wo,
                    moe_norm,
                    moe: MoeLayerParams {
                        gate_weights,
                        experts,
                    },
                }
            })
            .collect();
        Ok(ModelParams {
            embedding,
            blocks,
            final_norm: ones(d),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig {
            num_layers: 2,
            model_dim: 8,
            hidden_dim: 16,
            vocab_size: 32,
            ..ModelConfig::default()
        };
        let a = ModelParams::init(&cfg, INIT_SCALE).unwrap();
        let b = ModelParams::init(&cfg, INIT_SCALE).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&ModelConfig { seed: 7, ..cfg }, INIT_SCALE).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.blocks[1].moe.gate_weights.shape(), &[8, 8]);
        assert_eq!(a.blocks[0].moe.experts[3].down.shape(), &[16, 8]);
    }
}
