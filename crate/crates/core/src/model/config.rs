use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Shape of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: byte vocabulary, 8 layers of 8 experts, top-2.
    fn default() -> Self {
        ModelConfig {
            num_layers: 8,
            num_experts: 8,
            top_k: 2,
            model_dim: 64,
            hidden_dim: 128,
            vocab_size: 256,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
            ("model_dim", self.model_dim),
            ("hidden_dim", self.hidden_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.top_k > self.num_experts {
            return Err(Error::InvalidConfig(format!(
                "top_k ({}) exceeds num_experts ({})",
                self.top_k, self.num_experts
            )));
        }
        Ok(())
    }
}

/// Where a suppression mask is applied during a generation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SuppressionScope {
    /// Prompt prefill and every decoded token.
    #[default]
    Everywhere,
    /// Only positions produced by decoding; the prompt is routed normally.
    DecodeOnly,
}

/// Set of (layer, expert) pairs the router may never select.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SuppressionMask {
    pairs: BTreeSet<(usize, usize)>,
}

impl SuppressionMask {
    pub fn empty() -> Self {
        SuppressionMask::default()
    }

    /// Duplicates collapse.
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        SuppressionMask {
            pairs: pairs.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, layer: usize, expert: usize) {
        self.pairs.insert((layer, expert));
    }

    pub fn contains(&self, layer: usize, expert: usize) -> bool {
        self.pairs.contains(&(layer, expert))
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    /// Pairs in (layer, expert) order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn experts_in_layer(&self, layer: usize) -> Vec<usize> {
        self.pairs
            .range((layer, 0)..(layer + 1, 0))
            .map(|&(_, e)| e)
            .collect()
    }

    /// Checks every pair lies inside `[0, layers) x [0, experts)`.
    pub fn validate(&self, layers: usize, experts: usize) -> Result<()> {
        match self.pairs.iter().find(|&&(l, e)| l >= layers || e >= experts) {
            Some(&(layer, expert)) => Err(Error::MaskOutOfRange { layer, expert }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            top_k: 9,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = ModelConfig {
            num_layers: 0,
            ..ModelConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn mask_dedups_and_groups_by_layer() {
        let m = SuppressionMask::new([(1, 3), (0, 2), (1, 3), (1, 0)]);
        assert_eq!(m.len(), 3);
        assert_eq!(m.experts_in_layer(1), [0, 3]);
        assert!(m.experts_in_layer(2).is_empty());
        assert!(m.validate(2, 4).is_ok());
        assert_eq!(
            m.validate(1, 4),
            Err(Error::MaskOutOfRange { layer: 1, expert: 0 })
        );
    }
}
