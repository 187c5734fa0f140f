//! Decoder-only toy language model with top-K routed SwiGLU experts.
//!
//! Each block is `x + attn(rms(x))` followed by `x + moe(rms(x))`, with a
//! single causal attention head. The output head is the transposed token
//! embedding scaled by `1/sqrt(model_dim)`.

mod config;
mod params;
mod routing;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub use config::{ModelConfig, SuppressionMask, SuppressionScope};
pub use params::{BlockParams, ExpertParams, ModelParams, MoeLayerParams, INIT_SCALE};
pub use routing::{route_top_k, Routing};

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Byte-level tokenization: each byte is its own token id.
pub fn encode_bytes(text: &[u8], vocab_size: usize) -> Result<Vec<usize>> {
    text.iter()
        .map(|&b| {
            let t = b as usize;
            if t < vocab_size {
                Ok(t)
            } else {
                Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: vocab_size,
                })
            }
        })
        .collect()
}

/// Inverse of [`encode_bytes`]. Ids above 255 become U+FFFD, as do invalid
/// UTF-8 sequences.
pub fn decode_bytes(tokens: &[usize]) -> alloc::string::String {
    let mut out = alloc::string::String::new();
    let mut run: Vec<u8> = Vec::new();
    for &t in tokens {
        match u8::try_from(t) {
            Ok(b) => run.push(b),
            Err(_) => {
                out.push_str(&alloc::string::String::from_utf8_lossy(&run));
                run.clear();
                out.push(char::REPLACEMENT_CHARACTER);
            }
        }
    }
    out.push_str(&alloc::string::String::from_utf8_lossy(&run));
    out
}

/// Tape identifier of the router matrix of `layer`.
pub fn router_param(layer: usize) -> ParamId {
    ParamId::new(format!("blocks.{layer}.router"))
}

/// Expert selections of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingTrace {
    num_layers: usize,
    top_k: usize,
    positions: usize,
    /// `[layer][position][k]`, highest logit first.
    selected: Vec<usize>,
}

impl RoutingTrace {
    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn selected(&self, layer: usize, position: usize) -> &[usize] {
        let start = (layer * self.positions + position) * self.top_k;
        &self.selected[start..start + self.top_k]
    }
}

#[derive(Debug, Clone)]
pub struct LmOutput {
    /// `[positions, vocab_size]`
    pub logits: Tensor,
    /// Mean next-token cross-entropy over positions `1..T`.
    pub loss: f64,
    pub routing: RoutingTrace,
}

#[derive(Debug, Clone)]
pub struct GateGradients {
    pub loss: f64,
    /// `d loss / d W_g` per layer, each `model_dim x num_experts`.
    pub per_layer: Vec<Tensor>,
    pub routing: RoutingTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
}

impl Generation {
    pub fn new_tokens(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    config: ModelConfig,
    params: ModelParams,
}

struct Pass {
    logits: Var,
    loss: Option<Var>,
    routing: RoutingTrace,
}

impl MoeModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_init_scale(config, INIT_SCALE)
    }

    pub fn with_init_scale(config: ModelConfig, scale: f64) -> Result<Self> {
        let params = ModelParams::init(&config, scale)?;
        Ok(MoeModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    fn check_tokens(&self, tokens: &[usize], min: usize) -> Result<()> {
        if tokens.len() < min {
            return Err(Error::SequenceTooShort {
                len: tokens.len(),
                min,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the full forward pass on `tape`.
    ///
    /// Suppressed experts are excluded from routing at positions
    /// `>= mask_from`.
    fn record<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        tokens: &[usize],
        mask: &SuppressionMask,
        mask_from: usize,
        with_loss: bool,
    ) -> Result<Pass> {
        let cfg = &self.config;
        mask.validate(cfg.num_layers, cfg.num_experts)?;
        let t = tokens.len();
        let p = &self.params;

        let emb = tape.param_ref(ParamId::new("embedding"), &p.embedding)?;
        let mut x = tape.embedding(emb, tokens)?;

        let mut causal = Tensor::zeros(vec![t, t]);
        for i in 0..t {
            for v in &mut causal.row_mut(i)[i + 1..] {
                *v = f64::NEG_INFINITY;
            }
        }
        let causal = tape.constant(causal)?;
        let attn_scale = 1.0 / libm::sqrt(cfg.model_dim as f64);

        let mut selected = Vec::with_capacity(cfg.num_layers * t * cfg.top_k);
        for (l, block) in p.blocks.iter().enumerate() {
            let name = |part: &str| ParamId::new(format!("blocks.{l}.{part}"));

            let g = tape.param_ref(name("attn_norm"), &block.attn_norm)?;
            let xn = tape.rms_normalize(x, g)?;
            let wq = tape.param_ref(name("wq"), &block.wq)?;
            let wk = tape.param_ref(name("wk"), &block.wk)?;
            let wv = tape.param_ref(name("wv"), &block.wv)?;
            let wo = tape.param_ref(name("wo"), &block.wo)?;
            let q = tape.matmul(xn, wq)?;
            let k = tape.matmul(xn, wk)?;
            let v = tape.matmul(xn, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, attn_scale)?;
            let scores = tape.add(scores, causal)?;
            let attn = tape.softmax(scores)?;
            let ctx = tape.matmul(attn, v)?;
            let out = tape.matmul(ctx, wo)?;
            x = tape.add(x, out)?;

            let g = tape.param_ref(name("moe_norm"), &block.moe_norm)?;
            let hn = tape.rms_normalize(x, g)?;
            let router = tape.param_ref(router_param(l), &block.moe.gate_weights)?;
            let logits = tape.matmul(hn, router)?;
            let excluded = mask.experts_in_layer(l);
            let masked = tape.top_k_mask_excluding(logits, cfg.top_k, &excluded, mask_from)?;
            let weights = tape.softmax(masked)?;
            let kept = tape
                .kept_indices(masked)
                .map(<[Vec<usize>]>::to_vec)
                .unwrap_or_default();

            let mut mix: Option<Var> = None;
            for (e, expert) in block.moe.experts.iter().enumerate() {
                let rows: Vec<usize> = (0..t).filter(|&r| kept[r].contains(&e)).collect();
                if rows.is_empty() {
                    continue;
                }
                let ename = |part: &str| ParamId::new(format!("blocks.{l}.experts.{e}.{part}"));
                let xe = tape.gather_rows(hn, &rows)?;
                let w_up = tape.param_ref(ename("up"), &expert.up)?;
                let w_gate = tape.param_ref(ename("gate"), &expert.gate)?;
                let w_down = tape.param_ref(ename("down"), &expert.down)?;
                let up = tape.matmul(xe, w_up)?;
                let gate = tape.matmul(xe, w_gate)?;
                let gate = tape.silu(gate)?;
                let act = tape.multiply(gate, up)?;
                let y = tape.matmul(act, w_down)?;
                let at: Vec<(usize, usize)> = rows.iter().map(|&r| (r, e)).collect();
                let w = tape.gather_elems(weights, &at)?;
                let y = tape.multiply(y, w)?;
                let y = tape.scatter_rows(y, &rows, t)?;
                mix = Some(match mix {
                    Some(acc) => tape.add(acc, y)?,
                    None => y,
                });
            }
            let mix = mix.ok_or(Error::NotEnoughExperts {
                k: cfg.top_k,
                available: 0,
            })?;
            x = tape.add(x, mix)?;
            for sel in &kept {
                selected.extend_from_slice(sel);
            }
        }

        let g = tape.param_ref(ParamId::new("final_norm"), &p.final_norm)?;
        let xn = tape.rms_normalize(x, g)?;
        let head = tape.transpose(emb)?;
        let logits = tape.matmul(xn, head)?;
        let logits = tape.scale(logits, 1.0 / libm::sqrt(cfg.model_dim as f64))?;

        let loss = if with_loss {
            let prefix: Vec<usize> = (0..t - 1).collect();
            let pred = tape.gather_rows(logits, &prefix)?;
            Some(tape.cross_entropy(pred, &tokens[1..])?)
        } else {
            None
        };

        Ok(Pass {
            logits,
            loss,
            routing: RoutingTrace {
                num_layers: cfg.num_layers,
                top_k: cfg.top_k,
                positions: t,
                selected,
            },
        })
    }

    /// Logits for every position plus the routing decisions, without a loss.
    pub fn forward_logits(
        &self,
        tokens: &[usize],
        mask: &SuppressionMask,
        mask_from: usize,
    ) -> Result<(Tensor, RoutingTrace)> {
        self.check_tokens(tokens, 1)?;
        let mut tape = Tape::new();
        let pass = self.record(&mut tape, tokens, mask, mask_from, false)?;
        Ok((tape.value(pass.logits).clone(), pass.routing))
    }

    /// Teacher-forced language-model pass over `tokens`.
    pub fn forward_lm(&self, tokens: &[usize], mask: &SuppressionMask) -> Result<LmOutput> {
        self.check_tokens(tokens, 2)?;
        let mut tape = Tape::new();
        let pass = self.record(&mut tape, tokens, mask, 0, true)?;
        let loss = pass.loss.map(|l| tape.value(l).data()[0]).unwrap_or(f64::NAN);
        Ok(LmOutput {
            logits: tape.value(pass.logits).clone(),
            loss,
            routing: pass.routing,
        })
    }

    /// Exact gradient of the sequence loss with respect to every router
    /// matrix. No other parameter gradient is materialized.
    pub fn gate_gradients(&self, tokens: &[usize], mask: &SuppressionMask) -> Result<GateGradients> {
        self.check_tokens(tokens, 2)?;
        let mut tape = Tape::new();
        let pass = self.record(&mut tape, tokens, mask, 0, true)?;
        let loss_var = pass.loss.expect("loss requested");
        let wanted: Vec<ParamId> = (0..self.config.num_layers).map(router_param).collect();
        let mut grads = tape.backward(loss_var, &wanted)?.into_inner();
        let per_layer = wanted
            .iter()
            .map(|id| grads.remove(id).expect("every wanted id is returned"))
            .collect();
        Ok(GateGradients {
            loss: tape.value(loss_var).data()[0],
            per_layer,
            routing: pass.routing,
        })
    }

    /// Appends `max_new` argmax tokens (ties to the lower id).
    pub fn generate_greedy(
        &self,
        prompt: &[usize],
        max_new: usize,
        mask: &SuppressionMask,
    ) -> Result<Vec<usize>> {
        self.generate(prompt, max_new, mask, SuppressionScope::Everywhere)
            .map(|g| g.tokens)
    }

    pub fn generate(
        &self,
        prompt: &[usize],
        max_new: usize,
        mask: &SuppressionMask,
        scope: SuppressionScope,
    ) -> Result<Generation> {
        self.check_tokens(prompt, 1)?;
        mask.validate(self.config.num_layers, self.config.num_experts)?;
        let mask_from = match scope {
            SuppressionScope::Everywhere => 0,
            SuppressionScope::DecodeOnly => prompt.len(),
        };
        let mut tokens = prompt.to_vec();
        for _ in 0..max_new {
            let (logits, _) = self.forward_logits(&tokens, mask, mask_from)?;
            let last = logits.row(logits.outer() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            tokens.push(best);
        }
        Ok(Generation {
            tokens,
            prompt_len: prompt.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_experts: 4,
            top_k: 2,
            model_dim: 8,
            hidden_dim: 12,
            vocab_size: 16,
            seed: 3,
        }
    }

    #[test]
    fn rejects_short_and_out_of_range_sequences() {
        let m = MoeModel::new(tiny()).unwrap();
        let none = SuppressionMask::empty();
        assert!(matches!(
            m.forward_lm(&[1], &none),
            Err(Error::SequenceTooShort { len: 1, min: 2 })
        ));
        assert!(matches!(
            m.forward_lm(&[1, 16], &none),
            Err(Error::TokenOutOfRange { token: 16, vocab: 16 })
        ));
        let bad = SuppressionMask::new([(2, 0)]);
        assert!(m.forward_lm(&[1, 2], &bad).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = MoeModel::new(tiny()).unwrap();
        let none = SuppressionMask::empty();
        let a = m.forward_lm(&[1, 5, 9, 2], &none).unwrap();
        let b = m.forward_lm(&[1, 5, 9, 2], &none).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.routing, b.routing);
    }

    #[test]
    fn generate_zero_new_tokens_returns_prompt() {
        let m = MoeModel::new(tiny()).unwrap();
        let out = m.generate_greedy(&[3, 4], 0, &SuppressionMask::empty()).unwrap();
        assert_eq!(out, [3, 4]);
    }

    #[test]
    fn routing_trace_has_k_distinct_experts_per_position() {
        let m = MoeModel::new(tiny()).unwrap();
        let out = m.forward_lm(&[0, 1, 2, 3, 4], &SuppressionMask::empty()).unwrap();
        for l in 0..2 {
            for p in 0..5 {
                let s = out.routing.selected(l, p);
                assert_eq!(s.len(), 2);
                assert_ne!(s[0], s[1]);
            }
        }
    }
}
