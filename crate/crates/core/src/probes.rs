//! Per-prompt activation-count and router-gate gradient maps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{MoeModel, RoutingTrace, SuppressionMask, SuppressionScope};

/// What the values of a [`RoutingMap`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MapKind {
    /// Integer selection counts.
    RawCount,
    /// Each layer row divided by its sum.
    LayerNormalized,
    /// Mean absolute router-gate gradient per expert column.
    Gradient,
}

impl MapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MapKind::RawCount => "raw-count",
            MapKind::LayerNormalized => "layer-normalized",
            MapKind::Gradient => "gradient",
        }
    }
}

/// Tolerance on row sums of layer-normalized maps.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// A nonnegative `num_layers x num_experts` score grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMap {
    num_layers: usize,
    num_experts: usize,
    kind: MapKind,
    values: Vec<f64>,
}

impl RoutingMap {
    /// Validates shape, finiteness, nonnegativity and the per-kind rules
    /// (integral counts, unit rows).
    pub fn new(num_layers: usize, num_experts: usize, kind: MapKind, values: Vec<f64>) -> Result<Self> {
        if num_layers == 0 || num_experts == 0 || values.len() != num_layers * num_experts {
            return Err(Error::InvalidMap(format!(
                "{} values do not fill a {num_layers}x{num_experts} grid",
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            let (l, e) = (i / num_experts, i % num_experts);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidMap(format!(
                    "value {v} at layer {l}, expert {e} is not a finite nonnegative number"
                )));
            }
            if kind == MapKind::RawCount && libm::trunc(v) != v {
                return Err(Error::InvalidMap(format!(
                    "raw count {v} at layer {l}, expert {e} is not an integer"
                )));
            }
        }
        let map = RoutingMap {
            num_layers,
            num_experts,
            kind,
            values,
        };
        if kind == MapKind::LayerNormalized {
            for l in 0..num_layers {
                let s: f64 = map.row(l).iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidMap(format!(
                        "layer {l} of a normalized map sums to {s}"
                    )));
                }
            }
        }
        Ok(map)
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.num_layers, self.num_experts)
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, layer: usize, expert: usize) -> f64 {
        self.values[layer * self.num_experts + expert]
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        &self.values[layer * self.num_experts..(layer + 1) * self.num_experts]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.num_experts)
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Every raw-count row must sum to `top_k * token_count`. Returns the
    /// first offending layer.
    pub fn check_conservation(&self, top_k: usize, token_count: usize) -> Result<(), (usize, f64)> {
        let expect = (top_k * token_count) as f64;
        match self
            .rows()
            .enumerate()
            .find(|(_, r)| r.iter().sum::<f64>() != expect)
        {
            Some((l, r)) => Err((l, r.iter().sum())),
            None => Ok(()),
        }
    }
}

/// One prompt's identity, group tag and routing maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub id: String,
    pub group: String,
    pub token_count: usize,
    pub activation: RoutingMap,
    pub gradient: Option<RoutingMap>,
}

impl PromptRecord {
    pub fn validate(&self) -> Result<()> {
        if self.token_count == 0 {
            return Err(Error::InvalidMap(format!("prompt `{}` has zero tokens", self.id)));
        }
        if self.activation.kind() != MapKind::RawCount {
            return Err(Error::KindMismatch {
                expected: MapKind::RawCount.as_str(),
                found: self.activation.kind().as_str(),
            });
        }
        if let Some(g) = &self.gradient {
            if g.kind() != MapKind::Gradient {
                return Err(Error::KindMismatch {
                    expected: MapKind::Gradient.as_str(),
                    found: g.kind().as_str(),
                });
            }
            if g.dims() != self.activation.dims() {
                return Err(Error::MapShapeMismatch {
                    expected: self.activation.dims(),
                    found: g.dims(),
                });
            }
        }
        Ok(())
    }
}

/// Which tokens an activation capture counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CaptureOptions {
    /// Count the routing of greedily generated tokens as well as the prompt.
    pub include_generated: bool,
    /// Tokens to generate when `include_generated` is set.
    pub max_new_tokens: usize,
    pub scope: SuppressionScope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCapture {
    pub map: RoutingMap,
    /// Number of positions counted.
    pub token_count: usize,
}

fn count_selections(trace: &RoutingTrace, num_experts: usize) -> Result<RoutingMap> {
    let l = trace.num_layers();
    let mut counts = vec![0.0; l * num_experts];
    for layer in 0..l {
        for pos in 0..trace.positions() {
            for &e in trace.selected(layer, pos) {
                counts[layer * num_experts + e] += 1.0;
            }
        }
    }
    RoutingMap::new(l, num_experts, MapKind::RawCount, counts)
}

/// Counts, per (layer, expert), the positions whose top-K selection
/// included that expert.
pub fn capture_activations(
    model: &MoeModel,
    tokens: &[usize],
    mask: &SuppressionMask,
    options: &CaptureOptions,
) -> Result<ActivationCapture> {
    let mask_from = match options.scope {
        SuppressionScope::Everywhere => 0,
        SuppressionScope::DecodeOnly => tokens.len(),
    };
    let sequence = if options.include_generated {
        model
            .generate(tokens, options.max_new_tokens, mask, options.scope)?
            .tokens
    } else {
        tokens.to_vec()
    };
    let (_, trace) = model.forward_logits(&sequence, mask, mask_from)?;
    Ok(ActivationCapture {
        map: count_selections(&trace, model.config().num_experts)?,
        token_count: sequence.len(),
    })
}

/// `G[l][e]` = mean over the `model_dim` entries of
/// `|d loss / d W_g[:, e]|` at layer `l`, for the teacher-forced loss on
/// `tokens`.
pub fn capture_gate_gradients(model: &MoeModel, tokens: &[usize]) -> Result<RoutingMap> {
    let grads = model.gate_gradients(tokens, &SuppressionMask::empty())?;
    gradient_map(&grads.per_layer)
}

/// Reduces per-layer `model_dim x num_experts` gradient matrices to the
/// mean absolute value of each column.
pub fn gradient_map(per_layer: &[crate::Tensor]) -> Result<RoutingMap> {
    let layers = per_layer.len();
    let experts = per_layer.first().map_or(0, |g| g.last_dim());
    let mut values = vec![0.0; layers * experts];
    for (l, g) in per_layer.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("router gradient at layer {l}")));
        }
        let rows = g.outer();
        for e in 0..experts {
            let s: f64 = (0..rows).map(|r| g.at(r, e).abs()).sum();
            values[l * experts + e] = s / rows as f64;
        }
    }
    RoutingMap::new(layers, experts, MapKind::Gradient, values)
}

/// Divides each layer row by its sum.
///
/// Accepts raw counts and already-normalized maps (re-normalizing the
/// latter is the identity up to rounding).
pub fn normalize_map(raw: &RoutingMap) -> Result<RoutingMap> {
    if raw.kind() == MapKind::Gradient {
        return Err(Error::KindMismatch {
            expected: MapKind::RawCount.as_str(),
            found: raw.kind().as_str(),
        });
    }
    let mut values = Vec::with_capacity(raw.values().len());
    for (l, row) in raw.rows().enumerate() {
        let s: f64 = row.iter().sum();
        if s <= 0.0 {
            return Err(Error::ZeroRow { layer: l });
        }
        values.extend(row.iter().map(|v| v / s));
    }
    RoutingMap::new(
        raw.num_layers(),
        raw.num_experts(),
        MapKind::LayerNormalized,
        values,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_example_row() {
        let raw = RoutingMap::new(
            1,
            8,
            MapKind::RawCount,
            vec![2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 4.0],
        )
        .unwrap();
        let n = normalize_map(&raw).unwrap();
        assert_eq!(n.values(), &[0.25, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
        assert_eq!(n.kind(), MapKind::LayerNormalized);
        assert_eq!(normalize_map(&n).unwrap(), n);
    }

    #[test]
    fn normalized_total_mass_is_layer_count() {
        let raw = RoutingMap::new(3, 2, MapKind::RawCount, vec![1.0, 3.0, 2.0, 2.0, 0.0, 4.0]).unwrap();
        let n = normalize_map(&raw).unwrap();
        assert!((n.total() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_row_names_layer() {
        let raw = RoutingMap::new(2, 2, MapKind::RawCount, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(normalize_map(&raw), Err(Error::ZeroRow { layer: 1 }));
    }

    #[test]
    fn map_validation() {
        assert!(RoutingMap::new(1, 2, MapKind::RawCount, vec![1.5, 0.0]).is_err());
        assert!(RoutingMap::new(1, 2, MapKind::Gradient, vec![-1.0, 0.0]).is_err());
        assert!(RoutingMap::new(1, 2, MapKind::Gradient, vec![f64::NAN, 0.0]).is_err());
        assert!(RoutingMap::new(1, 2, MapKind::LayerNormalized, vec![0.5, 0.4]).is_err());
        assert!(RoutingMap::new(2, 2, MapKind::Gradient, vec![0.0; 3]).is_err());
    }

    #[test]
    fn gradient_maps_are_not_normalizable() {
        let g = RoutingMap::new(1, 2, MapKind::Gradient, vec![1e-4, 2e-4]).unwrap();
        assert!(matches!(normalize_map(&g), Err(Error::KindMismatch { .. })));
    }
}
