//! Ranked coverage statistics and per-layer concentration metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::probes::{normalize_map, MapKind, PromptRecord, RoutingMap};

/// Which routing signal an analysis runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signal {
    /// Layer-normalized activation counts.
    Activation,
    /// Raw router-gate gradient magnitudes.
    Gradient,
}

impl Signal {
    pub fn as_str(self) -> &'static str {
        match self {
            Signal::Activation => "activation",
            Signal::Gradient => "gradient",
        }
    }
}

/// The map a prompt contributes for `signal`.
pub fn prompt_map(record: &PromptRecord, signal: Signal) -> Result<RoutingMap> {
    match signal {
        Signal::Activation => normalize_map(&record.activation),
        Signal::Gradient => record
            .gradient
            .clone()
            .ok_or_else(|| Error::InvalidMap(format!("prompt `{}` has no gradient map", record.id))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub layer: usize,
    pub expert: usize,
    pub score: f64,
}

/// All layer-expert pairs sorted by score, descending.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedDistribution {
    num_layers: usize,
    num_experts: usize,
    entries: Vec<RankedEntry>,
    total_mass: f64,
}

impl RankedDistribution {
    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    /// Sum of the scores, accumulated in rank order.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.num_layers, self.num_experts)
    }

    /// Fraction of the total mass covered by the first `n` entries, for
    /// `n = 1..=len`.
    pub fn cumulative_coverage(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.entries
            .iter()
            .map(|e| {
                acc += e.score;
                acc / self.total_mass
            })
            .collect()
    }

    /// The first `k` (layer, expert) pairs.
    pub fn top_pairs(&self, k: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().take(k).map(|e| (e.layer, e.expert))
    }
}

/// Flattens the map and sorts by score, descending; ties keep
/// (layer, expert) order.
pub fn rank_experts(map: &RoutingMap) -> Result<RankedDistribution> {
    let (l, e) = map.dims();
    let mut entries: Vec<RankedEntry> = map
        .values()
        .iter()
        .enumerate()
        .map(|(i, &score)| RankedEntry {
            layer: i / e,
            expert: i % e,
            score,
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score));
    let total_mass: f64 = entries.iter().map(|x| x.score).sum();
    if total_mass.is_nan() || total_mass <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(RankedDistribution {
        num_layers: l,
        num_experts: e,
        entries,
        total_mass,
    })
}

/// Coverage and head statistics of a ranked distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageSummary {
    pub k80: usize,
    pub k90: usize,
    pub k95: usize,
    pub k_elbow: usize,
    pub top1: f64,
    pub top5: f64,
}

/// Smallest `n` such that the first `n` scores cover `fraction` of the mass.
fn coverage_k(scores: &[f64], total: f64, fraction: f64) -> usize {
    let mut acc = 0.0;
    for (i, s) in scores.iter().enumerate() {
        acc += s;
        if acc / total >= fraction {
            return i + 1;
        }
    }
    scores.len()
}

/// 1-based rank `i` with the largest `score[i] - score[i + 1]`; the first
/// one wins ties. A single-entry distribution reports 1.
fn elbow(scores: &[f64]) -> usize {
    let mut best = 1;
    let mut best_gap = f64::NEG_INFINITY;
    for (i, w) in scores.windows(2).enumerate() {
        let gap = w[0] - w[1];
        if gap > best_gap {
            best_gap = gap;
            best = i + 1;
        }
    }
    best
}

pub fn coverage_summary(ranked: &RankedDistribution) -> CoverageSummary {
    let scores = ranked.scores();
    let total = ranked.total_mass;
    CoverageSummary {
        k80: coverage_k(&scores, total, 0.80),
        k90: coverage_k(&scores, total, 0.90),
        k95: coverage_k(&scores, total, 0.95),
        k_elbow: elbow(&scores),
        top1: scores[0],
        top5: scores.iter().take(5).sum(),
    }
}

/// Elementwise mean of maps sharing kind and shape.
///
/// Raw counts are rejected; normalize them first.
pub fn group_mean_map(maps: &[&RoutingMap]) -> Result<RoutingMap> {
    let first = maps.first().ok_or(Error::EmptyInput("group of maps"))?;
    if first.kind() == MapKind::RawCount {
        return Err(Error::KindMismatch {
            expected: MapKind::LayerNormalized.as_str(),
            found: MapKind::RawCount.as_str(),
        });
    }
    let mut sum = vec![0.0; first.values().len()];
    for m in maps {
        if m.dims() != first.dims() {
            return Err(Error::MapShapeMismatch {
                expected: first.dims(),
                found: m.dims(),
            });
        }
        if m.kind() != first.kind() {
            return Err(Error::KindMismatch {
                expected: first.kind().as_str(),
                found: m.kind().as_str(),
            });
        }
        for (s, v) in sum.iter_mut().zip(m.values()) {
            *s += v;
        }
    }
    let n = maps.len() as f64;
    for s in &mut sum {
        *s /= n;
    }
    RoutingMap::new(first.num_layers(), first.num_experts(), first.kind(), sum)
}

/// Mean map of the records tagged `group`, for `signal`.
pub fn group_mean(records: &[PromptRecord], group: &str, signal: Signal) -> Result<RoutingMap> {
    let maps = records
        .iter()
        .filter(|r| r.group == group)
        .map(|r| prompt_map(r, signal))
        .collect::<Result<Vec<_>>>()?;
    if maps.is_empty() {
        return Err(Error::EmptyGroup(group.into()));
    }
    let refs: Vec<&RoutingMap> = maps.iter().collect();
    group_mean_map(&refs)
}

/// Concentration metrics of one layer row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSummary {
    pub layer: usize,
    /// Largest score in the layer.
    pub dominant: f64,
    /// Sum of the two largest scores.
    pub top2_sum: f64,
    /// `-sum p ln p` of the row renormalized to a distribution.
    pub entropy_nats: f64,
    /// `entropy_nats / ln E` (0 when E = 1).
    pub entropy_norm: f64,
    /// `exp(entropy_nats)`.
    pub effective_experts: f64,
    /// Experts whose score exceeds the activity epsilon.
    pub active_count: usize,
}

/// Activity threshold: exact nonzero for counts and normalized maps,
/// `1e-12` for gradient magnitudes.
pub fn default_activity_epsilon(kind: MapKind) -> f64 {
    match kind {
        MapKind::RawCount | MapKind::LayerNormalized => 0.0,
        MapKind::Gradient => 1e-12,
    }
}

pub fn layer_summary(map: &RoutingMap) -> Result<Vec<LayerSummary>> {
    layer_summary_with(map, default_activity_epsilon(map.kind()))
}

/// Per-layer metrics. Entropy always uses the renormalized row; dominant
/// and top-2 use raw magnitudes for gradient maps and the distribution
/// otherwise.
pub fn layer_summary_with(map: &RoutingMap, activity_epsilon: f64) -> Result<Vec<LayerSummary>> {
    let e = map.num_experts();
    let ln_e = libm::log(e as f64);
    map.rows()
        .enumerate()
        .map(|(layer, row)| {
            let s: f64 = row.iter().sum();
            if s.is_nan() || s <= 0.0 {
                return Err(Error::ZeroRow { layer });
            }
            let p: Vec<f64> = row.iter().map(|v| v / s).collect();
            let entropy_nats = -p
                .iter()
                .filter(|&&x| x > 0.0)
                .map(|&x| x * libm::log(x))
                .sum::<f64>();
            let entropy_nats = entropy_nats.max(0.0);
            let scale: &[f64] = if map.kind() == MapKind::Gradient { row } else { &p };
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &v in scale {
                if v > first {
                    second = first;
                    first = v;
                } else if v > second {
                    second = v;
                }
            }
            let top2_sum = if e == 1 { first } else { first + second };
            Ok(LayerSummary {
                layer,
                dominant: first,
                top2_sum,
                entropy_nats,
                entropy_norm: if e > 1 { entropy_nats / ln_e } else { 0.0 },
                effective_experts: libm::exp(entropy_nats),
                active_count: row.iter().filter(|&&v| v > activity_epsilon).count(),
            })
        })
        .collect()
}

/// Means of the layer metrics over a contiguous block of layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSummary {
    pub first_layer: usize,
    pub last_layer: usize,
    pub dominant: f64,
    pub top2_sum: f64,
    pub entropy_nats: f64,
    pub entropy_norm: f64,
    pub effective_experts: f64,
    pub active_count: f64,
}

pub fn block_average(summaries: &[LayerSummary], layers: Range<usize>) -> Result<BlockSummary> {
    if layers.is_empty() || layers.end > summaries.len() {
        return Err(Error::BadLayerRange {
            start: layers.start,
            end: layers.end,
            layers: summaries.len(),
        });
    }
    let block = &summaries[layers.clone()];
    let n = block.len() as f64;
    let mean = |f: fn(&LayerSummary) -> f64| block.iter().map(f).sum::<f64>() / n;
    Ok(BlockSummary {
        first_layer: layers.start,
        last_layer: layers.end - 1,
        dominant: mean(|s| s.dominant),
        top2_sum: mean(|s| s.top2_sum),
        entropy_nats: mean(|s| s.entropy_nats),
        entropy_norm: mean(|s| s.entropy_norm),
        effective_experts: mean(|s| s.effective_experts),
        active_count: mean(|s| s.active_count as f64),
    })
}

/// Pairs present in the top `k` of both rankings, in (layer, expert) order.
pub fn top_k_overlap(
    a: &RankedDistribution,
    b: &RankedDistribution,
    k: usize,
) -> Result<Vec<(usize, usize)>> {
    if a.dims() != b.dims() {
        return Err(Error::MapShapeMismatch {
            expected: a.dims(),
            found: b.dims(),
        });
    }
    let len = a.entries.len();
    if k == 0 || k > len {
        return Err(Error::OverlapTooLarge { k, len });
    }
    let theirs: Vec<(usize, usize)> = b.top_pairs(k).collect();
    let mut shared: Vec<(usize, usize)> = a.top_pairs(k).filter(|p| theirs.contains(p)).collect();
    shared.sort_unstable();
    Ok(shared)
}
