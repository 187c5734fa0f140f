//! Six-way classification of layer-expert pairs from benign and malicious
//! group averages.

use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::model::SuppressionMask;
use crate::probes::RoutingMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    MaliciousDominant,
    BenignDominant,
    Shared,
    WeakMalicious,
    WeakBenign,
    Uncertain,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::MaliciousDominant,
        Category::BenignDominant,
        Category::Shared,
        Category::WeakMalicious,
        Category::WeakBenign,
        Category::Uncertain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::MaliciousDominant => "malicious-dominant",
            Category::BenignDominant => "benign-dominant",
            Category::Shared => "shared",
            Category::WeakMalicious => "weak-malicious",
            Category::WeakBenign => "weak-benign",
            Category::Uncertain => "uncertain",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// The category with benign and malicious roles exchanged.
    pub fn mirrored(self) -> Category {
        match self {
            Category::MaliciousDominant => Category::BenignDominant,
            Category::BenignDominant => Category::MaliciousDominant,
            Category::WeakMalicious => Category::WeakBenign,
            Category::WeakBenign => Category::WeakMalicious,
            other => other,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierThresholds {
    pub gap_threshold: f64,
    pub min_avg_magnitude: f64,
}

impl ClassifierThresholds {
    pub fn new(gap_threshold: f64, min_avg_magnitude: f64) -> Result<Self> {
        if !(gap_threshold > 0.0 && gap_threshold.is_finite())
            || !(min_avg_magnitude > 0.0 && min_avg_magnitude.is_finite())
        {
            return Err(Error::InvalidConfig(alloc::format!(
                "classifier thresholds must be positive, got gap {gap_threshold} / magnitude {min_avg_magnitude}"
            )));
        }
        Ok(ClassifierThresholds {
            gap_threshold,
            min_avg_magnitude,
        })
    }

    /// Defaults for layer-normalized activation scores.
    pub const ACTIVATION: ClassifierThresholds = ClassifierThresholds {
        gap_threshold: 0.05,
        min_avg_magnitude: 0.08,
    };

    /// Defaults for router-gate gradient magnitudes.
    pub const GRADIENT: ClassifierThresholds = ClassifierThresholds {
        gap_threshold: 1e-4,
        min_avg_magnitude: 1e-4,
    };
}

/// Applies the rule table in order. A gap exactly at the threshold counts
/// as separated (dominant or weak), not shared.
pub fn classify_expert(benign_avg: f64, malicious_avg: f64, t: &ClassifierThresholds) -> Category {
    if !benign_avg.is_finite() || !malicious_avg.is_finite() {
        log::warn!(
            "non-finite group average (benign {benign_avg}, malicious {malicious_avg}); classified uncertain"
        );
        return Category::Uncertain;
    }
    let gap = malicious_avg - benign_avg;
    let (tg, tm) = (t.gap_threshold, t.min_avg_magnitude);
    if gap >= tg && malicious_avg >= tm {
        Category::MaliciousDominant
    } else if gap <= -tg && benign_avg >= tm {
        Category::BenignDominant
    } else if gap.abs() < tg {
        Category::Shared
    } else if gap >= tg && malicious_avg < tm {
        Category::WeakMalicious
    } else if gap <= -tg && benign_avg < tm {
        Category::WeakBenign
    } else {
        Category::Uncertain
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertClassRow {
    pub layer: usize,
    pub expert: usize,
    pub benign_avg: f64,
    pub malicious_avg: f64,
    /// `malicious_avg - benign_avg`
    pub safety_gap: f64,
    pub abs_gap: f64,
    pub category: Category,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CategoryCounts([usize; 6]);

impl CategoryCounts {
    pub fn get(&self, c: Category) -> usize {
        self.0[c.index()]
    }

    pub fn add(&mut self, c: Category) {
        self.0[c.index()] += 1;
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Category, usize)> + '_ {
        Category::ALL.into_iter().map(|c| (c, self.get(c)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// One row per pair in (layer, expert) order.
    pub rows: Vec<ExpertClassRow>,
    pub counts: CategoryCounts,
}

pub fn classify_all(
    benign: &RoutingMap,
    malicious: &RoutingMap,
    thresholds: &ClassifierThresholds,
) -> Result<Classification> {
    if benign.dims() != malicious.dims() {
        return Err(Error::MapShapeMismatch {
            expected: benign.dims(),
            found: malicious.dims(),
        });
    }
    let e = benign.num_experts();
    let mut counts = CategoryCounts::default();
    let rows = benign
        .values()
        .iter()
        .zip(malicious.values())
        .enumerate()
        .map(|(i, (&b, &m))| {
            let category = classify_expert(b, m, thresholds);
            counts.add(category);
            let safety_gap = m - b;
            ExpertClassRow {
                layer: i / e,
                expert: i % e,
                benign_avg: b,
                malicious_avg: m,
                safety_gap,
                abs_gap: safety_gap.abs(),
                category,
            }
        })
        .collect();
    Ok(Classification { rows, counts })
}

/// How "top" rows of a category are ranked for suppression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SuppressionOrdering {
    /// Largest `abs_gap` first; ties by (layer, expert).
    #[default]
    AbsGapDescending,
}

impl SuppressionOrdering {
    pub fn as_str(self) -> &'static str {
        match self {
            SuppressionOrdering::AbsGapDescending => "abs-gap-descending",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuppressionSelection {
    /// Chosen rows in ranking order.
    pub chosen: Vec<ExpertClassRow>,
    pub mask: SuppressionMask,
    pub requested: usize,
    /// Fewer than `requested` rows were available.
    pub truncated: bool,
}

/// The `n` highest-ranked rows of `category`.
pub fn select_suppression_set(
    rows: &[ExpertClassRow],
    category: Category,
    n: usize,
    ordering: SuppressionOrdering,
) -> Result<SuppressionSelection> {
    if n == 0 {
        return Err(Error::EmptyInput("suppression set size"));
    }
    let mut pool: Vec<ExpertClassRow> = rows.iter().filter(|r| r.category == category).copied().collect();
    if pool.is_empty() {
        return Err(Error::NoCandidates(category.as_str()));
    }
    match ordering {
        SuppressionOrdering::AbsGapDescending => pool.sort_by(|a, b| {
            b.abs_gap
                .total_cmp(&a.abs_gap)
                .then((a.layer, a.expert).cmp(&(b.layer, b.expert)))
        }),
    }
    let truncated = pool.len() < n;
    if truncated {
        log::warn!(
            "only {} `{}` pairs available, {} requested",
            pool.len(),
            category.as_str(),
            n
        );
    }
    pool.truncate(n);
    let mask = SuppressionMask::new(pool.iter().map(|r| (r.layer, r.expert)));
    Ok(SuppressionSelection {
        chosen: pool,
        mask,
        requested: n,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::MapKind;
    use alloc::vec;

    const T: ClassifierThresholds = ClassifierThresholds::ACTIVATION;

    #[test]
    fn rule_examples() {
        assert_eq!(classify_expert(0.10, 0.20, &T), Category::MaliciousDominant);
        assert_eq!(classify_expert(0.12, 0.10, &T), Category::Shared);
        assert_eq!(classify_expert(0.01, 0.07, &T), Category::WeakMalicious);
        assert_eq!(classify_expert(0.20, 0.10, &T), Category::BenignDominant);
        assert_eq!(classify_expert(0.07, 0.01, &T), Category::WeakBenign);
        assert_eq!(classify_expert(f64::NAN, 0.1, &T), Category::Uncertain);
    }

    #[test]
    fn boundary_gap_is_not_shared() {
        let t = ClassifierThresholds::new(0.25, 0.5).unwrap();
        // 0.75 - 0.5 is exactly 0.25
        assert_eq!(classify_expert(0.5, 0.75, &t), Category::MaliciousDominant);
        assert_eq!(classify_expert(0.75, 0.5, &t), Category::BenignDominant);
    }

    #[test]
    fn thresholds_must_be_positive() {
        assert!(ClassifierThresholds::new(0.0, 0.1).is_err());
        assert!(ClassifierThresholds::new(0.1, -1.0).is_err());
    }

    fn map(v: Vec<f64>) -> RoutingMap {
        RoutingMap::new(2, 2, MapKind::Gradient, v).unwrap()
    }

    #[test]
    fn identical_maps_are_all_shared() {
        let m = map(vec![0.3, 0.2, 0.1, 0.4]);
        let c = classify_all(&m, &m, &T).unwrap();
        assert_eq!(c.counts.get(Category::Shared), 4);
        assert_eq!(c.counts.total(), 4);
    }

    #[test]
    fn benign_shifted_up_is_benign_dominant() {
        let t = ClassifierThresholds::new(0.25, 0.5).unwrap();
        let mal = map(vec![1.0, 2.0, 3.0, 4.0]);
        let ben = map(vec![1.25, 2.25, 3.25, 4.25]);
        let c = classify_all(&ben, &mal, &t).unwrap();
        assert_eq!(c.counts.get(Category::BenignDominant), 4);
    }

    fn row(layer: usize, expert: usize, abs_gap: f64, category: Category) -> ExpertClassRow {
        ExpertClassRow {
            layer,
            expert,
            benign_avg: abs_gap,
            malicious_avg: 0.0,
            safety_gap: -abs_gap,
            abs_gap,
            category,
        }
    }

    #[test]
    fn suppression_picks_largest_gaps() {
        let rows: Vec<_> = (0..7)
            .map(|i| row(i, 0, 0.1 * (i + 1) as f64, Category::BenignDominant))
            .chain([row(0, 1, 9.0, Category::Shared)])
            .collect();
        let s = select_suppression_set(&rows, Category::BenignDominant, 5, SuppressionOrdering::default())
            .unwrap();
        let layers: Vec<_> = s.chosen.iter().map(|r| r.layer).collect();
        assert_eq!(layers, [6, 5, 4, 3, 2]);
        assert_eq!(s.mask.len(), 5);
        assert!(!s.truncated);

        let s = select_suppression_set(
            &rows,
            Category::BenignDominant,
            10,
            SuppressionOrdering::default(),
        )
        .unwrap();
        assert_eq!(s.chosen.len(), 7);
        assert!(s.truncated);
    }

    #[test]
    fn suppression_ties_prefer_lower_pair() {
        let rows = [
            row(2, 1, 0.5, Category::BenignDominant),
            row(1, 3, 0.5, Category::BenignDominant),
            row(1, 2, 0.5, Category::BenignDominant),
        ];
        let s = select_suppression_set(&rows, Category::BenignDominant, 2, SuppressionOrdering::default())
            .unwrap();
        let pairs: Vec<_> = s.chosen.iter().map(|r| (r.layer, r.expert)).collect();
        assert_eq!(pairs, [(1, 2), (1, 3)]);
    }

    #[test]
    fn suppression_errors() {
        let rows = [row(0, 0, 0.5, Category::Shared)];
        assert!(matches!(
            select_suppression_set(&rows, Category::BenignDominant, 5, SuppressionOrdering::default()),
            Err(Error::NoCandidates("benign-dominant"))
        ));
        assert!(select_suppression_set(&rows, Category::Shared, 0, SuppressionOrdering::default()).is_err());
    }
}
