use proptest::prelude::*;
use routelens::routing_log::{
    merge_logs, parse_routing_log, render_routing_log, CaptureMeta, LogMeta, RoutingLog, GRADIENT_REDUCTION,
};
use routelens::tables::{self, fmt_num, CoverageRow};
use routelens_core::classifier::{classify_all, ClassifierThresholds};
use routelens_core::intervention::{Label, PairedOutcome};
use routelens_core::metrics::{coverage_summary, layer_summary, rank_experts};
use routelens_core::probes::{normalize_map, MapKind, PromptRecord, RoutingMap};

fn meta(l: usize, e: usize, gradient: bool) -> LogMeta {
    LogMeta {
        num_layers: l,
        num_experts: e,
        top_k: 2,
        source: "test".into(),
        capture: CaptureMeta {
            include_generated_tokens: false,
            max_new_tokens: 0,
            suppression_scope: "everywhere".into(),
            gradient,
            template: None,
        },
        gradient_reduction: GRADIENT_REDUCTION.into(),
        precision: "f64".into(),
    }
}

/// Each row of `counts` gets a +1 on expert 0 so no row is all zero.
fn arb_log() -> impl Strategy<Value = RoutingLog> {
    (1usize..4, 2usize..6, 1usize..5, any::<bool>()).prop_flat_map(|(l, e, n, grad)| {
        let rec = (
            prop::collection::vec(0u32..20, l * e),
            prop::collection::vec(0.0f64..1e-2, l * e),
            1usize..40,
        );
        prop::collection::vec(rec, n).prop_map(move |recs| {
            let prompts = recs
                .into_iter()
                .enumerate()
                .map(|(i, (mut counts, g, t))| {
                    for row in counts.chunks_mut(e) {
                        row[0] += 1;
                    }
                    let act = RoutingMap::new(
                        l,
                        e,
                        MapKind::RawCount,
                        counts.iter().map(|&c| c as f64).collect(),
                    )
                    .unwrap();
                    PromptRecord {
                        id: format!("p{i}"),
                        group: if i % 2 == 0 { "a".into() } else { "b".into() },
                        token_count: t,
                        activation: act,
                        gradient: grad.then(|| RoutingMap::new(l, e, MapKind::Gradient, g).unwrap()),
                    }
                })
                .collect();
            RoutingLog {
                meta: meta(l, e, grad),
                prompts,
            }
        })
    })
}

fn arb_map(l: usize, e: usize) -> impl Strategy<Value = RoutingMap> {
    prop::collection::vec(0u32..20, l * e).prop_map(move |v| normalized(l, e, v.into_iter().map(f64::from)))
}

fn normalized(l: usize, e: usize, counts: impl Iterator<Item = f64>) -> RoutingMap {
    let mut v: Vec<f64> = counts.collect();
    for row in v.chunks_mut(e) {
        row[0] += 1.0;
    }
    normalize_map(&RoutingMap::new(l, e, MapKind::RawCount, v).unwrap()).unwrap()
}

proptest! {
    #[test]
    fn routing_log_round_trip_is_value_exact(log in arb_log()) {
        let text = render_routing_log(&log);
        let loaded = parse_routing_log(&text).unwrap();
        prop_assert_eq!(&loaded.log, &log);
        prop_assert_eq!(render_routing_log(&loaded.log), text);
    }

    #[test]
    fn expert_summary_csv_round_trip(maps in prop::collection::vec(arb_map(3, 4), 1..4)) {
        let rows: Vec<(String, CoverageRow)> = maps
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("g{i}"), CoverageRow::from(coverage_summary(&rank_experts(m).unwrap()))))
            .collect();
        let text = tables::expert_summary_table(&rows).render();
        let back = tables::parse_expert_summary(&text, "t").unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for ((g, r), (g2, r2)) in rows.iter().zip(&back) {
            prop_assert_eq!(g, g2);
            prop_assert_eq!((r.k80, r.k90, r.k95, r.k_elbow), (r2.k80, r2.k90, r2.k95, r2.k_elbow));
            prop_assert_eq!(fmt_num(r.top5), fmt_num(r2.top5));
        }
        prop_assert_eq!(tables::expert_summary_table(&back).render(), text);
    }

    #[test]
    fn layer_summary_csv_round_trip(m in arb_map(4, 3)) {
        let s = layer_summary(&m).unwrap();
        let text = tables::layer_summary_table(&s).render();
        let back = tables::parse_layer_summary(&text, "t").unwrap();
        prop_assert_eq!(back.len(), s.len());
        prop_assert_eq!(tables::layer_summary_table(&back).render(), text);
    }

    #[test]
    fn classification_csv_round_trip(b in arb_map(2, 4), m in arb_map(2, 4)) {
        let c = classify_all(&b, &m, &ClassifierThresholds::ACTIVATION).unwrap();
        let text = tables::classification_table(&c.rows).render();
        let back = tables::parse_classification(&text, "t").unwrap();
        for (x, y) in c.rows.iter().zip(&back) {
            prop_assert_eq!((x.layer, x.expert, x.category), (y.layer, y.expert, y.category));
        }
        prop_assert_eq!(tables::classification_table(&back).render(), text);
    }

    #[test]
    fn intervention_csv_round_trip(labels in prop::collection::vec((any::<bool>(), any::<bool>()), 1..30)) {
        let outcomes: Vec<PairedOutcome> = labels
            .iter()
            .enumerate()
            .map(|(i, &(b, s))| {
                let l = |r: bool| if r { Label::Restricted } else { Label::NonRestricted };
                PairedOutcome {
                    prompt_id: format!("q{i}"),
                    baseline: l(b),
                    suppressed: l(s),
                    baseline_text: String::new(),
                    suppressed_text: String::new(),
                }
            })
            .collect();
        let text = tables::intervention_table(&outcomes).render();
        let back = tables::parse_intervention(&text, "t").unwrap();
        prop_assert_eq!(&back, &outcomes);
        prop_assert_eq!(tables::intervention_table(&back).render(), text);
    }
}

#[test]
fn uniform_map_summary_row() {
    let (l, e) = (8, 8);
    let m = RoutingMap::new(l, e, MapKind::LayerNormalized, vec![1.0 / e as f64; l * e]).unwrap();
    let row = CoverageRow::from(coverage_summary(&rank_experts(&m).unwrap()));
    let text = tables::expert_summary_table(&[("u".into(), row), ("v".into(), row)]).render();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "group,k80,k90,k95,k_elbow,top1,top5");
    let k80 = (0.8 * (l * e) as f64).ceil();
    assert!(lines[1].starts_with(&format!("u,{k80},")), "{}", lines[1]);
}

#[test]
fn category_counts_sum_to_grid() {
    let b = normalized(4, 6, (0..24).map(|i| ((i * 7) % 11) as f64));
    let m = normalized(4, 6, (0..24).map(|i| ((i * 5) % 13) as f64));
    let c = classify_all(&b, &m, &ClassifierThresholds::ACTIVATION).unwrap();
    let text = tables::category_counts_table(&c.counts).render();
    let mut sum = 0;
    let mut total = None;
    for line in text.lines().skip(1) {
        let (cat, n) = line.split_once(',').unwrap();
        let n: usize = n.parse().unwrap();
        if cat == "total" {
            total = Some(n);
        } else {
            sum += n;
        }
    }
    assert_eq!(sum, 24);
    assert_eq!(total, Some(24));
}

#[test]
fn seven_entry_row_is_rejected_with_its_row() {
    let l = 2;
    let e = 8;
    let act = RoutingMap::new(l, e, MapKind::RawCount, vec![1.0; l * e]).unwrap();
    let log = RoutingLog {
        meta: meta(l, e, false),
        prompts: vec![PromptRecord {
            id: "x".into(),
            group: "a".into(),
            token_count: 4,
            activation: act,
            gradient: None,
        }],
    };
    let text = render_routing_log(&log).replacen("[1,1,1,1,1,1,1,1]", "[1,1,1,1,1,1,1]", 1);
    let err = parse_routing_log(&text).unwrap_err().to_string();
    assert!(err.contains("layer 0") && err.contains("7 entries"), "{err}");
}

#[test]
fn merge_requires_matching_shapes_and_distinct_ids() {
    let rec = |id: &str, l: usize| PromptRecord {
        id: id.into(),
        group: "g".into(),
        token_count: 1,
        activation: RoutingMap::new(l, 4, MapKind::RawCount, vec![1.0; l * 4]).unwrap(),
        gradient: None,
    };
    let log = |id: &str, l: usize| RoutingLog {
        meta: meta(l, 4, false),
        prompts: vec![rec(id, l)],
    };
    assert!(merge_logs(vec![log("a", 2), log("b", 3)]).is_err());
    assert!(merge_logs(vec![log("a", 2), log("a", 2)]).is_err());
    let merged = merge_logs(vec![log("a", 2), log("b", 2)]).unwrap();
    assert_eq!(merged.prompts.len(), 2);
}
