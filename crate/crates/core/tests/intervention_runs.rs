use routelens_core::intervention::{
    run_paired, transition_summary, Arm, GenerationSettings, KeywordLabeler, Label, LabelTable,
};
use routelens_core::model::{encode_bytes, ModelConfig, MoeModel, SuppressionMask};
use routelens_core::{Error, Result};

fn model() -> MoeModel {
    MoeModel::new(ModelConfig {
        num_layers: 2,
        num_experts: 8,
        top_k: 2,
        model_dim: 16,
        hidden_dim: 32,
        vocab_size: 256,
        seed: 5,
    })
    .unwrap()
}

fn prompts() -> Vec<(String, Vec<usize>)> {
    ["how do I bake bread", "tell me a story", "what is rust"]
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("p{i}"), encode_bytes(p.as_bytes(), 256).unwrap()))
        .collect()
}

fn settings() -> GenerationSettings {
    GenerationSettings {
        max_new_tokens: 6,
        ..GenerationSettings::default()
    }
}

#[test]
fn empty_mask_gives_identical_arms() {
    let run = run_paired(
        &model(),
        &prompts(),
        &SuppressionMask::empty(),
        &KeywordLabeler::default(),
        &settings(),
    )
    .unwrap();
    assert_eq!(run.outcomes.len(), 3);
    for o in &run.outcomes {
        assert_eq!(o.baseline_text, o.suppressed_text);
        assert_eq!(o.baseline, o.suppressed);
    }
}

#[test]
fn constant_labeler_fills_one_cell() {
    let always = |_: &str, _: Arm, _: &str| -> Result<Label> { Ok(Label::Restricted) };
    let run = run_paired(
        &model(),
        &prompts(),
        &SuppressionMask::new([(0, 1)]),
        &always,
        &settings(),
    )
    .unwrap();
    let s = transition_summary(&run.outcomes).unwrap();
    assert_eq!(s.both_r, 3);
    assert_eq!(s.n_prompts, 3);
}

#[test]
fn labeler_failures_are_recorded_not_fatal() {
    let mut table = LabelTable::new();
    table.insert("p0", Arm::Baseline, Label::Restricted).unwrap();
    table.insert("p0", Arm::Suppressed, Label::NonRestricted).unwrap();
    table.insert("p1", Arm::Baseline, Label::Restricted).unwrap();
    let run = run_paired(
        &model(),
        &prompts(),
        &SuppressionMask::new([(1, 2)]),
        &table,
        &settings(),
    )
    .unwrap();
    assert_eq!(run.outcomes.len(), 1);
    assert_eq!(run.failures.len(), 2);
    assert!(matches!(run.failures[0].error, Error::MissingLabel { .. }));
    assert_eq!(run.failures[0].arm, Arm::Suppressed);
}

#[test]
fn invalid_mask_and_empty_prompts_are_rejected() {
    let m = model();
    let l = KeywordLabeler::default();
    assert!(run_paired(&m, &[], &SuppressionMask::empty(), &l, &settings()).is_err());
    assert!(run_paired(&m, &prompts(), &SuppressionMask::new([(5, 0)]), &l, &settings()).is_err());
}

#[test]
fn repeated_runs_are_identical() {
    let m = model();
    let mask = SuppressionMask::new([(0, 0), (0, 3), (1, 7)]);
    let l = KeywordLabeler::default();
    let a = run_paired(&m, &prompts(), &mask, &l, &settings()).unwrap();
    let b = run_paired(&m, &prompts(), &mask, &l, &settings()).unwrap();
    assert_eq!(a, b);
}
