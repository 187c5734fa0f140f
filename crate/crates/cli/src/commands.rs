//! Subcommand bodies. Each takes already-parsed inputs and writes its
//! files into an output directory.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use routelens_core::classifier::{
    classify_all, select_suppression_set, Category, Classification, ClassifierThresholds, ExpertClassRow,
    SuppressionOrdering, SuppressionSelection,
};
use routelens_core::intervention::{
    run_pair, transition_summary, GenerationSettings, LabelFailure, LabelTable, Labeler, PairedOutcome,
    TransitionSummary,
};
use routelens_core::metrics::{
    block_average, coverage_summary, group_mean_map, layer_summary, prompt_map, rank_experts, top_k_overlap,
    LayerSummary, RankedDistribution, Signal,
};
use routelens_core::model::{ModelConfig, MoeModel, SuppressionMask, SuppressionScope};
use routelens_core::probes::{
    capture_activations, capture_gate_gradients, CaptureOptions, PromptRecord, RoutingMap,
};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::prompts::Prompt;
use crate::routing_log::{CaptureMeta, LogMeta, RoutingLog, GRADIENT_REDUCTION};
use crate::tables::{self, CoverageRow, Table};

pub fn scope_name(scope: SuppressionScope) -> &'static str {
    match scope {
        SuppressionScope::Everywhere => "everywhere",
        SuppressionScope::DecodeOnly => "decode-only",
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// File-name-safe form of a group tag.
fn file_tag(group: &str) -> String {
    group
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureSettings {
    pub include_generated: bool,
    pub max_new_tokens: usize,
    pub scope: SuppressionScope,
    pub gradient: bool,
}

/// Runs every prompt through the model, in parallel, and collects the
/// routing log. Gradients use the prompt tokens only.
pub fn capture(model: &MoeModel, prompts: &[Prompt], settings: &CaptureSettings) -> CliResult<RoutingLog> {
    let cfg = model.config();
    let opts = CaptureOptions {
        include_generated: settings.include_generated,
        max_new_tokens: settings.max_new_tokens,
        scope: settings.scope,
    };
    let records = prompts
        .par_iter()
        .map(|p| {
            let fail = |e| CliError::runtime(format_args!("prompt `{}`", p.id), e);
            let act =
                capture_activations(model, &p.tokens, &SuppressionMask::empty(), &opts).map_err(fail)?;
            let gradient = if settings.gradient {
                Some(capture_gate_gradients(model, &p.tokens).map_err(fail)?)
            } else {
                None
            };
            Ok(PromptRecord {
                id: p.id.clone(),
                group: p.group.clone(),
                token_count: act.token_count,
                activation: act.map,
                gradient,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(RoutingLog {
        meta: LogMeta {
            num_layers: cfg.num_layers,
            num_experts: cfg.num_experts,
            top_k: cfg.top_k,
            source: format!("routelens toy model, seed {}", cfg.seed),
            capture: CaptureMeta {
                include_generated_tokens: settings.include_generated,
                max_new_tokens: if settings.include_generated {
                    settings.max_new_tokens
                } else {
                    0
                },
                suppression_scope: scope_name(settings.scope).into(),
                gradient: settings.gradient,
                template: None,
            },
            gradient_reduction: GRADIENT_REDUCTION.into(),
            precision: "f64".into(),
        },
        prompts: records,
    })
}

/// Per-prompt maps of one group for `signal`, with their ids.
fn group_maps(log: &RoutingLog, group: &str, signal: Signal) -> CliResult<Vec<(String, RoutingMap)>> {
    log.prompts
        .iter()
        .filter(|r| r.group == group)
        .map(|r| {
            prompt_map(r, signal)
                .map(|m| (r.id.clone(), m))
                .map_err(|e| CliError::invalid(format_args!("prompt `{}`", r.id), e))
        })
        .collect()
}

fn require_signal(log: &RoutingLog, signal: Signal) -> CliResult<()> {
    if signal == Signal::Gradient && !log.has_gradients() {
        return Err(CliError::Validation(
            "the routing log has no gradient maps; recapture with gradients or use --signal activation"
                .into(),
        ));
    }
    Ok(())
}

fn group_mean_for(log: &RoutingLog, group: &str, signal: Signal) -> CliResult<RoutingMap> {
    let maps = group_maps(log, group, signal)?;
    if maps.is_empty() {
        return Err(CliError::Validation(format!("no prompts in group `{group}`")));
    }
    let refs: Vec<&RoutingMap> = maps.iter().map(|(_, m)| m).collect();
    group_mean_map(&refs).map_err(|e| CliError::invalid(format_args!("group `{group}`"), e))
}

fn ranked(map: &RoutingMap, what: &str) -> CliResult<RankedDistribution> {
    rank_experts(map).map_err(|e| CliError::invalid(what, e))
}

/// Coverage tables at group level (statistics of the mean map) and prompt
/// level (per prompt, and their mean per group), rank plots per group and
/// top-k overlaps between every pair of groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertReport {
    pub group_level: Vec<(String, CoverageRow)>,
    pub prompt_mean: Vec<(String, CoverageRow)>,
    pub per_prompt: Vec<(String, String, CoverageRow)>,
}

pub const DEFAULT_OVERLAP_K: usize = 10;

pub fn analyze_experts(
    log: &RoutingLog,
    signal: Signal,
    overlap_k: usize,
    out: &Path,
) -> CliResult<ExpertReport> {
    require_signal(log, signal)?;
    ensure_dir(out)?;
    let mut report = ExpertReport {
        group_level: Vec::new(),
        prompt_mean: Vec::new(),
        per_prompt: Vec::new(),
    };
    let mut group_ranks = Vec::new();
    for group in log.groups() {
        let mut rows = Vec::new();
        for (id, m) in group_maps(log, group, signal)? {
            let row = CoverageRow::from(coverage_summary(&ranked(&m, &format!("prompt `{id}`"))?));
            report.per_prompt.push((id, group.to_string(), row));
            rows.push(row);
        }
        report
            .prompt_mean
            .push((group.to_string(), CoverageRow::mean(&rows)));
        let r = ranked(&group_mean_for(log, group, signal)?, &format!("group `{group}`"))?;
        report
            .group_level
            .push((group.to_string(), CoverageRow::from(coverage_summary(&r))));
        tables::rank_plot_table(&r).write(&out.join(format!("rank_plot_{}.csv", file_tag(group))))?;
        group_ranks.push((group.to_string(), r));
    }
    tables::expert_summary_table(&report.group_level).write(&out.join("expert_summary_group.csv"))?;
    tables::expert_summary_table(&report.prompt_mean).write(&out.join("expert_summary_prompt_mean.csv"))?;
    tables::prompt_expert_summary_table(&report.per_prompt).write(&out.join("expert_summary_prompts.csv"))?;
    if group_ranks.len() > 1 {
        let k = overlap_k.min(log.meta.num_layers * log.meta.num_experts);
        let mut rows = Vec::new();
        for (i, (ga, ra)) in group_ranks.iter().enumerate() {
            for (gb, rb) in &group_ranks[i + 1..] {
                let shared = top_k_overlap(ra, rb, k).map_err(|e| CliError::runtime("top-k overlap", e))?;
                rows.push((ga.clone(), gb.clone(), k, shared));
            }
        }
        tables::overlap_table(&rows).write(&out.join("top_overlap.csv"))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub groups: Vec<(String, Vec<LayerSummary>)>,
}

/// Per-layer metrics of each group's mean map and of every prompt, plus
/// block averages over all layers and over the final quarter of layers.
pub fn analyze_layers(log: &RoutingLog, signal: Signal, out: &Path) -> CliResult<LayerReport> {
    require_signal(log, signal)?;
    ensure_dir(out)?;
    let layers = log.meta.num_layers;
    let late = layers - (layers / 4).max(1);
    let mut groups = Vec::new();
    let mut per_prompt = Vec::new();
    let mut blocks = Vec::new();
    for group in log.groups() {
        for (id, m) in group_maps(log, group, signal)? {
            let s = layer_summary(&m).map_err(|e| CliError::invalid(format_args!("prompt `{id}`"), e))?;
            per_prompt.push((id, group.to_string(), s));
        }
        let mean = group_mean_for(log, group, signal)?;
        let s = layer_summary(&mean).map_err(|e| CliError::invalid(format_args!("group `{group}`"), e))?;
        tables::layer_summary_table(&s).write(&out.join(format!("layer_summary_{}.csv", file_tag(group))))?;
        for range in [0..layers, late..layers] {
            let b = block_average(&s, range).map_err(|e| CliError::runtime("block average", e))?;
            blocks.push((group.to_string(), b));
        }
        groups.push((group.to_string(), s));
    }
    tables::prompt_layer_summary_table(&per_prompt).write(&out.join("layer_summary_prompts.csv"))?;
    tables::layer_blocks_table(&blocks).write(&out.join("layer_blocks.csv"))?;
    Ok(LayerReport { groups })
}

/// Per-signal defaults with optional overrides.
pub fn thresholds_for(
    signal: Signal,
    gap: Option<f64>,
    magnitude: Option<f64>,
) -> CliResult<ClassifierThresholds> {
    let base = match signal {
        Signal::Activation => ClassifierThresholds::ACTIVATION,
        Signal::Gradient => ClassifierThresholds::GRADIENT,
    };
    ClassifierThresholds::new(
        gap.unwrap_or(base.gap_threshold),
        magnitude.unwrap_or(base.min_avg_magnitude),
    )
    .map_err(|e| CliError::Usage(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPair {
    pub benign: String,
    pub malicious: String,
}

impl Default for GroupPair {
    fn default() -> Self {
        GroupPair {
            benign: "benign".into(),
            malicious: "harmful".into(),
        }
    }
}

#[derive(Serialize)]
struct ClassificationMeta<'a> {
    signal: &'a str,
    benign_group: &'a str,
    malicious_group: &'a str,
    gap_threshold: f64,
    min_avg_magnitude: f64,
    gradient_reduction: &'a str,
    suppression_ordering: &'a str,
}

pub fn classify_groups(
    log: &RoutingLog,
    signal: Signal,
    groups: &GroupPair,
    thresholds: &ClassifierThresholds,
) -> CliResult<Classification> {
    require_signal(log, signal)?;
    let b = group_mean_for(log, &groups.benign, signal)?;
    let m = group_mean_for(log, &groups.malicious, signal)?;
    classify_all(&b, &m, thresholds).map_err(|e| CliError::runtime("classification", e))
}

pub fn classify(
    log: &RoutingLog,
    signal: Signal,
    groups: &GroupPair,
    thresholds: &ClassifierThresholds,
    out: &Path,
) -> CliResult<Classification> {
    let c = classify_groups(log, signal, groups, thresholds)?;
    ensure_dir(out)?;
    tables::classification_table(&c.rows).write(&out.join("classification.csv"))?;
    tables::category_counts_table(&c.counts).write(&out.join("classification_counts.csv"))?;
    write_json(
        &ClassificationMeta {
            signal: signal.as_str(),
            benign_group: &groups.benign,
            malicious_group: &groups.malicious,
            gap_threshold: thresholds.gap_threshold,
            min_avg_magnitude: thresholds.min_avg_magnitude,
            gradient_reduction: GRADIENT_REDUCTION,
            suppression_ordering: SuppressionOrdering::default().as_str(),
        },
        &out.join("classification_meta.json"),
    )?;
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterventionPlan {
    pub category: Category,
    pub top_n: usize,
    pub settings: GenerationSettings,
}

impl Default for InterventionPlan {
    fn default() -> Self {
        InterventionPlan {
            category: Category::BenignDominant,
            top_n: 5,
            settings: GenerationSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionReport {
    pub selection: Option<SuppressionSelection>,
    pub outcomes: Vec<PairedOutcome>,
    pub failures: Vec<LabelFailure>,
    pub summary: TransitionSummary,
}

#[derive(Serialize)]
struct OutputTexts<'a> {
    prompt_id: &'a str,
    baseline_text: &'a str,
    suppressed_text: &'a str,
}

fn write_outcomes(report: &InterventionReport, out: &Path) -> CliResult<()> {
    tables::intervention_table(&report.outcomes).write(&out.join("intervention.csv"))?;
    tables::transitions_table(&report.summary).write(&out.join("transition_summary.csv"))?;
    Ok(())
}

pub fn select_suppression(
    rows: &[ExpertClassRow],
    plan: &InterventionPlan,
) -> CliResult<SuppressionSelection> {
    select_suppression_set(
        rows,
        plan.category,
        plan.top_n,
        SuppressionOrdering::AbsGapDescending,
    )
    .map_err(|e| CliError::Runtime(format!("suppression set: {e}")))
}

/// Suppresses the top pairs of `plan.category`, runs both arms for every
/// prompt in parallel and writes the per-prompt transitions, the summary,
/// the generated texts and any labeling failures.
pub fn intervene<L: Labeler + Sync + ?Sized>(
    model: &MoeModel,
    prompts: &[Prompt],
    rows: &[ExpertClassRow],
    plan: &InterventionPlan,
    labeler: &L,
    out: &Path,
) -> CliResult<InterventionReport> {
    if prompts.is_empty() {
        return Err(CliError::Usage("no intervention prompts".into()));
    }
    let selection = select_suppression(rows, plan)?;
    let cfg = model.config();
    selection
        .mask
        .validate(cfg.num_layers, cfg.num_experts)
        .map_err(|e| CliError::invalid("suppression set does not fit the model", e))?;
    let results = prompts
        .par_iter()
        .map(|p| {
            run_pair(model, &p.id, &p.tokens, &selection.mask, labeler, &plan.settings)
                .map_err(|e| CliError::runtime(format_args!("prompt `{}`", p.id), e))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(f) => {
                log::warn!("labeling failed for prompt `{}`: {}", f.prompt_id, f.error);
                failures.push(f);
            }
        }
    }
    if outcomes.is_empty() {
        return Err(CliError::Runtime("every prompt failed labeling".into()));
    }
    let summary = transition_summary(&outcomes).map_err(|e| CliError::runtime("transition summary", e))?;
    let report = InterventionReport {
        selection: Some(selection),
        outcomes,
        failures,
        summary,
    };
    ensure_dir(out)?;
    let chosen = &report.selection.as_ref().expect("set above").chosen;
    tables::suppression_set_table(chosen).write(&out.join("suppression_set.csv"))?;
    write_outcomes(&report, out)?;
    let mut fails = Table::new(&tables::FAILURES);
    for f in &report.failures {
        fails.push(vec![
            f.prompt_id.clone(),
            f.arm.as_str().into(),
            f.error.to_string(),
        ]);
    }
    fails.write(&out.join("intervention_failures.csv"))?;
    let mut texts = String::new();
    for o in &report.outcomes {
        let line = OutputTexts {
            prompt_id: &o.prompt_id,
            baseline_text: &o.baseline_text,
            suppressed_text: &o.suppressed_text,
        };
        texts.push_str(&serde_json::to_string(&line).expect("strings serialize"));
        texts.push('\n');
    }
    let path = out.join("intervention_texts.jsonl");
    fs::write(&path, texts).map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}

/// Transition accounting from externally judged labels alone.
pub fn intervene_from_labels(labels: &LabelTable, out: &Path) -> CliResult<InterventionReport> {
    let outcomes = labels
        .outcomes()
        .map_err(|e| CliError::invalid("label file", e))?;
    let summary = transition_summary(&outcomes).map_err(|e| CliError::invalid("label file", e))?;
    let report = InterventionReport {
        selection: None,
        outcomes,
        failures: Vec::new(),
        summary,
    };
    ensure_dir(out)?;
    write_outcomes(&report, out)?;
    Ok(report)
}

/// Everything `report` needs besides the prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportPlan {
    pub model: ModelConfig,
    pub capture: CaptureSettings,
    pub groups: GroupPair,
    pub gap_threshold: Option<f64>,
    pub min_avg_magnitude: Option<f64>,
    pub intervention: InterventionPlan,
    pub overlap_k: usize,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    model: crate::config::ModelConfigFile,
    include_generated_tokens: bool,
    capture_max_new_tokens: usize,
    suppression_scope: &'a str,
    benign_group: &'a str,
    malicious_group: &'a str,
    gap_threshold: Option<f64>,
    min_avg_magnitude: Option<f64>,
    category: &'a str,
    top_n: usize,
    intervention_max_new_tokens: usize,
    labeler: &'a str,
    overlap_k: usize,
    signals: Vec<&'a str>,
    prompts: usize,
    intervention_prompts: usize,
}

/// Capture, then for each available signal: expert and layer analyses,
/// classification (when both groups are present) and the intervention.
pub fn report<L: Labeler + Sync + ?Sized>(
    plan: &ReportPlan,
    prompts: &[Prompt],
    intervention_prompts: Option<&[Prompt]>,
    labeler: &L,
    labeler_name: &str,
    out: &Path,
) -> CliResult<Vec<PathBuf>> {
    ensure_dir(out)?;
    let model = MoeModel::new(plan.model).map_err(|e| CliError::invalid("model config", e))?;
    let log = capture(&model, prompts, &plan.capture)?;
    crate::routing_log::save_routing_log(&log, &out.join("routing_log.json"))?;
    let mut signals = vec![Signal::Activation];
    if log.has_gradients() {
        signals.push(Signal::Gradient);
    }
    let groups = log.groups();
    let can_classify =
        groups.contains(&plan.groups.benign.as_str()) && groups.contains(&plan.groups.malicious.as_str());
    if !can_classify {
        log::warn!(
            "groups `{}` and `{}` are not both present; skipping classification and intervention",
            plan.groups.benign,
            plan.groups.malicious
        );
    }
    let default_targets: Vec<Prompt> = prompts
        .iter()
        .filter(|p| p.group == plan.groups.malicious)
        .cloned()
        .collect();
    let targets = intervention_prompts.unwrap_or(&default_targets);
    let mut dirs = Vec::new();
    for &signal in &signals {
        let dir = out.join(signal.as_str());
        analyze_experts(&log, signal, plan.overlap_k, &dir)?;
        analyze_layers(&log, signal, &dir)?;
        if can_classify {
            let t = thresholds_for(signal, plan.gap_threshold, plan.min_avg_magnitude)?;
            let c = classify(&log, signal, &plan.groups, &t, &dir)?;
            match intervene(&model, targets, &c.rows, &plan.intervention, labeler, &dir) {
                Ok(_) => {}
                Err(CliError::Runtime(m)) if m.starts_with("suppression set") => {
                    log::warn!("{} signal: {m}; intervention skipped", signal.as_str());
                }
                Err(e) => return Err(e),
            }
        }
        dirs.push(dir);
    }
    write_json(
        &RunManifest {
            model: plan.model.into(),
            include_generated_tokens: plan.capture.include_generated,
            capture_max_new_tokens: plan.capture.max_new_tokens,
            suppression_scope: scope_name(plan.intervention.settings.scope),
            benign_group: &plan.groups.benign,
            malicious_group: &plan.groups.malicious,
            gap_threshold: plan.gap_threshold,
            min_avg_magnitude: plan.min_avg_magnitude,
            category: plan.intervention.category.as_str(),
            top_n: plan.intervention.top_n,
            intervention_max_new_tokens: plan.intervention.settings.max_new_tokens,
            labeler: labeler_name,
            overlap_k: plan.overlap_k,
            signals: signals.iter().map(|s| s.as_str()).collect(),
            prompts: prompts.len(),
            intervention_prompts: targets.len(),
        },
        &out.join("run.json"),
    )?;
    Ok(dirs)
}
