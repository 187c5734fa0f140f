//! CSV report tables.
//!
//! Reals are written with 6 significant digits (see [`fmt_num`]); counts
//! and indices as plain integers. Every table has a parser so emitted
//! files can be read back.

use std::fs;
use std::path::Path;

use routelens_core::classifier::{Category, CategoryCounts, ExpertClassRow};
use routelens_core::intervention::{Label, PairedOutcome, TransitionSummary};
use routelens_core::metrics::{BlockSummary, CoverageSummary, LayerSummary, RankedDistribution};

use crate::error::{CliError, CliResult};

/// `%g`-style formatting with 6 significant digits: plain notation for
/// exponents in `-4..6`, scientific otherwise, trailing zeros removed.
pub fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        trim_zeros(format!("{:.*}", (5 - exp) as usize, v))
    } else {
        format!("{}e{exp}", trim_zeros(mant.to_string()))
    }
}

fn trim_zeros(mut s: String) -> String {
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

/// A header plus string rows, rendered with the `csv` writer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.render()).map_err(|e| CliError::io(path, e))
    }

    /// Parses `text`, requiring exactly `header`.
    pub fn parse(text: &str, header: &[&str], origin: &str) -> CliResult<Table> {
        let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let found = r
            .headers()
            .map_err(|e| CliError::Validation(format!("{origin}: {e}")))?
            .clone();
        if found.iter().ne(header.iter().copied()) {
            return Err(CliError::Validation(format!(
                "{origin}: header is `{}`, expected `{}`",
                found.iter().collect::<Vec<_>>().join(","),
                header.join(",")
            )));
        }
        let mut table = Table::new(header);
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::Validation(format!("{origin}: {e}")))?;
            table.push(rec.iter().map(str::to_string).collect());
        }
        Ok(table)
    }
}

fn num(field: &str, origin: &str) -> CliResult<f64> {
    field
        .parse()
        .map_err(|_| CliError::Validation(format!("{origin}: `{field}` is not a number")))
}

fn int(field: &str, origin: &str) -> CliResult<usize> {
    field
        .parse()
        .map_err(|_| CliError::Validation(format!("{origin}: `{field}` is not a count")))
}

// Expert summaries.

pub const EXPERT_SUMMARY: [&str; 7] = ["group", "k80", "k90", "k95", "k_elbow", "top1", "top5"];
pub const EXPERT_SUMMARY_PROMPTS: [&str; 8] = [
    "prompt_id",
    "group",
    "k80",
    "k90",
    "k95",
    "k_elbow",
    "top1",
    "top5",
];

/// Coverage statistics as reals, so means over prompts fit the same shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageRow {
    pub k80: f64,
    pub k90: f64,
    pub k95: f64,
    pub k_elbow: f64,
    pub top1: f64,
    pub top5: f64,
}

impl From<CoverageSummary> for CoverageRow {
    fn from(s: CoverageSummary) -> Self {
        CoverageRow {
            k80: s.k80 as f64,
            k90: s.k90 as f64,
            k95: s.k95 as f64,
            k_elbow: s.k_elbow as f64,
            top1: s.top1,
            top5: s.top5,
        }
    }
}

impl CoverageRow {
    pub fn mean(rows: &[CoverageRow]) -> CoverageRow {
        let n = rows.len() as f64;
        let m = |f: fn(&CoverageRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        CoverageRow {
            k80: m(|r| r.k80),
            k90: m(|r| r.k90),
            k95: m(|r| r.k95),
            k_elbow: m(|r| r.k_elbow),
            top1: m(|r| r.top1),
            top5: m(|r| r.top5),
        }
    }

    fn fields(&self) -> Vec<String> {
        [self.k80, self.k90, self.k95, self.k_elbow, self.top1, self.top5]
            .iter()
            .map(|&v| fmt_num(v))
            .collect()
    }

    fn parse(f: &[String], origin: &str) -> CliResult<CoverageRow> {
        Ok(CoverageRow {
            k80: num(&f[0], origin)?,
            k90: num(&f[1], origin)?,
            k95: num(&f[2], origin)?,
            k_elbow: num(&f[3], origin)?,
            top1: num(&f[4], origin)?,
            top5: num(&f[5], origin)?,
        })
    }
}

pub fn expert_summary_table(rows: &[(String, CoverageRow)]) -> Table {
    let mut t = Table::new(&EXPERT_SUMMARY);
    for (group, r) in rows {
        let mut f = vec![group.clone()];
        f.extend(r.fields());
        t.push(f);
    }
    t
}

pub fn parse_expert_summary(text: &str, origin: &str) -> CliResult<Vec<(String, CoverageRow)>> {
    Table::parse(text, &EXPERT_SUMMARY, origin)?
        .rows
        .iter()
        .map(|r| Ok((r[0].clone(), CoverageRow::parse(&r[1..], origin)?)))
        .collect()
}

pub fn prompt_expert_summary_table(rows: &[(String, String, CoverageRow)]) -> Table {
    let mut t = Table::new(&EXPERT_SUMMARY_PROMPTS);
    for (id, group, r) in rows {
        let mut f = vec![id.clone(), group.clone()];
        f.extend(r.fields());
        t.push(f);
    }
    t
}

// Layer summaries.

pub const LAYER_SUMMARY: [&str; 7] = [
    "layer",
    "dominant",
    "top2_sum",
    "entropy_nats",
    "entropy_norm",
    "effective_experts",
    "active_count",
];
pub const LAYER_SUMMARY_PROMPTS: [&str; 9] = [
    "prompt_id",
    "group",
    "layer",
    "dominant",
    "top2_sum",
    "entropy_nats",
    "entropy_norm",
    "effective_experts",
    "active_count",
];
pub const LAYER_BLOCKS: [&str; 9] = [
    "group",
    "first_layer",
    "last_layer",
    "dominant",
    "top2_sum",
    "entropy_nats",
    "entropy_norm",
    "effective_experts",
    "active_count",
];

fn layer_fields(s: &LayerSummary) -> Vec<String> {
    vec![
        s.layer.to_string(),
        fmt_num(s.dominant),
        fmt_num(s.top2_sum),
        fmt_num(s.entropy_nats),
        fmt_num(s.entropy_norm),
        fmt_num(s.effective_experts),
        s.active_count.to_string(),
    ]
}

pub fn layer_summary_table(rows: &[LayerSummary]) -> Table {
    let mut t = Table::new(&LAYER_SUMMARY);
    for s in rows {
        t.push(layer_fields(s));
    }
    t
}

pub fn parse_layer_summary(text: &str, origin: &str) -> CliResult<Vec<LayerSummary>> {
    Table::parse(text, &LAYER_SUMMARY, origin)?
        .rows
        .iter()
        .map(|r| {
            Ok(LayerSummary {
                layer: int(&r[0], origin)?,
                dominant: num(&r[1], origin)?,
                top2_sum: num(&r[2], origin)?,
                entropy_nats: num(&r[3], origin)?,
                entropy_norm: num(&r[4], origin)?,
                effective_experts: num(&r[5], origin)?,
                active_count: int(&r[6], origin)?,
            })
        })
        .collect()
}

pub fn prompt_layer_summary_table(rows: &[(String, String, Vec<LayerSummary>)]) -> Table {
    let mut t = Table::new(&LAYER_SUMMARY_PROMPTS);
    for (id, group, layers) in rows {
        for s in layers {
            let mut f = vec![id.clone(), group.clone()];
            f.extend(layer_fields(s));
            t.push(f);
        }
    }
    t
}

pub fn layer_blocks_table(rows: &[(String, BlockSummary)]) -> Table {
    let mut t = Table::new(&LAYER_BLOCKS);
    for (group, b) in rows {
        t.push(vec![
            group.clone(),
            b.first_layer.to_string(),
            b.last_layer.to_string(),
            fmt_num(b.dominant),
            fmt_num(b.top2_sum),
            fmt_num(b.entropy_nats),
            fmt_num(b.entropy_norm),
            fmt_num(b.effective_experts),
            fmt_num(b.active_count),
        ]);
    }
    t
}

// Plot data.

pub const RANK_PLOT: [&str; 5] = ["rank", "layer", "expert", "score", "cumulative"];

pub fn rank_plot_table(ranked: &RankedDistribution) -> Table {
    let mut t = Table::new(&RANK_PLOT);
    for (i, (e, c)) in ranked
        .entries()
        .iter()
        .zip(ranked.cumulative_coverage())
        .enumerate()
    {
        t.push(vec![
            (i + 1).to_string(),
            e.layer.to_string(),
            e.expert.to_string(),
            fmt_num(e.score),
            fmt_num(c),
        ]);
    }
    t
}

pub const OVERLAP: [&str; 5] = ["group_a", "group_b", "k", "shared", "pairs"];

/// Two groups, `k`, and the `(layer, expert)` pairs in both top-k lists.
pub type OverlapRow = (String, String, usize, Vec<(usize, usize)>);

/// `pairs` lists the shared pairs as `layer:expert` separated by spaces.
pub fn overlap_table(rows: &[OverlapRow]) -> Table {
    let mut t = Table::new(&OVERLAP);
    for (a, b, k, shared) in rows {
        let pairs: Vec<String> = shared.iter().map(|(l, e)| format!("{l}:{e}")).collect();
        t.push(vec![
            a.clone(),
            b.clone(),
            k.to_string(),
            shared.len().to_string(),
            pairs.join(" "),
        ]);
    }
    t
}

// Classification.

pub const CLASSIFICATION: [&str; 7] = [
    "layer",
    "expert",
    "benign_avg",
    "malicious_avg",
    "safety_gap",
    "abs_gap",
    "category",
];
pub const CATEGORY_COUNTS: [&str; 2] = ["category", "count"];

pub fn classification_table(rows: &[ExpertClassRow]) -> Table {
    let mut t = Table::new(&CLASSIFICATION);
    for r in rows {
        t.push(vec![
            r.layer.to_string(),
            r.expert.to_string(),
            fmt_num(r.benign_avg),
            fmt_num(r.malicious_avg),
            fmt_num(r.safety_gap),
            fmt_num(r.abs_gap),
            r.category.as_str().to_string(),
        ]);
    }
    t
}

pub fn parse_classification(text: &str, origin: &str) -> CliResult<Vec<ExpertClassRow>> {
    Table::parse(text, &CLASSIFICATION, origin)?
        .rows
        .iter()
        .map(|r| {
            Ok(ExpertClassRow {
                layer: int(&r[0], origin)?,
                expert: int(&r[1], origin)?,
                benign_avg: num(&r[2], origin)?,
                malicious_avg: num(&r[3], origin)?,
                safety_gap: num(&r[4], origin)?,
                abs_gap: num(&r[5], origin)?,
                category: Category::parse(&r[6])
                    .ok_or_else(|| CliError::Validation(format!("{origin}: unknown category `{}`", r[6])))?,
            })
        })
        .collect()
}

/// One line per category, then `total`.
pub fn category_counts_table(counts: &CategoryCounts) -> Table {
    let mut t = Table::new(&CATEGORY_COUNTS);
    for (c, n) in counts.iter() {
        t.push(vec![c.as_str().to_string(), n.to_string()]);
    }
    t.push(vec!["total".into(), counts.total().to_string()]);
    t
}

pub const SUPPRESSION_SET: [&str; 5] = ["rank", "layer", "expert", "abs_gap", "category"];

pub fn suppression_set_table(chosen: &[ExpertClassRow]) -> Table {
    let mut t = Table::new(&SUPPRESSION_SET);
    for (i, r) in chosen.iter().enumerate() {
        t.push(vec![
            (i + 1).to_string(),
            r.layer.to_string(),
            r.expert.to_string(),
            fmt_num(r.abs_gap),
            r.category.as_str().to_string(),
        ]);
    }
    t
}

// Intervention.

pub const INTERVENTION: [&str; 4] = ["prompt_id", "baseline_label", "suppressed_label", "transition"];
pub const TRANSITIONS: [&str; 8] = [
    "n_prompts",
    "baseline_restricted",
    "suppressed_restricted",
    "r_to_n",
    "n_to_r",
    "both_r",
    "both_n",
    "relative_reduction",
];

pub fn intervention_table(outcomes: &[PairedOutcome]) -> Table {
    let mut t = Table::new(&INTERVENTION);
    for o in outcomes {
        t.push(vec![
            o.prompt_id.clone(),
            o.baseline.as_str().to_string(),
            o.suppressed.as_str().to_string(),
            o.transition().as_str().to_string(),
        ]);
    }
    t
}

/// Outcomes without texts. The transition column must agree with the labels.
pub fn parse_intervention(text: &str, origin: &str) -> CliResult<Vec<PairedOutcome>> {
    let label = |s: &str| {
        Label::parse(s).ok_or_else(|| CliError::Validation(format!("{origin}: unknown label `{s}`")))
    };
    Table::parse(text, &INTERVENTION, origin)?
        .rows
        .iter()
        .map(|r| {
            let o = PairedOutcome {
                prompt_id: r[0].clone(),
                baseline: label(&r[1])?,
                suppressed: label(&r[2])?,
                baseline_text: String::new(),
                suppressed_text: String::new(),
            };
            if o.transition().as_str() != r[3] {
                return Err(CliError::Validation(format!(
                    "{origin}: prompt `{}` transition `{}` contradicts its labels",
                    r[0], r[3]
                )));
            }
            Ok(o)
        })
        .collect()
}

/// The relative reduction is left empty when nothing was restricted at
/// baseline.
pub fn transitions_table(s: &TransitionSummary) -> Table {
    let mut t = Table::new(&TRANSITIONS);
    t.push(vec![
        s.n_prompts.to_string(),
        s.baseline_restricted.to_string(),
        s.suppressed_restricted.to_string(),
        s.r_to_n.to_string(),
        s.n_to_r.to_string(),
        s.both_r.to_string(),
        s.both_n.to_string(),
        s.relative_reduction().map(fmt_num).unwrap_or_default(),
    ]);
    t
}

pub fn parse_transitions(text: &str, origin: &str) -> CliResult<TransitionSummary> {
    let t = Table::parse(text, &TRANSITIONS, origin)?;
    let r = match t.rows.as_slice() {
        [r] => r,
        _ => {
            return Err(CliError::Validation(format!(
                "{origin}: expected one summary row, found {}",
                t.rows.len()
            )))
        }
    };
    let s = TransitionSummary {
        n_prompts: int(&r[0], origin)?,
        baseline_restricted: int(&r[1], origin)?,
        suppressed_restricted: int(&r[2], origin)?,
        r_to_n: int(&r[3], origin)?,
        n_to_r: int(&r[4], origin)?,
        both_r: int(&r[5], origin)?,
        both_n: int(&r[6], origin)?,
    };
    if !s.is_consistent() {
        return Err(CliError::Validation(format!(
            "{origin}: transition counts do not add up"
        )));
    }
    Ok(s)
}

pub const FAILURES: [&str; 3] = ["prompt_id", "arm", "error"];
