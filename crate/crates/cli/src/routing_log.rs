//! The routing log: per-prompt activation counts and gate-gradient maps
//! plus the metadata needed to interpret them.
//!
//! On disk it is a JSON object
//!
//! ```text
//! {"format":"routelens-routing-log","version":1,"meta":{...},"prompts":[
//! {"id":"benign-000","group":"benign","token_count":12,"activation":[[...],...],"gradient":[[...],...]},
//! ...
//! ]}
//! ```
//!
//! with one prompt per line. Activation rows hold integer counts, one row
//! per layer. Gradient values are written with 17 significant digits so
//! a save/load cycle is value-exact. `gradient` is omitted when the
//! capture did not compute it.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use routelens_core::probes::{MapKind, PromptRecord, RoutingMap};
use serde::ser::Error as _;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::{CliError, CliResult};

pub const LOG_FORMAT: &str = "routelens-routing-log";
pub const LOG_VERSION: u32 = 1;
pub const GRADIENT_REDUCTION: &str = "mean-abs-over-gate-column";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureMeta {
    /// Generated tokens were counted alongside the prompt.
    pub include_generated_tokens: bool,
    pub max_new_tokens: usize,
    /// `everywhere` or `decode-only`.
    pub suppression_scope: String,
    /// Every prompt carries a gradient map.
    pub gradient: bool,
    /// Prompt template applied before tokenization, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogMeta {
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    /// Free-form description of where the log came from.
    pub source: String,
    pub capture: CaptureMeta,
    pub gradient_reduction: String,
    /// Numeric precision of the forward/backward pass.
    pub precision: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingLog {
    pub meta: LogMeta,
    pub prompts: Vec<PromptRecord>,
}

impl RoutingLog {
    /// Group tags in order of first appearance.
    pub fn groups(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for p in &self.prompts {
            if !out.contains(&p.group.as_str()) {
                out.push(&p.group);
            }
        }
        out
    }

    pub fn has_gradients(&self) -> bool {
        self.prompts.iter().all(|p| p.gradient.is_some())
    }
}

/// A validated log and the non-fatal findings of validation.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedLog {
    pub log: RoutingLog,
    pub warnings: Vec<String>,
}

struct Full(f64);

impl Serialize for Full {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(S::Error::custom)?;
        raw.serialize(s)
    }
}

#[derive(Serialize)]
struct PromptOut<'a> {
    id: &'a str,
    group: &'a str,
    token_count: usize,
    activation: Vec<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gradient: Option<Vec<Vec<Full>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LogIn {
    format: String,
    version: u32,
    meta: LogMeta,
    prompts: Vec<PromptIn>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptIn {
    id: String,
    group: String,
    token_count: usize,
    activation: Vec<Vec<f64>>,
    #[serde(default)]
    gradient: Option<Vec<Vec<f64>>>,
}

fn json<T: Serialize + ?Sized>(v: &T) -> String {
    serde_json::to_string(v).expect("log structures always serialize")
}

pub fn render_routing_log(log: &RoutingLog) -> String {
    let mut out = String::new();
    write!(
        out,
        "{{\"format\":{},\"version\":{},\"meta\":{},\"prompts\":[",
        json(LOG_FORMAT),
        LOG_VERSION,
        json(&log.meta)
    )
    .unwrap();
    for (i, p) in log.prompts.iter().enumerate() {
        let rec = PromptOut {
            id: &p.id,
            group: &p.group,
            token_count: p.token_count,
            activation: p
                .activation
                .rows()
                .map(|r| r.iter().map(|&v| v as u64).collect())
                .collect(),
            gradient: p
                .gradient
                .as_ref()
                .map(|g| g.rows().map(|r| r.iter().map(|&v| Full(v)).collect()).collect()),
        };
        out.push_str(if i == 0 { "\n" } else { ",\n" });
        out.push_str(&json(&rec));
    }
    out.push_str("\n]}\n");
    out
}

pub fn save_routing_log(log: &RoutingLog, path: &Path) -> CliResult<()> {
    validate_meta(&log.meta)?;
    fs::write(path, render_routing_log(log)).map_err(|e| CliError::io(path, e))
}

fn validate_meta(meta: &LogMeta) -> CliResult<()> {
    let bad = |m: String| Err(CliError::Validation(format!("log meta: {m}")));
    if meta.num_layers == 0 || meta.num_experts == 0 || meta.top_k == 0 {
        return bad(format!(
            "num_layers, num_experts and top_k must be positive (got {}, {}, {})",
            meta.num_layers, meta.num_experts, meta.top_k
        ));
    }
    if meta.top_k > meta.num_experts {
        return bad(format!(
            "top_k {} exceeds num_experts {}",
            meta.top_k, meta.num_experts
        ));
    }
    if meta.gradient_reduction != GRADIENT_REDUCTION {
        return bad(format!(
            "unsupported gradient_reduction `{}` (expected `{GRADIENT_REDUCTION}`)",
            meta.gradient_reduction
        ));
    }
    match meta.capture.suppression_scope.as_str() {
        "everywhere" | "decode-only" => Ok(()),
        other => bad(format!("unknown suppression_scope `{other}`")),
    }
}

fn grid(meta: &LogMeta, id: &str, what: &str, rows: Vec<Vec<f64>>, kind: MapKind) -> CliResult<RoutingMap> {
    let bad = |m: String| Err(CliError::Validation(format!("prompt `{id}`: {what} {m}")));
    if rows.len() != meta.num_layers {
        return bad(format!(
            "has {} layer rows, expected {}",
            rows.len(),
            meta.num_layers
        ));
    }
    for (l, r) in rows.iter().enumerate() {
        if r.len() != meta.num_experts {
            return bad(format!(
                "row for layer {l} has {} entries, expected {}",
                r.len(),
                meta.num_experts
            ));
        }
    }
    let values: Vec<f64> = rows.into_iter().flatten().collect();
    RoutingMap::new(meta.num_layers, meta.num_experts, kind, values)
        .map_err(|e| CliError::Validation(format!("prompt `{id}`: {what}: {e}")))
}

fn validate(raw: LogIn) -> CliResult<LoadedLog> {
    if raw.format != LOG_FORMAT {
        return Err(CliError::Validation(format!(
            "format tag is `{}`, expected `{LOG_FORMAT}`",
            raw.format
        )));
    }
    if raw.version != LOG_VERSION {
        return Err(CliError::Validation(format!(
            "log version {} is not supported (expected {LOG_VERSION})",
            raw.version
        )));
    }
    let meta = raw.meta;
    validate_meta(&meta)?;
    if raw.prompts.is_empty() {
        return Err(CliError::Validation("log has no prompts".into()));
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut warnings = Vec::new();
    let mut prompts = Vec::with_capacity(raw.prompts.len());
    for (i, p) in raw.prompts.into_iter().enumerate() {
        if p.id.is_empty() || p.group.is_empty() {
            return Err(CliError::Validation(format!(
                "prompt #{i}: id and group must be nonempty"
            )));
        }
        if let Some(first) = seen.insert(p.id.clone(), i) {
            return Err(CliError::Validation(format!(
                "duplicate prompt id `{}` (entries #{first} and #{i})",
                p.id
            )));
        }
        if p.token_count == 0 {
            return Err(CliError::Validation(format!(
                "prompt `{}`: token_count is 0",
                p.id
            )));
        }
        let activation = grid(&meta, &p.id, "activation", p.activation, MapKind::RawCount)?;
        for (l, row) in activation.rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if sum == 0.0 {
                return Err(CliError::Validation(format!(
                    "prompt `{}`: activation row for layer {l} is all zero",
                    p.id
                )));
            }
            let expect = (meta.top_k * p.token_count) as f64;
            if sum != expect {
                warnings.push(format!(
                    "prompt `{}`: activation layer {l} sums to {sum}, expected top_k x token_count = {expect}",
                    p.id
                ));
            }
        }
        let gradient = match (p.gradient, meta.capture.gradient) {
            (Some(g), true) => Some(grid(&meta, &p.id, "gradient", g, MapKind::Gradient)?),
            (None, false) => None,
            (Some(_), false) => {
                return Err(CliError::Validation(format!(
                    "prompt `{}` has a gradient map but meta.capture.gradient is false",
                    p.id
                )))
            }
            (None, true) => {
                return Err(CliError::Validation(format!(
                    "prompt `{}` has no gradient map but meta.capture.gradient is true",
                    p.id
                )))
            }
        };
        prompts.push(PromptRecord {
            id: p.id,
            group: p.group,
            token_count: p.token_count,
            activation,
            gradient,
        });
    }
    Ok(LoadedLog {
        log: RoutingLog { meta, prompts },
        warnings,
    })
}

pub fn parse_routing_log(text: &str) -> CliResult<LoadedLog> {
    let raw: LogIn =
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("routing log: {e}")))?;
    validate(raw)
}

pub fn load_routing_log(path: &Path) -> CliResult<LoadedLog> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_routing_log(&text).map_err(|e| match e {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Concatenates logs captured with the same model shape. Ids must stay
/// unique across inputs.
pub fn merge_logs(mut logs: Vec<RoutingLog>) -> CliResult<RoutingLog> {
    if logs.is_empty() {
        return Err(CliError::Usage("no routing logs given".into()));
    }
    let mut merged = logs.remove(0);
    for other in logs {
        let (a, b) = (&merged.meta, &other.meta);
        if (a.num_layers, a.num_experts, a.top_k) != (b.num_layers, b.num_experts, b.top_k) {
            return Err(CliError::Validation(format!(
                "logs disagree on shape: {}x{} top-{} vs {}x{} top-{}",
                a.num_layers, a.num_experts, a.top_k, b.num_layers, b.num_experts, b.top_k
            )));
        }
        if a.capture.gradient != b.capture.gradient {
            merged.meta.capture.gradient = false;
        }
        if b.source != merged.meta.source {
            merged.meta.source = format!("{} + {}", merged.meta.source, b.source);
        }
        for p in other.prompts {
            if merged.prompts.iter().any(|q| q.id == p.id) {
                return Err(CliError::Validation(format!(
                    "duplicate prompt id `{}` across logs",
                    p.id
                )));
            }
            merged.prompts.push(p);
        }
    }
    if !merged.meta.capture.gradient {
        for p in &mut merged.prompts {
            p.gradient = None;
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(gradient: bool) -> LogMeta {
        LogMeta {
            num_layers: 2,
            num_experts: 3,
            top_k: 1,
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

    fn record(id: &str) -> PromptRecord {
        PromptRecord {
            id: id.into(),
            group: "g".into(),
            token_count: 2,
            activation: RoutingMap::new(2, 3, MapKind::RawCount, vec![1.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap(),
            gradient: Some(
                RoutingMap::new(
                    2,
                    3,
                    MapKind::Gradient,
                    vec![0.1, 1.0 / 3.0, 0.0, 1e-300, 2.5e-7, 7.0],
                )
                .unwrap(),
            ),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let log = RoutingLog {
            meta: meta(true),
            prompts: vec![record("a"), record("b")],
        };
        let loaded = parse_routing_log(&render_routing_log(&log)).unwrap();
        assert_eq!(loaded.log, log);
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn short_row_is_named() {
        let text = render_routing_log(&RoutingLog {
            meta: meta(false),
            prompts: vec![PromptRecord {
                gradient: None,
                ..record("a")
            }],
        })
        .replace("[0,0,2]", "[0,2]");
        let err = parse_routing_log(&text).unwrap_err().to_string();
        assert!(err.contains("layer 1") && err.contains("2 entries"), "{err}");
    }

    #[test]
    fn duplicate_ids_and_zero_rows_rejected() {
        let log = RoutingLog {
            meta: meta(true),
            prompts: vec![record("a"), record("a")],
        };
        assert!(parse_routing_log(&render_routing_log(&log)).is_err());
        let text = render_routing_log(&RoutingLog {
            meta: meta(true),
            prompts: vec![record("a")],
        })
        .replace("[0,0,2]", "[0,0,0]");
        let err = parse_routing_log(&text).unwrap_err().to_string();
        assert!(err.contains("all zero"), "{err}");
    }

    #[test]
    fn conservation_mismatch_is_a_warning() {
        let mut r = record("a");
        r.token_count = 5;
        let log = RoutingLog {
            meta: meta(true),
            prompts: vec![r],
        };
        let loaded = parse_routing_log(&render_routing_log(&log)).unwrap();
        assert_eq!(loaded.warnings.len(), 2);
    }

    #[test]
    fn gradient_presence_must_match_meta() {
        let log = RoutingLog {
            meta: meta(false),
            prompts: vec![record("a")],
        };
        assert!(parse_routing_log(&render_routing_log(&log)).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = render_routing_log(&RoutingLog {
            meta: meta(true),
            prompts: vec![record("a")],
        })
        .replace("\"token_count\"", "\"extra\":1,\"token_count\"");
        assert!(parse_routing_log(&text).is_err());
    }
}
