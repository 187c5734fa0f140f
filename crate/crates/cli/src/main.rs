use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use routelens::commands::{
    self, CaptureSettings, GroupPair, InterventionPlan, ReportPlan, DEFAULT_OVERLAP_K,
};
use routelens::config::load_model_config;
use routelens::error::{CliError, CliResult};
use routelens::labels::load_label_file;
use routelens::prompts::{read_groups, read_prompt_file, GroupSpec};
use routelens::routing_log::{load_routing_log, merge_logs, save_routing_log, RoutingLog};
use routelens::tables::parse_classification;
use routelens_core::classifier::Category;
use routelens_core::intervention::{GenerationSettings, KeywordLabeler, LabelTable, Labeler};
use routelens_core::metrics::Signal;
use routelens_core::model::{MoeModel, SuppressionScope};

#[derive(Parser)]
#[command(
    name = "routelens",
    version,
    about = "Routing analysis and expert suppression for a small mixture-of-experts model"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Model config (TOML). Missing keys take defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Routing signal to analyze.
    #[arg(long, global = true, value_enum, default_value_t = SignalArg::Activation)]
    signal: SignalArg,
    /// Classifier gap threshold (default depends on the signal).
    #[arg(long, global = true)]
    gap_threshold: Option<f64>,
    /// Classifier minimum mean magnitude (default depends on the signal).
    #[arg(long, global = true)]
    min_avg_magnitude: Option<f64>,
    /// Number of expert pairs to suppress.
    #[arg(long, global = true, default_value_t = 5)]
    top_n: usize,
    /// Overrides the seed from the model config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also route greedily generated tokens during capture.
    #[arg(long, global = true)]
    include_generated_tokens: bool,
    /// Label file (`prompt_id,arm,label`) used instead of keyword labeling.
    #[arg(long, global = true, value_name = "PATH")]
    labels: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignalArg {
    Activation,
    Gradient,
}

impl From<SignalArg> for Signal {
    fn from(s: SignalArg) -> Signal {
        match s {
            SignalArg::Activation => Signal::Activation,
            SignalArg::Gradient => Signal::Gradient,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Everywhere,
    DecodeOnly,
}

impl From<ScopeArg> for SuppressionScope {
    fn from(s: ScopeArg) -> SuppressionScope {
        match s {
            ScopeArg::Everywhere => SuppressionScope::Everywhere,
            ScopeArg::DecodeOnly => SuppressionScope::DecodeOnly,
        }
    }
}

#[derive(Args)]
struct GroupArgs {
    /// Benign reference group.
    #[arg(long, default_value = "benign")]
    benign_group: String,
    /// Group compared against the benign one.
    #[arg(long, default_value = "harmful")]
    malicious_group: String,
}

impl GroupArgs {
    fn pair(&self) -> GroupPair {
        GroupPair {
            benign: self.benign_group.clone(),
            malicious: self.malicious_group.clone(),
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Tokens generated per arm.
    #[arg(long, default_value_t = 32)]
    max_new_tokens: usize,
    /// Where the suppression mask applies.
    #[arg(long, value_enum, default_value_t = ScopeArg::Everywhere)]
    suppression_scope: ScopeArg,
    /// Category whose top pairs are suppressed.
    #[arg(long, default_value = "benign-dominant", value_parser = parse_category)]
    category: Category,
    /// Refusal marker for keyword labeling (repeatable).
    #[arg(long = "marker", value_name = "TEXT")]
    markers: Vec<String>,
}

fn parse_category(s: &str) -> Result<Category, String> {
    Category::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Category::ALL.iter().map(|c| c.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

#[derive(Subcommand)]
enum Command {
    /// Run prompt groups through the model and write a routing log.
    Capture {
        /// Prompt group as NAME=PATH (repeatable).
        #[arg(long = "group", value_name = "NAME=PATH", required = true)]
        groups: Vec<GroupSpec>,
        /// Output routing log.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Generated tokens routed with --include-generated-tokens.
        #[arg(long, default_value_t = 16)]
        max_new_tokens: usize,
        /// Skip router gradient maps.
        #[arg(long)]
        no_gradient: bool,
    },
    /// Expert coverage statistics, rank plots and top-k overlap.
    AnalyzeExperts {
        /// Routing log (repeatable; logs are merged).
        #[arg(long = "log", value_name = "PATH", required = true)]
        logs: Vec<PathBuf>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Pairs compared between groups.
        #[arg(long, default_value_t = DEFAULT_OVERLAP_K)]
        overlap_k: usize,
    },
    /// Per-layer concentration and entropy.
    AnalyzeLayers {
        #[arg(long = "log", value_name = "PATH", required = true)]
        logs: Vec<PathBuf>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Classify every (layer, expert) pair by its group means.
    Classify {
        #[arg(long = "log", value_name = "PATH", required = true)]
        logs: Vec<PathBuf>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        groups: GroupArgs,
    },
    /// Suppress selected experts and compare labeled generations.
    ///
    /// With --labels and no --prompts, only the transition accounting of the
    /// label file is computed.
    Intervene {
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Prompts to generate from, one per line.
        #[arg(long, value_name = "PATH")]
        prompts: Option<PathBuf>,
        /// Id prefix for --prompts.
        #[arg(long, default_value = "prompt")]
        prompt_group: String,
        /// Classification table from `classify`.
        #[arg(long, value_name = "PATH", conflicts_with = "logs")]
        classification: Option<PathBuf>,
        /// Routing logs to classify at full precision.
        #[arg(long = "log", value_name = "PATH")]
        logs: Vec<PathBuf>,
        #[command(flatten)]
        groups: GroupArgs,
        #[command(flatten)]
        generation: GenArgs,
    },
    /// Capture, analyze, classify and intervene in one run.
    Report {
        #[arg(long = "group", value_name = "NAME=PATH", required = true)]
        groups: Vec<GroupSpec>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Intervention prompts (defaults to the malicious group).
        #[arg(long, value_name = "PATH")]
        intervention_prompts: Option<PathBuf>,
        /// Generated tokens routed with --include-generated-tokens.
        #[arg(long, default_value_t = 16)]
        capture_max_new_tokens: usize,
        #[arg(long)]
        no_gradient: bool,
        #[arg(long, default_value_t = DEFAULT_OVERLAP_K)]
        overlap_k: usize,
        #[command(flatten)]
        group_names: GroupArgs,
        #[command(flatten)]
        generation: GenArgs,
    },
}

fn load_logs(paths: &[PathBuf]) -> CliResult<RoutingLog> {
    let mut logs = Vec::with_capacity(paths.len());
    for p in paths {
        let loaded = load_routing_log(p)?;
        for w in &loaded.warnings {
            log::warn!("{}: {w}", p.display());
        }
        logs.push(loaded.log);
    }
    merge_logs(logs)
}

fn keyword_labeler(markers: &[String]) -> CliResult<KeywordLabeler> {
    if markers.is_empty() {
        Ok(KeywordLabeler::default())
    } else {
        KeywordLabeler::new(markers).map_err(|e| CliError::Usage(e.to_string()))
    }
}

enum AnyLabeler {
    Table(LabelTable),
    Keyword(KeywordLabeler),
}

impl AnyLabeler {
    fn new(labels: Option<&Path>, markers: &[String]) -> CliResult<AnyLabeler> {
        match labels {
            Some(p) => Ok(AnyLabeler::Table(load_label_file(p)?)),
            None => Ok(AnyLabeler::Keyword(keyword_labeler(markers)?)),
        }
    }

    fn as_dyn(&self) -> &(dyn Labeler + Sync) {
        match self {
            AnyLabeler::Table(t) => t,
            AnyLabeler::Keyword(k) => k,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            AnyLabeler::Table(_) => "label-file",
            AnyLabeler::Keyword(_) => "keyword",
        }
    }
}

fn plan(g: &Global, gen: &GenArgs) -> InterventionPlan {
    InterventionPlan {
        category: gen.category,
        top_n: g.top_n,
        settings: GenerationSettings {
            max_new_tokens: gen.max_new_tokens,
            scope: gen.suppression_scope.into(),
        },
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    let signal = Signal::from(g.signal);
    match &cli.command {
        Command::Capture {
            groups,
            out,
            max_new_tokens,
            no_gradient,
        } => {
            let cfg = load_model_config(g.config.as_deref(), g.seed)?;
            let model = MoeModel::new(cfg).map_err(|e| CliError::invalid("model config", e))?;
            let prompts = read_groups(groups, cfg.vocab_size)?;
            let settings = CaptureSettings {
                include_generated: g.include_generated_tokens,
                max_new_tokens: *max_new_tokens,
                scope: SuppressionScope::Everywhere,
                gradient: !no_gradient,
            };
            let log = commands::capture(&model, &prompts, &settings)?;
            save_routing_log(&log, out)?;
            log::info!("wrote {} prompts to {}", log.prompts.len(), out.display());
        }
        Command::AnalyzeExperts { logs, out, overlap_k } => {
            let log = load_logs(logs)?;
            commands::analyze_experts(&log, signal, *overlap_k, out)?;
        }
        Command::AnalyzeLayers { logs, out } => {
            let log = load_logs(logs)?;
            commands::analyze_layers(&log, signal, out)?;
        }
        Command::Classify { logs, out, groups } => {
            let log = load_logs(logs)?;
            let t = commands::thresholds_for(signal, g.gap_threshold, g.min_avg_magnitude)?;
            let c = commands::classify(&log, signal, &groups.pair(), &t, out)?;
            for (cat, n) in c.counts.iter() {
                log::info!("{}: {n}", cat.as_str());
            }
        }
        Command::Intervene {
            out,
            prompts,
            prompt_group,
            classification,
            logs,
            groups,
            generation,
        } => {
            let Some(prompts) = prompts else {
                let Some(labels) = &g.labels else {
                    return Err(CliError::Usage(
                        "intervene needs --prompts, or --labels for accounting only".into(),
                    ));
                };
                let report = commands::intervene_from_labels(&load_label_file(labels)?, out)?;
                log::info!("{:?}", report.summary);
                return Ok(());
            };
            let rows = match (classification, logs.is_empty()) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                    parse_classification(&text, &path.display().to_string())?
                }
                (None, false) => {
                    let log = load_logs(logs)?;
                    let t = commands::thresholds_for(signal, g.gap_threshold, g.min_avg_magnitude)?;
                    commands::classify_groups(&log, signal, &groups.pair(), &t)?.rows
                }
                (None, true) => {
                    return Err(CliError::Usage(
                        "intervene needs --classification or --log".into(),
                    ));
                }
            };
            let cfg = load_model_config(g.config.as_deref(), g.seed)?;
            let model = MoeModel::new(cfg).map_err(|e| CliError::invalid("model config", e))?;
            let prompts = read_prompt_file(prompt_group, prompts, cfg.vocab_size)?;
            let labeler = AnyLabeler::new(g.labels.as_deref(), &generation.markers)?;
            let report = commands::intervene(
                &model,
                &prompts,
                &rows,
                &plan(g, generation),
                labeler.as_dyn(),
                out,
            )?;
            log::info!("{:?}", report.summary);
        }
        Command::Report {
            groups,
            out,
            intervention_prompts,
            capture_max_new_tokens,
            no_gradient,
            overlap_k,
            group_names,
            generation,
        } => {
            let cfg = load_model_config(g.config.as_deref(), g.seed)?;
            let prompts = read_groups(groups, cfg.vocab_size)?;
            let targets = match intervention_prompts {
                Some(p) => Some(read_prompt_file("intervention", p, cfg.vocab_size)?),
                None => None,
            };
            let labeler = AnyLabeler::new(g.labels.as_deref(), &generation.markers)?;
            let report_plan = ReportPlan {
                model: cfg,
                capture: CaptureSettings {
                    include_generated: g.include_generated_tokens,
                    max_new_tokens: *capture_max_new_tokens,
                    scope: SuppressionScope::Everywhere,
                    gradient: !no_gradient,
                },
                groups: group_names.pair(),
                gap_threshold: g.gap_threshold,
                min_avg_magnitude: g.min_avg_magnitude,
                intervention: plan(g, generation),
                overlap_k: *overlap_k,
            };
            commands::report(
                &report_plan,
                &prompts,
                targets.as_deref(),
                labeler.as_dyn(),
                labeler.name(),
                out,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
