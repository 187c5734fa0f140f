use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_routelens"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn groups() -> Vec<String> {
    vec![
        "--group".into(),
        format!("benign={}", fixture("benign.txt").display()),
        "--group".into(),
        format!("harmful={}", fixture("harmful.txt").display()),
    ]
}

fn run(args: &[&str], extra: &[String]) -> Output {
    bin().args(args).args(extra).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn capture_log(dir: &Path, extra: &[&str]) -> PathBuf {
    let log = dir.join("log.json");
    let mut args = vec!["capture", "--out", log.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = run(&args, &groups());
    assert!(o.status.success(), "{}", stderr(&o));
    log
}

#[test]
fn usage_errors_exit_1_with_usage_text() {
    let o = run(&["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = run(&["capture", "--bogus"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["--help"], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("analyze-experts"));
}

#[test]
fn invalid_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"format\":\"something-else\"}\n").unwrap();
    let o = run(
        &[
            "analyze-experts",
            "--log",
            bad.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let cfg = dir.path().join("model.toml");
    fs::write(&cfg, "top_k = 9\nnum_experts = 8\n").unwrap();
    let out = dir.path().join("log.json");
    let o = run(
        &[
            "capture",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &groups(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_file_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "analyze-layers",
            "--log",
            dir.path().join("nope.json").to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn capture_then_analyze_experts_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let log = capture_log(dir.path(), &[]);
    let out = dir.path().join("experts");
    let o = run(
        &[
            "analyze-experts",
            "--log",
            log.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
    let summary = fs::read_to_string(out.join("expert_summary_group.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3, "{summary}");
    assert!(out.join("rank_plot_benign.csv").exists());
    assert!(out.join("top_overlap.csv").exists());

    let o = run(
        &[
            "analyze-layers",
            "--signal",
            "gradient",
            "--log",
            log.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let layers = fs::read_to_string(out.join("layer_summary_harmful.csv")).unwrap();
    assert_eq!(layers.lines().count(), 9);
}

#[test]
fn gradient_signal_needs_gradient_maps() {
    let dir = tempfile::tempdir().unwrap();
    let log = capture_log(dir.path(), &["--no-gradient"]);
    let o = run(
        &[
            "analyze-experts",
            "--signal",
            "gradient",
            "--log",
            log.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no gradient maps"), "{}", stderr(&o));
}

#[test]
fn classify_defaults_and_intervene_top_n() {
    let dir = tempfile::tempdir().unwrap();
    let log = capture_log(dir.path(), &["--no-gradient"]);
    let cls = dir.path().join("cls");
    let o = run(
        &[
            "classify",
            "--log",
            log.to_str().unwrap(),
            "--out",
            cls.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cls.join("classification_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["gap_threshold"], 0.05);
    assert_eq!(meta["min_avg_magnitude"], 0.08);
    let counts = fs::read_to_string(cls.join("classification_counts.csv")).unwrap();
    assert!(counts.ends_with("total,64\n"), "{counts}");

    let csv = cls.join("classification.csv");
    let run_with = |n: &str, out: &Path| {
        run(
            &[
                "intervene",
                "--top-n",
                n,
                "--max-new-tokens",
                "4",
                "--classification",
                csv.to_str().unwrap(),
                "--prompts",
                fixture("harmful.txt").to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
            &[],
        )
    };
    let out = dir.path().join("iv");
    let o = run_with("5", &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let set = fs::read_to_string(out.join("suppression_set.csv")).unwrap();
    assert_eq!(set.lines().count(), 6, "{set}");
    let iv = fs::read_to_string(out.join("intervention.csv")).unwrap();
    assert_eq!(
        iv.lines().next(),
        Some("prompt_id,baseline_label,suppressed_label,transition")
    );
    assert_eq!(iv.lines().count(), 4);

    let o = run_with("60", &dir.path().join("iv2"));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("60 requested"), "{}", stderr(&o));
}

#[test]
fn accounting_from_labels_alone() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.csv");
    fs::write(
        &labels,
        "prompt_id,arm,label\na,baseline,restricted\na,suppressed,non-restricted\nb,baseline,restricted\nb,suppressed,restricted\n",
    )
    .unwrap();
    let out = dir.path().join("acct");
    let o = run(
        &[
            "intervene",
            "--labels",
            labels.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let t = fs::read_to_string(out.join("transition_summary.csv")).unwrap();
    assert_eq!(t.lines().nth(1), Some("2,2,1,1,0,1,0,0.5"));

    fs::write(&labels, "a,baseline,restricted\n").unwrap();
    let o = run(
        &[
            "intervene",
            "--labels",
            labels.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn two_logs_merge_for_classification() {
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for (name, file) in [("benign", "benign.txt"), ("harmful", "harmful.txt")] {
        let log = dir.path().join(format!("{name}.json"));
        let o = bin()
            .args([
                "capture",
                "--no-gradient",
                "--out",
                log.to_str().unwrap(),
                "--group",
            ])
            .arg(format!("{name}={}", fixture(file).display()))
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        logs.push(log);
    }
    let out = dir.path().join("cls");
    let o = run(
        &[
            "classify",
            "--log",
            logs[0].to_str().unwrap(),
            "--log",
            logs[1].to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(out.join("classification.csv"))
            .unwrap()
            .lines()
            .count(),
        65
    );
}
