use std::path::{Path, PathBuf};
use std::process::Command;

use duoheap_cli::{apply_param, cmd_gen_trace, cmd_run, cmd_sweep, CliError};
use duoheap::{MetricsReport, RuntimeConfig};

const SMALL: &str = r#"
mode = "tc"
seed = 3
trace = "t.trace"
metrics = "out/m.csv"

[h1]
young_size = "64KiB"
old_size = "448KiB"

[h2]
size = "64MiB"
region_size = "256KiB"
card_segment = "8KiB"
stripe_size = "64KiB"
scan_threads = 2
backing = "anonymous"
"#;

fn setup(dir: &Path, config: &str) -> PathBuf {
    cmd_gen_trace("cc_like", 4, 9, &dir.join("t.trace")).unwrap();
    let p = dir.join("run.toml");
    std::fs::write(&p, config).unwrap();
    p
}

fn read_csv(p: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(p).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn run_writes_header_and_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), SMALL);
    let report = cmd_run(&cfg).unwrap();
    let rows = read_csv(&dir.path().join("out/m.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], MetricsReport::header());
    assert_eq!(rows[1][0], report.run_id);
    assert!(report.gc.objects_moved_to_h2 > 0);
}

#[test]
fn bad_stripe_names_both_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), &SMALL.replace("stripe_size = \"64KiB\"", "stripe_size = \"12KiB\""));
    let e = cmd_run(&cfg).unwrap_err().to_string();
    assert!(e.contains("h2.stripe_size") && e.contains("h2.card_segment"), "{e}");
}

#[test]
fn missing_trace_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    assert!(matches!(cmd_run(&cfg), Err(CliError::Io { .. })));
}

#[test]
fn sweep_card_segment_normalizes_to_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), SMALL);
    let values: Vec<String> = ["4KiB", "8KiB", "16KiB"].map(String::from).to_vec();
    let reports = cmd_sweep(&cfg, "card_segment", &values).unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports.windows(2).all(|w| w[0].checksums == w[1].checksums));
    let rows = read_csv(&dir.path().join("out/m.csv"));
    assert_eq!(rows.len(), 4);
    let col = rows[0].iter().position(|c| c == "norm_events").unwrap();
    assert!(rows[1..].iter().all(|r| r[col] == "1.000000"));
    assert_eq!(rows[3][rows[0].iter().position(|c| c == "value").unwrap()], "16KiB");
}

#[test]
fn sweep_rejects_unknown_parameter_and_bad_values() {
    let base = RuntimeConfig::from_toml(&SMALL.replace("t.trace", "/nonexistent")).unwrap();
    assert!(matches!(apply_param(&base, "colour", "red"), Err(CliError::Usage(_))));
    assert!(apply_param(&base, "stripe_size", "12KiB").is_err());
    assert!(apply_param(&base, "mode", "fast").is_err());
    let c = apply_param(&base, "h1_size", "1MiB").unwrap();
    assert_eq!(c.h1.total(), 1 << 20);
    assert_eq!(apply_param(&base, "write_strategy", "direct").unwrap().migration.mode, duoheap::WriteMode::Direct);
}

#[test]
fn mode_sweep_tc_never_serializes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), SMALL);
    let reports = cmd_sweep(&cfg, "mode", &["tc".into(), "sd".into(), "mo".into()]).unwrap();
    assert_eq!(reports[0].bytes_serialized, 0);
    assert_eq!(reports[0].checksums, reports[1].checksums);
    assert_eq!(reports[0].checksums, reports[2].checksums);
}

#[test]
fn gen_trace_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_gen_trace("pagerank_like", 4, 5, &a).unwrap();
    cmd_gen_trace("pagerank_like", 4, 5, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(cmd_gen_trace("zipf", 4, 5, &a).is_err());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_duoheap"))
}

#[test]
fn binary_exit_codes_and_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), SMALL);
    let alt = dir.path().join("alt.csv");
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .env("DUOHEAP_METRICS", &alt)
        .env("DUOHEAP_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&alt);
    let seed = rows[0].iter().position(|c| c == "seed").unwrap();
    assert_eq!(rows[1][seed], "77");
    assert!(!dir.path().join("out/m.csv").exists());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, SMALL.replace("stripe_size = \"64KiB\"", "stripe_size = \"12KiB\"")).unwrap();
    let out = bin().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("h2.stripe_size"));

    let t = dir.path().join("g.trace");
    let out = bin()
        .args(["gen-trace", "--profile", "uniform", "--scale", "3", "--seed", "1", "--out"])
        .arg(&t)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(std::fs::read_to_string(&t).unwrap().contains("define_class item"));

    let out = bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--param", "write_strategy", "--values", "direct,batched"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn repeated_runs_have_identical_work_counters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), SMALL);
    let a = cmd_run(&cfg).unwrap();
    let b = cmd_run(&cfg).unwrap();
    let work = |r: &MetricsReport| {
        r.columns().into_iter().filter(|(k, _)| !k.ends_with("_ns")).collect::<Vec<_>>()
    };
    assert_eq!(work(&a), work(&b));
}
