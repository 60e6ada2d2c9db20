use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[synth]
train_pos = 12
train_neg = 12
val_pos = 4
val_neg = 4
test_pos = 6
test_neg = 6
sequences = 15
sequence_length = 12
drive_frames = 60
stereo_baseline_px = 0

[data]
arch = "reduced"
gan_positives = 64

[gan]
epochs = 2
batch = 16

[invgen]
epochs = 2
batch = 16

[head]
max_epochs = 5

[temporal]
max_epochs = 3
window = 12

[eval]
efficiency_counts = [8, 16]
efficiency_seeds = [1]
saliency_frames = 4
bench_warmup = 0
bench_iters = 2
backprop_steps = 5

[stream]
rate_hz = 0
"#;

fn traverse(config: &Path, run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_traverse"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("TRAVERSE_RUN_DIR", run)
        .env_remove("TRAVERSE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(config: &Path, run: &Path, args: &[&str]) -> Output {
    let out = traverse(config, run, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn full_pipeline(config: &Path, run: &Path) -> Vec<u8> {
    for args in [
        &["synth"][..],
        &["annotate"],
        &["train-gan"],
        &["train-invgen"],
        &["train-head", "--kind", "single"],
        &["reannotate"],
        &["train-head", "--kind", "temporal"],
        &["eval"],
    ] {
        ok(config, run, args);
    }
    std::fs::read(run.join("metrics.csv")).expect("metrics.csv")
}

#[test]
fn pipeline_is_reproducible_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();

    // stage order is enforced before any work happens
    let early = traverse(&config, &dir.path().join("empty"), &["train-invgen"]);
    assert_eq!(early.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&early.stderr).contains("train-gan"));

    let a = full_pipeline(&config, &dir.path().join("a"));
    let b = full_pipeline(&config, &dir.path().join("b"));
    assert_eq!(a, b, "same seed and config must give identical metrics");
    let text = String::from_utf8(a).unwrap();
    for model in ["invgen_unsupervised", "gonet", "gonet_retrained", "gonet_t"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{model},"))), "{model} row missing:\n{text}");
    }

    let run = dir.path().join("a");
    for f in ["config.toml", "seed", "efficiency.csv", "saliency/gonet.png", "reannotation_report.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    ok(&config, &run, &["trace"]);
    assert!(std::fs::read_dir(run.join("traces")).unwrap().count() > 0);
    ok(&config, &run, &["bench"]);
    assert!(std::fs::read_to_string(run.join("bench.csv")).unwrap().contains("invert_backprop_5"));

    let out = ok(&config, &run, &["stream", "--model", "temporal", "--source-hz", "0"]);
    let records: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("one JSON record per line"))
        .collect();
    assert!(!records.is_empty());
    let ts: Vec<f64> = records.iter().map(|r| r["t"].as_f64().unwrap()).collect();
    assert!(ts.windows(2).all(|w| w[0] < w[1]));
    assert!(records.iter().all(|r| matches!(r["state"].as_str(), Some("RUNNING" | "STOPPED"))));

    // stereo heads need stereo feature networks
    let stereo = traverse(&config, &run, &["train-head", "--kind", "stereo"]);
    assert_eq!(stereo.status.code(), Some(3));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[gan]\nepochz = 3\n").unwrap();
    let out = traverse(&config, &dir.path().join("run"), &["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    std::fs::write(&config, "[stream]\nhysteresis_k = 0\n").unwrap();
    let out = traverse(&config, &dir.path().join("run"), &["stream"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_defaults() {
    let out = Command::new(env!("CARGO_BIN_EXE_traverse")).arg("--help").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["rate_hz = 3.0", "hysteresis_k = 2", "gan_positives = 2000", "TRAVERSE_RUN_DIR", "TRAVERSE_SEED"] {
        assert!(text.contains(key), "{key} not in --help");
    }
}
