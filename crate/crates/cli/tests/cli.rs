use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use owas::metrics::MetricReport;
use owas::skeleton::load_dataset;

fn owas(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owas"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = owas(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SYNTH: &[&str] = &[
    "synth", "--classes", "4", "--novel", "3", "--sequences", "40", "--frames", "8", "--joints", "5", "--seed", "1",
    "--out", "d.owas",
];

const SMALL: &[&str] = &[
    "--epochs", "2", "--set", "channels=[4, 6, 8]", "--set", "decoder_channels=4", "--set", "embed_dim=5",
];

fn train(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", "d.owas", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(dir, &args)
}

/// synth + train + eval in a fresh directory.
fn pipeline() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SYNTH);
    train(dir.path(), "m.ckpt", &[]);
    ok(dir.path(), &["eval", "--data", "d.owas", "--checkpoint", "m.ckpt", "--out-dir", "ev"]);
    let ev = dir.path().join("ev");
    (dir, ev)
}

#[test]
fn synth_is_loadable_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SYNTH);
    let first = std::fs::read(dir.path().join("d.owas")).unwrap();
    assert_eq!(load_dataset(dir.path().join("d.owas")).unwrap().len(), 40);
    let manifest = std::fs::read_to_string(dir.path().join("d.split.toml")).unwrap();
    assert!(manifest.contains("novel = [3]") && manifest.contains("known = [0, 1, 2]"));
    ok(dir.path(), SYNTH);
    assert_eq!(std::fs::read(dir.path().join("d.owas")).unwrap(), first);
}

#[test]
fn bad_novel_class_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = owas(dir.path(), &["synth", "--classes", "6", "--novel", "9", "--out", "x.owas"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("novel class 9"));
    assert!(!dir.path().join("x.owas").exists());
    let out = owas(dir.path(), &["synth", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn ablation_switches_zero_the_clustering_columns() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SYNTH);
    train(dir.path(), "b.ckpt", &["--no-mixup", "--no-tc-loss", "--decoder", "tpp"]);
    let log = std::fs::read_to_string(dir.path().join("b.log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "epoch,lr,loss,ce,l_intra,l_inter,val_acc,val_loss");
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let epoch: i32 = f[0].parse().unwrap();
        let lr: f64 = f[1].parse().unwrap();
        assert_eq!(lr, 0.025 * 0.95f64.powi(epoch));
        assert_eq!((f[4], f[5]), ("0.000000", "0.000000"));
        rows += 1;
    }
    assert_eq!(rows, 2);
    let config = std::fs::read_to_string(dir.path().join("b.config.toml")).unwrap();
    assert!(config.contains("mixup_enabled = false") && config.contains("decoder = \"tpp\""));
}

#[test]
fn bad_config_override_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SYNTH);
    let out = owas(dir.path(), &["train", "--data", "d.owas", "--out", "m.ckpt", "--set", "nope=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nope"));
}

#[test]
fn eval_writes_reports_for_every_scenario() {
    let (_dir, ev) = pipeline();
    let read = |s: &str| MetricReport::from_text(&std::fs::read_to_string(ev.join(format!("report_{s}.txt"))).unwrap()).unwrap();
    let closed = read("closed");
    assert!(closed.acc_close.is_some());
    assert_eq!((closed.auroc, closed.acc_ood, closed.h_score), (None, None, None));
    let open = read("open");
    for v in [open.acc_close, open.acc_open, open.auroc, open.acc_ood, open.h_score] {
        assert!((0.0..=1.0).contains(&v.unwrap()));
    }
    let ood = read("ood");
    assert_eq!(ood.acc_open, ood.acc_ood);
    let csv = MetricReport::from_csv(&std::fs::read_to_string(ev.join("report.csv")).unwrap()).unwrap();
    assert_eq!(csv, vec![closed, open, ood]);
    let outcomes = std::fs::read_to_string(ev.join("outcomes.tsv")).unwrap();
    assert!(outcomes.starts_with("sequence\tframe\tknown_pred"));
    assert!(std::fs::read_to_string(ev.join("eval.toml")).unwrap().contains("seed = 0"));
}

#[test]
fn eval_failure_names_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SYNTH);
    train(dir.path(), "m.ckpt", &[]);
    // every known-only sequence goes to train or val, leaving no closed-set test data
    let manifest = std::fs::read_to_string(dir.path().join("d.split.toml")).unwrap();
    let manifest = manifest
        .replace("train_ratio = 0.6", "train_ratio = 0.7")
        .replace("val_ratio = 0.2", "val_ratio = 0.299");
    std::fs::write(dir.path().join("tight.toml"), manifest).unwrap();
    let out = owas(
        dir.path(),
        &["eval", "--data", "d.owas", "--split", "tight.toml", "--checkpoint", "m.ckpt", "--out-dir", "ev"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("closed scenario"), "{}", stderr(&out));
}

#[test]
fn report_renders_one_row_per_input_and_round_trips() {
    let (dir, _) = pipeline();
    let single = ok(dir.path(), &["report", "only=ev"]);
    assert_eq!(single.lines().count(), 3);
    ok(
        dir.path(),
        &["report", "baseline=ev/report_open.txt", "full=ev", "--csv", "t.csv", "--out", "t.txt"],
    );
    let text = std::fs::read_to_string(dir.path().join("t.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("Config") && lines[0].contains("F1@50") && lines[0].contains("ACC_OOD"));
    assert!(lines.iter().all(|l| l.len() == lines[0].len()));
    let rows = MetricReport::from_csv(&std::fs::read_to_string(dir.path().join("t.csv")).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.scenario.as_str()).collect::<Vec<_>>(), ["baseline", "full"]);
    let open = MetricReport::from_text(&std::fs::read_to_string(dir.path().join("ev/report_open.txt")).unwrap()).unwrap();
    assert_eq!(rows[0], MetricReport { scenario: "baseline".into(), ..open });
}

#[test]
fn report_with_missing_column_names_the_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.txt"), "scenario: open\nacc_close: 50.00\n").unwrap();
    let out = owas(dir.path(), &["report", "broken=bad.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("broken"));
}

#[test]
fn detect_flags_frames_with_a_fixed_threshold() {
    let (dir, _) = pipeline();
    let out = ok(
        dir.path(),
        &["detect", "--input", "d.owas", "--checkpoint", "m.ckpt", "--alpha", "0.999999", "--clusters", "2", "--out", "det.tsv"],
    );
    // a two-epoch model is never that confident
    let tsv = std::fs::read_to_string(dir.path().join("det.tsv")).unwrap();
    let frames: Vec<&str> = tsv.lines().skip(1).collect();
    assert!(out.contains(&format!("{} of {} frames", frames.len(), frames.len())));
    assert!(frames.iter().all(|l| l.split('\t').nth(4) == Some("0")));
    let out = owas(dir.path(), &["detect", "--input", "d.owas", "--checkpoint", "m.ckpt", "--out", "x.tsv"]);
    assert_eq!(out.status.code(), Some(2));
}
