//! `owas`: synthesize data, train, evaluate, detect and tabulate results.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod manifest;
mod table;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use owas::batch::ClassIndex;
use owas::checkpoint::Checkpoint;
use owas::config::TrainConfig;
use owas::metrics::MetricReport;
use owas::pipeline::{self, NoveltyDetector, Routing, DEFAULT_PERCENTILE};
use owas::skeleton::{self, SynthOptions};
use owas::trainer::{self, LOG_HEADER};
use owas::{DecoderKind, SkeletonSequence};

use manifest::SplitManifest;

#[derive(Parser)]
#[command(name = "owas", version, about = "Open-world skeleton action segmentation")]
struct Cli {
    /// More log output (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its split manifest
    Synth(SynthArgs),
    /// Train a model and write the best checkpoint
    Train(TrainArgs),
    /// Run the closed, open and OOD-only evaluation scenarios
    Eval(EvalArgs),
    /// Run detection and clustering on unlabelled data
    Detect(DetectArgs),
    /// Tabulate several metric reports
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Comma-separated novel class ids
    #[arg(long, value_delimiter = ',')]
    novel: Vec<u32>,
    #[arg(long, default_value_t = 300)]
    sequences: usize,
    /// Frames per action segment
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 6)]
    joints: usize,
    #[arg(long, default_value_t = 0.4)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    min_segments: usize,
    #[arg(long, default_value_t = 4)]
    max_segments: usize,
    #[arg(long, default_value_t = 0.6)]
    train_ratio: f64,
    #[arg(long, default_value_t = 0.2)]
    val_ratio: f64,
    /// Dataset path; the split manifest goes next to it as `<stem>.split.toml`
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Split manifest (default: `<data stem>.split.toml`)
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Flat TOML config; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lr0=0.05` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    no_mixup: bool,
    #[arg(long)]
    no_tc_loss: bool,
    #[arg(long, value_parser = ["teu", "tpp"])]
    decoder: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log (default: `<out stem>.log.csv`)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Percentile of validation confidences used as the novelty threshold
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    percentile: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Sequences to run; their labels are ignored
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fixed threshold; without it the threshold is calibrated on the
    /// validation split of `--data`
    #[arg(long, conflicts_with_all = ["data", "split"])]
    alpha: Option<f64>,
    /// Calibration dataset
    #[arg(long, required_unless_present = "alpha")]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    percentile: f64,
    /// Number of novel pseudo-classes
    #[arg(long, default_value_t = 1)]
    clusters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-frame outcome TSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// `NAME=PATH` to a report file or eval directory; a bare path is
    /// labelled by its file or directory name
    #[arg(required = true)]
    reports: Vec<String>,
    #[arg(long, default_value = "open")]
    scenario: String,
    /// Write the text grid here as well as to stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome = std::result::Result<(), Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn io_context(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Detect(a) => detect(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
    }
}

fn synth(a: SynthArgs) -> Outcome {
    if let Some(bad) = a.novel.iter().find(|&&c| c as usize >= a.classes) {
        return Err(Failure::Usage(format!(
            "novel class {bad} is not one of the {} generated classes (0..{})",
            a.classes,
            a.classes.saturating_sub(1)
        )));
    }
    let novel: BTreeSet<u32> = a.novel.iter().copied().collect();
    if novel.len() >= a.classes {
        return Err(Failure::Usage("at least one class must stay known".into()));
    }
    let opts = SynthOptions {
        num_sequences: a.sequences,
        min_segments: a.min_segments,
        max_segments: a.max_segments,
    };
    let seqs = skeleton::generate_synthetic_with(a.seed, a.classes, a.frames, a.joints, a.noise, opts)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let manifest = SplitManifest {
        dataset: a.out.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        seed: a.seed,
        classes: a.classes,
        known: (0..a.classes as u32).filter(|c| !novel.contains(c)).collect(),
        novel: novel.into_iter().collect(),
        train_ratio: a.train_ratio,
        val_ratio: a.val_ratio,
    };
    manifest.split(&seqs).map_err(|e| Failure::Usage(e.to_string()))?;
    skeleton::save_dataset(&a.out, &seqs).map_err(runtime)?;
    let path = SplitManifest::default_path(&a.out);
    manifest.save(&path).map_err(io_context(&path))?;
    println!("wrote {} sequences to {} and split manifest {}", seqs.len(), a.out.display(), path.display());
    Ok(())
}

fn load_split(d: &DataArgs) -> std::result::Result<(SplitManifest, owas::OpenWorldSplit), Failure> {
    let split_path = d.split.clone().unwrap_or_else(|| SplitManifest::default_path(&d.data));
    let manifest = SplitManifest::load(&split_path).map_err(Failure::Runtime)?;
    let seqs = skeleton::load_dataset(&d.data).map_err(|e| runtime(format!("{}: {e}", d.data.display())))?;
    let split = manifest.split(&seqs).map_err(runtime)?;
    Ok((manifest, split))
}

fn train_config(a: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    let usage = |e: owas::Error| Failure::Usage(e.to_string());
    let mut c = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_context(p))?;
            TrainConfig::from_toml(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        c.set(k.trim(), v.trim()).map_err(usage)?;
    }
    if a.no_mixup {
        c.mixup_enabled = false;
    }
    if a.no_tc_loss {
        c.tc_loss_enabled = false;
    }
    if let Some(d) = &a.decoder {
        c.arch.decoder = if d == "tpp" { DecoderKind::Tpp } else { DecoderKind::Teu };
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    c.validate().map_err(usage)?;
    Ok(c)
}

fn train(a: TrainArgs) -> Outcome {
    let config = train_config(&a)?;
    let (_, split) = load_split(&a.data)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.csv"));
    let mut log = fs::File::create(&log_path).map_err(io_context(&log_path))?;
    writeln!(log, "{LOG_HEADER}").map_err(io_context(&log_path))?;
    let mut write_err = None;
    let outcome = trainer::train_with(&split, &config, |row| {
        if let Err(e) = writeln!(log, "{}", row.to_csv()) {
            write_err.get_or_insert(e);
        }
    })
    .map_err(runtime)?;
    if let Some(e) = write_err {
        return Err(io_context(&log_path)(e));
    }
    outcome.checkpoint.save(&a.out).map_err(runtime)?;
    let config_path = a.out.with_extension("config.toml");
    fs::write(&config_path, config.to_toml()).map_err(io_context(&config_path))?;
    let ck = &outcome.checkpoint;
    println!(
        "best epoch {} val_acc {:.4} val_loss {:.4}; checkpoint {}",
        ck.epoch,
        ck.val_accuracy,
        ck.val_loss,
        a.out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> std::result::Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn eval(a: EvalArgs) -> Outcome {
    check_percentile(a.percentile)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let (_, split) = load_split(&a.data)?;
    if ck.classes.classes() != split.known_classes.iter().copied().collect::<Vec<_>>() {
        return Err(Failure::Runtime(format!(
            "checkpoint classes {:?} differ from the split's known classes {:?}",
            ck.classes.classes(),
            split.known_classes
        )));
    }
    let ev = pipeline::evaluate(&ck.model, &split, a.percentile, a.seed).map_err(runtime)?;
    fs::create_dir_all(&a.out_dir).map_err(io_context(&a.out_dir))?;
    let mut csv = MetricReport::csv_header();
    csv.push('\n');
    for r in &ev.reports {
        let path = a.out_dir.join(format!("report_{}.txt", r.scenario));
        fs::write(&path, r.to_text()).map_err(io_context(&path))?;
        csv += &r.to_csv_row();
        csv.push('\n');
        println!("{}", r.to_csv_row());
    }
    let path = a.out_dir.join("report.csv");
    fs::write(&path, csv).map_err(io_context(&path))?;
    let path = a.out_dir.join("outcomes.tsv");
    let mut out = fs::File::create(&path).map_err(io_context(&path))?;
    pipeline::write_outcomes(&mut out, &ev.outcomes).map_err(io_context(&path))?;
    let path = a.out_dir.join("eval.toml");
    let meta = format!(
        "checkpoint = {:?}\nconfig_hash = {:?}\nseed = {}\npercentile = {:?}\nalpha = {:?}\n",
        a.checkpoint.display().to_string(),
        ck.config_hash,
        a.seed,
        a.percentile,
        ev.detector.alpha
    );
    fs::write(&path, meta).map_err(io_context(&path))?;
    Ok(())
}

fn check_percentile(p: f64) -> Outcome {
    if p > 0.0 && p <= 50.0 {
        Ok(())
    } else {
        Err(Failure::Usage(format!("--percentile {p} is outside (0, 50]")))
    }
}

fn detect(a: DetectArgs) -> Outcome {
    check_percentile(a.percentile)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let detector = match (a.alpha, &a.data) {
        (Some(alpha), _) => NoveltyDetector::new(alpha).map_err(|e| Failure::Usage(e.to_string()))?,
        (None, Some(data)) => {
            let (_, split) = load_split(&DataArgs {
                data: data.clone(),
                split: a.split.clone(),
            })?;
            let conf = pipeline::validation_confidences(&ck.model, &split.val).map_err(runtime)?;
            pipeline::calibrate_threshold(&conf, a.percentile).map_err(runtime)?
        }
        (None, None) => unreachable!("clap requires --data without --alpha"),
    };
    let seqs: Vec<SkeletonSequence> =
        skeleton::load_dataset(&a.input).map_err(|e| runtime(format!("{}: {e}", a.input.display())))?;
    let classes: &ClassIndex = &ck.classes;
    let outcomes = pipeline::run_pipeline(
        &ck.model,
        classes,
        Routing::Detector(&detector),
        &seqs,
        a.clusters,
        None,
        a.seed,
    )
    .map_err(runtime)?;
    let mut out = fs::File::create(&a.out).map_err(io_context(&a.out))?;
    pipeline::write_outcomes(&mut out, &outcomes).map_err(io_context(&a.out))?;
    let flagged: usize = outcomes.iter().map(|o| o.frames.iter().filter(|f| !f.is_known).count()).sum();
    let total: usize = outcomes.iter().map(|o| o.frames.len()).sum();
    println!("alpha {:.6}: {flagged} of {total} frames flagged novel", detector.alpha);
    Ok(())
}

/// Loads the report for `scenario` from a file or an eval output directory.
fn load_report(name: &str, path: &Path, scenario: &str) -> std::result::Result<MetricReport, Failure> {
    let named = |m: String| Failure::Runtime(format!("report '{name}' ({}): {m}", path.display()));
    let file = if path.is_dir() {
        path.join(format!("report_{scenario}.txt"))
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| named(e.to_string()))?;
    let report = if file.extension().is_some_and(|e| e == "csv") {
        MetricReport::from_csv(&text)
            .map_err(|e| named(e.to_string()))?
            .into_iter()
            .find(|r| r.scenario == scenario)
            .ok_or_else(|| named(format!("no '{scenario}' row")))?
    } else {
        MetricReport::from_text(&text).map_err(|e| named(e.to_string()))?
    };
    Ok(MetricReport {
        scenario: name.to_string(),
        ..report
    })
}

fn report(a: ReportArgs) -> Outcome {
    let mut rows = Vec::with_capacity(a.reports.len());
    for entry in &a.reports {
        let (name, path) = match entry.split_once('=') {
            Some((n, p)) if !n.is_empty() => (n.to_string(), PathBuf::from(p)),
            _ => {
                let p = PathBuf::from(entry);
                let n = p.file_stem().map_or_else(|| entry.clone(), |s| s.to_string_lossy().into_owned());
                (n, p)
            }
        };
        if name.contains(',') {
            return Err(Failure::Usage(format!("report name '{name}' must not contain a comma")));
        }
        rows.push(load_report(&name, &path, &a.scenario)?);
    }
    let text = table::render(&rows);
    print!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, &text).map_err(io_context(p))?;
    }
    if let Some(p) = &a.csv {
        fs::write(p, table::to_csv(&rows)).map_err(io_context(p))?;
    }
    Ok(())
}
