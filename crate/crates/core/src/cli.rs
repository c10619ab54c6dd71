//! Command-line interface.
//!
//! Exit status is 0 on success, 2 on usage errors and 1 on validation or
//! runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::data::{
    load_dataset, make_splits, write_dataset, write_gray_png, Dataset, SplitName, Splits, ValidationReport,
};
use crate::detect::{oracle_detections, read_detections_jsonl, write_detections_jsonl};
use crate::domain::RadiographCategory;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Network, PriorPyramid, Variant};
use crate::report::{render_report, OverlaySample};
use crate::synth::{generate_dataset, parse_mix};
use crate::train::{
    attach_priors, compare_models, evaluate, prepare_from_dataset, train_stage2, ExperimentData, History,
    PriorProvider, PriorSettings, PriorSource, RunConfig, RunDir, Sample, RUN_DIR_ENV,
};

pub const SPLITS_FILE: &str = "splits.json";

#[derive(Debug, Parser)]
#[command(name = "oralbb", version, about = "Box-prior gated U-Net for panoramic tooth segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Validate a dataset and write its train/val/test splits.
    Prepare(PrepareArgs),
    /// Train a network and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Baseline versus gated network across prior drop rates.
    DegradeStudy(DegradeArgs),
    /// Render plots and tables for a run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Category weights as `cat:weight,...`; defaults to the corpus mix.
    #[arg(long)]
    mix: Option<String>,
    /// Side length of the square phantoms.
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    /// Also write ground-truth boxes to `<out>/detections.jsonl`.
    #[arg(long)]
    with_detections: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config file supplying split fractions.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write splits.json and validation.json (defaults to the dataset).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PriorArgs {
    /// Prior source: oracle, detector-file or none.
    #[arg(long)]
    prior: Option<PriorSource>,
    /// Detections file (JSON Lines) for `--prior detector-file`.
    #[arg(long)]
    detections: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, env = RUN_DIR_ENV)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    #[command(flatten)]
    prior: PriorArgs,
    /// Number of validation overlays to render.
    #[arg(long, default_value_t = 4)]
    samples: usize,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Checkpoint file, run directory, or `<run>/best` / `<run>/last`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test1")]
    split: SplitName,
    /// Preprocessing and prior settings; defaults to the run's config.cfg.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = RUN_DIR_ENV)]
    out: PathBuf,
    #[command(flatten)]
    prior: PriorArgs,
    #[arg(long, default_value_t = 4)]
    samples: usize,
}

#[derive(Debug, Args)]
struct DegradeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, env = RUN_DIR_ENV)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0f64, 0.25, 0.5, 0.75, 1.0])]
    drop_rates: Vec<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directory holding history.csv and report.json.
    #[arg(long, env = RUN_DIR_ENV)]
    run: PathBuf,
    /// Metrics report to chart instead of `<run>/report.json`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Output directory (defaults to the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset for overlays of the best checkpoint on `--split`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test1")]
    split: SplitName,
    #[arg(long, default_value_t = 4)]
    samples: usize,
}

/// Failure categories mapped to exit codes.
enum Failure {
    Invalid(ValidationReport),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::DegradeStudy(a) => degrade_study(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Invalid(r)) => {
            eprintln!("dataset validation failed with {} error(s):", r.errors.len());
            for e in &r.errors {
                eprintln!("  error: {e}");
            }
            1
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(value: &T, context: &str) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: context.into(),
        source: e,
    })
}

fn synth(a: SynthArgs) -> CliResult {
    let mix = match &a.mix {
        Some(m) => parse_mix(m)?,
        None => RadiographCategory::default_mix(),
    };
    let (manifest, images) = generate_dataset(a.n, &mix, a.seed, (a.resolution, a.resolution))?;
    write_dataset(&a.out, &manifest)?;
    for (e, img) in manifest.entries.iter().zip(&images) {
        write_gray_png(&a.out.join(&e.file), img)?;
    }
    if a.with_detections {
        let sets: Vec<_> = manifest
            .entries
            .iter()
            .map(|e| oracle_detections(&e.image_id, &e.annotations))
            .collect();
        write_detections_jsonl(&a.out.join("detections.jsonl"), &sets)?;
    }
    println!("wrote {} phantoms ({} teeth) to {}", manifest.len(), manifest.total_annotations(), a.out.display());
    Ok(())
}

fn load_valid(root: &Path) -> std::result::Result<(Dataset, ValidationReport), Failure> {
    let (ds, report) = load_dataset(root)?;
    for w in &report.warnings {
        warn!("{w}");
    }
    if !report.is_ok() {
        return Err(Failure::Invalid(report));
    }
    Ok((ds, report))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::read(p),
        None => Ok(RunConfig::default()),
    }
}

fn prepare(a: PrepareArgs) -> CliResult {
    let (ds, report) = load_valid(&a.data)?;
    let cfg = load_config(a.config.as_deref())?;
    let splits = make_splits(&ds.manifest, a.seed, &cfg.split)?;
    let out = a.out.unwrap_or_else(|| a.data.clone());
    write_text(&out.join(SPLITS_FILE), &to_json(&splits, "splits")?)?;
    write_text(&out.join("validation.json"), &to_json(&report, "validation report")?)?;
    println!("validation passed: {} images, {} annotations", report.images, report.annotations);
    for e in &ds.manifest.entries {
        println!("  {} category {} teeth {}", e.image_id, e.category.id(), e.annotations.len());
    }
    println!(
        "splits: train {}, val {}, test1 {}, test2 {}",
        splits.train.len(),
        splits.val.len(),
        splits.test1.len(),
        splits.test2.len()
    );
    Ok(())
}

/// `splits.json` from `prepare` when present, else a fresh seed-0 split.
fn load_splits(ds: &Dataset, cfg: &RunConfig) -> Result<Splits> {
    let path = ds.root.join(SPLITS_FILE);
    if path.is_file() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        return serde_json::from_str(&text).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        });
    }
    make_splits(&ds.manifest, 0, &cfg.split)
}

fn apply_prior_args(cfg: &mut RunConfig, p: &PriorArgs) -> Result<()> {
    if let Some(src) = p.prior {
        cfg.train.prior_source = src;
    }
    if let Some(d) = &p.detections {
        cfg.detections = Some(d.clone());
    }
    cfg.validate()
}

fn provider_for(cfg: &RunConfig) -> Result<PriorProvider> {
    Ok(match cfg.effective_prior() {
        PriorSource::None => PriorProvider::None,
        PriorSource::Oracle => PriorProvider::Oracle,
        PriorSource::DetectorFile => {
            let path = cfg
                .detections
                .as_ref()
                .ok_or_else(|| Error::Config("detector-file prior needs a detections path".into()))?;
            PriorProvider::Detections(read_detections_jsonl(path)?)
        }
    })
}

fn load_samples(ds: &Dataset, ids: &[String], cfg: &RunConfig, provider: &PriorProvider) -> Result<Vec<Sample>> {
    let prepared = prepare_from_dataset(ds, ids, &cfg.preprocess)?;
    let settings = PriorSettings {
        thresholds: cfg.thresholds,
        degradation: cfg.degradation,
    };
    attach_priors(prepared, provider, &settings)
}

fn overlays(net: &Network, samples: &[Sample], n: usize) -> Result<Vec<OverlaySample>> {
    samples
        .iter()
        .take(n)
        .map(|s| {
            let x = crate::model::image_batch(&[&s.prepared.image])?;
            let prior = match (&s.prior, net.is_gated()) {
                (Some(p), true) => Some(PriorPyramid::new(&[p], net.config.bb_levels)?),
                _ => None,
            };
            let probs = net.forward(&x, prior.as_ref())?;
            Ok(OverlaySample {
                image_id: s.image_id().to_string(),
                image: s.prepared.image.clone(),
                pred: crate::model::predict_mask(&probs, 0)?,
                truth: Some(s.prepared.masks.clone()),
            })
        })
        .collect()
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(v) = a.variant {
        cfg.network.variant = v;
        if v == Variant::UNet {
            cfg.train.prior_source = PriorSource::None;
        }
    }
    apply_prior_args(&mut cfg, &a.prior)?;
    let (ds, _) = load_valid(&a.data)?;
    let splits = load_splits(&ds, &cfg)?;
    let provider = provider_for(&cfg)?;
    let train_set = load_samples(&ds, &splits.train, &cfg, &provider)?;
    let val_set = load_samples(&ds, &splits.val, &cfg, &provider)?;
    info!("training on {} images, validating on {}", train_set.len(), val_set.len());

    let run = RunDir::create(&a.out)?;
    write_text(&run.config(), &cfg.to_text())?;
    let outcome = train_stage2(&train_set, &val_set, &cfg.network, &cfg.train)?;
    Checkpoint {
        network: outcome.best.clone(),
        step: outcome.steps,
    }
    .save(&run.best_checkpoint())?;
    Checkpoint {
        network: outcome.last.clone(),
        step: outcome.steps,
    }
    .save(&run.last_checkpoint())?;
    write_text(&run.history(), &outcome.history.to_csv())?;
    let eval = evaluate(&outcome.best, &val_set, &cfg.thresholds, 0)?;
    write_text(&run.report(), &eval.report.to_json()?)?;
    let ov = overlays(&outcome.best, &val_set, a.samples)?;
    let rendered = render_report(&run.root, Some(&outcome.history), Some(&eval.report), &ov)?;
    for n in &rendered.notices {
        println!("note: {n}");
    }
    println!(
        "best epoch {} of {}; validation dice {}; run written to {}",
        outcome.best_epoch,
        cfg.train.epochs,
        eval.report
            .segmentation
            .dice_overall
            .map_or("NA".into(), |d| format!("{d:.4}")),
        run.root.display()
    );
    Ok(())
}

/// Explicit `--config`, else the `config.cfg` of the run owning the
/// checkpoint, else defaults.
fn config_for_checkpoint(explicit: Option<&Path>, ckpt: &Path) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return RunConfig::read(p);
    }
    let run_cfg = ckpt
        .parent()
        .and_then(Path::parent)
        .map(|run| RunDir::new(run).config())
        .filter(|p| p.is_file());
    match run_cfg {
        Some(p) => RunConfig::read(&p),
        None => Ok(RunConfig::default()),
    }
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult {
    let ckpt_path = RunDir::resolve_checkpoint(&a.checkpoint);
    let mut cfg = config_for_checkpoint(a.config.as_deref(), &ckpt_path)?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let ckpt = if ckpt.network.config != cfg.network {
        // the checkpoint's own shape wins; the config supplies the rest
        cfg.network = ckpt.network.config;
        ckpt
    } else {
        Checkpoint::load_compatible(&ckpt_path, &cfg.network)?
    };
    apply_prior_args(&mut cfg, &a.prior)?;
    let (ds, _) = load_valid(&a.data)?;
    let splits = load_splits(&ds, &cfg)?;
    let ids = splits.get(a.split);
    let provider = provider_for(&cfg)?;
    let samples = load_samples(&ds, ids, &cfg, &provider)?;
    let eval = evaluate(&ckpt.network, &samples, &cfg.thresholds, 0)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    eval.report.write(&a.out)?;
    let ov = overlays(&ckpt.network, &samples, a.samples)?;
    render_report(&a.out, None, Some(&eval.report), &ov)?;
    let d = &eval.report.detection;
    let f = |v: Option<f64>| v.map_or("NA".into(), |x| format!("{x:.4}"));
    println!(
        "{} images ({:?}): dice {}, mAP {}, AP50 {}, precision {}, recall {} [detections from {}]",
        eval.report.images,
        a.split,
        f(eval.report.segmentation.dice_overall),
        f(d.map),
        f(d.ap50),
        f(d.precision),
        f(d.recall),
        eval.report.detection_source
    );
    let seg = &eval.report.segmentation;
    let kinds: Vec<String> = seg
        .dice_kind_order
        .iter()
        .map(|k| format!("{k} {}", f(seg.dice_by_kind.get(k).copied().flatten())))
        .collect();
    println!("dice by kind: {}", kinds.join(", "));
    Ok(())
}

fn degrade_study(a: DegradeArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::parse_onto(RunConfig::small(), &fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => RunConfig::small(),
    };
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    // the study draws its priors from the ground truth
    cfg.train.prior_source = PriorSource::Oracle;
    cfg.validate()?;
    if let Some(r) = a.drop_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("drop rate {r} outside [0, 1]")).into());
    }
    let (ds, _) = load_valid(&a.data)?;
    let splits = load_splits(&ds, &cfg)?;
    let data = ExperimentData {
        train: prepare_from_dataset(&ds, &splits.train, &cfg.preprocess)?,
        val: prepare_from_dataset(&ds, &splits.val, &cfg.preprocess)?,
        test: prepare_from_dataset(&ds, &splits.test1, &cfg.preprocess)?,
    };
    let table = compare_models(&data, &a.seeds, &cfg.network, &cfg.train, &a.drop_rates, &cfg.thresholds, |r| {
        println!(
            "{} seed {}: dice {}",
            r.label,
            r.seed,
            r.dice_overall.map_or("NA".into(), |d| format!("{d:.4}"))
        )
    })?;
    write_text(&a.out.join("comparison.csv"), &table.to_csv())?;
    write_text(&a.out.join("comparison.json"), &table.to_json()?)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let run = RunDir::new(&a.run);
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    let history = match fs::read_to_string(run.history()) {
        Ok(t) => Some(History::from_csv(&t)?),
        Err(_) => None,
    };
    let metrics_path = a.metrics.clone().unwrap_or_else(|| run.report());
    let metrics = match fs::read_to_string(&metrics_path) {
        Ok(t) => Some(crate::metrics::MetricsReport::from_json(&t)?),
        Err(_) => None,
    };
    let mut ov = Vec::new();
    if let Some(data) = &a.data {
        let cfg = config_for_checkpoint(None, &run.best_checkpoint())?;
        let ckpt = Checkpoint::load(&run.best_checkpoint())?;
        let (ds, _) = load_valid(data)?;
        let splits = load_splits(&ds, &cfg)?;
        let ids: Vec<String> = splits.get(a.split).iter().take(a.samples).cloned().collect();
        let samples = load_samples(&ds, &ids, &cfg, &provider_for(&cfg)?)?;
        ov = overlays(&ckpt.network, &samples, a.samples)?;
    }
    let rendered = render_report(&out, history.as_ref(), metrics.as_ref(), &ov)?;
    for n in &rendered.notices {
        println!("note: {n}");
    }
    println!("wrote {} files to {}", rendered.files.len(), out.display());
    Ok(())
}
