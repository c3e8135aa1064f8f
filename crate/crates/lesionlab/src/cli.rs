//! Command-line interface: dataset generation, stage training, checkpoint
//! evaluation, and curve plotting, plus one-command experiment presets that
//! bundle the ablation and comparison studies.

use crate::datakit::{
    load_dataset, save_dataset, split_dataset, ClassLabel, PhantomConfig, Profile, Sample,
    SplitSpec,
};
use crate::derive_seed;
use crate::losses;
use crate::metrics::{
    classification_report, detection_report, segmentation_report_pooled, ClassificationReport,
    DetectionReport, GtBox, ScoredBox, SegmentationReport, DET_IOU_THRESHOLD, SEG_THRESHOLD,
};
use crate::nets::{
    decode_cls, decode_recon, decode_seg, detect, encode, init_params, load_params, BackboneKind,
    BackboneSpec, ParameterStore, TaskHead,
};
use crate::trainer::{
    run_pipeline, run_stage, Stage, StageConfig, StageOutcome, StageRun, TrainingCurve,
    CURVE_HEADER, DEFAULT_LEARNING_RATE, EVAL_MAX_DETECTIONS, EVAL_SCORE_THRESHOLD,
};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Environment variable bounding how many worker threads a preset may use
/// to fan out its seeds. Unset means 1 (fully single-threaded numerics).
pub const NUM_THREADS_ENV: &str = "LESIONLAB_NUM_THREADS";

/// Errors carrying the process exit code: 2 usage or config, 3 numeric
/// abort, 4 artifact mismatch.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("{0}")]
    Artifact(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Artifact(_) => 4,
        }
    }
}

impl From<crate::trainer::TrainerError> for CliError {
    fn from(e: crate::trainer::TrainerError) -> CliError {
        use crate::nets::NetError;
        use crate::trainer::TrainerError;
        match e {
            TrainerError::Numeric(msg) => CliError::Numeric(msg),
            TrainerError::Net(NetError::Transfer(msg)) => {
                CliError::Artifact(format!("transfer failed: {msg}"))
            }
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn artifact(e: impl std::fmt::Display) -> CliError {
    CliError::Artifact(e.to_string())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| usage(format!("creating {}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| usage(format!("writing {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))
}

#[derive(Parser)]
#[command(name = "lesionlab", version, about = "Multi-task lesion learning lab on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Generate(GenerateArgs),
    /// Train one stage from a config file, or run an experiment preset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset split and emit metric tables.
    Evaluate(EvaluateArgs),
    /// Render training-curve CSVs as SVG charts plus a merged CSV.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Annotation profile: cr, sr, or dr.
    #[arg(long)]
    profile: Profile,
    /// Number of samples.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Instances per dr image as an inclusive LO:HI range.
    #[arg(long)]
    instances: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Stage config JSON (requires --data).
    #[arg(long, conflicts_with = "preset", requires = "data")]
    config: Option<PathBuf>,
    /// Dataset directory to split and train on.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Experiment preset: table2_ablation, table3_preload_ablation,
    /// fig4_backbone_compare, or fig3_detection_overfit.
    #[arg(long, conflicts_with = "data")]
    preset: Option<PresetName>,
    /// Preset size: ci, desk, or full.
    #[arg(long, default_value = "desk")]
    scale: Scale,
    /// Comma-separated preset seeds, e.g. 1,2,3.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory for checkpoints, curves, and reports.
    #[arg(long)]
    out: PathBuf,
    /// Backbone for --config runs: vgg13_style or resnet50_style.
    #[arg(long, default_value = "vgg13_style")]
    backbone: BackboneKind,
    /// Channel width multiplier for --config runs.
    #[arg(long, default_value_t = 1.0)]
    width_mult: f64,
    /// Parameter init seed for --config runs.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    /// Dataset split shuffle seed.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory (holds manifest.json and weights.bin).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for evaluation.json and tables.txt.
    #[arg(long)]
    out: PathBuf,
    /// Which split to evaluate: train, valid, or test.
    #[arg(long, default_value = "test")]
    split: SplitName,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    /// Training-curve CSV files.
    #[arg(required = true)]
    curves: Vec<PathBuf>,
    /// Output directory for charts and the merged CSV.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated series labels, one per curve file (default: stems).
    #[arg(long)]
    labels: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = CliError;
    fn from_str(s: &str) -> Result<SplitName, CliError> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            other => Err(usage(format!("unknown split {other:?}, expected train, valid, or test"))),
        }
    }
}

/// Entry point used by the binary: parses argv and returns the exit code.
pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args.iter().map(|s| s.as_str())) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Plot(args) => cmd_plot(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn parse_instance_range(s: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 {
        return Err(usage(format!("--instances expects LO:HI, got {s:?}")));
    }
    let lo = parts[0].parse().map_err(|_| usage(format!("bad instance bound {:?}", parts[0])))?;
    let hi = parts[1].parse().map_err(|_| usage(format!("bad instance bound {:?}", parts[1])))?;
    Ok((lo, hi))
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let mut config = PhantomConfig::new(args.profile).with_size(args.size);
    if let Some(range) = &args.instances {
        let (lo, hi) = parse_instance_range(range)?;
        config = config.with_instances_per_image(lo, hi);
    }
    let samples = config.generate(args.count, args.seed).map_err(usage)?;
    save_dataset(&samples, &args.out).map_err(usage)?;
    println!(
        "wrote {} {} samples (size {}, seed {}) to {}",
        samples.len(),
        args.profile.name(),
        args.size,
        args.seed,
        args.out.display()
    );
    if samples.iter().any(|s| s.class_label.is_some()) {
        let mut counts = [0usize; 3];
        for sample in &samples {
            if let Some(label) = sample.class_label {
                counts[label.index()] += 1;
            }
        }
        let parts: Vec<String> = ClassLabel::ALL
            .iter()
            .zip(counts)
            .map(|(label, n)| format!("{} {n}", label.name()))
            .collect();
        println!("class counts: {}", parts.join(", "));
    }
    let boxes: usize = samples.iter().filter_map(|s| s.instances.as_ref().map(Vec::len)).sum();
    if boxes > 0 {
        println!("instances: {boxes} boxes over {} images", samples.len());
    }
    Ok(())
}

/// Profile implied by a sample's annotations, used to pick split fractions.
fn infer_profile(samples: &[Sample]) -> Profile {
    let first = &samples[0];
    if first.instances.is_some() {
        Profile::Dr
    } else if first.seg_mask.is_some() {
        Profile::Sr
    } else {
        Profile::Cr
    }
}

/// Reference train/valid/test fractions per profile, as exact ratios so the
/// reference dataset sizes reproduce their published splits.
fn profile_fractions(profile: Profile) -> (f64, f64, f64) {
    match profile {
        Profile::Cr => (1331.0 / 1816.0, 244.0 / 1816.0, 241.0 / 1816.0),
        Profile::Sr => (377.0 / 472.0, 48.0 / 472.0, 47.0 / 472.0),
        Profile::Dr => (79.0 / 99.0, 10.0 / 99.0, 10.0 / 99.0),
    }
}

type SplitSamples = (Vec<Sample>, Vec<Sample>, Vec<Sample>);

fn split_profile(samples: &[Sample], profile: Profile, seed: u64) -> Result<SplitSamples, CliError> {
    let (tr, va, te) = profile_fractions(profile);
    let spec = SplitSpec::new(tr, va, te, seed).map_err(usage)?;
    let splits = split_dataset(samples.len(), &spec).map_err(usage)?;
    let take = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<Sample>>();
    Ok((take(&splits.train), take(&splits.valid), take(&splits.test)))
}

fn backbone_spec(kind: BackboneKind, input_size: usize, width_mult: f64) -> Result<BackboneSpec, CliError> {
    if !width_mult.is_finite() || width_mult <= 0.0 {
        return Err(usage(format!("width multiplier must be positive and finite, got {width_mult}")));
    }
    let base = match kind {
        BackboneKind::Vgg13Style => BackboneSpec::vgg13(),
        BackboneKind::ResNet50Style => BackboneSpec::resnet50(),
    };
    Ok(base.with_width_mult(width_mult).with_input_size(input_size))
}

/// Writes a finished stage the way the pipeline does: final and best
/// checkpoints plus the curve CSV.
fn save_stage(outcome: &StageOutcome, dir: &Path) -> Result<(), CliError> {
    crate::trainer::save_checkpoint(&outcome.params, &outcome.curve, &dir.join("final"))?;
    crate::trainer::save_checkpoint(&outcome.best_params, &outcome.curve, &dir.join("best"))?;
    write_text(&dir.join("curve.csv"), &outcome.curve.to_csv())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    match (&args.config, &args.preset) {
        (Some(config_path), None) => {
            let data = args
                .data
                .as_ref()
                .ok_or_else(|| usage("--config requires --data"))?;
            let config = StageConfig::from_json(&read_text(config_path)?)?;
            let samples = load_dataset(data).map_err(artifact)?;
            if samples.is_empty() {
                return Err(artifact(format!("dataset {} is empty", data.display())));
            }
            let profile = infer_profile(&samples);
            let (train, valid, _test) = split_profile(&samples, profile, args.split_seed)?;
            let spec = backbone_spec(args.backbone, samples[0].size(), args.width_mult)?;
            let init = init_params(&spec, &config.stage.required_heads(), args.init_seed).map_err(usage)?;
            let outcome = run_stage(&config, &train, &valid, &init)?;
            save_stage(&outcome, &args.out)?;
            write_text(&args.out.join("config.json"), &config.to_json())?;
            let last = outcome.curve.epochs.last();
            println!(
                "stage {}: {} epochs on {} train / {} valid samples",
                config.stage.name(),
                config.epochs,
                train.len(),
                valid.len()
            );
            if let Some(rec) = last {
                println!(
                    "final valid l_total {} | {} {}",
                    rec.valid.losses.l_total,
                    outcome.curve.metric_name,
                    rec.valid.metric_value
                );
            }
            println!("best epoch {} -> {}", outcome.best_epoch, args.out.join("best").display());
            Ok(())
        }
        (None, Some(name)) => {
            let seeds = match &args.seeds {
                Some(raw) => parse_seeds(raw)?,
                None => vec![1],
            };
            let preset = ExperimentPreset { name: *name, seeds, scale: args.scale };
            run_preset(&preset, &args.out)
        }
        (Some(_), Some(_)) => Err(usage("pass either --config or --preset, not both")),
        (None, None) => Err(usage("pass --config FILE or --preset NAME")),
    }
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>, CliError> {
    let seeds: Result<Vec<u64>, CliError> = raw
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<u64>()
                .map_err(|_| usage(format!("bad seed {:?} in --seeds", part.trim())))
        })
        .collect();
    let seeds = seeds?;
    if seeds.is_empty() {
        return Err(usage("--seeds must name at least one seed"));
    }
    Ok(seeds)
}

/// Full evaluation of one parameter store on one sample set. A task is
/// reported when its head exists and every sample carries its annotation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: String,
    pub samples: usize,
    pub classification: Option<ClassificationReport>,
    pub segmentation: Option<SegmentationReport>,
    pub detection: Option<DetectionReport>,
    pub recon_mse: Option<f64>,
}

impl EvaluationReport {
    /// Plain-text tables in the reference column order.
    pub fn to_tables(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "split {} ({} samples)", self.split, self.samples);
        if let Some(c) = &self.classification {
            let _ = writeln!(out, "\nclassification\n{}", c.to_table());
        }
        if let Some(s) = &self.segmentation {
            let _ = writeln!(out, "\nsegmentation\n{}", s.to_table());
        }
        if let Some(d) = &self.detection {
            let _ = writeln!(out, "\ndetection\n{}", d.to_table());
        }
        if let Some(m) = self.recon_mse {
            let _ = writeln!(out, "\nreconstruction_mse {m}");
        }
        out
    }
}

/// Evaluates every task the checkpoint and annotations jointly support.
pub fn evaluate_store(
    store: &ParameterStore,
    samples: &[Sample],
    split_name: &str,
) -> Result<EvaluationReport, CliError> {
    if samples.is_empty() {
        return Err(artifact(format!("empty {split_name} split, nothing to evaluate")));
    }
    let size = store.spec.input_size;
    for sample in samples {
        if sample.size() != size {
            return Err(artifact(format!(
                "checkpoint/backbone mismatch: sample '{}' is {}x{} but the checkpoint expects {size}x{size}",
                sample.sample_id,
                sample.size(),
                sample.size()
            )));
        }
    }
    let use_cls = store.has_prefix("cls.") && samples.iter().all(|s| s.class_label.is_some());
    let use_seg = store.has_prefix("seg.") && samples.iter().all(|s| s.seg_mask.is_some());
    let use_det = store.has_prefix("det.") && samples.iter().all(|s| s.instances.is_some());
    let use_recon = store.has_prefix("recon.");
    if !(use_cls || use_seg || use_det || use_recon) {
        return Err(artifact(
            "checkpoint heads match none of the dataset annotations; nothing to evaluate",
        ));
    }

    let mut cls_preds: Vec<[f64; 3]> = Vec::new();
    let mut cls_targets: Vec<usize> = Vec::new();
    let mut seg_preds: Vec<Array2<f64>> = Vec::new();
    let mut det_boxes: Vec<ScoredBox> = Vec::new();
    let mut gt_boxes: Vec<GtBox> = Vec::new();
    let mut recon_sum = 0.0;
    for (i, sample) in samples.iter().enumerate() {
        let pyramid = encode(store, &sample.image).map_err(artifact)?;
        if use_cls {
            cls_preds.push(decode_cls(store, &pyramid).map_err(artifact)?);
            cls_targets.push(sample.class_label.expect("checked").index());
        }
        if use_seg {
            seg_preds.push(decode_seg(store, &pyramid).map_err(artifact)?);
        }
        if use_det {
            let found = detect(store, &pyramid, EVAL_SCORE_THRESHOLD, EVAL_MAX_DETECTIONS)
                .map_err(artifact)?;
            for d in found {
                det_boxes.push(ScoredBox { image: i, det_class: d.det_class, score: d.score, bbox: d.bbox });
            }
            for inst in sample.instances.as_ref().expect("checked") {
                gt_boxes.push(GtBox {
                    image: i,
                    det_class: inst.det_class,
                    bbox: [
                        f64::from(inst.bbox.x0),
                        f64::from(inst.bbox.y0),
                        f64::from(inst.bbox.x1),
                        f64::from(inst.bbox.y1),
                    ],
                });
            }
        }
        if use_recon {
            let recon = decode_recon(store, &pyramid).map_err(artifact)?;
            recon_sum += losses::mse(&recon, &sample.image).map_err(usage)?;
        }
    }

    let classification = if use_cls {
        Some(classification_report(&cls_preds, &cls_targets).map_err(usage)?)
    } else {
        None
    };
    let segmentation = if use_seg {
        let pairs = seg_preds
            .iter()
            .zip(samples)
            .map(|(pred, sample)| (pred, sample.seg_mask.as_ref().expect("checked")));
        Some(segmentation_report_pooled(pairs, SEG_THRESHOLD).map_err(usage)?)
    } else {
        None
    };
    let detection = if use_det {
        Some(detection_report(&det_boxes, &gt_boxes, DET_IOU_THRESHOLD).map_err(usage)?)
    } else {
        None
    };
    Ok(EvaluationReport {
        split: split_name.to_string(),
        samples: samples.len(),
        classification,
        segmentation,
        detection,
        recon_mse: use_recon.then(|| recon_sum / samples.len() as f64),
    })
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let store = load_params(&args.checkpoint).map_err(artifact)?;
    let samples = load_dataset(&args.data).map_err(artifact)?;
    if samples.is_empty() {
        return Err(artifact(format!("dataset {} is empty", args.data.display())));
    }
    let profile = infer_profile(&samples);
    let (train, valid, test) = split_profile(&samples, profile, args.split_seed)?;
    let chosen = match args.split {
        SplitName::Train => &train,
        SplitName::Valid => &valid,
        SplitName::Test => &test,
    };
    let report = evaluate_store(&store, chosen, args.split.name())?;
    let json = serde_json::to_string_pretty(&report).map_err(usage)?;
    write_text(&args.out.join("evaluation.json"), &(json + "\n"))?;
    let tables = report.to_tables();
    write_text(&args.out.join("tables.txt"), &tables)?;
    print!("{tables}");
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> Result<(), CliError> {
    let labels: Vec<String> = match &args.labels {
        Some(raw) => raw.split(',').map(|s| s.trim().to_string()).collect(),
        None => args
            .curves
            .iter()
            .map(|p| p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()))
            .collect(),
    };
    if labels.len() != args.curves.len() {
        return Err(usage(format!(
            "--labels names {} series but {} curve files were given",
            labels.len(),
            args.curves.len()
        )));
    }
    for (i, a) in labels.iter().enumerate() {
        if labels[..i].contains(a) {
            return Err(usage(format!("duplicate curve label {a:?}, disambiguate with --labels")));
        }
    }
    let mut runs: Vec<(String, TrainingCurve)> = Vec::with_capacity(args.curves.len());
    for (path, label) in args.curves.iter().zip(labels) {
        let curve = TrainingCurve::from_csv(&read_text(path)?)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        curve.validate().map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if curve.epochs.is_empty() {
            return Err(usage(format!("{} contains no epochs", path.display())));
        }
        runs.push((label, curve));
    }

    let loss = curve_series(&runs, |r, split| Some(split_losses(r, split).l_total));
    let metric_name = runs
        .iter()
        .map(|(_, c)| c.metric_name.as_str())
        .find(|n| !n.is_empty())
        .unwrap_or("metric")
        .to_string();
    let metric = curve_series(&runs, |r, split| {
        Some(match split {
            SplitName::Train => r.train.metric_value,
            _ => r.valid.metric_value,
        })
    });
    write_text(
        &args.out.join("loss_vs_epoch.svg"),
        &line_chart_svg("total loss", "epoch", "loss", &loss),
    )?;
    write_text(
        &args.out.join("metric_vs_epoch.svg"),
        &line_chart_svg(&metric_name, "epoch", &metric_name, &metric),
    )?;

    let mut merged = String::from("run,");
    merged.push_str(CURVE_HEADER);
    merged.push('\n');
    for (label, curve) in &runs {
        for line in curve.to_csv().lines().skip(1) {
            merged.push_str(label);
            merged.push(',');
            merged.push_str(line);
            merged.push('\n');
        }
    }
    write_text(&args.out.join("merged.csv"), &merged)?;
    println!(
        "wrote loss_vs_epoch.svg, metric_vs_epoch.svg, merged.csv ({} runs) to {}",
        runs.len(),
        args.out.display()
    );
    Ok(())
}

fn split_losses(rec: &crate::trainer::EpochRecord, split: SplitName) -> crate::losses::LossBundle {
    match split {
        SplitName::Train => rec.train.losses,
        _ => rec.valid.losses,
    }
}

/// Train and valid series per run for one per-epoch quantity; epochs where
/// the accessor yields no finite value are skipped.
fn curve_series(
    runs: &[(String, TrainingCurve)],
    accessor: impl Fn(&crate::trainer::EpochRecord, SplitName) -> Option<f64>,
) -> Vec<Series> {
    let mut out = Vec::new();
    for (label, curve) in runs {
        for (split, dashed) in [(SplitName::Train, false), (SplitName::Valid, true)] {
            let points: Vec<(f64, f64)> = curve
                .epochs
                .iter()
                .filter_map(|rec| {
                    accessor(rec, split)
                        .filter(|v| v.is_finite())
                        .map(|v| (rec.epoch as f64, v))
                })
                .collect();
            if !points.is_empty() {
                out.push(Series { label: format!("{label} {}", split.name()), points, dashed });
            }
        }
    }
    out
}

/// One polyline on a chart.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Renders series as a self-contained SVG line chart. Output depends only on
/// the inputs, so reruns are byte-identical.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (840.0, 520.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 36.0, 46.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">"
    );
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        w / 2.0,
        esc(title)
    );

    let finite: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if finite.is_empty() {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">no data</text>",
            w / 2.0,
            h / 2.0
        );
        svg.push_str("</svg>\n");
        return svg;
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.05).max(y1.abs().max(y0.abs()).max(1.0) * 1e-3);
    y0 -= pad;
    y1 += pad;
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| mt + (1.0 - (y - y0) / (y1 - y0)) * ph;

    for i in 0..=5 {
        let fx = x0 + (x1 - x0) * f64::from(i) / 5.0;
        let fy = y0 + (y1 - y0) * f64::from(i) / 5.0;
        let (gx, gy) = (px(fx), py(fy));
        let _ = writeln!(
            svg,
            "<line x1=\"{gx:.2}\" y1=\"{mt}\" x2=\"{gx:.2}\" y2=\"{:.2}\" stroke=\"#dddddd\"/>",
            mt + ph
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{ml}\" y1=\"{gy:.2}\" x2=\"{:.2}\" y2=\"{gy:.2}\" stroke=\"#dddddd\"/>",
            ml + pw
        );
        let _ = writeln!(
            svg,
            "<text x=\"{gx:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\">{}</text>",
            mt + ph + 16.0,
            fmt_tick(fx)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{}</text>",
            ml - 6.0,
            gy + 4.0,
            fmt_tick(fy)
        );
    }
    let _ = writeln!(
        svg,
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#333333\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
        ml + pw / 2.0,
        h - 8.0,
        esc(x_label)
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{}</text>",
        mt + ph / 2.0,
        mt + ph / 2.0,
        esc(y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let mut pts = String::new();
        for &(x, y) in &s.points {
            let _ = write!(pts, "{:.2},{:.2} ", px(x), py(y));
        }
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"{dash} points=\"{}\"/>",
            pts.trim_end()
        );
        let ly = mt + 16.0 + 16.0 * i as f64;
        let lx = ml + pw - 170.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{lx}\" y1=\"{:.2}\" x2=\"{}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"1.6\"{dash}/>",
            ly - 4.0,
            lx + 22.0,
            ly - 4.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{ly:.2}\" font-size=\"11\">{}</text>",
            lx + 28.0,
            esc(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// The four bundled experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresetName {
    Table2Ablation,
    Table3PreloadAblation,
    Fig4BackboneCompare,
    Fig3DetectionOverfit,
}

impl PresetName {
    pub const ALL: [PresetName; 4] = [
        PresetName::Table2Ablation,
        PresetName::Table3PreloadAblation,
        PresetName::Fig4BackboneCompare,
        PresetName::Fig3DetectionOverfit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PresetName::Table2Ablation => "table2_ablation",
            PresetName::Table3PreloadAblation => "table3_preload_ablation",
            PresetName::Fig4BackboneCompare => "fig4_backbone_compare",
            PresetName::Fig3DetectionOverfit => "fig3_detection_overfit",
        }
    }
}

impl std::str::FromStr for PresetName {
    type Err = CliError;
    fn from_str(s: &str) -> Result<PresetName, CliError> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = PresetName::ALL.iter().map(|p| p.name()).collect();
                usage(format!("unknown preset {s:?}, expected one of {}", names.join(", ")))
            })
    }
}

/// Preset size: ci targets seconds, desk minutes, full runs the complete
/// protocol at native resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Ci,
    Desk,
    Full,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Ci => "ci",
            Scale::Desk => "desk",
            Scale::Full => "full",
        }
    }

    pub fn params(self) -> ScaleParams {
        match self {
            Scale::Ci => ScaleParams {
                input_size: 16,
                width_mult: 0.0625,
                cr_count: 12,
                sr_count: 9,
                dr_count: 6,
                cr_epochs: 2,
                sr_epochs: 2,
                dr_epochs: 1,
                pretrain_cr_epochs: 1,
                pretrain_sr_epochs: 1,
                ablation_sr_epochs: 2,
                learning_rate: 1e-3,
                dice_threshold: 0.3,
            },
            // Small nets need a hotter optimizer than the full protocol:
            // at this width 1e-4 moves too slowly to show any of the
            // studied effects inside the desk epoch budgets.
            Scale::Desk => ScaleParams {
                input_size: 16,
                width_mult: 0.25,
                cr_count: 120,
                sr_count: 60,
                dr_count: 99,
                cr_epochs: 20,
                sr_epochs: 20,
                dr_epochs: 120,
                pretrain_cr_epochs: 8,
                pretrain_sr_epochs: 5,
                ablation_sr_epochs: 60,
                learning_rate: 1e-3,
                dice_threshold: 0.3,
            },
            Scale::Full => ScaleParams {
                input_size: 256,
                width_mult: 1.0,
                cr_count: 1816,
                sr_count: 472,
                dr_count: 99,
                cr_epochs: 100,
                sr_epochs: 700,
                dr_epochs: 100,
                pretrain_cr_epochs: 100,
                pretrain_sr_epochs: 700,
                ablation_sr_epochs: 700,
                learning_rate: DEFAULT_LEARNING_RATE,
                dice_threshold: 0.3,
            },
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Scale, CliError> {
        match s {
            "ci" => Ok(Scale::Ci),
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(usage(format!("unknown scale {other:?}, expected ci, desk, or full"))),
        }
    }
}

/// Knobs a scale fixes: net geometry, dataset sizes, and epoch budgets.
#[derive(Clone, Debug, Serialize)]
pub struct ScaleParams {
    pub input_size: usize,
    pub width_mult: f64,
    pub cr_count: usize,
    pub sr_count: usize,
    pub dr_count: usize,
    pub cr_epochs: usize,
    pub sr_epochs: usize,
    pub dr_epochs: usize,
    /// CR epochs when CR only feeds a later stage's preload.
    pub pretrain_cr_epochs: usize,
    /// SR epochs when SR only feeds the detection stage's preload.
    pub pretrain_sr_epochs: usize,
    /// SR epochs in the preload ablation, long enough for the Dice
    /// threshold crossing to be observable in both variants.
    pub ablation_sr_epochs: usize,
    pub learning_rate: f64,
    /// Training Dice-loss level whose first crossing epoch the preload
    /// ablation records.
    pub dice_threshold: f64,
}

/// One bundled experiment: which study, which seeds, how big.
#[derive(Clone, Debug)]
pub struct ExperimentPreset {
    pub name: PresetName,
    pub seeds: Vec<u64>,
    pub scale: Scale,
}

impl ExperimentPreset {
    pub fn new(name: PresetName, scale: Scale) -> ExperimentPreset {
        ExperimentPreset { name, seeds: vec![1], scale }
    }

    pub fn with_seeds(mut self, seeds: &[u64]) -> ExperimentPreset {
        self.seeds = seeds.to_vec();
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(usage("preset needs at least one seed"));
        }
        Ok(())
    }
}

fn numeric_threads_value(raw: Option<&str>) -> Result<usize, CliError> {
    match raw {
        None => Ok(1),
        Some(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| usage(format!("{NUM_THREADS_ENV} must be a positive integer, got {s:?}"))),
    }
}

fn numeric_threads() -> Result<usize, CliError> {
    numeric_threads_value(std::env::var(NUM_THREADS_ENV).ok().as_deref())
}

/// Runs a preset with its scale's parameters, fanning seeds across up to
/// `LESIONLAB_NUM_THREADS` workers. Outputs are identical for any thread
/// count: each seed writes only under its own directory.
pub fn run_preset(preset: &ExperimentPreset, out: &Path) -> Result<(), CliError> {
    run_preset_with(preset, out, &preset.scale.params())
}

/// Like `run_preset` but with explicit parameters, for custom budgets.
pub fn run_preset_with(preset: &ExperimentPreset, out: &Path, params: &ScaleParams) -> Result<(), CliError> {
    run_preset_inner(preset, out, params, numeric_threads()?)
}

fn run_preset_inner(
    preset: &ExperimentPreset,
    out: &Path,
    params: &ScaleParams,
    threads: usize,
) -> Result<(), CliError> {
    preset.validate()?;
    fs::create_dir_all(out).map_err(|e| usage(format!("creating {}: {e}", out.display())))?;
    #[derive(Serialize)]
    struct PresetManifest<'a> {
        name: &'a str,
        scale: &'a str,
        seeds: &'a [u64],
        params: &'a ScaleParams,
    }
    let manifest = PresetManifest {
        name: preset.name.name(),
        scale: preset.scale.name(),
        seeds: &preset.seeds,
        params,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(usage)?;
    write_text(&out.join("preset.json"), &(text + "\n"))?;
    match preset.name {
        PresetName::Table2Ablation => preset_table2(preset, out, params, threads),
        PresetName::Table3PreloadAblation => preset_table3(preset, out, params, threads),
        PresetName::Fig4BackboneCompare => preset_fig4(preset, out, params, threads),
        PresetName::Fig3DetectionOverfit => preset_fig3(preset, out, params, threads),
    }
}

fn for_each_seed<T: Send>(
    seeds: &[u64],
    threads: usize,
    f: impl Fn(u64) -> Result<T, CliError> + Sync,
) -> Result<Vec<T>, CliError> {
    let mut out = Vec::with_capacity(seeds.len());
    let f = &f;
    for wave in seeds.chunks(threads.max(1)) {
        let wave_results: Vec<Result<T, CliError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave.iter().map(|&seed| scope.spawn(move || f(seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed worker panicked"))
                .collect()
        });
        for result in wave_results {
            out.push(result?);
        }
    }
    Ok(out)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn opt_count_cell(v: Option<usize>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Aligned plain-text table: one header line, one line per row.
fn render_rows(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<String>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(headers.iter().map(|h| h.to_string()).collect());
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.clone()));
        out.push('\n');
    }
    out
}

/// Classification accuracy table rows for the CR-versus-C-only ablation.
#[derive(Clone, Debug, Serialize)]
struct Table2Row {
    task: String,
    seed: u64,
    accuracy: f64,
    macro_f1: f64,
    f1_per_class: [f64; 3],
}

fn classification_eval(store: &ParameterStore, samples: &[Sample]) -> Result<ClassificationReport, CliError> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for sample in samples {
        let pyramid = encode(store, &sample.image).map_err(artifact)?;
        preds.push(decode_cls(store, &pyramid).map_err(artifact)?);
        targets.push(
            sample
                .class_label
                .ok_or_else(|| artifact(format!("sample '{}' has no class label", sample.sample_id)))?
                .index(),
        );
    }
    classification_report(&preds, &targets).map_err(usage)
}

fn segmentation_eval(store: &ParameterStore, samples: &[Sample]) -> Result<SegmentationReport, CliError> {
    let mut preds = Vec::with_capacity(samples.len());
    for sample in samples {
        let pyramid = encode(store, &sample.image).map_err(artifact)?;
        preds.push(decode_seg(store, &pyramid).map_err(artifact)?);
    }
    let pairs = preds.iter().zip(samples).map(|(pred, sample)| {
        (pred, sample.seg_mask.as_ref().expect("segmentation samples carry masks"))
    });
    segmentation_report_pooled(pairs, SEG_THRESHOLD).map_err(usage)
}

fn preset_table2(
    preset: &ExperimentPreset,
    out: &Path,
    p: &ScaleParams,
    threads: usize,
) -> Result<(), CliError> {
    let per_seed = for_each_seed(&preset.seeds, threads, |seed| {
        let dir = out.join(format!("seed_{seed}"));
        let spec = backbone_spec(BackboneKind::Vgg13Style, p.input_size, p.width_mult)?;
        let data = PhantomConfig::new(Profile::Cr)
            .with_size(p.input_size)
            .generate(p.cr_count, derive_seed(seed, "data", 0))
            .map_err(usage)?;
        let (train, valid, test) = split_profile(&data, Profile::Cr, derive_seed(seed, "split", 0))?;
        let mut rows = Vec::with_capacity(2);
        for (i, stage) in [Stage::Cr, Stage::COnly].into_iter().enumerate() {
            let init = init_params(&spec, &stage.required_heads(), derive_seed(seed, "init", 0))
                .map_err(usage)?;
            let config = StageConfig::new(stage, p.cr_epochs)
                .with_learning_rate(p.learning_rate)
                .with_seed(derive_seed(seed, "train", i as u64));
            let outcome = run_stage(&config, &train, &valid, &init)?;
            save_stage(&outcome, &dir.join(stage.name()))?;
            let report = classification_eval(&outcome.best_params, &test)?;
            rows.push(Table2Row {
                task: stage.name().to_string(),
                seed,
                accuracy: report.accuracy,
                macro_f1: report.macro_f1,
                f1_per_class: report.f1_per_class,
            });
        }
        Ok(rows)
    })?;
    let rows: Vec<Table2Row> = per_seed.into_iter().flatten().collect();

    let class_cols: Vec<String> = ClassLabel::ALL.iter().map(|c| format!("f1_{}", c.name())).collect();
    let mut csv = format!("task,seed,accuracy,macro_f1,{}\n", class_cols.join(","));
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.task, r.seed, r.accuracy, r.macro_f1, r.f1_per_class[0], r.f1_per_class[1], r.f1_per_class[2]
        );
    }
    write_text(&out.join("table2.csv"), &csv)?;

    let mut headers = vec!["task", "seed", "accuracy", "macro_f1"];
    headers.extend(class_cols.iter().map(String::as_str));
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.task.clone(),
                r.seed.to_string(),
                format!("{:.4}", r.accuracy),
                format!("{:.4}", r.macro_f1),
                format!("{:.4}", r.f1_per_class[0]),
                format!("{:.4}", r.f1_per_class[1]),
                format!("{:.4}", r.f1_per_class[2]),
            ]
        })
        .collect();
    let table = render_rows(&headers, &cells);
    write_text(&out.join("table2.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Segmentation metric rows for the preload-versus-scratch ablation.
#[derive(Clone, Debug, Serialize)]
struct Table3Row {
    task: String,
    seed: u64,
    accuracy: f64,
    f1: f64,
    sensitivity: f64,
    specificity: f64,
    precision: f64,
    roc_auc: Option<f64>,
    iou: f64,
    /// First epoch whose training Dice loss reached the threshold.
    epochs_to_dice: Option<usize>,
}

fn epochs_to_threshold(curve: &TrainingCurve, threshold: f64) -> Option<usize> {
    curve
        .epochs
        .iter()
        .find(|rec| rec.train.metric_value <= threshold)
        .map(|rec| rec.epoch)
}

fn preset_table3(
    preset: &ExperimentPreset,
    out: &Path,
    p: &ScaleParams,
    threads: usize,
) -> Result<(), CliError> {
    let per_seed = for_each_seed(&preset.seeds, threads, |seed| {
        let dir = out.join(format!("seed_{seed}"));
        let spec = backbone_spec(BackboneKind::Vgg13Style, p.input_size, p.width_mult)?;
        let cr_data = PhantomConfig::new(Profile::Cr)
            .with_size(p.input_size)
            .generate(p.cr_count, derive_seed(seed, "data", 0))
            .map_err(usage)?;
        let sr_data = PhantomConfig::new(Profile::Sr)
            .with_size(p.input_size)
            .generate(p.sr_count, derive_seed(seed, "data", 1))
            .map_err(usage)?;
        let (cr_train, cr_valid, _) = split_profile(&cr_data, Profile::Cr, derive_seed(seed, "split", 0))?;
        let (sr_train, sr_valid, sr_test) = split_profile(&sr_data, Profile::Sr, derive_seed(seed, "split", 1))?;

        let cr_init = init_params(&spec, &Stage::Cr.required_heads(), derive_seed(seed, "init", 0))
            .map_err(usage)?;
        let cr_config = StageConfig::new(Stage::Cr, p.pretrain_cr_epochs)
            .with_learning_rate(p.learning_rate)
            .with_seed(derive_seed(seed, "train", 0));
        let cr_outcome = run_stage(&cr_config, &cr_train, &cr_valid, &cr_init)?;
        save_stage(&cr_outcome, &dir.join("cr"))?;

        // Both SR variants start from the same init; preload is the only
        // difference.
        let sr_init = init_params(&spec, &Stage::Sr.required_heads(), derive_seed(seed, "init", 1))
            .map_err(usage)?;
        let base = StageConfig::new(Stage::Sr, p.ablation_sr_epochs)
            .with_learning_rate(p.learning_rate)
            .with_seed(derive_seed(seed, "train", 1));
        let preloaded_config = base
            .clone()
            .with_preload(dir.join("cr").join("best"), &["encoder.", "recon."]);
        let preloaded = run_stage(&preloaded_config, &sr_train, &sr_valid, &sr_init)?;
        save_stage(&preloaded, &dir.join("sr_preloaded"))?;
        let scratch = run_stage(&base, &sr_train, &sr_valid, &sr_init)?;
        save_stage(&scratch, &dir.join("sr_scratch"))?;

        let mut rows = Vec::with_capacity(2);
        for (task, outcome) in [("sr_preloaded", &preloaded), ("sr_scratch", &scratch)] {
            let report = segmentation_eval(&outcome.best_params, &sr_test)?;
            rows.push(Table3Row {
                task: task.to_string(),
                seed,
                accuracy: report.pixel_accuracy,
                f1: report.f1,
                sensitivity: report.sensitivity,
                specificity: report.specificity,
                precision: report.precision,
                roc_auc: report.roc_auc,
                iou: report.iou,
                epochs_to_dice: epochs_to_threshold(&outcome.curve, p.dice_threshold),
            });
        }
        Ok(rows)
    })?;
    let rows: Vec<Table3Row> = per_seed.into_iter().flatten().collect();

    let mut csv = String::from(
        "task,seed,accuracy,f1,sensitivity,specificity,precision,roc_auc,iou,epochs_to_dice\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            r.task,
            r.seed,
            r.accuracy,
            r.f1,
            r.sensitivity,
            r.specificity,
            r.precision,
            opt_cell(r.roc_auc),
            r.iou,
            opt_count_cell(r.epochs_to_dice)
        );
    }
    write_text(&out.join("table3.csv"), &csv)?;

    let headers = [
        "task", "seed", "accuracy", "f1", "sensitivity", "specificity", "precision", "roc_auc",
        "iou", "epochs_to_dice",
    ];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.task.clone(),
                r.seed.to_string(),
                format!("{:.4}", r.accuracy),
                format!("{:.4}", r.f1),
                format!("{:.4}", r.sensitivity),
                format!("{:.4}", r.specificity),
                format!("{:.4}", r.precision),
                r.roc_auc.map_or_else(|| "absent".into(), |v| format!("{v:.4}")),
                format!("{:.4}", r.iou),
                opt_count_cell(r.epochs_to_dice),
            ]
        })
        .collect();
    let table = render_rows(&headers, &cells);
    write_text(&out.join("table3.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Loss summary rows for the detection overfit study. The detect columns
/// track the component the overfit diagnosis is about.
#[derive(Clone, Debug, Serialize)]
struct Fig3Row {
    seed: u64,
    min_valid_total: f64,
    min_valid_epoch: usize,
    final_valid_total: f64,
    final_over_min: f64,
    min_valid_detect: f64,
    min_detect_epoch: usize,
    final_valid_detect: f64,
    detect_final_over_min: f64,
}

/// Epoch of the smallest value and that value, over one valid-loss series.
fn series_min(series: impl Iterator<Item = (usize, f64)>) -> (usize, f64) {
    series.fold((0usize, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn load_curve(path: &Path) -> Result<TrainingCurve, CliError> {
    let curve = TrainingCurve::from_csv(&read_text(path)?)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    curve.validate().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(curve)
}

fn preset_fig3(
    preset: &ExperimentPreset,
    out: &Path,
    p: &ScaleParams,
    threads: usize,
) -> Result<(), CliError> {
    let rows = for_each_seed(&preset.seeds, threads, |seed| {
        let dir = out.join(format!("seed_{seed}"));
        let spec = backbone_spec(BackboneKind::Vgg13Style, p.input_size, p.width_mult)?;
        let sr_data = PhantomConfig::new(Profile::Sr)
            .with_size(p.input_size)
            .generate(p.sr_count, derive_seed(seed, "data", 0))
            .map_err(usage)?;
        let dr_data = PhantomConfig::new(Profile::Dr)
            .with_size(p.input_size)
            .generate(p.dr_count, derive_seed(seed, "data", 1))
            .map_err(usage)?;
        let (sr_train, sr_valid, _) = split_profile(&sr_data, Profile::Sr, derive_seed(seed, "split", 0))?;
        let (dr_train, dr_valid, _) = split_profile(&dr_data, Profile::Dr, derive_seed(seed, "split", 1))?;
        let heads = [TaskHead::Segmentation, TaskHead::Reconstruction, TaskHead::Detection];
        let init = init_params(&spec, &heads, derive_seed(seed, "init", 0)).map_err(usage)?;
        let stages = [
            StageRun {
                config: StageConfig::new(Stage::Sr, p.pretrain_sr_epochs)
                    .with_learning_rate(p.learning_rate)
                    .with_seed(derive_seed(seed, "train", 0)),
                train: &sr_train,
                valid: &sr_valid,
            },
            // Augmentation off: this preset reproduces the overfitting
            // regime, which the regularizers exist to mask.
            StageRun {
                config: StageConfig::new(Stage::Dr, p.dr_epochs)
                    .with_learning_rate(p.learning_rate)
                    .with_augmentations(vec![])
                    .with_seed(derive_seed(seed, "train", 1)),
                train: &dr_train,
                valid: &dr_valid,
            },
        ];
        run_pipeline(&stages, &init, &dir)?;

        let curve = load_curve(&dir.join("02_dr").join("curve.csv"))?;
        let runs = [("dr".to_string(), curve.clone())];
        write_text(
            &dir.join("fig3_total_loss.svg"),
            &line_chart_svg(
                "detection stage total loss",
                "epoch",
                "loss",
                &curve_series(&runs, |r, split| Some(split_losses(r, split).l_total)),
            ),
        )?;
        write_text(
            &dir.join("fig3_detect_loss.svg"),
            &line_chart_svg(
                "detection loss component",
                "epoch",
                "loss",
                &curve_series(&runs, |r, split| split_losses(r, split).l_detect),
            ),
        )?;
        let (min_epoch, min_total) =
            series_min(curve.epochs.iter().map(|rec| (rec.epoch, rec.valid.losses.l_total)));
        let final_total = curve.epochs.last().map_or(f64::NAN, |rec| rec.valid.losses.l_total);
        let (min_detect_epoch, min_detect) = series_min(
            curve
                .epochs
                .iter()
                .map(|rec| (rec.epoch, rec.valid.losses.l_detect.unwrap_or(f64::NAN))),
        );
        let final_detect =
            curve.epochs.last().map_or(f64::NAN, |rec| rec.valid.losses.l_detect.unwrap_or(f64::NAN));
        Ok(Fig3Row {
            seed,
            min_valid_total: min_total,
            min_valid_epoch: min_epoch,
            final_valid_total: final_total,
            final_over_min: final_total / min_total,
            min_valid_detect: min_detect,
            min_detect_epoch,
            final_valid_detect: final_detect,
            detect_final_over_min: final_detect / min_detect,
        })
    })?;

    let mut csv = String::from(
        "seed,min_valid_total,min_valid_epoch,final_valid_total,final_over_min,\
         min_valid_detect,min_detect_epoch,final_valid_detect,detect_final_over_min\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.min_valid_total,
            r.min_valid_epoch,
            r.final_valid_total,
            r.final_over_min,
            r.min_valid_detect,
            r.min_detect_epoch,
            r.final_valid_detect,
            r.detect_final_over_min
        );
    }
    write_text(&out.join("fig3.csv"), &csv)?;
    for r in &rows {
        println!(
            "seed {}: valid detect min {:.4} at epoch {}, final {:.4} ({:.2}x min); \
             valid total min {:.4} at epoch {}, final {:.4} ({:.2}x min)",
            r.seed,
            r.min_valid_detect,
            r.min_detect_epoch,
            r.final_valid_detect,
            r.detect_final_over_min,
            r.min_valid_total,
            r.min_valid_epoch,
            r.final_valid_total,
            r.final_over_min
        );
    }
    Ok(())
}

/// Per-stage liveness rows for the backbone comparison.
#[derive(Clone, Debug, Serialize)]
struct Fig4Row {
    seed: u64,
    backbone: String,
    stage: String,
    final_train_total: f64,
    final_valid_total: f64,
    final_valid_metric: f64,
    all_finite: bool,
}

fn curve_all_finite(curve: &TrainingCurve) -> bool {
    curve.epochs.iter().all(|rec| {
        [&rec.train, &rec.valid].into_iter().all(|sr| {
            let l = &sr.losses;
            l.l_total.is_finite()
                && sr.metric_value.is_finite()
                && [l.l_classif, l.l_segm, l.l_recon, l.l_detect]
                    .into_iter()
                    .flatten()
                    .all(f64::is_finite)
        })
    })
}

fn preset_fig4(
    preset: &ExperimentPreset,
    out: &Path,
    p: &ScaleParams,
    threads: usize,
) -> Result<(), CliError> {
    const BACKBONES: [BackboneKind; 2] = [BackboneKind::Vgg13Style, BackboneKind::ResNet50Style];
    let per_seed = for_each_seed(&preset.seeds, threads, |seed| {
        let dir = out.join(format!("seed_{seed}"));
        let cr_data = PhantomConfig::new(Profile::Cr)
            .with_size(p.input_size)
            .generate(p.cr_count, derive_seed(seed, "data", 0))
            .map_err(usage)?;
        let sr_data = PhantomConfig::new(Profile::Sr)
            .with_size(p.input_size)
            .generate(p.sr_count, derive_seed(seed, "data", 1))
            .map_err(usage)?;
        let (cr_train, cr_valid, _) = split_profile(&cr_data, Profile::Cr, derive_seed(seed, "split", 0))?;
        let (sr_train, sr_valid, _) = split_profile(&sr_data, Profile::Sr, derive_seed(seed, "split", 1))?;

        let mut rows = Vec::with_capacity(4);
        let mut curves: Vec<(String, TrainingCurve, TrainingCurve)> = Vec::with_capacity(2);
        for (k, kind) in BACKBONES.into_iter().enumerate() {
            let spec = backbone_spec(kind, p.input_size, p.width_mult)?;
            let heads = [TaskHead::Classification, TaskHead::Segmentation, TaskHead::Reconstruction];
            let init = init_params(&spec, &heads, derive_seed(seed, "init", k as u64)).map_err(usage)?;
            let stages = [
                StageRun {
                    config: StageConfig::new(Stage::Cr, p.cr_epochs)
                        .with_seed(derive_seed(seed, "train", k as u64 * 2)),
                    train: &cr_train,
                    valid: &cr_valid,
                },
                StageRun {
                    config: StageConfig::new(Stage::Sr, p.sr_epochs)
                        .with_seed(derive_seed(seed, "train", k as u64 * 2 + 1)),
                    train: &sr_train,
                    valid: &sr_valid,
                },
            ];
            let bdir = dir.join(kind.name());
            run_pipeline(&stages, &init, &bdir)?;
            let cr_curve = load_curve(&bdir.join("01_cr").join("curve.csv"))?;
            let sr_curve = load_curve(&bdir.join("02_sr").join("curve.csv"))?;
            for (stage, curve) in [("cr", &cr_curve), ("sr", &sr_curve)] {
                let last = curve.epochs.last();
                rows.push(Fig4Row {
                    seed,
                    backbone: kind.name().to_string(),
                    stage: stage.to_string(),
                    final_train_total: last.map_or(f64::NAN, |r| r.train.losses.l_total),
                    final_valid_total: last.map_or(f64::NAN, |r| r.valid.losses.l_total),
                    final_valid_metric: last.map_or(f64::NAN, |r| r.valid.metric_value),
                    all_finite: curve_all_finite(curve),
                });
            }
            curves.push((kind.name().to_string(), cr_curve, sr_curve));
        }

        let cr_runs: Vec<(String, TrainingCurve)> =
            curves.iter().map(|(name, cr, _)| (name.clone(), cr.clone())).collect();
        let sr_runs: Vec<(String, TrainingCurve)> =
            curves.iter().map(|(name, _, sr)| (name.clone(), sr.clone())).collect();
        type Accessor = fn(&crate::trainer::EpochRecord, SplitName) -> Option<f64>;
        struct Chart<'r> {
            file: &'static str,
            title: &'static str,
            runs: &'r [(String, TrainingCurve)],
            accessor: Accessor,
        }
        let metric: Accessor = |r, s| {
            Some(match s {
                SplitName::Train => r.train.metric_value,
                _ => r.valid.metric_value,
            })
        };
        let charts = [
            Chart {
                file: "fig4_cr_loss.svg",
                title: "cr total loss",
                runs: &cr_runs,
                accessor: |r, s| Some(split_losses(r, s).l_total),
            },
            Chart {
                file: "fig4_cr_classif_loss.svg",
                title: "cr classification loss",
                runs: &cr_runs,
                accessor: |r, s| split_losses(r, s).l_classif,
            },
            Chart { file: "fig4_cr_accuracy.svg", title: "cr accuracy", runs: &cr_runs, accessor: metric },
            Chart {
                file: "fig4_sr_loss.svg",
                title: "sr total loss",
                runs: &sr_runs,
                accessor: |r, s| Some(split_losses(r, s).l_total),
            },
            Chart {
                file: "fig4_sr_segm_loss.svg",
                title: "sr segmentation loss",
                runs: &sr_runs,
                accessor: |r, s| split_losses(r, s).l_segm,
            },
            Chart { file: "fig4_sr_dice_loss.svg", title: "sr dice loss", runs: &sr_runs, accessor: metric },
        ];
        for chart in charts {
            let y_label = if chart.title.ends_with("accuracy") { "accuracy" } else { "loss" };
            write_text(
                &dir.join(chart.file),
                &line_chart_svg(chart.title, "epoch", y_label, &curve_series(chart.runs, chart.accessor)),
            )?;
        }
        Ok(rows)
    })?;
    let rows: Vec<Fig4Row> = per_seed.into_iter().flatten().collect();

    let mut csv = String::from(
        "seed,backbone,stage,final_train_total,final_valid_total,final_valid_metric,all_finite\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.seed, r.backbone, r.stage, r.final_train_total, r.final_valid_total, r.final_valid_metric, r.all_finite
        );
    }
    write_text(&out.join("fig4.csv"), &csv)?;
    for r in &rows {
        println!(
            "seed {} {} {}: final train {:.4}, valid {:.4}, metric {:.4}, finite {}",
            r.seed, r.backbone, r.stage, r.final_train_total, r.final_valid_total, r.final_valid_metric, r.all_finite
        );
    }
    Ok(())
}
