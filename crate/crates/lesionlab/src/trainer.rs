//! Three-stage training: composite-loss gradient steps with Adam, weight
//! preloading between stages, best-checkpoint retention, and CSV curve logs.

use crate::datakit::{augment, AugmentOp, DataError, Sample};
use crate::derive_seed;
use crate::losses::{self, total_loss, LossBundle, LossError, TaskLosses, TaskWeights};
use crate::metrics::{
    classification_report, detection_report, GtBox, MetricsError, ScoredBox, DET_IOU_THRESHOLD,
};
use crate::nets::graph::{Graph, Var};
use crate::nets::{
    build_classifier, build_decoder, build_detection_training, build_encoder, decode_cls,
    decode_seg, detect, encode, load_params, ops, save_params, transfer_weights, NetCtx, NetError,
    ParameterStore, TaskHead,
};
use ndarray::{ArrayD, IxDyn, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Curve CSV column layout; inactive loss components log as NA.
pub const CURVE_HEADER: &str = "epoch,split,l_total,l_classif,l_segm,l_recon,l_detect,metric_name,metric_value";

/// Score threshold and cap used when evaluation runs the detector.
pub const EVAL_SCORE_THRESHOLD: f64 = 0.05;
pub const EVAL_MAX_DETECTIONS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error at {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainerError + '_ {
    move |source| TrainerError::Io { path: path.to_path_buf(), source }
}

/// Training stage. Each stage fixes its task weights: CR trains
/// classification with reconstruction, SR segmentation with reconstruction,
/// DR detection with reconstruction, and C_only classification alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Cr,
    Sr,
    Dr,
    COnly,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Cr, Stage::Sr, Stage::Dr, Stage::COnly];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Cr => "cr",
            Stage::Sr => "sr",
            Stage::Dr => "dr",
            Stage::COnly => "c_only",
        }
    }

    pub fn weights(self) -> TaskWeights {
        let (c, s, r, d) = match self {
            Stage::Cr => (1.0, 0.0, 1.0, 0.0),
            Stage::Sr => (0.0, 1.0, 1.0, 0.0),
            Stage::Dr => (0.0, 0.0, 1.0, 1.0),
            Stage::COnly => (1.0, 0.0, 0.0, 0.0),
        };
        TaskWeights { w_classif: c, w_segm: s, w_recon: r, w_detect: d }
    }

    /// Heads the parameter store must carry before the stage can run.
    pub fn required_heads(self) -> Vec<TaskHead> {
        match self {
            Stage::Cr => vec![TaskHead::Classification, TaskHead::Reconstruction],
            Stage::Sr => vec![TaskHead::Segmentation, TaskHead::Reconstruction],
            Stage::Dr => vec![TaskHead::Reconstruction, TaskHead::Detection],
            Stage::COnly => vec![TaskHead::Classification],
        }
    }

    /// Name of the per-epoch quality metric logged for this stage.
    pub fn metric_name(self) -> &'static str {
        match self {
            Stage::Cr | Stage::COnly => "accuracy",
            Stage::Sr => "dice_loss",
            Stage::Dr => "mean_ap",
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Stage::Dr => 2,
            _ => 8,
        }
    }

    pub fn default_augmentations(self) -> Vec<AugmentOp> {
        match self {
            Stage::Dr => vec![AugmentOp::Elastic, AugmentOp::RotateSmall, AugmentOp::Crop],
            _ => vec![],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = TrainerError;
    fn from_str(s: &str) -> Result<Stage, TrainerError> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| TrainerError::Config(format!("unknown stage {s:?}, expected cr, sr, dr, or c_only")))
    }
}

/// Checkpoint to copy prefixed tensors from before the stage starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreloadSpec {
    pub path: PathBuf,
    pub prefixes: Vec<String>,
}

/// Full recipe for one stage. The weights must match the stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub weights: TaskWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub preload: Option<PreloadSpec>,
    pub seed: u64,
    /// None falls back to the stage default (augmented DR, plain otherwise).
    #[serde(default)]
    pub augmentations: Option<Vec<AugmentOp>>,
}

impl StageConfig {
    pub fn new(stage: Stage, epochs: usize) -> StageConfig {
        StageConfig {
            stage,
            weights: stage.weights(),
            epochs,
            batch_size: stage.default_batch_size(),
            learning_rate: DEFAULT_LEARNING_RATE,
            preload: None,
            seed: 0,
            augmentations: Some(stage.default_augmentations()),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> StageConfig {
        self.seed = seed;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> StageConfig {
        self.batch_size = batch_size;
        self
    }

    pub fn with_learning_rate(mut self, learning_rate: f64) -> StageConfig {
        self.learning_rate = learning_rate;
        self
    }

    pub fn with_preload(mut self, path: impl Into<PathBuf>, prefixes: &[&str]) -> StageConfig {
        self.preload = Some(PreloadSpec {
            path: path.into(),
            prefixes: prefixes.iter().map(|p| p.to_string()).collect(),
        });
        self
    }

    pub fn with_augmentations(mut self, ops: Vec<AugmentOp>) -> StageConfig {
        self.augmentations = Some(ops);
        self
    }

    pub fn effective_augmentations(&self) -> Vec<AugmentOp> {
        self.augmentations.clone().unwrap_or_else(|| self.stage.default_augmentations())
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        if self.weights != self.stage.weights() {
            return Err(TrainerError::Config(format!(
                "weights {:?} are inconsistent with stage {}, expected {:?}",
                self.weights.as_array(),
                self.stage.name(),
                self.stage.weights().as_array()
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainerError::Config("batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(TrainerError::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Parses a JSON config; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<StageConfig, TrainerError> {
        let config: StageConfig =
            serde_json::from_str(text).map_err(|e| TrainerError::Config(format!("stage config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("config serializes");
        out.push('\n');
        out
    }
}

/// Loss bundle plus metric value for one data split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub losses: LossBundle,
    pub metric_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: SplitRecord,
    pub valid: SplitRecord,
}

/// Per-epoch training log; epochs are contiguous from 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub metric_name: String,
    pub epochs: Vec<EpochRecord>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn parse_f64(s: &str, line: usize) -> Result<f64, TrainerError> {
    s.parse()
        .map_err(|_| TrainerError::Format(format!("curve line {line}: {s:?} is not a number")))
}

fn parse_opt(s: &str, line: usize) -> Result<Option<f64>, TrainerError> {
    if s == "NA" {
        Ok(None)
    } else {
        parse_f64(s, line).map(Some)
    }
}

impl TrainingCurve {
    pub fn validate(&self) -> Result<(), TrainerError> {
        for (i, rec) in self.epochs.iter().enumerate() {
            if rec.epoch != i + 1 {
                return Err(TrainerError::Format(format!(
                    "curve epochs are not contiguous from 1: position {} holds epoch {}",
                    i + 1,
                    rec.epoch
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CURVE_HEADER);
        out.push('\n');
        for rec in &self.epochs {
            for (split, sr) in [("train", &rec.train), ("valid", &rec.valid)] {
                let l = &sr.losses;
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    rec.epoch,
                    split,
                    l.l_total,
                    fmt_opt(l.l_classif),
                    fmt_opt(l.l_segm),
                    fmt_opt(l.l_recon),
                    fmt_opt(l.l_detect),
                    self.metric_name,
                    sr.metric_value,
                ));
            }
        }
        out
    }

    /// Parses a curve CSV; the metric name is recovered from the rows (an
    /// epoch-free file yields an empty name).
    pub fn from_csv(text: &str) -> Result<TrainingCurve, TrainerError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| TrainerError::Format("curve file is empty".into()))?;
        if header != CURVE_HEADER {
            return Err(TrainerError::Format(format!("unexpected curve header {header:?}")));
        }
        let mut curve = TrainingCurve::default();
        let mut pending: Option<(usize, SplitRecord)> = None;
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(TrainerError::Format(format!(
                    "curve line {lineno}: expected 9 fields, got {}",
                    fields.len()
                )));
            }
            let epoch: usize = fields[0]
                .parse()
                .map_err(|_| TrainerError::Format(format!("curve line {lineno}: bad epoch {:?}", fields[0])))?;
            if curve.metric_name.is_empty() {
                curve.metric_name = fields[7].to_string();
            } else if curve.metric_name != fields[7] {
                return Err(TrainerError::Format(format!(
                    "curve line {lineno}: metric name changes from {:?} to {:?}",
                    curve.metric_name, fields[7]
                )));
            }
            let record = SplitRecord {
                losses: LossBundle {
                    l_total: parse_f64(fields[2], lineno)?,
                    l_classif: parse_opt(fields[3], lineno)?,
                    l_segm: parse_opt(fields[4], lineno)?,
                    l_recon: parse_opt(fields[5], lineno)?,
                    l_detect: parse_opt(fields[6], lineno)?,
                },
                metric_value: parse_f64(fields[8], lineno)?,
            };
            match (fields[1], pending.take()) {
                ("train", None) => {
                    if epoch != curve.epochs.len() + 1 {
                        return Err(TrainerError::Format(format!(
                            "curve line {lineno}: epoch {epoch} breaks contiguity, expected {}",
                            curve.epochs.len() + 1
                        )));
                    }
                    pending = Some((epoch, record));
                }
                ("valid", Some((e, train))) if e == epoch => {
                    curve.epochs.push(EpochRecord { epoch, train, valid: record });
                }
                (split, _) => {
                    return Err(TrainerError::Format(format!(
                        "curve line {lineno}: unexpected {split:?} row, rows must alternate train/valid per epoch"
                    )));
                }
            }
        }
        if pending.is_some() {
            return Err(TrainerError::Format("curve ends with a dangling train row".into()));
        }
        Ok(curve)
    }
}

/// Writes parameters in the checkpoint format with `curve.csv` alongside.
pub fn save_checkpoint(store: &ParameterStore, curve: &TrainingCurve, dir: &Path) -> Result<(), TrainerError> {
    save_params(store, dir)?;
    let path = dir.join("curve.csv");
    fs::write(&path, curve.to_csv()).map_err(io_err(&path))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParameterStore, TrainingCurve), TrainerError> {
    let store = load_params(dir)?;
    let path = dir.join("curve.csv");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let curve = TrainingCurve::from_csv(&text)?;
    curve.validate()?;
    Ok((store, curve))
}

/// Graph nodes of one batch's composite loss.
struct LossVars {
    total: Var,
    classif: Option<Var>,
    segm: Option<Var>,
    recon: Option<Var>,
    detect: Option<Var>,
    params: BTreeMap<String, Var>,
}

fn mean_of(g: &mut Graph<'_>, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = ops::add(g, acc, t);
    }
    ops::scale(g, acc, 1.0 / terms.len() as f64)
}

fn head_prefixes(weights: &TaskWeights) -> Vec<&'static str> {
    let mut out = vec!["encoder."];
    if weights.w_classif == 1.0 {
        out.push(TaskHead::Classification.prefix());
    }
    if weights.w_segm == 1.0 {
        out.push(TaskHead::Segmentation.prefix());
    }
    if weights.w_recon == 1.0 {
        out.push(TaskHead::Reconstruction.prefix());
    }
    if weights.w_detect == 1.0 {
        out.push(TaskHead::Detection.prefix());
    }
    out
}

/// Checks sizes and per-task annotations before any graph work.
fn check_batch(store: &ParameterStore, batch: &[Sample], weights: &TaskWeights) -> Result<(), TrainerError> {
    weights.validate()?;
    if weights.as_array() == [0.0; 4] {
        return Err(TrainerError::Config("no active task: all weights are zero".into()));
    }
    if batch.is_empty() {
        return Err(TrainerError::Config("batch is empty".into()));
    }
    for prefix in head_prefixes(weights) {
        if !store.has_prefix(prefix) {
            return Err(TrainerError::Config(format!(
                "parameter store has no tensors under '{prefix}*' required by the active tasks"
            )));
        }
    }
    let s = store.spec.input_size;
    for sample in batch {
        if sample.image.dim() != (s, s) {
            return Err(TrainerError::Config(format!(
                "sample '{}' is {:?}, expected {s}x{s}",
                sample.sample_id,
                sample.image.dim()
            )));
        }
        if weights.w_classif == 1.0 && sample.class_label.is_none() {
            return Err(TrainerError::Config(format!(
                "sample '{}' lacks the class label required by the classification task",
                sample.sample_id
            )));
        }
        if weights.w_segm == 1.0 && sample.seg_mask.is_none() {
            return Err(TrainerError::Config(format!(
                "sample '{}' lacks the mask required by the segmentation task",
                sample.sample_id
            )));
        }
        if weights.w_detect == 1.0 && sample.instances.is_none() {
            return Err(TrainerError::Config(format!(
                "sample '{}' lacks the instances required by the detection task",
                sample.sample_id
            )));
        }
    }
    Ok(())
}

/// Builds the batch forward pass and per-task mean losses on `g`.
fn build_batch_loss<'a>(
    g: &mut Graph<'a>,
    store: &'a ParameterStore,
    batch: &[Sample],
    weights: &TaskWeights,
    train: bool,
) -> Result<LossVars, TrainerError> {
    check_batch(store, batch, weights)?;
    let s = store.spec.input_size;
    let n = batch.len();
    let mut images = ArrayD::zeros(IxDyn(&[n, 1, s, s]));
    for (i, sample) in batch.iter().enumerate() {
        for ((y, x), &v) in sample.image.indexed_iter() {
            images[[i, 0, y, x]] = v;
        }
    }
    let input = g.leaf_owned(images.clone(), false);
    let mut ctx = NetCtx::new(g, store, train);
    let levels = build_encoder(&mut ctx, input);

    let classif = (weights.w_classif == 1.0).then(|| {
        let probs = build_classifier(&mut ctx, &levels);
        let terms: Vec<Var> = batch
            .iter()
            .enumerate()
            .map(|(i, sample)| {
                let row = ops::index_axis0(ctx.g, probs, i);
                losses::cce_graph(ctx.g, row, sample.class_label.expect("validated").index())
            })
            .collect();
        mean_of(ctx.g, &terms)
    });

    let segm = (weights.w_segm == 1.0).then(|| {
        let maps = build_decoder(&mut ctx, TaskHead::Segmentation.prefix(), &levels, true);
        let terms: Vec<Var> = batch
            .iter()
            .enumerate()
            .map(|(i, sample)| {
                let m3 = ops::index_axis0(ctx.g, maps, i);
                let m2 = ops::reshape(ctx.g, m3, &[s, s]);
                losses::generalized_dice_graph(ctx.g, m2, sample.seg_mask.as_ref().expect("validated"))
            })
            .collect();
        mean_of(ctx.g, &terms)
    });

    // Reconstruction target is the input image itself.
    let recon = (weights.w_recon == 1.0).then(|| {
        let maps = build_decoder(&mut ctx, TaskHead::Reconstruction.prefix(), &levels, false);
        losses::mse_graph(ctx.g, maps, &images)
    });

    let detect_loss = (weights.w_detect == 1.0).then(|| {
        let terms: Vec<Var> = batch
            .iter()
            .enumerate()
            .map(|(i, sample)| {
                let vars = build_detection_training(
                    &mut ctx,
                    levels[4],
                    i,
                    sample.instances.as_ref().expect("validated"),
                    s,
                );
                losses::detection_loss_graph(ctx.g, &vars).l_detect
            })
            .collect();
        mean_of(ctx.g, &terms)
    });

    let mut total: Option<Var> = None;
    for component in [classif, segm, recon, detect_loss].into_iter().flatten() {
        total = Some(match total {
            None => component,
            Some(t) => ops::add(ctx.g, t, component),
        });
    }
    let params = ctx.param_vars().clone();
    Ok(LossVars {
        total: total.expect("at least one active task"),
        classif,
        segm,
        recon,
        detect: detect_loss,
        params,
    })
}

/// Reads component scalars, failing on non-finite values, and recomputes
/// the weighted total so the bundle is internally consistent by
/// construction.
fn bundle_from_vars(g: &Graph<'_>, lv: &LossVars, weights: &TaskWeights) -> Result<LossBundle, TrainerError> {
    let read = |name: &str, v: Option<Var>| -> Result<Option<f64>, TrainerError> {
        match v {
            None => Ok(None),
            Some(v) => {
                let x = g.scalar(v);
                if x.is_finite() {
                    Ok(Some(x))
                } else {
                    Err(TrainerError::Numeric(format!("{name} is not finite ({x})")))
                }
            }
        }
    };
    let task_losses = TaskLosses {
        l_classif: read("l_classif", lv.classif)?,
        l_segm: read("l_segm", lv.segm)?,
        l_recon: read("l_recon", lv.recon)?,
        l_detect: read("l_detect", lv.detect)?,
    };
    Ok(total_loss(weights, &task_losses)?)
}

/// Composite loss of one batch without recording gradients.
pub fn batch_loss(store: &ParameterStore, batch: &[Sample], weights: &TaskWeights) -> Result<LossBundle, TrainerError> {
    let mut g = Graph::inference();
    let lv = build_batch_loss(&mut g, store, batch, weights, false)?;
    bundle_from_vars(&g, &lv, weights)
}

/// Composite loss and its gradient for every parameter on an active path.
pub fn loss_and_gradients(
    store: &ParameterStore,
    batch: &[Sample],
    weights: &TaskWeights,
) -> Result<(LossBundle, BTreeMap<String, ArrayD<f64>>), TrainerError> {
    let mut g = Graph::recording();
    let lv = build_batch_loss(&mut g, store, batch, weights, true)?;
    let bundle = bundle_from_vars(&g, &lv, weights)?;
    let mut grads = g.backward(lv.total);
    let mut out = BTreeMap::new();
    for (name, var) in &lv.params {
        if let Some(grad) = grads.take(*var) {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(TrainerError::Numeric(format!("non-finite gradient for parameter '{name}'")));
            }
            out.insert(name.clone(), grad);
        }
    }
    Ok((bundle, out))
}

#[derive(Default)]
struct AdamState {
    t: i32,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

/// One Adam update over the parameters that received gradients; everything
/// else is untouched bit for bit. A zero rate still advances the moment
/// state but leaves parameters bitwise unchanged.
fn adam_apply(
    store: &ParameterStore,
    grads: &BTreeMap<String, ArrayD<f64>>,
    state: &mut AdamState,
    learning_rate: f64,
) -> ParameterStore {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t);
    let mut next = store.clone();
    for (name, grad) in grads {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
        m.zip_mut_with(grad, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
        v.zip_mut_with(grad, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
        if learning_rate == 0.0 {
            continue;
        }
        let p = next.get_mut(name).expect("gradient names a stored parameter");
        Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
            *p -= learning_rate * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
        });
    }
    next
}

/// One optimizer step on a fresh optimizer state. Returns the updated store
/// and the batch's loss bundle; the input store is untouched.
pub fn step(
    store: &ParameterStore,
    batch: &[Sample],
    weights: &TaskWeights,
    learning_rate: f64,
) -> Result<(ParameterStore, LossBundle), TrainerError> {
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(TrainerError::Config(format!(
            "learning_rate must be finite and nonnegative, got {learning_rate}"
        )));
    }
    let (bundle, grads) = loss_and_gradients(store, batch, weights)?;
    let mut state = AdamState::default();
    let next = adam_apply(store, &grads, &mut state, learning_rate);
    Ok((next, bundle))
}

/// Running component sums for epoch averaging.
#[derive(Default)]
struct ComponentSums {
    classif: Option<f64>,
    segm: Option<f64>,
    recon: Option<f64>,
    detect: Option<f64>,
    batches: usize,
}

impl ComponentSums {
    fn add(&mut self, bundle: &LossBundle) {
        fn acc(slot: &mut Option<f64>, v: Option<f64>) {
            if let Some(v) = v {
                *slot = Some(slot.unwrap_or(0.0) + v);
            }
        }
        acc(&mut self.classif, bundle.l_classif);
        acc(&mut self.segm, bundle.l_segm);
        acc(&mut self.recon, bundle.l_recon);
        acc(&mut self.detect, bundle.l_detect);
        self.batches += 1;
    }

    /// Component means with the total recomputed from them, so the logged
    /// total is the weighted sum of the logged components exactly.
    fn mean(&self, weights: &TaskWeights) -> Result<LossBundle, TrainerError> {
        let k = self.batches as f64;
        let task_losses = TaskLosses {
            l_classif: self.classif.map(|s| s / k),
            l_segm: self.segm.map(|s| s / k),
            l_recon: self.recon.map(|s| s / k),
            l_detect: self.detect.map(|s| s / k),
        };
        Ok(total_loss(weights, &task_losses)?)
    }
}

/// Eval-mode loss bundle over a split, batched in order.
fn evaluate_losses(
    store: &ParameterStore,
    samples: &[Sample],
    weights: &TaskWeights,
    batch_size: usize,
) -> Result<LossBundle, TrainerError> {
    let mut sums = ComponentSums::default();
    for chunk in samples.chunks(batch_size) {
        sums.add(&batch_loss(store, chunk, weights)?);
    }
    sums.mean(weights)
}

/// The stage's quality metric over a split: classification accuracy, mean
/// Dice loss, or detection mean AP.
fn split_metric(store: &ParameterStore, samples: &[Sample], stage: Stage) -> Result<f64, TrainerError> {
    match stage {
        Stage::Cr | Stage::COnly => {
            let mut preds = Vec::with_capacity(samples.len());
            let mut targets = Vec::with_capacity(samples.len());
            for sample in samples {
                let pyramid = encode(store, &sample.image)?;
                preds.push(decode_cls(store, &pyramid)?);
                targets.push(sample.class_label.expect("validated").index());
            }
            Ok(classification_report(&preds, &targets)?.accuracy)
        }
        Stage::Sr => {
            let mut acc = 0.0;
            for sample in samples {
                let pyramid = encode(store, &sample.image)?;
                let pred = decode_seg(store, &pyramid)?;
                acc += losses::generalized_dice(&pred, sample.seg_mask.as_ref().expect("validated"))?;
            }
            Ok(acc / samples.len() as f64)
        }
        Stage::Dr => {
            let mut dets = Vec::new();
            let mut gts = Vec::new();
            for (i, sample) in samples.iter().enumerate() {
                let pyramid = encode(store, &sample.image)?;
                for d in detect(store, &pyramid, EVAL_SCORE_THRESHOLD, EVAL_MAX_DETECTIONS)? {
                    dets.push(ScoredBox { image: i, det_class: d.det_class, score: d.score, bbox: d.bbox });
                }
                for inst in sample.instances.as_ref().expect("validated") {
                    gts.push(GtBox {
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
            Ok(detection_report(&dets, &gts, DET_IOU_THRESHOLD)?.mean_ap)
        }
    }
}

fn wrap_epoch(e: TrainerError, epoch: usize) -> TrainerError {
    match e {
        TrainerError::Numeric(msg) => TrainerError::Numeric(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}

/// Final and best-validation parameters plus the training curve.
#[derive(Debug)]
pub struct StageOutcome {
    pub params: ParameterStore,
    pub best_params: ParameterStore,
    /// Epoch of the lowest validation total (ties keep the earliest); 0 for
    /// an empty run.
    pub best_epoch: usize,
    pub curve: TrainingCurve,
}

/// Trains one stage from `init`. Preloading, annotation checks, and head
/// checks happen before the first step; the curve gets one record per
/// epoch, and the best-validation parameters are retained alongside the
/// final ones.
pub fn run_stage(
    config: &StageConfig,
    train: &[Sample],
    valid: &[Sample],
    init: &ParameterStore,
) -> Result<StageOutcome, TrainerError> {
    config.validate()?;
    let weights = &config.weights;
    for head in config.stage.required_heads() {
        if !init.has_prefix(head.prefix()) {
            return Err(TrainerError::Config(format!(
                "parameter store lacks the {} head ('{}*') required by stage {}",
                head.name(),
                head.prefix(),
                config.stage.name()
            )));
        }
    }
    let mut params = init.clone();
    if let Some(pre) = &config.preload {
        if !pre.path.join("manifest.json").is_file() {
            return Err(TrainerError::Config(format!(
                "preload path {:?} does not resolve to a checkpoint",
                pre.path
            )));
        }
        let source = load_params(&pre.path)?;
        let (next, report) = transfer_weights(&source, &params, &pre.prefixes)?;
        params = next;
        params.push_provenance(format!(
            "preload from {:?}: copied {} tensors, skipped {}",
            pre.path,
            report.copied.len(),
            report.skipped.len()
        ));
    }
    if train.is_empty() {
        return Err(TrainerError::Config("train split is empty".into()));
    }
    if valid.is_empty() {
        return Err(TrainerError::Config("valid split is empty".into()));
    }
    // Surface annotation or size problems before any step runs.
    check_batch(&params, train, weights)?;
    check_batch(&params, valid, weights)?;

    let mut curve = TrainingCurve {
        metric_name: config.stage.metric_name().to_string(),
        epochs: Vec::with_capacity(config.epochs),
    };
    if config.epochs == 0 {
        return Ok(StageOutcome { params: params.clone(), best_params: params, best_epoch: 0, curve });
    }

    let augmentations = config.effective_augmentations();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle", 0));
    let mut adam = AdamState::default();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut sums = ComponentSums::default();
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                if augmentations.is_empty() {
                    batch.push(train[idx].clone());
                } else {
                    let aug_seed =
                        derive_seed(config.seed, "augment", epoch as u64 * train.len() as u64 + idx as u64);
                    batch.push(augment(&train[idx], &augmentations, aug_seed)?);
                }
            }
            let (bundle, grads) =
                loss_and_gradients(&params, &batch, weights).map_err(|e| wrap_epoch(e, epoch))?;
            params = adam_apply(&params, &grads, &mut adam, config.learning_rate);
            sums.add(&bundle);
        }
        let train_losses = sums.mean(weights).map_err(|e| wrap_epoch(e, epoch))?;
        let valid_losses =
            evaluate_losses(&params, valid, weights, config.batch_size).map_err(|e| wrap_epoch(e, epoch))?;
        let train_metric = split_metric(&params, train, config.stage)?;
        let valid_metric = split_metric(&params, valid, config.stage)?;
        let valid_total = valid_losses.l_total;
        curve.epochs.push(EpochRecord {
            epoch,
            train: SplitRecord { losses: train_losses, metric_value: train_metric },
            valid: SplitRecord { losses: valid_losses, metric_value: valid_metric },
        });
        if best.as_ref().is_none_or(|(b, _, _)| valid_total < *b) {
            best = Some((valid_total, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(StageOutcome { params, best_params, best_epoch, curve })
}

/// One pipeline entry: a stage config and its data splits.
pub struct StageRun<'a> {
    pub config: StageConfig,
    pub train: &'a [Sample],
    pub valid: &'a [Sample],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    /// Stage directory, relative to the pipeline root.
    pub dir: PathBuf,
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_valid_total: f64,
    pub metric_name: String,
    pub final_valid_metric: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<StageSummary>,
}

/// Default transfer set between consecutive stages: the encoder plus every
/// head both stages train (for CR to SR and SR to DR that is the
/// reconstruction decoder).
fn transfer_prefixes(prev: Stage, next: Stage) -> Vec<String> {
    let prev_heads = prev.required_heads();
    let mut out = vec!["encoder.".to_string()];
    for head in next.required_heads() {
        if prev_heads.contains(&head) {
            out.push(head.prefix().to_string());
        }
    }
    out
}

/// Runs stages in order. Every stage starts from `init` plus its preload;
/// stages without an explicit preload chain from the previous stage's best
/// checkpoint with the default prefix set. Relative preload paths resolve
/// against `out_dir`. Each stage writes `final/` and `best/` checkpoints
/// plus `curve.csv`; the summary lands in `pipeline.json`.
pub fn run_pipeline(
    stages: &[StageRun<'_>],
    init: &ParameterStore,
    out_dir: &Path,
) -> Result<PipelineReport, TrainerError> {
    if stages.is_empty() {
        return Err(TrainerError::Config("pipeline needs at least one stage".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut summaries = Vec::with_capacity(stages.len());
    let mut prev: Option<(Stage, PathBuf)> = None;
    for (i, stage_run) in stages.iter().enumerate() {
        let mut config = stage_run.config.clone();
        match (&config.preload, &prev) {
            (Some(pre), _) => {
                let resolved = if pre.path.is_relative() { out_dir.join(&pre.path) } else { pre.path.clone() };
                if !resolved.join("manifest.json").is_file() {
                    return Err(TrainerError::Config(format!(
                        "stage {} ({}): preload {:?} does not resolve to a checkpoint",
                        i + 1,
                        config.stage.name(),
                        pre.path
                    )));
                }
                config.preload = Some(PreloadSpec { path: resolved, prefixes: pre.prefixes.clone() });
            }
            (None, Some((prev_stage, best_dir))) => {
                config.preload = Some(PreloadSpec {
                    path: best_dir.clone(),
                    prefixes: transfer_prefixes(*prev_stage, config.stage),
                });
            }
            (None, None) => {}
        }
        let name = PathBuf::from(format!("{:02}_{}", i + 1, config.stage.name()));
        let dir = out_dir.join(&name);
        let outcome = run_stage(&config, stage_run.train, stage_run.valid, init)?;
        save_checkpoint(&outcome.params, &outcome.curve, &dir.join("final"))?;
        save_checkpoint(&outcome.best_params, &outcome.curve, &dir.join("best"))?;
        let curve_path = dir.join("curve.csv");
        fs::write(&curve_path, outcome.curve.to_csv()).map_err(io_err(&curve_path))?;
        let last = outcome.curve.epochs.last();
        summaries.push(StageSummary {
            stage: config.stage,
            dir: name,
            epochs: config.epochs,
            best_epoch: outcome.best_epoch,
            final_valid_total: last.map_or(0.0, |r| r.valid.losses.l_total),
            metric_name: outcome.curve.metric_name.clone(),
            final_valid_metric: last.map_or(0.0, |r| r.valid.metric_value),
        });
        prev = Some((config.stage, dir.join("best")));
    }
    let report = PipelineReport { stages: summaries };
    let report_path = out_dir.join("pipeline.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| TrainerError::Format(e.to_string()))?;
    fs::write(&report_path, text + "\n").map_err(io_err(&report_path))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{PhantomConfig, Profile};
    use crate::nets::{init_params, BackboneSpec, TaskHead};

    fn tiny_spec() -> BackboneSpec {
        BackboneSpec::vgg13().with_width_mult(0.0625).with_input_size(16)
    }

    fn tiny_store(heads: &[TaskHead]) -> ParameterStore {
        init_params(&tiny_spec(), heads, 7).unwrap()
    }

    fn cr_samples(count: usize) -> Vec<Sample> {
        PhantomConfig::new(Profile::Cr).with_size(16).generate(count, 11).unwrap()
    }

    fn sr_samples(count: usize) -> Vec<Sample> {
        PhantomConfig::new(Profile::Sr).with_size(16).generate(count, 12).unwrap()
    }

    fn dr_samples(count: usize) -> Vec<Sample> {
        PhantomConfig::new(Profile::Dr)
            .with_size(16)
            .with_instances_per_image(1, 1)
            .generate(count, 13)
            .unwrap()
    }

    fn stores_equal(a: &ParameterStore, b: &ParameterStore) -> bool {
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|((na, va), (nb, vb))| na == nb && va == vb)
    }

    #[test]
    fn stage_defaults_and_weights() {
        assert_eq!(Stage::Cr.weights().as_array(), [1.0, 0.0, 1.0, 0.0]);
        assert_eq!(Stage::Sr.weights().as_array(), [0.0, 1.0, 1.0, 0.0]);
        assert_eq!(Stage::Dr.weights().as_array(), [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(Stage::COnly.weights().as_array(), [1.0, 0.0, 0.0, 0.0]);
        let config = StageConfig::new(Stage::Dr, 3);
        assert_eq!(config.batch_size, 2);
        assert_eq!(
            config.effective_augmentations(),
            vec![AugmentOp::Elastic, AugmentOp::RotateSmall, AugmentOp::Crop]
        );
        assert_eq!(StageConfig::new(Stage::Cr, 3).batch_size, 8);
        assert!(StageConfig::new(Stage::Cr, 3).effective_augmentations().is_empty());
        assert_eq!("c_only".parse::<Stage>().unwrap(), Stage::COnly);
        assert!("xy".parse::<Stage>().is_err());
    }

    #[test]
    fn stage_config_json_round_trip_and_rejections() {
        let config = StageConfig::new(Stage::Sr, 5).with_seed(9).with_learning_rate(2e-4);
        let parsed = StageConfig::from_json(&config.to_json()).unwrap();
        assert_eq!(parsed, config);

        let with_unknown = config.to_json().replacen('{', "{\n  \"surprise\": 1,", 1);
        let err = StageConfig::from_json(&with_unknown).unwrap_err();
        assert!(matches!(err, TrainerError::Config(_)));

        let wrong_weights = config.to_json().replace("\"w_segm\": 1.0", "\"w_segm\": 0.0");
        assert!(matches!(StageConfig::from_json(&wrong_weights), Err(TrainerError::Config(_))));

        let mut bad_lr = StageConfig::new(Stage::Cr, 1);
        bad_lr.learning_rate = 0.0;
        assert!(matches!(bad_lr.validate(), Err(TrainerError::Config(_))));
    }

    #[test]
    fn step_with_zero_rate_is_identity() {
        let store = tiny_store(&[TaskHead::Classification, TaskHead::Reconstruction]);
        let samples = cr_samples(2);
        let (next, bundle) = step(&store, &samples, &Stage::Cr.weights(), 0.0).unwrap();
        assert!(bundle.l_total.is_finite());
        assert!(stores_equal(&store, &next));
        assert!(matches!(
            step(&store, &samples, &Stage::Cr.weights(), f64::NAN),
            Err(TrainerError::Config(_))
        ));
    }

    #[test]
    fn step_descends_on_reconstruction() {
        let store = tiny_store(&[TaskHead::Reconstruction]);
        let samples = cr_samples(1);
        let weights = TaskWeights::new(0.0, 0.0, 1.0, 0.0).unwrap();
        let (p1, b0) = step(&store, &samples, &weights, 1e-4).unwrap();
        let (p2, b1) = step(&p1, &samples, &weights, 1e-4).unwrap();
        let (_, b2) = step(&p2, &samples, &weights, 1e-4).unwrap();
        assert!(b1.l_total < b0.l_total, "{} then {}", b0.l_total, b1.l_total);
        assert!(b2.l_total < b1.l_total, "{} then {}", b1.l_total, b2.l_total);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let store = tiny_store(&[TaskHead::Classification, TaskHead::Reconstruction]);
        let samples = cr_samples(2);
        let weights = Stage::Cr.weights();
        let (_, grads) = loss_and_gradients(&store, &samples, &weights).unwrap();
        let h = 1e-5;
        for name in ["cls.fc3.bias", "encoder.stage1.conv1.weight", "recon.out.bias", "encoder.stage5.conv2.weight"] {
            let grad = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
            let flat = 0;
            let analytic = grad.as_slice().unwrap()[flat];
            let eval = |delta: f64| {
                let mut perturbed = store.clone();
                perturbed.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] += delta;
                batch_loss(&perturbed, &samples, &weights).unwrap().l_total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-10);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "{name}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn run_stage_epoch_zero_is_identity() {
        let store = tiny_store(&[TaskHead::Classification, TaskHead::Reconstruction]);
        let samples = cr_samples(3);
        let config = StageConfig::new(Stage::Cr, 0);
        let outcome = run_stage(&config, &samples[..2], &samples[2..], &store).unwrap();
        assert!(stores_equal(&store, &outcome.params));
        assert!(stores_equal(&store, &outcome.best_params));
        assert_eq!(outcome.best_epoch, 0);
        assert!(outcome.curve.epochs.is_empty());
        assert_eq!(outcome.curve.metric_name, "accuracy");
    }

    #[test]
    fn run_stage_validates_inputs() {
        let store = tiny_store(&[TaskHead::Classification, TaskHead::Reconstruction]);
        let cr = cr_samples(3);
        let config = StageConfig::new(Stage::Cr, 1);

        // Samples without class labels cannot feed the classification task.
        let sr = sr_samples(3);
        let err = run_stage(&config, &sr[..2], &sr[2..], &store).unwrap_err();
        assert!(matches!(err, TrainerError::Config(_)), "{err}");

        // Missing segmentation head.
        let seg_config = StageConfig::new(Stage::Sr, 1);
        let err = run_stage(&seg_config, &sr[..2], &sr[2..], &store).unwrap_err();
        assert!(matches!(err, TrainerError::Config(_)), "{err}");

        // Empty validation split.
        let err = run_stage(&config, &cr, &[], &store).unwrap_err();
        assert!(matches!(err, TrainerError::Config(_)), "{err}");
    }

    #[test]
    fn run_stage_is_deterministic_and_isolated() {
        let store = tiny_store(&TaskHead::ALL);
        let samples = cr_samples(6);
        let config = StageConfig::new(Stage::Cr, 2).with_batch_size(2).with_seed(3);
        let a = run_stage(&config, &samples[..4], &samples[4..], &store).unwrap();
        let b = run_stage(&config, &samples[..4], &samples[4..], &store).unwrap();
        assert!(stores_equal(&a.params, &b.params));
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.best_epoch, b.best_epoch);

        // Inactive heads stay bitwise untouched; active ones move.
        for (name, before) in store.iter() {
            let after = a.params.get(name).unwrap();
            if name.starts_with("seg.") || name.starts_with("det.") {
                assert_eq!(before, after, "{name} changed");
            }
        }
        assert_ne!(store.get("cls.fc3.bias"), a.params.get("cls.fc3.bias"));

        // Logged totals are the weighted sums of logged components, exactly.
        for rec in &a.curve.epochs {
            for sr in [&rec.train, &rec.valid] {
                let recomputed = total_loss(
                    &config.weights,
                    &TaskLosses {
                        l_classif: sr.losses.l_classif,
                        l_segm: sr.losses.l_segm,
                        l_recon: sr.losses.l_recon,
                        l_detect: sr.losses.l_detect,
                    },
                )
                .unwrap();
                assert_eq!(sr.losses.l_total, recomputed.l_total);
            }
        }
        a.curve.validate().unwrap();
        assert_eq!(a.curve.epochs.len(), 2);
    }

    #[test]
    fn run_stage_dr_smoke() {
        let store = tiny_store(&[TaskHead::Reconstruction, TaskHead::Detection]);
        let samples = dr_samples(3);
        let config = StageConfig::new(Stage::Dr, 1).with_seed(5);
        let outcome = run_stage(&config, &samples[..2], &samples[2..], &store).unwrap();
        let rec = &outcome.curve.epochs[0];
        assert!(rec.train.losses.l_detect.unwrap().is_finite());
        assert!(rec.train.losses.l_recon.unwrap().is_finite());
        assert_eq!(outcome.curve.metric_name, "mean_ap");
        assert!((0.0..=1.0).contains(&rec.valid.metric_value));
    }

    #[test]
    fn run_stage_numeric_abort_names_epoch_and_component() {
        let mut store = tiny_store(&[TaskHead::Classification, TaskHead::Reconstruction]);
        store.get_mut("recon.out.weight").unwrap().fill(1e200);
        let samples = cr_samples(3);
        let config = StageConfig::new(Stage::Cr, 1);
        let err = run_stage(&config, &samples[..2], &samples[2..], &store).unwrap_err();
        match err {
            TrainerError::Numeric(msg) => {
                assert!(msg.contains("epoch 1"), "{msg}");
                assert!(msg.contains("l_recon"), "{msg}");
            }
            other => panic!("expected numeric abort, got {other}"),
        }
    }

    #[test]
    fn curve_csv_round_trips_and_validates() {
        let bundle = |t: f64| LossBundle {
            l_classif: Some(t / 3.0),
            l_segm: None,
            l_recon: Some(t * 0.4999999999),
            l_detect: None,
            l_total: t / 3.0 + t * 0.4999999999,
        };
        let curve = TrainingCurve {
            metric_name: "accuracy".into(),
            epochs: (1..=3)
                .map(|e| EpochRecord {
                    epoch: e,
                    train: SplitRecord { losses: bundle(e as f64), metric_value: 1.0 / e as f64 },
                    valid: SplitRecord { losses: bundle(e as f64 * 1.7), metric_value: 0.25 },
                })
                .collect(),
        };
        let text = curve.to_csv();
        assert!(text.starts_with(CURVE_HEADER));
        assert!(text.contains(",NA,"));
        let back = TrainingCurve::from_csv(&text).unwrap();
        assert_eq!(back, curve);

        // A hole in the epoch sequence is rejected.
        let gapped = text.replace("3,train", "5,train").replace("3,valid", "5,valid");
        assert!(matches!(TrainingCurve::from_csv(&gapped), Err(TrainerError::Format(_))));
        // Unexpected header.
        assert!(matches!(
            TrainingCurve::from_csv("epoch,stuff\n"),
            Err(TrainerError::Format(_))
        ));
        // Dangling train row.
        let mut dangling = String::from(CURVE_HEADER);
        dangling.push_str("\n1,train,1,NA,NA,1,NA,accuracy,0\n");
        assert!(matches!(TrainingCurve::from_csv(&dangling), Err(TrainerError::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_preload_contract() {
        let dir = tempfile::tempdir().unwrap();
        let cr_store = tiny_store(&[TaskHead::Classification, TaskHead::Reconstruction]);
        let curve = TrainingCurve {
            metric_name: "accuracy".into(),
            epochs: vec![EpochRecord {
                epoch: 1,
                train: SplitRecord {
                    losses: LossBundle {
                        l_classif: Some(1.0 / 3.0),
                        l_segm: None,
                        l_recon: Some(0.125),
                        l_detect: None,
                        l_total: 1.0 / 3.0 + 0.125,
                    },
                    metric_value: 0.5,
                },
                valid: SplitRecord {
                    losses: LossBundle {
                        l_classif: Some(0.7),
                        l_segm: None,
                        l_recon: Some(0.2),
                        l_detect: None,
                        l_total: 0.9,
                    },
                    metric_value: 0.25,
                },
            }],
        };
        let ckpt = dir.path().join("cr");
        save_checkpoint(&cr_store, &curve, &ckpt).unwrap();
        let (loaded, loaded_curve) = load_checkpoint(&ckpt).unwrap();
        assert_eq!(loaded_curve, curve);

        // Preloading the encoder into a fresh SR store copies it bitwise
        // from the checkpoint and leaves other heads at their init values.
        let sr_init = init_params(
            &tiny_spec(),
            &[TaskHead::Segmentation, TaskHead::Reconstruction],
            99,
        )
        .unwrap();
        let sr = sr_samples(3);
        let preloaded = StageConfig::new(Stage::Sr, 0).with_preload(&ckpt, &["encoder.", "recon."]);
        let outcome = run_stage(&preloaded, &sr[..2], &sr[2..], &sr_init).unwrap();
        for (name, value) in loaded.iter() {
            if name.starts_with("encoder.") || name.starts_with("recon.") {
                assert_eq!(outcome.params.get(name).unwrap(), value, "{name}");
            }
        }
        for (name, value) in sr_init.iter() {
            if name.starts_with("seg.") {
                assert_eq!(outcome.params.get(name).unwrap(), value, "{name}");
            }
        }
        // Without preload the encoder stays at its init values.
        let scratch = run_stage(&StageConfig::new(Stage::Sr, 0), &sr[..2], &sr[2..], &sr_init).unwrap();
        assert!(stores_equal(&scratch.params, &sr_init));

        // Unresolvable preload and backbone mismatch.
        let missing = StageConfig::new(Stage::Sr, 0).with_preload(dir.path().join("nowhere"), &["encoder."]);
        assert!(matches!(
            run_stage(&missing, &sr[..2], &sr[2..], &sr_init),
            Err(TrainerError::Config(_))
        ));
        let resnet_spec = BackboneSpec::resnet50().with_width_mult(0.0625).with_input_size(16);
        let resnet = init_params(&resnet_spec, &[TaskHead::Segmentation, TaskHead::Reconstruction], 1).unwrap();
        let err = run_stage(&preloaded, &sr[..2], &sr[2..], &resnet).unwrap_err();
        assert!(matches!(err, TrainerError::Net(NetError::Transfer(_))), "{err}");
    }

    #[test]
    fn run_pipeline_chains_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let store = tiny_store(&TaskHead::ALL);
        let cr = cr_samples(3);
        let sr = sr_samples(3);
        let stages = [
            StageRun {
                config: StageConfig::new(Stage::Cr, 1).with_batch_size(2),
                train: &cr[..2],
                valid: &cr[2..],
            },
            StageRun {
                config: StageConfig::new(Stage::Sr, 1).with_batch_size(2),
                train: &sr[..2],
                valid: &sr[2..],
            },
        ];
        let report = run_pipeline(&stages, &store, dir.path()).unwrap();
        assert_eq!(report.stages.len(), 2);
        assert!(report.stages.iter().all(|s| s.final_valid_total.is_finite()));
        assert_eq!(report.stages[0].stage, Stage::Cr);
        for sub in ["01_cr/final/manifest.json", "01_cr/best/curve.csv", "02_sr/curve.csv", "pipeline.json"] {
            assert!(dir.path().join(sub).is_file(), "{sub} missing");
        }
        // The SR stage chained from CR's best checkpoint: its curve exists
        // and the preload is visible in the summary directory layout.
        let (sr_params, _) = load_checkpoint(&dir.path().join("02_sr/final")).unwrap();
        assert!(sr_params.provenance.iter().any(|line| line.contains("preload")), "{:?}", sr_params.provenance);
    }
}
