//! Shared-encoder networks: backbone specs, the parameter store, task head
//! builders, staged weight transfer, and the on-disk checkpoint format.

pub mod graph;
pub mod ops;

mod checkpoint;
mod detect;

pub use checkpoint::{load_params, save_params};
pub use detect::{detect, Detection};
#[allow(unused_imports)]
pub(crate) use detect::{build_detection_training, DetTrainVars};

use crate::derive_seed;
use graph::{Graph, Var};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Network, transfer, and checkpoint errors.
#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("transfer failed: {0}")]
    Transfer(String),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Encoder family. Both encoders expose the same five-level pyramid contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "vgg13_style")]
    Vgg13Style,
    #[serde(rename = "resnet50_style")]
    ResNet50Style,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Vgg13Style => "vgg13_style",
            BackboneKind::ResNet50Style => "resnet50_style",
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, NetError> {
        match s {
            "vgg13_style" => Ok(BackboneKind::Vgg13Style),
            "resnet50_style" => Ok(BackboneKind::ResNet50Style),
            other => Err(NetError::Argument(format!("unknown backbone kind '{other}'"))),
        }
    }
}

/// Pyramid strides relative to the input, fixed for every backbone.
pub const PYRAMID_STRIDES: [usize; 5] = [1, 2, 4, 8, 16];

/// Backbone geometry: family, per-level channel counts, and input side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub stage_channels: [usize; 5],
    pub input_size: usize,
}

impl BackboneSpec {
    pub fn vgg13() -> BackboneSpec {
        BackboneSpec {
            kind: BackboneKind::Vgg13Style,
            stage_channels: [64, 128, 256, 512, 512],
            input_size: 256,
        }
    }

    pub fn resnet50() -> BackboneSpec {
        BackboneSpec {
            kind: BackboneKind::ResNet50Style,
            stage_channels: [64, 256, 512, 1024, 2048],
            input_size: 256,
        }
    }

    /// Scales all channel counts, keeping each a positive multiple of 4 so
    /// bottleneck mid-widths stay integral.
    pub fn with_width_mult(mut self, mult: f64) -> BackboneSpec {
        assert!(mult > 0.0, "width multiplier must be positive");
        for c in &mut self.stage_channels {
            let scaled = (*c as f64 * mult / 4.0).round().max(1.0) * 4.0;
            *c = scaled as usize;
        }
        self
    }

    pub fn with_input_size(mut self, size: usize) -> BackboneSpec {
        self.input_size = size;
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_size < 16 || !self.input_size.is_multiple_of(16) {
            return Err(NetError::Argument(format!(
                "input size must be a multiple of 16 and at least 16, got {}",
                self.input_size
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(NetError::Argument("stage channels must be positive".into()));
        }
        if self.kind == BackboneKind::ResNet50Style && self.stage_channels[1..].iter().any(|&c| c % 4 != 0) {
            return Err(NetError::Argument(
                "residual stage channels must be multiples of 4".into(),
            ));
        }
        Ok(())
    }
}

/// Task heads attachable to the shared encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskHead {
    Classification,
    Segmentation,
    Reconstruction,
    Detection,
}

impl TaskHead {
    pub const ALL: [TaskHead; 4] = [
        TaskHead::Classification,
        TaskHead::Segmentation,
        TaskHead::Reconstruction,
        TaskHead::Detection,
    ];

    /// Parameter-name prefix owned by this head.
    pub fn prefix(self) -> &'static str {
        match self {
            TaskHead::Classification => "cls.",
            TaskHead::Segmentation => "seg.",
            TaskHead::Reconstruction => "recon.",
            TaskHead::Detection => "det.",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskHead::Classification => "classification",
            TaskHead::Segmentation => "segmentation",
            TaskHead::Reconstruction => "reconstruction",
            TaskHead::Detection => "detection",
        }
    }
}

/// Five feature maps at strides 1, 2, 4, 8, 16, each [C, H/stride, W/stride].
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<ArrayD<f64>>,
    pub input_size: usize,
}

impl FeaturePyramid {
    pub fn strides(&self) -> [usize; 5] {
        PYRAMID_STRIDES
    }
}

/// Named parameter tensors plus the backbone tag, creation seed, and a
/// provenance log of the stages and transfers that produced them.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    pub spec: BackboneSpec,
    pub seed: u64,
    pub provenance: Vec<String>,
    params: BTreeMap<String, ArrayD<f64>>,
}

impl ParameterStore {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.params.get_mut(name)
    }

    /// Replaces an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: ArrayD<f64>) -> Result<(), NetError> {
        match self.params.get_mut(name) {
            None => Err(NetError::Argument(format!("unknown parameter '{name}'"))),
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(NetError::Argument(format!(
                        "parameter '{name}': shape {:?} cannot replace {:?}",
                        value.shape(),
                        slot.shape()
                    )));
                }
                *slot = value;
                Ok(())
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }

    /// Heads present in this store, judged by parameter prefixes.
    pub fn heads(&self) -> Vec<TaskHead> {
        TaskHead::ALL.iter().copied().filter(|h| self.has_prefix(h.prefix())).collect()
    }

    pub fn push_provenance(&mut self, line: impl Into<String>) {
        self.provenance.push(line.into());
    }

    pub(crate) fn from_parts(
        spec: BackboneSpec,
        seed: u64,
        provenance: Vec<String>,
        params: BTreeMap<String, ArrayD<f64>>,
    ) -> ParameterStore {
        ParameterStore { spec, seed, provenance, params }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// He-style uniform over [-sqrt(6/fan_in), sqrt(6/fan_in)].
    HeUniform,
    Zeros,
    Const(f64),
}

type ParamSpec = (String, Vec<usize>, Init);

fn push_conv(out: &mut Vec<ParamSpec>, name: String, o: usize, i: usize, k: usize, w_init: Init, b_init: Init) {
    out.push((format!("{name}.weight"), vec![o, i, k, k], w_init));
    out.push((format!("{name}.bias"), vec![o], b_init));
}

fn push_fc(out: &mut Vec<ParamSpec>, name: String, o: usize, i: usize) {
    out.push((format!("{name}.weight"), vec![o, i], Init::HeUniform));
    out.push((format!("{name}.bias"), vec![o], Init::Zeros));
}

fn push_decoder(out: &mut Vec<ParamSpec>, prefix: &str, channels: [usize; 5]) {
    let [c1, c2, c3, c4, c5] = channels;
    let he = Init::HeUniform;
    let zero = Init::Zeros;
    push_conv(out, format!("{prefix}bridge.conv"), c5, c5, 3, he, zero);
    let dec = [c1, c2, c3, c4];
    let mut above = c5;
    for k in (1..=4).rev() {
        let d = dec[k - 1];
        push_conv(out, format!("{prefix}up{k}.skip"), d, d, 1, he, zero);
        push_conv(out, format!("{prefix}up{k}.conv1"), d, above + d, 3, he, zero);
        push_conv(out, format!("{prefix}up{k}.conv2"), d, d, 3, he, zero);
        above = d;
    }
    push_conv(out, format!("{prefix}out"), 1, c1, 1, he, zero);
}

fn parameter_specs(spec: &BackboneSpec, heads: &[TaskHead]) -> Vec<ParamSpec> {
    let mut out: Vec<ParamSpec> = Vec::new();
    let [c1, c2, c3, c4, c5] = spec.stage_channels;
    let he = Init::HeUniform;
    let zero = Init::Zeros;

    match spec.kind {
        BackboneKind::Vgg13Style => {
            let mut prev = 1;
            for (si, &c) in spec.stage_channels.iter().enumerate() {
                push_conv(&mut out, format!("encoder.stage{}.conv1", si + 1), c, prev, 3, he, zero);
                push_conv(&mut out, format!("encoder.stage{}.conv2", si + 1), c, c, 3, he, zero);
                prev = c;
            }
        }
        BackboneKind::ResNet50Style => {
            push_conv(&mut out, "encoder.stem.conv".into(), c1, 1, 3, he, zero);
            let layer_out = [c2, c3, c4, c5];
            let block_counts = [3usize, 4, 6, 3];
            let mut prev = c1;
            for li in 0..4 {
                let oc = layer_out[li];
                let mid = oc / 4;
                for b in 1..=block_counts[li] {
                    let name = format!("encoder.layer{}.block{}", li + 1, b);
                    let in_ch = if b == 1 { prev } else { oc };
                    push_conv(&mut out, format!("{name}.conv1"), mid, in_ch, 1, he, zero);
                    push_conv(&mut out, format!("{name}.conv2"), mid, mid, 3, he, zero);
                    // Zero-initialized final conv so each residual block
                    // starts as identity; keeps deep stacks stable unnormalized.
                    push_conv(&mut out, format!("{name}.conv3"), oc, mid, 1, zero, zero);
                    if b == 1 {
                        push_conv(&mut out, format!("{name}.shortcut"), oc, in_ch, 1, he, zero);
                    }
                }
                prev = oc;
            }
        }
    }

    let hidden = 4 * c1;
    for head in heads {
        match head {
            TaskHead::Segmentation => push_decoder(&mut out, "seg.", spec.stage_channels),
            TaskHead::Reconstruction => push_decoder(&mut out, "recon.", spec.stage_channels),
            TaskHead::Classification => {
                push_fc(&mut out, "cls.fc1".into(), hidden, c5);
                push_fc(&mut out, "cls.fc2".into(), c1, hidden);
                push_fc(&mut out, "cls.fc3".into(), 3, c1);
            }
            TaskHead::Detection => {
                push_conv(&mut out, "det.rpn.conv".into(), c5, c5, 3, he, zero);
                // Objectness bias starts low so early proposals are sparse.
                push_conv(&mut out, "det.rpn.obj".into(), detect::NUM_ANCHORS, c5, 1, he, Init::Const(-2.0));
                push_conv(&mut out, "det.rpn.box".into(), 4 * detect::NUM_ANCHORS, c5, 1, he, zero);
                push_fc(&mut out, "det.head.fc1".into(), hidden, c5 * detect::ROI_SIZE * detect::ROI_SIZE);
                push_fc(&mut out, "det.head.fc2".into(), hidden, hidden);
                push_fc(&mut out, "det.head.cls".into(), 4, hidden);
                push_fc(&mut out, "det.head.box".into(), 4, hidden);
                push_conv(&mut out, "det.mask.conv1".into(), c1, c5, 3, he, zero);
                push_conv(&mut out, "det.mask.conv2".into(), c1, c1, 3, he, zero);
                push_conv(&mut out, "det.mask.out".into(), 1, c1, 1, he, zero);
            }
        }
    }
    out
}

fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[1] * shape[2] * shape[3],
        2 => shape[1],
        _ => shape.iter().product::<usize>().max(1),
    }
}

/// Creates a fresh parameter store for the encoder plus the requested heads.
///
/// Weights draw from a He-style uniform distribution, biases start at zero
/// (except the objectness bias), and every tensor gets its own stream keyed
/// by parameter name, so two stores sharing a seed agree on every tensor they
/// have in common regardless of which heads each one carries.
pub fn init_params(spec: &BackboneSpec, heads: &[TaskHead], seed: u64) -> Result<ParameterStore, NetError> {
    spec.validate()?;
    if heads.is_empty() {
        return Err(NetError::Argument("at least one task head is required".into()));
    }
    let mut ordered: Vec<TaskHead> = heads.to_vec();
    ordered.sort();
    ordered.dedup();

    let mut params = BTreeMap::new();
    for (name, shape, init) in parameter_specs(spec, &ordered) {
        let arr = match init {
            Init::Zeros => ArrayD::zeros(IxDyn(&shape)),
            Init::Const(v) => ArrayD::from_elem(IxDyn(&shape), v),
            Init::HeUniform => {
                let limit = (6.0 / fan_in(&shape) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &name, 0));
                ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.random_range(-limit..limit))
            }
        };
        params.insert(name, arr);
    }

    let head_names: Vec<&str> = ordered.iter().map(|h| h.name()).collect();
    let provenance = vec![format!(
        "init backbone={} heads={} seed={}",
        spec.kind.name(),
        head_names.join(","),
        seed
    )];
    Ok(ParameterStore { spec: spec.clone(), seed, provenance, params })
}

/// Which tensors a transfer copied and which it left alone.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub skipped: Vec<String>,
}

/// Copies every tensor whose name starts with one of `prefixes` from
/// `source` into a clone of `target`. Tensors present on only one side are
/// reported as skipped; a shape clash is an error naming the tensor, and the
/// two stores must share a backbone family.
pub fn transfer_weights(
    source: &ParameterStore,
    target: &ParameterStore,
    prefixes: &[String],
) -> Result<(ParameterStore, TransferReport), NetError> {
    if source.spec.kind != target.spec.kind {
        return Err(NetError::Transfer(format!(
            "backbone mismatch: source is {}, target is {}",
            source.spec.kind.name(),
            target.spec.kind.name()
        )));
    }
    let mut out = target.clone();
    let mut report = TransferReport::default();
    if prefixes.is_empty() {
        return Ok((out, report));
    }
    let matches = |name: &str| prefixes.iter().any(|p| name.starts_with(p.as_str()));

    for (name, tgt) in target.params.iter() {
        if !matches(name) {
            continue;
        }
        match source.params.get(name) {
            None => report.skipped.push(name.clone()),
            Some(src) => {
                if src.shape() != tgt.shape() {
                    return Err(NetError::Transfer(format!(
                        "parameter '{name}': source shape {:?} does not match target shape {:?}",
                        src.shape(),
                        tgt.shape()
                    )));
                }
                out.params.insert(name.clone(), src.clone());
                report.copied.push(name.clone());
            }
        }
    }
    for name in source.params.keys() {
        if matches(name) && !target.params.contains_key(name) {
            report.skipped.push(name.clone());
        }
    }
    report.skipped.sort();
    report.skipped.dedup();
    out.push_provenance(format!(
        "transfer copied={} skipped={} prefixes=[{}]",
        report.copied.len(),
        report.skipped.len(),
        prefixes.join(",")
    ));
    Ok((out, report))
}

/// Builder context tying a graph to a parameter store; parameters become
/// graph leaves on first use and are shared after that.
pub(crate) struct NetCtx<'a, 'g> {
    pub g: &'g mut Graph<'a>,
    store: &'a ParameterStore,
    vars: BTreeMap<String, Var>,
    train: bool,
}

impl<'a, 'g> NetCtx<'a, 'g> {
    pub fn new(g: &'g mut Graph<'a>, store: &'a ParameterStore, train: bool) -> NetCtx<'a, 'g> {
        NetCtx { g, store, vars: BTreeMap::new(), train }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.store.spec
    }

    pub fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let arr = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing from store"));
        let v = self.g.leaf(arr, self.train);
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        ops::conv2d(self.g, x, w, b, stride, pad)
    }

    pub fn conv_relu(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let y = self.conv(name, x, stride, pad);
        ops::relu(self.g, y)
    }

    pub fn fc(&mut self, name: &str, x: Var) -> Var {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        ops::linear(self.g, x, w, b)
    }

    /// Leaf vars registered so far, by parameter name.
    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

/// Runs the encoder on [N,1,S,S], returning the five pyramid levels.
pub(crate) fn build_encoder(ctx: &mut NetCtx<'_, '_>, x: Var) -> Vec<Var> {
    let mut levels = Vec::with_capacity(5);
    match ctx.spec().kind {
        BackboneKind::Vgg13Style => {
            let mut h = x;
            for stage in 1..=5 {
                h = ctx.conv_relu(&format!("encoder.stage{stage}.conv1"), h, 1, 1);
                h = ctx.conv_relu(&format!("encoder.stage{stage}.conv2"), h, 1, 1);
                levels.push(h);
                if stage < 5 {
                    h = ops::maxpool2(ctx.g, h);
                }
            }
        }
        BackboneKind::ResNet50Style => {
            let mut h = ctx.conv_relu("encoder.stem.conv", x, 1, 1);
            levels.push(h);
            let block_counts = [3usize, 4, 6, 3];
            for (li, &nb) in block_counts.iter().enumerate() {
                for b in 1..=nb {
                    let name = format!("encoder.layer{}.block{}", li + 1, b);
                    let stride = if b == 1 { 2 } else { 1 };
                    h = bottleneck(ctx, &name, h, stride, b == 1);
                }
                levels.push(h);
            }
        }
    }
    levels
}

fn bottleneck(ctx: &mut NetCtx<'_, '_>, name: &str, x: Var, stride: usize, projected: bool) -> Var {
    let y = ctx.conv_relu(&format!("{name}.conv1"), x, 1, 0);
    let y = ctx.conv_relu(&format!("{name}.conv2"), y, stride, 1);
    let y = ctx.conv(&format!("{name}.conv3"), y, 1, 0);
    let shortcut = if projected {
        ctx.conv(&format!("{name}.shortcut"), x, stride, 0)
    } else {
        x
    };
    let sum = ops::add(ctx.g, y, shortcut);
    ops::relu(ctx.g, sum)
}

/// U-style decoder over all five pyramid levels; `prefix` selects the head
/// ("seg." squashes through a sigmoid, "recon." stays linear).
pub(crate) fn build_decoder(ctx: &mut NetCtx<'_, '_>, prefix: &str, levels: &[Var], sigmoid_out: bool) -> Var {
    let mut h = ctx.conv_relu(&format!("{prefix}bridge.conv"), levels[4], 1, 1);
    for k in (1..=4).rev() {
        h = ops::upsample2(ctx.g, h);
        let skip = ctx.conv_relu(&format!("{prefix}up{k}.skip"), levels[k - 1], 1, 0);
        let cat = ops::concat_ch(ctx.g, h, skip);
        h = ctx.conv_relu(&format!("{prefix}up{k}.conv1"), cat, 1, 1);
        h = ctx.conv_relu(&format!("{prefix}up{k}.conv2"), h, 1, 1);
    }
    let out = ctx.conv(&format!("{prefix}out"), h, 1, 0);
    if sigmoid_out {
        ops::sigmoid(ctx.g, out)
    } else {
        out
    }
}

/// Classifier over the deepest level: GAP, two hidden layers, softmax [N,3].
pub(crate) fn build_classifier(ctx: &mut NetCtx<'_, '_>, levels: &[Var]) -> Var {
    let pooled = ops::gap(ctx.g, levels[4]);
    let h = ctx.fc("cls.fc1", pooled);
    let h = ops::relu(ctx.g, h);
    let h = ctx.fc("cls.fc2", h);
    let h = ops::relu(ctx.g, h);
    let logits = ctx.fc("cls.fc3", h);
    ops::softmax_rows(ctx.g, logits)
}

pub(crate) fn require_prefix(store: &ParameterStore, prefix: &str, what: &str) -> Result<(), NetError> {
    if store.has_prefix(prefix) {
        Ok(())
    } else {
        Err(NetError::State(format!("store has no {what} parameters ('{prefix}*')")))
    }
}

pub(crate) fn check_pyramid(store: &ParameterStore, pyramid: &FeaturePyramid) -> Result<(), NetError> {
    let s = store.spec.input_size;
    if pyramid.input_size != s || pyramid.levels.len() != 5 {
        return Err(NetError::Argument(format!(
            "pyramid does not match backbone: input {} vs {}, {} levels",
            pyramid.input_size,
            s,
            pyramid.levels.len()
        )));
    }
    for (k, level) in pyramid.levels.iter().enumerate() {
        let side = s / PYRAMID_STRIDES[k];
        let want = [store.spec.stage_channels[k], side, side];
        if level.shape() != want {
            return Err(NetError::Argument(format!(
                "pyramid level {k}: shape {:?}, expected {:?}",
                level.shape(),
                want
            )));
        }
    }
    Ok(())
}

/// Lifts a [C,h,w] pyramid level into a single-sample graph leaf [1,C,h,w].
pub(crate) fn level_leaf(g: &mut Graph<'_>, level: &ArrayD<f64>) -> Var {
    let mut arr = level.clone();
    arr = arr.insert_axis(Axis(0));
    g.leaf_owned(arr, false)
}

/// Runs the shared encoder on one preprocessed image.
pub fn encode(store: &ParameterStore, image: &Array2<f64>) -> Result<FeaturePyramid, NetError> {
    let s = store.spec.input_size;
    if image.dim() != (s, s) {
        return Err(NetError::Argument(format!(
            "image is {:?}, backbone expects {s}x{s}",
            image.dim()
        )));
    }
    require_prefix(store, "encoder.", "encoder")?;
    let mut g = Graph::inference();
    let x = g.leaf_owned(
        image
            .to_owned()
            .into_shape_with_order(IxDyn(&[1, 1, s, s]))
            .expect("image reshape"),
        false,
    );
    let levels = {
        let mut ctx = NetCtx::new(&mut g, store, false);
        build_encoder(&mut ctx, x)
    };
    let maps = levels
        .iter()
        .map(|v| g.val(*v).index_axis(Axis(0), 0).to_owned())
        .collect();
    Ok(FeaturePyramid { levels: maps, input_size: s })
}

/// Segmentation decode: per-pixel lesion probability in (0,1).
pub fn decode_seg(store: &ParameterStore, pyramid: &FeaturePyramid) -> Result<Array2<f64>, NetError> {
    require_prefix(store, "seg.", "segmentation head")?;
    decode_map(store, pyramid, "seg.", true)
}

/// Reconstruction decode: unconstrained linear output.
pub fn decode_recon(store: &ParameterStore, pyramid: &FeaturePyramid) -> Result<Array2<f64>, NetError> {
    require_prefix(store, "recon.", "reconstruction head")?;
    decode_map(store, pyramid, "recon.", false)
}

fn decode_map(
    store: &ParameterStore,
    pyramid: &FeaturePyramid,
    prefix: &str,
    sigmoid_out: bool,
) -> Result<Array2<f64>, NetError> {
    check_pyramid(store, pyramid)?;
    let s = store.spec.input_size;
    let mut g = Graph::inference();
    let levels: Vec<Var> = pyramid.levels.iter().map(|l| level_leaf(&mut g, l)).collect();
    let out = {
        let mut ctx = NetCtx::new(&mut g, store, false);
        build_decoder(&mut ctx, prefix, &levels, sigmoid_out)
    };
    let arr = g
        .val(out)
        .to_owned()
        .into_shape_with_order((s, s))
        .expect("decoder output reshape");
    Ok(arr)
}

/// Class probabilities for the three-way label; sums to one.
pub fn decode_cls(store: &ParameterStore, pyramid: &FeaturePyramid) -> Result<[f64; 3], NetError> {
    require_prefix(store, "cls.", "classification head")?;
    check_pyramid(store, pyramid)?;
    let mut g = Graph::inference();
    let levels: Vec<Var> = pyramid.levels.iter().map(|l| level_leaf(&mut g, l)).collect();
    let probs = {
        let mut ctx = NetCtx::new(&mut g, store, false);
        build_classifier(&mut ctx, &levels)
    };
    let row = g.val(probs);
    Ok([row[[0, 0]], row[[0, 1]], row[[0, 2]]])
}
