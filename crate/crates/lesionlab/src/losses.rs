//! Task losses: categorical cross-entropy, generalized Dice, reconstruction
//! error, the detection loss bundle, and the weighted total. Pure functions
//! compute values from plain arrays; graph wrappers with closed-form
//! backwards drive training.

use crate::nets::graph::{Graph, Var};
use crate::nets::ops;
use crate::nets::DetTrainVars;
use ndarray::{Array1, Array2, Array3, ArrayD, Dimension};
use serde::{Deserialize, Serialize};

/// Probabilities below this are clamped before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Stabilizer in the generalized Dice denominator and class weights.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Per-task weights for the composite loss; each must be 0 or 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskWeights {
    pub w_classif: f64,
    pub w_segm: f64,
    pub w_recon: f64,
    pub w_detect: f64,
}

impl TaskWeights {
    pub fn new(w_classif: f64, w_segm: f64, w_recon: f64, w_detect: f64) -> Result<TaskWeights, LossError> {
        let w = TaskWeights { w_classif, w_segm, w_recon, w_detect };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("w_classif", self.w_classif),
            ("w_segm", self.w_segm),
            ("w_recon", self.w_recon),
            ("w_detect", self.w_detect),
        ] {
            if v != 0.0 && v != 1.0 {
                return Err(LossError::Argument(format!("{name} must be 0 or 1, got {v}")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w_classif, self.w_segm, self.w_recon, self.w_detect]
    }
}

/// Optional per-task loss values feeding [`total_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskLosses {
    pub l_classif: Option<f64>,
    pub l_segm: Option<f64>,
    pub l_recon: Option<f64>,
    pub l_detect: Option<f64>,
}

/// Component losses plus their weighted total. A component may be absent
/// only when its weight is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_classif: Option<f64>,
    pub l_segm: Option<f64>,
    pub l_recon: Option<f64>,
    pub l_detect: Option<f64>,
    pub l_total: f64,
}

/// Weighted sum of the active task losses. Every component with weight one
/// must be present, finite, and nonnegative; terms accumulate in task order
/// (classification, segmentation, reconstruction, detection).
pub fn total_loss(weights: &TaskWeights, losses: &TaskLosses) -> Result<LossBundle, LossError> {
    weights.validate()?;
    let pairs = [
        ("l_classif", weights.w_classif, losses.l_classif),
        ("l_segm", weights.w_segm, losses.l_segm),
        ("l_recon", weights.w_recon, losses.l_recon),
        ("l_detect", weights.w_detect, losses.l_detect),
    ];
    let mut total = 0.0;
    for (name, w, l) in pairs {
        match l {
            Some(v) if !v.is_finite() || v < 0.0 => {
                return Err(LossError::Argument(format!("{name} must be finite and nonnegative, got {v}")));
            }
            Some(v) => {
                if w == 1.0 {
                    total += v;
                }
            }
            None if w == 1.0 => {
                return Err(LossError::Argument(format!("{name} has weight 1 but no value")));
            }
            None => {}
        }
    }
    Ok(LossBundle {
        l_classif: losses.l_classif,
        l_segm: losses.l_segm,
        l_recon: losses.l_recon,
        l_detect: losses.l_detect,
        l_total: total,
    })
}

/// Categorical cross-entropy of a probability vector against a class index.
/// Probabilities are clamped at 1e-7 before the log.
pub fn cce(probs: &[f64], target: usize) -> Result<f64, LossError> {
    if probs.is_empty() {
        return Err(LossError::Argument("empty probability vector".into()));
    }
    if target >= probs.len() {
        return Err(LossError::Argument(format!(
            "target {target} out of range for {} classes",
            probs.len()
        )));
    }
    let p = probs[target];
    if !p.is_finite() {
        return Err(LossError::Argument(format!("probability for class {target} is {p}")));
    }
    Ok(-p.max(PROB_CLAMP).ln())
}

/// Two-class generalized Dice loss with squared-inverse-volume class
/// weights: 1 - 2N / (D + eps), where N and D are the weighted overlap and
/// mass sums over the lesion and background classes, and eps also guards
/// each class weight denominator.
pub fn generalized_dice(pred: &Array2<f64>, target: &Array2<u8>) -> Result<f64, LossError> {
    if pred.dim() != target.dim() {
        return Err(LossError::Argument(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dim(),
            target.dim()
        )));
    }
    if target.iter().any(|&t| t > 1) {
        return Err(LossError::Argument("target mask must be binary".into()));
    }
    if pred.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(LossError::Argument("predictions must lie in [0,1]".into()));
    }
    let (n, d, _, _) = dice_terms(pred, target);
    Ok(1.0 - 2.0 * n / (d + DICE_EPS))
}

/// Weighted numerator and denominator of the Dice score, plus the class
/// weights, shared by the pure loss and the graph backward.
fn dice_terms(pred: &Array2<f64>, target: &Array2<u8>) -> (f64, f64, f64, f64) {
    let total = pred.len() as f64;
    let mut lesion_count = 0.0;
    let mut lesion_pred = 0.0;
    let mut pred_sum = 0.0;
    for (&p, &r) in pred.iter().zip(target.iter()) {
        pred_sum += p;
        if r == 1 {
            lesion_count += 1.0;
            lesion_pred += p;
        }
    }
    let bg_count = total - lesion_count;
    let w_l = 1.0 / (lesion_count * lesion_count + DICE_EPS);
    let w_b = 1.0 / (bg_count * bg_count + DICE_EPS);
    let n = w_l * lesion_pred + w_b * (bg_count - (pred_sum - lesion_pred));
    let d = w_l * (lesion_count + pred_sum) + w_b * (bg_count + (total - pred_sum));
    (n, d, w_l, w_b)
}

/// Mean squared error between two same-shape arrays.
pub fn mse<D: Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> Result<f64, LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::Argument(format!(
            "shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(LossError::Argument("empty arrays".into()));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Smooth L1 with unit transition point.
pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn bce_with_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row cross-entropy on logits: log-sum-exp minus the target logit.
fn ce_logits_row(row: &[f64], class: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - row[class]
}

/// Raw detection head outputs for one image, at anchor and RoI granularity.
#[derive(Clone, Debug)]
pub struct DetectionPrediction {
    /// Objectness logit per anchor, [A].
    pub rpn_obj_logits: Array1<f64>,
    /// Anchor box deltas, [A,4].
    pub rpn_box_deltas: Array2<f64>,
    /// RoI class logits (background plus three classes), [R,4].
    pub head_cls_logits: Array2<f64>,
    /// Class-agnostic RoI box deltas, [R,4].
    pub head_box_deltas: Array2<f64>,
    /// RoI mask logits, [R,M,M].
    pub mask_logits: Array3<f64>,
}

/// Matching targets. RPN labels are 1 (positive), 0 (negative), or -1
/// (ignored); box and mask rows are read only where their RoI is foreground.
#[derive(Clone, Debug)]
pub struct DetectionTarget {
    pub rpn_labels: Array1<f64>,
    pub rpn_box_targets: Array2<f64>,
    /// Per-RoI class, 0 meaning background.
    pub roi_classes: Vec<usize>,
    pub roi_box_targets: Array2<f64>,
    pub roi_mask_targets: Array3<f64>,
}

/// The three detection components and their exact sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionLossBundle {
    /// Objectness binary cross-entropy plus RoI-head class cross-entropy.
    pub l_rpn_and_head_classif: f64,
    /// Smooth-L1 box regression over positive anchors and foreground RoIs.
    pub l_bbox: f64,
    /// Binary cross-entropy over foreground RoI masks.
    pub l_mask: f64,
    /// Exactly the sum of the three components.
    pub l_detect: f64,
}

impl DetectionLossBundle {
    fn from_components(classif: f64, bbox: f64, mask: f64) -> DetectionLossBundle {
        DetectionLossBundle {
            l_rpn_and_head_classif: classif,
            l_bbox: bbox,
            l_mask: mask,
            l_detect: classif + bbox + mask,
        }
    }
}

/// Detection loss over one image's predictions and targets. Classification
/// terms average over non-ignored anchors and over all RoIs; regression and
/// mask terms average over positives only and are zero when there are none.
pub fn detection_loss(pred: &DetectionPrediction, target: &DetectionTarget) -> Result<DetectionLossBundle, LossError> {
    let a = pred.rpn_obj_logits.len();
    if target.rpn_labels.len() != a || pred.rpn_box_deltas.dim() != (a, 4) || target.rpn_box_targets.dim() != (a, 4) {
        return Err(LossError::Argument("anchor-level shapes disagree".into()));
    }
    let r = pred.head_cls_logits.nrows();
    if pred.head_cls_logits.ncols() != 4
        || pred.head_box_deltas.dim() != (r, 4)
        || target.roi_classes.len() != r
        || target.roi_box_targets.dim() != (r, 4)
        || pred.mask_logits.dim().0 != r
        || target.roi_mask_targets.dim() != pred.mask_logits.dim()
    {
        return Err(LossError::Argument("roi-level shapes disagree".into()));
    }
    if target.rpn_labels.iter().any(|&l| l != 1.0 && l != 0.0 && l != -1.0) {
        return Err(LossError::Argument("rpn labels must be 1, 0, or -1".into()));
    }
    if target.roi_classes.iter().any(|&c| c >= 4) {
        return Err(LossError::Argument("roi classes must be below 4".into()));
    }

    // Objectness over non-ignored anchors.
    let mut obj_sum = 0.0;
    let mut obj_n = 0usize;
    for (x, &l) in pred.rpn_obj_logits.iter().zip(target.rpn_labels.iter()) {
        if l >= 0.0 {
            obj_sum += bce_with_logits(*x, l);
            obj_n += 1;
        }
    }
    let l_obj = if obj_n == 0 { 0.0 } else { obj_sum / obj_n as f64 };

    // RoI class cross-entropy over every RoI.
    let mut ce_sum = 0.0;
    for (row, &class) in pred.head_cls_logits.outer_iter().zip(target.roi_classes.iter()) {
        ce_sum += ce_logits_row(row.as_slice().expect("row contiguous"), class);
    }
    let l_head_ce = if r == 0 { 0.0 } else { ce_sum / r as f64 };
    let l_classif = l_obj + l_head_ce;

    // Box regression: positive anchors, then foreground RoIs.
    let mut rpn_box_sum = 0.0;
    let mut rpn_pos = 0usize;
    for (i, &l) in target.rpn_labels.iter().enumerate() {
        if l == 1.0 {
            for c in 0..4 {
                rpn_box_sum += smooth_l1(pred.rpn_box_deltas[[i, c]] - target.rpn_box_targets[[i, c]]);
            }
            rpn_pos += 1;
        }
    }
    let mut head_box_sum = 0.0;
    let mut fg = 0usize;
    for (i, &class) in target.roi_classes.iter().enumerate() {
        if class > 0 {
            for c in 0..4 {
                head_box_sum += smooth_l1(pred.head_box_deltas[[i, c]] - target.roi_box_targets[[i, c]]);
            }
            fg += 1;
        }
    }
    let l_bbox = (if rpn_pos == 0 { 0.0 } else { rpn_box_sum / rpn_pos as f64 })
        + (if fg == 0 { 0.0 } else { head_box_sum / fg as f64 });

    // Masks over foreground RoIs.
    let m = pred.mask_logits.dim().1;
    let mut mask_sum = 0.0;
    for (i, &class) in target.roi_classes.iter().enumerate() {
        if class == 0 {
            continue;
        }
        for y in 0..m {
            for x in 0..m {
                let t = target.roi_mask_targets[[i, y, x]];
                if t != 0.0 && t != 1.0 {
                    return Err(LossError::Argument("mask targets must be binary".into()));
                }
                mask_sum += bce_with_logits(pred.mask_logits[[i, y, x]], t);
            }
        }
    }
    let l_mask = if fg == 0 { 0.0 } else { mask_sum / (fg * m * m) as f64 };

    Ok(DetectionLossBundle::from_components(l_classif, l_bbox, l_mask))
}

fn zero_scalar(g: &mut Graph<'_>) -> Var {
    g.leaf_owned(ndarray::arr0(0.0).into_dyn(), false)
}

/// Records a scalar node whose gradient to its single parent is computed
/// from the parent's value and the incoming scalar gradient.
fn scalar_node(g: &mut Graph<'_>, value: f64, parent: Var, back: impl Fn(&ArrayD<f64>, f64) -> ArrayD<f64> + 'static) -> Var {
    let pid = parent.0;
    g.push(ndarray::arr0(value).into_dyn(), &[parent], move |vals, dy, grads| {
        let x: &ArrayD<f64> = &vals[pid];
        grads.add(pid, back(x, dy.sum()));
    })
}

/// Graph categorical cross-entropy of one probability row [K].
pub(crate) fn cce_graph(g: &mut Graph<'_>, probs: Var, target: usize) -> Var {
    let p = g.val(probs)[[target]];
    let value = -p.max(PROB_CLAMP).ln();
    let shape = g.val(probs).raw_dim();
    scalar_node(
        g,
        value,
        probs,
        move |x, scale| {
            let mut dx = ArrayD::zeros(shape.clone());
            let pt = x[[target]];
            if pt > PROB_CLAMP {
                dx[[target]] = -scale / pt;
            }
            dx
        },
    )
}

/// Graph generalized Dice loss against a fixed binary mask.
pub(crate) fn generalized_dice_graph(g: &mut Graph<'_>, probs: Var, target: &Array2<u8>) -> Var {
    let pred2 = g
        .val(probs)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("dice prediction must be 2-d")
        .to_owned();
    assert_eq!(pred2.dim(), target.dim(), "dice shapes disagree");
    let (n, d, _, _) = dice_terms(&pred2, target);
    let value = 1.0 - 2.0 * n / (d + DICE_EPS);
    let target = target.clone();
    scalar_node(
        g,
        value,
        probs,
        move |x, scale| {
            let x2 = x.view().into_dimensionality::<ndarray::Ix2>().expect("2-d").to_owned();
            let (n, d, w_l, w_b) = dice_terms(&x2, &target);
            let denom = d + DICE_EPS;
            let dd = w_l - w_b;
            let mut dx = ArrayD::zeros(x.raw_dim());
            for (dst, &r) in dx.iter_mut().zip(target.iter()) {
                let dn = if r == 1 { w_l } else { -w_b };
                *dst = scale * (-2.0) * (dn * denom - n * dd) / (denom * denom);
            }
            dx
        },
    )
}

/// Graph mean squared error against a fixed target of the same shape.
pub(crate) fn mse_graph(g: &mut Graph<'_>, pred: Var, target: &ArrayD<f64>) -> Var {
    assert_eq!(g.val(pred).shape(), target.shape(), "mse shapes disagree");
    let n = target.len() as f64;
    let mut acc = 0.0;
    for (p, t) in g.val(pred).iter().zip(target.iter()) {
        let d = p - t;
        acc += d * d;
    }
    let target = target.clone();
    scalar_node(
        g,
        acc / n,
        pred,
        move |x, scale| {
            let mut dx = x.clone();
            dx.zip_mut_with(&target, |v, t| *v = scale * 2.0 * (*v - t) / n);
            dx
        },
    )
}

/// Graph mean of binary cross-entropy with logits over all elements.
pub(crate) fn bce_logits_mean_graph(g: &mut Graph<'_>, logits: Var, targets: &ArrayD<f64>) -> Var {
    assert_eq!(g.val(logits).shape(), targets.shape(), "bce shapes disagree");
    if targets.is_empty() {
        return zero_scalar(g);
    }
    let n = targets.len() as f64;
    let mut acc = 0.0;
    for (x, t) in g.val(logits).iter().zip(targets.iter()) {
        acc += bce_with_logits(*x, *t);
    }
    let targets = targets.clone();
    scalar_node(
        g,
        acc / n,
        logits,
        move |x, scale| {
            let mut dx = x.clone();
            dx.zip_mut_with(&targets, |v, t| *v = scale * (sigmoid(*v) - t) / n);
            dx
        },
    )
}

/// Graph mean cross-entropy with logits over rows of [R,K].
pub(crate) fn ce_rows_mean_graph(g: &mut Graph<'_>, logits: Var, classes: &[usize]) -> Var {
    let arr = g
        .val(logits)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("logits must be 2-d")
        .to_owned();
    assert_eq!(arr.nrows(), classes.len(), "row/class counts disagree");
    if classes.is_empty() {
        return zero_scalar(g);
    }
    let r = classes.len() as f64;
    let mut acc = 0.0;
    for (row, &class) in arr.outer_iter().zip(classes.iter()) {
        acc += ce_logits_row(row.as_slice().expect("row contiguous"), class);
    }
    let classes = classes.to_vec();
    scalar_node(
        g,
        acc / r,
        logits,
        move |x, scale| {
            let x2 = x.view().into_dimensionality::<ndarray::Ix2>().expect("2-d");
            let mut dx = ndarray::Array2::<f64>::zeros(x2.dim());
            for (i, (row, &class)) in x2.outer_iter().zip(classes.iter()).enumerate() {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    let soft = e / sum;
                    dx[[i, j]] = scale * (soft - f64::from(j == class)) / r;
                }
            }
            dx.into_dyn()
        },
    )
}

/// Graph smooth-L1: coordinates summed per row, averaged over rows [P,4].
pub(crate) fn smooth_l1_rows_mean_graph(g: &mut Graph<'_>, pred: Var, targets: &Array2<f64>) -> Var {
    let arr = g
        .val(pred)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("pred must be 2-d")
        .to_owned();
    assert_eq!(arr.dim(), targets.dim(), "smooth-l1 shapes disagree");
    if targets.nrows() == 0 {
        return zero_scalar(g);
    }
    let p = targets.nrows() as f64;
    let mut acc = 0.0;
    for (x, t) in arr.iter().zip(targets.iter()) {
        acc += smooth_l1(x - t);
    }
    let targets = targets.clone().into_dyn();
    scalar_node(
        g,
        acc / p,
        pred,
        move |x, scale| {
            let mut dx = x.clone();
            dx.zip_mut_with(&targets, |v, t| {
                let d = *v - t;
                *v = scale * d.clamp(-1.0, 1.0) / p;
            });
            dx
        },
    )
}

/// Detection loss components as graph nodes. The sub-components exist for
/// diagnostics; training consumes only the combined value.
#[allow(dead_code)]
pub(crate) struct DetLossVars {
    pub l_classif: Var,
    pub l_bbox: Var,
    pub l_mask: Var,
    pub l_detect: Var,
}

/// Assembles the detection loss over one image's training vars: objectness
/// and RoI-class cross-entropies, positive-only box regression, and
/// foreground mask cross-entropy, summed in that order.
pub(crate) fn detection_loss_graph(g: &mut Graph<'_>, vars: &DetTrainVars) -> DetLossVars {
    let obj_targets = vars.obj_targets.clone().into_dyn();
    let l_obj = bce_logits_mean_graph(g, vars.obj_logits, &obj_targets);
    let l_ce = ce_rows_mean_graph(g, vars.head_cls_logits, &vars.roi_classes);
    let l_classif = ops::add(g, l_obj, l_ce);

    let l_rpn_box = smooth_l1_rows_mean_graph(g, vars.rpn_box_pred, &vars.rpn_box_targets);
    let l_head_box = smooth_l1_rows_mean_graph(g, vars.head_box_pred, &vars.head_box_targets);
    let l_bbox = ops::add(g, l_rpn_box, l_head_box);

    let mask_targets = vars.mask_targets.clone().into_dyn();
    let l_mask = bce_logits_mean_graph(g, vars.mask_logits, &mask_targets);

    let partial = ops::add(g, l_classif, l_bbox);
    let l_detect = ops::add(g, partial, l_mask);
    DetLossVars { l_classif, l_bbox, l_mask, l_detect }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::graph::Graph;
    use ndarray::{arr2, Array2, Array3, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cce_fixtures() {
        let uniform = [1.0 / 3.0; 3];
        assert!((cce(&uniform, 0).unwrap() - 3.0f64.ln()).abs() < 1e-12);
        assert!((cce(&[0.7, 0.2, 0.1], 1).unwrap() + 0.2f64.ln()).abs() < 1e-12);
        assert!(matches!(cce(&[0.5, 0.5], 2), Err(LossError::Argument(_))));
        assert!(matches!(cce(&[], 0), Err(LossError::Argument(_))));
        // Clamped at 1e-7.
        assert!((cce(&[1.0, 0.0], 1).unwrap() - (-PROB_CLAMP.ln())).abs() < 1e-12);
    }

    #[test]
    fn generalized_dice_frozen_fixture() {
        // 4x4, three lesion pixels, constant 0.5 prediction. Value frozen
        // from the two-class double-summation formula.
        let mut target = Array2::<u8>::zeros((4, 4));
        target[[0, 0]] = 1;
        target[[1, 2]] = 1;
        target[[3, 3]] = 1;
        let pred = Array2::from_elem((4, 4), 0.5);
        let got = generalized_dice(&pred, &target).unwrap();
        assert!((got - 0.6953127232321265).abs() < 1e-12, "{got}");
    }

    #[test]
    fn generalized_dice_extremes() {
        // Perfect overlap on a single-pixel lesion sits within 1e-6 of zero.
        let mut target = Array2::<u8>::zeros((4, 4));
        target[[2, 1]] = 1;
        let pred = target.mapv(f64::from);
        assert!(generalized_dice(&pred, &target).unwrap() < 1e-6);
        // The exact complement scores exactly one.
        let complement = target.mapv(|t| 1.0 - f64::from(t));
        assert_eq!(generalized_dice(&complement, &target).unwrap(), 1.0);
    }

    #[test]
    fn generalized_dice_rejects_bad_input() {
        let pred = Array2::from_elem((4, 4), 0.5);
        let target = Array2::<u8>::zeros((4, 5));
        assert!(matches!(generalized_dice(&pred, &target), Err(LossError::Argument(_))));
        let bad = Array2::from_elem((4, 4), 1.5);
        assert!(matches!(
            generalized_dice(&bad, &Array2::<u8>::zeros((4, 4))),
            Err(LossError::Argument(_))
        ));
    }

    /// Literal transcription of the two-class formula, classwise loops.
    fn dice_oracle(pred: &Array2<f64>, target: &Array2<u8>) -> f64 {
        let eps = 1e-6;
        let mut num = 0.0;
        let mut den = 0.0;
        for class in 0..2u8 {
            let mut r_sum = 0.0;
            for &t in target.iter() {
                if t == class {
                    r_sum += 1.0;
                }
            }
            let w = 1.0 / (r_sum * r_sum + eps);
            let mut overlap = 0.0;
            let mut mass = 0.0;
            for (&p, &t) in pred.iter().zip(target.iter()) {
                let r = f64::from(t == class);
                let pc = if class == 1 { p } else { 1.0 - p };
                overlap += r * pc;
                mass += r + pc;
            }
            num += w * overlap;
            den += w * mass;
        }
        1.0 - 2.0 * num / (den + eps)
    }

    #[test]
    fn generalized_dice_matches_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let pred = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..=1.0));
            let target = Array2::from_shape_fn((8, 8), |_| u8::from(rng.random_range(0.0..1.0) < 0.2));
            let got = generalized_dice(&pred, &target).unwrap();
            let want = dice_oracle(&pred, &target);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn mse_value_and_shape_check() {
        let a = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = arr2(&[[1.0, 2.5], [2.0, 4.0]]);
        assert!((mse(&a, &b).unwrap() - (0.25 + 1.0) / 4.0).abs() < 1e-12);
        let c = arr2(&[[1.0, 2.0, 3.0]]);
        assert!(matches!(mse(&a, &c), Err(LossError::Argument(_))));
    }

    #[test]
    fn total_loss_weighted_sum_and_validation() {
        let w = TaskWeights::new(1.0, 0.0, 1.0, 0.0).unwrap();
        let losses = TaskLosses { l_classif: Some(0.5), l_recon: Some(0.1), ..Default::default() };
        let bundle = total_loss(&w, &losses).unwrap();
        assert!((bundle.l_total - 0.6).abs() < 1e-15);
        assert_eq!(bundle.l_classif, Some(0.5));
        assert_eq!(bundle.l_segm, None);

        // Weight one with a missing component.
        let missing = TaskLosses { l_classif: Some(0.5), ..Default::default() };
        assert!(matches!(total_loss(&w, &missing), Err(LossError::Argument(_))));

        // Inactive components do not contribute.
        let extra = TaskLosses {
            l_classif: Some(0.5),
            l_segm: Some(9.0),
            l_recon: Some(0.1),
            l_detect: None,
        };
        assert!((total_loss(&w, &extra).unwrap().l_total - 0.6).abs() < 1e-15);

        assert!(TaskWeights::new(0.5, 0.0, 1.0, 0.0).is_err());
        let negative = TaskLosses { l_classif: Some(-0.1), l_recon: Some(0.1), ..Default::default() };
        assert!(matches!(total_loss(&w, &negative), Err(LossError::Argument(_))));
    }

    fn perfect_fixture() -> (DetectionPrediction, DetectionTarget) {
        let a = 6;
        let mut rpn_labels = Array1::from_elem(a, 0.0);
        rpn_labels[2] = 1.0;
        rpn_labels[5] = -1.0;
        let mut rpn_obj = Array1::from_elem(a, -12.0);
        rpn_obj[2] = 12.0;
        let mut rpn_box_targets = Array2::zeros((a, 4));
        for c in 0..4 {
            rpn_box_targets[[2, c]] = 0.3 * (c as f64 + 1.0);
        }
        let rpn_box_deltas = rpn_box_targets.clone();

        let roi_classes = vec![2usize, 0];
        let mut head_cls = Array2::from_elem((2, 4), -10.0);
        head_cls[[0, 2]] = 10.0;
        head_cls[[1, 0]] = 10.0;
        let mut roi_box_targets = Array2::zeros((2, 4));
        roi_box_targets[[0, 1]] = -0.2;
        let head_box_deltas = roi_box_targets.clone();

        let m = 4;
        let mut mask_targets = Array3::zeros((2, m, m));
        for y in 1..3 {
            for x in 1..3 {
                mask_targets[[0, y, x]] = 1.0;
            }
        }
        let mask_logits = mask_targets.mapv(|t| if t == 1.0 { 12.0 } else { -12.0 });

        (
            DetectionPrediction {
                rpn_obj_logits: rpn_obj,
                rpn_box_deltas,
                head_cls_logits: head_cls,
                head_box_deltas,
                mask_logits,
            },
            DetectionTarget {
                rpn_labels,
                rpn_box_targets,
                roi_classes,
                roi_box_targets,
                roi_mask_targets: mask_targets,
            },
        )
    }

    #[test]
    fn detection_loss_near_zero_for_perfect_predictions() {
        let (pred, target) = perfect_fixture();
        let bundle = detection_loss(&pred, &target).unwrap();
        assert!(bundle.l_detect <= 1e-3, "{bundle:?}");
        assert_eq!(bundle.l_bbox, 0.0);
        assert_eq!(
            bundle.l_detect,
            bundle.l_rpn_and_head_classif + bundle.l_bbox + bundle.l_mask
        );
    }

    #[test]
    fn detection_loss_zero_positives_and_empty_gt() {
        // All anchors negative, zero RoIs: only the objectness term remains.
        let a = 4;
        let pred = DetectionPrediction {
            rpn_obj_logits: Array1::from_elem(a, -1.0),
            rpn_box_deltas: Array2::zeros((a, 4)),
            head_cls_logits: Array2::zeros((0, 4)),
            head_box_deltas: Array2::zeros((0, 4)),
            mask_logits: Array3::zeros((0, 4, 4)),
        };
        let target = DetectionTarget {
            rpn_labels: Array1::from_elem(a, 0.0),
            rpn_box_targets: Array2::zeros((a, 4)),
            roi_classes: vec![],
            roi_box_targets: Array2::zeros((0, 4)),
            roi_mask_targets: Array3::zeros((0, 4, 4)),
        };
        let bundle = detection_loss(&pred, &target).unwrap();
        assert_eq!(bundle.l_bbox, 0.0);
        assert_eq!(bundle.l_mask, 0.0);
        assert!((bundle.l_rpn_and_head_classif - bce_with_logits(-1.0, 0.0)).abs() < 1e-12);
        assert_eq!(bundle.l_detect, bundle.l_rpn_and_head_classif);
    }

    #[test]
    fn detection_loss_rejects_bad_labels() {
        let (pred, mut target) = perfect_fixture();
        target.rpn_labels[0] = 0.5;
        assert!(matches!(detection_loss(&pred, &target), Err(LossError::Argument(_))));
        let (pred, mut target) = perfect_fixture();
        target.roi_classes[0] = 7;
        assert!(matches!(detection_loss(&pred, &target), Err(LossError::Argument(_))));
    }

    /// Finite-difference check of a scalar graph loss against one input.
    fn fd_check(build: impl Fn(&mut Graph<'_>, crate::nets::graph::Var) -> crate::nets::graph::Var, x: &ArrayD<f64>, tol: f64) {
        let mut g = Graph::recording();
        let xv = g.leaf(x, true);
        let loss = build(&mut g, xv);
        let mut grads = g.backward(loss);
        let analytic = grads.take(xv).expect("gradient flows to input");
        for i in 0..x.len() {
            let h = 1e-6;
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.as_slice_mut().unwrap()[i] += delta;
                let mut g = Graph::recording();
                let xv = g.leaf_owned(xp, false);
                let loss = build(&mut g, xv);
                g.scalar(loss)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                ((a - numeric).abs() / denom) < tol || (a - numeric).abs() < 1e-9,
                "index {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn graph_losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let probs = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.6, 0.3, 0.1]).unwrap();
        fd_check(|g, v| cce_graph(g, v, 1), &probs, 1e-6);

        let target = Array2::from_shape_fn((4, 4), |(y, x)| u8::from((y + x) % 3 == 0));
        let pred = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| rng.random_range(0.05..0.95));
        fd_check(move |g, v| generalized_dice_graph(g, v, &target), &pred, 1e-6);

        let tgt = ArrayD::from_shape_fn(IxDyn(&[3, 3]), |_| rng.random_range(-1.0..1.0));
        let pred = ArrayD::from_shape_fn(IxDyn(&[3, 3]), |_| rng.random_range(-1.0..1.0));
        fd_check(move |g, v| mse_graph(g, v, &tgt), &pred, 1e-6);

        let bt = ArrayD::from_shape_fn(IxDyn(&[5]), |_| f64::from(rng.random_range(0.0..1.0) < 0.5));
        let logits = ArrayD::from_shape_fn(IxDyn(&[5]), |_| rng.random_range(-2.0..2.0));
        fd_check(move |g, v| bce_logits_mean_graph(g, v, &bt), &logits, 1e-6);

        let classes = vec![0usize, 2, 1];
        let logits = ArrayD::from_shape_fn(IxDyn(&[3, 4]), |_| rng.random_range(-2.0..2.0));
        fd_check(move |g, v| ce_rows_mean_graph(g, v, &classes), &logits, 1e-6);

        let st = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
        let pred = ArrayD::from_shape_fn(IxDyn(&[3, 4]), |_| rng.random_range(-2.0..2.0));
        fd_check(move |g, v| smooth_l1_rows_mean_graph(g, v, &st), &pred, 1e-5);
    }

    #[test]
    fn graph_and_pure_detection_losses_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = 10;
        let rpn_labels = Array1::from_shape_fn(a, |i| [1.0, 0.0, -1.0][i % 3]);
        let rpn_obj = Array1::from_shape_fn(a, |_| rng.random_range(-2.0..2.0));
        let rpn_box_targets = Array2::from_shape_fn((a, 4), |_| rng.random_range(-1.0..1.0));
        let rpn_box_deltas = Array2::from_shape_fn((a, 4), |_| rng.random_range(-1.0..1.0));
        let roi_classes = vec![2usize, 0, 1, 3];
        let r = roi_classes.len();
        let head_cls = Array2::from_shape_fn((r, 4), |_| rng.random_range(-2.0..2.0));
        let head_box_deltas = Array2::from_shape_fn((r, 4), |_| rng.random_range(-1.0..1.0));
        let roi_box_targets = Array2::from_shape_fn((r, 4), |_| rng.random_range(-1.0..1.0));
        let m = 3;
        let mask_logits = Array3::from_shape_fn((r, m, m), |_| rng.random_range(-2.0..2.0));
        let roi_mask_targets = Array3::from_shape_fn((r, m, m), |_| f64::from(rng.random_range(0.0..1.0) < 0.4));

        let pred = DetectionPrediction {
            rpn_obj_logits: rpn_obj.clone(),
            rpn_box_deltas: rpn_box_deltas.clone(),
            head_cls_logits: head_cls.clone(),
            head_box_deltas: head_box_deltas.clone(),
            mask_logits: mask_logits.clone(),
        };
        let target = DetectionTarget {
            rpn_labels: rpn_labels.clone(),
            rpn_box_targets: rpn_box_targets.clone(),
            roi_classes: roi_classes.clone(),
            roi_box_targets: roi_box_targets.clone(),
            roi_mask_targets: roi_mask_targets.clone(),
        };
        let want = detection_loss(&pred, &target).unwrap();

        // Replicate the selection the training assembly performs, then feed
        // the graph variant leaves carrying the same numbers.
        let keep: Vec<usize> = (0..a).filter(|&i| rpn_labels[i] >= 0.0).collect();
        let obj_sel = Array1::from_iter(keep.iter().map(|&i| rpn_obj[i]));
        let obj_tgt = Array1::from_iter(keep.iter().map(|&i| rpn_labels[i]));
        let pos: Vec<usize> = (0..a).filter(|&i| rpn_labels[i] == 1.0).collect();
        let rpn_pred_sel = Array2::from_shape_fn((pos.len(), 4), |(p, c)| rpn_box_deltas[[pos[p], c]]);
        let rpn_tgt_sel = Array2::from_shape_fn((pos.len(), 4), |(p, c)| rpn_box_targets[[pos[p], c]]);
        let fg: Vec<usize> = (0..r).filter(|&i| roi_classes[i] > 0).collect();
        let head_pred_sel = Array2::from_shape_fn((fg.len(), 4), |(p, c)| head_box_deltas[[fg[p], c]]);
        let head_tgt_sel = Array2::from_shape_fn((fg.len(), 4), |(p, c)| roi_box_targets[[fg[p], c]]);
        let mask_sel = Array3::from_shape_fn((fg.len(), m, m), |(p, y, x)| mask_logits[[fg[p], y, x]]);
        let mask_tgt_sel = Array3::from_shape_fn((fg.len(), m, m), |(p, y, x)| roi_mask_targets[[fg[p], y, x]]);

        let mut g = Graph::recording();
        let vars = DetTrainVars {
            obj_logits: g.leaf_owned(obj_sel.into_dyn(), true),
            obj_targets: obj_tgt,
            rpn_box_pred: g.leaf_owned(rpn_pred_sel.into_dyn(), true),
            rpn_box_targets: rpn_tgt_sel,
            head_cls_logits: g.leaf_owned(head_cls.into_dyn(), true),
            roi_classes,
            head_box_pred: g.leaf_owned(head_pred_sel.into_dyn(), true),
            head_box_targets: head_tgt_sel,
            mask_logits: g.leaf_owned(mask_sel.into_dyn(), true),
            mask_targets: mask_tgt_sel,
        };
        let out = detection_loss_graph(&mut g, &vars);
        assert!((g.scalar(out.l_classif) - want.l_rpn_and_head_classif).abs() < 1e-12);
        assert!((g.scalar(out.l_bbox) - want.l_bbox).abs() < 1e-12);
        assert!((g.scalar(out.l_mask) - want.l_mask).abs() < 1e-12);
        assert!((g.scalar(out.l_detect) - want.l_detect).abs() < 1e-12);
    }
}
