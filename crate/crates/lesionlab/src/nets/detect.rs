//! Detection head: anchors and box deltas, the region proposal network, the
//! RoI classification and mask branches, inference-time decoding with NMS,
//! and the deterministic RoI assembly used during training.

use super::graph::{Graph, Var};
use super::{check_pyramid, level_leaf, ops, require_prefix, FeaturePyramid, NetCtx, NetError, ParameterStore};
use crate::datakit::{DetClass, Instance, PixelBox};
use ndarray::{Array1, Array2, Array3, Axis};

pub(crate) const NUM_ANCHORS: usize = 9;
pub(crate) const ROI_SIZE: usize = 7;
pub(crate) const MASK_SIZE: usize = 14;
pub(crate) const DET_STRIDE: usize = 16;

const PRE_NMS_TOP: usize = 144;
const PROPOSAL_NMS_IOU: f64 = 0.7;
const DETECTION_NMS_IOU: f64 = 0.5;
const MAX_PROPOSALS: usize = 32;
const MAX_DELTA_WH: f64 = 4.0;
const MIN_BOX_SIDE: f64 = 1.0;

const RPN_POSITIVE_IOU: f64 = 0.7;
const RPN_NEGATIVE_IOU: f64 = 0.3;
const ROI_BACKGROUND_IOU: f64 = 0.1;
const MAX_BACKGROUND_ROIS: usize = 8;

/// One detected instance: a real-valued box, its class, a confidence in
/// [0,1], and a binary mask covering the integer pixel region of the box.
#[derive(Clone, Debug)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub det_class: DetClass,
    pub score: f64,
    pub mask: Array2<u8>,
}

impl Detection {
    /// Integer pixel region the mask covers.
    pub fn pixel_region(&self, image_size: usize) -> PixelBox {
        box_pixel_region(&self.bbox, image_size)
    }
}

pub(crate) fn box_pixel_region(bbox: &[f64; 4], size: usize) -> PixelBox {
    let last = (size - 1) as f64;
    let x0 = bbox[0].floor().clamp(0.0, last) as u32;
    let y0 = bbox[1].floor().clamp(0.0, last) as u32;
    let x1 = (bbox[2].ceil() as i64).clamp(x0 as i64 + 1, size as i64) as u32;
    let y1 = (bbox[3].ceil() as i64).clamp(y0 as i64 + 1, size as i64) as u32;
    PixelBox { x0, y0, x1, y1 }
}

/// Anchor boxes for a grid, ordered to match the flattened [A,gh,gw] RPN
/// maps: index = anchor_kind * gh * gw + y * gw + x. Three scales (an
/// eighth, a quarter, and half the image side) times three aspect ratios.
pub(crate) fn anchor_boxes(grid_h: usize, grid_w: usize, stride: usize, image_size: usize) -> Vec<[f64; 4]> {
    let s = image_size as f64;
    let scales = [s / 8.0, s / 4.0, s / 2.0];
    let ratios = [0.5f64, 1.0, 2.0];
    let mut out = Vec::with_capacity(NUM_ANCHORS * grid_h * grid_w);
    for &scale in &scales {
        for &ratio in &ratios {
            let w = scale / ratio.sqrt();
            let h = scale * ratio.sqrt();
            for y in 0..grid_h {
                for x in 0..grid_w {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    let cy = (y as f64 + 0.5) * stride as f64;
                    out.push([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]);
                }
            }
        }
    }
    out
}

fn wh_center(b: &[f64; 4]) -> (f64, f64, f64, f64) {
    let w = (b[2] - b[0]).max(1e-6);
    let h = (b[3] - b[1]).max(1e-6);
    (w, h, b[0] + w / 2.0, b[1] + h / 2.0)
}

/// Standard (dx, dy, dw, dh) encoding of `gt` relative to `anchor`.
pub(crate) fn encode_delta(anchor: &[f64; 4], gt: &[f64; 4]) -> [f64; 4] {
    let (aw, ah, acx, acy) = wh_center(anchor);
    let (gw, gh, gcx, gcy) = wh_center(gt);
    [(gcx - acx) / aw, (gcy - acy) / ah, (gw / aw).ln(), (gh / ah).ln()]
}

/// Applies a predicted delta to an anchor; log sizes are capped before the
/// exponential so wild early predictions cannot overflow.
pub(crate) fn decode_delta(anchor: &[f64; 4], d: &[f64; 4]) -> [f64; 4] {
    let (aw, ah, acx, acy) = wh_center(anchor);
    let cx = d[0] * aw + acx;
    let cy = d[1] * ah + acy;
    let w = aw * d[2].min(MAX_DELTA_WH).exp();
    let h = ah * d[3].min(MAX_DELTA_WH).exp();
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

fn clip_box(b: &[f64; 4], size: usize) -> [f64; 4] {
    let s = size as f64;
    [b[0].clamp(0.0, s), b[1].clamp(0.0, s), b[2].clamp(0.0, s), b[3].clamp(0.0, s)]
}

fn box_side_ok(b: &[f64; 4]) -> bool {
    b[2] - b[0] >= MIN_BOX_SIDE && b[3] - b[1] >= MIN_BOX_SIDE
}

fn scale_box(b: &[f64; 4], factor: f64) -> [f64; 4] {
    let (w, h, cx, cy) = wh_center(b);
    let (nw, nh) = (w * factor, h * factor);
    [cx - nw / 2.0, cy - nh / 2.0, cx + nw / 2.0, cy + nh / 2.0]
}

fn shift_box(b: &[f64; 4], fx: f64, fy: f64) -> [f64; 4] {
    let (w, h, _, _) = wh_center(b);
    [b[0] + fx * w, b[1] + fy * h, b[2] + fx * w, b[3] + fy * h]
}

/// RPN maps over the deepest level: objectness [N,A,gh,gw], deltas [N,4A,gh,gw].
pub(crate) fn build_rpn(ctx: &mut NetCtx<'_, '_>, level4: Var) -> (Var, Var) {
    let h = ctx.conv_relu("det.rpn.conv", level4, 1, 1);
    let obj = ctx.conv("det.rpn.obj", h, 1, 0);
    let deltas = ctx.conv("det.rpn.box", h, 1, 0);
    (obj, deltas)
}

/// RoI head over pooled features [R,C,7,7]: class logits [R,4] (background
/// plus three classes) and class-agnostic box deltas [R,4].
pub(crate) fn build_det_head(ctx: &mut NetCtx<'_, '_>, roi_feats: Var) -> (Var, Var) {
    let shape = ctx.g.val(roi_feats).shape().to_vec();
    let flat = ops::reshape(ctx.g, roi_feats, &[shape[0], shape[1] * shape[2] * shape[3]]);
    let h = ctx.fc("det.head.fc1", flat);
    let h = ops::relu(ctx.g, h);
    let h = ctx.fc("det.head.fc2", h);
    let h = ops::relu(ctx.g, h);
    let cls = ctx.fc("det.head.cls", h);
    let boxes = ctx.fc("det.head.box", h);
    (cls, boxes)
}

/// Mask branch over pooled features [R,C,14,14] to logits [R,1,14,14].
pub(crate) fn build_mask_head(ctx: &mut NetCtx<'_, '_>, roi_feats: Var) -> Var {
    let h = ctx.conv_relu("det.mask.conv1", roi_feats, 1, 1);
    let h = ctx.conv_relu("det.mask.conv2", h, 1, 1);
    ctx.conv("det.mask.out", h, 1, 0)
}

fn to_feature_coords(boxes: &[[f64; 4]]) -> Vec<[f64; 4]> {
    boxes
        .iter()
        .map(|b| {
            let s = DET_STRIDE as f64;
            [b[0] / s, b[1] / s, b[2] / s, b[3] / s]
        })
        .collect()
}

fn mask_to_region(prob: &Array2<f64>, region: &PixelBox) -> Array2<u8> {
    let (mh, mw) = prob.dim();
    let h = region.height() as usize;
    let w = region.width() as usize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = (((y as f64 + 0.5) * mh as f64 / h as f64) as usize).min(mh - 1);
        let sx = (((x as f64 + 0.5) * mw as f64 / w as f64) as usize).min(mw - 1);
        u8::from(prob[[sy, sx]] >= 0.5)
    })
}

/// Runs the detection head over an encoded pyramid: proposals from the RPN,
/// NMS, RoI classification and box refinement, a second NMS over scored
/// boxes, then per-detection masks. Results come back sorted by descending
/// score, at most `max_detections` of them.
pub fn detect(
    store: &ParameterStore,
    pyramid: &FeaturePyramid,
    score_threshold: f64,
    max_detections: usize,
) -> Result<Vec<Detection>, NetError> {
    if !(0.0..=1.0).contains(&score_threshold) || !score_threshold.is_finite() {
        return Err(NetError::Argument(format!(
            "score threshold must lie in [0,1], got {score_threshold}"
        )));
    }
    require_prefix(store, "det.", "detection head")?;
    check_pyramid(store, pyramid)?;
    let size = pyramid.input_size;

    let mut g = Graph::inference();
    let l4 = level_leaf(&mut g, &pyramid.levels[4]);
    let mut ctx = NetCtx::new(&mut g, store, false);

    let (obj_v, delta_v) = build_rpn(&mut ctx, l4);
    let obj = ctx.g.val(obj_v).index_axis(Axis(0), 0).to_owned();
    let deltas = ctx.g.val(delta_v).index_axis(Axis(0), 0).to_owned();
    let (gh, gw) = (obj.shape()[1], obj.shape()[2]);
    let anchors = anchor_boxes(gh, gw, DET_STRIDE, size);

    let mut order: Vec<usize> = (0..anchors.len()).collect();
    let score_of = |a: usize| {
        let (k, rest) = (a / (gh * gw), a % (gh * gw));
        let logit = obj[[k, rest / gw, rest % gw]];
        1.0 / (1.0 + (-logit).exp())
    };
    let scores: Vec<f64> = order.iter().map(|&a| score_of(a)).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    order.truncate(PRE_NMS_TOP);

    let mut cand_boxes = Vec::new();
    let mut cand_scores = Vec::new();
    for &a in &order {
        let (k, rest) = (a / (gh * gw), a % (gh * gw));
        let (y, x) = (rest / gw, rest % gw);
        let d = [
            deltas[[k * 4, y, x]],
            deltas[[k * 4 + 1, y, x]],
            deltas[[k * 4 + 2, y, x]],
            deltas[[k * 4 + 3, y, x]],
        ];
        let b = clip_box(&decode_delta(&anchors[a], &d), size);
        if box_side_ok(&b) {
            cand_boxes.push(b);
            cand_scores.push(scores[a]);
        }
    }
    let mut proposals: Vec<[f64; 4]> = ops::nms(&cand_boxes, &cand_scores, PROPOSAL_NMS_IOU)
        .into_iter()
        .take(MAX_PROPOSALS)
        .map(|i| cand_boxes[i])
        .collect();
    if proposals.is_empty() {
        return Ok(Vec::new());
    }

    let l4_3d = ops::index_axis0(ctx.g, l4, 0);
    let roi_feats = ops::roi_align(ctx.g, l4_3d, to_feature_coords(&proposals), ROI_SIZE);
    let (cls_v, box_v) = build_det_head(&mut ctx, roi_feats);
    let probs_v = ops::softmax_rows(ctx.g, cls_v);
    let probs = ctx.g.val(probs_v).clone();
    let head_deltas = ctx.g.val(box_v).clone();

    let mut scored: Vec<([f64; 4], DetClass, f64)> = Vec::new();
    for (r, proposal) in proposals.drain(..).enumerate() {
        let mut best_class = 0usize;
        let mut best_prob = f64::NEG_INFINITY;
        for c in 1..4 {
            let p = probs[[r, c]];
            if p > best_prob {
                best_prob = p;
                best_class = c;
            }
        }
        if best_prob < score_threshold {
            continue;
        }
        let d = [
            head_deltas[[r, 0]],
            head_deltas[[r, 1]],
            head_deltas[[r, 2]],
            head_deltas[[r, 3]],
        ];
        let refined = clip_box(&decode_delta(&proposal, &d), size);
        if !box_side_ok(&refined) {
            continue;
        }
        let class = DetClass::from_index(best_class - 1).expect("class index in range");
        scored.push((refined, class, best_prob));
    }
    if scored.is_empty() {
        return Ok(Vec::new());
    }

    let boxes: Vec<[f64; 4]> = scored.iter().map(|s| s.0).collect();
    let confs: Vec<f64> = scored.iter().map(|s| s.2).collect();
    let keep: Vec<usize> = ops::nms(&boxes, &confs, DETECTION_NMS_IOU)
        .into_iter()
        .take(max_detections)
        .collect();
    if keep.is_empty() {
        return Ok(Vec::new());
    }

    let kept_boxes: Vec<[f64; 4]> = keep.iter().map(|&i| scored[i].0).collect();
    let mask_feats = ops::roi_align(ctx.g, l4_3d, to_feature_coords(&kept_boxes), MASK_SIZE);
    let mask_logits_v = build_mask_head(&mut ctx, mask_feats);
    let mask_probs = ops::sigmoid_fwd(ctx.g.val(mask_logits_v));

    let mut out = Vec::with_capacity(keep.len());
    for (ki, &i) in keep.iter().enumerate() {
        let (bbox, det_class, score) = scored[i];
        let region = box_pixel_region(&bbox, size);
        let prob = mask_probs
            .index_axis(Axis(0), ki)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("mask plane");
        out.push(Detection {
            bbox,
            det_class,
            score,
            mask: mask_to_region(&prob, &region),
        });
    }
    Ok(out)
}

/// Forward vars and frozen targets for one image's detection loss.
pub(crate) struct DetTrainVars {
    /// Objectness logits for the anchors kept for the loss (positives and
    /// negatives; ignored anchors are dropped), with 0/1 targets.
    pub obj_logits: Var,
    pub obj_targets: Array1<f64>,
    /// Predicted and target deltas for positive anchors, [P,4].
    pub rpn_box_pred: Var,
    pub rpn_box_targets: Array2<f64>,
    /// RoI head class logits [R,4] and target classes (0 = background).
    pub head_cls_logits: Var,
    pub roi_classes: Vec<usize>,
    /// Predicted and target deltas for foreground RoIs, [F,4].
    pub head_box_pred: Var,
    pub head_box_targets: Array2<f64>,
    /// Mask logits and binary targets for foreground RoIs, [F,M,M].
    pub mask_logits: Var,
    pub mask_targets: Array3<f64>,
}

/// Deterministic training RoIs: five jittered copies of every ground-truth
/// box (exact, two diagonal shifts, shrink, grow) plus up to eight far-away
/// anchors as background. No sampling is involved, so a rerun sees the
/// exact same RoIs.
fn training_rois(instances: &[Instance], anchors: &[[f64; 4]], size: usize) -> (Vec<[f64; 4]>, Vec<usize>, Vec<usize>) {
    let mut rois: Vec<[f64; 4]> = Vec::new();
    let mut classes: Vec<usize> = Vec::new();
    let mut gt_of: Vec<usize> = Vec::new();
    for (gi, inst) in instances.iter().enumerate() {
        let gt = pixel_box_to_f64(&inst.bbox);
        let variants = [
            gt,
            shift_box(&gt, 0.08, 0.08),
            shift_box(&gt, -0.08, -0.08),
            scale_box(&gt, 0.9),
            scale_box(&gt, 1.1),
        ];
        for v in variants {
            let clipped = clip_box(&v, size);
            if box_side_ok(&clipped) {
                rois.push(clipped);
                classes.push(inst.det_class.index() + 1);
                gt_of.push(gi);
            }
        }
    }
    let n_fg = rois.len();
    if n_fg > 0 {
        let gt_boxes: Vec<[f64; 4]> = instances.iter().map(|i| pixel_box_to_f64(&i.bbox)).collect();
        let mut added = 0;
        for anchor in anchors {
            if added >= n_fg.min(MAX_BACKGROUND_ROIS) {
                break;
            }
            let clipped = clip_box(anchor, size);
            if !box_side_ok(&clipped) {
                continue;
            }
            let max_iou = gt_boxes.iter().map(|g| ops::iou_xyxy(&clipped, g)).fold(0.0, f64::max);
            if max_iou < ROI_BACKGROUND_IOU {
                rois.push(clipped);
                classes.push(0);
                gt_of.push(usize::MAX);
                added += 1;
            }
        }
    }
    (rois, classes, gt_of)
}

pub(crate) fn pixel_box_to_f64(b: &PixelBox) -> [f64; 4] {
    [b.x0 as f64, b.y0 as f64, b.x1 as f64, b.y1 as f64]
}

/// RPN anchor labels: 1 for an IoU of 0.7 or better (and for each ground
/// truth's best-matching anchor), 0 below 0.3, -1 in between (ignored).
fn rpn_labels(anchors: &[[f64; 4]], gts: &[[f64; 4]]) -> (Vec<i8>, Vec<usize>) {
    let n = anchors.len();
    let mut labels = vec![0i8; n];
    let mut assigned = vec![usize::MAX; n];
    if gts.is_empty() {
        return (labels, assigned);
    }
    let mut best_anchor = vec![(0usize, -1.0f64); gts.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let mut max_iou = 0.0;
        let mut max_gt = usize::MAX;
        for (gi, gt) in gts.iter().enumerate() {
            let iou = ops::iou_xyxy(anchor, gt);
            if iou > max_iou {
                max_iou = iou;
                max_gt = gi;
            }
            if iou > best_anchor[gi].1 {
                best_anchor[gi] = (a, iou);
            }
        }
        if max_iou >= RPN_POSITIVE_IOU {
            labels[a] = 1;
            assigned[a] = max_gt;
        } else if max_iou >= RPN_NEGATIVE_IOU {
            labels[a] = -1;
        }
    }
    for (gi, &(a, iou)) in best_anchor.iter().enumerate() {
        if iou > 0.0 {
            labels[a] = 1;
            assigned[a] = gi;
        }
    }
    (labels, assigned)
}

/// Builds the per-image detection training graph on the deepest pyramid
/// level of a batch: RPN logits and deltas gathered at labeled anchors, the
/// RoI head on deterministic training RoIs, and the mask branch on
/// foreground RoIs, together with their frozen targets.
pub(crate) fn build_detection_training(
    ctx: &mut NetCtx<'_, '_>,
    level4_batch: Var,
    image_index: usize,
    instances: &[Instance],
    image_size: usize,
) -> DetTrainVars {
    let l4_3d = ops::index_axis0(ctx.g, level4_batch, image_index);
    let shape = ctx.g.val(l4_3d).shape().to_vec();
    let (c, gh, gw) = (shape[0], shape[1], shape[2]);
    let l4_4d = ops::reshape(ctx.g, l4_3d, &[1, c, gh, gw]);

    let (obj_map, delta_map) = build_rpn(ctx, l4_4d);
    let anchors = anchor_boxes(gh, gw, DET_STRIDE, image_size);
    let gts: Vec<[f64; 4]> = instances.iter().map(|i| pixel_box_to_f64(&i.bbox)).collect();
    let (labels, assigned) = rpn_labels(&anchors, &gts);

    // Objectness: gather every non-ignored anchor's logit.
    let mut obj_idx = Vec::new();
    let mut obj_tgt = Vec::new();
    for (a, &lab) in labels.iter().enumerate() {
        if lab < 0 {
            continue;
        }
        let (k, rest) = (a / (gh * gw), a % (gh * gw));
        let (y, x) = (rest / gw, rest % gw);
        obj_idx.push((k * gh + y) * gw + x);
        obj_tgt.push(f64::from(lab));
    }
    let obj_logits = ops::gather_flat(ctx.g, obj_map, obj_idx);
    let obj_targets = Array1::from_vec(obj_tgt);

    // Box regression: positive anchors only.
    let mut delta_idx = Vec::new();
    let mut delta_tgt = Vec::new();
    for (a, &lab) in labels.iter().enumerate() {
        if lab != 1 {
            continue;
        }
        let (k, rest) = (a / (gh * gw), a % (gh * gw));
        let (y, x) = (rest / gw, rest % gw);
        let target = encode_delta(&anchors[a], &gts[assigned[a]]);
        for (coord, t) in target.iter().enumerate() {
            delta_idx.push(((k * 4 + coord) * gh + y) * gw + x);
            delta_tgt.push(*t);
        }
    }
    let n_pos = delta_idx.len() / 4;
    let gathered = ops::gather_flat(ctx.g, delta_map, delta_idx);
    let rpn_box_pred = ops::reshape(ctx.g, gathered, &[n_pos, 4]);
    let rpn_box_targets = Array2::from_shape_vec((n_pos, 4), delta_tgt).expect("delta target shape");

    // RoI head on deterministic RoIs.
    let (rois, roi_classes, gt_of) = training_rois(instances, &anchors, image_size);
    let roi_feats = ops::roi_align(ctx.g, l4_3d, to_feature_coords(&rois), ROI_SIZE);
    let (head_cls_logits, head_box_all) = build_det_head(ctx, roi_feats);

    let fg: Vec<usize> = (0..rois.len()).filter(|&r| roi_classes[r] > 0).collect();
    let mut box_idx = Vec::with_capacity(fg.len() * 4);
    let mut box_tgt = Vec::with_capacity(fg.len() * 4);
    for &r in &fg {
        let target = encode_delta(&rois[r], &gts[gt_of[r]]);
        for (coord, t) in target.iter().enumerate() {
            box_idx.push(r * 4 + coord);
            box_tgt.push(*t);
        }
    }
    let gathered = ops::gather_flat(ctx.g, head_box_all, box_idx);
    let head_box_pred = ops::reshape(ctx.g, gathered, &[fg.len(), 4]);
    let head_box_targets = Array2::from_shape_vec((fg.len(), 4), box_tgt).expect("roi target shape");

    // Mask branch on foreground RoIs; targets sample the instance mask.
    let fg_boxes: Vec<[f64; 4]> = fg.iter().map(|&r| rois[r]).collect();
    let mask_feats = ops::roi_align(ctx.g, l4_3d, to_feature_coords(&fg_boxes), MASK_SIZE);
    let mask_out = build_mask_head(ctx, mask_feats);
    let mask_logits = ops::reshape(ctx.g, mask_out, &[fg.len(), MASK_SIZE, MASK_SIZE]);
    let mut mask_targets = Array3::<f64>::zeros((fg.len(), MASK_SIZE, MASK_SIZE));
    for (fi, &r) in fg.iter().enumerate() {
        let inst = &instances[gt_of[r]];
        let full = inst.mask.mapv(f64::from).into_dyn().insert_axis(Axis(0));
        let sampled = ops::roi_align_fwd(&full, &[rois[r]], MASK_SIZE);
        for y in 0..MASK_SIZE {
            for x in 0..MASK_SIZE {
                mask_targets[[fi, y, x]] = f64::from(sampled[[0, 0, y, x]] >= 0.5);
            }
        }
    }

    DetTrainVars {
        obj_logits,
        obj_targets,
        rpn_box_pred,
        rpn_box_targets,
        head_cls_logits,
        roi_classes,
        head_box_pred,
        head_box_targets,
        mask_logits,
        mask_targets,
    }
}
