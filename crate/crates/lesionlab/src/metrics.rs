//! Evaluation metrics: classification accuracy and F1, pooled pixel
//! segmentation scores with rank-based ROC AUC, and detection average
//! precision with greedy box matching.

use crate::datakit::{ClassLabel, DetClass};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Default binarization threshold for segmentation probabilities.
pub const SEG_THRESHOLD: f64 = 0.5;
/// Default IoU threshold for detection matching.
pub const DET_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Binary confusion counts pooled over pixels. Each ratio metric returns
/// None when its denominator is zero; reports map that to 0 plus a flag.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        ratio(self.true_pos + self.true_neg, self.total())
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.true_neg, self.true_neg + self.false_pos)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.true_pos, 2 * self.true_pos + self.false_pos + self.false_neg)
    }

    pub fn iou(&self) -> Option<f64> {
        ratio(self.true_pos, self.true_pos + self.false_pos + self.false_neg)
    }
}

/// Classification quality with per-class F1 in class-index order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub f1_per_class: [f64; 3],
    /// Rows are target classes, columns predicted classes.
    pub confusion: [[u64; 3]; 3],
    /// Metrics that hit a zero denominator and were reported as 0.
    pub zero_division: Vec<String>,
}

/// Pixel segmentation quality from pooled confusion counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub pixel_accuracy: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    /// Absent when the pooled labels are all-0 or all-1.
    pub roc_auc: Option<f64>,
    pub iou: f64,
    pub counts: ConfusionCounts,
    pub zero_division: Vec<String>,
}

/// Detection quality: per-class AP is absent for classes without ground
/// truth; mean AP averages the classes that have some.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionReport {
    pub mean_ap: f64,
    pub per_class_ap: [Option<f64>; 3],
    pub zero_division: Vec<String>,
}

/// One scored detection attributed to an evaluation image.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image: usize,
    pub det_class: DetClass,
    pub score: f64,
    /// Corners as x0, y0, x1, y1 with x1 > x0 and y1 > y0.
    pub bbox: [f64; 4],
}

/// One ground-truth instance box.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GtBox {
    pub image: usize,
    pub det_class: DetClass,
    pub bbox: [f64; 4],
}

fn check_box(b: &[f64; 4]) -> Result<(), MetricsError> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::Argument(format!("box {b:?} has non-finite coordinates")));
    }
    if b[2] <= b[0] || b[3] <= b[1] {
        return Err(MetricsError::Argument(format!("box {b:?} has zero or negative area")));
    }
    Ok(())
}

/// Intersection over union of two corner-form boxes.
pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> Result<f64, MetricsError> {
    check_box(a)?;
    check_box(b)?;
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    Ok(inter / union)
}

/// Report over argmax decisions of probability rows against target class
/// indices. Argmax ties resolve to the lowest class index.
pub fn classification_report(preds: &[[f64; 3]], targets: &[usize]) -> Result<ClassificationReport, MetricsError> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(MetricsError::Argument(format!(
            "need matching nonzero lengths, got {} predictions and {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut confusion = [[0u64; 3]; 3];
    for (p, &t) in preds.iter().zip(targets.iter()) {
        if t >= 3 {
            return Err(MetricsError::Argument(format!("target class {t} out of range")));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::Argument("non-finite prediction".into()));
        }
        let mut best = 0;
        for k in 1..3 {
            if p[k] > p[best] {
                best = k;
            }
        }
        confusion[t][best] += 1;
    }
    let correct: u64 = (0..3).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / preds.len() as f64;

    let mut f1_per_class = [0.0; 3];
    let mut zero_division = Vec::new();
    for c in 0..3 {
        let tp = confusion[c][c];
        let fp: u64 = (0..3).filter(|&t| t != c).map(|t| confusion[t][c]).sum();
        let missed: u64 = (0..3).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
        match ratio(2 * tp, 2 * tp + fp + missed) {
            Some(f1) => f1_per_class[c] = f1,
            None => {
                let label = ClassLabel::from_index(c).expect("class index below 3");
                zero_division.push(format!("f1_{}", label.name()));
            }
        }
    }
    let macro_f1 = f1_per_class.iter().sum::<f64>() / 3.0;
    Ok(ClassificationReport { accuracy, macro_f1, f1_per_class, confusion, zero_division })
}

/// Pixel counts of one prediction/target pair at a threshold; predictions
/// at or above the threshold count as positive.
fn accumulate_pixels(
    counts: &mut ConfusionCounts,
    scores: &mut Vec<f64>,
    labels: &mut Vec<u8>,
    pred: &Array2<f64>,
    target: &Array2<u8>,
    threshold: f64,
) -> Result<(), MetricsError> {
    if pred.dim() != target.dim() {
        return Err(MetricsError::Argument(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dim(),
            target.dim()
        )));
    }
    for (&p, &t) in pred.iter().zip(target.iter()) {
        if !(0.0..=1.0).contains(&p) {
            return Err(MetricsError::Argument(format!("prediction {p} outside [0,1]")));
        }
        if t > 1 {
            return Err(MetricsError::Argument("target mask must be binary".into()));
        }
        let pos = p >= threshold;
        match (t == 1, pos) {
            (true, true) => counts.true_pos += 1,
            (true, false) => counts.false_neg += 1,
            (false, true) => counts.false_pos += 1,
            (false, false) => counts.true_neg += 1,
        }
        scores.push(p);
        labels.push(t);
    }
    Ok(())
}

/// Mann-Whitney rank AUC with average ranks over score ties. None when one
/// of the label classes is empty.
fn rank_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores").then(a.cmp(&b)));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based average rank of the tie group [i, j].
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    Some((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

fn seg_report_from(counts: ConfusionCounts, roc_auc: Option<f64>) -> SegmentationReport {
    let mut zero_division = Vec::new();
    let mut take = |name: &str, v: Option<f64>| match v {
        Some(v) => v,
        None => {
            zero_division.push(name.to_string());
            0.0
        }
    };
    SegmentationReport {
        pixel_accuracy: take("pixel_accuracy", counts.pixel_accuracy()),
        f1: take("f1", counts.f1()),
        sensitivity: take("sensitivity", counts.sensitivity()),
        specificity: take("specificity", counts.specificity()),
        precision: take("precision", counts.precision()),
        roc_auc,
        iou: take("iou", counts.iou()),
        counts,
        zero_division,
    }
}

/// Segmentation report over one prediction/target pair.
pub fn segmentation_report(pred: &Array2<f64>, target: &Array2<u8>, threshold: f64) -> Result<SegmentationReport, MetricsError> {
    segmentation_report_pooled([(pred, target)], threshold)
}

/// Segmentation report over pixels pooled across many pairs (micro
/// averaging); the ROC AUC ranks the pooled scores.
pub fn segmentation_report_pooled<'a>(
    pairs: impl IntoIterator<Item = (&'a Array2<f64>, &'a Array2<u8>)>,
    threshold: f64,
) -> Result<SegmentationReport, MetricsError> {
    if !threshold.is_finite() {
        return Err(MetricsError::Argument(format!("threshold {threshold} must be finite")));
    }
    let mut counts = ConfusionCounts::default();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (pred, target) in pairs {
        accumulate_pixels(&mut counts, &mut scores, &mut labels, pred, target, threshold)?;
    }
    if labels.is_empty() {
        return Err(MetricsError::Argument("no pixels to evaluate".into()));
    }
    Ok(seg_report_from(counts, rank_auc(&scores, &labels)))
}

/// Eleven-point interpolated AP from raw precision/recall points.
fn eleven_point_ap(precisions: &[f64], recalls: &[f64]) -> f64 {
    let mut ap = 0.0;
    for step in 0..=10 {
        let r = step as f64 / 10.0;
        let best = precisions
            .iter()
            .zip(recalls.iter())
            .filter(|(_, &rec)| rec >= r)
            .map(|(&p, _)| p)
            .fold(0.0, f64::max);
        ap += best;
    }
    ap / 11.0
}

/// Average precision over one class: greedy matching of score-ranked
/// detections to unmatched same-image ground truth at the IoU threshold.
fn class_ap(dets: &[&ScoredBox], gts: &[&GtBox], iou_threshold: f64) -> Result<f64, MetricsError> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).expect("finite scores").then(a.cmp(&b))
    });
    let mut matched = vec![false; gts.len()];
    let mut precisions = Vec::with_capacity(dets.len());
    let mut recalls = Vec::with_capacity(dets.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &d in &order {
        let det = dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] || gt.image != det.image {
                continue;
            }
            let iou = box_iou(&det.bbox, &gt.bbox)?;
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                matched[g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / gts.len() as f64);
    }
    Ok(eleven_point_ap(&precisions, &recalls))
}

/// Detection report pooled over an evaluation set.
pub fn detection_report(
    detections: &[ScoredBox],
    ground_truth: &[GtBox],
    iou_threshold: f64,
) -> Result<DetectionReport, MetricsError> {
    if !iou_threshold.is_finite() || iou_threshold <= 0.0 || iou_threshold > 1.0 {
        return Err(MetricsError::Argument(format!("iou threshold {iou_threshold} outside (0,1]")));
    }
    for d in detections {
        check_box(&d.bbox)?;
        if !d.score.is_finite() {
            return Err(MetricsError::Argument(format!("detection score {} not finite", d.score)));
        }
    }
    for g in ground_truth {
        check_box(&g.bbox)?;
    }
    let mut per_class_ap = [None; 3];
    for (c, &class) in DetClass::ALL.iter().enumerate() {
        let gts: Vec<&GtBox> = ground_truth.iter().filter(|g| g.det_class == class).collect();
        if gts.is_empty() {
            continue;
        }
        let dets: Vec<&ScoredBox> = detections.iter().filter(|d| d.det_class == class).collect();
        per_class_ap[c] = Some(class_ap(&dets, &gts, iou_threshold)?);
    }
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let mut zero_division = Vec::new();
    let mean_ap = if present.is_empty() {
        zero_division.push("mean_ap".to_string());
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(DetectionReport { mean_ap, per_class_ap, zero_division })
}

/// Two-line aligned table: headers, then one row of values.
fn render_table(headers: &[String], values: &[String]) -> String {
    let mut head = String::new();
    let mut row = String::new();
    for (i, (h, v)) in headers.iter().zip(values.iter()).enumerate() {
        let w = h.len().max(v.len());
        if i > 0 {
            head.push_str("  ");
            row.push_str("  ");
        }
        head.push_str(&format!("{h:<w$}"));
        row.push_str(&format!("{v:<w$}"));
    }
    format!("{}\n{}\n", head.trim_end(), row.trim_end())
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.4}")
}

fn fmt_optional(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), fmt_metric)
}

impl ClassificationReport {
    /// Aligned text row: accuracy, macro F1, then per-class F1.
    pub fn to_table(&self) -> String {
        let mut headers = vec!["accuracy".to_string(), "macro_f1".to_string()];
        let mut values = vec![fmt_metric(self.accuracy), fmt_metric(self.macro_f1)];
        for (c, label) in ClassLabel::ALL.iter().enumerate() {
            headers.push(format!("f1_{}", label.name()));
            values.push(fmt_metric(self.f1_per_class[c]));
        }
        render_table(&headers, &values)
    }
}

impl SegmentationReport {
    /// Aligned text row: accuracy, F1, sensitivity, specificity, precision,
    /// ROC AUC, IoU.
    pub fn to_table(&self) -> String {
        let headers: Vec<String> = ["accuracy", "f1", "sensitivity", "specificity", "precision", "roc_auc", "iou"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let values = vec![
            fmt_metric(self.pixel_accuracy),
            fmt_metric(self.f1),
            fmt_metric(self.sensitivity),
            fmt_metric(self.specificity),
            fmt_metric(self.precision),
            fmt_optional(self.roc_auc),
            fmt_metric(self.iou),
        ];
        render_table(&headers, &values)
    }
}

impl DetectionReport {
    /// Aligned text row: mean AP, then per-class AP.
    pub fn to_table(&self) -> String {
        let mut headers = vec!["mean_ap".to_string()];
        let mut values = vec![fmt_metric(self.mean_ap)];
        for (c, class) in DetClass::ALL.iter().enumerate() {
            headers.push(format!("ap_{}", class.name()));
            values.push(fmt_optional(self.per_class_ap[c]));
        }
        render_table(&headers, &values)
    }
}
