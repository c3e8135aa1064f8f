//! Acceptance suite: one test per release criterion, each printing a
//! criterion line with the measured values (visible with --nocapture).

use lesionlab::cli::{run_preset_with, ExperimentPreset, PresetName, Scale};
use lesionlab::datakit::{
    split_dataset, PhantomConfig, Profile, Sample, SplitSpec,
};
use lesionlab::losses::{
    detection_loss, generalized_dice, total_loss, DetectionPrediction, DetectionTarget,
    TaskLosses, TaskWeights, DICE_EPS,
};
use lesionlab::metrics::{box_iou, segmentation_report};
use lesionlab::nets::{init_params, BackboneSpec, TaskHead};
use lesionlab::trainer::{
    batch_loss, load_checkpoint, loss_and_gradients, run_stage, Stage, StageConfig,
};
use ndarray::{Array1, Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::time::Instant;

fn pass(name: &str, detail: &str) {
    println!("criterion {name}: pass ({detail})");
}

fn tiny_spec(width: f64) -> BackboneSpec {
    BackboneSpec::vgg13().with_width_mult(width).with_input_size(16)
}

#[test]
fn loss_algebra() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut checked = 0usize;
    for bits in 0..16u32 {
        let w = [bits & 1, (bits >> 1) & 1, (bits >> 2) & 1, (bits >> 3) & 1].map(f64::from);
        let weights = TaskWeights::new(w[0], w[1], w[2], w[3]).unwrap();
        for _ in 0..25 {
            let vals: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..10.0));
            // Inactive components are sometimes reported, sometimes absent.
            let mut comp = |i: usize| {
                if w[i] == 1.0 || rng.random_bool(0.5) {
                    Some(vals[i])
                } else {
                    None
                }
            };
            let losses = TaskLosses {
                l_classif: comp(0),
                l_segm: comp(1),
                l_recon: comp(2),
                l_detect: comp(3),
            };
            let bundle = total_loss(&weights, &losses).unwrap();
            let expected: f64 = (0..4).map(|i| w[i] * vals[i]).sum();
            assert!(
                (bundle.l_total - expected).abs() <= 1e-9,
                "weights {w:?}: l_total {} vs expected {expected}",
                bundle.l_total
            );
            checked += 1;
        }
    }

    // The detection bundle is exactly the sum of its three terms.
    let mut bundles = 0usize;
    for case in 0..20 {
        let a = 6;
        let r = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(200 + case);
        let pred = DetectionPrediction {
            rpn_obj_logits: Array1::from_shape_fn(a, |_| rng.random_range(-3.0..3.0)),
            rpn_box_deltas: Array2::from_shape_fn((a, 4), |_| rng.random_range(-1.0..1.0)),
            head_cls_logits: Array2::from_shape_fn((r, 4), |_| rng.random_range(-3.0..3.0)),
            head_box_deltas: Array2::from_shape_fn((r, 4), |_| rng.random_range(-1.0..1.0)),
            mask_logits: Array3::from_shape_fn((r, 4, 4), |_| rng.random_range(-3.0..3.0)),
        };
        let target = DetectionTarget {
            rpn_labels: Array1::from_shape_fn(a, |_| f64::from(rng.random_range(-1..=1_i32))),
            rpn_box_targets: Array2::from_shape_fn((a, 4), |_| rng.random_range(-1.0..1.0)),
            roi_classes: (0..r).map(|_| rng.random_range(0..4)).collect(),
            roi_box_targets: Array2::from_shape_fn((r, 4), |_| rng.random_range(-1.0..1.0)),
            roi_mask_targets: Array3::from_shape_fn((r, 4, 4), |_| f64::from(rng.random_range(0..2))),
        };
        let b = detection_loss(&pred, &target).unwrap();
        assert_eq!(b.l_detect, b.l_rpn_and_head_classif + b.l_bbox + b.l_mask);
        bundles += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 1.0, "took {secs:.2}s, budget 1s");
    pass("loss_algebra", &format!("{checked} weighted sums, {bundles} detection bundles, {secs:.2}s"));
}

/// Generalized Dice loss written as explicit double summations, sharing only
/// the published epsilon with the library.
fn dice_oracle(pred: &Array2<f64>, target: &Array2<u8>) -> f64 {
    let (h, w) = pred.dim();
    let mut counts = [0.0f64; 2];
    for y in 0..h {
        for x in 0..w {
            counts[usize::from(target[[y, x]])] += 1.0;
        }
    }
    let weights = [
        1.0 / (counts[0] * counts[0] + DICE_EPS),
        1.0 / (counts[1] * counts[1] + DICE_EPS),
    ];
    let mut num = 0.0;
    let mut den = 0.0;
    for class in 0..2 {
        let mut inter = 0.0;
        let mut both = 0.0;
        for y in 0..h {
            for x in 0..w {
                let r = f64::from(target[[y, x]] as i32 == class as i32 as i32);
                let p = if class == 1 { pred[[y, x]] } else { 1.0 - pred[[y, x]] };
                inter += r * p;
                both += r + p;
            }
        }
        num += weights[class] * inter;
        den += weights[class] * both;
    }
    1.0 - 2.0 * num / (den + DICE_EPS)
}

#[test]
fn generalized_dice_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        let pred = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..=1.0));
        let target = Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(0.3)));
        let got = generalized_dice(&pred, &target).unwrap();
        let want = dice_oracle(&pred, &target);
        assert!(
            (got - want).abs() <= 1e-6,
            "case {case} ({h}x{w}): library {got} vs oracle {want}"
        );
    }

    // Perfect overlap scores 0 and full complement scores 1, within epsilon,
    // on sparse lesion masks (the imbalanced regime the weighting targets).
    let mut max_perfect: f64 = 0.0;
    let mut max_complement_dev: f64 = 0.0;
    for case in 0..50 {
        let h = rng.random_range(4..=16);
        let w = rng.random_range(4..=16);
        let mut target = Array2::zeros((h, w));
        for _ in 0..rng.random_range(1..=2usize) {
            target[[rng.random_range(0..h), rng.random_range(0..w)]] = 1u8;
        }
        let exact = target.mapv(f64::from);
        let perfect = generalized_dice(&exact, &target).unwrap();
        max_perfect = max_perfect.max(perfect.abs());
        let complement = generalized_dice(&exact.mapv(|p| 1.0 - p), &target).unwrap();
        max_complement_dev = max_complement_dev.max((complement - 1.0).abs());
        assert!(perfect.abs() <= 1e-6, "case {case}: perfect overlap scored {perfect}");
        assert!((complement - 1.0).abs() <= 1e-6, "case {case}: complement scored {complement}");
    }
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 10.0, "took {secs:.2}s, budget 10s");
    pass(
        "generalized_dice_oracle",
        &format!(
            "1000 pairs within 1e-6, perfect <= {max_perfect:.1e}, complement dev <= {max_complement_dev:.1e}, {secs:.2}s"
        ),
    );
}

#[test]
fn gradient_checks() {
    let t = Instant::now();
    let spec = tiny_spec(0.125);
    let cases: [(TaskHead, TaskWeights, Profile); 4] = [
        (TaskHead::Classification, TaskWeights::new(1.0, 0.0, 0.0, 0.0).unwrap(), Profile::Cr),
        (TaskHead::Segmentation, TaskWeights::new(0.0, 1.0, 0.0, 0.0).unwrap(), Profile::Sr),
        (TaskHead::Reconstruction, TaskWeights::new(0.0, 0.0, 1.0, 0.0).unwrap(), Profile::Cr),
        (TaskHead::Detection, TaskWeights::new(0.0, 0.0, 0.0, 1.0).unwrap(), Profile::Dr),
    ];
    let h = 1e-6;
    let mut report = Vec::new();
    for (head, weights, profile) in cases {
        let mut config = PhantomConfig::new(profile).with_size(16);
        if profile == Profile::Dr {
            config = config.with_instances_per_image(1, 2);
        }
        let samples = config.generate(2, 31).unwrap();
        let store = init_params(&spec, &[head], 3).unwrap();
        let (_, grads) = loss_and_gradients(&store, &samples, &weights).unwrap();

        // Sample the strongest entries of every tensor, largest first, so the
        // probes cover each layer and stay numerically meaningful.
        let mut probes: Vec<(String, usize, f64)> = Vec::new();
        for (name, grad) in &grads {
            let mut entries: Vec<(usize, f64)> =
                grad.iter().copied().enumerate().filter(|(_, g)| g.abs() > 1e-7).collect();
            entries.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
            for (idx, g) in entries.into_iter().take(6) {
                probes.push((name.clone(), idx, g));
            }
        }
        probes.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()).then_with(|| a.0.cmp(&b.0)));
        probes.truncate(110);
        assert!(
            probes.len() >= 100,
            "{}: only {} usable gradient probes",
            head.name(),
            probes.len()
        );

        let mut max_rel: f64 = 0.0;
        for (name, idx, analytic) in &probes {
            let eval = |delta: f64| -> f64 {
                let mut nudged = store.clone();
                *nudged.get_mut(name).unwrap().iter_mut().nth(*idx).unwrap() += delta;
                batch_loss(&nudged, &samples, &weights).unwrap().l_total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
            assert!(
                rel <= 1e-4,
                "{} {name}[{idx}]: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel {rel:.2e})",
                head.name()
            );
            max_rel = max_rel.max(rel);
        }
        report.push(format!("{} {} probes rel<={max_rel:.1e}", head.name(), probes.len()));
    }
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 120.0, "took {secs:.1}s, budget 2min");
    pass("gradient_checks", &format!("{}, {secs:.1}s", report.join("; ")));
}

/// Trapezoid-free O(n^2) AUC: P(score+ > score-) counting ties as half.
fn auc_pairwise(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() as f64 * neg.len() as f64))
}

#[test]
fn metric_oracles() {
    // 4x4 fixture: TP 2, FP 1, FN 1, TN 12.
    let target = Array2::from_shape_vec(
        (4, 4),
        vec![
            1, 1, 1, 0, //
            0, 0, 0, 0, //
            0, 0, 0, 0, //
            0, 0, 0, 0,
        ],
    )
    .unwrap();
    let pred = Array2::from_shape_vec(
        (4, 4),
        vec![
            0.9, 0.8, 0.1, 0.7, //
            0.2, 0.1, 0.0, 0.1, //
            0.3, 0.2, 0.1, 0.0, //
            0.1, 0.0, 0.2, 0.1,
        ],
    )
    .unwrap();
    let report = segmentation_report(&pred, &target, 0.5).unwrap();
    assert_eq!(report.precision, 2.0 / 3.0);
    assert_eq!(report.iou, 0.5);
    assert_eq!(report.pixel_accuracy, 14.0 / 16.0);

    // ROC AUC against the pairwise oracle on 100 random fixtures.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut compared = 0usize;
    for case in 0..100 {
        let h = rng.random_range(2..=8);
        let w = rng.random_range(2..=8);
        // Ties included deliberately: scores snap to a coarse grid.
        let pred = Array2::from_shape_fn((h, w), |_| rng.random_range(0..=10) as f64 / 10.0);
        let target = Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(0.5)));
        let report = segmentation_report(&pred, &target, 0.5).unwrap();
        let scores: Vec<f64> = pred.iter().copied().collect();
        let labels: Vec<u8> = target.iter().copied().collect();
        let want = auc_pairwise(&scores, &labels);
        match (report.roc_auc, want) {
            (Some(got), Some(want)) => {
                assert!((got - want).abs() <= 1e-9, "case {case}: auc {got} vs oracle {want}");
                compared += 1;
            }
            (None, None) => {}
            (got, want) => panic!("case {case}: auc presence disagrees ({got:?} vs {want:?})"),
        }
    }
    assert!(compared >= 80, "only {compared} fixtures had both classes");

    assert_eq!(box_iou(&[0.0, 0.0, 4.0, 4.0], &[2.0, 0.0, 6.0, 4.0]).unwrap(), 1.0 / 3.0);
    pass("metric_oracles", &format!("4x4 fixture exact, {compared} AUC fixtures within 1e-9, box fixture exact"));
}

#[test]
fn table1_split_reproduction() {
    let cases = [
        (1816usize, 1331.0, 244.0, 241.0),
        (472, 377.0, 48.0, 47.0),
        (99, 79.0, 10.0, 10.0),
    ];
    for (n, tr, va, te) in cases {
        let total = n as f64;
        let spec = SplitSpec::new(tr / total, va / total, te / total, 0).unwrap();
        let splits = split_dataset(n, &spec).unwrap();
        assert_eq!(
            splits.sizes(),
            (tr as usize, va as usize, te as usize),
            "split of {n} samples"
        );
    }
    pass("table1_split_reproduction", "1816 -> (1331,244,241), 472 -> (377,48,47), 99 -> (79,10,10)");
}

#[test]
fn transfer_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny_spec(0.125);
    let cr_samples = PhantomConfig::new(Profile::Cr).with_size(16).generate(6, 21).unwrap();
    let sr_samples = PhantomConfig::new(Profile::Sr).with_size(16).generate(6, 22).unwrap();
    let (cr_train, cr_valid) = cr_samples.split_at(4);
    let (sr_train, sr_valid) = sr_samples.split_at(4);

    // Train CR briefly and checkpoint it.
    let cr_init = init_params(&spec, &Stage::Cr.required_heads(), 1).unwrap();
    let cr_config = StageConfig::new(Stage::Cr, 2).with_batch_size(2).with_seed(2);
    let cr_out = run_stage(&cr_config, cr_train, cr_valid, &cr_init).unwrap();
    let cr_dir = tmp.path().join("cr");
    lesionlab::trainer::save_checkpoint(&cr_out.best_params, &cr_out.curve, &cr_dir).unwrap();
    let (cr_ckpt, _) = load_checkpoint(&cr_dir).unwrap();

    // Preload into SR with zero epochs: every encoder tensor must be
    // bitwise identical to the checkpoint.
    let sr_init = init_params(&spec, &Stage::Sr.required_heads(), 9).unwrap();
    let preload_only = StageConfig::new(Stage::Sr, 0)
        .with_batch_size(2)
        .with_seed(3)
        .with_preload(&cr_dir, &["encoder."]);
    let preloaded = run_stage(&preload_only, sr_train, sr_valid, &sr_init).unwrap();
    let mut encoder_tensors = 0usize;
    for (name, arr) in preloaded.params.iter() {
        if name.starts_with("encoder.") {
            let a: Vec<u64> = arr.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = cr_ckpt.get(name).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name} differs from the source checkpoint");
            encoder_tensors += 1;
        }
    }
    assert!(encoder_tensors > 0);

    // Isolation: training a stage leaves heads outside it bitwise unchanged.
    let all_init = init_params(&spec, &TaskHead::ALL, 5).unwrap();
    let sr_config = StageConfig::new(Stage::Sr, 2).with_batch_size(2).with_seed(4);
    let trained = run_stage(&sr_config, sr_train, sr_valid, &all_init).unwrap();
    let mut inactive = 0usize;
    let mut active_changed = false;
    for (name, before) in all_init.iter() {
        let after = trained.params.get(name).unwrap();
        let same = before.iter().zip(after.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        if name.starts_with("cls.") || name.starts_with("det.") {
            assert!(same, "{name} is outside the stage but changed");
            inactive += 1;
        } else if !same {
            active_changed = true;
        }
    }
    assert!(inactive > 0);
    assert!(active_changed, "training changed nothing");
    pass(
        "transfer_contract",
        &format!("{encoder_tensors} encoder tensors bitwise equal, {inactive} inactive tensors untouched"),
    );
}

/// Median with absent values ranked last (a run that never crossed counts
/// as slower than every run that did).
fn median_epochs(mut vals: Vec<Option<usize>>) -> Option<usize> {
    vals.sort_by_key(|v| v.unwrap_or(usize::MAX));
    vals[vals.len() / 2]
}

#[test]
fn table3_ordering() {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let seeds: [u64; 5] = [1, 2, 3, 4, 5];
    let preset =
        ExperimentPreset::new(PresetName::Table3PreloadAblation, Scale::Desk).with_seeds(&seeds);
    run_preset_with(&preset, tmp.path(), &Scale::Desk.params()).unwrap();

    let csv = std::fs::read_to_string(tmp.path().join("table3.csv")).unwrap();
    let mut preloaded = Vec::new();
    let mut scratch = Vec::new();
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let epochs: Option<usize> = fields[9].parse().ok();
        match fields[0] {
            "sr_preloaded" => preloaded.push(epochs),
            "sr_scratch" => scratch.push(epochs),
            other => panic!("unexpected task {other}"),
        }
    }
    assert_eq!(preloaded.len(), seeds.len());
    assert_eq!(scratch.len(), seeds.len());
    let med_pre = median_epochs(preloaded.clone());
    let med_scratch = median_epochs(scratch.clone());
    let pre =
        med_pre.unwrap_or_else(|| panic!("preloaded median never crossed: {preloaded:?}"));
    assert!(
        med_scratch.is_none_or(|s| pre <= s),
        "preloaded median {pre} > scratch median {med_scratch:?} ({preloaded:?} vs {scratch:?})"
    );
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 1200.0, "took {secs:.0}s, budget 20min");
    pass(
        "table3_ordering",
        &format!(
            "median epochs to dice: preloaded {pre} <= scratch {}, per seed {preloaded:?} vs {scratch:?}, {secs:.0}s",
            med_scratch.map_or_else(|| "never".to_string(), |s| s.to_string())
        ),
    );
}

/// Trailing 5-epoch moving average over the full windows.
fn moving_average(series: &[f64]) -> Vec<f64> {
    (4..series.len()).map(|i| series[i - 4..=i].iter().sum::<f64>() / 5.0).collect()
}

#[test]
fn fig3_shape() {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let preset = ExperimentPreset::new(PresetName::Fig3DetectionOverfit, Scale::Desk);
    run_preset_with(&preset, tmp.path(), &Scale::Desk.params()).unwrap();

    let text =
        std::fs::read_to_string(tmp.path().join("seed_1").join("02_dr").join("curve.csv")).unwrap();
    let curve = lesionlab::trainer::TrainingCurve::from_csv(&text).unwrap();
    let valid: Vec<f64> =
        curve.epochs.iter().map(|r| r.valid.losses.l_detect.expect("detect active")).collect();
    let train: Vec<f64> =
        curve.epochs.iter().map(|r| r.train.losses.l_detect.expect("detect active")).collect();

    let min = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let min_epoch = valid.iter().position(|&v| v == min).unwrap() + 1;
    let last = *valid.last().unwrap();
    assert!(
        last >= 1.1 * min,
        "validation detect loss ended at {last:.4}, under 1.1x its minimum {min:.4} (epoch {min_epoch})"
    );

    let ma = moving_average(&train);
    let first_ma = ma[0];
    let last_ma = *ma.last().unwrap();
    assert!(
        last_ma < first_ma,
        "smoothed training detect loss did not decrease ({first_ma:.4} -> {last_ma:.4})"
    );
    // Decreasing overall: every smoothed value stays below the running
    // envelope it has already fallen from by more than a small slack.
    let slack = 0.05 * first_ma.abs();
    let mut low = f64::INFINITY;
    for (i, &v) in ma.iter().enumerate() {
        low = low.min(v);
        assert!(
            v <= low + slack,
            "smoothed training loss rebounded at window {i}: {v:.4} after low {low:.4}"
        );
    }
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 600.0, "took {secs:.0}s, budget 10min");
    pass(
        "fig3_shape",
        &format!(
            "valid detect min {min:.4} at epoch {min_epoch}, final {last:.4} ({:.2}x), smoothed train {first_ma:.4} -> {last_ma:.4}, {secs:.0}s",
            last / min
        ),
    );
}

#[test]
fn fig4_liveness() {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let preset = ExperimentPreset::new(PresetName::Fig4BackboneCompare, Scale::Desk);
    let params = Scale::Desk.params();
    assert_eq!(params.cr_epochs, 20);
    assert_eq!(params.sr_epochs, 20);
    run_preset_with(&preset, tmp.path(), &params).unwrap();

    let csv = std::fs::read_to_string(tmp.path().join("fig4.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "expected one row per backbone and stage");
    let mut summary = Vec::new();
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        let backbone = fields[1];
        let stage = fields[2];
        for v in &fields[3..6] {
            let x: f64 = v.parse().unwrap();
            assert!(x.is_finite(), "{backbone} {stage}: non-finite summary value {v}");
        }
        assert_eq!(fields[6], "true", "{backbone} {stage}: curve has non-finite epochs");
        summary.push(format!("{backbone}/{stage}"));
    }
    // Every logged epoch of every curve is finite, full epoch counts ran.
    for backbone in ["vgg13_style", "resnet50_style"] {
        for stage in ["01_cr", "02_sr"] {
            let path = tmp.path().join("seed_1").join(backbone).join(stage).join("curve.csv");
            let curve =
                lesionlab::trainer::TrainingCurve::from_csv(&std::fs::read_to_string(path).unwrap())
                    .unwrap();
            assert_eq!(curve.epochs.len(), 20, "{backbone}/{stage} epoch count");
            for rec in &curve.epochs {
                for sr in [&rec.train, &rec.valid] {
                    assert!(sr.losses.l_total.is_finite() && sr.metric_value.is_finite());
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 900.0, "took {secs:.0}s, budget 15min");
    pass(
        "fig4_liveness",
        &format!("{} all finite over 20 epochs, {secs:.0}s", summary.join(", ")),
    );
}

fn file_listing(root: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    files.sort();
    files
}

#[test]
fn determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let preset = lesionlab::cli::ExperimentPreset::new(
        lesionlab::cli::PresetName::Fig3DetectionOverfit,
        lesionlab::cli::Scale::Ci,
    );
    let params = lesionlab::cli::Scale::Ci.params();

    // Identical invocations: same seeds, same output path. The first run's
    // tree is moved aside so the second starts clean.
    let root = tmp.path().join("run");
    lesionlab::cli::run_preset_with(&preset, &root, &params).unwrap();
    let first = tmp.path().join("first");
    std::fs::rename(&root, &first).unwrap();
    lesionlab::cli::run_preset_with(&preset, &root, &params).unwrap();

    // Every artifact byte must match: checkpoints, curves, charts, reports.
    let listing = file_listing(&root);
    assert_eq!(listing, file_listing(&first), "reruns produced different file sets");
    for rel in &listing {
        assert_eq!(
            std::fs::read(root.join(rel)).unwrap(),
            std::fs::read(first.join(rel)).unwrap(),
            "{} differs between identical runs",
            rel.display()
        );
    }
    assert!(listing.len() >= 10, "only {} artifact files compared", listing.len());
    pass("determinism", &format!("{} artifact files byte-identical across reruns", listing.len()));
}

fn overfit_case(
    stage: Stage,
    samples: &[Sample],
    width: f64,
    lr: f64,
    epochs: usize,
    reached: impl Fn(f64) -> bool,
) -> (Option<usize>, f64) {
    let spec = tiny_spec(width);
    let init = init_params(&spec, &stage.required_heads(), 0).unwrap();
    let config = StageConfig::new(stage, epochs)
        .with_batch_size(samples.len())
        .with_learning_rate(lr)
        .with_seed(1)
        .with_augmentations(vec![]);
    let out = run_stage(&config, samples, samples, &init).unwrap();
    let hit = out.curve.epochs.iter().find(|r| reached(r.valid.metric_value)).map(|r| r.epoch);
    let last = out.curve.epochs.last().map_or(f64::NAN, |r| r.valid.metric_value);
    (hit, last)
}

#[test]
fn overfit_suite() {
    // Memorization capacity at width 1/4: each stage driven onto 8 or fewer
    // samples with train == valid must saturate its training metric.
    let t = Instant::now();
    let width = 0.25;
    let lr = 1e-3;

    let cr = PhantomConfig::new(Profile::Cr).with_size(16).generate(8, 5).unwrap();
    let (cr_hit, cr_last) = overfit_case(Stage::COnly, &cr, width, lr, 100, |acc| acc >= 1.0);
    assert!(cr_hit.is_some(), "classification never reached accuracy 1.0 (last {cr_last:.3})");

    let sr = PhantomConfig::new(Profile::Sr).with_size(16).generate(8, 5).unwrap();
    let (sr_hit, sr_last) = overfit_case(Stage::Sr, &sr, width, lr, 200, |dice| dice <= 0.05);
    assert!(sr_hit.is_some(), "segmentation never reached dice loss 0.05 (last {sr_last:.3})");

    let dr = PhantomConfig::new(Profile::Dr)
        .with_size(16)
        .with_instances_per_image(1, 1)
        .generate(4, 13)
        .unwrap();
    let (dr_hit, dr_last) = overfit_case(Stage::Dr, &dr, width, lr, 100, |ap| ap >= 0.5);
    assert!(dr_hit.is_some(), "detection never reached mean_ap 0.5 (last {dr_last:.3})");

    let secs = t.elapsed().as_secs_f64();
    assert!(cr_hit.unwrap() <= 200 && sr_hit.unwrap() <= 500 && dr_hit.unwrap() <= 500);
    assert!(secs < 900.0, "took {secs:.0}s, budget 15min");
    pass(
        "overfit_suite",
        &format!(
            "accuracy 1.0 at epoch {}, dice 0.05 at epoch {}, mean_ap 0.5 at epoch {}, {secs:.0}s",
            cr_hit.unwrap(),
            sr_hit.unwrap(),
            dr_hit.unwrap()
        ),
    );
}
