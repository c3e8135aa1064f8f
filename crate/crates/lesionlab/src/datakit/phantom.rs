//! Synthetic chest-phantom generator. Images are built from two noisy lung
//! ellipses plus class-dependent lesion stamps; lesion support pixels double
//! as segmentation masks and detection instances, so annotations are exact
//! by construction.

use super::preprocess::snap_image;
use super::{ClassLabel, DataError, DetClass, Instance, Profile, Sample};
use crate::derive_seed;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generator settings. `instances_per_image` is an inclusive range used by
/// the DR profile; `det_classes` is the pool the instance classes cycle
/// through, so every listed class appears once the set has that many
/// instances.
#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub size: usize,
    pub profile: Profile,
    pub instances_per_image: (usize, usize),
    pub det_classes: Vec<DetClass>,
}

impl PhantomConfig {
    pub fn new(profile: Profile) -> PhantomConfig {
        PhantomConfig {
            size: 256,
            profile,
            instances_per_image: (1, 3),
            det_classes: DetClass::ALL.to_vec(),
        }
    }

    pub fn with_size(mut self, size: usize) -> PhantomConfig {
        self.size = size;
        self
    }

    pub fn with_instances_per_image(mut self, lo: usize, hi: usize) -> PhantomConfig {
        self.instances_per_image = (lo, hi);
        self
    }

    pub fn with_det_classes(mut self, classes: &[DetClass]) -> PhantomConfig {
        self.det_classes = classes.to_vec();
        self
    }

    /// Generates `count` samples. Each sample draws from its own derived
    /// seed, so the i-th sample is the same regardless of count.
    pub fn generate(&self, count: usize, seed: u64) -> Result<Vec<Sample>, DataError> {
        if self.size < 8 {
            return Err(DataError::Argument(format!("phantom size {} too small, need >= 8", self.size)));
        }
        if self.instances_per_image.0 > self.instances_per_image.1 {
            return Err(DataError::Argument("instances_per_image range is reversed".into()));
        }
        if self.det_classes.is_empty() {
            return Err(DataError::Argument("det_classes must not be empty".into()));
        }

        // Class labels cycle then shuffle: counts stay within one of uniform.
        let mut labels: Vec<ClassLabel> = (0..count).map(|i| ClassLabel::ALL[i % 3]).collect();
        let mut label_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "labels", 0));
        labels.shuffle(&mut label_rng);

        let mut samples = Vec::with_capacity(count);
        let mut instance_counter = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "phantom", i as u64));
            let sample = self.generate_one(i, label, &mut rng, &mut instance_counter);
            samples.push(sample);
        }
        Ok(samples)
    }

    fn generate_one(
        &self,
        index: usize,
        label: ClassLabel,
        rng: &mut ChaCha8Rng,
        instance_counter: &mut usize,
    ) -> Sample {
        let s = self.size;
        let sf = s as f64;
        let lungs = [Lung::draw(sf, 0.32, rng), Lung::draw(sf, 0.68, rng)];
        let mut image = base_thorax(s, &lungs, rng);

        let sample_id = format!("{}-{:05}", self.profile.name(), index);
        let mut class_label = None;
        let mut seg_mask = None;
        let mut instances = None;

        match self.profile {
            Profile::Cr => {
                class_label = Some(label);
                match label {
                    ClassLabel::NonLesion => {}
                    ClassLabel::Diffuse => {
                        let n = rng.random_range(3..=5);
                        for _ in 0..n {
                            let amp = 0.10 + rng.random_range(0.0..0.06);
                            stamp_gaussian(&mut image, &lungs, rng, amp, None);
                        }
                    }
                    ClassLabel::Nodule => {
                        stamp_disc_cluster(&mut image, &lungs, rng, 1, 0.35, None);
                    }
                }
            }
            Profile::Sr => {
                // Lesion style alternates so masks cover both diffuse and
                // compact shapes; the union of supports is the target mask.
                let mut mask = Array2::<u8>::zeros((s, s));
                if index.is_multiple_of(2) {
                    let n = rng.random_range(2..=4);
                    for _ in 0..n {
                        let sup = stamp_gaussian(&mut image, &lungs, rng, 0.14, None);
                        mask.zip_mut_with(&sup, |m, v| *m |= *v);
                    }
                } else {
                    let sup = stamp_disc_cluster(&mut image, &lungs, rng, 1, 0.35, None);
                    mask.zip_mut_with(&sup, |m, v| *m |= *v);
                }
                seg_mask = Some(mask);
            }
            Profile::Dr => {
                let (lo, hi) = self.instances_per_image;
                let n = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                let mut list = Vec::with_capacity(n);
                let mut occupied = Array2::<u8>::zeros((s, s));
                for _ in 0..n {
                    let det_class = self.det_classes[*instance_counter % self.det_classes.len()];
                    *instance_counter += 1;
                    let support = stamp_instance(&mut image, &lungs, rng, det_class, &occupied);
                    occupied.zip_mut_with(&support, |o, v| *o |= *v);
                    if let Some(inst) = Instance::from_mask(det_class, support) {
                        list.push(inst);
                    }
                }
                instances = Some(list);
            }
        }

        image.mapv_inplace(|v| v.clamp(0.0, 1.0));
        snap_image(&mut image);
        Sample { sample_id, image, class_label, seg_mask, instances }
    }
}

/// Generates `count` phantoms at the default 256-pixel size maintained by the
/// on-disk dataset format.
pub fn generate_phantoms(count: usize, profile: Profile, seed: u64) -> Result<Vec<Sample>, DataError> {
    PhantomConfig::new(profile).generate(count, seed)
}

struct Lung {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Lung {
    fn draw(sf: f64, cx_frac: f64, rng: &mut ChaCha8Rng) -> Lung {
        Lung {
            cx: sf * (cx_frac + rng.random_range(-0.015..0.015)),
            cy: sf * (0.50 + rng.random_range(-0.02..0.02)),
            a: sf * 0.17 * rng.random_range(0.92..1.08),
            b: sf * 0.30 * rng.random_range(0.92..1.08),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.a;
        let dy = (y - self.cy) / self.b;
        dx * dx + dy * dy <= 1.0
    }
}

fn base_thorax(s: usize, lungs: &[Lung; 2], rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut image = Array2::zeros((s, s));
    for y in 0..s {
        for x in 0..s {
            let noise = rng.random_range(-1.0..1.0);
            let inside = lungs.iter().any(|l| l.contains(x as f64, y as f64));
            image[[y, x]] = if inside {
                0.32 + 0.05 * (y as f64 / s as f64) + 0.03 * noise
            } else {
                0.05 + 0.02 * noise
            };
        }
    }
    image
}

/// Draws a point well inside one of the lungs. Rejection sampling with a
/// deterministic cap; falls back to a lung center.
fn lesion_center(lungs: &[Lung; 2], rng: &mut ChaCha8Rng, occupied: Option<&Array2<u8>>) -> (f64, f64) {
    for _ in 0..64 {
        let lung = &lungs[rng.random_range(0..2usize)];
        let u = rng.random_range(-0.7..0.7);
        let v = rng.random_range(-0.7..0.7);
        if u * u + v * v > 0.49 {
            continue;
        }
        let x = lung.cx + u * lung.a;
        let y = lung.cy + v * lung.b;
        if let Some(occ) = occupied {
            let (h, w) = occ.dim();
            let xi = (x as usize).min(w - 1);
            let yi = (y as usize).min(h - 1);
            if occ[[yi, xi]] != 0 {
                continue;
            }
        }
        return (x, y);
    }
    (lungs[0].cx, lungs[0].cy)
}

/// Adds a soft Gaussian bump; the support mask is where the bump exceeds 30%
/// of its peak.
fn stamp_gaussian(
    image: &mut Array2<f64>,
    lungs: &[Lung; 2],
    rng: &mut ChaCha8Rng,
    amp: f64,
    occupied: Option<&Array2<u8>>,
) -> Array2<u8> {
    let s = image.dim().0;
    let sf = s as f64;
    let (cx, cy) = lesion_center(lungs, rng, occupied);
    let sigma = (sf * rng.random_range(0.035..0.07)).max(1.2);
    let mut support = Array2::zeros((s, s));
    for y in 0..s {
        for x in 0..s {
            let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * sigma * sigma);
            if d2 < 8.0 {
                let bump = amp * (-d2).exp();
                image[[y, x]] += bump;
                if bump >= 0.3 * amp {
                    support[[y, x]] = 1;
                }
            }
        }
    }
    ensure_nonempty(image, &mut support, cx, cy, amp);
    support
}

/// Adds a bright compact blob built from `extra + 1` overlapping discs with
/// smooth edges. Returns the union support.
fn stamp_disc_cluster(
    image: &mut Array2<f64>,
    lungs: &[Lung; 2],
    rng: &mut ChaCha8Rng,
    extra: usize,
    amp: f64,
    occupied: Option<&Array2<u8>>,
) -> Array2<u8> {
    let s = image.dim().0;
    let sf = s as f64;
    let (cx, cy) = lesion_center(lungs, rng, occupied);
    let mut support = Array2::zeros((s, s));
    let base_r = (sf * rng.random_range(0.04..0.075)).max(1.5);
    for k in 0..=extra {
        let (dx, dy) = if k == 0 {
            (0.0, 0.0)
        } else {
            (rng.random_range(-0.6..0.6) * base_r, rng.random_range(-0.6..0.6) * base_r)
        };
        let r = base_r * rng.random_range(0.7..1.0);
        stamp_disc(image, &mut support, cx + dx, cy + dy, r, amp);
    }
    ensure_nonempty(image, &mut support, cx, cy, amp);
    support
}

fn stamp_disc(image: &mut Array2<f64>, support: &mut Array2<u8>, cx: f64, cy: f64, r: f64, amp: f64) {
    let s = image.dim().0;
    for y in 0..s {
        for x in 0..s {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d <= r {
                if support[[y, x]] == 0 {
                    image[[y, x]] += amp;
                    support[[y, x]] = 1;
                }
            } else if d <= r + 1.2 && support[[y, x]] == 0 {
                // Soft 1-pixel rim outside the support keeps edges unaliased.
                image[[y, x]] += amp * (1.0 - (d - r) / 1.2);
            }
        }
    }
}

/// Adds a basal band inside a lung: all lung pixels below a horizontal chord.
fn stamp_effusion(image: &mut Array2<f64>, lungs: &[Lung; 2], rng: &mut ChaCha8Rng, amp: f64) -> Array2<u8> {
    let s = image.dim().0;
    let lung = &lungs[rng.random_range(0..2usize)];
    let q = rng.random_range(0.35..0.6);
    let y_min = lung.cy + q * lung.b;
    let mut support = Array2::zeros((s, s));
    for y in 0..s {
        for x in 0..s {
            if (y as f64) >= y_min && lung.contains(x as f64, y as f64) {
                image[[y, x]] += amp;
                support[[y, x]] = 1;
            }
        }
    }
    ensure_nonempty(image, &mut support, lung.cx, lung.cy + 0.7 * lung.b, amp);
    support
}

fn stamp_instance(
    image: &mut Array2<f64>,
    lungs: &[Lung; 2],
    rng: &mut ChaCha8Rng,
    det_class: DetClass,
    occupied: &Array2<u8>,
) -> Array2<u8> {
    match det_class {
        DetClass::GroundGlass => stamp_gaussian(image, lungs, rng, 0.16, Some(occupied)),
        DetClass::Consolidation => {
            let extra = rng.random_range(1..=2);
            stamp_disc_cluster(image, lungs, rng, extra, 0.30, Some(occupied))
        }
        DetClass::Effusion => stamp_effusion(image, lungs, rng, 0.22),
    }
}

/// Degenerate draws (off-image center, sub-pixel extent) fall back to a tiny
/// disc so every instance has a nonempty mask.
fn ensure_nonempty(image: &mut Array2<f64>, support: &mut Array2<u8>, cx: f64, cy: f64, amp: f64) {
    if support.iter().any(|v| *v != 0) {
        return;
    }
    let s = image.dim().0;
    let xi = (cx.round() as i64).clamp(1, s as i64 - 2) as usize;
    let yi = (cy.round() as i64).clamp(1, s as i64 - 2) as usize;
    for dy in 0..2usize {
        for dx in 0..2usize {
            image[[yi + dy, xi + dx]] += amp;
            support[[yi + dy, xi + dx]] = 1;
        }
    }
}
