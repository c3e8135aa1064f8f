//! Synthetic phantom data: sample types, generation, preprocessing,
//! augmentation, deterministic splits, and the on-disk dataset format.

mod augment;
mod io;
mod phantom;
mod preprocess;

pub use augment::{augment, crop, elastic, rotate, rotate_small, AugmentOp};
pub use io::{load_dataset, save_dataset};
pub use phantom::{generate_phantoms, PhantomConfig};
pub use preprocess::{equalize_histogram, preprocess, resize_bilinear, resize_nearest};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Errors from dataset generation, preprocessing, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
}

/// Image-level class of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    NonLesion,
    Diffuse,
    Nodule,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::NonLesion, ClassLabel::Diffuse, ClassLabel::Nodule];

    /// Dense index used by the classification head.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::NonLesion => 0,
            ClassLabel::Diffuse => 1,
            ClassLabel::Nodule => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ClassLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::NonLesion => "non_lesion",
            ClassLabel::Diffuse => "diffuse",
            ClassLabel::Nodule => "nodule",
        }
    }
}

/// Instance-level class of a detection target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetClass {
    GroundGlass,
    Consolidation,
    Effusion,
}

impl DetClass {
    pub const ALL: [DetClass; 3] = [DetClass::GroundGlass, DetClass::Consolidation, DetClass::Effusion];

    /// Dense index; the detection head reserves 0 for background, so its
    /// class logits use `index() + 1`.
    pub fn index(self) -> usize {
        match self {
            DetClass::GroundGlass => 0,
            DetClass::Consolidation => 1,
            DetClass::Effusion => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<DetClass> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DetClass::GroundGlass => "ground_glass",
            DetClass::Consolidation => "consolidation",
            DetClass::Effusion => "effusion",
        }
    }
}

/// Axis-aligned box in integer pixel coordinates, half-open on both axes:
/// a pixel (x, y) is inside iff x0 <= x < x1 and y0 <= y < y1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    /// Tight bounding box of the nonzero pixels of `mask`, or None when the
    /// mask is empty.
    pub fn tight(mask: &Array2<u8>) -> Option<PixelBox> {
        let (h, w) = mask.dim();
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                if mask[[y, x]] != 0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x1 == 0 {
            return None;
        }
        Some(PixelBox {
            x0: x0 as u32,
            y0: y0 as u32,
            x1: x1 as u32,
            y1: y1 as u32,
        })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
}

/// One annotated object instance. The mask is a full-frame binary array with
/// the same shape as the sample image; `bbox` is always the tight bounding
/// rectangle of the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub det_class: DetClass,
    pub bbox: PixelBox,
    pub mask: Array2<u8>,
}

impl Instance {
    /// Builds an instance from a nonempty mask, deriving the tight box.
    pub fn from_mask(det_class: DetClass, mask: Array2<u8>) -> Option<Instance> {
        let bbox = PixelBox::tight(&mask)?;
        Some(Instance { det_class, bbox, mask })
    }
}

/// One data point. The image is square, grayscale, with values in [0, 1]
/// snapped to the 16-bit grid so PNG round-trips are exact. Annotations are
/// optional per task: absent fields simply mean the sample does not carry
/// that supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub image: Array2<f64>,
    pub class_label: Option<ClassLabel>,
    pub seg_mask: Option<Array2<u8>>,
    pub instances: Option<Vec<Instance>>,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.dim().0
    }
}

/// Dataset profile: which annotations the generated samples carry.
/// `Cr` carries class labels, `Sr` segmentation masks, `Dr` instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Cr,
    Sr,
    Dr,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Cr => "cr",
            Profile::Sr => "sr",
            Profile::Dr => "dr",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "cr" => Ok(Profile::Cr),
            "sr" => Ok(Profile::Sr),
            "dr" => Ok(Profile::Dr),
            other => Err(DataError::Argument(format!("unknown profile {other:?}, expected cr, sr, or dr"))),
        }
    }
}

/// Train/valid/test fractions plus the shuffle seed. Fractions must be
/// nonnegative and sum to 1 within 1e-9.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, valid: f64, test: f64, seed: u64) -> Result<SplitSpec, DataError> {
        let s = SplitSpec { train, valid, test, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.train < 0.0 || self.valid < 0.0 || self.test < 0.0 {
            return Err(DataError::Argument("split fractions must be nonnegative".into()));
        }
        let sum = self.train + self.valid + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Argument(format!("split fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> SplitSpec {
        self.seed = seed;
        self
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.8, valid: 0.1, test: 0.1, seed: 0 }
    }
}

/// Disjoint index partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplits {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }
}

/// Splits `n` sample indices into train/valid/test deterministically.
///
/// Indices are shuffled with a generator seeded by `spec.seed`; the valid and
/// test sizes are the rounded fractions of `n` and the remainder goes to
/// train. The same (n, spec) always yields the same partition.
pub fn split_dataset(n: usize, spec: &SplitSpec) -> Result<DatasetSplits, DataError> {
    spec.validate()?;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    idx.shuffle(&mut rng);

    let n_valid = ((n as f64) * spec.valid).round() as usize;
    let n_test = (((n as f64) * spec.test).round() as usize).min(n - n_valid.min(n));
    let n_valid = n_valid.min(n);

    let valid = idx[0..n_valid].to_vec();
    let test = idx[n_valid..n_valid + n_test].to_vec();
    let train = idx[n_valid + n_test..].to_vec();
    Ok(DatasetSplits { train, valid, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let spec = SplitSpec::default().with_seed(3);
        let a = split_dataset(100, &spec).unwrap();
        let b = split_dataset(100, &spec).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.train.iter().chain(&a.valid).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_sizes_match_rounded_fractions() {
        let spec = SplitSpec::new(1331.0 / 1816.0, 244.0 / 1816.0, 241.0 / 1816.0, 0).unwrap();
        let s = split_dataset(1816, &spec).unwrap();
        assert_eq!(s.sizes(), (1331, 244, 241));

        let spec = SplitSpec::new(377.0 / 472.0, 48.0 / 472.0, 47.0 / 472.0, 0).unwrap();
        let s = split_dataset(472, &spec).unwrap();
        assert_eq!(s.sizes(), (377, 48, 47));

        let spec = SplitSpec::new(0.8, 0.1, 0.1, 0).unwrap();
        let s = split_dataset(99, &spec).unwrap();
        assert_eq!(s.sizes(), (79, 10, 10));

        let spec = SplitSpec::new(1.0, 0.0, 0.0, 0).unwrap();
        let s = split_dataset(10, &spec).unwrap();
        assert_eq!(s.sizes(), (10, 0, 0));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(SplitSpec::new(0.5, 0.2, 0.2, 0).is_err());
        assert!(SplitSpec::new(-0.1, 0.6, 0.5, 0).is_err());
    }

    #[test]
    fn tight_box_scans_mask() {
        let mask = array![[0u8, 0, 0, 0], [0, 1, 1, 0], [0, 0, 1, 0], [0, 0, 0, 0]];
        let b = PixelBox::tight(&mask).unwrap();
        assert_eq!(b, PixelBox { x0: 1, y0: 1, x1: 3, y1: 3 });
        assert!(PixelBox::tight(&Array2::zeros((4, 4))).is_none());
    }
}
