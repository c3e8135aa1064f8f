//! Geometric augmentations: elastic deformation, small rotation, and random
//! crop-and-resize. Image, segmentation mask, and instance masks go through
//! the same transform; boxes are recomputed from the transformed masks.

use super::preprocess::{resize_bilinear, resize_nearest, snap_image};
use super::{DataError, Instance, Sample};
use crate::derive_seed;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Augmentation op tokens accepted by stage configs and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Elastic,
    RotateSmall,
    Crop,
}

impl AugmentOp {
    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::Elastic => "elastic",
            AugmentOp::RotateSmall => "rotate_small",
            AugmentOp::Crop => "crop",
        }
    }
}

impl std::str::FromStr for AugmentOp {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "elastic" => Ok(AugmentOp::Elastic),
            "rotate_small" => Ok(AugmentOp::RotateSmall),
            "crop" => Ok(AugmentOp::Crop),
            other => Err(DataError::Argument(format!(
                "unknown augmentation {other:?}, expected elastic, rotate_small, or crop"
            ))),
        }
    }
}

/// Applies `ops` in order, each with an independent generator derived from
/// `seed` and the op position, then snaps the image to the 16-bit grid.
pub fn augment(sample: &Sample, ops: &[AugmentOp], seed: u64) -> Result<Sample, DataError> {
    let (h, w) = sample.image.dim();
    if h != w || h == 0 {
        return Err(DataError::Argument(format!("augment expects a square preprocessed image, got {h}x{w}")));
    }
    let mut out = sample.clone();
    for (k, op) in ops.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, op.name(), k as u64));
        out = match op {
            AugmentOp::Elastic => elastic(&out, &mut rng),
            AugmentOp::RotateSmall => rotate_small(&out, &mut rng),
            AugmentOp::Crop => crop(&out, &mut rng),
        };
    }
    snap_image(&mut out.image);
    Ok(out)
}

/// Rotation by a uniform angle in [-10, +10] degrees.
pub fn rotate_small(sample: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    let degrees = rng.random_range(-10.0..=10.0);
    rotate(sample, degrees)
}

/// Rotates about the image center; bilinear for the image, nearest for
/// masks, zero fill outside the frame. Rotation by 0 is the identity.
pub fn rotate(sample: &Sample, degrees: f64) -> Sample {
    let s = sample.size();
    let c = (s as f64 - 1.0) / 2.0;
    let theta = degrees.to_radians();
    let (sin, cos) = (theta.sin(), theta.cos());
    // Backward map: rotate target coordinates by -theta around the center.
    let src = move |y: usize, x: usize| -> (f64, f64) {
        let dx = x as f64 - c;
        let dy = y as f64 - c;
        (c + dy * cos - dx * sin, c + dy * sin + dx * cos)
    };
    warp(sample, src)
}

/// Random crop of 70-95% of the side, resized back to the original size.
pub fn crop(sample: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    let s = sample.size();
    let scale = rng.random_range(0.7..0.95);
    let cs = ((s as f64 * scale).round() as usize).clamp(2, s);
    let oy = rng.random_range(0..=(s - cs));
    let ox = rng.random_range(0..=(s - cs));

    let window = |m: &Array2<f64>| m.slice(ndarray::s![oy..oy + cs, ox..ox + cs]).to_owned();
    let window_u8 = |m: &Array2<u8>| m.slice(ndarray::s![oy..oy + cs, ox..ox + cs]).to_owned();

    let image = resize_bilinear(&window(&sample.image), s, s);
    let seg_mask = sample.seg_mask.as_ref().map(|m| resize_nearest(&window_u8(m), s, s));
    let instances = sample.instances.as_ref().map(|list| {
        list.iter()
            .filter_map(|inst| Instance::from_mask(inst.det_class, resize_nearest(&window_u8(&inst.mask), s, s)))
            .collect()
    });

    Sample {
        sample_id: sample.sample_id.clone(),
        image,
        class_label: sample.class_label,
        seg_mask,
        instances,
    }
}

/// Elastic deformation: a coarse 5x5 grid of uniform displacements in
/// [-0.035, 0.035] of the side, bilinearly upsampled to a dense field used
/// as a backward warp.
pub fn elastic(sample: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    let s = sample.size();
    let amp = 0.035 * s as f64;
    const G: usize = 4;
    let mut grid_dy = [[0.0f64; G + 1]; G + 1];
    let mut grid_dx = [[0.0f64; G + 1]; G + 1];
    for gy in 0..=G {
        for gx in 0..=G {
            grid_dy[gy][gx] = rng.random_range(-amp..=amp);
            grid_dx[gy][gx] = rng.random_range(-amp..=amp);
        }
    }
    let cell = (s as f64 - 1.0) / G as f64;
    let field = move |y: usize, x: usize| -> (f64, f64) {
        let fy = y as f64 / cell;
        let fx = x as f64 / cell;
        let gy = (fy.floor() as usize).min(G - 1);
        let gx = (fx.floor() as usize).min(G - 1);
        let ty = fy - gy as f64;
        let tx = fx - gx as f64;
        let lerp = |g: &[[f64; G + 1]; G + 1]| {
            g[gy][gx] * (1.0 - ty) * (1.0 - tx)
                + g[gy][gx + 1] * (1.0 - ty) * tx
                + g[gy + 1][gx] * ty * (1.0 - tx)
                + g[gy + 1][gx + 1] * ty * tx
        };
        (y as f64 + lerp(&grid_dy), x as f64 + lerp(&grid_dx))
    };
    warp(sample, field)
}

/// Applies a backward warp `src(y, x) -> (sy, sx)` to every layer of the
/// sample. Samples outside the frame read as zero.
fn warp(sample: &Sample, src: impl Fn(usize, usize) -> (f64, f64)) -> Sample {
    let s = sample.size();
    let sf = s as f64;

    let sample_bilinear = |m: &Array2<f64>, sy: f64, sx: f64| -> f64 {
        if sy <= -1.0 || sx <= -1.0 || sy >= sf || sx >= sf {
            return 0.0;
        }
        let y0 = sy.floor();
        let x0 = sx.floor();
        let dy = sy - y0;
        let dx = sx - x0;
        let at = |y: f64, x: f64| -> f64 {
            if y < 0.0 || x < 0.0 || y >= sf || x >= sf {
                0.0
            } else {
                m[[y as usize, x as usize]]
            }
        };
        at(y0, x0) * (1.0 - dy) * (1.0 - dx)
            + at(y0, x0 + 1.0) * (1.0 - dy) * dx
            + at(y0 + 1.0, x0) * dy * (1.0 - dx)
            + at(y0 + 1.0, x0 + 1.0) * dy * dx
    };
    let sample_nearest = |m: &Array2<u8>, sy: f64, sx: f64| -> u8 {
        let y = sy.round();
        let x = sx.round();
        if y < 0.0 || x < 0.0 || y >= sf || x >= sf {
            0
        } else {
            u8::from(m[[y as usize, x as usize]] != 0)
        }
    };

    let image = Array2::from_shape_fn((s, s), |(y, x)| {
        let (sy, sx) = src(y, x);
        sample_bilinear(&sample.image, sy, sx)
    });
    let seg_mask = sample.seg_mask.as_ref().map(|m| {
        Array2::from_shape_fn((s, s), |(y, x)| {
            let (sy, sx) = src(y, x);
            sample_nearest(m, sy, sx)
        })
    });
    let instances = sample.instances.as_ref().map(|list| {
        list.iter()
            .filter_map(|inst| {
                let m = Array2::from_shape_fn((s, s), |(y, x)| {
                    let (sy, sx) = src(y, x);
                    sample_nearest(&inst.mask, sy, sx)
                });
                Instance::from_mask(inst.det_class, m)
            })
            .collect()
    });

    Sample {
        sample_id: sample.sample_id.clone(),
        image,
        class_label: sample.class_label,
        seg_mask,
        instances,
    }
}
