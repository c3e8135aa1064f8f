//! Histogram equalization and resizing. Preprocessing equalizes first, then
//! resizes to the target side, so the contrast mapping sees the original
//! gray-level statistics.

use super::{DataError, Instance, Sample};
use ndarray::Array2;

/// Number of gray-level bins used by the equalization CDF.
pub(crate) const EQUALIZE_BINS: usize = 256;

/// Snaps a unit-interval value onto the 16-bit grid used by the on-disk PNG
/// format, so save/load round-trips reproduce images bit for bit.
pub(crate) fn snap_u16(v: f64) -> f64 {
    let q = (v.clamp(0.0, 1.0) * 65535.0).round();
    q / 65535.0
}

pub(crate) fn snap_image(image: &mut Array2<f64>) {
    image.mapv_inplace(snap_u16);
}

/// Histogram equalization over 256 bins spanning [min, max] of the input.
///
/// Output pixel = (cdf(bin) - cdf_min) / (n - cdf_min), which is monotone in
/// the input and lands in [0, 1]. A constant image maps to all zeros.
pub fn equalize_histogram(image: &Array2<f64>) -> Result<Array2<f64>, DataError> {
    let n = image.len();
    if n == 0 {
        return Err(DataError::Argument("cannot equalize an empty image".into()));
    }
    if image.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(DataError::Argument("image pixels must be finite and nonnegative".into()));
    }
    let lo = image.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(Array2::zeros(image.dim()));
    }

    let bin_of = |v: f64| -> usize {
        let b = ((v - lo) / (hi - lo) * EQUALIZE_BINS as f64).floor() as usize;
        b.min(EQUALIZE_BINS - 1)
    };

    let mut hist = [0u64; EQUALIZE_BINS];
    for v in image.iter() {
        hist[bin_of(*v)] += 1;
    }
    let mut cdf = [0u64; EQUALIZE_BINS];
    let mut acc = 0u64;
    for (b, h) in hist.iter().enumerate() {
        acc += h;
        cdf[b] = acc;
    }
    let cdf_min = *cdf.iter().find(|c| **c > 0).expect("nonempty image has a populated bin");
    let denom = (n as u64).saturating_sub(cdf_min);

    let out = image.mapv(|v| {
        if denom == 0 {
            0.0
        } else {
            (cdf[bin_of(v)] - cdf_min) as f64 / denom as f64
        }
    });
    Ok(out)
}

/// Bilinear resize with center-aligned sampling and edge clamping.
pub fn resize_bilinear(image: &Array2<f64>, new_h: usize, new_w: usize) -> Array2<f64> {
    let (h, w) = image.dim();
    assert!(h > 0 && w > 0 && new_h > 0 && new_w > 0, "resize requires nonempty shapes");
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    Array2::from_shape_fn((new_h, new_w), |(i, j)| {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        image[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + image[[y0, x1]] * (1.0 - dy) * dx
            + image[[y1, x0]] * dy * (1.0 - dx)
            + image[[y1, x1]] * dy * dx
    })
}

/// Nearest-neighbor resize for label masks; output stays binary when the
/// input is binary.
pub fn resize_nearest(mask: &Array2<u8>, new_h: usize, new_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    assert!(h > 0 && w > 0 && new_h > 0 && new_w > 0, "resize requires nonempty shapes");
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    Array2::from_shape_fn((new_h, new_w), |(i, j)| {
        let y = (((i as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let x = (((j as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        mask[[y, x]]
    })
}

fn rebinarize(mask: &mut Array2<u8>) {
    mask.mapv_inplace(|v| u8::from(v != 0));
}

/// Equalizes and resizes a sample to `target_size` x `target_size`.
///
/// The image is equalized then resized bilinearly; masks are resized with
/// nearest-neighbor and re-binarized; instance boxes are recomputed as tight
/// rectangles and instances whose resized mask is empty are dropped. Output
/// pixels are snapped to the 16-bit grid.
pub fn preprocess(sample: &Sample, target_size: usize) -> Result<Sample, DataError> {
    if target_size == 0 {
        return Err(DataError::Argument("target_size must be positive".into()));
    }
    let (h, w) = sample.image.dim();
    if h == 0 || w == 0 {
        return Err(DataError::Argument("cannot preprocess an empty image".into()));
    }
    if let Some(mask) = &sample.seg_mask {
        if mask.dim() != (h, w) {
            return Err(DataError::Argument(format!(
                "seg_mask shape {:?} does not match image shape {:?}",
                mask.dim(),
                (h, w)
            )));
        }
    }

    let mut image = resize_bilinear(&equalize_histogram(&sample.image)?, target_size, target_size);
    snap_image(&mut image);

    let seg_mask = sample.seg_mask.as_ref().map(|m| {
        let mut r = resize_nearest(m, target_size, target_size);
        rebinarize(&mut r);
        r
    });

    let instances = match &sample.instances {
        None => None,
        Some(list) => {
            let mut out = Vec::new();
            for inst in list {
                if inst.mask.dim() != (h, w) {
                    return Err(DataError::Argument(format!(
                        "instance mask shape {:?} does not match image shape {:?}",
                        inst.mask.dim(),
                        (h, w)
                    )));
                }
                let mut m = resize_nearest(&inst.mask, target_size, target_size);
                rebinarize(&mut m);
                if let Some(new_inst) = Instance::from_mask(inst.det_class, m) {
                    out.push(new_inst);
                }
            }
            Some(out)
        }
    };

    Ok(Sample {
        sample_id: sample.sample_id.clone(),
        image,
        class_label: sample.class_label,
        seg_mask,
        instances,
    })
}
