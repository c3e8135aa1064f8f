//! On-disk dataset format: a manifest listing every sample, 16-bit grayscale
//! PNGs for images, 8-bit PNGs for masks, and per-sample instance lists with
//! class, box, and mask path. Save and load round-trip samples exactly.

use super::{DataError, DetClass, Instance, PixelBox, Sample};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    sample_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_label: Option<super::ClassLabel>,
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seg_mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    instances: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceEntry {
    det_class: DetClass,
    #[serde(rename = "box")]
    bbox: [u32; 4],
    mask: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn write_image_u16(path: &Path, image: &Array2<f64>) -> Result<(), DataError> {
    let (h, w) = image.dim();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let v = image[[y as usize, x as usize]].clamp(0.0, 1.0);
        image::Luma([(v * 65535.0).round() as u16])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DataError::Format(format!("writing {}: {e}", path.display())))
}

fn write_mask_u8(path: &Path, mask: &Array2<u8>) -> Result<(), DataError> {
    let (h, w) = mask.dim();
    let buf = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DataError::Format(format!("writing {}: {e}", path.display())))
}

fn read_image_u16(path: &Path) -> Result<Array2<f64>, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| DataError::Format(format!("decoding {}: {e}", path.display())))?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(DataError::Format(format!(
                "{} is not a 16-bit grayscale PNG (got {:?})",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        f64::from(gray.get_pixel(x as u32, y as u32).0[0]) / 65535.0
    }))
}

fn read_mask_u8(path: &Path) -> Result<Array2<u8>, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| DataError::Format(format!("decoding {}: {e}", path.display())))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(DataError::Format(format!(
                "{} is not an 8-bit grayscale PNG (got {:?})",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(gray.get_pixel(x as u32, y as u32).0[0] != 0)
    }))
}

/// Writes `samples` as a dataset directory rooted at `dir`.
pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(samples.len());
    for sample in samples {
        let sub = dir.join(&sample.sample_id);
        std::fs::create_dir_all(&sub).map_err(io_err(&sub))?;

        let image_rel = format!("{}/image.png", sample.sample_id);
        write_image_u16(&dir.join(&image_rel), &sample.image)?;

        let seg_rel = match &sample.seg_mask {
            Some(mask) => {
                let rel = format!("{}/seg_mask.png", sample.sample_id);
                write_mask_u8(&dir.join(&rel), mask)?;
                Some(rel)
            }
            None => None,
        };

        let inst_rel = match &sample.instances {
            Some(list) => {
                let mut inst_entries = Vec::with_capacity(list.len());
                for (k, inst) in list.iter().enumerate() {
                    let mask_rel = format!("{}/instance-{k:03}.png", sample.sample_id);
                    write_mask_u8(&dir.join(&mask_rel), &inst.mask)?;
                    inst_entries.push(InstanceEntry {
                        det_class: inst.det_class,
                        bbox: [inst.bbox.x0, inst.bbox.y0, inst.bbox.x1, inst.bbox.y1],
                        mask: mask_rel,
                    });
                }
                let rel = format!("{}/instances.json", sample.sample_id);
                let path = dir.join(&rel);
                let json = serde_json::to_string_pretty(&inst_entries)
                    .map_err(|e| DataError::Format(e.to_string()))?;
                std::fs::write(&path, json + "\n").map_err(io_err(&path))?;
                Some(rel)
            }
            None => None,
        };

        entries.push(ManifestEntry {
            sample_id: sample.sample_id.clone(),
            class_label: sample.class_label,
            image: image_rel,
            seg_mask: seg_rel,
            instances: inst_rel,
        });
    }

    let manifest = Manifest { schema_version: SCHEMA_VERSION, samples: entries };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Format(e.to_string()))?;
    std::fs::write(&path, json + "\n").map_err(io_err(&path))
}

/// Loads a dataset directory, validating masks, boxes, and shapes.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, DataError> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| DataError::Format(format!("parsing {}: {e}", manifest_path.display())))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(DataError::Format(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let image = read_image_u16(&dir.join(&entry.image))?;
        let (h, w) = image.dim();
        if h != w || h == 0 {
            return Err(DataError::Format(format!("sample {} image must be square and nonempty", entry.sample_id)));
        }

        let seg_mask = match &entry.seg_mask {
            Some(rel) => {
                let mask = read_mask_u8(&dir.join(rel))?;
                if mask.dim() != (h, w) {
                    return Err(DataError::Format(format!(
                        "sample {}: seg mask shape {:?} does not match image {:?}",
                        entry.sample_id,
                        mask.dim(),
                        (h, w)
                    )));
                }
                Some(mask)
            }
            None => None,
        };

        let instances = match &entry.instances {
            Some(rel) => {
                let path = dir.join(rel);
                let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                let raw: Vec<InstanceEntry> = serde_json::from_str(&text)
                    .map_err(|e| DataError::Format(format!("parsing {}: {e}", path.display())))?;
                let mut list = Vec::with_capacity(raw.len());
                for ie in raw {
                    let mask = read_mask_u8(&dir.join(&ie.mask))?;
                    if mask.dim() != (h, w) {
                        return Err(DataError::Format(format!(
                            "sample {}: instance mask shape {:?} does not match image {:?}",
                            entry.sample_id,
                            mask.dim(),
                            (h, w)
                        )));
                    }
                    let tight = PixelBox::tight(&mask).ok_or_else(|| {
                        DataError::Format(format!("sample {}: instance mask {} is empty", entry.sample_id, ie.mask))
                    })?;
                    let stored = PixelBox { x0: ie.bbox[0], y0: ie.bbox[1], x1: ie.bbox[2], y1: ie.bbox[3] };
                    if stored != tight {
                        return Err(DataError::Format(format!(
                            "sample {}: stored box {stored:?} is not the tight rectangle {tight:?}",
                            entry.sample_id
                        )));
                    }
                    list.push(Instance { det_class: ie.det_class, bbox: stored, mask });
                }
                Some(list)
            }
            None => None,
        };

        samples.push(Sample {
            sample_id: entry.sample_id.clone(),
            image,
            class_label: entry.class_label,
            seg_mask,
            instances,
        });
    }
    Ok(samples)
}
