//! IDX (MNIST-style) loader. Big-endian magic 0x00000803 for images,
//! 0x00000801 for labels.

use super::{quantize, Example, ImageTensor, LabeledDataset, SoftLabel};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::Read;
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const IDX_CLASSES: usize = 10;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(buf)
}

fn read_u32_be(buf: &[u8], off: usize, path: &Path) -> Result<u32> {
    buf.get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.display().to_string(),
            detail: format!("header ends before offset {}", off + 4),
        })
}

pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<LabeledDataset> {
    let img_buf = read_all(image_path)?;
    let magic = read_u32_be(&img_buf, 0, image_path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: image_path.display().to_string(),
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let n_images = read_u32_be(&img_buf, 4, image_path)? as usize;
    let rows = read_u32_be(&img_buf, 8, image_path)? as usize;
    let cols = read_u32_be(&img_buf, 12, image_path)? as usize;
    let pixel_bytes = n_images * rows * cols;
    if img_buf.len() < 16 + pixel_bytes {
        return Err(Error::Truncated {
            path: image_path.display().to_string(),
            detail: format!(
                "expected {} pixel bytes, found {}",
                pixel_bytes,
                img_buf.len() - 16
            ),
        });
    }

    let lbl_buf = read_all(label_path)?;
    let lbl_magic = read_u32_be(&lbl_buf, 0, label_path)?;
    if lbl_magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: label_path.display().to_string(),
            expected: LABEL_MAGIC,
            found: lbl_magic,
        });
    }
    let n_labels = read_u32_be(&lbl_buf, 4, label_path)? as usize;
    if lbl_buf.len() < 8 + n_labels {
        return Err(Error::Truncated {
            path: label_path.display().to_string(),
            detail: format!(
                "expected {} label bytes, found {}",
                n_labels,
                lbl_buf.len() - 8
            ),
        });
    }
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let mut examples = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let start = 16 + i * rows * cols;
        let pixels: Vec<f64> = img_buf[start..start + rows * cols]
            .iter()
            .map(|&b| quantize(b as f64 / 255.0))
            .collect();
        let label = lbl_buf[8 + i] as usize;
        if label >= IDX_CLASSES {
            return Err(Error::InvalidParameter(format!(
                "label byte {label} out of range 0..{IDX_CLASSES} at record {i}"
            )));
        }
        examples.push(Example {
            image: ImageTensor::new(rows, cols, 1, pixels),
            label: SoftLabel::one_hot(label, IDX_CLASSES),
            poisoned: false,
        });
    }
    Ok(LabeledDataset::new(examples, IDX_CLASSES, "idx"))
}
