//! CIFAR-10 binary loader: 3073-byte records, one label byte followed by
//! 1024 R, 1024 G, 1024 B bytes (channel-planar, preserved as-is).

use super::{quantize, Example, ImageTensor, LabeledDataset, SoftLabel};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::Read;
use std::path::Path;

const RECORD: usize = 3073;
const CIFAR_CLASSES: usize = 10;

pub fn load_cifar_binary(path: &Path) -> Result<LabeledDataset> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if buf.is_empty() || buf.len() % RECORD != 0 {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            detail: format!("size {} is not a positive multiple of {RECORD}", buf.len()),
        });
    }
    let n = buf.len() / RECORD;
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &buf[i * RECORD..(i + 1) * RECORD];
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::InvalidParameter(format!(
                "label byte {label} > 9 at record {i}"
            )));
        }
        let pixels: Vec<f64> = rec[1..].iter().map(|&b| quantize(b as f64 / 255.0)).collect();
        examples.push(Example {
            image: ImageTensor::new(32, 32, 3, pixels),
            label: SoftLabel::one_hot(label, CIFAR_CLASSES),
            poisoned: false,
        });
    }
    Ok(LabeledDataset::new(examples, CIFAR_CLASSES, "cifar10"))
}
