//! Synthetic Gaussian-blob datasets: a desk-scale stand-in for image data.
//! Each class is an isotropic blob around a class-specific template image.

use super::{quantize, Example, ImageTensor, LabeledDataset, SoftLabel};
use crate::error::{Error, Result};
use crate::seed;
use rand::Rng;
use rand_distr::StandardNormal;

/// Within-class pixel noise (standard deviation) around the class template.
pub const BLOB_NOISE_STD: f64 = 0.05;

/// Generate `classes` Gaussian blobs of `per_class` examples each.
/// `separation` scales how far class templates sit from the mid-gray image;
/// separation 0 makes every template identical.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    shape: (usize, usize, usize),
    separation: f64,
    master_seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if separation < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "separation must be nonnegative, got {separation}"
        )));
    }
    let (h, w, c) = shape;
    let d = h * w * c;

    let mut templates = Vec::with_capacity(classes);
    for class in 0..classes {
        let mut rng = seed::rng(master_seed, "synth.template", class as u64);
        let t: Vec<f64> = (0..d)
            .map(|_| {
                let u: f64 = rng.gen_range(-0.5..0.5);
                (0.5 + separation * u).clamp(0.0, 1.0)
            })
            .collect();
        templates.push(t);
    }

    let mut examples = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        for j in 0..per_class {
            let idx = (class * per_class + j) as u64;
            let mut rng = seed::rng(master_seed, "synth.example", idx);
            let pixels: Vec<f64> = templates[class]
                .iter()
                .map(|&t| {
                    let z: f64 = rng.sample(StandardNormal);
                    quantize((t + BLOB_NOISE_STD * z).clamp(0.0, 1.0))
                })
                .collect();
            examples.push(Example {
                image: ImageTensor::new(h, w, c, pixels),
                label: SoftLabel::one_hot(class, classes),
                poisoned: false,
            });
        }
    }
    Ok(LabeledDataset::new(examples, classes, "synth_blobs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = synth_blobs(3, 200, (8, 8, 1), 0.5, 1).unwrap();
        let b = synth_blobs(3, 200, (8, 8, 1), 0.5, 1).unwrap();
        assert_eq!(a.examples, b.examples);
    }

    #[test]
    fn zero_separation_shares_templates() {
        // With separation 0 every class template is mid-gray; class means
        // should be statistically indistinguishable.
        let ds = synth_blobs(2, 50, (4, 4, 1), 0.0, 2).unwrap();
        let mean = |class: usize| -> f64 {
            let idx = ds.class_indices(class);
            let mut s = 0.0;
            for &i in &idx {
                s += ds.examples[i].image.pixels.iter().sum::<f64>() / 16.0;
            }
            s / idx.len() as f64
        };
        assert!((mean(0) - mean(1)).abs() < 0.05);
    }

    #[test]
    fn pixels_in_unit_interval() {
        let ds = synth_blobs(3, 20, (8, 8, 1), 2.0, 3).unwrap();
        for e in &ds.examples {
            assert!(e.image.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(synth_blobs(1, 10, (4, 4, 1), 0.5, 0).is_err());
        assert!(synth_blobs(3, 10, (4, 4, 1), -0.1, 0).is_err());
    }
}
