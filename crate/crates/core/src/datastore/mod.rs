//! Dataset ingestion, normalization, synthetic generation and splitting.
//!
//! All pixels live in [0,1] after ingestion and are quantized to f32 so the
//! on-disk container round-trips bit-exactly. Labels are probability vectors
//! over the class set.

mod cifar;
mod container;
mod idx;
mod synth;

pub use cifar::load_cifar_binary;
pub use container::{decode_dataset, encode_dataset, read_container, write_container};
pub use idx::load_idx;
pub use synth::synth_blobs;

use crate::error::{Error, Result};
use crate::seed;
use rand::seq::SliceRandom;

/// Flat image with shape metadata. Pixel order is channel-planar:
/// all of channel 0 row-major, then channel 1, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width * channels);
        ImageTensor {
            height,
            width,
            channels,
            pixels,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageTensor::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn index(&self, ch: usize, row: usize, col: usize) -> usize {
        ch * self.height * self.width + row * self.width + col
    }

    pub fn get(&self, ch: usize, row: usize, col: usize) -> f64 {
        self.pixels[self.index(ch, row, col)]
    }

    pub fn set(&mut self, ch: usize, row: usize, col: usize, v: f64) {
        let i = self.index(ch, row, col);
        self.pixels[i] = v;
    }
}

/// Probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    pub probs: Vec<f64>,
}

impl SoftLabel {
    pub fn one_hot(class: usize, class_count: usize) -> Self {
        let mut probs = vec![0.0; class_count];
        probs[class] = 1.0;
        SoftLabel { probs }
    }

    /// Argmax class; ties broken by lowest index.
    pub fn hard(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_on_simplex(&self, tol: f64) -> bool {
        self.probs.iter().all(|&p| p >= 0.0)
            && (self.probs.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: ImageTensor,
    pub label: SoftLabel,
    pub poisoned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub examples: Vec<Example>,
    pub class_count: usize,
    pub name: String,
    /// Scale factor applied by `rescale_to_diameter`; 1.0 means raw [0,1] pixels.
    pub pixel_scale: f64,
}

/// Assumed l1 diameter of the data domain, in pixel-intensity units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiameterModel {
    pub delta: f64,
}

impl DiameterModel {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "diameter must be positive, got {delta}"
            )));
        }
        Ok(DiameterModel { delta })
    }
}

impl LabeledDataset {
    pub fn new(examples: Vec<Example>, class_count: usize, name: impl Into<String>) -> Self {
        LabeledDataset {
            examples,
            class_count,
            name: name.into(),
            pixel_scale: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.examples.first().map(|e| e.image.shape())
    }

    /// Indices of examples whose hard label is `class`.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label.hard() == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-channel mean and standard deviation of the pixel intensities.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let (_, _, c) = self.shape().expect("empty dataset");
        let mut stats = Vec::with_capacity(c);
        for ch in 0..c {
            let mut sum = 0.0;
            let mut count = 0usize;
            for e in &self.examples {
                let plane = e.image.height * e.image.width;
                for i in 0..plane {
                    sum += e.image.pixels[ch * plane + i];
                }
                count += plane;
            }
            let mean = sum / count as f64;
            let mut var = 0.0;
            for e in &self.examples {
                let plane = e.image.height * e.image.width;
                for i in 0..plane {
                    let d = e.image.pixels[ch * plane + i] - mean;
                    var += d * d;
                }
            }
            stats.push((mean, (var / count as f64).sqrt()));
        }
        stats
    }
}

/// Quantize a pixel value through f32, matching the container precision.
pub(crate) fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Affinely rescale pixels so the containing hypercube has l1 diameter
/// `target.delta` (scale factor delta/d applied to [0,1]^d pixels).
pub fn rescale_to_diameter(ds: &LabeledDataset, target: DiameterModel) -> LabeledDataset {
    let d = ds.shape().map(|(h, w, c)| h * w * c).unwrap_or(1);
    let scale = target.delta / d as f64;
    let mut out = ds.clone();
    for e in &mut out.examples {
        for p in &mut e.image.pixels {
            *p *= scale;
        }
    }
    out.pixel_scale = ds.pixel_scale * scale;
    out
}

/// Undo `rescale_to_diameter`, restoring raw-intensity pixels.
pub fn undo_rescale(ds: &LabeledDataset) -> LabeledDataset {
    let mut out = ds.clone();
    let inv = 1.0 / ds.pixel_scale;
    for e in &mut out.examples {
        for p in &mut e.image.pixels {
            *p *= inv;
        }
    }
    out.pixel_scale = 1.0;
    out
}

/// Stratified train/test split. Each class is shuffled with a class-indexed
/// sub-seed, so the partition does not depend on class iteration order.
pub fn split(
    ds: &LabeledDataset,
    train_fraction: f64,
    master_seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let n = ds.len();
    let total_train = (train_fraction * n as f64).round() as usize;

    let mut per_class: Vec<Vec<usize>> = Vec::with_capacity(ds.class_count);
    for c in 0..ds.class_count {
        let idx = ds.class_indices(c);
        if !idx.is_empty() && idx.len() < 2 {
            return Err(Error::UnstratifiableClass {
                class: c,
                count: idx.len(),
            });
        }
        per_class.push(idx);
    }

    // Floor per class, then hand out the remainder by largest fractional part
    // (ties by class index) so the train side has exactly total_train examples.
    let mut counts: Vec<usize> = Vec::with_capacity(ds.class_count);
    let mut fracs: Vec<(usize, f64)> = Vec::new();
    for (c, idx) in per_class.iter().enumerate() {
        let exact = train_fraction * idx.len() as f64;
        let fl = exact.floor() as usize;
        counts.push(fl);
        fracs.push((c, exact - fl as f64));
    }
    let mut remaining = total_train.saturating_sub(counts.iter().sum());
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(c, _) in &fracs {
        if remaining == 0 {
            break;
        }
        if counts[c] < per_class[c].len() {
            counts[c] += 1;
            remaining -= 1;
        }
    }

    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (c, idx) in per_class.iter().enumerate() {
        let mut shuffled = idx.clone();
        let mut rng = seed::rng(master_seed, "split.class", c as u64);
        shuffled.shuffle(&mut rng);
        train_idx.extend_from_slice(&shuffled[..counts[c]]);
        test_idx.extend_from_slice(&shuffled[counts[c]..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let pick = |idx: &[usize], tag: &str| LabeledDataset {
        examples: idx.iter().map(|&i| ds.examples[i].clone()).collect(),
        class_count: ds.class_count,
        name: format!("{}.{tag}", ds.name),
        pixel_scale: ds.pixel_scale,
    };
    Ok((pick(&train_idx, "train"), pick(&test_idx, "test")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_per_class: usize, classes: usize) -> LabeledDataset {
        let mut examples = Vec::new();
        for c in 0..classes {
            for i in 0..n_per_class {
                examples.push(Example {
                    image: ImageTensor::new(2, 2, 1, vec![i as f64 / 10.0; 4]),
                    label: SoftLabel::one_hot(c, classes),
                    poisoned: false,
                });
            }
        }
        LabeledDataset::new(examples, classes, "tiny")
    }

    #[test]
    fn rescale_all_ones_quarter() {
        let mut ds = tiny(1, 2);
        for e in &mut ds.examples {
            e.image.pixels = vec![1.0; 4];
        }
        let out = rescale_to_diameter(&ds, DiameterModel::new(1.0).unwrap());
        for e in &out.examples {
            assert!(e.image.pixels.iter().all(|&p| p == 0.25));
        }
    }

    #[test]
    fn rescale_identity_at_delta_d() {
        let ds = tiny(2, 2);
        let out = rescale_to_diameter(&ds, DiameterModel::new(4.0).unwrap());
        assert_eq!(out.examples, ds.examples);
    }

    #[test]
    fn rescale_opposite_corners_distance_one() {
        let mut ds = tiny(1, 2);
        ds.examples[0].image.pixels = vec![0.0; 4];
        ds.examples[1].image.pixels = vec![1.0; 4];
        let out = rescale_to_diameter(&ds, DiameterModel::new(1.0).unwrap());
        let l1: f64 = out.examples[0]
            .image
            .pixels
            .iter()
            .zip(&out.examples[1].image.pixels)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!((l1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rescale_inverse_round_trip() {
        let ds = tiny(3, 2);
        let out = rescale_to_diameter(&ds, DiameterModel::new(1.0).unwrap());
        let back = undo_rescale(&out);
        for (a, b) in back.examples.iter().zip(&ds.examples) {
            for (x, y) in a.image.pixels.iter().zip(&b.image.pixels) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = tiny(50, 2);
        let (tr, te) = split(&ds, 0.8, 7).unwrap();
        assert_eq!(tr.len(), 80);
        assert_eq!(te.len(), 20);
        let (tr2, te2) = split(&ds, 0.8, 7).unwrap();
        assert_eq!(tr.examples, tr2.examples);
        assert_eq!(te.examples, te2.examples);
        // disjoint partition covering everything
        assert_eq!(tr.len() + te.len(), ds.len());
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = tiny(5, 2);
        assert!(split(&ds, 1.0, 0).is_err());
        assert!(split(&ds, 0.0, 0).is_err());
    }

    #[test]
    fn split_rejects_singleton_class() {
        let mut ds = tiny(5, 2);
        ds.examples.truncate(6); // class 1 has a single example
        assert!(split(&ds, 0.5, 0).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let ds = tiny(10, 3);
        let (tr, _) = split(&ds, 0.8, 3).unwrap();
        for c in 0..3 {
            assert_eq!(tr.class_indices(c).len(), 8);
        }
    }
}
