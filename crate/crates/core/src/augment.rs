//! Mixing augmentations: equal-weight k-way mixup, Cutout, CutMix, and
//! MaxUp worst-case candidate selection. All are deterministic functions of
//! their inputs and seed.

use crate::datastore::{ImageTensor, LabeledDataset, SoftLabel};
use crate::error::{Error, Result};
use crate::seed;
use rand::seq::index::sample;
use rand::Rng;

/// Mixture width and sampling mode for mixup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSpec {
    pub k: usize,
    /// With-replacement sampling is a training-time convenience; the
    /// release mechanism always samples k-subsets without replacement.
    pub with_replacement: bool,
}

/// Rectangular patch, either pinned or placed uniformly at random.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
    pub location: PatchLocation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatchLocation {
    At { row: usize, col: usize },
    Random,
}

impl PatchSpec {
    fn resolve(&self, img_h: usize, img_w: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
        if self.height > img_h || self.width > img_w {
            return Err(Error::InvalidParameter(format!(
                "patch {}x{} does not fit in image {}x{}",
                self.height, self.width, img_h, img_w
            )));
        }
        match self.location {
            PatchLocation::At { row, col } => {
                if row + self.height > img_h || col + self.width > img_w {
                    return Err(Error::InvalidParameter(format!(
                        "patch at ({row},{col}) exceeds image bounds"
                    )));
                }
                Ok((row, col))
            }
            PatchLocation::Random => {
                let row = rng.gen_range(0..=img_h - self.height);
                let col = rng.gen_range(0..=img_w - self.width);
                Ok((row, col))
            }
        }
    }
}

/// Average a uniformly random k-subset (or k-tuple with replacement) of the
/// dataset: x_hat = (1/k) sum x_i, y_hat = (1/k) sum y_i.
pub fn mixup_k(
    ds: &LabeledDataset,
    spec: MixSpec,
    master_seed: u64,
) -> Result<(ImageTensor, SoftLabel)> {
    let n = ds.len();
    if spec.k == 0 {
        return Err(Error::InvalidParameter("mixture width k must be >= 1".into()));
    }
    if !spec.with_replacement && spec.k > n {
        return Err(Error::InvalidParameter(format!(
            "k={} exceeds dataset size {n} without replacement",
            spec.k
        )));
    }
    let mut rng = seed::rng(master_seed, "augment.mixup", 0);
    let indices: Vec<usize> = if spec.with_replacement {
        (0..spec.k).map(|_| rng.gen_range(0..n)).collect()
    } else {
        sample(&mut rng, n, spec.k).into_vec()
    };
    Ok(mix_indices(ds, &indices))
}

/// Equal-weight average of the given dataset indices.
pub fn mix_indices(ds: &LabeledDataset, indices: &[usize]) -> (ImageTensor, SoftLabel) {
    let first = &ds.examples[indices[0]].image;
    let (h, w, c) = first.shape();
    let inv = 1.0 / indices.len() as f64;
    let mut pixels = vec![0.0; first.dim()];
    let mut probs = vec![0.0; ds.class_count];
    for &i in indices {
        let e = &ds.examples[i];
        for (acc, &p) in pixels.iter_mut().zip(&e.image.pixels) {
            *acc += p * inv;
        }
        for (acc, &p) in probs.iter_mut().zip(&e.label.probs) {
            *acc += p * inv;
        }
    }
    (ImageTensor::new(h, w, c, pixels), SoftLabel { probs })
}

/// Zero out a patch of the image.
pub fn cutout(img: &ImageTensor, patch: &PatchSpec, master_seed: u64) -> Result<ImageTensor> {
    let mut rng = seed::rng(master_seed, "augment.cutout", 0);
    cutout_with_rng(img, patch, &mut rng)
}

pub(crate) fn cutout_with_rng(
    img: &ImageTensor,
    patch: &PatchSpec,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    if patch.height == 0 || patch.width == 0 {
        return Ok(img.clone());
    }
    let (row, col) = patch.resolve(img.height, img.width, rng)?;
    let mut out = img.clone();
    for ch in 0..img.channels {
        for r in row..row + patch.height {
            for c in col..col + patch.width {
                out.set(ch, r, c, 0.0);
            }
        }
    }
    Ok(out)
}

/// Paste a patch of `b` onto `a`; the label mixes by exact area fraction.
pub fn cutmix(
    a: (&ImageTensor, &SoftLabel),
    b: (&ImageTensor, &SoftLabel),
    patch: &PatchSpec,
    master_seed: u64,
) -> Result<(ImageTensor, SoftLabel)> {
    let mut rng = seed::rng(master_seed, "augment.cutmix", 0);
    cutmix_with_rng(a, b, patch, &mut rng)
}

pub(crate) fn cutmix_with_rng(
    (img_a, lbl_a): (&ImageTensor, &SoftLabel),
    (img_b, lbl_b): (&ImageTensor, &SoftLabel),
    patch: &PatchSpec,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, SoftLabel)> {
    if img_a.shape() != img_b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "cutmix inputs {:?} vs {:?}",
            img_a.shape(),
            img_b.shape()
        )));
    }
    let rho = (patch.height * patch.width) as f64 / (img_a.height * img_a.width) as f64;
    let mut out = img_a.clone();
    if patch.height > 0 && patch.width > 0 {
        let (row, col) = patch.resolve(img_a.height, img_a.width, rng)?;
        for ch in 0..img_a.channels {
            for r in row..row + patch.height {
                for c in col..col + patch.width {
                    out.set(ch, r, c, img_b.get(ch, r, c));
                }
            }
        }
    }
    let probs = lbl_a
        .probs
        .iter()
        .zip(&lbl_b.probs)
        .map(|(&pa, &pb)| (1.0 - rho) * pa + rho * pb)
        .collect();
    Ok((out, SoftLabel { probs }))
}

/// Index of the worst-case (maximum) loss; ties broken by lowest index.
pub fn maxup_select(losses: &[f64]) -> Result<usize> {
    if losses.is_empty() {
        return Err(Error::InvalidParameter("maxup_select: empty loss list".into()));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidParameter("maxup_select: non-finite loss".into()));
    }
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l > losses[best] {
            best = i;
        }
    }
    Ok(best)
}
