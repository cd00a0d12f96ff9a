//! Poisoning attack generators: the backdoor patch attack and the
//! feature-collision (clean-label) attack.
//!
//! The backdoor attack plants a fixed trigger patch into a fraction of the
//! target class at training time; at test time the same patch is pasted onto
//! victim-class images and the attack succeeds when the model labels them as
//! the target class. Feature collision instead perturbs base images within an
//! l-infinity budget so their penultimate features approach a chosen target's.

use rand::Rng;
use rayon::prelude::*;

use crate::datastore::{Example, ImageTensor, LabeledDataset};
use crate::error::{Error, Result};
use crate::seed;
use crate::trainer::{feature_match_input_grad, Model};

/// Parameters of the backdoor patch attack.
#[derive(Debug, Clone)]
pub struct BackdoorSpec {
    pub patch_h: usize,
    pub patch_w: usize,
    pub bernoulli_p: f64,
    pub target_class: usize,
    pub victim_class: usize,
    /// Fraction of the target class to poison, in (0, 1].
    pub poison_fraction: f64,
    pub seed: u64,
}

impl BackdoorSpec {
    pub fn new(target_class: usize, victim_class: usize, poison_fraction: f64, seed: u64) -> Self {
        BackdoorSpec {
            patch_h: 4,
            patch_w: 4,
            bernoulli_p: 0.5,
            target_class,
            victim_class,
            poison_fraction,
            seed,
        }
    }

    fn validate(&self, shape: (usize, usize, usize)) -> Result<()> {
        if self.target_class == self.victim_class {
            return Err(Error::InvalidParameter(format!(
                "target and victim class must differ, both are {}",
                self.target_class
            )));
        }
        if !(self.poison_fraction > 0.0 && self.poison_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "poison fraction must lie in (0, 1], got {}",
                self.poison_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.bernoulli_p) {
            return Err(Error::InvalidParameter(format!(
                "bernoulli_p must lie in [0, 1], got {}",
                self.bernoulli_p
            )));
        }
        let (h, w, _) = shape;
        if self.patch_h > h || self.patch_w > w {
            return Err(Error::InvalidParameter(format!(
                "{}x{} patch does not fit a {}x{} image",
                self.patch_h, self.patch_w, h, w
            )));
        }
        Ok(())
    }
}

/// Parameters of the feature-collision attack. Bases index the training set,
/// the target indexes the victim test set.
#[derive(Debug, Clone)]
pub struct CollisionSpec {
    pub base_indices: Vec<usize>,
    pub target_index: usize,
    pub steps: usize,
    pub step_size: f64,
    /// Weight of the ||x - x_b||^2 perturbation regularizer.
    pub beta: f64,
    pub linf_budget: f64,
}

impl CollisionSpec {
    pub fn new(base_indices: Vec<usize>, target_index: usize) -> Self {
        CollisionSpec {
            base_indices,
            target_index,
            steps: 200,
            step_size: 0.01,
            beta: 0.1,
            linf_budget: 16.0 / 255.0,
        }
    }
}

/// The shared trigger: i.i.d. Bernoulli(p) values standardized by the
/// training set's per-channel mean/std and clipped back to [0, 1].
/// Deterministic for a fixed spec seed and training statistics.
pub fn gen_patch(spec: &BackdoorSpec, train: &LabeledDataset) -> Result<ImageTensor> {
    let shape = train
        .shape()
        .ok_or_else(|| Error::InvalidParameter("empty training set".into()))?;
    spec.validate(shape)?;
    let stats = train.channel_stats();
    let channels = shape.2;
    let mut rng = seed::rng(spec.seed, "attack.patch", 0);
    let mut patch = ImageTensor::zeros(spec.patch_h, spec.patch_w, channels);
    for c in 0..channels {
        let (mean, std) = stats[c];
        let std = if std > 0.0 { std } else { 1.0 };
        for r in 0..spec.patch_h {
            for col in 0..spec.patch_w {
                let bit = if rng.gen::<f64>() < spec.bernoulli_p { 1.0 } else { 0.0 };
                patch.set(c, r, col, ((bit - mean) / std).clamp(0.0, 1.0));
            }
        }
    }
    Ok(patch)
}

fn paste_patch(img: &mut ImageTensor, patch: &ImageTensor, row: usize, col: usize) {
    for c in 0..patch.channels {
        for r in 0..patch.height {
            for cc in 0..patch.width {
                img.set(c, row + r, col + cc, patch.get(c, r, cc));
            }
        }
    }
}

fn random_location(
    img: (usize, usize),
    patch: (usize, usize),
    rng: &mut impl Rng,
) -> (usize, usize) {
    let row = rng.gen_range(0..=img.0 - patch.0);
    let col = rng.gen_range(0..=img.1 - patch.1);
    (row, col)
}

/// Poison ceil(fraction * |target class|) target-class images with the patch
/// at independent uniform locations. Labels are untouched: the patch is the
/// trigger and the poisoned images keep their (target-class) labels.
pub fn apply_backdoor(
    ds: &LabeledDataset,
    spec: &BackdoorSpec,
    patch: &ImageTensor,
) -> Result<LabeledDataset> {
    let shape = ds
        .shape()
        .ok_or_else(|| Error::InvalidParameter("empty dataset".into()))?;
    spec.validate(shape)?;
    let targets = ds.class_indices(spec.target_class);
    if targets.is_empty() {
        return Err(Error::EmptyClass(spec.target_class));
    }
    let count = (spec.poison_fraction * targets.len() as f64).ceil() as usize;
    let count = count.min(targets.len());
    // Poison the first `count` target-class indices in dataset order; the
    // randomness that matters (patch content, locations) is seeded per image.
    let mut out = ds.clone();
    for (slot, &idx) in targets.iter().take(count).enumerate() {
        let mut rng = seed::rng(spec.seed, "attack.place", slot as u64);
        let (row, col) = random_location(
            (shape.0, shape.1),
            (spec.patch_h, spec.patch_w),
            &mut rng,
        );
        paste_patch(&mut out.examples[idx].image, patch, row, col);
        out.examples[idx].poisoned = true;
    }
    Ok(out)
}

/// Extract the victim-class slice of the test set and paste the same patch
/// onto every image at a fresh random location. Labels are kept as-is for
/// bookkeeping; success is judged against the target class by the caller.
pub fn patch_test_set(
    test_ds: &LabeledDataset,
    spec: &BackdoorSpec,
    patch: &ImageTensor,
) -> Result<LabeledDataset> {
    let shape = test_ds
        .shape()
        .ok_or_else(|| Error::InvalidParameter("empty test set".into()))?;
    spec.validate(shape)?;
    let victims = test_ds.class_indices(spec.victim_class);
    if victims.is_empty() {
        return Err(Error::EmptyClass(spec.victim_class));
    }
    let examples = victims
        .iter()
        .enumerate()
        .map(|(slot, &idx)| {
            let mut rng = seed::rng(spec.seed, "attack.place.test", slot as u64);
            let (row, col) = random_location(
                (shape.0, shape.1),
                (spec.patch_h, spec.patch_w),
                &mut rng,
            );
            let mut ex = test_ds.examples[idx].clone();
            paste_patch(&mut ex.image, patch, row, col);
            ex.poisoned = true;
            ex
        })
        .collect();
    Ok(LabeledDataset::new(
        examples,
        test_ds.class_count,
        format!("{}-patched-victims", test_ds.name),
    ))
}

fn craft_one(
    model: &Model,
    base: &Example,
    target_features: &[f64],
    spec: &CollisionSpec,
) -> Result<Example> {
    let mut x = base.image.clone();
    for step in 0..spec.steps {
        let (feat_loss, mut grad) = feature_match_input_grad(model, &x, target_features)?;
        let reg: f64 = x
            .pixels
            .iter()
            .zip(&base.image.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if !(feat_loss + spec.beta * reg).is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite collision loss at step {step}"
            )));
        }
        for ((g, xv), bv) in grad.iter_mut().zip(&x.pixels).zip(&base.image.pixels) {
            *g += 2.0 * spec.beta * (xv - bv);
        }
        for ((xv, g), bv) in x.pixels.iter_mut().zip(&grad).zip(&base.image.pixels) {
            *xv = (*xv - spec.step_size * g)
                .clamp(bv - spec.linf_budget, bv + spec.linf_budget)
                .clamp(0.0, 1.0);
        }
    }
    Ok(Example {
        image: x,
        label: base.label.clone(),
        poisoned: true,
    })
}

/// Replace each base image with the result of projected gradient descent on
/// ||f(x) - f(target)||^2 + beta * ||x - x_b||^2. Labels are unchanged: this
/// is a clean-label attack. Returns the full training set with the crafted
/// bases swapped in and flagged.
pub fn craft_feature_collision(
    train: &LabeledDataset,
    victim_test: &LabeledDataset,
    model: &Model,
    spec: &CollisionSpec,
) -> Result<LabeledDataset> {
    if !(spec.linf_budget > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "linf budget must be positive, got {}",
            spec.linf_budget
        )));
    }
    if !(spec.step_size > 0.0) || !(spec.beta >= 0.0) {
        return Err(Error::InvalidParameter(
            "step size must be positive and beta non-negative".into(),
        ));
    }
    let target = victim_test
        .examples
        .get(spec.target_index)
        .ok_or_else(|| {
            Error::InvalidParameter(format!(
                "target index {} out of range 0..{}",
                spec.target_index,
                victim_test.len()
            ))
        })?;
    for &b in &spec.base_indices {
        if b >= train.len() {
            return Err(Error::InvalidParameter(format!(
                "base index {b} out of range 0..{}",
                train.len()
            )));
        }
    }
    let target_features = model.features(&target.image)?;

    let crafted: Vec<(usize, Example)> = spec
        .base_indices
        .par_iter()
        .map(|&b| craft_one(model, &train.examples[b], &target_features, spec).map(|e| (b, e)))
        .collect::<Result<_>>()?;

    let mut out = train.clone();
    for (idx, ex) in crafted {
        out.examples[idx] = ex;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::synth_blobs;
    use crate::datastore::SoftLabel;
    use crate::trainer::{train, Architecture, ModelSpec, TrainConfig};

    fn blob_ds() -> LabeledDataset {
        synth_blobs(3, 20, (8, 8, 1), 0.8, 11).unwrap()
    }

    #[test]
    fn patch_is_deterministic_and_in_range() {
        let ds = blob_ds();
        let spec = BackdoorSpec::new(0, 1, 0.5, 7);
        let a = gen_patch(&spec, &ds).unwrap();
        let b = gen_patch(&spec, &ds).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert!(a.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.shape(), (4, 4, 1));
    }

    #[test]
    fn extreme_bernoulli_probabilities_give_constant_patches() {
        let ds = blob_ds();
        let mut spec = BackdoorSpec::new(0, 1, 0.5, 7);
        spec.bernoulli_p = 0.0;
        let zero = gen_patch(&spec, &ds).unwrap();
        assert!(zero.pixels.windows(2).all(|w| w[0] == w[1]));
        spec.bernoulli_p = 1.0;
        let one = gen_patch(&spec, &ds).unwrap();
        assert!(one.pixels.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(zero.pixels[0], one.pixels[0]);
    }

    #[test]
    fn bernoulli_ones_average_near_half() {
        // Pre-normalization bit count; recover it by standardizing manually.
        let ds = blob_ds();
        let stats = ds.channel_stats();
        let (mean, std) = stats[0];
        let mut ones = 0usize;
        let trials = 500;
        for s in 0..trials {
            let spec = BackdoorSpec::new(0, 1, 0.5, s);
            let patch = gen_patch(&spec, &ds).unwrap();
            ones += patch
                .pixels
                .iter()
                .filter(|&&v| {
                    // invert clipping-free standardization to recover the bit
                    let unclipped_one = ((1.0 - mean) / std).clamp(0.0, 1.0);
                    (v - unclipped_one).abs() < 1e-12
                })
                .count();
        }
        let avg = ones as f64 / trials as f64;
        assert!((avg - 8.0).abs() < 0.5, "mean ones per 4x4 patch = {avg}");
    }

    #[test]
    fn backdoor_poisons_exact_count_in_target_class_only() {
        let ds = blob_ds();
        let spec = BackdoorSpec::new(2, 0, 0.1, 3);
        let patch = gen_patch(&spec, &ds).unwrap();
        let poisoned = apply_backdoor(&ds, &spec, &patch).unwrap();
        let flagged: Vec<usize> = poisoned
            .examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.poisoned)
            .map(|(i, _)| i)
            .collect();
        // ceil(0.1 * 20) = 2
        assert_eq!(flagged.len(), 2);
        for &i in &flagged {
            assert_eq!(poisoned.examples[i].label.hard(), 2);
            assert_eq!(poisoned.examples[i].label.probs, ds.examples[i].label.probs);
        }
        for (i, (a, b)) in ds.examples.iter().zip(&poisoned.examples).enumerate() {
            if !flagged.contains(&i) {
                assert_eq!(a.image.pixels, b.image.pixels, "untouched image {i} changed");
            } else {
                let diff = a
                    .image
                    .pixels
                    .iter()
                    .zip(&b.image.pixels)
                    .filter(|(x, y)| x != y)
                    .count();
                assert!(diff <= 16, "patch footprint exceeded: {diff} pixels changed");
            }
        }
    }

    #[test]
    fn full_fraction_poisons_whole_class() {
        let ds = blob_ds();
        let spec = BackdoorSpec::new(1, 2, 1.0, 3);
        let patch = gen_patch(&spec, &ds).unwrap();
        let poisoned = apply_backdoor(&ds, &spec, &patch).unwrap();
        for e in &poisoned.examples {
            assert_eq!(e.poisoned, e.label.hard() == 1);
        }
    }

    #[test]
    fn patched_test_set_reuses_the_training_trigger() {
        let ds = blob_ds();
        let spec = BackdoorSpec::new(2, 0, 1.0, 3);
        let patch = gen_patch(&spec, &ds).unwrap();
        let victims = patch_test_set(&ds, &spec, &patch).unwrap();
        assert_eq!(victims.len(), 20);
        for e in &victims.examples {
            assert!(e.poisoned);
            assert_eq!(e.label.hard(), 0);
            // the patch values must appear verbatim somewhere in the image
            let found = (0..=4usize).any(|r| {
                (0..=4usize).any(|c| {
                    (0..4).all(|pr| {
                        (0..4).all(|pc| e.image.get(0, r + pr, c + pc) == patch.get(0, pr, pc))
                    })
                })
            });
            assert!(found, "trigger not found bitwise in a patched victim");
        }
    }

    #[test]
    fn rejects_degenerate_specs() {
        let ds = blob_ds();
        let same = BackdoorSpec::new(1, 1, 0.5, 0);
        assert!(gen_patch(&same, &ds).is_err());
        let mut oversize = BackdoorSpec::new(0, 1, 0.5, 0);
        oversize.patch_h = 9;
        assert!(gen_patch(&oversize, &ds).is_err());
        let bad_frac = BackdoorSpec::new(0, 1, 0.0, 0);
        assert!(gen_patch(&bad_frac, &ds).is_err());
    }

    fn quick_model(ds: &LabeledDataset) -> Model {
        let spec = ModelSpec {
            arch: Architecture::Mlp { hidden: vec![16] },
            input: (8, 8, 1),
            classes: 3,
        };
        let cfg = TrainConfig {
            epochs: 3,
            batch: 16,
            seed: 5,
            ..TrainConfig::default()
        };
        train(ds, &spec, &cfg).unwrap()
    }

    #[test]
    fn collision_respects_budget_and_reduces_feature_distance() {
        let ds = blob_ds();
        let model = quick_model(&ds);
        let target_idx = ds.class_indices(0)[0];
        let base_idx = ds.class_indices(2)[0];
        let spec = CollisionSpec {
            steps: 50,
            ..CollisionSpec::new(vec![base_idx], target_idx)
        };
        let crafted = craft_feature_collision(&ds, &ds, &model, &spec).unwrap();
        let base = &ds.examples[base_idx];
        let out = &crafted.examples[base_idx];
        assert!(out.poisoned);
        assert_eq!(out.label.probs, base.label.probs);
        let max_dev = out
            .image
            .pixels
            .iter()
            .zip(&base.image.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev <= spec.linf_budget + 1e-6, "budget violated: {max_dev}");

        let tf = model.features(&ds.examples[target_idx].image).unwrap();
        let dist = |img: &ImageTensor| -> f64 {
            model
                .features(img)
                .unwrap()
                .iter()
                .zip(&tf)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        assert!(dist(&out.image) < dist(&base.image));
    }

    #[test]
    fn zero_steps_and_huge_beta_leave_bases_unchanged() {
        let ds = blob_ds();
        let model = quick_model(&ds);
        let base_idx = ds.class_indices(1)[0];
        let zero_steps = CollisionSpec {
            steps: 0,
            ..CollisionSpec::new(vec![base_idx], 0)
        };
        let out = craft_feature_collision(&ds, &ds, &model, &zero_steps).unwrap();
        assert_eq!(out.examples[base_idx].image.pixels, ds.examples[base_idx].image.pixels);

        let huge_beta = CollisionSpec {
            steps: 20,
            beta: 1e9,
            step_size: 1e-12,
            ..CollisionSpec::new(vec![base_idx], 0)
        };
        let out = craft_feature_collision(&ds, &ds, &model, &huge_beta).unwrap();
        let max_dev = out.examples[base_idx]
            .image
            .pixels
            .iter()
            .zip(&ds.examples[base_idx].image.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-6, "beta->inf should pin x to the base, drifted {max_dev}");
    }

    #[test]
    fn collision_rejects_bad_indices_and_budget() {
        let ds = blob_ds();
        let model = quick_model(&ds);
        let mut spec = CollisionSpec::new(vec![0], 999);
        assert!(craft_feature_collision(&ds, &ds, &model, &spec).is_err());
        spec.target_index = 0;
        spec.base_indices = vec![999];
        assert!(craft_feature_collision(&ds, &ds, &model, &spec).is_err());
        spec.base_indices = vec![0];
        spec.linf_budget = 0.0;
        assert!(craft_feature_collision(&ds, &ds, &model, &spec).is_err());
    }

    #[test]
    fn labels_survive_patching_as_soft_labels() {
        let mut ds = blob_ds();
        // give one target-class image a soft label and confirm it's preserved
        let idx = ds.class_indices(2)[0];
        ds.examples[idx].label = SoftLabel { probs: vec![0.1, 0.1, 0.8] };
        let spec = BackdoorSpec::new(2, 0, 1.0, 3);
        let patch = gen_patch(&spec, &ds).unwrap();
        let poisoned = apply_backdoor(&ds, &spec, &patch).unwrap();
        assert_eq!(poisoned.examples[idx].label.probs, vec![0.1, 0.1, 0.8]);
    }
}
