//! Deterministic from-scratch SGD trainer with configurable mixing
//! augmentations and an optional DP-SGD mode (minibatch-level clipping plus
//! Gaussian gradient noise).

pub mod model;

pub use model::{
    load_checkpoint, save_checkpoint, Architecture, EpochStats, Model, ModelSpec,
};

use crate::augment::{self, PatchLocation, PatchSpec};
use crate::datastore::{ImageTensor, LabeledDataset, SoftLabel};
use crate::error::{Error, Result};
use crate::privacy::laplace_draw;
use crate::seed;
use model::GradBuf;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub enum AugmentPolicy {
    None,
    /// k-tuples drawn within the batch with replacement.
    Mixup { k: usize },
    /// Randomized activation per batch with the given probability.
    CutMix { prob: f64 },
    Cutout { height: usize, width: usize },
    /// Worst-case selection over cutout candidates, with a warm start of
    /// plain single-draw cutout for the first `warm_epochs` epochs.
    MaxUp {
        candidates: usize,
        cutout: (usize, usize),
        warm_epochs: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpSgdConfig {
    pub clip_norm: f64,
    pub gauss_noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// (epoch, factor): at the start of that epoch the rate is multiplied.
    pub lr_drops: Vec<(usize, f64)>,
    pub policy: AugmentPolicy,
    /// Laplacian input noise scale; 0 disables it.
    pub input_noise_sigma: f64,
    pub dp_sgd: Option<DpSgdConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drops: Vec::new(),
            policy: AugmentPolicy::None,
            input_noise_sigma: 0.0,
            dp_sgd: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidParameter(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidParameter("batch must be >= 1".into()));
        }
        if let Some(dp) = &self.dp_sgd {
            if !(dp.clip_norm > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "dp_sgd clip norm must be positive, got {}",
                    dp.clip_norm
                )));
            }
        }
        if let AugmentPolicy::MaxUp { candidates, .. } = self.policy {
            if candidates == 0 {
                return Err(Error::InvalidParameter("maxup needs >= 1 candidate".into()));
            }
        }
        Ok(())
    }
}

/// Soft-label cross entropy with max-shift stabilization.
pub fn soft_cross_entropy(logits: &[f64], label: &SoftLabel) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    label
        .probs
        .iter()
        .zip(logits)
        .map(|(&y, &l)| y * (log_z - l))
        .sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Predicted class (argmax, ties to the lowest index) and raw logits.
pub fn predict(model: &Model, img: &ImageTensor) -> Result<(usize, Vec<f64>)> {
    let logits = model.logits(img)?;
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    Ok((best, logits))
}

/// Fraction of test examples whose prediction matches the hard label.
pub fn clean_accuracy(model: &Model, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidParameter("empty test set".into()));
    }
    let mut correct = 0;
    for e in &test.examples {
        if predict(model, &e.image)?.0 == e.label.hard() {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Fraction of patched victim images classified as the target class.
pub fn poison_success(
    model: &Model,
    patched_victims: &LabeledDataset,
    target_class: usize,
) -> Result<f64> {
    if patched_victims.is_empty() {
        return Err(Error::InvalidParameter("empty patched victim set".into()));
    }
    let mut hits = 0;
    for e in &patched_victims.examples {
        if predict(model, &e.image)?.0 == target_class {
            hits += 1;
        }
    }
    Ok(hits as f64 / patched_victims.len() as f64)
}

struct BatchView<'a> {
    images: Vec<&'a ImageTensor>,
    labels: Vec<&'a SoftLabel>,
}

/// One training sample after augmentation.
struct Sample {
    pixels: Vec<f64>,
    label: Vec<f64>,
}

fn example_loss(model: &Model, pixels: &[f64], label: &[f64]) -> f64 {
    let trace = model.forward_trace(pixels);
    let logits = trace.acts.last().unwrap();
    soft_cross_entropy(logits, &SoftLabel { probs: label.to_vec() })
}

/// Build the augmented batch. A single per-batch RNG stream drives every
/// random choice, so two policies that make identical draws produce
/// identical batches.
fn build_batch(
    batch: &BatchView,
    policy: &AugmentPolicy,
    input_noise_sigma: f64,
    epoch: usize,
    model: &Model,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    let bsz = batch.images.len();
    let class_count = batch.labels[0].probs.len();
    let mut samples = Vec::with_capacity(bsz);
    match policy {
        AugmentPolicy::None => {
            for i in 0..bsz {
                samples.push(Sample {
                    pixels: batch.images[i].pixels.clone(),
                    label: batch.labels[i].probs.clone(),
                });
            }
        }
        AugmentPolicy::Mixup { k } => {
            let k = (*k).max(1);
            for _ in 0..bsz {
                let mut pixels = vec![0.0; batch.images[0].dim()];
                let mut label = vec![0.0; class_count];
                let inv = 1.0 / k as f64;
                for _ in 0..k {
                    let j = rng.gen_range(0..bsz);
                    for (acc, &p) in pixels.iter_mut().zip(&batch.images[j].pixels) {
                        *acc += p * inv;
                    }
                    for (acc, &p) in label.iter_mut().zip(&batch.labels[j].probs) {
                        *acc += p * inv;
                    }
                }
                samples.push(Sample { pixels, label });
            }
        }
        AugmentPolicy::CutMix { prob } => {
            let active = rng.gen::<f64>() < *prob;
            for i in 0..bsz {
                if !active {
                    samples.push(Sample {
                        pixels: batch.images[i].pixels.clone(),
                        label: batch.labels[i].probs.clone(),
                    });
                    continue;
                }
                let j = rng.gen_range(0..bsz);
                let img = batch.images[i];
                let ph = rng.gen_range(0..=img.height);
                let pw = rng.gen_range(0..=img.width);
                let patch = PatchSpec { height: ph, width: pw, location: PatchLocation::Random };
                let (mixed, lbl) = augment::cutmix_with_rng(
                    (img, batch.labels[i]),
                    (batch.images[j], batch.labels[j]),
                    &patch,
                    rng,
                )?;
                samples.push(Sample { pixels: mixed.pixels, label: lbl.probs });
            }
        }
        AugmentPolicy::Cutout { height, width } => {
            let patch = PatchSpec {
                height: *height,
                width: *width,
                location: PatchLocation::Random,
            };
            for i in 0..bsz {
                let cut = augment::cutout_with_rng(batch.images[i], &patch, rng)?;
                samples.push(Sample { pixels: cut.pixels, label: batch.labels[i].probs.clone() });
            }
        }
        AugmentPolicy::MaxUp { candidates, cutout, warm_epochs } => {
            let patch = PatchSpec {
                height: cutout.0,
                width: cutout.1,
                location: PatchLocation::Random,
            };
            let n_cands = if epoch < *warm_epochs { 1 } else { *candidates };
            for i in 0..bsz {
                let cands: Vec<ImageTensor> = (0..n_cands)
                    .map(|_| augment::cutout_with_rng(batch.images[i], &patch, rng))
                    .collect::<Result<_>>()?;
                let chosen = if cands.len() == 1 {
                    0
                } else {
                    let losses: Vec<f64> = cands
                        .iter()
                        .map(|img| example_loss(model, &img.pixels, &batch.labels[i].probs))
                        .collect();
                    augment::maxup_select(&losses)?
                };
                samples.push(Sample {
                    pixels: cands[chosen].pixels.clone(),
                    label: batch.labels[i].probs.clone(),
                });
            }
        }
    }
    if input_noise_sigma > 0.0 {
        for s in &mut samples {
            for p in &mut s.pixels {
                *p += laplace_draw(input_noise_sigma, rng);
            }
        }
    }
    Ok(samples)
}

fn accumulate_batch_gradient(
    model: &Model,
    samples: &[Sample],
) -> (Vec<GradBuf>, f64) {
    let n_layers = model.layers.len();
    let per_example: Vec<(Vec<GradBuf>, f64)> = samples
        .par_iter()
        .map(|s| {
            let trace = model.forward_trace(&s.pixels);
            let logits = trace.acts.last().unwrap();
            let loss = soft_cross_entropy(logits, &SoftLabel { probs: s.label.clone() });
            let probs = softmax(logits);
            let d_logits: Vec<f64> =
                probs.iter().zip(&s.label).map(|(p, y)| p - y).collect();
            let mut grads = model.zero_grads();
            model.backward_from(&trace, n_layers, d_logits, Some(&mut grads));
            (grads, loss)
        })
        .collect();

    // reduce in example-index order so results are worker-count independent
    let mut total = model.zero_grads();
    let mut loss_sum = 0.0;
    let inv = 1.0 / samples.len() as f64;
    for (grads, loss) in per_example {
        loss_sum += loss;
        for (acc, g) in total.iter_mut().zip(grads) {
            for (a, v) in acc.w.iter_mut().zip(g.w) {
                *a += v * inv;
            }
            for (a, v) in acc.b.iter_mut().zip(g.b) {
                *a += v * inv;
            }
        }
    }
    (total, loss_sum * inv)
}

/// Train a model on the dataset, optionally evaluating on a held-out set at
/// every epoch.
pub fn train_with_eval(
    ds: &LabeledDataset,
    test: Option<&LabeledDataset>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<Model> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let shape = ds.shape().unwrap();
    if shape != spec.input {
        return Err(Error::ShapeMismatch(format!(
            "dataset shape {shape:?} vs model input {:?}",
            spec.input
        )));
    }
    let mut model = Model::init(spec, seed::derive(cfg.seed, "train.init", 0))?;
    let mut velocity = model.zero_grads();
    let mut lr = cfg.lr;
    let n = ds.len();
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        for &(drop_epoch, factor) in &cfg.lr_drops {
            if drop_epoch == epoch {
                lr *= factor;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            let mut shuffle_rng = seed::rng(cfg.seed, "train.shuffle", epoch as u64);
            order.shuffle(&mut shuffle_rng);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch).enumerate() {
            let view = BatchView {
                images: chunk.iter().map(|&i| &ds.examples[i].image).collect(),
                labels: chunk.iter().map(|&i| &ds.examples[i].label).collect(),
            };
            let mut aug_rng = seed::rng(
                cfg.seed,
                "train.augment",
                ((epoch as u64) << 32) | batch_idx as u64,
            );
            let samples = build_batch(
                &view,
                &cfg.policy,
                cfg.input_noise_sigma,
                epoch,
                &model,
                &mut aug_rng,
            )?;
            let (mut grads, loss) = accumulate_batch_gradient(&model, &samples);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            epoch_loss += loss;
            batches += 1;

            // weight decay on the aggregated gradient
            if cfg.weight_decay != 0.0 {
                let mut li = 0;
                for l in &model.layers {
                    match l {
                        model::Layer::Dense { w, .. } | model::Layer::Conv3x3 { w, .. } => {
                            for (g, &wv) in grads[li].w.iter_mut().zip(w.iter()) {
                                *g += cfg.weight_decay * wv;
                            }
                        }
                        model::Layer::MaxPool2 { .. } => {}
                    }
                    li += 1;
                }
            }

            if let Some(dp) = &cfg.dp_sgd {
                let norm: f64 = grads
                    .iter()
                    .flat_map(|g| g.w.iter().chain(g.b.iter()))
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > dp.clip_norm {
                    let scale = dp.clip_norm / norm;
                    for g in &mut grads {
                        g.w.iter_mut().chain(g.b.iter_mut()).for_each(|v| *v *= scale);
                    }
                }
                let post: f64 = grads
                    .iter()
                    .flat_map(|g| g.w.iter().chain(g.b.iter()))
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                model.dp_post_clip_norms.push(post);
                if dp.gauss_noise > 0.0 {
                    let mut noise_rng = seed::rng(cfg.seed, "train.dpnoise", step);
                    for g in &mut grads {
                        for v in g.w.iter_mut().chain(g.b.iter_mut()) {
                            let z: f64 = noise_rng.sample(StandardNormal);
                            *v += dp.gauss_noise * z;
                        }
                    }
                }
            }

            // momentum SGD
            for (vel, g) in velocity.iter_mut().zip(&grads) {
                for (v, &gv) in vel.w.iter_mut().zip(&g.w) {
                    *v = cfg.momentum * *v + gv;
                }
                for (v, &gv) in vel.b.iter_mut().zip(&g.b) {
                    *v = cfg.momentum * *v + gv;
                }
            }
            let mut li = 0;
            for l in &mut model.layers {
                match l {
                    model::Layer::Dense { w, b, .. } | model::Layer::Conv3x3 { w, b, .. } => {
                        for (wv, &v) in w.iter_mut().zip(&velocity[li].w) {
                            *wv -= lr * v;
                        }
                        for (bv, &v) in b.iter_mut().zip(&velocity[li].b) {
                            *bv -= lr * v;
                        }
                    }
                    model::Layer::MaxPool2 { .. } => {}
                }
                li += 1;
            }
            if !model.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            step += 1;
        }
        let train_acc = clean_accuracy(&model, ds)?;
        let test_acc = match test {
            Some(t) => Some(clean_accuracy(&model, t)?),
            None => None,
        };
        model.log.push(EpochStats {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            train_accuracy: train_acc,
            test_accuracy: test_acc,
        });
    }
    Ok(model)
}

pub fn train(ds: &LabeledDataset, spec: &ModelSpec, cfg: &TrainConfig) -> Result<Model> {
    train_with_eval(ds, None, spec, cfg)
}

/// Loss and input gradient of ||f(x) - target||^2 at the penultimate layer.
/// Used by the feature-collision attack.
pub fn feature_match_input_grad(
    model: &Model,
    img: &ImageTensor,
    target_features: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let trace = model.forward_trace(&img.pixels);
    let n_layers = model.layers.len();
    let feats = &trace.acts[n_layers - 1];
    if feats.len() != target_features.len() {
        return Err(Error::ShapeMismatch(format!(
            "feature dims {} vs {}",
            feats.len(),
            target_features.len()
        )));
    }
    let loss: f64 = feats
        .iter()
        .zip(target_features)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let d_feat: Vec<f64> = feats
        .iter()
        .zip(target_features)
        .map(|(a, b)| 2.0 * (a - b))
        .collect();
    let d_input = model.backward_from(&trace, n_layers - 1, d_feat, None);
    Ok((loss, d_input))
}

/// Maximum relative disagreement between analytic and central finite
/// difference gradients of the mean batch loss, over every parameter.
pub fn gradient_check(spec: &ModelSpec, batch: &LabeledDataset, master_seed: u64) -> Result<f64> {
    let model = Model::init(spec, master_seed)?;
    let samples: Vec<Sample> = batch
        .examples
        .iter()
        .map(|e| Sample {
            pixels: e.image.pixels.clone(),
            label: e.label.probs.clone(),
        })
        .collect();
    let (analytic, _) = accumulate_batch_gradient(&model, &samples);
    let flat_analytic: Vec<f64> = analytic
        .iter()
        .flat_map(|g| g.w.iter().chain(g.b.iter()).cloned())
        .collect();

    let batch_loss = |m: &Model| -> f64 {
        samples
            .iter()
            .map(|s| example_loss(m, &s.pixels, &s.label))
            .sum::<f64>()
            / samples.len() as f64
    };

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let count = model.param_count();
    for i in 0..count {
        let mut plus = model.clone();
        *plus.params_mut()[i] += h;
        let mut minus = model.clone();
        *minus.params_mut()[i] -= h;
        let numeric = (batch_loss(&plus) - batch_loss(&minus)) / (2.0 * h);
        let a = flat_analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
