//! The mixup-plus-Laplacian-noise release mechanism, its exact pure-DP
//! accountant, the classical per-point Laplacian baseline, the attack-cost
//! lower bound for DP learners, and a brute-force density-ratio oracle.

mod oracle;

pub use oracle::{density_ratio_oracle, scalar_grid};

use crate::datastore::{decode_dataset, encode_dataset, Example, LabeledDataset};
use crate::error::{Error, Result};
use crate::seed;
use rand::seq::index::sample;
use rand::Rng;
use std::path::Path;

/// Laplacian noise scale in pixel-intensity units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
}

/// Pure-DP certificate for a released dataset of size T.
///
/// `epsilon = T * max(branch_a, branch_b)` and is never larger than
/// `upper_bound = T * delta / (k * sigma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyCertificate {
    pub n: usize,
    pub t_count: usize,
    pub k: usize,
    pub sigma: f64,
    pub delta_diameter: f64,
    pub epsilon: f64,
    pub branch_a: f64,
    pub branch_b: f64,
    pub upper_bound: f64,
    /// Always zero: the mechanism satisfies pure differential privacy.
    pub dp_delta: f64,
}

pub const CERTIFICATE_CSV_HEADER: &str = "n,T,k,sigma,delta,branch_A,branch_B,epsilon,upper_bound";

impl PrivacyCertificate {
    pub fn per_sample_epsilon(&self) -> f64 {
        self.branch_a.max(self.branch_b)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.n,
            self.t_count,
            self.k,
            self.sigma,
            self.delta_diameter,
            self.branch_a,
            self.branch_b,
            self.epsilon,
            self.upper_bound
        )
    }
}

/// Exact accountant for the k-way mixup + Laplace release of T samples
/// from an n-point dataset of l1 diameter `delta`.
pub fn epsilon_mixup(
    n: usize,
    t_count: usize,
    k: usize,
    sigma: f64,
    delta: f64,
) -> Result<PrivacyCertificate> {
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "mixture width k={k} must satisfy 1 <= k <= n={n}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    if t_count == 0 {
        return Err(Error::InvalidParameter("T must be at least 1".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    let t = delta / (k as f64 * sigma);
    let a = k as f64 / n as f64;
    // branch A = log(1 - k/n + e^t * k/n); evaluated in log space when e^t
    // would overflow.
    let branch_a = if t > 700.0 {
        a.ln() + t + ((1.0 - a) / a * (-t).exp()).ln_1p()
    } else {
        (1.0 - a + a * t.exp()).ln()
    };
    // branch B = log(n / (n - k + k e^{-t})) = -log(1 - a + a e^{-t});
    // at k = n this is exactly t.
    let branch_b = if k == n {
        t
    } else {
        -(1.0 - a + a * (-t).exp()).ln()
    };
    let per_sample = branch_a.max(branch_b);
    Ok(PrivacyCertificate {
        n,
        t_count,
        k,
        sigma,
        delta_diameter: delta,
        epsilon: t_count as f64 * per_sample,
        branch_a,
        branch_b,
        // same evaluation order as epsilon_classical so the k = 1 case
        // matches it bit-exactly
        upper_bound: t_count as f64 * delta / (k as f64 * sigma),
        dp_delta: 0.0,
    })
}

/// Per-point Laplacian baseline: T samples at per-sample epsilon delta/sigma.
pub fn epsilon_classical(t_count: usize, sigma: f64, delta: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    Ok(t_count as f64 * delta / sigma)
}

/// i.i.d. per-coordinate Laplace(0, sigma) draws via inverse-CDF sampling.
/// sigma = 0 yields the zero vector.
pub fn sample_laplace(sigma: f64, d: usize, master_seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(master_seed, "laplace", 0);
    laplace_into(sigma, d, &mut rng)
}

pub(crate) fn laplace_into(sigma: f64, d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| laplace_draw(sigma, rng)).collect()
}

pub(crate) fn laplace_draw(sigma: f64, rng: &mut impl Rng) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        let x = -sigma * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        if x.is_finite() {
            return x;
        }
    }
}

/// T synthetic samples carrying a privacy certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleasedDataset {
    pub data: LabeledDataset,
    pub certificate: PrivacyCertificate,
}

/// The release mechanism: each sample is the mean of a uniformly random
/// k-subset of images plus isotropic Laplacian noise. Labels are the exact
/// un-noised subset means; pixels are deliberately not clipped to [0,1].
pub fn release_dataset(
    ds: &LabeledDataset,
    k: usize,
    sigma: f64,
    t_count: usize,
    delta: f64,
    master_seed: u64,
) -> Result<ReleasedDataset> {
    let certificate = epsilon_mixup(ds.len(), t_count, k, sigma, delta)?;
    let (h, w, c) = ds
        .shape()
        .ok_or_else(|| Error::InvalidParameter("cannot release an empty dataset".into()))?;
    let d = h * w * c;
    let mut examples = Vec::with_capacity(t_count);
    for i in 0..t_count {
        let mut rng = seed::rng(master_seed, "release.sample", i as u64);
        let indices = sample(&mut rng, ds.len(), k).into_vec();
        let (mut img, lbl) = crate::augment::mix_indices(ds, &indices);
        for p in img.pixels.iter_mut() {
            *p += laplace_draw(sigma, &mut rng);
        }
        debug_assert_eq!(img.dim(), d);
        examples.push(Example {
            image: img,
            label: lbl,
            poisoned: false,
        });
    }
    let mut data = LabeledDataset::new(examples, ds.class_count, format!("{}.released", ds.name));
    data.pixel_scale = ds.pixel_scale;
    Ok(ReleasedDataset { data, certificate })
}

const RELEASE_MAGIC: &[u8; 8] = b"DPMXRL01";

/// Released-dataset container: certificate header followed by the standard
/// dataset container bytes.
pub fn write_release(rd: &ReleasedDataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(RELEASE_MAGIC);
    let c = &rd.certificate;
    for v in [c.n as u64, c.t_count as u64, c.k as u64] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [
        c.sigma,
        c.delta_diameter,
        c.branch_a,
        c.branch_b,
        c.epsilon,
        c.upper_bound,
        c.dp_delta,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&encode_dataset(&rd.data));
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_release(path: &Path) -> Result<ReleasedDataset> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let origin = path.display().to_string();
    if buf.len() < 8 + 3 * 8 + 7 * 8 || &buf[..8] != RELEASE_MAGIC {
        return Err(Error::BadMagic {
            path: origin,
            expected: u32::from_le_bytes(RELEASE_MAGIC[..4].try_into().unwrap()),
            found: if buf.len() >= 4 {
                u32::from_le_bytes(buf[..4].try_into().unwrap())
            } else {
                0
            },
        });
    }
    let mut pos = 8;
    let read_u64 = |buf: &[u8], pos: &mut usize| {
        let v = u64::from_le_bytes(buf[*pos..*pos + 8].try_into().unwrap());
        *pos += 8;
        v
    };
    let n = read_u64(&buf, &mut pos) as usize;
    let t_count = read_u64(&buf, &mut pos) as usize;
    let k = read_u64(&buf, &mut pos) as usize;
    let read_f64 = |buf: &[u8], pos: &mut usize| {
        let v = f64::from_le_bytes(buf[*pos..*pos + 8].try_into().unwrap());
        *pos += 8;
        v
    };
    let sigma = read_f64(&buf, &mut pos);
    let delta_diameter = read_f64(&buf, &mut pos);
    let branch_a = read_f64(&buf, &mut pos);
    let branch_b = read_f64(&buf, &mut pos);
    let epsilon = read_f64(&buf, &mut pos);
    let upper_bound = read_f64(&buf, &mut pos);
    let dp_delta = read_f64(&buf, &mut pos);
    let data = decode_dataset(&buf[pos..], &origin)?;
    Ok(ReleasedDataset {
        data,
        certificate: PrivacyCertificate {
            n,
            t_count,
            k,
            sigma,
            delta_diameter,
            epsilon,
            branch_a,
            branch_b,
            upper_bound,
            dp_delta,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostSign {
    NonNegative,
    NonPositive,
}

/// Inputs to the attack-cost lower bound for an (epsilon, delta)-DP learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackBoundInput {
    /// Attack cost on the clean dataset, J(D).
    pub j_clean: f64,
    /// Cost bound B with |C| <= B.
    pub b_cost: f64,
    pub epsilon: f64,
    pub dp_delta: f64,
    /// Number of modified elements.
    pub modified: usize,
    pub sign: CostSign,
}

/// Lower bound on the attack cost J(D') achievable by modifying `modified`
/// elements against an (epsilon, delta)-DP mechanism.
pub fn attack_cost_bound(input: &AttackBoundInput) -> Result<f64> {
    if !(input.epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive, got {}",
            input.epsilon
        )));
    }
    if !(input.b_cost > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "cost bound B must be positive, got {}",
            input.b_cost
        )));
    }
    if input.dp_delta < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "dp delta must be nonnegative, got {}",
            input.dp_delta
        )));
    }
    match input.sign {
        CostSign::NonNegative if input.j_clean < 0.0 => {
            return Err(Error::InvalidParameter(
                "nonnegative cost sign requires J(D) >= 0".into(),
            ));
        }
        CostSign::NonPositive if input.j_clean > 0.0 || input.j_clean < -input.b_cost => {
            return Err(Error::InvalidParameter(
                "nonpositive cost sign requires -B <= J(D) <= 0".into(),
            ));
        }
        _ => {}
    }
    let slack = input.b_cost * input.dp_delta / (input.epsilon.exp() - 1.0);
    let shrink = (-(input.modified as f64) * input.epsilon).exp();
    Ok(match input.sign {
        CostSign::NonNegative => (shrink * (input.j_clean + slack) - slack).max(0.0),
        CostSign::NonPositive => (shrink * (input.j_clean + slack) + slack).max(-input.b_cost),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{ImageTensor, SoftLabel};
    use proptest::prelude::*;

    fn scalar_ds(values: &[f64]) -> LabeledDataset {
        let examples = values
            .iter()
            .map(|&v| Example {
                image: ImageTensor::new(1, 1, 1, vec![v]),
                label: SoftLabel::one_hot(0, 2),
                poisoned: false,
            })
            .collect();
        LabeledDataset::new(examples, 2, "scalar")
    }

    // Closed form evaluated with 40-digit arithmetic, frozen here.
    const A_N10_K2_S1: f64 = 0.121_991_283_339_271_03;
    const B_N10_K2_S1: f64 = 0.081_962_907_139_343_98;

    #[test]
    fn accountant_matches_high_precision_reference() {
        let c = epsilon_mixup(10, 1, 2, 1.0, 1.0).unwrap();
        assert!((c.branch_a - A_N10_K2_S1).abs() < 1e-14);
        assert!((c.branch_b - B_N10_K2_S1).abs() < 1e-14);
        assert!((c.epsilon - A_N10_K2_S1).abs() < 1e-14);
        assert_eq!(c.dp_delta, 0.0);
    }

    #[test]
    fn accountant_infinite_noise_limit() {
        let c = epsilon_mixup(100, 50, 4, 1e9, 1.0).unwrap();
        assert!(c.epsilon <= 1e-6);
        assert!(c.epsilon >= 0.0);
    }

    #[test]
    fn accountant_fig4a_point_respects_upper_bound() {
        let c = epsilon_mixup(50_000, 50_000, 4, 16.0 / 255.0, 1.0).unwrap();
        // frozen from the high-precision oracle
        assert!((c.epsilon - 210.562_746_962_246_16).abs() / c.epsilon < 1e-12);
        assert!(c.epsilon <= c.upper_bound);
        assert!((c.upper_bound - 199_218.75).abs() < 1e-6);
    }

    #[test]
    fn accountant_overflow_regime_is_finite() {
        let c = epsilon_mixup(10, 1, 1, 1e-6, 1.0).unwrap();
        assert!(c.branch_a.is_finite());
        assert!(c.branch_b.is_finite());
        // t = 1e6; A ~ ln(1/10) + 1e6
        assert!((c.branch_a - (1e6 + (0.1f64).ln())).abs() < 1e-3);
    }

    #[test]
    fn accountant_rejects_bad_domain() {
        assert!(epsilon_mixup(10, 1, 0, 1.0, 1.0).is_err());
        assert!(epsilon_mixup(10, 1, 11, 1.0, 1.0).is_err());
        assert!(epsilon_mixup(10, 1, 2, 0.0, 1.0).is_err());
        assert!(epsilon_mixup(10, 0, 2, 1.0, 1.0).is_err());
        assert!(epsilon_mixup(10, 1, 2, 1.0, -1.0).is_err());
    }

    #[test]
    fn classical_baseline() {
        assert_eq!(epsilon_classical(1, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(epsilon_classical(10, 2.0, 1.0).unwrap(), 5.0);
        assert!(epsilon_classical(1, 0.0, 1.0).is_err());
        // k = 1 upper bound coincides with the classical composition
        let c = epsilon_mixup(37, 12, 1, 0.7, 1.3).unwrap();
        assert_eq!(c.upper_bound, epsilon_classical(12, 0.7, 1.3).unwrap());
    }

    #[test]
    fn laplace_zero_sigma_and_determinism() {
        assert_eq!(sample_laplace(0.0, 5, 1), vec![0.0; 5]);
        assert_eq!(sample_laplace(1.0, 100, 3), sample_laplace(1.0, 100, 3));
        assert_ne!(sample_laplace(1.0, 100, 3), sample_laplace(1.0, 100, 4));
    }

    #[test]
    fn laplace_moments() {
        let draws = sample_laplace(1.0, 1_000_000, 11);
        let mean_abs: f64 = draws.iter().map(|x| x.abs()).sum::<f64>() / draws.len() as f64;
        assert!((mean_abs - 1.0).abs() < 0.01, "mean |eta| = {mean_abs}");
        let draws2 = sample_laplace(2.0, 1_000_000, 12);
        let mean: f64 = draws2.iter().sum::<f64>() / draws2.len() as f64;
        let var: f64 =
            draws2.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / draws2.len() as f64;
        assert!((var - 8.0).abs() < 0.1, "var = {var}");
    }

    #[test]
    fn release_is_deterministic_and_labels_unnoised() {
        let ds = scalar_ds(&[0.0, 0.25, 0.5, 0.75, 1.0]);
        let a = release_dataset(&ds, 2, 0.1, 8, 1.0, 42).unwrap();
        let b = release_dataset(&ds, 2, 0.1, 8, 1.0, 42).unwrap();
        assert_eq!(a, b);
        for e in &a.data.examples {
            assert!(e.label.is_on_simplex(1e-12));
        }
        assert_eq!(a.data.len(), 8);
    }

    #[test]
    fn release_k_equals_n_concentrates_on_mean() {
        let ds = scalar_ds(&[0.0, 0.2, 0.4, 0.6, 0.8]);
        let sigma = 1e-9;
        let rd = release_dataset(&ds, 5, sigma, 20, 1.0, 7).unwrap();
        for e in &rd.data.examples {
            assert!((e.image.pixels[0] - 0.4).abs() < 10.0 * sigma * (20f64.ln() + 1.0));
        }
    }

    #[test]
    fn release_k1_is_point_plus_noise() {
        let ds = scalar_ds(&[0.0, 1.0]);
        let rd = release_dataset(&ds, 1, 1e-9, 50, 1.0, 3).unwrap();
        for e in &rd.data.examples {
            let near_data = ds
                .examples
                .iter()
                .any(|orig| (e.image.pixels[0] - orig.image.pixels[0]).abs() < 1e-6);
            assert!(near_data);
            // label is exactly the selected point's label
            assert!(e.label.probs.iter().any(|&p| p == 1.0));
        }
    }

    #[test]
    fn release_rejects_bad_params() {
        let ds = scalar_ds(&[0.0, 1.0]);
        assert!(release_dataset(&ds, 3, 1.0, 1, 1.0, 0).is_err());
        assert!(release_dataset(&ds, 1, 0.0, 1, 1.0, 0).is_err());
    }

    #[test]
    fn release_container_round_trip() {
        let ds = scalar_ds(&[0.0, 0.5, 1.0]);
        let rd = release_dataset(&ds, 2, 0.3, 4, 1.0, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("release.bin");
        write_release(&rd, &path).unwrap();
        let back = read_release(&path).unwrap();
        assert_eq!(back.certificate, rd.certificate);
        assert_eq!(back.data.class_count, rd.data.class_count);
        // pixels quantize through f32 in the container
        for (a, b) in back.data.examples.iter().zip(&rd.data.examples) {
            for (x, y) in a.image.pixels.iter().zip(&b.image.pixels) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn bound_delta_zero_cases() {
        let base = AttackBoundInput {
            j_clean: 1.0,
            b_cost: 10.0,
            epsilon: 0.1,
            dp_delta: 0.0,
            modified: 0,
            sign: CostSign::NonNegative,
        };
        assert_eq!(attack_cost_bound(&base).unwrap(), 1.0);
        let b = attack_cost_bound(&AttackBoundInput { modified: 5, ..base }).unwrap();
        assert!((b - 0.606_530_659_712_633_4).abs() < 1e-15);
        // enormous l * epsilon clamps at zero
        let b = attack_cost_bound(&AttackBoundInput { modified: 100_000, ..base }).unwrap();
        assert_eq!(b, 0.0);
    }

    #[test]
    fn bound_rejects_invalid_inputs() {
        let base = AttackBoundInput {
            j_clean: 1.0,
            b_cost: 10.0,
            epsilon: 0.0,
            dp_delta: 0.0,
            modified: 1,
            sign: CostSign::NonNegative,
        };
        assert!(attack_cost_bound(&base).is_err());
        assert!(attack_cost_bound(&AttackBoundInput {
            epsilon: 1.0,
            j_clean: -0.5,
            ..base
        })
        .is_err());
        assert!(attack_cost_bound(&AttackBoundInput {
            epsilon: 1.0,
            j_clean: 0.5,
            sign: CostSign::NonPositive,
            ..base
        })
        .is_err());
    }

    #[test]
    fn bound_nonpositive_floor() {
        let input = AttackBoundInput {
            j_clean: -5.0,
            b_cost: 5.0,
            epsilon: 0.5,
            dp_delta: 0.5,
            modified: 3,
            sign: CostSign::NonPositive,
        };
        let b = attack_cost_bound(&input).unwrap();
        assert!(b >= -5.0);
    }

    proptest! {
        // random-grid invariants: upper bound dominance, branch ordering,
        // and the k=1 classical identity
        #[test]
        fn certificate_invariants(
            n in 1usize..200,
            t_count in 1usize..100,
            kf in 0.0f64..1.0,
            sigma in 1e-3f64..100.0,
            delta in 1e-3f64..10.0,
        ) {
            let k = 1 + (kf * (n as f64 - 1.0)) as usize;
            let c = epsilon_mixup(n, t_count, k, sigma, delta).unwrap();
            prop_assert!(c.epsilon <= c.upper_bound * (1.0 + 1e-12));
            prop_assert!(c.branch_a >= c.branch_b - 1e-12 * c.branch_a.abs().max(1.0));
            prop_assert!((c.epsilon - t_count as f64 * c.per_sample_epsilon()).abs()
                <= 1e-12 * c.epsilon.max(1.0));
            if k == 1 {
                prop_assert_eq!(c.upper_bound, epsilon_classical(t_count, sigma, delta).unwrap());
            }
        }

        #[test]
        fn branch_a_strictly_decreasing_in_k(
            n in 8usize..128,
            sigma in 0.05f64..10.0,
            delta in 0.1f64..5.0,
        ) {
            let kmax = n.min(64);
            let mut prev = f64::INFINITY;
            for k in 1..=kmax {
                let c = epsilon_mixup(n, 1, k, sigma, delta).unwrap();
                prop_assert!(c.branch_a < prev);
                prev = c.branch_a;
            }
        }

        #[test]
        fn bound_monotone_in_l_and_epsilon(
            j in 0.0f64..10.0,
            eps1 in 0.01f64..2.0,
            eps2 in 0.01f64..2.0,
            l1 in 0usize..50,
            l2 in 0usize..50,
        ) {
            let mk = |eps, l| AttackBoundInput {
                j_clean: j, b_cost: 20.0, epsilon: eps, dp_delta: 0.0,
                modified: l, sign: CostSign::NonNegative,
            };
            let (lo_l, hi_l) = (l1.min(l2), l1.max(l2));
            prop_assert!(
                attack_cost_bound(&mk(eps1, hi_l)).unwrap()
                    <= attack_cost_bound(&mk(eps1, lo_l)).unwrap() + 1e-12
            );
            let (lo_e, hi_e) = (eps1.min(eps2), eps1.max(eps2));
            prop_assert!(
                attack_cost_bound(&mk(hi_e, l1.max(1))).unwrap()
                    <= attack_cost_bound(&mk(lo_e, l1.max(1))).unwrap() + 1e-12
            );
        }
    }
}
