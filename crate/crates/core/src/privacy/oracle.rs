//! Brute-force density-ratio oracle.
//!
//! Enumerates every k-subset of a small dataset and evaluates the exact
//! mixture-of-Laplacians densities p (subsets of D) and q (subsets of
//! D with one point removed) on a grid, returning the suprema of both
//! log-ratios. This is an independent check of the closed-form accountant:
//! it never touches the accountant's formulas.

use crate::datastore::LabeledDataset;
use crate::error::{Error, Result};

const MAX_ENUMERABLE_N: usize = 10;

fn log_laplace_density(z: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let l1: f64 = z.iter().zip(mean).map(|(a, b)| (a - b).abs()).sum();
    -l1 / sigma - z.len() as f64 * (2.0 * sigma).ln()
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// log of the mixture density over equal-weight k-subset means of `points`.
fn log_mixture_density(points: &[Vec<f64>], k: usize, sigma: f64, z: &[f64]) -> f64 {
    let combos = combinations(points.len(), k);
    let log_weight = -(combos.len() as f64).ln();
    let comps: Vec<f64> = combos
        .iter()
        .map(|combo| {
            let d = z.len();
            let mut mean = vec![0.0; d];
            for &i in combo {
                for (m, &x) in mean.iter_mut().zip(&points[i]) {
                    *m += x / k as f64;
                }
            }
            log_laplace_density(z, &mean, sigma)
        })
        .collect();
    log_weight + log_sum_exp(&comps)
}

/// Suprema over the grid of log(p/q) and log(q/p), where p is the release
/// density for the full dataset and q the density with `removed_index`
/// deleted. Only feasible for small n; rejects n > 10 and k >= n.
pub fn density_ratio_oracle(
    ds: &LabeledDataset,
    removed_index: usize,
    k: usize,
    sigma: f64,
    grid: &[Vec<f64>],
) -> Result<(f64, f64)> {
    let n = ds.len();
    if n > MAX_ENUMERABLE_N {
        return Err(Error::InvalidParameter(format!(
            "n={n} too large to enumerate (max {MAX_ENUMERABLE_N})"
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= k < n for the removed-point mixture, got k={k}, n={n}"
        )));
    }
    if removed_index >= n {
        return Err(Error::InvalidParameter(format!(
            "removed index {removed_index} out of range 0..{n}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty evaluation grid".into()));
    }
    let full: Vec<Vec<f64>> = ds.examples.iter().map(|e| e.image.pixels.clone()).collect();
    let reduced: Vec<Vec<f64>> = full
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != removed_index)
        .map(|(_, p)| p.clone())
        .collect();

    let mut sup_pq = f64::NEG_INFINITY;
    let mut sup_qp = f64::NEG_INFINITY;
    for z in grid {
        let lp = log_mixture_density(&full, k, sigma, z);
        let lq = log_mixture_density(&reduced, k, sigma, z);
        sup_pq = sup_pq.max(lp - lq);
        sup_qp = sup_qp.max(lq - lp);
    }
    Ok((sup_pq, sup_qp))
}

/// Uniform scalar grid of `points` values covering [lo, hi], as 1-d points.
pub fn scalar_grid(lo: f64, hi: f64, points: usize) -> Vec<Vec<f64>> {
    (0..points)
        .map(|i| vec![lo + (hi - lo) * i as f64 / (points - 1) as f64])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{Example, ImageTensor, SoftLabel};
    use crate::privacy::epsilon_mixup;

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

    #[test]
    fn identical_points_are_indistinguishable() {
        let ds = scalar_ds(&[0.3, 0.3]);
        let grid = scalar_grid(-3.0, 3.0, 201);
        let (pq, qp) = density_ratio_oracle(&ds, 0, 1, 1.0, &grid).unwrap();
        assert!(pq.abs() < 1e-12);
        assert!(qp.abs() < 1e-12);
    }

    #[test]
    fn accountant_dominates_three_point_instance() {
        let ds = scalar_ds(&[0.0, 0.5, 1.0]);
        let grid = scalar_grid(-6.0, 7.0, 2601);
        let (pq, qp) = density_ratio_oracle(&ds, 0, 2, 1.0, &grid).unwrap();
        let c = epsilon_mixup(3, 1, 2, 1.0, 1.0).unwrap();
        assert!(pq <= c.branch_a + 1e-9, "sup log(p/q)={pq} > A={}", c.branch_a);
        assert!(qp <= c.branch_b + 1e-9, "sup log(q/p)={qp} > B={}", c.branch_b);
        assert!(pq > 0.0 && qp > 0.0);
    }

    #[test]
    fn halving_sigma_increases_both_suprema() {
        let ds = scalar_ds(&[0.0, 0.5, 1.0]);
        let grid = scalar_grid(-6.0, 7.0, 2601);
        let (pq1, qp1) = density_ratio_oracle(&ds, 0, 2, 1.0, &grid).unwrap();
        let (pq2, qp2) = density_ratio_oracle(&ds, 0, 2, 0.5, &grid).unwrap();
        assert!(pq2 > pq1);
        assert!(qp2 > qp1);
    }

    #[test]
    fn rejects_unenumerable_instances() {
        let ds = scalar_ds(&[0.0; 11]);
        let grid = scalar_grid(0.0, 1.0, 3);
        assert!(density_ratio_oracle(&ds, 0, 1, 1.0, &grid).is_err());
        let ds = scalar_ds(&[0.0, 0.5, 1.0]);
        assert!(density_ratio_oracle(&ds, 0, 3, 1.0, &grid).is_err());
        assert!(density_ratio_oracle(&ds, 5, 1, 1.0, &grid).is_err());
        assert!(density_ratio_oracle(&ds, 0, 1, 1.0, &[]).is_err());
    }
}
