//! Filtering-defense baselines over penultimate-layer features:
//! Spectral Signatures, Activation Clustering, and deepKNN relabeling.
//!
//! All three are deterministic and never touch pixels — they only drop
//! examples or rewrite labels. Feature extraction uses a model trained on
//! the (possibly poisoned) data itself.

use crate::datastore::{LabeledDataset, SoftLabel};
use crate::error::{Error, Result};
use crate::trainer::Model;

/// Dimensions kept by the Activation Clustering PCA projection.
pub const AC_PCA_DIMS: usize = 10;
/// A cluster is only removed when it holds at most this fraction of a class.
pub const AC_SMALL_CLUSTER_MAX: f64 = 0.35;
/// Iteration cap for 2-means.
pub const KMEANS_MAX_ITERS: usize = 100;

const POWER_ITERS: usize = 300;
const POWER_TOL: f64 = 1e-13;

/// Penultimate features for one class, with the dataset indices each row
/// came from so filters can map decisions back to examples.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
    pub indices: Vec<usize>,
    pub owner_class: usize,
}

impl FeatureMatrix {
    fn validate(&self) -> Result<()> {
        if self.rows.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "class {} has {} feature rows; need at least 2",
                self.owner_class,
                self.rows.len()
            )));
        }
        if self.rows.len() != self.indices.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows vs {} indices",
                self.rows.len(),
                self.indices.len()
            )));
        }
        let dim = self.rows[0].len();
        for (i, r) in self.rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "feature row {i} has dim {}, expected {dim}",
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite feature in class {} row {i}",
                    self.owner_class
                )));
            }
        }
        Ok(())
    }
}

/// One line of a removal/relabel report.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub class: usize,
    pub index: usize,
    pub score: f64,
    pub action: &'static str,
}

/// Render report rows as CSV with a `class,index,score,action` header.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("class,index,score,action\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.class, r.index, r.score, r.action));
    }
    out
}

/// Extract per-class feature matrices from a trained model.
pub fn class_features(model: &Model, ds: &LabeledDataset) -> Result<Vec<FeatureMatrix>> {
    let mut out = Vec::with_capacity(ds.class_count);
    for c in 0..ds.class_count {
        let indices = ds.class_indices(c);
        let mut rows = Vec::with_capacity(indices.len());
        for &i in &indices {
            rows.push(model.features(&ds.examples[i].image)?);
        }
        out.push(FeatureMatrix { rows, indices, owner_class: c });
    }
    Ok(out)
}

/// Features for the whole dataset in example order (for deepKNN).
pub fn all_features(model: &Model, ds: &LabeledDataset) -> Result<FeatureMatrix> {
    let mut rows = Vec::with_capacity(ds.len());
    for e in &ds.examples {
        rows.push(model.features(&e.image)?);
    }
    Ok(FeatureMatrix {
        indices: (0..rows.len()).collect(),
        rows,
        owner_class: 0,
    })
}

fn row_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    mean
}

fn centered(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mean = row_mean(rows);
    rows.iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Top right singular vector of `x` (rows are observations) by power
/// iteration on x^T x, with a fixed all-ones start for determinism.
/// Returns None when the matrix is (numerically) zero.
fn top_right_singular_vector(x: &[Vec<f64>]) -> Option<Vec<f64>> {
    let dim = x[0].len();
    let total: f64 = x.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum();
    if total <= 0.0 {
        return None;
    }
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    for _ in 0..POWER_ITERS {
        // w = x^T (x v)
        let xv: Vec<f64> = x
            .iter()
            .map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let mut w = vec![0.0; dim];
        for (r, &c) in x.iter().zip(&xv) {
            for (wi, &ri) in w.iter_mut().zip(r) {
                *wi += ri * c;
            }
        }
        let n = norm(&w);
        if n == 0.0 {
            // the start vector was orthogonal to the row space; perturb
            v[0] += 1.0;
            let nv = norm(&v);
            for vi in &mut v {
                *vi /= nv;
            }
            continue;
        }
        let next: Vec<f64> = w.iter().map(|wi| wi / n).collect();
        let delta: f64 = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    Some(v)
}

/// Spectral Signatures scores: squared correlation of each centered feature
/// row with the top right singular vector. All-identical rows score 0.
pub fn spectral_scores(feats: &FeatureMatrix) -> Result<Vec<f64>> {
    feats.validate()?;
    let x = centered(&feats.rows);
    match top_right_singular_vector(&x) {
        None => Ok(vec![0.0; x.len()]),
        Some(v) => Ok(x
            .iter()
            .map(|r| {
                let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                dot * dot
            })
            .collect()),
    }
}

/// Per class, drop the ceil(fraction * n_class) highest spectral scores;
/// ties broken toward the lowest dataset index. Returns the filtered
/// dataset and a report of removals.
pub fn spectral_filter(
    ds: &LabeledDataset,
    feats: &[FeatureMatrix],
    remove_fraction: f64,
) -> Result<(LabeledDataset, Vec<ReportRow>)> {
    if !(0.0..1.0).contains(&remove_fraction) {
        return Err(Error::InvalidParameter(format!(
            "remove fraction must lie in [0, 1), got {remove_fraction}"
        )));
    }
    let mut report = Vec::new();
    let mut drop = vec![false; ds.len()];
    for fm in feats {
        let scores = spectral_scores(fm)?;
        let count = (remove_fraction * fm.rows.len() as f64).ceil() as usize;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        // highest score first; equal scores fall back to lowest dataset index
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(fm.indices[a].cmp(&fm.indices[b]))
        });
        for &pos in order.iter().take(count) {
            drop[fm.indices[pos]] = true;
            report.push(ReportRow {
                class: fm.owner_class,
                index: fm.indices[pos],
                score: scores[pos],
                action: "remove",
            });
        }
    }
    report.sort_by_key(|r| (r.class, r.index));
    let kept = ds
        .examples
        .iter()
        .enumerate()
        .filter(|(i, _)| !drop[*i])
        .map(|(_, e)| e.clone())
        .collect();
    Ok((
        LabeledDataset::new(kept, ds.class_count, format!("{}-spectral", ds.name)),
        report,
    ))
}

/// Project centered rows onto their top `dims` principal components via
/// power iteration with deflation.
fn pca_project(rows: &[Vec<f64>], dims: usize) -> Vec<Vec<f64>> {
    let mut x = centered(rows);
    let dim = rows[0].len();
    let keep = dims.min(dim);
    let mut coords = vec![Vec::with_capacity(keep); rows.len()];
    for _ in 0..keep {
        let v = match top_right_singular_vector(&x) {
            Some(v) => v,
            None => break,
        };
        for (r, c) in x.iter_mut().zip(coords.iter_mut()) {
            let proj: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            c.push(proj);
            // deflate: remove this component from the row
            for (ri, vi) in r.iter_mut().zip(&v) {
                *ri -= proj * vi;
            }
        }
    }
    // pad in the degenerate case where deflation exhausted the rank early
    let width = coords.iter().map(|c| c.len()).max().unwrap_or(0).max(1);
    for c in &mut coords {
        c.resize(width, 0.0);
    }
    coords
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Deterministic 2-means: centroids start at the points with the extreme
/// first-PCA coordinates; equidistant points join cluster 0. Returns the
/// cluster assignment of each row.
fn two_means(points: &[Vec<f64>]) -> Vec<usize> {
    let mut lo = 0;
    let mut hi = 0;
    for (i, p) in points.iter().enumerate() {
        if p[0] < points[lo][0] {
            lo = i;
        }
        if p[0] > points[hi][0] {
            hi = i;
        }
    }
    let mut centroids = [points[lo].clone(), points[hi].clone()];
    let mut assign = vec![0usize; points.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let a = if sq_dist(p, &centroids[1]) < sq_dist(p, &centroids[0]) { 1 } else { 0 };
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
        }
        for c in 0..2 {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            if !members.is_empty() {
                let dim = points[0].len();
                let mut m = vec![0.0; dim];
                for p in &members {
                    for (mi, v) in m.iter_mut().zip(p.iter()) {
                        *mi += v;
                    }
                }
                for mi in &mut m {
                    *mi /= members.len() as f64;
                }
                centroids[c] = m;
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

/// Activation Clustering: per class, 2-means in top-10 PCA space; the
/// smaller cluster is removed only when it is at most 35% of the class.
pub fn activation_cluster_filter(
    ds: &LabeledDataset,
    feats: &[FeatureMatrix],
) -> Result<(LabeledDataset, Vec<ReportRow>)> {
    let mut report = Vec::new();
    let mut drop = vec![false; ds.len()];
    for fm in feats {
        fm.validate()?;
        let coords = pca_project(&fm.rows, AC_PCA_DIMS);
        let assign = two_means(&coords);
        let size1 = assign.iter().filter(|&&a| a == 1).count();
        let size0 = assign.len() - size1;
        let (small, small_size) = if size0 < size1 { (0, size0) } else if size1 < size0 { (1, size1) } else {
            continue; // equal split: no smaller cluster to remove
        };
        let frac = small_size as f64 / assign.len() as f64;
        if small_size == 0 || frac > AC_SMALL_CLUSTER_MAX {
            continue;
        }
        for (pos, &a) in assign.iter().enumerate() {
            if a == small {
                drop[fm.indices[pos]] = true;
                report.push(ReportRow {
                    class: fm.owner_class,
                    index: fm.indices[pos],
                    score: frac,
                    action: "remove",
                });
            }
        }
    }
    report.sort_by_key(|r| (r.class, r.index));
    let kept = ds
        .examples
        .iter()
        .enumerate()
        .filter(|(i, _)| !drop[*i])
        .map(|(_, e)| e.clone())
        .collect();
    Ok((
        LabeledDataset::new(kept, ds.class_count, format!("{}-ac", ds.name)),
        report,
    ))
}

/// deepKNN: relabel an example to the plurality hard label of its K nearest
/// feature-space neighbors (self excluded) when that plurality disagrees
/// with its own label; plurality ties keep the original label.
pub fn deep_knn_relabel(
    ds: &LabeledDataset,
    feats: &FeatureMatrix,
    k: usize,
) -> Result<(LabeledDataset, Vec<ReportRow>)> {
    feats.validate()?;
    let n = ds.len();
    if feats.rows.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} examples",
            feats.rows.len(),
            n
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= K < n, got K={k}, n={n}"
        )));
    }
    let mut out = ds.clone();
    let mut report = Vec::new();
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            sq_dist(&feats.rows[i], &feats.rows[a])
                .partial_cmp(&sq_dist(&feats.rows[i], &feats.rows[b]))
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut votes = vec![0usize; ds.class_count];
        for &j in order.iter().take(k) {
            votes[ds.examples[j].label.hard()] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let winners: Vec<usize> = (0..ds.class_count).filter(|&c| votes[c] == top).collect();
        let own = ds.examples[i].label.hard();
        if winners.len() == 1 && winners[0] != own {
            out.examples[i].label = SoftLabel::one_hot(winners[0], ds.class_count);
            report.push(ReportRow {
                class: own,
                index: i,
                score: top as f64 / k as f64,
                action: "relabel",
            });
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{Example, ImageTensor, SoftLabel};

    fn fm(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        FeatureMatrix {
            indices: (0..rows.len()).collect(),
            rows,
            owner_class: 0,
        }
    }

    fn tiny_ds(labels: &[usize], classes: usize) -> LabeledDataset {
        let examples = labels
            .iter()
            .map(|&c| Example {
                image: ImageTensor::new(1, 1, 1, vec![0.0]),
                label: SoftLabel::one_hot(c, classes),
                poisoned: false,
            })
            .collect();
        LabeledDataset::new(examples, classes, "tiny")
    }

    #[test]
    fn identical_rows_score_zero() {
        let scores = spectral_scores(&fm(vec![vec![1.0, 2.0]; 5])).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn spectral_outlier_gets_top_score() {
        let mut rows = vec![vec![0.0, 0.0]; 5];
        rows.push(vec![10.0, 0.0]);
        let scores = spectral_scores(&fm(rows)).unwrap();
        let max_idx = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(max_idx, 5);
    }

    #[test]
    fn spectral_scores_shift_invariant() {
        let rows = vec![
            vec![0.1, 0.4],
            vec![0.9, -0.3],
            vec![-0.5, 0.2],
            vec![0.3, 0.3],
        ];
        let shifted: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v + 7.0).collect())
            .collect();
        let a = spectral_scores(&fm(rows)).unwrap();
        let b = spectral_scores(&fm(shifted)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn spectral_top_rank_scale_invariant() {
        let rows = vec![
            vec![0.0, 0.0],
            vec![0.1, -0.1],
            vec![-0.1, 0.1],
            vec![3.0, 3.0],
        ];
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v * 4.5).collect())
            .collect();
        let rank = |s: Vec<f64>| {
            s.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(
            rank(spectral_scores(&fm(rows)).unwrap()),
            rank(spectral_scores(&fm(scaled)).unwrap())
        );
    }

    #[test]
    fn spectral_filter_removes_exact_count() {
        let ds = tiny_ds(&[0; 100], 1);
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64, 0.0]).collect();
        let feats = vec![fm(rows)];
        let (filtered, report) = spectral_filter(&ds, &feats, 0.15).unwrap();
        assert_eq!(filtered.len(), 85);
        assert_eq!(report.len(), 15);
        assert!(report.iter().all(|r| r.action == "remove"));
        let (unchanged, empty) = spectral_filter(&ds, &feats, 0.0).unwrap();
        assert_eq!(unchanged.len(), 100);
        assert!(empty.is_empty());
        assert!(spectral_filter(&ds, &feats, 1.0).is_err());
    }

    #[test]
    fn activation_clustering_removes_planted_minority() {
        // 90 points near the origin, 10 near (5, 5): the 10 must go.
        let mut rows = Vec::new();
        for i in 0..90 {
            rows.push(vec![0.01 * i as f64, 0.0]);
        }
        for i in 0..10 {
            rows.push(vec![5.0 + 0.01 * i as f64, 5.0]);
        }
        let ds = tiny_ds(&[0; 100], 1);
        let (filtered, report) = activation_cluster_filter(&ds, &[fm(rows)]).unwrap();
        assert_eq!(filtered.len(), 90);
        let removed: Vec<usize> = report.iter().map(|r| r.index).collect();
        assert_eq!(removed, (90..100).collect::<Vec<_>>());
    }

    #[test]
    fn activation_clustering_spares_a_single_blob() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![0.001 * (i % 7) as f64, 0.001 * (i % 5) as f64])
            .collect();
        let ds = tiny_ds(&[0; 40], 1);
        let (filtered, report) = activation_cluster_filter(&ds, &[fm(rows)]).unwrap();
        assert_eq!(filtered.len(), 40, "near-even split must not be removed");
        assert!(report.is_empty());
    }

    #[test]
    fn activation_clustering_keeps_two_point_classes() {
        let ds = tiny_ds(&[0, 0], 1);
        let rows = vec![vec![0.0, 0.0], vec![9.0, 9.0]];
        let (filtered, report) = activation_cluster_filter(&ds, &[fm(rows)]).unwrap();
        assert_eq!(filtered.len(), 2);
        assert!(report.is_empty());
    }

    #[test]
    fn knn_relabels_the_single_mislabeled_point() {
        // 50 class-0 points tightly clustered; one class-1 point inside.
        let mut labels = vec![0usize; 50];
        labels.push(1);
        let ds = tiny_ds(&labels, 2);
        let rows: Vec<Vec<f64>> = (0..51).map(|i| vec![0.001 * (i % 9) as f64]).collect();
        let (out, report) = deep_knn_relabel(&ds, &fm(rows), 5).unwrap();
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].index, 50);
        assert_eq!(report[0].action, "relabel");
        assert_eq!(out.examples[50].label.hard(), 0);
        for i in 0..50 {
            assert_eq!(out.examples[i].label.hard(), 0);
        }
    }

    #[test]
    fn knn_duplicated_dataset_never_relabels() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        let ds = tiny_ds(&labels, 3);
        let rows = vec![
            vec![0.0],
            vec![0.0],
            vec![1.0],
            vec![1.0],
            vec![2.0],
            vec![2.0],
        ];
        let (out, report) = deep_knn_relabel(&ds, &fm(rows), 1).unwrap();
        assert!(report.is_empty());
        for (a, b) in ds.examples.iter().zip(&out.examples) {
            assert_eq!(a.label.probs, b.label.probs);
        }
    }

    #[test]
    fn knn_tie_keeps_original_label() {
        // point 0's two nearest neighbors are one class-1 and one class-2
        let labels = vec![0, 1, 2, 1, 2];
        let ds = tiny_ds(&labels, 3);
        let rows = vec![vec![0.0], vec![0.1], vec![0.2], vec![5.0], vec![6.0]];
        let (out, report) = deep_knn_relabel(&ds, &fm(rows), 2).unwrap();
        assert_eq!(out.examples[0].label.hard(), 0);
        assert!(report.iter().all(|r| r.index != 0));
    }

    #[test]
    fn knn_rejects_bad_k() {
        let ds = tiny_ds(&[0, 1, 0], 2);
        let rows = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(deep_knn_relabel(&ds, &fm(rows.clone()), 3).is_err());
        assert!(deep_knn_relabel(&ds, &fm(rows), 0).is_err());
    }

    #[test]
    fn defenses_never_touch_pixels() {
        let mut ds = tiny_ds(&[0; 10], 1);
        for (i, e) in ds.examples.iter_mut().enumerate() {
            e.image.pixels[0] = i as f64;
        }
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let feats = vec![fm(rows.clone())];
        let (filtered, _) = spectral_filter(&ds, &feats, 0.2).unwrap();
        for e in &filtered.examples {
            assert!(ds.examples.iter().any(|o| o.image.pixels == e.image.pixels));
        }
        let (relabeled, _) = deep_knn_relabel(&ds, &fm(rows), 3).unwrap();
        for (a, b) in ds.examples.iter().zip(&relabeled.examples) {
            assert_eq!(a.image.pixels, b.image.pixels);
        }
    }

    #[test]
    fn report_csv_layout() {
        let rows = vec![ReportRow {
            class: 1,
            index: 42,
            score: 0.5,
            action: "remove",
        }];
        assert_eq!(report_csv(&rows), "class,index,score,action\n1,42,0.5,remove\n");
    }

    #[test]
    fn rejects_nonfinite_features() {
        assert!(spectral_scores(&fm(vec![vec![0.0], vec![f64::NAN]])).is_err());
        assert!(spectral_scores(&fm(vec![vec![1.0]])).is_err());
    }
}
