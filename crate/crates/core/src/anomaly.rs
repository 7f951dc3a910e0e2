//! Isolation forest scoring and gray-sample removal.
//!
//! Gray samples are company-years labelled non-fraud that look like fraud
//! (late detection, undiscovered misstatement). They are removed by fitting
//! an isolation forest on the non-fraud rows and dropping the most anomalous
//! fraction of them.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PanelDataset, RowKey};
use crate::error::{Error, Result};
use crate::rng;

const EULER_GAMMA: f64 = 0.577_215_664_9;

/// Average unsuccessful-search path length of a binary search tree over
/// `psi` points, used to normalise isolation depths.
pub fn c_factor(psi: usize) -> f64 {
    match psi {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = psi as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

/// `2^(-E[h] / c(psi))`.
pub fn score_from_mean_path(mean_path: f64, psi: usize) -> f64 {
    let c = c_factor(psi);
    if c <= 0.0 {
        return 1.0;
    }
    (-mean_path / c).exp2()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IsoNode {
    Split {
        feature: u32,
        value: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        size: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoTree {
    /// Arena, root at index 0.
    pub nodes: Vec<IsoNode>,
}

impl IsoTree {
    fn build<R: Rng>(x: &[Vec<f64>], mut idx: Vec<usize>, max_depth: usize, rng: &mut R) -> Self {
        let mut nodes = Vec::new();
        let n = idx.len();
        grow(x, &mut idx[..], 0, max_depth, rng, &mut nodes);
        debug_assert_eq!(
            nodes
                .iter()
                .map(|n| match n {
                    IsoNode::Leaf { size } => *size as usize,
                    _ => 0,
                })
                .sum::<usize>(),
            n
        );
        IsoTree { nodes }
    }

    /// Edges traversed to reach a leaf plus `c(leaf size)`.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0usize;
        let mut depth = 0usize;
        loop {
            match self.nodes[node] {
                IsoNode::Split {
                    feature,
                    value,
                    left,
                    right,
                } => {
                    node = if x[feature as usize] <= value {
                        left as usize
                    } else {
                        right as usize
                    };
                    depth += 1;
                }
                IsoNode::Leaf { size } => return depth as f64 + c_factor(size as usize),
            }
        }
    }

    pub fn max_depth(&self) -> usize {
        fn walk(nodes: &[IsoNode], i: usize) -> usize {
            match nodes[i] {
                IsoNode::Split { left, right, .. } => 1 + walk(nodes, left as usize).max(walk(nodes, right as usize)),
                IsoNode::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_sizes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                IsoNode::Leaf { size } => Some(*size as usize),
                _ => None,
            })
            .collect()
    }
}

fn grow<R: Rng>(
    x: &[Vec<f64>],
    idx: &mut [usize],
    depth: usize,
    max_depth: usize,
    rng: &mut R,
    nodes: &mut Vec<IsoNode>,
) -> u32 {
    let me = nodes.len() as u32;
    let leaf = IsoNode::Leaf { size: idx.len() as u32 };
    if depth >= max_depth || idx.len() <= 1 {
        nodes.push(leaf);
        return me;
    }
    // Features that still vary inside this node.
    let n_features = x[idx[0]].len();
    let mut candidates: Vec<(usize, f64, f64)> = Vec::new();
    for j in 0..n_features {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in idx.iter() {
            lo = lo.min(x[i][j]);
            hi = hi.max(x[i][j]);
        }
        if hi > lo {
            candidates.push((j, lo, hi));
        }
    }
    if candidates.is_empty() {
        nodes.push(leaf);
        return me;
    }
    let (feature, lo, hi) = candidates[rng.random_range(0..candidates.len())];
    let value = rng.random_range(lo..hi);
    // Partition: <= value to the front. `value < hi` keeps both sides nonempty.
    let mut split = 0;
    for k in 0..idx.len() {
        if x[idx[k]][feature] <= value {
            idx.swap(k, split);
            split += 1;
        }
    }
    nodes.push(leaf); // placeholder, patched below
    let (l, r) = idx.split_at_mut(split);
    let left = grow(x, l, depth + 1, max_depth, rng, nodes);
    let right = grow(x, r, depth + 1, max_depth, rng, nodes);
    nodes[me as usize] = IsoNode::Split {
        feature: feature as u32,
        value,
        left,
        right,
    };
    me
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoForest {
    pub trees: Vec<IsoTree>,
    pub psi: usize,
    pub n_trees: usize,
    pub seed: u64,
}

/// Fits `n_trees` isolation trees on `psi`-row subsamples of `x`.
///
/// Rows are put into a canonical (lexicographic) order before subsampling,
/// so the forest does not depend on the order rows are supplied in. Each
/// tree draws from its own seed stream.
pub fn fit_iforest(x: &[Vec<f64>], n_trees: usize, psi: usize, seed: u64) -> Result<IsoForest> {
    if psi < 2 {
        return Err(Error::invalid(format!("psi must be >= 2, got {psi}")));
    }
    if x.len() < psi {
        return Err(Error::invalid(format!(
            "isolation forest needs at least psi={psi} rows, got {}",
            x.len()
        )));
    }
    if n_trees == 0 {
        return Err(Error::invalid("n_trees must be >= 1"));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "isolation forest input contains missing or non-finite values",
        ));
    }
    let mut canonical: Vec<usize> = (0..x.len()).collect();
    canonical.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let max_depth = (psi as f64).log2().ceil() as usize;
    let trees = (0..n_trees)
        .map(|t| {
            let mut r = rng::stream(seed, &[rng::TAG_IFOREST, t as u64]);
            let mut picks: Vec<usize> = sample(&mut r, x.len(), psi).into_vec();
            picks.sort_unstable();
            let idx = picks.into_iter().map(|p| canonical[p]).collect();
            IsoTree::build(x, idx, max_depth, &mut r)
        })
        .collect();
    Ok(IsoForest {
        trees,
        psi,
        n_trees,
        seed,
    })
}

impl IsoForest {
    pub fn mean_path_length(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        anomaly_score(self, x)
    }
}

/// `s(x) = 2^(-E[h(x)] / c(psi))`, in (0, 1].
pub fn anomaly_score(forest: &IsoForest, x: &[f64]) -> f64 {
    score_from_mean_path(forest.mean_path_length(x), forest.psi)
}

/// Fits a forest on the non-fraud rows of `ds`. `psi = None` means
/// `min(256, N)`.
pub fn fit_on_non_fraud(ds: &PanelDataset, n_trees: usize, psi: Option<usize>, seed: u64) -> Result<IsoForest> {
    let x: Vec<Vec<f64>> = ds
        .rows()
        .iter()
        .filter(|(k, _)| !ds.is_fraud(k))
        .map(|(_, r)| r.values.clone())
        .collect();
    let psi = psi.unwrap_or_else(|| x.len().min(256));
    fit_iforest(&x, n_trees, psi, seed)
}

#[derive(Debug, Clone)]
pub struct GrayFilterResult {
    pub dataset: PanelDataset,
    /// Removed rows with their scores, most anomalous first.
    pub removed: Vec<(RowKey, f64)>,
}

/// Removes the `floor(quantile * n_non_fraud)` highest-scoring non-fraud
/// rows. Fraud rows are never touched. Score ties go to the earlier key.
pub fn filter_gray(ds: &PanelDataset, forest: &IsoForest, quantile: f64) -> Result<GrayFilterResult> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::invalid(format!(
            "gray quantile must be in (0,1), got {quantile}"
        )));
    }
    let mut scored: Vec<(RowKey, f64)> = Vec::new();
    for (k, r) in ds.rows() {
        if ds.is_fraud(k) {
            continue;
        }
        if r.missing.iter().any(|&m| m) {
            return Err(Error::invalid(format!(
                "row {k} still has missing values; impute before gray filtering"
            )));
        }
        scored.push((k.clone(), forest.score(&r.values)));
    }
    let n_remove = (quantile * scored.len() as f64).floor() as usize;
    // Stable sort keeps key order among equal scores.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(n_remove);
    let removed_keys: std::collections::BTreeSet<&RowKey> = scored.iter().map(|(k, _)| k).collect();
    let mut dataset = ds.clone();
    dataset.retain_rows(|k, _| !removed_keys.contains(k));
    Ok(GrayFilterResult {
        dataset,
        removed: scored,
    })
}

pub fn write_removed_csv(path: &Path, removed: &[(RowKey, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{other:?}")),
    })?;
    w.write_record(["company_id", "year", "score"])?;
    for (k, s) in removed {
        w.write_record([k.company.as_str(), &k.year.to_string(), &format!("{s}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureKind, FraudLabel, IndicatorSchema, Level1, Row};
    use rand_distr::{Distribution, StandardNormal};
    use std::collections::BTreeMap;

    /// Harmonic number by direct summation, smallest terms first with
    /// compensation.
    fn harmonic_exact(n: usize) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for i in (1..=n).rev() {
            let y = 1.0 / i as f64 - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        sum
    }

    #[test]
    fn c_factor_boundaries() {
        assert_eq!(c_factor(2), 1.0);
        assert_eq!(c_factor(1), 0.0);
        assert_eq!(c_factor(0), 0.0);
    }

    #[test]
    fn c_factor_matches_exact_harmonic_sum() {
        let psi = 256;
        let exact = 2.0 * harmonic_exact(psi - 1) - 2.0 * (psi as f64 - 1.0) / psi as f64;
        let approx = c_factor(psi);
        assert!(((approx - exact) / exact).abs() < 1e-3, "{approx} vs {exact}");
    }

    #[test]
    fn score_identities() {
        let psi = 256;
        assert!((score_from_mean_path(c_factor(psi), psi) - 0.5).abs() < 1e-12);
        assert!((score_from_mean_path(1e-12, psi) - 1.0).abs() < 1e-9);
        assert!(score_from_mean_path(3.0, psi) > score_from_mean_path(4.0, psi));
    }

    fn blob(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, &[99]);
        (0..n)
            .map(|_| vec![StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)])
            .collect()
    }

    #[test]
    fn deterministic_by_seed() {
        let x = blob(64, 1);
        let a = fit_iforest(&x, 1, 64, 7).unwrap();
        let b = fit_iforest(&x, 1, 64, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_matrix_gives_single_leaves() {
        let x = vec![vec![3.0, -1.0]; 32];
        let f = fit_iforest(&x, 5, 16, 0).unwrap();
        for t in &f.trees {
            assert_eq!(t.nodes, vec![IsoNode::Leaf { size: 16 }]);
        }
    }

    #[test]
    fn tree_invariants() {
        let x = blob(300, 2);
        let f = fit_iforest(&x, 20, 100, 3).unwrap();
        for t in &f.trees {
            assert!(t.max_depth() <= 7);
            assert_eq!(t.leaf_sizes().iter().sum::<usize>(), 100);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn trees_respect_depth_cap_and_cover_subsample(
            n in 2usize..120,
            data_seed in 0u64..1000,
            psi_frac in 0.05f64..1.0,
            seed in 0u64..1000,
        ) {
            let x = blob(n, data_seed);
            let psi = ((n as f64 * psi_frac) as usize).clamp(2, n);
            let f = fit_iforest(&x, 5, psi, seed).unwrap();
            let cap = (psi as f64).log2().ceil() as usize;
            proptest::prop_assert_eq!(f.trees.len(), f.n_trees);
            for t in &f.trees {
                proptest::prop_assert!(t.max_depth() <= cap);
                proptest::prop_assert_eq!(t.leaf_sizes().iter().sum::<usize>(), psi);
            }
            for row in &x {
                let s = anomaly_score(&f, row);
                proptest::prop_assert!(s > 0.0 && s <= 1.0);
            }
        }
    }

    #[test]
    fn outlier_has_shorter_paths_and_higher_score() {
        let mut x = blob(500, 4);
        x.push(vec![10.0, 10.0]);
        let f = fit_iforest(&x, 100, 256, 11).unwrap();
        let outlier = f.mean_path_length(&x[500]);
        let blob_mean: f64 = x[..500].iter().map(|p| f.mean_path_length(p)).sum::<f64>() / 500.0;
        assert!(outlier < blob_mean);

        let mut inlier: Vec<f64> = x[..500].iter().map(|p| f.score(p)).collect();
        inlier.sort_by(f64::total_cmp);
        let p95 = inlier[(0.95 * 500.0) as usize];
        assert!(f.score(&x[500]) > p95);
    }

    #[test]
    fn row_order_does_not_matter() {
        let x = blob(200, 5);
        let mut rev = x.clone();
        rev.reverse();
        let a = fit_iforest(&x, 10, 64, 9).unwrap();
        let b = fit_iforest(&rev, 10, 64, 9).unwrap();
        for p in &x {
            assert_eq!(a.score(p), b.score(p));
        }
    }

    #[test]
    fn too_few_rows() {
        assert!(fit_iforest(&blob(10, 0), 1, 16, 0).is_err());
    }

    fn panel(n: usize, fraud: &[usize]) -> PanelDataset {
        let schema = IndicatorSchema::from_listing(vec![
            ("a".into(), Level1::Financial, "g".into(), FeatureKind::Continuous),
            ("b".into(), Level1::Financial, "g".into(), FeatureKind::Continuous),
        ])
        .unwrap();
        let pts = blob(n, 6);
        let rows: BTreeMap<RowKey, Row> = pts
            .into_iter()
            .enumerate()
            .map(|(i, p)| (RowKey::new(format!("C{i:03}"), 2020), Row::observed(p)))
            .collect();
        let mut ds = PanelDataset::new(schema, rows).unwrap();
        let labels = fraud
            .iter()
            .map(|&i| {
                let mut l = FraudLabel::default();
                l.codes.insert("P2501".into());
                (RowKey::new(format!("C{i:03}"), 2020), l)
            })
            .collect();
        ds.attach_labels(labels);
        ds
    }

    #[test]
    fn filter_removes_top_scores() {
        let ds = panel(100, &[]);
        let forest = fit_on_non_fraud(&ds, 50, Some(64), 1).unwrap();
        let out = filter_gray(&ds, &forest, 0.05).unwrap();
        assert_eq!(out.removed.len(), 5);
        assert_eq!(out.dataset.len(), 95);
        // Sort-based oracle.
        let mut all: Vec<(RowKey, f64)> = ds
            .rows()
            .iter()
            .map(|(k, r)| (k.clone(), forest.score(&r.values)))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let expect: Vec<&RowKey> = all[..5].iter().map(|(k, _)| k).collect();
        let got: Vec<&RowKey> = out.removed.iter().map(|(k, _)| k).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn filter_tiny_quantile_removes_at_most_one() {
        let ds = panel(100, &[]);
        let forest = fit_on_non_fraud(&ds, 10, Some(32), 1).unwrap();
        let out = filter_gray(&ds, &forest, 1e-6).unwrap();
        assert!(out.removed.len() <= 1);
    }

    #[test]
    fn filter_spares_fraud_rows() {
        let all: Vec<usize> = (0..40).collect();
        let ds = panel(40, &all);
        let forest = fit_iforest(&blob(40, 1), 10, 32, 0).unwrap();
        let out = filter_gray(&ds, &forest, 0.5).unwrap();
        assert!(out.removed.is_empty());
        assert_eq!(out.dataset.len(), 40);
    }

    #[test]
    fn filter_rejects_bad_quantile() {
        let ds = panel(20, &[]);
        let forest = fit_on_non_fraud(&ds, 5, Some(16), 0).unwrap();
        assert!(filter_gray(&ds, &forest, 0.0).is_err());
        assert!(filter_gray(&ds, &forest, 1.0).is_err());
    }
}
