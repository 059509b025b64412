//! Stochastic gradient-boosted regression trees for binary classification
//! under logistic loss.
//!
//! Each round fits a least-squares regression tree to the residuals
//! `t - p` on a seeded row subsample, sets every leaf to one Newton step
//! `sum(r) / sum(p(1-p))` (clamped), and adds the shrunken tree to the
//! running log-odds.
//!
//! Training rows are first put in a canonical order (lexicographic by
//! feature vector, then label), so the fitted ensemble does not depend on
//! the order rows were supplied in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

const LEAF_CLAMP: f64 = 4.0;
const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub subsample: f64,
    pub min_leaf: usize,
    /// Derived from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            n_rounds: 200,
            max_depth: 3,
            shrinkage: 0.1,
            subsample: 0.5,
            min_leaf: 5,
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rounds < 1 {
            return Err(Error::Config("n_rounds must be at least 1".into()));
        }
        if self.max_depth < 1 {
            return Err(Error::Config("max_depth must be at least 1".into()));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::Config("shrinkage must lie in (0, 1]".into()));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Config("subsample must lie in (0, 1]".into()));
        }
        if self.min_leaf < 1 {
            return Err(Error::Config("min_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: f64,
    },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaves(&self) -> Vec<f64> {
        match self {
            TreeNode::Leaf { value } => vec![*value],
            TreeNode::Split { left, right, .. } => {
                let mut v = left.leaves();
                v.extend(right.leaves());
                v
            }
        }
    }

    /// Pre-order flattening; the inverse is [`TreeNode::from_preorder`].
    pub fn to_preorder(&self) -> Vec<NodeRecord> {
        let mut out = Vec::new();
        self.push_preorder(&mut out);
        out
    }

    fn push_preorder(&self, out: &mut Vec<NodeRecord>) {
        match self {
            TreeNode::Leaf { value } => out.push(NodeRecord::Leaf { value: *value }),
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                out.push(NodeRecord::Split {
                    feature: *feature,
                    threshold: *threshold,
                });
                left.push_preorder(out);
                right.push_preorder(out);
            }
        }
    }

    pub fn from_preorder(records: &[NodeRecord]) -> Result<Self> {
        let mut pos = 0;
        let tree = Self::read(records, &mut pos)?;
        if pos != records.len() {
            return Err(Error::Validation(format!(
                "tree has {} trailing node records",
                records.len() - pos
            )));
        }
        Ok(tree)
    }

    fn read(records: &[NodeRecord], pos: &mut usize) -> Result<Self> {
        let rec = records
            .get(*pos)
            .ok_or_else(|| Error::Validation("tree node list ends early".into()))?;
        *pos += 1;
        Ok(match *rec {
            NodeRecord::Leaf { value } => TreeNode::Leaf { value },
            NodeRecord::Split { feature, threshold } => {
                let left = Box::new(Self::read(records, pos)?);
                let right = Box::new(Self::read(records, pos)?);
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeRecord {
    Split { feature: usize, threshold: f64 },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub n_features: usize,
    pub base_score: f64,
    pub shrinkage: f64,
    pub trees: Vec<TreeNode>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Ensemble {
    /// An ensemble without trees that always returns `p`.
    pub fn constant(n_features: usize, p: f64) -> Self {
        let p = p.clamp(1e-300, 1.0 - 1e-16);
        Self {
            n_features,
            base_score: (p / (1.0 - p)).ln(),
            shrinkage: 1.0,
            trees: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.base_score.is_finite() || !self.shrinkage.is_finite() {
            return Err(Error::Validation("ensemble scores must be finite".into()));
        }
        for (i, t) in self.trees.iter().enumerate() {
            for rec in t.to_preorder() {
                match rec {
                    NodeRecord::Split { feature, threshold } => {
                        if feature >= self.n_features || !threshold.is_finite() {
                            return Err(Error::Validation(format!(
                                "tree {i}: split on feature {feature} of {} / threshold {threshold}",
                                self.n_features
                            )));
                        }
                    }
                    NodeRecord::Leaf { value } if !value.is_finite() => {
                        return Err(Error::Validation(format!("tree {i}: non-finite leaf")));
                    }
                    NodeRecord::Leaf { .. } => {}
                }
            }
        }
        Ok(())
    }

    pub fn raw_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::shape("ensemble input", self.n_features, x.len()));
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(self.base_score + self.shrinkage * sum)
    }

    /// Probability of the positive class, strictly inside (0, 1).
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        let p = sigmoid(self.raw_score(x)?);
        Ok(p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
    }
}

/// Mean logistic loss of labels against log-odds.
pub fn log_loss(labels: &[u8], log_odds: &[f64]) -> f64 {
    let total: f64 = labels
        .iter()
        .zip(log_odds)
        .map(|(&t, &f)| {
            // log(1 + e^f) - t f, evaluated stably
            let softplus = if f > 0.0 {
                f + (-f).exp().ln_1p()
            } else {
                f.exp().ln_1p()
            };
            softplus - f64::from(t) * f
        })
        .sum();
    total / labels.len() as f64
}

/// Least-squares regression tree over `active_rows`, Newton-valued leaves.
/// Ties between equal gains go to the lower feature index, then the lower threshold.
pub fn fit_tree(
    features: &[Vec<f64>],
    residuals: &[f64],
    hessians: &[f64],
    cfg: &BoostConfig,
    active_rows: &[usize],
) -> Result<TreeNode> {
    if active_rows.is_empty() {
        return Err(Error::Invalid(
            "fit_tree needs at least one active row".into(),
        ));
    }
    let n_features = features[active_rows[0]].len();
    Ok(grow(
        features,
        residuals,
        hessians,
        cfg,
        active_rows.to_vec(),
        0,
        n_features,
    ))
}

fn newton_leaf(residuals: &[f64], hessians: &[f64], rows: &[usize]) -> TreeNode {
    let sr: f64 = rows.iter().map(|&i| residuals[i]).sum();
    let sh: f64 = rows.iter().map(|&i| hessians[i]).sum();
    let value = if sh > 1e-12 {
        (sr / sh).clamp(-LEAF_CLAMP, LEAF_CLAMP)
    } else if sr != 0.0 {
        LEAF_CLAMP.copysign(sr)
    } else {
        0.0
    };
    TreeNode::Leaf { value }
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn grow(
    features: &[Vec<f64>],
    residuals: &[f64],
    hessians: &[f64],
    cfg: &BoostConfig,
    rows: Vec<usize>,
    depth: usize,
    n_features: usize,
) -> TreeNode {
    if depth >= cfg.max_depth || rows.len() < 2 * cfg.min_leaf {
        return newton_leaf(residuals, hessians, &rows);
    }
    let n = rows.len() as f64;
    let total: f64 = rows.iter().map(|&i| residuals[i]).sum();
    let parent_score = total * total / n;
    let mut best: Option<BestSplit> = None;
    let mut sorted = rows.clone();
    for f in 0..n_features {
        // Stable sort keeps the canonical row order among equal values.
        sorted.sort_by(|&a, &b| features[a][f].total_cmp(&features[b][f]));
        let mut left_sum = 0.0;
        for k in 0..sorted.len() - 1 {
            left_sum += residuals[sorted[k]];
            let (lo, hi) = (features[sorted[k]][f], features[sorted[k + 1]][f]);
            let n_left = k + 1;
            let n_right = sorted.len() - n_left;
            if lo == hi || n_left < cfg.min_leaf || n_right < cfg.min_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64
                - parent_score;
            if gain > MIN_GAIN && best.as_ref().map_or(true, |b| gain > b.gain) {
                let mid = lo + (hi - lo) / 2.0;
                let threshold = if mid < hi { mid } else { lo };
                best = Some(BestSplit {
                    gain,
                    feature: f,
                    threshold,
                });
            }
        }
    }
    let Some(split) = best else {
        return newton_leaf(residuals, hessians, &rows);
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|&&i| features[i][split.feature] <= split.threshold);
    TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        left: Box::new(grow(
            features,
            residuals,
            hessians,
            cfg,
            left_rows,
            depth + 1,
            n_features,
        )),
        right: Box::new(grow(
            features,
            residuals,
            hessians,
            cfg,
            right_rows,
            depth + 1,
            n_features,
        )),
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub ensemble: Ensemble,
    /// Training log-loss before any tree, then after each round.
    pub loss_history: Vec<f64>,
}

fn validate_training(features: &[Vec<f64>], labels: &[u8]) -> Result<usize> {
    if features.len() != labels.len() {
        return Err(Error::shape("gbm labels", features.len(), labels.len()));
    }
    if features.len() < 2 {
        return Err(Error::Invalid(
            "gradient boosting needs at least two rows".into(),
        ));
    }
    let n_features = features[0].len();
    if n_features == 0 {
        return Err(Error::Invalid("feature vectors are empty".into()));
    }
    for (i, row) in features.iter().enumerate() {
        if row.len() != n_features {
            return Err(Error::shape(&format!("gbm row {i}"), n_features, row.len()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("row {i} holds non-finite features")));
        }
    }
    if let Some(bad) = labels.iter().find(|&&t| t > 1) {
        return Err(Error::Invalid(format!(
            "labels must be 0 or 1, found {bad}"
        )));
    }
    let positives = labels.iter().filter(|&&t| t == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Invalid(
            "labels contain a single class; boosting needs both TP and FP rows".into(),
        ));
    }
    Ok(n_features)
}

pub fn fit(features: &[Vec<f64>], labels: &[u8], cfg: &BoostConfig) -> Result<Ensemble> {
    fit_with_history(features, labels, cfg).map(|o| o.ensemble)
}

pub fn fit_with_history(
    features: &[Vec<f64>],
    labels: &[u8],
    cfg: &BoostConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let n_features = validate_training(features, labels)?;

    let mut canon: Vec<usize> = (0..features.len()).collect();
    canon.sort_by(|&a, &b| {
        features[a]
            .iter()
            .zip(&features[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(labels[a].cmp(&labels[b]))
    });
    let xs: Vec<Vec<f64>> = canon.iter().map(|&i| features[i].clone()).collect();
    let ts: Vec<u8> = canon.iter().map(|&i| labels[i]).collect();
    let n = xs.len();

    let positives = ts.iter().filter(|&&t| t == 1).count() as f64;
    let mean = positives / n as f64;
    let base_score = (mean / (1.0 - mean)).ln();
    let mut log_odds = vec![base_score; n];
    let mut loss_history = vec![log_loss(&ts, &log_odds)];
    let mut residuals = vec![0.0; n];
    let mut hessians = vec![0.0; n];
    let sample_root = Stream::new(cfg.seed).named("gbm-subsample");
    let n_active = ((cfg.subsample * n as f64).floor() as usize).clamp(1, n);
    let mut trees = Vec::with_capacity(cfg.n_rounds);

    for round in 0..cfg.n_rounds {
        for i in 0..n {
            let p = sigmoid(log_odds[i]);
            residuals[i] = f64::from(ts[i]) - p;
            hessians[i] = p * (1.0 - p);
        }
        let active: Vec<usize> = if n_active == n {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            sample_root.child(round as u64).shuffle(&mut all);
            let mut pick = all[..n_active].to_vec();
            pick.sort_unstable();
            pick
        };
        let tree = fit_tree(&xs, &residuals, &hessians, cfg, &active)?;
        for (f, x) in log_odds.iter_mut().zip(&xs) {
            *f += cfg.shrinkage * tree.predict(x);
        }
        loss_history.push(log_loss(&ts, &log_odds));
        trees.push(tree);
    }

    let ensemble = Ensemble {
        n_features,
        base_score,
        shrinkage: cfg.shrinkage,
        trees,
    };
    ensemble.validate()?;
    Ok(FitOutcome {
        ensemble,
        loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(
        n_rounds: usize,
        max_depth: usize,
        shrinkage: f64,
        subsample: f64,
        min_leaf: usize,
    ) -> BoostConfig {
        BoostConfig {
            n_rounds,
            max_depth,
            shrinkage,
            subsample,
            min_leaf,
            seed: 1,
        }
    }

    fn accuracy(e: &Ensemble, xs: &[Vec<f64>], ts: &[u8]) -> f64 {
        let hits = xs
            .iter()
            .zip(ts)
            .filter(|(x, &t)| (e.predict_proba(x).unwrap() >= 0.5) == (t == 1))
            .count();
        hits as f64 / ts.len() as f64
    }

    fn separable(n: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
        let xs: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let ts = (0..n).map(|i| (i >= n / 2) as u8).collect();
        (xs, ts)
    }

    #[test]
    fn separable_stumps_reach_full_accuracy() {
        let (xs, ts) = separable(40);
        let e = fit(&xs, &ts, &cfg(10, 1, 0.1, 1.0, 1)).unwrap();
        assert_eq!(accuracy(&e, &xs, &ts), 1.0);
        // A training point sits on the correct side of one half.
        assert!(e.predict_proba(&[0.0]).unwrap() < 0.5);
        assert!(e.predict_proba(&[39.0]).unwrap() > 0.5);
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        // Needs many rows per leaf; small samples are memorised.
        let mut rng = Stream::new(9);
        let xs: Vec<Vec<f64>> = (0..5000)
            .map(|_| (0..9).map(|_| rng.uniform()).collect())
            .collect();
        let ts: Vec<u8> = (0..5000).map(|_| rng.bernoulli(0.5) as u8).collect();
        let c = BoostConfig {
            n_rounds: 50,
            ..BoostConfig::default()
        };
        let out = fit_with_history(&xs, &ts, &c).unwrap();
        let last = *out.loss_history.last().unwrap();
        assert!(last >= 0.9 * 2f64.ln(), "log-loss {last}");
    }

    #[test]
    fn single_stump_cannot_express_xor() {
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        for a in 0..2 {
            for b in 0..2 {
                for _ in 0..10 {
                    xs.push(vec![a as f64, b as f64]);
                    ts.push((a ^ b) as u8);
                }
            }
        }
        let e = fit(&xs, &ts, &cfg(1, 1, 1.0, 1.0, 1)).unwrap();
        assert!(accuracy(&e, &xs, &ts) <= 0.75);
    }

    #[test]
    fn rejects_bad_training_input() {
        let xs = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            fit(&xs, &[1, 1], &BoostConfig::default()),
            Err(Error::Invalid(_))
        ));
        assert!(fit(&xs[..1], &[1], &BoostConfig::default()).is_err());
        assert!(fit(&xs, &[0, 1], &cfg(0, 1, 0.1, 1.0, 1)).is_err());
        assert!(fit(&xs, &[0, 2], &BoostConfig::default()).is_err());
        assert!(fit(
            &[vec![0.0], vec![1.0, 2.0]],
            &[0, 1],
            &BoostConfig::default()
        )
        .is_err());
    }

    #[test]
    fn empty_ensemble_returns_label_mean() {
        let (xs, mut ts) = separable(10);
        ts[0] = 1; // 6 of 10 positive
        let out = fit_with_history(&xs, &ts, &cfg(1, 1, 0.1, 1.0, 1)).unwrap();
        let mut e = out.ensemble;
        e.trees.clear();
        assert!((e.predict_proba(&[3.0]).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn wrong_dimension_is_structural_error() {
        let e = Ensemble::constant(9, 0.3);
        assert!(matches!(
            e.predict_proba(&[0.0; 8]),
            Err(Error::Shape { .. })
        ));
        let p = e.predict_proba(&[0.0; 9]).unwrap();
        assert!((p - 0.3).abs() < 1e-12);
        assert_eq!(p.to_bits(), e.predict_proba(&[0.0; 9]).unwrap().to_bits());
    }

    #[test]
    fn constant_residuals_give_single_newton_leaf() {
        let xs: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![i as f64, (i * 7 % 5) as f64])
            .collect();
        let r = vec![0.25; 20];
        let h = vec![0.125; 20];
        let rows: Vec<usize> = (0..20).collect();
        let t = fit_tree(&xs, &r, &h, &cfg(1, 3, 0.1, 1.0, 1), &rows).unwrap();
        assert_eq!(t, TreeNode::Leaf { value: 2.0 });
    }

    #[test]
    fn min_leaf_equal_to_rows_forces_leaf() {
        let xs: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64]).collect();
        let r: Vec<f64> = (0..12).map(|i| if i < 6 { -0.5 } else { 0.5 }).collect();
        let h = vec![0.25; 12];
        let rows: Vec<usize> = (0..12).collect();
        let t = fit_tree(&xs, &r, &h, &cfg(1, 3, 0.1, 1.0, 12), &rows).unwrap();
        assert!(matches!(t, TreeNode::Leaf { .. }));
        assert!(fit_tree(&xs, &r, &h, &cfg(1, 3, 0.1, 1.0, 1), &[]).is_err());
    }

    /// Enumerates every (feature, threshold) candidate and scores it directly.
    fn best_split_by_enumeration(xs: &[Vec<f64>], r: &[f64]) -> (usize, f64) {
        let sse = |vals: &[f64]| {
            if vals.is_empty() {
                return 0.0;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - m).powi(2)).sum::<f64>()
        };
        let mut best = (f64::INFINITY, 0, 0.0);
        for f in 0..xs[0].len() {
            let mut values: Vec<f64> = xs.iter().map(|x| x[f]).collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            for w in values.windows(2) {
                let thr = (w[0] + w[1]) / 2.0;
                let left: Vec<f64> = xs
                    .iter()
                    .zip(r)
                    .filter(|(x, _)| x[f] <= thr)
                    .map(|(_, &v)| v)
                    .collect();
                let right: Vec<f64> = xs
                    .iter()
                    .zip(r)
                    .filter(|(x, _)| x[f] > thr)
                    .map(|(_, &v)| v)
                    .collect();
                let cost = sse(&left) + sse(&right);
                if cost < best.0 - 1e-9 {
                    best = (cost, f, thr);
                }
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn root_split_matches_exhaustive_search() {
        let mut rng = Stream::new(21);
        let xs: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.uniform_range(0.0, 10.0), rng.uniform_range(0.0, 10.0)])
            .collect();
        let r: Vec<f64> = xs.iter().map(|x| (x[0] - 5.0).signum()).collect();
        let h = vec![0.25; 200];
        let rows: Vec<usize> = (0..200).collect();
        let t = fit_tree(&xs, &r, &h, &cfg(1, 1, 0.1, 1.0, 1), &rows).unwrap();
        let (f, thr) = best_split_by_enumeration(&xs, &r);
        match t {
            TreeNode::Split {
                feature, threshold, ..
            } => {
                assert_eq!(feature, 0);
                assert_eq!(feature, f);
                assert!((threshold - thr).abs() < 1e-12);
                assert!((threshold - 5.0).abs() < 0.2);
            }
            _ => panic!("expected a split"),
        }
    }

    fn noisy(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = Stream::new(seed);
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..9).map(|_| rng.uniform()).collect();
            let z = 3.0 * x[0] - 2.0 * x[7] + x[8] * x[1] - 0.5;
            ts.push(rng.bernoulli(1.0 / (1.0 + (-z).exp())) as u8);
            xs.push(x);
        }
        (xs, ts)
    }

    #[test]
    fn full_sample_loss_never_increases() {
        let (xs, ts) = noisy(300, 4);
        let out = fit_with_history(&xs, &ts, &cfg(100, 3, 0.1, 1.0, 5)).unwrap();
        for w in out.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn row_permutation_gives_identical_ensemble() {
        let (xs, ts) = noisy(150, 5);
        let c = cfg(20, 3, 0.1, 1.0, 5);
        let a = fit(&xs, &ts, &c).unwrap();
        let mut order: Vec<usize> = (0..xs.len()).collect();
        Stream::new(8).shuffle(&mut order);
        let xp: Vec<Vec<f64>> = order.iter().map(|&i| xs[i].clone()).collect();
        let tp: Vec<u8> = order.iter().map(|&i| ts[i]).collect();
        assert_eq!(fit(&xp, &tp, &c).unwrap(), a);
    }

    #[test]
    fn preorder_round_trip() {
        let (xs, ts) = noisy(120, 6);
        let e = fit(&xs, &ts, &cfg(5, 3, 0.1, 0.5, 3)).unwrap();
        for t in &e.trees {
            assert_eq!(&TreeNode::from_preorder(&t.to_preorder()).unwrap(), t);
            assert!(t.depth() <= 3);
        }
        assert!(TreeNode::from_preorder(&[NodeRecord::Split {
            feature: 0,
            threshold: 1.0
        }])
        .is_err());
    }

    proptest! {
        #[test]
        fn nonnegative_tree_never_lowers_probability(
            leaves in proptest::collection::vec(0.0..4.0f64, 2),
            thr in 0.0..1.0f64,
            x in proptest::collection::vec(0.0..1.0f64, 9),
        ) {
            let (xs, ts) = noisy(60, 7);
            let mut e = fit(&xs, &ts, &cfg(3, 2, 0.1, 1.0, 3)).unwrap();
            let before = e.predict_proba(&x).unwrap();
            e.trees.push(TreeNode::Split {
                feature: 4,
                threshold: thr,
                left: Box::new(TreeNode::Leaf { value: leaves[0] }),
                right: Box::new(TreeNode::Leaf { value: leaves[1] }),
            });
            prop_assert!(e.predict_proba(&x).unwrap() >= before);
        }
    }
}
