//! Gradient-boosted regression trees with squared-error loss, exact greedy
//! split search and level-wise growth.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtConfig {
    pub max_depth: usize,
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub colsample_bytree: f64,
    pub min_child_weight: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            max_depth: 6,
            n_estimators: 200,
            learning_rate: 0.1,
            subsample: 0.8,
            colsample_bytree: 1.0,
            min_child_weight: 1.0,
            lambda: 1.0,
            seed: 0,
        }
    }
}

fn in_range<T: PartialOrd + std::fmt::Display>(name: &str, v: T, lo: T, hi: T) -> Result<()> {
    if v < lo || v > hi {
        return Err(Error::Config(format!("{name}={v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

impl GbtConfig {
    /// Build a configuration restricted to the tuned search ranges.
    pub fn new(
        max_depth: usize,
        n_estimators: usize,
        learning_rate: f64,
        subsample: f64,
        colsample_bytree: f64,
        min_child_weight: f64,
        lambda: f64,
        seed: u64,
    ) -> Result<Self> {
        let c = Self {
            max_depth,
            n_estimators,
            learning_rate,
            subsample,
            colsample_bytree,
            min_child_weight,
            lambda,
            seed,
        };
        in_range("max_depth", max_depth, 6, 9)?;
        in_range("n_estimators", n_estimators, 100, 300)?;
        in_range("learning_rate", learning_rate, 0.03, 0.15)?;
        in_range("subsample", subsample, 0.6, 0.9)?;
        in_range("colsample_bytree", colsample_bytree, 0.7, 1.0)?;
        in_range("min_child_weight", min_child_weight, 1.0, 5.0)?;
        c.validate()?;
        Ok(c)
    }

    /// Minimal sanity checks applied by `fit`.
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::Config("max_depth must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate={} must be positive", self.learning_rate)));
        }
        for (name, v) in [("subsample", self.subsample), ("colsample_bytree", self.colsample_bytree)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name}={v} outside (0, 1]")));
            }
        }
        if !(self.min_child_weight >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("min_child_weight and lambda must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: u32,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf { value: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value as f64,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature as usize] < *threshold as f64 {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + go(t, *left as usize).max(go(t, *right as usize))
                }
            }
        }
        go(self, 0)
    }

    pub fn split_features(&self) -> Vec<u32> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub base_score: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub trees: Vec<Tree>,
    /// Training MSE after each round.
    pub train_mse: Vec<f64>,
}

impl GbtModel {
    pub fn predict_row(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::Dimension(format!(
                "model expects {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        Ok(self.predict_unchecked(x))
    }

    fn predict_unchecked(&self, x: &[f64]) -> f64 {
        let mut p = self.base_score;
        for t in &self.trees {
            p += self.learning_rate * t.predict_row(x);
        }
        p
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.n_features {
            return Err(Error::Dimension(format!(
                "model expects {} features, got {}",
                self.n_features,
                x.cols()
            )));
        }
        Ok((0..x.rows()).map(|i| self.predict_unchecked(x.row(i))).collect())
    }

    /// Hessian mass (sample count) reaching each leaf of each tree.
    pub fn leaf_counts(&self, x: &Matrix) -> Vec<Vec<(usize, usize)>> {
        self.trees
            .iter()
            .map(|t| {
                let mut counts = std::collections::BTreeMap::new();
                for i in 0..x.rows() {
                    let mut n = 0;
                    while let Node::Split { feature, threshold, left, right } = &t.nodes[n] {
                        n = if x.get(i, *feature as usize) < *threshold as f64 {
                            *left as usize
                        } else {
                            *right as usize
                        };
                    }
                    *counts.entry(n).or_insert(0) += 1;
                }
                counts.into_iter().collect()
            })
            .collect()
    }
}

/// An f32 threshold near the midpoint of `lo < hi` with `lo < t <= hi`, or
/// `None` when no f32 separates them.
fn split_threshold(lo: f64, hi: f64) -> Option<f32> {
    let mut t = (0.5 * (lo + hi)) as f32;
    if t as f64 <= lo {
        t = t.next_up();
    }
    if t as f64 > hi {
        t = t.next_down();
    }
    (t as f64 > lo && t as f64 <= hi).then_some(t)
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f32,
}

fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    if h + lambda > 0.0 {
        -g / (h + lambda)
    } else {
        0.0
    }
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    if h + lambda > 0.0 {
        g * g / (h + lambda)
    } else {
        0.0
    }
}

const NOT_IN_PLAY: usize = usize::MAX;

/// Grow one tree level by level. Every level scans each feature's global
/// sort order once, accumulating gradient sums for all frontier nodes.
fn grow_tree(
    x: &Matrix,
    grad: &[f64],
    rows: &[usize],
    sorted: &[Vec<usize>],
    features: &[usize],
    cfg: &GbtConfig,
) -> Tree {
    let n = x.rows();
    let lambda = cfg.lambda;
    let mcw = cfg.min_child_weight;
    // frontier slot of every sampled row
    let mut slot_of = vec![NOT_IN_PLAY; n];
    for &r in rows {
        slot_of[r] = 0;
    }
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut frontier = vec![0usize];
    for depth in 0..=cfg.max_depth {
        let k = frontier.len();
        let mut g_tot = vec![0.0; k];
        let mut h_tot = vec![0.0; k];
        for i in 0..n {
            let s = slot_of[i];
            if s != NOT_IN_PLAY {
                g_tot[s] += grad[i];
                h_tot[s] += 1.0;
            }
        }
        let mut best: Vec<Option<Candidate>> = vec![None; k];
        if depth < cfg.max_depth {
            let parent: Vec<f64> = (0..k).map(|s| score(g_tot[s], h_tot[s], lambda)).collect();
            let mut gl = vec![0.0; k];
            let mut hl = vec![0.0; k];
            let mut prev = vec![f64::NAN; k];
            for &f in features {
                gl.iter_mut().for_each(|v| *v = 0.0);
                hl.iter_mut().for_each(|v| *v = 0.0);
                prev.iter_mut().for_each(|v| *v = f64::NAN);
                for &i in &sorted[f] {
                    let s = slot_of[i];
                    if s == NOT_IN_PLAY {
                        continue;
                    }
                    let v = x.get(i, f);
                    let p = prev[s];
                    if v > p && hl[s] >= mcw && h_tot[s] - hl[s] >= mcw {
                        let gain = 0.5
                            * (score(gl[s], hl[s], lambda)
                                + score(g_tot[s] - gl[s], h_tot[s] - hl[s], lambda)
                                - parent[s]);
                        let improves = match &best[s] {
                            None => gain > 0.0,
                            Some(b) => gain > b.gain,
                        };
                        if improves {
                            if let Some(t) = split_threshold(p, v) {
                                best[s] = Some(Candidate {
                                    gain,
                                    feature: f,
                                    threshold: t,
                                });
                            }
                        }
                    }
                    gl[s] += grad[i];
                    hl[s] += 1.0;
                    prev[s] = v;
                }
            }
        }
        let mut next = Vec::new();
        // slot remapping for the next level
        let mut child_slots: Vec<Option<(usize, Candidate)>> = vec![None; k];
        for (s, &node) in frontier.iter().enumerate() {
            match best[s] {
                Some(c) => {
                    let left = nodes.len();
                    nodes.push(Node::Leaf { value: 0.0 });
                    nodes.push(Node::Leaf { value: 0.0 });
                    nodes[node] = Node::Split {
                        feature: c.feature as u32,
                        threshold: c.threshold,
                        left: left as u32,
                        right: left as u32 + 1,
                    };
                    child_slots[s] = Some((next.len(), c));
                    next.push(left);
                    next.push(left + 1);
                }
                None => {
                    nodes[node] = Node::Leaf {
                        value: leaf_weight(g_tot[s], h_tot[s], lambda) as f32,
                    };
                }
            }
        }
        if next.is_empty() {
            break;
        }
        for i in 0..n {
            let s = slot_of[i];
            if s == NOT_IN_PLAY {
                continue;
            }
            slot_of[i] = match child_slots[s] {
                Some((base, c)) => {
                    if x.get(i, c.feature) < c.threshold as f64 {
                        base
                    } else {
                        base + 1
                    }
                }
                None => NOT_IN_PLAY,
            };
        }
        frontier = next;
    }
    Tree { nodes }
}

/// Fit a boosted ensemble on the rows of `x`.
pub fn fit(x: &Matrix, y: &[f64], cfg: &GbtConfig) -> Result<GbtModel> {
    cfg.validate()?;
    let n = x.rows();
    if n == 0 {
        return Err(Error::Empty("no training rows".into()));
    }
    if y.len() != n {
        return Err(Error::Dimension(format!("{n} rows but {} targets", y.len())));
    }
    if x.as_slice().iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Domain("training data contains non-finite values".into()));
    }
    let f = x.cols();
    let sorted: Vec<Vec<usize>> = (0..f)
        .map(|j| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x.get(a, j).total_cmp(&x.get(b, j)).then(a.cmp(&b)));
            idx
        })
        .collect();

    let base_score = y.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base_score; n];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_rows = ((cfg.subsample * n as f64).round() as usize).clamp(1, n);
    let n_cols = ((cfg.colsample_bytree * f as f64).round() as usize).clamp(1, f.max(1));
    let mut trees = Vec::new();
    let mut train_mse = Vec::new();

    for _ in 0..cfg.n_estimators {
        let grad: Vec<f64> = pred.iter().zip(y).map(|(p, t)| p - t).collect();
        let mut rows: Vec<usize> = if n_rows < n {
            sample(&mut rng, n, n_rows).into_vec()
        } else {
            (0..n).collect()
        };
        rows.sort_unstable();
        let mut features: Vec<usize> = if f > 0 && n_cols < f {
            sample(&mut rng, f, n_cols).into_vec()
        } else {
            (0..f).collect()
        };
        features.sort_unstable();

        let tree = grow_tree(x, &grad, &rows, &sorted, &features, cfg);
        let is_null = matches!(tree.nodes.as_slice(), [Node::Leaf { value }] if *value == 0.0);
        if is_null {
            break;
        }
        for i in 0..n {
            pred[i] += cfg.learning_rate * tree.predict_row(x.row(i));
        }
        trees.push(tree);
        let mse = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n as f64;
        train_mse.push(mse);
    }
    Ok(GbtModel {
        base_score,
        learning_rate: cfg.learning_rate,
        n_features: f,
        trees,
        train_mse,
    })
}

pub(crate) fn write_model(buf: &mut Vec<u8>, m: &GbtModel) {
    buf.extend_from_slice(&m.base_score.to_le_bytes());
    buf.extend_from_slice(&m.learning_rate.to_le_bytes());
    buf.extend_from_slice(&(m.n_features as u32).to_le_bytes());
    buf.extend_from_slice(&(m.trees.len() as u32).to_le_bytes());
    for t in &m.trees {
        buf.extend_from_slice(&(t.nodes.len() as u32).to_le_bytes());
        for node in &t.nodes {
            match node {
                Node::Leaf { value } => {
                    buf.push(0);
                    buf.extend_from_slice(&value.to_le_bytes());
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    buf.push(1);
                    buf.extend_from_slice(&feature.to_le_bytes());
                    buf.extend_from_slice(&threshold.to_le_bytes());
                    buf.extend_from_slice(&left.to_le_bytes());
                    buf.extend_from_slice(&right.to_le_bytes());
                }
            }
        }
    }
}

pub(crate) fn read_model(r: &mut crate::codec::Reader<'_>) -> Result<GbtModel> {
    let base_score = r.f64()?;
    let learning_rate = r.f64()?;
    let n_features = r.u32()? as usize;
    let n_trees = r.u32()? as usize;
    let mut trees = Vec::with_capacity(n_trees.min(4096));
    for _ in 0..n_trees {
        let n_nodes = r.u32()? as usize;
        let mut nodes = Vec::with_capacity(n_nodes.min(1 << 16));
        for _ in 0..n_nodes {
            let node = match r.u8()? {
                0 => Node::Leaf { value: r.f32()? },
                1 => {
                    let feature = r.u32()?;
                    let threshold = r.f32()?;
                    let left = r.u32()?;
                    let right = r.u32()?;
                    if feature as usize >= n_features
                        || left as usize >= n_nodes
                        || right as usize >= n_nodes
                    {
                        return Err(Error::Corrupt("tree node references out of range".into()));
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    }
                }
                tag => return Err(Error::Corrupt(format!("unknown tree node tag {tag}"))),
            };
            nodes.push(node);
        }
        if nodes.is_empty() {
            return Err(Error::Corrupt("empty tree".into()));
        }
        trees.push(Tree { nodes });
    }
    Ok(GbtModel {
        base_score,
        learning_rate,
        n_features,
        trees,
        train_mse: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(depth: usize, rounds: usize, lr: f64, lambda: f64) -> GbtConfig {
        GbtConfig {
            max_depth: depth,
            n_estimators: rounds,
            learning_rate: lr,
            subsample: 1.0,
            colsample_bytree: 1.0,
            min_child_weight: 0.0,
            lambda,
            seed: 1,
        }
    }

    #[test]
    fn hand_traced_two_rounds() {
        let x = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let y = [0.0, 2.0];
        let m = fit(&x, &y, &raw(1, 2, 0.5, 0.0)).unwrap();
        assert_eq!(m.base_score, 1.0);
        assert_eq!(m.trees.len(), 2);
        assert_eq!(m.predict(&x).unwrap(), vec![0.25, 1.75]);
    }

    #[test]
    fn constant_target_has_no_trees() {
        let x = Matrix::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let m = fit(&x, &[3.5; 4], &GbtConfig::default()).unwrap();
        assert!(m.trees.is_empty());
        assert_eq!(m.predict(&x).unwrap(), vec![3.5; 4]);
    }

    #[test]
    fn threshold_lies_between_values() {
        for (lo, hi) in [(0.0, 1.0), (-3.5, -3.25), (0.1, 0.2), (1.0, 1.0 + 1e-6)] {
            let t = split_threshold(lo, hi).unwrap() as f64;
            assert!(t > lo && t <= hi, "{lo} {hi} {t}");
        }
        assert_eq!(split_threshold(1.0, 1.0 + 1e-12), None);
    }

    #[test]
    fn ranges_enforced_by_constructor() {
        assert!(GbtConfig::new(6, 200, 0.1, 0.8, 1.0, 1.0, 1.0, 0).is_ok());
        assert!(GbtConfig::new(5, 200, 0.1, 0.8, 1.0, 1.0, 1.0, 0).is_err());
        assert!(GbtConfig::new(6, 400, 0.1, 0.8, 1.0, 1.0, 1.0, 0).is_err());
        assert!(GbtConfig::new(6, 200, 0.2, 0.8, 1.0, 1.0, 1.0, 0).is_err());
        assert!(GbtConfig::new(6, 200, 0.1, 0.95, 1.0, 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn feature_count_checked_on_predict() {
        let x = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let m = fit(&x, &[0.0, 1.0], &raw(1, 1, 1.0, 0.0)).unwrap();
        assert!(m.predict_row(&[1.0, 2.0]).is_err());
        assert!(fit(&Matrix::zeros(0, 1), &[], &raw(1, 1, 1.0, 0.0)).is_err());
    }
}
