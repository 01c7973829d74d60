//! Random forests of axis-aligned CART trees.
//!
//! Splits minimize within-child squared error (regression) or Gini impurity
//! (probability mode, binary targets). Candidate thresholds are midpoints of
//! consecutive distinct values; among equal improvements the lowest feature
//! index wins, then the lowest threshold. Probability forests average the leaf
//! class-1 frequencies across trees.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{Covariates, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    All,
    Sqrt,
    Count(usize),
}

impl MaxFeatures {
    fn resolve(self, d: usize) -> usize {
        match self {
            MaxFeatures::All => d,
            MaxFeatures::Sqrt => ((d as f64).sqrt().floor() as usize).max(1),
            MaxFeatures::Count(m) => m.clamp(1, d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestMode {
    Regression,
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub seed: RngStream,
}

impl ForestParams {
    /// Outcome-model settings used in the simulations (depth 5, leaf 5).
    pub fn outcome(seed: RngStream) -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 5,
            min_samples_leaf: 5,
            max_features: MaxFeatures::All,
            bootstrap: true,
            seed,
        }
    }

    /// Compliance-model settings used in the simulations (depth 3, leaf 50).
    pub fn compliance(seed: RngStream) -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 3,
            min_samples_leaf: 50,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
            seed,
        }
    }

    /// Settings for every forest in the 401(k) study.
    pub fn survey(seed: RngStream) -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 6,
            min_samples_leaf: 10,
            max_features: MaxFeatures::Count(3),
            bootstrap: true,
            seed,
        }
    }

    pub fn with_seed(&self, seed: RngStream) -> Self {
        ForestParams {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(Error::invalid(
                "forest needs n_trees, max_depth and min_samples_leaf all >= 1",
            ));
        }
        if let MaxFeatures::Count(0) = self.max_features {
            return Err(Error::invalid("max_features must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
    depth: usize,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf(_)))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub mode: ForestMode,
    pub n_features: usize,
    trees: Vec<Tree>,
}

impl ForestModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(row)).sum();
        sum / self.trees.len() as f64
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SerializedForest {
            version: FOREST_FORMAT_VERSION,
            model: self.clone(),
        })
        .expect("forest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: SerializedForest = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("bad forest json: {e}")))?;
        if s.version != FOREST_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "forest format version {} unsupported",
                s.version
            )));
        }
        Ok(s.model)
    }
}

const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SerializedForest {
    version: u32,
    model: ForestModel,
}

pub fn fit_forest(
    x: &Covariates,
    t: &[f64],
    params: &ForestParams,
    mode: ForestMode,
) -> Result<ForestModel> {
    params.validate()?;
    let n = x.n_rows();
    if t.len() != n {
        return Err(Error::invalid(format!(
            "covariates have {n} rows but target has {}",
            t.len()
        )));
    }
    if n == 0 {
        return Err(Error::invalid("cannot fit a forest on zero rows"));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite forest target"));
    }
    if mode == ForestMode::Probability && t.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("probability forest needs 0/1 targets"));
    }
    let builder = TreeBuilder {
        x,
        t,
        max_depth: params.max_depth,
        min_leaf: params.min_samples_leaf,
        n_try: params.max_features.resolve(x.n_cols()),
        mode,
    };
    let trees = (0..params.n_trees)
        .map(|k| {
            let mut rng = params.seed.child(k as u64).rng();
            let sample: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            builder.build(sample, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        mode,
        n_features: x.n_cols(),
        trees,
    })
}

struct TreeBuilder<'a> {
    x: &'a Covariates,
    t: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    n_try: usize,
    mode: ForestMode,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl TreeBuilder<'_> {
    fn build<R: Rng>(&self, sample: Vec<usize>, rng: &mut R) -> Tree {
        let mut tree = Tree {
            nodes: Vec::new(),
            depth: 0,
        };
        let mut scratch = Vec::with_capacity(sample.len());
        self.grow(&mut tree, sample, 0, rng, &mut scratch);
        tree
    }

    fn impurity(&self, sum: f64, sum_sq: f64, n: f64) -> f64 {
        match self.mode {
            // Within-node sum of squared deviations.
            ForestMode::Regression => (sum_sq - sum * sum / n).max(0.0),
            // n * Gini for binary labels: n * 2p(1-p).
            ForestMode::Probability => 2.0 * sum * (n - sum) / n,
        }
    }

    fn grow<R: Rng>(
        &self,
        tree: &mut Tree,
        idx: Vec<usize>,
        depth: usize,
        rng: &mut R,
        scratch: &mut Vec<(f64, f64)>,
    ) -> usize {
        let id = tree.nodes.len();
        let m = idx.len() as f64;
        let sum: f64 = idx.iter().map(|&i| self.t[i]).sum();
        let sum_sq: f64 = idx.iter().map(|&i| self.t[i] * self.t[i]).sum();
        tree.nodes.push(Node::Leaf(sum / m));
        tree.depth = tree.depth.max(depth);

        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return id;
        }
        let parent = self.impurity(sum, sum_sq, m);
        if parent <= 1e-12 * (sum_sq.abs() + 1.0) {
            return id;
        }
        let Some(best) = self.best_split(&idx, parent, rng, scratch) else {
            return id;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.x.get(i, best.feature) <= best.threshold);
        drop(idx);
        let left = self.grow(tree, left_idx, depth + 1, rng, scratch);
        let right = self.grow(tree, right_idx, depth + 1, rng, scratch);
        tree.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    fn sample_features<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let d = self.x.n_cols();
        let mut feats: Vec<usize> = (0..d).collect();
        if self.n_try < d {
            for k in 0..self.n_try {
                let j = rng.random_range(k..d);
                feats.swap(k, j);
            }
            feats.truncate(self.n_try);
            feats.sort_unstable();
        }
        feats
    }

    fn best_split<R: Rng>(
        &self,
        idx: &[usize],
        parent: f64,
        rng: &mut R,
        scratch: &mut Vec<(f64, f64)>,
    ) -> Option<SplitChoice> {
        let n = idx.len();
        let min_gain = 1e-12 * parent.max(1e-300);
        let mut best: Option<SplitChoice> = None;
        for feature in self.sample_features(rng) {
            let col = self.x.col(feature);
            scratch.clear();
            scratch.extend(idx.iter().map(|&i| (col[i], self.t[i])));
            scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total_sum: f64 = scratch.iter().map(|p| p.1).sum();
            let total_sq: f64 = scratch.iter().map(|p| p.1 * p.1).sum();
            let mut left_sum = 0.0;
            let mut left_sq = 0.0;
            for k in 0..n - 1 {
                let (v, y) = scratch[k];
                left_sum += y;
                left_sq += y * y;
                let next = scratch[k + 1].0;
                if next <= v {
                    continue;
                }
                let n_left = k + 1;
                let n_right = n - n_left;
                if n_left < self.min_leaf {
                    continue;
                }
                if n_right < self.min_leaf {
                    break;
                }
                let child = self.impurity(left_sum, left_sq, n_left as f64)
                    + self.impurity(total_sum - left_sum, total_sq - left_sq, n_right as f64);
                let gain = parent - child;
                let better = match &best {
                    None => gain > min_gain,
                    Some(b) => gain > b.gain + min_gain,
                };
                if better {
                    best = Some(SplitChoice {
                        feature,
                        threshold: 0.5 * (v + next),
                        gain,
                    });
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn single_tree(depth: usize, leaf: usize) -> ForestParams {
        ForestParams {
            n_trees: 1,
            max_depth: depth,
            min_samples_leaf: leaf,
            max_features: MaxFeatures::All,
            bootstrap: false,
            seed: RngStream::new(1, 0),
        }
    }

    fn uniform_1d(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed, 0).rng();
        (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    #[test]
    fn constant_target_predicts_constant() {
        let xs = uniform_1d(100, 3);
        let x = Covariates::from_columns(vec![xs]).unwrap();
        let t = vec![3.0; 100];
        let f = fit_forest(
            &x,
            &t,
            &ForestParams::outcome(RngStream::new(0, 0)),
            ForestMode::Regression,
        )
        .unwrap();
        for v in [-5.0, 0.0, 2.5, 10.0] {
            assert_eq!(f.predict(&[v]), 3.0);
        }
        assert!(f.trees().iter().all(|t| t.n_leaves() == 1));
    }

    /// Exhaustive single-split oracle: best Gini threshold over all midpoints.
    fn stump_oracle(xs: &[f64], t: &[f64]) -> (f64, f64, f64) {
        let mut pts: Vec<(f64, f64)> = xs.iter().copied().zip(t.iter().copied()).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let gini = |s: &[(f64, f64)]| {
            let n = s.len() as f64;
            let p = s.iter().map(|q| q.1).sum::<f64>() / n;
            n * 2.0 * p * (1.0 - p)
        };
        let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
        for k in 1..pts.len() {
            if pts[k].0 == pts[k - 1].0 {
                continue;
            }
            let (l, r) = pts.split_at(k);
            let imp = gini(l) + gini(r);
            if imp < best.0 {
                let pl = l.iter().map(|q| q.1).sum::<f64>() / l.len() as f64;
                let pr = r.iter().map(|q| q.1).sum::<f64>() / r.len() as f64;
                best = (imp, 0.5 * (pts[k - 1].0 + pts[k].0), pl, pr);
            }
        }
        (best.1, best.2, best.3)
    }

    #[test]
    fn depth_one_stump_matches_exhaustive_oracle() {
        let xs = uniform_1d(200, 11);
        let t: Vec<f64> = xs
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let x = Covariates::from_columns(vec![xs.clone()]).unwrap();
        let f = fit_forest(&x, &t, &single_tree(1, 1), ForestMode::Probability).unwrap();
        let (thr, pl, pr) = stump_oracle(&xs, &t);
        assert_eq!(f.predict(&[thr - 1e-9]), pl);
        assert_eq!(f.predict(&[thr + 1e-9]), pr);
        assert!(f.predict(&[2.0]) >= 0.9);
        assert!(f.predict(&[-2.0]) <= 0.1);
    }

    #[test]
    fn probability_predictions_in_unit_interval() {
        let mut rng = RngStream::new(5, 1).rng();
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let t: Vec<f64> = rows
            .iter()
            .map(|r| if rng.random::<f64>() < r[0] { 1.0 } else { 0.0 })
            .collect();
        let x = Covariates::from_rows(&rows).unwrap();
        let f = fit_forest(
            &x,
            &t,
            &ForestParams::compliance(RngStream::new(2, 2)).with_min_leaf(5),
            ForestMode::Probability,
        )
        .unwrap();
        for r in &rows {
            let p = f.predict(r);
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn respects_depth_and_leaf_constraints() {
        let xs = uniform_1d(500, 7);
        let t: Vec<f64> = xs.iter().map(|v| v.sin()).collect();
        let x = Covariates::from_columns(vec![xs]).unwrap();
        let f = fit_forest(&x, &t, &single_tree(3, 40), ForestMode::Regression).unwrap();
        let tree = &f.trees()[0];
        assert!(tree.depth() <= 3);
        assert!(tree.n_leaves() <= 8);
        assert!(fit_forest(&x, &t[..10], &single_tree(3, 40), ForestMode::Regression).is_err());
        let bad_t = vec![0.5; 500];
        assert!(fit_forest(&x, &bad_t, &single_tree(3, 40), ForestMode::Probability).is_err());
    }

    #[test]
    fn seeded_fits_are_reproducible_and_serializable() {
        let xs = uniform_1d(300, 9);
        let t: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let x = Covariates::from_columns(vec![xs]).unwrap();
        let p = ForestParams::outcome(RngStream::new(4, 4)).with_trees(10);
        let a = fit_forest(&x, &t, &p, ForestMode::Regression).unwrap();
        let b = fit_forest(&x, &t, &p, ForestMode::Regression).unwrap();
        assert_eq!(a, b);
        let back = ForestModel::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    impl ForestParams {
        fn with_min_leaf(mut self, leaf: usize) -> Self {
            self.min_samples_leaf = leaf;
            self
        }
        fn with_trees(mut self, n: usize) -> Self {
            self.n_trees = n;
            self
        }
    }

    proptest::proptest! {
        #[test]
        fn regression_stays_within_target_hull(seed in 0u64..1000, n in 20usize..120) {
            let mut rng = RngStream::new(seed, 9).rng();
            let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let x = Covariates::from_rows(&rows).unwrap();
            let p = ForestParams::outcome(RngStream::new(seed, 1)).with_trees(5).with_min_leaf(2);
            let f = fit_forest(&x, &t, &p, ForestMode::Regression).unwrap();
            let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for _ in 0..20 {
                let q = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
                let v = f.predict(&q);
                proptest::prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }
    }
}
