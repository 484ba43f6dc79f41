//! Regression forest with variance-reduction splits.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Predictor;
use crate::error::{Error, Result};
use crate::numeric;
use crate::rng::stream_rng;

const FORMAT_NAME: &str = "shapley-mortality-forest";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub tree_count: usize,
    pub max_depth: usize,
    pub min_leaf_size: usize,
    /// Features tried at each split; `None` means `ceil(n_features / 3)`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            tree_count: 300,
            max_depth: 8,
            min_leaf_size: 5,
            features_per_split: None,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    fn features_per_split_for(&self, n_features: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| n_features.div_ceil(3))
            .clamp(1, n_features)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature] < *threshold { *left } else { *right },
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    /// Features used by at least one split.
    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionForest {
    format: String,
    version: u32,
    n_features: usize,
    params: ForestParams,
    seed: u64,
    trees: Vec<RegressionTree>,
}

struct Grower<'a> {
    columns: &'a [Vec<f64>],
    targets: &'a [f64],
    params: &'a ForestParams,
    mtry: usize,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let value = numeric::mean(&rows.iter().map(|&r| self.targets[r]).collect::<Vec<_>>());
        self.nodes.push(Node::Leaf { value });
        self.nodes.len() - 1
    }

    fn grow<R: Rng>(&mut self, rows: &mut [usize], depth: usize, rng: &mut R) -> usize {
        let n = rows.len();
        let min_leaf = self.params.min_leaf_size.max(1);
        if depth >= self.params.max_depth || n < 2 * min_leaf {
            return self.leaf(rows);
        }
        let first = self.targets[rows[0]];
        if rows.iter().all(|&r| self.targets[r] == first) {
            return self.leaf(rows);
        }

        let n_features = self.columns.len();
        let candidates = sample(rng, n_features, self.mtry).into_vec();
        let total: f64 = rows.iter().map(|&r| self.targets[r]).sum();
        let parent_score = total * total / n as f64;

        // (gain, feature, threshold)
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = rows.to_vec();
        for &feature in &candidates {
            let col = &self.columns[feature];
            order.copy_from_slice(rows);
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for k in 1..n {
                left_sum += self.targets[order[k - 1]];
                if k < min_leaf || n - k < min_leaf {
                    continue;
                }
                let lo = col[order[k - 1]];
                let hi = col[order[k]];
                if lo >= hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / k as f64
                    + right_sum * right_sum / (n - k) as f64;
                let gain = score - parent_score;
                if gain > 1e-12 * parent_score.abs().max(1e-300)
                    && best.map_or(true, |(g, _, _)| gain > g)
                {
                    best = Some((gain, feature, 0.5 * (lo + hi)));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return self.leaf(rows);
        };
        let col = &self.columns[feature];
        let split_at = partition(rows, |r| col[r] < threshold);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { value: f64::NAN });
        let (left_rows, right_rows) = rows.split_at_mut(split_at);
        let left = self.grow(left_rows, depth + 1, rng);
        let right = self.grow(right_rows, depth + 1, rng);
        self.nodes[slot] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }
}

/// Stable in-place partition; returns the count of rows satisfying `pred`.
fn partition(rows: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let (mut yes, no): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| pred(r));
    let k = yes.len();
    yes.extend(no);
    rows.copy_from_slice(&yes);
    k
}

impl RegressionForest {
    /// Fits `params.tree_count` trees, each from its own seeded stream.
    pub fn fit(
        features: &[Vec<f64>],
        targets: &[f64],
        params: &ForestParams,
        seed: u64,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("cannot fit a forest to no rows".into()));
        }
        if features.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} targets",
                features.len(),
                targets.len()
            )));
        }
        if features.len() < 2 {
            return Err(Error::InvalidArgument("a forest needs at least two rows".into()));
        }
        let n_features = features[0].len();
        if n_features == 0 {
            return Err(Error::InvalidArgument("feature rows are empty".into()));
        }
        if let Some(r) = features.iter().position(|row| row.len() != n_features) {
            return Err(Error::InvalidArgument(format!(
                "row {r} has {} features, expected {n_features}",
                features[r].len()
            )));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("features must be finite".into()));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("targets must be finite".into()));
        }
        if params.tree_count == 0 {
            return Err(Error::InvalidArgument("tree_count must be positive".into()));
        }
        let columns: Vec<Vec<f64>> = (0..n_features)
            .map(|j| features.iter().map(|row| row[j]).collect())
            .collect();
        let n = targets.len();
        let mtry = params.features_per_split_for(n_features);

        let trees = (0..params.tree_count)
            .into_par_iter()
            .map(|t| {
                let mut rng = stream_rng(seed, t as u64);
                let mut rows: Vec<usize> = if params.bootstrap {
                    (0..n).map(|_| rng.gen_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let mut grower = Grower {
                    columns: &columns,
                    targets,
                    params,
                    mtry,
                    nodes: Vec::new(),
                };
                grower.grow(&mut rows, 0, &mut rng);
                RegressionTree {
                    nodes: grower.nodes,
                }
            })
            .collect();

        Ok(Self {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            n_features,
            params: params.clone(),
            seed,
            trees,
        })
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `true` when no tree splits on `feature`.
    pub fn ignores_feature(&self, feature: usize) -> bool {
        self.trees
            .iter()
            .all(|t| t.split_features().all(|f| f != feature))
    }

    /// Serializes to the versioned JSON format. Floats round-trip exactly.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let forest: RegressionForest = serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("malformed forest file: {e}")))?;
        if forest.format != FORMAT_NAME {
            return Err(Error::Data(format!("not a forest file: `{}`", forest.format)));
        }
        if forest.version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported forest format version {}",
                forest.version
            )));
        }
        Ok(forest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl Predictor for RegressionForest {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict(&self, x: &[f64]) -> f64 {
        let total: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        total / self.trees.len() as f64
    }
}

/// Shorthand for [`RegressionForest::fit`].
pub fn fit_forest(
    features: &[Vec<f64>],
    targets: &[f64],
    params: &ForestParams,
    seed: u64,
) -> Result<RegressionForest> {
    RegressionForest::fit(features, targets, params, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_data() -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..50 {
            x.push(vec![0.0]);
            y.push(1.0);
        }
        for _ in 0..50 {
            x.push(vec![1.0]);
            y.push(3.0);
        }
        (x, y)
    }

    #[test]
    fn single_split_at_midpoint() {
        let (x, y) = step_data();
        let params = ForestParams {
            tree_count: 1,
            max_depth: 1,
            bootstrap: false,
            ..Default::default()
        };
        let f = fit_forest(&x, &y, &params, 1).unwrap();
        assert_eq!(f.predict(&[0.0]), 1.0);
        assert_eq!(f.predict(&[0.4999]), 1.0);
        assert_eq!(f.predict(&[0.5]), 3.0);
        assert_eq!(f.predict(&[1.0]), 3.0);
        assert_eq!(
            f.trees()[0].nodes[0],
            Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2 }
        );
    }

    #[test]
    fn constant_targets_predict_constant() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let y = vec![2.5; 40];
        let f = fit_forest(&x, &y, &ForestParams { tree_count: 10, ..Default::default() }, 3).unwrap();
        for row in &x {
            assert_eq!(f.predict(row), 2.5);
        }
        assert_eq!(f.predict(&[-100.0, 100.0]), 2.5);
    }

    #[test]
    fn constant_features_give_single_leaves() {
        let x = vec![vec![1.0, 1.0]; 30];
        let y: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let f = fit_forest(&x, &y, &ForestParams { tree_count: 5, ..Default::default() }, 3).unwrap();
        assert!(f.trees().iter().all(|t| t.node_count() == 1));
    }

    #[test]
    fn leaves_respect_min_size_without_bootstrap() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] * 2.0 + r[1]).collect();
        let params = ForestParams {
            tree_count: 4,
            max_depth: 12,
            min_leaf_size: 7,
            bootstrap: false,
            features_per_split: Some(2),
        };
        let f = fit_forest(&x, &y, &params, 11).unwrap();
        for tree in f.trees() {
            let mut counts = std::collections::HashMap::new();
            for row in &x {
                // identify the leaf by walking the tree
                let mut at = 0;
                while let Node::Split { feature, threshold, left, right } = &tree.nodes[at] {
                    at = if row[*feature] < *threshold { *left } else { *right };
                }
                *counts.entry(at).or_insert(0usize) += 1;
            }
            assert!(counts.values().all(|&c| c >= 7), "{counts:?}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = ForestParams::default();
        assert!(fit_forest(&[], &[], &p, 0).is_err());
        assert!(fit_forest(&[vec![1.0]], &[1.0], &p, 0).is_err());
        assert!(fit_forest(&[vec![1.0], vec![2.0]], &[1.0], &p, 0).is_err());
        assert!(fit_forest(&[vec![1.0], vec![2.0, 3.0]], &[1.0, 2.0], &p, 0).is_err());
        assert!(fit_forest(&[vec![1.0], vec![f64::NAN]], &[1.0, 2.0], &p, 0).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let x: Vec<Vec<f64>> = (0..60).map(|i| vec![(i as f64 * 0.37).sin(), i as f64 / 7.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0].exp() + r[1].sqrt()).collect();
        let f = fit_forest(&x, &y, &ForestParams { tree_count: 8, ..Default::default() }, 5).unwrap();
        let back = RegressionForest::from_json(&f.to_json()).unwrap();
        assert_eq!(back, f);
        assert!(RegressionForest::from_json("{}").is_err());
    }

    #[test]
    fn forest_fit_is_reproducible() {
        let x: Vec<Vec<f64>> = (0..80).map(|i| vec![(i as f64).sqrt(), (i % 9) as f64, (i % 4) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] - r[1] * 0.5 + r[2]).collect();
        let p = ForestParams { tree_count: 20, ..Default::default() };
        let a = fit_forest(&x, &y, &p, 99).unwrap();
        let b = fit_forest(&x, &y, &p, 99).unwrap();
        assert_eq!(a, b);
        let c = fit_forest(&x, &y, &p, 100).unwrap();
        assert_ne!(a, c);
    }
}
