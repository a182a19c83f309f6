//! Gradient-boosted regression trees with a second-order binary-logistic
//! objective, used as the learning-to-rank model over center-node features.
//! Splits are exact greedy over sorted feature values; each tree sees a
//! seeded random subset of ceil(colsample_bytree * d) features.

use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

pub const RANKER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RankerError {
    #[error("training set needs both classes; class {0} is empty")]
    EmptyClass(u8),
    #[error("training set too small: {0} rows")]
    TooFewRows(usize),
    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("labels must be 0/1, found {0}")]
    BadLabel(u8),
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("unsupported ranker file version {0}")]
    UnsupportedVersion(u32),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbdtParams {
    pub learning_rate: f64,
    pub colsample_bytree: f64,
    pub max_depth: usize,
    pub num_rounds: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            colsample_bytree: 0.3,
            max_depth: 5,
            num_rounds: 100,
            lambda: 1.0,
            gamma: 0.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { weight } => return *weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn leaf_weights(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Leaf { weight } => Some(*weight),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbdtModel {
    pub version: u32,
    pub params: GbdtParams,
    pub num_features: usize,
    /// Log-odds prior of the positive rate of the training set.
    pub base_score: f64,
    pub trees: Vec<RegressionTree>,
    /// Training logistic loss before any tree, then after each round.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RankTrainSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

/// Resamples each class with replacement to exactly `target_per_class` rows.
/// Output order is all class-0 rows then all class-1 rows.
pub fn balance_trainset(
    features: &[Vec<f64>],
    labels: &[u8],
    target_per_class: usize,
    seed: u64,
) -> Result<RankTrainSet, RankerError> {
    if target_per_class == 0 {
        return Err(RankerError::BadParam(
            "target_per_class must be >= 1".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(RankerError::BadLabel(bad));
    }
    let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    if negatives.is_empty() {
        return Err(RankerError::EmptyClass(0));
    }
    if positives.is_empty() {
        return Err(RankerError::EmptyClass(1));
    }
    let mut rng = SplitMix64::new(seed);
    let mut out_features = Vec::with_capacity(2 * target_per_class);
    let mut out_labels = Vec::with_capacity(2 * target_per_class);
    for (class, pool) in [(0u8, &negatives), (1u8, &positives)] {
        for _ in 0..target_per_class {
            let idx = pool[rng.next_below(pool.len())];
            out_features.push(features[idx].clone());
            out_labels.push(class);
        }
    }
    Ok(RankTrainSet {
        features: out_features,
        labels: out_labels,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logistic_loss(margins: &[f64], labels: &[u8]) -> f64 {
    let mut loss = 0.0;
    for (&m, &y) in margins.iter().zip(labels) {
        let p = sigmoid(m).clamp(1e-15, 1.0 - 1e-15);
        loss -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    loss / margins.len() as f64
}

struct TreeBuilder<'a> {
    features: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    columns: &'a [usize],
    max_depth: usize,
    lambda: f64,
    gamma: f64,
    nodes: Vec<TreeNode>,
}

impl<'a> TreeBuilder<'a> {
    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        let leaf = TreeNode::Leaf {
            weight: -g / (h + self.lambda),
        };
        if depth >= self.max_depth || rows.len() < 2 {
            self.nodes.push(leaf);
            return self.nodes.len() - 1;
        }
        let parent_score = g * g / (h + self.lambda);
        let mut best: Option<(f64, usize, f64)> = None; // (gain, feature, threshold)
        for &f in self.columns {
            let mut sorted: Vec<usize> = rows.to_vec();
            sorted.sort_by(|&a, &b| self.features[a][f].total_cmp(&self.features[b][f]));
            let mut gl = 0.0;
            let mut hl = 0.0;
            for w in 0..sorted.len() - 1 {
                let r = sorted[w];
                gl += self.grad[r];
                hl += self.hess[r];
                let v = self.features[r][f];
                let v_next = self.features[sorted[w + 1]][f];
                if v == v_next {
                    continue; // split only between distinct values
                }
                let gr = g - gl;
                let hr = h - hl;
                let gain = 0.5
                    * (gl * gl / (hl + self.lambda) + gr * gr / (hr + self.lambda) - parent_score)
                    - self.gamma;
                if gain > 0.0 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, 0.5 * (v + v_next)));
                }
            }
        }
        match best {
            None => {
                self.nodes.push(leaf);
                self.nodes.len() - 1
            }
            Some((_, feature, threshold)) => {
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
                    .iter()
                    .partition(|&&r| self.features[r][feature] <= threshold);
                let node_idx = self.nodes.len();
                self.nodes.push(TreeNode::Leaf { weight: 0.0 }); // placeholder
                let left = self.grow(&left_rows, depth + 1);
                let right = self.grow(&right_rows, depth + 1);
                self.nodes[node_idx] = TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
                node_idx
            }
        }
    }
}

pub fn fit(trainset: &RankTrainSet, params: &GbdtParams) -> Result<GbdtModel, RankerError> {
    let n = trainset.features.len();
    if n < 2 {
        return Err(RankerError::TooFewRows(n));
    }
    if trainset.labels.len() != n {
        return Err(RankerError::BadParam(format!(
            "{} labels for {n} rows",
            trainset.labels.len()
        )));
    }
    if let Some(&bad) = trainset.labels.iter().find(|&&l| l > 1) {
        return Err(RankerError::BadLabel(bad));
    }
    let positives = trainset.labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(RankerError::EmptyClass(1));
    }
    if positives == n {
        return Err(RankerError::EmptyClass(0));
    }
    if !(params.colsample_bytree > 0.0 && params.colsample_bytree <= 1.0) {
        return Err(RankerError::BadParam(
            "colsample_bytree must be in (0, 1]".into(),
        ));
    }
    if params.learning_rate <= 0.0 {
        return Err(RankerError::BadParam("learning_rate must be > 0".into()));
    }
    let d = trainset.features[0].len();
    if trainset.features.iter().any(|row| row.len() != d) {
        return Err(RankerError::BadParam("ragged feature matrix".into()));
    }

    let rate = positives as f64 / n as f64;
    let base_score = (rate / (1.0 - rate)).ln();
    let mut margins = vec![base_score; n];
    let mut loss_history = vec![logistic_loss(&margins, &trainset.labels)];

    let cols_per_tree = ((params.colsample_bytree * d as f64).ceil() as usize).clamp(1, d.max(1));
    let mut rng = SplitMix64::new(params.seed);
    let all_rows: Vec<usize> = (0..n).collect();
    let mut trees = Vec::with_capacity(params.num_rounds);

    for _ in 0..params.num_rounds {
        let grad: Vec<f64> = margins
            .iter()
            .zip(&trainset.labels)
            .map(|(&m, &y)| sigmoid(m) - y as f64)
            .collect();
        let hess: Vec<f64> = margins
            .iter()
            .map(|&m| {
                let p = sigmoid(m);
                p * (1.0 - p)
            })
            .collect();
        let columns = if d == 0 {
            Vec::new()
        } else {
            rng.sample_indices(d, cols_per_tree)
        };
        let mut builder = TreeBuilder {
            features: &trainset.features,
            grad: &grad,
            hess: &hess,
            columns: &columns,
            max_depth: params.max_depth,
            lambda: params.lambda,
            gamma: params.gamma,
            nodes: Vec::new(),
        };
        builder.grow(&all_rows, 0);
        let tree = RegressionTree {
            nodes: builder.nodes,
        };
        for (margin, row) in margins.iter_mut().zip(&trainset.features) {
            *margin += params.learning_rate * tree.predict(row);
        }
        trees.push(tree);
        loss_history.push(logistic_loss(&margins, &trainset.labels));
    }

    Ok(GbdtModel {
        version: RANKER_VERSION,
        params: params.clone(),
        num_features: d,
        base_score,
        trees,
        loss_history,
    })
}

/// Probability of label 1 per row: sigmoid(base + lr * sum of tree outputs).
pub fn score(model: &GbdtModel, features: &[Vec<f64>]) -> Result<Vec<f64>, RankerError> {
    let mut out = Vec::with_capacity(features.len());
    for row in features {
        if row.len() != model.num_features {
            return Err(RankerError::DimensionMismatch {
                expected: model.num_features,
                got: row.len(),
            });
        }
        let margin: f64 = model.base_score
            + model.params.learning_rate * model.trees.iter().map(|t| t.predict(row)).sum::<f64>();
        out.push(sigmoid(margin));
    }
    Ok(out)
}

/// Indices sorted by score descending; ties broken by ascending index.
pub fn prioritize(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn save_ranker(model: &GbdtModel, path: impl AsRef<Path>) -> Result<(), RankerError> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(w, model)?;
    Ok(())
}

pub fn load_ranker(path: impl AsRef<Path>) -> Result<GbdtModel, RankerError> {
    let r = BufReader::new(File::open(path)?);
    let model: GbdtModel = serde_json::from_reader(r)?;
    if model.version != RANKER_VERSION {
        return Err(RankerError::UnsupportedVersion(model.version));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable_1d(n: usize) -> RankTrainSet {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let x = (i as f64 / n as f64) * 2.0 - 1.0 + 0.001; // avoid exact 0
            features.push(vec![x]);
            labels.push((x > 0.0) as u8);
        }
        RankTrainSet { features, labels }
    }

    fn training_auc(model: &GbdtModel, set: &RankTrainSet) -> f64 {
        let scores = score(model, &set.features).unwrap();
        let mut pairs = 0.0;
        let mut wins = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if set.labels[i] == 1 && set.labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn separable_reaches_perfect_auc_quickly() {
        let set = separable_1d(200);
        let params = GbdtParams {
            num_rounds: 10,
            colsample_bytree: 1.0,
            ..Default::default()
        };
        let model = fit(&set, &params).unwrap();
        assert_eq!(training_auc(&model, &set), 1.0);
    }

    #[test]
    fn loss_non_increasing_per_round() {
        let set = separable_1d(100);
        let model = fit(&set, &GbdtParams::default()).unwrap();
        for w in model.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn constant_features_predict_base_rate() {
        let set = RankTrainSet {
            features: vec![vec![1.0, 1.0]; 20],
            labels: (0..20).map(|i| (i % 2) as u8).collect(),
        };
        let model = fit(&set, &GbdtParams::default()).unwrap();
        for tree in &model.trees {
            assert_eq!(tree.nodes.len(), 1, "constant features must not split");
        }
        let scores = score(&model, &set.features).unwrap();
        for s in scores {
            assert!((s - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_bit_identical_model() {
        let set = separable_1d(50);
        let params = GbdtParams {
            num_rounds: 20,
            ..Default::default()
        };
        let a = serde_json::to_string(&fit(&set, &params).unwrap()).unwrap();
        let b = serde_json::to_string(&fit(&set, &params).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn huge_lambda_pins_predictions_at_base() {
        let set = separable_1d(100);
        let params = GbdtParams {
            lambda: 1e9,
            ..Default::default()
        };
        let model = fit(&set, &params).unwrap();
        for tree in &model.trees {
            for w in tree.leaf_weights() {
                assert!(w.abs() < 1e-6, "leaf weight {w} not crushed by lambda");
            }
        }
        let base_p = sigmoid(model.base_score);
        for s in score(&model, &set.features).unwrap() {
            assert!((s - base_p).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_tree_list_scores_base_probability() {
        let set = separable_1d(10);
        let params = GbdtParams {
            num_rounds: 0,
            ..Default::default()
        };
        let model = fit(&set, &params).unwrap();
        let scores = score(&model, &set.features).unwrap();
        let expected = sigmoid(model.base_score);
        for s in scores {
            assert_eq!(s, expected);
        }
    }

    #[test]
    fn final_loss_matches_recomputed_log_loss() {
        let set = separable_1d(80);
        let params = GbdtParams {
            num_rounds: 15,
            ..Default::default()
        };
        let model = fit(&set, &params).unwrap();
        let scores = score(&model, &set.features).unwrap();
        let mut loss = 0.0;
        for (s, &y) in scores.iter().zip(&set.labels) {
            let p = s.clamp(1e-15, 1.0 - 1e-15);
            loss -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
        }
        loss /= scores.len() as f64;
        let recorded = *model.loss_history.last().unwrap();
        assert!((loss - recorded).abs() < 1e-9);
    }

    #[test]
    fn monotone_tree_preserves_order() {
        let set = separable_1d(100);
        let params = GbdtParams {
            num_rounds: 5,
            colsample_bytree: 1.0,
            ..Default::default()
        };
        let model = fit(&set, &params).unwrap();
        let probe: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 25.0 - 1.0]).collect();
        let scores = score(&model, &probe).unwrap();
        for w in scores.windows(2) {
            assert!(w[1] >= w[0], "higher feature value scored lower");
        }
    }

    #[test]
    fn permutation_of_rows_leaves_predictions_unchanged() {
        let set = separable_1d(60);
        let mut permuted = set.clone();
        let mut rng = SplitMix64::new(5);
        let mut order: Vec<usize> = (0..60).collect();
        rng.shuffle(&mut order);
        permuted.features = order.iter().map(|&i| set.features[i].clone()).collect();
        permuted.labels = order.iter().map(|&i| set.labels[i]).collect();
        let params = GbdtParams {
            num_rounds: 10,
            ..Default::default()
        };
        let a = fit(&set, &params).unwrap();
        let b = fit(&permuted, &params).unwrap();
        let probe: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 20.0 - 1.0]).collect();
        let sa = score(&a, &probe).unwrap();
        let sb = score(&b, &probe).unwrap();
        for (x, y) in sa.iter().zip(&sb) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn prioritize_orders_descending_with_stable_ties() {
        assert_eq!(prioritize(&[0.1, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(prioritize(&[0.5, 0.5, 0.5]), vec![0, 1, 2]);
        assert_eq!(prioritize(&[0.9, 0.5, 0.1]), vec![0, 1, 2]);
        assert_eq!(prioritize(&[0.1, 0.5, 0.9]), vec![2, 1, 0]);
    }

    #[test]
    fn prioritize_is_a_permutation() {
        let mut rng = SplitMix64::new(1);
        let scores: Vec<f64> = (0..100).map(|_| rng.next_f64()).collect();
        let mut order = prioritize(&scores);
        order.sort_unstable();
        assert_eq!(order, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn balance_resamples_to_target() {
        let features: Vec<Vec<f64>> = (0..1000).map(|i| vec![i as f64]).collect();
        let mut labels = vec![0u8; 1000];
        for l in labels.iter_mut().take(1000).skip(990) {
            *l = 1;
        }
        let balanced = balance_trainset(&features, &labels, 1000, 7).unwrap();
        assert_eq!(balanced.labels.iter().filter(|&&l| l == 0).count(), 1000);
        assert_eq!(balanced.labels.iter().filter(|&&l| l == 1).count(), 1000);
        // positives come from the 10-row pool, so repeats are forced
        let positive_rows: Vec<&Vec<f64>> = balanced
            .features
            .iter()
            .zip(&balanced.labels)
            .filter(|(_, &l)| l == 1)
            .map(|(f, _)| f)
            .collect();
        assert!(positive_rows.iter().all(|r| r[0] >= 990.0));
    }

    #[test]
    fn balance_missing_class_rejected() {
        let features = vec![vec![0.0]; 5];
        let labels = vec![0u8; 5];
        assert!(matches!(
            balance_trainset(&features, &labels, 10, 1),
            Err(RankerError::EmptyClass(1))
        ));
    }

    #[test]
    fn balance_deterministic() {
        let features: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64]).collect();
        let labels: Vec<u8> = (0..50).map(|i| (i % 3 == 0) as u8).collect();
        let a = balance_trainset(&features, &labels, 30, 9).unwrap();
        let b = balance_trainset(&features, &labels, 30, 9).unwrap();
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let set = separable_1d(20);
        let model = fit(&set, &GbdtParams::default()).unwrap();
        assert!(matches!(
            score(&model, &[vec![1.0, 2.0]]),
            Err(RankerError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ranker_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let set = separable_1d(30);
        let model = fit(&set, &GbdtParams::default()).unwrap();
        save_ranker(&model, &path).unwrap();
        let back = load_ranker(&path).unwrap();
        let probe = vec![vec![0.3], vec![-0.7]];
        assert_eq!(
            score(&model, &probe).unwrap(),
            score(&back, &probe).unwrap()
        );
    }
}
