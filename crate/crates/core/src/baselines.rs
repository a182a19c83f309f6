//! Reference prioritization methods: DeepGini (Gini impurity of the softmax
//! output), MCP (boundary-region round-robin), DSA (distance-based surprise
//! adequacy) and the Act feature vector (confidence ++ last hidden layer).
//! MCP and DSA follow the standard published definitions of those methods.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ranker::prioritize;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("probability row {row} sums to {sum}, expected 1 ± 1e-5")]
    MalformedProbs { row: usize, sum: f64 },
    #[error("need at least {needed} classes, got {got}")]
    TooFewClasses { needed: usize, got: usize },
    #[error("embedding dimension mismatch: store has {store}, case has {case}")]
    DimensionMismatch { store: usize, case: usize },
    #[error("predicted class {0} absent from the embedding store")]
    ClassAbsent(u32),
    #[error("embedding store is empty")]
    EmptyStore,
}

fn check_prob_rows(probs: &[Vec<f64>]) -> Result<(), BaselineError> {
    for (row, p) in probs.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(BaselineError::MalformedProbs { row, sum });
        }
    }
    Ok(())
}

/// DeepGini: score = 1 - sum(p^2). Higher means less confident, ranked first.
pub fn deepgini_scores(probs: &[Vec<f64>]) -> Result<Vec<f64>, BaselineError> {
    check_prob_rows(probs)?;
    Ok(probs
        .iter()
        .map(|p| 1.0 - p.iter().map(|v| v * v).sum::<f64>())
        .collect())
}

/// MCP: each case joins the boundary cluster (top1 class, top2 class) with
/// priority ratio p_top2/p_top1; selection round-robins over clusters in
/// ascending (top1, top2) order, taking each cluster's best remaining case.
pub fn mcp_prioritize(probs: &[Vec<f64>]) -> Result<Vec<usize>, BaselineError> {
    check_prob_rows(probs)?;
    if let Some(p) = probs.first() {
        if p.len() < 2 {
            return Err(BaselineError::TooFewClasses {
                needed: 2,
                got: p.len(),
            });
        }
    }
    let mut clusters: BTreeMap<(usize, usize), Vec<(f64, usize)>> = BTreeMap::new();
    for (idx, p) in probs.iter().enumerate() {
        let (top1, top2) = top_two(p);
        let ratio = if p[top1] > 0.0 {
            p[top2] / p[top1]
        } else {
            1.0
        };
        clusters.entry((top1, top2)).or_default().push((ratio, idx));
    }
    // highest ratio last so pop() takes it first; ties by ascending index
    for cases in clusters.values_mut() {
        cases.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    }
    let mut order = Vec::with_capacity(probs.len());
    while order.len() < probs.len() {
        for cases in clusters.values_mut() {
            if let Some((_, idx)) = cases.pop() {
                order.push(idx);
            }
        }
    }
    Ok(order)
}

/// Indices of the largest and second-largest entries, ties to lower index.
fn top_two(p: &[f64]) -> (usize, usize) {
    let mut top1 = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[top1] {
            top1 = i;
        }
    }
    let mut top2 = usize::MAX;
    for (i, &v) in p.iter().enumerate() {
        if i == top1 {
            continue;
        }
        if top2 == usize::MAX || v > p[top2] {
            top2 = i;
        }
    }
    (top1, top2)
}

/// Last-hidden-layer embeddings of the training data, keyed by class.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

impl EmbeddingStore {
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<u32>) -> Result<Self, BaselineError> {
        if embeddings.is_empty() {
            return Err(BaselineError::EmptyStore);
        }
        let mut classes: Vec<u32> = labels.clone();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(BaselineError::TooFewClasses {
                needed: 2,
                got: classes.len(),
            });
        }
        Ok(Self { embeddings, labels })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// DSA: for a test embedding e predicted as class c, x_a is the nearest
/// same-class train embedding and x_b the nearest other-class embedding to
/// x_a; score = |e - x_a| / |x_a - x_b|. A zero denominator scores +inf.
pub fn dsa_scores(
    test_embeddings: &[Vec<f64>],
    predicted_classes: &[u32],
    store: &EmbeddingStore,
) -> Result<Vec<f64>, BaselineError> {
    let dim = store.embeddings[0].len();
    let mut scores = Vec::with_capacity(test_embeddings.len());
    for (e, &class) in test_embeddings.iter().zip(predicted_classes) {
        if e.len() != dim {
            return Err(BaselineError::DimensionMismatch {
                store: dim,
                case: e.len(),
            });
        }
        let mut best_a: Option<(f64, usize)> = None;
        for (i, (emb, &label)) in store.embeddings.iter().zip(&store.labels).enumerate() {
            if label != class {
                continue;
            }
            let d = sq_dist(e, emb);
            if best_a.is_none_or(|(bd, _)| d < bd) {
                best_a = Some((d, i));
            }
        }
        let (dist_a_sq, a_idx) = best_a.ok_or(BaselineError::ClassAbsent(class))?;
        let x_a = &store.embeddings[a_idx];
        let mut dist_b_sq = f64::INFINITY;
        for (emb, &label) in store.embeddings.iter().zip(&store.labels) {
            if label == class {
                continue;
            }
            let d = sq_dist(x_a, emb);
            if d < dist_b_sq {
                dist_b_sq = d;
            }
        }
        let dist_a = dist_a_sq.sqrt();
        let dist_b = dist_b_sq.sqrt();
        scores.push(if dist_b == 0.0 {
            f64::INFINITY
        } else {
            dist_a / dist_b
        });
    }
    Ok(scores)
}

/// Act baseline feature: softmax confidence concatenated with the last
/// hidden layer's activations.
pub fn act_features(probs: &[f64], last_hidden: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(probs.len() + last_hidden.len());
    out.extend_from_slice(probs);
    out.extend_from_slice(last_hidden);
    out
}

/// Ranks by DSA score descending with the shared tie rule.
pub fn dsa_prioritize(
    test_embeddings: &[Vec<f64>],
    predicted_classes: &[u32],
    store: &EmbeddingStore,
) -> Result<Vec<usize>, BaselineError> {
    Ok(prioritize(&dsa_scores(
        test_embeddings,
        predicted_classes,
        store,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deepgini_known_values() {
        let probs = vec![vec![1.0, 0.0, 0.0], vec![0.1; 10], vec![0.5, 0.5]];
        let scores = deepgini_scores(&probs).unwrap();
        assert!((scores[0] - 0.0).abs() < 1e-12);
        assert!((scores[1] - 0.9).abs() < 1e-12);
        assert!((scores[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn deepgini_bounds_and_maximum_at_uniform() {
        let c = 4;
        let uniform = vec![1.0 / c as f64; c];
        let skewed = vec![0.7, 0.1, 0.1, 0.1];
        let scores = deepgini_scores(&[uniform, skewed]).unwrap();
        let max = 1.0 - 1.0 / c as f64;
        assert!((scores[0] - max).abs() < 1e-12);
        assert!(scores[1] < scores[0]);
        assert!(scores.iter().all(|&s| (0.0..=max + 1e-12).contains(&s)));
    }

    #[test]
    fn deepgini_rejects_malformed_rows() {
        assert!(matches!(
            deepgini_scores(&[vec![0.9, 0.3]]),
            Err(BaselineError::MalformedProbs { .. })
        ));
    }

    #[test]
    fn mcp_single_case() {
        let order = mcp_prioritize(&[vec![0.6, 0.4]]).unwrap();
        assert_eq!(order, vec![0]);
    }

    #[test]
    fn mcp_alternates_between_clusters() {
        // two clusters with two cases each
        let probs = vec![
            vec![0.6, 0.4, 0.0],   // cluster (0,1), ratio 0.667
            vec![0.9, 0.1, 0.0],   // cluster (0,1), ratio 0.111
            vec![0.0, 0.55, 0.45], // cluster (1,2), ratio 0.818
            vec![0.0, 0.8, 0.2],   // cluster (1,2), ratio 0.25
        ];
        let order = mcp_prioritize(&probs).unwrap();
        assert_eq!(order, vec![0, 2, 1, 3]);
    }

    #[test]
    fn mcp_takes_highest_ratio_within_cluster_first() {
        let probs = vec![
            vec![0.65, 0.35], // ratio 0.538
            vec![0.52, 0.48], // ratio 0.923
        ];
        let order = mcp_prioritize(&probs).unwrap();
        assert_eq!(order, vec![1, 0]);
    }

    #[test]
    fn mcp_output_is_permutation() {
        let probs: Vec<Vec<f64>> = (0..37)
            .map(|i| {
                let a = 0.3 + 0.4 * ((i % 7) as f64 / 7.0);
                vec![a, 1.0 - a]
            })
            .collect();
        let mut order = mcp_prioritize(&probs).unwrap();
        order.sort_unstable();
        assert_eq!(order, (0..37).collect::<Vec<_>>());
    }

    fn fixture_store() -> EmbeddingStore {
        EmbeddingStore::new(
            vec![vec![1.0, 0.0], vec![3.0, 0.0], vec![10.0, 10.0]],
            vec![0, 1, 0],
        )
        .unwrap()
    }

    #[test]
    fn dsa_zero_when_on_train_point() {
        let store = fixture_store();
        let scores = dsa_scores(&[vec![1.0, 0.0]], &[0], &store).unwrap();
        assert_eq!(scores[0], 0.0);
    }

    #[test]
    fn dsa_fixture_ratio() {
        // e=(0,0) class 0: x_a=(1,0); nearest other-class to x_a is (3,0);
        // score = 1 / 2 = 0.5 (brute-force scan over the fixture store)
        let store = fixture_store();
        let scores = dsa_scores(&[vec![0.0, 0.0]], &[0], &store).unwrap();
        assert!((scores[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dsa_scale_invariant() {
        let store = fixture_store();
        let doubled = EmbeddingStore::new(
            store
                .embeddings
                .iter()
                .map(|e| e.iter().map(|v| v * 2.0).collect())
                .collect(),
            store.labels.clone(),
        )
        .unwrap();
        let a = dsa_scores(&[vec![0.3, -0.4]], &[0], &store).unwrap();
        let b = dsa_scores(&[vec![0.6, -0.8]], &[0], &doubled).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-9);
    }

    #[test]
    fn dsa_translation_invariant() {
        let store = fixture_store();
        let shifted = EmbeddingStore::new(
            store
                .embeddings
                .iter()
                .map(|e| vec![e[0] + 5.5, e[1] - 2.0])
                .collect(),
            store.labels.clone(),
        )
        .unwrap();
        let a = dsa_scores(&[vec![0.3, -0.4]], &[0], &store).unwrap();
        let b = dsa_scores(&[vec![5.8, -2.4]], &[0], &shifted).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-9);
    }

    #[test]
    fn dsa_rotation_invariant() {
        let theta: f64 = 0.7;
        let rot = |v: &[f64]| {
            vec![
                v[0] * theta.cos() - v[1] * theta.sin(),
                v[0] * theta.sin() + v[1] * theta.cos(),
            ]
        };
        let store = fixture_store();
        let rotated = EmbeddingStore::new(
            store.embeddings.iter().map(|e| rot(e)).collect(),
            store.labels.clone(),
        )
        .unwrap();
        let e = vec![0.3, -0.4];
        let a = dsa_scores(std::slice::from_ref(&e), &[0], &store).unwrap();
        let b = dsa_scores(&[rot(&e)], &[0], &rotated).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-9);
    }

    #[test]
    fn dsa_missing_class_rejected() {
        let store = fixture_store();
        assert!(matches!(
            dsa_scores(&[vec![0.0, 0.0]], &[9], &store),
            Err(BaselineError::ClassAbsent(9))
        ));
    }

    #[test]
    fn dsa_zero_denominator_scores_infinity() {
        // class-1 point exactly on a class-0 point
        let store = EmbeddingStore::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]], vec![0, 1]).unwrap();
        let scores = dsa_scores(&[vec![5.0, 0.0]], &[0], &store).unwrap();
        assert!(scores[0].is_infinite());
    }

    #[test]
    fn act_features_concatenate() {
        let probs = vec![0.2; 10];
        let hidden = vec![1.5; 84];
        let f = act_features(&probs, &hidden);
        assert_eq!(f.len(), 94);
        assert_eq!(&f[..10], probs.as_slice());
        assert_eq!(&f[10..], hidden.as_slice());
        // purity
        assert_eq!(f, act_features(&probs, &hidden));
    }

    #[test]
    fn act_features_zero_hidden() {
        let probs = vec![0.5, 0.5];
        let f = act_features(&probs, &[0.0, 0.0, 0.0]);
        assert_eq!(f, vec![0.5, 0.5, 0.0, 0.0, 0.0]);
    }
}
