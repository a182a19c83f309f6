//! Activation-graph feature extraction over the last K trainable layers:
//! per-neuron activation averaging and min-max normalization, per-edge
//! weight averaging and normalization, adjacency construction, weighted
//! in-degree node features, and one message-passing aggregation that yields
//! the center node features used for prioritization.

use thiserror::Error;

use crate::nn::{ActivationCapture, LayerSpec, LayerWeights, ModelSpec, NnError};

pub const DEFAULT_K: usize = 4;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("K={k} exceeds the {available} trainable layers")]
    KTooLarge { k: usize, available: usize },
    #[error("K={k} is below the minimum of 2")]
    KTooSmall { k: usize },
    #[error("activation capture is empty")]
    EmptyCapture,
    #[error("layer size mismatch: {0}")]
    SizeMismatch(String),
    #[error("unsupported layer topology: {0}")]
    UnsupportedTopology(String),
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Per-model graph structure: neuron counts of the K suffix layers and the
/// normalized averaged weight block between each consecutive pair. Built
/// once per model and shared across cases.
#[derive(Debug, Clone)]
pub struct GraphSkeleton {
    pub layer_sizes: Vec<usize>,
    /// K-1 blocks; block l is row-major [layer_sizes[l], layer_sizes[l+1]],
    /// entries in [0, 1].
    pub w_blocks: Vec<Vec<f64>>,
}

/// Per-case normalized activations for the K suffix layers, entries in [0, 1].
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub phi: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ActivationGraph {
    pub layer_sizes: Vec<usize>,
    /// Adjacency blocks: a_blocks[l][j][i] = w_blocks[l][j][i] * phi[l+1][i].
    pub a_blocks: Vec<Vec<f64>>,
    /// Weighted in-degree per node; nf[0] is all zeros.
    pub nf: Vec<Vec<f64>>,
    /// Message-passing aggregation of nf over the adjacency.
    pub cnf: Vec<Vec<f64>>,
}

fn min_max_normalize(values: &mut [f64]) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    let range = max - min;
    if range <= 0.0 || range.is_nan() {
        // degenerate block: no information, keep the range valid
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for v in values {
        *v = (*v - min) / range;
    }
}

/// Averages the raw kernel between two consecutive trainable layers down to
/// one scalar per (source neuron, target neuron) pair.
fn averaged_block(
    src: &LayerSpec,
    dst: &LayerSpec,
    dst_kernel: &[f32],
) -> Result<(usize, usize, Vec<f64>), GraphError> {
    let src_n = src
        .neuron_count()
        .ok_or_else(|| GraphError::UnsupportedTopology("source layer has no neurons".into()))?;
    match dst {
        LayerSpec::Dense { in_dim, out_dim } => {
            let mut block = vec![0.0f64; src_n * out_dim];
            if *in_dim == src_n {
                // dense -> dense: the 1x1 average is the kernel entry itself
                for j in 0..src_n {
                    for i in 0..*out_dim {
                        block[j * out_dim + i] = dst_kernel[j * out_dim + i] as f64;
                    }
                }
            } else {
                // conv -> dense across a flatten: average the kernel rows of
                // every spatial position belonging to source filter j.
                // Flatten layout is (h*W + w)*C + c, so row % C == channel.
                if in_dim % src_n != 0 {
                    return Err(GraphError::SizeMismatch(format!(
                        "dense in_dim {in_dim} not divisible by {src_n} source filters"
                    )));
                }
                let positions = in_dim / src_n;
                for j in 0..src_n {
                    for i in 0..*out_dim {
                        let mut acc = 0.0f64;
                        for p in 0..positions {
                            let row = p * src_n + j;
                            acc += dst_kernel[row * out_dim + i] as f64;
                        }
                        block[j * out_dim + i] = acc / positions as f64;
                    }
                }
            }
            Ok((src_n, *out_dim, block))
        }
        LayerSpec::Conv2D {
            in_ch,
            out_ch,
            kh,
            kw,
            ..
        } => {
            if *in_ch != src_n {
                return Err(GraphError::SizeMismatch(format!(
                    "conv in_ch {in_ch} vs {src_n} source filters"
                )));
            }
            let spatial = kh * kw;
            let mut block = vec![0.0f64; src_n * out_ch];
            for j in 0..src_n {
                for i in 0..*out_ch {
                    let mut acc = 0.0f64;
                    for s in 0..spatial {
                        acc += dst_kernel[(s * in_ch + j) * out_ch + i] as f64;
                    }
                    block[j * out_ch + i] = acc / spatial as f64;
                }
            }
            Ok((src_n, *out_ch, block))
        }
        other => Err(GraphError::UnsupportedTopology(format!(
            "layer {other:?} cannot terminate a graph edge"
        ))),
    }
}

/// Builds the normalized weight skeleton over the last `k` trainable layers.
pub fn build_skeleton(
    spec: &ModelSpec,
    weights: &LayerWeights,
    k: usize,
) -> Result<GraphSkeleton, GraphError> {
    if k < 2 {
        return Err(GraphError::KTooSmall { k });
    }
    weights.check_against(spec)?;
    let trainables = spec.trainable_layers();
    if trainables.len() < k {
        return Err(GraphError::KTooLarge {
            k,
            available: trainables.len(),
        });
    }
    let start = trainables.len() - k;
    let layer_sizes: Vec<usize> = trainables[start..]
        .iter()
        .map(|l| l.neuron_count().unwrap())
        .collect();
    let mut w_blocks = Vec::with_capacity(k - 1);
    for offset in 0..k - 1 {
        let src = trainables[start + offset];
        let dst = trainables[start + offset + 1];
        let dst_kernel = weights.layers[start + offset + 1].kernel.data();
        let (rows, cols, mut block) = averaged_block(src, dst, dst_kernel)?;
        debug_assert_eq!(rows, layer_sizes[offset]);
        debug_assert_eq!(cols, layer_sizes[offset + 1]);
        min_max_normalize(&mut block);
        w_blocks.push(block);
    }
    Ok(GraphSkeleton {
        layer_sizes,
        w_blocks,
    })
}

/// Averages each captured feature map over height and width and min-max
/// normalizes each of the last `k` layers to [0, 1].
pub fn trace_activations(
    capture: &ActivationCapture,
    k: usize,
) -> Result<ActivationTrace, GraphError> {
    if capture.layers.is_empty() {
        return Err(GraphError::EmptyCapture);
    }
    if capture.layers.len() < k {
        return Err(GraphError::KTooLarge {
            k,
            available: capture.layers.len(),
        });
    }
    let start = capture.layers.len() - k;
    let mut phi = Vec::with_capacity(k);
    for (dims, values) in &capture.layers[start..] {
        let mut layer: Vec<f64> = match dims.as_slice() {
            [_d] => values.iter().map(|&v| v as f64).collect(),
            [h, w, c] => {
                let spatial = h * w;
                (0..*c)
                    .map(|ch| {
                        (0..spatial).map(|s| values[s * c + ch] as f64).sum::<f64>()
                            / spatial as f64
                    })
                    .collect()
            }
            other => {
                return Err(GraphError::SizeMismatch(format!(
                    "capture shape {other:?} is neither vector nor map"
                )))
            }
        };
        min_max_normalize(&mut layer);
        phi.push(layer);
    }
    Ok(ActivationTrace { phi })
}

/// Adjacency, node features and center node features from a skeleton and a
/// per-case trace.
pub fn build_graph(
    skeleton: &GraphSkeleton,
    trace: &ActivationTrace,
) -> Result<ActivationGraph, GraphError> {
    let sizes = &skeleton.layer_sizes;
    if trace.phi.len() != sizes.len() {
        return Err(GraphError::SizeMismatch(format!(
            "trace has {} layers, skeleton has {}",
            trace.phi.len(),
            sizes.len()
        )));
    }
    for (l, (phi, &size)) in trace.phi.iter().zip(sizes).enumerate() {
        if phi.len() != size {
            return Err(GraphError::SizeMismatch(format!(
                "layer {l}: trace has {} neurons, skeleton has {size}",
                phi.len()
            )));
        }
    }

    let mut a_blocks = Vec::with_capacity(sizes.len() - 1);
    let mut nf: Vec<Vec<f64>> = Vec::with_capacity(sizes.len());
    let mut cnf: Vec<Vec<f64>> = Vec::with_capacity(sizes.len());
    nf.push(vec![0.0; sizes[0]]);
    cnf.push(vec![0.0; sizes[0]]);

    for l in 0..sizes.len() - 1 {
        let (rows, cols) = (sizes[l], sizes[l + 1]);
        let w = &skeleton.w_blocks[l];
        let phi_next = &trace.phi[l + 1];
        let mut a = vec![0.0f64; rows * cols];
        for j in 0..rows {
            for i in 0..cols {
                a[j * cols + i] = w[j * cols + i] * phi_next[i];
            }
        }
        let mut nf_next = vec![0.0f64; cols];
        let mut cnf_next = vec![0.0f64; cols];
        for i in 0..cols {
            let mut in_degree = 0.0;
            let mut aggregated = 0.0;
            for j in 0..rows {
                let edge = a[j * cols + i];
                in_degree += edge;
                aggregated += edge * nf[l][j];
            }
            nf_next[i] = in_degree;
            cnf_next[i] = aggregated;
        }
        a_blocks.push(a);
        nf.push(nf_next);
        cnf.push(cnf_next);
    }

    Ok(ActivationGraph {
        layer_sizes: sizes.clone(),
        a_blocks,
        nf,
        cnf,
    })
}

/// The prioritization feature: cnf of the last two graph layers, concatenated.
pub fn features_from_capture(
    skeleton: &GraphSkeleton,
    capture: &ActivationCapture,
) -> Result<Vec<f64>, GraphError> {
    let trace = trace_activations(capture, skeleton.layer_sizes.len())?;
    let graph = build_graph(skeleton, &trace)?;
    let k = graph.cnf.len();
    let mut features = graph.cnf[k - 2].clone();
    features.extend_from_slice(&graph.cnf[k - 1]);
    Ok(features)
}

/// One-shot convenience wrapper around skeleton + trace + graph.
pub fn extract_features(
    spec: &ModelSpec,
    weights: &LayerWeights,
    capture: &ActivationCapture,
    k: usize,
) -> Result<Vec<f64>, GraphError> {
    let skeleton = build_skeleton(spec, weights, k)?;
    features_from_capture(&skeleton, capture)
}

/// DOT rendering of edges with adjacency >= threshold. Node labels carry the
/// nf value. Diagnostic only; the threshold never feeds back into features.
pub fn export_dot(graph: &ActivationGraph, threshold: f64) -> Result<String, GraphError> {
    if threshold < 0.0 || !threshold.is_finite() {
        return Err(GraphError::BadThreshold(threshold));
    }
    let mut out = String::from("digraph actgraph {\n  rankdir=LR;\n");
    for (l, &size) in graph.layer_sizes.iter().enumerate() {
        for i in 0..size {
            out.push_str(&format!(
                "  L{l}_{i} [label=\"L{l}:{i}\\nnf={:.4}\"];\n",
                graph.nf[l][i]
            ));
        }
    }
    for (l, a) in graph.a_blocks.iter().enumerate() {
        let cols = graph.layer_sizes[l + 1];
        for j in 0..graph.layer_sizes[l] {
            for i in 0..cols {
                let w = a[j * cols + i];
                if w >= threshold && w > 0.0 {
                    out.push_str(&format!("  L{l}_{j} -> L{}_{i} [weight={w}];\n", l + 1));
                }
            }
        }
    }
    out.push_str("}\n");
    Ok(out)
}

/// CSV edge list: `src_layer,src_node,dst_node,weight`, same filter as DOT.
pub fn export_edge_csv(graph: &ActivationGraph, threshold: f64) -> Result<String, GraphError> {
    if threshold < 0.0 || !threshold.is_finite() {
        return Err(GraphError::BadThreshold(threshold));
    }
    let mut out = String::from("src_layer,src_node,dst_node,weight\n");
    for (l, a) in graph.a_blocks.iter().enumerate() {
        let cols = graph.layer_sizes[l + 1];
        for j in 0..graph.layer_sizes[l] {
            for i in 0..cols {
                let w = a[j * cols + i];
                if w >= threshold && w > 0.0 {
                    out.push_str(&format!("{l},{j},{i},{w}\n"));
                }
            }
        }
    }
    Ok(out)
}

/// Number of edges at or above the threshold.
pub fn count_edges(graph: &ActivationGraph, threshold: f64) -> usize {
    graph
        .a_blocks
        .iter()
        .flat_map(|a| a.iter())
        .filter(|&&w| w >= threshold && w > 0.0)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, ModelSpec, TrainableWeights};
    use crate::tensor::Tensor;

    fn chain_spec(sizes: &[usize]) -> ModelSpec {
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            layers.push(LayerSpec::Dense {
                in_dim: w[0],
                out_dim: w[1],
            });
            layers.push(LayerSpec::Relu);
        }
        layers.pop();
        layers.push(LayerSpec::Softmax);
        ModelSpec {
            input_shape: vec![sizes[0]],
            layers,
            num_classes: *sizes.last().unwrap() as u32,
        }
    }

    fn dense_weights(sizes: &[usize], kernels: Vec<Vec<f32>>) -> LayerWeights {
        let layers = sizes
            .windows(2)
            .zip(kernels)
            .map(|(w, k)| TrainableWeights {
                kernel: Tensor::new(vec![w[0], w[1]], k).unwrap(),
                bias: Tensor::new(vec![w[1]], vec![0.0; w[1]]).unwrap(),
            })
            .collect();
        LayerWeights { layers }
    }

    #[test]
    fn dense_block_min_max_normalized() {
        // kernel [[2,0],[0,2]] -> averaged identical -> normalized [[1,0],[0,1]]
        let spec = chain_spec(&[2, 2, 2]);
        let weights = dense_weights(
            &[2, 2, 2],
            vec![vec![1.0, 0.0, 0.0, 1.0], vec![2.0, 0.0, 0.0, 2.0]],
        );
        let skeleton = build_skeleton(&spec, &weights, 2).unwrap();
        assert_eq!(skeleton.w_blocks[0], vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_block_normalizes_to_zeros() {
        let spec = chain_spec(&[2, 2, 2]);
        let weights = dense_weights(
            &[2, 2, 2],
            vec![vec![1.0, 0.0, 0.0, 1.0], vec![3.0, 3.0, 3.0, 3.0]],
        );
        let skeleton = build_skeleton(&spec, &weights, 2).unwrap();
        assert_eq!(skeleton.w_blocks[0], vec![0.0; 4]);
    }

    #[test]
    fn conv_kernel_averaged_over_spatial_extent() {
        // 2x2 all-ones kernel slice between filters j=0 and i=0 averages to 1.0
        let src = LayerSpec::Conv2D {
            in_ch: 1,
            out_ch: 1,
            kh: 1,
            kw: 1,
            stride: 1,
            padding: 0,
        };
        let dst = LayerSpec::Conv2D {
            in_ch: 1,
            out_ch: 1,
            kh: 2,
            kw: 2,
            stride: 1,
            padding: 0,
        };
        let kernel = vec![1.0f32; 4];
        let (_, _, block) = averaged_block(&src, &dst, &kernel).unwrap();
        assert_eq!(block, vec![1.0]);
    }

    #[test]
    fn feature_map_averaged_then_normalized() {
        let capture = ActivationCapture {
            layers: vec![
                (vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]),
                (vec![3], vec![2.0, 4.0, 6.0]),
            ],
        };
        let trace = trace_activations(&capture, 2).unwrap();
        // single filter: mean 2.5, degenerate layer -> 0
        assert_eq!(trace.phi[0], vec![0.0]);
        assert_eq!(trace.phi[1], vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_layer_normalizes_to_zeros() {
        let capture = ActivationCapture {
            layers: vec![(vec![2], vec![5.0, 5.0]), (vec![2], vec![1.0, 2.0])],
        };
        let trace = trace_activations(&capture, 2).unwrap();
        assert_eq!(trace.phi[0], vec![0.0, 0.0]);
    }

    #[test]
    fn empty_capture_rejected() {
        let capture = ActivationCapture { layers: vec![] };
        assert!(matches!(
            trace_activations(&capture, 2),
            Err(GraphError::EmptyCapture)
        ));
    }

    // DERIVED oracle for the spec's 3-layer chain: sizes [2,2,2],
    // phi = ([0,1],[1,0],[0,1]), W01=[[1,0],[0,1]], W12=[[1,1],[0,0]].
    // A0 = [[1*1,0*0],[0*1,1*0]] = [[1,0],[0,0]]
    // nf1 = [1,0]; A1 = [[1*0,1*1],[0*0,0*1]] = [[0,1],[0,0]]
    // nf2 = [0,1]; cnf1 = [0,0]; cnf2[i] = sum_z A1[z][i]*nf1[z] = [0,1]
    fn fixture_chain() -> (GraphSkeleton, ActivationTrace) {
        let skeleton = GraphSkeleton {
            layer_sizes: vec![2, 2, 2],
            w_blocks: vec![vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 1.0, 0.0, 0.0]],
        };
        let trace = ActivationTrace {
            phi: vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        (skeleton, trace)
    }

    #[test]
    fn three_layer_chain_matches_hand_oracle() {
        let (skeleton, trace) = fixture_chain();
        let graph = build_graph(&skeleton, &trace).unwrap();
        assert_eq!(graph.nf[0], vec![0.0, 0.0]);
        assert_eq!(graph.nf[1], vec![1.0, 0.0]);
        assert_eq!(graph.nf[2], vec![0.0, 1.0]);
        assert_eq!(graph.cnf[1], vec![0.0, 0.0]);
        assert_eq!(graph.cnf[2], vec![0.0, 1.0]);
    }

    #[test]
    fn adjacency_is_weight_times_target_activation() {
        let skeleton = GraphSkeleton {
            layer_sizes: vec![1, 1],
            w_blocks: vec![vec![0.3]],
        };
        let trace = ActivationTrace {
            phi: vec![vec![1.0], vec![0.5]],
        };
        let graph = build_graph(&skeleton, &trace).unwrap();
        assert!((graph.a_blocks[0][0] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn node_feature_is_incoming_column_sum() {
        let skeleton = GraphSkeleton {
            layer_sizes: vec![3, 1],
            w_blocks: vec![vec![0.1, 0.2, 0.3]],
        };
        let trace = ActivationTrace {
            phi: vec![vec![0.0; 3], vec![1.0]],
        };
        let graph = build_graph(&skeleton, &trace).unwrap();
        assert!((graph.nf[1][0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn chain_features_concatenate_last_two_cnf_layers() {
        let (skeleton, trace) = fixture_chain();
        let graph = build_graph(&skeleton, &trace).unwrap();
        let mut features = graph.cnf[1].clone();
        features.extend_from_slice(&graph.cnf[2]);
        assert_eq!(features, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_weight_network_gives_zero_features() {
        let spec = chain_spec(&[2, 2, 2, 2]);
        let weights = dense_weights(
            &[2, 2, 2, 2],
            vec![vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]],
        );
        let x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let (_, capture) = crate::nn::forward(&spec, &weights, &x).unwrap();
        let features = extract_features(&spec, &weights, &capture, 3).unwrap();
        assert!(features.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn k_exceeding_trainable_count_rejected() {
        let spec = chain_spec(&[2, 2, 2]);
        let weights = dense_weights(
            &[2, 2, 2],
            vec![vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 1.0]],
        );
        assert!(matches!(
            build_skeleton(&spec, &weights, 5),
            Err(GraphError::KTooLarge { .. })
        ));
    }

    #[test]
    fn export_threshold_above_one_empty() {
        let (skeleton, trace) = fixture_chain();
        let graph = build_graph(&skeleton, &trace).unwrap();
        assert_eq!(count_edges(&graph, 1.0), 2);
        let csv = export_edge_csv(&graph, 1.1).unwrap();
        assert_eq!(csv.lines().count(), 1); // header only
        let dot = export_dot(&graph, 1.1).unwrap();
        assert!(!dot.contains("->"));
    }

    #[test]
    fn export_threshold_zero_includes_all_nonzero_edges() {
        let (skeleton, trace) = fixture_chain();
        let graph = build_graph(&skeleton, &trace).unwrap();
        let nonzero = graph
            .a_blocks
            .iter()
            .flat_map(|a| a.iter())
            .filter(|&&w| w > 0.0)
            .count();
        assert_eq!(count_edges(&graph, 0.0), nonzero);
    }
}
