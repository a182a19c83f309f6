//! Test-input prioritization for feed-forward networks: activation-graph
//! features with a gradient-boosted ranker, plus confidence- and
//! distance-based baselines and a RAUC evaluation harness.

pub mod baselines;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod ranker;
pub mod rng;
pub mod tensor;

pub use eval::{rauc, Cutoff, EvalError, ExperimentConfig, ExperimentReport, Method, RankedList};
pub use graph::{ActivationGraph, GraphError, GraphSkeleton, DEFAULT_K};
pub use nn::{ActivationCapture, LayerSpec, LayerWeights, ModelSpec, NnError};
pub use ranker::{GbdtModel, GbdtParams, RankTrainSet, RankerError};
pub use rng::SplitMix64;
pub use tensor::{LabeledDataset, Tensor, TensorError};
