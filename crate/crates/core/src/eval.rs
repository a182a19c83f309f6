//! Fault labeling, natural-corruption test-set generation, RAUC / RAUC-n
//! computation, and the end-to-end experiment runner.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    self, deepgini_scores, dsa_scores, mcp_prioritize, BaselineError, EmbeddingStore,
};
use crate::graph::{self, GraphError, DEFAULT_K};
use crate::nn::{self, ActivationCapture, LayerWeights, ModelSpec, NnError};
use crate::ranker::{self, GbdtParams, RankerError};
use crate::rng::SplitMix64;
use crate::tensor::{self, LabeledDataset, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no flagged cases: RAUC is undefined")]
    NoFaults,
    #[error("order is not a permutation of 0..{0}")]
    BadOrder(usize),
    #[error("corruption needs [n, H, W, C] inputs, got shape {0:?}")]
    NotImages(Vec<usize>),
    #[error("no corruption ops configured")]
    NoOps,
    #[error("unknown corruption op: {0}")]
    UnknownOp(String),
    #[error("unknown method: {0}")]
    UnknownMethod(String),
    #[error("distance report needs at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ranker(#[from] RankerError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn stage<T>(name: &'static str, r: Result<T, EvalError>) -> Result<T, EvalError> {
    r.map_err(|e| EvalError::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// A prioritization result: case indices in descending priority, the score
/// per original index, and fault flags aligned to original indices.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
    pub flags: Vec<u8>,
}

impl RankedList {
    pub fn new(scores: Vec<f64>, flags: Vec<u8>) -> Self {
        let order = ranker::prioritize(&scores);
        Self {
            order,
            scores,
            flags,
        }
    }
}

/// Argmax with ties broken by the lowest class index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// flag = 1 iff the model's argmax prediction differs from the label.
pub fn label_faults(
    spec: &ModelSpec,
    weights: &LayerWeights,
    dataset: &LabeledDataset,
) -> Result<Vec<u8>, EvalError> {
    let outputs = nn::forward_batch(spec, weights, &dataset.inputs)?;
    Ok(outputs
        .iter()
        .zip(&dataset.labels)
        .map(|((probs, _), &label)| (argmax(probs.data()) != label as usize) as u8)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CorruptionOp {
    /// Degrees counterclockwise. Multiples of 90 are exact pixel
    /// permutations; other angles use nearest-neighbor resampling.
    Rotate { degrees: f64 },
    /// Shift by (dx, dy) pixels; vacated pixels are zero-filled.
    Translate { dx: i64, dy: i64 },
    /// Horizontal or vertical mirror.
    Flip { axis: FlipAxis },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    H,
    V,
}

impl CorruptionOp {
    /// Parses `rotate:90`, `translate:1:0`, `flip:h`.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let parts: Vec<&str> = text.split(':').collect();
        match parts.as_slice() {
            ["rotate", deg] => deg
                .parse::<f64>()
                .map(|degrees| CorruptionOp::Rotate { degrees })
                .map_err(|_| EvalError::UnknownOp(text.into())),
            ["translate", dx, dy] => match (dx.parse(), dy.parse()) {
                (Ok(dx), Ok(dy)) => Ok(CorruptionOp::Translate { dx, dy }),
                _ => Err(EvalError::UnknownOp(text.into())),
            },
            ["flip", "h"] => Ok(CorruptionOp::Flip { axis: FlipAxis::H }),
            ["flip", "v"] => Ok(CorruptionOp::Flip { axis: FlipAxis::V }),
            _ => Err(EvalError::UnknownOp(text.into())),
        }
    }
}

fn apply_op(op: &CorruptionOp, pixels: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
    let at = |y: usize, x: usize, ch: usize| pixels[(y * w + x) * c + ch];
    let mut out = vec![0.0f32; pixels.len()];
    match op {
        CorruptionOp::Flip { axis: FlipAxis::H } => {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out[(y * w + x) * c + ch] = at(y, w - 1 - x, ch);
                    }
                }
            }
        }
        CorruptionOp::Flip { axis: FlipAxis::V } => {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out[(y * w + x) * c + ch] = at(h - 1 - y, x, ch);
                    }
                }
            }
        }
        CorruptionOp::Translate { dx, dy } => {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as i64 - dy;
                    let sx = x as i64 - dx;
                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        for ch in 0..c {
                            out[(y * w + x) * c + ch] = at(sy as usize, sx as usize, ch);
                        }
                    }
                }
            }
        }
        CorruptionOp::Rotate { degrees } => {
            let quarter_turns = degrees / 90.0;
            if h == w && (quarter_turns - quarter_turns.round()).abs() < 1e-12 {
                // exact pixel permutation
                let turns = quarter_turns.round().rem_euclid(4.0) as usize;
                match turns {
                    0 => out.copy_from_slice(pixels),
                    // one counterclockwise quarter turn: (y, x) <- (x, w-1-y)
                    1 => {
                        for y in 0..h {
                            for x in 0..w {
                                for ch in 0..c {
                                    out[(y * w + x) * c + ch] = at(x, w - 1 - y, ch);
                                }
                            }
                        }
                    }
                    2 => {
                        for y in 0..h {
                            for x in 0..w {
                                for ch in 0..c {
                                    out[(y * w + x) * c + ch] = at(h - 1 - y, w - 1 - x, ch);
                                }
                            }
                        }
                    }
                    _ => {
                        for y in 0..h {
                            for x in 0..w {
                                for ch in 0..c {
                                    out[(y * w + x) * c + ch] = at(h - 1 - x, y, ch);
                                }
                            }
                        }
                    }
                }
            } else {
                // nearest-neighbor resampling around the image center
                let rad = degrees.to_radians();
                let (sin, cos) = rad.sin_cos();
                let cy = (h as f64 - 1.0) / 2.0;
                let cx = (w as f64 - 1.0) / 2.0;
                for y in 0..h {
                    for x in 0..w {
                        // inverse rotation of the target coordinate
                        let ry = y as f64 - cy;
                        let rx = x as f64 - cx;
                        let sx = cx + rx * cos - ry * sin;
                        let sy = cy + rx * sin + ry * cos;
                        let sxi = sx.round() as i64;
                        let syi = sy.round() as i64;
                        if syi >= 0 && syi < h as i64 && sxi >= 0 && sxi < w as i64 {
                            for ch in 0..c {
                                out[(y * w + x) * c + ch] = at(syi as usize, sxi as usize, ch);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Applies one op, sampled per case from `ops` with a seeded PRNG, to every
/// case of an [n, H, W, C] dataset. Labels are preserved.
pub fn corrupt(
    dataset: &LabeledDataset,
    ops: &[CorruptionOp],
    seed: u64,
) -> Result<LabeledDataset, EvalError> {
    if ops.is_empty() {
        return Err(EvalError::NoOps);
    }
    let shape = dataset.inputs.shape();
    let (n, h, w, c) = match shape {
        [n, h, w, c] => (*n, *h, *w, *c),
        other => return Err(EvalError::NotImages(other.to_vec())),
    };
    let mut rng = SplitMix64::new(seed);
    let mut data = Vec::with_capacity(dataset.inputs.len());
    for i in 0..n {
        let op = &ops[rng.next_below(ops.len())];
        data.extend(apply_op(op, dataset.inputs.case(i), h, w, c));
    }
    Ok(LabeledDataset::new(
        Tensor::new(shape.to_vec(), data)?,
        dataset.labels.clone(),
        dataset.flags.clone(),
    )?)
}

/// Cutoff for RAUC-n; `All` uses every case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cutoff {
    All,
    #[serde(untagged)]
    First(usize),
}

impl Cutoff {
    pub fn parse(text: &str) -> Option<Self> {
        if text.eq_ignore_ascii_case("all") {
            Some(Cutoff::All)
        } else {
            text.parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .map(Cutoff::First)
        }
    }

    pub fn label(&self) -> String {
        match self {
            Cutoff::All => "rauc_all".into(),
            Cutoff::First(n) => format!("rauc_{n}"),
        }
    }
}

/// Discrete prefix-sum AUC of faults found over the first `limit` inspected
/// cases, in the given inspection order.
fn prefix_auc(flag_sequence: impl Iterator<Item = u8>, limit: usize) -> u64 {
    let mut found = 0u64;
    let mut auc = 0u64;
    for flag in flag_sequence.take(limit) {
        found += u64::from(flag);
        auc += found;
    }
    auc
}

/// RAUC-n: prefix-sum AUC of the given order divided by the AUC of the
/// ideal order (all flagged cases first).
pub fn rauc(order: &[usize], flags: &[u8], cutoff: Cutoff) -> Result<f64, EvalError> {
    let n = flags.len();
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || seen[i] {
            return Err(EvalError::BadOrder(n));
        }
        seen[i] = true;
    }
    if order.len() != n {
        return Err(EvalError::BadOrder(n));
    }
    let faults = flags.iter().filter(|&&f| f == 1).count();
    if faults == 0 {
        return Err(EvalError::NoFaults);
    }
    let limit = match cutoff {
        Cutoff::All => n,
        Cutoff::First(k) => k.min(n),
    };
    let actual = prefix_auc(order.iter().map(|&i| flags[i]), limit);
    let ideal = prefix_auc((0..n).map(|i| u8::from(i < faults)), limit);
    Ok(actual as f64 / ideal as f64)
}

/// Sorted group names, mean-distance matrix, singleton warning per group.
pub type DistanceReport = (Vec<String>, Vec<Vec<f64>>, Vec<bool>);

/// Mean pairwise Euclidean distances within and between labeled groups.
pub fn distance_report(
    features: &[Vec<f64>],
    type_labels: &[String],
) -> Result<DistanceReport, EvalError> {
    let mut groups: Vec<String> = type_labels.to_vec();
    groups.sort();
    groups.dedup();
    if groups.len() < 2 {
        return Err(EvalError::TooFewGroups(groups.len()));
    }
    let members: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| {
            (0..type_labels.len())
                .filter(|&i| &type_labels[i] == g)
                .collect()
        })
        .collect();
    let dist = |a: usize, b: usize| -> f64 {
        features[a]
            .iter()
            .zip(&features[b])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut matrix = vec![vec![0.0; groups.len()]; groups.len()];
    let mut singleton = vec![false; groups.len()];
    for (gi, mi) in members.iter().enumerate() {
        for (gj, mj) in members.iter().enumerate() {
            let mut sum = 0.0;
            let mut count = 0usize;
            if gi == gj {
                if mi.len() < 2 {
                    singleton[gi] = true;
                    continue; // intra distance reported as 0 with a warning
                }
                for (a, &i) in mi.iter().enumerate() {
                    for &j in &mi[a + 1..] {
                        sum += dist(i, j);
                        count += 1;
                    }
                }
            } else {
                for &i in mi {
                    for &j in mj {
                        sum += dist(i, j);
                        count += 1;
                    }
                }
            }
            if count > 0 {
                matrix[gi][gj] = sum / count as f64;
            }
        }
    }
    Ok((groups, matrix, singleton))
}

pub fn write_distance_csv(
    groups: &[String],
    matrix: &[Vec<f64>],
    singleton: &[bool],
    path: impl AsRef<Path>,
) -> Result<(), EvalError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "group,{},singleton_warning", groups.join(","))?;
    for (gi, g) in groups.iter().enumerate() {
        let row: Vec<String> = matrix[gi].iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{g},{},{}", row.join(","), u8::from(singleton[gi]))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    ActGraph,
    Act,
    Gini,
    Mcp,
    Dsa,
}

impl Method {
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        match text.to_ascii_lowercase().as_str() {
            "actgraph" => Ok(Method::ActGraph),
            "act" => Ok(Method::Act),
            "gini" | "deepgini" => Ok(Method::Gini),
            "mcp" => Ok(Method::Mcp),
            "dsa" => Ok(Method::Dsa),
            other => Err(EvalError::UnknownMethod(other.into())),
        }
    }

    /// Supervised methods fit the GBDT ranker on the validation set.
    pub fn is_supervised(&self) -> bool {
        matches!(self, Method::ActGraph | Method::Act)
    }
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_balance() -> usize {
    200
}

fn default_cutoffs() -> Vec<Cutoff> {
    vec![
        Cutoff::First(100),
        Cutoff::First(500),
        Cutoff::First(1000),
        Cutoff::All,
    ]
}

fn default_seed() -> u64 {
    42
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    /// Training data (embedding store source); required for method "dsa".
    #[serde(default)]
    pub train_inputs: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    /// Ranker training pool; required for supervised methods.
    #[serde(default)]
    pub validation_inputs: Option<PathBuf>,
    #[serde(default)]
    pub validation_labels: Option<PathBuf>,
    pub test_inputs: PathBuf,
    pub test_labels: PathBuf,
    pub method: Method,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub ranker: Option<GbdtParams>,
    /// Ops applied to the test (and validation) inputs before ranking;
    /// empty means the datasets are used as stored.
    #[serde(default)]
    pub corruption: Vec<CorruptionOp>,
    /// Fraction of cases to corrupt when `corruption` is non-empty.
    #[serde(default)]
    pub corruption_fraction: f64,
    #[serde(default = "default_balance")]
    pub balance_per_class: usize,
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<Cutoff>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: Method,
    pub seed: u64,
    pub num_cases: usize,
    pub num_faults: usize,
    /// (cutoff label, RAUC value) in configured order.
    pub rauc: Vec<(String, f64)>,
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
    pub flags: Vec<u8>,
    pub timings: Vec<StageTiming>,
    pub config: ExperimentConfig,
}

impl ExperimentReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn write_rauc_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "metric,value")?;
        for (label, value) in &self.rauc {
            writeln!(w, "{label},{value:.6}")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn load_dataset(inputs: &Path, labels: &Path) -> Result<LabeledDataset, EvalError> {
    let inputs = tensor::read_tensor(inputs)?;
    let (labels, flags) = tensor::read_labels(labels)?;
    Ok(LabeledDataset::new(inputs, labels, flags)?)
}

/// Per-case forward-pass products reused by every method.
pub struct InferenceProducts {
    pub probs: Vec<Vec<f64>>,
    pub captures: Vec<ActivationCapture>,
    pub predicted: Vec<u32>,
}

pub fn run_inference(
    spec: &ModelSpec,
    weights: &LayerWeights,
    inputs: &Tensor,
    threads: usize,
) -> Result<InferenceProducts, EvalError> {
    let outputs = if threads <= 1 {
        nn::forward_batch(spec, weights, inputs)?
    } else {
        // chunked across scoped threads; per-case results keep their slots,
        // so the output is thread-count-invariant
        let n = inputs.num_cases();
        let chunk = n.div_ceil(threads);
        let mut slots: Vec<Option<(Tensor, ActivationCapture)>> = Vec::new();
        slots.resize_with(n, || None);
        let errors: std::sync::Mutex<Vec<EvalError>> = std::sync::Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for (t, slot_chunk) in slots.chunks_mut(chunk).enumerate() {
                let errors = &errors;
                scope.spawn(move || {
                    let start = t * chunk;
                    for (off, slot) in slot_chunk.iter_mut().enumerate() {
                        let i = start + off;
                        let case =
                            Tensor::new(inputs.case_shape(), inputs.case(i).to_vec()).unwrap();
                        match nn::forward(spec, weights, &case) {
                            Ok(result) => *slot = Some(result),
                            Err(e) => errors.lock().unwrap().push(e.into()),
                        }
                    }
                });
            }
        });
        if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
            return Err(e);
        }
        slots.into_iter().map(Option::unwrap).collect()
    };
    let mut probs = Vec::with_capacity(outputs.len());
    let mut captures = Vec::with_capacity(outputs.len());
    let mut predicted = Vec::with_capacity(outputs.len());
    for (p, c) in outputs {
        predicted.push(argmax(p.data()) as u32);
        probs.push(p.data().iter().map(|&v| v as f64).collect());
        captures.push(c);
    }
    Ok(InferenceProducts {
        probs,
        captures,
        predicted,
    })
}

/// Mean activation per neuron of the last hidden (second-to-last trainable)
/// layer, used for Act features and DSA embeddings.
pub fn last_hidden_embedding(capture: &ActivationCapture) -> Vec<f64> {
    let idx = capture.layers.len().saturating_sub(2);
    let (dims, values) = &capture.layers[idx];
    match dims.as_slice() {
        [h, w, c] => {
            let spatial = h * w;
            (0..*c)
                .map(|ch| {
                    (0..spatial).map(|s| values[s * c + ch] as f64).sum::<f64>() / spatial as f64
                })
                .collect()
        }
        _ => values.iter().map(|&v| v as f64).collect(),
    }
}

/// Algorithm-level experiment runner: model skeleton once, per-case features
/// and fault labels, optional ranker fit, scoring, ranking, RAUC table.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, EvalError> {
    let mut timings = Vec::new();
    let mut timed = |stage_name: &str, start: Instant| {
        timings.push(StageTiming {
            stage: stage_name.to_string(),
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
    };

    let t = Instant::now();
    let (spec, weights) = stage(
        "load-model",
        nn::load_model(&config.model).map_err(Into::into),
    )?;
    let mut test = stage(
        "load-data",
        load_dataset(&config.test_inputs, &config.test_labels),
    )?;
    if !config.corruption.is_empty() && config.corruption_fraction > 0.0 {
        test = stage(
            "corrupt",
            corrupt_fraction(
                &test,
                &config.corruption,
                config.corruption_fraction,
                config.seed,
            ),
        )?;
    }
    timed("load", t);

    // skeleton built once per model, shared across cases
    let t = Instant::now();
    let skeleton = if config.method == Method::ActGraph {
        Some(stage(
            "skeleton",
            graph::build_skeleton(&spec, &weights, config.k).map_err(Into::into),
        )?)
    } else {
        None
    };
    timed("skeleton", t);

    let t = Instant::now();
    let test_inference = stage(
        "test-inference",
        run_inference(&spec, &weights, &test.inputs, config.threads),
    )?;
    let flags: Vec<u8> = test_inference
        .predicted
        .iter()
        .zip(&test.labels)
        .map(|(&p, &l)| (p != l) as u8)
        .collect();
    timed("test-inference", t);

    let t = Instant::now();
    let scores: Vec<f64> = match config.method {
        Method::Gini => stage(
            "score",
            deepgini_scores(&test_inference.probs).map_err(Into::into),
        )?,
        Method::Mcp => {
            let order = stage(
                "score",
                mcp_prioritize(&test_inference.probs).map_err(Into::into),
            )?;
            // encode the round-robin order as descending pseudo-scores
            let n = order.len();
            let mut scores = vec![0.0; n];
            for (position, &idx) in order.iter().enumerate() {
                scores[idx] = (n - position) as f64 / n as f64;
            }
            scores
        }
        Method::Dsa => {
            let (train_inputs, train_labels) = match (&config.train_inputs, &config.train_labels) {
                (Some(i), Some(l)) => (i, l),
                _ => {
                    return Err(EvalError::Stage {
                        stage: "score",
                        source: Box::new(EvalError::UnknownMethod(
                            "dsa requires train_inputs/train_labels".into(),
                        )),
                    })
                }
            };
            let train = stage("score", load_dataset(train_inputs, train_labels))?;
            let train_inference = stage(
                "score",
                run_inference(&spec, &weights, &train.inputs, config.threads),
            )?;
            let store = stage(
                "score",
                EmbeddingStore::new(
                    train_inference
                        .captures
                        .iter()
                        .map(last_hidden_embedding)
                        .collect(),
                    train.labels.clone(),
                )
                .map_err(Into::into),
            )?;
            let test_embeddings: Vec<Vec<f64>> = test_inference
                .captures
                .iter()
                .map(last_hidden_embedding)
                .collect();
            stage(
                "score",
                dsa_scores(&test_embeddings, &test_inference.predicted, &store).map_err(Into::into),
            )?
        }
        Method::ActGraph | Method::Act => {
            let (val_inputs, val_labels) =
                match (&config.validation_inputs, &config.validation_labels) {
                    (Some(i), Some(l)) => (i, l),
                    _ => {
                        return Err(EvalError::Stage {
                            stage: "fit-ranker",
                            source: Box::new(EvalError::UnknownMethod(format!(
                                "{:?} requires validation_inputs/validation_labels",
                                config.method
                            ))),
                        })
                    }
                };
            let mut validation = stage("fit-ranker", load_dataset(val_inputs, val_labels))?;
            if !config.corruption.is_empty() && config.corruption_fraction > 0.0 {
                validation = stage(
                    "fit-ranker",
                    corrupt_fraction(
                        &validation,
                        &config.corruption,
                        config.corruption_fraction,
                        config.seed.wrapping_add(1),
                    ),
                )?;
            }
            let val_inference = stage(
                "fit-ranker",
                run_inference(&spec, &weights, &validation.inputs, config.threads),
            )?;
            let val_flags: Vec<u8> = val_inference
                .predicted
                .iter()
                .zip(&validation.labels)
                .map(|(&p, &l)| (p != l) as u8)
                .collect();
            let extract = |inference: &InferenceProducts| -> Result<Vec<Vec<f64>>, EvalError> {
                match config.method {
                    Method::ActGraph => inference
                        .captures
                        .iter()
                        .map(|cap| {
                            graph::features_from_capture(skeleton.as_ref().unwrap(), cap)
                                .map_err(Into::into)
                        })
                        .collect(),
                    _ => Ok(inference
                        .probs
                        .iter()
                        .zip(&inference.captures)
                        .map(|(p, cap)| baselines::act_features(p, &last_hidden_embedding(cap)))
                        .collect()),
                }
            };
            let val_features = stage("fit-ranker", extract(&val_inference))?;
            let balanced = stage(
                "fit-ranker",
                ranker::balance_trainset(
                    &val_features,
                    &val_flags,
                    config.balance_per_class,
                    config.seed,
                )
                .map_err(Into::into),
            )?;
            let params = config.ranker.clone().unwrap_or(GbdtParams {
                seed: config.seed,
                ..GbdtParams::default()
            });
            let model = stage(
                "fit-ranker",
                ranker::fit(&balanced, &params).map_err(Into::into),
            )?;
            let test_features = stage("score", extract(&test_inference))?;
            stage(
                "score",
                ranker::score(&model, &test_features).map_err(Into::into),
            )?
        }
    };
    timed("score", t);

    let t = Instant::now();
    let ranked = RankedList::new(scores, flags);
    let mut rauc_table = Vec::with_capacity(config.cutoffs.len());
    for cutoff in &config.cutoffs {
        let value = stage("rauc", rauc(&ranked.order, &ranked.flags, *cutoff))?;
        rauc_table.push((cutoff.label(), value));
    }
    timed("rank", t);

    let num_faults = ranked.flags.iter().filter(|&&f| f == 1).count();
    Ok(ExperimentReport {
        method: config.method,
        seed: config.seed,
        num_cases: ranked.flags.len(),
        num_faults,
        rauc: rauc_table,
        order: ranked.order,
        scores: ranked.scores,
        flags: ranked.flags,
        timings,
        config: config.clone(),
    })
}

/// Corrupts the trailing `fraction` of the dataset, leaving the rest clean.
pub fn corrupt_fraction(
    dataset: &LabeledDataset,
    ops: &[CorruptionOp],
    fraction: f64,
    seed: u64,
) -> Result<LabeledDataset, EvalError> {
    let n = dataset.len();
    let start = n - ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    if start == n {
        return Ok(dataset.clone());
    }
    let case_len: usize = dataset.inputs.case_shape().iter().product();
    let tail_inputs = Tensor::new(
        {
            let mut shape = dataset.inputs.shape().to_vec();
            shape[0] = n - start;
            shape
        },
        dataset.inputs.data()[start * case_len..].to_vec(),
    )?;
    let tail = LabeledDataset::new(tail_inputs, dataset.labels[start..].to_vec(), None)?;
    let corrupted_tail = corrupt(&tail, ops, seed)?;
    let mut data = dataset.inputs.data()[..start * case_len].to_vec();
    data.extend_from_slice(corrupted_tail.inputs.data());
    Ok(LabeledDataset::new(
        Tensor::new(dataset.inputs.shape().to_vec(), data)?,
        dataset.labels.clone(),
        dataset.flags.clone(),
    )?)
}

pub fn read_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, EvalError> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rauc_ideal_is_one() {
        let flags = vec![1, 1, 0, 0, 1, 0];
        let order = vec![0, 1, 4, 2, 3, 5];
        for cutoff in [Cutoff::All, Cutoff::First(2), Cutoff::First(100)] {
            assert_eq!(rauc(&order, &flags, cutoff).unwrap(), 1.0);
        }
    }

    #[test]
    fn rauc_four_case_fixture() {
        // flags in rank order [1,0,1,0]: cum = 1,1,2,2 -> AUC 6; ideal 7
        let flags = vec![1, 0, 1, 0];
        let order = vec![0, 1, 2, 3];
        let value = rauc(&order, &flags, Cutoff::All).unwrap();
        assert!((value - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn rauc_worst_ordering() {
        // all faults last, 2 flagged of 4: cum = 0,0,1,2 -> AUC 3; ideal 7
        let flags = vec![0, 0, 1, 1];
        let order = vec![0, 1, 2, 3];
        let value = rauc(&order, &flags, Cutoff::All).unwrap();
        assert!((value - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn rauc_no_faults_is_error() {
        assert!(matches!(
            rauc(&[0, 1], &[0, 0], Cutoff::All),
            Err(EvalError::NoFaults)
        ));
    }

    #[test]
    fn rauc_rejects_non_permutation() {
        assert!(matches!(
            rauc(&[0, 0], &[1, 0], Cutoff::All),
            Err(EvalError::BadOrder(_))
        ));
    }

    #[test]
    fn rauc_swap_monotonicity() {
        // moving a flagged case one slot earlier never decreases RAUC
        let flags = vec![0, 1, 0, 1, 0, 1, 0, 0];
        let mut order: Vec<usize> = (0..8).collect();
        let mut previous = rauc(&order, &flags, Cutoff::All).unwrap();
        for i in (1..8).rev() {
            if flags[order[i]] == 1 && flags[order[i - 1]] == 0 {
                order.swap(i, i - 1);
                let now = rauc(&order, &flags, Cutoff::All).unwrap();
                assert!(now >= previous);
                previous = now;
            }
        }
    }

    #[test]
    fn label_fault_flags() {
        use crate::nn::{LayerSpec, TrainableWeights};
        let spec = ModelSpec {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::Dense {
                    in_dim: 2,
                    out_dim: 2,
                },
                LayerSpec::Softmax,
            ],
            num_classes: 2,
        };
        let weights = LayerWeights {
            layers: vec![TrainableWeights {
                kernel: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                bias: Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(),
            }],
        };
        // case 0: logits favor class 0, labeled 0 -> correct.
        // case 1: logits favor class 0, labeled 1 -> fault.
        // case 2: exact tie, labeled 1, argmax tie-breaks to class 0 -> fault.
        let dataset = LabeledDataset::new(
            Tensor::new(vec![3, 2], vec![2.0, 0.0, 3.0, 1.0, 0.5, 0.5]).unwrap(),
            vec![0, 1, 1],
            None,
        )
        .unwrap();
        let flags = label_faults(&spec, &weights, &dataset).unwrap();
        assert_eq!(flags, vec![0, 1, 1]);
    }

    fn image_dataset() -> LabeledDataset {
        // one 2x2 single-channel image [[a,b],[c,d]]
        LabeledDataset::new(
            Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            vec![0],
            None,
        )
        .unwrap()
    }

    #[test]
    fn rotate_full_turn_identity() {
        let d = image_dataset();
        let out = corrupt(&d, &[CorruptionOp::Rotate { degrees: 360.0 }], 0).unwrap();
        assert_eq!(out.inputs.data(), d.inputs.data());
    }

    #[test]
    fn flip_twice_is_identity() {
        let d = image_dataset();
        let op = [CorruptionOp::Flip { axis: FlipAxis::H }];
        let once = corrupt(&d, &op, 0).unwrap();
        let twice = corrupt(&once, &op, 0).unwrap();
        assert_eq!(twice.inputs.data(), d.inputs.data());
        assert_ne!(once.inputs.data(), d.inputs.data());
    }

    #[test]
    fn translate_right_shift_zero_fill() {
        // [[a,b],[c,d]] shifted by dx=1 -> [[0,a],[0,c]]
        let d = image_dataset();
        let out = corrupt(&d, &[CorruptionOp::Translate { dx: 1, dy: 0 }], 0).unwrap();
        assert_eq!(out.inputs.data(), &[0.0, 1.0, 0.0, 3.0]);
    }

    #[test]
    fn rotate_90_is_exact_permutation() {
        let d = image_dataset();
        let out = corrupt(&d, &[CorruptionOp::Rotate { degrees: 90.0 }], 0).unwrap();
        let mut sorted_in = d.inputs.data().to_vec();
        let mut sorted_out = out.inputs.data().to_vec();
        sorted_in.sort_by(f32::total_cmp);
        sorted_out.sort_by(f32::total_cmp);
        assert_eq!(sorted_in, sorted_out);
        // four quarter turns come home
        let mut x = d.clone();
        for _ in 0..4 {
            x = corrupt(&x, &[CorruptionOp::Rotate { degrees: 90.0 }], 0).unwrap();
        }
        assert_eq!(x.inputs.data(), d.inputs.data());
    }

    #[test]
    fn corrupt_deterministic_per_seed() {
        let d = LabeledDataset::new(
            Tensor::new(vec![4, 2, 2, 1], (0..16).map(|v| v as f32).collect()).unwrap(),
            vec![0, 1, 0, 1],
            None,
        )
        .unwrap();
        let ops = [
            CorruptionOp::Rotate { degrees: 90.0 },
            CorruptionOp::Flip { axis: FlipAxis::H },
            CorruptionOp::Translate { dx: 1, dy: 0 },
        ];
        let a = corrupt(&d, &ops, 7).unwrap();
        let b = corrupt(&d, &ops, 7).unwrap();
        for (x, y) in a.inputs.data().iter().zip(b.inputs.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn corrupt_rejects_flat_inputs() {
        let d = LabeledDataset::new(
            Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap(),
            vec![0, 1],
            None,
        )
        .unwrap();
        assert!(matches!(
            corrupt(&d, &[CorruptionOp::Flip { axis: FlipAxis::H }], 0),
            Err(EvalError::NotImages(_))
        ));
    }

    #[test]
    fn corruption_op_parsing() {
        assert_eq!(
            CorruptionOp::parse("rotate:90").unwrap(),
            CorruptionOp::Rotate { degrees: 90.0 }
        );
        assert_eq!(
            CorruptionOp::parse("translate:1:-2").unwrap(),
            CorruptionOp::Translate { dx: 1, dy: -2 }
        );
        assert_eq!(
            CorruptionOp::parse("flip:v").unwrap(),
            CorruptionOp::Flip { axis: FlipAxis::V }
        );
        assert!(CorruptionOp::parse("sharpen:2").is_err());
    }

    #[test]
    fn distance_report_two_singletons() {
        // groups {(0,0)} and {(3,4)}: inter distance 5 (3-4-5 triangle)
        let features = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        let labels = vec!["a".to_string(), "b".to_string()];
        let (groups, matrix, singleton) = distance_report(&features, &labels).unwrap();
        assert_eq!(groups, vec!["a", "b"]);
        assert!((matrix[0][1] - 5.0).abs() < 1e-12);
        assert_eq!(matrix[0][0], 0.0);
        assert!(singleton[0] && singleton[1]);
    }

    #[test]
    fn distance_report_matches_brute_force() {
        let mut rng = SplitMix64::new(11);
        let features: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..3).map(|_| rng.next_f64()).collect())
            .collect();
        let labels: Vec<String> = (0..12).map(|i| format!("g{}", i % 3)).collect();
        let (groups, matrix, _) = distance_report(&features, &labels).unwrap();
        // independent double loop
        for (gi, ga) in groups.iter().enumerate() {
            for (gj, gb) in groups.iter().enumerate() {
                let mut sum = 0.0;
                let mut count = 0;
                for i in 0..12 {
                    for j in 0..12 {
                        if &labels[i] != ga || &labels[j] != gb {
                            continue;
                        }
                        if gi == gj && i >= j {
                            continue;
                        }
                        let d: f64 = features[i]
                            .iter()
                            .zip(&features[j])
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                            .sqrt();
                        sum += d;
                        count += 1;
                    }
                }
                assert!((matrix[gi][gj] - sum / count as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_points_have_zero_intra_distance() {
        let features = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![9.0, 9.0]];
        let labels = vec!["a".into(), "a".into(), "b".into()];
        let (_, matrix, singleton) = distance_report(&features, &labels).unwrap();
        assert_eq!(matrix[0][0], 0.0);
        assert!(!singleton[0]);
    }
}
