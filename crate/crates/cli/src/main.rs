use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use actgraph_core::eval::{self, CorruptionOp, Cutoff, Method};
use actgraph_core::nn;
use actgraph_core::ranker::{self, GbdtParams};
use actgraph_core::tensor::{self, LabeledDataset};
use actgraph_core::{baselines, graph};

#[derive(Parser)]
#[command(
    name = "actgraph",
    about = "Test-input prioritization for feed-forward networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a small feed-forward model on a labeled dataset
    TrainDnn(TrainArgs),
    /// Apply seeded image corruptions to a dataset
    Corrupt(CorruptArgs),
    /// Score test inputs with an unsupervised baseline
    Score(ScoreArgs),
    /// Fit the gradient-boosted ranker on a labeled validation set
    FitRanker(FitRankerArgs),
    /// Score test inputs with a fitted ranker
    Rank(RankArgs),
    /// Compute RAUC at the requested cutoffs from scores and fault flags
    Evaluate(EvaluateArgs),
    /// Export one case's activation graph as DOT or edge CSV
    ExportGraph(ExportGraphArgs),
    /// Run a full experiment from a JSON config
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Model architecture JSON
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output model path (.agmf)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Comma-separated ops, e.g. rotate:90,flip:h,translate:1:0
    #[arg(long, value_delimiter = ',')]
    ops: Vec<String>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out_inputs: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// gini, mcp, or dsa
    #[arg(long)]
    method: String,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    /// Training data for dsa embeddings
    #[arg(long)]
    train_inputs: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output scores CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitRankerArgs {
    /// actgraph or act
    #[arg(long)]
    method: String,
    #[arg(long)]
    model: PathBuf,
    /// Validation inputs with ground-truth labels
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = graph::DEFAULT_K)]
    k: usize,
    /// Cases sampled per class when balancing the trainset
    #[arg(long, default_value_t = 200)]
    balance: usize,
    #[arg(long, default_value_t = 100)]
    rounds: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output ranker JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RankArgs {
    /// actgraph or act; must match the fitted ranker's features
    #[arg(long)]
    method: String,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    ranker: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long, default_value_t = graph::DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output scores CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Scores CSV produced by score or rank
    #[arg(long)]
    scores: PathBuf,
    /// Labels file carrying fault flags; without flags, --model and
    /// --inputs are required to derive them from predictions
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Comma-separated cutoffs, e.g. 100,500,1000,all
    #[arg(long, value_delimiter = ',', default_value = "100,500,1000,all")]
    cutoffs: Vec<String>,
}

#[derive(Args)]
struct ExportGraphArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    /// Case index within the inputs tensor
    #[arg(long, default_value_t = 0)]
    case: usize,
    #[arg(long, default_value_t = graph::DEFAULT_K)]
    k: usize,
    /// Minimum adjacency weight for an edge to be emitted
    #[arg(long, default_value_t = 0.4)]
    threshold: f64,
    /// dot or csv
    #[arg(long, default_value = "dot")]
    format: String,
    /// Output path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Experiment config JSON
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed only when passed explicitly
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_json: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
}

/// exit 1: bad invocation; exit 2: the work itself failed.
enum AppError {
    Usage(String),
    Data(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for AppError {
    fn from(e: E) -> Self {
        AppError::Data(e.into())
    }
}

type AppResult = Result<(), AppError>;

fn usage(message: impl Into<String>) -> AppError {
    AppError::Usage(message.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version go to stdout with success; real usage errors to
            // stderr with exit 1 (clap's default would be 2)
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    let result = match cli.command {
        Command::TrainDnn(args) => train_dnn(args),
        Command::Corrupt(args) => corrupt(args),
        Command::Score(args) => score(args),
        Command::FitRanker(args) => fit_ranker(args),
        Command::Rank(args) => rank(args),
        Command::Evaluate(args) => evaluate(args),
        Command::ExportGraph(args) => export_graph(args),
        Command::Pipeline(args) => pipeline(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(AppError::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_dataset(inputs: &PathBuf, labels: &PathBuf) -> Result<LabeledDataset, AppError> {
    let x = tensor::read_tensor(inputs)?;
    let (y, flags) = tensor::read_labels(labels)?;
    Ok(LabeledDataset::new(x, y, flags)?)
}

fn train_dnn(args: TrainArgs) -> AppResult {
    let spec_json = std::fs::read_to_string(&args.spec)?;
    let spec: actgraph_core::ModelSpec = serde_json::from_str(&spec_json)?;
    let dataset = load_dataset(&args.inputs, &args.labels)?;
    if args.epochs == 0 {
        return Err(usage("--epochs must be at least 1"));
    }
    let (weights, history) = nn::train_sgd(
        &spec,
        &dataset.inputs,
        &dataset.labels,
        args.epochs,
        args.lr,
        args.seed,
    )?;
    nn::save_model(&spec, &weights, &args.out)?;
    eprintln!(
        "trained {} epochs, loss {:.6} -> {:.6}, model written to {}",
        args.epochs,
        history.first().copied().unwrap_or(f64::NAN),
        history.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn corrupt(args: CorruptArgs) -> AppResult {
    if args.ops.is_empty() {
        return Err(usage("--ops requires at least one op"));
    }
    let ops: Vec<CorruptionOp> = args
        .ops
        .iter()
        .map(|s| CorruptionOp::parse(s))
        .collect::<Result<_, _>>()
        .map_err(|e| usage(e.to_string()))?;
    let dataset = load_dataset(&args.inputs, &args.labels)?;
    let corrupted = eval::corrupt(&dataset, &ops, args.seed)?;
    tensor::write_tensor(&corrupted.inputs, &args.out_inputs)?;
    tensor::write_labels(
        &corrupted.labels,
        corrupted.flags.as_deref(),
        &args.out_labels,
    )?;
    eprintln!("corrupted {} cases", corrupted.len());
    Ok(())
}

fn score(args: ScoreArgs) -> AppResult {
    let method = Method::parse(&args.method).map_err(|e| usage(e.to_string()))?;
    if method.is_supervised() {
        return Err(usage(format!(
            "score handles unsupervised methods only; use fit-ranker/rank for {}",
            args.method
        )));
    }
    let (spec, weights) = nn::load_model(&args.model)?;
    let inputs = tensor::read_tensor(&args.inputs)?;
    let inference = eval::run_inference(&spec, &weights, &inputs, args.threads)?;
    let scores: Vec<f64> = match method {
        Method::Gini => baselines::deepgini_scores(&inference.probs)?,
        Method::Mcp => {
            let order = baselines::mcp_prioritize(&inference.probs)?;
            let n = order.len();
            let mut scores = vec![0.0; n];
            for (position, &idx) in order.iter().enumerate() {
                scores[idx] = (n - position) as f64 / n as f64;
            }
            scores
        }
        Method::Dsa => {
            let (ti, tl) = match (&args.train_inputs, &args.train_labels) {
                (Some(i), Some(l)) => (i, l),
                _ => {
                    return Err(usage(
                        "--method dsa requires --train-inputs and --train-labels",
                    ))
                }
            };
            let train = load_dataset(ti, tl)?;
            let train_inference =
                eval::run_inference(&spec, &weights, &train.inputs, args.threads)?;
            let store = baselines::EmbeddingStore::new(
                train_inference
                    .captures
                    .iter()
                    .map(eval::last_hidden_embedding)
                    .collect(),
                train.labels.clone(),
            )?;
            let embeddings: Vec<Vec<f64>> = inference
                .captures
                .iter()
                .map(eval::last_hidden_embedding)
                .collect();
            baselines::dsa_scores(&embeddings, &inference.predicted, &store)?
        }
        _ => unreachable!(),
    };
    tensor::write_scores_csv(&scores, &args.out)?;
    eprintln!("wrote {} scores to {}", scores.len(), args.out.display());
    Ok(())
}

fn extract_features(
    method: Method,
    spec: &actgraph_core::ModelSpec,
    weights: &actgraph_core::LayerWeights,
    inference: &eval::InferenceProducts,
    k: usize,
) -> Result<Vec<Vec<f64>>, AppError> {
    match method {
        Method::ActGraph => {
            let skeleton = graph::build_skeleton(spec, weights, k)?;
            inference
                .captures
                .iter()
                .map(|cap| graph::features_from_capture(&skeleton, cap).map_err(Into::into))
                .collect()
        }
        Method::Act => Ok(inference
            .probs
            .iter()
            .zip(&inference.captures)
            .map(|(p, cap)| baselines::act_features(p, &eval::last_hidden_embedding(cap)))
            .collect()),
        _ => Err(usage("fit-ranker/rank support actgraph or act")),
    }
}

fn fit_ranker(args: FitRankerArgs) -> AppResult {
    let method = Method::parse(&args.method).map_err(|e| usage(e.to_string()))?;
    if !method.is_supervised() {
        return Err(usage("fit-ranker supports --method actgraph or act"));
    }
    let (spec, weights) = nn::load_model(&args.model)?;
    let dataset = load_dataset(&args.inputs, &args.labels)?;
    let inference = eval::run_inference(&spec, &weights, &dataset.inputs, args.threads)?;
    let flags: Vec<u8> = inference
        .predicted
        .iter()
        .zip(&dataset.labels)
        .map(|(&p, &l)| (p != l) as u8)
        .collect();
    let features = extract_features(method, &spec, &weights, &inference, args.k)?;
    let trainset = ranker::balance_trainset(&features, &flags, args.balance, args.seed)?;
    let params = GbdtParams {
        num_rounds: args.rounds,
        seed: args.seed,
        ..GbdtParams::default()
    };
    let model = ranker::fit(&trainset, &params)?;
    ranker::save_ranker(&model, &args.out)?;
    eprintln!(
        "fitted {} trees on {} balanced cases, ranker written to {}",
        model.trees.len(),
        trainset.features.len(),
        args.out.display()
    );
    Ok(())
}

fn rank(args: RankArgs) -> AppResult {
    let method = Method::parse(&args.method).map_err(|e| usage(e.to_string()))?;
    if !method.is_supervised() {
        return Err(usage("rank supports --method actgraph or act"));
    }
    let (spec, weights) = nn::load_model(&args.model)?;
    let model = ranker::load_ranker(&args.ranker)?;
    let inputs = tensor::read_tensor(&args.inputs)?;
    let inference = eval::run_inference(&spec, &weights, &inputs, args.threads)?;
    let features = extract_features(method, &spec, &weights, &inference, args.k)?;
    let scores = ranker::score(&model, &features)?;
    tensor::write_scores_csv(&scores, &args.out)?;
    eprintln!("wrote {} scores to {}", scores.len(), args.out.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> AppResult {
    let scores = tensor::read_scores_csv(&args.scores)?;
    let (labels, stored_flags) = tensor::read_labels(&args.labels)?;
    let flags = match stored_flags {
        Some(flags) => flags,
        None => {
            let (model, inputs) = match (&args.model, &args.inputs) {
                (Some(m), Some(i)) => (m, i),
                _ => {
                    return Err(usage(
                        "labels carry no fault flags; pass --model and --inputs to derive them",
                    ))
                }
            };
            let (spec, weights) = nn::load_model(model)?;
            let x = tensor::read_tensor(inputs)?;
            let dataset = LabeledDataset::new(x, labels, None)?;
            eval::label_faults(&spec, &weights, &dataset)?
        }
    };
    if scores.len() != flags.len() {
        return Err(usage(format!(
            "{} scores but {} flags",
            scores.len(),
            flags.len()
        )));
    }
    let cutoffs: Vec<Cutoff> = args
        .cutoffs
        .iter()
        .map(|c| Cutoff::parse(c).ok_or_else(|| usage(format!("bad cutoff: {c}"))))
        .collect::<Result<_, _>>()?;
    if cutoffs.is_empty() {
        return Err(usage("--cutoffs requires at least one cutoff"));
    }
    let order = ranker::prioritize(&scores);
    for cutoff in cutoffs {
        let value = eval::rauc(&order, &flags, cutoff)?;
        println!("{},{:.6}", cutoff.label(), value);
    }
    Ok(())
}

fn export_graph(args: ExportGraphArgs) -> AppResult {
    let (spec, weights) = nn::load_model(&args.model)?;
    let inputs = tensor::read_tensor(&args.inputs)?;
    if args.case >= inputs.num_cases() {
        return Err(usage(format!(
            "--case {} out of range for {} cases",
            args.case,
            inputs.num_cases()
        )));
    }
    let case = actgraph_core::Tensor::new(inputs.case_shape(), inputs.case(args.case).to_vec())?;
    let (_, capture) = nn::forward(&spec, &weights, &case)?;
    let skeleton = graph::build_skeleton(&spec, &weights, args.k)?;
    let trace = graph::trace_activations(&capture, args.k)?;
    let activation_graph = graph::build_graph(&skeleton, &trace)?;
    let rendered = match args.format.as_str() {
        "dot" => graph::export_dot(&activation_graph, args.threshold)?,
        "csv" => graph::export_edge_csv(&activation_graph, args.threshold)?,
        other => return Err(usage(format!("--format must be dot or csv, got {other}"))),
    };
    match &args.out {
        Some(path) => std::fs::write(path, rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn pipeline(args: PipelineArgs) -> AppResult {
    let mut config = eval::read_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(threads) = args.threads {
        config.threads = threads;
    }
    let report = eval::run_experiment(&config)?;
    report.write_json(&args.out_json)?;
    report.write_rauc_csv(&args.out_csv)?;
    for (label, value) in &report.rauc {
        println!("{label},{value:.6}");
    }
    eprintln!(
        "{} cases, {} faults; report written to {} and {}",
        report.num_cases,
        report.num_faults,
        args.out_json.display(),
        args.out_csv.display()
    );
    Ok(())
}
