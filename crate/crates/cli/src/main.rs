//! `hodgnn` command-line driver.
//!
//! Machine-readable results go to stdout as JSON lines; logs go to stderr.
//! Exit codes: 0 success, 1 computation or check failure, 2 invalid input.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hodgnn::deriv::{compute_all, DerivConfig};
use hodgnn::graph::{count_substructure_per_node, gen_counting_dataset, load_dataset, load_graph_json, save_dataset, Pattern, Task};
use hodgnn::hod::HodSpec;
use hodgnn::mpnn::load_model_json;
use hodgnn::train::{normalized_mae, save_checkpoint, train, Checkpoint, TrainConfig};
use hodgnn::verify;
use hodgnn::Error;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser)]
#[command(name = "hodgnn", version, about = "Sparse higher-order derivatives of message-passing networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the derivative tensors of a base network on a graph.
    Derive(DeriveArgs),
    /// Run one of the verification suites.
    Verify {
        #[command(subcommand)]
        mode: VerifyMode,
    },
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Measure derivative-tensor sparsity.
    Bench {
        #[command(subcommand)]
        kind: BenchKind,
    },
    /// Count cycles through each node.
    Count {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        pattern: String,
    },
    /// Compare engine-derived random-walk encodings with the direct ones.
    RwseCheck {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        steps: usize,
    },
    /// Write a synthetic cycle-counting node-regression dataset.
    Dataset(DatasetArgs),
}

#[derive(Args)]
struct DeriveArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    order: usize,
    /// Dump file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump every layer, each preceded by a `{"layer": t}` header line.
    #[arg(long)]
    dump_per_layer: bool,
}

#[derive(Subcommand)]
enum VerifyMode {
    Fd {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 25)]
        trials: usize,
        #[arg(long, default_value_t = 3)]
        order: usize,
    },
    Rwse {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        steps: usize,
    },
    Taylor {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        order: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    Grad {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// graph-regression, node-regression or graph-classification.
    #[arg(long)]
    task: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Directory for `history.csv` and `checkpoint.json`.
    #[arg(long, default_value = "hodgnn-run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum BenchKind {
    Sparsity {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        p: f64,
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "cycle3")]
    pattern: String,
    #[arg(long, default_value_t = 200)]
    graphs: usize,
    #[arg(long, default_value_t = 6)]
    min_nodes: usize,
    #[arg(long, default_value_t = 15)]
    max_nodes: usize,
    #[arg(long, default_value_t = 0.3)]
    p: f64,
    #[arg(long)]
    seed: u64,
}

/// Model architecture plus optimizer settings; the seed comes from the
/// command line.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: HodSpec,
    training: serde_json::Value,
}

enum Failure {
    Invalid(String),
    Failed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Failed(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Failed(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn emit<T: Serialize>(value: &T) -> io::Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    out.write_all(b"\n")
}

fn io_error(path: &Path, e: io::Error) -> Failure {
    Failure::Invalid(format!("{}: {e}", path.display()))
}

fn cmd_derive(args: &DeriveArgs) -> CmdResult {
    let g = load_graph_json(&args.graph)?;
    let model = load_model_json(&args.model)?;
    let cfg = DerivConfig::new(args.k, args.order)?;
    let start = Instant::now();
    let d = compute_all(&model, &g, &cfg)?;
    let seconds = start.elapsed().as_secs_f64();

    let mut sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(BufWriter::new(File::create(path).map_err(|e| io_error(path, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    if args.dump_per_layer {
        for (t, layer) in d.layers.iter().enumerate() {
            serde_json::to_writer(&mut sink, &json!({"layer": t, "nnz": layer.nnz()})).map_err(io::Error::from)?;
            sink.write_all(b"\n")?;
            layer.write_json_lines(&mut sink)?;
        }
    } else {
        d.node.write_json_lines(&mut sink)?;
    }
    sink.flush()?;
    drop(sink);

    let stats = d.node.stats();
    emit(&json!({"nnz": stats.total, "s_max": stats.max, "seconds": seconds}))?;
    Ok(())
}

fn report<T: Serialize>(results: &[verify::TrialResult<T>]) -> io::Result<usize> {
    for r in results {
        emit(r)?;
    }
    Ok(results.iter().filter(|r| !r.pass).count())
}

fn cmd_verify(mode: &VerifyMode) -> CmdResult {
    let passed = match *mode {
        VerifyMode::Fd { seed, trials, order } => report(&verify::fd_suite(seed, trials, order)?)? == 0,
        VerifyMode::Rwse { ref graph, steps } => {
            let g = load_graph_json(graph)?;
            let deviation = verify::rwse_deviation(&g, steps)?;
            let pass = deviation < 1e-10;
            emit(&json!({"check": "rwse", "pass": pass, "steps": steps, "max_abs_error": deviation}))?;
            pass
        }
        VerifyMode::Taylor { epsilon, order, seed, trials } => {
            let results = verify::taylor_suite(seed, trials, epsilon, order)?;
            report(&results)?;
            let accurate = results.iter().filter(|r| r.pass).count();
            let improved = results.iter().all(|r| order <= 1 || r.detail.error < r.detail.error_first);
            let pass = improved && accurate as f64 >= 0.95 * results.len() as f64;
            emit(&json!({"check": "taylor-suite", "pass": pass, "accurate": accurate, "trials": results.len()}))?;
            pass
        }
        VerifyMode::Grad { seed, trials } => report(&verify::grad_suite(seed, trials)?)? == 0,
    };
    if passed {
        Ok(())
    } else {
        Err(Failure::Failed("verification failed".into()))
    }
}

fn cmd_train(args: &TrainArgs) -> CmdResult {
    let task: Task = serde_json::from_value(json!(args.task)).map_err(|_| Failure::Invalid(format!("unknown task '{}'", args.task)))?;
    let data = load_dataset(&args.dataset, task)?;
    let text = std::fs::read_to_string(&args.config).map_err(|e| io_error(&args.config, e))?;
    let run: RunConfig = serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", args.config.display())))?;
    let mut training = run.training;
    match training.as_object_mut() {
        Some(obj) => {
            obj.insert("seed".into(), json!(args.seed));
        }
        None => return Err(Failure::Invalid("\"training\" must be an object".into())),
    }
    let cfg: TrainConfig = serde_json::from_value(training).map_err(|e| Failure::Invalid(format!("training config: {e}")))?;
    cfg.validate(task)?;

    let model = run.model.build(&mut ChaCha8Rng::seed_from_u64(args.seed))?;
    info!("training {} parameters on {} graphs", model.num_params(), data.graphs.len());
    let history = train(&model, &data, &cfg)?;

    std::fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    history.write_csv(args.out.join("history.csv"))?;
    save_checkpoint(&history.best, args.out.join("checkpoint.json"))?;
    let best: &Checkpoint = &history.best;

    let test = &data.split.test;
    let test_loss = hodgnn::train::evaluate(&best.model, &data, test, cfg.loss)?;
    let mut line = json!({"split": "test", "loss": test_loss, "best_epoch": best.epoch});
    if task != Task::GraphClassification && !test.is_empty() {
        line["normalized_mae"] = json!(normalized_mae(&best.model, &data, test)?);
    }
    emit(&line)?;
    Ok(())
}

fn cmd_bench(kind: &BenchKind) -> CmdResult {
    let BenchKind::Sparsity { n, p, layers, k, order, seeds } = *kind;
    if !(0.0..=1.0).contains(&p) {
        return Err(Failure::Invalid(format!("edge probability {p} outside [0, 1]")));
    }
    let bench = verify::sparsity_bench(n, p, layers, k, order, seeds)?;
    for r in &bench.rows {
        let bound = bench.fitted_c * r.reference;
        emit(&json!({
            "seed": r.seed,
            "layer": r.layer,
            "s_max": r.s_max,
            "nnz": r.nnz,
            "bound": bound,
            "violation": r.s_max as f64 > bound,
        }))?;
    }
    emit(&json!({
        "fitted_c": bench.fitted_c,
        "prior_c": bench.prior_c,
        "violations": bench.violations,
        "non_monotone": bench.non_monotone,
        "pass": bench.passed(),
    }))?;
    if bench.passed() {
        Ok(())
    } else {
        Err(Failure::Failed("sparsity bound violated".into()))
    }
}

fn cmd_count(graph: &Path, pattern: &str) -> CmdResult {
    let pattern: Pattern = pattern.parse()?;
    let g = load_graph_json(graph)?;
    let per_node = count_substructure_per_node(&g, pattern);
    let total = per_node.iter().sum::<u64>() / pattern.length() as u64;
    emit(&json!({"pattern": pattern_name(pattern), "total": total, "per_node": per_node}))?;
    Ok(())
}

fn pattern_name(p: Pattern) -> &'static str {
    match p {
        Pattern::Cycle3 => "cycle3",
        Pattern::Cycle4 => "cycle4",
        Pattern::Cycle5 => "cycle5",
        Pattern::Cycle6 => "cycle6",
    }
}

fn cmd_rwse_check(graph: &Path, steps: usize) -> CmdResult {
    let g = load_graph_json(graph)?;
    let deviation = verify::rwse_deviation(&g, steps)?;
    emit(&json!({"steps": steps, "max_abs_error": deviation}))?;
    Ok(())
}

fn cmd_dataset(args: &DatasetArgs) -> CmdResult {
    let pattern: Pattern = args.pattern.parse()?;
    let data = gen_counting_dataset(args.graphs, args.min_nodes, args.max_nodes, args.p, pattern, args.seed)?;
    save_dataset(&data, &args.out)?;
    emit(
        &json!({"graphs": data.graphs.len(), "train": data.split.train.len(), "val": data.split.val.len(), "test": data.split.test.len()}),
    )?;
    Ok(())
}

fn configure_threads() -> CmdResult {
    let Ok(value) = std::env::var("HODGNN_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Failure::Invalid(format!("HODGNN_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| Failure::Failed(e.to_string()))
}

fn run(cli: &Cli) -> CmdResult {
    configure_threads()?;
    match &cli.command {
        Command::Derive(args) => cmd_derive(args),
        Command::Verify { mode } => cmd_verify(mode),
        Command::Train(args) => cmd_train(args),
        Command::Bench { kind } => cmd_bench(kind),
        Command::Count { graph, pattern } => cmd_count(graph, pattern),
        Command::RwseCheck { graph, steps } => cmd_rwse_check(graph, *steps),
        Command::Dataset(args) => cmd_dataset(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
