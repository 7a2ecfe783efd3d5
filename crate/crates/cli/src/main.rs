//! Command-line driver: generate synthetic two-modality datasets,
//! train hash models (full method or an ablation), encode datasets to
//! packed code files, evaluate cross-modal retrieval, and run the
//! acceptance suite.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data
//! error, 3 numeric failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dmh_core::acceptance::{self, AcceptanceConfig};
use dmh_core::codes::CodeSet;
use dmh_core::data::{
    generate_synthetic, load_dataset, make_semi_paired, save_dataset, split_query_retrieval,
    RelevanceOracle, SyntheticConfig,
};
use dmh_core::eval::{evaluate_direction, Direction, RetrievalReport};
use dmh_core::pipeline::{load_model, save_model, train_dmh, DmhConfig, OuterIterationLog};
use dmh_core::{DmhError, Result};

/// Code lengths the model file format and flags accept.
const VALID_BITS: [usize; 4] = [16, 32, 64, 128];

#[derive(Parser)]
#[command(
    name = "dmh",
    version,
    about = "Cross-modal hashing on semi-paired two-modality data",
    arg_required_else_help = true
)]
struct Cli {
    /// Worker threads for parallel sections (default: DMH_THREADS
    /// environment variable, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled two-modality dataset.
    Generate(GenerateArgs),
    /// Train a hash model on a dataset directory.
    Train(TrainArgs),
    /// Hash one modality of a dataset with a trained model.
    Encode(EncodeArgs),
    /// Score cross-modal retrieval from code files.
    Evaluate(EvaluateArgs),
    /// Run the self-checking acceptance suite.
    Acceptance(AcceptanceArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for the dataset files.
    #[arg(long)]
    out: PathBuf,
    /// Configuration file (flat TOML; flags override its values).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Objects to generate [default: 1200].
    #[arg(long)]
    n_total: Option<usize>,
    /// Modality-1 feature dimension [default: 64].
    #[arg(long)]
    d1: Option<usize>,
    /// Modality-2 feature dimension [default: 64].
    #[arg(long)]
    d2: Option<usize>,
    /// Latent clusters (= label classes) [default: 4].
    #[arg(long)]
    clusters: Option<usize>,
    /// Latent manifold dimension [default: 8].
    #[arg(long)]
    d_latent: Option<usize>,
    /// Observation noise standard deviation [default: 0.3].
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Generator seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Hold out this many objects as a query set: writes `db/` and
    /// `query/` dataset subdirectories instead of one flat dataset.
    #[arg(long, default_value_t = 0)]
    query_split: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (as written by `generate`).
    #[arg(long)]
    data: PathBuf,
    /// Configuration file (flat TOML; flags override its values).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the trained model.
    #[arg(long, default_value = "model.dmh")]
    model_out: PathBuf,
    /// Where to write the JSON-lines training log [default: log.jsonl
    /// next to the model].
    #[arg(long)]
    log_out: Option<PathBuf>,
    /// Code length in bits (16, 32, 64 or 128) [default: 16].
    #[arg(long)]
    bits: Option<usize>,
    /// Fraction of objects observed in both modalities [default: 1.0].
    #[arg(long)]
    pairing_ratio: Option<f64>,
    /// full, zero (no neighborhood completion), pca (no divergence
    /// codes) or fix (no feature refresh) [default: full].
    #[arg(long)]
    variant: Option<String>,
    /// Master training seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Local-consistency weight of the shared embedding [default: 0.1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Embedding-norm regularization [default: 0.01].
    #[arg(long)]
    eta: Option<f64>,
    /// Quantization weight of the code objective [default: 1e-4].
    #[arg(long)]
    gamma: Option<f64>,
    /// Neighbors per object [default: 3].
    #[arg(long)]
    k: Option<usize>,
    /// Shared embedding dimension [default: smallest feature
    /// dimension the training run will see].
    #[arg(long)]
    d: Option<usize>,
    /// Encoder epoch budget per round [default: 30].
    #[arg(long)]
    epochs: Option<usize>,
    /// Outer alternation rounds [default: 5].
    #[arg(long)]
    outer_iters: Option<usize>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory to encode.
    #[arg(long)]
    data: PathBuf,
    /// Which modality's features to hash (1 or 2).
    #[arg(long)]
    modality: u8,
    /// Output code file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Modality-1 codes of the query set.
    #[arg(long)]
    query_codes_m1: Option<PathBuf>,
    /// Modality-2 codes of the query set.
    #[arg(long)]
    query_codes_m2: Option<PathBuf>,
    /// Modality-1 codes of the database.
    #[arg(long)]
    db_codes_m1: Option<PathBuf>,
    /// Modality-2 codes of the database.
    #[arg(long)]
    db_codes_m2: Option<PathBuf>,
    /// Dataset directory holding the query labels.
    #[arg(long)]
    query_data: PathBuf,
    /// Dataset directory holding the database labels.
    #[arg(long)]
    db_data: PathBuf,
    /// Output report (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Directory for the CSV curves [default: the report's directory].
    #[arg(long)]
    csv_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AcceptanceArgs {
    /// Experiment seeds (comma-separated or repeated).
    #[arg(long = "seed", required = true, value_delimiter = ',', num_args = 1..)]
    seeds: Vec<u64>,
}

/// Flat configuration file. Every key is optional and mirrors a CLI
/// flag; explicit flags win. Unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    // Synthetic data.
    n_total: Option<usize>,
    d1: Option<usize>,
    d2: Option<usize>,
    n_clusters: Option<usize>,
    d_latent: Option<usize>,
    noise_sigma: Option<f64>,
    // Split and run.
    pairing_ratio: Option<f64>,
    bits: Option<usize>,
    variant: Option<String>,
    seed: Option<u64>,
    outer_iters: Option<usize>,
    outer_tol: Option<f64>,
    // Shared-embedding stage.
    d: Option<usize>,
    k: Option<usize>,
    lambda: Option<f64>,
    eta: Option<f64>,
    cle_iters: Option<usize>,
    cle_tol: Option<f64>,
    // Code-learning stage.
    gamma: Option<f64>,
    gbe_learning_rate: Option<f64>,
    gbe_iters: Option<usize>,
    gbe_block: Option<usize>,
    // Encoder stage.
    lr1: Option<f64>,
    lr2: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    hidden_dims1: Option<Vec<usize>>,
    hidden_dims2: Option<Vec<usize>>,
    feature_layer: Option<usize>,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let raw = fs::read_to_string(path)
            .map_err(|e| DmhError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&raw).map_err(|e| DmhError::Config(format!("{}: {e}", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let usage_ok =
                matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if usage_ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Generate(args) => cmd_generate(args)?,
        Command::Train(args) => cmd_train(args)?,
        Command::Encode(args) => cmd_encode(args)?,
        Command::Evaluate(args) => cmd_evaluate(args)?,
        Command::Acceptance(args) => return cmd_acceptance(args),
    }
    Ok(ExitCode::SUCCESS)
}

/// Resolve the worker-thread count (flag, then DMH_THREADS, then the
/// rayon default of all cores) and size the global pool accordingly.
fn init_threads(flag: Option<usize>) -> Result<()> {
    let from_env = match std::env::var("DMH_THREADS") {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| {
            DmhError::Config(format!("DMH_THREADS must be a positive integer, got {v:?}"))
        })?),
        Err(_) => None,
    };
    let Some(n) = flag.or(from_env) else {
        return Ok(());
    };
    if n == 0 {
        return Err(DmhError::Config("thread count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| DmhError::Config(format!("thread pool: {e}")))
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let file = RunConfig::load(args.config.as_deref())?;
    let defaults = SyntheticConfig::default();
    let config = SyntheticConfig {
        n_total: args.n_total.or(file.n_total).unwrap_or(defaults.n_total),
        d_latent: args.d_latent.or(file.d_latent).unwrap_or(defaults.d_latent),
        d1: args.d1.or(file.d1).unwrap_or(defaults.d1),
        d2: args.d2.or(file.d2).unwrap_or(defaults.d2),
        n_clusters: args.clusters.or(file.n_clusters).unwrap_or(defaults.n_clusters),
        noise_sigma: args.noise_sigma.or(file.noise_sigma).unwrap_or(defaults.noise_sigma),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
    };
    let dataset = generate_synthetic(&config)?;
    if args.query_split == 0 {
        save_dataset(&dataset, &args.out)?;
        println!(
            "generated {} objects ({}+{} dims, {} clusters, seed {}) -> {}",
            dataset.n(),
            dataset.d1(),
            dataset.d2(),
            config.n_clusters,
            config.seed,
            args.out.display()
        );
    } else {
        let (query, db) = split_query_retrieval(&dataset, args.query_split, config.seed)?;
        save_dataset(&db, &args.out.join("db"))?;
        save_dataset(&query, &args.out.join("query"))?;
        println!(
            "generated {} database + {} query objects ({}+{} dims, {} clusters, seed {}) -> {}",
            db.n(),
            query.n(),
            dataset.d1(),
            dataset.d2(),
            config.n_clusters,
            config.seed,
            args.out.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// First record of the training log: the run-level facts.
#[derive(Serialize)]
struct RunRecord<'a> {
    record: &'static str,
    n: usize,
    n_m: usize,
    n_1: usize,
    n_2: usize,
    bits: usize,
    variant: String,
    pairing_ratio: f64,
    seed: u64,
    model_file: &'a str,
}

/// Per-round record wrapping the pipeline's log entry.
#[derive(Serialize)]
struct RoundRecord<'a> {
    record: &'static str,
    #[serde(flatten)]
    round: &'a OuterIterationLog,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = RunConfig::load(args.config.as_deref())?;
    let dataset = load_dataset(&args.data)?;

    let mut config = DmhConfig::default();
    config.c = args.bits.or(file.bits).unwrap_or(config.c);
    if !VALID_BITS.contains(&config.c) {
        return Err(DmhError::Config(format!(
            "bits must be one of {VALID_BITS:?}, got {}",
            config.c
        )));
    }
    if let Some(v) = args.variant.or(file.variant.clone()) {
        config.variant = v.parse()?;
    }
    config.seed = args.seed.or(file.seed).unwrap_or(config.seed);
    config.outer_iters = args.outer_iters.or(file.outer_iters).unwrap_or(config.outer_iters);
    config.outer_tol = file.outer_tol.unwrap_or(config.outer_tol);
    config.cle.lambda = args.lambda.or(file.lambda).unwrap_or(config.cle.lambda);
    config.cle.eta = args.eta.or(file.eta).unwrap_or(config.cle.eta);
    config.cle.k = args.k.or(file.k).unwrap_or(config.cle.k);
    config.cle.max_iters = file.cle_iters.unwrap_or(config.cle.max_iters);
    config.cle.tol = file.cle_tol.unwrap_or(config.cle.tol);
    config.gbe.gamma = args.gamma.or(file.gamma).unwrap_or(config.gbe.gamma);
    config.gbe.learning_rate = file.gbe_learning_rate.unwrap_or(config.gbe.learning_rate);
    config.gbe.max_iters = file.gbe_iters.unwrap_or(config.gbe.max_iters);
    config.gbe.row_subsample = file.gbe_block.map(Some).unwrap_or(config.gbe.row_subsample);
    config.dam.lr1 = file.lr1.unwrap_or(config.dam.lr1);
    config.dam.lr2 = file.lr2.unwrap_or(config.dam.lr2);
    config.dam.batch_size = file.batch_size.unwrap_or(config.dam.batch_size);
    config.dam.epochs = args.epochs.or(file.epochs).unwrap_or(config.dam.epochs);
    if let Some(h) = file.hidden_dims1 {
        config.hidden_dims1 = h;
    }
    if let Some(h) = file.hidden_dims2 {
        config.hidden_dims2 = h;
    }
    config.feature_layer = file.feature_layer.or(config.feature_layer);
    config.cle.d = match args.d.or(file.d) {
        Some(d) => d,
        // Largest dimension valid in every feature space the run sees.
        None => dataset
            .d1()
            .min(dataset.d2())
            .min(feature_dim(&config.hidden_dims1, config.feature_layer))
            .min(feature_dim(&config.hidden_dims2, config.feature_layer)),
    };

    let pairing_ratio = args.pairing_ratio.or(file.pairing_ratio).unwrap_or(1.0);
    let split = make_semi_paired(&dataset, pairing_ratio, config.cle.k, config.seed)?;
    let x2 = split.shuffled_x2(&dataset.x2)?;

    let model = train_dmh(&dataset.x1, &x2, &split, &config)?;
    save_model(&model, &args.model_out)?;

    let log_out = args.log_out.unwrap_or_else(|| {
        args.model_out.parent().unwrap_or(Path::new(".")).join("log.jsonl")
    });
    let mut log = fs::File::create(&log_out).map(std::io::BufWriter::new)?;
    let header = RunRecord {
        record: "run",
        n: split.n(),
        n_m: split.n_m(),
        n_1: split.n_1(),
        n_2: split.n_2(),
        bits: config.c,
        variant: config.variant.to_string(),
        pairing_ratio,
        seed: config.seed,
        model_file: &args.model_out.display().to_string(),
    };
    writeln!(log, "{}", serde_json::to_string(&header)?)?;
    for round in &model.log {
        writeln!(log, "{}", serde_json::to_string(&RoundRecord { record: "round", round })?)?;
    }
    log.flush()?;

    let last = model.log.last().expect("training always logs at least one round");
    println!(
        "trained {} variant: {} rounds, objectives {:.4}/{:.4}/{:.4}; wrote {} and {}",
        config.variant,
        model.log.len(),
        last.l1,
        last.l2,
        last.l3,
        args.model_out.display(),
        log_out.display()
    );
    Ok(())
}

/// Width of the layer whose activations refresh the features.
fn feature_dim(hidden: &[usize], feature_layer: Option<usize>) -> usize {
    let idx = feature_layer.unwrap_or(hidden.len().saturating_sub(1));
    hidden.get(idx).copied().unwrap_or(usize::MAX)
}

// ---------------------------------------------------------------------------
// encode
// ---------------------------------------------------------------------------

fn cmd_encode(args: EncodeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let dataset = load_dataset(&args.data)?;
    let codes = match args.modality {
        1 => model.hash1(&dataset.x1)?,
        2 => model.hash2(&dataset.x2)?,
        m => {
            return Err(DmhError::Config(format!("modality must be 1 or 2, got {m}")));
        }
    };
    codes.save(&args.out)?;
    println!(
        "encoded {} objects (modality {}) to {}-bit codes -> {}",
        codes.n(),
        args.modality,
        codes.c(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Report file: one entry per evaluated direction.
#[derive(Serialize)]
struct EvaluationReport {
    bits: usize,
    n_queries: usize,
    n_database: usize,
    directions: Vec<RetrievalReport>,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let load = |path: &PathBuf| CodeSet::load(path);
    let q1 = args.query_codes_m1.as_ref().map(load).transpose()?;
    let q2 = args.query_codes_m2.as_ref().map(load).transpose()?;
    let d1 = args.db_codes_m1.as_ref().map(load).transpose()?;
    let d2 = args.db_codes_m2.as_ref().map(load).transpose()?;

    let pairs: Vec<(Direction, &CodeSet, &CodeSet)> = [
        (Direction::M1ToM2, q1.as_ref(), d2.as_ref()),
        (Direction::M2ToM1, q2.as_ref(), d1.as_ref()),
    ]
    .into_iter()
    .filter_map(|(dir, q, d)| Some((dir, q?, d?)))
    .collect();
    if pairs.is_empty() {
        return Err(DmhError::Config(
            "no direction to evaluate: need query and database codes of opposite modalities \
             (query m1 + database m2, or query m2 + database m1)"
                .into(),
        ));
    }

    let labels = |dir: &Path, what: &str| -> Result<ndarray::Array2<u8>> {
        load_dataset(dir)?.labels.ok_or_else(|| {
            DmhError::Data(format!("{what} dataset {} has no labels", dir.display()))
        })
    };
    let query_labels = labels(&args.query_data, "query")?;
    let db_labels = labels(&args.db_data, "database")?;
    let oracle = RelevanceOracle::new(&query_labels, &db_labels)?;

    let mut directions = Vec::with_capacity(pairs.len());
    for &(dir, q, d) in &pairs {
        if q.c() != d.c() {
            return Err(DmhError::shape(
                format!("{} bits", q.c()),
                format!("{} bits", d.c()),
                format!("query and database codes for {dir}"),
            ));
        }
        if q.n() != query_labels.nrows() || d.n() != db_labels.nrows() {
            return Err(DmhError::shape(
                format!("{}x{} codes", query_labels.nrows(), db_labels.nrows()),
                format!("{}x{}", q.n(), d.n()),
                "code files must be row-aligned with the labeled datasets",
            ));
        }
        let map_at: Vec<usize> = [10, 50].into_iter().filter(|&n| n <= d.n()).collect();
        directions.push(evaluate_direction(dir, q, d, &oracle, &map_at, 20)?);
    }

    let (q_any, d_any) = (pairs[0].1, pairs[0].2);
    let report = EvaluationReport {
        bits: d_any.c(),
        n_queries: q_any.n(),
        n_database: d_any.n(),
        directions,
    };
    fs::write(&args.out, serde_json::to_vec_pretty(&report)?)?;

    let csv_dir = args.csv_dir.unwrap_or_else(|| {
        match args.out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        }
    });
    fs::create_dir_all(&csv_dir)?;
    for r in &report.directions {
        let tag = match r.direction {
            Direction::M1ToM2 => "m1_to_m2",
            Direction::M2ToM1 => "m2_to_m1",
        };
        fs::write(csv_dir.join(format!("topn_{tag}.csv")), r.topn_csv())?;
        fs::write(csv_dir.join(format!("pr_{tag}.csv")), r.pr_csv())?;
        println!("{}: MAP {:.4} ({} queries, {} database)", r.direction, r.map_full, report.n_queries, report.n_database);
    }
    println!("wrote {} and curves in {}", args.out.display(), csv_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// acceptance
// ---------------------------------------------------------------------------

fn cmd_acceptance(args: AcceptanceArgs) -> Result<ExitCode> {
    let config = AcceptanceConfig { seeds: args.seeds, ..AcceptanceConfig::default() };
    let results = acceptance::run_all(&config)?;
    let mut failed = 0;
    for r in &results {
        println!("{r}");
        if !r.passed {
            failed += 1;
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed,
        results.len()
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
