mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use magcl::augment::Strategies;
use magcl::checkpoint::{load_embeddings, save_checkpoint, save_embeddings, save_embeddings_csv};
use magcl::config::{Precision, TrainConfig};
use magcl::dataset::{load_dataset, Dataset, LoadOptions, Splits};
use magcl::encoder::Activation;
use magcl::eval::{kmeans_nmi, linear_probe, random_split, EvalReport, ProbeConfig};
use magcl::gradcheck::{check_full_model, InstanceSpec};
use magcl::graph::build_filter;
use magcl::rng::{indexed_substream, Stream};
use magcl::spectral;
use magcl::trainer::{embed, train, EpochLog};
use magcl::{Error, Matrix, Real};

use manifest::{fingerprint, version, DatasetRef, RunManifest, StageOutputs};

#[derive(Parser)]
#[command(name = "magcl", version, about = "Graph contrastive learning with model augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write checkpoint, embeddings, log and manifest.
    Train(TrainArgs),
    /// Linear-probe accuracy of saved embeddings.
    Eval(EvalArgs),
    /// k-means NMI of saved embeddings.
    Cluster(ClusterArgs),
    /// Filter spectrum and optimal component selection for two depths.
    Spectral(SpectralArgs),
    /// Finite-difference check of full-model gradients on random instances.
    Gradcheck(GradcheckArgs),
    /// Train and probe every requested strategy combination.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigSource {
    /// JSON training config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in settings: cora, citeseer, pubmed, coauthor-cs, amazon-photo, amazon-computers.
    #[arg(long)]
    preset: Option<String>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigSource {
    fn load(&self) -> magcl::Result<TrainConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => TrainConfig::load(path)?,
            (None, Some(name)) => TrainConfig::preset(name)?,
            (None, None) => return Err(Error::Config("one of --config or --preset is required".into())),
        };
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (edges.tsv, features.csv, labels.txt, splits.json).
    #[arg(long)]
    data: PathBuf,
    /// Scale feature rows to unit L1 norm.
    #[arg(long)]
    row_normalize: bool,
}

impl DataArgs {
    fn load(&self) -> magcl::Result<Dataset> {
        load_dataset(
            &self.data,
            LoadOptions {
                row_normalize: self.row_normalize,
            },
        )
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingFormat {
    Bin,
    Csv,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "bin")]
    format: EmbeddingFormat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitMode {
    Public,
    Random,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, default_value_t = 0.01)]
    probe_lr: f64,
    #[arg(long, default_value_t = 0.0)]
    probe_weight_decay: f64,
    #[arg(long, default_value_t = 1000)]
    probe_steps: usize,
    /// Standardize embedding columns before the probe.
    #[arg(long)]
    standardize: bool,
}

impl ProbeArgs {
    fn config(&self, runs: usize) -> ProbeConfig {
        ProbeConfig {
            lr: self.probe_lr,
            weight_decay: self.probe_weight_decay,
            max_steps: self.probe_steps,
            num_runs: runs,
            standardize: self.standardize,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Embedding file (MAEB).
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "public")]
    splits: SplitMode,
    /// Number of probe runs; random mode draws a fresh split per run.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Base seed for random splits.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    probe: ProbeArgs,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SpectralArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.5)]
    pi: f64,
    #[arg(long = "L", default_value_t = 1)]
    l: u32,
    #[arg(long = "L2", default_value_t = 2)]
    l2: u32,
    #[arg(long, default_value_t = 1)]
    dout: usize,
    /// Write `k,lambda_k,score_k` rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of nodes per random instance.
    #[arg(long, default_value_t = 6)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated combinations such as `base,A,R,S,A+R,A+S,R+S,A+R+S`.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Training seeds per combination (0..n).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Keep per-run artifacts under this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    probe: ProbeArgs,
}

/// Failure with its process exit code: 2 config, 3 data, 1 anything else.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = classify(&error);
        Failure { code, error }
    }
}

fn classify(error: &anyhow::Error) -> u8 {
    for cause in error.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.root() {
                Error::Config(_) => 2,
                Error::Data { .. } | Error::Corrupt { .. } => 3,
                _ => 1,
            };
        }
    }
    1
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        error: Error::Config(msg.into()).into(),
    }
}

fn data_error(path: &Path, msg: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        error: Error::Data {
            file: path.to_path_buf(),
            line: None,
            msg: msg.into(),
        }
        .into(),
    }
}

/// Joins the cause chain, skipping causes already quoted by their parent.
fn render(error: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in error.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Spectral(a) => cmd_spectral(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", render(&f.error));
            ExitCode::from(f.code)
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

struct RunPaths {
    checkpoint: PathBuf,
    embeddings: PathBuf,
    log: PathBuf,
}

impl RunPaths {
    fn new(dir: &Path, format: EmbeddingFormat) -> Self {
        let embeddings = match format {
            EmbeddingFormat::Csv => dir.join("embeddings.csv"),
            _ => dir.join("embeddings.maeb"),
        };
        Self {
            checkpoint: dir.join("checkpoint.mawt"),
            embeddings,
            log: dir.join("train_log.jsonl"),
        }
    }
}

/// Trains one model, streaming the log, and writes checkpoint and
/// embeddings. Returns the embeddings.
fn run_training<T: Real>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    paths: &RunPaths,
    format: EmbeddingFormat,
) -> Result<Matrix<T>> {
    let log_file = File::create(&paths.log).with_context(|| format!("creating {}", paths.log.display()))?;
    let mut log_writer = BufWriter::new(log_file);
    let output = train::<T>(dataset, cfg, |e: &EpochLog| -> magcl::Result<()> {
        let line = serde_json::to_string(e).expect("log entry serializes");
        writeln!(log_writer, "{line}")
            .and_then(|_| log_writer.flush())
            .map_err(|err| Error::Internal(format!("writing training log: {err}")))?;
        if e.epoch == 1 || e.epoch % 50 == 0 || e.epoch == cfg.epochs {
            log::info!(
                "epoch {:>5}  loss {:.4}  align {:.4}  L {} L2 {}  {:.2}s",
                e.epoch, e.loss, e.align, e.l, e.l2, e.seconds
            );
        }
        Ok(())
    })?;
    save_checkpoint(&output.model, &paths.checkpoint)?;
    let emb = embed(&output.model, dataset, cfg)?;
    match format {
        EmbeddingFormat::Bin => save_embeddings(&emb, &paths.embeddings)?,
        EmbeddingFormat::Csv => save_embeddings_csv(&emb, &paths.embeddings)?,
        EmbeddingFormat::Both => {
            save_embeddings(&emb, &paths.embeddings)?;
            save_embeddings_csv(&emb, &paths.embeddings.with_extension("csv"))?;
        }
    }
    Ok(emb)
}

fn train_any(dataset: &Dataset, cfg: &TrainConfig, paths: &RunPaths, format: EmbeddingFormat) -> Result<Matrix<f64>> {
    Ok(match cfg.precision {
        Precision::Single => run_training::<f32>(dataset, cfg, paths, format)?.cast(),
        Precision::Double => run_training::<f64>(dataset, cfg, paths, format)?,
    })
}

fn make_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let mut cfg = args.source.load()?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    magcl::augment::ArchSampler::new(cfg.sampler_config())?;
    let dataset = args.data.load()?;
    make_dir(&args.out)?;
    let paths = RunPaths::new(&args.out, args.format);
    let manifest = RunManifest {
        tool: "magcl",
        version: version(),
        command: "train".into(),
        config: cfg.clone(),
        dataset: DatasetRef {
            path: args.data.data.clone(),
            sha256: fingerprint(&args.data.data)?,
        },
        row_normalize: args.data.row_normalize,
        seeds: vec![cfg.seed],
        outputs: vec![StageOutputs {
            label: cfg.strategies.label(),
            seed: cfg.seed,
            checkpoint: paths.checkpoint.clone(),
            embeddings: paths.embeddings.clone(),
            log: paths.log.clone(),
        }],
    };
    manifest.write(&args.out.join("manifest.json"))?;
    let emb = train_any(&dataset, &cfg, &paths, args.format)?;
    log::info!(
        "wrote {}x{} embeddings to {}",
        emb.rows(),
        emb.cols(),
        paths.embeddings.display()
    );
    Ok(())
}

fn check_rows(emb: &Matrix<f32>, dataset: &Dataset, path: &Path) -> CliResult {
    if emb.rows() != dataset.num_nodes() {
        return Err(data_error(
            path,
            format!("{} embedding rows but the dataset has {} nodes", emb.rows(), dataset.num_nodes()),
        ));
    }
    Ok(())
}

fn probe_runs(
    emb: &Matrix<f64>,
    dataset: &Dataset,
    mode: SplitMode,
    runs: usize,
    seed: u64,
    probe: &ProbeConfig,
) -> Result<Vec<f64>> {
    (0..runs as u64)
        .map(|r| {
            let splits: Splits = match mode {
                SplitMode::Public => dataset.splits.clone(),
                SplitMode::Random => {
                    random_split(dataset.num_nodes(), &mut indexed_substream(seed, Stream::Split, r))?
                }
            };
            Ok(linear_probe(emb, &dataset.labels, &splits, probe)?.test_accuracy)
        })
        .collect()
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    if args.seeds == 0 {
        return Err(config_error("--seeds must be at least 1"));
    }
    let dataset = args.data.load()?;
    let emb = load_embeddings(&args.embeddings)?;
    check_rows(&emb, &dataset, &args.embeddings)?;
    let probe = args.probe.config(args.seeds);
    let acc = probe_runs(&emb.cast(), &dataset, args.splits, args.seeds, args.seed, &probe)?;
    print_json(&EvalReport::from_accuracies(acc))
}

#[derive(Serialize)]
struct ClusterReport {
    nmi: f64,
    runs: usize,
    k: usize,
}

fn cmd_cluster(args: ClusterArgs) -> CliResult {
    let dataset = args.data.load()?;
    let emb = load_embeddings(&args.embeddings)?;
    check_rows(&emb, &dataset, &args.embeddings)?;
    let k = dataset.num_classes;
    let nmi = kmeans_nmi(&emb, &dataset.labels, k, args.runs, args.seed)?;
    print_json(&ClusterReport {
        nmi,
        runs: args.runs,
        k,
    })
}

#[derive(Serialize)]
struct SpectralOutput {
    spectrum: spectral::SpectrumReport,
    selection: spectral::SelectionResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<OracleComparison>,
}

#[derive(Serialize)]
struct OracleComparison {
    subset: Vec<usize>,
    objective: f64,
    selection_objective: f64,
    agree: bool,
}

fn cmd_spectral(args: SpectralArgs) -> CliResult {
    if args.l == args.l2 {
        return Err(config_error("--L and --L2 must differ"));
    }
    let dataset = args.data.load()?;
    let filter = build_filter(&dataset.graph, args.pi)?;
    let n = filter.num_nodes();
    if args.dout == 0 || args.dout > n {
        return Err(config_error(format!("--dout must lie in [1, {n}]")));
    }
    let (values, oracle) = if n <= spectral::MAX_ORACLE_NODES {
        let dec = spectral::eig_sym(&filter)?;
        let sel = spectral::theorem1_select(&dec.eigenvalues, args.l, args.l2, args.dout)?;
        let oracle = spectral::BruteForceOracle::new(&filter, &dec, args.l, args.l2)?;
        let best = oracle.best(args.dout)?;
        let selection_objective = oracle.objective(&sel.indices);
        let cmp = OracleComparison {
            agree: (selection_objective - best.objective).abs() <= 1e-10,
            subset: best.subset,
            objective: best.objective,
            selection_objective,
        };
        (dec.eigenvalues, Some(cmp))
    } else {
        (spectral::eigenvalues(&filter)?, None)
    };
    let selection = spectral::theorem1_select(&values, args.l, args.l2, args.dout)?;
    if let Some(path) = &args.csv {
        let mut text = String::from("k,lambda,score\n");
        for (k, &v) in values.iter().enumerate() {
            text.push_str(&format!("{k},{v:.17e},{:.17e}\n", spectral::selection_score(v, args.l, args.l2)));
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    print_json(&SpectralOutput {
        spectrum: spectral::report_from_eigenvalues(&values, args.pi),
        selection,
        oracle,
    })
}

#[derive(Serialize)]
struct GradcheckSummary {
    trials: usize,
    max_rel_error: f64,
    tol: f64,
    passed: bool,
    nondifferentiable_trials: usize,
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult {
    if args.size < 2 || args.size > 64 {
        return Err(config_error("--size must lie in [2, 64]"));
    }
    let activations = [Activation::Relu, Activation::Prelu, Activation::Identity];
    let mut worst: f64 = 0.0;
    let mut kinks = 0;
    for t in 0..args.trials {
        let spec = InstanceSpec {
            nodes: args.size,
            features: 5,
            hidden: 6,
            proj: 4,
            activation: activations[t % activations.len()],
            edge_prob: 0.4,
            drop_rate: 0.2,
        };
        let report = check_full_model(spec, args.seed + t as u64, args.tol)?;
        worst = worst.max(report.max_rel_error);
        kinks += report.nondifferentiable_point as usize;
    }
    let passed = worst < args.tol;
    print_json(&GradcheckSummary {
        trials: args.trials,
        max_rel_error: worst,
        tol: args.tol,
        passed,
        nondifferentiable_trials: kinks,
    })?;
    if !passed {
        return Err(anyhow!("max relative error {worst:e} exceeds tolerance {:e}", args.tol).into());
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    strategies: String,
    accuracy_mean: f64,
    accuracy_std: f64,
    per_seed: Vec<f64>,
}

fn cmd_ablate(args: AblateArgs) -> CliResult {
    let base = args.source.load()?;
    let combos: Vec<Strategies> = match &args.strategies {
        None => Strategies::all_combinations(),
        Some(list) => list
            .iter()
            .map(|s| Strategies::parse(s).ok_or_else(|| config_error(format!("unknown strategy combination {s:?}"))))
            .collect::<CliResult<_>>()?,
    };
    if args.seeds == 0 {
        return Err(config_error("--seeds must be at least 1"));
    }
    if combos.is_empty() {
        return Err(config_error("no strategy combinations to run"));
    }
    for st in &combos {
        let mut cfg = base.clone();
        cfg.strategies = *st;
        magcl::augment::ArchSampler::new(cfg.sampler_config())?;
    }
    let dataset = args.data.load()?;
    let scratch;
    let root = match &args.out {
        Some(dir) => dir.clone(),
        None => {
            scratch = std::env::temp_dir().join(format!("magcl-ablate-{}", std::process::id()));
            scratch.clone()
        }
    };
    make_dir(&root)?;
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let mut outputs = Vec::new();
    for st in &combos {
        for &seed in &seeds {
            let dir = root.join(format!("{}-seed{seed}", st.label()));
            let paths = RunPaths::new(&dir, EmbeddingFormat::Bin);
            outputs.push(StageOutputs {
                label: st.label(),
                seed,
                checkpoint: paths.checkpoint,
                embeddings: paths.embeddings,
                log: paths.log,
            });
        }
    }
    RunManifest {
        tool: "magcl",
        version: version(),
        command: "ablate".into(),
        config: base.clone(),
        dataset: DatasetRef {
            path: args.data.data.clone(),
            sha256: fingerprint(&args.data.data)?,
        },
        row_normalize: args.data.row_normalize,
        seeds: seeds.clone(),
        outputs,
    }
    .write(&root.join("manifest.json"))?;

    let probe = args.probe.config(1);
    let mut rows = Vec::new();
    for st in &combos {
        let mut acc = Vec::new();
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.strategies = *st;
            cfg.seed = seed;
            let dir = root.join(format!("{}-seed{seed}", st.label()));
            make_dir(&dir)?;
            log::info!("training {} seed {seed}", st.label());
            let emb = train_any(&dataset, &cfg, &RunPaths::new(&dir, EmbeddingFormat::Bin), EmbeddingFormat::Bin)?;
            acc.push(probe_runs(&emb, &dataset, SplitMode::Public, 1, 0, &probe)?[0]);
        }
        let report = EvalReport::from_accuracies(acc);
        eprintln!(
            "{:<8} {:6.2} ± {:4.2}",
            st.label(),
            report.accuracy_mean,
            report.accuracy_std
        );
        rows.push(AblationRow {
            strategies: st.label(),
            accuracy_mean: report.accuracy_mean,
            accuracy_std: report.accuracy_std,
            per_seed: report.per_seed,
        });
    }
    if args.out.is_none() {
        fs::remove_dir_all(&root).ok();
    }
    print_json(&rows)
}
