//! Batch front end for the adaptation pipeline.
//!
//! Config files are the source of truth; command-line flags are overrides.
//! Every command that produces output also writes a resolved-config JSON next
//! to it so runs can be reproduced exactly.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure. Errors go to stderr with an `error_code=` prefix.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nrc::data::{self, GenConfig};
use nrc::diagnostics;
use nrc::graph::{GraphParams, NeighborGraph};
use nrc::model::ModelParams;
use nrc::trainer::{self, AdaptConfig, AdaptMode, PretrainConfig};
use nrc::Error;

#[derive(Parser)]
#[command(
    name = "nrc",
    version,
    about = "Source-free domain adaptation over feature vectors"
)]
struct Cli {
    /// Worker threads for retrieval (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic covariate-shift benchmark.
    GenData(GenDataArgs),
    /// Pretrain a model on labeled source features.
    Pretrain(PretrainArgs),
    /// Adapt a pretrained model to unlabeled target features.
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint on labeled features.
    Eval(EvalArgs),
    /// Neighbor-quality diagnostics over a checkpoint and a dataset.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generation config (JSON, keys of GenConfig). Defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for source.nrcf, target.nrcf, target_labeled.nrcf.
    #[arg(long)]
    out_dir: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Pretraining config (JSON, keys of PretrainConfig).
    #[arg(long)]
    config: PathBuf,
    /// Labeled source features (.nrcf or .csv).
    #[arg(long)]
    source: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AdaptArgs {
    /// Adaptation config (JSON, keys of AdaptConfig).
    #[arg(long)]
    config: PathBuf,
    /// Pretrained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Unlabeled target features (.nrcf or .csv).
    #[arg(long)]
    target: PathBuf,
    /// Output checkpoint path; the training log and per-epoch stats are
    /// written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config mode (nrc | nrc++).
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Labeled features (.nrcf or .csv).
    #[arg(long)]
    data: PathBuf,
    /// Optional metrics CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Checkpoint to inspect.
    #[arg(long)]
    model: PathBuf,
    /// Features, labeled or not (.nrcf or .csv).
    #[arg(long)]
    data: PathBuf,
    /// Neighbor-purity curves CSV.
    #[arg(long)]
    out: PathBuf,
    /// Largest neighborhood size of the purity curves.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Expanded-neighborhood size of the graph dump.
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Density parameters of the graph dump.
    #[arg(long, default_value_t = 20)]
    u: usize,
    #[arg(long, default_value_t = 5)]
    v: usize,
    /// Non-reciprocal affinity of the graph dump.
    #[arg(long, default_value_t = 0.1)]
    r: f64,
    /// Optional edge-list dump of the full neighborhood graph.
    #[arg(long)]
    graph_out: Option<PathBuf>,
    /// Optional embeddings dump (features and predictions).
    #[arg(long)]
    embeddings_out: Option<PathBuf>,
}

fn exit_code_of(err: &Error) -> u8 {
    match err {
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error_code=1 usage error");
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    if let Some(threads) = cli.threads {
        // Ignore failure: the pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code_of(&e);
            eprintln!("error_code={code} {e}");
            ExitCode::from(code)
        }
    }
}

fn read_config<T>(path: &Path, parse: impl Fn(&str) -> nrc::Result<T>) -> nrc::Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

fn write_resolved(path: &Path, value: &serde_json::Value) -> nrc::Result<()> {
    let resolved = PathBuf::from(format!("{}.resolved.json", path.display()));
    std::fs::write(
        &resolved,
        serde_json::to_string_pretty(value).unwrap() + "\n",
    )?;
    Ok(())
}

/// Fail fast on unwritable output paths before any heavy work starts.
fn ensure_writable(path: &Path) -> nrc::Result<()> {
    std::fs::File::create(path)
        .map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn run(command: Command) -> nrc::Result<()> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::Pretrain(args) => pretrain(args),
        Command::Adapt(args) => adapt(args),
        Command::Eval(args) => eval(args),
        Command::Diagnose(args) => diagnose(args),
    }
}

fn gen_data(args: GenDataArgs) -> nrc::Result<()> {
    let mut config = match &args.config {
        Some(path) => read_config(path, GenConfig::from_json)?,
        None => GenConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let manifest = config.generate()?;
    std::fs::create_dir_all(&args.out_dir)?;
    let source = args.out_dir.join("source.nrcf");
    let target = args.out_dir.join("target.nrcf");
    let target_labeled = args.out_dir.join("target_labeled.nrcf");
    data::save_features(
        &source,
        &manifest.source_features,
        Some(&manifest.source_labels),
    )?;
    data::save_features(&target, &manifest.target_features, None)?;
    data::save_features(
        &target_labeled,
        &manifest.target_features,
        Some(&manifest.target_labels),
    )?;
    write_resolved(
        &args.out_dir.join("gen-data"),
        &serde_json::json!({
            "command": "gen-data",
            "config": config,
            "outputs": {
                "source": source,
                "target": target,
                "target_labeled": target_labeled,
            },
        }),
    )?;
    println!(
        "wrote {} source and {} target samples to {}",
        manifest.source_features.rows(),
        manifest.target_features.rows(),
        args.out_dir.display()
    );
    Ok(())
}

fn pretrain(args: PretrainArgs) -> nrc::Result<()> {
    let mut config = read_config(&args.config, PretrainConfig::from_json)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let (features, labels) = data::load_features(&args.source)?;
    ensure_writable(&args.out)?;
    let labels = labels
        .ok_or_else(|| Error::InvalidInput("pretraining needs labeled source features".into()))?;
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let params = trainer::pretrain_source(&config, &features, &labels, num_classes)?;
    params.save(&args.out)?;
    let cache = params.forward_eval(&features)?;
    let acc = diagnostics::accuracy(cache.probs(), &labels)?;
    write_resolved(
        &args.out,
        &serde_json::json!({
            "command": "pretrain",
            "config": config,
            "inputs": { "source": args.source },
            "outputs": { "model": args.out },
            "source_accuracy": acc,
        }),
    )?;
    println!(
        "pretrained on {} samples, source accuracy {acc:.4}",
        features.rows()
    );
    Ok(())
}

fn parse_mode(text: &str) -> nrc::Result<AdaptMode> {
    match text {
        "nrc" => Ok(AdaptMode::Nrc),
        "nrc++" => Ok(AdaptMode::NrcPlusPlus),
        other => Err(Error::Config(format!(
            "mode must be \"nrc\" or \"nrc++\", got {other:?}"
        ))),
    }
}

fn adapt(args: AdaptArgs) -> nrc::Result<()> {
    let mut config = read_config(&args.config, AdaptConfig::from_json)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(mode) = &args.mode {
        config.mode = parse_mode(mode)?;
    }
    config.validate()?;
    let params = ModelParams::load(&args.model)?;
    let (target, _) = data::load_features(&args.target)?;
    ensure_writable(&args.out)?;
    let outcome = trainer::adapt(&config, params, &target)?;
    outcome.params.save(&args.out)?;

    let log_path = PathBuf::from(format!("{}.log.csv", args.out.display()));
    outcome.log.write_csv(&log_path)?;
    let epochs_path = PathBuf::from(format!("{}.epochs.csv", args.out.display()));
    let mut epochs_csv = String::from("epoch,all_shared\n");
    for stat in &outcome.epoch_stats {
        epochs_csv.push_str(&format!("{},{}\n", stat.epoch, stat.all_shared));
    }
    std::fs::write(&epochs_path, epochs_csv)?;

    write_resolved(
        &args.out,
        &serde_json::json!({
            "command": "adapt",
            "config": config,
            "inputs": { "model": args.model, "target": args.target },
            "outputs": {
                "model": args.out,
                "training_log": log_path,
                "epoch_stats": epochs_path,
            },
        }),
    )?;
    println!(
        "adapted over {} iterations; log at {}",
        outcome.log.rows.len(),
        log_path.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> nrc::Result<()> {
    let params = ModelParams::load(&args.model)?;
    let (features, labels) = data::load_features(&args.data)?;
    let labels = labels.ok_or_else(|| Error::InvalidInput("eval needs labeled features".into()))?;
    let cache = params.forward_eval(&features)?;
    let acc = diagnostics::accuracy(cache.probs(), &labels)?;
    let per_class = diagnostics::per_class_accuracy(cache.probs(), &labels)?;
    let mean_per_class = diagnostics::mean_per_class_accuracy(cache.probs(), &labels)?;
    println!("accuracy {acc:.4}");
    println!("mean_per_class {mean_per_class:.4}");
    for (c, r) in per_class.iter().enumerate() {
        println!("class_{c}_recall {r:.4}");
    }
    if let Some(out) = &args.out {
        let mut csv = String::from("metric,value\n");
        csv.push_str(&format!("accuracy,{acc}\n"));
        csv.push_str(&format!("mean_per_class,{mean_per_class}\n"));
        for (c, r) in per_class.iter().enumerate() {
            csv.push_str(&format!("class_{c}_recall,{r}\n"));
        }
        std::fs::write(out, csv)?;
        write_resolved(
            out,
            &serde_json::json!({
                "command": "eval",
                "inputs": { "model": args.model, "data": args.data },
                "outputs": { "report": out },
            }),
        )?;
    }
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> nrc::Result<()> {
    let params = ModelParams::load(&args.model)?;
    let (features, labels) = data::load_features(&args.data)?;
    let banks = nrc::banks::MemoryBanks::initialize(&params, &features)?;
    let report = diagnostics::neighbor_purity(&banks, args.k, labels.as_deref())?;
    report.write_csv(&args.out)?;

    if let Some(graph_out) = &args.graph_out {
        let graph_params = GraphParams {
            k: args.k,
            m: args.m,
            u: args.u,
            v: args.v,
            r: args.r,
            affinity_enabled: true,
            dedupe_expanded: false,
            with_expanded: true,
            with_density: args.u < banks.len() && args.u > args.v,
        };
        let graph = NeighborGraph::build_full(&banks, &graph_params)?;
        graph.write_csv(graph_out)?;
    }
    if let Some(embeddings_out) = &args.embeddings_out {
        data::save_embeddings(
            embeddings_out,
            banks.features(),
            banks.scores(),
            labels.as_deref(),
        )?;
    }
    write_resolved(
        &args.out,
        &serde_json::json!({
            "command": "diagnose",
            "inputs": { "model": args.model, "data": args.data },
            "k": args.k, "m": args.m, "u": args.u, "v": args.v, "r": args.r,
            "outputs": {
                "purity": args.out,
                "graph": args.graph_out,
                "embeddings": args.embeddings_out,
            },
        }),
    )?;
    println!("wrote purity curves to {}", args.out.display());
    Ok(())
}
