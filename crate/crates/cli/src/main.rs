//! `ccrs`: data preparation, staged training, evaluation, terminal chat and
//! the HTTP service.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 input error, 3
//! environment error (I/O, port already in use).

mod chat;

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccrs_core::config::TrainConfig;
use ccrs_core::corpus::{generate_synthetic_corpus, write_conversations, write_items, write_kg_tsv, SyntheticSpec};
use ccrs_core::engine::Engine;
use ccrs_core::pipeline::{
    evaluate, load_inputs, prepare, run_train_dial, run_train_rec, stored_config, Bundle, PrepareOptions, CONFIG_FILE,
};
use ccrs_core::CcrsError;
use ccrs_service::{AppState, ServiceConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

const DESK_CONFIG: &str = "desk_scale.toml";

#[derive(Parser)]
#[command(name = "ccrs", version, about = "Customized conversational recommender")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON training configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding prepared data, checkpoints and reports.
    #[arg(long, global = true, env = "CCRS_DATA_DIR", default_value = "ccrs-run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build the subgraph, vocabulary, user splits and episodes.
    Prepare(PrepareArgs),
    /// Meta-train one part; `rec` must come before `dial`.
    Train(TrainArgs),
    /// Meta-test on the test users and write a report.
    Evaluate(EvalArgs),
    /// Interactive terminal conversation.
    Chat(chat::ChatArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Generate the toy corpus instead of reading input files.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, required_unless_present = "synthetic")]
    kg: Option<PathBuf>,
    /// Optional list of item entities, one per line.
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    conversations: Option<PathBuf>,
    /// Train/valid/test user ratios.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    hops: usize,
    #[arg(long)]
    test_support_in_train: bool,
    #[arg(long, default_value_t = 20)]
    users: usize,
    #[arg(long, default_value_t = 40)]
    n_items: usize,
    #[arg(long, default_value_t = 2)]
    topics: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartArg {
    Rec,
    Dial,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    part: PartArg,
    /// `false` enables the second-order meta-gradient.
    #[arg(long, action = clap::ArgAction::Set)]
    first_order: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct EvalArgs {
    /// Score the query sets with the global parameters.
    #[arg(long)]
    no_adapt: bool,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Report path; defaults to `eval_report.{json,csv}` in the run directory.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Browser origin allowed to call the API (repeatable, `*` for any).
    #[arg(long = "allow-origin")]
    allow_origin: Vec<String>,
    /// Directory for per-session JSON-lines logs.
    #[arg(long)]
    session_log: Option<PathBuf>,
}

/// Error with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl From<CcrsError> for Failure {
    fn from(e: CcrsError) -> Self {
        let code = match &e {
            CcrsError::Io { source, .. } if source.kind() == ErrorKind::NotFound => 2,
            CcrsError::Io { .. } => 3,
            CcrsError::NonFiniteGradient { .. } => 1,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl Failure {
    fn input(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }

    fn env(msg: impl Into<String>) -> Self {
        Failure { code: 3, msg: msg.into() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CcrsError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CcrsError::io(path, e))?;
    Ok(())
}

/// Config file (if any), then the run's stored config, then defaults; the
/// seed flag wins over all.
fn load_config(common: &Common, fallback_to_run: bool) -> CliResult<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_file(p)?,
        None if fallback_to_run && common.out.join(CONFIG_FILE).exists() => stored_config(&common.out)?,
        None if common.out.join(DESK_CONFIG).exists() => TrainConfig::from_file(&common.out.join(DESK_CONFIG))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.rec.seed = seed;
        cfg.dial.seed = seed;
    }
    Ok(cfg)
}

fn cmd_prepare(common: &Common, args: &PrepareArgs) -> CliResult {
    let seed = common.seed.unwrap_or(17);
    let run = &common.out;
    let (kg, convs) = if args.synthetic {
        let spec = SyntheticSpec {
            n_users: args.users,
            n_items: args.n_items,
            topics: args.topics,
            seed,
            ..SyntheticSpec::default()
        };
        if spec.n_users == 0 || spec.n_items == 0 || spec.topics == 0 {
            return Err(Failure::input("synthetic users, items and topics must be positive"));
        }
        let corpus = generate_synthetic_corpus(&spec);
        let raw = run.join("raw");
        write_file(&raw.join("kg.tsv"), &write_kg_tsv(&corpus.kg))?;
        write_file(&raw.join("items.txt"), &write_items(&corpus.kg))?;
        write_file(&raw.join("conversations.jsonl"), &write_conversations(&corpus.conversations))?;
        write_file(&raw.join("synthetic.json"), &serde_json::to_string_pretty(&spec).expect("plain struct"))?;
        let mut desk = TrainConfig::desk_scale();
        desk.seed = seed;
        desk.rec.seed = seed;
        desk.dial.seed = seed;
        write_file(&run.join(DESK_CONFIG), &toml::to_string(&desk).map_err(|e| Failure::env(e.to_string()))?)?;
        (corpus.kg, corpus.conversations)
    } else {
        let kg = args.kg.as_deref().expect("required by clap");
        let convs = args.conversations.as_deref().expect("required by clap");
        load_inputs(kg, args.items.as_deref(), convs)?
    };
    let ratios: [f64; 3] = args.ratios.clone().try_into().map_err(|_| Failure::input("--ratios takes three values"))?;
    let options = PrepareOptions { ratios, seed, hops: args.hops, test_support_in_train: args.test_support_in_train };
    let prepared = prepare(&kg, convs, &options)?;
    prepared.write(run)?;
    let summary = prepared.summary();
    println!("{}", serde_json::to_string_pretty(&summary).expect("plain struct"));
    Ok(())
}

fn cmd_train(common: &Common, args: &TrainArgs) -> CliResult {
    let mut cfg = load_config(common, matches!(args.part, PartArg::Dial))?;
    let meta = match args.part {
        PartArg::Rec => &mut cfg.rec,
        PartArg::Dial => &mut cfg.dial,
    };
    if let Some(fo) = args.first_order {
        meta.first_order = fo;
    }
    if let Some(e) = args.epochs {
        meta.epochs = e;
    }
    if let Some(p) = args.patience {
        meta.patience = p;
    }
    let (best, history) = match args.part {
        PartArg::Rec => {
            let out = run_train_rec(&common.out, &cfg)?;
            (out.outcome.best_epoch, out.outcome.history)
        }
        PartArg::Dial => {
            let out = run_train_dial(&common.out, &cfg)?;
            (out.outcome.best_epoch, out.outcome.history)
        }
    };
    let last = history.last().expect("at least one epoch");
    println!(
        "{}",
        serde_json::json!({"epochs": history.len(), "best_epoch": best, "last": last, "seed": cfg.seed})
    );
    Ok(())
}

fn cmd_evaluate(common: &Common, args: &EvalArgs) -> CliResult {
    let bundle = Bundle::load(&common.out)?;
    let report = evaluate(&bundle, !args.no_adapt)?;
    let (text, default_name) = match args.format {
        Format::Json => (serde_json::to_string_pretty(&report).expect("plain struct"), "eval_report.json"),
        Format::Csv => (report.to_csv(), "eval_report.csv"),
    };
    let path = args.report.clone().unwrap_or_else(|| common.out.join(default_name));
    write_file(&path, &text)?;
    println!("{}", serde_json::to_string(&report.metrics).expect("plain map"));
    Ok(())
}

fn cmd_serve(common: &Common, args: &ServeArgs) -> CliResult {
    let engine = match Bundle::load(&common.out).and_then(Engine::new) {
        Ok(e) => Some(e),
        Err(e) => {
            log::warn!("serving without a model: {e}");
            None
        }
    };
    let state = AppState::new(
        engine,
        ServiceConfig { allowed_origins: args.allow_origin.clone(), log_dir: args.session_log.clone() },
    );
    if let Some(dir) = &args.session_log {
        fs::create_dir_all(dir).map_err(|e| CcrsError::io(dir, e))?;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::env(e.to_string()))?;
    rt.block_on(async {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Failure::env(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Failure::env(e.to_string()))?;
        log::info!("listening on http://{local}");
        println!("listening on http://{local}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("interrupt received, finishing in-flight requests");
            eprintln!("shutting down");
        };
        ccrs_service::serve(listener, state, shutdown).await.map_err(|e| Failure::env(e.to_string()))?;
        log::info!("server stopped");
        Ok(())
    })
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Prepare(a) => cmd_prepare(&cli.common, a),
        Command::Train(a) => cmd_train(&cli.common, a),
        Command::Evaluate(a) => cmd_evaluate(&cli.common, a),
        Command::Chat(a) => chat::run(&cli.common.out, a),
        Command::Serve(a) => cmd_serve(&cli.common, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
        Err(_) => ExitCode::from(1),
    }
}
