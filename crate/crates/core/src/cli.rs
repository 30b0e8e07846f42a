//! Command-line front end: `gen`, `train`, `eval`, `match`, `gradcheck`.
//!
//! Results go to standard output as JSON (or a table for `gradcheck`);
//! diagnostics go to standard error. Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal error |
//! | 2 | configuration or usage error |
//! | 3 | I/O, dataset or checkpoint mismatch |
//! | 4 | non-finite loss during training |
//! | 5 | gradient check failure |

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::cmft::CmftTensor;
use crate::config::Config;
use crate::data::{self, PairingMode, Split};
use crate::error::Error;
use crate::eval;
use crate::export::{self, MatchSettings};
use crate::gradsuite;
use crate::model::Model;
use crate::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "CMALIGN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cmalign", version, about = "Cross-modal dense alignment toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Replaces the top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-modality dataset into --out.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Replace a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train on the training identities of data.root.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Cross-modal retrieval metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Masks, co-attention and top-k matches for one image pair.
    Match {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every differentiable building block.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Maps an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } | Error::Dataset(_) | Error::Dimension { .. } => EXIT_IO,
        Error::NonFinite { .. } | Error::Numeric { .. } => EXIT_NON_FINITE,
        Error::Index { .. } | Error::Pairing(_) => EXIT_INTERNAL,
    }
}

/// Exit code and message of a failed command.
#[derive(Debug)]
pub struct Failure(pub i32, pub String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(exit_code(&e), e.to_string())
    }
}

pub type Outcome = std::result::Result<(), Failure>;

fn load_config(c: &Common) -> Result<Config, Failure> {
    Ok(Config::load(c.config.as_deref(), &c.overrides, c.seed)?)
}

fn need_out(c: &Common, cmd: &str) -> Result<PathBuf, Failure> {
    c.out
        .clone()
        .ok_or_else(|| Failure(EXIT_CONFIG, format!("{cmd} needs --out")))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string(v).expect("json value serializes"));
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

pub fn run_gen(common: &Common, overwrite: bool) -> Outcome {
    let cfg = load_config(common)?;
    let out = need_out(common, "gen")?;
    let syn = cfg.synthetic_config()?;
    let summary = data::generate_synthetic_dataset(&out, &syn, overwrite)?;
    let mut resolved = cfg.clone();
    resolved.data.root = Some(out.clone());
    resolved.write_resolved(&out)?;
    print_json(&serde_json::to_value(&summary).expect("summary serializes"));
    Ok(())
}

pub fn run_train(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let out = need_out(common, "train")?;
    let root = Config::require(&cfg.data.root, "data.root")?;
    let ds = data::load_directory_dataset(root, PairingMode::CrossModal)?;
    check_image_size(&ds, &cfg)?;
    let ids = ds.split_identities(Split::Train, cfg.data.train_identities)?;
    cfg.write_resolved(&out)?;
    let fit = train::fit(&ds, &ids, cfg.model_config(), &cfg.train_config(), Some(&out))?;
    match fit.log.last() {
        Some(rec) => println!("{}", serde_json::to_string(rec).expect("record serializes")),
        None => print_json(&json!({"epochs": 0})),
    }
    Ok(())
}

fn check_image_size(ds: &data::Dataset, cfg: &Config) -> Outcome {
    let (h, w) = ds.image_size()?;
    if (h, w) != (cfg.data.height, cfg.data.width) {
        return Err(Failure(
            EXIT_IO,
            format!(
                "dataset images are {h}x{w} but the configuration expects {}x{}",
                cfg.data.height, cfg.data.width
            ),
        ));
    }
    Ok(())
}

pub fn run_eval(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let root = Config::require(&cfg.data.root, "data.root")?;
    let ckpt = Config::require(&cfg.eval.checkpoint, "eval.checkpoint")?;
    let model = Model::load(ckpt, cfg.model_config())?;
    let ds = data::load_directory_dataset(root, PairingMode::CrossModal)?;
    check_image_size(&ds, &cfg)?;
    let ids = ds.split_identities(cfg.eval.split, cfg.data.train_identities)?;
    let (qm, gm) = cfg.eval.direction.modalities();
    let queries = eval::extract_descriptors(&model.extractor, &ds, qm, &ids)?;
    let gallery = eval::extract_descriptors(&model.extractor, &ds, gm, &ids)?;
    let result = eval::evaluate_retrieval(&queries, &gallery)?;
    if result.excluded_queries > 0 {
        eprintln!("warning: {} queries had no gallery positive", result.excluded_queries);
    }
    let text = serde_json::to_string(&result).expect("metrics serialize");
    println!("{text}");
    if let Some(out) = &common.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        cfg.write_resolved(out)?;
        write_file(&out.join("metrics.json"), &format!("{text}\n"))?;
    }
    Ok(())
}

pub fn run_match(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let out = need_out(common, "match")?;
    let m = &cfg.matching;
    let ckpt = Config::require(&m.checkpoint, "match.checkpoint")?;
    let img_a = CmftTensor::read(Config::require(&m.image_a, "match.image_a")?)?;
    let img_b = CmftTensor::read(Config::require(&m.image_b, "match.image_b")?)?;
    let model = Model::load(ckpt, cfg.model_config())?;
    let settings = MatchSettings {
        modality_a: m.modality_a,
        modality_b: m.modality_b,
        layer: m.layer,
        k: m.k,
        beta: cfg.loss.beta,
    };
    cfg.write_resolved(&out)?;
    let art = export::export_artifacts(&model.extractor, &img_a, &img_b, &settings, &out)?;
    print_json(&json!({
        "mask_a": art.mask_a,
        "mask_b": art.mask_b,
        "co_attention": art.co_attention,
        "matches": art.matches,
        "rows": art.match_list.len(),
    }));
    Ok(())
}

pub fn run_gradcheck(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let reports = gradsuite::run_suite(&cfg.gradcheck.ops, &cfg.suite_config())?;
    print!("{}", gradsuite::format_table(&reports));
    if let Some(out) = &common.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        cfg.write_resolved(out)?;
    }
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op).collect();
    if !failing.is_empty() {
        return Err(Failure(
            EXIT_GRADCHECK,
            format!("gradient check failed for: {}", failing.join(", ")),
        ));
    }
    Ok(())
}

fn init_threads() -> Outcome {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure(EXIT_CONFIG, format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // a second call in one process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Gen { common, overwrite } => run_gen(common, *overwrite),
        Command::Train { common } => run_train(common),
        Command::Eval { common } => run_eval(common),
        Command::Match { common } => run_match(common),
        Command::Gradcheck { common } => run_gradcheck(common),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}
