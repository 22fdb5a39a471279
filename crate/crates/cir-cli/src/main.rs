//! `cir` — operator entry point for the composed-retrieval laboratory.
//!
//! Verbs: `synth`, `build-index`, `train`, `eval`, `report`. Standard
//! output carries machine-readable JSON only; human logs go to standard
//! error. Every artifact-writing run drops a `run.json` manifest (config
//! echo, seed, artifact paths, content hashes) next to its outputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure (non-finite gradient).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use cir_core::checkpoint::{load_checkpoint, save_checkpoint};
use cir_core::dataset::{atomic_write, save_truth, Split, SynthConfig};
use cir_core::optim::OptimError;
use cir_core::pipeline::{
    eval_checkpoint, mining_index_with_cache, report_json, train_fusion_infonce,
    train_retrieval_dpo, zeroshot_eval_split, Dataset, MiningSplit, Mode, PipelineError,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "cir", version, about = "Composed-retrieval laboratory")]
struct Cli {
    /// Worker-thread cap (falls back to CIR_THREADS, then hardware count).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted synthetic dataset (gallery, triplets, truth).
    Synth(SynthArgs),
    /// Build the exact inner-product index cache, or load a valid one.
    #[command(name = "build-index")]
    BuildIndex(BuildIndexArgs),
    /// Train a pipeline and write the best checkpoint plus history.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the zero-shot baseline) and print the
    /// recall report to standard output.
    Eval(EvalArgs),
    /// Validate a report file and re-render it canonically.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    gallery_size: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    vocab_size: usize,
    #[arg(long, default_value_t = 16)]
    edit_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
}

#[derive(Args)]
struct BuildIndexArgs {
    /// Data directory holding gallery.emb1 and triplets.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Index cache file (created if absent, loaded if valid).
    #[arg(long)]
    index_cache: PathBuf,
    /// Splits feeding the mining index.
    #[arg(long, value_parser = parse_mining_split, default_value = "train")]
    split: MiningSplit,
    /// Training config file (JSON mirroring the config fields).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Pipeline: infonce | dpo.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for best.ckpt, history.jsonl, run.json.
    #[arg(long)]
    out: PathBuf,
    /// Training config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    logit_scale: Option<f64>,
    #[arg(long)]
    mining_k: Option<usize>,
    /// Comma-separated evaluation cutoffs, e.g. 1,5,10,50.
    #[arg(long, value_parser = parse_ks)]
    ks: Option<Vec<usize>>,
    /// Hard-negative index cache (dpo mode).
    #[arg(long)]
    index_cache: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate; omit with --mode zeroshot.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// zeroshot evaluates the untrained seeded text tower.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long, value_parser = parse_split, default_value = "val")]
    split: Split,
    #[arg(long, value_parser = parse_ks)]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional directory for report.json plus run.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON file as written by train/eval.
    #[arg(long)]
    input: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "infonce" | "infonce_fusion" => Ok(Mode::InfonceFusion),
        "dpo" | "retrieval_dpo" => Ok(Mode::RetrievalDpo),
        "zeroshot" | "zeroshot_eval" => Ok(Mode::ZeroshotEval),
        other => Err(format!(
            "unknown mode {other:?} (expected infonce|dpo|zeroshot)"
        )),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?}")),
    }
}

fn parse_mining_split(s: &str) -> Result<MiningSplit, String> {
    match s {
        "train" => Ok(MiningSplit::Train),
        "trainval" | "train+val" => Ok(MiningSplit::TrainVal),
        other => Err(format!(
            "unknown mining split {other:?} (expected train|trainval)"
        )),
    }
}

fn parse_ks(s: &str) -> Result<Vec<usize>, String> {
    let ks: Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
    let ks = ks.map_err(|e| format!("bad ks list {s:?}: {e}"))?;
    if ks.is_empty() {
        return Err("ks list is empty".into());
    }
    Ok(ks)
}

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            PipelineError::Optim(OptimError::NonFiniteGradient { .. }) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn log(msg: &str) {
    eprintln!("[cir] {msg}");
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `run.json`: verb, seed, config echo, and a sha256 per artifact.
fn write_manifest(
    dir: &Path,
    verb: &str,
    seed: u64,
    config: serde_json::Value,
    artifacts: &[(&str, &Path)],
) -> Result<(), CliError> {
    let mut entries = BTreeMap::new();
    for (name, path) in artifacts {
        let bytes =
            std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        entries.insert(
            name.to_string(),
            serde_json::json!({
                "path": path.display().to_string(),
                "sha256": sha256_hex(&bytes),
            }),
        );
    }
    let manifest = serde_json::json!({
        "artifacts": entries,
        "config": config,
        "seed": seed,
        "verb": verb,
    });
    let mut text =
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    atomic_write(&dir.join("run.json"), text.as_bytes())
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Resolves the training config: mode-specific defaults first, then the
/// config file's fields layered over them, then flag overrides (applied by
/// the caller). The mode comes from the flag, else the file. The second
/// return says whether the file pinned the model dims explicitly.
fn load_train_config(
    config: Option<&PathBuf>,
    mode: Option<Mode>,
) -> Result<(TrainConfig, bool), CliError> {
    let file_value: Option<serde_json::Value> = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            Some(
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
            )
        }
        None => None,
    };
    let file_mode = file_value
        .as_ref()
        .and_then(|v| v.get("mode"))
        .cloned()
        .map(serde_json::from_value::<Mode>)
        .transpose()
        .map_err(|e| CliError::Data(format!("config mode: {e}")))?;
    let explicit_model = file_value
        .as_ref()
        .is_some_and(|v| v.get("model").is_some());
    let mode = mode.or(file_mode).ok_or_else(|| {
        CliError::Usage("either --mode or a config file with a mode is required".into())
    })?;

    let mut base = serde_json::to_value(TrainConfig::for_mode(mode))
        .map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(overlay) = file_value {
        merge_json(&mut base, overlay);
    }
    base["mode"] = serde_json::to_value(mode).map_err(|e| CliError::Data(e.to_string()))?;
    let cfg = serde_json::from_value(base).map_err(|e| CliError::Data(format!("config: {e}")))?;
    Ok((cfg, explicit_model))
}

fn apply_overrides(cfg: &mut TrainConfig, args: &TrainArgs) {
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.beta {
        cfg.loss.beta = v;
    }
    if let Some(v) = args.tau {
        cfg.loss.temperature = v;
    }
    if let Some(v) = args.logit_scale {
        cfg.loss.logit_scale = v;
    }
    if let Some(v) = args.mining_k {
        cfg.mining_k = v;
    }
    if let Some(v) = &args.ks {
        cfg.eval_ks = v.clone();
    }
}

fn config_echo<T: serde::Serialize>(cfg: &T) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn run_synth(args: &SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        gallery_size: args.gallery_size,
        dim: args.dim,
        vocab_size: args.vocab_size,
        edit_dim: args.edit_dim,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
        ..SynthConfig::default()
    };
    ensure_dir(&args.out)?;
    let (data, truth) = Dataset::generate(&cfg)?;
    data.save(&args.out)?;
    save_truth(&truth, &args.out).map_err(PipelineError::from)?;
    log(&format!(
        "wrote {} images and {} triplets to {}",
        data.gallery.len(),
        data.triplets.records.len(),
        args.out.display()
    ));
    let artifacts = [
        ("gallery", args.out.join("gallery.emb1")),
        ("triplets", args.out.join("triplets.jsonl")),
        ("truth_a", args.out.join("truth_a.emb1")),
        ("truth_b", args.out.join("truth_b.emb1")),
        ("truth_tokens", args.out.join("truth_tokens.emb1")),
    ];
    let refs: Vec<(&str, &Path)> = artifacts.iter().map(|(n, p)| (*n, p.as_path())).collect();
    write_manifest(&args.out, "synth", args.seed, config_echo(&cfg), &refs)?;
    println!(
        "{}",
        serde_json::json!({
            "gallery_size": data.gallery.len(),
            "records": data.triplets.records.len(),
            "out": args.out.display().to_string(),
        })
    );
    Ok(())
}

fn run_build_index(args: &BuildIndexArgs) -> Result<(), CliError> {
    let (mut cfg, explicit_model) =
        load_train_config(args.config.as_ref(), Some(Mode::RetrievalDpo))?;
    cfg.mining_split = args.split;
    let data = Dataset::load(&args.data, cfg.model.vocab_size, cfg.model.max_len)?;
    if !explicit_model {
        cfg.adapt_to_gallery_dim(data.gallery.dim());
    }
    let (ix, from_cache) = mining_index_with_cache(&data, &cfg, Some(&args.index_cache))?;
    if from_cache {
        log(&format!(
            "loaded index cache from {} ({} rows)",
            args.index_cache.display(),
            ix.len()
        ));
    } else {
        log(&format!(
            "built index and wrote cache to {} ({} rows)",
            args.index_cache.display(),
            ix.len()
        ));
    }
    if let Some(dir) = args.index_cache.parent() {
        let dir = if dir.as_os_str().is_empty() {
            Path::new(".")
        } else {
            dir
        };
        write_manifest(
            dir,
            "build-index",
            cfg.seed,
            config_echo(&cfg),
            &[("index", args.index_cache.as_path())],
        )?;
    }
    println!(
        "{}",
        serde_json::json!({
            "rows": ix.len(),
            "dim": ix.dim(),
            "cache": args.index_cache.display().to_string(),
            "loaded_from_cache": from_cache,
        })
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let (mut cfg, explicit_model) = load_train_config(args.config.as_ref(), args.mode)?;
    apply_overrides(&mut cfg, args);
    let data = Dataset::load(&args.data, cfg.model.vocab_size, cfg.model.max_len)?;
    if !explicit_model {
        cfg.adapt_to_gallery_dim(data.gallery.dim());
    }
    ensure_dir(&args.out)?;

    let ckpt_path = args.out.join("best.ckpt");
    let history_path = args.out.join("history.jsonl");

    let (history, best_report) = match cfg.mode {
        Mode::InfonceFusion => {
            log(&format!(
                "training fusion head: {} epochs, batch {}, seed {}",
                cfg.epochs, cfg.batch_size, cfg.seed
            ));
            let run = train_fusion_infonce(&data, &cfg)?;
            save_checkpoint(
                &ckpt_path,
                cfg.mode.as_str(),
                &cfg.model,
                &run.model,
                Some(&run.optim),
            )
            .map_err(PipelineError::from)?;
            (run.history, run.best_report)
        }
        Mode::RetrievalDpo => {
            let (mining_ix, from_cache) =
                mining_index_with_cache(&data, &cfg, args.index_cache.as_ref())?;
            if args.index_cache.is_some() {
                log(if from_cache {
                    "loaded hard-negative index from cache"
                } else {
                    "built hard-negative index and wrote cache"
                });
            }
            log(&format!(
                "training text tower with preference loss: {} epochs, batch {}, seed {}",
                cfg.epochs, cfg.batch_size, cfg.seed
            ));
            let run = train_retrieval_dpo(&data, &cfg, Some(mining_ix))?;
            save_checkpoint(
                &ckpt_path,
                cfg.mode.as_str(),
                &cfg.model,
                &run.tower,
                Some(&run.optim),
            )
            .map_err(PipelineError::from)?;
            (run.history, run.best_report)
        }
        Mode::ZeroshotEval => {
            return Err(CliError::Usage(
                "zeroshot has no training loop; use `cir eval --mode zeroshot`".into(),
            ))
        }
    };

    atomic_write(&history_path, history.to_jsonl().as_bytes())
        .map_err(|e| CliError::Data(e.to_string()))?;
    log(&format!(
        "best epoch {} of {}; checkpoint at {}",
        history.best_epoch,
        history.epochs.len(),
        ckpt_path.display()
    ));
    write_manifest(
        &args.out,
        "train",
        cfg.seed,
        config_echo(&cfg),
        &[
            ("checkpoint", ckpt_path.as_path()),
            ("history", history_path.as_path()),
        ],
    )?;
    print!("{}", report_json(&best_report));
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    if args.checkpoint.is_none() && !matches!(args.mode, None | Some(Mode::ZeroshotEval)) {
        return Err(CliError::Usage(
            "eval needs --checkpoint unless --mode zeroshot".into(),
        ));
    }
    let (mut cfg, explicit_model) =
        load_train_config(args.config.as_ref(), Some(Mode::ZeroshotEval))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(ks) = &args.ks {
        cfg.eval_ks = ks.clone();
    }

    let report = match &args.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(PipelineError::from)?;
            let data = Dataset::load(
                &args.data,
                ckpt.header.model.vocab_size,
                ckpt.header.model.max_len,
            )?;
            log(&format!(
                "evaluating {} checkpoint on the {} split",
                ckpt.header.mode, args.split
            ));
            eval_checkpoint(&data, &ckpt, args.split, &cfg.eval_ks)?
        }
        None => {
            let data = Dataset::load(&args.data, cfg.model.vocab_size, cfg.model.max_len)?;
            if !explicit_model {
                cfg.adapt_to_gallery_dim(data.gallery.dim());
            }
            log(&format!(
                "zero-shot evaluation on the {} split (seed {})",
                args.split, cfg.seed
            ));
            zeroshot_eval_split(&data, &cfg, args.split)?
        }
    };

    let rendered = report_json(&report);
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
        let report_path = dir.join("report.json");
        atomic_write(&report_path, rendered.as_bytes())
            .map_err(|e| CliError::Data(e.to_string()))?;
        write_manifest(
            dir,
            "eval",
            cfg.seed,
            config_echo(&cfg),
            &[("report", report_path.as_path())],
        )?;
    }
    print!("{rendered}");
    Ok(())
}

fn run_report(args: &ReportArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.input.display())))?;
    let report = cir_core::pipeline::parse_report(&text)?;
    log(&format!(
        "report covers {} queries across {} categories",
        report.query_count,
        report.per_category.len()
    ));
    print!("{}", report_json(&report));
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let threads = cli.threads.or_else(|| {
        std::env::var("CIR_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    cir_core::pipeline::init_thread_pool(threads);
    match &cli.command {
        Command::Synth(args) => run_synth(args),
        Command::BuildIndex(args) => run_build_index(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Report(args) => run_report(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
