//! `masm`: command-line front end for data generation, pretraining,
//! fine-tuning, evaluation and the experiment grids.
//!
//! Every command writes its outputs plus a `config.toml` echo into `--out`.
//! Failures print one JSON line `{"error": kind, "message": text}` to stderr
//! and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use masm_core::data::{build_splits, export_splits, Splits};
use masm_core::harness::{
    decompose_inspect, evaluate, find_metric, inspection_csv, metrics_csv, robustness_csv, robustness_trend,
    run_ablation, run_finetune, run_pretrain, run_robustness, tiny_grad_check, write_ablation, write_iterations_csv,
    Checkpoint, Level, Stage, TrainConfig,
};
use masm_core::MasmError;

const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "masm", version, about = "Subspace fine-tuning with selective layer masking on synthetic forgery data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config; omitted fields take the default preset.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Input checkpoint. Commands that need one and lack it train it first.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write every data split as CSV.
    GenData(Common),
    /// Train the backbone on the base classes.
    Pretrain(Common),
    /// Decompose a pretrained backbone and fine-tune the detector.
    Finetune(Common),
    /// Score a checkpoint on every test split.
    Eval(Common),
    /// Run the component, loss, K and m ablation grids.
    Ablate(Common),
    /// Evaluate a fine-tuned detector under every family at every level.
    Robustness(Common),
    /// Report per-layer decomposition ranks, energies and initial losses.
    Inspect(Common),
    /// Finite-difference check of the tiny model's gradients.
    Gradcheck(Common),
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] MasmError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    GradCheck(String),
    #[error("{path}: {source}")]
    AtPath { path: String, source: MasmError },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::GradCheck(_) => "gradcheck",
            CliError::AtPath { source, .. } => source.kind(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn at(path: &Path) -> impl FnOnce(MasmError) -> CliError + '_ {
    move |source| CliError::AtPath { path: path.display().to_string(), source }
}

/// Config from `--config`, else the one stored in `fallback`, else defaults;
/// `--seed` wins over all of them.
fn resolve_config(c: &Common, fallback: Option<&Checkpoint>) -> CliResult<TrainConfig> {
    let mut cfg = match (&c.config, fallback) {
        (Some(p), _) => TrainConfig::load(p).map_err(at(p))?,
        (None, Some(ck)) => ck.config.clone(),
        (None, None) => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(c: &Common) -> CliResult<Option<Checkpoint>> {
    c.checkpoint.as_deref().map(|p| Checkpoint::load(p).map_err(at(p))).transpose()
}

fn prepare_out(c: &Common, cfg: &TrainConfig) -> CliResult<()> {
    std::fs::create_dir_all(&c.out)?;
    std::fs::write(c.out.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn splits_for(cfg: &TrainConfig) -> CliResult<Splits> {
    Ok(build_splits(&cfg.data, cfg.dims(), cfg.data_seed())?)
}

fn pretrain(cfg: &TrainConfig, splits: &Splits, out: &Path) -> CliResult<Checkpoint> {
    let outcome = run_pretrain(cfg, splits)?;
    outcome.checkpoint.save(&out.join("pretrained.ckpt"))?;
    println!("pretrain: test accuracy {:.6} after {} epochs", outcome.test_accuracy, outcome.epochs_run);
    Ok(outcome.checkpoint)
}

fn require_stage(ck: Checkpoint, want: Stage, cmd: &str) -> CliResult<Checkpoint> {
    if ck.stage != want {
        return Err(CliError::Usage(format!("{cmd} needs a {want:?} checkpoint, got {:?}", ck.stage).to_lowercase()));
    }
    Ok(ck)
}

fn finetune(c: &Common, cfg: &TrainConfig, splits: &Splits, pre: &Checkpoint) -> CliResult<Checkpoint> {
    let outcome = run_finetune(cfg, pre, splits)?;
    outcome.checkpoint.save(&c.out.join("finetuned.ckpt"))?;
    std::fs::write(c.out.join("metrics.csv"), metrics_csv(&outcome.record.metrics)?)?;
    if cfg.log.iterations.is_none() {
        write_iterations_csv(&c.out.join("iterations.csv"), &outcome.record.iterations)?;
    }
    if let Some(m) = find_metric(&outcome.record.metrics, "in_domain", Level::Frame) {
        println!("finetune: in-domain frame auc {:.6}", m.auc);
    }
    if let Some(m) = find_metric(&outcome.record.metrics, "heldout", Level::Frame) {
        println!("finetune: heldout frame auc {:.6}", m.auc);
    }
    println!("finetune: {:.2}s", outcome.record.wall_clock_secs);
    Ok(outcome.checkpoint)
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(c) => {
            let cfg = resolve_config(&c, None)?;
            prepare_out(&c, &cfg)?;
            let splits = splits_for(&cfg)?;
            export_splits(&splits, &c.out)?;
            for (name, s) in splits.named() {
                println!("gen-data: {name} {} samples", s.len());
            }
        }
        Command::Pretrain(c) => {
            let cfg = resolve_config(&c, None)?;
            prepare_out(&c, &cfg)?;
            pretrain(&cfg, &splits_for(&cfg)?, &c.out)?;
        }
        Command::Finetune(c) => {
            let given = load_checkpoint(&c)?;
            let cfg = resolve_config(&c, given.as_ref())?;
            prepare_out(&c, &cfg)?;
            let splits = splits_for(&cfg)?;
            let pre = match given {
                Some(ck) => require_stage(ck, Stage::Pretrained, "finetune")?,
                None => pretrain(&cfg, &splits, &c.out)?,
            };
            finetune(&c, &cfg, &splits, &pre)?;
        }
        Command::Eval(c) => {
            let ck = load_checkpoint(&c)?.ok_or_else(|| CliError::Usage("eval needs --checkpoint".into()))?;
            let cfg = resolve_config(&c, Some(&ck))?;
            prepare_out(&c, &cfg)?;
            let metrics = evaluate(&ck.model, &splits_for(&cfg)?, &cfg)?;
            std::fs::write(c.out.join("metrics.csv"), metrics_csv(&metrics)?)?;
            for m in &metrics {
                println!("eval: {} {:?} auc {:.6} ap {:.6} eer {:.6}", m.split, m.level, m.auc, m.ap, m.eer);
            }
        }
        Command::Ablate(c) => {
            let given = load_checkpoint(&c)?;
            let cfg = resolve_config(&c, given.as_ref())?;
            prepare_out(&c, &cfg)?;
            let splits = splits_for(&cfg)?;
            let pre = match given {
                Some(ck) => require_stage(ck, Stage::Pretrained, "ablate")?,
                None => pretrain(&cfg, &splits, &c.out)?,
            };
            let rows = run_ablation(&cfg, &pre, &splits);
            for r in rows.iter().filter(|r| r.outcome.is_err()) {
                eprintln!("ablate: cell {} failed", r.key);
            }
            for p in write_ablation(&c.out, &cfg, &rows)? {
                println!("ablate: wrote {}", p.display());
            }
        }
        Command::Robustness(c) => {
            let given = load_checkpoint(&c)?;
            let cfg = resolve_config(&c, given.as_ref())?;
            prepare_out(&c, &cfg)?;
            let splits = splits_for(&cfg)?;
            let tuned = match given {
                Some(ck) => require_stage(ck, Stage::Finetuned, "robustness")?,
                None => {
                    let pre = pretrain(&cfg, &splits, &c.out)?;
                    finetune(&c, &cfg, &splits, &pre)?
                }
            };
            let rows = run_robustness(&cfg, &tuned.model, &splits)?;
            std::fs::write(c.out.join("robustness.csv"), robustness_csv(&rows)?)?;
            for (level, auc) in robustness_trend(&rows) {
                println!("robustness: level {level} mean video auc {auc:.6}");
            }
        }
        Command::Inspect(c) => {
            let given = load_checkpoint(&c)?;
            let cfg = resolve_config(&c, given.as_ref())?;
            prepare_out(&c, &cfg)?;
            let ck = match given {
                Some(ck) => ck,
                None => pretrain(&cfg, &splits_for(&cfg)?, &c.out)?,
            };
            let rows = decompose_inspect(&ck, &cfg.decomposition)?;
            std::fs::write(c.out.join("inspection.csv"), inspection_csv(&rows)?)?;
            println!("inspect: {} layers", rows.len());
        }
        Command::Gradcheck(c) => {
            let cfg = resolve_config(&c, None)?;
            prepare_out(&c, &cfg)?;
            let report = tiny_grad_check(cfg.seed, GRAD_H, GRAD_TOL)?;
            let text = format!(
                "seed,h,tol,coords,max_rel_error,passed\n{},{GRAD_H:e},{GRAD_TOL:e},{},{:e},{}\n",
                cfg.seed, report.coords_checked, report.max_rel_error, report.passed
            );
            std::fs::write(c.out.join("gradcheck.csv"), text)?;
            for w in &report.warnings {
                eprintln!("gradcheck: {w}");
            }
            println!("gradcheck: {} coords, max relative error {:e}", report.coords_checked, report.max_rel_error);
            if !report.passed {
                return Err(CliError::GradCheck(format!(
                    "max relative error {:e} above {GRAD_TOL:e} at {:?}",
                    report.max_rel_error, report.worst
                )));
            }
        }
    }
    Ok(())
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail("usage", first);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
