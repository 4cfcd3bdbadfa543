use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use focusalpha::autodiff::GradCheckOptions;
use focusalpha::data::{gen_synth, Dataset, SynthSpec};
use focusalpha::evaluate::{evaluate, roc_path, write_report};
use focusalpha::fnt1;
use focusalpha::loss::{LossConfig, LossWrapper};
use focusalpha::metrics::DEFAULT_THRESHOLD;
use focusalpha::model::{BlockKind, DecoderMode, Model, ModelConfig};
use focusalpha::nn::CombineMode;
use focusalpha::train::{self, Checkpointing, TrainConfig};
use focusalpha::verify;

/// Overrides the directory searched for bare `--config` names.
const CONFIG_DIR_ENV: &str = "FOCUSALPHA_CONFIG_DIR";
const DEFAULT_CONFIG_DIR: &str = "configs";

#[derive(Parser)]
#[command(
    name = "focusalpha",
    version,
    about = "Group attention segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blob segmentation dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of images held out for validation.
        #[arg(long, default_value_t = 0.25)]
        val_fraction: f64,
    },
    /// Train a model; writes config.json, best.fnt1, last.fnt1 and history.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = LossArg::All)]
        loss: LossArg,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        /// Block kind, e.g. group_attention, basic, resnext_se.
        #[arg(long)]
        block: Option<String>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from OUT/last.fnt1.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset; writes a JSON report and a ROC CSV.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Probability maps for an FNT1 image tensor.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per case.
        #[arg(long, default_value_t = 4)]
        instances: usize,
    },
    /// Print per-layer parameter and FLOP counts.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
        size: Vec<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    /// Adaptive logarithmic wrapper around the hybrid loss.
    All,
    /// Hybrid loss alone.
    Hl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Full,
    /// Single output head instead of the multiscale decoder.
    Md,
    #[value(name = "res_a")]
    ResA,
    /// Concatenated residual groups.
    Ch,
    /// Channel shuffle combine stage.
    Cs,
}

impl Variant {
    fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Variant::Full => {}
            Variant::Md => cfg.decoder_mode = DecoderMode::Plain,
            Variant::ResA => cfg.block_kind = BlockKind::ResA,
            Variant::Ch => cfg.block_kind = BlockKind::ConcatHorizontal,
            Variant::Cs => cfg.combine_mode = CombineMode::ChannelShuffle,
        }
    }
}

/// A failure with a fixed machine-readable kind.
#[derive(Debug)]
struct Failure {
    kind: &'static str,
    msg: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

fn fail(kind: &'static str, msg: impl Into<String>) -> anyhow::Error {
    Failure {
        kind,
        msg: msg.into(),
    }
    .into()
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if let Some(e) = cause.downcast_ref::<focusalpha::Error>() {
            return e.kind();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The cause chain on one line, dropping causes already quoted by the
/// message above them and the leading kind tag.
fn message(err: &anyhow::Error, kind: &str) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = one_line(&cause.to_string());
        if parts.last().is_some_and(|p| p.ends_with(&text)) {
            continue;
        }
        let tag = format!("{kind}: ");
        parts.push(text.strip_prefix(&tag).map(str::to_string).unwrap_or(text));
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!(
                "error[usage]: {}",
                one_line(first.trim_start_matches("error: "))
            );
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = error_kind(&e);
            eprintln!("error[{kind}]: {}", message(&e, kind));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            out,
            count,
            size,
            seed,
            val_fraction,
        } => gen_data(&out, count, &size, seed, val_fraction),
        Command::Train {
            config,
            data,
            out,
            epochs,
            batch,
            seed,
            loss,
            variant,
            block,
            max_steps,
            resume,
        } => {
            let mut model_cfg = load_model_config(&config)?;
            if let Some(v) = variant {
                v.apply(&mut model_cfg);
            }
            if let Some(b) = block {
                model_cfg.block_kind = BlockKind::parse(&b)?;
            }
            model_cfg.validate()?;
            let mut train_cfg = TrainConfig {
                seed,
                max_steps,
                ..TrainConfig::default()
            };
            if let Some(e) = epochs {
                train_cfg.max_epochs = e;
            }
            if let Some(b) = batch {
                train_cfg.batch_size = b;
            }
            train_cfg.validate()?;
            let loss_cfg = LossConfig {
                wrapper: match loss {
                    LossArg::All => LossWrapper::All,
                    LossArg::Hl => LossWrapper::None,
                },
                ..LossConfig::default()
            };
            run_train(&model_cfg, &data, &out, &train_cfg, &loss_cfg, resume)
        }
        Command::Eval {
            weights,
            data,
            threshold,
            report,
        } => {
            let model = Model::load_with_sidecar(&weights)
                .with_context(|| format!("loading {}", weights.display()))?;
            let data = Dataset::load(&data)?;
            let rep = evaluate(&model, &data, threshold)?;
            ensure_parent(&report)?;
            write_report(&rep, &report)?;
            let g = &rep.global;
            println!(
                "images {} dice {:.6} jaccard {:.6} precision {:.6} recall {:.6} accuracy {:.6} auc {}",
                rep.images,
                g.dice,
                g.jaccard,
                g.precision,
                g.recall,
                g.accuracy,
                rep.auc.map_or("undefined".into(), |a| format!("{a:.6}"))
            );
            println!("report {}", report.display());
            if rep.roc.is_some() {
                println!("roc {}", roc_path(&report).display());
            }
            Ok(())
        }
        Command::Predict {
            weights,
            input,
            out,
            batch,
        } => {
            let model = Model::load_with_sidecar(&weights)
                .with_context(|| format!("loading {}", weights.display()))?;
            let mut entries =
                fnt1::load(&input).with_context(|| format!("reading {}", input.display()))?;
            let images = match entries.len() {
                1 => entries.pop().expect("one entry").1,
                n => bail!(fail(
                    "data",
                    format!(
                        "{} holds {n} tensors, expected one image batch",
                        input.display()
                    )
                )),
            };
            let probs = model.predict(&images, batch)?;
            ensure_parent(&out)?;
            fnt1::save(&out, &[("probabilities", &probs)])?;
            println!("wrote {:?} to {}", probs.shape(), out.display());
            Ok(())
        }
        Command::Gradcheck {
            tol,
            seed,
            instances,
        } => {
            if !(tol > 0.0) {
                bail!(fail("config", format!("tol must be positive, got {tol}")));
            }
            let opts = GradCheckOptions {
                tol,
                ..GradCheckOptions::default()
            };
            let report = verify::run_suite(&opts, seed, instances)?;
            for c in &report.cases {
                println!(
                    "{:<28} {:>3} instances {:>6} checked  max rel err {:.3e}  {}",
                    c.name,
                    c.instances,
                    c.checked,
                    c.max_rel_err,
                    if c.passed { "ok" } else { "FAIL" }
                );
            }
            println!(
                "total {} instances, max rel err {:.3e}, tol {:.1e}",
                report.instances, report.max_rel_err, tol
            );
            if !report.passed {
                let failed: Vec<&str> = report
                    .cases
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| c.name)
                    .collect();
                bail!(fail(
                    "gradcheck",
                    format!(
                        "{} case(s) above tolerance: {}",
                        failed.len(),
                        failed.join(", ")
                    )
                ));
            }
            Ok(())
        }
        Command::Flops { config, size } => {
            let cfg = load_model_config(&config)?;
            let model = Model::build(&cfg, 0)?;
            let summary = model.summary(&[1, cfg.in_channels, size[0], size[1]])?;
            println!("{summary}");
            Ok(())
        }
    }
}

/// `path` as given if it exists, otherwise under the config directory.
fn resolve_config(path: &Path) -> PathBuf {
    if path.exists() || path.components().count() > 1 {
        return path.to_path_buf();
    }
    let dir = std::env::var_os(CONFIG_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CONFIG_DIR));
    dir.join(path)
}

fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let resolved = resolve_config(path);
    let text = fs::read_to_string(&resolved)
        .map_err(|e| fail("config", format!("{}: {e}", resolved.display())))?;
    let cfg =
        ModelConfig::from_json(&text).with_context(|| format!("config {}", resolved.display()))?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}

fn gen_data(out: &Path, count: usize, size: &[usize], seed: u64, val_fraction: f64) -> Result<()> {
    let spec = SynthSpec {
        count,
        height: size[0],
        width: size[1],
        val_fraction,
        seed,
        ..SynthSpec::default()
    };
    spec.validate()?;
    let data = gen_synth(&spec)?;
    data.save(out)?;
    println!(
        "wrote {} images ({} train, {} val) to {}",
        data.len(),
        data.meta.split.train.len(),
        data.meta.split.val.len(),
        out.display()
    );
    Ok(())
}

fn run_train(
    model_cfg: &ModelConfig,
    data_dir: &Path,
    out: &Path,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    resume: bool,
) -> Result<()> {
    let data = Dataset::load(data_dir)?;
    let mut model = Model::build(model_cfg, train_cfg.seed)?;
    model.check_input(data.images.shape())?;

    // A fresh run trains into a staging directory that replaces `out` only on
    // success, so a failed run leaves nothing behind.
    let fresh = !(resume && out.join(train::LAST_FILE).exists());
    if fresh && out.exists() && fs::read_dir(out)?.next().is_some() {
        bail!(fail(
            "io",
            format!(
                "output directory {} is not empty; pass --resume to continue",
                out.display()
            )
        ));
    }
    let stage = if fresh {
        staging_dir(out)?
    } else {
        out.to_path_buf()
    };
    let ckpt = Checkpointing {
        dir: stage.clone(),
        resume: !fresh,
    };
    let result = train::train(&mut model, &data, train_cfg, loss_cfg, Some(&ckpt));
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            if fresh {
                let _ = fs::remove_dir_all(&stage);
            }
            return Err(e.into());
        }
    };
    if fresh {
        if out.exists() {
            fs::remove_dir(out)?;
        }
        fs::rename(&stage, out)?;
    }
    for r in &outcome.history {
        println!(
            "epoch {:>3} steps {:>5} lr {:.1e} train_loss {:.6} train_dice {:.4}{}{}",
            r.epoch,
            r.steps,
            r.lr,
            r.train_loss,
            r.train_dice,
            r.val_loss
                .map(|v| format!(" val_loss {v:.6}"))
                .unwrap_or_default(),
            if r.best { " *" } else { "" }
        );
    }
    println!(
        "steps {} best_loss {:.6} checkpoint {}",
        outcome.steps,
        outcome.best_loss,
        out.join(train::BEST_FILE).display()
    );
    Ok(())
}

fn staging_dir(out: &Path) -> Result<PathBuf> {
    let name = out
        .file_name()
        .ok_or_else(|| fail("io", format!("invalid output path {}", out.display())))?;
    let mut staged = std::ffi::OsString::from(".");
    staged.push(name);
    staged.push(".partial");
    let stage = out.with_file_name(staged);
    if stage.exists() {
        fs::remove_dir_all(&stage)?;
    }
    if let Some(p) = stage.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(stage)
}
