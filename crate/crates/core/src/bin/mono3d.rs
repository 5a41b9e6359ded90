use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use mono3d::commands;
use mono3d::config::{KeyValues, RunConfig};
use mono3d::metrics::Interpolation;
use mono3d::refine::Variant;
use mono3d::Error;

/// Monocular 3D vehicle pose and shape estimation on synthetic scenes.
#[derive(Parser)]
#[command(name = "mono3d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set noise.box_px_sigma=1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of frames.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Learn a morphable model from dataset landmarks.
    ShapeLearn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Basis shape count.
        #[arg(long)]
        basis: Option<usize>,
    },
    /// Refine every measurement of a dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Model file in the box frame; defaults to the built-in template.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "v4")]
        variant: Variant,
    },
    /// Evaluate predictions against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Ground-truth label directory.
        #[arg(long)]
        gt: PathBuf,
        /// Prediction label directory.
        #[arg(long)]
        pred: PathBuf,
        /// 2D IoU gate for ALP, or `none`.
        #[arg(long)]
        alp_gate: Option<String>,
        /// Interpolation points (11 or 41).
        #[arg(long)]
        interpolation: Option<Interpolation>,
        /// Also write BEV footprint and wireframe polylines.
        #[arg(long)]
        plots: bool,
    },
    /// Compare variants v1 to v4 on one dataset.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_INSTANCE: u8 = 3;

fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg = RunConfig::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    let mut kv = KeyValues::default();
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not KEY=VALUE")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(s) = common.seed {
        kv.set("run.seed", s);
    }
    if let Some(j) = common.jobs {
        kv.set("run.jobs", j);
    }
    for (k, v) in extra {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    cfg.apply(&kv)?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> anyhow::Result<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()).into())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Synth { common, scenes } => {
            let cfg = resolve(&common, &[("run.scenes", scenes.map(|s| s.to_string()))])?;
            let out = out_dir(&common)?;
            let s = commands::synth(&cfg, &out)?;
            println!("wrote {} frames with {} instances to {}", s.frames, s.instances, out.display());
            Ok(0)
        }
        Command::ShapeLearn { common, data, basis } => {
            let cfg = resolve(&common, &[("learn.n_basis", basis.map(|b| b.to_string()))])?;
            let out = out_dir(&common)?;
            let s = commands::shape_learn(&cfg, &data, &out)?;
            print!("{}", s.report);
            Ok(0)
        }
        Command::Fit {
            common,
            data,
            model,
            variant,
        } => {
            let cfg = resolve(&common, &[])?;
            let out = out_dir(&common)?;
            let s = commands::fit(&cfg, &data, model.as_deref(), variant, &out)?;
            println!("fitted {} instances ({} failed) with {variant}", s.instances, s.failures);
            Ok(if s.failures > 0 { EXIT_INSTANCE } else { 0 })
        }
        Command::Eval {
            common,
            gt,
            pred,
            alp_gate,
            interpolation,
            plots,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("eval.alp_gate_iou", alp_gate),
                    ("eval.interpolation", interpolation.map(|i| i.to_string())),
                ],
            )?;
            let r = commands::eval(&cfg, &gt, &pred, common.out.as_deref(), plots)?;
            print!("{}", r.table);
            Ok(0)
        }
        Command::Ablate { common, data, model } => {
            let cfg = resolve(&common, &[])?;
            let out = out_dir(&common)?;
            let rows = commands::ablate(&cfg, &data, model.as_deref(), &out)?;
            print!("{}", commands::format_ablation(&rows));
            let failures: usize = rows.iter().map(|r| r.failures).sum();
            Ok(if failures > 0 { EXIT_INSTANCE } else { 0 })
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) | Error::Parse { .. } | Error::MissingFrames(_) => EXIT_IO,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
