//! `uniadapter`: generate synthetic data, pretrain the miniature backbone,
//! adapt and evaluate it, audit tunable-parameter counts and run gradient
//! checks.
//!
//! Path flags fall back to `UNIADAPTER_*` environment variables and then
//! to the `[task]` paths of the config file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use uniadapter_core::config::{BackboneConfig, RunConfig};
use uniadapter_core::data::{DataKind, Split, WorldSpec};
use uniadapter_core::gradcheck::run_gradcheck;
use uniadapter_core::workflow;
use uniadapter_tensor::OpKind;

#[derive(Parser)]
#[command(name = "uniadapter", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the pretrain/downstream/test splits and a manifest.
    GenData {
        /// Preset (`image`, `video`, `vqa`) or a JSON world spec.
        #[arg(long, default_value = "image")]
        spec: String,
        #[arg(long, env = "UNIADAPTER_DATA")]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train backbone and heads from scratch on the pretrain split.
    Pretrain {
        #[arg(long, env = "UNIADAPTER_CONFIG")]
        config: PathBuf,
        #[arg(long, env = "UNIADAPTER_DATA")]
        data: Option<PathBuf>,
        /// Defaults to `backbone.ckpt` in the config's checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "UNIADAPTER_METRICS")]
        metrics: Option<PathBuf>,
    },
    /// Train the configured adaptation on the downstream split with the
    /// backbone frozen (unless the variant is full fine-tuning).
    Adapt {
        #[arg(long, env = "UNIADAPTER_CONFIG")]
        config: PathBuf,
        #[arg(long, env = "UNIADAPTER_BACKBONE")]
        backbone_ckpt: PathBuf,
        #[arg(long, env = "UNIADAPTER_DATA")]
        data: Option<PathBuf>,
        /// Defaults to `<variant>.ckpt` in the config's checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "UNIADAPTER_METRICS")]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split and append the metrics row.
    Eval {
        #[arg(long, env = "UNIADAPTER_CONFIG")]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Backbone for checkpoints that hold only adaptation tensors.
        #[arg(long, env = "UNIADAPTER_BACKBONE")]
        backbone_ckpt: Option<PathBuf>,
        #[arg(long, env = "UNIADAPTER_DATA")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, env = "UNIADAPTER_METRICS")]
        metrics: Option<PathBuf>,
    },
    /// Count tunable parameters without allocating tensors.
    Params {
        #[arg(long, env = "UNIADAPTER_CONFIG")]
        config: PathBuf,
        /// Replace the configured backbone with the base-size audit shape
        /// (d = 768, 12-layer stacks).
        #[arg(long)]
        audit: bool,
        /// Exact count (`18874368`) or rounded figure (`19.0M`); mismatch
        /// exits nonzero.
        #[arg(long)]
        expect: Option<String>,
        /// Also list every tensor of the plan.
        #[arg(long)]
        dump: bool,
    },
    /// Finite-difference check of every adapter, block mode, frame
    /// weighting and loss on tiny shapes in 64-bit.
    Gradcheck {
        /// Only the activation is taken from it.
        #[arg(long, env = "UNIADAPTER_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace one backward rule with a wrong one (negative control).
        #[arg(long, hide = true)]
        corrupt_backward: Option<OpKind>,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn data_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.task.data.clone())
        .context("no data directory: pass --data, set UNIADAPTER_DATA or `data` in [task]")
}

fn output(flag: Option<PathBuf>, cfg: &RunConfig, file: &str) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    let dir = cfg
        .task
        .checkpoints
        .clone()
        .context("no output path: pass --out or set `checkpoints` in [task]")?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.join(file))
}

fn metrics_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Option<PathBuf> {
    flag.or_else(|| cfg.task.metrics.clone())
}

fn world_spec(spec: &str) -> Result<WorldSpec> {
    Ok(match spec {
        "image" => WorldSpec::preset(DataKind::Image),
        "video" => WorldSpec::preset(DataKind::Video),
        "vqa" => WorldSpec::preset(DataKind::Vqa),
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading world spec {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing world spec {path}"))?
        }
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { spec, out, seed } => {
            let mut spec = world_spec(&spec)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let m = workflow::cmd_gen_data(&spec, &out)?;
            for (split, info) in &m.splits {
                println!("{:<10} {:>6} records", split.as_str(), info.count);
            }
            println!("spec hash {}", m.spec_hash);
        }
        Command::Pretrain { config, data, out, metrics } => {
            let cfg = load_config(&config)?;
            let data = data_dir(data, &cfg)?;
            let out = output(out, &cfg, "backbone.ckpt")?;
            let p = workflow::cmd_pretrain(&cfg, &data, &out, metrics_path(metrics, &cfg).as_deref())?;
            let last = p.reports.last().map_or(f64::NAN, |r| r.loss);
            println!("pretrained {} steps, final loss {last:.6}; wrote {}", p.reports.len(), out.display());
        }
        Command::Adapt { config, backbone_ckpt, data, out, metrics } => {
            let cfg = load_config(&config)?;
            let data = data_dir(data, &cfg)?;
            let out = output(out, &cfg, &format!("{}.ckpt", cfg.adaptation.variant))?;
            let a = workflow::cmd_adapt(&cfg, &backbone_ckpt, &data, &out, metrics_path(metrics, &cfg).as_deref())?;
            let steps = a.trainer.step;
            let trainable = a.trainer.store.count_trainable();
            println!(
                "adapted {} for {steps} steps ({trainable} trainable parameters); backbone {}; wrote {}",
                cfg.adaptation.variant,
                if a.backbone_before == a.backbone_after { "unchanged" } else { "updated" },
                out.display()
            );
        }
        Command::Eval { config, ckpt, backbone_ckpt, data, split, metrics } => {
            let cfg = load_config(&config)?;
            let data = data_dir(data, &cfg)?;
            let split = Split::parse(&split)?;
            let rec = workflow::cmd_eval(
                &cfg,
                &ckpt,
                backbone_ckpt.as_deref(),
                &data,
                split,
                metrics_path(metrics, &cfg).as_deref(),
            )?;
            let show = |name: &str, v: Option<f64>| v.map(|x| format!(" {name} {x:.2}")).unwrap_or_default();
            println!(
                "{} {}:{}{}{}{}{}{}",
                rec.task,
                rec.split,
                show("R@1", rec.r1),
                show("R@5", rec.r5),
                show("R@10", rec.r10),
                show("MdR", rec.mdr),
                show("R@Mean", rec.rmean),
                show("acc", rec.acc)
            );
        }
        Command::Params { config, audit, expect, dump } => {
            let mut cfg = load_config(&config)?;
            if audit {
                cfg.backbone = BackboneConfig::base_audit();
            }
            let report = workflow::cmd_params(&cfg)?;
            print!("{}", report.render());
            if dump {
                let plan = uniadapter_core::build_parameter_plan(&cfg.backbone, &cfg.adaptation)?;
                print!("{}", plan.dump());
            }
            if let Some(e) = expect {
                workflow::check_expectation(&report, &e)?;
                println!("matches expected {e}");
            }
        }
        Command::Gradcheck { config, seed, corrupt_backward } => {
            let activation = match config {
                Some(p) => load_config(&p)?.adaptation.activation,
                None => RunConfig::default().adaptation.activation,
            };
            let report = run_gradcheck(seed, activation, corrupt_backward)?;
            print!("{}", report.render());
            if !report.passed() {
                let names: Vec<&str> = report.failures().iter().map(|r| r.name).collect();
                eprintln!("gradient check failed: {}", names.join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
