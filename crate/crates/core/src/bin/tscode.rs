use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use tscode::cost::{compare_heads, detector_topology, full_scale_report, full_scale_variant, BackboneTopology, Convention, CostReport};
use tscode::gradsuite::{check_all_ops, check_head, check_op, toy_tscode_head, OpCheck};
use tscode::harness::config::ExperimentConfig;
use tscode::harness::dataset::write_dataset;
use tscode::harness::experiment::{artifacts_root, eval_run, report, run_experiment, sweep};
use tscode::tensor::GradCheckConfig;
use tscode::Error;

const DEFAULT_REPORT: [&str; 4] = ["decoupled", "tscode", "sce-only", "dpe-only"];

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

/// Trailing `--section.key value` pairs (or `--key=value`) override config keys.
#[derive(Parser)]
#[command(name = "tscode", version, about = "Dense detector lab: data, training, evaluation and cost accounting")]
struct Cli {
    /// Log more (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply to anything it omits.
    #[arg(short, long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset on disk.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train one configuration and write its artifacts.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to `<artifacts>/<label>`, suffixed
        /// `-s<seed>` for nonzero seeds.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Dataset written by `gen-data`; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Re-score a finished run from its checkpoint.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Analytic MACs and parameters per module.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Use the full-size ResNet-50 detector at 1280x800 with this head
        /// (decoupled, coupled, tscode, sce-only, dpe-only).
        #[arg(long)]
        full_scale: Option<String>,
        /// Also write the CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train once per value of one config key.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "head.dpe_levels")]
        key: String,
        /// Semicolon-separated values.
        #[arg(long, default_value = "l;l,l+1;l-1,l,l+1")]
        values: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Merge finished runs into a comparison table and loss plot.
    Report {
        /// Run directories; each is labelled by its directory name.
        runs: Vec<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every op and the head.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check a single op.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
}

/// Pulls `--a.b value` / `--a.b=value` (and `--seed`, `--name`) out of argv.
fn split_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    let mut in_grad_check = false;
    while let Some(a) = it.next() {
        in_grad_check |= a == "grad-check";
        let key = a.strip_prefix("--").map(|k| k.split_once('=').map_or(k, |(k, _)| k));
        let is_override = key.is_some_and(|k| k.contains('.') || (!in_grad_check && matches!(k, "seed" | "name")));
        if !is_override {
            rest.push(a);
            continue;
        }
        let body = &a[2..];
        match body.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().with_context(|| format!("override `{a}` needs a value"))?;
                overrides.push((body.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn load_config(args: &ConfigArgs, overrides: &[(String, String)]) -> tscode::Result<ExperimentConfig> {
    match &args.config {
        Some(p) => ExperimentConfig::load(p, overrides),
        None => ExperimentConfig::parse("", overrides),
    }
}

fn run_name(cfg: &ExperimentConfig) -> String {
    match cfg.seed {
        0 => cfg.label(),
        s => format!("{}-s{s}", cfg.label()),
    }
}

fn print_checks(checks: &[OpCheck]) -> bool {
    for c in checks {
        println!(
            "{:<22} instances {:>3}  max rel err {:.3e}  {}",
            c.op,
            c.instances,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    checks.iter().all(|c| c.passed)
}

fn write_cost(report: &CostReport, csv: Option<&Path>) -> anyhow::Result<()> {
    print!("{}", report.to_table());
    match csv {
        Some(p) => std::fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?,
        None => print!("\n{}", report.to_csv()),
    }
    Ok(())
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = load_config(&cfg, &overrides)?;
            write_dataset(&out, &cfg.data, cfg.seed)?;
            println!("wrote {} train / {} val images to {}", cfg.data.train_images, cfg.data.val_images, out.display());
        }
        Command::Train { cfg, out, data } => {
            let cfg = load_config(&cfg, &overrides)?;
            let out = out.unwrap_or_else(|| artifacts_root().join(run_name(&cfg)));
            let m = run_experiment(&cfg, data.as_deref(), &out)?;
            println!(
                "{}: AP {:.4}  AP50 {:.4}  AP75 {:.4}  final cls loss {:.4}  -> {}",
                m.label,
                m.ap,
                m.ap50,
                m.ap75,
                m.final_loss_cls,
                out.display()
            );
        }
        Command::Eval { run, data } => {
            let (stored, fresh) = eval_run(&run, data.as_deref())?;
            println!("stored:     AP {}  AP50 {}  AP75 {}", stored.ap, stored.ap50, stored.ap75);
            println!("recomputed: AP {}  AP50 {}  AP75 {}", fresh.ap, fresh.ap50, fresh.ap75);
            if stored != fresh {
                bail!("recomputed metrics differ from the stored ones");
            }
        }
        Command::Flops { cfg, full_scale, csv } => match full_scale {
            Some(name) => {
                let head = full_scale_variant(&name)?;
                let r = full_scale_report(&head)?;
                write_cost(&r, csv.as_deref())?;
                let base = full_scale_report(&full_scale_variant("decoupled")?)?;
                let d = compare_heads(&base, &r)?;
                println!("\nhead delta vs decoupled: {:+.2} GFLOPs", d.delta_gflops());
            }
            None => {
                let cfg = load_config(&cfg, &overrides)?;
                let s = cfg.data.image_size;
                let topo = BackboneTopology::Toy(cfg.model.clone());
                let layers = detector_topology(&topo, cfg.model.fpn_width, &cfg.head_variant()?, s, s)?;
                write_cost(&CostReport::from_layers(&layers, Convention::new(s, s))?, csv.as_deref())?;
            }
        },
        Command::Sweep { cfg, key, values, out, data } => {
            let cfg = load_config(&cfg, &overrides)?;
            let values: Vec<String> = values.split(';').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
            let out = out.unwrap_or_else(|| artifacts_root().join(format!("sweep-{key}")));
            for r in sweep(&cfg, &key, &values, data.as_deref(), &out)? {
                println!("{key}={:<12} AP {:.4}  AP50 {:.4}  AP75 {:.4}", r.setting, r.metrics.ap, r.metrics.ap50, r.metrics.ap75);
            }
            println!("-> {}", out.join("sweep.csv").display());
        }
        Command::Report { runs, out } => {
            let root = artifacts_root();
            let runs: Vec<(String, PathBuf)> = if runs.is_empty() {
                DEFAULT_REPORT.iter().map(|v| (v.to_string(), root.join(v))).collect()
            } else {
                runs.into_iter()
                    .map(|d| (d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned()), d))
                    .collect()
            };
            let out = out.unwrap_or_else(|| root.join("report"));
            for r in report(&runs, &out)? {
                match r.metrics {
                    Some(m) => println!("{:<24} AP {:.4}  AP50 {:.4}  AP75 {:.4}", r.variant, m.ap, m.ap50, m.ap75),
                    None => println!("{:<24} absent", r.variant),
                }
            }
            println!("-> {}", out.display());
        }
        Command::GradCheck { instances, seed, op, tolerance, step } => {
            let gc = GradCheckConfig { step, tolerance, max_probes_per_leaf: None };
            let mut checks = match op.as_deref() {
                Some("head") => Vec::new(),
                Some(op) => vec![check_op(op, instances, seed, &gc)?],
                None => check_all_ops(instances, seed, &gc)?,
            };
            if op.is_none() || op.as_deref() == Some("head") {
                checks.push(check_head(&toy_tscode_head(2, 4), 4, 64, seed, &gc)?);
            }
            if !print_checks(&checks) {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let cli = Cli::parse_from(args);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
