use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use archleak_core::arch::{documented_changes, receptive_field, spec_for_step, ArchSpec};
use archleak_core::harness::{self, load_records, ExperimentConfig, ReportKind, ReportOptions, RunOptions, OUT_ENV};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "archleak", version, about = "Privacy attacks against image classifier architectures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config; seeds already in the store are skipped.
    Run {
        config: PathBuf,
        /// Rerun seeds that already have records.
        #[arg(long)]
        force: bool,
        /// Output root; overrides the config and ARCHLEAK_OUT.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render tables or figures from record files or directories.
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// table, roc-plot, ladder-plot, sweep-plot or snapshot-grid
        #[arg(long)]
        kind: ReportKind,
        /// Log-log ROC axes for TPR at low FPR.
        #[arg(long)]
        low_fpr: bool,
        /// Metric of ladder plots.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long, env = OUT_ENV, default_value = "archleak-out")]
        out: PathBuf,
    },
    /// Describe a ladder step.
    Morph {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=14))]
        step: u8,
        /// Print the full spec as TOML.
        #[arg(long)]
        print_spec: bool,
        /// Desk-scale width divisor.
        #[arg(long)]
        desk: Option<usize>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
    },
    /// Receptive field of every layer of a TOML spec.
    Rf { spec: PathBuf },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, force, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let root = out.unwrap_or_else(|| harness::output_root(&cfg));
            let summary = harness::run(&cfg, &RunOptions { root: root.clone(), force })?;
            for p in &summary.paths {
                println!("{}", p.display());
            }
            if !summary.skipped.is_empty() {
                eprintln!("skipped seeds already in {}: {:?}", root.display(), summary.skipped);
            }
            for (seed, cause) in &summary.failures {
                eprintln!("seed {seed} failed: {cause}");
            }
            Ok(if summary.success() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Report { records, kind, low_fpr, metric, out } => {
            let recs = load_records(&records)?;
            let files = harness::report(&recs, kind, &ReportOptions { out_dir: out, low_fpr, metric })?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Morph { step, print_spec, desk, classes, side } => {
            let scale = |s: ArchSpec| desk.map_or(s.clone(), |d| s.desk(d));
            let spec = scale(spec_for_step(step, classes, [3, side, side])?);
            if print_spec {
                print!("{}", spec.to_toml());
                return Ok(ExitCode::SUCCESS);
            }
            println!("step {step}: {}", spec.hash());
            if step > 1 {
                let prev = scale(spec_for_step(step - 1, classes, [3, side, side])?);
                println!("changed: {}", prev.diff(&spec).join(", "));
                println!("documented: {}", documented_changes(step).join(", "));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Rf { spec } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec = ArchSpec::from_toml(&text)?;
            let r = receptive_field(&spec)?;
            if r.attention_global {
                println!("attention: every token sees the whole {}x{} input", spec.input_shape[1], spec.input_shape[2]);
            }
            if r.per_layer.is_empty() && !r.attention_global {
                bail!("spec has no spatial layers");
            }
            println!("{:>5}  {:<32} {:>6} {:>6} {:>6} {:>6}", "index", "layer", "kernel", "stride", "field", "jump");
            for l in &r.per_layer {
                println!("{:>5}  {:<32} {:>6} {:>6} {:>6} {:>6}", l.index, l.name, l.kernel, l.stride, l.field, l.jump);
            }
            println!("total {} px, jump {}, offset {}", r.total, r.jump, r.offset);
            Ok(ExitCode::SUCCESS)
        }
    }
}
