//! Experiment presets, the result store and reports.

mod config;
mod presets;
mod report;
mod store;

use std::path::{Path, PathBuf};
use std::sync::mpsc;

pub use config::{
    parse_selection, AiaSection, AttributeSetting, DataSection, DefenseAttack, DefenseSection, ExperimentConfig, GiaSection,
    MiaSection, ModelSection, Preset, DESK_BATCH, DESK_EPOCHS, DESK_GIA_ITERATIONS, SCHEMA_VERSION,
};
pub use presets::{run_seed, stream, Outcome};
pub use report::{report, save_png, ReportKind, ReportOptions, GRID_ITERATIONS};
pub use store::{key_for, load_record, load_records, slug, IndexRow, ResultRecord, Store, COMPLETE_MARKER, FAILURE_VARIANT, TOOL_VERSION};

use crate::error::Result;
use crate::exec;

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "ARCHLEAK_OUT";

/// `output_dir` of the config, else `$ARCHLEAK_OUT`, else `./archleak-out`.
pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| "archleak-out".into())
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub root: PathBuf,
    /// Rerun seeds that already have records.
    pub force: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    /// Records written by this run, failures included.
    pub records: Vec<ResultRecord>,
    pub paths: Vec<PathBuf>,
    /// Seeds skipped because the store already holds them.
    pub skipped: Vec<u64>,
    pub failures: Vec<(u64, String)>,
}

impl RunSummary {
    pub fn success(&self) -> bool {
        self.failures.is_empty()
    }

    /// Successful records of `variant`.
    pub fn of(&self, variant: &str) -> Vec<&ResultRecord> {
        self.records.iter().filter(|r| r.ok() && r.variant == variant).collect()
    }
}

enum Message {
    Outcome(usize, Outcome),
    Done(usize, std::result::Result<(), String>),
}

/// Execute the preset for every seed not yet in the store.
///
/// Seeds run on parallel workers; this thread is the only writer. A seed
/// that fails keeps the records it finished and gains a failure record.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let store = Store::open(&opts.root)?;
    store.save_config(cfg)?;
    let hash = cfg.hash();
    let done = store.completed_seeds(&hash)?;
    let mut summary = RunSummary::default();
    let mut pending = Vec::new();
    for &s in &cfg.seeds {
        if done.contains(&s) && !opts.force {
            summary.skipped.push(s);
        } else {
            pending.push(s);
        }
    }
    let dirs = pending.iter().map(|&s| store.new_run_dir(&hash, s)).collect::<Result<Vec<_>>>()?;
    let (tx, rx) = mpsc::channel();
    let mut first_err = None;
    std::thread::scope(|scope| {
        let (pending, dirs) = (&pending, &dirs);
        scope.spawn(move || {
            exec::map_indexed(pending.len(), |i| {
                let tx = tx.clone();
                tracing::info!(preset = cfg.preset.as_str(), seed = pending[i], "seed started");
                let emit = |o: Outcome| {
                    let _ = tx.send(Message::Outcome(i, o));
                };
                let res = run_seed(cfg, pending[i], &dirs[i], &emit);
                let _ = tx.send(Message::Done(i, res.map_err(|e| e.to_string())));
            });
        });
        for msg in rx {
            let res = match msg {
                Message::Outcome(i, o) => write_outcome(&store, &dirs[i], cfg, &hash, pending[i], o, &mut summary),
                Message::Done(i, Ok(())) => store.mark_complete(&dirs[i]),
                Message::Done(i, Err(cause)) => {
                    tracing::error!(seed = pending[i], "{cause}");
                    summary.failures.push((pending[i], cause));
                    let o = Outcome {
                        variant: FAILURE_VARIANT.into(),
                        spec_hash: None,
                        recipe_hash: None,
                        metrics: Default::default(),
                        artifacts: Vec::new(),
                        wall_time_s: 0.0,
                    };
                    write_outcome(&store, &dirs[i], cfg, &hash, pending[i], o, &mut summary)
                }
            };
            if let Err(e) = res {
                first_err.get_or_insert(e);
            }
        }
    });
    match first_err {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

fn write_outcome(
    store: &Store,
    dir: &Path,
    cfg: &ExperimentConfig,
    hash: &str,
    seed: u64,
    o: Outcome,
    summary: &mut RunSummary,
) -> Result<()> {
    let error = (o.variant == FAILURE_VARIANT).then(|| {
        summary.failures.iter().rev().find(|(s, _)| *s == seed).map(|(_, c)| c.clone()).unwrap_or_default()
    });
    let record = ResultRecord {
        preset: cfg.preset,
        variant: o.variant,
        config_hash: hash.to_string(),
        spec_hash: o.spec_hash,
        recipe_hash: o.recipe_hash,
        seed,
        metrics: o.metrics,
        wall_time_s: o.wall_time_s,
        artifacts: o.artifacts.iter().map(|a| store.relative(a)).collect(),
        tool_version: TOOL_VERSION.into(),
        error,
    };
    let path = store.append(dir, &record)?;
    tracing::info!(variant = %record.variant, seed, path = %path.display(), "record written");
    summary.records.push(record);
    summary.paths.push(path);
    Ok(())
}
