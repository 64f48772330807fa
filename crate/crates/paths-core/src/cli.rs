//! The `paths` command line.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data,
//! file-format or numeric errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis::{
    bench_params, importance_heatmap, latency_benchmark, write_heatmap, BenchMode,
};
use crate::config::{ContextMode, PathsConfig, SelectionMode};
use crate::dataset::{embed_pyramid, load_samples, synthetic_slide, Dataset, DESK_FINEST_GRID};
use crate::error::{PathsError, Result};
use crate::features::{read_feature_grids, write_feature_grids};
use crate::model::{load_checkpoint, paths_forward, save_checkpoint, ProcessorParams};
use crate::pyramid::{load_slide, save_slide};
use crate::survival::{read_labels, write_labels};
use crate::train::{evaluate, inference_options, train_model};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "train_report.json";
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Parser, Debug)]
#[command(name = "paths", version, about = "Hierarchical patch selection for pyramidal slide images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// INI-style `key = value` config; the desk profile when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Extra `key=value` config overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic slides with planted lesions and survival labels.
    Synth {
        #[arg(long)]
        count: usize,
        /// Finest-level patch grid side.
        #[arg(long, default_value_t = DESK_FINEST_GRID)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Embed every foreground patch of every slide.
    Embed {
        /// Directory of slide directories.
        #[arg(long)]
        slides: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train on embedded slides and write a checkpoint and report.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        context: Option<ContextMode>,
        #[arg(long)]
        selection: Option<SelectionMode>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Test-split c-index of a checkpoint, as JSON on stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Importance heatmap (16-bit PGM and CSV) for one embedded slide.
    Heatmap {
        /// Feature directory of a single slide.
        #[arg(long)]
        features: PathBuf,
        /// Untrained parameters from the seed when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Patch counts and per-stage latency over slide directories.
    Bench {
        #[arg(long)]
        slides: PathBuf,
        #[arg(long, default_value = "paths")]
        mode: BenchMode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                2
            } else {
                1
            }
        }
    }
}

fn load_config(common: &Common) -> Result<PathsConfig> {
    let mut cfg = match &common.config {
        Some(p) => PathsConfig::load(p)?,
        None => PathsConfig::desk(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PathsError::InvalidConfig(format!("override `{kv}` is not key=value")))?;
        cfg.set(k.trim(), v.trim()).map_err(PathsError::InvalidConfig)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PathsError::InvalidConfig(format!("thread pool: {e}")))
}

/// Sorted subdirectories of `dir`.
fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| PathsError::io(dir, e))? {
        let entry = entry.map_err(|e| PathsError::io(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| PathsError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| PathsError::io(path, e))
}

fn load_dataset(features: &Path, labels: &Path, cfg: &PathsConfig) -> Result<Dataset> {
    let records = read_labels(labels)?;
    let samples = load_samples(features, &records, None)?;
    Dataset::split(samples, cfg.b, cfg.seed)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            count,
            grid,
            out,
            common,
        } => {
            let cfg = load_config(&common)?;
            fs::create_dir_all(&out).map_err(|e| PathsError::io(&out, e))?;
            let mut records = Vec::with_capacity(count);
            for i in 0..count {
                let slide = synthetic_slide(i, grid, &cfg, cfg.seed)?;
                save_slide(&out.join(&slide.pyramid.slide_id), &slide.pyramid, Some(&slide.truth))?;
                records.push(slide.record);
            }
            write_labels(&out.join(LABELS_FILE), &records)?;
            println!("{}", json!({ "slides": count, "out": out }));
            Ok(())
        }
        Command::Embed {
            slides,
            out,
            workers,
            common,
        } => {
            let cfg = load_config(&common)?;
            let dirs = subdirs(&slides)?;
            let pool = thread_pool(workers)?;
            for dir in &dirs {
                let (pyramid, _) = load_slide(dir)?;
                let grids = pool.install(|| embed_pyramid(&pyramid, &cfg, workers))?;
                write_feature_grids(&out.join(&pyramid.slide_id), &grids)?;
            }
            println!("{}", json!({ "slides": dirs.len(), "out": out }));
            Ok(())
        }
        Command::Train {
            features,
            labels,
            out,
            context,
            selection,
            workers,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(c) = context {
                cfg.ablation.context = c;
            }
            if let Some(s) = selection {
                cfg.ablation.selection = s;
            }
            let ds = load_dataset(&features, &labels, &cfg)?;
            let (params, report) = thread_pool(workers)?.install(|| train_model(&ds, &cfg, cfg.ablation))?;
            fs::create_dir_all(&out).map_err(|e| PathsError::io(&out, e))?;
            save_checkpoint(&out.join(CHECKPOINT_FILE), &params, &cfg)?;
            write_json(&out.join(REPORT_FILE), &report)?;
            println!("{}", json!({ "test_c_index": report.test_c_index, "best_epoch": report.best_epoch }));
            Ok(())
        }
        Command::Eval {
            checkpoint,
            features,
            labels,
            workers,
        } => {
            let (params, cfg) = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&features, &labels, &cfg)?;
            let c = thread_pool(workers)?.install(|| evaluate(&params, &ds.test, &cfg, cfg.ablation))?;
            println!("{}", json!({ "test_c_index": c, "test_slides": ds.test.len() }));
            Ok(())
        }
        Command::Heatmap {
            features,
            checkpoint,
            out,
            common,
        } => {
            let (params, cfg) = params_and_config(checkpoint.as_deref(), &common)?;
            let grids = read_feature_grids(&features)?;
            let slide_id = features
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "slide".into());
            let opts = inference_options(&cfg, cfg.ablation, &slide_id);
            let fwd = paths_forward(&grids, &params, &cfg, &opts)?;
            let heat = importance_heatmap(&fwd, &cfg)?;
            let scale = write_heatmap(&out, &format!("{slide_id}_heatmap"), &heat)?;
            println!("{}", json!({ "slide_id": slide_id, "scale": scale, "selected": heat.patches.len() }));
            Ok(())
        }
        Command::Bench {
            slides,
            mode,
            checkpoint,
            out,
            common,
        } => {
            let (params, cfg) = params_and_config(checkpoint.as_deref(), &common)?;
            let dirs = subdirs(&slides)?;
            let report = latency_benchmark(&dirs, &params, &cfg, mode)?;
            write_json(&out, &report)?;
            Ok(())
        }
    }
}

/// A checkpoint's parameters and config, or seeded untrained parameters
/// under the command-line config.
fn params_and_config(checkpoint: Option<&Path>, common: &Common) -> Result<(ProcessorParams, PathsConfig)> {
    match checkpoint {
        Some(p) => load_checkpoint(p),
        None => {
            let cfg = load_config(common)?;
            Ok((bench_params(&cfg), cfg))
        }
    }
}
