//! Importance heatmaps, lesion enrichment, and patch-count / latency
//! benchmarks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::config::{AblationMode, PathsConfig};
use crate::dataset::{pyramid_masks, synthetic_dataset, Sample};
use crate::error::{PathsError, Result};
use crate::features::{FeatureGrid, PatchEncoder, PatchRef};
use crate::model::{paths_forward, paths_forward_with, ForwardOptions, ForwardOutput, ProcessorParams};
use crate::nn::Params;
use crate::pyramid::{load_slide, GroundTruth, PyramidImage};
use crate::rng::derive_seed;
use crate::train::{inference_options, train_model, TrainReport};

/// One selected patch and its importance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedPatch {
    pub level: usize,
    pub u: usize,
    pub v: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapResult {
    pub grid_w: usize,
    pub grid_h: usize,
    /// Row-major (`v` outer) heat at finest-level patch resolution.
    pub heat: Vec<f64>,
    pub patches: Vec<SelectedPatch>,
}

impl HeatmapResult {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.heat[v * self.grid_w + u]
    }

    pub fn max(&self) -> f64 {
        self.heat.iter().copied().fold(0.0, f64::max)
    }
}

/// Weight of level `i` (0-based from the coarsest) in the heatmap: the
/// coarsest level counts 1/2, the next 1/4, and so on.
pub fn level_weight(level: usize) -> f64 {
    0.5f64.powi(level as i32 + 1)
}

/// Heat of a finest cell is the weighted sum, over levels, of the importance
/// of the selected patch covering it at that level.
pub fn importance_heatmap(out: &ForwardOutput, cfg: &PathsConfig) -> Result<HeatmapResult> {
    let n = out.levels.len();
    if n == 0 || n != cfg.n {
        return Err(PathsError::State(format!("forward output has {n} of {} levels", cfg.n)));
    }
    let (gw, gh) = out.levels[n - 1].grid;
    let mut heat = vec![0.0; gw * gh];
    let mut patches = Vec::new();
    for (i, trace) in out.levels.iter().enumerate() {
        if trace.alpha.len() != trace.state.len() {
            return Err(PathsError::State(format!("level {i} is missing importances")));
        }
        let scale = cfg.m.pow((n - 1 - i) as u32);
        let w = level_weight(i);
        for (r, &a) in trace.state.selected.iter().zip(&trace.alpha) {
            patches.push(SelectedPatch {
                level: i,
                u: r.u,
                v: r.v,
                alpha: a,
            });
            for y in r.v * scale..((r.v + 1) * scale).min(gh) {
                for x in r.u * scale..((r.u + 1) * scale).min(gw) {
                    heat[y * gw + x] += w * a;
                }
            }
        }
    }
    Ok(HeatmapResult {
        grid_w: gw,
        grid_h: gh,
        heat,
        patches,
    })
}

/// 16-bit binary PGM with the heat scaled so its maximum maps to 65535.
/// The scale factor (pixel value per unit heat) is returned and recorded in
/// a header comment.
pub fn heatmap_pgm(result: &HeatmapResult) -> (Vec<u8>, f64) {
    let max = result.max();
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    let mut out = format!("P5\n# scale {scale:e}\n{} {}\n65535\n", result.grid_w, result.grid_h).into_bytes();
    for &h in &result.heat {
        let q = (h * scale).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    (out, scale)
}

pub fn heatmap_csv(result: &HeatmapResult) -> String {
    let mut s = String::from("level,u,v,alpha\n");
    for p in &result.patches {
        let _ = writeln!(s, "{},{},{},{}", p.level, p.u, p.v, p.alpha);
    }
    s
}

/// Writes `<stem>.pgm` and `<stem>.csv` and returns the PGM scale factor.
pub fn write_heatmap(dir: &Path, stem: &str, result: &HeatmapResult) -> Result<f64> {
    fs::create_dir_all(dir).map_err(|e| PathsError::io(dir, e))?;
    let (pgm, scale) = heatmap_pgm(result);
    let p = dir.join(format!("{stem}.pgm"));
    fs::write(&p, pgm).map_err(|e| PathsError::io(&p, e))?;
    let c = dir.join(format!("{stem}.csv"));
    fs::write(&c, heatmap_csv(result)).map_err(|e| PathsError::io(&c, e))?;
    Ok(scale)
}

/// Share of finest-level selected patches inside a lesion divided by the
/// lesion share of finest-level foreground. `None` when the slide has no
/// lesion foreground or nothing was selected.
pub fn lesion_enrichment(out: &ForwardOutput, finest: &FeatureGrid, truth: &GroundTruth) -> Option<f64> {
    let last = out.levels.last()?;
    let level = out.levels.len() - 1;
    let fg = finest.mask().foreground();
    let lesion_fg = fg.iter().filter(|&&(u, v)| truth.is_lesion(level, u, v)).count();
    if lesion_fg == 0 || last.state.is_empty() {
        return None;
    }
    let hits = last
        .state
        .selected
        .iter()
        .filter(|r| truth.is_lesion(level, r.u, r.v))
        .count();
    let selected_share = hits as f64 / last.state.len() as f64;
    let area_share = lesion_fg as f64 / fg.len() as f64;
    Some(selected_share / area_share)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Paths,
    Full,
}

impl std::str::FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paths" => Ok(BenchMode::Paths),
            "full" => Ok(BenchMode::Full),
            other => Err(format!("unknown bench mode {other:?} (expected paths or full)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideCounts {
    pub slide_id: String,
    /// Patches processed per level by the selection pass.
    pub paths_per_level: Vec<usize>,
    /// Foreground patches per level.
    pub full_per_level: Vec<usize>,
    pub paths_total: usize,
    /// Foreground patches at the finest level, the load of a full-slide model.
    pub full_total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub mean_ms: f64,
    /// Standard error of the mean; 0 for a single slide.
    pub sem_ms: f64,
}

impl StageTiming {
    pub fn from_samples(ms: &[f64]) -> Self {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let sem = if ms.len() > 1 {
            let var = ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        StageTiming { mean_ms: mean, sem_ms: sem }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub io: StageTiming,
    pub embed: StageTiming,
    pub forward: StageTiming,
    pub total: StageTiming,
    /// Per-slide `[io, embed, forward]` milliseconds.
    pub per_slide_ms: Vec<[f64; 3]>,
    /// Patches embedded per slide.
    pub embedded: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub slide_count: usize,
    pub slides: Vec<SlideCounts>,
    pub stages: Option<StageReport>,
    pub hardware_note: String,
}

pub fn hardware_note() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "{} {}, {threads} hardware threads, single-threaded timing",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Parameters used when a benchmark is run without a trained checkpoint.
pub fn bench_params(cfg: &PathsConfig) -> ProcessorParams {
    ProcessorParams::new(cfg, derive_seed(cfg.seed, "bench-params"))
}

fn embed_rows(
    pyramid: &PyramidImage,
    enc: &PatchEncoder,
    refs: &[PatchRef],
    embedded: &mut usize,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((refs.len(), enc.d));
    for (mut row, &r) in out.rows_mut().into_iter().zip(refs) {
        let patch = pyramid.extract_patch(r)?;
        let e = enc.embed_patch(&patch, pyramid.patch_size)?;
        row.iter_mut().zip(&e).for_each(|(d, &s)| *d = f64::from(s));
        *embedded += 1;
    }
    Ok(out)
}

/// The selection pass straight from pixels: tissue masks first, then each
/// level embeds only the patches it is about to process. Returns the output
/// together with the number of embedded patches and the time spent in the
/// encoder.
pub fn paths_forward_from_pixels(
    pyramid: &PyramidImage,
    params: &ProcessorParams,
    cfg: &PathsConfig,
    opts: &ForwardOptions,
) -> Result<(ForwardOutput, usize, f64)> {
    let masks = pyramid_masks(pyramid, cfg)?;
    let enc = PatchEncoder::new(cfg.d, derive_seed(cfg.seed, "encoder"));
    let mut embedded = 0;
    let mut embed_ms = 0.0;
    let out = paths_forward_with(&masks, params, cfg, opts, &mut |state| {
        let t = Instant::now();
        let rows = embed_rows(pyramid, &enc, &state.selected, &mut embedded);
        embed_ms += t.elapsed().as_secs_f64() * 1e3;
        rows
    })?;
    Ok((out, embedded, embed_ms))
}

/// Exact per-level patch counts for one slide. `paths` counts what the
/// selection pass actually processes; `full` counts foreground patches.
pub fn slide_counts(pyramid: &PyramidImage, params: &ProcessorParams, cfg: &PathsConfig) -> Result<SlideCounts> {
    let masks = pyramid_masks(pyramid, cfg)?;
    let full_per_level: Vec<usize> = masks.iter().map(|m| m.count()).collect();
    let (out, _, _) = paths_forward_from_pixels(pyramid, params, cfg, &ForwardOptions::default())?;
    let paths_per_level = out.counts();
    Ok(SlideCounts {
        slide_id: pyramid.slide_id.clone(),
        paths_total: paths_per_level.iter().sum(),
        full_total: *full_per_level.last().unwrap_or(&0),
        paths_per_level,
        full_per_level,
    })
}

/// Patch counts for one pyramid. Untrained parameters derived from the
/// config seed are used when `params` is `None`.
pub fn count_patches_benchmark(
    pyramid: &PyramidImage,
    cfg: &PathsConfig,
    mode: BenchMode,
    params: Option<&ProcessorParams>,
) -> Result<BenchReport> {
    let owned;
    let params = match params {
        Some(p) => p,
        None => {
            owned = bench_params(cfg);
            &owned
        }
    };
    Ok(BenchReport {
        mode,
        slide_count: 1,
        slides: vec![slide_counts(pyramid, params, cfg)?],
        stages: None,
        hardware_note: hardware_note(),
    })
}

/// The full-slide baseline forward: every finest foreground patch,
/// ungated, through the finest aggregator and the head.
fn full_forward(emb: &Array2<f64>, refs: &[PatchRef], params: &ProcessorParams) -> Result<Vec<f64>> {
    let positions: Vec<(f64, f64)> = refs.iter().map(|r| (r.u as f64, r.v as f64)).collect();
    let agg = params.aggregators.last().expect("at least one level");
    let (f, _) = agg.forward(emb, &positions)?;
    Ok(params.head.forward_vec(&f).to_vec())
}

/// Wall-clock per stage over slide directories. I/O covers reading the
/// pyramid and tissue masking; `paths` embeds only selected patches while
/// `full` embeds every finest foreground patch.
pub fn latency_benchmark(
    slides: &[PathBuf],
    params: &ProcessorParams,
    cfg: &PathsConfig,
    mode: BenchMode,
) -> Result<BenchReport> {
    if slides.is_empty() {
        return Err(PathsError::InvalidSpec("latency benchmark needs at least one slide".into()));
    }
    if !params.all_finite() {
        return Err(PathsError::Numeric("non-finite parameters".into()));
    }
    let enc = PatchEncoder::new(cfg.d, derive_seed(cfg.seed, "encoder"));
    let mut per_slide = Vec::with_capacity(slides.len());
    let mut embedded_counts = Vec::with_capacity(slides.len());
    let mut counts = Vec::with_capacity(slides.len());
    for dir in slides {
        let t0 = Instant::now();
        let (pyramid, _) = load_slide(dir)?;
        let masks = pyramid_masks(&pyramid, cfg)?;
        let io_ms = t0.elapsed().as_secs_f64() * 1e3;
        let full_per_level: Vec<usize> = masks.iter().map(|m| m.count()).collect();
        let mut embedded = 0;
        let (embed_ms, forward_ms, paths_per_level) = match mode {
            BenchMode::Paths => {
                let mut embed_ms = 0.0;
                let t = Instant::now();
                let out = paths_forward_with(&masks, params, cfg, &ForwardOptions::default(), &mut |state| {
                    let te = Instant::now();
                    let rows = embed_rows(&pyramid, &enc, &state.selected, &mut embedded);
                    embed_ms += te.elapsed().as_secs_f64() * 1e3;
                    rows
                })?;
                let total = t.elapsed().as_secs_f64() * 1e3;
                (embed_ms, total - embed_ms, out.counts())
            }
            BenchMode::Full => {
                let finest = masks.len() - 1;
                let refs: Vec<PatchRef> = masks[finest]
                    .foreground()
                    .into_iter()
                    .map(|(u, v)| PatchRef::new(finest, u, v))
                    .collect();
                let t = Instant::now();
                let emb = embed_rows(&pyramid, &enc, &refs, &mut embedded)?;
                let embed_ms = t.elapsed().as_secs_f64() * 1e3;
                let t = Instant::now();
                if !refs.is_empty() {
                    full_forward(&emb, &refs, params)?;
                }
                (embed_ms, t.elapsed().as_secs_f64() * 1e3, Vec::new())
            }
        };
        per_slide.push([io_ms, embed_ms, forward_ms]);
        embedded_counts.push(embedded);
        counts.push(SlideCounts {
            slide_id: pyramid.slide_id.clone(),
            paths_total: paths_per_level.iter().sum(),
            paths_per_level,
            full_total: *full_per_level.last().unwrap_or(&0),
            full_per_level,
        });
    }
    let column = |i: usize| StageTiming::from_samples(&per_slide.iter().map(|s| s[i]).collect::<Vec<_>>());
    let totals: Vec<f64> = per_slide.iter().map(|s| s.iter().sum()).collect();
    Ok(BenchReport {
        mode,
        slide_count: slides.len(),
        slides: counts,
        stages: Some(StageReport {
            io: column(0),
            embed: column(1),
            forward: column(2),
            total: StageTiming::from_samples(&totals),
            per_slide_ms: per_slide,
            embedded: embedded_counts,
        }),
        hardware_note: hardware_note(),
    })
}

/// Mean lesion enrichment over the samples that have lesion ground truth.
pub fn mean_enrichment(
    params: &ProcessorParams,
    samples: &[Sample],
    cfg: &PathsConfig,
    mode: AblationMode,
) -> Result<Option<f64>> {
    let values: Vec<Option<f64>> = samples
        .par_iter()
        .map(|s| {
            let Some(truth) = &s.truth else { return Ok(None) };
            let opts = inference_options(cfg, mode, s.slide_id());
            let out = paths_forward(&s.grids, params, cfg, &opts)?;
            Ok(lesion_enrichment(&out, &s.grids[cfg.n - 1], truth))
        })
        .collect::<Result<_>>()?;
    let got: Vec<f64> = values.into_iter().flatten().collect();
    Ok((!got.is_empty()).then(|| got.iter().sum::<f64>() / got.len() as f64))
}

/// Outcome of training on a synthetic cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortOutcome {
    pub report: TrainReport,
    pub test_enrichment: Option<f64>,
}

/// Generates a synthetic cohort from `seed`, trains under `mode`, and
/// scores the held-out split.
pub fn cohort_experiment(
    cfg: &PathsConfig,
    slides: usize,
    finest_grid: usize,
    seed: u64,
    mode: AblationMode,
) -> Result<(ProcessorParams, CohortOutcome)> {
    let cfg = PathsConfig { seed, ..cfg.clone() };
    let ds = synthetic_dataset(slides, finest_grid, &cfg, seed)?;
    let (params, report) = train_model(&ds, &cfg, mode)?;
    let test_enrichment = mean_enrichment(&params, &ds.test, &cfg, mode)?;
    Ok((params, CohortOutcome { report, test_enrichment }))
}
