//! Browser demo: generate a synthetic slide, run the coarse-to-fine
//! selection on it with seeded (untrained) parameters, and plot discrete
//! survival curves from hazard logits.

use paths::analysis::importance_heatmap;
use paths::dataset::pyramid_masks;
use paths::features::PatchEncoder;
use paths::model::{paths_forward_with, ForwardOptions, ProcessorParams};
use paths::pyramid::{generate_synthetic_slide, GroundTruth, PyramidImage, SyntheticSpec};
use paths::rng::{derive_seed, rng_for};
use paths::survival::EPS;
use paths::{PathsConfig, PathsError};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: PathsError) -> JsError {
    JsError::new(&e.to_string())
}

fn demo_config(seed: u64, k: usize) -> PathsConfig {
    PathsConfig {
        seed,
        k,
        ..PathsConfig::desk()
    }
}

/// Result of one selection pass, flattened for JavaScript.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionView {
    pub grid_w: usize,
    pub grid_h: usize,
    /// Heat at finest-patch resolution, row-major.
    pub heat: Vec<f64>,
    /// Patches processed per level, coarse to fine.
    pub counts: Vec<usize>,
    /// Foreground patches per level.
    pub foreground: Vec<usize>,
    /// Finest-level selected patches as `[u0, v0, u1, v1, …]`.
    pub finest: Vec<u32>,
    pub risk: f64,
}

/// A generated slide held in memory by the page.
#[wasm_bindgen]
pub struct Demo {
    pyramid: PyramidImage,
    truth: GroundTruth,
    seed: u64,
}

impl Demo {
    pub fn create(seed: u64, grid: usize) -> Result<Demo, PathsError> {
        let cfg = demo_config(seed, 5);
        let mut rng = rng_for(seed, "demo-spec");
        let spec = SyntheticSpec::sample(seed, (grid, grid), &mut rng);
        let (pyramid, truth) = generate_synthetic_slide(&spec, &cfg)?;
        Ok(Demo { pyramid, truth, seed })
    }

    pub fn pyramid(&self) -> &PyramidImage {
        &self.pyramid
    }

    /// Runs the selection with top-`k` filtering, embedding patches only as
    /// they are selected.
    pub fn selection(&self, k: usize) -> Result<SelectionView, PathsError> {
        let cfg = demo_config(self.seed, k.max(1));
        let params = ProcessorParams::new(&cfg, derive_seed(self.seed, "demo-params"));
        let masks = pyramid_masks(&self.pyramid, &cfg)?;
        let enc = PatchEncoder::new(cfg.d, derive_seed(cfg.seed, "encoder"));
        let s = self.pyramid.patch_size;
        let out = paths_forward_with(&masks, &params, &cfg, &ForwardOptions::default(), &mut |state| {
            let mut rows = ndarray::Array2::zeros((state.len(), cfg.d));
            for (mut row, &r) in rows.rows_mut().into_iter().zip(&state.selected) {
                let e = enc.embed_patch(&self.pyramid.extract_patch(r)?, s)?;
                row.iter_mut().zip(&e).for_each(|(d, &x)| *d = f64::from(x));
            }
            Ok(rows)
        })?;
        let heat = importance_heatmap(&out, &cfg)?;
        let finest = out
            .levels
            .last()
            .map(|l| l.state.selected.iter().flat_map(|r| [r.u as u32, r.v as u32]).collect())
            .unwrap_or_default();
        Ok(SelectionView {
            grid_w: heat.grid_w,
            grid_h: heat.grid_h,
            heat: heat.heat,
            counts: out.counts(),
            foreground: masks.iter().map(|m| m.count()).collect(),
            finest,
            risk: out.prediction.risk(),
        })
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, grid: u32) -> Result<Demo, JsError> {
        Demo::create(u64::from(seed), grid as usize).map_err(js_err)
    }

    pub fn levels(&self) -> usize {
        self.pyramid.n_levels()
    }

    pub fn width(&self, level: usize) -> usize {
        self.pyramid.levels[level].width
    }

    pub fn height(&self, level: usize) -> usize {
        self.pyramid.levels[level].height
    }

    /// RGBA pixels of one level, ready for `ImageData`.
    pub fn rgba(&self, level: usize) -> Vec<u8> {
        rgba(&self.pyramid.levels[level].pixels)
    }

    /// Number of planted lesions.
    pub fn lesions(&self) -> usize {
        self.truth.lesion_grades.len()
    }

    /// Finest-level lesion patches as `[u0, v0, u1, v1, …]`.
    pub fn lesion_patches(&self) -> Vec<u32> {
        self.truth
            .lesion_patches
            .last()
            .map(|l| l.iter().flat_map(|&(u, v)| [u as u32, v as u32]).collect())
            .unwrap_or_default()
    }

    /// Selection pass as JSON: `{grid_w, grid_h, heat, counts, foreground,
    /// finest, risk}`.
    pub fn select(&self, k: usize) -> Result<String, JsError> {
        let v = self.selection(k).map_err(js_err)?;
        serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
    }
}

/// RGB triples to RGBA with opaque alpha.
pub fn rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Discrete survival `S_k = Π_{j≤k} (1 − σ(logit_j))` for every bucket.
#[wasm_bindgen]
pub fn survival_curve(logits: &[f64]) -> Vec<f64> {
    let mut s = 1.0;
    logits
        .iter()
        .map(|&l| {
            let h = paths::nn::sigmoid(l).clamp(EPS, 1.0 - EPS);
            s *= 1.0 - h;
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgba_appends_alpha() {
        assert_eq!(rgba(&[1, 2, 3, 4, 5, 6]), vec![1, 2, 3, 255, 4, 5, 6, 255]);
    }

    #[test]
    fn survival_curve_halves_at_zero_logits() {
        let s = survival_curve(&[0.0, 0.0, 0.0]);
        assert_eq!(s, vec![0.5, 0.25, 0.125]);
    }
}
