//! Synthetic survival cohorts and train/validation/test splits.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::PathsConfig;
use crate::error::{PathsError, Result};
use crate::features::{precompute_feature_grids, read_feature_grids, FeatureGrid, PatchEncoder};
use crate::pyramid::{compute_tissue_mask, generate_synthetic_slide, GroundTruth, PyramidImage, SyntheticSpec, TissueMask};
use crate::rng::{derive_seed, rng_for, rng_indexed};
use crate::survival::{bucket_of, quantise_survival, SurvivalRecord};

/// Median survival in days for a lesion-free slide.
pub const BASE_SURVIVAL_DAYS: f64 = 1500.0;
/// Log-time decrease per unit of planted risk.
pub const RISK_EFFECT: f64 = 1.0;
pub const TIME_NOISE: f64 = 0.3;
pub const CENSOR_PROBABILITY: f64 = 0.25;

/// Finest grid side used by the desk profile.
pub const DESK_FINEST_GRID: usize = 32;

/// Tissue masks for every level of a pyramid.
pub fn pyramid_masks(pyramid: &PyramidImage, cfg: &PathsConfig) -> Result<Vec<TissueMask>> {
    pyramid
        .levels
        .iter()
        .enumerate()
        .map(|(i, l)| compute_tissue_mask(l, i, pyramid.patch_size, cfg.min_tissue_fraction))
        .collect()
}

/// Embeds a whole pyramid with the stub encoder.
pub fn embed_pyramid(pyramid: &PyramidImage, cfg: &PathsConfig, workers: usize) -> Result<Vec<FeatureGrid>> {
    let enc = PatchEncoder::new(cfg.d, derive_seed(cfg.seed, "encoder"));
    precompute_feature_grids(pyramid, &enc, &pyramid_masks(pyramid, cfg)?, workers)
}

/// Survival label for a planted risk: log-normal event time shortened by
/// risk, with a fixed fraction of records censored at a uniform fraction of
/// their event time.
pub fn survival_label(slide_id: &str, risk: f64, rng: &mut impl Rng) -> SurvivalRecord {
    let z: f64 = StandardNormal.sample(rng);
    let event = BASE_SURVIVAL_DAYS * (-RISK_EFFECT * risk + TIME_NOISE * z).exp();
    let censored = rng.random_bool(CENSOR_PROBABILITY);
    let time = if censored { event * rng.random_range(0.3..1.0) } else { event };
    SurvivalRecord::new(slide_id, time.max(1.0), censored)
}

pub fn slide_id(index: usize) -> String {
    format!("slide_{index:04}")
}

/// One generated slide with its labels.
#[derive(Clone, Debug)]
pub struct SyntheticSlide {
    pub pyramid: PyramidImage,
    pub truth: GroundTruth,
    pub record: SurvivalRecord,
}

/// Deterministic slide `index` of a cohort drawn from `seed`.
pub fn synthetic_slide(index: usize, finest_grid: usize, cfg: &PathsConfig, seed: u64) -> Result<SyntheticSlide> {
    let mut rng = rng_indexed(seed, "cohort-spec", index as u64);
    let slide_seed = rng.random();
    let spec = SyntheticSpec::sample(slide_seed, (finest_grid, finest_grid), &mut rng);
    let (mut pyramid, mut truth) = generate_synthetic_slide(&spec, cfg)?;
    let id = slide_id(index);
    pyramid.slide_id = id.clone();
    truth.slide_id = id.clone();
    let mut label_rng = rng_indexed(seed, "cohort-label", index as u64);
    let record = survival_label(&id, truth.risk, &mut label_rng);
    Ok(SyntheticSlide { pyramid, truth, record })
}

/// A slide ready for the model.
#[derive(Clone, Debug)]
pub struct Sample {
    pub grids: Vec<FeatureGrid>,
    pub record: SurvivalRecord,
    pub truth: Option<GroundTruth>,
}

impl Sample {
    pub fn slide_id(&self) -> &str {
        &self.record.slide_id
    }
}

/// Disjoint splits with buckets assigned from the training split's
/// uncensored times.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub edges: Vec<f64>,
}

/// Fractions of the cohort assigned to train and validation; the rest is test.
pub const SPLIT: (f64, f64) = (0.7, 0.15);

impl Dataset {
    /// Shuffles with `seed`, splits 70/15/15 and quantises survival times.
    pub fn split(mut samples: Vec<Sample>, b: usize, seed: u64) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.slide_id().to_string()) {
                return Err(PathsError::InvalidSpec(format!("duplicate slide id {}", s.slide_id())));
            }
        }
        samples.sort_by(|a, b| a.slide_id().cmp(b.slide_id()));
        samples.shuffle(&mut rng_for(seed, "split"));
        let n = samples.len();
        let n_train = (n as f64 * SPLIT.0).round() as usize;
        let n_val = (n as f64 * SPLIT.1).round() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            return Err(PathsError::InvalidSpec(format!("{n} slides are too few to split")));
        }
        let test = samples.split_off(n_train + n_val);
        let val = samples.split_off(n_train);
        let mut ds = Dataset {
            train: samples,
            val,
            test,
            edges: Vec::new(),
        };
        let records: Vec<SurvivalRecord> = ds.train.iter().map(|s| s.record.clone()).collect();
        let (edges, _) = quantise_survival(&records, b)?;
        for s in ds.train.iter_mut().chain(ds.val.iter_mut()).chain(ds.test.iter_mut()) {
            s.record.bucket = bucket_of(&edges, s.record.time);
        }
        ds.edges = edges;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generates and embeds `count` slides in memory.
pub fn synthetic_samples(count: usize, finest_grid: usize, cfg: &PathsConfig, seed: u64) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let slide = synthetic_slide(i, finest_grid, cfg, seed)?;
            let grids = embed_pyramid(&slide.pyramid, cfg, 1)?;
            Ok(Sample {
                grids,
                record: slide.record,
                truth: Some(slide.truth),
            })
        })
        .collect()
}

/// The desk-scale cohort: generated, embedded and split from one seed.
pub fn synthetic_dataset(count: usize, finest_grid: usize, cfg: &PathsConfig, seed: u64) -> Result<Dataset> {
    let samples = synthetic_samples(count, finest_grid, cfg, seed)?;
    Dataset::split(samples, cfg.b, seed)
}

/// Loads `features_dir/<slide_id>/features_level_*.bin` for every labelled
/// slide, plus `truth.json` from `slides_dir/<slide_id>` when present.
pub fn load_samples(
    features_dir: &Path,
    records: &[SurvivalRecord],
    slides_dir: Option<&Path>,
) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            let grids = read_feature_grids(&features_dir.join(&r.slide_id))?;
            let truth = match slides_dir {
                Some(dir) => {
                    let p = dir.join(&r.slide_id).join("truth.json");
                    if p.exists() {
                        let bytes = std::fs::read(&p).map_err(|e| PathsError::io(&p, e))?;
                        Some(serde_json::from_slice(&bytes)?)
                    } else {
                        None
                    }
                }
                None => None,
            };
            Ok(Sample {
                grids,
                record: r.clone(),
                truth,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PathsConfig {
        PathsConfig {
            n: 2,
            s: 8,
            d: 8,
            ..PathsConfig::desk()
        }
    }

    #[test]
    fn labels_follow_risk() {
        let mut rng = rng_for(1, "t");
        let mean = |risk: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            (0..2000)
                .map(|_| survival_label("x", risk, rng).time.ln())
                .sum::<f64>()
                / 2000.0
        };
        let low = mean(0.0, &mut rng);
        let high = mean(2.0, &mut rng);
        assert!(low - high > 1.5, "{low} vs {high}");
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let cfg = small_cfg();
        let a = synthetic_dataset(20, 8, &cfg, 3).unwrap();
        let b = synthetic_dataset(20, 8, &cfg, 3).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (14, 3, 3));
        let ids = |s: &[Sample]| s.iter().map(|x| x.slide_id().to_string()).collect::<Vec<_>>();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.test), ids(&b.test));
        let mut all: Vec<String> = ids(&a.train).into_iter().chain(ids(&a.val)).chain(ids(&a.test)).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 20);
        assert_eq!(a.edges.len(), cfg.b - 1);
        for s in a.train.iter().chain(&a.test) {
            assert!(s.record.bucket < cfg.b);
            assert_eq!(s.grids.len(), cfg.n);
        }
    }
}
