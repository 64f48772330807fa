//! Synthetic slides with planted lesions.
//!
//! Tissue occupies a smooth blob covering a chosen fraction of the finest
//! patch grid. Each lesion is a disc of finest-level patches drawn in a
//! darker stain with a 4-pixel checker whose contrast scales with the
//! lesion's grade, so the grade survives a few box downsamples.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LevelImage, PyramidImage};
use crate::config::PathsConfig;
use crate::error::{PathsError, Result};
use crate::rng::rng_for;

const TISSUE_RGB: [f64; 3] = [226.0, 158.0, 196.0];
const LESION_RGB: [f64; 3] = [150.0, 88.0, 168.0];
const CHECKER_CELL: usize = 4;
const CHECKER_AMPLITUDE: f64 = 70.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// `(patches wide, patches tall)` at the finest level.
    pub base_grid: (usize, usize),
    /// One grade in `[0, 1]` per planted lesion.
    pub lesion_grades: Vec<f64>,
    pub background_tissue_fraction: f64,
}

impl SyntheticSpec {
    pub fn lesion_count(&self) -> usize {
        self.lesion_grades.len()
    }

    /// Draws a spec with 0–3 lesions and a mid-range tissue fraction.
    pub fn sample(seed: u64, base_grid: (usize, usize), rng: &mut impl Rng) -> Self {
        let count = rng.random_range(0..=3usize);
        let lesion_grades = (0..count).map(|_| rng.random_range(0.2..1.0)).collect();
        SyntheticSpec {
            seed,
            base_grid,
            lesion_grades,
            background_tissue_fraction: rng.random_range(0.45..0.75),
        }
    }

    /// Fully tissue-covered slide without lesions.
    pub fn full_tissue(seed: u64, base_grid: (usize, usize)) -> Self {
        SyntheticSpec {
            seed,
            base_grid,
            lesion_grades: Vec::new(),
            background_tissue_fraction: 1.0,
        }
    }
}

/// Planted lesion locations and the scalar risk they imply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub slide_id: String,
    /// Lesion patch coordinates `(u, v)` per level, coarse to fine, sorted.
    pub lesion_patches: Vec<Vec<(usize, usize)>>,
    pub lesion_grades: Vec<f64>,
    /// Sum of lesion grades; 0 for a lesion-free slide.
    pub risk: f64,
}

pub const BASELINE_RISK: f64 = 0.0;

impl GroundTruth {
    /// Builds every coarser lesion set as the floor-division image of the
    /// next finer one.
    pub fn from_finest(
        slide_id: String,
        finest: Vec<(usize, usize)>,
        n: usize,
        ratio: usize,
        lesion_grades: Vec<f64>,
    ) -> Self {
        let mut levels = vec![finest];
        for _ in 1..n {
            let finer = levels.last().unwrap();
            let mut coarser: Vec<(usize, usize)> =
                finer.iter().map(|&(u, v)| (u / ratio, v / ratio)).collect();
            coarser.sort_unstable_by_key(|&(u, v)| (v, u));
            coarser.dedup();
            levels.push(coarser);
        }
        levels.reverse();
        let risk = BASELINE_RISK + lesion_grades.iter().sum::<f64>();
        GroundTruth {
            slide_id,
            lesion_patches: levels,
            lesion_grades,
            risk,
        }
    }

    pub fn is_lesion(&self, level: usize, u: usize, v: usize) -> bool {
        self.lesion_patches[level]
            .binary_search_by_key(&(v, u), |&(a, b)| (b, a))
            .is_ok()
    }
}

fn tissue_patches(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (gw, gh) = spec.base_grid;
    let total = gw * gh;
    let target = (spec.background_tissue_fraction * total as f64).round() as usize;
    if target >= total {
        return vec![true; total];
    }
    let bumps: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.25..0.75) * gw as f64,
                rng.random_range(0.25..0.75) * gh as f64,
                rng.random_range(0.2..0.4) * gw.max(gh) as f64,
            )
        })
        .collect();
    let mut scored: Vec<(f64, usize)> = (0..total)
        .map(|i| {
            let (x, y) = ((i % gw) as f64 + 0.5, (i / gw) as f64 + 0.5);
            let field: f64 = bumps
                .iter()
                .map(|&(cx, cy, r)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
                .sum();
            (field + rng.random_range(0.0..0.05), i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut tissue = vec![false; total];
    for &(_, i) in scored.iter().take(target) {
        tissue[i] = true;
    }
    tissue
}

/// Renders the finest level and derives all coarser levels by box
/// downsampling. Identical `(spec, config)` gives identical bytes.
pub fn generate_synthetic_slide(
    spec: &SyntheticSpec,
    config: &PathsConfig,
) -> Result<(PyramidImage, GroundTruth)> {
    let (gw, gh) = spec.base_grid;
    let n = config.n;
    let unit = config.m.pow((n - 1) as u32);
    if gw == 0 || gh == 0 || gw % unit != 0 || gh % unit != 0 {
        return Err(PathsError::InvalidSpec(format!(
            "base grid {gw}x{gh} not divisible by M^(n-1) = {unit}"
        )));
    }
    if !(0.0..=1.0).contains(&spec.background_tissue_fraction) {
        return Err(PathsError::InvalidSpec("tissue fraction outside [0,1]".into()));
    }
    if spec.lesion_grades.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(PathsError::InvalidSpec("lesion grade outside [0,1]".into()));
    }
    let slide_id = format!("synth-{:016x}", spec.seed);
    let mut rng = rng_for(spec.seed, "synthetic-slide");
    let tissue = tissue_patches(spec, &mut rng);

    // lesion discs in finest-patch units, centred on tissue patches
    let tissue_idx: Vec<usize> = (0..gw * gh).filter(|&i| tissue[i]).collect();
    let mut lesion_of = vec![None::<usize>; gw * gh];
    if !tissue_idx.is_empty() {
        for (li, _) in spec.lesion_grades.iter().enumerate() {
            let c = tissue_idx[rng.random_range(0..tissue_idx.len())];
            let (cx, cy) = ((c % gw) as f64 + 0.5, (c / gw) as f64 + 0.5);
            let r = rng.random_range(0.07..0.11) * gw.min(gh) as f64;
            let r = r.max(1.0);
            for &i in &tissue_idx {
                let (x, y) = ((i % gw) as f64 + 0.5, (i / gw) as f64 + 0.5);
                if (x - cx).powi(2) + (y - cy).powi(2) <= r * r && lesion_of[i].is_none() {
                    lesion_of[i] = Some(li);
                }
            }
        }
    }

    let s = config.s;
    let (w, h) = (gw * s, gh * s);
    let mut finest = LevelImage::filled(0.0, w, h, [255; 3]);
    let noise = Normal::new(0.0, 12.0).expect("valid sigma");
    for y in 0..h {
        for x in 0..w {
            let p = (y / s) * gw + x / s;
            let rgb = if !tissue[p] {
                let g = 255 - rng.random_range(0..6u8);
                [g, g, g]
            } else {
                let shared: f64 = noise.sample(&mut rng);
                let (base, shift) = match lesion_of[p] {
                    None => (TISSUE_RGB, 0.0),
                    Some(li) => {
                        let grade = spec.lesion_grades[li];
                        let sign = if (x / CHECKER_CELL + y / CHECKER_CELL).is_multiple_of(2) {
                            1.0
                        } else {
                            -1.0
                        };
                        (LESION_RGB, sign * grade * CHECKER_AMPLITUDE - 20.0 * grade)
                    }
                };
                let mut out = [0u8; 3];
                for c in 0..3 {
                    let jitter: f64 = rng.random_range(-4.0..4.0);
                    out[c] = (base[c] + shift + shared + jitter).round().clamp(0.0, 255.0) as u8;
                }
                out
            };
            finest.set_pixel(x, y, rgb);
        }
    }

    let pyramid = PyramidImage::from_finest(slide_id.clone(), finest, s, config.m, n, config.m1)?;
    let mut lesion_finest: Vec<(usize, usize)> = (0..gw * gh)
        .filter(|&i| lesion_of[i].is_some())
        .map(|i| (i % gw, i / gw))
        .collect();
    lesion_finest.sort_unstable_by_key(|&(u, v)| (v, u));
    let truth = GroundTruth::from_finest(
        slide_id,
        lesion_finest,
        n,
        config.m,
        spec.lesion_grades.clone(),
    );
    Ok((pyramid, truth))
}
