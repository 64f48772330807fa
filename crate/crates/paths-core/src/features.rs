//! Patch embeddings: the seeded stub encoder, per-level feature grids and
//! their binary file format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PathsError, Result};
use crate::pyramid::{PyramidImage, TissueMask};
use crate::rng::rng_for;

/// Address of one patch: level (0 = coarsest) and grid position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchRef {
    pub level: usize,
    pub u: usize,
    pub v: usize,
}

impl PatchRef {
    pub const fn new(level: usize, u: usize, v: usize) -> Self {
        PatchRef { level, u, v }
    }
}

const POOL: usize = 8;
/// 8×8×3 block means plus per-channel mean and variance.
pub const STATS_DIM: usize = POOL * POOL * 3 + 6;
const VARIANCE_SCALE: f64 = 16.0;
const PROJECTION_GAIN: f64 = 1.5;

/// Stand-in for a pretrained patch encoder: pooled pixel statistics through
/// a fixed seeded projection and `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEncoder {
    pub d: usize,
    pub seed: u64,
    /// `d × STATS_DIM`, row-major.
    projection: Vec<f64>,
}

impl PatchEncoder {
    pub fn new(d: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "patch-encoder");
        let scale = PROJECTION_GAIN / (STATS_DIM as f64).sqrt();
        let projection = (0..d * STATS_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        PatchEncoder { d, seed, projection }
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    /// Pooled statistics of an `s×s` RGB patch, pixels mapped to `[0, 1]`.
    /// Means are centred on 0.5.
    pub fn patch_stats(patch: &[u8], s: usize) -> Result<Vec<f64>> {
        if s < POOL || patch.len() != s * s * 3 {
            return Err(PathsError::Shape(format!(
                "patch of {} bytes is not {s}x{s}x3 (s >= {POOL})",
                patch.len()
            )));
        }
        let mut stats = vec![0.0; STATS_DIM];
        let bounds: Vec<usize> = (0..=POOL).map(|i| i * s / POOL).collect();
        for by in 0..POOL {
            for bx in 0..POOL {
                let mut acc = [0.0f64; 3];
                let mut cnt = 0.0;
                for y in bounds[by]..bounds[by + 1] {
                    for x in bounds[bx]..bounds[bx + 1] {
                        let i = (y * s + x) * 3;
                        for c in 0..3 {
                            acc[c] += f64::from(patch[i + c]) / 255.0;
                        }
                        cnt += 1.0;
                    }
                }
                for c in 0..3 {
                    stats[(by * POOL + bx) * 3 + c] = acc[c] / cnt - 0.5;
                }
            }
        }
        let npx = (s * s) as f64;
        let base = POOL * POOL * 3;
        for c in 0..3 {
            let mean = patch.iter().skip(c).step_by(3).map(|&p| f64::from(p) / 255.0).sum::<f64>() / npx;
            let var = patch
                .iter()
                .skip(c)
                .step_by(3)
                .map(|&p| (f64::from(p) / 255.0 - mean).powi(2))
                .sum::<f64>()
                / npx;
            stats[base + c] = mean - 0.5;
            stats[base + 3 + c] = var * VARIANCE_SCALE;
        }
        Ok(stats)
    }

    pub fn embed_patch(&self, patch: &[u8], s: usize) -> Result<Vec<f32>> {
        let stats = Self::patch_stats(patch, s)?;
        Ok(self
            .projection
            .chunks_exact(STATS_DIM)
            .map(|row| row.iter().zip(&stats).map(|(w, x)| w * x).sum::<f64>().tanh() as f32)
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GridHeader {
    level: usize,
    magnification: f64,
    grid_w: usize,
    grid_h: usize,
    d: usize,
    dtype: String,
    order: String,
}

const ORDER: &str = "row-major, v-major then u";

/// Dense per-level embeddings; background cells hold zero vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub level_index: usize,
    pub magnification: f64,
    pub grid_w: usize,
    pub grid_h: usize,
    pub d: usize,
    /// `grid_w * grid_h * d` values, cell `(u, v)` at offset `(v * grid_w + u) * d`.
    pub data: Vec<f32>,
    pub foreground: Vec<bool>,
}

impl FeatureGrid {
    pub fn zeros(level_index: usize, magnification: f64, grid_w: usize, grid_h: usize, d: usize) -> Self {
        FeatureGrid {
            level_index,
            magnification,
            grid_w,
            grid_h,
            d,
            data: vec![0.0; grid_w * grid_h * d],
            foreground: vec![false; grid_w * grid_h],
        }
    }

    #[inline]
    pub fn embedding(&self, u: usize, v: usize) -> &[f32] {
        let o = (v * self.grid_w + u) * self.d;
        &self.data[o..o + self.d]
    }

    #[inline]
    pub fn is_foreground(&self, u: usize, v: usize) -> bool {
        u < self.grid_w && v < self.grid_h && self.foreground[v * self.grid_w + u]
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground.iter().filter(|&&f| f).count()
    }

    pub fn mask(&self) -> TissueMask {
        TissueMask {
            level_index: self.level_index,
            grid_w: self.grid_w,
            grid_h: self.grid_h,
            grid: self.foreground.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.grid_w * self.grid_h;
        if self.foreground.len() != cells || self.data.len() != cells * self.d {
            return Err(PathsError::Shape(format!(
                "grid {}x{}x{} has {} values and {} mask flags",
                self.grid_w,
                self.grid_h,
                self.d,
                self.data.len(),
                self.foreground.len()
            )));
        }
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(PathsError::Numeric(format!("non-finite feature at index {i}")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = GridHeader {
            level: self.level_index,
            magnification: self.magnification,
            grid_w: self.grid_w,
            grid_h: self.grid_h,
            d: self.d,
            dtype: "f32".into(),
            order: ORDER.into(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend(self.foreground.iter().map(|&f| u8::from(f)));
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| PathsError::format(bytes.len() as u64, "missing header newline"))?;
        let header: GridHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| PathsError::format(e.column() as u64, format!("bad header: {e}")))?;
        if header.dtype != "f32" {
            return Err(PathsError::format(0, format!("unsupported dtype {}", header.dtype)));
        }
        let cells = header
            .grid_w
            .checked_mul(header.grid_h)
            .ok_or_else(|| PathsError::format(0, "grid size overflows"))?;
        let mask_start = nl + 1;
        let data_start = mask_start + cells;
        let expected = cells
            .checked_mul(header.d)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(data_start))
            .ok_or_else(|| PathsError::format(0, "payload size overflows"))?;
        if bytes.len() != expected {
            return Err(PathsError::format(
                bytes.len().min(expected) as u64,
                format!("payload is {} bytes, header implies {expected}", bytes.len()),
            ));
        }
        let mut foreground = Vec::with_capacity(cells);
        for (i, &b) in bytes[mask_start..data_start].iter().enumerate() {
            match b {
                0 => foreground.push(false),
                1 => foreground.push(true),
                _ => {
                    return Err(PathsError::format(
                        (mask_start + i) as u64,
                        format!("mask byte {b} is not 0/1"),
                    ))
                }
            }
        }
        let data = bytes[data_start..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let grid = FeatureGrid {
            level_index: header.level,
            magnification: header.magnification,
            grid_w: header.grid_w,
            grid_h: header.grid_h,
            d: header.d,
            data,
            foreground,
        };
        if let Some(i) = grid.data.iter().position(|x| !x.is_finite()) {
            return Err(PathsError::format(
                (data_start + 4 * i) as u64,
                "non-finite feature value",
            ));
        }
        Ok(grid)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| PathsError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| PathsError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| PathsError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn feature_file_name(level: usize) -> String {
    format!("features_level_{level}.bin")
}

pub fn write_feature_grids(dir: &Path, grids: &[FeatureGrid]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PathsError::io(dir, e))?;
    for g in grids {
        g.write(&dir.join(feature_file_name(g.level_index)))?;
    }
    Ok(())
}

pub fn read_feature_grids(dir: &Path) -> Result<Vec<FeatureGrid>> {
    let mut grids = Vec::new();
    for i in 0.. {
        let p = dir.join(feature_file_name(i));
        if !p.exists() {
            break;
        }
        grids.push(FeatureGrid::read(&p)?);
    }
    if grids.is_empty() {
        return Err(PathsError::Dependency(format!(
            "no feature grids in {}",
            dir.display()
        )));
    }
    Ok(grids)
}

/// Embeds every foreground patch of every level. The result does not depend
/// on `workers`; each cell is computed independently.
pub fn precompute_feature_grids(
    pyramid: &PyramidImage,
    enc: &PatchEncoder,
    masks: &[TissueMask],
    workers: usize,
) -> Result<Vec<FeatureGrid>> {
    if masks.len() != pyramid.n_levels() {
        return Err(PathsError::Shape(format!(
            "{} masks for {} levels",
            masks.len(),
            pyramid.n_levels()
        )));
    }
    let s = pyramid.patch_size;
    let mut grids = Vec::with_capacity(masks.len());
    for (i, mask) in masks.iter().enumerate() {
        let (gw, gh) = pyramid.grid(i);
        if (mask.grid_w, mask.grid_h) != (gw, gh) || mask.level_index != i {
            return Err(PathsError::Shape(format!(
                "mask {}x{} (level {}) does not match level {i} grid {gw}x{gh}",
                mask.grid_w, mask.grid_h, mask.level_index
            )));
        }
        let cells = mask.foreground();
        let embed = |&(u, v): &(usize, usize)| -> Result<Vec<f32>> {
            let patch = pyramid.extract_patch(PatchRef::new(i, u, v))?;
            enc.embed_patch(&patch, s)
        };
        let vectors: Vec<Vec<f32>> = if workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| PathsError::InvalidConfig(format!("thread pool: {e}")))?;
            pool.install(|| cells.par_iter().map(embed).collect::<Result<_>>())?
        } else {
            cells.iter().map(embed).collect::<Result<_>>()?
        };
        let mut grid = FeatureGrid::zeros(i, pyramid.levels[i].magnification, gw, gh, enc.d);
        for (&(u, v), vec) in cells.iter().zip(vectors) {
            let cell = v * gw + u;
            grid.foreground[cell] = true;
            grid.data[cell * enc.d..(cell + 1) * enc.d].copy_from_slice(&vec);
        }
        grids.push(grid);
    }
    Ok(grids)
}

/// Number of embeddings a full precompute performs.
pub fn embedded_patch_count(grids: &[FeatureGrid]) -> usize {
    grids.iter().map(FeatureGrid::foreground_count).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PathsConfig;
    use crate::pyramid::{compute_tissue_mask, generate_synthetic_slide, LevelImage, SyntheticSpec};
    use proptest::prelude::*;

    #[test]
    fn embedding_is_deterministic_and_bounded() {
        let enc = PatchEncoder::new(16, 3);
        let patch: Vec<u8> = (0..16 * 16 * 3).map(|i| (i * 37 % 251) as u8).collect();
        let a = enc.embed_patch(&patch, 16).unwrap();
        let b = enc.embed_patch(&patch, 16).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| *x > -1.0 && *x < 1.0));
        assert_eq!(enc, PatchEncoder::new(16, 3));
        assert_ne!(enc.projection(), PatchEncoder::new(16, 4).projection());
    }

    #[test]
    fn black_patch_matches_hand_evaluation() {
        let enc = PatchEncoder::new(8, 11);
        let got = enc.embed_patch(&vec![0u8; 16 * 16 * 3], 16).unwrap();
        // black: every block and channel mean is 0 - 0.5, variances are 0
        let w = enc.projection();
        for (j, g) in got.iter().enumerate() {
            let row = &w[j * STATS_DIM..(j + 1) * STATS_DIM];
            let pre: f64 = row[..STATS_DIM - 3].iter().map(|x| -0.5 * x).sum();
            assert_eq!(*g, pre.tanh() as f32);
        }
    }

    #[test]
    fn wrong_shape_rejected() {
        let enc = PatchEncoder::new(4, 0);
        assert!(matches!(enc.embed_patch(&[0u8; 10], 16), Err(PathsError::Shape(_))));
        assert!(enc.embed_patch(&[0u8; 4 * 4 * 3], 4).is_err());
    }

    fn full_pyramid(n: usize, finest: usize) -> PyramidImage {
        let cfg = PathsConfig { n, s: 8, ..PathsConfig::default() };
        generate_synthetic_slide(&SyntheticSpec::full_tissue(1, (finest, finest)), &cfg)
            .unwrap()
            .0
    }

    #[test]
    fn overhead_for_five_levels() {
        let p = full_pyramid(5, 16);
        let masks: Vec<_> = (0..5)
            .map(|i| {
                let (w, h) = p.grid(i);
                TissueMask::full(i, w, h, true)
            })
            .collect();
        let grids = precompute_feature_grids(&p, &PatchEncoder::new(4, 0), &masks, 1).unwrap();
        let total = embedded_patch_count(&grids);
        assert_eq!(total, 1 + 4 + 16 + 64 + 256);
        let ratio = total as f64 / 256.0;
        assert!((ratio - 1.33203125).abs() < 1e-12 && ratio <= 4.0 / 3.0);
    }

    #[test]
    fn background_pyramid_has_zero_grids() {
        let l = LevelImage::filled(10.0, 32, 32, [255; 3]);
        let p = PyramidImage::from_finest("bg", l, 8, 2, 2, 5.0).unwrap();
        let masks: Vec<_> = (0..2)
            .map(|i| compute_tissue_mask(&p.levels[i], i, 8, 0.1).unwrap())
            .collect();
        let grids = precompute_feature_grids(&p, &PatchEncoder::new(4, 0), &masks, 1).unwrap();
        assert_eq!(embedded_patch_count(&grids), 0);
        assert!(grids.iter().all(|g| g.data.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn single_level_counts_foreground() {
        let p = full_pyramid(1, 4);
        let mut mask = TissueMask::full(0, 4, 4, true);
        mask.grid[5] = false;
        let grids = precompute_feature_grids(&p, &PatchEncoder::new(4, 0), &[mask], 1).unwrap();
        assert_eq!(grids.len(), 1);
        assert_eq!(embedded_patch_count(&grids), 15);
        assert!(grids[0].embedding(1, 1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mismatched_masks_rejected() {
        let p = full_pyramid(2, 4);
        let masks = vec![TissueMask::full(0, 2, 2, true)];
        assert!(matches!(
            precompute_feature_grids(&p, &PatchEncoder::new(4, 0), &masks, 1),
            Err(PathsError::Shape(_))
        ));
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let p = full_pyramid(2, 8);
        let masks: Vec<_> = (0..2)
            .map(|i| compute_tissue_mask(&p.levels[i], i, 8, 0.1).unwrap())
            .collect();
        let enc = PatchEncoder::new(8, 2);
        let a = precompute_feature_grids(&p, &enc, &masks, 1).unwrap();
        let b = precompute_feature_grids(&p, &enc, &masks, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nonuniform_foreground_never_embeds_to_zero() {
        let enc = PatchEncoder::new(32, 9);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let patch: Vec<u8> = (0..16 * 16 * 3).map(|_| rng.random()).collect();
            let e = enc.embed_patch(&patch, 16).unwrap();
            assert!(e.iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn empty_grid_round_trips() {
        let g = FeatureGrid::zeros(0, 1.0, 0, 0, 8);
        assert_eq!(FeatureGrid::from_bytes(&g.to_bytes()).unwrap(), g);
    }

    #[test]
    fn inconsistent_payload_is_format_error() {
        let g = FeatureGrid::zeros(1, 2.5, 3, 2, 4);
        let mut bytes = g.to_bytes();
        bytes.truncate(bytes.len() - 3);
        match FeatureGrid::from_bytes(&bytes) {
            Err(PathsError::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut bad_mask = g.to_bytes();
        bad_mask[header_end + 1] = 7;
        assert!(matches!(
            FeatureGrid::from_bytes(&bad_mask),
            Err(PathsError::Format { offset, .. }) if offset as usize == header_end + 1
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = FeatureGrid::zeros(0, 10.0, 3, 2, 2);
        g.foreground[4] = true;
        g.data[8] = -0.25;
        g.data[9] = f32::MIN_POSITIVE;
        write_feature_grids(dir.path(), std::slice::from_ref(&g)).unwrap();
        assert_eq!(read_feature_grids(dir.path()).unwrap(), vec![g]);
    }

    proptest! {
        #[test]
        fn random_grid_round_trips(w in 0usize..6, h in 0usize..6, d in 1usize..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut g = FeatureGrid::zeros(1, 1.25, w, h, d);
            for x in g.data.iter_mut() { *x = rng.random_range(-1.0f32..1.0); }
            for f in g.foreground.iter_mut() { *f = rng.random(); }
            prop_assert_eq!(FeatureGrid::from_bytes(&g.to_bytes()).unwrap(), g);
        }
    }
}
