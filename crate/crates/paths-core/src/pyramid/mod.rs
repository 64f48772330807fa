//! Multi-level slide images: the level stack, patch extraction, and box
//! downsampling between magnifications.

mod store;
mod synth;
mod tissue;

pub use store::{load_slide, read_ppm, save_slide, write_ppm, SlideMeta};
pub use synth::{generate_synthetic_slide, GroundTruth, SyntheticSpec};
pub use tissue::{compute_tissue_mask, grayscale_histogram, otsu_threshold, TissueMask};

use crate::error::{PathsError, Result};
use crate::features::PatchRef;

/// Magnifications `[m1, M·m1, …, M^(n−1)·m1]`, coarse to fine.
pub fn build_level_magnifications(m1: f64, ratio: usize, n: usize) -> Result<Vec<f64>> {
    if !(m1 > 0.0) || !m1.is_finite() {
        return Err(PathsError::InvalidConfig(format!("m1 must be positive, got {m1}")));
    }
    if n == 0 {
        return Err(PathsError::InvalidConfig("n must be positive".into()));
    }
    if ratio < 2 {
        return Err(PathsError::InvalidConfig(format!("M must be at least 2, got {ratio}")));
    }
    let mut out = Vec::with_capacity(n);
    let mut m = m1;
    for _ in 0..n {
        out.push(m);
        m *= ratio as f64;
    }
    Ok(out)
}

/// One level of the pyramid: an 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelImage {
    pub magnification: f64,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl LevelImage {
    pub fn new(magnification: f64, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(PathsError::Shape(format!(
                "{width}x{height} RGB raster needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(LevelImage {
            magnification,
            width,
            height,
            pixels,
        })
    }

    pub fn filled(magnification: f64, width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        LevelImage {
            magnification,
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Patch grid dimensions `(grid_w, grid_h)` for patch side `s`.
    pub fn grid(&self, s: usize) -> (usize, usize) {
        (self.width / s, self.height / s)
    }

    /// Exact `factor`× box-filter downsample (rounded mean of each block).
    pub fn downsample(&self, factor: usize, magnification: f64) -> Result<LevelImage> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(PathsError::Shape(format!(
                "{}x{} not divisible by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let area = (factor * factor) as u32;
        let mut pixels = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0u32; 3];
                for dy in 0..factor {
                    let row = (y * factor + dy) * self.width;
                    for dx in 0..factor {
                        let i = (row + x * factor + dx) * 3;
                        acc[0] += u32::from(self.pixels[i]);
                        acc[1] += u32::from(self.pixels[i + 1]);
                        acc[2] += u32::from(self.pixels[i + 2]);
                    }
                }
                let o = (y * w + x) * 3;
                for c in 0..3 {
                    pixels[o + c] = ((acc[c] + area / 2) / area) as u8;
                }
            }
        }
        Ok(LevelImage {
            magnification,
            width: w,
            height: h,
            pixels,
        })
    }

    /// Pads right/bottom with white up to the given dimensions.
    pub fn pad_to(&self, width: usize, height: usize) -> LevelImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = LevelImage::filled(self.magnification, width, height, [255; 3]);
        for y in 0..self.height.min(height) {
            let src = y * self.width * 3;
            let dst = y * width * 3;
            let len = self.width.min(width) * 3;
            out.pixels[dst..dst + len].copy_from_slice(&self.pixels[src..src + len]);
        }
        out
    }
}

/// A slide stored at `n` magnifications, coarse to fine.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidImage {
    pub slide_id: String,
    pub levels: Vec<LevelImage>,
    pub patch_size: usize,
    /// Magnification of the finest level.
    pub base_magnification: f64,
    /// Ratio `M` between consecutive levels.
    pub ratio: usize,
}

impl PyramidImage {
    /// Builds all coarser levels from a finest-level raster by repeated
    /// box downsampling, padding with white so every level tiles into
    /// whole patches.
    pub fn from_finest(
        slide_id: impl Into<String>,
        finest: LevelImage,
        patch_size: usize,
        ratio: usize,
        n: usize,
        m1: f64,
    ) -> Result<Self> {
        let mags = build_level_magnifications(m1, ratio, n)?;
        if patch_size == 0 {
            return Err(PathsError::InvalidConfig("patch size must be positive".into()));
        }
        let unit = patch_size * ratio.pow((n - 1) as u32);
        let pw = finest.width.div_ceil(unit).max(1) * unit;
        let ph = finest.height.div_ceil(unit).max(1) * unit;
        let mut current = finest.pad_to(pw, ph);
        current.magnification = mags[n - 1];
        let mut levels = vec![current];
        for i in (0..n - 1).rev() {
            let next = levels.last().unwrap().downsample(ratio, mags[i])?;
            levels.push(next);
        }
        levels.reverse();
        Ok(PyramidImage {
            slide_id: slide_id.into(),
            levels,
            patch_size,
            base_magnification: mags[n - 1],
            ratio,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn grid(&self, level: usize) -> (usize, usize) {
        self.levels[level].grid(self.patch_size)
    }

    pub fn magnifications(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.magnification).collect()
    }

    /// Copies out the `s×s` RGB block addressed by `r`.
    pub fn extract_patch(&self, r: PatchRef) -> Result<Vec<u8>> {
        let level = self.levels.get(r.level).ok_or_else(|| {
            PathsError::Bounds(format!("level {} of {}", r.level, self.levels.len()))
        })?;
        let s = self.patch_size;
        let (gw, gh) = level.grid(s);
        if r.u >= gw || r.v >= gh {
            return Err(PathsError::Bounds(format!(
                "patch ({}, {}) outside {gw}x{gh} grid at level {}",
                r.u, r.v, r.level
            )));
        }
        let mut out = Vec::with_capacity(s * s * 3);
        for y in r.v * s..(r.v + 1) * s {
            let start = (y * level.width + r.u * s) * 3;
            out.extend_from_slice(&level.pixels[start..start + s * 3]);
        }
        Ok(out)
    }

    /// Structural checks: ratio between levels, tiling, magnification sequence.
    pub fn validate(&self) -> Result<()> {
        let s = self.patch_size;
        for (i, l) in self.levels.iter().enumerate() {
            if l.width % s != 0 || l.height % s != 0 {
                return Err(PathsError::Shape(format!(
                    "level {i} is {}x{}, not a multiple of patch size {s}",
                    l.width, l.height
                )));
            }
            if l.pixels.len() != l.width * l.height * 3 {
                return Err(PathsError::Shape(format!("level {i} raster length mismatch")));
            }
            if i + 1 < self.levels.len() {
                let f = &self.levels[i + 1];
                if f.width != l.width * self.ratio || f.height != l.height * self.ratio {
                    return Err(PathsError::Shape(format!(
                        "level {} is not {}x level {i}",
                        i + 1,
                        self.ratio
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magnification_sequences() {
        assert_eq!(
            build_level_magnifications(0.625, 2, 5).unwrap(),
            vec![0.625, 1.25, 2.5, 5.0, 10.0]
        );
        assert_eq!(build_level_magnifications(1.0, 2, 1).unwrap(), vec![1.0]);
        assert_eq!(build_level_magnifications(1.0, 3, 3).unwrap(), vec![1.0, 3.0, 9.0]);
        assert!(build_level_magnifications(0.0, 2, 3).is_err());
        assert!(build_level_magnifications(-1.0, 2, 3).is_err());
        assert!(build_level_magnifications(1.0, 2, 0).is_err());
    }

    fn gradient_level(w: usize, h: usize) -> LevelImage {
        let mut l = LevelImage::filled(1.0, w, h, [0; 3]);
        for y in 0..h {
            for x in 0..w {
                l.set_pixel(x, y, [(x * 7 % 256) as u8, (y * 11 % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        l
    }

    #[test]
    fn padding_is_white_and_levels_scale() {
        let p = PyramidImage::from_finest("t", gradient_level(30, 20), 8, 2, 2, 1.0).unwrap();
        p.validate().unwrap();
        assert_eq!((p.levels[1].width, p.levels[1].height), (32, 32));
        assert_eq!((p.levels[0].width, p.levels[0].height), (16, 16));
        assert_eq!(p.levels[1].pixel(31, 0), [255; 3]);
        assert_eq!(p.levels[1].pixel(0, 25), [255; 3]);
        assert_eq!(p.magnifications(), vec![1.0, 2.0]);
    }

    #[test]
    fn single_patch_extract_is_whole_level() {
        let p = PyramidImage::from_finest("t", gradient_level(8, 8), 8, 2, 1, 1.0).unwrap();
        let patch = p.extract_patch(PatchRef::new(0, 0, 0)).unwrap();
        assert_eq!(patch, p.levels[0].pixels);
        assert_eq!(patch, p.extract_patch(PatchRef::new(0, 0, 0)).unwrap());
    }

    #[test]
    fn extract_matches_independent_slice() {
        let img = gradient_level(32, 24);
        let p = PyramidImage::from_finest("t", img.clone(), 8, 2, 1, 1.0).unwrap();
        for (u, v) in [(0, 0), (3, 2), (1, 1)] {
            let got = p.extract_patch(PatchRef::new(0, u, v)).unwrap();
            let mut want = Vec::new();
            for y in v * 8..v * 8 + 8 {
                for x in u * 8..u * 8 + 8 {
                    want.extend_from_slice(&img.pixel(x, y));
                }
            }
            assert_eq!(got, want);
        }
        assert!(matches!(
            p.extract_patch(PatchRef::new(0, 4, 0)),
            Err(PathsError::Bounds(_))
        ));
        assert!(p.extract_patch(PatchRef::new(1, 0, 0)).is_err());
    }

    #[test]
    fn downsample_reproduces_coarser_levels() {
        let p = PyramidImage::from_finest("t", gradient_level(64, 64), 8, 2, 3, 1.0).unwrap();
        for i in 0..2 {
            let d = p.levels[i + 1].downsample(2, p.levels[i].magnification).unwrap();
            assert_eq!(d, p.levels[i]);
        }
    }
}
