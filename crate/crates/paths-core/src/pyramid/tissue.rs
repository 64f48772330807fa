use serde::{Deserialize, Serialize};

use super::LevelImage;
use crate::error::{PathsError, Result};

/// Per-patch tissue flags for one level, indexed `v * grid_w + u`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TissueMask {
    pub level_index: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub grid: Vec<bool>,
}

impl TissueMask {
    pub fn new(level_index: usize, grid_w: usize, grid_h: usize, grid: Vec<bool>) -> Result<Self> {
        if grid.len() != grid_w * grid_h {
            return Err(PathsError::Shape(format!(
                "mask of {grid_w}x{grid_h} needs {} flags, got {}",
                grid_w * grid_h,
                grid.len()
            )));
        }
        Ok(TissueMask {
            level_index,
            grid_w,
            grid_h,
            grid,
        })
    }

    pub fn full(level_index: usize, grid_w: usize, grid_h: usize, value: bool) -> Self {
        TissueMask {
            level_index,
            grid_w,
            grid_h,
            grid: vec![value; grid_w * grid_h],
        }
    }

    /// Out-of-grid coordinates count as background.
    #[inline]
    pub fn has_tissue(&self, u: usize, v: usize) -> bool {
        u < self.grid_w && v < self.grid_h && self.grid[v * self.grid_w + u]
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    /// Foreground coordinates in row-major (v, then u) order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.count());
        for v in 0..self.grid_h {
            for u in 0..self.grid_w {
                if self.grid[v * self.grid_w + u] {
                    out.push((u, v));
                }
            }
        }
        out
    }
}

#[inline]
pub(crate) fn luminance(rgb: [u8; 3]) -> u8 {
    let y = 299 * u32::from(rgb[0]) + 587 * u32::from(rgb[1]) + 114 * u32::from(rgb[2]);
    ((y + 500) / 1000) as u8
}

pub fn grayscale_histogram(level: &LevelImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for px in level.pixels.chunks_exact(3) {
        hist[luminance([px[0], px[1], px[2]]) as usize] += 1;
    }
    hist
}

/// Otsu's threshold over a 256-bin histogram.
///
/// Intensities `< t` form the dark class. Only thresholds leaving both
/// classes nonempty are candidates; ties go to the lowest `t`. With a single
/// occupied bin the bin's own index is returned.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(PathsError::DegenerateInput("empty histogram".into()));
    }
    let lo = histogram.iter().position(|&c| c > 0).unwrap();
    let hi = histogram.iter().rposition(|&c| c > 0).unwrap();
    if lo == hi {
        return Ok(lo as u8);
    }
    let total_f = total as f64;
    let sum_all: f64 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best_t = lo + 1;
    let mut best = f64::NEG_INFINITY;
    for t in 1..=hi {
        w0 += histogram[t - 1] as f64;
        sum0 += (t - 1) as f64 * histogram[t - 1] as f64;
        if t <= lo {
            continue;
        }
        let w1 = total_f - w0;
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    Ok(best_t as u8)
}

/// Flags patches whose fraction of below-Otsu pixels reaches
/// `min_tissue_fraction` (and is nonzero).
pub fn compute_tissue_mask(
    level: &LevelImage,
    level_index: usize,
    s: usize,
    min_tissue_fraction: f64,
) -> Result<TissueMask> {
    if s == 0 || !level.width.is_multiple_of(s) || !level.height.is_multiple_of(s) {
        return Err(PathsError::Shape(format!(
            "level {}x{} not divisible by patch size {s}",
            level.width, level.height
        )));
    }
    let (gw, gh) = level.grid(s);
    if gw * gh == 0 {
        return TissueMask::new(level_index, gw, gh, Vec::new());
    }
    let threshold = otsu_threshold(&grayscale_histogram(level))?;
    let mut counts = vec![0usize; gw * gh];
    for y in 0..level.height {
        let row = (y / s) * gw;
        for x in 0..level.width {
            if luminance(level.pixel(x, y)) < threshold {
                counts[row + x / s] += 1;
            }
        }
    }
    let area = (s * s) as f64;
    let grid = counts
        .into_iter()
        .map(|c| c > 0 && c as f64 / area >= min_tissue_fraction)
        .collect();
    TissueMask::new(level_index, gw, gh, grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scan: evaluates the between-class variance from scratch
    /// at every threshold.
    fn brute_otsu(hist: &[u64; 256]) -> u8 {
        let mut best = (f64::NEG_INFINITY, 0usize);
        let mut any = false;
        for t in 0..=256usize {
            let (mut n0, mut s0, mut n1, mut s1) = (0f64, 0f64, 0f64, 0f64);
            for (i, &c) in hist.iter().enumerate() {
                if i < t {
                    n0 += c as f64;
                    s0 += (i as u64 * c) as f64;
                } else {
                    n1 += c as f64;
                    s1 += (i as u64 * c) as f64;
                }
            }
            if n0 == 0.0 || n1 == 0.0 {
                continue;
            }
            any = true;
            let d = s0 / n0 - s1 / n1;
            let v = n0 * n1 * d * d;
            if v > best.0 {
                best = (v, t);
            }
        }
        if !any {
            return hist.iter().position(|&c| c > 0).unwrap() as u8;
        }
        best.1 as u8
    }

    fn two_gaussians() -> [u64; 256] {
        let mut h = [0u64; 256];
        for (i, slot) in h.iter_mut().enumerate() {
            let x = i as f64;
            let a = 4000.0 * (-((x - 70.0) / 18.0).powi(2) / 2.0).exp();
            let b = 2500.0 * (-((x - 185.0) / 25.0).powi(2) / 2.0).exp();
            *slot = (a + b).round() as u64;
        }
        h
    }

    #[test]
    fn two_deltas_split() {
        let mut h = [0u64; 256];
        h[10] = 500;
        h[200] = 300;
        let t = otsu_threshold(&h).unwrap();
        assert!((10..200).contains(&(t as usize)));
        assert_eq!(t, brute_otsu(&h));
    }

    #[test]
    fn single_bin_returns_bin() {
        let mut h = [0u64; 256];
        h[42] = 9;
        assert_eq!(otsu_threshold(&h).unwrap(), 42);
    }

    #[test]
    fn empty_histogram_errors() {
        assert!(matches!(
            otsu_threshold(&[0; 256]),
            Err(PathsError::DegenerateInput(_))
        ));
    }

    #[test]
    fn gaussian_mixture_matches_scan() {
        let h = two_gaussians();
        let t = otsu_threshold(&h).unwrap();
        assert_eq!(t, brute_otsu(&h));
        // frozen from the brute-force scan above
        assert_eq!(t, 128);
    }

    #[test]
    fn uniform_white_has_no_tissue() {
        let l = LevelImage::filled(1.0, 32, 32, [255; 3]);
        let m = compute_tissue_mask(&l, 0, 8, 0.1).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn single_dark_patch_is_the_only_tissue() {
        let mut l = LevelImage::filled(1.0, 32, 32, [250; 3]);
        for y in 8..16 {
            for x in 16..24 {
                l.set_pixel(x, y, [20, 30, 40]);
            }
        }
        let m = compute_tissue_mask(&l, 0, 8, 0.1).unwrap();
        assert_eq!(m.foreground(), vec![(2, 1)]);
    }

    #[test]
    fn partial_patch_respects_fraction() {
        // 10x10 patches; one patch holds 37 dark pixels
        let mut l = LevelImage::filled(1.0, 20, 10, [255; 3]);
        let mut dark = 0;
        'outer: for y in 0..10 {
            for x in 0..10 {
                if dark == 37 {
                    break 'outer;
                }
                l.set_pixel(x, y, [10; 3]);
                dark += 1;
            }
        }
        let counted = (0..10)
            .flat_map(|y| (0..10).map(move |x| (x, y)))
            .filter(|&(x, y)| luminance(l.pixel(x, y)) < 128)
            .count();
        assert_eq!(counted, 37);
        assert!(compute_tissue_mask(&l, 0, 10, 0.1).unwrap().has_tissue(0, 0));
        assert!(!compute_tissue_mask(&l, 0, 10, 0.5).unwrap().has_tissue(0, 0));
        assert!(compute_tissue_mask(&l, 0, 10, 0.37).unwrap().has_tissue(0, 0));
    }

    proptest::proptest! {
        #[test]
        fn otsu_agrees_with_scan(bins in proptest::collection::vec(0u64..50, 256)) {
            let mut h = [0u64; 256];
            h.copy_from_slice(&bins);
            proptest::prop_assume!(h.iter().any(|&c| c > 0));
            proptest::prop_assert_eq!(otsu_threshold(&h).unwrap(), brute_otsu(&h));
        }

        #[test]
        fn raising_fraction_never_adds_tissue(seed in 0u64..1000, lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            use rand::{Rng, SeedableRng};
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut l = LevelImage::filled(1.0, 24, 24, [255; 3]);
            for y in 0..24 {
                for x in 0..24 {
                    let g: u8 = rng.random();
                    l.set_pixel(x, y, [g, g, g]);
                }
            }
            let a = compute_tissue_mask(&l, 0, 8, lo).unwrap();
            let b = compute_tissue_mask(&l, 0, 8, hi).unwrap();
            for (x, y) in a.grid.iter().zip(&b.grid) {
                proptest::prop_assert!(*x || !*y);
            }
        }
    }
}
