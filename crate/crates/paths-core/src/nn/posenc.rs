use ndarray::Array1;

use crate::error::{PathsError, Result};

/// Sinusoidal 2D encoding: the first `w/2` entries encode `u`, the last
/// `w/2` encode `v`, each as interleaved `(sin, cos)` pairs at frequencies
/// `10000^(-2k/(w/2))`.
pub fn positional_encoding_2d(u: f64, v: f64, w: usize) -> Result<Array1<f64>> {
    if w == 0 || !w.is_multiple_of(4) {
        return Err(PathsError::InvalidConfig(format!(
            "positional width must be a positive multiple of 4, got {w}"
        )));
    }
    let half = w / 2;
    let mut out = Array1::zeros(w);
    for (offset, coord) in [(0, u), (half, v)] {
        for k in 0..half / 2 {
            let freq = 10000f64.powf(-((2 * k) as f64) / half as f64);
            out[offset + 2 * k] = (coord * freq).sin();
            out[offset + 2 * k + 1] = (coord * freq).cos();
        }
    }
    Ok(out)
}
