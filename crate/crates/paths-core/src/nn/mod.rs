//! Small dense layers with hand-written backward passes, in `f64`.
//!
//! Every layer exposes `forward` returning its output plus a cache and a
//! `backward` that accumulates parameter gradients into a same-shaped
//! gradient struct and returns the input gradient.

mod aggregate;
mod attention;
mod linear;
mod lstm;
mod mlp;
mod norm;
mod posenc;

pub use aggregate::{AggCache, Aggregator};
pub use attention::{Attention, AttentionCache, LayerCache, TransformerLayer};
pub use linear::Linear;
pub use lstm::{Lstm, LstmCache};
pub use mlp::{ImportanceMlp, MlpCache};
pub use norm::{LayerNorm, NormCache};
pub use posenc::positional_encoding_2d;

use ndarray::{Array1, Array2};
use rand::Rng;

/// Uniform visiting of every trainable tensor, in a fixed order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    fn unflatten(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_mut(&mut |_, t| {
            t.copy_from_slice(&flat[pos..pos + t.len()]);
            pos += t.len();
        });
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, t| t.fill(value));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|x| x.is_finite()));
        ok
    }
}

/// A zero-filled copy, used as a gradient accumulator.
pub fn zeros_like<P: Params + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.fill(0.0);
    z
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

pub(crate) fn uniform_vector(len: usize, bound: f64, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.random_range(-bound..bound))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
