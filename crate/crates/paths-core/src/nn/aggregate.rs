use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use super::{positional_encoding_2d, slice1, slice1_mut, uniform_vector, LayerCache, Linear, Params, TransformerLayer};
use crate::error::{PathsError, Result};

/// Attention pooling: a learned token is prepended to the projected,
/// position-tagged patch features and its output after `L` layers is the
/// level's slide feature. With `L = 0` the projected features are averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregator {
    pub input: Linear,
    pub token: Array1<f64>,
    pub layers: Vec<TransformerLayer>,
}

#[derive(Clone, Debug)]
pub struct AggCache {
    z: Array2<f64>,
    layer_caches: Vec<LayerCache>,
    tokens: usize,
}

impl Aggregator {
    pub fn new(d: usize, w: usize, heads: usize, layers: usize, rng: &mut impl Rng) -> Self {
        Aggregator {
            input: Linear::new(d, w, rng),
            token: uniform_vector(w, 1.0 / (w as f64).sqrt(), rng),
            layers: (0..layers).map(|_| TransformerLayer::new(w, heads, rng)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.token.len()
    }

    /// `z: (n, d)`, `positions`: one `(u, v)` per row. Empty input gives the
    /// zero vector.
    pub fn forward(&self, z: &Array2<f64>, positions: &[(f64, f64)]) -> Result<(Array1<f64>, AggCache)> {
        let w = self.width();
        if z.nrows() != positions.len() {
            return Err(PathsError::Shape(format!(
                "{} features but {} positions",
                z.nrows(),
                positions.len()
            )));
        }
        if z.ncols() != self.input.input_dim() {
            return Err(PathsError::Shape(format!(
                "aggregator expects width {}, got {}",
                self.input.input_dim(),
                z.ncols()
            )));
        }
        let n = z.nrows();
        let cache = AggCache {
            z: z.clone(),
            layer_caches: Vec::new(),
            tokens: n,
        };
        if n == 0 {
            return Ok((Array1::zeros(w), cache));
        }
        let mut seq = Array2::zeros((n + 1, w));
        seq.row_mut(0).assign(&self.token);
        let projected = self.input.forward(z);
        seq.slice_mut(s![1.., ..]).assign(&projected);
        for (r, &(u, v)) in positions.iter().enumerate() {
            let pe = positional_encoding_2d(u, v, w)?;
            let mut row = seq.row_mut(r + 1);
            row += &pe;
        }
        if self.layers.is_empty() {
            let mean = seq.slice(s![1.., ..]).mean_axis(Axis(0)).expect("nonempty");
            return Ok((mean, cache));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, c) = layer.forward(&seq);
            caches.push(c);
            seq = next;
        }
        Ok((
            seq.row(0).to_owned(),
            AggCache {
                layer_caches: caches,
                ..cache
            },
        ))
    }

    /// Returns `dL/dz` given `dL/dF`.
    pub fn backward(&self, cache: &AggCache, dout: &Array1<f64>, grad: &mut Aggregator) -> Array2<f64> {
        let n = cache.tokens;
        let w = self.width();
        if n == 0 {
            return Array2::zeros((0, self.input.input_dim()));
        }
        let mut dseq = Array2::zeros((n + 1, w));
        if self.layers.is_empty() {
            let share = dout / n as f64;
            for r in 1..=n {
                dseq.row_mut(r).assign(&share);
            }
        } else {
            dseq.row_mut(0).assign(dout);
            for (layer, (c, g)) in self
                .layers
                .iter()
                .zip(cache.layer_caches.iter().zip(grad.layers.iter_mut()))
                .rev()
            {
                dseq = layer.backward(c, &dseq, g);
            }
        }
        grad.token += &dseq.row(0);
        let dproj = dseq.slice(s![1.., ..]).to_owned();
        self.input.backward(&cache.z, &dproj, &mut grad.input)
    }
}

impl Params for Aggregator {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.input.visit(&mut |n, t| f(&format!("input.{n}"), t));
        f("token", slice1(&self.token));
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&mut |n, t| f(&format!("layers.{i}.{n}"), t));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.input.visit_mut(&mut |n, t| f(&format!("input.{n}"), t));
        f("token", slice1_mut(&mut self.token));
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&mut |n, t| f(&format!("layers.{i}.{n}"), t));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn agg(layers: usize) -> Aggregator {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        Aggregator::new(6, 8, 2, layers, &mut rng)
    }

    #[test]
    fn empty_input_is_zero() {
        let (f, _) = agg(2).forward(&Array2::zeros((0, 6)), &[]).unwrap();
        assert_eq!(f, Array1::<f64>::zeros(8));
    }

    #[test]
    fn permutation_invariant() {
        let a = agg(2);
        let z = Array2::from_shape_fn((5, 6), |(i, j)| ((i * 7 + j * 3) % 11) as f64 * 0.2 - 1.0);
        let pos: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, (4 - i) as f64 * 2.0)).collect();
        let (f, _) = a.forward(&z, &pos).unwrap();
        let order = [3, 0, 4, 1, 2];
        let zp = Array2::from_shape_fn((5, 6), |(i, j)| z[[order[i], j]]);
        let pp: Vec<_> = order.iter().map(|&i| pos[i]).collect();
        let (g, _) = a.forward(&zp, &pp).unwrap();
        assert!((&f - &g).iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn zero_layers_single_patch_is_projection_plus_position() {
        let a = agg(0);
        let z = Array2::from_shape_fn((1, 6), |(_, j)| j as f64 * 0.1);
        let (f, _) = a.forward(&z, &[(2.0, 3.0)]).unwrap();
        let want = a.input.forward_vec(&z.row(0).to_owned()) + positional_encoding_2d(2.0, 3.0, 8).unwrap();
        assert!((&f - &want).iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        assert!(matches!(
            agg(1).forward(&Array2::zeros((2, 5)), &[(0.0, 0.0), (1.0, 0.0)]),
            Err(PathsError::Shape(_))
        ));
    }
}
