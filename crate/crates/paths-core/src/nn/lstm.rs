use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::{sigmoid, slice2, slice2_mut, Linear, Params};

/// Gated recurrent cell shared by every level, plus the output projection
/// that turns the ancestor summary into a feature offset.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    /// Input-to-gates, `(4h, d)` with bias; gate order i, f, g, o.
    pub input: Linear,
    /// Hidden-to-gates, `(4h, h)`.
    pub recurrent: Array2<f64>,
    /// Hidden-to-offset, `(d, h)`, no bias.
    pub project: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    gates: Array2<f64>,
    c: Array2<f64>,
}

impl Lstm {
    pub fn new(d: usize, h: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (h as f64).sqrt();
        Lstm {
            input: Linear::new(d, 4 * h, rng),
            recurrent: super::uniform_matrix(4 * h, h, bound, rng),
            project: super::uniform_matrix(d, h, bound, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.recurrent.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.input.input_dim()
    }

    /// Offset `project · h` for each row of `h`.
    pub fn offset(&self, h: &Array2<f64>) -> Array2<f64> {
        h.dot(&self.project.t())
    }

    pub fn offset_backward(&self, h: &Array2<f64>, dy: &Array2<f64>, grad: &mut Lstm) -> Array2<f64> {
        grad.project += &dy.t().dot(h);
        dy.dot(&self.project)
    }

    /// One step for a batch of rows; returns `(h, c)`.
    pub fn step(&self, x: &Array2<f64>, h_prev: &Array2<f64>, c_prev: &Array2<f64>) -> (Array2<f64>, Array2<f64>, LstmCache) {
        let hd = self.hidden_dim();
        let mut gates = self.input.forward(x) + h_prev.dot(&self.recurrent.t());
        for mut row in gates.axis_iter_mut(Axis(0)) {
            for j in 0..4 * hd {
                row[j] = if (2 * hd..3 * hd).contains(&j) {
                    row[j].tanh()
                } else {
                    sigmoid(row[j])
                };
            }
        }
        let i = gates.slice(s![.., 0..hd]);
        let f = gates.slice(s![.., hd..2 * hd]);
        let g = gates.slice(s![.., 2 * hd..3 * hd]);
        let o = gates.slice(s![.., 3 * hd..]);
        let c = &f * c_prev + &i * &g;
        let h = &o * &c.mapv(f64::tanh);
        let cache = LstmCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            gates: gates.clone(),
            c: c.clone(),
        };
        (h, c, cache)
    }

    /// Returns `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(
        &self,
        cache: &LstmCache,
        dh: &Array2<f64>,
        dc: &Array2<f64>,
        grad: &mut Lstm,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let hd = self.hidden_dim();
        let gates = &cache.gates;
        let i = gates.slice(s![.., 0..hd]);
        let f = gates.slice(s![.., hd..2 * hd]);
        let g = gates.slice(s![.., 2 * hd..3 * hd]);
        let o = gates.slice(s![.., 3 * hd..]);
        let tc = cache.c.mapv(f64::tanh);
        let dct = dc + &(dh * &o * &tc.mapv(|t| 1.0 - t * t));
        let mut dpre = Array2::zeros(gates.raw_dim());
        dpre.slice_mut(s![.., 0..hd])
            .assign(&(&dct * &g * i * &i.mapv(|v| 1.0 - v)));
        dpre.slice_mut(s![.., hd..2 * hd])
            .assign(&(&dct * &cache.c_prev * f * &f.mapv(|v| 1.0 - v)));
        dpre.slice_mut(s![.., 2 * hd..3 * hd])
            .assign(&(&dct * &i * &g.mapv(|v| 1.0 - v * v)));
        dpre.slice_mut(s![.., 3 * hd..])
            .assign(&(dh * &tc * o * &o.mapv(|v| 1.0 - v)));
        let dc_prev = &dct * &f;
        grad.recurrent += &dpre.t().dot(&cache.h_prev);
        let dh_prev = dpre.dot(&self.recurrent);
        let dx = self.input.backward(&cache.x, &dpre, &mut grad.input);
        (dx, dh_prev, dc_prev)
    }
}

impl Params for Lstm {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.input.visit(&mut |n, t| f(&format!("input.{n}"), t));
        f("recurrent", slice2(&self.recurrent));
        f("project", slice2(&self.project));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.input.visit_mut(&mut |n, t| f(&format!("input.{n}"), t));
        f("recurrent", slice2_mut(&mut self.recurrent));
        f("project", slice2_mut(&mut self.project));
    }
}
