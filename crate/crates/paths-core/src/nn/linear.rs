use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{slice1, slice1_mut, slice2, slice2_mut, uniform_matrix, uniform_vector, Params};

/// `y = x Wᵀ + b` on row-major batches `x: (n, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Linear {
            w: uniform_matrix(output, input, bound, rng),
            b: uniform_vector(output, bound, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    /// Accumulates into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &dy.t().dot(x);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }

    pub fn backward_vec(&self, x: &Array1<f64>, dy: &Array1<f64>, grad: &mut Linear) -> Array1<f64> {
        for (i, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                grad.w.row_mut(i).scaled_add(g, x);
            }
        }
        grad.b += dy;
        self.w.t().dot(dy)
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w", slice2(&self.w));
        f("b", slice1(&self.b));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", slice2_mut(&mut self.w));
        f("b", slice1_mut(&mut self.b));
    }
}
