use ndarray::{Array1, Array2};
use rand::Rng;

use super::{gelu, gelu_grad, sigmoid, Linear, Params};

/// Two-layer gate: `α = σ(W₂ gelu(W₁ y + b₁) + b₂)`, one scalar per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMlp {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    alpha: Array1<f64>,
}

impl ImportanceMlp {
    pub fn new(d: usize, h_imp: usize, rng: &mut impl Rng) -> Self {
        ImportanceMlp {
            hidden: Linear::new(d, h_imp, rng),
            out: Linear::new(h_imp, 1, rng),
        }
    }

    pub fn forward(&self, y: &Array2<f64>) -> (Array1<f64>, MlpCache) {
        let pre = self.hidden.forward(y);
        let act = pre.mapv(gelu);
        let logits = self.out.forward(&act);
        let alpha = logits.column(0).mapv(sigmoid);
        let cache = MlpCache {
            input: y.clone(),
            pre,
            act,
            alpha: alpha.clone(),
        };
        (alpha, cache)
    }

    /// Gradient w.r.t. the input rows given `dL/dα`.
    pub fn backward(&self, cache: &MlpCache, dalpha: &Array1<f64>, grad: &mut ImportanceMlp) -> Array2<f64> {
        let dlogit = Array2::from_shape_fn((dalpha.len(), 1), |(i, _)| {
            let a = cache.alpha[i];
            dalpha[i] * a * (1.0 - a)
        });
        let dact = self.out.backward(&cache.act, &dlogit, &mut grad.out);
        let dpre = &dact * &cache.pre.mapv(gelu_grad);
        self.hidden.backward(&cache.input, &dpre, &mut grad.hidden)
    }
}

impl Params for ImportanceMlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.hidden.visit(&mut |n, t| f(&format!("hidden.{n}"), t));
        self.out.visit(&mut |n, t| f(&format!("out.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.hidden.visit_mut(&mut |n, t| f(&format!("hidden.{n}"), t));
        self.out.visit_mut(&mut |n, t| f(&format!("out.{n}"), t));
    }
}
