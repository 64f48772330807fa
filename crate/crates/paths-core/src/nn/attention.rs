use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::{gelu, gelu_grad, LayerNorm, Linear, NormCache, Params};

/// Full multi-head self-attention over a `(tokens, w)` sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights per head, each `(tokens, tokens)`.
    probs: Vec<Array2<f64>>,
    mixed: Array2<f64>,
}

impl Attention {
    pub fn new(w: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Attention {
            heads,
            q: Linear::new(w, w, rng),
            k: Linear::new(w, w, rng),
            v: Linear::new(w, w, rng),
            o: Linear::new(w, w, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let w = x.ncols();
        let dh = w / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let mut mixed = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(self.heads);
        for hh in 0..self.heads {
            let cols = s![.., hh * dh..(hh + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for mut row in scores.axis_iter_mut(Axis(0)) {
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|z| (z - max).exp());
                let sum = row.sum();
                row /= sum;
            }
            mixed.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let out = self.o.forward(&mixed);
        let cache = AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            mixed,
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &AttentionCache, dout: &Array2<f64>, grad: &mut Attention) -> Array2<f64> {
        let w = cache.x.ncols();
        let dh = w / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dmixed = self.o.backward(&cache.mixed, dout, &mut grad.o);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for hh in 0..self.heads {
            let cols = s![.., hh * dh..(hh + 1) * dh];
            let p = &cache.probs[hh];
            let dm = dmixed.slice(cols);
            let dp = dm.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dm));
            let mut ds = p * &dp;
            for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let total = row.sum();
                row.zip_mut_with(&prow, |d, &pp| *d -= pp * total);
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut dx = self.q.backward(&cache.x, &dq, &mut grad.q);
        dx += &self.k.backward(&cache.x, &dk, &mut grad.k);
        dx += &self.v.backward(&cache.x, &dv, &mut grad.v);
        dx
    }
}

impl Params for Attention {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.q.visit(&mut |n, t| f(&format!("q.{n}"), t));
        self.k.visit(&mut |n, t| f(&format!("k.{n}"), t));
        self.v.visit(&mut |n, t| f(&format!("v.{n}"), t));
        self.o.visit(&mut |n, t| f(&format!("o.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.q.visit_mut(&mut |n, t| f(&format!("q.{n}"), t));
        self.k.visit_mut(&mut |n, t| f(&format!("k.{n}"), t));
        self.v.visit_mut(&mut |n, t| f(&format!("v.{n}"), t));
        self.o.visit_mut(&mut |n, t| f(&format!("o.{n}"), t));
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + FFN(LN(x))` with a GELU
/// feed-forward of width `2w`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Clone, Debug)]
pub struct LayerCache {
    n1: NormCache,
    a: AttentionCache,
    n2: NormCache,
    normed2: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl TransformerLayer {
    pub fn new(w: usize, heads: usize, rng: &mut impl Rng) -> Self {
        TransformerLayer {
            norm1: LayerNorm::new(w),
            attn: Attention::new(w, heads, rng),
            norm2: LayerNorm::new(w),
            ff1: Linear::new(w, 2 * w, rng),
            ff2: Linear::new(2 * w, w, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerCache) {
        let (normed1, n1) = self.norm1.forward(x);
        let (attended, a) = self.attn.forward(&normed1);
        let x1 = x + &attended;
        let (normed2, n2) = self.norm2.forward(&x1);
        let pre = self.ff1.forward(&normed2);
        let act = pre.mapv(gelu);
        let out = &x1 + &self.ff2.forward(&act);
        (
            out,
            LayerCache {
                n1,
                a,
                n2,
                normed2,
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &LayerCache, dout: &Array2<f64>, grad: &mut TransformerLayer) -> Array2<f64> {
        let dact = self.ff2.backward(&cache.act, dout, &mut grad.ff2);
        let dpre = &dact * &cache.pre.mapv(gelu_grad);
        let dnormed2 = self.ff1.backward(&cache.normed2, &dpre, &mut grad.ff1);
        let dx1 = dout + &self.norm2.backward(&cache.n2, &dnormed2, &mut grad.norm2);
        let dnormed1 = self.attn.backward(&cache.a, &dx1, &mut grad.attn);
        &dx1 + &self.norm1.backward(&cache.n1, &dnormed1, &mut grad.norm1)
    }
}

impl Params for TransformerLayer {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.norm1.visit(&mut |n, t| f(&format!("norm1.{n}"), t));
        self.attn.visit(&mut |n, t| f(&format!("attn.{n}"), t));
        self.norm2.visit(&mut |n, t| f(&format!("norm2.{n}"), t));
        self.ff1.visit(&mut |n, t| f(&format!("ff1.{n}"), t));
        self.ff2.visit(&mut |n, t| f(&format!("ff2.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.norm1.visit_mut(&mut |n, t| f(&format!("norm1.{n}"), t));
        self.attn.visit_mut(&mut |n, t| f(&format!("attn.{n}"), t));
        self.norm2.visit_mut(&mut |n, t| f(&format!("norm2.{n}"), t));
        self.ff1.visit_mut(&mut |n, t| f(&format!("ff1.{n}"), t));
        self.ff2.visit_mut(&mut |n, t| f(&format!("ff2.{n}"), t));
    }
}
