//! Training loop, evaluation, and finite-difference gradient checks.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AblationMode, PathsConfig, SelectionMode};
use crate::dataset::{Dataset, Sample};
use crate::error::{PathsError, Result};
use crate::model::{
    apply_ablation, paths_backward, paths_forward, processor_backward, processor_forward, random_importance_seed,
    ForwardOptions, ProcessorParams,
};
use crate::nn::{zeros_like, ImportanceMlp, Linear, Lstm, Params, TransformerLayer};
use crate::features::FeatureGrid;
use crate::rng::{rng_for, rng_indexed};
use crate::selection::{RecurrentState, SelectionState};
use crate::survival::{concordance_index, nll_surv_loss_with_grad, SurvivalRecord};

/// Adam with the usual decay constants.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, size: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    /// `null` for an epoch whose validation split had no comparable pair.
    pub val_c_index: Vec<Option<f64>>,
    pub best_epoch: usize,
    pub test_c_index: Option<f64>,
    pub wall_clock_seconds: f64,
    pub mode: AblationMode,
    pub config: PathsConfig,
    pub seed: u64,
}

/// Forward switches for evaluating `sample` under `mode`.
pub fn inference_options(cfg: &PathsConfig, mode: AblationMode, slide_id: &str) -> ForwardOptions {
    apply_ablation(ForwardOptions::default(), mode, random_importance_seed(cfg.seed, slide_id))
}

/// Training always gates with the learned importance.
pub fn training_options(mode: AblationMode) -> ForwardOptions {
    let learned = AblationMode::new(mode.context, SelectionMode::Learned);
    apply_ablation(ForwardOptions::default(), learned, 0)
}

/// Risk score per sample, in order.
pub fn predict_risks(
    params: &ProcessorParams,
    samples: &[Sample],
    cfg: &PathsConfig,
    mode: AblationMode,
) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| {
            let opts = inference_options(cfg, mode, s.slide_id());
            paths_forward(&s.grids, params, cfg, &opts).map(|o| o.prediction.risk())
        })
        .collect()
}

pub fn evaluate(params: &ProcessorParams, samples: &[Sample], cfg: &PathsConfig, mode: AblationMode) -> Result<f64> {
    let risks = predict_risks(params, samples, cfg, mode)?;
    let records: Vec<SurvivalRecord> = samples.iter().map(|s| s.record.clone()).collect();
    concordance_index(&risks, &records)
}

fn slide_gradient(
    params: &ProcessorParams,
    sample: &Sample,
    cfg: &PathsConfig,
    opts: &ForwardOptions,
) -> Result<(f64, ProcessorParams)> {
    let out = paths_forward(&sample.grids, params, cfg, opts)?;
    let (loss, dlogits) = nll_surv_loss_with_grad(
        &out.prediction.logits,
        sample.record.bucket,
        sample.record.censored,
        cfg.loss_alpha,
    )?;
    Ok((loss, paths_backward(params, &out, &dlogits)))
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(c) => Ok(Some(c)),
        Err(PathsError::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Minimises the mean censored NLL with Adam, one step per batch of
/// per-slide gradients, and returns the parameters of the epoch with the
/// best validation c-index (earliest on ties). The returned parameters are
/// rounded to `f32` before the test evaluation, so a checkpoint reproduces
/// the reported test c-index exactly.
pub fn train_model(
    dataset: &Dataset,
    cfg: &PathsConfig,
    mode: AblationMode,
) -> Result<(ProcessorParams, TrainReport)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(PathsError::InvalidSpec("empty training split".into()));
    }
    let start = Instant::now();
    let mut params = ProcessorParams::new(cfg, cfg.seed);
    let mut theta = params.flatten();
    let mut adam = Adam::new(cfg.lr, theta.len());
    let opts = training_options(mode);

    let mut best = (params.clone(), f64::NEG_INFINITY, 0usize);
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_c_index = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_indexed(cfg.seed, "epoch-order", epoch as u64));
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, ProcessorParams)>> = chunk
                .par_iter()
                .map(|&i| slide_gradient(&params, &dataset.train[i], cfg, &opts))
                .collect();
            let mut grad = vec![0.0; theta.len()];
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                let mut pos = 0;
                g.visit(&mut |_, t| {
                    for (a, b) in grad[pos..pos + t.len()].iter_mut().zip(t) {
                        *a += b;
                    }
                    pos += t.len();
                });
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(PathsError::Diverged {
                    epoch,
                    batch,
                    msg: format!("batch loss {batch_loss}"),
                });
            }
            epoch_loss += batch_loss;
            adam.step(&mut theta, &grad);
            params.unflatten(&theta);
        }
        train_loss.push(epoch_loss / order.len() as f64);
        let val = if dataset.val.is_empty() {
            None
        } else {
            optional(evaluate(&params, &dataset.val, cfg, mode))?
        };
        val_c_index.push(val);
        let score = val.unwrap_or(f64::NEG_INFINITY);
        if score > best.1 || epoch == 0 {
            best = (params.clone(), score, epoch);
        }
    }
    let (mut best_params, _, best_epoch) = best;
    best_params.quantize_f32();
    let test_c_index = if dataset.test.is_empty() {
        None
    } else {
        optional(evaluate(&best_params, &dataset.test, cfg, mode))?
    };
    let report = TrainReport {
        train_loss,
        val_c_index,
        best_epoch,
        test_c_index,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        mode,
        config: cfg.clone(),
        seed: cfg.seed,
    };
    Ok((best_params, report))
}

/// A module under a scalar probe loss, parameterised by a flat vector.
pub trait GradProbe {
    fn theta(&self) -> Vec<f64>;
    fn loss_at(&self, theta: &[f64]) -> f64;
    fn grad_at(&self, theta: &[f64]) -> Vec<f64>;
}

/// Worst relative error between analytic and central-difference gradients
/// over `probes` random coordinates. Relative error is
/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(probe: &dyn GradProbe, probes: usize, eps: f64, seed: u64) -> Result<f64> {
    let theta = probe.theta();
    let grad = probe.grad_at(&theta);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(PathsError::Numeric("non-finite analytic gradient".into()));
    }
    let mut rng = rng_for(seed, "gradient-check");
    let mut worst: f64 = 0.0;
    let mut t = theta.clone();
    for _ in 0..probes.min(theta.len().max(1)) {
        let i = rng.random_range(0..theta.len());
        t[i] = theta[i] + eps;
        let up = probe.loss_at(&t);
        t[i] = theta[i] - eps;
        let down = probe.loss_at(&t);
        t[i] = theta[i];
        let numeric = (up - down) / (2.0 * eps);
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn split_params<P: Params + Clone>(module: &P, theta: &[f64]) -> (P, Vec<f64>) {
    let mut m = module.clone();
    let k = m.param_count();
    m.unflatten(&theta[..k]);
    (m, theta[k..].to_vec())
}

fn join<P: Params>(module: &P, extra: &[f64]) -> Vec<f64> {
    let mut t = module.flatten();
    t.extend_from_slice(extra);
    t
}

/// `½‖xWᵀ + b − target‖²` over a batch, parameters only.
pub struct LinearProbe {
    pub layer: Linear,
    pub x: Array2<f64>,
    pub target: Array2<f64>,
}

impl LinearProbe {
    pub fn random(input: usize, output: usize, rows: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "linear-probe");
        LinearProbe {
            layer: Linear::new(input, output, &mut rng),
            x: random_matrix(rows, input, &mut rng),
            target: random_matrix(rows, output, &mut rng),
        }
    }
}

impl GradProbe for LinearProbe {
    fn theta(&self) -> Vec<f64> {
        self.layer.flatten()
    }

    fn loss_at(&self, theta: &[f64]) -> f64 {
        let (l, _) = split_params(&self.layer, theta);
        0.5 * (l.forward(&self.x) - &self.target).mapv(|e| e * e).sum()
    }

    fn grad_at(&self, theta: &[f64]) -> Vec<f64> {
        let (l, _) = split_params(&self.layer, theta);
        let mut g = zeros_like(&l);
        let dy = l.forward(&self.x) - &self.target;
        l.backward(&self.x, &dy, &mut g);
        g.flatten()
    }
}

/// `Σ cᵢ αᵢ` over a batch; the probe vector covers weights and inputs.
pub struct MlpProbe {
    pub mlp: ImportanceMlp,
    pub y: Array2<f64>,
    pub coef: Array1<f64>,
}

impl MlpProbe {
    pub fn random(d: usize, h: usize, rows: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "mlp-probe");
        MlpProbe {
            mlp: ImportanceMlp::new(d, h, &mut rng),
            y: random_matrix(rows, d, &mut rng),
            coef: Array1::from_shape_fn(rows, |_| rng.random_range(-1.0..1.0)),
        }
    }

    fn unpack(&self, theta: &[f64]) -> (ImportanceMlp, Array2<f64>) {
        let (m, rest) = split_params(&self.mlp, theta);
        (m, Array2::from_shape_vec(self.y.raw_dim(), rest).expect("input shape"))
    }
}

impl GradProbe for MlpProbe {
    fn theta(&self) -> Vec<f64> {
        join(&self.mlp, self.y.as_slice().expect("contiguous"))
    }

    fn loss_at(&self, theta: &[f64]) -> f64 {
        let (m, y) = self.unpack(theta);
        m.forward(&y).0.dot(&self.coef)
    }

    fn grad_at(&self, theta: &[f64]) -> Vec<f64> {
        let (m, y) = self.unpack(theta);
        let mut g = zeros_like(&m);
        let (_, cache) = m.forward(&y);
        let dy = m.backward(&cache, &self.coef, &mut g);
        join(&g, dy.as_slice().expect("contiguous"))
    }
}

/// One recurrent step plus the ancestor offset, probed through linear
/// functionals of `h`, `c` and the offset. Inputs and the previous state
/// are part of the probe vector.
pub struct LstmProbe {
    pub lstm: Lstm,
    pub x: Array2<f64>,
    pub h_prev: Array2<f64>,
    pub c_prev: Array2<f64>,
    pub ch: Array2<f64>,
    pub cc: Array2<f64>,
    pub co: Array2<f64>,
}

impl LstmProbe {
    pub fn random(d: usize, h: usize, rows: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "lstm-probe");
        LstmProbe {
            lstm: Lstm::new(d, h, &mut rng),
            x: random_matrix(rows, d, &mut rng),
            h_prev: random_matrix(rows, h, &mut rng),
            c_prev: random_matrix(rows, h, &mut rng),
            ch: random_matrix(rows, h, &mut rng),
            cc: random_matrix(rows, h, &mut rng),
            co: random_matrix(rows, d, &mut rng),
        }
    }

    fn unpack(&self, theta: &[f64]) -> (Lstm, Array2<f64>, Array2<f64>, Array2<f64>) {
        let (m, rest) = split_params(&self.lstm, theta);
        let (a, b) = (self.x.len(), self.h_prev.len());
        let x = Array2::from_shape_vec(self.x.raw_dim(), rest[..a].to_vec()).expect("shape");
        let hp = Array2::from_shape_vec(self.h_prev.raw_dim(), rest[a..a + b].to_vec()).expect("shape");
        let cp = Array2::from_shape_vec(self.c_prev.raw_dim(), rest[a + b..].to_vec()).expect("shape");
        (m, x, hp, cp)
    }
}

impl GradProbe for LstmProbe {
    fn theta(&self) -> Vec<f64> {
        let mut extra = self.x.iter().copied().collect::<Vec<_>>();
        extra.extend(self.h_prev.iter());
        extra.extend(self.c_prev.iter());
        join(&self.lstm, &extra)
    }

    fn loss_at(&self, theta: &[f64]) -> f64 {
        let (m, x, hp, cp) = self.unpack(theta);
        let (h, c, _) = m.step(&x, &hp, &cp);
        (&h * &self.ch).sum() + (&c * &self.cc).sum() + (&m.offset(&hp) * &self.co).sum()
    }

    fn grad_at(&self, theta: &[f64]) -> Vec<f64> {
        let (m, x, hp, cp) = self.unpack(theta);
        let mut g = zeros_like(&m);
        let (_, _, cache) = m.step(&x, &hp, &cp);
        let (dx, mut dhp, dcp) = m.step_backward(&cache, &self.ch, &self.cc, &mut g);
        dhp += &m.offset_backward(&hp, &self.co, &mut g);
        let mut extra = dx.iter().copied().collect::<Vec<_>>();
        extra.extend(dhp.iter());
        extra.extend(dcp.iter());
        join(&g, &extra)
    }
}

/// One pre-norm transformer layer under a linear functional of its output.
pub struct TransformerProbe {
    pub layer: TransformerLayer,
    pub x: Array2<f64>,
    pub coef: Array2<f64>,
}

impl TransformerProbe {
    pub fn random(w: usize, heads: usize, rows: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "transformer-probe");
        let mut layer = TransformerLayer::new(w, heads, &mut rng);
        // move the norms off their identity initialisation
        layer.visit_mut(&mut |n, t| {
            if n.contains("norm") {
                t.iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
            }
        });
        TransformerProbe {
            layer,
            x: random_matrix(rows, w, &mut rng),
            coef: random_matrix(rows, w, &mut rng),
        }
    }

    fn unpack(&self, theta: &[f64]) -> (TransformerLayer, Array2<f64>) {
        let (m, rest) = split_params(&self.layer, theta);
        (m, Array2::from_shape_vec(self.x.raw_dim(), rest).expect("shape"))
    }
}

impl GradProbe for TransformerProbe {
    fn theta(&self) -> Vec<f64> {
        join(&self.layer, self.x.as_slice().expect("contiguous"))
    }

    fn loss_at(&self, theta: &[f64]) -> f64 {
        let (m, x) = self.unpack(theta);
        (&m.forward(&x).0 * &self.coef).sum()
    }

    fn grad_at(&self, theta: &[f64]) -> Vec<f64> {
        let (m, x) = self.unpack(theta);
        let mut g = zeros_like(&m);
        let (_, cache) = m.forward(&x);
        let dx = m.backward(&cache, &self.coef, &mut g);
        join(&g, dx.as_slice().expect("contiguous"))
    }
}

/// Prediction head followed by the survival loss, over the head weights and
/// the summed context.
pub struct HeadProbe {
    pub head: Linear,
    pub features: Array1<f64>,
    pub bucket: usize,
    pub censored: bool,
    pub loss_alpha: f64,
}

impl HeadProbe {
    pub fn random(w: usize, b: usize, censored: bool, seed: u64) -> Self {
        let mut rng = rng_for(seed, "head-probe");
        HeadProbe {
            head: Linear::new(w, b, &mut rng),
            features: Array1::from_shape_fn(w, |_| rng.random_range(-2.0..2.0)),
            bucket: rng.random_range(0..b),
            censored,
            loss_alpha: 0.6,
        }
    }

    fn unpack(&self, theta: &[f64]) -> (Linear, Array1<f64>) {
        let (m, rest) = split_params(&self.head, theta);
        (m, Array1::from(rest))
    }
}

impl GradProbe for HeadProbe {
    fn theta(&self) -> Vec<f64> {
        join(&self.head, self.features.as_slice().expect("contiguous"))
    }

    fn loss_at(&self, theta: &[f64]) -> f64 {
        let (m, f) = self.unpack(theta);
        let logits = m.forward_vec(&f).to_vec();
        nll_surv_loss_with_grad(&logits, self.bucket, self.censored, self.loss_alpha)
            .expect("bucket in range")
            .0
    }

    fn grad_at(&self, theta: &[f64]) -> Vec<f64> {
        let (m, f) = self.unpack(theta);
        let logits = m.forward_vec(&f).to_vec();
        let (_, dl) = nll_surv_loss_with_grad(&logits, self.bucket, self.censored, self.loss_alpha)
            .expect("bucket in range");
        let mut g = zeros_like(&m);
        let df = m.backward_vec(&f, &Array1::from(dl), &mut g);
        join(&g, df.as_slice().expect("contiguous"))
    }
}

/// The survival loss alone, over the logits.
pub struct LossProbe {
    pub logits: Vec<f64>,
    pub bucket: usize,
    pub censored: bool,
    pub loss_alpha: f64,
}

impl GradProbe for LossProbe {
    fn theta(&self) -> Vec<f64> {
        self.logits.clone()
    }

    fn loss_at(&self, theta: &[f64]) -> f64 {
        nll_surv_loss_with_grad(theta, self.bucket, self.censored, self.loss_alpha)
            .expect("bucket in range")
            .0
    }

    fn grad_at(&self, theta: &[f64]) -> Vec<f64> {
        nll_surv_loss_with_grad(theta, self.bucket, self.censored, self.loss_alpha)
            .expect("bucket in range")
            .1
    }
}

/// A whole processor at an inner level: inherited recurrent state, offset,
/// recurrent step, gate, scaling and aggregation. The probe is a linear
/// functional of `Fⁱ` and of the state handed to children.
pub struct ProcessorProbe {
    pub params: ProcessorParams,
    pub cfg: PathsConfig,
    pub grids: Vec<FeatureGrid>,
    pub state: SelectionState,
    pub cf: Array1<f64>,
    pub ch: Array2<f64>,
    pub cc: Array2<f64>,
}

impl ProcessorProbe {
    /// Level 1 of a 3-level model, with up to `patches` random foreground
    /// patches each carrying a random inherited state.
    pub fn random(cfg: &PathsConfig, patches: usize, seed: u64) -> Self {
        assert!(cfg.n >= 3, "needs an inner level");
        let mut rng = rng_for(seed, "processor-probe");
        let params = ProcessorParams::new(cfg, seed);
        let side = 4 * cfg.m;
        let grids: Vec<FeatureGrid> = (0..cfg.n)
            .map(|l| {
                let s = 4 * cfg.m.pow(l as u32);
                let mut g = FeatureGrid::zeros(l, 1.0, s, s, cfg.d);
                g.foreground.fill(true);
                g.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
                g
            })
            .collect();
        let mut cells: Vec<(usize, usize)> = (0..side * side).map(|i| (i % side, i / side)).collect();
        cells.shuffle(&mut rng);
        cells.truncate(patches);
        let h = cfg.h;
        let mut state = SelectionState::empty(1);
        for &(u, v) in &cells {
            state.selected.push(crate::features::PatchRef::new(1, u, v));
            state.context_states.push(Some(RecurrentState {
                h: (0..h).map(|_| rng.random_range(-0.5..0.5)).collect(),
                c: (0..h).map(|_| rng.random_range(-0.5..0.5)).collect(),
            }));
            state.context_embeddings.push(Vec::new());
            state.parents.push(None);
            state.source.push(state.source.len());
        }
        let rows = state.len();
        ProcessorProbe {
            cf: Array1::from_shape_fn(cfg.w, |_| rng.random_range(-1.0..1.0)),
            ch: random_matrix(rows, h, &mut rng),
            cc: random_matrix(rows, h, &mut rng),
            params,
            cfg: cfg.clone(),
            grids,
            state,
        }
    }

    fn with_theta(&self, theta: &[f64]) -> (ProcessorParams, SelectionState) {
        let (p, rest) = split_params(&self.params, theta);
        let mut state = self.state.clone();
        let h = self.cfg.h;
        for (i, s) in state.context_states.iter_mut().enumerate() {
            let s = s.as_mut().expect("state");
            let base = i * 2 * h;
            s.h.copy_from_slice(&rest[base..base + h]);
            s.c.copy_from_slice(&rest[base + h..base + 2 * h]);
        }
        (p, state)
    }
}

impl GradProbe for ProcessorProbe {
    fn theta(&self) -> Vec<f64> {
        let mut extra = Vec::new();
        for s in self.state.context_states.iter().flatten() {
            extra.extend_from_slice(&s.h);
            extra.extend_from_slice(&s.c);
        }
        join(&self.params, &extra)
    }

    fn loss_at(&self, theta: &[f64]) -> f64 {
        let (p, state) = self.with_theta(theta);
        let t = processor_forward(&state, &self.grids, &p, &self.cfg, &ForwardOptions::default()).expect("forward");
        let (h, c) = t.new_states.as_ref().expect("inner level steps");
        t.feature.dot(&self.cf) + (h * &self.ch).sum() + (c * &self.cc).sum()
    }

    fn grad_at(&self, theta: &[f64]) -> Vec<f64> {
        let (p, state) = self.with_theta(theta);
        let t = processor_forward(&state, &self.grids, &p, &self.cfg, &ForwardOptions::default()).expect("forward");
        let mut g = zeros_like(&p);
        let (dh, dc) = processor_backward(&p, &t, &self.cf, Some((&self.ch, &self.cc)), &mut g);
        let mut extra = Vec::new();
        for i in 0..state.len() {
            extra.extend(dh.row(i).iter());
            extra.extend(dc.row(i).iter());
        }
        join(&g, &extra)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ContextMode;
    use crate::dataset::synthetic_dataset;

    fn tiny() -> PathsConfig {
        PathsConfig {
            n: 2,
            k: 3,
            s: 8,
            d: 8,
            w: 8,
            h: 6,
            h_imp: 6,
            heads: 2,
            layers: 1,
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            ..PathsConfig::desk()
        }
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut a = Adam::new(0.1, 3);
        let mut t = vec![1.0, 1.0, 1.0];
        a.step(&mut t, &[2.0, -0.5, 0.0]);
        // bias-corrected moments are g and g², so the step is lr·g/(|g| + eps)
        assert_eq!(t[0], 1.0 - 0.1 * 2.0 / (2.0 + 1e-8));
        assert_eq!(t[1], 1.0 + 0.1 * 0.5 / (0.5 + 1e-8));
        assert_eq!(t[2], 1.0);
    }

    #[test]
    fn zero_lr_leaves_init() {
        let cfg = PathsConfig { lr: 0.0, epochs: 1, ..tiny() };
        let ds = synthetic_dataset(20, 8, &cfg, 1).unwrap();
        let (p, report) = train_model(&ds, &cfg, AblationMode::default()).unwrap();
        let mut init = ProcessorParams::new(&cfg, cfg.seed);
        init.quantize_f32();
        assert_eq!(p, init);
        assert_eq!(report.train_loss.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny();
        let ds = synthetic_dataset(20, 8, &cfg, 2).unwrap();
        let (pa, ra) = train_model(&ds, &cfg, AblationMode::default()).unwrap();
        let (pb, rb) = train_model(&ds, &cfg, AblationMode::default()).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ra.train_loss, rb.train_loss);
        assert_eq!(ra.val_c_index, rb.val_c_index);
    }

    #[test]
    fn training_ignores_random_selection() {
        let cfg = tiny();
        let ds = synthetic_dataset(20, 8, &cfg, 2).unwrap();
        let random = AblationMode::new(ContextMode::Both, SelectionMode::Random);
        let (pa, ra) = train_model(&ds, &cfg, AblationMode::default()).unwrap();
        let (pb, rb) = train_model(&ds, &cfg, random).unwrap();
        assert_eq!(ra.train_loss, rb.train_loss);
        assert_eq!(pa.flatten().len(), pb.flatten().len());
    }

    #[test]
    fn linear_probe_is_exact() {
        let e = gradient_check(&LinearProbe::random(5, 3, 4, 1), 15, 1e-5, 1).unwrap();
        assert!(e < 1e-8, "{e}");
    }

    #[test]
    fn module_probes_pass() {
        let checks: Vec<(&str, Box<dyn GradProbe>)> = vec![
            ("mlp", Box::new(MlpProbe::random(6, 5, 4, 2))),
            ("lstm", Box::new(LstmProbe::random(6, 5, 3, 3))),
            ("transformer", Box::new(TransformerProbe::random(8, 2, 5, 4))),
            ("head", Box::new(HeadProbe::random(8, 4, false, 5))),
            ("head-censored", Box::new(HeadProbe::random(8, 4, true, 6))),
        ];
        for (name, probe) in checks {
            let e = gradient_check(probe.as_ref(), 200, 1e-5, 7).unwrap();
            assert!(e < 1e-4, "{name}: {e}");
        }
    }

    #[test]
    fn processor_probe_passes() {
        let cfg = PathsConfig { n: 3, ..tiny() };
        let probe = ProcessorProbe::random(&cfg, 6, 9);
        let e = gradient_check(&probe, 300, 1e-5, 8).unwrap();
        assert!(e < 1e-4, "{e}");
    }
}
