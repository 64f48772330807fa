//! The per-level processor and the full coarse-to-fine slide pass, with a
//! backward pass through every level (including the recurrent state handed
//! from parents to children).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AblationMode, PathsConfig, PositionMode, SelectionMode};
use crate::error::{PathsError, Result};
use crate::features::FeatureGrid;
use crate::nn::{
    zeros_like, AggCache, Aggregator, ImportanceMlp, Linear, Lstm, LstmCache, MlpCache,
    Params,
};
use crate::pyramid::TissueMask;
use crate::rng::{derive_seed, rng_for};
use crate::selection::{filter_top_k, magnify, ImportanceMap, RecurrentState, SelectionState};

/// Every learnable tensor: one recurrent unit shared by all levels, a gate
/// and an aggregator per level, and the prediction head.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessorParams {
    pub rnn: Lstm,
    pub importance: Vec<ImportanceMlp>,
    pub aggregators: Vec<Aggregator>,
    pub head: Linear,
}

impl ProcessorParams {
    pub fn new(cfg: &PathsConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, "param-init");
        let rnn = Lstm::new(cfg.d, cfg.h, &mut rng);
        let importance = (0..cfg.n).map(|_| ImportanceMlp::new(cfg.d, cfg.h_imp, &mut rng)).collect();
        let aggregators = (0..cfg.n)
            .map(|_| Aggregator::new(cfg.d, cfg.w, cfg.heads, cfg.layers, &mut rng))
            .collect();
        let head = Linear::new(cfg.w, cfg.b, &mut rng);
        ProcessorParams {
            rnn,
            importance,
            aggregators,
            head,
        }
    }

    pub fn levels(&self) -> usize {
        self.aggregators.len()
    }

    /// Rounds every value to the nearest `f32`, so checkpoints reload exactly.
    pub fn quantize_f32(&mut self) {
        self.visit_mut(&mut |_, t| t.iter_mut().for_each(|x| *x = f64::from(*x as f32)));
    }

    /// Fully-qualified tensor names with their lengths, in visiting order.
    pub fn manifest(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t.len())));
        out
    }
}

impl Params for ProcessorParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.rnn.visit(&mut |n, t| f(&format!("rnn.{n}"), t));
        for (i, m) in self.importance.iter().enumerate() {
            m.visit(&mut |n, t| f(&format!("importance.{i}.{n}"), t));
        }
        for (i, a) in self.aggregators.iter().enumerate() {
            a.visit(&mut |n, t| f(&format!("aggregator.{i}.{n}"), t));
        }
        self.head.visit(&mut |n, t| f(&format!("head.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.rnn.visit_mut(&mut |n, t| f(&format!("rnn.{n}"), t));
        for (i, m) in self.importance.iter_mut().enumerate() {
            m.visit_mut(&mut |n, t| f(&format!("importance.{i}.{n}"), t));
        }
        for (i, a) in self.aggregators.iter_mut().enumerate() {
            a.visit_mut(&mut |n, t| f(&format!("aggregator.{i}.{n}"), t));
        }
        self.head.visit_mut(&mut |n, t| f(&format!("head.{n}"), t));
    }
}

/// Per-level aggregated features `[F¹, …, Fⁿ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideContext {
    pub features: Vec<Array1<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardPrediction {
    pub logits: Vec<f64>,
    pub hazards: Vec<f64>,
}

impl HazardPrediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let hazards = logits.iter().map(|&l| crate::nn::sigmoid(l)).collect();
        HazardPrediction { logits, hazards }
    }

    pub fn risk(&self) -> f64 {
        crate::survival::risk_from_logits(&self.logits)
    }
}

/// Switches derived from an ablation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Add the recurrent ancestor offset to each embedding.
    pub hierarchical_context: bool,
    /// Feed `Σ Fⁱ` to the head; otherwise only the finest `Fⁿ`.
    pub slide_context: bool,
    /// Replace the importance gate with i.i.d. `U[0,1]` draws from this seed.
    pub random_importance: Option<u64>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            hierarchical_context: true,
            slide_context: true,
            random_importance: None,
        }
    }
}

/// Forward switches for an ablation cell. `random_seed` seeds the uniform
/// importance draws when the mode asks for random selection.
pub fn apply_ablation(base: ForwardOptions, mode: AblationMode, random_seed: u64) -> ForwardOptions {
    ForwardOptions {
        hierarchical_context: base.hierarchical_context && mode.context.hierarchical(),
        slide_context: base.slide_context && mode.context.slide_level(),
        random_importance: match mode.selection {
            SelectionMode::Learned => base.random_importance,
            SelectionMode::Random => Some(random_seed),
        },
    }
}

/// One recurrent step for a single patch. The offset summarises the
/// ancestors only: it is `project · prev.h`, and zero when there is no
/// previous state. The returned state (ancestors plus this patch) is what
/// children inherit.
pub fn contextualise(
    rnn: &Lstm,
    embedding: &[f64],
    prev_state: Option<&RecurrentState>,
) -> Result<(Vec<f64>, RecurrentState)> {
    if embedding.iter().any(|x| !x.is_finite()) {
        return Err(PathsError::Numeric("non-finite embedding".into()));
    }
    let h = rnn.hidden_dim();
    let (hp, cp) = match prev_state {
        Some(s) => {
            if s.h.iter().chain(&s.c).any(|x| !x.is_finite()) {
                return Err(PathsError::Numeric("non-finite recurrent state".into()));
            }
            (
                Array2::from_shape_vec((1, h), s.h.clone()).map_err(|e| PathsError::Shape(e.to_string()))?,
                Array2::from_shape_vec((1, h), s.c.clone()).map_err(|e| PathsError::Shape(e.to_string()))?,
            )
        }
        None => (Array2::zeros((1, h)), Array2::zeros((1, h))),
    };
    let x = Array2::from_shape_vec((1, embedding.len()), embedding.to_vec())
        .map_err(|e| PathsError::Shape(e.to_string()))?;
    if x.ncols() != rnn.input_dim() {
        return Err(PathsError::Shape(format!(
            "embedding width {} != recurrent input {}",
            x.ncols(),
            rnn.input_dim()
        )));
    }
    let mut y = x.clone();
    if prev_state.is_some() {
        y += &rnn.offset(&hp);
    }
    let (hn, cn, _) = rnn.step(&x, &hp, &cp);
    Ok((
        y.row(0).to_vec(),
        RecurrentState {
            h: hn.row(0).to_vec(),
            c: cn.row(0).to_vec(),
        },
    ))
}

/// Gate values for a set of contextualised features, one per row.
pub fn importance_scores(y: &Array2<f64>, mlp: &ImportanceMlp) -> Array1<f64> {
    mlp.forward(y).0
}

/// `Z_p = α_p · Y_p` for every patch; `alpha` must cover every coordinate.
pub fn scale_by_importance(
    y: &Array2<f64>,
    coords: &[(usize, usize)],
    alpha: &ImportanceMap,
) -> Result<Array2<f64>> {
    let mut z = y.clone();
    for (mut row, &(u, v)) in z.rows_mut().into_iter().zip(coords) {
        let a = alpha
            .get(u, v)
            .ok_or_else(|| PathsError::Coverage(format!("no importance for ({u}, {v})")))?;
        row *= a;
    }
    Ok(z)
}

/// Aggregates position-tagged features into one `w`-vector.
pub fn global_aggregate(z: &Array2<f64>, positions: &[(f64, f64)], agg: &Aggregator) -> Result<Array1<f64>> {
    agg.forward(z, positions).map(|(f, _)| f)
}

/// Head applied to the summed slide context (or to `Fⁿ` alone when slide
/// context is disabled).
pub fn predict_head(ctx: &SlideContext, params: &ProcessorParams, slide_context: bool) -> Result<Vec<f64>> {
    if ctx.features.len() != params.levels() {
        return Err(PathsError::State(format!(
            "slide context has {} of {} levels",
            ctx.features.len(),
            params.levels()
        )));
    }
    let pooled = pooled_context(ctx, slide_context);
    Ok(params.head.forward_vec(&pooled).to_vec())
}

fn pooled_context(ctx: &SlideContext, slide_context: bool) -> Array1<f64> {
    if slide_context {
        ctx.features.iter().fold(Array1::zeros(ctx.features[0].len()), |acc, f| acc + f)
    } else {
        ctx.features.last().expect("nonempty").clone()
    }
}

fn positions_for(state: &SelectionState, cfg: &PathsConfig) -> Vec<(f64, f64)> {
    let scale = match cfg.position_mode {
        PositionMode::PerLevel => 1.0,
        PositionMode::SlideAbsolute => (cfg.m as f64).powi((cfg.n - 1 - state.level_index) as i32),
    };
    state
        .selected
        .iter()
        .map(|r| (r.u as f64 * scale, r.v as f64 * scale))
        .collect()
}

fn gather_embeddings(state: &SelectionState, grid: &FeatureGrid) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((state.len(), grid.d));
    for (mut row, r) in out.rows_mut().into_iter().zip(&state.selected) {
        if r.u >= grid.grid_w || r.v >= grid.grid_h {
            return Err(PathsError::Bounds(format!(
                "patch ({}, {}) outside level {} grid",
                r.u, r.v, r.level
            )));
        }
        for (dst, &src) in row.iter_mut().zip(grid.embedding(r.u, r.v)) {
            *dst = f64::from(src);
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(PathsError::Numeric(format!("non-finite feature at level {}", state.level_index)));
    }
    Ok(out)
}

fn inherited_states(state: &SelectionState, h: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = state.len();
    let mut hp = Array2::zeros((n, h));
    let mut cp = Array2::zeros((n, h));
    for (i, s) in state.context_states.iter().enumerate() {
        if let Some(s) = s {
            if s.h.len() != h || s.c.len() != h {
                return Err(PathsError::Shape("recurrent state width mismatch".into()));
            }
            hp.row_mut(i).assign(&Array1::from(s.h.clone()));
            cp.row_mut(i).assign(&Array1::from(s.c.clone()));
        }
    }
    Ok((hp, cp))
}

/// Everything one processor computed for one level.
#[derive(Clone, Debug)]
pub struct LevelTrace {
    /// The selection as it entered the processor.
    pub state: SelectionState,
    /// Patch-grid size `(width, height)` of this level.
    pub grid: (usize, usize),
    /// Importance per selected patch, aligned with `state.selected`.
    pub alpha: Vec<f64>,
    pub feature: Array1<f64>,
    pub embeddings: Array2<f64>,
    pub contextualised: Array2<f64>,
    /// Post-step recurrent state per patch, when one was computed.
    pub new_states: Option<(Array2<f64>, Array2<f64>)>,
    h_prev: Array2<f64>,
    offset_used: bool,
    lstm: Option<LstmCache>,
    mlp: Option<MlpCache>,
    agg: AggCache,
}

impl LevelTrace {
    pub fn importance_map(&self) -> ImportanceMap {
        ImportanceMap::from_aligned(&self.state, &self.alpha)
    }
}

/// Runs one level: contextualise → gate → scale → aggregate.
pub fn processor_forward(
    state: &SelectionState,
    grids: &[FeatureGrid],
    params: &ProcessorParams,
    cfg: &PathsConfig,
    opts: &ForwardOptions,
) -> Result<LevelTrace> {
    let level = state.level_index;
    let grid = grids
        .get(level)
        .ok_or_else(|| PathsError::Dependency(format!("feature grid for level {level} missing")))?;
    if grid.d != params.rnn.input_dim() {
        return Err(PathsError::Shape(format!(
            "features have d={} but the model expects {}",
            grid.d,
            params.rnn.input_dim()
        )));
    }
    let emb = gather_embeddings(state, grid)?;
    processor_on_embeddings(state, emb, (grid.grid_w, grid.grid_h), params, cfg, opts)
}

/// The processor given the embeddings of the selected patches, row-aligned
/// with `state.selected`.
pub fn processor_on_embeddings(
    state: &SelectionState,
    emb: Array2<f64>,
    grid: (usize, usize),
    params: &ProcessorParams,
    cfg: &PathsConfig,
    opts: &ForwardOptions,
) -> Result<LevelTrace> {
    let level = state.level_index;
    if level >= params.levels() {
        return Err(PathsError::Dependency(format!("no processor for level {level}")));
    }
    let n = state.len();
    if emb.nrows() != n || emb.ncols() != params.rnn.input_dim() {
        return Err(PathsError::Shape(format!(
            "embeddings are {:?}, expected ({n}, {})",
            emb.dim(),
            params.rnn.input_dim()
        )));
    }
    let hd = params.rnn.hidden_dim();
    let (h_prev, c_prev) = inherited_states(state, hd)?;

    let offset_used = opts.hierarchical_context && level > 0 && n > 0;
    let y = if offset_used { &emb + &params.rnn.offset(&h_prev) } else { emb.clone() };

    let last = level + 1 >= params.levels();
    let (new_states, lstm) = if opts.hierarchical_context && !last && n > 0 {
        let (h, c, cache) = params.rnn.step(&emb, &h_prev, &c_prev);
        (Some((h, c)), Some(cache))
    } else {
        (None, None)
    };

    let (alpha, mlp) = match opts.random_importance {
        Some(seed) => {
            let mut rng = rng_for(seed, &format!("random-importance-{level}"));
            ((0..n).map(|_| rng.random_range(0.0..=1.0)).collect::<Vec<f64>>(), None)
        }
        None if n > 0 => {
            let (a, cache) = params.importance[level].forward(&y);
            (a.to_vec(), Some(cache))
        }
        None => (Vec::new(), None),
    };

    let mut z = y.clone();
    for (mut row, &a) in z.rows_mut().into_iter().zip(&alpha) {
        row *= a;
    }
    let positions = positions_for(state, cfg);
    let (feature, agg) = params.aggregators[level].forward(&z, &positions)?;
    if feature.iter().any(|x| !x.is_finite()) {
        return Err(PathsError::Numeric(format!("non-finite aggregate at level {level}")));
    }
    Ok(LevelTrace {
        state: state.clone(),
        grid,
        alpha,
        feature,
        embeddings: emb,
        contextualised: y,
        new_states,
        h_prev,
        offset_used,
        lstm,
        mlp,
        agg,
    })
}

/// Result of a full slide pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub prediction: HazardPrediction,
    pub levels: Vec<LevelTrace>,
    pub context: SlideContext,
    slide_context: bool,
}

impl ForwardOutput {
    pub fn selections(&self) -> Vec<&SelectionState> {
        self.levels.iter().map(|l| &l.state).collect()
    }

    pub fn importances(&self) -> Vec<ImportanceMap> {
        self.levels.iter().map(LevelTrace::importance_map).collect()
    }

    /// Patches processed per level.
    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.state.len()).collect()
    }
}

/// Hands each patch's post-step state and own embedding down to its
/// children-to-be.
fn advance(trace: &LevelTrace) -> SelectionState {
    let n = trace.state.len();
    let states = match &trace.new_states {
        Some((h, c)) => (0..n)
            .map(|i| {
                Some(RecurrentState {
                    h: h.row(i).to_vec(),
                    c: c.row(i).to_vec(),
                })
            })
            .collect(),
        None => vec![None; n],
    };
    let own = trace
        .embeddings
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&x| x as f32).collect())
        .collect();
    trace.state.advance(states, own)
}

/// The whole slide, coarse to fine: level 0 sees every foreground patch,
/// each later level sees the tissue children of the previous level's top-K.
pub fn paths_forward(
    grids: &[FeatureGrid],
    params: &ProcessorParams,
    cfg: &PathsConfig,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    let n = params.levels();
    if grids.len() < n {
        return Err(PathsError::Dependency(format!("{} feature grids for {n} levels", grids.len())));
    }
    for g in &grids[..n] {
        if g.d != params.rnn.input_dim() {
            return Err(PathsError::Shape(format!(
                "features have d={} but the model expects {}",
                g.d,
                params.rnn.input_dim()
            )));
        }
    }
    let masks: Vec<TissueMask> = grids[..n].iter().map(FeatureGrid::mask).collect();
    paths_forward_with(&masks, params, cfg, opts, &mut |state| {
        gather_embeddings(state, &grids[state.level_index])
    })
}

/// The slide pass with embeddings supplied on demand: `fetch` is called
/// once per level with the patches about to be processed and returns their
/// embeddings row by row. Only selected patches are ever requested.
pub fn paths_forward_with(
    masks: &[TissueMask],
    params: &ProcessorParams,
    cfg: &PathsConfig,
    opts: &ForwardOptions,
    fetch: &mut dyn FnMut(&SelectionState) -> Result<Array2<f64>>,
) -> Result<ForwardOutput> {
    let n = params.levels();
    if masks.len() < n {
        return Err(PathsError::Dependency(format!("{} tissue masks for {n} levels", masks.len())));
    }
    let mut state = SelectionState::initial(&masks[0]);
    if state.is_empty() {
        return Err(PathsError::EmptySlide);
    }
    let mut levels = Vec::with_capacity(n);
    for level in 0..n {
        let emb = fetch(&state)?;
        let dims = (masks[level].grid_w, masks[level].grid_h);
        let trace = processor_on_embeddings(&state, emb, dims, params, cfg, opts)?;
        if level + 1 < n {
            let advanced = advance(&trace);
            let kept = filter_top_k(&advanced, &trace.importance_map(), cfg.k)?;
            state = magnify(&kept, masks, cfg.m)?;
        }
        levels.push(trace);
    }
    let context = SlideContext {
        features: levels.iter().map(|l| l.feature.clone()).collect(),
    };
    let logits = predict_head(&context, params, opts.slide_context)?;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(PathsError::Numeric("non-finite logits".into()));
    }
    Ok(ForwardOutput {
        prediction: HazardPrediction::from_logits(logits),
        levels,
        context,
        slide_context: opts.slide_context,
    })
}

/// Backward through one processor. `df` is the gradient w.r.t. `Fⁱ` and
/// `dstate` the gradient w.r.t. the post-step `(h, c)` handed to children.
/// Accumulates into `grad` and returns the gradient w.r.t. the inherited
/// `(h_prev, c_prev)` of every patch.
pub fn processor_backward(
    params: &ProcessorParams,
    trace: &LevelTrace,
    df: &Array1<f64>,
    dstate: Option<(&Array2<f64>, &Array2<f64>)>,
    grad: &mut ProcessorParams,
) -> (Array2<f64>, Array2<f64>) {
    let level = trace.state.level_index;
    let count = trace.state.len();
    let hd = params.rnn.hidden_dim();
    let dz = params.aggregators[level].backward(&trace.agg, df, &mut grad.aggregators[level]);
    let mut dh_prev = Array2::zeros((count, hd));
    let mut dc_prev = Array2::zeros((count, hd));
    if count == 0 {
        return (dh_prev, dc_prev);
    }
    let mut dy = dz.clone();
    for (mut row, &a) in dy.rows_mut().into_iter().zip(&trace.alpha) {
        row *= a;
    }
    if let Some(cache) = &trace.mlp {
        let dalpha = Array1::from_shape_fn(count, |i| dz.row(i).dot(&trace.contextualised.row(i)));
        dy += &params.importance[level].backward(cache, &dalpha, &mut grad.importance[level]);
    }
    if let (Some(cache), Some((dh, dc))) = (&trace.lstm, dstate) {
        let (_, dhp, dcp) = params.rnn.step_backward(cache, dh, dc, &mut grad.rnn);
        dh_prev += &dhp;
        dc_prev += &dcp;
    }
    if trace.offset_used {
        dh_prev += &params.rnn.offset_backward(&trace.h_prev, &dy, &mut grad.rnn);
    }
    (dh_prev, dc_prev)
}

/// Gradient of a scalar loss w.r.t. every parameter, given `dL/dlogits`.
/// Selection is treated as fixed; gradients reach the gates through the
/// scaling `Z = αY` and reach ancestors through the recurrent state.
pub fn paths_backward(params: &ProcessorParams, out: &ForwardOutput, dlogits: &[f64]) -> ProcessorParams {
    let mut grad = zeros_like(params);
    let pooled = pooled_context(&out.context, out.slide_context);
    let dpooled = params
        .head
        .backward_vec(&pooled, &Array1::from(dlogits.to_vec()), &mut grad.head);
    let n = out.levels.len();
    let hd = params.rnn.hidden_dim();
    // gradients w.r.t. each level's post-step (h, c), filled by the children
    let mut state_grads: Vec<(Array2<f64>, Array2<f64>)> = out
        .levels
        .iter()
        .map(|l| (Array2::zeros((l.state.len(), hd)), Array2::zeros((l.state.len(), hd))))
        .collect();
    let zero = Array1::zeros(dpooled.len());
    for level in (0..n).rev() {
        let trace = &out.levels[level];
        let df = if out.slide_context || level == n - 1 { &dpooled } else { &zero };
        let (dh_prev, dc_prev) = {
            let (dh, dc) = &state_grads[level];
            processor_backward(params, trace, df, Some((dh, dc)), &mut grad)
        };
        if level > 0 {
            let (ph, pc) = &mut state_grads[level - 1];
            for (i, parent) in trace.state.parents.iter().enumerate() {
                if let Some(p) = parent {
                    let mut r = ph.row_mut(*p);
                    r += &dh_prev.row(i);
                    let mut r = pc.row_mut(*p);
                    r += &dc_prev.row(i);
                }
            }
        }
    }
    grad
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    dtype: String,
    config: PathsConfig,
    tensors: Vec<(String, usize)>,
}

const CHECKPOINT_FORMAT: &str = "paths-checkpoint-v1";

/// One JSON manifest line, a newline, then every tensor as little-endian
/// `f32` in manifest order.
pub fn checkpoint_bytes(params: &ProcessorParams, cfg: &PathsConfig) -> Vec<u8> {
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype: "f32".into(),
        config: cfg.clone(),
        tensors: params.manifest(),
    };
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    params.visit(&mut |_, t| {
        for &x in t {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    });
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ProcessorParams, PathsConfig)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| PathsError::format(bytes.len() as u64, "missing manifest newline"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| PathsError::format(e.column() as u64, format!("bad manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f32" {
        return Err(PathsError::format(0, "unrecognised checkpoint format"));
    }
    manifest.config.validate()?;
    let mut params = ProcessorParams::new(&manifest.config, 0);
    if params.manifest() != manifest.tensors {
        return Err(PathsError::format(0, "tensor manifest does not match config"));
    }
    let total: usize = manifest.tensors.iter().map(|t| t.1).sum();
    let payload = &bytes[nl + 1..];
    if payload.len() != total * 4 {
        return Err(PathsError::format(
            (nl + 1 + payload.len().min(total * 4)) as u64,
            format!("payload is {} bytes, manifest implies {}", payload.len(), total * 4),
        ));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    params.unflatten(&flat);
    Ok((params, manifest.config))
}

pub fn save_checkpoint(path: &Path, params: &ProcessorParams, cfg: &PathsConfig) -> Result<()> {
    fs::write(path, checkpoint_bytes(params, cfg)).map_err(|e| PathsError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ProcessorParams, PathsConfig)> {
    let bytes = fs::read(path).map_err(|e| PathsError::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Seed for the random-importance ablation on a given slide.
pub fn random_importance_seed(cfg_seed: u64, slide_id: &str) -> u64 {
    derive_seed(cfg_seed, &format!("random-selection/{slide_id}"))
}
