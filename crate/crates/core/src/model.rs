//! Decoder-only transformer with residual-stream hooks.
//!
//! Pre-norm blocks (RMS normalization), causal multi-head attention, a GELU
//! MLP, learned positional embeddings and a tied unembedding. Everything is
//! `f64`. Gradients are computed by a hand-written reverse pass so that every
//! training objective can be checked against finite differences.
//!
//! Hook convention: layer `ℓ` (1-based) is the residual stream *after* block
//! `ℓ`, after any steering injection for that layer.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::steering::SteeringPlan;

pub type TokenId = u32;

const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The 12-layer reference shape used throughout the experiments.
    pub fn reference(vocab_size: usize, seed: u64) -> Self {
        Self { vocab_size, n_layers: 12, d_model: 64, n_heads: 4, d_ff: 256, max_seq_len: 64, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.max_seq_len < 2 {
            return Err(Error::InvalidConfig("max_seq_len must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig("d_model not divisible by n_heads".into()));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::InvalidConfig("vocab_size exceeds token id range".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Maps a layer index of a deeper reference network onto this one by
    /// fractional depth: `round(layer / reference_depth * n_layers)`.
    pub fn rescale_layer(&self, layer: usize, reference_depth: usize) -> usize {
        let scaled = (layer as f64 / reference_depth as f64 * self.n_layers as f64).round() as usize;
        scaled.clamp(1, self.n_layers)
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.n_layers {
            return Err(Error::LayerOutOfRange { layer, n_layers: self.n_layers });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape as a matrix; vectors are treated as a single row.
    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("tensors are rank 1 or 2"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockIds {
    ln1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2: usize,
    w_in: usize,
    w_out: usize,
}

/// Named tensor table over one flat buffer. Shapes are a pure function of
/// the config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    tok_embed: usize,
    pos_embed: usize,
    blocks: Vec<BlockIds>,
    final_norm: usize,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec { name, shape, offset };
            offset += spec.len();
            specs.push(spec);
            specs.len() - 1
        };
        let d = cfg.d_model;
        let tok_embed = push("tok_embed".into(), vec![cfg.vocab_size, d]);
        let pos_embed = push("pos_embed".into(), vec![cfg.max_seq_len, d]);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |t: &str| format!("blocks.{l}.{t}");
            blocks.push(BlockIds {
                ln1: push(p("ln1.gain"), vec![d]),
                wq: push(p("attn.wq"), vec![d, d]),
                wk: push(p("attn.wk"), vec![d, d]),
                wv: push(p("attn.wv"), vec![d, d]),
                wo: push(p("attn.wo"), vec![d, d]),
                ln2: push(p("ln2.gain"), vec![d]),
                w_in: push(p("mlp.w_in"), vec![d, cfg.d_ff]),
                w_out: push(p("mlp.w_out"), vec![cfg.d_ff, d]),
            });
        }
        let final_norm = push("final_norm.gain".into(), vec![d]);
        Self { specs, tok_embed, pos_embed, blocks, final_norm, total: offset }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    fn range(&self, id: usize) -> std::ops::Range<usize> {
        let s = &self.specs[id];
        s.offset..s.offset + s.len()
    }

    fn view<'a>(&self, data: &'a [f64], id: usize) -> ArrayView2<'a, f64> {
        let dims = self.specs[id].dims2();
        ArrayView2::from_shape(dims, &data[self.range(id)]).expect("layout shape")
    }

    fn view_mut<'a>(&self, data: &'a mut [f64], id: usize) -> ArrayViewMut2<'a, f64> {
        let dims = self.specs[id].dims2();
        let r = self.range(id);
        ArrayViewMut2::from_shape(dims, &mut data[r]).expect("layout shape")
    }

    fn is_norm_gain(&self, id: usize) -> bool {
        id == self.final_norm || self.blocks.iter().any(|b| b.ln1 == id || b.ln2 == id)
    }
}

/// Full weight set of the transformer plus the number of optimizer steps
/// applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    layout: Layout,
    data: Vec<f64>,
    revision: u64,
}

impl Parameters {
    /// All-zero weights (including norm gains).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let data = vec![0.0; layout.total_len()];
        Ok(Self { config, layout, data, revision: 0 })
    }

    /// Builds parameters from a raw buffer laid out per `Layout::new(config)`.
    pub fn from_raw(config: ModelConfig, data: Vec<f64>, revision: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total_len() {
            return Err(Error::ShapeMismatch(format!("payload holds {} values, layout needs {}", data.len(), layout.total_len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter index {i}")));
        }
        Ok(Self { config, layout, data, revision })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for tests and hand-built toy models. Does not touch
    /// the revision counter.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let spec = self.layout.find(name)?;
        Some(&self.data[spec.offset..spec.offset + spec.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let spec = self.layout.find(name)?.clone();
        Some(&mut self.data[spec.offset..spec.offset + spec.len()])
    }

    fn w(&self, id: usize) -> ArrayView2<'_, f64> {
        self.layout.view(&self.data, id)
    }

    fn row(&self, id: usize) -> &[f64] {
        &self.data[self.layout.range(id)]
    }
}

/// Seeded initialization: N(0, 0.02²) per tensor from a stream keyed by the
/// tensor name, norm gains 1.
pub fn init_model(config: &ModelConfig) -> Result<Parameters> {
    let mut params = Parameters::zeros(*config)?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let layout = params.layout.clone();
    for (id, spec) in layout.specs.iter().enumerate() {
        let slot = &mut params.data[spec.offset..spec.offset + spec.len()];
        if layout.is_norm_gain(id) {
            slot.fill(1.0);
        } else {
            let mut rng = rng_for(config.seed, &format!("init/{}", spec.name));
            for v in slot.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    }
    Ok(params)
}

/// Flat gradient buffer congruent with a `Parameters` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    layout: Layout,
    data: Vec<f64>,
    pub loss: f64,
}

impl GradientSet {
    pub fn zeros_like(params: &Parameters) -> Self {
        Self { layout: params.layout.clone(), data: vec![0.0; params.data.len()], loss: 0.0 }
    }

    pub fn from_raw(params: &Parameters, data: Vec<f64>, loss: f64) -> Result<Self> {
        if data.len() != params.data.len() {
            return Err(Error::ShapeMismatch(format!("gradient holds {} values, parameters hold {}", data.len(), params.data.len())));
        }
        Ok(Self { layout: params.layout.clone(), data, loss })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::ShapeMismatch("gradient layouts differ".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.data.iter().all(|v| v.is_finite())
    }
}

/// `w ← w − lr·g` over every tensor; bumps the revision.
pub fn apply_sgd_step(params: &Parameters, grads: &GradientSet, lr: f64) -> Result<Parameters> {
    if params.layout != grads.layout {
        return Err(Error::ShapeMismatch("gradient layout does not match parameters".into()));
    }
    if let Some(i) = grads.data.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient index {i}")));
    }
    if !lr.is_finite() {
        return Err(Error::NonFinite("learning rate".into()));
    }
    let mut next = params.clone();
    for (w, g) in next.data.iter_mut().zip(&grads.data) {
        *w -= lr * g;
    }
    if let Some(i) = next.data.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("parameter index {i} after update")));
    }
    next.revision += 1;
    Ok(next)
}

/// Residual stream after every block for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub tokens: Vec<TokenId>,
    /// `layers[ℓ-1]` is the `[seq_len × d_model]` residual after block `ℓ`.
    layers: Vec<Array2<f64>>,
    /// Steering delta added after block `ℓ`, if any.
    injections: Vec<Option<Vec<f64>>>,
}

impl ActivationTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Residual after block `layer` (1-based).
    pub fn layer(&self, layer: usize) -> Result<&Array2<f64>> {
        self.layers.get(layer.wrapping_sub(1)).ok_or(Error::LayerOutOfRange { layer, n_layers: self.layers.len() })
    }

    /// Steering delta injected after block `layer`, if a plan touched it.
    pub fn injection(&self, layer: usize) -> Option<&[f64]> {
        self.injections.get(layer.wrapping_sub(1)).and_then(|v| v.as_deref())
    }

    /// Activation of the final position at `layer`.
    pub fn last_token(&self, layer: usize) -> Result<Vec<f64>> {
        let m = self.layer(layer)?;
        Ok(m.row(m.nrows() - 1).to_vec())
    }

    /// Mean over positions at `layer`.
    pub fn mean_pooled(&self, layer: usize) -> Result<Vec<f64>> {
        let m = self.layer(layer)?;
        Ok(m.mean_axis(Axis(0)).expect("non-empty trace").to_vec())
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise RMS normalization. Returns (output, unit-scaled rows, 1/rms).
fn rms_norm(x: &Array2<f64>, gain: &[f64]) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut u = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in u.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let ir = 1.0 / (ms + NORM_EPS).sqrt();
        row.mapv_inplace(|v| v * ir);
        inv.push(ir);
    }
    let mut y = u.clone();
    for mut row in y.rows_mut() {
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= g;
        }
    }
    (y, u, inv)
}

/// Reverse of `rms_norm`: accumulates into `dgain`, returns dx.
fn rms_norm_backward(dy: &Array2<f64>, u: &Array2<f64>, inv: &[f64], gain: &[f64], dgain: &mut [f64]) -> Array2<f64> {
    let d = u.ncols();
    let mut dx = Array2::zeros(u.raw_dim());
    for t in 0..u.nrows() {
        let mut du = vec![0.0; d];
        let mut dot = 0.0;
        for i in 0..d {
            dgain[i] += dy[[t, i]] * u[[t, i]];
            du[i] = dy[[t, i]] * gain[i];
            dot += du[i] * u[[t, i]];
        }
        let mean = dot / d as f64;
        for i in 0..d {
            dx[[t, i]] = (du[i] - u[[t, i]] * mean) * inv[t];
        }
    }
    dx
}

struct BlockCache {
    u1: Array2<f64>,
    inv1: Vec<f64>,
    n1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities per head, row-major `[t][j]`.
    probs: Vec<Array2<f64>>,
    heads: Array2<f64>,
    u2: Array2<f64>,
    inv2: Vec<f64>,
    n2: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

/// Intermediates retained for the reverse pass.
pub(crate) struct ForwardCache {
    tokens: Vec<TokenId>,
    blocks: Vec<BlockCache>,
    uf: Array2<f64>,
    invf: Vec<f64>,
    nf: Array2<f64>,
}

pub(crate) struct ForwardOutput {
    pub logits: Array2<f64>,
    pub trace: ActivationTrace,
    pub cache: ForwardCache,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() || tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceLength { len: tokens.len(), max: cfg.max_seq_len });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
    }
    Ok(())
}

/// Final norm and tied unembedding applied to a residual stream.
pub fn head_logits(params: &Parameters, resid: &Array2<f64>) -> Array2<f64> {
    let (nf, _, _) = rms_norm(resid, params.row(params.layout.final_norm));
    nf.dot(&params.w(params.layout.tok_embed).t())
}

fn causal_attention(cfg: &ModelConfig, q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
    let t_len = q.nrows();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((t_len, cfg.d_model));
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Array2::zeros((t_len, t_len));
        for t in 0..t_len {
            let mut max = f64::NEG_INFINITY;
            for j in 0..=t {
                let mut sdot = 0.0;
                for c in cols.clone() {
                    sdot += q[[t, c]] * k[[j, c]];
                }
                let sc = sdot * scale;
                p[[t, j]] = sc;
                max = max.max(sc);
            }
            let mut z = 0.0;
            for j in 0..=t {
                let e = (p[[t, j]] - max).exp();
                p[[t, j]] = e;
                z += e;
            }
            for j in 0..=t {
                p[[t, j]] /= z;
            }
            for c in cols.clone() {
                let mut acc = 0.0;
                for j in 0..=t {
                    acc += p[[t, j]] * v[[j, c]];
                }
                out[[t, c]] = acc;
            }
        }
        probs.push(p);
    }
    (out, probs)
}

pub(crate) fn forward_cached(params: &Parameters, tokens: &[TokenId], plan: Option<&SteeringPlan>) -> Result<ForwardOutput> {
    let cfg = &params.config;
    check_tokens(cfg, tokens)?;
    let injections = match plan {
        Some(p) => p.layer_deltas(cfg)?,
        None => vec![None; cfg.n_layers],
    };
    let lay = &params.layout;
    let d = cfg.d_model;
    let t_len = tokens.len();
    let emb = params.w(lay.tok_embed);
    let pos = params.w(lay.pos_embed);
    let mut x = Array2::zeros((t_len, d));
    for (t, &tok) in tokens.iter().enumerate() {
        let row = &emb.row(tok as usize) + &pos.row(t);
        x.row_mut(t).assign(&row);
    }

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, ids) in lay.blocks.iter().enumerate() {
        let (n1, u1, inv1) = rms_norm(&x, params.row(ids.ln1));
        let q = n1.dot(&params.w(ids.wq));
        let k = n1.dot(&params.w(ids.wk));
        let v = n1.dot(&params.w(ids.wv));
        let (heads, probs) = causal_attention(cfg, &q, &k, &v);
        let x_mid = &x + &heads.dot(&params.w(ids.wo));
        let (n2, u2, inv2) = rms_norm(&x_mid, params.row(ids.ln2));
        let pre = n2.dot(&params.w(ids.w_in));
        let act = pre.mapv(gelu);
        let mut x_out = &x_mid + &act.dot(&params.w(ids.w_out));
        if let Some(delta) = &injections[l] {
            for mut row in x_out.rows_mut() {
                for (r, dv) in row.iter_mut().zip(delta) {
                    *r += dv;
                }
            }
        }
        blocks.push(BlockCache { u1, inv1, n1, q, k, v, probs, heads, u2, inv2, n2, pre, act });
        layers.push(x_out.clone());
        x = x_out;
    }
    let (nf, uf, invf) = rms_norm(&x, params.row(lay.final_norm));
    let logits = nf.dot(&emb.t());
    let trace = ActivationTrace { tokens: tokens.to_vec(), layers, injections };
    let cache = ForwardCache { tokens: tokens.to_vec(), blocks, uf, invf, nf };
    Ok(ForwardOutput { logits, trace, cache })
}

/// Runs the network on one token sequence, optionally with a steering plan
/// injected after the planned blocks at every position.
pub fn forward_with_trace(params: &Parameters, tokens: &[TokenId], plan: Option<&SteeringPlan>) -> Result<(Array2<f64>, ActivationTrace)> {
    let out = forward_cached(params, tokens, plan)?;
    if out.logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok((out.logits, out.trace))
}

/// Reverse pass. `dlogits` is the loss gradient w.r.t. the logits;
/// `resid_grads` adds gradients w.r.t. residual layers (1-based). Results
/// are accumulated into `grads`.
pub(crate) fn backward(
    params: &Parameters,
    cache: &ForwardCache,
    dlogits: Option<&Array2<f64>>,
    resid_grads: &[(usize, Array2<f64>)],
    grads: &mut GradientSet,
) {
    let cfg = &params.config;
    let lay = &params.layout;
    let t_len = cache.tokens.len();
    let d = cfg.d_model;
    let g = &mut grads.data;

    let mut dx = Array2::<f64>::zeros((t_len, d));
    if let Some(dl) = dlogits {
        let emb = params.w(lay.tok_embed);
        let dnf = dl.dot(&emb);
        {
            let mut demb = lay.view_mut(g, lay.tok_embed);
            demb += &dl.t().dot(&cache.nf);
        }
        let r = lay.range(lay.final_norm);
        dx = rms_norm_backward(&dnf, &cache.uf, &cache.invf, params.row(lay.final_norm), &mut g[r]);
    }
    // Blocks above the deepest injected gradient contribute nothing when
    // there is no logit gradient.
    let top = if dlogits.is_some() { cfg.n_layers } else { resid_grads.iter().map(|(l, _)| *l).max().unwrap_or(0) };

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in (0..top).rev() {
        for (layer, rg) in resid_grads {
            if *layer == l + 1 {
                dx += rg;
            }
        }
        let ids = lay.blocks[l];
        let c = &cache.blocks[l];

        // MLP
        {
            let mut dw = lay.view_mut(g, ids.w_out);
            dw += &c.act.t().dot(&dx);
        }
        let dact = dx.dot(&params.w(ids.w_out).t());
        let dpre = &dact * &c.pre.mapv(gelu_grad);
        {
            let mut dw = lay.view_mut(g, ids.w_in);
            dw += &c.n2.t().dot(&dpre);
        }
        let dn2 = dpre.dot(&params.w(ids.w_in).t());
        let r = lay.range(ids.ln2);
        let mut dmid = rms_norm_backward(&dn2, &c.u2, &c.inv2, params.row(ids.ln2), &mut g[r]);
        dmid += &dx;

        // Attention
        {
            let mut dw = lay.view_mut(g, ids.wo);
            dw += &c.heads.t().dot(&dmid);
        }
        let dheads = dmid.dot(&params.w(ids.wo).t());
        let mut dq = Array2::<f64>::zeros((t_len, d));
        let mut dk = Array2::<f64>::zeros((t_len, d));
        let mut dv = Array2::<f64>::zeros((t_len, d));
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &c.probs[h];
            for t in 0..t_len {
                // dA[t][j] = <dheads_t, v_j>
                let mut da = vec![0.0; t + 1];
                for (j, daj) in da.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for col in cols.clone() {
                        acc += dheads[[t, col]] * c.v[[j, col]];
                    }
                    *daj = acc;
                }
                let mut row_dot = 0.0;
                for (j, daj) in da.iter().enumerate() {
                    row_dot += daj * p[[t, j]];
                }
                for (j, daj) in da.iter().enumerate() {
                    let pj = p[[t, j]];
                    for col in cols.clone() {
                        dv[[j, col]] += pj * dheads[[t, col]];
                    }
                    let ds = pj * (daj - row_dot) * scale;
                    if ds != 0.0 {
                        for col in cols.clone() {
                            dq[[t, col]] += ds * c.k[[j, col]];
                            dk[[j, col]] += ds * c.q[[t, col]];
                        }
                    }
                }
            }
        }
        for (wid, dproj) in [(ids.wq, &dq), (ids.wk, &dk), (ids.wv, &dv)] {
            let mut dw = lay.view_mut(g, wid);
            dw += &c.n1.t().dot(dproj);
        }
        let dn1 = dq.dot(&params.w(ids.wq).t()) + dk.dot(&params.w(ids.wk).t()) + dv.dot(&params.w(ids.wv).t());
        let r = lay.range(ids.ln1);
        let mut dprev = rms_norm_backward(&dn1, &c.u1, &c.inv1, params.row(ids.ln1), &mut g[r]);
        dprev += &dmid;
        dx = dprev;
    }

    if top == 0 {
        return;
    }
    let emb_off = lay.specs[lay.tok_embed].offset;
    let pos_off = lay.specs[lay.pos_embed].offset;
    for (t, &tok) in cache.tokens.iter().enumerate() {
        for i in 0..d {
            g[emb_off + tok as usize * d + i] += dx[[t, i]];
            g[pos_off + t * d + i] += dx[[t, i]];
        }
    }
}

/// Log-softmax of one logit row with max subtraction.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Log-probabilities of `response` given `prefix`, one entry per response
/// token.
pub fn response_token_logprobs(logits: &Array2<f64>, prefix_len: usize, seq: &[TokenId]) -> Vec<f64> {
    (prefix_len..seq.len())
        .map(|p| {
            let row = logits.row(p - 1);
            let ls = log_softmax(row.as_slice().expect("contiguous logits"));
            ls[seq[p] as usize]
        })
        .collect()
}

/// Gradient of `Σ log p(seq[p] | seq[..p])` over response positions w.r.t.
/// the logits, scaled by `weight`, added into `dlogits`.
pub(crate) fn add_logprob_grad(logits: &Array2<f64>, prefix_len: usize, seq: &[TokenId], weight: f64, dlogits: &mut Array2<f64>) {
    for p in prefix_len..seq.len() {
        let row = logits.row(p - 1);
        let ls = log_softmax(row.as_slice().expect("contiguous logits"));
        let mut drow = dlogits.row_mut(p - 1);
        for (j, l) in ls.iter().enumerate() {
            drow[j] -= weight * l.exp();
        }
        drow[seq[p] as usize] += weight;
    }
}

/// Slice of logits for the positions that predict the response tokens.
pub fn response_logits(logits: &Array2<f64>, prefix_len: usize, seq_len: usize) -> ArrayView2<'_, f64> {
    logits.slice(s![prefix_len - 1..seq_len - 1, ..])
}
