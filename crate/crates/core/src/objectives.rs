//! Post-training objectives with exact gradients, and the training loop.
//!
//! * SFT: mean token NLL of responses given queries.
//! * Middle-layer alignment: InfoNCE over cosine similarities of mean-pooled
//!   layer activations of parallel texts, target-side in-batch negatives.
//! * Cross-lingual optimization (CLO): `λ·SFT + (1−λ)·CL`, where CL is a
//!   two-direction DPO-style preference loss against a frozen reference.

use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    add_logprob_grad, apply_sgd_step, backward, forward_cached, log_softmax, response_token_logprobs, ForwardOutput, GradientSet,
    Parameters, TokenId,
};
use crate::seed::rng_for;
use crate::worldgen::{PreferenceTriple, Statement, TrainingCorpora, Vocab, PIVOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Language-model pretraining on the per-language corpora (the unaligned base).
    Pretrain,
    Mist,
    Midalign,
    Clo,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Pretrain => "pretrain",
            Objective::Mist => "mist",
            Objective::Midalign => "midalign",
            Objective::Clo => "clo",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Objective::Pretrain),
            "mist" => Ok(Objective::Mist),
            "midalign" => Ok(Objective::Midalign),
            "clo" => Ok(Objective::Clo),
            other => Err(Error::InvalidTrainConfig(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub midalign_layer: usize,
    pub clo_lambda: f64,
    pub clo_beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { objective: Objective::Clo, lr: 0.05, batch_size: 8, epochs: 1, midalign_layer: 6, clo_lambda: 0.5, clo_beta: 1.0, seed: 42 }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.midalign_layer == 0 || self.midalign_layer > n_layers {
            return Err(Error::InvalidTrainConfig(format!("midalign_layer {} outside 1..={n_layers}", self.midalign_layer)));
        }
        check_clo_hyper(self.clo_lambda, self.clo_beta)?;
        if self.batch_size == 0 {
            return Err(Error::InvalidTrainConfig("batch_size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidTrainConfig("lr must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn check_clo_hyper(lambda: f64, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidTrainConfig(format!("clo_lambda {lambda} outside [0, 1]")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidTrainConfig(format!("clo_beta must be positive, got {beta}")));
    }
    Ok(())
}

/// Forward passes needed to score several responses to one prefix.
///
/// Single-token responses share one pass over the prefix: with causal
/// attention the prefix logits do not depend on what follows.
struct PrefixScores {
    x_len: usize,
    shared: Option<ForwardOutput>,
    passes: Vec<(ForwardOutput, Vec<TokenId>)>,
    ys: Vec<Vec<TokenId>>,
}

impl PrefixScores {
    fn new(params: &Parameters, x: &[TokenId], ys: &[&[TokenId]]) -> Result<Self> {
        let max = params.config().max_seq_len;
        if x.is_empty() {
            return Err(Error::Empty("query".into()));
        }
        for y in ys {
            if y.is_empty() {
                return Err(Error::Empty("response".into()));
            }
            if x.len() + y.len() > max {
                return Err(Error::SequenceLength { len: x.len() + y.len(), max });
            }
        }
        let ys: Vec<Vec<TokenId>> = ys.iter().map(|y| y.to_vec()).collect();
        if ys.iter().all(|y| y.len() == 1) {
            let out = forward_cached(params, x, None)?;
            return Ok(Self { x_len: x.len(), shared: Some(out), passes: Vec::new(), ys });
        }
        let passes = ys
            .iter()
            .map(|y| {
                let seq: Vec<TokenId> = x.iter().chain(y).copied().collect();
                Ok((forward_cached(params, &seq, None)?, seq))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { x_len: x.len(), shared: None, passes, ys })
    }

    /// Summed log-probability of response `i`.
    fn logprob(&self, i: usize) -> f64 {
        match &self.shared {
            Some(out) => {
                let row = out.logits.row(self.x_len - 1);
                log_softmax(row.as_slice().expect("contiguous"))[self.ys[i][0] as usize]
            }
            None => {
                let (out, seq) = &self.passes[i];
                response_token_logprobs(&out.logits, self.x_len, seq).iter().sum()
            }
        }
    }

    /// Accumulates `Σ_i weights[i] · ∇ logprob(i)` into `grads`.
    fn backward(&self, params: &Parameters, weights: &[f64], grads: &mut GradientSet) {
        match &self.shared {
            Some(out) => {
                let mut dl = Array2::zeros(out.logits.raw_dim());
                let row = out.logits.row(self.x_len - 1);
                let ls = log_softmax(row.as_slice().expect("contiguous"));
                let wsum: f64 = weights.iter().sum();
                for (j, l) in ls.iter().enumerate() {
                    dl[[self.x_len - 1, j]] -= wsum * l.exp();
                }
                for (y, w) in self.ys.iter().zip(weights) {
                    dl[[self.x_len - 1, y[0] as usize]] += w;
                }
                backward(params, &out.cache, Some(&dl), &[], grads);
            }
            None => {
                for ((out, seq), w) in self.passes.iter().zip(weights) {
                    let mut dl = Array2::zeros(out.logits.raw_dim());
                    add_logprob_grad(&out.logits, self.x_len, seq, *w, &mut dl);
                    backward(params, &out.cache, Some(&dl), &[], grads);
                }
            }
        }
    }
}

/// Mean NLL of response tokens given their queries, with exact gradients.
pub fn loss_sft(params: &Parameters, batch: &[Statement]) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::Empty("SFT batch".into()));
    }
    let total: usize = batch.iter().map(|s| s.response.len()).sum();
    let mut grads = GradientSet::zeros_like(params);
    let mut nll = 0.0;
    let scores = batch.iter().map(|s| PrefixScores::new(params, &s.query, &[&s.response])).collect::<Result<Vec<_>>>()?;
    let w = -1.0 / total as f64;
    for sc in &scores {
        nll -= sc.logprob(0);
        sc.backward(params, &[w], &mut grads);
    }
    let loss = nll / total as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("SFT loss".into()));
    }
    grads.loss = loss;
    Ok((loss, grads))
}

/// Value and pooled-activation gradients of the alignment loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignTerms {
    pub loss: f64,
    pub d_src: Vec<Vec<f64>>,
    pub d_tgt: Vec<Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `mean_i −log( exp(cos(s_i,t_i)) / Σ_j exp(cos(s_i,t_j)) )` over pooled
/// source/target activations, with gradients w.r.t. every pooled vector.
pub fn midalign_from_pooled(src: &[Vec<f64>], tgt: &[Vec<f64>]) -> Result<AlignTerms> {
    if src.is_empty() || src.len() != tgt.len() {
        return Err(Error::Empty("alignment batch must hold at least one pair".into()));
    }
    let b = src.len();
    let sn: Vec<f64> = src.iter().map(|v| norm(v)).collect();
    let tn: Vec<f64> = tgt.iter().map(|v| norm(v)).collect();
    if let Some(i) = sn.iter().chain(&tn).position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::ZeroNorm(format!("pooled activation {i} has zero or non-finite norm; cosine undefined")));
    }
    let d = src[0].len();
    let mut d_src = vec![vec![0.0; d]; b];
    let mut d_tgt = vec![vec![0.0; d]; b];
    let mut loss = 0.0;
    for i in 0..b {
        let cos: Vec<f64> = (0..b).map(|j| dot(&src[i], &tgt[j]) / (sn[i] * tn[j])).collect();
        let max = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = cos.iter().map(|c| (c - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - cos[i];
        for j in 0..b {
            let p = (cos[j] - max).exp() / z;
            let g = (p - if i == j { 1.0 } else { 0.0 }) / b as f64;
            if g == 0.0 {
                continue;
            }
            let inv = 1.0 / (sn[i] * tn[j]);
            for k in 0..d {
                d_src[i][k] += g * (tgt[j][k] * inv - cos[j] * src[i][k] / (sn[i] * sn[i]));
                d_tgt[j][k] += g * (src[i][k] * inv - cos[j] * tgt[j][k] / (tn[j] * tn[j]));
            }
        }
    }
    Ok(AlignTerms { loss: loss / b as f64, d_src, d_tgt })
}

/// Alignment loss over mean-pooled layer-`layer` activations of parallel texts.
pub fn loss_midalign(params: &Parameters, pairs: &[(Vec<TokenId>, Vec<TokenId>)], layer: usize) -> Result<(f64, GradientSet)> {
    params.config().check_layer(layer)?;
    if pairs.is_empty() {
        return Err(Error::Empty("alignment batch".into()));
    }
    let run = |toks: &Vec<TokenId>| -> Result<(ForwardOutput, Vec<f64>)> {
        let out = forward_cached(params, toks, None)?;
        let pooled = out.trace.mean_pooled(layer)?;
        Ok((out, pooled))
    };
    let src = pairs.iter().map(|(s, _)| run(s)).collect::<Result<Vec<_>>>()?;
    let tgt = pairs.iter().map(|(_, t)| run(t)).collect::<Result<Vec<_>>>()?;
    let sp: Vec<Vec<f64>> = src.iter().map(|(_, p)| p.clone()).collect();
    let tp: Vec<Vec<f64>> = tgt.iter().map(|(_, p)| p.clone()).collect();
    let terms = midalign_from_pooled(&sp, &tp)?;

    let mut grads = GradientSet::zeros_like(params);
    let d = params.config().d_model;
    for (side, dpool) in [(&src, &terms.d_src), (&tgt, &terms.d_tgt)] {
        for ((out, _), dp) in side.iter().zip(dpool) {
            let t_len = out.trace.tokens.len();
            let mut g = Array2::zeros((t_len, d));
            for mut row in g.rows_mut() {
                for (r, v) in row.iter_mut().zip(dp) {
                    *r = v / t_len as f64;
                }
            }
            backward(params, &out.cache, None, &[(layer, g)], &mut grads);
        }
    }
    grads.loss = terms.loss;
    Ok((terms.loss, grads))
}

/// Sequence log-probabilities for one preference triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloTerm {
    /// Query is in the pivot language (the `z_EN` direction).
    pub pivot_direction: bool,
    pub policy_pref: f64,
    pub policy_rej: f64,
    pub ref_pref: f64,
    pub ref_rej: f64,
    pub pref_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloBreakdown {
    pub loss: f64,
    pub sft: f64,
    pub cl: f64,
    /// Margin `z` per term, in input order.
    pub z: Vec<f64>,
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// CLO loss from sequence log-probabilities.
pub fn clo_objective(terms: &[CloTerm], lambda: f64, beta: f64) -> Result<CloBreakdown> {
    check_clo_hyper(lambda, beta)?;
    let n_pivot = terms.iter().filter(|t| t.pivot_direction).count();
    let n_local = terms.len() - n_pivot;
    if n_pivot == 0 || n_local == 0 {
        return Err(Error::Precondition("CLO batch must contain both preference directions".into()));
    }
    let z: Vec<f64> = terms.iter().map(|t| beta * ((t.policy_pref - t.ref_pref) - (t.policy_rej - t.ref_rej))).collect();
    let mut cl_pivot = 0.0;
    let mut cl_local = 0.0;
    let mut sft_nll = 0.0;
    let mut sft_tokens = 0;
    for (t, &zi) in terms.iter().zip(&z) {
        if t.pivot_direction {
            cl_pivot -= log_sigmoid(zi);
        } else {
            cl_local -= log_sigmoid(zi);
            sft_nll -= t.policy_pref;
            sft_tokens += t.pref_tokens;
        }
    }
    let cl = cl_pivot / n_pivot as f64 + cl_local / n_local as f64;
    let sft = sft_nll / sft_tokens as f64;
    let loss = lambda * sft + (1.0 - lambda) * cl;
    Ok(CloBreakdown { loss, sft, cl, z })
}

/// Full CLO evaluation: breakdown plus gradients w.r.t. the policy.
pub fn loss_clo_detailed(
    params: &Parameters,
    ref_params: &Parameters,
    batch: &[PreferenceTriple],
    lambda: f64,
    beta: f64,
) -> Result<(CloBreakdown, GradientSet)> {
    check_clo_hyper(lambda, beta)?;
    if params.layout() != ref_params.layout() {
        return Err(Error::ShapeMismatch("reference parameters differ in shape from the policy".into()));
    }
    let mut policy = Vec::with_capacity(batch.len());
    let mut terms = Vec::with_capacity(batch.len());
    for tr in batch {
        let ys: [&[TokenId]; 2] = [&tr.y_pref, &tr.y_rej];
        let pol = PrefixScores::new(params, &tr.x, &ys)?;
        let rf = PrefixScores::new(ref_params, &tr.x, &ys)?;
        terms.push(CloTerm {
            pivot_direction: tr.lang == PIVOT,
            policy_pref: pol.logprob(0),
            policy_rej: pol.logprob(1),
            ref_pref: rf.logprob(0),
            ref_rej: rf.logprob(1),
            pref_tokens: tr.y_pref.len(),
        });
        policy.push(pol);
    }
    let out = clo_objective(&terms, lambda, beta)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFinite("CLO loss".into()));
    }

    let n_pivot = terms.iter().filter(|t| t.pivot_direction).count() as f64;
    let n_local = terms.len() as f64 - n_pivot;
    let sft_tokens: usize = terms.iter().filter(|t| !t.pivot_direction).map(|t| t.pref_tokens).sum();
    let mut grads = GradientSet::zeros_like(params);
    for ((t, &z), pol) in terms.iter().zip(&out.z).zip(&policy) {
        let n_dir = if t.pivot_direction { n_pivot } else { n_local };
        // d(−log σ(z))/dz = σ(z) − 1
        let dz = (1.0 - lambda) * (sigmoid(z) - 1.0) / n_dir;
        let mut w_pref = dz * beta;
        let w_rej = -dz * beta;
        if !t.pivot_direction {
            w_pref -= lambda / sft_tokens as f64;
        }
        pol.backward(params, &[w_pref, w_rej], &mut grads);
    }
    grads.loss = out.loss;
    Ok((out, grads))
}

pub fn loss_clo(
    params: &Parameters,
    ref_params: &Parameters,
    batch: &[PreferenceTriple],
    lambda: f64,
    beta: f64,
) -> Result<(f64, GradientSet)> {
    let (out, grads) = loss_clo_detailed(params, ref_params, batch, lambda, beta)?;
    Ok((out.loss, grads))
}

/// Training inputs, already split into the shapes each objective consumes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainData {
    pub lm: Vec<Statement>,
    pub sft: Vec<Statement>,
    pub parallel: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    pub preferences: Vec<PreferenceTriple>,
}

impl TrainData {
    pub fn from_corpora(corpora: &TrainingCorpora, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            lm: corpora.lm_statements(vocab)?,
            sft: corpora.sft_pairs(),
            parallel: corpora.parallel.iter().map(|p| (p.src.tokens(), p.tgt.tokens())).collect(),
            preferences: corpora.preferences.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Lm,
    Sft,
    Align,
    Clo,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Lm => "lm",
            LossKind::Sft => "sft",
            LossKind::Align => "align",
            LossKind::Clo => "clo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub objective: Objective,
    pub loss_kind: LossKind,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    /// `step,objective,loss_kind,loss`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,objective,loss_kind,loss\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{:?}\n", e.step, e.objective.as_str(), e.loss_kind, e.loss));
        }
        s
    }
}

fn shuffled_batches(n: usize, batch: usize, seed: u64, stream: &str) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, stream));
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn pick<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}

/// Runs `cfg.epochs` epochs of the configured objective with plain SGD.
pub fn train(params: &Parameters, data: &TrainData, cfg: &TrainConfig) -> Result<(Parameters, TrainLog)> {
    cfg.validate(params.config().n_layers)?;
    let mut log = TrainLog::default();
    let mut current = params.clone();
    if cfg.epochs == 0 {
        return Ok((current, log));
    }
    let reference = params.clone();
    let obj = cfg.objective;
    let mut step = 0;
    let mut apply = |current: &mut Parameters, kind: LossKind, res: Result<(f64, GradientSet)>| -> Result<()> {
        let (loss, grads) = res?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("{kind} loss at step {step}")));
        }
        *current = apply_sgd_step(current, &grads, cfg.lr)?;
        log.entries.push(LogEntry { step, objective: obj, loss_kind: kind, loss });
        step += 1;
        Ok(())
    };

    for epoch in 0..cfg.epochs {
        let stream = |name: &str| format!("train/{}/{name}/{epoch}", obj.as_str());
        match obj {
            Objective::Pretrain | Objective::Mist => {
                let (src, kind) = if obj == Objective::Pretrain { (&data.lm, LossKind::Lm) } else { (&data.sft, LossKind::Sft) };
                if src.is_empty() {
                    return Err(Error::Empty(format!("{} training data", obj.as_str())));
                }
                for b in shuffled_batches(src.len(), cfg.batch_size, cfg.seed, &stream("sft")) {
                    let res = loss_sft(&current, &pick(src, &b));
                    apply(&mut current, kind, res)?;
                }
            }
            Objective::Midalign => {
                if data.sft.is_empty() || data.parallel.is_empty() {
                    return Err(Error::Empty("midalign needs SFT pairs and parallel pairs".into()));
                }
                let sft = shuffled_batches(data.sft.len(), cfg.batch_size, cfg.seed, &stream("sft"));
                let align = shuffled_batches(data.parallel.len(), cfg.batch_size, cfg.seed, &stream("align"));
                for i in 0..sft.len().max(align.len()) {
                    let res = loss_sft(&current, &pick(&data.sft, &sft[i % sft.len()]));
                    apply(&mut current, LossKind::Sft, res)?;
                    let res = loss_midalign(&current, &pick(&data.parallel, &align[i % align.len()]), cfg.midalign_layer);
                    apply(&mut current, LossKind::Align, res)?;
                }
            }
            Objective::Clo => {
                let pivot: Vec<PreferenceTriple> = data.preferences.iter().filter(|t| t.lang == PIVOT).cloned().collect();
                let local: Vec<PreferenceTriple> = data.preferences.iter().filter(|t| t.lang != PIVOT).cloned().collect();
                if pivot.is_empty() || local.is_empty() {
                    return Err(Error::Precondition("CLO data must contain both preference directions".into()));
                }
                let half = cfg.batch_size.div_ceil(2);
                let pb = shuffled_batches(pivot.len(), half, cfg.seed, &stream("pivot"));
                let lb = shuffled_batches(local.len(), half, cfg.seed, &stream("local"));
                for i in 0..pb.len().max(lb.len()) {
                    let mut batch = pick(&local, &lb[i % lb.len()]);
                    batch.extend(pick(&pivot, &pb[i % pb.len()]));
                    let res = loss_clo(&current, &reference, &batch, cfg.clo_lambda, cfg.clo_beta);
                    apply(&mut current, LossKind::Clo, res)?;
                }
            }
        }
    }
    Ok((current, log))
}
