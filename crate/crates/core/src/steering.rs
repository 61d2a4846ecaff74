//! Contrastive steering vectors and steering plans.
//!
//! A steering vector is the mean activation difference between the two
//! sides of a set of contrastive input pairs, read at the final query token
//! of one residual layer. A plan adds `scale · vector` to the residual
//! stream after the planned block, at every position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_with_trace, ModelConfig, Parameters, TokenId};
use crate::worldgen::{decontextualize, FactKind, McqItem, Split, Vocab};

/// Default steering strength.
pub const DEFAULT_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteerKind {
    /// Toward the pivot-language subspace.
    En,
    /// Toward the culturally situated (contextualized) subspace.
    Loc,
}

impl SteerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SteerKind::En => "en",
            SteerKind::Loc => "loc",
        }
    }
}

impl std::str::FromStr for SteerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "en" => Ok(SteerKind::En),
            "loc" => Ok(SteerKind::Loc),
            other => Err(Error::Format(format!("unknown steering kind {other:?}"))),
        }
    }
}

/// Contrastive input pairs `(positive, negative)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub kind: SteerKind,
    pub pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub kind: SteerKind,
    pub layer: usize,
    pub values: Vec<f64>,
    pub n_pairs: usize,
    pub model_revision: u64,
}

impl SteeringVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: usize,
    pub kind: SteerKind,
    pub vector: Vec<f64>,
    pub scale: f64,
    /// Revision of the model the vector was read from, when known.
    pub source_revision: Option<u64>,
}

/// A set of residual-stream additions, at most one per `(layer, kind)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SteeringPlan {
    entries: Vec<PlanEntry>,
}

impl SteeringPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(vector: &SteeringVector, scale: f64) -> Result<Self> {
        let mut plan = Self::new();
        plan.push_vector(vector, scale)?;
        Ok(plan)
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: PlanEntry) -> Result<()> {
        if !entry.scale.is_finite() {
            return Err(Error::NonFinite("steering scale".into()));
        }
        if entry.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("steering vector".into()));
        }
        if self.entries.iter().any(|e| e.layer == entry.layer && e.kind == entry.kind) {
            return Err(Error::Precondition(format!("plan already steers {} at layer {}", entry.kind.as_str(), entry.layer)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn push_vector(&mut self, v: &SteeringVector, scale: f64) -> Result<()> {
        self.push(PlanEntry { layer: v.layer, kind: v.kind, vector: v.values.clone(), scale, source_revision: Some(v.model_revision) })
    }

    /// Summed delta per layer (index `ℓ-1`), validated against the model shape.
    pub fn layer_deltas(&self, cfg: &ModelConfig) -> Result<Vec<Option<Vec<f64>>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; cfg.n_layers];
        for e in &self.entries {
            cfg.check_layer(e.layer)?;
            if e.vector.len() != cfg.d_model {
                return Err(Error::DimensionMismatch { expected: cfg.d_model, got: e.vector.len() });
            }
            let slot = out[e.layer - 1].get_or_insert_with(|| vec![0.0; cfg.d_model]);
            for (s, v) in slot.iter_mut().zip(&e.vector) {
                *s += e.scale * v;
            }
        }
        Ok(out)
    }

    /// Refuses vectors extracted from a different model revision.
    pub fn check_revision(&self, model_revision: u64) -> Result<()> {
        for e in &self.entries {
            if let Some(r) = e.source_revision {
                if r != model_revision {
                    return Err(Error::RevisionMismatch { vector: r, model: model_revision });
                }
            }
        }
        Ok(())
    }
}

/// Anything that can report the residual activation at a query's final token.
pub trait ActivationSource {
    fn d_model(&self) -> usize;
    fn n_layers(&self) -> usize;
    fn revision(&self) -> u64;
    fn final_token_activation(&self, tokens: &[TokenId], layer: usize) -> Result<Vec<f64>>;
}

impl ActivationSource for Parameters {
    fn d_model(&self) -> usize {
        self.config().d_model
    }

    fn n_layers(&self) -> usize {
        self.config().n_layers
    }

    fn revision(&self) -> u64 {
        Parameters::revision(self)
    }

    fn final_token_activation(&self, tokens: &[TokenId], layer: usize) -> Result<Vec<f64>> {
        self.config().check_layer(layer)?;
        let (_, trace) = forward_with_trace(self, tokens, None)?;
        trace.last_token(layer)
    }
}

/// Mean of `h(pos) − h(neg)` over all pairs at `layer`, unsteered.
pub fn extract_steering_vector<S: ActivationSource + ?Sized>(source: &S, pairs: &PairSet, layer: usize) -> Result<SteeringVector> {
    if pairs.pairs.is_empty() {
        return Err(Error::Empty("steering pair set".into()));
    }
    if layer == 0 || layer > source.n_layers() {
        return Err(Error::LayerOutOfRange { layer, n_layers: source.n_layers() });
    }
    let d = source.d_model();
    let mut sum = vec![0.0; d];
    for (pos, neg) in &pairs.pairs {
        let hp = source.final_token_activation(pos, layer)?;
        let hn = source.final_token_activation(neg, layer)?;
        if hp.len() != d || hn.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: hp.len().max(hn.len()) });
        }
        for i in 0..d {
            sum[i] += hp[i] - hn[i];
        }
    }
    let n = pairs.pairs.len() as f64;
    let values: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("steering vector".into()));
    }
    Ok(SteeringVector { kind: pairs.kind, layer, values, n_pairs: pairs.pairs.len(), model_revision: source.revision() })
}

/// EN vector at its layer plus LOC vector at its layer, sharing one scale.
pub fn make_surgical_plan(v_en: &SteeringVector, v_loc: &SteeringVector, gamma: f64) -> Result<SteeringPlan> {
    make_surgical_plan_scaled(v_en, gamma, v_loc, gamma)
}

/// Surgical plan with separate scales for the two vectors.
pub fn make_surgical_plan_scaled(v_en: &SteeringVector, gamma_en: f64, v_loc: &SteeringVector, gamma_loc: f64) -> Result<SteeringPlan> {
    if v_en.dim() != v_loc.dim() {
        return Err(Error::DimensionMismatch { expected: v_en.dim(), got: v_loc.dim() });
    }
    if v_en.model_revision != v_loc.model_revision {
        return Err(Error::RevisionMismatch { vector: v_loc.model_revision, model: v_en.model_revision });
    }
    let mut plan = SteeringPlan::new();
    plan.push_vector(v_en, gamma_en)?;
    plan.push_vector(v_loc, gamma_loc)?;
    Ok(plan)
}

/// Pairs each `target`-language item with its pivot-language rendering.
/// Positive side is the pivot query.
pub fn build_pair_set_en(items: &[McqItem], pivot: usize, target: usize) -> Result<PairSet> {
    let mut targets: Vec<&McqItem> = items.iter().filter(|i| i.lang == target && i.kind == FactKind::Universal && !i.ctx).collect();
    targets.sort_by_key(|i| i.id);
    if targets.is_empty() {
        return Err(Error::Empty(format!("no universal items for language {target}")));
    }
    let mut pairs = Vec::with_capacity(targets.len());
    for t in &targets {
        let src = items
            .iter()
            .find(|i| i.lang == pivot && i.kind == FactKind::Universal && !i.ctx && i.fact_id() == t.fact_id())
            .ok_or_else(|| Error::Precondition(format!("item {} has no pivot-language counterpart", t.id)))?;
        pairs.push((src.query.clone(), t.query.clone()));
    }
    Ok(PairSet { kind: SteerKind::En, pairs, split: common_split(&targets) })
}

/// Pairs each contextualized cultural item in `lang` with its
/// decontextualized form.
pub fn build_pair_set_loc(items: &[McqItem], lang: usize, vocab: &Vocab) -> Result<PairSet> {
    let mut ctx: Vec<&McqItem> = items.iter().filter(|i| i.lang == lang && i.kind == FactKind::Cultural && i.ctx).collect();
    ctx.sort_by_key(|i| i.id);
    if ctx.is_empty() {
        return Err(Error::Empty(format!("no contextualized cultural items for language {lang}")));
    }
    let pairs = ctx.iter().map(|i| Ok((i.query.clone(), decontextualize(i, vocab)?.query))).collect::<Result<Vec<_>>>()?;
    Ok(PairSet { kind: SteerKind::Loc, pairs, split: common_split(&ctx) })
}

fn common_split(items: &[&McqItem]) -> Option<Split> {
    let first = items.first()?.split;
    items.iter().all(|i| i.split == first).then_some(first)
}
