//! Multiple-choice scoring by option log-likelihood, accuracy reports, the
//! transfer-localization plane, and the pivot-world (English) bias metric.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_with_trace, response_token_logprobs, Parameters};
use crate::steering::SteeringPlan;
use crate::worldgen::{FactKind, McqItem, PIVOT};

/// Reference constant: share of pivot-world picks that survived steering on
/// the full-size unaligned model, in percent. Documented, not reproduced.
pub const REFERENCE_STEERED_PIVOT_BIAS_PCT: f64 = 30.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    /// Universal knowledge (transfer axis).
    Universal,
    /// Decontextualized cultural items (localization axis).
    Cultural,
    /// Cultural items that carry the region marker.
    CulturalCtx,
}

impl Dataset {
    pub fn of(item: &McqItem) -> Self {
        match (item.kind, item.ctx) {
            (FactKind::Universal, _) => Dataset::Universal,
            (FactKind::Cultural, false) => Dataset::Cultural,
            (FactKind::Cultural, true) => Dataset::CulturalCtx,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Dataset::Universal => "universal",
            Dataset::Cultural => "cultural",
            Dataset::CulturalCtx => "cultural_ctx",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionScores {
    pub chosen: usize,
    pub loglik: Vec<f64>,
}

/// Index of the largest score; exact ties go to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Scores each option by `log p(option | query)`, one forward pass per option.
pub fn score_mcq(params: &Parameters, item: &McqItem, plan: Option<&SteeringPlan>, length_norm: bool) -> Result<OptionScores> {
    item.validate()?;
    let mut loglik = Vec::with_capacity(item.options.len());
    for opt in &item.options {
        let seq: Vec<_> = item.query.iter().chain(opt).copied().collect();
        let (logits, _) = forward_with_trace(params, &seq, plan)?;
        let lp: f64 = response_token_logprobs(&logits, item.query.len(), &seq).iter().sum();
        loglik.push(if length_norm { lp / opt.len() as f64 } else { lp });
    }
    Ok(OptionScores { chosen: argmax_lowest(&loglik), loglik })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: u64,
    pub lang: usize,
    pub dataset: Dataset,
    pub chosen: usize,
    pub gold: usize,
    pub pivot_opt: Option<usize>,
    pub loglik: Vec<f64>,
}

impl ItemRecord {
    pub fn correct(&self) -> bool {
        self.chosen == self.gold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub lang: usize,
    pub dataset: Dataset,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_revision: u64,
    pub accuracy: f64,
    pub cells: Vec<AccuracyCell>,
    pub records: Vec<ItemRecord>,
}

impl EvalReport {
    /// Builds cells and overall accuracy from item records.
    pub fn from_records(model_revision: u64, mut records: Vec<ItemRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("evaluation set".into()));
        }
        records.sort_by_key(|r| (r.id, r.dataset));
        let mut tally: BTreeMap<(usize, Dataset), (usize, usize)> = BTreeMap::new();
        for r in &records {
            let e = tally.entry((r.lang, r.dataset)).or_default();
            e.0 += usize::from(r.correct());
            e.1 += 1;
        }
        let cells = tally
            .into_iter()
            .map(|((lang, dataset), (correct, total))| AccuracyCell {
                lang,
                dataset,
                correct,
                total,
                accuracy: correct as f64 / total as f64,
            })
            .collect();
        let correct = records.iter().filter(|r| r.correct()).count();
        let accuracy = correct as f64 / records.len() as f64;
        Ok(Self { model_revision, accuracy, cells, records })
    }

    pub fn cell(&self, lang: usize, dataset: Dataset) -> Option<&AccuracyCell> {
        self.cells.iter().find(|c| c.lang == lang && c.dataset == dataset)
    }

    /// Accuracy on `dataset` pooled over `langs`.
    pub fn pooled(&self, langs: &[usize], dataset: Dataset) -> Option<f64> {
        let (c, t) = self
            .cells
            .iter()
            .filter(|c| c.dataset == dataset && langs.contains(&c.lang))
            .fold((0, 0), |(c, t), cell| (c + cell.correct, t + cell.total));
        (t > 0).then(|| c as f64 / t as f64)
    }

    pub fn languages(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.lang).collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn item_keys(&self, lang: usize) -> BTreeSet<(u64, Dataset)> {
        self.records.iter().filter(|r| r.lang == lang).map(|r| (r.id, r.dataset)).collect()
    }
}

/// Scores every item and aggregates accuracy per language and dataset.
pub fn accuracy(params: &Parameters, items: &[McqItem], plan: Option<&SteeringPlan>, length_norm: bool) -> Result<(f64, EvalReport)> {
    accuracy_with_plans(params, items, |_| plan, length_norm)
}

/// Like [`accuracy`] but with a plan chosen per item (e.g. per-language vectors).
pub fn accuracy_with_plans<'p, F>(params: &Parameters, items: &[McqItem], plan_for: F, length_norm: bool) -> Result<(f64, EvalReport)>
where
    F: Fn(&McqItem) -> Option<&'p SteeringPlan>,
{
    if items.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        let sc = score_mcq(params, item, plan_for(item), length_norm)?;
        records.push(ItemRecord {
            id: item.id,
            lang: item.lang,
            dataset: Dataset::of(item),
            chosen: sc.chosen,
            gold: item.gold,
            pivot_opt: item.pivot_opt,
            loglik: sc.loglik,
        });
    }
    let report = EvalReport::from_records(params.revision(), records)?;
    Ok((report.accuracy, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanePoint {
    pub method: String,
    pub lang: String,
    /// Δ universal accuracy, in points.
    pub transfer: f64,
    /// Δ decontextualized cultural accuracy, in points.
    pub localization: f64,
}

/// `(cand_u − base_u, cand_c − base_c)`.
pub fn plane_delta(base: (f64, f64), cand: (f64, f64)) -> (f64, f64) {
    (cand.0 - base.0, cand.1 - base.1)
}

/// Plane coordinates for `langs` pooled together; `label` names the language column.
pub fn plane_point(base: &EvalReport, cand: &EvalReport, method: &str, langs: &[usize], label: &str) -> Result<PlanePoint> {
    for &l in langs {
        if base.item_keys(l) != cand.item_keys(l) {
            return Err(Error::Precondition(format!("reports cover different items for language {l}")));
        }
    }
    let get = |r: &EvalReport, d: Dataset| {
        r.pooled(langs, d).ok_or_else(|| Error::Precondition(format!("report has no {d} items for languages {langs:?}")))
    };
    let b = (get(base, Dataset::Universal)? * 100.0, get(base, Dataset::Cultural)? * 100.0);
    let c = (get(cand, Dataset::Universal)? * 100.0, get(cand, Dataset::Cultural)? * 100.0);
    let (transfer, localization) = plane_delta(b, c);
    Ok(PlanePoint { method: method.to_string(), lang: label.to_string(), transfer, localization })
}

/// One point per non-pivot language plus the pooled `all` point.
pub fn plane_points(base: &EvalReport, cand: &EvalReport, method: &str) -> Result<Vec<PlanePoint>> {
    let langs: Vec<usize> = base.languages().into_iter().filter(|&l| l != PIVOT).collect();
    let mut out = Vec::with_capacity(langs.len() + 1);
    for &l in &langs {
        out.push(plane_point(base, cand, method, &[l], &l.to_string())?);
    }
    out.push(plane_point(base, cand, method, &langs, "all")?);
    Ok(out)
}

/// `method,lang,transfer,localization`
pub fn plane_csv(points: &[PlanePoint]) -> String {
    let mut s = String::from("method,lang,transfer,localization\n");
    for p in points {
        s.push_str(&format!("{},{},{:?},{:?}\n", p.method, p.lang, p.transfer, p.localization));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCell {
    pub lang: usize,
    pub eligible: usize,
    pub pivot_picks: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub per_language: Vec<BiasCell>,
    pub eligible: usize,
    pub fraction: f64,
}

/// Eligible: non-pivot item whose pivot-world option exists and is not gold.
pub fn bias_eligible(item: &McqItem) -> bool {
    item.lang != PIVOT && item.pivot_opt.is_some_and(|p| p != item.gold)
}

/// Bias from an arbitrary option chooser.
pub fn english_bias_with<F>(items: &[McqItem], mut choose: F) -> Result<BiasReport>
where
    F: FnMut(&McqItem) -> Result<usize>,
{
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for item in items.iter().filter(|i| bias_eligible(i)) {
        let chosen = choose(item)?;
        let e = per.entry(item.lang).or_default();
        e.0 += 1;
        e.1 += usize::from(Some(chosen) == item.pivot_opt);
    }
    let eligible: usize = per.values().map(|e| e.0).sum();
    if eligible == 0 {
        return Err(Error::Empty("no bias-eligible cultural items".into()));
    }
    let picks: usize = per.values().map(|e| e.1).sum();
    let per_language =
        per.into_iter().map(|(lang, (n, p))| BiasCell { lang, eligible: n, pivot_picks: p, fraction: p as f64 / n as f64 }).collect();
    Ok(BiasReport { per_language, eligible, fraction: picks as f64 / eligible as f64 })
}

/// Fraction of eligible cultural items on which the model picks the
/// pivot-world answer.
pub fn english_bias(params: &Parameters, items: &[McqItem], plan: Option<&SteeringPlan>) -> Result<BiasReport> {
    english_bias_with(items, |item| Ok(score_mcq(params, item, plan, false)?.chosen))
}

/// Bias computed from the choices already stored in a report.
pub fn english_bias_from_report(report: &EvalReport, dataset: Dataset) -> Result<BiasReport> {
    let items: Vec<McqItem> = report
        .records
        .iter()
        .filter(|r| r.dataset == dataset)
        .map(|r| McqItem {
            id: r.id,
            lang: r.lang,
            kind: FactKind::Cultural,
            ctx: dataset == Dataset::CulturalCtx,
            query: Vec::new(),
            options: Vec::new(),
            gold: r.gold,
            pivot_opt: r.pivot_opt,
            split: crate::worldgen::Split::Test,
        })
        .collect();
    let chosen: BTreeMap<u64, usize> = report.records.iter().filter(|r| r.dataset == dataset).map(|r| (r.id, r.chosen)).collect();
    english_bias_with(&items, |i| Ok(chosen[&i.id]))
}
