//! Synthetic multilingual world.
//!
//! Each language owns a disjoint block of token ids (language tag, relation,
//! object and subject tokens). A small set of structural tokens is shared:
//! the question mark and one region marker per language. Facts are
//! `(subject, relation) → object` triples over language-independent semantic
//! ids; a language renders them through its own token block.
//!
//! Universal facts have the same answer in every language. Cultural facts
//! have a pivot-world answer (language 0) and a different local answer in
//! every other language.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::seed::rng_for;

/// The pivot language is always language 0.
pub const PIVOT: usize = 0;

/// Items ids pack `(fact, language)`; languages are capped at 256.
const LANG_SLOTS: u64 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactKind {
    Universal,
    Cultural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dev1,
    Dev2,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Dev1 => "dev1",
            Split::Dev2 => "dev2",
            Split::Test => "test",
        }
    }
}

fn default_relations() -> usize {
    4
}
fn default_objects() -> usize {
    16
}
fn default_one() -> f64 {
    1.0
}
fn default_translated() -> f64 {
    0.5
}
fn default_regional() -> f64 {
    1.0
}
fn default_dev() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_languages: usize,
    pub n_universal_facts: usize,
    pub n_cultural_facts: usize,
    pub universal_coverage_nonpivot: f64,
    pub tokens_per_language: usize,
    pub n_options: usize,
    pub seed: u64,
    /// Relation vocabulary size; facts occupy distinct (subject, relation) cells.
    #[serde(default = "default_relations")]
    pub n_relations: usize,
    /// Semantic object pool shared by answers and distractors.
    #[serde(default = "default_objects")]
    pub n_objects: usize,
    /// Fraction of cultural facts whose non-pivot items offer the pivot-world answer.
    #[serde(default = "default_one")]
    pub pivot_option_fraction: f64,
    /// Fraction of cultural facts whose pivot-language statement is carried
    /// into the translated parallel data (rendered with the pivot-world answer).
    #[serde(default = "default_translated")]
    pub translated_cultural_fraction: f64,
    /// Fraction of cultural facts that every corpus also states for each
    /// other region, marked with that region's token and carrying its answer.
    #[serde(default = "default_regional")]
    pub regional_mention_fraction: f64,
    #[serde(default = "default_dev")]
    pub dev1_fraction: f64,
    #[serde(default = "default_dev")]
    pub dev2_fraction: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_languages: 3,
            n_universal_facts: 60,
            n_cultural_facts: 30,
            universal_coverage_nonpivot: 0.4,
            tokens_per_language: 64,
            n_options: 4,
            seed: 42,
            n_relations: default_relations(),
            n_objects: default_objects(),
            pivot_option_fraction: 1.0,
            translated_cultural_fraction: default_translated(),
            regional_mention_fraction: default_regional(),
            dev1_fraction: default_dev(),
            dev2_fraction: default_dev(),
        }
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidWorld(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl WorldSpec {
    pub fn n_facts(&self) -> usize {
        self.n_universal_facts + self.n_cultural_facts
    }

    pub fn n_subjects(&self) -> usize {
        self.n_facts().div_ceil(self.n_relations.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_languages < 2 {
            return Err(Error::InvalidWorld("n_languages must be at least 2".into()));
        }
        if self.n_languages as u64 > LANG_SLOTS {
            return Err(Error::InvalidWorld(format!("at most {LANG_SLOTS} languages")));
        }
        if self.n_options < 2 {
            return Err(Error::InvalidWorld("n_options must be at least 2".into()));
        }
        if self.n_relations == 0 {
            return Err(Error::InvalidWorld("n_relations must be at least 1".into()));
        }
        if self.n_facts() == 0 {
            return Err(Error::InvalidWorld("world has no facts".into()));
        }
        check_fraction("universal_coverage_nonpivot", self.universal_coverage_nonpivot)?;
        check_fraction("pivot_option_fraction", self.pivot_option_fraction)?;
        check_fraction("translated_cultural_fraction", self.translated_cultural_fraction)?;
        check_fraction("regional_mention_fraction", self.regional_mention_fraction)?;
        check_fraction("dev1_fraction", self.dev1_fraction)?;
        check_fraction("dev2_fraction", self.dev2_fraction)?;
        if self.dev1_fraction + self.dev2_fraction >= 1.0 {
            return Err(Error::InvalidWorld("dev fractions leave no test split".into()));
        }
        // Cultural items need gold + pivot-world answer + distinct distractors.
        if self.n_objects < self.n_options + 1 {
            return Err(Error::InvalidWorld(format!(
                "vocab too small: {} objects cannot fill {} options plus a pivot-world answer",
                self.n_objects, self.n_options
            )));
        }
        let needed = 1 + self.n_relations + self.n_objects + self.n_subjects();
        if needed > self.tokens_per_language {
            return Err(Error::InvalidWorld(format!(
                "vocab too small: {} facts need {needed} tokens per language, have {}",
                self.n_facts(),
                self.tokens_per_language
            )));
        }
        Ok(())
    }
}

/// Token-id layout: shared structural tokens first, then one block per language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_languages: usize,
    pub tokens_per_language: usize,
    pub n_relations: usize,
    pub n_objects: usize,
}

impl Vocab {
    pub fn for_spec(spec: &WorldSpec) -> Self {
        Self {
            n_languages: spec.n_languages,
            tokens_per_language: spec.tokens_per_language,
            n_relations: spec.n_relations,
            n_objects: spec.n_objects,
        }
    }

    fn shared_len(&self) -> usize {
        1 + self.n_languages
    }

    pub fn size(&self) -> usize {
        self.shared_len() + self.n_languages * self.tokens_per_language
    }

    pub fn qmark(&self) -> TokenId {
        0
    }

    pub fn region(&self, lang: usize) -> TokenId {
        (1 + lang) as TokenId
    }

    pub fn is_region(&self, tok: TokenId) -> bool {
        (1..=self.n_languages as TokenId).contains(&tok)
    }

    fn base(&self, lang: usize) -> usize {
        self.shared_len() + lang * self.tokens_per_language
    }

    pub fn lang_tag(&self, lang: usize) -> TokenId {
        self.base(lang) as TokenId
    }

    pub fn relation(&self, lang: usize, rel: usize) -> TokenId {
        (self.base(lang) + 1 + rel) as TokenId
    }

    pub fn object(&self, lang: usize, obj: usize) -> TokenId {
        (self.base(lang) + 1 + self.n_relations + obj) as TokenId
    }

    pub fn subject(&self, lang: usize, subj: usize) -> TokenId {
        (self.base(lang) + 1 + self.n_relations + self.n_objects + subj) as TokenId
    }

    /// Language whose block contains `tok`; `None` for shared tokens.
    pub fn language_of(&self, tok: TokenId) -> Option<usize> {
        let t = tok as usize;
        if t < self.shared_len() || t >= self.size() {
            return None;
        }
        Some((t - self.shared_len()) / self.tokens_per_language)
    }

    fn local(&self, tok: TokenId) -> Option<(usize, usize)> {
        let lang = self.language_of(tok)?;
        Some((lang, tok as usize - self.base(lang)))
    }

    /// Semantic subject id of a subject token.
    pub fn subject_id(&self, tok: TokenId) -> Option<usize> {
        let (_, off) = self.local(tok)?;
        off.checked_sub(1 + self.n_relations + self.n_objects)
    }

    /// Semantic relation id of a relation token.
    pub fn relation_id(&self, tok: TokenId) -> Option<usize> {
        let (_, off) = self.local(tok)?;
        (1..=self.n_relations).contains(&off).then(|| off - 1)
    }

    /// Semantic object id of an object token.
    pub fn object_id(&self, tok: TokenId) -> Option<usize> {
        let (_, off) = self.local(tok)?;
        let start = 1 + self.n_relations;
        (start..start + self.n_objects).contains(&off).then(|| off - start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub id: usize,
    pub kind: FactKind,
    pub subject: usize,
    pub relation: usize,
    /// Gold semantic object per language.
    pub answers: Vec<usize>,
    /// Semantic distractors per language, `n_options - 1` each.
    pub distractors: Vec<Vec<usize>>,
    /// Option order per language: semantic objects in display order.
    pub option_order: Vec<Vec<usize>>,
    pub split: Split,
    /// Pivot-world answer is among the non-pivot options.
    pub offers_pivot_answer: bool,
    /// Pivot statement of this cultural fact appears in translated data.
    pub translated: bool,
    /// Each corpus mentions the other regions' answers for this fact.
    #[serde(default)]
    pub regional: bool,
}

impl Fact {
    pub fn pivot_answer(&self) -> usize {
        self.answers[PIVOT]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: u64,
    pub lang: usize,
    pub kind: FactKind,
    pub ctx: bool,
    pub query: Vec<TokenId>,
    pub options: Vec<Vec<TokenId>>,
    pub gold: usize,
    pub pivot_opt: Option<usize>,
    pub split: Split,
}

pub fn item_id(fact: usize, lang: usize) -> u64 {
    fact as u64 * LANG_SLOTS + lang as u64
}

impl McqItem {
    pub fn fact_id(&self) -> usize {
        (self.id / LANG_SLOTS) as usize
    }

    /// Well-formedness: non-empty options of equal length, gold in range.
    pub fn validate(&self) -> Result<()> {
        if self.query.is_empty() {
            return Err(Error::Format(format!("item {} has an empty query", self.id)));
        }
        let len = self.options.first().map(Vec::len).unwrap_or(0);
        if len == 0 || self.options.iter().any(|o| o.len() != len) {
            return Err(Error::Format(format!("item {} options must be non-empty and of equal length", self.id)));
        }
        if self.gold >= self.options.len() {
            return Err(Error::Format(format!("item {} gold index out of range", self.id)));
        }
        if self.pivot_opt.is_some_and(|p| p >= self.options.len()) {
            return Err(Error::Format(format!("item {} pivot option out of range", self.id)));
        }
        Ok(())
    }
}

/// Removes the region marker from a contextualized item.
pub fn decontextualize(item: &McqItem, vocab: &Vocab) -> Result<McqItem> {
    if !item.ctx {
        return Err(Error::Precondition(format!("item {} is already decontextualized", item.id)));
    }
    let markers = item.query.iter().filter(|&&t| vocab.is_region(t)).count();
    if markers != 1 {
        return Err(Error::Precondition(format!("item {} carries {markers} region markers, expected exactly one", item.id)));
    }
    let mut out = item.clone();
    out.query.retain(|&t| !vocab.is_region(t));
    out.ctx = false;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub spec: WorldSpec,
    pub vocab: Vocab,
    pub facts: Vec<Fact>,
    /// Universal facts stated in each language's corpus (all of them for the pivot).
    pub covered: Vec<BTreeSet<usize>>,
}

fn split_counts(n: usize, spec: &WorldSpec) -> Result<(usize, usize)> {
    if n == 0 {
        return Ok((0, 0));
    }
    let d1 = (n as f64 * spec.dev1_fraction).round() as usize;
    let d2 = (n as f64 * spec.dev2_fraction).round() as usize;
    if d1 + d2 >= n || (spec.dev1_fraction > 0.0 && d1 == 0) || (spec.dev2_fraction > 0.0 && d2 == 0) {
        return Err(Error::InvalidWorld(format!("set of {n} facts too small to split")));
    }
    Ok((d1, d2))
}

fn sample_excluding(rng: &mut impl Rng, pool: usize, exclude: &[usize], count: usize) -> Vec<usize> {
    let mut cands: Vec<usize> = (0..pool).filter(|o| !exclude.contains(o)).collect();
    cands.shuffle(rng);
    cands.truncate(count);
    cands
}

fn choose_subset(seed: u64, stream: &str, ids: &[usize], count: usize) -> BTreeSet<usize> {
    let mut rng = rng_for(seed, stream);
    let mut v = ids.to_vec();
    v.shuffle(&mut rng);
    v.into_iter().take(count).collect()
}

fn frac_count(n: usize, frac: f64) -> usize {
    ((n as f64) * frac).round() as usize
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let vocab = Vocab::for_spec(spec);
    let n_facts = spec.n_facts();
    let n_langs = spec.n_languages;

    let mut cells: Vec<(usize, usize)> = (0..spec.n_subjects()).flat_map(|s| (0..spec.n_relations).map(move |r| (s, r))).collect();
    cells.shuffle(&mut rng_for(spec.seed, "world/cells"));

    let universal: Vec<usize> = (0..spec.n_universal_facts).collect();
    let cultural: Vec<usize> = (spec.n_universal_facts..n_facts).collect();

    let mut split_of = vec![Split::Test; n_facts];
    for (name, ids) in [("world/split/universal", &universal), ("world/split/cultural", &cultural)] {
        let (d1, d2) = split_counts(ids.len(), spec)?;
        let mut order = ids.clone();
        order.shuffle(&mut rng_for(spec.seed, name));
        for (i, f) in order.into_iter().enumerate() {
            split_of[f] = if i < d1 {
                Split::Dev1
            } else if i < d1 + d2 {
                Split::Dev2
            } else {
                Split::Test
            };
        }
    }

    let offers = choose_subset(spec.seed, "world/pivot-option", &cultural, frac_count(cultural.len(), spec.pivot_option_fraction));
    let translated = choose_subset(spec.seed, "world/translated", &cultural, frac_count(cultural.len(), spec.translated_cultural_fraction));
    let regional = choose_subset(spec.seed, "world/regional", &cultural, frac_count(cultural.len(), spec.regional_mention_fraction));

    let mut facts = Vec::with_capacity(n_facts);
    for id in 0..n_facts {
        let mut rng = rng_for(spec.seed, &format!("world/fact/{id}"));
        let (subject, relation) = cells[id];
        let kind = if id < spec.n_universal_facts { FactKind::Universal } else { FactKind::Cultural };
        let offers_pivot = kind == FactKind::Cultural && offers.contains(&id);
        let pivot_answer = rng.random_range(0..spec.n_objects);
        let answers: Vec<usize> = match kind {
            FactKind::Universal => vec![pivot_answer; n_langs],
            FactKind::Cultural => (0..n_langs)
                .map(|l| if l == PIVOT { pivot_answer } else { sample_excluding(&mut rng, spec.n_objects, &[pivot_answer], 1)[0] })
                .collect(),
        };
        let mut distractors = Vec::with_capacity(n_langs);
        let mut option_order = Vec::with_capacity(n_langs);
        let shared = sample_excluding(&mut rng, spec.n_objects, &[pivot_answer], spec.n_options - 1);
        for (l, &gold) in answers.iter().enumerate() {
            let ds = match kind {
                FactKind::Universal => shared.clone(),
                FactKind::Cultural if l != PIVOT && offers_pivot => {
                    let mut ds = vec![pivot_answer];
                    ds.extend(sample_excluding(&mut rng, spec.n_objects, &[gold, pivot_answer], spec.n_options - 2));
                    ds
                }
                FactKind::Cultural => sample_excluding(&mut rng, spec.n_objects, &[gold, pivot_answer], spec.n_options - 1),
            };
            let mut order: Vec<usize> = std::iter::once(gold).chain(ds.iter().copied()).collect();
            order.shuffle(&mut rng);
            distractors.push(ds);
            option_order.push(order);
        }
        facts.push(Fact {
            id,
            kind,
            subject,
            relation,
            answers,
            distractors,
            option_order,
            split: split_of[id],
            offers_pivot_answer: offers_pivot,
            translated: translated.contains(&id),
            regional: regional.contains(&id),
        });
    }

    let n_cover = frac_count(spec.n_universal_facts, spec.universal_coverage_nonpivot);
    let covered = (0..n_langs)
        .map(|l| {
            if l == PIVOT {
                universal.iter().copied().collect()
            } else {
                choose_subset(spec.seed, &format!("world/coverage/{l}"), &universal, n_cover)
            }
        })
        .collect();

    Ok(World { spec: spec.clone(), vocab, facts, covered })
}

/// One corpus sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub lang: usize,
    pub tokens: Vec<TokenId>,
}

/// A query and its response tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub query: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl Statement {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.query.iter().chain(&self.response).copied().collect()
    }
}

/// Translation-equivalent statements: pivot side and target side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub fact: usize,
    pub lang: usize,
    pub src: Statement,
    pub tgt: Statement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub x: Vec<TokenId>,
    pub y_pref: Vec<TokenId>,
    pub y_rej: Vec<TokenId>,
    pub lang: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingCorpora {
    pub lm: Vec<CorpusLine>,
    pub parallel: Vec<ParallelPair>,
    pub preferences: Vec<PreferenceTriple>,
}

impl TrainingCorpora {
    /// Multilingual instruction data: every target side plus each pivot
    /// side once.
    pub fn sft_pairs(&self) -> Vec<Statement> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for p in &self.parallel {
            if seen.insert(p.fact) {
                out.push(p.src.clone());
            }
            out.push(p.tgt.clone());
        }
        out
    }

    /// Corpus lines split into (query, answer) at the question mark.
    pub fn lm_statements(&self, vocab: &Vocab) -> Result<Vec<Statement>> {
        self.lm.iter().map(|l| split_statement(&l.tokens, vocab)).collect()
    }
}

/// Splits a statement after its question-mark token.
pub fn split_statement(tokens: &[TokenId], vocab: &Vocab) -> Result<Statement> {
    let q = tokens.iter().position(|&t| t == vocab.qmark()).ok_or_else(|| Error::Format("statement has no question mark".into()))?;
    if q + 1 >= tokens.len() {
        return Err(Error::Format("statement has no response".into()));
    }
    Ok(Statement { query: tokens[..=q].to_vec(), response: tokens[q + 1..].to_vec() })
}

impl World {
    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    /// `[LANG, subject, relation, (REGION), ?]`.
    pub fn query(&self, fact: &Fact, lang: usize, ctx: bool) -> Vec<TokenId> {
        let v = &self.vocab;
        let mut q = vec![v.lang_tag(lang), v.subject(lang, fact.subject), v.relation(lang, fact.relation)];
        if ctx {
            q.push(v.region(lang));
        }
        q.push(v.qmark());
        q
    }

    /// Query in `lang` marked with the region of another language.
    fn regional_query(&self, fact: &Fact, lang: usize, region: usize) -> Vec<TokenId> {
        let mut q = self.query(fact, lang, false);
        q.insert(q.len() - 1, self.vocab.region(region));
        q
    }

    fn statement(&self, fact: &Fact, lang: usize, ctx: bool, answer: usize) -> Statement {
        Statement { query: self.query(fact, lang, ctx), response: vec![self.vocab.object(lang, answer)] }
    }

    /// Fact addressed by a query's subject and relation tokens.
    pub fn decode_fact(&self, query: &[TokenId]) -> Option<usize> {
        let subj = query.iter().find_map(|&t| self.vocab.subject_id(t))?;
        let rel = query.iter().find_map(|&t| self.vocab.relation_id(t))?;
        self.facts.iter().find(|f| f.subject == subj && f.relation == rel).map(|f| f.id)
    }

    pub fn universal_facts(&self) -> impl Iterator<Item = &Fact> {
        self.facts.iter().filter(|f| f.kind == FactKind::Universal)
    }

    pub fn cultural_facts(&self) -> impl Iterator<Item = &Fact> {
        self.facts.iter().filter(|f| f.kind == FactKind::Cultural)
    }

    pub fn non_pivot_languages(&self) -> impl Iterator<Item = usize> {
        1..self.spec.n_languages
    }
}

/// Per-language LM corpora, translated parallel pairs, and preference triples.
pub fn emit_training_corpora(world: &World) -> TrainingCorpora {
    let mut lm = Vec::new();
    for lang in 0..world.spec.n_languages {
        for f in world.universal_facts() {
            if world.covered[lang].contains(&f.id) {
                lm.push(CorpusLine { lang, tokens: world.statement(f, lang, false, f.answers[lang]).tokens() });
            }
        }
        for f in world.cultural_facts() {
            for ctx in [true, false] {
                lm.push(CorpusLine { lang, tokens: world.statement(f, lang, ctx, f.answers[lang]).tokens() });
            }
            if f.regional {
                for other in (0..world.spec.n_languages).filter(|&o| o != lang) {
                    let mut tokens = world.regional_query(f, lang, other);
                    tokens.push(world.vocab.object(lang, f.answers[other]));
                    lm.push(CorpusLine { lang, tokens });
                }
            }
        }
    }

    // Parallel data is pivot content rendered in each target language, so a
    // translated cultural statement carries the pivot-world answer.
    let mut parallel = Vec::new();
    for lang in world.non_pivot_languages() {
        for f in world.facts.iter().filter(|f| f.kind == FactKind::Universal || f.translated) {
            let answer = f.pivot_answer();
            parallel.push(ParallelPair {
                fact: f.id,
                lang,
                src: world.statement(f, PIVOT, false, answer),
                tgt: world.statement(f, lang, false, answer),
            });
        }
    }

    let mut preferences = Vec::with_capacity(parallel.len() * 2);
    for p in &parallel {
        preferences.push(PreferenceTriple {
            x: p.tgt.query.clone(),
            y_pref: p.tgt.response.clone(),
            y_rej: p.src.response.clone(),
            lang: p.lang,
        });
        preferences.push(PreferenceTriple {
            x: p.src.query.clone(),
            y_pref: p.src.response.clone(),
            y_rej: p.tgt.response.clone(),
            lang: PIVOT,
        });
    }
    TrainingCorpora { lm, parallel, preferences }
}

/// All evaluation items, ordered by fact, language, then context flag.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSets {
    pub items: Vec<McqItem>,
}

impl EvalSets {
    pub fn select(&self, kind: FactKind, ctx: bool, split: Option<Split>) -> Vec<McqItem> {
        self.items.iter().filter(|i| i.kind == kind && i.ctx == ctx && split.is_none_or(|s| i.split == s)).cloned().collect()
    }

    /// Universal items (the transfer set).
    pub fn universal(&self, split: Option<Split>) -> Vec<McqItem> {
        self.select(FactKind::Universal, false, split)
    }

    /// Decontextualized cultural items (the localization set).
    pub fn cultural(&self, split: Option<Split>) -> Vec<McqItem> {
        self.select(FactKind::Cultural, false, split)
    }

    pub fn cultural_contextualized(&self, split: Option<Split>) -> Vec<McqItem> {
        self.select(FactKind::Cultural, true, split)
    }
}

pub fn emit_eval_sets(world: &World) -> Result<EvalSets> {
    let v = &world.vocab;
    let mut items = Vec::new();
    for f in &world.facts {
        for lang in 0..world.spec.n_languages {
            let options: Vec<Vec<TokenId>> = f.option_order[lang].iter().map(|&o| vec![v.object(lang, o)]).collect();
            let gold = f.option_order[lang].iter().position(|&o| o == f.answers[lang]).expect("gold among options");
            let base = McqItem {
                id: item_id(f.id, lang),
                lang,
                kind: f.kind,
                ctx: false,
                query: world.query(f, lang, false),
                options,
                gold,
                pivot_opt: None,
                split: f.split,
            };
            match f.kind {
                FactKind::Universal => items.push(base),
                FactKind::Cultural => {
                    let pivot_opt = f.option_order[lang].iter().position(|&o| o == f.pivot_answer());
                    let ctx_item = McqItem { ctx: true, query: world.query(f, lang, true), pivot_opt, ..base };
                    let decon = decontextualize(&ctx_item, v)?;
                    items.push(ctx_item);
                    items.push(decon);
                }
            }
        }
    }
    Ok(EvalSets { items })
}
