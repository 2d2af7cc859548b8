//! Answerer models.
//!
//! The true oracle answers the ground-truth predicate with probability
//! `1 - noise_rate` and otherwise picks one of the two other answers uniformly.
//! Estimated oracles (`depA`, `indA`) are add-one-smoothed frequency tables keyed
//! by `(qid, signature)`, where the signature is the object attribute the
//! question's template looks at. Unseen keys fall back to the bank-wide marginal.
//!
//! An answer never depends on the dialog history: every function here takes only
//! a question and an object.
//!
//! Oracle table file (JSON):
//!
//! ```text
//! {"format_version":1,"kind":"indA","noise_rate":0.1,
//!  "meta":{"budget":4000,"seed":7,"label_noise":0.31,"smoothing":1.0},
//!  "table":{"fallback":[0.3,0.6,0.1],
//!           "entries":[{"qid":0,"signature":{"attr":"x-bin","value":3},"probs":[0.8,0.1,0.1]}, ...]}}
//! ```

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qbank::{evaluate_object, Predicate, Question, QuestionBank};
use crate::rng::{self, tag};
use crate::scene::{Object, Scene, Size};

pub const ORACLE_FORMAT_VERSION: u32 = 1;

/// Number of position bins used for threshold-question signatures.
pub const SIGNATURE_BINS: u32 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
    Na,
}

impl Answer {
    pub const ALL: [Answer; 3] = [Answer::Yes, Answer::No, Answer::Na];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Answer {
        Answer::ALL[i]
    }

    pub fn from_bool(b: bool) -> Answer {
        if b {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
            Answer::Na => "na",
        }
    }

    /// Parse human input: y/yes, n/no, na/n/a.
    pub fn parse(s: &str) -> Option<Answer> {
        match s.trim().to_ascii_lowercase().as_str() {
            "y" | "yes" => Some(Answer::Yes),
            "n" | "no" => Some(Answer::No),
            "na" | "n/a" | "not applicable" => Some(Answer::Na),
            _ => None,
        }
    }
}

/// Probability vector over `[yes, no, na]`.
pub type AnswerDist = [f64; 3];

/// Pick the answer whose cumulative probability first exceeds `u` in `[0, 1)`.
pub fn draw(dist: &AnswerDist, u: f64) -> Answer {
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return Answer::from_index(i);
        }
    }
    // u landed in the rounding gap above the total mass
    let last = dist.iter().rposition(|&p| p > 0.0).unwrap_or(2);
    Answer::from_index(last)
}

/// Most likely answer; ties go to the earlier of yes, no, na.
pub fn most_likely(dist: &AnswerDist) -> Answer {
    let mut best = 0;
    for i in 1..3 {
        if dist[i] > dist[best] {
            best = i;
        }
    }
    Answer::from_index(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OracleKind {
    #[serde(rename = "trueA")]
    TrueA,
    #[serde(rename = "depA")]
    DepA,
    #[serde(rename = "indA")]
    IndA,
}

impl OracleKind {
    pub fn name(self) -> &'static str {
        match self {
            OracleKind::TrueA => "trueA",
            OracleKind::DepA => "depA",
            OracleKind::IndA => "indA",
        }
    }
}

impl std::str::FromStr for OracleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trueA" | "true" => Ok(OracleKind::TrueA),
            "depA" | "dep" => Ok(OracleKind::DepA),
            "indA" | "ind" => Ok(OracleKind::IndA),
            _ => Err(Error::config(format!("unknown oracle kind {s:?}"))),
        }
    }
}

/// The attribute of an object that a question template inspects.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "attr", content = "value", rename_all = "kebab-case")]
pub enum Signature {
    Category(String),
    Color(Option<String>),
    Size(Size),
    XBin(u32),
    YBin(u32),
    Rank(u32),
}

fn bin(v: f64) -> u32 {
    ((v * SIGNATURE_BINS as f64) as u32).min(SIGNATURE_BINS - 1)
}

pub fn signature(pred: &Predicate, obj: &Object, x_rank: usize) -> Signature {
    match pred {
        Predicate::CategoryEquals(_) => Signature::Category(obj.category.clone()),
        Predicate::ColorEquals(_) => Signature::Color(obj.color.clone()),
        Predicate::SizeEquals(_) => Signature::Size(obj.size),
        Predicate::XLessThan(_) => Signature::XBin(bin(obj.x)),
        Predicate::YLessThan(_) => Signature::YBin(bin(obj.y)),
        Predicate::OrdinalLeftmost | Predicate::OrdinalKthFromLeft(_) => {
            Signature::Rank(x_rank as u32)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleTable {
    pub entries: HashMap<(usize, Signature), AnswerDist>,
    pub fallback: AnswerDist,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    qid: usize,
    signature: Signature,
    probs: AnswerDist,
}

#[derive(Serialize, Deserialize)]
struct TableRepr {
    fallback: AnswerDist,
    entries: Vec<TableEntry>,
}

impl Serialize for OracleTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut entries: Vec<TableEntry> = self
            .entries
            .iter()
            .map(|((qid, sig), p)| TableEntry {
                qid: *qid,
                signature: sig.clone(),
                probs: *p,
            })
            .collect();
        entries.sort_by(|a, b| (a.qid, &a.signature).cmp(&(b.qid, &b.signature)));
        TableRepr {
            fallback: self.fallback,
            entries,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for OracleTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = TableRepr::deserialize(d)?;
        Ok(OracleTable {
            fallback: r.fallback,
            entries: r
                .entries
                .into_iter()
                .map(|e| ((e.qid, e.signature), e.probs))
                .collect(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub budget: u64,
    pub seed: u64,
    pub label_noise: f64,
    pub smoothing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleModel {
    pub kind: OracleKind,
    /// Symmetric answer-flip rate of the true oracle (for estimated models: of the
    /// true oracle they were fitted against).
    pub noise_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<FitMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<OracleTable>,
}

impl OracleModel {
    pub fn true_oracle(noise_rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&noise_rate) {
            return Err(Error::config(format!("noise rate {noise_rate} outside [0, 1)")));
        }
        Ok(Self {
            kind: OracleKind::TrueA,
            noise_rate,
            meta: None,
            table: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::config("noise rate outside [0, 1)"));
        }
        match (&self.kind, &self.table) {
            (OracleKind::TrueA, _) => Ok(()),
            (_, None) => Err(Error::config("estimated oracle without a table")),
            (_, Some(t)) => {
                let rows = t.entries.values().chain(std::iter::once(&t.fallback));
                for p in rows {
                    let s: f64 = p.iter().sum();
                    if (s - 1.0).abs() > 1e-12 || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(Error::config(format!("unnormalized oracle row {p:?}")));
                    }
                }
                Ok(())
            }
        }
    }

    /// `p(a | object, question)`; `x_rank` is the object's 0-based rank from the left.
    pub fn answer_prob_object(&self, q: &Question, obj: &Object, x_rank: usize) -> AnswerDist {
        match &self.table {
            None => noisy(evaluate_object(&q.predicate, obj, Some(x_rank)), self.noise_rate),
            Some(t) => {
                let key = (q.qid, signature(&q.predicate, obj, x_rank));
                *t.entries.get(&key).unwrap_or(&t.fallback)
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct File<'a> {
            format_version: u32,
            #[serde(flatten)]
            model: &'a OracleModel,
        }
        Ok(serde_json::to_string(&File {
            format_version: ORACLE_FORMAT_VERSION,
            model: self,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            format_version: u32,
            #[serde(flatten)]
            model: OracleModel,
        }
        let f: File = serde_json::from_str(s)?;
        if f.format_version != ORACLE_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported oracle format version {}",
                f.format_version
            )));
        }
        f.model.validate()?;
        Ok(f.model)
    }
}

/// Symmetric-flip distribution around the ground-truth answer.
pub fn noisy(truth: Answer, noise_rate: f64) -> AnswerDist {
    let mut p = [noise_rate / 2.0; 3];
    p[truth.index()] = 1.0 - noise_rate;
    p
}

/// `p(a | c, q)` for object `id` of `scene`.
pub fn answer_prob(model: &OracleModel, q: &Question, scene: &Scene, id: usize) -> AnswerDist {
    let ranks = scene.x_ranks();
    model.answer_prob_object(q, &scene.objects[id], ranks[id])
}

pub fn sample_answer(
    model: &OracleModel,
    q: &Question,
    scene: &Scene,
    id: usize,
    seed: u64,
) -> Answer {
    let mut rng = rng::stream(seed, &[tag::ANSWER]);
    draw(&answer_prob(model, q, scene, id), rng.gen())
}

/// Answer distributions for every (question, object) pair of one scene.
#[derive(Clone, Debug)]
pub struct Likelihoods {
    n_objects: usize,
    probs: Vec<AnswerDist>,
}

impl Likelihoods {
    pub fn new(model: &OracleModel, bank: &QuestionBank, scene: &Scene) -> Self {
        let ranks = scene.x_ranks();
        let n_objects = scene.objects.len();
        let mut probs = Vec::with_capacity(bank.size() * n_objects);
        for q in bank.iter() {
            for o in &scene.objects {
                probs.push(model.answer_prob_object(q, o, ranks[o.id]));
            }
        }
        Self { n_objects, probs }
    }

    /// Build directly from a `[qid][object]` table.
    pub fn from_rows(rows: Vec<Vec<AnswerDist>>) -> Self {
        let n_objects = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_objects));
        Self {
            n_objects,
            probs: rows.into_iter().flatten().collect(),
        }
    }

    #[inline]
    pub fn get(&self, qid: usize, obj: usize) -> &AnswerDist {
        &self.probs[qid * self.n_objects + obj]
    }

    pub fn row(&self, qid: usize) -> &[AnswerDist] {
        &self.probs[qid * self.n_objects..(qid + 1) * self.n_objects]
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn n_questions(&self) -> usize {
        if self.n_objects == 0 {
            0
        } else {
            self.probs.len() / self.n_objects
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub kind: OracleKind,
    pub budget: u64,
    /// Probability that a training answer is replaced by one of the other two answers.
    pub label_noise: f64,
    pub smoothing: f64,
}

impl FitSpec {
    pub fn dep(budget: u64) -> Self {
        Self {
            kind: OracleKind::DepA,
            budget,
            label_noise: 0.0,
            smoothing: 1.0,
        }
    }

    pub fn ind(budget: u64, label_noise: f64) -> Self {
        Self {
            kind: OracleKind::IndA,
            budget,
            label_noise,
            smoothing: 1.0,
        }
    }
}

fn table_from_counts(
    counts: HashMap<(usize, Signature), [f64; 3]>,
    marginal: [f64; 3],
    smoothing: f64,
) -> OracleTable {
    let norm = |c: [f64; 3]| {
        let total: f64 = c.iter().sum::<f64>() + 3.0 * smoothing;
        let mut p = c.map(|v| (v + smoothing) / total);
        // renormalize so rows sum to 1 to rounding
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        p
    };
    OracleTable {
        entries: counts.into_iter().map(|(k, c)| (k, norm(c))).collect(),
        fallback: norm(marginal),
    }
}

/// Estimate an answer table from `budget` sampled `(scene, object, question)` tuples whose
/// answers come from `true_model`, optionally corrupted by label noise.
pub fn fit_approximate(
    spec: &FitSpec,
    true_model: &OracleModel,
    corpus: &[Scene],
    bank: &QuestionBank,
    seed: u64,
) -> Result<OracleModel> {
    if corpus.is_empty() {
        return Err(Error::config("oracle fitting needs a non-empty corpus"));
    }
    if bank.is_empty() {
        return Err(Error::config("oracle fitting needs a non-empty bank"));
    }
    if spec.budget == 0 {
        return Err(Error::config("sample budget must be positive"));
    }
    if spec.kind == OracleKind::TrueA {
        return Err(Error::config("trueA is not fitted"));
    }
    if !(0.0..=1.0).contains(&spec.label_noise) || spec.smoothing <= 0.0 {
        return Err(Error::config("invalid label noise or smoothing"));
    }
    let ranks: Vec<Vec<usize>> = corpus.iter().map(Scene::x_ranks).collect();
    let mut rng = rng::stream(seed, &[tag::FIT]);
    let mut counts: HashMap<(usize, Signature), [f64; 3]> = HashMap::new();
    let mut marginal = [0.0; 3];
    for _ in 0..spec.budget {
        let si = rng.gen_range(0..corpus.len());
        let scene = &corpus[si];
        let oi = rng.gen_range(0..scene.objects.len());
        let q = &bank.questions()[rng.gen_range(0..bank.size())];
        let obj = &scene.objects[oi];
        let p = true_model.answer_prob_object(q, obj, ranks[si][oi]);
        let mut a = draw(&p, rng.gen());
        // flip draws are consumed unconditionally so streams stay aligned across noise levels
        let u_flip: f64 = rng.gen();
        let other: bool = rng.gen();
        if u_flip < spec.label_noise {
            let i = a.index();
            a = Answer::from_index((i + if other { 1 } else { 2 }) % 3);
        }
        let key = (q.qid, signature(&q.predicate, obj, ranks[si][oi]));
        counts.entry(key).or_insert([0.0; 3])[a.index()] += 1.0;
        marginal[a.index()] += 1.0;
    }
    Ok(OracleModel {
        kind: spec.kind,
        noise_rate: true_model.noise_rate,
        meta: Some(FitMeta {
            budget: spec.budget,
            seed,
            label_noise: spec.label_noise,
            smoothing: spec.smoothing,
        }),
        table: Some(table_from_counts(counts, marginal, spec.smoothing)),
    })
}

/// The infinite-budget limit of [`fit_approximate`]: every `(scene, object, question)`
/// triple contributes `weight` times its exact answer distribution.
pub fn fit_expected(
    kind: OracleKind,
    true_model: &OracleModel,
    corpus: &[Scene],
    bank: &QuestionBank,
    weight: f64,
    smoothing: f64,
) -> Result<OracleModel> {
    if corpus.is_empty() {
        return Err(Error::config("oracle fitting needs a non-empty corpus"));
    }
    let mut counts: HashMap<(usize, Signature), [f64; 3]> = HashMap::new();
    let mut marginal = [0.0; 3];
    for scene in corpus {
        let ranks = scene.x_ranks();
        for obj in &scene.objects {
            for q in bank.iter() {
                let p = true_model.answer_prob_object(q, obj, ranks[obj.id]);
                let c = counts
                    .entry((q.qid, signature(&q.predicate, obj, ranks[obj.id])))
                    .or_insert([0.0; 3]);
                for i in 0..3 {
                    c[i] += weight * p[i];
                    marginal[i] += weight * p[i];
                }
            }
        }
    }
    Ok(OracleModel {
        kind,
        noise_rate: true_model.noise_rate,
        meta: Some(FitMeta {
            budget: 0,
            seed: 0,
            label_noise: 0.0,
            smoothing,
        }),
        table: Some(table_from_counts(counts, marginal, smoothing)),
    })
}

fn for_each_pair(corpus: &[Scene], bank: &QuestionBank, mut f: impl FnMut(&Question, &Object, usize)) {
    for scene in corpus {
        let ranks = scene.x_ranks();
        for obj in &scene.objects {
            for q in bank.iter() {
                f(q, obj, ranks[obj.id]);
            }
        }
    }
}

/// Mean total-variation distance between `model` and `reference` over every
/// `(scene, object, question)` triple of `corpus`.
pub fn mean_tv_distance(
    model: &OracleModel,
    reference: &OracleModel,
    corpus: &[Scene],
    bank: &QuestionBank,
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for_each_pair(corpus, bank, |q, obj, r| {
        let p = model.answer_prob_object(q, obj, r);
        let t = reference.answer_prob_object(q, obj, r);
        total += 0.5 * p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>();
        n += 1;
    });
    total / n.max(1) as f64
}

/// Expected answer-prediction error of `model` against answers drawn from `true_model`:
/// the mean over triples of `1 - p_true(argmax model)`.
pub fn heldout_answer_error(
    model: &OracleModel,
    true_model: &OracleModel,
    corpus: &[Scene],
    bank: &QuestionBank,
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for_each_pair(corpus, bank, |q, obj, r| {
        let guess = most_likely(&model.answer_prob_object(q, obj, r));
        total += 1.0 - true_model.answer_prob_object(q, obj, r)[guess.index()];
        n += 1;
    });
    total / n.max(1) as f64
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub model: OracleModel,
    pub label_noise: f64,
    pub heldout_error: f64,
}

/// Fit an `indA` model whose held-out answer error is as close as possible to
/// `target_error`, by bisection on the label-noise rate.
pub fn calibrate_ind(
    true_model: &OracleModel,
    train: &[Scene],
    heldout: &[Scene],
    bank: &QuestionBank,
    budget: u64,
    target_error: f64,
    seed: u64,
) -> Result<Calibration> {
    let fit = |noise: f64| -> Result<(OracleModel, f64)> {
        let m = fit_approximate(&FitSpec::ind(budget, noise), true_model, train, bank, seed)?;
        let e = heldout_answer_error(&m, true_model, heldout, bank);
        Ok((m, e))
    };
    let (mut lo, mut hi) = (0.0, 2.0 / 3.0);
    let (m0, e0) = fit(lo)?;
    let mut best = Calibration {
        model: m0,
        label_noise: lo,
        heldout_error: e0,
    };
    if e0 >= target_error {
        log::warn!("indA calibration: error {e0:.4} at zero label noise already exceeds target");
        return Ok(best);
    }
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        let (m, e) = fit(mid)?;
        if (e - target_error).abs() < (best.heldout_error - target_error).abs() {
            best = Calibration {
                model: m,
                label_noise: mid,
                heldout_error: e,
            };
        }
        if e < target_error {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}
