//! Questions as attribute predicates, and the count-based bank sampler.
//!
//! Bank file format (JSON):
//!
//! ```text
//! {"format_version":1,"questions":[
//!   {"qid":0,"template":"x-less-than","argument":0.3,"surface":"Is it in the left 30% of the picture?"},
//!   {"qid":1,"template":"category-equals","argument":"person","surface":"Is it a person?"},
//!   {"qid":2,"template":"ordinal-leftmost","surface":"Is it the furthest left?"}, ...]}
//! ```

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::Answer;
use crate::rng::{self, tag};
use crate::scene::{Object, Scene, Size};

pub const BANK_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "template", content = "argument", rename_all = "kebab-case")]
pub enum Predicate {
    CategoryEquals(String),
    ColorEquals(String),
    SizeEquals(Size),
    XLessThan(f64),
    YLessThan(f64),
    OrdinalLeftmost,
    /// `k` is 1-based: `OrdinalKthFromLeft(2)` is the second object from the left.
    OrdinalKthFromLeft(usize),
}

fn ordinal(k: usize) -> String {
    let suffix = match (k % 10, k % 100) {
        (1, r) if r != 11 => "st",
        (2, r) if r != 12 => "nd",
        (3, r) if r != 13 => "rd",
        _ => "th",
    };
    format!("{k}{suffix}")
}

impl Predicate {
    /// Canonical key used for duplicate detection.
    pub fn key(&self) -> String {
        serde_json::to_string(self).expect("predicate serializes")
    }

    pub fn surface(&self) -> String {
        match self {
            Predicate::CategoryEquals(c) => format!("Is it a {c}?"),
            Predicate::ColorEquals(c) => format!("Is it {c}?"),
            Predicate::SizeEquals(s) => format!("Is it {}?", s.name()),
            Predicate::XLessThan(t) => {
                format!("Is it in the left {:.0}% of the picture?", t * 100.0)
            }
            Predicate::YLessThan(t) => {
                format!("Is it in the top {:.0}% of the picture?", t * 100.0)
            }
            Predicate::OrdinalLeftmost => "Is it the furthest left?".to_string(),
            Predicate::OrdinalKthFromLeft(k) => format!("Is it the {} from the left?", ordinal(*k)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Predicate::XLessThan(t) | Predicate::YLessThan(t) if !(0.0..=1.0).contains(t) => {
                Err(Error::config(format!("threshold {t} outside [0,1]")))
            }
            Predicate::OrdinalKthFromLeft(0) => Err(Error::config("ordinal k must be >= 1")),
            Predicate::CategoryEquals(s) | Predicate::ColorEquals(s) if s.is_empty() => {
                Err(Error::config("empty predicate argument"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub qid: usize,
    #[serde(flatten)]
    pub predicate: Predicate,
}

impl Question {
    pub fn new(qid: usize, predicate: Predicate) -> Self {
        Self { qid, predicate }
    }

    pub fn surface(&self) -> String {
        self.predicate.surface()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct QuestionBank {
    questions: Vec<Question>,
}

impl QuestionBank {
    /// Build a bank from predicates; qids are assigned in order.
    pub fn from_predicates(preds: impl IntoIterator<Item = Predicate>) -> Result<Self> {
        let questions = preds
            .into_iter()
            .enumerate()
            .map(|(qid, p)| Question::new(qid, p))
            .collect();
        Self::new(questions)
    }

    pub fn new(questions: Vec<Question>) -> Result<Self> {
        let mut keys = BTreeSet::new();
        for (i, q) in questions.iter().enumerate() {
            if q.qid != i {
                return Err(Error::config(format!("question at position {i} has qid {}", q.qid)));
            }
            q.predicate.validate()?;
            if !keys.insert(q.predicate.key()) {
                return Err(Error::config(format!("duplicate question {}", q.predicate.key())));
            }
        }
        Ok(Self { questions })
    }

    pub fn size(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn get(&self, qid: usize) -> Option<&Question> {
        self.questions.get(qid)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Question> {
        self.questions.iter()
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Rec<'a> {
            qid: usize,
            #[serde(flatten)]
            predicate: &'a Predicate,
            surface: String,
        }
        #[derive(Serialize)]
        struct File<'a> {
            format_version: u32,
            questions: Vec<Rec<'a>>,
        }
        let f = File {
            format_version: BANK_FORMAT_VERSION,
            questions: self
                .questions
                .iter()
                .map(|q| Rec {
                    qid: q.qid,
                    predicate: &q.predicate,
                    surface: q.surface(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Rec {
            qid: usize,
            #[serde(flatten)]
            predicate: Predicate,
        }
        #[derive(Deserialize)]
        struct File {
            format_version: u32,
            questions: Vec<Rec>,
        }
        let f: File = serde_json::from_str(s)?;
        if f.format_version != BANK_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported bank format version {}",
                f.format_version
            )));
        }
        Self::new(
            f.questions
                .into_iter()
                .map(|r| Question::new(r.qid, r.predicate))
                .collect(),
        )
    }
}

/// Ground-truth answer of `pred` about object `id` of `scene`.
///
/// Ordinal predicates depend on the other objects, so the scene is needed.
pub fn evaluate_in_scene(pred: &Predicate, scene: &Scene, id: usize) -> Answer {
    match pred {
        Predicate::OrdinalLeftmost => Answer::from_bool(scene.x_ranks()[id] == 0),
        Predicate::OrdinalKthFromLeft(k) => Answer::from_bool(scene.x_ranks()[id] + 1 == *k),
        _ => evaluate_object(pred, &scene.objects[id], None),
    }
}

/// Answer for a single object. Ordinal predicates need the object's rank from the left
/// (0-based); pass `None` only for non-ordinal predicates.
pub fn evaluate_object(pred: &Predicate, obj: &Object, x_rank: Option<usize>) -> Answer {
    match pred {
        Predicate::CategoryEquals(c) => Answer::from_bool(obj.category == *c),
        Predicate::ColorEquals(c) => match &obj.color {
            Some(col) => Answer::from_bool(col == c),
            None => Answer::Na,
        },
        Predicate::SizeEquals(s) => Answer::from_bool(obj.size == *s),
        Predicate::XLessThan(t) => Answer::from_bool(obj.x < *t),
        Predicate::YLessThan(t) => Answer::from_bool(obj.y < *t),
        Predicate::OrdinalLeftmost => {
            Answer::from_bool(x_rank.expect("ordinal predicate needs a rank") == 0)
        }
        Predicate::OrdinalKthFromLeft(k) => {
            Answer::from_bool(x_rank.expect("ordinal predicate needs a rank") + 1 == *k)
        }
    }
}

/// Ground-truth answers for every (question, object) pair of a scene, `[qid][object]`.
pub fn truth_table(bank: &QuestionBank, scene: &Scene) -> Vec<Vec<Answer>> {
    let ranks = scene.x_ranks();
    bank.iter()
        .map(|q| {
            scene
                .objects
                .iter()
                .map(|o| evaluate_object(&q.predicate, o, Some(ranks[o.id])))
                .collect()
        })
        .collect()
}

/// Candidate predicates instantiated over the attribute values observed in `corpus`.
pub fn candidate_pool(corpus: &[Scene]) -> Vec<Predicate> {
    let mut cats = BTreeSet::new();
    let mut colors = BTreeSet::new();
    let mut sizes = BTreeSet::new();
    let mut max_m = 0;
    for s in corpus {
        max_m = max_m.max(s.objects.len());
        for o in &s.objects {
            cats.insert(o.category.clone());
            if let Some(c) = &o.color {
                colors.insert(c.clone());
            }
            sizes.insert(o.size);
        }
    }
    let thresholds: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
    let mut pool = Vec::new();
    pool.extend(cats.into_iter().map(Predicate::CategoryEquals));
    pool.extend(colors.into_iter().map(Predicate::ColorEquals));
    pool.extend(sizes.into_iter().map(Predicate::SizeEquals));
    pool.extend(thresholds.iter().map(|&t| Predicate::XLessThan(t)));
    pool.extend(thresholds.iter().map(|&t| Predicate::YLessThan(t)));
    pool.push(Predicate::OrdinalLeftmost);
    pool.extend((2..=max_m).map(Predicate::OrdinalKthFromLeft));
    pool
}

/// Answers of `pred` over every (scene, object) pair of the corpus, flattened in corpus order.
pub fn answer_vector(pred: &Predicate, corpus: &[Scene]) -> Vec<Answer> {
    let mut out = Vec::new();
    for s in corpus {
        let ranks = s.x_ranks();
        out.extend(
            s.objects
                .iter()
                .map(|o| evaluate_object(pred, o, Some(ranks[o.id]))),
        );
    }
    out
}

/// Fraction of positions where two answer vectors agree.
pub fn agreement(a: &[Answer], b: &[Answer]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    same as f64 / a.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankParams {
    pub target_size: usize,
    pub agreement_cap: f64,
    pub min_count: usize,
}

impl Default for BankParams {
    fn default() -> Self {
        Self {
            target_size: 40,
            agreement_cap: 0.95,
            min_count: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BankSelection {
    pub bank: QuestionBank,
    /// Set when fewer than `target_size` questions survived the filters.
    pub infeasible: bool,
    pub pool_size: usize,
}

/// Count-based bank sampler over an explicit candidate list.
///
/// Candidates with fewer than `min_count` informative (non-NA) answers are dropped.
/// The rest are visited by descending informative count (seeded shuffle breaks ties)
/// and admitted when their answer agreement with every admitted question is at most
/// `agreement_cap`. Agreement is measured over all (scene, object) pairs.
pub fn sample_bank_from(
    candidates: Vec<Predicate>,
    corpus: &[Scene],
    params: &BankParams,
    seed: u64,
) -> Result<BankSelection> {
    if corpus.is_empty() {
        return Err(Error::config("bank sampling needs a non-empty corpus"));
    }
    if !(params.agreement_cap > 0.0 && params.agreement_cap < 1.0) {
        return Err(Error::config("agreement cap must lie in (0, 1)"));
    }
    let pool_size = candidates.len();
    let mut scored: Vec<(Predicate, Vec<Answer>, usize)> = candidates
        .into_iter()
        .map(|p| {
            let v = answer_vector(&p, corpus);
            let informative = v.iter().filter(|a| **a != Answer::Na).count();
            (p, v, informative)
        })
        .filter(|(_, _, n)| *n >= params.min_count)
        .collect();
    let mut rng = rng::stream(seed, &[tag::BANK]);
    scored.shuffle(&mut rng);
    scored.sort_by(|a, b| b.2.cmp(&a.2));

    let mut admitted: Vec<(Predicate, Vec<Answer>)> = Vec::new();
    for (p, v, _) in scored {
        if admitted.len() >= params.target_size {
            break;
        }
        if admitted.iter().any(|(q, _)| q.key() == p.key()) {
            continue;
        }
        if admitted
            .iter()
            .all(|(_, w)| agreement(&v, w) <= params.agreement_cap)
        {
            admitted.push((p, v));
        }
    }
    let infeasible = admitted.len() < params.target_size;
    if infeasible {
        log::warn!(
            "bank sampler: only {} of {} requested questions survived",
            admitted.len(),
            params.target_size
        );
    }
    Ok(BankSelection {
        bank: QuestionBank::from_predicates(admitted.into_iter().map(|(p, _)| p))?,
        infeasible,
        pool_size,
    })
}

/// Count-based bank sampler over the template pool instantiated from `corpus`.
pub fn sample_bank(corpus: &[Scene], params: &BankParams, seed: u64) -> Result<BankSelection> {
    sample_bank_from(candidate_pool(corpus), corpus, params, seed)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BankAudit {
    pub pairs_checked: usize,
    pub max_agreement: f64,
    pub min_informative: usize,
    /// `(qid_a, qid_b, agreement)` for every pair above the cap.
    pub agreement_violations: Vec<(usize, usize, f64)>,
    /// qids with too few informative answers.
    pub count_violations: Vec<usize>,
}

impl BankAudit {
    pub fn passed(&self) -> bool {
        self.agreement_violations.is_empty() && self.count_violations.is_empty()
    }
}

/// Exhaustive recount of pairwise agreement and informative counts, straight from
/// the per-scene ground truth.
pub fn audit_bank(
    bank: &QuestionBank,
    corpus: &[Scene],
    agreement_cap: f64,
    min_count: usize,
) -> BankAudit {
    let n = bank.size();
    let mut same = vec![0usize; n * n];
    let mut informative = vec![0usize; n];
    let mut total = 0usize;
    for scene in corpus {
        let truth = truth_table(bank, scene);
        for c in 0..scene.objects.len() {
            total += 1;
            for i in 0..n {
                if truth[i][c] != Answer::Na {
                    informative[i] += 1;
                }
                for j in (i + 1)..n {
                    if truth[i][c] == truth[j][c] {
                        same[i * n + j] += 1;
                    }
                }
            }
        }
    }
    let mut audit = BankAudit {
        pairs_checked: n * n.saturating_sub(1) / 2,
        max_agreement: 0.0,
        min_informative: informative.iter().copied().min().unwrap_or(0),
        agreement_violations: Vec::new(),
        count_violations: Vec::new(),
    };
    for i in 0..n {
        if informative[i] < min_count {
            audit.count_violations.push(i);
        }
        for j in (i + 1)..n {
            let a = same[i * n + j] as f64 / total.max(1) as f64;
            audit.max_agreement = audit.max_agreement.max(a);
            if a > agreement_cap {
                audit.agreement_violations.push((i, j, a));
            }
        }
    }
    audit
}
