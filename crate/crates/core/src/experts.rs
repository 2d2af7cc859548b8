//! Analytic experts.
//!
//! * IGE picks the question maximizing the mutual information between the target
//!   identity and the answer under the current belief.
//! * TPE knows the target and picks the question whose most likely answer (for the
//!   target) leaves the most posterior mass on it.
//!
//! Both are one-step greedy. Scores within [`TIE_TOLERANCE`] of the maximum count as
//! tied, and ties go to the smallest qid.

use serde::{Deserialize, Serialize};

use crate::belief::Belief;
use crate::error::{Error, Result};
use crate::oracle::{most_likely, AnswerDist, Likelihoods, OracleModel};
use crate::qbank::QuestionBank;
use crate::scene::Scene;

pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExpertKind {
    #[serde(rename = "IGE")]
    Ige,
    #[serde(rename = "TPE")]
    Tpe,
}

/// Which expert acts at each round (1-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSchedule {
    pub rounds: Vec<ExpertKind>,
}

impl ExpertSchedule {
    /// IGE for the first `horizon - 1` rounds, TPE for the last.
    pub fn mixture(horizon: usize) -> Self {
        let mut rounds = vec![ExpertKind::Ige; horizon.saturating_sub(1)];
        rounds.push(ExpertKind::Tpe);
        Self { rounds }
    }

    pub fn all(kind: ExpertKind, horizon: usize) -> Self {
        Self {
            rounds: vec![kind; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.rounds.len()
    }

    pub fn kind_at(&self, round: usize) -> Result<ExpertKind> {
        if round == 0 || round > self.rounds.len() {
            return Err(Error::Schedule {
                round,
                len: self.rounds.len(),
            });
        }
        Ok(self.rounds[round - 1])
    }
}

impl Default for ExpertSchedule {
    fn default() -> Self {
        Self::mixture(5)
    }
}

fn entropy3(p: &AnswerDist) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Mutual information `I[C; A | q]` in nats for belief probabilities `probs` and
/// likelihood row `row[c] = p(. | c, q)`. Computed as `H(A) - H(A | C)`.
pub fn information_gain_row(probs: &[f64], row: &[AnswerDist]) -> f64 {
    let mut marginal = [0.0; 3];
    let mut cond = 0.0;
    for (p, l) in probs.iter().zip(row) {
        if *p == 0.0 {
            continue;
        }
        for a in 0..3 {
            marginal[a] += p * l[a];
        }
        cond += p * entropy3(l);
    }
    (entropy3(&marginal) - cond).max(0.0)
}

pub fn information_gain(
    belief: &Belief,
    model: &OracleModel,
    bank: &QuestionBank,
    qid: usize,
    scene: &Scene,
) -> f64 {
    let lik = Likelihoods::new(model, bank, scene);
    information_gain_row(&belief.probs(), lik.row(qid))
}

/// Smallest index whose score is within [`TIE_TOLERANCE`] of the maximum.
pub fn argmax_with_ties(scores: &[f64]) -> usize {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .position(|&s| s >= max - TIE_TOLERANCE)
        .unwrap_or(0)
}

/// Every index whose score is within [`TIE_TOLERANCE`] of the maximum.
pub fn argmax_set(scores: &[f64]) -> Vec<usize> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..scores.len())
        .filter(|&i| scores[i] >= max - TIE_TOLERANCE)
        .collect()
}

pub fn ige_scores(belief: &Belief, lik: &Likelihoods) -> Vec<f64> {
    let probs = belief.probs();
    (0..lik.n_questions())
        .map(|q| information_gain_row(&probs, lik.row(q)))
        .collect()
}

pub fn ige_select_with(belief: &Belief, lik: &Likelihoods) -> usize {
    argmax_with_ties(&ige_scores(belief, lik))
}

pub fn ige_select(belief: &Belief, model: &OracleModel, bank: &QuestionBank, scene: &Scene) -> usize {
    ige_select_with(belief, &Likelihoods::new(model, bank, scene))
}

/// Posterior mass left on `target` after asking each question and hearing the answer
/// `answer_lik` considers most likely for the target. The posterior itself uses `lik`.
pub fn tpe_scores(
    belief: &Belief,
    lik: &Likelihoods,
    answer_lik: &Likelihoods,
    target: usize,
) -> Vec<f64> {
    let probs = belief.probs();
    (0..lik.n_questions())
        .map(|q| {
            let a = most_likely(answer_lik.get(q, target)).index();
            let row = lik.row(q);
            let z: f64 = probs.iter().zip(row).map(|(p, l)| p * l[a]).sum();
            if z > 0.0 {
                probs[target] * row[target][a] / z
            } else {
                0.0
            }
        })
        .collect()
}

pub fn tpe_select_with(
    belief: &Belief,
    lik: &Likelihoods,
    answer_lik: &Likelihoods,
    target: usize,
) -> usize {
    argmax_with_ties(&tpe_scores(belief, lik, answer_lik, target))
}

/// TPE with a single model for both the posterior and the anticipated answer.
pub fn tpe_select(
    belief: &Belief,
    model: &OracleModel,
    bank: &QuestionBank,
    scene: &Scene,
    target: usize,
) -> usize {
    let lik = Likelihoods::new(model, bank, scene);
    tpe_select_with(belief, &lik, &lik, target)
}

/// Scores of the scheduled expert at `round` (1-based).
pub fn expert_scores(
    schedule: &ExpertSchedule,
    round: usize,
    belief: &Belief,
    lik: &Likelihoods,
    answer_lik: &Likelihoods,
    target: usize,
) -> Result<Vec<f64>> {
    Ok(match schedule.kind_at(round)? {
        ExpertKind::Ige => ige_scores(belief, lik),
        ExpertKind::Tpe => tpe_scores(belief, lik, answer_lik, target),
    })
}

/// The scheduled expert's question at `round` (1-based).
pub fn expert_action(
    schedule: &ExpertSchedule,
    round: usize,
    belief: &Belief,
    lik: &Likelihoods,
    answer_lik: &Likelihoods,
    target: usize,
) -> Result<usize> {
    let scores = expert_scores(schedule, round, belief, lik, answer_lik, target)?;
    Ok(argmax_with_ties(&scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::Answer;

    fn det(truth: &[bool]) -> Vec<AnswerDist> {
        truth
            .iter()
            .map(|&t| if t { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] })
            .collect()
    }

    #[test]
    fn constant_answer_has_zero_gain() {
        let row = vec![[0.3, 0.5, 0.2]; 4];
        assert_eq!(information_gain_row(&[0.25; 4], &row), 0.0);
    }

    #[test]
    fn perfect_binary_split_gains_ln2() {
        let ig = information_gain_row(&[0.5, 0.5], &det(&[true, false]));
        assert!((ig - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn one_in_four_split() {
        let ig = information_gain_row(&[0.25; 4], &det(&[true, false, false, false]));
        // brute-force double sum: only the c terms with p(a|c) = 1 contribute
        let mut brute = 0.0;
        let pa = [0.25, 0.75];
        for (c, truth) in [true, false, false, false].iter().enumerate() {
            let a = if *truth { 0 } else { 1 };
            let _ = c;
            brute += 0.25 * (1.0f64 / pa[a]).ln();
        }
        assert!((ig - brute).abs() < 1e-12);
        assert!((ig - 0.562335).abs() < 1e-6);
    }

    #[test]
    fn identifying_question_wins_tpe() {
        let lik = Likelihoods::from_rows(vec![
            det(&[true, true, false, false]),
            det(&[false, false, true, false]),
            det(&[true, false, true, false]),
        ]);
        let b = Belief::uniform(4, 0);
        assert_eq!(tpe_select_with(&b, &lik, &lik, 2), 1);
        let after = b.update_with(&lik, 1, Answer::Yes).unwrap();
        assert_eq!(after.prob(2), 1.0);
    }

    #[test]
    fn constant_questions_tie_to_qid_zero() {
        let lik = Likelihoods::from_rows(vec![vec![[0.5, 0.5, 0.0]; 3]; 4]);
        let b = Belief::uniform(3, 0);
        assert_eq!(tpe_select_with(&b, &lik, &lik, 1), 0);
        assert_eq!(ige_select_with(&b, &lik), 0);
    }

    #[test]
    fn schedule_dispatch() {
        let s = ExpertSchedule::default();
        assert_eq!(s.kind_at(1).unwrap(), ExpertKind::Ige);
        assert_eq!(s.kind_at(4).unwrap(), ExpertKind::Ige);
        assert_eq!(s.kind_at(5).unwrap(), ExpertKind::Tpe);
        assert!(matches!(s.kind_at(6), Err(Error::Schedule { round: 6, len: 5 })));
        assert!(s.kind_at(0).is_err());
    }

    #[test]
    fn argmax_set_collects_ties() {
        assert_eq!(argmax_set(&[0.1, 0.5, 0.5 - 1e-14, 0.2, 0.5 - 1e-6]), vec![1, 2]);
    }

    #[test]
    fn single_question_bank() {
        let lik = Likelihoods::from_rows(vec![det(&[true, false, false])]);
        let b = Belief::uniform(3, 0);
        assert_eq!(ige_select_with(&b, &lik), 0);
    }

    #[test]
    fn only_informative_question_is_chosen() {
        let lik = Likelihoods::from_rows(vec![
            vec![[0.4, 0.6, 0.0]; 3],
            vec![[0.4, 0.6, 0.0]; 3],
            det(&[true, false, false]),
            vec![[0.1, 0.1, 0.8]; 3],
        ]);
        assert_eq!(ige_select_with(&Belief::uniform(3, 0), &lik), 2);
    }
}
