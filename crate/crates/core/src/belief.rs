//! Posterior over candidate objects, kept in log space.
//!
//! The posterior after a history is the prior times the product of answer
//! likelihoods. The question itself carries no evidence about the target
//! because the questioner cannot see it, so only `p(a | c, q)` enters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{answer_prob, Answer, AnswerDist, Likelihoods, OracleModel};
use crate::qbank::QuestionBank;
use crate::scene::Scene;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub qid: usize,
    pub answer: Answer,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct History {
    pub turns: Vec<Turn>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn push(&mut self, qid: usize, answer: Answer) {
        self.turns.push(Turn { qid, answer });
    }

    pub fn with(&self, qid: usize, answer: Answer) -> History {
        let mut h = self.clone();
        h.push(qid, answer);
        h
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Turn> {
        self.turns.iter()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    log_weights: Vec<f64>,
    scene_ref: u64,
    turns: usize,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Belief {
    /// Uniform prior over the scene's objects.
    pub fn uniform(n: usize, scene_ref: u64) -> Self {
        let lw = -(n as f64).ln();
        Self {
            log_weights: vec![lw; n],
            scene_ref,
            turns: 0,
        }
    }

    /// Build from unnormalized log weights. Fails when every weight is `-inf`
    /// or any weight is `+inf`/NaN.
    pub fn from_log_weights(log_weights: Vec<f64>, scene_ref: u64) -> Result<Self> {
        let mut b = Self {
            log_weights,
            scene_ref,
            turns: 0,
        };
        b.normalize()?;
        Ok(b)
    }

    fn normalize(&mut self) -> Result<()> {
        if self
            .log_weights
            .iter()
            .any(|w| w.is_nan() || *w == f64::INFINITY)
        {
            return Err(Error::DegenerateBelief { turns: self.turns });
        }
        let z = log_sum_exp(&self.log_weights);
        if z == f64::NEG_INFINITY {
            return Err(Error::DegenerateBelief { turns: self.turns });
        }
        self.log_weights.iter_mut().for_each(|w| *w -= z);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn scene_ref(&self) -> u64 {
        self.scene_ref
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn prob(&self, c: usize) -> f64 {
        self.log_weights[c].exp()
    }

    /// Entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.log_weights
            .iter()
            .filter(|w| w.is_finite())
            .map(|w| -w.exp() * w)
            .sum()
    }

    /// Most probable object; ties go to the smallest id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.log_weights.iter().enumerate() {
            if *w > self.log_weights[best] {
                best = i;
            }
        }
        best
    }

    /// Bayes update with an explicit per-object likelihood row `p(. | c, q)`.
    pub fn update_with_row(&self, row: &[AnswerDist], a: Answer) -> Result<Belief> {
        if row.len() != self.log_weights.len() {
            return Err(Error::Dimension {
                expected: self.log_weights.len(),
                got: row.len(),
            });
        }
        // a likelihood shared by every object cancels in the normalization
        let v = row.first().map_or(0.0, |p| p[a.index()]);
        if v > 0.0 && row.iter().all(|p| p[a.index()] == v) {
            return Ok(Belief {
                log_weights: self.log_weights.clone(),
                scene_ref: self.scene_ref,
                turns: self.turns + 1,
            });
        }
        let mut next = Belief {
            log_weights: self
                .log_weights
                .iter()
                .zip(row)
                .map(|(w, p)| w + p[a.index()].ln())
                .collect(),
            scene_ref: self.scene_ref,
            turns: self.turns + 1,
        };
        next.normalize()?;
        Ok(next)
    }

    pub fn update_with(&self, lik: &Likelihoods, qid: usize, a: Answer) -> Result<Belief> {
        self.update_with_row(lik.row(qid), a)
    }
}

pub fn init_prior(scene: &Scene) -> Belief {
    Belief::uniform(scene.objects.len(), scene.scene_id)
}

/// One Bayes step: `log w[c] += ln p(a | c, q)`, then renormalize.
pub fn update(
    belief: &Belief,
    model: &OracleModel,
    bank: &QuestionBank,
    qid: usize,
    a: Answer,
    scene: &Scene,
) -> Result<Belief> {
    let q = bank
        .get(qid)
        .ok_or_else(|| Error::config(format!("qid {qid} not in bank")))?;
    let row: Vec<AnswerDist> = (0..scene.objects.len())
        .map(|c| answer_prob(model, q, scene, c))
        .collect();
    belief.update_with_row(&row, a)
}

/// Posterior from the prior and the full product of likelihoods, normalized once.
pub fn batch_posterior(
    scene: &Scene,
    model: &OracleModel,
    bank: &QuestionBank,
    history: &History,
) -> Result<Belief> {
    batch_posterior_with(scene, &Likelihoods::new(model, bank, scene), history)
}

pub fn batch_posterior_with(scene: &Scene, lik: &Likelihoods, history: &History) -> Result<Belief> {
    let n = scene.objects.len();
    let mut lw = vec![-(n as f64).ln(); n];
    for t in history.iter() {
        for (c, w) in lw.iter_mut().enumerate() {
            *w += lik.get(t.qid, c)[t.answer.index()].ln();
        }
    }
    let mut b = Belief {
        log_weights: lw,
        scene_ref: scene.scene_id,
        turns: history.len(),
    };
    b.normalize()?;
    Ok(b)
}
