//! Imitation (DAgger) from the analytic experts, REINFORCE refinement, and
//! progressive horizon extension.
//!
//! The DAgger mixture weights the learner by `beta_i`:
//! `pi_hat_i = beta_i * pi_theta + (1 - beta_i) * pi_expert`, with the default
//! `beta_i = 1 - 0.5^(i-1)`, so the first iteration follows the expert exactly.
//!
//! Expert computations in the imitation phase use the true oracle. In the RL phase
//! the environment answers with the true oracle while the questioner's guess (and so
//! the reward) uses its approximate model.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{Belief, History};
use crate::engine::{play, Decode, Game, OracleWiring, Questioner, SceneSource};
use crate::error::{Error, Result};
use crate::experts::{argmax_set, argmax_with_ties, expert_scores, ExpertSchedule};
use crate::oracle::OracleModel;
use crate::policy::{argmax, sample_index, Checkpoint, FeatureSchema, Observation, PolicyParams};
use crate::qbank::QuestionBank;
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum BetaSchedule {
    /// `beta_i = 1 - 0.5^(i-1)`.
    Geometric,
    Constant(f64),
    /// Explicit per-iteration values; the last one repeats.
    List(Vec<f64>),
}

impl BetaSchedule {
    /// `beta` for iteration `i` (1-based).
    pub fn beta(&self, i: usize) -> f64 {
        match self {
            BetaSchedule::Geometric => 1.0 - 0.5f64.powi(i as i32 - 1),
            BetaSchedule::Constant(b) => *b,
            BetaSchedule::List(v) => v[(i - 1).min(v.len() - 1)],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..=1.0).contains(&b);
        match self {
            BetaSchedule::Geometric => Ok(()),
            BetaSchedule::Constant(b) if ok(*b) => Ok(()),
            BetaSchedule::List(v) if !v.is_empty() && v.iter().all(|b| ok(*b)) => Ok(()),
            _ => Err(Error::config("beta values must lie in [0, 1]")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mixing {
    /// A fresh learner/expert coin each round.
    PerRound,
    /// One coin per episode.
    PerEpisode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ILConfig {
    pub iterations: usize,
    pub episodes: usize,
    pub horizon: usize,
    pub beta: BetaSchedule,
    pub mixing: Mixing,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ILConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            episodes: 200,
            horizon: 5,
            beta: BetaSchedule::Geometric,
            mixing: Mixing::PerRound,
            epochs: 3,
            batch_size: 32,
            lr: 0.2,
            seed: 0,
        }
    }
}

impl ILConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.episodes == 0 || self.horizon == 0 {
            return Err(Error::config("IL iterations, episodes and horizon must be positive"));
        }
        if self.batch_size == 0 || !(self.lr >= 0.0) {
            return Err(Error::config("IL batch size must be positive and lr non-negative"));
        }
        self.beta.validate()
    }
}

/// Every `(observation, expert qid)` pair seen so far. Append-only.
#[derive(Clone, Debug, Default)]
pub struct AggregatedDataset {
    pairs: Vec<(Observation, usize)>,
}

impl AggregatedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(Observation, usize)] {
        &self.pairs
    }

    pub fn extend(&mut self, more: impl IntoIterator<Item = (Observation, usize)>) {
        self.pairs.extend(more);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ILMetrics {
    pub iteration: usize,
    pub beta: f64,
    pub episodes: usize,
    pub discarded: usize,
    pub dataset_size: usize,
    /// Fraction of visited states where the rollout policy's argmax is one of the
    /// expert's (tied) best questions.
    pub agreement: f64,
    /// Same, but requiring the expert's tie-broken qid exactly.
    pub exact_agreement: f64,
    /// Mean cross-entropy over the last epoch.
    pub loss: f64,
}

pub struct ILOutcome {
    pub params: PolicyParams,
    pub dataset: AggregatedDataset,
    pub metrics: Vec<ILMetrics>,
}

struct Visit {
    obs: Observation,
    expert: usize,
    learner: usize,
    /// Learner argmax is among the expert's tied best questions.
    in_set: bool,
}

#[allow(clippy::too_many_arguments)]
fn il_episode(
    game: &Game<'_>,
    schema: &FeatureSchema,
    schedule: &ExpertSchedule,
    params: &PolicyParams,
    beta: f64,
    mixing: Mixing,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Visit>> {
    let mut answers = rng::stream(seed, &[tag::ANSWER]);
    let mut coins = rng::stream(seed, &[tag::MIXTURE]);
    let mut choices = rng::stream(seed, &[tag::POLICY]);
    let episode_coin: f64 = coins.gen();
    let mut history = History::new();
    let mut belief = Belief::uniform(game.scene.len(), game.scene.scene_id);
    let mut visits = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let obs = game.observation(schema, &history, t);
        let scores = expert_scores(schedule, t, &belief, &game.model, &game.env, game.target)?;
        let expert = argmax_with_ties(&scores);
        let p = params.distribution(&obs, None)?;
        let learner = argmax(&p);
        let in_set = argmax_set(&scores).contains(&learner);
        let coin = match mixing {
            Mixing::PerRound => coins.gen(),
            Mixing::PerEpisode => episode_coin,
        };
        let u: f64 = choices.gen();
        let qid = if coin < beta { sample_index(&p, u) } else { expert };
        let a = game.answer(qid, answers.gen());
        history.push(qid, a);
        belief = belief.update_with(&game.model, qid, a)?;
        visits.push(Visit {
            obs,
            expert,
            learner,
            in_set,
        });
    }
    Ok(visits)
}

/// Minibatch SGD over `data` for `epochs` passes in a seeded order; returns the mean
/// loss of the final pass.
pub fn fit_classifier(
    params: &mut PolicyParams,
    data: &[(Observation, usize)],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last = f64::NAN;
    for epoch in 0..epochs {
        order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let (g, loss) = parallel_ce_grad(params, data, chunk)?;
            params.add_scaled(&g, -lr);
            total += loss * chunk.len() as f64;
        }
        last = total / data.len().max(1) as f64;
    }
    Ok(last)
}

const GRAD_CHUNK: usize = 8;

fn parallel_ce_grad(
    params: &PolicyParams,
    data: &[(Observation, usize)],
    idx: &[usize],
) -> Result<(PolicyParams, f64)> {
    let parts: Vec<(PolicyParams, f64)> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|c| {
            let batch: Vec<(Observation, usize)> = c.iter().map(|&i| data[i].clone()).collect();
            let (mut g, loss) = params.cross_entropy_grad(&batch)?;
            let w = c.len() as f64 / idx.len() as f64;
            g.scale(w);
            Ok((g, loss * w))
        })
        .collect::<Result<_>>()?;
    let mut g = params.zeros_like();
    let mut loss = 0.0;
    for (pg, l) in &parts {
        g.add_scaled(pg, 1.0);
        loss += l;
    }
    Ok((g, loss))
}

/// DAgger: roll out the beta-mixture, label every visited state with the expert
/// action, aggregate, and retrain on everything collected so far.
#[allow(clippy::too_many_arguments)]
pub fn dagger_train(
    config: &ILConfig,
    schedule: &ExpertSchedule,
    true_oracle: &OracleModel,
    bank: &QuestionBank,
    scenes: &dyn SceneSource,
    schema: &FeatureSchema,
    init: PolicyParams,
) -> Result<ILOutcome> {
    config.validate()?;
    if schedule.horizon() < config.horizon {
        return Err(Error::Schedule {
            round: config.horizon,
            len: schedule.horizon(),
        });
    }
    check_dims(&init, schema)?;
    let wiring = OracleWiring {
        environment: true_oracle,
        questioner: true_oracle,
    };
    let mut params = init;
    let mut dataset = AggregatedDataset::default();
    let mut metrics = Vec::with_capacity(config.iterations);
    for i in 1..=config.iterations {
        let beta = config.beta.beta(i);
        let snapshot = &params;
        let episodes: Vec<Option<Vec<Visit>>> = (0..config.episodes)
            .into_par_iter()
            .map(|e| {
                let seed = rng::derive(config.seed, &[tag::IL, i as u64, e as u64]);
                let game = Game::sample(scenes, seed, bank, wiring, Some(schema))?;
                match il_episode(
                    &game,
                    schema,
                    schedule,
                    snapshot,
                    beta,
                    config.mixing,
                    config.horizon,
                    seed,
                ) {
                    Ok(v) => Ok(Some(v)),
                    Err(Error::DegenerateBelief { turns }) => {
                        log::warn!("IL iteration {i} episode {e}: degenerate belief after {turns} turns; discarded");
                        Ok(None)
                    }
                    Err(err) => Err(err),
                }
            })
            .collect::<Result<_>>()?;
        let discarded = episodes.iter().filter(|e| e.is_none()).count();
        let visits: Vec<Visit> = episodes.into_iter().flatten().flatten().collect();
        let n_visits = visits.len().max(1) as f64;
        let agreement = visits.iter().filter(|v| v.in_set).count() as f64 / n_visits;
        let exact_agreement = visits.iter().filter(|v| v.learner == v.expert).count() as f64 / n_visits;
        dataset.extend(visits.into_iter().map(|v| (v.obs, v.expert)));
        let loss = if dataset.is_empty() {
            f64::NAN
        } else {
            fit_classifier(
                &mut params,
                dataset.pairs(),
                config.epochs,
                config.batch_size,
                config.lr,
                rng::derive(config.seed, &[tag::IL, i as u64, tag::FIT]),
            )?
        };
        log::info!(
            "IL {i}/{}: beta {beta:.3} |D| {} agreement {agreement:.4} loss {loss:.4}",
            config.iterations,
            dataset.len()
        );
        metrics.push(ILMetrics {
            iteration: i,
            beta,
            episodes: config.episodes - discarded,
            discarded,
            dataset_size: dataset.len(),
            agreement,
            exact_agreement,
            loss,
        });
    }
    Ok(ILOutcome {
        params,
        dataset,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub states: usize,
    /// Learner argmax among the expert's tied best questions.
    pub in_argmax_set: f64,
    /// Learner argmax equal to the expert's tie-broken qid.
    pub exact: f64,
    /// `in_argmax_set` per round.
    pub per_round: Vec<f64>,
}

/// Agreement between the learner's argmax and the expert on states visited by the
/// learner's own (sampled) rollouts. Experts use `expert_oracle`.
#[allow(clippy::too_many_arguments)]
pub fn imitation_fidelity(
    params: &PolicyParams,
    schema: &FeatureSchema,
    schedule: &ExpertSchedule,
    expert_oracle: &OracleModel,
    bank: &QuestionBank,
    scenes: &dyn SceneSource,
    horizon: usize,
    episodes: usize,
    seed: u64,
) -> Result<Fidelity> {
    let wiring = OracleWiring {
        environment: expert_oracle,
        questioner: expert_oracle,
    };
    let runs: Vec<Vec<Visit>> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let s = rng::derive(seed, &[tag::EVAL, e as u64]);
            let game = Game::sample(scenes, s, bank, wiring, Some(schema))?;
            il_episode(&game, schema, schedule, params, 1.0, Mixing::PerRound, horizon, s)
        })
        .collect::<Result<_>>()?;
    let mut hits = vec![0usize; horizon];
    let mut exact = 0;
    for run in &runs {
        for (t, v) in run.iter().enumerate() {
            hits[t] += v.in_set as usize;
            exact += (v.learner == v.expert) as usize;
        }
    }
    let states = runs.len() * horizon;
    let n = states.max(1) as f64;
    Ok(Fidelity {
        states,
        in_argmax_set: hits.iter().sum::<usize>() as f64 / n,
        exact: exact as f64 / n,
        per_round: hits
            .iter()
            .map(|&h| h as f64 / runs.len().max(1) as f64)
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    #[default]
    None,
    /// Subtract the batch mean reward. Not part of plain REINFORCE.
    MeanReward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RLConfig {
    pub iterations: usize,
    pub batch: usize,
    pub horizon: usize,
    pub lr: f64,
    pub baseline: Baseline,
    pub seed: u64,
}

impl Default for RLConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            batch: 64,
            horizon: 5,
            lr: 0.05,
            baseline: Baseline::None,
            seed: 0,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 || self.horizon == 0 {
            return Err(Error::config("RL iterations, batch and horizon must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("RL learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RLMetrics {
    pub horizon: usize,
    pub iteration: usize,
    /// Fraction of successful episodes in the update's batch.
    pub success_rate: f64,
    pub grad_norm: f64,
}

pub struct RLOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<RLMetrics>,
}

/// `sum_t grad ln pi(q_t | o_t)` along a played history.
pub fn episode_score(
    params: &PolicyParams,
    schema: &FeatureSchema,
    game: &Game<'_>,
    history: &History,
) -> Result<PolicyParams> {
    let mut g = params.zeros_like();
    let mut prefix = History::new();
    for (i, turn) in history.iter().enumerate() {
        let obs = game.observation(schema, &prefix, i + 1);
        let cache = params.forward(&obs.vector);
        let p = crate::policy::softmax(cache.logits(), None);
        let mut dl: Vec<f64> = p.iter().map(|v| -v).collect();
        dl[turn.qid] += 1.0;
        params.accumulate_grad(&cache, &dl, 1.0, &mut g);
        prefix.push(turn.qid, turn.answer);
    }
    Ok(g)
}

fn check_dims(params: &PolicyParams, schema: &FeatureSchema) -> Result<()> {
    params.validate()?;
    if params.input_dim() != schema.dim() {
        return Err(Error::Dimension {
            expected: schema.dim(),
            got: params.input_dim(),
        });
    }
    if params.output_dim() != schema.bank_size {
        return Err(Error::Dimension {
            expected: schema.bank_size,
            got: params.output_dim(),
        });
    }
    Ok(())
}

/// Batch estimate `mean_i (R_i - b) * score_i` from `(reward, score)` pairs.
pub fn policy_gradient(
    like: &PolicyParams,
    episodes: &[(f64, PolicyParams)],
    baseline: Baseline,
) -> PolicyParams {
    let n = episodes.len().max(1) as f64;
    let b = match baseline {
        Baseline::None => 0.0,
        Baseline::MeanReward => episodes.iter().map(|(r, _)| r).sum::<f64>() / n,
    };
    let mut grad = like.zeros_like();
    for (r, g) in episodes {
        let w = (r - b) / n;
        if w != 0.0 {
            grad.add_scaled(g, w);
        }
    }
    grad
}

/// REINFORCE with terminal 0/1 reward. The environment answers with
/// `wiring.environment`; the reward uses the guess under `wiring.questioner`.
pub fn reinforce_train(
    config: &RLConfig,
    wiring: OracleWiring<'_>,
    bank: &QuestionBank,
    scenes: &dyn SceneSource,
    schema: &FeatureSchema,
    init: PolicyParams,
) -> Result<RLOutcome> {
    config.validate()?;
    check_dims(&init, schema)?;
    if config.horizon > schema.t_max {
        return Err(Error::config(format!(
            "horizon {} exceeds the feature schema's t_max {}",
            config.horizon, schema.t_max
        )));
    }
    let mut params = init;
    let mut metrics = Vec::with_capacity(config.iterations);
    for it in 1..=config.iterations {
        let snapshot = &params;
        let q = Questioner::Policy {
            params: snapshot,
            schema,
            decode: Decode::Sample,
            mask_asked: false,
        };
        let eps: Vec<(f64, PolicyParams)> = (0..config.batch)
            .into_par_iter()
            .map(|b| {
                let seed = rng::derive(
                    config.seed,
                    &[tag::RL, config.horizon as u64, it as u64, b as u64],
                );
                let game = Game::sample(scenes, seed, bank, wiring, Some(schema))?;
                let r = play(&game, &q, config.horizon, seed, false)?;
                let g = episode_score(snapshot, schema, &game, &r.trajectory.turns)?;
                Ok((r.trajectory.reward, g))
            })
            .collect::<Result<_>>()?;
        let mean_r = eps.iter().map(|(r, _)| r).sum::<f64>() / eps.len() as f64;
        let grad = policy_gradient(&params, &eps, config.baseline);
        let grad_norm = grad.norm();
        if grad_norm > 0.0 {
            params.add_scaled(&grad, config.lr);
        }
        log::debug!("RL T={} {it}: success {mean_r:.3} |g| {grad_norm:.4}", config.horizon);
        metrics.push(RLMetrics {
            horizon: config.horizon,
            iteration: it,
            success_rate: mean_r,
            grad_norm,
        });
    }
    Ok(RLOutcome { params, metrics })
}

pub struct ProgressiveOutcome {
    pub checkpoints: BTreeMap<usize, Checkpoint>,
    pub metrics: Vec<RLMetrics>,
}

/// Train horizons in order, each initialized from its predecessor. `horizons` must
/// continue `base.horizon` without gaps. `config_for(T)` supplies the RL settings
/// (its horizon is overridden with `T`).
pub fn progressive_train(
    base: &Checkpoint,
    horizons: &[usize],
    config_for: &dyn Fn(usize) -> RLConfig,
    wiring: OracleWiring<'_>,
    bank: &QuestionBank,
    scenes: &dyn SceneSource,
) -> Result<ProgressiveOutcome> {
    let mut prev = base.horizon;
    for &h in horizons {
        if h != prev + 1 {
            return Err(Error::Sequencing(format!(
                "horizon {h} has no predecessor checkpoint at {}",
                h - 1
            )));
        }
        prev = h;
    }
    let mut current = base.clone();
    let mut checkpoints = BTreeMap::new();
    let mut metrics = Vec::new();
    for &h in horizons {
        let cfg = RLConfig {
            horizon: h,
            ..config_for(h)
        };
        let out = reinforce_train(&cfg, wiring, bank, scenes, &current.schema, current.params)?;
        current = Checkpoint::new(h, current.schema.clone(), out.params);
        metrics.extend(out.metrics);
        checkpoints.insert(h, current.clone());
    }
    Ok(ProgressiveOutcome {
        checkpoints,
        metrics,
    })
}
