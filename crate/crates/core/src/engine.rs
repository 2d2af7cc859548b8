//! Episode rollout and batch evaluation.
//!
//! The environment oracle produces answers about the hidden target; the
//! questioner's own oracle model drives its belief, its experts and its final
//! guess. The two slots are independent ([`OracleWiring`]).
//!
//! Every game `i` of an evaluation draws its scene, target, answers and any policy
//! sampling from streams derived from `(seed, i)`, so results do not depend on
//! execution order and games run in parallel.
//!
//! Transcript file: JSON lines, one [`Transcript`] per game.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{batch_posterior_with, Belief, History};
use crate::error::{Error, Result};
use crate::experts::{expert_action, ige_select_with, tpe_select_with, ExpertSchedule};
use crate::oracle::{draw, Answer, Likelihoods, OracleModel};
use crate::policy::{
    argmax, featurize_with, sample_index, scene_features, softmax, FeatureSchema, Observation,
    PolicyParams,
};
use crate::qbank::{truth_table, QuestionBank};
use crate::rng::{self, tag};
use crate::scene::{generate_scene, sample_game, Scene, SceneConfig};

/// Anything that produces a scene from a seed.
pub trait SceneSource: Sync {
    fn scene(&self, seed: u64) -> Result<Scene>;
}

impl SceneSource for SceneConfig {
    fn scene(&self, seed: u64) -> Result<Scene> {
        generate_scene(self, seed)
    }
}

/// Draws uniformly from a fixed list of scenes.
pub struct FixedScenes(pub Vec<Scene>);

impl SceneSource for FixedScenes {
    fn scene(&self, seed: u64) -> Result<Scene> {
        if self.0.is_empty() {
            return Err(Error::config("no scenes"));
        }
        Ok(self.0[(rng::splitmix64(seed) % self.0.len() as u64) as usize].clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OracleWiring<'a> {
    /// Answers the questions.
    pub environment: &'a OracleModel,
    /// The questioner's internal model: belief, experts and guess.
    pub questioner: &'a OracleModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Decode {
    #[default]
    Greedy,
    Sample,
}

#[derive(Clone, Debug)]
pub enum Questioner<'a> {
    /// Uniformly random question each round.
    Random,
    Ige,
    Tpe,
    /// Scheduled experts; rounds beyond the schedule are an error.
    Experts(ExpertSchedule),
    Policy {
        params: &'a PolicyParams,
        schema: &'a FeatureSchema,
        decode: Decode,
        mask_asked: bool,
    },
}

impl Questioner<'_> {
    pub fn name(&self) -> String {
        match self {
            Questioner::Random => "random".into(),
            Questioner::Ige => "IGE".into(),
            Questioner::Tpe => "TPE".into(),
            Questioner::Experts(_) => "experts".into(),
            Questioner::Policy { .. } => "policy".into(),
        }
    }
}

/// `x_t = (history, target, scene)`; the round is `history.len() + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GameState<'a> {
    pub scene: &'a Scene,
    pub target: usize,
    pub history: History,
}

/// What the questioner may see: the state with the target removed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservationInputs<'s, 'a> {
    pub history: &'s History,
    pub scene: &'a Scene,
}

impl<'a> GameState<'a> {
    pub fn new(scene: &'a Scene, target: usize) -> Self {
        Self {
            scene,
            target,
            history: History::new(),
        }
    }

    pub fn round(&self) -> usize {
        self.history.len() + 1
    }
}

pub fn observe<'s, 'a>(state: &'s GameState<'a>) -> ObservationInputs<'s, 'a> {
    ObservationInputs {
        history: &state.history,
        scene: state.scene,
    }
}

/// Ask `qid`, sample the environment's answer about the target, and return the successor.
pub fn step<'a>(
    state: &GameState<'a>,
    qid: usize,
    environment: &OracleModel,
    bank: &QuestionBank,
    horizon: usize,
    seed: u64,
) -> Result<GameState<'a>> {
    if state.round() > horizon {
        return Err(Error::EpisodeComplete {
            round: state.round(),
            horizon,
        });
    }
    let q = bank
        .get(qid)
        .ok_or_else(|| Error::config(format!("qid {qid} not in bank")))?;
    let p = crate::oracle::answer_prob(environment, q, state.scene, state.target);
    let u: f64 = rng::stream(seed, &[tag::ANSWER]).gen();
    let mut next = state.clone();
    next.history.push(qid, draw(&p, u));
    Ok(next)
}

/// Guesser: argmax of the batch posterior under the questioner's model, ties to the
/// smallest id. A degenerate posterior falls back to the prior argmax.
pub fn guess_with(scene: &Scene, lik: &Likelihoods, history: &History) -> (usize, Option<Belief>) {
    match batch_posterior_with(scene, lik, history) {
        Ok(b) => (b.argmax(), Some(b)),
        Err(e) => {
            log::warn!("guesser: {e}; falling back to the prior");
            (0, None)
        }
    }
}

pub fn guess(scene: &Scene, model: &OracleModel, bank: &QuestionBank, history: &History) -> usize {
    guess_with(scene, &Likelihoods::new(model, bank, scene), history).0
}

/// Per-episode precomputation: ground truth, both likelihood tables and scene features.
pub struct Game<'a> {
    pub scene: Scene,
    pub target: usize,
    pub bank: &'a QuestionBank,
    pub truth: Vec<Vec<Answer>>,
    pub env: Likelihoods,
    pub model: Likelihoods,
    scene_block: Option<Vec<f64>>,
}

impl<'a> Game<'a> {
    pub fn new(
        scene: Scene,
        target: usize,
        bank: &'a QuestionBank,
        wiring: OracleWiring<'_>,
        schema: Option<&FeatureSchema>,
    ) -> Self {
        let truth = truth_table(bank, &scene);
        let env = Likelihoods::new(wiring.environment, bank, &scene);
        let model = Likelihoods::new(wiring.questioner, bank, &scene);
        let scene_block = schema.map(|s| scene_features(s, &scene));
        Self {
            scene,
            target,
            bank,
            truth,
            env,
            model,
            scene_block,
        }
    }

    /// Draw a scene and target from `source` for game `seed`.
    pub fn sample(
        source: &dyn SceneSource,
        seed: u64,
        bank: &'a QuestionBank,
        wiring: OracleWiring<'_>,
        schema: Option<&FeatureSchema>,
    ) -> Result<Self> {
        let scene = source.scene(rng::derive(seed, &[tag::SCENE]))?;
        let target = sample_game(&scene, rng::derive(seed, &[tag::TARGET]))?.target;
        Ok(Self::new(scene, target, bank, wiring, schema))
    }

    /// Environment answer to `qid` at `round`, using uniform `u`.
    pub fn answer(&self, qid: usize, u: f64) -> Answer {
        draw(self.env.get(qid, self.target), u)
    }

    pub fn observation(&self, schema: &FeatureSchema, history: &History, round: usize) -> Observation {
        let block = match &self.scene_block {
            Some(b) => b.clone(),
            None => scene_features(schema, &self.scene),
        };
        featurize_with(schema, &block, &self.truth, history, round)
    }

    pub fn guess(&self, history: &History) -> (usize, Option<Belief>) {
        guess_with(&self.scene, &self.model, history)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub turns: History,
    /// Terminal reward: 1 on a correct guess, else 0. Intermediate rewards are 0.
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub trajectory: Trajectory,
    pub guess: usize,
    pub success: bool,
    pub final_belief: Option<Belief>,
    /// Correct-guess indicator after each prefix length `0..=horizon`.
    pub prefix_success: Vec<bool>,
}

/// The question `questioner` asks at round `t`. `belief` is the expert posterior under
/// the questioner's model; policies read only the observation. Exactly one uniform is
/// drawn from `choices` before any questioner-specific draws.
pub fn choose_question(
    game: &Game<'_>,
    questioner: &Questioner<'_>,
    t: usize,
    history: &History,
    belief: &Belief,
    choices: &mut rng::StreamRng,
) -> Result<usize> {
    let u_choice: f64 = choices.gen();
    Ok(match questioner {
        Questioner::Random => choices.gen_range(0..game.bank.size()),
        Questioner::Ige => ige_select_with(belief, &game.model),
        Questioner::Tpe => tpe_select_with(belief, &game.model, &game.env, game.target),
        Questioner::Experts(s) => expert_action(s, t, belief, &game.model, &game.env, game.target)?,
        Questioner::Policy {
            params,
            schema,
            decode,
            mask_asked,
        } => {
            let obs = game.observation(schema, history, t);
            let logits = params.logits(&obs)?;
            let mask: Option<Vec<bool>> = mask_asked.then(|| {
                let mut m = vec![true; game.bank.size()];
                history.iter().for_each(|turn| m[turn.qid] = false);
                if m.iter().all(|x| !x) {
                    m.fill(true);
                }
                m
            });
            let p = softmax(&logits, mask.as_deref());
            match decode {
                Decode::Greedy => argmax(&p),
                Decode::Sample => sample_index(&p, u_choice),
            }
        }
    })
}

/// Play one game for `horizon` rounds. Randomness comes from `seed`.
pub fn play(
    game: &Game<'_>,
    questioner: &Questioner<'_>,
    horizon: usize,
    seed: u64,
    track_prefixes: bool,
) -> Result<EpisodeResult> {
    let mut answers = rng::stream(seed, &[tag::ANSWER]);
    let mut choices = rng::stream(seed, &[tag::POLICY]);
    let mut history = History::new();
    let mut belief = Belief::uniform(game.scene.len(), game.scene.scene_id);
    let mut prefix_success = Vec::new();
    if track_prefixes {
        prefix_success.push(game.guess(&history).0 == game.target);
    }
    for t in 1..=horizon {
        let qid = choose_question(game, questioner, t, &history, &belief, &mut choices)?;
        let a = game.answer(qid, answers.gen());
        history.push(qid, a);
        if matches!(questioner, Questioner::Ige | Questioner::Tpe | Questioner::Experts(_)) {
            belief = match belief.update_with(&game.model, qid, a) {
                Ok(b) => b,
                Err(e) => {
                    log::warn!("expert belief: {e}; resetting to the prior");
                    Belief::uniform(game.scene.len(), game.scene.scene_id)
                }
            };
        }
        if track_prefixes {
            prefix_success.push(game.guess(&history).0 == game.target);
        }
    }
    let (g, final_belief) = game.guess(&history);
    let success = g == game.target;
    Ok(EpisodeResult {
        trajectory: Trajectory {
            turns: history,
            reward: if success { 1.0 } else { 0.0 },
        },
        guess: g,
        success,
        final_belief,
        prefix_success,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub round: usize,
    pub qid: usize,
    pub question: String,
    pub answer: Answer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub scene_id: u64,
    pub target: usize,
    pub horizon: usize,
    pub questioner: String,
    /// Name of the questioner's oracle model, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wiring: Option<String>,
    pub turns: Vec<TranscriptTurn>,
    pub guess: usize,
    pub success: bool,
    /// The full scene, so the game can be replayed.
    pub scene: Scene,
}

impl Transcript {
    pub fn new(
        game: &Game<'_>,
        questioner: &str,
        horizon: usize,
        history: &History,
        guess: usize,
    ) -> Self {
        Self {
            scene_id: game.scene.scene_id,
            target: game.target,
            horizon,
            questioner: questioner.to_string(),
            wiring: None,
            turns: history
                .iter()
                .enumerate()
                .map(|(i, t)| TranscriptTurn {
                    round: i + 1,
                    qid: t.qid,
                    question: game.bank.questions()[t.qid].surface(),
                    answer: t.answer,
                })
                .collect(),
            guess,
            success: guess == game.target,
            scene: game.scene.clone(),
        }
    }

    /// [`Transcript::check`] plus a replay of the guess under `model`.
    pub fn replay(&self, bank: &QuestionBank, model: &OracleModel) -> Result<()> {
        self.check(bank)?;
        self.scene.validate()?;
        if self.target >= self.scene.len() {
            return Err(Error::Format(format!("target {} outside scene", self.target)));
        }
        let history = History {
            turns: self
                .turns
                .iter()
                .map(|t| crate::belief::Turn {
                    qid: t.qid,
                    answer: t.answer,
                })
                .collect(),
        };
        let g = guess(&self.scene, model, bank, &history);
        if g != self.guess {
            return Err(Error::Format(format!(
                "replayed guess {g} differs from recorded guess {}",
                self.guess
            )));
        }
        Ok(())
    }

    /// Consistency check: qids resolve to the recorded surface strings, rounds are
    /// numbered 1.., and the success flag matches the guess.
    pub fn check(&self, bank: &QuestionBank) -> Result<()> {
        for (i, t) in self.turns.iter().enumerate() {
            let q = bank
                .get(t.qid)
                .ok_or_else(|| Error::Format(format!("transcript qid {} not in bank", t.qid)))?;
            if t.round != i + 1 {
                return Err(Error::Format(format!("round {} at position {i}", t.round)));
            }
            if q.surface() != t.question {
                return Err(Error::Format(format!(
                    "qid {} surface {:?} != {:?}",
                    t.qid,
                    t.question,
                    q.surface()
                )));
            }
        }
        if self.turns.len() != self.horizon {
            return Err(Error::Format("turn count differs from horizon".into()));
        }
        if self.success != (self.guess == self.target) {
            return Err(Error::Format("success flag inconsistent with guess".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub horizon: usize,
    pub n_games: usize,
    pub successes: usize,
    pub accuracy: f64,
    /// Half-width of the normal-approximation 95% binomial interval.
    pub ci95: f64,
}

impl AccuracyRow {
    pub fn new(horizon: usize, n_games: usize, successes: usize) -> Self {
        let p = successes as f64 / n_games.max(1) as f64;
        Self {
            horizon,
            n_games,
            successes,
            accuracy: p,
            ci95: 1.96 * (p * (1.0 - p) / n_games.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
    #[serde(skip)]
    pub transcripts: Vec<Transcript>,
}

impl AccuracyTable {
    pub fn at(&self, horizon: usize) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.horizon == horizon)
    }
}

/// Questioner per horizon. `Fixed` questioners do not depend on the horizon, so one
/// game to the largest horizon scores every prefix.
pub enum QuestionerSpec<'a> {
    Fixed(Questioner<'a>),
    PerHorizon(BTreeMap<usize, Questioner<'a>>),
}

#[derive(Clone, Debug)]
pub struct EvalSpec {
    pub horizons: Vec<usize>,
    pub n_games: usize,
    pub seed: u64,
    pub transcripts: bool,
}

fn game_seed(seed: u64, i: usize) -> u64 {
    rng::derive(seed, &[tag::EVAL, i as u64])
}

/// Success rate per horizon, with a 95% binomial half-width.
pub fn evaluate(
    questioner: &QuestionerSpec<'_>,
    wiring: OracleWiring<'_>,
    bank: &QuestionBank,
    scenes: &dyn SceneSource,
    spec: &EvalSpec,
) -> Result<AccuracyTable> {
    if spec.n_games == 0 {
        return Err(Error::config("n_games must be at least 1"));
    }
    let schema_of = |q: &Questioner<'_>| match q {
        Questioner::Policy { schema, .. } => Some((*schema).clone()),
        _ => None,
    };
    let mut table = AccuracyTable::default();
    match questioner {
        QuestionerSpec::Fixed(q) => {
            let t_max = spec.horizons.iter().copied().max().unwrap_or(0);
            let schema = schema_of(q);
            let results: Vec<(Vec<bool>, Option<Transcript>)> = (0..spec.n_games)
                .into_par_iter()
                .map(|i| {
                    let seed = game_seed(spec.seed, i);
                    let game = Game::sample(scenes, seed, bank, wiring, schema.as_ref())?;
                    let r = play(&game, q, t_max, seed, true)?;
                    let tr = spec
                        .transcripts
                        .then(|| Transcript::new(&game, &q.name(), t_max, &r.trajectory.turns, r.guess));
                    Ok((r.prefix_success, tr))
                })
                .collect::<Result<_>>()?;
            for &h in &spec.horizons {
                let s = results.iter().filter(|(p, _)| p[h]).count();
                table.rows.push(AccuracyRow::new(h, spec.n_games, s));
            }
            table.transcripts = results.into_iter().filter_map(|(_, t)| t).collect();
        }
        QuestionerSpec::PerHorizon(map) => {
            for &h in &spec.horizons {
                let q = map.get(&h).ok_or_else(|| {
                    Error::Sequencing(format!("no questioner for horizon {h}"))
                })?;
                let schema = schema_of(q);
                let results: Vec<(bool, Option<Transcript>)> = (0..spec.n_games)
                    .into_par_iter()
                    .map(|i| {
                        let seed = game_seed(spec.seed, i);
                        let game = Game::sample(scenes, seed, bank, wiring, schema.as_ref())?;
                        let r = play(&game, q, h, seed, false)?;
                        let tr = spec
                            .transcripts
                            .then(|| Transcript::new(&game, &q.name(), h, &r.trajectory.turns, r.guess));
                        Ok((r.success, tr))
                    })
                    .collect::<Result<_>>()?;
                let s = results.iter().filter(|(ok, _)| *ok).count();
                table.rows.push(AccuracyRow::new(h, spec.n_games, s));
                table
                    .transcripts
                    .extend(results.into_iter().filter_map(|(_, t)| t));
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qbank::{sample_bank, BankParams, Predicate};
    use crate::scene::generate_corpus;

    fn world() -> (SceneConfig, QuestionBank) {
        let cfg = SceneConfig::default();
        let corpus = generate_corpus(&cfg, 200, 1).unwrap();
        let bank = sample_bank(&corpus, &BankParams::default(), 0).unwrap().bank;
        (cfg, bank)
    }

    #[test]
    fn observation_excludes_target() {
        let (cfg, _) = world();
        let s = generate_scene(&cfg, 0).unwrap();
        let a = GameState::new(&s, 1);
        let b = GameState::new(&s, 4);
        assert_eq!(observe(&a), observe(&b));
        assert!(observe(&a).history.is_empty());
    }

    #[test]
    fn step_appends_answer_and_respects_horizon() {
        let (cfg, bank) = world();
        let s = generate_scene(&cfg, 2).unwrap();
        let env = OracleModel::true_oracle(0.0).unwrap();
        let mut st = GameState::new(&s, 3);
        for k in 1..=3 {
            let next = step(&st, k, &env, &bank, 3, k as u64).unwrap();
            assert_eq!(st.history.len(), k - 1);
            assert_eq!(observe(&next).history.len(), k);
            let truth = crate::qbank::evaluate_in_scene(&bank.questions()[k].predicate, &s, 3);
            assert_eq!(next.history.turns[k - 1].answer, truth);
            assert_eq!(next, step(&st, k, &env, &bank, 3, k as u64).unwrap());
            st = next;
        }
        assert!(matches!(
            step(&st, 0, &env, &bank, 3, 0),
            Err(Error::EpisodeComplete { round: 4, horizon: 3 })
        ));
    }

    #[test]
    fn step_answer_frequencies() {
        let (cfg, bank) = world();
        let s = generate_scene(&cfg, 2).unwrap();
        let env = OracleModel::true_oracle(0.2).unwrap();
        let st = GameState::new(&s, 0);
        let p = crate::oracle::answer_prob(&env, &bank.questions()[0], &s, 0);
        let mut counts = [0usize; 3];
        for seed in 0..10_000 {
            let n = step(&st, 0, &env, &bank, 1, seed).unwrap();
            counts[n.history.turns[0].answer.index()] += 1;
        }
        for i in 0..3 {
            assert!((counts[i] as f64 / 1e4 - p[i]).abs() < 0.02);
        }
    }

    #[test]
    fn guesser_argmax_and_ties() {
        let s = generate_scene(
            &SceneConfig {
                min_objects: 3,
                max_objects: 3,
                ..SceneConfig::default()
            },
            0,
        )
        .unwrap();
        let bank = QuestionBank::from_predicates([Predicate::XLessThan(0.5)]).unwrap();
        let m = OracleModel::true_oracle(0.1).unwrap();
        assert_eq!(guess(&s, &m, &bank, &History::new()), 0);
        let lik = Likelihoods::from_rows(vec![vec![[0.1, 0.9, 0.0], [0.7, 0.3, 0.0], [0.2, 0.8, 0.0]]]);
        let (g, _) = guess_with(&s, &lik, &History::new().with(0, Answer::Yes));
        assert_eq!(g, 1);
    }

    #[test]
    fn pinning_history_identifies_object() {
        let (cfg, bank) = world();
        let s = generate_scene(&cfg, 5).unwrap();
        let m = OracleModel::true_oracle(0.0).unwrap();
        let truth = truth_table(&bank, &s);
        for target in 0..s.len() {
            // answer every question truthfully for `target`
            let mut h = History::new();
            for q in 0..bank.size() {
                h.push(q, truth[q][target]);
            }
            let distinct = (0..s.len())
                .filter(|&c| c != target)
                .all(|c| (0..bank.size()).any(|q| truth[q][c] != truth[q][target]));
            if distinct {
                assert_eq!(guess(&s, &m, &bank, &h), target);
            }
        }
    }

    #[test]
    fn single_game_accuracy_is_binary() {
        let (cfg, bank) = world();
        let env = OracleModel::true_oracle(0.1).unwrap();
        let w = OracleWiring {
            environment: &env,
            questioner: &env,
        };
        let spec = EvalSpec {
            horizons: vec![1, 3],
            n_games: 1,
            seed: 3,
            transcripts: true,
        };
        let t = evaluate(&QuestionerSpec::Fixed(Questioner::Ige), w, &bank, &cfg, &spec).unwrap();
        for r in &t.rows {
            assert!(r.accuracy == 0.0 || r.accuracy == 1.0);
        }
        assert_eq!(t.transcripts.len(), 1);
        t.transcripts[0].check(&bank).unwrap();
    }

    #[test]
    fn zero_information_is_chance() {
        let (cfg, bank) = world();
        let env = OracleModel::true_oracle(0.1).unwrap();
        let w = OracleWiring {
            environment: &env,
            questioner: &env,
        };
        let spec = EvalSpec {
            horizons: vec![0],
            n_games: 8000,
            seed: 1,
            transcripts: false,
        };
        let t = evaluate(&QuestionerSpec::Fixed(Questioner::Random), w, &bank, &cfg, &spec).unwrap();
        let acc = t.rows[0].accuracy;
        let m = cfg.min_objects as f64;
        let sigma = ((1.0 / m) * (1.0 - 1.0 / m) / 8000.0).sqrt();
        assert!((acc - 1.0 / m).abs() < 4.0 * sigma, "{acc}");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (cfg, bank) = world();
        let env = OracleModel::true_oracle(0.1).unwrap();
        let w = OracleWiring {
            environment: &env,
            questioner: &env,
        };
        let spec = EvalSpec {
            horizons: vec![1, 2, 3, 4, 5],
            n_games: 300,
            seed: 9,
            transcripts: true,
        };
        let a = evaluate(&QuestionerSpec::Fixed(Questioner::Ige), w, &bank, &cfg, &spec).unwrap();
        let b = evaluate(&QuestionerSpec::Fixed(Questioner::Ige), w, &bank, &cfg, &spec).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.transcripts, b.transcripts);
    }
}
