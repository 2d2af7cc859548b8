//! Declarative run configuration (TOML).
//!
//! Every section is optional; missing fields take the defaults shown by
//! `questioner show-config`. Sub-seeds for each stage are derived from the master
//! `seed`, so a single number reproduces the whole run.

use std::path::{Path, PathBuf};

use questioner::engine::Decode;
use questioner::experts::{ExpertKind, ExpertSchedule};
use questioner::learn::{BetaSchedule, Baseline, ILConfig, Mixing, RLConfig};
use questioner::policy::PolicyArch;
use questioner::qbank::BankParams;
use questioner::{OracleKind, SceneConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scene: SceneConfig,
    pub corpus: CorpusConfig,
    pub bank: BankParams,
    pub oracle: OracleConfig,
    pub policy: PolicyArch,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub play: PlayConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            seed: 0,
            out_dir: PathBuf::from("run"),
            scene: SceneConfig::default(),
            corpus: CorpusConfig::default(),
            bank: BankParams::default(),
            oracle: OracleConfig::default(),
            policy: PolicyArch::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            play: PlayConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_scenes: usize,
    pub heldout_scenes: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_scenes: 2000,
            heldout_scenes: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Answer noise of the true oracle.
    pub noise: f64,
    /// Training tuples for depA.
    pub dep_budget: u64,
    /// Training tuples for indA.
    pub ind_budget: u64,
    /// indA label noise is calibrated so its held-out answer error hits this value.
    pub ind_target_error: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            noise: 0.1,
            dep_budget: 200_000,
            ind_budget: 20_000,
            ind_target_error: 0.21,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertsSpec {
    /// IGE for rounds `1..T`, TPE for round `T`.
    Mixture,
    IgeOnly,
    TpeOnly,
}

impl ExpertsSpec {
    pub fn schedule(self, horizon: usize) -> ExpertSchedule {
        match self {
            ExpertsSpec::Mixture => ExpertSchedule::mixture(horizon),
            ExpertsSpec::IgeOnly => ExpertSchedule::all(ExpertKind::Ige, horizon),
            ExpertsSpec::TpeOnly => ExpertSchedule::all(ExpertKind::Tpe, horizon),
        }
    }
}

/// Imitation settings; the horizon is `train.base_horizon` and the seed is derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImitationConfig {
    pub iterations: usize,
    pub episodes: usize,
    pub beta: BetaSchedule,
    pub mixing: Mixing,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        let d = ILConfig::default();
        Self {
            iterations: d.iterations,
            episodes: d.episodes,
            beta: d.beta,
            mixing: d.mixing,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
        }
    }
}

/// REINFORCE settings per horizon; the horizon and seed are filled in per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReinforceConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub baseline: Baseline,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        let d = RLConfig::default();
        Self {
            iterations: d.iterations,
            batch: d.batch,
            lr: d.lr,
            baseline: d.baseline,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_horizon: usize,
    pub max_horizon: usize,
    pub experts: ExpertsSpec,
    pub il: ImitationConfig,
    pub rl: ReinforceConfig,
    /// One RL policy is trained per listed questioner oracle.
    pub wirings: Vec<OracleKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_horizon: 5,
            max_horizon: 10,
            experts: ExpertsSpec::Mixture,
            il: ImitationConfig::default(),
            rl: ReinforceConfig::default(),
            wirings: vec![OracleKind::TrueA, OracleKind::DepA, OracleKind::IndA],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuestionerName {
    #[serde(rename = "IGE")]
    Ige,
    #[serde(rename = "TPE")]
    Tpe,
    #[serde(rename = "random")]
    Random,
    /// The trained policy.
    #[serde(rename = "ours")]
    Ours,
}

impl QuestionerName {
    pub fn label(self) -> &'static str {
        match self {
            QuestionerName::Ige => "IGE",
            QuestionerName::Tpe => "TPE",
            QuestionerName::Random => "random",
            QuestionerName::Ours => "ours",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_games: usize,
    pub horizons: Vec<usize>,
    pub questioners: Vec<QuestionerName>,
    pub wirings: Vec<OracleKind>,
    pub decode: Decode,
    /// Transcripts kept per (questioner, wiring) at the largest horizon.
    pub transcripts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_games: 2000,
            horizons: (1..=10).collect(),
            questioners: vec![QuestionerName::Ige, QuestionerName::Ours],
            wirings: vec![OracleKind::TrueA, OracleKind::DepA, OracleKind::IndA],
            decode: Decode::Greedy,
            transcripts: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlayConfig {
    pub questioner: QuestionerName,
    /// The questioner's oracle model.
    pub wiring: OracleKind,
    pub horizon: usize,
    /// Scene from the training corpus, unless `scene_file` is set.
    pub scene_index: usize,
    /// A JSON file holding one scene.
    pub scene_file: Option<PathBuf>,
}

impl Default for PlayConfig {
    fn default() -> Self {
        Self {
            questioner: QuestionerName::Ige,
            wiring: OracleKind::TrueA,
            horizon: 5,
            scene_index: 0,
            scene_file: None,
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
        // relative paths inside the config are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        if let Some(f) = &cfg.play.scene_file {
            if f.is_relative() {
                cfg.play.scene_file = Some(base.join(f));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(usage(format!(
                "unsupported config format_version {} (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.scene.validate().map_err(|e| usage(e.to_string()))?;
        if self.corpus.train_scenes == 0 || self.corpus.heldout_scenes == 0 {
            return Err(usage("corpus sizes must be positive"));
        }
        let b = &self.bank;
        if b.target_size == 0 || !(0.0..=1.0).contains(&b.agreement_cap) {
            return Err(usage("bank target_size must be positive and agreement_cap in [0, 1]"));
        }
        let o = &self.oracle;
        if !(0.0..1.0).contains(&o.noise) {
            return Err(usage("oracle noise must lie in [0, 1)"));
        }
        if o.dep_budget == 0 || o.ind_budget == 0 {
            return Err(usage("oracle budgets must be positive"));
        }
        if !(0.0..1.0).contains(&o.ind_target_error) {
            return Err(usage("ind_target_error must lie in [0, 1)"));
        }
        if self.policy.dense.is_none() && self.policy.head.is_none() {
            return Err(usage("policy needs a dense path or a question head"));
        }
        let t = &self.train;
        if t.base_horizon == 0 || t.max_horizon < t.base_horizon {
            return Err(usage("need 1 <= base_horizon <= max_horizon"));
        }
        self.il_config().validate().map_err(|e| usage(e.to_string()))?;
        self.rl_config(OracleKind::TrueA, t.base_horizon)
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        let e = &self.eval;
        if e.n_games == 0 {
            return Err(usage("eval n_games must be at least 1"));
        }
        if e.horizons.is_empty() || e.questioners.is_empty() || e.wirings.is_empty() {
            return Err(usage("eval horizons, questioners and wirings must be non-empty"));
        }
        if e.questioners.contains(&QuestionerName::Ours) {
            if let Some(h) = e.horizons.iter().find(|&&h| h == 0 || h > t.max_horizon) {
                return Err(usage(format!(
                    "eval horizon {h} is outside the trained range 1..={}",
                    t.max_horizon
                )));
            }
            if let Some(w) = e.wirings.iter().find(|w| !t.wirings.contains(w)) {
                return Err(usage(format!("no policy is trained for wiring {}", w.name())));
            }
        }
        if self.play.horizon == 0 {
            return Err(usage("play horizon must be positive"));
        }
        Ok(())
    }

    pub fn il_config(&self) -> ILConfig {
        let il = &self.train.il;
        ILConfig {
            iterations: il.iterations,
            episodes: il.episodes,
            horizon: self.train.base_horizon,
            beta: il.beta.clone(),
            mixing: il.mixing,
            epochs: il.epochs,
            batch_size: il.batch_size,
            lr: il.lr,
            seed: crate::stage_seed(self.seed, "il"),
        }
    }

    pub fn rl_config(&self, wiring: OracleKind, horizon: usize) -> RLConfig {
        let rl = &self.train.rl;
        RLConfig {
            iterations: rl.iterations,
            batch: rl.batch,
            horizon,
            lr: rl.lr,
            baseline: rl.baseline,
            seed: crate::stage_seed(self.seed, &format!("rl/{}/{horizon}", wiring.name())),
        }
    }
}
