//! Goal-oriented questioning agents on a synthetic object-guessing game.
//!
//! A hidden target object is drawn from a small scene of attributed objects.
//! A questioner asks `T` yes/no/not-applicable questions from a fixed bank,
//! an answerer (the oracle) replies, and the questioner finally guesses the
//! target by taking the argmax of its posterior over the candidates.
//!
//! The crate provides:
//!
//! - [`scene`]: scene generation and the scene corpus format.
//! - [`qbank`]: attribute-predicate questions and the count-based bank sampler.
//! - [`oracle`]: the true answerer and estimated (approximate) answerer models.
//! - [`belief`]: Bayesian posterior tracking over candidate objects.
//! - [`experts`]: the information-gain and target-posterior planners.
//! - [`policy`]: a feed-forward softmax question policy with hand-written backprop.
//! - [`learn`]: DAgger imitation, REINFORCE refinement and progressive horizons.
//! - [`engine`]: episode rollout, the guesser, and batch evaluation.

pub mod belief;
pub mod engine;
pub mod error;
pub mod experts;
pub mod learn;
pub mod oracle;
pub mod policy;
pub mod qbank;
pub mod rng;
pub mod scene;

pub use belief::{Belief, History, Turn};
pub use engine::{EpisodeResult, GameState, OracleWiring, Questioner};
pub use error::{Error, Result};
pub use experts::{ExpertKind, ExpertSchedule};
pub use oracle::{Answer, OracleKind, OracleModel};
pub use policy::{Checkpoint, FeatureSchema, Observation, PolicyParams};
pub use qbank::{Predicate, Question, QuestionBank};
pub use scene::{GameInstance, Object, Scene, SceneConfig, Size};
