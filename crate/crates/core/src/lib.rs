//! Multi-hop reasoning over multi-modal knowledge graphs with
//! topology-aware encoders, rule-guided action augmentation and an
//! adversarial path-level reward.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod discriminator;
pub mod env;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod kg;
pub mod model;
pub mod params;
pub mod policy;
pub mod rules;
pub mod tair;
pub mod tensor;
pub mod trainer;
pub mod ugan;

pub use config::{TrainConfig, Variant};
pub use discriminator::{Discriminator, RewardMode};
pub use env::{Action, Env, EnvConfig, Policy, Query, ReasonerState, Trajectory};
pub use error::{Error, Result};
pub use eval::{evaluate, KnownFacts, Metrics};
pub use features::FeatureStore;
pub use kg::{EntityId, MultiModalKG, RelationId, RelationVocab, Triplet};
pub use model::{Generator, ModelConfig, ModelPolicy, Scene};
pub use rules::{mine_rules, RuleIndex};
pub use tensor::Matrix;
pub use trainer::{train, Checkpoint, EvalSet, MetricsRecord, TrainData, TrainOutcome, Trainer};
