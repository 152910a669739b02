//! Deterministic simulator for blockchain-backed crowdsourced truth
//! assessment: a hash-chained ledger of posts, votes and settlements, an
//! equilibrium detector over vote streams, adversarial user populations, a
//! two-stage behavioral classifier and the statistics used to evaluate them.

pub mod birdwatch;
pub mod classifiers;
pub mod config;
pub mod dynamics;
pub mod engine;
pub mod experiment;
pub mod ledger;
pub mod metrics;
pub mod neural;
pub mod population;

pub use classifiers::{ActionClassifier, ClassifierPair, StoryClassifier, TrainingConfig};
pub use config::{parse_config, ConfigError, SweepSpec};
pub use dynamics::{EquilibriumParams, LyapunovEstimate, VoteSeries};
pub use engine::{
    run_simulation, ActionQuadruple, Event, EventLog, ScenarioConfig, SettlementResult, SimulationOutput,
};
pub use experiment::{run_pipeline, EvaluationReport, PipelineOutput};
pub use ledger::{verify_chain, Block, Chain, Transaction, TxKind};
pub use metrics::{ClassificationMetrics, ConfusionCounts, OlsResult, RocCurve};
pub use population::{AgentProfile, BehaviorType, PopulationConfig};
