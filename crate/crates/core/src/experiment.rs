//! The end-to-end experiment: a crowd-only bootstrap run generates labeled
//! events, the classifiers train on a random subset of its stories, and a
//! second run of the same world settles stories with the classifier blend.
//! Metrics are reported on the held-out stories.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifiers::{
    score_sequences, train_action_classifier, train_story_classifier, ClassifierError, ClassifierPair, TrainingRun,
};
use crate::engine::{
    run_simulation, stream_rng, ActionQuadruple, EngineError, Event, ScenarioConfig, SimulationOutput, EVENT_VOTE,
};
use crate::ledger::StoryId;
use crate::metrics::{classification_metrics, roc_auc, ClassificationMetrics, ConfusionCounts, MetricsError, RocCurve};
use crate::population::BehaviorType;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

const STREAM_SPLIT: u64 = 10;

/// Derives an independent seed for a pipeline stage.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Seeded random split of story ids; the first `floor(n · train_fraction)`
/// of a shuffled order are the training stories.
pub fn split_stories(n_stories: usize, train_fraction: f64, seed: u64) -> (BTreeSet<StoryId>, BTreeSet<StoryId>) {
    let mut ids: Vec<StoryId> = (0..n_stories as StoryId).collect();
    ids.shuffle(&mut stream_rng(seed, STREAM_SPLIT));
    let cut = ((n_stories as f64) * train_fraction).floor() as usize;
    (ids[..cut].iter().copied().collect(), ids[cut..].iter().copied().collect())
}

pub struct TrainedModels {
    pub pair: ClassifierPair,
    pub action_run: TrainingRun,
    pub story_run: TrainingRun,
}

/// Trains both stages on the events of `train_stories` in an annotated log.
pub fn train_models(
    sim: &SimulationOutput,
    train_stories: &BTreeSet<StoryId>,
    config: &ScenarioConfig,
) -> Result<TrainedModels, ExperimentError> {
    let groups = sim.log.by_story();
    let train_groups: Vec<(StoryId, &[Event])> =
        groups.iter().filter(|(s, _)| train_stories.contains(s)).map(|(s, e)| (*s, e.as_slice())).collect();
    let (mut action, action_run) = train_action_classifier(
        train_groups.iter().map(|(_, e)| *e),
        config.n_users,
        config.n_stories,
        &config.training,
        stage_seed(config.seed, 1),
    )?;
    let sequences = score_sequences(&mut action, train_groups.iter().copied())?;
    let data: Vec<(Vec<f64>, i64)> =
        sequences.into_iter().map(|(s, seq)| (seq, sim.story_truths[s as usize])).collect();
    let (story, story_run) = train_story_classifier(&data, &config.training, stage_seed(config.seed, 2))?;
    Ok(TrainedModels { pair: ClassifierPair { action, story }, action_run, story_run })
}

/// Evaluation metrics of one run on a story subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub stories: usize,
    pub counts: ConfusionCounts,
    pub metrics: ClassificationMetrics,
    /// Settlement final score against truth; absent when one class is missing.
    pub roc: Option<RocCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seed: u64,
    pub train: SubsetReport,
    pub test: SubsetReport,
    /// Fraction of malicious votes (held-out stories) whose action score
    /// opposes the vote, per attacker type present.
    pub detection: BTreeMap<BehaviorType, f64>,
    pub final_reputation: BTreeMap<BehaviorType, f64>,
}

pub fn subset_report(sim: &SimulationOutput, stories: &BTreeSet<StoryId>) -> Result<SubsetReport, ExperimentError> {
    let mut pairs = Vec::with_capacity(stories.len());
    let mut scores = Vec::with_capacity(stories.len());
    let mut labels = Vec::with_capacity(stories.len());
    for s in &sim.settlements {
        if stories.contains(&s.story_id) {
            let truth = sim.story_truths[s.story_id as usize];
            pairs.push((s.consensus_label, truth));
            scores.push(s.final_score);
            labels.push(truth);
        }
    }
    let counts = ConfusionCounts::from_pairs(pairs);
    Ok(SubsetReport {
        stories: stories.len(),
        counts,
        metrics: classification_metrics(&counts)?,
        roc: roc_auc(&scores, &labels).ok(),
    })
}

/// Per attacker type, the fraction of malicious vote events on `stories`
/// that the action classifier flags (score opposing the vote).
pub fn detection_rates(
    sim: &SimulationOutput,
    pair: &mut ClassifierPair,
    stories: &BTreeSet<StoryId>,
) -> Result<BTreeMap<BehaviorType, f64>, ExperimentError> {
    let behavior: Vec<BehaviorType> = sim.population.iter().map(|a| a.behavior).collect();
    let mut tally: BTreeMap<BehaviorType, (usize, usize)> = BTreeMap::new();
    for (story, events) in sim.log.by_story() {
        if !stories.contains(&story) {
            continue;
        }
        let quads: Vec<ActionQuadruple> = events.iter().map(Event::quadruple).collect();
        let scores = pair.action.score_actions(&quads)?;
        for (e, score) in events.iter().zip(scores) {
            if e.kind != EVENT_VOTE || e.malicious != Some(true) {
                continue;
            }
            let t = tally.entry(behavior[e.user as usize]).or_insert((0, 0));
            t.1 += 1;
            if score * (e.vote as f64) < 0.0 {
                t.0 += 1;
            }
        }
    }
    Ok(tally.into_iter().map(|(k, (hit, n))| (k, hit as f64 / n as f64)).collect())
}

pub struct PipelineOutput {
    pub bootstrap: SimulationOutput,
    pub evaluation: SimulationOutput,
    pub models: TrainedModels,
    pub train_stories: BTreeSet<StoryId>,
    pub test_stories: BTreeSet<StoryId>,
    pub report: EvaluationReport,
}

/// Runs evaluation with already-trained models and reports on the split.
pub fn evaluate(
    config: &ScenarioConfig,
    pair: &mut ClassifierPair,
    train_stories: &BTreeSet<StoryId>,
    test_stories: &BTreeSet<StoryId>,
) -> Result<(SimulationOutput, EvaluationReport), ExperimentError> {
    let evaluation = run_simulation(config, Some(pair))?;
    let report = EvaluationReport {
        seed: config.seed,
        train: subset_report(&evaluation, train_stories)?,
        test: subset_report(&evaluation, test_stories)?,
        detection: detection_rates(&evaluation, pair, test_stories)?,
        final_reputation: evaluation.reputation_trace.final_means(),
    };
    Ok((evaluation, report))
}

pub fn run_pipeline(config: &ScenarioConfig) -> Result<PipelineOutput, ExperimentError> {
    let bootstrap = run_simulation(config, None)?;
    let (train_stories, test_stories) = split_stories(config.n_stories, config.training.train_fraction, config.seed);
    let mut models = train_models(&bootstrap, &train_stories, config)?;
    let (evaluation, report) = evaluate(config, &mut models.pair, &train_stories, &test_stories)?;
    Ok(PipelineOutput { bootstrap, evaluation, models, train_stories, test_stories, report })
}
