//! Simulation scheduler and settlement logic.
//!
//! A run posts `n_stories` stories at evenly spaced steps and fills the
//! remaining `n_votes` steps with vote slots. After each vote the story is
//! checked for equilibrium; a story in equilibrium (or at the vote cap) is
//! settled by blending the crowd score with an optional classifier score.
//! Each settlement books rewards on the ledger and seals a block.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifiers::TrainingConfig;
use crate::dynamics::{self, DynamicsError, EquilibriumParams, VoteSeries};
use crate::ledger::{verify_chain, Chain, LedgerError, StoryId, UserId};
use crate::population::{build_population, AgentProfile, BehaviorType, PopulationConfig, PopulationError, StoryView};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config field `{field}`: {reason}")]
    ConfigInvalid { field: String, reason: String },
    #[error("no votes to score")]
    NoVotes,
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Population(#[from] PopulationError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("event log: {0}")]
    EventLog(String),
}

fn invalid(field: &str, reason: impl Into<String>) -> EngineError {
    EngineError::ConfigInvalid { field: field.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConstants {
    pub voter_correct: i64,
    pub voter_wrong: i64,
    pub poster_true: i64,
    pub poster_false: i64,
}

impl Default for RewardConstants {
    fn default() -> Self {
        RewardConstants { voter_correct: 1, voter_wrong: -2, poster_true: 2, poster_false: -4 }
    }
}

/// What the poster's reward is judged against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosterRewardBasis {
    #[default]
    Consensus,
    GroundTruth,
}

fn default_true_ratio() -> f64 {
    0.5
}
fn default_max_votes() -> usize {
    50
}
fn default_threshold() -> f64 {
    0.5
}
fn default_alpha() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_users: usize,
    pub n_stories: usize,
    /// Total vote budget.
    pub n_votes: usize,
    pub seed: u64,
    #[serde(default = "default_true_ratio")]
    pub true_ratio: f64,
    #[serde(default)]
    pub population: PopulationConfig,
    #[serde(default)]
    pub equilibrium: EquilibriumParams,
    #[serde(default = "default_max_votes")]
    pub max_votes_per_story: usize,
    #[serde(default = "default_threshold")]
    pub consensus_threshold: f64,
    #[serde(default = "default_alpha")]
    pub blend_alpha: f64,
    #[serde(default)]
    pub rewards: RewardConstants,
    #[serde(default)]
    pub poster_reward_basis: PosterRewardBasis,
    /// Coalition members pick open stories by their targets when one is available.
    #[serde(default = "default_true")]
    pub coalition_seeks_targets: bool,
    #[serde(default)]
    pub training: TrainingConfig,
}

fn default_true() -> bool {
    true
}

impl ScenarioConfig {
    /// Defaults everywhere except the four required fields.
    pub fn new(n_users: usize, n_stories: usize, n_votes: usize, seed: u64) -> Self {
        ScenarioConfig {
            n_users,
            n_stories,
            n_votes,
            seed,
            true_ratio: default_true_ratio(),
            population: PopulationConfig::default(),
            equilibrium: EquilibriumParams::default(),
            max_votes_per_story: default_max_votes(),
            consensus_threshold: default_threshold(),
            blend_alpha: default_alpha(),
            rewards: RewardConstants::default(),
            poster_reward_basis: PosterRewardBasis::default(),
            coalition_seeks_targets: true,
            training: TrainingConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.n_users < 2 {
            return Err(invalid("n_users", "at least 2 users are needed for voting"));
        }
        if self.n_stories == 0 {
            return Err(invalid("n_stories", "must be positive"));
        }
        if self.n_votes < self.n_stories {
            return Err(invalid("n_votes", "vote budget must be at least n_stories"));
        }
        if !(0.0..=1.0).contains(&self.true_ratio) {
            return Err(invalid("true_ratio", "must lie in [0, 1]"));
        }
        if !(self.consensus_threshold > 0.0 && self.consensus_threshold <= 1.0) {
            return Err(invalid("consensus_threshold", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.blend_alpha) {
            return Err(invalid("blend_alpha", "must lie in [0, 1]"));
        }
        if self.max_votes_per_story == 0 {
            return Err(invalid("max_votes_per_story", "must be positive"));
        }
        self.population.validate().map_err(|e| invalid("population", e.to_string()))?;
        self.equilibrium.validate().map_err(|e| invalid("equilibrium", e.to_string()))?;
        self.training.validate().map_err(|e| invalid("training", e))?;
        Ok(())
    }

    pub fn horizon(&self) -> u64 {
        (self.n_stories + self.n_votes) as u64
    }

    pub fn population_config(&self) -> PopulationConfig {
        PopulationConfig { seed: self.seed, ..self.population.clone() }
    }
}

/// The event kind carried in the quadruple's `type` field.
pub const EVENT_POST: u8 = 0;
pub const EVENT_VOTE: u8 = 1;

/// One `(user, story, type, vote)` event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionQuadruple {
    pub user: UserId,
    pub story: StoryId,
    pub kind: u8,
    pub vote: i64,
}

/// An event with its step and simulation annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub step: u64,
    pub user: UserId,
    pub story: StoryId,
    #[serde(rename = "type")]
    pub kind: u8,
    pub vote: i64,
    pub story_truth: Option<i64>,
    pub malicious: Option<bool>,
}

impl Event {
    pub fn quadruple(&self) -> ActionQuadruple {
        ActionQuadruple { user: self.user, story: self.story, kind: self.kind, vote: self.vote }
    }
}

pub const EVENT_LOG_HEADER: [&str; 7] = ["step", "user", "story", "type", "vote", "story_truth", "malicious"];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EngineError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(EVENT_LOG_HEADER).map_err(|e| EngineError::EventLog(e.to_string()))?;
        for e in &self.events {
            w.serialize(e).map_err(|e| EngineError::EventLog(e.to_string()))?;
        }
        w.flush().map_err(|e| EngineError::EventLog(e.to_string()))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, EngineError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers().map_err(|e| EngineError::EventLog(e.to_string()))?;
        if headers.iter().ne(EVENT_LOG_HEADER) {
            return Err(EngineError::EventLog(format!("unexpected header {headers:?}")));
        }
        let events =
            r.deserialize().collect::<Result<Vec<Event>, _>>().map_err(|e| EngineError::EventLog(e.to_string()))?;
        Ok(EventLog { events })
    }

    /// Events grouped by story, each group in log order.
    pub fn by_story(&self) -> BTreeMap<StoryId, Vec<Event>> {
        let mut map: BTreeMap<StoryId, Vec<Event>> = BTreeMap::new();
        for e in &self.events {
            map.entry(e.story).or_default().push(*e);
        }
        map
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettlementResult {
    pub story_id: StoryId,
    pub crowd_score: f64,
    pub classifier_score: f64,
    pub final_score: f64,
    pub consensus_label: i64,
    pub reward_deltas: BTreeMap<UserId, i64>,
    /// Settled by the vote cap or the end of the budget rather than the threshold.
    pub forced: bool,
    pub step: u64,
    pub vote_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Settlement {
    Ready(SettlementResult),
    NotReady { final_score: f64 },
}

/// Scores a story from its events so far; output in (-1, 1).
pub trait StoryScorer {
    fn score_story(&mut self, events: &[ActionQuadruple]) -> f64;
}

/// Mean vote value.
pub fn compute_crowd_score(votes: &VoteSeries) -> Result<f64, EngineError> {
    if votes.is_empty() {
        return Err(EngineError::NoVotes);
    }
    Ok(votes.values().iter().sum::<i64>() as f64 / votes.len() as f64)
}

/// Blends crowd and classifier scores and applies the consensus threshold.
/// A forced settlement ignores the threshold and labels by sign (0 → +1).
pub fn settle(
    story: StoryId,
    votes: &VoteSeries,
    classifier_score: f64,
    alpha: f64,
    theta: f64,
    forced: bool,
) -> Settlement {
    let crowd_score = compute_crowd_score(votes).unwrap_or(0.0);
    let final_score = alpha * classifier_score + (1.0 - alpha) * crowd_score;
    if !forced && final_score.abs() < theta {
        return Settlement::NotReady { final_score };
    }
    Settlement::Ready(SettlementResult {
        story_id: story,
        crowd_score,
        classifier_score,
        final_score,
        consensus_label: if final_score >= 0.0 { 1 } else { -1 },
        reward_deltas: BTreeMap::new(),
        forced,
        step: 0,
        vote_count: votes.len(),
    })
}

/// Reward deltas for a settled story. Voters are judged against the
/// consensus label; the poster against the label or the hidden truth,
/// depending on `basis`.
pub fn apply_rewards(
    result: &SettlementResult,
    poster: UserId,
    votes: &[(UserId, i64)],
    story_truth: i64,
    rewards: &RewardConstants,
    basis: PosterRewardBasis,
) -> BTreeMap<UserId, i64> {
    let label = result.consensus_label;
    let mut deltas = BTreeMap::new();
    for &(user, vote) in votes {
        let d = if vote == label { rewards.voter_correct } else { rewards.voter_wrong };
        *deltas.entry(user).or_insert(0) += d;
    }
    let judged = match basis {
        PosterRewardBasis::Consensus => label,
        PosterRewardBasis::GroundTruth => story_truth,
    };
    let d = if judged == 1 { rewards.poster_true } else { rewards.poster_false };
    *deltas.entry(poster).or_insert(0) += d;
    deltas
}

/// Mean reputation per behavior type, sampled at step 0 and after every settlement.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReputationTrace {
    pub types: Vec<BehaviorType>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

impl ReputationTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EngineError> {
        let err = |e: csv::Error| EngineError::EventLog(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string()];
        header.extend(self.types.iter().map(|t| t.name().to_string()));
        w.write_record(&header).map_err(err)?;
        for (step, means) in &self.rows {
            let mut rec = vec![step.to_string()];
            rec.extend(means.iter().map(|m| m.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| EngineError::EventLog(e.to_string()))
    }

    pub fn final_means(&self) -> BTreeMap<BehaviorType, f64> {
        match self.rows.last() {
            Some((_, means)) => self.types.iter().copied().zip(means.iter().copied()).collect(),
            None => BTreeMap::new(),
        }
    }
}

pub fn mean_reputation_by_type(population: &[AgentProfile], chain: &Chain) -> BTreeMap<BehaviorType, f64> {
    let mut sums: BTreeMap<BehaviorType, (f64, usize)> = BTreeMap::new();
    for a in population {
        let e = sums.entry(a.behavior).or_insert((0.0, 0));
        e.0 += chain.reputation(a.id) as f64;
        e.1 += 1;
    }
    sums.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect()
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub chain: Chain,
    pub log: EventLog,
    pub settlements: Vec<SettlementResult>,
    pub population: Vec<AgentProfile>,
    /// Hidden truth per story id.
    pub story_truths: Vec<i64>,
    pub posters: Vec<UserId>,
    pub reputation_trace: ReputationTrace,
    /// Vote slots that found no eligible (agent, story) pair.
    pub skipped_slots: usize,
}

impl SimulationOutput {
    pub fn settlement(&self, story: StoryId) -> Option<&SettlementResult> {
        self.settlements.iter().find(|s| s.story_id == story)
    }
}

// Independent RNG streams so that, for one seed, story truths and posters do
// not depend on how votes and settlements unfold.
const STREAM_TRUTHS: u64 = 1;
const STREAM_SCHEDULE: u64 = 2;
const STREAM_DECISIONS: u64 = 3;
const STREAM_POSTERS: u64 = 4;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Hidden story truths for a run; identical for every run sharing `seed`.
pub fn draw_story_truths(seed: u64, n_stories: usize, true_ratio: f64) -> Vec<i64> {
    let mut rng = stream_rng(seed, STREAM_TRUTHS);
    (0..n_stories).map(|_| if rng.random::<f64>() < true_ratio { 1 } else { -1 }).collect()
}

const AGENT_RESAMPLES: usize = 64;

struct Run<'a, 's> {
    config: &'a ScenarioConfig,
    scorer: Option<&'s mut dyn StoryScorer>,
    alpha: f64,
    chain: Chain,
    log: EventLog,
    settlements: Vec<SettlementResult>,
    population: Vec<AgentProfile>,
    truths: Vec<i64>,
    posters: Vec<UserId>,
    story_events: Vec<Vec<ActionQuadruple>>,
    open: BTreeSet<StoryId>,
    trace: ReputationTrace,
}

impl Run<'_, '_> {
    fn record_trace(&mut self, step: u64) {
        let means = mean_reputation_by_type(&self.population, &self.chain);
        let row = self.trace.types.iter().map(|t| means[t]).collect();
        self.trace.rows.push((step, row));
    }

    fn try_settle(&mut self, story: StoryId, step: u64, forced: bool) -> Result<bool, EngineError> {
        let record = self.chain.story(story).expect("open story is on the chain");
        let votes: Vec<(UserId, i64)> = record.votes.iter().map(|(u, v, _)| (*u, *v)).collect();
        let series = VoteSeries::new(votes.iter().map(|(_, v)| *v).collect())?;
        let classifier_score = match (&mut self.scorer, self.alpha > 0.0) {
            (Some(scorer), true) => scorer.score_story(&self.story_events[story as usize]),
            _ => 0.0,
        };
        let mut result =
            match settle(story, &series, classifier_score, self.alpha, self.config.consensus_threshold, forced) {
                Settlement::Ready(r) => r,
                Settlement::NotReady { .. } => return Ok(false),
            };
        let poster = self.posters[story as usize];
        result.reward_deltas = apply_rewards(
            &result,
            poster,
            &votes,
            self.truths[story as usize],
            &self.config.rewards,
            self.config.poster_reward_basis,
        );
        result.step = step;
        self.chain.settle_story(story, result.consensus_label, &result.reward_deltas, step)?;
        self.chain.commit();
        self.open.remove(&story);
        self.settlements.push(result);
        self.record_trace(step);
        Ok(true)
    }

    fn check_story(&mut self, story: StoryId, step: u64) -> Result<(), EngineError> {
        let votes = self.chain.story(story).expect("story exists").vote_values();
        let count = votes.len();
        let cap = count >= self.config.max_votes_per_story;
        let stable = count >= 4 && {
            let entropy = dynamics::vote_entropy(&votes)?;
            let lyap = dynamics::lyapunov_from_series(&VoteSeries::new(votes)?)?;
            dynamics::equilibrium(&lyap, entropy, &self.config.equilibrium, count)
        };
        if stable || cap {
            self.try_settle(story, step, cap)?;
        }
        Ok(())
    }

    fn pick_vote(&self, rng: &mut ChaCha8Rng) -> Option<(usize, StoryId)> {
        for _ in 0..AGENT_RESAMPLES {
            let agent = &self.population[rng.random_range(0..self.population.len())];
            let eligible: Vec<StoryId> = self
                .open
                .iter()
                .copied()
                .filter(|&s| {
                    self.posters[s as usize] != agent.id
                        && !self.chain.story(s).expect("open story exists").has_voted(agent.id)
                })
                .collect();
            if eligible.is_empty() {
                continue;
            }
            let preferred: Vec<StoryId> = if self.config.coalition_seeks_targets && agent.behavior.is_orchestrated() {
                eligible.iter().copied().filter(|&s| agent.targets.contains(&self.posters[s as usize])).collect()
            } else {
                Vec::new()
            };
            let pool = if preferred.is_empty() { &eligible } else { &preferred };
            let story = *pool.choose(rng).expect("non-empty pool");
            return Some((agent.id as usize, story));
        }
        None
    }
}

/// Runs one simulated world. Without a scorer the blend weight is forced to
/// zero (crowd-only settlement).
pub fn run_simulation(
    config: &ScenarioConfig,
    scorer: Option<&mut dyn StoryScorer>,
) -> Result<SimulationOutput, EngineError> {
    config.validate()?;
    let population = build_population(&config.population_config(), config.n_users)?;
    let truths = draw_story_truths(config.seed, config.n_stories, config.true_ratio);
    let mut poster_order: Vec<UserId> = (0..config.n_users as UserId).collect();
    poster_order.shuffle(&mut stream_rng(config.seed, STREAM_POSTERS));
    let posters: Vec<UserId> = (0..config.n_stories).map(|k| poster_order[k % config.n_users]).collect();

    let alpha = if scorer.is_some() { config.blend_alpha } else { 0.0 };
    let types: Vec<BehaviorType> =
        BehaviorType::ALL.iter().copied().filter(|t| population.iter().any(|a| a.behavior == *t)).collect();
    let mut run = Run {
        config,
        scorer,
        alpha,
        chain: Chain::new(),
        log: EventLog::default(),
        settlements: Vec::new(),
        population,
        truths,
        posters,
        story_events: vec![Vec::new(); config.n_stories],
        open: BTreeSet::new(),
        trace: ReputationTrace { types, rows: Vec::new() },
    };
    run.record_trace(0);

    let mut schedule_rng = stream_rng(config.seed, STREAM_SCHEDULE);
    let mut decision_rng = stream_rng(config.seed, STREAM_DECISIONS);
    let horizon = config.horizon();
    let mut next_story = 0usize;
    let mut skipped_slots = 0usize;
    for step in 0..horizon {
        let post_step = (next_story as u64 * horizon) / config.n_stories as u64;
        if next_story < config.n_stories && step == post_step {
            let story = next_story as StoryId;
            let poster = run.posters[next_story];
            let truth = run.truths[next_story];
            run.chain.post_story(poster, story, step)?;
            let quad = ActionQuadruple { user: poster, story, kind: EVENT_POST, vote: 1 };
            run.story_events[next_story].push(quad);
            run.log.events.push(Event {
                step,
                user: poster,
                story,
                kind: EVENT_POST,
                vote: 1,
                story_truth: Some(truth),
                malicious: Some(truth == -1),
            });
            run.open.insert(story);
            next_story += 1;
            continue;
        }
        let Some((agent_idx, story)) = run.pick_vote(&mut schedule_rng) else {
            skipped_slots += 1;
            continue;
        };
        let agent = &run.population[agent_idx];
        let view = StoryView { poster: run.posters[story as usize], truth: run.truths[story as usize] };
        let (vote, malicious) = agent.decide_vote(view, step, horizon, &mut decision_rng)?;
        let user = agent.id;
        run.chain.submit_vote(user, story, vote, step)?;
        run.story_events[story as usize].push(ActionQuadruple { user, story, kind: EVENT_VOTE, vote });
        run.log.events.push(Event {
            step,
            user,
            story,
            kind: EVENT_VOTE,
            vote,
            story_truth: Some(view.truth),
            malicious: Some(malicious),
        });
        run.check_story(story, step)?;
    }

    let end = horizon.saturating_sub(1);
    let remaining: Vec<StoryId> = run.open.iter().copied().collect();
    for story in remaining {
        run.try_settle(story, end, true)?;
    }
    run.chain.commit();
    debug_assert!(verify_chain(&run.chain));

    Ok(SimulationOutput {
        chain: run.chain,
        log: run.log,
        settlements: run.settlements,
        population: run.population,
        story_truths: run.truths,
        posters: run.posters,
        reputation_trace: run.trace,
        skipped_slots,
    })
}
