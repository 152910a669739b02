//! Simulated users: the behavior taxonomy and the vote/post decision rules.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::UserId;

#[derive(Debug, Error, PartialEq)]
pub enum PopulationError {
    #[error("bad percentages: {0}")]
    BadPercentages(String),
    #[error("population size must be at least 1")]
    EmptyPopulation,
    #[error("orchestrated agents need at least one target agent")]
    NoTargets,
    #[error("agent {0} cannot vote on its own story")]
    SelfVoteRequest(UserId),
    #[error("{0} must lie in [0, 1]")]
    OutOfUnitRange(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorType {
    Normal,
    Troll,
    Random,
    Traitor,
    OrchSlander,
    OrchWhitewash,
    Target,
}

impl BehaviorType {
    pub const ALL: [BehaviorType; 7] = [
        BehaviorType::Normal,
        BehaviorType::Troll,
        BehaviorType::Random,
        BehaviorType::Traitor,
        BehaviorType::OrchSlander,
        BehaviorType::OrchWhitewash,
        BehaviorType::Target,
    ];

    /// Types whose agents act against the crowd at least some of the time.
    pub const ATTACKERS: [BehaviorType; 5] = [
        BehaviorType::Troll,
        BehaviorType::Random,
        BehaviorType::Traitor,
        BehaviorType::OrchSlander,
        BehaviorType::OrchWhitewash,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BehaviorType::Normal => "normal",
            BehaviorType::Troll => "troll",
            BehaviorType::Random => "random",
            BehaviorType::Traitor => "traitor",
            BehaviorType::OrchSlander => "orch_slander",
            BehaviorType::OrchWhitewash => "orch_whitewash",
            BehaviorType::Target => "target",
        }
    }

    pub fn is_orchestrated(self) -> bool {
        matches!(self, BehaviorType::OrchSlander | BehaviorType::OrchWhitewash)
    }

    pub fn is_attacker(self) -> bool {
        !matches!(self, BehaviorType::Normal | BehaviorType::Target)
    }
}

impl std::fmt::Display for BehaviorType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub id: UserId,
    pub behavior: BehaviorType,
    /// Probability of judging a story correctly when following the honest rule.
    pub accuracy: f64,
    pub group_id: Option<u32>,
    pub targets: BTreeSet<UserId>,
    /// Fraction of the horizon a traitor behaves honestly before attacking.
    pub traitor_honest_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    pub percentages: BTreeMap<BehaviorType, f64>,
    pub accuracy_normal: f64,
    pub traitor_honest_fraction: f64,
    /// Taken from the scenario seed when embedded in a scenario config.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self::standard(0)
    }
}

impl PopulationConfig {
    pub fn new(percentages: impl IntoIterator<Item = (BehaviorType, f64)>, seed: u64) -> Self {
        PopulationConfig {
            percentages: percentages.into_iter().collect(),
            accuracy_normal: 0.9,
            traitor_honest_fraction: 0.6,
            seed,
        }
    }

    /// The 70/5/5/5/5 mix with 10% slander targets.
    pub fn standard(seed: u64) -> Self {
        Self::new(standard_mix(), seed)
    }

    pub fn validate(&self) -> Result<(), PopulationError> {
        validate_percentages(&self.percentages)?;
        for (name, v) in
            [("accuracy_normal", self.accuracy_normal), ("traitor_honest_fraction", self.traitor_honest_fraction)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(PopulationError::OutOfUnitRange(name));
            }
        }
        Ok(())
    }
}

pub fn standard_mix() -> BTreeMap<BehaviorType, f64> {
    BTreeMap::from([
        (BehaviorType::Normal, 70.0),
        (BehaviorType::Troll, 5.0),
        (BehaviorType::Random, 5.0),
        (BehaviorType::Traitor, 5.0),
        (BehaviorType::OrchSlander, 5.0),
        (BehaviorType::Target, 10.0),
    ])
}

/// The evaluation grid's mix for a given normal share: 10% targets and the
/// remaining share split evenly over troll, random, traitor and slandering
/// coalition members. `table_mix(70.0)` is the standard mix.
pub fn table_mix(normal: f64) -> BTreeMap<BehaviorType, f64> {
    let attack = (90.0 - normal) / 4.0;
    BTreeMap::from([
        (BehaviorType::Normal, normal),
        (BehaviorType::Troll, attack),
        (BehaviorType::Random, attack),
        (BehaviorType::Traitor, attack),
        (BehaviorType::OrchSlander, attack),
        (BehaviorType::Target, 10.0),
    ])
}

pub fn validate_percentages(p: &BTreeMap<BehaviorType, f64>) -> Result<(), PopulationError> {
    if let Some((t, v)) = p.iter().find(|(_, v)| !v.is_finite() || **v < 0.0) {
        return Err(PopulationError::BadPercentages(format!("{t} has invalid share {v}")));
    }
    let total: f64 = p.values().sum();
    if (total - 100.0).abs() > 1e-9 {
        return Err(PopulationError::BadPercentages(format!("shares sum to {total}, expected 100")));
    }
    Ok(())
}

/// Largest-remainder apportionment of `n` seats; ties go to the earlier type.
pub fn apportion(p: &BTreeMap<BehaviorType, f64>, n: usize) -> BTreeMap<BehaviorType, usize> {
    let quotas: Vec<(BehaviorType, f64)> =
        BehaviorType::ALL.iter().filter_map(|t| p.get(t).map(|pct| (*t, pct * n as f64 / 100.0))).collect();
    let mut counts: BTreeMap<BehaviorType, usize> = quotas.iter().map(|(t, q)| (*t, q.floor() as usize)).collect();
    let assigned: usize = counts.values().sum();
    let mut order: Vec<(usize, BehaviorType, f64)> =
        quotas.iter().enumerate().map(|(i, (t, q))| (i, *t, q - q.floor())).collect();
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    for (_, t, _) in order.into_iter().take(n.saturating_sub(assigned)) {
        *counts.get_mut(&t).expect("present") += 1;
    }
    counts
}

pub fn build_population(config: &PopulationConfig, n: usize) -> Result<Vec<AgentProfile>, PopulationError> {
    if n == 0 {
        return Err(PopulationError::EmptyPopulation);
    }
    config.validate()?;
    let counts = apportion(&config.percentages, n);
    let mut kinds: Vec<BehaviorType> = counts.iter().flat_map(|(t, c)| std::iter::repeat_n(*t, *c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    kinds.shuffle(&mut rng);

    let target_ids: Vec<UserId> =
        kinds.iter().enumerate().filter(|(_, k)| **k == BehaviorType::Target).map(|(i, _)| i as UserId).collect();
    let slanderers = counts.get(&BehaviorType::OrchSlander).copied().unwrap_or(0);
    let whitewashers = counts.get(&BehaviorType::OrchWhitewash).copied().unwrap_or(0);
    let (slander_targets, whitewash_targets): (BTreeSet<UserId>, BTreeSet<UserId>) =
        if slanderers > 0 && whitewashers > 0 {
            let half = target_ids.len().div_ceil(2);
            (target_ids[..half].iter().copied().collect(), target_ids[half..].iter().copied().collect())
        } else {
            (target_ids.iter().copied().collect(), target_ids.iter().copied().collect())
        };
    if (slanderers > 0 && slander_targets.is_empty()) || (whitewashers > 0 && whitewash_targets.is_empty()) {
        return Err(PopulationError::NoTargets);
    }

    Ok(kinds
        .into_iter()
        .enumerate()
        .map(|(i, behavior)| {
            let targets = match behavior {
                BehaviorType::OrchSlander => slander_targets.clone(),
                BehaviorType::OrchWhitewash => whitewash_targets.clone(),
                _ => BTreeSet::new(),
            };
            AgentProfile {
                id: i as UserId,
                behavior,
                accuracy: config.accuracy_normal,
                group_id: behavior.is_orchestrated().then_some(0),
                targets,
                traitor_honest_fraction: config.traitor_honest_fraction,
            }
        })
        .collect())
}

/// A story as seen by a voter: who posted it and its hidden truth (±1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoryView {
    pub poster: UserId,
    pub truth: i64,
}

impl AgentProfile {
    fn honest_vote<R: Rng + ?Sized>(&self, truth: i64, rng: &mut R) -> i64 {
        if rng.random::<f64>() < self.accuracy {
            truth
        } else {
            -truth
        }
    }

    /// Returns `(vote, malicious)` for this agent on `story` at `step` of a
    /// run lasting `horizon` steps.
    pub fn decide_vote<R: Rng + ?Sized>(
        &self,
        story: StoryView,
        step: u64,
        horizon: u64,
        rng: &mut R,
    ) -> Result<(i64, bool), PopulationError> {
        if story.poster == self.id {
            return Err(PopulationError::SelfVoteRequest(self.id));
        }
        let truth = story.truth;
        Ok(match self.behavior {
            BehaviorType::Normal | BehaviorType::Target => (self.honest_vote(truth, rng), false),
            BehaviorType::Troll => (-truth, true),
            BehaviorType::Random => (if rng.random::<bool>() { 1 } else { -1 }, true),
            BehaviorType::Traitor => {
                if (step as f64) < self.traitor_honest_fraction * horizon as f64 {
                    (self.honest_vote(truth, rng), false)
                } else {
                    (-truth, true)
                }
            }
            BehaviorType::OrchSlander if self.targets.contains(&story.poster) => (-1, true),
            BehaviorType::OrchWhitewash if self.targets.contains(&story.poster) => (1, true),
            BehaviorType::OrchSlander | BehaviorType::OrchWhitewash => (self.honest_vote(truth, rng), false),
        })
    }

    /// Draws the truth of a story this agent posts: `+1` with probability
    /// `true_ratio`. Posting a false story is the malicious act.
    pub fn decide_post<R: Rng + ?Sized>(&self, true_ratio: f64, rng: &mut R) -> (i64, bool) {
        let truth = if rng.random::<f64>() < true_ratio { 1 } else { -1 };
        (truth, truth == -1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_mix_matches_grid() {
        assert_eq!(table_mix(70.0), standard_mix());
        for n in [42.0, 50.0, 62.0, 70.0] {
            validate_percentages(&table_mix(n)).unwrap();
        }
        assert_eq!(table_mix(42.0)[&BehaviorType::Troll], 12.0);
        assert_eq!(table_mix(62.0)[&BehaviorType::Random], 7.0);
    }

    fn agent(behavior: BehaviorType) -> AgentProfile {
        AgentProfile {
            id: 1,
            behavior,
            accuracy: 1.0,
            group_id: None,
            targets: BTreeSet::from([7]),
            traitor_honest_fraction: 0.6,
        }
    }

    #[test]
    fn standard_mix_apportions_exactly() {
        let pop = build_population(&PopulationConfig::standard(3), 100).unwrap();
        let count = |t| pop.iter().filter(|a| a.behavior == t).count();
        assert_eq!(count(BehaviorType::Normal), 70);
        assert_eq!(count(BehaviorType::Troll), 5);
        assert_eq!(count(BehaviorType::Random), 5);
        assert_eq!(count(BehaviorType::Traitor), 5);
        assert_eq!(count(BehaviorType::OrchSlander), 5);
        assert_eq!(count(BehaviorType::Target), 10);
        let targets: BTreeSet<UserId> =
            pop.iter().filter(|a| a.behavior == BehaviorType::Target).map(|a| a.id).collect();
        for a in pop.iter().filter(|a| a.behavior.is_orchestrated()) {
            assert_eq!(a.targets, targets);
            assert_eq!(a.group_id, Some(0));
        }
        assert!(pop.iter().filter(|a| !a.behavior.is_orchestrated()).all(|a| a.targets.is_empty()));
    }

    #[test]
    fn single_normal_agent() {
        let cfg = PopulationConfig::new([(BehaviorType::Normal, 100.0)], 1);
        let pop = build_population(&cfg, 1).unwrap();
        assert_eq!(pop.len(), 1);
        assert_eq!(pop[0].behavior, BehaviorType::Normal);
    }

    #[test]
    fn bad_percentages() {
        let cfg = PopulationConfig::new([(BehaviorType::Normal, 90.0), (BehaviorType::Troll, 5.0)], 1);
        assert!(matches!(build_population(&cfg, 10), Err(PopulationError::BadPercentages(_))));
        let cfg = PopulationConfig::new([(BehaviorType::Normal, 110.0), (BehaviorType::Troll, -10.0)], 1);
        assert!(matches!(build_population(&cfg, 10), Err(PopulationError::BadPercentages(_))));
    }

    #[test]
    fn orchestrated_without_targets_is_rejected() {
        let cfg = PopulationConfig::new([(BehaviorType::Normal, 90.0), (BehaviorType::OrchSlander, 10.0)], 1);
        assert_eq!(build_population(&cfg, 20).unwrap_err(), PopulationError::NoTargets);
    }

    #[test]
    fn slander_and_whitewash_split_targets() {
        let cfg = PopulationConfig::new(
            [
                (BehaviorType::Normal, 80.0),
                (BehaviorType::OrchSlander, 5.0),
                (BehaviorType::OrchWhitewash, 5.0),
                (BehaviorType::Target, 10.0),
            ],
            9,
        );
        let pop = build_population(&cfg, 40).unwrap();
        let s = pop.iter().find(|a| a.behavior == BehaviorType::OrchSlander).unwrap();
        let w = pop.iter().find(|a| a.behavior == BehaviorType::OrchWhitewash).unwrap();
        assert_eq!(s.targets.len(), 2);
        assert_eq!(w.targets.len(), 2);
        assert!(s.targets.is_disjoint(&w.targets));
    }

    #[test]
    fn apportion_ties_go_to_earlier_type() {
        let p = BTreeMap::from([(BehaviorType::Normal, 50.0), (BehaviorType::Troll, 50.0)]);
        let c = apportion(&p, 3);
        assert_eq!(c[&BehaviorType::Normal], 2);
        assert_eq!(c[&BehaviorType::Troll], 1);
    }

    #[test]
    fn vote_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let story = StoryView { poster: 5, truth: 1 };
        assert_eq!(agent(BehaviorType::Troll).decide_vote(story, 0, 10, &mut rng).unwrap(), (-1, true));
        let false_story = StoryView { poster: 5, truth: -1 };
        assert_eq!(agent(BehaviorType::Normal).decide_vote(false_story, 0, 10, &mut rng).unwrap(), (-1, false));
        assert_eq!(agent(BehaviorType::OrchSlander).decide_vote(story, 0, 10, &mut rng).unwrap(), (1, false));
        let target_story = StoryView { poster: 7, truth: 1 };
        assert_eq!(agent(BehaviorType::OrchSlander).decide_vote(target_story, 0, 10, &mut rng).unwrap(), (-1, true));
        let target_false = StoryView { poster: 7, truth: -1 };
        assert_eq!(agent(BehaviorType::OrchWhitewash).decide_vote(target_false, 0, 10, &mut rng).unwrap(), (1, true));
        assert_eq!(agent(BehaviorType::Target).decide_vote(story, 0, 10, &mut rng).unwrap(), (1, false));
    }

    #[test]
    fn traitor_switches_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = agent(BehaviorType::Traitor);
        let story = StoryView { poster: 5, truth: 1 };
        assert_eq!(t.decide_vote(story, 59, 100, &mut rng).unwrap(), (1, false));
        assert_eq!(t.decide_vote(story, 60, 100, &mut rng).unwrap(), (-1, true));
    }

    #[test]
    fn self_vote_request() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let story = StoryView { poster: 1, truth: 1 };
        assert_eq!(
            agent(BehaviorType::Normal).decide_vote(story, 0, 10, &mut rng).unwrap_err(),
            PopulationError::SelfVoteRequest(1)
        );
    }

    #[test]
    fn post_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = agent(BehaviorType::Normal);
        for _ in 0..100 {
            assert_eq!(a.decide_post(1.0, &mut rng), (1, false));
            assert_eq!(a.decide_post(0.0, &mut rng), (-1, true));
        }
    }
}
