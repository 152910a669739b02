//! Strict JSON scenario and sweep configuration.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{stream_rng, EngineError, ScenarioConfig};
use crate::population::{validate_percentages, BehaviorType};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("config is not valid JSON: {0}")]
    Parse(String),
    #[error("invalid config field `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

impl From<EngineError> for ConfigError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::ConfigInvalid { field, reason } => ConfigError::Validation { field, reason },
            other => ConfigError::Validation { field: "config".into(), reason: other.to_string() },
        }
    }
}

fn schema_error(e: serde_json::Error) -> ConfigError {
    let msg = e.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
        .unwrap_or("config")
        .to_string();
    ConfigError::Validation { field, reason: msg }
}

fn read_json(path: &Path) -> Result<serde_json::Value, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Unreadable { path: path.display().to_string(), reason: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
}

/// Parses and validates a scenario config. Syntax errors are `Parse`;
/// unknown keys, missing required keys and out-of-range values are `Validation`.
pub fn parse_config_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    config_from_value(value)
}

pub fn parse_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    config_from_value(read_json(path)?)
}

fn config_from_value(value: serde_json::Value) -> Result<ScenarioConfig, ConfigError> {
    let config: ScenarioConfig = serde_json::from_value(value).map_err(schema_error)?;
    config.validate()?;
    Ok(config)
}

/// SHA-256 of the compact JSON serialization, lowercase hex.
pub fn json_digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes to JSON");
    hex::encode(Sha256::digest(&bytes))
}

pub fn config_digest(config: &ScenarioConfig) -> String {
    json_digest(config)
}

/// One explicit sweep cell: a mix, and optionally a users/stories/votes
/// triple and a true-story ratio replacing the template's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub percentages: BTreeMap<BehaviorType, f64>,
    #[serde(default)]
    pub usv: Option<[usize; 3]>,
    #[serde(default)]
    pub true_ratio: Option<f64>,
}

/// One run of an expanded sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub index: usize,
    /// Index of the mix (explicit cell or random draw) this run replicates.
    pub cell: usize,
    pub config: ScenarioConfig,
}

/// Random mixes: normal share uniform in `[normal_min, normal_max]`, the
/// rest spread over troll, random, traitor, orchestrated and target with at
/// least `min_share` each. The orchestrated share is split evenly between
/// slandering and whitewashing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomMixes {
    pub runs: usize,
    pub normal_min: f64,
    pub normal_max: f64,
    pub min_share: f64,
}

impl Default for RandomMixes {
    fn default() -> Self {
        RandomMixes { runs: 100, normal_min: 30.0, normal_max: 70.0, min_share: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Template for every run; its seed and mix are replaced per run.
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub cells: Vec<SweepCell>,
    #[serde(default)]
    pub random_mixes: Option<RandomMixes>,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub base_seed: u64,
}

const STREAM_MIXES: u64 = 20;

fn one() -> usize {
    1
}

fn sweep_invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Validation { field: field.to_string(), reason: reason.into() }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate()?;
        if self.replicates == 0 {
            return Err(sweep_invalid("replicates", "must be positive"));
        }
        let random_runs = self.random_mixes.as_ref().map_or(0, |r| r.runs);
        if self.cells.is_empty() && random_runs == 0 {
            return Err(sweep_invalid("cells", "sweep grid is empty"));
        }
        for (i, cell) in self.cells.iter().enumerate() {
            validate_percentages(&cell.percentages)
                .map_err(|e| sweep_invalid(&format!("cells[{i}]"), e.to_string()))?;
            if let Some([u, s, v]) = cell.usv {
                if u < 2 || s == 0 || v < s {
                    return Err(sweep_invalid(
                        &format!("cells[{i}].usv"),
                        "need users >= 2, stories >= 1, votes >= stories",
                    ));
                }
            }
        }
        if let Some(r) = &self.random_mixes {
            if !(0.0 <= r.normal_min && r.normal_min <= r.normal_max && r.normal_max + 5.0 * r.min_share <= 100.0)
                || r.min_share < 0.0
            {
                return Err(sweep_invalid("random_mixes", "bounds leave no room for the other types"));
            }
        }
        Ok(())
    }

    /// Every run of the sweep: explicit cells (each replicated), then random
    /// mixes (each replicated). Run `i` uses seed `base_seed + i`.
    pub fn expand(&self) -> Result<Vec<SweepRun>, ConfigError> {
        self.validate()?;
        let mut cells = self.cells.clone();
        if let Some(r) = &self.random_mixes {
            let mut rng = stream_rng(self.base_seed, STREAM_MIXES);
            for _ in 0..r.runs {
                cells.push(SweepCell { percentages: random_mix(r, &mut rng), usv: None, true_ratio: None });
            }
        }
        let mut runs = Vec::with_capacity(cells.len() * self.replicates);
        for (cell_index, cell) in cells.iter().enumerate() {
            for _ in 0..self.replicates {
                let index = runs.len();
                let mut c = self.scenario.clone();
                c.seed = self.base_seed + index as u64;
                c.population.percentages = cell.percentages.clone();
                if let Some([u, s, v]) = cell.usv {
                    (c.n_users, c.n_stories, c.n_votes) = (u, s, v);
                }
                if let Some(r) = cell.true_ratio {
                    c.true_ratio = r;
                }
                c.validate().map_err(|e| match ConfigError::from(e) {
                    ConfigError::Validation { field, reason } => {
                        ConfigError::Validation { field: format!("cells[{cell_index}].{field}"), reason }
                    }
                    other => other,
                })?;
                runs.push(SweepRun { index, cell: cell_index, config: c });
            }
        }
        Ok(runs)
    }
}

/// Draws one mix in units of 0.1 percent so shares sum to exactly 100.
pub fn random_mix<R: Rng + ?Sized>(spec: &RandomMixes, rng: &mut R) -> BTreeMap<BehaviorType, f64> {
    let lo = (spec.normal_min * 10.0).round() as i64;
    let hi = (spec.normal_max * 10.0).round() as i64;
    let min = (spec.min_share * 10.0).round() as i64;
    let normal = rng.random_range(lo..=hi);
    let free = 1000 - normal - 5 * min;
    let mut cuts: Vec<i64> = (0..4).map(|_| rng.random_range(0..=free)).collect();
    cuts.push(0);
    cuts.push(free);
    cuts.sort_unstable();
    let mut parts: Vec<i64> = cuts.windows(2).map(|w| w[1] - w[0] + min).collect();
    parts.shuffle(rng);
    let share = |units: i64| units as f64 / 10.0;
    let orch = parts[3];
    BTreeMap::from([
        (BehaviorType::Normal, share(normal)),
        (BehaviorType::Troll, share(parts[0])),
        (BehaviorType::Random, share(parts[1])),
        (BehaviorType::Traitor, share(parts[2])),
        (BehaviorType::OrchSlander, share(orch - orch / 2)),
        (BehaviorType::OrchWhitewash, share(orch / 2)),
        (BehaviorType::Target, share(parts[4])),
    ])
}

pub fn parse_sweep(path: &Path) -> Result<SweepSpec, ConfigError> {
    let spec = read_sweep(path)?;
    spec.validate()?;
    Ok(spec)
}

/// Reads a sweep spec without validating it, for callers that apply
/// overrides first and validate afterwards.
pub fn read_sweep(path: &Path) -> Result<SweepSpec, ConfigError> {
    serde_json::from_value(read_json(path)?).map_err(schema_error)
}

pub fn parse_sweep_str(text: &str) -> Result<SweepSpec, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let spec: SweepSpec = serde_json::from_value(value).map_err(schema_error)?;
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config_str(r#"{"n_users":100,"n_stories":200,"n_votes":1000,"seed":7}"#).unwrap();
        assert_eq!(c.consensus_threshold, 0.5);
        assert_eq!(c.blend_alpha, 0.5);
        assert_eq!(c.equilibrium.tau, 0.9);
        assert_eq!(c.equilibrium.c_min, 10);
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn unknown_key_is_validation_error() {
        let e = parse_config_str(r#"{"n_users":100,"n_stories":200,"n_votes":1000,"seed":7,"foo":1}"#).unwrap_err();
        assert!(matches!(e, ConfigError::Validation { ref field, .. } if field == "foo"), "{e:?}");
    }

    #[test]
    fn bad_percentages_rejected() {
        let e = parse_config_str(
            r#"{"n_users":100,"n_stories":200,"n_votes":1000,"seed":7,
                "population":{"percentages":{"normal":80,"troll":10}}}"#,
        )
        .unwrap_err();
        assert!(matches!(e, ConfigError::Validation { ref field, .. } if field == "population"), "{e:?}");
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(parse_config_str("{"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn random_mixes_respect_bounds() {
        let spec = RandomMixes::default();
        let mut rng = stream_rng(3, 0);
        for _ in 0..500 {
            let m = random_mix(&spec, &mut rng);
            validate_percentages(&m).unwrap();
            let n = m[&BehaviorType::Normal];
            assert!((30.0..=70.0).contains(&n));
            for t in [BehaviorType::Troll, BehaviorType::Random, BehaviorType::Traitor, BehaviorType::Target] {
                assert!(m[&t] >= 5.0);
            }
            assert!(m[&BehaviorType::OrchSlander] + m[&BehaviorType::OrchWhitewash] >= 5.0);
        }
    }

    #[test]
    fn empty_grid_rejected() {
        let spec = SweepSpec {
            scenario: ScenarioConfig::new(10, 10, 20, 0),
            cells: vec![],
            random_mixes: None,
            replicates: 1,
            base_seed: 0,
        };
        assert!(matches!(spec.validate(), Err(ConfigError::Validation { .. })));
    }
}
