use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crowdledger::birdwatch::{
    dedup, parse_labels, parse_notes_path, parse_ratings_path, run_case_study, temporal_split, to_votes,
    BirdwatchError, ParseReport,
};
use crowdledger::classifiers::{ClassifierPair, TrainingConfig, TrainingRun};
use crowdledger::config::{json_digest, parse_config, read_sweep, ConfigError, RandomMixes, SweepRun};
use crowdledger::engine::{run_simulation, ScenarioConfig, SimulationOutput};
use crowdledger::experiment::{evaluate, run_pipeline, split_stories, train_models, EvaluationReport, SubsetReport};
use crowdledger::ledger::StoryId;
use crowdledger::metrics::{
    attack_impact_regression, format_ols_table, roc_band, RocCurve, RunMetrics, MIN_SWEEP_RUNS,
};
use crowdledger::population::BehaviorType;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Failure;
use crate::output::{num, OutputDir};

pub const ACTION_CHECKPOINT: &str = "action.ckpt";
pub const STORY_CHECKPOINT: &str = "story.ckpt";

/// Flags shared by the scenario commands.
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
}

pub fn load_scenario(path: &Path, o: &Overrides) -> Result<ScenarioConfig, Failure> {
    let mut config = parse_config(path)?;
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if let Some(alpha) = o.alpha {
        config.blend_alpha = alpha;
    }
    config.validate()?;
    Ok(config)
}

fn write_simulation(out: &mut OutputDir, sim: &SimulationOutput) -> Result<(), Failure> {
    out.write_with("events.csv", |buf| sim.log.write_csv(buf).map_err(Failure::from))?;
    out.write_with("chain.jsonl", |buf| sim.chain.export_jsonl(buf).map_err(|e| Failure::Runtime(e.to_string())))?;
    out.write_with("reputation.csv", |buf| sim.reputation_trace.write_csv(buf).map_err(Failure::from))?;

    let settlements: Vec<Vec<String>> = sim
        .settlements
        .iter()
        .map(|s| {
            vec![
                s.story_id.to_string(),
                sim.posters[s.story_id as usize].to_string(),
                sim.story_truths[s.story_id as usize].to_string(),
                num(s.crowd_score),
                num(s.classifier_score),
                num(s.final_score),
                s.consensus_label.to_string(),
                s.forced.to_string(),
                s.step.to_string(),
                s.vote_count.to_string(),
            ]
        })
        .collect();
    out.write_csv(
        "settlements.csv",
        &[
            "story",
            "poster",
            "truth",
            "crowd_score",
            "classifier_score",
            "final_score",
            "consensus_label",
            "forced",
            "step",
            "vote_count",
        ],
        &settlements,
    )?;

    let final_rep: Vec<Vec<String>> = sim
        .population
        .iter()
        .map(|a| vec![a.id.to_string(), a.behavior.name().to_string(), sim.chain.reputation(a.id).to_string()])
        .collect();
    out.write_csv("final_reputation.csv", &["user", "type", "reputation"], &final_rep)
}

pub fn simulate(config_path: &Path, o: &Overrides, out: PathBuf) -> Result<PathBuf, Failure> {
    let config = load_scenario(config_path, o)?;
    if o.alpha.is_some() {
        warn!("simulate runs crowd-only; --alpha is recorded in the config but has no effect");
    }
    let mut out = OutputDir::create(out)?;
    let sim = run_simulation(&config, None)?;
    info!("simulated {} events, {} settlements", sim.log.events.len(), sim.settlements.len());
    out.write_json("config.json", &config)?;
    write_simulation(&mut out, &sim)?;
    out.finish("simulate", Some(json_digest(&config)), Some(config.seed))
}

#[derive(Serialize)]
struct TrainingSummary<'a> {
    action: &'a TrainingRun,
    story: &'a TrainingRun,
}

fn split_rows(train: &BTreeSet<StoryId>, test: &BTreeSet<StoryId>) -> Vec<Vec<String>> {
    let mut rows: Vec<(StoryId, &str)> =
        train.iter().map(|s| (*s, "train")).chain(test.iter().map(|s| (*s, "test"))).collect();
    rows.sort();
    rows.into_iter().map(|(s, side)| vec![s.to_string(), side.to_string()]).collect()
}

pub fn train(config_path: &Path, o: &Overrides, out: PathBuf) -> Result<PathBuf, Failure> {
    let config = load_scenario(config_path, o)?;
    let mut out = OutputDir::create(out)?;
    let bootstrap = run_simulation(&config, None)?;
    let (train_set, test_set) = split_stories(config.n_stories, config.training.train_fraction, config.seed);
    let models = train_models(&bootstrap, &train_set, &config)?;
    info!(
        "trained on {} stories; action loss {:?} -> {:?}",
        train_set.len(),
        models.action_run.train_loss.first(),
        models.action_run.train_loss.last()
    );
    out.write_json("config.json", &config)?;
    out.write_with("bootstrap_events.csv", |buf| bootstrap.log.write_csv(buf).map_err(Failure::from))?;
    out.write_csv("split.csv", &["story", "subset"], &split_rows(&train_set, &test_set))?;
    out.write_json("training.json", &TrainingSummary { action: &models.action_run, story: &models.story_run })?;
    out.write_bytes(ACTION_CHECKPOINT, &models.pair.action.to_checkpoint().to_bytes())?;
    out.write_bytes(STORY_CHECKPOINT, &models.pair.story.to_checkpoint().to_bytes())?;
    out.finish("train", Some(json_digest(&config)), Some(config.seed))
}

fn load_checkpoints(dir: &Path, config: &ScenarioConfig) -> Result<ClassifierPair, Failure> {
    let (a, s) = (dir.join(ACTION_CHECKPOINT), dir.join(STORY_CHECKPOINT));
    for p in [&a, &s] {
        if !p.is_file() {
            return Err(Failure::Validation(format!(
                "missing checkpoint {}; run `crowdledger train` with the same --out first",
                p.display()
            )));
        }
    }
    let pair = ClassifierPair::load(&a, &s).map_err(|e| Failure::Validation(format!("unreadable checkpoint: {e}")))?;
    if pair.action.n_users() != config.n_users || pair.action.n_stories() != config.n_stories {
        return Err(Failure::Validation(format!(
            "checkpoint was trained for {} users / {} stories, config has {} / {}",
            pair.action.n_users(),
            pair.action.n_stories(),
            config.n_users,
            config.n_stories
        )));
    }
    Ok(pair)
}

fn metrics_row(name: &str, r: &SubsetReport) -> Vec<String> {
    let m = &r.metrics;
    vec![
        name.to_string(),
        r.stories.to_string(),
        r.counts.tp.to_string(),
        r.counts.fp.to_string(),
        r.counts.tn.to_string(),
        r.counts.fn_.to_string(),
        num(m.precision),
        num(m.recall),
        num(m.f1),
        num(m.accuracy),
        r.roc.as_ref().map_or(String::new(), |c| num(c.auc)),
    ]
}

const METRICS_HEADER: [&str; 11] =
    ["subset", "stories", "tp", "fp", "tn", "fn", "precision", "recall", "f1", "accuracy", "auc"];

fn roc_rows(curves: &[(&str, Option<&RocCurve>)]) -> Vec<Vec<String>> {
    curves
        .iter()
        .filter_map(|(name, c)| c.map(|c| (name, c)))
        .flat_map(|(name, c)| c.points.iter().map(move |(f, t)| vec![name.to_string(), num(*f), num(*t)]))
        .collect()
}

fn write_report(out: &mut OutputDir, report: &EvaluationReport) -> Result<(), Failure> {
    out.write_csv(
        "metrics.csv",
        &METRICS_HEADER,
        &[metrics_row("train", &report.train), metrics_row("test", &report.test)],
    )?;
    let detection: Vec<Vec<String>> =
        report.detection.iter().map(|(t, r)| vec![t.name().to_string(), num(*r)]).collect();
    out.write_csv("detection.csv", &["type", "detection_rate"], &detection)?;
    out.write_csv(
        "roc.csv",
        &["subset", "fpr", "tpr"],
        &roc_rows(&[("train", report.train.roc.as_ref()), ("test", report.test.roc.as_ref())]),
    )?;
    out.write_json("report.json", report)
}

pub fn evaluate_cmd(config_path: &Path, o: &Overrides, out: PathBuf) -> Result<PathBuf, Failure> {
    let config = load_scenario(config_path, o)?;
    let mut pair = load_checkpoints(&out, &config)?;
    let mut out = OutputDir::create(out)?.with_manifest_name("evaluate_manifest.json");
    let (train_set, test_set) = split_stories(config.n_stories, config.training.train_fraction, config.seed);
    let (sim, report) = evaluate(&config, &mut pair, &train_set, &test_set)?;
    info!("test accuracy {:.3}, f1 {:.3}", report.test.metrics.accuracy, report.test.metrics.f1);
    write_simulation(&mut out, &sim)?;
    write_report(&mut out, &report)?;
    out.finish("evaluate", Some(json_digest(&config)), Some(config.seed))
}

const DEFAULT_SWEEP_RUNS: usize = 100;
const ROC_GRID: usize = 101;

struct SweepOutcome {
    run: SweepRun,
    report: EvaluationReport,
}

pub fn sweep(
    config_path: &Path,
    runs: Option<usize>,
    jobs: Option<usize>,
    o: &Overrides,
    out: PathBuf,
) -> Result<PathBuf, Failure> {
    let mut spec = read_sweep(config_path)?;
    if let Some(seed) = o.seed {
        spec.base_seed = seed;
    }
    if let Some(alpha) = o.alpha {
        spec.scenario.blend_alpha = alpha;
    }
    if let Some(n) = runs {
        let mixes = spec.random_mixes.get_or_insert_with(RandomMixes::default);
        mixes.runs = n;
    } else if spec.cells.is_empty() {
        let mixes = spec.random_mixes.get_or_insert_with(RandomMixes::default);
        if mixes.runs == 0 {
            mixes.runs = DEFAULT_SWEEP_RUNS;
        }
    }
    spec.validate()?;
    let expanded = spec.expand()?;
    let mut out = OutputDir::create(out)?;
    out.write_json("sweep.json", &spec)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    info!("running {} sweep runs", expanded.len());
    let results: Vec<Result<SweepOutcome, Failure>> = pool.install(|| {
        expanded
            .into_par_iter()
            .map(|run| {
                let p = run_pipeline(&run.config)?;
                Ok(SweepOutcome { run, report: p.report })
            })
            .collect()
    });
    let outcomes: Vec<SweepOutcome> = results.into_iter().collect::<Result<_, _>>()?;

    let mut header: Vec<&str> = vec!["run", "cell", "seed", "n_users", "n_stories", "n_votes", "true_ratio"];
    header.extend(BehaviorType::ALL.iter().map(|t| t.name()));
    header.extend(["precision", "recall", "f1", "accuracy", "auc"]);
    let mut rows = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let c = &o.run.config;
        let mut row = vec![
            o.run.index.to_string(),
            o.run.cell.to_string(),
            c.seed.to_string(),
            c.n_users.to_string(),
            c.n_stories.to_string(),
            c.n_votes.to_string(),
            num(c.true_ratio),
        ];
        row.extend(BehaviorType::ALL.iter().map(|t| num(c.population.percentages.get(t).copied().unwrap_or(0.0))));
        let m = &o.report.test.metrics;
        row.extend([num(m.precision), num(m.recall), num(m.f1), num(m.accuracy)]);
        row.push(o.report.test.roc.as_ref().map_or(String::new(), |r| num(r.auc)));
        rows.push(row);
        out.write_json(&format!("runs/run_{:04}/report.json", o.run.index), &o.report)?;
    }
    out.write_csv("runs.csv", &header, &rows)?;

    if outcomes.len() >= MIN_SWEEP_RUNS {
        let metrics: Vec<RunMetrics> = outcomes
            .iter()
            .map(|o| RunMetrics {
                percentages: o.run.config.population.percentages.clone(),
                metrics: o.report.test.metrics,
            })
            .collect();
        match attack_impact_regression(&metrics) {
            Ok(ols) => {
                let mut rows = Vec::new();
                for (metric, r) in &ols {
                    for i in 0..r.names.len() {
                        rows.push(vec![
                            metric.clone(),
                            r.names[i].clone(),
                            num(r.coefficients[i]),
                            num(r.std_errors[i]),
                            num(r.t_stats[i]),
                            num(r.p_values[i]),
                            num(r.r_squared),
                        ]);
                    }
                }
                out.write_csv("ols.csv", &["metric", "term", "coef", "std_err", "t", "p_value", "r_squared"], &rows)?;
                out.write_text("ols.txt", &format_ols_table(&ols))?;
            }
            Err(e) => warn!("skipping OLS summary: {e}"),
        }
    } else {
        warn!("skipping OLS summary: {} runs, need at least {MIN_SWEEP_RUNS}", outcomes.len());
    }

    let mut by_cell: BTreeMap<usize, Vec<RocCurve>> = BTreeMap::new();
    for o in &outcomes {
        if let Some(c) = &o.report.test.roc {
            by_cell.entry(o.run.cell).or_default().push(c.clone());
        }
    }
    let (mut band_rows, mut auc_rows) = (Vec::new(), Vec::new());
    for (cell, curves) in by_cell.iter().filter(|(_, c)| c.len() >= 2) {
        let band = roc_band(curves, ROC_GRID, 0.95).map_err(|e| Failure::Runtime(e.to_string()))?;
        for i in 0..band.fpr.len() {
            band_rows.push(vec![
                cell.to_string(),
                num(band.fpr[i]),
                num(band.mean_tpr[i]),
                num(band.lower[i]),
                num(band.upper[i]),
            ]);
        }
        auc_rows.push(vec![cell.to_string(), curves.len().to_string(), num(band.mean_auc), num(band.auc_half_width)]);
    }
    if !band_rows.is_empty() {
        out.write_csv("roc_band.csv", &["cell", "fpr", "mean_tpr", "lower", "upper"], &band_rows)?;
        out.write_csv("roc_auc.csv", &["cell", "replicates", "mean_auc", "half_width"], &auc_rows)?;
    }
    out.finish("sweep", Some(json_digest(&spec)), Some(spec.base_seed))
}

/// Inputs of the Birdwatch case study. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BirdwatchConfig {
    pub notes: PathBuf,
    pub ratings: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub training: TrainingConfig,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_alpha() -> f64 {
    0.5
}

#[derive(Serialize)]
struct ImportSummary {
    notes: ParseReport,
    ratings: ParseReport,
    import: crowdledger::birdwatch::ImportReport,
    votes_after_dedup: usize,
    duplicate_fraction: f64,
    tweets: usize,
    participants: usize,
    labeled_tweets: usize,
    split_boundary: usize,
    train_stories: usize,
    test_stories: usize,
    straddling_stories: usize,
}

fn birdwatch_failure(e: BirdwatchError) -> Failure {
    match e {
        BirdwatchError::MissingColumn(_) | BirdwatchError::UnreadableFile { .. } | BirdwatchError::NoLabels => {
            Failure::Validation(e.to_string())
        }
        other => Failure::Runtime(other.to_string()),
    }
}

fn load_birdwatch_config(path: &Path) -> Result<BirdwatchConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::from(ConfigError::Unreadable { path: path.display().to_string(), reason: e.to_string() })
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::from(ConfigError::Parse(e.to_string())))?;
    let mut config: BirdwatchConfig =
        serde_json::from_value(value).map_err(|e| Failure::Validation(format!("invalid birdwatch config: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    config.notes = base.join(&config.notes);
    config.ratings = base.join(&config.ratings);
    config.labels = config.labels.map(|l| base.join(l));
    if !(0.0..=1.0).contains(&config.train_fraction) {
        return Err(Failure::Validation("train_fraction must lie in [0, 1]".into()));
    }
    if !(0.0..=1.0).contains(&config.alpha) {
        return Err(Failure::Validation("alpha must lie in [0, 1]".into()));
    }
    config.training.validate().map_err(|r| Failure::Validation(format!("invalid training config: {r}")))?;
    Ok(config)
}

pub fn birdwatch(config_path: &Path, o: &Overrides, out: PathBuf) -> Result<PathBuf, Failure> {
    let mut config = load_birdwatch_config(config_path)?;
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if let Some(alpha) = o.alpha {
        config.alpha = alpha;
    }
    let (notes, note_report) = parse_notes_path(&config.notes).map_err(birdwatch_failure)?;
    let (ratings, rating_report) = parse_ratings_path(&config.ratings).map_err(birdwatch_failure)?;
    let labels = match &config.labels {
        Some(p) => {
            let f = std::fs::File::open(p).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?;
            Some(parse_labels(f).map_err(birdwatch_failure)?)
        }
        None => None,
    };
    let (dataset, duplicate_fraction) = dedup(to_votes(&notes, &ratings));
    let dataset = match &labels {
        Some(l) => dataset.with_labels(l),
        None => dataset,
    };
    let split = temporal_split(&dataset, config.train_fraction);

    let mut out = OutputDir::create(out)?;
    out.write_json("config.json", &config)?;
    out.write_with("events.csv", |buf| dataset.to_event_log().write_csv(buf).map_err(Failure::from))?;
    let tweets: Vec<Vec<String>> =
        dataset.tweets.iter().enumerate().map(|(i, t)| vec![i.to_string(), t.clone()]).collect();
    out.write_csv("stories.csv", &["story", "tweet_id"], &tweets)?;
    let users: Vec<Vec<String>> =
        dataset.participants.iter().enumerate().map(|(i, p)| vec![i.to_string(), p.clone()]).collect();
    out.write_csv("users.csv", &["user", "participant_id"], &users)?;
    out.write_json(
        "import.json",
        &ImportSummary {
            notes: note_report,
            ratings: rating_report,
            import: dataset.report,
            votes_after_dedup: dataset.votes.len(),
            duplicate_fraction,
            tweets: dataset.tweets.len(),
            participants: dataset.participants.len(),
            labeled_tweets: dataset.labels.len(),
            split_boundary: split.boundary,
            train_stories: split.train_stories.len(),
            test_stories: split.test_stories.len(),
            straddling_stories: split.straddling,
        },
    )?;
    if labels.is_some() {
        let result = run_case_study(&dataset, config.train_fraction, config.alpha, &config.training, config.seed)
            .map_err(birdwatch_failure)?;
        out.write_json("case_study.json", &result)?;
        out.write_text("case_study.txt", &result.format_table())?;
    } else {
        info!("no labels supplied; skipping the case study");
    }
    out.finish("birdwatch", Some(json_digest(&config)), Some(config.seed))
}
