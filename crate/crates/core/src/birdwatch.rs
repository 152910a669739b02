//! Birdwatch-format ingestion: notes and ratings become votes on tweets.
//!
//! A note votes on its tweet (+1 for `NOT_MISLEADING`, -1 for misleading).
//! A rating that agrees with a note repeats the note's vote under the rater's
//! id; a disagreeing rating casts the opposite vote.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifiers::{train_story_classifier, ClassifierError, TrainingConfig};
use crate::engine::{Event, EventLog, EVENT_VOTE};
use crate::metrics::{classification_metrics, ClassificationMetrics, ConfusionCounts, MetricsError};

#[derive(Debug, Error)]
pub enum BirdwatchError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: String, reason: String },
    #[error("no labeled stories")]
    NoLabels,
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoteClass {
    NotMisleading,
    Misleading,
}

impl NoteClass {
    pub fn vote(self) -> i64 {
        match self {
            NoteClass::NotMisleading => 1,
            NoteClass::Misleading => -1,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "NOT_MISLEADING" => Some(NoteClass::NotMisleading),
            "MISINFORMED_OR_POTENTIALLY_MISLEADING" | "MISLEADING" => Some(NoteClass::Misleading),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoteClass::NotMisleading => "NOT_MISLEADING",
            NoteClass::Misleading => "MISINFORMED_OR_POTENTIALLY_MISLEADING",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub note_id: String,
    pub tweet_id: String,
    pub participant_id: String,
    pub classification: NoteClass,
    pub created_at_millis: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Agreement {
    Agree,
    Disagree,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub note_id: String,
    pub rater_participant_id: String,
    pub agreement: Agreement,
    pub created_at_millis: i64,
}

/// Rows dropped while parsing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub malformed: usize,
    /// Ratings with both agree and disagree set.
    pub contradictory: usize,
}

fn unreadable(path: &Path, e: impl std::fmt::Display) -> BirdwatchError {
    BirdwatchError::UnreadableFile { path: path.display().to_string(), reason: e.to_string() }
}

struct Table {
    columns: HashMap<String, usize>,
    rows: Vec<Option<csv::StringRecord>>,
}

impl Table {
    fn read<R: Read>(input: R) -> Result<Self, BirdwatchError> {
        let mut r = csv::ReaderBuilder::new().delimiter(b'\t').flexible(true).quoting(false).from_reader(input);
        let headers = r.headers().map_err(|e| unreadable(Path::new("<input>"), e))?.clone();
        let columns = headers.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect();
        let width = headers.len();
        let rows = r.records().map(|rec| rec.ok().filter(|rec| rec.len() == width)).collect();
        Ok(Table { columns, rows })
    }

    fn column(&self, names: &[&str]) -> Result<usize, BirdwatchError> {
        names
            .iter()
            .find_map(|n| self.columns.get(*n).copied())
            .ok_or_else(|| BirdwatchError::MissingColumn(names[0].to_string()))
    }
}

fn non_empty(s: &str) -> Option<String> {
    let s = s.trim();
    (!s.is_empty()).then(|| s.to_string())
}

pub fn parse_notes<R: Read>(input: R) -> Result<(Vec<NoteRecord>, ParseReport), BirdwatchError> {
    let t = Table::read(input)?;
    let (c_note, c_tweet, c_part, c_class, c_time) = (
        t.column(&["noteId"])?,
        t.column(&["tweetId"])?,
        t.column(&["participantId"])?,
        t.column(&["classification"])?,
        t.column(&["createdAtMillis"])?,
    );
    let mut report = ParseReport::default();
    let mut notes = Vec::new();
    for row in &t.rows {
        let parsed = row.as_ref().and_then(|r| {
            Some(NoteRecord {
                note_id: non_empty(&r[c_note])?,
                tweet_id: non_empty(&r[c_tweet])?,
                participant_id: non_empty(&r[c_part])?,
                classification: NoteClass::parse(&r[c_class])?,
                created_at_millis: r[c_time].trim().parse().ok()?,
            })
        });
        match parsed {
            Some(n) => notes.push(n),
            None => report.malformed += 1,
        }
    }
    Ok((notes, report))
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim() {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

pub fn parse_ratings<R: Read>(input: R) -> Result<(Vec<RatingRecord>, ParseReport), BirdwatchError> {
    let t = Table::read(input)?;
    let (c_note, c_rater, c_time, c_agree, c_disagree) = (
        t.column(&["noteId"])?,
        t.column(&["raterParticipantId", "participantId"])?,
        t.column(&["createdAtMillis"])?,
        t.column(&["agree"])?,
        t.column(&["disagree"])?,
    );
    let mut report = ParseReport::default();
    let mut ratings = Vec::new();
    for row in &t.rows {
        let parsed = row.as_ref().and_then(|r| {
            Some((
                non_empty(&r[c_note])?,
                non_empty(&r[c_rater])?,
                r[c_time].trim().parse::<i64>().ok()?,
                parse_flag(&r[c_agree])?,
                parse_flag(&r[c_disagree])?,
            ))
        });
        let Some((note_id, rater, time, agree, disagree)) = parsed else {
            report.malformed += 1;
            continue;
        };
        let agreement = match (agree, disagree) {
            (true, true) => {
                report.contradictory += 1;
                continue;
            }
            (true, false) => Agreement::Agree,
            (false, true) => Agreement::Disagree,
            (false, false) => Agreement::None,
        };
        ratings.push(RatingRecord { note_id, rater_participant_id: rater, agreement, created_at_millis: time });
    }
    Ok((ratings, report))
}

pub fn parse_notes_path(path: &Path) -> Result<(Vec<NoteRecord>, ParseReport), BirdwatchError> {
    parse_notes(std::fs::File::open(path).map_err(|e| unreadable(path, e))?)
}

pub fn parse_ratings_path(path: &Path) -> Result<(Vec<RatingRecord>, ParseReport), BirdwatchError> {
    parse_ratings(std::fs::File::open(path).map_err(|e| unreadable(path, e))?)
}

/// Tweet labels from a `tweetId,label` CSV with `true`/`false` labels.
pub fn parse_labels<R: Read>(input: R) -> Result<BTreeMap<String, i64>, BirdwatchError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| unreadable(Path::new("<labels>"), e))?.clone();
    let col = |n: &str| {
        headers.iter().position(|h| h.trim() == n).ok_or_else(|| BirdwatchError::MissingColumn(n.to_string()))
    };
    let (c_tweet, c_label) = (col("tweetId")?, col("label")?);
    let mut labels = BTreeMap::new();
    for rec in r.records().flatten() {
        let value = match rec.get(c_label).map(|s| s.trim().to_ascii_lowercase()) {
            Some(s) if s == "true" => 1,
            Some(s) if s == "false" => -1,
            _ => continue,
        };
        if let Some(t) = rec.get(c_tweet).and_then(non_empty) {
            labels.insert(t, value);
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportedVote {
    pub user: u64,
    pub story: u64,
    pub value: i64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub note_votes: usize,
    pub rating_votes: usize,
    pub orphan_ratings: usize,
    pub none_ratings: usize,
}

/// Tweets and participants re-indexed densely by first appearance in time order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImportedDataset {
    /// Dense story id → tweet id.
    pub tweets: Vec<String>,
    /// Dense user id → participant id.
    pub participants: Vec<String>,
    pub votes: Vec<ImportedVote>,
    /// Ground truth by dense story id, where known.
    pub labels: BTreeMap<u64, i64>,
    pub report: ImportReport,
}

impl ImportedDataset {
    pub fn story_index(&self, tweet: &str) -> Option<u64> {
        self.tweets.iter().position(|t| t == tweet).map(|i| i as u64)
    }

    pub fn user_index(&self, participant: &str) -> Option<u64> {
        self.participants.iter().position(|p| p == participant).map(|i| i as u64)
    }

    /// Attaches labels keyed by tweet id; unknown tweets are ignored.
    pub fn with_labels(mut self, labels: &BTreeMap<String, i64>) -> Self {
        let index: HashMap<&str, u64> = self.tweets.iter().enumerate().map(|(i, t)| (t.as_str(), i as u64)).collect();
        self.labels = labels.iter().filter_map(|(t, l)| index.get(t.as_str()).map(|i| (*i, *l))).collect();
        self
    }

    /// Vote values per story, in time order.
    pub fn votes_by_story(&self) -> BTreeMap<u64, Vec<i64>> {
        let mut map: BTreeMap<u64, Vec<i64>> = BTreeMap::new();
        for v in &self.votes {
            map.entry(v.story).or_default().push(v.value);
        }
        map
    }

    /// The engine's event-log dialect: one vote event per row, step = time
    /// rank, malice unknown.
    pub fn to_event_log(&self) -> EventLog {
        EventLog {
            events: self
                .votes
                .iter()
                .enumerate()
                .map(|(i, v)| Event {
                    step: i as u64,
                    user: v.user,
                    story: v.story,
                    kind: EVENT_VOTE,
                    vote: v.value,
                    story_truth: self.labels.get(&v.story).copied(),
                    malicious: None,
                })
                .collect(),
        }
    }
}

/// Maps notes and ratings to time-ordered votes.
pub fn to_votes(notes: &[NoteRecord], ratings: &[RatingRecord]) -> ImportedDataset {
    let by_note: HashMap<&str, &NoteRecord> = notes.iter().map(|n| (n.note_id.as_str(), n)).collect();
    let mut report = ImportReport::default();
    let mut raw: Vec<(&str, &str, i64, i64)> = Vec::with_capacity(notes.len() + ratings.len());
    for n in notes {
        raw.push((n.participant_id.as_str(), n.tweet_id.as_str(), n.classification.vote(), n.created_at_millis));
        report.note_votes += 1;
    }
    for r in ratings {
        let Some(note) = by_note.get(r.note_id.as_str()) else {
            report.orphan_ratings += 1;
            continue;
        };
        let value = match r.agreement {
            Agreement::Agree => note.classification.vote(),
            Agreement::Disagree => -note.classification.vote(),
            Agreement::None => {
                report.none_ratings += 1;
                continue;
            }
        };
        raw.push((r.rater_participant_id.as_str(), note.tweet_id.as_str(), value, r.created_at_millis));
        report.rating_votes += 1;
    }
    raw.sort_by_key(|v| v.3);

    let mut users: HashMap<&str, u64> = HashMap::new();
    let mut stories: HashMap<&str, u64> = HashMap::new();
    let mut dataset = ImportedDataset { report, ..ImportedDataset::default() };
    for (participant, tweet, value, timestamp) in raw {
        let user = *users.entry(participant).or_insert_with(|| {
            dataset.participants.push(participant.to_string());
            dataset.participants.len() as u64 - 1
        });
        let story = *stories.entry(tweet).or_insert_with(|| {
            dataset.tweets.push(tweet.to_string());
            dataset.tweets.len() as u64 - 1
        });
        dataset.votes.push(ImportedVote { user, story, value, timestamp });
    }
    dataset
}

/// Removes repeated `(user, story, value)` votes, keeping the earliest.
/// Returns the fraction of votes removed.
pub fn dedup(mut dataset: ImportedDataset) -> (ImportedDataset, f64) {
    let before = dataset.votes.len();
    let mut seen = HashSet::new();
    dataset.votes.retain(|v| seen.insert((v.user, v.story, v.value)));
    let removed = before - dataset.votes.len();
    let fraction = if before == 0 { 0.0 } else { removed as f64 / before as f64 };
    (dataset, fraction)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalSplit {
    /// Votes before this index form the training side.
    pub boundary: usize,
    pub train_stories: BTreeSet<u64>,
    pub test_stories: BTreeSet<u64>,
    /// Stories with votes on both sides, assigned to test.
    pub straddling: usize,
}

/// Splits at vote index `floor(n · train_fraction)`; a story belongs to
/// test if any of its votes falls at or after the boundary.
pub fn temporal_split(dataset: &ImportedDataset, train_fraction: f64) -> TemporalSplit {
    let n = dataset.votes.len();
    let boundary = ((n as f64) * train_fraction.clamp(0.0, 1.0)).floor() as usize;
    let before: BTreeSet<u64> = dataset.votes[..boundary].iter().map(|v| v.story).collect();
    let after: BTreeSet<u64> = dataset.votes[boundary..].iter().map(|v| v.story).collect();
    TemporalSplit {
        boundary,
        straddling: before.intersection(&after).count(),
        train_stories: before.difference(&after).copied().collect(),
        test_stories: after,
    }
}

/// Published results of the HawkEye reputation system on the same data, in percent.
pub const HAWKEYE_SUPERVISED: (u32, u32, u32) = (85, 74, 76);
pub const HAWKEYE_UNSUPERVISED: (u32, u32, u32) = (79, 78, 78);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyResult {
    pub train: ClassificationMetrics,
    pub test: Option<ClassificationMetrics>,
    pub train_stories: usize,
    pub test_stories: usize,
    pub straddling: usize,
    pub alpha: f64,
}

impl CaseStudyResult {
    /// Precision, recall and F1 in percent next to the HawkEye rows.
    pub fn format_table(&self) -> String {
        let pct = |v: f64| format!("{:.0}", v * 100.0);
        let test = |f: fn(&ClassificationMetrics) -> f64| self.test.as_ref().map_or("-".to_string(), |m| pct(f(m)));
        let mut s = format!(
            "{:<10}{:>22}{:>24}{:>12}{:>12}\n",
            "metric", "HawkEye supervised", "HawkEye unsupervised", "ours train", "ours test"
        );
        let rows: [(&str, u32, u32, fn(&ClassificationMetrics) -> f64); 3] = [
            ("precision", HAWKEYE_SUPERVISED.0, HAWKEYE_UNSUPERVISED.0, |m| m.precision),
            ("recall", HAWKEYE_SUPERVISED.1, HAWKEYE_UNSUPERVISED.1, |m| m.recall),
            ("f1", HAWKEYE_SUPERVISED.2, HAWKEYE_UNSUPERVISED.2, |m| m.f1),
        ];
        for (name, sup, unsup, f) in rows {
            s.push_str(&format!("{name:<10}{sup:>22}{unsup:>24}{:>12}{:>12}\n", pct(f(&self.train)), test(f)));
        }
        s
    }
}

/// Trains the story classifier on the vote sequences of labeled training
/// stories (malice is unknown, so the action stage is skipped and vote values
/// stand in for action scores), then labels each story by blending its
/// prediction with the crowd mean.
pub fn run_case_study(
    dataset: &ImportedDataset,
    train_fraction: f64,
    alpha: f64,
    config: &TrainingConfig,
    seed: u64,
) -> Result<CaseStudyResult, BirdwatchError> {
    if dataset.labels.is_empty() {
        return Err(BirdwatchError::NoLabels);
    }
    let split = temporal_split(dataset, train_fraction);
    let sequences = dataset.votes_by_story();
    let labeled = |stories: &BTreeSet<u64>| -> Vec<(u64, Vec<f64>, i64)> {
        stories
            .iter()
            .filter_map(|s| {
                let label = *dataset.labels.get(s)?;
                let seq = sequences.get(s)?.iter().map(|v| *v as f64).collect();
                Some((*s, seq, label))
            })
            .collect()
    };
    let train = labeled(&split.train_stories);
    let test = labeled(&split.test_stories);
    if train.is_empty() {
        return Err(BirdwatchError::NoLabels);
    }
    let data: Vec<(Vec<f64>, i64)> = train.iter().map(|(_, s, l)| (s.clone(), *l)).collect();
    let (mut model, _) = train_story_classifier(&data, config, seed)?;

    let mut evaluate = |items: &[(u64, Vec<f64>, i64)]| -> Result<Option<ClassificationMetrics>, BirdwatchError> {
        if items.is_empty() {
            return Ok(None);
        }
        let mut pairs = Vec::with_capacity(items.len());
        for (_, seq, label) in items {
            let crowd = seq.iter().sum::<f64>() / seq.len().max(1) as f64;
            let final_score = alpha * model.predict(seq)? + (1.0 - alpha) * crowd;
            pairs.push((if final_score >= 0.0 { 1 } else { -1 }, *label));
        }
        Ok(Some(classification_metrics(&ConfusionCounts::from_pairs(pairs))?))
    };
    let train_metrics = evaluate(&train)?.expect("non-empty training set");
    let test_metrics = evaluate(&test)?;
    Ok(CaseStudyResult {
        train: train_metrics,
        test: test_metrics,
        train_stories: train.len(),
        test_stories: test.len(),
        straddling: split.straddling,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const NOTES: &str = "noteId\ttweetId\tparticipantId\tclassification\tcreatedAtMillis\n\
        n1\tt1\tp1\tMISINFORMED_OR_POTENTIALLY_MISLEADING\t100\n\
        n2\tt2\tp2\tNOT_MISLEADING\t200\n\
        n3\tt1\tp3\tNOT_MISLEADING\t300\n";

    #[test]
    fn parses_well_formed_notes() {
        let (notes, report) = parse_notes(NOTES.as_bytes()).unwrap();
        assert_eq!(notes.len(), 3);
        assert_eq!(report.malformed, 0);
        assert_eq!(notes[0].classification, NoteClass::Misleading);
    }

    #[test]
    fn missing_classification_column() {
        let text = "noteId\ttweetId\tparticipantId\tcreatedAtMillis\nn1\tt1\tp1\t5\n";
        assert!(matches!(parse_notes(text.as_bytes()), Err(BirdwatchError::MissingColumn(c)) if c == "classification"));
    }

    #[test]
    fn mapping_follows_agreement() {
        let (notes, _) = parse_notes(NOTES.as_bytes()).unwrap();
        let ratings = "noteId\traterParticipantId\tcreatedAtMillis\tagree\tdisagree\n\
            n1\tr1\t400\t1\t0\n\
            n2\tr2\t500\t0\t1\n\
            n2\tr3\t600\t0\t0\n\
            n9\tr4\t700\t1\t0\n\
            n1\tr5\t800\t1\t1\n";
        let (ratings, report) = parse_ratings(ratings.as_bytes()).unwrap();
        assert_eq!(report.contradictory, 1);
        let ds = to_votes(&notes, &ratings);
        let t1 = ds.story_index("t1").unwrap();
        let t2 = ds.story_index("t2").unwrap();
        let r1 = ds.user_index("r1").unwrap();
        let r2 = ds.user_index("r2").unwrap();
        assert!(ds.votes.contains(&ImportedVote { user: 0, story: t1, value: -1, timestamp: 100 }));
        assert!(ds.votes.contains(&ImportedVote { user: r1, story: t1, value: -1, timestamp: 400 }));
        assert!(ds.votes.contains(&ImportedVote { user: r2, story: t2, value: -1, timestamp: 500 }));
        assert_eq!(ds.report.orphan_ratings, 1);
        assert_eq!(ds.report.none_ratings, 1);
        assert_eq!(ds.votes.len(), 5);
    }

    #[test]
    fn split_assigns_straddlers_to_test() {
        let votes = vec![
            ImportedVote { user: 0, story: 0, value: 1, timestamp: 0 },
            ImportedVote { user: 1, story: 1, value: 1, timestamp: 1 },
            ImportedVote { user: 2, story: 0, value: 1, timestamp: 2 },
            ImportedVote { user: 3, story: 2, value: 1, timestamp: 3 },
        ];
        let ds = ImportedDataset { votes, ..ImportedDataset::default() };
        let s = temporal_split(&ds, 0.5);
        assert_eq!(s.boundary, 2);
        assert_eq!(s.train_stories, BTreeSet::from([1]));
        assert_eq!(s.test_stories, BTreeSet::from([0, 2]));
        assert_eq!(s.straddling, 1);
        assert!(temporal_split(&ds, 1.0).test_stories.is_empty());
    }

    #[test]
    fn no_labels_rejected() {
        let (notes, _) = parse_notes(NOTES.as_bytes()).unwrap();
        let ds = to_votes(&notes, &[]);
        assert!(matches!(run_case_study(&ds, 0.8, 0.5, &TrainingConfig::default(), 0), Err(BirdwatchError::NoLabels)));
    }
}
