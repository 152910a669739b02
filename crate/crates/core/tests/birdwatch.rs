use std::collections::BTreeMap;
use std::path::PathBuf;

use crowdledger::birdwatch::{
    dedup, parse_labels, parse_notes, parse_notes_path, parse_ratings_path, run_case_study, temporal_split, to_votes,
    Agreement, BirdwatchError, ImportedVote, NoteClass, NoteRecord, RatingRecord,
};
use crowdledger::classifiers::TrainingConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/birdwatch").join(name)
}

/// The fixture's expected import, worked out by hand from the two files.
#[test]
fn fixture_round_trip_is_exact() {
    let (notes, note_report) = parse_notes_path(&fixture("notes.tsv")).unwrap();
    let (ratings, rating_report) = parse_ratings_path(&fixture("ratings.tsv")).unwrap();
    assert_eq!(notes.len(), 4);
    assert_eq!(note_report.malformed, 1);
    assert_eq!(ratings.len(), 7);
    assert_eq!(rating_report.contradictory, 1);

    let dataset = to_votes(&notes, &ratings);
    assert_eq!(dataset.report.note_votes, 4);
    assert_eq!(dataset.report.rating_votes, 5);
    assert_eq!(dataset.report.orphan_ratings, 1);
    assert_eq!(dataset.report.none_ratings, 1);
    assert_eq!(dataset.participants, ["p1", "p2", "p3", "p4"]);
    assert_eq!(dataset.tweets, ["t1", "t2", "t3"]);
    let v = |user, story, value, timestamp| ImportedVote { user, story, value, timestamp };
    let expected = vec![
        v(0, 0, -1, 1000),
        v(1, 0, -1, 1500),
        v(1, 1, 1, 2000),
        v(0, 1, -1, 2500),
        v(2, 0, -1, 3000),
        v(3, 0, -1, 3500),
        v(0, 2, 1, 4000),
        v(1, 0, -1, 5000),
        v(3, 2, 1, 6000),
    ];
    assert_eq!(dataset.votes, expected);

    let (deduped, fraction) = dedup(dataset);
    assert_eq!(fraction, 1.0 / 9.0);
    assert_eq!(deduped.votes.len(), 8);
    assert!(!deduped.votes.contains(&v(1, 0, -1, 5000)));
    // Notes + usable ratings - duplicates.
    assert_eq!(deduped.votes.len(), 4 + 5 - 1);

    let split = temporal_split(&deduped, 0.8);
    assert_eq!(split.boundary, 6);
    assert_eq!(split.train_stories.iter().copied().collect::<Vec<_>>(), [0, 1]);
    assert_eq!(split.test_stories.iter().copied().collect::<Vec<_>>(), [2]);
    assert_eq!(split.straddling, 0);

    let labels = parse_labels(std::fs::File::open(fixture("labels.csv")).unwrap()).unwrap();
    let labeled = deduped.with_labels(&labels);
    assert_eq!(labeled.labels, BTreeMap::from([(0, -1), (1, 1), (2, 1)]));
    let log = labeled.to_event_log();
    assert_eq!(log.events.len(), 8);
    assert!(log.events.iter().all(|e| e.malicious.is_none()));
}

#[test]
fn missing_column_reported() {
    let text = "noteId\ttweetId\tparticipantId\tcreatedAtMillis\nn1\tt1\tp1\t1\n";
    assert!(matches!(parse_notes(text.as_bytes()), Err(BirdwatchError::MissingColumn(c)) if c == "classification"));
}

#[test]
fn one_malformed_row_among_ten() {
    let mut text = String::from("noteId\ttweetId\tparticipantId\tclassification\tcreatedAtMillis\n");
    for i in 0..10 {
        let time = if i == 4 { "soon".to_string() } else { (i * 10).to_string() };
        text.push_str(&format!("n{i}\tt{i}\tp{i}\tNOT_MISLEADING\t{time}\n"));
    }
    let (notes, report) = parse_notes(text.as_bytes()).unwrap();
    assert_eq!((notes.len(), report.malformed), (9, 1));
}

#[test]
fn split_edges() {
    let notes: Vec<NoteRecord> = (0..100)
        .map(|i| NoteRecord {
            note_id: format!("n{i}"),
            tweet_id: format!("t{}", i % 7),
            participant_id: format!("p{i}"),
            classification: NoteClass::NotMisleading,
            created_at_millis: 0,
        })
        .collect();
    let dataset = to_votes(&notes, &[]);
    // Equal timestamps keep input order.
    let order: Vec<u64> = dataset.votes.iter().map(|v| v.user).collect();
    assert_eq!(order, (0..100).collect::<Vec<_>>());
    let split = temporal_split(&dataset, 0.8);
    assert_eq!(split.boundary, 80);
    assert_eq!(split.straddling, 7);
    assert!(split.train_stories.is_empty());
    let all = temporal_split(&dataset, 1.0);
    assert_eq!(all.boundary, 100);
    assert!(all.test_stories.is_empty());
}

#[test]
fn separable_case_study_scores_high() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut notes = Vec::new();
    let mut labels = BTreeMap::new();
    let mut t = 0;
    for tweet in 0..150 {
        let truth = rng.random_bool(0.5);
        labels.insert(format!("t{tweet}"), if truth { 1 } else { -1 });
        for k in 0..rng.random_range(3..8) {
            t += 1;
            notes.push(NoteRecord {
                note_id: format!("n{tweet}_{k}"),
                tweet_id: format!("t{tweet}"),
                participant_id: format!("p{}", rng.random_range(0..40)),
                classification: if truth { NoteClass::NotMisleading } else { NoteClass::Misleading },
                created_at_millis: t,
            });
        }
    }
    let dataset = dedup(to_votes(&notes, &[])).0.with_labels(&labels);
    let result = run_case_study(&dataset, 0.8, 0.5, &TrainingConfig::default(), 3).unwrap();
    assert!(result.test.unwrap().f1 >= 0.95, "{:?}", result.test);

    let unlabeled = dedup(to_votes(&notes, &[])).0;
    assert!(matches!(
        run_case_study(&unlabeled, 0.8, 0.5, &TrainingConfig::default(), 3),
        Err(BirdwatchError::NoLabels)
    ));
}

fn records() -> impl Strategy<Value = (Vec<NoteRecord>, Vec<RatingRecord>)> {
    let notes = prop::collection::vec((0u8..6, 0u8..8, prop::bool::ANY, 0i64..1000), 1..20);
    let ratings = prop::collection::vec((0usize..25, 0u8..8, 0u8..3, 0i64..1000), 0..40);
    (notes, ratings).prop_map(|(notes, ratings)| {
        let notes: Vec<NoteRecord> = notes
            .into_iter()
            .enumerate()
            .map(|(i, (tweet, user, misleading, time))| NoteRecord {
                note_id: format!("n{i}"),
                tweet_id: format!("t{tweet}"),
                participant_id: format!("p{user}"),
                classification: if misleading { NoteClass::Misleading } else { NoteClass::NotMisleading },
                created_at_millis: time,
            })
            .collect();
        let ratings = ratings
            .into_iter()
            .map(|(note, user, agreement, time)| RatingRecord {
                note_id: format!("n{note}"),
                rater_participant_id: format!("p{user}"),
                agreement: [Agreement::Agree, Agreement::Disagree, Agreement::None][agreement as usize],
                created_at_millis: time,
            })
            .collect();
        (notes, ratings)
    })
}

proptest! {
    #[test]
    fn flipping_classifications_flips_votes((notes, ratings) in records()) {
        let flipped: Vec<NoteRecord> = notes
            .iter()
            .map(|n| NoteRecord {
                classification: match n.classification {
                    NoteClass::Misleading => NoteClass::NotMisleading,
                    NoteClass::NotMisleading => NoteClass::Misleading,
                },
                ..n.clone()
            })
            .collect();
        let a = to_votes(&notes, &ratings);
        let b = to_votes(&flipped, &ratings);
        prop_assert_eq!(a.votes.len(), b.votes.len());
        for (x, y) in a.votes.iter().zip(&b.votes) {
            prop_assert_eq!((x.user, x.story, x.timestamp), (y.user, y.story, y.timestamp));
            prop_assert_eq!(x.value, -y.value);
        }
    }

    #[test]
    fn vote_count_and_reindexing((notes, ratings) in records()) {
        let dataset = to_votes(&notes, &ratings);
        let usable = ratings
            .iter()
            .filter(|r| r.agreement != Agreement::None && notes.iter().any(|n| n.note_id == r.note_id))
            .count();
        prop_assert_eq!(dataset.votes.len(), notes.len() + usable);
        for (i, p) in dataset.participants.iter().enumerate() {
            prop_assert_eq!(dataset.user_index(p), Some(i as u64));
        }
        for (i, t) in dataset.tweets.iter().enumerate() {
            prop_assert_eq!(dataset.story_index(t), Some(i as u64));
        }
        prop_assert!(dataset.votes.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        let before = dataset.votes.len();
        let (deduped, fraction) = dedup(dataset);
        prop_assert!((fraction * before as f64 - (before - deduped.votes.len()) as f64).abs() < 1e-9);
        let mut seen = std::collections::HashSet::new();
        prop_assert!(deduped.votes.iter().all(|v| seen.insert((v.user, v.story, v.value))));
    }
}
