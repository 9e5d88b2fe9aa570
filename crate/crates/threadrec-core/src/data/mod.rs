//! Interaction-log ingestion, chronological sequence building, leave-one-out
//! splitting, and dataset (de)serialization.

pub mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One (user, item, timestamp) event. Ids are opaque strings; timestamps are
/// integer seconds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Parsing options for delimited interaction logs.
#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub delimiter: char,
    /// Abort when more than this fraction of rows is malformed.
    pub max_malformed: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            delimiter: '\t',
            max_malformed: 0.01,
        }
    }
}

/// Outcome of a load: the parsed rows plus malformed-row accounting.
pub struct LoadReport {
    pub interactions: Vec<Interaction>,
    pub malformed: usize,
    pub malformed_samples: Vec<String>,
}

/// Parse `user<delim>item<delim>timestamp` rows in file order. Malformed rows
/// are counted and skipped; more than `max_malformed` of them is fatal.
pub fn load_interactions(path: &Path, options: &LoadOptions) -> Result<LoadReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, options)
}

pub fn parse_interactions(text: &str, options: &LoadOptions) -> Result<LoadReport> {
    let mut interactions = Vec::new();
    let mut malformed = 0usize;
    let mut samples = Vec::new();
    let mut total = 0usize;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        total += 1;
        let mut parts = line.split(options.delimiter);
        let parsed = (|| {
            let user = parts.next()?.trim();
            let item = parts.next()?.trim();
            let ts = parts.next()?.trim().parse::<i64>().ok()?;
            if user.is_empty() || item.is_empty() || ts < 0 {
                return None;
            }
            Some(Interaction {
                user: user.to_string(),
                item: item.to_string(),
                timestamp: ts,
            })
        })();
        match parsed {
            Some(i) => interactions.push(i),
            None => {
                malformed += 1;
                if samples.len() < 5 {
                    samples.push(line.to_string());
                }
            }
        }
    }
    if total > 0 && malformed as f64 > options.max_malformed * total as f64 {
        return Err(Error::Data(format!(
            "{malformed}/{total} malformed rows (limit {:.2}%); samples: {:?}",
            options.max_malformed * 100.0,
            samples
        )));
    }
    Ok(LoadReport {
        interactions,
        malformed,
        malformed_samples: samples,
    })
}

/// One user's chronologically ordered events with per-sequence normalized
/// times in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub user: String,
    /// (item id, normalized time), chronological.
    pub events: Vec<(String, f64)>,
    /// Original timestamps, same order.
    pub raw_times: Vec<i64>,
}

/// Group interactions per user, sort by timestamp (stable tie-break by input
/// order), drop users shorter than `min_length`, and min-max normalize times
/// into [0, 1] (all-equal timestamps map to 0). Users come out sorted by id.
pub fn build_sequences(interactions: &[Interaction], min_length: usize) -> Result<Vec<UserSequence>> {
    if min_length < 3 {
        return Err(Error::Config(format!(
            "min_length must be at least 3, got {min_length}"
        )));
    }
    let mut per_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for i in interactions {
        per_user.entry(&i.user).or_default().push(i);
    }
    let mut out = Vec::new();
    for (user, mut rows) in per_user {
        rows.sort_by_key(|i| i.timestamp);
        if rows.len() < min_length {
            continue;
        }
        let first = rows[0].timestamp;
        let last = rows[rows.len() - 1].timestamp;
        let span = (last - first) as f64;
        let events = rows
            .iter()
            .map(|i| {
                let t = if span == 0.0 {
                    0.0
                } else {
                    (i.timestamp - first) as f64 / span
                };
                (i.item.clone(), t)
            })
            .collect();
        out.push(UserSequence {
            user: user.to_string(),
            events,
            raw_times: rows.iter().map(|i| i.timestamp).collect(),
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "no user has at least {min_length} interactions"
        )));
    }
    Ok(out)
}

/// Id-to-contiguous-index mapping with deterministic (sorted) ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    fn from_ids(mut ids: Vec<String>) -> Self {
        ids.sort();
        ids.dedup();
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Vocab { ids, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }
}

/// One indexed event inside a [`SplitDataset`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub item: usize,
    pub time: f64,
    pub raw_time: i64,
}

/// One user's full chronological sequence with the leave-one-out boundaries:
/// the last event is test, the second-last validation, the rest training.
#[derive(Clone, Debug)]
pub struct UserRecord {
    pub user: usize,
    pub events: Vec<Event>,
}

impl UserRecord {
    pub fn train(&self) -> &[Event] {
        &self.events[..self.events.len() - 2]
    }

    pub fn valid(&self) -> &Event {
        &self.events[self.events.len() - 2]
    }

    pub fn test(&self) -> &Event {
        &self.events[self.events.len() - 1]
    }
}

/// Leave-one-out split over indexed vocabularies.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub users: Vec<UserRecord>,
    pub user_vocab: Vocab,
    pub item_vocab: Vocab,
}

impl SplitDataset {
    pub fn n_users(&self) -> usize {
        self.user_vocab.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_vocab.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.users.iter().map(|u| u.events.len()).sum()
    }

    /// Interactions / (users * items), the usual density statistic.
    pub fn density(&self) -> f64 {
        self.interaction_count() as f64 / (self.n_users() as f64 * self.n_items() as f64)
    }

    /// Item indices of the user's training events.
    pub fn train_items(&self, user: usize) -> HashSet<usize> {
        self.users[user].train().iter().map(|e| e.item).collect()
    }
}

/// Per user: test = last event, valid = second-last, train = the rest.
/// Requires every sequence to have at least 3 events.
pub fn leave_one_out(sequences: &[UserSequence]) -> Result<SplitDataset> {
    for s in sequences {
        if s.events.len() < 3 {
            return Err(Error::Data(format!(
                "user {} has {} events; need at least 3",
                s.user,
                s.events.len()
            )));
        }
    }
    let user_vocab = Vocab::from_ids(sequences.iter().map(|s| s.user.clone()).collect());
    let item_vocab = Vocab::from_ids(
        sequences
            .iter()
            .flat_map(|s| s.events.iter().map(|(i, _)| i.clone()))
            .collect(),
    );
    let mut users: Vec<UserRecord> = Vec::with_capacity(sequences.len());
    let mut ordered: Vec<&UserSequence> = sequences.iter().collect();
    ordered.sort_by(|a, b| a.user.cmp(&b.user));
    for s in ordered {
        let user = user_vocab.index_of(&s.user).expect("user in vocab");
        let events = s
            .events
            .iter()
            .zip(&s.raw_times)
            .map(|((item, t), raw)| Event {
                item: item_vocab.index_of(item).expect("item in vocab"),
                time: *t,
                raw_time: *raw,
            })
            .collect();
        users.push(UserRecord { user, events });
    }
    users.sort_by_key(|u| u.user);
    Ok(SplitDataset {
        users,
        user_vocab,
        item_vocab,
    })
}

// ── Directory serialization ──────────────────────────────────────────

const TRAIN_FILE: &str = "train.tsv";
const VALID_FILE: &str = "valid.tsv";
const TEST_FILE: &str = "test.tsv";
const ITEM_VOCAB_FILE: &str = "items.tsv";
const USER_VOCAB_FILE: &str = "users.tsv";

/// Write the split as three delimited partition files plus vocabulary files,
/// all deterministically ordered.
pub fn save_split(dataset: &SplitDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, content).map_err(|e| Error::io(&path, e))
    };

    let partition = |select: &dyn Fn(&UserRecord) -> Vec<Event>| -> String {
        let mut out = String::new();
        for u in &dataset.users {
            let user_id = dataset.user_vocab.id(u.user);
            for e in select(u) {
                let _ = writeln!(
                    out,
                    "{user_id}\t{}\t{}",
                    dataset.item_vocab.id(e.item),
                    e.raw_time
                );
            }
        }
        out
    };
    write(TRAIN_FILE, partition(&|u| u.train().to_vec()))?;
    write(VALID_FILE, partition(&|u| vec![*u.valid()]))?;
    write(TEST_FILE, partition(&|u| vec![*u.test()]))?;

    let mut items = String::new();
    for i in 0..dataset.item_vocab.len() {
        let _ = writeln!(items, "{}\t{}", dataset.item_vocab.id(i), i);
    }
    write(ITEM_VOCAB_FILE, items)?;
    let mut users = String::new();
    for i in 0..dataset.user_vocab.len() {
        let _ = writeln!(users, "{}\t{}", dataset.user_vocab.id(i), i);
    }
    write(USER_VOCAB_FILE, users)?;
    Ok(())
}

/// Reload a directory written by [`save_split`]. Normalized times are
/// re-derived from the raw timestamps over each user's full sequence.
pub fn load_split(dir: &Path) -> Result<SplitDataset> {
    let read = |name: &str| -> Result<String> {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    };
    let options = LoadOptions {
        delimiter: '\t',
        max_malformed: 0.0,
    };
    let train = parse_interactions(&read(TRAIN_FILE)?, &options)?.interactions;
    let valid = parse_interactions(&read(VALID_FILE)?, &options)?.interactions;
    let test = parse_interactions(&read(TEST_FILE)?, &options)?.interactions;

    // Per user, the partitions concatenate back into the full ordered
    // sequence; valid/test must stay the two final events, which sorting by
    // timestamp preserves (within-partition order is already chronological).
    let mut all = train;
    let valid_count = valid.len();
    all.extend(valid);
    all.extend(test);
    let sequences = build_sequences(&all, 3)?;
    let dataset = leave_one_out(&sequences)?;
    if dataset.n_users() != valid_count {
        return Err(Error::Data(format!(
            "partition mismatch: {} users but {} validation rows",
            dataset.n_users(),
            valid_count
        )));
    }
    Ok(dataset)
}

/// Table-3-style dataset statistics block.
pub fn format_stats(name: &str, dataset: &SplitDataset) -> String {
    format!(
        "dataset {name}\n#User\t{}\n#Item\t{}\n#Interaction\t{}\nDensity\t{:.2}%\n",
        dataset.n_users(),
        dataset.n_items(),
        dataset.interaction_count(),
        dataset.density() * 100.0
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inter(user: &str, item: &str, ts: i64) -> Interaction {
        Interaction {
            user: user.into(),
            item: item.into(),
            timestamp: ts,
        }
    }

    #[test]
    fn parse_counts_malformed_rows() {
        let text = "u1\ti1\t10\nu1\ti2\tnot_a_number\nu1\ti3\t30\n";
        let report = parse_interactions(
            text,
            &LoadOptions {
                delimiter: '\t',
                max_malformed: 0.5,
            },
        )
        .unwrap();
        assert_eq!(report.interactions.len(), 2);
        assert_eq!(report.malformed, 1);
    }

    #[test]
    fn parse_preserves_file_order() {
        let text = "u1\ti3\t30\nu1\ti1\t10\nu1\ti2\t20\n";
        let report = parse_interactions(text, &LoadOptions::default()).unwrap();
        let items: Vec<&str> = report.interactions.iter().map(|i| i.item.as_str()).collect();
        assert_eq!(items, ["i3", "i1", "i2"]);
    }

    #[test]
    fn too_many_malformed_is_fatal() {
        let mut text = String::from("u1\ti1\t10\n");
        for _ in 0..5 {
            text.push_str("garbage line\n");
        }
        assert!(parse_interactions(&text, &LoadOptions::default()).is_err());
    }

    #[test]
    fn normalization_examples() {
        let rows = vec![inter("u", "a", 10), inter("u", "b", 20), inter("u", "c", 30)];
        let seqs = build_sequences(&rows, 3).unwrap();
        let times: Vec<f64> = seqs[0].events.iter().map(|(_, t)| *t).collect();
        assert_eq!(times, vec![0.0, 0.5, 1.0]);

        let rows = vec![inter("u", "a", 7), inter("u", "b", 7), inter("u", "c", 7)];
        let seqs = build_sequences(&rows, 3).unwrap();
        let times: Vec<f64> = seqs[0].events.iter().map(|(_, t)| *t).collect();
        assert_eq!(times, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn shuffled_input_builds_identical_sequences() {
        // Distinct timestamps, so ordering is fully determined.
        let rows = vec![
            inter("u2", "x", 5),
            inter("u1", "a", 30),
            inter("u1", "b", 10),
            inter("u2", "y", 2),
            inter("u1", "c", 20),
            inter("u2", "z", 9),
        ];
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(0, 3);
        assert_eq!(
            build_sequences(&rows, 3).unwrap(),
            build_sequences(&shuffled, 3).unwrap()
        );
    }

    #[test]
    fn short_users_are_dropped() {
        let rows = vec![
            inter("u1", "a", 1),
            inter("u1", "b", 2),
            inter("u1", "c", 3),
            inter("u2", "a", 1),
        ];
        let seqs = build_sequences(&rows, 3).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].user, "u1");
    }

    #[test]
    fn empty_result_is_fatal() {
        let rows = vec![inter("u1", "a", 1)];
        assert!(build_sequences(&rows, 3).is_err());
    }

    #[test]
    fn leave_one_out_partitions() {
        let rows: Vec<Interaction> = (0..10).map(|i| inter("u", &format!("i{i}"), i)).collect();
        let seqs = build_sequences(&rows, 3).unwrap();
        let split = leave_one_out(&seqs).unwrap();
        let u = &split.users[0];
        assert_eq!(u.train().len(), 8);
        assert_eq!(
            split.item_vocab.id(u.valid().item),
            "i8".to_string().as_str()
        );
        assert_eq!(split.item_vocab.id(u.test().item), "i9");
        // Union of partitions reconstructs the sequence.
        let mut rebuilt: Vec<usize> = u.train().iter().map(|e| e.item).collect();
        rebuilt.push(u.valid().item);
        rebuilt.push(u.test().item);
        let original: Vec<usize> = u.events.iter().map(|e| e.item).collect();
        assert_eq!(rebuilt, original);
    }

    #[test]
    fn length_three_split() {
        let rows = vec![inter("u", "a", 1), inter("u", "b", 2), inter("u", "c", 3)];
        let split = leave_one_out(&build_sequences(&rows, 3).unwrap()).unwrap();
        assert_eq!(split.users[0].train().len(), 1);
    }

    #[test]
    fn save_load_round_trip() {
        let rows: Vec<Interaction> = (0..8)
            .flat_map(|i| {
                vec![
                    inter("u1", &format!("i{i}"), i * 10),
                    inter("u2", &format!("j{i}"), i * 7 + 3),
                ]
            })
            .collect();
        let split = leave_one_out(&build_sequences(&rows, 3).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_split(&split, dir.path()).unwrap();
        let reloaded = load_split(dir.path()).unwrap();
        assert_eq!(split.n_users(), reloaded.n_users());
        assert_eq!(split.n_items(), reloaded.n_items());
        for (a, b) in split.users.iter().zip(&reloaded.users) {
            assert_eq!(a.events, b.events);
        }
        // Writing again produces byte-identical files.
        let dir2 = tempfile::tempdir().unwrap();
        save_split(&reloaded, dir2.path()).unwrap();
        for name in ["train.tsv", "valid.tsv", "test.tsv", "items.tsv", "users.tsv"] {
            assert_eq!(
                fs::read(dir.path().join(name)).unwrap(),
                fs::read(dir2.path().join(name)).unwrap(),
                "{name} differs"
            );
        }
    }

    #[test]
    fn stats_block_density() {
        let rows: Vec<Interaction> = (0..4)
            .map(|i| inter("u1", &format!("i{i}"), i))
            .chain((0..4).map(|i| inter("u2", &format!("i{i}"), i)))
            .collect();
        let split = leave_one_out(&build_sequences(&rows, 3).unwrap()).unwrap();
        let stats = format_stats("toy", &split);
        assert!(stats.contains("#User\t2"));
        assert!(stats.contains("#Item\t4"));
        assert!(stats.contains("#Interaction\t8"));
        assert!(stats.contains("Density\t100.00%"));
    }
}
