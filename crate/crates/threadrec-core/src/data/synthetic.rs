//! Synthetic multi-thread interaction generator.
//!
//! Plants a known thread structure so the learned decomposition can be scored
//! against ground truth: each user interleaves a few latent threads, every
//! thread draws items (without replacement) from its own disjoint item
//! cluster, and thread switches carry larger time gaps than within-thread
//! continuations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_sequences, Interaction, UserSequence};
use crate::error::{Error, Result};

/// Inclusive integer range used for per-user draws.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Range {
    pub lo: u64,
    pub hi: u64,
}

impl Range {
    pub fn new(lo: u64, hi: u64) -> Self {
        Range { lo, hi }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> u64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.lo > self.hi {
            return Err(Error::Config(format!(
                "{what}: empty range [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Generator configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub users: usize,
    /// Latent threads per user, drawn per user from this range.
    pub threads_per_user: Range,
    /// Distinct item clusters available; each user's threads pick distinct
    /// clusters. Must be at least `threads_per_user.hi`.
    pub clusters: usize,
    /// Items in each (disjoint) cluster.
    pub items_per_cluster: usize,
    /// Events per user.
    pub seq_length: Range,
    /// Seconds between consecutive events of the same thread.
    pub intra_thread_gap: Range,
    /// Seconds between events when the thread switches.
    pub inter_thread_gap: Range,
    /// Probability of staying in the current thread at each step.
    pub stay_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 200,
            threads_per_user: Range::new(2, 3),
            clusters: 3,
            items_per_cluster: 30,
            seq_length: Range::new(10, 16),
            intra_thread_gap: Range::new(2, 10),
            inter_thread_gap: Range::new(10, 50),
            stay_prob: 0.7,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(Error::Config("users must be positive".into()));
        }
        self.threads_per_user.validate("threads_per_user")?;
        self.seq_length.validate("seq_length")?;
        self.intra_thread_gap.validate("intra_thread_gap")?;
        self.inter_thread_gap.validate("inter_thread_gap")?;
        if self.threads_per_user.lo == 0 {
            return Err(Error::Config("threads_per_user must be positive".into()));
        }
        if (self.clusters as u64) < self.threads_per_user.hi {
            return Err(Error::Config(format!(
                "{} clusters cannot host up to {} threads per user",
                self.clusters, self.threads_per_user.hi
            )));
        }
        if self.seq_length.lo < 3 {
            return Err(Error::Config(
                "seq_length must be at least 3 for the leave-one-out split".into(),
            ));
        }
        // Items are drawn without replacement; one thread could receive the
        // whole sequence.
        if (self.items_per_cluster as u64) < self.seq_length.hi {
            return Err(Error::Config(format!(
                "clusters of {} items cannot serve up to {} draws without replacement",
                self.items_per_cluster, self.seq_length.hi
            )));
        }
        if !(0.0..=1.0).contains(&self.stay_prob) {
            return Err(Error::Config("stay_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Planted thread label of one event: (user id, chronological position,
/// global cluster index).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlantedLabel {
    pub user: String,
    pub position: usize,
    pub cluster: usize,
}

pub struct SyntheticData {
    pub sequences: Vec<UserSequence>,
    pub labels: Vec<PlantedLabel>,
}

fn user_id(i: usize) -> String {
    format!("u{i:04}")
}

fn item_id(cluster: usize, offset: usize) -> String {
    format!("c{cluster:02}x{offset:03}")
}

/// Generate the planted dataset. Fully reproducible from `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut interactions = Vec::new();
    let mut labels = Vec::new();

    for u in 0..spec.users {
        let user = user_id(u);
        let n_threads = spec.threads_per_user.draw(&mut rng) as usize;
        let n_events = spec.seq_length.draw(&mut rng) as usize;

        let mut cluster_ids: Vec<usize> = (0..spec.clusters).collect();
        cluster_ids.shuffle(&mut rng);
        cluster_ids.truncate(n_threads);

        // Per thread, a shuffled pool of unused items.
        let mut pools: Vec<Vec<usize>> = cluster_ids
            .iter()
            .map(|_| {
                let mut pool: Vec<usize> = (0..spec.items_per_cluster).collect();
                pool.shuffle(&mut rng);
                pool
            })
            .collect();

        let mut thread = rng.random_range(0..n_threads);
        let mut clock: i64 = 0;
        for position in 0..n_events {
            if position > 0 {
                let switch = n_threads > 1 && rng.random::<f64>() >= spec.stay_prob;
                let gap = if switch {
                    let next = loop {
                        let c = rng.random_range(0..n_threads);
                        if c != thread {
                            break c;
                        }
                    };
                    thread = next;
                    spec.inter_thread_gap.draw(&mut rng)
                } else {
                    spec.intra_thread_gap.draw(&mut rng)
                };
                clock += gap as i64;
            }
            let offset = pools[thread].pop().ok_or_else(|| {
                Error::Config(format!(
                    "cluster {} exhausted after {} draws for user {user}",
                    cluster_ids[thread], position
                ))
            })?;
            let cluster = cluster_ids[thread];
            interactions.push(Interaction {
                user: user.clone(),
                item: item_id(cluster, offset),
                timestamp: clock,
            });
            labels.push(PlantedLabel {
                user: user.clone(),
                position,
                cluster,
            });
        }
    }

    let sequences = build_sequences(&interactions, 3)?;
    Ok(SyntheticData { sequences, labels })
}

/// Sidecar format: `user<TAB>position<TAB>cluster`, one row per event.
pub fn save_labels(labels: &[PlantedLabel], path: &Path) -> Result<()> {
    let mut out = String::new();
    for l in labels {
        let _ = writeln!(out, "{}\t{}\t{}", l.user, l.position, l.cluster);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<Vec<PlantedLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let mut parts = line.split('\t');
        let parsed = (|| {
            Some(PlantedLabel {
                user: parts.next()?.to_string(),
                position: parts.next()?.parse().ok()?,
                cluster: parts.next()?.parse().ok()?,
            })
        })();
        out.push(parsed.ok_or_else(|| Error::Data(format!("bad label row: {line:?}")))?);
    }
    Ok(out)
}
