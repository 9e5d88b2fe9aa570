//! Serving-time candidate scoring and ranking metrics under the leave-one-out
//! protocol: the history is decomposed by an argmax rollout, candidates are
//! scored by pooling the per-thread modelers with the candidate-dependent
//! allocation distribution, and the held-out item's rank yields
//! Precision/Recall/NDCG/MRR at k.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{self, AgentConfig};
use crate::data::SplitDataset;
use crate::encoder::GruRef;
use crate::error::Result;
use crate::linalg;
use crate::model::ModelParams;
use crate::params::ParamBank;
use crate::scalar::Scalar;

/// Which held-out event is being predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Valid,
    Test,
}

/// Averaged (or single-user) metric values as fractions in [0, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

impl MetricSet {
    fn add(&mut self, other: &MetricSet) {
        self.precision += other.precision;
        self.recall += other.recall;
        self.ndcg += other.ndcg;
        self.mrr += other.mrr;
    }

    fn scaled(&self, f: f64) -> MetricSet {
        MetricSet {
            precision: self.precision * f,
            recall: self.recall * f,
            ndcg: self.ndcg * f,
            mrr: self.mrr * f,
        }
    }

    /// The same numbers as percentage values.
    pub fn percentages(&self) -> MetricSet {
        self.scaled(100.0)
    }
}

/// Single-ground-truth metrics at cutoff `k` given the target's 1-based rank.
pub fn metrics_at_k(target_rank: Option<usize>, k: usize) -> MetricSet {
    match target_rank {
        Some(rank) if rank <= k => MetricSet {
            precision: 1.0 / k as f64,
            recall: 1.0,
            ndcg: 1.0 / ((rank + 1) as f64).log2(),
            mrr: 1.0 / rank as f64,
        },
        _ => MetricSet::default(),
    }
}

/// One user's ranked outcome.
#[derive(Clone, Debug)]
pub struct RankResult {
    pub user: usize,
    /// Top-k recommended item indices, best first.
    pub recommended: Vec<usize>,
    /// 1-based rank of the held-out item, if it was a candidate.
    pub target_rank: Option<usize>,
    pub k: usize,
}

/// Sort candidates by descending score, ties toward the lower item index.
pub fn rank_candidates<T: Scalar>(
    user: usize,
    scores: &[(usize, T)],
    target: usize,
    k: usize,
) -> RankResult {
    let mut order: Vec<(usize, f64)> = scores.iter().map(|&(i, s)| (i, s.as_f64())).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let target_rank = order.iter().position(|&(i, _)| i == target).map(|p| p + 1);
    RankResult {
        user,
        recommended: order.iter().take(k).map(|&(i, _)| i).collect(),
        target_rank,
        k,
    }
}

/// Candidate-dependent pooled score for every candidate item.
///
/// The history is decomposed by an argmax rollout; per candidate `v`, the
/// allocation distribution over the threads (plus "new thread") is evaluated
/// at `v`, and the score mixes the per-thread modeler heads:
/// `sum_b pi_b(v) * sigmoid(x_b . e_v)` with the user embedding standing in
/// for the new-thread branch.
pub fn score_candidates<T: Scalar>(
    bank: &ParamBank<T>,
    model: &ModelParams,
    agent: &AgentConfig,
    user: usize,
    history: &[(usize, f64)],
    next_time: f64,
    candidates: &[usize],
) -> Result<Vec<(usize, T)>> {
    let dim = bank.value(model.item_emb).shape()[1];
    let table = bank.value(model.item_emb).data();
    let emb = |item: usize| &table[item * dim..(item + 1) * dim];
    let user_table = bank.value(model.user_emb).data();
    let user_emb = &user_table[user * dim..(user + 1) * dim];

    let trajectory = allocator::decompose(bank, model, agent, user, history)?;
    let threads = trajectory.final_state.threads();

    let agent_gru = GruRef::from_bank(bank, &model.agent_gru);
    let modeler_gru = GruRef::from_bank(bank, &model.modeler_gru);
    let mut agent_reprs = Vec::with_capacity(threads.len());
    let mut modeler_reprs = Vec::with_capacity(threads.len());
    let mut last_times = Vec::with_capacity(threads.len());
    for thread in threads {
        let rows: Vec<(&[T], f64)> = thread.iter().map(|&(i, t)| (emb(i), t)).collect();
        agent_reprs.push(agent_gru.encode(user_emb, &rows)?);
        modeler_reprs.push(modeler_gru.encode(user_emb, &rows)?);
        last_times.push(thread.last().map(|&(_, t)| t).unwrap_or(0.0));
    }

    let mut out = Vec::with_capacity(candidates.len());
    for &v in candidates {
        let e_v = emb(v);
        let cs = allocator::coherence_scores_plain(
            bank,
            model,
            agent,
            &agent_reprs,
            &last_times,
            e_v,
            next_time,
        )?;
        let probs = allocator::epsilon_softmax_plain(&cs, agent.epsilon, agent.temperature);
        let mut score = T::zero();
        for (b, x) in modeler_reprs.iter().enumerate() {
            score += probs[b] * linalg::sigmoid(linalg::dot(x, e_v));
        }
        score += probs[threads.len()] * linalg::sigmoid(linalg::dot(user_emb, e_v));
        out.push((v, score));
    }
    Ok(out)
}

/// Averaged metrics over one partition.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub mean: MetricSet,
    pub users: usize,
    pub k: usize,
    pub partition: Partition,
}

fn history_and_target(
    split: &SplitDataset,
    user: usize,
    partition: Partition,
) -> (Vec<(usize, f64)>, usize, f64) {
    let record = &split.users[user];
    match partition {
        Partition::Valid => (
            record.train().iter().map(|e| (e.item, e.time)).collect(),
            record.valid().item,
            record.valid().time,
        ),
        Partition::Test => {
            let mut history: Vec<(usize, f64)> =
                record.train().iter().map(|e| (e.item, e.time)).collect();
            history.push((record.valid().item, record.valid().time));
            (history, record.test().item, record.test().time)
        }
    }
}

fn candidate_set(split: &SplitDataset, user: usize) -> Vec<usize> {
    let train_items = split.train_items(user);
    (0..split.n_items())
        .filter(|i| !train_items.contains(i))
        .collect()
}

/// Evaluate the decomposing model: per-user metrics averaged over users.
/// Candidates are the full vocabulary minus the user's training items.
pub fn evaluate<T: Scalar>(
    bank: &ParamBank<T>,
    model: &ModelParams,
    agent: &AgentConfig,
    split: &SplitDataset,
    partition: Partition,
    k: usize,
) -> Result<EvalReport> {
    let per_user: Result<Vec<MetricSet>> = split
        .users
        .par_iter()
        .map(|record| {
            let user = record.user;
            let (history, target, next_time) = history_and_target(split, user, partition);
            let candidates = candidate_set(split, user);
            let scores =
                score_candidates(bank, model, agent, user, &history, next_time, &candidates)?;
            let ranked = rank_candidates(user, &scores, target, k);
            Ok(metrics_at_k(ranked.target_rank, k))
        })
        .collect();
    finish_report(per_user?, k, partition)
}

/// Evaluate the single-sequence comparator: `sigmoid(x . e_v)` over the
/// undecomposed history.
pub fn evaluate_single<T: Scalar>(
    bank: &ParamBank<T>,
    model: &ModelParams,
    split: &SplitDataset,
    partition: Partition,
    k: usize,
) -> Result<EvalReport> {
    let dim = bank.value(model.item_emb).shape()[1];
    let per_user: Result<Vec<MetricSet>> = split
        .users
        .par_iter()
        .map(|record| {
            let user = record.user;
            let (history, target, _) = history_and_target(split, user, partition);
            let candidates = candidate_set(split, user);
            let table = bank.value(model.item_emb).data();
            let emb = |item: usize| &table[item * dim..(item + 1) * dim];
            let user_table = bank.value(model.user_emb).data();
            let user_emb = &user_table[user * dim..(user + 1) * dim];
            let gru = GruRef::from_bank(bank, &model.modeler_gru);
            let rows: Vec<(&[T], f64)> = history.iter().map(|&(i, t)| (emb(i), t)).collect();
            let x = gru.encode(user_emb, &rows)?;
            let scores: Vec<(usize, T)> = candidates
                .iter()
                .map(|&v| (v, linalg::sigmoid(linalg::dot(&x, emb(v)))))
                .collect();
            let ranked = rank_candidates(user, &scores, target, k);
            Ok(metrics_at_k(ranked.target_rank, k))
        })
        .collect();
    finish_report(per_user?, k, partition)
}

fn finish_report(per_user: Vec<MetricSet>, k: usize, partition: Partition) -> Result<EvalReport> {
    let mut mean = MetricSet::default();
    for m in &per_user {
        mean.add(m);
    }
    let n = per_user.len().max(1);
    Ok(EvalReport {
        mean: mean.scaled(1.0 / n as f64),
        users: per_user.len(),
        k,
        partition,
    })
}

/// Text table of percentage metrics, one row per (dataset, partition).
pub fn render_table(rows: &[(String, String, &EvalReport)]) -> String {
    let mut out = String::new();
    out.push_str("dataset\tpartition\tP@k\tR@k\tNDCG@k\tMRR@k\n");
    for (dataset, partition, report) in rows {
        let p = report.mean.percentages();
        out.push_str(&format!(
            "{dataset}\t{partition}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\n",
            p.precision, p.recall, p.ndcg, p.mrr
        ));
    }
    out
}

// ── Clustering agreement ─────────────────────────────────────────────

/// Normalized mutual information between two labelings of the same events,
/// normalized by the arithmetic mean of the entropies. Two trivial
/// single-cluster labelings agree perfectly (1.0); a trivial labeling against
/// a non-trivial one scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same events");
    let n = a.len() as f64;
    if a.is_empty() {
        return 1.0;
    }
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut ca: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *ca.entry(x).or_default() += 1.0;
        *cb.entry(y).or_default() += 1.0;
    }
    let entropy = |counts: &BTreeMap<usize, f64>| -> f64 {
        counts
            .values()
            .map(|c| {
                let p = c / n;
                -p * p.ln()
            })
            .sum()
    };
    let ha = entropy(&ca);
    let hb = entropy(&cb);
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let p = c / n;
        let px = ca[&x] / n;
        let py = cb[&y] / n;
        mi += p * (p / (px * py)).ln();
    }
    (mi / (0.5 * (ha + hb))).clamp(0.0, 1.0)
}
