//! Learning objectives and the training loop.
//!
//! Per batch: (a) for each sample, roll out the allocator, compute rewards
//! (the data-fit component against the modeler weights frozen from the
//! previous batch), and update agent + embedding parameters with the
//! score-function policy gradient; (b) after the batch, replay the recorded
//! trajectories and jointly update all three parameter sets on the combined
//! objective mixing the policy term with the allocation-weighted prediction
//! loss.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{
    self, AgentConfig, AllocState, Allocation, Policy, Rollout,
};
use crate::data::SplitDataset;
use crate::encoder::{self, GruSnapshot};
use crate::error::{Error, Result};
use crate::linalg;
use crate::metrics;
use crate::model::{init_model, ModelDims, ModelParams};
use crate::params::{Gradients, ParamBank, ParamGroup};
use crate::rewards::RewardConfig;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

// ── Configuration ────────────────────────────────────────────────────

/// How many training samples one user sequence contributes per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixMode {
    /// One sample: the full training prefix predicts the last training item.
    Last,
    /// Every prefix predicts its successor; quadratic in sequence length.
    All,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    /// Mixing weight between the policy term and the prediction loss.
    pub alpha: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub prefix_mode: PrefixMode,
    /// Exponential-moving-average return baseline for variance reduction.
    pub baseline_ema: bool,
    pub ema_decay: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.negatives == 0 {
            return Err(Error::Config("need at least one negative sample".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Full model vs. the undecomposed single-sequence comparator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Decomposed,
    SingleSequence,
}

pub struct TrainSettings<'a> {
    pub agent: &'a AgentConfig,
    pub rewards: &'a RewardConfig,
    pub train: &'a TrainConfig,
    pub mode: TrainMode,
    pub eval_k: usize,
    pub seed: u64,
}

// ── Seed mixing ──────────────────────────────────────────────────────

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stable seed derivation: same parts, same stream, on every platform.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243F6A8885A308D3u64;
    for p in parts {
        h = splitmix64(h ^ splitmix64(*p));
    }
    h
}

// ── Negative sampling ────────────────────────────────────────────────

/// Draw `count` items uniformly without replacement from the items outside
/// `excluded`. Falls back to drawing with replacement (flagged in the return)
/// when there are fewer candidates than requested.
pub fn negative_sample(
    rng: &mut ChaCha8Rng,
    excluded: &HashSet<usize>,
    n_items: usize,
    count: usize,
) -> Result<(Vec<usize>, bool)> {
    let mut candidates: Vec<usize> = (0..n_items).filter(|i| !excluded.contains(i)).collect();
    if candidates.is_empty() {
        return Err(Error::Data(
            "user has interacted with the whole vocabulary; no negatives exist".into(),
        ));
    }
    if candidates.len() < count {
        let draws = (0..count)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect();
        return Ok((draws, true));
    }
    // Partial Fisher-Yates: the first `count` entries become the sample.
    for i in 0..count {
        let j = rng.random_range(i..candidates.len());
        candidates.swap(i, j);
    }
    candidates.truncate(count);
    Ok((candidates, false))
}

// ── Losses ───────────────────────────────────────────────────────────

/// Binary cross-entropy log-likelihood of one positive against sampled
/// negatives: `ln sigmoid(x . e+) + sum ln(1 - sigmoid(x . e-))`.
/// Higher is better; callers negate as needed.
pub fn bce_log_likelihood<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    positive: Var,
    negatives: &[Var],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(1 + negatives.len());
    let pos_dot = tape.dot(x, positive)?;
    terms.push(tape.log_sigmoid(pos_dot));
    for n in negatives {
        let d = tape.dot(x, *n)?;
        let neg = tape.neg(d);
        terms.push(tape.log_sigmoid(neg));
    }
    tape.sum_stack(&terms)
}

/// Plain mirror of [`bce_log_likelihood`].
pub fn bce_log_likelihood_plain<T: Scalar>(x: &[T], positive: &[T], negatives: &[&[T]]) -> f64 {
    let mut total = linalg::log_sigmoid(linalg::dot(x, positive)).as_f64();
    for n in negatives {
        total += linalg::log_sigmoid(-linalg::dot(x, n)).as_f64();
    }
    total
}

/// What the prediction losses need to know about the held-out target.
#[derive(Clone, Debug)]
pub struct PredictionTarget {
    pub user: usize,
    pub item: usize,
    pub time: f64,
    pub negatives: Vec<usize>,
}

/// Allocation-weighted prediction loss over the finished decomposition:
/// `-(sum_b pi_b * ll_b)` where `pi` is the epsilon-softmax of the coherence
/// scores evaluated at the target item, branch `b <= K` scores with the
/// modeler encoding of thread `b`, and the extra branch scores with the user
/// embedding.
pub fn modeler_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelParams,
    agent: &AgentConfig,
    rollout: &Rollout,
    target: &PredictionTarget,
) -> Result<Var> {
    let user_var = tape.gather(model.user_emb, target.user)?;
    let target_var = tape.gather(model.item_emb, target.item)?;
    let neg_vars: Vec<Var> = target
        .negatives
        .iter()
        .map(|&n| tape.gather(model.item_emb, n))
        .collect::<Result<_>>()?;

    let scores = allocator::coherence_scores(
        tape,
        model,
        agent,
        &rollout.encoders,
        target_var,
        target.time,
    )?;
    let (probs, _) = allocator::epsilon_softmax(tape, &scores, agent.epsilon, agent.temperature)?;

    let threads = rollout.trajectory.final_state.threads();
    let mut terms = Vec::with_capacity(threads.len() + 1);
    for (b, thread) in threads.iter().enumerate() {
        let x = encoder::encode(tape, &model.modeler_gru, model.item_emb, user_var, thread)?;
        let ll = bce_log_likelihood(tape, x, target_var, &neg_vars)?;
        let pi = tape.index(probs, b)?;
        terms.push(tape.mul(pi, ll)?);
    }
    let ll_new = bce_log_likelihood(tape, user_var, target_var, &neg_vars)?;
    let pi_new = tape.index(probs, threads.len())?;
    terms.push(tape.mul(pi_new, ll_new)?);

    let mixture = tape.sum_stack(&terms)?;
    Ok(tape.neg(mixture))
}

/// Tape-free prediction loss with frozen modeler weights; feeds the data-fit
/// reward. Coherence still uses the live agent parameters.
pub fn modeler_loss_plain<T: Scalar>(
    bank: &ParamBank<T>,
    model: &ModelParams,
    agent: &AgentConfig,
    frozen_modeler: &GruSnapshot<T>,
    state: &AllocState,
    target: &PredictionTarget,
) -> Result<f64> {
    let dim = bank.value(model.item_emb).shape()[1];
    let table = bank.value(model.item_emb).data();
    let emb = |item: usize| &table[item * dim..(item + 1) * dim];
    let user_table = bank.value(model.user_emb).data();
    let user_emb = &user_table[target.user * dim..(target.user + 1) * dim];
    let target_emb = emb(target.item);
    let negatives: Vec<&[T]> = target.negatives.iter().map(|&n| emb(n)).collect();

    let agent_gru = encoder::GruRef::from_bank(bank, &model.agent_gru);
    let frozen = frozen_modeler.as_ref();

    let threads = state.threads();
    let mut reprs = Vec::with_capacity(threads.len());
    let mut last_times = Vec::with_capacity(threads.len());
    let mut branch_ll = Vec::with_capacity(threads.len() + 1);
    for thread in threads {
        let rows: Vec<(&[T], f64)> = thread.iter().map(|&(i, t)| (emb(i), t)).collect();
        reprs.push(agent_gru.encode(user_emb, &rows)?);
        last_times.push(thread.last().map(|&(_, t)| t).unwrap_or(0.0));
        let x = frozen.encode(user_emb, &rows)?;
        branch_ll.push(bce_log_likelihood_plain(&x, target_emb, &negatives));
    }
    branch_ll.push(bce_log_likelihood_plain(user_emb, target_emb, &negatives));

    let scores = allocator::coherence_scores_plain(
        bank,
        model,
        agent,
        &reprs,
        &last_times,
        target_emb,
        target.time,
    )?;
    let probs: Vec<f64> = allocator::epsilon_softmax_plain(&scores, agent.epsilon, agent.temperature)
        .into_iter()
        .map(|p| p.as_f64())
        .collect();
    Ok(mixture_loss(&probs, &branch_ll))
}

/// `-(sum_b pi_b * ll_b)`: the allocation-weighted mixture of branch
/// log-likelihoods, negated into a loss.
pub fn mixture_loss(probs: &[f64], branch_ll: &[f64]) -> f64 {
    debug_assert_eq!(probs.len(), branch_ll.len());
    -probs
        .iter()
        .zip(branch_ll)
        .map(|(p, ll)| p * ll)
        .sum::<f64>()
}

/// Score-function policy term: `-(advantage) * sum log pi(a_i)`, negated so
/// the combined objective is minimized. The forced first step carries no
/// log-probability node.
pub fn policy_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    log_prob_vars: &[Var],
    advantage: f64,
) -> Result<Var> {
    if log_prob_vars.is_empty() {
        return tape.constant(0.0);
    }
    let sum = tape.sum_stack(log_prob_vars)?;
    Ok(tape.scale(sum, T::of(-advantage)))
}

/// `alpha * policy + (1 - alpha) * modeler`.
pub fn combined_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    policy: Var,
    modeler: Var,
    alpha: f64,
) -> Result<Var> {
    let p = tape.scale(policy, T::of(alpha));
    let m = tape.scale(modeler, T::of(1.0 - alpha));
    tape.add(p, m)
}

/// Undecomposed comparator: BCE loss of the whole history through a single
/// sequence encoder.
pub fn single_sequence_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelParams,
    history: &[(usize, f64)],
    target: &PredictionTarget,
) -> Result<Var> {
    let user_var = tape.gather(model.user_emb, target.user)?;
    let target_var = tape.gather(model.item_emb, target.item)?;
    let neg_vars: Vec<Var> = target
        .negatives
        .iter()
        .map(|&n| tape.gather(model.item_emb, n))
        .collect::<Result<_>>()?;
    let x = encoder::encode(tape, &model.modeler_gru, model.item_emb, user_var, history)?;
    let ll = bce_log_likelihood(tape, x, target_var, &neg_vars)?;
    Ok(tape.neg(ll))
}

// ── Training loop ────────────────────────────────────────────────────

/// Parameters captured at the best-validation epoch, for serving.
pub struct BestCheckpoint<T> {
    pub bank: ParamBank<T>,
    pub epoch: u64,
    pub valid_ndcg: f64,
}

/// Everything that survives across epochs (and checkpoints).
pub struct TrainState<T> {
    pub bank: ParamBank<T>,
    pub model: ModelParams,
    /// Last completed epoch, 0 before training.
    pub epoch: u64,
    /// EMA return baseline.
    pub baseline: f64,
    /// Snapshot of the epoch with the highest validation NDCG seen by this
    /// training segment (ties keep the earliest epoch).
    pub best: Option<BestCheckpoint<T>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(dims: &ModelDims, seed: u64) -> Result<Self> {
        let (bank, model) = init_model(dims, mix_seed(&[seed, 0xC0DE]))?;
        Ok(TrainState {
            bank,
            model,
            epoch: 0,
            baseline: 0.0,
            best: None,
        })
    }

    /// The bank to serve from: the best-validation snapshot when one exists,
    /// the final parameters otherwise.
    pub fn serving_bank(&self) -> &ParamBank<T> {
        self.best.as_ref().map(|b| &b.bank).unwrap_or(&self.bank)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub combined_loss: f64,
    pub policy_loss: f64,
    pub modeler_loss: f64,
    pub mean_return: f64,
    pub mean_threads: f64,
    pub reward_fit: f64,
    pub reward_coherence: f64,
    pub reward_orthogonality: f64,
    pub reward_new_thread: f64,
    pub valid_ndcg: f64,
}

#[derive(Clone, Copy)]
struct SampleKey {
    user: usize,
    prefix: usize,
}

fn collect_samples(split: &SplitDataset, mode: PrefixMode) -> Vec<SampleKey> {
    let mut out = Vec::new();
    for record in &split.users {
        let train_len = record.train().len();
        if train_len < 2 {
            continue;
        }
        match mode {
            PrefixMode::Last => out.push(SampleKey {
                user: record.user,
                prefix: train_len - 1,
            }),
            PrefixMode::All => {
                for prefix in 1..train_len {
                    out.push(SampleKey {
                        user: record.user,
                        prefix,
                    });
                }
            }
        }
    }
    out
}

struct SampleOutcome {
    key: SampleKey,
    actions: Vec<Allocation>,
    advantage: f64,
    ret: f64,
    threads: usize,
    reward_sums: [f64; 4],
    target: PredictionTarget,
}

/// Run `epochs` further epochs, mutating `state` in place. On divergence the
/// state holds the last finite parameters so the caller can checkpoint them.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    split: &SplitDataset,
    settings: &TrainSettings<'_>,
    epochs: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<()> {
    settings.agent.validate()?;
    settings.rewards.validate()?;
    settings.train.validate()?;
    let cfg = settings.train;
    let samples = collect_samples(split, cfg.prefix_mode);
    if samples.is_empty() {
        return Err(Error::Data(
            "no trainable samples: every user has fewer than 2 training events".into(),
        ));
    }
    let n_items = split.n_items();
    let mut frozen = GruSnapshot::from_bank(&state.bank, &state.model.modeler_gru);

    let first = state.epoch + 1;
    for epoch in first..first + epochs {
        let mut order = samples.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[settings.seed, epoch, 0x5487FF1E]));
        order.shuffle(&mut shuffle_rng);

        let mut totals = EpochTotals::default();

        for batch in order.chunks(cfg.batch_size) {
            let mut outcomes = Vec::with_capacity(batch.len());
            for key in batch {
                let outcome = match settings.mode {
                    TrainMode::Decomposed => {
                        phase_policy(state, split, settings, &frozen, epoch, *key, n_items)?
                    }
                    TrainMode::SingleSequence => {
                        prepare_single(state, split, settings, epoch, *key, n_items)?
                    }
                };
                totals.absorb_sample(&outcome);
                outcomes.push(outcome);
            }

            let mut batch_grads = Gradients::zeros(&state.bank);
            for outcome in &outcomes {
                let values = match settings.mode {
                    TrainMode::Decomposed => {
                        phase_joint(state, split, settings, outcome, &mut batch_grads)?
                    }
                    TrainMode::SingleSequence => {
                        single_step(state, split, outcome, &mut batch_grads)?
                    }
                };
                totals.absorb_losses(values);
            }
            if !batch_grads.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("batch gradients at epoch {epoch}"),
                });
            }
            state.bank.adam_step(&batch_grads, cfg.learning_rate, |_| true);
            frozen = GruSnapshot::from_bank(&state.bank, &state.model.modeler_gru);
        }

        let valid_ndcg = match settings.mode {
            TrainMode::Decomposed => {
                metrics::evaluate(
                    &state.bank,
                    &state.model,
                    settings.agent,
                    split,
                    metrics::Partition::Valid,
                    settings.eval_k,
                )?
                .mean
                .ndcg
            }
            TrainMode::SingleSequence => {
                metrics::evaluate_single(
                    &state.bank,
                    &state.model,
                    split,
                    metrics::Partition::Valid,
                    settings.eval_k,
                )?
                .mean
                .ndcg
            }
        };

        let record = totals.into_record(epoch, valid_ndcg);
        state.epoch = epoch;
        if state
            .best
            .as_ref()
            .map(|b| valid_ndcg > b.valid_ndcg)
            .unwrap_or(true)
        {
            state.best = Some(BestCheckpoint {
                bank: state.bank.clone(),
                epoch,
                valid_ndcg,
            });
        }
        on_epoch(&record);
        if !record.combined_loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("epoch {epoch} loss"),
            });
        }
    }
    Ok(())
}

/// Phase (a): sample a trajectory, compute rewards, update agent + embeddings
/// on the policy objective.
fn phase_policy<T: Scalar>(
    state: &mut TrainState<T>,
    split: &SplitDataset,
    settings: &TrainSettings<'_>,
    frozen: &GruSnapshot<T>,
    epoch: u64,
    key: SampleKey,
    n_items: usize,
) -> Result<SampleOutcome> {
    let cfg = settings.train;
    let record = &split.users[key.user];
    let history: Vec<(usize, f64)> = record.train()[..key.prefix]
        .iter()
        .map(|e| (e.item, e.time))
        .collect();
    let target_event = record.train()[key.prefix];

    let sample_seed = mix_seed(&[settings.seed, epoch, key.user as u64, key.prefix as u64]);
    let mut neg_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[sample_seed, 1]));
    let excluded = split.train_items(key.user);
    let (negatives, _) = negative_sample(&mut neg_rng, &excluded, n_items, cfg.negatives)?;
    let target = PredictionTarget {
        user: key.user,
        item: target_event.item,
        time: target_event.time,
        negatives,
    };

    let (grads, outcome) = {
        let bank = &state.bank;
        let model = &state.model;
        let fit = |alloc: &AllocState| -> f64 {
            modeler_loss_plain(bank, model, settings.agent, frozen, alloc, &target)
                .unwrap_or(f64::NAN)
        };
        let mut tape = Tape::new(bank);
        let rollout = allocator::rollout(
            &mut tape,
            bank,
            model,
            settings.agent,
            settings.rewards,
            key.user,
            &history,
            Policy::Sample(mix_seed(&[sample_seed, 0])),
            Some(&fit),
        )?;
        let ret = rollout.trajectory.return_value(settings.rewards.gamma);
        if !ret.is_finite() {
            return Err(Error::NonFinite {
                context: format!("return at epoch {epoch}"),
            });
        }
        let advantage = if cfg.baseline_ema {
            ret - state.baseline
        } else {
            ret
        };
        let loss = policy_loss_on_tape(&mut tape, &rollout.log_prob_vars, advantage)?;
        let grads = tape.backward(loss)?;

        let mut reward_sums = [0.0; 4];
        for step in &rollout.trajectory.steps {
            reward_sums[0] += step.rewards.fit;
            reward_sums[1] += step.rewards.coherence;
            reward_sums[2] += step.rewards.orthogonality;
            reward_sums[3] += step.rewards.new_thread;
        }
        (
            grads,
            SampleOutcome {
                key,
                actions: rollout.trajectory.actions(),
                advantage,
                ret,
                threads: rollout.trajectory.final_state.thread_count(),
                reward_sums,
                target,
            },
        )
    };
    if !grads.all_finite() {
        return Err(Error::NonFinite {
            context: format!("policy gradients at epoch {epoch}"),
        });
    }
    state
        .bank
        .adam_step(&grads, settings.train.learning_rate, |g| {
            g != ParamGroup::Modeler
        });
    if cfg.baseline_ema {
        state.baseline = cfg.ema_decay * state.baseline + (1.0 - cfg.ema_decay) * outcome.ret;
    }
    Ok(outcome)
}

/// Phase (b) contribution of one sample: replay the recorded actions under
/// the current parameters and accumulate gradients of the combined loss.
fn phase_joint<T: Scalar>(
    state: &TrainState<T>,
    split: &SplitDataset,
    settings: &TrainSettings<'_>,
    outcome: &SampleOutcome,
    batch_grads: &mut Gradients<T>,
) -> Result<(f64, f64, f64)> {
    let record = &split.users[outcome.key.user];
    let history: Vec<(usize, f64)> = record.train()[..outcome.key.prefix]
        .iter()
        .map(|e| (e.item, e.time))
        .collect();

    let mut tape = Tape::new(&state.bank);
    let rollout = allocator::rollout(
        &mut tape,
        &state.bank,
        &state.model,
        settings.agent,
        &RewardConfig::disabled(),
        outcome.key.user,
        &history,
        Policy::Forced(&outcome.actions),
        None,
    )?;
    let policy = policy_loss_on_tape(&mut tape, &rollout.log_prob_vars, outcome.advantage)?;
    let modeler = modeler_loss_on_tape(
        &mut tape,
        &state.model,
        settings.agent,
        &rollout,
        &outcome.target,
    )?;
    let combined = combined_loss_on_tape(&mut tape, policy, modeler, settings.train.alpha)?;
    let grads = tape.backward(combined)?;
    batch_grads.add_assign(&grads);
    Ok((
        tape.value(combined).item().as_f64(),
        tape.value(policy).item().as_f64(),
        tape.value(modeler).item().as_f64(),
    ))
}

/// Comparator bookkeeping for one sample (no trajectory, no policy phase).
fn prepare_single<T: Scalar>(
    state: &TrainState<T>,
    split: &SplitDataset,
    settings: &TrainSettings<'_>,
    epoch: u64,
    key: SampleKey,
    n_items: usize,
) -> Result<SampleOutcome> {
    let record = &split.users[key.user];
    let target_event = record.train()[key.prefix];
    let sample_seed = mix_seed(&[settings.seed, epoch, key.user as u64, key.prefix as u64]);
    let mut neg_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[sample_seed, 1]));
    let excluded = split.train_items(key.user);
    let (negatives, _) = negative_sample(&mut neg_rng, &excluded, n_items, settings.train.negatives)?;
    let _ = state;
    Ok(SampleOutcome {
        key,
        actions: Vec::new(),
        advantage: 0.0,
        ret: 0.0,
        threads: 1,
        reward_sums: [0.0; 4],
        target: PredictionTarget {
            user: key.user,
            item: target_event.item,
            time: target_event.time,
            negatives,
        },
    })
}

fn single_step<T: Scalar>(
    state: &TrainState<T>,
    split: &SplitDataset,
    outcome: &SampleOutcome,
    batch_grads: &mut Gradients<T>,
) -> Result<(f64, f64, f64)> {
    let record = &split.users[outcome.key.user];
    let history: Vec<(usize, f64)> = record.train()[..outcome.key.prefix]
        .iter()
        .map(|e| (e.item, e.time))
        .collect();
    let mut tape = Tape::new(&state.bank);
    let loss = single_sequence_loss_on_tape(&mut tape, &state.model, &history, &outcome.target)?;
    let grads = tape.backward(loss)?;
    batch_grads.add_assign(&grads);
    let v = tape.value(loss).item().as_f64();
    Ok((v, 0.0, v))
}

#[derive(Default)]
struct EpochTotals {
    samples: usize,
    combined: f64,
    policy: f64,
    modeler: f64,
    returns: f64,
    threads: f64,
    rewards: [f64; 4],
}

impl EpochTotals {
    fn absorb_sample(&mut self, outcome: &SampleOutcome) {
        self.samples += 1;
        self.returns += outcome.ret;
        self.threads += outcome.threads as f64;
        for (t, r) in self.rewards.iter_mut().zip(outcome.reward_sums) {
            *t += r;
        }
    }

    fn absorb_losses(&mut self, (combined, policy, modeler): (f64, f64, f64)) {
        self.combined += combined;
        self.policy += policy;
        self.modeler += modeler;
    }

    fn into_record(self, epoch: u64, valid_ndcg: f64) -> EpochRecord {
        let n = self.samples.max(1) as f64;
        EpochRecord {
            epoch,
            combined_loss: self.combined / n,
            policy_loss: self.policy / n,
            modeler_loss: self.modeler / n,
            mean_return: self.returns / n,
            mean_threads: self.threads / n,
            reward_fit: self.rewards[0] / n,
            reward_coherence: self.rewards[1] / n,
            reward_orthogonality: self.rewards[2] / n,
            reward_new_thread: self.rewards[3] / n,
            valid_ndcg,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::TimeDecay;
    use crate::model::init_model;
    use crate::tensor::Tensor;

    fn toy_bank() -> (ParamBank<f64>, ModelParams) {
        let dims = ModelDims::new(4, 2, 8).unwrap();
        init_model(&dims, 50).unwrap()
    }

    fn toy_agent() -> AgentConfig {
        AgentConfig {
            epsilon: 0.3,
            temperature: 1.0,
            decay: TimeDecay::Exponential { rate: 1.0 },
            decay_enabled: true,
        }
    }

    #[test]
    fn negative_sampling_avoids_interacted_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let excluded: HashSet<usize> = (0..9).collect();
        for _ in 0..50 {
            let (negs, replaced) = negative_sample(&mut rng, &excluded, 10, 1).unwrap();
            assert_eq!(negs, vec![9]);
            assert!(!replaced);
        }
    }

    #[test]
    fn negative_sampling_is_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let excluded: HashSet<usize> = [0, 5].into_iter().collect();
        for _ in 0..50 {
            let (negs, replaced) = negative_sample(&mut rng, &excluded, 12, 6).unwrap();
            assert!(!replaced);
            let mut sorted = negs.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 6, "duplicates in {negs:?}");
            assert!(negs.iter().all(|n| !excluded.contains(n)));
        }
    }

    #[test]
    fn negative_sampling_falls_back_to_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let excluded: HashSet<usize> = (0..9).collect();
        let (negs, replaced) = negative_sample(&mut rng, &excluded, 10, 3).unwrap();
        assert!(replaced);
        assert_eq!(negs, vec![9, 9, 9]);
        let all: HashSet<usize> = (0..10).collect();
        assert!(negative_sample(&mut rng, &all, 10, 1).is_err());
    }

    #[test]
    fn negative_sampling_is_uniform() {
        // Chi-squared over 10 candidates, 10^4 single draws; the 1% critical
        // value for 9 degrees of freedom is 21.666.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let excluded: HashSet<usize> = (10..20).collect();
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            let (negs, _) = negative_sample(&mut rng, &excluded, 20, 1).unwrap();
            counts[negs[0]] += 1;
        }
        let expected = 1000.0;
        let chi2: f64 = counts
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 21.666, "chi-squared {chi2:.2} exceeds the 1% critical value");
    }

    #[test]
    fn bce_log_likelihood_analytic_cases() {
        // All dot products zero with one negative: ln 0.5 + ln 0.5.
        let (bank, _) = toy_bank();
        let mut tape = Tape::new(&bank);
        let zero = tape.input(Tensor::vector(vec![0.0; 4])).unwrap();
        let pos = tape.input(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        let neg = tape.input(Tensor::vector(vec![0.0, 1.0, 0.0, 0.0])).unwrap();
        let ll = bce_log_likelihood(&mut tape, zero, pos, &[neg]).unwrap();
        assert!((tape.value(ll).item() - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((tape.value(ll).item() + 1.3863).abs() < 1e-4);

        // Saturated case: strong positive, strongly repelled negative.
        let x = tape.input(Tensor::vector(vec![30.0, 0.0, 0.0, 0.0])).unwrap();
        let pos = tape.input(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        let neg = tape.input(Tensor::vector(vec![-1.0, 0.0, 0.0, 0.0])).unwrap();
        let ll = bce_log_likelihood(&mut tape, x, pos, &[neg]).unwrap();
        assert!(tape.value(ll).item().abs() < 1e-12);

        // Plain mirror.
        let plain = bce_log_likelihood_plain(
            &[0.0f64; 4],
            &[1.0, 0.0, 0.0, 0.0],
            &[&[0.0, 1.0, 0.0, 0.0]],
        );
        assert!((plain - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mixture_loss_cases() {
        // Degenerate mixture.
        assert_eq!(mixture_loss(&[1.0, 0.0], &[-1.5, 99.0]), 1.5);
        // Uniform over two equal branches.
        let l = mixture_loss(&[0.5, 0.5], &[-1.3863, -1.3863]);
        assert!((l - 1.3863).abs() < 1e-12);
        // Convex-combination bound.
        let probs = [0.2, 0.5, 0.3];
        let lls = [-2.0, -0.5, -1.0];
        let loss = mixture_loss(&probs, &lls);
        assert!(loss >= 0.5 && loss <= 2.0);
    }

    #[test]
    fn policy_loss_values() {
        let (bank, _) = toy_bank();
        let mut tape = Tape::new(&bank);
        let lp1 = tape.input(Tensor::scalar(-0.5)).unwrap();
        let lp2 = tape.input(Tensor::scalar(-1.5)).unwrap();
        // advantage 0 (return equals baseline) kills the term.
        let zero = policy_loss_on_tape(&mut tape, &[lp1, lp2], 0.0).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);
        // -(1) * (-2) = 2.
        let two = policy_loss_on_tape(&mut tape, &[lp1, lp2], 1.0).unwrap();
        assert_eq!(tape.value(two).item(), 2.0);
        // Empty log-prob list contributes nothing.
        let empty = policy_loss_on_tape(&mut tape, &[], 5.0).unwrap();
        assert_eq!(tape.value(empty).item(), 0.0);
    }

    #[test]
    fn policy_gradient_pushes_taken_actions_up() {
        // Two-action bandit: logits are two parameters; positive advantage on
        // action 0 must increase p(0) after one ascent step.
        let mut bank = ParamBank::new();
        let l0 = bank
            .add("logit0", ParamGroup::Agent, Tensor::scalar(0.1))
            .unwrap();
        let l1 = bank
            .add("logit1", ParamGroup::Agent, Tensor::scalar(-0.2))
            .unwrap();
        let grads = {
            let mut tape = Tape::new(&bank);
            let a = tape.param(l0);
            let b = tape.param(l1);
            let stacked = tape.stack_scalars(&[a, b]).unwrap();
            let logp = tape.log_softmax(stacked);
            let taken = tape.index(logp, 0).unwrap();
            let loss = policy_loss_on_tape(&mut tape, &[taken], 1.0).unwrap();
            tape.backward(loss).unwrap()
        };
        // Minimizing the loss means moving along -grad: logit0 must rise,
        // logit1 must fall.
        assert!(grads.get(l0)[0] < 0.0);
        assert!(grads.get(l1)[0] > 0.0);
    }

    #[test]
    fn combined_loss_mixes_by_alpha() {
        let (bank, _) = toy_bank();
        let mut tape = Tape::new(&bank);
        let p = tape.input(Tensor::scalar(2.0)).unwrap();
        let m = tape.input(Tensor::scalar(1.3863)).unwrap();
        let only_m = combined_loss_on_tape(&mut tape, p, m, 0.0).unwrap();
        assert!((tape.value(only_m).item() - 1.3863).abs() < 1e-12);
        let only_p = combined_loss_on_tape(&mut tape, p, m, 1.0).unwrap();
        assert!((tape.value(only_p).item() - 2.0).abs() < 1e-12);
        let half = combined_loss_on_tape(&mut tape, p, m, 0.5).unwrap();
        assert!((tape.value(half).item() - 1.69315).abs() < 1e-4);
    }

    #[test]
    fn single_sequence_loss_matches_first_branch_of_modeler() {
        // With the allocator forced to one thread, branch 1 of the mixture
        // scores with the same encoder over the same events, so its
        // log-likelihood equals the negated single-sequence loss.
        let (bank, model) = toy_bank();
        let agent = toy_agent();
        let history: Vec<(usize, f64)> = vec![(0, 0.0), (3, 0.4), (6, 0.8)];
        let target = PredictionTarget {
            user: 0,
            item: 2,
            time: 1.0,
            negatives: vec![5, 7],
        };
        let script = vec![Allocation::New, Allocation::Existing(0), Allocation::Existing(0)];

        let mut tape = Tape::new(&bank);
        let rollout = allocator::rollout(
            &mut tape,
            &bank,
            &model,
            &agent,
            &RewardConfig::disabled(),
            0,
            &history,
            Policy::Forced(&script),
            None,
        )
        .unwrap();
        let modeler = modeler_loss_on_tape(&mut tape, &model, &agent, &rollout, &target).unwrap();
        let eq1 = single_sequence_loss_on_tape(&mut tape, &model, &history, &target).unwrap();

        // Recompute the mixture by hand from the plain path to split branches.
        let frozen = GruSnapshot::from_bank(&bank, &model.modeler_gru);
        let plain = modeler_loss_plain(
            &bank,
            &model,
            &agent,
            &frozen,
            &rollout.trajectory.final_state,
            &target,
        )
        .unwrap();
        assert!((tape.value(modeler).item() - plain).abs() < 1e-12);

        // eq1 = -ll(branch 1): reconstruct branch 1 from the plain encoders.
        let dim = 4;
        let table = bank.value(model.item_emb).data();
        let emb = |i: usize| &table[i * dim..(i + 1) * dim];
        let user_emb = &bank.value(model.user_emb).data()[0..dim];
        let rows: Vec<(&[f64], f64)> = history.iter().map(|&(i, t)| (emb(i), t)).collect();
        let x = frozen.as_ref().encode(user_emb, &rows).unwrap();
        let negs: Vec<&[f64]> = target.negatives.iter().map(|&n| emb(n)).collect();
        let ll1 = bce_log_likelihood_plain(&x, emb(target.item), &negs);
        assert!((tape.value(eq1).item() + ll1).abs() < 1e-12);
    }

    #[test]
    fn mix_seed_is_stable_and_sensitive() {
        let a = mix_seed(&[1, 2, 3]);
        assert_eq!(a, mix_seed(&[1, 2, 3]));
        assert_ne!(a, mix_seed(&[1, 2, 4]));
        assert_ne!(a, mix_seed(&[3, 2, 1]));
    }
}
