//! The item allocator: an MDP that walks a user's behavior sequence and
//! assigns every interaction to an existing preference thread or opens a new
//! one.
//!
//! Coherence between the incoming item and each thread is a learned semantic
//! similarity damped by a temporal decay of the gap since the thread's last
//! event. The policy is an epsilon-softmax: a softmax over the thread
//! coherence scores augmented with a constant logit representing "create a
//! new thread", which lets the action space grow adaptively.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::ThreadEncoder;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{MlpIds, ModelParams};
use crate::params::ParamBank;
use crate::rewards::{
    self, RewardBreakdown, RewardConfig, ThreadEmbeddings,
};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

// ── State ────────────────────────────────────────────────────────────

/// Ordered set of sub-sequences plus the time of the most recently placed
/// item. Items are (item index, normalized time) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocState {
    threads: Vec<Vec<(usize, f64)>>,
    clock: f64,
}

impl AllocState {
    pub fn new() -> Self {
        AllocState {
            threads: Vec::new(),
            clock: 0.0,
        }
    }

    /// Number of existing sub-sequences.
    pub fn thread_count(&self) -> usize {
        self.threads.len()
    }

    pub fn threads(&self) -> &[Vec<(usize, f64)>] {
        &self.threads
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn total_items(&self) -> usize {
        self.threads.iter().map(Vec::len).sum()
    }

    /// Time of the last item in thread `b`.
    pub fn last_time(&self, b: usize) -> f64 {
        self.threads[b].last().map(|&(_, t)| t).unwrap_or(0.0)
    }

    fn apply(&mut self, action: Allocation, item: usize, time: f64) -> Result<()> {
        match action {
            Allocation::Existing(b) => {
                let k = self.threads.len();
                if b >= k {
                    return Err(Error::ActionOutOfRange {
                        action: b + 1,
                        threads: k,
                    });
                }
                if time < self.last_time(b) {
                    return Err(Error::TimeOrder {
                        current: time,
                        last: self.last_time(b),
                    });
                }
                self.threads[b].push((item, time));
            }
            Allocation::New => self.threads.push(vec![(item, time)]),
        }
        self.clock = time;
        Ok(())
    }
}

impl Default for AllocState {
    fn default() -> Self {
        Self::new()
    }
}

/// One MDP action: extend an existing thread (0-based index) or open a new one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Allocation {
    Existing(usize),
    New,
}

impl Allocation {
    /// The literal action number at a state with `k` threads: existing threads
    /// are 1..=k, "new" is k+1.
    pub fn number(self, k: usize) -> usize {
        match self {
            Allocation::Existing(b) => b + 1,
            Allocation::New => k + 1,
        }
    }

    pub fn from_number(a: usize, k: usize) -> Result<Self> {
        if a == 0 || a > k + 1 {
            Err(Error::ActionOutOfRange {
                action: a,
                threads: k,
            })
        } else if a == k + 1 {
            Ok(Allocation::New)
        } else {
            Ok(Allocation::Existing(a - 1))
        }
    }
}

/// Deterministic transition: append the item to a thread or open a new one.
pub fn transition(
    state: &AllocState,
    action: Allocation,
    item: usize,
    time: f64,
) -> Result<AllocState> {
    let mut next = state.clone();
    next.apply(action, item, time)?;
    Ok(next)
}

// ── Agent configuration ──────────────────────────────────────────────

/// Temporal decay applied to the semantic similarity in the coherence score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeDecay {
    /// max(0, -slope * gap + offset); clamped so scores stay non-negative.
    Linear { slope: f64, offset: f64 },
    /// exp(-rate * gap).
    Exponential { rate: f64 },
}

impl TimeDecay {
    pub fn eval(self, gap: f64) -> f64 {
        match self {
            TimeDecay::Linear { slope, offset } => (-slope * gap + offset).max(0.0),
            TimeDecay::Exponential { rate } => (-rate * gap).exp(),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            TimeDecay::Linear { slope, .. } if slope <= 0.0 => Err(Error::Config(
                "linear decay slope must be positive".into(),
            )),
            TimeDecay::Exponential { rate } if rate <= 0.0 => Err(Error::Config(
                "exponential decay rate must be positive".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Policy hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AgentConfig {
    /// Constant logit for the "new thread" action.
    pub epsilon: f64,
    /// Softmax temperature.
    pub temperature: f64,
    pub decay: TimeDecay,
    /// Ablation switch: with decay disabled the coherence score is the raw
    /// semantic similarity.
    pub decay_enabled: bool,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        self.decay.validate()
    }
}

// ── Coherence and the epsilon-softmax ────────────────────────────────

fn mlp_on_tape<T: Scalar>(tape: &mut Tape<T>, ids: &MlpIds, input: Var) -> Result<Var> {
    let mut h = input;
    for (w, b, relu) in [
        (ids.w1, ids.b1, true),
        (ids.w2, ids.b2, true),
        (ids.w3, ids.b3, false),
    ] {
        let wv = tape.param(w);
        let bv = tape.param(b);
        let z = tape.matvec(wv, h)?;
        h = tape.add(z, bv)?;
        if relu {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Plain mirror of the similarity MLP.
pub fn mlp_plain<T: Scalar>(bank: &ParamBank<T>, ids: &MlpIds, input: &[T]) -> T {
    let mut h = input.to_vec();
    for (w, b, relu) in [
        (ids.w1, ids.b1, true),
        (ids.w2, ids.b2, true),
        (ids.w3, ids.b3, false),
    ] {
        let wt = bank.value(w);
        let rows = wt.shape()[0];
        let cols = wt.shape()[1];
        let mut z = linalg::matvec(wt.data(), rows, cols, &h);
        for (zi, bi) in z.iter_mut().zip(bank.value(b).data()) {
            *zi += *bi;
        }
        h = if relu { linalg::relu_vec(&z) } else { z };
    }
    h[0]
}

/// Coherence of the incoming item against every thread, on the tape.
///
/// `cs_b = sigmoid(mlp([c_b; e_i])) * decay(t_i - t_b)` where `c_b` is the
/// pooled thread representation and `t_b` the thread's last-item time.
/// Requires at least one thread and a non-receding clock.
pub fn coherence_scores<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelParams,
    agent: &AgentConfig,
    encoders: &[ThreadEncoder],
    item_emb: Var,
    time: f64,
) -> Result<Vec<Var>> {
    let mut scores = Vec::with_capacity(encoders.len());
    for enc in encoders {
        let gap = time - enc.last_time();
        if gap < 0.0 {
            return Err(Error::TimeOrder {
                current: time,
                last: enc.last_time(),
            });
        }
        let pooled = enc.pooled(tape);
        let cat = tape.concat(pooled, item_emb);
        let raw = mlp_on_tape(tape, &model.dist_mlp, cat)?;
        let sim = tape.sigmoid(raw);
        let score = if agent.decay_enabled {
            tape.scale(sim, T::of(agent.decay.eval(gap)))
        } else {
            sim
        };
        scores.push(score);
    }
    Ok(scores)
}

/// Plain mirror of [`coherence_scores`] over precomputed thread representations.
pub fn coherence_scores_plain<T: Scalar>(
    bank: &ParamBank<T>,
    model: &ModelParams,
    agent: &AgentConfig,
    thread_reprs: &[Vec<T>],
    last_times: &[f64],
    item_emb: &[T],
    time: f64,
) -> Result<Vec<T>> {
    let mut scores = Vec::with_capacity(thread_reprs.len());
    for (repr, &last) in thread_reprs.iter().zip(last_times) {
        let gap = time - last;
        if gap < 0.0 {
            return Err(Error::TimeOrder {
                current: time,
                last,
            });
        }
        let mut cat = repr.clone();
        cat.extend_from_slice(item_emb);
        let sim = linalg::sigmoid(mlp_plain(bank, &model.dist_mlp, &cat));
        let decay = if agent.decay_enabled {
            T::of(agent.decay.eval(gap))
        } else {
            T::one()
        };
        scores.push(sim * decay);
    }
    Ok(scores)
}

/// Softmax over `[cs_1, ..., cs_k, epsilon] / temperature`; the final entry is
/// the probability of opening a new thread. Returns (probabilities,
/// log-probabilities).
pub fn epsilon_softmax<T: Scalar>(
    tape: &mut Tape<T>,
    scores: &[Var],
    epsilon: f64,
    temperature: f64,
) -> Result<(Var, Var)> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let eps = tape.constant(epsilon)?;
    let mut all: Vec<Var> = scores.to_vec();
    all.push(eps);
    let stacked = tape.stack_scalars(&all)?;
    let logits = tape.scale(stacked, T::of(1.0 / temperature));
    let probs = tape.softmax(logits);
    let log_probs = tape.log_softmax(logits);
    Ok((probs, log_probs))
}

/// Plain probabilities for sampling-free consumers (serving path).
pub fn epsilon_softmax_plain<T: Scalar>(scores: &[T], epsilon: f64, temperature: f64) -> Vec<T> {
    let mut logits: Vec<T> = scores.to_vec();
    logits.push(T::of(epsilon));
    let inv = T::of(1.0 / temperature);
    for l in logits.iter_mut() {
        *l = *l * inv;
    }
    linalg::softmax(&logits)
}

// ── Trajectories ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    /// State before the action was taken.
    pub state: AllocState,
    pub action: Allocation,
    /// log pi(action | state); 0 for the forced first step.
    pub log_prob: f64,
    pub rewards: RewardBreakdown,
}

/// Recorded rollout of the allocation MDP over one sequence.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub final_state: AllocState,
    pub seed: u64,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<Allocation> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn return_value(&self, gamma: f64) -> f64 {
        let rewards: Vec<f64> = self.steps.iter().map(|s| s.rewards.total()).collect();
        rewards::discounted_return(&rewards, gamma)
    }
}

/// How actions are chosen during a rollout.
pub enum Policy<'a> {
    /// Draw from the epsilon-softmax, reproducibly from the seed.
    Sample(u64),
    /// Highest-probability action, ties toward the lowest index.
    Argmax,
    /// Replay a recorded action string.
    Forced(&'a [Allocation]),
}

/// Everything the training loop needs from a rollout besides the trajectory.
pub struct Rollout {
    pub trajectory: Trajectory,
    /// Log-probability nodes of the non-forced steps, in order.
    pub log_prob_vars: Vec<Var>,
    /// Final per-thread agent encoders, order-aligned with the final state.
    pub encoders: Vec<ThreadEncoder>,
}

/// Final-step data-fit term: the loss of predicting the held-out target from
/// the finished decomposition. Supplied by the training loop (it owns the
/// frozen modeler weights and the negative samples).
pub type FitLoss<'a> = &'a dyn Fn(&AllocState) -> f64;

/// Walk `history`, allocating every item. Step 1 deterministically opens the
/// first thread (log-probability 0, excluded from the policy loss); later
/// steps follow `policy`. Rewards are recorded per step; the data-fit
/// component lands on the final step.
pub fn rollout<T: Scalar>(
    tape: &mut Tape<T>,
    bank: &ParamBank<T>,
    model: &ModelParams,
    agent: &AgentConfig,
    reward_cfg: &RewardConfig,
    user: usize,
    history: &[(usize, f64)],
    policy: Policy<'_>,
    fit_loss: Option<FitLoss<'_>>,
) -> Result<Rollout> {
    agent.validate()?;
    if history.is_empty() {
        return Err(Error::Data("cannot roll out an empty history".into()));
    }
    if let Policy::Forced(actions) = &policy {
        if actions.len() != history.len() {
            return Err(Error::Data(format!(
                "forced action string has {} steps for a {}-item history",
                actions.len(),
                history.len()
            )));
        }
    }

    let mut rng = match &policy {
        Policy::Sample(seed) => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };
    let seed = match &policy {
        Policy::Sample(seed) => *seed,
        _ => 0,
    };

    let dim = bank.value(model.item_emb).shape()[1];
    let user_emb_var = tape.gather(model.user_emb, user)?;
    let user_emb: Vec<T> = tape.value(user_emb_var).data().to_vec();

    let mut state = AllocState::new();
    let mut encoders: Vec<ThreadEncoder> = Vec::new();
    let mut stats = ThreadEmbeddings::new(dim);
    let mut steps = Vec::with_capacity(history.len());
    let mut log_prob_vars = Vec::new();

    let total = history.len();
    for (idx, &(item, time)) in history.iter().enumerate() {
        let step_number = idx + 1;
        let snapshot = state.clone();
        let item_emb_var = tape.gather(model.item_emb, item)?;
        let item_emb: Vec<T> = tape.value(item_emb_var).data().to_vec();

        let (action, log_prob) = if step_number == 1 {
            if let Policy::Forced(actions) = &policy {
                if actions[0] != Allocation::New {
                    return Err(Error::Data(
                        "the first action must open the first thread".into(),
                    ));
                }
            }
            (Allocation::New, 0.0)
        } else {
            let scores = coherence_scores(tape, model, agent, &encoders, item_emb_var, time)?;
            let (probs, log_probs) =
                epsilon_softmax(tape, &scores, agent.epsilon, agent.temperature)?;
            let probs_val = tape.value(probs).data();
            let k = encoders.len();
            let choice = match &policy {
                Policy::Sample(_) => {
                    let u: f64 = rng.as_mut().expect("sampling rng").random::<f64>();
                    pick_from_cdf(probs_val, u)
                }
                Policy::Argmax => linalg::argmax(probs_val),
                Policy::Forced(actions) => match actions[idx] {
                    Allocation::Existing(b) => b,
                    Allocation::New => k,
                },
            };
            let action = if choice == k {
                Allocation::New
            } else {
                Allocation::Existing(choice)
            };
            let lp_var = tape.index(log_probs, choice)?;
            let lp = tape.value(lp_var).item().as_f64();
            if !lp.is_finite() {
                return Err(Error::NonFinite {
                    context: "action log-probability".into(),
                });
            }
            log_prob_vars.push(lp_var);
            (action, lp)
        };

        let mut breakdown = RewardBreakdown::zero();
        if reward_cfg.coherence {
            breakdown.coherence = rewards::reward_coherence(&stats, action, &item_emb, &user_emb);
        }
        if reward_cfg.orthogonality {
            breakdown.orthogonality = rewards::reward_orthogonality(&stats, action, &item_emb);
        }
        if reward_cfg.new_thread {
            breakdown.new_thread = rewards::reward_new_thread(
                step_number,
                action,
                reward_cfg.curriculum_slope,
                reward_cfg.curriculum_offset,
            );
        }

        state.apply(action, item, time)?;
        match action {
            Allocation::Existing(b) => {
                encoders[b].push(tape, &model.agent_gru, item_emb_var, time)?;
                stats.push_existing(b, &item_emb);
            }
            Allocation::New => {
                let mut enc = ThreadEncoder::new(tape, &model.agent_gru, user_emb_var)?;
                enc.push(tape, &model.agent_gru, item_emb_var, time)?;
                encoders.push(enc);
                stats.push_new(&item_emb);
            }
        }

        if step_number == total && reward_cfg.fit {
            if let Some(f) = fit_loss {
                breakdown.fit = rewards::reward_fit(step_number, total, f(&state));
            }
        }

        steps.push(TrajectoryStep {
            state: snapshot,
            action,
            log_prob,
            rewards: breakdown,
        });
    }

    Ok(Rollout {
        trajectory: Trajectory {
            steps,
            final_state: state,
            seed,
        },
        log_prob_vars,
        encoders,
    })
}

fn pick_from_cdf<T: Scalar>(probs: &[T], u: f64) -> usize {
    let mut acc = 0.0f64;
    for (i, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Roll out with a throwaway tape and return only the trajectory.
pub fn sample_trajectory<T: Scalar>(
    bank: &ParamBank<T>,
    model: &ModelParams,
    agent: &AgentConfig,
    reward_cfg: &RewardConfig,
    user: usize,
    history: &[(usize, f64)],
    policy: Policy<'_>,
    fit_loss: Option<FitLoss<'_>>,
) -> Result<Trajectory> {
    let mut tape = Tape::new(bank);
    let rollout = rollout(
        &mut tape, bank, model, agent, reward_cfg, user, history, policy, fit_loss,
    )?;
    Ok(rollout.trajectory)
}

/// Argmax decomposition of a history, rewards off. Used at serving time.
pub fn decompose<T: Scalar>(
    bank: &ParamBank<T>,
    model: &ModelParams,
    agent: &AgentConfig,
    user: usize,
    history: &[(usize, f64)],
) -> Result<Trajectory> {
    sample_trajectory(
        bank,
        model,
        agent,
        &RewardConfig::disabled(),
        user,
        history,
        Policy::Argmax,
        None,
    )
}

// ── Decomposition dumps ──────────────────────────────────────────────

/// Text dump of one user's decomposition: the action string plus one line per
/// thread listing its (item, normalized-time) pairs.
pub fn format_decomposition(
    user_label: &str,
    item_label: impl Fn(usize) -> String,
    trajectory: &Trajectory,
) -> String {
    let mut out = String::new();
    let actions: Vec<String> = trajectory
        .steps
        .iter()
        .map(|s| s.action.number(s.state.thread_count()).to_string())
        .collect();
    out.push_str(&format!("user {user_label} actions {}\n", actions.join(" ")));
    for (b, thread) in trajectory.final_state.threads().iter().enumerate() {
        let items: Vec<String> = thread
            .iter()
            .map(|&(item, t)| format!("({},{:.6})", item_label(item), t))
            .collect();
        out.push_str(&format!("  thread {}: {}\n", b + 1, items.join(" ")));
    }
    out
}
