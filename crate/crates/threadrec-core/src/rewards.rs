//! Reward components for the allocation MDP: data fit, intra-thread
//! coherence, inter-thread orthogonality, and the curriculum-scheduled bonus
//! for opening new threads. All components are plain numbers; gradients never
//! flow through rewards (score-function estimator).

use crate::allocator::Allocation;
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Reward hyperparameters and per-component ablation toggles.
#[derive(Clone, Copy, Debug)]
pub struct RewardConfig {
    /// Discount factor in (0, 1].
    pub gamma: f64,
    /// Slope of the new-thread schedule; negative, so the bonus decays into a
    /// penalty as the trajectory progresses.
    pub curriculum_slope: f64,
    /// Intercept of the new-thread schedule.
    pub curriculum_offset: f64,
    pub fit: bool,
    pub coherence: bool,
    pub orthogonality: bool,
    pub new_thread: bool,
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.curriculum_slope >= 0.0 {
            return Err(Error::Config(format!(
                "curriculum slope must be negative, got {}",
                self.curriculum_slope
            )));
        }
        Ok(())
    }

    /// All components off; used for reward-free rollouts (serving).
    pub fn disabled() -> Self {
        RewardConfig {
            gamma: 1.0,
            curriculum_slope: -0.1,
            curriculum_offset: 0.0,
            fit: false,
            coherence: false,
            orthogonality: false,
            new_thread: false,
        }
    }
}

/// Per-step reward components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardBreakdown {
    pub fit: f64,
    pub coherence: f64,
    pub orthogonality: f64,
    pub new_thread: f64,
}

impl RewardBreakdown {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn total(&self) -> f64 {
        self.fit + self.coherence + self.orthogonality + self.new_thread
    }
}

/// Sum of the components enabled in `cfg`.
pub fn total_reward(components: &RewardBreakdown, cfg: &RewardConfig) -> f64 {
    let mut sum = 0.0;
    if cfg.fit {
        sum += components.fit;
    }
    if cfg.coherence {
        sum += components.coherence;
    }
    if cfg.orthogonality {
        sum += components.orthogonality;
    }
    if cfg.new_thread {
        sum += components.new_thread;
    }
    sum
}

// ── Thread embedding bookkeeping ─────────────────────────────────────

/// Running item-embedding sums per thread; the thread embedding is the mean
/// of its item embeddings.
pub struct ThreadEmbeddings<T> {
    sums: Vec<Vec<T>>,
    counts: Vec<usize>,
    dim: usize,
}

impl<T: Scalar> ThreadEmbeddings<T> {
    pub fn new(dim: usize) -> Self {
        ThreadEmbeddings {
            sums: Vec::new(),
            counts: Vec::new(),
            dim,
        }
    }

    /// Build from explicit thread contents (used by tests and replays).
    pub fn from_threads(dim: usize, threads: &[Vec<&[T]>]) -> Self {
        let mut out = Self::new(dim);
        for thread in threads {
            let mut first = true;
            for emb in thread {
                if first {
                    out.push_new(emb);
                    first = false;
                } else {
                    out.push_existing(out.thread_count() - 1, emb);
                }
            }
        }
        out
    }

    pub fn thread_count(&self) -> usize {
        self.sums.len()
    }

    pub fn push_existing(&mut self, b: usize, emb: &[T]) {
        debug_assert_eq!(emb.len(), self.dim);
        for (s, e) in self.sums[b].iter_mut().zip(emb) {
            *s += *e;
        }
        self.counts[b] += 1;
    }

    pub fn push_new(&mut self, emb: &[T]) {
        self.sums.push(emb.to_vec());
        self.counts.push(1);
    }

    pub fn count(&self, b: usize) -> usize {
        self.counts[b]
    }

    /// Mean item embedding of thread `b`.
    pub fn mean(&self, b: usize) -> Vec<T> {
        linalg::scale(&self.sums[b], T::of(1.0 / self.counts[b] as f64))
    }
}

/// Cosine similarity with the zero-norm convention: any zero-norm side makes
/// the similarity 0 (avoids NaN on zero-initialized embeddings).
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let na = linalg::norm2(a).as_f64();
    let nb = linalg::norm2(b).as_f64();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    linalg::dot(a, b).as_f64() / (na * nb)
}

// ── Components ───────────────────────────────────────────────────────

/// Data-fit component: zero until the final step, where it is the negated
/// prediction loss of the finished decomposition.
pub fn reward_fit(step: usize, total: usize, loss: f64) -> f64 {
    debug_assert!((1..=total).contains(&step));
    if step < total {
        0.0
    } else {
        -loss
    }
}

/// Cosine between the target thread's mean embedding and the incoming item;
/// for a new thread, between the user and item embeddings.
pub fn reward_coherence<T: Scalar>(
    threads: &ThreadEmbeddings<T>,
    action: Allocation,
    item_emb: &[T],
    user_emb: &[T],
) -> f64 {
    match action {
        Allocation::Existing(b) => cosine(&threads.mean(b), item_emb),
        Allocation::New => cosine(user_emb, item_emb),
    }
}

/// Negative summed absolute cosine between the updated thread embedding and
/// every other thread embedding. Zero when no other thread exists.
pub fn reward_orthogonality<T: Scalar>(
    threads: &ThreadEmbeddings<T>,
    action: Allocation,
    item_emb: &[T],
) -> f64 {
    // Embedding of the receiving thread after absorbing the item.
    let updated: Vec<T> = match action {
        Allocation::Existing(b) => {
            let n = threads.count(b) as f64;
            let mean = threads.mean(b);
            let w = T::of(n / (n + 1.0));
            let wi = T::of(1.0 / (n + 1.0));
            mean.iter()
                .zip(item_emb)
                .map(|(m, e)| *m * w + *e * wi)
                .collect()
        }
        Allocation::New => item_emb.to_vec(),
    };
    let skip = match action {
        Allocation::Existing(b) => Some(b),
        Allocation::New => None,
    };
    let mut total = 0.0;
    for j in 0..threads.thread_count() {
        if Some(j) == skip {
            continue;
        }
        total += cosine(&updated, &threads.mean(j)).abs();
    }
    -total
}

/// Curriculum bonus for opening a new thread: `slope * step + offset`,
/// unclamped, so a late new thread is penalized.
pub fn reward_new_thread(step: usize, action: Allocation, slope: f64, offset: f64) -> f64 {
    match action {
        Allocation::Existing(_) => 0.0,
        Allocation::New => slope * step as f64 + offset,
    }
}

/// R = sum_i gamma^(i-1) r_i.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut factor = 1.0;
    let mut total = 0.0;
    for r in rewards {
        total += factor * r;
        factor *= gamma;
    }
    total
}
