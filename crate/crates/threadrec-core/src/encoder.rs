//! Time-aware GRU sequence encoders.
//!
//! The same architecture backs both the agent-side thread encoder and the
//! sub-sequence modeler (separate weights). The hidden state is initialized
//! from a projection of the user embedding; each step consumes the item
//! embedding concatenated with a learned projection of the time gap since the
//! previous item in the same sub-sequence. The sub-sequence representation is
//! the mean of the per-step hidden states (the initial state is excluded);
//! an empty sub-sequence is represented by the initial state itself.

use crate::allocator::AllocState;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::GruIds;
use crate::params::{ParamBank, ParamId};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

// ── Taped path ───────────────────────────────────────────────────────

/// Incrementally built sub-sequence encoding on a tape.
///
/// Appending an item costs one GRU cell; the pooled representation reuses a
/// running sum, so re-encoding the prefix is never needed. The resulting
/// nodes are bit-identical to a fresh [`encode`] over the same items.
pub struct ThreadEncoder {
    hidden: Var,
    hidden_sum: Option<Var>,
    len: usize,
    last_time: f64,
}

impl ThreadEncoder {
    /// Start an empty sub-sequence: hidden state is the projected user embedding.
    pub fn new<T: Scalar>(tape: &mut Tape<T>, gru: &GruIds, user_emb: Var) -> Result<Self> {
        let init_w = tape.param(gru.user_init);
        let hidden = tape.matvec(init_w, user_emb)?;
        Ok(ThreadEncoder {
            hidden,
            hidden_sum: None,
            len: 0,
            last_time: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Time of the most recent item, or 0 for an empty sub-sequence.
    pub fn last_time(&self) -> f64 {
        self.last_time
    }

    /// Feed one (item embedding, absolute normalized time) step.
    ///
    /// The first item of a sub-sequence uses a zero time gap; later items use
    /// the gap from the previous item. Decreasing times are rejected.
    pub fn push<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        gru: &GruIds,
        item_emb: Var,
        time: f64,
    ) -> Result<()> {
        let gap = if self.len == 0 {
            0.0
        } else {
            if time < self.last_time {
                return Err(Error::TimeOrder {
                    current: time,
                    last: self.last_time,
                });
            }
            time - self.last_time
        };
        let x = gru_input(tape, gru, item_emb, gap)?;
        self.hidden = gru_cell(tape, gru, self.hidden, x)?;
        self.hidden_sum = Some(match self.hidden_sum {
            Some(sum) => tape.add(sum, self.hidden)?,
            None => self.hidden,
        });
        self.len += 1;
        self.last_time = time;
        Ok(())
    }

    /// Mean of the per-step hidden states; the initial state for an empty
    /// sub-sequence.
    pub fn pooled<T: Scalar>(&self, tape: &mut Tape<T>) -> Var {
        match self.hidden_sum {
            Some(sum) => tape.scale(sum, T::of(1.0 / self.len as f64)),
            None => self.hidden,
        }
    }
}

fn gru_input<T: Scalar>(
    tape: &mut Tape<T>,
    gru: &GruIds,
    item_emb: Var,
    gap: f64,
) -> Result<Var> {
    let tw = tape.param(gru.time_w);
    let tb = tape.param(gru.time_b);
    let scaled = tape.scale(tw, T::of(gap));
    let time_feat = tape.add(scaled, tb)?;
    Ok(tape.concat(item_emb, time_feat))
}

/// One GRU cell: h' = h + z * (cand - h).
fn gru_cell<T: Scalar>(tape: &mut Tape<T>, gru: &GruIds, hidden: Var, x: Var) -> Result<Var> {
    let gate = |tape: &mut Tape<T>, w: ParamId, u: ParamId, b: ParamId, state: Var| -> Result<Var> {
        let wv = tape.param(w);
        let uv = tape.param(u);
        let bv = tape.param(b);
        let wx = tape.matvec(wv, x)?;
        let uh = tape.matvec(uv, state)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, bv)
    };
    let update = gate(tape, gru.w_update, gru.u_update, gru.b_update, hidden)?;
    let update = tape.sigmoid(update);
    let reset = gate(tape, gru.w_reset, gru.u_reset, gru.b_reset, hidden)?;
    let reset = tape.sigmoid(reset);
    let gated_hidden = tape.mul(reset, hidden)?;
    let cand = gate(tape, gru.w_cand, gru.u_cand, gru.b_cand, gated_hidden)?;
    let cand = tape.tanh(cand);
    let delta = tape.sub(cand, hidden)?;
    let step = tape.mul(update, delta)?;
    tape.add(hidden, step)
}

/// Encode one sub-sequence of (item index, normalized time) pairs on the tape.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    gru: &GruIds,
    item_table: ParamId,
    user_emb: Var,
    events: &[(usize, f64)],
) -> Result<Var> {
    let mut enc = ThreadEncoder::new(tape, gru, user_emb)?;
    for &(item, time) in events {
        let item_emb = tape.gather(item_table, item)?;
        enc.push(tape, gru, item_emb, time)?;
    }
    Ok(enc.pooled(tape))
}

/// One pooled representation per sub-sequence in the state, order-aligned.
pub fn encode_all<T: Scalar>(
    tape: &mut Tape<T>,
    gru: &GruIds,
    item_table: ParamId,
    user_emb: Var,
    state: &AllocState,
) -> Result<Vec<Var>> {
    state
        .threads()
        .iter()
        .map(|thread| encode(tape, gru, item_table, user_emb, thread))
        .collect()
}

// ── Plain path ───────────────────────────────────────────────────────

/// Borrowed weight slices for tape-free encoding (serving, frozen-weight
/// reward evaluation).
pub struct GruRef<'a, T> {
    pub w_update: &'a [T],
    pub u_update: &'a [T],
    pub b_update: &'a [T],
    pub w_reset: &'a [T],
    pub u_reset: &'a [T],
    pub b_reset: &'a [T],
    pub w_cand: &'a [T],
    pub u_cand: &'a [T],
    pub b_cand: &'a [T],
    pub user_init: &'a [T],
    pub time_w: &'a [T],
    pub time_b: &'a [T],
    pub hidden_dim: usize,
    pub input_dim: usize,
}

impl<'a, T: Scalar> GruRef<'a, T> {
    pub fn from_bank(bank: &'a ParamBank<T>, ids: &GruIds) -> Self {
        let hidden_dim = bank.value(ids.u_update).shape()[0];
        let input_dim = bank.value(ids.w_update).shape()[1];
        GruRef {
            w_update: bank.value(ids.w_update).data(),
            u_update: bank.value(ids.u_update).data(),
            b_update: bank.value(ids.b_update).data(),
            w_reset: bank.value(ids.w_reset).data(),
            u_reset: bank.value(ids.u_reset).data(),
            b_reset: bank.value(ids.b_reset).data(),
            w_cand: bank.value(ids.w_cand).data(),
            u_cand: bank.value(ids.u_cand).data(),
            b_cand: bank.value(ids.b_cand).data(),
            user_init: bank.value(ids.user_init).data(),
            time_w: bank.value(ids.time_w).data(),
            time_b: bank.value(ids.time_b).data(),
            hidden_dim,
            input_dim,
        }
    }

    fn cell(&self, hidden: &[T], x: &[T]) -> Vec<T> {
        let d = self.hidden_dim;
        let din = self.input_dim;
        let pre = |w: &[T], u: &[T], b: &[T], state: &[T]| -> Vec<T> {
            let mut s = linalg::matvec(w, d, din, x);
            let uh = linalg::matvec(u, d, d, state);
            for i in 0..d {
                s[i] += uh[i] + b[i];
            }
            s
        };
        let update = linalg::sigmoid_vec(&pre(self.w_update, self.u_update, self.b_update, hidden));
        let reset = linalg::sigmoid_vec(&pre(self.w_reset, self.u_reset, self.b_reset, hidden));
        let gated: Vec<T> = linalg::mul(&reset, hidden);
        let cand = linalg::tanh_vec(&pre(self.w_cand, self.u_cand, self.b_cand, &gated));
        (0..d)
            .map(|i| hidden[i] + update[i] * (cand[i] - hidden[i]))
            .collect()
    }

    fn input_vec(&self, item_emb: &[T], gap: f64) -> Vec<T> {
        let mut x = item_emb.to_vec();
        let g = T::of(gap);
        for (w, b) in self.time_w.iter().zip(self.time_b) {
            x.push(*w * g + *b);
        }
        x
    }

    /// Tape-free mirror of [`encode`]; same op order, bit-identical output.
    pub fn encode(&self, user_emb: &[T], events: &[(&[T], f64)]) -> Result<Vec<T>> {
        let mut hidden = linalg::matvec(self.user_init, self.hidden_dim, self.hidden_dim, user_emb);
        if events.is_empty() {
            return Ok(hidden);
        }
        let mut sum = vec![T::zero(); self.hidden_dim];
        let mut last = 0.0f64;
        for (j, (emb, time)) in events.iter().enumerate() {
            let gap = if j == 0 {
                0.0
            } else {
                if *time < last {
                    return Err(Error::TimeOrder {
                        current: *time,
                        last,
                    });
                }
                *time - last
            };
            let x = self.input_vec(emb, gap);
            hidden = self.cell(&hidden, &x);
            for (s, h) in sum.iter_mut().zip(&hidden) {
                *s += *h;
            }
            last = *time;
        }
        Ok(linalg::scale(&sum, T::of(1.0 / events.len() as f64)))
    }
}

/// Owned copy of one encoder's weights, taken at a batch boundary so the
/// data-fit reward scores against parameters frozen from the previous batch.
pub struct GruSnapshot<T> {
    tensors: Vec<crate::tensor::Tensor<T>>,
    hidden_dim: usize,
    input_dim: usize,
}

impl<T: Scalar> GruSnapshot<T> {
    pub fn from_bank(bank: &ParamBank<T>, ids: &GruIds) -> Self {
        let order = [
            ids.w_update,
            ids.u_update,
            ids.b_update,
            ids.w_reset,
            ids.u_reset,
            ids.b_reset,
            ids.w_cand,
            ids.u_cand,
            ids.b_cand,
            ids.user_init,
            ids.time_w,
            ids.time_b,
        ];
        GruSnapshot {
            tensors: order.iter().map(|id| bank.snapshot(*id)).collect(),
            hidden_dim: bank.value(ids.u_update).shape()[0],
            input_dim: bank.value(ids.w_update).shape()[1],
        }
    }

    pub fn as_ref(&self) -> GruRef<'_, T> {
        GruRef {
            w_update: self.tensors[0].data(),
            u_update: self.tensors[1].data(),
            b_update: self.tensors[2].data(),
            w_reset: self.tensors[3].data(),
            u_reset: self.tensors[4].data(),
            b_reset: self.tensors[5].data(),
            w_cand: self.tensors[6].data(),
            u_cand: self.tensors[7].data(),
            b_cand: self.tensors[8].data(),
            user_init: self.tensors[9].data(),
            time_w: self.tensors[10].data(),
            time_b: self.tensors[11].data(),
            hidden_dim: self.hidden_dim,
            input_dim: self.input_dim,
        }
    }
}

/// Convenience: plain encoding of item indices against a bank.
pub fn encode_plain<T: Scalar>(
    bank: &ParamBank<T>,
    gru_ref: &GruRef<'_, T>,
    item_table: ParamId,
    user_emb: &[T],
    events: &[(usize, f64)],
) -> Result<Vec<T>> {
    let d = bank.value(item_table).shape()[1];
    let table = bank.value(item_table).data();
    let rows: Vec<(&[T], f64)> = events
        .iter()
        .map(|&(item, t)| (&table[item * d..(item + 1) * d], t))
        .collect();
    gru_ref.encode(user_emb, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_param_grad, relative_error, DEFAULT_STEP};
    use crate::model::{init_model, ModelDims, ModelParams};
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model(seed: u64) -> (ParamBank<f64>, ModelParams, ModelDims) {
        let dims = ModelDims::new(4, 2, 6).unwrap();
        let (bank, model) = init_model(&dims, seed).unwrap();
        (bank, model, dims)
    }

    fn zero_gru(bank: &mut ParamBank<f64>, ids: &GruIds) {
        for pid in [
            ids.w_update,
            ids.u_update,
            ids.b_update,
            ids.w_reset,
            ids.u_reset,
            ids.b_reset,
            ids.w_cand,
            ids.u_cand,
            ids.b_cand,
            ids.time_w,
            ids.time_b,
        ] {
            let t = bank.value_mut(pid);
            for x in t.data_mut() {
                *x = 0.0;
            }
        }
    }

    #[test]
    fn zero_weight_cell_halves_the_state() {
        // With all gate weights and biases zero: update = sigmoid(0) = 0.5,
        // candidate = tanh(0) = 0, so one step maps h0 to 0.5 * h0 and the
        // pooled output equals the single hidden state.
        let (mut bank, model, _) = toy_model(5);
        zero_gru(&mut bank, &model.agent_gru);
        let mut tape = Tape::new(&bank);
        let user = tape.gather(model.user_emb, 0).unwrap();
        let h0 = {
            let w = tape.param(model.agent_gru.user_init);
            tape.matvec(w, user).unwrap()
        };
        let out = encode(
            &mut tape,
            &model.agent_gru,
            model.item_emb,
            user,
            &[(2, 0.3)],
        )
        .unwrap();
        for (o, h) in tape.value(out).data().iter().zip(tape.value(h0).data()) {
            assert!((o - 0.5 * h).abs() < 1e-15, "{o} vs 0.5 * {h}");
        }
    }

    #[test]
    fn empty_subsequence_returns_projected_user_state() {
        let (bank, model, _) = toy_model(6);
        let mut tape = Tape::new(&bank);
        let user = tape.gather(model.user_emb, 1).unwrap();
        let out = encode(&mut tape, &model.agent_gru, model.item_emb, user, &[]).unwrap();
        let w = tape.param(model.agent_gru.user_init);
        let h0 = tape.matvec(w, user).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(h0).data());
    }

    /// Hand-unrolled reference: explicit gate equations, no shared helpers.
    fn reference_encode(
        bank: &ParamBank<f64>,
        ids: &GruIds,
        item_table: crate::params::ParamId,
        user: usize,
        user_table: crate::params::ParamId,
        events: &[(usize, f64)],
    ) -> Vec<f64> {
        let d = bank.value(ids.u_update).shape()[0];
        let dt = bank.value(ids.time_w).shape()[0];
        let din = d + dt;
        let fetch = |pid: crate::params::ParamId| bank.value(pid).data().to_vec();
        let (wu, uu, bu) = (fetch(ids.w_update), fetch(ids.u_update), fetch(ids.b_update));
        let (wr, ur, br) = (fetch(ids.w_reset), fetch(ids.u_reset), fetch(ids.b_reset));
        let (wc, uc, bc) = (fetch(ids.w_cand), fetch(ids.u_cand), fetch(ids.b_cand));
        let (tw, tb) = (fetch(ids.time_w), fetch(ids.time_b));
        let init = fetch(ids.user_init);
        let users = bank.value(user_table).data();
        let items = bank.value(item_table).data();

        let mut h = vec![0.0f64; d];
        for r in 0..d {
            for c in 0..d {
                h[r] += init[r * d + c] * users[user * d + c];
            }
        }
        let mut sum = vec![0.0f64; d];
        let mut last = 0.0f64;
        for (j, &(item, t)) in events.iter().enumerate() {
            let gap = if j == 0 { 0.0 } else { t - last };
            last = t;
            let mut x = items[item * d..(item + 1) * d].to_vec();
            for k in 0..dt {
                x.push(tw[k] * gap + tb[k]);
            }
            let gate = |w: &[f64], u: &[f64], b: &[f64], state: &[f64]| -> Vec<f64> {
                (0..d)
                    .map(|r| {
                        let mut acc = b[r];
                        for c in 0..din {
                            acc += w[r * din + c] * x[c];
                        }
                        for c in 0..d {
                            acc += u[r * d + c] * state[c];
                        }
                        acc
                    })
                    .collect()
            };
            let z: Vec<f64> = gate(&wu, &uu, &bu, &h)
                .into_iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect();
            let rg: Vec<f64> = gate(&wr, &ur, &br, &h)
                .into_iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect();
            let gated: Vec<f64> = rg.iter().zip(&h).map(|(r, hh)| r * hh).collect();
            let cand: Vec<f64> = gate(&wc, &uc, &bc, &gated)
                .into_iter()
                .map(f64::tanh)
                .collect();
            for r in 0..d {
                h[r] = h[r] + z[r] * (cand[r] - h[r]);
                sum[r] += h[r];
            }
        }
        sum.iter().map(|s| s / events.len() as f64).collect()
    }

    #[test]
    fn three_step_encode_matches_hand_unrolled_reference() {
        let (bank, model, _) = toy_model(7);
        let events = [(1, 0.1), (4, 0.35), (2, 0.9)];
        let mut tape = Tape::new(&bank);
        let user = tape.gather(model.user_emb, 0).unwrap();
        let out = encode(&mut tape, &model.agent_gru, model.item_emb, user, &events).unwrap();
        let want = reference_encode(
            &bank,
            &model.agent_gru,
            model.item_emb,
            0,
            model.user_emb,
            &events,
        );
        for (g, w) in tape.value(out).data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        // The plain path agrees bit for bit with the taped path.
        let gru = GruRef::from_bank(&bank, &model.agent_gru);
        let d = 4;
        let users = bank.value(model.user_emb).data();
        let plain = encode_plain(&bank, &gru, model.item_emb, &users[..d], &events).unwrap();
        assert_eq!(tape.value(out).data(), &plain[..]);
    }

    #[test]
    fn decreasing_times_are_rejected() {
        let (bank, model, _) = toy_model(8);
        let mut tape = Tape::new(&bank);
        let user = tape.gather(model.user_emb, 0).unwrap();
        let err = encode(
            &mut tape,
            &model.agent_gru,
            model.item_emb,
            user,
            &[(1, 0.5), (2, 0.2)],
        );
        assert!(matches!(err, Err(Error::TimeOrder { .. })));
    }

    #[test]
    fn order_and_time_sensitivity() {
        let (bank, model, _) = toy_model(9);
        let encode_with = |events: &[(usize, f64)]| -> Vec<f64> {
            let mut tape = Tape::new(&bank);
            let user = tape.gather(model.user_emb, 0).unwrap();
            let out = encode(&mut tape, &model.agent_gru, model.item_emb, user, events).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = encode_with(&[(1, 0.1), (3, 0.4)]);
        let reversed = encode_with(&[(3, 0.1), (1, 0.4)]);
        assert!(
            base.iter().zip(&reversed).any(|(a, b)| (a - b).abs() > 1e-9),
            "reversing the items must change the encoding"
        );
        let stretched = encode_with(&[(1, 0.2), (3, 0.8)]);
        assert!(
            base.iter().zip(&stretched).any(|(a, b)| (a - b).abs() > 1e-9),
            "scaling the gaps must change the encoding"
        );
    }

    #[test]
    fn incremental_push_equals_fresh_encode() {
        let (bank, model, _) = toy_model(10);
        let events = [(0, 0.0), (5, 0.2), (3, 0.6), (3, 0.95)];
        let mut tape = Tape::new(&bank);
        let user = tape.gather(model.user_emb, 1).unwrap();
        let mut enc = ThreadEncoder::new(&mut tape, &model.agent_gru, user).unwrap();
        for &(item, t) in &events {
            let emb = tape.gather(model.item_emb, item).unwrap();
            enc.push(&mut tape, &model.agent_gru, emb, t).unwrap();
        }
        let incremental = enc.pooled(&mut tape);
        let fresh = encode(&mut tape, &model.agent_gru, model.item_emb, user, &events).unwrap();
        assert_eq!(tape.value(incremental).data(), tape.value(fresh).data());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (mut bank, model, _) = toy_model(12);
        let events = [(1, 0.1), (4, 0.5), (2, 0.8)];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let loss = |b: &ParamBank<f64>| -> f64 {
            let mut tape = Tape::new(b);
            let user = tape.gather(model.user_emb, 0).unwrap();
            let out = encode(&mut tape, &model.agent_gru, model.item_emb, user, &events).unwrap();
            let p = tape.input(Tensor::vector(probe.clone())).unwrap();
            let d = tape.dot(out, p).unwrap();
            tape.value(d).item()
        };
        let analytic = {
            let mut tape = Tape::new(&bank);
            let user = tape.gather(model.user_emb, 0).unwrap();
            let out = encode(&mut tape, &model.agent_gru, model.item_emb, user, &events).unwrap();
            let p = tape.input(Tensor::vector(probe.clone())).unwrap();
            let d = tape.dot(out, p).unwrap();
            tape.backward(d).unwrap()
        };
        for pid in [
            model.agent_gru.w_update,
            model.agent_gru.u_reset,
            model.agent_gru.b_cand,
            model.agent_gru.user_init,
            model.agent_gru.time_w,
            model.agent_gru.time_b,
            model.item_emb,
            model.user_emb,
        ] {
            let fd = fd_param_grad(&mut bank, pid, DEFAULT_STEP, |b| loss(b));
            for (i, (a, n)) in analytic.get(pid).iter().zip(&fd).enumerate() {
                let err = relative_error(*a, *n);
                assert!(err < 1e-4, "{pid:?}[{i}]: {a} vs {n} ({err:.2e})");
            }
        }
    }
}
