//! Gradient verification for every tape primitive against central finite
//! differences, plus straight-line forward oracles kept independent of the
//! tape implementation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use threadrec_core::gradcheck::{fd_param_grad, relative_error, DEFAULT_STEP};
use threadrec_core::params::{ParamBank, ParamGroup, ParamId};
use threadrec_core::tape::{Tape, Var};
use threadrec_core::tensor::Tensor;

const TRIALS: usize = 100;
const TOLERANCE: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Check analytic gradients of `build` (a scalar function of the bank's
/// parameters) against central differences, over every parameter entry.
fn check_gradients(
    bank: &mut ParamBank<f64>,
    build: impl Fn(&mut Tape<'_, f64>, &ParamBank<f64>) -> Var,
) {
    let analytic = {
        let mut tape = Tape::new(bank);
        let out = build(&mut tape, bank);
        tape.backward(out).unwrap()
    };
    let ids: Vec<ParamId> = bank.ids().collect();
    for pid in ids {
        let grads = analytic.get(pid).to_vec();
        let fd = fd_param_grad(bank, pid, DEFAULT_STEP, |b| {
            let mut tape = Tape::new(b);
            let out = build(&mut tape, b);
            tape.value(out).item()
        });
        for (i, (a, n)) in grads.iter().zip(&fd).enumerate() {
            let err = relative_error(*a, *n);
            assert!(
                err < TOLERANCE,
                "param {pid:?} entry {i}: analytic {a} vs fd {n} (err {err:.3e})"
            );
        }
    }
}

fn two_vector_bank(rng: &mut ChaCha8Rng, n: usize) -> ParamBank<f64> {
    let mut bank = ParamBank::new();
    bank.add("a", ParamGroup::Agent, random_tensor(rng, vec![n]))
        .unwrap();
    bank.add("b", ParamGroup::Agent, random_tensor(rng, vec![n]))
        .unwrap();
    bank
}

/// Reduce a vector node to a scalar through a fixed probe so FD applies.
fn probe(tape: &mut Tape<'_, f64>, v: Var, probe_vals: &[f64]) -> Var {
    let p = tape
        .input(Tensor::vector(probe_vals.to_vec()))
        .unwrap();
    tape.dot(v, p).unwrap()
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..TRIALS {
        let n = 1 + (trial % 4);
        let mut bank = two_vector_bank(&mut rng, n);
        let probe_vals: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pick = trial % 5;
        check_gradients(&mut bank, |tape, b| {
            let a = tape.param(b.find("a").unwrap());
            let bb = tape.param(b.find("b").unwrap());
            let out = match pick {
                0 => tape.add(a, bb).unwrap(),
                1 => tape.sub(a, bb).unwrap(),
                2 => tape.mul(a, bb).unwrap(),
                3 => tape.neg(a),
                _ => tape.scale(a, 0.73),
            };
            probe(tape, out, &probe_vals)
        });
    }
}

#[test]
fn activations_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..TRIALS {
        let n = 1 + (trial % 3);
        let mut bank = two_vector_bank(&mut rng, n);
        let probe_vals: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pick = trial % 4;
        check_gradients(&mut bank, |tape, b| {
            let a = tape.param(b.find("a").unwrap());
            let out = match pick {
                0 => tape.sigmoid(a),
                1 => tape.tanh(a),
                2 => tape.relu(a),
                _ => tape.log_sigmoid(a),
            };
            probe(tape, out, &probe_vals)
        });
    }
}

#[test]
fn softmax_family_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..TRIALS {
        let n = 2 + (trial % 4);
        let mut bank = two_vector_bank(&mut rng, n);
        let probe_vals: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let log_variant = trial % 2 == 0;
        check_gradients(&mut bank, |tape, b| {
            let a = tape.param(b.find("a").unwrap());
            let out = if log_variant {
                tape.log_softmax(a)
            } else {
                tape.softmax(a)
            };
            probe(tape, out, &probe_vals)
        });
    }
}

#[test]
fn linear_algebra_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for trial in 0..TRIALS {
        let rows = 1 + (trial % 3);
        let cols = 1 + (trial % 4);
        let mut bank = ParamBank::new();
        bank.add("w", ParamGroup::Agent, random_tensor(&mut rng, vec![rows, cols]))
            .unwrap();
        bank.add("x", ParamGroup::Agent, random_tensor(&mut rng, vec![cols]))
            .unwrap();
        bank.add("y", ParamGroup::Agent, random_tensor(&mut rng, vec![cols]))
            .unwrap();
        let probe_vals: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pick = trial % 3;
        check_gradients(&mut bank, |tape, b| {
            let w = tape.param(b.find("w").unwrap());
            let x = tape.param(b.find("x").unwrap());
            let y = tape.param(b.find("y").unwrap());
            match pick {
                0 => {
                    let out = tape.matvec(w, x).unwrap();
                    probe(tape, out, &probe_vals)
                }
                1 => tape.dot(x, y).unwrap(),
                _ => {
                    let cat = tape.concat(x, y);
                    let sig = tape.sigmoid(cat);
                    let p: Vec<f64> = (0..2 * cols).map(|i| ((i % 3) as f64) - 1.0).collect();
                    probe(tape, sig, &p)
                }
            }
        });
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..TRIALS {
        let n = 2 + (trial % 3);
        let mut bank = two_vector_bank(&mut rng, n);
        let pick = trial % 3;
        let idx = trial % n;
        check_gradients(&mut bank, |tape, b| {
            let a = tape.param(b.find("a").unwrap());
            let bb = tape.param(b.find("b").unwrap());
            match pick {
                0 => {
                    // index into a softmax: exercises Index.
                    let s = tape.softmax(a);
                    let picked = tape.index(s, idx).unwrap();
                    let lifted = tape.log_sigmoid(picked);
                    lifted
                }
                1 => {
                    // sum_stack of three nodes, two of them aliased.
                    let t = tape.tanh(bb);
                    let s = tape.sum_stack(&[a, t, a]).unwrap();
                    let p: Vec<f64> = (0..n).map(|i| 0.5 + i as f64).collect();
                    probe(tape, s, &p)
                }
                _ => {
                    // stack_scalars from indexed entries.
                    let x0 = tape.index(a, 0).unwrap();
                    let x1 = tape.index(bb, n - 1).unwrap();
                    let stacked = tape.stack_scalars(&[x0, x1]).unwrap();
                    let soft = tape.softmax(stacked);
                    tape.index(soft, 0).unwrap()
                }
            }
        });
    }
}

#[test]
fn embedding_gather_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..20 {
        let mut bank = ParamBank::new();
        bank.add("emb", ParamGroup::Embedding, random_tensor(&mut rng, vec![4, 3]))
            .unwrap();
        check_gradients(&mut bank, |tape, b| {
            let table = b.find("emb").unwrap();
            let r0 = tape.gather(table, 0).unwrap();
            let r2 = tape.gather(table, 2).unwrap();
            let r2b = tape.gather(table, 2).unwrap();
            let s = tape.add(r2, r2b).unwrap();
            let d = tape.dot(r0, s).unwrap();
            tape.sigmoid(d)
        });
    }
}

// ── Straight-line forward oracle: 3-layer MLP ────────────────────────

/// Hand-coded reference forward pass: no tape, no shared helpers.
fn reference_mlp(
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
    w3: &[f64],
    b3: &[f64],
    x: &[f64],
    dims: (usize, usize, usize),
) -> f64 {
    let (d0, d1, d2) = dims;
    let mut h1 = vec![0.0; d1];
    for r in 0..d1 {
        let mut acc = b1[r];
        for c in 0..d0 {
            acc += w1[r * d0 + c] * x[c];
        }
        h1[r] = if acc > 0.0 { acc } else { 0.0 };
    }
    let mut h2 = vec![0.0; d2];
    for r in 0..d2 {
        let mut acc = b2[r];
        for c in 0..d1 {
            acc += w2[r * d1 + c] * h1[c];
        }
        h2[r] = if acc > 0.0 { acc } else { 0.0 };
    }
    let mut out = b3[0];
    for c in 0..d2 {
        out += w3[c] * h2[c];
    }
    1.0 / (1.0 + (-out).exp())
}

#[test]
fn mlp_forward_matches_straight_line_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..TRIALS {
        let (d0, d1, d2) = (6, 4, 2);
        let mut bank = ParamBank::new();
        for (name, shape) in [
            ("w1", vec![d1, d0]),
            ("b1", vec![d1]),
            ("w2", vec![d2, d1]),
            ("b2", vec![d2]),
            ("w3", vec![1, d2]),
            ("b3", vec![1]),
        ] {
            bank.add(name, ParamGroup::Agent, random_tensor(&mut rng, shape))
                .unwrap();
        }
        let x: Vec<f64> = (0..d0).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new(&bank);
        let mut h = tape.input(Tensor::vector(x.clone())).unwrap();
        for (w, b, relu) in [("w1", "b1", true), ("w2", "b2", true), ("w3", "b3", false)] {
            let wv = tape.param(bank.find(w).unwrap());
            let bv = tape.param(bank.find(b).unwrap());
            let z = tape.matvec(wv, h).unwrap();
            h = tape.add(z, bv).unwrap();
            if relu {
                h = tape.relu(h);
            }
        }
        let out = tape.sigmoid(h);
        let got = tape.value(out).item();

        let fetch = |name: &str| bank.value(bank.find(name).unwrap()).data().to_vec();
        let want = reference_mlp(
            &fetch("w1"),
            &fetch("b1"),
            &fetch("w2"),
            &fetch("b2"),
            &fetch("w3"),
            &fetch("b3"),
            &x,
            (d0, d1, d2),
        );
        assert!(
            (got - want).abs() < 1e-12,
            "tape {got} vs reference {want}"
        );
    }
}

// ── Gradient linearity over a batch ──────────────────────────────────

#[test]
fn batch_gradient_is_sum_of_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for _ in 0..5 {
        let n = 4;
        let mut bank = ParamBank::new();
        bank.add("w", ParamGroup::Agent, random_tensor(&mut rng, vec![n, n]))
            .unwrap();
        let wid = bank.find("w").unwrap();
        let samples: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();

        let loss_of = |tape: &mut Tape<'_, f64>, b: &ParamBank<f64>, x: &[f64]| {
            let w = tape.param(b.find("w").unwrap());
            let xv = tape.input(Tensor::vector(x.to_vec())).unwrap();
            let h = tape.matvec(w, xv).unwrap();
            let t = tape.tanh(h);
            tape.dot(t, t).unwrap()
        };

        // One tape for the summed batch loss.
        let mut tape = Tape::new(&bank);
        let per_sample: Vec<Var> = samples.iter().map(|x| loss_of(&mut tape, &bank, x)).collect();
        let total = tape.sum_stack(&per_sample).unwrap();
        let batch_grad = tape.backward(total).unwrap();

        // Independent tapes per sample, summed.
        let mut acc = vec![0.0; n * n];
        for x in &samples {
            let mut t = Tape::new(&bank);
            let l = loss_of(&mut t, &bank, x);
            let g = t.backward(l).unwrap();
            for (a, gi) in acc.iter_mut().zip(g.get(wid)) {
                *a += gi;
            }
        }
        for (a, b) in batch_grad.get(wid).iter().zip(&acc) {
            assert!((a - b).abs() < 1e-12, "batch {a} vs summed {b}");
        }
    }
}
