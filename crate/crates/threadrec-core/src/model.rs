//! Parameter layout: embedding tables, the two GRU encoders, and the
//! similarity MLP, registered into a [`ParamBank`] with typed handles.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamBank, ParamGroup, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Shape configuration shared by every component.
#[derive(Clone, Copy, Debug)]
pub struct ModelDims {
    /// Embedding size; also the GRU hidden size.
    pub embed_dim: usize,
    /// Width of the projected time-interval feature.
    pub time_dim: usize,
    pub n_users: usize,
    pub n_items: usize,
}

impl ModelDims {
    pub fn new(embed_dim: usize, n_users: usize, n_items: usize) -> Result<Self> {
        if embed_dim < 4 {
            return Err(Error::Config(format!(
                "embedding_dim must be at least 4, got {embed_dim}"
            )));
        }
        if n_users == 0 || n_items == 0 {
            return Err(Error::Config("empty user or item vocabulary".into()));
        }
        Ok(ModelDims {
            embed_dim,
            time_dim: (embed_dim / 4).min(8),
            n_users,
            n_items,
        })
    }

    /// GRU input width: item embedding concatenated with the time feature.
    pub fn gru_input_dim(&self) -> usize {
        self.embed_dim + self.time_dim
    }
}

/// Handles for one GRU encoder: three gates plus the user-state projection
/// and the scalar-to-vector time-interval projection.
#[derive(Clone, Copy, Debug)]
pub struct GruIds {
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub b_cand: ParamId,
    pub user_init: ParamId,
    pub time_w: ParamId,
    pub time_b: ParamId,
}

/// Handles for the three-layer similarity MLP (2d -> d -> d/2 -> 1).
#[derive(Clone, Copy, Debug)]
pub struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

/// All parameter handles for the full model.
#[derive(Clone, Copy, Debug)]
pub struct ModelParams {
    pub user_emb: ParamId,
    pub item_emb: ParamId,
    /// Thread encoder used by the allocator agent.
    pub agent_gru: GruIds,
    /// Similarity MLP scoring (thread representation, item embedding) pairs.
    pub dist_mlp: MlpIds,
    /// Sub-sequence modeler encoder used for next-item scoring.
    pub modeler_gru: GruIds,
}

fn uniform_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, half_width: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::of(rng.random_range(-half_width..half_width)))
        .collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn init_gru<T: Scalar>(
    bank: &mut ParamBank<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    group: ParamGroup,
    dims: &ModelDims,
) -> Result<GruIds> {
    let d = dims.embed_dim;
    let din = dims.gru_input_dim();
    let w_scale = 1.0 / (din as f64).sqrt();
    let u_scale = 1.0 / (d as f64).sqrt();
    let add = |bank: &mut ParamBank<T>, name: String, t: Tensor<T>| bank.add(&name, group, t);

    let gate = |bank: &mut ParamBank<T>, rng: &mut ChaCha8Rng, gate_name: &str| -> Result<[ParamId; 3]> {
        let w = bank.add(
            &format!("{prefix}.w_{gate_name}"),
            group,
            uniform_tensor(rng, vec![d, din], w_scale),
        )?;
        let u = bank.add(
            &format!("{prefix}.u_{gate_name}"),
            group,
            uniform_tensor(rng, vec![d, d], u_scale),
        )?;
        let b = bank.add(
            &format!("{prefix}.b_{gate_name}"),
            group,
            Tensor::zeros(vec![d]),
        )?;
        Ok([w, u, b])
    };

    let [w_update, u_update, b_update] = gate(bank, rng, "update")?;
    let [w_reset, u_reset, b_reset] = gate(bank, rng, "reset")?;
    let [w_cand, u_cand, b_cand] = gate(bank, rng, "cand")?;
    let user_init = add(
        bank,
        format!("{prefix}.user_init"),
        uniform_tensor(rng, vec![d, d], u_scale),
    )?;
    let time_w = add(
        bank,
        format!("{prefix}.time_w"),
        uniform_tensor(rng, vec![dims.time_dim], 0.5),
    )?;
    let time_b = add(bank, format!("{prefix}.time_b"), Tensor::zeros(vec![dims.time_dim]))?;

    Ok(GruIds {
        w_update,
        u_update,
        b_update,
        w_reset,
        u_reset,
        b_reset,
        w_cand,
        u_cand,
        b_cand,
        user_init,
        time_w,
        time_b,
    })
}

fn init_mlp<T: Scalar>(
    bank: &mut ParamBank<T>,
    rng: &mut ChaCha8Rng,
    dims: &ModelDims,
) -> Result<MlpIds> {
    let d = dims.embed_dim;
    let h = d / 2;
    let layer = |bank: &mut ParamBank<T>,
                 rng: &mut ChaCha8Rng,
                 name: &str,
                 rows: usize,
                 cols: usize,
                 bias: f64|
     -> Result<(ParamId, ParamId)> {
        let scale = 1.0 / (cols as f64).sqrt();
        let w = bank.add(
            &format!("agent.dist.w{name}"),
            ParamGroup::Agent,
            uniform_tensor(rng, vec![rows, cols], scale),
        )?;
        let b = bank.add(
            &format!("agent.dist.b{name}"),
            ParamGroup::Agent,
            Tensor::new(vec![rows], vec![T::of(bias); rows])?,
        )?;
        Ok((w, b))
    };
    let (w1, b1) = layer(bank, rng, "1", d, 2 * d, 0.0)?;
    let (w2, b2) = layer(bank, rng, "2", h, d, 0.0)?;
    // The output bias starts low so cold-start coherence sits below typical
    // thresholds: the action space grows first, similarities sharpen later.
    let (w3, b3) = layer(bank, rng, "3", 1, h, -1.0)?;
    Ok(MlpIds {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
    })
}

/// Build a freshly initialized parameter bank. Deterministic in `seed`.
pub fn init_model<T: Scalar>(dims: &ModelDims, seed: u64) -> Result<(ParamBank<T>, ModelParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = ParamBank::new();
    let user_emb = bank.add(
        "emb.user",
        ParamGroup::Embedding,
        uniform_tensor(&mut rng, vec![dims.n_users, dims.embed_dim], 0.1),
    )?;
    let item_emb = bank.add(
        "emb.item",
        ParamGroup::Embedding,
        uniform_tensor(&mut rng, vec![dims.n_items, dims.embed_dim], 0.1),
    )?;
    let agent_gru = init_gru(&mut bank, &mut rng, "agent.gru", ParamGroup::Agent, dims)?;
    let dist_mlp = init_mlp(&mut bank, &mut rng, dims)?;
    let modeler_gru = init_gru(&mut bank, &mut rng, "modeler.gru", ParamGroup::Modeler, dims)?;
    Ok((
        bank,
        ModelParams {
            user_emb,
            item_emb,
            agent_gru,
            dist_mlp,
            modeler_gru,
        },
    ))
}

/// Recover typed handles from a bank restored off disk.
pub fn lookup_model<T: Scalar>(bank: &ParamBank<T>) -> Result<ModelParams> {
    let gru = |prefix: &str| -> Result<GruIds> {
        Ok(GruIds {
            w_update: bank.find(&format!("{prefix}.w_update"))?,
            u_update: bank.find(&format!("{prefix}.u_update"))?,
            b_update: bank.find(&format!("{prefix}.b_update"))?,
            w_reset: bank.find(&format!("{prefix}.w_reset"))?,
            u_reset: bank.find(&format!("{prefix}.u_reset"))?,
            b_reset: bank.find(&format!("{prefix}.b_reset"))?,
            w_cand: bank.find(&format!("{prefix}.w_cand"))?,
            u_cand: bank.find(&format!("{prefix}.u_cand"))?,
            b_cand: bank.find(&format!("{prefix}.b_cand"))?,
            user_init: bank.find(&format!("{prefix}.user_init"))?,
            time_w: bank.find(&format!("{prefix}.time_w"))?,
            time_b: bank.find(&format!("{prefix}.time_b"))?,
        })
    };
    Ok(ModelParams {
        user_emb: bank.find("emb.user")?,
        item_emb: bank.find("emb.item")?,
        agent_gru: gru("agent.gru")?,
        dist_mlp: MlpIds {
            w1: bank.find("agent.dist.w1")?,
            b1: bank.find("agent.dist.b1")?,
            w2: bank.find("agent.dist.w2")?,
            b2: bank.find("agent.dist.b2")?,
            w3: bank.find("agent.dist.w3")?,
            b3: bank.find("agent.dist.b3")?,
        },
        modeler_gru: gru("modeler.gru")?,
    })
}

/// Dimensions recovered from a restored bank.
pub fn dims_from_bank<T: Scalar>(bank: &ParamBank<T>) -> Result<ModelDims> {
    let user = bank.value(bank.find("emb.user")?).shape().to_vec();
    let item = bank.value(bank.find("emb.item")?).shape().to_vec();
    ModelDims::new(user[1], user[0], item[0])
}
