//! Unary score: per-step bipartite aggregation of neighbor items, a GRU over
//! those steps, mean aggregation of social neighbors, and the score head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{gru_cell, GruParams, GruVars, Tape, Var};
use crate::params::{ParamId, ParamStore};

/// Slope of the LeakyReLU applied to attention logits.
pub const ATTENTION_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnaryParams {
    pub w_a: ParamId,
    /// Attention vector over `[W_A q_t ⊕ W_A q_j]`; attention variants only.
    pub att: Option<ParamId>,
    pub w_s: ParamId,
    pub temporal_gru: GruParams,
    pub w_f1: ParamId,
    pub b_f1: ParamId,
    pub w_f2: ParamId,
    pub b_f2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct UnaryVars {
    pub w_a: Var,
    pub w_a_t: Var,
    pub att: Option<Var>,
    pub w_s: Var,
    pub gru: GruVars,
    pub w_f1: Var,
    pub b_f1: Var,
    pub w_f2: Var,
    pub b_f2: Var,
    pub dim: usize,
}

impl UnaryParams {
    pub fn load(&self, tape: &mut Tape, store: &ParamStore) -> Result<UnaryVars, ModelError> {
        let w_a = tape.param(store, self.w_a);
        let w_a_t = tape.transpose(w_a)?;
        Ok(UnaryVars {
            w_a,
            w_a_t,
            att: self.att.map(|id| tape.param(store, id)),
            w_s: tape.param(store, self.w_s),
            gru: self.temporal_gru.load(tape, store),
            w_f1: tape.param(store, self.w_f1),
            b_f1: tape.param(store, self.b_f1),
            w_f2: tape.param(store, self.w_f2),
            b_f2: tape.param(store, self.b_f2),
            dim: store.get(self.b_f1).len(),
        })
    }
}

/// `ReLU(W_A · MEAN(bucket))`; an empty bucket gives the zero vector.
pub fn bipartite_aggregate_sage(tape: &mut Tape, uv: &UnaryVars, bucket_embs: Var) -> Result<Var, ModelError> {
    if tape.value(bucket_embs).rows() == 0 {
        return Ok(tape.zeros(&[uv.dim]));
    }
    let mean = tape.mean_rows(bucket_embs)?;
    let proj = tape.matmul(uv.w_a, mean)?;
    Ok(tape.relu(proj))
}

/// Attention-variant aggregation and its weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionAggregate {
    pub hidden: Var,
    /// `α` over the bucket; `None` for an empty bucket.
    pub weights: Option<Var>,
}

/// ```text
/// α_j = softmax_j LeakyReLU(w_Aᵀ [W_A q_t ⊕ W_A q_j])
/// ĥ   = ReLU(Σ_j α_j q_j)
/// ```
pub fn bipartite_aggregate_attention(
    tape: &mut Tape,
    uv: &UnaryVars,
    anchor_emb: Var,
    bucket_embs: Var,
) -> Result<AttentionAggregate, ModelError> {
    let b = tape.value(bucket_embs).rows();
    if b == 0 {
        return Ok(AttentionAggregate {
            hidden: tape.zeros(&[uv.dim]),
            weights: None,
        });
    }
    let att = uv.att.ok_or(ModelError::MissingParameter("attention vector"))?;
    let anchor = tape.matmul(uv.w_a, anchor_emb)?;
    let anchor_rows = tape.repeat_rows(anchor, b)?;
    let items = tape.matmul(bucket_embs, uv.w_a_t)?;
    let pairs = tape.concat(&[anchor_rows, items])?;
    let raw = tape.matmul(pairs, att)?;
    let logits = tape.leaky_relu(raw, ATTENTION_LEAKY_SLOPE);
    let alpha = tape.softmax(logits)?;
    let pooled = tape.matmul(alpha, bucket_embs)?;
    Ok(AttentionAggregate {
        hidden: tape.relu(pooled),
        weights: Some(alpha),
    })
}

/// GRU fold over step representations from a zero state. Returns every
/// state including the initial one, so `states[t]` has consumed `t` steps.
pub fn temporal_states(tape: &mut Tape, gru: &GruVars, steps: &[Var]) -> Result<Vec<Var>, ModelError> {
    let mut states = Vec::with_capacity(steps.len() + 1);
    let mut h = tape.zeros(&[gru.dim]);
    states.push(h);
    for &x in steps {
        h = gru_cell(tape, gru, x, h)?;
        states.push(h);
    }
    Ok(states)
}

/// Final state of [`temporal_states`].
pub fn temporal_recurrence(tape: &mut Tape, gru: &GruVars, steps: &[Var]) -> Result<Var, ModelError> {
    Ok(*temporal_states(tape, gru, steps)?.last().expect("initial state"))
}

/// `ReLU(W_S · MEAN(p_k for k in N(u)))`; no neighbors gives zero.
pub fn social_aggregate(tape: &mut Tape, uv: &UnaryVars, neighbor_embs: Var) -> Result<Var, ModelError> {
    if tape.value(neighbor_embs).rows() == 0 {
        return Ok(tape.zeros(&[uv.dim]));
    }
    let mean = tape.mean_rows(neighbor_embs)?;
    let proj = tape.matmul(uv.w_s, mean)?;
    Ok(tape.relu(proj))
}

#[derive(Clone, Copy, Debug)]
pub struct UnaryHead {
    /// `h_t^{u_i}` after dropout.
    pub hidden: Var,
    pub scores: Var,
}

/// ```text
/// h^{u_i} = W_f2 ReLU(W_f1 [h_t ⊕ h_s] + b_f1) + b_f2
/// s_f     = h^{u_i} · q_j
/// ```
pub fn unary_head(
    tape: &mut Tape,
    uv: &UnaryVars,
    temporal: Var,
    social: Var,
    candidate_embs: Var,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<UnaryHead, ModelError> {
    let cat = tape.concat(&[temporal, social])?;
    let pre = tape.affine(cat, uv.w_f1, Some(uv.b_f1))?;
    let act = tape.relu(pre);
    let mut hidden = tape.affine(act, uv.w_f2, Some(uv.b_f2))?;
    if let Some((p, rng)) = dropout {
        hidden = tape.dropout(hidden, p, rng)?;
    }
    let scores = tape.matmul(candidate_embs, hidden)?;
    Ok(UnaryHead { hidden, scores })
}
