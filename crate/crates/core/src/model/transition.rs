//! Transition score: causal attention over the behavior sequence, walk
//! aggregation around the latest interaction, and the bilinear score head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{gru_cell, GruParams, GruVars, Tape, Var};
use crate::params::{ParamId, ParamStore};

/// Weights of the transition score (the shared embedding tables live in
/// [`super::Layout`]). `walk_gru` is absent for the walk-free variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_g1: ParamId,
    pub b_g1: ParamId,
    pub w_g2: ParamId,
    pub b_g2: ParamId,
    pub w_g3: ParamId,
    pub walk_gru: Option<GruParams>,
}

/// [`TransitionParams`] resident on a tape. Matrices are kept transposed
/// because every product here is row-batched (`X Wᵀ`).
#[derive(Clone, Copy, Debug)]
pub struct TransitionVars {
    pub w_q_t: Var,
    pub w_k_t: Var,
    pub w_v_t: Var,
    pub w_g1_t: Var,
    pub b_g1: Var,
    pub w_g2_t: Var,
    pub b_g2: Var,
    pub w_g3_t: Var,
    pub walk_gru: Option<GruVars>,
    pub dim: usize,
}

impl TransitionParams {
    pub fn load(&self, tape: &mut Tape, store: &ParamStore) -> Result<TransitionVars, ModelError> {
        let mut t = |id| -> Result<Var, ModelError> {
            let v = tape.param(store, id);
            Ok(tape.transpose(v)?)
        };
        let (w_q_t, w_k_t, w_v_t) = (t(self.w_q)?, t(self.w_k)?, t(self.w_v)?);
        let (w_g1_t, w_g2_t, w_g3_t) = (t(self.w_g1)?, t(self.w_g2)?, t(self.w_g3)?);
        Ok(TransitionVars {
            w_q_t,
            w_k_t,
            w_v_t,
            w_g1_t,
            b_g1: tape.param(store, self.b_g1),
            w_g2_t,
            b_g2: tape.param(store, self.b_g2),
            w_g3_t,
            walk_gru: self.walk_gru.map(|g| g.load(tape, store)),
            dim: store.get(self.b_g1).len(),
        })
    }
}

fn row_affine(tape: &mut Tape, x: Var, w_t: Var, bias: Option<Var>) -> Result<Var, ModelError> {
    let y = tape.matmul(x, w_t)?;
    Ok(match bias {
        Some(b) => tape.add(y, b)?,
        None => y,
    })
}

/// Keys and values of a history window, computed once per sequence.
#[derive(Clone, Copy, Debug)]
pub struct HistoryEncoding {
    /// `q_τ + k_τ`, shape `[L, d]`.
    pub inputs: Var,
    pub keys: Var,
    /// `keysᵀ`, shared by every target.
    pub keys_t: Var,
    pub values: Var,
    pub len: usize,
}

/// `inputs` holds item-plus-position embeddings, one row per history slot.
pub fn encode_history(tape: &mut Tape, tv: &TransitionVars, inputs: Var) -> Result<HistoryEncoding, ModelError> {
    let len = tape.value(inputs).rows();
    let keys = tape.matmul(inputs, tv.w_k_t)?;
    let values = tape.matmul(inputs, tv.w_v_t)?;
    let keys_t = tape.transpose(keys)?;
    Ok(HistoryEncoding {
        inputs,
        keys,
        keys_t,
        values,
        len,
    })
}

/// Attention of each candidate row (`q_j + k_j`) over history slots
/// `τ < j`. Returns `[C, L]`; slots at or after `j` get exactly zero weight.
pub fn causal_attention_weights(
    tape: &mut Tape,
    tv: &TransitionVars,
    history: &HistoryEncoding,
    candidates: Var,
    j: usize,
) -> Result<Var, ModelError> {
    if j == 0 || history.len == 0 {
        return Err(ModelError::EmptyHistory);
    }
    let c = tape.value(candidates).rows();
    let queries = tape.matmul(candidates, tv.w_q_t)?;
    let raw = tape.matmul(queries, history.keys_t)?;
    let logits = tape.scale(raw, 1.0 / (tv.dim as f64).sqrt());
    let mask: Vec<bool> = (0..c).flat_map(|_| (0..history.len).map(move |tau| tau < j)).collect();
    Ok(tape.masked_softmax(logits, &mask)?)
}

/// `z_j = Σ_τ a_τj · W_V (q_τ + k_τ)` for every candidate row.
pub fn aggregate_history(tape: &mut Tape, weights: Var, history: &HistoryEncoding) -> Result<Var, ModelError> {
    let w = tape.value(weights);
    if w.cols() != history.len {
        return Err(ModelError::LengthMismatch {
            what: "attention weights",
            expected: history.len,
            found: w.cols(),
        });
    }
    Ok(tape.matmul(weights, history.values)?)
}

/// Output of the walk GRU.
#[derive(Clone, Copy, Debug)]
pub struct WalkAggregate {
    pub user: Var,
    pub item: Var,
    /// Per-walk final states `[W, d]`; `None` for an empty walk set.
    pub co_users: Option<Var>,
}

/// Runs the walk GRU over `(p_i, q_t, p′)` for every walk (one walk per
/// row) from a zero state, then averages the first two step outputs across
/// walks. No walks gives zero vectors.
pub fn walk_aggregate(
    tape: &mut Tape,
    gru: &GruVars,
    user_emb: Var,
    item_emb: Var,
    co_user_embs: Var,
) -> Result<WalkAggregate, ModelError> {
    let w = tape.value(co_user_embs).rows();
    if w == 0 {
        let user = tape.zeros(&[gru.dim]);
        let item = tape.zeros(&[gru.dim]);
        return Ok(WalkAggregate {
            user,
            item,
            co_users: None,
        });
    }
    let x0 = tape.repeat_rows(user_emb, w)?;
    let x1 = tape.repeat_rows(item_emb, w)?;
    let h0 = tape.zeros(&[w, gru.dim]);
    let h1 = gru_cell(tape, gru, x0, h0)?;
    let h2 = gru_cell(tape, gru, x1, h1)?;
    let h3 = gru_cell(tape, gru, co_user_embs, h2)?;
    Ok(WalkAggregate {
        user: tape.mean_rows(h1)?,
        item: tape.mean_rows(h2)?,
        co_users: Some(h3),
    })
}

/// Intermediate values of one transition head evaluation.
#[derive(Clone, Copy, Debug)]
pub struct TransitionHead {
    /// `h_t^{v_j}` per candidate, after dropout, `[C, d]`.
    pub hidden: Var,
    /// Scores `[C]`.
    pub scores: Var,
}

/// ```text
/// h^{v_j} = p_i + W_g2 ReLU(W_g1 z_j + b_g1) + b_g2
/// s_t     = (W_g3 [h^{v_j} ⊕ h_{u_i} ⊕ h_{v_t} ⊕ p_i])ᵀ q_j
/// ```
/// `z` and `candidate_embs` are `[C, d]`; the rest are `[d]`.
#[allow(clippy::too_many_arguments)]
pub fn transition_head(
    tape: &mut Tape,
    tv: &TransitionVars,
    z: Var,
    user_emb: Var,
    walk_user: Var,
    walk_item: Var,
    candidate_embs: Var,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<TransitionHead, ModelError> {
    let c = tape.value(candidate_embs).rows();
    let pre = row_affine(tape, z, tv.w_g1_t, Some(tv.b_g1))?;
    let act = tape.relu(pre);
    let proj = row_affine(tape, act, tv.w_g2_t, Some(tv.b_g2))?;
    let mut hidden = tape.add(proj, user_emb)?;
    if let Some((p, rng)) = dropout {
        hidden = tape.dropout(hidden, p, rng)?;
    }
    let hu = tape.repeat_rows(walk_user, c)?;
    let hv = tape.repeat_rows(walk_item, c)?;
    let pu = tape.repeat_rows(user_emb, c)?;
    let cat = tape.concat(&[hidden, hu, hv, pu])?;
    let mixed = tape.matmul(cat, tv.w_g3_t)?;
    let scores = tape.dot(mixed, candidate_embs)?;
    Ok(TransitionHead { hidden, scores })
}
