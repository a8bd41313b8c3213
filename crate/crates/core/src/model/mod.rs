//! The TEA scorer: `f + g` for a user, a history window and a set of
//! candidate items.

pub mod transition;
pub mod unary;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, GruParams, Tape, Var};
use crate::data::{PreparedDataset, Split, Walk};
use crate::params::{fan_in_uniform, uniform, ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use transition::{
    aggregate_history, causal_attention_weights, encode_history, transition_head, walk_aggregate, TransitionParams,
};
use unary::{bipartite_aggregate_attention, bipartite_aggregate_sage, social_aggregate, temporal_states, unary_head, UnaryParams};

/// Bound of the uniform initialization of embedding tables.
pub const EMBEDDING_INIT: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("attention needs at least one history item")]
    EmptyHistory,
    #[error("{what}: expected length {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("missing parameter: {0}")]
    MissingParameter(&'static str),
    #[error("incompatible parameters: {0}")]
    Incompatible(String),
    #[error("position {position} outside the {max}-slot position table")]
    PositionOutOfRange { position: usize, max: usize },
}

/// Bipartite aggregator and walk usage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "tea-s")]
    TeaS,
    #[serde(rename = "tea-a")]
    TeaA,
    #[serde(rename = "tea-rs")]
    TeaRS,
    #[serde(rename = "tea-ra")]
    TeaRA,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::TeaS, Variant::TeaA, Variant::TeaRS, Variant::TeaRA];

    pub fn uses_attention(self) -> bool {
        matches!(self, Variant::TeaA | Variant::TeaRA)
    }

    pub fn uses_walks(self) -> bool {
        matches!(self, Variant::TeaS | Variant::TeaA)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::TeaS => "tea-s",
            Variant::TeaA => "tea-a",
            Variant::TeaRS => "tea-rs",
            Variant::TeaRA => "tea-ra",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant {s:?} (expected tea-s, tea-a, tea-rs or tea-ra)"))
    }
}

/// Sizes that determine the parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub max_seq_len: usize,
    pub dim: usize,
    pub variant: Variant,
}

/// Where every trainable tensor lives in the [`ParamStore`].
///
/// The user and item tables are shared by both score functions and stored
/// once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub user_emb: ParamId,
    pub item_emb: ParamId,
    pub pos_emb: ParamId,
    pub transition: TransitionParams,
    pub unary: UnaryParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeaModel {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub params: ParamStore,
}

fn expected_shapes(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let d = spec.dim;
    let gru = |prefix: &str| -> Vec<(String, Vec<usize>)> {
        ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n"]
            .iter()
            .map(|p| {
                let shape = if p.starts_with('b') { vec![d] } else { vec![d, d] };
                (format!("{prefix}.{p}"), shape)
            })
            .collect()
    };
    let mut out = vec![
        ("emb.user".to_string(), vec![spec.n_users, d]),
        ("emb.item".to_string(), vec![spec.n_items, d]),
        ("emb.position".to_string(), vec![spec.max_seq_len, d]),
        ("trans.w_q".to_string(), vec![d, d]),
        ("trans.w_k".to_string(), vec![d, d]),
        ("trans.w_v".to_string(), vec![d, d]),
        ("trans.w_g1".to_string(), vec![d, d]),
        ("trans.b_g1".to_string(), vec![d]),
        ("trans.w_g2".to_string(), vec![d, d]),
        ("trans.b_g2".to_string(), vec![d]),
        ("trans.w_g3".to_string(), vec![d, 4 * d]),
    ];
    if spec.variant.uses_walks() {
        out.extend(gru("trans.walk_gru"));
    }
    out.push(("unary.w_a".to_string(), vec![d, d]));
    if spec.variant.uses_attention() {
        out.push(("unary.att".to_string(), vec![2 * d]));
    }
    out.push(("unary.w_s".to_string(), vec![d, d]));
    out.extend(gru("unary.temporal_gru"));
    out.extend([
        ("unary.w_f1".to_string(), vec![d, 2 * d]),
        ("unary.b_f1".to_string(), vec![d]),
        ("unary.w_f2".to_string(), vec![d, d]),
        ("unary.b_f2".to_string(), vec![d]),
    ]);
    out
}

impl TeaModel {
    /// Fresh parameters: embeddings uniform on `±EMBEDDING_INIT`, every
    /// weight and bias uniform on `±1/sqrt(fan_in)`.
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[rng::domain::INIT]);
        let mut store = ParamStore::new();
        for (name, shape) in expected_shapes(&spec) {
            let t = if name.starts_with("emb.") {
                uniform(&shape, EMBEDDING_INIT, &mut rng)
            } else if name.ends_with(".att") {
                uniform(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut rng)
            } else if shape.len() == 2 {
                fan_in_uniform(shape[0], shape[1], &mut rng)
            } else {
                // biases: fan-in of the matrix they follow, which is d for
                // every bias here
                uniform(&shape, 1.0 / (spec.dim as f64).sqrt(), &mut rng)
            };
            store.insert(&name, t);
        }
        Self::from_params(spec, store).expect("layout of a freshly built store")
    }

    /// Binds an existing store, checking names and shapes.
    pub fn from_params(spec: ModelSpec, params: ParamStore) -> Result<Self, ModelError> {
        for (name, shape) in expected_shapes(&spec) {
            let id = params
                .find(&name)
                .ok_or_else(|| ModelError::Incompatible(format!("missing tensor {name}")))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(ModelError::Incompatible(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    params.get(id).shape()
                )));
            }
        }
        let id = |n: &str| params.find(n).expect("checked above");
        let layout = Layout {
            user_emb: id("emb.user"),
            item_emb: id("emb.item"),
            pos_emb: id("emb.position"),
            transition: TransitionParams {
                w_q: id("trans.w_q"),
                w_k: id("trans.w_k"),
                w_v: id("trans.w_v"),
                w_g1: id("trans.w_g1"),
                b_g1: id("trans.b_g1"),
                w_g2: id("trans.w_g2"),
                b_g2: id("trans.b_g2"),
                w_g3: id("trans.w_g3"),
                walk_gru: GruParams::lookup(&params, "trans.walk_gru").filter(|_| spec.variant.uses_walks()),
            },
            unary: UnaryParams {
                w_a: id("unary.w_a"),
                att: params.find("unary.att").filter(|_| spec.variant.uses_attention()),
                w_s: id("unary.w_s"),
                temporal_gru: GruParams::lookup(&params, "unary.temporal_gru").expect("checked above"),
                w_f1: id("unary.w_f1"),
                b_f1: id("unary.b_f1"),
                w_f2: id("unary.w_f2"),
                b_f2: id("unary.b_f2"),
            },
        };
        if params.len() != expected_shapes(&spec).len() {
            return Err(ModelError::Incompatible(format!(
                "expected {} tensors, found {}",
                expected_shapes(&spec).len(),
                params.len()
            )));
        }
        Ok(TeaModel { spec, layout, params })
    }

    /// Scores every target of `ctx` on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &ScoringContext<'_>,
        targets: &[Target],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Vec<TargetScores>, ModelError> {
        let store = &self.params;
        let lay = &self.layout;
        let hist_len = ctx.items.len();
        for (what, n) in [("buckets", ctx.buckets.len()), ("walks", ctx.walks.len())] {
            if n < hist_len {
                return Err(ModelError::LengthMismatch {
                    what,
                    expected: hist_len,
                    found: n,
                });
            }
        }
        let max_j = targets.iter().map(|t| t.position).max().unwrap_or(0);
        if max_j > hist_len {
            return Err(ModelError::LengthMismatch {
                what: "target position",
                expected: hist_len,
                found: max_j,
            });
        }
        if max_j >= self.spec.max_seq_len {
            return Err(ModelError::PositionOutOfRange {
                position: max_j,
                max: self.spec.max_seq_len,
            });
        }

        let user_row = tape.gather_param(store, lay.user_emb, &[ctx.user as usize])?;
        let user_emb = tape.row(user_row, 0)?;
        let tv = lay.transition.load(tape, store)?;
        let uv = lay.unary.load(tape, store)?;

        let item_idx: Vec<usize> = ctx.items.iter().map(|&i| i as usize).collect();
        let item_rows = tape.gather_param(store, lay.item_emb, &item_idx)?;
        let positions: Vec<usize> = (0..hist_len).collect();
        let pos_rows = tape.gather_param(store, lay.pos_emb, &positions)?;
        let inputs = tape.add(item_rows, pos_rows)?;
        let history = encode_history(tape, &tv, inputs)?;

        // Unary path: one representation per step, then the GRU.
        let mut steps = Vec::with_capacity(max_j);
        for t in 0..max_j {
            let idx: Vec<usize> = ctx.buckets[t].iter().map(|&i| i as usize).collect();
            let bucket = tape.gather_param(store, lay.item_emb, &idx)?;
            let h = if self.spec.variant.uses_attention() {
                let anchor = tape.row(item_rows, t)?;
                bipartite_aggregate_attention(tape, &uv, anchor, bucket)?.hidden
            } else {
                bipartite_aggregate_sage(tape, &uv, bucket)?
            };
            steps.push(h);
        }
        let states = temporal_states(tape, &uv.gru, &steps)?;
        let nbr_idx: Vec<usize> = ctx.neighbors.iter().map(|&u| u as usize).collect();
        let nbr_rows = tape.gather_param(store, lay.user_emb, &nbr_idx)?;
        let social = social_aggregate(tape, &uv, nbr_rows)?;

        let mut out = Vec::with_capacity(targets.len());
        for target in targets {
            let j = target.position;
            let c = target.candidates.len();
            let cand_idx: Vec<usize> = target.candidates.iter().map(|&i| i as usize).collect();
            let cand_embs = tape.gather_param(store, lay.item_emb, &cand_idx)?;
            let pos_j = tape.gather_param(store, lay.pos_emb, &[j])?;
            let pos_j = tape.row(pos_j, 0)?;
            let cand_inputs = tape.add(cand_embs, pos_j)?;

            let (z, attention) = if j == 0 {
                (tape.zeros(&[c, self.spec.dim]), None)
            } else {
                let w = causal_attention_weights(tape, &tv, &history, cand_inputs, j)?;
                (aggregate_history(tape, w, &history)?, Some(w))
            };

            let walks: &[Walk] = if j > 0 { &ctx.walks[j - 1] } else { &[] };
            let (walk_user, walk_item) = match (&tv.walk_gru, j) {
                (Some(gru), j) if j > 0 => {
                    let co: Vec<usize> = walks.iter().map(|w| w.co_user as usize).collect();
                    let co_rows = tape.gather_param(store, lay.user_emb, &co)?;
                    let anchor = tape.row(item_rows, j - 1)?;
                    let agg = walk_aggregate(tape, gru, user_emb, anchor, co_rows)?;
                    (agg.user, agg.item)
                }
                _ => (tape.zeros(&[self.spec.dim]), tape.zeros(&[self.spec.dim])),
            };

            let trans = transition_head(
                tape,
                &tv,
                z,
                user_emb,
                walk_user,
                walk_item,
                cand_embs,
                dropout.as_mut().map(|(p, r)| (*p, &mut **r)),
            )?;
            let un = unary_head(
                tape,
                &uv,
                states[j],
                social,
                cand_embs,
                dropout.as_mut().map(|(p, r)| (*p, &mut **r)),
            )?;
            let total = tape.add(un.scores, trans.scores)?;
            out.push(TargetScores {
                position: j,
                unary: un.scores,
                transition: trans.scores,
                total,
                walk_user,
                walk_item,
                attention,
            });
        }
        Ok(out)
    }

    /// Raw `f + g` scores for one evaluation target, without dropout.
    pub fn score_candidates(&self, ctx: &ScoringContext<'_>, candidates: &[u32]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let target = Target {
            position: ctx.items.len(),
            candidates: candidates.to_vec(),
        };
        let scores = self.forward(&mut tape, ctx, std::slice::from_ref(&target), None)?;
        Ok(tape.value(scores[0].total).data().to_vec())
    }

    /// Squared L2 norm over all trainable tensors.
    pub fn squared_norm(&self) -> f64 {
        self.params.squared_norm()
    }
}

/// Everything the scorer reads about one user at one point in time.
#[derive(Clone, Copy, Debug)]
pub struct ScoringContext<'a> {
    pub user: u32,
    /// History window, oldest first; slot `τ` uses position embedding `τ`.
    pub items: &'a [u32],
    /// `buckets[t]`: neighbor items between history slot `t` and the next
    /// event. At least `items.len()` entries.
    pub buckets: &'a [Vec<u32>],
    /// `walks[t]`: walks anchored at history slot `t`.
    pub walks: &'a [Vec<Walk>],
    pub neighbors: &'a [u32],
}

impl<'a> ScoringContext<'a> {
    /// The user's truncated training window.
    pub fn training(ds: &'a PreparedDataset, user: u32) -> Self {
        let tl = &ds.users[user as usize];
        let n = tl.train_len();
        ScoringContext {
            user,
            items: &tl.items[..n],
            buckets: &tl.buckets[..n],
            walks: &tl.walks[..n],
            neighbors: ds.social.neighbors(user),
        }
    }

    /// History preceding a held-out event, cut so the target lands on the
    /// last position slot. Returns the context and the ground-truth item.
    pub fn evaluation(ds: &'a PreparedDataset, user: u32, split: Split, max_seq_len: usize) -> (Self, u32) {
        let tl = &ds.users[user as usize];
        let p = split.target_position(tl);
        let s = p.saturating_sub(max_seq_len.saturating_sub(1));
        let ctx = ScoringContext {
            user,
            items: &tl.items[s..p],
            buckets: &tl.buckets[s..p],
            walks: &tl.walks[s..p],
            neighbors: ds.social.neighbors(user),
        };
        (ctx, tl.items[p])
    }
}

/// A prediction step: the item at history slot `position` is predicted from
/// slots `0..position`. The first candidate is conventionally the positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub position: usize,
    pub candidates: Vec<u32>,
}

/// Tape handles for one scored target.
#[derive(Clone, Copy, Debug)]
pub struct TargetScores {
    pub position: usize,
    pub unary: Var,
    pub transition: Var,
    pub total: Var,
    pub walk_user: Var,
    pub walk_item: Var,
    pub attention: Option<Var>,
}

/// Uniformly perturbed copy, handy for tests that need non-degenerate
/// parameters at a larger scale than the default init.
pub fn randomize_params<R: Rng>(store: &mut ParamStore, scale: f64, rng: &mut R) {
    for t in store.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = uniform(&shape, scale, rng);
    }
}

/// Replaces every tensor with zeros of the same shape.
pub fn zero_params(store: &mut ParamStore) {
    for t in store.tensors_mut() {
        *t = Tensor::zeros(t.shape());
    }
}
