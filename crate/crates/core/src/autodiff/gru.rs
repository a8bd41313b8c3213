use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Result, Tape, Var};
use crate::params::{fan_in_uniform, uniform, ParamId, ParamStore};

/// Parameter block of one gated recurrent unit with equal input and hidden
/// width.
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// n  = tanh(W_n x + U_n (r ⊙ h) + b_n)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
}

const PARTS: [&str; 9] = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n"];

impl GruParams {
    /// Registers a freshly initialized block under `prefix.*`.
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut ids = [ParamId(0); 9];
        for (slot, part) in ids.iter_mut().zip(PARTS) {
            let t = if part.starts_with('b') {
                uniform(&[dim], bound, rng)
            } else {
                fan_in_uniform(dim, dim, rng)
            };
            *slot = store.insert(&format!("{prefix}.{part}"), t);
        }
        Self::from_ids(ids)
    }

    /// Looks an existing block up by name.
    pub fn lookup(store: &ParamStore, prefix: &str) -> Option<Self> {
        let mut ids = [ParamId(0); 9];
        for (slot, part) in ids.iter_mut().zip(PARTS) {
            *slot = store.find(&format!("{prefix}.{part}"))?;
        }
        Some(Self::from_ids(ids))
    }

    fn from_ids(ids: [ParamId; 9]) -> Self {
        GruParams {
            w_z: ids[0],
            u_z: ids[1],
            b_z: ids[2],
            w_r: ids[3],
            u_r: ids[4],
            b_r: ids[5],
            w_n: ids[6],
            u_n: ids[7],
            b_n: ids[8],
        }
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_n, self.u_n, self.b_n,
        ]
    }

    /// Loads the block onto a tape.
    pub fn load(&self, tape: &mut Tape, store: &ParamStore) -> GruVars {
        let v = self.ids().map(|id| tape.param(store, id));
        let dim = tape.value(v[2]).len();
        GruVars {
            w_z: v[0],
            u_z: v[1],
            b_z: v[2],
            w_r: v[3],
            u_r: v[4],
            b_r: v[5],
            w_n: v[6],
            u_n: v[7],
            b_n: v[8],
            dim,
        }
    }
}

/// A [`GruParams`] block resident on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_n: Var,
    pub u_n: Var,
    pub b_n: Var,
    pub dim: usize,
}

/// One GRU step. `input` and `hidden` are both `[d]` vectors, or both
/// `[rows, d]` matrices holding independent sequences row by row.
pub fn gru_cell(tape: &mut Tape, gru: &GruVars, input: Var, hidden: Var) -> Result<Var> {
    let (xs, hs) = (tape.value(input).shape().to_vec(), tape.value(hidden).shape().to_vec());
    if xs != hs || xs.last() != Some(&gru.dim) {
        return Err(AutodiffError::ShapeMismatch {
            op: "gru-cell",
            lhs: xs,
            rhs: hs,
        });
    }
    let gate = |tape: &mut Tape, w: Var, u: Var, b: Var, h: Var| -> Result<Var> {
        let wx = tape.affine(input, w, Some(b))?;
        let uh = tape.affine(h, u, None)?;
        tape.add(wx, uh)
    };
    let z_pre = gate(tape, gru.w_z, gru.u_z, gru.b_z, hidden)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, gru.w_r, gru.u_r, gru.b_r, hidden)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, hidden)?;
    let n_pre = gate(tape, gru.w_n, gru.u_n, gru.b_n, rh)?;
    let n = tape.tanh(n_pre);
    // h' = n + z ⊙ (h − n)
    let diff = tape.sub(hidden, n)?;
    let blend = tape.mul(z, diff)?;
    tape.add(n, blend)
}
