//! Plain-loop reference math shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, GruParams};
use crate::model::{randomize_params, ModelSpec, TeaModel, Variant};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_vec(n, rng)).unwrap()
}

/// `W x` for `W` stored `[rows, cols]`.
pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    assert_eq!(c, x.len());
    (0..r)
        .map(|i| (0..c).map(|j| w.data()[i * c + j] * x[j]).sum())
        .collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn relu(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.max(0.0)).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn mean(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    if rows.is_empty() {
        return vec![0.0; d];
    }
    let mut acc = vec![0.0; d];
    for r in rows {
        acc = add(&acc, r);
    }
    scale(&acc, 1.0 / rows.len() as f64)
}

/// Unstabilized softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

/// One GRU step written gate by gate.
pub fn gru_oracle(store: &ParamStore, g: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let gate = |w, u, b, hin: &[f64]| -> Vec<f64> {
        let a = add(&matvec(store.get(w), x), &matvec(store.get(u), hin));
        add(&a, store.get(b).data())
    };
    let z: Vec<f64> = gate(g.w_z, g.u_z, g.b_z, h).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = gate(g.w_r, g.u_r, g.b_r, h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let n: Vec<f64> = gate(g.w_n, g.u_n, g.b_n, &rh).into_iter().map(f64::tanh).collect();
    (0..h.len()).map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i]).collect()
}

/// Small model with parameters spread over `±0.5`.
pub fn small_model(variant: Variant, seed: u64) -> TeaModel {
    let spec = ModelSpec {
        n_users: 6,
        n_items: 9,
        max_seq_len: 6,
        dim: 4,
        variant,
    };
    let mut m = TeaModel::init(spec, seed);
    randomize_params(&mut m.params, 0.5, &mut rng(seed ^ 0x5eed));
    m
}
