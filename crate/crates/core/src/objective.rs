//! Negative-sampled pseudo-likelihood loss, the L2 term, the exact
//! per-step conditional and the inference probability.

use thiserror::Error;

use crate::autodiff::{sigmoid, softplus, AutodiffError, Tape, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("step (user {user}, position {step}) has {found} negatives, expected {expected}")]
    NegativeCount {
        user: u32,
        step: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite score at step (user {user}, position {step})")]
    NonFinite { user: u32, step: usize },
}

/// `f + g` of one training target and its sampled negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredStep {
    pub user: u32,
    pub step: usize,
    pub positive: f64,
    pub negatives: Vec<f64>,
}

/// `−log σ(s⁺) − Σ_k log σ(−s_k)` written with softplus.
pub fn step_loss(positive: f64, negatives: &[f64]) -> f64 {
    softplus(-positive) + negatives.iter().map(|&s| softplus(s)).sum::<f64>()
}

/// Mean [`step_loss`] over the batch. Steps are summed in slice order.
pub fn sequence_loss(steps: &[ScoredStep], n_negatives: usize) -> Result<f64, ObjectiveError> {
    if steps.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut total = 0.0;
    for s in steps {
        if s.negatives.len() != n_negatives {
            return Err(ObjectiveError::NegativeCount {
                user: s.user,
                step: s.step,
                expected: n_negatives,
                found: s.negatives.len(),
            });
        }
        if !s.positive.is_finite() || s.negatives.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::NonFinite { user: s.user, step: s.step });
        }
        total += step_loss(s.positive, &s.negatives);
    }
    Ok(total / steps.len() as f64)
}

/// Tape version of [`step_loss`] for a score vector whose first entry is the
/// positive. Returns a scalar.
pub fn step_loss_on_tape(tape: &mut Tape, scores: Var) -> Result<Var, AutodiffError> {
    let n = tape.value(scores).len();
    let mut signs = vec![1.0; n];
    if let Some(first) = signs.first_mut() {
        *first = -1.0;
    }
    let signs = tape.constant(Tensor::vector(signs));
    let signed = tape.mul(scores, signs)?;
    let terms = tape.softplus(signed);
    Ok(tape.sum(terms))
}

/// `Σ ||θ||²` over every stored tensor; shared tables are stored once.
pub fn l2_penalty(params: &ParamStore) -> f64 {
    params.squared_norm()
}

pub fn total_loss(crf_loss: f64, params: &ParamStore, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return crf_loss;
    }
    crf_loss + gamma * l2_penalty(params)
}

/// Softmax over the whole catalog's `f + g`.
pub fn exact_conditional(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn predict_probability(f: f64, g: f64) -> f64 {
    sigmoid(f + g)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::testutil::rng;

    fn ln_sigmoid_direct(x: f64) -> f64 {
        (1.0 / (1.0 + (-x).exp())).ln()
    }

    fn step(positive: f64, negatives: Vec<f64>) -> ScoredStep {
        ScoredStep {
            user: 0,
            step: 0,
            positive,
            negatives,
        }
    }

    #[test]
    fn zero_scores_give_51_ln2() {
        let s = vec![step(0.0, vec![0.0; 50]); 3];
        let l = sequence_loss(&s, 50).unwrap();
        assert!((l - 51.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 35.3505).abs() < 1e-4);
    }

    #[test]
    fn saturated_scores_give_tiny_loss() {
        let s = [step(100.0, vec![-100.0; 50])];
        assert!(sequence_loss(&s, 50).unwrap() < 1e-6);
    }

    #[test]
    fn matches_term_by_term_formula() {
        let mut r = rng(11);
        for _ in 0..50 {
            let steps: Vec<ScoredStep> = (0..4)
                .map(|_| step(r.gen_range(-5.0..5.0), (0..6).map(|_| r.gen_range(-5.0..5.0)).collect()))
                .collect();
            let mut want = 0.0;
            for s in &steps {
                want += ln_sigmoid_direct(s.positive);
                for &n in &s.negatives {
                    want += ln_sigmoid_direct(-n);
                }
            }
            want = -want / steps.len() as f64;
            assert!((sequence_loss(&steps, 6).unwrap() - want).abs() < 1e-10);
        }
    }

    #[test]
    fn validates_batches() {
        assert_eq!(sequence_loss(&[], 2), Err(ObjectiveError::EmptyBatch));
        assert!(matches!(
            sequence_loss(&[step(0.0, vec![0.0])], 2),
            Err(ObjectiveError::NegativeCount { found: 1, .. })
        ));
        assert!(matches!(
            sequence_loss(&[step(f64::NAN, vec![0.0])], 1),
            Err(ObjectiveError::NonFinite { .. })
        ));
    }

    #[test]
    fn tape_loss_matches_scalar_loss() {
        let mut r = rng(5);
        let v: Vec<f64> = (0..5).map(|_| r.gen_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(v.clone()));
        let l = step_loss_on_tape(&mut tape, x).unwrap();
        assert!((tape.value(l).item() - step_loss(v[0], &v[1..])).abs() < 1e-12);
        let g = tape.backward(l).unwrap().wrt(&tape, x);
        assert!((g.data()[0] - (sigmoid(v[0]) - 1.0)).abs() < 1e-12);
        assert!((g.data()[1] - sigmoid(v[1])).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(total_loss(0.0, &store, 1.0), 25.0);
        assert_eq!(total_loss(1.5, &store, 0.0), 1.5);
        let mut zero = ParamStore::new();
        zero.insert("w", Tensor::zeros(&[2, 2]));
        assert_eq!(l2_penalty(&zero), 0.0);
    }

    #[test]
    fn exact_conditional_examples() {
        assert_eq!(exact_conditional(&[2.0; 4]), vec![0.25; 4]);
        let mut r = rng(9);
        let s: Vec<f64> = (0..5).map(|_| r.gen_range(-4.0..4.0)).collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for (p, v) in exact_conditional(&s).iter().zip(&s) {
            assert!((p - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_probability_examples() {
        assert_eq!(predict_probability(0.3, -0.3), 0.5);
        assert!(predict_probability(15.0, 5.0) > 0.9999);
    }

    proptest! {
        #[test]
        fn loss_monotone_in_scores(pos in -10.0f64..10.0, negs in prop::collection::vec(-10.0f64..10.0, 1..6), k in 0usize..6, delta in 1e-3f64..1.0) {
            let base = step_loss(pos, &negs);
            prop_assert!(step_loss(pos + delta, &negs) < base);
            let mut up = negs.clone();
            let k = k % negs.len();
            up[k] += delta;
            prop_assert!(step_loss(pos, &up) > base);
        }

        #[test]
        fn conditional_is_shift_invariant(s in prop::collection::vec(-20.0f64..20.0, 1..30), c in -50.0f64..50.0) {
            let p = exact_conditional(&s);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            for (a, b) in p.iter().zip(exact_conditional(&shifted)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn probability_ranking_equals_score_ranking(s in prop::collection::vec(-30.0f64..30.0, 2..30)) {
            let order = |key: &dyn Fn(f64) -> f64| {
                let mut idx: Vec<usize> = (0..s.len()).collect();
                idx.sort_by(|&a, &b| key(s[a]).partial_cmp(&key(s[b])).unwrap().then(a.cmp(&b)));
                idx
            };
            // σ saturates to exactly 1.0 beyond ~37, so the range stays below that
            prop_assert_eq!(order(&|x| x), order(&|x| predict_probability(x, 0.0)));
        }
    }
}
