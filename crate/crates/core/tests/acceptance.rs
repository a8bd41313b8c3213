//! Acceptance suite. Each test writes one `PASS`/`FAIL` line for its
//! criterion straight to stderr, so it shows up even under output capture.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tea::autodiff::{gru_cell, GruParams};
use tea::data::{IdMap, Interaction, InteractionLog, PrepareConfig, PreparedDataset, SocialGraph, Split};
use tea::evaluation::{evaluate_all, evaluate_with_scorer, hr_at_k, ndcg_at_k, rank, EvalConfig};
use tea::model::{randomize_params, ModelSpec, ScoringContext, TeaModel, Variant};
use tea::objective::{exact_conditional, predict_probability, sequence_loss, step_loss, ScoredStep};
use tea::params::uniform;
use tea::synthetic::{cyclic_corpus, neighbor_driven_corpus};
use tea::training::{batch_gradient, train, TrainConfig};
use tea::{rng, Execution, ParamId, ParamStore, Tape, Tensor, Var};

fn verdict(id: u32, name: &str, ok: bool, detail: String) {
    let line = format!("{} criterion {id} ({name}): {detail}\n", if ok { "PASS" } else { "FAIL" });
    // Direct handle writes bypass the harness capture that `eprintln!` gets.
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn seeded(seed: u64) -> ChaCha8Rng {
    rng::stream(seed, &[0xacc])
}

// ---------------------------------------------------------------- criterion 1

const EPS: f64 = 1e-5;

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

/// Worst relative error between `param_grads` and central differences of
/// the scalar built by `f` over every value in `store`.
fn check_store<F>(store: &mut ParamStore, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let grads = tape.backward(loss).unwrap();
    let analytic = tape.param_grads(&grads, store).to_dense(store);
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let l = f(&mut t, s);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (p, an) in analytic.iter().enumerate() {
        for k in 0..an.len() {
            let orig = store.tensors()[p].data()[k];
            store.tensors_mut()[p].data_mut()[k] = orig + EPS;
            let up = eval(store);
            store.tensors_mut()[p].data_mut()[k] = orig - EPS;
            let down = eval(store);
            store.tensors_mut()[p].data_mut()[k] = orig;
            worst = worst.max(rel_err((up - down) / (2.0 * EPS), an.data()[k]));
        }
    }
    worst
}

/// Reduces a tensor-valued output to a scalar through fixed random weights,
/// so every output entry gets a distinct adjoint.
fn contract(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(uniform(&shape, 1.0, &mut seeded(seed ^ 0xff)));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Values bounded away from zero, for ops with a kink there.
fn off_kink(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, 1.0, r);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

type Primitive = (&'static str, fn(&mut ParamStore, &mut ChaCha8Rng), fn(&mut Tape, &ParamStore) -> Var);

fn p(tape: &mut Tape, store: &ParamStore, i: usize) -> Var {
    tape.param(store, ParamId(i))
}

fn primitives() -> Vec<Primitive> {
    fn two_mats(s: &mut ParamStore, r: &mut ChaCha8Rng) {
        s.insert("a", uniform(&[2, 3], 1.0, r));
        s.insert("b", uniform(&[3, 4], 1.0, r));
    }
    fn same_mats(s: &mut ParamStore, r: &mut ChaCha8Rng) {
        s.insert("a", uniform(&[2, 3], 1.0, r));
        s.insert("b", uniform(&[2, 3], 1.0, r));
    }
    fn one_mat(s: &mut ParamStore, r: &mut ChaCha8Rng) {
        s.insert("a", uniform(&[3, 4], 2.0, r));
    }
    fn kinked(s: &mut ParamStore, r: &mut ChaCha8Rng) {
        s.insert("a", off_kink(&[3, 4], r));
    }
    fn vecs(s: &mut ParamStore, r: &mut ChaCha8Rng) {
        s.insert("a", uniform(&[5], 2.0, r));
        s.insert("b", uniform(&[5], 2.0, r));
        s.insert("c", uniform(&[5], 2.0, r));
    }
    fn affine_in(s: &mut ParamStore, r: &mut ChaCha8Rng) {
        s.insert("x", uniform(&[3], 1.0, r));
        s.insert("xm", uniform(&[2, 3], 1.0, r));
        s.insert("w", uniform(&[4, 3], 1.0, r));
        s.insert("b", uniform(&[4], 1.0, r));
    }
    fn table(s: &mut ParamStore, r: &mut ChaCha8Rng) {
        s.insert("t", uniform(&[5, 3], 1.0, r));
    }
    fn gru_in(s: &mut ParamStore, r: &mut ChaCha8Rng) {
        s.insert("x", uniform(&[4], 1.0, r));
        s.insert("h", uniform(&[4], 1.0, r));
        GruParams::init(s, "g", 4, r);
        for t in s.tensors_mut() {
            for v in t.data_mut() {
                *v *= 2.0;
            }
        }
    }
    vec![
        ("matmul", two_mats, |t, s| {
            let (a, b) = (p(t, s, 0), p(t, s, 1));
            let o = t.matmul(a, b).unwrap();
            contract(t, o, 1)
        }),
        ("matmul-nt", same_mats, |t, s| {
            let (a, b) = (p(t, s, 0), p(t, s, 1));
            let o = t.matmul_nt(a, b).unwrap();
            contract(t, o, 28)
        }),
        ("transpose", one_mat, |t, s| {
            let a = p(t, s, 0);
            let o = t.transpose(a).unwrap();
            contract(t, o, 2)
        }),
        ("add", same_mats, |t, s| {
            let (a, b) = (p(t, s, 0), p(t, s, 1));
            let o = t.add(a, b).unwrap();
            contract(t, o, 3)
        }),
        ("add-broadcast-row", affine_in, |t, s| {
            let (x, b) = (p(t, s, 1), p(t, s, 2));
            let bt = t.transpose(b).unwrap();
            let xb = t.matmul(x, bt).unwrap();
            let bias = p(t, s, 3);
            let o = t.add(xb, bias).unwrap();
            contract(t, o, 4)
        }),
        ("sub", same_mats, |t, s| {
            let (a, b) = (p(t, s, 0), p(t, s, 1));
            let o = t.sub(a, b).unwrap();
            contract(t, o, 5)
        }),
        ("mul", same_mats, |t, s| {
            let (a, b) = (p(t, s, 0), p(t, s, 1));
            let o = t.mul(a, b).unwrap();
            contract(t, o, 6)
        }),
        ("scale", one_mat, |t, s| {
            let a = p(t, s, 0);
            let o = t.scale(a, -1.7);
            contract(t, o, 7)
        }),
        ("concat", vecs, |t, s| {
            let (a, b, c) = (p(t, s, 0), p(t, s, 1), p(t, s, 2));
            let o = t.concat(&[a, b, c]).unwrap();
            contract(t, o, 8)
        }),
        ("concat-rows", same_mats, |t, s| {
            let (a, b) = (p(t, s, 0), p(t, s, 1));
            let o = t.concat(&[a, b]).unwrap();
            contract(t, o, 9)
        }),
        ("stack", vecs, |t, s| {
            let (a, b, c) = (p(t, s, 0), p(t, s, 1), p(t, s, 2));
            let o = t.stack(&[a, b, c, a]).unwrap();
            contract(t, o, 10)
        }),
        ("repeat-rows", vecs, |t, s| {
            let a = p(t, s, 0);
            let o = t.repeat_rows(a, 3).unwrap();
            contract(t, o, 11)
        }),
        ("relu", kinked, |t, s| {
            let a = p(t, s, 0);
            let o = t.relu(a);
            contract(t, o, 12)
        }),
        ("leaky-relu", kinked, |t, s| {
            let a = p(t, s, 0);
            let o = t.leaky_relu(a, 0.2);
            contract(t, o, 13)
        }),
        ("sigmoid", one_mat, |t, s| {
            let a = p(t, s, 0);
            let o = t.sigmoid(a);
            contract(t, o, 14)
        }),
        ("tanh", one_mat, |t, s| {
            let a = p(t, s, 0);
            let o = t.tanh(a);
            contract(t, o, 15)
        }),
        ("softplus", one_mat, |t, s| {
            let a = p(t, s, 0);
            let o = t.softplus(a);
            contract(t, o, 16)
        }),
        ("mean-rows", one_mat, |t, s| {
            let a = p(t, s, 0);
            let o = t.mean_rows(a).unwrap();
            contract(t, o, 17)
        }),
        ("sum", one_mat, |t, s| {
            let a = p(t, s, 0);
            let o = t.sum(a);
            let sq = t.mul(o, o).unwrap();
            t.sum(sq)
        }),
        ("dot", vecs, |t, s| {
            let (a, b) = (p(t, s, 0), p(t, s, 1));
            let o = t.dot(a, b).unwrap();
            let sq = t.mul(o, o).unwrap();
            t.sum(sq)
        }),
        ("softmax", vecs, |t, s| {
            let a = p(t, s, 0);
            let o = t.softmax(a).unwrap();
            contract(t, o, 19)
        }),
        ("masked-softmax", vecs, |t, s| {
            let a = p(t, s, 0);
            let o = t.masked_softmax(a, &[true, false, true, true, false]).unwrap();
            contract(t, o, 20)
        }),
        ("dropout", one_mat, |t, s| {
            let a = p(t, s, 0);
            let o = t.dropout(a, 0.5, &mut seeded(77)).unwrap();
            contract(t, o, 21)
        }),
        ("gather-rows", table, |t, s| {
            let a = p(t, s, 0);
            let o = t.gather_rows(a, &[4, 1, 1, 0]).unwrap();
            contract(t, o, 22)
        }),
        ("row", table, |t, s| {
            let a = p(t, s, 0);
            let o = t.row(a, 2).unwrap();
            contract(t, o, 23)
        }),
        ("gather-param", table, |t, s| {
            let o = t.gather_param(s, ParamId(0), &[3, 0, 3]).unwrap();
            contract(t, o, 24)
        }),
        ("affine-vector", affine_in, |t, s| {
            let (x, w, b) = (p(t, s, 0), p(t, s, 2), p(t, s, 3));
            let o = t.affine(x, w, Some(b)).unwrap();
            contract(t, o, 25)
        }),
        ("affine-matrix", affine_in, |t, s| {
            let (x, w, b) = (p(t, s, 1), p(t, s, 2), p(t, s, 3));
            let o = t.affine(x, w, Some(b)).unwrap();
            contract(t, o, 26)
        }),
        ("gru-cell", gru_in, |t, s| {
            let (x, h) = (p(t, s, 0), p(t, s, 1));
            let g = GruParams::lookup(s, "g").unwrap().load(t, s);
            let h1 = gru_cell(t, &g, x, h).unwrap();
            let h2 = gru_cell(t, &g, x, h1).unwrap();
            contract(t, h2, 27)
        }),
    ]
}

/// Three users, five items, `L_s = 3`.
fn tiny_dataset() -> PreparedDataset {
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    for i in 0..5 {
        items.get_or_insert(&format!("i{i}"));
    }
    let mut interactions = Vec::new();
    for u in 0..3usize {
        let uid = users.get_or_insert(&format!("u{u}"));
        for t in 0..6usize {
            interactions.push(Interaction {
                user: uid,
                item: ((u * 2 + t * (u + 1)) % 5) as u32,
                timestamp: (t * 3600 + u * 600) as i64,
                rating: None,
            });
        }
    }
    let log = InteractionLog { interactions, users, items };
    let social = SocialGraph::from_edges(3, [(0, 1), (1, 2)]);
    let cfg = PrepareConfig {
        max_seq_len: 3,
        ..PrepareConfig::default()
    };
    PreparedDataset::build(&log, social, cfg, Execution::Sequential).unwrap()
}

fn composed_loss_error(ds: &PreparedDataset, seed: u64) -> f64 {
    let variant = Variant::ALL[seed as usize % 4];
    let cfg = TrainConfig {
        dim: 4,
        n_negatives: 2,
        dropout: 0.5,
        variant,
        seed,
        exec: Execution::Sequential,
        ..TrainConfig::default()
    };
    let mut model = TeaModel::init(cfg.model_spec(ds), seed);
    randomize_params(&mut model.params, 0.5, &mut seeded(seed));
    let users = [0u32, 1, 2];
    let epoch = 1 + seed as usize % 3;
    let analytic = batch_gradient(&model, ds, &users, &cfg, epoch).unwrap().grads;
    let mut worst: f64 = 0.0;
    for (p, an) in analytic.iter().enumerate() {
        for k in 0..an.len() {
            let orig = model.params.tensors()[p].data()[k];
            model.params.tensors_mut()[p].data_mut()[k] = orig + EPS;
            let up = batch_gradient(&model, ds, &users, &cfg, epoch).unwrap().total();
            model.params.tensors_mut()[p].data_mut()[k] = orig - EPS;
            let down = batch_gradient(&model, ds, &users, &cfg, epoch).unwrap().total();
            model.params.tensors_mut()[p].data_mut()[k] = orig;
            worst = worst.max(rel_err((up - down) / (2.0 * EPS), an.data()[k]));
        }
    }
    worst
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut worst_prim: (f64, &str) = (0.0, "");
    for seed in 0..100u64 {
        for (name, setup, f) in primitives() {
            let mut store = ParamStore::new();
            setup(&mut store, &mut seeded(seed));
            let e = check_store(&mut store, f);
            if e > worst_prim.0 {
                worst_prim = (e, name);
            }
        }
    }
    let ds = tiny_dataset();
    let worst_loss = (0..100u64).map(|s| composed_loss_error(&ds, s)).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient suite",
        worst_prim.0 < 1e-4 && worst_loss < 1e-4 && secs < 120.0,
        format!(
            "{} primitives, worst rel err {:.2e} ({}); composed loss worst rel err {:.2e}; 100 seeds; {secs:.1}s",
            primitives().len(),
            worst_prim.0,
            worst_prim.1,
            worst_loss
        ),
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_exact_conditional_oracle() {
    let start = Instant::now();
    let ds = cyclic_corpus(60, 40, 12, 5)
        .prepare(PrepareConfig::default(), Execution::Sequential)
        .unwrap();
    assert!(ds.n_items <= 50);
    let all: Vec<u32> = (0..ds.n_items as u32).collect();
    let mut worst_sum: f64 = 0.0;
    let mut worst_entry: f64 = 0.0;
    for draw in 0..100u64 {
        let variant = Variant::ALL[draw as usize % 4];
        let spec = ModelSpec {
            n_users: ds.n_users,
            n_items: ds.n_items,
            max_seq_len: ds.config.max_seq_len,
            dim: 6,
            variant,
        };
        let mut model = TeaModel::init(spec, draw);
        randomize_params(&mut model.params, 0.4, &mut seeded(draw));
        let user = (draw % ds.n_users as u64) as u32;
        let (ctx, _) = ScoringContext::evaluation(&ds, user, Split::Test, ds.config.max_seq_len);
        let p = exact_conditional(&model.score_candidates(&ctx, &all).unwrap());
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        // Enumerate the catalog one item at a time and normalize directly.
        let singles: Vec<f64> = all
            .iter()
            .map(|&v| model.score_candidates(&ctx, &[v]).unwrap()[0])
            .collect();
        let z: f64 = singles.iter().map(|s| s.exp()).sum();
        for (pv, s) in p.iter().zip(&singles) {
            worst_entry = worst_entry.max((pv - s.exp() / z).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "exact conditional",
        worst_sum <= 1e-8 && worst_entry <= 1e-12 && secs < 60.0,
        format!(
            "|V| = {}, 100 draws, max |Σp − 1| {worst_sum:.1e}, max |p − enum| {worst_entry:.1e}; {secs:.1}s",
            ds.n_items
        ),
    );
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_loss_sanity() {
    let start = Instant::now();
    let zero = ScoredStep {
        user: 0,
        step: 0,
        positive: 0.0,
        negatives: vec![0.0; 50],
    };
    let target = 51.0 * std::f64::consts::LN_2;
    let zero_err = (step_loss(0.0, &[0.0; 50]) - target)
        .abs()
        .max((sequence_loss(&[zero.clone(), zero], 50).unwrap() - target).abs());
    let mut r = seeded(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n_steps = r.gen_range(1..8);
        let n_neg = r.gen_range(1..12);
        let steps: Vec<ScoredStep> = (0..n_steps)
            .map(|i| ScoredStep {
                user: 0,
                step: i,
                positive: r.gen_range(-8.0..8.0),
                negatives: (0..n_neg).map(|_| r.gen_range(-8.0..8.0)).collect(),
            })
            .collect();
        let ln_sigma = |x: f64| (1.0 / (1.0 + (-x).exp())).ln();
        let mut oracle = 0.0;
        for s in &steps {
            oracle -= ln_sigma(s.positive);
            for &n in &s.negatives {
                oracle -= ln_sigma(-n);
            }
        }
        oracle /= n_steps as f64;
        worst = worst.max((sequence_loss(&steps, n_neg).unwrap() - oracle).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        "loss sanity",
        zero_err <= 1e-9 && worst <= 1e-10 && secs < 60.0,
        format!("zero-score error {zero_err:.1e} vs 51·ln2 = {target:.6}; oracle max diff {worst:.1e}; {secs:.2}s"),
    );
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_metric_suite() {
    let start = Instant::now();
    let units = hr_at_k(1, 10) == 1.0
        && ndcg_at_k(1, 10) == 1.0
        && hr_at_k(3, 10) == 1.0
        && ndcg_at_k(3, 10) == 0.5
        && hr_at_k(11, 10) == 0.0
        && ndcg_at_k(11, 10) == 0.0;
    let mut r = seeded(4);
    let mut bounded = true;
    let mut shift_ok = true;
    let mut prob_ok = true;
    for _ in 0..1000 {
        let n = r.gen_range(2..120);
        // Dyadic scores keep the shifted values exact.
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(-64i32..64) as f64 / 8.0).collect();
        let truth = r.gen_range(0..n);
        let rk = rank(&scores, truth);
        for k in [1, 5, 10, 20, 50] {
            bounded &= ndcg_at_k(rk, k) <= hr_at_k(rk, k);
        }
        let c = r.gen_range(-16i32..16) as f64;
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        shift_ok &= rank(&shifted, truth) == rk;
        let probs: Vec<f64> = scores.iter().map(|&s| predict_probability(s, 0.0)).collect();
        prob_ok &= rank(&probs, truth) == rk;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        "metric suite",
        units && bounded && shift_ok && prob_ok && secs < 60.0,
        format!("unit values {units}; NDCG ≤ HR on 1000 rankings {bounded}; shift invariance {shift_ok}; σ-monotone ranking {prob_ok}; {secs:.2}s"),
    );
}

// ---------------------------------------------------------------- criterion 5

fn learnability_cfg(variant: Variant) -> TrainConfig {
    TrainConfig {
        dim: 16,
        batch_size: 128,
        max_epochs: 50,
        patience: 0,
        eval_negatives: 49,
        variant,
        ..TrainConfig::default()
    }
}

fn test_hr10(ds: &PreparedDataset, variant: Variant) -> f64 {
    let out = train(ds, &learnability_cfg(variant)).unwrap();
    let eval = EvalConfig {
        ks: vec![10],
        n_negatives: 49,
        seed: 42,
        exec: Execution::Parallel,
    };
    evaluate_all(&out.model, ds, Split::Test, &eval).unwrap().metric(10).unwrap().hr
}

#[test]
fn criterion_5_synthetic_learnability() {
    let start = Instant::now();
    let prep = |c: &tea::synthetic::SyntheticCorpus| c.prepare(PrepareConfig::default(), Execution::Parallel).unwrap();
    let cyclic = prep(&cyclic_corpus(200, 50, 20, 42));
    let cyc_hr = test_hr10(&cyclic, Variant::TeaS);
    let neighbor = neighbor_driven_corpus(50, 4, 50, 20, 42);
    let nbr_full = test_hr10(&prep(&neighbor), Variant::TeaS);
    let nbr_seq = test_hr10(&prep(&neighbor.without_social()), Variant::TeaRS);
    let secs = start.elapsed().as_secs_f64();
    let gap = (nbr_full - nbr_seq) * 100.0;
    verdict(
        5,
        "synthetic learnability",
        cyc_hr >= 0.9 && gap >= 10.0 && secs < 600.0,
        format!(
            "cyclic TEA-S HR@10 {cyc_hr:.3} (need ≥ 0.9); neighbor-driven TEA-S {nbr_full:.3} vs graph-free TEA-RS {nbr_seq:.3}, gap {gap:.1} points (need ≥ 10); {secs:.0}s"
        ),
    );
}

// ---------------------------------------------------------------- criterion 6

fn tea(args: &[&str], dir: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_tea"))
        .args(args)
        .current_dir(dir)
        .env_remove("TEA_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "tea {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

struct RunArtifacts {
    curve: Vec<u8>,
    metrics: serde_json::Value,
    ranks: Vec<u8>,
    checkpoint: Vec<u8>,
}

fn pipeline(dir: &Path, extra: &[&str]) -> RunArtifacts {
    let mut train = vec![
        "train", "--data", "prep", "--out", "run", "--variant", "tea-a", "--dim", "8", "--batch-size", "64",
        "--max-epochs", "3", "--negatives", "5", "--eval-negatives", "9", "--seed", "7",
    ];
    train.extend_from_slice(extra);
    tea(&train, dir);
    tea(
        &["eval", "--data", "prep", "--checkpoint", "run/checkpoint.tea", "--split", "test", "--n-neg", "9", "--seed", "7"],
        dir,
    );
    let mut metrics: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("run/eval_test.json")).unwrap()).unwrap();
    metrics.as_object_mut().unwrap().remove("wall_clock_secs");
    RunArtifacts {
        curve: fs::read(dir.join("run/curve.csv")).unwrap(),
        metrics,
        ranks: fs::read(dir.join("run/eval_test_ranks.csv")).unwrap(),
        checkpoint: fs::read(dir.join("run/checkpoint.tea")).unwrap(),
    }
}

#[test]
fn criterion_6_determinism() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    cyclic_corpus(24, 12, 10, 9).write(dir).unwrap();
    tea(&["prepare", "--interactions", "interactions.tsv", "--social", "social.tsv", "--out", "prep", "--ls", "6"], dir);
    let a = pipeline(dir, &[]);
    let b = pipeline(dir, &[]);
    let c = pipeline(dir, &["--sequential"]);
    let same = a.curve == b.curve && a.metrics == b.metrics && a.ranks == b.ranks && a.checkpoint == b.checkpoint;
    // The schedule flag is echoed nowhere, so even the bytes must agree.
    let schedule_free = a.curve == c.curve && a.metrics == c.metrics && a.checkpoint == c.checkpoint;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        6,
        "determinism",
        same && schedule_free && secs < 300.0,
        format!("repeat run identical {same}; sequential matches parallel {schedule_free}; {secs:.1}s"),
    );
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_random_baseline() {
    let start = Instant::now();
    let ds = cyclic_corpus(1200, 150, 8, 3)
        .prepare(PrepareConfig::default(), Execution::Parallel)
        .unwrap();
    assert!(ds.n_users >= 1000 && ds.n_items >= 101);
    let cfg = EvalConfig {
        ks: vec![10],
        n_negatives: 100,
        seed: 42,
        exec: Execution::Parallel,
    };
    let report = evaluate_with_scorer(&ds, Split::Test, &cfg, |ctx, cands| {
        let mut r = rng::stream(99, &[ctx.user as u64]);
        Ok(cands.iter().map(|_| r.gen::<f64>()).collect())
    })
    .unwrap();
    let hr = report.metric(10).unwrap().hr;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        7,
        "random baseline",
        (hr - 0.099).abs() <= 0.02 && report.candidate_set_size == 101 && secs < 60.0,
        format!(
            "HR@10 {hr:.4} over {} users, {} candidates (expected 10/101 = {:.4}); {secs:.2}s",
            report.n_users,
            report.candidate_set_size,
            10.0 / 101.0
        ),
    );
}

// ---------------------------------------------------------------- criterion 8

/// Needs a subsampled Epinions extract at `$TEA_EPINIONS_DIR` holding
/// `interactions.tsv` and `social.tsv`.
#[test]
#[ignore = "optional smoke run on real data"]
fn criterion_8_epinions_smoke() {
    let Ok(root) = std::env::var("TEA_EPINIONS_DIR") else {
        let _ = writeln!(std::io::stderr(), "SKIP criterion 8: TEA_EPINIONS_DIR not set");
        return;
    };
    let start = Instant::now();
    let root = Path::new(&root);
    let raw = tea::data::load_interactions(&root.join("interactions.tsv")).unwrap();
    let log = tea::data::preprocess(&raw, 5, 3.0).unwrap();
    let (social, _) = tea::data::load_social_edges(&root.join("social.tsv"), &log.users).unwrap();
    let ds = PreparedDataset::build(&log, social, PrepareConfig::default(), Execution::Parallel).unwrap();
    let cfg = TrainConfig {
        max_epochs: 30,
        ..TrainConfig::default()
    };
    let out = train(&ds, &cfg).unwrap();
    let hr = evaluate_all(&out.model, &ds, Split::Test, &cfg.eval_config())
        .unwrap()
        .metric(10)
        .unwrap()
        .hr;
    let secs = start.elapsed().as_secs_f64();
    verdict(8, "epinions smoke", hr >= 0.20 && secs < 1800.0, format!("test HR@10 {hr:.3}; {secs:.0}s"));
}
