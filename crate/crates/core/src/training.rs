//! Mini-batch Adam training with negative sampling and validation-based
//! early stopping.
//!
//! Work is split per user: each user's tape scores all of its targets, so
//! the gradient of a batch is a sum of independent per-user gradients. These
//! are computed through [`exec::map`] and reduced in user order, which keeps
//! parallel and sequential runs bit-identical.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, AdamState, AutodiffError, ParamGrads, Tape};
use crate::data::{sample_negatives, DataError, PreparedDataset, Split};
use crate::evaluation::{evaluate_all, EvalConfig, EvalError, DEFAULT_EVAL_NEGATIVES};
use crate::exec::{self, Execution};
use crate::model::{ModelError, ModelSpec, ScoringContext, Target, TeaModel, Variant};
use crate::objective::step_loss_on_tape;
use crate::rng;
use crate::tensor::Tensor;

/// K of the validation metric used for model selection.
pub const SELECTION_K: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    /// Training targets per optimizer step (whole users are kept together).
    pub batch_size: usize,
    pub dropout: f64,
    pub gamma: f64,
    pub n_negatives: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Use every window position as a target, not only the last one.
    pub all_steps: bool,
    /// Global gradient norm cap; 0 disables.
    pub clip_norm: f64,
    /// Negatives per user in the per-epoch validation ranking.
    pub eval_negatives: usize,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            batch_size: 1024,
            dropout: 0.5,
            gamma: 5e-4,
            n_negatives: 50,
            lr: 0.01,
            max_epochs: 30,
            patience: 5,
            seed: 42,
            variant: Variant::TeaS,
            all_steps: true,
            clip_norm: 5.0,
            eval_negatives: DEFAULT_EVAL_NEGATIVES,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        // written so NaN fails too
        let in_range = self.gamma >= 0.0 && self.lr > 0.0 && self.clip_norm >= 0.0;
        if !in_range {
            return bad("gamma, lr and clip_norm must be non-negative (lr positive)");
        }
        if self.n_negatives == 0 {
            return bad("n_negatives must be positive");
        }
        Ok(())
    }

    pub fn model_spec(&self, ds: &PreparedDataset) -> ModelSpec {
        ModelSpec {
            n_users: ds.n_users,
            n_items: ds.n_items,
            max_seq_len: ds.config.max_seq_len,
            dim: self.dim,
            variant: self.variant,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ks: vec![SELECTION_K],
            n_negatives: self.eval_negatives,
            seed: self.seed,
            exec: self.exec,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; largest parameter {param} has norm {norm:e}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        param: String,
        norm: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-target CRF loss over the epoch, before the L2 term.
    pub train_loss: f64,
    pub val_hr10: f64,
    pub val_ndcg10: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the initial ones if no
    /// epoch ran).
    pub model: TeaModel,
    pub curve: Vec<EpochRecord>,
    /// 1-based.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EarlyStop {
    pub stop: bool,
    /// 1-based epoch of the first maximum.
    pub best: usize,
}

/// Stop once `patience` epochs have passed since the best value.
pub fn early_stop(history: &[f64], patience: usize) -> Option<EarlyStop> {
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best] {
            best = i;
        }
    }
    let last = history.len().checked_sub(1)?;
    Some(EarlyStop {
        stop: patience > 0 && last - best >= patience,
        best: best + 1,
    })
}

/// Window positions used as targets for one user.
pub fn target_positions(train_len: usize, all_steps: bool) -> Vec<usize> {
    match (train_len, all_steps) {
        (0, _) => Vec::new(),
        (n, true) => (0..n).collect(),
        (n, false) => vec![n - 1],
    }
}

/// Targets with freshly sampled negatives for one user and epoch.
pub fn user_targets(ds: &PreparedDataset, user: u32, cfg: &TrainConfig, epoch: usize) -> Result<Vec<Target>, TrainError> {
    let ctx = ScoringContext::training(ds, user);
    let mut r = rng::stream(cfg.seed, &[rng::domain::NEGATIVES, epoch as u64, user as u64]);
    target_positions(ctx.items.len(), cfg.all_steps)
        .into_iter()
        .map(|j| {
            let pos = ctx.items[j];
            let mut candidates = vec![pos];
            candidates.extend(sample_negatives(pos, ds.n_items, cfg.n_negatives, &mut r)?);
            Ok(Target { position: j, candidates })
        })
        .collect()
}

/// Summed step loss of one context and the gradient of that sum.
pub fn context_loss_and_grads(
    model: &TeaModel,
    ctx: &ScoringContext<'_>,
    targets: &[Target],
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(f64, ParamGrads), ModelError> {
    let mut tape = Tape::new();
    let scored = model.forward(&mut tape, ctx, targets, dropout)?;
    let mut loss = None;
    for s in &scored {
        let term = step_loss_on_tape(&mut tape, s.total)?;
        loss = Some(match loss {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let Some(loss) = loss else {
        return Ok((0.0, ParamGrads::new(model.params.len())));
    };
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), tape.param_grads(&grads, &model.params)))
}

/// Loss and gradient of one mini-batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    /// Mean per-target CRF loss.
    pub crf_loss: f64,
    /// `γ Σ ||θ||²`.
    pub penalty: f64,
    pub n_targets: usize,
    /// Gradient of `crf_loss + penalty`, one tensor per parameter.
    pub grads: Vec<Tensor>,
}

impl BatchGradient {
    pub fn total(&self) -> f64 {
        self.crf_loss + self.penalty
    }
}

/// Gradient of the regularized batch objective for `users` at `epoch`.
pub fn batch_gradient(
    model: &TeaModel,
    ds: &PreparedDataset,
    users: &[u32],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<BatchGradient, TrainError> {
    let per_user = exec::map(cfg.exec, users, |&u| -> Result<(f64, usize, ParamGrads), TrainError> {
        let ctx = ScoringContext::training(ds, u);
        let targets = user_targets(ds, u, cfg, epoch)?;
        let mut drop_rng = rng::stream(cfg.seed, &[rng::domain::DROPOUT, epoch as u64, u as u64]);
        let dropout = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut drop_rng));
        let (loss, grads) = context_loss_and_grads(model, &ctx, &targets, dropout)?;
        Ok((loss, targets.len(), grads))
    });

    let mut grads: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss_sum = 0.0;
    let mut n_targets = 0;
    for r in per_user {
        let (loss, n, g) = r?;
        loss_sum += loss;
        n_targets += n;
        g.accumulate_into(&mut grads);
    }
    let inv = if n_targets > 0 { 1.0 / n_targets as f64 } else { 0.0 };
    let two_gamma = 2.0 * cfg.gamma;
    for (g, p) in grads.iter_mut().zip(model.params.tensors()) {
        for (gv, pv) in g.data_mut().iter_mut().zip(p.data()) {
            *gv = *gv * inv + two_gamma * pv;
        }
    }
    Ok(BatchGradient {
        crf_loss: loss_sum * inv,
        penalty: cfg.gamma * model.params.squared_norm(),
        n_targets,
        grads,
    })
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Shuffled users grouped so each batch holds at least `batch_size` targets
/// (the last batch may hold fewer).
pub fn epoch_batches(ds: &PreparedDataset, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<u32>> {
    let mut users: Vec<u32> = (0..ds.n_users as u32).collect();
    users.shuffle(&mut rng::stream(cfg.seed, &[rng::domain::SHUFFLE, epoch as u64]));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut count = 0;
    for u in users {
        let n = target_positions(ds.users[u as usize].train_len(), cfg.all_steps).len();
        if n == 0 {
            continue;
        }
        current.push(u);
        count += n;
        if count >= cfg.batch_size {
            batches.push(std::mem::take(&mut current));
            count = 0;
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

fn largest_param(model: &TeaModel) -> (String, f64) {
    model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.squared_norm().sqrt()))
        .fold((String::new(), f64::NEG_INFINITY), |a, b| if b.1 > a.1 || b.1.is_nan() { b } else { a })
}

/// Runs one epoch in place. Returns the mean per-target CRF loss.
pub fn train_epoch(model: &mut TeaModel, adam: &mut AdamState, ds: &PreparedDataset, cfg: &TrainConfig, epoch: usize) -> Result<f64, TrainError> {
    let mut loss_sum = 0.0;
    let mut targets = 0;
    for (b, users) in epoch_batches(ds, cfg, epoch).iter().enumerate() {
        let mut bg = batch_gradient(model, ds, users, cfg, epoch)?;
        if !bg.total().is_finite() {
            let (param, norm) = largest_param(model);
            return Err(TrainError::NonFinite {
                epoch,
                batch: b + 1,
                param,
                norm,
            });
        }
        clip_global_norm(&mut bg.grads, cfg.clip_norm);
        adam_step(&mut model.params, &bg.grads, adam)?;
        loss_sum += bg.crf_loss * bg.n_targets as f64;
        targets += bg.n_targets;
    }
    Ok(if targets > 0 { loss_sum / targets as f64 } else { 0.0 })
}

/// Trains from a fresh initialization.
pub fn train(ds: &PreparedDataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let model = TeaModel::init(cfg.model_spec(ds), cfg.seed);
    train_from(model, ds, cfg)
}

/// Trains starting from `model`.
pub fn train_from(mut model: TeaModel, ds: &PreparedDataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let eval_cfg = cfg.eval_config();
    let mut best = model.clone();
    let mut curve = Vec::new();
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let train_loss = train_epoch(&mut model, &mut adam, ds, cfg, epoch)?;
        let report = evaluate_all(&model, ds, Split::Validation, &eval_cfg)?;
        let m = report.metric(SELECTION_K).expect("selection K evaluated");
        log::info!(
            "epoch {epoch}: loss {train_loss:.5} val HR@{SELECTION_K} {:.4} NDCG@{SELECTION_K} {:.4}",
            m.hr,
            m.ndcg
        );
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_hr10: m.hr,
            val_ndcg10: m.ndcg,
        });
        history.push(m.ndcg);
        let decision = early_stop(&history, cfg.patience).expect("nonempty history");
        if decision.best == epoch {
            best = model.clone();
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
    }
    let best_epoch = early_stop(&history, cfg.patience).map(|d| d.best);
    Ok(TrainOutcome {
        model: best,
        curve,
        best_epoch,
        stopped_early,
    })
}
