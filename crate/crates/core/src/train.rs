//! AdamW, the warm-up + cosine schedule, the training loop with early
//! stopping, and classification metrics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown, LossConfig};
use crate::model::DapNet;
use crate::moe::{RoutingRecord, RoutingStats};
use crate::rng;
use crate::tensor::{ParamStore, Tensor};

pub const DEFAULT_SEEDS: [u64; 5] = [42, 123, 456, 789, 2025];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    /// Explicit warm-up length; when absent, `warmup_fraction` of the total steps.
    pub warmup_steps: Option<usize>,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            weight_decay: 1e-2,
            warmup_steps: None,
            warmup_fraction: 0.05,
            batch_size: 32,
            patience: 10,
            seed: 42,
            max_epochs: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0.is_nan() || self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(
                "weight_decay must be >= 0 and warmup_fraction in [0, 1)".into(),
            ));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size, patience and max_epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Schedule for a run of `steps_per_epoch · max_epochs` optimizer steps.
    pub fn schedule(&self, steps_per_epoch: usize) -> Result<Schedule> {
        let total = steps_per_epoch * self.max_epochs;
        let warmup = self
            .warmup_steps
            .unwrap_or_else(|| (self.warmup_fraction * total as f64).round() as usize);
        if warmup >= total {
            return Err(Error::Config(format!(
                "warmup_steps = {warmup} must be < total_steps = {total}"
            )));
        }
        Ok(Schedule {
            lr0: self.lr0,
            warmup,
            total,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr0: f64,
    pub warmup: usize,
    pub total: usize,
}

/// Linear warm-up from 0 to `lr0`, then cosine decay to 0 at `total`.
pub fn lr_schedule(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup {
        return s.lr0 * step as f64 / s.warmup as f64;
    }
    if step >= s.total {
        return 0.0;
    }
    let progress = (step - s.warmup) as f64 / (s.total - s.warmup) as f64;
    s.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Moments {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One AdamW update in place. Decay multiplies the weights directly and never
/// enters the moment estimates.
pub fn optimizer_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    lr: f64,
    weight_decay: f64,
    hp: &AdamHyper,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::Usage(format!(
            "optimizer_step: param {}, grad {}, state {} elements",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *p -= lr * weight_decay * *p;
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + hp.eps);
    }
    Ok(())
}

/// AdamW over a whole parameter store. Parameters without a gradient this step
/// (an expert no sample was routed to) are left alone.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub hyper: AdamHyper,
    pub state: Vec<Moments>,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            hyper: AdamHyper::default(),
            state: params.iter().map(|(_, t)| Moments::new(t.numel())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<()> {
        for ((_, t), st) in params.iter_mut().zip(&mut self.state) {
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            optimizer_step(t.data_mut(), &grad, st, lr, weight_decay, &self.hyper)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: &[String]) -> Self {
        let n = classes.len();
        let mut confusion = vec![vec![0usize; n]; n];
        for (&p, &y) in preds.iter().zip(labels) {
            confusion[y][p] += 1;
        }
        let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..n)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted: usize = (0..n).map(|r| confusion[r][c]).sum();
                let support: usize = confusion[c].iter().sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    class: classes[c].clone(),
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n.max(1) as f64;
        Self {
            accuracy: ratio(correct, labels.len()),
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            per_class,
            confusion,
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Everything one pass over a dataset produces.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub logits: Vec<Vec<f64>>,
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
    /// `records[layer][sample]`.
    pub records: Vec<Vec<RoutingRecord>>,
    /// Batch losses averaged over samples.
    pub loss: LossBreakdown,
}

pub fn predict(model: &DapNet, ds: &Dataset, batch_size: usize, loss_cfg: &LossConfig) -> Result<Predictions> {
    let mut out = Predictions {
        logits: Vec::with_capacity(ds.len()),
        preds: Vec::with_capacity(ds.len()),
        labels: Vec::with_capacity(ds.len()),
        records: vec![Vec::with_capacity(ds.len()); model.layers.len()],
        loss: LossBreakdown {
            l_class: 0.0,
            l_balance: 0.0,
            l_total: 0.0,
        },
    };
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch(chunk);
        let mut g = model.graph();
        let xv = g.constant(x);
        let fwd = model.forward(&mut g, xv)?;
        let l_cls = loss::focal_loss(&mut g, fwd.logits, &y, loss_cfg.gamma, loss_cfg.smoothing)?;
        let l_bal = model.balance_loss(&mut g, &fwd.routing)?;
        let (_, b) = loss::hybrid_loss(&mut g, l_cls, l_bal, loss_cfg)?;
        let w = chunk.len() as f64 / ds.len() as f64;
        out.loss.l_class += w * b.l_class;
        out.loss.l_balance += w * b.l_balance;
        out.loss.l_total += w * b.l_total;
        for row in g.value(fwd.logits).rows() {
            out.preds.push(argmax(row));
            out.logits.push(row.to_vec());
        }
        out.labels.extend(y);
        for (acc, r) in out.records.iter_mut().zip(fwd.routing) {
            acc.extend(r.records);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// Per-layer routing statistics over the whole dataset.
    pub routing: Vec<RoutingStats>,
    pub loss: LossBreakdown,
}

pub fn evaluate(model: &DapNet, ds: &Dataset, batch_size: usize, loss_cfg: &LossConfig) -> Result<Evaluation> {
    let p = predict(model, ds, batch_size, loss_cfg)?;
    Ok(Evaluation {
        metrics: Metrics::from_predictions(&p.preds, &p.labels, &ds.classes),
        routing: p.records.iter().map(|r| RoutingStats::from_records(r)).collect(),
        loss: p.loss,
    })
}

pub const HISTORY_VERSION: u32 = 1;

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub version: u32,
    pub epoch: usize,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    pub train: LossBreakdown,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub best_val_loss: f64,
    /// Per-layer routing statistics over the epoch's training batches.
    pub train_routing: Vec<RoutingStatsRecord>,
    pub val_routing: Vec<RoutingStatsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStatsRecord {
    pub fraction: Vec<f64>,
    pub mean_prob: Vec<f64>,
}

impl From<&RoutingStats> for RoutingStatsRecord {
    fn from(s: &RoutingStats) -> Self {
        Self {
            fraction: s.fraction.clone(),
            mean_prob: s.mean_prob.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Last epoch run.
    pub stop_epoch: usize,
    pub early_stopped: bool,
}

/// Trains `model` in place. On return its parameters are the best validation
/// checkpoint, already rounded to checkpoint precision.
pub fn fit(
    model: &mut DapNet,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<FitOutcome> {
    fit_with(model, train, val, cfg, loss_cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with<F>(
    model: &mut DapNet,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_epoch: F,
) -> Result<FitOutcome>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    loss_cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(steps_per_epoch)?;
    let mut opt = AdamW::new(&model.params);
    let mut shuffle = rng::stream(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut bad_epochs = 0;
    let mut step = 0;
    let mut early_stopped = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut sums = LossBreakdown {
            l_class: 0.0,
            l_balance: 0.0,
            l_total: 0.0,
        };
        let mut epoch_records: Vec<Vec<RoutingRecord>> = vec![Vec::new(); model.layers.len()];
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let mut g = model.graph();
            let xv = g.constant(x);
            let fwd = model.forward(&mut g, xv)?;
            let l_cls = loss::focal_loss(&mut g, fwd.logits, &y, loss_cfg.gamma, loss_cfg.smoothing)?;
            let l_bal = model.balance_loss(&mut g, &fwd.routing)?;
            let (total, b) = loss::hybrid_loss(&mut g, l_cls, l_bal, loss_cfg)?;
            if !b.l_total.is_finite() {
                let stats: Vec<String> = fwd
                    .routing
                    .iter()
                    .enumerate()
                    .map(|(l, r)| {
                        let s = r.stats();
                        format!("layer {l}: f = {:?}, p_bar = {:?}", s.fraction, s.mean_prob)
                    })
                    .collect();
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("loss = {}; last routing stats: {}", b.l_total, stats.join("; ")),
                });
            }
            g.backward(total)?;
            model.params.zero_grads();
            model.params.accumulate_grads(&g);
            lr = lr_schedule(step, &schedule);
            opt.step(&mut model.params, lr, cfg.weight_decay)?;
            if let Some((name, _)) = model
                .params
                .iter()
                .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("parameter {name} became non-finite (lr = {lr})"),
                });
            }
            step += 1;

            let w = chunk.len() as f64 / train.len() as f64;
            sums.l_class += w * b.l_class;
            sums.l_balance += w * b.l_balance;
            sums.l_total += w * b.l_total;
            for (acc, r) in epoch_records.iter_mut().zip(fwd.routing) {
                acc.extend(r.records);
            }
        }
        model.params.zero_grads();

        // Validation sees exactly the parameters a checkpoint would store.
        let mut snapshot = model.clone();
        snapshot.params.round_to_f32();
        let val_eval = evaluate(&snapshot, val, cfg.batch_size, loss_cfg)?;
        let val_loss = val_eval.loss.l_total;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step,
                detail: format!("validation loss = {val_loss}"),
            });
        }
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, snapshot.params));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        history.push(EpochRecord {
            version: HISTORY_VERSION,
            epoch,
            lr,
            train: sums,
            val_loss,
            val_accuracy: val_eval.metrics.accuracy,
            best_val_loss: best.as_ref().map_or(val_loss, |b| b.0),
            train_routing: epoch_records
                .iter()
                .map(|r| RoutingStatsRecord::from(&RoutingStats::from_records(r)))
                .collect(),
            val_routing: val_eval.routing.iter().map(RoutingStatsRecord::from).collect(),
        });
        on_epoch(history.last().expect("just pushed"));
        if bad_epochs >= cfg.patience {
            early_stopped = true;
            break;
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(FitOutcome {
        stop_epoch: history.len(),
        history,
        best_epoch,
        early_stopped,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Logits of a batch as a plain tensor; convenience for callers without a graph.
pub fn logits(model: &DapNet, x: &Tensor) -> Result<Tensor> {
    model.infer(x).map(|(l, _)| l)
}
