//! L1 training with Adam, validation-driven early stopping and MSE/MAE evaluation.

use std::num::NonZeroUsize;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SeriesDataset, Split, WindowSet};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Anything that maps a `(T × D)` history to an `(H × D)` forecast.
pub trait Forecaster {
    fn input_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn forecast(&self, x: &Tensor) -> Result<Tensor>;
}

/// A forecaster whose parameters live in a [`ParamStore`] and can be fitted.
pub trait Trainable: Forecaster {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var>;
}

/// Eval-mode forecast with parameters bound as constants.
pub fn forecast_frozen<M: Trainable + ?Sized>(model: &M, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = model.params().bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, &bound, xv)?;
    Ok(g.value(out).clone())
}

/// Mean of `|pred − truth|` over every entry.
pub fn l1_loss(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    let diff = g.sub(pred, truth)?;
    let abs = g.abs(diff);
    Ok(g.mean(abs))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Running sums behind [`Metrics`].
#[derive(Clone, Copy, Debug, Default)]
struct Accum {
    se: f64,
    ae: f64,
    n: usize,
}

impl Accum {
    fn add(&mut self, p: f64, t: f64) {
        let e = p - t;
        self.se += e * e;
        self.ae += e.abs();
        self.n += 1;
    }

    fn metrics(&self) -> Metrics {
        let n = self.n.max(1) as f64;
        Metrics {
            mse: self.se / n,
            mae: self.ae / n,
        }
    }
}

pub fn metrics(pred: &Tensor, truth: &Tensor) -> Result<Metrics> {
    if pred.shape() != truth.shape() {
        return Err(TensorError::Shape {
            op: "metrics",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        }
        .into());
    }
    let mut acc = Accum::default();
    for (p, t) in pred.values().iter().zip(truth.values()) {
        acc.add(*p, *t);
    }
    Ok(acc.metrics())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Worker threads for per-window gradients; 0 picks the machine's parallelism.
    /// Results do not depend on this value.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            clip_norm: None,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "Adam betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if self.eps_adam.is_nan() || self.eps_adam <= 0.0 {
            return bad(format!(
                "Adam epsilon must be positive, got {}",
                self.eps_adam
            ));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Adam moments and step count, one slot per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected update, with optional global-norm clipping first.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Tensor],
        cfg: &TrainConfig,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Training(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(TensorError::Shape {
                    op: "adam",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                }
                .into());
            }
            if g.values().iter().any(|v| v.is_nan()) {
                return Err(Error::Training(format!(
                    "NaN gradient for parameter {}",
                    p.name
                )));
            }
        }
        let scale = match cfg.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.values())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].values_mut();
            let v = self.v[i].values_mut();
            for (j, theta) in p.value.values_mut().iter_mut().enumerate() {
                let g = grads[i].values()[j] * scale;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps_adam);
            }
        }
        Ok(())
    }
}

/// Strict-improvement early stopping.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    /// 1-based epoch of the best loss; 0 before the first observation.
    pub best_epoch: usize,
    pub worse: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            worse: 0,
        }
    }

    /// Records the validation loss of `epoch`; returns `true` if it is a new best.
    /// Ties count as worse.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.worse = 0;
            true
        } else {
            self.worse += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.worse > self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub adam: Adam,
    pub stopping: EarlyStopping,
    pub best_params: ParamStore,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn best_val_loss(&self) -> f64 {
        self.stopping.best
    }

    pub fn best_epoch(&self) -> usize {
        self.stopping.best_epoch
    }

    pub fn stopped_early(&self, cfg: &TrainConfig) -> bool {
        self.stopping.should_stop() && self.epoch < cfg.max_epochs
    }
}

pub(crate) fn resolve_threads(requested: usize) -> usize {
    match requested {
        0 => std::thread::available_parallelism().map_or(1, NonZeroUsize::get),
        n => n,
    }
}

/// `f(0..n)` spread over contiguous chunks, results in index order.
pub(crate) fn par_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                scope.spawn(move || (start..(start + chunk).min(n)).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

fn dropout_seed(seed: u64, epoch: usize, batch: usize, window: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [epoch as u64, batch as u64, window as u64] {
        h = (h ^ v).wrapping_mul(0x1000_0000_01b3).rotate_left(29);
    }
    h
}

/// L1 loss and parameter gradients for one training window, dropout on.
fn window_grads<M: Trainable + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &Tensor,
    seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::training(seed);
    let bound = model.params().bind(&mut g);
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let pred = model.forward(&mut g, &bound, xv)?;
    let loss = l1_loss(&mut g, pred, yv)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    Ok((value, bound.grads(&g)))
}

/// Core loop. `validate` scores the current parameters (lower is better) after
/// every epoch; `on_epoch` sees each record as it is appended. The model ends up
/// holding the best parameters seen.
pub fn fit_with<M, V, E>(
    model: &mut M,
    train: &WindowSet<'_>,
    cfg: &TrainConfig,
    mut validate: V,
    mut on_epoch: E,
) -> Result<TrainState>
where
    M: Trainable + Sync,
    V: FnMut(&M) -> Result<f64>,
    E: FnMut(&EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split has no windows".into()));
    }
    if train.input_len() != model.input_len() || train.horizon() != model.horizon() {
        return Err(Error::Config(format!(
            "windows are {}→{} but the model expects {}→{}",
            train.input_len(),
            train.horizon(),
            model.input_len(),
            model.horizon()
        )));
    }
    let threads = resolve_threads(cfg.threads);
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut state = TrainState {
        epoch: 0,
        adam: Adam::new(model.params()),
        stopping: EarlyStopping::new(cfg.patience),
        best_params: model.params().clone(),
        history: Vec::new(),
    };

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<_> = idx.iter().map(|&i| train.get(i)).collect();
            let frozen: &M = model;
            let results = par_map(samples.len(), threads, |k| {
                let s = &samples[k];
                window_grads(
                    frozen,
                    &s.input,
                    &s.target,
                    dropout_seed(cfg.seed, epoch, batch, k),
                )
            });
            let n = samples.len() as f64;
            let mut batch_loss = 0.0;
            let mut grads: Option<Vec<Tensor>> = None;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            a.values_mut()
                                .iter_mut()
                                .zip(b.values())
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {batch}"
                )));
            }
            let mut grads = grads.expect("non-empty batch");
            for g in &mut grads {
                g.values_mut().iter_mut().for_each(|v| *v /= n);
            }
            state
                .adam
                .step(model.params_mut(), &grads, cfg)
                .map_err(|e| match e {
                    Error::Training(msg) => {
                        Error::Training(format!("epoch {epoch}, batch {batch}: {msg}"))
                    }
                    other => other,
                })?;
            loss_sum += batch_loss;
        }

        let train_loss = loss_sum / train.len() as f64;
        let val_loss = validate(model)?;
        if val_loss.is_nan() {
            return Err(Error::Training(format!(
                "NaN validation loss at epoch {epoch}"
            )));
        }
        state.epoch = epoch;
        if state.stopping.observe(epoch, val_loss) {
            state.best_params = model.params().clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: cfg.lr,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record)?;
        state.history.push(record);
        if state.stopping.should_stop() {
            break;
        }
    }
    *model.params_mut() = state.best_params.clone();
    Ok(state)
}

/// Trains on the train split and early-stops on validation L1 (stride-1 windows).
pub fn fit<M, E>(
    model: &mut M,
    ds: &SeriesDataset,
    cfg: &TrainConfig,
    on_epoch: E,
) -> Result<TrainState>
where
    M: Trainable + Sync,
    E: FnMut(&EpochRecord) -> Result<()>,
{
    let (t, h) = (model.input_len(), model.horizon());
    let train = ds.windows(Split::Train, t, h, 1)?;
    let val = ds.windows(Split::Val, t, h, 1).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("validation is required for training: {msg}")),
        other => other,
    })?;
    let threads = cfg.threads;
    fit_with(
        model,
        &train,
        cfg,
        |m: &M| Ok(evaluate_windows(m, &val, None, threads)?.normalized.mae),
        on_epoch,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based forecast step.
    pub step: usize,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub split: Option<Split>,
    pub windows: usize,
    /// Metrics in the units the model sees (z-scored when a scaler is attached).
    pub normalized: Metrics,
    pub per_horizon: Vec<HorizonMetrics>,
    /// Metrics after undoing the scaler, when there is one.
    pub raw: Option<Metrics>,
}

impl ForecastReport {
    pub fn mse(&self) -> f64 {
        self.normalized.mse
    }

    pub fn mae(&self) -> f64 {
        self.normalized.mae
    }
}

/// Forecasts every window and aggregates errors over all of them.
pub fn evaluate_windows<M: Forecaster + Sync + ?Sized>(
    model: &M,
    windows: &WindowSet<'_>,
    split: Option<Split>,
    threads: usize,
) -> Result<ForecastReport> {
    if windows.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let h = windows.horizon();
    let scaler = windows.dataset().scaler();
    let forecasts = par_map(windows.len(), resolve_threads(threads), |i| {
        let s = windows.get(i);
        model.forecast(&s.input).map(|p| (p, s.target))
    });
    let mut total = Accum::default();
    let mut raw = Accum::default();
    let mut steps = vec![Accum::default(); h];
    for f in forecasts {
        let (pred, target) = f?;
        if pred.shape() != target.shape() {
            return Err(TensorError::Shape {
                op: "evaluate",
                lhs: pred.shape().to_vec(),
                rhs: target.shape().to_vec(),
            }
            .into());
        }
        let d = target.cols();
        for (k, (p, t)) in pred.values().iter().zip(target.values()).enumerate() {
            total.add(*p, *t);
            steps[k / d].add(*p, *t);
        }
        if let Some(sc) = scaler {
            let (p, t) = (sc.denormalize(&pred), sc.denormalize(&target));
            for (p, t) in p.values().iter().zip(t.values()) {
                raw.add(*p, *t);
            }
        }
    }
    Ok(ForecastReport {
        split,
        windows: windows.len(),
        normalized: total.metrics(),
        per_horizon: steps
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let m = a.metrics();
                HorizonMetrics {
                    step: i + 1,
                    mse: m.mse,
                    mae: m.mae,
                }
            })
            .collect(),
        raw: scaler.map(|_| raw.metrics()),
    })
}

/// Stride-1 evaluation over one split of `ds`.
pub fn evaluate<M: Forecaster + Sync + ?Sized>(
    model: &M,
    ds: &SeriesDataset,
    split: Split,
) -> Result<ForecastReport> {
    let windows = ds.windows(split, model.input_len(), model.horizon(), 1)?;
    evaluate_windows(model, &windows, Some(split), 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_counts_ties_as_worse() {
        let mut es = EarlyStopping::new(1);
        assert!(es.observe(1, 1.0));
        assert!(!es.observe(2, 1.0));
        assert!(!es.should_stop());
        assert!(!es.observe(3, 1.0));
        assert!(es.should_stop());
        assert_eq!(es.best_epoch, 1);
    }

    #[test]
    fn par_map_keeps_order() {
        let v = par_map(17, 4, |i| i * i);
        assert_eq!(v, (0..17).map(|i| i * i).collect::<Vec<_>>());
        assert!(par_map(0, 4, |i| i).is_empty());
    }
}
