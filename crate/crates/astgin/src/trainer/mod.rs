//! Training schedule, evaluation, perturbation analysis, and naive
//! reference predictors around the assembled model.

pub mod model;

pub use model::{astgin_forward, Ablation, AstGin, ModelError};

use crate::a2unit::{augment, AttributeSelection};
use crate::graph::StationGraph;
use crate::informer::{AttentionTrace, InformerConfig};
use crate::ingest::{IngestError, SplitIndices, StaticAttributes, WindowSample, WindowSet};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::nncore::{AdamConfig, BoundParams, Graph, NnError, ParameterStore, Tensor};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Augment(#[from] crate::a2unit::AugmentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// How the windows are divided into train/val/test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Random,
    Chronological,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Historical window length L (the model input spans L+1 steps).
    pub l: usize,
    /// Forecast horizon in 30-minute steps (1..=4).
    pub horizon_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    /// Learning rate decays tenfold every this many epochs.
    pub lr_decay_every: usize,
    /// L2 regularization coefficient.
    pub lambda: f64,
    /// Early-stop patience in epochs; `None` disables early stopping.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
    pub ablation: Ablation,
    pub split: SplitKind,
    /// Checked mode scans every op output for NaN/Inf (slow; test use).
    pub checked: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l: 12,
            horizon_steps: 1,
            batch_size: 32,
            epochs: 50,
            lr0: 1e-4,
            lr_decay_every: 2,
            lambda: 1.5e-3,
            early_stop_patience: Some(5),
            seed: 1,
            ablation: Ablation::Full,
            split: SplitKind::Random,
            checked: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if self.l < 1 {
            return fail(format!("window length L must be >= 1, got {}", self.l));
        }
        if !(1..=4).contains(&self.horizon_steps) {
            return fail(format!(
                "horizon must be 1..=4 steps (30..=120 minutes), got {}",
                self.horizon_steps
            ));
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if self.epochs < 1 {
            return fail("epochs must be >= 1".into());
        }
        if !(self.lr0 > 0.0) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.lr_decay_every < 1 {
            return fail("lr_decay_every must be >= 1".into());
        }
        if self.lambda < 0.0 {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Step-decay schedule: `lr0 * 10^(-floor(epoch / decay_every))`, floored at
/// 1e-8.
pub fn lr_at(epoch: usize, lr0: f64, decay_every: usize) -> f64 {
    let k = (epoch / decay_every.max(1)) as i32;
    (lr0 * 10f64.powi(-k)).max(1e-8)
}

/// Training objective on plain values: MSE plus `lambda` times the store's
/// weight-squared sum.
pub fn loss_value<T: Scalar>(
    y: &Tensor<f64>,
    y_hat: &Tensor<f64>,
    store: &ParameterStore<T>,
    lambda: f64,
) -> Result<f64, MetricsError> {
    if y.shape() != y_hat.shape() {
        return Err(MetricsError::ShapeMismatch { truth: y.len(), predicted: y_hat.len() });
    }
    if y.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = y.len() as f64;
    let sq: f64 =
        y.data().iter().zip(y_hat.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(sq / n + lambda * store.l2_penalty().to_f64_lossless())
}

/// Early-stop bookkeeping on validation loss.
struct EarlyStop {
    patience: Option<usize>,
    best: f64,
    best_epoch: usize,
}

impl EarlyStop {
    fn new(patience: Option<usize>) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0 }
    }

    /// Record this epoch's loss; returns true when the epoch improved the
    /// best value.
    fn observe(&mut self, epoch: usize, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    fn should_stop(&self, epoch: usize) -> bool {
        match self.patience {
            Some(p) => epoch - self.best_epoch >= p,
            None => false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Number of epochs actually run.
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub test_metrics: MetricsReport,
    pub seed: u64,
    pub wall_seconds: f64,
    pub ablation: String,
    pub horizon_steps: usize,
}

/// Predictions with their ground truth and (window start, horizon step,
/// station) coordinates, pooled in iteration order.
#[derive(Debug, Clone, Default)]
pub struct PredOutput {
    pub y_true: Vec<f64>,
    pub y_pred: Vec<f64>,
    pub coords: Vec<(usize, usize, usize)>,
}

/// Architecture knobs split from the schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// GCN hidden widths; the default is `[64, 64, d_model]`.
    pub gcn_hidden: Option<Vec<usize>>,
    pub informer: InformerConfig,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { gcn_hidden: None, informer: InformerConfig::default() }
    }
}

/// Everything needed to run forward passes over one dataset/graph pair.
pub struct Pipeline<T: Scalar> {
    pub cfg: TrainConfig,
    pub model: AstGin,
    /// Same architecture with dropout off, used for all prediction paths.
    eval_model: AstGin,
    a_hat: Tensor<T>,
    n_stations: usize,
}

impl<T: Scalar> Pipeline<T> {
    pub fn new(
        cfg: TrainConfig,
        arch: &ArchConfig,
        graph: &StationGraph,
        windows: &WindowSet,
        alpha: Option<&StaticAttributes>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if graph.n_stations() != windows.n_stations {
            return Err(TrainError::InvalidConfig(format!(
                "graph has {} stations but windows cover {}",
                graph.n_stations(),
                windows.n_stations
            )));
        }
        if windows.m != cfg.horizon_steps || windows.l != cfg.l {
            return Err(TrainError::InvalidConfig(format!(
                "windows were built with L={} M={}, config wants L={} M={}",
                windows.l, windows.m, cfg.l, cfg.horizon_steps
            )));
        }
        let selection = cfg.ablation.attribute_selection();
        if selection.use_static && alpha.is_none() {
            return Err(TrainError::InvalidConfig(format!(
                "ablation {} needs static attributes",
                cfg.ablation.name()
            )));
        }
        let p = if selection.use_static { alpha.map_or(0, |a| a.n_categories()) } else { 0 };
        let w = if selection.use_dynamic { windows.w } else { 0 };
        let k = crate::a2unit::feature_width(p, w, cfg.l);
        let model = AstGin::new(cfg.ablation, k, arch.gcn_hidden.clone(), arch.informer.clone())?;
        let mut eval_model = model.clone();
        eval_model.informer.dropout = 0.0;
        Ok(Self {
            cfg,
            model,
            eval_model,
            a_hat: graph.normalized.cast(),
            n_stations: windows.n_stations,
        })
    }

    /// Fresh parameter store seeded from the config.
    pub fn init_store(&self) -> ParameterStore<T> {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x696e6974);
        self.model.register_params(&mut store, &mut rng);
        store
    }

    fn selection(&self) -> AttributeSelection {
        self.cfg.ablation.attribute_selection()
    }

    fn new_graph(&self) -> Graph<T> {
        if self.cfg.checked {
            Graph::checked()
        } else {
            Graph::new()
        }
    }

    /// Assemble `[B, S, N, K]` features and `[B, M, N]` targets for a batch
    /// of window indices. `x_override` substitutes per-sample availability
    /// windows (perturbation analysis).
    fn batch_tensors(
        &self,
        windows: &WindowSet,
        alpha: Option<&StaticAttributes>,
        idx: &[usize],
        x_override: Option<&BTreeMap<usize, Tensor<f64>>>,
    ) -> Result<(Tensor<T>, Tensor<T>), TrainError> {
        let selection = self.selection();
        let steps = self.cfg.l + 1;
        let (n, k, m) = (self.n_stations, self.model.in_dim, self.cfg.horizon_steps);
        let mut e = Tensor::<T>::zeros([idx.len(), steps, n, k]);
        let mut y = Tensor::<T>::zeros([idx.len(), m, n]);
        let alpha_matrix = if selection.use_static { alpha.map(|a| &a.alpha) } else { None };
        for (bi, &si) in idx.iter().enumerate() {
            let sample: &WindowSample = &windows.samples[si];
            let x = match x_override.and_then(|o| o.get(&si)) {
                Some(x) => x,
                None => &sample.x,
            };
            let beta = if selection.use_dynamic && windows.w > 0 { Some(&sample.beta) } else { None };
            let e_one = augment(x, alpha_matrix, beta)?;
            let e_size = steps * n * k;
            for (dst, src) in e.data_mut()[bi * e_size..(bi + 1) * e_size]
                .iter_mut()
                .zip(e_one.data())
            {
                *dst = T::from_f64_lossy(*src);
            }
            let y_size = m * n;
            for (dst, src) in
                y.data_mut()[bi * y_size..(bi + 1) * y_size].iter_mut().zip(sample.y.data())
            {
                *dst = T::from_f64_lossy(*src);
            }
        }
        Ok((e, y))
    }

    /// Forward a set of windows in batch-size chunks; raw (unclamped)
    /// predictions.
    pub fn predict(
        &self,
        store: &ParameterStore<T>,
        windows: &WindowSet,
        alpha: Option<&StaticAttributes>,
        idx: &[usize],
    ) -> Result<PredOutput, TrainError> {
        self.predict_with_override(store, windows, alpha, idx, None)
    }

    fn predict_with_override(
        &self,
        store: &ParameterStore<T>,
        windows: &WindowSet,
        alpha: Option<&StaticAttributes>,
        idx: &[usize],
        x_override: Option<&BTreeMap<usize, Tensor<f64>>>,
    ) -> Result<PredOutput, TrainError> {
        let mut out = PredOutput::default();
        let (m, n) = (self.cfg.horizon_steps, self.n_stations);
        for chunk in idx.chunks(self.cfg.batch_size.max(1)) {
            let (e, y) = self.batch_tensors(windows, alpha, chunk, x_override)?;
            let mut g = self.new_graph();
            let params = BoundParams::bind(&mut g, store)?;
            let e_var = g.constant(e)?;
            let a_var = g.constant(self.a_hat.clone())?;
            let pred = self.eval_model.forward_batch(&mut g, e_var, a_var, m, &params, 0, None)?;
            let pred_val = g.value(pred);
            for (bi, &si) in chunk.iter().enumerate() {
                let start = windows.samples[si].start;
                for j in 0..m {
                    for station in 0..n {
                        out.y_pred.push(pred_val.at3(bi, j, station).to_f64_lossless());
                        out.y_true
                            .push(y.at3(bi, j, station).to_f64_lossless());
                        out.coords.push((start, j, station));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Minibatch Adam over the train split with per-epoch validation loss,
    /// early stopping, and best-epoch parameter restore. Returns the trained
    /// store and the report (test metrics included).
    pub fn train(
        &self,
        windows: &WindowSet,
        alpha: Option<&StaticAttributes>,
        split: &SplitIndices,
    ) -> Result<(ParameterStore<T>, TrainReport), TrainError> {
        if split.train.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        if split.val.is_empty() {
            return Err(TrainError::EmptySplit("val"));
        }
        let started = Instant::now();
        let mut store = self.init_store();
        let adam = AdamConfig::default();
        let lambda = T::from_f64_lossy(self.cfg.lambda);
        let mut stopper = EarlyStop::new(self.cfg.early_stop_patience);
        let mut best_snapshot = store.values_snapshot();
        let mut train_losses = Vec::new();
        let mut val_losses = Vec::new();
        let mut epochs_run = 0;

        for epoch in 0..self.cfg.epochs {
            epochs_run = epoch + 1;
            let lr = lr_at(epoch, self.cfg.lr0, self.cfg.lr_decay_every);
            let mut order = split.train.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_shuffle_seed(self.cfg.seed, epoch));
            order.shuffle(&mut rng);

            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for (batch_idx, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
                let (e, y) = self.batch_tensors(windows, alpha, chunk, None)?;
                let mut g = self.new_graph();
                let params = BoundParams::bind(&mut g, &store)?;
                let e_var = g.constant(e)?;
                let a_var = g.constant(self.a_hat.clone())?;
                let seed = self.cfg.seed ^ ((epoch as u64) << 20) ^ batch_idx as u64;
                let pred =
                    self.model.forward_batch(&mut g, e_var, a_var, self.cfg.horizon_steps, &params, seed, None)?;
                let y_var = g.constant(y)?;
                let data_loss = g.mse(pred, y_var)?;
                let mut total = data_loss;
                if self.cfg.lambda > 0.0 {
                    let mut reg: Option<crate::nncore::Var> = None;
                    for w in params.weight_vars() {
                        let sq = g.mul(w, w)?;
                        let s = g.sum(sq)?;
                        reg = Some(match reg {
                            Some(acc) => g.add(acc, s)?,
                            None => s,
                        });
                    }
                    if let Some(reg) = reg {
                        let scaled = g.scale(reg, lambda)?;
                        total = g.add(total, scaled)?;
                    }
                }
                let loss_scalar = g.value(total).item().to_f64_lossless();
                if !loss_scalar.is_finite() {
                    return Err(TrainError::Diverged { epoch, batch: batch_idx });
                }
                epoch_loss += loss_scalar;
                batches += 1;
                g.backward(total)?;
                let grads = params.gradients(&g)?;
                store.adam_step(&grads, lr, adam).map_err(|e| match e {
                    NnError::NonFinite { .. } => TrainError::Diverged { epoch, batch: batch_idx },
                    other => TrainError::Nn(other),
                })?;
            }
            train_losses.push(epoch_loss / batches.max(1) as f64);

            let val = self.predict(&store, windows, alpha, &split.val)?;
            let val_loss = mean_squared(&val.y_true, &val.y_pred);
            if !val_loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: usize::MAX });
            }
            val_losses.push(val_loss);
            if stopper.observe(epoch, val_loss) {
                best_snapshot = store.values_snapshot();
            }
            if stopper.should_stop(epoch) {
                break;
            }
        }

        store.restore_snapshot(&best_snapshot);
        let test_metrics = if split.test.is_empty() {
            return Err(TrainError::EmptySplit("test"));
        } else {
            let (metrics, _) = self.evaluate(&store, windows, alpha, &split.test)?;
            metrics
        };
        let report = TrainReport {
            epochs: epochs_run,
            best_epoch: stopper.best_epoch,
            train_loss: train_losses,
            val_loss: val_losses,
            test_metrics,
            seed: self.cfg.seed,
            wall_seconds: started.elapsed().as_secs_f64(),
            ablation: self.cfg.ablation.name().to_string(),
            horizon_steps: self.cfg.horizon_steps,
        };
        Ok((store, report))
    }

    /// Pooled metrics over a split, on raw (unclamped) predictions.
    pub fn evaluate(
        &self,
        store: &ParameterStore<T>,
        windows: &WindowSet,
        alpha: Option<&StaticAttributes>,
        idx: &[usize],
    ) -> Result<(MetricsReport, PredOutput), TrainError> {
        if idx.is_empty() {
            return Err(TrainError::EmptySplit("test"));
        }
        let pred = self.predict(store, windows, alpha, idx)?;
        let metrics = metrics::report(&pred.y_true, &pred.y_pred)?;
        Ok((metrics, pred))
    }

    /// Re-evaluate with availability inputs perturbed by clamped Gaussian
    /// noise per sigma; attributes and targets stay untouched.
    pub fn perturb_eval(
        &self,
        store: &ParameterStore<T>,
        windows: &WindowSet,
        alpha: Option<&StaticAttributes>,
        idx: &[usize],
        sigmas: &[f64],
        seed: u64,
    ) -> Result<Vec<(f64, MetricsReport)>, TrainError> {
        let mut out = Vec::with_capacity(sigmas.len());
        for (k, &sigma) in sigmas.iter().enumerate() {
            if sigma < 0.0 {
                return Err(TrainError::InvalidConfig(format!("negative sigma {sigma}")));
            }
            let metrics = if sigma == 0.0 {
                self.evaluate(store, windows, alpha, idx)?.0
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
                let noise = Normal::new(0.0, sigma).expect("sigma checked nonnegative");
                let mut override_map = BTreeMap::new();
                for &si in idx {
                    let mut x = windows.samples[si].x.clone();
                    for v in x.data_mut() {
                        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    }
                    override_map.insert(si, x);
                }
                let pred =
                    self.predict_with_override(store, windows, alpha, idx, Some(&override_map))?;
                metrics::report(&pred.y_true, &pred.y_pred)?
            };
            out.push((sigma, metrics));
        }
        Ok(out)
    }

    /// Forecast the M steps after the end of the series from its last
    /// window; returns raw `[M, N]` predictions as f64.
    pub fn forecast(
        &self,
        store: &ParameterStore<T>,
        avail: &crate::ingest::AvailabilitySeries,
        alpha: Option<&StaticAttributes>,
        beta: Option<&crate::ingest::DynamicAttributes>,
    ) -> Result<Tensor<f64>, TrainError> {
        let t = avail.grid.count();
        let steps = self.cfg.l + 1;
        if t < steps {
            return Err(TrainError::Ingest(IngestError::SeriesTooShort {
                t,
                required: steps,
            }));
        }
        let n = avail.n_stations();
        let start = t - steps;
        let mut x = Tensor::zeros([steps, n]);
        for s in 0..steps {
            for si in 0..n {
                x.set2(s, si, avail.value(si, start + s));
            }
        }
        let selection = self.selection();
        let w = beta.map_or(0, |b| b.w);
        let beta_window = if selection.use_dynamic && w > 0 {
            let b = beta.expect("w > 0 implies beta");
            let mut bw = Tensor::zeros([steps, n, w]);
            for s in 0..steps {
                for si in 0..n {
                    for wi in 0..w {
                        bw.set3(s, si, wi, b.beta.at3(si, wi, start + s));
                    }
                }
            }
            Some(bw)
        } else {
            None
        };
        let alpha_matrix = if selection.use_static { alpha.map(|a| &a.alpha) } else { None };
        let e = augment(&x, alpha_matrix, beta_window.as_ref())?;

        let mut g = self.new_graph();
        let params = BoundParams::bind(&mut g, store)?;
        let e_shaped = e.cast::<T>().reshaped(vec![1, steps, n, self.model.in_dim]);
        let e_var = g.constant(e_shaped)?;
        let a_var = g.constant(self.a_hat.clone())?;
        let pred = self
            .eval_model
            .forward_batch(&mut g, e_var, a_var, self.cfg.horizon_steps, &params, 0, None)?;
        let v = g.value(pred).cast::<f64>();
        Ok(v.reshaped(vec![self.cfg.horizon_steps, n]))
    }

    /// Attention maps for the first window of `idx` (debug dump).
    pub fn attention_maps(
        &self,
        store: &ParameterStore<T>,
        windows: &WindowSet,
        alpha: Option<&StaticAttributes>,
        idx: usize,
    ) -> Result<Vec<(String, Tensor<f64>, Option<Vec<usize>>)>, TrainError> {
        let (e, _) = self.batch_tensors(windows, alpha, &[idx], None)?;
        let mut g = self.new_graph();
        let params = BoundParams::bind(&mut g, store)?;
        let e_var = g.constant(e)?;
        let a_var = g.constant(self.a_hat.clone())?;
        let mut trace = AttentionTrace::default();
        self.eval_model.forward_batch(
            &mut g,
            e_var,
            a_var,
            self.cfg.horizon_steps,
            &params,
            0,
            Some(&mut trace),
        )?;
        Ok(trace
            .entries
            .into_iter()
            .map(|(name, var, selected)| (name, g.value(var).cast::<f64>(), selected))
            .collect())
    }
}

fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ 0x7368_7566_666c_6500 ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn mean_squared(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Persistence predictor: repeat the last observed input step M times.
/// Returns pooled (truth, prediction) vectors over `idx`.
pub fn persistence_predictions(windows: &WindowSet, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (l, m, n) = (windows.l, windows.m, windows.n_stations);
    let mut y_true = Vec::with_capacity(idx.len() * m * n);
    let mut y_pred = Vec::with_capacity(idx.len() * m * n);
    for &si in idx {
        let sample = &windows.samples[si];
        for j in 0..m {
            for station in 0..n {
                y_true.push(sample.y.at2(j, station));
                y_pred.push(sample.x.at2(l, station));
            }
        }
    }
    (y_true, y_pred)
}

/// Historical-average predictor: the train-split target mean per station and
/// time-of-day slot, with a station-mean fallback for unseen slots.
pub fn historical_average_predictions(
    windows: &WindowSet,
    train_idx: &[usize],
    test_idx: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let (l, m, n) = (windows.l, windows.m, windows.n_stations);
    let slots = crate::ingest::STEPS_PER_DAY;
    let mut sums = vec![0.0f64; n * slots];
    let mut counts = vec![0usize; n * slots];
    let mut station_sum = vec![0.0f64; n];
    let mut station_count = vec![0usize; n];
    for &si in train_idx {
        let sample = &windows.samples[si];
        for j in 0..m {
            let slot = windows.grid.time_of_day_slot(sample.target_step(l, j));
            for station in 0..n {
                let v = sample.y.at2(j, station);
                sums[station * slots + slot] += v;
                counts[station * slots + slot] += 1;
                station_sum[station] += v;
                station_count[station] += 1;
            }
        }
    }
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    for &si in test_idx {
        let sample = &windows.samples[si];
        for j in 0..m {
            let slot = windows.grid.time_of_day_slot(sample.target_step(l, j));
            for station in 0..n {
                y_true.push(sample.y.at2(j, station));
                let cell = station * slots + slot;
                let pred = if counts[cell] > 0 {
                    sums[cell] / counts[cell] as f64
                } else if station_count[station] > 0 {
                    station_sum[station] / station_count[station] as f64
                } else {
                    0.5
                };
                y_pred.push(pred);
            }
        }
    }
    (y_true, y_pred)
}

/// Naive reference predictors over the test split, each with the full
/// five-metric report.
pub fn baselines(
    windows: &WindowSet,
    split: &SplitIndices,
) -> Result<BTreeMap<&'static str, MetricsReport>, TrainError> {
    if split.test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    if split.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let (y_true, y_pred) = persistence_predictions(windows, &split.test);
    let persistence = metrics::report(&y_true, &y_pred)?;
    let (y_true, y_pred) = historical_average_predictions(windows, &split.train, &split.test);
    let historical = metrics::report(&y_true, &y_pred)?;
    Ok(BTreeMap::from([("persistence", persistence), ("historical_average", historical)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{
        make_windows, parse_timestamp_minutes, split_indices, AvailabilitySeries,
        DynamicAttributes, TimeGrid, SPLIT_RATIOS,
    };
    use crate::nncore::ParamKind;

    fn series_with_pattern(n: usize, t: usize, f: impl Fn(usize, usize) -> f64) -> AvailabilitySeries {
        let origin = parse_timestamp_minutes("2018-03-05 00:00").unwrap();
        AvailabilitySeries {
            grid: TimeGrid::new(origin, t).unwrap(),
            station_ids: (0..n).map(|i| format!("S{i}")).collect(),
            connector_counts: vec![1; n],
            values: Tensor::from_fn([n, t], |flat| f(flat / t, flat % t)),
        }
    }

    fn micro_dataset(n: usize, t: usize) -> (StationGraph, WindowSet, StaticAttributes) {
        let avail = series_with_pattern(n, t, |si, k| {
            0.5 + 0.3 * ((k as f64) * 0.4 + si as f64).sin() * 0.9
        });
        let beta = DynamicAttributes {
            grid: avail.grid,
            station_ids: avail.station_ids.clone(),
            beta: Tensor::from_fn([n, 1, t], |flat| if (flat % t) % 8 < 4 { 0.0 } else { 0.5 }),
            w: 1,
        };
        let alpha = crate::ingest::encode_poi(
            &avail
                .station_ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), crate::ingest::POI_CATEGORIES[i % 8].to_string()))
                .collect(),
            &avail.station_ids,
        )
        .unwrap();
        let windows = make_windows(&avail, Some(&beta), 3, 1).unwrap();
        let coords: Vec<(f64, f64)> =
            (0..n).map(|i| (56.46 + 0.01 * i as f64, -2.97 - 0.01 * i as f64)).collect();
        // explicit sigma: with two stations the distance spread is zero
        let graph =
            StationGraph::from_coords(avail.station_ids.clone(), coords, Some(2000.0), None)
                .unwrap();
        (graph, windows, alpha)
    }

    fn micro_arch() -> ArchConfig {
        ArchConfig {
            gcn_hidden: Some(vec![8, 8]),
            informer: InformerConfig {
                d_model: 8,
                n_heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                d_ff: 16,
                ..InformerConfig::default()
            },
        }
    }

    fn micro_cfg() -> TrainConfig {
        TrainConfig {
            l: 3,
            horizon_steps: 1,
            batch_size: 8,
            epochs: 2,
            lr0: 1e-3,
            lr_decay_every: 100,
            lambda: 1e-4,
            early_stop_patience: None,
            seed: 11,
            ablation: Ablation::Full,
            split: SplitKind::Random,
            checked: true,
        }
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at(0, 1e-4, 2), 1e-4);
        assert_eq!(lr_at(1, 1e-4, 2), 1e-4);
        assert_eq!(lr_at(2, 1e-4, 2), 1e-5);
        assert_eq!(lr_at(40, 1e-4, 2), 1e-8);
    }

    #[test]
    fn loss_value_examples() {
        let store = ParameterStore::<f64>::new();
        let y = Tensor::from_vec(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(loss_value(&y, &y, &store, 0.0).unwrap(), 0.0);

        let y_hat = y.map(|v| v + 0.1);
        let l = loss_value(&y, &y_hat, &store, 0.0).unwrap();
        assert!((l - 0.01).abs() < 1e-15, "{l}");

        let mut store = ParameterStore::<f64>::new();
        store.register("w", Tensor::from_vec(vec![1, 1], vec![2.0]), ParamKind::Weight);
        let with_reg = loss_value(&y, &y_hat, &store, 1.0).unwrap();
        assert!((with_reg - l - 4.0).abs() < 1e-12, "{with_reg}");
    }

    #[test]
    fn loss_is_lambda_monotone() {
        let mut store = ParameterStore::<f64>::new();
        store.register("w", Tensor::from_vec(vec![2], vec![0.3, -1.2]), ParamKind::Weight);
        let y = Tensor::from_vec(vec![2], vec![0.5, 0.5]);
        let y_hat = Tensor::from_vec(vec![2], vec![0.4, 0.7]);
        let mut last = -1.0;
        for lambda in [0.0, 1e-3, 1e-2, 1.0] {
            let l = loss_value(&y, &y_hat, &store, lambda).unwrap();
            assert!(l >= last);
            last = l;
        }
    }

    #[test]
    fn early_stop_patience_arithmetic() {
        // strictly decreasing: never stops
        let mut s = EarlyStop::new(Some(5));
        for epoch in 0..50 {
            s.observe(epoch, 1.0 / (epoch + 1) as f64);
            assert!(!s.should_stop(epoch));
        }
        // flat after epoch 3: stops at epoch 8 with best at 3
        let mut s = EarlyStop::new(Some(5));
        let losses = [1.0, 0.9, 0.8, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7];
        let mut stopped_at = None;
        for (epoch, &v) in losses.iter().enumerate() {
            s.observe(epoch, v);
            if s.should_stop(epoch) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(8));
        assert_eq!(s.best_epoch, 3);
        // disabled patience never stops
        let mut s = EarlyStop::new(None);
        for epoch in 0..100 {
            s.observe(epoch, 1.0);
            assert!(!s.should_stop(epoch));
        }
    }

    #[test]
    fn single_adam_step_decreases_single_sample_loss() {
        let (graph, windows, alpha) = micro_dataset(2, 20);
        let cfg = TrainConfig { lambda: 0.0, ..micro_cfg() };
        let pipe = Pipeline::<f64>::new(cfg, &micro_arch(), &graph, &windows, Some(&alpha)).unwrap();
        let mut store = pipe.init_store();

        let idx = [0usize];
        let before = pipe.predict(&store, &windows, Some(&alpha), &idx).unwrap();
        let loss_before = mean_squared(&before.y_true, &before.y_pred);

        // one Adam step at tiny lr on that same sample
        let (e, y) = pipe.batch_tensors(&windows, Some(&alpha), &idx, None).unwrap();
        let mut g = Graph::<f64>::checked();
        let params = BoundParams::bind(&mut g, &store).unwrap();
        let e_var = g.constant(e).unwrap();
        let a_var = g.constant(pipe.a_hat.clone()).unwrap();
        let pred = pipe.model.forward_batch(&mut g, e_var, a_var, 1, &params, 0, None).unwrap();
        let y_var = g.constant(y).unwrap();
        let loss = g.mse(pred, y_var).unwrap();
        g.backward(loss).unwrap();
        let grads = params.gradients(&g).unwrap();
        store.adam_step(&grads, 1e-6, AdamConfig::default()).unwrap();

        let after = pipe.predict(&store, &windows, Some(&alpha), &idx).unwrap();
        let loss_after = mean_squared(&after.y_true, &after.y_pred);
        assert!(
            loss_after < loss_before,
            "loss did not decrease: {loss_before} -> {loss_after}"
        );
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (graph, windows, alpha) = micro_dataset(2, 30);
        let split = split_indices(windows.samples.len(), SPLIT_RATIOS, 5).unwrap();
        let run = || {
            let pipe =
                Pipeline::<f64>::new(micro_cfg(), &micro_arch(), &graph, &windows, Some(&alpha))
                    .unwrap();
            let (store, report) = pipe.train(&windows, Some(&alpha), &split).unwrap();
            let values: Vec<Vec<f64>> =
                store.iter().map(|(_, t, _)| t.data().to_vec()).collect();
            (values, report.val_loss, report.test_metrics)
        };
        let (va, la, ma) = run();
        let (vb, lb, mb) = run();
        assert_eq!(va, vb, "parameter trajectories differ");
        assert_eq!(la, lb);
        assert_eq!(ma, mb);
    }

    #[test]
    fn no_attributes_ablation_ignores_attribute_inputs() {
        let (graph, windows, alpha) = micro_dataset(3, 25);
        let cfg = TrainConfig { ablation: Ablation::NoAttributes, ..micro_cfg() };
        let pipe = Pipeline::<f64>::new(cfg, &micro_arch(), &graph, &windows, Some(&alpha)).unwrap();
        let store = pipe.init_store();
        let idx: Vec<usize> = (0..5).collect();
        let base = pipe.predict(&store, &windows, Some(&alpha), &idx).unwrap();

        // scramble alpha entirely; beta is scrambled through the window set
        let scrambled_alpha = StaticAttributes {
            station_ids: alpha.station_ids.clone(),
            alpha: alpha.alpha.map(|v| 1.0 - v),
        };
        let mut scrambled_windows = windows.clone();
        for s in &mut scrambled_windows.samples {
            s.beta = s.beta.map(|v| 1.0 - v);
        }
        let other = pipe
            .predict(&store, &scrambled_windows, Some(&scrambled_alpha), &idx)
            .unwrap();
        assert_eq!(base.y_pred, other.y_pred);
    }

    #[test]
    fn persistence_is_exact_on_constant_series() {
        let avail = series_with_pattern(2, 12, |_, _| 0.75);
        let windows = make_windows(&avail, None, 3, 2).unwrap();
        let idx: Vec<usize> = (0..windows.samples.len()).collect();
        let (y_true, y_pred) = persistence_predictions(&windows, &idx);
        assert_eq!(metrics::rmse(&y_true, &y_pred).unwrap(), 0.0);
    }

    #[test]
    fn historical_average_is_exact_on_daily_periodic_series() {
        use crate::ingest::STEPS_PER_DAY;
        // three full noiseless days of a daily-periodic pattern
        let avail = series_with_pattern(2, 3 * STEPS_PER_DAY, |si, k| {
            0.5 + 0.25 * ((2.0 * std::f64::consts::PI * (k % STEPS_PER_DAY) as f64
                / STEPS_PER_DAY as f64)
                + si as f64)
                .sin()
        });
        let windows = make_windows(&avail, None, 3, 1).unwrap();
        let n_samples = windows.samples.len();
        // chronological: first two days train, last day test
        let split = crate::ingest::split_indices_chronological(n_samples, SPLIT_RATIOS).unwrap();
        let (y_true, y_pred) =
            historical_average_predictions(&windows, &split.train, &split.test);
        let rmse = metrics::rmse(&y_true, &y_pred).unwrap();
        assert!(rmse < 1e-12, "periodic series should be predicted exactly, rmse {rmse}");
    }

    #[test]
    fn baselines_report_all_five_metrics() {
        let (_, windows, _) = micro_dataset(2, 30);
        let split = split_indices(windows.samples.len(), SPLIT_RATIOS, 2).unwrap();
        let reports = baselines(&windows, &split).unwrap();
        assert_eq!(reports.len(), 2);
        for (name, r) in reports {
            assert!(r.rmse >= 0.0 && r.mae >= 0.0, "{name}");
            assert!(r.rmse >= r.mae);
            assert!(r.n_points > 0);
        }
    }

    #[test]
    fn perturb_with_zero_sigma_matches_evaluate() {
        let (graph, windows, alpha) = micro_dataset(2, 25);
        let pipe =
            Pipeline::<f64>::new(micro_cfg(), &micro_arch(), &graph, &windows, Some(&alpha))
                .unwrap();
        let store = pipe.init_store();
        let idx: Vec<usize> = (0..6).collect();
        let (eval, _) = pipe.evaluate(&store, &windows, Some(&alpha), &idx).unwrap();
        let perturbed = pipe
            .perturb_eval(&store, &windows, Some(&alpha), &idx, &[0.0], 99)
            .unwrap();
        assert_eq!(perturbed[0].1, eval);
    }

    #[test]
    fn perturb_is_deterministic_under_seed() {
        let (graph, windows, alpha) = micro_dataset(2, 25);
        let pipe =
            Pipeline::<f64>::new(micro_cfg(), &micro_arch(), &graph, &windows, Some(&alpha))
                .unwrap();
        let store = pipe.init_store();
        let idx: Vec<usize> = (0..6).collect();
        let a = pipe.perturb_eval(&store, &windows, Some(&alpha), &idx, &[0.05], 7).unwrap();
        let b = pipe.perturb_eval(&store, &windows, Some(&alpha), &idx, &[0.05], 7).unwrap();
        assert_eq!(a[0].1, b[0].1);
        let c = pipe.perturb_eval(&store, &windows, Some(&alpha), &idx, &[0.05], 8).unwrap();
        assert_ne!(a[0].1, c[0].1);
    }

    #[test]
    fn forecast_shape_and_clamp_free_range() {
        let (graph, windows, alpha) = micro_dataset(2, 25);
        let avail = series_with_pattern(2, 25, |si, k| {
            0.5 + 0.3 * ((k as f64) * 0.4 + si as f64).sin() * 0.9
        });
        let beta = DynamicAttributes {
            grid: avail.grid,
            station_ids: avail.station_ids.clone(),
            beta: Tensor::from_fn([2, 1, 25], |flat| if (flat % 25) % 8 < 4 { 0.0 } else { 0.5 }),
            w: 1,
        };
        let pipe =
            Pipeline::<f64>::new(micro_cfg(), &micro_arch(), &graph, &windows, Some(&alpha))
                .unwrap();
        let store = pipe.init_store();
        let pred = pipe.forecast(&store, &avail, Some(&alpha), Some(&beta)).unwrap();
        assert_eq!(pred.shape(), &[1, 2]);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad = TrainConfig { horizon_steps: 5, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lr0: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lambda: -0.1, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { l: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn train_report_fields_are_consistent() {
        let (graph, windows, alpha) = micro_dataset(2, 30);
        let split = split_indices(windows.samples.len(), SPLIT_RATIOS, 3).unwrap();
        let pipe =
            Pipeline::<f64>::new(micro_cfg(), &micro_arch(), &graph, &windows, Some(&alpha))
                .unwrap();
        let (_, report) = pipe.train(&windows, Some(&alpha), &split).unwrap();
        assert_eq!(report.epochs, 2);
        assert!(report.best_epoch < report.epochs);
        assert_eq!(report.train_loss.len(), 2);
        assert_eq!(report.val_loss.len(), 2);
        assert_eq!(report.ablation, "full");
        assert!(report.wall_seconds >= 0.0);
        // serialized key names are pinned
        let json = serde_json::to_value(&report).unwrap();
        for key in ["epochs", "val_loss", "test_metrics", "seed", "wall_seconds"] {
            assert!(json.get(key).is_some(), "missing key {key}");
        }
        for key in ["rmse", "r2", "var", "mae", "accuracy"] {
            assert!(json["test_metrics"].get(key).is_some(), "missing metric key {key}");
        }
    }
}
