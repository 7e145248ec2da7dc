//! Optimization loop.
//!
//! Each batch runs one forward pass and builds a single step objective:
//!
//! ```text
//! recon_weight * R  [+ CAD term of the Min phase]  [+ CAD term of the Max phase]  [+ contrastive]
//! ```
//!
//! Summing the phase losses and back-propagating once yields exactly the
//! gradients of `backward(loss_min)` followed by `backward(loss_max)` on an
//! accumulating tape. With both phases on, the reconstruction term would be
//! counted twice; `halve_recon` (default) keeps its weight at one.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sliding_windows, NormStats, TimeSeries, WindowBatch};
use crate::error::{AmadError, Result};
use crate::graph::Graph;
use crate::model::{init_params, model_forward, AmadParams, ModelConfig, ParamSet};
use crate::objective::{contrastive_loss, maxmin_losses, recon_term};
use crate::tensor::Tensor;

/// Optimization hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau: f64,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of training windows (the final ones) held out for
    /// validation.
    pub val_fraction: f64,
    pub train_stride: usize,
    pub enable_min: bool,
    pub enable_max: bool,
    pub enable_contrastive: bool,
    pub enable_automask: bool,
    pub halve_recon: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 3.0,
            tau: 0.07,
            lr: 0.02,
            lr_decay: 0.5,
            batch_size: 16,
            max_epochs: 10,
            patience: 3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_fraction: 0.2,
            train_stride: 1,
            enable_min: true,
            enable_max: true,
            enable_contrastive: true,
            enable_automask: true,
            halve_recon: true,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Published settings: batch 256, otherwise the defaults.
    pub fn published() -> Self {
        TrainConfig {
            batch_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(AmadError::Config(m));
        if !(self.lambda > 0.0) {
            return fail(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!(
                "lr {} must be positive and lr_decay {} in (0, 1]",
                self.lr, self.lr_decay
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if self.batch_size == 0 || (self.enable_contrastive && self.batch_size < 2) {
            return fail(format!(
                "batch size {} too small (contrastive training needs at least 2)",
                self.batch_size
            ));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.train_stride == 0 {
            return fail("max_epochs, patience and train_stride must be positive".into());
        }
        if !self.enable_automask && (self.enable_min || self.enable_max || self.enable_contrastive) {
            return fail(
                "Min/Max/contrastive strategies need the AutoMask branch enabled".into(),
            );
        }
        Ok(())
    }

    /// Learning rate used during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * libm::pow(self.lr_decay, epoch as f64)
    }

    fn uses_cad(&self) -> bool {
        self.enable_min || self.enable_max
    }

    fn recon_weight(&self) -> f64 {
        let phases = self.enable_min as usize + self.enable_max as usize;
        if self.halve_recon || phases == 0 {
            1.0
        } else {
            phases as f64
        }
    }
}

/// Mean per-batch loss components for one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub cad_l1: f64,
    pub contrastive: f64,
    pub total_min: f64,
    pub total_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub val_recon: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Forward passes in which CAD was computed.
    pub cad_evaluations: u64,
    /// Forward passes in which the contrastive loss was computed.
    pub contrastive_evaluations: u64,
}

/// Weights plus the normalization fitted on the training series.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: AmadParams,
    pub norm: NormStats,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet<Tensor>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .entries()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `grads` follows the declaration order of `params`.
    pub fn step(&mut self, params: &mut ParamSet<Tensor>, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let names: Vec<String> = params.entries().into_iter().map(|(n, _)| n).collect();
        if grads.len() != names.len() {
            return Err(AmadError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                names.len()
            )));
        }
        for (name, g) in names.iter().zip(grads) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AmadError::Numeric(format!("non-finite gradient for {name}")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (((p, g), m), v) in params
            .values_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

/// Patience counter over validation losses.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, val: f64) -> StopDecision {
        if val < self.best {
            self.best = val;
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

/// Loss values and gradients of one batch.
pub struct StepResult {
    pub losses: LossBreakdown,
    pub objective: f64,
    pub grads: Vec<Vec<f64>>,
    pub used_cad: bool,
    pub used_contrastive: bool,
}

/// Builds the step objective on a fresh tape and back-propagates it.
pub fn step_gradients(params: &AmadParams, batch: &Tensor, tcfg: &TrainConfig) -> Result<StepResult> {
    let cfg = &params.config;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(batch);
    let fwd = model_forward(&mut g, cfg, &bound, x)?;
    let b = batch.shape()[0] as f64;
    let mut losses = LossBreakdown::default();

    let (recon, phase_terms) = if tcfg.uses_cad() {
        let mm = maxmin_losses(&mut g, x, &fwd, tcfg.lambda)?;
        losses.total_min = g.scalar(mm.min);
        losses.total_max = g.scalar(mm.max);
        let cad_l1 = g.value(mm.cad).iter().sum::<f64>() / b;
        losses.cad_l1 = cad_l1;
        let mut terms = Vec::new();
        if tcfg.enable_min {
            terms.push(mm.min_cad_term);
        }
        if tcfg.enable_max {
            terms.push(mm.max_cad_term);
        }
        (mm.recon, terms)
    } else {
        let r = recon_term(&mut g, x, fwd.recon)?;
        losses.total_min = g.scalar(r);
        losses.total_max = g.scalar(r);
        (r, Vec::new())
    };
    losses.recon = g.scalar(recon);

    let mut objective = g.scale(recon, tcfg.recon_weight());
    for t in phase_terms {
        objective = g.add(objective, t)?;
    }
    if tcfg.enable_contrastive {
        let c = contrastive_loss(&mut g, &fwd.attn, tcfg.tau)?;
        losses.contrastive = g.scalar(c);
        objective = g.add(objective, c)?;
    }
    let value = g.scalar(objective);
    if !value.is_finite() {
        return Err(AmadError::Numeric(format!("non-finite training loss {value}")));
    }
    g.backward(objective)?;
    let grads = bound
        .weights
        .entries()
        .into_iter()
        .map(|(_, &v)| g.grad(v).expect("parameters are trainable").to_vec())
        .collect();
    Ok(StepResult {
        losses,
        objective: value,
        grads,
        used_cad: tcfg.uses_cad(),
        used_contrastive: tcfg.enable_contrastive,
    })
}

/// Mean squared reconstruction error per window.
pub fn reconstruction_error(params: &AmadParams, windows: &WindowBatch, indices: &[usize], batch: usize) -> Result<f64> {
    if indices.is_empty() {
        return Err(AmadError::Data("no windows to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in indices.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.constant(&windows.gather(chunk));
        let fwd = model_forward(&mut g, &params.config, &bound, x)?;
        let r = recon_term(&mut g, x, fwd.recon)?;
        total += g.scalar(r) * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Trains a model on `train` (raw values; normalization is fitted here).
///
/// Returns the parameters of the epoch with the best validation
/// reconstruction error.
pub fn fit(train: &TimeSeries, cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<(TrainedModel, TrainLog)> {
    tcfg.validate()?;
    let cfg = ModelConfig {
        automask: tcfg.enable_automask,
        ..cfg.clone()
    };
    cfg.validate()?;
    if train.dims() != cfg.input_dim {
        return Err(AmadError::Data(format!(
            "model expects {} channels, training series has {}",
            cfg.input_dim,
            train.dims()
        )));
    }
    let norm = NormStats::fit(train)?;
    let normalized = norm.normalize(train)?;
    let windows = sliding_windows(&normalized, cfg.window_len, tcfg.train_stride)?;
    let count = windows.count();
    let n_val = libm::floor(count as f64 * tcfg.val_fraction) as usize;
    let n_train = count - n_val;
    let min_batch = if tcfg.enable_contrastive { 2 } else { 1 };
    if n_train < min_batch {
        return Err(AmadError::Data(format!(
            "only {n_train} training windows after the validation split"
        )));
    }
    let val_idx: Vec<usize> = (n_train..count).collect();
    let mut train_idx: Vec<usize> = (0..n_train).collect();

    let mut params = init_params(&cfg, cfg.seed)?;
    let mut adam = Adam::new(&params.weights, tcfg.beta1, tcfg.beta2, tcfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut stopper = EarlyStopping::new(tcfg.patience);
    let mut best = params.clone();
    let mut log = TrainLog::default();

    for epoch in 0..tcfg.max_epochs {
        let lr = tcfg.lr_at(epoch);
        train_idx.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in train_idx.chunks(tcfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let batch = windows.gather(chunk);
            let step = step_gradients(&params, &batch, tcfg)?;
            log.cad_evaluations += step.used_cad as u64;
            log.contrastive_evaluations += step.used_contrastive as u64;
            adam.step(&mut params.weights, &step.grads, lr)?;
            if !params.is_finite() {
                return Err(AmadError::Numeric(format!("weights diverged in epoch {epoch}")));
            }
            sums.recon += step.losses.recon;
            sums.cad_l1 += step.losses.cad_l1;
            sums.contrastive += step.losses.contrastive;
            sums.total_min += step.losses.total_min;
            sums.total_max += step.losses.total_max;
            batches += 1;
        }
        let k = batches.max(1) as f64;
        let losses = LossBreakdown {
            recon: sums.recon / k,
            cad_l1: sums.cad_l1 / k,
            contrastive: sums.contrastive / k,
            total_min: sums.total_min / k,
            total_max: sums.total_max / k,
        };
        let val_recon = if val_idx.is_empty() {
            losses.recon
        } else {
            reconstruction_error(&params, &windows, &val_idx, tcfg.batch_size)?
        };
        if !val_recon.is_finite() {
            return Err(AmadError::Numeric(format!("non-finite validation loss in epoch {epoch}")));
        }
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            losses,
            val_recon,
            lr,
        });
        match stopper.observe(val_recon) {
            StopDecision::Improved => {
                best = params.clone();
                log.best_epoch = epoch + 1;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok((TrainedModel { params: best, norm }, log))
}
