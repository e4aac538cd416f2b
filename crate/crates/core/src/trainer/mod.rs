//! Minibatch training with Adam, a stepped learning rate and early stopping.

mod config;
mod data;
mod log;

use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

pub use config::{TrainConfig, TRAIN_KEYS};
pub use data::{Batch, Prepared, Split, TrainingData};
pub use log::{EpochRecord, LossParts, StopReason, TrainLog, LOG_COLUMNS};

use crate::autodiff::{BatchStats, Graph, TensorError, Var};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::mnf::{DenseLayer, LayerNoise, MnfDenseLayer, Parameterized};
use crate::model::{
    mse_loss, physics_loss, regression_loss, total_loss_graph, DnnBaseline, EluqNetwork, ForwardMode, Layer,
    LossWeights, Network, TargetScaler, TargetTransform,
};
use crate::rng::stream;
use crate::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: u64, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A failed run: the error plus the best state reached before it.
#[derive(Debug)]
pub struct TrainFailure<T, L> {
    pub error: TrainError,
    pub last_good: Option<Checkpoint<T, L>>,
    pub log: TrainLog,
}

impl<T, L> std::fmt::Display for TrainFailure<T, L> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl<T: std::fmt::Debug, L: std::fmt::Debug> std::error::Error for TrainFailure<T, L> {}

#[derive(Debug, Clone)]
pub struct FitOutput<T, L> {
    /// Parameters of the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint<T, L>,
    pub log: TrainLog,
}

/// Losses and clamp activity of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub losses: LossParts,
    pub clamp_active: f64,
}

/// A network, its optimizer and the loss configuration.
#[derive(Debug, Clone)]
pub struct Trainer<T, L> {
    pub network: Network<T, L>,
    pub optimizer: crate::optim::Adam<T>,
    pub weights: LossWeights,
    pub target_scaler: TargetScaler,
}

struct Objective<'g, T> {
    total: Var<'g, T>,
    parts: LossParts,
    s_raw: Option<Var<'g, T>>,
    stats: Vec<BatchStats<T>>,
}

impl<T: Real, L: Layer<T>> Trainer<T, L> {
    pub fn new(network: Network<T, L>, target_scaler: TargetScaler, weights: LossWeights, lr: f64) -> Self {
        Self {
            network,
            optimizer: crate::optim::Adam::new(lr),
            weights,
            target_scaler,
        }
    }

    fn objective<'g>(
        &self,
        g: &'g Graph<T>,
        vars: &[Var<'g, T>],
        batch: &Batch<T>,
        noise: &[LayerNoise<T>],
        train: bool,
    ) -> Result<Objective<'g, T>, TensorError> {
        let mode = ForwardMode {
            train,
            with_kl: L::BAYESIAN && self.weights.beta > 0.0,
        };
        let out = self.network.forward_bound(g, vars, &batch.x, noise, mode)?;
        let v = g.constant(batch.v.clone());
        let reg = match out.s {
            Some(s) => regression_loss(out.v_hat, s, v)?,
            None => mse_loss(out.v_hat, v)?,
        };
        let phys = match self.target_scaler.transform {
            TargetTransform::Log10 => Some(physics_loss(out.v_hat, &self.target_scaler, &batch.ln_s)?),
            TargetTransform::Identity => None,
        };
        let total = total_loss_graph(reg, phys, out.kl, &self.weights)?;
        let parts = LossParts {
            total: total.item().as_f64(),
            reg: reg.item().as_f64(),
            phys: phys.map_or(0.0, |p| p.item().as_f64()),
            kl: out.kl.map_or(0.0, |k| k.item().as_f64()),
        };
        Ok(Objective {
            total,
            parts,
            s_raw: out.s_raw,
            stats: out.bn_stats,
        })
    }

    /// One gradient step on `batch` with the given layer noise.
    pub fn step(&mut self, batch: &Batch<T>, noise: &[LayerNoise<T>]) -> Result<StepReport, TensorError> {
        let (grads, losses, clamp_active, stats) = {
            let g = Graph::new();
            let vars = self.network.bind(&g, false);
            let obj = self.objective(&g, &vars, batch, noise, true)?;
            if !obj.parts.total.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "total_loss",
                    index: 0,
                });
            }
            obj.total.backward()?;
            let grads = g.param_grads();
            if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: "gradient",
                    index: i,
                });
            }
            let clamp = obj
                .s_raw
                .map_or(0.0, |s| self.network.clamp.active_fraction(s.value().data()));
            (grads, obj.parts, clamp, obj.stats)
        };
        self.optimizer.step(self.network.params_mut(), &grads)?;
        self.network.update_running_stats(&stats);
        Ok(StepReport {
            losses,
            clamp_active,
        })
    }

    /// Losses without updating anything (running batch-norm statistics).
    pub fn evaluate(&self, batch: &Batch<T>, noise: &[LayerNoise<T>]) -> Result<LossParts, TensorError> {
        let g = Graph::new();
        let vars = self.network.bind(&g, true);
        Ok(self.objective(&g, &vars, batch, noise, false)?.parts)
    }
}

fn checkpoint_of<T: Real, L: Layer<T>>(
    net: &Network<T, L>,
    prepared: &Prepared,
    cfg: &TrainConfig,
    split: &Split,
    data: &TrainingData,
    meta: CheckpointMeta,
) -> Checkpoint<T, L> {
    Checkpoint {
        network: net.clone(),
        feature_scaler: prepared.feature_scaler.clone(),
        target_scaler: prepared.target_scaler.clone(),
        train_config: cfg.clone(),
        split: split.clone(),
        meta,
        provenance: data.provenance.clone(),
    }
}

/// Wraps `network` as-is with scalers fitted on the training split that
/// `cfg` would use; no optimisation step is taken.
pub fn untrained<T: Real, L: Layer<T>>(network: Network<T, L>, data: &TrainingData, cfg: &TrainConfig) -> Checkpoint<T, L> {
    let split = Split::new(data.len(), cfg.split, cfg.seed);
    let prepared = Prepared::fit(data, &split.train);
    checkpoint_of(&network, &prepared, cfg, &split, data, CheckpointMeta::default())
}

/// Validation losses: fixed noise per batch, running batch-norm statistics.
/// The KL is evaluated once and normalized like in training.
fn validate<T: Real, L: Layer<T>>(
    trainer: &Trainer<T, L>,
    prepared: &Prepared,
    val: &[usize],
    cfg: &TrainConfig,
) -> Result<LossParts, TensorError> {
    let mut acc = LossParts::default();
    let mut kl = 0.0;
    for (k, chunk) in val.chunks(cfg.batch_size).enumerate() {
        let batch = prepared.batch::<T>(chunk);
        let noise = trainer
            .network
            .draw_noise(chunk.len(), &mut stream(cfg.seed, "val-noise", k as u64));
        let parts = trainer.evaluate(&batch, &noise)?;
        if k == 0 {
            kl = parts.kl;
        }
        acc.add_scaled(&parts, chunk.len() as f64 / val.len() as f64);
    }
    acc.kl = kl;
    acc.total = trainer.weights.scalar(acc.reg, acc.phys, kl);
    Ok(acc)
}

/// Trains `network` on `data` following `cfg`; `fit` and `fit_baseline` are
/// thin wrappers.
pub fn train<T: Real, L: Layer<T>>(
    network: Network<T, L>,
    data: &TrainingData,
    cfg: &TrainConfig,
) -> Result<FitOutput<T, L>, TrainFailure<T, L>> {
    let fail = |error: TrainError| TrainFailure {
        error,
        last_good: None,
        log: TrainLog::new(),
    };
    cfg.validate().map_err(|e| fail(TrainError::Config(e.to_string())))?;
    if data.len() < 10 * cfg.batch_size {
        return Err(fail(TrainError::Data(format!(
            "{} events, need at least 10 x batch size = {}",
            data.len(),
            10 * cfg.batch_size
        ))));
    }
    if network.topology().input != data.dim || network.topology().output != 3 {
        return Err(fail(TrainError::Data(format!(
            "network topology {} does not fit {} features and 3 targets",
            network.topology(),
            data.dim
        ))));
    }

    let split = Split::new(data.len(), cfg.split, cfg.seed);
    let prepared = Prepared::fit(data, &split.train);
    let batches = split.train.len().div_ceil(cfg.batch_size);
    let weights = LossWeights {
        alpha: cfg.alpha,
        beta: cfg.beta,
        batches_per_epoch: batches,
    };
    let mut trainer = Trainer::new(network, prepared.target_scaler.clone(), weights, cfg.initial_lr);
    let mut log = TrainLog::new();
    let mut best = checkpoint_of(
        &trainer.network,
        &prepared,
        cfg,
        &split,
        data,
        CheckpointMeta {
            epoch: 0,
            val_loss: None,
            steps: 0,
        },
    );
    let mut best_val = f64::INFINITY;
    let mut reference = f64::INFINITY;
    let mut stale = 0usize;
    let mut steps = 0u64;
    let mut order = split.train.clone();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        trainer.optimizer.lr = lr;
        order.copy_from_slice(&split.train);
        order.shuffle(&mut stream(cfg.seed, "shuffle", epoch as u64));

        let mut train_acc = LossParts::default();
        let mut clamp = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = prepared.batch::<T>(chunk);
            let noise = trainer.network.draw_noise(chunk.len(), &mut stream(cfg.seed, "noise", steps));
            let report = match trainer.step(&batch, &noise) {
                Ok(r) => r,
                Err(e) => {
                    let error = match e {
                        TensorError::NonFinite { .. } | TensorError::Domain { .. } => TrainError::Diverged {
                            epoch,
                            step: steps,
                            detail: e.to_string(),
                        },
                        other => TrainError::Tensor(other),
                    };
                    log.stop = Some(StopReason::Diverged);
                    return Err(TrainFailure {
                        error,
                        last_good: Some(best),
                        log,
                    });
                }
            };
            steps += 1;
            let w = chunk.len() as f64 / order.len() as f64;
            train_acc.add_scaled(&report.losses, w);
            clamp += w * report.clamp_active;
        }

        let val = match validate(&trainer, &prepared, &split.val, cfg) {
            Ok(v) if v.total.is_finite() => v,
            Ok(_) | Err(_) => {
                log.stop = Some(StopReason::Diverged);
                return Err(TrainFailure {
                    error: TrainError::Diverged {
                        epoch,
                        step: steps,
                        detail: "validation loss is not finite".into(),
                    },
                    last_good: Some(best),
                    log,
                });
            }
        };
        log.records.push(EpochRecord {
            epoch,
            lr,
            train: train_acc,
            val,
            clamp_active: clamp,
            wall_seconds: started.elapsed().as_secs_f64(),
        });

        if val.total < best_val {
            best_val = val.total;
            log.best_epoch = Some(epoch);
            best = checkpoint_of(
                &trainer.network,
                &prepared,
                cfg,
                &split,
                data,
                CheckpointMeta {
                    epoch,
                    val_loss: Some(val.total),
                    steps,
                },
            );
        }
        if val.total < reference - cfg.min_delta {
            reference = val.total;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log.stop = Some(StopReason::Plateau);
                break;
            }
        }
    }
    if log.stop.is_none() {
        log.stop = Some(StopReason::MaxEpochs);
    }
    Ok(FitOutput { checkpoint: best, log })
}

/// Trains the Bayesian network with the full three-term loss.
pub fn fit<T: Real>(
    model: EluqNetwork<T>,
    data: &TrainingData,
    cfg: &TrainConfig,
) -> Result<FitOutput<T, MnfDenseLayer<T>>, TrainFailure<T, MnfDenseLayer<T>>> {
    train(model, data, cfg)
}

/// Trains the deterministic baseline; the KL weight is forced to zero.
pub fn fit_baseline<T: Real>(
    dnn: DnnBaseline<T>,
    data: &TrainingData,
    cfg: &TrainConfig,
) -> Result<FitOutput<T, DenseLayer<T>>, TrainFailure<T, DenseLayer<T>>> {
    let cfg = TrainConfig { beta: 0.0, ..cfg.clone() };
    train(dnn, data, &cfg)
}
