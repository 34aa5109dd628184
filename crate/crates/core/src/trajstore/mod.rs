//! Expert trajectories: training, buffers and start-epoch sampling.

pub mod buffer;
pub mod schedule;

pub use buffer::{decode_buffer, encode_buffer, read_buffer, write_buffer};
pub use schedule::MatchingRangeSchedule;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::datakit::Dataset;
use crate::diffnet::{loss_and_grad, Batch, Dtype, Labels, Mat, Network, NetworkSpec, ParamVector};
use crate::exec::{derive_seed, rng_from};
use crate::{Error, Result};

/// Hex SHA-256 of the canonical spec text.
pub fn spec_digest(spec: &NetworkSpec) -> String {
    hex::encode(Sha256::digest(spec.to_string().as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Validation(format!("learning rate must be ≥ 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Hyper-parameters and per-epoch metrics of an expert run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub spec: NetworkSpec,
    pub sgd: SgdConfig,
    /// Full-train-set loss after each epoch.
    pub epoch_loss: Vec<f64>,
    /// Full-train-set accuracy after each epoch.
    pub epoch_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryMeta {
    pub spec_digest: String,
    pub dataset_digest: String,
    pub seed: u64,
    pub epochs: usize,
    pub param_count: usize,
    pub dtype: Dtype,
}

/// Parameter snapshots `θ*_0 ..= θ*_n`, one per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    pub snapshots: Vec<ParamVector>,
    pub training: Option<TrainingRecord>,
}

impl Trajectory {
    pub fn epochs(&self) -> usize {
        self.meta.epochs
    }

    pub fn param_count(&self) -> usize {
        self.meta.param_count
    }

    pub fn validate(&self) -> Result<()> {
        if self.snapshots.len() != self.meta.epochs + 1 {
            return Err(Error::Validation(format!(
                "{} snapshots for {} epochs",
                self.snapshots.len(),
                self.meta.epochs
            )));
        }
        for (t, s) in self.snapshots.iter().enumerate() {
            if s.len() != self.meta.param_count || s.dtype() != self.meta.dtype {
                return Err(Error::Validation(format!(
                    "snapshot {t} has {} {} values, expected {} {}",
                    s.len(),
                    s.dtype(),
                    self.meta.param_count,
                    self.meta.dtype
                )));
            }
            if !s.is_finite() {
                return Err(Error::Numeric(format!("snapshot {t} is non-finite")));
            }
        }
        Ok(())
    }

    /// `(θ*_t, θ*_{t+m})` by value.
    pub fn get_pair(&self, t: usize, m: usize) -> Result<(ParamVector, ParamVector)> {
        let end = t
            .checked_add(m)
            .filter(|&e| e <= self.meta.epochs)
            .ok_or_else(|| Error::OutOfRange(format!("t + M = {t} + {m} exceeds {} epochs", self.meta.epochs)))?;
        Ok((self.snapshots[t].clone(), self.snapshots[end].clone()))
    }

    /// `‖θ*_t − θ*_{t+m}‖` for every `t ≤ n − m`.
    pub fn distance_profile(&self, m: usize) -> Result<Vec<f64>> {
        if m > self.meta.epochs {
            return Err(Error::OutOfRange(format!(
                "M = {m} exceeds {} epochs",
                self.meta.epochs
            )));
        }
        Ok((0..=self.meta.epochs - m)
            .map(|t| self.snapshots[t].dist_sq(&self.snapshots[t + m]).sqrt())
            .collect())
    }
}

/// Mini-batch SGD with heavy-ball momentum (`b ← μ·b + g`, `θ ← θ − lr·b`)
/// and a fresh shuffle per epoch. `on_epoch` sees the parameters after each
/// epoch; a non-finite state aborts with the epoch number (1-based).
pub(crate) fn train_sgd<R: Rng + ?Sized>(
    net: &Network,
    mut params: ParamVector,
    inputs: &Mat,
    labels: &[usize],
    cfg: &SgdConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(usize, &ParamVector) -> Result<()>,
) -> Result<ParamVector> {
    cfg.validate()?;
    let dtype = params.dtype();
    let rows = inputs.rows();
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..rows).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::new(
                inputs.select_rows(chunk),
                Labels::Hard(chunk.iter().map(|&r| labels[r]).collect()),
            )?;
            let (_, g) = loss_and_grad(&params, &batch, net).map_err(|e| match e {
                Error::Numeric(_) => Error::Divergence {
                    stage: "epoch",
                    index: epoch,
                },
                other => other,
            })?;
            let mut next = params.into_vec();
            for ((p, v), gi) in next.iter_mut().zip(velocity.iter_mut()).zip(g.as_slice()) {
                *v = cfg.momentum * *v + gi;
                *p -= cfg.lr * *v;
            }
            params = ParamVector::new(next, dtype);
            if !params.is_finite() {
                return Err(Error::Divergence {
                    stage: "epoch",
                    index: epoch,
                });
            }
        }
        on_epoch(epoch, &params)?;
    }
    Ok(params)
}

/// Train one expert from a seeded initialization, snapshotting after every
/// epoch.
pub fn train_expert(net: &Network, dataset: &Dataset, cfg: &SgdConfig, seed: u64, dtype: Dtype) -> Result<Trajectory> {
    if dataset.is_empty() {
        return Err(Error::Validation("expert training needs a nonempty dataset".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::Validation("expert training needs ≥ 1 epoch".into()));
    }
    net.check_inputs(&dataset.inputs)?;
    let init = net.init_params(&mut rng_from(derive_seed(seed, 0)), dtype);
    let mut snapshots = vec![init.clone()];
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut epoch_accuracy = Vec::with_capacity(cfg.epochs);
    let full = Labels::Hard(dataset.labels.clone());
    let mut rng = rng_from(derive_seed(seed, 1));
    train_sgd(
        net,
        init,
        &dataset.inputs,
        &dataset.labels,
        cfg,
        &mut rng,
        |epoch, p| {
            let logits = net.logits(p, &dataset.inputs)?;
            let l = crate::diffnet::loss(&logits, &full)?;
            if !l.is_finite() {
                return Err(Error::Divergence {
                    stage: "epoch",
                    index: epoch,
                });
            }
            epoch_loss.push(l);
            epoch_accuracy.push(net.accuracy(p, &dataset.inputs, &dataset.labels)?);
            snapshots.push(p.clone());
            Ok(())
        },
    )?;
    Ok(Trajectory {
        meta: TrajectoryMeta {
            spec_digest: spec_digest(net.spec()),
            dataset_digest: dataset.digest(),
            seed,
            epochs: cfg.epochs,
            param_count: net.param_count(),
            dtype,
        },
        snapshots,
        training: Some(TrainingRecord {
            spec: net.spec().clone(),
            sgd: *cfg,
            epoch_loss,
            epoch_accuracy,
        }),
    })
}
