//! The outer trajectory-matching loop.

pub mod synthetic;

pub use synthetic::{init_synthetic, LabelMode, SyntheticDataset};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::datakit::export_distilled;
use crate::diffnet::{hypergrad, unroll_inner, Dtype, Mat, Network, ParamVector};
use crate::exec::{derive_seed, rng_from};
use crate::trajstore::{spec_digest, MatchingRangeSchedule, Trajectory};
use crate::{Error, Result};

/// Smallest inner learning rate kept after an update.
pub const ALPHA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Inner SGD steps per iteration (N).
    pub inner_steps: usize,
    /// Expert epochs between start and target (M).
    pub expert_gap: usize,
    pub schedule: MatchingRangeSchedule,
    pub iterations: usize,
    /// Synthetic rows per inner step; `≥ rows` means full batch.
    pub syn_batch: usize,
    pub ipc: usize,
    pub label_mode: LabelMode,
    pub lr_images: f64,
    pub momentum_images: f64,
    pub lr_labels: f64,
    pub lr_alpha: f64,
    /// Learn one inner rate per step instead of a shared one.
    pub per_step_alpha: bool,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub precision: Dtype,
}

impl DistillConfig {
    pub fn validate(&self, expert_epochs: usize) -> Result<()> {
        if self.inner_steps == 0 || self.expert_gap == 0 || self.iterations == 0 {
            return Err(Error::Validation("N, M and iterations must all be ≥ 1".into()));
        }
        if self.ipc == 0 {
            return Err(Error::Validation("ipc must be ≥ 1".into()));
        }
        for (name, v) in [
            ("lr_images", self.lr_images),
            ("lr_labels", self.lr_labels),
            ("lr_alpha", self.lr_alpha),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum_images) {
            return Err(Error::Validation(format!(
                "momentum_images must be in [0, 1), got {}",
                self.momentum_images
            )));
        }
        self.schedule.validate(expert_epochs, self.expert_gap)
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub matching_loss: f64,
    pub t: usize,
    /// Floating bound in effect.
    pub bound: usize,
    /// α after the update.
    pub alpha: f64,
    pub grad_norm_images: f64,
    pub grad_norm_labels: f64,
    pub grad_norm_alpha: f64,
    pub expert: usize,
    /// The sampled expert pair was degenerate and nothing was updated.
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "iteration,matching_loss,t,T,alpha,grad_norm_images,grad_norm_labels,grad_norm_alpha,expert,skipped\n",
        );
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.matching_loss,
                r.t,
                r.bound,
                r.alpha,
                r.grad_norm_images,
                r.grad_norm_labels,
                r.grad_norm_alpha,
                r.expert,
                u8::from(r.skipped)
            )
            .unwrap();
        }
        s
    }

    /// Mean matching loss over non-skipped records in `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let v: Vec<f64> = self.records[range]
            .iter()
            .filter(|r| !r.skipped)
            .map(|r| r.matching_loss)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// `‖end − target‖² / ‖start − target‖²`.
pub fn matching_loss(theta_end: &ParamVector, theta_target: &ParamVector, theta_start: &ParamVector) -> Result<f64> {
    let p = theta_target.len();
    if theta_end.len() != p || theta_start.len() != p {
        return Err(Error::Shape(format!(
            "matching loss on vectors of length {}, {p}, {}",
            theta_end.len(),
            theta_start.len()
        )));
    }
    let denom = theta_start.dist_sq(theta_target);
    if denom == 0.0 {
        return Err(Error::DegeneratePair);
    }
    Ok(theta_end.dist_sq(theta_target) / denom)
}

/// Momentum buffer of the image optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterState {
    pub image_velocity: Mat,
}

impl OuterState {
    pub fn new(syn: &SyntheticDataset) -> Self {
        let (r, c) = syn.images().shape();
        Self {
            image_velocity: Mat::zeros(r, c),
        }
    }
}

fn norm(m: &Mat) -> f64 {
    m.norm_sq().sqrt()
}

/// Sample a segment, unroll from its start, and move the synthetic set along
/// the hypergradient of the matching loss.
#[allow(clippy::too_many_arguments)]
pub fn distill_step<R: Rng + ?Sized>(
    syn: &mut SyntheticDataset,
    state: &mut OuterState,
    traj: &Trajectory,
    expert: usize,
    net: &Network,
    cfg: &DistillConfig,
    iteration: usize,
    rng: &mut R,
) -> Result<MetricsRecord> {
    let bound = cfg.schedule.bound(iteration);
    let t = cfg.schedule.sample_start(iteration, rng);
    let (start, target) = traj.get_pair(t, cfg.expert_gap)?;
    let mut record = MetricsRecord {
        iteration,
        matching_loss: 0.0,
        t,
        bound,
        alpha: syn.alpha(),
        grad_norm_images: 0.0,
        grad_norm_labels: 0.0,
        grad_norm_alpha: 0.0,
        expert,
        skipped: false,
    };
    let denom = start.dist_sq(&target);
    if denom == 0.0 {
        log::warn!(
            "iteration {iteration}: expert {expert} is stalled between epochs {t} and {}",
            t + cfg.expert_gap
        );
        record.skipped = true;
        return Ok(record);
    }

    let data = syn.inner_data(cfg.syn_batch);
    let (end, tape) = unroll_inner(&start, &data, cfg.inner_steps, net, rng)?;
    record.matching_loss = matching_loss(&end, &target, &start)?;
    let d_outer = ParamVector::new(
        end.as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(e, g)| 2.0 * (e - g) / denom)
            .collect(),
        Dtype::Double,
    );
    let hg = hypergrad(&tape, &d_outer, &data, net)?;
    if !hg.images.is_finite() || !hg.alpha.is_finite() || hg.label_logits.as_ref().is_some_and(|l| !l.is_finite()) {
        return Err(Error::Divergence {
            stage: "outer iteration",
            index: iteration,
        });
    }
    record.grad_norm_images = norm(&hg.images);
    record.grad_norm_labels = hg.label_logits.as_ref().map_or(0.0, norm);
    record.grad_norm_alpha = match syn.step_alpha {
        Some(_) => hg.alpha_steps.iter().map(|g| g * g).sum::<f64>().sqrt(),
        None => hg.alpha.abs(),
    };

    let mu = cfg.momentum_images;
    for (v, g) in state.image_velocity.as_mut_slice().iter_mut().zip(hg.images.as_slice()) {
        *v = mu * *v + g;
    }
    if cfg.lr_images != 0.0 {
        for (x, v) in syn
            .images
            .as_mut_slice()
            .iter_mut()
            .zip(state.image_velocity.as_slice())
        {
            *x -= cfg.lr_images * v;
        }
    }
    if let (Some(logits), Some(g)) = (syn.label_logits.as_mut(), hg.label_logits.as_ref()) {
        if cfg.lr_labels != 0.0 {
            for (l, gi) in logits.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *l -= cfg.lr_labels * gi;
            }
        }
    }
    if cfg.lr_alpha != 0.0 {
        match syn.step_alpha.as_mut() {
            Some(rates) => {
                for (a, g) in rates.iter_mut().zip(&hg.alpha_steps) {
                    *a = (*a - cfg.lr_alpha * g).max(ALPHA_FLOOR);
                }
                syn.alpha = rates.iter().sum::<f64>() / rates.len() as f64;
            }
            None => syn.alpha = (syn.alpha - cfg.lr_alpha * hg.alpha).max(ALPHA_FLOOR),
        }
    }
    syn.round_to_precision();
    if !syn.images.is_finite() || syn.label_logits.as_ref().is_some_and(|l| !l.is_finite()) {
        return Err(Error::Divergence {
            stage: "outer iteration",
            index: iteration,
        });
    }
    record.alpha = syn.alpha;
    Ok(record)
}

/// Write `ckpt_<iteration>/` under `root` via a temporary sibling and a rename.
pub fn write_checkpoint(root: &Path, iteration: usize, syn: &SyntheticDataset, log: &MetricsLog) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let dest = root.join(format!("ckpt_{iteration}"));
    let tmp = root.join(format!(".ckpt_{iteration}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    export_distilled(&tmp, syn)?;
    let csv = tmp.join("metrics.csv");
    fs::write(&csv, log.to_csv()).map_err(|e| Error::io(&csv, e))?;
    if dest.exists() {
        fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
    }
    fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
    Ok(dest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub initial: SyntheticDataset,
    pub syn: SyntheticDataset,
    pub log: MetricsLog,
}

/// Run `cfg.iterations` steps from `initial`, drawing one expert per
/// iteration uniformly from `experts`. Checkpoints go to `checkpoints` when
/// given.
pub fn run_distillation(
    initial: SyntheticDataset,
    experts: &[Trajectory],
    net: &Network,
    cfg: &DistillConfig,
    checkpoints: Option<&Path>,
) -> Result<DistillOutcome> {
    if experts.is_empty() {
        return Err(Error::Validation("expert pool is empty".into()));
    }
    let digest = spec_digest(net.spec());
    let epochs = experts.iter().map(Trajectory::epochs).min().unwrap_or(0);
    for (k, e) in experts.iter().enumerate() {
        e.validate()?;
        if e.meta.spec_digest != digest {
            return Err(Error::Validation(format!(
                "expert {k} was trained with a different network spec"
            )));
        }
    }
    cfg.validate(epochs)?;
    if initial.ipc() != cfg.ipc || initial.mode() != cfg.label_mode {
        return Err(Error::Validation(format!(
            "synthetic set is {} ipc {}, config asks for {} ipc {}",
            initial.mode(),
            initial.ipc(),
            cfg.label_mode,
            cfg.ipc
        )));
    }
    let initial = match (cfg.per_step_alpha, initial.step_alphas()) {
        (true, None) => {
            let a = initial.alpha();
            initial.with_step_alphas(vec![a; cfg.inner_steps])?
        }
        (true, Some(r)) if r.len() != cfg.inner_steps => {
            return Err(Error::Validation(format!(
                "synthetic set has {} per-step rates, config asks for N = {}",
                r.len(),
                cfg.inner_steps
            )))
        }
        (false, Some(_)) => {
            return Err(Error::Validation(
                "synthetic set has per-step rates but per_step_alpha is off".into(),
            ))
        }
        _ => initial,
    };
    let mut syn = initial.clone();
    let mut state = OuterState::new(&syn);
    let mut rng = rng_from(derive_seed(cfg.seed, 100));
    let mut log = MetricsLog::default();
    for it in 0..cfg.iterations {
        let k = rng.random_range(0..experts.len());
        let rec = distill_step(&mut syn, &mut state, &experts[k], k, net, cfg, it, &mut rng)?;
        log.records.push(rec);
        let done = it + 1;
        if let Some(root) = checkpoints {
            if done == cfg.iterations || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
                write_checkpoint(root, done, &syn, &log)?;
            }
        }
    }
    Ok(DistillOutcome { initial, syn, log })
}
