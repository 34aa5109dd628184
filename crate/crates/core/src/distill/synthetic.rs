use std::fmt;
use std::str::FromStr;

use crate::datakit::{stratified_subset, Dataset, NormStats};
use crate::diffnet::graph::softmax_rows;
use crate::diffnet::{argmax, Dtype, InnerData, InnerLabels, InputShape, Mat, Network, ParamVector};
use crate::evalharness::default_labels;
use crate::exec::rng_from;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelMode {
    /// Fixed default-order class indices.
    Hard,
    /// Trainable logit rows.
    Soft,
}

impl FromStr for LabelMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hard" => Ok(LabelMode::Hard),
            "soft" => Ok(LabelMode::Soft),
            other => Err(format!("unknown label mode `{other}` (expected hard or soft)")),
        }
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::Hard => "hard",
            LabelMode::Soft => "soft",
        })
    }
}

/// Trainable synthetic set: `classes · ipc` class-major image rows, labels and
/// the inner learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub(crate) images: Mat,
    pub(crate) classes: usize,
    pub(crate) ipc: usize,
    pub(crate) mode: LabelMode,
    pub(crate) hard_labels: Vec<usize>,
    pub(crate) label_logits: Option<Mat>,
    pub(crate) alpha: f64,
    /// Per-step inner rates; `alpha` is then their mean.
    pub(crate) step_alpha: Option<Vec<f64>>,
    pub(crate) layout: InputShape,
    pub(crate) norm: Option<NormStats>,
    pub(crate) precision: Dtype,
}

impl SyntheticDataset {
    /// Assemble from parts, checking shapes only.
    ///
    /// Label order is not enforced here, so externally produced artifacts can be
    /// represented and audited.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        images: Mat,
        classes: usize,
        ipc: usize,
        hard_labels: Vec<usize>,
        label_logits: Option<Mat>,
        alpha: f64,
        layout: InputShape,
        norm: Option<NormStats>,
        precision: Dtype,
    ) -> Result<Self> {
        let rows = classes * ipc;
        if classes == 0 || ipc == 0 {
            return Err(Error::Validation("classes and ipc must be ≥ 1".into()));
        }
        if images.rows() != rows {
            return Err(Error::Shape(format!(
                "{} image rows, expected classes × ipc = {rows}",
                images.rows()
            )));
        }
        if images.cols() != layout.dim() {
            return Err(Error::Shape(format!(
                "images have {} columns, layout needs {}",
                images.cols(),
                layout.dim()
            )));
        }
        if hard_labels.len() != rows {
            return Err(Error::Shape(format!(
                "{} hard labels for {rows} rows",
                hard_labels.len()
            )));
        }
        if let Some(&bad) = hard_labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("label {bad} outside [0, {classes})")));
        }
        if let Some(l) = &label_logits {
            if l.shape() != (rows, classes) {
                return Err(Error::Shape(format!(
                    "label logits are {:?}, expected ({rows}, {classes})",
                    l.shape()
                )));
            }
            if !l.is_finite() {
                return Err(Error::Numeric("label logits are non-finite".into()));
            }
        }
        if !images.is_finite() {
            return Err(Error::Numeric("synthetic images are non-finite".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Validation(format!(
                "inner learning rate must be > 0, got {alpha}"
            )));
        }
        let mode = if label_logits.is_some() {
            LabelMode::Soft
        } else {
            LabelMode::Hard
        };
        Ok(Self {
            images,
            classes,
            ipc,
            mode,
            hard_labels,
            label_logits,
            alpha,
            step_alpha: None,
            layout,
            norm,
            precision,
        })
    }

    pub fn images(&self) -> &Mat {
        &self.images
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn rows(&self) -> usize {
        self.images.rows()
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn hard_labels(&self) -> &[usize] {
        &self.hard_labels
    }

    pub fn label_logits(&self) -> Option<&Mat> {
        self.label_logits.as_ref()
    }

    /// `softmax` of the label logits (soft mode only).
    pub fn soft_labels(&self) -> Option<Mat> {
        self.label_logits.as_ref().map(softmax_rows)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn step_alphas(&self) -> Option<&[f64]> {
        self.step_alpha.as_deref()
    }

    /// Switch to one inner rate per step.
    pub fn with_step_alphas(mut self, rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Validation("per-step rates need at least one step".into()));
        }
        if let Some(bad) = rates.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::Validation(format!("inner learning rate must be > 0, got {bad}")));
        }
        self.alpha = rates.iter().sum::<f64>() / rates.len() as f64;
        self.step_alpha = Some(rates);
        Ok(self)
    }

    pub fn layout(&self) -> InputShape {
        self.layout
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn precision(&self) -> Dtype {
        self.precision
    }

    /// Row view for the inner unroll.
    pub fn inner_data(&self, batch_size: usize) -> InnerData<'_> {
        InnerData {
            images: &self.images,
            labels: match &self.label_logits {
                Some(l) => InnerLabels::Soft(l),
                None => InnerLabels::Hard(&self.hard_labels),
            },
            alpha: self.alpha,
            step_alpha: self.step_alpha.as_deref(),
            batch_size,
        }
    }

    /// Round trainable state to the configured precision.
    pub(crate) fn round_to_precision(&mut self) {
        if self.precision == Dtype::Single {
            let p = self.precision;
            self.images.as_mut_slice().iter_mut().for_each(|v| *v = p.round(*v));
            if let Some(l) = self.label_logits.as_mut() {
                l.as_mut_slice().iter_mut().for_each(|v| *v = p.round(*v));
            }
            self.alpha = p.round(self.alpha);
            if let Some(a) = self.step_alpha.as_mut() {
                a.iter_mut().for_each(|v| *v = p.round(*v));
            }
        }
    }
}

/// Seed the synthetic set from real samples.
///
/// Hard mode draws `ipc` samples of each class. Soft mode draws only among
/// samples `pretrained` classifies correctly and uses its logits as the
/// initial label logits.
#[allow(clippy::too_many_arguments)]
pub fn init_synthetic(
    real: &Dataset,
    ipc: usize,
    mode: LabelMode,
    pretrained: Option<(&Network, &ParamVector)>,
    alpha: f64,
    precision: Dtype,
    seed: u64,
) -> Result<SyntheticDataset> {
    if ipc == 0 {
        return Err(Error::Validation("ipc must be ≥ 1".into()));
    }
    let mut rng = rng_from(seed);
    let (rows, logits) = match mode {
        LabelMode::Hard => (stratified_subset(real, ipc, &mut rng)?, None),
        LabelMode::Soft => {
            let (net, params) = pretrained
                .ok_or_else(|| Error::Validation("soft-label initialization needs a pretrained expert".into()))?;
            let all_logits = net.logits(params, &real.inputs)?;
            let correct: Vec<usize> = (0..real.len())
                .filter(|&r| argmax(all_logits.row(r)) == real.labels[r])
                .collect();
            let sub = Dataset {
                inputs: real.inputs.select_rows(&correct),
                labels: correct.iter().map(|&r| real.labels[r]).collect(),
                classes: real.classes,
                layout: real.layout,
                norm: None,
            };
            let picked = stratified_subset(&sub, ipc, &mut rng)?;
            let rows: Vec<usize> = picked.iter().map(|&i| correct[i]).collect();
            let logits = all_logits.select_rows(&rows);
            (rows, Some(logits))
        }
    };
    let mut syn = SyntheticDataset::from_parts(
        real.inputs.select_rows(&rows),
        real.classes,
        ipc,
        default_labels(real.classes, ipc),
        logits,
        alpha,
        real.layout,
        real.norm.clone(),
        precision,
    )?;
    syn.round_to_precision();
    Ok(syn)
}
