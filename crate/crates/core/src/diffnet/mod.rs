//! Differentiable small-network core.
//!
//! Forward passes, cross-entropy losses and first-order gradients, plus exact
//! hypergradients through an unrolled run of inner SGD steps (see [`unroll`]).

pub mod graph;
pub mod mat;
pub mod network;
pub mod unroll;

pub use mat::Mat;
pub use network::{argmax, Activation, Dtype, InputShape, LayerSpec, Network, NetworkSpec, ParamVector};
pub use unroll::{hypergrad, unroll_inner, HyperGrads, InnerData, InnerLabels, UnrollTape};

use graph::{Graph, Var};

use crate::{Error, Result};

/// Tolerance on soft-label row sums.
pub const SOFT_ROW_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// Class indices in `[0, C)`.
    Hard(Vec<usize>),
    /// Probability rows, one per sample.
    Soft(Mat),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Hard(v) => v.len(),
            Labels::Soft(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dense target matrix; hard labels become one-hot rows.
    pub fn to_targets(&self, classes: usize) -> Result<Mat> {
        match self {
            Labels::Hard(v) => {
                let mut t = Mat::zeros(v.len(), classes);
                for (r, &c) in v.iter().enumerate() {
                    if c >= classes {
                        return Err(Error::Validation(format!(
                            "label {c} at row {r} is outside [0, {classes})"
                        )));
                    }
                    t.set(r, c, 1.0);
                }
                Ok(t)
            }
            Labels::Soft(m) => {
                if m.cols() != classes {
                    return Err(Error::Shape(format!(
                        "soft labels have {} columns, expected {classes}",
                        m.cols()
                    )));
                }
                validate_soft_rows(m)?;
                Ok(m.clone())
            }
        }
    }
}

fn validate_soft_rows(m: &Mat) -> Result<()> {
    for r in 0..m.rows() {
        let row = m.row(r);
        if row.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::Validation(format!(
                "soft label row {r} has a negative or non-finite entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SOFT_ROW_TOL {
            return Err(Error::Validation(format!("soft label row {r} sums to {s}, not 1")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Mat,
    pub labels: Labels,
}

impl Batch {
    pub fn new(inputs: Mat, labels: Labels) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "batch has {} input rows but {} label rows",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Labels::Soft(m) = &labels {
            validate_soft_rows(m)?;
        }
        Ok(Self { inputs, labels })
    }

    pub fn hard(inputs: Mat, labels: Vec<usize>) -> Result<Self> {
        Self::new(inputs, Labels::Hard(labels))
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean soft cross-entropy `-(1/B) Σ T ⊙ log softmax(Z)` as a graph node.
pub(crate) fn cross_entropy_graph(g: &mut Graph, logits: Var, targets: Var) -> Var {
    let rows = g.value(logits).rows().max(1);
    let ls = g.log_softmax(logits);
    let total = g.dot(ls, targets);
    g.affine(total, -1.0 / rows as f64, 0.0)
}

pub fn forward(params: &ParamVector, batch: &Batch, net: &Network) -> Result<Mat> {
    let logits = net.logits(params, &batch.inputs)?;
    if !logits.is_finite() {
        return Err(Error::Numeric("forward pass produced non-finite logits".into()));
    }
    Ok(logits)
}

/// Mean cross-entropy between `softmax(logits)` and the labels. Hard labels
/// are treated as one-hot soft targets.
pub fn loss(logits: &Mat, labels: &Labels) -> Result<f64> {
    if logits.cols() < 2 {
        return Err(Error::Validation("loss needs at least 2 classes".into()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::Shape("loss: logits and labels disagree in row count".into()));
    }
    let targets = labels.to_targets(logits.cols())?;
    let ls = graph::log_softmax_rows(logits);
    let rows = logits.rows().max(1) as f64;
    Ok(-ls.dot(&targets) / rows)
}

/// Loss value and gradient with respect to the parameters.
pub fn loss_and_grad(params: &ParamVector, batch: &Batch, net: &Network) -> Result<(f64, ParamVector)> {
    net.check_params(params)?;
    net.check_inputs(&batch.inputs)?;
    let targets = batch.labels.to_targets(net.classes())?;
    let mut g = Graph::new();
    let theta = g.leaf(params.to_row());
    let x = g.leaf(batch.inputs.clone());
    let t = g.leaf(targets);
    let logits = net.forward_graph(&mut g, theta, x);
    let l = cross_entropy_graph(&mut g, logits, t);
    let gt = g.grad(l, &[theta])[0];
    let grad = ParamVector::new(g.value(gt).as_slice().to_vec(), Dtype::Double);
    if !grad.is_finite() || !g.scalar(l).is_finite() {
        return Err(Error::Numeric("gradient is non-finite".into()));
    }
    Ok((g.scalar(l), grad))
}

pub fn grad(params: &ParamVector, batch: &Batch, net: &Network) -> Result<ParamVector> {
    loss_and_grad(params, batch, net).map(|(_, g)| g)
}
