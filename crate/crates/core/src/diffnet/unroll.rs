//! Inner SGD unroll on synthetic data and its exact reverse pass.
//!
//! Forward: `θ_{i+1} = θ_i − α_i ∇ℓ(θ_i, batch_i)` for `N` steps, recording the
//! pre-step states and batch indices on an [`UnrollTape`]. `α_i` is the shared
//! rate unless per-step rates are supplied.
//!
//! Reverse: with adjoint `v = ∂L/∂θ_{i+1}`, each step contributes
//!
//! - `∂L/∂α_i = −⟨v, ∇ℓ(θ_i)⟩`
//! - `∂L/∂θ_i = v − α_i H_i v`
//! - `∂L/∂x  += −α_i ∂⟨v, ∇ℓ⟩/∂x` (and likewise for label logits),
//!
//! where the three second-order terms come from one reverse sweep over the
//! scalar `⟨v, ∇ℓ(θ_i)⟩`, recomputed from the tape.

use rand::seq::SliceRandom;
use rand::Rng;

use super::graph::{Graph, Var};
use super::mat::Mat;
use super::network::{Dtype, Network, ParamVector};
use super::{cross_entropy_graph, Labels};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum InnerLabels<'a> {
    /// Fixed class index per row.
    Hard(&'a [usize]),
    /// Trainable logit rows; targets are their row-wise softmax.
    Soft(&'a Mat),
}

/// Borrowed view of the synthetic set driving the inner loop.
#[derive(Debug, Clone, Copy)]
pub struct InnerData<'a> {
    pub images: &'a Mat,
    pub labels: InnerLabels<'a>,
    pub alpha: f64,
    /// One rate per inner step, overriding `alpha`.
    pub step_alpha: Option<&'a [f64]>,
    pub batch_size: usize,
}

impl InnerData<'_> {
    pub fn rows(&self) -> usize {
        self.images.rows()
    }

    fn is_soft(&self) -> bool {
        matches!(self.labels, InnerLabels::Soft(_))
    }

    fn validate(&self, net: &Network) -> Result<()> {
        net.check_inputs(self.images)?;
        let label_rows = match self.labels {
            InnerLabels::Hard(l) => {
                if let Some(&bad) = l.iter().find(|&&c| c >= net.classes()) {
                    return Err(Error::Validation(format!("label {bad} outside [0, {})", net.classes())));
                }
                l.len()
            }
            InnerLabels::Soft(m) => {
                if m.cols() != net.classes() {
                    return Err(Error::Shape(format!(
                        "label logits have {} columns, expected {}",
                        m.cols(),
                        net.classes()
                    )));
                }
                m.rows()
            }
        };
        if label_rows != self.rows() {
            return Err(Error::Shape(format!(
                "{} synthetic images but {label_rows} label rows",
                self.rows()
            )));
        }
        let mut rates = std::iter::once(&self.alpha).chain(self.step_alpha.into_iter().flatten());
        if let Some(bad) = rates.find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::Validation(format!("inner learning rate {bad} must be ≥ 0")));
        }
        Ok(())
    }

    fn rates(&self, steps: usize) -> Result<Vec<f64>> {
        match self.step_alpha {
            None => Ok(vec![self.alpha; steps]),
            Some(s) if s.len() == steps => Ok(s.to_vec()),
            Some(s) => Err(Error::Validation(format!(
                "{} per-step learning rates for {steps} inner steps",
                s.len()
            ))),
        }
    }
}

/// Record of an unrolled inner run, sufficient to recompute every state.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrollTape {
    theta_start: ParamVector,
    /// Parameters entering each step; `states[0] == theta_start`.
    states: Vec<ParamVector>,
    batches: Vec<Vec<usize>>,
    /// Rate used at each step.
    alphas: Vec<f64>,
    rows: usize,
    soft: bool,
}

impl UnrollTape {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn theta_start(&self) -> &ParamVector {
        &self.theta_start
    }

    /// Recompute the end state from the start and the recorded batches.
    pub fn replay(&self, data: &InnerData<'_>, net: &Network) -> Result<ParamVector> {
        self.check_matches(data)?;
        let (end, _) = unroll_fixed(&self.theta_start, data, &self.batches, net)?;
        Ok(end)
    }

    fn check_matches(&self, data: &InnerData<'_>) -> Result<()> {
        if data.rows() != self.rows {
            return Err(Error::Validation(format!(
                "tape was recorded on {} synthetic rows, got {}",
                self.rows,
                data.rows()
            )));
        }
        if data.is_soft() != self.soft {
            return Err(Error::Validation(
                "tape and synthetic data disagree on label mode".into(),
            ));
        }
        let rates = data.rates(self.batches.len())?;
        if rates.iter().zip(&self.alphas).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Validation(format!(
                "tape used α = {:?}, synthetic data has α = {rates:?}",
                self.alphas
            )));
        }
        Ok(())
    }
}

/// Row indices for each of `steps` inner steps.
///
/// A batch at least as large as the set uses every row each step. Otherwise
/// rows are drawn without replacement from a fresh shuffle per pass; the last
/// batch of a pass may be short.
pub fn batch_schedule<R: Rng + ?Sized>(rows: usize, batch_size: usize, steps: usize, rng: &mut R) -> Vec<Vec<usize>> {
    if batch_size == 0 || batch_size >= rows {
        return vec![(0..rows).collect(); steps];
    }
    let mut out = Vec::with_capacity(steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = rows;
    while out.len() < steps {
        if cursor >= rows {
            order = (0..rows).collect();
            order.shuffle(rng);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(rows);
        out.push(order[cursor..end].to_vec());
        cursor = end;
    }
    out
}

struct StepGraph {
    graph: Graph,
    theta: Var,
    x: Var,
    label_logits: Option<Var>,
    grad: Var,
}

/// Build `∇_θ ℓ(θ, batch)` with the adjoint kept differentiable.
fn step_graph(theta: &ParamVector, data: &InnerData<'_>, batch: &[usize], net: &Network) -> Result<StepGraph> {
    let mut g = Graph::new();
    let th = g.leaf(theta.to_row());
    let x = g.leaf(data.images.select_rows(batch));
    let (targets, label_logits) = match data.labels {
        InnerLabels::Hard(labels) => {
            let picked: Vec<usize> = batch.iter().map(|&r| labels[r]).collect();
            let t = Labels::Hard(picked).to_targets(net.classes())?;
            (g.leaf(t), None)
        }
        InnerLabels::Soft(logits) => {
            let lg = g.leaf(logits.select_rows(batch));
            (g.softmax(lg), Some(lg))
        }
    };
    let out = net.forward_graph(&mut g, th, x);
    let l = cross_entropy_graph(&mut g, out, targets);
    let grad = g.grad(l, &[th])[0];
    Ok(StepGraph {
        graph: g,
        theta: th,
        x,
        label_logits,
        grad,
    })
}

/// Unroll with a caller-chosen batch sequence.
pub fn unroll_fixed(
    theta_start: &ParamVector,
    data: &InnerData<'_>,
    batches: &[Vec<usize>],
    net: &Network,
) -> Result<(ParamVector, UnrollTape)> {
    net.check_params(theta_start)?;
    data.validate(net)?;
    if let Some(bad) = batches.iter().flatten().find(|&&r| r >= data.rows()) {
        return Err(Error::Validation(format!(
            "batch index {bad} ≥ {} synthetic rows",
            data.rows()
        )));
    }
    let alphas = data.rates(batches.len())?;
    let start = ParamVector::new(theta_start.as_slice().to_vec(), Dtype::Double);
    let mut theta = start.clone();
    let mut states = Vec::with_capacity(batches.len());
    for (step, batch) in batches.iter().enumerate() {
        let sg = step_graph(&theta, data, batch, net)?;
        let gvals = sg.graph.value(sg.grad).as_slice();
        let next: Vec<f64> = theta
            .as_slice()
            .iter()
            .zip(gvals)
            .map(|(t, gv)| t - alphas[step] * gv)
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                stage: "inner step",
                index: step,
            });
        }
        states.push(std::mem::replace(&mut theta, ParamVector::new(next, Dtype::Double)));
    }
    let tape = UnrollTape {
        theta_start: start,
        states,
        batches: batches.to_vec(),
        alphas,
        rows: data.rows(),
        soft: data.is_soft(),
    };
    Ok((theta, tape))
}

/// Run `steps` inner SGD steps from `theta_start`, drawing batches from `rng`.
pub fn unroll_inner<R: Rng + ?Sized>(
    theta_start: &ParamVector,
    data: &InnerData<'_>,
    steps: usize,
    net: &Network,
    rng: &mut R,
) -> Result<(ParamVector, UnrollTape)> {
    let batches = batch_schedule(data.rows(), data.batch_size, steps, rng);
    unroll_fixed(theta_start, data, &batches, net)
}

/// Gradients of an outer objective with respect to the synthetic set.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrads {
    /// Same shape as the synthetic images.
    pub images: Mat,
    /// Same shape as the label logits; `None` for hard labels.
    pub label_logits: Option<Mat>,
    /// Gradient for the shared rate: the sum of `alpha_steps`.
    pub alpha: f64,
    /// Gradient for each step's rate.
    pub alpha_steps: Vec<f64>,
}

/// Backpropagate `d_outer = ∂L/∂θ_end` through every recorded step.
pub fn hypergrad(tape: &UnrollTape, d_outer: &ParamVector, data: &InnerData<'_>, net: &Network) -> Result<HyperGrads> {
    tape.check_matches(data)?;
    data.validate(net)?;
    if d_outer.len() != net.param_count() {
        return Err(Error::Validation(format!(
            "outer gradient has length {}, network has {} parameters",
            d_outer.len(),
            net.param_count()
        )));
    }
    let mut images = Mat::zeros(data.images.rows(), data.images.cols());
    let mut label_logits = match data.labels {
        InnerLabels::Soft(m) => Some(Mat::zeros(m.rows(), m.cols())),
        InnerLabels::Hard(_) => None,
    };
    let mut alpha_steps = vec![0.0; tape.len()];
    let mut v: Vec<f64> = d_outer.as_slice().to_vec();

    for (step, (theta, batch)) in tape.states.iter().zip(&tape.batches).enumerate().rev() {
        let alpha = tape.alphas[step];
        let StepGraph {
            mut graph,
            theta: th,
            x,
            label_logits: lg,
            grad,
        } = step_graph(theta, data, batch, net)?;
        let vv = graph.leaf(Mat::row_vector(v.clone()));
        let phi = graph.dot(grad, vv);
        alpha_steps[step] = -graph.scalar(phi);

        let mut wrt = vec![th, x];
        wrt.extend(lg);
        let second = graph.grad(phi, &wrt);

        let hv = graph.value(second[0]).as_slice();
        for (vi, h) in v.iter_mut().zip(hv) {
            *vi -= alpha * h;
        }
        let gx = graph.value(second[1]);
        for (k, &r) in batch.iter().enumerate() {
            for (dst, src) in images.row_mut(r).iter_mut().zip(gx.row(k)) {
                *dst -= alpha * src;
            }
        }
        if let (Some(acc), Some(&glg)) = (label_logits.as_mut(), second.get(2)) {
            let gl = graph.value(glg);
            for (k, &r) in batch.iter().enumerate() {
                for (dst, src) in acc.row_mut(r).iter_mut().zip(gl.row(k)) {
                    *dst -= alpha * src;
                }
            }
        }
    }

    let grad_alpha: f64 = alpha_steps.iter().sum();
    if !images.is_finite() || !grad_alpha.is_finite() || label_logits.as_ref().is_some_and(|m| !m.is_finite()) {
        return Err(Error::Numeric("hypergradient is non-finite".into()));
    }
    Ok(HyperGrads {
        images,
        label_logits,
        alpha: grad_alpha,
        alpha_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{grad, Activation, Batch, NetworkSpec};
    use crate::exec::rng_from;

    fn fixture(seed: u64) -> (Network, ParamVector, Mat, Vec<usize>) {
        let net = Network::new(NetworkSpec::mlp(3, &[4], Activation::Tanh, 3)).unwrap();
        let mut rng = rng_from(seed);
        let theta = net.init_params(&mut rng, Dtype::Double);
        let x = Mat::from_vec(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect());
        (net, theta, x, vec![0, 0, 1, 1, 2, 2])
    }

    #[test]
    fn zero_steps_is_identity() {
        let (net, theta, x, y) = fixture(1);
        let data = InnerData {
            images: &x,
            labels: InnerLabels::Hard(&y),
            alpha: 0.1,
            step_alpha: None,
            batch_size: 6,
        };
        let (end, tape) = unroll_inner(&theta, &data, 0, &net, &mut rng_from(0)).unwrap();
        assert_eq!(end, theta);
        assert!(tape.is_empty());
    }

    #[test]
    fn zero_alpha_is_identity() {
        let (net, theta, x, y) = fixture(2);
        let data = InnerData {
            images: &x,
            labels: InnerLabels::Hard(&y),
            alpha: 0.0,
            step_alpha: None,
            batch_size: 2,
        };
        let (end, tape) = unroll_inner(&theta, &data, 7, &net, &mut rng_from(0)).unwrap();
        assert_eq!(end, theta);
        assert_eq!(tape.len(), 7);
    }

    #[test]
    fn single_full_batch_step_matches_grad() {
        let (net, theta, x, y) = fixture(3);
        let alpha = 0.37;
        let data = InnerData {
            images: &x,
            labels: InnerLabels::Hard(&y),
            alpha,
            step_alpha: None,
            batch_size: 100,
        };
        let (end, _) = unroll_inner(&theta, &data, 1, &net, &mut rng_from(0)).unwrap();
        let g = grad(&theta, &Batch::hard(x.clone(), y.clone()).unwrap(), &net).unwrap();
        for ((e, t), gv) in end.as_slice().iter().zip(theta.as_slice()).zip(g.as_slice()) {
            assert!((e - (t - alpha * gv)).abs() <= 1e-12);
        }
    }

    #[test]
    fn replay_is_bit_exact() {
        let (net, theta, x, y) = fixture(4);
        let data = InnerData {
            images: &x,
            labels: InnerLabels::Hard(&y),
            alpha: 0.2,
            step_alpha: None,
            batch_size: 4,
        };
        let (end, tape) = unroll_inner(&theta, &data, 5, &net, &mut rng_from(9)).unwrap();
        let again = tape.replay(&data, &net).unwrap();
        assert!(end
            .as_slice()
            .iter()
            .zip(again.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn batch_schedule_covers_each_pass_without_replacement() {
        let b = batch_schedule(10, 4, 6, &mut rng_from(3));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2, 4, 4, 2]);
        let mut first: Vec<usize> = b[..3].concat();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_schedule(3, 5, 2, &mut rng_from(0)), vec![vec![0, 1, 2]; 2]);
    }

    #[test]
    fn divergence_names_the_step() {
        let (_, _, x, y) = fixture(5);
        let x = x.map(|v| 100.0 * v);
        let net = Network::new(NetworkSpec::linear(3, 3, true)).unwrap();
        let theta = net.init_params(&mut rng_from(5), Dtype::Double);
        let data = InnerData {
            images: &x,
            labels: InnerLabels::Hard(&y),
            alpha: f64::MAX / 4.0,
            step_alpha: None,
            batch_size: 6,
        };
        match unroll_inner(&theta, &data, 3, &net, &mut rng_from(0)) {
            Err(Error::Divergence { index, .. }) => assert!(index < 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_outer_gradient_gives_zero_hypergradients() {
        let (net, theta, x, _) = fixture(6);
        let logits = Mat::from_vec(6, 3, (0..18).map(|i| (i as f64 * 0.3).cos()).collect());
        let data = InnerData {
            images: &x,
            labels: InnerLabels::Soft(&logits),
            alpha: 0.1,
            step_alpha: None,
            batch_size: 6,
        };
        let (_, tape) = unroll_inner(&theta, &data, 3, &net, &mut rng_from(0)).unwrap();
        let hg = hypergrad(
            &tape,
            &ParamVector::zeros(net.param_count(), Dtype::Double),
            &data,
            &net,
        )
        .unwrap();
        assert!(hg.images.as_slice().iter().all(|&v| v == 0.0));
        assert!(hg.label_logits.unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(hg.alpha, 0.0);
    }

    #[test]
    fn tape_mismatch_is_rejected() {
        let (net, theta, x, y) = fixture(7);
        let data = InnerData {
            images: &x,
            labels: InnerLabels::Hard(&y),
            alpha: 0.1,
            step_alpha: None,
            batch_size: 6,
        };
        let (_, tape) = unroll_inner(&theta, &data, 2, &net, &mut rng_from(0)).unwrap();
        let other = InnerData { alpha: 0.2, ..data };
        let d = ParamVector::zeros(net.param_count(), Dtype::Double);
        assert!(matches!(hypergrad(&tape, &d, &other, &net), Err(Error::Validation(_))));
        let x2 = x.select_rows(&[0, 1, 2]);
        let fewer = InnerData {
            images: &x2,
            labels: InnerLabels::Hard(&y[..3]),
            ..data
        };
        assert!(matches!(hypergrad(&tape, &d, &fewer, &net), Err(Error::Validation(_))));
    }

    #[test]
    fn equal_per_step_rates_match_the_shared_rate() {
        let (net, theta, x, y) = fixture(11);
        let shared = InnerData {
            images: &x,
            labels: InnerLabels::Hard(&y),
            alpha: 0.3,
            step_alpha: None,
            batch_size: 4,
        };
        let rates = [0.3; 3];
        let per_step = InnerData {
            step_alpha: Some(&rates),
            alpha: 99.0,
            ..shared
        };
        let (a, ta) = unroll_inner(&theta, &shared, 3, &net, &mut rng_from(4)).unwrap();
        let (b, tb) = unroll_inner(&theta, &per_step, 3, &net, &mut rng_from(4)).unwrap();
        assert_eq!(a, b);
        let d = ParamVector::new(a.as_slice().iter().map(|v| v.sin()).collect(), Dtype::Double);
        let ha = hypergrad(&ta, &d, &shared, &net).unwrap();
        let hb = hypergrad(&tb, &d, &per_step, &net).unwrap();
        assert_eq!(ha, hb);
        let sum: f64 = ha.alpha_steps.iter().sum();
        assert_eq!(sum.to_bits(), ha.alpha.to_bits());

        let short = [0.3; 2];
        let bad = InnerData {
            step_alpha: Some(&short),
            ..shared
        };
        assert!(matches!(
            unroll_inner(&theta, &bad, 3, &net, &mut rng_from(4)),
            Err(Error::Validation(_))
        ));
    }
}
