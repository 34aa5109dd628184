//! Randomized hypergradient instances shared by the integration tests.
#![allow(dead_code)]

use distillforge::diffnet::unroll::unroll_fixed;
use distillforge::diffnet::{hypergrad, Dtype, InnerData, InnerLabels, Mat, Network, NetworkSpec, ParamVector};
use distillforge::exec::rng_from;
use rand::Rng;

pub const STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, floor)`; `floor` keeps coordinates whose true
/// value sits at round-off level from dominating.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub struct Instance {
    pub net: Network,
    pub theta: ParamVector,
    pub target: ParamVector,
    pub images: Mat,
    pub labels: Vec<usize>,
    pub logits: Mat,
    pub alpha: f64,
    pub batches: Vec<Vec<usize>>,
}

impl Instance {
    pub fn objective(&self, images: &Mat, logits: &Mat, alpha: f64, soft: bool) -> f64 {
        let labels = if soft {
            InnerLabels::Soft(logits)
        } else {
            InnerLabels::Hard(&self.labels)
        };
        let data = InnerData {
            images,
            labels,
            alpha,
            step_alpha: None,
            batch_size: usize::MAX,
        };
        let (end, _) = unroll_fixed(&self.theta, &data, &self.batches, &self.net).unwrap();
        end.dist_sq(&self.target) / self.theta.dist_sq(&self.target)
    }

    /// Worst relative error over every image, label-logit and α coordinate.
    pub fn check(&self, soft: bool) -> f64 {
        let labels = if soft {
            InnerLabels::Soft(&self.logits)
        } else {
            InnerLabels::Hard(&self.labels)
        };
        let data = InnerData {
            images: &self.images,
            labels,
            alpha: self.alpha,
            step_alpha: None,
            batch_size: usize::MAX,
        };
        let (end, tape) = unroll_fixed(&self.theta, &data, &self.batches, &self.net).unwrap();
        let denom = self.theta.dist_sq(&self.target);
        let d_outer = ParamVector::new(
            end.as_slice()
                .iter()
                .zip(self.target.as_slice())
                .map(|(e, t)| 2.0 * (e - t) / denom)
                .collect(),
            Dtype::Double,
        );
        let hg = hypergrad(&tape, &d_outer, &data, &self.net).unwrap();

        let mut worst: f64 = 0.0;
        let img_floor = 1e-6 * hg.images.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..self.images.as_slice().len() {
            let mut p = self.images.clone();
            p.as_mut_slice()[i] += STEP;
            let mut m = self.images.clone();
            m.as_mut_slice()[i] -= STEP;
            let num = (self.objective(&p, &self.logits, self.alpha, soft)
                - self.objective(&m, &self.logits, self.alpha, soft))
                / (2.0 * STEP);
            worst = worst.max(rel_err(hg.images.as_slice()[i], num, img_floor.max(1e-10)));
        }
        if soft {
            let gl = hg.label_logits.as_ref().unwrap();
            let floor = 1e-6 * gl.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..self.logits.as_slice().len() {
                let mut p = self.logits.clone();
                p.as_mut_slice()[i] += STEP;
                let mut m = self.logits.clone();
                m.as_mut_slice()[i] -= STEP;
                let num = (self.objective(&self.images, &p, self.alpha, soft)
                    - self.objective(&self.images, &m, self.alpha, soft))
                    / (2.0 * STEP);
                worst = worst.max(rel_err(gl.as_slice()[i], num, floor.max(1e-10)));
            }
        } else {
            assert!(hg.label_logits.is_none());
        }
        let num = (self.objective(&self.images, &self.logits, self.alpha + STEP, soft)
            - self.objective(&self.images, &self.logits, self.alpha - STEP, soft))
            / (2.0 * STEP);
        worst.max(rel_err(hg.alpha, num, 1e-10))
    }
}

pub fn random_instance(seed: u64, spec: NetworkSpec, rows: usize, steps: usize, batch: usize) -> Instance {
    let mut rng = rng_from(seed);
    let net = Network::new(spec).unwrap();
    let theta = net.init_params(&mut rng, Dtype::Double);
    let target = ParamVector::new(
        theta
            .as_slice()
            .iter()
            .map(|t| t + rng.random_range(-0.3..0.3))
            .collect(),
        Dtype::Double,
    );
    let d = net.input_dim();
    let c = net.classes();
    let images = Mat::from_vec(rows, d, (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect());
    let labels = (0..rows).map(|i| i * c / rows).collect();
    let logits = Mat::from_vec(rows, c, (0..rows * c).map(|_| rng.random_range(-2.0..2.0)).collect());
    let batches = distillforge::diffnet::unroll::batch_schedule(rows, batch, steps, &mut rng);
    Instance {
        net,
        theta,
        target,
        images,
        labels,
        logits,
        alpha: rng.random_range(0.05..0.5),
        batches,
    }
}
