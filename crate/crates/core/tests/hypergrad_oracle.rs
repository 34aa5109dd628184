//! Hypergradients through the unrolled inner loop against central differences.

mod common;

use common::{random_instance, rel_err, STEP};
use distillforge::diffnet::unroll::unroll_fixed;
use distillforge::diffnet::{
    hypergrad, unroll_inner, Activation, Dtype, InnerData, InnerLabels, NetworkSpec, ParamVector,
};
use distillforge::exec::rng_from;
use rand::Rng;

#[test]
fn single_step_alpha_gradient_is_minus_inner_product() {
    let inst = random_instance(42, NetworkSpec::mlp(4, &[5], Activation::Tanh, 3), 6, 1, 6);
    let data = InnerData {
        images: &inst.images,
        labels: InnerLabels::Hard(&inst.labels),
        alpha: inst.alpha,
        step_alpha: None,
        batch_size: 6,
    };
    let (_, tape) = unroll_fixed(&inst.theta, &data, &inst.batches, &inst.net).unwrap();
    let mut rng = rng_from(1);
    let d_outer = ParamVector::new(
        (0..inst.net.param_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
        Dtype::Double,
    );
    let hg = hypergrad(&tape, &d_outer, &data, &inst.net).unwrap();
    let batch = distillforge::diffnet::Batch::hard(inst.images.clone(), inst.labels.clone()).unwrap();
    let g = distillforge::diffnet::grad(&inst.theta, &batch, &inst.net).unwrap();
    let expected: f64 = -d_outer
        .as_slice()
        .iter()
        .zip(g.as_slice())
        .map(|(a, b)| a * b)
        .sum::<f64>();
    assert!((hg.alpha - expected).abs() <= 1e-12 * expected.abs().max(1.0));

    // and against finite differences of ⟨d_outer, θ_end(α)⟩
    let f = |alpha: f64| {
        let data = InnerData { alpha, ..data };
        let (end, _) = unroll_fixed(&inst.theta, &data, &inst.batches, &inst.net).unwrap();
        end.as_slice()
            .iter()
            .zip(d_outer.as_slice())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let num = (f(inst.alpha + STEP) - f(inst.alpha - STEP)) / (2.0 * STEP);
    assert!(rel_err(hg.alpha, num, 1e-10) <= 1e-4);
}

#[test]
fn two_parameter_model_three_steps_images() {
    let inst = random_instance(7, NetworkSpec::linear(1, 2, false), 4, 3, 4);
    assert_eq!(inst.net.param_count(), 2);
    let err = inst.check(false);
    assert!(err <= 1e-4, "worst relative error {err}");
}

#[test]
fn randomized_instances_hard_and_soft() {
    let specs = [
        "in=3;dense:4:tanh;out=3",
        "in=5;dense:6:tanh;out=4",
        "in=1x4x4;conv:2:3:tanh;pool:2;out=3",
        "in=6;dense:5:tanh;dense:4:tanh;out=2",
    ];
    for seed in 0..8u64 {
        let spec = specs[seed as usize % specs.len()].parse().unwrap();
        let steps = 1 + (seed as usize % 5);
        let batch = if seed % 2 == 0 { 6 } else { 4 };
        let inst = random_instance(100 + seed, spec, 6, steps, batch);
        assert!(inst.net.param_count() <= 200);
        for soft in [false, true] {
            let err = inst.check(soft);
            assert!(err <= 1e-4, "seed {seed} soft={soft}: worst relative error {err}");
        }
    }
}

#[test]
fn random_batches_come_from_the_rng() {
    let inst = random_instance(3, NetworkSpec::mlp(3, &[3], Activation::Tanh, 2), 8, 4, 3);
    let data = InnerData {
        images: &inst.images,
        labels: InnerLabels::Hard(&inst.labels),
        alpha: 0.1,
        step_alpha: None,
        batch_size: 3,
    };
    let (a, ta) = unroll_inner(&inst.theta, &data, 4, &inst.net, &mut rng_from(5)).unwrap();
    let (b, tb) = unroll_inner(&inst.theta, &data, 4, &inst.net, &mut rng_from(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.batches(), tb.batches());
}

#[test]
fn per_step_rates_match_finite_differences() {
    for (seed, soft) in [(21u64, false), (22, true)] {
        let inst = random_instance(seed, "in=4;dense:5:tanh;out=3".parse().unwrap(), 6, 4, 4);
        let rates: Vec<f64> = (0..4).map(|i| 0.1 + 0.07 * i as f64).collect();
        let labels = if soft {
            InnerLabels::Soft(&inst.logits)
        } else {
            InnerLabels::Hard(&inst.labels)
        };
        let objective = |r: &[f64]| {
            let data = InnerData {
                images: &inst.images,
                labels,
                alpha: 0.0,
                step_alpha: Some(r),
                batch_size: usize::MAX,
            };
            let (end, _) = unroll_fixed(&inst.theta, &data, &inst.batches, &inst.net).unwrap();
            end.dist_sq(&inst.target) / inst.theta.dist_sq(&inst.target)
        };
        let data = InnerData {
            images: &inst.images,
            labels,
            alpha: 0.0,
            step_alpha: Some(&rates),
            batch_size: usize::MAX,
        };
        let (end, tape) = unroll_fixed(&inst.theta, &data, &inst.batches, &inst.net).unwrap();
        assert_eq!(tape.alphas(), rates.as_slice());
        let denom = inst.theta.dist_sq(&inst.target);
        let d_outer = ParamVector::new(
            end.as_slice()
                .iter()
                .zip(inst.target.as_slice())
                .map(|(e, t)| 2.0 * (e - t) / denom)
                .collect(),
            Dtype::Double,
        );
        let hg = hypergrad(&tape, &d_outer, &data, &inst.net).unwrap();
        assert_eq!(hg.alpha_steps.len(), 4);
        for i in 0..4 {
            let mut p = rates.clone();
            p[i] += STEP;
            let mut m = rates.clone();
            m[i] -= STEP;
            let num = (objective(&p) - objective(&m)) / (2.0 * STEP);
            let err = rel_err(hg.alpha_steps[i], num, 1e-10);
            assert!(err <= 1e-4, "step {i} soft={soft}: {} vs {num}", hg.alpha_steps[i]);
        }
    }
}
