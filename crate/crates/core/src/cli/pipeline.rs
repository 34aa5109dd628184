//! The experiment stages behind each subcommand, callable in-process.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cli::config::RunConfig;
use crate::datakit::{
    export_comparison_grid, make_toy_split, mean_abs_pixel_delta, normalize, render_grid, Dataset, GridLayout,
};
use crate::diffnet::Network;
use crate::distill::{init_synthetic, run_distillation, DistillOutcome, LabelMode, SyntheticDataset};
use crate::evalharness::{evaluate, mean_std, EvalReport};
use crate::exec::{derive_seed, map_indexed};
use crate::trajstore::{train_expert, MatchingRangeSchedule, Trajectory};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Toy split, standardized with train-set statistics when enabled.
pub fn build_data(cfg: &RunConfig) -> Result<ToyData> {
    let (train, test) = make_toy_split(&cfg.toy_spec(), cfg.test_per_class)?;
    if !cfg.normalize {
        return Ok(ToyData { train, test });
    }
    let train = normalize(&train, None)?;
    let test = normalize(&test, train.norm.as_ref())?;
    Ok(ToyData { train, test })
}

pub fn network(cfg: &RunConfig) -> Result<Network> {
    Network::new(cfg.arch.clone())
}

pub fn expert_seed(cfg: &RunConfig, k: usize) -> u64 {
    derive_seed(cfg.seed, 1000 + k as u64)
}

/// Seed of the real subset the synthetic set starts from.
pub fn init_seed(distill_seed: u64) -> u64 {
    derive_seed(distill_seed, 2)
}

/// `cfg.experts` independent expert runs, in expert order.
pub fn gen_experts(cfg: &RunConfig, data: &ToyData, net: &Network) -> Result<Vec<Trajectory>> {
    let sgd = cfg.expert_sgd();
    map_indexed(cfg.experts, |k| {
        train_expert(net, &data.train, &sgd, expert_seed(cfg, k), cfg.precision)
    })
    .into_iter()
    .collect()
}

/// Synthetic set seeded from real samples; α starts at the expert learning
/// rate. Soft mode uses the first expert's final snapshot as the pretrained
/// model.
pub fn init_for(cfg: &RunConfig, data: &ToyData, experts: &[Trajectory], net: &Network) -> Result<SyntheticDataset> {
    let pretrained = match cfg.label_mode {
        LabelMode::Hard => None,
        LabelMode::Soft => {
            let first = experts
                .first()
                .ok_or_else(|| Error::Validation("soft labels need at least one expert".into()))?;
            Some((net, first.snapshots.last().expect("validated trajectory")))
        }
    };
    init_synthetic(
        &data.train,
        cfg.ipc,
        cfg.label_mode,
        pretrained,
        cfg.expert_lr,
        cfg.precision,
        init_seed(cfg.seed),
    )
}

pub fn distill(
    cfg: &RunConfig,
    data: &ToyData,
    experts: &[Trajectory],
    net: &Network,
    checkpoints: Option<&Path>,
) -> Result<DistillOutcome> {
    let initial = init_for(cfg, data, experts, net)?;
    run_distillation(initial, experts, net, &cfg.distill_config(), checkpoints)
}

pub fn evaluate_synthetic(cfg: &RunConfig, data: &ToyData, syn: &SyntheticDataset) -> Result<EvalReport> {
    evaluate(syn.images(), syn.classes(), syn.ipc(), &data.test, &cfg.eval_config())
}

/// Mean absolute change of the rendered grid between two synthetic sets.
pub fn grid_delta(initial: &SyntheticDataset, fin: &SyntheticDataset) -> Result<f64> {
    let layout = GridLayout::for_synthetic(fin, 1);
    let a = render_grid(initial.images(), initial.norm(), &layout)?;
    let b = render_grid(fin.images(), fin.norm(), &layout)?;
    mean_abs_pixel_delta(&a, &b)
}

const STAGES: [(&str, [usize; 3]); 3] = [("early", [0, 15, 20]), ("medium", [30, 45, 60]), ("late", [60, 75, 80])];

/// The early/medium/late ranges of an 80-epoch trajectory scaled to
/// `epochs`: each bound becomes `⌊v · epochs / 80⌋`, upper bounds are capped at
/// `epochs − m`, and a lower bound that would touch the previous stage's upper
/// bound moves one epoch up.
pub fn ablation_ranges(epochs: usize, m: usize, interval: usize) -> Result<Vec<(&'static str, MatchingRangeSchedule)>> {
    let cap = epochs
        .checked_sub(m)
        .ok_or_else(|| Error::Validation(format!("M = {m} exceeds {epochs} expert epochs")))?;
    let mut out: Vec<(&'static str, MatchingRangeSchedule)> = Vec::with_capacity(3);
    for (name, [lo, init, hi]) in STAGES {
        let scale = |v: usize| (v * epochs / 80).min(cap);
        let mut s = MatchingRangeSchedule::new(scale(lo), scale(init), scale(hi), interval);
        if let Some((_, prev)) = out.last() {
            if s.lower <= prev.upper {
                s.lower = prev.upper + 1;
            }
        }
        s.initial = s.initial.max(s.lower);
        s.upper = s.upper.max(s.initial);
        if s.upper > cap {
            return Err(Error::Validation(format!(
                "{epochs} expert epochs are too few for three disjoint matching ranges with M = {m}"
            )));
        }
        s.validate(epochs, m)?;
        out.push((name, s));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub schedule: MatchingRangeSchedule,
    /// Evaluation accuracies, distill seed major.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Grid change per distill seed.
    pub pixel_delta: Vec<f64>,
    pub outcomes: Vec<DistillOutcome>,
}

impl AblationRow {
    pub fn mean_pixel_delta(&self) -> f64 {
        mean_std(&self.pixel_delta).0
    }
}

/// Distill and evaluate each range with `cfg.ablate_seeds` distill seeds
/// (`cfg.seed + j`). Hard or soft labels follow `cfg.label_mode`.
pub fn run_ablation(
    cfg: &RunConfig,
    data: &ToyData,
    experts: &[Trajectory],
    net: &Network,
) -> Result<Vec<AblationRow>> {
    let ranges = ablation_ranges(cfg.expert_epochs, cfg.m_gap, cfg.interval)?;
    let seeds = cfg.ablate_seeds;
    let jobs = map_indexed(
        ranges.len() * seeds,
        |job| -> Result<(DistillOutcome, EvalReport, f64)> {
            let (_, schedule) = ranges[job / seeds];
            let mut c = cfg.clone();
            c.t_minus = schedule.lower;
            c.t_init = schedule.initial;
            c.t_plus = schedule.upper;
            c.seed = cfg.seed.wrapping_add((job % seeds) as u64);
            let out = distill(&c, data, experts, net, None)?;
            let mut eval_cfg = cfg.eval_config();
            eval_cfg.base_seed = cfg.seed;
            let report = evaluate(
                out.syn.images(),
                out.syn.classes(),
                out.syn.ipc(),
                &data.test,
                &eval_cfg,
            )?;
            let delta = grid_delta(&out.initial, &out.syn)?;
            Ok((out, report, delta))
        },
    );
    let mut jobs = jobs.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
    let mut rows = Vec::with_capacity(ranges.len());
    for (name, schedule) in ranges {
        let mut accuracies = Vec::new();
        let mut pixel_delta = Vec::new();
        let mut outcomes = Vec::new();
        for _ in 0..seeds {
            let (out, report, delta) = jobs.next().expect("one job per range and seed");
            accuracies.extend(report.accuracies);
            pixel_delta.push(delta);
            outcomes.push(out);
        }
        let (mean, std) = mean_std(&accuracies);
        rows.push(AblationRow {
            name,
            schedule,
            accuracies,
            mean,
            std,
            pixel_delta,
            outcomes,
        });
    }
    Ok(rows)
}

/// One row per range, then a comment naming the expert length the ranges were
/// scaled to.
pub fn ablation_csv(rows: &[AblationRow], expert_epochs: usize, m: usize) -> String {
    let mut s = String::from("range,T_minus,T_init,T_plus,mean,std,pixel_delta\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.name,
            r.schedule.lower,
            r.schedule.initial,
            r.schedule.upper,
            r.mean,
            r.std,
            r.mean_pixel_delta()
        )
        .unwrap();
    }
    writeln!(
        s,
        "# expert_epochs={expert_epochs} M={m}; ranges scaled from an 80-epoch trajectory"
    )
    .unwrap();
    s
}

/// Grids for the first distill seed of each range.
pub fn write_ablation_grids(rows: &[AblationRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in rows {
        if let Some(o) = r.outcomes.first() {
            export_comparison_grid(&o.initial, &o.syn, &dir.join(format!("{}_grid.png", r.name)), 4)?;
        }
    }
    Ok(())
}
