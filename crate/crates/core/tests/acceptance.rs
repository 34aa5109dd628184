//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Tolerances are fixed below.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use distillforge::cli::pipeline::{self, AblationRow, ToyData};
use distillforge::cli::{run_command, RunConfig};
use distillforge::datakit::export::LABELS_FILE;
use distillforge::datakit::{export_distilled, import_distilled};
use distillforge::diffnet::{Dtype, Mat, Network, NetworkSpec};
use distillforge::distill::{distill_step, init_synthetic, matching_loss, LabelMode, OuterState, SyntheticDataset};
use distillforge::evalharness::{
    audit_export, baseline_random_subset, default_labels, label_consistency_check, mean_std,
};
use distillforge::exec::rng_from;
use distillforge::trajstore::{decode_buffer, encode_buffer, MatchingRangeSchedule, Trajectory};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const FD_TOL: f64 = 1e-4;
const FD_INSTANCES: u64 = 24;
const FD_BUDGET: Duration = Duration::from_secs(120);
const IDENTITY_TOL: f64 = 1e-12;
const LABEL_AUDIT_ITERATIONS: usize = 500;
const SCHEDULE_ITERATIONS: usize = 2000;
const CHI_DRAWS: usize = 100_000;
const CHI_ALPHA: f64 = 0.01;
const DESCENT_MIN_SEEDS: usize = 4;
const DESCENT_BUDGET: Duration = Duration::from_secs(600);
const BEATS_RANDOM_MARGIN: f64 = 0.05;
const EARLY_LATE_MARGIN: f64 = 0.03;
const LATE_DELTA_RATIO: f64 = 0.1;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Toy benchmark shared by the descent, baseline and range criteria.
struct Bench {
    cfg: RunConfig,
    data: ToyData,
    net: Network,
    experts: Vec<Trajectory>,
    rows: Vec<AblationRow>,
    ablation_time: Duration,
}

impl Bench {
    fn build() -> Bench {
        let cfg = RunConfig::default();
        let data = pipeline::build_data(&cfg).unwrap();
        let net = pipeline::network(&cfg).unwrap();
        let experts = pipeline::gen_experts(&cfg, &data, &net).unwrap();
        let t0 = Instant::now();
        let rows = pipeline::run_ablation(&cfg, &data, &experts, &net).unwrap();
        Bench {
            cfg,
            data,
            net,
            experts,
            rows,
            ablation_time: t0.elapsed(),
        }
    }

    fn row(&self, name: &str) -> &AblationRow {
        self.rows.iter().find(|r| r.name == name).unwrap()
    }
}

fn hypergradient_oracle() -> Outcome {
    let specs = [
        "in=3;dense:4:tanh;out=3",
        "in=5;dense:6:tanh;out=4",
        "in=1x4x4;conv:2:3:tanh;pool:2;out=3",
        "in=6;dense:5:tanh;dense:4:tanh;out=2",
        "in=4;dense:8:relu;out=3",
        "in=6;out=4",
    ];
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..FD_INSTANCES {
        let spec: NetworkSpec = specs[seed as usize % specs.len()].parse().unwrap();
        let steps = 1 + (seed as usize % 5);
        let batch = [6, 4, 3][seed as usize % 3];
        let inst = common::random_instance(5000 + seed, spec, 6, steps, batch);
        if inst.net.param_count() > 200 {
            return Err(format!("instance {seed} has P = {}", inst.net.param_count()));
        }
        for soft in [false, true] {
            worst = worst.max(inst.check(soft));
            checks += 1;
        }
    }
    let elapsed = t0.elapsed();
    ensure(
        worst <= FD_TOL && elapsed <= FD_BUDGET,
        format!("{checks} checks, worst relative error {worst:.2e} (tol {FD_TOL:e}), {elapsed:.1?}"),
    )
}

fn loss_identities() -> Outcome {
    let pv = |v: &[f64]| distillforge::diffnet::ParamVector::new(v.to_vec(), Dtype::Double);
    let mut rng = rng_from(11);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = rng.random_range(1..50);
        let start: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut target: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
        target[0] = start[0] + 1.0;
        let (s, t) = (pv(&start), pv(&target));
        worst = worst.max(matching_loss(&t, &t, &s).unwrap().abs());
        worst = worst.max((matching_loss(&s, &t, &s).unwrap() - 1.0).abs());
    }
    let hand = matching_loss(&pv(&[1.0, 0.0]), &pv(&[0.0, 0.0]), &pv(&[2.0, 0.0])).unwrap();
    worst = worst.max((hand - 0.25).abs());
    ensure(
        worst <= IDENTITY_TOL,
        format!("hand case {hand}, worst deviation {worst:.1e} (tol {IDENTITY_TOL:e})"),
    )
}

fn label_guarantee(bench: &Bench) -> Outcome {
    let cfg = &bench.cfg;
    let mut dcfg = cfg.distill_config();
    dcfg.iterations = LABEL_AUDIT_ITERATIONS;
    let mut syn = pipeline::init_for(cfg, &bench.data, &bench.experts, &bench.net).unwrap();
    let expected = default_labels(syn.classes(), syn.ipc());
    let before: Vec<u64> = syn.hard_labels().iter().map(|&l| l as u64).collect();
    if syn.hard_labels() != expected.as_slice() {
        return Err("initial labels are not in default order".into());
    }
    let mut state = OuterState::new(&syn);
    let mut rng = rng_from(77);
    let initial_images = syn.images().clone();
    for it in 0..LABEL_AUDIT_ITERATIONS {
        let k = it % bench.experts.len();
        distill_step(
            &mut syn,
            &mut state,
            &bench.experts[k],
            k,
            &bench.net,
            &dcfg,
            it,
            &mut rng,
        )
        .unwrap();
        let now: Vec<u64> = syn.hard_labels().iter().map(|&l| l as u64).collect();
        if now != before || syn.label_logits().is_some() {
            return Err(format!("labels changed at iteration {it}"));
        }
    }
    if syn.images() == &initial_images {
        return Err("images never moved, the audit is vacuous".into());
    }
    let dir = tempfile::tempdir().unwrap();
    export_distilled(dir.path(), &syn).unwrap();
    let written = fs::read_to_string(dir.path().join(LABELS_FILE)).unwrap();
    let parsed: Vec<usize> = written.lines().map(|l| l.trim().parse().unwrap()).collect();
    if parsed != expected {
        return Err(format!("{LABELS_FILE} differs from default order"));
    }
    if !label_consistency_check(&syn).is_empty() || !audit_export(dir.path()).unwrap().is_empty() {
        return Err("consistency check flagged a hard-label set".into());
    }

    // soft artifact whose row 5 argmax is swapped to a different class
    let rows = syn.rows();
    let classes = syn.classes();
    let mut logits = Mat::zeros(rows, classes);
    for (r, &c) in expected.iter().enumerate() {
        logits.as_mut_slice()[r * classes + c] = 3.0;
    }
    let bad_row = 5;
    let wrong = (expected[bad_row] + 1) % classes;
    logits.as_mut_slice()[bad_row * classes + wrong] = 9.0;
    let forged = SyntheticDataset::from_parts(
        syn.images().clone(),
        classes,
        syn.ipc(),
        expected.clone(),
        Some(logits),
        syn.alpha(),
        syn.layout(),
        syn.norm().cloned(),
        Dtype::Double,
    )
    .unwrap();
    let flagged = label_consistency_check(&forged);
    let soft_dir = tempfile::tempdir().unwrap();
    export_distilled(soft_dir.path(), &forged).unwrap();
    let audited = audit_export(soft_dir.path()).unwrap();
    let ok = flagged.len() == 1
        && flagged[0].index == bad_row
        && flagged[0].stored == wrong
        && flagged[0].expected == expected[bad_row]
        && audited == flagged;
    ensure(
        ok,
        format!(
            "{LABEL_AUDIT_ITERATIONS} iterations bitwise stable, {LABELS_FILE} matches, forged row flagged: {flagged:?}"
        ),
    )
}

fn schedule_law(bench: &Bench) -> Outcome {
    let schedule = MatchingRangeSchedule::new(0, 15, 20, 100);
    let net = Network::new("in=2x8x8;out=4".parse().unwrap()).unwrap();
    let mut cfg = bench.cfg.clone();
    cfg.arch = net.spec().clone();
    cfg.experts = 2;
    cfg.expert_epochs = 22;
    let experts = pipeline::gen_experts(&cfg, &bench.data, &net).unwrap();
    let mut dcfg = cfg.distill_config();
    dcfg.schedule = schedule;
    dcfg.iterations = SCHEDULE_ITERATIONS;
    dcfg.inner_steps = 1;
    dcfg.checkpoint_every = 0;
    let initial = pipeline::init_for(&cfg, &bench.data, &experts, &net).unwrap();
    let out = distillforge::distill::run_distillation(initial, &experts, &net, &dcfg, None).unwrap();
    let log = &out.log.records;
    if log.len() != SCHEDULE_ITERATIONS {
        return Err(format!("{} records", log.len()));
    }
    if log.windows(2).any(|w| w[1].bound < w[0].bound) {
        return Err("logged T decreased".into());
    }
    if log[500].bound != 20 || log[499].bound == 20 {
        return Err(format!(
            "T reached {} at iteration 500 (499: {})",
            log[500].bound, log[499].bound
        ));
    }
    if let Some(r) = log.iter().find(|r| r.t < schedule.lower || r.t > r.bound) {
        return Err(format!(
            "t = {} outside [0, {}] at iteration {}",
            r.t, r.bound, r.iteration
        ));
    }

    let mut rng = rng_from(2024);
    let mut worst_p: f64 = 1.0;
    for bound in schedule.initial..=schedule.upper {
        let it = (bound - schedule.initial) * schedule.interval;
        assert_eq!(schedule.bound(it), bound);
        let cells = bound - schedule.lower + 1;
        let mut counts = vec![0usize; cells];
        for _ in 0..CHI_DRAWS {
            let t = schedule.sample_start(it, &mut rng);
            if t < schedule.lower || t > bound {
                return Err(format!("draw {t} outside [0, {bound}]"));
            }
            counts[t - schedule.lower] += 1;
        }
        let e = CHI_DRAWS as f64 / cells as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat);
        worst_p = worst_p.min(p);
    }
    ensure(
        worst_p > CHI_ALPHA,
        format!(
            "T monotone, 20 at iteration 500, all t in range; smallest chi-square p = {worst_p:.3} (alpha {CHI_ALPHA})"
        ),
    )
}

fn descent(bench: &Bench) -> Outcome {
    let early = bench.row("early");
    let mut summary = Vec::new();
    let mut passing = 0;
    for o in &early.outcomes {
        let n = o.log.len();
        let k = n / 10;
        let (first, last) = (o.log.mean_loss(0..k), o.log.mean_loss(n - k..n));
        if last < first {
            passing += 1;
        }
        summary.push(format!("{first:.3}->{last:.3}"));
    }
    ensure(
        passing >= DESCENT_MIN_SEEDS && bench.ablation_time <= DESCENT_BUDGET,
        format!(
            "{passing}/{} seeds descend [{}], all ranges in {:.1?}",
            early.outcomes.len(),
            summary.join(", "),
            bench.ablation_time
        ),
    )
}

fn beats_random(bench: &Bench) -> Outcome {
    let cfg = &bench.cfg;
    let mut eval_cfg = cfg.eval_config();
    eval_cfg.base_seed = cfg.seed;
    let mut baseline = Vec::new();
    for j in 0..cfg.ablate_seeds {
        let subset_seed = pipeline::init_seed(cfg.seed.wrapping_add(j as u64));
        let r = baseline_random_subset(&bench.data.train, &bench.data.test, cfg.ipc, &eval_cfg, subset_seed).unwrap();
        baseline.extend(r.accuracies);
    }
    let early = bench.row("early");
    let (base, _) = mean_std(&baseline);
    ensure(
        early.accuracies.len() == 25 && early.mean >= base + BEATS_RANDOM_MARGIN,
        format!(
            "distilled {:.4} over {} runs vs random subset {base:.4} over {} runs (margin {BEATS_RANDOM_MARGIN})",
            early.mean,
            early.accuracies.len(),
            baseline.len()
        ),
    )
}

fn range_ordering(bench: &Bench) -> Outcome {
    let (e, m, l) = (bench.row("early"), bench.row("medium"), bench.row("late"));
    let (de, dl) = (e.mean_pixel_delta(), l.mean_pixel_delta());
    let ordered = e.mean >= m.mean && m.mean >= l.mean && e.mean - l.mean >= EARLY_LATE_MARGIN;
    let images = de > 0.0 && dl < LATE_DELTA_RATIO * de;
    let detail = format!(
        "accuracy early {:.4} / medium {:.4} / late {:.4} [{}]; grid delta early {de:.4}, late {dl:.4} = {:.2} of early (limit {LATE_DELTA_RATIO}) [{}]",
        e.mean,
        m.mean,
        l.mean,
        if ordered { "ok" } else { "violated" },
        dl / de,
        if images { "ok" } else { "violated" },
    );
    ensure(ordered && images, detail)
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["distillforge"];
    argv.extend_from_slice(args);
    match run_command(argv) {
        0 => Ok(()),
        code => Err(format!("`{}` exited {code}", args.join(" "))),
    }
}

fn persistence(bench: &Bench) -> Outcome {
    for t in &bench.experts {
        let bytes = encode_buffer(t);
        let back = decode_buffer(&bytes).map_err(|e| e.to_string())?;
        if back.meta != t.meta || back.snapshots != t.snapshots || encode_buffer(&back) != bytes {
            return Err("trajectory buffer round trip is lossy".into());
        }
        for (a, b) in back.snapshots.iter().zip(&t.snapshots) {
            if a.as_slice()
                .iter()
                .zip(b.as_slice())
                .any(|(x, y)| x.to_bits() != y.to_bits())
            {
                return Err("snapshot bits differ".into());
            }
        }
    }
    let pretrained = bench.experts[0].snapshots.last().unwrap();
    for (mode, precision) in [(LabelMode::Hard, Dtype::Single), (LabelMode::Soft, Dtype::Double)] {
        let pre = (mode == LabelMode::Soft).then_some((&bench.net, pretrained));
        let syn = init_synthetic(&bench.data.train, 3, mode, pre, 0.01, precision, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_distilled(dir.path(), &syn).unwrap();
        if import_distilled(dir.path()).unwrap() != syn {
            return Err(format!("{mode} export round trip is lossy"));
        }
    }

    let work = tempfile::tempdir().unwrap();
    let first = work.path().join("first");
    let second = work.path().join("second");
    let cfg_path = work.path().join("small.cfg");
    fs::write(
        &cfg_path,
        "experts = 2\niterations = 60\ncheckpoint_every = 25\neval_seeds = 2\nablate_seeds = 1\neval_epochs = 50\n",
    )
    .unwrap();
    let (a, c) = (first.to_str().unwrap(), cfg_path.to_str().unwrap());
    for cmd in ["gen-experts", "distill", "eval", "ablate"] {
        run(&[cmd, "--config", c, "--out", a])?;
    }
    let b = second.to_str().unwrap();
    for cmd in ["gen-experts", "distill", "eval", "ablate"] {
        let echoed = first.join(format!("{cmd}.config.txt"));
        run(&[cmd, "--config", echoed.to_str().unwrap(), "--out", b])?;
    }
    let (ta, tb) = (tree(&first), tree(&second));
    if ta.keys().ne(tb.keys()) {
        return Err("reruns produced different file sets".into());
    }
    let differing: Vec<&String> = ta.iter().filter(|(k, v)| tb[*k] != **v).map(|(k, _)| k).collect();
    ensure(
        differing.is_empty(),
        format!(
            "buffers and exports bit-exact; rerun reproduced {} files, differing: {differing:?}",
            ta.len()
        ),
    )
}

fn main() {
    let t0 = Instant::now();
    let bench = Bench::build();
    let criteria: [(&str, &dyn Fn() -> Outcome); 8] = [
        ("hypergradient oracle", &hypergradient_oracle),
        ("matching-loss identities", &loss_identities),
        ("hard-label guarantee", &|| label_guarantee(&bench)),
        ("schedule law", &|| schedule_law(&bench)),
        ("descent", &|| descent(&bench)),
        ("distillation beats random", &|| beats_random(&bench)),
        ("matching-range ordering", &|| range_ordering(&bench)),
        ("persistence and determinism", &|| persistence(&bench)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("criterion {} {name}: PASS ({d})", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({d})", i + 1);
            }
        }
    }
    println!("{} of 8 criteria passed in {:.1?}", 8 - failed, t0.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
