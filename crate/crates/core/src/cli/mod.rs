//! `distillforge` subcommands.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage or config
//! errors. Every command writes `<out>/<command>.config.txt` with the
//! effective configuration; rerunning with `--config` pointing at that file
//! reproduces the outputs.

pub mod config;
pub mod pipeline;

pub use config::RunConfig;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datakit::{export_comparison_grid, export_distilled, export_image_grid, import_distilled};
use crate::distill::LabelMode;
use crate::evalharness::{baseline_random_subset, label_consistency_check};
use crate::trajstore::{read_buffer, write_buffer, Trajectory};
use crate::{ConfigError, Error, Result};

use pipeline::ToyData;

#[derive(Debug, Parser)]
#[command(
    name = "distillforge",
    version,
    about = "Trajectory-matching dataset distillation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// `key = value` config file; omitted keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `label_mode` (hard or soft).
    #[arg(long)]
    label_mode: Option<LabelMode>,
    /// Overrides `T_minus:T_init:T_plus`.
    #[arg(long, value_name = "T-:Tinit:T+")]
    range: Option<String>,
    /// Overrides `experts`.
    #[arg(long)]
    experts: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train expert trajectories into `<out>/experts/`.
    GenExperts(Common),
    /// Distill from `<from>/experts/` into `<out>/distill/`.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Directory holding `experts/` (defaults to --out).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate `<from>/distill/final` against a random-subset baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding `distill/final` (defaults to --out).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Distill and evaluate the early, medium and late matching ranges.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Directory holding `experts/` (defaults to --out).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Print a trajectory buffer's header and distance profile.
    InspectBuffer {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render a distilled export as a PNG grid.
    Render {
        dir: PathBuf,
        /// Initial export for a side-by-side comparison.
        #[arg(long)]
        initial: Option<PathBuf>,
        /// Pixels per image pixel.
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize, usize), ConfigError> {
    let bad = || ConfigError::Type {
        line: 0,
        key: "--range".into(),
        value: s.into(),
        expected: "T-:Tinit:T+",
    };
    let v: Vec<usize> = s
        .split(':')
        .map(|t| t.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    match v.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(bad()),
    }
}

fn effective_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::parse_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.label_mode {
        cfg.label_mode = m;
    }
    if let Some(r) = &c.range {
        (cfg.t_minus, cfg.t_init, cfg.t_plus) = parse_range(r)?;
    }
    if let Some(k) = c.experts {
        cfg.experts = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn expert_path(root: &Path, k: usize) -> PathBuf {
    root.join("experts").join(format!("expert_{k}.trj"))
}

/// Load `cfg.experts` buffers and check they were trained for this config.
fn load_experts(cfg: &RunConfig, root: &Path, data: &ToyData) -> Result<Vec<Trajectory>> {
    let digest = data.train.digest();
    (0..cfg.experts)
        .map(|k| {
            let p = expert_path(root, k);
            if !p.is_file() {
                return Err(Error::io(
                    &p,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "expert buffer not found (run gen-experts)",
                    ),
                ));
            }
            let t = read_buffer(&p)?;
            if t.meta.dataset_digest != digest {
                return Err(Error::Validation(format!(
                    "{} was trained on a different dataset",
                    p.display()
                )));
            }
            Ok(t)
        })
        .collect()
}

fn gen_experts(c: &Common) -> Result<()> {
    let cfg = effective_config(c)?;
    cfg.echo(&c.out.join("gen-experts.config.txt"))?;
    let data = pipeline::build_data(&cfg)?;
    let net = pipeline::network(&cfg)?;
    let experts = pipeline::gen_experts(&cfg, &data, &net)?;
    fs::create_dir_all(c.out.join("experts")).map_err(|e| Error::io(c.out.join("experts"), e))?;
    for (k, t) in experts.iter().enumerate() {
        write_buffer(t, &expert_path(&c.out, k))?;
        let acc = t
            .training
            .as_ref()
            .and_then(|r| r.epoch_accuracy.last())
            .copied()
            .unwrap_or(f64::NAN);
        println!(
            "expert {k}: {} epochs, P = {}, final train accuracy {acc:.4}",
            t.epochs(),
            t.param_count()
        );
    }
    Ok(())
}

fn distill(c: &Common, from: Option<&Path>) -> Result<()> {
    let cfg = effective_config(c)?;
    cfg.echo(&c.out.join("distill.config.txt"))?;
    let data = pipeline::build_data(&cfg)?;
    let net = pipeline::network(&cfg)?;
    let experts = load_experts(&cfg, from.unwrap_or(&c.out), &data)?;
    let dir = c.out.join("distill");
    let out = pipeline::distill(&cfg, &data, &experts, &net, Some(&dir))?;
    export_distilled(&dir.join("initial"), &out.initial)?;
    export_distilled(&dir.join("final"), &out.syn)?;
    write(&dir.join("metrics.csv"), &out.log.to_csv())?;
    export_comparison_grid(&out.initial, &out.syn, &dir.join("grid.png"), 4)?;
    let n = out.log.len();
    let k = (n / 10).max(1);
    println!(
        "distilled {} rows ({} labels) over {n} iterations: matching loss {:.5} (first {k}) -> {:.5} (last {k}), alpha {}",
        out.syn.rows(),
        out.syn.mode(),
        out.log.mean_loss(0..k),
        out.log.mean_loss(n - k..n),
        out.syn.alpha()
    );
    Ok(())
}

fn eval(c: &Common, from: Option<&Path>) -> Result<()> {
    let cfg = effective_config(c)?;
    cfg.echo(&c.out.join("eval.config.txt"))?;
    let data = pipeline::build_data(&cfg)?;
    let syn = import_distilled(&from.unwrap_or(&c.out).join("distill").join("final"))?;
    let report = pipeline::evaluate_synthetic(&cfg, &data, &syn)?;
    let baseline = baseline_random_subset(
        &data.train,
        &data.test,
        syn.ipc(),
        &cfg.eval_config(),
        pipeline::init_seed(cfg.seed),
    )?;
    let audit = label_consistency_check(&syn);
    let dir = c.out.join("eval");
    write(&dir.join("distilled.csv"), &report.to_csv())?;
    write(&dir.join("baseline.csv"), &baseline.to_csv())?;
    let mut a = String::from("index,stored,expected\n");
    for m in &audit {
        writeln!(a, "{},{},{}", m.index, m.stored, m.expected).unwrap();
    }
    write(&dir.join("label_audit.csv"), &a)?;
    println!(
        "distilled: {:.4} ± {:.4}; random subset: {:.4} ± {:.4}; label mismatches: {}",
        report.mean,
        report.std,
        baseline.mean,
        baseline.std,
        audit.len()
    );
    Ok(())
}

fn ablate(c: &Common, from: Option<&Path>) -> Result<()> {
    let cfg = effective_config(c)?;
    cfg.echo(&c.out.join("ablate.config.txt"))?;
    let data = pipeline::build_data(&cfg)?;
    let net = pipeline::network(&cfg)?;
    let experts = load_experts(&cfg, from.unwrap_or(&c.out), &data)?;
    let rows = pipeline::run_ablation(&cfg, &data, &experts, &net)?;
    let dir = c.out.join("ablate");
    write(
        &dir.join("ablation.csv"),
        &pipeline::ablation_csv(&rows, cfg.expert_epochs, cfg.m_gap),
    )?;
    pipeline::write_ablation_grids(&rows, &dir)?;
    println!(
        "ranges scaled from 80 to {} expert epochs (M = {})",
        cfg.expert_epochs, cfg.m_gap
    );
    for r in &rows {
        println!(
            "{:<6} {}: accuracy {:.4} ± {:.4}, grid delta {:.5}",
            r.name,
            r.schedule,
            r.mean,
            r.std,
            r.mean_pixel_delta()
        );
    }
    Ok(())
}

fn inspect(path: &Path, c: &Common) -> Result<()> {
    let cfg = effective_config(c)?;
    let t = read_buffer(path)?;
    let m = &t.meta;
    println!("file: {}", path.display());
    println!("format: TRJB v{}", crate::trajstore::buffer::VERSION);
    println!("spec digest: {}", m.spec_digest);
    println!("dataset digest: {}", m.dataset_digest);
    println!("seed: {}", m.seed);
    println!("n: {}", m.epochs);
    println!("P: {}", m.param_count);
    println!("dtype: {}", m.dtype);
    if let Some(r) = &t.training {
        println!("spec: {}", r.spec);
        println!(
            "training: lr {} momentum {} batch {}",
            r.sgd.lr, r.sgd.momentum, r.sgd.batch_size
        );
    }
    let gap = cfg.m_gap.min(m.epochs);
    println!("t,distance(M={gap})");
    for (i, d) in t.distance_profile(gap)?.iter().enumerate() {
        println!("{i},{d}");
    }
    Ok(())
}

fn render(dir: &Path, initial: Option<&Path>, scale: usize, c: &Common) -> Result<()> {
    let syn = import_distilled(dir)?;
    fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    let path = c.out.join("grid.png");
    match initial {
        Some(i) => {
            export_comparison_grid(&import_distilled(i)?, &syn, &path, scale)?;
        }
        None => {
            export_image_grid(&syn, &path, scale)?;
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenExperts(c) => gen_experts(&c),
        Command::Distill { common, from } => distill(&common, from.as_deref()),
        Command::Eval { common, from } => eval(&common, from.as_deref()),
        Command::Ablate { common, from } => ablate(&common, from.as_deref()),
        Command::InspectBuffer { path, common } => inspect(&path, &common),
        Command::Render {
            dir,
            initial,
            scale,
            common,
        } => render(&dir, initial.as_deref(), scale, &common),
    }
}

/// Parse `argv` (including the program name) and run; returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Honour `DISTILLFORGE_THREADS` if set to a positive integer.
pub fn init_threads_from_env() {
    if let Some(n) = std::env::var("DISTILLFORGE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        crate::exec::init_threads(n);
    }
}
