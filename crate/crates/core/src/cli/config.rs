//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Omitted keys take defaults;
//! unknown or repeated keys are rejected. Serialization lists every key in a
//! fixed order, so `parse ∘ serialize` is the identity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::datakit::ToySpec;
use crate::diffnet::{Dtype, InputShape, NetworkSpec};
use crate::distill::{DistillConfig, LabelMode};
use crate::evalharness::EvalConfig;
use crate::trajstore::{MatchingRangeSchedule, SgdConfig};
use crate::{ConfigError, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // toy data
    pub classes: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub layout: InputShape,
    pub separation: f64,
    pub noise: f64,
    pub data_seed: u64,
    pub normalize: bool,
    // surrogate network
    pub arch: NetworkSpec,
    // experts
    pub experts: usize,
    pub expert_epochs: usize,
    pub expert_lr: f64,
    pub expert_momentum: f64,
    pub expert_batch: usize,
    // distillation
    pub n_steps: usize,
    pub m_gap: usize,
    pub t_minus: usize,
    pub t_init: usize,
    pub t_plus: usize,
    pub interval: usize,
    pub iterations: usize,
    pub syn_batch: usize,
    pub ipc: usize,
    pub label_mode: LabelMode,
    pub lr_images: f64,
    pub momentum_images: f64,
    pub lr_label: f64,
    pub lr_alpha: f64,
    pub per_step_alpha: bool,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub precision: Dtype,
    // evaluation
    pub eval_epochs: usize,
    pub eval_lr: f64,
    pub eval_momentum: f64,
    pub eval_batch: usize,
    pub eval_seeds: usize,
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let layout = InputShape::image(2, 8, 8);
        Self {
            classes: 4,
            samples_per_class: 100,
            test_per_class: 100,
            layout,
            separation: 4.0,
            noise: 1.5,
            data_seed: 7,
            normalize: true,
            arch: "in=2x8x8;dense:16:tanh;out=4".parse().unwrap(),
            experts: 5,
            expert_epochs: 40,
            expert_lr: 0.01,
            expert_momentum: 0.9,
            expert_batch: 32,
            n_steps: 10,
            m_gap: 2,
            t_minus: 0,
            t_init: 7,
            t_plus: 10,
            interval: 100,
            iterations: 1000,
            syn_batch: 1000,
            ipc: 3,
            label_mode: LabelMode::Hard,
            lr_images: 10.0,
            momentum_images: 0.5,
            lr_label: 10.0,
            lr_alpha: 3e-2,
            per_step_alpha: false,
            checkpoint_every: 500,
            seed: 0,
            precision: Dtype::Single,
            eval_epochs: 300,
            eval_lr: 0.01,
            eval_momentum: 0.9,
            eval_batch: 64,
            eval_seeds: 5,
            ablate_seeds: 5,
        }
    }
}

fn layout_text(l: InputShape) -> String {
    format!("{}x{}x{}", l.channels, l.height, l.width)
}

fn parse_layout(s: &str) -> std::result::Result<InputShape, String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("bad layout `{s}`"))?;
    match dims.as_slice() {
        [d] => Ok(InputShape::flat(*d)),
        [c, h, w] => Ok(InputShape::image(*c, *h, *w)),
        _ => Err(format!("layout must be D or CxHxW, got `{s}`")),
    }
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(s.to_string()),
    }
}

struct Slot<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Slot<'_> {
    fn parse<T: FromStr>(&self, expected: &'static str) -> std::result::Result<T, ConfigError> {
        self.value.parse().map_err(|_| ConfigError::Type {
            line: self.line,
            key: self.key.to_string(),
            value: self.value.to_string(),
            expected,
        })
    }

    fn with<T>(
        &self,
        expected: &'static str,
        f: impl FnOnce(&str) -> std::result::Result<T, String>,
    ) -> std::result::Result<T, ConfigError> {
        f(self.value).map_err(|_| ConfigError::Type {
            line: self.line,
            key: self.key.to_string(),
            value: self.value.to_string(),
            expected,
        })
    }
}

const UINT: &str = "unsigned integer";
const REAL: &str = "real number";

impl RunConfig {
    /// Every key with its current value, in serialization order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("classes", self.classes.to_string()),
            ("samples_per_class", self.samples_per_class.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("layout", layout_text(self.layout)),
            ("separation", self.separation.to_string()),
            ("noise", self.noise.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("normalize", self.normalize.to_string()),
            ("arch", self.arch.to_string()),
            ("experts", self.experts.to_string()),
            ("expert_epochs", self.expert_epochs.to_string()),
            ("expert_lr", self.expert_lr.to_string()),
            ("expert_momentum", self.expert_momentum.to_string()),
            ("expert_batch", self.expert_batch.to_string()),
            ("N", self.n_steps.to_string()),
            ("M", self.m_gap.to_string()),
            ("T_minus", self.t_minus.to_string()),
            ("T_init", self.t_init.to_string()),
            ("T_plus", self.t_plus.to_string()),
            ("interval", self.interval.to_string()),
            ("iterations", self.iterations.to_string()),
            ("syn_batch", self.syn_batch.to_string()),
            ("ipc", self.ipc.to_string()),
            ("label_mode", self.label_mode.to_string()),
            ("lr_images", self.lr_images.to_string()),
            ("momentum_images", self.momentum_images.to_string()),
            ("lr_label", self.lr_label.to_string()),
            ("lr_alpha", self.lr_alpha.to_string()),
            ("per_step_alpha", self.per_step_alpha.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("eval_epochs", self.eval_epochs.to_string()),
            ("eval_lr", self.eval_lr.to_string()),
            ("eval_momentum", self.eval_momentum.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
            ("eval_seeds", self.eval_seeds.to_string()),
            ("ablate_seeds", self.ablate_seeds.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    fn set(&mut self, s: &Slot<'_>) -> std::result::Result<(), ConfigError> {
        match s.key {
            "classes" => self.classes = s.parse(UINT)?,
            "samples_per_class" => self.samples_per_class = s.parse(UINT)?,
            "test_per_class" => self.test_per_class = s.parse(UINT)?,
            "layout" => self.layout = s.with("layout D or CxHxW", parse_layout)?,
            "separation" => self.separation = s.parse(REAL)?,
            "noise" => self.noise = s.parse(REAL)?,
            "data_seed" => self.data_seed = s.parse(UINT)?,
            "normalize" => self.normalize = s.with("boolean", parse_bool)?,
            "arch" => self.arch = s.with("network spec", |v| v.parse())?,
            "experts" => self.experts = s.parse(UINT)?,
            "expert_epochs" => self.expert_epochs = s.parse(UINT)?,
            "expert_lr" => self.expert_lr = s.parse(REAL)?,
            "expert_momentum" => self.expert_momentum = s.parse(REAL)?,
            "expert_batch" => self.expert_batch = s.parse(UINT)?,
            "N" => self.n_steps = s.parse(UINT)?,
            "M" => self.m_gap = s.parse(UINT)?,
            "T_minus" => self.t_minus = s.parse(UINT)?,
            "T_init" => self.t_init = s.parse(UINT)?,
            "T_plus" => self.t_plus = s.parse(UINT)?,
            "interval" => self.interval = s.parse(UINT)?,
            "iterations" => self.iterations = s.parse(UINT)?,
            "syn_batch" => self.syn_batch = s.parse(UINT)?,
            "ipc" => self.ipc = s.parse(UINT)?,
            "label_mode" => self.label_mode = s.with("hard or soft", |v| v.parse())?,
            "lr_images" => self.lr_images = s.parse(REAL)?,
            "momentum_images" => self.momentum_images = s.parse(REAL)?,
            "lr_label" => self.lr_label = s.parse(REAL)?,
            "lr_alpha" => self.lr_alpha = s.parse(REAL)?,
            "per_step_alpha" => self.per_step_alpha = s.with("boolean", parse_bool)?,
            "checkpoint_every" => self.checkpoint_every = s.parse(UINT)?,
            "seed" => self.seed = s.parse(UINT)?,
            "precision" => self.precision = s.with("single or double", |v| v.parse())?,
            "eval_epochs" => self.eval_epochs = s.parse(UINT)?,
            "eval_lr" => self.eval_lr = s.parse(REAL)?,
            "eval_momentum" => self.eval_momentum = s.parse(REAL)?,
            "eval_batch" => self.eval_batch = s.parse(UINT)?,
            "eval_seeds" => self.eval_seeds = s.parse(UINT)?,
            "ablate_seeds" => self.ablate_seeds = s.parse(UINT)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: s.line,
                    key: s.key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> std::result::Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut lines: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.trim().to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.trim().to_string(),
                });
            }
            if lines.contains_key(key) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            cfg.set(&Slot { line, key, value })?;
            lines.insert(key, line);
        }
        cfg.check(&lines)?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse_str(&text)?)
    }

    /// Range and cross-key checks. `lines` maps keys to where they were set;
    /// defaults report line 0.
    fn check(&self, lines: &BTreeMap<&str, usize>) -> std::result::Result<(), ConfigError> {
        let at = |key: &str| lines.get(key).copied().unwrap_or(0);
        let range = |key: &str, message: String| ConfigError::Range {
            line: at(key),
            key: key.to_string(),
            message,
        };
        let positive_ints = [
            ("classes", self.classes),
            ("samples_per_class", self.samples_per_class),
            ("test_per_class", self.test_per_class),
            ("experts", self.experts),
            ("expert_epochs", self.expert_epochs),
            ("expert_batch", self.expert_batch),
            ("N", self.n_steps),
            ("M", self.m_gap),
            ("interval", self.interval),
            ("iterations", self.iterations),
            ("syn_batch", self.syn_batch),
            ("ipc", self.ipc),
            ("eval_batch", self.eval_batch),
            ("eval_seeds", self.eval_seeds),
            ("ablate_seeds", self.ablate_seeds),
        ];
        for (key, v) in positive_ints {
            if v == 0 {
                return Err(range(key, "must be ≥ 1".into()));
            }
        }
        if self.classes < 2 {
            return Err(range("classes", format!("need ≥ 2 classes, got {}", self.classes)));
        }
        for (key, v) in [("separation", self.separation), ("noise", self.noise)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(range(key, format!("must be > 0, got {v}")));
            }
        }
        for (key, v) in [
            ("expert_lr", self.expert_lr),
            ("lr_images", self.lr_images),
            ("lr_label", self.lr_label),
            ("lr_alpha", self.lr_alpha),
            ("eval_lr", self.eval_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(range(key, format!("must be ≥ 0, got {v}")));
            }
        }
        if self.expert_lr.is_nan() || self.expert_lr <= 0.0 {
            return Err(range(
                "expert_lr",
                "must be > 0 (it also seeds the inner learning rate)".into(),
            ));
        }
        for (key, v) in [
            ("expert_momentum", self.expert_momentum),
            ("momentum_images", self.momentum_images),
            ("eval_momentum", self.eval_momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(range(key, format!("must be in [0, 1), got {v}")));
            }
        }
        if self.layout.dim() == 0 {
            return Err(range("layout", "dimension must be ≥ 1".into()));
        }
        if self.classes > self.layout.dim() {
            return Err(range(
                "classes",
                format!(
                    "{} classes exceed the {} input dimensions",
                    self.classes,
                    self.layout.dim()
                ),
            ));
        }
        if self.ipc > self.samples_per_class {
            return Err(range(
                "ipc",
                format!("ipc {} exceeds samples_per_class {}", self.ipc, self.samples_per_class),
            ));
        }
        if self.t_minus > self.t_init {
            return Err(range(
                "T_minus",
                format!("T_minus = {} exceeds T_init = {}", self.t_minus, self.t_init),
            ));
        }
        if self.t_init > self.t_plus {
            let key = if at("T_init") >= at("T_plus") {
                "T_init"
            } else {
                "T_plus"
            };
            return Err(range(
                key,
                format!(
                    "T_init = {} exceeds T_plus = {} (need T_init ≤ T_plus)",
                    self.t_init, self.t_plus
                ),
            ));
        }
        if self.t_plus + self.m_gap > self.expert_epochs {
            return Err(range(
                "T_plus",
                format!(
                    "T_plus + M = {} exceeds expert_epochs = {}",
                    self.t_plus + self.m_gap,
                    self.expert_epochs
                ),
            ));
        }
        if let Err(e) = self.arch.validate() {
            return Err(range("arch", e.to_string()));
        }
        if self.arch.input != self.layout || self.arch.classes != self.classes {
            return Err(range(
                "arch",
                format!(
                    "network `{}` does not match layout {} with {} classes",
                    self.arch,
                    layout_text(self.layout),
                    self.classes
                ),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        self.check(&BTreeMap::new())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// Write the effective config for provenance.
    pub fn echo(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    pub fn toy_spec(&self) -> ToySpec {
        ToySpec {
            classes: self.classes,
            samples_per_class: self.samples_per_class,
            layout: self.layout,
            separation: self.separation,
            noise: self.noise,
            seed: self.data_seed,
        }
    }

    pub fn expert_sgd(&self) -> SgdConfig {
        SgdConfig {
            epochs: self.expert_epochs,
            lr: self.expert_lr,
            momentum: self.expert_momentum,
            batch_size: self.expert_batch,
        }
    }

    pub fn schedule(&self) -> MatchingRangeSchedule {
        MatchingRangeSchedule::new(self.t_minus, self.t_init, self.t_plus, self.interval)
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            inner_steps: self.n_steps,
            expert_gap: self.m_gap,
            schedule: self.schedule(),
            iterations: self.iterations,
            syn_batch: self.syn_batch,
            ipc: self.ipc,
            label_mode: self.label_mode,
            lr_images: self.lr_images,
            momentum_images: self.momentum_images,
            lr_labels: self.lr_label,
            lr_alpha: self.lr_alpha,
            per_step_alpha: self.per_step_alpha,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
            precision: self.precision,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            spec: self.arch.clone(),
            sgd: SgdConfig {
                epochs: self.eval_epochs,
                lr: self.eval_lr,
                momentum: self.eval_momentum,
                batch_size: self.eval_batch,
            },
            seeds: self.eval_seeds,
            base_seed: self.seed,
        }
    }
}
