//! Evaluation by retraining from scratch on distilled images with labels
//! regenerated in default order, plus the label-consistency audit.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::datakit::export::{LABELS_FILE, META_FILE, SOFT_LABELS_FILE};
use crate::datakit::{import_distilled, stratified_subset, Dataset};
use crate::diffnet::{argmax, Dtype, Mat, Network, NetworkSpec};
use crate::distill::SyntheticDataset;
use crate::exec::{derive_seed, map_indexed, rng_from};
use crate::trajstore::{train_sgd, SgdConfig};
use crate::{Error, Result};

/// `i ↦ ⌊i / ipc⌋` for `i < classes · ipc`.
pub fn default_labels(classes: usize, ipc: usize) -> Vec<usize> {
    (0..classes * ipc).map(|i| i / ipc.max(1)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub spec: NetworkSpec,
    pub sgd: SgdConfig,
    /// Number of evaluation seeds; seed `k` is `base_seed + k`.
    pub seeds: usize,
    pub base_seed: u64,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Validation("evaluation needs ≥ 1 seed".into()));
        }
        self.sgd.validate()?;
        self.spec.validate()
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|k| self.base_seed.wrapping_add(k)).collect()
    }

    /// Hex SHA-256 of the settings that determine a report.
    pub fn digest(&self) -> String {
        let text = format!(
            "spec={};epochs={};lr={};momentum={};batch={};seeds={};base={}",
            self.spec, self.sgd.epochs, self.sgd.lr, self.sgd.momentum, self.sgd.batch_size, self.seeds, self.base_seed
        );
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
    pub config_digest: String,
}

impl EvalReport {
    pub fn from_runs(seeds: Vec<u64>, accuracies: Vec<f64>, config_digest: String) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self {
            seeds,
            accuracies,
            mean,
            std,
            config_digest,
        }
    }

    /// `seed,accuracy` rows followed by a `# mean=… std=…` summary line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,accuracy\n");
        for (seed, acc) in self.seeds.iter().zip(&self.accuracies) {
            writeln!(s, "{seed},{acc}").unwrap();
        }
        writeln!(
            s,
            "# mean={} std={} n={} config={}",
            self.mean,
            self.std,
            self.accuracies.len(),
            self.config_digest
        )
        .unwrap();
        s
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Train a fresh network per seed on `images` with default-order labels and
/// report test accuracy. Nothing but the pixels of the distilled set is read.
pub fn evaluate(images: &Mat, classes: usize, ipc: usize, test: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if classes == 0 || ipc == 0 || images.rows() != classes * ipc {
        return Err(Error::Shape(format!(
            "{} distilled rows, expected classes × ipc = {classes} × {ipc}",
            images.rows()
        )));
    }
    if images.cols() != test.inputs.cols() {
        return Err(Error::Shape(format!(
            "distilled rows have {} values, test rows have {}",
            images.cols(),
            test.inputs.cols()
        )));
    }
    if classes != test.classes || cfg.spec.classes != classes {
        return Err(Error::Shape(format!(
            "class counts disagree: distilled {classes}, test {}, network {}",
            test.classes, cfg.spec.classes
        )));
    }
    let net = Network::new(cfg.spec.clone())?;
    net.check_inputs(images)?;
    let labels = default_labels(classes, ipc);
    let seeds = cfg.seed_list();
    let runs = map_indexed(seeds.len(), |k| -> Result<f64> {
        let seed = seeds[k];
        let init = net.init_params(&mut rng_from(derive_seed(seed, 0)), Dtype::Double);
        let mut rng = rng_from(derive_seed(seed, 1));
        let params = train_sgd(&net, init, images, &labels, &cfg.sgd, &mut rng, |_, _| Ok(()))?;
        net.accuracy(&params, &test.inputs, &test.labels)
    });
    let accuracies = runs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_runs(seeds, accuracies, cfg.digest()))
}

/// Same protocol on a class-stratified random subset of the real train set.
pub fn baseline_random_subset(
    real: &Dataset,
    test: &Dataset,
    ipc: usize,
    cfg: &EvalConfig,
    subset_seed: u64,
) -> Result<EvalReport> {
    let rows = stratified_subset(real, ipc, &mut rng_from(subset_seed))?;
    evaluate(&real.inputs.select_rows(&rows), real.classes, ipc, test, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelMismatch {
    pub index: usize,
    pub stored: usize,
    pub expected: usize,
}

/// Rows whose stored label (or soft-row argmax) differs from the default
/// order.
pub fn label_consistency_check(syn: &SyntheticDataset) -> Vec<LabelMismatch> {
    let expected = default_labels(syn.classes(), syn.ipc());
    let stored: Vec<usize> = match syn.label_logits() {
        Some(l) => (0..l.rows()).map(|r| argmax(l.row(r))).collect(),
        None => syn.hard_labels().to_vec(),
    };
    stored
        .into_iter()
        .zip(expected)
        .enumerate()
        .filter(|(_, (s, e))| s != e)
        .map(|(index, (stored, expected))| LabelMismatch {
            index,
            stored,
            expected,
        })
        .collect()
}

/// Audit an export directory; fails if it carries no label information.
pub fn audit_export(dir: &Path) -> Result<Vec<LabelMismatch>> {
    if !dir.join(META_FILE).is_file() {
        return Err(Error::Audit(format!("{}: no {META_FILE}", dir.display())));
    }
    if !dir.join(LABELS_FILE).is_file() && !dir.join(SOFT_LABELS_FILE).is_file() {
        return Err(Error::Audit(format!(
            "{}: neither {LABELS_FILE} nor {SOFT_LABELS_FILE} present",
            dir.display()
        )));
    }
    Ok(label_consistency_check(&import_distilled(dir)?))
}
