//! Toy datasets, normalization, distilled-set persistence and image grids.

pub mod export;
pub mod grid;

pub use export::{export_distilled, import_distilled, read_matrix, write_matrix};
pub use grid::{export_comparison_grid, export_image_grid, mean_abs_pixel_delta, render_grid, GridImage, GridLayout};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::diffnet::{InputShape, Mat};
use crate::exec::{derive_seed, rng_from};
use crate::{Error, Result};

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Mat,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub layout: InputShape,
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(inputs: Mat, labels: Vec<usize>, classes: usize, layout: InputShape) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if inputs.cols() != layout.dim() {
            return Err(Error::Shape(format!(
                "inputs have {} columns, layout needs {}",
                inputs.cols(),
                layout.dim()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("label {bad} outside [0, {classes})")));
        }
        let ds = Self {
            inputs,
            labels,
            classes,
            layout,
            norm: None,
        };
        if let Some(empty) = (0..classes).find(|&c| !ds.labels.contains(&c)) {
            return Err(Error::Validation(format!("class {empty} has no samples")));
        }
        if !ds.inputs.is_finite() {
            return Err(Error::Numeric("dataset inputs contain non-finite values".into()));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }

    /// Hex SHA-256 over shape, labels and the exact input bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.inputs.rows(), self.inputs.cols(), self.classes] {
            h.update((v as u64).to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for v in self.inputs.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Gaussian clusters around seeded class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub layout: InputShape,
    /// Pairwise distance between class prototypes.
    pub separation: f64,
    /// Per-pixel standard deviation of the sample noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            classes: 4,
            samples_per_class: 100,
            layout: InputShape::image(2, 8, 8),
            separation: 4.0,
            noise: 0.5,
            seed: 7,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Validation(format!(
                "toy dataset needs ≥ 2 classes, got {}",
                self.classes
            )));
        }
        if self.classes > self.layout.dim() {
            return Err(Error::Validation(format!(
                "{} classes do not fit orthogonal prototypes in {} dimensions",
                self.classes,
                self.layout.dim()
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Validation("samples_per_class must be ≥ 1".into()));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::Validation(format!(
                "separation must be > 0, got {}",
                self.separation
            )));
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::Validation(format!("noise must be > 0, got {}", self.noise)));
        }
        Ok(())
    }

    /// Class prototypes, each row at distance exactly `separation` from every
    /// other: an orthonormal set of spatially smoothed directions scaled by
    /// `separation / √2` around a mid-gray center.
    pub fn prototypes(&self) -> Result<Mat> {
        self.validate()?;
        let d = self.layout.dim();
        let mut rng = rng_from(derive_seed(self.seed, 0));
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        while basis.len() < self.classes {
            let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut v = smooth(&raw, self.layout);
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
        let scale = self.separation / std::f64::consts::SQRT_2;
        let data = basis
            .iter()
            .flat_map(|b| b.iter().map(move |x| 0.5 + scale * x))
            .collect();
        Ok(Mat::from_vec(self.classes, d, data))
    }

    fn sample_rows(&self, protos: &Mat, per_class: usize, stream: u64) -> Result<Dataset> {
        let d = self.layout.dim();
        let mut rng = rng_from(derive_seed(self.seed, stream));
        let mut data = Vec::with_capacity(self.classes * per_class * d);
        let mut labels = Vec::with_capacity(self.classes * per_class);
        for c in 0..self.classes {
            for _ in 0..per_class {
                for &p in protos.row(c) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(p + self.noise * z);
                }
                labels.push(c);
            }
        }
        Dataset::new(Mat::from_vec(labels.len(), d, data), labels, self.classes, self.layout)
    }
}

/// 3×3 box blur within each channel, so prototypes look like images.
fn smooth(v: &[f64], layout: InputShape) -> Vec<f64> {
    let InputShape {
        channels,
        height,
        width,
    } = layout;
    if height < 3 || width < 3 {
        return v.to_vec();
    }
    let mut out = vec![0.0; v.len()];
    for c in 0..channels {
        let base = c * height * width;
        for y in 0..height {
            for x in 0..width {
                let (mut s, mut n) = (0.0, 0.0);
                for yy in y.saturating_sub(1)..(y + 2).min(height) {
                    for xx in x.saturating_sub(1)..(x + 2).min(width) {
                        s += v[base + yy * width + xx];
                        n += 1.0;
                    }
                }
                out[base + y * width + x] = s / n;
            }
        }
    }
    out
}

/// Balanced, class-major toy dataset; deterministic in `spec`.
pub fn make_toy_dataset(spec: &ToySpec) -> Result<Dataset> {
    let protos = spec.prototypes()?;
    spec.sample_rows(&protos, spec.samples_per_class, 1)
}

/// Train set as [`make_toy_dataset`] plus an independent test draw around the
/// same prototypes.
pub fn make_toy_split(spec: &ToySpec, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    let protos = spec.prototypes()?;
    let train = spec.sample_rows(&protos, spec.samples_per_class, 1)?;
    let test = spec.sample_rows(&protos, test_per_class.max(1), 2)?;
    Ok((train, test))
}

/// Mean and population standard deviation of each channel.
pub fn channel_stats(dataset: &Dataset) -> NormStats {
    let InputShape {
        channels,
        height,
        width,
    } = dataset.layout;
    let hw = height * width;
    let count = (dataset.len() * hw).max(1) as f64;
    let mut mean = vec![0.0; channels];
    let mut std = vec![0.0; channels];
    for r in 0..dataset.len() {
        let row = dataset.inputs.row(r);
        for c in 0..channels {
            mean[c] += row[c * hw..(c + 1) * hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for r in 0..dataset.len() {
        let row = dataset.inputs.row(r);
        for c in 0..channels {
            std[c] += row[c * hw..(c + 1) * hw]
                .iter()
                .map(|x| (x - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / count).sqrt());
    NormStats { mean, std }
}

/// Standardize each channel with `stats`, or with the dataset's own stats.
pub fn normalize(dataset: &Dataset, stats: Option<&NormStats>) -> Result<Dataset> {
    let channels = dataset.layout.channels;
    let stats = match stats {
        Some(s) => s.clone(),
        None => channel_stats(dataset),
    };
    if stats.mean.len() != channels || stats.std.len() != channels {
        return Err(Error::Shape(format!(
            "normalization stats cover {} channels, dataset has {channels}",
            stats.std.len()
        )));
    }
    if let Some(c) = stats.std.iter().position(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Validation(format!(
            "channel {c} has non-positive std {}",
            stats.std[c]
        )));
    }
    let mut out = dataset.clone();
    let hw = dataset.layout.height * dataset.layout.width;
    for r in 0..out.len() {
        for (i, x) in out.inputs.row_mut(r).iter_mut().enumerate() {
            let c = i / hw;
            *x = (*x - stats.mean[c]) / stats.std[c];
        }
    }
    out.norm = Some(stats);
    Ok(out)
}

/// Invert [`normalize`] on a single flat row.
pub fn denormalize_row(row: &[f64], stats: &NormStats, layout: InputShape) -> Vec<f64> {
    let hw = layout.height * layout.width;
    row.iter()
        .enumerate()
        .map(|(i, &x)| x * stats.std[i / hw] + stats.mean[i / hw])
        .collect()
}

/// Class-stratified sample of `per_class` rows per class, placed class-major
/// and in source order within each class.
pub fn stratified_subset<R: Rng + ?Sized>(dataset: &Dataset, per_class: usize, rng: &mut R) -> Result<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut picked = Vec::with_capacity(dataset.classes * per_class);
    for (class, mut idx) in dataset.class_indices().into_iter().enumerate() {
        if idx.len() < per_class {
            return Err(Error::Init {
                class,
                available: idx.len(),
                required: per_class,
            });
        }
        idx.shuffle(rng);
        let chosen = &mut idx[..per_class];
        // source order within a class, so a full-size subset is the dataset itself
        chosen.sort_unstable();
        picked.extend_from_slice(chosen);
    }
    Ok(picked)
}
