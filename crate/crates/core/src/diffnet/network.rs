//! Surrogate network descriptors and the compiled forward graph.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::graph::{Graph, IndexMap, Var, ZERO_SLOT};
use super::mat::Mat;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

/// Channel-first input layout. Flat inputs use `channels = dim, height = width = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn flat(dim: usize) -> Self {
        Self {
            channels: dim,
            height: 1,
            width: 1,
        }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Dense {
        width: usize,
        activation: Activation,
    },
    /// Stride 1, zero "same" padding, odd square kernel.
    Conv {
        channels: usize,
        kernel: usize,
        activation: Activation,
    },
    AvgPool {
        size: usize,
    },
}

/// Architecture descriptor: input layout, hidden layers and a final dense
/// classifier with `classes` outputs.
///
/// The text form (`Display`/`FromStr`) is canonical, e.g.
/// `in=2x8x8;conv:4:3:tanh;pool:2;dense:32:tanh;out=4`. Append `:nobias` to
/// the `out` term to drop the classifier bias.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub hidden: Vec<LayerSpec>,
    pub classes: usize,
    pub output_bias: bool,
}

impl NetworkSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], activation: Activation, classes: usize) -> Self {
        Self {
            input: InputShape::flat(input_dim),
            hidden: hidden
                .iter()
                .map(|&width| LayerSpec::Dense { width, activation })
                .collect(),
            classes,
            output_bias: true,
        }
    }

    pub fn linear(input_dim: usize, classes: usize, bias: bool) -> Self {
        Self {
            input: InputShape::flat(input_dim),
            hidden: Vec::new(),
            classes,
            output_bias: bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.dim()
    }

    /// Parameter count; fails on an inconsistent layer stack.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.plan()?.1)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    /// Per-layer plan with parameter offsets, plus the total count.
    fn plan(&self) -> Result<(Vec<PlannedLayer>, usize)> {
        if self.classes < 2 {
            return Err(Error::Validation(format!(
                "network needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.input.dim() == 0 {
            return Err(Error::Validation("network input dimension is 0".into()));
        }
        let mut shape = self.input;
        let mut offset = 0usize;
        let mut layers = Vec::with_capacity(self.hidden.len() + 1);
        let mut seen_dense = false;
        for layer in &self.hidden {
            match *layer {
                LayerSpec::Dense { width, activation } => {
                    if width == 0 {
                        return Err(Error::Validation("dense layer width 0".into()));
                    }
                    let fan_in = shape.dim();
                    layers.push(PlannedLayer::Dense {
                        fan_in,
                        fan_out: width,
                        weight_offset: offset,
                        bias_offset: Some(offset + fan_in * width),
                        activation,
                    });
                    offset += fan_in * width + width;
                    shape = InputShape::flat(width);
                    seen_dense = true;
                }
                LayerSpec::Conv {
                    channels,
                    kernel,
                    activation,
                } => {
                    if seen_dense {
                        return Err(Error::Validation("conv layer after a dense layer".into()));
                    }
                    if channels == 0 || kernel == 0 || kernel % 2 == 0 {
                        return Err(Error::Validation(format!(
                            "conv layer needs channels > 0 and an odd kernel, got {channels}/{kernel}"
                        )));
                    }
                    let fan_in = shape.channels * kernel * kernel;
                    layers.push(PlannedLayer::Conv {
                        input: shape,
                        out_channels: channels,
                        kernel,
                        weight_offset: offset,
                        bias_offset: offset + channels * fan_in,
                        activation,
                    });
                    offset += channels * fan_in + channels;
                    shape = InputShape::image(channels, shape.height, shape.width);
                }
                LayerSpec::AvgPool { size } => {
                    if size == 0 || !shape.height.is_multiple_of(size) || !shape.width.is_multiple_of(size) {
                        return Err(Error::Validation(format!(
                            "pool size {size} does not divide {}x{}",
                            shape.height, shape.width
                        )));
                    }
                    layers.push(PlannedLayer::Pool { input: shape, size });
                    shape = InputShape::image(shape.channels, shape.height / size, shape.width / size);
                }
            }
        }
        let fan_in = shape.dim();
        layers.push(PlannedLayer::Dense {
            fan_in,
            fan_out: self.classes,
            weight_offset: offset,
            bias_offset: self.output_bias.then_some(offset + fan_in * self.classes),
            activation: Activation::Identity,
        });
        offset += fan_in * self.classes + if self.output_bias { self.classes } else { 0 };
        Ok((layers, offset))
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let InputShape {
            channels,
            height,
            width,
        } = self.input;
        if height == 1 && width == 1 {
            write!(f, "in={channels}")?;
        } else {
            write!(f, "in={channels}x{height}x{width}")?;
        }
        for layer in &self.hidden {
            match layer {
                LayerSpec::Dense { width, activation } => write!(f, ";dense:{width}:{}", activation.name())?,
                LayerSpec::Conv {
                    channels,
                    kernel,
                    activation,
                } => write!(f, ";conv:{channels}:{kernel}:{}", activation.name())?,
                LayerSpec::AvgPool { size } => write!(f, ";pool:{size}")?,
            }
        }
        write!(f, ";out={}", self.classes)?;
        if !self.output_bias {
            write!(f, ":nobias")?;
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let num = |t: &str| t.parse::<usize>().map_err(|_| format!("bad integer `{t}`"));
        let mut parts = s.split(';').map(str::trim);
        let input = parts
            .next()
            .and_then(|p| p.strip_prefix("in="))
            .ok_or_else(|| "spec must start with `in=`".to_string())?;
        let dims: Vec<usize> = input.split('x').map(num).collect::<std::result::Result<_, _>>()?;
        let input = match dims.as_slice() {
            [d] => InputShape::flat(*d),
            [c, h, w] => InputShape::image(*c, *h, *w),
            _ => return Err(format!("bad input shape `{input}`")),
        };
        let mut hidden = Vec::new();
        let mut out = None;
        for part in parts {
            let fields: Vec<&str> = part.split(':').collect();
            match fields.as_slice() {
                ["dense", w, act] => hidden.push(LayerSpec::Dense {
                    width: num(w)?,
                    activation: act.parse()?,
                }),
                ["conv", c, k, act] => hidden.push(LayerSpec::Conv {
                    channels: num(c)?,
                    kernel: num(k)?,
                    activation: act.parse()?,
                }),
                ["pool", size] => hidden.push(LayerSpec::AvgPool { size: num(size)? }),
                [o] if o.starts_with("out=") => out = Some((num(&o[4..])?, true)),
                [o, "nobias"] if o.starts_with("out=") => out = Some((num(&o[4..])?, false)),
                _ => return Err(format!("bad layer term `{part}`")),
            }
        }
        let (classes, output_bias) = out.ok_or_else(|| "spec must end with `out=C`".to_string())?;
        Ok(NetworkSpec {
            input,
            hidden,
            classes,
            output_bias,
        })
    }
}

#[derive(Debug, Clone)]
enum PlannedLayer {
    Dense {
        fan_in: usize,
        fan_out: usize,
        weight_offset: usize,
        bias_offset: Option<usize>,
        activation: Activation,
    },
    Conv {
        input: InputShape,
        out_channels: usize,
        kernel: usize,
        weight_offset: usize,
        bias_offset: usize,
        activation: Activation,
    },
    Pool {
        input: InputShape,
        size: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    Single,
    Double,
}

impl Dtype {
    /// Byte width, also the on-disk tag.
    pub fn tag(self) -> u8 {
        match self {
            Dtype::Single => 4,
            Dtype::Double => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(Dtype::Single),
            8 => Some(Dtype::Double),
            _ => None,
        }
    }

    /// Round `v` to the nearest representable value of this precision.
    pub fn round(self, v: f64) -> f64 {
        match self {
            Dtype::Single => v as f32 as f64,
            Dtype::Double => v,
        }
    }
}

impl FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" | "f32" => Ok(Dtype::Single),
            "double" | "f64" => Ok(Dtype::Double),
            other => Err(format!("unknown precision `{other}`")),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::Single => "single",
            Dtype::Double => "double",
        })
    }
}

/// Flat parameter vector. Arithmetic is carried out in `f64`; under
/// [`Dtype::Single`] the stored values are kept exactly representable as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    dtype: Dtype,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, dtype: Dtype) -> Self {
        let values = match dtype {
            Dtype::Double => values,
            Dtype::Single => values.into_iter().map(|v| dtype.round(v)).collect(),
        };
        Self { values, dtype }
    }

    pub fn zeros(len: usize, dtype: Dtype) -> Self {
        Self::new(vec![0.0; len], dtype)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn dist_sq(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn to_row(&self) -> Mat {
        Mat::row_vector(self.values.clone())
    }
}

/// Spec compiled into parameter layout and cached constant operators.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<PlannedLayer>,
    param_count: usize,
    pool_mats: Vec<Option<Arc<Mat>>>,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let (layers, param_count) = spec.plan()?;
        let pool_mats = layers
            .iter()
            .map(|l| match *l {
                PlannedLayer::Pool { input, size } => Some(Arc::new(pool_matrix(input, size))),
                _ => None,
            })
            .collect();
        Ok(Self {
            spec,
            layers,
            param_count,
            pool_mats,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, dtype: Dtype) -> ParamVector {
        let mut values = vec![0.0; self.param_count];
        for layer in &self.layers {
            let (offset, count, fan_in, fan_out) = match *layer {
                PlannedLayer::Dense {
                    fan_in,
                    fan_out,
                    weight_offset,
                    ..
                } => (weight_offset, fan_in * fan_out, fan_in, fan_out),
                PlannedLayer::Conv {
                    input,
                    out_channels,
                    kernel,
                    weight_offset,
                    ..
                } => {
                    let k2 = kernel * kernel;
                    (
                        weight_offset,
                        out_channels * input.channels * k2,
                        input.channels * k2,
                        out_channels * k2,
                    )
                }
                PlannedLayer::Pool { .. } => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            for v in &mut values[offset..offset + count] {
                *v = dist.sample(rng);
            }
        }
        ParamVector::new(values, dtype)
    }

    pub(crate) fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, network expects {}",
                params.len(),
                self.param_count
            )));
        }
        if !params.is_finite() {
            return Err(Error::Numeric("parameter vector contains non-finite entries".into()));
        }
        Ok(())
    }

    pub(crate) fn check_inputs(&self, inputs: &Mat) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "inputs have {} columns, network expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Record the forward pass. `theta` is a `1×P` node, `x` is `B×D`.
    pub fn forward_graph(&self, g: &mut Graph, theta: Var, x: Var) -> Var {
        let p = self.param_count;
        let batch = g.value(x).rows();
        let mut h = x;
        for (layer, pool) in self.layers.iter().zip(&self.pool_mats) {
            h = match *layer {
                PlannedLayer::Dense {
                    fan_in,
                    fan_out,
                    weight_offset,
                    bias_offset,
                    activation,
                } => {
                    // weights stored (out, in) row-major; gather them transposed.
                    let index = (0..fan_in)
                        .flat_map(|i| (0..fan_out).map(move |o| (weight_offset + o * fan_in + i) as u32))
                        .collect();
                    let wt = g.gather(theta, IndexMap::new(index, (fan_in, fan_out), (1, p)));
                    let mut z = g.matmul(h, wt);
                    if let Some(b) = bias_offset {
                        let bias = g.gather(theta, slice_map(b, fan_out, p));
                        z = g.add_row(z, bias);
                    }
                    activation.apply(g, z)
                }
                PlannedLayer::Conv {
                    input,
                    out_channels,
                    kernel,
                    weight_offset,
                    bias_offset,
                    activation,
                } => {
                    let hw = input.height * input.width;
                    let patch = input.channels * kernel * kernel;
                    let cols = g.gather(h, im2col_map(input, kernel, batch));
                    let index = (0..patch)
                        .flat_map(|j| (0..out_channels).map(move |o| (weight_offset + o * patch + j) as u32))
                        .collect();
                    let wt = g.gather(theta, IndexMap::new(index, (patch, out_channels), (1, p)));
                    let z = g.matmul(cols, wt);
                    let bias = g.gather(theta, slice_map(bias_offset, out_channels, p));
                    let z = g.add_row(z, bias);
                    let z = activation.apply(g, z);
                    // (B·HW, Cout) → (B, Cout·HW), channel-first.
                    let index = (0..batch)
                        .flat_map(|b| {
                            (0..out_channels)
                                .flat_map(move |o| (0..hw).map(move |px| ((b * hw + px) * out_channels + o) as u32))
                        })
                        .collect();
                    g.gather(
                        z,
                        IndexMap::new(index, (batch, out_channels * hw), (batch * hw, out_channels)),
                    )
                }
                PlannedLayer::Pool { .. } => {
                    let pool = pool.as_ref().expect("pool matrix compiled");
                    let pm = g.leaf(Mat::clone(pool));
                    g.matmul(h, pm)
                }
            };
        }
        h
    }

    /// Logits for a batch of inputs.
    pub fn logits(&self, params: &ParamVector, inputs: &Mat) -> Result<Mat> {
        self.check_params(params)?;
        self.check_inputs(inputs)?;
        let mut g = Graph::new();
        let theta = g.leaf(params.to_row());
        let x = g.leaf(inputs.clone());
        let out = self.forward_graph(&mut g, theta, x);
        Ok(g.value(out).clone())
    }

    /// Fraction of rows whose argmax logit equals the label.
    pub fn accuracy(&self, params: &ParamVector, inputs: &Mat, labels: &[usize]) -> Result<f64> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape("accuracy: inputs and labels disagree in length".into()));
        }
        if labels.is_empty() {
            return Ok(0.0);
        }
        let logits = self.logits(params, inputs)?;
        let correct = (0..logits.rows())
            .filter(|&r| argmax(logits.row(r)) == labels[r])
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

/// Index of the maximum entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn slice_map(offset: usize, len: usize, p: usize) -> Arc<IndexMap> {
    IndexMap::new((offset..offset + len).map(|i| i as u32).collect(), (1, len), (1, p))
}

fn im2col_map(input: InputShape, kernel: usize, batch: usize) -> Arc<IndexMap> {
    let InputShape {
        channels,
        height,
        width,
    } = input;
    let pad = (kernel / 2) as isize;
    let dim = input.dim();
    let patch = channels * kernel * kernel;
    let mut index = Vec::with_capacity(batch * height * width * patch);
    for b in 0..batch {
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    for dy in 0..kernel {
                        for dx in 0..kernel {
                            let yy = y as isize + dy as isize - pad;
                            let xx = x as isize + dx as isize - pad;
                            if yy < 0 || xx < 0 || yy >= height as isize || xx >= width as isize {
                                index.push(ZERO_SLOT);
                            } else {
                                let src = b * dim + c * height * width + yy as usize * width + xx as usize;
                                index.push(src as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    IndexMap::new(index, (batch * height * width, patch), (batch, dim))
}

fn pool_matrix(input: InputShape, size: usize) -> Mat {
    let (oh, ow) = (input.height / size, input.width / size);
    let mut m = Mat::zeros(input.dim(), input.channels * oh * ow);
    let w = 1.0 / (size * size) as f64;
    for c in 0..input.channels {
        for y in 0..input.height {
            for x in 0..input.width {
                let src = c * input.height * input.width + y * input.width + x;
                let dst = c * oh * ow + (y / size) * ow + x / size;
                m.set(src, dst, w);
            }
        }
    }
    m
}
