//! Distilled-dataset directory: `images.bin`, `labels.txt` or `soft_labels.bin`,
//! and `meta.txt`.
//!
//! Matrix files are little-endian: magic `DIMG`, `u32` version, `u32` rows,
//! `u32` columns, `u8` dtype tag (4 or 8), then row-major values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::datakit::NormStats;
use crate::diffnet::{Dtype, InputShape, Mat};
use crate::distill::{LabelMode, SyntheticDataset};
use crate::error::ExportError;
use crate::{Error, FormatError, Result};

pub const MATRIX_MAGIC: [u8; 4] = *b"DIMG";
pub const MATRIX_VERSION: u32 = 1;
const MATRIX_HEADER: usize = 4 + 4 + 4 + 4 + 1;

pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.txt";
pub const SOFT_LABELS_FILE: &str = "soft_labels.bin";
pub const META_FILE: &str = "meta.txt";

pub fn encode_matrix(m: &Mat, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(MATRIX_HEADER + m.as_slice().len() * dtype.tag() as usize);
    out.extend_from_slice(&MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    out.push(dtype.tag());
    for &v in m.as_slice() {
        match dtype {
            Dtype::Single => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::Double => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<(Mat, Dtype), FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            expected: MATRIX_HEADER,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MATRIX_MAGIC {
        return Err(FormatError::BadMagic {
            expected: MATRIX_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < MATRIX_HEADER {
        return Err(FormatError::Truncated {
            expected: MATRIX_HEADER,
            actual: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != MATRIX_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let rows = u32_at(8) as usize;
    let cols = u32_at(12) as usize;
    let dtype = Dtype::from_tag(bytes[16]).ok_or(FormatError::BadDtype(bytes[16]))?;
    let width = dtype.tag() as usize;
    let expected = MATRIX_HEADER + rows * cols * width;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes(bytes.len() - expected));
    }
    let data = bytes[MATRIX_HEADER..]
        .chunks_exact(width)
        .map(|c| match dtype {
            Dtype::Single => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            Dtype::Double => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect();
    Ok((Mat::from_vec(rows, cols, data), dtype))
}

pub fn write_matrix(path: &Path, m: &Mat, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_matrix(m, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<(Mat, Dtype)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn meta_text(syn: &SyntheticDataset) -> String {
    let l = syn.layout();
    let mut s = String::new();
    s += &format!("classes = {}\n", syn.classes());
    s += &format!("ipc = {}\n", syn.ipc());
    s += &format!("mode = {}\n", syn.mode());
    s += &format!("alpha = {}\n", syn.alpha());
    if let Some(a) = syn.step_alphas() {
        s += &format!("step_alpha = {}\n", join(a));
    }
    s += &format!("precision = {}\n", syn.precision());
    s += &format!("layout = {}x{}x{}\n", l.channels, l.height, l.width);
    if let Some(n) = syn.norm() {
        s += &format!("norm_mean = {}\n", join(&n.mean));
        s += &format!("norm_std = {}\n", join(&n.std));
    }
    s
}

/// Write `syn` into directory `dir` (created if needed).
pub fn export_distilled(dir: &Path, syn: &SyntheticDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix(&dir.join(IMAGES_FILE), syn.images(), syn.precision())?;
    match syn.label_logits() {
        None => {
            let text: String = syn.hard_labels().iter().map(|l| format!("{l}\n")).collect();
            let p = dir.join(LABELS_FILE);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Some(logits) => write_matrix(&dir.join(SOFT_LABELS_FILE), logits, syn.precision())?,
    }
    let p = dir.join(META_FILE);
    fs::write(&p, meta_text(syn)).map_err(|e| Error::io(&p, e))
}

pub(crate) fn parse_meta(text: &str) -> std::result::Result<BTreeMap<String, String>, ExportError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ExportError::Meta(format!("line {}: expected `key = value`", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn meta_field<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> std::result::Result<T, ExportError> {
    let raw = meta
        .get(key)
        .ok_or_else(|| ExportError::Meta(format!("missing key `{key}`")))?;
    raw.parse()
        .map_err(|_| ExportError::Meta(format!("cannot parse `{key} = {raw}`")))
}

fn float_list(raw: &str) -> std::result::Result<Vec<f64>, ExportError> {
    raw.split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| ExportError::Meta(format!("bad number list `{raw}`")))
}

/// Read back a directory written by [`export_distilled`].
pub fn import_distilled(dir: &Path) -> Result<SyntheticDataset> {
    let export_err = |source| Error::Export {
        path: dir.to_path_buf(),
        source,
    };
    let require = |name: &'static str| {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(export_err(ExportError::MissingFile(name)))
        }
    };
    let meta_path = require(META_FILE)?;
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = parse_meta(&meta_text).map_err(export_err)?;
    let classes: usize = meta_field(&meta, "classes").map_err(export_err)?;
    let ipc: usize = meta_field(&meta, "ipc").map_err(export_err)?;
    let mode: LabelMode = meta_field(&meta, "mode").map_err(export_err)?;
    let alpha: f64 = meta_field(&meta, "alpha").map_err(export_err)?;
    let precision: Dtype = meta_field(&meta, "precision").map_err(export_err)?;
    let layout_raw: String = meta_field(&meta, "layout").map_err(export_err)?;
    let dims: Vec<usize> = layout_raw
        .split('x')
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| export_err(ExportError::Meta(format!("bad layout `{layout_raw}`"))))?;
    let layout = match dims.as_slice() {
        [c, h, w] => InputShape::image(*c, *h, *w),
        _ => return Err(export_err(ExportError::Meta(format!("bad layout `{layout_raw}`")))),
    };
    let norm = match (meta.get("norm_mean"), meta.get("norm_std")) {
        (Some(m), Some(s)) => Some(NormStats {
            mean: float_list(m).map_err(export_err)?,
            std: float_list(s).map_err(export_err)?,
        }),
        (None, None) => None,
        _ => {
            return Err(export_err(ExportError::Meta(
                "norm_mean and norm_std must appear together".into(),
            )))
        }
    };

    let (images, _) = read_matrix(&require(IMAGES_FILE)?)?;
    let expected = classes * ipc;
    if images.rows() != expected {
        return Err(export_err(ExportError::RowCount {
            expected,
            found: images.rows(),
        }));
    }
    let (hard_labels, logits) = match mode {
        LabelMode::Hard => {
            let p = require(LABELS_FILE)?;
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let labels: Vec<usize> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| {
                    l.trim()
                        .parse()
                        .map_err(|_| ExportError::Labels(format!("line {}: `{l}` is not a class index", i + 1)))
                })
                .collect::<std::result::Result<_, _>>()
                .map_err(export_err)?;
            if labels.len() != expected {
                return Err(export_err(ExportError::RowCount {
                    expected,
                    found: labels.len(),
                }));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(export_err(ExportError::Labels(format!(
                    "label {bad} outside [0, {classes}) for classes = {classes}"
                ))));
            }
            (labels, None)
        }
        LabelMode::Soft => {
            let (logits, _) = read_matrix(&require(SOFT_LABELS_FILE)?)?;
            if logits.shape() != (expected, classes) {
                return Err(export_err(ExportError::Labels(format!(
                    "soft label matrix is {:?}, expected ({expected}, {classes})",
                    logits.shape()
                ))));
            }
            (crate::evalharness::default_labels(classes, ipc), Some(logits))
        }
    };
    let syn = SyntheticDataset::from_parts(
        images,
        classes,
        ipc,
        hard_labels,
        logits,
        alpha,
        layout,
        norm,
        precision,
    )?;
    match meta.get("step_alpha") {
        Some(raw) => {
            let mut syn = syn.with_step_alphas(float_list(raw).map_err(export_err)?)?;
            // keep the stored mean bit for bit; it was rounded before export
            syn.alpha = alpha;
            Ok(syn)
        }
        None => Ok(syn),
    }
}
