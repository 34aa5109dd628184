//! Trajectory buffer files.
//!
//! Little-endian: magic `TRJB`, `u32` version, `u32`-length-prefixed UTF-8 spec
//! digest and dataset digest, `u64` seed, `u32` n, `u64` P, `u8` dtype tag,
//! `(n + 1)·P` values, then a CRC32 of every preceding byte.
//!
//! The training record (spec text, SGD settings, per-epoch metrics) goes to a
//! `key = value` sidecar at `<path>.train`, so the binary layout stays fixed
//! while a read-back trajectory still carries its full metadata.

use std::fs;
use std::path::{Path, PathBuf};

use crate::diffnet::{Dtype, ParamVector};
use crate::trajstore::{SgdConfig, TrainingRecord, Trajectory, TrajectoryMeta};
use crate::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"TRJB";
pub const VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".train");
    PathBuf::from(s)
}

pub fn encode_buffer(traj: &Trajectory) -> Vec<u8> {
    let m = &traj.meta;
    let width = m.dtype.tag() as usize;
    let mut out = Vec::with_capacity(64 + (m.epochs + 1) * m.param_count * width);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for s in [&m.spec_digest, &m.dataset_digest] {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    out.extend_from_slice(&m.seed.to_le_bytes());
    out.extend_from_slice(&(m.epochs as u32).to_le_bytes());
    out.extend_from_slice(&(m.param_count as u64).to_le_bytes());
    out.push(m.dtype.tag());
    for snap in &traj.snapshots {
        for &v in snap.as_slice() {
            match m.dtype {
                Dtype::Single => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::Double => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.saturating_add(n);
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, FormatError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| FormatError::BadUtf8)
    }
}

/// Parse a buffer; the training record is left empty.
pub fn decode_buffer(bytes: &[u8]) -> Result<Trajectory, FormatError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let spec_digest = c.string()?;
    let dataset_digest = c.string()?;
    let seed = c.u64()?;
    let epochs = c.u32()? as usize;
    let param_count = c.u64()? as usize;
    let tag = c.take(1)?[0];
    let dtype = Dtype::from_tag(tag).ok_or(FormatError::BadDtype(tag))?;
    let width = tag as usize;

    let payload = (epochs + 1)
        .checked_mul(param_count)
        .and_then(|v| v.checked_mul(width))
        .unwrap_or(usize::MAX);
    let expected = c.pos.saturating_add(payload).saturating_add(4);
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes(bytes.len() - expected));
    }
    let body_end = expected - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }

    let values = &bytes[c.pos..body_end];
    let snapshots = (0..=epochs)
        .map(|t| {
            let chunk = &values[t * param_count * width..(t + 1) * param_count * width];
            let v = chunk
                .chunks_exact(width)
                .map(|b| match dtype {
                    Dtype::Single => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                    Dtype::Double => f64::from_le_bytes(b.try_into().unwrap()),
                })
                .collect();
            ParamVector::new(v, dtype)
        })
        .collect();
    Ok(Trajectory {
        meta: TrajectoryMeta {
            spec_digest,
            dataset_digest,
            seed,
            epochs,
            param_count,
            dtype,
        },
        snapshots,
        training: None,
    })
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn training_text(r: &TrainingRecord) -> String {
    format!(
        "spec = {}\nepochs = {}\nlr = {}\nmomentum = {}\nbatch_size = {}\nepoch_loss = {}\nepoch_accuracy = {}\n",
        r.spec,
        r.sgd.epochs,
        r.sgd.lr,
        r.sgd.momentum,
        r.sgd.batch_size,
        join(&r.epoch_loss),
        join(&r.epoch_accuracy)
    )
}

fn parse_training(text: &str) -> std::result::Result<TrainingRecord, String> {
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("bad line `{line}`"))?;
        kv.insert(k.trim(), v.trim());
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| format!("missing `{k}`"));
    let num =
        |k: &str| -> std::result::Result<f64, String> { get(k)?.parse().map_err(|_| format!("bad number for `{k}`")) };
    let int = |k: &str| -> std::result::Result<usize, String> {
        get(k)?.parse().map_err(|_| format!("bad integer for `{k}`"))
    };
    let list = |k: &str| -> std::result::Result<Vec<f64>, String> {
        let raw = get(k)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|t| t.trim().parse().map_err(|_| format!("bad list for `{k}`")))
            .collect()
    };
    Ok(TrainingRecord {
        spec: get("spec")?.parse()?,
        sgd: SgdConfig {
            epochs: int("epochs")?,
            lr: num("lr")?,
            momentum: num("momentum")?,
            batch_size: int("batch_size")?,
        },
        epoch_loss: list("epoch_loss")?,
        epoch_accuracy: list("epoch_accuracy")?,
    })
}

/// Write the buffer and, when present, its training sidecar.
pub fn write_buffer(traj: &Trajectory, path: &Path) -> Result<()> {
    traj.validate()?;
    fs::write(path, encode_buffer(traj)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    match &traj.training {
        Some(r) => fs::write(&side, training_text(r)).map_err(|e| Error::io(&side, e)),
        None => match fs::remove_file(&side) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(&side, e)),
            _ => Ok(()),
        },
    }
}

/// Read a buffer plus its sidecar, if one exists.
pub fn read_buffer(path: &Path) -> Result<Trajectory> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut traj = decode_buffer(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })?;
    let side = sidecar_path(path);
    if side.is_file() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let record = parse_training(&text).map_err(|m| Error::Validation(format!("{}: {m}", side.display())))?;
        traj.training = Some(record);
    }
    Ok(traj)
}
