//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! b"HVAT"
//! u32 version
//! u32 config length, then the model config as UTF-8 JSON
//! u32 entry count
//! per entry: u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
//!            f32 payload in row-major order
//! ```
//!
//! Entries are written in parameter traversal order. Loading matches them
//! by name and never returns a partially populated model.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelConfig, ModelWeights, Seq2SeqModel};
use crate::params::{ParamSpec, Weights};
use crate::tensor::{Real, Tensor};

pub const MAGIC: [u8; 4] = *b"HVAT";
pub const VERSION: u32 = 1;

/// Serializes `model` with its parameters rounded to `f32`.
pub fn encode<T: Real>(model: &Seq2SeqModel<T>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config())?;
    let named = model.weights().named("");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_len(&mut out, config.len(), "config")?;
    out.extend_from_slice(&config);
    put_len(&mut out, named.len(), "entry count")?;
    for (name, t) in named {
        put_len(&mut out, name.len(), "parameter name")?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, t.rank(), "rank")?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x.to_f64_lossless() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn put_len(out: &mut Vec<u8>, n: usize, what: &str) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Contract(format!("{what} does not fit in u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint. With `expected` set, parameters are checked against
/// that config's layout instead of the one stored in the file.
pub fn decode<T: Real>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Seq2SeqModel<T>> {
    Ok(decode_inner(bytes, expected)?)
}

fn decode_inner<T: Real>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Seq2SeqModel<T>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let len = r.u32("config length")? as usize;
    let stored: ModelConfig =
        serde_json::from_slice(r.take(len, "config")?).map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;
    stored
        .validate()
        .map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;
    let config = expected.cloned().unwrap_or(stored);

    let layout = ModelWeights::layout(&config);
    let mut shapes: HashMap<String, Vec<usize>> = HashMap::new();
    layout.visit("", &mut |name, spec: &ParamSpec| {
        shapes.insert(name.to_string(), spec.shape.clone());
    });

    let count = r.u32("entry count")?;
    let mut entries: HashMap<String, Tensor<T>> = HashMap::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "parameter name")?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = r.u64("dims")?;
            dims.push(
                usize::try_from(d).map_err(|_| CheckpointError::Malformed(format!("dimension {d} of `{name}`")))?,
            );
        }
        let expected_shape = shapes
            .get(&name)
            .ok_or_else(|| CheckpointError::UnexpectedParameter(name.clone()))?;
        if *expected_shape != dims {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: expected_shape.clone(),
                found: dims,
            });
        }
        if entries.contains_key(&name) {
            return Err(CheckpointError::Malformed(format!("parameter `{name}` appears twice")));
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes")))))
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        entries.insert(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    let weights = layout.try_map("", &mut |name, _| {
        entries
            .remove(name)
            .ok_or_else(|| CheckpointError::MissingParameter(name.to_string()))
    })?;
    Seq2SeqModel::from_weights(config, weights).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

/// Writes to a temporary sibling file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save_checkpoint<T: Real>(model: &Seq2SeqModel<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model)?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Seq2SeqModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, None)
}

/// Loads parameters into the layout of `config`, which must match the
/// stored parameters exactly.
pub fn load_checkpoint_as<T: Real>(path: &Path, config: &ModelConfig) -> Result<Seq2SeqModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, Some(config))
}
