//! Checkpoint container.
//!
//! ```text
//! MOLBART-CKPT\n
//! u64 LE          header length in bytes
//! header          UTF-8 JSON, see `Header`
//! data            every tensor as little-endian f64, in manifest order
//! ```
//!
//! Manifest offsets are relative to the start of the data section. The
//! `checksum` is XXH3-64 of the data section.

use std::path::Path;

use molbart_core::model::{Checkpoint, Head, ModelConfig, ModelState, ParamSet, RngState, TensorSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::formats::write_atomic;

pub const MAGIC: &[u8] = b"MOLBART-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Model,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub group: Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub toolkit_version: String,
    pub hash_algorithm: String,
    /// Architecture fingerprint, hex.
    pub fingerprint: String,
    pub step: u64,
    pub model_config: ModelConfig,
    pub head: Option<Head>,
    pub schedule: Option<TrainConfig>,
    pub rng: Option<RngState>,
    /// Free-form metadata such as seeds or a target scaler.
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub data_bytes: u64,
    pub checksum: String,
}

/// A loaded container.
#[derive(Debug, Clone)]
pub struct Stored {
    pub header: Header,
    pub model: ModelState,
    pub moments: Option<(ParamSet, ParamSet)>,
}

impl Stored {
    /// The resumable training state; fails for model-only files.
    pub fn into_checkpoint(self, path: &Path) -> Result<Checkpoint> {
        let (adam_m, adam_v) = self.moments.ok_or_else(|| CliError::corrupt(path, "no optimizer moments"))?;
        let schedule = self.header.schedule.ok_or_else(|| CliError::corrupt(path, "no schedule"))?;
        let rng = self.header.rng.ok_or_else(|| CliError::corrupt(path, "no rng state"))?;
        let ck = Checkpoint { model: self.model, adam_m, adam_v, step: self.header.step, schedule, rng };
        ck.validate()?;
        Ok(ck)
    }
}

fn fingerprint_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

fn push_group(entries: &mut Vec<TensorEntry>, data: &mut Vec<u8>, set: &ParamSet, group: Group) {
    for (spec, t) in set.specs().iter().zip(set.tensors()) {
        entries.push(TensorEntry {
            name: spec.name.clone(),
            shape: spec.shape.clone(),
            dtype: "f64".into(),
            offset: data.len() as u64,
            group,
        });
        for x in t {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn encode(
    model: &ModelState,
    moments: Option<(&ParamSet, &ParamSet)>,
    step: u64,
    schedule: Option<&TrainConfig>,
    rng: Option<RngState>,
    extra: serde_json::Value,
) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut data = Vec::with_capacity(model.params.numel() * 8 * if moments.is_some() { 3 } else { 1 });
    push_group(&mut entries, &mut data, &model.params, Group::Model);
    if let Some((m, v)) = moments {
        push_group(&mut entries, &mut data, m, Group::AdamM);
        push_group(&mut entries, &mut data, v, Group::AdamV);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        toolkit_version: molbart_core::VERSION.into(),
        hash_algorithm: molbart_core::HASH_ALGORITHM.into(),
        fingerprint: fingerprint_hex(model.fingerprint()),
        step,
        model_config: model.cfg.clone(),
        head: model.head,
        schedule: schedule.cloned(),
        rng,
        extra,
        tensors: entries,
        data_bytes: data.len() as u64,
        checksum: format!("{:016x}", xxhash_rust::xxh3::xxh3_64(&data)),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + h.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Saves model, moments, step, schedule and rng position.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint, extra: serde_json::Value) -> Result<()> {
    let bytes = encode(&ck.model, Some((&ck.adam_m, &ck.adam_v)), ck.step, Some(&ck.schedule), Some(ck.rng), extra)?;
    write_atomic(path, &bytes)
}

/// Saves weights only.
pub fn save_model(path: &Path, model: &ModelState, step: u64, extra: serde_json::Value) -> Result<()> {
    write_atomic(path, &encode(model, None, step, None, None, extra)?)
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<Header> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(CliError::io(path))?;
    let mut pre = vec![0u8; MAGIC.len() + 8];
    f.read_exact(&mut pre).map_err(|_| CliError::corrupt(path, "truncated preamble"))?;
    let hlen = parse_preamble(path, &pre)?;
    let mut h = vec![0u8; hlen];
    f.read_exact(&mut h).map_err(|_| CliError::corrupt(path, "truncated header"))?;
    parse_header(path, &h)
}

fn parse_preamble(path: &Path, bytes: &[u8]) -> Result<usize> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CliError::corrupt(path, "not a checkpoint file"));
    }
    let n = u64::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 8].try_into().expect("8 bytes"));
    usize::try_from(n).map_err(|_| CliError::corrupt(path, "header length overflows"))
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let h: Header = serde_json::from_slice(bytes).map_err(|e| CliError::corrupt(path, format!("header: {e}")))?;
    if h.format_version > FORMAT_VERSION {
        return Err(CliError::corrupt(path, format!("format version {} is newer than {FORMAT_VERSION}", h.format_version)));
    }
    Ok(h)
}

pub fn load(path: &Path) -> Result<Stored> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    let hlen = parse_preamble(path, &bytes)?;
    let start = MAGIC.len() + 8;
    let hend = start.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| CliError::corrupt(path, "truncated header"))?;
    let header = parse_header(path, &bytes[start..hend])?;
    let data = &bytes[hend..];
    if data.len() as u64 != header.data_bytes {
        return Err(CliError::corrupt(path, format!("expected {} data bytes, found {}", header.data_bytes, data.len())));
    }
    if format!("{:016x}", xxhash_rust::xxh3::xxh3_64(data)) != header.checksum {
        return Err(CliError::corrupt(path, "checksum mismatch"));
    }
    let mut groups: [(Vec<TensorSpec>, Vec<Vec<f64>>); 3] = Default::default();
    for e in &header.tensors {
        if e.dtype != "f64" {
            return Err(CliError::corrupt(path, format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let off = usize::try_from(e.offset).map_err(|_| CliError::corrupt(path, "offset overflows"))?;
        let raw = off
            .checked_add(n * 8)
            .and_then(|end| data.get(off..end))
            .ok_or_else(|| CliError::corrupt(path, format!("tensor {} lies outside the data", e.name)))?;
        let t: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let g = &mut groups[e.group as usize];
        g.0.push(TensorSpec { name: e.name.clone(), shape: e.shape.clone() });
        g.1.push(t);
    }
    let [(ms, md), (as_, ad), (vs, vd)] = groups;
    let params = ParamSet::new(ms, md).ok_or_else(|| CliError::corrupt(path, "inconsistent model tensors"))?;
    let model = ModelState::from_params(&header.model_config, params, header.head)
        .map_err(|e| CliError::corrupt(path, e))?;
    if fingerprint_hex(model.fingerprint()) != header.fingerprint {
        return Err(CliError::corrupt(path, "fingerprint does not match the stored config"));
    }
    let moments = if as_.is_empty() && vs.is_empty() {
        None
    } else {
        let m = ParamSet::new(as_, ad).ok_or_else(|| CliError::corrupt(path, "inconsistent moment tensors"))?;
        let v = ParamSet::new(vs, vd).ok_or_else(|| CliError::corrupt(path, "inconsistent moment tensors"))?;
        if !(m.same_shape(&model.params) && v.same_shape(&model.params)) {
            return Err(CliError::corrupt(path, "moment tensors do not match parameters"));
        }
        Some((m, v))
    };
    Ok(Stored { header, model, moments })
}

/// `step-00000200.ckpt`.
pub fn step_file_name(step: u64) -> String {
    format!("step-{step:08}.ckpt")
}

/// The checkpoint with the highest step in `dir`, judged by file name.
pub fn latest_in(dir: &Path) -> Result<Option<(u64, std::path::PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in std::fs::read_dir(dir).map_err(CliError::io(dir))? {
        let p = entry.map_err(CliError::io(dir))?.path();
        let step = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().map_or(true, |(b, _)| s > *b) {
                best = Some((s, p));
            }
        }
    }
    Ok(best)
}
