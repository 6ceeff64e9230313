//! Checkpoints: a directory holding `meta.json` and raw little-endian `f64`
//! payloads (`params.bin`, optionally `optim.bin`) described by a per-array
//! name/shape/offset index with a SHA-256 of each payload.

use std::fs;
use std::path::{Path, PathBuf};

use hopbev_autodiff::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::model::Model;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const PARAMS_FILE: &str = "params.bin";
const OPTIM_FILE: &str = "optim.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadIndex {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerIndex {
    /// Adam step counter.
    pub t: u64,
    pub payload: PayloadIndex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub metrics: Option<EvalResult>,
    pub params: PayloadIndex,
    pub optimizer: Option<OptimizerIndex>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    /// Builds the model described by the config echo and checks that the
    /// stored parameters fit it.
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(self.meta.config.model.clone())?;
        check_compatible(&model.init_params(0), &self.params)?;
        Ok(model)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_arrays<'a>(arrays: impl Iterator<Item = (String, &'a Tensor)>, file: &str) -> (Vec<u8>, PayloadIndex) {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in arrays {
        entries.push(ArrayEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: bytes.len(),
        });
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let index = PayloadIndex {
        file: file.into(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len(),
        arrays: entries,
    };
    (bytes, index)
}

fn decode_arrays(dir: &Path, index: &PayloadIndex) -> Result<Vec<(String, Tensor)>> {
    let path = dir.join(&index.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != index.bytes {
        return Err(Error::format(&path, format!("{} bytes, index says {}", bytes.len(), index.bytes)));
    }
    if sha256_hex(&bytes) != index.sha256 {
        return Err(Error::format(&path, "sha256 mismatch"));
    }
    let mut out = Vec::with_capacity(index.arrays.len());
    let mut expected_offset = 0;
    for a in &index.arrays {
        if a.dtype != "f64" {
            return Err(Error::format(&path, format!("array {} has dtype {}", a.name, a.dtype)));
        }
        let n: usize = a.shape.iter().product();
        let end = a.offset + 8 * n;
        if a.offset != expected_offset || end > bytes.len() {
            return Err(Error::format(&path, format!("array {} out of bounds", a.name)));
        }
        let data = bytes[a.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&a.shape, data).map_err(|e| Error::format(&path, e.to_string()))?;
        out.push((a.name.clone(), t));
        expected_offset = end;
    }
    if expected_offset != bytes.len() {
        return Err(Error::format(&path, "trailing bytes"));
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a checkpoint directory, replacing any existing one at `dir`.
pub fn save_checkpoint(
    dir: &Path,
    step: usize,
    config: &TrainConfig,
    params: &ParamStore,
    optimizer: Option<&AdamW>,
    metrics: Option<&EvalResult>,
) -> Result<CheckpointMeta> {
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let (bytes, params_index) = encode_arrays(params.iter().map(|(k, v)| (k.to_string(), v)), PARAMS_FILE);
    write_file(&tmp.join(PARAMS_FILE), &bytes)?;
    let optimizer = match optimizer {
        Some(opt) => {
            let arrays = opt
                .m
                .iter()
                .map(|(k, v)| (format!("m/{k}"), v))
                .chain(opt.v.iter().map(|(k, v)| (format!("v/{k}"), v)));
            let (bytes, payload) = encode_arrays(arrays, OPTIM_FILE);
            write_file(&tmp.join(OPTIM_FILE), &bytes)?;
            Some(OptimizerIndex { t: opt.t, payload })
        }
        None => None,
    };
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        step,
        seed: config.seed,
        config: config.clone(),
        metrics: metrics.cloned(),
        params: params_index,
        optimizer,
    };
    write_file(&tmp.join(META_FILE), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    Ok(meta)
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

pub fn read_checkpoint_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("format version {}, expected {CHECKPOINT_FORMAT_VERSION}", meta.format_version),
        ));
    }
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta = read_checkpoint_meta(dir)?;
    let mut params = ParamStore::new();
    for (name, t) in decode_arrays(dir, &meta.params)? {
        params.insert(name, t);
    }
    let optimizer = match &meta.optimizer {
        Some(idx) => {
            let mut opt = AdamW {
                t: idx.t,
                ..AdamW::default()
            };
            for (name, t) in decode_arrays(dir, &idx.payload)? {
                match name.split_once('/') {
                    Some(("m", rest)) => opt.m.insert(rest, t),
                    Some(("v", rest)) => opt.v.insert(rest, t),
                    _ => return Err(Error::format(dir.join(OPTIM_FILE), format!("unexpected array {name}"))),
                }
            }
            Some(opt)
        }
        None => None,
    };
    Ok(Checkpoint {
        meta,
        params,
        optimizer,
    })
}

/// Checks that `loaded` has exactly the names and shapes of `expected`,
/// listing every difference otherwise.
pub fn check_compatible(expected: &ParamStore, loaded: &ParamStore) -> Result<()> {
    let mut diffs = Vec::new();
    for (name, t) in expected.iter() {
        match loaded.get(name) {
            None => diffs.push(format!("{name}: missing (model expects {:?})", t.shape())),
            Some(l) if l.shape() != t.shape() => {
                diffs.push(format!("{name}: checkpoint {:?} vs model {:?}", l.shape(), t.shape()))
            }
            Some(_) => {}
        }
    }
    for (name, t) in loaded.iter() {
        if !expected.contains(name) {
            diffs.push(format!("{name}: {:?} not in model", t.shape()));
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(diffs.join("; ")))
    }
}
