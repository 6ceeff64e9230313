//! On-disk dataset: a `manifest.json` plus one binary file per sequence.
//!
//! Sequence file layout: the 8-byte magic `HOPDSEQ1`, a little-endian `u32`
//! byte length, that many bytes of UTF-8 JSON header, then the arrays named
//! in the header, in header order, as raw little-endian `f32` / `i32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Box3D, EgoPose, SceneSequence, WorldConfig};
use crate::error::{Error, Result};
use crate::geometry::BevGridSpec;

pub const DATASET_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HOPDSEQ1";
const FORMAT_VERSION: u32 = 1;
const BOX_FIELDS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub file: String,
    pub seed: u64,
    pub frames: usize,
    pub objects: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub sequences: usize,
    pub frames: usize,
    pub objects: usize,
    pub world: WorldConfig,
    pub grid: Option<BevGridSpec>,
    pub dataset_seed: Option<u64>,
    pub files: Vec<SequenceEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub sequences: Vec<SceneSequence>,
}

impl Dataset {
    /// Number of object classes the dataset was generated with.
    pub fn classes(&self) -> usize {
        self.manifest.world.classes
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayDesc {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    seed: u64,
    dt: f64,
    arrays: Vec<ArrayDesc>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_f32(v: f64, path: &Path, what: &str) -> Result<f32> {
    let f = v as f32;
    if f64::from(f) != v {
        return Err(Error::format(
            path,
            format!("{what} value {v} is not exactly representable as f32"),
        ));
    }
    Ok(f)
}

fn to_i32(v: u64, path: &Path, what: &str) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::format(path, format!("{what} value {v} exceeds i32")))
}

/// Serializes one sequence. Every real field must already be f32-exact
/// (generated sequences are), otherwise the round trip could not be lossless.
fn encode_sequence(seq: &SceneSequence, path: &Path) -> Result<Vec<u8>> {
    if seq.poses.len() != seq.gt.len() {
        return Err(Error::Invariant(format!(
            "{} poses but {} ground-truth frames",
            seq.poses.len(),
            seq.gt.len()
        )));
    }
    let frames = seq.poses.len();
    let total: usize = seq.object_count();
    let mut poses = Vec::with_capacity(frames * 3);
    let mut frame_index = Vec::with_capacity(frames);
    let mut counts = Vec::with_capacity(frames);
    for (p, g) in seq.poses.iter().zip(&seq.gt) {
        for v in [p.px, p.py, p.heading] {
            poses.push(to_f32(v, path, "pose")?);
        }
        frame_index.push(to_i32(p.frame_index as u64, path, "frame_index")?);
        counts.push(to_i32(g.len() as u64, path, "box count")?);
    }
    let mut boxes = Vec::with_capacity(total * BOX_FIELDS);
    let mut ids = Vec::with_capacity(total * 2);
    for b in seq.gt.iter().flatten() {
        for v in [b.x, b.y, b.z, b.w, b.l, b.h, b.yaw, b.vx, b.vy] {
            boxes.push(to_f32(v, path, "box")?);
        }
        ids.push(to_i32(b.cls as u64, path, "class")?);
        ids.push(to_i32(u64::from(b.track_id), path, "track_id")?);
    }
    let desc = |name: &str, dtype: &str, shape: Vec<usize>| ArrayDesc {
        name: name.into(),
        dtype: dtype.into(),
        shape,
    };
    let header = Header {
        format_version: FORMAT_VERSION,
        seed: seq.seed,
        dt: seq.dt,
        arrays: vec![
            desc("poses", "f32", vec![frames, 3]),
            desc("frame_index", "i32", vec![frames]),
            desc("box_counts", "i32", vec![frames]),
            desc("boxes", "f32", vec![total, BOX_FIELDS]),
            desc("box_ids", "i32", vec![total, 2]),
        ],
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * (poses.len() + boxes.len() + ids.len() + 2 * frames));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    poses.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    frame_index.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    counts.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    boxes.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    ids.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.path,
                format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn words(&mut self, n: usize) -> Result<impl Iterator<Item = [u8; 4]> + 'a> {
        let s = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "array too large"))?)?;
        Ok(s.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.words(n)?.map(|w| f64::from(f32::from_le_bytes(w))).collect())
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        Ok(self.words(n)?.map(i32::from_le_bytes).collect())
    }
}

fn decode_sequence(bytes: &[u8], path: &Path) -> Result<SceneSequence> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(8)? != MAGIC {
        return Err(Error::format(path, "bad magic bytes"));
    }
    let len = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(cur.take(len)?)
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("format version {} (expected {FORMAT_VERSION})", header.format_version),
        ));
    }
    let expected = [
        ("poses", "f32", 2),
        ("frame_index", "i32", 1),
        ("box_counts", "i32", 1),
        ("boxes", "f32", 2),
        ("box_ids", "i32", 2),
    ];
    if header.arrays.len() != expected.len()
        || header
            .arrays
            .iter()
            .zip(expected)
            .any(|(a, (n, d, r))| a.name != n || a.dtype != d || a.shape.len() != r)
    {
        return Err(Error::format(path, "unexpected array layout in header"));
    }
    let a = &header.arrays;
    let frames = a[0].shape[0];
    let total = a[3].shape[0];
    if a[0].shape[1] != 3
        || a[1].shape[0] != frames
        || a[2].shape[0] != frames
        || a[3].shape[1] != BOX_FIELDS
        || a[4].shape != [total, 2]
    {
        return Err(Error::format(path, "inconsistent array shapes in header"));
    }
    let poses = cur.f32s(frames * 3)?;
    let frame_index = cur.i32s(frames)?;
    let counts = cur.i32s(frames)?;
    let boxes = cur.f32s(total * BOX_FIELDS)?;
    let ids = cur.i32s(total * 2)?;
    if cur.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    if counts.iter().any(|&c| c < 0) || counts.iter().map(|&c| c as usize).sum::<usize>() != total {
        return Err(Error::format(path, "box counts do not sum to the box array length"));
    }
    let mut out_poses = Vec::with_capacity(frames);
    let mut gt = Vec::with_capacity(frames);
    let mut next = 0;
    for f in 0..frames {
        let fi = usize::try_from(frame_index[f]).map_err(|_| Error::format(path, "negative frame index"))?;
        out_poses.push(EgoPose {
            px: poses[3 * f],
            py: poses[3 * f + 1],
            heading: poses[3 * f + 2],
            frame_index: fi,
        });
        let mut frame = Vec::with_capacity(counts[f] as usize);
        for _ in 0..counts[f] {
            let v = &boxes[next * BOX_FIELDS..(next + 1) * BOX_FIELDS];
            let (cls, track) = (ids[2 * next], ids[2 * next + 1]);
            if cls < 0 || track < 0 {
                return Err(Error::format(path, "negative class or track id"));
            }
            frame.push(Box3D {
                x: v[0],
                y: v[1],
                z: v[2],
                w: v[3],
                l: v[4],
                h: v[5],
                yaw: v[6],
                vx: v[7],
                vy: v[8],
                cls: cls as usize,
                track_id: track as u32,
            });
            next += 1;
        }
        gt.push(frame);
    }
    Ok(SceneSequence {
        poses: out_poses,
        gt,
        dt: header.dt,
        seed: header.seed,
    })
}

/// Reads a single sequence file without manifest checks.
pub fn read_sequence_file(path: &Path) -> Result<SceneSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes, path)
}

/// Writes `seqs` under `dir` (created if missing) and returns the manifest.
pub fn write_dataset(
    seqs: &[SceneSequence],
    dir: &Path,
    world: &WorldConfig,
    grid: Option<&BevGridSpec>,
    dataset_seed: Option<u64>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let name = format!("seq_{i:05}.bin");
        let path = dir.join(&name);
        let bytes = encode_sequence(seq, &path)?;
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.push(SequenceEntry {
            file: name,
            seed: seq.seed,
            frames: seq.frames(),
            objects: seq.object_count(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        sequences: seqs.len(),
        frames: files.iter().map(|f| f.frames).sum(),
        objects: files.iter().map(|f| f.objects).sum(),
        world: world.clone(),
        grid: grid.copied(),
        dataset_seed,
        files,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a dataset directory, verifying schema version, checksums and counts.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath: PathBuf = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, format!("bad manifest: {e}")))?;
    let version = raw.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(u64::from(DATASET_SCHEMA_VERSION)) {
        return Err(Error::format(
            &mpath,
            format!("schema version {version:?} (expected {DATASET_SCHEMA_VERSION})"),
        ));
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| Error::format(&mpath, format!("bad manifest: {e}")))?;
    if manifest.files.len() != manifest.sequences {
        return Err(Error::format(&mpath, "sequence count does not match file list"));
    }
    let mut sequences = Vec::with_capacity(manifest.files.len());
    for entry in &manifest.files {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let digest = sha256_hex(&bytes);
        if digest != entry.sha256 {
            return Err(Error::format(
                &path,
                format!("checksum mismatch: manifest {} but file {digest}", entry.sha256),
            ));
        }
        let seq = decode_sequence(&bytes, &path)?;
        if seq.frames() != entry.frames || seq.object_count() != entry.objects {
            return Err(Error::format(&path, "frame/object counts disagree with manifest"));
        }
        sequences.push(seq);
    }
    let frames: usize = sequences.iter().map(SceneSequence::frames).sum();
    let objects: usize = sequences.iter().map(SceneSequence::object_count).sum();
    if frames != manifest.frames || objects != manifest.objects {
        return Err(Error::format(&mpath, "manifest totals disagree with payload"));
    }
    Ok(Dataset { manifest, sequences })
}
