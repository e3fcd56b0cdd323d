//! On-disk corpus layout and the numeric array container.
//!
//! Array file (`.arr`), all integers little-endian:
//!
//! ```text
//! offset  size      field
//! 0       4         magic "DUBA"
//! 4       1         version (1)
//! 5       1         element type: 1 = f64, 2 = u32, 3 = u8 (booleans)
//! 6       1         rank r
//! 7       1         reserved, 0
//! 8       8·r       dimensions as u64
//! 8+8r    ...       row-major payload
//! ```
//!
//! Corpus directory:
//!
//! ```text
//! manifest.jsonl                 header line, then one line per sample
//! samples/<id>/<role>_<field>.arr
//! ```
//!
//! with `role` in `prev`, `cur`, `fol` and `field` in `phonemes`, `lip`,
//! `face`, `mel`, `voiced`, `pitch`, `energy`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{Corpus, CorpusStats, ShapeConfig};
use super::{ContextSample, FrameRateConfig, SentenceBundle};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"DUBA";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn code(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 1,
            ArrayData::U32(_) => 2,
            ArrayData::U8(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self { dims: vec![m.rows(), m.cols()], data: ArrayData::F64(m.data().to_vec()) }
    }

    pub fn from_f64(v: &[f64]) -> Self {
        Self { dims: vec![v.len()], data: ArrayData::F64(v.to_vec()) }
    }

    pub fn from_ids(v: &[usize]) -> Self {
        Self { dims: vec![v.len()], data: ArrayData::U32(v.iter().map(|&x| x as u32).collect()) }
    }

    pub fn from_flags(v: &[bool]) -> Self {
        Self { dims: vec![v.len()], data: ArrayData::U8(v.iter().map(|&b| b as u8).collect()) }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[VERSION, self.data.code(), self.dims.len() as u8, 0]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err("bad magic".into());
        }
        if bytes[4] != VERSION {
            return Err(format!("unsupported version {}", bytes[4]));
        }
        let (code, rank) = (bytes[5], bytes[6] as usize);
        let header = 8 + 8 * rank;
        if bytes.len() < header {
            return Err("truncated header".into());
        }
        let dims: Vec<usize> = (0..rank)
            .map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize)
            .collect();
        let count: usize = dims.iter().product();
        let payload = &bytes[header..];
        let width = match code {
            1 => 8,
            2 => 4,
            3 => 1,
            c => return Err(format!("unknown element type {c}")),
        };
        if payload.len() != count * width {
            return Err(format!("payload is {} bytes, shape needs {}", payload.len(), count * width));
        }
        let data = match code {
            1 => ArrayData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => ArrayData::U32(payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => ArrayData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|m| Error::format(path, m))
    }

    pub fn into_matrix(self, path: &Path) -> Result<Matrix> {
        match (self.dims.as_slice(), self.data) {
            (&[r, c], ArrayData::F64(v)) => Ok(Matrix::from_vec(r, c, v)),
            _ => Err(Error::format(path, "expected a rank-2 f64 array")),
        }
    }

    fn into_f64(self, path: &Path) -> Result<Vec<f64>> {
        match (self.dims.len(), self.data) {
            (1, ArrayData::F64(v)) => Ok(v),
            _ => Err(Error::format(path, "expected a rank-1 f64 array")),
        }
    }

    fn into_ids(self, path: &Path) -> Result<Vec<usize>> {
        match (self.dims.len(), self.data) {
            (1, ArrayData::U32(v)) => Ok(v.into_iter().map(|x| x as usize).collect()),
            _ => Err(Error::format(path, "expected a rank-1 u32 array")),
        }
    }

    fn into_flags(self, path: &Path) -> Result<Vec<bool>> {
        match (self.dims.len(), self.data) {
            (1, ArrayData::U8(v)) => Ok(v.into_iter().map(|x| x != 0).collect()),
            _ => Err(Error::format(path, "expected a rank-1 u8 array")),
        }
    }
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    Array::from_matrix(m).write(path)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    Array::read(path)?.into_matrix(path)
}

pub const MANIFEST: &str = "manifest.jsonl";
const FORMAT_NAME: &str = "ctxdub-corpus";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestRecord {
    Header {
        format: String,
        version: u32,
        seed: u64,
        count: usize,
        frame: FrameRateConfig,
        shape: ShapeConfig,
        stats: CorpusStats,
    },
    Sample {
        id: String,
        t_pre: Option<usize>,
        t_cur: usize,
        t_fol: Option<usize>,
        /// Sample directory relative to the corpus root.
        dir: String,
    },
}

const ROLES: [&str; 3] = ["prev", "cur", "fol"];

fn write_bundle(dir: &Path, role: &str, b: &SentenceBundle) -> Result<()> {
    let p = |f: &str| dir.join(format!("{role}_{f}.arr"));
    Array::from_ids(&b.phonemes).write(&p("phonemes"))?;
    Array::from_matrix(&b.lip_feats).write(&p("lip"))?;
    Array::from_matrix(&b.face_feats).write(&p("face"))?;
    Array::from_matrix(&b.mel).write(&p("mel"))?;
    Array::from_flags(&b.voiced).write(&p("voiced"))?;
    Array::from_f64(&b.pitch).write(&p("pitch"))?;
    Array::from_f64(&b.energy).write(&p("energy"))
}

fn read_bundle(dir: &Path, role: &str) -> Result<SentenceBundle> {
    let p = |f: &str| dir.join(format!("{role}_{f}.arr"));
    let get = |f: &str| -> Result<(PathBuf, Array)> {
        let path = p(f);
        let a = Array::read(&path)?;
        Ok((path, a))
    };
    let (pp, a) = get("phonemes")?;
    let phonemes = a.into_ids(&pp)?;
    let (pl, a) = get("lip")?;
    let lip_feats = a.into_matrix(&pl)?;
    let (pf, a) = get("face")?;
    let face_feats = a.into_matrix(&pf)?;
    let (pm, a) = get("mel")?;
    let mel = a.into_matrix(&pm)?;
    let (pv, a) = get("voiced")?;
    let voiced = a.into_flags(&pv)?;
    let (pp, a) = get("pitch")?;
    let pitch = a.into_f64(&pp)?;
    let (pe, a) = get("energy")?;
    let energy = a.into_f64(&pe)?;
    Ok(SentenceBundle { phonemes, lip_feats, face_feats, mel, voiced, pitch, energy })
}

/// Writes `corpus` under `root` (created if needed). Returns the sample records.
pub fn write_corpus(root: &Path, corpus: &Corpus) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(root.join("samples")).map_err(|e| Error::io(root, e))?;
    let mut records = vec![ManifestRecord::Header {
        format: FORMAT_NAME.into(),
        version: 1,
        seed: corpus.seed,
        count: corpus.samples.len(),
        frame: corpus.frame_cfg,
        shape: corpus.shape,
        stats: corpus.stats.clone(),
    }];
    for (i, s) in corpus.samples.iter().enumerate() {
        let id = Corpus::sample_id(i);
        let rel = format!("samples/{id}");
        let dir = root.join(&rel);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (role, b) in ROLES.iter().zip([s.previous.as_ref(), Some(&s.current), s.following.as_ref()]) {
            if let Some(b) = b {
                write_bundle(&dir, role, b)?;
            }
        }
        records.push(ManifestRecord::Sample {
            id,
            t_pre: s.previous.as_ref().map(SentenceBundle::n_phonemes),
            t_cur: s.current.n_phonemes(),
            t_fol: s.following.as_ref().map(SentenceBundle::n_phonemes),
            dir: rel,
        });
    }
    let path = root.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for r in &records {
        let line = serde_json::to_string(r).expect("manifest records serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(records)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRecord>> {
    let path = root.join(MANIFEST);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_corpus(root: &Path) -> Result<Corpus> {
    let records = read_manifest(root)?;
    let path = root.join(MANIFEST);
    let mut it = records.into_iter();
    let Some(ManifestRecord::Header { format, version, seed, count, frame, shape, stats }) = it.next() else {
        return Err(Error::format(&path, "first line must be the corpus header"));
    };
    if format != FORMAT_NAME || version != 1 {
        return Err(Error::format(&path, format!("unsupported corpus format {format} v{version}")));
    }
    let frame = frame.validated()?;
    let mut samples = Vec::with_capacity(count);
    for rec in it {
        let ManifestRecord::Sample { id, t_pre, t_fol, dir, .. } = rec else {
            return Err(Error::format(&path, "duplicate header"));
        };
        let dir = root.join(dir);
        let previous = t_pre.map(|_| read_bundle(&dir, "prev")).transpose()?;
        let current = read_bundle(&dir, "cur")?;
        let following = t_fol.map(|_| read_bundle(&dir, "fol")).transpose()?;
        let sample = ContextSample { previous, current, following, frame_cfg: frame };
        sample.validate(Some(shape.vocab)).map_err(|e| Error::InvalidSample(format!("{id}: {e}")))?;
        samples.push(sample);
    }
    if samples.len() != count {
        return Err(Error::format(&path, format!("header announces {count} samples, found {}", samples.len())));
    }
    Ok(Corpus { seed, frame_cfg: frame, shape, samples, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let a = Array::from_matrix(&Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let bytes = a.encode();
        assert_eq!(&bytes[..4], b"DUBA");
        assert_eq!(bytes.len(), 8 + 16 + 32);
        assert!(Array::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Array::decode(b"NOPE0000").is_err());
        let mut wrong_type = bytes.clone();
        wrong_type[5] = 9;
        assert!(Array::decode(&wrong_type).is_err());
    }
}
