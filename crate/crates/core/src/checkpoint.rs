//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "DUBC" | version u32 | stage u8 | 3 reserved bytes | step u64
//! config digest [32] (SHA-256 of the model config JSON)
//! snapshot length u64 | snapshot JSON {"model": .., "train": ..}
//! adam step u64 | array count u64
//! per array: role u8 (0 param, 1 first moment, 2 second moment)
//!            name length u32 | name | rows u64 | cols u64 | rows*cols f64
//! trailer [32] (SHA-256 of every preceding byte)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Matrix;
use crate::training::{Adam, TrainConfig};

const MAGIC: &[u8; 4] = b"DUBC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub step: u64,
    pub digest: [u8; 32],
    pub snapshot_json: String,
    pub params: BTreeMap<String, Matrix>,
    pub adam_t: u64,
    pub adam_m: BTreeMap<String, Matrix>,
    pub adam_v: BTreeMap<String, Matrix>,
}

pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("model config serializes");
    Sha256::digest(json).into()
}

impl Checkpoint {
    pub fn capture(model: &Model, adam: Option<&Adam>, stage: u8, step: u64, train: &TrainConfig) -> Self {
        let snapshot = Snapshot { model: model.cfg, train: *train };
        let mut adam_m = BTreeMap::new();
        let mut adam_v = BTreeMap::new();
        if let Some(a) = adam {
            for (id, name, _) in model.store.iter() {
                adam_m.insert(name.to_string(), a.m[id.index()].clone());
                adam_v.insert(name.to_string(), a.v[id.index()].clone());
            }
        }
        Self {
            stage,
            step,
            digest: config_digest(&model.cfg),
            snapshot_json: serde_json::to_string(&snapshot).expect("snapshot serializes"),
            params: model.store.to_named(),
            adam_t: adam.map_or(0, |a| a.t),
            adam_m,
            adam_v,
        }
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        serde_json::from_str(&self.snapshot_json)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("unreadable config snapshot: {e}")))
    }

    /// A freshly built model carrying the stored parameters.
    pub fn instantiate(&self) -> Result<Model> {
        let snap = self.snapshot()?;
        let mut model = Model::new(snap.model, 0).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
        self.restore(&mut model, None)?;
        Ok(model)
    }

    /// Loads parameters (and optimizer moments when `adam` is given) into a
    /// model of the same architecture. Missing, unexpected or reshaped
    /// parameters are errors.
    pub fn restore(&self, model: &mut Model, adam: Option<&mut Adam>) -> Result<()> {
        if self.digest != config_digest(&model.cfg) {
            return Err(Error::IncompatibleCheckpoint("model configuration differs from the checkpoint".into()));
        }
        model.store.load_strict(&self.params)?;
        if let Some(a) = adam {
            if self.adam_m.is_empty() {
                return Err(Error::IncompatibleCheckpoint("checkpoint carries no optimizer state".into()));
            }
            for (id, name, p) in model.store.iter() {
                for (src, dst) in [(&self.adam_m, &mut a.m), (&self.adam_v, &mut a.v)] {
                    let moment = src
                        .get(name)
                        .filter(|m| m.shape() == p.shape())
                        .ok_or_else(|| Error::IncompatibleCheckpoint(format!("optimizer moment for `{name}` missing or reshaped")))?;
                    dst[id.index()] = moment.clone();
                }
            }
            a.t = self.adam_t;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.push(self.stage);
        b.extend_from_slice(&[0; 3]);
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.digest);
        b.extend_from_slice(&(self.snapshot_json.len() as u64).to_le_bytes());
        b.extend_from_slice(self.snapshot_json.as_bytes());
        b.extend_from_slice(&self.adam_t.to_le_bytes());
        let groups = [(0u8, &self.params), (1, &self.adam_m), (2, &self.adam_v)];
        let count: usize = groups.iter().map(|(_, g)| g.len()).sum();
        b.extend_from_slice(&(count as u64).to_le_bytes());
        for (role, group) in groups {
            for (name, m) in group {
                b.push(role);
                b.extend_from_slice(&(name.len() as u32).to_le_bytes());
                b.extend_from_slice(name.as_bytes());
                b.extend_from_slice(&(m.rows() as u64).to_le_bytes());
                b.extend_from_slice(&(m.cols() as u64).to_le_bytes());
                for v in m.data() {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let trailer = Sha256::digest(&b);
        b.extend_from_slice(&trailer);
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::IncompatibleCheckpoint(m.to_string());
        if bytes.len() < 4 + 4 + 4 + 8 + 32 + 8 + 8 + 8 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(bad("checksum mismatch (truncated or corrupted file)"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!("unsupported checkpoint version {version}")));
        }
        let stage = r.take(4)?[0];
        let step = r.u64()?;
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let len = r.len()?;
        let snapshot_json = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("snapshot is not UTF-8"))?;
        let adam_t = r.u64()?;
        let count = r.len()?;
        let mut groups: [BTreeMap<String, Matrix>; 3] = Default::default();
        for _ in 0..count {
            let role = r.take(1)?[0] as usize;
            if role > 2 {
                return Err(bad("unknown array role"));
            }
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| bad("array name is not UTF-8"))?;
            let (rows, cols) = (r.len()?, r.len()?);
            let n = rows.checked_mul(cols).ok_or_else(|| bad("array too large"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("array too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if groups[role].insert(name.clone(), Matrix::from_vec(rows, cols, data)).is_some() {
                return Err(Error::IncompatibleCheckpoint(format!("duplicate array `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after arrays"));
        }
        let [params, adam_m, adam_v] = groups;
        Ok(Self { stage, step, digest, snapshot_json, params, adam_t, adam_m, adam_v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::IncompatibleCheckpoint("unexpected end of checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::IncompatibleCheckpoint("length overflows usize".into()))
    }
}
