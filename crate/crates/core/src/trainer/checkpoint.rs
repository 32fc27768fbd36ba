//! Checkpoint binary format.
//!
//! Little-endian, packed: `"PTCK"`, `u16` version, taxonomy hash and a JSON
//! metadata blob (each `u32` length + UTF-8 bytes), `u32` parameter count,
//! then per parameter its name, `u32` rows, `u32` cols and `f64` values;
//! `f64` τ; `u32` optimizer-state count, then per state `u64` step and the
//! `f64` first and second moments; `u64` completed epochs, `u64` seed,
//! `f64` best validation metric and `u64` best epoch.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::numerics::{AdamState, Tensor};

use super::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything needed to rebuild the model skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub dim: usize,
    pub leaves: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub taxonomy_hash: String,
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
    /// Temperature; 0 for models without one.
    pub tau: f64,
    pub adam: Vec<AdamState>,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
    pub best_metric: f64,
    pub best_epoch: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::LengthMismatch(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn tensor(&mut self, t: &Tensor) {
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::TruncatedFile(format!("checkpoint ends at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse("checkpoint string is not UTF-8".into()))
    }
    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::TruncatedFile(format!("tensor {rows}x{cols}")))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::TruncatedFile("tensor size".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::from_vec(rows, cols, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.adam.len() != self.params.len() {
            return Err(Error::LengthMismatch(format!(
                "{} optimizer states for {} parameters",
                self.adam.len(),
                self.params.len()
            )));
        }
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.str(&self.taxonomy_hash)?;
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Config(e.to_string()))?;
        w.str(&meta)?;
        w.u32(self.params.len())?;
        for (name, t) in &self.params {
            w.str(name)?;
            w.u32(t.rows())?;
            w.u32(t.cols())?;
            w.tensor(t);
        }
        w.f64(self.tau);
        w.u32(self.adam.len())?;
        for (s, (_, t)) in self.adam.iter().zip(&self.params) {
            if s.m.shape() != t.shape() || s.v.shape() != t.shape() {
                return Err(Error::LengthMismatch("optimizer state shape differs from its parameter".into()));
            }
            w.u64(s.step);
            w.tensor(&s.m);
            w.tensor(&s.v);
        }
        w.u64(self.epoch);
        w.u64(self.seed);
        w.f64(self.best_metric);
        w.u64(self.best_epoch);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let taxonomy_hash = r.str()?;
        let meta: CheckpointMeta =
            serde_json::from_str(&r.str()?).map_err(|e| Error::Parse(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.str()?;
            let (rows, cols) = (r.u32()?, r.u32()?);
            params.push((name, r.tensor(rows, cols)?));
        }
        let tau = r.f64()?;
        let states = r.u32()?;
        if states != count {
            return Err(Error::LengthMismatch(format!("{states} optimizer states for {count} parameters")));
        }
        let mut adam = Vec::with_capacity(states.min(1 << 16));
        for (_, t) in &params {
            let step = r.u64()?;
            let m = r.tensor(t.rows(), t.cols())?;
            let v = r.tensor(t.rows(), t.cols())?;
            adam.push(AdamState { m, v, step });
        }
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let best_metric = r.f64()?;
        let best_epoch = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::LengthMismatch(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        for (name, t) in &params {
            t.ensure_finite(name).map_err(|_| Error::NonFinitePayload(format!("parameter {name}")))?;
        }
        Ok(Checkpoint {
            taxonomy_hash,
            meta,
            params,
            tau,
            adam,
            epoch,
            seed,
            best_metric,
            best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
