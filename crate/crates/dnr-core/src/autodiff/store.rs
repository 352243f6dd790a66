//! Named parameter storage with gradient buffers, Adam state, and a small
//! binary checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::array::Array2;
use crate::error::{Error, Result};
use crate::util::fnv1a64;

const MAGIC: &[u8; 4] = b"DNRW";
const VERSION: u32 = 1;

struct Entry {
    value: Array2,
    grad: Array2,
    // Adam moments, lazily meaningful: all-zero until the first step.
    m: Array2,
    v: Array2,
    step: u64,
}

/// Optimizer settings for `ParamStore::adam_step`.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling applied before the update; None disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(5.0),
        }
    }
}

/// Name -> weights map. BTreeMap keeps iteration (and therefore
/// serialization and update order) independent of insertion order.
#[derive(Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2) -> Result<()> {
        if let Some(existing) = self.entries.get(name) {
            return Err(Error::ParamShapeConflict {
                name: name.to_string(),
                existing: Error::shape_str(existing.value.shape()),
                new: Error::shape_str(value.shape()),
            });
        }
        let (r, c) = value.shape();
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad: Array2::zeros(r, c),
                m: Array2::zeros(r, c),
                v: Array2::zeros(r, c),
                step: 0,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, name: &str) -> Result<&Array2> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Array2> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Array2> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Add `delta` into the gradient buffer for `name`. Successive backward
    /// passes accumulate; callers that want fresh gradients zero first.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Array2) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if e.grad.shape() != delta.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: Error::shape_str(e.grad.shape()),
                right: Error::shape_str(delta.shape()),
            });
        }
        e.grad.add_assign_scaled(delta, 1.0);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    pub fn grads_all_zero(&self) -> bool {
        self.entries
            .values()
            .all(|e| e.grad.as_slice().iter().all(|&g| g == 0.0))
    }

    pub fn grad_global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|e| e.grad.as_slice().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// One Adam update over every entry, then gradients are zeroed.
    ///
    /// Weight decay is folded into the gradient (L2 style) before the moment
    /// updates, and clipping rescales the whole gradient set at once so the
    /// update direction is preserved.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        let mut scale = 1.0;
        if let Some(max_norm) = cfg.clip_norm {
            let norm = self.grad_global_norm();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        for e in self.entries.values_mut() {
            e.step += 1;
            let t = e.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for i in 0..e.value.as_slice().len() {
                let g = e.grad.as_slice()[i] * scale + cfg.weight_decay * e.value.as_slice()[i];
                let m = cfg.beta1 * e.m.as_slice()[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * e.v.as_slice()[i] + (1.0 - cfg.beta2) * g * g;
                e.m.as_mut_slice()[i] = m;
                e.v.as_mut_slice()[i] = v;
                let update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                e.value.as_mut_slice()[i] -= update;
            }
            e.grad.fill(0.0);
        }
    }

    // ── checkpoint io ────────────────────────────────────────────────────

    /// Serialize weights only. Optimizer state is deliberately not saved;
    /// a loaded store starts with fresh moments.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(e.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(e.value.cols() as u32).to_le_bytes());
            for v in e.value.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:02x?}, expected {:02x?}",
                magic, MAGIC
            )));
        }
        let version = read_u32(&mut cur)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let count = read_u32(&mut cur)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut cur)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            cur.read_exact(&mut name_bytes)
                .map_err(|_| Error::Checkpoint("truncated entry name".into()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?;
            let rows = read_u32(&mut cur)? as usize;
            let cols = read_u32(&mut cur)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                cur.read_exact(&mut buf)
                    .map_err(|_| Error::Checkpoint(format!("truncated payload for `{name}`")))?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(&name, Array2::from_vec(rows, cols, data))?;
        }
        if cur.position() != bytes.len() as u64 {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Content fingerprint of the weights (names, shapes and values).
    pub fn values_hash(&self) -> u64 {
        fnv1a64(&self.to_bytes())
    }
}

fn read_u32(cur: &mut std::io::Cursor<&[u8]>) -> Result<u32> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated field".into()))?;
    Ok(u32::from_le_bytes(buf))
}
