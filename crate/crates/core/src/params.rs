//! Named parameter tensors and the binary checkpoint container.
//!
//! Container layout: the 8-byte magic `MOLFLD01`, then one record per tensor
//! until end of file:
//!
//! ```text
//! name_len: u32 LE | name: UTF-8 | rank: u32 LE | dims: u64 LE × rank | values: f64 LE × Π dims
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, NodeId, Tensor};

pub const MAGIC: &[u8; 8] = b"MOLFLD01";

/// Ordered by name so iteration (and therefore serialization and optimizer
/// updates) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Graph leaves for a [`ParamStore`], looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    ids: HashMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn gradients(&self, grads: &Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, id) in &self.ids {
            if let Some(g) = grads.get(*id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Leaf,
    Constant,
    Skip,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn merge_prefix(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.insert(k.clone(), v.clone());
        }
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
            .collect();
        Bound { ids }
    }

    /// Registers every tensor as a constant (no gradients).
    pub fn bind_const(&self, graph: &mut Graph) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
            .collect();
        Bound { ids }
    }

    /// Registers each tensor according to `how`; skipped tensors are absent
    /// from the returned handles.
    pub fn bind_with(&self, graph: &mut Graph, how: impl Fn(&str) -> Binding) -> Bound {
        let mut ids = HashMap::new();
        for (k, v) in &self.tensors {
            match how(k) {
                Binding::Leaf => ids.insert(k.clone(), graph.leaf(v.clone())),
                Binding::Constant => ids.insert(k.clone(), graph.constant(v.clone())),
                Binding::Skip => None,
            };
        }
        Bound { ids }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("unknown magic".into()));
        }
        let mut cur = Cursor { bytes, pos: 8 };
        let mut store = ParamStore::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            store.insert(name, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated record".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Glorot-uniform `fan_in × fan_out` matrix.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn container_roundtrip() {
        let mut s = ParamStore::new();
        s.insert("a/w", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, 7.0]).unwrap());
        s.insert("b", Tensor::scalar(4.25));
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"MOLFLD01");
        // first record: name length 3, "a/w", rank 2, dims 2 and 3
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[12..15], b"a/w");
        assert_eq!(&buf[15..19], &2u32.to_le_bytes());
        assert_eq!(&buf[19..27], &2u64.to_le_bytes());
        let back = ParamStore::from_bytes(&buf).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(ParamStore::from_bytes(b"MOLFLD02").is_err());
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(1.0));
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(ParamStore::from_bytes(&buf), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn xavier_respects_bound() {
        let mut r = rng(3);
        let w = xavier(&mut r, 10, 6);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }
}
