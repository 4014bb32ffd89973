//! Named parameter storage with a checksummed binary encoding.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{DenseArray, NumError};
use crate::codec::{Reader, Writer};

pub const PARAM_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"VLAPARAM";

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    array: DenseArray,
    trainable: bool,
}

/// Ordered map of named arrays, each flagged trainable or frozen.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, array: DenseArray, trainable: bool) -> Result<(), NumError> {
        if self.entries.contains_key(name) {
            return Err(NumError::Contract(format!("duplicate parameter `{name}`")));
        }
        if !array.is_finite() {
            return Err(NumError::NonFinite { op: format!("insert {name}") });
        }
        let mut array = array;
        array.set_requires_grad(trainable);
        self.entries.insert(name.to_string(), Entry { array, trainable });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn entry(&self, name: &str) -> Result<(&DenseArray, bool), NumError> {
        self.entries
            .get(name)
            .map(|e| (&e.array, e.trainable))
            .ok_or_else(|| NumError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray, NumError> {
        self.entry(name).map(|(a, _)| a)
    }

    /// Mutable access to the values of one entry.
    pub fn values_mut(&mut self, name: &str) -> Result<&mut [f64], NumError> {
        self.entries
            .get_mut(name)
            .map(|e| e.array.data_mut())
            .ok_or_else(|| NumError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool, NumError> {
        self.entry(name).map(|(_, t)| t)
    }

    /// Flips the trainable flag of every entry whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.trainable = trainable;
                e.array.set_requires_grad(trainable);
                n += 1;
            }
        }
        n
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray, bool)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.array, e.trainable))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|(_, e)| e.trainable).map(|(k, _)| k.clone()).collect()
    }

    pub fn n_scalars(&self, trainable_only: bool) -> usize {
        self.entries.values().filter(|e| !trainable_only || e.trainable).map(|e| e.array.len()).sum()
    }

    /// Resets gradients of trainable entries to zeros.
    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.array.zero_grad();
        }
    }

    pub fn clear_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.array.clear_grad();
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<(), NumError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NumError::Contract(format!("unknown parameter `{name}`")))?;
        if g.len() != e.array.len() {
            return Err(NumError::Shape(format!("gradient for `{name}` has wrong length")));
        }
        e.array.accumulate_grad(g);
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).and_then(|e| e.array.grad())
    }

    /// Order-independent SHA-256 over every entry whose name starts with
    /// `prefix`: each entry is hashed on its own (name, shape, raw bytes) and
    /// the sorted per-entry digests are hashed again.
    pub fn checksum(&self, prefix: &str) -> Result<String, NumError> {
        self.checksum_where(|name, _| name.starts_with(prefix))
    }

    /// Checksum over every frozen entry.
    pub fn frozen_checksum(&self) -> Result<String, NumError> {
        self.checksum_where(|_, trainable| !trainable)
    }

    fn checksum_where(&self, pick: impl Fn(&str, bool) -> bool) -> Result<String, NumError> {
        let mut digests: Vec<[u8; 32]> = self
            .entries
            .iter()
            .filter(|(k, e)| pick(k, e.trainable))
            .map(|(k, e)| {
                let mut h = Sha256::new();
                h.update(k.as_bytes());
                for d in e.array.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in e.array.data() {
                    h.update(v.to_le_bytes());
                }
                h.finalize().into()
            })
            .collect();
        if digests.is_empty() {
            return Err(NumError::Contract("checksum subset matched no entries".into()));
        }
        digests.sort_unstable();
        let mut h = Sha256::new();
        for d in &digests {
            h.update(d);
        }
        Ok(hex(&h.finalize()))
    }

    pub fn encode(&self, w: &mut Writer) {
        w.bytes(MAGIC);
        w.u32(PARAM_FORMAT_VERSION);
        w.u64(self.entries.len() as u64);
        for (name, e) in &self.entries {
            w.str(name);
            w.u8(e.trainable as u8);
            w.u32(e.array.shape().len() as u32);
            for d in e.array.shape() {
                w.u64(*d as u64);
            }
            w.f64s(e.array.data());
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, NumError> {
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(NumError::Format("not a parameter block".into()));
        }
        let version = r.u32()?;
        if version != PARAM_FORMAT_VERSION {
            return Err(NumError::Format(format!("parameter format version {version}, expected {PARAM_FORMAT_VERSION}")));
        }
        let n = r.u64()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = r.str()?;
            let trainable = r.u8()? != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let data = r.f64s(count)?;
            store.insert(&name, DenseArray::new(&shape, data)?, trainable)?;
        }
        Ok(store)
    }

    /// Standalone byte encoding: the block followed by its SHA-256.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish_with_checksum()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumError> {
        let body = crate::codec::verify_checksum(bytes)?;
        let mut r = Reader::new(body);
        let store = Self::decode(&mut r)?;
        r.expect_end()?;
        Ok(store)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
