//! Binary checkpoint of named parameters.
//!
//! Layout (little-endian): magic `MSTPCKPT`, `u32` version, `u32` entry
//! count, then per entry `u16` name length + name, `u16` group length +
//! group, `u8` trainable flag, `u8` rank, `u32` per dimension and a `u64`
//! byte offset into the data section. The data section follows the table
//! and holds every buffer as raw `f32`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSTPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub group: String,
    pub trainable: bool,
    pub value: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            entries: store
                .iter()
                .map(|(_, p)| Entry { name: p.name.clone(), group: p.group.clone(), trainable: p.trainable, value: p.value.clone() })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut table = Vec::new();
        let mut offset = 0u64;
        for e in &self.entries {
            for s in [&e.name, &e.group] {
                table.extend_from_slice(&(s.len() as u16).to_le_bytes());
                table.extend_from_slice(s.as_bytes());
            }
            table.push(u8::from(e.trainable));
            table.push(e.value.shape().len() as u8);
            for d in e.value.shape() {
                table.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            table.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * e.value.numel() as u64;
        }
        let mut out = Vec::with_capacity(16 + table.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&table);
        for e in &self.entries {
            e.value.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let group = r.string()?;
            let trainable = r.take(1)?[0] != 0;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            meta.push((name, group, trainable, shape, offset));
        }
        let data = &bytes[r.pos..];
        let mut entries = Vec::with_capacity(n);
        let mut expected = 0usize;
        for (name, group, trainable, shape, offset) in meta {
            let len = shape.iter().product::<usize>() * 4;
            if offset != expected || offset + len > data.len() {
                return Err(Error::Checkpoint(format!("truncated or inconsistent data for {name}")));
            }
            let vals = data[offset..offset + len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            entries.push(Entry { name, group, trainable, value: Tensor::new(&shape, vals)? });
            expected += len;
        }
        if expected != data.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len() - expected)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies every parameter value into `store`. The checkpoint and the
    /// store must hold the same names with the same shapes; trainable flags
    /// of the store are left alone.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        let mine: BTreeSet<&str> = self.entries.iter().map(|e| e.name.as_str()).collect();
        let missing: BTreeSet<String> = store
            .iter()
            .filter(|(_, p)| !mine.contains(p.name.as_str()))
            .map(|(_, p)| p.group.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("checkpoint lacks groups: {}", missing.into_iter().collect::<Vec<_>>().join(", "))));
        }
        let unknown: BTreeSet<&str> = self.entries.iter().filter(|e| store.id(&e.name).is_none()).map(|e| e.group.as_str()).collect();
        if !unknown.is_empty() {
            return Err(Error::Checkpoint(format!("unknown groups in checkpoint: {}", unknown.into_iter().collect::<Vec<_>>().join(", "))));
        }
        for e in &self.entries {
            let id = store.id(&e.name).expect("checked above");
            let p = store.get(id);
            if p.value.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "group {}: parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                    e.group,
                    e.name,
                    e.value.shape(),
                    p.value.shape()
                )));
            }
        }
        for e in &self.entries {
            let id = store.id(&e.name).expect("checked above");
            store.get_mut(id).value.data_mut().copy_from_slice(e.value.data());
        }
        Ok(())
    }

    /// Copy without the groups matching `pred`.
    pub fn without_groups(&self, pred: impl Fn(&str) -> bool) -> Self {
        Self { entries: self.entries.iter().filter(|e| !pred(&e.group)).cloned().collect() }
    }

    pub fn count(&self) -> crate::params::ParamCount {
        let mut store = ParamStore::new();
        for e in &self.entries {
            let id = store.add(&e.name, &e.group, e.value.clone()).expect("names are unique");
            store.get_mut(id).trainable = e.trainable;
        }
        store.count()
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))
    }
}
