//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "UADC"  version:u32  count:u32
//! count × { name_len:u32 name rank:u32 extents:u64×rank data:f32×numel }
//! n_alias:u32      n_alias × { alias_len:u32 alias canon_len:u32 canonical }
//! n_trainable:u32  n_trainable × { len:u32 name }
//! config_hash:[u8;32]  backbone_hash:[u8;32]
//! ```
//!
//! Canonical tensors appear once; aliases are listed by name only.

use std::path::Path;

use uniadapter_tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::store::{Group, ParameterStore, Slot};

pub const MAGIC: &[u8; 4] = b"UADC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    /// `(alias, canonical)`.
    pub aliases: Vec<(String, String)>,
    pub trainable: Vec<String>,
    pub config_hash: [u8; 32],
    pub backbone_hash: [u8; 32],
}

/// Group implied by a parameter name.
pub fn group_of(name: &str) -> Group {
    if name.starts_with("adapter.") || name.starts_with("lora.") {
        Group::Adapter
    } else if name.starts_with("head.") {
        Group::Head
    } else {
        Group::Backbone
    }
}

impl Checkpoint {
    /// Snapshot of the slots selected by `keep`, with the aliases that point
    /// at them and the trainable flags among them.
    pub fn from_store<T: Real>(
        store: &ParameterStore<T>,
        keep: impl Fn(&Slot<T>) -> bool,
        config_hash: [u8; 32],
        backbone_hash: [u8; 32],
    ) -> Self {
        let kept: Vec<&Slot<T>> = store.slots().iter().filter(|s| keep(s)).collect();
        let entries = kept
            .iter()
            .map(|s| Entry {
                name: s.name.clone(),
                shape: s.tensor.shape().to_vec(),
                data: s.tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        let aliases = store
            .aliases()
            .into_iter()
            .filter(|(_, c)| kept.iter().any(|s| s.name == *c))
            .map(|(a, c)| (a.to_string(), c.to_string()))
            .collect();
        let trainable = kept
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.name.clone())
            .collect();
        Self {
            entries,
            aliases,
            trainable,
            config_hash,
            backbone_hash,
        }
    }

    /// Standalone store: groups follow the name prefixes.
    pub fn to_store<T: Real>(&self) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        for e in &self.entries {
            let data = e.data.iter().map(|&v| T::of(v as f64)).collect();
            store.insert(&e.name, group_of(&e.name), Tensor::from_vec(e.shape.clone(), data)?)?;
        }
        for (a, c) in &self.aliases {
            store.alias(a, c).map_err(|_| {
                Error::Checkpoint(format!("alias `{a}` points at missing tensor `{c}`"))
            })?;
        }
        for n in &self.trainable {
            store.set_trainable(n, true).map_err(|_| {
                Error::Checkpoint(format!("trainable listing names missing tensor `{n}`"))
            })?;
        }
        Ok(store)
    }

    /// Copies every entry into the same-named tensor of `store`.
    pub fn apply_to<T: Real>(&self, store: &mut ParameterStore<T>) -> Result<()> {
        for e in &self.entries {
            let t = store
                .get_mut(&e.name)
                .map_err(|_| Error::Checkpoint(format!("checkpoint tensor `{}` not in model", e.name)))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?} in checkpoint but {:?} in model",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&e.data) {
                *dst = T::of(src as f64);
            }
        }
        for (a, c) in &self.aliases {
            let (sa, sc) = (store.slot_of(a), store.slot_of(c));
            if sa.is_err() || sa.ok() != sc.ok() {
                return Err(Error::Checkpoint(format!(
                    "alias `{a}` → `{c}` does not match the model's parameter plan"
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.entries.len() as u32);
        for e in &self.entries {
            put_str(&mut out, &e.name);
            put_u32(&mut out, e.shape.len() as u32);
            for &x in &e.shape {
                out.extend_from_slice(&(x as u64).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.aliases.len() as u32);
        for (a, c) in &self.aliases {
            put_str(&mut out, a);
            put_str(&mut out, c);
        }
        put_u32(&mut out, self.trainable.len() as u32);
        for n in &self.trainable {
            put_str(&mut out, n);
        }
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.backbone_hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &x| acc.checked_mul(x))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(Entry { name, shape, data });
        }
        let na = r.u32()? as usize;
        let mut aliases = Vec::new();
        for _ in 0..na {
            let a = r.string()?;
            let c = r.string()?;
            aliases.push((a, c));
        }
        let nt = r.u32()? as usize;
        let mut trainable = Vec::new();
        for _ in 0..nt {
            trainable.push(r.string()?);
        }
        let config_hash = r.take(32)?.try_into().unwrap();
        let backbone_hash = r.take(32)?.try_into().unwrap();
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        let ck = Self {
            entries,
            aliases,
            trainable,
            config_hash,
            backbone_hash,
        };
        ck.check_closure()?;
        Ok(ck)
    }

    fn check_closure(&self) -> Result<()> {
        for (a, c) in &self.aliases {
            if !self.entries.iter().any(|e| &e.name == c) {
                return Err(Error::Checkpoint(format!(
                    "dangling alias `{a}` → `{c}`"
                )));
            }
            if self.entries.iter().any(|e| &e.name == a) {
                return Err(Error::Checkpoint(format!("alias `{a}` shadows a tensor")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn has_backbone(&self) -> bool {
        self.entries.iter().any(|e| group_of(&e.name) == Group::Backbone)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {} of {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut s: ParameterStore<f32> = ParameterStore::new();
        s.insert("adapter.text.0.down", Group::Adapter, Tensor::full(&[2, 1], 0.5)).unwrap();
        s.insert("visual.cls", Group::Backbone, Tensor::full(&[1, 2], -1.25)).unwrap();
        s.alias("adapter.visual.0.down", "adapter.text.0.down").unwrap();
        s.set_trainable("adapter.text.0.down", true).unwrap();
        Checkpoint::from_store(&s, |_| true, [1; 32], [2; 32])
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"UADC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn aliases_survive_into_a_store() {
        let store: ParameterStore<f32> = sample().to_store().unwrap();
        assert_eq!(store.canonical("adapter.visual.0.down").unwrap(), "adapter.text.0.down");
        assert!(store.slot(0).trainable && !store.slot(1).trainable);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
        let mut ck = sample();
        ck.aliases.push(("x".into(), "nowhere".into()));
        let err = Checkpoint::from_bytes(&ck.to_bytes()).unwrap_err();
        assert!(err.to_string().contains("dangling alias"), "{err}");
    }
}
