//! Named, ordered parameter storage and its on-disk container.
//!
//! Container layout: `"DFPS"`, u32 header length, UTF-8 header text, u32 entry
//! count, then per entry u16 name length, name bytes, u8 group tag and one
//! tensor container.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{read_tensor_from, write_tensor_to, Tensor};

const MAGIC: &[u8; 4] = b"DFPS";

/// Optimizer parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Feature-extraction backbone and the auxiliary depth branch.
    Backbone,
    Rest,
}

impl ParamGroup {
    fn tag(self) -> u8 {
        match self {
            ParamGroup::Backbone => 0,
            ParamGroup::Rest => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ParamGroup::Backbone),
            1 => Some(ParamGroup::Rest),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<F>,
}

/// Parameters keyed by dot-separated path, iterated in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    entries: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<F>, group: ParamGroup) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            group,
            tensor: tensor.with_grad(),
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::config(format!("unknown parameter {name}"))),
        }
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, i: usize) -> &Param<F> {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut Param<F> {
        &mut self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    /// Total learnable scalars, optionally restricted to names with `prefix`.
    pub fn num_scalars(&self, prefix: Option<&str>) -> usize {
        self.entries
            .iter()
            .filter(|p| prefix.is_none_or(|pre| p.name.starts_with(pre)))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.entries {
            out.register(&p.name, p.tensor.cast(), p.group)
                .expect("names already unique");
        }
        out
    }

    pub fn to_bytes(&self, header: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for p in &self.entries {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.group.tag());
            write_tensor_to(&p.tensor.detached(), &mut out);
        }
        out
    }

    /// Decodes a container, returning the store and its header text.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let take = |pos: usize, n: usize, what: &str| -> Result<&[u8]> {
            bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::parse(pos, format!("truncated {what}")))
        };
        if take(0, 4, "magic")? != MAGIC {
            return Err(Error::parse(0, "bad magic, expected DFPS"));
        }
        let hlen = u32::from_le_bytes(take(4, 4, "header length")?.try_into().unwrap()) as usize;
        let header = std::str::from_utf8(take(8, hlen, "header")?)
            .map_err(|_| Error::parse(8, "header is not UTF-8"))?
            .to_string();
        let mut pos = 8 + hlen;
        let count = u32::from_le_bytes(take(pos, 4, "entry count")?.try_into().unwrap()) as usize;
        pos += 4;
        let mut store = Self::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(pos, 2, "name length")?.try_into().unwrap()) as usize;
            pos += 2;
            let name = std::str::from_utf8(take(pos, nlen, "name")?)
                .map_err(|_| Error::parse(pos, "parameter name is not UTF-8"))?
                .to_string();
            pos += nlen;
            let tag = take(pos, 1, "group tag")?[0];
            let group = ParamGroup::from_tag(tag)
                .ok_or_else(|| Error::parse(pos, format!("unknown group tag {tag}")))?;
            pos += 1;
            let (tensor, used) = read_tensor_from(&bytes[pos..], pos)?;
            pos += used;
            store
                .register(&name, tensor, group)
                .map_err(|e| Error::parse(pos, e.to_string()))?;
        }
        if pos != bytes.len() {
            return Err(Error::parse(pos, "trailing bytes after last parameter"));
        }
        Ok((store, header))
    }

    pub fn save(&self, path: impl AsRef<Path>, header: &str) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes(header)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
