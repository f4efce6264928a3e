use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named model parameters, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Param>,
}

/// Gradient per parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Parameter names mapped to their leaves on one tape.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on the tape: trainable ones as leaves, the rest as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let var = if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                };
                (name.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Places every parameter on the tape as a constant, for inference.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.constant(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Gradient of every trainable parameter; leaves the loss never reached get zeros.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> Result<GradMap> {
        let mut out = GradMap::new();
        for (name, p) in self.params.iter().filter(|(_, p)| p.trainable) {
            let var = bound.get(name)?;
            let g = match grads.get(var) {
                Some(g) => Tensor::new(p.value.shape().to_vec(), g.to_vec())?,
                None => Tensor::zeros(p.value.shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Writes the checkpoint: an 8-byte little-endian header length, a JSON
    /// header of `{name: {shape, trainable, data_offsets}}`, then every tensor
    /// as little-endian `f64` in name order.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = BTreeMap::new();
        let mut offset = 0usize;
        for (name, p) in &self.params {
            let len = p.value.numel() * 8;
            header.insert(
                name.clone(),
                HeaderEntry {
                    dtype: "F64".to_string(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                    data_offsets: [offset, offset + len],
                },
            );
            offset += len;
        }
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.params.values() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: Default::default(),
            reason,
        };
        if bytes.len() < 8 {
            return Err(bad("truncated header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body_start = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file")))?;
        let header: BTreeMap<String, HeaderEntry> = serde_json::from_slice(&bytes[8..body_start])?;
        let body = &bytes[body_start..];
        let mut params = ParameterSet::new();
        for (name, entry) in header {
            if entry.dtype != "F64" {
                return Err(bad(format!("{name}: unsupported dtype {}", entry.dtype)));
            }
            let [start, end] = entry.data_offsets;
            if start > end || end > body.len() || (end - start) % 8 != 0 {
                return Err(bad(format!("{name}: bad offsets {start}..{end}")));
            }
            let data = body[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Tensor::new(entry.shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            params.insert(name, value, entry.trainable);
        }
        Ok(params)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    trainable: bool,
    data_offsets: [usize; 2],
}
