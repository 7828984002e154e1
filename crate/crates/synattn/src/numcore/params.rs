//! Named parameter container and the binary checkpoint format.
//!
//! Checkpoint layout: magic `SYNATTN1`, u32 parameter count, then per
//! parameter: u32 name length, UTF-8 name, u32 rank, u64 extents,
//! little-endian f64 values.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::tape::{Gradients, Tape, VarId};
use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SYNATTN1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected SYNATTN1")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Parameters keyed by name, kept sorted so iteration order (and hence
/// every training trajectory) is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        match self.entries.binary_search_by(|(n, _)| n.as_str().cmp(name)) {
            Ok(i) => self.entries[i].1 = tensor,
            Err(i) => self.entries.insert(i, (name.to_string(), tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(move |i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Number of scalars in parameters whose name matches a prefix.
    pub fn n_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Register every parameter on a tape, returning the handle map.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.input(t.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Register every parameter, substituting an existing tape node for
    /// `name` (used to finite-difference one parameter at a time).
    pub fn register_with(&self, tape: &mut Tape, name: &str, id: VarId) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                if n == name {
                    (n.clone(), id)
                } else {
                    (n.clone(), tape.input(t.clone()))
                }
            })
            .collect();
        ParamVars { vars }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<ParamSet, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let count = read_u32(r)? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(read_f64(r)?);
            }
            set.insert(&name, Tensor::new(shape, data));
        }
        Ok(set)
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Tape handles for one registration of a ParamSet.
pub struct ParamVars {
    vars: Vec<(String, VarId)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> VarId {
        self.vars
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .map(|i| self.vars[i].1)
            .unwrap_or_else(|_| panic!("unknown parameter {:?}", name))
    }

    pub fn try_get(&self, name: &str) -> Option<VarId> {
        self.vars
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(|i| self.vars[i].1)
    }

    /// Collect per-parameter gradients in ParamSet order, zeros for
    /// parameters the loss never touched.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|(_, id)| grads.get_or_zero(*id, tape.value(*id).shape()))
            .collect()
    }
}
