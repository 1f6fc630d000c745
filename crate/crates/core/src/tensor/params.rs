use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Result, Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPOTCKPT";

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("parameter name is not UTF-8")]
    BadName,
    #[error("unknown parameter `{0}` in checkpoint")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint lacks parameter `{0}`")]
    MissingParam(String),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t.with_grad());
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Places every parameter on `tape` as a gradient-tracking leaf and
    /// returns the handles indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param_leaf(t, ParamId(i)))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Adds the gradients of the bound leaves into each parameter's `grad`.
    /// Parameters the loss did not reach receive zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &[Var]) {
        for &v in bound {
            let Some(id) = tape.param_of(v) else { continue };
            let t = &mut self.tensors[id.0];
            let n = t.len();
            let slot = t.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(g) = tape.grad(v) {
                for (a, b) in slot.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub(crate) fn require_grads(&self) -> Result<()> {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if t.grad.is_none() {
                return Err(TensorError::MissingGrad(name.clone()));
            }
        }
        Ok(())
    }

    /// Writes the checkpoint: magic, then per parameter `u32` name length,
    /// UTF-8 name, `u32` rank, rank × `u32` dims, `f32` data. Little-endian.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::result::Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Overwrites parameter values from a checkpoint, validating names and
    /// shapes against this store. Every parameter must be present.
    pub fn read_checkpoint<R: Read>(&mut self, mut r: R) -> std::result::Result<(), CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut seen = vec![false; self.tensors.len()];
        let mut staged: Vec<(usize, Vec<f64>)> = Vec::new();
        while !cur.done() {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let id = *self
                .by_name
                .get(&name)
                .ok_or_else(|| CheckpointError::UnknownParam(name.clone()))?;
            let expected = self.tensors[id].shape().to_vec();
            if shape != expected {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected,
                    found: shape,
                });
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            seen[id] = true;
            staged.push((id, data));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(CheckpointError::MissingParam(self.names[i].clone()));
        }
        for (id, data) in staged {
            self.tensors[id].data_mut().copy_from_slice(&data);
        }
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> std::result::Result<(), CheckpointError> {
        let f = std::fs::File::open(path)?;
        self.read_checkpoint(std::io::BufReader::new(f))
    }

    /// Rounds every value to `f32` precision, i.e. what a checkpoint keeps.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "a.weight",
            Tensor::matrix(2, 3, vec![0.5, -1.25, 3.0, 0.0, 1e-3, 7.0]).unwrap(),
        );
        s.add("a.bias", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        s.add("gate", Tensor::scalar(1.0));
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_after_f32_rounding() {
        let mut a = store();
        a.round_to_f32();
        let mut bytes = Vec::new();
        a.write_checkpoint(&mut bytes).unwrap();
        let mut b = store();
        for id in b.ids().collect::<Vec<_>>() {
            b.get_mut(id).data_mut().fill(9.0);
        }
        b.read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(a, b);
        let mut again = Vec::new();
        b.write_checkpoint(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn checkpoint_rejects_shape_and_name_problems() {
        let s = store();
        let mut bytes = Vec::new();
        s.write_checkpoint(&mut bytes).unwrap();

        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            other.read_checkpoint(&bytes[..]),
            Err(CheckpointError::ShapeMismatch { .. })
        ));

        let mut bigger = store();
        bigger.add("extra", Tensor::scalar(0.0));
        assert!(matches!(
            bigger.read_checkpoint(&bytes[..]),
            Err(CheckpointError::MissingParam(n)) if n == "extra"
        ));

        let mut s2 = store();
        assert!(matches!(
            s2.read_checkpoint(&bytes[..bytes.len() - 2]),
            Err(CheckpointError::Truncated)
        ));
        assert!(matches!(
            s2.read_checkpoint(&b"NOTACKPT"[..]),
            Err(CheckpointError::BadMagic)
        ));
    }
}
