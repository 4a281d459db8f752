//! Trainable parameters, SGD with momentum, and the `NNP1` weight file.
//!
//! `NNP1` layout (little-endian):
//!
//! ```text
//! "NNP1" | u32 tensor_count
//! per tensor: u32 name_len | name (utf-8) | u32 ndim | u32 dims[ndim] | f32 values
//! ```

use std::fs;
use std::path::Path;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const NNP_MAGIC: &[u8; 4] = b"NNP1";

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Momentum buffer.
    pub velocity: Tensor<F>,
}

/// Ordered parameter set; order is the serialisation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<F> {
    entries: Vec<Param<F>>,
}

impl<F: Real> Params<F> {
    pub fn new() -> Self {
        Params { entries: Vec::new() }
    }

    /// Adds a tensor and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<F>) -> usize {
        let velocity = Tensor::zeros(value.shape());
        self.entries.push(Param {
            name: name.into(),
            value,
            velocity,
        });
        self.entries.len() - 1
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

    pub fn get(&self, slot: usize) -> &Tensor<F> {
        &self.entries[slot].value
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor<F> {
        &mut self.entries[slot].value
    }

    pub fn param(&self, slot: usize) -> &Param<F> {
        &self.entries[slot]
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Zero tensors shaped like every parameter, for gradient accumulation.
    pub fn zeros_like(&self) -> Vec<Tensor<F>> {
        self.entries.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }

    pub fn reset_momentum(&mut self) {
        self.entries.iter_mut().for_each(|p| p.velocity.fill(F::zero()));
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    velocity: p.velocity.cast(),
                })
                .collect(),
        }
    }
}

/// `buf ← momentum·buf + grad; w ← w − lr·buf` for every parameter.
pub fn sgd_step<F: Real>(params: &mut Params<F>, grads: &[Tensor<F>], lr: F, momentum: F) -> Result<()> {
    if !(lr > F::zero()) {
        return Err(Error::arg(format!("learning rate must be > 0, got {lr:?}")));
    }
    if !(momentum >= F::zero() && momentum < F::one()) {
        return Err(Error::arg(format!("momentum must be in [0, 1), got {momentum:?}")));
    }
    if grads.len() != params.len() {
        return Err(Error::shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.entries.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::shape(format!(
                "gradient for {} has shape {:?}, expected {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Training(format!("non-finite gradient in layer {}", p.name)));
        }
    }
    for (p, g) in params.entries.iter_mut().zip(grads) {
        for ((w, b), &d) in p.value.data_mut().iter_mut().zip(p.velocity.data_mut()).zip(g.data()) {
            *b = momentum * *b + d;
            *w = *w - lr * *b;
        }
    }
    Ok(())
}

pub fn encode_params<F: Real>(params: &Params<F>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(NNP_MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_params<F: Real>(bytes: &[u8]) -> Result<Params<F>> {
    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }
    impl Cursor<'_> {
        fn take(&mut self, n: usize) -> Result<&[u8]> {
            let end = self.pos + n;
            if end > self.bytes.len() {
                return Err(Error::Length {
                    expected: end,
                    actual: self.bytes.len(),
                });
            }
            let s = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(s)
        }
        fn u32(&mut self) -> Result<usize> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
        }
    }

    if bytes.len() < 4 || &bytes[..4] != NNP_MAGIC {
        return Err(Error::Format("bad magic, expected \"NNP1\"".into()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let count = cur.u32()?;
    let mut params = Params::new();
    for _ in 0..count {
        let name_len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_owned();
        let ndim = cur.u32()?;
        let shape = (0..ndim).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = cur
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        params.push(name, Tensor::from_vec(&shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(params)
}

pub fn write_params<F: Real>(params: &Params<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn read_params<F: Real>(path: impl AsRef<Path>) -> Result<Params<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}
