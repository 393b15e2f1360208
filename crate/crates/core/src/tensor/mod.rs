//! Dense row-major tensors, reverse-mode differentiation and the Adam optimizer.
//!
//! A [`Tensor`] is a plain owned buffer. Differentiable computations are
//! recorded on a [`Tape`], which hands out [`Var`] handles and replays the
//! recorded operations backwards on [`Tape::backward`].
//!
//! All reductions accumulate in a fixed order (row-major, eight-lane partial
//! sums folded left to right), so results are bit-stable for a given build.

mod adam;
pub mod kernels;
mod tape;

use std::io::{BufRead, Write};
use std::path::Path;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Grads, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = numel_of(shape);
        assert!(n > 0, "zero-sized dimension in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks this tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::of(x.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| T::of(x.to_f64_lossy())).collect()),
        }
    }

    pub fn sum(&self) -> S {
        kernels::sum(&self.data)
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Writes the debug dump: a `shape d0 d1 ...` line, then little-endian f32 payload.
    pub fn write_dump(&self, mut w: impl Write) -> std::io::Result<()> {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "shape {}", dims.join(" "))?;
        for x in &self.data {
            w.write_all(&x.to_f32_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(mut r: impl BufRead, origin: &Path) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)
            .map_err(|e| Error::io(origin, e))?;
        let mut words = header.trim_end().split(' ');
        if words.next() != Some("shape") {
            return Err(Error::format(origin, "missing `shape` header"));
        }
        let shape = words
            .map(|w| w.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(origin, format!("bad dimension: {e}")))?;
        if shape.is_empty() {
            return Err(Error::format(origin, "empty shape"));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(origin, e))?;
        if bytes.len() != numel_of(&shape) * 4 {
            return Err(Error::format(
                origin,
                format!("payload has {} bytes for shape {shape:?}", bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| S::from_f32_lossless(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Tensor::new(&shape, data).map_err(|e| Error::format(origin, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        assert!(t.set_grad(vec![0.0; 4]).is_ok());
    }

    #[test]
    fn dump_round_trip() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 1], |i| i as f32 * 0.25 - 1.0);
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        assert!(buf.starts_with(b"shape 2 3 1\n"));
        let back = Tensor::<f32>::read_dump(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn dump_rejects_truncated_payload() {
        let mut buf = b"shape 2 2\n".to_vec();
        buf.extend_from_slice(&[0u8; 12]);
        assert!(Tensor::<f32>::read_dump(&buf[..], Path::new("mem")).is_err());
    }

    #[test]
    fn finiteness() {
        let mut t = Tensor::<f32>::zeros(&[3]);
        assert!(t.check_finite("t").is_ok());
        t.data_mut()[1] = f32::NAN;
        assert!(matches!(t.check_finite("t"), Err(Error::NonFinite(_))));
    }
}
