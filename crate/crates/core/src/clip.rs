//! Video clips: `[channels, frames, height, width]` tensors with a role tag.
//!
//! Pixel clips hold values in `[-1, 1]`; file and metric boundaries work in
//! `[0, 1]` and convert with [`to_io`] / [`from_io`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn new(channels: usize, frames: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            frames,
            height,
            width,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.channels * self.plane()
    }

    /// Elements of one channel: `frames·height·width`.
    pub fn plane(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClipRole {
    Pixel,
    Latent,
    Noise,
    Condition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip<S> {
    role: ClipRole,
    geometry: Geometry,
    tensor: Tensor<S>,
}

#[inline]
pub fn to_io<S: Scalar>(x: S) -> S {
    (x + S::one()) * S::of(0.5)
}

#[inline]
pub fn from_io<S: Scalar>(v: S) -> S {
    v * S::of(2.0) - S::one()
}

impl<S: Scalar> Clip<S> {
    pub fn new(role: ClipRole, tensor: Tensor<S>) -> Result<Self> {
        let geometry = match tensor.shape() {
            [c, t, h, w] => Geometry::new(*c, *t, *h, *w),
            s => return Err(Error::shape(format!("clip must be [C,T,H,W], got {s:?}"))),
        };
        if role == ClipRole::Pixel {
            if let Some(v) = tensor
                .data()
                .iter()
                .find(|v| !(v.abs() <= S::one()))
            {
                return Err(Error::Data(format!("pixel clip value {v} outside [-1, 1]")));
            }
        }
        Ok(Self {
            role,
            geometry,
            tensor,
        })
    }

    pub fn pixel(tensor: Tensor<S>) -> Result<Self> {
        Self::new(ClipRole::Pixel, tensor)
    }

    pub fn from_vec(role: ClipRole, geometry: Geometry, data: Vec<S>) -> Result<Self> {
        Self::new(role, Tensor::new(&geometry.shape(), data)?)
    }

    pub fn full(role: ClipRole, geometry: Geometry, value: S) -> Self {
        Self::new(role, Tensor::full(&geometry.shape(), value)).expect("valid constant clip")
    }

    /// Standard Gaussian draw.
    pub fn noise(geometry: Geometry, rng: &mut crate::rng::NoiseRng) -> Self {
        let data = rng.gaussian_vec(geometry.numel());
        Self::from_vec(ClipRole::Noise, geometry, data).expect("geometry matches")
    }

    pub fn role(&self) -> ClipRole {
        self.role
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.tensor
    }

    pub fn data(&self) -> &[S] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        self.tensor.data_mut()
    }

    /// Re-tags the clip. Retagging as pixel re-validates the range.
    pub fn with_role(self, role: ClipRole) -> Result<Self> {
        Self::new(role, self.tensor)
    }

    /// Clamps into `[-1, 1]` and tags the result as a pixel clip.
    pub fn clamp_to_pixels(&self) -> Self {
        Self {
            role: ClipRole::Pixel,
            geometry: self.geometry,
            tensor: self.tensor.map(|x| x.max(-S::one()).min(S::one())),
        }
    }

    pub fn check_same_geometry(&self, other: &Self) -> Result<()> {
        if self.geometry != other.geometry {
            return Err(Error::shape(format!(
                "clip geometry {:?} vs {:?}",
                self.geometry, other.geometry
            )));
        }
        Ok(())
    }

    /// Value at `(c, t, y, x)`.
    pub fn at(&self, c: usize, t: usize, y: usize, x: usize) -> S {
        let g = self.geometry;
        self.data()[((c * g.frames + t) * g.height + y) * g.width + x]
    }

    /// Frames `start..start+len` of every channel.
    pub fn frames(&self, start: usize, len: usize) -> Result<Self> {
        let g = self.geometry;
        if len == 0 || start + len > g.frames {
            return Err(Error::shape(format!(
                "frames {start}..{} of a {}-frame clip",
                start + len,
                g.frames
            )));
        }
        let fsz = g.height * g.width;
        let mut data = Vec::with_capacity(g.channels * len * fsz);
        for c in 0..g.channels {
            let base = c * g.frames * fsz;
            data.extend_from_slice(&self.data()[base + start * fsz..base + (start + len) * fsz]);
        }
        Self::from_vec(self.role, Geometry { frames: len, ..g }, data)
    }

    /// Joins clips along the frame axis.
    pub fn concat_frames(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("no clips to join"))?;
        let g0 = first.geometry;
        let mut frames = 0;
        for p in parts {
            let g = p.geometry;
            if (g.channels, g.height, g.width) != (g0.channels, g0.height, g0.width) {
                return Err(Error::shape(format!("cannot join {g:?} with {g0:?}")));
            }
            frames += g.frames;
        }
        let fsz = g0.height * g0.width;
        let mut data = Vec::with_capacity(g0.channels * frames * fsz);
        for c in 0..g0.channels {
            for p in parts {
                let n = p.geometry.frames * fsz;
                data.extend_from_slice(&p.data()[c * n..(c + 1) * n]);
            }
        }
        Self::from_vec(first.role, Geometry { frames, ..g0 }, data)
    }

    /// Channel-wise concatenation `[self ⧺ other]`, the network input layout.
    pub fn concat_channels(&self, other: &Self) -> Result<Tensor<S>> {
        let (a, b) = (self.geometry, other.geometry);
        if (a.frames, a.height, a.width) != (b.frames, b.height, b.width) {
            return Err(Error::shape(format!(
                "channel concat of {a:?} and {b:?}"
            )));
        }
        let mut data = Vec::with_capacity(self.data().len() + other.data().len());
        data.extend_from_slice(self.data());
        data.extend_from_slice(other.data());
        Tensor::new(&[a.channels + b.channels, a.frames, a.height, a.width], data)
    }

    /// Per-position mean over channels of `|self − other|`, shape `[T, H, W]`.
    pub fn channel_mean_abs_diff(&self, other: &Self) -> Result<Tensor<S>> {
        self.check_same_geometry(other)?;
        let g = self.geometry;
        let plane = g.plane();
        let mut out = vec![S::zero(); plane];
        for c in 0..g.channels {
            for (i, o) in out.iter_mut().enumerate() {
                *o += (self.data()[c * plane + i] - other.data()[c * plane + i]).abs();
            }
        }
        let inv = S::one() / S::of(g.channels as f64);
        Tensor::new(&[g.frames, g.height, g.width], out.into_iter().map(|v| v * inv).collect())
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_geometry(other)?;
        let s: f64 = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .sum();
        Ok(s / self.data().len() as f64)
    }

    pub fn cast<T: Scalar>(&self) -> Clip<T> {
        Clip {
            role: self.role,
            geometry: self.geometry,
            tensor: self.tensor.cast(),
        }
    }
}
