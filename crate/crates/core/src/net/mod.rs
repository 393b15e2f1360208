//! Transformer noise estimator.
//!
//! Layout: a non-overlapping 3D convolution turns the channel-concatenated
//! `(x_t ⧺ condition)` clip into `P` tokens of width `C_p` (plus a learned
//! positional table); a sinusoidal featurization of `t` followed by a
//! two-layer MLP gives the time embedding; each block is modulated by six
//! vectors projected from that embedding (shift/scale/gate for attention and
//! MLP); a final modulated norm and a linear head map tokens back to patches,
//! which are scattered into a noise clip with half the input channels.

mod forward;
mod params;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use forward::{ada_ln, time_features, transformer_block, BlockModulation, BlockTrace, Bound};
pub use params::{BlockParams, NetParams};

use crate::clip::Geometry;
use crate::error::{Error, Result};
use crate::rng::NoiseRng;
use crate::scalar::Scalar;
use crate::tensor::kernels::PatchGrid;

/// Patch extents and token width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub ts: usize,
    pub ss: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Geometry of one pixel clip (the condition and the noise target).
    pub clip: Geometry,
    pub patch: PatchSpec,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl NetConfig {
    /// Default head count: one head per 64 channels, at least one.
    pub fn default_heads(width: usize) -> usize {
        (width / 64).max(1)
    }

    pub fn input_grid(&self) -> PatchGrid {
        PatchGrid {
            channels: 2 * self.clip.channels,
            frames: self.clip.frames,
            height: self.clip.height,
            width: self.clip.width,
            ts: self.patch.ts,
            ss: self.patch.ss,
        }
    }

    pub fn output_grid(&self) -> PatchGrid {
        PatchGrid {
            channels: self.clip.channels,
            ..self.input_grid()
        }
    }

    /// Token count `P = (T/ts)·(H/ss)·(W/ss)`.
    pub fn tokens(&self) -> usize {
        self.input_grid().patches()
    }

    pub fn head_dim(&self) -> usize {
        self.patch.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.clip;
        if g.channels == 0 || g.frames == 0 || g.height == 0 || g.width == 0 {
            return Err(Error::Config(format!("empty clip geometry {g:?}")));
        }
        if self.patch.ts == 0 || self.patch.ss == 0 {
            return Err(Error::Config("patch sizes must be at least 1".into()));
        }
        if !self.input_grid().divides() {
            return Err(Error::Config(format!(
                "clip {}x{}x{} not divisible by patch ({}, {}, {})",
                g.frames, g.height, g.width, self.patch.ts, self.patch.ss, self.patch.ss
            )));
        }
        if self.patch.width < 2 || self.patch.width % 2 != 0 {
            return Err(Error::Config("token width must be even and at least 2".into()));
        }
        if self.heads == 0 || self.patch.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "token width {} not divisible by {} heads",
                self.patch.width, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp ratio must be positive".into()));
        }
        Ok(())
    }
}

/// The noise estimator: configuration, parameters and cached index maps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseNet<S> {
    config: NetConfig,
    pub params: NetParams<S>,
    unpatch: Arc<Vec<usize>>,
}

impl<S: Scalar> NoiseNet<S> {
    /// Random initialization; modulation projections, head, biases and the
    /// positional table start at zero so every block is the identity.
    pub fn init(config: NetConfig, rng: &mut NoiseRng) -> Result<Self> {
        config.validate()?;
        let params = NetParams::init(&config, rng);
        Ok(Self::from_params(config, params)?)
    }

    pub fn from_params(config: NetConfig, params: NetParams<S>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self {
            config,
            params,
            unpatch: Arc::new(unpatch_index(&config.output_grid())),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub(crate) fn unpatch_index(&self) -> Arc<Vec<usize>> {
        Arc::clone(&self.unpatch)
    }

    pub fn cast<T: Scalar>(&self) -> NoiseNet<T> {
        NoiseNet {
            config: self.config,
            params: self.params.cast(),
            unpatch: Arc::clone(&self.unpatch),
        }
    }
}

/// For every clip element (row-major `[C, T, H, W]`), the position in the
/// `[P, C·ts·ss·ss]` head output that lands there.
pub fn unpatch_index(grid: &PatchGrid) -> Vec<usize> {
    let k = grid.patch_len();
    let mut inv = vec![usize::MAX; grid.patches() * k];
    for p in 0..grid.patches() {
        for j in 0..k {
            inv[grid.volume_index(p, j)] = p * k + j;
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> NetConfig {
        NetConfig {
            clip: Geometry::new(3, 4, 16, 16),
            patch: PatchSpec {
                ts: 2,
                ss: 2,
                width: 64,
            },
            blocks: 2,
            heads: 1,
            mlp_ratio: 4,
        }
    }

    #[test]
    fn token_counts() {
        assert_eq!(desk().tokens(), 128);
        let paper = NetConfig {
            clip: Geometry::new(3, 4, 64, 64),
            patch: PatchSpec {
                ts: 2,
                ss: 2,
                width: 768,
            },
            blocks: 10,
            heads: NetConfig::default_heads(768),
            mlp_ratio: 4,
        };
        assert_eq!(paper.tokens(), 2048);
        assert_eq!(paper.heads, 12);
    }

    #[test]
    fn validation() {
        assert!(desk().validate().is_ok());
        let mut c = desk();
        c.clip.height = 15;
        assert!(c.validate().is_err());
        let mut c = desk();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unpatch_is_a_bijection() {
        let grid = desk().output_grid();
        let inv = unpatch_index(&grid);
        let mut sorted = inv.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..inv.len()).collect::<Vec<_>>());
        // Scattering token coordinates back reproduces the clip coordinates.
        let k = grid.patch_len();
        for (f, &src) in inv.iter().enumerate() {
            assert_eq!(grid.volume_index(src / k, src % k), f);
        }
    }
}
