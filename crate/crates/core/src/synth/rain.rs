//! Rain streaks: thin bright segments composited over a clip.
//!
//! Streak anchors live on a torus so a streak leaving the bottom edge
//! re-enters at the top, and every streak advances by exactly
//! `fall_speed` pixels per frame along its direction.

use serde::{Deserialize, Serialize};

use crate::clip::{from_io, to_io, Clip, ClipRole};
use crate::error::{Error, Result};
use crate::rng::NoiseRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Half-width of the fully opaque core of a streak, in pixels.
const CORE: f64 = 0.25;
/// Soft falloff beyond the core.
const FALLOFF: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainSpec {
    pub seed: u64,
    /// Fraction of the frame area touched by streaks, in `[0, 1]`.
    pub density: f64,
    /// Degrees from vertical, positive leaning right.
    pub angle: f64,
    pub streak_length: f64,
    /// Peak streak value in I/O units, in `(0, 1]`.
    pub streak_brightness: f64,
    /// Pixels per frame along the streak direction.
    pub fall_speed: f64,
    /// Extra brightness for streaks crossing lit regions; 0 disables it.
    #[serde(default)]
    pub glow_boost: f64,
}

impl RainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("rain spec: {what}")));
        if !(0.0..=1.0).contains(&self.density) {
            return bad("density outside [0, 1]");
        }
        if !(-80.0..=80.0).contains(&self.angle) {
            return bad("angle outside [-80, 80] degrees");
        }
        if !(self.streak_length > 0.0 && self.streak_length <= 64.0) {
            return bad("streak_length outside (0, 64]");
        }
        if !(self.streak_brightness > 0.0 && self.streak_brightness <= 1.0) {
            return bad("streak_brightness outside (0, 1]");
        }
        if !(self.fall_speed >= 0.0 && self.fall_speed <= 64.0) {
            return bad("fall_speed outside [0, 64]");
        }
        if !(0.0..=8.0).contains(&self.glow_boost) {
            return bad("glow_boost outside [0, 8]");
        }
        Ok(())
    }

    /// Number of streaks for a `height × width` frame.
    pub fn streak_count(&self, height: usize, width: usize) -> usize {
        (self.density * (height * width) as f64 / (2.0 * self.streak_length)).ceil() as usize
    }
}

struct Streak {
    x: f64,
    y: f64,
    alpha: f64,
    brightness: f64,
}

fn wrap(d: f64, period: f64) -> f64 {
    let r = d.rem_euclid(period);
    if r >= period / 2.0 {
        r - period
    } else {
        r
    }
}

/// Result of [`add_rain_layer`]: the rainy clip and the combined streak
/// opacity per position, shape `[T, H, W]`.
pub struct RainLayer<S> {
    pub clip: Clip<S>,
    pub alpha: Tensor<S>,
}

pub fn add_rain<S: Scalar>(x: &Clip<S>, spec: &RainSpec) -> Result<Clip<S>> {
    Ok(add_rain_layer(x, spec)?.clip)
}

pub fn add_rain_layer<S: Scalar>(x: &Clip<S>, spec: &RainSpec) -> Result<RainLayer<S>> {
    spec.validate()?;
    if x.role() != ClipRole::Pixel {
        return Err(Error::Usage("add_rain needs a pixel clip".into()));
    }
    let g = x.geometry();
    let (t_n, h_n, w_n) = (g.frames, g.height, g.width);
    let plane = g.plane();
    let mut alpha_map = vec![S::zero(); plane];
    let mut out = x.clone();
    let n = spec.streak_count(h_n, w_n);
    if n == 0 {
        return Ok(RainLayer {
            clip: out,
            alpha: Tensor::zeros(&[t_n, h_n, w_n]),
        });
    }

    let theta = spec.angle.to_radians();
    let (dir_x, dir_y) = (theta.sin(), theta.cos());
    let root = NoiseRng::new(spec.seed);
    let luminance = |t: usize, yy: usize, xx: usize| -> f64 {
        let at = |c| to_io(x.at(c, t, yy, xx)).to_f64_lossy();
        0.299 * at(0) + 0.587 * at(1.min(g.channels - 1)) + 0.114 * at(2.min(g.channels - 1))
    };
    // Streak i depends only on (seed, i), so higher densities add streaks
    // to the same set.
    let streaks: Vec<Streak> = (0..n)
        .map(|i| {
            let mut r = root.fork(i as u64);
            let sx = r.uniform_in(0.0, w_n as f64);
            let sy = r.uniform_in(0.0, h_n as f64);
            let alpha = r.uniform_in(0.55, 0.9);
            let mut brightness = spec.streak_brightness * r.uniform_in(0.7, 1.0);
            if spec.glow_boost > 0.0 {
                let lum = luminance(0, (sy as usize).min(h_n - 1), (sx as usize).min(w_n - 1));
                brightness = (brightness * (1.0 + spec.glow_boost * lum)).min(1.0);
            }
            Streak {
                x: sx,
                y: sy,
                alpha,
                brightness,
            }
        })
        .collect();

    let half = spec.streak_length / 2.0;
    let mut layer = vec![(0.0f64, 0.0f64); n];
    for t in 0..t_n {
        let shift = spec.fall_speed * t as f64;
        for yy in 0..h_n {
            for xx in 0..w_n {
                let (px, py) = (xx as f64 + 0.5, yy as f64 + 0.5);
                let mut hits = 0;
                for s in &streaks {
                    let dx = wrap(px - (s.x + shift * dir_x), w_n as f64);
                    let dy = wrap(py - (s.y + shift * dir_y), h_n as f64);
                    let along = (dx * dir_x + dy * dir_y).clamp(-half, half);
                    let dist = ((dx - along * dir_x).powi(2) + (dy - along * dir_y).powi(2)).sqrt();
                    let cov = (1.0 - (dist - CORE).max(0.0) / FALLOFF).clamp(0.0, 1.0);
                    if cov > 0.0 {
                        layer[hits] = (s.alpha * cov, s.brightness);
                        hits += 1;
                    }
                }
                if hits == 0 {
                    continue;
                }
                let pos = (t * h_n + yy) * w_n + xx;
                let mut keep = 1.0;
                for c in 0..g.channels {
                    let idx = c * plane + pos;
                    let mut v = to_io(out.data()[idx]).to_f64_lossy();
                    keep = 1.0;
                    for &(a, b) in &layer[..hits] {
                        v = v * (1.0 - a) + b * a;
                        keep *= 1.0 - a;
                    }
                    out.data_mut()[idx] = from_io(S::of(v.clamp(0.0, 1.0)));
                }
                alpha_map[pos] = S::of(1.0 - keep);
            }
        }
    }
    Ok(RainLayer {
        clip: out,
        alpha: Tensor::new(&[t_n, h_n, w_n], alpha_map)?,
    })
}
