//! Night scenes: dark graded background, drifting rectangles and glowing lights.

use serde::{Deserialize, Serialize};

use crate::clip::{from_io, Clip, ClipRole, Geometry};
use crate::error::{Error, Result};
use crate::rng::NoiseRng;
use crate::scalar::Scalar;

/// Light colours, roughly sodium, white LED, red neon and cyan signage.
const PALETTE: [[f64; 3]; 4] = [
    [1.0, 0.62, 0.25],
    [0.95, 0.95, 1.0],
    [1.0, 0.3, 0.35],
    [0.4, 1.0, 0.85],
];
/// Bluish cast of unlit surfaces.
const NIGHT_TINT: [f64; 3] = [0.85, 0.9, 1.15];

const LIGHT_STREAM: u64 = 0x1000;
const OBJECT_STREAM: u64 = 0x2000;
const NOISE_STREAM: u64 = 0x3000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_lights: usize,
    /// Background level in I/O units, at most 0.2.
    pub base_luminance: f64,
    /// Noise standard deviation in fully dark regions (I/O units).
    pub sensor_noise_sigma: f64,
    /// Horizontal speed of the nearest rectangle, pixels per frame.
    pub object_speed: f64,
    /// Multiplier on glow intensity. Values above 1 saturate light cores.
    #[serde(default = "one")]
    pub light_gain: f64,
}

fn one() -> f64 {
    1.0
}

impl SceneSpec {
    pub fn geometry(&self) -> Geometry {
        Geometry::new(3, self.frames, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("scene spec: {what}")));
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad("empty geometry");
        }
        if !(0.0..=0.2).contains(&self.base_luminance) {
            return bad("base_luminance outside [0, 0.2]");
        }
        if !(0.0..=0.5).contains(&self.sensor_noise_sigma) {
            return bad("sensor_noise_sigma outside [0, 0.5]");
        }
        if !self.object_speed.is_finite() || self.object_speed.abs() > 64.0 {
            return bad("object_speed must be finite and at most 64 px/frame");
        }
        if !(0.0..=8.0).contains(&self.light_gain) {
            return bad("light_gain outside [0, 8]");
        }
        Ok(())
    }
}

struct Light {
    cx: f64,
    cy: f64,
    sigma: f64,
    rgb: [f64; 3],
}

struct Rect {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    speed: f64,
    rgb: [f64; 3],
}

fn draw_light(rng: &mut NoiseRng, spec: &SceneSpec) -> Light {
    let short = spec.height.min(spec.width) as f64;
    let cx = rng.uniform_in(0.0, spec.width as f64);
    let cy = rng.uniform_in(0.0, spec.height as f64);
    let sigma = rng.uniform_in(0.06, 0.16) * short;
    let intensity = rng.uniform_in(0.5, 1.5) * spec.light_gain;
    let colour = PALETTE[rng.int_in(0, PALETTE.len() - 1)];
    Light {
        cx,
        cy,
        sigma: sigma.max(0.5),
        rgb: colour.map(|c| c * intensity),
    }
}

fn draw_rect(rng: &mut NoiseRng, spec: &SceneSpec, depth: usize) -> Rect {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let shade = spec.base_luminance * rng.uniform_in(0.3, 2.5);
    let hue = [rng.uniform_in(0.8, 1.2), rng.uniform_in(0.8, 1.2), rng.uniform_in(0.8, 1.2)];
    // Farther layers move slower.
    let parallax = 1.0 / (1.0 + depth as f64);
    Rect {
        x: rng.uniform_in(0.0, w),
        y: rng.uniform_in(0.3 * h, 0.8 * h),
        w: rng.uniform_in(0.2, 0.45) * w,
        h: rng.uniform_in(0.15, 0.4) * h,
        speed: spec.object_speed * parallax,
        rgb: [shade * hue[0], shade * hue[1], shade * hue[2]],
    }
}

/// Length of `[a, a + len)` ∩ `[lo, lo + 1)` on a circle of circumference `period`.
fn wrapped_overlap(a: f64, len: f64, lo: f64, period: f64) -> f64 {
    let start = a.rem_euclid(period);
    let mut total = 0.0;
    for shift in [-period, 0.0, period] {
        let s = start + shift;
        let e = s + len;
        total += (e.min(lo + 1.0) - s.max(lo)).max(0.0);
    }
    total.min(1.0)
}

fn overlap(a: f64, len: f64, lo: f64) -> f64 {
    ((a + len).min(lo + 1.0) - a.max(lo)).clamp(0.0, 1.0)
}

/// Renders the clear clip described by `spec`. Pure in the spec.
pub fn gen_night_scene<S: Scalar>(spec: &SceneSpec) -> Result<Clip<S>> {
    spec.validate()?;
    let root = NoiseRng::new(spec.seed);
    // Each light and rectangle draws from its own stream so that raising
    // `n_lights` only adds glows on top of an otherwise identical scene.
    let lights: Vec<Light> = (0..spec.n_lights)
        .map(|i| draw_light(&mut root.fork(LIGHT_STREAM + i as u64), spec))
        .collect();
    let n_rects = 1 + root.fork(OBJECT_STREAM).int_in(0, 1);
    let rects: Vec<Rect> = (0..n_rects)
        .map(|i| draw_rect(&mut root.fork(OBJECT_STREAM + 1 + i as u64), spec, n_rects - 1 - i))
        .collect();
    let mut noise = root.fork(NOISE_STREAM);

    let (t_n, h_n, w_n) = (spec.frames, spec.height, spec.width);
    let plane = t_n * h_n * w_n;
    let mut out = vec![S::zero(); 3 * plane];
    let mut px = [0.0f64; 3];
    for t in 0..t_n {
        for y in 0..h_n {
            let grade = spec.base_luminance * (0.7 + 0.6 * (y as f64 + 0.5) / h_n as f64);
            for x in 0..w_n {
                for c in 0..3 {
                    px[c] = grade * NIGHT_TINT[c];
                }
                // Rectangles are painted back to front.
                for r in &rects {
                    let cov_x = wrapped_overlap(r.x + r.speed * t as f64, r.w, x as f64, w_n as f64);
                    let cov = cov_x * overlap(r.y, r.h, y as f64);
                    if cov > 0.0 {
                        for c in 0..3 {
                            px[c] = px[c] * (1.0 - cov) + r.rgb[c] * cov;
                        }
                    }
                }
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                for l in &lights {
                    let d2 = (fx - l.cx).powi(2) + (fy - l.cy).powi(2);
                    let g = (-d2 / (2.0 * l.sigma * l.sigma)).exp();
                    for c in 0..3 {
                        px[c] += l.rgb[c] * g;
                    }
                }
                let lum = (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]).clamp(0.0, 1.0);
                let sigma = spec.sensor_noise_sigma * 0.1 / (0.1 + lum);
                for (c, v) in px.iter().enumerate() {
                    let n = if sigma > 0.0 { sigma * noise.gaussian() } else { 0.0 };
                    let io = (v + n).clamp(0.0, 1.0);
                    out[c * plane + (t * h_n + y) * w_n + x] = from_io(S::of(io));
                }
            }
        }
    }
    Clip::from_vec(ClipRole::Pixel, spec.geometry(), out)
}
