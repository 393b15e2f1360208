//! Noise schedule, forward noising, the conditional noise-prediction loss and
//! the deterministic reverse sampler.

use serde::{Deserialize, Serialize};

use crate::clip::{Clip, ClipRole};
use crate::error::{Error, Result};
use crate::rng::NoiseRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Linear variance schedule over `T` steps with cumulative products.
///
/// Index 0 of [`NoiseSchedule::alpha_bar`] is the clean-data convention `ᾱ₀ = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("empty beta table".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("betas must be non-decreasing".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Usage(format!(
                "time step {t} outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_noise<S: Scalar>(
    x0: &Clip<S>,
    t: usize,
    eps: &Clip<S>,
    schedule: &NoiseSchedule,
) -> Result<Clip<S>> {
    schedule.check_t(t)?;
    x0.check_same_geometry(eps)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (S::of(ab.sqrt()), S::of((1.0 - ab).sqrt()));
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Clip::from_vec(ClipRole::Latent, x0.geometry(), data)
}

/// One deterministic reverse update from step `t` to `t_prev`:
///
/// `x_prev = √ᾱ_prev·(x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t + √(1−ᾱ_prev)·ε̂`
///
/// evaluated as `c_x·x_t + c_ε·ε̂` with both coefficients formed in `f64`.
pub fn reverse_step<S: Scalar>(
    x_t: &Clip<S>,
    t: usize,
    t_prev: usize,
    eps_pred: &Clip<S>,
    schedule: &NoiseSchedule,
) -> Result<Clip<S>> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::Usage(format!("reverse step needs t_prev < t, got {t_prev} >= {t}")));
    }
    x_t.check_same_geometry(eps_pred)?;
    let (ab, abp) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let cx = (abp / ab).sqrt();
    let ce = (1.0 - abp).sqrt() - (abp * (1.0 - ab) / ab).sqrt();
    let (cx, ce) = (S::of(cx), S::of(ce));
    let data = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&x, &e)| cx * x + ce * e)
        .collect();
    Clip::from_vec(ClipRole::Latent, x_t.geometry(), data)
}

/// A conditional noise estimator `ε(x_t, cond, t)` that can record itself on a tape.
pub trait NoiseEstimator<S: Scalar> {
    /// Records the prediction on `tape`; the result has `x_t`'s shape.
    fn estimate(&self, tape: &mut Tape<S>, x_t: &Clip<S>, cond: &Clip<S>, t: usize) -> Result<Var>;

    /// Inference-only prediction.
    fn predict(&self, x_t: &Clip<S>, cond: &Clip<S>, t: usize) -> Result<Clip<S>> {
        let mut tape = Tape::inference();
        let v = self.estimate(&mut tape, x_t, cond, t)?;
        Clip::new(ClipRole::Noise, tape.tensor(v))
    }
}

/// Masked noise-prediction loss
/// `‖mask⊙(eps − ε(forward_noise(x0, t, eps), cond, t))‖²` divided by the
/// number of unmasked elements.
///
/// `mask` has shape `[T, H, W]` and is broadcast over channels; `None` means
/// all ones. An all-zero mask is rejected with [`Error::DegenerateMask`].
#[allow(clippy::too_many_arguments)]
pub fn training_loss<S: Scalar, E: NoiseEstimator<S> + ?Sized>(
    estimator: &E,
    tape: &mut Tape<S>,
    x0: &Clip<S>,
    cond: &Clip<S>,
    t: usize,
    eps: &Clip<S>,
    mask: Option<&Tensor<S>>,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    if t == 0 {
        return Err(Error::Usage("training time step must be at least 1".into()));
    }
    let g = x0.geometry();
    let cg = cond.geometry();
    if (g.frames, g.height, g.width) != (cg.frames, cg.height, cg.width) {
        return Err(Error::shape(format!("condition {cg:?} vs target {g:?}")));
    }
    let x_t = forward_noise(x0, t, eps, schedule)?;
    let pred = estimator.estimate(tape, &x_t, cond, t)?;
    if tape.shape(pred) != g.shape() {
        return Err(Error::shape(format!(
            "estimator returned {:?}, expected {:?}",
            tape.shape(pred),
            g.shape()
        )));
    }
    let target = tape.constant(eps.tensor());
    let diff = tape.sub(target, pred)?;
    let sq = tape.mul(diff, diff)?;
    let (weighted, count) = match mask {
        None => (sq, g.numel()),
        Some(m) => {
            if m.shape() != [g.frames, g.height, g.width] {
                return Err(Error::shape(format!(
                    "mask {:?} does not match clip {:?}",
                    m.shape(),
                    g
                )));
            }
            let ones = m.data().iter().filter(|v| **v != S::zero()).count();
            if ones == 0 {
                return Err(Error::DegenerateMask);
            }
            let mut full = Vec::with_capacity(g.numel());
            for _ in 0..g.channels {
                full.extend_from_slice(m.data());
            }
            let mv = tape.constant(&Tensor::new(&g.shape(), full)?);
            (tape.mul(sq, mv)?, ones * g.channels)
        }
    };
    let total = tape.sum(weighted);
    Ok(tape.scale(total, S::one() / S::of(count as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
}

impl SamplerConfig {
    /// Evenly spaced visited steps `T = τ_0 > τ_1 > … > τ_steps = 0`, with
    /// `τ_i = ⌊T·(steps − i)/steps⌋`.
    pub fn subsequence(&self, total: usize) -> Result<Vec<usize>> {
        if self.steps == 0 || self.steps > total {
            return Err(Error::Config(format!(
                "sampler steps must lie in 1..={total}, got {}",
                self.steps
            )));
        }
        Ok((0..=self.steps)
            .map(|i| total * (self.steps - i) / self.steps)
            .collect())
    }
}

/// Deterministic conditional sampling: draws `x_T` from `cfg.seed`, walks the
/// step subsequence with [`reverse_step`] and clamps only the final output.
pub fn sample<S: Scalar, E: NoiseEstimator<S> + ?Sized>(
    estimator: &E,
    cond: &Clip<S>,
    cfg: SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Clip<S>> {
    if cond.role() != ClipRole::Pixel {
        return Err(Error::Usage("sampling condition must be a pixel clip".into()));
    }
    let seq = cfg.subsequence(schedule.steps())?;
    let mut rng = NoiseRng::new(cfg.seed);
    let mut x = Clip::noise(cond.geometry(), &mut rng);
    for w in seq.windows(2) {
        let eps = estimator.predict(&x, cond, w[0])?;
        x = reverse_step(&x, w[0], w[1], &eps, schedule)?;
    }
    x.tensor().check_finite("sampler output")?;
    Ok(x.clamp_to_pixels())
}

/// Anything that maps a degraded clip to a restored one given a noise seed.
pub trait Restorer<S: Scalar>: Sync {
    fn restore(&self, cond: &Clip<S>, seed: u64) -> Result<Clip<S>>;
}

/// [`sample`] bound to an estimator, schedule and step count.
pub struct Sampler<'a, E: ?Sized> {
    pub estimator: &'a E,
    pub schedule: &'a NoiseSchedule,
    pub steps: usize,
}

impl<S: Scalar, E: NoiseEstimator<S> + Sync + ?Sized> Restorer<S> for Sampler<'_, E> {
    fn restore(&self, cond: &Clip<S>, seed: u64) -> Result<Clip<S>> {
        sample(
            self.estimator,
            cond,
            SamplerConfig {
                steps: self.steps,
                seed,
            },
            self.schedule,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::Geometry;
    use proptest::prelude::*;

    fn geom() -> Geometry {
        Geometry::new(3, 2, 4, 4)
    }

    fn clip_of(rng: &mut NoiseRng, role: ClipRole, g: Geometry) -> Clip<f64> {
        let data = match role {
            ClipRole::Pixel => (0..g.numel()).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
            _ => rng.gaussian_vec(g.numel()),
        };
        Clip::from_vec(role, g, data).unwrap()
    }

    /// Returns a constant noise map supplied at construction.
    struct FixedNoise(Clip<f64>);

    impl NoiseEstimator<f64> for FixedNoise {
        fn estimate(&self, tape: &mut Tape<f64>, _: &Clip<f64>, _: &Clip<f64>, _: usize) -> Result<Var> {
            Ok(tape.constant(self.0.tensor()))
        }
    }

    /// Returns the noise that sends every `x_t` exactly onto `target` at `t = 0`.
    struct Steer {
        target: Clip<f64>,
        schedule: NoiseSchedule,
    }

    impl NoiseEstimator<f64> for Steer {
        fn estimate(&self, tape: &mut Tape<f64>, x_t: &Clip<f64>, _: &Clip<f64>, t: usize) -> Result<Var> {
            let ab = self.schedule.alpha_bar(t);
            let eps = x_t.tensor().zip_map(self.target.tensor(), |x, y| {
                (x - ab.sqrt() * y) / (1.0 - ab).sqrt()
            })?;
            Ok(tape.constant(&eps))
        }
    }

    #[test]
    fn schedule_examples() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // Product computed independently (numpy): 4.0358e-5.
        assert!(s.alpha_bar(1000) < 0.01);
        assert!((s.alpha_bar(1000) - 4.0358e-5).abs() < 1e-8);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let g = geom();
        let sched = NoiseSchedule::from_betas(vec![0.36]).unwrap();
        let x0 = Clip::<f64>::full(ClipRole::Pixel, g, 0.5);
        let eps = Clip::full(ClipRole::Noise, g, 1.0);
        let xt = forward_noise(&x0, 1, &eps, &sched).unwrap();
        assert!(xt.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert_eq!(forward_noise(&x0, 0, &eps, &sched).unwrap().data(), x0.data());
        let zero = Clip::<f64>::full(ClipRole::Pixel, g, 0.0);
        let xt = forward_noise(&zero, 1, &eps, &sched).unwrap();
        assert!(xt.data().iter().all(|v| (v - 0.6).abs() < 1e-12));
        assert!(forward_noise(&x0, 2, &eps, &sched).is_err());
    }

    #[test]
    fn reverse_step_matches_scalar_oracle() {
        // ᾱ_1 = 0.8, ᾱ_2 = 0.5
        let sched = NoiseSchedule::from_betas(vec![0.2, 0.375]).unwrap();
        assert!((sched.alpha_bar(2) - 0.5).abs() < 1e-15);
        let mut rng = NoiseRng::new(5);
        let g = geom();
        let xt = clip_of(&mut rng, ClipRole::Latent, g);
        let eps = clip_of(&mut rng, ClipRole::Noise, g);
        let out = reverse_step(&xt, 2, 1, &eps, &sched).unwrap();
        let (ab, abp) = (0.5f64, 0.8f64);
        for i in 0..g.numel() {
            let (x, e) = (xt.data()[i], eps.data()[i]);
            let want = abp.sqrt() * ((x - (1.0 - ab).sqrt() * e) / ab.sqrt()) + (1.0 - abp).sqrt() * e;
            assert!((out.data()[i] - want).abs() < 1e-6);
        }
        assert!(reverse_step(&xt, 1, 1, &eps, &sched).is_err());
    }

    proptest! {
        #[test]
        fn reverse_inverts_forward(seed in any::<u64>(), t in 1usize..=200, frac in 0.0f64..1.0) {
            let sched = NoiseSchedule::linear(200, 5e-4, 0.1).unwrap();
            let t_prev = ((t as f64) * frac) as usize;
            let mut rng = NoiseRng::new(seed);
            let g = geom();
            let x0 = clip_of(&mut rng, ClipRole::Pixel, g);
            let eps = clip_of(&mut rng, ClipRole::Noise, g);
            let xt = forward_noise(&x0, t, &eps, &sched).unwrap();
            let back = reverse_step(&xt, t, t_prev, &eps, &sched).unwrap();
            let want = forward_noise(&x0, t_prev, &eps, &sched).unwrap();
            for (a, b) in back.data().iter().zip(want.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn loss_of_exact_and_offset_stubs() {
        let g = geom();
        let sched = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let mut rng = NoiseRng::new(9);
        let x0 = clip_of(&mut rng, ClipRole::Pixel, g);
        let cond = clip_of(&mut rng, ClipRole::Pixel, g);
        let eps = clip_of(&mut rng, ClipRole::Noise, g);

        let exact = FixedNoise(eps.clone());
        let mut tape = Tape::new();
        let l = training_loss(&exact, &mut tape, &x0, &cond, 4, &eps, None, &sched).unwrap();
        assert_eq!(tape.value(l)[0], 0.0);

        let c = 0.3;
        let off = FixedNoise(Clip::new(ClipRole::Noise, eps.tensor().map(|e| e + c)).unwrap());
        let mut tape = Tape::new();
        let full = training_loss(&off, &mut tape, &x0, &cond, 4, &eps, None, &sched).unwrap();
        let full = tape.value(full)[0];
        assert!((full - c * c).abs() < 1e-12);

        let half = Tensor::from_fn(&[g.frames, g.height, g.width], |i| (i % 2) as f64);
        let mut tape = Tape::new();
        let l = training_loss(&off, &mut tape, &x0, &cond, 4, &eps, Some(&half), &sched).unwrap();
        assert!((tape.value(l)[0] - full).abs() < 1e-12);

        let none = Tensor::zeros(&[g.frames, g.height, g.width]);
        let mut tape = Tape::new();
        assert!(matches!(
            training_loss(&off, &mut tape, &x0, &cond, 4, &eps, Some(&none), &sched),
            Err(Error::DegenerateMask)
        ));
    }

    #[test]
    fn subsequence_shape() {
        let cfg = SamplerConfig { steps: 25, seed: 0 };
        let seq = cfg.subsequence(200).unwrap();
        assert_eq!(seq.len(), 26);
        assert_eq!(seq[0], 200);
        assert_eq!(*seq.last().unwrap(), 0);
        assert!(seq.windows(2).all(|w| w[0] > w[1]));
        let seq = cfg.subsequence(1000).unwrap();
        assert!(seq.windows(2).all(|w| w[0] > w[1]));
        assert!(cfg.subsequence(10).is_err());
    }

    #[test]
    fn sampler_converges_to_steered_target_and_is_deterministic() {
        let g = geom();
        let sched = NoiseSchedule::linear(50, 1e-3, 0.1).unwrap();
        let mut rng = NoiseRng::new(1);
        let target = clip_of(&mut rng, ClipRole::Pixel, g);
        let cond = clip_of(&mut rng, ClipRole::Pixel, g);
        let steer = Steer {
            target: target.clone(),
            schedule: sched.clone(),
        };
        let cfg = SamplerConfig { steps: 10, seed: 42 };
        let out = sample(&steer, &cond, cfg, &sched).unwrap();
        for (a, b) in out.data().iter().zip(target.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let again = sample(&steer, &cond, cfg, &sched).unwrap();
        assert_eq!(out, again);
        assert_eq!(out.role(), ClipRole::Pixel);
    }
}
