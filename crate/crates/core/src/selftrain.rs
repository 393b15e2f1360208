//! Teacher-student self-training on unlabelled rain and clear videos.
//!
//! The teacher is an exponential moving average of the student and never
//! receives gradients. It produces pseudo pairs in two ways:
//!
//! * rain removal: several samples per rain clip, keep the pixels where
//!   they agree, and train the student to map the (augmented) rain clip to
//!   their mean there;
//! * correction: restore a clear clip, and train on the pixels where the
//!   restoration drifted from the input.

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::clip::{Clip, ClipRole};
use crate::diffusion::{NoiseSchedule, Restorer, Sampler};
use crate::error::{Error, Result};
use crate::net::NoiseNet;
use crate::parallel;
use crate::rng::NoiseRng;
use crate::scalar::Scalar;
use crate::tensor::{AdamState, Tensor};
use crate::train::{train_step, TrainSample};

pub const EMA_DECAY: f64 = 0.999;
/// Largest variance of the augmentation noise, in internal units.
pub const AUGMENT_MAX_VARIANCE: f64 = 0.2;
/// Fraction of pixel positions blanked by augmentation.
pub const AUGMENT_MASK_RATIO: f64 = 0.25;

const STEP_STREAM: u64 = 0x5354_4550;
const ROUND_STREAM: u64 = 0x524F_554E;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudent<S> {
    teacher: NoiseNet<S>,
    student: NoiseNet<S>,
    ema_decay: f64,
}

/// Largest teacher move of one EMA update and the bound it must respect.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaReport {
    pub max_change: f64,
    /// `(1 − decay)·max|student − teacher|` before the update.
    pub bound: f64,
}

impl EmaReport {
    /// True when the move stays within the bound up to rounding of the
    /// stored type (`ulp` is its relative precision).
    pub fn within_bound(&self, ulp: f64, scale: f64) -> bool {
        self.max_change <= self.bound + 4.0 * ulp * scale.max(1.0)
    }
}

impl<S: Scalar> TeacherStudent<S> {
    /// Teacher and student both start from `pretrained`.
    pub fn new(pretrained: NoiseNet<S>) -> Self {
        let student = pretrained.clone();
        Self::from_parts(pretrained, student, EMA_DECAY).expect("identical shapes")
    }

    pub fn from_parts(mut teacher: NoiseNet<S>, student: NoiseNet<S>, ema_decay: f64) -> Result<Self> {
        if teacher.config() != student.config() {
            return Err(Error::shape("teacher and student configurations differ"));
        }
        if !(0.0..=1.0).contains(&ema_decay) {
            return Err(Error::Config(format!("ema decay {ema_decay} outside [0, 1]")));
        }
        teacher.params.clear_grads();
        Ok(Self {
            teacher,
            student,
            ema_decay,
        })
    }

    pub fn teacher(&self) -> &NoiseNet<S> {
        &self.teacher
    }

    pub fn student(&self) -> &NoiseNet<S> {
        &self.student
    }

    pub fn student_mut(&mut self) -> &mut NoiseNet<S> {
        &mut self.student
    }

    pub fn ema_decay(&self) -> f64 {
        self.ema_decay
    }

    pub fn into_parts(self) -> (NoiseNet<S>, NoiseNet<S>) {
        (self.teacher, self.student)
    }

    /// `teacher ← d·teacher + (1 − d)·student`, elementwise.
    pub fn ema_update(&mut self) -> Result<EmaReport> {
        let d = self.ema_decay;
        let mut report = EmaReport {
            max_change: 0.0,
            bound: 0.0,
        };
        let students = self.student.params.tensors();
        let teachers = self.teacher.params.tensors_mut();
        if students.len() != teachers.len() {
            return Err(Error::shape("teacher and student tensor counts differ"));
        }
        let mut gap = 0.0f64;
        for (t, s) in teachers.into_iter().zip(students) {
            if t.shape() != s.shape() {
                return Err(Error::shape(format!(
                    "teacher tensor {:?} vs student {:?}",
                    t.shape(),
                    s.shape()
                )));
            }
            for (w, &v) in t.data_mut().iter_mut().zip(s.data()) {
                let (old, sv) = (w.to_f64_lossy(), v.to_f64_lossy());
                let new = S::of(d * old + (1.0 - d) * sv);
                gap = gap.max((sv - old).abs());
                report.max_change = report.max_change.max((new.to_f64_lossy() - old).abs());
                *w = new;
            }
        }
        report.bound = (1.0 - d) * gap;
        Ok(report)
    }
}

/// Mean of N restorations and their per-position spread.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap<S> {
    pub mean: Clip<S>,
    /// Population variance over the samples, averaged over channels; `[T, H, W]`.
    pub u: Tensor<S>,
    pub samples: usize,
}

/// Restores `rain` once per seed and summarizes the samples.
///
/// The mean is `x_1 + Σ(x_i − x_1)/N` and the variance uses pairwise
/// differences, so identical samples give exactly their value and zero.
pub fn confidence_sample<S: Scalar, R: Restorer<S> + ?Sized>(
    restorer: &R,
    rain: &Clip<S>,
    seeds: &[u64],
) -> Result<ConfidenceMap<S>> {
    if seeds.is_empty() {
        return Err(Error::Usage("confidence sampling needs at least one seed".into()));
    }
    let samples = parallel::map(seeds, |&s| restorer.restore(rain, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    for s in &samples {
        rain.check_same_geometry(s)?;
    }
    let g = rain.geometry();
    let n = samples.len() as f64;
    let plane = g.plane();
    let mut mean = vec![S::zero(); g.numel()];
    let mut u = vec![0.0f64; plane];
    for (idx, m) in mean.iter_mut().enumerate() {
        let vals: Vec<f64> = samples.iter().map(|s| s.data()[idx].to_f64_lossy()).collect();
        let base = vals[0];
        let shift: f64 = vals.iter().map(|v| v - base).sum();
        *m = S::of(base + shift / n);
        let mut pair = 0.0;
        for i in 0..vals.len() {
            for j in i + 1..vals.len() {
                pair += (vals[i] - vals[j]).powi(2);
            }
        }
        // Σ_{i,j}(x_i − x_j)² = 2·N²·var, counting each unordered pair twice.
        u[idx % plane] += pair / (n * n);
    }
    let u = u.into_iter().map(|v| S::of(v / g.channels as f64)).collect();
    Ok(ConfidenceMap {
        mean: Clip::from_vec(ClipRole::Pixel, g, mean)?,
        u: Tensor::new(&[g.frames, g.height, g.width], u)?,
        samples: seeds.len(),
    })
}

/// `1` where `u < t_u`, else `0`. An all-zero result is a degenerate pair.
pub fn binarize_confidence<S: Scalar>(u: &Tensor<S>, t_u: f64) -> Result<Tensor<S>> {
    if t_u.is_nan() || t_u < 0.0 {
        return Err(Error::Usage(format!("confidence threshold {t_u} must be non-negative")));
    }
    let mask = u.map(|v| if v.to_f64_lossy() < t_u { S::one() } else { S::zero() });
    if mask.data().iter().all(|v| *v == S::zero()) {
        return Err(Error::DegenerateMask);
    }
    Ok(mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    RainRemoval,
    Correction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPair<S> {
    pub condition: Clip<S>,
    pub target: Clip<S>,
    /// `[T, H, W]`, at least one nonzero.
    pub mask: Tensor<S>,
    pub branch: Branch,
}

fn check_mask<S: Scalar>(mask: &Tensor<S>, clip: &Clip<S>) -> Result<()> {
    let g = clip.geometry();
    if mask.shape() != [g.frames, g.height, g.width] {
        return Err(Error::shape(format!("mask {:?} does not match clip {g:?}", mask.shape())));
    }
    if mask.data().iter().all(|v| *v == S::zero()) {
        return Err(Error::DegenerateMask);
    }
    Ok(())
}

pub fn build_rain_pair<S: Scalar>(rain: &Clip<S>, mean: &Clip<S>, mask: Tensor<S>) -> Result<PseudoPair<S>> {
    rain.check_same_geometry(mean)?;
    check_mask(&mask, rain)?;
    Ok(PseudoPair {
        condition: rain.clone(),
        target: mean.clone(),
        mask,
        branch: Branch::RainRemoval,
    })
}

/// Gaussian noise of variance `v ~ U(0, 0.2)` plus blanking of 25% of the
/// pixel positions (all channels) to zero. The result is a condition clip
/// and is not clamped.
pub fn augment_condition<S: Scalar>(x: &Clip<S>, seed: u64) -> Result<Clip<S>> {
    let mut rng = NoiseRng::new(seed);
    let variance = rng.uniform_in(0.0, AUGMENT_MAX_VARIANCE);
    let sd = variance.sqrt();
    let g = x.geometry();
    let mut data: Vec<S> = x
        .data()
        .iter()
        .map(|&v| S::of(v.to_f64_lossy() + sd * rng.gaussian()))
        .collect();
    let plane = g.plane();
    let blank = (AUGMENT_MASK_RATIO * plane as f64).round() as usize;
    for pos in rng.choose_indices(plane, blank) {
        for c in 0..g.channels {
            data[c * plane + pos] = S::zero();
        }
    }
    Clip::from_vec(ClipRole::Condition, g, data)
}

/// How correction pairs are conditioned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// Condition on the teacher's restoration, target the clear clip.
    #[default]
    PredictionAsCondition,
    /// Condition on the clear clip itself (identity on the drifted pixels).
    ClearAsCondition,
}

/// Difference pair from a clear clip, or `None` when the teacher already
/// reproduces it within `t_d` everywhere.
pub fn build_correction_pair<S: Scalar, R: Restorer<S> + ?Sized>(
    restorer: &R,
    clear: &Clip<S>,
    seed: u64,
    t_d: f64,
    mode: CorrectionMode,
) -> Result<Option<PseudoPair<S>>> {
    let restored = restorer.restore(clear, seed)?;
    correction_pair_from(restored, clear, t_d, mode)
}

pub fn correction_pair_from<S: Scalar>(
    restored: Clip<S>,
    clear: &Clip<S>,
    t_d: f64,
    mode: CorrectionMode,
) -> Result<Option<PseudoPair<S>>> {
    let diff = restored.channel_mean_abs_diff(clear)?;
    let mask = diff.map(|d| if d.to_f64_lossy() > t_d { S::one() } else { S::zero() });
    if mask.data().iter().all(|v| *v == S::zero()) {
        return Ok(None);
    }
    let condition = match mode {
        CorrectionMode::PredictionAsCondition => restored,
        CorrectionMode::ClearAsCondition => clear.clone(),
    };
    Ok(Some(PseudoPair {
        condition,
        target: clear.clone(),
        mask,
        branch: Branch::Correction,
    }))
}

/// One student update on a batch of pairs followed by one EMA update.
/// Rain-removal conditions are augmented; correction conditions are not.
pub fn selftrain_step<S: Scalar>(
    ts: &mut TeacherStudent<S>,
    pairs: &[&PseudoPair<S>],
    schedule: &NoiseSchedule,
    rng: &mut NoiseRng,
    adam: &mut AdamState<S>,
) -> Result<(f64, EmaReport)> {
    let mut batch = Vec::with_capacity(pairs.len());
    for p in pairs {
        let t = rng.int_in(1, schedule.steps());
        let eps = Clip::noise(p.target.geometry(), rng);
        let cond = match p.branch {
            Branch::RainRemoval => augment_condition(&p.condition, rng.next_u64())?,
            Branch::Correction => p.condition.clone(),
        };
        batch.push(TrainSample {
            target: p.target.clone(),
            cond,
            t,
            eps,
            mask: Some(p.mask.clone()),
        });
    }
    let loss = train_step(&mut ts.student, &batch, schedule, adam)?;
    let ema = ts.ema_update()?;
    Ok((loss, ema))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfTrainConfig {
    pub steps: usize,
    /// Restorations per rain clip for the confidence map.
    pub samples: usize,
    pub t_u: f64,
    pub t_d: f64,
    /// Videos per step (P) and clips per video (K).
    pub videos_per_step: usize,
    pub clips_per_video: usize,
    /// Pseudo pairs are rebuilt from the current teacher every `refresh` steps.
    pub refresh: usize,
    /// Interleave ratio `rain : correction`.
    pub rain_ratio: usize,
    pub correction_ratio: usize,
    #[serde(default)]
    pub correction_mode: CorrectionMode,
    #[serde(default = "default_decay")]
    pub ema_decay: f64,
}

fn default_decay() -> f64 {
    EMA_DECAY
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            samples: 3,
            t_u: 0.5,
            t_d: 0.05,
            videos_per_step: 2,
            clips_per_video: 2,
            refresh: 200,
            rain_ratio: 1,
            correction_ratio: 1,
            correction_mode: CorrectionMode::PredictionAsCondition,
            ema_decay: EMA_DECAY,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("selftrain: {m}")));
        if self.samples == 0 {
            return bad("samples must be at least 1");
        }
        if !(self.t_u > 0.0) {
            return bad("t_u must be positive");
        }
        if !(self.t_d >= 0.0 && self.t_d.is_finite()) {
            return bad("t_d must be a non-negative number");
        }
        if self.videos_per_step == 0 || self.clips_per_video == 0 {
            return bad("videos_per_step and clips_per_video must be positive");
        }
        if self.refresh == 0 {
            return bad("refresh interval must be positive");
        }
        if self.rain_ratio + self.correction_ratio == 0 {
            return bad("interleave ratio cannot be 0:0");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        Ok(())
    }

    fn branch_at(&self, step: usize) -> Branch {
        if step % (self.rain_ratio + self.correction_ratio) < self.rain_ratio {
            Branch::RainRemoval
        } else {
            Branch::Correction
        }
    }
}

/// Splits each video into consecutive non-overlapping clips of `frames`
/// frames; a shorter tail is dropped.
pub fn video_windows<S: Scalar>(videos: &[Clip<S>], frames: usize) -> Result<Vec<Vec<Clip<S>>>> {
    videos
        .iter()
        .map(|v| {
            let n = v.geometry().frames / frames;
            if n == 0 {
                return Err(Error::Data(format!(
                    "video has {} frames, clips need {frames}",
                    v.geometry().frames
                )));
            }
            (0..n).map(|i| v.frames(i * frames, frames)).collect()
        })
        .collect()
}

/// Pseudo pairs of one refresh round, grouped by source video.
#[derive(Clone, Debug, Default)]
pub struct PairPool<S> {
    pub rain: Vec<Vec<PseudoPair<S>>>,
    pub correction: Vec<Vec<PseudoPair<S>>>,
    /// Confidence maps of every rain clip, in clip order.
    pub confidence: Vec<Tensor<S>>,
    pub skipped: usize,
}

impl<S> PairPool<S> {
    fn branch(&self, b: Branch) -> &[Vec<PseudoPair<S>>] {
        match b {
            Branch::RainRemoval => &self.rain,
            Branch::Correction => &self.correction,
        }
    }

    pub fn len(&self, b: Branch) -> usize {
        self.branch(b).iter().map(Vec::len).sum()
    }
}

/// Builds every pseudo pair with the current teacher. Seeds depend only on
/// `round_seed` and the clip position.
pub fn build_pairs<S: Scalar>(
    ts: &TeacherStudent<S>,
    rain: &[Vec<Clip<S>>],
    clear: &[Vec<Clip<S>>],
    cfg: &SelfTrainConfig,
    schedule: &NoiseSchedule,
    sampler_steps: usize,
    round_seed: u64,
) -> Result<PairPool<S>> {
    let sampler = Sampler {
        estimator: ts.teacher(),
        schedule,
        steps: sampler_steps,
    };
    let root = NoiseRng::new(round_seed);
    let mut pool = PairPool {
        rain: Vec::new(),
        correction: Vec::new(),
        confidence: Vec::new(),
        skipped: 0,
    };
    for (v, clips) in rain.iter().enumerate() {
        let mut pairs = Vec::new();
        for (c, clip) in clips.iter().enumerate() {
            let mut r = root.fork(((v as u64) << 20) | c as u64);
            let seeds: Vec<u64> = (0..cfg.samples).map(|_| r.next_u64()).collect();
            let conf = confidence_sample(&sampler, clip, &seeds)?;
            match binarize_confidence(&conf.u, cfg.t_u) {
                Ok(mask) => pairs.push(build_rain_pair(clip, &conf.mean, mask)?),
                Err(Error::DegenerateMask) => pool.skipped += 1,
                Err(e) => return Err(e),
            }
            pool.confidence.push(conf.u);
        }
        if !pairs.is_empty() {
            pool.rain.push(pairs);
        }
    }
    let flat: Vec<(usize, usize, &Clip<S>)> = clear
        .iter()
        .enumerate()
        .flat_map(|(v, clips)| clips.iter().enumerate().map(move |(c, clip)| (v, c, clip)))
        .collect();
    let restored = parallel::map(&flat, |&(v, c, clip)| {
        let seed = root.fork((1 << 40) | ((v as u64) << 20) | c as u64).next_u64();
        sampler.restore(clip, seed)
    });
    let mut by_video: Vec<Vec<PseudoPair<S>>> = vec![Vec::new(); clear.len()];
    for ((v, _, clip), r) in flat.iter().zip(restored) {
        match correction_pair_from(r?, clip, cfg.t_d, cfg.correction_mode)? {
            Some(p) => by_video[*v].push(p),
            None => pool.skipped += 1,
        }
    }
    pool.correction = by_video.into_iter().filter(|p| !p.is_empty()).collect();
    Ok(pool)
}

/// Summary of one refresh round, handed to the loop's observer.
pub struct RoundReport<'a, S> {
    pub round: usize,
    /// Global step reached at the end of the round.
    pub step: usize,
    pub pool: &'a PairPool<S>,
    pub losses: &'a [f64],
    pub ema: &'a [EmaReport],
}

/// Picks `P` videos and `K` clips from each (without replacement, capped by
/// what is available) from one branch of the pool.
fn draw_batch<'a, S>(
    pool: &'a [Vec<PseudoPair<S>>],
    cfg: &SelfTrainConfig,
    rng: &mut NoiseRng,
) -> Vec<&'a PseudoPair<S>> {
    let mut out = Vec::new();
    for v in rng.choose_indices(pool.len(), cfg.videos_per_step.min(pool.len())) {
        let clips = &pool[v];
        for c in rng.choose_indices(clips.len(), cfg.clips_per_video.min(clips.len())) {
            out.push(&clips[c]);
        }
    }
    out
}

/// Runs self-training from `start_step` up to `cfg.steps`.
///
/// Pseudo pairs are rebuilt at every multiple of `cfg.refresh`, so a run
/// resumed at such a boundary with the saved teacher, student and Adam
/// state continues exactly as the uninterrupted run would. `observe` runs
/// after every round.
#[allow(clippy::too_many_arguments)]
pub fn selftrain_loop<S: Scalar>(
    ts: &mut TeacherStudent<S>,
    adam: &mut AdamState<S>,
    rain: &[Vec<Clip<S>>],
    clear: &[Vec<Clip<S>>],
    cfg: &SelfTrainConfig,
    schedule: &NoiseSchedule,
    sampler_steps: usize,
    seed: u64,
    start_step: usize,
    mut observe: impl FnMut(&RoundReport<'_, S>, &TeacherStudent<S>, &AdamState<S>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if rain.is_empty() && clear.is_empty() {
        return Err(Error::Config("self-training needs rain or clear videos".into()));
    }
    if start_step % cfg.refresh != 0 && start_step < cfg.steps {
        return Err(Error::Usage(format!(
            "resume step {start_step} is not a multiple of the refresh interval {}",
            cfg.refresh
        )));
    }
    let root = NoiseRng::new(seed);
    let mut step = start_step;
    while step < cfg.steps {
        let round = step / cfg.refresh;
        let end = ((round + 1) * cfg.refresh).min(cfg.steps);
        let pool = build_pairs(
            ts,
            rain,
            clear,
            cfg,
            schedule,
            sampler_steps,
            root.fork(ROUND_STREAM + round as u64).next_u64(),
        )?;
        info!(
            "round {round}: {} rain pairs, {} correction pairs, {} skipped",
            pool.len(Branch::RainRemoval),
            pool.len(Branch::Correction),
            pool.skipped
        );
        let mut losses = Vec::with_capacity(end - step);
        let mut emas = Vec::with_capacity(end - step);
        while step < end {
            let mut rng = root.fork(STEP_STREAM + step as u64);
            let wanted = cfg.branch_at(step);
            let other = match wanted {
                Branch::RainRemoval => Branch::Correction,
                Branch::Correction => Branch::RainRemoval,
            };
            let branch = if pool.len(wanted) > 0 { wanted } else { other };
            if pool.len(branch) == 0 {
                warn!("step {step}: no usable pseudo pairs, skipping");
                step += 1;
                continue;
            }
            let batch = draw_batch(pool.branch(branch), cfg, &mut rng);
            let (loss, ema) = selftrain_step(ts, &batch, schedule, &mut rng, adam)?;
            debug!("step {step} {branch:?} loss {loss:.5}");
            losses.push(loss);
            emas.push(ema);
            step += 1;
        }
        let report = RoundReport {
            round,
            step,
            pool: &pool,
            losses: &losses,
            ema: &emas,
        };
        observe(&report, ts, adam)?;
    }
    Ok(())
}
