//! The five pipeline commands as library functions.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::checkpoint::{Checkpoint, Phase};
use crate::clip::Clip;
use crate::config::Config;
use crate::diffusion::{NoiseSchedule, Restorer, Sampler};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, ReportRow};
use crate::net::NoiseNet;
use crate::parallel;
use crate::rng::{mix_seed, NoiseRng};
use crate::selftrain::{selftrain_loop, video_windows, Branch, TeacherStudent};
use crate::synth::{load_clip, make_dataset, save_clip, Dataset, Manifest, Split};
use crate::tensor::{AdamState, Tensor};
use crate::train::{train_step, TrainSample};

const PRETRAIN_STREAM: u64 = 0x5052_4554;
const SELFTRAIN_STREAM: u64 = 0x5345_4C46;
const INIT_STREAM: u64 = 0x494E_4954;

/// Generates the dataset described by the configuration under `root`
/// (default: `data.root`).
pub fn synth(cfg: &Config, root: Option<&Path>) -> Result<Manifest> {
    let spec = cfg.dataset(root);
    info!("writing dataset to {}", spec.root.display());
    make_dataset(&spec)
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss of every step run by this call.
    pub losses: Vec<f64>,
}

/// Random `P × K` batch of paired clips; window starts are any frame offset.
fn paired_batch(
    clean: &[Clip<f32>],
    rain: &[Clip<f32>],
    cfg: &Config,
    schedule: &NoiseSchedule,
    rng: &mut NoiseRng,
) -> Result<Vec<TrainSample<f32>>> {
    let frames = cfg.model.clip_frames;
    let p = cfg.pretrain.videos_per_step.min(clean.len());
    let mut batch = Vec::with_capacity(p * cfg.pretrain.clips_per_video);
    for v in rng.choose_indices(clean.len(), p) {
        let total = clean[v].geometry().frames;
        for _ in 0..cfg.pretrain.clips_per_video {
            let start = rng.int_in(0, total - frames);
            let target = clean[v].frames(start, frames)?;
            let cond = rain[v].frames(start, frames)?;
            batch.push(TrainSample {
                eps: Clip::noise(target.geometry(), rng),
                t: rng.int_in(1, schedule.steps()),
                target,
                cond,
                mask: None,
            });
        }
    }
    Ok(batch)
}

/// Writes the parameters and the offending batch as tensor dumps.
pub fn write_failure_dump(dir: &Path, step: usize, net: &NoiseNet<f32>, batch: &[TrainSample<f32>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dump = |name: &str, t: &Tensor<f32>| -> Result<()> {
        let path = dir.join(format!("{name}.dump"));
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        t.write_dump(BufWriter::new(f)).map_err(|e| Error::io(&path, e))
    };
    for (name, t) in net.params.names().iter().zip(net.params.tensors()) {
        dump(&format!("param.{name}"), t)?;
    }
    for (i, s) in batch.iter().enumerate() {
        dump(&format!("batch{i}.target"), s.target.tensor())?;
        dump(&format!("batch{i}.cond"), s.cond.tensor())?;
        dump(&format!("batch{i}.eps"), s.eps.tensor())?;
    }
    let ts: Vec<String> = batch.iter().map(|s| s.t.to_string()).collect();
    let note = format!("step {step}\ntime steps {}\n", ts.join(" "));
    let path = dir.join("step.txt");
    fs::write(&path, note).map_err(|e| Error::io(&path, e))
}

fn dump_dir(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".nonfinite");
    PathBuf::from(p)
}

/// Supervised training on the paired split.
///
/// With `resume`, training continues from a pretraining checkpoint's step.
/// The checkpoint is written to `out` every `checkpoint_every` steps and at
/// the end, where the teacher is set to the student.
pub fn pretrain(
    cfg: &Config,
    data_root: &Path,
    resume: Option<Checkpoint>,
    out: &Path,
    seed: u64,
) -> Result<PretrainOutcome> {
    let schedule = cfg.noise_schedule()?;
    let data = Dataset::open(data_root)?;
    let entries = data.entries(Split::Paired);
    if entries.is_empty() {
        return Err(Error::Data(format!("no paired videos under {}", data_root.display())));
    }
    let clean: Vec<Clip<f32>> = entries.iter().map(|e| data.clean(e)).collect::<Result<_>>()?;
    let rain: Vec<Clip<f32>> = entries.iter().map(|e| data.rain(e)).collect::<Result<_>>()?;
    let clip = cfg.model.clip();
    for c in &clean {
        let g = c.geometry();
        if (g.height, g.width) != (clip.height, clip.width) || g.frames < clip.frames {
            return Err(Error::Data(format!("paired video {g:?} does not fit clips of {clip:?}")));
        }
    }

    let root = NoiseRng::new(mix_seed(seed, PRETRAIN_STREAM));
    let (mut net, mut adam, start) = match resume {
        Some(ck) => {
            if ck.phase != Phase::Pretrain {
                return Err(Error::Usage("pretraining can only resume a pretraining checkpoint".into()));
            }
            (ck.student, ck.adam, ck.step as usize)
        }
        None => {
            let net = NoiseNet::init(cfg.net(), &mut root.fork(INIT_STREAM))?;
            let adam = AdamState::new(cfg.optimizer, net.params.tensors());
            (net, adam, 0)
        }
    };
    // During pretraining there is no separate teacher; it is the student.
    let snapshot = |net: &NoiseNet<f32>, adam: &AdamState<f32>, step: usize| Checkpoint {
        config: cfg.clone(),
        phase: Phase::Pretrain,
        step: step as u64,
        schedule: schedule.clone(),
        teacher: net.clone(),
        student: net.clone(),
        adam: adam.clone(),
    };

    let mut losses = Vec::new();
    for step in start..cfg.pretrain.steps {
        let mut rng = root.fork(step as u64);
        let batch = paired_batch(&clean, &rain, cfg, &schedule, &mut rng)?;
        let loss = match train_step(&mut net, &batch, &schedule, &mut adam) {
            Ok(l) => l,
            Err(Error::NonFinite(what)) => {
                let dir = dump_dir(out);
                write_failure_dump(&dir, step, &net, &batch)?;
                return Err(Error::NonFinite(format!(
                    "{what} at pretraining step {step}; state dumped to {}",
                    dir.display()
                )));
            }
            Err(e) => return Err(e),
        };
        losses.push(loss);
        if (step + 1) % cfg.pretrain.log_every == 0 {
            let window = &losses[losses.len().saturating_sub(cfg.pretrain.log_every)..];
            info!(
                "pretrain step {} loss {:.4}",
                step + 1,
                window.iter().sum::<f64>() / window.len() as f64
            );
        }
        let every = cfg.pretrain.checkpoint_every;
        if every > 0 && (step + 1) % every == 0 && step + 1 < cfg.pretrain.steps {
            snapshot(&net, &adam, step + 1).save(out)?;
        }
    }
    let checkpoint = snapshot(&net, &adam, cfg.pretrain.steps.max(start));
    checkpoint.save(out)?;
    Ok(PretrainOutcome { checkpoint, losses })
}

/// Per-round facts recorded while self-training.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundStats {
    pub step: usize,
    pub rain_pairs: usize,
    pub correction_pairs: usize,
    pub skipped: usize,
    /// Mean fraction of high-confidence pixels over the round's rain clips.
    pub confident_fraction: f64,
}

pub struct SelftrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    pub rounds: Vec<RoundStats>,
    /// EMA updates whose teacher move exceeded `(1 − d)·max|student − teacher|`.
    pub ema_violations: usize,
    /// Whether every confidence map gave nested masks over a threshold sweep.
    pub masks_nested: bool,
}

fn masks_nested(u: &Tensor<f32>, t_u: f64) -> bool {
    let grid = [t_u / 4.0, t_u / 2.0, t_u, 2.0 * t_u, 4.0 * t_u];
    u.data().iter().all(|&v| {
        let inside: Vec<bool> = grid.iter().map(|&t| (v as f64) < t).collect();
        inside.windows(2).all(|w| !w[0] || w[1])
    })
}

/// Self-training from a pretraining checkpoint, or resumption of a
/// self-training checkpoint. A checkpoint is written to `out` after every
/// refresh round. Only the rain frames of the unlabelled rain split are read.
pub fn selftrain(cfg: &Config, ckpt: Checkpoint, data_root: &Path, out: &Path, seed: u64) -> Result<SelftrainOutcome> {
    let schedule = ckpt.schedule.clone();
    let st = &cfg.selftrain;
    let (mut ts, mut adam, start) = match ckpt.phase {
        Phase::Pretrain => {
            let ts = TeacherStudent::from_parts(ckpt.teacher.clone(), ckpt.teacher, st.ema_decay)?;
            let adam = AdamState::new(cfg.optimizer, ts.student().params.tensors());
            (ts, adam, 0)
        }
        Phase::Selftrain => {
            let ts = TeacherStudent::from_parts(ckpt.teacher, ckpt.student, st.ema_decay)?;
            (ts, ckpt.adam, ckpt.step as usize)
        }
    };
    let data = Dataset::open(data_root)?;
    let frames = cfg.model.clip_frames;
    let rain = video_windows(&data.load_rain::<f32>(Split::Rain)?, frames)?;
    let clear = video_windows(&data.load_clean::<f32>(Split::Clear)?, frames)?;
    if rain.is_empty() && clear.is_empty() {
        return Err(Error::Data(format!(
            "{} has neither a rain nor a clear split",
            data_root.display()
        )));
    }
    info!("self-training on {} rain and {} clear videos", rain.len(), clear.len());

    let mut losses = Vec::new();
    let mut rounds = Vec::new();
    let mut ema_violations = 0;
    let mut nested = true;
    let mut last: Option<Checkpoint> = None;
    let ulp = f32::EPSILON as f64;
    selftrain_loop(
        &mut ts,
        &mut adam,
        &rain,
        &clear,
        st,
        &schedule,
        cfg.sampler.steps,
        mix_seed(seed, SELFTRAIN_STREAM),
        start,
        |report, ts, adam| {
            losses.extend_from_slice(report.losses);
            let scale = ts
                .teacher()
                .params
                .tensors()
                .iter()
                .map(|t| t.max_abs() as f64)
                .fold(0.0, f64::max);
            ema_violations += report.ema.iter().filter(|e| !e.within_bound(ulp, scale)).count();
            let mut frac = 0.0;
            for u in &report.pool.confidence {
                nested &= masks_nested(u, st.t_u);
                frac += u.data().iter().filter(|&&v| (v as f64) < st.t_u).count() as f64 / u.numel() as f64;
            }
            let n = report.pool.confidence.len().max(1) as f64;
            let mean_loss = report.losses.iter().sum::<f64>() / report.losses.len().max(1) as f64;
            info!("selftrain step {} loss {:.4}", report.step, mean_loss);
            rounds.push(RoundStats {
                step: report.step,
                rain_pairs: report.pool.len(Branch::RainRemoval),
                correction_pairs: report.pool.len(Branch::Correction),
                skipped: report.pool.skipped,
                confident_fraction: frac / n,
            });
            let (teacher, student) = (ts.teacher().clone(), ts.student().clone());
            let ck = Checkpoint {
                config: cfg.clone(),
                phase: Phase::Selftrain,
                step: report.step as u64,
                schedule: schedule.clone(),
                teacher,
                student,
                adam: adam.clone(),
            };
            ck.save(out)?;
            last = Some(ck);
            Ok(())
        },
    )?;
    if ema_violations > 0 {
        warn!("{ema_violations} EMA updates exceeded the teacher-change bound");
    }
    let checkpoint = match last {
        Some(ck) => ck,
        None => {
            let (teacher, student) = ts.into_parts();
            let ck = Checkpoint {
                config: cfg.clone(),
                phase: Phase::Selftrain,
                step: start as u64,
                schedule,
                teacher,
                student,
                adam,
            };
            ck.save(out)?;
            ck
        }
    };
    Ok(SelftrainOutcome {
        checkpoint,
        losses,
        rounds,
        ema_violations,
        masks_nested: nested,
    })
}

/// Restores a video of any length with `restorer`, in non-overlapping clips
/// of `clip_frames`. A short final clip is padded by repeating its last
/// frame and the padding is dropped from the output. Clip `i` uses noise
/// seed `mix_seed(seed, i)`.
pub fn restore_video<R: Restorer<f32> + ?Sized>(
    restorer: &R,
    video: &Clip<f32>,
    clip_frames: usize,
    seed: u64,
) -> Result<Clip<f32>> {
    let total = video.geometry().frames;
    let tiles: Vec<Clip<f32>> = (0..total.div_ceil(clip_frames))
        .map(|i| {
            let start = i * clip_frames;
            let len = clip_frames.min(total - start);
            let mut parts = vec![video.frames(start, len)?];
            let last = video.frames(total - 1, 1)?;
            parts.extend(std::iter::repeat_n(last, clip_frames - len));
            Clip::concat_frames(&parts)
        })
        .collect::<Result<_>>()?;
    let restored = parallel::map_range(tiles.len(), |i| restorer.restore(&tiles[i], mix_seed(seed, i as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Clip::concat_frames(&restored)?.frames(0, total)
}

/// Derains the frame folder `input` with the checkpoint's teacher and
/// writes the result to `output`. Returns the frame count.
pub fn derain(cfg: &Config, ckpt: &Checkpoint, input: &Path, output: &Path, seed: u64) -> Result<usize> {
    let video: Clip<f32> = load_clip(input)?;
    let clip = ckpt.config.model.clip();
    let g = video.geometry();
    if (g.height, g.width) != (clip.height, clip.width) {
        return Err(Error::Data(format!(
            "frames in {} are {}x{}, the checkpoint model expects {}x{}",
            input.display(),
            g.width,
            g.height,
            clip.width,
            clip.height
        )));
    }
    let sampler = Sampler {
        estimator: &ckpt.teacher,
        schedule: &ckpt.schedule,
        steps: cfg.sampler.steps,
    };
    let out = restore_video(&sampler, &video, clip.frames, seed)?;
    save_clip(&out, output)?;
    Ok(g.frames)
}

/// One line of an evaluation manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub clip_id: String,
    pub pred: PathBuf,
    pub reference: PathBuf,
}

/// Parses `clip_id\tpred_dir\tref_dir` lines; relative paths are taken
/// from the manifest's folder. Blank lines and `#` comments are skipped.
pub fn read_pairs(path: &Path) -> Result<Vec<EvalPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let [id, pred, reference] = f[..] else {
            return Err(Error::format(path, format!("line {}: expected 3 tab-separated fields", n + 1)));
        };
        out.push(EvalPair {
            clip_id: id.to_string(),
            pred: base.join(pred),
            reference: base.join(reference),
        });
    }
    Ok(out)
}

/// Scores every pair of the manifest and writes the report to `out`.
pub fn eval(pairs_path: &Path, out: &Path) -> Result<MetricReport> {
    let pairs = read_pairs(pairs_path)?;
    let rows = parallel::map(&pairs, |p| -> Result<ReportRow> {
        let pred: Clip<f32> = load_clip(&p.pred)?;
        let reference: Clip<f32> = load_clip(&p.reference)?;
        if pred.geometry() != reference.geometry() {
            return Err(Error::Data(format!(
                "{}: prediction {:?} and reference {:?} differ in shape",
                p.clip_id,
                pred.geometry(),
                reference.geometry()
            )));
        }
        MetricReport::score(&p.clip_id, &pred, &reference)
    });
    let report = MetricReport {
        rows: rows.into_iter().collect::<Result<_>>()?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    report.write(out)?;
    Ok(report)
}
