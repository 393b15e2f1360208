//! Self-training: EMA arithmetic, confidence maps, masks, augmentation and
//! the teacher-student step and loop.

use nightrain::clip::{Clip, ClipRole, Geometry};
use nightrain::diffusion::{NoiseSchedule, Sampler};
use nightrain::net::{NetConfig, NoiseNet, PatchSpec};
use nightrain::rng::NoiseRng;
use nightrain::selftrain::{
    augment_condition, binarize_confidence, build_rain_pair, confidence_sample, selftrain_loop,
    selftrain_step, video_windows, Branch, PseudoPair, SelfTrainConfig, TeacherStudent,
};
use nightrain::tensor::{AdamConfig, AdamState, Tensor};
use nightrain::Error;
use proptest::prelude::*;

fn tiny() -> NetConfig {
    NetConfig {
        clip: Geometry::new(3, 2, 4, 4),
        patch: PatchSpec { ts: 1, ss: 2, width: 16 },
        blocks: 1,
        heads: 1,
        mlp_ratio: 2,
    }
}

fn random_net(seed: u64, scale: f64) -> NoiseNet<f32> {
    let mut rng = NoiseRng::new(seed);
    let mut net = NoiseNet::<f32>::init(tiny(), &mut rng).unwrap();
    for t in net.params.tensors_mut() {
        for v in t.data_mut() {
            *v = (scale * rng.gaussian()) as f32;
        }
    }
    net
}

fn pixel_clip(g: Geometry, seed: u64) -> Clip<f32> {
    let mut rng = NoiseRng::new(seed);
    Clip::from_vec(
        ClipRole::Pixel,
        g,
        (0..g.numel()).map(|_| rng.uniform_in(-0.9, 0.9) as f32).collect(),
    )
    .unwrap()
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(50, 1e-3, 0.2).unwrap()
}

fn fill(net: &mut NoiseNet<f32>, v: f32) {
    for t in net.params.tensors_mut() {
        t.data_mut().fill(v);
    }
}

#[test]
fn ema_single_step_and_fixed_point() {
    let mut teacher = random_net(1, 0.1);
    let mut student = teacher.clone();
    fill(&mut teacher, 1.0);
    fill(&mut student, 0.0);
    let mut ts = TeacherStudent::from_parts(teacher, student, 0.999).unwrap();
    ts.ema_update().unwrap();
    for t in ts.teacher().params.tensors() {
        assert!(t.data().iter().all(|&v| v == 0.999f32));
    }
    let net = random_net(2, 0.1);
    let mut same = TeacherStudent::new(net.clone());
    let report = same.ema_update().unwrap();
    assert_eq!(same.teacher(), &net);
    assert_eq!(report.max_change, 0.0);
}

fn ema_closed_form<S: nightrain::Scalar>(tol: f64) {
    let mut rng = NoiseRng::new(3);
    let base = NoiseNet::<S>::init(tiny(), &mut rng).unwrap();
    let mut teacher = base.clone();
    let mut student = base;
    for (t, s) in teacher.params.tensors_mut().into_iter().zip(student.params.tensors_mut()) {
        for (a, b) in t.data_mut().iter_mut().zip(s.data_mut()) {
            *a = S::of(rng.uniform_in(-2.0, 2.0));
            *b = S::of(rng.uniform_in(-2.0, 2.0));
        }
    }
    let w0: Vec<Vec<f64>> = teacher
        .params
        .tensors()
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let mut ts = TeacherStudent::from_parts(teacher, student, 0.999).unwrap();
    for _ in 0..100 {
        ts.ema_update().unwrap();
    }
    let k = 0.999f64.powi(100);
    let mut worst = 0.0f64;
    for ((t, s), w) in ts.teacher().params.tensors().iter().zip(ts.student().params.tensors()).zip(&w0) {
        for ((a, b), w) in t.data().iter().zip(s.data()).zip(w) {
            let expect = k * w + (1.0 - k) * b.to_f64_lossy();
            worst = worst.max((a.to_f64_lossy() - expect).abs());
        }
    }
    assert!(worst <= tol, "max error {worst}");
}

#[test]
fn ema_matches_geometric_series_f64() {
    ema_closed_form::<f64>(1e-12);
}

#[test]
fn ema_matches_geometric_series_f32() {
    // Each update rounds to f32: at most half an ulp (2^-23 at |w| <= 2)
    // per update, 100 updates.
    ema_closed_form::<f32>(100.0 * 0.5 * 2f64.powi(-22));
}

#[test]
fn identical_seeds_give_zero_variance_and_full_mask() {
    let net = random_net(4, 0.2);
    let sched = schedule();
    let sampler = Sampler { estimator: &net, schedule: &sched, steps: 5 };
    let rain = pixel_clip(tiny().clip, 5);
    let conf = confidence_sample(&sampler, &rain, &[9, 9, 9]).unwrap();
    assert!(conf.u.data().iter().all(|&v| v == 0.0));
    let single = confidence_sample(&sampler, &rain, &[9]).unwrap();
    assert_eq!(single.mean, conf.mean);
    let mask = binarize_confidence(&conf.u, 0.5).unwrap();
    assert!(mask.data().iter().all(|&v| v == 1.0));

    let a = confidence_sample(&sampler, &rain, &[1, 2, 3]).unwrap();
    let b = confidence_sample(&sampler, &rain, &[3, 1, 2]).unwrap();
    assert!(a.u.data().iter().any(|&v| v > 0.0));
    for (x, y) in a.u.data().iter().zip(b.u.data()) {
        assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-6));
    }
    for (x, y) in a.mean.data().iter().zip(b.mean.data()) {
        assert!((x - y).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mask_area_is_monotone_in_threshold(seed in any::<u64>()) {
        let mut rng = NoiseRng::new(seed);
        let u = Tensor::<f64>::from_fn(&[2, 5, 5], |_| rng.uniform_in(0.0, 1.2));
        let grid = [0.05, 0.1, 0.2, 0.4, 0.5, 0.8, 1.0, 1.5];
        let mut prev: Option<Tensor<f64>> = None;
        for t in grid {
            let Ok(mask) = binarize_confidence(&u, t) else { continue };
            if let Some(p) = &prev {
                // Raising the threshold never drops a pixel.
                for (a, b) in p.data().iter().zip(mask.data()) {
                    prop_assert!(a <= b);
                }
            }
            prev = Some(mask);
        }
    }

    #[test]
    fn augmentation_blanks_a_quarter(seed in any::<u64>()) {
        let g = Geometry::new(3, 3, 7, 5);
        let x = pixel_clip(g, seed ^ 7);
        let a = augment_condition(&x, seed).unwrap();
        let plane = g.plane();
        let zeroed = (0..plane)
            .filter(|&p| (0..3).all(|c| a.data()[c * plane + p] == 0.0))
            .count();
        prop_assert_eq!(zeroed, (0.25 * plane as f64).round() as usize);
        prop_assert_eq!(&a, &augment_condition(&x, seed).unwrap());
    }
}

#[test]
fn augmentation_noise_variance_in_range() {
    let g = Geometry::new(3, 4, 16, 16);
    let x = pixel_clip(g, 11);
    let plane = g.plane();
    let mut variances = Vec::new();
    for seed in 0..20 {
        let a = augment_condition(&x, seed).unwrap();
        let mut diffs = Vec::new();
        for p in 0..plane {
            if (0..3).all(|c| a.data()[c * plane + p] == 0.0) {
                continue;
            }
            for c in 0..3 {
                diffs.push((a.data()[c * plane + p] - x.data()[c * plane + p]) as f64);
            }
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        // 2304 samples: a 4-sigma sampling band around the drawn variance.
        assert!(var > 0.0 && var < 0.2 * (1.0 + 4.0 * (2.0 / n).sqrt()), "seed {seed}: {var}");
        variances.push(var);
    }
    let spread = variances.iter().cloned().fold(0.0, f64::max) - variances.iter().cloned().fold(1.0, f64::min);
    assert!(spread > 0.05, "variance should vary across seeds");
}

fn full_pair(seed: u64) -> PseudoPair<f32> {
    let g = tiny().clip;
    let rain = pixel_clip(g, seed);
    let target = pixel_clip(g, seed + 1);
    build_rain_pair(&rain, &target, Tensor::ones(&[g.frames, g.height, g.width])).unwrap()
}

#[test]
fn step_on_zero_init_student() {
    let mut rng = NoiseRng::new(6);
    let net = NoiseNet::<f32>::init(tiny(), &mut rng).unwrap();
    let mut ts = TeacherStudent::new(net);
    let mut adam = AdamState::new(AdamConfig::default(), ts.student().params.tensors());
    let pair = full_pair(7);
    let before = ts.teacher().clone();
    let (loss, ema) = selftrain_step(&mut ts, &[&pair], &schedule(), &mut rng, &mut adam).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert!(ema.within_bound(f32::EPSILON as f64, 1.0));
    assert_ne!(ts.teacher(), &before);
    for t in ts.teacher().params.tensors() {
        assert!(t.grad().is_none());
    }
}

#[test]
fn teacher_moves_within_ema_bound() {
    let mut ts = TeacherStudent::new(random_net(8, 0.1));
    let mut adam = AdamState::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, ts.student().params.tensors());
    let pairs = [full_pair(9), full_pair(10)];
    let mut rng = NoiseRng::new(11);
    for _ in 0..10 {
        let before: Vec<Vec<f32>> = ts.teacher().params.tensors().iter().map(|t| t.data().to_vec()).collect();
        let students: Vec<Vec<f32>> = {
            // The student after this step is what the EMA pulls towards.
            let (loss, _) = selftrain_step(&mut ts, &[&pairs[0], &pairs[1]], &schedule(), &mut rng, &mut adam).unwrap();
            assert!(loss.is_finite());
            ts.student().params.tensors().iter().map(|t| t.data().to_vec()).collect()
        };
        let mut change = 0.0f64;
        let mut gap = 0.0f64;
        for ((t, b), s) in ts.teacher().params.tensors().iter().zip(&before).zip(&students) {
            for ((a, b), s) in t.data().iter().zip(b).zip(s) {
                change = change.max((a - b).abs() as f64);
                gap = gap.max((s - b).abs() as f64);
            }
        }
        assert!(change <= 0.001 * gap * (1.0 + 1e-3) + 1e-7, "{change} vs {gap}");
    }
}

#[test]
fn overfits_a_single_pair() {
    let mut rng = NoiseRng::new(12);
    let net = NoiseNet::<f32>::init(tiny(), &mut rng).unwrap();
    let mut ts = TeacherStudent::new(net);
    let mut adam = AdamState::new(AdamConfig { lr: 2e-3, ..AdamConfig::default() }, ts.student().params.tensors());
    let pair = full_pair(13);
    let losses: Vec<f64> = (0..500)
        .map(|_| selftrain_step(&mut ts, &[&pair], &schedule(), &mut rng, &mut adam).unwrap().0)
        .collect();
    let start = losses[..10].iter().sum::<f64>() / 10.0;
    let end = losses[490..].iter().sum::<f64>() / 10.0;
    assert!(end <= 0.7 * start, "start {start}, end {end}");
}

fn loop_fixture() -> (Vec<Vec<Clip<f32>>>, Vec<Vec<Clip<f32>>>, SelfTrainConfig) {
    let video = Geometry::new(3, 4, 4, 4);
    let rain = video_windows(&[pixel_clip(video, 20), pixel_clip(video, 21)], 2).unwrap();
    let clear = video_windows(&[pixel_clip(video, 22)], 2).unwrap();
    let cfg = SelfTrainConfig {
        steps: 4,
        refresh: 2,
        samples: 2,
        videos_per_step: 1,
        clips_per_video: 2,
        t_d: 0.0,
        ..SelfTrainConfig::default()
    };
    (rain, clear, cfg)
}

#[test]
fn loop_budget_zero_keeps_pretrained_teacher() {
    let (rain, clear, mut cfg) = loop_fixture();
    cfg.steps = 0;
    let net = random_net(14, 0.05);
    let mut ts = TeacherStudent::new(net.clone());
    let mut adam = AdamState::new(AdamConfig::default(), ts.student().params.tensors());
    selftrain_loop(&mut ts, &mut adam, &rain, &clear, &cfg, &schedule(), 3, 1, 0, |_, _, _| Ok(())).unwrap();
    assert_eq!(ts.teacher(), &net);
    let err = selftrain_loop(&mut ts, &mut adam, &[], &[], &cfg, &schedule(), 3, 1, 0, |_, _, _| Ok(()));
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn loop_resumes_bit_exactly_at_refresh_boundaries() {
    let (rain, clear, cfg) = loop_fixture();
    let net = random_net(15, 0.05);
    let sched = schedule();

    let mut ts = TeacherStudent::new(net.clone());
    let mut adam = AdamState::new(AdamConfig::default(), ts.student().params.tensors());
    let mut snapshot = None;
    let mut branches = Vec::new();
    let mut losses = Vec::new();
    selftrain_loop(&mut ts, &mut adam, &rain, &clear, &cfg, &sched, 3, 5, 0, |r, ts, adam| {
        assert!(r.ema.iter().all(|e| e.within_bound(f32::EPSILON as f64, 1.0)));
        branches.push((r.pool.len(Branch::RainRemoval), r.pool.len(Branch::Correction)));
        losses.extend_from_slice(r.losses);
        if r.step == 2 {
            snapshot = Some((ts.clone(), adam.clone()));
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(losses.len(), 4);
    assert!(branches.iter().all(|&(r, c)| r > 0 && c > 0));

    let (mut ts2, mut adam2) = snapshot.unwrap();
    let mut resumed = Vec::new();
    selftrain_loop(&mut ts2, &mut adam2, &rain, &clear, &cfg, &sched, 3, 5, 2, |r, _, _| {
        resumed.extend_from_slice(r.losses);
        Ok(())
    })
    .unwrap();
    assert_eq!(resumed, losses[2..]);
    assert_eq!(ts2, ts);
    assert_eq!(adam2, adam);
    let misaligned = selftrain_loop(&mut ts2, &mut adam2, &rain, &clear, &cfg, &sched, 3, 5, 1, |_, _, _| Ok(()));
    assert!(matches!(misaligned, Err(Error::Usage(_))));
}
