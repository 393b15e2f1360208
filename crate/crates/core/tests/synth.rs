use std::fs;
use std::path::Path;

use nightrain::clip::Clip;
use nightrain::metrics::psnr;
use nightrain::synth::pixmap::frame_paths;
use nightrain::synth::{
    add_rain_layer, gen_night_scene, make_dataset, render_video, Dataset, DatasetSpec, Manifest,
    RainRange, RainSpec, SceneRange, SceneSpec, Split, SplitCounts, MANIFEST,
};
use nightrain::Error;

fn scene(seed: u64, n_lights: usize) -> SceneSpec {
    SceneSpec {
        seed,
        frames: 4,
        height: 16,
        width: 16,
        n_lights,
        base_luminance: 0.06,
        sensor_noise_sigma: 0.01,
        object_speed: 0.8,
        light_gain: 1.0,
    }
}

fn rain(density: f64, angle: f64, fall_speed: f64) -> RainSpec {
    RainSpec {
        seed: 21,
        density,
        angle,
        streak_length: 4.0,
        streak_brightness: 0.8,
        fall_speed,
        glow_boost: 0.0,
    }
}

fn luminance(clip: &Clip<f64>) -> f64 {
    clip.data().iter().map(|v| (v + 1.0) / 2.0).sum::<f64>() / clip.data().len() as f64
}

#[test]
fn luminance_rises_with_light_count() {
    let means: Vec<f64> = (0..6)
        .map(|n| {
            (0..10)
                .map(|s| luminance(&gen_night_scene(&scene(100 + s, n)).unwrap()))
                .sum::<f64>()
                / 10.0
        })
        .collect();
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
}

#[test]
fn psnr_falls_as_density_rises() {
    let clean = gen_night_scene::<f64>(&scene(3, 2)).unwrap();
    let scores: Vec<f64> = [0.1, 0.2, 0.3, 0.4, 0.5]
        .iter()
        .map(|&d| psnr(&add_rain_layer(&clean, &rain(d, 10.0, 2.0)).unwrap().clip, &clean).unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] > w[1]), "{scores:?}");
}

#[test]
fn residual_correlation_peaks_at_fall_offset() {
    let clean = gen_night_scene::<f64>(&scene(5, 1)).unwrap();
    let fall = 3;
    let wet = add_rain_layer(&clean, &rain(0.3, 0.0, fall as f64)).unwrap().clip;
    let g = clean.geometry();
    let residual = |t: usize, y: usize, x: usize| -> f64 {
        (0..3).map(|c| wet.at(c, t, y, x) - clean.at(c, t, y, x)).sum()
    };
    for t in 0..g.frames - 1 {
        let mut best = (f64::MIN, 0i64, 0i64);
        for dy in -7i64..=7 {
            for dx in -7i64..=7 {
                let mut acc = 0.0;
                for y in 0..g.height {
                    for x in 0..g.width {
                        let ys = (y as i64 + dy).rem_euclid(g.height as i64) as usize;
                        let xs = (x as i64 + dx).rem_euclid(g.width as i64) as usize;
                        acc += residual(t, y, x) * residual(t + 1, ys, xs);
                    }
                }
                if acc > best.0 {
                    best = (acc, dy, dx);
                }
            }
        }
        assert_eq!((best.1, best.2), (fall, 0), "frame {t}");
    }
}

#[test]
fn rain_only_touches_streak_pixels() {
    let clean = gen_night_scene::<f32>(&scene(8, 3)).unwrap();
    let layer = add_rain_layer(&clean, &rain(0.4, -12.0, 2.5)).unwrap();
    let plane = clean.geometry().plane();
    for pos in 0..plane {
        if layer.alpha.data()[pos] == 0.0 {
            for c in 0..3 {
                assert_eq!(
                    clean.data()[c * plane + pos].to_bits(),
                    layer.clip.data()[c * plane + pos].to_bits()
                );
            }
        }
    }
}

fn dataset_spec(root: &Path, counts: SplitCounts) -> DatasetSpec {
    DatasetSpec {
        root: root.to_path_buf(),
        seed: 77,
        frames: 4,
        height: 16,
        width: 16,
        counts,
        synthetic_scene: SceneRange::synthetic(),
        shifted_scene: SceneRange::shifted(),
        synthetic_rain: RainRange::synthetic(),
        shifted_rain: RainRange::shifted(),
    }
}

fn small_counts() -> SplitCounts {
    SplitCounts {
        paired: 2,
        rain: 1,
        clear: 1,
        ..Default::default()
    }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn manifest_lists_every_video_with_its_split() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_dataset(&dataset_spec(dir.path(), small_counts())).unwrap();
    let splits: Vec<Split> = manifest.entries.iter().map(|e| e.split).collect();
    assert_eq!(splits, [Split::Paired, Split::Paired, Split::Rain, Split::Clear]);
    let read = Manifest::read(&dir.path().join(MANIFEST)).unwrap();
    assert_eq!(read, manifest);
    for line in fs::read_to_string(dir.path().join(MANIFEST)).unwrap().lines() {
        assert_eq!(line.split('\t').count(), 4);
    }
    let paired = &manifest.entries[0];
    let base = dir.path().join(&paired.path);
    assert_eq!(
        frame_paths(&base.join("clean")).unwrap().len(),
        frame_paths(&base.join("rain")).unwrap().len()
    );
    assert!(!dir.path().join(&manifest.entries[3].path).join("rain").exists());
}

#[test]
fn regeneration_is_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_dataset(&dataset_spec(a.path(), small_counts())).unwrap();
    make_dataset(&dataset_spec(b.path(), small_counts())).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
}

#[test]
fn seeds_are_disjoint_across_splits() {
    let spec = dataset_spec(Path::new("unused"), SplitCounts::default());
    let mut seeds = Vec::new();
    for split in Split::ALL {
        for i in 0..50 {
            let p = spec.video_params(split, i);
            seeds.push(p.scene.seed);
            if let Some(r) = p.rain {
                seeds.push(r.seed);
            }
        }
    }
    let n = seeds.len();
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds.len(), n);
}

#[test]
fn paired_rain_is_visible() {
    let spec = dataset_spec(Path::new("unused"), SplitCounts::default());
    for i in 0..6 {
        let params = spec.video_params(Split::Paired, i);
        assert!(params.rain.as_ref().unwrap().density >= 0.1);
        let (clean, wet) = render_video::<f32>(&params).unwrap();
        let score = psnr(&wet.unwrap(), &clean).unwrap();
        assert!(score.is_finite() && score < 40.0, "{score}");
    }
}

#[test]
fn loader_checks_frame_counts() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(&dataset_spec(dir.path(), small_counts())).unwrap();
    let data = Dataset::open(dir.path()).unwrap();
    let entry = data.entries(Split::Paired)[0].clone();
    let clip: Clip<f32> = data.rain(&entry).unwrap();
    assert_eq!(clip.geometry().frames, 4);
    assert!(data.rain::<f32>(data.entries(Split::Clear)[0]).is_err());
    fs::remove_file(dir.path().join(&entry.path).join("rain/frame_0003.ppm")).unwrap();
    assert!(matches!(data.rain::<f32>(&entry), Err(Error::Data(_))));
}
