use std::path::Path;

use nightrain::clip::{Clip, ClipRole, Geometry};
use nightrain::metrics::{
    diff_heatmap, heat_colour, psnr, quantized, ssim, MetricReport, PSNR_CAP,
};
use nightrain::rng::NoiseRng;
use nightrain::synth::pixmap::{frame_paths, Frame};
use proptest::prelude::*;

fn random_clip(seed: u64, g: Geometry) -> Clip<f64> {
    let mut rng = NoiseRng::new(seed);
    let data = (0..g.numel()).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    Clip::from_vec(ClipRole::Pixel, g, data).unwrap()
}

fn noisy(clip: &Clip<f64>, sigma_io: f64, seed: u64) -> Clip<f64> {
    let mut rng = NoiseRng::new(seed);
    let mut out = clip.clone();
    for v in out.data_mut() {
        *v = (*v + 2.0 * sigma_io * rng.gaussian()).clamp(-1.0, 1.0);
    }
    out
}

/// Direct 2-D SSIM with an explicit 11x11 window, one plane at a time.
fn naive_ssim(a: &Clip<f64>, b: &Clip<f64>) -> f64 {
    let g = a.geometry();
    let mut k = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..g.channels {
        for t in 0..g.frames {
            for y0 in 0..=g.height - 11 {
                for x0 in 0..=g.width - 11 {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let w = k[i][j] / total;
                            let x = (a.at(c, t, y0 + i, x0 + j) + 1.0) / 2.0;
                            let y = (b.at(c, t, y0 + i, x0 + j) + 1.0) / 2.0;
                            ma += w * x;
                            mb += w * y;
                            aa += w * x * x;
                            bb += w * y * y;
                            ab += w * x * y;
                        }
                    }
                    let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
    }
    sum / count as f64
}

fn geom() -> Geometry {
    Geometry::new(3, 2, 16, 16)
}

#[test]
fn identical_clips_hit_the_caps() {
    let a = random_clip(1, geom());
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
}

#[test]
fn constant_offset_psnr_closed_form() {
    let a = Clip::<f64>::full(ClipRole::Pixel, geom(), -0.5);
    let b = Clip::<f64>::full(ClipRole::Pixel, geom(), -0.3);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn ssim_matches_direct_window_oracle() {
    let a = random_clip(2, Geometry::new(3, 2, 14, 13));
    let b = noisy(&a, 0.1, 3);
    let fast = ssim(&a, &b).unwrap();
    assert!((fast - naive_ssim(&a, &b)).abs() < 1e-12, "{fast}");
}

#[test]
fn ssim_orders_inverted_noisy_identical() {
    let a = random_clip(4, geom());
    let inverted = Clip::from_vec(
        ClipRole::Pixel,
        geom(),
        a.data().iter().map(|v| -v).collect(),
    )
    .unwrap();
    let s_inv = ssim(&a, &inverted).unwrap();
    assert!(s_inv < 0.3, "{s_inv}");
    let s_noisy = ssim(&a, &noisy(&a, 0.05, 5)).unwrap();
    assert!(s_inv < s_noisy && s_noisy < 1.0, "{s_noisy}");
}

#[test]
fn psnr_decreases_with_noise_variance() {
    let a = random_clip(6, geom());
    let scores: Vec<f64> = [0.01, 0.02, 0.04, 0.08, 0.16]
        .iter()
        .map(|&s| psnr(&a, &noisy(&a, s, 7)).unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] > w[1]), "{scores:?}");
}

#[test]
fn frame_order_does_not_matter() {
    let a = random_clip(8, Geometry::new(3, 3, 12, 12));
    let b = noisy(&a, 0.05, 9);
    let rev = |c: &Clip<f64>| {
        let frames: Vec<_> = (0..3).rev().map(|t| c.frames(t, 1).unwrap()).collect();
        Clip::concat_frames(&frames).unwrap()
    };
    assert!((psnr(&a, &b).unwrap() - psnr(&rev(&a), &rev(&b)).unwrap()).abs() < 1e-9);
    assert!((ssim(&a, &b).unwrap() - ssim(&rev(&a), &rev(&b)).unwrap()).abs() < 1e-12);
}

#[test]
fn heatmap_examples() {
    let dir = tempfile::tempdir().unwrap();
    let a = random_clip(10, Geometry::new(3, 2, 5, 6));
    diff_heatmap(&a, &a, dir.path()).unwrap();
    for p in frame_paths(dir.path()).unwrap() {
        let f = Frame::read(&p).unwrap();
        assert!(f.rgb.chunks(3).all(|px| px == [0, 0, 255]));
    }
    let mut b = a.clone();
    let g = b.geometry();
    let (t, y, x) = (1, 3, 2);
    for c in 0..3 {
        let idx = ((c * g.frames + t) * g.height + y) * g.width + x;
        b.data_mut()[idx] = if a.data()[idx] > 0.0 { -1.0 } else { 1.0 };
    }
    let dir2 = tempfile::tempdir().unwrap();
    diff_heatmap(&a, &b, dir2.path()).unwrap();
    let frames: Vec<Frame> = frame_paths(dir2.path())
        .unwrap()
        .iter()
        .map(|p| Frame::read(p).unwrap())
        .collect();
    for (ti, f) in frames.iter().enumerate() {
        for (i, px) in f.rgb.chunks(3).enumerate() {
            if ti == t && i == y * g.width + x {
                assert!(px[0] > 0 && px[0] > px[2] / 2, "{px:?}");
            } else {
                assert_eq!(px, [0, 0, 255]);
            }
        }
    }
    assert_eq!(heat_colour(0.0), [0, 0, 255]);
    assert_eq!(heat_colour(0.5), [255, 0, 0]);
}

#[test]
fn report_scores_quantized_values() {
    let a = random_clip(11, geom());
    let row = MetricReport::score("x", &a, &quantized(&a)).unwrap();
    assert_eq!(row.psnr_db, PSNR_CAP);
    assert_eq!(row.ssim, 1.0);
    let report = MetricReport { rows: vec![row] };
    let back = MetricReport::parse(&report.to_tsv(), Path::new("r")).unwrap();
    assert_eq!(back.rows.len(), 1);
    assert!(report.to_tsv().lines().nth(1).unwrap() == "clip_id\tpsnr_db\tssim");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>(), sigma in 0.0f64..0.3) {
        let a = random_clip(seed, Geometry::new(3, 1, 12, 12));
        let b = noisy(&a, sigma, seed ^ 1);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(psnr(&a, &b).unwrap() >= 0.0);
    }
}
