//! Full-reference metrics and difference heatmaps.
//!
//! All metrics work in I/O units (`[0, 1]`, dynamic range 1). Reports
//! quantize both clips to 8 bits first, as published scores usually are.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::clip::{to_io, Clip};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::pixmap::{dequantize, frame_name, quantize, Frame};
use crate::tensor::Tensor;

/// Reported PSNR for identical clips.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Heatmap colour scale upper end; differences at or above it are pure red.
pub const HEATMAP_MAX: f64 = 0.5;

pub fn psnr<S: Scalar>(a: &Clip<S>, b: &Clip<S>) -> Result<f64> {
    a.check_same_geometry(b)?;
    let mut acc = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = (to_io(x) - to_io(y)).to_f64_lossy();
        acc += d * d;
    }
    let mse = acc / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - mid).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

/// Separable valid-mode filter of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> f64 {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, k);
    let mu_b = filter_valid(b, h, w, k);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, k);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, k);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean SSIM over every frame and channel.
pub fn ssim<S: Scalar>(a: &Clip<S>, b: &Clip<S>) -> Result<f64> {
    a.check_same_geometry(b)?;
    let g = a.geometry();
    if g.height < SSIM_WINDOW || g.width < SSIM_WINDOW {
        return Err(Error::Data(format!(
            "ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            g.height, g.width
        )));
    }
    let k = gaussian_window();
    let hw = g.height * g.width;
    let planes = g.channels * g.frames;
    let io = |d: &[S]| -> Vec<f64> { d.iter().map(|&v| to_io(v).to_f64_lossy()).collect() };
    let (a_io, b_io) = (io(a.data()), io(b.data()));
    let total: f64 = (0..planes)
        .map(|p| ssim_plane(&a_io[p * hw..(p + 1) * hw], &b_io[p * hw..(p + 1) * hw], g.height, g.width, &k))
        .sum();
    Ok(total / planes as f64)
}

/// The clip as it would be read back from 8-bit frames.
pub fn quantized<S: Scalar>(clip: &Clip<S>) -> Clip<S> {
    let mut out = clip.clamp_to_pixels();
    for v in out.data_mut() {
        *v = dequantize(quantize(*v));
    }
    out
}

/// Channel-averaged absolute difference in I/O units, shape `[T, H, W]`.
pub fn diff_map<S: Scalar>(a: &Clip<S>, b: &Clip<S>) -> Result<Tensor<S>> {
    // Internal units are twice I/O units.
    Ok(a.channel_mean_abs_diff(b)?.map(|d| d * S::of(0.5)))
}

/// Heatmap colour of a difference: blue at 0, red at [`HEATMAP_MAX`] and above.
pub fn heat_colour(d: f64) -> [u8; 3] {
    let v = (d / HEATMAP_MAX).clamp(0.0, 1.0);
    [(255.0 * v).round() as u8, 0, (255.0 * (1.0 - v)).round() as u8]
}

/// Writes one heatmap frame per clip frame into `dir`.
pub fn diff_heatmap<S: Scalar>(a: &Clip<S>, b: &Clip<S>, dir: &Path) -> Result<()> {
    let map = diff_map(a, b)?;
    let g = a.geometry();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hw = g.height * g.width;
    for t in 0..g.frames {
        let rgb = map.data()[t * hw..(t + 1) * hw]
            .iter()
            .flat_map(|d| heat_colour(d.to_f64_lossy()))
            .collect();
        Frame {
            width: g.width,
            height: g.height,
            rgb,
        }
        .write(&dir.join(frame_name(t)))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub clip_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-clip scores in manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
}

const REPORT_NOTE: &str = "# scores on 8-bit quantized frames in [0,1]; identical clips report psnr 99";
const REPORT_HEADER: &str = "clip_id\tpsnr_db\tssim";

impl MetricReport {
    /// Scores `pred` against `reference` after 8-bit quantization of both.
    pub fn score<S: Scalar>(clip_id: &str, pred: &Clip<S>, reference: &Clip<S>) -> Result<ReportRow> {
        let (p, r) = (quantized(pred), quantized(reference));
        Ok(ReportRow {
            clip_id: clip_id.to_string(),
            psnr_db: psnr(&p, &r)?,
            ssim: ssim(&p, &r)?,
        })
    }

    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{REPORT_NOTE}\n{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}", r.clip_id, r.psnr_db, r.ssim);
        }
        let _ = writeln!(s, "# mean\t{:.6}\t{:.6}", self.mean_psnr(), self.mean_ssim());
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        let mut header = false;
        for (n, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !header {
                if line != REPORT_HEADER {
                    return Err(Error::format(origin, "missing report header"));
                }
                header = true;
                continue;
            }
            let bad = || Error::format(origin, format!("line {}: malformed row", n + 1));
            let mut f = line.split('\t');
            let (Some(id), Some(p), Some(s), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(bad());
            };
            rows.push(ReportRow {
                clip_id: id.to_string(),
                psnr_db: p.parse().map_err(|_| bad())?,
                ssim: s.parse().map_err(|_| bad())?,
            });
        }
        if !header {
            return Err(Error::format(origin, "missing report header"));
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::{ClipRole, Geometry};

    #[test]
    fn window_is_normalized_and_symmetric() {
        let k = gaussian_window();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(k[i], k[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn palette_endpoints() {
        assert_eq!(heat_colour(0.0), [0, 0, 255]);
        assert_eq!(heat_colour(0.5), [255, 0, 0]);
        assert_eq!(heat_colour(3.0), [255, 0, 0]);
        assert_eq!(heat_colour(0.25), [128, 0, 128]);
    }

    #[test]
    fn report_round_trip() {
        let report = MetricReport {
            rows: vec![
                ReportRow { clip_id: "a".into(), psnr_db: 31.25, ssim: 0.875 },
                ReportRow { clip_id: "b".into(), psnr_db: 99.0, ssim: 1.0 },
            ],
        };
        let back = MetricReport::parse(&report.to_tsv(), Path::new("r")).unwrap();
        assert_eq!(back, report);
        assert!(MetricReport::parse("a\t1\t2\n", Path::new("r")).is_err());
    }

    #[test]
    fn small_frames_rejected() {
        let c = Clip::<f32>::full(ClipRole::Pixel, Geometry::new(3, 1, 10, 16), 0.0);
        assert!(matches!(ssim(&c, &c), Err(Error::Data(_))));
    }
}
