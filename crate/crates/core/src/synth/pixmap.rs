//! Binary portable pixmap (P6, maxval 255) frames and clip folders.
//!
//! A clip folder holds one `frame_NNNN.ppm` per frame. Pixel values map
//! linearly between bytes `0..=255`, I/O values `[0, 1]` and the internal
//! `[-1, 1]` range.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::clip::{from_io, to_io, Clip, ClipRole, Geometry};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One RGB frame, interleaved bytes, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:04}.ppm")
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut pos = 0;
        let token = |pos: &mut usize| -> Result<String> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(Error::format(origin, "truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };
        if token(&mut pos)? != "P6" {
            return Err(Error::format(origin, "not a binary P6 pixmap"));
        }
        let num = |pos: &mut usize, what: &str| -> Result<usize> {
            token(pos)?
                .parse::<usize>()
                .map_err(|_| Error::format(origin, format!("bad {what}")))
        };
        let width = num(&mut pos, "width")?;
        let height = num(&mut pos, "height")?;
        let maxval = num(&mut pos, "maxval")?;
        if maxval != 255 {
            return Err(Error::format(origin, format!("maxval {maxval}, expected 255")));
        }
        if width == 0 || height == 0 {
            return Err(Error::format(origin, "empty frame"));
        }
        // Exactly one whitespace byte separates the header from the payload.
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos || bytes.len() - pos != need {
            return Err(Error::format(
                origin,
                format!("payload should be {need} bytes, found {}", bytes.len().saturating_sub(pos)),
            ));
        }
        Ok(Self {
            width,
            height,
            rgb: bytes[pos..].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// Internal value to byte: `round(clamp((x + 1)/2, 0, 1)·255)`.
#[inline]
pub fn quantize<S: Scalar>(x: S) -> u8 {
    let v = to_io(x).to_f64_lossy().clamp(0.0, 1.0);
    (v * 255.0).round() as u8
}

#[inline]
pub fn dequantize<S: Scalar>(b: u8) -> S {
    from_io(S::of(b as f64 / 255.0))
}

/// Frames of a 3-channel clip, one per time step.
pub fn clip_to_frames<S: Scalar>(clip: &Clip<S>) -> Result<Vec<Frame>> {
    let g = clip.geometry();
    if g.channels != 3 {
        return Err(Error::shape(format!("pixmaps need 3 channels, clip has {}", g.channels)));
    }
    Ok((0..g.frames)
        .map(|t| {
            let mut rgb = Vec::with_capacity(g.height * g.width * 3);
            for y in 0..g.height {
                for x in 0..g.width {
                    for c in 0..3 {
                        rgb.push(quantize(clip.at(c, t, y, x)));
                    }
                }
            }
            Frame {
                width: g.width,
                height: g.height,
                rgb,
            }
        })
        .collect())
}

pub fn frames_to_clip<S: Scalar>(frames: &[Frame], origin: &Path) -> Result<Clip<S>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Data(format!("no frames in {}", origin.display())))?;
    let (w, h) = (first.width, first.height);
    if let Some(bad) = frames.iter().position(|f| f.width != w || f.height != h) {
        return Err(Error::Data(format!(
            "frame {bad} in {} is {}x{}, expected {w}x{h}",
            origin.display(),
            frames[bad].width,
            frames[bad].height
        )));
    }
    let g = Geometry::new(3, frames.len(), h, w);
    let mut data = vec![S::zero(); g.numel()];
    for (t, f) in frames.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[((c * g.frames + t) * h + y) * w + x] = dequantize(f.rgb[(y * w + x) * 3 + c]);
                }
            }
        }
    }
    Clip::from_vec(ClipRole::Pixel, g, data)
}

/// Writes `clip` as `dir/frame_NNNN.ppm`, creating `dir` if needed.
pub fn save_clip<S: Scalar>(clip: &Clip<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in clip_to_frames(clip)?.iter().enumerate() {
        f.write(&dir.join(frame_name(i)))?;
    }
    Ok(())
}

/// Frame files of a clip folder in index order. Gaps in the numbering are errors.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.starts_with("frame_") && name.ends_with(".ppm") {
            names.push(name);
        }
    }
    names.sort();
    for (i, n) in names.iter().enumerate() {
        if *n != frame_name(i) {
            return Err(Error::Data(format!(
                "missing frame {} in {}",
                frame_name(i),
                dir.display()
            )));
        }
    }
    if names.is_empty() {
        return Err(Error::Data(format!("no frames in {}", dir.display())));
    }
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

pub fn load_clip<S: Scalar>(dir: &Path) -> Result<Clip<S>> {
    let frames = frame_paths(dir)?
        .iter()
        .map(|p| Frame::read(p))
        .collect::<Result<Vec<_>>>()?;
    frames_to_clip(&frames, dir)
}

/// Like [`load_clip`] but fails unless the folder holds exactly `frames` frames.
pub fn load_clip_checked<S: Scalar>(dir: &Path, frames: usize) -> Result<Clip<S>> {
    let found = frame_paths(dir)?.len();
    if found != frames {
        return Err(Error::Data(format!(
            "{} holds {found} frames, manifest says {frames}",
            dir.display()
        )));
    }
    load_clip(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseRng;

    fn random_clip(seed: u64, g: Geometry) -> Clip<f32> {
        let mut rng = NoiseRng::new(seed);
        Clip::from_vec(
            ClipRole::Pixel,
            g,
            (0..g.numel()).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let f = Frame {
            width: 2,
            height: 1,
            rgb: vec![1, 2, 3, 4, 5, 6],
        };
        let enc = f.encode();
        assert!(enc.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(Frame::decode(&enc, Path::new("m")).unwrap(), f);
        let with_comment = b"P6\n# hi\n2 1\n255\n\x01\x02\x03\x04\x05\x06";
        assert_eq!(Frame::decode(with_comment, Path::new("m")).unwrap(), f);
        assert!(Frame::decode(b"P5\n2 1\n255\n\x01\x02", Path::new("m")).is_err());
        assert!(Frame::decode(b"P6\n2 1\n255\n\x01\x02", Path::new("m")).is_err());
    }

    #[test]
    fn quantization_bound_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let clip = random_clip(1, Geometry::new(3, 3, 5, 7));
        save_clip(&clip, dir.path()).unwrap();
        let back: Clip<f32> = load_clip(dir.path()).unwrap();
        for (a, b) in clip.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
        let bytes_before: Vec<Vec<u8>> = frame_paths(dir.path())
            .unwrap()
            .iter()
            .map(|p| fs::read(p).unwrap())
            .collect();
        let dir2 = tempfile::tempdir().unwrap();
        save_clip(&back, dir2.path()).unwrap();
        let bytes_after: Vec<Vec<u8>> = frame_paths(dir2.path())
            .unwrap()
            .iter()
            .map(|p| fs::read(p).unwrap())
            .collect();
        assert_eq!(bytes_before, bytes_after);
        let again: Clip<f32> = load_clip(dir2.path()).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn missing_and_mismatched_frames() {
        let dir = tempfile::tempdir().unwrap();
        let clip = random_clip(2, Geometry::new(3, 3, 4, 4));
        save_clip(&clip, dir.path()).unwrap();
        assert!(matches!(
            load_clip_checked::<f32>(dir.path(), 4),
            Err(Error::Data(_))
        ));
        fs::remove_file(dir.path().join(frame_name(1))).unwrap();
        assert!(load_clip::<f32>(dir.path()).is_err());
        let odd = Frame {
            width: 3,
            height: 4,
            rgb: vec![0; 36],
        };
        odd.write(&dir.path().join(frame_name(1))).unwrap();
        assert!(load_clip::<f32>(dir.path()).is_err());
    }
}
