//! Dataset folders and their manifest.
//!
//! Layout under the root:
//!
//! ```text
//! manifest.tsv
//! <split>/<video_id>/clean/frame_NNNN.ppm
//! <split>/<video_id>/rain/frame_NNNN.ppm
//! ```
//!
//! Each manifest line is `split\tvideo_id\tpath\tparams`, where `path` is
//! relative to the root and `params` is the JSON of [`VideoParams`].

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::pixmap::{load_clip_checked, save_clip};
use super::rain::{add_rain, RainSpec};
use super::scene::{gen_night_scene, SceneSpec};
use crate::clip::Clip;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{mix_seed, NoiseRng};
use crate::scalar::Scalar;

pub const MANIFEST: &str = "manifest.tsv";
const RAIN_LABEL: u64 = 0x5241_494E;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    /// Synthetic paired training videos.
    Paired,
    PairedTest,
    /// Unlabelled rain videos from the shifted distribution. Clean frames
    /// are written for evaluation only.
    Rain,
    RainTest,
    /// Clear videos from the shifted scene distribution.
    Clear,
    ClearTest,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::Paired,
        Split::PairedTest,
        Split::Rain,
        Split::RainTest,
        Split::Clear,
        Split::ClearTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Paired => "paired",
            Split::PairedTest => "paired_test",
            Split::Rain => "rain",
            Split::RainTest => "rain_test",
            Split::Clear => "clear",
            Split::ClearTest => "clear_test",
        }
    }

    fn code(self) -> u64 {
        Split::ALL.iter().position(|&s| s == self).unwrap() as u64 + 1
    }

    pub fn has_rain(self) -> bool {
        !matches!(self, Split::Clear | Split::ClearTest)
    }

    fn synthetic(self) -> bool {
        matches!(self, Split::Paired | Split::PairedTest)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown split {s:?}")))
    }
}

/// Closed interval `[lo, hi]` written as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for Range {
    fn from([lo, hi]: [f64; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.lo, r.hi]
    }
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn draw(&self, rng: &mut NoiseRng) -> f64 {
        if self.hi == self.lo {
            self.lo
        } else {
            rng.uniform_in(self.lo, self.hi)
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi {
            Ok(())
        } else {
            Err(Error::Config(format!("range {name} = [{}, {}] is invalid", self.lo, self.hi)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRange {
    pub n_lights: [usize; 2],
    pub base_luminance: Range,
    pub sensor_noise_sigma: Range,
    pub object_speed: Range,
    pub light_gain: Range,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainRange {
    pub density: Range,
    pub angle: Range,
    pub streak_length: Range,
    pub streak_brightness: Range,
    pub fall_speed: Range,
    pub glow_boost: Range,
}

impl SceneRange {
    /// Scenes used for paired training data.
    pub fn synthetic() -> Self {
        Self {
            n_lights: [1, 3],
            base_luminance: Range::new(0.02, 0.1),
            sensor_noise_sigma: Range::new(0.005, 0.02),
            object_speed: Range::new(0.3, 1.2),
            light_gain: Range::new(0.4, 0.8),
        }
    }

    /// Scenes of the unlabelled splits: more and brighter lights.
    pub fn shifted() -> Self {
        Self {
            n_lights: [2, 4],
            base_luminance: Range::new(0.04, 0.14),
            sensor_noise_sigma: Range::new(0.005, 0.02),
            object_speed: Range::new(0.3, 1.2),
            light_gain: Range::new(1.0, 1.6),
        }
    }

    fn draw(&self, rng: &mut NoiseRng, seed: u64, frames: usize, height: usize, width: usize) -> SceneSpec {
        SceneSpec {
            seed,
            frames,
            height,
            width,
            n_lights: rng.int_in(self.n_lights[0], self.n_lights[1]),
            base_luminance: self.base_luminance.draw(rng),
            sensor_noise_sigma: self.sensor_noise_sigma.draw(rng),
            object_speed: self.object_speed.draw(rng),
            light_gain: self.light_gain.draw(rng),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_lights[0] > self.n_lights[1] {
            return Err(Error::Config("n_lights range is inverted".into()));
        }
        self.base_luminance.check("base_luminance")?;
        self.sensor_noise_sigma.check("sensor_noise_sigma")?;
        self.object_speed.check("object_speed")?;
        self.light_gain.check("light_gain")
    }
}

impl RainRange {
    pub fn synthetic() -> Self {
        Self {
            density: Range::new(0.15, 0.35),
            angle: Range::new(-15.0, 15.0),
            streak_length: Range::new(3.0, 5.0),
            streak_brightness: Range::new(0.5, 0.8),
            fall_speed: Range::new(2.0, 4.0),
            glow_boost: Range::new(0.0, 0.0),
        }
    }

    /// Longer, denser and brighter streaks, lit up near glows.
    pub fn shifted() -> Self {
        Self {
            density: Range::new(0.3, 0.5),
            angle: Range::new(-25.0, 25.0),
            streak_length: Range::new(5.0, 8.0),
            streak_brightness: Range::new(0.7, 1.0),
            fall_speed: Range::new(3.0, 6.0),
            glow_boost: Range::new(0.5, 1.5),
        }
    }

    fn draw(&self, rng: &mut NoiseRng, seed: u64) -> RainSpec {
        RainSpec {
            seed,
            density: self.density.draw(rng),
            angle: self.angle.draw(rng),
            streak_length: self.streak_length.draw(rng),
            streak_brightness: self.streak_brightness.draw(rng),
            fall_speed: self.fall_speed.draw(rng),
            glow_boost: self.glow_boost.draw(rng),
        }
    }

    fn validate(&self) -> Result<()> {
        self.density.check("density")?;
        self.angle.check("angle")?;
        self.streak_length.check("streak_length")?;
        self.streak_brightness.check("streak_brightness")?;
        self.fall_speed.check("fall_speed")?;
        self.glow_boost.check("glow_boost")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub paired: usize,
    pub paired_test: usize,
    pub rain: usize,
    pub rain_test: usize,
    pub clear: usize,
    pub clear_test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Paired => self.paired,
            Split::PairedTest => self.paired_test,
            Split::Rain => self.rain,
            Split::RainTest => self.rain_test,
            Split::Clear => self.clear,
            Split::ClearTest => self.clear_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub seed: u64,
    /// Frames per video. Videos may be longer than one model clip.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub counts: SplitCounts,
    pub synthetic_scene: SceneRange,
    pub shifted_scene: SceneRange,
    pub synthetic_rain: RainRange,
    pub shifted_rain: RainRange,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("dataset geometry has a zero dimension".into()));
        }
        self.synthetic_scene.validate()?;
        self.shifted_scene.validate()?;
        self.synthetic_rain.validate()?;
        self.shifted_rain.validate()
    }

    /// Generation parameters of one video. Pure in `(self.seed, split, index)`.
    pub fn video_params(&self, split: Split, index: usize) -> VideoParams {
        let seed = mix_seed(self.seed, (split.code() << 32) | index as u64);
        let mut rng = NoiseRng::new(seed);
        let (scenes, rains) = if split.synthetic() {
            (&self.synthetic_scene, &self.synthetic_rain)
        } else {
            (&self.shifted_scene, &self.shifted_rain)
        };
        let scene = scenes.draw(&mut rng, seed, self.frames, self.height, self.width);
        let rain = split
            .has_rain()
            .then(|| rains.draw(&mut rng, mix_seed(seed, RAIN_LABEL)));
        VideoParams { scene, rain }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoParams {
    pub scene: SceneSpec,
    pub rain: Option<RainSpec>,
}

impl VideoParams {
    pub fn frames(&self) -> usize {
        self.scene.frames
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub video_id: String,
    /// Video folder relative to the dataset root.
    pub path: String,
    pub params: VideoParams,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let json = serde_json::to_string(&e.params).expect("params serialize");
            s.push_str(&format!("{}\t{}\t{}\t{}\n", e.split, e.video_id, e.path, json));
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.splitn(4, '\t').collect();
            let [split, id, path, json] = fields[..] else {
                return Err(Error::format(origin, format!("line {}: expected 4 fields", n + 1)));
            };
            let params = serde_json::from_str(json)
                .map_err(|e| Error::format(origin, format!("line {}: {e}", n + 1)))?;
            entries.push(ManifestEntry {
                split: split.parse()?,
                video_id: id.to_string(),
                path: path.to_string(),
                params,
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Renders one video: the clear clip and, for rain splits, its rainy version.
pub fn render_video<S: Scalar>(params: &VideoParams) -> Result<(Clip<S>, Option<Clip<S>>)> {
    let clean = gen_night_scene(&params.scene)?;
    let rain = params.rain.as_ref().map(|r| add_rain(&clean, r)).transpose()?;
    Ok((clean, rain))
}

/// Generates every split under `spec.root` and writes the manifest.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Manifest> {
    spec.validate()?;
    let mut entries = Vec::new();
    for split in Split::ALL {
        for i in 0..spec.counts.get(split) {
            let video_id = format!("{}_{i:04}", split.name());
            entries.push(ManifestEntry {
                split,
                path: format!("{}/{video_id}", split.name()),
                video_id,
                params: spec.video_params(split, i),
            });
        }
    }
    let mut seen = HashSet::new();
    for e in &entries {
        if !seen.insert(e.params.scene.seed) {
            return Err(Error::Config(format!("seed collision at {}", e.video_id)));
        }
    }
    fs::create_dir_all(&spec.root).map_err(|e| Error::io(&spec.root, e))?;
    let written = parallel::map(&entries, |e| -> Result<()> {
        let dir = spec.root.join(&e.path);
        let (clean, rain) = render_video::<f32>(&e.params)?;
        save_clip(&clean, &dir.join("clean"))?;
        if let Some(r) = rain {
            save_clip(&r, &dir.join("rain"))?;
        }
        Ok(())
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;
    let manifest = Manifest { entries };
    manifest.write(&spec.root.join(MANIFEST))?;
    Ok(manifest)
}

/// A dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Manifest::read(&root.join(MANIFEST))?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.manifest.split(split).collect()
    }

    pub fn clean<S: Scalar>(&self, entry: &ManifestEntry) -> Result<Clip<S>> {
        load_clip_checked(&self.root.join(&entry.path).join("clean"), entry.params.frames())
    }

    pub fn rain<S: Scalar>(&self, entry: &ManifestEntry) -> Result<Clip<S>> {
        if !entry.split.has_rain() {
            return Err(Error::Data(format!("{} has no rain frames", entry.video_id)));
        }
        load_clip_checked(&self.root.join(&entry.path).join("rain"), entry.params.frames())
    }

    /// Clean frames of every video in `split`, in manifest order.
    pub fn load_clean<S: Scalar>(&self, split: Split) -> Result<Vec<Clip<S>>> {
        self.entries(split).into_iter().map(|e| self.clean(e)).collect()
    }

    /// Rain frames of every video in `split`, in manifest order.
    pub fn load_rain<S: Scalar>(&self, split: Split) -> Result<Vec<Clip<S>>> {
        self.entries(split).into_iter().map(|e| self.rain(e)).collect()
    }
}
