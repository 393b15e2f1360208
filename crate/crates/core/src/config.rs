//! Run configuration: a TOML file with one table per stage.
//!
//! Every field is checked by [`Config::validate`] when the file is loaded,
//! before any data is read or any compute starts. [`Config::default`] is
//! the desk-scale preset shipped as `presets/desk.cfg`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clip::Geometry;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::net::{NetConfig, PatchSpec};
use crate::rng::mix_seed;
use crate::selftrain::SelfTrainConfig;
use crate::synth::{DatasetSpec, RainRange, SceneRange, SplitCounts};
use crate::tensor::AdamConfig;

pub const DESK_PRESET: &str = include_str!("../presets/desk.cfg");
pub const PAPER_PRESET: &str = include_str!("../presets/paper.cfg");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    /// Token width `C_p`.
    pub hidden: usize,
    /// Attention heads; defaults to one per 64 channels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    pub mlp_ratio: usize,
    pub patch_t: usize,
    pub patch_s: usize,
    pub clip_frames: usize,
    pub clip_height: usize,
    pub clip_width: usize,
}

impl ModelConfig {
    pub fn clip(&self) -> Geometry {
        Geometry::new(3, self.clip_frames, self.clip_height, self.clip_width)
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            clip: self.clip(),
            patch: PatchSpec {
                ts: self.patch_t,
                ss: self.patch_s,
                width: self.hidden,
            },
            blocks: self.blocks,
            heads: self.heads.unwrap_or_else(|| NetConfig::default_heads(self.hidden)),
            mlp_ratio: self.mlp_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSettings {
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Videos per step (P) and clips per video (K).
    pub videos_per_step: usize,
    pub clips_per_video: usize,
    /// Intermediate checkpoint interval in steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Frames per generated video; a multiple of the model clip length.
    pub video_frames: usize,
    pub counts: SplitCounts,
    #[serde(default = "SceneRange::synthetic")]
    pub synthetic_scene: SceneRange,
    #[serde(default = "SceneRange::shifted")]
    pub shifted_scene: SceneRange,
    #[serde(default = "RainRange::synthetic")]
    pub synthetic_rain: RainRange,
    #[serde(default = "RainRange::shifted")]
    pub shifted_rain: RainRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub pretrain_checkpoint: PathBuf,
    pub selftrain_checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamConfig,
    pub sampler: SamplerSettings,
    pub pretrain: PretrainConfig,
    pub selftrain: SelfTrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

impl Config {
    pub fn desk() -> Self {
        Self::parse(DESK_PRESET).expect("desk preset is valid")
    }

    /// Full-scale settings. Valid, but far beyond what a CPU run can train.
    pub fn paper() -> Self {
        Self::parse(PAPER_PRESET).expect("paper preset is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn net(&self) -> NetConfig {
        self.model.net()
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn dataset(&self, root: Option<&Path>) -> DatasetSpec {
        DatasetSpec {
            root: root.map_or_else(|| self.data.root.clone(), Path::to_path_buf),
            seed: mix_seed(self.seed, 0xDA7A),
            frames: self.data.video_frames,
            height: self.model.clip_height,
            width: self.model.clip_width,
            counts: self.data.counts,
            synthetic_scene: self.data.synthetic_scene.clone(),
            shifted_scene: self.data.shifted_scene.clone(),
            synthetic_rain: self.data.synthetic_rain.clone(),
            shifted_rain: self.data.shifted_rain.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.net().validate()?;
        if self.model.blocks == 0 {
            return bad("model.blocks must be at least 1".into());
        }
        self.noise_schedule()?;
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule.steps {
            return bad(format!(
                "sampler.steps must lie in 1..={}, got {}",
                self.schedule.steps, self.sampler.steps
            ));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad("optimizer.lr must be positive".into());
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("optimizer betas must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0) {
            return bad("optimizer.eps must be positive".into());
        }
        let p = &self.pretrain;
        if p.videos_per_step == 0 || p.clips_per_video == 0 {
            return bad("pretrain.videos_per_step and clips_per_video must be positive".into());
        }
        if p.log_every == 0 {
            return bad("pretrain.log_every must be positive".into());
        }
        self.selftrain.validate()?;
        let d = &self.data;
        if d.video_frames < self.model.clip_frames || d.video_frames % self.model.clip_frames != 0 {
            return bad(format!(
                "data.video_frames {} must be a positive multiple of model.clip_frames {}",
                d.video_frames, self.model.clip_frames
            ));
        }
        self.dataset(None).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_round_trip() {
        for cfg in [Config::desk(), Config::paper()] {
            let back = Config::parse(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg);
        }
        let desk = Config::desk();
        assert_eq!(desk.model.blocks, 2);
        assert_eq!(desk.model.hidden, 64);
        assert_eq!(desk.schedule.steps, 200);
        assert_eq!(desk.sampler.steps, 25);
        assert!(desk.pretrain.steps <= 5000);
        assert_eq!(desk.data.counts.paired, 8);
        let paper = Config::paper();
        assert_eq!((paper.model.blocks, paper.model.hidden), (10, 768));
        assert_eq!(paper.pretrain.steps, 2_000_000);
        assert_eq!(paper.selftrain.steps, 10_000);
    }

    #[test]
    fn rejects_bad_geometry_and_fields() {
        let text = DESK_PRESET.replace("clip_height = 16", "clip_height = 15");
        assert!(matches!(Config::parse(&text), Err(Error::Config(_))));
        let text = DESK_PRESET.replace("steps = 25", "steps = 500");
        assert!(Config::parse(&text).is_err());
        let text = format!("{DESK_PRESET}\nunknown = 1\n");
        assert!(Config::parse(&text).is_err());
        let text = DESK_PRESET.replace("t_u = 0.5", "t_u = 0.0");
        assert!(Config::parse(&text).is_err());
    }
}
