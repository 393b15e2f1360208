//! Procedural night-time videos with and without rain, and their files.

mod dataset;
pub mod pixmap;
mod rain;
mod scene;

pub use dataset::{
    make_dataset, render_video, Dataset, DatasetSpec, Manifest, ManifestEntry, RainRange, Range,
    SceneRange, Split, SplitCounts, VideoParams, MANIFEST,
};
pub use pixmap::{load_clip, load_clip_checked, save_clip};
pub use rain::{add_rain, add_rain_layer, RainLayer, RainSpec};
pub use scene::{gen_night_scene, SceneSpec};
