//! Video datasets: the synthetic moving-shapes generator, the frame-folder
//! layout shared by real and synthetic data, and clip sampling with joint
//! frame/mask augmentation.
//!
//! Dataset root layout:
//!
//! ```text
//! frames/<video_id>/<frame:06d>.png
//! masks/<video_id>/...            (see `masks`)
//! labels.csv                      video_id,class_index
//! classes.txt                     one class name per line
//! ```

mod folder;
mod sampling;
mod synthetic;

pub use folder::{
    frame_file_name, read_classes, read_labels, write_labels, Dataset, LabelRow, Video,
};
pub use sampling::{sample_clip, Augmentation, SampledClip, SamplingMode, SamplingProtocol};
pub use synthetic::{
    generate_synthetic, render_split, render_video, write_videos, BackgroundMode, ClassSpec,
    Motion, ShapeKind, SyntheticSpec, SyntheticSummary,
};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    FrameFolder,
}

/// Where a run's data lives. Training and validation videos are separate
/// dataset roots below `root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub root: std::path::PathBuf,
    pub train_split: String,
    pub val_split: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            root: "data/synthetic".into(),
            train_split: "train".into(),
            val_split: "val".into(),
        }
    }
}

impl DatasetConfig {
    pub fn train_root(&self) -> std::path::PathBuf {
        self.root.join(&self.train_split)
    }

    pub fn val_root(&self) -> std::path::PathBuf {
        self.root.join(&self.val_split)
    }
}
