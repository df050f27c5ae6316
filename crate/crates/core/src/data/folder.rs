use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{self, MaskStack};

/// A decoded video kept in memory as 8-bit frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub label: usize,
    pub frames: Vec<RgbImage>,
    pub masks: Option<MaskStack>,
}

impl Video {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// `(H, W)` of the first frame.
    pub fn size(&self) -> (usize, usize) {
        self.frames
            .first()
            .map(|f| (f.height() as usize, f.width() as usize))
            .unwrap_or((0, 0))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub video_id: String,
    pub class_index: usize,
}

pub fn frame_file_name(frame: usize) -> String {
    format!("{frame:06}.png")
}

pub fn read_classes(root: &Path) -> Result<Vec<String>> {
    let path = root.join("classes.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let classes: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if classes.is_empty() {
        return Err(Error::data(format!("{} lists no classes", path.display())));
    }
    Ok(classes)
}

pub fn read_labels(root: &Path) -> Result<Vec<LabelRow>> {
    let path = root.join("labels.csv");
    let mut reader = csv::Reader::from_path(&path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| Error::data(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn write_labels(root: &Path, rows: &[LabelRow]) -> Result<()> {
    let path = root.join("labels.csv");
    let io = |e: csv::Error| Error::data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    for row in rows {
        w.serialize(row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn read_frames(dir: &Path) -> Result<Vec<RgbImage>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::data(format!("{} holds no frames", dir.display())));
    }
    let mut frames = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        if *name != frame_file_name(i) {
            return Err(Error::data(format!(
                "{}: expected frame {} but found {name}",
                dir.display(),
                frame_file_name(i)
            )));
        }
        let path = dir.join(name);
        let img = image::open(&path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?
            .to_rgb8();
        if let Some(first) = frames.first() {
            let first: &RgbImage = first;
            if img.dimensions() != first.dimensions() {
                return Err(Error::data(format!(
                    "{} changes the frame size",
                    path.display()
                )));
            }
        }
        frames.push(img);
    }
    Ok(frames)
}

/// A dataset root loaded fully into memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub videos: Vec<Video>,
}

impl Dataset {
    /// Load `labels.csv`, `classes.txt`, every listed frame folder and, where
    /// present, the video's mask directory.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::data(format!(
                "dataset root {} does not exist",
                root.display()
            )));
        }
        let classes = read_classes(root)?;
        let labels = read_labels(root)?;
        if labels.is_empty() {
            return Err(Error::data(format!("{} lists no videos", root.display())));
        }
        let mut videos = Vec::with_capacity(labels.len());
        for row in labels {
            if row.class_index >= classes.len() {
                return Err(Error::data(format!(
                    "video {} has class {} but only {} classes exist",
                    row.video_id,
                    row.class_index,
                    classes.len()
                )));
            }
            let frames = read_frames(&root.join("frames").join(&row.video_id))?;
            let masks = if masks::mask_dir(root, &row.video_id)
                .join("masks.json")
                .exists()
            {
                let stack = masks::read_mask_dir(root, &row.video_id)?;
                let (h, w) = (frames[0].height() as usize, frames[0].width() as usize);
                if stack.num_frames() != frames.len() || stack.height != h || stack.width != w {
                    return Err(Error::data(format!(
                        "masks of {} are {}x{}x{} but the video is {}x{h}x{w}",
                        row.video_id,
                        stack.num_frames(),
                        stack.height,
                        stack.width,
                        frames.len()
                    )));
                }
                Some(stack)
            } else {
                None
            };
            videos.push(Video {
                id: row.video_id,
                label: row.class_index,
                frames,
                masks,
            });
        }
        Ok(Self { classes, videos })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        self.videos.iter().all(|v| v.masks.is_some())
    }
}
