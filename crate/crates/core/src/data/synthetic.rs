use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::folder::{frame_file_name, write_labels, LabelRow, Video};
use crate::error::{Error, Result};
use crate::masks::{self, MaskSource, MaskStack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
}

impl Motion {
    /// Unit step in image coordinates (y grows downward).
    pub fn direction(self) -> (f64, f64) {
        match self {
            Motion::Left => (-1.0, 0.0),
            Motion::Right => (1.0, 0.0),
            Motion::Up => (0.0, -1.0),
            Motion::Down => (0.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: ShapeKind,
    pub motion: Motion,
}

impl ClassSpec {
    pub fn new(shape: ShapeKind, motion: Motion) -> Self {
        let s = serde_json::to_value(shape).expect("enum serializes");
        let m = serde_json::to_value(motion).expect("enum serializes");
        Self {
            name: format!(
                "{}-{}",
                s.as_str().unwrap_or_default(),
                m.as_str().unwrap_or_default()
            ),
            shape,
            motion,
        }
    }
}

/// Background texture. Chosen per video from an RNG stream that never sees
/// the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundMode {
    Solid,
    Gradient,
    Noise,
    /// Each video draws one of the three modes above.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassSpec>,
    pub train_videos: usize,
    pub val_videos: usize,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub background: BackgroundMode,
    /// Shape radius range in pixels.
    pub radius: [f64; 2],
    /// Speed range in pixels per frame.
    pub speed: [f64; 2],
    /// Amplitude of per-pixel, per-frame noise.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: vec![
                ClassSpec::new(ShapeKind::Circle, Motion::Left),
                ClassSpec::new(ShapeKind::Circle, Motion::Right),
                ClassSpec::new(ShapeKind::Square, Motion::Up),
                ClassSpec::new(ShapeKind::Square, Motion::Down),
            ],
            train_videos: 200,
            val_videos: 50,
            num_frames: 16,
            height: 64,
            width: 64,
            background: BackgroundMode::Mixed,
            radius: [9.0, 12.0],
            speed: [1.5, 2.2],
            pixel_noise: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("synthetic spec needs at least one class"));
        }
        if self.num_frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("synthetic clips need nonzero T, H and W"));
        }
        let [r0, r1] = self.radius;
        let [v0, v1] = self.speed;
        if !(r0 > 0.0 && r0 <= r1 && v0 >= 0.0 && v0 <= v1) {
            return Err(Error::config(format!(
                "bad synthetic ranges: radius {:?}, speed {:?}",
                self.radius, self.speed
            )));
        }
        if !(0.0..=0.5).contains(&self.pixel_noise) {
            return Err(Error::config(format!(
                "pixel_noise {} outside [0, 0.5]",
                self.pixel_noise
            )));
        }
        let travel = v1 * (self.num_frames - 1) as f64;
        let room = self.height.min(self.width) as f64;
        if 2.0 * r1 + travel > room {
            return Err(Error::config(format!(
                "a radius-{r1} shape moving {travel} px does not fit in {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// RNG stream ids keep splits independent and every video reproducible on
/// its own.
fn video_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 32) | index as u64);
    rng
}

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h * 6.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Background as `H × W` RGB floats.
fn render_background(
    mode: BackgroundMode,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; 3]> {
    let mode = match mode {
        BackgroundMode::Mixed => [
            BackgroundMode::Solid,
            BackgroundMode::Gradient,
            BackgroundMode::Noise,
        ][rng.gen_range(0..3)],
        m => m,
    };
    // Backgrounds stay darker than any foreground so edge polarity does not
    // depend on the video; which colour is drawn still never sees the label.
    let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_: u8| rng.gen_range(0.05..0.5));
    match mode {
        BackgroundMode::Solid => vec![color(rng); h * w],
        BackgroundMode::Gradient => {
            let (a, b) = (color(rng), color(rng));
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let span = (dx.abs() * w as f64 + dy.abs() * h as f64).max(1.0);
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let px = x as f64 - w as f64 / 2.0;
                    let py = y as f64 - h as f64 / 2.0;
                    let t = ((px * dx + py * dy) / span + 0.5).clamp(0.0, 1.0);
                    out.push([0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t));
                }
            }
            out
        }
        BackgroundMode::Noise => {
            const GRID: usize = 5;
            let knots: Vec<[f64; 3]> = (0..GRID * GRID).map(|_| color(rng)).collect();
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h {
                let gy = y as f64 / (h.max(2) - 1) as f64 * (GRID - 1) as f64;
                let (y0, fy) = (
                    (gy.floor() as usize).min(GRID - 2),
                    gy - gy.floor().min((GRID - 2) as f64),
                );
                for x in 0..w {
                    let gx = x as f64 / (w.max(2) - 1) as f64 * (GRID - 1) as f64;
                    let (x0, fx) = (
                        (gx.floor() as usize).min(GRID - 2),
                        gx - gx.floor().min((GRID - 2) as f64),
                    );
                    let k = |yy: usize, xx: usize| knots[yy * GRID + xx];
                    out.push([0, 1, 2].map(|c| {
                        let top = k(y0, x0)[c] * (1.0 - fx) + k(y0, x0 + 1)[c] * fx;
                        let bot = k(y0 + 1, x0)[c] * (1.0 - fx) + k(y0 + 1, x0 + 1)[c] * fx;
                        top * (1.0 - fy) + bot * fy
                    }));
                }
            }
            out
        }
        BackgroundMode::Mixed => unreachable!("resolved above"),
    }
}

fn inside(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => {
            // same area as the circle
            let half = r * std::f64::consts::PI.sqrt() / 2.0;
            dx.abs() <= half && dy.abs() <= half
        }
        ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// Render video `index` of a split. The label is `index mod classes`;
/// background, colour, size, speed and start position come from the
/// video's own RNG stream.
pub fn render_video(spec: &SyntheticSpec, split_stream: u64, index: usize) -> Result<Video> {
    spec.validate()?;
    let (t_len, h, w) = (spec.num_frames, spec.height, spec.width);
    let label = index % spec.classes.len();
    let class = &spec.classes[label];
    let mut rng = video_rng(spec.seed, split_stream, index);

    let background = render_background(spec.background, h, w, &mut rng);
    let r = rng.gen_range(spec.radius[0]..=spec.radius[1]);
    let v = rng.gen_range(spec.speed[0]..=spec.speed[1]);
    let fg = hsv_to_rgb(
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.2..0.6),
        rng.gen_range(0.9..1.0),
    );
    let (dx, dy) = class.motion.direction();
    let travel = v * (t_len - 1) as f64;
    // the whole track stays inside the frame
    let range = |len: usize, d: f64| {
        let lo = r + if d < 0.0 { travel } else { 0.0 };
        let hi = len as f64 - r - if d > 0.0 { travel } else { 0.0 };
        (lo, hi.max(lo))
    };
    let (x_lo, x_hi) = range(w, dx);
    let (y_lo, y_hi) = range(h, dy);
    let x0 = rng.gen_range(x_lo..=x_hi);
    let y0 = rng.gen_range(y_lo..=y_hi);

    let mut frames = Vec::with_capacity(t_len);
    let mut per_frame = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let cx = x0 + dx * v * t as f64;
        let cy = y0 + dy * v * t as f64;
        let mut img = RgbImage::new(w as u32, h as u32);
        let mut mask = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let on = inside(class.shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
                let base = if on { fg } else { background[y * w + x] };
                let px = base.map(|c| {
                    let n = if spec.pixel_noise > 0.0 {
                        rng.gen_range(-spec.pixel_noise..=spec.pixel_noise)
                    } else {
                        0.0
                    };
                    ((c + n).clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, Rgb(px));
                mask[y * w + x] = u8::from(on);
            }
        }
        frames.push(img);
        per_frame.push(vec![mask]);
    }
    Ok(Video {
        id: format!("video_{index:05}"),
        label,
        frames,
        masks: Some(MaskStack {
            height: h,
            width: w,
            per_frame,
            source: MaskSource::Synthetic,
        }),
    })
}

/// Write videos to a dataset root in the frame-folder layout.
pub fn write_videos(root: &Path, classes: &[String], videos: &[Video]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join("classes.txt");
    std::fs::write(&path, classes.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::with_capacity(videos.len());
    for v in videos {
        let dir = root.join("frames").join(&v.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, frame) in v.frames.iter().enumerate() {
            let path = dir.join(frame_file_name(t));
            frame
                .save(&path)
                .map_err(|e| Error::Image { path, source: e })?;
        }
        if let Some(stack) = &v.masks {
            masks::write_mask_dir(root, &v.id, stack)?;
        }
        rows.push(LabelRow {
            video_id: v.id.clone(),
            class_index: v.label,
        });
    }
    write_labels(root, &rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticSummary {
    pub train_videos: usize,
    pub val_videos: usize,
    pub classes: Vec<String>,
}

/// Render both splits into `out/train` and `out/val` and record the spec in
/// `out/synthetic.json`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<SyntheticSummary> {
    spec.validate()?;
    let classes = spec.class_names();
    for (split, stream, count) in [
        ("train", TRAIN_STREAM, spec.train_videos),
        ("val", VAL_STREAM, spec.val_videos),
    ] {
        let videos = (0..count)
            .map(|i| render_video(spec, stream, i))
            .collect::<Result<Vec<_>>>()?;
        write_videos(&out.join(split), &classes, &videos)?;
    }
    let path = out.join("synthetic.json");
    let text = serde_json::to_string_pretty(spec).expect("spec serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(SyntheticSummary {
        train_videos: spec.train_videos,
        val_videos: spec.val_videos,
        classes,
    })
}

/// Render a split in memory without touching the disk.
pub fn render_split(spec: &SyntheticSpec, train: bool, count: usize) -> Result<Vec<Video>> {
    let stream = if train { TRAIN_STREAM } else { VAL_STREAM };
    (0..count).map(|i| render_video(spec, stream, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train_videos: 8,
            val_videos: 4,
            num_frames: 6,
            height: 32,
            width: 32,
            radius: [4.0, 6.0],
            speed: [1.0, 2.0],
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn default_class_names() {
        assert_eq!(
            SyntheticSpec::default().class_names(),
            ["circle-left", "circle-right", "square-up", "square-down"]
        );
        SyntheticSpec::default().validate().unwrap();
    }

    #[test]
    fn oversized_motion_is_config_error() {
        let spec = SyntheticSpec {
            speed: [5.0, 5.0],
            ..SyntheticSpec::default()
        };
        assert_eq!(spec.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn masks_cover_exactly_the_shape() {
        let spec = SyntheticSpec {
            pixel_noise: 0.0,
            background: BackgroundMode::Solid,
            ..small()
        };
        let v = render_video(&spec, TRAIN_STREAM, 1).unwrap();
        let stack = v.masks.as_ref().unwrap();
        for (t, frame) in v.frames.iter().enumerate() {
            let mask = &stack.per_frame[t][0];
            let bg = frame.get_pixel(0, 0);
            assert_eq!(mask[0], 0);
            for (i, px) in frame.pixels().enumerate() {
                assert_eq!(mask[i] == 1, px != bg, "frame {t} pixel {i}");
            }
            assert!(mask.contains(&1));
        }
    }

    #[test]
    fn motion_follows_the_class() {
        let spec = SyntheticSpec {
            pixel_noise: 0.0,
            ..small()
        };
        for index in 0..4 {
            let v = render_video(&spec, TRAIN_STREAM, index).unwrap();
            let stack = v.masks.unwrap();
            let centroid = |t: usize| {
                let m = &stack.per_frame[t][0];
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for (i, &b) in m.iter().enumerate() {
                    if b == 1 {
                        sx += (i % 32) as f64;
                        sy += (i / 32) as f64;
                        n += 1.0;
                    }
                }
                (sx / n, sy / n)
            };
            let (a, b) = (centroid(0), centroid(5));
            let (dx, dy) = spec.classes[v.label].motion.direction();
            assert!((b.0 - a.0) * dx + (b.1 - a.1) * dy > 3.0, "video {index}");
        }
    }

    #[test]
    fn generation_is_bitwise_reproducible() {
        let spec = small();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        for split in ["train", "val"] {
            let da = Dataset::open(&a.path().join(split)).unwrap();
            let db = Dataset::open(&b.path().join(split)).unwrap();
            assert_eq!(da, db);
        }
        let fa = std::fs::read(a.path().join("train/frames/video_00003/000002.png")).unwrap();
        let fb = std::fs::read(b.path().join("train/frames/video_00003/000002.png")).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn written_dataset_matches_rendering() {
        let spec = small();
        let dir = tempfile::tempdir().unwrap();
        let summary = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(summary.train_videos, 8);
        let ds = Dataset::open(&dir.path().join("train")).unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!(ds.num_classes(), 4);
        assert!(ds.has_masks());
        for (read, rendered) in ds.videos.iter().zip(render_split(&spec, true, 8).unwrap()) {
            assert!(read.frames == rendered.frames && read.label == rendered.label);
            assert!(read.masks.as_ref().unwrap().per_frame == rendered.masks.unwrap().per_frame);
        }
        for v in &ds.videos {
            let manifest = masks::read_mask_manifest(&dir.path().join("train"), &v.id).unwrap();
            let files = std::fs::read_dir(masks::mask_dir(&dir.path().join("train"), &v.id))
                .unwrap()
                .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png")
                .count();
            assert_eq!(manifest.instances.values().sum::<usize>(), files);
        }
    }

    #[test]
    fn labels_are_balanced() {
        let videos = render_split(&small(), true, 8).unwrap();
        for c in 0..4 {
            assert_eq!(videos.iter().filter(|v| v.label == c).count(), 2);
        }
    }
}
