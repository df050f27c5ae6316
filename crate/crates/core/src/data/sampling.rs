use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::folder::Video;
use crate::backbone::VideoClip;
use crate::error::{Error, Result};
use crate::masks::{self, AggregatedMask};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    Train,
    Validation,
}

/// Temporal sampling plus spatial augmentation. Training draws a random
/// start, resize, crop and flip; validation takes the temporal centre,
/// the smallest resize and a centre crop, and never flips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingProtocol {
    pub stride: usize,
    pub clip_length: usize,
    /// Short-side resize range, inclusive. `None` keeps native size.
    pub resize: Option<[u32; 2]>,
    /// Square crop side. `None` keeps the whole frame.
    pub crop: Option<u32>,
    pub flip_prob: f64,
    pub mode: SamplingMode,
}

impl SamplingProtocol {
    /// 16 frames at stride 4, resize 256 to 320, crop 224, 50% flips.
    pub fn ucf101_style(mode: SamplingMode) -> Self {
        Self {
            stride: 4,
            clip_length: 16,
            resize: Some([256, 320]),
            crop: Some(224),
            flip_prob: 0.5,
            mode,
        }
    }

    /// Stride 2 and no flips; direction words in the labels make flips unsafe.
    pub fn ssv2_style(mode: SamplingMode) -> Self {
        Self {
            stride: 2,
            flip_prob: 0.0,
            ..Self::ucf101_style(mode)
        }
    }

    /// Native-size consecutive frames. Flipping would swap the left/right
    /// classes, so it is off.
    pub fn synthetic(mode: SamplingMode, clip_length: usize) -> Self {
        Self {
            stride: 1,
            clip_length,
            resize: None,
            crop: None,
            flip_prob: 0.0,
            mode,
        }
    }

    pub fn with_mode(&self, mode: SamplingMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    /// Frames covered by one clip before wrapping.
    pub fn span(&self) -> usize {
        self.stride * (self.clip_length.max(1) - 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.clip_length == 0 {
            return Err(Error::config("stride and clip_length must be positive"));
        }
        if let Some([lo, hi]) = self.resize {
            if lo == 0 || lo > hi {
                return Err(Error::config(format!("bad resize range [{lo}, {hi}]")));
            }
            if let Some(c) = self.crop {
                if c > lo {
                    return Err(Error::config(format!(
                        "crop {c} exceeds the smallest resize {lo}"
                    )));
                }
            }
        }
        if self.crop == Some(0) {
            return Err(Error::config("crop must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!(
                "flip_prob {} outside [0, 1]",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

/// Everything done to a clip, so masks can follow the frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Size after resizing, `(H, W)`.
    pub resized: (u32, u32),
    /// Crop window `(top, left, height, width)` in resized coordinates.
    pub crop: (u32, u32, u32, u32),
    pub flipped: bool,
}

impl Augmentation {
    fn apply<P: image::Pixel + 'static>(
        &self,
        img: &image::ImageBuffer<P, Vec<P::Subpixel>>,
        filter: FilterType,
    ) -> image::ImageBuffer<P, Vec<P::Subpixel>> {
        let (h, w) = self.resized;
        let resized = if img.dimensions() == (w, h) {
            img.clone()
        } else {
            imageops::resize(img, w, h, filter)
        };
        let (top, left, ch, cw) = self.crop;
        let cropped = if (top, left, ch, cw) == (0, 0, h, w) {
            resized
        } else {
            imageops::crop_imm(&resized, left, top, cw, ch).to_image()
        };
        if self.flipped {
            imageops::flip_horizontal(&cropped)
        } else {
            cropped
        }
    }

    /// Frames are resized with a triangle filter.
    pub fn apply_frame(&self, img: &RgbImage) -> RgbImage {
        self.apply(img, FilterType::Triangle)
    }

    /// Masks take the same geometry but nearest-neighbour resizing, so they
    /// stay binary.
    pub fn apply_mask(&self, img: &GrayImage) -> GrayImage {
        self.apply(img, FilterType::Nearest)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledClip {
    pub clip: VideoClip,
    /// Source frame of each clip frame.
    pub frame_indices: Vec<usize>,
    pub augmentation: Augmentation,
    /// OR-aggregated mask carried through the same augmentation,
    /// `T × 1 × H × W` at clip resolution.
    pub mask: Option<AggregatedMask>,
}

fn draw_start<R: Rng + ?Sized>(n: usize, protocol: &SamplingProtocol, rng: &mut R) -> usize {
    let span = protocol.span();
    match protocol.mode {
        SamplingMode::Validation => n.saturating_sub(span) / 2,
        SamplingMode::Train if n >= span => rng.gen_range(0..=n - span),
        // short videos wrap around, so any start works
        SamplingMode::Train => rng.gen_range(0..n),
    }
}

fn draw_augmentation<R: Rng + ?Sized>(
    (h, w): (u32, u32),
    protocol: &SamplingProtocol,
    rng: &mut R,
) -> Result<Augmentation> {
    let train = protocol.mode == SamplingMode::Train;
    let resized = match protocol.resize {
        None => (h, w),
        Some([lo, hi]) => {
            let short = if train { rng.gen_range(lo..=hi) } else { lo };
            let scale = short as f64 / h.min(w) as f64;
            let r = |v: u32| ((v as f64 * scale).round() as u32).max(short);
            if h <= w {
                (short, r(w))
            } else {
                (r(h), short)
            }
        }
    };
    let crop = match protocol.crop {
        None => (0, 0, resized.0, resized.1),
        Some(c) => {
            if c > resized.0 || c > resized.1 {
                return Err(Error::data(format!(
                    "crop {c} does not fit a {}x{} frame",
                    resized.0, resized.1
                )));
            }
            let (top, left) = if train {
                (
                    rng.gen_range(0..=resized.0 - c),
                    rng.gen_range(0..=resized.1 - c),
                )
            } else {
                ((resized.0 - c) / 2, (resized.1 - c) / 2)
            };
            (top, left, c, c)
        }
    };
    let flipped = train && protocol.flip_prob > 0.0 && rng.gen_bool(protocol.flip_prob);
    Ok(Augmentation {
        resized,
        crop,
        flipped,
    })
}

/// Sample one clip of `clip_length` frames at `stride`, augment it, and
/// carry the video's masks through the same steps. Validation sampling
/// never touches `rng`.
pub fn sample_clip<R: Rng + ?Sized>(
    video: &Video,
    protocol: &SamplingProtocol,
    rng: &mut R,
) -> Result<SampledClip> {
    protocol.validate()?;
    let n = video.num_frames();
    if n == 0 {
        return Err(Error::data(format!("video {} has no frames", video.id)));
    }
    let start = draw_start(n, protocol, rng);
    let frame_indices: Vec<usize> = (0..protocol.clip_length)
        .map(|k| (start + k * protocol.stride) % n)
        .collect();
    let (h, w) = video.size();
    let aug = draw_augmentation((h as u32, w as u32), protocol, rng)?;

    let (ch, cw) = (aug.crop.2 as usize, aug.crop.3 as usize);
    let plane = ch * cw;
    let mut data = Vec::with_capacity(frame_indices.len() * 3 * plane);
    for &i in &frame_indices {
        let frame = aug.apply_frame(&video.frames[i]);
        let raw = frame.as_raw();
        for c in 0..3 {
            data.extend((0..plane).map(|p| raw[p * 3 + c] as f32 / 255.0));
        }
    }
    let clip = VideoClip::new(
        Tensor::from_vec(&[frame_indices.len(), 3, ch, cw], data)?,
        video.label,
    )?;

    let mask = match &video.masks {
        None => None,
        Some(stack) => {
            let agg = masks::align(&masks::aggregate(stack)?, &frame_indices)?;
            let mut out = Vec::with_capacity(frame_indices.len() * plane);
            for t in 0..frame_indices.len() {
                let pixels = agg
                    .frame(t)
                    .iter()
                    .map(|&v| if v >= 0.5 { 255 } else { 0 })
                    .collect();
                let img = GrayImage::from_raw(w as u32, h as u32, pixels)
                    .expect("mask matches frame size");
                out.extend(
                    aug.apply_mask(&img)
                        .as_raw()
                        .iter()
                        .map(|&v| f32::from(u8::from(v >= 128))),
                );
            }
            Some(AggregatedMask::new(
                Tensor::from_vec(&[frame_indices.len(), 1, ch, cw], out)?,
                format!("augmented {ch}x{cw}"),
            )?)
        }
    };
    Ok(SampledClip {
        clip,
        frame_indices,
        augmentation: aug,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_video, SyntheticSpec};
    use crate::masks::{MaskSource, MaskStack};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn counting_video(n: usize, h: u32, w: u32) -> Video {
        // frame t carries t in its red channel
        let frames = (0..n)
            .map(|t| RgbImage::from_fn(w, h, |_, _| image::Rgb([t as u8, 0, 0])))
            .collect();
        Video {
            id: "count".into(),
            label: 0,
            frames,
            masks: None,
        }
    }

    fn red_of(clip: &VideoClip, t: usize) -> u8 {
        (clip.frames().slab(t)[0] * 255.0).round() as u8
    }

    #[test]
    fn stride_four_from_zero() {
        let v = counting_video(61, 8, 8);
        let p = SamplingProtocol {
            resize: None,
            crop: None,
            ..SamplingProtocol::ucf101_style(SamplingMode::Train)
        };
        let s = sample_clip(&v, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let expect: Vec<usize> = (0..16).map(|k| 4 * k).collect();
        assert_eq!(s.frame_indices, expect);
        assert_eq!(red_of(&s.clip, 15), 60);
    }

    #[test]
    fn start_zero_arithmetic_sequence_in_64_frames() {
        let v = counting_video(64, 8, 8);
        let p = SamplingProtocol {
            resize: None,
            crop: None,
            ..SamplingProtocol::ucf101_style(SamplingMode::Train)
        };
        let mut seen_zero = false;
        for seed in 0..200 {
            let s = sample_clip(&v, &p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let start = s.frame_indices[0];
            assert!(start <= 3);
            assert!(s.frame_indices.windows(2).all(|w| w[1] == w[0] + 4));
            if start == 0 {
                seen_zero = true;
                assert_eq!(*s.frame_indices.last().unwrap(), 60);
            }
        }
        assert!(seen_zero);
    }

    #[test]
    fn short_videos_wrap() {
        let v = counting_video(10, 4, 4);
        let p = SamplingProtocol::synthetic(SamplingMode::Validation, 16);
        let s = sample_clip(&v, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.frame_indices[..12], [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1]);
    }

    #[test]
    fn empty_video_is_data_error() {
        let v = Video {
            id: "e".into(),
            label: 0,
            frames: vec![],
            masks: None,
        };
        let p = SamplingProtocol::synthetic(SamplingMode::Train, 4);
        let err = sample_clip(&v, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn validation_is_deterministic() {
        let v = counting_video(80, 300, 400);
        let p = SamplingProtocol::ucf101_style(SamplingMode::Validation);
        let a = sample_clip(&v, &p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_clip(&v, &p, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.augmentation.resized, (256, 341));
        assert_eq!(a.augmentation.crop, (16, 58, 224, 224));
        assert!(!a.augmentation.flipped);
        assert_eq!(a.clip.height(), 224);
        assert_eq!(a.frame_indices[0], (80 - 61) / 2);
    }

    #[test]
    fn train_resize_stays_in_range() {
        let v = counting_video(20, 240, 320);
        let p = SamplingProtocol::ucf101_style(SamplingMode::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = draw_augmentation((240, 320), &p, &mut rng).unwrap();
            assert!((256..=320).contains(&a.resized.0));
            assert!(a.crop.0 + 224 <= a.resized.0 && a.crop.1 + 224 <= a.resized.1);
        }
        let s = sample_clip(&v, &p, &mut rng).unwrap();
        assert_eq!((s.clip.height(), s.clip.width()), (224, 224));
    }

    #[test]
    fn ssv2_never_flips() {
        let p = SamplingProtocol::ssv2_style(SamplingMode::Train);
        assert_eq!(p.stride, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            assert!(!draw_augmentation((256, 256), &p, &mut rng).unwrap().flipped);
        }
    }

    fn iou(a: &[f32], b: &[f32]) -> f64 {
        let inter = a
            .iter()
            .zip(b)
            .filter(|(x, y)| **x > 0.5 && **y > 0.5)
            .count();
        let union = a
            .iter()
            .zip(b)
            .filter(|(x, y)| **x > 0.5 || **y > 0.5)
            .count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// A video whose pixels are its own mask: augmenting the frames gives
    /// the mask of the augmented clip, to compare against the carried mask.
    fn mask_painted(seed: u64) -> Video {
        let spec = SyntheticSpec {
            train_videos: 4,
            val_videos: 0,
            seed,
            ..SyntheticSpec::default()
        };
        let mut v = render_video(&spec, 1, (seed % 4) as usize).unwrap();
        let stack = v.masks.clone().unwrap();
        for (t, frame) in v.frames.iter_mut().enumerate() {
            for (i, px) in frame.pixels_mut().enumerate() {
                let on = stack.per_frame[t][0][i] * 255;
                *px = image::Rgb([on, on, on]);
            }
        }
        v
    }

    #[test]
    fn flipped_mask_matches_mask_of_flipped_frames() {
        let v = mask_painted(3);
        let p = SamplingProtocol {
            flip_prob: 1.0,
            crop: Some(48),
            ..SamplingProtocol::synthetic(SamplingMode::Train, 16)
        };
        let s = sample_clip(&v, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(s.augmentation.flipped);
        let mask = s.mask.unwrap();
        for t in 0..16 {
            let painted: Vec<f32> = s.clip.frames().slab(t)[..48 * 48].to_vec();
            assert_eq!(iou(&painted, mask.frame(t)), 1.0);
        }
    }

    #[test]
    fn mask_stays_binary_under_resize() {
        let mut v = counting_video(4, 40, 40);
        v.masks = Some(MaskStack {
            height: 40,
            width: 40,
            per_frame: (0..4)
                .map(|_| vec![(0..1600).map(|i| u8::from(i % 40 < 20)).collect()])
                .collect(),
            source: MaskSource::Synthetic,
        });
        let p = SamplingProtocol {
            resize: Some([50, 60]),
            crop: Some(48),
            ..SamplingProtocol::ucf101_style(SamplingMode::Train)
        };
        let s = sample_clip(&v, &p, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let m = s.mask.unwrap();
        assert!(m.values().data().iter().all(|&x| x == 0.0 || x == 1.0));
        assert_eq!(m.dims(), (16, 48, 48));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn augmentation_keeps_masks_aligned(seed in 0u64..1000, crop in 24u32..=64, flip in any::<bool>()) {
            let v = mask_painted(seed);
            let p = SamplingProtocol {
                flip_prob: if flip { 1.0 } else { 0.0 },
                crop: Some(crop),
                ..SamplingProtocol::synthetic(SamplingMode::Train, 16)
            };
            let s = sample_clip(&v, &p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mask = s.mask.unwrap();
            let plane = (crop * crop) as usize;
            for t in 0..16 {
                prop_assert_eq!(iou(&s.clip.frames().slab(t)[..plane], mask.frame(t)), 1.0);
            }
        }
    }
}
