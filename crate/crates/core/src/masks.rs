//! Instance masks: union over instances, temporal alignment with sampled
//! frames, area-average downsampling to the attention grid, inversion, and
//! the on-disk mask directory format.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    ExternalFile,
    Synthetic,
}

/// Per-frame binary instance masks; frame `t` has `N(t) ≥ 0` instances of
/// `height × width` bytes in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStack {
    pub height: usize,
    pub width: usize,
    pub per_frame: Vec<Vec<Vec<u8>>>,
    pub source: MaskSource,
}

impl MaskStack {
    pub fn num_frames(&self) -> usize {
        self.per_frame.len()
    }

    pub fn instance_counts(&self) -> Vec<usize> {
        self.per_frame.iter().map(Vec::len).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let plane = self.height * self.width;
        for (t, frame) in self.per_frame.iter().enumerate() {
            for (i, inst) in frame.iter().enumerate() {
                if inst.len() != plane {
                    return Err(Error::data(format!(
                        "frame {t} instance {i}: {} values for a {}x{} mask",
                        inst.len(),
                        self.height,
                        self.width
                    )));
                }
                if let Some(v) = inst.iter().find(|&&v| v > 1) {
                    return Err(Error::data(format!(
                        "frame {t} instance {i}: mask value {v} is not binary"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Single-channel masks `T × 1 × H × W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedMask {
    values: Tensor<f32>,
    pub resolution_note: String,
}

impl AggregatedMask {
    pub fn new(values: Tensor<f32>, resolution_note: impl Into<String>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!(
                "aggregated mask must be T x 1 x H x W, got {s:?}"
            )));
        }
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::data(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self {
            values,
            resolution_note: resolution_note.into(),
        })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    /// `(T, H, W)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[2], s[3])
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.values.slab(t)
    }

    pub fn mean(&self) -> f64 {
        self.values.data().iter().map(|&v| v as f64).sum::<f64>() / self.values.numel() as f64
    }
}

/// Pixelwise logical OR over each frame's instances. Frames without
/// instances give all-zero masks.
pub fn aggregate(stack: &MaskStack) -> Result<AggregatedMask> {
    stack.validate()?;
    let plane = stack.height * stack.width;
    let mut out = vec![0.0f32; stack.num_frames() * plane];
    for (t, frame) in stack.per_frame.iter().enumerate() {
        let dst = &mut out[t * plane..(t + 1) * plane];
        for inst in frame {
            for (d, &v) in dst.iter_mut().zip(inst) {
                if v == 1 {
                    *d = 1.0;
                }
            }
        }
    }
    AggregatedMask::new(
        Tensor::from_vec(&[stack.num_frames(), 1, stack.height, stack.width], out)?,
        format!("native {}x{}", stack.height, stack.width),
    )
}

/// Pick the source frames a clip was sampled from, in clip order.
pub fn align(agg: &AggregatedMask, frame_indices: &[usize]) -> Result<AggregatedMask> {
    let (t, h, w) = agg.dims();
    let mut out = Vec::with_capacity(frame_indices.len() * h * w);
    for &i in frame_indices {
        if i >= t {
            return Err(Error::data(format!(
                "no mask for sampled frame {i} (masks cover {t} frames)"
            )));
        }
        out.extend_from_slice(agg.frame(i));
    }
    AggregatedMask::new(
        Tensor::from_vec(&[frame_indices.len(), 1, h, w], out)?,
        agg.resolution_note.clone(),
    )
}

/// Overlap fractions between `target` equal cells and `source` unit pixels:
/// `weights[i][j]` is the share of target cell `i` covered by source pixel `j`.
fn area_weights(source: usize, target: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = source as f64 / target as f64;
    (0..target)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let mut row = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < source {
                let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                if overlap > 0.0 {
                    row.push((j, overlap / scale));
                }
                j += 1;
            }
            row
        })
        .collect()
}

/// Area-average each frame to `height × width`. Values become soft
/// coverage fractions.
pub fn resample(agg: &AggregatedMask, height: usize, width: usize) -> Result<AggregatedMask> {
    let (t, sh, sw) = agg.dims();
    if height == 0 || width == 0 {
        return Err(Error::Shape("resample target must be non-empty".into()));
    }
    let wy = area_weights(sh, height);
    let wx = area_weights(sw, width);
    let mut out = Vec::with_capacity(t * height * width);
    let mut rows = vec![0.0f64; height * sw];
    for f in 0..t {
        let src = agg.frame(f);
        rows.iter_mut().for_each(|v| *v = 0.0);
        for (i, ws) in wy.iter().enumerate() {
            for &(j, a) in ws {
                for x in 0..sw {
                    rows[i * sw + x] += a * src[j * sw + x] as f64;
                }
            }
        }
        for i in 0..height {
            for ws in &wx {
                let v: f64 = ws.iter().map(|&(j, a)| a * rows[i * sw + j]).sum();
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    AggregatedMask::new(
        Tensor::from_vec(&[t, 1, height, width], out)?,
        format!("area-average {sh}x{sw} -> {height}x{width}"),
    )
}

/// Temporal alignment to `frame_indices`, then area averaging to `(T, H, W)`.
pub fn align_and_resample(
    agg: &AggregatedMask,
    frame_indices: &[usize],
    target: (usize, usize, usize),
) -> Result<AggregatedMask> {
    if frame_indices.len() != target.0 {
        return Err(Error::Shape(format!(
            "{} frame indices for a target of {} frames",
            frame_indices.len(),
            target.0
        )));
    }
    resample(&align(agg, frame_indices)?, target.1, target.2)
}

/// `1 − m`
pub fn invert(agg: &AggregatedMask) -> AggregatedMask {
    AggregatedMask {
        values: agg.values.map(|v| 1.0 - v),
        resolution_note: agg.resolution_note.clone(),
    }
}

// ---- mask directory layout -------------------------------------------
//
// <root>/masks/<video_id>/<frame:06d>_<instance:03d>.png  (8-bit gray, nonzero = instance)
// <root>/masks/<video_id>/masks.json                      (frame -> instance count)

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub video_id: String,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub instances: BTreeMap<usize, usize>,
}

pub fn mask_dir(root: &Path, video_id: &str) -> PathBuf {
    root.join("masks").join(video_id)
}

pub fn mask_file_name(frame: usize, instance: usize) -> String {
    format!("{frame:06}_{instance:03}.png")
}

pub fn write_mask_dir(root: &Path, video_id: &str, stack: &MaskStack) -> Result<()> {
    stack.validate()?;
    let dir = mask_dir(root, video_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (t, frame) in stack.per_frame.iter().enumerate() {
        for (i, inst) in frame.iter().enumerate() {
            let path = dir.join(mask_file_name(t, i));
            let pixels: Vec<u8> = inst.iter().map(|&v| v * 255).collect();
            let img = image::GrayImage::from_raw(stack.width as u32, stack.height as u32, pixels)
                .expect("buffer matches dimensions");
            img.save(&path)
                .map_err(|e| Error::Image { path, source: e })?;
        }
    }
    let manifest = MaskManifest {
        video_id: video_id.to_string(),
        height: stack.height,
        width: stack.width,
        num_frames: stack.num_frames(),
        instances: stack.instance_counts().into_iter().enumerate().collect(),
    };
    let path = dir.join("masks.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_mask_manifest(root: &Path, video_id: &str) -> Result<MaskManifest> {
    let path = mask_dir(root, video_id).join("masks.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Load a video's masks, checking the manifest against the files present.
pub fn read_mask_dir(root: &Path, video_id: &str) -> Result<MaskStack> {
    let manifest = read_mask_manifest(root, video_id)?;
    let dir = mask_dir(root, video_id);
    let mut per_frame = Vec::with_capacity(manifest.num_frames);
    for t in 0..manifest.num_frames {
        let count = *manifest.instances.get(&t).unwrap_or(&0);
        let mut frame = Vec::with_capacity(count);
        for i in 0..count {
            let path = dir.join(mask_file_name(t, i));
            if !path.exists() {
                return Err(Error::data(format!(
                    "manifest lists {count} instances for frame {t} of {video_id} but {} is missing",
                    path.display()
                )));
            }
            let img = image::open(&path)
                .map_err(|e| Error::Image {
                    path: path.clone(),
                    source: e,
                })?
                .to_luma8();
            if img.width() as usize != manifest.width || img.height() as usize != manifest.height {
                return Err(Error::data(format!(
                    "{} has the wrong size",
                    path.display()
                )));
            }
            frame.push(
                img.into_raw()
                    .into_iter()
                    .map(|v| u8::from(v != 0))
                    .collect(),
            );
        }
        let extra = dir.join(mask_file_name(t, count));
        if extra.exists() {
            return Err(Error::data(format!(
                "{} exists but the manifest lists {count} instances for frame {t}",
                extra.display()
            )));
        }
        per_frame.push(frame);
    }
    Ok(MaskStack {
        height: manifest.height,
        width: manifest.width,
        per_frame,
        source: MaskSource::ExternalFile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack(h: usize, w: usize, per_frame: Vec<Vec<Vec<u8>>>) -> MaskStack {
        MaskStack {
            height: h,
            width: w,
            per_frame,
            source: MaskSource::Synthetic,
        }
    }

    fn agg_from(h: usize, w: usize, frames: &[Vec<f32>]) -> AggregatedMask {
        let data = frames.concat();
        AggregatedMask::new(
            Tensor::from_vec(&[frames.len(), 1, h, w], data).unwrap(),
            "test",
        )
        .unwrap()
    }

    #[test]
    fn or_of_disjoint_masks() {
        let s = stack(2, 2, vec![vec![vec![1, 0, 0, 0], vec![0, 0, 0, 1]]]);
        assert_eq!(
            aggregate(&s).unwrap().values().data(),
            &[1.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn empty_frame_is_zero() {
        let s = stack(2, 2, vec![vec![], vec![vec![1, 1, 1, 1]]]);
        let a = aggregate(&s).unwrap();
        assert_eq!(a.frame(0), &[0.0; 4]);
        assert_eq!(a.frame(1), &[1.0; 4]);
    }

    #[test]
    fn identical_masks_are_idempotent() {
        let m = vec![0, 1, 1, 0];
        let s = stack(2, 2, vec![vec![m.clone(), m.clone()]]);
        assert_eq!(
            aggregate(&s).unwrap().values().data(),
            &[0.0, 1.0, 1.0, 0.0]
        );
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let s = stack(1, 2, vec![vec![vec![0, 2]]]);
        assert!(matches!(aggregate(&s), Err(Error::Data(_))));
    }

    #[test]
    fn block_downsamples_to_one_cell() {
        let mut m = vec![0.0; 16];
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            m[y * 4 + x] = 1.0;
        }
        let r = resample(&agg_from(4, 4, &[m]), 2, 2).unwrap();
        assert_eq!(r.values().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_pixel_is_quarter_cell() {
        let mut m = vec![0.0; 16];
        m[2 * 4 + 3] = 1.0;
        let r = resample(&agg_from(4, 4, &[m]), 2, 2).unwrap();
        assert_eq!(r.values().data(), &[0.0, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn ones_stay_ones_at_any_resolution() {
        let a = agg_from(5, 7, &[vec![1.0; 35]]);
        for (h, w) in [(1, 1), (2, 3), (3, 3), (5, 7), (10, 14)] {
            let r = resample(&a, h, w).unwrap();
            assert!(
                r.values().data().iter().all(|&v| (v - 1.0).abs() < 1e-6),
                "{h}x{w}"
            );
        }
    }

    #[test]
    fn alignment_follows_indices_and_names_missing_frame() {
        let a = agg_from(1, 1, &[vec![0.0], vec![0.5], vec![1.0]]);
        let r = align(&a, &[2, 0, 2]).unwrap();
        assert_eq!(r.values().data(), &[1.0, 0.0, 1.0]);
        match align(&a, &[1, 3]) {
            Err(Error::Data(msg)) => assert!(msg.contains("frame 3"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invert_values() {
        let a = agg_from(1, 2, &[vec![0.0, 0.25]]);
        assert_eq!(invert(&a).values().data(), &[1.0, 0.75]);
        assert_eq!(invert(&invert(&a)), a);
        let z = agg_from(1, 2, &[vec![0.0, 0.0]]);
        assert_eq!(invert(&z).values().data(), &[1.0, 1.0]);
    }

    #[test]
    fn mask_dir_round_trip_and_manifest_checks() {
        let dir = tempfile::tempdir().unwrap();
        let s = MaskStack {
            height: 3,
            width: 2,
            per_frame: vec![
                vec![vec![1, 0, 0, 1, 1, 0]],
                vec![],
                vec![vec![0; 6], vec![1; 6]],
            ],
            source: MaskSource::ExternalFile,
        };
        write_mask_dir(dir.path(), "vid", &s).unwrap();
        let m = read_mask_manifest(dir.path(), "vid").unwrap();
        assert_eq!(
            m.instances.values().copied().collect::<Vec<_>>(),
            vec![1, 0, 2]
        );
        assert_eq!(read_mask_dir(dir.path(), "vid").unwrap(), s);
        std::fs::remove_file(mask_dir(dir.path(), "vid").join(mask_file_name(2, 1))).unwrap();
        assert!(matches!(
            read_mask_dir(dir.path(), "vid"),
            Err(Error::Data(_))
        ));
    }

    fn arb_stack() -> impl Strategy<Value = (usize, usize, Vec<Vec<Vec<u8>>>)> {
        (1usize..5, 1usize..5).prop_flat_map(|(h, w)| {
            let inst = prop::collection::vec(0u8..2, h * w);
            let frame = prop::collection::vec(inst, 0..4);
            (Just(h), Just(w), prop::collection::vec(frame, 1..4))
        })
    }

    proptest! {
        #[test]
        fn or_ignores_instance_order((h, w, frames) in arb_stack(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = aggregate(&stack(h, w, frames.clone())).unwrap();
            let mut shuffled = frames.clone();
            for f in &mut shuffled {
                f.shuffle(&mut rng);
            }
            // duplicating instances must not change the union either
            let mut doubled = frames;
            for f in &mut doubled {
                let copy = f.clone();
                f.extend(copy);
            }
            prop_assert_eq!(&aggregate(&stack(h, w, shuffled)).unwrap().values, &a.values);
            prop_assert_eq!(&aggregate(&stack(h, w, doubled)).unwrap().values, &a.values);
        }

        #[test]
        fn resampling_preserves_mass_when_divisible(
            th in 1usize..4, tw in 1usize..4, fy in 1usize..4, fx in 1usize..4,
            bits in prop::collection::vec(0u8..2, 144),
        ) {
            let (h, w) = (th * fy, tw * fx);
            let frame: Vec<f32> = bits.iter().take(h * w).map(|&b| b as f32).collect();
            let a = agg_from(h, w, &[frame]);
            let r = resample(&a, th, tw).unwrap();
            prop_assert!((a.mean() - r.mean()).abs() < 1e-6);
            prop_assert!(r.values().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn resampling_stays_in_range(h in 1usize..9, w in 1usize..9, th in 1usize..9, tw in 1usize..9,
                                     vals in prop::collection::vec(0.0f32..=1.0, 64)) {
            let a = agg_from(h, w, &[vals[..h * w].to_vec()]);
            let r = resample(&a, th, tw).unwrap();
            prop_assert!(r.values().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn invert_is_involution(vals in prop::collection::vec(0.0f32..=1.0, 1..20)) {
            let n = vals.len();
            let a = agg_from(1, n, &[vals]);
            let back = invert(&invert(&a));
            for (x, y) in back.values().data().iter().zip(a.values().data()) {
                prop_assert!((x - y).abs() <= 1e-7);
            }
        }
    }
}
