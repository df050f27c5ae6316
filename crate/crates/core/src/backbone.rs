//! Video backbones cut into a feature extractor and a perception branch.
//!
//! Backbones are stacks of 3D conv blocks registered by name. A
//! [`SplitDescriptor`] such as `desk3d@3` names a backbone and the number of
//! blocks that go to the extractor; the rest, plus a pooled linear classifier,
//! form the perception branch.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::conv::{ConvGeometry, PadMode};
use crate::error::{Error, Result};
use crate::nn::{Bound, ConvBlock, Linear, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// An RGB clip, frames laid out `T × 3 × H × W`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor<f32>,
    pub label: usize,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>, label: usize) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[0] == 0 || s[1] != 3 || s[2] == 0 || s[3] == 0 {
            return Err(Error::data(format!(
                "clip must be T x 3 x H x W, got {s:?}"
            )));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { frames, label })
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// `[3, T, H, W]` view used by the convolution layout.
    pub fn channels_first(&self) -> Vec<f32> {
        let [t, c, h, w] = [self.num_frames(), 3, self.height(), self.width()];
        let plane = h * w;
        let src = self.frames.data();
        let mut out = vec![0.0; src.len()];
        for ti in 0..t {
            for ci in 0..c {
                let s = (ti * c + ci) * plane;
                let d = (ci * t + ti) * plane;
                out[d..d + plane].copy_from_slice(&src[s..s + plane]);
            }
        }
        out
    }
}

/// Pixel intensities in `[0, 1]` enter the network as `(v - INPUT_MEAN) / INPUT_STD`.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Stack clips into a normalized `[B, 3, T, H, W]` batch.
pub fn batch_clips<T: Scalar>(clips: &[&VideoClip]) -> Result<Tensor<T>> {
    let first = clips.first().ok_or_else(|| Error::data("empty batch"))?;
    let shape = first.frames.shape().to_vec();
    let mut data = Vec::with_capacity(clips.len() * first.frames.numel());
    for c in clips {
        if c.frames.shape() != shape {
            return Err(Error::Shape(format!(
                "batch mixes clip shapes {shape:?} and {:?}",
                c.frames.shape()
            )));
        }
        data.extend(
            c.channels_first()
                .into_iter()
                .map(|v| T::from_f64((v as f64 - INPUT_MEAN) / INPUT_STD)),
        );
    }
    Tensor::from_vec(&[clips.len(), 3, shape[0], shape[2], shape[3]], data)
}

/// Feature tensor of one clip. Stored channel-major (`C × T × H × W`);
/// [`FeatureMap::at`] addresses it in `(t, c, h, w)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    values: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn from_channel_major(values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "feature map must be C x T x H x W, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    /// `(T, C, H, W)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[1], s[0], s[2], s[3])
    }

    pub fn at(&self, t: usize, c: usize, h: usize, w: usize) -> T {
        let s = self.values.shape();
        self.values.data()[((c * s[1] + t) * s[2] + h) * s[3] + w]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// As a batch of one: `[1, C, T, H, W]`.
    pub fn to_batch(&self) -> Tensor<T> {
        let mut shape = vec![1];
        shape.extend(self.values.shape());
        self.values.clone().reshape(&shape).expect("same numel")
    }

    pub fn is_finite(&self) -> bool {
        self.values.all_finite()
    }
}

/// A probability vector over the classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub probs: Vec<f64>,
}

impl ClassScores {
    pub fn argmax(&self) -> usize {
        top_k(&self.probs, 1)[0]
    }

    pub fn top_k(&self, k: usize) -> Vec<usize> {
        top_k(&self.probs, k)
    }
}

/// Indices of the `k` largest entries, ties broken by lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub spatial_stride: usize,
    pub kernel: [usize; 3],
}

/// A registered backbone topology.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneArch {
    pub name: &'static str,
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub default_cut: usize,
}

const fn block(channels: usize, spatial_stride: usize) -> BlockSpec {
    BlockSpec {
        channels,
        spatial_stride,
        kernel: [3, 3, 3],
    }
}

pub const REGISTERED_BACKBONES: &[&str] = &["desk3d", "x3d-lite"];

impl BackboneArch {
    pub fn lookup(name: &str) -> Result<Self> {
        match name {
            // 1/8 resolution after block 3, 1/16 at the head; time is never strided.
            "desk3d" => Ok(Self {
                name: "desk3d",
                in_channels: 3,
                blocks: vec![
                    block(16, 2),
                    block(16, 2),
                    block(32, 2),
                    block(32, 1),
                    block(64, 2),
                    block(64, 1),
                ],
                default_cut: 3,
            }),
            // X3D-style stage strides: 1/16 after the fourth block, 14x14 maps at 224x224.
            "x3d-lite" => Ok(Self {
                name: "x3d-lite",
                in_channels: 3,
                blocks: vec![
                    block(12, 2),
                    block(24, 2),
                    block(48, 2),
                    block(96, 2),
                    block(96, 1),
                    block(192, 2),
                ],
                default_cut: 4,
            }),
            other => Err(Error::config(format!(
                "unknown backbone {other:?} (registered: {REGISTERED_BACKBONES:?})"
            ))),
        }
    }

    fn geometries(&self) -> Vec<ConvGeometry> {
        let mut cin = self.in_channels;
        self.blocks
            .iter()
            .map(|b| {
                let g = ConvGeometry::new(
                    cin,
                    b.channels,
                    b.kernel,
                    [1, b.spatial_stride, b.spatial_stride],
                    PadMode::Zeros,
                );
                cin = b.channels;
                g
            })
            .collect()
    }
}

/// `<backbone>@<blocks in extractor>`, e.g. `desk3d@3`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub backbone: String,
    pub cut: usize,
}

impl SplitDescriptor {
    pub fn new(backbone: impl Into<String>, cut: usize) -> Self {
        Self {
            backbone: backbone.into(),
            cut,
        }
    }

    pub fn default_for(backbone: &str) -> Result<Self> {
        let arch = BackboneArch::lookup(backbone)?;
        Ok(Self::new(backbone, arch.default_cut))
    }
}

impl fmt::Display for SplitDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.backbone, self.cut)
    }
}

impl FromStr for SplitDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('@') {
            None => Self::default_for(s),
            Some((name, cut)) => {
                let cut = cut
                    .parse()
                    .map_err(|_| Error::config(format!("bad cut index in {s:?}")))?;
                Ok(Self::new(name, cut))
            }
        }
    }
}

/// The extractor `E`: the first `cut` blocks.
#[derive(Clone, Debug)]
pub struct Extractor {
    pub blocks: Vec<ConvBlock>,
    pub out_channels: usize,
    /// Total spatial downsampling factor.
    pub spatial_factor: usize,
}

impl Extractor {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 5 || s[1] != self.blocks[0].conv.geometry.in_channels {
            return Err(Error::config(format!(
                "extractor expects [B, {}, T, H, W], got {s:?}",
                self.blocks[0].conv.geometry.in_channels
            )));
        }
        if !s[3].is_multiple_of(self.spatial_factor) || !s[4].is_multiple_of(self.spatial_factor) {
            return Err(Error::config(format!(
                "frame size {}x{} is not a multiple of the extractor stride {}",
                s[3], s[4], self.spatial_factor
            )));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, p, h)?;
        }
        Ok(h)
    }
}

/// The perception branch `P`: remaining blocks, global pooling, linear, softmax.
#[derive(Clone, Debug)]
pub struct Perception {
    pub blocks: Vec<ConvBlock>,
    pub head: Linear,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Perception {
    /// Returns class probabilities `[B, L]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, h2: Var) -> Result<Var> {
        let s = g.shape(h2);
        if s.len() != 5 || s[1] != self.in_channels {
            return Err(Error::config(format!(
                "perception expects {} channels, got {s:?}",
                self.in_channels
            )));
        }
        let mut h = h2;
        for b in &self.blocks {
            h = b.forward(g, p, h)?;
        }
        let pooled = g.global_avg_pool(h);
        let logits = self.head.forward(g, p, pooled)?;
        g.softmax(logits)
    }
}

#[derive(Clone, Debug)]
pub struct BackboneSplit {
    pub descriptor: SplitDescriptor,
    pub extractor: Extractor,
    pub perception: Perception,
}

/// Build the two halves of a registered backbone, registering parameters in
/// `store` in network order (extractor blocks, perception blocks, head).
pub fn split_backbone<T: Scalar, R: Rng + ?Sized>(
    descriptor: &SplitDescriptor,
    num_classes: usize,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<BackboneSplit> {
    let arch = BackboneArch::lookup(&descriptor.backbone)?;
    if descriptor.cut == 0 || descriptor.cut >= arch.blocks.len() {
        return Err(Error::config(format!(
            "cut {} is outside 1..{} for {}",
            descriptor.cut,
            arch.blocks.len(),
            arch.name
        )));
    }
    if num_classes == 0 {
        return Err(Error::config("at least one class is required"));
    }
    let geos = arch.geometries();
    let blocks: Vec<ConvBlock> = geos
        .iter()
        .enumerate()
        .map(|(i, g)| ConvBlock::new(store, &format!("backbone.block{}", i + 1), *g, rng))
        .collect();
    let last = arch.blocks.last().expect("non-empty").channels;
    let head = Linear::new(store, "backbone.head", last, num_classes, 0.01, rng);
    let mut blocks = blocks.into_iter();
    let extractor_blocks: Vec<ConvBlock> = blocks.by_ref().take(descriptor.cut).collect();
    let spatial_factor = arch.blocks[..descriptor.cut]
        .iter()
        .map(|b| b.spatial_stride)
        .product();
    let c = arch.blocks[descriptor.cut - 1].channels;
    Ok(BackboneSplit {
        descriptor: descriptor.clone(),
        extractor: Extractor {
            blocks: extractor_blocks,
            out_channels: c,
            spatial_factor,
        },
        perception: Perception {
            blocks: blocks.collect(),
            head,
            in_channels: c,
            num_classes,
        },
    })
}

/// The same backbone as one uncut classifier.
#[derive(Clone, Debug)]
pub struct FullBackbone {
    pub blocks: Vec<ConvBlock>,
    pub head: Linear,
}

impl FullBackbone {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        backbone: &str,
        num_classes: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let arch = BackboneArch::lookup(backbone)?;
        let blocks = arch
            .geometries()
            .iter()
            .enumerate()
            .map(|(i, g)| ConvBlock::new(store, &format!("backbone.block{}", i + 1), *g, rng))
            .collect();
        let last = arch.blocks.last().expect("non-empty").channels;
        let head = Linear::new(store, "backbone.head", last, num_classes, 0.01, rng);
        Ok(Self { blocks, head })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, p, h)?;
        }
        let pooled = g.global_avg_pool(h);
        let logits = self.head.forward(g, p, pooled)?;
        g.softmax(logits)
    }
}

impl BackboneSplit {
    /// `h₁ = E(x)` for one clip in evaluation mode.
    pub fn extract(&self, store: &ParamStore<f32>, clip: &VideoClip) -> Result<FeatureMap<f32>> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let x = g.constant(batch_clips(&[clip])?);
        let h = self.extractor.forward(&mut g, &p, x)?;
        let s = g.shape(h)[1..].to_vec();
        FeatureMap::from_channel_major(g.value(h).clone().reshape(&s)?)
    }

    /// `y_p = P(h₂)` for one clip in evaluation mode.
    pub fn perceive(&self, store: &ParamStore<f32>, h2: &FeatureMap<f32>) -> Result<ClassScores> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let x = g.constant(h2.to_batch());
        let probs = self.perception.forward(&mut g, &p, x)?;
        Ok(ClassScores {
            probs: g.value(probs).data().iter().map(|&v| v as f64).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(t: usize, h: usize, w: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * 3 * h * w).map(|_| rng.gen::<f32>()).collect();
        VideoClip::new(Tensor::from_vec(&[t, 3, h, w], data).unwrap(), 0).unwrap()
    }

    fn desk(num_classes: usize, seed: u64) -> (ParamStore<f32>, BackboneSplit) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split = split_backbone(
            &"desk3d@3".parse().unwrap(),
            num_classes,
            &mut store,
            &mut rng,
        )
        .unwrap();
        (store, split)
    }

    #[test]
    fn desk_extractor_shape() {
        let (store, split) = desk(4, 0);
        let h1 = split.extract(&store, &clip(16, 64, 64, 1)).unwrap();
        assert_eq!(h1.dims(), (16, 32, 8, 8));
        assert!(h1.is_finite());
    }

    #[test]
    fn full_resolution_backbone_gives_14x14() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let split = split_backbone(&"x3d-lite".parse().unwrap(), 4, &mut store, &mut rng).unwrap();
        let h1 = split.extract(&store, &clip(16, 224, 224, 2)).unwrap();
        let (t, _, h, w) = h1.dims();
        assert_eq!((t, h, w), (16, 14, 14));
    }

    #[test]
    fn zero_clip_is_finite() {
        let (store, split) = desk(4, 0);
        let zero = VideoClip::new(Tensor::zeros(&[16, 3, 64, 64]), 0).unwrap();
        assert!(split.extract(&store, &zero).unwrap().is_finite());
    }

    #[test]
    fn single_class_is_certain() {
        let (store, split) = desk(1, 0);
        let h1 = split.extract(&store, &clip(4, 32, 32, 3)).unwrap();
        let s = split.perceive(&store, &h1).unwrap();
        assert_eq!(s.probs.len(), 1);
        assert!((s.probs[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn untrained_perception_is_near_uniform() {
        // 100 seeds of uniform random h2 with fresh parameters.
        let mut worst = 0.0f64;
        for seed in 0..100 {
            let (store, split) = desk(4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let data = (0..32 * 4 * 8 * 8).map(|_| rng.gen::<f32>()).collect();
            let h2 =
                FeatureMap::from_channel_major(Tensor::from_vec(&[32, 4, 8, 8], data).unwrap())
                    .unwrap();
            let s = split.perceive(&store, &h2).unwrap();
            assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            for p in &s.probs {
                worst = worst.max((p - 0.25).abs());
            }
        }
        assert!(worst < 0.15, "max deviation from uniform {worst}");
    }

    #[test]
    fn split_partitions_blocks() {
        let (_, split) = desk(4, 0);
        assert_eq!(split.extractor.blocks.len(), 3);
        assert_eq!(split.perception.blocks.len(), 3);
        assert_eq!(split.extractor.spatial_factor, 8);
        assert_eq!(split.extractor.out_channels, 32);
    }

    #[test]
    fn illegal_cuts_and_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in ["desk3d@0", "desk3d@6", "desk3d@9", "resnet@2"] {
            let d: SplitDescriptor = match d.parse() {
                Ok(d) => d,
                Err(e) => {
                    assert!(matches!(e, Error::Config(_)));
                    continue;
                }
            };
            let err = split_backbone(&d, 4, &mut store, &mut rng).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{d}: {err}");
        }
    }

    #[test]
    fn mismatched_clip_is_config_error() {
        let (store, split) = desk(4, 0);
        let err = split.extract(&store, &clip(4, 60, 60, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn bypass_equals_unsplit_network() {
        let (store, split) = desk(4, 11);
        let mut full_store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let full = FullBackbone::build("desk3d", 4, &mut full_store, &mut rng).unwrap();
        let c = clip(8, 32, 32, 5);

        let mut g = Graph::inference();
        let p = full_store.bind(&mut g);
        let x = g.constant(batch_clips(&[&c]).unwrap());
        let probs = full.forward(&mut g, &p, x).unwrap();
        let reference = g.value(probs).clone();

        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let x = g.constant(batch_clips(&[&c]).unwrap());
        let h1 = split.extractor.forward(&mut g, &p, x).unwrap();
        let mut ms = g.shape(h1).to_vec();
        ms[1] = 1;
        let ones = g.constant(Tensor::ones(&ms));
        let h2 = g.mul_map(h1, ones).unwrap();
        let probs = split.perception.forward(&mut g, &p, h2).unwrap();
        assert!(g.value(probs).max_abs_diff(&reference) <= 1e-6);
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let (store, split) = desk(4, 3);
        let c = clip(4, 32, 32, 9);
        let a = split.extract(&store, &c).unwrap();
        let b = split.extract(&store, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clip_validation() {
        assert!(VideoClip::new(Tensor::zeros(&[0, 3, 4, 4]), 0).is_err());
        assert!(VideoClip::new(Tensor::zeros(&[2, 1, 4, 4]), 0).is_err());
        assert!(VideoClip::new(Tensor::full(&[1, 3, 2, 2], 1.5), 0).is_err());
    }

    #[test]
    fn top_k_orders_by_probability() {
        assert_eq!(top_k(&[0.1, 0.5, 0.2, 0.2], 3), vec![1, 2, 3]);
        assert_eq!(top_k(&[0.1], 5), vec![0]);
    }
}
