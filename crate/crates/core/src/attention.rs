//! The attention branch: map heads, auxiliary classifier, and the two ways
//! maps are applied to extractor features (single-map weighting and
//! multi-head weighting followed by a pointwise channel mixer).

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{ClassScores, FeatureMap};
use crate::conv::{ConvGeometry, PadMode};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv3d, ParamStore, ResBlock};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadRole {
    Unconstrained,
    Object,
    Background,
}

impl HeadRole {
    pub fn label(self) -> &'static str {
        match self {
            HeadRole::Unconstrained => "M_u",
            HeadRole::Object => "M_o",
            HeadRole::Background => "M_b",
        }
    }

    pub const TABLE_ORDER: [HeadRole; 3] = [
        HeadRole::Unconstrained,
        HeadRole::Object,
        HeadRole::Background,
    ];
}

impl fmt::Display for HeadRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Head layout for a branch with `heads` maps. A single head is the
/// unconstrained ABN map unless it is trained against object masks.
pub fn head_roles(heads: usize, mask_supervised: bool) -> Result<Vec<HeadRole>> {
    match (heads, mask_supervised) {
        (1, false) => Ok(vec![HeadRole::Unconstrained]),
        (1, true) => Ok(vec![HeadRole::Object]),
        (3, _) => Ok(HeadRole::TABLE_ORDER.to_vec()),
        (n, _) => Err(Error::config(format!(
            "attention heads must be 1 or 3, got {n}"
        ))),
    }
}

/// Maps of one clip, `C′ × T × 1 × H × W`, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMapSet {
    maps: Tensor<f32>,
    roles: Vec<HeadRole>,
}

impl AttentionMapSet {
    pub fn new(maps: Tensor<f32>, roles: Vec<HeadRole>) -> Result<Self> {
        let s = maps.shape();
        if s.len() != 5 || s[2] != 1 || s[0] != roles.len() {
            return Err(Error::Shape(format!(
                "map set must be C' x T x 1 x H x W with {} heads, got {s:?}",
                roles.len()
            )));
        }
        let ok_roles = roles == [HeadRole::Unconstrained]
            || roles == [HeadRole::Object]
            || roles == HeadRole::TABLE_ORDER;
        if !ok_roles {
            return Err(Error::config(format!("invalid head layout {roles:?}")));
        }
        if let Some(v) = maps.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::data(format!("attention value {v} outside [0, 1]")));
        }
        Ok(Self { maps, roles })
    }

    pub fn roles(&self) -> &[HeadRole] {
        &self.roles
    }

    pub fn num_heads(&self) -> usize {
        self.roles.len()
    }

    /// `(T, H, W)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.maps.shape();
        (s[1], s[3], s[4])
    }

    pub fn maps(&self) -> &Tensor<f32> {
        &self.maps
    }

    pub fn head_index(&self, role: HeadRole) -> Option<usize> {
        self.roles.iter().position(|&r| r == role)
    }

    /// One head as a `T × H × W` tensor.
    pub fn head(&self, index: usize) -> Tensor<f32> {
        let (t, h, w) = self.dims();
        Tensor::from_vec(&[t, h, w], self.maps.slab(index).to_vec()).expect("slab size")
    }

    pub fn role(&self, role: HeadRole) -> Option<Tensor<f32>> {
        self.head_index(role).map(|i| self.head(i))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBranchOutput {
    pub map_set: AttentionMapSet,
    pub aux_scores: ClassScores,
    pub pc_feature: Vec<f32>,
}

/// Graph handles produced by [`AttentionBranch::forward`].
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    /// `[B, C′, T, H, W]`
    pub maps: Var,
    /// `[B, L]`
    pub aux_probs: Var,
    /// `[B, C]`, pooled trunk output
    pub pc_feature: Var,
}

/// Three residual blocks, then a pointwise map head (sigmoid) and a
/// pointwise class head (global average pooling, softmax).
#[derive(Clone, Debug)]
pub struct AttentionBranch {
    pub trunk: Vec<ResBlock>,
    pub map_head: Conv3d,
    pub aux_head: Conv3d,
    pub channels: usize,
    pub roles: Vec<HeadRole>,
}

pub const TRUNK_BLOCKS: usize = 3;

impl AttentionBranch {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        channels: usize,
        num_classes: usize,
        roles: Vec<HeadRole>,
        trunk_kernel: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let geo = ConvGeometry::new(
            channels,
            channels,
            trunk_kernel,
            [1, 1, 1],
            PadMode::Replicate,
        );
        let trunk = (0..TRUNK_BLOCKS)
            .map(|i| ResBlock::new(store, &format!("attention.res{}", i + 1), geo, rng))
            .collect();
        let map_head = Conv3d::new(
            store,
            "attention.map_head",
            ConvGeometry::pointwise(channels, roles.len()),
            rng,
        );
        let aux_head = Conv3d::new(
            store,
            "attention.aux_head",
            ConvGeometry::pointwise(channels, num_classes),
            rng,
        );
        Self {
            trunk,
            map_head,
            aux_head,
            channels,
            roles,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.roles.len()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, h1: Var) -> Result<BranchVars> {
        let s = g.shape(h1);
        if s.len() != 5 || s[1] != self.channels {
            return Err(Error::config(format!(
                "attention branch expects {} channels, got {s:?}",
                self.channels
            )));
        }
        let mut h = h1;
        for block in &self.trunk {
            h = block.forward(g, p, h)?;
        }
        let pc_feature = g.global_avg_pool(h);
        let logits = self.map_head.forward(g, p, h)?;
        let maps = g.sigmoid(logits);
        let class_map = self.aux_head.forward(g, p, h)?;
        let pooled = g.global_avg_pool(class_map);
        let aux_probs = g.softmax(pooled)?;
        Ok(BranchVars {
            maps,
            aux_probs,
            pc_feature,
        })
    }

    /// Evaluation-mode pass for one clip's features.
    pub fn attend(
        &self,
        store: &ParamStore<f32>,
        h1: &FeatureMap<f32>,
    ) -> Result<AttentionBranchOutput> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let x = g.constant(h1.to_batch());
        let out = self.forward(&mut g, &p, x)?;
        Ok(AttentionBranchOutput {
            map_set: map_set_from_batch(g.value(out.maps), 0, &self.roles)?,
            aux_scores: ClassScores {
                probs: g
                    .value(out.aux_probs)
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
            },
            pc_feature: g.value(out.pc_feature).data().to_vec(),
        })
    }
}

/// Slice sample `b` of a `[B, C′, T, H, W]` map tensor.
pub fn map_set_from_batch<T: Scalar>(
    maps: &Tensor<T>,
    b: usize,
    roles: &[HeadRole],
) -> Result<AttentionMapSet> {
    let s = maps.shape();
    let data = maps.slab(b).iter().map(|v| v.to_f64() as f32).collect();
    AttentionMapSet::new(
        Tensor::from_vec(&[s[1], s[2], 1, s[3], s[4]], data)?,
        roles.to_vec(),
    )
}

/// Pointwise conv mapping `C·C′` concatenated channels back to `C`.
#[derive(Clone, Debug)]
pub struct Mixer {
    pub conv: Conv3d,
    pub channels: usize,
    pub heads: usize,
}

impl Mixer {
    /// Starts as the average over heads: weight `1/C′` from each head's copy
    /// of channel `c` to output channel `c`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv3d::new(
            store,
            "attention.mixer",
            ConvGeometry::pointwise(channels * heads, channels),
            rng,
        );
        *store.get_mut(conv.weight) = averaging_mixer_weight(channels, heads);
        Self {
            conv,
            channels,
            heads,
        }
    }
}

/// `[C, C·C′, 1, 1, 1]` weight selecting and averaging channel `c` across heads.
pub fn averaging_mixer_weight<T: Scalar>(channels: usize, heads: usize) -> Tensor<T> {
    let k = channels * heads;
    let mut w = vec![T::ZERO; channels * k];
    let share = T::ONE / T::from_f64(heads as f64);
    for c in 0..channels {
        for h in 0..heads {
            w[c * k + h * channels + c] = share;
        }
    }
    Tensor::from_vec(&[channels, k, 1, 1, 1], w).expect("mixer shape")
}

/// `h₂[t, c] = h₁[t, c] · M[t]`
pub fn apply_single<T: Scalar>(g: &mut Graph<T>, h1: Var, map: Var) -> Result<Var> {
    if g.shape(map).get(1) != Some(&1) {
        return Err(Error::Shape(format!(
            "single-map weighting needs one head, got {:?}",
            g.shape(map)
        )));
    }
    g.mul_map(h1, map)
}

/// Weight `h₁` by every head, concatenate along channels (head-major), and
/// mix back to `C` channels with the pointwise `mixer` conv.
pub fn apply_multihead<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    h1: Var,
    maps: Var,
    mixer: &Conv3d,
) -> Result<Var> {
    let heads = g.shape(maps)[1];
    let channels = g.shape(h1)[1];
    let geo = mixer.geometry;
    if geo.in_channels != channels * heads || geo.out_channels != channels || !geo.is_pointwise() {
        return Err(Error::config(format!(
            "mixer {}->{} does not fit {channels} channels x {heads} heads",
            geo.in_channels, geo.out_channels
        )));
    }
    let mut weighted = Vec::with_capacity(heads);
    for head in 0..heads {
        let m = g.select_channel(maps, head)?;
        weighted.push(g.mul_map(h1, m)?);
    }
    let cat = g.concat_channels(&weighted)?;
    mixer.forward(g, p, cat)
}

// ---- attention raster files ------------------------------------------

const ATTN_MAGIC: &[u8; 4] = b"ATTN";

/// Write one head (`T × H × W`) as a 16-byte header (`ATTN`, u32 T, H, W)
/// followed by little-endian f32 values, frame after frame.
pub fn write_attention_raster(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("raster must be T x H x W, got {s:?}")));
    }
    let mut buf = Vec::with_capacity(16 + 4 * map.numel());
    buf.extend_from_slice(ATTN_MAGIC);
    for &d in s {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in map.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_attention_raster(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_attention_raster(&bytes)
}

pub fn decode_attention_raster(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 16 || &bytes[..4] != ATTN_MAGIC {
        return Err(Error::data("not an ATTN raster"));
    }
    let dim = |i: usize| {
        u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let shape = [dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    if bytes.len() != 16 + 4 * n {
        return Err(Error::data(format!(
            "ATTN raster {shape:?} needs {} payload bytes, found {}",
            4 * n,
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::from_vec(&shape, data)
}
