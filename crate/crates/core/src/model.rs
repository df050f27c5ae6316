//! The full network: extractor, attention branch, map weighting (single map
//! or multi-head with a mixer), perception branch, and the optional PC
//! centroids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    apply_multihead, apply_single, head_roles, map_set_from_batch, AttentionBranch,
    AttentionMapSet, HeadRole, Mixer,
};
use crate::autograd::{Graph, Var};
use crate::backbone::{
    batch_clips, split_backbone, BackboneSplit, ClassScores, SplitDescriptor, VideoClip,
};
use crate::error::{Error, Result};
use crate::losses::PcState;
use crate::nn::{Bound, ParamId, ParamStore};
use crate::tensor::Scalar;

pub const CENTROIDS_PARAM: &str = "pc.centroids";

/// Architecture choices that fix the parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub split: SplitDescriptor,
    pub num_classes: usize,
    pub heads: usize,
    /// Whether the single map is the object map (`M_o`) rather than `M_u`.
    pub mask_supervised: bool,
    pub pc_enabled: bool,
    pub trunk_kernel: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub backbone: BackboneSplit,
    pub branch: AttentionBranch,
    pub mixer: Option<Mixer>,
    pub centroids: Option<ParamId>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub h1: Var,
    /// `[B, C′, T, H, W]`
    pub maps: Var,
    pub aux_probs: Var,
    pub per_probs: Var,
    /// `[B, C]` pooled attention-trunk features.
    pub pc_feature: Var,
}

/// Evaluation outputs for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub per: ClassScores,
    pub att: ClassScores,
    pub maps: AttentionMapSet,
    pub pc_feature: Vec<f32>,
}

impl Model {
    /// Register every parameter in `store`: backbone, attention branch,
    /// mixer (multi-head only), then the centroids.
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        spec: &ModelSpec,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let roles = head_roles(spec.heads, spec.mask_supervised)?;
        let backbone = split_backbone(&spec.split, spec.num_classes, store, rng)?;
        let channels = backbone.extractor.out_channels;
        let branch = AttentionBranch::new(
            store,
            channels,
            spec.num_classes,
            roles,
            spec.trunk_kernel,
            rng,
        );
        let mixer = (spec.heads > 1).then(|| Mixer::new(store, channels, spec.heads, rng));
        let centroids = if spec.pc_enabled {
            if spec.num_classes < 2 {
                return Err(Error::config("the PC loss needs at least two classes"));
            }
            let pc = PcState::<T>::new(spec.num_classes, channels, rng)?;
            Some(store.add(CENTROIDS_PARAM, pc.centroids))
        } else {
            None
        };
        Ok(Self {
            spec: spec.clone(),
            backbone,
            branch,
            mixer,
            centroids,
        })
    }

    pub fn roles(&self) -> &[HeadRole] {
        &self.branch.roles
    }

    pub fn head_index(&self, role: HeadRole) -> Option<usize> {
        self.roles().iter().position(|&r| r == role)
    }

    /// extract → attend → apply → perceive on a `[B, 3, T, H, W]` batch.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<ForwardVars> {
        let h1 = self.backbone.extractor.forward(g, p, x)?;
        let branch = self.branch.forward(g, p, h1)?;
        let h2 = match &self.mixer {
            None => apply_single(g, h1, branch.maps)?,
            Some(m) => apply_multihead(g, p, h1, branch.maps, &m.conv)?,
        };
        let per_probs = self.backbone.perception.forward(g, p, h2)?;
        Ok(ForwardVars {
            h1,
            maps: branch.maps,
            aux_probs: branch.aux_probs,
            per_probs,
            pc_feature: branch.pc_feature,
        })
    }

    /// Inference on one clip.
    pub fn predict(&self, store: &ParamStore<f32>, clip: &VideoClip) -> Result<Prediction> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let x = g.constant(batch_clips(&[clip])?);
        let out = self.forward(&mut g, &p, x)?;
        let scores = |v: Var| ClassScores {
            probs: g.value(v).data().iter().map(|&x| x as f64).collect(),
        };
        Ok(Prediction {
            per: scores(out.per_probs),
            att: scores(out.aux_probs),
            maps: map_set_from_batch(g.value(out.maps), 0, self.roles())?,
            pc_feature: g.value(out.pc_feature).data().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(heads: usize, mask: bool, pc: bool) -> ModelSpec {
        ModelSpec {
            split: SplitDescriptor::new("desk3d", 3),
            num_classes: 4,
            heads,
            mask_supervised: mask,
            pc_enabled: pc,
            trunk_kernel: [1, 3, 3],
        }
    }

    fn clip() -> VideoClip {
        let data = (0..4 * 3 * 16 * 16)
            .map(|i| ((i * 37) % 101) as f32 / 100.0)
            .collect();
        VideoClip::new(Tensor::from_vec(&[4, 3, 16, 16], data).unwrap(), 0).unwrap()
    }

    #[test]
    fn prediction_shapes() {
        for (heads, mask, roles) in [
            (1, false, vec![HeadRole::Unconstrained]),
            (1, true, vec![HeadRole::Object]),
            (3, true, HeadRole::TABLE_ORDER.to_vec()),
        ] {
            let mut store = ParamStore::new();
            let m = Model::build(
                &spec(heads, mask, true),
                &mut store,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
            let p = m.predict(&store, &clip()).unwrap();
            assert_eq!(p.per.probs.len(), 4);
            assert_eq!(p.att.probs.len(), 4);
            assert_eq!(p.maps.roles(), &roles[..]);
            assert_eq!(p.maps.dims(), (4, 2, 2));
            assert_eq!(p.pc_feature.len(), 32);
            assert_eq!(m.mixer.is_some(), heads == 3);
        }
    }

    #[test]
    fn centroids_are_last_and_small() {
        let mut store = ParamStore::<f32>::new();
        let m = Model::build(
            &spec(1, false, true),
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let id = m.centroids.unwrap();
        assert_eq!(id.index(), store.len() - 1);
        assert_eq!(store.get(id).shape(), &[4, 32]);
        assert!(store.get(id).data().iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn unsupported_heads_rejected() {
        let mut store = ParamStore::<f32>::new();
        let err = Model::build(
            &spec(2, false, false),
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
