//! Attention branch networks for video action recognition, with
//! instance-mask supervision, multi-head attention maps and a prototype
//! conformity loss.

pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod conv;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod masks;
pub mod model;
pub mod nn;
pub mod sharpness;
pub mod tensor;

pub use attention::{AttentionBranch, AttentionBranchOutput, AttentionMapSet, HeadRole, Mixer};
pub use backbone::{BackboneSplit, ClassScores, FeatureMap, SplitDescriptor, VideoClip};
pub use data::{Dataset, SamplingProtocol, SyntheticSpec, Video};
pub use error::{Error, Result};
pub use harness::{Checkpoint, LossMode, Metrics, RunConfig};
pub use losses::{LossBreakdown, LossTerms, LossWeights, Objective};
pub use masks::{AggregatedMask, MaskSource, MaskStack};
pub use model::{Model, ModelSpec, Prediction};
pub use sharpness::{EntropyTable, SharpnessReport};
pub use tensor::{Scalar, Tensor};
