use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneArch, SplitDescriptor};
use crate::data::{DatasetConfig, SamplingMode, SamplingProtocol, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Objective};
use crate::model::ModelSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Plain attention branch network: `L_per + λ L_att`.
    Abn,
    /// Object map supervised by the aggregated instance mask.
    Mask,
    /// Object and background maps both supervised (three heads).
    Mha,
}

impl LossMode {
    pub fn objective(self) -> Objective {
        match self {
            LossMode::Abn | LossMode::Mask => Objective::Mask,
            LossMode::Mha => Objective::Mha,
        }
    }
}

/// Loss weights as written in the config. Omitted weights take values that
/// fit the mode: the active map loss gets its default and inactive terms 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_att: Option<f64>,
    pub lambda_b: Option<f64>,
    pub lambda_mask: Option<f64>,
    pub lambda_mha: Option<f64>,
    pub lambda_pc: Option<f64>,
    pub lambda_pc1: Option<f64>,
    pub lambda_pc2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `<backbone>@<cut>` or a bare backbone name for its default cut.
    pub backbone: String,
    /// Number of attention maps, 1 or 3.
    pub heads: usize,
    pub trunk_kernel: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: "desk3d@3".into(),
            heads: 1,
            trunk_kernel: [1, 3, 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub name: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// SGD only.
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            name: OptimizerKind::Adam,
            lr: 1e-4,
            epochs: 50,
            batch_size: 8,
            weight_decay: 0.0,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingPreset {
    Synthetic,
    Ucf101,
    Ssv2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub preset: SamplingPreset,
    pub clip_length: Option<usize>,
    pub stride: Option<usize>,
    pub flip_prob: Option<f64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            preset: SamplingPreset::Synthetic,
            clip_length: None,
            stride: None,
            flip_prob: None,
        }
    }
}

impl SamplingConfig {
    pub fn protocol(&self, mode: SamplingMode) -> SamplingProtocol {
        let mut p = match self.preset {
            SamplingPreset::Synthetic => SamplingProtocol::synthetic(mode, 16),
            SamplingPreset::Ucf101 => SamplingProtocol::ucf101_style(mode),
            SamplingPreset::Ssv2 => SamplingProtocol::ssv2_style(mode),
        };
        if let Some(c) = self.clip_length {
            p.clip_length = c;
        }
        if let Some(s) = self.stride {
            p.stride = s;
        }
        if let Some(f) = self.flip_prob {
            p.flip_prob = f;
        }
        p
    }
}

/// One experiment, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub mode: LossMode,
    pub pc_enabled: bool,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DatasetConfig,
    pub sampling: SamplingConfig,
    /// Used by `generate` for synthetic datasets.
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "runs/default".into(),
            mode: LossMode::Abn,
            pc_enabled: false,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DatasetConfig::default(),
            sampling: SamplingConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn split(&self) -> Result<SplitDescriptor> {
        self.model.backbone.parse()
    }

    /// Resolve omitted weights and check them against the mode.
    pub fn weights(&self) -> Result<LossWeights> {
        let d = LossWeights::default();
        let l = &self.loss;
        let on = |active: bool, set: Option<f64>, default: f64| {
            set.unwrap_or(if active { default } else { 0.0 })
        };
        let w = LossWeights {
            lambda_att: l.lambda_att.unwrap_or(d.lambda_att),
            lambda_b: l.lambda_b.unwrap_or(d.lambda_b),
            lambda_mask: on(self.mode == LossMode::Mask, l.lambda_mask, d.lambda_mask),
            lambda_mha: on(self.mode == LossMode::Mha, l.lambda_mha, d.lambda_mha),
            lambda_pc: on(self.pc_enabled, l.lambda_pc, d.lambda_pc),
            lambda_pc1: l.lambda_pc1.unwrap_or(d.lambda_pc1),
            lambda_pc2: l.lambda_pc2.unwrap_or(d.lambda_pc2),
        };
        w.validate()?;
        match self.mode {
            LossMode::Abn if w.lambda_mask > 0.0 || w.lambda_mha > 0.0 => {
                return Err(Error::config(
                    "mode abn does not allow lambda_mask or lambda_mha > 0",
                ));
            }
            LossMode::Mask if w.lambda_mha > 0.0 => {
                return Err(Error::config("mode mask does not allow lambda_mha > 0"));
            }
            LossMode::Mha if w.lambda_mask > 0.0 => {
                return Err(Error::config("mode mha does not allow lambda_mask > 0"));
            }
            _ => {}
        }
        if !self.pc_enabled && w.lambda_pc > 0.0 {
            return Err(Error::config("lambda_pc > 0 needs pc_enabled = true"));
        }
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let split = self.split()?;
        let blocks = BackboneArch::lookup(&split.backbone)?.blocks.len();
        if split.cut == 0 || split.cut >= blocks {
            return Err(Error::config(format!(
                "cut {} is outside 1..{blocks} for {}",
                split.cut, split.backbone
            )));
        }
        if !matches!(self.model.heads, 1 | 3) {
            return Err(Error::config(format!(
                "heads must be 1 or 3, got {}",
                self.model.heads
            )));
        }
        if self.mode == LossMode::Mha && self.model.heads != 3 {
            return Err(Error::config("mode mha needs heads = 3"));
        }
        if self
            .model
            .trunk_kernel
            .iter()
            .any(|&k| k == 0 || k % 2 == 0)
        {
            return Err(Error::config(format!(
                "trunk_kernel {:?} must be odd and positive",
                self.model.trunk_kernel
            )));
        }
        self.weights()?;
        let o = &self.optim;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                o.lr
            )));
        }
        if o.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.momentum)) {
            return Err(Error::config(
                "weight_decay must be >= 0 and momentum in [0, 1)",
            ));
        }
        self.sampling.protocol(SamplingMode::Train).validate()?;
        Ok(())
    }

    pub fn model_spec(&self, num_classes: usize) -> Result<ModelSpec> {
        Ok(ModelSpec {
            split: self.split()?,
            num_classes,
            heads: self.model.heads,
            mask_supervised: self.mode != LossMode::Abn,
            pc_enabled: self.pc_enabled,
            trunk_kernel: self.model.trunk_kernel,
        })
    }

    pub fn train_protocol(&self) -> SamplingProtocol {
        self.sampling.protocol(SamplingMode::Train)
    }

    pub fn val_protocol(&self) -> SamplingProtocol {
        self.sampling.protocol(SamplingMode::Validation)
    }

    /// SHA-256 of everything that shapes the trained model. The output
    /// directory and epoch count are left out so runs can move and resume.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.optim.epochs = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c.optim.lr, 1e-4);
        assert_eq!(c.optim.epochs, 50);
        assert_eq!(c.optim.batch_size, 8);
        assert_eq!(c.mode, LossMode::Abn);
        let w = c.weights().unwrap();
        assert_eq!((w.lambda_mask, w.lambda_mha, w.lambda_pc), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mode_defaults() {
        let c = RunConfig::from_toml_str("mode = \"mask\"\npc_enabled = true").unwrap();
        let w = c.weights().unwrap();
        assert_eq!(
            (w.lambda_mask, w.lambda_mha, w.lambda_pc),
            (10.0, 0.0, 1e-4)
        );
        let c = RunConfig::from_toml_str("mode = \"mha\"\n[model]\nheads = 3").unwrap();
        assert_eq!(c.weights().unwrap().lambda_mha, 10.0);
    }

    #[test]
    fn inconsistent_combinations_are_rejected() {
        for text in [
            "mode = \"abn\"\n[loss]\nlambda_mask = 1.0",
            "mode = \"abn\"\n[loss]\nlambda_mha = 0.5",
            "mode = \"mha\"",
            "mode = \"mha\"\n[model]\nheads = 1",
            "mode = \"mask\"\n[loss]\nlambda_mha = 1.0",
            "mode = \"mha\"\n[model]\nheads = 3\n[loss]\nlambda_mask = 1.0",
            "[loss]\nlambda_pc = 0.1",
            "[loss]\nlambda_att = -1.0",
            "[model]\nheads = 2",
            "[model]\nbackbone = \"resnet\"",
            "[model]\nbackbone = \"desk3d@9\"",
            "[optim]\nlr = 0.0",
            "[optim]\nbatch_size = 0",
            "unknown_key = 1",
            "mode = \"bogus\"",
        ] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn ablation_matrix_is_expressible() {
        for (mode, heads) in [("abn", 1), ("mask", 1), ("mha", 3)] {
            for pc in [false, true] {
                let text =
                    format!("mode = \"{mode}\"\npc_enabled = {pc}\n[model]\nheads = {heads}");
                RunConfig::from_toml_str(&text).unwrap();
            }
        }
    }

    #[test]
    fn hash_ignores_out_and_epochs() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        b.optim.epochs = 3;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn partial_tables_keep_defaults() {
        let c = RunConfig::from_toml_str("[data]\nroot = \"elsewhere\"").unwrap();
        assert_eq!(c.data.root, std::path::PathBuf::from("elsewhere"));
        assert_eq!(c.data.kind, RunConfig::default().data.kind);
        assert_eq!(c.data.val_root(), c.data.root.join("val"));
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig {
            mode: LossMode::Mask,
            ..RunConfig::default()
        };
        c.loss.lambda_mask = Some(5.0);
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }
}
