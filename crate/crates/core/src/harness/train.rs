use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{Checkpoint, RngState};
use super::config::{LossMode, RunConfig};
use super::optim::Optimizer;
use crate::attention::HeadRole;
use crate::autograd::Graph;
use crate::backbone::{batch_clips, VideoClip};
use crate::data::{sample_clip, Dataset, SampledClip};
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss_op, mask_loss_op, mean_centroid_distance, mha_loss_op, pc_loss_op, total_loss,
    LossBreakdown, LossTerms, LossWeights,
};
use crate::masks::{self, AggregatedMask};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// PC values above this get a warning; the push term is unbounded below.
pub const PC_WARN_MAGNITUDE: f64 = 1e3;

/// Loss values and parameter gradients for one batch.
#[derive(Clone, Debug)]
pub struct StepResult<T> {
    pub breakdown: LossBreakdown,
    /// One entry per parameter in store order; empty when a term is not finite.
    pub grads: Vec<Option<Tensor<T>>>,
    /// Mean `‖f − w_y‖` over the batch, when the model has centroids.
    pub centroid_distance: Option<f64>,
    pub correct: usize,
}

/// `[B, 1, T, h, w]` mask targets at the attention map resolution.
fn mask_targets<T: Scalar>(masks: &[&AggregatedMask], map_shape: &[usize]) -> Result<Tensor<T>> {
    let (t, h, w) = (map_shape[2], map_shape[3], map_shape[4]);
    let mut data = Vec::with_capacity(masks.len() * t * h * w);
    for m in masks {
        if m.dims().0 != t {
            return Err(Error::Shape(format!(
                "mask has {} frames, maps have {t}",
                m.dims().0
            )));
        }
        let r = masks::resample(m, h, w)?;
        data.extend(r.values().data().iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::from_vec(&[masks.len(), 1, t, h, w], data)
}

/// Forward, total loss and backward for one batch. Generic so the same
/// computation can be checked in double precision.
pub fn compute_step<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    clips: &[&VideoClip],
    masks: Option<&[&AggregatedMask]>,
    mode: LossMode,
    weights: &LossWeights,
) -> Result<StepResult<T>> {
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(batch_clips(clips)?);
    let fv = model.forward(&mut g, &p, x)?;

    let per = ce_loss_op(&mut g, fv.per_probs, &labels)?;
    let att = ce_loss_op(&mut g, fv.aux_probs, &labels)?;
    let mut weighted = vec![(per, T::ONE), (att, T::from_f64(weights.lambda_att))];
    let mut terms = LossTerms {
        per: g.value(per).item().to_f64(),
        att: g.value(att).item().to_f64(),
        ..LossTerms::default()
    };

    let need_masks = match mode {
        LossMode::Abn => false,
        LossMode::Mask => weights.lambda_mask > 0.0,
        LossMode::Mha => weights.lambda_mha > 0.0,
    };
    if need_masks {
        let masks = masks.ok_or_else(|| Error::data("this loss mode needs instance masks"))?;
        if masks.len() != clips.len() {
            return Err(Error::data(format!(
                "{} masks for {} clips",
                masks.len(),
                clips.len()
            )));
        }
        let target = mask_targets::<T>(masks, g.shape(fv.maps))?;
        let head = |role| {
            model
                .head_index(role)
                .ok_or_else(|| Error::config(format!("model has no {role} head")))
        };
        if mode == LossMode::Mask {
            let mo = g.select_channel(fv.maps, head(HeadRole::Object)?)?;
            let l = mask_loss_op(&mut g, mo, target)?;
            terms.mask = Some(g.value(l).item().to_f64());
            weighted.push((l, T::from_f64(weights.lambda_mask)));
        } else {
            let mo = g.select_channel(fv.maps, head(HeadRole::Object)?)?;
            let mb = g.select_channel(fv.maps, head(HeadRole::Background)?)?;
            let l = mha_loss_op(&mut g, mo, mb, target, T::from_f64(weights.lambda_b))?;
            terms.mha = Some(g.value(l).item().to_f64());
            weighted.push((l, T::from_f64(weights.lambda_mha)));
        }
    }
    if let (Some(cid), true) = (model.centroids, weights.lambda_pc > 0.0) {
        let l = pc_loss_op(
            &mut g,
            fv.pc_feature,
            p.var(cid),
            &labels,
            T::from_f64(weights.lambda_pc1),
            T::from_f64(weights.lambda_pc2),
        )?;
        terms.pc = Some(g.value(l).item().to_f64());
        weighted.push((l, T::from_f64(weights.lambda_pc)));
    }
    let breakdown = total_loss(&terms, &[mode.objective()], weights)?;

    let centroid_distance = model
        .centroids
        .map(|cid| mean_centroid_distance(g.value(fv.pc_feature), &labels, store.get(cid)));
    let l = model.spec.num_classes;
    let correct = g
        .value(fv.per_probs)
        .data()
        .chunks(l)
        .zip(&labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count();

    let grads = if breakdown.non_finite_terms().is_empty() && breakdown.total.is_finite() {
        let total = g.weighted_sum(&weighted)?;
        let mut gr = g.backward(total)?;
        p.vars().iter().map(|&v| gr.take(v)).collect()
    } else {
        Vec::new()
    };
    Ok(StepResult {
        breakdown,
        grads,
        centroid_distance,
        correct,
    })
}

/// One NDJSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogLine {
    pub step: u64,
    pub per: f64,
    pub att: f64,
    pub mask: Option<f64>,
    pub mha: Option<f64>,
    pub pc: Option<f64>,
    pub total: f64,
}

impl LogLine {
    pub fn new(step: u64, b: &LossBreakdown) -> Self {
        Self {
            step,
            per: b.get("per").unwrap_or(f64::NAN),
            att: b.get("att").unwrap_or(f64::NAN),
            mask: b.get("mask"),
            mha: b.get("mha"),
            pc: b.get("pc"),
            total: b.total,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub breakdown: LossBreakdown,
    pub centroid_distance: Option<f64>,
    pub correct: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    /// Batch-weighted mean of each term over the epoch.
    pub mean_terms: BTreeMap<String, f64>,
    pub mean_total: f64,
    pub train_accuracy: f64,
    /// Mean intra-class distance `‖f − w_y‖`, when the model has centroids.
    pub centroid_distance: Option<f64>,
}

/// Mutable training state: model, parameters, optimizer and the data RNG.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub classes: Vec<String>,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub optimizer: Optimizer<f32>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub weights: LossWeights,
}

/// RNG stream for parameter initialization.
const INIT_STREAM: u64 = 0;
/// RNG stream for shuffling and augmentation.
const DATA_STREAM: u64 = 1;

impl Trainer {
    pub fn new(config: &RunConfig, classes: Vec<String>) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        init.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let model = Model::build(&config.model_spec(classes.len())?, &mut store, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Self {
            optimizer: Optimizer::new(&config.optim, &store),
            config: config.clone(),
            classes,
            model,
            store,
            rng,
            epoch: 0,
            weights: config.weights()?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(&ckpt.config, ckpt.classes.clone())?;
        if ckpt.config_hash != ckpt.config.hash() {
            return Err(Error::Checkpoint(
                "config hash does not match the stored config".into(),
            ));
        }
        t.store.load_values(ckpt.params.clone())?;
        if ckpt.optimizer.first.len() != t.store.len() {
            return Err(Error::Checkpoint(
                "optimizer state does not match the parameters".into(),
            ));
        }
        t.optimizer = ckpt.optimizer.clone();
        t.rng = ckpt.rng.restore()?;
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            epoch: self.epoch,
            classes: self.classes.clone(),
            rng: RngState::capture(&self.rng),
            params: self
                .store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// One optimizer step on already-sampled clips. A non-finite term
    /// aborts before any parameter changes.
    pub fn step(&mut self, batch: &[SampledClip]) -> Result<StepRecord> {
        let clips: Vec<&VideoClip> = batch.iter().map(|s| &s.clip).collect();
        let masks: Option<Vec<&AggregatedMask>> = batch.iter().map(|s| s.mask.as_ref()).collect();
        let out = compute_step(
            &self.model,
            &self.store,
            &clips,
            masks.as_deref(),
            self.config.mode,
            &self.weights,
        )?;
        let step = self.optimizer.step + 1;
        let mut bad = out.breakdown.non_finite_terms();
        if !out.breakdown.total.is_finite() && bad.is_empty() {
            bad.push("total".into());
        }
        if bad.is_empty() && out.grads.iter().flatten().any(|g| !g.all_finite()) {
            bad.push("gradient".into());
        }
        if !bad.is_empty() {
            return Err(Error::NonFinite {
                step,
                terms: bad.join(", "),
                last_checkpoint: None,
            });
        }
        if let Some(pc) = out.breakdown.get("pc") {
            if pc.abs() > PC_WARN_MAGNITUDE {
                log::warn!(
                    "step {step}: PC loss magnitude {pc:.3e} exceeds {PC_WARN_MAGNITUDE:.0e}"
                );
            }
        }
        self.optimizer.update(&mut self.store, &out.grads)?;
        Ok(StepRecord {
            step,
            epoch: self.epoch + 1,
            breakdown: out.breakdown,
            centroid_distance: out.centroid_distance,
            correct: out.correct,
            batch: batch.len(),
        })
    }

    /// Shuffle, sample and step through one epoch.
    pub fn run_epoch(
        &mut self,
        ds: &Dataset,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<EpochSummary> {
        let protocol = self.config.train_protocol();
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let (mut total, mut seen, mut correct, mut steps) = (0.0, 0, 0, 0);
        let mut dist = (0.0, 0usize);
        for chunk in order.chunks(self.config.optim.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| sample_clip(&ds.videos[i], &protocol, &mut self.rng))
                .collect::<Result<Vec<_>>>()?;
            let rec = self.step(&batch)?;
            on_step(&rec)?;
            let n = rec.batch as f64;
            for (k, v) in &rec.breakdown.per_term {
                *sums.entry(k.clone()).or_default() += v * n;
            }
            total += rec.breakdown.total * n;
            if let Some(d) = rec.centroid_distance {
                dist.0 += d * n;
                dist.1 += rec.batch;
            }
            seen += rec.batch;
            correct += rec.correct;
            steps += 1;
        }
        self.epoch += 1;
        let seen_f = seen.max(1) as f64;
        Ok(EpochSummary {
            epoch: self.epoch,
            steps,
            mean_terms: sums.into_iter().map(|(k, v)| (k, v / seen_f)).collect(),
            mean_total: total / seen_f,
            train_accuracy: correct as f64 / seen_f,
            centroid_distance: (dist.1 > 0).then(|| dist.0 / dist.1 as f64),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub epochs: Vec<EpochSummary>,
    pub trainer: Trainer,
}

pub fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints")
        .join(format!("epoch_{epoch:03}.ckpt"))
}

pub const LOG_FILE: &str = "train_log.ndjson";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Train from scratch, or continue from `resume` up to `config.optim.epochs`.
///
/// Writes `train_log.ndjson`, `epochs.ndjson`, one checkpoint per epoch
/// (epoch 0 is the initialization) and `final.ckpt` under `config.out`.
pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainReport> {
    config.validate()?;
    let ds = Dataset::open(&config.data.train_root())?;
    let needs_masks = config.mode != LossMode::Abn;
    if needs_masks && !ds.has_masks() {
        return Err(Error::data(format!(
            "mode {:?} needs masks but {} has videos without them",
            config.mode,
            config.data.train_root().display()
        )));
    }
    let mut trainer = match resume {
        None => Trainer::new(config, ds.classes.clone())?,
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config_hash != config.hash() {
                return Err(Error::config(format!(
                    "{} was trained with a different configuration",
                    path.display()
                )));
            }
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            t.config = config.clone();
            t
        }
    };
    if trainer.classes != ds.classes {
        return Err(Error::config(
            "dataset classes differ from the model's classes",
        ));
    }
    let out = &config.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let epochs_path = out.join("epochs.ndjson");
    let open = |p: &Path, append: bool| {
        std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(p)
            .map_err(|e| Error::io(p, e))
    };
    let mut log = std::io::BufWriter::new(open(&log_path, resume.is_some())?);
    let mut epochs_log = open(&epochs_path, resume.is_some())?;

    let mut last = checkpoint_path(out, trainer.epoch);
    if resume.is_none() {
        trainer.checkpoint().save(&last)?;
    }
    let mut summaries = Vec::new();
    while trainer.epoch < config.optim.epochs {
        let result = trainer.run_epoch(&ds, |rec| {
            let line =
                serde_json::to_string(&LogLine::new(rec.step, &rec.breakdown)).expect("log line");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
        });
        let summary = match result {
            Ok(s) => s,
            Err(Error::NonFinite { step, terms, .. }) => {
                let _ = log.flush();
                return Err(Error::NonFinite {
                    step,
                    terms,
                    last_checkpoint: Some(last),
                });
            }
            Err(e) => return Err(e),
        };
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        log::info!(
            "epoch {} loss {:.4} train acc {:.3}",
            summary.epoch,
            summary.mean_total,
            summary.train_accuracy
        );
        let line = serde_json::to_string(&summary).expect("summary");
        writeln!(epochs_log, "{line}").map_err(|e| Error::io(&epochs_path, e))?;
        last = checkpoint_path(out, trainer.epoch);
        trainer.checkpoint().save(&last)?;
        summaries.push(summary);
    }
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainReport {
        log_path,
        final_checkpoint,
        epochs: summaries,
        trainer,
    })
}
