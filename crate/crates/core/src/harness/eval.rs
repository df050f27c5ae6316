use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use crate::attention::HeadRole;
use crate::data::{sample_clip, Dataset, SamplingProtocol};
use crate::error::{Error, Result};
use crate::masks;
use crate::model::Model;
use crate::nn::ParamStore;
use crate::sharpness::EntropyTable;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoOutcome {
    pub video_id: String,
    pub label: usize,
    pub predicted: usize,
    pub top5_hit: bool,
    /// IoU of `M_o > 0.5` with the ground-truth mask, pooled over frames.
    pub object_iou: Option<f64>,
    /// Mean per-frame Pearson r between `M_b` and the ground-truth mask.
    pub background_pearson: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub num_videos: usize,
    pub top1: f64,
    pub top5: f64,
    pub mean_object_iou: Option<f64>,
    pub mean_background_pearson: Option<f64>,
    /// Dataset mean entropy per head label; `None` for absent heads.
    pub entropy: BTreeMap<String, Option<f64>>,
    #[serde(skip)]
    pub entropy_table: EntropyTable,
    pub videos: Vec<VideoOutcome>,
}

impl Metrics {
    pub fn entropy_of(&self, role: HeadRole) -> Option<f64> {
        self.entropy_table.mean(role)
    }

    /// Plain-text summary: accuracy lines and the entropy table.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "videos {}\ntop-1 {:.4}\ntop-5 {:.4}\n",
            self.num_videos, self.top1, self.top5
        );
        if let Some(iou) = self.mean_object_iou {
            s += &format!("M_o IoU {iou:.4}\n");
        }
        if let Some(r) = self.mean_background_pearson {
            s += &format!("M_b Pearson r {r:.4}\n");
        }
        s + &self.entropy_table.to_text()
    }
}

/// Rebuild the model recorded in a checkpoint and load its parameters.
pub fn load_model(ckpt: &Checkpoint) -> Result<(Model, ParamStore<f32>)> {
    let spec = ckpt.config.model_spec(ckpt.num_classes())?;
    let mut store = ParamStore::new();
    // values are overwritten below; the RNG only fills the initial tensors
    let model = Model::build(&spec, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load_values(ckpt.params.clone())?;
    Ok((model, store))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn pearson(a: &[f32], b: &[f32]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    (va > 1e-12 && vb > 1e-12).then(|| cov / (va * vb).sqrt())
}

/// One centre clip per video: accuracy, the per-head entropy table and,
/// where masks exist, agreement of `M_o` and `M_b` with them.
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore<f32>,
    dataset: &Dataset,
    protocol: &SamplingProtocol,
) -> Result<Metrics> {
    if dataset.num_classes() != model.spec.num_classes {
        return Err(Error::config(format!(
            "model has {} classes, dataset has {}",
            model.spec.num_classes,
            dataset.num_classes()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::data("evaluation dataset is empty"));
    }
    let protocol = protocol.with_mode(crate::data::SamplingMode::Validation);
    // validation sampling never draws from it
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut table = EntropyTable::default();
    let mut videos = Vec::with_capacity(dataset.len());
    let o_idx = model.head_index(HeadRole::Object);
    let b_idx = model.head_index(HeadRole::Background);
    for video in &dataset.videos {
        let s = sample_clip(video, &protocol, &mut rng)?;
        let pred = model.predict(store, &s.clip)?;
        table.add_video(&video.id, &pred.maps)?;
        let (t, h, w) = pred.maps.dims();
        let gt = match &s.mask {
            Some(m) => Some(masks::resample(m, h, w)?),
            None => None,
        };
        let object_iou = match (o_idx, &gt) {
            (Some(i), Some(gt)) => {
                let mo = pred.maps.head(i);
                let (mut inter, mut union) = (0usize, 0usize);
                for (&m, &g) in mo.data().iter().zip(gt.values().data()) {
                    let (a, b) = (m > 0.5, g >= 0.5);
                    inter += usize::from(a && b);
                    union += usize::from(a || b);
                }
                (union > 0).then(|| inter as f64 / union as f64)
            }
            _ => None,
        };
        let background_pearson =
            match (b_idx, &gt) {
                (Some(i), Some(gt)) => {
                    let mb = pred.maps.head(i);
                    let plane = h * w;
                    mean((0..t).filter_map(|f| {
                        pearson(&mb.data()[f * plane..(f + 1) * plane], gt.frame(f))
                    }))
                }
                _ => None,
            };
        let k = 5.min(model.spec.num_classes);
        videos.push(VideoOutcome {
            video_id: video.id.clone(),
            label: video.label,
            predicted: pred.per.argmax(),
            top5_hit: pred.per.top_k(k).contains(&video.label),
            object_iou,
            background_pearson,
        });
    }
    let n = videos.len() as f64;
    Ok(Metrics {
        num_videos: videos.len(),
        top1: videos.iter().filter(|v| v.predicted == v.label).count() as f64 / n,
        top5: videos.iter().filter(|v| v.top5_hit).count() as f64 / n,
        mean_object_iou: mean(videos.iter().filter_map(|v| v.object_iou)),
        mean_background_pearson: mean(videos.iter().filter_map(|v| v.background_pearson)),
        entropy: table.means(),
        entropy_table: table,
        videos,
    })
}

pub fn evaluate(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Metrics> {
    if ckpt.classes.len() != dataset.num_classes() {
        return Err(Error::config(format!(
            "checkpoint has {} classes, dataset has {}",
            ckpt.classes.len(),
            dataset.num_classes()
        )));
    }
    let (model, store) = load_model(ckpt)?;
    evaluate_model(&model, &store, dataset, &ckpt.config.val_protocol())
}

/// `metrics.json`, `entropy.csv` and `metrics.txt` in `dir`.
pub fn write_metrics(metrics: &Metrics, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (
            "metrics.json",
            serde_json::to_string_pretty(metrics).expect("metrics serialize"),
        ),
        ("entropy.csv", metrics.entropy_table.to_csv()),
        ("metrics.txt", metrics.to_text()),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_of_inverse_is_minus_one() {
        let a = [0.0f32, 1.0, 0.0, 1.0];
        let b = [1.0f32, 0.0, 1.0, 0.0];
        assert!((pearson(&a, &b).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[0.5; 4]), None);
    }
}
