//! Histogram-entropy sharpness of attention maps.
//!
//! Each frame is min-max normalized, binned into ten equal bins over
//! `[0, 1]` (last bin closed) and scored with base-2 Shannon entropy. Low
//! entropy means values are polarized toward 0 and 1, i.e. a sharp map.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMapSet, HeadRole};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_BINS: usize = 10;
/// Frames whose value range is below this are treated as constant.
pub const DEGENERATE_RANGE: f64 = 1e-9;

/// Largest possible entropy, `log₂ 10`.
pub fn max_entropy() -> f64 {
    (NUM_BINS as f64).log2()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedFrame {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

/// `(v − min) / (max − min)`; constant frames become all zeros and are flagged.
pub fn normalize_frame(frame: &[f32]) -> NormalizedFrame {
    let (lo, hi) = frame
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let range = hi - lo;
    if frame.is_empty() || range.is_nan() || range < DEGENERATE_RANGE {
        return NormalizedFrame {
            values: vec![0.0; frame.len()],
            degenerate: true,
        };
    }
    NormalizedFrame {
        values: frame
            .iter()
            .map(|&v| ((v as f64 - lo) / range).clamp(0.0, 1.0))
            .collect(),
        degenerate: false,
    }
}

/// Bin `i` covers `[i/10, (i+1)/10)`; the last bin also takes 1.0.
pub fn bin_index(v: f64) -> usize {
    ((v * NUM_BINS as f64).floor().max(0.0) as usize).min(NUM_BINS - 1)
}

pub fn histogram(normalized: &[f64]) -> [usize; NUM_BINS] {
    let mut hist = [0; NUM_BINS];
    for &v in normalized {
        hist[bin_index(v)] += 1;
    }
    hist
}

/// `Σ −pᵢ log₂ pᵢ` with `0 · log 0 = 0`.
pub fn entropy_from_histogram(hist: &[usize; NUM_BINS]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h = hist.iter().filter(|&&c| c > 0).fold(0.0, |acc, &c| {
        let p = c as f64 / total as f64;
        acc - p * p.log2()
    });
    // keep exact zeros and the upper bound free of rounding noise
    h.clamp(0.0, max_entropy())
}

pub fn frame_entropy(normalized: &[f64]) -> f64 {
    entropy_from_histogram(&histogram(normalized))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub per_frame_entropy: Vec<f64>,
    pub video_entropy: f64,
    pub histograms: Vec<[usize; NUM_BINS]>,
    pub degenerate_frames: Vec<usize>,
}

/// Normalize, bin and score every frame of one head (`T × H × W`), then
/// average over frames.
pub fn video_entropy(head: &Tensor<f32>) -> Result<SharpnessReport> {
    let s = head.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(Error::Shape(format!("head must be T x H x W, got {s:?}")));
    }
    let mut report = SharpnessReport {
        per_frame_entropy: Vec::with_capacity(s[0]),
        video_entropy: 0.0,
        histograms: Vec::with_capacity(s[0]),
        degenerate_frames: Vec::new(),
    };
    for t in 0..s[0] {
        let n = normalize_frame(head.slab(t));
        if n.degenerate {
            report.degenerate_frames.push(t);
        }
        let hist = histogram(&n.values);
        report.per_frame_entropy.push(entropy_from_histogram(&hist));
        report.histograms.push(hist);
    }
    report.video_entropy = report.per_frame_entropy.iter().sum::<f64>() / s[0] as f64;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub video_id: String,
    pub head: HeadRole,
    pub entropy: f64,
    pub degenerate_frame_count: usize,
}

/// Per-video entropies for every head present, averaged per video and
/// then over the dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyTable {
    pub rows: Vec<EntropyRow>,
}

impl EntropyTable {
    pub fn add_video(&mut self, video_id: &str, maps: &AttentionMapSet) -> Result<()> {
        for (i, &role) in maps.roles().iter().enumerate() {
            let report = video_entropy(&maps.head(i))?;
            self.rows.push(EntropyRow {
                video_id: video_id.to_string(),
                head: role,
                entropy: report.video_entropy,
                degenerate_frame_count: report.degenerate_frames.len(),
            });
        }
        Ok(())
    }

    /// Dataset mean per head; `None` for heads the model does not have.
    pub fn mean(&self, head: HeadRole) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.head == head)
            .map(|r| r.entropy)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn means(&self) -> BTreeMap<String, Option<f64>> {
        HeadRole::TABLE_ORDER
            .iter()
            .map(|&h| (h.label().to_string(), self.mean(h)))
            .collect()
    }

    /// `video_id,head,entropy,degenerate_frame_count`, then one `ALL` row per head.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("video_id,head,entropy,degenerate_frame_count\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{}",
                r.video_id, r.head, r.entropy, r.degenerate_frame_count
            );
        }
        for head in HeadRole::TABLE_ORDER {
            if let Some(m) = self.mean(head) {
                let degenerate: usize = self
                    .rows
                    .iter()
                    .filter(|r| r.head == head)
                    .map(|r| r.degenerate_frame_count)
                    .sum();
                let _ = writeln!(out, "ALL,{head},{m:.6},{degenerate}");
            }
        }
        out
    }

    /// One line per head in `M_u / M_o / M_b` order; absent heads are blank.
    pub fn to_text(&self) -> String {
        let mut out = String::from("entropy M_u | entropy M_o | entropy M_b\n");
        let cells: Vec<String> = HeadRole::TABLE_ORDER
            .iter()
            .map(|&h| self.mean(h).map(|m| format!("{m:.3}")).unwrap_or_default())
            .collect();
        let _ = writeln!(
            out,
            "{:>11} | {:>11} | {:>11}",
            cells[0], cells[1], cells[2]
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn affine_normalization() {
        let n = normalize_frame(&[0.2, 0.4, 0.6]);
        assert!(!n.degenerate);
        for (a, b) in n.values.iter().zip([0.0, 0.5, 1.0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_frame_is_degenerate() {
        let n = normalize_frame(&[0.3; 9]);
        assert!(n.degenerate);
        assert!(n.values.iter().all(|&v| v == 0.0));
        let r = video_entropy(&Tensor::full(&[2, 3, 3], 0.3)).unwrap();
        assert_eq!(r.degenerate_frames, vec![0, 1]);
        assert_eq!(r.video_entropy, 0.0);
    }

    #[test]
    fn normalized_input_is_unchanged() {
        let f = [0.0f32, 0.25, 0.5, 1.0];
        let n = normalize_frame(&f);
        assert_eq!(n.values, vec![0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn single_bin_has_zero_entropy() {
        assert_eq!(frame_entropy(&[0.31, 0.32, 0.35, 0.39]), 0.0);
    }

    #[test]
    fn half_zero_half_one_is_one_bit() {
        assert_eq!(frame_entropy(&[0.0, 0.0, 1.0, 1.0]), 1.0);
    }

    #[test]
    #[allow(clippy::approx_constant)] // the rounded figure is the point of the check
    fn uniform_bins_reach_log2_10() {
        let vals: Vec<f64> = (0..10).map(|i| i as f64 / 10.0 + 0.05).collect();
        let h = frame_entropy(&vals);
        assert!((h - 10f64.log2()).abs() < 1e-12);
        assert!((h - 3.3219).abs() < 1e-4);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(0.0), 0);
        assert_eq!(bin_index(0.0999), 0);
        assert_eq!(bin_index(0.1), 1);
        assert_eq!(bin_index(0.9), 9);
        assert_eq!(bin_index(1.0), 9);
    }

    #[test]
    fn video_mean_of_frames() {
        let frame_a = [0.0f32, 0.0, 1.0, 1.0];
        let frame_b = [0.0f32, 0.0, 0.0, 0.0];
        let t = Tensor::from_vec(&[2, 2, 2], [frame_a, frame_b].concat()).unwrap();
        let r = video_entropy(&t).unwrap();
        assert_eq!(r.per_frame_entropy, vec![1.0, 0.0]);
        assert_eq!(r.video_entropy, 0.5);
        let same = Tensor::from_vec(&[3, 2, 2], [frame_a, frame_a, frame_a].concat()).unwrap();
        assert_eq!(video_entropy(&same).unwrap().video_entropy, 1.0);
    }

    #[test]
    fn table_formats_blank_heads() {
        let maps =
            AttentionMapSet::new(Tensor::full(&[1, 2, 1, 2, 2], 0.5), vec![HeadRole::Object])
                .unwrap();
        let mut t = EntropyTable::default();
        t.add_video("v1", &maps).unwrap();
        assert_eq!(t.mean(HeadRole::Object), Some(0.0));
        assert_eq!(t.mean(HeadRole::Unconstrained), None);
        let csv = t.to_csv();
        assert!(csv.starts_with("video_id,head,entropy,degenerate_frame_count\n"));
        assert!(csv.contains("v1,M_o,0.000000,2\n"));
        assert!(csv.contains("ALL,M_o,0.000000,2\n"));
        assert!(!csv.contains("M_u"));
        let text = t.to_text();
        assert!(text.lines().nth(1).unwrap().contains("0.000"));
    }

    proptest! {
        #[test]
        fn entropy_is_bounded(vals in prop::collection::vec(-5.0f32..5.0, 1..200)) {
            let h = frame_entropy(&normalize_frame(&vals).values);
            prop_assert!((0.0..=max_entropy()).contains(&h));
        }

        #[test]
        fn affine_invariance(vals in prop::collection::vec(0.0f32..1.0, 2..64), a in 0.5f32..4.0, b in -2.0f32..2.0) {
            let moved: Vec<f32> = vals.iter().map(|v| a * v + b).collect();
            let n0 = normalize_frame(&vals);
            let n1 = normalize_frame(&moved);
            prop_assume!(!n0.degenerate);
            // f32 rounding can push a value across a bin edge; compare bins away from edges only
            let near_edge = n0.values.iter().any(|v| {
                let x = v * 10.0;
                (1.0..9.5).contains(&x) && (x - x.round()).abs() < 1e-3
            });
            let spread = vals.iter().cloned().fold(f32::MIN, f32::max) - vals.iter().cloned().fold(f32::MAX, f32::min);
            prop_assume!(spread > 0.1);
            prop_assume!(!near_edge);
            prop_assert!((frame_entropy(&n0.values) - frame_entropy(&n1.values)).abs() < 1e-12);
        }

        #[test]
        fn histogram_partitions_every_value(vals in prop::collection::vec(0.0f64..=1.0, 0..100)) {
            prop_assert_eq!(histogram(&vals).iter().sum::<usize>(), vals.len());
        }

        #[test]
        fn permutation_invariance(mut vals in prop::collection::vec(0.0f32..1.0, 1..64), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let h0 = frame_entropy(&normalize_frame(&vals).values);
            vals.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(h0, frame_entropy(&normalize_frame(&vals).values));
        }
    }
}
