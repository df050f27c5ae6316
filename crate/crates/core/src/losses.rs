//! Training objectives: cross-entropy for both branches, the mask MSE, the
//! object/background multi-head mask loss, the prototype conformity loss,
//! and their weighted combination.
//!
//! Every loss is available as a plain function (value and analytic
//! gradient, generic over the scalar type) and as a graph op built on top
//! of those functions.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::normal_tensor;
use crate::tensor::{Scalar, Tensor};

/// Probability floor applied before the log in cross-entropy.
pub const CE_EPS: f64 = 1e-12;
/// Added under the square root of every Euclidean norm in the PC loss.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_att: f64,
    pub lambda_b: f64,
    pub lambda_mask: f64,
    pub lambda_mha: f64,
    pub lambda_pc: f64,
    pub lambda_pc1: f64,
    pub lambda_pc2: f64,
}

impl Default for LossWeights {
    /// λ=1, λ_b=1, λ_mask=10, λ_mha=10, λ_PC=1e-4, λ_PC1=1, λ_PC2=1e-3
    fn default() -> Self {
        Self {
            lambda_att: 1.0,
            lambda_b: 1.0,
            lambda_mask: 10.0,
            lambda_mha: 10.0,
            lambda_pc: 1e-4,
            lambda_pc1: 1.0,
            lambda_pc2: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_att", self.lambda_att),
            ("lambda_b", self.lambda_b),
            ("lambda_mask", self.lambda_mask),
            ("lambda_mha", self.lambda_mha),
            ("lambda_pc", self.lambda_pc),
            ("lambda_pc1", self.lambda_pc1),
            ("lambda_pc2", self.lambda_pc2),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

// ---- cross-entropy ---------------------------------------------------

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::data(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// `−ln max(p[label], ε)`
pub fn ce_loss<T: Scalar>(probs: &[T], label: usize) -> Result<T> {
    check_label(label, probs.len())?;
    let (p, eps) = (probs[label], T::from_f64(CE_EPS));
    // written out rather than `max` so a NaN probability stays NaN
    Ok(-(if p < eps { eps } else { p }).ln())
}

/// Gradient of [`ce_loss`] w.r.t. the probability vector.
pub fn ce_loss_grad<T: Scalar>(probs: &[T], label: usize) -> Result<Vec<T>> {
    check_label(label, probs.len())?;
    let mut g = vec![T::ZERO; probs.len()];
    let p = probs[label];
    g[label] = if p <= T::from_f64(CE_EPS) {
        T::ZERO
    } else {
        -T::ONE / p
    };
    Ok(g)
}

// ---- mask losses -----------------------------------------------------

fn check_same(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Shape(format!("{what}: {a} vs {b} elements")));
    }
    Ok(())
}

/// Mean of squared differences.
pub fn mse<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    check_same(pred.len(), target.len(), "mse")?;
    let s: T = pred
        .iter()
        .zip(target)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(s / T::from_f64(pred.len() as f64))
}

pub fn mse_grad<T: Scalar>(pred: &[T], target: &[T]) -> Result<Vec<T>> {
    check_same(pred.len(), target.len(), "mse")?;
    let k = T::from_f64(2.0 / pred.len() as f64);
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&a, &b)| k * (a - b))
        .collect())
}

/// MSE between the object-constrained map and the aggregated mask.
pub fn mask_loss<T: Scalar>(object_map: &[T], target: &[T]) -> Result<T> {
    mse(object_map, target)
}

/// `MSE(M_o, M′) + λ_b · MSE(M_b, 1 − M′)`. The unconstrained head is not part of it.
pub fn mha_loss<T: Scalar>(
    object_map: &[T],
    background_map: &[T],
    target: &[T],
    lambda_b: T,
) -> Result<T> {
    check_same(background_map.len(), target.len(), "mha background")?;
    let inv: Vec<T> = target.iter().map(|&v| T::ONE - v).collect();
    Ok(mse(object_map, target)? + lambda_b * mse(background_map, &inv)?)
}

/// Gradients of [`mha_loss`] w.r.t. `(M_o, M_b)`.
pub fn mha_loss_grad<T: Scalar>(
    object_map: &[T],
    background_map: &[T],
    target: &[T],
    lambda_b: T,
) -> Result<(Vec<T>, Vec<T>)> {
    check_same(background_map.len(), target.len(), "mha background")?;
    let inv: Vec<T> = target.iter().map(|&v| T::ONE - v).collect();
    let go = mse_grad(object_map, target)?;
    let gb = mse_grad(background_map, &inv)?
        .into_iter()
        .map(|v| v * lambda_b)
        .collect();
    Ok((go, gb))
}

// ---- prototype conformity --------------------------------------------

/// Trainable class centroids `K × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcState<T> {
    pub centroids: Tensor<T>,
}

impl<T: Scalar> PcState<T> {
    /// `0.01 · N(0, 1)` initialization.
    pub fn new<R: Rng + ?Sized>(num_clusters: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if num_clusters == 0 || dim == 0 {
            return Err(Error::config("PC state needs K >= 1 and d >= 1"));
        }
        Ok(Self {
            centroids: normal_tensor(&[num_clusters, dim], 0.01, rng),
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }
}

fn stable_norm<T: Scalar>(a: &[T], b: &[T]) -> T {
    let s: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    (s + T::from_f64(NORM_EPS)).sqrt()
}

fn check_pc<T: Scalar>(f: &[T], label: usize, centroids: &Tensor<T>) -> Result<(usize, usize)> {
    let s = centroids.shape();
    if s.len() != 2 || s[1] != f.len() {
        return Err(Error::Shape(format!(
            "feature of length {} against centroids {s:?}",
            f.len()
        )));
    }
    if s[0] < 2 {
        return Err(Error::config(
            "PC loss needs at least two clusters (K - 1 divides)",
        ));
    }
    check_label(label, s[0])?;
    Ok((s[0], s[1]))
}

/// `λ₁‖f − w_y‖ − λ₂/(K−1) · Σ_{j≠y} (‖f − w_j‖ + ‖w_y − w_j‖)` with ε-stabilized norms.
pub fn pc_loss<T: Scalar>(
    f: &[T],
    label: usize,
    centroids: &Tensor<T>,
    lambda_pc1: T,
    lambda_pc2: T,
) -> Result<T> {
    let (k, _) = check_pc(f, label, centroids)?;
    let wy = centroids.slab(label);
    let pull = lambda_pc1 * stable_norm(f, wy);
    let mut push = T::ZERO;
    for j in (0..k).filter(|&j| j != label) {
        let wj = centroids.slab(j);
        push += stable_norm(f, wj) + stable_norm(wy, wj);
    }
    Ok(pull - lambda_pc2 / T::from_f64((k - 1) as f64) * push)
}

/// Gradients of [`pc_loss`] w.r.t. the feature and every centroid.
pub fn pc_loss_grad<T: Scalar>(
    f: &[T],
    label: usize,
    centroids: &Tensor<T>,
    lambda_pc1: T,
    lambda_pc2: T,
) -> Result<(Vec<T>, Tensor<T>)> {
    let (k, d) = check_pc(f, label, centroids)?;
    let c = lambda_pc2 / T::from_f64((k - 1) as f64);
    let mut df = vec![T::ZERO; d];
    let mut dw = Tensor::zeros(&[k, d]);
    let wy = centroids.slab(label).to_vec();
    let unit = |a: &[T], b: &[T]| -> Vec<T> {
        let n = stable_norm(a, b);
        a.iter().zip(b).map(|(&x, &y)| (x - y) / n).collect()
    };
    let u = unit(f, &wy);
    for i in 0..d {
        df[i] += lambda_pc1 * u[i];
        dw.data_mut()[label * d + i] -= lambda_pc1 * u[i];
    }
    for j in (0..k).filter(|&j| j != label) {
        let wj = centroids.slab(j).to_vec();
        let ufj = unit(f, &wj);
        let uyj = unit(&wy, &wj);
        for i in 0..d {
            df[i] -= c * ufj[i];
            dw.data_mut()[j * d + i] += c * ufj[i] + c * uyj[i];
            dw.data_mut()[label * d + i] -= c * uyj[i];
        }
    }
    Ok((df, dw))
}

/// Mean of `‖f − w_y‖` over a batch of features `[B, d]`.
pub fn mean_centroid_distance<T: Scalar>(
    features: &Tensor<T>,
    labels: &[usize],
    centroids: &Tensor<T>,
) -> f64 {
    let n = labels.len().max(1) as f64;
    labels
        .iter()
        .enumerate()
        .map(|(b, &y)| {
            let f = features.slab(b);
            let w = centroids.slab(y);
            f.iter()
                .zip(w)
                .map(|(&a, &c)| (a - c).to_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n
}

// ---- total objective -------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `L_per + λ L_att + λ_mask L_mask + λ_PC L_PC`
    Mask,
    /// `L_per + λ L_att + λ_mha L_mha + λ_PC L_PC`
    Mha,
}

/// Raw (unweighted) term values for one step; absent terms are inactive.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub per: f64,
    pub att: f64,
    pub mask: Option<f64>,
    pub mha: Option<f64>,
    pub pc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Unweighted value of every active term.
    pub per_term: BTreeMap<String, f64>,
    /// Weight each active term enters the total with.
    pub weights: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompute_total(&self) -> f64 {
        self.per_term
            .iter()
            .map(|(k, v)| self.weights.get(k).copied().unwrap_or(0.0) * v)
            .sum()
    }

    pub fn get(&self, term: &str) -> Option<f64> {
        self.per_term.get(term).copied()
    }

    /// Names of terms whose value is NaN or infinite.
    pub fn non_finite_terms(&self) -> Vec<String> {
        self.per_term
            .iter()
            .filter(|(_, v)| !v.is_finite())
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// Combine term values. Exactly one objective must be requested; the PC
/// term contributes only when present.
pub fn total_loss(
    terms: &LossTerms,
    objectives: &[Objective],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let objective = match objectives {
        [one] => *one,
        [] => return Err(Error::config("no objective requested (choose mask or mha)")),
        _ => {
            return Err(Error::config(
                "mask and mha objectives are mutually exclusive",
            ))
        }
    };
    let mut per_term = BTreeMap::new();
    let mut w = BTreeMap::new();
    per_term.insert("per".to_string(), terms.per);
    w.insert("per".to_string(), 1.0);
    per_term.insert("att".to_string(), terms.att);
    w.insert("att".to_string(), weights.lambda_att);
    match objective {
        Objective::Mask => {
            if terms.mha.is_some() {
                return Err(Error::config("mha term supplied to the mask objective"));
            }
            if let Some(v) = terms.mask {
                per_term.insert("mask".to_string(), v);
                w.insert("mask".to_string(), weights.lambda_mask);
            }
        }
        Objective::Mha => {
            if terms.mask.is_some() {
                return Err(Error::config("mask term supplied to the mha objective"));
            }
            if let Some(v) = terms.mha {
                per_term.insert("mha".to_string(), v);
                w.insert("mha".to_string(), weights.lambda_mha);
            }
        }
    }
    if let Some(v) = terms.pc {
        per_term.insert("pc".to_string(), v);
        w.insert("pc".to_string(), weights.lambda_pc);
    }
    let mut b = LossBreakdown {
        per_term,
        weights: w,
        total: 0.0,
    };
    b.total = b.recompute_total();
    Ok(b)
}

// ---- graph ops -------------------------------------------------------

/// Batch-mean cross-entropy of probabilities `[B, L]`.
pub fn ce_loss_op<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for probabilities {s:?}",
            labels.len()
        )));
    }
    let l = s[1];
    let p = g.value(probs).data();
    let mut total = T::ZERO;
    for (row, &y) in p.chunks(l).zip(labels) {
        total += ce_loss(row, y)?;
    }
    let inv_b = T::ONE / T::from_f64(labels.len() as f64);
    let labels = labels.to_vec();
    Ok(g.custom(
        &[probs],
        Tensor::scalar(total * inv_b),
        move |inp, _o, gr| {
            let scale = gr.item() * inv_b;
            let mut d = Vec::with_capacity(inp[0].numel());
            for (row, &y) in inp[0].data().chunks(l).zip(&labels) {
                d.extend(
                    ce_loss_grad(row, y)
                        .expect("validated")
                        .into_iter()
                        .map(|v| v * scale),
                );
            }
            vec![Some(Tensor::from_vec(inp[0].shape(), d).expect("ce grad"))]
        },
    ))
}

/// Mean squared error against a constant target of the same shape.
pub fn mse_op<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Tensor<T>) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            g.shape(pred),
            target.shape()
        )));
    }
    let v = mse(g.value(pred).data(), target.data())?;
    Ok(g.custom(&[pred], Tensor::scalar(v), move |inp, _o, gr| {
        let d = mse_grad(inp[0].data(), target.data())
            .expect("validated")
            .into_iter()
            .map(|x| x * gr.item())
            .collect();
        vec![Some(Tensor::from_vec(inp[0].shape(), d).expect("mse grad"))]
    }))
}

pub fn mask_loss_op<T: Scalar>(
    g: &mut Graph<T>,
    object_map: Var,
    target: Tensor<T>,
) -> Result<Var> {
    mse_op(g, object_map, target)
}

pub fn mha_loss_op<T: Scalar>(
    g: &mut Graph<T>,
    object_map: Var,
    background_map: Var,
    target: Tensor<T>,
    lambda_b: T,
) -> Result<Var> {
    let inv = target.map(|v| T::ONE - v);
    let fg = mse_op(g, object_map, target)?;
    let bg = mse_op(g, background_map, inv)?;
    g.weighted_sum(&[(fg, T::ONE), (bg, lambda_b)])
}

/// Batch-mean PC loss of features `[B, d]` against centroids `[K, d]`.
pub fn pc_loss_op<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    centroids: Var,
    labels: &[usize],
    lambda_pc1: T,
    lambda_pc2: T,
) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    if fs.len() != 2 || fs[0] != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for features {fs:?}",
            labels.len()
        )));
    }
    let w = g.value(centroids).clone();
    let mut total = T::ZERO;
    for (b, &y) in labels.iter().enumerate() {
        total += pc_loss(g.value(features).slab(b), y, &w, lambda_pc1, lambda_pc2)?;
    }
    let inv_b = T::ONE / T::from_f64(labels.len() as f64);
    let labels = labels.to_vec();
    Ok(g.custom(
        &[features, centroids],
        Tensor::scalar(total * inv_b),
        move |inp, _o, gr| {
            let scale = gr.item() * inv_b;
            let (f, w) = (inp[0], inp[1]);
            let mut df = Vec::with_capacity(f.numel());
            let mut dw = Tensor::zeros(w.shape());
            for (b, &y) in labels.iter().enumerate() {
                let (gf, gw) =
                    pc_loss_grad(f.slab(b), y, w, lambda_pc1, lambda_pc2).expect("validated");
                df.extend(gf.into_iter().map(|v| v * scale));
                for (a, &v) in dw.data_mut().iter_mut().zip(gw.data()) {
                    *a += v * scale;
                }
            }
            vec![
                Some(Tensor::from_vec(f.shape(), df).expect("pc grad")),
                Some(dw),
            ]
        },
    ))
}
