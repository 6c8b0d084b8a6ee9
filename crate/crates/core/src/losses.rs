//! Supervised segmentation losses, InfoNCE consistency between augmented
//! views, and the combined labeled/unlabeled objective.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::data::LabelMask;
use crate::error::{arg_err, Result};
use crate::postprocess::Segmentation;
use crate::tensor::Tensor;

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_parts(vec![x.len()], x.to_vec()));
    let b = g.constant(Tensor::from_parts(vec![y.len()], y.to_vec()));
    let s = g.cosine(a, b)?;
    Ok(g.value(s).item())
}

fn validate_pairs(n: usize, pairs: &[(usize, usize)], tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(arg_err!("temperature must be positive, got {tau}"));
    }
    if n < 2 {
        return Err(arg_err!("InfoNCE needs at least two embeddings, got {n}"));
    }
    let mut seen = vec![false; n];
    for &(i, j) in pairs {
        if i >= n || j >= n || i == j {
            return Err(arg_err!("invalid positive pair ({i}, {j}) for {n} embeddings"));
        }
        if core::mem::replace(&mut seen[i], true) {
            return Err(arg_err!("anchor {i} has more than one positive"));
        }
    }
    Ok(())
}

/// Per-anchor InfoNCE terms
/// `-log( exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ) )` with cosine similarity `s`.
/// The positive is part of the denominator, so every term is non-negative.
pub fn info_nce_graph(g: &mut Graph, embeddings: &[Var], pairs: &[(usize, usize)], tau: f64) -> Result<Vec<Var>> {
    let n = embeddings.len();
    validate_pairs(n, pairs, tau)?;
    let mut sims: Vec<Option<Var>> = vec![None; n * n];
    let mut terms = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let mut logits = Vec::with_capacity(n - 1);
        let mut positive = None;
        for k in (0..n).filter(|&k| k != i) {
            let (lo, hi) = (i.min(k), i.max(k));
            let s = match sims[lo * n + hi] {
                Some(s) => s,
                None => {
                    let s = g.cosine(embeddings[lo], embeddings[hi])?;
                    sims[lo * n + hi] = Some(s);
                    s
                }
            };
            if k == j {
                positive = Some(logits.len());
            }
            logits.push(s);
        }
        let stacked = g.stack(&logits)?;
        let scaled = g.scale(stacked, 1.0 / tau);
        let lse = g.logsumexp(scaled)?;
        let pos = g.element(scaled, positive.expect("validated pair"))?;
        terms.push(g.sub(lse, pos)?);
    }
    Ok(terms)
}

/// Per-anchor InfoNCE terms over flat embeddings.
pub fn info_nce_terms(embeddings: &[&[f64]], pairs: &[(usize, usize)], tau: f64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = embeddings
        .iter()
        .map(|e| g.constant(Tensor::from_parts(vec![e.len()], e.to_vec())))
        .collect();
    let terms = info_nce_graph(&mut g, &vars, pairs, tau)?;
    Ok(terms.iter().map(|t| g.value(*t).item()).collect())
}

/// Mean InfoNCE over the anchors in `pairs`.
pub fn info_nce(embeddings: &[&[f64]], pairs: &[(usize, usize)], tau: f64) -> Result<f64> {
    let terms = info_nce_terms(embeddings, pairs, tau)?;
    Ok(terms.iter().sum::<f64>() / terms.len().max(1) as f64)
}

/// Per-sample consistency between strong and weak views.
///
/// The `2B` embeddings are every sample's strong and weak outputs; each view
/// anchors once with its partner as the positive, and all other samples'
/// views as negatives. Sample `i`'s value is the mean of its two anchor terms
/// times `scale`. A single sample has no negatives and yields zero.
pub fn dual_view_consistency_graph(g: &mut Graph, strong: &[Var], weak: &[Var], tau: f64, scale: f64) -> Result<Vec<Var>> {
    let b = strong.len();
    if b == 0 || weak.len() != b {
        return Err(arg_err!("consistency needs matching non-empty view lists, got {b} and {}", weak.len()));
    }
    let embeddings: Vec<Var> = strong.iter().chain(weak).copied().collect();
    let pairs: Vec<(usize, usize)> = (0..b).flat_map(|i| [(i, b + i), (b + i, i)]).collect();
    let terms = info_nce_graph(g, &embeddings, &pairs, tau)?;
    terms
        .chunks(2)
        .map(|t| {
            let s = g.add(t[0], t[1])?;
            Ok(g.scale(s, 0.5 * scale))
        })
        .collect()
}

fn consistency_values(strong: &[Tensor], weak: &[Tensor], tau: f64, scale: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s: Vec<Var> = strong.iter().map(|t| g.constant(t.clone())).collect();
    let w: Vec<Var> = weak.iter().map(|t| g.constant(t.clone())).collect();
    let per_sample = dual_view_consistency_graph(&mut g, &s, &w, tau, scale)?;
    Ok(per_sample.iter().map(|v| g.value(*v).item()).sum::<f64>() / per_sample.len() as f64)
}

/// `1 / HWD` when voxel scaling is on, otherwise 1.
pub fn voxel_scale(voxels: usize, enabled: bool) -> f64 {
    if enabled {
        1.0 / voxels.max(1) as f64
    } else {
        1.0
    }
}

/// Segmentation-level InfoNCE over flattened `HWD·K` probability vectors.
pub fn seg_consistency(strong: &[Segmentation], weak: &[Segmentation], tau: f64, voxel_scaling: bool) -> Result<f64> {
    let Some(first) = strong.first() else {
        return Err(arg_err!("seg consistency needs at least one sample"));
    };
    let voxels = first.origin_shape.iter().product();
    let s: Vec<Tensor> = strong.iter().map(|x| x.probs.clone()).collect();
    let w: Vec<Tensor> = weak.iter().map(|x| x.probs.clone()).collect();
    consistency_values(&s, &w, tau, voxel_scale(voxels, voxel_scaling))
}

/// Query-level InfoNCE over flattened `N·K` query distribution logits.
pub fn query_consistency(strong: &[Tensor], weak: &[Tensor], tau: f64, voxels: usize, voxel_scaling: bool) -> Result<f64> {
    if strong.is_empty() {
        return Err(arg_err!("query consistency needs at least one sample"));
    }
    consistency_values(strong, weak, tau, voxel_scale(voxels, voxel_scaling))
}

fn check_target(seg: &Segmentation, mask: &LabelMask) -> Result<()> {
    if seg.origin_shape != mask.dims() {
        return Err(arg_err!("prediction shape {:?} vs mask {:?}", seg.origin_shape, mask.dims()));
    }
    if seg.num_classes() != mask.num_classes() as usize {
        return Err(arg_err!("prediction has {} classes, mask {}", seg.num_classes(), mask.num_classes()));
    }
    Ok(())
}

/// `1 − mean_c (2Σ p·y + ε)/(Σ p + Σ y + ε)` over all classes.
pub fn dice_loss(seg: &Segmentation, mask: &LabelMask) -> Result<f64> {
    check_target(seg, mask)?;
    let mut g = Graph::new();
    let p = g.constant(seg.probs.clone());
    let l = g.dice_loss(p, mask.labels(), DICE_EPS)?;
    Ok(g.value(l).item())
}

/// Mean voxel negative log-likelihood.
pub fn ce_loss(seg: &Segmentation, mask: &LabelMask) -> Result<f64> {
    check_target(seg, mask)?;
    let mut g = Graph::new();
    let p = g.constant(seg.probs.clone());
    let l = g.cross_entropy(p, mask.labels())?;
    Ok(g.value(l).item())
}

/// Loss components of one sample. Supervised parts are zero for unlabeled samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_ce: f64,
    pub l_dice: f64,
    pub l_segc: f64,
    pub l_qdc: f64,
}

impl LossParts {
    pub fn supervised(&self) -> f64 {
        self.l_ce + self.l_dice
    }

    pub fn dual_contrastive(&self) -> f64 {
        self.l_segc + self.l_qdc
    }
}

/// Batch-level loss record.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBundle {
    /// Mean over labeled samples.
    pub l_ce: f64,
    /// Mean over labeled samples.
    pub l_dice: f64,
    /// Mean over all samples.
    pub l_segc: f64,
    /// Mean over all samples.
    pub l_qdc: f64,
    pub l_total: f64,
    pub lambda_used: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `mean_labeled(L_sup + λ L_dc) + mean_unlabeled(λ L_dc)`, with
/// `L_sup = L_ce + L_dice` and `L_dc = L_segc + L_qdc`.
pub fn total_loss(labeled: &[LossParts], unlabeled: &[LossParts], lambda: f64) -> LossBundle {
    let l_l = mean(labeled.iter().map(|p| p.supervised() + lambda * p.dual_contrastive()));
    let l_u = mean(unlabeled.iter().map(|p| lambda * p.dual_contrastive()));
    let all = || labeled.iter().chain(unlabeled);
    LossBundle {
        l_ce: mean(labeled.iter().map(|p| p.l_ce)),
        l_dice: mean(labeled.iter().map(|p| p.l_dice)),
        l_segc: mean(all().map(|p| p.l_segc)),
        l_qdc: mean(all().map(|p| p.l_qdc)),
        l_total: l_l + l_u,
        lambda_used: lambda,
    }
}

/// Linear warm-up of the consistency weight from 0 to `lambda_max` over the
/// first `ramp_fraction` of training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub lambda_max: f64,
    pub ramp_fraction: f64,
    pub total_steps: u64,
}

impl LambdaSchedule {
    pub fn ramp_steps(&self) -> u64 {
        libm::ceil(self.ramp_fraction.clamp(0.0, 1.0) * self.total_steps as f64) as u64
    }

    pub fn at(&self, step: u64) -> f64 {
        let ramp = self.ramp_steps();
        if ramp == 0 || step >= ramp {
            self.lambda_max
        } else {
            self.lambda_max * step as f64 / ramp as f64
        }
    }
}
