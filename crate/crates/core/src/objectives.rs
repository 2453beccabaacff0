//! Training objectives: cross-entropy, the temporal clustering loss with
//! momentum class prototypes, and Mixup.
//!
//! The clustering loss has two parts over the classes present in a batch:
//!
//! * intra: `(1/P) Σ_i (1/T_i) Σ_t ‖f_t − μ_i‖²`
//! * inter: `(1/P) Σ_i Σ_{j≠i} (‖μ_i − μ_j‖² + δ)⁻¹` over ordered pairs
//!
//! with prototypes `μ_i = γ μ_i^{prev} + (1 − γ) mean_t f_t`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autograd::{inter_cluster_value, Var};
use crate::batch::Batch;
use crate::error::{arg, Error, Result};
use crate::model::Forward;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// weight of the clustering terms
    pub beta: f64,
    /// prototype momentum, in `[0, 1)`
    pub gamma: f64,
    /// inter-class margin, `> 0`
    pub delta: f64,
    /// Beta(α, α) shape for Mixup
    pub mixup_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.05,
            gamma: 0.9,
            delta: 1.0,
            mixup_alpha: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return arg("beta must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return arg("gamma must be in [0, 1)");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return arg("delta must be > 0");
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return arg("mixup_alpha must be > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototype {
    pub class_id: u32,
    pub mean: Vec<f64>,
    pub initialized: bool,
}

impl ClassPrototype {
    pub fn new(class_id: u32, dim: usize) -> Self {
        Self {
            class_id,
            mean: vec![0.0; dim],
            initialized: false,
        }
    }
}

/// Momentum update. `batch` maps a prototype slot to that class's frame
/// vectors in the current batch; slots absent from `batch` are untouched and
/// an uninitialised prototype takes the batch mean directly.
pub fn update_class_means(
    prototypes: &mut [ClassPrototype],
    batch: &BTreeMap<usize, Vec<Vec<f64>>>,
    gamma: f64,
) -> Result<()> {
    for (&slot, frames) in batch {
        let Some(proto) = prototypes.get_mut(slot) else {
            return arg(format!("no prototype slot {slot}"));
        };
        if frames.is_empty() {
            return arg(format!("class {} has an empty frame list", proto.class_id));
        }
        let dim = proto.mean.len();
        if let Some(bad) = frames.iter().find(|f| f.len() != dim) {
            return arg(format!("embedding dimension {} != prototype dimension {dim}", bad.len()));
        }
        let mut mean = vec![0.0; dim];
        for f in frames {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= frames.len() as f64;
        }
        blend_prototype(proto, &mean, gamma);
    }
    Ok(())
}

fn blend_prototype(proto: &mut ClassPrototype, batch_mean: &[f64], gamma: f64) {
    let t = if proto.initialized { 1.0 - gamma } else { 1.0 };
    for (p, &m) in proto.mean.iter_mut().zip(batch_mean) {
        *p = lerp(*p, m, t);
    }
    proto.initialized = true;
}

/// `(1 - t)·a + t·b`, exact at `t = 1` and when `a == b` so that the
/// momentum rule has exact fixed points.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if (a <= 0.0 && b >= 0.0) || (a >= 0.0 && b <= 0.0) {
        return t * b + (1.0 - t) * a;
    }
    if t == 1.0 {
        return b;
    }
    let x = a + t * (b - a);
    if (t > 1.0) == (b > a) {
        x.max(b)
    } else {
        x.min(b)
    }
}

/// Intra-class compactness over `(prototype slot, frame vector)` pairs.
pub fn intra_loss(frames: &[(usize, &[f64])], prototypes: &[ClassPrototype]) -> Result<f64> {
    let mut per_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(slot, f) in frames {
        let Some(p) = prototypes.get(slot) else {
            return arg(format!("no prototype slot {slot}"));
        };
        if !p.initialized {
            return Err(Error::State(format!("prototype of class {} is not initialised", p.class_id)));
        }
        if p.mean.len() != f.len() {
            return arg("embedding/prototype dimension mismatch");
        }
        let d2: f64 = f.iter().zip(&p.mean).map(|(a, b)| (a - b) * (a - b)).sum();
        let e = per_class.entry(slot).or_insert((0.0, 0));
        e.0 += d2;
        e.1 += 1;
    }
    if per_class.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = per_class.values().map(|(s, n)| s / *n as f64).sum();
    Ok(total / per_class.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterLoss {
    pub value: f64,
    /// fewer than two prototypes: no pairs exist
    pub degenerate: bool,
}

/// Inter-class repulsion over ordered pairs of the given prototype means.
pub fn inter_loss(means: &[&[f64]], delta: f64) -> Result<InterLoss> {
    if means.len() < 2 {
        log::warn!("inter-class loss needs two prototypes, got {}", means.len());
        return Ok(InterLoss {
            value: 0.0,
            degenerate: true,
        });
    }
    let dim = means[0].len();
    if means.iter().any(|m| m.len() != dim) {
        return arg("prototype dimensions differ");
    }
    let flat: Vec<f64> = means.iter().flat_map(|m| m.iter().copied()).collect();
    Ok(InterLoss {
        value: inter_cluster_value(&flat, means.len(), dim, delta),
        degenerate: false,
    })
}

/// Convex combination of two samples and their per-frame one-hot labels.
pub fn mixup_pair(x_i: &Tensor, y_i: &Tensor, x_j: &Tensor, y_j: &Tensor, lambda: f64) -> Result<(Tensor, Tensor)> {
    if x_i.shape() != x_j.shape() || y_i.shape() != y_j.shape() {
        return arg(format!(
            "mixup shape mismatch: {:?}/{:?} vs {:?}/{:?}",
            x_i.shape(),
            y_i.shape(),
            x_j.shape(),
            y_j.shape()
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return arg(format!("lambda {lambda} outside [0, 1]"));
    }
    let mix = |a: &Tensor, b: &Tensor| {
        let d = a.data().iter().zip(b.data()).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect();
        Tensor::from_vec(a.shape(), d)
    };
    Ok((mix(x_i, x_j), mix(y_i, y_j)))
}

/// Draws λ ~ Beta(α, α).
pub fn sample_lambda<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Argument(e.to_string()))?;
    Ok(beta.sample(rng))
}

/// Terms of one training objective evaluation.
pub struct LossTerms {
    pub total: Var,
    pub ce: f64,
    pub intra: f64,
    pub inter: f64,
    /// per present prototype slot, the batch frame mean of `F`
    pub batch_means: BTreeMap<usize, Vec<f64>>,
}

/// `CE + β (intra + inter)` on the tape.
///
/// Prototypes entering the clustering terms are the momentum blend of the
/// stored prototype (a constant) with this batch's class means, so both terms
/// reach the embeddings; the stored prototypes are advanced by the caller
/// after the backward pass.
pub fn total_loss(
    fw: &mut Forward<'_>,
    logits: Var,
    embedding_f: Var,
    batch: &Batch,
    prototypes: &[ClassPrototype],
    config: &LossConfig,
    clustering: bool,
) -> Result<LossTerms> {
    if !batch.mask.iter().any(|&m| m) {
        return arg("every frame in the batch is masked");
    }
    let ce = fw.tape.soft_cross_entropy(logits, &batch.targets, &batch.mask);
    let ce_value = fw.value(ce).item();
    let groups = batch.class_groups();
    if !clustering || groups.is_empty() {
        return Ok(LossTerms {
            total: ce,
            ce: ce_value,
            intra: 0.0,
            inter: 0.0,
            batch_means: BTreeMap::new(),
        });
    }
    let dim = fw.value(embedding_f).dims4().1;
    let members: Vec<Vec<(usize, usize)>> = groups.iter().map(|(_, m)| m.clone()).collect();
    let mut prev = Tensor::zeros(&[groups.len(), dim]);
    let mut gammas = Vec::with_capacity(groups.len());
    for (row, (slot, _)) in groups.iter().enumerate() {
        let p = prototypes
            .get(*slot)
            .ok_or_else(|| Error::Argument(format!("no prototype slot {slot}")))?;
        if p.mean.len() != dim {
            return arg("prototype dimension does not match embedding");
        }
        if p.initialized {
            prev.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(&p.mean);
            gammas.push(config.gamma);
        } else {
            gammas.push(0.0);
        }
    }
    let means = fw.tape.group_means(embedding_f, &members);
    let batch_means = groups
        .iter()
        .enumerate()
        .map(|(row, (slot, _))| (*slot, fw.value(means).data()[row * dim..(row + 1) * dim].to_vec()))
        .collect();
    let mu = fw.tape.momentum_blend(means, &prev, &gammas);
    let intra = fw.tape.intra_cluster(embedding_f, mu, &members);
    let inter = fw.tape.inter_cluster(mu, config.delta);
    let (intra_value, inter_value) = (fw.value(intra).item(), fw.value(inter).item());
    let tc = fw.tape.add(intra, inter);
    let tc = fw.tape.scale(tc, config.beta);
    let total = fw.tape.add(ce, tc);
    Ok(LossTerms {
        total,
        ce: ce_value,
        intra: intra_value,
        inter: inter_value,
        batch_means,
    })
}

/// Advances stored prototypes with the batch means recorded by
/// [`total_loss`].
pub fn commit_prototypes(prototypes: &mut [ClassPrototype], batch_means: &BTreeMap<usize, Vec<f64>>, gamma: f64) {
    for (&slot, mean) in batch_means {
        blend_prototype(&mut prototypes[slot], mean, gamma);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn proto(class_id: u32, mean: Vec<f64>) -> ClassPrototype {
        ClassPrototype {
            class_id,
            mean,
            initialized: true,
        }
    }

    #[test]
    fn momentum_rule_scalar() {
        let mut p = vec![proto(0, vec![0.0])];
        update_class_means(&mut p, &[(0, vec![vec![1.0]])].into(), 0.9).unwrap();
        assert!((p[0].mean[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_takes_batch_mean() {
        let mut p = vec![proto(0, vec![5.0, -2.0])];
        update_class_means(&mut p, &[(0, vec![vec![1.0, 2.0], vec![3.0, 4.0]])].into(), 0.0).unwrap();
        assert_eq!(p[0].mean, vec![2.0, 3.0]);
    }

    #[test]
    fn absent_class_untouched_and_first_sight_is_direct() {
        let mut p = vec![proto(0, vec![1.0]), ClassPrototype::new(1, 1)];
        update_class_means(&mut p, &[(1, vec![vec![4.0]])].into(), 0.9).unwrap();
        assert_eq!(p[0].mean, vec![1.0]);
        assert_eq!(p[1].mean, vec![4.0]);
        assert!(p[1].initialized);
    }

    #[test]
    fn fixed_point_for_any_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let gamma = rng.random_range(0.0..1.0);
            let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mut p = vec![proto(0, mean.clone())];
            update_class_means(&mut p, &[(0, vec![mean.clone()])].into(), gamma).unwrap();
            assert_eq!(p[0].mean, mean);
            let batch: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
            update_class_means(&mut p, &[(0, vec![batch.clone()])].into(), 0.0).unwrap();
            assert_eq!(p[0].mean, batch);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut p = vec![proto(0, vec![0.0])];
        assert!(update_class_means(&mut p, &[(0, vec![vec![1.0, 2.0]])].into(), 0.5).is_err());
    }

    #[test]
    fn intra_examples() {
        let p = vec![proto(0, vec![1.0])];
        assert_eq!(intra_loss(&[(0, &[1.0][..]), (0, &[1.0][..])], &p).unwrap(), 0.0);
        assert_eq!(intra_loss(&[(0, &[3.0][..])], &p).unwrap(), 4.0);
        let fresh = vec![ClassPrototype::new(0, 1)];
        assert!(matches!(intra_loss(&[(0, &[3.0][..])], &fresh), Err(Error::State(_))));
    }

    #[test]
    fn inter_examples() {
        let (a, b) = ([0.0, 0.0], [2.0, 0.0]);
        assert!((inter_loss(&[&a, &b], 1.0).unwrap().value - 0.2).abs() < 1e-15);
        assert!((inter_loss(&[&a, &a], 1.0).unwrap().value - 1.0).abs() < 1e-15);
        let single = inter_loss(&[&a], 1.0).unwrap();
        assert!(single.degenerate && single.value == 0.0);
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let xi = Tensor::full(&[3, 4, 2], 0.0);
        let xj = Tensor::full(&[3, 4, 2], 2.0);
        let yi = Tensor::from_vec(&[2, 4], vec![1., 1., 1., 1., 0., 0., 0., 0.]);
        let yj = Tensor::from_vec(&[2, 4], vec![0., 0., 0., 0., 1., 1., 1., 1.]);
        let (x, y) = mixup_pair(&xi, &yi, &xj, &yj, 1.0).unwrap();
        assert_eq!((x, y), (xi.clone(), yi.clone()));
        let (x, _) = mixup_pair(&xi, &yi, &xj, &yj, 0.5).unwrap();
        assert!(x.data().iter().all(|&v| v == 1.0));
        assert!(mixup_pair(&xi, &yi, &Tensor::zeros(&[3, 4, 1]), &yj, 0.5).is_err());
    }

    #[test]
    fn beta_lambda_mean_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_lambda(&mut rng, 0.2).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }
}
