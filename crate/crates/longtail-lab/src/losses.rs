//! Loss kernels with analytic gradients with respect to the logits.
//!
//! Every kernel returns the batch-mean loss together with the gradient of
//! that mean, so SGD updates are batch-size independent. The group-softmax
//! loss activates, per proposal, its own group plus the background group;
//! other groups see the proposal only when it is drawn as one of their
//! sampled "others" instances.

use rand::prelude::*;

use crate::catalog::{ClassCatalog, GroupPartition, BACKGROUND};
use crate::error::{Error, Result};

/// Batch-mean loss and its gradient, flat `K x D` row-major.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub loss: f64,
    pub dlogits: Vec<f64>,
}

/// Stabilized softmax over one slice: p_i = exp(z_i) / sum exp(z_k).
pub fn softmax_probs(z: &[f64]) -> Vec<f64> {
    assert!(!z.is_empty(), "softmax over an empty slice");
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// log(sum exp(z)) with max subtraction.
fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn check_labels(labels: &[u32], dim: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= dim) {
        return Err(Error::shape(format!("label {bad} out of range for {dim} logits")));
    }
    Ok(())
}

/// Plain softmax cross entropy over the (C+1)-column layout.
pub fn softmax_ce(logits: &[f64], dim: usize, labels: &[u32]) -> Result<LossResult> {
    reweight_softmax_ce(logits, dim, labels, None)
}

/// Softmax cross entropy with per-category loss weights; `alpha[label]`
/// scales both the per-proposal loss and its gradient.
pub fn reweight_softmax_ce(
    logits: &[f64],
    dim: usize,
    labels: &[u32],
    alpha: Option<&[f64]>,
) -> Result<LossResult> {
    let k = labels.len();
    if logits.len() != k * dim {
        return Err(Error::shape("logit buffer does not match batch size"));
    }
    check_labels(labels, dim)?;
    if let Some(a) = alpha {
        if a.len() != dim {
            return Err(Error::shape("alpha length must equal the logit dimension"));
        }
    }
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; logits.len()];
    let inv_k = 1.0 / k as f64;
    for (row, &label) in labels.iter().enumerate() {
        let z = &logits[row * dim..(row + 1) * dim];
        let w = alpha.map_or(1.0, |a| a[label as usize]);
        let lse = log_sum_exp(z);
        loss += w * (lse - z[label as usize]);
        let dl = &mut dlogits[row * dim..(row + 1) * dim];
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|&v| (v - max).exp()).sum();
        for (j, out) in dl.iter_mut().enumerate() {
            let p = (z[j] - max).exp() / denom;
            *out = w * inv_k * (p - f64::from(j == label as usize));
        }
    }
    Ok(LossResult { loss: loss * inv_k, dlogits })
}

/// Per-category weights: alpha_j = 1/N(j) normalized by the foreground mean
/// and clipped to [0.01, 5]; alpha_0 = 1. Zero counts are treated as 1.
pub fn compute_alpha(catalog: &ClassCatalog) -> Vec<f64> {
    let raw: Vec<f64> = catalog.counts().iter().map(|&n| 1.0 / n.max(1) as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let mut alpha = Vec::with_capacity(raw.len() + 1);
    alpha.push(1.0);
    for v in raw {
        alpha.push((v / mean).clamp(0.01, 5.0));
    }
    alpha
}

/// Which proposals each group trains on in one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPlan {
    /// One entry per foreground group.
    pub groups: Vec<GroupActivation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroupActivation {
    /// Proposals whose label is a member of the group, with their member slot.
    pub normals: Vec<(usize, usize)>,
    /// Proposals sampled as the group's "others" instances.
    pub others: Vec<usize>,
}

/// Round half-up of the others budget m_n = beta * sum N_batch(i).
fn others_budget(beta: f64, normal_count: usize) -> usize {
    (beta * normal_count as f64 + 0.5).floor() as usize
}

/// Build the batch activation plan. Groups with no normal activation are
/// ignored entirely; every other group samples `round(beta * N_batch)`
/// others proposals uniformly without replacement from the proposals whose
/// label lies outside the group (background included), capped at pool size.
pub fn plan_activations(
    labels: &[u32],
    partition: &GroupPartition,
    beta: f64,
    rng: &mut impl Rng,
) -> ActivationPlan {
    let n_groups = partition.num_fg_groups();
    let mut groups: Vec<GroupActivation> = vec![GroupActivation::default(); n_groups];
    for (k, &label) in labels.iter().enumerate() {
        if let (Some(g), Some(slot)) = (partition.group_of(label), partition.slot_of(label)) {
            groups[g].normals.push((k, slot));
        }
    }
    if partition.has_others() && beta > 0.0 {
        for (n, activation) in groups.iter_mut().enumerate() {
            if activation.normals.is_empty() {
                continue;
            }
            let mut pool: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|&(_, &l)| partition.group_of(l) != Some(n))
                .map(|(k, _)| k)
                .collect();
            let budget = others_budget(beta, activation.normals.len()).min(pool.len());
            // Partial Fisher-Yates: the first `budget` entries are a uniform
            // draw without replacement.
            for i in 0..budget {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(budget);
            pool.sort_unstable();
            activation.others = pool;
        }
    }
    ActivationPlan { groups }
}

/// Group softmax loss under a fixed activation plan.
///
/// Foreground groups apply softmax CE over their slice with the target
/// remapped to the proposal's own slot (normals) or the others slot
/// (sampled others). The background group applies independent per-node
/// sigmoid CE with complementary one-hot targets on every proposal.
/// Gradients are exactly zero on non-activated slices.
pub fn bags_loss_with_plan(
    logits: &[f64],
    labels: &[u32],
    partition: &GroupPartition,
    plan: &ActivationPlan,
) -> Result<LossResult> {
    let dim = partition.logit_dim();
    let k = labels.len();
    if logits.len() != k * dim {
        return Err(Error::shape("logit buffer does not match the group layout"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > partition.num_foreground()) {
        return Err(Error::shape(format!("label {bad} out of range")));
    }
    if plan.groups.len() != partition.num_fg_groups() {
        return Err(Error::shape("activation plan does not match the partition"));
    }
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; logits.len()];
    let inv_k = 1.0 / k as f64;

    for (n, activation) in plan.groups.iter().enumerate() {
        if activation.normals.is_empty() && activation.others.is_empty() {
            continue;
        }
        let slice = partition.group_slice(n);
        let others_target = partition.others_index(n).map(|idx| idx - slice.start);
        let normals = activation.normals.iter().map(|&(row, slot)| (row, slot));
        let others = activation
            .others
            .iter()
            .map(|&row| (row, others_target.expect("others sampled only when the slot exists")));
        for (row, target) in normals.chain(others) {
            let z = &logits[row * dim + slice.start..row * dim + slice.end];
            let lse = log_sum_exp(z);
            loss += lse - z[target];
            let p = softmax_probs(z);
            let dl = &mut dlogits[row * dim + slice.start..row * dim + slice.end];
            for (j, out) in dl.iter_mut().enumerate() {
                *out += inv_k * (p[j] - f64::from(j == target));
            }
        }
    }

    if let (Some(bg_idx), Some(others_idx)) = (partition.g0_background_index(), partition.g0_others_index()) {
        for (row, &label) in labels.iter().enumerate() {
            let is_bg = label == BACKGROUND;
            let z_bg = logits[row * dim + bg_idx];
            let z_ot = logits[row * dim + others_idx];
            let (t_bg, t_ot) = if is_bg { (1.0, 0.0) } else { (0.0, 1.0) };
            loss += sigmoid_ce(z_bg, t_bg) + sigmoid_ce(z_ot, t_ot);
            dlogits[row * dim + bg_idx] += inv_k * (sigmoid(z_bg) - t_bg);
            dlogits[row * dim + others_idx] += inv_k * (sigmoid(z_ot) - t_ot);
        }
    }

    Ok(LossResult { loss: loss * inv_k, dlogits })
}

/// Group softmax loss with others sampling; draws the plan from `rng`.
pub fn bags_loss(
    logits: &[f64],
    labels: &[u32],
    partition: &GroupPartition,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<LossResult> {
    if beta < 0.0 {
        return Err(Error::config("beta must be non-negative"));
    }
    let plan = plan_activations(labels, partition, beta, rng);
    bags_loss_with_plan(logits, labels, partition, &plan)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z), overflow-safe.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Per-node binary cross entropy -t ln s - (1-t) ln(1-s) with s = sigmoid(z).
fn sigmoid_ce(z: f64, target: f64) -> f64 {
    // max(z,0) - z*t + ln(1 + e^-|z|)
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

/// Standalone background-group kernel: two logits per proposal
/// (background, foreground-others) with complementary one-hot targets.
pub fn g0_sigmoid_ce(logits: &[f64], is_background: &[bool]) -> Result<LossResult> {
    let k = is_background.len();
    if logits.len() != k * 2 {
        return Err(Error::shape("background-group kernel expects two logits per proposal"));
    }
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; logits.len()];
    let inv_k = 1.0 / k as f64;
    for (row, &bg) in is_background.iter().enumerate() {
        let (t_bg, t_ot) = if bg { (1.0, 0.0) } else { (0.0, 1.0) };
        let z_bg = logits[row * 2];
        let z_ot = logits[row * 2 + 1];
        loss += sigmoid_ce(z_bg, t_bg) + sigmoid_ce(z_ot, t_ot);
        dlogits[row * 2] = inv_k * (sigmoid(z_bg) - t_bg);
        dlogits[row * 2 + 1] = inv_k * (sigmoid(z_ot) - t_ot);
    }
    Ok(LossResult { loss: loss * inv_k, dlogits })
}

/// Sigmoid focal loss over the (C+1) layout with one-hot targets:
/// per node -(1 - p_t)^gamma ln(p_t), summed over nodes, batch-mean.
pub fn sigmoid_focal_ce(logits: &[f64], dim: usize, labels: &[u32], gamma: f64) -> Result<LossResult> {
    if gamma < 0.0 {
        return Err(Error::config("gamma must be non-negative"));
    }
    let k = labels.len();
    if logits.len() != k * dim {
        return Err(Error::shape("logit buffer does not match batch size"));
    }
    check_labels(labels, dim)?;
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; logits.len()];
    let inv_k = 1.0 / k as f64;
    for (row, &label) in labels.iter().enumerate() {
        for j in 0..dim {
            let z = logits[row * dim + j];
            let s = sigmoid(z);
            let target = j == label as usize;
            // The s(1-s) chain factor is folded into the closed forms so
            // they stay finite as p_t -> 1:
            //   t=1: d/dz = g*s*(1-s)^g*ln(s) - (1-s)^(g+1)
            //   t=0: d/dz = -g*s^g*(1-s)*ln(1-s) + s^(g+1)
            let (term, grad) = if target {
                let one_ms = sigmoid(-z);
                let log_s = -softplus(-z);
                let focal = one_ms.powf(gamma);
                (-focal * log_s, gamma * s * focal * log_s - one_ms * focal)
            } else {
                let one_ms = sigmoid(-z);
                let log_1ms = -softplus(z);
                let focal = s.powf(gamma);
                (-focal * log_1ms, -gamma * focal * one_ms * log_1ms + s * focal)
            };
            loss += term;
            dlogits[row * dim + j] = inv_k * grad;
        }
    }
    Ok(LossResult { loss: loss * inv_k, dlogits })
}
