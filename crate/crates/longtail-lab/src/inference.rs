//! Turning trained heads into per-proposal scores over the C+1 categories.
//!
//! The group-softmax head is remapped at inference: softmax within each
//! group, others nodes of foreground groups dropped, and foreground
//! probabilities rescaled by the background group's foreground probability
//! p_0^0. The result deliberately does not sum to 1; it ranks categories.

use crate::catalog::{GroupPartition, BACKGROUND};
use crate::error::{Error, Result};
use crate::head::{HeadLayout, HeadParams};
use crate::losses::{sigmoid, softmax_probs};
use crate::synthdata::Records;

/// Scores over category ids 0..=C (0 = background). `normalized` marks
/// whether the entries form a probability vector.
#[derive(Debug, Clone)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub normalized: bool,
}

impl ScoreVector {
    pub fn argmax(&self) -> u32 {
        let mut best = 0usize;
        for (j, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = j;
            }
        }
        best as u32
    }
}

/// Anything that maps a feature to category scores.
pub trait Predictor {
    fn predict(&self, feature: &[f64]) -> Result<ScoreVector>;
}

/// Stabilized softmax over the plain (C+1) layout.
pub fn softmax_predict(logits: &[f64]) -> ScoreVector {
    ScoreVector { scores: softmax_probs(logits), normalized: true }
}

/// Group-softmax remapping of a logit vector in the partition's layout.
pub fn bags_predict(logits: &[f64], partition: &GroupPartition) -> Result<ScoreVector> {
    if logits.len() != partition.logit_dim() {
        return Err(Error::shape(format!(
            "expected {} logits for this partition, got {}",
            partition.logit_dim(),
            logits.len()
        )));
    }
    let c = partition.num_foreground();
    let mut scores = vec![0.0; c + 1];
    // per-group probabilities, others nodes dropped
    for n in 0..partition.num_fg_groups() {
        let slice = partition.group_slice(n);
        if slice.is_empty() {
            continue;
        }
        let p = softmax_probs(&logits[slice]);
        for (slot, &cat) in partition.group_members(n).iter().enumerate() {
            scores[cat as usize] = p[slot];
        }
    }
    if let Some(others_idx) = partition.g0_others_index() {
        let p_fg = sigmoid(logits[others_idx]);
        for s in scores[1..].iter_mut() {
            *s *= p_fg;
        }
        scores[0] = 1.0 - p_fg;
    }
    Ok(ScoreVector { scores, normalized: false })
}

/// Plain softmax head.
pub struct PlainSoftmaxPredictor<'a> {
    head: &'a HeadParams,
}

impl<'a> PlainSoftmaxPredictor<'a> {
    pub fn new(head: &'a HeadParams) -> Result<Self> {
        match head.layout() {
            HeadLayout::Plain { .. } => Ok(PlainSoftmaxPredictor { head }),
            HeadLayout::Bags { .. } => Err(Error::shape("plain predictor needs a plain-layout head")),
        }
    }
}

impl Predictor for PlainSoftmaxPredictor<'_> {
    fn predict(&self, feature: &[f64]) -> Result<ScoreVector> {
        Ok(softmax_predict(&self.head.forward(feature)?))
    }
}

/// Group-softmax head with inference remapping.
pub struct BagsPredictor<'a> {
    head: &'a HeadParams,
    partition: &'a GroupPartition,
}

impl<'a> BagsPredictor<'a> {
    pub fn new(head: &'a HeadParams) -> Result<Self> {
        match head.layout() {
            HeadLayout::Bags { partition } => Ok(BagsPredictor { head, partition }),
            HeadLayout::Plain { .. } => Err(Error::shape("group predictor needs a group-layout head")),
        }
    }
}

impl Predictor for BagsPredictor<'_> {
    fn predict(&self, feature: &[f64]) -> Result<ScoreVector> {
        bags_predict(&self.head.forward(feature)?, self.partition)
    }
}

/// Scale every nonzero foreground column to w_j / ||w_j||^tau. The
/// background column and the bias are left untouched.
pub fn tau_normalize(params: &HeadParams, tau: f64) -> Result<HeadParams> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::config("tau must lie in [0, 1]"));
    }
    let c = match params.layout() {
        HeadLayout::Plain { num_foreground } => *num_foreground,
        HeadLayout::Bags { .. } => {
            return Err(Error::shape("tau normalization applies to plain-layout heads"))
        }
    };
    let mut out = params.clone();
    for j in 1..=c {
        let norm = params.column_norm(j);
        if norm == 0.0 {
            continue;
        }
        let scale = norm.powf(tau).recip();
        let column: Vec<f64> = params.column(j).iter().map(|w| w * scale).collect();
        out.set_column(j, &column);
    }
    Ok(out)
}

/// The background-gated post-hoc rule: proposals the baseline classifies as
/// background keep the baseline scores; everything else takes the
/// tau-normalized head's scores.
pub struct TauSelectPredictor<'a> {
    baseline: &'a HeadParams,
    tau_normed: HeadParams,
}

impl<'a> TauSelectPredictor<'a> {
    pub fn new(baseline: &'a HeadParams, tau: f64) -> Result<Self> {
        Ok(TauSelectPredictor { baseline, tau_normed: tau_normalize(baseline, tau)? })
    }
}

impl Predictor for TauSelectPredictor<'_> {
    fn predict(&self, feature: &[f64]) -> Result<ScoreVector> {
        let base = softmax_predict(&self.baseline.forward(feature)?);
        if base.argmax() == BACKGROUND {
            Ok(base)
        } else {
            Ok(softmax_predict(&self.tau_normed.forward(feature)?))
        }
    }
}

/// Per-class arithmetic mean features over a train split; background
/// excluded. Errors if any class has no records.
pub fn ncm_build(train: &Records, num_foreground: usize) -> Result<Vec<Vec<f64>>> {
    let d = train.feature_dim;
    let mut sums = vec![vec![0.0; d]; num_foreground];
    let mut counts = vec![0usize; num_foreground];
    for i in 0..train.len() {
        let label = train.labels[i];
        if label == BACKGROUND {
            continue;
        }
        let class = label as usize - 1;
        counts[class] += 1;
        for (s, &v) in sums[class].iter_mut().zip(train.feature(i)) {
            *s += v;
        }
    }
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::data(format!("class {} has no train records for its mean", class + 1)));
        }
        for s in &mut sums[class] {
            *s /= count as f64;
        }
    }
    Ok(sums)
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of the feature against every class mean.
pub fn ncm_similarities(feature: &[f64], means: &[Vec<f64>]) -> Result<Vec<f64>> {
    let fnorm = l2_norm(feature);
    if fnorm == 0.0 {
        return Err(Error::numeric("cannot score a zero-norm feature by cosine similarity"));
    }
    means
        .iter()
        .map(|mean| {
            let mnorm = l2_norm(mean);
            if mnorm == 0.0 {
                return Err(Error::numeric("class mean has zero norm"));
            }
            Ok(feature.iter().zip(mean).map(|(a, b)| a * b).sum::<f64>() / (fnorm * mnorm))
        })
        .collect()
}

/// Softmax over cosine similarities, rescaled by the baseline's background
/// probability: foreground scores p_n * (1 - p_0), background score p_0.
pub fn ncm_predict(feature: &[f64], means: &[Vec<f64>], baseline_bg_prob: f64) -> Result<ScoreVector> {
    if !(0.0..=1.0).contains(&baseline_bg_prob) {
        return Err(Error::config("background probability must lie in [0, 1]"));
    }
    let sims = ncm_similarities(feature, means)?;
    let p = softmax_probs(&sims);
    let mut scores = Vec::with_capacity(means.len() + 1);
    scores.push(baseline_bg_prob);
    for v in p {
        scores.push(v * (1.0 - baseline_bg_prob));
    }
    Ok(ScoreVector { scores, normalized: true })
}

/// Class means gated by a plain baseline head's background probability.
pub struct NcmPredictor<'a> {
    baseline: &'a HeadParams,
    means: Vec<Vec<f64>>,
}

impl<'a> NcmPredictor<'a> {
    pub fn new(baseline: &'a HeadParams, train: &Records) -> Result<Self> {
        let c = match baseline.layout() {
            HeadLayout::Plain { num_foreground } => *num_foreground,
            HeadLayout::Bags { .. } => {
                return Err(Error::shape("the background gate needs a plain-layout baseline"))
            }
        };
        Ok(NcmPredictor { baseline, means: ncm_build(train, c)? })
    }
}

impl Predictor for NcmPredictor<'_> {
    fn predict(&self, feature: &[f64]) -> Result<ScoreVector> {
        let base = softmax_predict(&self.baseline.forward(feature)?);
        ncm_predict(feature, &self.means, base.scores[BACKGROUND as usize])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{default_boundaries, ClassCatalog};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn partition_for(counts: &[u64]) -> GroupPartition {
        let catalog = ClassCatalog::new(counts.to_vec()).unwrap();
        GroupPartition::assign(&catalog, &default_boundaries()).unwrap()
    }

    #[test]
    fn bags_rescaling_rule() {
        // p_0^0 = 0.5 with uniform group logits: each of the g members and
        // the others node gets 1/(g+1); member scores become 0.5/(g+1).
        let partition = partition_for(&[5, 6, 7]);
        let logits = vec![0.0; partition.logit_dim()];
        let scores = bags_predict(&logits, &partition).unwrap();
        assert!(!scores.normalized);
        assert!((scores.scores[0] - 0.5).abs() < 1e-15);
        for j in 1..=3 {
            assert!((scores.scores[j] - 0.5 / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bags_product_rule_example() {
        // p_0^0 = 0.5 and a member probability of 0.4 gives 0.2.
        let partition = partition_for(&[5, 6]);
        let mut logits = vec![0.0; partition.logit_dim()];
        // make cat 1 hold probability 0.4 within its 3-node slice:
        // solve softmax([x,0,0])[0] = 0.4 -> e^x/(e^x+2) = 0.4 -> x = ln(4/3)
        let slice = partition.group_slice(0);
        logits[slice.start] = (4.0f64 / 3.0).ln();
        let scores = bags_predict(&logits, &partition).unwrap();
        assert!((scores.scores[1] - 0.5 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn softmax_predict_uniform() {
        let scores = softmax_predict(&[0.0; 5]);
        assert!(scores.normalized);
        for s in &scores.scores {
            assert!((s - 0.2).abs() < 1e-15);
        }
        assert!((scores.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tau_zero_is_identity_and_tau_one_normalizes() {
        let head = HeadParams::init(HeadLayout::Plain { num_foreground: 6 }, 5, 3);
        let same = tau_normalize(&head, 0.0).unwrap();
        assert_eq!(head, same);

        let normed = tau_normalize(&head, 1.0).unwrap();
        for j in 1..=6 {
            assert!((normed.column_norm(j) - 1.0).abs() < 1e-12);
        }
        // background column and bias untouched
        assert_eq!(normed.column(0), head.column(0));
        assert_eq!(normed.bias(), head.bias());

        // idempotence at tau = 1
        let twice = tau_normalize(&normed, 1.0).unwrap();
        for (a, b) in twice.weight().iter().zip(normed.weight()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tau_select_gates_on_background() {
        let mut head = HeadParams::init(HeadLayout::Plain { num_foreground: 2 }, 2, 1);
        head.weight_mut().fill(0.0);
        // column 0 (background) responds to feature dim 0; column 2 to dim 1
        head.set_column(0, &[2.0, 0.0]);
        head.set_column(2, &[0.0, 2.0]);
        let predictor = TauSelectPredictor::new(&head, 1.0).unwrap();

        let bg_feature = [3.0, 0.0];
        let base = softmax_predict(&head.forward(&bg_feature).unwrap());
        assert_eq!(base.argmax(), BACKGROUND);
        let gated = predictor.predict(&bg_feature).unwrap();
        assert_eq!(gated.scores, base.scores);

        let fg_feature = [0.0, 3.0];
        let tau_normed = tau_normalize(&head, 1.0).unwrap();
        let expect = softmax_predict(&tau_normed.forward(&fg_feature).unwrap());
        let gated = predictor.predict(&fg_feature).unwrap();
        assert_eq!(gated.scores, expect.scores);
    }

    #[test]
    fn ncm_means_and_similarities() {
        let train = Records {
            feature_dim: 2,
            features: vec![1.0, 0.0, 0.0, 2.0, 0.0, 4.0, 5.0, 5.0],
            labels: vec![1, 2, 2, 0],
            image_ids: vec![0, 0, 0, 0],
        };
        let means = ncm_build(&train, 2).unwrap();
        assert_eq!(means[0], vec![1.0, 0.0]); // single record -> that record
        assert_eq!(means[1], vec![0.0, 3.0]);

        // feature equal to mean 1, orthogonal to mean 2
        let scores = ncm_predict(&[2.0, 0.0], &means, 0.25).unwrap();
        let sims = ncm_similarities(&[2.0, 0.0], &means).unwrap();
        assert!((sims[0] - 1.0).abs() < 1e-12);
        assert!(sims[1].abs() < 1e-12);
        assert_eq!(scores.argmax(), 1);
        assert!((scores.scores[0] - 0.25).abs() < 1e-15);

        // p_0 = 1 kills all foreground scores
        let scores = ncm_predict(&[2.0, 0.0], &means, 1.0).unwrap();
        assert!(scores.scores[1..].iter().all(|&s| s == 0.0));

        // zero-norm feature is an error; missing class is an error
        assert!(ncm_predict(&[0.0, 0.0], &means, 0.5).is_err());
        let missing = Records {
            feature_dim: 2,
            features: vec![1.0, 0.0],
            labels: vec![1],
            image_ids: vec![0],
        };
        assert!(ncm_build(&missing, 2).is_err());
    }

    #[test]
    fn ncm_similarities_match_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let means: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let feature: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sims = ncm_similarities(&feature, &means).unwrap();
        for (sim, mean) in sims.iter().zip(&means) {
            let dot: f64 = feature.iter().zip(mean).map(|(a, b)| a * b).sum();
            let oracle = dot / (l2_norm(&feature) * l2_norm(mean));
            assert!((sim - oracle).abs() <= 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn g0_shift_never_changes_foreground_argmax(seed in 0u64..2000, shift in -6.0f64..6.0) {
            let partition = partition_for(&[5, 20, 300, 4000, 8, 150]);
            let dim = partition.logit_dim();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let base = bags_predict(&logits, &partition).unwrap();
            let mut shifted = logits.clone();
            shifted[partition.g0_others_index().unwrap()] += shift;
            let moved = bags_predict(&shifted, &partition).unwrap();
            let fg_argmax = |s: &ScoreVector| {
                (1..s.scores.len())
                    .max_by(|&a, &b| s.scores[a].partial_cmp(&s.scores[b]).unwrap())
                    .unwrap()
            };
            prop_assert_eq!(fg_argmax(&base), fg_argmax(&moved));
        }

        #[test]
        fn ncm_is_scale_invariant(seed in 0u64..2000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let means: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let feature: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..1.0)).collect();
            let a = ncm_predict(&feature, &means, 0.3).unwrap();
            let scaled: Vec<f64> = feature.iter().map(|v| v * scale).collect();
            let b = ncm_predict(&scaled, &means, 0.3).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn score_entries_stay_in_unit_interval(seed in 0u64..2000) {
            let partition = partition_for(&[5, 20, 300, 4000]);
            let dim = partition.logit_dim();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..dim).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let scores = bags_predict(&logits, &partition).unwrap();
            prop_assert!(scores.scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
            let plain: Vec<f64> = (0..5).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let scores = softmax_predict(&plain);
            prop_assert!(scores.scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
        }
    }
}
