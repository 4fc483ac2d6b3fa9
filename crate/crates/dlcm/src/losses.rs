//! Listwise training objectives: ListMLE, SoftRank, and Attention Rank.
//!
//! Each loss maps a vector of model scores for one query's real (unpadded)
//! documents to a scalar graph node. Labels are graded 0..=4 and
//! `initial_order[i]` is document i's rank in the initial list, used for
//! deterministic tie-breaking.

use crate::autograd::{GradError, Graph, Tensor, Var};
use crate::metrics::{discount, gain};

/// Shared smoothing deviation for SoftRank score noise.
pub const DEFAULT_SIGMA_S: f32 = 0.1;

/// Which listwise objective to train with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    ListMle,
    SoftRank { sigma_s: f32 },
    /// `softmax_scores` swaps the rectified-exponential score attention for
    /// a softmax, which keeps gradients alive on all-nonpositive scores.
    AttRank { softmax_scores: bool },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::ListMle => "listmle",
            LossKind::SoftRank { .. } => "softrank",
            LossKind::AttRank { .. } => "attrank",
        }
    }
}

/// Dispatch on the loss kind.
pub fn loss(
    g: &mut Graph,
    kind: LossKind,
    scores: Var,
    labels: &[u8],
    initial_order: &[usize],
) -> Result<Var, GradError> {
    match kind {
        LossKind::ListMle => listmle_loss(g, scores, labels, initial_order),
        LossKind::SoftRank { sigma_s } => softrank_loss(g, scores, labels, initial_order, sigma_s),
        LossKind::AttRank { softmax_scores } => attrank_loss(g, scores, labels, softmax_scores),
    }
}

fn check_inputs(
    g: &Graph,
    scores: Var,
    labels: &[u8],
    initial_order: &[usize],
) -> Result<usize, GradError> {
    let m = labels.len();
    let shape = g.value(scores).shape().to_vec();
    if shape != [m] || initial_order.len() != m || m == 0 {
        return Err(GradError::InvalidShape {
            op: "loss",
            shape,
            reason: "scores, labels and initial_order must share length m >= 1",
        });
    }
    Ok(m)
}

/// The ideal permutation for ListMLE: labels descending, ties broken by
/// initial rank ascending.
fn best_list(labels: &[u8], initial_order: &[usize]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..labels.len()).collect();
    perm.sort_by(|&a, &b| {
        labels[b]
            .cmp(&labels[a])
            .then(initial_order[a].cmp(&initial_order[b]))
    });
    perm
}

/// `log(e^a + e^b)` with max-subtraction stabilization.
fn logaddexp(g: &mut Graph, a: Var, b: Var) -> Result<Var, GradError> {
    let pair = g.stack_scalars(&[a, b])?;
    let m = g.max_axis(pair, 0)?;
    let shifted = g.sub(pair, m)?;
    let e = g.exp(shifted);
    let s = g.sum_all(e);
    let l = g.log(s);
    g.add(l, m)
}

/// Negative log likelihood of the ideal permutation under sequential
/// softmax selection: `sum_i [log sum_{j>=i} e^{S_j} - S_i]`.
pub fn listmle_loss(
    g: &mut Graph,
    scores: Var,
    labels: &[u8],
    initial_order: &[usize],
) -> Result<Var, GradError> {
    let m = check_inputs(g, scores, labels, initial_order)?;
    let perm = best_list(labels, initial_order);
    let sorted = g.gather(scores, &perm)?;
    let elems: Vec<Var> = (0..m)
        .map(|i| g.gather(sorted, &[i]))
        .collect::<Result<_, _>>()?;

    // Suffix log-sum-exp from the tail upward.
    let mut lses = vec![elems[m - 1]];
    for i in (0..m - 1).rev() {
        let prev = *lses.last().unwrap();
        lses.push(logaddexp(g, elems[i], prev)?);
    }
    let lse_vec = g.stack_scalars(&lses)?;
    let sum_lse = g.sum_all(lse_vec);
    let sum_scores = g.sum_all(sorted);
    g.sub(sum_lse, sum_scores)
}

/// Probability that a document with mean score `si` outranks one with mean
/// score `sj` when both scores carry independent N(0, sigma^2) noise.
pub fn softrank_pair_prob(si: f64, sj: f64, sigma: f64) -> f64 {
    assert!(sigma > 0.0, "sigma_s must be positive");
    crate::autograd::normal_cdf((si - sj) / (sigma * std::f64::consts::SQRT_2))
}

/// Rank distribution per document: row j holds P(doc j lands at rank r).
///
/// Starting from a point mass at rank 1, every other document is folded in
/// one at a time in initial-list order; each fold-in shifts mass down by one
/// rank with the pairwise win probability.
pub fn softrank_rank_dist(
    scores: &[f64],
    initial_order: &[usize],
    sigma: f64,
) -> Vec<Vec<f64>> {
    let m = scores.len();
    let fold = fold_order(initial_order);
    let mut dist = Vec::with_capacity(m);
    for j in 0..m {
        let mut p = vec![0.0f64; m];
        p[0] = 1.0;
        for &i in &fold {
            if i == j {
                continue;
            }
            let pi = softrank_pair_prob(scores[i], scores[j], sigma);
            let mut next = vec![0.0f64; m];
            for r in 0..m {
                let shifted = if r > 0 { p[r - 1] } else { 0.0 };
                next[r] = shifted * pi + p[r] * (1.0 - pi);
            }
            p = next;
        }
        dist.push(p);
    }
    dist
}

/// Documents in ascending initial rank, the fold-in order of the recursion.
fn fold_order(initial_order: &[usize]) -> Vec<usize> {
    let mut fold: Vec<usize> = (0..initial_order.len()).collect();
    fold.sort_by_key(|&i| initial_order[i]);
    fold
}

/// Expected NDCG over the smoothed rank distribution (f64 reference route).
pub fn softrank_expected_ndcg(
    scores: &[f64],
    labels: &[u8],
    initial_order: &[usize],
    sigma: f64,
) -> f64 {
    let m = scores.len();
    let ideal: f64 = {
        let mut sorted = labels.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted
            .iter()
            .enumerate()
            .map(|(r, &y)| gain(y) * discount(r + 1))
            .sum()
    };
    if ideal == 0.0 {
        return 0.0;
    }
    let dist = softrank_rank_dist(scores, initial_order, sigma);
    let mut expected = 0.0;
    for j in 0..m {
        for (r, p) in dist[j].iter().enumerate() {
            expected += p * gain(labels[j]) * discount(r + 1);
        }
    }
    expected / ideal
}

/// Negative expected NDCG under Gaussian-smoothed scores, differentiable
/// with respect to the scores. Defined as 0 when all labels are zero.
pub fn softrank_loss(
    g: &mut Graph,
    scores: Var,
    labels: &[u8],
    initial_order: &[usize],
    sigma_s: f32,
) -> Result<Var, GradError> {
    let m = check_inputs(g, scores, labels, initial_order)?;
    assert!(sigma_s > 0.0, "sigma_s must be positive");
    let ideal: f64 = {
        let mut sorted = labels.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted
            .iter()
            .enumerate()
            .map(|(r, &y)| gain(y) * discount(r + 1))
            .sum()
    };
    if ideal == 0.0 {
        return Ok(g.constant_scalar(0.0));
    }

    let fold = fold_order(initial_order);
    let elems: Vec<Var> = (0..m)
        .map(|i| g.gather(scores, &[i]))
        .collect::<Result<_, _>>()?;
    let inv_noise =
        g.constant_scalar((1.0 / (sigma_s as f64 * std::f64::consts::SQRT_2)) as f32);
    let one = g.constant_scalar(1.0);
    let discounts = g.leaf(Tensor::vector(
        (0..m).map(|r| discount(r + 1) as f32).collect(),
    ));

    let mut point_mass = vec![0.0f32; m];
    point_mass[0] = 1.0;
    let mut contribs = Vec::with_capacity(m);
    for j in 0..m {
        let mut p = g.leaf(Tensor::vector(point_mass.clone()));
        for &i in &fold {
            if i == j {
                continue;
            }
            let diff = g.sub(elems[i], elems[j])?;
            let z = g.mul(diff, inv_noise)?;
            let pi = g.normal_cdf(z);
            let shifted = g.shift_down(p)?;
            let moved = g.mul(shifted, pi)?;
            let stay_p = g.sub(one, pi)?;
            let stayed = g.mul(p, stay_p)?;
            p = g.add(moved, stayed)?;
        }
        let weighted = g.mul(p, discounts)?;
        let dot = g.sum_all(weighted);
        let gj = g.constant_scalar(gain(labels[j]) as f32);
        contribs.push(g.mul(dot, gj)?);
    }
    let stacked = g.stack_scalars(&contribs)?;
    let expected_dcg = g.sum_all(stacked);
    let neg_inv_ideal = g.constant_scalar((-1.0 / ideal) as f32);
    g.mul(expected_dcg, neg_inv_ideal)
}

/// Rectified exponential: `e^x` for positive x, 0 otherwise.
fn psi(x: f64) -> f64 {
    if x > 0.0 {
        x.exp()
    } else {
        0.0
    }
}

/// Label-side attention allocation of Attention Rank. All-zero labels give
/// the all-zeros distribution.
pub fn attention_targets(labels: &[u8]) -> Vec<f64> {
    let raw: Vec<f64> = labels.iter().map(|&y| psi(y as f64)).collect();
    let denom: f64 = raw.iter().sum();
    if denom == 0.0 {
        return vec![0.0; labels.len()];
    }
    raw.into_iter().map(|v| v / denom).collect()
}

/// Cross entropy between the label attention distribution and the score
/// attention distribution, both through the rectified exponential (or a
/// softmax on the score side when `softmax_scores` is set).
pub fn attrank_loss(
    g: &mut Graph,
    scores: Var,
    labels: &[u8],
    softmax_scores: bool,
) -> Result<Var, GradError> {
    let m = labels.len();
    let shape = g.value(scores).shape().to_vec();
    if shape != [m] || m == 0 {
        return Err(GradError::InvalidShape {
            op: "attrank_loss",
            shape,
            reason: "scores and labels must share length m >= 1",
        });
    }
    let targets = g.leaf(Tensor::vector(
        attention_targets(labels).iter().map(|&v| v as f32).collect(),
    ));
    let score_attn = if softmax_scores {
        g.softmax_lastaxis(scores)
    } else {
        let psi_s = g.rect_exp(scores);
        let denom = g.sum_all(psi_s);
        let inv = g.clamped_reciprocal(denom);
        g.mul(psi_s, inv)?
    };
    let one = g.constant_scalar(1.0);
    let pos = g.clamp(score_attn, 1e-12, 1.0);
    let log_pos = g.log(pos);
    let neg_attn = g.sub(one, score_attn)?;
    let neg_c = g.clamp(neg_attn, 1e-12, 1.0);
    let log_neg = g.log(neg_c);
    let anti_targets = g.sub(one, targets)?;
    let t1 = g.mul(targets, log_pos)?;
    let t2 = g.mul(anti_targets, log_neg)?;
    let both = g.add(t1, t2)?;
    let total = g.sum_all(both);
    Ok(g.neg(total))
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rank_dist_rows_are_stochastic(
            scores in proptest::collection::vec(-2.0f64..2.0, 1..9),
            sigma in 0.01f64..1.0,
        ) {
            let order: Vec<usize> = (0..scores.len()).collect();
            let dist = softrank_rank_dist(&scores, &order, sigma);
            for row in dist {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9, "row sums to {sum}");
                for p in row {
                    prop_assert!((-1e-12..=1.0 + 1e-12).contains(&p));
                }
            }
        }

        #[test]
        fn listmle_nonnegative(
            scores in proptest::collection::vec(-5.0f32..5.0, 1..7),
            seed in 0u64..500,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<u8> = (0..scores.len()).map(|_| rng.random_range(0..5)).collect();
            let order: Vec<usize> = (0..scores.len()).collect();
            let mut g = Graph::new();
            let sv = g.leaf(Tensor::vector(scores.clone()));
            let l = listmle_loss(&mut g, sv, &labels, &order).unwrap();
            prop_assert!(g.value(l).item() >= -1e-6);
        }
    }
}
