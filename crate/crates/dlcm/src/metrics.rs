//! Ranking quality metrics, significance testing, and pairwise analysis.

use std::collections::HashSet;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::QueryGroup;

/// Highest relevance grade; grades run 0..=4.
pub const MAX_GRADE: u8 = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Exponential gain used by NDCG and the SoftRank objective: `2^y - 1`.
pub fn gain(grade: u8) -> f64 {
    ((1u32 << grade) - 1) as f64
}

/// Position discount for 1-based rank r: `1 / log2(r + 1)`.
pub fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

fn dcg_at_k(labels: &[u8], k: usize) -> f64 {
    labels
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) * discount(i + 1))
        .sum()
}

/// DCG of the label-sorted ideal list, truncated at k.
pub fn ideal_dcg_at_k(labels: &[u8], k: usize) -> f64 {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    dcg_at_k(&sorted, k)
}

/// NDCG@k over labels listed in rank order. Returns 0 when the ideal DCG
/// is 0 (all labels zero).
pub fn ndcg_at_k(ranked_labels: &[u8], k: usize) -> f64 {
    assert!(k >= 1, "cutoff must be >= 1");
    let ideal = ideal_dcg_at_k(ranked_labels, k);
    if ideal == 0.0 {
        return 0.0;
    }
    dcg_at_k(ranked_labels, k) / ideal
}

/// Stopping probability for ERR: `(2^g - 1) / 2^MAX_GRADE`.
fn err_stop(grade: u8) -> f64 {
    gain(grade) / (1u32 << MAX_GRADE) as f64
}

/// ERR@k over labels listed in rank order.
pub fn err_at_k(ranked_labels: &[u8], k: usize) -> f64 {
    assert!(k >= 1, "cutoff must be >= 1");
    let mut total = 0.0;
    let mut continue_p = 1.0;
    for (i, &g) in ranked_labels.iter().take(k).enumerate() {
        let r = err_stop(g);
        total += continue_p * r / (i + 1) as f64;
        continue_p *= 1.0 - r;
    }
    total
}

/// Two-sided Fisher randomization test over paired per-query metrics.
///
/// Each permutation flips every pair with probability one half; the p-value
/// uses add-one smoothing: `(hits + 1) / (permutations + 1)`.
pub fn fisher_randomization(
    a: &[f64],
    b: &[f64],
    permutations: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Contract(format!(
            "fisher_randomization: {} vs {} queries",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(MetricsError::Contract(
            "fisher_randomization needs at least 2 queries".into(),
        ));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = diffs.iter().sum::<f64>().abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..permutations {
        let mut sum = 0.0;
        for &d in &diffs {
            if rng.random::<bool>() {
                sum -= d;
            } else {
                sum += d;
            }
        }
        if sum.abs() >= observed {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (permutations + 1) as f64)
}

/// Negative-pair count per document: how many documents with a strictly
/// lower label are ranked above it. `ranking[r]` is the document at rank r.
pub fn negpair_counts(ranking: &[usize], labels: &[u8]) -> Vec<usize> {
    let mut np = vec![0usize; labels.len()];
    for (r, &d) in ranking.iter().enumerate() {
        for &above in &ranking[..r] {
            if labels[above] < labels[d] {
                np[d] += 1;
            }
        }
    }
    np
}

/// One query's paired rankings for NegPair analysis.
pub struct RankingPair<'a> {
    pub baseline: &'a [usize],
    pub model: &'a [usize],
    pub labels: &'a [u8],
}

/// Mean NegPair reduction per relevance label.
#[derive(Debug, Clone)]
pub struct LabelReduction {
    pub label: u8,
    /// Queries containing at least one document with this label.
    pub queries: usize,
    /// Reduction averaged per document within a query, then across queries.
    pub mean_reduction: f64,
    /// Baseline NegPair count averaged the same way.
    pub mean_baseline_np: f64,
}

fn check_pair(q: &RankingPair) -> Result<(), MetricsError> {
    let m = q.labels.len();
    let valid = |r: &[usize]| {
        r.len() == m && {
            let s: HashSet<usize> = r.iter().copied().collect();
            s.len() == m && r.iter().all(|&d| d < m)
        }
    };
    if !valid(q.baseline) || !valid(q.model) {
        return Err(MetricsError::Contract(
            "rankings must be permutations of the same documents".into(),
        ));
    }
    Ok(())
}

/// NegPair reductions aggregated per label, averaged first within each
/// query and then across queries.
pub fn negpair_analysis(queries: &[RankingPair]) -> Result<Vec<LabelReduction>, MetricsError> {
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); (MAX_GRADE + 1) as usize];
    for q in queries {
        check_pair(q)?;
        let np_base = negpair_counts(q.baseline, q.labels);
        let np_model = negpair_counts(q.model, q.labels);
        for label in 0..=MAX_GRADE {
            let docs: Vec<usize> = (0..q.labels.len())
                .filter(|&d| q.labels[d] == label)
                .collect();
            if docs.is_empty() {
                continue;
            }
            let red: f64 = docs
                .iter()
                .map(|&d| np_base[d] as f64 - np_model[d] as f64)
                .sum::<f64>()
                / docs.len() as f64;
            let base: f64 =
                docs.iter().map(|&d| np_base[d] as f64).sum::<f64>() / docs.len() as f64;
            let slot = &mut acc[label as usize];
            slot.0 += 1;
            slot.1 += red;
            slot.2 += base;
        }
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(label, (queries, red, base))| LabelReduction {
            label: label as u8,
            queries,
            mean_reduction: if queries > 0 { red / queries as f64 } else { 0.0 },
            mean_baseline_np: if queries > 0 { base / queries as f64 } else { 0.0 },
        })
        .collect())
}

/// NegPair reduction on top-grade documents, bucketed by how many perfect
/// (label-4) documents each query holds.
#[derive(Debug, Clone)]
pub struct PerfectBucket {
    pub perfect_docs: usize,
    pub queries: usize,
    pub mean_reduction: f64,
    pub mean_baseline_np: f64,
    /// `mean_reduction / mean_baseline_np`, or 0 for an empty denominator.
    pub proportion: f64,
}

/// Queries with zero perfect documents are excluded entirely.
pub fn bucket_by_perfect_count(queries: &[RankingPair]) -> Result<Vec<PerfectBucket>, MetricsError> {
    use std::collections::BTreeMap;
    let mut buckets: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for q in queries {
        check_pair(q)?;
        let perfect: Vec<usize> = (0..q.labels.len())
            .filter(|&d| q.labels[d] == MAX_GRADE)
            .collect();
        if perfect.is_empty() {
            continue;
        }
        let np_base = negpair_counts(q.baseline, q.labels);
        let np_model = negpair_counts(q.model, q.labels);
        let red: f64 = perfect
            .iter()
            .map(|&d| np_base[d] as f64 - np_model[d] as f64)
            .sum::<f64>()
            / perfect.len() as f64;
        let base: f64 =
            perfect.iter().map(|&d| np_base[d] as f64).sum::<f64>() / perfect.len() as f64;
        let slot = buckets.entry(perfect.len()).or_insert((0, 0.0, 0.0));
        slot.0 += 1;
        slot.1 += red;
        slot.2 += base;
    }
    Ok(buckets
        .into_iter()
        .map(|(perfect_docs, (queries, red, base))| {
            let mean_reduction = red / queries as f64;
            let mean_baseline_np = base / queries as f64;
            PerfectBucket {
                perfect_docs,
                queries,
                mean_reduction,
                mean_baseline_np,
                proportion: if mean_baseline_np > 0.0 {
                    mean_reduction / mean_baseline_np
                } else {
                    0.0
                },
            }
        })
        .collect())
}

/// Per-query metric values at each cutoff.
#[derive(Debug, Clone)]
pub struct QueryMetrics {
    pub qid: String,
    pub ndcg: Vec<f64>,
    pub err: Vec<f64>,
}

/// Per-query and aggregate metric values with optional significance
/// annotations against a baseline report.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub cutoffs: Vec<usize>,
    pub per_query: Vec<QueryMetrics>,
    pub mean_ndcg: Vec<f64>,
    pub mean_err: Vec<f64>,
    /// p-values per cutoff, (ndcg, err), present when compared to a baseline.
    pub significance: Option<Vec<(f64, f64)>>,
}

impl EvalReport {
    /// Evaluate full-list rankings (document indices in rank order), one per
    /// group, in group order. Queries with all-zero labels contribute 0.
    pub fn from_rankings(
        groups: &[QueryGroup],
        rankings: &[Vec<usize>],
        cutoffs: &[usize],
    ) -> Result<Self, MetricsError> {
        if groups.len() != rankings.len() {
            return Err(MetricsError::Contract(format!(
                "{} groups but {} rankings",
                groups.len(),
                rankings.len()
            )));
        }
        let mut per_query = Vec::with_capacity(groups.len());
        for (g, ranking) in groups.iter().zip(rankings) {
            let ranked_labels: Vec<u8> = ranking.iter().map(|&d| g.labels[d]).collect();
            if ranked_labels.len() != g.num_docs() {
                return Err(MetricsError::Contract(format!(
                    "ranking for qid {} has {} docs, expected {}",
                    g.query_id,
                    ranked_labels.len(),
                    g.num_docs()
                )));
            }
            per_query.push(QueryMetrics {
                qid: g.query_id.clone(),
                ndcg: cutoffs.iter().map(|&k| ndcg_at_k(&ranked_labels, k)).collect(),
                err: cutoffs.iter().map(|&k| err_at_k(&ranked_labels, k)).collect(),
            });
        }
        let nq = per_query.len().max(1) as f64;
        let mean_over = |pick: &dyn Fn(&QueryMetrics) -> &Vec<f64>| -> Vec<f64> {
            (0..cutoffs.len())
                .map(|i| per_query.iter().map(|q| pick(q)[i]).sum::<f64>() / nq)
                .collect()
        };
        Ok(EvalReport {
            cutoffs: cutoffs.to_vec(),
            mean_ndcg: mean_over(&|q| &q.ndcg),
            mean_err: mean_over(&|q| &q.err),
            per_query,
            significance: None,
        })
    }

    /// Per-query values for one metric at a given cutoff index.
    pub fn ndcg_column(&self, cutoff_index: usize) -> Vec<f64> {
        self.per_query.iter().map(|q| q.ndcg[cutoff_index]).collect()
    }

    pub fn err_column(&self, cutoff_index: usize) -> Vec<f64> {
        self.per_query.iter().map(|q| q.err[cutoff_index]).collect()
    }

    /// Attach Fisher randomization p-values for every cutoff against a
    /// baseline evaluated on the same query set in the same order.
    pub fn attach_significance(
        &mut self,
        baseline: &EvalReport,
        permutations: usize,
        seed: u64,
    ) -> Result<(), MetricsError> {
        if baseline.per_query.len() != self.per_query.len()
            || baseline
                .per_query
                .iter()
                .zip(&self.per_query)
                .any(|(a, b)| a.qid != b.qid)
            || baseline.cutoffs != self.cutoffs
        {
            return Err(MetricsError::Contract(
                "baseline report covers a different query set or cutoffs".into(),
            ));
        }
        let mut sig = Vec::with_capacity(self.cutoffs.len());
        for i in 0..self.cutoffs.len() {
            let p_ndcg = fisher_randomization(
                &self.ndcg_column(i),
                &baseline.ndcg_column(i),
                permutations,
                seed,
            )?;
            let p_err = fisher_randomization(
                &self.err_column(i),
                &baseline.err_column(i),
                permutations,
                seed,
            )?;
            sig.push((p_ndcg, p_err));
        }
        self.significance = Some(sig);
        Ok(())
    }

    /// Tab-separated per-query table with a header row.
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write!(w, "qid")?;
        for &k in &self.cutoffs {
            write!(w, "\tndcg@{k}")?;
        }
        for &k in &self.cutoffs {
            write!(w, "\terr@{k}")?;
        }
        writeln!(w)?;
        for q in &self.per_query {
            write!(w, "{}", q.qid)?;
            for v in &q.ndcg {
                write!(w, "\t{v:.6}")?;
            }
            for v in &q.err {
                write!(w, "\t{v:.6}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// One-row aggregate table in the metric@k column layout, with `*`
    /// marking cutoffs significant at p <= 0.01 against the baseline.
    pub fn aggregate_table(&self, row_label: &str) -> String {
        let mut head = String::from("system");
        let mut row = row_label.to_string();
        for (i, &k) in self.cutoffs.iter().enumerate() {
            head.push_str(&format!("\tndcg@{k}\terr@{k}"));
            let mark = |col: usize| -> &'static str {
                match &self.significance {
                    Some(sig) => {
                        let p = if col == 0 { sig[i].0 } else { sig[i].1 };
                        if p <= 0.01 {
                            "*"
                        } else {
                            ""
                        }
                    }
                    None => "",
                }
            };
            row.push_str(&format!(
                "\t{:.4}{}\t{:.4}{}",
                self.mean_ndcg[i],
                mark(0),
                self.mean_err[i],
                mark(1)
            ));
        }
        format!("{head}\n{row}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ndcg_ideal_order_is_one() {
        assert_eq!(ndcg_at_k(&[4, 3, 2, 1, 0], 5), 1.0);
        assert_eq!(ndcg_at_k(&[2], 1), 1.0);
    }

    #[test]
    fn ndcg_hand_anchor() {
        // [0, 4] at k=2: DCG = 15/log2(3) ~ 9.4639, ideal = 15.
        let v = ndcg_at_k(&[0, 4], 2);
        assert_abs_diff_eq!(v, (15.0 / 3.0f64.log2()) / 15.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.6309, epsilon = 1e-4);
    }

    #[test]
    fn ndcg_all_zero_labels() {
        assert_eq!(ndcg_at_k(&[0, 0, 0], 3), 0.0);
    }

    #[test]
    fn err_single_perfect_doc() {
        assert_eq!(err_at_k(&[4], 1), 15.0 / 16.0);
    }

    #[test]
    fn err_two_perfect_docs() {
        let v = err_at_k(&[4, 4], 2);
        assert_abs_diff_eq!(v, 0.9375 + 0.5 * (1.0 / 16.0) * 0.9375, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.966_80, epsilon = 1e-5);
    }

    #[test]
    fn err_all_zero_grades() {
        assert_eq!(err_at_k(&[0, 0], 2), 0.0);
    }

    #[test]
    fn err_is_nondecreasing_in_k() {
        let labels = [1, 4, 0, 2, 3, 0, 1];
        let mut prev = 0.0;
        for k in 1..=labels.len() {
            let v = err_at_k(&labels, k);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn fisher_identical_runs_give_p_one() {
        let a = [0.5, 0.25, 0.75];
        let p = fisher_randomization(&a, &a, 1000, 7).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn fisher_large_gap_hits_smoothing_floor() {
        let a: Vec<f64> = (0..64).map(|i| 100.0 + i as f64).collect();
        let b: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let p = fisher_randomization(&a, &b, 999, 7).unwrap();
        assert_abs_diff_eq!(p, 1.0 / 1000.0, epsilon = 1e-12);
    }

    #[test]
    fn fisher_is_symmetric_under_same_seed() {
        let a = [0.9, 0.2, 0.4, 0.6];
        let b = [0.5, 0.3, 0.7, 0.1];
        let p1 = fisher_randomization(&a, &b, 5000, 42).unwrap();
        let p2 = fisher_randomization(&b, &a, 5000, 42).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn fisher_rejects_mismatched_sets() {
        assert!(fisher_randomization(&[1.0], &[1.0, 2.0], 10, 0).is_err());
        assert!(fisher_randomization(&[1.0], &[1.0], 10, 0).is_err());
    }

    #[test]
    fn negpair_simple_promotion() {
        // baseline [d0(label 0), d1(label 4)], model swaps them.
        let labels = [0u8, 4u8];
        let np_base = negpair_counts(&[0, 1], &labels);
        let np_model = negpair_counts(&[1, 0], &labels);
        assert_eq!(np_base[1] - np_model[1], 1);
    }

    #[test]
    fn negpair_identical_rankings_zero_reduction() {
        let labels = [3u8, 1, 0, 2];
        let r = vec![2usize, 0, 3, 1];
        let pair = RankingPair {
            baseline: &r,
            model: &r,
            labels: &labels,
        };
        let table = negpair_analysis(std::slice::from_ref(&pair)).unwrap();
        for row in table {
            assert_eq!(row.mean_reduction, 0.0);
        }
    }

    #[test]
    fn negpair_hand_counted_case() {
        // baseline [d0(0), d1(1), d2(4)], model [d2, d0, d1].
        let labels = [0u8, 1, 4];
        let np_base = negpair_counts(&[0, 1, 2], &labels);
        let np_model = negpair_counts(&[2, 0, 1], &labels);
        // The perfect doc climbs past two lower-graded docs.
        assert_eq!(np_base[2], 2);
        assert_eq!(np_model[2], 0);
        // The label-1 doc still has exactly d0 incorrectly in front of it.
        assert_eq!(np_base[1], 1);
        assert_eq!(np_model[1], 1);
    }

    #[test]
    fn negpair_reduction_can_be_negative() {
        // The model demotes the label-1 doc below a label-0 doc.
        let labels = [1u8, 0];
        let np_base = negpair_counts(&[0, 1], &labels);
        let np_model = negpair_counts(&[1, 0], &labels);
        assert_eq!(np_base[0] as i64 - np_model[0] as i64, -1);
    }

    #[test]
    fn bucket_proportion_matches_ratio() {
        assert_abs_diff_eq!(2.64 / 11.57, 0.228, epsilon = 5e-4);
    }

    #[test]
    fn bucket_excludes_queries_without_perfect_docs() {
        let labels_a = [0u8, 1];
        let ra = vec![0usize, 1];
        let labels_b = [4u8, 0];
        let rb_base = vec![1usize, 0];
        let rb_model = vec![0usize, 1];
        let pairs = vec![
            RankingPair {
                baseline: &ra,
                model: &ra,
                labels: &labels_a,
            },
            RankingPair {
                baseline: &rb_base,
                model: &rb_model,
                labels: &labels_b,
            },
        ];
        let table = bucket_by_perfect_count(&pairs).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(table[0].perfect_docs, 1);
        assert_eq!(table[0].queries, 1);
        assert_eq!(table[0].mean_reduction, 1.0);
        assert_eq!(table[0].mean_baseline_np, 1.0);
        assert_eq!(table[0].proportion, 1.0);
    }

    #[test]
    fn report_aggregate_is_mean_of_per_query() {
        let data = crate::data::parse_letor_str("4 qid:a 1:1\n0 qid:a 1:0\n0 qid:b 1:0\n").unwrap();
        let rankings = vec![vec![1, 0], vec![0]];
        let report = EvalReport::from_rankings(&data.groups, &rankings, &[1, 3]).unwrap();
        // qid a ranked [label0, label4]: ndcg@1 = 0; qid b all-zero: 0.
        assert_eq!(report.mean_ndcg[0], 0.0);
        let expected = (ndcg_at_k(&[0, 4], 3) + 0.0) / 2.0;
        assert_abs_diff_eq!(report.mean_ndcg[1], expected, epsilon = 1e-12);
        for q in &report.per_query {
            for (v, e) in q.ndcg.iter().chain(q.err.iter()).zip(std::iter::repeat(&0.0)) {
                assert!(*v >= *e && *v <= 1.0);
            }
        }
    }
}
