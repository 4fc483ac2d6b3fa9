//! Deterministic synthetic ranking corpora.
//!
//! Two generators:
//!
//! * [`relative_band_corpus`] grades each document by where its first
//!   feature sits relative to the maximum of that feature within its own
//!   query. The sweet spot is an interior band (around 75% of the max), so
//!   the grade is not monotone in the raw feature and no scorer that sees
//!   one document at a time can recover the ordering; the query's own list
//!   is required.
//! * [`global_linear_corpus`] grades by a fixed global linear function of
//!   the features, the case where per-document scoring is sufficient.
//!
//! Both emit 5-level grades and uniform noise features, and both are pure
//! functions of their configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::QueryGroup;

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub queries: usize,
    pub docs_per_query: usize,
    pub features: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            queries: 2000,
            docs_per_query: 20,
            features: 10,
            seed: 17,
        }
    }
}

/// Center of the rewarded band, as a fraction of the within-query maximum.
pub const BAND_CENTER: f64 = 0.75;

/// Distance-to-band thresholds for grades 4, 3, 2, 1 (else 0).
pub const BAND_EDGES: [f64; 4] = [0.05, 0.10, 0.175, 0.25];

/// Grade of a document whose signal feature is `value`, in a query whose
/// maximum signal value is `max`.
pub fn relative_band_grade(value: f64, max: f64) -> u8 {
    if max <= 0.0 {
        return 0;
    }
    let dist = (value / max - BAND_CENTER).abs();
    match BAND_EDGES.iter().position(|&e| dist <= e) {
        Some(i) => (4 - i) as u8,
        None => 0,
    }
}

/// Queries whose relevance depends on each document's signal feature
/// relative to the within-query maximum. Feature 0 carries the signal on a
/// per-query random scale; the rest is uniform noise.
pub fn relative_band_corpus(cfg: &SynthConfig) -> Vec<QueryGroup> {
    assert!(cfg.features >= 1 && cfg.docs_per_query >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut groups = Vec::with_capacity(cfg.queries);
    for q in 0..cfg.queries {
        let scale: f64 = rng.random_range(0.5..1.5);
        let values: Vec<f64> = (0..cfg.docs_per_query)
            .map(|_| rng.random::<f64>() * scale)
            .collect();
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        let mut features = vec![0.0f32; cfg.docs_per_query * cfg.features];
        let mut labels = Vec::with_capacity(cfg.docs_per_query);
        for d in 0..cfg.docs_per_query {
            features[d * cfg.features] = values[d] as f32;
            for f in 1..cfg.features {
                features[d * cfg.features + f] = rng.random::<f32>();
            }
            labels.push(relative_band_grade(values[d], max));
        }
        groups.push(QueryGroup::new(
            format!("q{q}"),
            (0..cfg.docs_per_query).map(|d| format!("q{q}-d{d}")).collect(),
            labels,
            features,
            cfg.features,
        ));
    }
    groups
}

/// Weights of the global linear relevance function (first two features).
pub const LINEAR_WEIGHTS: [f64; 2] = [0.8, 0.2];

/// Grade of a document under the global linear generator.
pub fn global_linear_grade(features: &[f32]) -> u8 {
    let u = LINEAR_WEIGHTS[0] * f64::from(features[0])
        + LINEAR_WEIGHTS[1] * f64::from(*features.get(1).unwrap_or(&0.0));
    ((u * 5.0).floor() as i64).clamp(0, 4) as u8
}

/// Queries whose relevance is a fixed monotone function of a global linear
/// combination of features; per-document scoring suffices here.
pub fn global_linear_corpus(cfg: &SynthConfig) -> Vec<QueryGroup> {
    assert!(cfg.features >= 2 && cfg.docs_per_query >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut groups = Vec::with_capacity(cfg.queries);
    for q in 0..cfg.queries {
        let mut features = vec![0.0f32; cfg.docs_per_query * cfg.features];
        let mut labels = Vec::with_capacity(cfg.docs_per_query);
        for d in 0..cfg.docs_per_query {
            for f in 0..cfg.features {
                features[d * cfg.features + f] = rng.random::<f32>();
            }
            labels.push(global_linear_grade(
                &features[d * cfg.features..(d + 1) * cfg.features],
            ));
        }
        groups.push(QueryGroup::new(
            format!("q{q}"),
            (0..cfg.docs_per_query).map(|d| format!("q{q}-d{d}")).collect(),
            labels,
            features,
            cfg.features,
        ));
    }
    groups
}

/// Split groups into train/valid/test by query position.
pub fn split(
    groups: Vec<QueryGroup>,
    train_frac: f64,
    valid_frac: f64,
) -> (Vec<QueryGroup>, Vec<QueryGroup>, Vec<QueryGroup>) {
    assert!(train_frac > 0.0 && valid_frac >= 0.0 && train_frac + valid_frac < 1.0);
    let n = groups.len();
    let train_n = ((n as f64) * train_frac).round() as usize;
    let valid_n = ((n as f64) * valid_frac).round() as usize;
    let mut it = groups.into_iter();
    let train: Vec<_> = it.by_ref().take(train_n).collect();
    let valid: Vec<_> = it.by_ref().take(valid_n).collect();
    let test: Vec<_> = it.collect();
    (train, valid, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_grade_peaks_inside_the_list() {
        // The maximum itself is distance 0.25 from the band center.
        assert_eq!(relative_band_grade(1.0, 1.0), 1);
        assert_eq!(relative_band_grade(0.75, 1.0), 4);
        assert_eq!(relative_band_grade(0.66, 1.0), 3);
        assert_eq!(relative_band_grade(0.3, 1.0), 0);
        assert_eq!(relative_band_grade(0.0, 1.0), 0);
    }

    #[test]
    fn relative_corpus_is_deterministic_and_shaped() {
        let cfg = SynthConfig {
            queries: 12,
            docs_per_query: 8,
            features: 5,
            seed: 3,
        };
        let a = relative_band_corpus(&cfg);
        let b = relative_band_corpus(&cfg);
        assert_eq!(a.len(), 12);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.features(), y.features());
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.num_docs(), 8);
            assert_eq!(x.num_features(), 5);
        }
    }

    #[test]
    fn relative_corpus_grades_match_generator_rule() {
        let cfg = SynthConfig {
            queries: 30,
            docs_per_query: 10,
            features: 3,
            seed: 5,
        };
        for g in relative_band_corpus(&cfg) {
            let values: Vec<f64> = (0..g.num_docs())
                .map(|d| f64::from(g.feature_row(d)[0]))
                .collect();
            let max = values.iter().cloned().fold(f64::MIN, f64::max);
            for (d, &v) in values.iter().enumerate() {
                assert_eq!(g.labels[d], relative_band_grade(v, max));
            }
        }
    }

    #[test]
    fn linear_corpus_orders_by_global_function() {
        let cfg = SynthConfig {
            queries: 20,
            docs_per_query: 10,
            features: 4,
            seed: 7,
        };
        for g in global_linear_corpus(&cfg) {
            for d in 0..g.num_docs() {
                assert_eq!(g.labels[d], global_linear_grade(g.feature_row(d)));
            }
            // Monotone: sorting by the linear score is label-sorted.
            let mut idx: Vec<usize> = (0..g.num_docs()).collect();
            idx.sort_by(|&a, &b| {
                let s = |d: usize| {
                    0.8 * f64::from(g.feature_row(d)[0]) + 0.2 * f64::from(g.feature_row(d)[1])
                };
                s(b).total_cmp(&s(a))
            });
            let labels: Vec<u8> = idx.iter().map(|&d| g.labels[d]).collect();
            for w in labels.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn all_grades_appear_in_both_corpora() {
        let cfg = SynthConfig {
            queries: 200,
            docs_per_query: 20,
            features: 10,
            seed: 11,
        };
        for corpus in [relative_band_corpus(&cfg), global_linear_corpus(&cfg)] {
            let mut seen = [false; 5];
            for g in &corpus {
                for &l in &g.labels {
                    seen[l as usize] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "missing grades: {seen:?}");
        }
    }

    #[test]
    fn split_fractions() {
        let cfg = SynthConfig {
            queries: 100,
            docs_per_query: 4,
            features: 2,
            seed: 1,
        };
        let groups = relative_band_corpus(&cfg);
        let (tr, va, te) = split(groups, 0.6, 0.15);
        assert_eq!(tr.len(), 60);
        assert_eq!(va.len(), 15);
        assert_eq!(te.len(), 25);
    }
}
