//! LETOR/SVMlight ranking data: parsing, per-query normalization, and
//! assembly of fixed-size top-n lists for re-ranking.
//!
//! The accepted text format is one document per line:
//!
//! ```text
//! <label> qid:<id> <index>:<value> <index>:<value> ... # optional comment
//! ```
//!
//! Feature indices are 1-based in files and 0-based in matrices. Missing
//! indices default to 0 and the feature count of a file is the maximum index
//! seen anywhere in it.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("score file does not cover (qid {qid}, doc {doc})")]
    MissingScore { qid: String, doc: usize },
    #[error("score file names unknown qid {qid} at line {line}")]
    UnknownQid { qid: String, line: usize },
    #[error("duplicate score for (qid {qid}, doc {doc}) at line {line}")]
    DuplicateScore {
        qid: String,
        doc: usize,
        line: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// One query's documents: feature matrix, graded labels, identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGroup {
    pub query_id: String,
    pub doc_ids: Vec<String>,
    pub labels: Vec<u8>,
    features: Vec<f32>,
    num_features: usize,
}

impl QueryGroup {
    pub fn new(
        query_id: String,
        doc_ids: Vec<String>,
        labels: Vec<u8>,
        features: Vec<f32>,
        num_features: usize,
    ) -> Self {
        assert_eq!(doc_ids.len(), labels.len());
        assert_eq!(features.len(), labels.len() * num_features);
        assert!(!labels.is_empty(), "query group needs at least one document");
        QueryGroup {
            query_id,
            doc_ids,
            labels,
            features,
            num_features,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn feature_row(&self, doc: usize) -> &[f32] {
        &self.features[doc * self.num_features..(doc + 1) * self.num_features]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    /// Pad the feature matrix with zero columns up to `num_features`.
    pub fn widen(&mut self, num_features: usize) {
        if num_features <= self.num_features {
            return;
        }
        let mut wide = vec![0.0f32; self.num_docs() * num_features];
        for d in 0..self.num_docs() {
            wide[d * num_features..d * num_features + self.num_features]
                .copy_from_slice(self.feature_row(d));
        }
        self.features = wide;
        self.num_features = num_features;
    }
}

/// A parsed LETOR file: query groups plus file-level bookkeeping.
#[derive(Debug, Clone)]
pub struct LetorData {
    pub groups: Vec<QueryGroup>,
    pub num_features: usize,
    /// Labels outside [0, 4] are clamped; this counts how many were.
    pub clamped_labels: usize,
}

impl LetorData {
    pub fn widen(&mut self, num_features: usize) {
        if num_features <= self.num_features {
            return;
        }
        for g in &mut self.groups {
            g.widen(num_features);
        }
        self.num_features = num_features;
    }
}

/// Make several parsed files agree on the same feature width.
pub fn harmonize_features(datasets: &mut [&mut LetorData]) {
    let width = datasets.iter().map(|d| d.num_features).max().unwrap_or(0);
    for d in datasets {
        d.widen(width);
    }
}

struct RawDoc {
    label: u8,
    doc_id: String,
    pairs: Vec<(usize, f32)>,
}

/// Parse a LETOR file from disk. Groups are returned in first-appearance
/// order of their qid.
pub fn parse_letor(path: &Path) -> Result<LetorData, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        lines.push((i + 1, line));
    }
    parse_letor_lines(lines.into_iter())
}

/// Parse LETOR text already in memory.
pub fn parse_letor_str(text: &str) -> Result<LetorData, DataError> {
    parse_letor_lines(text.lines().enumerate().map(|(i, l)| (i + 1, l.to_string())))
}

fn parse_letor_lines(
    lines: impl Iterator<Item = (usize, String)>,
) -> Result<LetorData, DataError> {
    let mut order: Vec<String> = Vec::new();
    let mut per_qid: HashMap<String, Vec<RawDoc>> = HashMap::new();
    let mut max_index = 0usize;
    let mut clamped = 0usize;

    for (line_no, line) in lines {
        let (content, comment) = match line.split_once('#') {
            Some((c, rest)) => (c, Some(rest.trim().to_string())),
            None => (line.as_str(), None),
        };
        let mut tokens = content.split_whitespace();
        let label_tok = match tokens.next() {
            Some(t) => t,
            None => continue, // blank or comment-only line
        };
        let label_raw: i64 = label_tok.parse().map_err(|_| DataError::Parse {
            line: line_no,
            msg: format!("label `{label_tok}` is not an integer"),
        })?;
        let label = if (0..=4).contains(&label_raw) {
            label_raw as u8
        } else {
            clamped += 1;
            label_raw.clamp(0, 4) as u8
        };

        let qid_tok = tokens.next().ok_or(DataError::Parse {
            line: line_no,
            msg: "missing qid field".to_string(),
        })?;
        let qid = qid_tok
            .strip_prefix("qid:")
            .filter(|q| !q.is_empty())
            .ok_or(DataError::Parse {
                line: line_no,
                msg: format!("expected qid:<id>, found `{qid_tok}`"),
            })?
            .to_string();

        let mut pairs = Vec::new();
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or(DataError::Parse {
                line: line_no,
                msg: format!("expected <index>:<value>, found `{tok}`"),
            })?;
            let idx: usize = idx.parse().map_err(|_| DataError::Parse {
                line: line_no,
                msg: format!("feature index `{idx}` is not an integer"),
            })?;
            if idx == 0 {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: "feature indices are 1-based".to_string(),
                });
            }
            let val: f32 = val.parse().map_err(|_| DataError::Parse {
                line: line_no,
                msg: format!("feature value `{val}` is not a number"),
            })?;
            max_index = max_index.max(idx);
            pairs.push((idx, val));
        }

        let docs = per_qid.entry(qid.clone()).or_insert_with(|| {
            order.push(qid.clone());
            Vec::new()
        });
        let doc_id = comment
            .filter(|c| !c.is_empty())
            .unwrap_or_else(|| format!("{qid}:{}", docs.len()));
        docs.push(RawDoc {
            label,
            doc_id,
            pairs,
        });
    }

    let num_features = max_index;
    let mut groups = Vec::with_capacity(order.len());
    for qid in order {
        let docs = per_qid.remove(&qid).expect("qid recorded");
        let mut features = vec![0.0f32; docs.len() * num_features];
        let mut labels = Vec::with_capacity(docs.len());
        let mut doc_ids = Vec::with_capacity(docs.len());
        for (d, doc) in docs.iter().enumerate() {
            for &(idx, val) in &doc.pairs {
                features[d * num_features + (idx - 1)] = val;
            }
            labels.push(doc.label);
            doc_ids.push(doc.doc_id.clone());
        }
        groups.push(QueryGroup::new(qid, doc_ids, labels, features, num_features));
    }

    Ok(LetorData {
        groups,
        num_features,
        clamped_labels: clamped,
    })
}

/// Re-emit groups in the accepted text format. All feature indices are
/// written explicitly so a re-parse reproduces the matrix bit for bit.
pub fn write_letor<W: Write>(w: &mut W, groups: &[QueryGroup]) -> io::Result<()> {
    for g in groups {
        for d in 0..g.num_docs() {
            write!(w, "{} qid:{}", g.labels[d], g.query_id)?;
            for (i, v) in g.feature_row(d).iter().enumerate() {
                write!(w, " {}:{}", i + 1, v)?;
            }
            writeln!(w, " #{}", g.doc_ids[d])?;
        }
    }
    Ok(())
}

pub fn write_letor_file(path: &Path, groups: &[QueryGroup]) -> Result<(), DataError> {
    let mut file = File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_letor(&mut file, groups).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Min-max scale each feature column to [0, 1] within the query.
/// Constant columns map to 0.
pub fn normalize_per_query(g: &QueryGroup) -> QueryGroup {
    let nf = g.num_features();
    let nd = g.num_docs();
    let mut out = g.clone();
    for f in 0..nf {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for d in 0..nd {
            let v = g.features()[d * nf + f];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        for d in 0..nd {
            let v = &mut out.features[d * nf + f];
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
    out
}

/// One query's re-ranking input: the top-n prefix of the initial ranking.
#[derive(Debug, Clone)]
pub struct RankedInput {
    /// Document indices sorted by initial score descending; at most n real
    /// entries. Ties keep the original file order.
    pub order: Vec<usize>,
    /// Initial scores aligned with `order` (non-increasing).
    pub initial_scores: Vec<f32>,
    /// Target list size fed to a fixed-width model.
    pub n: usize,
    /// Zero-padded slots appended when the query has fewer than n documents.
    pub pad_count: usize,
}

impl RankedInput {
    pub fn real_len(&self) -> usize {
        self.order.len()
    }
}

/// Sort a query's documents by score and keep the top `n`.
pub fn assemble_top_n(
    g: &QueryGroup,
    scores: &[f32],
    n: usize,
) -> Result<RankedInput, DataError> {
    if scores.len() != g.num_docs() {
        return Err(DataError::Contract(format!(
            "assemble_top_n: {} scores for {} documents (qid {})",
            scores.len(),
            g.num_docs(),
            g.query_id
        )));
    }
    if n == 0 {
        return Err(DataError::Contract("assemble_top_n: n must be >= 1".into()));
    }
    let full = rank_by_scores(scores);
    let keep = n.min(g.num_docs());
    let order: Vec<usize> = full[..keep].to_vec();
    let initial_scores = order.iter().map(|&d| scores[d]).collect();
    Ok(RankedInput {
        order,
        initial_scores,
        n,
        pad_count: n.saturating_sub(g.num_docs()),
    })
}

/// Indices of all documents sorted by score descending, ties in input order.
pub fn rank_by_scores(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Per-query score lists keyed by qid.
pub type ScoreMap = HashMap<String, Vec<f32>>;

/// Load a TSV score file (`qid \t doc_index \t score`) and align it to the
/// given groups. Every (qid, doc) pair must be covered exactly once.
pub fn load_external_scores(path: &Path, groups: &[QueryGroup]) -> Result<ScoreMap, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scores_str(&text, groups)
}

/// Parse score TSV text already in memory.
pub fn parse_scores_str(text: &str, groups: &[QueryGroup]) -> Result<ScoreMap, DataError> {
    let sizes: HashMap<&str, usize> = groups
        .iter()
        .map(|g| (g.query_id.as_str(), g.num_docs()))
        .collect();
    let mut map: ScoreMap = HashMap::new();
    let mut seen: HashMap<String, Vec<bool>> = HashMap::new();

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (qid, doc, score) = match (fields.next(), fields.next(), fields.next(), fields.next())
        {
            (Some(q), Some(d), Some(s), None) => (q, d, s),
            _ => {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: "expected exactly three tab-separated fields".to_string(),
                })
            }
        };
        let doc: usize = doc.parse().map_err(|_| DataError::Parse {
            line: line_no,
            msg: format!("doc index `{doc}` is not an integer"),
        })?;
        let score: f32 = score.parse().map_err(|_| DataError::Parse {
            line: line_no,
            msg: format!("score `{score}` is not a number"),
        })?;
        let size = *sizes.get(qid).ok_or_else(|| DataError::UnknownQid {
            qid: qid.to_string(),
            line: line_no,
        })?;
        if doc >= size {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("doc index {doc} out of range for qid {qid} ({size} docs)"),
            });
        }
        let flags = seen
            .entry(qid.to_string())
            .or_insert_with(|| vec![false; size]);
        if flags[doc] {
            return Err(DataError::DuplicateScore {
                qid: qid.to_string(),
                doc,
                line: line_no,
            });
        }
        flags[doc] = true;
        map.entry(qid.to_string())
            .or_insert_with(|| vec![0.0; size])[doc] = score;
    }

    for g in groups {
        match seen.get(&g.query_id) {
            None => {
                return Err(DataError::MissingScore {
                    qid: g.query_id.clone(),
                    doc: 0,
                })
            }
            Some(flags) => {
                if let Some(doc) = flags.iter().position(|&c| !c) {
                    return Err(DataError::MissingScore {
                        qid: g.query_id.clone(),
                        doc,
                    });
                }
            }
        }
    }
    Ok(map)
}

/// Write scores in the TSV format accepted by [`load_external_scores`].
pub fn write_scores(path: &Path, groups: &[QueryGroup], scores: &ScoreMap) -> Result<(), DataError> {
    let mut file = File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut write = || -> io::Result<()> {
        for g in groups {
            let s = &scores[&g.query_id];
            for (d, v) in s.iter().enumerate() {
                writeln!(file, "{}\t{}\t{}", g.query_id, d, v)?;
            }
        }
        Ok(())
    };
    write().map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
