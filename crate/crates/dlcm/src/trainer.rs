//! The optimization loop: batched SGD over query lists with gradient
//! clipping, learning-rate decay on epoch-level loss increases, per-epoch
//! validation, and best-checkpoint selection.

use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autograd::{global_norm_clip, GradError, Graph, Tensor};
use crate::data::{assemble_top_n, rank_by_scores, DataError, QueryGroup, ScoreMap};
use crate::losses::{self, LossKind};
use crate::metrics::{ndcg_at_k, EvalReport, MetricsError};
use crate::models::{DlcmParams, DnnParams, LidnnParams, ModelError, ModelKind, ModelParams};
use crate::sub_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GradError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing initial scores for qid {0}")]
    MissingScores(String),
    #[error("non-finite loss at iteration {iteration}; offending batch qids: {qids:?}")]
    NonFiniteLoss { iteration: usize, qids: Vec<String> },
    #[error("non-finite model scores for qid {qid}")]
    NonFiniteScores { qid: String },
}

/// Training hyperparameters. Defaults follow the large-scale protocol;
/// [`TrainConfig::desk`] shrinks the batch and window for desk-scale runs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub loss: LossKind,
    /// Re-ranking window size.
    pub n: usize,
    /// Input abstraction width (DLCM only; 0 disables the abstraction).
    pub beta: usize,
    /// Hidden units of the local scoring function (DLCM only).
    pub k: usize,
    /// Hidden layer widths (DNN/LIDNN only).
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub lr0: f32,
    pub decay: f32,
    pub clip_norm: f32,
    pub max_iters: usize,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
}

impl TrainConfig {
    pub fn new(model: ModelKind, loss: LossKind) -> Self {
        TrainConfig {
            model,
            loss,
            n: 40,
            beta: 0,
            k: 3,
            hidden: vec![64],
            batch_size: 256,
            lr0: 1.0,
            decay: 0.8,
            clip_norm: 5.0,
            max_iters: 10_000,
            seed: 0,
            patience: None,
        }
    }

    /// Desk-scale profile: batch 16, window 10.
    pub fn desk(mut self) -> Self {
        self.batch_size = 16;
        self.n = 10;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(1..=200).contains(&self.n) {
            return Err(TrainError::Config(format!("n must be in [1, 200], got {}", self.n)));
        }
        if self.k == 0 {
            return Err(TrainError::Config("k must be >= 1".into()));
        }
        // lr0 = 0 is allowed as a no-op diagnostic run.
        if self.lr0 < 0.0 || self.decay <= 0.0 || self.clip_norm <= 0.0 {
            return Err(TrainError::Config("rates must be positive".into()));
        }
        if let LossKind::SoftRank { sigma_s } = self.loss {
            if sigma_s <= 0.0 {
                return Err(TrainError::Config("sigma_s must be positive".into()));
            }
        }
        if self.batch_size == 0 || self.max_iters == 0 {
            return Err(TrainError::Config("batch_size and max_iters must be >= 1".into()));
        }
        if self.model == ModelKind::Linear {
            return Err(TrainError::Config(
                "the linear ranker trains through linear_train, not the re-ranker loop".into(),
            ));
        }
        Ok(())
    }
}

/// One query's assembled training example.
pub struct ListExample {
    pub qid: String,
    /// `[n, alpha]` features in initial-rank order, zero rows as padding.
    pub features: Tensor,
    /// Labels of the real (unpadded) entries.
    pub labels: Vec<u8>,
    pub real: usize,
}

fn list_features(group: &QueryGroup, order: &[usize], n: usize) -> Tensor {
    let alpha = group.num_features();
    let mut data = vec![0.0f32; n * alpha];
    for (slot, &doc) in order.iter().enumerate() {
        data[slot * alpha..(slot + 1) * alpha].copy_from_slice(group.feature_row(doc));
    }
    Tensor::matrix(n, alpha, data).expect("positive extents")
}

/// Assemble top-n training examples for every group.
pub fn build_examples(
    groups: &[QueryGroup],
    scores: &ScoreMap,
    n: usize,
) -> Result<Vec<ListExample>, TrainError> {
    groups
        .iter()
        .map(|g| {
            let s = scores
                .get(&g.query_id)
                .ok_or_else(|| TrainError::MissingScores(g.query_id.clone()))?;
            let ranked = assemble_top_n(g, s, n)?;
            let labels = ranked.order.iter().map(|&d| g.labels[d]).collect();
            Ok(ListExample {
                qid: g.query_id.clone(),
                features: list_features(g, &ranked.order, n),
                labels,
                real: ranked.real_len(),
            })
        })
        .collect()
}

fn init_model(cfg: &TrainConfig, alpha: usize) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "model-init"));
    match cfg.model {
        ModelKind::Dnn => ModelParams::Dnn(DnnParams::init(cfg.n, alpha, &cfg.hidden, &mut rng)),
        ModelKind::Lidnn => {
            ModelParams::Lidnn(LidnnParams::init(cfg.n, alpha, &cfg.hidden, &mut rng))
        }
        ModelKind::Dlcm => {
            ModelParams::Dlcm(DlcmParams::init(cfg.n, alpha, cfg.beta, cfg.k, &mut rng))
        }
        ModelKind::Linear => unreachable!("rejected by validate"),
    }
}

fn query_loss_grads(
    params: &ModelParams,
    ex: &ListExample,
    loss: LossKind,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let scores = bound.score_list(&mut g, &ex.features, ex.real)?;
    if !g.value(scores).is_finite() {
        return Err(TrainError::NonFiniteScores {
            qid: ex.qid.clone(),
        });
    }
    let initial_order: Vec<usize> = (0..ex.real).collect();
    let l = losses::loss(&mut g, loss, scores, &ex.labels, &initial_order)?;
    let value = f64::from(g.value(l).item());
    g.backward(l)?;
    let grads = bound.vars().iter().map(|&v| g.grad_tensor(v)).collect();
    Ok((value, grads))
}

/// Clip to the global norm bound and apply one SGD update.
/// Returns the pre-clip gradient norm.
pub(crate) fn sgd_step(
    params: &mut ModelParams,
    grads: &mut [Tensor],
    lr: f32,
    clip_norm: f32,
) -> f64 {
    let pre = global_norm_clip(grads, clip_norm);
    debug_assert!({
        let post: f64 = grads
            .iter()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        post <= clip_norm as f64 + 1e-6
    });
    for ((_, tensor), grad) in params.named_tensors_mut().into_iter().zip(grads.iter()) {
        for (p, g) in tensor.data_mut().iter_mut().zip(grad.data()) {
            *p -= lr * g;
        }
    }
    pre
}

/// One row of the per-epoch training history.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f32,
    pub val_ndcg10: f64,
    pub seconds: f64,
}

pub struct TrainOutput {
    /// The checkpoint with the best validation NDCG@10.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_val_ndcg10: f64,
}

/// Train a re-ranker. Batches are sampled uniformly with replacement under
/// the seeded RNG; the learning rate is `lr0 * decay^j` after j recorded
/// epoch-over-epoch loss increases.
pub fn train(
    cfg: &TrainConfig,
    train_groups: &[QueryGroup],
    valid_groups: &[QueryGroup],
    scores: &ScoreMap,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    if train_groups.is_empty() {
        return Err(TrainError::Config("no training queries".into()));
    }
    let alpha = train_groups[0].num_features();
    let examples = build_examples(train_groups, scores, cfg.n)?;
    // Fail fast if validation scores are missing.
    for g in valid_groups {
        if !scores.contains_key(&g.query_id) {
            return Err(TrainError::MissingScores(g.query_id.clone()));
        }
    }

    let mut params = init_model(cfg, alpha);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "batch-sampling"));
    let iters_per_epoch = examples.len().div_ceil(cfg.batch_size);

    let mut lr_increases = 0u32;
    let mut prev_epoch_loss: Option<f64> = None;
    let mut epoch_loss_sum = 0.0f64;
    let mut iters_in_epoch = 0usize;
    let mut epoch = 0usize;
    let mut epoch_start = Instant::now();

    let mut history = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut epochs_since_best = 0usize;

    for iter in 0..cfg.max_iters {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.random_range(0..examples.len()))
            .collect();
        let results: Vec<Result<(f64, Vec<Tensor>), TrainError>> = batch
            .par_iter()
            .map(|&qi| query_loss_grads(&params, &examples[qi], cfg.loss))
            .collect();

        let mut grads: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0f64;
        for r in results {
            let (l, g) = match r {
                Ok(v) => v,
                Err(TrainError::NonFiniteScores { .. }) => {
                    let qids = batch.iter().map(|&qi| examples[qi].qid.clone()).collect();
                    return Err(TrainError::NonFiniteLoss {
                        iteration: iter,
                        qids,
                    });
                }
                Err(e) => return Err(e),
            };
            loss_sum += l;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("batch_size >= 1");
        let batch_loss = loss_sum / cfg.batch_size as f64;
        let scale = 1.0 / cfg.batch_size as f32;
        for t in &mut grads {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
        let finite = batch_loss.is_finite() && grads.iter().all(|t| t.is_finite());
        if !finite {
            let qids = batch.iter().map(|&qi| examples[qi].qid.clone()).collect();
            return Err(TrainError::NonFiniteLoss {
                iteration: iter,
                qids,
            });
        }

        let lr = cfg.lr0 * cfg.decay.powi(lr_increases as i32);
        sgd_step(&mut params, &mut grads, lr, cfg.clip_norm);
        epoch_loss_sum += batch_loss;
        iters_in_epoch += 1;

        let last_iter = iter + 1 == cfg.max_iters;
        if iters_in_epoch == iters_per_epoch || last_iter {
            epoch += 1;
            let mean_loss = epoch_loss_sum / iters_in_epoch as f64;
            if let Some(prev) = prev_epoch_loss {
                if mean_loss > prev {
                    lr_increases += 1;
                }
            }
            prev_epoch_loss = Some(mean_loss);
            let val = mean_val_ndcg10(&params, valid_groups, scores, cfg.n)?;
            if val > best_val {
                best_val = val;
                best_params = params.clone();
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
            }
            history.push(EpochRecord {
                epoch,
                mean_loss,
                lr: cfg.lr0 * cfg.decay.powi(lr_increases as i32),
                val_ndcg10: val,
                seconds: epoch_start.elapsed().as_secs_f64(),
            });
            epoch_loss_sum = 0.0;
            iters_in_epoch = 0;
            epoch_start = Instant::now();
            if let Some(p) = cfg.patience {
                if epochs_since_best >= p {
                    break;
                }
            }
        }
    }

    Ok(TrainOutput {
        params: best_params,
        history,
        best_val_ndcg10: best_val,
    })
}

fn mean_val_ndcg10(
    params: &ModelParams,
    groups: &[QueryGroup],
    scores: &ScoreMap,
    n: usize,
) -> Result<f64, TrainError> {
    if groups.is_empty() {
        return Ok(0.0);
    }
    let rankings = rerank_all(params, groups, scores, Some(n))?;
    let total: f64 = groups
        .iter()
        .zip(&rankings)
        .map(|(g, r)| {
            let labels: Vec<u8> = r.iter().map(|&d| g.labels[d]).collect();
            ndcg_at_k(&labels, 10)
        })
        .sum();
    Ok(total / groups.len() as f64)
}

/// Re-rank one query: the top-n head is reordered by model scores (stable,
/// ties keep the initial order) and the below-n tail keeps its initial
/// order. The result is always a permutation of all documents.
pub fn rerank(
    params: &ModelParams,
    group: &QueryGroup,
    scores: &[f32],
    n: usize,
) -> Result<Vec<usize>, TrainError> {
    if scores.len() != group.num_docs() {
        return Err(TrainError::Data(DataError::Contract(format!(
            "rerank: {} scores for {} documents (qid {})",
            scores.len(),
            group.num_docs(),
            group.query_id
        ))));
    }
    let full = rank_by_scores(scores);
    let head_len = n.min(group.num_docs());
    let head = &full[..head_len];

    let features = list_features(group, head, n.max(head_len));
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = bound.score_list(&mut g, &features, head_len)?;
    if !g.value(out).is_finite() {
        return Err(TrainError::NonFiniteScores {
            qid: group.query_id.clone(),
        });
    }
    let model_scores = g.value(out).data().to_vec();

    let mut slots: Vec<usize> = (0..head_len).collect();
    slots.sort_by(|&a, &b| model_scores[b].total_cmp(&model_scores[a]));
    let mut ranking: Vec<usize> = slots.iter().map(|&i| head[i]).collect();
    ranking.extend_from_slice(&full[head_len..]);

    let mut check: Vec<usize> = ranking.clone();
    check.sort_unstable();
    assert!(
        check.iter().copied().eq(0..group.num_docs()),
        "re-ranking must permute the input list"
    );
    Ok(ranking)
}

/// Re-rank every group; `n` falls back to the model's trained window, and
/// to the full list for models without one.
pub fn rerank_all(
    params: &ModelParams,
    groups: &[QueryGroup],
    scores: &ScoreMap,
    n: Option<usize>,
) -> Result<Vec<Vec<usize>>, TrainError> {
    groups
        .par_iter()
        .map(|g| {
            let s = scores
                .get(&g.query_id)
                .ok_or_else(|| TrainError::MissingScores(g.query_id.clone()))?;
            let window = n
                .or(params.list_size())
                .unwrap_or_else(|| g.num_docs());
            rerank(params, g, s, window)
        })
        .collect()
}

/// Re-rank with a checkpoint and compute the evaluation report.
pub fn evaluate_checkpoint(
    params: &ModelParams,
    groups: &[QueryGroup],
    scores: &ScoreMap,
    cutoffs: &[usize],
    n: Option<usize>,
) -> Result<(EvalReport, Vec<Vec<usize>>), TrainError> {
    if let Some(g) = groups.first() {
        params.check_features(g.num_features())?;
    }
    let rankings = rerank_all(params, groups, scores, n)?;
    let report = EvalReport::from_rankings(groups, &rankings, cutoffs)?;
    Ok((report, rankings))
}

/// Identity "re-ranking" by initial scores, the baseline every model is
/// compared against.
pub fn initial_rankings(
    groups: &[QueryGroup],
    scores: &ScoreMap,
) -> Result<Vec<Vec<usize>>, TrainError> {
    groups
        .iter()
        .map(|g| {
            let s = scores
                .get(&g.query_id)
                .ok_or_else(|| TrainError::MissingScores(g.query_id.clone()))?;
            Ok(rank_by_scores(s))
        })
        .collect()
}

/// Write per-epoch history as TSV: epoch, mean train loss, learning rate,
/// validation NDCG@10, wall-clock seconds.
pub fn write_history<W: Write>(w: &mut W, history: &[EpochRecord]) -> io::Result<()> {
    writeln!(w, "epoch\tmean_train_loss\tlr\tval_ndcg10\tseconds")?;
    for r in history {
        writeln!(
            w,
            "{}\t{:.8}\t{}\t{:.6}\t{:.3}",
            r.epoch, r.mean_loss, r.lr, r.val_ndcg10, r.seconds
        )?;
    }
    Ok(())
}

pub fn write_history_file(path: &Path, history: &[EpochRecord]) -> Result<(), TrainError> {
    let mut f = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_history(&mut f, history).map_err(|source| {
        TrainError::Data(DataError::Io {
            path: path.display().to_string(),
            source,
        })
    })
}
