//! Scoring models: the linear pairwise initial ranker, the pointwise DNN,
//! the listwise-input DNN (LIDNN), and the GRU listwise context re-ranker
//! (DLCM).

mod dlcm;
mod linear;
mod mlp;

pub use dlcm::{Abstraction, DlcmParams, GruWeights};
pub use linear::{hinge_loss, linear_train, LinearRanker, LinearTrainConfig};
pub use mlp::{DnnParams, LidnnParams, Mlp};

use rand::Rng;
use thiserror::Error;

use crate::autograd::{GradError, Graph, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GradError),
    #[error("gru_encode requires a non-empty input sequence")]
    EmptySequence,
    #[error("no label-discordant document pair exists in the training data")]
    NoDiscordantPairs,
    #[error("model expects {expected} features, data has {actual}")]
    FeatureMismatch { expected: usize, actual: usize },
    #[error("model was built for list size {expected}, got {actual}")]
    ListSizeMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Dnn,
    Lidnn,
    Dlcm,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Dnn => "dnn",
            ModelKind::Lidnn => "lidnn",
            ModelKind::Dlcm => "dlcm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(ModelKind::Linear),
            "dnn" => Some(ModelKind::Dnn),
            "lidnn" => Some(ModelKind::Lidnn),
            "dlcm" => Some(ModelKind::Dlcm),
            _ => None,
        }
    }
}

/// Named parameter collection for any of the four models.
#[derive(Debug, Clone)]
pub enum ModelParams {
    Linear(LinearRanker),
    Dnn(DnnParams),
    Lidnn(LidnnParams),
    Dlcm(DlcmParams),
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Linear(_) => ModelKind::Linear,
            ModelParams::Dnn(_) => ModelKind::Dnn,
            ModelParams::Lidnn(_) => ModelKind::Lidnn,
            ModelParams::Dlcm(_) => ModelKind::Dlcm,
        }
    }

    /// Input feature dimensionality the model was built for.
    pub fn alpha(&self) -> usize {
        match self {
            ModelParams::Linear(m) => m.alpha(),
            ModelParams::Dnn(m) => m.alpha,
            ModelParams::Lidnn(m) => m.alpha,
            ModelParams::Dlcm(m) => m.alpha,
        }
    }

    /// Re-ranking window size the model was trained with, if fixed.
    pub fn list_size(&self) -> Option<usize> {
        match self {
            ModelParams::Linear(_) => None,
            ModelParams::Dnn(m) => Some(m.n),
            ModelParams::Lidnn(m) => Some(m.n),
            ModelParams::Dlcm(m) => Some(m.n),
        }
    }

    /// Parameters in a fixed order, named for checkpoints and updates.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            ModelParams::Linear(m) => m.named_tensors(),
            ModelParams::Dnn(m) => m.named_tensors(),
            ModelParams::Lidnn(m) => m.named_tensors(),
            ModelParams::Dlcm(m) => m.named_tensors(),
        }
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            ModelParams::Linear(m) => m.named_tensors_mut(),
            ModelParams::Dnn(m) => m.named_tensors_mut(),
            ModelParams::Lidnn(m) => m.named_tensors_mut(),
            ModelParams::Dlcm(m) => m.named_tensors_mut(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every parameter as a differentiable leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        match self {
            ModelParams::Linear(m) => BoundModel::Linear(m.bind(g)),
            ModelParams::Dnn(m) => BoundModel::Dnn(m.bind(g)),
            ModelParams::Lidnn(m) => BoundModel::Lidnn(m.bind(g)),
            ModelParams::Dlcm(m) => BoundModel::Dlcm(m.bind(g)),
        }
    }

    /// Check compatibility with a data set's feature width.
    pub fn check_features(&self, actual: usize) -> Result<(), ModelError> {
        let expected = self.alpha();
        if expected != actual {
            return Err(ModelError::FeatureMismatch { expected, actual });
        }
        Ok(())
    }
}

/// Graph-bound parameter handles, one variant per model kind.
pub enum BoundModel {
    Linear(linear::BoundLinear),
    Dnn(mlp::BoundMlp),
    Lidnn(mlp::BoundMlp),
    Dlcm(dlcm::BoundDlcm),
}

impl BoundModel {
    /// Leaf handles in the same order as [`ModelParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        match self {
            BoundModel::Linear(b) => b.vars(),
            BoundModel::Dnn(b) | BoundModel::Lidnn(b) => b.vars(),
            BoundModel::Dlcm(b) => b.vars(),
        }
    }

    /// Score one assembled list.
    ///
    /// `features` is the `[n, alpha]` matrix of the top-n list in initial
    /// rank order (zero rows for padding); `real` counts the non-padded
    /// entries. Returns a rank-1 `[real]` score vector; padded slots are
    /// never scored.
    pub fn score_list(
        &self,
        g: &mut Graph,
        features: &Tensor,
        real: usize,
    ) -> Result<Var, ModelError> {
        match self {
            BoundModel::Linear(b) => b.score_list(g, features, real),
            BoundModel::Dnn(b) => mlp::dnn_score(g, b, features, real),
            BoundModel::Lidnn(b) => mlp::lidnn_score(g, b, features, real),
            BoundModel::Dlcm(b) => b.score_list(g, features, real),
        }
    }
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub(crate) fn init_uniform<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dlcm_parameter_count_formula_with_beta_zero() {
        // 6d^2 + d*k*d + d*k + k with d = alpha when beta = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (alpha, k, n) = (7usize, 3usize, 10usize);
        let params = ModelParams::Dlcm(DlcmParams::init(n, alpha, 0, k, &mut rng));
        let d = alpha;
        assert_eq!(
            params.num_parameters(),
            6 * d * d + d * k * d + d * k + k
        );
    }

    #[test]
    fn bind_var_order_matches_named_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = ModelParams::Dlcm(DlcmParams::init(4, 3, 2, 2, &mut rng));
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let names = params.named_tensors();
        let vars = bound.vars();
        assert_eq!(names.len(), vars.len());
        for ((_, t), v) in names.iter().zip(&vars) {
            assert_eq!(t.shape(), g.value(*v).shape());
            assert_eq!(t.data(), g.value(*v).data());
        }
    }

    #[test]
    fn feature_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::Dnn(DnnParams::init(5, 4, &[8], &mut rng));
        let err = params.check_features(7).unwrap_err();
        match err {
            ModelError::FeatureMismatch { expected, actual } => {
                assert_eq!((expected, actual), (4, 7));
            }
            other => panic!("unexpected {other}"),
        }
    }
}
