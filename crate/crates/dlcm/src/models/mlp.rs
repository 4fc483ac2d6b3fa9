//! Feed-forward scorers: the pointwise DNN and the listwise-input LIDNN.

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};

use super::{init_uniform, ModelError};

/// A stack of affine layers with elu activations between them and a linear
/// final layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    /// (weights [in, out], bias [out]) per layer.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Mlp {
    /// `dims` lists layer widths from input to output, e.g. `[10, 64, 1]`.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let layers = dims
            .windows(2)
            .map(|w| (init_uniform(w[0], w[1], w[0], rng), Tensor::zeros(vec![w[1]])))
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().0.shape()[1]
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, (w, b))| [(format!("layer{i}.w"), w), (format!("layer{i}.b"), b)])
            .collect()
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|(w, b)| (g.param(w), g.param(b)))
            .collect()
    }

    pub(crate) fn forward(
        g: &mut Graph,
        layers: &[(Var, Var)],
        mut x: Var,
    ) -> Result<Var, ModelError> {
        let last = layers.len() - 1;
        for (i, (w, b)) in layers.iter().enumerate() {
            let wx = g.matmul(x, *w)?;
            let a = g.add(wx, *b)?;
            x = if i < last { g.elu(a) } else { a };
        }
        Ok(x)
    }
}

/// Pointwise per-document scorer with hidden widths from the paper's range.
#[derive(Debug, Clone)]
pub struct DnnParams {
    pub n: usize,
    pub alpha: usize,
    pub mlp: Mlp,
}

impl DnnParams {
    pub fn init<R: Rng>(n: usize, alpha: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut dims = vec![alpha];
        dims.extend_from_slice(hidden);
        dims.push(1);
        DnnParams {
            n,
            alpha,
            mlp: Mlp::init(&dims, rng),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.mlp.named_tensors()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.mlp
            .layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, (w, b))| {
                [(format!("layer{i}.w"), w), (format!("layer{i}.b"), b)]
            })
            .collect()
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> BoundMlp {
        BoundMlp {
            layers: self.mlp.bind(g),
        }
    }
}

/// Scorer over the concatenation of all n documents' features.
#[derive(Debug, Clone)]
pub struct LidnnParams {
    pub n: usize,
    pub alpha: usize,
    pub mlp: Mlp,
}

impl LidnnParams {
    pub fn init<R: Rng>(n: usize, alpha: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut dims = vec![n * alpha];
        dims.extend_from_slice(hidden);
        dims.push(n);
        LidnnParams {
            n,
            alpha,
            mlp: Mlp::init(&dims, rng),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.mlp.named_tensors()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.mlp
            .layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, (w, b))| {
                [(format!("layer{i}.w"), w), (format!("layer{i}.b"), b)]
            })
            .collect()
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> BoundMlp {
        BoundMlp {
            layers: self.mlp.bind(g),
        }
    }
}

pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub(crate) fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }
}

/// Independent forward pass per real document; padding is never scored.
pub(crate) fn dnn_score(
    g: &mut Graph,
    bound: &BoundMlp,
    features: &Tensor,
    real: usize,
) -> Result<Var, ModelError> {
    let alpha = features.shape()[1];
    let rows = Tensor::matrix(real, alpha, features.data()[..real * alpha].to_vec())?;
    let x = g.constant(&rows);
    let out = Mlp::forward(g, &bound.layers, x)?;
    Ok(g.reshape(out, vec![real])?)
}

/// One forward pass over the flattened padded list; the first `real`
/// outputs score the real documents.
pub(crate) fn lidnn_score(
    g: &mut Graph,
    bound: &BoundMlp,
    features: &Tensor,
    real: usize,
) -> Result<Var, ModelError> {
    let flat = Tensor::matrix(1, features.numel(), features.data().to_vec())?;
    let expected = g.value(bound.layers[0].0).shape()[0];
    if flat.numel() != expected {
        return Err(ModelError::ListSizeMismatch {
            expected,
            actual: flat.numel(),
        });
    }
    let x = g.constant(&flat);
    let out = Mlp::forward(g, &bound.layers, x)?;
    let n = g.value(out).numel();
    let v = g.reshape(out, vec![n])?;
    let head: Vec<usize> = (0..real).collect();
    Ok(g.gather(v, &head)?)
}
