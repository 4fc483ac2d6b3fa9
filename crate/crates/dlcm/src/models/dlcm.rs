//! The listwise context re-ranker: a two-layer input abstraction, a GRU
//! encoder over the top-n list fed lowest rank first, and a local scoring
//! function that couples each hidden output with the final encoder state.

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};

use super::{init_uniform, ModelError};

/// The six square gate matrices of the encoder, each `[d, d]` where
/// `d = alpha + beta`. The cell carries no bias terms.
#[derive(Debug, Clone)]
pub struct GruWeights {
    pub w_x: Tensor,
    pub w_s: Tensor,
    pub w_ux: Tensor,
    pub w_us: Tensor,
    pub w_rx: Tensor,
    pub w_rs: Tensor,
}

impl GruWeights {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        GruWeights {
            w_x: init_uniform(d, d, d, rng),
            w_s: init_uniform(d, d, d, rng),
            w_ux: init_uniform(d, d, d, rng),
            w_us: init_uniform(d, d, d, rng),
            w_rx: init_uniform(d, d, d, rng),
            w_rs: init_uniform(d, d, d, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_x.shape()[0]
    }
}

/// Two elu layers expanding the raw features, concatenated back onto them.
#[derive(Debug, Clone)]
pub struct Abstraction {
    pub w0: Tensor,
    pub b0: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
}

impl Abstraction {
    fn init<R: Rng>(alpha: usize, beta: usize, rng: &mut R) -> Self {
        Abstraction {
            w0: init_uniform(alpha, beta, alpha, rng),
            b0: Tensor::zeros(vec![beta]),
            w1: init_uniform(beta, beta, beta, rng),
            b1: Tensor::zeros(vec![beta]),
        }
    }
}

/// Parameters of the deep listwise context model.
#[derive(Debug, Clone)]
pub struct DlcmParams {
    pub n: usize,
    pub alpha: usize,
    pub beta: usize,
    pub k: usize,
    /// Absent exactly when beta = 0; the input then stays the raw vector.
    pub abstraction: Option<Abstraction>,
    pub gru: GruWeights,
    /// `[d*k, d]`: row (a, b) holds the slice contracting the encoder state.
    pub w_phi: Tensor,
    /// `[d*k, 1]`, added before the tanh.
    pub b_phi: Tensor,
    /// `[k, 1]`: final contraction to a scalar score.
    pub v_phi: Tensor,
}

impl DlcmParams {
    pub fn init<R: Rng>(n: usize, alpha: usize, beta: usize, k: usize, rng: &mut R) -> Self {
        assert!(alpha >= 1 && k >= 1 && n >= 1);
        let d = alpha + beta;
        let abstraction = if beta > 0 {
            Some(Abstraction::init(alpha, beta, rng))
        } else {
            None
        };
        DlcmParams {
            n,
            alpha,
            beta,
            k,
            abstraction,
            gru: GruWeights::init(d, rng),
            w_phi: init_uniform(d * k, d, d, rng),
            b_phi: Tensor::zeros(vec![d * k, 1]),
            v_phi: init_uniform(k, 1, k, rng),
        }
    }

    /// Encoder dimension `alpha + beta`.
    pub fn dim(&self) -> usize {
        self.alpha + self.beta
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(a) = &self.abstraction {
            out.push(("abstraction.w0".to_string(), &a.w0));
            out.push(("abstraction.b0".to_string(), &a.b0));
            out.push(("abstraction.w1".to_string(), &a.w1));
            out.push(("abstraction.b1".to_string(), &a.b1));
        }
        out.push(("gru.w_x".to_string(), &self.gru.w_x));
        out.push(("gru.w_s".to_string(), &self.gru.w_s));
        out.push(("gru.w_ux".to_string(), &self.gru.w_ux));
        out.push(("gru.w_us".to_string(), &self.gru.w_us));
        out.push(("gru.w_rx".to_string(), &self.gru.w_rx));
        out.push(("gru.w_rs".to_string(), &self.gru.w_rs));
        out.push(("phi.w".to_string(), &self.w_phi));
        out.push(("phi.b".to_string(), &self.b_phi));
        out.push(("phi.v".to_string(), &self.v_phi));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        if let Some(a) = &mut self.abstraction {
            out.push(("abstraction.w0".to_string(), &mut a.w0));
            out.push(("abstraction.b0".to_string(), &mut a.b0));
            out.push(("abstraction.w1".to_string(), &mut a.w1));
            out.push(("abstraction.b1".to_string(), &mut a.b1));
        }
        out.push(("gru.w_x".to_string(), &mut self.gru.w_x));
        out.push(("gru.w_s".to_string(), &mut self.gru.w_s));
        out.push(("gru.w_ux".to_string(), &mut self.gru.w_ux));
        out.push(("gru.w_us".to_string(), &mut self.gru.w_us));
        out.push(("gru.w_rx".to_string(), &mut self.gru.w_rx));
        out.push(("gru.w_rs".to_string(), &mut self.gru.w_rs));
        out.push(("phi.w".to_string(), &mut self.w_phi));
        out.push(("phi.b".to_string(), &mut self.b_phi));
        out.push(("phi.v".to_string(), &mut self.v_phi));
        out
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> BoundDlcm {
        BoundDlcm {
            alpha: self.alpha,
            beta: self.beta,
            k: self.k,
            abstraction: self
                .abstraction
                .as_ref()
                .map(|a| [g.param(&a.w0), g.param(&a.b0), g.param(&a.w1), g.param(&a.b1)]),
            gru: BoundGru {
                w_x: g.param(&self.gru.w_x),
                w_s: g.param(&self.gru.w_s),
                w_ux: g.param(&self.gru.w_ux),
                w_us: g.param(&self.gru.w_us),
                w_rx: g.param(&self.gru.w_rx),
                w_rs: g.param(&self.gru.w_rs),
            },
            w_phi: g.param(&self.w_phi),
            b_phi: g.param(&self.b_phi),
            v_phi: g.param(&self.v_phi),
        }
    }
}

pub(crate) struct BoundGru {
    pub w_x: Var,
    pub w_s: Var,
    pub w_ux: Var,
    pub w_us: Var,
    pub w_rx: Var,
    pub w_rs: Var,
}

pub struct BoundDlcm {
    alpha: usize,
    beta: usize,
    k: usize,
    abstraction: Option<[Var; 4]>,
    gru: BoundGru,
    w_phi: Var,
    b_phi: Var,
    v_phi: Var,
}

/// Run the gated recurrent cell over `inputs` (each `[1, d]`), starting from
/// zero state vectors. Returns every step's output vector plus the final
/// candidate state `s_n`, which encodes the list context.
pub(crate) fn gru_encode(
    g: &mut Graph,
    gru: &BoundGru,
    inputs: &[Var],
) -> Result<(Vec<Var>, Var), ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let d = g.value(gru.w_x).shape()[0];
    let one = g.constant_scalar(1.0);
    let mut output = g.leaf(Tensor::zeros(vec![1, d]));
    let mut state = output;
    let mut outputs = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let rx = g.matmul(x, gru.w_rx)?;
        let ro = g.matmul(output, gru.w_rs)?;
        let r_pre = g.add(rx, ro)?;
        let reset = g.sigmoid(r_pre);

        let gated = g.mul(reset, output)?;
        let sx = g.matmul(x, gru.w_x)?;
        let sg = g.matmul(gated, gru.w_s)?;
        let s_pre = g.add(sx, sg)?;
        state = g.tanh(s_pre);

        let ux = g.matmul(x, gru.w_ux)?;
        let uo = g.matmul(output, gru.w_us)?;
        let u_pre = g.add(ux, uo)?;
        let update = g.sigmoid(u_pre);

        let keep = g.sub(one, update)?;
        let kept = g.mul(keep, output)?;
        let taken = g.mul(update, state)?;
        output = g.add(kept, taken)?;
        outputs.push(output);
    }
    Ok((outputs, state))
}

impl BoundDlcm {
    pub(crate) fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(a) = &self.abstraction {
            out.extend_from_slice(a);
        }
        out.extend_from_slice(&[
            self.gru.w_x,
            self.gru.w_s,
            self.gru.w_ux,
            self.gru.w_us,
            self.gru.w_rx,
            self.gru.w_rs,
            self.w_phi,
            self.b_phi,
            self.v_phi,
        ]);
        out
    }

    /// Expand raw features `[rows, alpha]` to `[rows, alpha + beta]`.
    pub(crate) fn abstraction_forward(
        &self,
        g: &mut Graph,
        x: Var,
    ) -> Result<Var, ModelError> {
        match &self.abstraction {
            None => Ok(x),
            Some([w0, b0, w1, b1]) => {
                let h0 = g.matmul(x, *w0)?;
                let a0 = g.add(h0, *b0)?;
                let z1 = g.elu(a0);
                let h1 = g.matmul(z1, *w1)?;
                let a1 = g.add(h1, *b1)?;
                let z2 = g.elu(a1);
                Ok(g.concat_cols(x, z2)?)
            }
        }
    }

    pub(crate) fn score_list(
        &self,
        g: &mut Graph,
        features: &Tensor,
        real: usize,
    ) -> Result<Var, ModelError> {
        debug_assert_eq!(features.shape()[1], self.alpha);
        let n_list = features.shape()[0];
        let d = self.alpha + self.beta;
        let x = g.constant(features);
        let expanded = self.abstraction_forward(g, x)?;

        // Feed the list bottom-up: padding (at the lowest positions) first,
        // then real documents from worst initial rank to best.
        let mut steps = Vec::with_capacity(n_list);
        for pos in (0..n_list).rev() {
            steps.push(g.row(expanded, pos)?);
        }
        let (outputs, s_n) = gru_encode(g, &self.gru, &steps)?;

        // phi(o, s_n) = V . (o . tanh(W . s_n + b)), shared across documents.
        let s_col = g.reshape(s_n, vec![d, 1])?;
        let ws = g.matmul(self.w_phi, s_col)?;
        let pre = g.add(ws, self.b_phi)?;
        let act = g.tanh(pre);
        let hidden = g.reshape(act, vec![d, self.k])?;

        let mut scores = Vec::with_capacity(real);
        for pos in 0..real {
            // The document at list position pos was fed at step n_list-1-pos.
            let o = outputs[n_list - 1 - pos];
            let contracted = g.matmul(o, hidden)?;
            let score = g.matmul(contracted, self.v_phi)?;
            scores.push(score);
        }
        Ok(g.stack_scalars(&scores)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn list_tensor(rows: &[&[f32]]) -> Tensor {
        let cols = rows[0].len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::matrix(rows.len(), cols, data).unwrap()
    }

    fn scores_for(params: &DlcmParams, features: &Tensor, real: usize) -> Vec<f32> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let s = bound.score_list(&mut g, features, real).unwrap();
        g.value(s).data().to_vec()
    }

    #[test]
    fn abstraction_with_beta_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = DlcmParams::init(3, 4, 0, 2, &mut rng);
        let feats = list_tensor(&[&[0.1, 0.2, 0.3, 0.4], &[1.0, -1.0, 0.5, 0.0]]);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(&feats);
        let out = bound.abstraction_forward(&mut g, x).unwrap();
        assert_eq!(g.value(out).data(), feats.data());
        assert_eq!(g.value(out).shape(), feats.shape());
    }

    #[test]
    fn abstraction_with_zero_weights_appends_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = DlcmParams::init(3, 2, 3, 2, &mut rng);
        if let Some(a) = &mut params.abstraction {
            for t in [&mut a.w0, &mut a.b0, &mut a.w1, &mut a.b1] {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let feats = list_tensor(&[&[0.5, -0.5]]);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(&feats);
        let out = bound.abstraction_forward(&mut g, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, -0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gru_zero_input_zero_state_stays_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = DlcmParams::init(3, 2, 0, 1, &mut rng);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let zero = g.leaf(Tensor::zeros(vec![1, 2]));
        let (outputs, s_n) = gru_encode(&mut g, &bound.gru, &[zero, zero, zero]).unwrap();
        for o in outputs {
            assert_eq!(g.value(o).data(), &[0.0, 0.0]);
        }
        assert_eq!(g.value(s_n).data(), &[0.0, 0.0]);
    }

    #[test]
    fn gru_single_step_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut params = DlcmParams::init(1, 2, 0, 1, &mut rng);
        for (name, t) in params.named_tensors_mut() {
            if name.starts_with("gru.") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.leaf(Tensor::matrix(1, 2, vec![0.7, -0.4]).unwrap());
        let (outputs, _) = gru_encode(&mut g, &bound.gru, &[x]).unwrap();
        // u = sigmoid(0) = 0.5, s = tanh(0) = 0, o = 0.5*0 + 0.5*0 = 0.
        assert_eq!(g.value(outputs[0]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn gru_outputs_stay_inside_convex_bound() {
        // |o_t|_inf <= max(|o_{t-1}|_inf, 1): s_t is in (-1,1) and o_t is a
        // convex combination, so outputs never exceed 1 from a zero start.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let params = DlcmParams::init(6, 3, 0, 1, &mut rng);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let steps: Vec<_> = (0..6)
            .map(|i| {
                let row: Vec<f32> = (0..3).map(|j| ((i * 3 + j) as f32).sin() * 5.0).collect();
                g.leaf(Tensor::matrix(1, 3, row).unwrap())
            })
            .collect();
        let (outputs, _) = gru_encode(&mut g, &bound.gru, &steps).unwrap();
        for o in outputs {
            for &v in g.value(o).data() {
                assert!(v.abs() <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn gru_rejects_empty_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let params = DlcmParams::init(2, 2, 0, 1, &mut rng);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        assert!(matches!(
            gru_encode(&mut g, &bound.gru, &[]),
            Err(ModelError::EmptySequence)
        ));
    }

    #[test]
    fn phi_zero_v_gives_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = DlcmParams::init(3, 2, 0, 2, &mut rng);
        for v in params.v_phi.data_mut() {
            *v = 0.0;
        }
        let feats = list_tensor(&[&[0.5, 0.1], &[0.0, -0.3], &[0.9, 0.9]]);
        assert_eq!(scores_for(&params, &feats, 3), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn phi_zero_w_and_b_gives_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut params = DlcmParams::init(3, 2, 0, 2, &mut rng);
        for v in params.w_phi.data_mut() {
            *v = 0.0;
        }
        for v in params.b_phi.data_mut() {
            *v = 0.0;
        }
        let feats = list_tensor(&[&[0.5, 0.1], &[0.0, -0.3], &[0.9, 0.9]]);
        // tanh(0) = 0 annihilates every output regardless of o.
        assert_eq!(scores_for(&params, &feats, 3), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn truncating_the_worst_tail_changes_the_context() {
        // The worst-ranked documents are fed first, so dropping them shifts
        // s_n while the surviving suffix still sees the same inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let params = DlcmParams::init(4, 2, 0, 2, &mut rng);
        let full = list_tensor(&[&[0.9, 0.1], &[0.5, 0.4], &[0.2, 0.8], &[0.7, 0.7]]);
        let s_full = scores_for(&params, &full, 4);
        let truncated = list_tensor(&[&[0.9, 0.1], &[0.5, 0.4], &[0.2, 0.8]]);
        let mut p3 = params.clone();
        p3.n = 3;
        let s_trunc = scores_for(&p3, &truncated, 3);
        // Same top document, different encoded context, different score.
        assert_ne!(s_full[0], s_trunc[0]);
    }

    #[test]
    fn padded_rows_do_not_receive_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let params = DlcmParams::init(4, 2, 1, 2, &mut rng);
        let feats = list_tensor(&[&[0.9, 0.1], &[0.5, 0.4], &[0.0, 0.0], &[0.0, 0.0]]);
        let s = scores_for(&params, &feats, 2);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = DlcmParams::init(3, 3, 2, 2, &mut rng);
        let feats = list_tensor(&[&[0.5, 0.1, 0.2], &[0.0, -0.3, 0.1], &[0.9, 0.9, 0.4]]);
        let a = scores_for(&params, &feats, 3);
        let b = scores_for(&params, &feats, 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn gru_state_differs_from_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = DlcmParams::init(2, 2, 0, 1, &mut rng);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x1 = g.leaf(Tensor::matrix(1, 2, vec![0.8, -0.2]).unwrap());
        let x2 = g.leaf(Tensor::matrix(1, 2, vec![0.3, 0.9]).unwrap());
        let (outputs, s_n) = gru_encode(&mut g, &bound.gru, &[x1, x2]).unwrap();
        let o_n = g.value(*outputs.last().unwrap()).data().to_vec();
        let s = g.value(s_n).data().to_vec();
        assert_ne!(o_n, s);
        // And s_n must be inside tanh range.
        for v in s {
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn phi_contraction_shapes_line_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for (alpha, beta, k) in [(2usize, 0usize, 1usize), (3, 2, 4), (1, 1, 3)] {
            let params = DlcmParams::init(3, alpha, beta, k, &mut rng);
            let rows: Vec<Vec<f32>> = (0..3)
                .map(|i| (0..alpha).map(|j| ((i + j) as f32).cos()).collect())
                .collect();
            let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
            let feats = list_tensor(&refs);
            let s = scores_for(&params, &feats, 3);
            assert_eq!(s.len(), 3);
            assert_abs_diff_eq!(s.iter().sum::<f32>(), s.iter().sum::<f32>());
        }
    }
}
