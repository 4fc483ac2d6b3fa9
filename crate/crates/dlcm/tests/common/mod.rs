//! Test-only f64 reference implementations and finite-difference drivers.
//!
//! Everything here is written directly from the model and loss definitions
//! with plain f64 loops, independent of the library's graph machinery, so
//! it can serve as an oracle for the f32 implementation path.

#![allow(dead_code)]

use dlcm::models::{ModelKind, ModelParams};

pub const REL_TOL: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-5;

/// Elementwise tolerance check: each entry must match within the relative
/// tolerance, or absolutely for near-zero gradients. Returns descriptions
/// of every violation.
pub fn grad_mismatches(context: &str, got: &[f32], want: &[f64]) -> Vec<String> {
    if got.len() != want.len() {
        return vec![format!("{context}: length {} vs {}", got.len(), want.len())];
    }
    let mut out = Vec::new();
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        let g = g as f64;
        let abs_err = (g - w).abs();
        let rel_err = abs_err / g.abs().max(w.abs()).max(1e-300);
        if rel_err > REL_TOL && abs_err > ABS_TOL {
            out.push(format!(
                "{context}[{i}]: got {g}, want {w} (rel {rel_err:.2e}, abs {abs_err:.2e})"
            ));
        }
    }
    out
}

/// Panic on the first tolerance violation.
pub fn assert_grad_close(context: &str, got: &[f32], want: &[f64]) {
    let bad = grad_mismatches(context, got, want);
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}

// ---------------------------------------------------------------------------
// f64 primitives
// ---------------------------------------------------------------------------

pub mod shadow {
    /// `out[i][j] = sum_p a[i][p] * b[p][j]` for row-major buffers.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    /// `x (len in) . w [in, out] + b` as a row vector.
    pub fn vec_mat(x: &[f64], w: &[f64], b: Option<&[f64]>, out_dim: usize) -> Vec<f64> {
        let in_dim = x.len();
        let mut out = vec![0.0; out_dim];
        for i in 0..in_dim {
            for j in 0..out_dim {
                out[j] += x[i] * w[i * out_dim + j];
            }
        }
        if let Some(b) = b {
            for j in 0..out_dim {
                out[j] += b[j];
            }
        }
        out
    }

    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    pub fn elu(x: f64) -> f64 {
        if x >= 0.0 {
            x
        } else {
            x.exp() - 1.0
        }
    }

    pub fn normal_cdf(x: f64) -> f64 {
        0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
    }

    pub fn gain(y: u8) -> f64 {
        ((1u32 << y) - 1) as f64
    }

    pub fn discount(rank1: usize) -> f64 {
        1.0 / ((rank1 + 1) as f64).log2()
    }

    /// Log-sum-exp of a slice, max-shifted.
    fn logsumexp(xs: &[f64]) -> f64 {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    /// ListMLE: likelihood of the (labels desc, initial order asc) list.
    pub fn listmle(scores: &[f64], labels: &[u8], initial_order: &[usize]) -> f64 {
        let m = scores.len();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.sort_by(|&a, &b| {
            labels[b]
                .cmp(&labels[a])
                .then(initial_order[a].cmp(&initial_order[b]))
        });
        let sorted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let mut loss = 0.0;
        for i in 0..m {
            loss += logsumexp(&sorted[i..]) - sorted[i];
        }
        loss
    }

    /// SoftRank loss: negative expected NDCG over Gaussian-smoothed scores.
    pub fn softrank(scores: &[f64], labels: &[u8], initial_order: &[usize], sigma: f64) -> f64 {
        let m = scores.len();
        let mut sorted = labels.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let ideal: f64 = sorted
            .iter()
            .enumerate()
            .map(|(r, &y)| gain(y) * discount(r + 1))
            .sum();
        if ideal == 0.0 {
            return 0.0;
        }
        let mut fold: Vec<usize> = (0..m).collect();
        fold.sort_by_key(|&i| initial_order[i]);
        let mut expected = 0.0;
        for j in 0..m {
            let mut p = vec![0.0; m];
            p[0] = 1.0;
            for &i in &fold {
                if i == j {
                    continue;
                }
                let pi = normal_cdf((scores[i] - scores[j]) / (sigma * std::f64::consts::SQRT_2));
                let mut next = vec![0.0; m];
                for r in 0..m {
                    let shifted = if r > 0 { p[r - 1] } else { 0.0 };
                    next[r] = shifted * pi + p[r] * (1.0 - pi);
                }
                p = next;
            }
            for (r, pr) in p.iter().enumerate() {
                expected += pr * gain(labels[j]) * discount(r + 1);
            }
        }
        -expected / ideal
    }

    /// Attention Rank cross entropy with the rectified-exponential (or
    /// softmax) score attention.
    pub fn attrank(scores: &[f64], labels: &[u8], softmax_scores: bool) -> f64 {
        let m = scores.len();
        let psi = |x: f64| if x > 0.0 { x.exp() } else { 0.0 };
        let raw_y: Vec<f64> = labels.iter().map(|&y| psi(y as f64)).collect();
        let denom_y: f64 = raw_y.iter().sum();
        let a_y: Vec<f64> = if denom_y == 0.0 {
            vec![0.0; m]
        } else {
            raw_y.iter().map(|v| v / denom_y).collect()
        };
        let a_s: Vec<f64> = if softmax_scores {
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
            let d: f64 = exps.iter().sum();
            exps.iter().map(|e| e / d).collect()
        } else {
            let raw: Vec<f64> = scores.iter().map(|&s| psi(s)).collect();
            let d: f64 = raw.iter().sum();
            // The f32 path guards a zero denominator with a clamped
            // reciprocal of 1e-12; mirror the same limit.
            let d = d.max(1e-12);
            raw.iter().map(|v| v / d).collect()
        };
        let clamp = |x: f64| x.clamp(1e-12, 1.0);
        let mut loss = 0.0;
        for i in 0..m {
            loss -= a_y[i] * clamp(a_s[i]).ln() + (1.0 - a_y[i]) * clamp(1.0 - a_s[i]).ln();
        }
        loss
    }
}

// ---------------------------------------------------------------------------
// f64 shadow of the models, keyed by the checkpoint tensor layout
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct ShadowModel {
    pub kind: ModelKind,
    pub n: usize,
    pub alpha: usize,
    pub beta: usize,
    pub k: usize,
    /// Same names, shapes, and order as `ModelParams::named_tensors`.
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl ShadowModel {
    pub fn of(params: &ModelParams) -> Self {
        let (beta, k) = match params {
            ModelParams::Dlcm(d) => (d.beta, d.k),
            _ => (0, 0),
        };
        ShadowModel {
            kind: params.kind(),
            n: params.list_size().unwrap_or(0),
            alpha: params.alpha(),
            beta,
            k,
            tensors: params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| {
                    (
                        name,
                        t.shape().to_vec(),
                        t.data().iter().map(|&v| v as f64).collect(),
                    )
                })
                .collect(),
        }
    }

    fn tensor(&self, name: &str) -> &[f64] {
        &self
            .tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .unwrap_or_else(|| panic!("missing shadow tensor {name}"))
            .2
    }

    /// Forward scores for the real entries of a padded `[n_rows, alpha]`
    /// feature list, mirroring the library's conventions.
    pub fn forward(&self, features: &[f64], n_rows: usize, real: usize) -> Vec<f64> {
        match self.kind {
            ModelKind::Linear => {
                let w = self.tensor("w");
                (0..real)
                    .map(|d| {
                        (0..self.alpha)
                            .map(|f| features[d * self.alpha + f] * w[f])
                            .sum()
                    })
                    .collect()
            }
            ModelKind::Dnn => (0..real)
                .map(|d| {
                    self.mlp_forward(&features[d * self.alpha..(d + 1) * self.alpha])[0]
                })
                .collect(),
            ModelKind::Lidnn => {
                let out = self.mlp_forward(features);
                out[..real].to_vec()
            }
            ModelKind::Dlcm => self.dlcm_forward(features, n_rows, real),
        }
    }

    fn mlp_forward(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let layer_count = self
            .tensors
            .iter()
            .filter(|(n, _, _)| n.ends_with(".w"))
            .count();
        for i in 0..layer_count {
            let w_entry = self
                .tensors
                .iter()
                .find(|(n, _, _)| n == &format!("layer{i}.w"))
                .unwrap();
            let out_dim = w_entry.1[1];
            let w = &w_entry.2;
            let b = self.tensor(&format!("layer{i}.b"));
            let mut out = shadow::vec_mat(&x, w, Some(b), out_dim);
            if i + 1 < layer_count {
                for v in &mut out {
                    *v = shadow::elu(*v);
                }
            }
            x = out;
        }
        x
    }

    fn dlcm_forward(&self, features: &[f64], n_rows: usize, real: usize) -> Vec<f64> {
        let (alpha, beta, k) = (self.alpha, self.beta, self.k);
        let d = alpha + beta;

        // Input abstraction.
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_rows);
        for r in 0..n_rows {
            let x = &features[r * alpha..(r + 1) * alpha];
            if beta == 0 {
                rows.push(x.to_vec());
            } else {
                let mut z1 = shadow::vec_mat(
                    x,
                    self.tensor("abstraction.w0"),
                    Some(self.tensor("abstraction.b0")),
                    beta,
                );
                for v in &mut z1 {
                    *v = shadow::elu(*v);
                }
                let mut z2 = shadow::vec_mat(
                    &z1,
                    self.tensor("abstraction.w1"),
                    Some(self.tensor("abstraction.b1")),
                    beta,
                );
                for v in &mut z2 {
                    *v = shadow::elu(*v);
                }
                let mut full = x.to_vec();
                full.extend(z2);
                rows.push(full);
            }
        }

        // GRU over the reversed list (lowest position first).
        let w_x = self.tensor("gru.w_x");
        let w_s = self.tensor("gru.w_s");
        let w_ux = self.tensor("gru.w_ux");
        let w_us = self.tensor("gru.w_us");
        let w_rx = self.tensor("gru.w_rx");
        let w_rs = self.tensor("gru.w_rs");
        let mut o = vec![0.0; d];
        let mut s = vec![0.0; d];
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(n_rows);
        for pos in (0..n_rows).rev() {
            let x = &rows[pos];
            let rx = shadow::vec_mat(x, w_rx, None, d);
            let ro = shadow::vec_mat(&o, w_rs, None, d);
            let reset: Vec<f64> = rx
                .iter()
                .zip(&ro)
                .map(|(a, b)| shadow::sigmoid(a + b))
                .collect();
            let gated: Vec<f64> = reset.iter().zip(&o).map(|(r, ov)| r * ov).collect();
            let sx = shadow::vec_mat(x, w_x, None, d);
            let sg = shadow::vec_mat(&gated, w_s, None, d);
            s = sx.iter().zip(&sg).map(|(a, b)| (a + b).tanh()).collect();
            let ux = shadow::vec_mat(x, w_ux, None, d);
            let uo = shadow::vec_mat(&o, w_us, None, d);
            let update: Vec<f64> = ux
                .iter()
                .zip(&uo)
                .map(|(a, b)| shadow::sigmoid(a + b))
                .collect();
            o = update
                .iter()
                .zip(&s)
                .zip(&o)
                .map(|((u, sv), ov)| (1.0 - u) * ov + u * sv)
                .collect();
            outputs.push(o.clone());
        }

        // phi: hidden = tanh(W . s_n + b), reshaped [d, k].
        let w_phi = self.tensor("phi.w");
        let b_phi = self.tensor("phi.b");
        let v_phi = self.tensor("phi.v");
        let mut hidden = vec![0.0; d * k];
        for row in 0..d * k {
            let mut acc = b_phi[row];
            for c in 0..d {
                acc += w_phi[row * d + c] * s[c];
            }
            hidden[row] = acc.tanh();
        }
        // Document at list position pos was fed at step n_rows-1-pos.
        (0..real)
            .map(|pos| {
                let out = &outputs[n_rows - 1 - pos];
                let mut score = 0.0;
                for kk in 0..k {
                    let mut contracted = 0.0;
                    for c in 0..d {
                        // hidden laid out row-major as [d, k].
                        contracted += out[c] * hidden[c * k + kk];
                    }
                    score += contracted * v_phi[kk];
                }
                score
            })
            .collect()
    }

    /// End-to-end loss of the pipeline under this parameter vector.
    pub fn pipeline_loss(
        &self,
        features: &[f64],
        n_rows: usize,
        real: usize,
        labels: &[u8],
        loss: dlcm::LossKind,
    ) -> f64 {
        let scores = self.forward(features, n_rows, real);
        let order: Vec<usize> = (0..real).collect();
        match loss {
            dlcm::LossKind::ListMle => shadow::listmle(&scores, labels, &order),
            dlcm::LossKind::SoftRank { sigma_s } => {
                shadow::softrank(&scores, labels, &order, sigma_s as f64)
            }
            dlcm::LossKind::AttRank { softmax_scores } => {
                shadow::attrank(&scores, labels, softmax_scores)
            }
        }
    }
}

/// Central finite differences of `f` with respect to every parameter of the
/// shadow model, at step size `h`.
pub fn central_diff_params(
    model: &ShadowModel,
    h: f64,
    f: impl Fn(&ShadowModel) -> f64,
) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(model.tensors.len());
    let mut work = model.clone();
    for t in 0..model.tensors.len() {
        let len = model.tensors[t].2.len();
        let mut g = vec![0.0; len];
        for j in 0..len {
            let orig = work.tensors[t].2[j];
            work.tensors[t].2[j] = orig + h;
            let up = f(&work);
            work.tensors[t].2[j] = orig - h;
            let down = f(&work);
            work.tensors[t].2[j] = orig;
            g[j] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}
