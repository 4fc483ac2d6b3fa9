//! Operation kinds, forward evaluation, and backward rules.

use super::{GradError, Graph, Tensor, Var};

/// Lower clamp applied to `log` and `clamped_reciprocal` arguments.
pub const LOG_CLAMP: f32 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Neg(Var),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Exp(Var),
    Log(Var),
    ClampedRecip(Var),
    RectExp(Var),
    Clamp { x: Var, lo: f32, hi: f32 },
    NormalCdf(Var),
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    MaxAxis { x: Var, axis: usize },
    SoftmaxLast(Var),
    Reshape(Var),
    ConcatCols { a: Var, b: Var },
    StackScalars { parts: Vec<Var> },
    Row { x: Var, index: usize },
    Gather { x: Var, indices: Vec<usize> },
    ShiftDown(Var),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::ConcatCols { a, b } => vec![*a, *b],
            Op::Neg(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Elu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::ClampedRecip(x)
            | Op::RectExp(x)
            | Op::Clamp { x, .. }
            | Op::NormalCdf(x)
            | Op::SumAxis { x, .. }
            | Op::SumAll(x)
            | Op::MaxAxis { x, .. }
            | Op::SoftmaxLast(x)
            | Op::Reshape(x)
            | Op::Row { x, .. }
            | Op::Gather { x, .. }
            | Op::ShiftDown(x) => vec![*x],
            Op::StackScalars { parts } => parts.clone(),
        }
    }
}

/// How a binary operand pair lines up.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Align {
    Same,
    /// Left operand is a scalar broadcast over the right's shape.
    ScalarLhs,
    ScalarRhs,
    /// Left operand is a rank-1 vector broadcast over the right's leading axes.
    VecLhs,
    VecRhs,
}

fn align(lhs: &[usize], rhs: &[usize]) -> Option<Align> {
    if lhs == rhs {
        return Some(Align::Same);
    }
    let ln: usize = lhs.iter().product();
    let rn: usize = rhs.iter().product();
    if ln == 1 {
        return Some(Align::ScalarLhs);
    }
    if rn == 1 {
        return Some(Align::ScalarRhs);
    }
    if lhs.len() == 1 && lhs[0] == *rhs.last().unwrap() {
        return Some(Align::VecLhs);
    }
    if rhs.len() == 1 && rhs[0] == *lhs.last().unwrap() {
        return Some(Align::VecRhs);
    }
    None
}

/// Evaluate `f(a, b)` elementwise after broadcasting the smaller operand.
fn broadcast_eval(a: &[f32], b: &[f32], how: Align, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    match how {
        Align::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Align::ScalarLhs => b.iter().map(|&y| f(a[0], y)).collect(),
        Align::ScalarRhs => a.iter().map(|&x| f(x, b[0])).collect(),
        Align::VecLhs => b
            .iter()
            .enumerate()
            .map(|(i, &y)| f(a[i % a.len()], y))
            .collect(),
        Align::VecRhs => a
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b[i % b.len()]))
            .collect(),
    }
}

/// Fold a full-shape gradient back onto a broadcast operand.
fn reduce_to_operand(grad: &[f32], operand_len: usize, broadcast: bool) -> Vec<f32> {
    if !broadcast {
        return grad.to_vec();
    }
    if operand_len == 1 {
        return vec![grad.iter().sum()];
    }
    let mut out = vec![0.0f32; operand_len];
    for (i, &g) in grad.iter().enumerate() {
        out[i % operand_len] += g;
    }
    out
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn elu(x: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// Standard normal CDF, evaluated through the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// (outer, axis extent, inner) strides for reducing `shape` along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != axis)
        .map(|(_, &e)| e)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl Graph {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        make: impl Fn(Var, Var) -> Op,
    ) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let how = align(&sa, &sb).ok_or(GradError::DimensionMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let out_shape = match how {
            Align::Same | Align::ScalarRhs | Align::VecRhs => sa,
            Align::ScalarLhs | Align::VecLhs => sb,
        };
        let data = broadcast_eval(self.data(a), self.data(b), how, f);
        Ok(self.push(make(a, b), Tensor::new(out_shape, data)?))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(op, Tensor::new(shape, data).expect("same shape"))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GradError::DimensionMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Op::Matmul { a, b }, Tensor::new(vec![m, n], data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, Op::Tanh(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, elu, Op::Elu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, Op::Exp(x))
    }

    /// Natural log with the argument pre-clamped to `>= 1e-12`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(LOG_CLAMP).ln(), Op::Log(x))
    }

    /// `1 / max(x, 1e-12)`.
    pub fn clamped_reciprocal(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v.max(LOG_CLAMP), Op::ClampedRecip(x))
    }

    /// Rectified exponential: `e^x` for `x > 0`, `0` otherwise.
    pub fn rect_exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v.exp() } else { 0.0 }, Op::RectExp(x))
    }

    /// Clamp values to `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Standard normal CDF, with the Gaussian pdf as its backward rule.
    pub fn normal_cdf(&mut self, x: Var) -> Var {
        self.unary(x, |v| normal_cdf(v as f64) as f32, Op::NormalCdf(x))
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(GradError::AxisOutOfRange {
                op: "sum",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let data = self.data(x);
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    out[o * inner + i] += data[(o * mid + m) * inner + i];
                }
            }
        }
        Ok(self.push(Op::SumAxis { x, axis }, Tensor::new(drop_axis(&shape, axis), out)?))
    }

    /// Sum of every element, as a scalar-shaped tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f32 = self.data(x).iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(total))
    }

    /// Max over one axis; gradient routes to the first maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(GradError::AxisOutOfRange {
                op: "max",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let data = self.data(x);
        let mut out = vec![f32::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    let v = data[(o * mid + m) * inner + i];
                    let slot = &mut out[o * inner + i];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
        Ok(self.push(Op::MaxAxis { x, axis }, Tensor::new(drop_axis(&shape, axis), out)?))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_lastaxis(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap();
        let data = self.data(x);
        let mut out = vec![0.0f32; data.len()];
        for row in 0..data.len() / cols {
            let chunk = &data[row * cols..(row + 1) * cols];
            let max = chunk.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for (j, &v) in chunk.iter().enumerate() {
                let e = (v - max).exp();
                out[row * cols + j] = e;
                denom += e;
            }
            for j in 0..cols {
                out[row * cols + j] /= denom;
            }
        }
        self.push(Op::SoftmaxLast(x), Tensor::new(shape, out).expect("same shape"))
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, GradError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.iter().any(|&e| e == 0) {
            return Err(GradError::InvalidShape {
                op: "reshape",
                shape,
                reason: "element count must match",
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.push(Op::Reshape(x), Tensor::new(shape, data)?))
    }

    /// Concatenate two rank-2 tensors along the column axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(GradError::DimensionMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        Ok(self.push(Op::ConcatCols { a, b }, Tensor::new(vec![rows, ca + cb], out)?))
    }

    /// Stack scalar-shaped nodes into a rank-1 vector.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        if parts.is_empty() {
            return Err(GradError::InvalidShape {
                op: "stack_scalars",
                shape: vec![0],
                reason: "needs at least one part",
            });
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.numel() != 1 {
                return Err(GradError::InvalidShape {
                    op: "stack_scalars",
                    shape: t.shape().to_vec(),
                    reason: "parts must be scalar-shaped",
                });
            }
            data.push(t.item());
        }
        Ok(self.push(
            Op::StackScalars {
                parts: parts.to_vec(),
            },
            Tensor::vector(data),
        ))
    }

    /// Select one row of a rank-2 tensor as a `[1, cols]` tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(GradError::InvalidShape {
                op: "row",
                shape,
                reason: "expects a rank-2 tensor",
            });
        }
        if index >= shape[0] {
            return Err(GradError::IndexOutOfRange {
                op: "row",
                index,
                extent: shape[0],
            });
        }
        let cols = shape[1];
        let data = self.data(x)[index * cols..(index + 1) * cols].to_vec();
        Ok(self.push(Op::Row { x, index }, Tensor::new(vec![1, cols], data)?))
    }

    /// Gather elements (rank-1) or rows (rank-2) along the first axis.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        let inner: usize = shape[1..].iter().product();
        for &i in indices {
            if i >= rows {
                return Err(GradError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    extent: rows,
                });
            }
        }
        let data = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&data[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        Ok(self.push(
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            Tensor::new(out_shape, out)?,
        ))
    }

    /// Shift a rank-1 vector down one slot: `out[0] = 0`, `out[i] = x[i-1]`.
    pub fn shift_down(&mut self, x: Var) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 {
            return Err(GradError::InvalidShape {
                op: "shift_down",
                shape,
                reason: "expects a rank-1 tensor",
            });
        }
        let data = self.data(x);
        let mut out = vec![0.0f32; data.len()];
        out[1..].copy_from_slice(&data[..data.len() - 1]);
        Ok(self.push(Op::ShiftDown(x), Tensor::vector(out)))
    }

    pub(crate) fn backprop(&mut self, id: usize, op: &Op) {
        let g = match self.nodes[id].value.grad.clone() {
            Some(g) => g,
            None => return,
        };
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = transpose_raw(self.data(*b), k, n);
                let da = matmul_raw(&g, &bt, m, n, k);
                self.add_grad(*a, &da);
                let at = transpose_raw(self.data(*a), m, k);
                let db = matmul_raw(&at, &g, k, m, n);
                self.add_grad(*b, &db);
            }
            Op::Add { a, b } => {
                let (la, lb) = (self.value(*a).numel(), self.value(*b).numel());
                let da = reduce_to_operand(&g, la, la != g.len());
                self.add_grad(*a, &da);
                let db = reduce_to_operand(&g, lb, lb != g.len());
                self.add_grad(*b, &db);
            }
            Op::Sub { a, b } => {
                let (la, lb) = (self.value(*a).numel(), self.value(*b).numel());
                let da = reduce_to_operand(&g, la, la != g.len());
                self.add_grad(*a, &da);
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                let db = reduce_to_operand(&neg, lb, lb != g.len());
                self.add_grad(*b, &db);
            }
            Op::Mul { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let how = align(&sa, &sb).expect("validated at construction");
                let (da_full, db_full): (Vec<f32>, Vec<f32>) = {
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    let da = broadcast_eval(&g, bd, grad_align_rhs(how), |gv, bv| gv * bv);
                    let db = broadcast_eval(&g, ad, grad_align_lhs(how), |gv, av| gv * av);
                    (da, db)
                };
                let la = self.value(*a).numel();
                let lb = self.value(*b).numel();
                let da = reduce_to_operand(&da_full, la, la != g.len());
                self.add_grad(*a, &da);
                let db = reduce_to_operand(&db_full, lb, lb != g.len());
                self.add_grad(*b, &db);
            }
            Op::Neg(x) => {
                let dx: Vec<f32> = g.iter().map(|v| -v).collect();
                self.add_grad(*x, &dx);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[id].value.data.clone();
                let dx: Vec<f32> = g.iter().zip(&y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                self.add_grad(*x, &dx);
            }
            Op::Tanh(x) => {
                let y = self.nodes[id].value.data.clone();
                let dx: Vec<f32> = g.iter().zip(&y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                self.add_grad(*x, &dx);
            }
            Op::Elu(x) => {
                let xs = self.data(*x).to_vec();
                let y = self.nodes[id].value.data.clone();
                // elu'(x) = 1 for x >= 0, e^x = y + 1 otherwise.
                let dx: Vec<f32> = g
                    .iter()
                    .zip(xs.iter().zip(&y))
                    .map(|(gv, (&xv, &yv))| if xv >= 0.0 { *gv } else { gv * (yv + 1.0) })
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::Exp(x) => {
                let y = self.nodes[id].value.data.clone();
                let dx: Vec<f32> = g.iter().zip(&y).map(|(gv, yv)| gv * yv).collect();
                self.add_grad(*x, &dx);
            }
            Op::Log(x) => {
                let xs = self.data(*x).to_vec();
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&xs)
                    .map(|(gv, &xv)| if xv >= LOG_CLAMP { gv / xv } else { 0.0 })
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::ClampedRecip(x) => {
                let xs = self.data(*x).to_vec();
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&xs)
                    .map(|(gv, &xv)| if xv >= LOG_CLAMP { -gv / (xv * xv) } else { 0.0 })
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::RectExp(x) => {
                // ψ'(x) = e^x on x > 0 and 0 elsewhere, which is ψ itself.
                let y = self.nodes[id].value.data.clone();
                let dx: Vec<f32> = g.iter().zip(&y).map(|(gv, yv)| gv * yv).collect();
                self.add_grad(*x, &dx);
            }
            Op::Clamp { x, lo, hi } => {
                let xs = self.data(*x).to_vec();
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&xs)
                    .map(|(gv, &xv)| if xv >= *lo && xv <= *hi { *gv } else { 0.0 })
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::NormalCdf(x) => {
                let xs = self.data(*x).to_vec();
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&xs)
                    .map(|(gv, &xv)| gv * normal_pdf(xv as f64) as f32)
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, mid, inner) = axis_split(&shape, *axis);
                let mut dx = vec![0.0f32; outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            dx[(o * mid + m) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::SumAll(x) => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.add_grad(*x, &dx);
            }
            Op::MaxAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, mid, inner) = axis_split(&shape, *axis);
                let xs = self.data(*x).to_vec();
                let mut dx = vec![0.0f32; xs.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = 0usize;
                        let mut best_v = f32::NEG_INFINITY;
                        for m in 0..mid {
                            let v = xs[(o * mid + m) * inner + i];
                            if v > best_v {
                                best_v = v;
                                best = m;
                            }
                        }
                        dx[(o * mid + best) * inner + i] = g[o * inner + i];
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::SoftmaxLast(x) => {
                let y = self.nodes[id].value.data.clone();
                let cols = *self.shape(*x).last().unwrap();
                let mut dx = vec![0.0f32; y.len()];
                for row in 0..y.len() / cols {
                    let ys = &y[row * cols..(row + 1) * cols];
                    let gs = &g[row * cols..(row + 1) * cols];
                    let dot: f32 = ys.iter().zip(gs).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..cols {
                        dx[row * cols + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::Reshape(x) => {
                self.add_grad(*x, &g);
            }
            Op::ConcatCols { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
                let mut da = vec![0.0f32; rows * ca];
                let mut db = vec![0.0f32; rows * cb];
                for r in 0..rows {
                    let base = r * (ca + cb);
                    da[r * ca..(r + 1) * ca].copy_from_slice(&g[base..base + ca]);
                    db[r * cb..(r + 1) * cb].copy_from_slice(&g[base + ca..base + ca + cb]);
                }
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::StackScalars { parts } => {
                for (i, p) in parts.iter().enumerate() {
                    self.add_grad(*p, &[g[i]]);
                }
            }
            Op::Row { x, index } => {
                let shape = self.shape(*x).to_vec();
                let cols = shape[1];
                let mut dx = vec![0.0f32; shape[0] * cols];
                dx[index * cols..(index + 1) * cols].copy_from_slice(&g);
                self.add_grad(*x, &dx);
            }
            Op::Gather { x, indices } => {
                let shape = self.shape(*x).to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut dx = vec![0.0f32; shape.iter().product()];
                for (slot, &i) in indices.iter().enumerate() {
                    for j in 0..inner {
                        dx[i * inner + j] += g[slot * inner + j];
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::ShiftDown(x) => {
                let n = g.len();
                let mut dx = vec![0.0f32; n];
                dx[..n - 1].copy_from_slice(&g[1..]);
                self.add_grad(*x, &dx);
            }
        }
    }
}

/// Broadcast layout for `g (out shape) × b-data` when computing dA of Mul.
fn grad_align_rhs(how: Align) -> Align {
    match how {
        Align::Same => Align::Same,
        // out has rhs's shape; b is full-size, g is full-size.
        Align::ScalarLhs | Align::VecLhs => Align::Same,
        Align::ScalarRhs => Align::ScalarRhs,
        Align::VecRhs => Align::VecRhs,
    }
}

/// Broadcast layout for `g (out shape) × a-data` when computing dB of Mul.
fn grad_align_lhs(how: Align) -> Align {
    match how {
        Align::Same => Align::Same,
        Align::ScalarRhs | Align::VecRhs => Align::Same,
        Align::ScalarLhs => Align::ScalarRhs,
        Align::VecLhs => Align::VecRhs,
    }
}

pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
