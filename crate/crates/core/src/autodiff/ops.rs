//! Elementwise, matrix and reduction operations.

use rayon::prelude::*;

use super::tape::{Backward, Tape, Tensor, Var};
use crate::error::{NkfError, Result};

/// `c = alpha * op(a) * op(b) + beta * c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let last_a = (m as isize - 1) * rsa + (k as isize - 1) * csa;
    let last_b = (k as isize - 1) * rsb + (n as isize - 1) * csb;
    assert!(rsa >= 0 && csa >= 0 && (last_a as usize) < a.len());
    assert!(rsb >= 0 && csb >= 0 && (last_b as usize) < b.len());
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(NkfError::InvalidInput(format!("shape mismatch {sa:?} vs {sb:?}")));
    }
    Ok(())
}

struct AddOp {
    sign: f64,
}

impl Backward for AddOp {
    fn name(&self) -> &'static str {
        if self.sign > 0.0 { "add" } else { "sub" }
    }

    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &[f64], needs: &[bool], grads: &mut [Vec<f64>]) {
        if needs[0] {
            grads[0].copy_from_slice(grad);
        }
        if needs[1] {
            grads[1].iter_mut().zip(grad).for_each(|(g, d)| *g = self.sign * d);
        }
    }
}

struct MulOp;

impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &[f64], needs: &[bool], grads: &mut [Vec<f64>]) {
        if needs[0] {
            for ((g, d), y) in grads[0].iter_mut().zip(grad).zip(inputs[1].data()) {
                *g = d * y;
            }
        }
        if needs[1] {
            for ((g, d), x) in grads[1].iter_mut().zip(grad).zip(inputs[0].data()) {
                *g = d * x;
            }
        }
    }
}

struct ScaleOp(f64);

impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &[f64], _n: &[bool], grads: &mut [Vec<f64>]) {
        grads[0].iter_mut().zip(grad).for_each(|(g, d)| *g = self.0 * d);
    }
}

struct MatMulOp {
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &[f64], needs: &[bool], grads: &mut [Vec<f64>]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if needs[0] {
            // dA = dC · Bᵀ
            gemm(m, n, k, grad, n as isize, 1, inputs[1].data(), 1, n as isize, 0.0, &mut grads[0]);
        }
        if needs[1] {
            // dB = Aᵀ · dC
            gemm(k, m, n, inputs[0].data(), 1, k as isize, grad, n as isize, 1, 0.0, &mut grads[1]);
        }
    }
}

struct LinearOp {
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Backward for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &[f64], needs: &[bool], grads: &mut [Vec<f64>]) {
        let (r, i, o) = (self.rows, self.fan_in, self.fan_out);
        if needs[0] {
            gemm(r, o, i, grad, o as isize, 1, inputs[1].data(), 1, o as isize, 0.0, &mut grads[0]);
        }
        if needs[1] {
            gemm(i, r, o, inputs[0].data(), 1, i as isize, grad, o as isize, 1, 0.0, &mut grads[1]);
        }
        if needs[2] {
            for row in grad.chunks_exact(o) {
                grads[2].iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
        }
    }
}

/// Pointwise nonlinearities whose derivative is a function of input and output.
#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Log,
    Abs,
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 { 1.0 } else { 0.0 }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Log => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct UnaryOp(Unary);

impl Backward for UnaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Log => "log",
            Unary::Abs => "abs",
        }
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], _n: &[bool], grads: &mut [Vec<f64>]) {
        for (((g, d), x), y) in grads[0].iter_mut().zip(grad).zip(inputs[0].data()).zip(output.data()) {
            *g = d * self.0.derivative(*x, *y);
        }
    }
}

struct SumOp {
    scale: f64,
}

impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &[f64], _n: &[bool], grads: &mut [Vec<f64>]) {
        let d = grad[0] * self.scale;
        grads[0].iter_mut().for_each(|g| *g = d);
    }
}

/// Mean binary cross-entropy of `sigmoid(logit)` against 0/1 targets.
struct BceOp {
    targets: Vec<f64>,
}

impl Backward for BceOp {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &[f64], _n: &[bool], grads: &mut [Vec<f64>]) {
        let scale = grad[0] / self.targets.len() as f64;
        for ((g, z), t) in grads[0].iter_mut().zip(inputs[0].data()).zip(&self.targets) {
            *g = scale * (sigmoid(*z) - t);
        }
    }
}

struct ConcatColsOp {
    rows: usize,
    left: usize,
    right: usize,
}

impl Backward for ConcatColsOp {
    fn name(&self) -> &'static str {
        "concat_cols"
    }

    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &[f64], needs: &[bool], grads: &mut [Vec<f64>]) {
        let w = self.left + self.right;
        for r in 0..self.rows {
            let row = &grad[r * w..(r + 1) * w];
            if needs[0] {
                grads[0][r * self.left..(r + 1) * self.left].copy_from_slice(&row[..self.left]);
            }
            if needs[1] {
                grads[1][r * self.right..(r + 1) * self.right].copy_from_slice(&row[self.left..]);
            }
        }
    }
}

struct ReshapeOp;

impl Backward for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &[f64], _n: &[bool], grads: &mut [Vec<f64>]) {
        grads[0].copy_from_slice(grad);
    }
}

/// `W G W` for `W = diag(w)`.
struct DiagSandwichOp {
    n: usize,
}

impl Backward for DiagSandwichOp {
    fn name(&self) -> &'static str {
        "diag_sandwich"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &[f64], needs: &[bool], grads: &mut [Vec<f64>]) {
        let n = self.n;
        let g = inputs[0].data();
        let w = inputs[1].data();
        for i in 0..n {
            for j in 0..n {
                let d = grad[i * n + j];
                if needs[0] {
                    grads[0][i * n + j] = d * w[i] * w[j];
                }
                if needs[1] {
                    grads[1][i] += d * g[i * n + j] * w[j];
                    grads[1][j] += d * w[i] * g[i * n + j];
                }
            }
        }
    }
}

/// Contiguous block of leading-axis rows.
struct SliceRowsOp {
    offset: usize,
}

impl Backward for SliceRowsOp {
    fn name(&self) -> &'static str {
        "slice_rows"
    }

    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &[f64], _n: &[bool], grads: &mut [Vec<f64>]) {
        grads[0][self.offset..self.offset + grad.len()].copy_from_slice(grad);
    }
}

struct ConcatRowsOp {
    split: usize,
}

impl Backward for ConcatRowsOp {
    fn name(&self) -> &'static str {
        "concat_rows"
    }

    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &[f64], needs: &[bool], grads: &mut [Vec<f64>]) {
        if needs[0] {
            grads[0].copy_from_slice(&grad[..self.split]);
        }
        if needs[1] {
            grads[1].copy_from_slice(&grad[self.split..]);
        }
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(t, &[a, b], Box::new(AddOp { sign: 1.0 })))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(t, &[a, b], Box::new(AddOp { sign: -1.0 })))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(t, &[a, b], Box::new(MulOp)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect());
        self.push(t, &[a], Box::new(ScaleOp(s)))
    }

    /// `[m, k] · [k, n]`; a rank-1 right operand is treated as `[k, 1]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 {
            return Err(NkfError::InvalidInput(format!("matmul lhs shape {:?}", x.shape())));
        }
        let (m, k) = (x.shape()[0], x.shape()[1]);
        let (k2, n, vector_rhs) = match y.shape() {
            [k2] => (*k2, 1, true),
            [k2, n] => (*k2, *n, false),
            s => return Err(NkfError::InvalidInput(format!("matmul rhs shape {s:?}"))),
        };
        if k != k2 {
            return Err(NkfError::DimensionMismatch { expected: k, actual: k2 });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.data(), k as isize, 1, y.data(), n as isize, 1, 0.0, &mut out);
        let shape = if vector_rhs { vec![m] } else { vec![m, n] };
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], Box::new(MatMulOp { m, k, n })))
    }

    /// `x W + b` for `x: [r, i]`, `W: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let fan_in = xv.cols();
        let rows = xv.rows();
        if wv.shape().len() != 2 || wv.shape()[0] != fan_in {
            return Err(NkfError::DimensionMismatch { expected: fan_in, actual: wv.shape()[0] });
        }
        let fan_out = wv.shape()[1];
        if bv.len() != fan_out {
            return Err(NkfError::DimensionMismatch { expected: fan_out, actual: bv.len() });
        }
        // Row-by-row accumulation in a fixed order, so each output row depends
        // only on its input row (a blocked GEMM may round differently by
        // row position, which would break permutation invariance downstream).
        let mut out: Vec<f64> = Vec::with_capacity(rows * fan_out);
        for _ in 0..rows {
            out.extend_from_slice(bv.data());
        }
        let wd = wv.data();
        out.par_chunks_mut(fan_out.max(1))
            .zip(xv.data().par_chunks(fan_in.max(1)))
            .for_each(|(o, x)| {
                for (xi, wrow) in x.iter().zip(wd.chunks_exact(fan_out)) {
                    o.iter_mut().zip(wrow).for_each(|(a, b)| *a += xi * b);
                }
            });
        let t = Tensor::from_parts(vec![rows, fan_out], out);
        Ok(self.push(t, &[x, w, b], Box::new(LinearOp { rows, fan_in, fan_out })))
    }

    fn unary(&mut self, a: Var, f: Unary) -> Var {
        let x = self.value(a);
        let t = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f.forward(v)).collect());
        self.push(t, &[a], Box::new(UnaryOp(f)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], Box::new(SumOp { scale: 1.0 }))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len().max(1) as f64;
        let s = x.data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), &[a], Box::new(SumOp { scale: 1.0 / n }))
    }

    /// Mean of `-t log σ(z) - (1 - t) log(1 - σ(z))` over all entries.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(NkfError::DimensionMismatch { expected: z.len(), actual: targets.len() });
        }
        if targets.is_empty() {
            return Err(NkfError::InvalidInput("empty BCE targets".into()));
        }
        // -t log σ(z) - (1-t) log σ(-z) = softplus(z) - t z
        let total: f64 = z.data().iter().zip(targets).map(|(z, t)| softplus(*z) - t * z).sum();
        let v = total / targets.len() as f64;
        Ok(self.push(Tensor::scalar(v), &[logits], Box::new(BceOp { targets: targets.to_vec() })))
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let rows = x.rows();
        if y.rows() != rows {
            return Err(NkfError::DimensionMismatch { expected: rows, actual: y.rows() });
        }
        let (left, right) = (x.cols(), y.cols());
        let mut out = Vec::with_capacity(rows * (left + right));
        for r in 0..rows {
            out.extend_from_slice(&x.data()[r * left..(r + 1) * left]);
            out.extend_from_slice(&y.data()[r * right..(r + 1) * right]);
        }
        let t = Tensor::from_parts(vec![rows, left + right], out);
        Ok(self.push(t, &[a, b], Box::new(ConcatColsOp { rows, left, right })))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        Ok(self.push(t, &[a], Box::new(ReshapeOp)))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let rows = x.shape().first().copied().unwrap_or(1);
        if start > end || end > rows {
            return Err(NkfError::InvalidInput(format!("row range {start}..{end} outside {rows} rows")));
        }
        let width = if rows == 0 { 0 } else { x.len() / rows };
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let t = Tensor::from_parts(shape, x.data()[start * width..end * width].to_vec());
        Ok(self.push(t, &[a], Box::new(SliceRowsOp { offset: start * width })))
    }

    /// Stacks `b` below `a`; trailing dimensions must agree.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().is_empty() || x.shape()[1..] != y.shape()[1..] {
            return Err(NkfError::InvalidInput(format!("cannot stack {:?} on {:?}", y.shape(), x.shape())));
        }
        let mut shape = x.shape().to_vec();
        shape[0] += y.shape()[0];
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        let t = Tensor::from_parts(shape, data);
        let split = x.len();
        Ok(self.push(t, &[a, b], Box::new(ConcatRowsOp { split })))
    }

    /// `diag(w) G diag(w)` for square `G: [n, n]` and `w: [n]`.
    pub fn diag_sandwich(&mut self, g: Var, w: Var) -> Result<Var> {
        let (gv, wv) = (self.value(g), self.value(w));
        let n = wv.len();
        if gv.shape() != [n, n] {
            return Err(NkfError::DimensionMismatch { expected: n * n, actual: gv.len() });
        }
        let wd = wv.data();
        let data = gv
            .data()
            .iter()
            .enumerate()
            .map(|(idx, v)| wd[idx / n] * v * wd[idx % n])
            .collect();
        let t = Tensor::from_parts(vec![n, n], data);
        Ok(self.push(t, &[g, w], Box::new(DiagSandwichOp { n })))
    }
}
