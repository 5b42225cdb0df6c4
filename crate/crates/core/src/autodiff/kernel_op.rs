//! Differentiable kernel matrix between two row sets.

use rayon::prelude::*;

use super::tape::{Backward, Tape, Tensor, Var};
use crate::error::{NkfError, Result};
use crate::kernel::{k_homogeneous, k_homogeneous_grad, norm};

/// Appends the homogeneous 1 to every row and returns (rows, norms).
fn lift_rows(data: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let w = width + 1;
    let rows = data.len() / width.max(1);
    let mut out = Vec::with_capacity(rows * w);
    let mut norms = Vec::with_capacity(rows);
    for r in data.chunks_exact(width) {
        out.extend_from_slice(r);
        out.push(1.0);
        norms.push(norm(&out[out.len() - w..]));
    }
    (out, norms)
}

struct KernelMatrixOp {
    width: usize,
}

impl Backward for KernelMatrixOp {
    fn name(&self) -> &'static str {
        "kernel_matrix"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &[f64], needs: &[bool], grads: &mut [Vec<f64>]) {
        let width = self.width;
        let w = width + 1;
        let (ua, na) = lift_rows(inputs[0].data(), width);
        let (ub, nb) = lift_rows(inputs[1].data(), width);
        let m = nb.len();
        let need_a = needs[0];
        let need_b = needs[1];

        // Rows of the left operand are independent; right-operand adjoints
        // are reduced over fixed-size blocks in block order so the result
        // does not depend on scheduling.
        const BLOCK: usize = 32;
        let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..na.len())
            .collect::<Vec<_>>()
            .par_chunks(BLOCK)
            .map(|rows| {
                let mut ga = vec![0.0; rows.len() * width];
                let mut gb = if need_b { vec![0.0; m * width] } else { Vec::new() };
                let mut gu = vec![0.0; w];
                let mut gv = vec![0.0; w];
                for (local, &i) in rows.iter().enumerate() {
                    let u = &ua[i * w..(i + 1) * w];
                    for j in 0..m {
                        let d = grad[i * m + j];
                        if d == 0.0 {
                            continue;
                        }
                        let v = &ub[j * w..(j + 1) * w];
                        k_homogeneous_grad(u, v, na[i], nb[j], &mut gu, &mut gv);
                        if need_a {
                            let dst = &mut ga[local * width..(local + 1) * width];
                            dst.iter_mut().zip(&gu[..width]).for_each(|(g, x)| *g += d * x);
                        }
                        if need_b {
                            let dst = &mut gb[j * width..(j + 1) * width];
                            dst.iter_mut().zip(&gv[..width]).for_each(|(g, x)| *g += d * x);
                        }
                    }
                }
                (ga, gb)
            })
            .collect();
        for (block, (ga, gb)) in partial.into_iter().enumerate() {
            if need_a {
                let start = block * BLOCK * width;
                grads[0][start..start + ga.len()].copy_from_slice(&ga);
            }
            if need_b {
                grads[1].iter_mut().zip(&gb).for_each(|(g, x)| *g += x);
            }
        }
    }
}

impl Tape {
    /// Kernel matrix `K[i, j] = k(a_i, b_j)` where each row is lifted to
    /// homogeneous coordinates by appending 1. Both operands are `[rows, w]`
    /// with the same `w` (3 spatial coordinates plus any features).
    pub fn kernel_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 {
            return Err(NkfError::InvalidInput("kernel_matrix expects matrices".into()));
        }
        let width = x.cols();
        if y.cols() != width {
            return Err(NkfError::DimensionMismatch { expected: width, actual: y.cols() });
        }
        if width == 0 {
            return Err(NkfError::InvalidInput("kernel_matrix rows are empty".into()));
        }
        let w = width + 1;
        let (ua, na) = lift_rows(x.data(), width);
        let (ub, nb) = lift_rows(y.data(), width);
        let (n, m) = (na.len(), nb.len());
        let mut out = vec![0.0; n * m];
        out.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
            let u = &ua[i * w..(i + 1) * w];
            for (j, k) in row.iter_mut().enumerate() {
                *k = k_homogeneous(u, &ub[j * w..(j + 1) * w], na[i], nb[j]);
            }
        });
        let t = Tensor::from_parts(vec![n, m], out);
        Ok(self.push(t, &[a, b], Box::new(KernelMatrixOp { width })))
    }
}
