//! Operations on dense voxel grids stored channels-last as `[M, M, M, C]`.
//!
//! Voxel `(i, j, k)` covers the cube of side `1/M` whose center is
//! `-0.5 + (i + 0.5)/M` along x (likewise y, z) inside `[-0.5, 0.5]³`.
//! Linear index is `(i·M + j)·M + k`.

use rayon::prelude::*;

use super::ops::gemm;
use super::tape::{Backward, Tape, Tensor, Var};
use crate::error::{NkfError, Result};
use crate::geometry::Vec3;

fn grid_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b, c, ch] if a == b && b == c => Ok((*a, *ch)),
        s => Err(NkfError::InvalidInput(format!("expected a cubic [M, M, M, C] grid, got {s:?}"))),
    }
}

#[inline]
fn voxel(m: usize, i: usize, j: usize, k: usize) -> usize {
    (i * m + j) * m + k
}

/// Source voxel for every output voxel at one stencil offset, clamped to
/// the grid (replication padding).
fn shifted_indices(m: usize, offset: [isize; 3]) -> Vec<usize> {
    let clamp = |v: usize, o: isize| (v as isize + o).clamp(0, m as isize - 1) as usize;
    let mut idx = Vec::with_capacity(m * m * m);
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                idx.push(voxel(m, clamp(i, offset[0]), clamp(j, offset[1]), clamp(k, offset[2])));
            }
        }
    }
    idx
}

fn offsets() -> impl Iterator<Item = [isize; 3]> {
    (0..27).map(|o| [o / 9 - 1, (o / 3) % 3 - 1, o % 3 - 1])
}

fn gather(src: &[f64], idx: &[usize], ch: usize, dst: &mut [f64]) {
    dst.par_chunks_mut(ch).zip(idx.par_iter()).for_each(|(row, &s)| {
        row.copy_from_slice(&src[s * ch..(s + 1) * ch]);
    });
}

struct Conv3Op {
    m: usize,
    cin: usize,
    cout: usize,
}

impl Backward for Conv3Op {
    fn name(&self) -> &'static str {
        "conv3"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &[f64], needs: &[bool], grads: &mut [Vec<f64>]) {
        let (m, cin, cout) = (self.m, self.cin, self.cout);
        let v = m * m * m;
        let x = inputs[0].data();
        let w = inputs[1].data();
        let mut buf = vec![0.0; v * cin];
        let mut dbuf = vec![0.0; v * cin];
        for (o, off) in offsets().enumerate() {
            let idx = shifted_indices(m, off);
            let w_o = &w[o * cin * cout..(o + 1) * cin * cout];
            if needs[1] {
                gather(x, &idx, cin, &mut buf);
                // dW_o += bufᵀ · dY
                let dw = &mut grads[1][o * cin * cout..(o + 1) * cin * cout];
                gemm(cin, v, cout, &buf, 1, cin as isize, grad, cout as isize, 1, 1.0, dw);
            }
            if needs[0] {
                // d buf = dY · W_oᵀ, scattered back to the clamped sources
                gemm(v, cout, cin, grad, cout as isize, 1, w_o, 1, cout as isize, 0.0, &mut dbuf);
                let dx = &mut grads[0];
                for (row, &s) in dbuf.chunks_exact(cin).zip(&idx) {
                    dx[s * cin..(s + 1) * cin].iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
        }
        if needs[2] {
            for row in grad.chunks_exact(cout) {
                grads[2].iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
        }
    }
}

struct AvgPoolOp {
    m: usize,
    ch: usize,
}

impl Backward for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }

    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &[f64], _n: &[bool], grads: &mut [Vec<f64>]) {
        let (m, ch) = (self.m, self.ch);
        let h = m / 2;
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let src = voxel(h, i / 2, j / 2, k / 2) * ch;
                    let dst = voxel(m, i, j, k) * ch;
                    for c in 0..ch {
                        grads[0][dst + c] = grad[src + c] * 0.125;
                    }
                }
            }
        }
    }
}

struct UpsampleOp {
    m: usize,
    ch: usize,
}

impl Backward for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &[f64], _n: &[bool], grads: &mut [Vec<f64>]) {
        // self.m is the input (coarse) resolution
        let (m, ch) = (self.m, self.ch);
        let f = 2 * m;
        for i in 0..f {
            for j in 0..f {
                for k in 0..f {
                    let src = voxel(f, i, j, k) * ch;
                    let dst = voxel(m, i / 2, j / 2, k / 2) * ch;
                    for c in 0..ch {
                        grads[0][dst + c] += grad[src + c];
                    }
                }
            }
        }
    }
}

/// Eight corner voxels and weights of a trilinear lookup.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

impl Stencil {
    /// Cell-centered trilinear stencil for a point; coordinates outside the
    /// span of voxel centers clamp to the boundary.
    pub fn new(m: usize, p: &Vec3) -> Self {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let t = ((p[a] + 0.5) * m as f64 - 0.5).clamp(0.0, (m - 1) as f64);
            let i0 = (t.floor() as usize).min(m.saturating_sub(2));
            base[a] = i0;
            frac[a] = if m > 1 { t - i0 as f64 } else { 0.0 };
        }
        let mut index = [0; 8];
        let mut weight = [0.0; 8];
        for c in 0..8 {
            let (di, dj, dk) = (c >> 2 & 1, c >> 1 & 1, c & 1);
            let step = |a: usize, d: usize| (base[a] + d).min(m - 1);
            index[c] = voxel(m, step(0, di), step(1, dj), step(2, dk));
            let wt = |a: usize, d: usize| if d == 1 { frac[a] } else { 1.0 - frac[a] };
            weight[c] = wt(0, di) * wt(1, dj) * wt(2, dk);
        }
        Self { index, weight }
    }
}

struct TrilinearOp {
    stencils: Vec<Stencil>,
    ch: usize,
}

impl Backward for TrilinearOp {
    fn name(&self) -> &'static str {
        "trilinear"
    }

    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &[f64], _n: &[bool], grads: &mut [Vec<f64>]) {
        let ch = self.ch;
        for (s, row) in self.stencils.iter().zip(grad.chunks_exact(ch)) {
            for (&v, &w) in s.index.iter().zip(&s.weight) {
                if w == 0.0 {
                    continue;
                }
                let dst = &mut grads[0][v * ch..(v + 1) * ch];
                dst.iter_mut().zip(row).for_each(|(g, d)| *g += w * d);
            }
        }
    }
}

struct SegmentMaxOp {
    /// Winning source row per output entry, `usize::MAX` for empty segments.
    argmax: Vec<usize>,
    ch: usize,
}

impl Backward for SegmentMaxOp {
    fn name(&self) -> &'static str {
        "segment_max"
    }

    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &[f64], _n: &[bool], grads: &mut [Vec<f64>]) {
        let ch = self.ch;
        for (e, (&src, d)) in self.argmax.iter().zip(grad).enumerate() {
            if src != usize::MAX {
                grads[0][src * ch + e % ch] += d;
            }
        }
    }
}

impl Tape {
    /// 3×3×3 convolution with replication padding. Weights are
    /// `[27, Cin, Cout]` ordered by offset `(dx, dy, dz)` with dz fastest.
    pub fn conv3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, cin) = grid_dims(xv)?;
        let wv = self.value(w);
        let cout = match wv.shape() {
            [27, c_in, c_out] if *c_in == cin => *c_out,
            s => return Err(NkfError::InvalidInput(format!("conv3 weights {s:?} for {cin} input channels"))),
        };
        if self.value(b).len() != cout {
            return Err(NkfError::DimensionMismatch { expected: cout, actual: self.value(b).len() });
        }
        let v = m * m * m;
        let mut out = Vec::with_capacity(v * cout);
        for _ in 0..v {
            out.extend_from_slice(self.value(b).data());
        }
        let mut buf = vec![0.0; v * cin];
        for (o, off) in offsets().enumerate() {
            let idx = shifted_indices(m, off);
            gather(xv.data(), &idx, cin, &mut buf);
            let w_o = &wv.data()[o * cin * cout..(o + 1) * cin * cout];
            gemm(v, cin, cout, &buf, cin as isize, 1, w_o, cout as isize, 1, 1.0, &mut out);
        }
        let t = Tensor::from_parts(vec![m, m, m, cout], out);
        Ok(self.push(t, &[x, w, b], Box::new(Conv3Op { m, cin, cout })))
    }

    /// 2×2×2 average pooling; `M` must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, ch) = grid_dims(xv)?;
        if m % 2 != 0 {
            return Err(NkfError::ResolutionNotDivisible(m));
        }
        let h = m / 2;
        let mut out = vec![0.0; h * h * h * ch];
        let src = xv.data();
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let s = voxel(m, i, j, k) * ch;
                    let d = voxel(h, i / 2, j / 2, k / 2) * ch;
                    for c in 0..ch {
                        out[d + c] += 0.125 * src[s + c];
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![h, h, h, ch], out);
        Ok(self.push(t, &[x], Box::new(AvgPoolOp { m, ch })))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, ch) = grid_dims(xv)?;
        let f = 2 * m;
        let mut out = vec![0.0; f * f * f * ch];
        let src = xv.data();
        for i in 0..f {
            for j in 0..f {
                for k in 0..f {
                    let d = voxel(f, i, j, k) * ch;
                    let s = voxel(m, i / 2, j / 2, k / 2) * ch;
                    out[d..d + ch].copy_from_slice(&src[s..s + ch]);
                }
            }
        }
        let t = Tensor::from_parts(vec![f, f, f, ch], out);
        Ok(self.push(t, &[x], Box::new(UpsampleOp { m, ch })))
    }

    /// Trilinear lookup of a grid at constant points; returns `[n, C]`.
    pub fn trilinear(&mut self, grid: Var, points: &[Vec3]) -> Result<Var> {
        let gv = self.value(grid);
        let (m, ch) = grid_dims(gv)?;
        if m == 0 {
            return Err(NkfError::InvalidInput("empty grid".into()));
        }
        let stencils: Vec<Stencil> = points.iter().map(|p| Stencil::new(m, p)).collect();
        let mut out = vec![0.0; points.len() * ch];
        let g = gv.data();
        for (s, row) in stencils.iter().zip(out.chunks_exact_mut(ch.max(1))) {
            for (&v, &w) in s.index.iter().zip(&s.weight) {
                row.iter_mut().zip(&g[v * ch..(v + 1) * ch]).for_each(|(o, x)| *o += w * x);
            }
        }
        let t = Tensor::from_parts(vec![points.len(), ch], out);
        Ok(self.push(t, &[grid], Box::new(TrilinearOp { stencils, ch })))
    }

    /// Channel-wise max of rows grouped by `segments[row]`; returns
    /// `[segment_count, C]`, zero for segments without rows. Ties go to the
    /// lowest row index.
    pub fn segment_max(&mut self, x: Var, segments: &[usize], segment_count: usize) -> Result<Var> {
        let xv = self.value(x);
        let ch = xv.cols();
        if xv.rows() != segments.len() {
            return Err(NkfError::DimensionMismatch { expected: xv.rows(), actual: segments.len() });
        }
        if let Some(&s) = segments.iter().find(|&&s| s >= segment_count) {
            return Err(NkfError::InvalidInput(format!("segment {s} out of range {segment_count}")));
        }
        let mut out = vec![0.0; segment_count * ch];
        let mut argmax = vec![usize::MAX; segment_count * ch];
        for (r, (&s, row)) in segments.iter().zip(xv.data().chunks_exact(ch.max(1))).enumerate() {
            for (c, &val) in row.iter().enumerate() {
                let e = s * ch + c;
                if argmax[e] == usize::MAX || val > out[e] {
                    out[e] = val;
                    argmax[e] = r;
                }
            }
        }
        let t = Tensor::from_parts(vec![segment_count, ch], out);
        Ok(self.push(t, &[x], Box::new(SegmentMaxOp { argmax, ch })))
    }
}

/// Dense-output convolution of a grid that is zero except at `cells`.
struct SparseConv3Op {
    m: usize,
    cin: usize,
    cout: usize,
    /// Grid voxel → input row, `usize::MAX` for empty voxels.
    row_of: Vec<usize>,
}

impl SparseConv3Op {
    /// Calls `visit(offset, out_voxel, in_row)` for every stencil tap that
    /// reads an occupied voxel.
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, usize)) {
        for (o, off) in offsets().enumerate() {
            for (v, &s) in shifted_indices(self.m, off).iter().enumerate() {
                let r = self.row_of[s];
                if r != usize::MAX {
                    visit(o, v, r);
                }
            }
        }
    }
}

impl Backward for SparseConv3Op {
    fn name(&self) -> &'static str {
        "sparse_conv3"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &[f64], needs: &[bool], grads: &mut [Vec<f64>]) {
        let (cin, cout) = (self.cin, self.cout);
        let x = inputs[0].data();
        let w = inputs[1].data();
        let (gx, rest) = grads.split_at_mut(1);
        let (gw, gb) = rest.split_at_mut(1);
        self.for_each_tap(|o, v, r| {
            let dy = &grad[v * cout..(v + 1) * cout];
            let xr = &x[r * cin..(r + 1) * cin];
            let w_o = &w[o * cin * cout..(o + 1) * cin * cout];
            for c in 0..cin {
                let wrow = &w_o[c * cout..(c + 1) * cout];
                if needs[0] {
                    gx[0][r * cin + c] += wrow.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
                }
                if needs[1] {
                    let dst = &mut gw[0][(o * cin + c) * cout..(o * cin + c + 1) * cout];
                    dst.iter_mut().zip(dy).for_each(|(g, d)| *g += xr[c] * d);
                }
            }
        });
        if needs[2] {
            for row in grad.chunks_exact(cout) {
                gb[0].iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
        }
    }
}

/// Convolution evaluated only at selected output voxels.
struct Conv3AtOp {
    m: usize,
    cin: usize,
    cout: usize,
    cells: Vec<usize>,
}

impl Conv3AtOp {
    fn sources(&self, off: [isize; 3]) -> Vec<usize> {
        let m = self.m as isize;
        let clamp = |v: isize, o: isize| (v + o).clamp(0, m - 1) as usize;
        self.cells
            .iter()
            .map(|&c| {
                let (i, j, k) = ((c as isize) / (m * m), (c as isize / m) % m, c as isize % m);
                voxel(self.m, clamp(i, off[0]), clamp(j, off[1]), clamp(k, off[2]))
            })
            .collect()
    }
}

impl Backward for Conv3AtOp {
    fn name(&self) -> &'static str {
        "conv3_at"
    }

    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &[f64], needs: &[bool], grads: &mut [Vec<f64>]) {
        let (cin, cout) = (self.cin, self.cout);
        let k = self.cells.len();
        let x = inputs[0].data();
        let w = inputs[1].data();
        let mut buf = vec![0.0; k * cin];
        for (o, off) in offsets().enumerate() {
            let idx = self.sources(off);
            if needs[1] {
                gather(x, &idx, cin, &mut buf);
                let dw = &mut grads[1][o * cin * cout..(o + 1) * cin * cout];
                gemm(cin, k, cout, &buf, 1, cin as isize, grad, cout as isize, 1, 1.0, dw);
            }
            if needs[0] {
                let w_o = &w[o * cin * cout..(o + 1) * cin * cout];
                gemm(k, cout, cin, grad, cout as isize, 1, w_o, 1, cout as isize, 0.0, &mut buf);
                let dx = &mut grads[0];
                for (row, &s) in buf.chunks_exact(cin).zip(&idx) {
                    dx[s * cin..(s + 1) * cin].iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
        }
        if needs[2] {
            for row in grad.chunks_exact(cout) {
                grads[2].iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
        }
    }
}

struct ScatterRowsOp {
    cells: Vec<usize>,
    ch: usize,
}

impl Backward for ScatterRowsOp {
    fn name(&self) -> &'static str {
        "scatter_rows"
    }

    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &[f64], _n: &[bool], grads: &mut [Vec<f64>]) {
        let ch = self.ch;
        for (r, &c) in self.cells.iter().enumerate() {
            grads[0][r * ch..(r + 1) * ch].copy_from_slice(&grad[c * ch..(c + 1) * ch]);
        }
    }
}

fn check_cells(cells: &[usize], m: usize) -> Result<()> {
    let v = m * m * m;
    let mut seen = vec![false; v];
    for &c in cells {
        if c >= v || std::mem::replace(&mut seen[c], true) {
            return Err(NkfError::InvalidInput(format!("voxel {c} out of range or repeated")));
        }
    }
    Ok(())
}

impl Tape {
    /// [`conv3`](Self::conv3) of the `M³` grid holding `rows[r]` at voxel
    /// `cells[r]` and zero elsewhere, without materializing that grid.
    pub fn sparse_conv3(&mut self, rows: Var, cells: &[usize], m: usize, w: Var, b: Var) -> Result<Var> {
        check_cells(cells, m)?;
        let xv = self.value(rows);
        let cin = xv.cols();
        if xv.rows() != cells.len() {
            return Err(NkfError::DimensionMismatch { expected: cells.len(), actual: xv.rows() });
        }
        let cout = match self.value(w).shape() {
            [27, c_in, c_out] if *c_in == cin => *c_out,
            s => return Err(NkfError::InvalidInput(format!("conv3 weights {s:?} for {cin} input channels"))),
        };
        if self.value(b).len() != cout {
            return Err(NkfError::DimensionMismatch { expected: cout, actual: self.value(b).len() });
        }
        let mut row_of = vec![usize::MAX; m * m * m];
        for (r, &c) in cells.iter().enumerate() {
            row_of[c] = r;
        }
        let op = SparseConv3Op { m, cin, cout, row_of };
        let mut out = Vec::with_capacity(m * m * m * cout);
        for _ in 0..m * m * m {
            out.extend_from_slice(self.value(b).data());
        }
        let x = xv.data();
        let wd = self.value(w).data();
        op.for_each_tap(|o, v, r| {
            let dst = &mut out[v * cout..(v + 1) * cout];
            for c in 0..cin {
                let xc = x[r * cin + c];
                if xc == 0.0 {
                    continue;
                }
                let wrow = &wd[(o * cin + c) * cout..(o * cin + c + 1) * cout];
                dst.iter_mut().zip(wrow).for_each(|(d, w)| *d += xc * w);
            }
        });
        let t = Tensor::from_parts(vec![m, m, m, cout], out);
        Ok(self.push(t, &[rows, w, b], Box::new(op)))
    }

    /// [`conv3`](Self::conv3) restricted to the listed output voxels;
    /// returns `[cells.len(), Cout]`.
    pub fn conv3_at(&mut self, x: Var, w: Var, b: Var, cells: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, cin) = grid_dims(xv)?;
        check_cells(cells, m)?;
        let cout = match self.value(w).shape() {
            [27, c_in, c_out] if *c_in == cin => *c_out,
            s => return Err(NkfError::InvalidInput(format!("conv3 weights {s:?} for {cin} input channels"))),
        };
        if self.value(b).len() != cout {
            return Err(NkfError::DimensionMismatch { expected: cout, actual: self.value(b).len() });
        }
        let op = Conv3AtOp { m, cin, cout, cells: cells.to_vec() };
        let k = cells.len();
        let mut out = Vec::with_capacity(k * cout);
        for _ in 0..k {
            out.extend_from_slice(self.value(b).data());
        }
        let mut buf = vec![0.0; k * cin];
        let wd = self.value(w).data();
        for (o, off) in offsets().enumerate() {
            gather(xv.data(), &op.sources(off), cin, &mut buf);
            let w_o = &wd[o * cin * cout..(o + 1) * cin * cout];
            gemm(k, cin, cout, &buf, cin as isize, 1, w_o, cout as isize, 1, 1.0, &mut out);
        }
        let t = Tensor::from_parts(vec![k, cout], out);
        Ok(self.push(t, &[x, w, b], Box::new(op)))
    }

    /// Places `rows[r]` at voxel `cells[r]` of an otherwise zero `M³` grid.
    pub fn scatter_rows(&mut self, rows: Var, cells: &[usize], m: usize) -> Result<Var> {
        check_cells(cells, m)?;
        let xv = self.value(rows);
        let ch = xv.cols();
        if xv.rows() != cells.len() {
            return Err(NkfError::DimensionMismatch { expected: cells.len(), actual: xv.rows() });
        }
        let mut out = vec![0.0; m * m * m * ch];
        for (r, &c) in cells.iter().enumerate() {
            out[c * ch..(c + 1) * ch].copy_from_slice(&xv.data()[r * ch..(r + 1) * ch]);
        }
        let t = Tensor::from_parts(vec![m, m, m, ch], out);
        Ok(self.push(t, &[rows], Box::new(ScatterRowsOp { cells: cells.to_vec(), ch })))
    }
}
