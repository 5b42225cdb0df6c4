//! Forward pass of the feature network recorded on a tape.

use super::params::{layout, FeatureNetworkParams};
use crate::autodiff::{Stencil, Tape, Tensor, Var};
use crate::error::{NkfError, Result};
use crate::geometry::Vec3;

/// Cloud points bucketed into grid cells, with the per-point encoder input.
#[derive(Debug, Clone)]
pub struct CellAssignment {
    resolution: usize,
    /// Occupied voxels in increasing order.
    cells: Vec<usize>,
    /// Index into `cells` for every point.
    slot: Vec<usize>,
    /// `[n, 6]` rows of (offset within cell scaled to [-1/2, 1/2], normal).
    inputs: Vec<f64>,
}

impl CellAssignment {
    /// Points are expected inside `[-0.5, 0.5]³`; anything outside is
    /// attributed to the nearest boundary cell.
    pub fn new(points: &[Vec3], normals: &[Vec3], resolution: usize, use_normals: bool) -> Result<Self> {
        if points.len() != normals.len() {
            return Err(NkfError::DimensionMismatch { expected: points.len(), actual: normals.len() });
        }
        let m = resolution;
        let mut voxels = Vec::with_capacity(points.len());
        let mut inputs = Vec::with_capacity(points.len() * 6);
        for (p, n) in points.iter().zip(normals) {
            let mut ijk = [0usize; 3];
            for a in 0..3 {
                let t = (p[a] + 0.5) * m as f64;
                let i = (t.floor().max(0.0) as usize).min(m - 1);
                ijk[a] = i;
                inputs.push(t - (i as f64 + 0.5));
            }
            for a in 0..3 {
                inputs.push(if use_normals { n[a] } else { 0.0 });
            }
            voxels.push((ijk[0] * m + ijk[1]) * m + ijk[2]);
        }
        let mut cells = voxels.clone();
        cells.sort_unstable();
        cells.dedup();
        let slot = voxels.iter().map(|v| cells.binary_search(v).unwrap()).collect();
        Ok(Self { resolution, cells, slot, inputs })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn occupied_cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.slot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slot.is_empty()
    }
}

/// Input to the backbone: encoded occupied cells or an arbitrary dense grid.
#[derive(Debug, Clone, Copy)]
pub enum GridInput<'a> {
    Sparse { rows: Var, cells: &'a [usize] },
    Dense(Var),
}

/// Network parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct NetworkVars {
    resolution: usize,
    vars: Vec<(String, Var)>,
}

impl FeatureNetworkParams {
    /// Records every parameter as a leaf; `trainable` controls whether they
    /// receive gradients.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> NetworkVars {
        let vars = self
            .segments()
            .iter()
            .map(|s| {
                let t = Tensor::from_parts(s.shape.clone(), s.data.clone());
                let v = if trainable { tape.param(t) } else { tape.constant(t) };
                (s.name.clone(), v)
            })
            .collect();
        debug_assert_eq!(layout(self.config()).len(), self.segments().len());
        NetworkVars { resolution: self.config().resolution, vars }
    }
}

impl NetworkVars {
    /// Parameter leaves in segment order.
    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn dense(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        tape.linear(x, self.get(&format!("{name}.weight")), self.get(&format!("{name}.bias")))
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let (w, b) = self.conv_params(name);
        tape.conv3(x, w, b)
    }

    fn conv_params(&self, name: &str) -> (Var, Var) {
        (self.get(&format!("backbone.{name}.weight")), self.get(&format!("backbone.{name}.bias")))
    }

    /// Per-point encoder followed by a max over each occupied cell;
    /// returns `[occupied cells, d]`.
    pub fn encode(&self, tape: &mut Tape, assignment: &CellAssignment) -> Result<Var> {
        if assignment.is_empty() {
            return Err(NkfError::InvalidInput("cannot encode an empty cloud".into()));
        }
        let x = tape.constant(Tensor::from_parts(vec![assignment.len(), 6], assignment.inputs.clone()));
        let h = self.dense(tape, x, "encoder.0")?;
        let h = tape.relu(h);
        let h = self.dense(tape, h, "encoder.1")?;
        let h = tape.relu(h);
        let f = self.dense(tape, h, "encoder.2")?;
        tape.segment_max(f, &assignment.slot, assignment.cells.len())
    }

    /// Encoder–decoder over the grid up to (not including) the output layer;
    /// returns `[M, M, M, c1]`.
    pub fn trunk(&self, tape: &mut Tape, input: GridInput<'_>) -> Result<Var> {
        let m = self.resolution;
        if m % 4 != 0 || m == 0 {
            return Err(NkfError::ResolutionNotDivisible(m));
        }
        let e1 = match input {
            GridInput::Sparse { rows, cells } => {
                let (w, b) = self.conv_params("down1");
                tape.sparse_conv3(rows, cells, m, w, b)?
            }
            GridInput::Dense(grid) => self.conv(tape, grid, "down1")?,
        };
        let e1 = tape.relu(e1);
        let p1 = tape.avg_pool2(e1)?;
        let e2 = self.conv(tape, p1, "down2")?;
        let e2 = tape.relu(e2);
        let p2 = tape.avg_pool2(e2)?;
        let b = self.conv(tape, p2, "bottom")?;
        let b = tape.relu(b);
        let u2 = self.conv(tape, b, "up2")?;
        let u2 = tape.relu(u2);
        let u2 = tape.upsample2(u2)?;
        let s2 = tape.add(u2, e2)?;
        let u1 = self.conv(tape, s2, "up1")?;
        let u1 = tape.relu(u1);
        let u1 = tape.upsample2(u1)?;
        tape.add(u1, e1)
    }

    /// Output layer over the whole grid; returns `[M, M, M, d]`.
    pub fn output_grid(&self, tape: &mut Tape, trunk: Var) -> Result<Var> {
        self.conv(tape, trunk, "out")
    }

    /// Interpolated output features at points, computing the output layer
    /// only at the voxels the lookups touch; returns `[n, d]`.
    pub fn features_at(&self, tape: &mut Tape, trunk: Var, points: &[Vec3]) -> Result<Var> {
        let m = self.resolution;
        let mut cells: Vec<usize> = points.iter().flat_map(|p| Stencil::new(m, p).index).collect();
        cells.sort_unstable();
        cells.dedup();
        let (w, b) = self.conv_params("out");
        let rows = tape.conv3_at(trunk, w, b, &cells)?;
        let grid = tape.scatter_rows(rows, &cells, m)?;
        tape.trilinear(grid, points)
    }

    /// Weight head applied row-wise to `[n, d]` features; returns `[n]` in (0, 1).
    pub fn point_weights(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let n = tape.value(features).rows();
        let h = self.dense(tape, features, "head.0")?;
        let h = tape.relu(h);
        let z = self.dense(tape, h, "head.1")?;
        let w = tape.sigmoid(z);
        tape.reshape(w, &[n])
    }
}
