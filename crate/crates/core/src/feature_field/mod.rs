//! Learned conditioning of the kernel: per-cell point encoding on a voxel
//! grid, a small 3D encoder–decoder, trilinear feature lookup, and the
//! per-point weight head used for denoising.

mod network;
mod params;

pub use network::{CellAssignment, GridInput, NetworkVars};
pub use params::{FeatureNetworkParams, Segment, CHECKPOINT_MAGIC, OPTIMIZER_PREFIX, OUTPUT_INIT_SCALE};

use crate::autodiff::{Stencil, Tape, Tensor};
use crate::error::{NkfError, Result};
use crate::geometry::{OrientedPointCloud, Vec3};
use crate::krr::FeatureSource;

/// Sizes of the feature network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureNetConfig {
    /// Grid resolution `M` per axis; must be a multiple of 4.
    pub resolution: usize,
    /// Feature channels `d`.
    pub channels: usize,
    pub encoder_hidden: usize,
    /// Backbone channels at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub head_hidden: usize,
    /// Feed point normals to the encoder (zeros otherwise).
    pub use_normals: bool,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self::new(32, 32)
    }
}

impl FeatureNetConfig {
    /// Default widths for a given `M` and `d`: encoder hidden 64, backbone
    /// `d → 2d → 4d`, weight head hidden `d`.
    pub fn new(resolution: usize, channels: usize) -> Self {
        Self {
            resolution,
            channels,
            encoder_hidden: 64,
            widths: [channels, 2 * channels, 4 * channels],
            head_hidden: channels,
            use_normals: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 4 != 0 {
            return Err(NkfError::ResolutionNotDivisible(self.resolution));
        }
        let sizes = [self.channels, self.encoder_hidden, self.head_hidden, self.widths[0], self.widths[1], self.widths[2]];
        if sizes.contains(&0) {
            return Err(NkfError::Config(format!("feature network sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Dense `M × M × M × d` feature grid over `[-0.5, 0.5]³`, cell centered.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatureGrid {
    resolution: usize,
    channels: usize,
    data: Vec<f64>,
}

impl VoxelFeatureGrid {
    pub fn new(resolution: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let n = resolution * resolution * resolution * channels;
        if data.len() != n {
            return Err(NkfError::DimensionMismatch { expected: n, actual: data.len() });
        }
        if resolution == 0 {
            return Err(NkfError::InvalidInput("grid resolution must be positive".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NkfError::NonFinite("feature grid".into()));
        }
        Ok(Self { resolution, channels, data })
    }

    pub fn zeros(resolution: usize, channels: usize) -> Self {
        Self { resolution, channels, data: vec![0.0; resolution.pow(3) * channels] }
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        Self::new(s[0], s[3], t.data().to_vec())
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Feature stored at voxel `(i, j, k)`.
    pub fn cell(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let v = (i * self.resolution + j) * self.resolution + k;
        &self.data[v * self.channels..(v + 1) * self.channels]
    }

    /// Center of voxel `(i, j, k)`.
    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let c = |i: usize| -0.5 + (i as f64 + 0.5) / self.resolution as f64;
        Vec3::new(c(i), c(j), c(k))
    }

    /// Trilinear blend of the surrounding voxel centers; points outside the
    /// span of centers clamp to the boundary.
    pub fn interpolate(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.interpolate_into(x, &mut out);
        out
    }

    pub fn interpolate_into(&self, x: &Vec3, out: &mut [f64]) {
        let ch = self.channels;
        out.iter_mut().for_each(|v| *v = 0.0);
        let s = Stencil::new(self.resolution, x);
        for (&v, &w) in s.index.iter().zip(&s.weight) {
            out.iter_mut().zip(&self.data[v * ch..(v + 1) * ch]).for_each(|(o, f)| *o += w * f);
        }
    }

    /// Spatial derivative of [`interpolate`](Self::interpolate): one
    /// `[∂/∂x, ∂/∂y, ∂/∂z]` row per channel. Zero along clamped axes.
    pub fn jacobian(&self, x: &Vec3) -> Vec<[f64; 3]> {
        let m = self.resolution;
        let ch = self.channels;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut slope = [0.0; 3];
        for a in 0..3 {
            let raw = (x[a] + 0.5) * m as f64 - 0.5;
            let t = raw.clamp(0.0, (m - 1) as f64);
            base[a] = (t.floor() as usize).min(m.saturating_sub(2));
            frac[a] = if m > 1 { t - base[a] as f64 } else { 0.0 };
            slope[a] = if m > 1 && raw == t { m as f64 } else { 0.0 };
        }
        let mut out = vec![[0.0; 3]; ch];
        for c in 0..8 {
            let d = [c >> 2 & 1, c >> 1 & 1, c & 1];
            let idx = |a: usize| (base[a] + d[a]).min(m - 1);
            let v = (idx(0) * m + idx(1)) * m + idx(2);
            let w = |a: usize| if d[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            let dw = |a: usize| if d[a] == 1 { slope[a] } else { -slope[a] };
            let g = [dw(0) * w(1) * w(2), w(0) * dw(1) * w(2), w(0) * w(1) * dw(2)];
            for (o, f) in out.iter_mut().zip(&self.data[v * ch..(v + 1) * ch]) {
                for a in 0..3 {
                    o[a] += g[a] * f;
                }
            }
        }
        out
    }
}

/// Per-cell encoding of a normalized cloud; empty cells hold zero.
pub fn encode(cloud: &OrientedPointCloud, params: &FeatureNetworkParams) -> Result<VoxelFeatureGrid> {
    let c = params.config();
    let assignment = CellAssignment::new(cloud.points(), cloud.normals(), c.resolution, c.use_normals)?;
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape, false);
    let rows = vars.encode(&mut tape, &assignment)?;
    let grid = tape.scatter_rows(rows, assignment.occupied_cells(), c.resolution)?;
    VoxelFeatureGrid::from_tensor(tape.value(grid))
}

/// Runs the backbone on an arbitrary feature grid.
pub fn backbone(grid: &VoxelFeatureGrid, params: &FeatureNetworkParams) -> Result<VoxelFeatureGrid> {
    let c = params.config();
    if grid.resolution != c.resolution || grid.channels != c.channels {
        return Err(NkfError::DimensionMismatch { expected: c.resolution, actual: grid.resolution });
    }
    let m = grid.resolution;
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape, false);
    let x = tape.constant(Tensor::from_parts(vec![m, m, m, grid.channels], grid.data.clone()));
    let trunk = vars.trunk(&mut tape, GridInput::Dense(x))?;
    let out = vars.output_grid(&mut tape, trunk)?;
    VoxelFeatureGrid::from_tensor(tape.value(out))
}

/// Weight head on a list of features.
pub fn point_weights(features: &[Vec<f64>], params: &FeatureNetworkParams) -> Result<Vec<f64>> {
    let d = params.config().channels;
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(NkfError::DimensionMismatch { expected: d, actual: f.len() });
    }
    if features.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape, false);
    let x = tape.constant(Tensor::from_parts(vec![features.len(), d], features.concat()));
    let w = vars.point_weights(&mut tape, x)?;
    Ok(tape.value(w).data().to_vec())
}

/// The learned feature map `φ(x)` for one input cloud.
#[derive(Debug, Clone)]
pub struct FeatureFunction {
    grid: VoxelFeatureGrid,
}

impl FeatureFunction {
    pub fn new(grid: VoxelFeatureGrid) -> Self {
        Self { grid }
    }

    /// Encodes a normalized cloud and runs the backbone over the full grid.
    pub fn build(cloud: &OrientedPointCloud, params: &FeatureNetworkParams) -> Result<Self> {
        let c = params.config();
        let assignment = CellAssignment::new(cloud.points(), cloud.normals(), c.resolution, c.use_normals)?;
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape, false);
        let rows = vars.encode(&mut tape, &assignment)?;
        let trunk = vars.trunk(&mut tape, GridInput::Sparse { rows, cells: assignment.occupied_cells() })?;
        let out = vars.output_grid(&mut tape, trunk)?;
        Ok(Self { grid: VoxelFeatureGrid::from_tensor(tape.value(out))? })
    }

    pub fn grid(&self) -> &VoxelFeatureGrid {
        &self.grid
    }
}

impl FeatureSource for FeatureFunction {
    fn dim(&self) -> usize {
        self.grid.channels
    }

    fn feature_into(&self, x: &Vec3, out: &mut [f64]) {
        self.grid.interpolate_into(x, out);
    }
}

#[cfg(test)]
mod tests;
