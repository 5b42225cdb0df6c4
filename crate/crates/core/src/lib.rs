//! Watertight surface reconstruction from oriented point clouds by kernel
//! ridge regression with the Neural Spline kernel, optionally conditioned
//! on a learned voxel feature field.

pub mod autodiff;
pub mod error;
pub mod feature_field;
pub mod geometry;
pub mod io;
pub mod kernel;
pub mod krr;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod surfacing;
pub mod training;

pub use error::{NkfError, Result};
pub use geometry::{
    augment, augment_with, default_epsilon, normalize_to_unit_cube, AugmentMode, AugmentedPointSet,
    NormalizationTransform, OrientedPointCloud, SupervisionSample, Vec3,
};
pub use kernel::{gram, k_learned, k_ns, stable_angle, FeatureAugmentedPoint, GramMatrix, KernelBasis};
pub use krr::{kernel_norm, ns_residual_loss, FeatureSource, ImplicitField, KernelSystem, NoFeatures};
pub use mesh::{occupancy_labels, MeshOccupancy, TriangleMesh};
pub use pipeline::{fit_field, reconstruct, FittedField, KernelMode, ReconstructOptions, Reconstruction};
