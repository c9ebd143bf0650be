//! Gaussian primitives, cameras and time-stamped datasets.

mod camera;
mod dataset;
mod gaussian;
pub mod io;
mod synth;

pub use camera::{pixel_ray, project_gaussian, Camera, Projection, Resolution, Splat2D, COV2D_BLUR};
pub use dataset::{Dataset, Split, View};
pub use gaussian::{covariance_from_rs, gaussian_density_at, Gaussian3D};
pub use synth::{matching_kind, synth_scene, GroundTruth, InitCloud, Regime, RegionSpec, SceneSpec, SynthScene};
