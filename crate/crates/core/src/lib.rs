//! Core algorithms for haptic-guided mixed-initiative robot control.
//!
//! Everything here is `no_std` + `alloc`: volumetric fusion, proxy-based haptic
//! rendering, interactive segmentation, planning, latency-compensating
//! control and a small analytic robot simulator. IO, transport and the CLI
//! live in the `telehaptic` crate.
#![no_std]

extern crate alloc;

pub mod camera;
pub mod control;
pub mod geometry;
pub mod haptic;
pub mod interact;
pub mod plan;
pub mod segment;
pub mod sim;
pub mod tsdf;

pub use camera::{CameraIntrinsics, FrameError, RgbdFrame};
pub use geometry::{Aabb, RigidTransform, Vec2, Vec3};
pub use tsdf::{GroundPlane, SurfaceSample, TsdfError, TsdfParams, TsdfVolume};
