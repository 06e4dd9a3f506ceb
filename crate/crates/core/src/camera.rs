//! Pinhole camera model and RGBD frames.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec::Vec;

use crate::geometry::{RigidTransform, Vec3};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("frame pose rotation is not orthonormal")]
    PoseInvalid,
    #[error("frame is {got_w}x{got_h}, intrinsics expect {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("invalid camera intrinsics")]
    InvalidIntrinsics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Valid depth range, meters.
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Default for CameraIntrinsics {
    /// 320×240 with a Kinect-like field of view.
    fn default() -> Self {
        Self {
            fx: 277.0,
            fy: 277.0,
            cx: 159.5,
            cy: 119.5,
            width: 320,
            height: 240,
            depth_min: 0.3,
            depth_max: 8.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), FrameError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
            && self.depth_min > 0.0
            && self.depth_min < self.depth_max;
        if ok {
            Ok(())
        } else {
            Err(FrameError::InvalidIntrinsics)
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Continuous image coordinates of a camera-frame point (`z > 0` assumed).
    pub fn project(&self, p_cam: &Vec3) -> (f64, f64) {
        (
            self.cx + self.fx * p_cam.x / p_cam.z,
            self.cy + self.fy * p_cam.y / p_cam.z,
        )
    }

    /// Nearest integer pixel of a camera-frame point, if it lands in the image.
    pub fn project_to_pixel(&self, p_cam: &Vec3) -> Option<(usize, usize)> {
        if p_cam.z <= 0.0 {
            return None;
        }
        let (u, v) = self.project(p_cam);
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }

    /// Camera-frame point at pixel `(u, v)` with z-depth `depth` meters.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }

    /// Unnormalized camera-frame ray through pixel `(u, v)` with unit z component.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn depth_in_range(&self, depth_m: f64) -> bool {
        depth_m >= self.depth_min && depth_m <= self.depth_max
    }
}

/// One RGBD capture with its camera→world pose.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    pub seq: u32,
    /// Milliseconds since session start.
    pub timestamp_ms: u64,
    pub width: usize,
    pub height: usize,
    /// Row-major depth in millimeters, 0 = invalid.
    pub depth: Vec<u16>,
    /// Row-major 8-bit RGB.
    pub color: Vec<[u8; 3]>,
    pub pose: RigidTransform,
}

impl RgbdFrame {
    pub fn blank(width: usize, height: usize, pose: RigidTransform) -> Self {
        Self {
            seq: 0,
            timestamp_ms: 0,
            width,
            height,
            depth: alloc::vec![0; width * height],
            color: alloc::vec![[0, 0, 0]; width * height],
            pose,
        }
    }

    /// Checks buffer sizes against the intrinsics and the pose rotation.
    pub fn validate(&self, intrinsics: &CameraIntrinsics) -> Result<(), FrameError> {
        let n = intrinsics.pixel_count();
        if self.width != intrinsics.width
            || self.height != intrinsics.height
            || self.depth.len() != n
            || self.color.len() != n
        {
            return Err(FrameError::DimensionMismatch {
                got_w: self.width,
                got_h: self.height,
                want_w: intrinsics.width,
                want_h: intrinsics.height,
            });
        }
        if !self.pose.is_orthonormal() {
            return Err(FrameError::PoseInvalid);
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    /// Depth in meters at a pixel, `None` when invalid or outside the valid range.
    pub fn depth_m(&self, u: usize, v: usize, intrinsics: &CameraIntrinsics) -> Option<f64> {
        let d = self.depth[self.index(u, v)];
        if d == 0 {
            return None;
        }
        let m = d as f64 * 1e-3;
        intrinsics.depth_in_range(m).then_some(m)
    }

    /// World-frame point seen at a pixel.
    pub fn world_point(&self, u: usize, v: usize, intrinsics: &CameraIntrinsics) -> Option<Vec3> {
        let d = self.depth_m(u, v, intrinsics)?;
        Some(self.pose.apply(&intrinsics.back_project(u as f64, v as f64, d)))
    }

    pub fn camera_position(&self) -> Vec3 {
        self.pose.translation
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            depth_min: 0.1,
            depth_max: 10.0,
        }
    }

    #[test]
    fn projection_and_back_projection_agree() {
        let k = intr();
        let p = Vec3::new(0.1, -0.05, 1.0);
        let (u, v) = k.project(&p);
        assert_eq!((u, v), (370.0, 215.0));
        let q = k.back_project(u, v, 1.0);
        assert!((q - p).norm() < 1e-12);
    }

    #[test]
    fn validate_catches_mismatch_and_bad_pose() {
        let k = intr();
        let f = RgbdFrame::blank(10, 10, RigidTransform::identity());
        assert!(matches!(f.validate(&k), Err(FrameError::DimensionMismatch { .. })));
        let mut g = RgbdFrame::blank(640, 480, RigidTransform::identity());
        assert!(g.validate(&k).is_ok());
        g.pose.rotation[(0, 1)] = 0.01;
        assert_eq!(g.validate(&k), Err(FrameError::PoseInvalid));
    }

    #[test]
    fn intrinsics_invariants() {
        assert!(CameraIntrinsics::default().validate().is_ok());
        let mut k = intr();
        k.cx = 640.0;
        assert!(k.validate().is_err());
        let mut k = intr();
        k.depth_min = 11.0;
        assert!(k.validate().is_err());
    }
}
