//! Truncated signed distance volume: fusion of RGBD frames, per-pixel ray
//! casting, trilinear sampling and ground-plane detection.
//!
//! Voxel `(i, j, k)` covers the cube `origin + [i, i+1)·voxel_size` (and
//! likewise for `j`, `k`); its sample point is the cube center. Storage is
//! struct-of-arrays, x fastest.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec::Vec;
use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{CameraIntrinsics, FrameError, RgbdFrame};
use crate::geometry::{Aabb, RigidTransform, Vec3};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Resolutions the volume may be built with (voxels per axis).
pub const ALLOWED_RESOLUTIONS: [usize; 5] = [64, 128, 256, 384, 512];
pub const DEFAULT_VOXEL_SIZE: f64 = 0.010;
pub const DEFAULT_TRUNCATION: f64 = 0.050;
pub const DEFAULT_MAX_WEIGHT: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum TsdfError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("resolution {0} is not one of 64/128/256/384/512")]
    InvalidResolution(usize),
    #[error("voxel size and truncation must be positive and finite")]
    InvalidParams,
    #[error("point is outside the sampling interior of the volume")]
    OutOfVolume,
    #[error("no dominant plane among the candidate points")]
    NoDominantPlane,
    #[error("ground plane detection needs at least 3 frames, got {0}")]
    NotEnoughFrames(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TsdfParams {
    pub resolution: usize,
    pub voxel_size: f64,
    pub truncation: f64,
    pub max_weight: u8,
}

impl Default for TsdfParams {
    fn default() -> Self {
        Self {
            resolution: 256,
            voxel_size: DEFAULT_VOXEL_SIZE,
            truncation: DEFAULT_TRUNCATION,
            max_weight: DEFAULT_MAX_WEIGHT,
        }
    }
}

impl TsdfParams {
    pub fn with_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }

    pub fn extent(&self) -> f64 {
        self.resolution as f64 * self.voxel_size
    }
}

/// Value of every field of one voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Voxel {
    pub tsdf: f32,
    pub weight: u8,
    pub color: [u8; 3],
    pub label: u16,
    pub label_weight: u16,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SurfaceSample {
    pub position: Vec3,
    pub normal: Vec3,
    pub pixel: (u32, u32),
    pub valid: bool,
}

impl SurfaceSample {
    pub fn invalid(u: usize, v: usize) -> Self {
        Self {
            position: Vec3::zeros(),
            normal: Vec3::zeros(),
            pixel: (u as u32, v as u32),
            valid: false,
        }
    }

    /// Row-major pixel index for an image of the given width.
    pub fn pixel_index(&self, width: usize) -> usize {
        self.pixel.1 as usize * width + self.pixel.0 as usize
    }
}

/// Plane `{x : normal·x = offset}`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GroundPlane {
    pub normal: Vec3,
    pub offset: f64,
    pub fitted_from: usize,
}

impl GroundPlane {
    pub fn horizontal(height: f64) -> Self {
        Self {
            normal: Vec3::z(),
            offset: height,
            fitted_from: 0,
        }
    }

    /// Signed height of a point above the plane.
    pub fn height_of(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    pub fn project(&self, p: &Vec3) -> Vec3 {
        p - self.normal * self.height_of(p)
    }

    /// Moves `p` along world z until it lies on the plane.
    pub fn project_vertically(&self, p: &Vec3) -> Vec3 {
        if self.normal.z.abs() < 1e-9 {
            return self.project(p);
        }
        let z = (self.offset - self.normal.x * p.x - self.normal.y * p.y) / self.normal.z;
        Vec3::new(p.x, p.y, z)
    }
}

/// A point on the extracted surface with its fused attributes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub position: Vec3,
    pub color: [u8; 3],
    pub label: u16,
}

/// Counters returned by [`TsdfVolume::integrate_frame`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IntegrateStats {
    pub updated: usize,
}

#[derive(Clone, Debug)]
pub struct TsdfVolume {
    params: TsdfParams,
    origin: Vec3,
    tsdf: Vec<f32>,
    weight: Vec<u8>,
    color: Vec<[u8; 3]>,
    label: Vec<u16>,
    label_weight: Vec<u16>,
    generation: u64,
}

/// Result of trilinear interpolation.
#[derive(Clone, Copy, Debug)]
struct Interp {
    value: f64,
    observed: bool,
}

impl TsdfVolume {
    pub fn new(params: TsdfParams, origin: Vec3) -> Result<Self, TsdfError> {
        if !ALLOWED_RESOLUTIONS.contains(&params.resolution) {
            return Err(TsdfError::InvalidResolution(params.resolution));
        }
        if !(params.voxel_size > 0.0 && params.voxel_size.is_finite())
            || !(params.truncation > 0.0 && params.truncation.is_finite())
            || params.max_weight == 0
        {
            return Err(TsdfError::InvalidParams);
        }
        let n = params.resolution.pow(3);
        Ok(Self {
            params,
            origin,
            tsdf: alloc::vec![1.0; n],
            weight: alloc::vec![0; n],
            color: alloc::vec![[0, 0, 0]; n],
            label: alloc::vec![0; n],
            label_weight: alloc::vec![0; n],
            generation: 0,
        })
    }

    /// Places the cube so its center lies half an extent ahead of the camera
    /// along the optical axis. A camera looking along a world axis ends up at
    /// the center of the near face.
    pub fn placed_for_camera(params: TsdfParams, camera: &RigidTransform) -> Result<Self, TsdfError> {
        Self::new(params, Self::origin_for_camera(&params, camera))
    }

    pub fn origin_for_camera(params: &TsdfParams, camera: &RigidTransform) -> Vec3 {
        let forward = camera.apply_vector(&Vec3::z()).normalize();
        let half = params.extent() * 0.5;
        camera.translation + forward * half - Vec3::repeat(half)
    }

    pub fn params(&self) -> &TsdfParams {
        &self.params
    }

    pub fn resolution(&self) -> usize {
        self.params.resolution
    }

    pub fn voxel_size(&self) -> f64 {
        self.params.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.params.truncation
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    /// Bumped by every mutation; readers use it to tell snapshots apart.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::new(self.origin, self.origin + Vec3::repeat(self.params.extent()))
    }

    pub fn voxel_count(&self) -> usize {
        self.tsdf.len()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let r = self.params.resolution;
        i + r * (j + r * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let r = self.params.resolution;
        (idx % r, (idx / r) % r, idx / (r * r))
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let vs = self.params.voxel_size;
        self.origin + Vec3::new((i as f64 + 0.5) * vs, (j as f64 + 0.5) * vs, (k as f64 + 0.5) * vs)
    }

    /// Voxel containing a world point.
    pub fn voxel_of(&self, p: &Vec3) -> Option<(usize, usize, usize)> {
        let g = (p - self.origin) / self.params.voxel_size;
        let r = self.params.resolution as f64;
        if (0..3).any(|a| !(g[a] >= 0.0 && g[a] < r)) {
            return None;
        }
        Some((g.x as usize, g.y as usize, g.z as usize))
    }

    pub fn voxel(&self, idx: usize) -> Voxel {
        Voxel {
            tsdf: self.tsdf[idx],
            weight: self.weight[idx],
            color: self.color[idx],
            label: self.label[idx],
            label_weight: self.label_weight[idx],
        }
    }

    pub fn set_voxel(&mut self, idx: usize, v: Voxel) {
        self.tsdf[idx] = v.tsdf.clamp(-1.0, 1.0);
        self.weight[idx] = v.weight.min(self.params.max_weight);
        self.color[idx] = v.color;
        self.label[idx] = v.label;
        self.label_weight[idx] = v.label_weight;
        self.generation += 1;
    }

    pub fn tsdf_values(&self) -> &[f32] {
        &self.tsdf
    }

    pub fn weights(&self) -> &[u8] {
        &self.weight
    }

    pub fn labels(&self) -> &[u16] {
        &self.label
    }

    pub fn label_weights(&self) -> &[u16] {
        &self.label_weight
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.color
    }

    /// Rebuilds a volume from raw per-voxel arrays (used by the binary loader).
    pub fn from_parts(
        params: TsdfParams,
        origin: Vec3,
        voxels: impl Iterator<Item = Voxel>,
    ) -> Result<Self, TsdfError> {
        let mut vol = Self::new(params, origin)?;
        let mut n = 0usize;
        for (idx, v) in voxels.enumerate().take(vol.voxel_count()) {
            vol.tsdf[idx] = v.tsdf.clamp(-1.0, 1.0);
            vol.weight[idx] = v.weight.min(params.max_weight);
            vol.color[idx] = v.color;
            vol.label[idx] = v.label;
            vol.label_weight[idx] = v.label_weight;
            n += 1;
        }
        if n != vol.voxel_count() {
            return Err(TsdfError::InvalidParams);
        }
        Ok(vol)
    }

    /// Visits every voxel whose center projects onto a pixel with valid depth.
    /// The callback receives the voxel index, the pixel index and the
    /// projective signed distance `depth − z_cam` in meters.
    fn for_each_projected(
        &self,
        pose: &RigidTransform,
        intrinsics: &CameraIntrinsics,
        depth: &[u16],
        mut f: impl FnMut(usize, usize, f64),
    ) {
        let res = self.params.resolution;
        let vs = self.params.voxel_size;
        let rt = pose.rotation.transpose();
        let first = self.voxel_center(0, 0, 0);
        let base = rt * (first - pose.translation);
        let ax = rt * Vec3::new(vs, 0.0, 0.0);
        let ay = rt * Vec3::new(0.0, vs, 0.0);
        let az = rt * Vec3::new(0.0, 0.0, vs);
        let (w, h) = (intrinsics.width as f64, intrinsics.height as f64);
        let (fx, fy, cx, cy) = (intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy);
        let (dmin, dmax) = (intrinsics.depth_min, intrinsics.depth_max);
        let width = intrinsics.width;
        let trunc = self.params.truncation;
        for k in 0..res {
            for j in 0..res {
                let row = base + ay * j as f64 + az * k as f64;
                let row_idx = self.index(0, j, k);
                for i in 0..res {
                    let p = row + ax * i as f64;
                    if p.z <= 0.0 {
                        continue;
                    }
                    let inv_z = 1.0 / p.z;
                    let uf = cx + fx * p.x * inv_z;
                    let vf = cy + fy * p.y * inv_z;
                    let (u, v) = (uf.round(), vf.round());
                    if u < 0.0 || v < 0.0 || u >= w || v >= h {
                        continue;
                    }
                    let pix = v as usize * width + u as usize;
                    let d_mm = depth[pix];
                    if d_mm == 0 {
                        continue;
                    }
                    let d = bilinear_depth(depth, width, intrinsics.height, uf, vf, trunc)
                        .unwrap_or(d_mm as f64 * 1e-3);
                    if d < dmin || d > dmax {
                        continue;
                    }
                    f(row_idx + i, pix, d - p.z);
                }
            }
        }
    }

    /// Fuses one frame: every voxel in front of (or at most τ behind) the
    /// observed surface gets the clamped observation `sdf/τ` merged into its
    /// weighted running average with observation weight 1.
    pub fn integrate_frame(
        &mut self,
        frame: &RgbdFrame,
        intrinsics: &CameraIntrinsics,
    ) -> Result<IntegrateStats, TsdfError> {
        frame.validate(intrinsics)?;
        let trunc = self.params.truncation;
        let w_max = self.params.max_weight;
        let mut updated = 0usize;
        // Split borrows so the closure can write while `for_each_projected` reads geometry.
        let mut tsdf = core::mem::take(&mut self.tsdf);
        let mut weight = core::mem::take(&mut self.weight);
        let mut color = core::mem::take(&mut self.color);
        self.for_each_projected(&frame.pose, intrinsics, &frame.depth, |idx, pix, sdf| {
            if sdf < -trunc {
                return;
            }
            let obs = (sdf / trunc).min(1.0) as f32;
            let w = weight[idx] as f32;
            let merged = (tsdf[idx] * w + obs) / (w + 1.0);
            tsdf[idx] = merged.clamp(-1.0, 1.0);
            let c_old = color[idx];
            let c_obs = frame.color[pix];
            let mut c = [0u8; 3];
            for ch in 0..3 {
                c[ch] = ((c_old[ch] as f32 * w + c_obs[ch] as f32) / (w + 1.0)).round() as u8;
            }
            color[idx] = c;
            weight[idx] = weight[idx].saturating_add(1).min(w_max);
            updated += 1;
        });
        self.tsdf = tsdf;
        self.weight = weight;
        self.color = color;
        self.generation += 1;
        Ok(IntegrateStats { updated })
    }

    /// Weight-voted label fusion. For every voxel within the truncation band
    /// of the observed surface, a nonzero observed label either reinforces
    /// the stored label, wears it down by one, or replaces it once its weight
    /// has dropped to one.
    pub fn fuse_labels(
        &mut self,
        labels: &[u16],
        frame: &RgbdFrame,
        intrinsics: &CameraIntrinsics,
    ) -> Result<usize, TsdfError> {
        frame.validate(intrinsics)?;
        if labels.len() != intrinsics.pixel_count() {
            return Err(TsdfError::Frame(FrameError::DimensionMismatch {
                got_w: labels.len(),
                got_h: 1,
                want_w: intrinsics.width,
                want_h: intrinsics.height,
            }));
        }
        let trunc = self.params.truncation;
        let mut label = core::mem::take(&mut self.label);
        let mut label_weight = core::mem::take(&mut self.label_weight);
        let mut touched = 0usize;
        self.for_each_projected(&frame.pose, intrinsics, &frame.depth, |idx, pix, sdf| {
            if sdf.abs() > trunc {
                return;
            }
            let obs = labels[pix];
            if obs == 0 {
                return;
            }
            let (l, w) = fuse_label(label[idx], label_weight[idx], obs);
            label[idx] = l;
            label_weight[idx] = w;
            touched += 1;
        });
        self.label = label;
        self.label_weight = label_weight;
        self.generation += 1;
        Ok(touched)
    }

    /// Continuous grid coordinates (voxel centers at integers).
    #[inline]
    fn grid_coords(&self, p: &Vec3) -> Vec3 {
        (p - self.origin) / self.params.voxel_size - Vec3::repeat(0.5)
    }

    fn trilinear(&self, p: &Vec3) -> Option<Interp> {
        let g = self.grid_coords(p);
        let max = (self.params.resolution - 1) as f64;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            if !(g[a] >= 0.0 && g[a] <= max) {
                return None;
            }
            let fl = g[a].floor().min(max - 1.0);
            base[a] = fl as usize;
            frac[a] = g[a] - fl;
        }
        let mut value = 0.0;
        let mut observed = true;
        for corner in 0..8usize {
            let di = corner & 1;
            let dj = (corner >> 1) & 1;
            let dk = (corner >> 2) & 1;
            let wgt = (if di == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if dj == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if dk == 1 { frac[2] } else { 1.0 - frac[2] });
            let idx = self.index(base[0] + di, base[1] + dj, base[2] + dk);
            if wgt > 0.0 {
                value += wgt * self.tsdf[idx] as f64;
                observed &= self.weight[idx] > 0;
            }
        }
        Some(Interp { value, observed })
    }

    fn in_sampling_interior(&self, p: &Vec3) -> bool {
        let g = self.grid_coords(p);
        let hi = (self.params.resolution - 2) as f64;
        (0..3).all(|a| g[a] >= 1.0 && g[a] <= hi)
    }

    fn central_gradient(&self, p: &Vec3) -> Option<Vec3> {
        let h = self.params.voxel_size;
        let mut grad = Vec3::zeros();
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            let fp = self.trilinear(&(p + e))?.value;
            let fm = self.trilinear(&(p - e))?.value;
            grad[a] = (fp - fm) / (2.0 * h);
        }
        Some(grad)
    }

    /// Trilinear TSDF value at `point` and its gradient (per meter) by central
    /// differences of the interpolated field with a one-voxel step.
    pub fn sample_tsdf(&self, point: &Vec3) -> Result<(f64, Vec3), TsdfError> {
        if !self.in_sampling_interior(point) {
            return Err(TsdfError::OutOfVolume);
        }
        let value = self.trilinear(point).ok_or(TsdfError::OutOfVolume)?.value;
        let grad = self.central_gradient(point).ok_or(TsdfError::OutOfVolume)?;
        Ok((value, grad))
    }

    /// Trilinear value with the same interior requirement as [`TsdfVolume::sample_tsdf`].
    pub fn sample_interior(&self, point: &Vec3) -> Result<f64, TsdfError> {
        if !self.in_sampling_interior(point) {
            return Err(TsdfError::OutOfVolume);
        }
        self.trilinear(point).map(|s| s.value).ok_or(TsdfError::OutOfVolume)
    }

    /// Trilinear value only; `None` outside the volume.
    pub fn sample_value(&self, point: &Vec3) -> Option<f64> {
        self.trilinear(point).map(|s| s.value)
    }

    /// Whether all eight voxels around `point` have been observed.
    pub fn is_observed(&self, point: &Vec3) -> bool {
        self.trilinear(point).is_some_and(|s| s.observed)
    }

    /// Per-pixel ray march from `depth_min` in steps of τ/2. A `+ → −` sign
    /// change between two observed samples is refined by linear interpolation;
    /// the normal is the normalized field gradient there.
    pub fn raycast(&self, pose: &RigidTransform, intrinsics: &CameraIntrinsics) -> Vec<SurfaceSample> {
        let mut out = Vec::with_capacity(intrinsics.pixel_count());
        for v in 0..intrinsics.height {
            for u in 0..intrinsics.width {
                out.push(self.cast_pixel(pose, intrinsics, u, v));
            }
        }
        out
    }

    /// Ray march for a single pixel.
    pub fn cast_pixel(&self, pose: &RigidTransform, intrinsics: &CameraIntrinsics, u: usize, v: usize) -> SurfaceSample {
        let step = self.params.truncation * 0.5;
        let ray_cam = intrinsics.pixel_ray(u as f64, v as f64);
        let scale = ray_cam.norm();
        let dir = pose.apply_vector(&(ray_cam / scale));
        let origin = pose.translation;
        let vs = self.params.voxel_size;
        // Clip to the hull of voxel centers, where trilinear sampling is defined.
        let hull = Aabb::new(
            self.origin + Vec3::repeat(0.5 * vs),
            self.origin + Vec3::repeat((self.params.resolution as f64 - 0.5) * vs),
        );
        let Some((t0, t1)) = hull.ray_interval(&origin, &dir, intrinsics.depth_min * scale, intrinsics.depth_max * scale)
        else {
            return SurfaceSample::invalid(u, v);
        };
        let mut t = t0;
        let mut prev: Option<(f64, f64)> = None;
        while t <= t1 {
            let p = origin + dir * t;
            let cur = self.trilinear(&p).filter(|s| s.observed).map(|s| s.value);
            match (prev, cur) {
                (Some((t_prev, f_prev)), Some(f_cur)) if f_prev > 0.0 && f_cur < 0.0 => {
                    let t_hit = t_prev + (t - t_prev) * f_prev / (f_prev - f_cur);
                    let hit = origin + dir * t_hit;
                    return self.finish_sample(hit, &origin, u, v);
                }
                (Some((_, f_prev)), Some(f_cur)) if f_prev < 0.0 && f_cur > 0.0 => {
                    // back side of a surface: nothing visible along this ray
                    return SurfaceSample::invalid(u, v);
                }
                _ => {}
            }
            prev = cur.map(|f| (t, f));
            t += step;
        }
        SurfaceSample::invalid(u, v)
    }

    fn finish_sample(&self, hit: Vec3, camera: &Vec3, u: usize, v: usize) -> SurfaceSample {
        let Some(grad) = self.central_gradient(&hit) else {
            return SurfaceSample::invalid(u, v);
        };
        let n = grad.norm();
        if n.is_nan() || n <= 1e-9 {
            return SurfaceSample::invalid(u, v);
        }
        let normal = grad / n;
        if normal.dot(&(camera - hit)) <= 0.0 || !self.bounds().contains(&hit) {
            return SurfaceSample::invalid(u, v);
        }
        SurfaceSample {
            position: hit,
            normal,
            pixel: (u as u32, v as u32),
            valid: true,
        }
    }

    /// Surface points from observed voxels within `band` meters of the zero
    /// level, each moved onto the level set along the local gradient.
    pub fn surface_points(&self, band: f64) -> Vec<SurfacePoint> {
        let trunc = self.params.truncation;
        let res = self.params.resolution;
        let mut out = Vec::new();
        for k in 1..res - 1 {
            for j in 1..res - 1 {
                for i in 1..res - 1 {
                    let idx = self.index(i, j, k);
                    if self.weight[idx] == 0 {
                        continue;
                    }
                    let sdf = self.tsdf[idx] as f64 * trunc;
                    if sdf.abs() > band {
                        continue;
                    }
                    let c = self.voxel_center(i, j, k);
                    let Some(g) = self.central_gradient(&c) else { continue };
                    let gn = g.norm();
                    let position = if gn > 1e-9 {
                        // g is per-meter in normalized units; scale back to meters
                        c - g / gn * sdf
                    } else {
                        c
                    };
                    out.push(SurfacePoint {
                        position,
                        color: self.color[idx],
                        label: self.label[idx],
                    });
                }
            }
        }
        out
    }
}

/// Bilinear depth (meters) at a continuous pixel position, or `None` when a
/// neighbor is invalid or the four samples straddle a depth discontinuity.
fn bilinear_depth(depth: &[u16], width: usize, height: usize, u: f64, v: f64, max_spread: f64) -> Option<f64> {
    let (u0, v0) = (u.floor(), v.floor());
    if u0 < 0.0 || v0 < 0.0 || u0 + 1.0 >= width as f64 || v0 + 1.0 >= height as f64 {
        return None;
    }
    let (iu, iv) = (u0 as usize, v0 as usize);
    let at = |du: usize, dv: usize| depth[(iv + dv) * width + iu + du];
    let q = [at(0, 0), at(1, 0), at(0, 1), at(1, 1)];
    if q.contains(&0) {
        return None;
    }
    let lo = *q.iter().min()? as f64 * 1e-3;
    let hi = *q.iter().max()? as f64 * 1e-3;
    if hi - lo > max_spread {
        return None;
    }
    let (a, b) = (u - u0, v - v0);
    let top = q[0] as f64 * (1.0 - a) + q[1] as f64 * a;
    let bottom = q[2] as f64 * (1.0 - a) + q[3] as f64 * a;
    Some((top * (1.0 - b) + bottom * b) * 1e-3)
}

/// Label vote for one voxel: returns the new `(label, weight)`.
pub fn fuse_label(stored: u16, weight: u16, observed: u16) -> (u16, u16) {
    if observed == 0 {
        (stored, weight)
    } else if stored == observed && stored != 0 {
        (stored, weight.saturating_add(1))
    } else if weight > 1 {
        (stored, weight - 1)
    } else {
        (observed, 1)
    }
}

/// Settings for [`detect_ground_plane`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundPlaneParams {
    /// Pixel stride when back-projecting frames.
    pub stride: usize,
    pub iterations: usize,
    /// Inlier distance, meters.
    pub inlier_threshold: f64,
    pub min_inlier_ratio: f64,
    pub seed: u64,
}

impl Default for GroundPlaneParams {
    fn default() -> Self {
        Self {
            stride: 4,
            iterations: 256,
            inlier_threshold: 2.0 * DEFAULT_VOXEL_SIZE,
            min_inlier_ratio: 0.30,
            seed: 0x5eed,
        }
    }
}

/// Random-sample-consensus plane fit over the lowest height quartile (world
/// z) of back-projected points, refined by least squares on the inliers.
/// The normal is oriented toward the mean camera position.
pub fn detect_ground_plane(
    frames: &[RgbdFrame],
    intrinsics: &CameraIntrinsics,
    params: &GroundPlaneParams,
) -> Result<GroundPlane, TsdfError> {
    if frames.len() < 3 {
        return Err(TsdfError::NotEnoughFrames(frames.len()));
    }
    let stride = params.stride.max(1);
    let mut points = Vec::new();
    let mut cam_mean = Vec3::zeros();
    for f in frames {
        f.validate(intrinsics)?;
        cam_mean += f.camera_position();
        for v in (0..intrinsics.height).step_by(stride) {
            for u in (0..intrinsics.width).step_by(stride) {
                if let Some(p) = f.world_point(u, v, intrinsics) {
                    points.push(p);
                }
            }
        }
    }
    cam_mean /= frames.len() as f64;
    if points.len() < 3 {
        return Err(TsdfError::NoDominantPlane);
    }
    let mut heights: Vec<f64> = points.iter().map(|p| p.z).collect();
    heights.sort_by(|a, b| a.total_cmp(b));
    let q1 = heights[(heights.len() - 1) / 4];
    let candidates: Vec<Vec3> = points.into_iter().filter(|p| p.z <= q1).collect();
    if candidates.len() < 3 {
        return Err(TsdfError::NoDominantPlane);
    }

    let thr = params.inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = candidates.len();
    let mut best: Option<(usize, Vec3, f64)> = None;
    for _ in 0..params.iterations.max(1) {
        let a = candidates[rng.random_range(0..n)];
        let b = candidates[rng.random_range(0..n)];
        let c = candidates[rng.random_range(0..n)];
        let normal = (b - a).cross(&(c - a));
        let len = normal.norm();
        if len < 1e-12 {
            continue;
        }
        let normal = normal / len;
        let offset = normal.dot(&a);
        let count = candidates.iter().filter(|p| (normal.dot(p) - offset).abs() <= thr).count();
        if best.is_none_or(|(bc, _, _)| count > bc) {
            best = Some((count, normal, offset));
        }
    }
    let Some((count, normal, offset)) = best else {
        return Err(TsdfError::NoDominantPlane);
    };
    if (count as f64) < params.min_inlier_ratio * n as f64 {
        return Err(TsdfError::NoDominantPlane);
    }

    let inliers: Vec<&Vec3> = candidates.iter().filter(|p| (normal.dot(p) - offset).abs() <= thr).collect();
    let mean = inliers.iter().fold(Vec3::zeros(), |acc, p| acc + **p) / inliers.len() as f64;
    let mut cov = Matrix3::<f64>::zeros();
    for p in &inliers {
        let d = **p - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let min_axis = eig.eigenvalues.imin();
    let mut refined = eig.eigenvectors.column(min_axis).into_owned().normalize();
    if refined.dot(&(cam_mean - mean)) < 0.0 {
        refined = -refined;
    }
    Ok(GroundPlane {
        normal: refined,
        offset: refined.dot(&mean),
        fitted_from: frames.len(),
    })
}
