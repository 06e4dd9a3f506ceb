//! Small linear-algebra vocabulary shared by every module.

#[allow(unused_imports)]
use num_traits::Float;
use nalgebra::{Matrix3, Vector2, Vector3};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on `RᵀR − I` (max abs entry) for a rotation to count as orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Rigid transform mapping points from a local frame into the world frame:
/// `p_world = rotation * p_local + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Builds a camera pose from its optical axis (`forward`) and an approximate
    /// world up direction. Camera axes follow the pinhole convention: x right,
    /// y down, z forward.
    pub fn look_along(position: Vec3, forward: Vec3, up: Vec3) -> Self {
        let z = forward.normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            // forward parallel to up: any perpendicular will do
            x = z.cross(&Vec3::x());
            if x.norm() < 1e-9 {
                x = z.cross(&Vec3::y());
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self {
            rotation: Mat3::from_columns(&[x, y, z]),
            translation: position,
        }
    }

    /// Camera at `position` looking at `target` with world +z as up.
    pub fn look_at(position: Vec3, target: Vec3) -> Self {
        Self::look_along(position, target - position, Vec3::z())
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Maps a world point into the local frame (assumes an orthonormal rotation).
    pub fn inverse_apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn is_orthonormal(&self) -> bool {
        if !self.rotation.iter().all(|v| v.is_finite()) || !self.translation.iter().all(|v| v.is_finite()) {
            return false;
        }
        let err = self.rotation.transpose() * self.rotation - Mat3::identity();
        err.iter().all(|e| e.abs() <= ORTHONORMAL_TOL) && self.rotation.determinant() > 0.0
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn from_row_major(m: &[f64; 12]) -> Self {
        Self {
            rotation: Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vec3::new(m[3], m[7], m[11]),
        }
    }

    pub fn rotation_z(angle: f64) -> Mat3 {
        let (s, c) = angle.sin_cos();
        Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    pub fn rotation_x(angle: f64) -> Mat3 {
        let (s, c) = angle.sin_cos();
        Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Slab test. Returns the parametric entry/exit interval of the ray
    /// `origin + t·dir` clipped to `[t_min, t_max]`, if any.
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<(f64, f64)> {
        let mut lo = t_min;
        let mut hi = t_max;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let mut t0 = (self.min[i] - origin[i]) * inv;
            let mut t1 = (self.max[i] - origin[i]) * inv;
            if t0 > t1 {
                core::mem::swap(&mut t0, &mut t1);
            }
            lo = lo.max(t0);
            hi = hi.min(t1);
            if lo > hi {
                return None;
            }
        }
        Some((lo, hi))
    }
}

/// Wraps an angle to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -core::f64::consts::PI {
        r += two_pi;
    } else if r > core::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Returns a unit vector orthogonal to `n`, preferring the projection of
/// world x (falls back to world y when `n` is nearly parallel to x).
pub fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let mut t1 = Vec3::x() - n * n.x;
    if t1.norm() < 1e-6 {
        t1 = Vec3::y() - n * n.y;
    }
    let t1 = t1.normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}
