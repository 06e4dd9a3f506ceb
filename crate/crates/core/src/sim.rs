//! Hardware stand-in: analytic scene renderer and a holonomic robot with
//! odometry.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::{CameraIntrinsics, RgbdFrame};
use crate::geometry::{wrap_angle, Aabb, RigidTransform, Vec3};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub const DEFAULT_V_MAX: f64 = 0.3;
pub const TURN_QUANTUM: f64 = core::f64::consts::FRAC_PI_4;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("script is invalid: {0}")]
    ScriptInvalid(&'static str),
}

/// Plane `{x : normal·x = offset}`, rendered only inside the scene bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Floor {
    pub normal: Vec3,
    pub offset: f64,
    pub albedo: [u8; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SceneBox {
    pub min: Vec3,
    pub max: Vec3,
    pub albedo: [u8; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SceneSphere {
    pub center: Vec3,
    pub radius: f64,
    pub albedo: [u8; 3],
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Scene {
    pub floor: Floor,
    #[cfg_attr(feature = "serde", serde(default))]
    pub boxes: Vec<SceneBox>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub spheres: Vec<SceneSphere>,
    pub bounds: Aabb,
}

/// Nearest intersection along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub albedo: [u8; 3],
}

impl Scene {
    /// Horizontal floor at z = 0 spanning `bounds`.
    pub fn flat(bounds: Aabb) -> Self {
        Self {
            floor: Floor {
                normal: Vec3::z(),
                offset: 0.0,
                albedo: [128, 128, 128],
            },
            boxes: Vec::new(),
            spheres: Vec::new(),
            bounds,
        }
    }

    pub fn with_box(mut self, min: Vec3, max: Vec3, albedo: [u8; 3]) -> Self {
        self.boxes.push(SceneBox { min, max, albedo });
        self
    }

    pub fn with_sphere(mut self, center: Vec3, radius: f64, albedo: [u8; 3]) -> Self {
        self.spheres.push(SceneSphere { center, radius, albedo });
        self
    }

    /// Checks that the floor normal is a unit vector and every primitive fits
    /// inside the bounds.
    pub fn validate(&self) -> bool {
        let n_ok = (self.floor.normal.norm() - 1.0).abs() < 1e-6;
        let boxes_ok = self
            .boxes
            .iter()
            .all(|b| self.bounds.contains(&b.min) && self.bounds.contains(&b.max) && (0..3).all(|i| b.min[i] <= b.max[i]));
        let spheres_ok = self.spheres.iter().all(|s| {
            s.radius > 0.0
                && self.bounds.contains(&(s.center - Vec3::repeat(s.radius)))
                && self.bounds.contains(&(s.center + Vec3::repeat(s.radius)))
        });
        n_ok && boxes_ok && spheres_ok
    }

    /// Closest primitive hit with `t > 0` along `origin + t·dir`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, albedo: [u8; 3]| {
            if t > 1e-9 && best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    point: origin + dir * t,
                    albedo,
                });
            }
        };
        let denom = self.floor.normal.dot(dir);
        if denom.abs() > 1e-12 {
            let t = (self.floor.offset - self.floor.normal.dot(origin)) / denom;
            let p = origin + dir * t;
            if t > 0.0 && p.x >= self.bounds.min.x && p.x <= self.bounds.max.x && p.y >= self.bounds.min.y && p.y <= self.bounds.max.y {
                consider(t, self.floor.albedo);
            }
        }
        for b in &self.boxes {
            let aabb = Aabb::new(b.min, b.max);
            if let Some((t0, _)) = aabb.ray_interval(origin, dir, 0.0, f64::INFINITY) {
                if t0 > 0.0 {
                    consider(t0, b.albedo);
                }
            }
        }
        for s in &self.spheres {
            let oc = origin - s.center;
            let a = dir.dot(dir);
            let half_b = oc.dot(dir);
            let c = oc.dot(&oc) - s.radius * s.radius;
            let disc = half_b * half_b - a * c;
            if disc >= 0.0 {
                let t = (-half_b - disc.sqrt()) / a;
                if t > 0.0 {
                    consider(t, s.albedo);
                }
            }
        }
        best
    }

    /// Signed distance to the closest primitive surface (negative inside).
    /// The floor counts as a half-space below its plane.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        let mut d = self.floor.normal.dot(p) - self.floor.offset;
        for b in &self.boxes {
            d = d.min(box_sdf(p, &b.min, &b.max));
        }
        for s in &self.spheres {
            d = d.min((p - s.center).norm() - s.radius);
        }
        d
    }
}

impl crate::haptic::SignedField for Scene {
    fn field_value(&self, p: &Vec3) -> Option<f64> {
        self.bounds.contains(p).then(|| self.signed_distance(p))
    }
}

fn box_sdf(p: &Vec3, min: &Vec3, max: &Vec3) -> f64 {
    let c = (min + max) * 0.5;
    let h = (max - min) * 0.5;
    let q = (p - c).abs() - h;
    let outside = q.map(|v| v.max(0.0)).norm();
    let inside = q.x.max(q.y).max(q.z).min(0.0);
    outside + inside
}

/// Ray-casts every pixel against the scene. Depth is the camera-frame z of
/// the nearest hit in millimeters, or 0 when nothing is hit within the
/// intrinsics' depth range.
pub fn render_frame(scene: &Scene, pose: &RigidTransform, intrinsics: &CameraIntrinsics) -> RgbdFrame {
    render_frame_noisy(scene, pose, intrinsics, 0.0, 0)
}

/// [`render_frame`] with zero-mean Gaussian depth jitter of `sigma_depth` meters.
pub fn render_frame_noisy(
    scene: &Scene,
    pose: &RigidTransform,
    intrinsics: &CameraIntrinsics,
    sigma_depth: f64,
    seed: u64,
) -> RgbdFrame {
    let mut frame = RgbdFrame::blank(intrinsics.width, intrinsics.height, *pose);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (sigma_depth > 0.0).then(|| Normal::new(0.0, sigma_depth).expect("finite sigma"));
    for v in 0..intrinsics.height {
        for u in 0..intrinsics.width {
            let ray_cam = intrinsics.pixel_ray(u as f64, v as f64);
            let dir = pose.apply_vector(&ray_cam);
            let Some(hit) = scene.intersect(&pose.translation, &dir) else {
                continue;
            };
            // unit-z camera ray, so the parameter is the z-depth
            let mut z = hit.t;
            if let Some(n) = &noise {
                z += n.sample(&mut rng);
            }
            if !intrinsics.depth_in_range(z) {
                continue;
            }
            let mm = (z * 1000.0).round();
            if mm <= 0.0 || mm > u16::MAX as f64 {
                continue;
            }
            let idx = frame.index(u, v);
            frame.depth[idx] = mm as u16;
            frame.color[idx] = hit.albedo;
        }
    }
    frame
}

/// Planar robot pose.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.x, self.y, 0.0)
    }

    pub fn distance_to(&self, other: &Pose2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Velocity command in the robot frame. A nonzero `omega` requests one
/// 45° heading quantum in its direction.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct VelocityCommand {
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl VelocityCommand {
    pub fn new(vx: f64, vy: f64, omega: f64) -> Self {
        Self { vx, vy, omega }
    }

    pub fn linear_speed(&self) -> f64 {
        (self.vx * self.vx + self.vy * self.vy).sqrt()
    }
}

/// Camera placement on the robot body.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CameraMount {
    pub height: f64,
    /// Downward tilt, radians.
    pub pitch: f64,
    /// Offset along the robot's forward axis, meters.
    pub forward: f64,
}

impl Default for CameraMount {
    fn default() -> Self {
        Self {
            height: 0.6,
            pitch: 30f64.to_radians(),
            forward: 0.0,
        }
    }
}

impl CameraMount {
    pub fn camera_pose(&self, pose: &Pose2) -> RigidTransform {
        let (s, c) = pose.theta.sin_cos();
        let heading = Vec3::new(c, s, 0.0);
        let position = Vec3::new(pose.x, pose.y, self.height) + heading * self.forward;
        let (sp, cp) = self.pitch.sin_cos();
        let forward = heading * cp - Vec3::z() * sp;
        RigidTransform::look_along(position, forward, Vec3::z())
    }
}

#[derive(Clone, Debug)]
pub struct SimRobot {
    pub truth: Pose2,
    pub odometry: Pose2,
    pub v_max: f64,
    /// Standard deviation of per-step odometry translation noise, meters.
    pub odometry_sigma: f64,
    pub mount: CameraMount,
    rng: ChaCha8Rng,
}

impl SimRobot {
    pub fn new(start: Pose2, odometry_sigma: f64, seed: u64) -> Self {
        Self {
            truth: start,
            odometry: start,
            v_max: DEFAULT_V_MAX,
            odometry_sigma,
            mount: CameraMount::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn camera_pose(&self) -> RigidTransform {
        self.mount.camera_pose(&self.truth)
    }

    /// Clamps the command to `v_max`, moves the robot along its current
    /// heading frame, then applies at most one 45° turn. Odometry follows
    /// the same motion plus Gaussian noise.
    pub fn step(&mut self, cmd: &VelocityCommand, dt: f64) {
        let speed = cmd.linear_speed();
        let scale = if speed > self.v_max { self.v_max / speed } else { 1.0 };
        let (vx, vy) = (cmd.vx * scale, cmd.vy * scale);
        let turn = if cmd.omega > 0.0 {
            TURN_QUANTUM
        } else if cmd.omega < 0.0 {
            -TURN_QUANTUM
        } else {
            0.0
        };
        let advance = |p: &mut Pose2| {
            let (s, c) = p.theta.sin_cos();
            p.x += (c * vx - s * vy) * dt;
            p.y += (s * vx + c * vy) * dt;
            p.theta = wrap_angle(p.theta + turn);
        };
        advance(&mut self.truth);
        advance(&mut self.odometry);
        if self.odometry_sigma > 0.0 {
            let n = Normal::new(0.0, self.odometry_sigma).expect("finite sigma");
            self.odometry.x += n.sample(&mut self.rng);
            self.odometry.y += n.sample(&mut self.rng);
        }
    }
}

/// `robot_step` as a value-level function.
pub fn robot_step(robot: &SimRobot, cmd: &VelocityCommand, dt: f64) -> SimRobot {
    let mut next = robot.clone();
    next.step(cmd, dt);
    next
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ScriptSegment {
    pub command: VelocityCommand,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Script {
    pub start: Pose2,
    pub fps: f64,
    pub segments: Vec<ScriptSegment>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub odometry_sigma: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct OdometryRecord {
    pub seq: u32,
    pub t_ms: u64,
    pub odometry: Pose2,
    pub truth: Pose2,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionLog {
    pub frames: Vec<RgbdFrame>,
    pub odometry: Vec<OdometryRecord>,
}

/// Replays a velocity script at `fps`, rendering one frame after every step.
pub fn scripted_run(scene: &Scene, script: &Script, intrinsics: &CameraIntrinsics) -> Result<SessionLog, SimError> {
    if !(script.fps > 0.0 && script.fps.is_finite()) {
        return Err(SimError::ScriptInvalid("fps must be positive"));
    }
    if script.segments.iter().any(|s| !(s.duration_s >= 0.0 && s.duration_s.is_finite())) {
        return Err(SimError::ScriptInvalid("segment durations must be finite and nonnegative"));
    }
    let dt = 1.0 / script.fps;
    let in_bounds = |p: &Pose2| {
        p.x >= scene.bounds.min.x && p.x <= scene.bounds.max.x && p.y >= scene.bounds.min.y && p.y <= scene.bounds.max.y
    };
    let mut robot = SimRobot::new(script.start, script.odometry_sigma, script.seed);
    if !in_bounds(&robot.truth) {
        return Err(SimError::ScriptInvalid("start pose outside scene bounds"));
    }
    let mut log = SessionLog::default();
    let mut seq = 0u32;
    for seg in &script.segments {
        let steps = (seg.duration_s * script.fps).round() as u64;
        for _ in 0..steps {
            robot.step(&seg.command, dt);
            if !in_bounds(&robot.truth) {
                return Err(SimError::ScriptInvalid("robot leaves scene bounds"));
            }
            seq += 1;
            let t_ms = ((seq as f64) * 1000.0 / script.fps).round() as u64;
            let mut frame = render_frame(scene, &robot.camera_pose(), intrinsics);
            frame.seq = seq;
            frame.timestamp_ms = t_ms;
            log.frames.push(frame);
            log.odometry.push(OdometryRecord {
                seq,
                t_ms,
                odometry: robot.odometry,
                truth: robot.truth,
            });
        }
    }
    Ok(log)
}
