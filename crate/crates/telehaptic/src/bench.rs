//! Haptic bench: fuse the box-front/floor corner scene, raycast a surface
//! cloud at a density matched to the volume, and drive a scripted HIP path
//! through it with both update rules, timing every update.

use std::time::Instant;

use telehaptic_core::camera::CameraIntrinsics;
use telehaptic_core::geometry::{Aabb, RigidTransform, Vec3};
use telehaptic_core::haptic::{
    compute_force, max_proxy_step, proxy_update_with, HapticParams, HapticState, SurfaceCloud, TraceRow, UpdateRule,
};
use telehaptic_core::sim::{render_frame, Scene};
use telehaptic_core::tsdf::{TsdfError, TsdfParams, TsdfVolume};

pub const BOX_FRONT: f64 = 0.5;
pub const BOX_BACK: f64 = 0.9;
pub const BOX_TOP: f64 = 0.1;

/// Floor plus a low box whose front face meets the floor at x = 0.5.
pub fn corner_scene() -> Scene {
    Scene::flat(Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(2.0, 1.0, 1.0))).with_box(
        Vec3::new(BOX_FRONT, -0.3, 0.0),
        Vec3::new(BOX_BACK, 0.3, BOX_TOP),
        [200, 40, 40],
    )
}

/// Descend onto the floor at x = 0.3, then slide at 1 cm depth toward and
/// past the box front up to `end_x`.
pub fn corner_path(step: f64, end_x: f64) -> Vec<Vec3> {
    let mut path = Vec::new();
    let n_down = (0.03 / step).round() as usize;
    for k in 0..=n_down {
        path.push(Vec3::new(0.3, 0.0, 0.02 - k as f64 * step));
    }
    let n_across = ((end_x - 0.3) / step).round() as usize;
    for k in 1..=n_across {
        path.push(Vec3::new(0.3 + k as f64 * step, 0.0, -0.01));
    }
    path
}

pub fn haptic_camera() -> RigidTransform {
    RigidTransform::look_at(Vec3::new(0.05, 0.0, 0.4), Vec3::new(0.5, 0.0, 0.0))
}

/// Raycast image whose pixel count tracks the volume resolution: `res`
/// columns, 3/4 as many rows, same field of view as the default camera.
pub fn raycast_intrinsics(resolution: usize) -> CameraIntrinsics {
    let d = CameraIntrinsics::default();
    let s = resolution as f64 / d.width as f64;
    let (w, h) = (resolution, resolution * 3 / 4);
    CameraIntrinsics {
        fx: d.fx * s,
        fy: d.fy * s,
        cx: (w as f64 - 1.0) / 2.0,
        cy: (h as f64 - 1.0) / 2.0,
        width: w,
        height: h,
        ..d
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub resolution: usize,
    pub step: f64,
    pub end_x: f64,
    pub friction: f64,
    pub frames: usize,
    pub dt_ms: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            step: 0.002,
            end_x: 0.7,
            friction: 0.3,
            frames: 3,
            dt_ms: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub resolution: usize,
    pub voxel_size: f64,
    pub cloud_points: usize,
    pub fuse_ms: f64,
    pub raycast_ms: f64,
    /// Mean and max collision detection + proxy update + force time.
    pub mean_update_ms: f64,
    pub max_update_ms: f64,
    pub shaded: Vec<TraceRow>,
    pub naive: Vec<TraceRow>,
    pub frictionless: Vec<TraceRow>,
    pub total_ms: f64,
}

impl BenchResult {
    pub fn max_step_shaded(&self) -> f64 {
        max_proxy_step(&self.shaded)
    }

    pub fn max_step_naive(&self) -> f64 {
        max_proxy_step(&self.naive)
    }

    pub fn max_step_frictionless(&self) -> f64 {
        max_proxy_step(&self.frictionless)
    }

    /// Number of naive proxy steps longer than `factor` HIP steps.
    pub fn naive_jumps(&self, step: f64, factor: f64) -> usize {
        self.naive
            .windows(2)
            .filter(|w| (w[1].proxy - w[0].proxy).norm() > factor * step)
            .count()
    }
}

/// Fused corner scene and its surface cloud.
pub struct CornerWorld {
    pub volume: TsdfVolume,
    pub cloud: SurfaceCloud,
    pub fuse_ms: f64,
    pub raycast_ms: f64,
}

pub fn build_corner_world(resolution: usize, frames: usize) -> Result<CornerWorld, TsdfError> {
    let scene = corner_scene();
    let intr = CameraIntrinsics::default();
    let cam = haptic_camera();
    let mut volume = TsdfVolume::placed_for_camera(TsdfParams::with_resolution(resolution), &cam)?;
    let t0 = Instant::now();
    for i in 0..frames {
        let a = i as f64 * 2.1;
        let jitter = Vec3::new(0.01 * a.cos(), 0.01 * a.sin(), 0.005 * i as f64);
        let pose = RigidTransform::look_at(cam.translation + jitter, Vec3::new(0.5, 0.0, 0.0));
        volume.integrate_frame(&render_frame(&scene, &pose, &intr), &intr)?;
    }
    let fuse_ms = ms_since(t0);
    let ray = raycast_intrinsics(resolution);
    let t1 = Instant::now();
    let samples = volume.raycast(&cam, &ray);
    let cloud = SurfaceCloud::from_samples(&samples, ray.width);
    let raycast_ms = ms_since(t1);
    Ok(CornerWorld {
        volume,
        cloud,
        fuse_ms,
        raycast_ms,
    })
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

/// Runs `path` and records per-update wall time.
pub fn timed_run(
    world: &CornerWorld,
    params: HapticParams,
    path: &[Vec3],
    dt_ms: u64,
    rule: UpdateRule,
) -> (Vec<TraceRow>, Vec<f64>) {
    let mut state = HapticState::new(params, path[0]);
    let mut rows = Vec::with_capacity(path.len());
    let mut times = Vec::with_capacity(path.len());
    for (i, h) in path.iter().enumerate() {
        let t0 = Instant::now();
        let _ = proxy_update_with(&mut state, &world.volume, &world.cloud, *h, rule);
        let t = i as u64 * dt_ms;
        let f = compute_force(&state, t);
        times.push(ms_since(t0));
        rows.push(TraceRow {
            timestamp_ms: t,
            hip: state.hip,
            proxy: state.proxy,
            force: f.force,
            mode: state.mode,
            friction_mode: state.friction_mode,
        });
    }
    (rows, times)
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult, TsdfError> {
    let t0 = Instant::now();
    let world = build_corner_world(cfg.resolution, cfg.frames)?;
    let path = corner_path(cfg.step, cfg.end_x);
    let with_friction = HapticParams {
        friction: cfg.friction,
        ..HapticParams::default()
    };
    let (shaded, times) = timed_run(&world, with_friction, &path, cfg.dt_ms, UpdateRule::ForceShading);
    let (frictionless, _) = timed_run(&world, HapticParams::default(), &path, cfg.dt_ms, UpdateRule::ForceShading);
    let (naive, _) = timed_run(&world, HapticParams::default(), &path, cfg.dt_ms, UpdateRule::Nearest);
    let mean_update_ms = times.iter().sum::<f64>() / times.len() as f64;
    let max_update_ms = times.iter().cloned().fold(0.0, f64::max);
    Ok(BenchResult {
        resolution: cfg.resolution,
        voxel_size: world.volume.voxel_size(),
        cloud_points: world.cloud.len(),
        fuse_ms: world.fuse_ms,
        raycast_ms: world.raycast_ms,
        mean_update_ms,
        max_update_ms,
        shaded,
        naive,
        frictionless,
        total_ms: ms_since(t0),
    })
}
