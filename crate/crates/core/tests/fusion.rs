use telehaptic_core::camera::CameraIntrinsics;
use telehaptic_core::geometry::{Aabb, RigidTransform, Vec3};
use telehaptic_core::sim::{render_frame, Floor, Scene};
use telehaptic_core::tsdf::{detect_ground_plane, GroundPlaneParams, TsdfError, TsdfParams, TsdfVolume};

fn wide_bounds() -> Aabb {
    Aabb::new(Vec3::new(-20.0, -20.0, -20.0), Vec3::new(20.0, 20.0, 20.0))
}

/// Plane z = 1 facing a camera at the origin looking along +z.
fn plane_scene() -> Scene {
    Scene {
        floor: Floor {
            normal: -Vec3::z(),
            offset: -1.0,
            albedo: [90, 160, 90],
        },
        boxes: Vec::new(),
        spheres: Vec::new(),
        bounds: wide_bounds(),
    }
}

/// Small lateral jitter around a base pose, all looking along +z.
fn jittered_poses(n: usize) -> Vec<RigidTransform> {
    (0..n)
        .map(|i| {
            let a = i as f64 * 0.7;
            RigidTransform::from_translation(Vec3::new(0.03 * a.cos(), 0.03 * a.sin(), 0.0073 * i as f64))
        })
        .collect()
}

fn fuse(scene: &Scene, poses: &[RigidTransform], intr: &CameraIntrinsics, res: usize) -> TsdfVolume {
    let mut vol = TsdfVolume::placed_for_camera(TsdfParams::with_resolution(res), &RigidTransform::identity()).unwrap();
    for (i, pose) in poses.iter().enumerate() {
        let mut f = render_frame(scene, pose, intr);
        f.seq = i as u32;
        vol.integrate_frame(&f, intr).unwrap();
    }
    vol
}

#[test]
fn fused_plane_raycasts_to_the_analytic_plane() {
    let intr = CameraIntrinsics::default();
    let vol = fuse(&plane_scene(), &jittered_poses(10), &intr, 256);
    let samples = vol.raycast(&RigidTransform::identity(), &intr);
    let center = samples[120 * intr.width + 160];
    assert!(center.valid);
    assert!((center.position.z - 1.0).abs() <= 0.005, "center z {}", center.position.z);
    let angle = center.normal.dot(&-Vec3::z()).clamp(-1.0, 1.0).acos().to_degrees();
    assert!(angle <= 2.0, "normal off by {angle} deg");

    // analytic oracle: every valid sample should sit on z = 1
    let valid: Vec<_> = samples.iter().filter(|s| s.valid).collect();
    assert!(valid.len() > samples.len() / 2);
    let rms = (valid.iter().map(|s| (s.position.z - 1.0).powi(2)).sum::<f64>() / valid.len() as f64).sqrt();
    assert!(rms <= vol.voxel_size(), "rms {rms}");
    for s in &valid {
        assert!((s.normal.norm() - 1.0).abs() < 1e-4);
        assert!(s.normal.dot(&(Vec3::zeros() - s.position)) > 0.0);
    }
}

#[test]
fn fused_sphere_matches_analytic_sdf() {
    let intr = CameraIntrinsics::default();
    let center = Vec3::new(0.0, 0.0, 1.5);
    let mut scene = plane_scene();
    // backdrop beyond the depth range
    scene.floor.offset = -15.0;
    let scene = scene.with_sphere(center, 0.5, [220, 220, 40]);
    let vol = fuse(&scene, &jittered_poses(10), &intr, 256);
    let samples = vol.raycast(&RigidTransform::identity(), &intr);
    let errs: Vec<f64> = samples
        .iter()
        .filter(|s| s.valid)
        .map(|s| ((s.position - center).norm() - 0.5).abs())
        .collect();
    assert!(errs.len() > 1000);
    let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
    assert!(rms <= 0.015, "rms {rms}");
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    assert!(worst <= vol.voxel_size(), "worst {worst}");
}

#[test]
fn slanted_plane_has_constant_gradient() {
    // The projective distance varies with the viewing angle, so stay within a
    // 20 cm patch around the optical axis where that variation is small.
    let intr = CameraIntrinsics::default();
    let n = Vec3::new(-0.3, 0.0, -1.0).normalize();
    let scene = Scene {
        floor: Floor {
            normal: n,
            offset: n.dot(&Vec3::new(0.0, 0.0, 1.2)),
            albedo: [10, 10, 200],
        },
        boxes: Vec::new(),
        spheres: Vec::new(),
        bounds: wide_bounds(),
    };
    let vol = fuse(&scene, &jittered_poses(10), &intr, 256);
    let mut gx = Vec::new();
    for i in -10..=10 {
        for j in -10..=10 {
            let x = i as f64 * 0.01;
            let y = j as f64 * 0.01;
            // point on the plane: n·p = offset
            let z = (scene.floor.offset - n.x * x - n.y * y) / n.z;
            let (_, g) = vol.sample_tsdf(&Vec3::new(x, y, z)).unwrap();
            gx.push(g.x);
        }
    }
    let mean = gx.iter().sum::<f64>() / gx.len() as f64;
    assert!(mean.abs() > 1.0);
    for g in &gx {
        assert!(((g - mean) / mean).abs() <= 0.05, "gx {g} vs mean {mean}");
    }
}

#[test]
fn ray_leaving_volume_is_invalid() {
    let intr = CameraIntrinsics::default();
    let vol = fuse(&plane_scene(), &jittered_poses(3), &intr, 64);
    // 64³ at 1 cm ends at z = 0.64, before the plane
    let samples = vol.raycast(&RigidTransform::identity(), &intr);
    assert!(samples.iter().all(|s| !s.valid));
}

fn floor_frames(scene: &Scene, intr: &CameraIntrinsics) -> Vec<telehaptic_core::camera::RgbdFrame> {
    (0..10)
        .map(|i| {
            let pos = Vec3::new(-1.5 + 0.05 * i as f64, 0.02 * i as f64, 1.0);
            let pose = RigidTransform::look_along(pos, Vec3::new(1.0, 0.0, -0.6), Vec3::z());
            render_frame(scene, &pose, intr)
        })
        .collect()
}

#[test]
fn ground_plane_of_flat_floor_with_box() {
    let intr = CameraIntrinsics::default();
    let scene = Scene::flat(Aabb::new(Vec3::new(-5.0, -5.0, -1.0), Vec3::new(5.0, 5.0, 3.0))).with_box(
        Vec3::new(0.3, -0.2, 0.0),
        Vec3::new(0.7, 0.2, 0.4),
        [200, 30, 30],
    );
    let frames = floor_frames(&scene, &intr);
    let plane = detect_ground_plane(&frames, &intr, &GroundPlaneParams::default()).unwrap();
    let angle = plane.normal.dot(&Vec3::z()).clamp(-1.0, 1.0).acos().to_degrees();
    assert!(angle <= 1.0, "angle {angle}");
    assert!(plane.offset.abs() <= 0.005, "offset {}", plane.offset);
    assert_eq!(plane.fitted_from, 10);
    assert!((plane.normal.norm() - 1.0).abs() < 1e-6);
}

#[test]
fn ground_plane_of_tilted_floor() {
    let intr = CameraIntrinsics::default();
    let tilt = 10f64.to_radians();
    let normal = Vec3::new(0.0, -tilt.sin(), tilt.cos());
    let mut scene = Scene::flat(Aabb::new(Vec3::new(-5.0, -5.0, -3.0), Vec3::new(5.0, 5.0, 3.0)));
    scene.floor.normal = normal;
    let frames = floor_frames(&scene, &intr);
    let plane = detect_ground_plane(&frames, &intr, &GroundPlaneParams::default()).unwrap();
    let angle = plane.normal.dot(&normal).clamp(-1.0, 1.0).acos().to_degrees();
    assert!(angle <= 1.0, "angle {angle}");
}

#[test]
fn ground_plane_of_empty_sky_fails() {
    let intr = CameraIntrinsics::default();
    let scene = Scene::flat(Aabb::new(Vec3::new(-5.0, -5.0, -1.0), Vec3::new(5.0, 5.0, 3.0)));
    let frames: Vec<_> = (0..5)
        .map(|_| render_frame(&scene, &RigidTransform::look_along(Vec3::new(0.0, 0.0, 1.0), Vec3::z(), Vec3::x()), &intr))
        .collect();
    assert_eq!(
        detect_ground_plane(&frames, &intr, &GroundPlaneParams::default()),
        Err(TsdfError::NoDominantPlane)
    );
}
