use proptest::prelude::*;
use telehaptic_core::camera::CameraIntrinsics;
use telehaptic_core::geometry::{Aabb, RigidTransform, Vec2, Vec3};
use telehaptic_core::interact::*;
use telehaptic_core::plan::{build_occupancy, with_obstacles, Cell, GridSpec, ObstacleShape, OccupancyGrid, VirtualObstacle};
use telehaptic_core::segment::{seed_from_mark, LabelImage, RegionParams};
use telehaptic_core::sim::{render_frame, Scene};
use telehaptic_core::tsdf::{GroundPlane, TsdfParams, TsdfVolume, Voxel};

const BOX_LO: [f64; 3] = [0.2, -0.3, 0.0];
const BOX_HI: [f64; 3] = [0.8, 0.3, 0.3];

fn box_scene() -> Scene {
    Scene::flat(Aabb::new(Vec3::new(-5.0, -5.0, -1.0), Vec3::new(5.0, 5.0, 3.0))).with_box(
        Vec3::from(BOX_LO),
        Vec3::from(BOX_HI),
        [190, 60, 30],
    )
}

/// Pixels whose ray first hits the box top face.
fn box_top_truth(scene: &Scene, pose: &RigidTransform, intr: &CameraIntrinsics) -> LabelImage {
    let mut truth = LabelImage::new(intr.width, intr.height);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let dir = pose.apply_vector(&intr.pixel_ray(u as f64, v as f64));
            if let Some(hit) = scene.intersect(&pose.translation, &dir) {
                let p = pose.translation + dir * hit.t;
                if (p.z - BOX_HI[2]).abs() < 1e-9 && (0..2).all(|k| p[k] >= BOX_LO[k] && p[k] <= BOX_HI[k]) {
                    truth.labels[v * intr.width + u] = 1;
                }
            }
        }
    }
    truth
}

fn fused_box() -> (TsdfVolume, Scene, RigidTransform, CameraIntrinsics) {
    let intr = CameraIntrinsics::default();
    let scene = box_scene();
    let pose = RigidTransform::look_at(Vec3::new(0.0, 0.0, 1.4), Vec3::new(0.5, 0.0, 0.0));
    let frame = render_frame(&scene, &pose, &intr);
    let origin = Vec3::new(-0.4, -0.8, -0.2);
    let mut vol = TsdfVolume::new(TsdfParams::with_resolution(128), origin).unwrap();
    vol.integrate_frame(&frame, &intr).unwrap();
    (vol, scene, pose, intr)
}

#[test]
fn marking_an_unlabeled_box_segments_its_top() {
    let (mut vol, scene, pose, intr) = fused_box();
    let frame = render_frame(&scene, &pose, &intr);
    let contact = Vec3::new(0.5, 0.0, 0.3);
    assert_eq!(label_at(&vol, &contact), None);
    let marked = mark_object(Some(contact), &mut vol, &frame, &intr, &RegionParams::default()).unwrap();
    assert!(marked.label > 0);
    let mask = marked.mask.unwrap();
    let truth = box_top_truth(&scene, &pose, &intr);
    let top = truth.count(1);
    let covered = (0..truth.labels.len()).filter(|&i| truth.labels[i] == 1 && mask.labels[i] == marked.label).count();
    assert!(top > 0 && covered as f64 >= 0.9 * top as f64, "{covered}/{top}");
    assert_eq!(label_at(&vol, &contact), Some(marked.label));

    // a second mark resolves to the fused label without segmenting
    let again = mark_object(Some(contact), &mut vol, &frame, &intr, &RegionParams::default()).unwrap();
    assert_eq!(again, MarkedObject { label: marked.label, mask: None });
}

#[test]
fn marking_a_labeled_box_returns_its_label() {
    let (mut vol, scene, pose, intr) = fused_box();
    let frame = render_frame(&scene, &pose, &intr);
    let contact = Vec3::new(0.5, 0.0, 0.3);
    let (i, j, k) = vol.voxel_of(&contact).unwrap();
    let idx = vol.index(i, j, k);
    vol.set_voxel(idx, Voxel { label: 2, label_weight: 1, ..vol.voxel(idx) });
    let m = mark_object(Some(contact), &mut vol, &frame, &intr, &RegionParams::default()).unwrap();
    assert_eq!(m, MarkedObject { label: 2, mask: None });
    assert_eq!(
        mark_object(None, &mut vol, &frame, &intr, &RegionParams::default()),
        Err(InteractError::SegmentationFailed)
    );
    // behind the camera
    assert!(seed_from_mark(&Vec3::new(0.0, 0.0, 3.0), &pose, &intr).is_err());
    assert_eq!(
        mark_object(Some(Vec3::new(0.0, 0.0, 3.0)), &mut vol, &frame, &intr, &RegionParams::default()),
        Err(InteractError::SegmentationFailed)
    );
}

fn grid_with_wall() -> OccupancyGrid {
    let mut g = OccupancyGrid::empty(GridSpec::centered(Vec2::zeros(), 40, 0.05, 0.0));
    for j in 0..g.height() {
        let idx = g.index(30, j);
        g.cells[idx] = Cell::Occupied;
    }
    g
}

/// Largest fraction of the step in a fine sweep that keeps the footprint clear.
fn sweep_oracle(body: &VirtualBody, step: Vec2, grid: &OccupancyGrid) -> f64 {
    let n = 100_000;
    let mut last = 0.0;
    for s in 0..=n {
        let f = s as f64 / n as f64;
        let mut ob = body.as_obstacle();
        ob.position += step * f;
        if grid.footprint_hits_occupied(&ob) {
            break;
        }
        last = f;
    }
    last
}

#[test]
fn push_is_clamped_at_an_occupied_cell() {
    let grid = grid_with_wall();
    let wall_x = grid.cell_rect(30, 0).0.x;
    let ground = GroundPlane::horizontal(0.0);
    let r = 0.1;
    let mut body = VirtualBody::resting(1, BodyShape::Sphere { radius: r }, Vec2::new(wall_x - r - 0.02, 0.0), &ground, 1.0, 200.0, 0.0);
    body.velocity = Vec2::new(5.0, 0.0);
    let dt = 0.01;
    let next = push_body(&body, &Vec3::new(5.0, 5.0, 5.0), dt, Some(&grid));
    let f = sweep_oracle(&body, Vec2::new(0.05, 0.0), &grid);
    assert!((next.position.x - (body.position.x + 0.05 * f)).abs() <= 1e-5);
    assert!((next.position.x + r - wall_x).abs() <= 1e-5);
    assert_eq!(next.velocity, Vec2::zeros());
    assert_eq!(next.position.z, body.position.z);

    // unobstructed steps integrate freely
    let free = push_body(&body, &Vec3::new(5.0, 5.0, 5.0), dt, None);
    assert!((free.position.x - body.position.x - 0.05).abs() < 1e-12);
}

#[test]
fn damping_bleeds_velocity() {
    let ground = GroundPlane::horizontal(0.0);
    let mut body = VirtualBody::resting(1, BodyShape::Box { half_extents: Vec3::repeat(0.1) }, Vec2::zeros(), &ground, 2.0, 300.0, 4.0);
    assert_eq!(body.position.z, 0.1);
    body.velocity = Vec2::new(1.0, 0.0);
    let next = push_body(&body, &Vec3::new(3.0, 0.0, 0.0), 0.01, None);
    assert!((next.velocity.x - 0.98).abs() < 1e-12);
}

#[test]
fn obstacle_astride_a_path_blocks_it() {
    let ground = GroundPlane::horizontal(0.0);
    let spec = GridSpec::centered(Vec2::new(1.5, 0.0), 128, 0.05, 0.45);
    let base = OccupancyGrid::empty(spec);
    let mut set = ObstacleSet::default();
    let ob = set
        .place(&Vec3::new(1.5, 0.0, 0.4), &ground, ObstacleShape::Sphere { radius: 0.2 }, Vec2::zeros(), 0.3)
        .unwrap();
    let grid = with_obstacles(&base, &set.obstacles);
    assert!(!grid.segment_free(&Vec2::zeros(), &Vec2::new(3.0, 0.0)));
    let (i, j) = grid.cell_of(&ob.position).unwrap();
    assert!(grid.is_blocked(i, j));
}

#[test]
fn fused_box_becomes_an_obstacle() {
    let (vol, ..) = fused_box();
    let ground = GroundPlane::horizontal(0.0);
    let grid = build_occupancy(&vol, Some(&ground), &[], GridSpec::centered(Vec2::new(0.5, 0.0), 40, 0.05, 0.0)).unwrap();
    let (i, j) = grid.cell_of(&Vec2::new(0.5, 0.0)).unwrap();
    assert_eq!(grid.cell(i, j), Cell::Occupied);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn marking_invariants_hold(
        pts in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -0.05f64..0.1), 1..80),
        spacing in 0.01f64..0.3,
    ) {
        let ground = GroundPlane::horizontal(0.0);
        let contacts: Vec<Vec3> = pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
        match mark_path(&contacts, &ground, spacing, 7) {
            Ok(m) => {
                prop_assert!(m.points.iter().all(|p| p.z.abs() <= FLOOR_PROXIMITY));
                prop_assert!(m.points.windows(2).all(|w| (w[1] - w[0]).norm() >= spacing));
                // kept points appear in touch order
                let mut from = 0;
                for p in &m.points {
                    let at = contacts[from..].iter().position(|c| c == p);
                    prop_assert!(at.is_some());
                    from += at.unwrap() + 1;
                }
            }
            Err(e) => {
                prop_assert_eq!(e, InteractError::EmptyMarking);
                prop_assert!(contacts.iter().all(|c| c.z.abs() > FLOOR_PROXIMITY));
            }
        }
    }

    #[test]
    fn bodies_stay_on_the_ground(
        hx in -0.3f64..0.3, hy in -0.3f64..0.3, hz in 0.0f64..0.3,
        vx in -1.0f64..1.0, vy in -1.0f64..1.0,
        sphere in any::<bool>(), steps in 1usize..40,
    ) {
        let ground = GroundPlane::horizontal(0.0);
        let shape = if sphere { BodyShape::Sphere { radius: 0.12 } } else { BodyShape::Box { half_extents: Vec3::new(0.1, 0.08, 0.12) } };
        let mut body = VirtualBody::resting(1, shape, Vec2::zeros(), &ground, 0.5, 400.0, 1.0);
        body.velocity = Vec2::new(vx, vy);
        let z = body.position.z;
        let grid = grid_with_wall();
        for _ in 0..steps {
            body = push_body(&body, &Vec3::new(hx, hy, hz), 0.01, Some(&grid));
            prop_assert_eq!(body.position.z, z);
            prop_assert!(!grid.footprint_hits_occupied(&body.as_obstacle()));
        }
    }

    #[test]
    fn placing_then_removing_restores_the_grid(
        obs in prop::collection::vec((0.5f64..2.5, -1.0f64..1.0, 0.05f64..0.4), 1..5),
        pick in 0usize..5,
    ) {
        let ground = GroundPlane::horizontal(0.0);
        let spec = GridSpec::centered(Vec2::new(1.5, 0.0), 64, 0.05, 0.3);
        let mut set = ObstacleSet::default();
        for &(x, y, r) in &obs[..obs.len() - 1] {
            let _ = set.place(&Vec3::new(x, y, 0.3), &ground, ObstacleShape::Sphere { radius: r }, Vec2::new(-5.0, 0.0), 0.3);
        }
        let base = OccupancyGrid::empty(spec);
        let before = with_obstacles(&base, &set.obstacles);
        let (x, y, r) = obs[obs.len() - 1];
        let shape = if pick % 2 == 0 { ObstacleShape::Sphere { radius: r } } else { ObstacleShape::Box { half_extents: Vec2::new(r, r * 0.5) } };
        let placed: VirtualObstacle = set.place(&Vec3::new(x, y, 0.0), &ground, shape, Vec2::new(-5.0, 0.0), 0.3).unwrap();
        let during = with_obstacles(&base, &set.obstacles);
        let (i, j) = during.cell_of(&placed.position).unwrap();
        prop_assert!(during.is_blocked(i, j));
        set.remove(placed.id).unwrap();
        prop_assert_eq!(with_obstacles(&base, &set.obstacles), before);
    }
}
