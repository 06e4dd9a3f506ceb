use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use telehaptic_core::camera::CameraIntrinsics;
use telehaptic_core::geometry::{Aabb, RigidTransform, Vec2, Vec3};
use telehaptic_core::plan::*;
use telehaptic_core::sim::{render_frame, Scene};
use telehaptic_core::tsdf::{GroundPlane, TsdfParams, TsdfVolume};

fn fused(scene: &Scene, target: Vec3) -> TsdfVolume {
    let intr = CameraIntrinsics::default();
    let eye = |a: f64| target + Vec3::new(-a.cos(), -a.sin(), 1.0);
    let mut vol = TsdfVolume::new(TsdfParams::with_resolution(128), target - Vec3::new(0.64, 0.64, 0.3)).unwrap();
    for k in 0..8 {
        let a = k as f64 * core::f64::consts::FRAC_PI_4;
        let pose = RigidTransform::look_at(eye(a), target);
        vol.integrate_frame(&render_frame(scene, &pose, &intr), &intr).unwrap();
    }
    vol
}

fn world() -> Aabb {
    Aabb::new(Vec3::new(-5.0, -5.0, -1.0), Vec3::new(5.0, 5.0, 3.0))
}

#[test]
fn empty_floor_has_no_obstacles() {
    let vol = fused(&Scene::flat(world()), Vec3::zeros());
    let spec = GridSpec::centered(Vec2::zeros(), 24, DEFAULT_CELL_SIZE, DEFAULT_ROBOT_RADIUS);
    let grid = build_occupancy(&vol, Some(&GroundPlane::horizontal(0.0)), &[], spec).unwrap();
    assert_eq!(grid.occupied_count(), 0);
    assert!(grid.cells.iter().filter(|&&c| c == Cell::Free).count() > 24 * 24 / 2);
    assert!(grid.blocked.iter().all(|&b| !b));
    assert_eq!(build_occupancy(&vol, None, &[], spec), Err(PlanError::NoGroundPlane));
}

#[test]
fn fused_box_projects_to_its_footprint() {
    let scene = Scene::flat(world()).with_box(Vec3::new(-0.2, -0.2, 0.0), Vec3::new(0.2, 0.2, 0.3), [200, 20, 20]);
    let vol = fused(&scene, Vec3::zeros());
    let spec = GridSpec::centered(Vec2::zeros(), 24, DEFAULT_CELL_SIZE, DEFAULT_ROBOT_RADIUS);
    let grid = build_occupancy(&vol, Some(&GroundPlane::horizontal(0.0)), &[], spec).unwrap();
    let mut occ = Vec::new();
    for j in 0..24 {
        for i in 0..24 {
            if grid.cell(i, j) == Cell::Occupied {
                occ.push((i, j));
                let c = grid.cell_center(i, j);
                // within one cell of the 0.4 m footprint
                assert!(c.x.abs() <= 0.2 + 0.05 && c.y.abs() <= 0.2 + 0.05, "{c:?}");
            }
        }
    }
    // the 8×8 footprint cells are all covered
    for j in 8..16 {
        for i in 8..16 {
            assert_eq!(grid.cell(i, j), Cell::Occupied, "cell {i},{j}");
        }
    }
    assert!(occ.len() <= 10 * 10);
    // inflation ring: every cell center within robot radius of the box is blocked
    for j in 0..24 {
        for i in 0..24 {
            let c = grid.cell_center(i, j);
            let gap = Vec2::new((c.x.abs() - 0.2).max(0.0), (c.y.abs() - 0.2).max(0.0)).norm();
            if gap <= DEFAULT_ROBOT_RADIUS {
                assert!(grid.is_blocked(i, j));
            }
        }
    }
}

#[test]
fn virtual_sphere_is_inflated_by_the_robot_radius() {
    let spec = GridSpec::centered(Vec2::new(1.0, 1.0), 40, DEFAULT_CELL_SIZE, DEFAULT_ROBOT_RADIUS);
    let ob = VirtualObstacle::sphere(1, Vec2::new(1.0, 1.0), 0.2);
    let grid = with_obstacles(&OccupancyGrid::empty(spec), &[ob]);
    for j in 0..40 {
        for i in 0..40 {
            let d = (grid.cell_center(i, j) - Vec2::new(1.0, 1.0)).norm();
            if d <= 0.2 {
                assert_eq!(grid.cell(i, j), Cell::Occupied);
            }
            if d <= 0.5 {
                assert!(grid.is_blocked(i, j));
            }
            if d > 0.5 + 2.0 * DEFAULT_CELL_SIZE {
                assert!(!grid.is_blocked(i, j), "{i},{j} at {d}");
            }
        }
    }
}

fn open_grid() -> OccupancyGrid {
    OccupancyGrid::empty(GridSpec::centered(Vec2::new(1.5, 0.0), 128, DEFAULT_CELL_SIZE, DEFAULT_ROBOT_RADIUS))
}

#[test]
fn straight_run_is_near_optimal() {
    let grid = open_grid();
    let plan = rrt_plan(&grid, Vec2::zeros(), Vec2::new(3.0, 0.0), &RrtParams::default()).unwrap();
    assert!(plan.cost <= 1.2 * 3.0, "cost {}", plan.cost);
    assert_eq!(plan.waypoints[0], Vec2::zeros());
    assert_eq!(*plan.waypoints.last().unwrap(), Vec2::new(3.0, 0.0));
}

#[test]
fn replanning_around_a_dropped_obstacle() {
    let grid = open_grid();
    let params = RrtParams::default();
    let plan = rrt_plan(&grid, Vec2::zeros(), Vec2::new(3.0, 0.0), &params).unwrap();

    let far = VirtualObstacle::sphere(1, Vec2::new(1.5, 2.5), 0.2);
    let r = replan_if_blocked(&plan, 1, &with_obstacles(&grid, &[far]), Vec2::zeros(), &params, &NullClock).unwrap();
    assert!(!r.replanned);
    assert_eq!(r.plan, plan);

    let on_path = VirtualObstacle::sphere(2, Vec2::new(1.5, 0.0), 0.2);
    let blocked = with_obstacles(&grid, &[on_path]);
    let r = replan_if_blocked(&plan, 1, &blocked, Vec2::zeros(), &params, &NullClock).unwrap();
    assert!(r.replanned);
    assert!(path_clearance(&r.plan.waypoints, &[on_path], 0.01) >= DEFAULT_ROBOT_RADIUS);
    assert!(r.plan.waypoints.windows(2).all(|w| blocked.segment_free(&w[0], &w[1])));
}

#[test]
fn sealed_corridor_is_unreachable() {
    let grid = open_grid();
    let params = RrtParams {
        max_iters: 3000,
        ..RrtParams::default()
    };
    let plan = rrt_plan(&grid, Vec2::zeros(), Vec2::new(3.0, 0.0), &params).unwrap();
    // a wall of boxes across the whole grid at x = 1.5
    let wall = VirtualObstacle {
        id: 9,
        shape: ObstacleShape::Box {
            half_extents: Vec2::new(0.05, 4.0),
        },
        position: Vec2::new(1.5, 0.0),
    };
    let sealed = with_obstacles(&grid, &[wall]);
    assert_eq!(
        replan_if_blocked(&plan, 1, &sealed, Vec2::zeros(), &params, &NullClock),
        Err(PlanError::Unreachable)
    );
}

/// Cells whose closed square meets the segment, by brute force.
fn touched(grid: &OccupancyGrid, a: &Vec2, b: &Vec2) -> Vec<(isize, isize)> {
    let mut out = Vec::new();
    let s = grid.spec.cell_size;
    for j in -2..grid.height() as isize + 2 {
        for i in -2..grid.width() as isize + 2 {
            let lo = grid.spec.origin + Vec2::new(i as f64, j as f64) * s;
            let hi = lo + Vec2::repeat(s);
            // clip the segment against the square (Liang–Barsky)
            let d = b - a;
            let (mut t0, mut t1) = (0.0f64, 1.0f64);
            let mut ok = true;
            for k in 0..2 {
                if d[k].abs() < 1e-15 {
                    if a[k] < lo[k] || a[k] > hi[k] {
                        ok = false;
                    }
                } else {
                    let (mut ta, mut tb) = ((lo[k] - a[k]) / d[k], (hi[k] - a[k]) / d[k]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
            }
            // strictly inside, away from shared edges
            if ok && t1 - t0 > 1e-9 {
                out.push((i, j));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn supercover_contains_every_crossed_cell(
        ax in -0.9f64..0.9, ay in -0.9f64..0.9, bx in -0.9f64..0.9, by in -0.9f64..0.9,
    ) {
        let grid = OccupancyGrid::empty(GridSpec::centered(Vec2::zeros(), 20, 0.1, 0.0));
        let (a, b) = (Vec2::new(ax, ay), Vec2::new(bx, by));
        let cover = grid.supercover(&a, &b);
        for c in touched(&grid, &a, &b) {
            prop_assert!(cover.contains(&c), "missing {:?}", c);
        }
    }

    #[test]
    fn plans_are_free_deterministic_and_smoothing_never_lengthens(
        seed in 0u64..1000,
        obstacles in prop::collection::vec((0.5f64..2.5, -1.0f64..1.0, 0.05f64..0.25), 0..4),
    ) {
        let obs: Vec<_> = obstacles
            .iter()
            .enumerate()
            .map(|(i, &(x, y, r))| VirtualObstacle::sphere(i as u32, Vec2::new(x, y), r))
            .collect();
        let grid = with_obstacles(&open_grid(), &obs);
        let start = Vec2::new(-0.5, 0.0);
        let goal = Vec2::new(3.2, 0.1);
        prop_assume!(grid.point_free(&start) && grid.point_free(&goal));
        let params = RrtParams { seed, ..RrtParams::default() };
        let Ok(plan) = rrt_plan(&grid, start, goal, &params) else { return Ok(()) };
        prop_assert_eq!(&plan, &rrt_plan(&grid, start, goal, &params).unwrap());
        for w in plan.waypoints.windows(2) {
            prop_assert!(grid.segment_free(&w[0], &w[1]));
            prop_assert!((w[1] - w[0]).norm() <= 2.0 * params.step + 1e-9);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = rrt_tree(&grid, start, goal, &params, &mut rng);
        let raw = tree_path(&tree, tree.goal.unwrap());
        let smooth = shortcut(&grid, &raw, 100, &mut rng);
        prop_assert!(path_length(&smooth) <= path_length(&raw) + 1e-9);
        prop_assert!((path_length(&densify(&smooth, 0.15)) - path_length(&smooth)).abs() < 1e-9);
    }

    #[test]
    fn inflation_contains_raw_occupancy(
        obstacles in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.01f64..0.3), 0..5),
        inflation in 0.0f64..0.4,
    ) {
        let spec = GridSpec::centered(Vec2::zeros(), 40, 0.05, inflation);
        let obs: Vec<_> = obstacles
            .iter()
            .enumerate()
            .map(|(i, &(x, y, r))| VirtualObstacle::sphere(i as u32, Vec2::new(x, y), r))
            .collect();
        let grid = with_obstacles(&OccupancyGrid::empty(spec), &obs);
        for (c, b) in grid.cells.iter().zip(&grid.blocked) {
            prop_assert!(*c != Cell::Occupied || *b);
        }
        // any point of a free cell is at least the inflation radius from every footprint
        for j in 0..40 {
            for i in 0..40 {
                if !grid.is_blocked(i, j) {
                    let (lo, hi) = grid.cell_rect(i, j);
                    for p in [lo, hi, Vec2::new(lo.x, hi.y), Vec2::new(hi.x, lo.y), grid.cell_center(i, j)] {
                        for ob in &obs {
                            prop_assert!(ob.distance(&p) >= inflation - 1e-9);
                        }
                    }
                }
            }
        }
    }
}
