//! Ground-plane occupancy grids, RRT planning with shortcut smoothing, and
//! replanning when the active path becomes blocked.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Vec2, Vec3};
use crate::tsdf::{GroundPlane, TsdfVolume};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub const DEFAULT_CELL_SIZE: f64 = 0.05;
pub const DEFAULT_ROBOT_RADIUS: f64 = 0.30;
/// Height band above the ground whose surfaces count as obstacles.
pub const OBSTACLE_BAND: (f64, f64) = (0.05, 0.60);

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("no ground plane")]
    NoGroundPlane,
    #[error("start is blocked")]
    StartOccupied,
    #[error("goal is blocked")]
    GoalOccupied,
    #[error("goal unreachable within the iteration budget")]
    Unreachable,
    #[error("empty plan")]
    EmptyPlan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum Cell {
    Free,
    Occupied,
    Unknown,
}

/// Placement and size of a grid; axes are world x and y.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GridSpec {
    pub origin: Vec2,
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    pub inflation: f64,
}

impl GridSpec {
    /// Square grid of `cells` per side centered on `center`.
    pub fn centered(center: Vec2, cells: usize, cell_size: f64, inflation: f64) -> Self {
        let half = cells as f64 * cell_size / 2.0;
        Self {
            origin: center - Vec2::new(half, half),
            cell_size,
            width: cells,
            height: cells,
            inflation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum ObstacleShape {
    Sphere { radius: f64 },
    Box { half_extents: Vec2 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct VirtualObstacle {
    pub id: u32,
    pub shape: ObstacleShape,
    pub position: Vec2,
}

impl VirtualObstacle {
    pub fn sphere(id: u32, position: Vec2, radius: f64) -> Self {
        Self {
            id,
            shape: ObstacleShape::Sphere { radius },
            position,
        }
    }

    /// Radius of the smallest disc around `position` covering the footprint.
    pub fn footprint_radius(&self) -> f64 {
        match self.shape {
            ObstacleShape::Sphere { radius } => radius,
            ObstacleShape::Box { half_extents } => half_extents.norm(),
        }
    }

    /// Distance from a ground point to the footprint (0 inside).
    pub fn distance(&self, p: &Vec2) -> f64 {
        let d = p - self.position;
        match self.shape {
            ObstacleShape::Sphere { radius } => (d.norm() - radius).max(0.0),
            ObstacleShape::Box { half_extents } => {
                let q = Vec2::new((d.x.abs() - half_extents.x).max(0.0), (d.y.abs() - half_extents.y).max(0.0));
                q.norm()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    /// Observed state before inflation.
    pub cells: Vec<Cell>,
    /// Cells the robot center may not enter.
    pub blocked: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(spec: GridSpec) -> Self {
        let n = spec.width * spec.height;
        Self {
            spec,
            cells: vec![Cell::Unknown; n],
            blocked: vec![false; n],
        }
    }

    /// All cells observed free.
    pub fn empty(spec: GridSpec) -> Self {
        let mut g = Self::new(spec);
        g.cells.iter_mut().for_each(|c| *c = Cell::Free);
        g
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.spec.width + i
    }

    pub fn cell_of(&self, p: &Vec2) -> Option<(usize, usize)> {
        let q = (p - self.spec.origin) / self.spec.cell_size;
        let (i, j) = (q.x.floor(), q.y.floor());
        if i < 0.0 || j < 0.0 || i >= self.spec.width as f64 || j >= self.spec.height as f64 {
            return None;
        }
        Some((i as usize, j as usize))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        self.spec.origin + Vec2::new(i as f64 + 0.5, j as f64 + 0.5) * self.spec.cell_size
    }

    /// Lower and upper corner of a cell.
    pub fn cell_rect(&self, i: usize, j: usize) -> (Vec2, Vec2) {
        let lo = self.spec.origin + Vec2::new(i as f64, j as f64) * self.spec.cell_size;
        (lo, lo + Vec2::repeat(self.spec.cell_size))
    }

    pub fn cell(&self, i: usize, j: usize) -> Cell {
        self.cells[self.index(i, j)]
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[self.index(i, j)]
    }

    /// A point outside the grid counts as blocked.
    pub fn point_free(&self, p: &Vec2) -> bool {
        self.cell_of(p).is_some_and(|(i, j)| !self.is_blocked(i, j))
    }

    /// Center of the unblocked cell nearest to `p`, ties to the lower index.
    pub fn nearest_free(&self, p: &Vec2) -> Option<Vec2> {
        let mut best: Option<(f64, Vec2)> = None;
        for j in 0..self.height() {
            for i in 0..self.width() {
                if self.is_blocked(i, j) {
                    continue;
                }
                let c = self.cell_center(i, j);
                let d = (c - p).norm_squared();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, c));
                }
            }
        }
        best.map(|(_, c)| c)
    }

    /// Marks every cell whose square meets the obstacle footprint.
    pub fn rasterize_obstacle(&mut self, ob: &VirtualObstacle) {
        let r = ob.footprint_radius();
        let lo = self.cell_of_clamped(&(ob.position - Vec2::repeat(r)));
        let hi = self.cell_of_clamped(&(ob.position + Vec2::repeat(r)));
        for j in lo.1..=hi.1 {
            for i in lo.0..=hi.0 {
                let (a, b) = self.cell_rect(i, j);
                if rect_distance_to_obstacle(&a, &b, ob) <= 0.0 {
                    let idx = self.index(i, j);
                    self.cells[idx] = Cell::Occupied;
                }
            }
        }
    }

    /// True when the footprint overlaps any occupied cell.
    pub fn footprint_hits_occupied(&self, ob: &VirtualObstacle) -> bool {
        let r = ob.footprint_radius();
        let lo = self.cell_of_clamped(&(ob.position - Vec2::repeat(r)));
        let hi = self.cell_of_clamped(&(ob.position + Vec2::repeat(r)));
        (lo.1..=hi.1).any(|j| {
            (lo.0..=hi.0).any(|i| {
                let (a, b) = self.cell_rect(i, j);
                self.cell(i, j) == Cell::Occupied && rect_distance_to_obstacle(&a, &b, ob) <= 0.0
            })
        })
    }

    fn cell_of_clamped(&self, p: &Vec2) -> (usize, usize) {
        let q = (p - self.spec.origin) / self.spec.cell_size;
        let clamp = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
        (clamp(q.x, self.spec.width), clamp(q.y, self.spec.height))
    }

    /// Recomputes `blocked`: a cell is blocked when it is occupied or its
    /// square comes closer than the inflation radius to an occupied square.
    pub fn inflate(&mut self) {
        let s = self.spec.cell_size;
        let r = self.spec.inflation;
        let reach = (r / s).ceil() as isize + 1;
        let (w, h) = (self.spec.width as isize, self.spec.height as isize);
        self.blocked.iter_mut().for_each(|b| *b = false);
        for j in 0..h {
            for i in 0..w {
                if self.cells[(j * w + i) as usize] != Cell::Occupied {
                    continue;
                }
                for dj in -reach..=reach {
                    for di in -reach..=reach {
                        let (x, y) = (i + di, j + dj);
                        if x < 0 || y < 0 || x >= w || y >= h {
                            continue;
                        }
                        // gap between two squares `di`, `dj` cells apart
                        let gx = (di.abs() - 1).max(0) as f64 * s;
                        let gy = (dj.abs() - 1).max(0) as f64 * s;
                        if (di == 0 && dj == 0) || gx * gx + gy * gy < r * r {
                            self.blocked[(y * w + x) as usize] = true;
                        }
                    }
                }
            }
        }
    }

    /// Cells crossed by the segment `a → b`, corners included.
    pub fn supercover(&self, a: &Vec2, b: &Vec2) -> Vec<(isize, isize)> {
        let s = self.spec.cell_size;
        let pa = (a - self.spec.origin) / s;
        let pb = (b - self.spec.origin) / s;
        let mut out = Vec::new();
        let (mut i, mut j) = (pa.x.floor() as isize, pa.y.floor() as isize);
        let (ei, ej) = (pb.x.floor() as isize, pb.y.floor() as isize);
        let d = pb - pa;
        let step_i: isize = if d.x > 0.0 { 1 } else { -1 };
        let step_j: isize = if d.y > 0.0 { 1 } else { -1 };
        let next_boundary = |p: f64, cell: isize, step: isize| if step > 0 { (cell + 1) as f64 - p } else { p - cell as f64 };
        let mut t_max_x = if d.x != 0.0 { next_boundary(pa.x, i, step_i) / d.x.abs() } else { f64::INFINITY };
        let mut t_max_y = if d.y != 0.0 { next_boundary(pa.y, j, step_j) / d.y.abs() } else { f64::INFINITY };
        let t_dx = if d.x != 0.0 { 1.0 / d.x.abs() } else { f64::INFINITY };
        let t_dy = if d.y != 0.0 { 1.0 / d.y.abs() } else { f64::INFINITY };
        out.push((i, j));
        let mut remaining = (ei - i).abs() + (ej - j).abs();
        while remaining > 0 {
            if (t_max_x - t_max_y).abs() < 1e-12 && remaining >= 2 {
                // passes through a corner: include both side cells
                out.push((i + step_i, j));
                out.push((i, j + step_j));
                i += step_i;
                j += step_j;
                t_max_x += t_dx;
                t_max_y += t_dy;
                remaining -= 2;
            } else if t_max_x < t_max_y {
                i += step_i;
                t_max_x += t_dx;
                remaining -= 1;
            } else {
                j += step_j;
                t_max_y += t_dy;
                remaining -= 1;
            }
            out.push((i, j));
        }
        out
    }

    /// True when every cell touched by the segment is inside the grid and
    /// not blocked.
    pub fn segment_free(&self, a: &Vec2, b: &Vec2) -> bool {
        let (w, h) = (self.spec.width as isize, self.spec.height as isize);
        self.supercover(a, b)
            .into_iter()
            .all(|(i, j)| i >= 0 && j >= 0 && i < w && j < h && !self.blocked[(j * w + i) as usize])
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == Cell::Occupied).count()
    }
}

fn rect_distance_to_obstacle(lo: &Vec2, hi: &Vec2, ob: &VirtualObstacle) -> f64 {
    let c = ob.position;
    match ob.shape {
        ObstacleShape::Sphere { radius } => {
            let q = Vec2::new(c.x.clamp(lo.x, hi.x), c.y.clamp(lo.y, hi.y));
            (q - c).norm() - radius
        }
        ObstacleShape::Box { half_extents } => {
            let gx = (lo.x - (c.x + half_extents.x)).max((c.x - half_extents.x) - hi.x).max(0.0);
            let gy = (lo.y - (c.y + half_extents.y)).max((c.y - half_extents.y) - hi.y).max(0.0);
            if gx == 0.0 && gy == 0.0 {
                0.0
            } else {
                (gx * gx + gy * gy).sqrt()
            }
        }
    }
}

/// Occupancy from fused surfaces plus virtual obstacles, then inflated.
pub fn build_occupancy(
    volume: &TsdfVolume,
    ground: Option<&GroundPlane>,
    obstacles: &[VirtualObstacle],
    spec: GridSpec,
) -> Result<OccupancyGrid, PlanError> {
    let ground = ground.ok_or(PlanError::NoGroundPlane)?;
    let mut grid = OccupancyGrid::new(spec);
    for sp in volume.surface_points(volume.voxel_size()) {
        let h = ground.height_of(&sp.position);
        let foot = ground.project_vertically(&sp.position);
        let Some((i, j)) = grid.cell_of(&Vec2::new(foot.x, foot.y)) else { continue };
        let idx = grid.index(i, j);
        if (OBSTACLE_BAND.0..=OBSTACLE_BAND.1).contains(&h) {
            grid.cells[idx] = Cell::Occupied;
        } else if h < OBSTACLE_BAND.0 && grid.cells[idx] == Cell::Unknown {
            grid.cells[idx] = Cell::Free;
        }
    }
    for ob in obstacles {
        grid.rasterize_obstacle(ob);
    }
    grid.inflate();
    Ok(grid)
}

/// Grid from an already observed base plus obstacles; the base's occupied
/// cells are kept.
pub fn with_obstacles(base: &OccupancyGrid, obstacles: &[VirtualObstacle]) -> OccupancyGrid {
    let mut g = base.clone();
    for ob in obstacles {
        g.rasterize_obstacle(ob);
    }
    g.inflate();
    g
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PathPlan {
    pub waypoints: Vec<Vec2>,
    pub created_at_ms: u64,
    pub cost: f64,
}

impl PathPlan {
    pub fn from_waypoints(waypoints: Vec<Vec2>, created_at_ms: u64) -> Self {
        let cost = path_length(&waypoints);
        Self {
            waypoints,
            created_at_ms,
            cost,
        }
    }

    pub fn goal(&self) -> Option<Vec2> {
        self.waypoints.last().copied()
    }
}

pub fn path_length(pts: &[Vec2]) -> f64 {
    pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RrtParams {
    pub step: f64,
    pub goal_bias: f64,
    pub max_iters: usize,
    pub smoothing_attempts: usize,
    pub seed: u64,
}

impl Default for RrtParams {
    fn default() -> Self {
        Self {
            step: 0.15,
            goal_bias: 0.05,
            max_iters: 20_000,
            smoothing_attempts: 100,
            seed: 1,
        }
    }
}

/// Tree produced by [`rrt_tree`]: node positions and parent links.
#[derive(Clone, Debug, PartialEq)]
pub struct RrtTree {
    pub nodes: Vec<Vec2>,
    pub parents: Vec<usize>,
    /// Index of the goal node, if reached.
    pub goal: Option<usize>,
}

/// Grows the tree from `start` until the goal is connected.
pub fn rrt_tree(grid: &OccupancyGrid, start: Vec2, goal: Vec2, params: &RrtParams, rng: &mut ChaCha8Rng) -> RrtTree {
    let mut tree = RrtTree {
        nodes: vec![start],
        parents: vec![0],
        goal: None,
    };
    let lo = grid.spec.origin;
    let size = Vec2::new(grid.spec.width as f64, grid.spec.height as f64) * grid.spec.cell_size;
    if (goal - start).norm() <= params.step && grid.segment_free(&start, &goal) {
        tree.nodes.push(goal);
        tree.parents.push(0);
        tree.goal = Some(1);
        return tree;
    }
    for _ in 0..params.max_iters {
        let sample = if rng.random::<f64>() < params.goal_bias {
            goal
        } else {
            lo + Vec2::new(rng.random::<f64>() * size.x, rng.random::<f64>() * size.y)
        };
        let (near, d2) = tree
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, (n - sample).norm_squared()))
            .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
        let from = tree.nodes[near];
        let d = d2.sqrt();
        if d < 1e-12 {
            continue;
        }
        let new = if d <= params.step { sample } else { from + (sample - from) * (params.step / d) };
        if !grid.segment_free(&from, &new) {
            continue;
        }
        tree.nodes.push(new);
        tree.parents.push(near);
        let ni = tree.nodes.len() - 1;
        if (goal - new).norm() <= params.step && grid.segment_free(&new, &goal) {
            if (goal - new).norm() > 0.0 {
                tree.nodes.push(goal);
                tree.parents.push(ni);
            }
            tree.goal = Some(tree.nodes.len() - 1);
            break;
        }
    }
    tree
}

/// Root-to-node path through the tree.
pub fn tree_path(tree: &RrtTree, node: usize) -> Vec<Vec2> {
    let mut out = vec![tree.nodes[node]];
    let mut i = node;
    while i != 0 {
        i = tree.parents[i];
        out.push(tree.nodes[i]);
    }
    out.reverse();
    out
}

/// Random shortcutting: each attempt replaces the sub-path between two
/// random waypoints by a straight segment when that segment is free.
pub fn shortcut(grid: &OccupancyGrid, path: &[Vec2], attempts: usize, rng: &mut ChaCha8Rng) -> Vec<Vec2> {
    let mut p = path.to_vec();
    for _ in 0..attempts {
        if p.len() < 3 {
            break;
        }
        let a = rng.random_range(0..p.len());
        let b = rng.random_range(0..p.len());
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        if j < i + 2 {
            continue;
        }
        if grid.segment_free(&p[i], &p[j]) {
            p.drain(i + 1..j);
        }
    }
    p
}

/// Inserts collinear points so no segment is longer than `max_len`.
pub fn densify(path: &[Vec2], max_len: f64) -> Vec<Vec2> {
    let Some(first) = path.first() else { return Vec::new() };
    let mut out = vec![*first];
    for w in path.windows(2) {
        let d = (w[1] - w[0]).norm();
        let n = (d / max_len).ceil().max(1.0) as usize;
        for k in 1..n {
            out.push(w[0] + (w[1] - w[0]) * (k as f64 / n as f64));
        }
        out.push(w[1]);
    }
    out
}

/// Plans from `start` to `goal`; waypoints end exactly at `goal`.
pub fn rrt_plan(grid: &OccupancyGrid, start: Vec2, goal: Vec2, params: &RrtParams) -> Result<PathPlan, PlanError> {
    if !grid.point_free(&start) {
        return Err(PlanError::StartOccupied);
    }
    if !grid.point_free(&goal) {
        return Err(PlanError::GoalOccupied);
    }
    if start == goal {
        return Ok(PathPlan::from_waypoints(vec![start], 0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let tree = rrt_tree(grid, start, goal, params, &mut rng);
    let node = tree.goal.ok_or(PlanError::Unreachable)?;
    let raw = tree_path(&tree, node);
    let smooth = shortcut(grid, &raw, params.smoothing_attempts, &mut rng);
    Ok(PathPlan::from_waypoints(densify(&smooth, params.step), 0))
}

/// Source of elapsed seconds for timing replans.
pub trait Clock {
    fn now_s(&self) -> f64;
}

/// Clock that always reads zero, for deterministic runs.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now_s(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Replan {
    pub plan: PathPlan,
    pub replanned: bool,
    /// Seconds spent replanning, measured by the supplied clock.
    pub elapsed_s: f64,
}

/// Checks the remaining path (robot → `next` waypoint → … → goal) against
/// `grid` and replans from the robot pose when any segment is blocked.
pub fn replan_if_blocked(
    plan: &PathPlan,
    next: usize,
    grid: &OccupancyGrid,
    robot: Vec2,
    params: &RrtParams,
    clock: &dyn Clock,
) -> Result<Replan, PlanError> {
    let goal = plan.goal().ok_or(PlanError::EmptyPlan)?;
    let next = next.min(plan.waypoints.len() - 1);
    let mut remaining = vec![robot];
    remaining.extend_from_slice(&plan.waypoints[next..]);
    let blocked = remaining.windows(2).any(|w| !grid.segment_free(&w[0], &w[1]));
    if !blocked {
        return Ok(Replan {
            plan: plan.clone(),
            replanned: false,
            elapsed_s: 0.0,
        });
    }
    let t0 = clock.now_s();
    let new = rrt_plan(grid, robot, goal, params)?;
    let elapsed_s = clock.now_s() - t0;
    Ok(Replan {
        plan: PathPlan {
            created_at_ms: plan.created_at_ms,
            ..new
        },
        replanned: true,
        elapsed_s,
    })
}

/// Smallest distance from points along `path` (sampled every `ds` meters)
/// to any obstacle footprint.
pub fn path_clearance(path: &[Vec2], obstacles: &[VirtualObstacle], ds: f64) -> f64 {
    let mut best = f64::INFINITY;
    let mut visit = |p: Vec2| {
        for ob in obstacles {
            best = best.min(ob.distance(&p));
        }
    };
    if let Some(p) = path.first() {
        visit(*p);
    }
    for w in path.windows(2) {
        let n = ((w[1] - w[0]).norm() / ds).ceil().max(1.0) as usize;
        for k in 1..=n {
            visit(w[0] + (w[1] - w[0]) * (k as f64 / n as f64));
        }
    }
    best
}

pub fn to_ground(p: &Vec3) -> Vec2 {
    Vec2::new(p.x, p.y)
}
