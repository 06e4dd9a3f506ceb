//! Execution-layer control: task parsing, goal selection between marking and
//! path points, the linear velocity predictor used to compensate round-trip
//! delay, the robot-side trajectory controller and run metrics.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::geometry::{wrap_angle, Vec2, Vec3};
use crate::plan::{replan_if_blocked, rrt_plan, Clock, OccupancyGrid, PathPlan, PlanError, RrtParams};
use crate::segment::{object_extent, SegmentError};
use crate::sim::{Pose2, VelocityCommand, DEFAULT_V_MAX, TURN_QUANTUM};
use crate::tsdf::{GroundPlane, TsdfVolume};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_RIDGE: f64 = 1e-8;
pub const ARRIVAL_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ControlError {
    #[error("no goal candidates")]
    NoCandidates,
    #[error("history too short: need {need}, have {have}")]
    InsufficientHistory { need: usize, have: usize },
    #[error("negative delay")]
    NegativeDelay,
    #[error("label {0} was never segmented")]
    UnknownLabel(u16),
    #[error("empty marking")]
    EmptyMarking,
    #[error("planning failed: {0}")]
    Plan(#[from] PlanError),
}

impl From<SegmentError> for ControlError {
    fn from(e: SegmentError) -> Self {
        match e {
            SegmentError::UnknownLabel(l) => ControlError::UnknownLabel(l),
            _ => ControlError::UnknownLabel(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum TaskKind {
    ApproachPoint(Vec2),
    ApproachObject { label: u16, goal: Vec2 },
    FollowPath(Vec<Vec2>),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Task {
    pub kind: TaskKind,
    pub created_at_ms: u64,
}

impl Task {
    /// Final ground point of the task.
    pub fn goal(&self) -> Option<Vec2> {
        match &self.kind {
            TaskKind::ApproachPoint(p) => Some(*p),
            TaskKind::ApproachObject { goal, .. } => Some(*goal),
            TaskKind::FollowPath(pts) => pts.last().copied(),
        }
    }

    /// Marking points the goal selector may prefer over path points.
    pub fn marking(&self) -> &[Vec2] {
        match &self.kind {
            TaskKind::FollowPath(pts) => pts,
            _ => &[],
        }
    }
}

/// Interface outcomes that reach the task layer.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskEvent {
    MarkedPoint(Vec3),
    MarkedObject(u16),
    MarkedPath(Vec<Vec3>),
    ObstaclesChanged,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Parsed {
    Task(Task),
    /// The active plan must be checked against the new occupancy.
    Replan,
}

pub fn parse_task(
    event: &TaskEvent,
    volume: &TsdfVolume,
    ground: &GroundPlane,
    now_ms: u64,
) -> Result<Parsed, ControlError> {
    let ground_xy = |p: &Vec3| {
        let q = ground.project_vertically(p);
        Vec2::new(q.x, q.y)
    };
    let kind = match event {
        TaskEvent::ObstaclesChanged => return Ok(Parsed::Replan),
        TaskEvent::MarkedPoint(p) => TaskKind::ApproachPoint(ground_xy(p)),
        TaskEvent::MarkedObject(label) => {
            let e = object_extent(volume, *label)?;
            TaskKind::ApproachObject {
                label: *label,
                goal: ground_xy(&e.centroid),
            }
        }
        TaskEvent::MarkedPath(points) => {
            if points.is_empty() {
                return Err(ControlError::EmptyMarking);
            }
            TaskKind::FollowPath(points.iter().map(ground_xy).collect())
        }
    };
    Ok(Parsed::Task(Task {
        kind,
        created_at_ms: now_ms,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum GoalSelection {
    /// The candidate farther from the robot wins.
    #[default]
    MaximalDistance,
    /// The candidate nearer to the robot wins.
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum GoalSource {
    Marking,
    PlannedPath,
}

/// Chooses between the marking point and the path point. Ties go to the
/// path point.
pub fn select_goal(
    marking: Option<Vec2>,
    path: Option<Vec2>,
    robot: Vec2,
    rule: GoalSelection,
) -> Result<(Vec2, GoalSource), ControlError> {
    match (marking, path) {
        (None, None) => Err(ControlError::NoCandidates),
        (Some(m), None) => Ok((m, GoalSource::Marking)),
        (None, Some(p)) => Ok((p, GoalSource::PlannedPath)),
        (Some(m), Some(p)) => {
            let dm = (m - robot).norm();
            let dp = (p - robot).norm();
            let marking_wins = match rule {
                GoalSelection::MaximalDistance => dm > dp,
                GoalSelection::Nearest => dm < dp,
            };
            Ok(if marking_wins {
                (m, GoalSource::Marking)
            } else {
                (p, GoalSource::PlannedPath)
            })
        }
    }
}

/// Per-step velocity `(a, b, c)`: world x and y rates and heading rate.
pub type Velocity3 = Vec3;

/// Linear one-step velocity predictor, one coefficient vector per axis.
///
/// Coefficient `k` multiplies the `k`-th oldest sample of the newest window,
/// so `coeffs[m]` weights the latest velocity.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PredictorModel {
    pub window: usize,
    pub ridge: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl PredictorModel {
    pub fn zero(window: usize, ridge: f64) -> Self {
        Self {
            window,
            ridge,
            alpha: vec![0.0; window + 1],
            beta: vec![0.0; window + 1],
            gamma: vec![0.0; window + 1],
        }
    }

    pub fn taps(&self) -> usize {
        self.window + 1
    }

    /// Next velocity from the newest `window + 1` samples of `history`.
    pub fn predict(&self, history: &[Velocity3]) -> Velocity3 {
        let n = self.taps();
        if history.len() < n {
            return history.last().copied().unwrap_or_else(Vec3::zeros);
        }
        let recent = &history[history.len() - n..];
        let dot = |c: &[f64], axis: usize| c.iter().zip(recent).map(|(w, v)| w * v[axis]).sum::<f64>();
        Vec3::new(dot(&self.alpha, 0), dot(&self.beta, 1), dot(&self.gamma, 2))
    }
}

/// Refinement sweeps applied after the first regularized solve.
const REFINEMENT_SWEEPS: usize = 3;

/// Least squares for one axis: rows `(x_j … x_{j+m})`, targets `x_{j+m+1}`.
pub fn fit_axis(series: &[f64], window: usize, ridge: f64) -> Vec<f64> {
    let taps = window + 1;
    if series.len() < taps + 1 || series.iter().all(|&x| x == 0.0) {
        return vec![0.0; taps];
    }
    let rows = series.len() - taps;
    let v = DMatrix::from_fn(rows, taps, |r, c| series[r + c]);
    let y = DVector::from_fn(rows, |r, _| series[r + taps]);
    let vtv = v.transpose() * &v;
    let vty = v.transpose() * &y;
    let mut reg = vtv.clone();
    for i in 0..taps {
        reg[(i, i)] += ridge;
    }
    let Some(chol) = reg.cholesky() else {
        return vec![0.0; taps];
    };
    // iterated regularization: each sweep solves for the residual of the
    // unregularized normal equations
    let mut x = chol.solve(&vty);
    for _ in 0..REFINEMENT_SWEEPS {
        let r = &vty - &vtv * &x;
        x += chol.solve(&r);
    }
    if x.iter().any(|c| !c.is_finite()) {
        return vec![0.0; taps];
    }
    x.iter().copied().collect()
}

/// Fits α, β, γ on a velocity history of at least `window + 2` samples.
pub fn fit_predictor(history: &[Velocity3], window: usize, ridge: f64) -> Result<PredictorModel, ControlError> {
    let need = window + 2;
    if history.len() < need {
        return Err(ControlError::InsufficientHistory {
            need,
            have: history.len(),
        });
    }
    let axis = |k: usize| history.iter().map(|v| v[k]).collect::<Vec<_>>();
    Ok(PredictorModel {
        window,
        ridge,
        alpha: fit_axis(&axis(0), window, ridge),
        beta: fit_axis(&axis(1), window, ridge),
        gamma: fit_axis(&axis(2), window, ridge),
    })
}

/// `x + v·t` in the ground plane.
pub fn predict_goal(goal: Vec2, velocity: &Velocity3, delay_s: f64) -> Result<Vec2, ControlError> {
    if delay_s < 0.0 || delay_s.is_nan() {
        return Err(ControlError::NegativeDelay);
    }
    Ok(goal + Vec2::new(velocity.x, velocity.y) * delay_s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TrajectoryParams {
    pub kp: f64,
    pub v_max: f64,
    pub tolerance: f64,
    /// Turn toward the direction of travel in 45° steps.
    pub face_travel: bool,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            kp: 1.0,
            v_max: DEFAULT_V_MAX,
            tolerance: ARRIVAL_TOLERANCE,
            face_travel: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryOutput {
    pub command: VelocityCommand,
    pub arrived: bool,
}

/// Holonomic proportional step toward `goal`, expressed in the robot frame.
pub fn trajectory_step(pose: &Pose2, goal: Vec2, params: &TrajectoryParams) -> TrajectoryOutput {
    let err = goal - Vec2::new(pose.x, pose.y);
    let dist = err.norm();
    if dist <= params.tolerance {
        return TrajectoryOutput {
            command: VelocityCommand::default(),
            arrived: true,
        };
    }
    let mut v = err * params.kp;
    if v.norm() > params.v_max {
        v *= params.v_max / v.norm();
    }
    let (s, c) = pose.theta.sin_cos();
    let (vx, vy) = (c * v.x + s * v.y, -s * v.x + c * v.y);
    let mut omega = 0.0;
    if params.face_travel {
        let off = wrap_angle(err.y.atan2(err.x) - pose.theta);
        if off.abs() > TURN_QUANTUM / 2.0 + 1e-9 {
            omega = off.signum();
        }
    }
    TrajectoryOutput {
        command: VelocityCommand::new(vx, vy, omega),
        arrived: false,
    }
}

/// Mean, population standard deviation, max and min.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub min: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Option<Stats> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(Stats {
            mean,
            std: var.sqrt(),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            count: xs.len(),
        })
    }
}

/// Raw per-run measurements.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub planning_s: Vec<f64>,
    pub replanning_s: Vec<f64>,
    pub start_ms: u64,
    pub end_ms: Option<u64>,
    /// Odometry positions in visit order.
    pub odometry: Vec<Vec2>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunMetrics {
    pub tp: Option<Stats>,
    pub tr: Option<Stats>,
    pub te: f64,
    pub lp: f64,
    pub complete: bool,
}

pub fn record_metrics(log: &RunLog, last_ms: u64) -> RunMetrics {
    let end = log.end_ms.unwrap_or(last_ms);
    RunMetrics {
        tp: Stats::of(&log.planning_s),
        tr: Stats::of(&log.replanning_s),
        te: end.saturating_sub(log.start_ms) as f64 / 1000.0,
        lp: crate::plan::path_length(&log.odometry),
        complete: log.end_ms.is_some(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExecutiveParams {
    pub selection: GoalSelection,
    /// A waypoint counts as passed once the robot estimate is this close.
    pub advance_radius: f64,
    pub window: usize,
    pub ridge: f64,
    /// Velocity samples used per fit.
    pub fit_len: usize,
    pub rrt: RrtParams,
}

impl Default for ExecutiveParams {
    fn default() -> Self {
        Self {
            selection: GoalSelection::MaximalDistance,
            advance_radius: 0.2,
            window: DEFAULT_WINDOW,
            ridge: DEFAULT_RIDGE,
            fit_len: 20,
            rrt: RrtParams::default(),
        }
    }
}

/// Goal emitted by one supervisor tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoalUpdate {
    pub selected: Vec2,
    pub source: GoalSource,
    pub predicted: Vec2,
    pub velocity: Velocity3,
}

/// Server-side plan and primitive supervision for one task at a time.
#[derive(Clone, Debug)]
pub struct Executive {
    pub params: ExecutiveParams,
    pub task: Option<Task>,
    pub plan: Option<PathPlan>,
    pub next_waypoint: usize,
    pub next_marking: usize,
    pub history: Vec<Velocity3>,
    last_odometry: Option<(u64, Pose2)>,
    pub estimate: Pose2,
}

impl Executive {
    pub fn new(params: ExecutiveParams, start: Pose2) -> Self {
        Self {
            params,
            task: None,
            plan: None,
            next_waypoint: 0,
            next_marking: 0,
            history: Vec::new(),
            last_odometry: None,
            estimate: start,
        }
    }

    fn robot_xy(&self) -> Vec2 {
        Vec2::new(self.estimate.x, self.estimate.y)
    }

    /// Plans for a new task from the current estimate; returns the planning
    /// time reported by `clock`.
    pub fn assign(&mut self, task: Task, grid: &OccupancyGrid, clock: &dyn Clock) -> Result<f64, ControlError> {
        let mut goal = task.goal().ok_or(ControlError::EmptyMarking)?;
        // an object's own footprint is blocked; stop at the closest free cell
        if matches!(task.kind, TaskKind::ApproachObject { .. }) && !grid.point_free(&goal) {
            goal = grid.nearest_free(&goal).ok_or(PlanError::GoalOccupied)?;
        }
        let t0 = clock.now_s();
        let mut waypoints = vec![self.robot_xy()];
        let mut stops: Vec<Vec2> = task.marking().to_vec();
        if stops.is_empty() {
            stops.push(goal);
        }
        for stop in stops {
            let from = *waypoints.last().expect("nonempty");
            let leg = rrt_plan(grid, from, stop, &self.params.rrt)?;
            waypoints.extend_from_slice(&leg.waypoints[1..]);
        }
        let elapsed = clock.now_s() - t0;
        self.plan = Some(PathPlan::from_waypoints(waypoints, task.created_at_ms));
        self.task = Some(task);
        self.next_waypoint = 1;
        self.next_marking = 0;
        Ok(elapsed)
    }

    /// Checks the active plan against a changed grid. Returns the replanning
    /// time when a new plan was made.
    pub fn on_grid_changed(&mut self, grid: &OccupancyGrid, clock: &dyn Clock) -> Result<Option<f64>, ControlError> {
        let Some(plan) = &self.plan else { return Ok(None) };
        let goal_lost = plan.goal().is_some_and(|g| !grid.point_free(&g));
        if let Some(task) = self.task.clone().filter(|t| goal_lost && matches!(t.kind, TaskKind::ApproachObject { .. })) {
            // the object grew as more of it was seen
            let next_marking = self.next_marking;
            let elapsed = self.assign(task, grid, clock)?;
            self.next_marking = next_marking;
            return Ok(Some(elapsed));
        }
        let r = replan_if_blocked(plan, self.next_waypoint, grid, self.robot_xy(), &self.params.rrt, clock)?;
        if r.replanned {
            self.plan = Some(r.plan);
            self.next_waypoint = 1;
            Ok(Some(r.elapsed_s))
        } else {
            Ok(None)
        }
    }

    /// Feeds one (possibly delayed) odometry sample.
    pub fn observe(&mut self, t_ms: u64, pose: Pose2) {
        if let Some((t0, p0)) = self.last_odometry {
            if t_ms > t0 {
                let dt = (t_ms - t0) as f64 / 1000.0;
                self.history.push(Vec3::new(
                    (pose.x - p0.x) / dt,
                    (pose.y - p0.y) / dt,
                    wrap_angle(pose.theta - p0.theta) / dt,
                ));
                let keep = self.params.fit_len.max(self.params.window + 2);
                if self.history.len() > keep {
                    self.history.drain(..self.history.len() - keep);
                }
            }
        }
        self.last_odometry = Some((t_ms, pose));
        self.estimate = pose;
    }

    /// Velocity expected over the next step.
    pub fn predicted_velocity(&self) -> Velocity3 {
        match fit_predictor(&self.history, self.params.window, self.params.ridge) {
            Ok(model) => model.predict(&self.history),
            Err(_) => self.history.last().copied().unwrap_or_else(Vec3::zeros),
        }
    }

    /// Advances passed waypoints, selects the goal and shifts it by the
    /// predicted motion over the round-trip delay.
    pub fn tick(&mut self, rtt_s: f64) -> Result<Option<GoalUpdate>, ControlError> {
        let Some(plan) = &self.plan else { return Ok(None) };
        let robot = self.robot_xy();
        let last = plan.waypoints.len() - 1;
        while self.next_waypoint < last && (plan.waypoints[self.next_waypoint] - robot).norm() <= self.params.advance_radius {
            self.next_waypoint += 1;
        }
        let path_point = plan.waypoints.get(self.next_waypoint.min(last)).copied();
        let marking = self.task.as_ref().map(|t| t.marking()).unwrap_or(&[]);
        while self.next_marking + 1 < marking.len() && (marking[self.next_marking] - robot).norm() <= self.params.advance_radius {
            self.next_marking += 1;
        }
        let marking_point = marking.get(self.next_marking).copied();
        let (selected, source) = select_goal(marking_point, path_point, robot, self.params.selection)?;
        let velocity = self.predicted_velocity();
        let predicted = predict_goal(selected, &velocity, rtt_s)?;
        Ok(Some(GoalUpdate {
            selected,
            source,
            predicted,
            velocity,
        }))
    }

    pub fn final_goal(&self) -> Option<Vec2> {
        self.plan.as_ref().and_then(|p| p.goal())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goal_selection_rules() {
        let r = Vec2::zeros();
        let m = Vec2::new(2.0, 0.0);
        let p = Vec2::new(0.0, 1.0);
        assert_eq!(select_goal(Some(m), Some(p), r, GoalSelection::MaximalDistance).unwrap().0, m);
        assert_eq!(select_goal(None, Some(p), r, GoalSelection::MaximalDistance).unwrap().0, p);
        let tie = Vec2::new(1.0, 0.0);
        assert_eq!(
            select_goal(Some(tie), Some(p), r, GoalSelection::MaximalDistance).unwrap(),
            (p, GoalSource::PlannedPath)
        );
        assert_eq!(select_goal(Some(m), Some(p), r, GoalSelection::Nearest).unwrap().0, p);
        assert_eq!(select_goal(None, None, r, GoalSelection::Nearest), Err(ControlError::NoCandidates));
    }

    #[test]
    fn goal_prediction() {
        let v = Vec3::new(0.2, 0.0, 0.0);
        let g = predict_goal(Vec2::new(1.0, 0.0), &v, 0.2).unwrap();
        assert!((g - Vec2::new(1.04, 0.0)).norm() < 1e-12);
        assert_eq!(predict_goal(Vec2::new(1.0, 0.0), &v, 0.0).unwrap(), Vec2::new(1.0, 0.0));
        assert_eq!(predict_goal(Vec2::zeros(), &v, -0.1), Err(ControlError::NegativeDelay));
    }

    #[test]
    fn trajectory_examples() {
        let p = TrajectoryParams::default();
        let at = trajectory_step(&Pose2::new(1.0, 1.0, 0.0), Vec2::new(1.01, 1.0), &p);
        assert!(at.arrived);
        assert_eq!(at.command, VelocityCommand::default());
        let go = trajectory_step(&Pose2::default(), Vec2::new(1.0, 0.0), &p);
        assert!(!go.arrived);
        assert!((go.command.vx - 0.3).abs() < 1e-12 && go.command.vy.abs() < 1e-12);
        assert_eq!(go.command.omega, 0.0);
    }

    #[test]
    fn stats_of_samples() {
        let s = Stats::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.max, 4.0);
        assert_eq!(s.min, 1.0);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-12);
        assert!(Stats::of(&[]).is_none());
    }
}
