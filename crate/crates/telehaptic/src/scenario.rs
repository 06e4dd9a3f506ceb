//! Scenario orchestration in virtual time. A [`Session`] wires the
//! simulated robot, the delayed uplink/downlink channels and the server
//! (fusion, occupancy, executive, interfaces) together and advances them
//! one control tick at a time.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use telehaptic_core::camera::{CameraIntrinsics, RgbdFrame};
use telehaptic_core::control::{
    parse_task, predict_goal, record_metrics, trajectory_step, ControlError, Executive, ExecutiveParams, GoalSelection,
    Parsed, RunLog, RunMetrics, Stats, Task, TaskEvent, TaskKind, TrajectoryParams, ARRIVAL_TOLERANCE,
};
use telehaptic_core::geometry::{Aabb, Vec2, Vec3};
use telehaptic_core::haptic::{run_path, HapticParams, HapticState, SurfaceCloud, TraceRow, UpdateRule};
use telehaptic_core::interact::{
    mark_object, mark_path, push_body, BodyShape, InterfaceEvent, ObstacleSet, VirtualBody, DEFAULT_MARK_SPACING,
};
use telehaptic_core::plan::{build_occupancy, with_obstacles, Clock, GridSpec, OccupancyGrid, VirtualObstacle};
use telehaptic_core::segment::{object_extent, RegionParams};
use telehaptic_core::sim::{render_frame, Pose2, Scene, SimRobot, VelocityCommand};
use telehaptic_core::tsdf::{detect_ground_plane, GroundPlane, GroundPlaneParams, TsdfParams, TsdfVolume};

use crate::channel::{DelayModel, VirtualChannel};
use crate::formats::{self, FormatError, PredictionRecord, StatRecord};
use crate::rtt::RttEstimator;
use crate::wire::{CommandMessage, Message, OdometryMessage};

pub const ALLOWED_RESOLUTIONS: [usize; 5] = [64, 128, 256, 384, 512];
/// Frames used to fit the ground plane before any planning.
const GROUND_FRAMES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("scenario failed: {0}")]
    ScenarioFailed(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Robot-side driving mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Drive {
    /// Track the goals sent by the server.
    Goal,
    /// Follow a forward-velocity profile and ignore server goals.
    Profile { profile: VelocityProfile },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityProfile {
    Constant { v: f64 },
    /// `v0 + accel·t`.
    Ramp { v0: f64, accel: f64 },
    /// `offset + amplitude·sin(2πt/period)`.
    Sine { offset: f64, amplitude: f64, period_s: f64 },
}

impl VelocityProfile {
    pub fn at(&self, t_s: f64) -> f64 {
        match *self {
            VelocityProfile::Constant { v } => v,
            VelocityProfile::Ramp { v0, accel } => v0 + accel * t_s,
            VelocityProfile::Sine {
                offset,
                amplitude,
                period_s,
            } => offset + amplitude * (2.0 * std::f64::consts::PI * t_s / period_s).sin(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub t_ms: u64,
    #[serde(flatten)]
    pub event: InterfaceEvent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    pub shape: BodyShape,
    pub at: [f64; 2],
    pub mass: f64,
    pub stiffness: f64,
    pub damping: f64,
}

fn d_resolution() -> usize {
    128
}
fn d_voxel() -> f64 {
    0.04
}
fn d_trunc() -> f64 {
    0.12
}
fn d_cells() -> usize {
    128
}
fn d_cell_size() -> f64 {
    0.05
}
fn d_radius() -> f64 {
    0.30
}
fn d_margin() -> f64 {
    0.15
}
fn d_window() -> usize {
    5
}
fn d_tick() -> u64 {
    50
}
fn d_frame_period() -> u64 {
    500
}
fn d_duration() -> f64 {
    60.0
}
fn d_sigma() -> f64 {
    0.0005
}
fn d_drive() -> Drive {
    Drive::Goal
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub scene: Scene,
    /// Robot start pose `[x, y, θ]`.
    pub start: [f64; 3],
    /// Point to approach from t = 0.
    #[serde(default)]
    pub goal: Option<[f64; 2]>,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
    #[serde(default = "d_drive")]
    pub drive: Drive,
    /// One-way delay robot → server.
    #[serde(default)]
    pub uplink: DelayModel,
    /// One-way delay server → robot.
    #[serde(default)]
    pub downlink: DelayModel,
    #[serde(default = "d_resolution")]
    pub resolution: usize,
    #[serde(default = "d_voxel")]
    pub voxel_size: f64,
    #[serde(default = "d_trunc")]
    pub truncation: f64,
    #[serde(default = "d_cells")]
    pub grid_cells: usize,
    #[serde(default = "d_cell_size")]
    pub cell_size: f64,
    /// Center of the volume and grid footprint; defaults to the scene center.
    #[serde(default)]
    pub area_center: Option<[f64; 2]>,
    #[serde(default = "d_radius")]
    pub robot_radius: f64,
    /// Extra inflation for tracking error.
    #[serde(default = "d_margin")]
    pub margin: f64,
    #[serde(default = "d_window")]
    pub window: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_sigma")]
    pub odometry_sigma: f64,
    #[serde(default = "d_tick")]
    pub tick_ms: u64,
    /// 0 disables frame streaming.
    #[serde(default = "d_frame_period")]
    pub frame_period_ms: u64,
    #[serde(default = "d_duration")]
    pub duration_s: f64,
    #[serde(default)]
    pub selection: GoalSelection,
    #[serde(default)]
    pub bodies: Vec<BodySpec>,
}

impl ScenarioConfig {
    /// Empty-floor config with defaults everywhere.
    pub fn new(name: &str, scene: Scene) -> Self {
        Self {
            name: name.to_string(),
            scene,
            start: [0.0; 3],
            goal: None,
            events: Vec::new(),
            drive: Drive::Goal,
            uplink: DelayModel::default(),
            downlink: DelayModel::default(),
            resolution: d_resolution(),
            voxel_size: d_voxel(),
            truncation: d_trunc(),
            grid_cells: d_cells(),
            cell_size: d_cell_size(),
            area_center: None,
            robot_radius: d_radius(),
            margin: d_margin(),
            window: d_window(),
            seed: 0,
            odometry_sigma: d_sigma(),
            tick_ms: d_tick(),
            frame_period_ms: d_frame_period(),
            duration_s: d_duration(),
            selection: GoalSelection::default(),
            bodies: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidConfig(m.to_string()));
        if !ALLOWED_RESOLUTIONS.contains(&self.resolution) {
            return bad("resolution must be one of 64, 128, 256, 384, 512");
        }
        if self.tick_ms == 0 || self.duration_s.is_nan() || self.duration_s <= 0.0 {
            return bad("tick and duration must be positive");
        }
        if self.window == 0 {
            return bad("predictor window must be positive");
        }
        if !self.scene.validate() {
            return bad("scene primitives outside bounds");
        }
        self.uplink.validate().map_err(|e| ScenarioError::InvalidConfig(e.to_string()))?;
        self.downlink.validate().map_err(|e| ScenarioError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn inflation(&self) -> f64 {
        self.robot_radius + self.margin
    }

    fn center(&self) -> Vec2 {
        match self.area_center {
            Some(c) => Vec2::new(c[0], c[1]),
            None => {
                let c = self.scene.bounds.center();
                Vec2::new(c.x, c.y)
            }
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::centered(self.center(), self.grid_cells, self.cell_size, self.inflation())
    }

    pub fn tsdf_params(&self) -> TsdfParams {
        TsdfParams {
            resolution: self.resolution,
            voxel_size: self.voxel_size,
            truncation: self.truncation,
            ..TsdfParams::default()
        }
    }

    pub fn volume_origin(&self) -> Vec3 {
        let half = self.tsdf_params().extent() / 2.0;
        let c = self.center();
        Vec3::new(c.x - half, c.y - half, -0.5)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let cfg: Self = formats::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Wall-clock seconds for planning time measurements.
#[derive(Clone, Copy, Debug)]
pub struct StdClock(Instant);

impl Default for StdClock {
    fn default() -> Self {
        StdClock(Instant::now())
    }
}

impl Clock for StdClock {
    fn now_s(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Position forecast made at a server tick, resolved against the truth
/// once the run is over.
#[derive(Clone, Copy, Debug)]
struct Forecast {
    t_ms: u64,
    arrival_ms: f64,
    predicted: Vec2,
    hold: Vec2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledObject {
    pub label: u16,
    pub centroid: [f64; 3],
    pub voxels: usize,
}

/// Record of one applied or rejected interface event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub t_ms: u64,
    pub kind: String,
    pub ok: bool,
    pub detail: String,
}

pub struct Session {
    pub cfg: ScenarioConfig,
    intr: CameraIntrinsics,
    // robot side
    robot: SimRobot,
    robot_goal: Option<Vec2>,
    traj: TrajectoryParams,
    uplink: VirtualChannel<Message>,
    downlink: VirtualChannel<Message>,
    // server side
    volume: TsdfVolume,
    ground: Option<GroundPlane>,
    ground_frames: Vec<RgbdFrame>,
    last_frame: Option<RgbdFrame>,
    base_grid: Option<OccupancyGrid>,
    grid: Option<OccupancyGrid>,
    obstacles: ObstacleSet,
    bodies: Vec<VirtualBody>,
    push_hips: Vec<Option<Vec3>>,
    executive: Executive,
    rtt: RttEstimator,
    stale: Option<(u64, Pose2)>,
    pending: VecDeque<TimedEvent>,
    markings: Vec<Vec2>,
    labeled: Vec<LabeledObject>,
    pub outcomes: Vec<EventOutcome>,
    clock: Box<dyn Clock + Send>,
    log: RunLog,
    replans: usize,
    forecasts: Vec<Forecast>,
    truth: Vec<(u64, Pose2)>,
    last_goal: Option<Vec2>,
    pub failure: Option<String>,
    t_ms: u64,
    seq: u32,
    cmd_seq: u32,
}

impl Session {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, ScenarioError> {
        Self::with_clock(cfg, Box::new(StdClock::default()))
    }

    pub fn with_clock(cfg: ScenarioConfig, clock: Box<dyn Clock + Send>) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let start = Pose2::new(cfg.start[0], cfg.start[1], cfg.start[2]);
        let volume = TsdfVolume::new(cfg.tsdf_params(), cfg.volume_origin())
            .map_err(|e| ScenarioError::InvalidConfig(e.to_string()))?;
        let params = ExecutiveParams {
            selection: cfg.selection,
            window: cfg.window,
            rrt: telehaptic_core::plan::RrtParams {
                seed: cfg.seed.wrapping_add(1),
                ..Default::default()
            },
            ..ExecutiveParams::default()
        };
        let mut pending: Vec<TimedEvent> = cfg.events.clone();
        pending.sort_by_key(|e| e.t_ms);
        let mut s = Self {
            intr: CameraIntrinsics::default(),
            robot: SimRobot::new(start, cfg.odometry_sigma, cfg.seed),
            robot_goal: None,
            traj: TrajectoryParams::default(),
            uplink: VirtualChannel::new(cfg.uplink),
            downlink: VirtualChannel::new(cfg.downlink),
            volume,
            ground: None,
            ground_frames: Vec::new(),
            last_frame: None,
            base_grid: None,
            grid: None,
            obstacles: ObstacleSet::default(),
            bodies: Vec::new(),
            push_hips: Vec::new(),
            executive: Executive::new(params, start),
            rtt: RttEstimator::default(),
            stale: None,
            pending: pending.into(),
            markings: Vec::new(),
            labeled: Vec::new(),
            outcomes: Vec::new(),
            clock,
            log: RunLog {
                planning_s: Vec::new(),
                replanning_s: Vec::new(),
                start_ms: 0,
                end_ms: None,
                odometry: vec![Vec2::new(start.x, start.y)],
            },
            replans: 0,
            forecasts: Vec::new(),
            truth: vec![(0, start)],
            last_goal: None,
            failure: None,
            t_ms: 0,
            seq: 0,
            cmd_seq: 0,
            cfg,
        };
        if s.cfg.frame_period_ms == 0 {
            // no perception: plan on an all-free floor
            s.ground = Some(GroundPlane::horizontal(0.0));
            s.base_grid = Some(OccupancyGrid::empty(s.cfg.grid_spec()));
            s.refresh_grid();
        }
        s.send_frame();
        Ok(s)
    }

    pub fn t_ms(&self) -> u64 {
        self.t_ms
    }

    pub fn finished(&self) -> bool {
        self.log.end_ms.is_some() || self.failure.is_some() || self.t_ms as f64 >= self.cfg.duration_s * 1000.0
    }

    pub fn robot(&self) -> &SimRobot {
        &self.robot
    }

    pub fn executive(&self) -> &Executive {
        &self.executive
    }

    pub fn grid(&self) -> Option<&OccupancyGrid> {
        self.grid.as_ref()
    }

    pub fn volume(&self) -> &TsdfVolume {
        &self.volume
    }

    pub fn ground(&self) -> Option<&GroundPlane> {
        self.ground.as_ref()
    }

    pub fn obstacles(&self) -> &[VirtualObstacle] {
        &self.obstacles.obstacles
    }

    pub fn bodies(&self) -> &[VirtualBody] {
        &self.bodies
    }

    pub fn markings(&self) -> &[Vec2] {
        &self.markings
    }

    pub fn labeled_objects(&self) -> &[LabeledObject] {
        &self.labeled
    }

    pub fn replans(&self) -> usize {
        self.replans
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    /// Latest goal sent to the robot.
    pub fn last_goal(&self) -> Option<Vec2> {
        self.last_goal
    }

    fn send_frame(&mut self) {
        if self.cfg.frame_period_ms == 0 || !self.t_ms.is_multiple_of(self.cfg.frame_period_ms) {
            return;
        }
        let mut frame = render_frame(&self.cfg.scene, &self.robot.camera_pose(), &self.intr);
        self.seq += 1;
        frame.seq = self.seq;
        frame.timestamp_ms = self.t_ms;
        self.uplink.send(self.t_ms as f64, Message::Frame(frame));
    }

    /// Queues an interface event for the next tick.
    pub fn submit(&mut self, event: InterfaceEvent) {
        self.pending.push_back(TimedEvent {
            t_ms: self.t_ms,
            event,
        });
        self.pending.make_contiguous().sort_by_key(|e| e.t_ms);
    }

    /// Advances one control tick.
    pub fn step(&mut self) {
        let dt = self.cfg.tick_ms as f64 / 1000.0;
        self.t_ms += self.cfg.tick_ms;
        let now = self.t_ms as f64;

        // robot side
        for (at, msg) in self.downlink.drain_ready(now) {
            match msg {
                Message::Command(c) => self.robot_goal = Some(Vec2::new(c.goal[0], c.goal[1])),
                Message::Ping { seq } => {
                    self.uplink.send(at, Message::Pong { seq });
                }
                _ => {}
            }
        }
        let cmd = match &self.cfg.drive {
            Drive::Goal => match self.robot_goal {
                Some(g) => trajectory_step(&self.robot.odometry, g, &self.traj).command,
                None => VelocityCommand::default(),
            },
            Drive::Profile { profile } => VelocityCommand::new(profile.at((self.t_ms - self.cfg.tick_ms) as f64 / 1000.0), 0.0, 0.0),
        };
        self.robot.step(&cmd, dt);
        self.truth.push((self.t_ms, self.robot.truth));
        self.uplink.send(now, Message::Odometry(OdometryMessage::new(self.seq, self.t_ms, &self.robot.odometry)));
        self.send_frame();

        // server side
        let ping = self.rtt.ping(now / 1000.0);
        self.downlink.send(now, Message::Ping { seq: ping });
        let mut fused = false;
        for (at, msg) in self.uplink.drain_ready(now) {
            match msg {
                Message::Odometry(o) => {
                    let pose = o.pose2();
                    self.executive.observe(o.t_ms, pose);
                    self.log.odometry.push(Vec2::new(pose.x, pose.y));
                    self.stale = Some((o.t_ms, pose));
                }
                Message::Frame(f) => {
                    self.fuse(f);
                    fused = true;
                }
                Message::Pong { seq } => {
                    self.rtt.pong(seq, at / 1000.0);
                }
                _ => {}
            }
        }
        if fused {
            self.rebuild_grid();
        }
        self.apply_due_events();
        if self.step_bodies(dt) {
            self.refresh_grid();
        }
        self.supervise(now);
    }

    fn fuse(&mut self, frame: RgbdFrame) {
        if self.volume.integrate_frame(&frame, &self.intr).is_err() {
            return;
        }
        if self.ground.is_none() {
            self.ground_frames.push(frame.clone());
            if self.ground_frames.len() >= GROUND_FRAMES {
                let params = GroundPlaneParams {
                    seed: self.cfg.seed,
                    ..GroundPlaneParams::default()
                };
                if let Ok(g) = detect_ground_plane(&self.ground_frames, &self.intr, &params) {
                    self.ground = Some(g);
                    self.ground_frames.clear();
                } else {
                    self.ground_frames.remove(0);
                }
            }
        }
        self.last_frame = Some(frame);
    }

    fn rebuild_grid(&mut self) {
        let Some(ground) = self.ground else { return };
        if let Ok(g) = build_occupancy(&self.volume, Some(&ground), &[], self.cfg.grid_spec()) {
            self.base_grid = Some(g);
            self.refresh_grid();
        }
    }

    fn refresh_grid(&mut self) {
        let Some(base) = &self.base_grid else { return };
        let mut all = self.obstacles.obstacles.clone();
        all.extend(self.bodies.iter().map(|b| b.as_obstacle()));
        let grid = with_obstacles(base, &all);
        match self.executive.on_grid_changed(&grid, self.clock.as_ref()) {
            Ok(Some(tr)) => {
                self.log.replanning_s.push(tr);
                self.replans += 1;
            }
            Ok(None) => {}
            Err(e) => self.failure = Some(format!("replanning failed: {e}")),
        }
        self.grid = Some(grid);
    }

    fn step_bodies(&mut self, dt: f64) -> bool {
        let mut moved = false;
        for (b, hip) in self.bodies.iter_mut().zip(self.push_hips.iter_mut()) {
            let probe = hip.take().unwrap_or_else(|| Vec3::repeat(f64::INFINITY));
            let next = push_body(b, &probe, dt, self.base_grid.as_ref());
            moved |= next.position != b.position;
            *b = next;
        }
        moved
    }

    fn apply_due_events(&mut self) {
        if self.ground.is_none() || self.grid.is_none() {
            return;
        }
        if self.bodies.len() < self.cfg.bodies.len() {
            let ground = self.ground.expect("checked");
            for (i, b) in self.cfg.bodies.iter().enumerate() {
                let at = Vec2::new(b.at[0], b.at[1]);
                self.bodies
                    .push(VirtualBody::resting(1000 + i as u32, b.shape, at, &ground, b.mass, b.stiffness, b.damping));
                self.push_hips.push(None);
            }
            self.refresh_grid();
        }
        if let Some(g) = self.cfg.goal.take() {
            let task = Task {
                kind: TaskKind::ApproachPoint(Vec2::new(g[0], g[1])),
                created_at_ms: self.t_ms,
            };
            self.assign(task, "goal");
        }
        while self.pending.front().is_some_and(|e| e.t_ms <= self.t_ms) {
            let e = self.pending.pop_front().expect("nonempty");
            self.apply_event(e.event);
        }
    }

    fn record(&mut self, kind: &str, result: Result<String, String>) {
        let (ok, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.outcomes.push(EventOutcome {
            t_ms: self.t_ms,
            kind: kind.to_string(),
            ok,
            detail,
        });
    }

    fn assign(&mut self, task: Task, kind: &str) {
        let grid = self.grid.as_ref().expect("grid ready");
        match self.executive.assign(task, grid, self.clock.as_ref()) {
            Ok(tp) => {
                self.log.planning_s.push(tp);
                self.log.end_ms = None;
                self.record(kind, Ok(format!("planned in {tp:.4} s")));
            }
            Err(e) => {
                self.failure = Some(format!("planning failed: {e}"));
                self.record(kind, Err(e.to_string()));
            }
        }
    }

    fn robot_xy(&self) -> Vec2 {
        let p = self.executive.estimate;
        Vec2::new(p.x, p.y)
    }

    /// Applies one interface event on the server.
    pub fn apply_event(&mut self, event: InterfaceEvent) {
        let ground = match self.ground {
            Some(g) => g,
            None => {
                self.record(event_kind(&event), Err("ground plane not yet known".into()));
                return;
            }
        };
        match &event {
            InterfaceEvent::MarkPath { points } => {
                let contacts: Vec<Vec3> = points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect();
                match mark_path(&contacts, &ground, DEFAULT_MARK_SPACING, self.t_ms) {
                    Ok(m) => {
                        let task_event = TaskEvent::MarkedPath(m.points.clone());
                        match parse_task(&task_event, &self.volume, &ground, self.t_ms) {
                            Ok(Parsed::Task(t)) => {
                                self.markings = t.marking().to_vec();
                                self.assign(t, "mark_path");
                            }
                            Ok(Parsed::Replan) => {}
                            Err(e) => self.record("mark_path", Err(e.to_string())),
                        }
                    }
                    Err(e) => self.record("mark_path", Err(e.to_string())),
                }
            }
            InterfaceEvent::MarkObject { point } => {
                let contact = Vec3::new(point[0], point[1], point[2]);
                let Some(frame) = self.last_frame.clone() else {
                    self.record("mark_object", Err("no frame received yet".into()));
                    return;
                };
                match mark_object(Some(contact), &mut self.volume, &frame, &self.intr, &RegionParams::default()) {
                    Ok(m) => {
                        if let Ok(e) = object_extent(&self.volume, m.label) {
                            self.labeled.retain(|o| o.label != m.label);
                            self.labeled.push(LabeledObject {
                                label: m.label,
                                centroid: [e.centroid.x, e.centroid.y, e.centroid.z],
                                voxels: e.voxels,
                            });
                        }
                        match parse_task(&TaskEvent::MarkedObject(m.label), &self.volume, &ground, self.t_ms) {
                            Ok(Parsed::Task(t)) => {
                                self.markings.clear();
                                self.assign(t, "mark_object");
                            }
                            Ok(Parsed::Replan) => {}
                            Err(e) => self.record("mark_object", Err(e.to_string())),
                        }
                    }
                    Err(e) => self.record("mark_object", Err(e.to_string())),
                }
            }
            InterfaceEvent::PlaceObstacle { pos, .. } => {
                let shape = event.obstacle_shape().expect("place_obstacle");
                let cursor = Vec3::new(pos[0], pos[1], 0.0);
                let robot = self.robot_xy();
                match self.obstacles.place(&cursor, &ground, shape, robot, self.cfg.robot_radius) {
                    Ok(ob) => {
                        self.record("place_obstacle", Ok(format!("obstacle {}", ob.id)));
                        self.refresh_grid();
                    }
                    Err(e) => self.record("place_obstacle", Err(e.to_string())),
                }
            }
            InterfaceEvent::RemoveObstacle { id } => match self.obstacles.remove(*id) {
                Ok(_) => {
                    self.record("remove_obstacle", Ok(format!("obstacle {id}")));
                    self.refresh_grid();
                }
                Err(e) => self.record("remove_obstacle", Err(e.to_string())),
            },
            InterfaceEvent::Push { body, hip } => match self.bodies.iter().position(|b| b.id == *body) {
                Some(i) => {
                    self.push_hips[i] = Some(Vec3::new(hip[0], hip[1], hip[2]));
                    self.record("push", Ok(format!("body {body}")));
                }
                None => self.record("push", Err(format!("no body with id {body}"))),
            },
        }
    }

    fn supervise(&mut self, now: f64) {
        let rtt = self.rtt.estimate(now / 1000.0).unwrap_or(0.0);
        let velocity = self.executive.predicted_velocity();
        if let Some((_, pose)) = self.stale {
            let hold = Vec2::new(pose.x, pose.y);
            if let Ok(predicted) = predict_goal(hold, &velocity, rtt) {
                let arrival_ms = now + self.cfg.downlink.delay_ms(now);
                self.forecasts.push(Forecast {
                    t_ms: self.t_ms,
                    arrival_ms,
                    predicted,
                    hold,
                });
            }
        }
        if self.log.end_ms.is_some() {
            return;
        }
        let update = match self.executive.tick(rtt) {
            Ok(Some(u)) => u,
            Ok(None) => return,
            Err(ControlError::NoCandidates) => return,
            Err(e) => {
                self.failure = Some(e.to_string());
                return;
            }
        };
        let est = self.executive.estimate;
        let out = trajectory_step(&est, update.predicted, &self.traj);
        self.cmd_seq += 1;
        let msg = CommandMessage {
            seq: self.cmd_seq,
            t_ms: self.t_ms,
            goal: [update.predicted.x, update.predicted.y],
            cmd: [out.command.vx, out.command.vy, out.command.omega],
        };
        self.last_goal = Some(update.predicted);
        self.downlink.send(now, Message::Command(msg));
        if let Some(goal) = self.executive.final_goal() {
            let markings_done = self.markings.last().is_none_or(|m| (m - self.robot_xy()).norm() <= 0.2);
            if markings_done && (goal - self.robot_xy()).norm() <= ARRIVAL_TOLERANCE {
                self.log.end_ms = Some(self.t_ms);
            }
        }
    }

    /// Truth position at `t_ms`, linear between ticks.
    pub fn truth_at(&self, t_ms: f64) -> Vec2 {
        let k = self.truth.partition_point(|(t, _)| (*t as f64) <= t_ms);
        let xy = |p: &Pose2| Vec2::new(p.x, p.y);
        if k == 0 {
            return xy(&self.truth[0].1);
        }
        if k >= self.truth.len() {
            return xy(&self.truth[self.truth.len() - 1].1);
        }
        let (t0, p0) = self.truth[k - 1];
        let (t1, p1) = self.truth[k];
        let s = (t_ms - t0 as f64) / (t1 - t0) as f64;
        xy(&p0) + (xy(&p1) - xy(&p0)) * s
    }

    /// Resolved forecasts whose arrival time lies within the run.
    pub fn predictions(&self) -> Vec<PredictionRecord> {
        let end = self.t_ms as f64;
        self.forecasts
            .iter()
            .filter(|f| f.arrival_ms <= end)
            .map(|f| PredictionRecord {
                t_ms: f.t_ms,
                actual_x: self.truth_at(f.arrival_ms).x,
                predicted_x: f.predicted.x,
                hold_x: f.hold.x,
            })
            .collect()
    }

    pub fn truth_path(&self) -> Vec<Vec2> {
        self.truth.iter().map(|(_, p)| Vec2::new(p.x, p.y)).collect()
    }

    pub fn metrics(&self) -> RunMetrics {
        record_metrics(&self.log, self.t_ms)
    }

    /// Presses the floor one meter ahead of the robot and slides forward,
    /// against the current volume.
    pub fn haptic_probe(&self) -> Vec<TraceRow> {
        let cam = self.robot.camera_pose();
        let samples = self.volume.raycast(&cam, &self.intr);
        let cloud = SurfaceCloud::from_samples(&samples, self.intr.width);
        let p = self.robot.truth;
        let (s, c) = p.theta.sin_cos();
        let ahead = Vec3::new(p.x + c, p.y + s, 0.0);
        let mut path = Vec::new();
        for k in 0..=15 {
            path.push(ahead + Vec3::new(0.0, 0.0, 0.02 - 0.002 * k as f64));
        }
        for k in 1..=50 {
            path.push(ahead + Vec3::new(c, s, 0.0) * (0.002 * k as f64) + Vec3::new(0.0, 0.0, -0.01));
        }
        let mut state = HapticState::new(HapticParams::default(), path[0]);
        run_path(&mut state, &self.volume, &cloud, &path, 1, UpdateRule::ForceShading)
    }
}

fn event_kind(e: &InterfaceEvent) -> &'static str {
    match e {
        InterfaceEvent::MarkPath { .. } => "mark_path",
        InterfaceEvent::MarkObject { .. } => "mark_object",
        InterfaceEvent::PlaceObstacle { .. } => "place_obstacle",
        InterfaceEvent::RemoveObstacle { .. } => "remove_obstacle",
        InterfaceEvent::Push { .. } => "push",
    }
}

/// Smallest distance from an executed path to the footprints of the scene
/// boxes and the virtual obstacles.
pub fn path_clearance(path: &[Vec2], scene: &Scene, obstacles: &[VirtualObstacle]) -> f64 {
    let box_distance = |p: &Vec2, b: &Aabb| {
        let dx = (b.min.x - p.x).max(p.x - b.max.x).max(0.0);
        let dy = (b.min.y - p.y).max(p.y - b.max.y).max(0.0);
        dx.hypot(dy)
    };
    path.iter()
        .map(|p| {
            let boxes = scene.boxes.iter().map(|b| box_distance(p, &Aabb::new(b.min, b.max)));
            let obs = obstacles.iter().map(|o| o.distance(p));
            boxes.chain(obs).fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub name: String,
    pub metrics: RunMetrics,
    pub predictions: Vec<PredictionRecord>,
    pub trace: Vec<TraceRow>,
    pub path: Vec<Vec2>,
    pub final_pose: Pose2,
    pub final_goal: Option<Vec2>,
    pub replans: usize,
    pub clearance: f64,
    pub obstacles: Vec<VirtualObstacle>,
    pub events: Vec<EventOutcome>,
    pub failure: Option<String>,
    /// Profile-driven run with no task to complete.
    pub open_loop: bool,
}

impl ScenarioOutcome {
    /// No failure, and the task completed unless the run is open loop.
    pub fn succeeded(&self) -> bool {
        self.failure.is_none() && (self.open_loop || self.metrics.complete)
    }

    pub fn final_distance(&self) -> Option<f64> {
        self.final_goal
            .map(|g| (g - Vec2::new(self.final_pose.x, self.final_pose.y)).norm())
    }

    /// Mean and max |predicted − actual| and |hold − actual| in x.
    pub fn prediction_errors(&self) -> Option<(Stats, Stats)> {
        let p: Vec<f64> = self.predictions.iter().map(|r| (r.predicted_x - r.actual_x).abs()).collect();
        let h: Vec<f64> = self.predictions.iter().map(|r| (r.hold_x - r.actual_x).abs()).collect();
        Some((Stats::of(&p)?, Stats::of(&h)?))
    }

    /// Rows that depend only on the config and seed.
    pub fn metric_records(&self) -> Vec<StatRecord> {
        let mut out = formats::metric_records(&self.metrics);
        out.push(StatRecord::scalar("replans", self.replans as f64));
        if let Some(d) = self.final_distance() {
            out.push(StatRecord::scalar("final_distance_m", d));
        }
        if self.clearance.is_finite() {
            out.push(StatRecord::scalar("clearance_m", self.clearance));
        }
        if let Some((p, h)) = self.prediction_errors() {
            out.push(StatRecord::new("prediction_error_m", &p));
            out.push(StatRecord::new("hold_error_m", &h));
        }
        if let Some(tp) = &self.metrics.tp {
            out.push(StatRecord::scalar("plans", tp.count as f64));
        }
        out
    }

    /// Writes `metrics.csv`, `prediction.csv`, `haptic_trace.csv`,
    /// `path.csv`, `events.json` and the wall-clock `timings.csv`.
    pub fn write_bundle(&self, dir: &Path) -> Result<(), FormatError> {
        use std::fs::File;
        std::fs::create_dir_all(dir)?;
        formats::write_csv(&self.metric_records(), File::create(dir.join("metrics.csv"))?)?;
        formats::write_csv(&self.predictions, File::create(dir.join("prediction.csv"))?)?;
        formats::write_trace(&self.trace, File::create(dir.join("haptic_trace.csv"))?)?;
        let path: Vec<[f64; 2]> = self.path.iter().map(|p| [p.x, p.y]).collect();
        formats::write_csv(&path.iter().map(|p| PathRow { x: p[0], y: p[1] }).collect::<Vec<_>>(), File::create(dir.join("path.csv"))?)?;
        formats::write_json(&self.events, &dir.join("events.json"))?;
        formats::write_csv(&formats::timing_records(&self.metrics), File::create(dir.join("timings.csv"))?)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct PathRow {
    x: f64,
    y: f64,
}

/// Runs a scenario to completion in virtual time.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome, ScenarioError> {
    run_with_clock(cfg, Box::new(StdClock::default()))
}

pub fn run_with_clock(cfg: &ScenarioConfig, clock: Box<dyn Clock + Send>) -> Result<ScenarioOutcome, ScenarioError> {
    let mut s = Session::with_clock(cfg.clone(), clock)?;
    while !s.finished() {
        s.step();
    }
    let trace = if cfg.frame_period_ms > 0 { s.haptic_probe() } else { Vec::new() };
    Ok(ScenarioOutcome {
        name: cfg.name.clone(),
        metrics: s.metrics(),
        predictions: s.predictions(),
        trace,
        path: s.truth_path(),
        final_pose: s.robot.truth,
        final_goal: s.executive.final_goal(),
        replans: s.replans,
        clearance: path_clearance(&s.truth_path(), &cfg.scene, &s.obstacles.obstacles),
        obstacles: s.obstacles.obstacles.clone(),
        events: s.outcomes.clone(),
        failure: s.failure.clone(),
        open_loop: matches!(cfg.drive, Drive::Profile { .. }),
    })
}

fn room(extent: f64) -> Aabb {
    Aabb::new(Vec3::new(-extent, -extent, -1.0), Vec3::new(extent, extent, 3.0))
}

/// Mark a box on the floor and approach it.
pub fn approach_object() -> ScenarioConfig {
    let scene = Scene::flat(room(5.0)).with_box(Vec3::new(1.8, -0.2, 0.0), Vec3::new(2.2, 0.2, 0.3), [200, 40, 40]);
    let mut cfg = ScenarioConfig::new("approach_object", scene);
    cfg.area_center = Some([1.5, 0.0]);
    cfg.events.push(TimedEvent {
        t_ms: 1500,
        event: InterfaceEvent::MarkObject { point: [2.0, 0.0, 0.3] },
    });
    cfg.uplink = DelayModel::Fixed { ms: 50.0 };
    cfg.downlink = DelayModel::Fixed { ms: 50.0 };
    cfg
}

/// Drive to (3, 0); an obstacle dropped onto the path forces a replan.
pub fn obstacle_mid_run() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new("obstacle_mid_run", Scene::flat(room(5.0)));
    cfg.area_center = Some([1.5, 0.0]);
    cfg.goal = Some([3.0, 0.0]);
    cfg.events.push(TimedEvent {
        t_ms: 4000,
        event: InterfaceEvent::PlaceObstacle {
            pos: [2.0, 0.0],
            shape: telehaptic_core::interact::ShapeName::Sphere,
            radius: 0.2,
            half_extents: None,
        },
    });
    cfg.uplink = DelayModel::Fixed { ms: 50.0 };
    cfg.downlink = DelayModel::Fixed { ms: 50.0 };
    cfg
}

/// Follow a marked floor path around to (2, 1).
pub fn follow_marked_path() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new("follow_marked_path", Scene::flat(room(5.0)));
    cfg.area_center = Some([1.5, 0.0]);
    let points: Vec<[f64; 3]> = (0..=20)
        .map(|k| {
            let s = k as f64 / 20.0;
            [2.0 * s, (std::f64::consts::PI * s / 2.0).sin(), 0.0]
        })
        .collect();
    cfg.events.push(TimedEvent {
        t_ms: 1500,
        event: InterfaceEvent::MarkPath { points },
    });
    cfg.uplink = DelayModel::Fixed { ms: 50.0 };
    cfg.downlink = DelayModel::Fixed { ms: 50.0 };
    cfg
}

/// Approach (3, 0) while a virtual body is pushed across the path.
pub fn pushed_body() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new("pushed_body", Scene::flat(room(5.0)));
    cfg.area_center = Some([1.5, 0.0]);
    cfg.goal = Some([3.0, 0.0]);
    cfg.bodies.push(BodySpec {
        shape: BodyShape::Box {
            half_extents: Vec3::new(0.1, 0.1, 0.1),
        },
        at: [2.0, 1.2],
        mass: 1.0,
        stiffness: 200.0,
        damping: 2.0,
    });
    for k in 0..20u64 {
        cfg.events.push(TimedEvent {
            t_ms: 2000 + 50 * k,
            event: InterfaceEvent::Push {
                body: 1000,
                hip: [2.0, 1.31 - 0.001 * k as f64, 0.1],
            },
        });
    }
    cfg.uplink = DelayModel::Fixed { ms: 50.0 };
    cfg.downlink = DelayModel::Fixed { ms: 50.0 };
    cfg
}

pub fn default_suite() -> Vec<ScenarioConfig> {
    vec![approach_object(), obstacle_mid_run(), follow_marked_path(), pushed_body()]
}

/// Open-loop run at a velocity profile under the given round trip split
/// evenly between the two directions.
pub fn latency_run(name: &str, profile: VelocityProfile, round_trip: DelayModel, duration_s: f64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new(name, Scene::flat(room(10.0)));
    cfg.area_center = Some([0.0, 0.0]);
    cfg.drive = Drive::Profile { profile };
    cfg.uplink = round_trip.scaled(0.5);
    cfg.downlink = round_trip.scaled(0.5);
    cfg.frame_period_ms = 0;
    cfg.duration_s = duration_s;
    cfg
}

/// 0.2 m/s straight line under a fixed 200 ms round trip.
pub fn straight_latency() -> ScenarioConfig {
    latency_run(
        "straight_latency",
        VelocityProfile::Constant { v: 0.2 },
        DelayModel::Fixed { ms: 200.0 },
        15.0,
    )
}

/// Same run with the round trip ramping from 100 to 200 ms.
pub fn ramp_latency() -> ScenarioConfig {
    latency_run(
        "ramp_latency",
        VelocityProfile::Constant { v: 0.2 },
        DelayModel::Ramp {
            from_ms: 100.0,
            to_ms: 200.0,
            duration_s: 15.0,
        },
        15.0,
    )
}

/// Accelerating run under a fixed 200 ms round trip.
pub fn ramp_velocity() -> ScenarioConfig {
    latency_run(
        "ramp_velocity",
        VelocityProfile::Ramp { v0: 0.05, accel: 0.02 },
        DelayModel::Fixed { ms: 200.0 },
        15.0,
    )
}

/// Oscillating speed under a fixed 200 ms round trip.
pub fn sine_velocity() -> ScenarioConfig {
    latency_run(
        "sine_velocity",
        VelocityProfile::Sine {
            offset: 0.2,
            amplitude: 0.1,
            period_s: 6.0,
        },
        DelayModel::Fixed { ms: 200.0 },
        15.0,
    )
}

pub fn latency_suite() -> Vec<ScenarioConfig> {
    vec![straight_latency(), ramp_latency(), ramp_velocity(), sine_velocity()]
}
