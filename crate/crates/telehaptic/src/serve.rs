//! Live session endpoint for the operator console. A session thread steps
//! the scenario in real time and pushes [`StateBroadcast`] JSON to every
//! connected WebSocket client; clients send interface-event JSON back.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use telehaptic_core::geometry::Aabb;
use telehaptic_core::interact::{InterfaceEvent, VirtualBody};
use telehaptic_core::plan::VirtualObstacle;
use tungstenite::{Message as WsMessage, WebSocket};

use crate::scenario::{EventOutcome, LabeledObject, ScenarioConfig, ScenarioError, Session};
use crate::shared::Snapshot;

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_CLOUD_POINTS: usize = 50_000;
/// Points actually sent; keeps a broadcast well under 1 MB.
pub const DEFAULT_CLOUD_POINTS: usize = 20_000;
pub const BROADCAST_PERIOD: Duration = Duration::from_millis(50);
const CLOUD_REFRESH: Duration = Duration::from_millis(1000);
const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    BindFailed { addr: String, source: std::io::Error },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotView {
    pub truth: [f64; 3],
    pub odometry: [f64; 3],
    pub predicted_goal: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HapticView {
    pub proxy: [f64; 3],
    pub force: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingView {
    pub tp_mean_s: Option<f64>,
    pub tr_max_s: Option<f64>,
    pub replans: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBroadcast {
    pub t_ms: u64,
    pub robot: RobotView,
    pub path: Vec<[f64; 2]>,
    pub markings: Vec<[f64; 2]>,
    pub obstacles: Vec<VirtualObstacle>,
    pub bodies: Vec<VirtualBody>,
    pub labeled_objects: Vec<LabeledObject>,
    pub cloud: Vec<[f32; 3]>,
    pub haptic: Option<HapticView>,
    pub timing: TimingView,
}

/// Server → client messages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Snapshot {
        schema_version: u32,
        scene_bounds: Aabb,
        state: Box<StateBroadcast>,
    },
    State(Box<StateBroadcast>),
    Ack(EventOutcome),
    Error { message: String },
}

/// Every `stride`-th surface point, at most `max` of them.
pub fn downsample_cloud(session: &Session, max: usize) -> Vec<[f32; 3]> {
    let pts = session.volume().surface_points(session.volume().voxel_size());
    let stride = pts.len().div_ceil(max.max(1)).max(1);
    pts.iter()
        .step_by(stride)
        .map(|p| {
            let q = |v: f64| ((v * 1000.0).round() / 1000.0) as f32;
            [q(p.position.x), q(p.position.y), q(p.position.z)]
        })
        .collect()
}

pub fn state_of(session: &Session, cloud: &[[f32; 3]], haptic: Option<HapticView>) -> StateBroadcast {
    let pose = |p: telehaptic_core::sim::Pose2| [p.x, p.y, p.theta];
    let metrics = session.metrics();
    StateBroadcast {
        t_ms: session.t_ms(),
        robot: RobotView {
            truth: pose(session.robot().truth),
            odometry: pose(session.robot().odometry),
            predicted_goal: session.last_goal().map(|g| [g.x, g.y]),
        },
        path: session
            .executive()
            .plan
            .as_ref()
            .map(|p| p.waypoints.iter().map(|w| [w.x, w.y]).collect())
            .unwrap_or_default(),
        markings: session.markings().iter().map(|m| [m.x, m.y]).collect(),
        obstacles: session.obstacles().to_vec(),
        bodies: session.bodies().to_vec(),
        labeled_objects: session.labeled_objects().to_vec(),
        cloud: cloud.to_vec(),
        haptic,
        timing: TimingView {
            tp_mean_s: metrics.tp.map(|s| s.mean),
            tr_max_s: metrics.tr.map(|s| s.max),
            replans: session.replans(),
        },
    }
}

/// Contact of a push hip with its body, as proxy and spring force.
fn push_haptic(session: &Session, event: &InterfaceEvent) -> Option<HapticView> {
    let InterfaceEvent::Push { body, hip } = event else { return None };
    let b = session.bodies().iter().find(|b| b.id == *body)?;
    let h = telehaptic_core::geometry::Vec3::new(hip[0], hip[1], hip[2]);
    let (depth, n) = b.penetration(&h).unwrap_or((0.0, telehaptic_core::geometry::Vec3::zeros()));
    let proxy = h + n * depth;
    let f = n * (b.stiffness * depth);
    Some(HapticView {
        proxy: [proxy.x, proxy.y, proxy.z],
        force: [f.x, f.y, f.z],
    })
}

type Clients = Arc<Mutex<Vec<mpsc::Sender<String>>>>;

/// Handle to a running server. Dropping it stops all threads.
pub struct ServeHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServeHandle {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the session thread exits.
    pub fn wait(mut self) {
        if let Some(t) = self.threads.pop() {
            let _ = t.join();
        }
        self.shutdown();
    }
}

impl Drop for ServeHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds `addr` and starts the session. The scenario keeps running past
/// task completion until stopped.
pub fn serve(cfg: ScenarioConfig, addr: &str) -> Result<ServeHandle, ServeError> {
    let session = Session::new(cfg)?;
    let listener = TcpListener::bind(addr).map_err(|source| ServeError::BindFailed {
        addr: addr.to_string(),
        source,
    })?;
    listener.set_nonblocking(true).map_err(|source| ServeError::BindFailed {
        addr: addr.to_string(),
        source,
    })?;
    let local = listener.local_addr().map_err(|source| ServeError::BindFailed {
        addr: addr.to_string(),
        source,
    })?;
    let stop = Arc::new(AtomicBool::new(false));
    let clients: Clients = Arc::default();
    let (event_tx, event_rx) = mpsc::channel::<(InterfaceEvent, mpsc::Sender<String>)>();
    let snapshot = Arc::new(Snapshot::new(String::new()));

    let accept = {
        let (stop, clients, snapshot) = (stop.clone(), clients.clone(), snapshot.clone());
        std::thread::spawn(move || {
            let mut workers = Vec::new();
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let (stop, clients, snapshot, events) =
                            (stop.clone(), clients.clone(), snapshot.clone(), event_tx.clone());
                        workers.push(std::thread::spawn(move || {
                            let _ = client_loop(stream, stop, clients, snapshot, events);
                        }));
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
                    Err(_) => break,
                }
            }
            for w in workers {
                let _ = w.join();
            }
        })
    };
    let run = {
        let stop = stop.clone();
        std::thread::spawn(move || session_loop(session, stop, clients, snapshot, event_rx))
    };
    Ok(ServeHandle {
        addr: local,
        stop,
        threads: vec![accept, run],
    })
}

fn session_loop(
    mut session: Session,
    stop: Arc<AtomicBool>,
    clients: Clients,
    snapshot: Arc<Snapshot<String>>,
    events: mpsc::Receiver<(InterfaceEvent, mpsc::Sender<String>)>,
) {
    let tick = Duration::from_millis(session.cfg.tick_ms);
    let bounds = session.cfg.scene.bounds;
    let mut cloud = Vec::new();
    let mut cloud_at: Option<Instant> = None;
    let mut haptic = None;
    let mut next_tick = Instant::now();
    let mut next_broadcast = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        while let Ok((event, reply)) = events.try_recv() {
            let before = session.outcomes.len();
            if let Some(h) = push_haptic(&session, &event) {
                haptic = Some(h);
            }
            session.apply_event(event);
            let msg = match session.outcomes.get(before..).and_then(|o| o.last()) {
                Some(o) => ServerMessage::Ack(o.clone()),
                None => ServerMessage::Error {
                    message: "event produced no outcome".into(),
                },
            };
            let _ = reply.send(to_json(&msg));
        }
        let now = Instant::now();
        if now >= next_tick {
            session.step();
            next_tick += tick;
        }
        if now >= next_broadcast {
            if cloud_at.is_none_or(|t| t.elapsed() >= CLOUD_REFRESH) {
                cloud = downsample_cloud(&session, DEFAULT_CLOUD_POINTS);
                cloud_at = Some(Instant::now());
            }
            let state = state_of(&session, &cloud, haptic.clone());
            snapshot.publish(to_json(&ServerMessage::Snapshot {
                schema_version: SCHEMA_VERSION,
                scene_bounds: bounds,
                state: Box::new(state.clone()),
            }));
            let text = to_json(&ServerMessage::State(Box::new(state)));
            clients.lock().expect("clients lock").retain(|c| c.send(text.clone()).is_ok());
            next_broadcast += BROADCAST_PERIOD;
        }
        let wake = next_tick.min(next_broadcast);
        std::thread::sleep(wake.saturating_duration_since(Instant::now()).min(POLL));
    }
}

fn to_json(m: &ServerMessage) -> String {
    serde_json::to_string(m).expect("broadcast serializes")
}

fn client_loop(
    stream: TcpStream,
    stop: Arc<AtomicBool>,
    clients: Clients,
    snapshot: Arc<Snapshot<String>>,
    events: mpsc::Sender<(InterfaceEvent, mpsc::Sender<String>)>,
) -> Result<(), tungstenite::Error> {
    stream.set_nonblocking(false)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_mut().set_read_timeout(Some(POLL))?;
    // wait for the first state so the snapshot is complete
    let first = loop {
        let (generation, s) = snapshot.load();
        if generation > 0 {
            break s.as_ref().clone();
        }
        if stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        std::thread::sleep(POLL);
    };
    ws.send(WsMessage::text(first))?;
    let (tx, rx) = mpsc::channel();
    clients.lock().expect("clients lock").push(tx.clone());
    while !stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(WsMessage::Text(t)) => match serde_json::from_str::<InterfaceEvent>(&t) {
                Ok(ev) => {
                    if events.send((ev, tx.clone())).is_err() {
                        break;
                    }
                }
                Err(e) => send_now(&mut ws, &ServerMessage::Error {
                    message: format!("malformed command: {e}"),
                })?,
            },
            Ok(WsMessage::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
        while let Ok(text) = rx.try_recv() {
            ws.send(WsMessage::text(text))?;
        }
    }
    let _ = ws.close(None);
    Ok(())
}

fn send_now(ws: &mut WebSocket<TcpStream>, m: &ServerMessage) -> Result<(), tungstenite::Error> {
    ws.send(WsMessage::text(to_json(m)))
}
