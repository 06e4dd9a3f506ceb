//! Delay injection. A [`DelayModel`] gives the one-way latency at each send
//! time; channels release messages no earlier than `send + delay`, never
//! reorder, and optionally cap the release rate.

use std::collections::VecDeque;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub const DELAY_ENV: &str = "TELEHAPTIC_DELAY_MS";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChannelError {
    #[error("delays must be finite and nonnegative")]
    NegativeDelay,
    #[error("ramp duration must be positive")]
    BadDuration,
    #[error("cannot parse delay spec {0:?}")]
    Parse(String),
    #[error("timed out")]
    Timeout,
    #[error("channel closed")]
    Closed,
}

/// One-way latency model for a single direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayModel {
    Fixed { ms: f64 },
    /// Linear from `from_ms` to `to_ms` over `duration_s`, then held.
    Ramp { from_ms: f64, to_ms: f64, duration_s: f64 },
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel::Fixed { ms: 0.0 }
    }
}

impl DelayModel {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let ok = |d: f64| d.is_finite() && d >= 0.0;
        match *self {
            DelayModel::Fixed { ms } if !ok(ms) => Err(ChannelError::NegativeDelay),
            DelayModel::Ramp { from_ms, to_ms, .. } if !ok(from_ms) || !ok(to_ms) => Err(ChannelError::NegativeDelay),
            DelayModel::Ramp { duration_s, .. } if !(duration_s > 0.0 && duration_s.is_finite()) => Err(ChannelError::BadDuration),
            _ => Ok(()),
        }
    }

    /// One-way delay in ms for a message sent at `t_ms` since session start.
    pub fn delay_ms(&self, t_ms: f64) -> f64 {
        match *self {
            DelayModel::Fixed { ms } => ms,
            DelayModel::Ramp { from_ms, to_ms, duration_s } => {
                let s = (t_ms / (duration_s * 1000.0)).clamp(0.0, 1.0);
                from_ms + (to_ms - from_ms) * s
            }
        }
    }

    /// The same model with every delay scaled by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        match *self {
            DelayModel::Fixed { ms } => DelayModel::Fixed { ms: ms * k },
            DelayModel::Ramp { from_ms, to_ms, duration_s } => DelayModel::Ramp {
                from_ms: from_ms * k,
                to_ms: to_ms * k,
                duration_s,
            },
        }
    }

    /// Parses `"MS"` as Fixed or `"FROM:TO:SECONDS"` as Ramp.
    pub fn parse(spec: &str) -> Result<Self, ChannelError> {
        let bad = || ChannelError::Parse(spec.to_string());
        let nums: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        let m = match nums[..] {
            [ms] => DelayModel::Fixed { ms },
            [from_ms, to_ms, duration_s] => DelayModel::Ramp { from_ms, to_ms, duration_s },
            _ => return Err(bad()),
        };
        m.validate()?;
        Ok(m)
    }

    /// Replaces a Fixed model's delay with `TELEHAPTIC_DELAY_MS` when set.
    pub fn with_env_override(self) -> Result<Self, ChannelError> {
        self.with_override(std::env::var(DELAY_ENV).ok().as_deref())
    }

    pub fn with_override(self, value: Option<&str>) -> Result<Self, ChannelError> {
        match (self, value) {
            (DelayModel::Fixed { .. }, Some(v)) => {
                let ms: f64 = v.trim().parse().map_err(|_| ChannelError::Parse(v.to_string()))?;
                let m = DelayModel::Fixed { ms };
                m.validate()?;
                Ok(m)
            }
            (m, _) => Ok(m),
        }
    }
}

/// Release-time bookkeeping shared by both channel flavors.
#[derive(Clone, Debug)]
struct Scheduler {
    model: DelayModel,
    min_interval_ms: f64,
    last_release: Option<f64>,
}

impl Scheduler {
    fn new(model: DelayModel, fps_cap: Option<f64>) -> Self {
        Self {
            model,
            min_interval_ms: fps_cap.map_or(0.0, |f| 1000.0 / f),
            last_release: None,
        }
    }

    fn release_for(&mut self, t_ms: f64) -> f64 {
        let mut r = t_ms + self.model.delay_ms(t_ms);
        if let Some(last) = self.last_release {
            r = r.max(last + self.min_interval_ms);
        }
        self.last_release = Some(r);
        r
    }
}

/// Deterministic channel driven by caller-supplied virtual time.
#[derive(Clone, Debug)]
pub struct VirtualChannel<T> {
    sched: Scheduler,
    queue: VecDeque<(f64, T)>,
}

impl<T> VirtualChannel<T> {
    pub fn new(model: DelayModel) -> Self {
        Self::with_cap(model, None)
    }

    /// Caps releases at `fps` messages per second.
    pub fn with_cap(model: DelayModel, fps: Option<f64>) -> Self {
        Self {
            sched: Scheduler::new(model, fps),
            queue: VecDeque::new(),
        }
    }

    pub fn model(&self) -> DelayModel {
        self.sched.model
    }

    /// Enqueues `msg` sent at `t_ms`; returns its release time.
    pub fn send(&mut self, t_ms: f64, msg: T) -> f64 {
        let r = self.sched.release_for(t_ms);
        self.queue.push_back((r, msg));
        r
    }

    /// Pops the next message released by `now_ms`.
    pub fn recv(&mut self, now_ms: f64) -> Option<(f64, T)> {
        if self.queue.front().is_some_and(|(r, _)| *r <= now_ms) {
            self.queue.pop_front()
        } else {
            None
        }
    }

    /// All messages released by `now_ms`, in order.
    pub fn drain_ready(&mut self, now_ms: f64) -> Vec<(f64, T)> {
        let mut out = Vec::new();
        while let Some(m) = self.recv(now_ms) {
            out.push(m);
        }
        out
    }

    pub fn next_release(&self) -> Option<f64> {
        self.queue.front().map(|(r, _)| *r)
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}

struct SharedSched {
    epoch: Instant,
    sched: Scheduler,
}

/// Sending half of a wall-clock delayed channel. Clones share one release
/// schedule, so messages from several producers are still released in
/// send order.
pub struct DelayedSender<T> {
    shared: Arc<Mutex<SharedSched>>,
    tx: mpsc::Sender<(Instant, T)>,
}

impl<T> Clone for DelayedSender<T> {
    fn clone(&self) -> Self {
        Self {
            shared: Arc::clone(&self.shared),
            tx: self.tx.clone(),
        }
    }
}

impl<T> DelayedSender<T> {
    pub fn send(&self, msg: T) -> Result<(), ChannelError> {
        let mut s = self.shared.lock().expect("scheduler lock");
        let now_ms = s.epoch.elapsed().as_secs_f64() * 1000.0;
        let r = s.sched.release_for(now_ms);
        let at = s.epoch + Duration::from_secs_f64(r / 1000.0);
        // sent under the lock so queue order equals release order
        self.tx.send((at, msg)).map_err(|_| ChannelError::Closed)
    }
}

pub struct DelayedReceiver<T> {
    rx: mpsc::Receiver<(Instant, T)>,
    pending: Option<(Instant, T)>,
}

impl<T> DelayedReceiver<T> {
    /// Blocks until the next message is released or `timeout` passes.
    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<T, ChannelError> {
        let deadline = Instant::now() + timeout;
        let (at, msg) = match self.pending.take() {
            Some(p) => p,
            None => match self.rx.recv_timeout(timeout) {
                Ok(p) => p,
                Err(mpsc::RecvTimeoutError::Timeout) => return Err(ChannelError::Timeout),
                Err(mpsc::RecvTimeoutError::Disconnected) => return Err(ChannelError::Closed),
            },
        };
        if at > deadline {
            std::thread::sleep(deadline.saturating_duration_since(Instant::now()));
            self.pending = Some((at, msg));
            return Err(ChannelError::Timeout);
        }
        std::thread::sleep(at.saturating_duration_since(Instant::now()));
        Ok(msg)
    }

    /// Returns a message only if it is already released.
    pub fn try_recv(&mut self) -> Result<T, ChannelError> {
        let (at, msg) = match self.pending.take() {
            Some(p) => p,
            None => match self.rx.try_recv() {
                Ok(p) => p,
                Err(mpsc::TryRecvError::Empty) => return Err(ChannelError::Timeout),
                Err(mpsc::TryRecvError::Disconnected) => return Err(ChannelError::Closed),
            },
        };
        if at > Instant::now() {
            self.pending = Some((at, msg));
            return Err(ChannelError::Timeout);
        }
        Ok(msg)
    }
}

/// Wall-clock channel applying `model` and an optional release-rate cap.
pub fn delayed_channel<T>(model: DelayModel, fps_cap: Option<f64>) -> (DelayedSender<T>, DelayedReceiver<T>) {
    let (tx, rx) = mpsc::channel();
    let shared = Arc::new(Mutex::new(SharedSched {
        epoch: Instant::now(),
        sched: Scheduler::new(model, fps_cap),
    }));
    (DelayedSender { shared, tx }, DelayedReceiver { rx, pending: None })
}
