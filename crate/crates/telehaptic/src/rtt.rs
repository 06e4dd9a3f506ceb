//! Round-trip delay estimation from ping/pong pairs, exponentially smoothed
//! in time.

use std::collections::VecDeque;

pub const DEFAULT_HALF_LIFE_S: f64 = 2.0;
pub const DEFAULT_TIMEOUT_S: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum RttError {
    #[error("no ping response within the timeout")]
    Timeout,
    #[error("no round trip measured yet")]
    NoSamples,
}

#[derive(Clone, Debug)]
pub struct RttEstimator {
    pub half_life_s: f64,
    pub timeout_s: f64,
    estimate_s: Option<f64>,
    last_sample_s: f64,
    last_heard_s: Option<f64>,
    pending: VecDeque<(u32, f64)>,
    next_seq: u32,
}

impl Default for RttEstimator {
    fn default() -> Self {
        Self::new(DEFAULT_HALF_LIFE_S, DEFAULT_TIMEOUT_S)
    }
}

impl RttEstimator {
    pub fn new(half_life_s: f64, timeout_s: f64) -> Self {
        Self {
            half_life_s,
            timeout_s,
            estimate_s: None,
            last_sample_s: 0.0,
            last_heard_s: None,
            pending: VecDeque::new(),
            next_seq: 0,
        }
    }

    /// Registers a ping sent at `now_s` and returns its sequence number.
    pub fn ping(&mut self, now_s: f64) -> u32 {
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        self.pending.push_back((seq, now_s));
        seq
    }

    /// Folds in the pong for `seq`; returns the raw sample. Unknown or
    /// duplicate sequence numbers are ignored.
    pub fn pong(&mut self, seq: u32, now_s: f64) -> Option<f64> {
        let i = self.pending.iter().position(|(s, _)| *s == seq)?;
        let (_, sent) = self.pending[i];
        // older pings are answered in order, so anything before is lost
        self.pending.drain(..=i);
        let sample = now_s - sent;
        self.estimate_s = Some(match self.estimate_s {
            None => sample,
            Some(e) => {
                let dt = (now_s - self.last_sample_s).max(0.0);
                let a = 1.0 - 0.5f64.powf(dt / self.half_life_s);
                e + a * (sample - e)
            }
        });
        self.last_sample_s = now_s;
        self.last_heard_s = Some(now_s);
        Some(sample)
    }

    /// Smoothed round trip in seconds, or `Timeout` when the oldest
    /// unanswered ping is older than the timeout.
    pub fn estimate(&self, now_s: f64) -> Result<f64, RttError> {
        if let Some(&(_, sent)) = self.pending.front() {
            if now_s - sent > self.timeout_s {
                return Err(RttError::Timeout);
            }
        }
        self.estimate_s.ok_or(RttError::NoSamples)
    }

    pub fn last_heard_s(&self) -> Option<f64> {
        self.last_heard_s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_weight_halves_per_half_life() {
        let mut r = RttEstimator::default();
        let s = r.ping(0.0);
        r.pong(s, 0.1);
        let s = r.ping(1.9);
        r.pong(s, 2.1);
        // sample 0.2 arriving one half-life later moves halfway
        assert!((r.estimate(2.1).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn unanswered_ping_times_out() {
        let mut r = RttEstimator::default();
        assert_eq!(r.estimate(0.0), Err(RttError::NoSamples));
        r.ping(0.0);
        assert_eq!(r.estimate(2.5), Err(RttError::Timeout));
        assert_eq!(r.pong(99, 2.6), None);
    }
}
