//! Snapshot publication between loops. The writer publishes a new immutable
//! snapshot; readers clone the current `Arc` and never wait on the writer's
//! work, only on the pointer swap.

use std::sync::{Arc, Mutex};

use telehaptic_core::tsdf::TsdfVolume;

#[derive(Debug)]
pub struct Snapshot<T> {
    slot: Mutex<(u64, Arc<T>)>,
}

impl<T> Snapshot<T> {
    pub fn new(value: T) -> Self {
        Self {
            slot: Mutex::new((0, Arc::new(value))),
        }
    }

    /// Replaces the current value; returns the new generation.
    pub fn publish(&self, value: T) -> u64 {
        let value = Arc::new(value);
        let mut s = self.slot.lock().expect("snapshot lock");
        s.0 += 1;
        s.1 = value;
        s.0
    }

    pub fn load(&self) -> (u64, Arc<T>) {
        let s = self.slot.lock().expect("snapshot lock");
        (s.0, Arc::clone(&s.1))
    }

    pub fn generation(&self) -> u64 {
        self.slot.lock().expect("snapshot lock").0
    }
}

/// The volume as seen by the haptic and control loops.
pub type SharedVolume = Snapshot<TsdfVolume>;
