//! Transport, file formats, scenario orchestration and the live session
//! server around `telehaptic-core`.

pub mod bench;
pub mod channel;
pub mod formats;
pub mod rtt;
pub mod scenario;
pub mod serve;
pub mod shared;
pub mod wire;

pub use telehaptic_core as core;
