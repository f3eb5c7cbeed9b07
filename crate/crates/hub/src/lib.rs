//! The hub: a TCP server that replays configured datasets, accepts device
//! and client connections, runs per-subscription pipelines and fans data out
//! over the line-delimited JSON protocol.

pub mod client;
pub mod clock;
pub mod config;
pub mod outbox;
mod router;
mod server;
pub mod stats;

pub use client::{Client, ClientError, Frame};
pub use clock::HubClock;
pub use config::{ConfigError, DeviceConfig, HubConfig, Limits, ReplayConfig, SourceConfig};
pub use server::{start, HubError, HubHandle};
pub use stats::{SessionStats, StatsSnapshot};
