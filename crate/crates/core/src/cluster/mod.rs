//! Cluster composition: configuration, wire format, transports, the shared
//! storage server and the simulated network.

mod config;
mod netsim;
mod storage;
mod transport;
pub mod wire;

pub use config::{
    AppConfig, ConfigError, DeviceConfig, DistCacheConfig, Mode, NetworkConfig, NodeConfig,
    RunConfig, RuntimeConfig, StorageConfig,
};
pub use netsim::SimNetwork;
pub use storage::{DirStorage, MemStorage, SimStorage, Storage, StorageError, TokenBucket};
pub use transport::{in_process, InProcTransport, Inbox, TcpTransport, Transport, TransportError};
pub use wire::Frame;
