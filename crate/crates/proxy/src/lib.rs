//! Forward proxy that puts every agent request through a compiled
//! authorization table before it reaches the network.

mod api;
pub mod audit;
pub mod config;
pub mod mock_upstream;
pub mod replay;
pub mod server;
pub mod session;
pub mod tls;
mod upstream;

pub use api::{ContextReport, TOKEN_HEADER};
pub use audit::{AuditLog, EnforcementRecord};
pub use config::{Mode, ProxyConfig};
pub use server::{session_id, start, start_with, ProxyError, ProxyState, RunningProxy, VERDICT_HEADER};
pub use session::{DomainBundle, HostClass, SessionLoad, SessionRegistry, SessionState};
pub use upstream::UpstreamError;
