//! HTTP facade for live adaptive trials.
//!
//! Each session is an append-only JSON-lines event log plus a config
//! sidecar. State is rebuilt by replaying the log, so a restarted server
//! serves exactly what it acknowledged before.

mod api;
mod session;
mod store;

use std::net::SocketAddr;
use std::path::PathBuf;

pub use api::{router, ApiError, AppState, OpenError};
pub use session::{NextView, StateView, SurePoint};
pub use store::{SessionMeta, Store, StoreError};

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
    /// Static bearer token required on every request when set.
    pub token: Option<String>,
}

/// Binds, serves until Ctrl-C, then shuts down gracefully.
pub async fn serve(opts: ServeOptions) -> anyhow::Result<()> {
    let state = AppState::open(Store::open(&opts.data_dir)?, opts.token)?;
    let listener = tokio::net::TcpListener::bind(opts.addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
