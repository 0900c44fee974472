//! HTTP service hosting interactive counting sessions.
//!
//! Each session owns a synthesized counter, its refinement state and the
//! feedback collected so far. Clients create a session, read the segmented
//! prediction, and post region/range pairs; every post adapts the counter and
//! returns the refreshed state.

pub mod api;
pub mod config;
pub mod error;
pub mod routes;
pub mod snapshot;
pub mod store;

use std::sync::Arc;
use std::time::Duration;

pub use api::{CreateRequest, FeedbackRequest, SessionPayload};
pub use config::ServiceConfig;
pub use error::ApiError;
pub use routes::router;
pub use store::SessionStore;

/// Binds, restores snapshots, and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    let store = Arc::new(SessionStore::new(config));
    let restored = store.restore();
    tracing::info!(addr = %listener.local_addr()?, restored, "listening");

    let sweeper = Arc::clone(&store);
    let period = (store.config().idle_ttl() / 4).clamp(Duration::from_secs(1), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            sweeper.evict_idle();
        }
    });

    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
