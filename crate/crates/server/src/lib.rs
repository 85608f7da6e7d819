//! HTTP editing service over brushwork style models.
//!
//! Images travel as PNG in both directions; everything else is JSON.
//! Sessions live in memory and hold the content at preview resolution.

use std::sync::Arc;

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;

pub mod error;
pub mod routes;
pub mod state;

pub use error::{ApiError, ApiResult};
pub use routes::MaskPayload;
pub use state::{AppState, ServerConfig, SessionSummary, StyleInfo};

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/styles", get(routes::list_styles))
        .route("/sessions", post(routes::create_session))
        .route("/sessions/{id}", get(routes::get_session))
        .route("/sessions/{id}/stylize", post(routes::stylize))
        .route("/sessions/{id}/levels", post(routes::levels))
        .route("/sessions/{id}/levels/{index}", get(routes::level_preview))
        .route("/sessions/{id}/blend", post(routes::blend))
        .route("/sessions/{id}/export", post(routes::export))
        .route("/jobs/{id}", get(routes::job))
        .route("/jobs/{id}/result", get(routes::job_result))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Loads the style registry and serves until the process is stopped.
pub async fn serve(config: ServerConfig) -> brushwork::Result<()> {
    let addr = format!("{}:{}", config.host, config.port);
    let state = Arc::new(AppState::new(config)?);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| brushwork::Error::Config(format!("cannot listen on {addr}: {e}")))?;
    log::info!("listening on {addr} with {} styles", state.styles().count());
    axum::serve(listener, router(state))
        .await
        .map_err(|e| brushwork::Error::Config(format!("server stopped: {e}")))
}
