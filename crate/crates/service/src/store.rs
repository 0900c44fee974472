//! In-memory session table with idle eviction and optional snapshots.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use icount::session::InteractiveSession;
use tokio::sync::RwLock as AsyncRwLock;

use crate::api::{CreateRequest, FeedbackRequest, SessionPayload};
use crate::config::ServiceConfig;
use crate::error::ApiError;
use crate::snapshot;

/// A rendered session state: the typed payload and its JSON encoding.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub payload: Arc<SessionPayload>,
    pub json: Bytes,
}

impl Rendered {
    fn new(id: &str, blind: bool, session: &InteractiveSession) -> Result<Self, ApiError> {
        let payload = SessionPayload::build(id, blind, session);
        let json = serde_json::to_vec(&payload).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(Self {
            payload: Arc::new(payload),
            json: Bytes::from(json),
        })
    }
}

pub(crate) struct Live {
    id: String,
    request: CreateRequest,
    session: InteractiveSession,
    rendered: Rendered,
}

struct Slot {
    live: Arc<AsyncRwLock<Live>>,
    /// Milliseconds since the store epoch.
    last_used: AtomicU64,
}

pub struct SessionStore {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    epoch: Instant,
}

impl SessionStore {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            config,
            sessions: RwLock::new(HashMap::new()),
            epoch: Instant::now(),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.sessions.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        let slot = self
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
        slot.last_used.store(self.now_ms(), Ordering::Relaxed);
        Ok(slot)
    }

    fn insert(&self, live: Live) -> Rendered {
        let rendered = live.rendered.clone();
        let slot = Slot {
            last_used: AtomicU64::new(self.now_ms()),
            live: Arc::new(AsyncRwLock::new(live)),
        };
        let id = slot.live.try_read().expect("fresh lock").id.clone();
        self.sessions.write().unwrap().insert(id, Arc::new(slot));
        rendered
    }

    /// Builds a session from the request. CPU-bound; call off the async runtime.
    pub fn create(&self, request: CreateRequest) -> Result<Rendered, ApiError> {
        let session = request.build(&self.config.session, self.config.max_grid_side)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let rendered = Rendered::new(&id, request.blind, &session)?;
        let live = Live {
            id,
            request,
            session,
            rendered,
        };
        self.persist(&live);
        Ok(self.insert(live))
    }

    pub async fn get(&self, id: &str) -> Result<Rendered, ApiError> {
        let slot = self.slot(id)?;
        let live = slot.live.read().await;
        Ok(live.rendered.clone())
    }

    /// Applies one interaction. The session stays locked for writing while the
    /// adaptation runs on the blocking pool, so requests on it queue up.
    pub async fn feedback(self: &Arc<Self>, id: &str, request: FeedbackRequest) -> Result<Rendered, ApiError> {
        let slot = self.slot(id)?;
        let mut live = slot.live.clone().write_owned().await;
        let generation = live.session.generation();
        if request.generation.is_some_and(|g| g != generation) {
            return Err(ApiError::conflict(
                "stale_generation",
                format!("region picked from generation {:?}, session is at {generation}", request.generation),
            ));
        }
        if request.region_id as usize >= live.session.region_count() {
            return Err(ApiError::conflict(
                "stale_region",
                format!("region {} does not exist in generation {generation}", request.region_id),
            ));
        }
        let store = Arc::clone(self);
        let rendered = tokio::task::spawn_blocking(move || {
            live.session.submit(request.region_id, request.range_index)?;
            live.rendered = Rendered::new(&live.id, live.request.blind, &live.session)?;
            store.persist(&live);
            Ok::<_, ApiError>(live.rendered.clone())
        })
        .await
        .map_err(|e| ApiError::internal(format!("adaptation task failed: {e}")))??;
        slot.last_used.store(self.now_ms(), Ordering::Relaxed);
        Ok(rendered)
    }

    pub fn delete(&self, id: &str) -> Result<(), ApiError> {
        self.sessions
            .write()
            .unwrap()
            .remove(id)
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
        if let Some(dir) = &self.config.snapshot_dir {
            snapshot::remove(dir, id);
        }
        Ok(())
    }

    /// Drops sessions idle for longer than the configured TTL; returns how many.
    pub fn evict_idle(&self) -> usize {
        let ttl = self.config.idle_ttl().as_millis() as u64;
        let now = self.now_ms();
        let expired: Vec<String> = self
            .sessions
            .read()
            .unwrap()
            .iter()
            .filter(|(_, s)| now.saturating_sub(s.last_used.load(Ordering::Relaxed)) >= ttl)
            .map(|(id, _)| id.clone())
            .collect();
        for id in &expired {
            tracing::info!(session = %id, "evicting idle session");
            let _ = self.delete(id);
        }
        expired.len()
    }

    fn persist(&self, live: &Live) {
        if let Some(dir) = &self.config.snapshot_dir {
            if let Err(e) = snapshot::write(dir, &live.id, &live.request, &live.session) {
                tracing::warn!(session = %live.id, "snapshot failed: {e}");
            }
        }
    }

    /// Loads every snapshot in the configured directory; returns how many
    /// sessions came back. Unreadable snapshots are logged and skipped.
    pub fn restore(&self) -> usize {
        let Some(dir) = &self.config.snapshot_dir else {
            return 0;
        };
        let paths = match snapshot::list(dir) {
            Ok(p) => p,
            Err(e) => {
                tracing::warn!("listing snapshots: {e}");
                return 0;
            }
        };
        let mut restored = 0;
        for path in paths {
            match self.restore_one(dir, &path) {
                Ok(()) => restored += 1,
                Err(e) => tracing::warn!("skipping snapshot {}: {e}", path.display()),
            }
        }
        restored
    }

    fn restore_one(&self, dir: &Path, path: &Path) -> Result<(), ApiError> {
        let internal = |e: snapshot::SnapshotError| ApiError::internal(e.to_string());
        let saved = snapshot::read(path).map_err(internal)?;
        let mut session = saved.request.build(&self.config.session, self.config.max_grid_side)?;
        session.restore(
            saved.adapt,
            saved.feedback.into_iter().map(Into::into).collect(),
            saved.iteration,
            saved.generation,
        )?;
        let stored = icount::formats::load_dgrid(snapshot::prediction_path(dir, &saved.id))?;
        let drift = stored
            .values()
            .iter()
            .zip(session.prediction().values())
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-3))
            .fold(0.0, f64::max);
        if stored.len() != session.prediction().len() || drift > 1e-4 {
            return Err(ApiError::internal(format!("restored prediction drifted by {drift:e}")));
        }
        let rendered = Rendered::new(&saved.id, saved.request.blind, &session)?;
        self.insert(Live {
            id: saved.id,
            request: saved.request,
            session,
            rendered,
        });
        Ok(())
    }
}
