//! A live trial session and the read views published after each write.

use std::sync::Arc;

use adashrink::trial::{Event, Phase, Snapshot, TrialConfig, TrialState};
use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::store::SessionMeta;

/// Body of `GET /v1/trials/{id}/next`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct NextView {
    pub arm: usize,
    /// Empty during burn-in.
    pub candidate_risks: Vec<f64>,
    pub phase: Phase,
    pub version: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurePoint {
    pub i: usize,
    pub sure: f64,
}

/// Body of `GET /v1/trials/{id}/state`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StateView {
    pub id: String,
    pub created_at: u64,
    pub version: usize,
    pub config: TrialConfig,
    #[serde(flatten)]
    pub snapshot: Snapshot,
    pub sure_path: Vec<SurePoint>,
}

/// Immutable views computed once per version.
#[derive(Debug)]
pub struct Views {
    pub version: usize,
    pub next: Result<NextView, String>,
    pub state: Result<StateView, String>,
}

impl Views {
    fn compute(meta: &SessionMeta, state: &TrialState) -> Self {
        let version = state.arrivals();
        let snapshot = state.snapshot().map_err(|e| e.to_string());
        let next = snapshot.as_ref().map_err(Clone::clone).and_then(|s| {
            let arm = match s.recommended {
                Some(a) => a,
                None => state.next_assignment().map_err(|e| e.to_string())?,
            };
            Ok(NextView {
                arm,
                candidate_risks: s.candidate_risks.clone().unwrap_or_default(),
                phase: s.phase,
                version,
            })
        });
        let state = snapshot.map(|snapshot| StateView {
            id: meta.id.clone(),
            created_at: meta.created_at,
            version,
            config: meta.config.clone(),
            snapshot,
            sure_path: state
                .sure_path()
                .iter()
                .map(|&(i, sure)| SurePoint { i, sure })
                .collect(),
        });
        Self {
            version,
            next,
            state,
        }
    }
}

/// Writer-side state of one session.
pub struct Live {
    pub meta: SessionMeta,
    pub state: TrialState,
}

pub struct Session {
    /// Serializes writers; held while appending and recomputing views.
    pub live: Mutex<Live>,
    views: RwLock<Arc<Views>>,
}

impl Session {
    pub fn new(meta: SessionMeta, state: TrialState) -> Self {
        let views = Arc::new(Views::compute(&meta, &state));
        Self {
            live: Mutex::new(Live { meta, state }),
            views: RwLock::new(views),
        }
    }

    pub fn replay(meta: SessionMeta, events: &[Event]) -> adashrink::Result<Self> {
        let state = TrialState::replay(meta.config.clone(), events)?;
        Ok(Self::new(meta, state))
    }

    pub fn views(&self) -> Arc<Views> {
        self.views.read().clone()
    }

    /// Recomputes and publishes the views; call with `live` locked.
    pub fn publish(&self, live: &Live) {
        *self.views.write() = Arc::new(Views::compute(&live.meta, &live.state));
    }
}
