//! In-memory refinement sessions.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::SystemTime;

use refineir::{QueryState, SnappedCrop, Tier};
use serde::{Deserialize, Serialize};

/// One client's query state. The snapped crop is kept alongside the state so
/// clients can outline the region actually searched.
#[derive(Debug, Clone)]
pub struct Session {
    id: String,
    state: QueryState,
    crop: Option<SnappedCrop>,
    created_at: SystemTime,
}

impl Session {
    fn new(id: String, state: QueryState) -> Self {
        Self {
            id,
            state,
            crop: None,
            created_at: SystemTime::now(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> &QueryState {
        &self.state
    }

    pub fn crop(&self) -> Option<&SnappedCrop> {
        self.crop.as_ref()
    }

    pub fn created_at(&self) -> SystemTime {
        self.created_at
    }

    /// Applies `op` to a copy of the state and keeps the result only on success.
    pub fn update<T, E>(
        &mut self,
        op: impl FnOnce(&mut QueryState, &mut Option<SnappedCrop>) -> Result<T, E>,
    ) -> Result<T, E> {
        let mut state = self.state.clone();
        let mut crop = self.crop.clone();
        let out = op(&mut state, &mut crop)?;
        self.state = state;
        self.crop = crop;
        Ok(out)
    }

    pub fn view(&self, search_tier: Tier) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            base_image_id: self.state.base_image_id().to_owned(),
            active_crop: self.crop.clone(),
            pinned_example_ids: self.state.pinned_example_ids().to_vec(),
            sliders: self.state.sliders().clone(),
            category_filter: self.state.category_filter().cloned(),
            slider_scale: self.state.slider_scale(),
            search_tier,
        }
    }
}

/// Wire form of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub base_image_id: String,
    pub active_crop: Option<SnappedCrop>,
    pub pinned_example_ids: Vec<String>,
    pub sliders: BTreeMap<String, f64>,
    pub category_filter: Option<BTreeSet<String>>,
    pub slider_scale: f64,
    pub search_tier: Tier,
}

pub type SessionHandle = Arc<Mutex<Session>>;

/// Session table. Ids come from a counter so a fresh store replays identically.
#[derive(Debug, Default)]
pub struct SessionStore {
    next: AtomicU64,
    sessions: RwLock<BTreeMap<String, SessionHandle>>,
}

impl SessionStore {
    pub fn create(&self, state: QueryState) -> SessionHandle {
        let n = self.next.fetch_add(1, Ordering::Relaxed) + 1;
        let id = format!("s{n}");
        let handle = Arc::new(Mutex::new(Session::new(id.clone(), state)));
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, Arc::clone(&handle));
        handle
    }

    pub fn get(&self, id: &str) -> Option<SessionHandle> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
    }

    pub fn remove(&self, id: &str) -> bool {
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .remove(id)
            .is_some()
    }

    pub fn len(&self) -> usize {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
