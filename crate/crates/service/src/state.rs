use std::collections::VecDeque;
use std::sync::{Arc, Mutex, MutexGuard};

use gaussfield::Model;
use serde::Serialize;
use tokio::sync::broadcast;

pub const DEFAULT_UNDO_DEPTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Idle,
    Running,
    Done,
    Error,
}

/// Latest training progress, as reported by `/api/status`.
#[derive(Clone, Debug, Serialize)]
pub struct Status {
    pub state: JobState,
    pub job_id: Option<u64>,
    pub iter: usize,
    /// `null` before the first record.
    pub loss: Option<f64>,
    /// `null` before the first record or when infinite.
    pub psnr: Option<f64>,
    pub version: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Bounded history of previous working copies. Pushing onto a full stack
/// drops the oldest entry.
#[derive(Debug)]
pub struct UndoStack {
    depth: usize,
    entries: VecDeque<Arc<Model>>,
}

impl UndoStack {
    pub fn new(depth: usize) -> Self {
        Self { depth, entries: VecDeque::with_capacity(depth) }
    }

    pub fn push(&mut self, model: Arc<Model>) {
        if self.depth == 0 {
            return;
        }
        if self.entries.len() == self.depth {
            self.entries.pop_front();
        }
        self.entries.push_back(model);
    }

    pub fn pop(&mut self) -> Option<Arc<Model>> {
        self.entries.pop_back()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[derive(Debug)]
pub(crate) struct Session {
    /// Working copy. Replaced wholesale on every change, so readers can
    /// hold a snapshot without blocking the mutator.
    pub model: Option<Arc<Model>>,
    pub version: u64,
    pub undo: UndoStack,
    pub status: Status,
    pub next_job: u64,
}

impl Session {
    pub fn is_training(&self) -> bool {
        self.status.state == JobState::Running
    }

    pub fn status(&self) -> Status {
        Status { version: self.version, ..self.status.clone() }
    }
}

/// Shared server state; cheap to clone.
#[derive(Clone, Debug)]
pub struct AppState {
    pub(crate) session: Arc<Mutex<Session>>,
    pub(crate) events: broadcast::Sender<String>,
    /// Held by edits and undos for their whole duration.
    pub(crate) mutator: Arc<tokio::sync::Mutex<()>>,
}

impl AppState {
    pub fn new(model: Option<Model>) -> Self {
        Self::with_undo_depth(model, DEFAULT_UNDO_DEPTH)
    }

    pub fn with_undo_depth(model: Option<Model>, depth: usize) -> Self {
        let (events, _) = broadcast::channel(1024);
        let session = Session {
            version: u64::from(model.is_some()),
            model: model.map(Arc::new),
            undo: UndoStack::new(depth),
            status: Status {
                state: JobState::Idle,
                job_id: None,
                iter: 0,
                loss: None,
                psnr: None,
                version: 0,
                error: None,
            },
            next_job: 1,
        };
        Self {
            session: Arc::new(Mutex::new(session)),
            events,
            mutator: Arc::new(tokio::sync::Mutex::new(())),
        }
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Snapshot of the working copy and its version.
    pub fn snapshot(&self) -> Option<(Arc<Model>, u64)> {
        let s = self.lock();
        s.model.clone().map(|m| (m, s.version))
    }

    pub fn status(&self) -> Status {
        self.lock().status()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<String> {
        self.events.subscribe()
    }

    pub(crate) fn broadcast(&self, message: serde_json::Value) {
        // No subscribers is not an error.
        let _ = self.events.send(message.to_string());
    }
}
