//! Append-only event log: one JSON line per proposal, evaluation,
//! selection, and checkpoint, with a monotone sequence number. An
//! in-memory mirror backs assertions in tests and reports.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::domain::{CandidateId, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RunStart,
    CycleStart,
    Proposal,
    Evaluation,
    Selection,
    HistoryAppended,
    Checkpoint,
    Converged,
    CycleAbort,
    RunEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub gan_iteration: u32,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub opt_iteration: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate_id: Option<CandidateId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noop: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

pub struct EventLog {
    file: Option<Mutex<BufWriter<File>>>,
    mirror: Mutex<Vec<Event>>,
    seq: AtomicU64,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self { file: None, mirror: Mutex::new(Vec::new()), seq: AtomicU64::new(0) }
    }

    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Some(Mutex::new(BufWriter::new(file))),
            mirror: Mutex::new(Vec::new()),
            seq: AtomicU64::new(0),
        })
    }

    pub fn emit(&self, mut event: Event) {
        event.seq = self.seq.fetch_add(1, Ordering::SeqCst);
        if let Some(file) = &self.file {
            let mut writer = file.lock().expect("event log poisoned");
            let line = serde_json::to_string(&event).expect("event serializes");
            let _ = writeln!(writer, "{line}");
            let _ = writer.flush();
        }
        self.mirror.lock().expect("event log poisoned").push(event);
    }

    pub fn events(&self) -> Vec<Event> {
        self.mirror.lock().expect("event log poisoned").clone()
    }
}

/// Builder-lite constructor for the common case.
pub fn event(kind: EventKind, gan_iteration: u32) -> Event {
    Event {
        seq: 0,
        gan_iteration,
        kind,
        opt_iteration: None,
        role: None,
        candidate_id: None,
        score: None,
        noop: None,
        detail: None,
    }
}
