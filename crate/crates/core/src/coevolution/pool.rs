//! Top-k candidate pool with a fixed tie-break: higher score first, then
//! newer (gan, opt) iteration, then higher id.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::domain::{PromptCandidate, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub candidate: PromptCandidate,
    /// `None` marks an unevaluated seed; it ranks below any scored entry.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKPool {
    pub role: Role,
    capacity: usize,
    entries: Vec<PoolEntry>,
}

fn rank(a: &PoolEntry, b: &PoolEntry) -> Ordering {
    let by_score = match (a.score, b.score) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    };
    by_score
        .then_with(|| b.candidate.gan_iteration.cmp(&a.candidate.gan_iteration))
        .then_with(|| b.candidate.opt_iteration.cmp(&a.candidate.opt_iteration))
        .then_with(|| b.candidate.id.cmp(&a.candidate.id))
}

impl TopKPool {
    pub fn new(role: Role, capacity: usize) -> Self {
        assert!(capacity >= 1, "pool capacity must be >= 1");
        Self { role, capacity, entries: Vec::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Offers one candidate; the pool keeps the k best ever offered.
    pub fn offer(&mut self, candidate: PromptCandidate, score: Option<f64>) {
        assert_eq!(candidate.role, self.role, "candidate role must match pool role");
        self.entries.push(PoolEntry { candidate, score });
        self.entries.sort_by(rank);
        self.entries.truncate(self.capacity);
    }

    /// Replaces the pool wholesale with re-scored entries, e.g. after the
    /// opponent changed and previous scores became stale.
    pub fn rebuild(&mut self, entries: Vec<PoolEntry>) {
        for entry in &entries {
            assert_eq!(entry.candidate.role, self.role);
        }
        self.entries = entries;
        self.entries.sort_by(rank);
        self.entries.truncate(self.capacity);
    }
}
