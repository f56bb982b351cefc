//! Bounded replay store for textual gradients: one FIFO lane per
//! (role, route), oldest-first eviction, newest-first retrieval.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::domain::{CandidateId, GradientId, Role};

/// Optimization objective a gradient was acquired for. Attacker routes
/// and defender routes are disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Route {
    /// Attacker: evade detection.
    Asr,
    /// Attacker: raise the relative score change.
    ScoreChange,
    /// Defender: catch injected instructions.
    Tpr,
    /// Defender: avoid false alarms on clean input.
    Tnr,
}

impl Route {
    pub fn role(self) -> Role {
        match self {
            Route::Asr | Route::ScoreChange => Role::Attacker,
            Route::Tpr | Route::Tnr => Role::Defender,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Route::Asr => "asr",
            Route::ScoreChange => "score_change",
            Route::Tpr => "tpr",
            Route::Tnr => "tnr",
        }
    }
}

/// One stored textual gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub id: GradientId,
    pub candidate_id: CandidateId,
    pub role: Role,
    pub route: Route,
    pub error_string: String,
    pub feedback_text: String,
    pub gan_iteration: u32,
    pub opt_iteration: u32,
}

impl GradientRecord {
    /// Route legality is enforced here: an attacker record can never carry
    /// a defender route and vice versa.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: GradientId,
        candidate_id: CandidateId,
        route: Route,
        error_string: String,
        feedback_text: String,
        gan_iteration: u32,
        opt_iteration: u32,
    ) -> Self {
        Self {
            id,
            candidate_id,
            role: route.role(),
            route,
            error_string,
            feedback_text,
            gan_iteration,
            opt_iteration,
        }
    }
}

/// Per-(role, route) bounded FIFO of gradient records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientBuffer {
    capacity: usize,
    lanes: BTreeMap<Route, VecDeque<GradientRecord>>,
}

impl GradientBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "buffer capacity must be >= 1");
        Self { capacity, lanes: BTreeMap::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn lane_len(&self, route: Route) -> usize {
        self.lanes.get(&route).map_or(0, VecDeque::len)
    }

    /// Appends a record to its lane, evicting the oldest entry when the
    /// lane is full.
    pub fn append(&mut self, record: GradientRecord) {
        let lane = self.lanes.entry(record.route).or_default();
        lane.push_back(record);
        while lane.len() > self.capacity {
            lane.pop_front();
        }
    }

    /// Up to `limit` most recent lane entries, newest first. When a
    /// lineage filter is given, only gradients acquired for candidates in
    /// that lineage are returned.
    pub fn retrieve(
        &self,
        route: Route,
        lineage: Option<&BTreeSet<CandidateId>>,
        limit: usize,
    ) -> Vec<&GradientRecord> {
        let Some(lane) = self.lanes.get(&route) else {
            return Vec::new();
        };
        lane.iter()
            .rev()
            .filter(|record| lineage.is_none_or(|set| set.contains(&record.candidate_id)))
            .take(limit)
            .collect()
    }
}
