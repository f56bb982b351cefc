//! Checkpointable run state and the self-describing checkpoint document:
//! schema version, content digest, atomic writes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Article, CorpusSplit};
use crate::domain::{CandidateId, PromptCandidate, RunConfig};
use crate::optimizer::GradientBuffer;

use super::pool::TopKPool;
use super::EngineError;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// One per-iteration metric snapshot. Attacker metrics are measured on
/// the validation split against the iteration-0 defense (a fixed
/// baseline); defender metrics are the validation numbers behind that
/// iteration's best selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub gan_iteration: u32,
    pub attack_asr: f64,
    pub attack_mean_delta_s_rel: f64,
    pub attack_val_score: f64,
    pub defense_tpr: f64,
    pub defense_tnr: f64,
    pub defense_val_score: f64,
}

/// Full state of a co-evolution run between iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config: RunConfig,
    pub gan_iteration: u32,
    pub attacker_pool: TopKPool,
    pub defender_pool: TopKPool,
    pub buffer: GradientBuffer,
    /// Every candidate ever created, keyed by id. Pools and bests
    /// reference into this registry.
    pub candidates: BTreeMap<u64, PromptCandidate>,
    pub best_attack: Option<CandidateId>,
    pub best_defense: Option<CandidateId>,
    pub initial_attack: CandidateId,
    pub initial_defense: CandidateId,
    pub history: Vec<HistoryEntry>,
    pub next_candidate_id: u64,
    pub next_gradient_id: u64,
    pub benign_memo: BTreeMap<String, f64>,
    pub memo_context_digest: String,
    pub corpus_digest: String,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub rng_seed: u64,
    pub converged: bool,
    pub prev_attack_val: Option<f64>,
    pub prev_defense_val: Option<f64>,
}

impl RunState {
    pub fn candidate(&self, id: CandidateId) -> Option<&PromptCandidate> {
        self.candidates.get(&id.0)
    }

    pub fn best_attack_candidate(&self) -> Option<&PromptCandidate> {
        self.best_attack.and_then(|id| self.candidate(id))
    }

    pub fn best_defense_candidate(&self) -> Option<&PromptCandidate> {
        self.best_defense.and_then(|id| self.candidate(id))
    }

    /// The candidate's id plus every ancestor id, following parent links.
    pub fn lineage(&self, id: CandidateId) -> BTreeSet<CandidateId> {
        let mut out = BTreeSet::new();
        let mut cursor = Some(id);
        while let Some(current) = cursor {
            if !out.insert(current) {
                break;
            }
            cursor = self.candidate(current).and_then(|c| c.parent_id);
        }
        out
    }

    pub fn is_finished(&self) -> bool {
        self.converged || self.gan_iteration >= self.config.max_gan_iterations
    }

    /// Reconstructs the train/validation slices from stored article ids,
    /// verifying the corpus is the one the run started with.
    pub fn resolve_split(&self, corpus: &[Article]) -> Result<CorpusSplit, EngineError> {
        let digest = corpus_digest(corpus);
        if digest != self.corpus_digest {
            return Err(EngineError::CorpusMismatch {
                expected: self.corpus_digest.clone(),
                found: digest,
            });
        }
        let by_id: BTreeMap<&str, &Article> =
            corpus.iter().map(|a| (a.article_id.as_str(), a)).collect();
        let collect = |ids: &[String]| -> Result<Vec<Article>, EngineError> {
            ids.iter()
                .map(|id| {
                    by_id.get(id.as_str()).map(|a| (*a).clone()).ok_or_else(|| {
                        EngineError::CorpusMismatch {
                            expected: format!("article {id}"),
                            found: "missing".into(),
                        }
                    })
                })
                .collect()
        };
        Ok(CorpusSplit {
            train: collect(&self.train_ids)?,
            validation: collect(&self.validation_ids)?,
            split_seed: self.rng_seed,
        })
    }
}

pub fn corpus_digest(corpus: &[Article]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for article in corpus {
        hasher.update(article.article_id.as_bytes());
        hasher.update([0]);
        hasher.update(article.text.as_bytes());
        hasher.update([0]);
    }
    hex::encode(hasher.finalize())
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    schema_version: u32,
    digest: String,
    state: serde_json::Value,
}

fn state_digest(state_json: &serde_json::Value) -> String {
    use sha2::{Digest, Sha256};
    let canonical = serde_json::to_vec(state_json).expect("state serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Writes a checkpoint atomically (write temp, rename).
pub fn checkpoint(state: &RunState, path: &Path) -> Result<(), EngineError> {
    let state_json = serde_json::to_value(state)
        .map_err(|e| EngineError::Io(format!("serialize state: {e}")))?;
    let doc = CheckpointDoc {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        digest: state_digest(&state_json),
        state: state_json,
    };
    let body = serde_json::to_vec_pretty(&doc)
        .map_err(|e| EngineError::Io(format!("serialize checkpoint: {e}")))?;
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)
        .map_err(|e| EngineError::Io(format!("create {}: {e}", parent.display())))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &body).map_err(|e| EngineError::Io(format!("write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| EngineError::Io(format!("rename {}: {e}", path.display())))?;
    Ok(())
}

/// Loads and verifies a checkpoint: schema version first, then content
/// digest, then the state itself.
pub fn restore(path: &Path) -> Result<RunState, EngineError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| EngineError::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
    let doc: CheckpointDoc = serde_json::from_str(&raw)
        .map_err(|e| EngineError::CorruptCheckpoint(format!("unparseable: {e}")))?;
    if doc.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(EngineError::VersionMismatch {
            found: doc.schema_version,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    if state_digest(&doc.state) != doc.digest {
        return Err(EngineError::CorruptCheckpoint("digest mismatch".into()));
    }
    serde_json::from_value(doc.state)
        .map_err(|e| EngineError::CorruptCheckpoint(format!("state does not parse: {e}")))
}
