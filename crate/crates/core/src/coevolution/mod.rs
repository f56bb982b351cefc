//! The alternating co-evolution engine: attacker cycles and defender
//! cycles over top-k pools, per-cycle best selection on the validation
//! split, convergence testing, and checkpointing.

mod events;
mod pool;
mod seeds;
mod state;

pub use events::{event, Event, EventKind, EventLog};
pub use pool::{PoolEntry, TopKPool};
pub use seeds::{
    attack_seed_text,
    default_attacker_seeds, default_defender_seeds, load_seed_dir, DEFENSE_SEED_BASELINE,
};
pub use state::{
    checkpoint, corpus_digest, restore, HistoryEntry, RunState, CHECKPOINT_SCHEMA_VERSION,
};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::corpus::{Article, CorpusError};
use crate::domain::{CandidateId, PromptCandidate, Role, RunConfig};
use crate::gateway::Gateway;
use crate::grader::{BenignMemo, Grader, GraderError};
use crate::optimizer::{
    ErrorContext, GradientBuffer, MemberEval, Optimizer, OptimizerError, ProposeMember, Route,
    TemplateSet,
};
use crate::scoring::{self, ScoringError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no seed prompts for role {0}")]
    NoSeeds(Role),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Grader(#[from] GraderError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint schema version {found}, this build expects {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corpus does not match the one this run started with (expected {expected}, found {found})")]
    CorpusMismatch { expected: String, found: String },
    #[error("grading context changed since checkpoint (expected {expected}, found {found})")]
    ContextMismatch { expected: String, found: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("engine state not ready: {0}")]
    NotReady(String),
}

/// Final artifacts of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best_attack: PromptCandidate,
    pub best_defense: PromptCandidate,
    pub history: Vec<HistoryEntry>,
    pub converged: bool,
}

struct AttackerCycleOutcome {
    val_score: f64,
    asr: f64,
    mean_delta: f64,
}

struct DefenderCycleOutcome {
    val_score: f64,
    tpr: f64,
    tnr: f64,
}

fn attacker_route(opt_iteration: u32, multi_route: bool) -> Route {
    if !multi_route || opt_iteration % 2 == 1 {
        Route::Asr
    } else {
        Route::ScoreChange
    }
}

fn defender_route(opt_iteration: u32, multi_route: bool) -> Route {
    if !multi_route || opt_iteration % 2 == 1 {
        Route::Tpr
    } else {
        Route::Tnr
    }
}

pub struct Engine {
    config: RunConfig,
    grader: Grader,
    optimizer: Optimizer,
    memo: BenignMemo,
    events: EventLog,
    checkpoint_dir: Option<PathBuf>,
}

impl Engine {
    pub fn new(
        config: RunConfig,
        gateway: Arc<Gateway>,
        rubric: Option<String>,
        templates: TemplateSet,
        events: EventLog,
        checkpoint_dir: Option<PathBuf>,
    ) -> Self {
        let grader = Grader::new(Arc::clone(&gateway), &config, rubric);
        let optimizer = Optimizer::new(gateway, &config, templates);
        let memo = BenignMemo::new(grader.context_digest());
        Self { config, grader, optimizer, memo, events, checkpoint_dir }
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn grader(&self) -> &Grader {
        &self.grader
    }

    /// Seeds the pools, fixes the split, and points `best_defense` at the
    /// first defender seed. Seeds enter unevaluated.
    pub fn initialize(
        &self,
        corpus: &[Article],
        attacker_seeds: &[String],
        defender_seeds: &[String],
    ) -> Result<RunState, EngineError> {
        if attacker_seeds.iter().all(|s| s.trim().is_empty()) {
            return Err(EngineError::NoSeeds(Role::Attacker));
        }
        if defender_seeds.iter().all(|s| s.trim().is_empty()) {
            return Err(EngineError::NoSeeds(Role::Defender));
        }
        let split = crate::corpus::split(corpus, self.config.train_fraction, self.config.rng_seed)?;

        let mut candidates = BTreeMap::new();
        let mut next_id = 0u64;
        let mut attacker_pool = TopKPool::new(Role::Attacker, self.config.top_k);
        let mut defender_pool = TopKPool::new(Role::Defender, self.config.top_k);
        let mut first_attack = None;
        let mut first_defense = None;
        for text in attacker_seeds.iter().filter(|s| !s.trim().is_empty()) {
            let seed = PromptCandidate::seed(CandidateId(next_id), Role::Attacker, text.clone());
            next_id += 1;
            first_attack.get_or_insert(seed.id);
            candidates.insert(seed.id.0, seed.clone());
            attacker_pool.offer(seed, None);
        }
        for text in defender_seeds.iter().filter(|s| !s.trim().is_empty()) {
            let seed = PromptCandidate::seed(CandidateId(next_id), Role::Defender, text.clone());
            next_id += 1;
            first_defense.get_or_insert(seed.id);
            candidates.insert(seed.id.0, seed.clone());
            defender_pool.offer(seed, None);
        }
        let initial_attack = first_attack.expect("attacker seeds non-empty");
        let initial_defense = first_defense.expect("defender seeds non-empty");

        Ok(RunState {
            config: self.config.clone(),
            gan_iteration: 0,
            attacker_pool,
            defender_pool,
            buffer: GradientBuffer::new(self.config.buffer_capacity),
            candidates,
            best_attack: if self.config.freeze_attacker { Some(initial_attack) } else { None },
            best_defense: Some(initial_defense),
            initial_attack,
            initial_defense,
            history: Vec::new(),
            next_candidate_id: next_id,
            next_gradient_id: 0,
            benign_memo: BTreeMap::new(),
            memo_context_digest: self.grader.context_digest(),
            corpus_digest: corpus_digest(corpus),
            train_ids: split.train.iter().map(|a| a.article_id.clone()).collect(),
            validation_ids: split.validation.iter().map(|a| a.article_id.clone()).collect(),
            rng_seed: self.config.rng_seed,
            converged: false,
            prev_attack_val: None,
            prev_defense_val: None,
        })
    }

    /// Runs iterations until convergence or the configured maximum,
    /// checkpointing after each full iteration. A cycle abort leaves a
    /// partial-result checkpoint behind.
    pub fn run(&self, state: &mut RunState, corpus: &[Article]) -> Result<RunOutcome, EngineError> {
        if state.memo_context_digest != self.grader.context_digest() {
            return Err(EngineError::ContextMismatch {
                expected: state.memo_context_digest.clone(),
                found: self.grader.context_digest(),
            });
        }
        let split = state.resolve_split(corpus)?;
        self.memo.restore(state.benign_memo.clone());
        if state.gan_iteration == 0 {
            self.events.emit(event(EventKind::RunStart, 0));
        }

        while !state.is_finished() {
            let i = state.gan_iteration + 1;
            state.gan_iteration = i;

            let iteration_result: Result<(AttackerCycleOutcome, DefenderCycleOutcome), EngineError> =
                (|| {
                    let attack = if self.config.freeze_attacker {
                        self.frozen_attacker_outcome(state, &split.validation)?
                    } else {
                        self.run_attacker_cycle(state, &split.train, &split.validation)?
                    };
                    let defense =
                        self.run_defender_cycle(state, &split.train, &split.validation)?;
                    Ok((attack, defense))
                })();

            let (attack_outcome, defense_outcome) = match iteration_result {
                Ok(pair) => pair,
                Err(err) => {
                    let mut abort_event = event(EventKind::CycleAbort, i);
                    abort_event.detail = Some(err.to_string());
                    self.events.emit(abort_event);
                    state.benign_memo = self.memo.snapshot();
                    if let Some(dir) = &self.checkpoint_dir {
                        let _ = checkpoint(state, &dir.join("checkpoint-aborted.json"));
                    }
                    return Err(err);
                }
            };

            state.history.push(HistoryEntry {
                gan_iteration: i,
                attack_asr: attack_outcome.asr,
                attack_mean_delta_s_rel: attack_outcome.mean_delta,
                attack_val_score: attack_outcome.val_score,
                defense_tpr: defense_outcome.tpr,
                defense_tnr: defense_outcome.tnr,
                defense_val_score: defense_outcome.val_score,
            });
            self.events.emit(event(EventKind::HistoryAppended, i));

            if let (Some(prev_attack), Some(prev_defense)) =
                (state.prev_attack_val, state.prev_defense_val)
            {
                let eps = self.config.convergence_epsilon;
                let attack_gain = attack_outcome.val_score - prev_attack;
                let defense_gain = defense_outcome.val_score - prev_defense;
                if attack_gain <= eps && defense_gain <= eps {
                    state.converged = true;
                    self.events.emit(event(EventKind::Converged, i));
                }
            }
            state.prev_attack_val = Some(attack_outcome.val_score);
            state.prev_defense_val = Some(defense_outcome.val_score);
            state.benign_memo = self.memo.snapshot();

            if let Some(dir) = &self.checkpoint_dir {
                checkpoint(state, &dir.join(format!("checkpoint-{i:04}.json")))?;
                self.events.emit(event(EventKind::Checkpoint, i));
            }
        }

        self.events.emit(event(EventKind::RunEnd, state.gan_iteration));
        let best_attack = state
            .best_attack_candidate()
            .cloned()
            .ok_or_else(|| EngineError::NotReady("no best attack selected".into()))?;
        let best_defense = state
            .best_defense_candidate()
            .cloned()
            .ok_or_else(|| EngineError::NotReady("no best defense selected".into()))?;
        Ok(RunOutcome {
            best_attack,
            best_defense,
            history: state.history.clone(),
            converged: state.converged,
        })
    }

    /// One attacker cycle: re-evaluate the carried pool against the
    /// current best defense, propose and evaluate candidates for M inner
    /// iterations, then select the best on the validation split.
    fn run_attacker_cycle(
        &self,
        state: &mut RunState,
        train: &[Article],
        val: &[Article],
    ) -> Result<AttackerCycleOutcome, EngineError> {
        let i = state.gan_iteration;
        let mut start = event(EventKind::CycleStart, i);
        start.role = Some(Role::Attacker);
        self.events.emit(start);

        let defense = state
            .best_defense_candidate()
            .cloned()
            .ok_or_else(|| EngineError::NotReady("best defense missing".into()))?;
        let weights = self.config.weights;

        let mut eval_cache: BTreeMap<u64, MemberEval> = BTreeMap::new();
        let carried: Vec<PromptCandidate> =
            state.attacker_pool.entries().iter().map(|e| e.candidate.clone()).collect();
        let mut rescored = Vec::with_capacity(carried.len());
        for candidate in carried {
            let (metrics, records) = self.grader.eval_attack(&candidate, &defense, train, &self.memo)?;
            let score = scoring::attack_score(metrics.asr, metrics.mean_delta_s_rel, &weights)?.value;
            self.emit_evaluation(i, None, Role::Attacker, candidate.id, score);
            eval_cache.insert(candidate.id.0, MemberEval { attacked: records, benign: Vec::new() });
            rescored.push(PoolEntry { candidate, score: Some(score) });
        }
        state.attacker_pool.rebuild(rescored);

        let article_texts: BTreeMap<String, String> =
            train.iter().map(|a| (a.article_id.clone(), a.text.clone())).collect();
        let budget = self.config.top_k * self.config.n_gradients;

        for j in 1..=self.config.opt_iterations_per_cycle {
            let route = attacker_route(j, self.config.use_multi_route);
            let member_data: Vec<(PromptCandidate, MemberEval, _)> = state
                .attacker_pool
                .entries()
                .iter()
                .map(|e| {
                    (
                        e.candidate.clone(),
                        eval_cache.get(&e.candidate.id.0).cloned().unwrap_or_default(),
                        state.lineage(e.candidate.id),
                    )
                })
                .collect();
            let members: Vec<ProposeMember<'_>> = member_data
                .iter()
                .map(|(candidate, eval, lineage)| ProposeMember {
                    candidate,
                    eval,
                    lineage: lineage.clone(),
                })
                .collect();
            let ctx = ErrorContext { article_texts: &article_texts, opponent_attack: None };
            let proposals = self.optimizer.propose(
                &members,
                route,
                &ctx,
                budget,
                i,
                j,
                &mut state.buffer,
                &mut state.next_gradient_id,
                &mut state.next_candidate_id,
            )?;
            for proposal in proposals {
                let candidate = proposal.candidate;
                state.candidates.insert(candidate.id.0, candidate.clone());
                self.emit_proposal(i, j, Role::Attacker, candidate.id, proposal.noop);
                let (metrics, records) =
                    self.grader.eval_attack(&candidate, &defense, train, &self.memo)?;
                let score =
                    scoring::attack_score(metrics.asr, metrics.mean_delta_s_rel, &weights)?.value;
                self.emit_evaluation(i, Some(j), Role::Attacker, candidate.id, score);
                eval_cache
                    .insert(candidate.id.0, MemberEval { attacked: records, benign: Vec::new() });
                state.attacker_pool.offer(candidate, Some(score));
            }
        }

        let mut best: Option<(CandidateId, f64)> = None;
        for entry in state.attacker_pool.entries() {
            let outcome =
                self.grader.validate(&entry.candidate, &defense, val, &weights, &self.memo)?;
            if best.is_none_or(|(_, s)| outcome.score > s) {
                best = Some((entry.candidate.id, outcome.score));
            }
        }
        let (best_id, val_score) = best.expect("attacker pool is never empty");
        state.best_attack = Some(best_id);
        self.emit_selection(i, Role::Attacker, best_id, val_score);

        let initial_defense = state
            .candidate(state.initial_defense)
            .cloned()
            .ok_or_else(|| EngineError::NotReady("initial defense missing".into()))?;
        let best_candidate =
            state.candidate(best_id).cloned().expect("best attack is registered");
        let (baseline, _) =
            self.grader.eval_attack(&best_candidate, &initial_defense, val, &self.memo)?;
        Ok(AttackerCycleOutcome {
            val_score,
            asr: baseline.asr,
            mean_delta: baseline.mean_delta_s_rel,
        })
    }

    /// Mirror of the attacker cycle with detection metrics and routes.
    fn run_defender_cycle(
        &self,
        state: &mut RunState,
        train: &[Article],
        val: &[Article],
    ) -> Result<DefenderCycleOutcome, EngineError> {
        let i = state.gan_iteration;
        let mut start = event(EventKind::CycleStart, i);
        start.role = Some(Role::Defender);
        self.events.emit(start);

        let attack = state
            .best_attack_candidate()
            .cloned()
            .ok_or_else(|| EngineError::NotReady("best attack missing".into()))?;
        let weights = self.config.weights;

        let mut eval_cache: BTreeMap<u64, MemberEval> = BTreeMap::new();
        let carried: Vec<PromptCandidate> =
            state.defender_pool.entries().iter().map(|e| e.candidate.clone()).collect();
        let mut rescored = Vec::with_capacity(carried.len());
        for candidate in carried {
            let (metrics, attacked, benign) =
                self.grader.eval_defense(&candidate, &attack, train, &self.memo)?;
            let score = scoring::defense_score(metrics.tpr, metrics.tnr, &weights)?.value;
            self.emit_evaluation(i, None, Role::Defender, candidate.id, score);
            eval_cache.insert(candidate.id.0, MemberEval { attacked, benign });
            rescored.push(PoolEntry { candidate, score: Some(score) });
        }
        state.defender_pool.rebuild(rescored);

        let article_texts: BTreeMap<String, String> =
            train.iter().map(|a| (a.article_id.clone(), a.text.clone())).collect();
        let budget = self.config.top_k * self.config.n_gradients;

        for j in 1..=self.config.opt_iterations_per_cycle {
            let route = defender_route(j, self.config.use_multi_route);
            let member_data: Vec<(PromptCandidate, MemberEval, _)> = state
                .defender_pool
                .entries()
                .iter()
                .map(|e| {
                    (
                        e.candidate.clone(),
                        eval_cache.get(&e.candidate.id.0).cloned().unwrap_or_default(),
                        state.lineage(e.candidate.id),
                    )
                })
                .collect();
            let members: Vec<ProposeMember<'_>> = member_data
                .iter()
                .map(|(candidate, eval, lineage)| ProposeMember {
                    candidate,
                    eval,
                    lineage: lineage.clone(),
                })
                .collect();
            let ctx =
                ErrorContext { article_texts: &article_texts, opponent_attack: Some(&attack.text) };
            let proposals = self.optimizer.propose(
                &members,
                route,
                &ctx,
                budget,
                i,
                j,
                &mut state.buffer,
                &mut state.next_gradient_id,
                &mut state.next_candidate_id,
            )?;
            for proposal in proposals {
                let candidate = proposal.candidate;
                state.candidates.insert(candidate.id.0, candidate.clone());
                self.emit_proposal(i, j, Role::Defender, candidate.id, proposal.noop);
                let (metrics, attacked, benign) =
                    self.grader.eval_defense(&candidate, &attack, train, &self.memo)?;
                let score = scoring::defense_score(metrics.tpr, metrics.tnr, &weights)?.value;
                self.emit_evaluation(i, Some(j), Role::Defender, candidate.id, score);
                eval_cache.insert(candidate.id.0, MemberEval { attacked, benign });
                state.defender_pool.offer(candidate, Some(score));
            }
        }

        let mut best: Option<(CandidateId, f64, f64, f64)> = None;
        for entry in state.defender_pool.entries() {
            let outcome =
                self.grader.validate(&entry.candidate, &attack, val, &weights, &self.memo)?;
            let metrics = outcome.defense.expect("defender validation yields defense metrics");
            if best.is_none_or(|(_, s, _, _)| outcome.score > s) {
                best = Some((entry.candidate.id, outcome.score, metrics.tpr, metrics.tnr));
            }
        }
        let (best_id, val_score, tpr, tnr) = best.expect("defender pool is never empty");
        state.best_defense = Some(best_id);
        self.emit_selection(i, Role::Defender, best_id, val_score);

        Ok(DefenderCycleOutcome { val_score, tpr, tnr })
    }

    /// Single-sided mode: the attacker stays fixed; only its metrics are
    /// refreshed for the history snapshot.
    fn frozen_attacker_outcome(
        &self,
        state: &mut RunState,
        val: &[Article],
    ) -> Result<AttackerCycleOutcome, EngineError> {
        let attack = state
            .best_attack_candidate()
            .cloned()
            .ok_or_else(|| EngineError::NotReady("frozen attacker has no seed".into()))?;
        let defense = state
            .best_defense_candidate()
            .cloned()
            .ok_or_else(|| EngineError::NotReady("best defense missing".into()))?;
        let outcome =
            self.grader.validate(&attack, &defense, val, &self.config.weights, &self.memo)?;
        let initial_defense = state
            .candidate(state.initial_defense)
            .cloned()
            .ok_or_else(|| EngineError::NotReady("initial defense missing".into()))?;
        let (baseline, _) = self.grader.eval_attack(&attack, &initial_defense, val, &self.memo)?;
        Ok(AttackerCycleOutcome {
            val_score: outcome.score,
            asr: baseline.asr,
            mean_delta: baseline.mean_delta_s_rel,
        })
    }

    fn emit_proposal(&self, i: u32, j: u32, role: Role, id: CandidateId, noop: bool) {
        let mut e = event(EventKind::Proposal, i);
        e.opt_iteration = Some(j);
        e.role = Some(role);
        e.candidate_id = Some(id);
        e.noop = Some(noop);
        self.events.emit(e);
    }

    fn emit_evaluation(&self, i: u32, j: Option<u32>, role: Role, id: CandidateId, score: f64) {
        let mut e = event(EventKind::Evaluation, i);
        e.opt_iteration = j;
        e.role = Some(role);
        e.candidate_id = Some(id);
        e.score = Some(score);
        self.events.emit(e);
    }

    fn emit_selection(&self, i: u32, role: Role, id: CandidateId, score: f64) {
        let mut e = event(EventKind::Selection, i);
        e.role = Some(role);
        e.candidate_id = Some(id);
        e.score = Some(score);
        self.events.emit(e);
    }
}
