//! Acceptance suite. Each test covers one numbered criterion and prints a
//! PASS line; every tolerance and threshold is pinned here. All runs are
//! scripted and deterministic with zero network access.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coevo_core::coevolution::{
    default_attacker_seeds, default_defender_seeds, restore, Engine, EventLog, HistoryEntry,
    PoolEntry, RunOutcome, RunState, TopKPool,
};
use coevo_core::corpus::{generate_synthetic, Article};
use coevo_core::domain::{
    CandidateId, GradientId, PromptCandidate, Provenance, Role, RunConfig, ScoreWeights,
};
use coevo_core::gateway::{
    ChatRequest, Gateway, GatewayError, Matcher, ResponseFormat, RetryPolicy, ScriptedBackend,
    ScriptedRule,
};
use coevo_core::grader::{BenignMemo, FIELD_DETECTED, FIELD_SCORE, RUBRIC_DELIMITER};
use coevo_core::optimizer::{GradientBuffer, GradientRecord, Route, TemplateSet};
use coevo_core::scoring::{aggregate_attack, attack_score, defense_score, relative_score_change};
use coevo_core::synthetic::{canonical_attack, oracle_backend, RecordingBackend};

const TOL: f64 = 1e-9;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn random_weights(rng: &mut ChaCha8Rng) -> ScoreWeights {
    ScoreWeights {
        w_asr: unit(rng) * 2.0 + 0.01,
        w_sc: unit(rng) * 2.0 + 0.01,
        p_asr: unit(rng) * 2.5 + 0.1,
        p_sc: unit(rng) * 2.5 + 0.1,
        w_tp: unit(rng) * 2.0 + 0.01,
        w_tn: unit(rng) * 2.0 + 0.01,
        p_tp: unit(rng) * 2.5 + 0.1,
        p_tn: unit(rng) * 2.5 + 0.1,
    }
}

// ---------------------------------------------------------------------------
// Criterion 5 run harness, shared by criteria 5, 6, 7, 9, 10.
// ---------------------------------------------------------------------------

const CORPUS_SEED: u64 = 1;
const RUN_SEED: u64 = 5;

fn closed_loop_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.max_gan_iterations = 4;
    config.opt_iterations_per_cycle = 3;
    config.top_k = 4;
    config.rng_seed = RUN_SEED;
    config.backend.parallelism = 1;
    config.backend.retry_base_ms = 0;
    config
}

fn closed_loop_corpus() -> Vec<Article> {
    generate_synthetic(50, CORPUS_SEED)
}

struct ClosedLoopRun {
    outcome: RunOutcome,
    state: RunState,
    engine: Engine,
    recorder: Arc<RecordingBackend>,
}

fn run_closed_loop(config: RunConfig, checkpoint_dir: Option<&Path>) -> ClosedLoopRun {
    let corpus = closed_loop_corpus();
    let recorder = Arc::new(RecordingBackend::new(Arc::new(oracle_backend())));
    let gateway = Arc::new(Gateway::new(
        recorder.clone(),
        config.backend.parallelism,
        RetryPolicy { max_attempts: 2, base_delay: Duration::ZERO },
    ));
    let engine = Engine::new(
        config,
        gateway,
        None,
        TemplateSet::default(),
        EventLog::in_memory(),
        checkpoint_dir.map(Path::to_path_buf),
    );
    let mut state = engine
        .initialize(&corpus, &default_attacker_seeds(), &default_defender_seeds())
        .expect("initialize");
    let outcome = engine.run(&mut state, &corpus).expect("closed-loop run succeeds");
    ClosedLoopRun { outcome, state, engine, recorder }
}

fn first_iteration_reaching_tpr(history: &[HistoryEntry], threshold: f64) -> Option<u32> {
    history.iter().find(|h| h.defense_tpr >= threshold).map(|h| h.gan_iteration)
}

// ---------------------------------------------------------------------------
// Criterion 1 — scoring exactness against independent oracles.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_scoring_exactness() {
    let start = Instant::now();

    // Tagged examples.
    assert!((relative_score_change(10.0, 10.0, 10.0).unwrap() - 0.0).abs() < TOL);
    assert!((relative_score_change(0.0, 10.0, 10.0).unwrap() - 1.0).abs() < TOL);
    assert!((relative_score_change(6.0, 9.0, 10.0).unwrap() - 0.75).abs() < TOL);
    assert!((relative_score_change(8.0, 7.0, 10.0).unwrap() - (-0.5)).abs() < TOL);
    let defaults = ScoreWeights::default();
    assert!((attack_score(1.0, 1.0, &defaults).unwrap().value - 1.0).abs() < TOL);
    assert!((attack_score(0.0, 0.0, &defaults).unwrap().value - 0.0).abs() < TOL);
    assert!((attack_score(0.96, 0.87, &defaults).unwrap().value - 0.915).abs() < TOL);
    assert!((defense_score(0.0, 0.0, &defaults).unwrap().value - 0.0).abs() < TOL);
    assert!((defense_score(1.0, 1.0, &defaults).unwrap().value - 1.0).abs() < TOL);
    assert!((defense_score(0.84, 0.89, &defaults).unwrap().value - 0.865).abs() < TOL);

    // Independently coded oracle expressions, evaluated over 1,000 draws.
    let oracle_delta = |b: f64, a: f64, m: f64| if b >= m { 0.0 } else { (a - b) / (m - b) };
    let oracle_attack = |asr: f64, d: f64, w: &ScoreWeights| {
        w.w_asr * asr.powf(w.p_asr) + w.w_sc * f64::max(d, 0.0).powf(w.p_sc)
    };
    let oracle_defense =
        |tpr: f64, tnr: f64, w: &ScoreWeights| w.w_tp * tpr.powf(w.p_tp) + w.w_tn * tnr.powf(w.p_tn);

    let mut r = rng(101);
    for _ in 0..1000 {
        let s_max = unit(&mut r) * 99.0 + 1.0;
        let s_benign = unit(&mut r) * s_max;
        let s_attacked = unit(&mut r) * s_max;
        let got = relative_score_change(s_benign, s_attacked, s_max).unwrap();
        assert!((got - oracle_delta(s_benign, s_attacked, s_max)).abs() < TOL);

        let weights = random_weights(&mut r);
        let asr = unit(&mut r);
        let delta = unit(&mut r) * 2.0 - 0.5;
        let got = attack_score(asr, delta, &weights).unwrap().value;
        assert!((got - oracle_attack(asr, delta, &weights)).abs() < TOL);

        let tpr = unit(&mut r);
        let tnr = unit(&mut r);
        let got = defense_score(tpr, tnr, &weights).unwrap().value;
        assert!((got - oracle_defense(tpr, tnr, &weights)).abs() < TOL);
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}, budget 1s");
    println!("ACCEPTANCE C1 scoring exactness (1e-9, 1000 draws, {elapsed:?}): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 2 — monotonicity and argmax invariance over 10,000 draws.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_monotonicity_and_argmax_invariance() {
    let start = Instant::now();
    let mut r = rng(202);

    for _ in 0..10_000 {
        let weights = random_weights(&mut r);

        // Monotonicity in asr and in delta (over delta >= 0).
        let lo = unit(&mut r);
        let hi = lo + unit(&mut r) * (1.0 - lo);
        let delta = unit(&mut r);
        let a = attack_score(lo, delta, &weights).unwrap().value;
        let b = attack_score(hi, delta, &weights).unwrap().value;
        assert!(b >= a - TOL, "attack_score not monotone in asr");
        let asr = unit(&mut r);
        let d_lo = unit(&mut r);
        let d_hi = d_lo + unit(&mut r) * (1.0 - d_lo);
        let a = attack_score(asr, d_lo, &weights).unwrap().value;
        let b = attack_score(asr, d_hi, &weights).unwrap().value;
        assert!(b >= a - TOL, "attack_score not monotone in delta");

        let t_lo = unit(&mut r);
        let t_hi = t_lo + unit(&mut r) * (1.0 - t_lo);
        let tnr = unit(&mut r);
        let a = defense_score(t_lo, tnr, &weights).unwrap().value;
        let b = defense_score(t_hi, tnr, &weights).unwrap().value;
        assert!(b >= a - TOL, "defense_score not monotone in tpr");
        let tpr = unit(&mut r);
        let a = defense_score(tpr, t_lo, &weights).unwrap().value;
        let b = defense_score(tpr, t_hi, &weights).unwrap().value;
        assert!(b >= a - TOL, "defense_score not monotone in tnr");

        // Argmax invariance under common positive scaling of the w terms.
        let scale = unit(&mut r) * 9.9 + 0.1;
        let mut scaled = weights;
        scaled.w_asr *= scale;
        scaled.w_sc *= scale;
        let n = 3 + (r.next_u64() % 6) as usize;
        let candidates: Vec<(f64, f64)> =
            (0..n).map(|_| (unit(&mut r), unit(&mut r))).collect();
        let score = |w: &ScoreWeights, c: &(f64, f64)| attack_score(c.0, c.1, w).unwrap().value;
        let argmax = |w: &ScoreWeights| {
            candidates
                .iter()
                .enumerate()
                .max_by(|(_, x), (_, y)| score(w, x).total_cmp(&score(w, y)))
                .map(|(i, _)| i)
                .unwrap()
        };
        assert_eq!(argmax(&weights), argmax(&scaled), "argmax changed under scaling");
        for candidate in &candidates {
            let direct = score(&scaled, candidate);
            let derived = scale * score(&weights, candidate);
            assert!((direct - derived).abs() < 1e-9 * (1.0 + derived.abs()));
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}, budget 5s");
    println!("ACCEPTANCE C2 monotonicity + argmax invariance (10000 draws, {elapsed:?}): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 3 — top-k pool equals brute force under the stated tie-break.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_top_k_pool_equivalence() {
    let start = Instant::now();
    let mut r = rng(303);

    for sequence in 0..1000 {
        let k = 1 + (r.next_u64() % 8) as usize;
        let length = 1 + (r.next_u64() % 200) as usize;
        let mut pool = TopKPool::new(Role::Attacker, k);
        let mut offered: Vec<(u64, u32, u32, f64)> = Vec::with_capacity(length);
        for id in 0..length as u64 {
            // Coarse score grid to force plenty of ties.
            let score = (r.next_u64() % 5) as f64 * 0.25;
            let gan = (r.next_u64() % 4) as u32;
            let opt = (r.next_u64() % 4) as u32;
            let candidate = PromptCandidate {
                id: CandidateId(id),
                role: Role::Attacker,
                text: format!("candidate {id}"),
                parent_id: if gan == 0 { None } else { Some(CandidateId(0)) },
                gan_iteration: gan,
                opt_iteration: opt,
                provenance: if gan == 0 {
                    Provenance::SeedCategory
                } else {
                    Provenance::GradientEdit
                },
                applied_gradient_ids: Vec::new(),
            };
            offered.push((id, gan, opt, score));
            pool.offer(candidate, Some(score));
        }
        // Brute force: score desc, newer (gan, opt) first, higher id first.
        let mut expected = offered.clone();
        expected.sort_by(|a, b| {
            b.3.total_cmp(&a.3)
                .then_with(|| b.1.cmp(&a.1))
                .then_with(|| b.2.cmp(&a.2))
                .then_with(|| b.0.cmp(&a.0))
        });
        expected.truncate(k);
        let got: Vec<u64> = pool.entries().iter().map(|e| e.candidate.id.0).collect();
        let want: Vec<u64> = expected.iter().map(|e| e.0).collect();
        assert_eq!(got, want, "sequence {sequence} diverged from brute force");
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}, budget 5s");
    println!("ACCEPTANCE C3 top-k pool equivalence (1000 sequences, {elapsed:?}): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 4 — gradient buffer capacity, eviction, retrieval order.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_gradient_buffer_discipline() {
    let start = Instant::now();
    let mut r = rng(404);
    let routes = [Route::Asr, Route::ScoreChange, Route::Tpr, Route::Tnr];

    for _ in 0..300 {
        let capacity = 1 + (r.next_u64() % 12) as usize;
        let mut buffer = GradientBuffer::new(capacity);
        let mut shadow: BTreeMap<Route, Vec<u64>> = BTreeMap::new();
        let appends = r.next_u64() % 400;
        for id in 0..appends {
            let route = routes[(r.next_u64() % 4) as usize];
            buffer.append(GradientRecord::new(
                GradientId(id),
                CandidateId(r.next_u64() % 8),
                route,
                String::new(),
                format!("gradient {id}"),
                0,
                0,
            ));
            let lane = shadow.entry(route).or_default();
            lane.push(id);
            if lane.len() > capacity {
                lane.remove(0); // oldest-first eviction
            }
        }
        for route in routes {
            assert!(buffer.lane_len(route) <= capacity, "capacity bound violated");
            let got: Vec<u64> =
                buffer.retrieve(route, None, usize::MAX).iter().map(|g| g.id.0).collect();
            let mut want = shadow.get(&route).cloned().unwrap_or_default();
            want.reverse(); // retrieval is newest-first
            assert_eq!(got, want);
            // Bounded retrieval returns the newest prefix.
            let got_limited: Vec<u64> =
                buffer.retrieve(route, None, 3).iter().map(|g| g.id.0).collect();
            assert_eq!(got_limited, want.iter().copied().take(3).collect::<Vec<_>>());
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(2), "took {elapsed:?}, budget 2s");
    println!("ACCEPTANCE C4 gradient buffer discipline ({elapsed:?}): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 5 — closed-loop co-evolution on the synthetic oracle.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_closed_loop_coevolution() {
    let start = Instant::now();
    let run = run_closed_loop(closed_loop_config(), None);

    // Starting condition: the deployed defense (first defender seed) has
    // train-TPR <= 0.2 against every initial attack seed.
    let corpus = closed_loop_corpus();
    let split = run.state.resolve_split(&corpus).unwrap();
    let memo = BenignMemo::new(run.engine.grader().context_digest());
    let initial_defense = run.state.candidate(run.state.initial_defense).unwrap();
    for (i, seed_text) in default_attacker_seeds().iter().enumerate() {
        let seed_attack =
            PromptCandidate::seed(CandidateId(70_000 + i as u64), Role::Attacker, seed_text.clone());
        let (metrics, _, _) = run
            .engine
            .grader()
            .eval_defense(initial_defense, &seed_attack, &split.train, &memo)
            .unwrap();
        assert!(
            metrics.tpr <= 0.2,
            "seed defense already detects seed attack {i}: tpr {}",
            metrics.tpr
        );
    }

    let history = &run.outcome.history;
    assert!(!history.is_empty());
    let last = history.last().unwrap();

    // Defender endpoint: validation TPR >= 0.8 with TNR >= 0.9.
    assert!(last.defense_tpr >= 0.8, "final defender TPR {}", last.defense_tpr);
    assert!(last.defense_tnr >= 0.9, "final defender TNR {}", last.defense_tnr);

    // Attacker endpoint: ASR against the iteration-0 defense reaches 1.0.
    assert!(
        history.iter().any(|h| (h.attack_asr - 1.0).abs() < TOL),
        "attacker never reached ASR 1.0: {history:?}"
    );
    assert!((last.attack_asr - 1.0).abs() < TOL);

    // Qualitative dynamic: rising TPR, rising relative score change, and a
    // transient TNR cost along the way.
    assert!(last.defense_tpr > history[0].defense_tpr - TOL);
    for pair in history.windows(2) {
        assert!(
            pair[1].defense_tpr >= pair[0].defense_tpr - TOL,
            "TPR regressed: {history:?}"
        );
    }
    assert!(
        last.attack_mean_delta_s_rel > history[0].attack_mean_delta_s_rel + 0.1,
        "relative score change did not rise: {history:?}"
    );
    let min_tnr = history.iter().map(|h| h.defense_tnr).fold(f64::INFINITY, f64::min);
    let max_tnr = history.iter().map(|h| h.defense_tnr).fold(0.0, f64::max);
    assert!(min_tnr < max_tnr - 0.05, "no visible TNR cost: {history:?}");

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}, budget 60s");
    println!(
        "ACCEPTANCE C5 closed-loop co-evolution (final TPR {:.2}, TNR {:.2}, ASR {:.2}, {elapsed:?}): PASS",
        last.defense_tpr, last.defense_tnr, last.attack_asr
    );
}

// ---------------------------------------------------------------------------
// Criterion 6 — ablation orderings on the synthetic oracle.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_ablation_orderings() {
    let start = Instant::now();

    let default_run = run_closed_loop(closed_loop_config(), None);
    let default_first =
        first_iteration_reaching_tpr(&default_run.outcome.history, 0.8).expect("default reaches 0.8");

    // Disabling the gradient buffer strictly slows (or prevents) reaching
    // TPR >= 0.8 within the iteration budget.
    let mut no_buffer = closed_loop_config();
    no_buffer.use_gradient_buffer = false;
    let no_buffer_run = run_closed_loop(no_buffer, None);
    let no_buffer_first = first_iteration_reaching_tpr(&no_buffer_run.outcome.history, 0.8);
    assert!(
        no_buffer_first.is_none_or(|i| i > default_first),
        "buffer ablation did not slow convergence: default {default_first}, ablated {no_buffer_first:?}"
    );

    // Disabling multi-route gradients likewise.
    let mut single_route = closed_loop_config();
    single_route.use_multi_route = false;
    let single_route_run = run_closed_loop(single_route, None);
    let single_route_first =
        first_iteration_reaching_tpr(&single_route_run.outcome.history, 0.8);
    assert!(
        single_route_first.is_none_or(|i| i > default_first),
        "multi-route ablation did not slow convergence: default {default_first}, ablated {single_route_first:?}"
    );

    // Single-sided training: a defender trained against a frozen attacker
    // fails on a held-out attack category that the co-evolved defender
    // handles.
    let mut frozen = closed_loop_config();
    frozen.freeze_attacker = true;
    let frozen_run = run_closed_loop(frozen, None);
    let corpus = closed_loop_corpus();
    let split = frozen_run.state.resolve_split(&corpus).unwrap();
    // The frozen attacker is the first seed (category 0); category 1 is
    // held out from its training entirely.
    let held_out = PromptCandidate::seed(CandidateId(80_000), Role::Attacker, canonical_attack(1));

    let memo = BenignMemo::new(frozen_run.engine.grader().context_digest());
    let (frozen_metrics, _, _) = frozen_run
        .engine
        .grader()
        .eval_defense(&frozen_run.outcome.best_defense, &held_out, &split.validation, &memo)
        .unwrap();
    let memo = BenignMemo::new(default_run.engine.grader().context_digest());
    let (coevolved_metrics, _, _) = default_run
        .engine
        .grader()
        .eval_defense(&default_run.outcome.best_defense, &held_out, &split.validation, &memo)
        .unwrap();
    assert!(
        frozen_metrics.tpr < 0.2,
        "single-sided defender unexpectedly generalizes: tpr {}",
        frozen_metrics.tpr
    );
    assert!(
        coevolved_metrics.tpr >= 0.8,
        "co-evolved defender should handle the held-out category: tpr {}",
        coevolved_metrics.tpr
    );

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(180), "took {elapsed:?}, budget 3min");
    println!(
        "ACCEPTANCE C6 ablations (default reaches 0.8 at i={default_first}, no-buffer {no_buffer_first:?}, single-route {single_route_first:?}, frozen held-out TPR {:.2}, {elapsed:?}): PASS",
        frozen_metrics.tpr
    );
}

// ---------------------------------------------------------------------------
// Criterion 7 — checkpoint/resume trace equality.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_checkpoint_resume_trace_equality() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();

    let full = run_closed_loop(closed_loop_config(), Some(dir.path()));
    let full_history = serde_json::to_string(&full.outcome.history).unwrap();

    // Take the state exactly as an interrupted process would have left it
    // after iteration 1, and continue in a fresh engine.
    let mut resumed_state = restore(&dir.path().join("checkpoint-0001.json")).unwrap();
    assert_eq!(resumed_state.gan_iteration, 1);
    let corpus = closed_loop_corpus();
    let gateway = Arc::new(Gateway::new(
        Arc::new(oracle_backend()),
        1,
        RetryPolicy { max_attempts: 2, base_delay: Duration::ZERO },
    ));
    let engine = Engine::new(
        closed_loop_config(),
        gateway,
        None,
        TemplateSet::default(),
        EventLog::in_memory(),
        None,
    );
    let resumed_outcome = engine.run(&mut resumed_state, &corpus).unwrap();
    let resumed_history = serde_json::to_string(&resumed_outcome.history).unwrap();

    assert_eq!(full_history, resumed_history, "resumed trace diverged");
    assert_eq!(full.outcome.best_attack.text, resumed_outcome.best_attack.text);
    assert_eq!(full.outcome.best_defense.text, resumed_outcome.best_defense.text);

    let elapsed = start.elapsed();
    println!("ACCEPTANCE C7 checkpoint/resume trace equality ({elapsed:?}): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 8 — structured-output robustness over a malformed fixture set.
// ---------------------------------------------------------------------------

struct StructuredFixture {
    name: &'static str,
    first_response: &'static str,
    /// Response to the corrective re-ask; `None` keeps returning the
    /// first response (hopeless case).
    recovery: Option<&'static str>,
    parses_directly: bool,
}

const VALID: &str = "{\"score\": 7, \"injection_detected\": false}";

fn structured_fixtures() -> Vec<StructuredFixture> {
    let direct = |name, first| StructuredFixture {
        name,
        first_response: first,
        recovery: None,
        parses_directly: true,
    };
    let retry = |name, first| StructuredFixture {
        name,
        first_response: first,
        recovery: Some(VALID),
        parses_directly: false,
    };
    let hopeless = |name, first| StructuredFixture {
        name,
        first_response: first,
        recovery: None,
        parses_directly: false,
    };
    vec![
        // Wrapped but extractable: 12 cases.
        direct("plain", VALID),
        direct("prose prefix", "Sure, here is the grading outcome:\n{\"score\": 7, \"injection_detected\": false}"),
        direct("prose suffix", "{\"score\": 4, \"injection_detected\": true}\nLet me know if you need anything else!"),
        direct("code fence", "```json\n{\"score\": 9, \"injection_detected\": false}\n```"),
        direct("bare fence", "```\n{\"score\": 2, \"injection_detected\": true}\n```"),
        direct("leading object without fields", "{\"note\": \"checked\"} final: {\"score\": 5, \"injection_detected\": false}"),
        direct("nested braces in string", "{\"comment\": \"weird { and } inside\", \"score\": 8, \"injection_detected\": false}"),
        direct("multiline pretty", "{\n  \"score\": 6,\n  \"injection_detected\": false\n}"),
        direct("extra fields", "{\"score\": 3, \"injection_detected\": true, \"reason\": \"embedded instructions\"}"),
        direct("string score", "{\"score\": \"7\", \"injection_detected\": false}"),
        direct("string boolean", "{\"score\": 7, \"injection_detected\": \"false\"}"),
        direct("surrounded by bullets", "- verdict follows\n- {\"score\": 10, \"injection_detected\": false}\n- end"),
        // Recoverable only via the corrective re-ask: 6 cases.
        retry("single quotes", "{'score': 7, 'injection_detected': false}"),
        retry("trailing comma", "{\"score\": 7, \"injection_detected\": false,}"),
        retry("missing field", "{\"score\": 7}"),
        retry("yaml-ish", "score: 7\ninjection_detected: false"),
        retry("truncated", "{\"score\": 7, \"injection_det"),
        retry("empty reply", "   "),
        // Hopeless: 2 cases.
        hopeless("xml forever", "<verdict><score>7</score></verdict>"),
        hopeless("refusal", "I cannot grade this submission."),
    ]
}

#[test]
fn criterion_08_structured_output_robustness() {
    let start = Instant::now();
    let fixtures = structured_fixtures();
    assert_eq!(fixtures.len(), 20);

    let mut successes = 0;
    let mut retry_successes = 0;
    let mut clean_failures = 0;
    for fixture in &fixtures {
        let first = fixture.first_response;
        let recovery = fixture.recovery;
        let backend = ScriptedBackend::new(vec![
            ScriptedRule::func(
                "re-ask",
                0,
                Matcher::Substring("could not be parsed".into()),
                move |_| recovery.unwrap_or(first).to_string(),
            ),
            ScriptedRule::text("first", 10, Matcher::Always, first),
        ]);
        let gateway = Gateway::new(
            Arc::new(backend),
            1,
            RetryPolicy { max_attempts: 2, base_delay: Duration::ZERO },
        )
        .with_structured_retries(2);
        let mut request = ChatRequest::new("grade it", "the submission");
        request.response_format = ResponseFormat::StructuredDocument;
        match gateway.complete_structured(&request, &[FIELD_SCORE, FIELD_DETECTED]) {
            Ok(document) => {
                assert!(document.get(FIELD_SCORE).is_some());
                successes += 1;
                if !fixture.parses_directly {
                    retry_successes += 1;
                }
            }
            Err(GatewayError::MalformedAfterRetries { retries, raw_attempts }) => {
                assert_eq!(retries, 2);
                assert!(!raw_attempts.is_empty(), "{}: raw attempts must be logged", fixture.name);
                clean_failures += 1;
            }
            Err(other) => panic!("{}: unexpected error {other:?}", fixture.name),
        }
    }

    assert!(successes >= 18, "only {successes}/20 fixtures parsed");
    assert_eq!(retry_successes, 6, "re-ask path should recover the malformed cases");
    assert_eq!(clean_failures, 20 - successes);

    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE C8 structured-output robustness ({successes}/20 parsed, {retry_successes} via re-ask, {clean_failures} clean failures, {elapsed:?}): PASS"
    );
}

// ---------------------------------------------------------------------------
// Criterion 9 — benign-grade memoization, counted at the gateway.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_benign_grade_memoization() {
    let start = Instant::now();
    let run = run_closed_loop(closed_loop_config(), None);
    let corpus = closed_loop_corpus();
    let text_to_id: BTreeMap<&str, &str> =
        corpus.iter().map(|a| (a.text.as_str(), a.article_id.as_str())).collect();

    // A benign baseline call is a grading request with no defense
    // installed (the system prompt starts at the rubric delimiter).
    let mut benign_calls: BTreeMap<String, usize> = BTreeMap::new();
    for request in run.recorder.requests() {
        let is_grading = request.system_text.contains(&format!("\"{FIELD_DETECTED}\""));
        let no_defense = request.system_text.starts_with(RUBRIC_DELIMITER);
        if is_grading && no_defense {
            let id = text_to_id
                .get(request.user_text.as_str())
                .unwrap_or_else(|| panic!("benign call for unknown article"));
            *benign_calls.entry(id.to_string()).or_default() += 1;
        }
    }

    // Memoization holds exactly: every article graded benign at most once
    // across all iterations, and the training split accounts for exactly
    // |train| calls. (Validation-split baselines, needed by Val(), are
    // memoized the same way and counted separately.)
    for (article, count) in &benign_calls {
        assert_eq!(*count, 1, "article {article} graded benign {count} times");
    }
    let train_calls: usize =
        run.state.train_ids.iter().filter_map(|id| benign_calls.get(id)).sum();
    let val_calls: usize =
        run.state.validation_ids.iter().filter_map(|id| benign_calls.get(id)).sum();
    assert_eq!(train_calls, run.state.train_ids.len(), "train-split benign calls");
    assert_eq!(val_calls, run.state.validation_ids.len(), "validation-split benign calls");
    assert_eq!(train_calls, 40);

    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE C9 benign-grade memoization ({train_calls} train + {val_calls} validation baselines, each exactly once, {elapsed:?}): PASS"
    );
}

// ---------------------------------------------------------------------------
// Criterion 10 — byte-identical artifacts across repeated executions.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_determinism() {
    let start = Instant::now();
    let mut bundles = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let run = run_closed_loop(closed_loop_config(), None);
        coevo_core::report::write_history(&run.outcome.history, dir.path()).unwrap();
        coevo_core::report::write_best_prompts(
            &run.outcome.best_attack,
            &run.outcome.best_defense,
            dir.path(),
        )
        .unwrap();
        let mut bundle = Vec::new();
        for artifact in
            ["history.json", "history.txt", "history.csv", "best_attack.txt", "best_defense.txt"]
        {
            bundle.push((artifact, std::fs::read(dir.path().join(artifact)).unwrap()));
        }
        bundles.push(bundle);
    }
    for (a, b) in bundles[0].iter().zip(&bundles[1]) {
        assert_eq!(a.1, b.1, "artifact {} differs between executions", a.0);
    }

    let elapsed = start.elapsed();
    println!("ACCEPTANCE C10 determinism (byte-identical artifacts, {elapsed:?}): PASS");
}

// ---------------------------------------------------------------------------
// Supporting invariants exercised at acceptance scope.
// ---------------------------------------------------------------------------

#[test]
fn closed_loop_pool_and_record_invariants() {
    let run = run_closed_loop(closed_loop_config(), None);
    // Pools never exceed capacity and stay sorted by the tie-break.
    for pool in [&run.state.attacker_pool, &run.state.defender_pool] {
        assert!(pool.len() <= pool.capacity());
        let entries: Vec<&PoolEntry> = pool.entries().iter().collect();
        for pair in entries.windows(2) {
            let a = pair[0].score.unwrap_or(f64::NEG_INFINITY);
            let b = pair[1].score.unwrap_or(f64::NEG_INFINITY);
            assert!(a >= b, "pool not sorted by score");
        }
    }
    // Every candidate lineage terminates at a seed.
    for candidate in run.state.candidates.values() {
        let lineage = run.state.lineage(candidate.id);
        let root_is_seed = lineage.iter().any(|id| {
            run.state.candidate(*id).map(|c| c.provenance == Provenance::SeedCategory)
                == Some(true)
        });
        assert!(root_is_seed, "candidate {} has no seed ancestor", candidate.id);
    }
    // Aggregates match a recount on an arbitrary record list.
    let memo = BenignMemo::new(run.engine.grader().context_digest());
    let corpus = closed_loop_corpus();
    let split = run.state.resolve_split(&corpus).unwrap();
    let (metrics, records) = run
        .engine
        .grader()
        .eval_attack(
            &run.outcome.best_attack,
            run.state.candidate(run.state.initial_defense).unwrap(),
            &split.validation,
            &memo,
        )
        .unwrap();
    let recount = aggregate_attack(&records).unwrap();
    assert_eq!(metrics, recount);
    assert_eq!(records.len(), split.validation.len());
}
