//! Core data types, configuration schema, and validation shared by every
//! other module: prompt candidates, score weights, run configuration, and
//! per-article evaluation records.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which side of the arms race a prompt belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Attacker,
    Defender,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Attacker => write!(f, "attacker"),
            Role::Defender => write!(f, "defender"),
        }
    }
}

/// How a candidate came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// One of the initial category templates.
    SeedCategory,
    /// Produced by applying a textual gradient to a parent candidate.
    GradientEdit,
}

/// Identifier for a prompt candidate, unique per (role, id) within a run.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct CandidateId(pub u64);

impl fmt::Display for CandidateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{:04}", self.0)
    }
}

/// Identifier for a stored textual gradient.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct GradientId(pub u64);

impl fmt::Display for GradientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{:04}", self.0)
    }
}

/// One attack or defense prompt with its lineage bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub id: CandidateId,
    pub role: Role,
    pub text: String,
    /// Absent iff this candidate is a seed.
    pub parent_id: Option<CandidateId>,
    pub gan_iteration: u32,
    pub opt_iteration: u32,
    pub provenance: Provenance,
    pub applied_gradient_ids: Vec<GradientId>,
}

impl PromptCandidate {
    /// Builds a seed candidate. Panics on empty text; seed sets are
    /// validated before construction.
    pub fn seed(id: CandidateId, role: Role, text: impl Into<String>) -> Self {
        let text = text.into();
        assert!(!text.trim().is_empty(), "seed candidate text must be non-empty");
        Self {
            id,
            role,
            text,
            parent_id: None,
            gan_iteration: 0,
            opt_iteration: 0,
            provenance: Provenance::SeedCategory,
            applied_gradient_ids: Vec::new(),
        }
    }

    /// Structural invariants: non-empty text and the parent/provenance tie.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.text.trim().is_empty() {
            return Err(format!("candidate {} has empty text", self.id));
        }
        match (self.provenance, self.parent_id) {
            (Provenance::SeedCategory, Some(_)) => {
                Err(format!("seed candidate {} must not have a parent", self.id))
            }
            (Provenance::GradientEdit, None) => {
                Err(format!("edited candidate {} must have a parent", self.id))
            }
            _ => Ok(()),
        }
    }
}

/// Weight and power coefficients for the attack and defense scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub w_asr: f64,
    pub w_sc: f64,
    pub p_asr: f64,
    pub p_sc: f64,
    pub w_tp: f64,
    pub w_tn: f64,
    pub p_tp: f64,
    pub p_tn: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            w_asr: 0.5,
            w_sc: 0.5,
            p_asr: 1.0,
            p_sc: 1.0,
            w_tp: 0.5,
            w_tn: 0.5,
            p_tp: 1.0,
            p_tn: 1.0,
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let weights = [
            ("weights.w_asr", self.w_asr),
            ("weights.w_sc", self.w_sc),
            ("weights.w_tp", self.w_tp),
            ("weights.w_tn", self.w_tn),
        ];
        for (name, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(ConfigError::InvalidRange {
                    field: name.into(),
                    detail: "weights must be finite and >= 0".into(),
                });
            }
        }
        if self.w_asr == 0.0 && self.w_sc == 0.0 {
            return Err(ConfigError::InvalidRange {
                field: "weights.w_asr/w_sc".into(),
                detail: "at least one attacker weight must be > 0".into(),
            });
        }
        if self.w_tp == 0.0 && self.w_tn == 0.0 {
            return Err(ConfigError::InvalidRange {
                field: "weights.w_tp/w_tn".into(),
                detail: "at least one defender weight must be > 0".into(),
            });
        }
        let powers = [
            ("weights.p_asr", self.p_asr),
            ("weights.p_sc", self.p_sc),
            ("weights.p_tp", self.p_tp),
            ("weights.p_tn", self.p_tn),
        ];
        for (name, p) in powers {
            if !p.is_finite() || p <= 0.0 {
                return Err(ConfigError::InvalidRange {
                    field: name.into(),
                    detail: "power parameters must be finite and > 0".into(),
                });
            }
        }
        Ok(())
    }
}

/// Which kind of chat backend a run talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
    Replay,
}

/// Connection, retry, and sampling settings for the chat backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API credential.
    /// The configuration file never contains the secret itself.
    pub credential_env: String,
    /// Global in-flight request cap.
    pub parallelism: usize,
    pub max_attempts: u32,
    pub retry_base_ms: u64,
    pub temperature_grade: f64,
    pub temperature_edit: f64,
    pub max_tokens: u32,
    /// Directory for the record/replay cache, when used.
    pub cache_dir: Option<PathBuf>,
    /// Re-ask budget for malformed structured responses.
    pub structured_retries: u32,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4.1-mini".into(),
            credential_env: "OPENAI_API_KEY".into(),
            parallelism: 4,
            max_attempts: 3,
            retry_base_ms: 250,
            temperature_grade: 0.0,
            temperature_edit: 0.7,
            max_tokens: 1024,
            cache_dir: None,
            structured_retries: 2,
        }
    }
}

/// Optional file overrides for prompts and templates shipped as built-ins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PathOverrides {
    pub rubric: Option<PathBuf>,
    /// Inline injection template with `{article}` and `{attack}` markers.
    pub injection_template: Option<String>,
    pub templates_dir: Option<PathBuf>,
    pub attacker_seeds: Option<PathBuf>,
    pub defender_seeds: Option<PathBuf>,
}

/// Fully validated run configuration. Defaults mirror the shipped
/// hyperparameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Outer loop budget N.
    pub max_gan_iterations: u32,
    /// Inner optimization iterations M per cycle.
    pub opt_iterations_per_cycle: u32,
    pub initial_categories: u32,
    pub top_k: usize,
    pub s_max: f64,
    /// Round parsed grades to integers; a flag allows real-valued grades.
    pub integer_grades: bool,
    pub use_multi_route: bool,
    pub use_gradient_buffer: bool,
    /// Per (role, route) lane capacity.
    pub buffer_capacity: usize,
    /// Most-recent entries replayed into a gradient request.
    pub buffer_retrieval: usize,
    /// Feedback messages requested per (candidate, route).
    pub n_gradients: usize,
    /// Worst-case records rendered into an error string.
    pub error_cases_per_route: usize,
    pub excerpt_char_budget: usize,
    pub convergence_epsilon: f64,
    pub rng_seed: u64,
    pub train_fraction: f64,
    /// Tolerated fraction of per-article grading failures before a cycle aborts.
    pub grade_failure_tolerance: f64,
    /// Single-sided training: keep the attacker fixed at its seed.
    pub freeze_attacker: bool,
    pub weights: ScoreWeights,
    pub backend: BackendSettings,
    pub paths: PathOverrides,
    /// Free-form extra instruction templates. Reserved slot with no
    /// engine-assigned semantics.
    pub extra_instruction_templates: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_gan_iterations: 8,
            opt_iterations_per_cycle: 8,
            initial_categories: 4,
            top_k: 4,
            s_max: 10.0,
            integer_grades: true,
            use_multi_route: true,
            use_gradient_buffer: true,
            buffer_capacity: 16,
            buffer_retrieval: 4,
            n_gradients: 2,
            error_cases_per_route: 4,
            excerpt_char_budget: 600,
            convergence_epsilon: 0.0,
            rng_seed: 42,
            train_fraction: 0.8,
            grade_failure_tolerance: 0.1,
            freeze_attacker: false,
            weights: ScoreWeights::default(),
            backend: BackendSettings::default(),
            paths: PathOverrides::default(),
            extra_instruction_templates: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Conservative bound on candidates producible in one optimization
    /// cycle, counting only the seed population as parents.
    pub fn producible_per_cycle(&self) -> usize {
        (self.initial_categories as usize)
            .saturating_mul(self.n_gradients)
            .saturating_mul(self.opt_iterations_per_cycle.max(1) as usize)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn range(field: &str, ok: bool, detail: &str) -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::InvalidRange { field: field.into(), detail: detail.into() })
            }
        }
        range("max_gan_iterations", self.max_gan_iterations >= 1, "must be >= 1")?;
        range("opt_iterations_per_cycle", self.opt_iterations_per_cycle >= 1, "must be >= 1")?;
        range("initial_categories", self.initial_categories >= 1, "must be >= 1")?;
        range("top_k", self.top_k >= 1, "must be >= 1")?;
        range(
            "top_k",
            self.top_k <= self.producible_per_cycle(),
            "must not exceed the number of candidates producible per cycle",
        )?;
        range("s_max", self.s_max.is_finite() && self.s_max > 0.0, "must be > 0")?;
        range("buffer_capacity", self.buffer_capacity >= 1, "must be >= 1")?;
        range("buffer_retrieval", self.buffer_retrieval >= 1, "must be >= 1")?;
        range("n_gradients", self.n_gradients >= 1, "must be >= 1")?;
        range("error_cases_per_route", self.error_cases_per_route >= 1, "must be >= 1")?;
        range("excerpt_char_budget", self.excerpt_char_budget >= 1, "must be >= 1")?;
        range(
            "convergence_epsilon",
            self.convergence_epsilon.is_finite() && self.convergence_epsilon >= 0.0,
            "must be >= 0",
        )?;
        range(
            "train_fraction",
            self.train_fraction > 0.0 && self.train_fraction < 1.0,
            "must be strictly between 0 and 1",
        )?;
        range(
            "grade_failure_tolerance",
            (0.0..=1.0).contains(&self.grade_failure_tolerance),
            "must be within [0, 1]",
        )?;
        self.weights.validate()?;
        range("backend.parallelism", self.backend.parallelism >= 1, "must be >= 1")?;
        range("backend.max_attempts", self.backend.max_attempts >= 1, "must be >= 1")?;
        range(
            "backend.temperature_grade",
            self.backend.temperature_grade.is_finite() && self.backend.temperature_grade >= 0.0,
            "must be >= 0",
        )?;
        range(
            "backend.temperature_edit",
            self.backend.temperature_edit.is_finite() && self.backend.temperature_edit >= 0.0,
            "must be >= 0",
        )?;
        if self.backend.kind == BackendKind::Http {
            if self.backend.endpoint.trim().is_empty() {
                return Err(ConfigError::MissingField { field: "backend.endpoint".into() });
            }
            if self.backend.model.trim().is_empty() {
                return Err(ConfigError::MissingField { field: "backend.model".into() });
            }
            if self.backend.credential_env.trim().is_empty() {
                return Err(ConfigError::MissingField { field: "backend.credential_env".into() });
            }
        }
        Ok(())
    }
}

/// Configuration errors. `InvalidRange` and `MissingField` name the
/// offending field.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("configuration does not parse: {0}")]
    Parse(String),
    #[error("missing required field `{field}`")]
    MissingField { field: String },
    #[error("field `{field}` out of range: {detail}")]
    InvalidRange { field: String, detail: String },
}

/// Parses a TOML configuration document, applies defaults, and validates
/// every invariant. An empty document yields the default configuration.
pub fn validate_config(raw: &str) -> Result<RunConfig, ConfigError> {
    let config: RunConfig =
        toml::from_str(raw).map_err(|e| ConfigError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Outcome of grading one article, possibly under attack, possibly with a
/// detection pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub article_id: String,
    /// Baseline grade of the clean article (no attack, no defense).
    pub s_benign: f64,
    /// Present iff the record came from an attacked grading pass.
    pub s_attacked: Option<f64>,
    /// Present iff the record came from an attacked grading pass.
    pub injection_detected: Option<bool>,
    /// Present iff the record came from a benign detection pass.
    pub benign_flagged: Option<bool>,
    /// Relative score change of the attacked pass.
    pub delta_s_rel: Option<f64>,
}

impl EvalRecord {
    pub fn is_attacked_pass(&self) -> bool {
        self.s_attacked.is_some()
    }

    pub fn is_benign_pass(&self) -> bool {
        self.benign_flagged.is_some()
    }
}

/// Corpus-level attacker metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    /// Fraction of attacked gradings where the injection went undetected.
    pub asr: f64,
    pub mean_delta_s_rel: f64,
    pub n_articles: usize,
}

/// Corpus-level defender metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseMetrics {
    pub tpr: f64,
    pub tnr: f64,
    pub n_malicious: usize,
    pub n_benign: usize,
}
