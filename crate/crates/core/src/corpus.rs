//! Article corpora: loading, validation, deterministic train/validation
//! splits, and a synthetic benign-corpus generator so the engine runs
//! without any proprietary data.

use std::collections::BTreeSet;
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malicious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Supplied,
}

/// One article in a corpus. Training corpora are benign-only; malicious
/// labels are for user-supplied evaluation sets carrying embedded
/// injections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    #[serde(rename = "id")]
    pub article_id: String,
    pub text: String,
    pub label: Label,
    #[serde(default = "default_source")]
    pub source: Source,
}

fn default_source() -> Source {
    Source::Supplied
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<Article>,
    pub validation: Vec<Article>,
    pub split_seed: u64,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error reading corpus: {0}")]
    Io(String),
    #[error("line {line}: {detail}")]
    ParseError { line: usize, detail: String },
    #[error("duplicate article id `{0}`")]
    DuplicateId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus too small to split: {0} article(s)")]
    TooSmall(usize),
    #[error("malicious articles are not allowed in a training corpus (id `{0}`)")]
    MaliciousInTraining(String),
}

/// Loads a line-delimited JSON corpus, preserving file order. Each line
/// carries `{id, text, label}`.
pub fn load_corpus(path: &Path) -> Result<Vec<Article>, CorpusError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))?;
    parse_corpus(&raw)
}

/// Parses corpus text. Split out from file IO for testability.
pub fn parse_corpus(raw: &str) -> Result<Vec<Article>, CorpusError> {
    let mut articles = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let article: Article = serde_json::from_str(line)
            .map_err(|e| CorpusError::ParseError { line: line_no, detail: e.to_string() })?;
        if article.text.trim().is_empty() {
            return Err(CorpusError::ParseError {
                line: line_no,
                detail: "article text is empty".into(),
            });
        }
        if !seen.insert(article.article_id.clone()) {
            return Err(CorpusError::DuplicateId(article.article_id));
        }
        articles.push(article);
    }
    if articles.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(articles)
}

/// Serializes articles back to the line-delimited format.
pub fn render_corpus(articles: &[Article]) -> String {
    let mut out = String::new();
    for article in articles {
        out.push_str(&serde_json::to_string(article).expect("article serializes"));
        out.push('\n');
    }
    out
}

/// Rejects malicious labels for corpora used as training input.
pub fn require_benign(articles: &[Article]) -> Result<(), CorpusError> {
    for article in articles {
        if article.label == Label::Malicious {
            return Err(CorpusError::MaliciousInTraining(article.article_id.clone()));
        }
    }
    Ok(())
}

/// Deterministic split: seeded shuffle, then a prefix cut at
/// `floor(train_fraction * n)` clamped so neither side is empty.
pub fn split(
    articles: &[Article],
    train_fraction: f64,
    seed: u64,
) -> Result<CorpusSplit, CorpusError> {
    assert!(
        train_fraction > 0.0 && train_fraction < 1.0,
        "train_fraction must be in (0, 1)"
    );
    let n = articles.len();
    if n < 2 {
        return Err(CorpusError::TooSmall(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates over indices; explicit so the shuffle is stable across
    // dependency upgrades.
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let n_train = ((train_fraction * n as f64).floor() as usize).clamp(1, n - 1);
    let train = order[..n_train].iter().map(|&i| articles[i].clone()).collect();
    let validation = order[n_train..].iter().map(|&i| articles[i].clone()).collect();
    Ok(CorpusSplit { train, validation, split_seed: seed })
}

const OPENERS: &[&str] = &[
    "Public libraries quietly anchor the neighborhoods around them.",
    "Urban gardens turn leftover lots into shared ground.",
    "Night trains still carry most of the region's freight.",
    "Handwritten letters travel slower but land harder.",
    "Community radio keeps local weather lore alive.",
    "Old canal paths make the best commuter routes.",
    "Street markets teach more economics than textbooks.",
    "Lighthouse keepers kept journals that read like field science.",
];

const MIDDLES: &[&str] = &[
    "Volunteers keep the doors open through every season, trading shifts the way farmers trade equipment.",
    "The busiest hours come right after school, when the tables fill with homework and argument.",
    "Funding arrives unevenly, so the regulars learn to repair what they cannot replace.",
    "Most visitors come for one thing and stay for another, which is the whole point.",
    "Records from the early years show the same debates we are still having now.",
    "A small group of retirees does the quiet maintenance nobody notices until it stops.",
];

const CLOSERS: &[&str] = &[
    "The lesson is durability: small institutions survive by being useful every single week.",
    "What looks like nostalgia is usually just infrastructure that still works.",
    "None of this scales, and none of it needs to.",
    "The next decade will test whether the habit outlives the building.",
    "It is ordinary work, done in public, and that is why it holds.",
];

/// Generates a benign synthetic corpus of templated short essays. Labeled
/// `Synthetic`; stands in for real training data, which users supply.
pub fn generate_synthetic(n: usize, seed: u64) -> Vec<Article> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let opener = OPENERS[(rng.next_u64() as usize) % OPENERS.len()];
            let middle = MIDDLES[(rng.next_u64() as usize) % MIDDLES.len()];
            let second = MIDDLES[(rng.next_u64() as usize) % MIDDLES.len()];
            let closer = CLOSERS[(rng.next_u64() as usize) % CLOSERS.len()];
            // Single paragraph on purpose: injected attacks are appended
            // after a blank line, so the article body stays one block.
            let text = format!("{opener} {middle} {second} {closer} (essay {i:03})");
            Article {
                article_id: format!("syn-{i:04}"),
                text,
                label: Label::Benign,
                source: Source::Synthetic,
            }
        })
        .collect()
}
