//! Demonstration retrieval and in-context input construction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::seq2seq::split_tokens;
use crate::taskstream::{Example, StreamError, Task};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RetrieverError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

/// Function words of the question templates; they carry no content.
pub const STOP_TOKENS: &[&str] = &[
    "the", "of", "is", "in", "where", "whose", "equals", "for", "each", "with", "rows", "have",
    "a", "an", "_", ",", ".", ":", ";", "|", "||", "(", ")", "'", "=", "*",
];

/// Similarity on the `[0, 5]` scale.
pub trait Scorer {
    fn score(&self, q: &str, q2: &str) -> Result<f64, RetrieverError>;
}

/// `5 × F1` between the multisets of content tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexicalScorer;

fn content_counts(q: &str) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for t in split_tokens(q) {
        let t = t.to_lowercase();
        if !STOP_TOKENS.contains(&t.as_str()) {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    counts
}

impl Scorer for LexicalScorer {
    fn score(&self, q: &str, q2: &str) -> Result<f64, RetrieverError> {
        similarity(q, q2)
    }
}

pub fn similarity(q: &str, q2: &str) -> Result<f64, RetrieverError> {
    if q.trim().is_empty() || q2.trim().is_empty() {
        return Err(RetrieverError::Contract(
            "similarity of an empty question".into(),
        ));
    }
    let (a, b) = (content_counts(q), content_counts(q2));
    let (na, nb): (usize, usize) = (a.values().sum(), b.values().sum());
    if na == 0 || nb == 0 {
        // Only function words: fall back to identity of the token sequences.
        let same = split_tokens(q) == split_tokens(q2);
        return Ok(if same { 5.0 } else { 0.0 });
    }
    let overlap: usize = a
        .iter()
        .map(|(t, &c)| c.min(b.get(t).copied().unwrap_or(0)))
        .sum();
    Ok(5.0 * 2.0 * overlap as f64 / (na + nb) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub r: usize,
    pub eta: f64,
}

impl RetrieverConfig {
    /// Recalibrated threshold for the lexical scorer.
    pub fn toy() -> Self {
        Self { r: 1, eta: 2.0 }
    }

    pub fn paper() -> Self {
        Self { r: 1, eta: 4.0 }
    }

    pub fn validate(&self) -> Result<(), RetrieverError> {
        if self.r < 1 || !(0.0..=5.0).contains(&self.eta) {
            return Err(RetrieverError::Contract(format!(
                "need r ≥ 1 and 0 ≤ η ≤ 5, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDemonstration {
    /// Index into the pool.
    pub index: usize,
    pub score: f64,
}

/// Top-`r` pool entries with `σ ≥ η`, excluding the query itself (same
/// question on the same schema). Sorted by score, then pool index. The
/// query's SQL is never read.
pub fn retrieve_with(
    scorer: &dyn Scorer,
    e: &Example,
    pool: &[Example],
    config: &RetrieverConfig,
) -> Result<Vec<ScoredDemonstration>, RetrieverError> {
    config.validate()?;
    let mut scored = Vec::new();
    for (index, cand) in pool.iter().enumerate() {
        if cand.question == e.question && cand.schema_id == e.schema_id {
            continue;
        }
        let score = scorer.score(&e.question, &cand.question)?;
        if score >= config.eta {
            scored.push(ScoredDemonstration { index, score });
        }
    }
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    scored.truncate(config.r);
    Ok(scored)
}

pub fn retrieve(
    e: &Example,
    pool: &[Example],
    config: &RetrieverConfig,
) -> Result<Vec<ScoredDemonstration>, RetrieverError> {
    retrieve_with(&LexicalScorer, e, pool, config)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub text: String,
    pub demos_used: usize,
    pub with_demonstrations: bool,
}

/// `Q1 | Y1 | … | Qr | Yr || X′`; schemas never appear in the
/// demonstration part.
pub fn format_context(demos: &[&Example], x_prime: &str) -> Result<Context, RetrieverError> {
    if demos.is_empty() {
        return Err(RetrieverError::Contract(
            "format_context needs at least one demonstration".into(),
        ));
    }
    let pairs: Vec<String> = demos
        .iter()
        .map(|d| format!("{} | {}", d.question, d.sql))
        .collect();
    Ok(Context {
        text: format!("{} || {x_prime}", pairs.join(" | ")),
        demos_used: demos.len(),
        with_demonstrations: true,
    })
}

/// Model input for `e`: the demonstration context when exactly `r`
/// demonstrations qualify, otherwise plain `X′`.
pub fn context_input(
    task: &Task,
    e: &Example,
    pool: &[Example],
    config: &RetrieverConfig,
) -> Result<Context, RetrieverError> {
    let x_prime = task.flatten(e)?;
    let demos = retrieve(e, pool, config)?;
    if demos.len() == config.r {
        let refs: Vec<&Example> = demos.iter().map(|d| &pool[d.index]).collect();
        format_context(&refs, &x_prime)
    } else {
        Ok(Context {
            text: x_prime,
            demos_used: 0,
            with_demonstrations: false,
        })
    }
}

/// Context mixing: `[(C, Y), (X′, Y)]` when `r` demonstrations qualify,
/// `[(X′, Y)]` otherwise.
pub fn build_training_inputs(
    task: &Task,
    e: &Example,
    pool: &[Example],
    config: &RetrieverConfig,
) -> Result<Vec<(String, String)>, RetrieverError> {
    let ctx = context_input(task, e, pool, config)?;
    let plain = task.flatten(e)?;
    let mut out = Vec::with_capacity(2);
    if ctx.with_demonstrations {
        out.push((ctx.text, e.sql.clone()));
    }
    out.push((plain, e.sql.clone()));
    Ok(out)
}
