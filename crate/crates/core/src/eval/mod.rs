//! Generation metrics and the experiment suite.

mod suite;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, SpaModel};
use crate::runtime::GatingPolicy;
use crate::train::encode_document;

pub use suite::{run_experiment_suite, ExperimentReport, SuiteConfig, SuiteReport, TierInput};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    /// Set when either side had no tokens.
    pub empty: bool,
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<T: PartialEq>(cand: &[T], reference: &[T]) -> RougeScore {
    if cand.is_empty() || reference.is_empty() {
        return RougeScore {
            precision: 0.0,
            recall: 0.0,
            f_measure: 0.0,
            empty: true,
        };
    }
    let l = lcs_len(cand, reference) as f64;
    let precision = l / cand.len() as f64;
    let recall = l / reference.len() as f64;
    let f_measure = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    RougeScore {
        precision,
        recall,
        f_measure,
        empty: false,
    }
}

/// Sentence-level ROUGE-L on lowercased whitespace tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let tok = |s: &str| -> Vec<String> { s.to_lowercase().split_whitespace().map(str::to_owned).collect() };
    rouge_l_tokens(&tok(candidate), &tok(reference))
}

/// `(σ = 1 count, trace length)`, the exact form of the usage rate.
pub fn usage_counts(sigma: &[u8]) -> (u64, u64) {
    (sigma.iter().filter(|&&s| s == 1).count() as u64, sigma.len() as u64)
}

/// Share of model evaluations with `σ = 1`, in percent.
pub fn usage_percentage(sigma: &[u8]) -> Result<f64, EvalError> {
    let (ones, n) = usage_counts(sigma);
    if n == 0 {
        return Err(EvalError::Undefined("usage of an empty gate trace".into()));
    }
    Ok(100.0 * ones as f64 / n as f64)
}

/// `exp` of the mean teacher-forced token NLL over documents.
pub fn perplexity<S: AsRef<str>>(model: &SpaModel, docs: &[S], policy: GatingPolicy) -> Result<f64, EvalError> {
    let mut nll = 0.0;
    let mut n = 0usize;
    for d in docs {
        let tf = model.teacher_forced(&encode_document(d.as_ref()), policy.gate_mode())?;
        nll += tf.total_nll();
        n += tf.nll.len();
    }
    if n == 0 {
        return Err(EvalError::Undefined("perplexity of an empty corpus".into()));
    }
    Ok((nll / n as f64).exp())
}
