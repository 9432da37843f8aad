//! Extraction metrics against an annotated benchmark, and case accuracy.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rules::SemanticRule;

pub const DEFAULT_JACCARD: f64 = 0.5;

/// Name of the matcher, written into every report header.
pub const MATCHER: &str =
    "strict protocol, normalized message_type and field, Jaccard over construction content words";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("empty batch: accuracy is undefined")]
    EmptyBatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkRule {
    pub annotation_id: String,
    #[serde(flatten)]
    pub rule: SemanticRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MetricReport {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

const STOPWORDS: [&str; 48] = [
    "a", "an", "and", "are", "as", "at", "be", "been", "by", "can", "do", "does", "for", "from",
    "has", "have", "if", "in", "into", "is", "it", "its", "may", "must", "not", "of", "on", "or",
    "shall", "should", "so", "such", "than", "that", "the", "their", "then", "there", "these",
    "this", "to", "was", "when", "which", "will", "with", "within", "would",
];

/// Case- and whitespace-folded name.
pub fn normalize_name(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn content_words(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty() && !STOPWORDS.contains(w))
        .map(str::to_string)
        .collect()
}

/// Jaccard index of the content-word sets; two empty sets score 1.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (wa, wb) = (content_words(a), content_words(b));
    let union = wa.union(&wb).count();
    if union == 0 {
        return 1.0;
    }
    wa.intersection(&wb).count() as f64 / union as f64
}

pub fn match_rule(extracted: &SemanticRule, bench: &BenchmarkRule, threshold: f64) -> bool {
    let b = &bench.rule;
    extracted.protocol == b.protocol
        && normalize_name(&extracted.message_type) == normalize_name(&b.message_type)
        && normalize_name(&extracted.field) == normalize_name(&b.field)
        && jaccard(&extracted.construction.content, &b.construction.content) >= threshold
}

/// Greedy one-to-one matching in extraction order.
pub fn score_rules(
    extracted: &[SemanticRule],
    benchmark: &[BenchmarkRule],
    threshold: f64,
) -> MetricReport {
    let mut used = vec![false; benchmark.len()];
    let mut tp = 0;
    for rule in extracted {
        if let Some(j) =
            (0..benchmark.len()).find(|&j| !used[j] && match_rule(rule, &benchmark[j], threshold))
        {
            used[j] = true;
            tp += 1;
        }
    }
    MetricReport::from_counts(tp, extracted.len() - tp, benchmark.len() - tp)
}

/// Share of cases that encoded; `valid` holds one flag per case.
pub fn score_cases(valid: &[bool]) -> Result<f64, EvalError> {
    if valid.is_empty() {
        return Err(EvalError::EmptyBatch);
    }
    Ok(valid.iter().filter(|v| **v).count() as f64 / valid.len() as f64)
}
