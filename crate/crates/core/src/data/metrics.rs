//! Tagging accuracy, macro-averaged labeled attachment, and exact-match span F1.

use std::collections::HashSet;

use super::DataError;

fn check_aligned<T, U>(pred: &[Vec<T>], gold: &[Vec<U>]) -> Result<(), DataError> {
    if pred.len() != gold.len() {
        return Err(DataError::Invalid(format!("{} predicted vs {} gold sentences", pred.len(), gold.len())));
    }
    if let Some(i) = pred.iter().zip(gold).position(|(p, g)| p.len() != g.len()) {
        return Err(DataError::Invalid(format!("sentence {i} length differs between prediction and gold")));
    }
    Ok(())
}

/// Micro token-level accuracy over the corpus.
pub fn tagging_accuracy<T: PartialEq>(pred: &[Vec<T>], gold: &[Vec<T>]) -> Result<f64, DataError> {
    check_aligned(pred, gold)?;
    let total: usize = gold.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(DataError::Invalid("no tokens to score".into()));
    }
    let correct: usize = pred.iter().zip(gold).map(|(p, g)| p.iter().zip(g).filter(|(a, b)| a == b).count()).sum();
    Ok(correct as f64 / total as f64)
}

/// One sentence's attachments: per token, `(head, label)`.
pub type Attachments<L> = Vec<(usize, L)>;

/// Unweighted mean over sentences of the per-sentence labeled attachment
/// score; a token counts only when head and label both match.
pub fn macro_las<L: PartialEq>(pred: &[Attachments<L>], gold: &[Attachments<L>]) -> Result<f64, DataError> {
    check_aligned(pred, gold)?;
    if gold.is_empty() || gold.iter().any(Vec::is_empty) {
        return Err(DataError::Invalid("macro LAS needs non-empty sentences".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(gold)
        .map(|(p, g)| p.iter().zip(g).filter(|(a, b)| a == b).count() as f64 / g.len() as f64)
        .sum();
    Ok(sum / gold.len() as f64)
}

/// Rewrites every `I-X` not continuing an `X` entity as `B-X`. Idempotent.
pub fn repair_bio(tags: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(tags.len());
    for t in tags {
        let fixed = match t.strip_prefix("I-") {
            Some(ty) => {
                let continues = out.last().and_then(|p| p.get(2..)).is_some_and(|prev| prev == ty);
                if continues {
                    t.clone()
                } else {
                    format!("B-{ty}")
                }
            }
            None => t.clone(),
        };
        out.push(fixed);
    }
    out
}

/// `(type, start, end_exclusive)` spans of a repaired BIO sequence.
pub fn extract_spans(tags: &[String]) -> Vec<(String, usize, usize)> {
    let tags = repair_bio(tags);
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if let Some(ty) = tags[i].strip_prefix("B-") {
            let mut j = i + 1;
            while j < tags.len() && tags[j].strip_prefix("I-") == Some(ty) {
                j += 1;
            }
            spans.push((ty.to_string(), i, j));
            i = j;
        } else {
            i += 1;
        }
    }
    spans
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Exact-match span precision, recall, and F1 over a corpus.
pub fn span_f1(pred: &[Vec<String>], gold: &[Vec<String>]) -> Result<SpanScores, DataError> {
    check_aligned(pred, gold)?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let ps: HashSet<_> = extract_spans(p).into_iter().collect();
        let gs: HashSet<_> = extract_spans(g).into_iter().collect();
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (precision, recall) = (ratio(tp, np), ratio(tp, ng));
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(SpanScores { precision, recall, f1, true_positives: tp, predicted: np, gold: ng })
}
