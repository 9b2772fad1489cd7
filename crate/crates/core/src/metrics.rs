//! Exact match and token-level F1 with SQuAD-style answer normalization.

use std::collections::HashMap;

/// Lowercase, drop ASCII punctuation, drop the articles `a`/`an`/`the`,
/// collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    normalized_tokens(s).join(" ")
}

fn normalized_tokens(s: &str) -> Vec<String> {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_owned)
        .collect()
}

/// 1 if the normalized prediction equals any normalized gold answer.
pub fn exact_match(pred: &str, golds: &[String]) -> u8 {
    let p = normalize_answer(pred);
    u8::from(golds.iter().any(|g| normalize_answer(g) == p))
}

fn f1_single(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best bag-of-tokens F1 against any gold answer, in `[0, 1]`.
pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    let p = normalized_tokens(pred);
    golds
        .iter()
        .map(|g| f1_single(&p, &normalized_tokens(g)))
        .fold(0.0, f64::max)
}
