//! Greedy and beam decoding plus item-slot substitution.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{display_name, Vocabulary, END, SLOT, START};

/// Anything that scores the next token given the tokens emitted so far
/// (the prefix excludes the start token).
pub trait NextToken {
    fn next_log_probs(&self, prefix: &[usize]) -> Vec<f64>;
}

/// Decoded ids (without start and end tokens) and whether `max_len` was hit.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub ids: Vec<usize>,
    pub truncated: bool,
    /// Per-step top-5 `(id, probability)` pairs, greedy only.
    pub steps: Vec<Vec<(usize, f64)>>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn top5(logp: &[f64]) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..logp.len()).collect();
    idx.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
    idx.into_iter().take(5).map(|i| (i, logp[i].exp())).collect()
}

pub fn greedy_decode(model: &impl NextToken, max_len: usize) -> Decoded {
    let mut ids = Vec::new();
    let mut steps = Vec::new();
    while ids.len() < max_len {
        let logp = model.next_log_probs(&ids);
        steps.push(top5(&logp));
        let next = argmax(&logp);
        if next == END {
            return Decoded { ids, truncated: false, steps };
        }
        ids.push(next);
    }
    Decoded { ids, truncated: true, steps }
}

/// Beam search ranking finished hypotheses by `log p / len^α`, where `len`
/// counts the end token.
pub fn beam_decode(model: &impl NextToken, width: usize, alpha: f64, max_len: usize) -> Decoded {
    let width = width.max(1);
    let norm = |score: f64, len: usize| score / (len.max(1) as f64).powf(alpha);
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut cand: Vec<(Vec<usize>, f64)> = Vec::new();
        for (ids, score) in &beams {
            let logp = model.next_log_probs(ids);
            let mut order: Vec<usize> = (0..logp.len()).collect();
            order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(width) {
                let mut next = ids.clone();
                next.push(tok);
                cand.push((next, score + logp[tok]));
            }
        }
        cand.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        beams.clear();
        for (ids, score) in cand {
            if beams.len() == width {
                break;
            }
            if ids.last() == Some(&END) {
                if finished.len() < width {
                    finished.push((ids, score));
                }
            } else {
                beams.push((ids, score));
            }
        }
        let best_open = beams.first().map(|(ids, s)| norm(*s, ids.len()));
        let best_done = finished.iter().map(|(ids, s)| norm(*s, ids.len())).fold(f64::NEG_INFINITY, f64::max);
        if finished.len() >= width || beams.is_empty() || best_open.is_some_and(|o| o < best_done) {
            break;
        }
    }
    let pick = |pool: &[(Vec<usize>, f64)]| {
        pool.iter()
            .max_by(|a, b| norm(a.1, a.0.len()).total_cmp(&norm(b.1, b.0.len())).then_with(|| b.0.cmp(&a.0)))
            .cloned()
    };
    match pick(&finished) {
        Some((mut ids, _)) => {
            ids.pop();
            Decoded { ids, truncated: false, steps: Vec::new() }
        }
        None => {
            let (ids, _) = pick(&beams).unwrap_or_default();
            Decoded { ids, truncated: true, steps: Vec::new() }
        }
    }
}

/// Response after slot substitution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Output tokens; item slots are replaced by item display names.
    pub tokens: Vec<String>,
    /// Entity names of the substituted items, in order.
    pub items: Vec<String>,
    /// Style weights `μ^m` used for this response.
    pub style_weights: Vec<f64>,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<Vec<Vec<(String, f64)>>>,
}

impl Generation {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Replaces each slot id by the next item from `pick`, which receives the
/// items already used in this response. Slots with no available item are
/// dropped.
pub fn fill_slots(
    ids: &[usize],
    vocab: &Vocabulary,
    mut pick: impl FnMut(&BTreeSet<String>) -> Option<String>,
) -> (Vec<String>, Vec<String>) {
    let mut used = BTreeSet::new();
    let mut tokens = Vec::with_capacity(ids.len());
    let mut items = Vec::new();
    for &id in ids {
        if id == SLOT {
            if let Some(item) = pick(&used) {
                tokens.push(display_name(&item));
                used.insert(item.clone());
                items.push(item);
            }
        } else if id != START && id != END {
            tokens.push(vocab.token(id).to_string());
        }
    }
    (tokens, items)
}
