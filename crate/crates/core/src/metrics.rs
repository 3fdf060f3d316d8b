//! Ranking and generation metrics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{CcrsError, Result};

/// A ranked candidate list and its single gold item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub candidates: Vec<usize>,
    pub gold: usize,
}

impl RankedResult {
    /// 1-based rank of the gold item, if present.
    pub fn rank(&self) -> Option<usize> {
        self.candidates.iter().position(|&c| c == self.gold).map(|i| i + 1)
    }
}

fn mean_over(results: &[RankedResult], k: usize, gain: impl Fn(usize) -> f64) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let total: f64 = results.iter().map(|r| r.rank().filter(|&rank| rank <= k).map_or(0.0, &gain)).sum();
    total / results.len() as f64
}

pub fn hit_rate(results: &[RankedResult], k: usize) -> f64 {
    mean_over(results, k, |_| 1.0)
}

pub fn mrr(results: &[RankedResult], k: usize) -> f64 {
    mean_over(results, k, |rank| 1.0 / rank as f64)
}

pub fn ndcg(results: &[RankedResult], k: usize) -> f64 {
    mean_over(results, k, |rank| 1.0 / ((rank + 1) as f64).log2())
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU with uniform weights up to `max_n`, brevity penalty and
/// add-one smoothing of the n ≥ 2 precisions.
pub fn bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>], max_n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(CcrsError::Dimension(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    let cand_len: usize = candidates.iter().map(Vec::len).sum();
    if cand_len == 0 {
        log::warn!("BLEU over an empty candidate corpus is 0");
        return Ok(0.0);
    }
    let ref_len: usize = references.iter().map(Vec::len).sum();
    let mut log_p = 0.0;
    for n in 1..=max_n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let cc = ngrams(c, n);
            let rc = ngrams(r, n);
            total += cc.values().sum::<usize>();
            matched += cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
        let p = if n == 1 {
            if matched == 0 {
                return Ok(0.0);
            }
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        log_p += p.ln() / max_n as f64;
    }
    let bp = if cand_len >= ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    Ok(bp * log_p.exp())
}

/// Multiset token F1 of one pair.
pub fn token_f1_pair<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return if candidate.is_empty() && reference.is_empty() { 1.0 } else { 0.0 };
    }
    let c = ngrams(candidate, 1);
    let r = ngrams(reference, 1);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / candidate.len() as f64;
    let rc = overlap as f64 / reference.len() as f64;
    2.0 * p * rc / (p + rc)
}

/// Mean pairwise token F1.
pub fn token_f1<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    candidates.iter().zip(references).map(|(c, r)| token_f1_pair(c, r)).sum::<f64>() / candidates.len() as f64
}

/// Distinct n-grams over total n-grams across the corpus.
pub fn distinct_n<S: AsRef<str>>(corpus: &[Vec<S>], n: usize) -> f64 {
    let mut distinct: HashMap<Vec<&str>, usize> = HashMap::new();
    let mut total = 0;
    for sent in corpus {
        for (g, k) in ngrams(sent, n) {
            total += k;
            *distinct.entry(g).or_insert(0) += k;
        }
    }
    if total == 0 {
        log::warn!("no sentence has {n} tokens; distinct-{n} is 0");
        return 0.0;
    }
    distinct.len() as f64 / total as f64
}

pub const RANK_CUTOFFS: [usize; 2] = [10, 50];
pub const DISTINCT_NS: [usize; 3] = [2, 3, 4];

/// Metric name → value, in a fixed key order.
pub type MetricTable = BTreeMap<String, f64>;

/// Ranking metrics at the standard cutoffs.
pub fn ranking_report(results: &[RankedResult]) -> MetricTable {
    let mut m = MetricTable::new();
    for k in RANK_CUTOFFS {
        m.insert(format!("hr@{k}"), hit_rate(results, k));
        m.insert(format!("mrr@{k}"), mrr(results, k));
        m.insert(format!("ndcg@{k}"), ndcg(results, k));
    }
    m
}

/// BLEU-4, token F1 and Distinct-2/3/4 over generated responses.
pub fn generation_report<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<MetricTable> {
    let mut m = MetricTable::new();
    m.insert("bleu".into(), bleu(candidates, references, 4)?);
    m.insert("f1".into(), token_f1(candidates, references));
    for n in DISTINCT_NS {
        m.insert(format!("dist-{n}"), distinct_n(candidates, n));
    }
    Ok(m)
}

/// Evaluation report written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricTable,
    pub cutoffs: Vec<usize>,
    pub distinct_n: Vec<usize>,
    pub bleu_max_n: usize,
    pub adapted: bool,
    pub n_users: usize,
    pub n_rec_labels: usize,
    pub n_responses: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}
