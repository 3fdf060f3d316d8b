//! Per-context attention and style weights, for inspection and for the
//! qualitative checks on trained runs.

use serde::Serialize;

use super::train::{dial_data, Bundle};
use crate::dialogue::{style_weights, StyleBank};
use crate::error::{CcrsError, Result};

/// What the model attends to before one recommender response.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContextDiagnostics {
    pub conv_id: String,
    /// `(entity, turn)` pairs the intention pools over.
    pub history: Vec<(usize, usize)>,
    pub mu_o: Vec<f64>,
    pub mu_r: Vec<f64>,
    /// `μ^m`; empty without a dialogue part.
    pub style: Vec<f64>,
}

/// Diagnostics for every gold recommender response of a conversation,
/// using the global (unadapted) parameters.
pub fn diagnose_conversation(bundle: &Bundle, conv_id: &str) -> Result<Vec<ContextDiagnostics>> {
    let Some((dial, dial_params)) = &bundle.dial else {
        return Err(CcrsError::Missing("diagnostics need a dialogue checkpoint".into()));
    };
    let conv = bundle.prepared.conversation(conv_id)?;
    let data = dial_data(&bundle.prepared, &bundle.rec, &bundle.rec_params, dial, &conv.user_id, &[conv_id.to_string()])?;
    let bank = StyleBank::from_params(dial_params)?;
    let histories: Vec<_> = data.samples.iter().map(|s| s.history.clone()).collect();
    bundle
        .rec
        .infer_many(&bundle.rec_params, data.user, &histories)
        .into_iter()
        .zip(histories)
        .map(|(state, history)| {
            Ok(ContextDiagnostics {
                conv_id: conv_id.to_string(),
                style: style_weights(&state.p_u, &bank, dial.cfg.style_softmax)?,
                history,
                mu_o: state.mu_o,
                mu_r: state.mu_r,
            })
        })
        .collect()
}

/// Mean `μ^o` weight of the earliest and of the latest mention turn, over
/// histories spanning at least two distinct turns.
pub fn first_last_turn_weight(contexts: &[ContextDiagnostics]) -> Option<(f64, f64)> {
    let mut first = Vec::new();
    let mut last = Vec::new();
    for c in contexts {
        let lo = c.history.iter().map(|h| h.1).min()?;
        let hi = c.history.iter().map(|h| h.1).max()?;
        if lo == hi {
            continue;
        }
        let sum_at = |t: usize| c.history.iter().zip(&c.mu_o).filter(|(h, _)| h.1 == t).map(|(_, w)| w).sum::<f64>();
        first.push(sum_at(lo));
        last.push(sum_at(hi));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (!first.is_empty()).then(|| (mean(&first), mean(&last)))
}

/// Elementwise mean of the style weights.
pub fn mean_style(contexts: &[ContextDiagnostics]) -> Option<Vec<f64>> {
    let n = contexts.first()?.style.len();
    let mut acc = vec![0.0; n];
    for c in contexts {
        for (a, w) in acc.iter_mut().zip(&c.style) {
            *a += w;
        }
    }
    Some(acc.into_iter().map(|a| a / contexts.len() as f64).collect())
}

pub fn argmax(v: &[f64]) -> Option<usize> {
    v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).map(|(i, _)| i)
}
