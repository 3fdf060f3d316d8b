//! Meta-test evaluation on the test users: ranking metrics over all items
//! and generation metrics against the original (unmasked) responses.

use std::collections::BTreeSet;

use super::prepare::Prepared;
use super::train::{dial_data, rank_labels, rec_tasks, Bundle};
use crate::corpus::{tokenize, EntityId, Speaker};
use crate::dialogue::{DialModel, DialSample, Generation};
use crate::error::{CcrsError, Result};
use crate::intention::{recommend, IntentionState, RecModel};
use crate::meta_trainer::{inner_adapt, partition_params, DialObjective, Part, RecObjective};
use crate::metrics::{generation_report, ranking_report, EvalReport, DISTINCT_NS, RANK_CUTOFFS};
use crate::params::ParamStore;

/// Slot filler: the best-ranked item that is neither in `exclude` nor
/// already used in the response.
pub fn slot_filler<'a>(
    rec: &'a RecModel,
    prepared: &'a Prepared,
    state: &'a IntentionState,
    exclude: &'a BTreeSet<usize>,
) -> impl FnMut(&BTreeSet<String>) -> Option<String> + 'a {
    move |used: &BTreeSet<String>| {
        let ranked = recommend(&state.probs, &rec.items, rec.items.len(), exclude).ok()?;
        ranked.into_iter().map(|r| prepared.kg.entity_name(EntityId(r.item_id)).to_string()).find(|n| !used.contains(n))
    }
}

/// Generates the response for one dialogue example.
pub fn respond(
    bundle: &Bundle,
    dial: &DialModel,
    dial_params: &ParamStore,
    state: &IntentionState,
    sample: &DialSample,
) -> Result<Generation> {
    let exclude: BTreeSet<usize> = sample.history.iter().map(|&(e, _)| e).collect();
    let cfg = &dial.cfg;
    dial.generate(
        dial_params,
        &sample.context,
        Some(&state.p_u),
        cfg.decode,
        cfg.max_response_len,
        false,
        slot_filler(&bundle.rec, &bundle.prepared, state, &exclude),
    )
}

/// Tokenized original responses in the order `dial_samples` yields them.
pub fn reference_responses(prepared: &Prepared, conv_id: &str) -> Result<Vec<Vec<String>>> {
    let original = prepared.conversation(conv_id)?;
    let masked = prepared.masked(conv_id)?;
    Ok(original
        .utterances
        .iter()
        .zip(&masked.utterances)
        .filter(|(_, m)| m.speaker == Speaker::Recommender && m.is_gold() && !m.tokens.is_empty())
        .map(|(o, _)| o.tokens.clone())
        .collect())
}

/// Evaluates the test users. With `adapt`, each user's support set
/// fine-tunes the inner groups of both parts before the query set is scored.
pub fn evaluate(bundle: &Bundle, adapt: bool) -> Result<EvalReport> {
    let prepared = &bundle.prepared;
    let cfg = &bundle.cfg;
    let records = &prepared.episodes.test;
    let tasks = rec_tasks(prepared, &bundle.rec, records)?;
    if tasks.iter().all(|t| t.query.samples.is_empty()) {
        return Err(CcrsError::EmptyInput("test split has no recommendation labels".into()));
    }
    let rec_part = partition_params(Part::Rec, &bundle.rec.param_names(), &cfg.rec)?;
    let rec_obj = RecObjective { model: &bundle.rec };
    let beta = |lr: f64| if adapt { lr } else { 0.0 };

    let mut ranked = Vec::new();
    let mut candidates: Vec<Vec<String>> = Vec::new();
    let mut references: Vec<Vec<String>> = Vec::new();
    for (task, record) in tasks.iter().zip(records) {
        let phi = inner_adapt(&rec_obj, &bundle.rec_params, &rec_part, &task.support, beta(cfg.rec.inner_lr), cfg.rec.inner_steps)?;
        ranked.extend(rank_labels(&bundle.rec, &phi, &task.query)?);
        let Some((dial, dial_params)) = &bundle.dial else { continue };
        let dial_part = partition_params(Part::Dial, &dial.param_names(), &cfg.dial)?;
        let support = dial_data(prepared, &bundle.rec, &phi, dial, &record.user_id, &record.support)?;
        let dial_obj = DialObjective { model: dial, rec: None };
        let dial_phi = inner_adapt(&dial_obj, dial_params, &dial_part, &support, beta(cfg.dial.inner_lr), cfg.dial.inner_steps)?;
        for conv_id in &record.query {
            let data = dial_data(prepared, &bundle.rec, &phi, dial, &record.user_id, std::slice::from_ref(conv_id))?;
            let refs = reference_responses(prepared, conv_id)?;
            let histories: Vec<_> = data.samples.iter().map(|s| s.history.clone()).collect();
            let states = bundle.rec.infer_many(&phi, data.user, &histories);
            for ((sample, state), reference) in data.samples.iter().zip(&states).zip(refs) {
                let generated = respond(bundle, dial, &dial_phi, state, sample)?;
                candidates.push(tokenize(&generated.text()));
                references.push(reference);
            }
        }
    }

    let mut metrics = ranking_report(&ranked);
    if bundle.dial.is_some() {
        if candidates.is_empty() {
            return Err(CcrsError::EmptyInput("test split has no responses to generate".into()));
        }
        metrics.extend(generation_report(&candidates, &references)?);
    } else {
        log::warn!("no dialogue checkpoint; reporting ranking metrics only");
    }
    Ok(EvalReport {
        metrics,
        cutoffs: RANK_CUTOFFS.to_vec(),
        distinct_n: DISTINCT_NS.to_vec(),
        bleu_max_n: 4,
        adapted: adapt,
        n_users: tasks.len(),
        n_rec_labels: ranked.len(),
        n_responses: candidates.len(),
        seed: cfg.seed,
    })
}
