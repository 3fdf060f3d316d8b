//! Intention pooling and item ranking.
//!
//! Mentioned entities are weighted twice: once by the embedding of the turn
//! they appeared in and once by their own representation. The averaged
//! weights pool the mention representations into the user intention `p_u`,
//! which scores every item by a dot product followed by a softmax.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::RecConfig;
use crate::corpus::{mention_history_with, Conversation, EdgeList, KnowledgeGraph};
use crate::error::{CcrsError, Result};
use crate::graph_encoder::{encode_on_tape, encoder_param_names, init_encoder, EMB_USER};
use crate::params::{Bound, ParamStore};
use crate::tensor::{glorot, softmax, Matrix};

pub const TURN_EMB: &str = "rec.turn_emb";
pub const TURN_POOL: &str = "rec.turn_pool";
pub const ENTITY_POOL: &str = "rec.ent_pool";

const LOG_FLOOR: f64 = 1e-12;

/// `softmax(w2 · tanh(W1 x))` over rows of `X`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPool {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl AttentionPool {
    pub fn from_params(p: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self { w1: p.get(&format!("{prefix}.w1"))?.clone(), w2: p.get(&format!("{prefix}.w2"))?.clone() })
    }
}

/// Attention weights over the `n` rows of `x` (`n × d`).
pub fn attn_pool(x: &Matrix, pool: &AttentionPool) -> Result<Vec<f64>> {
    if x.nrows() == 0 {
        return Err(CcrsError::EmptyInput("attention pool over zero rows".into()));
    }
    if x.ncols() != pool.w1.ncols() {
        return Err(CcrsError::Dimension(format!("pool expects {} columns, got {}", pool.w1.ncols(), x.ncols())));
    }
    let hidden = x.dot(&pool.w1.t()).mapv(f64::tanh);
    let logits = hidden.dot(&pool.w2.t());
    Ok(softmax(&logits.column(0).to_vec()))
}

/// Turn-importance weights `μ^o` for mentions at the given turns.
pub fn turn_importance(turns: &[usize], table: &Matrix, pool: &AttentionPool) -> Result<Vec<f64>> {
    if let Some(&t) = turns.iter().find(|&&t| t >= table.nrows()) {
        return Err(CcrsError::Dimension(format!("turn {t} beyond turn table of {} rows", table.nrows())));
    }
    attn_pool(&table.select(Axis(0), turns), pool)
}

/// `p_u = ½(μ^r + μ^o) H_u`.
pub fn user_intention(h_u: &Matrix, mu_o: &[f64], mu_r: &[f64]) -> Result<Array1<f64>> {
    if mu_o.len() != h_u.nrows() || mu_r.len() != h_u.nrows() {
        return Err(CcrsError::Dimension(format!(
            "{} mentions but weights of length {} and {}",
            h_u.nrows(),
            mu_o.len(),
            mu_r.len()
        )));
    }
    let w: Array1<f64> = mu_o.iter().zip(mu_r).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(w.dot(h_u))
}

/// One ranked recommendation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub item_id: usize,
    pub score: f64,
    pub rank: usize,
}

/// Top-`k` items from a full distribution over `items`, dropping
/// `exclude` after the softmax. Ties go to the smaller entity id.
pub fn recommend(probs: &[f64], items: &[usize], k: usize, exclude: &BTreeSet<usize>) -> Result<Vec<Ranked>> {
    if items.is_empty() {
        return Err(CcrsError::EmptyInput("item index is empty".into()));
    }
    if k == 0 {
        return Err(CcrsError::Config("k must be at least 1".into()));
    }
    if probs.len() != items.len() {
        return Err(CcrsError::Dimension(format!("{} scores for {} items", probs.len(), items.len())));
    }
    let mut pairs: Vec<(usize, f64)> =
        items.iter().copied().zip(probs.iter().copied()).filter(|(id, _)| !exclude.contains(id)).collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(pairs
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (item_id, score))| Ranked { item_id, score, rank: i + 1 })
        .collect())
}

/// Softmax of `p_u · H̃ᵀ` over all items.
pub fn item_distribution(p_u: &Array1<f64>, item_states: &Matrix) -> Vec<f64> {
    softmax(&item_states.dot(p_u).to_vec())
}

/// Mean over users of the mean negative log-likelihood of their labels.
pub fn rec_loss(batch: &[Vec<(Vec<f64>, usize)>]) -> Result<f64> {
    let users: Vec<&Vec<(Vec<f64>, usize)>> = batch.iter().filter(|u| !u.is_empty()).collect();
    if users.is_empty() {
        return Err(CcrsError::EmptyInput("no recommendation labels".into()));
    }
    let mut total = 0.0;
    for labels in &users {
        let mut user = 0.0;
        for (dist, gold) in labels.iter() {
            let p = *dist.get(*gold).ok_or_else(|| CcrsError::UnknownEntity(format!("gold index {gold}")))?;
            user -= p.max(LOG_FLOOR).ln();
        }
        total += user / labels.len() as f64;
    }
    Ok(total / users.len() as f64)
}

/// One recommendation label: the mention history before the target turn
/// as `(entity, turn)` pairs and the gold item entity.
#[derive(Clone, Debug, PartialEq)]
pub struct RecSample {
    pub history: Vec<(usize, usize)>,
    pub gold: usize,
}

/// Labels of a conversation in turn order.
pub fn rec_samples(conv: &Conversation, kg: &KnowledgeGraph, cfg: &RecConfig) -> Result<Vec<RecSample>> {
    let lookup = |name: &str| kg.entity_id(name).map(|e| e.0).ok_or_else(|| CcrsError::UnknownEntity(name.into()));
    conv.ordered_targets()
        .iter()
        .map(|t| {
            let history = mention_history_with(conv, t.turn, &cfg.history)
                .iter()
                .map(|m| Ok((lookup(&m.entity)?, m.turn)))
                .collect::<Result<Vec<_>>>()?;
            Ok(RecSample { history, gold: lookup(&t.item)? })
        })
        .collect()
}

/// Everything the recommender computes for one history.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentionState {
    pub h_u: Matrix,
    pub mu_o: Vec<f64>,
    pub mu_r: Vec<f64>,
    pub p_u: Array1<f64>,
    /// Distribution over [`RecModel::items`].
    pub probs: Vec<f64>,
}

/// Graph encoder plus intention pooling over a fixed knowledge graph.
#[derive(Clone, Debug)]
pub struct RecModel {
    pub cfg: RecConfig,
    pub edges: EdgeList,
    /// Item entity ids in index order.
    pub items: Vec<usize>,
    item_pos: Vec<Option<usize>>,
}

impl RecModel {
    pub fn new(cfg: RecConfig, kg: &KnowledgeGraph) -> Result<Self> {
        cfg.validate()?;
        let items: Vec<usize> = kg.items().into_iter().map(|e| e.0).collect();
        if items.is_empty() {
            return Err(CcrsError::EmptyInput("knowledge graph has no items".into()));
        }
        let mut item_pos = vec![None; kg.n_entities()];
        for (i, &e) in items.iter().enumerate() {
            item_pos[e] = Some(i);
        }
        Ok(Self { cfg, edges: kg.edge_list(), items, item_pos })
    }

    pub fn item_index(&self, entity: usize) -> Option<usize> {
        self.item_pos.get(entity).copied().flatten()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = encoder_param_names(&self.cfg);
        names.push(TURN_EMB.into());
        for pool in [TURN_POOL, ENTITY_POOL] {
            names.push(format!("{pool}.w1"));
            names.push(format!("{pool}.w2"));
        }
        names
    }

    pub fn init_params<R: Rng + ?Sized>(&self, n_users: usize, rng: &mut R) -> ParamStore {
        let d = self.cfg.dim;
        let mut p = init_encoder(&self.cfg, self.edges.n_entities, n_users, self.edges.n_relation_slots, rng);
        p.insert(TURN_EMB, glorot(self.cfg.max_turns, d, rng));
        for pool in [TURN_POOL, ENTITY_POOL] {
            p.insert(format!("{pool}.w1"), glorot(d, d, rng));
            p.insert(format!("{pool}.w2"), glorot(1, d, rng));
        }
        p
    }

    /// User row on the tape; unknown users get the mean row.
    pub fn user_row<'t>(&self, p: &Bound<'t, '_>, user: Option<usize>) -> Var<'t> {
        let table = p.get(EMB_USER);
        let n = table.dim().0;
        match user {
            Some(u) if u < n => table.slice_rows(u, 1),
            _ => p.tape().constant(Array2::from_elem((1, n), 1.0 / n as f64)).matmul(table),
        }
    }

    /// User-conditioned entity states (`|E| × d`).
    pub fn entity_states<'t>(&self, p: &Bound<'t, '_>, user: Option<usize>) -> Var<'t> {
        let u = self.user_row(p, user);
        encode_on_tape(p, &self.cfg, &self.edges, u)
    }

    fn clamp_turn(&self, t: usize) -> usize {
        t.min(self.cfg.max_turns - 1)
    }

    fn pool<'t>(p: &Bound<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
        let w1 = p.get(&format!("{prefix}.w1"));
        let w2 = p.get(&format!("{prefix}.w2"));
        x.matmul(w1.t()).tanh().matmul(w2.t()).t().softmax_rows()
    }

    /// Returns `(p_u, μ^o, μ^r, H_u)`; `None` for an empty history.
    #[allow(clippy::type_complexity)]
    pub fn intention<'t>(
        &self,
        p: &Bound<'t, '_>,
        states: Var<'t>,
        history: &[(usize, usize)],
    ) -> Option<(Var<'t>, Var<'t>, Var<'t>, Var<'t>)> {
        if history.is_empty() {
            return None;
        }
        let entities: Vec<usize> = history.iter().map(|h| h.0).collect();
        let turns: Vec<usize> = history.iter().map(|h| self.clamp_turn(h.1)).collect();
        let h_u = states.gather_rows(&entities);
        let mu_o = Self::pool(p, TURN_POOL, p.get(TURN_EMB).gather_rows(&turns));
        let mu_r = Self::pool(p, ENTITY_POOL, h_u);
        let p_u = mu_o.add(mu_r).scale(0.5).matmul(h_u);
        Some((p_u, mu_o, mu_r, h_u))
    }

    /// `p_u` as a `1 × d` tape value (zeros for an empty history).
    pub fn intention_vector<'t>(&self, p: &Bound<'t, '_>, states: Var<'t>, history: &[(usize, usize)]) -> Var<'t> {
        match self.intention(p, states, history) {
            Some((p_u, ..)) => p_u,
            None => p.tape().constant(Array2::zeros((1, self.cfg.dim))),
        }
    }

    /// Log-probabilities over all items (`1 × |items|`).
    pub fn item_log_probs<'t>(&self, states: Var<'t>, p_u: Var<'t>) -> Var<'t> {
        let item_states = states.gather_rows(&self.items);
        p_u.matmul(item_states.t()).log_softmax_rows()
    }

    /// Mean negative log-likelihood over one user's labels.
    pub fn user_loss<'t>(&self, p: &Bound<'t, '_>, user: Option<usize>, samples: &[RecSample]) -> Result<Var<'t>> {
        if samples.is_empty() {
            return Err(CcrsError::EmptyInput("user has no recommendation labels".into()));
        }
        let states = self.entity_states(p, user);
        let mut terms = Vec::with_capacity(samples.len());
        for s in samples {
            let gold = self.item_index(s.gold).ok_or_else(|| CcrsError::UnknownEntity(format!("entity {}", s.gold)))?;
            let p_u = self.intention_vector(p, states, &s.history);
            let logp = self.item_log_probs(states, p_u);
            terms.push(logp.pick(&[gold]).clamp_min(LOG_FLOOR.ln()));
        }
        Ok(Var::concat_rows(&terms).mean().neg())
    }

    /// Mean of [`RecModel::user_loss`] over users.
    pub fn batch_loss<'t>(&self, p: &Bound<'t, '_>, batch: &[(Option<usize>, Vec<RecSample>)]) -> Result<Var<'t>> {
        let losses: Vec<Var<'t>> = batch
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(u, s)| self.user_loss(p, *u, s))
            .collect::<Result<_>>()?;
        if losses.is_empty() {
            return Err(CcrsError::EmptyInput("no recommendation labels".into()));
        }
        Ok(Var::concat_rows(&losses).mean())
    }

    /// Forward pass without gradients.
    pub fn infer(&self, params: &ParamStore, user: Option<usize>, history: &[(usize, usize)]) -> IntentionState {
        self.infer_many(params, user, std::slice::from_ref(&history.to_vec())).remove(0)
    }

    /// Forward passes for several histories of one user, sharing the
    /// entity encoder run.
    pub fn infer_many(
        &self,
        params: &ParamStore,
        user: Option<usize>,
        histories: &[Vec<(usize, usize)>],
    ) -> Vec<IntentionState> {
        let tape = Tape::new();
        let frozen: BTreeSet<String> = params.names().cloned().collect();
        let p = Bound::new(&tape, params).with_frozen(&frozen);
        let states = self.entity_states(&p, user);
        let item_states = states.value().select(Axis(0), &self.items);
        histories
            .iter()
            .map(|history| {
                let (p_u, mu_o, mu_r, h_u) = match self.intention(&p, states, history) {
                    Some((p_u, mu_o, mu_r, h_u)) => (p_u.value(), mu_o.value(), mu_r.value(), h_u.value()),
                    None => (
                        Array2::zeros((1, self.cfg.dim)),
                        Array2::zeros((1, 0)),
                        Array2::zeros((1, 0)),
                        Array2::zeros((0, self.cfg.dim)),
                    ),
                };
                let p_u = p_u.row(0).to_owned();
                IntentionState {
                    probs: item_distribution(&p_u, &item_states),
                    h_u,
                    mu_o: mu_o.row(0).to_vec(),
                    mu_r: mu_r.row(0).to_vec(),
                    p_u,
                }
            })
            .collect()
    }

    /// Entity states for a user without gradients.
    pub fn infer_states(&self, params: &ParamStore, user: Option<usize>) -> Matrix {
        let tape = Tape::new();
        let frozen: BTreeSet<String> = params.names().cloned().collect();
        let p = Bound::new(&tape, params).with_frozen(&frozen);
        self.entity_states(&p, user).value()
    }
}
