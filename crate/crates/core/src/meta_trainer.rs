//! Per-user meta-learning.
//!
//! Each user is a task. A global step adapts the inner parameter groups on
//! the user's support set with plain gradient descent, evaluates the query
//! loss at the adapted point, and accumulates the support gradient at the
//! starting point plus the query gradient at the adapted point over the
//! batch. The sum is clipped elementwise and applied with Adam.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape};
use crate::config::MetaConfig;
use crate::dialogue::{DialModel, DialSample, ENC_EMB, ENC_PROJ, STYLE_F1, STYLE_F1_B, STYLE_F2, STYLE_F2_B, STYLE_L, STYLE_WC};
use crate::error::{CcrsError, Result};
use crate::graph_encoder::{EMB_ENTITY, EMB_USER};
use crate::intention::{RecModel, RecSample};
use crate::params::{Adam, Bound, ParamStore};
use crate::tensor::Matrix;

/// Step size for the finite-difference Hessian-vector products used by the
/// second-order update.
const HVP_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Rec,
    Dial,
}

impl Part {
    pub fn as_str(&self) -> &'static str {
        match self {
            Part::Rec => "rec",
            Part::Dial => "dial",
        }
    }
}

/// Disjoint inner and outer group names covering every trainable group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamPartition {
    pub inner: BTreeSet<String>,
    pub outer: BTreeSet<String>,
}

impl ParamPartition {
    /// Splits `groups` so that `inner` holds exactly the requested names.
    pub fn new(groups: &[String], inner: &[String]) -> Result<Self> {
        let all: BTreeSet<String> = groups.iter().cloned().collect();
        if let Some(bad) = inner.iter().find(|n| !all.contains(*n)) {
            return Err(CcrsError::UnknownParam(bad.clone()));
        }
        let inner: BTreeSet<String> = inner.iter().cloned().collect();
        let outer = all.difference(&inner).cloned().collect();
        Ok(Self { inner, outer })
    }

    pub fn all(&self) -> BTreeSet<String> {
        self.inner.union(&self.outer).cloned().collect()
    }
}

/// Default inner groups of a part.
pub fn default_inner(part: Part, groups: &[String]) -> Vec<String> {
    let wanted: &[&str] = match part {
        Part::Rec => &[EMB_ENTITY, EMB_USER],
        Part::Dial => &[ENC_EMB, ENC_PROJ, STYLE_L, STYLE_WC, STYLE_F1, STYLE_F1_B, STYLE_F2, STYLE_F2_B],
    };
    groups.iter().filter(|g| wanted.contains(&g.as_str())).cloned().collect()
}

/// Partition for `part` over `groups`, honoring `cfg.inner_override`.
pub fn partition_params(part: Part, groups: &[String], cfg: &MetaConfig) -> Result<ParamPartition> {
    match &cfg.inner_override {
        Some(names) => ParamPartition::new(groups, names),
        None => ParamPartition::new(groups, &default_inner(part, groups)),
    }
}

/// A differentiable per-user loss.
pub trait Objective {
    type Data;

    /// Loss at `params` on `data` with gradients for every group.
    fn loss_grad(&self, params: &ParamStore, data: &Self::Data) -> Result<(f64, Gradients)>;

    fn is_empty(&self, data: &Self::Data) -> bool;
}

/// One user's support and query data.
#[derive(Clone, Debug)]
pub struct UserTask<D> {
    pub user_id: String,
    pub support: D,
    pub query: D,
}

fn check_finite(g: &Gradients, user: &str) -> Result<()> {
    if g.values().all(crate::tensor::all_finite) {
        Ok(())
    } else {
        Err(CcrsError::NonFiniteGradient { user: user.to_string() })
    }
}

fn restrict(g: &Gradients, names: &BTreeSet<String>) -> Gradients {
    g.iter().filter(|(n, _)| names.contains(*n)).map(|(n, m)| (n.clone(), m.clone())).collect()
}

fn add_into(acc: &mut Gradients, g: &Gradients, scale: f64) {
    for (name, m) in g {
        match acc.get_mut(name) {
            Some(a) => a.scaled_add(scale, m),
            None => {
                acc.insert(name.clone(), m * scale);
            }
        }
    }
}

/// Inner adaptation: `steps` plain gradient steps of size `beta` on the
/// inner groups. Returns every iterate (the first is `params` itself).
fn adapt_path<O: Objective>(
    obj: &O,
    params: &ParamStore,
    partition: &ParamPartition,
    support: &O::Data,
    beta: f64,
    steps: usize,
    user: &str,
) -> Result<Vec<ParamStore>> {
    let mut path = vec![params.clone()];
    if obj.is_empty(support) {
        log::info!("user {user} has no support data; using global parameters");
        return Ok(path);
    }
    for _ in 0..steps {
        let cur = path.last().expect("path starts non-empty");
        let (_, g) = obj.loss_grad(cur, support)?;
        check_finite(&g, user)?;
        let mut next = cur.clone();
        next.axpy(-beta, &restrict(&g, &partition.inner));
        path.push(next);
    }
    Ok(path)
}

/// `φ(u)`: parameters after adapting the inner groups on `support`.
pub fn inner_adapt<O: Objective>(
    obj: &O,
    params: &ParamStore,
    partition: &ParamPartition,
    support: &O::Data,
    beta: f64,
    steps: usize,
) -> Result<ParamStore> {
    Ok(adapt_path(obj, params, partition, support, beta, steps, "")?.pop().expect("non-empty path"))
}

/// Elementwise magnitude clamp into `[lo, hi]`, keeping signs.
pub fn clip_gradients(g: &mut Gradients, lo: f64, hi: f64) {
    for m in g.values_mut() {
        m.mapv_inplace(|x| if x == 0.0 { 0.0 } else { x.signum() * x.abs().clamp(lo, hi) });
    }
}

/// Gradient of the query loss with respect to the starting point, pulled
/// back through the inner steps with finite-difference Hessian-vector
/// products of the support loss.
fn second_order_pullback<O: Objective>(
    obj: &O,
    path: &[ParamStore],
    partition: &ParamPartition,
    support: &O::Data,
    beta: f64,
    query_grad: &Gradients,
) -> Result<Gradients> {
    let mut adj = query_grad.clone();
    for theta in path[..path.len() - 1].iter().rev() {
        let v = restrict(&adj, &partition.inner);
        let mut plus = theta.clone();
        plus.axpy(HVP_EPS, &v);
        let mut minus = theta.clone();
        minus.axpy(-HVP_EPS, &v);
        let (_, gp) = obj.loss_grad(&plus, support)?;
        let (_, gm) = obj.loss_grad(&minus, support)?;
        let mut hv = gp;
        add_into(&mut hv, &gm, -1.0);
        add_into(&mut adj, &hv, -beta / (2.0 * HVP_EPS));
    }
    Ok(adj)
}

/// Accumulated (unclipped) meta-gradient over a batch and the mean of the
/// users' support and query losses.
pub fn meta_gradient<O: Objective>(
    obj: &O,
    params: &ParamStore,
    partition: &ParamPartition,
    batch: &[&UserTask<O::Data>],
    cfg: &MetaConfig,
) -> Result<(Gradients, f64)> {
    let trainable = partition.all();
    let mut acc: Gradients = trainable
        .iter()
        .map(|n| Ok((n.clone(), Array2::zeros(params.get(n)?.dim()))))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for task in batch {
        let mut user_loss = 0.0;
        let mut parts = 0;
        if !obj.is_empty(&task.support) {
            let (l1, g1) = obj.loss_grad(params, &task.support)?;
            check_finite(&g1, &task.user_id)?;
            add_into(&mut acc, &restrict(&g1, &trainable), 1.0);
            user_loss += l1;
            parts += 1;
        }
        let path = adapt_path(obj, params, partition, &task.support, cfg.inner_lr, cfg.inner_steps, &task.user_id)?;
        let phi = path.last().expect("non-empty path");
        if !obj.is_empty(&task.query) {
            let (l2, mut g2) = obj.loss_grad(phi, &task.query)?;
            check_finite(&g2, &task.user_id)?;
            if !cfg.first_order && path.len() > 1 {
                g2 = second_order_pullback(obj, &path, partition, &task.support, cfg.inner_lr, &g2)?;
                check_finite(&g2, &task.user_id)?;
            }
            add_into(&mut acc, &restrict(&g2, &trainable), 1.0);
            user_loss += l2;
            parts += 1;
        }
        if parts > 0 {
            total += user_loss / parts as f64;
            counted += 1;
        }
    }
    Ok((acc, if counted > 0 { total / counted as f64 } else { f64::NAN }))
}

/// One global update; returns the batch loss.
pub fn meta_step<O: Objective>(
    obj: &O,
    params: &mut ParamStore,
    partition: &ParamPartition,
    batch: &[&UserTask<O::Data>],
    cfg: &MetaConfig,
    adam: &mut Adam,
) -> Result<f64> {
    let (mut g, loss) = meta_gradient(obj, params, partition, batch, cfg)?;
    clip_gradients(&mut g, cfg.clip_min, cfg.clip_max);
    adam.update(params, &g);
    Ok(loss)
}

/// One line of the training history file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
    pub wall_time: f64,
}

/// Validation hook for [`train_part`].
pub struct Validation<'a> {
    pub evaluate: Box<dyn FnMut(&ParamStore) -> Result<f64> + 'a>,
    pub higher_is_better: bool,
}

/// Result of a training run: the best parameters and the per-epoch history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Epochs of meta-steps over shuffled user batches with early stopping on
/// the validation metric. Parameters from the best epoch are returned.
pub fn train_part<O: Objective>(
    obj: &O,
    mut params: ParamStore,
    partition: &ParamPartition,
    tasks: &[UserTask<O::Data>],
    cfg: &MetaConfig,
    mut validation: Validation<'_>,
    mut history_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(CcrsError::EmptyInput("no training users".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.outer_lr);
    let start = Instant::now();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_users) {
            let batch: Vec<&UserTask<O::Data>> = chunk.iter().map(|&i| &tasks[i]).collect();
            let loss = meta_step(obj, &mut params, partition, &batch, cfg, &mut adam)?;
            if loss.is_finite() {
                losses.push(loss);
            }
        }
        let train_loss = if losses.is_empty() { f64::NAN } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        let metric = (validation.evaluate)(&params)?;
        let rec = EpochRecord { epoch, train_loss, valid_metric: metric, wall_time: start.elapsed().as_secs_f64() };
        log::info!("epoch {epoch}: train loss {train_loss:.4}, validation {metric:.4}");
        if let Some(w) = history_sink.as_deref_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(|e| CcrsError::io("history", e))?;
        }
        history.push(rec);
        let improved = match &best {
            None => true,
            Some((b, ..)) => {
                if validation.higher_is_better {
                    metric > *b
                } else {
                    metric < *b
                }
            }
        };
        if improved {
            best = Some((metric, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch when epochs > 0");
    Ok(TrainOutcome { params: best_params, history, best_epoch })
}

/// Adapts a copy of `params` to each user's support set and evaluates the
/// query set with `eval`. `params` is never modified.
pub fn meta_test<O: Objective, R>(
    obj: &O,
    params: &ParamStore,
    partition: &ParamPartition,
    tasks: &[UserTask<O::Data>],
    cfg: &MetaConfig,
    mut eval: impl FnMut(&ParamStore, &UserTask<O::Data>) -> Result<R>,
) -> Result<Vec<R>> {
    tasks
        .iter()
        .map(|t| {
            let phi = inner_adapt(obj, params, partition, &t.support, cfg.inner_lr, cfg.inner_steps)?;
            eval(&phi, t)
        })
        .collect()
}

/// Per-user recommendation data: the user's row in the user table and
/// their labels.
#[derive(Clone, Debug, Default)]
pub struct RecData {
    pub user: Option<usize>,
    pub samples: Vec<RecSample>,
}

pub struct RecObjective<'a> {
    pub model: &'a RecModel,
}

impl Objective for RecObjective<'_> {
    type Data = RecData;

    fn loss_grad(&self, params: &ParamStore, data: &RecData) -> Result<(f64, Gradients)> {
        let tape = Tape::new();
        let bound = Bound::new(&tape, params);
        let loss = self.model.user_loss(&bound, data.user, &data.samples)?;
        let value = loss.item();
        Ok((value, tape.backward(loss)))
    }

    fn is_empty(&self, data: &RecData) -> bool {
        data.samples.is_empty()
    }
}

/// Per-user dialogue data: responses and the recommender's `p_u` for each.
#[derive(Clone, Debug, Default)]
pub struct DialData {
    pub user: Option<usize>,
    pub samples: Vec<DialSample>,
    /// `1 × d` intention rows, one per sample (used when `p_u` is detached).
    pub intents: Vec<Matrix>,
}

/// Dialogue loss. With `rec` set, `p_u` is recomputed on the tape from the
/// recommender groups in the same store so that gradients reach them.
pub struct DialObjective<'a> {
    pub model: &'a DialModel,
    pub rec: Option<&'a RecModel>,
}

impl Objective for DialObjective<'_> {
    type Data = DialData;

    fn loss_grad(&self, params: &ParamStore, data: &DialData) -> Result<(f64, Gradients)> {
        let tape = Tape::new();
        let bound = Bound::new(&tape, params);
        let intents = match self.rec {
            Some(rec) => {
                let states = rec.entity_states(&bound, data.user);
                data.samples.iter().map(|s| rec.intention_vector(&bound, states, &s.history)).collect()
            }
            None => data.intents.iter().map(|m| tape.constant(m.clone())).collect(),
        };
        let loss = self.model.batch_loss(&bound, &[(data.samples.clone(), intents)])?;
        let value = loss.item();
        Ok((value, tape.backward(loss)))
    }

    fn is_empty(&self, data: &DialData) -> bool {
        data.samples.is_empty()
    }
}
