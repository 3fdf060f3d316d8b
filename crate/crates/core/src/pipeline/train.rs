//! Staged meta-training of the recommender and dialogue parts, and the
//! on-disk bundle that ties prepared data, configuration and checkpoints
//! together.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::prepare::{EpisodeRecord, Prepared};
use crate::config::{MetaConfig, TrainConfig};
use crate::corpus::mention_history_with;
use crate::dialogue::{dial_samples, DialModel};
use crate::error::{CcrsError, Result};
use crate::graph_encoder::EMB_USER;
use crate::intention::{rec_samples, recommend, RecModel};
use crate::meta_trainer::{
    meta_test, partition_params, train_part, DialData, DialObjective, Objective, ParamPartition, Part, RecData,
    RecObjective, TrainOutcome, UserTask, Validation,
};
use crate::metrics::{ranking_report, RankedResult};
use crate::params::{load_checkpoint, save_checkpoint, validate_shapes, ParamStore};

pub const REC_DIR: &str = "rec";
pub const DIAL_DIR: &str = "dial";
pub const CONFIG_FILE: &str = "config.json";
pub const REC_HISTORY: &str = "rec_history.jsonl";
pub const DIAL_HISTORY: &str = "dial_history.jsonl";

/// Recommendation labels of one user's conversations.
pub fn rec_data(prepared: &Prepared, model: &RecModel, user_id: &str, conv_ids: &[String]) -> Result<RecData> {
    let mut samples = Vec::new();
    for id in conv_ids {
        samples.extend(rec_samples(prepared.conversation(id)?, &prepared.kg, &model.cfg)?);
    }
    Ok(RecData { user: prepared.user_index(user_id), samples })
}

pub fn rec_tasks(prepared: &Prepared, model: &RecModel, records: &[EpisodeRecord]) -> Result<Vec<UserTask<RecData>>> {
    records
        .iter()
        .map(|r| {
            Ok(UserTask {
                user_id: r.user_id.clone(),
                support: rec_data(prepared, model, &r.user_id, &r.support)?,
                query: rec_data(prepared, model, &r.user_id, &r.query)?,
            })
        })
        .collect()
}

/// Full item rankings for every label in `data`.
pub fn rank_labels(model: &RecModel, params: &ParamStore, data: &RecData) -> Result<Vec<RankedResult>> {
    let histories: Vec<Vec<(usize, usize)>> = data.samples.iter().map(|s| s.history.clone()).collect();
    let states = model.infer_many(params, data.user, &histories);
    states
        .iter()
        .zip(&data.samples)
        .map(|(st, s)| {
            let ranked = recommend(&st.probs, &model.items, model.items.len(), &BTreeSet::new())?;
            Ok(RankedResult { candidates: ranked.into_iter().map(|r| r.item_id).collect(), gold: s.gold })
        })
        .collect()
}

/// Query-set rankings after (optional) inner adaptation on each support set.
pub fn query_rankings(
    model: &RecModel,
    params: &ParamStore,
    partition: &ParamPartition,
    tasks: &[UserTask<RecData>],
    cfg: &MetaConfig,
    adapt: bool,
) -> Result<Vec<RankedResult>> {
    let cfg = if adapt { cfg.clone() } else { MetaConfig { inner_lr: 0.0, ..cfg.clone() } };
    let obj = RecObjective { model };
    let per_user = meta_test(&obj, params, partition, tasks, &cfg, |phi, t| rank_labels(model, phi, &t.query))?;
    Ok(per_user.into_iter().flatten().collect())
}

/// Rankings for support and query labels of every task under `params`.
pub fn all_label_rankings(model: &RecModel, params: &ParamStore, tasks: &[UserTask<RecData>]) -> Result<Vec<RankedResult>> {
    let mut out = Vec::new();
    for t in tasks {
        out.extend(rank_labels(model, params, &t.support)?);
        out.extend(rank_labels(model, params, &t.query)?);
    }
    Ok(out)
}

/// Users without training data get the mean of the trained users' rows.
pub fn fill_untrained_users(params: &mut ParamStore, prepared: &Prepared) -> Result<()> {
    let trained: Vec<usize> = prepared.trained_users().iter().filter_map(|u| prepared.user_index(u)).collect();
    if trained.is_empty() {
        return Ok(());
    }
    let table = params.get_mut(EMB_USER)?;
    let mean = table.select(Axis(0), &trained).mean_axis(Axis(0)).expect("non-empty selection");
    let trained: BTreeSet<usize> = trained.into_iter().collect();
    for u in 0..table.nrows() {
        if !trained.contains(&u) {
            table.row_mut(u).assign(&mean);
        }
    }
    Ok(())
}

pub struct RecRun {
    pub model: RecModel,
    pub params: ParamStore,
    pub outcome: TrainOutcome,
}

/// Meta-trains the recommender. Validation is the configured ranking metric
/// on query sets after adaptation, over the validation users (training users
/// when there are none).
pub fn train_rec(prepared: &Prepared, cfg: &TrainConfig, history: Option<&mut dyn Write>) -> Result<RecRun> {
    cfg.validate()?;
    let model = RecModel::new(cfg.model.rec.clone(), &prepared.kg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = model.init_params(prepared.users.len(), &mut rng);
    let partition = partition_params(Part::Rec, &model.param_names(), &cfg.rec)?;
    let tasks = rec_tasks(prepared, &model, &prepared.episodes.train)?;
    let valid = rec_tasks(prepared, &model, &prepared.episodes.valid)?;
    let valid_tasks = if valid.iter().any(|t| !t.query.samples.is_empty()) { valid } else { tasks.clone() };
    let key = cfg.rec.valid_metric.as_str();
    if !ranking_report(&[]).contains_key(key) {
        return Err(CcrsError::Config(format!("unknown validation metric {key:?} for the recommender")));
    }
    let validation = Validation {
        evaluate: Box::new(|p: &ParamStore| {
            Ok(ranking_report(&query_rankings(&model, p, &partition, &valid_tasks, &cfg.rec, true)?)[key])
        }),
        higher_is_better: true,
    };
    let obj = RecObjective { model: &model };
    let outcome = train_part(&obj, params, &partition, &tasks, &cfg.rec, validation, history)?;
    let mut params = outcome.params.clone();
    fill_untrained_users(&mut params, prepared)?;
    Ok(RecRun { model, params, outcome })
}

/// Dialogue examples of one user's conversations with `p_u` from the
/// recommender at `rec_params`.
pub fn dial_data(
    prepared: &Prepared,
    rec: &RecModel,
    rec_params: &ParamStore,
    dial: &DialModel,
    user_id: &str,
    conv_ids: &[String],
) -> Result<DialData> {
    let user = prepared.user_index(user_id);
    let mut samples = Vec::new();
    for id in conv_ids {
        let conv = prepared.masked(id)?;
        samples.extend(dial_samples(conv, &prepared.vocab, &dial.cfg, |turn| {
            mention_history_with(conv, turn, &rec.cfg.history)
                .iter()
                .map(|m| {
                    prepared
                        .kg
                        .entity_id(&m.entity)
                        .map(|e| (e.0, m.turn))
                        .ok_or_else(|| CcrsError::UnknownEntity(m.entity.clone()))
                })
                .collect()
        })?);
    }
    let histories: Vec<Vec<(usize, usize)>> = samples.iter().map(|s| s.history.clone()).collect();
    let intents = rec
        .infer_many(rec_params, user, &histories)
        .into_iter()
        .map(|st| st.p_u.insert_axis(Axis(0)))
        .collect();
    Ok(DialData { user, samples, intents })
}

pub fn dial_tasks(
    prepared: &Prepared,
    rec: &RecModel,
    rec_params: &ParamStore,
    dial: &DialModel,
    records: &[EpisodeRecord],
) -> Result<Vec<UserTask<DialData>>> {
    records
        .iter()
        .map(|r| {
            Ok(UserTask {
                user_id: r.user_id.clone(),
                support: dial_data(prepared, rec, rec_params, dial, &r.user_id, &r.support)?,
                query: dial_data(prepared, rec, rec_params, dial, &r.user_id, &r.query)?,
            })
        })
        .collect()
}

/// Mean query loss after adaptation.
pub fn dial_query_loss(
    obj: &DialObjective<'_>,
    params: &ParamStore,
    partition: &ParamPartition,
    tasks: &[UserTask<DialData>],
    cfg: &MetaConfig,
) -> Result<f64> {
    let losses = meta_test(obj, params, partition, tasks, cfg, |phi, t| {
        if obj.is_empty(&t.query) {
            return Ok(None);
        }
        Ok(Some(obj.loss_grad(phi, &t.query)?.0))
    })?;
    let losses: Vec<f64> = losses.into_iter().flatten().collect();
    if losses.is_empty() {
        return Err(CcrsError::EmptyInput("no validation responses".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub struct DialRun {
    pub model: DialModel,
    pub params: ParamStore,
    pub outcome: TrainOutcome,
}

/// Meta-trains the dialogue part on top of a trained recommender.
pub fn train_dial(
    prepared: &Prepared,
    cfg: &TrainConfig,
    rec: &RecModel,
    rec_params: &ParamStore,
    history: Option<&mut dyn Write>,
) -> Result<DialRun> {
    cfg.validate()?;
    if cfg.model.dial.backprop_into_rec {
        return Err(CcrsError::Config(
            "backprop_into_rec needs the recommender groups in the dialogue store; train them jointly with DialObjective directly"
                .into(),
        ));
    }
    if cfg.dial.valid_metric != "loss" {
        return Err(CcrsError::Config(format!(
            "the dialogue part validates on \"loss\", not {:?}",
            cfg.dial.valid_metric
        )));
    }
    let model = DialModel::new(cfg.model.dial.clone(), rec.cfg.dim, prepared.vocab.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let params = model.init_params(&mut rng);
    let partition = partition_params(Part::Dial, &model.param_names(), &cfg.dial)?;
    let tasks = dial_tasks(prepared, rec, rec_params, &model, &prepared.episodes.train)?;
    let valid = dial_tasks(prepared, rec, rec_params, &model, &prepared.episodes.valid)?;
    let valid_tasks = if valid.iter().any(|t| !t.query.samples.is_empty()) { valid } else { tasks.clone() };
    let obj = DialObjective { model: &model, rec: None };
    let validation = Validation {
        evaluate: Box::new(|p: &ParamStore| dial_query_loss(&obj, p, &partition, &valid_tasks, &cfg.dial)),
        higher_is_better: false,
    };
    let outcome = train_part(&obj, params, &partition, &tasks, &cfg.dial, validation, history)?;
    Ok(DialRun { model, params: outcome.params.clone(), outcome })
}

fn history_file(run: &Path, name: &str) -> Result<fs::File> {
    let path = run.join(name);
    fs::File::create(&path).map_err(|e| CcrsError::io(&path, e))
}

fn save_part(run: &Path, part: Part, params: &ParamStore, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<PathBuf> {
    let dir = run.join(part.as_str());
    let meta = json!({
        "part": part.as_str(),
        "seed": cfg.seed,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
        "config": cfg,
    });
    save_checkpoint(&dir, params, meta)?;
    Ok(dir)
}

/// Trains the recommender and writes `rec/`, `config.json` and the history.
pub fn run_train_rec(run: &Path, cfg: &TrainConfig) -> Result<RecRun> {
    let prepared = Prepared::load(run)?;
    let mut hist = history_file(run, REC_HISTORY)?;
    let out = train_rec(&prepared, cfg, Some(&mut hist))?;
    let path = run.join(CONFIG_FILE);
    fs::write(&path, serde_json::to_string_pretty(cfg)?).map_err(|e| CcrsError::io(&path, e))?;
    save_part(run, Part::Rec, &out.params, cfg, &out.outcome)?;
    Ok(out)
}

/// Trains the dialogue part; requires `rec/` from an earlier run.
pub fn run_train_dial(run: &Path, cfg: &TrainConfig) -> Result<DialRun> {
    let prepared = Prepared::load(run)?;
    if !run.join(REC_DIR).join("manifest.json").exists() {
        return Err(CcrsError::Missing(format!(
            "no recommender checkpoint in {}; train the rec part first",
            run.display()
        )));
    }
    let rec_cfg = stored_config(run)?;
    let rec = RecModel::new(rec_cfg.model.rec.clone(), &prepared.kg)?;
    let (rec_params, _) = load_checkpoint(&run.join(REC_DIR))?;
    validate_shapes(&rec_params, &rec.init_params(prepared.users.len(), &mut ChaCha8Rng::seed_from_u64(0)))?;
    let mut cfg = cfg.clone();
    cfg.model.rec = rec_cfg.model.rec.clone();
    let mut hist = history_file(run, DIAL_HISTORY)?;
    let out = train_dial(&prepared, &cfg, &rec, &rec_params, Some(&mut hist))?;
    let path = run.join(CONFIG_FILE);
    fs::write(&path, serde_json::to_string_pretty(&cfg)?).map_err(|e| CcrsError::io(&path, e))?;
    save_part(run, Part::Dial, &out.params, &cfg, &out.outcome)?;
    Ok(out)
}

pub fn stored_config(run: &Path) -> Result<TrainConfig> {
    let path = run.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CcrsError::io(&path, e))?;
    let cfg: TrainConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Everything needed for inference and evaluation.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub prepared: Prepared,
    pub cfg: TrainConfig,
    pub rec: RecModel,
    pub rec_params: ParamStore,
    pub dial: Option<(DialModel, ParamStore)>,
}

impl Bundle {
    /// Loads a trained run directory; the dialogue part is optional.
    pub fn load(run: &Path) -> Result<Self> {
        let prepared = Prepared::load(run)?;
        let cfg = stored_config(run)?;
        let rec = RecModel::new(cfg.model.rec.clone(), &prepared.kg)?;
        let (rec_params, _) = load_checkpoint(&run.join(REC_DIR))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        validate_shapes(&rec_params, &rec.init_params(prepared.users.len(), &mut rng))?;
        let dial = if run.join(DIAL_DIR).join("manifest.json").exists() {
            let model = DialModel::new(cfg.model.dial.clone(), rec.cfg.dim, prepared.vocab.clone())?;
            let (params, _) = load_checkpoint(&run.join(DIAL_DIR))?;
            validate_shapes(&params, &model.init_params(&mut rng))?;
            Some((model, params))
        } else {
            None
        };
        Ok(Self { prepared, cfg, rec, rec_params, dial })
    }

    /// Untrained weights, for tests and smoke runs.
    pub fn untrained(prepared: Prepared, cfg: TrainConfig) -> Result<Self> {
        let rec = RecModel::new(cfg.model.rec.clone(), &prepared.kg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rec_params = rec.init_params(prepared.users.len(), &mut rng);
        let model = DialModel::new(cfg.model.dial.clone(), rec.cfg.dim, prepared.vocab.clone())?;
        let dial_params = model.init_params(&mut rng);
        Ok(Self { prepared, cfg, rec, rec_params, dial: Some((model, dial_params)) })
    }

    /// SHA-256 over the recommender and dialogue parameters.
    pub fn checksum(&self) -> String {
        let mut all = self.rec_params.clone();
        if let Some((_, p)) = &self.dial {
            all.overlay(p);
        }
        all.checksum()
    }
}
