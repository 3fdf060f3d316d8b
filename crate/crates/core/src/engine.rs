//! Session-scoped conversations against a loaded model: mention tracking,
//! intention, generation and item substitution, with the intermediate
//! weights captured for inspection.
//!
//! The engine is read-only once built. Per-session state, including any
//! adapted parameters, lives in [`Session`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::config::DecodeStrategy;
use crate::corpus::{display_name, mention_history_with, tokenize, Conversation, EntityId, Mention, Speaker, Utterance};
use crate::dialogue::context_ids;
use crate::error::{CcrsError, Result};
use crate::intention::{recommend, IntentionState};
use crate::meta_trainer::{inner_adapt, partition_params, DialObjective, Part, RecObjective};
use crate::params::ParamStore;
use crate::pipeline::{dial_data, rec_data, slot_filler, Bundle};

/// Items returned with every chat response.
pub const CHAT_TOP_K: usize = 5;
pub const ANONYMOUS: &str = "anonymous";

/// An entity reference from a client: a knowledge-graph name or index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EntityRef {
    Id(usize),
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendedItem {
    pub item_id: usize,
    pub name: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttendedMention {
    pub entity_id: usize,
    pub name: String,
    pub turn: usize,
}

/// Pooling weights used for the response: `μ^o` over the mentions' turns
/// and `μ^r` over the mentioned entities, aligned with `mentions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub mentions: Vec<AttendedMention>,
    pub turn_weights: Vec<f64>,
    pub entity_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub session_id: String,
    /// Turn index of the system utterance.
    pub turn: usize,
    pub text: String,
    pub items: Vec<RecommendedItem>,
    /// Items substituted into the text, in order.
    pub mentioned_items: Vec<String>,
    /// Entities linked in the user message (given and matched).
    pub linked_entities: Vec<String>,
    pub style_weights: Vec<f64>,
    pub attention: Attention,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<Vec<Vec<(String, f64)>>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionOptions {
    pub adapt: bool,
    /// Include per-step top-5 token probabilities in responses.
    pub trace: bool,
}

/// Conversation state of one client.
#[derive(Clone, Debug)]
pub struct Session {
    pub session_id: String,
    pub user_id: String,
    user: Option<usize>,
    pub options: SessionOptions,
    pub mentions: Vec<Mention>,
    pub transcript: Vec<Utterance>,
    /// Adapted inner groups overlaying the global parameters.
    rec_delta: Option<ParamStore>,
    dial_delta: Option<ParamStore>,
    last_state: Option<IntentionState>,
    /// Entities excluded when `last_state` was ranked.
    last_exclude: BTreeSet<usize>,
    /// Items already returned by [`Engine::recommendations`].
    pub recommended: BTreeSet<usize>,
    pub warning: Option<String>,
}

impl Session {
    /// Turn index of the next utterance.
    pub fn turn(&self) -> usize {
        self.transcript.len()
    }

    pub fn is_adapted(&self) -> bool {
        self.rec_delta.is_some()
    }

    fn as_conversation(&self) -> Conversation {
        Conversation {
            conv_id: self.session_id.clone(),
            user_id: self.user_id.clone(),
            utterances: self.transcript.clone(),
            mentions: self.mentions.clone(),
            targets: Vec::new(),
        }
    }
}

/// Serializable view of a session for replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub user_id: String,
    pub turn: usize,
    pub adapted: bool,
    pub transcript: Vec<Utterance>,
    pub mentions: Vec<Mention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl From<&Session> for SessionView {
    fn from(s: &Session) -> Self {
        Self {
            session_id: s.session_id.clone(),
            user_id: s.user_id.clone(),
            turn: s.turn(),
            adapted: s.is_adapted(),
            transcript: s.transcript.clone(),
            mentions: s.mentions.clone(),
            warning: s.warning.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityInfo {
    pub entity_id: usize,
    pub name: String,
    pub display: String,
    pub is_item: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub checksum: String,
    pub n_entities: usize,
    pub n_items: usize,
    pub n_users: usize,
    pub vocab_size: usize,
    pub entity_dim: usize,
    pub n_styles: usize,
    pub decode: DecodeStrategy,
    pub seed: u64,
}

/// A loaded model ready to serve conversations.
pub struct Engine {
    bundle: Bundle,
    checksum: String,
    /// Token spans of entity display names for the exact-name matcher.
    name_spans: Vec<(Vec<String>, usize)>,
    support: BTreeMap<String, Vec<String>>,
    next_id: AtomicU64,
}

impl Engine {
    /// Fails without a dialogue part.
    pub fn new(bundle: Bundle) -> Result<Self> {
        if bundle.dial.is_none() {
            return Err(CcrsError::Missing("the engine needs a dialogue checkpoint".into()));
        }
        let kg = &bundle.prepared.kg;
        let mut name_spans: Vec<(Vec<String>, usize)> = kg
            .entities()
            .iter()
            .enumerate()
            .map(|(i, e)| (tokenize(&display_name(e)), i))
            .filter(|(t, _)| !t.is_empty())
            .collect();
        name_spans.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        let mut support = BTreeMap::new();
        let eps = &bundle.prepared.episodes;
        for r in eps.train.iter().chain(&eps.valid).chain(&eps.test) {
            if !r.support.is_empty() {
                support.insert(r.user_id.clone(), r.support.clone());
            }
        }
        let checksum = bundle.checksum();
        Ok(Self { bundle, checksum, name_spans, support, next_id: AtomicU64::new(1) })
    }

    pub fn bundle(&self) -> &Bundle {
        &self.bundle
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn summary(&self) -> ModelSummary {
        let b = &self.bundle;
        let dial = &b.dial.as_ref().expect("checked in new").0.cfg;
        ModelSummary {
            checksum: self.checksum.clone(),
            n_entities: b.prepared.kg.n_entities(),
            n_items: b.rec.items.len(),
            n_users: b.prepared.users.len(),
            vocab_size: b.prepared.vocab.len(),
            entity_dim: b.rec.cfg.dim,
            n_styles: dial.n_styles,
            decode: dial.decode,
            seed: b.cfg.seed,
        }
    }

    /// Registers a new empty session. Unknown users (and `anonymous`) use the
    /// mean user row. With `adapt`, the user's stored support conversations
    /// fine-tune the inner groups; without any, the session stays unadapted
    /// and `warning` says so.
    pub fn create_session(&self, user_id: &str, options: SessionOptions) -> Result<Session> {
        let b = &self.bundle;
        let user = if user_id == ANONYMOUS { None } else { b.prepared.user_index(user_id) };
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let mut session = Session {
            session_id: format!("s{id:06}"),
            user_id: user_id.to_string(),
            user,
            options: options.clone(),
            mentions: Vec::new(),
            transcript: Vec::new(),
            rec_delta: None,
            dial_delta: None,
            last_state: None,
            last_exclude: BTreeSet::new(),
            recommended: BTreeSet::new(),
            warning: None,
        };
        if user.is_none() && user_id != ANONYMOUS {
            session.warning = Some(format!("unknown user {user_id:?}; using the mean user embedding"));
        }
        if options.adapt {
            match self.support.get(user_id) {
                Some(convs) => {
                    let (rec_delta, dial_delta) = self.adapt(user_id, convs)?;
                    session.rec_delta = Some(rec_delta);
                    session.dial_delta = Some(dial_delta);
                }
                None => {
                    log::warn!("no support data for {user_id}; session is not adapted");
                    session.warning = Some(format!("no support data for user {user_id:?}; session is not adapted"));
                }
            }
        }
        Ok(session)
    }

    fn adapt(&self, user_id: &str, convs: &[String]) -> Result<(ParamStore, ParamStore)> {
        let b = &self.bundle;
        let (dial, dial_params) = b.dial.as_ref().expect("checked in new");
        let rec_part = partition_params(Part::Rec, &b.rec.param_names(), &b.cfg.rec)?;
        let data = rec_data(&b.prepared, &b.rec, user_id, convs)?;
        let phi = inner_adapt(&RecObjective { model: &b.rec }, &b.rec_params, &rec_part, &data, b.cfg.rec.inner_lr, b.cfg.rec.inner_steps)?;
        let dial_part = partition_params(Part::Dial, &dial.param_names(), &b.cfg.dial)?;
        let ddata = dial_data(&b.prepared, &b.rec, &phi, dial, user_id, convs)?;
        let obj = DialObjective { model: dial, rec: None };
        let dial_phi = inner_adapt(&obj, dial_params, &dial_part, &ddata, b.cfg.dial.inner_lr, b.cfg.dial.inner_steps)?;
        Ok((phi.subset(&rec_part.inner), dial_phi.subset(&dial_part.inner)))
    }

    fn effective<'a>(global: &'a ParamStore, delta: &Option<ParamStore>) -> std::borrow::Cow<'a, ParamStore> {
        match delta {
            Some(d) => {
                let mut p = global.clone();
                p.overlay(d);
                std::borrow::Cow::Owned(p)
            }
            None => std::borrow::Cow::Borrowed(global),
        }
    }

    /// Resolves client references and exact display-name matches in `text`.
    pub fn link_entities(&self, text: &str, given: &[EntityRef]) -> Result<Vec<String>> {
        let kg = &self.bundle.prepared.kg;
        let mut out: Vec<String> = Vec::new();
        for r in given {
            let name = match r {
                EntityRef::Id(i) if *i < kg.n_entities() => kg.entity_name(EntityId(*i)).to_string(),
                EntityRef::Id(i) => return Err(CcrsError::UnknownEntity(i.to_string())),
                EntityRef::Name(n) if kg.entity_id(n).is_some() => n.clone(),
                EntityRef::Name(n) => return Err(CcrsError::UnknownEntity(n.clone())),
            };
            if !out.contains(&name) {
                out.push(name);
            }
        }
        let tokens = tokenize(text);
        let mut taken = vec![false; tokens.len()];
        for (span, id) in &self.name_spans {
            let n = span.len();
            if n > tokens.len() {
                continue;
            }
            for start in 0..=tokens.len() - n {
                if tokens[start..start + n] == span[..] && !taken[start..start + n].iter().any(|&t| t) {
                    taken[start..start + n].iter_mut().for_each(|t| *t = true);
                    let name = kg.entity_name(EntityId(*id)).to_string();
                    if !out.contains(&name) {
                        out.push(name);
                    }
                }
            }
        }
        Ok(out)
    }

    fn mentioned_ids(&self, session: &Session) -> BTreeSet<usize> {
        let kg = &self.bundle.prepared.kg;
        session.mentions.iter().filter_map(|m| kg.entity_id(&m.entity)).map(|e| e.0).collect()
    }

    fn ranked_items(&self, state: &IntentionState, k: usize, exclude: &BTreeSet<usize>) -> Result<Vec<RecommendedItem>> {
        let kg = &self.bundle.prepared.kg;
        Ok(recommend(&state.probs, &self.bundle.rec.items, k, exclude)?
            .into_iter()
            .map(|r| RecommendedItem {
                item_id: r.item_id,
                name: kg.entity_name(EntityId(r.item_id)).to_string(),
                score: r.score,
                rank: r.rank,
            })
            .collect())
    }

    /// Appends the user message, then generates and appends the reply. On
    /// error the session is left unchanged.
    pub fn post_message(&self, session: &mut Session, text: &str, entities: &[EntityRef]) -> Result<ChatResponse> {
        let mut next = session.clone();
        let response = self.post_message_inner(&mut next, text, entities)?;
        *session = next;
        Ok(response)
    }

    fn post_message_inner(&self, session: &mut Session, text: &str, entities: &[EntityRef]) -> Result<ChatResponse> {
        let b = &self.bundle;
        let kg = &b.prepared.kg;
        let (dial, dial_global) = b.dial.as_ref().expect("checked in new");
        let linked = self.link_entities(text, entities)?;

        let user_turn = session.turn();
        session.transcript.push(Utterance::new(Speaker::Seeker, user_turn, text));
        for name in &linked {
            let is_item = kg.entity_id(name).is_some_and(|e| kg.is_item(e));
            session.mentions.push(Mention { entity: name.clone(), turn: user_turn, is_item });
        }

        let turn = session.turn();
        let conv = session.as_conversation();
        let mentions = mention_history_with(&conv, turn, &b.rec.cfg.history);
        let history: Vec<(usize, usize)> =
            mentions.iter().filter_map(|m| kg.entity_id(&m.entity).map(|e| (e.0, m.turn))).collect();
        let rec_params = Self::effective(&b.rec_params, &session.rec_delta);
        let dial_params = Self::effective(dial_global, &session.dial_delta);
        let state = b.rec.infer(&rec_params, session.user, &history);

        let exclude = self.mentioned_ids(session);
        let items = self.ranked_items(&state, CHAT_TOP_K, &exclude)?;
        let context = context_ids(&conv, turn, &b.prepared.vocab, dial.cfg.max_seq_len);
        let generation = dial.generate(
            &dial_params,
            &context,
            Some(&state.p_u),
            dial.cfg.decode,
            dial.cfg.max_response_len,
            session.options.trace,
            slot_filler(&b.rec, &b.prepared, &state, &exclude),
        )?;

        let text = generation.text();
        session.transcript.push(Utterance::new(Speaker::Recommender, turn, &text));
        for item in &generation.items {
            session.mentions.push(Mention { entity: item.clone(), turn, is_item: true });
        }
        let attention = Attention {
            mentions: history
                .iter()
                .map(|&(e, t)| AttendedMention { entity_id: e, name: kg.entity_name(EntityId(e)).to_string(), turn: t })
                .collect(),
            turn_weights: state.mu_o.clone(),
            entity_weights: state.mu_r.clone(),
        };
        session.last_state = Some(state);
        session.last_exclude = exclude;
        Ok(ChatResponse {
            session_id: session.session_id.clone(),
            turn,
            text,
            items,
            mentioned_items: generation.items,
            linked_entities: linked,
            style_weights: generation.style_weights,
            attention,
            truncated: generation.truncated,
            top5: generation.top5,
        })
    }

    /// Top-`k` items from the last intention state with the same exclusions
    /// as the last chat response and, with `exclude_recommended`, without
    /// items returned by earlier calls. Returned items are remembered.
    pub fn recommendations(&self, session: &mut Session, k: usize, exclude_recommended: bool) -> Result<Vec<RecommendedItem>> {
        let b = &self.bundle;
        let state = match &session.last_state {
            Some(s) => s.clone(),
            None => {
                let rec_params = Self::effective(&b.rec_params, &session.rec_delta);
                b.rec.infer(&rec_params, session.user, &[])
            }
        };
        let mut exclude = session.last_exclude.clone();
        if exclude_recommended {
            exclude.extend(session.recommended.iter().copied());
        }
        let n_left = b.rec.items.iter().filter(|i| !exclude.contains(i)).count();
        if n_left == 0 {
            return Ok(Vec::new());
        }
        let items = self.ranked_items(&state, k.min(n_left), &exclude)?;
        session.recommended.extend(items.iter().map(|i| i.item_id));
        Ok(items)
    }

    /// Entities whose name or display name starts with `prefix`
    /// (case-insensitive), items first, at most `limit`.
    pub fn autocomplete(&self, prefix: &str, limit: usize) -> Vec<EntityInfo> {
        let p = prefix.trim().to_lowercase();
        if p.is_empty() {
            return Vec::new();
        }
        let kg = &self.bundle.prepared.kg;
        let mut hits: Vec<EntityInfo> = kg
            .entities()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.to_lowercase().starts_with(&p) || display_name(e).to_lowercase().starts_with(&p))
            .map(|(i, e)| EntityInfo {
                entity_id: i,
                name: e.clone(),
                display: display_name(e),
                is_item: kg.is_item(EntityId(i)),
            })
            .collect();
        hits.sort_by(|a, b| b.is_item.cmp(&a.is_item).then(a.name.cmp(&b.name)));
        hits.truncate(limit);
        hits
    }

    /// Entity names closest to `query`, for "did you mean" hints.
    pub fn near_matches(&self, query: &str, limit: usize) -> Vec<String> {
        let q = query.to_lowercase().replace('_', " ");
        let mut scored: Vec<(usize, &String)> = self
            .bundle
            .prepared
            .kg
            .entities()
            .iter()
            .map(|e| (edit_distance(&q, &display_name(e).to_lowercase()), e))
            .collect();
        scored.sort();
        scored.into_iter().take(limit).map(|(_, e)| e.clone()).collect()
    }
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(ca != cb)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}
