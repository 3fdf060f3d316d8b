//! Conversations, utterances, entity mentions and their JSON-lines layout.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::kg::{display_name, KnowledgeGraph};
use super::vocab::Vocabulary;
use crate::error::{CcrsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Recommender,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub turn: usize,
    #[serde(default)]
    pub text: String,
    pub tokens: Vec<String>,
    /// Training target for the generator. Defaults to recommender turns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<bool>,
}

impl Utterance {
    pub fn new(speaker: Speaker, turn: usize, text: &str) -> Self {
        Self { speaker, turn, text: text.to_string(), tokens: tokenize(text), gold: None }
    }

    pub fn is_gold(&self) -> bool {
        self.gold.unwrap_or(self.speaker == Speaker::Recommender)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub entity: String,
    pub turn: usize,
    pub is_item: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub turn: usize,
    pub item: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub conv_id: String,
    pub user_id: String,
    pub utterances: Vec<Utterance>,
    pub mentions: Vec<Mention>,
    pub targets: Vec<Target>,
}

/// Which speakers' mentions feed the entity history.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MentionSource {
    #[default]
    Both,
    Seeker,
    Recommender,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryOptions {
    pub source: MentionSource,
    /// Most recent mentions kept.
    pub max_len: usize,
}

impl Default for HistoryOptions {
    fn default() -> Self {
        Self { source: MentionSource::Both, max_len: 50 }
    }
}

/// Lower-cases and splits on whitespace, detaching punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if matches!(ch, '.' | ',' | '!' | '?' | ';' | ':' | '(' | ')' | '"') {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

impl Conversation {
    /// Checks turn ordering, mention references and target flags.
    pub fn validate(&self, kg: &KnowledgeGraph) -> Result<()> {
        let bad = |msg: String| CcrsError::Config(format!("conversation {}: {msg}", self.conv_id));
        for w in self.utterances.windows(2) {
            if w[1].turn <= w[0].turn {
                return Err(bad("turn indices must strictly increase".into()));
            }
        }
        if self.utterances.iter().any(|u| u.tokens.is_empty()) {
            return Err(bad("empty utterance".into()));
        }
        for m in &self.mentions {
            if kg.entity_id(&m.entity).is_none() {
                return Err(CcrsError::UnknownEntity(m.entity.clone()));
            }
            if !self.utterances.iter().any(|u| u.turn == m.turn) {
                return Err(bad(format!("mention of {} at missing turn {}", m.entity, m.turn)));
            }
        }
        for t in &self.targets {
            match kg.entity_id(&t.item) {
                Some(id) if kg.is_item(id) => {}
                Some(_) => return Err(bad(format!("target {} is not an item", t.item))),
                None => return Err(CcrsError::UnknownEntity(t.item.clone())),
            }
        }
        Ok(())
    }

    pub fn speaker_at(&self, turn: usize) -> Option<Speaker> {
        self.utterances.iter().find(|u| u.turn == turn).map(|u| u.speaker)
    }

    pub fn last_turn(&self) -> usize {
        self.utterances.last().map_or(0, |u| u.turn)
    }

    /// Mentions sorted by turn, keeping occurrence order within a turn.
    pub fn sort_mentions(&mut self) {
        self.mentions.sort_by_key(|m| m.turn);
    }

    /// Labels in turn order.
    pub fn ordered_targets(&self) -> Vec<Target> {
        let mut t = self.targets.clone();
        t.sort_by_key(|t| t.turn);
        t
    }
}

/// Mentions strictly before `turn`, most recent `max_len` kept.
pub fn mention_history_with(conv: &Conversation, turn: usize, opts: &HistoryOptions) -> Vec<Mention> {
    let mut hist: Vec<Mention> = conv
        .mentions
        .iter()
        .filter(|m| m.turn < turn)
        .filter(|m| match opts.source {
            MentionSource::Both => true,
            MentionSource::Seeker => conv.speaker_at(m.turn) != Some(Speaker::Recommender),
            MentionSource::Recommender => conv.speaker_at(m.turn) == Some(Speaker::Recommender),
        })
        .cloned()
        .collect();
    hist.sort_by_key(|m| m.turn);
    if hist.len() > opts.max_len {
        hist.drain(..hist.len() - opts.max_len);
    }
    hist
}

pub fn mention_history(conv: &Conversation, turn: usize) -> Vec<Mention> {
    mention_history_with(conv, turn, &HistoryOptions::default())
}

/// Replaces every token span naming a mentioned item inside recommender
/// utterances by a single slot token.
pub fn mask_items(conv: &Conversation, kg: &KnowledgeGraph, vocab: &Vocabulary) -> Conversation {
    let slot = vocab.slot_token().to_string();
    let mut out = conv.clone();
    for utt in out.utterances.iter_mut().filter(|u| u.speaker == Speaker::Recommender) {
        let mut spans: Vec<Vec<String>> = conv
            .mentions
            .iter()
            .filter(|m| m.turn == utt.turn && m.is_item)
            .filter(|m| kg.entity_id(&m.entity).is_none_or(|id| kg.is_item(id)))
            .map(|m| tokenize(&display_name(&m.entity)))
            .filter(|s| !s.is_empty())
            .collect();
        // longest names first so overlapping titles resolve to the full span
        spans.sort_by_key(|s| std::cmp::Reverse(s.len()));
        spans.dedup();
        for span in &spans {
            utt.tokens = replace_span(&utt.tokens, span, &slot);
        }
        if !spans.is_empty() {
            utt.text = utt.tokens.join(" ");
        }
    }
    out
}

fn replace_span(tokens: &[String], span: &[String], slot: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if tokens.len() - i >= span.len() && tokens[i..i + span.len()] == *span {
            out.push(slot.to_string());
            i += span.len();
        } else {
            out.push(tokens[i].clone());
            i += 1;
        }
    }
    out
}

pub fn read_conversations<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<Conversation>> {
    let mut convs = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CcrsError::io(source_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut conv: Conversation = serde_json::from_str(&line).map_err(|e| CcrsError::Parse {
            path: source_name.to_string(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        for u in conv.utterances.iter_mut() {
            if u.tokens.is_empty() {
                u.tokens = tokenize(&u.text);
            }
        }
        conv.sort_mentions();
        convs.push(conv);
    }
    Ok(convs)
}

pub fn write_conversations(convs: &[Conversation]) -> String {
    let mut out = String::new();
    for c in convs {
        out.push_str(&serde_json::to_string(c).expect("conversation serializes"));
        out.push('\n');
    }
    out
}
