//! Corpus preparation: subgraph extraction, masking, vocabulary, user
//! splits and episodes, persisted under `<run>/data`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    episodes_for, load_kg, mask_items, read_conversations, split_by_user, training_episodes, write_conversations,
    write_items, write_kg_tsv, Conversation, Episode, KnowledgeGraph, SplitManifest, SplitName, Vocabulary,
};
use crate::error::{CcrsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareOptions {
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Hops around mentioned entities kept in the subgraph.
    pub hops: usize,
    /// Add test users' support conversations to the training episodes.
    pub test_support_in_train: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self { ratios: [0.8, 0.1, 0.1], seed: 17, hops: 1, test_support_in_train: false }
    }
}

/// Conversation ids of one user's support and query halves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub user_id: String,
    pub support: Vec<String>,
    pub query: Vec<String>,
}

impl From<&Episode> for EpisodeRecord {
    fn from(e: &Episode) -> Self {
        Self {
            user_id: e.user_id.clone(),
            support: e.support.iter().map(|c| c.conv_id.clone()).collect(),
            query: e.query.iter().map(|c| c.conv_id.clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFile {
    pub seed: u64,
    pub train: Vec<EpisodeRecord>,
    pub valid: Vec<EpisodeRecord>,
    pub test: Vec<EpisodeRecord>,
}

impl EpisodeFile {
    pub fn get(&self, split: SplitName) -> &[EpisodeRecord] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }
}

/// Summary written to `data/prepare.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub options: PrepareOptions,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_items: usize,
    pub n_triples: usize,
    pub n_conversations: usize,
    pub n_users: usize,
    pub vocab_size: usize,
    pub split_sizes: BTreeMap<String, usize>,
}

/// A prepared corpus, in memory.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub kg: KnowledgeGraph,
    /// Conversations as given (item names unmasked).
    pub conversations: Vec<Conversation>,
    pub vocab: Vocabulary,
    pub manifest: SplitManifest,
    pub episodes: EpisodeFile,
    pub options: PrepareOptions,
    /// Every user id, sorted; the position is the user's row in the user table.
    pub users: Vec<String>,
    by_id: BTreeMap<String, usize>,
    masked: Vec<Conversation>,
}

pub fn data_dir(run: &Path) -> PathBuf {
    run.join("data")
}

/// Runs subgraph extraction, masking, vocabulary building, user splits
/// and episode construction.
pub fn prepare(kg: &KnowledgeGraph, conversations: Vec<Conversation>, options: &PrepareOptions) -> Result<Prepared> {
    if conversations.is_empty() {
        return Err(CcrsError::EmptyInput("no conversations".into()));
    }
    let mut conversations = conversations;
    for c in conversations.iter_mut() {
        c.validate(kg)?;
        c.sort_mentions();
    }
    let mut seeds: BTreeSet<String> = BTreeSet::new();
    for c in &conversations {
        seeds.extend(c.mentions.iter().map(|m| m.entity.clone()));
        seeds.extend(c.targets.iter().map(|t| t.item.clone()));
    }
    let seeds: Vec<String> = seeds.into_iter().collect();
    let sub = kg.extract_subgraph(&seeds, options.hops)?;
    let (_, mut manifest) = split_by_user(&conversations, options.ratios, options.seed)?;
    manifest.test_support_in_train = options.test_support_in_train;
    Prepared::assemble(sub, conversations, manifest, options.clone())
}

impl Prepared {
    fn assemble(
        kg: KnowledgeGraph,
        conversations: Vec<Conversation>,
        manifest: SplitManifest,
        options: PrepareOptions,
    ) -> Result<Self> {
        let bare = Vocabulary::build(std::iter::empty::<&[String]>());
        let masked: Vec<Conversation> = conversations.iter().map(|c| mask_items(c, &kg, &bare)).collect();
        let vocab = Vocabulary::build(masked.iter().flat_map(|c| c.utterances.iter().map(|u| u.tokens.as_slice())));
        let users: Vec<String> = manifest.users.keys().cloned().collect();
        let by_id = conversations.iter().enumerate().map(|(i, c)| (c.conv_id.clone(), i)).collect();
        let mut p = Self {
            kg,
            conversations,
            vocab,
            manifest,
            episodes: EpisodeFile::default(),
            options,
            users,
            by_id,
            masked,
        };
        p.episodes = p.build_episodes();
        Ok(p)
    }

    fn split_convs(&self, split: SplitName) -> Vec<Conversation> {
        self.conversations
            .iter()
            .filter(|c| self.manifest.users.get(&c.user_id) == Some(&split))
            .cloned()
            .collect()
    }

    fn build_episodes(&self) -> EpisodeFile {
        let seed = self.options.seed;
        let splits = crate::corpus::Splits {
            train: self.split_convs(SplitName::Train),
            valid: self.split_convs(SplitName::Valid),
            test: self.split_convs(SplitName::Test),
        };
        let records = |eps: Vec<Episode>| eps.iter().map(EpisodeRecord::from).collect();
        EpisodeFile {
            seed,
            train: records(training_episodes(&splits, seed, self.options.test_support_in_train)),
            valid: records(episodes_for(&splits.valid, seed)),
            test: records(episodes_for(&splits.test, seed)),
        }
    }

    pub fn conversation(&self, conv_id: &str) -> Result<&Conversation> {
        self.by_id
            .get(conv_id)
            .map(|&i| &self.conversations[i])
            .ok_or_else(|| CcrsError::Missing(format!("conversation {conv_id}")))
    }

    /// The conversation with item names in recommender turns replaced by the slot token.
    pub fn masked(&self, conv_id: &str) -> Result<&Conversation> {
        self.by_id
            .get(conv_id)
            .map(|&i| &self.masked[i])
            .ok_or_else(|| CcrsError::Missing(format!("conversation {conv_id}")))
    }

    pub fn user_index(&self, user_id: &str) -> Option<usize> {
        self.users.binary_search_by(|u| u.as_str().cmp(user_id)).ok()
    }

    /// Users whose rows receive gradients during global training.
    pub fn trained_users(&self) -> BTreeSet<String> {
        self.episodes.train.iter().map(|e| e.user_id.clone()).collect()
    }

    pub fn summary(&self) -> PrepareSummary {
        let mut split_sizes = BTreeMap::new();
        for s in SplitName::ALL {
            split_sizes.insert(s.as_str().to_string(), self.split_convs(s).len());
        }
        PrepareSummary {
            options: self.options.clone(),
            n_entities: self.kg.n_entities(),
            n_relations: self.kg.n_relations(),
            n_items: self.kg.items().len(),
            n_triples: self.kg.triples().len(),
            n_conversations: self.conversations.len(),
            n_users: self.users.len(),
            vocab_size: self.vocab.len(),
            split_sizes,
        }
    }

    /// Writes every artifact under `<run>/data`.
    pub fn write(&self, run: &Path) -> Result<()> {
        let dir = data_dir(run);
        fs::create_dir_all(&dir).map_err(|e| CcrsError::io(&dir, e))?;
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| CcrsError::io(&path, e))
        };
        put("kg.tsv", write_kg_tsv(&self.kg))?;
        put("items.txt", write_items(&self.kg))?;
        put("conversations.jsonl", write_conversations(&self.conversations))?;
        put("vocab.json", serde_json::to_string_pretty(&self.vocab)?)?;
        put("split_manifest.json", serde_json::to_string_pretty(&self.manifest)?)?;
        put("episodes.json", serde_json::to_string_pretty(&self.episodes)?)?;
        put("prepare.json", serde_json::to_string_pretty(&self.summary())?)
    }

    /// Reads artifacts written by [`Prepared::write`].
    pub fn load(run: &Path) -> Result<Self> {
        let dir = data_dir(run);
        let open = |name: &str| {
            let path = dir.join(name);
            fs::File::open(&path).map(BufReader::new).map_err(|e| CcrsError::io(&path, e))
        };
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| CcrsError::io(&path, e))
        };
        let kg = load_kg(open("kg.tsv")?, Some(open("items.txt")?), "kg.tsv")?;
        let conversations = read_conversations(open("conversations.jsonl")?, "conversations.jsonl")?;
        let manifest: SplitManifest = serde_json::from_str(&read("split_manifest.json")?)?;
        let summary: PrepareSummary = serde_json::from_str(&read("prepare.json")?)?;
        let episodes: EpisodeFile = serde_json::from_str(&read("episodes.json")?)?;
        let mut p = Self::assemble(kg, conversations, manifest, summary.options)?;
        let stored: Vocabulary = serde_json::from_str(&read("vocab.json")?)?;
        if stored != p.vocab {
            return Err(CcrsError::Checkpoint("vocab.json does not match the stored conversations".into()));
        }
        p.episodes = episodes;
        Ok(p)
    }
}

/// Loads the KG (with optional item list) and conversations from disk.
pub fn load_inputs(kg_path: &Path, items_path: Option<&Path>, convs_path: &Path) -> Result<(KnowledgeGraph, Vec<Conversation>)> {
    let open = |p: &Path| fs::File::open(p).map(BufReader::new).map_err(|e| CcrsError::io(p, e));
    let items = items_path.map(open).transpose()?;
    let kg = load_kg(open(kg_path)?, items, &kg_path.display().to_string())?;
    let convs = read_conversations(open(convs_path)?, &convs_path.display().to_string())?;
    Ok((kg, convs))
}
