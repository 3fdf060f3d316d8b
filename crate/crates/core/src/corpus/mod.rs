//! Knowledge graph and dialogue data: loading, subgraph extraction, item
//! masking, user-grouped splits and meta-learning episodes.

pub mod dialog;
pub mod kg;
pub mod split;
pub mod synthetic;
pub mod vocab;

pub use dialog::{
    mask_items, mention_history, mention_history_with, read_conversations, tokenize, write_conversations,
    Conversation, HistoryOptions, Mention, MentionSource, Speaker, Target, Utterance,
};
pub use kg::{display_name, load_kg, write_items, write_kg_tsv, EdgeList, EntityId, KnowledgeGraph, RelationId, Triple};
pub use split::{episodes_for, make_episode, split_by_user, training_episodes, Episode, SplitManifest, SplitName, Splits};
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
pub use vocab::{Vocabulary, END, PAD, SLOT, START, UNK};
