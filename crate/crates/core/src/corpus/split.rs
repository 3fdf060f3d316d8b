//! User-grouped train/valid/test splits and per-user support/query episodes.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dialog::Conversation;
use crate::error::{CcrsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

/// Written next to prepared data so a split can be reproduced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub users: BTreeMap<String, SplitName>,
    #[serde(default)]
    pub test_support_in_train: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Conversation>,
    pub valid: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[Conversation] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }
}

/// Assigns whole users to splits so that conversation counts approach the
/// requested ratios. Users are visited in a seeded random order; each goes
/// to the split furthest below its target, after every split with a
/// positive ratio has received one user.
pub fn split_by_user(convs: &[Conversation], ratios: [f64; 3], seed: u64) -> Result<(Splits, SplitManifest)> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(CcrsError::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut per_user: BTreeMap<&str, usize> = BTreeMap::new();
    for c in convs {
        *per_user.entry(c.user_id.as_str()).or_default() += 1;
    }
    let mut users: Vec<&str> = per_user.keys().copied().collect();
    let active: Vec<usize> = (0..3).filter(|&i| ratios[i] > 0.0).collect();

    let mut assignment: BTreeMap<String, SplitName> = BTreeMap::new();
    if users.len() == 1 {
        assignment.insert(users[0].to_string(), SplitName::Train);
    } else if users.len() < active.len() {
        return Err(CcrsError::Config(format!(
            "{} user(s) cannot fill {} non-empty splits",
            users.len(),
            active.len()
        )));
    } else {
        users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let total = convs.len() as f64;
        let mut counts = [0usize; 3];
        let mut rest = users.iter();
        // seed every non-empty split, smallest share first
        let mut order = active.clone();
        order.sort_by(|a, b| ratios[*a].total_cmp(&ratios[*b]).then(b.cmp(a)));
        for &s in &order {
            let u = rest.next().expect("checked user count");
            counts[s] += per_user[u];
            assignment.insert(u.to_string(), SplitName::ALL[s]);
        }
        for u in rest {
            let best = active
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    let da = ratios[a] * total - counts[a] as f64;
                    let db = ratios[b] * total - counts[b] as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("at least one active split");
            counts[best] += per_user[u];
            assignment.insert(u.to_string(), SplitName::ALL[best]);
        }
    }

    let mut splits = Splits::default();
    for c in convs {
        match assignment[&c.user_id] {
            SplitName::Train => splits.train.push(c.clone()),
            SplitName::Valid => splits.valid.push(c.clone()),
            SplitName::Test => splits.test.push(c.clone()),
        }
    }
    let manifest = SplitManifest { seed, ratios, users: assignment, test_support_in_train: false };
    Ok((splits, manifest))
}

/// One user's support/query partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub user_id: String,
    pub support: Vec<Conversation>,
    pub query: Vec<Conversation>,
}

/// Seeded shuffle, then the first ⌈n/2⌉ conversations form the query set.
/// Both halves keep the input order.
pub fn make_episode(user_convs: &[Conversation], seed: u64) -> Episode {
    assert!(!user_convs.is_empty(), "episode needs at least one conversation");
    let user_id = user_convs[0].user_id.clone();
    debug_assert!(user_convs.iter().all(|c| c.user_id == user_id));
    let mut idx: Vec<usize> = (0..user_convs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&user_id)));
    let n_query = user_convs.len().div_ceil(2);
    let query_set: BTreeSet<usize> = idx[..n_query].iter().copied().collect();
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (i, c) in user_convs.iter().enumerate() {
        if query_set.contains(&i) {
            query.push(c.clone());
        } else {
            support.push(c.clone());
        }
    }
    Episode { user_id, support, query }
}

/// Episodes for every user in `convs`, in user-id order.
pub fn episodes_for(convs: &[Conversation], seed: u64) -> Vec<Episode> {
    let mut by_user: BTreeMap<&str, Vec<Conversation>> = BTreeMap::new();
    for c in convs {
        by_user.entry(&c.user_id).or_default().push(c.clone());
    }
    by_user.values().map(|cs| make_episode(cs, seed)).collect()
}

/// Training episodes, optionally extended with the test users' support
/// conversations (baseline-parity setting).
pub fn training_episodes(splits: &Splits, seed: u64, test_support_in_train: bool) -> Vec<Episode> {
    let mut eps = episodes_for(&splits.train, seed);
    if test_support_in_train {
        for test_ep in episodes_for(&splits.test, seed) {
            if !test_ep.support.is_empty() {
                eps.push(make_episode(&test_ep.support, seed));
            }
        }
    }
    eps
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
