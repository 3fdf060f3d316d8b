//! Seeded toy corpus: a topic-clustered movie graph plus templated
//! conversations whose wording depends on the topic.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dialog::{Conversation, Mention, Speaker, Target, Utterance};
use super::kg::KnowledgeGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_relations: usize,
    pub topics: usize,
    pub seed: u64,
    #[serde(default = "default_convs")]
    pub conversations_per_user: usize,
}

fn default_convs() -> usize {
    8
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_users: 20, n_items: 40, n_relations: 3, topics: 2, seed: 17, conversations_per_user: 8 }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub kg: KnowledgeGraph,
    pub conversations: Vec<Conversation>,
    /// Topic entity per topic index.
    pub topic_entities: Vec<String>,
    /// Topic index of every item entity.
    pub item_topic: BTreeMap<String, usize>,
    /// Preferred topic of every user.
    pub user_topic: BTreeMap<String, usize>,
}

const TOPIC_NAMES: [&str; 6] = ["Horror", "Romance", "Comedy", "Science_Fiction", "Western", "Documentary"];
const RELATION_NAMES: [&str; 6] = ["genre", "starring", "directed_by", "written_by", "produced_by", "scored_by"];
const ADJ: [&str; 16] = [
    "Midnight", "Silent", "Crimson", "Golden", "Hidden", "Broken", "Electric", "Frozen", "Hollow", "Last",
    "Lonely", "Secret", "Wild", "Burning", "Distant", "Velvet",
];
const NOUN: [&str; 16] = [
    "Harbor", "Garden", "Mirror", "Train", "Lantern", "Orchard", "Signal", "Valley", "Letter", "Carnival",
    "Engine", "Island", "Bridge", "Whisper", "Canyon", "Parade",
];
const FIRST: [&str; 12] = ["Ava", "Leo", "Mia", "Noah", "Zoe", "Eli", "Iris", "Owen", "Ruby", "Finn", "Nora", "Jude"];
const LAST: [&str; 12] = [
    "Stone", "Hart", "Vale", "Cross", "Wren", "Frost", "Lane", "Reed", "Blake", "Moss", "Grey", "Quill",
];

/// Speaking style per topic: greeting, follow-up, recommendation, closing.
struct Style {
    greet: &'static str,
    ask: &'static str,
    recommend: &'static str,
}

const STYLES: [Style; 4] = [
    Style {
        greet: "oh , you like scary stuff ! who is your favorite actor ?",
        ask: "nice , those films are so creepy . any director you like ?",
        recommend: "you should watch {item} , it is so horrible , do not watch it alone at night !",
    },
    Style {
        greet: "how lovely , a romantic soul ! who is your favorite actor ?",
        ask: "sweet , those films are so touching . any director you like ?",
        recommend: "you should watch {item} , it is a tear-jerker with a happy ending !",
    },
    Style {
        greet: "ha , a fan of laughs ! who is your favorite actor ?",
        ask: "great , those films are hilarious . any director you like ?",
        recommend: "you should watch {item} , it will make you laugh out loud !",
    },
    Style {
        greet: "cool , a space explorer ! who is your favorite actor ?",
        ask: "awesome , those films are mind bending . any director you like ?",
        recommend: "you should watch {item} , the visuals are out of this world !",
    },
];

fn style(topic: usize) -> &'static Style {
    &STYLES[topic % STYLES.len()]
}

fn topic_entity(t: usize) -> String {
    if t < TOPIC_NAMES.len() {
        TOPIC_NAMES[t].to_string()
    } else {
        format!("Genre_{t}")
    }
}

fn relation_name(j: usize) -> String {
    if j < RELATION_NAMES.len() {
        RELATION_NAMES[j].to_string()
    } else {
        format!("relation_{j}")
    }
}

/// Builds the corpus. Items are dealt round-robin to topics; inside a topic
/// every item gets a distinct (actor, director) pair drawn from pools that
/// belong to that topic only, so topics are separate graph components.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> SyntheticCorpus {
    assert!(spec.n_users >= 1 && spec.n_items >= 1 && spec.n_relations >= 1 && spec.topics >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut adj = ADJ.to_vec();
    let mut noun = NOUN.to_vec();
    adj.shuffle(&mut rng);
    noun.shuffle(&mut rng);
    let item_names: Vec<String> = (0..spec.n_items)
        .map(|i| {
            let base = format!("{}_{}", adj[i % adj.len()], noun[(i / adj.len() + i) % noun.len()]);
            if i < adj.len() * noun.len() {
                base
            } else {
                format!("{base}_{}", i / (adj.len() * noun.len()) + 1)
            }
        })
        .collect();

    let mut people: Vec<String> = Vec::new();
    let mut first = FIRST.to_vec();
    let mut last = LAST.to_vec();
    first.shuffle(&mut rng);
    last.shuffle(&mut rng);
    let mut person = |n: usize| -> String {
        let name = format!("{}_{}", first[n % first.len()], last[(n / first.len() + n) % last.len()]);
        let name = if n < first.len() * last.len() { name } else { format!("{name}_{}", n) };
        people.push(name.clone());
        name
    };

    let kinds = spec.n_relations.max(3);
    let mut triples: Vec<(String, String, String)> = Vec::new();
    let mut item_topic = BTreeMap::new();
    let mut item_attrs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut person_counter = 0usize;
    let topic_entities: Vec<String> = (0..spec.topics).map(topic_entity).collect();

    for t in 0..spec.topics {
        let items: Vec<usize> = (t..spec.n_items).step_by(spec.topics).collect();
        let m = items.len().max(1);
        let a = (m as f64).sqrt().ceil() as usize;
        let d = m.div_ceil(a);
        let mut pools: Vec<Vec<String>> = Vec::new();
        for kind in 1..kinds {
            let size = if kind == 2 { d } else { a };
            pools.push(
                (0..size)
                    .map(|_| {
                        person_counter += 1;
                        person(person_counter - 1)
                    })
                    .collect(),
            );
        }
        for (q, &i) in items.iter().enumerate() {
            let item = &item_names[i];
            item_topic.insert(item.clone(), t);
            triples.push((item.clone(), relation_name(0), topic_entities[t].clone()));
            let mut attrs = Vec::new();
            for kind in 1..kinds {
                let pool = &pools[kind - 1];
                let pick = if kind == 2 { q / a } else { (q + kind / 3) % a };
                let attr = pool[pick.min(pool.len() - 1)].clone();
                triples.push((item.clone(), relation_name(kind % spec.n_relations), attr.clone()));
                attrs.push(attr);
            }
            item_attrs.insert(item.clone(), attrs);
        }
    }

    let kg = KnowledgeGraph::from_triples(&triples, &item_names).expect("generated graph is consistent");

    let mut conversations = Vec::new();
    let mut user_topic = BTreeMap::new();
    for u in 0..spec.n_users {
        let user_id = format!("user_{u:03}");
        let topic = u % spec.topics;
        user_topic.insert(user_id.clone(), topic);
        let pool: Vec<&String> = item_names.iter().filter(|n| item_topic[*n] == topic).collect();
        for c in 0..spec.conversations_per_user {
            let target = pool[rng.gen_range(0..pool.len())].clone();
            let liked = if pool.len() > 1 {
                loop {
                    let z = pool[rng.gen_range(0..pool.len())];
                    if *z != target {
                        break z.clone();
                    }
                }
            } else {
                target.clone()
            };
            let attrs = &item_attrs[&target];
            let actor = &attrs[0];
            let director = &attrs[1];
            conversations.push(templated_conversation(
                format!("{user_id}_c{c}"),
                user_id.clone(),
                topic,
                &liked,
                actor,
                director,
                &target,
                &mut rng,
            ));
        }
    }

    SyntheticCorpus { kg, conversations, topic_entities, item_topic, user_topic }
}

#[allow(clippy::too_many_arguments)]
fn templated_conversation(
    conv_id: String,
    user_id: String,
    topic: usize,
    liked: &str,
    actor: &str,
    director: &str,
    target: &str,
    rng: &mut ChaCha8Rng,
) -> Conversation {
    let name = |e: &str| e.replace('_', " ");
    let st = style(topic);
    let opener = ["hi ! i really enjoyed", "hello , recently i watched", "hey , i loved"][rng.gen_range(0..3)];
    let actor_line = ["i like films with", "anything starring", "i am a fan of"][rng.gen_range(0..3)];
    let dir_line = ["maybe something by", "i enjoy the work of", "perhaps a film from"][rng.gen_range(0..3)];
    let utterances = vec![
        Utterance::new(Speaker::Seeker, 0, &format!("{opener} {} .", name(liked))),
        Utterance::new(Speaker::Recommender, 1, st.greet),
        Utterance::new(Speaker::Seeker, 2, &format!("{actor_line} {} .", name(actor))),
        Utterance::new(Speaker::Recommender, 3, st.ask),
        Utterance::new(Speaker::Seeker, 4, &format!("{dir_line} {} .", name(director))),
        Utterance::new(Speaker::Recommender, 5, &st.recommend.replace("{item}", &name(target))),
        Utterance::new(Speaker::Seeker, 6, "thanks , i will check it out ."),
    ];
    let mentions = vec![
        Mention { entity: liked.to_string(), turn: 0, is_item: true },
        Mention { entity: actor.to_string(), turn: 2, is_item: false },
        Mention { entity: director.to_string(), turn: 4, is_item: false },
        Mention { entity: target.to_string(), turn: 5, is_item: true },
    ];
    Conversation {
        conv_id,
        user_id,
        utterances,
        mentions,
        targets: vec![Target { turn: 5, item: target.to_string() }],
    }
}
