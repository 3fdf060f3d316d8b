//! Typed knowledge graph with item flags and the edge list consumed by the
//! entity encoder.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::BufRead;

use crate::error::{CcrsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// Entities and relations are kept in lexicographic order so that ids do
/// not depend on the order triples were read in.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    item_flags: Vec<bool>,
}

/// Directed message edges `source → target` with relation slots:
/// `r` for original triples (tail → head), `R + r` for the inverse direction
/// (head → tail) and `2R` for self loops.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    pub targets: Vec<usize>,
    pub sources: Vec<usize>,
    pub relations: Vec<usize>,
    pub n_entities: usize,
    pub n_relation_slots: usize,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Edge indices grouped by relation slot.
    pub fn by_relation(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_relation_slots];
        for (e, &r) in self.relations.iter().enumerate() {
            groups[r].push(e);
        }
        groups
    }

    /// `(source, relation)` pairs whose messages reach `target`.
    pub fn neighbors(&self, target: usize) -> Vec<(usize, usize)> {
        self.targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == target)
            .map(|(e, _)| (self.sources[e], self.relations[e]))
            .collect()
    }
}

impl KnowledgeGraph {
    /// Builds a graph from string triples. Duplicates are dropped.
    pub fn from_triples<S: AsRef<str>>(
        triples: &[(S, S, S)],
        items: &[S],
    ) -> Result<Self> {
        let mut ent: BTreeSet<&str> = BTreeSet::new();
        let mut rel: BTreeSet<&str> = BTreeSet::new();
        for (h, r, t) in triples {
            ent.insert(h.as_ref());
            ent.insert(t.as_ref());
            rel.insert(r.as_ref());
        }
        let entities: Vec<String> = ent.into_iter().map(str::to_string).collect();
        let relations: Vec<String> = rel.into_iter().map(str::to_string).collect();
        let entity_index: HashMap<_, _> =
            entities.iter().enumerate().map(|(i, e)| (e.clone(), EntityId(i))).collect();
        let relation_index: HashMap<_, _> =
            relations.iter().enumerate().map(|(i, r)| (r.clone(), RelationId(i))).collect();

        let mut set = BTreeSet::new();
        for (h, r, t) in triples {
            set.insert(Triple {
                head: entity_index[h.as_ref()],
                relation: relation_index[r.as_ref()],
                tail: entity_index[t.as_ref()],
            });
        }

        let mut item_flags = vec![false; entities.len()];
        for item in items {
            let id = entity_index
                .get(item.as_ref())
                .ok_or_else(|| CcrsError::UnknownEntity(item.as_ref().to_string()))?;
            item_flags[id.0] = true;
        }

        Ok(Self {
            entities,
            entity_index,
            relations,
            relation_index,
            triples: set.into_iter().collect(),
            item_flags,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id.0]
    }

    pub fn is_item(&self, id: EntityId) -> bool {
        self.item_flags[id.0]
    }

    pub fn item_flags(&self) -> &[bool] {
        &self.item_flags
    }

    /// Item entities in id order.
    pub fn items(&self) -> Vec<EntityId> {
        (0..self.entities.len()).filter(|&i| self.item_flags[i]).map(EntityId).collect()
    }

    /// String triples, in sorted order.
    pub fn named_triples(&self) -> Vec<(String, String, String)> {
        self.triples
            .iter()
            .map(|t| {
                (
                    self.entities[t.head.0].clone(),
                    self.relations[t.relation.0].clone(),
                    self.entities[t.tail.0].clone(),
                )
            })
            .collect()
    }

    /// Number of relation slots after adding inverse relations and `self`.
    pub fn n_relation_slots(&self) -> usize {
        2 * self.relations.len() + 1
    }

    /// Name of every relation slot, matching [`EdgeList`] numbering.
    pub fn relation_slot_names(&self) -> Vec<String> {
        let mut names = self.relations.clone();
        names.extend(self.relations.iter().map(|r| format!("{r}^-1")));
        names.push("self".to_string());
        names
    }

    /// Message edges including inverse edges and one self loop per entity, so
    /// every entity has at least one incoming edge.
    pub fn edge_list(&self) -> EdgeList {
        let r = self.relations.len();
        let mut edges: Vec<(usize, usize, usize)> = Vec::with_capacity(2 * self.triples.len() + self.n_entities());
        for t in &self.triples {
            edges.push((t.head.0, t.relation.0, t.tail.0));
            edges.push((t.tail.0, r + t.relation.0, t.head.0));
        }
        for e in 0..self.n_entities() {
            edges.push((e, 2 * r, e));
        }
        edges.sort_unstable();
        edges.dedup();
        EdgeList {
            targets: edges.iter().map(|e| e.0).collect(),
            relations: edges.iter().map(|e| e.1).collect(),
            sources: edges.iter().map(|e| e.2).collect(),
            n_entities: self.n_entities(),
            n_relation_slots: self.n_relation_slots(),
        }
    }

    /// Undirected neighbor sets over the original triples.
    pub fn undirected_neighbors(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.n_entities()];
        for t in &self.triples {
            adj[t.head.0].insert(t.tail.0);
            adj[t.tail.0].insert(t.head.0);
        }
        adj
    }

    /// Entities within `hops` undirected edges of `from`.
    pub fn reachable(&self, from: &[EntityId], hops: Option<usize>) -> BTreeSet<EntityId> {
        let adj = self.undirected_neighbors();
        let mut dist: BTreeMap<usize, usize> = BTreeMap::new();
        let mut queue = VecDeque::new();
        for s in from {
            if dist.insert(s.0, 0).is_none() {
                queue.push_back(s.0);
            }
        }
        while let Some(v) = queue.pop_front() {
            let dv = dist[&v];
            if hops.is_some_and(|h| dv >= h) {
                continue;
            }
            for &w in &adj[v] {
                if let std::collections::btree_map::Entry::Vacant(slot) = dist.entry(w) {
                    slot.insert(dv + 1);
                    queue.push_back(w);
                }
            }
        }
        dist.into_keys().map(EntityId).collect()
    }

    /// Induced subgraph on every entity within `hops` undirected edges of a
    /// seed. Isolated seeds are kept.
    pub fn extract_subgraph(&self, seeds: &[String], hops: usize) -> Result<KnowledgeGraph> {
        let mut seed_ids = Vec::with_capacity(seeds.len());
        for s in seeds {
            seed_ids.push(self.entity_id(s).ok_or_else(|| CcrsError::UnknownEntity(s.clone()))?);
        }
        let keep = self.reachable(&seed_ids, Some(hops));
        let mut sub = Self::induced(self, &keep);
        // Seeds without any retained triple still belong to the subgraph.
        for s in &seed_ids {
            let name = self.entity_name(*s);
            if sub.entity_id(name).is_none() {
                sub.insert_isolated(name, self.is_item(*s));
            }
        }
        Ok(sub)
    }

    fn induced(&self, keep: &BTreeSet<EntityId>) -> KnowledgeGraph {
        let triples: Vec<(String, String, String)> = self
            .triples
            .iter()
            .filter(|t| keep.contains(&t.head) && keep.contains(&t.tail))
            .map(|t| {
                (
                    self.entities[t.head.0].clone(),
                    self.relations[t.relation.0].clone(),
                    self.entities[t.tail.0].clone(),
                )
            })
            .collect();
        let items: Vec<String> = keep
            .iter()
            .filter(|e| self.is_item(**e))
            .filter(|e| triples.iter().any(|(h, _, t)| h == self.entity_name(**e) || t == self.entity_name(**e)))
            .map(|e| self.entities[e.0].clone())
            .collect();
        KnowledgeGraph::from_triples(&triples, &items).expect("items drawn from the triples")
    }

    fn insert_isolated(&mut self, name: &str, is_item: bool) {
        let triples = self.named_triples();
        let mut entities: BTreeSet<String> = self.entities.iter().cloned().collect();
        entities.insert(name.to_string());
        let entities: Vec<String> = entities.into_iter().collect();
        let entity_index: HashMap<_, _> =
            entities.iter().enumerate().map(|(i, e)| (e.clone(), EntityId(i))).collect();
        let mut flags = vec![false; entities.len()];
        for (i, e) in self.entities.iter().enumerate() {
            flags[entity_index[e].0] = self.item_flags[i];
        }
        flags[entity_index[name].0] = is_item;
        self.triples = triples
            .iter()
            .map(|(h, r, t)| Triple {
                head: entity_index[h],
                relation: self.relation_index[r],
                tail: entity_index[t],
            })
            .collect();
        self.triples.sort_unstable();
        self.entities = entities;
        self.entity_index = entity_index;
        self.item_flags = flags;
    }
}

/// Parses `head \t relation \t tail` lines and an optional list of item ids.
pub fn load_kg<R: BufRead>(triples: R, items: Option<R>, source_name: &str) -> Result<KnowledgeGraph> {
    let mut parsed = Vec::new();
    for (n, line) in triples.lines().enumerate() {
        let line = line.map_err(|e| CcrsError::io(source_name, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        // whitespace-separated fallback for hand-written fixtures
        let fields: Vec<&str> = if fields.len() == 1 { trimmed.split_whitespace().collect() } else { fields };
        if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(CcrsError::Parse {
                path: source_name.to_string(),
                line: n + 1,
                msg: format!("expected `head<TAB>relation<TAB>tail`, found {} field(s)", fields.len()),
            });
        }
        parsed.push((fields[0].trim().to_string(), fields[1].trim().to_string(), fields[2].trim().to_string()));
    }
    if parsed.is_empty() {
        return Err(CcrsError::EmptyInput(source_name.to_string()));
    }
    let mut item_ids = Vec::new();
    if let Some(items) = items {
        for line in items.lines() {
            let line = line.map_err(|e| CcrsError::io(source_name, e))?;
            let id = line.trim();
            if !id.is_empty() {
                item_ids.push(id.to_string());
            }
        }
    }
    KnowledgeGraph::from_triples(&parsed, &item_ids)
}

/// Serializes triples in the TSV layout read by [`load_kg`].
pub fn write_kg_tsv(kg: &KnowledgeGraph) -> String {
    let mut out = String::new();
    for (h, r, t) in kg.named_triples() {
        out.push_str(&format!("{h}\t{r}\t{t}\n"));
    }
    out
}

pub fn write_items(kg: &KnowledgeGraph) -> String {
    kg.items().into_iter().map(|e| format!("{}\n", kg.entity_name(e))).collect()
}

/// Human-readable name for an entity id: last path segment, underscores
/// turned into spaces, angle brackets dropped.
pub fn display_name(entity: &str) -> String {
    let trimmed = entity.trim_matches(|c| c == '<' || c == '>');
    let last = trimmed.rsplit('/').next().unwrap_or(trimmed);
    last.replace('_', " ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kg(lines: &str) -> Result<KnowledgeGraph> {
        load_kg(lines.as_bytes(), None, "test.tsv")
    }

    #[test]
    fn minimal_graph() {
        let g = kg("A\tr\tB\n").unwrap();
        assert_eq!((g.n_entities(), g.n_relations(), g.triples().len()), (2, 1, 1));
    }

    #[test]
    fn duplicate_lines_collapse() {
        let g = kg("A\tr\tB\nA\tr\tB\n").unwrap();
        assert_eq!(g.triples().len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match kg("A\tr\n") {
            Err(CcrsError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        match kg("A\tr\tB\nC\tD\n") {
            Err(CcrsError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(kg(""), Err(CcrsError::EmptyInput(_))));
    }

    #[test]
    fn unknown_item_marker_is_rejected() {
        let err = load_kg("A\tr\tB\n".as_bytes(), Some("Z\n".as_bytes()), "t").unwrap_err();
        assert!(matches!(err, CcrsError::UnknownEntity(ref e) if e == "Z"));
    }

    #[test]
    fn every_entity_has_incoming_edge() {
        let g = kg("A\tr\tB\nC\ts\tB\n").unwrap();
        let edges = g.edge_list();
        for e in 0..g.n_entities() {
            assert!(edges.targets.contains(&e));
            assert!(edges.neighbors(e).contains(&(e, g.n_relation_slots() - 1)));
        }
    }

    #[test]
    fn neighbor_direction_uses_inverse_slots() {
        let g = kg("A\tr\tB\n").unwrap();
        let a = g.entity_id("A").unwrap().0;
        let b = g.entity_id("B").unwrap().0;
        let e = g.edge_list();
        assert!(e.neighbors(a).contains(&(b, 0)));
        assert!(e.neighbors(b).contains(&(a, 1)));
        assert_eq!(g.relation_slot_names(), vec!["r", "r^-1", "self"]);
    }

    #[test]
    fn subgraph_zero_hops() {
        let g = kg("A\tr\tB\nB\tr\tC\nA\ts\tC\n").unwrap();
        let sub = g.extract_subgraph(&["A".into(), "C".into()], 0).unwrap();
        assert_eq!(sub.entities(), &["A", "C"]);
        assert_eq!(sub.named_triples(), vec![("A".into(), "s".into(), "C".into())]);
    }

    #[test]
    fn subgraph_chain_one_hop() {
        let g = kg("A\tr\tB\nB\tr\tC\n").unwrap();
        let sub = g.extract_subgraph(&["A".into()], 1).unwrap();
        assert_eq!(sub.entities(), &["A", "B"]);
    }

    #[test]
    fn subgraph_of_all_entities_is_identity() {
        let g = load_kg("A\tr\tB\nB\tq\tC\nD\tr\tA\n".as_bytes(), Some("B\nD\n".as_bytes()), "t").unwrap();
        let sub = g.extract_subgraph(g.entities(), 0).unwrap();
        assert_eq!(sub, g);
    }

    #[test]
    fn subgraph_unknown_seed() {
        let g = kg("A\tr\tB\n").unwrap();
        assert!(matches!(g.extract_subgraph(&["Q".into()], 1), Err(CcrsError::UnknownEntity(e)) if e == "Q"));
    }

    #[test]
    fn isolated_seed_survives() {
        let g = kg("A\tr\tB\nC\tr\tD\n").unwrap();
        let sub = g.extract_subgraph(&["A".into(), "C".into()], 0).unwrap();
        assert_eq!(sub.entities(), &["A", "C"]);
        assert!(sub.triples().is_empty());
    }

    #[test]
    fn display_names() {
        assert_eq!(display_name("<http://dbpedia.org/resource/The_Ring>"), "The Ring");
        assert_eq!(display_name("Midnight_Harbor"), "Midnight Harbor");
    }
}
