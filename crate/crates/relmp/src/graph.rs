//! Knowledge-graph storage: entity/relation dictionaries, triple lists,
//! undirected incidence indexing, degree statistics, and inductive splits.
//!
//! Edges are undirected for incidence, message passing, and path traversal;
//! the relation type is used as-is regardless of traversal direction.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense 0-based entity index.
pub type EntityId = u32;
/// Dense 0-based relation index.
pub type RelationId = u32;
/// Index into the owning graph's triple list.
pub type EdgeId = u32;

/// A single (head, relation, tail) fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }

    /// The endpoint opposite to `v`. For self-loops returns `v` itself.
    pub fn other(&self, v: EntityId) -> EntityId {
        if v == self.head {
            self.tail
        } else {
            self.head
        }
    }
}

/// Bijective name <-> dense id mapping.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Dictionary {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Dictionary {
    pub fn new() -> Self {
        Dictionary::default()
    }

    pub fn from_names(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        Dictionary { names, index }
    }

    /// Rebuild the reverse index (after serde deserialization).
    pub fn rebuild_index(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
    }

    pub fn get_or_insert(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// An immutable multigraph over entities with typed, undirected edges.
///
/// `incident[v]` lists every edge id touching `v`, in ascending edge-id
/// order; a self-loop appears twice so that the degree of `v` counts it
/// twice and `sum_v deg(v) == 2 * n_edges()` holds for every graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub triples: Vec<Triple>,
    pub incident: Vec<Vec<EdgeId>>,
    pub n_entities: usize,
    pub n_relations: usize,
}

impl KnowledgeGraph {
    pub fn new(triples: Vec<Triple>, n_entities: usize, n_relations: usize) -> Self {
        let mut incident = vec![Vec::new(); n_entities];
        for (e, t) in triples.iter().enumerate() {
            incident[t.head as usize].push(e as EdgeId);
            incident[t.tail as usize].push(e as EdgeId);
        }
        KnowledgeGraph {
            triples,
            incident,
            n_entities,
            n_relations,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.triples.len()
    }

    pub fn triple(&self, e: EdgeId) -> &Triple {
        &self.triples[e as usize]
    }

    /// Degree of `v` counting incidence stubs (self-loops count twice).
    pub fn degree(&self, v: EntityId) -> usize {
        self.incident[v as usize].len()
    }

    pub fn incident_edges(&self, v: EntityId) -> &[EdgeId] {
        &self.incident[v as usize]
    }

    /// Exact population mean and variance of the degree sequence.
    pub fn degree_stats(&self) -> DegreeStats {
        assert!(self.n_entities > 0, "degree_stats on empty graph");
        let n = self.n_entities as f64;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for adj in &self.incident {
            let d = adj.len() as f64;
            sum += d;
            sum_sq += d * d;
        }
        let mean = sum / n;
        DegreeStats {
            mean_degree: mean,
            var_degree: sum_sq / n - mean * mean,
            n_nodes: self.n_entities,
            n_edges: self.n_edges(),
        }
    }

    /// Content hash of the graph (triples plus dimensions), hex-encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_entities as u64).to_le_bytes());
        h.update((self.n_relations as u64).to_le_bytes());
        for t in &self.triples {
            h.update(t.head.to_le_bytes());
            h.update(t.relation.to_le_bytes());
            h.update(t.tail.to_le_bytes());
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Population degree statistics of a graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub mean_degree: f64,
    pub var_degree: f64,
    pub n_nodes: usize,
    pub n_edges: usize,
}

impl fmt::Display for DegreeStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "N={} M={} E[d]={:.4} Var[d]={:.4}",
            self.n_nodes, self.n_edges, self.mean_degree, self.var_degree
        )
    }
}

/// A loaded dataset: graph over the training triples plus raw splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: KnowledgeGraph,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub entities: Dictionary,
    pub relations: Dictionary,
    /// Non-fatal observations made while loading (duplicates, unseen relations).
    pub warnings: Vec<String>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        out.push(line.map_err(|e| Error::io(path, e))?);
    }
    Ok(out)
}

fn parse_dict(path: &Path) -> Result<Dictionary> {
    let mut entries: Vec<(u32, String)> = Vec::new();
    for (lineno, line) in read_lines(path)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut it = line.splitn(2, '\t');
        let id_str = it.next().unwrap_or("");
        let name = it.next().ok_or_else(|| Error::MalformedDict {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason: "expected `id<TAB>name`".into(),
        })?;
        let id: u32 = id_str.parse().map_err(|_| Error::MalformedDict {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason: format!("invalid id `{id_str}`"),
        })?;
        entries.push((id, name.to_string()));
    }
    entries.sort_by_key(|(id, _)| *id);
    for (pos, (id, _)) in entries.iter().enumerate() {
        if *id as usize != pos {
            return Err(Error::MalformedDict {
                path: path.to_path_buf(),
                line: 0,
                reason: format!("ids are not contiguous from 0 (missing or duplicate id {pos})"),
            });
        }
    }
    Ok(Dictionary::from_names(
        entries.into_iter().map(|(_, n)| n).collect(),
    ))
}

fn parse_split(path: &Path) -> Result<Vec<[String; 3]>> {
    let mut out = Vec::new();
    for (lineno, line) in read_lines(path)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                fields: fields.len(),
            });
        }
        out.push([
            fields[0].to_string(),
            fields[1].to_string(),
            fields[2].to_string(),
        ]);
    }
    Ok(out)
}

/// Load `train.txt`, `valid.txt`, `test.txt` (tab-separated name triples)
/// from `dir`, plus optional `entities.dict` / `relations.dict`.
///
/// Dictionaries cover the union of all three splits so evaluation triples can
/// reference entities absent from training. The graph is built from the
/// training triples only; duplicate triples within a split are dropped with a
/// warning.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut warnings = Vec::new();

    let raw_train = parse_split(&dir.join("train.txt"))?;
    if raw_train.is_empty() {
        return Err(Error::EmptyTrainingSet(dir.to_path_buf()));
    }
    let raw_valid = parse_split(&dir.join("valid.txt")).unwrap_or_default();
    let raw_test = parse_split(&dir.join("test.txt")).unwrap_or_default();

    let ent_dict_path = dir.join("entities.dict");
    let rel_dict_path = dir.join("relations.dict");
    let mut entities = if ent_dict_path.exists() {
        parse_dict(&ent_dict_path)?
    } else {
        Dictionary::new()
    };
    let mut relations = if rel_dict_path.exists() {
        parse_dict(&rel_dict_path)?
    } else {
        Dictionary::new()
    };

    let mut resolve = |raw: &[[String; 3]]| -> Vec<Triple> {
        raw.iter()
            .map(|[h, r, t]| {
                Triple::new(
                    entities.get_or_insert(h),
                    relations.get_or_insert(r),
                    entities.get_or_insert(t),
                )
            })
            .collect()
    };
    let train_all = resolve(&raw_train);
    let valid = resolve(&raw_valid);
    let test = resolve(&raw_test);

    // Deduplicate the training split: duplicate edges would double-count
    // messages during aggregation.
    let mut seen = HashSet::with_capacity(train_all.len());
    let mut train = Vec::with_capacity(train_all.len());
    for t in train_all {
        if seen.insert(t) {
            train.push(t);
        }
    }
    if seen.len() != raw_train.len() {
        warnings.push(format!(
            "dropped {} duplicate training triples",
            raw_train.len() - seen.len()
        ));
    }

    let train_rels: HashSet<RelationId> = train.iter().map(|t| t.relation).collect();
    for (name, split) in [("valid", &valid), ("test", &test)] {
        let unseen: HashSet<RelationId> = split
            .iter()
            .map(|t| t.relation)
            .filter(|r| !train_rels.contains(r))
            .collect();
        if !unseen.is_empty() {
            let mut names: Vec<&str> = unseen.iter().map(|&r| relations.name(r)).collect();
            names.sort_unstable();
            warnings.push(format!(
                "{name} split contains {} relation(s) absent from train (never predictable): {}",
                unseen.len(),
                names.join(", ")
            ));
        }
    }

    let graph = KnowledgeGraph::new(train.clone(), entities.len(), relations.len());
    Ok(Dataset {
        graph,
        train,
        valid,
        test,
        entities,
        relations,
        warnings,
    })
}

/// On-disk form of an inductive split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub ratio: f64,
    pub seed: u64,
    pub removed_entity_ids: Vec<EntityId>,
}

/// An inductive evaluation split: entities sampled from the test set have all
/// their training edges removed from `train_graph`; `eval_graph` restores them.
#[derive(Debug, Clone)]
pub struct InductiveSplit {
    pub removed_entities: HashSet<EntityId>,
    pub train_graph: KnowledgeGraph,
    pub eval_graph: KnowledgeGraph,
    pub ratio: f64,
    pub seed: u64,
}

impl InductiveSplit {
    pub fn manifest(&self) -> SplitManifest {
        let mut ids: Vec<EntityId> = self.removed_entities.iter().copied().collect();
        ids.sort_unstable();
        SplitManifest {
            ratio: self.ratio,
            seed: self.seed,
            removed_entity_ids: ids,
        }
    }
}

/// Sample `floor(ratio * |test entities|)` entities appearing in `test_triples`
/// and remove their incident edges from the training graph. `eval_graph` is
/// the unmodified input graph. Sampling takes a seeded permutation prefix, so
/// for a fixed seed the removed set at ratio `r` is a subset of the set at any
/// `r' >= r`.
pub fn make_inductive_split(
    graph: &KnowledgeGraph,
    test_triples: &[Triple],
    ratio: f64,
    seed: u64,
) -> InductiveSplit {
    assert!((0.0..=1.0).contains(&ratio), "ratio must be in [0, 1]");
    let mut test_entities: Vec<EntityId> = test_triples
        .iter()
        .flat_map(|t| [t.head, t.tail])
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    test_entities.sort_unstable();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    test_entities.shuffle(&mut rng);
    let k = (ratio * test_entities.len() as f64).floor() as usize;
    let removed: HashSet<EntityId> = test_entities.into_iter().take(k).collect();

    let kept: Vec<Triple> = graph
        .triples
        .iter()
        .filter(|t| !removed.contains(&t.head) && !removed.contains(&t.tail))
        .copied()
        .collect();
    let train_graph = KnowledgeGraph::new(kept, graph.n_entities, graph.n_relations);

    InductiveSplit {
        removed_entities: removed,
        train_graph,
        eval_graph: graph.clone(),
        ratio,
        seed,
    }
}

/// Write a split of triples back to a TSV file using dictionary names.
pub fn write_split(
    path: &Path,
    triples: &[Triple],
    entities: &Dictionary,
    relations: &Dictionary,
) -> Result<()> {
    let mut out = String::new();
    for t in triples {
        out.push_str(entities.name(t.head));
        out.push('\t');
        out.push_str(relations.name(t.relation));
        out.push('\t');
        out.push_str(entities.name(t.tail));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write a full dataset directory (train/valid/test plus dictionaries).
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_split(&dir.join("train.txt"), &ds.train, &ds.entities, &ds.relations)?;
    write_split(&dir.join("valid.txt"), &ds.valid, &ds.entities, &ds.relations)?;
    write_split(&dir.join("test.txt"), &ds.test, &ds.entities, &ds.relations)?;
    let mut ents = String::new();
    for (i, n) in ds.entities.names().iter().enumerate() {
        ents.push_str(&format!("{i}\t{n}\n"));
    }
    fs::write(dir.join("entities.dict"), ents).map_err(|e| Error::io(dir, e))?;
    let mut rels = String::new();
    for (i, n) in ds.relations.names().iter().enumerate() {
        rels.push_str(&format!("{i}\t{n}\n"));
    }
    fs::write(dir.join("relations.dict"), rels).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Resolve a dataset argument: an existing path is used as-is, otherwise the
/// name is looked up under `root` (typically from an env var or `./data`).
pub fn resolve_dataset_dir(arg: &str, root: Option<&str>) -> PathBuf {
    let p = PathBuf::from(arg);
    if p.join("train.txt").exists() {
        return p;
    }
    if let Some(root) = root {
        let candidate = Path::new(root).join(arg);
        if candidate.join("train.txt").exists() {
            return candidate;
        }
    }
    p
}
