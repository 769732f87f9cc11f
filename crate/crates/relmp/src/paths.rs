//! Loop-free relational path enumeration between entity pairs, the path
//! vocabulary built from training pairs, and the on-disk enumeration cache.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{EdgeId, EntityId, KnowledgeGraph, RelationId};

/// A relational path: the relation types along a raw path whose entities are
/// pairwise distinct. Ordered head-to-tail.
pub type RelationalPath = Vec<RelationId>;

/// Exhaustive depth-bounded enumeration of relational paths from `h` to `t`.
///
/// Traversal is undirected, skips `masked_edge`, and never revisits an
/// entity; `t` only ever appears as the terminal node. Two raw paths with the
/// same relation sequence yield two entries, and the output order is
/// deterministic (DFS over incident lists in ascending edge-id order, i.e.
/// lexicographic by edge-id sequence).
pub fn enumerate_paths(
    graph: &KnowledgeGraph,
    h: EntityId,
    t: EntityId,
    l_max: usize,
    masked_edge: Option<EdgeId>,
) -> Vec<RelationalPath> {
    assert!(l_max >= 1, "l_max must be at least 1");
    let mut out = Vec::new();
    if h == t {
        // every candidate raw path would repeat the endpoint entity
        return out;
    }
    // Distance-to-target lower bounds let the search cut any branch that
    // cannot reach `t` within the remaining budget; the output is unchanged
    // but work stays proportional to feasible prefixes instead of all simple
    // paths around `h`.
    let dist_t = bounded_bfs(graph, t, l_max.saturating_sub(1), masked_edge);
    let mut visited: Vec<EntityId> = vec![h];
    let mut rels: Vec<RelationId> = Vec::new();
    dfs(
        graph,
        h,
        t,
        l_max,
        masked_edge,
        &dist_t,
        &mut visited,
        &mut rels,
        &mut out,
    );
    out
}

/// BFS distances from `src` up to `max_depth` (u8::MAX beyond), skipping the
/// masked edge.
fn bounded_bfs(
    graph: &KnowledgeGraph,
    src: EntityId,
    max_depth: usize,
    masked_edge: Option<EdgeId>,
) -> Vec<u8> {
    let mut dist = vec![u8::MAX; graph.n_entities];
    dist[src as usize] = 0;
    let mut frontier = vec![src];
    for depth in 1..=max_depth.min(u8::MAX as usize - 1) {
        let mut next = Vec::new();
        for &v in &frontier {
            for &e in graph.incident_edges(v) {
                if Some(e) == masked_edge {
                    continue;
                }
                let u = graph.triple(e).other(v);
                if dist[u as usize] == u8::MAX {
                    dist[u as usize] = depth as u8;
                    next.push(u);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    dist
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    graph: &KnowledgeGraph,
    v: EntityId,
    t: EntityId,
    l_max: usize,
    masked_edge: Option<EdgeId>,
    dist_t: &[u8],
    visited: &mut Vec<EntityId>,
    rels: &mut Vec<RelationId>,
    out: &mut Vec<RelationalPath>,
) {
    for &e in graph.incident_edges(v) {
        if Some(e) == masked_edge {
            continue;
        }
        let triple = graph.triple(e);
        let u = triple.other(v);
        if u == t {
            rels.push(triple.relation);
            out.push(rels.clone());
            rels.pop();
            continue;
        }
        let used = rels.len() + 1;
        if used < l_max
            && dist_t[u as usize] as usize <= l_max - used
            && !visited.contains(&u)
        {
            visited.push(u);
            rels.push(triple.relation);
            dfs(graph, u, t, l_max, masked_edge, dist_t, visited, rels, out);
            rels.pop();
            visited.pop();
        }
    }
}

/// Enumerate paths for every training edge with the edge itself masked,
/// in edge-id order. Parallel over edges; output order is independent of
/// the worker count.
pub fn enumerate_training_paths(
    graph: &KnowledgeGraph,
    l_max: usize,
) -> Vec<Vec<RelationalPath>> {
    graph
        .triples
        .par_iter()
        .enumerate()
        .map(|(e, t)| enumerate_paths(graph, t.head, t.tail, l_max, Some(e as EdgeId)))
        .collect()
}

/// Dense ids for the relational paths observed between training pairs, plus a
/// reserved out-of-vocabulary id for anything unseen.
#[derive(Debug, Clone, Default)]
pub struct PathVocabulary {
    /// Paths in id order (lexicographic by relation ids).
    paths: Vec<RelationalPath>,
    index: HashMap<RelationalPath, u32>,
}

impl PathVocabulary {
    /// Build from per-pair path lists; ids are assigned in lexicographic
    /// order, so the result is independent of enumeration order.
    pub fn from_path_lists(lists: &[Vec<RelationalPath>]) -> Self {
        let set: BTreeSet<&RelationalPath> = lists.iter().flatten().collect();
        Self::from_sorted(set.into_iter().cloned().collect())
    }

    pub fn from_sorted(paths: Vec<RelationalPath>) -> Self {
        let index = paths
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        PathVocabulary { paths, index }
    }

    /// Number of known paths (the OOV slot is extra).
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn oov_id(&self) -> u32 {
        self.paths.len() as u32
    }

    /// Dense id of `path`, or the OOV id when unseen.
    pub fn lookup(&self, path: &[RelationId]) -> u32 {
        self.index.get(path).copied().unwrap_or_else(|| self.oov_id())
    }

    pub fn path(&self, id: u32) -> &RelationalPath {
        &self.paths[id as usize]
    }

    pub fn paths(&self) -> &[RelationalPath] {
        &self.paths
    }
}

/// Build the vocabulary by enumerating all training pairs with their query
/// edges masked.
pub fn build_vocabulary(graph: &KnowledgeGraph, l_max: usize) -> PathVocabulary {
    PathVocabulary::from_path_lists(&enumerate_training_paths(graph, l_max))
}

const CACHE_MAGIC: &[u8; 4] = b"RMPC";
const CACHE_VERSION: u32 = 1;

/// Write per-edge path lists to the versioned binary cache.
///
/// Layout: magic, version, l_max (u32 LE), 32-byte dataset hash, record count
/// (u64 LE), then per record a path count (u32) and per path a length (u8)
/// followed by relation ids (u32 LE).
pub fn write_path_cache(
    path: &Path,
    dataset_hash: &str,
    l_max: usize,
    records: &[Vec<RelationalPath>],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(l_max as u32).to_le_bytes());
    buf.extend_from_slice(&decode_hash(dataset_hash)?);
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for rec in records {
        buf.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        for p in rec {
            debug_assert!(p.len() <= u8::MAX as usize);
            buf.push(p.len() as u8);
            for &r in p {
                buf.extend_from_slice(&r.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a path cache, verifying magic, version, `l_max`, and dataset hash.
pub fn read_path_cache(
    path: &Path,
    dataset_hash: &str,
    l_max: usize,
) -> Result<Vec<Vec<RelationalPath>>> {
    let mut data = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { data: &data, pos: 0 };

    if cur.take(4)? != &CACHE_MAGIC[..] {
        return Err(Error::PathCache(format!("{}: bad magic", path.display())));
    }
    let version = cur.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::PathCache(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let cached_l = cur.u32()? as usize;
    if cached_l != l_max {
        return Err(Error::PathCache(format!(
            "{}: cache built for l_max={cached_l}, requested {l_max}",
            path.display()
        )));
    }
    let hash = cur.take(32)?.to_vec();
    if hash != decode_hash(dataset_hash)? {
        return Err(Error::PathCache(format!(
            "{}: dataset hash mismatch",
            path.display()
        )));
    }
    let n_records = cur.u64()? as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let n_paths = cur.u32()? as usize;
        let mut rec = Vec::with_capacity(n_paths);
        for _ in 0..n_paths {
            let len = cur.u8()? as usize;
            let mut p = Vec::with_capacity(len);
            for _ in 0..len {
                p.push(cur.u32()?);
            }
            rec.push(p);
        }
        records.push(rec);
    }
    Ok(records)
}

fn decode_hash(hex: &str) -> Result<Vec<u8>> {
    if hex.len() != 64 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(Error::PathCache(format!("invalid dataset hash `{hex}`")));
    }
    Ok((0..32)
        .map(|i| u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).unwrap())
        .collect())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::PathCache("truncated cache file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Triple;

    /// h -r1- a -r2- t plus a direct h -r3- t edge.
    fn two_route_graph() -> KnowledgeGraph {
        KnowledgeGraph::new(
            vec![
                Triple::new(0, 0, 1), // h -r1- a
                Triple::new(1, 1, 2), // a -r2- t
                Triple::new(0, 2, 2), // h -r3- t
            ],
            3,
            3,
        )
    }

    #[test]
    fn masking_direct_edge_leaves_two_hop_path() {
        let g = two_route_graph();
        let paths = enumerate_paths(&g, 0, 2, 2, Some(2));
        assert_eq!(paths, vec![vec![0, 1]]);
    }

    #[test]
    fn unmasked_enumeration_finds_both_routes() {
        let g = two_route_graph();
        let paths = enumerate_paths(&g, 0, 2, 2, None);
        assert_eq!(paths, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn disconnected_pair_yields_no_paths() {
        let g = KnowledgeGraph::new(vec![Triple::new(0, 0, 1)], 4, 1);
        assert!(enumerate_paths(&g, 0, 3, 4, None).is_empty());
    }

    #[test]
    fn paths_are_length_bounded_and_loop_free() {
        // square 0-1-2-3-0: between opposite corners only 2-hop routes exist
        let g = KnowledgeGraph::new(
            vec![
                Triple::new(0, 0, 1),
                Triple::new(1, 1, 2),
                Triple::new(2, 2, 3),
                Triple::new(3, 3, 0),
            ],
            4,
            4,
        );
        assert!(enumerate_paths(&g, 0, 2, 1, None).is_empty());
        let p2 = enumerate_paths(&g, 0, 2, 2, None);
        assert_eq!(p2, vec![vec![0, 1], vec![3, 2]]);
        // larger bound keeps the same set (longer routes would revisit nodes)
        let p4 = enumerate_paths(&g, 0, 2, 4, None);
        assert_eq!(p4, p2);
    }

    #[test]
    fn growing_l_max_preserves_shorter_paths() {
        let g = two_route_graph();
        let p1 = enumerate_paths(&g, 0, 2, 1, None);
        let p2 = enumerate_paths(&g, 0, 2, 2, None);
        for p in &p1 {
            assert!(p2.contains(p));
        }
    }

    #[test]
    fn duplicate_relation_sequences_are_kept() {
        // two parallel edges of the same relation between h and t
        let g = KnowledgeGraph::new(
            vec![Triple::new(0, 0, 1), Triple::new(0, 0, 1)],
            2,
            1,
        );
        let paths = enumerate_paths(&g, 0, 1, 2, None);
        assert_eq!(paths, vec![vec![0], vec![0]]);
    }

    #[test]
    fn self_loop_pair_has_no_paths() {
        let g = KnowledgeGraph::new(vec![Triple::new(0, 0, 0), Triple::new(0, 0, 1)], 2, 1);
        assert!(enumerate_paths(&g, 0, 0, 4, None).is_empty());
    }

    #[test]
    fn vocabulary_is_sorted_and_deterministic() {
        let g = two_route_graph();
        let vocab = build_vocabulary(&g, 2);
        // each training edge masked: edge 2 sees (r1, r2); edges 0 and 1 see
        // paths h->a and a->t routed through the direct edge
        assert!(vocab.len() >= 1);
        let paths = vocab.paths().to_vec();
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
        assert_eq!(vocab.lookup(&[9, 9]), vocab.oov_id());
        for (i, p) in vocab.paths().iter().enumerate() {
            assert_eq!(vocab.lookup(p), i as u32);
        }
    }

    #[test]
    fn empty_vocabulary_still_has_oov() {
        let g = KnowledgeGraph::new(vec![Triple::new(0, 0, 1)], 2, 1);
        let vocab = build_vocabulary(&g, 4);
        assert_eq!(vocab.len(), 0);
        assert_eq!(vocab.lookup(&[0]), 0);
    }

    #[test]
    fn cache_roundtrip_and_validation() {
        let g = two_route_graph();
        let records = enumerate_training_paths(&g, 2);
        let hash = g.content_hash();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("paths.bin");
        write_path_cache(&file, &hash, 2, &records).unwrap();
        let back = read_path_cache(&file, &hash, 2).unwrap();
        assert_eq!(back, records);
        // wrong l_max rejected
        assert!(read_path_cache(&file, &hash, 3).is_err());
        // wrong hash rejected
        let other = "0".repeat(64);
        assert!(read_path_cache(&file, &other, 2).is_err());
    }
}
