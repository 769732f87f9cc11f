//! Seeded synthetic fixtures: a small typed knowledge graph with planted
//! compositional rules (so both branches have real signal to learn) and
//! random-graph generators for the cost-counter checks.
//!
//! The rule KG schema uses four entity types A, B, C, D and eight relations:
//!
//! | id | name          | placement                                  |
//! |----|---------------|--------------------------------------------|
//! | 0  | part_of       | A -> B, random                             |
//! | 1  | located_in    | B -> C, random                             |
//! | 2  | regional_part | composed: part_of then located_in          |
//! | 3  | supplies      | C -> D, random                             |
//! | 4  | ships_to      | composed: located_in then supplies         |
//! | 5  | linked_with   | D -> D, transitively closed (depth 2)      |
//! | 6  | audits        | A -> D, random                             |
//! | 7  | managed_by    | B -> A, random                             |
//!
//! A trained model should read `regional_part` off the (part_of, located_in)
//! path and discover that `linked_with` composes with itself.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Dataset, Dictionary, KnowledgeGraph, Triple};

pub const REL_NAMES: [&str; 8] = [
    "part_of",
    "located_in",
    "regional_part",
    "supplies",
    "ships_to",
    "linked_with",
    "audits",
    "managed_by",
];

/// Relation id of the planted transitive relation (`linked_with`).
pub const TRANSITIVE_REL: u32 = 5;
/// Relation id composed from (part_of, located_in).
pub const COMPOSED_REL: u32 = 2;

/// Generate a rule KG with `n_per_type` entities per type. Splits are
/// stratified per relation (roughly 80/10/10) so every relation appears in
/// training. Fully deterministic in `seed`.
pub fn rule_kg(n_per_type: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_type;
    let base = |t: usize| (t * n) as u32;
    // entity ids: A = 0..n, B = n..2n, C = 2n..3n, D = 3n..4n
    let pick = |rng: &mut ChaCha8Rng, t: usize| base(t) + rng.gen_range(0..n) as u32;

    let mut triples: Vec<Triple> = Vec::new();
    let mut seen: HashSet<Triple> = HashSet::new();
    let push = |t: Triple, triples: &mut Vec<Triple>, seen: &mut HashSet<Triple>| {
        if t.head != t.tail && seen.insert(t) {
            triples.push(t);
        }
    };

    let mut r0: Vec<(u32, u32)> = Vec::new();
    let mut r1: Vec<(u32, u32)> = Vec::new();
    let mut r3: Vec<(u32, u32)> = Vec::new();
    for a in 0..n as u32 {
        for _ in 0..2 {
            let b = pick(&mut rng, 1);
            r0.push((a, b));
            push(Triple::new(a, 0, b), &mut triples, &mut seen);
        }
        push(Triple::new(a, 6, pick(&mut rng, 3)), &mut triples, &mut seen);
    }
    for b in base(1)..base(2) {
        for _ in 0..2 {
            let c = pick(&mut rng, 2);
            r1.push((b, c));
            push(Triple::new(b, 1, c), &mut triples, &mut seen);
        }
        push(Triple::new(b, 7, pick(&mut rng, 0)), &mut triples, &mut seen);
    }
    for c in base(2)..base(3) {
        for _ in 0..2 {
            let d = pick(&mut rng, 3);
            r3.push((c, d));
            push(Triple::new(c, 3, d), &mut triples, &mut seen);
        }
    }

    // composed relations
    for &(a, b) in &r0 {
        for &(b2, c) in &r1 {
            if b == b2 && rng.gen_bool(0.7) {
                push(Triple::new(a, COMPOSED_REL, c), &mut triples, &mut seen);
            }
        }
    }
    for &(b, c) in &r1 {
        for &(c2, d) in &r3 {
            if c == c2 && rng.gen_bool(0.7) {
                push(Triple::new(b, 4, d), &mut triples, &mut seen);
            }
        }
    }

    // transitive relation on D
    let mut r5: Vec<(u32, u32)> = Vec::new();
    for d in base(3)..base(3) + n as u32 {
        let mut d2 = pick(&mut rng, 3);
        if d2 == d {
            d2 = base(3) + ((d - base(3) + 1) % n as u32);
        }
        r5.push((d, d2));
        push(Triple::new(d, TRANSITIVE_REL, d2), &mut triples, &mut seen);
    }
    let closure: Vec<(u32, u32)> = r5
        .iter()
        .flat_map(|&(x, y)| {
            r5.iter()
                .filter(move |&&(y2, z)| y == y2 && x != z)
                .map(move |&(_, z)| (x, z))
        })
        .collect();
    for (x, z) in closure {
        if rng.gen_bool(0.6) {
            push(Triple::new(x, TRANSITIVE_REL, z), &mut triples, &mut seen);
        }
    }

    // stratified 80/10/10 split per relation
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for r in 0..REL_NAMES.len() as u32 {
        let mut of_rel: Vec<Triple> = triples.iter().filter(|t| t.relation == r).copied().collect();
        of_rel.shuffle(&mut rng);
        let n_eval = of_rel.len() / 5;
        let n_valid = n_eval / 2;
        for (i, t) in of_rel.into_iter().enumerate() {
            if i < n_valid {
                valid.push(t);
            } else if i < n_eval {
                test.push(t);
            } else {
                train.push(t);
            }
        }
    }
    train.shuffle(&mut rng);
    valid.shuffle(&mut rng);
    test.shuffle(&mut rng);

    let type_names = ["a", "b", "c", "d"];
    let entities = Dictionary::from_names(
        (0..4 * n)
            .map(|i| format!("{}{}", type_names[i / n], i % n))
            .collect(),
    );
    let relations = Dictionary::from_names(REL_NAMES.iter().map(|s| s.to_string()).collect());
    let graph = KnowledgeGraph::new(train.clone(), 4 * n, REL_NAMES.len());
    Dataset {
        graph,
        train,
        valid,
        test,
        entities,
        relations,
        warnings: Vec::new(),
    }
}

/// G(n, m) multigraph: `m` edges with independently uniform endpoints
/// (self-loops and parallel edges possible) and uniform relation labels.
pub fn erdos_renyi_graph(n: usize, m: usize, n_relations: usize, seed: u64) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triples = (0..m)
        .map(|_| {
            Triple::new(
                rng.gen_range(0..n) as u32,
                rng.gen_range(0..n_relations) as u32,
                rng.gen_range(0..n) as u32,
            )
        })
        .collect();
    KnowledgeGraph::new(triples, n, n_relations)
}

/// Preferential-attachment graph: each new node attaches `m_attach` edges to
/// endpoints sampled proportionally to degree, yielding a heavy-tailed degree
/// distribution.
pub fn power_law_graph(
    n: usize,
    m_attach: usize,
    n_relations: usize,
    seed: u64,
) -> KnowledgeGraph {
    assert!(n >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triples = vec![Triple::new(0, rng.gen_range(0..n_relations) as u32, 1)];
    let mut endpoints: Vec<u32> = vec![0, 1];
    for v in 2..n as u32 {
        for _ in 0..m_attach {
            let target = endpoints[rng.gen_range(0..endpoints.len())];
            triples.push(Triple::new(
                v,
                rng.gen_range(0..n_relations) as u32,
                target,
            ));
            endpoints.push(v);
            endpoints.push(target);
        }
    }
    KnowledgeGraph::new(triples, n, n_relations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_kg_is_deterministic_and_covers_all_relations() {
        let a = rule_kg(10, 3);
        let b = rule_kg(10, 3);
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.test, b.test);
        for r in 0..REL_NAMES.len() as u32 {
            assert!(
                a.train.iter().any(|t| t.relation == r),
                "relation {r} missing from train"
            );
        }
        assert!(!a.valid.is_empty());
        assert!(!a.test.is_empty());
    }

    #[test]
    fn rule_kg_splits_are_disjoint() {
        let ds = rule_kg(8, 1);
        let train: HashSet<Triple> = ds.train.iter().copied().collect();
        assert!(ds.valid.iter().all(|t| !train.contains(t)));
        assert!(ds.test.iter().all(|t| !train.contains(t)));
    }

    #[test]
    fn composed_relation_has_witness_paths() {
        use crate::paths::enumerate_paths;
        let ds = rule_kg(10, 5);
        // for at least half the composed-relation training edges, the
        // (part_of, located_in) path survives masking the edge itself
        let composed: Vec<usize> = ds
            .graph
            .triples
            .iter()
            .enumerate()
            .filter(|(_, t)| t.relation == COMPOSED_REL)
            .map(|(e, _)| e)
            .collect();
        assert!(!composed.is_empty());
        let with_witness = composed
            .iter()
            .filter(|&&e| {
                let t = ds.graph.triple(e as u32);
                enumerate_paths(&ds.graph, t.head, t.tail, 2, Some(e as u32))
                    .iter()
                    .any(|p| p == &vec![0, 1])
            })
            .count();
        assert!(with_witness * 2 >= composed.len());
    }

    #[test]
    fn generators_are_seeded() {
        let a = erdos_renyi_graph(50, 120, 3, 9);
        let b = erdos_renyi_graph(50, 120, 3, 9);
        assert_eq!(a.triples, b.triples);
        let c = power_law_graph(60, 2, 3, 9);
        let d = power_law_graph(60, 2, 3, 9);
        assert_eq!(c.triples, d.triples);
        assert_eq!(c.n_edges(), 1 + 58 * 2);
    }

    #[test]
    fn power_law_graph_has_hubs() {
        let g = power_law_graph(300, 2, 3, 4);
        let stats = g.degree_stats();
        // heavy tail: variance well above the mean
        assert!(stats.var_degree > 2.0 * stats.mean_degree);
    }
}
