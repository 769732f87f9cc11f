//! Explainability export and executable validators for the message-passing
//! cost results: per-iteration cost counters for the three schemes, explicit
//! line-graph statistics, and the relational path census.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dictionary, KnowledgeGraph, RelationId};
use crate::model::{path_representation, PathData};
use crate::params::{AggregatorKind, ParameterStore, PathParams};
use crate::paths::PathVocabulary;

/// Message-passing scheme whose per-iteration cost is being counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    NodeBased,
    Relational,
    Alternate,
}

/// Exact aggregation-plus-update input count per iteration for a concrete
/// graph, next to the closed-form cost for comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub scheme: Scheme,
    pub measured_cost: u64,
    pub formula_cost: f64,
}

/// Count one iteration's cost for `scheme` by scanning the graph, and
/// evaluate the corresponding closed form from (N, M, Var[d]).
///
/// - node based: aggregation reads one entry per incidence stub and each of
///   the N updates reads 2 inputs; total `sum(deg) + 2N = 2M + 2N`.
/// - relational: each edge aggregates its `deg(u) + deg(v) - 2` neighbor
///   edges plus 2 update inputs; total `N Var[d] + 4 M^2 / N`.
/// - alternate: edge-to-node aggregation reads every stub once, node-to-edge
///   aggregation and updates read 2 each; total `6M`.
pub fn count_message_cost(graph: &KnowledgeGraph, scheme: Scheme) -> CostReport {
    let n = graph.n_entities as u64;
    let m = graph.n_edges() as u64;
    let stats = graph.degree_stats();
    let sum_deg: u64 = (0..graph.n_entities)
        .map(|v| graph.degree(v as u32) as u64)
        .sum();
    let (measured, formula) = match scheme {
        Scheme::NodeBased => (sum_deg + 2 * n, 2.0 * m as f64 + 2.0 * n as f64),
        Scheme::Relational => {
            let neighbor_inputs: u64 = graph
                .triples
                .iter()
                .map(|t| {
                    (graph.degree(t.head) + graph.degree(t.tail)) as u64 - 2
                })
                .sum();
            (
                neighbor_inputs + 2 * m,
                n as f64 * stats.var_degree + 4.0 * (m as f64) * (m as f64) / n as f64,
            )
        }
        Scheme::Alternate => (sum_deg + 2 * m + 2 * m, 6.0 * m as f64),
    };
    CostReport {
        scheme,
        measured_cost: measured,
        formula_cost: formula,
    }
}

/// Line-graph statistics, measured by explicitly enumerating the line graph's
/// edges (one node per edge of `G`; two nodes adjacent once per shared
/// endpoint stub pair) next to the closed form `N Var[d]/M + 4M/N - 2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineGraphStats {
    pub n_nodes: usize,
    pub n_edges: u64,
    pub mean_degree: f64,
    pub formula_mean_degree: f64,
}

pub fn line_graph_stats(graph: &KnowledgeGraph) -> Result<LineGraphStats> {
    let m = graph.n_edges();
    if m == 0 {
        return Err(Error::Analysis("line graph of an edgeless graph".into()));
    }
    // Enumerate line-graph edges per original node: every unordered pair of
    // incidence stubs at v joins the two edges. Only the degree sequence is
    // retained.
    let mut line_degree = vec![0u64; m];
    let mut n_line_edges = 0u64;
    for v in 0..graph.n_entities {
        let inc = graph.incident_edges(v as u32);
        for i in 0..inc.len() {
            for j in i + 1..inc.len() {
                line_degree[inc[i] as usize] += 1;
                line_degree[inc[j] as usize] += 1;
                n_line_edges += 1;
            }
        }
    }
    let mean_degree = line_degree.iter().sum::<u64>() as f64 / m as f64;
    let stats = graph.degree_stats();
    let n = graph.n_entities as f64;
    let formula = n * stats.var_degree / m as f64 + 4.0 * m as f64 / n - 2.0;
    Ok(LineGraphStats {
        n_nodes: m,
        n_edges: n_line_edges,
        mean_degree,
        formula_mean_degree: formula,
    })
}

/// Fraction of all `|R|^L` relation sequences that occur as a length-`L`
/// relational path between some entity pair.
pub fn path_census(graph: &KnowledgeGraph, len: usize) -> Result<f64> {
    assert!(len >= 1);
    let r = graph.n_relations as u64;
    let total = r
        .checked_pow(len as u32)
        .filter(|&t| t <= 1u64 << 32)
        .ok_or_else(|| {
            Error::Analysis(format!(
                "|R|^L = {}^{len} overflows the census bitmap",
                graph.n_relations
            ))
        })?;
    let mut seen = vec![0u64; (total as usize + 63) / 64];
    let mut occupied = 0u64;
    let mut visited = Vec::with_capacity(len + 1);
    for start in 0..graph.n_entities as u32 {
        visited.push(start);
        census_walk(
            graph,
            start,
            len,
            0,
            &mut visited,
            &mut seen,
            &mut occupied,
            r,
        );
        visited.pop();
    }
    Ok(occupied as f64 / total as f64)
}

#[allow(clippy::too_many_arguments)]
fn census_walk(
    graph: &KnowledgeGraph,
    v: u32,
    len: usize,
    code: u64,
    visited: &mut Vec<u32>,
    seen: &mut [u64],
    occupied: &mut u64,
    radix: u64,
) {
    for &e in graph.incident_edges(v) {
        let t = graph.triple(e);
        let u = t.other(v);
        if visited.contains(&u) {
            continue;
        }
        let next_code = code * radix + t.relation as u64;
        if visited.len() == len {
            let idx = next_code as usize;
            let (w, b) = (idx / 64, idx % 64);
            if seen[w] & (1 << b) == 0 {
                seen[w] |= 1 << b;
                *occupied += 1;
            }
        } else {
            visited.push(u);
            census_walk(graph, u, len, next_code, visited, seen, occupied, radix);
            visited.pop();
        }
    }
}

/// Top-k important contexts and paths per target relation, read off the
/// trained parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplanationTable {
    pub k: usize,
    pub per_relation: Vec<RelationExplanation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationExplanation {
    pub relation: RelationId,
    /// (context relation, weight), sorted by descending weight.
    pub contexts: Vec<(RelationId, f64)>,
    /// (relational path, weight), sorted by descending weight.
    pub paths: Vec<(Vec<RelationId>, f64)>,
}

impl ExplanationTable {
    /// Whether the top context for relation `r` is `r` itself.
    pub fn is_diagonal(&self, r: RelationId) -> bool {
        self.per_relation[r as usize]
            .contexts
            .first()
            .is_some_and(|&(c, _)| c == r)
    }
}

/// Derive explanations from trained parameters.
///
/// The context importance of relation `c` for predicting `r` is the entry of
/// the linear map from one occurrence of `c` in either endpoint's histogram
/// to the score of `r`; this readout is only a single matrix when the model
/// has one context hop, so deeper models are refused. Path importance of `P`
/// for `r` is coordinate `r` of the path vector `s_P`.
pub fn extract_explanations(
    store: &ParameterStore,
    vocab: &PathVocabulary,
    k: usize,
) -> Result<ExplanationTable> {
    let n_rel = match (&store.context, &store.path) {
        (Some(c), _) => c.n_relations,
        (None, Some(PathParams::Embedding { table })) => table.cols,
        (None, Some(PathParams::Rnn { bo, .. })) => bo.cols,
        (None, None) => return Err(Error::Analysis("empty parameter store".into())),
    };

    // context importance matrix: n_rel x n_rel (context relation -> target)
    let context_matrix: Option<Vec<Vec<f64>>> = match &store.context {
        None => None,
        Some(ctx) => {
            if ctx.hops != 1 {
                return Err(Error::Analysis(format!(
                    "context explanations need a 1-hop model (the readout is a single matrix); \
                     this checkpoint has {} hops",
                    ctx.hops
                )));
            }
            let pair = &ctx.pair;
            let matrix: Vec<Vec<f64>> = (0..n_rel)
                .map(|c| {
                    (0..n_rel)
                        .map(|r| match pair.kind {
                            AggregatorKind::Concat => {
                                let w = pair.w.as_ref().unwrap();
                                // head-half row c plus tail-half row c
                                w.data[c * n_rel + r] + w.data[(n_rel + c) * n_rel + r]
                            }
                            AggregatorKind::Mean => {
                                // (m_h + m_t)/2 * w: one occurrence at each
                                // endpoint contributes w[c][r] in total
                                let w = pair.w.as_ref().unwrap();
                                w.data[c * n_rel + r]
                            }
                            AggregatorKind::Cross => f64::NAN,
                        })
                        .collect()
                })
                .collect();
            if pair.kind == AggregatorKind::Cross {
                return Err(Error::Analysis(
                    "context explanations are not defined for the cross aggregator \
                     (the readout is bilinear, not a single matrix)"
                        .into(),
                ));
            }
            Some(matrix)
        }
    };

    // per-path score vectors
    let path_vectors: Option<Vec<Vec<f64>>> = match &store.path {
        None => None,
        Some(pp) => {
            let data = match pp {
                PathParams::Embedding { .. } => {
                    PathData::Ids((0..vocab.len() as u32).collect())
                }
                PathParams::Rnn { .. } => PathData::Raw(vocab.paths().to_vec()),
            };
            Some(path_representation(pp, &data).0)
        }
    };

    let per_relation = (0..n_rel as RelationId)
        .map(|r| {
            let mut contexts: Vec<(RelationId, f64)> = context_matrix
                .as_ref()
                .map(|m| {
                    (0..n_rel as RelationId)
                        .map(|c| (c, m[c as usize][r as usize]))
                        .collect()
                })
                .unwrap_or_default();
            contexts.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            contexts.truncate(k.min(n_rel));

            let mut paths: Vec<(Vec<RelationId>, f64)> = path_vectors
                .as_ref()
                .map(|vs| {
                    vs.iter()
                        .enumerate()
                        .map(|(pid, v)| (vocab.path(pid as u32).clone(), v[r as usize]))
                        .collect()
                })
                .unwrap_or_default();
            paths.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            paths.truncate(k.min(vocab.len()));

            RelationExplanation {
                relation: r,
                contexts,
                paths,
            }
        })
        .collect();

    Ok(ExplanationTable { k, per_relation })
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Emit the table as CSV: target_relation, kind, item, weight, rank.
pub fn write_explanations_csv(
    path: &Path,
    table: &ExplanationTable,
    relations: &Dictionary,
) -> Result<()> {
    fs::write(path, explanations_to_csv(table, relations)).map_err(|e| Error::io(path, e))
}

/// The CSV body behind [`write_explanations_csv`].
pub fn explanations_to_csv(table: &ExplanationTable, relations: &Dictionary) -> String {
    let mut out = String::from("target_relation,kind,item,weight,rank\n");
    for rel in &table.per_relation {
        let target = csv_field(relations.name(rel.relation));
        for (rank, (c, w)) in rel.contexts.iter().enumerate() {
            out.push_str(&format!(
                "{target},context,{},{w},{}\n",
                csv_field(relations.name(*c)),
                rank + 1
            ));
        }
        for (rank, (p, w)) in rel.paths.iter().enumerate() {
            let item = p
                .iter()
                .map(|&r| relations.name(r))
                .collect::<Vec<_>>()
                .join(" -> ");
            out.push_str(&format!(
                "{target},path,{},{w},{}\n",
                csv_field(&item),
                rank + 1
            ));
        }
    }
    out
}
