//! Relation ranking and the MRR / Hit@K metrics.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::SubgraphScratch;
use crate::graph::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::model::{Model, ModelConfig, PathData};
use crate::params::ParameterStore;
use crate::paths::{enumerate_paths, PathVocabulary};

/// Rank of the true relation among all candidates, with ties resolved by the
/// mean rank: `1 + #{better} + #{equal others} / 2`. Avoids both optimistic
/// and pessimistic bias for degenerate (all-tied) score vectors.
pub fn rank_relations(scores: &[f64], true_relation: RelationId) -> f64 {
    rank_relations_filtered(scores, true_relation, &[])
}

/// Like [`rank_relations`] but ignoring `excluded` candidates (the filtered
/// protocol masks other known-true relations of the same pair).
pub fn rank_relations_filtered(
    scores: &[f64],
    true_relation: RelationId,
    excluded: &[RelationId],
) -> f64 {
    let s_true = scores[true_relation as usize];
    let mut better = 0usize;
    let mut equal = 0usize;
    for (r, &s) in scores.iter().enumerate() {
        if r == true_relation as usize || excluded.contains(&(r as RelationId)) {
            continue;
        }
        if s > s_true {
            better += 1;
        } else if s == s_true {
            equal += 1;
        }
    }
    1.0 + better as f64 + equal as f64 / 2.0
}

/// Aggregate ranking metrics; `hit@K` uses the tie-aware rank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport {
    pub mrr: f64,
    pub hit1: f64,
    pub hit3: f64,
    pub n_examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip)]
    pub ranks: Vec<f64>,
}

impl RankReport {
    pub fn from_ranks(ranks: Vec<f64>) -> Self {
        let n = ranks.len().max(1) as f64;
        let mrr = ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n;
        let hit1 = ranks.iter().filter(|&&r| r <= 1.0).count() as f64 / n;
        let hit3 = ranks.iter().filter(|&&r| r <= 3.0).count() as f64 / n;
        RankReport {
            mrr,
            hit1,
            hit3,
            n_examples: ranks.len(),
            config_hash: None,
            ranks,
        }
    }
}

/// MRR of always predicting the uniform distribution (every relation tied).
pub fn uniform_baseline_mrr(n_relations: usize) -> f64 {
    // every example gets the mean rank (|R| + 1) / 2
    2.0 / (n_relations as f64 + 1.0)
}

/// Known-true relation sets per ordered pair, for the filtered protocol.
pub fn build_filter_sets(
    splits: &[&[Triple]],
) -> HashMap<(EntityId, EntityId), Vec<RelationId>> {
    let mut map: HashMap<(EntityId, EntityId), Vec<RelationId>> = HashMap::new();
    for split in splits {
        for t in *split {
            let entry = map.entry((t.head, t.tail)).or_default();
            if !entry.contains(&t.relation) {
                entry.push(t.relation);
            }
        }
    }
    map
}

/// Score and rank every triple. The query edges are not part of `graph`
/// (evaluation splits are disjoint from the training edges), so no masking is
/// applied. Parallel over triples; the rank list keeps input order.
pub fn evaluate(
    triples: &[Triple],
    graph: &KnowledgeGraph,
    store: &ParameterStore,
    config: &ModelConfig,
    filter: Option<&HashMap<(EntityId, EntityId), Vec<RelationId>>>,
    vocab: Option<&PathVocabulary>,
) -> RankReport {
    let tables = store
        .context
        .as_ref()
        .and_then(|ctx| crate::context::Layer0Tables::compute(graph, ctx));
    let model = Model::new(config, store, graph).with_tables(tables.as_ref());
    let ranks: Vec<f64> = triples
        .par_iter()
        .map_init(SubgraphScratch::default, |scratch, t| {
            let path_data = config.use_path.then(|| {
                let paths = enumerate_paths(graph, t.head, t.tail, config.max_path_len, None);
                PathData::from_paths(
                    &paths,
                    vocab.expect("path branch enabled but no vocabulary supplied"),
                    config.path_repr,
                )
            });
            let probs = model.predict(t.head, t.tail, None, path_data.as_ref(), scratch);
            match filter.and_then(|f| f.get(&(t.head, t.tail))) {
                Some(known) => {
                    let excluded: Vec<RelationId> = known
                        .iter()
                        .copied()
                        .filter(|&r| r != t.relation)
                        .collect();
                    rank_relations_filtered(&probs, t.relation, &excluded)
                }
                None => rank_relations(&probs, t.relation),
            }
        })
        .collect();
    RankReport::from_ranks(ranks)
}
