//! Mini-batch training: seeded shuffling, parallel per-example
//! forward/backward with deterministic in-order gradient merging, Adam
//! updates, and per-epoch validation for model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::SubgraphScratch;
use crate::error::{Error, Result};
use crate::eval::{evaluate, RankReport};
use crate::graph::{EdgeId, KnowledgeGraph, Triple};
use crate::model::{Model, ModelConfig, PathData};
use crate::params::{AdamConfig, LossReport, ParameterStore};
use crate::paths::{enumerate_training_paths, PathVocabulary, RelationalPath};

/// Training-run settings on top of the model configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Worker threads; 0 means available parallelism.
    pub threads: usize,
    /// Force single-threaded execution for bit-reproducibility.
    pub deterministic: bool,
    /// Print a progress line per epoch to stderr.
    pub quiet: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 20,
            batch_size: 128,
            adam: AdamConfig::default(),
            threads: 0,
            deterministic: false,
            quiet: false,
        }
    }
}

impl TrainConfig {
    pub fn effective_threads(&self) -> usize {
        if self.deterministic {
            1
        } else if self.threads == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.threads
        }
    }
}

/// Everything the trainer reads. The training examples are exactly the
/// graph's edges, each masking itself during message passing and path
/// enumeration.
pub struct TrainInputs<'a> {
    pub graph: &'a KnowledgeGraph,
    pub valid: &'a [Triple],
    /// Graph used for validation predictions; defaults to the training graph
    /// (differs in inductive runs, where removed edges are restored for
    /// evaluation).
    pub eval_graph: Option<&'a KnowledgeGraph>,
    pub vocab: &'a PathVocabulary,
    /// Precomputed per-edge masked path enumerations (from the cache); when
    /// absent and the path branch is active they are enumerated here.
    pub edge_paths: Option<&'a [Vec<RelationalPath>]>,
}

/// One epoch of the training curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: LossReport,
    pub valid_mrr: f64,
    pub valid_hit1: f64,
    pub valid_hit3: f64,
}

/// Final trainer output: last-epoch and best-validation parameters plus the
/// full curve.
pub struct TrainOutput {
    pub store: ParameterStore,
    pub best_store: ParameterStore,
    pub best_epoch: usize,
    pub best_valid: Option<RankReport>,
    pub curves: Vec<EpochReport>,
}

/// Run the full training loop.
pub fn train(inputs: &TrainInputs, config: &TrainConfig) -> Result<TrainOutput> {
    config.model.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.effective_threads())
        .build()
        .map_err(|e| Error::Config(format!("failed to build thread pool: {e}")))?;
    pool.install(|| train_inner(inputs, config))
}

fn train_inner(inputs: &TrainInputs, config: &TrainConfig) -> Result<TrainOutput> {
    let graph = inputs.graph;
    let model_cfg = &config.model;
    let mut rng = ChaCha8Rng::seed_from_u64(model_cfg.seed);
    let mut store = model_cfg.init_params(inputs.vocab.len(), &mut rng)?;

    // Per-edge path inputs, fixed for the whole run.
    let path_data: Option<Vec<PathData>> = if model_cfg.use_path {
        let computed;
        let edge_paths = match inputs.edge_paths {
            Some(p) => p,
            None => {
                computed = enumerate_training_paths(graph, model_cfg.max_path_len);
                &computed
            }
        };
        assert_eq!(edge_paths.len(), graph.n_edges());
        Some(
            edge_paths
                .iter()
                .map(|paths| PathData::from_paths(paths, inputs.vocab, model_cfg.path_repr))
                .collect(),
        )
    } else {
        None
    };

    let n = graph.n_edges();
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut curves = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, RankReport, ParameterStore)> = None;
    // first-layer projection tables, refreshed after every parameter update
    let mut tables = store
        .context
        .as_ref()
        .and_then(|ctx| crate::context::Layer0Tables::compute(graph, ctx));

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut ce_sum = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let model = Model::new(model_cfg, &store, graph).with_tables(tables.as_ref());
            let results: Vec<(f64, crate::params::ExampleGrads)> = batch
                .par_iter()
                .map_init(SubgraphScratch::default, |scratch, &e| {
                    let t = graph.triple(e as EdgeId);
                    let pd = path_data.as_ref().map(|p| &p[e as usize]);
                    let tape = model.forward(t.head, t.tail, Some(e as EdgeId), pd, scratch);
                    let ce = model.cross_entropy(&tape, t.relation);
                    let grads = model.backward(&tape, t.relation, scale);
                    (ce, grads)
                })
                .collect();

            store.zero_grads();
            for (ce, grads) in &results {
                if !ce.is_finite() {
                    return Err(Error::NonFinite {
                        tensor: "loss".into(),
                        context: format!("epoch {epoch}, batch {batch_idx}"),
                    });
                }
                ce_sum += ce;
                store.accumulate(grads);
            }
            store.adam_step(&config.adam)?;
            if let (Some(t), Some(ctx)) = (tables.as_mut(), store.context.as_ref()) {
                t.refresh(graph, ctx);
            }
        }

        let mean_ce = ce_sum / n as f64;
        let loss = LossReport::new(mean_ce, store.l2_penalty(), config.adam.l2_weight);

        let valid_graph = inputs.eval_graph.unwrap_or(graph);
        let report = evaluate(
            inputs.valid,
            valid_graph,
            &store,
            model_cfg,
            None,
            Some(inputs.vocab),
        );
        if !config.quiet {
            eprintln!(
                "epoch {:>3}: ce {:.4} (total {:.4})  valid mrr {:.4} hit@1 {:.4} hit@3 {:.4}",
                epoch, loss.mean_ce, loss.total, report.mrr, report.hit1, report.hit3
            );
        }
        curves.push(EpochReport {
            epoch,
            loss,
            valid_mrr: report.mrr,
            valid_hit1: report.hit1,
            valid_hit3: report.hit3,
        });
        let improved = best
            .as_ref()
            .map_or(true, |(_, best_report, _)| report.mrr > best_report.mrr);
        if improved {
            best = Some((epoch, report, store.clone()));
        }
    }

    let (best_epoch, best_valid, best_store) = match best {
        Some((e, r, s)) => (e, Some(r), s),
        None => (0, None, store.clone()),
    };
    Ok(TrainOutput {
        store,
        best_store,
        best_epoch,
        best_valid,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Triple;
    use crate::params::{AggregatorKind, PathAggKind, PathReprKind};
    use crate::paths::build_vocabulary;

    fn toy_inputs() -> (KnowledgeGraph, Vec<Triple>) {
        // a small two-relation world: rel 0 edges form a ring, rel 1 chords
        let mut triples = Vec::new();
        let n = 12u32;
        for i in 0..n {
            triples.push(Triple::new(i, 0, (i + 1) % n));
        }
        for i in 0..n / 2 {
            triples.push(Triple::new(i, 1, (i + 5) % n));
        }
        let graph = KnowledgeGraph::new(triples, n as usize, 2);
        let valid = vec![Triple::new(0, 0, 2), Triple::new(3, 1, 8)];
        (graph, valid)
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                use_context: true,
                use_path: true,
                context_hops: 2,
                max_path_len: 2,
                hidden_dim: 4,
                context_aggregator: AggregatorKind::Concat,
                path_repr: PathReprKind::Embedding,
                path_aggregator: PathAggKind::Attention,
                n_relations: 2,
                seed,
            },
            epochs: 2,
            batch_size: 8,
            adam: AdamConfig::default(),
            threads: 2,
            deterministic: false,
            quiet: true,
        }
    }

    #[test]
    fn training_runs_and_reports_curves() {
        let (graph, valid) = toy_inputs();
        let vocab = build_vocabulary(&graph, 2);
        let inputs = TrainInputs {
            graph: &graph,
            valid: &valid,
            eval_graph: None,
            vocab: &vocab,
            edge_paths: None,
        };
        let out = train(&inputs, &quick_config(7)).unwrap();
        assert_eq!(out.curves.len(), 2);
        assert!(out.curves.iter().all(|c| c.loss.mean_ce.is_finite()));
        assert!(out.best_valid.is_some());
    }

    #[test]
    fn same_seed_gives_identical_parameters_even_with_threads() {
        let (graph, valid) = toy_inputs();
        let vocab = build_vocabulary(&graph, 2);
        let inputs = TrainInputs {
            graph: &graph,
            valid: &valid,
            eval_graph: None,
            vocab: &vocab,
            edge_paths: None,
        };
        let a = train(&inputs, &quick_config(3)).unwrap();
        let b = train(&inputs, &quick_config(3)).unwrap();
        for (ta, tb) in a.store.tensors().iter().zip(b.store.tensors().iter()) {
            assert_eq!(ta.data, tb.data, "tensor {} differs across reruns", ta.name);
        }
        let c = train(
            &inputs,
            &TrainConfig {
                deterministic: true,
                ..quick_config(3)
            },
        )
        .unwrap();
        for (ta, tc) in a.store.tensors().iter().zip(c.store.tensors().iter()) {
            assert_eq!(
                ta.data, tc.data,
                "parallel and single-threaded runs diverged on {}",
                ta.name
            );
        }
    }

    #[test]
    fn different_seeds_give_different_parameters() {
        let (graph, valid) = toy_inputs();
        let vocab = build_vocabulary(&graph, 2);
        let inputs = TrainInputs {
            graph: &graph,
            valid: &valid,
            eval_graph: None,
            vocab: &vocab,
            edge_paths: None,
        };
        let a = train(&inputs, &quick_config(1)).unwrap();
        let b = train(&inputs, &quick_config(2)).unwrap();
        let same = a
            .store
            .tensors()
            .iter()
            .zip(b.store.tensors().iter())
            .all(|(x, y)| x.data == y.data);
        assert!(!same);
    }
}
