//! Finite-difference oracle for the reverse-mode gradients: on small random
//! graphs, every parameter's analytic gradient of the batch loss
//! (mean CE + l2 * penalty) must match central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relmp::context::SubgraphScratch;
use relmp::graph::KnowledgeGraph;
use relmp::model::{Model, ModelConfig, PathData};
use relmp::params::{AggregatorKind, ParameterStore, PathAggKind, PathReprKind};
use relmp::paths::{build_vocabulary, enumerate_paths, PathVocabulary};
use relmp::synthetic::erdos_renyi_graph;

struct Problem {
    graph: KnowledgeGraph,
    config: ModelConfig,
    vocab: PathVocabulary,
    /// (edge id used as both example and mask)
    examples: Vec<u32>,
    /// exercise the decomposed-first-layer path the trainer uses
    use_tables: bool,
}

impl Problem {
    fn new(kind: AggregatorKind, repr: PathReprKind, agg: PathAggKind, ablation: &str, hops: usize, seed: u64) -> Problem {
        let graph = erdos_renyi_graph(8, 14, 4, seed);
        let config = ModelConfig {
            use_context: ablation != "path",
            use_path: ablation != "con",
            context_hops: hops,
            max_path_len: 3,
            hidden_dim: 6,
            context_aggregator: kind,
            path_repr: repr,
            path_aggregator: if ablation == "path" { PathAggKind::Mean } else { agg },
            n_relations: 4,
            seed,
        };
        let vocab = build_vocabulary(&graph, config.max_path_len);
        Problem {
            graph,
            config,
            vocab,
            examples: vec![0, 3, 7],
            use_tables: false,
        }
    }

    fn tables(&self, store: &ParameterStore) -> Option<relmp::context::Layer0Tables> {
        if !self.use_tables {
            return None;
        }
        store
            .context
            .as_ref()
            .and_then(|ctx| relmp::context::Layer0Tables::compute(&self.graph, ctx))
    }

    fn path_inputs(&self) -> Vec<Option<PathData>> {
        self.examples
            .iter()
            .map(|&e| {
                self.config.use_path.then(|| {
                    let t = self.graph.triple(e);
                    let paths =
                        enumerate_paths(&self.graph, t.head, t.tail, self.config.max_path_len, Some(e));
                    PathData::from_paths(&paths, &self.vocab, self.config.path_repr)
                })
            })
            .collect()
    }

    fn loss(&self, store: &ParameterStore, l2: f64, inputs: &[Option<PathData>]) -> f64 {
        // tables are a function of the current weights, so rebuild per call
        let tables = self.tables(store);
        let model = Model::new(&self.config, store, &self.graph).with_tables(tables.as_ref());
        let mut scratch = SubgraphScratch::default();
        let mut ce = 0.0;
        for (&e, pd) in self.examples.iter().zip(inputs) {
            let t = self.graph.triple(e);
            let tape = model.forward(t.head, t.tail, Some(e), pd.as_ref(), &mut scratch);
            ce += model.cross_entropy(&tape, t.relation);
        }
        ce / self.examples.len() as f64 + l2 * store.l2_penalty()
    }

    fn analytic_grads(&self, store: &mut ParameterStore, l2: f64, inputs: &[Option<PathData>]) {
        store.zero_grads();
        let scale = 1.0 / self.examples.len() as f64;
        let mut scratch = SubgraphScratch::default();
        let mut grads = Vec::new();
        {
            let tables = self.tables(store);
            let model = Model::new(&self.config, store, &self.graph).with_tables(tables.as_ref());
            for (&e, pd) in self.examples.iter().zip(inputs) {
                let t = self.graph.triple(e);
                let tape = model.forward(t.head, t.tail, Some(e), pd.as_ref(), &mut scratch);
                if self.use_tables && self.config.use_context && self.config.context_hops >= 2 {
                    assert!(
                        tape.context.as_ref().unwrap().fast_layer0,
                        "expected the decomposed first layer to be active"
                    );
                }
                grads.push(model.backward(&tape, t.relation, scale));
            }
        }
        for g in &grads {
            store.accumulate(g);
        }
        store.add_l2_gradients(l2);
    }
}

fn check_problem(problem: &Problem, label: &str) -> (usize, f64) {
    let l2 = 1e-3;
    let eps = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(problem.config.seed ^ 0x5eed);
    let mut store = problem.config.init_params(problem.vocab.len(), &mut rng).unwrap();
    let inputs = problem.path_inputs();
    problem.analytic_grads(&mut store, l2, &inputs);

    let analytic: Vec<Vec<f64>> = store.tensors().iter().map(|t| t.grad.clone()).collect();
    let names: Vec<String> = store.tensors().iter().map(|t| t.name.clone()).collect();

    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    let n_tensors = analytic.len();
    for ti in 0..n_tensors {
        for i in 0..analytic[ti].len() {
            store.tensors_mut()[ti].data[i] += eps;
            let up = problem.loss(&store, l2, &inputs);
            store.tensors_mut()[ti].data[i] -= 2.0 * eps;
            let down = problem.loss(&store, l2, &inputs);
            store.tensors_mut()[ti].data[i] += eps;

            let fd = (up - down) / (2.0 * eps);
            let a = analytic[ti][i];
            let err = (a - fd).abs();
            let tol = 1e-6f64.max(1e-4 * a.abs().max(fd.abs()));
            assert!(
                err <= tol,
                "{label}: tensor {} [{i}]: analytic {a:.8e} vs fd {fd:.8e} (err {err:.2e} > tol {tol:.2e})",
                names[ti]
            );
            worst = worst.max(if a.abs().max(fd.abs()) > 1e-6 {
                err / a.abs().max(fd.abs())
            } else {
                0.0
            });
            checked += 1;
        }
    }
    (checked, worst)
}

#[test]
fn gradients_match_finite_differences_across_all_combos() {
    let kinds = [AggregatorKind::Mean, AggregatorKind::Concat, AggregatorKind::Cross];
    let reprs = [PathReprKind::Embedding, PathReprKind::Rnn];
    let aggs = [PathAggKind::Attention, PathAggKind::Mean];
    let mut seed = 100;
    // full model: every aggregator x path representation x path aggregator
    for kind in kinds {
        for repr in reprs {
            for agg in aggs {
                seed += 1;
                let p = Problem::new(kind, repr, agg, "pathcon", 2, seed);
                let label = format!("pathcon/{kind:?}/{repr:?}/{agg:?}");
                let (n, worst) = check_problem(&p, &label);
                assert!(n > 0);
                eprintln!("{label}: {n} coords, worst rel err {worst:.2e}");
            }
        }
    }
    // context only: aggregators at 1, 2, and 3 hops
    for kind in kinds {
        for hops in 1..=3 {
            seed += 1;
            let p = Problem::new(kind, PathReprKind::Embedding, PathAggKind::Mean, "con", hops, seed);
            let label = format!("con/{kind:?}/hops{hops}");
            let (n, worst) = check_problem(&p, &label);
            assert!(n > 0);
            eprintln!("{label}: {n} coords, worst rel err {worst:.2e}");
        }
    }
    // paths only (mean aggregation is forced)
    for repr in reprs {
        seed += 1;
        let p = Problem::new(AggregatorKind::Concat, repr, PathAggKind::Mean, "path", 2, seed);
        let label = format!("path/{repr:?}");
        let (n, worst) = check_problem(&p, &label);
        assert!(n > 0);
        eprintln!("{label}: {n} coords, worst rel err {worst:.2e}");
    }
}

#[test]
fn gradients_match_finite_differences_through_projection_tables() {
    // the trainer's decomposed first layer, for both aggregators that
    // support it, at 2 and 3 hops
    let mut seed = 300;
    for kind in [AggregatorKind::Concat, AggregatorKind::Mean] {
        for hops in 2..=3 {
            seed += 1;
            let mut p = Problem::new(
                kind,
                PathReprKind::Embedding,
                PathAggKind::Attention,
                "pathcon",
                hops,
                seed,
            );
            p.use_tables = true;
            let label = format!("tables/{kind:?}/hops{hops}");
            let (n, worst) = check_problem(&p, &label);
            assert!(n > 0);
            eprintln!("{label}: {n} coords, worst rel err {worst:.2e}");
        }
    }
}
