//! Acceptance suite. Each test covers one numbered criterion and prints one
//! PASS line (run with `-- --nocapture` to see them).
//!
//! Criteria 1-3 and 7-9 reproduce published-benchmark numbers and therefore
//! need the corresponding datasets (DDB14, WN18RR) on disk. Those datasets are
//! not redistributable with this repository, so the tests are `#[ignore]`d by
//! default; place the dataset directories under `$RELMP_DATA_ROOT` (or
//! `./data` at the workspace root) and run `cargo test -p relmp-cli --test
//! acceptance -- --ignored` to execute them. Every threshold is pinned here
//! regardless of gating.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use relmp::analysis::{count_message_cost, extract_explanations, line_graph_stats, Scheme};
use relmp::checkpoint;
use relmp::context::SubgraphScratch;
use relmp::eval::uniform_baseline_mrr;
use relmp::graph::{load_dataset, KnowledgeGraph};
use relmp::model::{Model, ModelConfig, PathData};
use relmp::params::{AggregatorKind, ParameterStore, PathAggKind, PathReprKind};
use relmp::paths::{build_vocabulary, enumerate_paths, PathVocabulary};
use relmp::synthetic::{erdos_renyi_graph, power_law_graph};

fn data_root() -> PathBuf {
    match std::env::var("RELMP_DATA_ROOT") {
        Ok(root) => PathBuf::from(root),
        Err(_) => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"),
    }
}

fn dataset_dir(name: &str) -> PathBuf {
    let dir = data_root().join(name);
    assert!(
        dir.join("train.txt").exists(),
        "criterion needs the {name} dataset at {} (set RELMP_DATA_ROOT); \
         it is not redistributable with this repository — see README",
        dir.display()
    );
    dir
}

fn relmp_bin() -> &'static str {
    env!("CARGO_BIN_EXE_relmp")
}

fn run_cli(args: &[&str]) {
    let out = Command::new(relmp_bin())
        .args(args)
        .output()
        .expect("failed to launch relmp");
    assert!(
        out.status.success(),
        "relmp {args:?} failed:\n{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_metrics(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("metrics.json")).expect("metrics.json");
    serde_json::from_str(&text).unwrap()
}

fn train_cli(dataset: &Path, out: &Path, extra: &[&str]) -> serde_json::Value {
    let mut args = vec![
        "train",
        "--dataset",
        dataset.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--seed",
        "1",
        "--quiet",
    ];
    args.extend_from_slice(extra);
    run_cli(&args);
    read_metrics(out)
}

// ---------------------------------------------------------------------------
// 1. DDB14 end-to-end reproduction
// ---------------------------------------------------------------------------
#[test]
#[ignore = "requires the DDB14 dataset under $RELMP_DATA_ROOT or ./data (not redistributable)"]
fn criterion01_ddb14_end_to_end() {
    let dir = dataset_dir("DDB14");
    let tmp = tempfile::tempdir().unwrap();
    let started = Instant::now();
    // Table-6 settings (hops 3, path length 4) resolve from the dataset name;
    // everything else is the published default.
    let metrics = train_cli(&dir, tmp.path(), &[]);
    let elapsed = started.elapsed();
    let mrr = metrics["mrr"].as_f64().unwrap();
    let hit1 = metrics["hit1"].as_f64().unwrap();
    assert!(mrr >= 0.96, "DDB14 MRR {mrr:.4} < 0.96");
    assert!(hit1 >= 0.94, "DDB14 Hit@1 {hit1:.4} < 0.94");
    assert!(
        elapsed < Duration::from_secs(3600),
        "runtime {elapsed:?} exceeded 60 minutes"
    );
    eprintln!(
        "criterion 1 (DDB14 end-to-end): PASS — MRR {mrr:.4} (>= 0.96), Hit@1 {hit1:.4} (>= 0.94), {elapsed:.0?}"
    );
}

// ---------------------------------------------------------------------------
// 2. Ablation ordering on DDB14
// ---------------------------------------------------------------------------
#[test]
#[ignore = "requires the DDB14 dataset under $RELMP_DATA_ROOT or ./data (not redistributable)"]
fn criterion02_ddb14_ablation_ordering() {
    let dir = dataset_dir("DDB14");
    let tmp = tempfile::tempdir().unwrap();
    let full = train_cli(&dir, &tmp.path().join("pathcon"), &[])["mrr"]
        .as_f64()
        .unwrap();
    let con = train_cli(&dir, &tmp.path().join("con"), &["--use-path", "false"])["mrr"]
        .as_f64()
        .unwrap();
    let path = train_cli(
        &dir,
        &tmp.path().join("path"),
        &["--use-context", "false", "--path-aggregator", "mean"],
    )["mrr"]
        .as_f64()
        .unwrap();
    let tol = 0.02;
    assert!(
        full >= con.max(path) - tol,
        "full model MRR {full:.4} below max(Con {con:.4}, Path {path:.4}) - {tol}"
    );
    assert!(con >= 0.90 - tol, "Con MRR {con:.4} below 0.90 - {tol}");
    assert!(path >= 0.90 - tol, "Path MRR {path:.4} below 0.90 - {tol}");
    eprintln!(
        "criterion 2 (DDB14 ablations): PASS — PathCon {full:.4} >= max(Con {con:.4}, Path {path:.4}) - {tol}"
    );
}

// ---------------------------------------------------------------------------
// 3. WN18RR reproduction (or the sanctioned subsample variant)
// ---------------------------------------------------------------------------
#[test]
#[ignore = "requires the WN18RR dataset under $RELMP_DATA_ROOT or ./data (not redistributable)"]
fn criterion03_wn18rr_reproduction() {
    let dir = dataset_dir("WN18RR");
    let tmp = tempfile::tempdir().unwrap();
    let metrics = train_cli(&dir, tmp.path(), &[]);
    let mrr = metrics["mrr"].as_f64().unwrap();
    assert!(
        (mrr - 0.974).abs() <= 0.02,
        "WN18RR MRR {mrr:.4} outside 0.974 +/- 0.02"
    );
    eprintln!("criterion 3 (WN18RR): PASS — MRR {mrr:.4} within 0.974 +/- 0.02");
}

/// Sanctioned substitute when the full run exceeds desk scale: a 20% subsample
/// whose trained MRR must beat the uniform baseline by at least 5x.
#[test]
#[ignore = "requires the WN18RR dataset under $RELMP_DATA_ROOT or ./data (not redistributable)"]
fn criterion03_wn18rr_subsample() {
    let dir = dataset_dir("WN18RR");
    let ds = load_dataset(&dir).unwrap();
    // deterministic 20% subsample of each split
    let sub = |v: &[relmp::Triple]| -> Vec<relmp::Triple> {
        v.iter().step_by(5).copied().collect()
    };
    let tmp = tempfile::tempdir().unwrap();
    let small = relmp::graph::Dataset {
        graph: KnowledgeGraph::new(sub(&ds.train), ds.entities.len(), ds.relations.len()),
        train: sub(&ds.train),
        valid: sub(&ds.valid),
        test: sub(&ds.test),
        entities: ds.entities.clone(),
        relations: ds.relations.clone(),
        warnings: vec![],
    };
    relmp::graph::write_dataset(&tmp.path().join("wn18rr-20pc"), &small).unwrap();
    let out = tmp.path().join("run");
    let metrics = train_cli(
        &tmp.path().join("wn18rr-20pc"),
        &out,
        &["--context-hops", "3", "--max-path-len", "4"],
    );
    let mrr = metrics["mrr"].as_f64().unwrap();
    let uniform = uniform_baseline_mrr(ds.relations.len());
    assert!(
        mrr >= 5.0 * uniform,
        "subsample MRR {mrr:.4} below 5x uniform ({:.4})",
        5.0 * uniform
    );
    eprintln!(
        "criterion 3 (WN18RR 20% subsample): PASS — MRR {mrr:.4} >= 5x uniform {:.4}",
        5.0 * uniform
    );
}

// ---------------------------------------------------------------------------
// 4. Complexity identities on random graphs
// ---------------------------------------------------------------------------
#[test]
fn criterion04_complexity_identities() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut graphs: Vec<KnowledgeGraph> = Vec::new();
    use rand::Rng;
    for i in 0..25u64 {
        let n = rng.gen_range(10..=2000);
        let m = n + rng.gen_range(0..3 * n);
        graphs.push(erdos_renyi_graph(n, m, 5, 1000 + i));
        let attach = rng.gen_range(1..=4);
        graphs.push(power_law_graph(n, attach, 5, 2000 + i));
    }
    assert_eq!(graphs.len(), 50);
    for (i, g) in graphs.iter().enumerate() {
        let nb = count_message_cost(g, Scheme::NodeBased);
        assert_eq!(
            nb.measured_cost as f64, nb.formula_cost,
            "graph {i}: node-based cost mismatch"
        );
        let alt = count_message_cost(g, Scheme::Alternate);
        assert_eq!(
            alt.measured_cost as f64, alt.formula_cost,
            "graph {i}: alternate cost mismatch"
        );
        let rel = count_message_cost(g, Scheme::Relational);
        let err = (rel.measured_cost as f64 - rel.formula_cost).abs();
        assert!(
            err <= 1e-9 * rel.formula_cost.abs().max(1.0),
            "graph {i}: relational cost {} vs formula {} (err {err})",
            rel.measured_cost,
            rel.formula_cost
        );
        let lg = line_graph_stats(g).unwrap();
        let err = (lg.mean_degree - lg.formula_mean_degree).abs();
        assert!(
            err <= 1e-9 * lg.formula_mean_degree.abs().max(1.0),
            "graph {i}: line-graph degree {} vs formula {}",
            lg.mean_degree,
            lg.formula_mean_degree
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    eprintln!(
        "criterion 4 (complexity identities): PASS — 50 graphs, exact node-based/alternate, \
         relational and line-graph within 1e-9 relative, {elapsed:.1?}"
    );
}

// ---------------------------------------------------------------------------
// 5. Gradient correctness across every legal configuration
// ---------------------------------------------------------------------------
struct GradProblem {
    graph: KnowledgeGraph,
    config: ModelConfig,
    vocab: PathVocabulary,
    examples: Vec<u32>,
}

impl GradProblem {
    fn path_inputs(&self) -> Vec<Option<PathData>> {
        self.examples
            .iter()
            .map(|&e| {
                self.config.use_path.then(|| {
                    let t = self.graph.triple(e);
                    let paths = enumerate_paths(
                        &self.graph,
                        t.head,
                        t.tail,
                        self.config.max_path_len,
                        Some(e),
                    );
                    PathData::from_paths(&paths, &self.vocab, self.config.path_repr)
                })
            })
            .collect()
    }

    fn loss(&self, store: &ParameterStore, l2: f64, inputs: &[Option<PathData>]) -> f64 {
        let model = Model::new(&self.config, store, &self.graph);
        let mut scratch = SubgraphScratch::default();
        let mut ce = 0.0;
        for (&e, pd) in self.examples.iter().zip(inputs) {
            let t = self.graph.triple(e);
            let tape = model.forward(t.head, t.tail, Some(e), pd.as_ref(), &mut scratch);
            ce += model.cross_entropy(&tape, t.relation);
        }
        ce / self.examples.len() as f64 + l2 * store.l2_penalty()
    }

    /// max relative error between analytic and central-difference gradients
    fn check(&self) -> (usize, f64) {
        let l2 = 1e-3;
        let eps = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xacce);
        let mut store = self
            .config
            .init_params(self.vocab.len(), &mut rng)
            .unwrap();
        let inputs = self.path_inputs();

        store.zero_grads();
        let scale = 1.0 / self.examples.len() as f64;
        let mut scratch = SubgraphScratch::default();
        let mut grads = Vec::new();
        {
            let model = Model::new(&self.config, &store, &self.graph);
            for (&e, pd) in self.examples.iter().zip(&inputs) {
                let t = self.graph.triple(e);
                let tape = model.forward(t.head, t.tail, Some(e), pd.as_ref(), &mut scratch);
                grads.push(model.backward(&tape, t.relation, scale));
            }
        }
        for g in &grads {
            store.accumulate(g);
        }
        store.add_l2_gradients(l2);

        let analytic: Vec<Vec<f64>> = store.tensors().iter().map(|t| t.grad.clone()).collect();
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        for ti in 0..analytic.len() {
            for i in 0..analytic[ti].len() {
                store.tensors_mut()[ti].data[i] += eps;
                let up = self.loss(&store, l2, &inputs);
                store.tensors_mut()[ti].data[i] -= 2.0 * eps;
                let down = self.loss(&store, l2, &inputs);
                store.tensors_mut()[ti].data[i] += eps;
                let fd = (up - down) / (2.0 * eps);
                let a = analytic[ti][i];
                let denom = a.abs().max(fd.abs());
                let rel_err = if denom > 1e-6 {
                    (a - fd).abs() / denom
                } else {
                    0.0
                };
                assert!(
                    rel_err < 1e-4 || (a - fd).abs() < 1e-6,
                    "config {:?}/{:?}/{:?} ctx={} path={}: tensor {ti} coord {i}: \
                     analytic {a:.6e} vs fd {fd:.6e}",
                    self.config.context_aggregator,
                    self.config.path_repr,
                    self.config.path_aggregator,
                    self.config.use_context,
                    self.config.use_path,
                );
                worst = worst.max(rel_err);
                checked += 1;
            }
        }
        (checked, worst)
    }
}

#[test]
fn criterion05_gradient_correctness() {
    let started = Instant::now();
    let kinds = [
        AggregatorKind::Mean,
        AggregatorKind::Concat,
        AggregatorKind::Cross,
    ];
    let reprs = [PathReprKind::Embedding, PathReprKind::Rnn];
    let aggs = [PathAggKind::Attention, PathAggKind::Mean];
    let mut combos = Vec::new();
    for kind in kinds {
        for repr in reprs {
            for agg in aggs {
                combos.push((true, true, kind, repr, agg)); // full model
            }
        }
        combos.push((true, false, kind, PathReprKind::Embedding, PathAggKind::Mean)); // Con
    }
    for repr in reprs {
        combos.push((false, true, AggregatorKind::Concat, repr, PathAggKind::Mean)); // Path
    }
    assert_eq!(combos.len(), 17, "12 full + 3 Con + 2 Path legal combos");

    let mut total = 0usize;
    let mut worst: f64 = 0.0;
    for (i, (use_c, use_p, kind, repr, agg)) in combos.into_iter().enumerate() {
        let seed = 600 + i as u64;
        let graph = erdos_renyi_graph(9, 16, 4, seed);
        let config = ModelConfig {
            use_context: use_c,
            use_path: use_p,
            context_hops: 2,
            max_path_len: 3,
            hidden_dim: 6,
            context_aggregator: kind,
            path_repr: repr,
            path_aggregator: agg,
            n_relations: 4,
            seed,
        };
        let vocab = build_vocabulary(&graph, config.max_path_len);
        let problem = GradProblem {
            graph,
            config,
            vocab,
            examples: vec![1, 5, 9],
        };
        let (n, w) = problem.check();
        total += n;
        worst = worst.max(w);
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    eprintln!(
        "criterion 5 (gradient correctness): PASS — 17 configurations, {total} coordinates, \
         worst relative error {worst:.2e} (< 1e-4), {elapsed:.1?}"
    );
}

// ---------------------------------------------------------------------------
// 6. Path enumeration against a naive oracle
// ---------------------------------------------------------------------------
fn naive_paths(
    graph: &KnowledgeGraph,
    h: u32,
    t: u32,
    l_max: usize,
    masked: Option<u32>,
) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    if h == t {
        return out;
    }
    let mut stack = vec![(h, vec![h], Vec::new())];
    while let Some((v, visited, rels)) = stack.pop() {
        for (e, tr) in graph.triples.iter().enumerate() {
            if Some(e as u32) == masked {
                continue;
            }
            let u = if tr.head == v {
                tr.tail
            } else if tr.tail == v {
                tr.head
            } else {
                continue;
            };
            let mut next = rels.clone();
            next.push(tr.relation);
            if u == t {
                out.push(next);
            } else if next.len() < l_max && !visited.contains(&u) {
                let mut vis = visited.clone();
                vis.push(u);
                stack.push((u, vis, next));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion06_path_oracle() {
    let mut cases = 0usize;
    for seed in 0..100u64 {
        let n = 4 + (seed % 9) as usize; // up to 12 nodes
        let m = n + (seed % 9) as usize;
        let graph = erdos_renyi_graph(n, m, 3, 7000 + seed);
        for h in 0..n as u32 {
            for t in 0..n as u32 {
                for l in 1..=4usize {
                    for mask in [None, Some((seed % m as u64) as u32)] {
                        let mut fast = enumerate_paths(&graph, h, t, l, mask);
                        fast.sort();
                        assert_eq!(
                            fast,
                            naive_paths(&graph, h, t, l, mask),
                            "seed {seed} pair ({h},{t}) L={l} mask {mask:?}"
                        );
                        cases += 1;
                    }
                }
            }
        }
    }
    eprintln!("criterion 6 (path oracle): PASS — 100 graphs, {cases} pair/length/mask cases");
}

// ---------------------------------------------------------------------------
// 7. Inductive degradation bound on DDB14
// ---------------------------------------------------------------------------
#[test]
#[ignore = "requires the DDB14 dataset under $RELMP_DATA_ROOT or ./data (not redistributable)"]
fn criterion07_ddb14_fully_inductive() {
    let dir = dataset_dir("DDB14");
    let tmp = tempfile::tempdir().unwrap();
    let metrics = train_cli(&dir, tmp.path(), &["--inductive-ratio", "1.0"]);
    let mrr = metrics["mrr"].as_f64().unwrap();
    let floor = 3.0 * uniform_baseline_mrr(14);
    assert!(
        mrr >= floor,
        "fully inductive MRR {mrr:.4} below 3x uniform ({floor:.4})"
    );
    eprintln!(
        "criterion 7 (DDB14 fully inductive): PASS — MRR {mrr:.4} >= 3x uniform {floor:.4}"
    );
}

// ---------------------------------------------------------------------------
// 8. Explainability sanity on DDB14
// ---------------------------------------------------------------------------
fn normalize(name: &str) -> String {
    name.to_ascii_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
#[ignore = "requires the DDB14 dataset under $RELMP_DATA_ROOT or ./data (not redistributable)"]
fn criterion08_ddb14_explanations() {
    let dir = dataset_dir("DDB14");
    let tmp = tempfile::tempdir().unwrap();
    train_cli(
        &dir,
        tmp.path(),
        &["--context-hops", "1", "--max-path-len", "2"],
    );
    let ck = checkpoint::load(&tmp.path().join("checkpoint")).unwrap();
    let table = extract_explanations(&ck.store, &ck.vocab, 3).unwrap();

    let target = ck
        .manifest
        .relations
        .iter()
        .position(|n| normalize(n) == "is associated with")
        .expect("DDB14 should contain the `is associated with` relation") as u32;
    let top_path = &table.per_relation[target as usize].paths[0].0;
    assert_eq!(
        top_path,
        &vec![target, target],
        "top path for `is associated with` is {top_path:?}, expected ({target}, {target})"
    );

    let n_rel = ck.manifest.relations.len();
    let diagonal = (0..n_rel as u32).filter(|&r| table.is_diagonal(r)).count();
    assert!(
        diagonal >= 10,
        "diagonal dominance holds for only {diagonal} of {n_rel} relations (need >= 10)"
    );
    eprintln!(
        "criterion 8 (DDB14 explanations): PASS — transitive rule recovered, \
         diagonal dominance {diagonal}/{n_rel}"
    );
}

// ---------------------------------------------------------------------------
// 9. Parameter count for the DDB14 default configuration
// ---------------------------------------------------------------------------
#[test]
#[ignore = "requires the DDB14 dataset under $RELMP_DATA_ROOT or ./data (not redistributable)"]
fn criterion09_ddb14_parameter_count() {
    let dir = dataset_dir("DDB14");
    let ds = load_dataset(&dir).unwrap();
    let config = ModelConfig {
        context_hops: 3,
        max_path_len: 4,
        hidden_dim: 64,
        n_relations: ds.relations.len(),
        seed: 1,
        ..ModelConfig::default()
    };
    let vocab = build_vocabulary(&ds.graph, config.max_path_len);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = config.init_params(vocab.len(), &mut rng).unwrap();
    let count = store.param_count();
    assert!(
        (20_000..=200_000).contains(&count),
        "parameter count {count} outside [2e4, 2e5]"
    );
    eprintln!(
        "criterion 9 (parameter count): PASS — {count} parameters (vocabulary {}), within [2e4, 2e5]",
        vocab.len()
    );
}

// ---------------------------------------------------------------------------
// 10. Bit-level determinism of CLI runs
// ---------------------------------------------------------------------------
#[test]
fn criterion10_deterministic_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("synth");
    run_cli(&[
        "synth",
        "--output",
        data.to_str().unwrap(),
        "--entities-per-type",
        "20",
        "--seed",
        "11",
    ]);
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        run_cli(&[
            "train",
            "--dataset",
            data.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
            "--seed",
            "33",
            "--deterministic",
            "--epochs",
            "5",
            "--dim",
            "16",
            "--context-hops",
            "2",
            "--max-path-len",
            "2",
            "--quiet",
        ]);
        outputs.push(out);
    }
    for file in ["metrics.json", "curves.csv", "checkpoint/manifest.json"] {
        let a = std::fs::read(outputs[0].join(file)).unwrap();
        let b = std::fs::read(outputs[1].join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical deterministic runs");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outputs[0].join("checkpoint/manifest.json")).unwrap())
            .unwrap();
    for tensor in manifest["tensors"].as_array().unwrap() {
        let name = tensor["name"].as_str().unwrap();
        let rel = format!("checkpoint/tensors/{name}.bin");
        let a = std::fs::read(outputs[0].join(&rel)).unwrap();
        let b = std::fs::read(outputs[1].join(&rel)).unwrap();
        assert_eq!(a, b, "tensor blob {name} differs");
    }
    eprintln!("criterion 10 (determinism): PASS — checkpoints and metrics byte-identical");
}
