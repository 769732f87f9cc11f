//! Command-line runner: training, evaluation, inductive splits, graph
//! statistics, explanation export, path census, and synthetic fixtures.
//!
//! Exit codes: 0 success, 1 usage/configuration, 2 data, 3 numerical failure.

use std::collections::HashSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use relmp::analysis::{
    count_message_cost, explanations_to_csv, extract_explanations, line_graph_stats, path_census,
    write_explanations_csv, Scheme,
};
use relmp::checkpoint::{self, sha256_hex};
use relmp::eval::{build_filter_sets, evaluate};
use relmp::graph::{
    load_dataset, make_inductive_split, resolve_dataset_dir, write_dataset, Dataset, SplitManifest,
};
use relmp::model::ModelConfig;
use relmp::params::{AdamConfig, AggregatorKind, PathAggKind, PathReprKind};
use relmp::paths::{enumerate_training_paths, read_path_cache, write_path_cache, PathVocabulary};
use relmp::synthetic::rule_kg;
use relmp::train::{train, TrainConfig, TrainInputs};
use relmp::Error;

const DATA_ROOT_ENV: &str = "RELMP_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "relmp",
    about = "Relational message passing for knowledge-graph relation prediction",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, curves, and test metrics
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split
    Evaluate(EvaluateArgs),
    /// Generate an inductive split manifest
    Split(SplitArgs),
    /// Degree statistics, message-passing cost counters, line-graph stats
    Stats(StatsArgs),
    /// Export important contexts and paths from a trained checkpoint
    Explain(ExplainArgs),
    /// Fraction of possible relational paths of a given length that occur
    Census(CensusArgs),
    /// Write a synthetic rule-based dataset (for demos and tests)
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ContextAggArg {
    Mean,
    Concat,
    Cross,
}

impl From<ContextAggArg> for AggregatorKind {
    fn from(a: ContextAggArg) -> Self {
        match a {
            ContextAggArg::Mean => AggregatorKind::Mean,
            ContextAggArg::Concat => AggregatorKind::Concat,
            ContextAggArg::Cross => AggregatorKind::Cross,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PathTypeArg {
    Embedding,
    Rnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum PathAggArg {
    Mean,
    Attention,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory, or a name resolved under $RELMP_DATA_ROOT
    #[arg(long)]
    dataset: String,
    /// Output directory (default: runs/<dataset-name>)
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_context: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_path: bool,
    /// Context hops K (default: per-dataset setting, else 2)
    #[arg(long)]
    context_hops: Option<usize>,
    /// Maximum relational path length (default: per-dataset setting, else 3)
    #[arg(long)]
    max_path_len: Option<usize>,
    /// Hidden state dimension
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, value_enum, default_value_t = ContextAggArg::Concat)]
    context_aggregator: ContextAggArg,
    #[arg(long, value_enum, default_value_t = PathTypeArg::Embedding)]
    path_type: PathTypeArg,
    #[arg(long, value_enum, default_value_t = PathAggArg::Attention)]
    path_aggregator: PathAggArg,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    /// L2 loss weight
    #[arg(long, default_value_t = 1e-7)]
    l2: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Remove this fraction of test entities from the training graph
    #[arg(long)]
    inductive_ratio: Option<f64>,
    /// Worker threads (0 = available parallelism)
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Single-threaded, bit-reproducible execution
    #[arg(long)]
    deterministic: bool,
    /// Filtered ranking for the final test metrics
    #[arg(long)]
    filtered: bool,
    /// Path-enumeration cache file (default: under the output directory)
    #[arg(long)]
    path_cache: Option<PathBuf>,
    /// Suppress per-epoch progress lines
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: String,
    /// Filtered ranking (mask other known-true relations of the pair)
    #[arg(long)]
    filtered: bool,
    /// Write per-example CSV (head, tail, true_relation, rank)
    #[arg(long)]
    per_example: Option<PathBuf>,
    /// Write the metrics JSON here as well as to stdout
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    ratio: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output manifest path (default: stdout)
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: String,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Output CSV path (default: stdout)
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CensusArgs {
    #[arg(long)]
    dataset: String,
    /// Path length L
    #[arg(long)]
    len: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    /// Entities per type (the world has four types)
    #[arg(long, default_value_t = 30)]
    entities_per_type: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<Error>()
                .map_or(2, |e| e.exit_code())
                .clamp(0, 255) as u8;
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Split(args) => cmd_split(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Census(args) => cmd_census(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

/// Print to stdout, tolerating a closed pipe (e.g. `relmp ... | head`).
fn print_out(s: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = writeln!(out, "{s}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

fn open_dataset(arg: &str) -> anyhow::Result<(Dataset, PathBuf)> {
    let root = std::env::var(DATA_ROOT_ENV).ok();
    let dir = resolve_dataset_dir(arg, root.as_deref());
    let ds = load_dataset(&dir)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    Ok((ds, dir))
}

/// Per-dataset default (context hops, max path length); recognized names get
/// their published settings.
fn dataset_defaults(name: &str) -> Option<(usize, usize)> {
    match name.to_ascii_lowercase().as_str() {
        "fb15k" => Some((2, 2)),
        "fb15k-237" | "fb15k237" => Some((2, 3)),
        "wn18" => Some((3, 3)),
        "wn18rr" => Some((3, 4)),
        "nell995" => Some((2, 3)),
        "ddb14" => Some((3, 4)),
        _ => None,
    }
}

/// The portion of a run configuration that identifies the experiment
/// (excludes paths and thread counts, which do not affect results).
#[derive(Serialize)]
struct HashedConfig<'a> {
    model: &'a ModelConfig,
    epochs: usize,
    batch_size: usize,
    adam: &'a AdamConfig,
    inductive_ratio: Option<f64>,
    filtered: bool,
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    dataset_dir: String,
    output_dir: String,
    #[serde(flatten)]
    hashed: &'a HashedConfig<'a>,
    threads: usize,
    deterministic: bool,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct MetricsFile {
    mrr: f64,
    hit1: f64,
    hit3: f64,
    n_examples: usize,
    config_hash: String,
    best_epoch: usize,
    final_epoch: FinalEpochMetrics,
}

#[derive(Serialize)]
struct FinalEpochMetrics {
    mrr: f64,
    hit1: f64,
    hit3: f64,
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let (ds, dir) = open_dataset(&args.dataset)?;
    let dataset_name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| args.dataset.clone());

    let defaults = dataset_defaults(&dataset_name);
    if defaults.is_none() && (args.context_hops.is_none() || args.max_path_len.is_none()) {
        eprintln!(
            "warning: no stored settings for dataset `{dataset_name}`; defaulting to \
             --context-hops 2 --max-path-len 3"
        );
    }
    let (def_hops, def_len) = defaults.unwrap_or((2, 3));
    let hops = args.context_hops.unwrap_or(def_hops);
    let max_len = args.max_path_len.unwrap_or(def_len);

    let output = args
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&dataset_name));
    fs::create_dir_all(&output).map_err(|e| Error::Io {
        path: output.clone(),
        source: e,
    })?;

    let model = ModelConfig {
        use_context: args.use_context,
        use_path: args.use_path,
        context_hops: hops,
        max_path_len: max_len,
        hidden_dim: args.dim,
        context_aggregator: args.context_aggregator.into(),
        path_repr: match args.path_type {
            PathTypeArg::Embedding => PathReprKind::Embedding,
            PathTypeArg::Rnn => PathReprKind::Rnn,
        },
        path_aggregator: match args.path_aggregator {
            PathAggArg::Mean => PathAggKind::Mean,
            PathAggArg::Attention => PathAggKind::Attention,
        },
        n_relations: ds.relations.len(),
        seed: args.seed,
    };
    model.validate()?;
    let adam = AdamConfig {
        lr: args.lr,
        l2_weight: args.l2,
        ..AdamConfig::default()
    };

    let hashed = HashedConfig {
        model: &model,
        epochs: args.epochs,
        batch_size: args.batch_size,
        adam: &adam,
        inductive_ratio: args.inductive_ratio,
        filtered: args.filtered,
    };
    let config_hash = sha256_hex(serde_json::to_string(&hashed)?.as_bytes());
    let resolved = ResolvedConfig {
        dataset_dir: dir.display().to_string(),
        output_dir: output.display().to_string(),
        hashed: &hashed,
        threads: args.threads,
        deterministic: args.deterministic,
        config_hash: &config_hash,
    };
    fs::write(
        output.join("config.json"),
        serde_json::to_string_pretty(&resolved)?,
    )?;
    println!(
        "dataset {dataset_name}: {} entities, {} relations, {} train / {} valid / {} test; \
         hops {hops}, path len {max_len}, config {}",
        ds.entities.len(),
        ds.relations.len(),
        ds.train.len(),
        ds.valid.len(),
        ds.test.len(),
        &config_hash[..12]
    );

    // Optional inductive split.
    let split = args.inductive_ratio.map(|ratio| {
        let s = make_inductive_split(&ds.graph, &ds.test, ratio, args.seed);
        eprintln!(
            "inductive split: removed {} test entities, {} of {} training edges remain",
            s.removed_entities.len(),
            s.train_graph.n_edges(),
            ds.graph.n_edges()
        );
        s
    });
    if let Some(s) = &split {
        fs::write(
            output.join("split.json"),
            serde_json::to_string_pretty(&s.manifest())?,
        )?;
    }
    let (train_graph, eval_graph) = match &split {
        Some(s) => (&s.train_graph, Some(&s.eval_graph)),
        None => (&ds.graph, None),
    };

    // Path cache and vocabulary.
    let pool = rayon_pool(if args.deterministic { 1 } else { args.threads })?;
    let (vocab, edge_paths) = if model.use_path {
        let hash = train_graph.content_hash();
        let cache_path = args.path_cache.clone().unwrap_or_else(|| {
            output.join(format!("paths_L{}_{}.bin", max_len, &hash[..12]))
        });
        let records = match read_path_cache(&cache_path, &hash, max_len) {
            Ok(records) if records.len() == train_graph.n_edges() => {
                eprintln!("loaded path cache {}", cache_path.display());
                records
            }
            Ok(_) | Err(_) => {
                let t0 = Instant::now();
                let records = pool.install(|| enumerate_training_paths(train_graph, max_len));
                write_path_cache(&cache_path, &hash, max_len, &records)?;
                eprintln!(
                    "enumerated paths for {} training pairs in {:.1?} (cache: {})",
                    records.len(),
                    t0.elapsed(),
                    cache_path.display()
                );
                records
            }
        };
        let vocab = PathVocabulary::from_path_lists(&records);
        eprintln!("path vocabulary: {} paths (+1 oov slot)", vocab.len());
        (vocab, Some(records))
    } else {
        (PathVocabulary::default(), None)
    };

    let train_cfg = TrainConfig {
        model: model.clone(),
        epochs: args.epochs,
        batch_size: args.batch_size,
        adam,
        threads: args.threads,
        deterministic: args.deterministic,
        quiet: args.quiet,
    };
    let inputs = TrainInputs {
        graph: train_graph,
        valid: &ds.valid,
        eval_graph,
        vocab: &vocab,
        edge_paths: edge_paths.as_deref(),
    };
    let out = train(&inputs, &train_cfg)?;
    println!(
        "trained {} parameters; best validation MRR {:.4} at epoch {}",
        out.best_store.param_count(),
        out.best_valid.as_ref().map_or(0.0, |r| r.mrr),
        out.best_epoch
    );

    // Curves CSV.
    let mut curves = String::from("epoch,mean_ce,l2_penalty,total,valid_mrr,valid_hit1,valid_hit3\n");
    for c in &out.curves {
        curves.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.epoch, c.loss.mean_ce, c.loss.l2_penalty, c.loss.total, c.valid_mrr, c.valid_hit1,
            c.valid_hit3
        ));
    }
    fs::write(output.join("curves.csv"), curves)?;

    // Checkpoint of the validation-selected parameters.
    checkpoint::save(
        &output.join("checkpoint"),
        &out.best_store,
        &model,
        &vocab,
        ds.relations.names(),
        out.best_epoch,
        out.best_valid.as_ref().map(|r| r.mrr),
    )?;

    // Test metrics with the selected parameters (and the final-epoch ones
    // for reference).
    let final_graph = eval_graph.unwrap_or(train_graph);
    let filter = args
        .filtered
        .then(|| build_filter_sets(&[&ds.train, &ds.valid, &ds.test]));
    let test_report = pool.install(|| {
        evaluate(
            &ds.test,
            final_graph,
            &out.best_store,
            &model,
            filter.as_ref(),
            Some(&vocab),
        )
    });
    let final_report = pool.install(|| {
        evaluate(
            &ds.test,
            final_graph,
            &out.store,
            &model,
            filter.as_ref(),
            Some(&vocab),
        )
    });
    let metrics = MetricsFile {
        mrr: test_report.mrr,
        hit1: test_report.hit1,
        hit3: test_report.hit3,
        n_examples: test_report.n_examples,
        config_hash: config_hash.clone(),
        best_epoch: out.best_epoch,
        final_epoch: FinalEpochMetrics {
            mrr: final_report.mrr,
            hit1: final_report.hit1,
            hit3: final_report.hit3,
        },
    };
    let metrics_json = serde_json::to_string_pretty(&metrics)?;
    fs::write(output.join("metrics.json"), &metrics_json)?;
    print_out(&metrics_json);
    println!(
        "wrote {} (total {:.1?})",
        output.display(),
        started.elapsed()
    );
    Ok(())
}

fn rayon_pool(threads: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("failed to build thread pool: {e}")))?)
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let (ds, _) = open_dataset(&args.dataset)?;
    if ck.manifest.config.n_relations != ds.relations.len() {
        return Err(Error::RelationCountMismatch {
            checkpoint: ck.manifest.config.n_relations,
            dataset: ds.relations.len(),
        }
        .into());
    }
    let filter = args
        .filtered
        .then(|| build_filter_sets(&[&ds.train, &ds.valid, &ds.test]));
    let pool = rayon_pool(args.threads)?;
    let mut report = pool.install(|| {
        evaluate(
            &ds.test,
            &ds.graph,
            &ck.store,
            &ck.manifest.config,
            filter.as_ref(),
            Some(&ck.vocab),
        )
    });
    report.config_hash = Some(sha256_hex(
        serde_json::to_string(&ck.manifest.config)?.as_bytes(),
    ));

    if let Some(path) = &args.per_example {
        let mut csv = String::from("head,tail,true_relation,rank\n");
        for (t, rank) in ds.test.iter().zip(&report.ranks) {
            csv.push_str(&format!(
                "{},{},{},{rank}\n",
                ds.entities.name(t.head),
                ds.entities.name(t.tail),
                ds.relations.name(t.relation),
            ));
        }
        fs::write(path, csv)?;
    }

    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.output {
        fs::write(path, &json)?;
    }
    print_out(&json);
    Ok(())
}

fn cmd_split(args: SplitArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&args.ratio) {
        return Err(Error::Config(format!("ratio must be in [0, 1], got {}", args.ratio)).into());
    }
    let (ds, _) = open_dataset(&args.dataset)?;
    let split = make_inductive_split(&ds.graph, &ds.test, args.ratio, args.seed);
    let manifest: SplitManifest = split.manifest();
    let json = serde_json::to_string_pretty(&manifest)?;
    match &args.output {
        Some(path) => {
            fs::write(path, &json)?;
            eprintln!(
                "removed {} entities; {} of {} training edges remain; wrote {}",
                manifest.removed_entity_ids.len(),
                split.train_graph.n_edges(),
                ds.graph.n_edges(),
                path.display()
            );
        }
        None => print_out(&json),
    }
    Ok(())
}

#[derive(Serialize)]
struct StatsOutput {
    degree: relmp::DegreeStats,
    costs: Vec<relmp::analysis::CostReport>,
    line_graph: relmp::analysis::LineGraphStats,
}

fn cmd_stats(args: StatsArgs) -> anyhow::Result<()> {
    let (ds, _) = open_dataset(&args.dataset)?;
    let out = StatsOutput {
        degree: ds.graph.degree_stats(),
        costs: [Scheme::NodeBased, Scheme::Relational, Scheme::Alternate]
            .into_iter()
            .map(|s| count_message_cost(&ds.graph, s))
            .collect(),
        line_graph: line_graph_stats(&ds.graph)?,
    };
    print_out(&serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> anyhow::Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let table = extract_explanations(&ck.store, &ck.vocab, args.top_k)?;
    let relations = relmp::Dictionary::from_names(ck.manifest.relations.clone());
    match &args.output {
        Some(path) => {
            write_explanations_csv(path, &table, &relations)?;
            eprintln!("wrote {}", path.display());
        }
        None => print_out(explanations_to_csv(&table, &relations).trim_end()),
    }
    Ok(())
}

fn cmd_census(args: CensusArgs) -> anyhow::Result<()> {
    let (ds, _) = open_dataset(&args.dataset)?;
    let fraction = path_census(&ds.graph, args.len)?;
    #[derive(Serialize)]
    struct CensusOutput {
        len: usize,
        n_relations: usize,
        occupied_fraction: f64,
    }
    print_out(&serde_json::to_string_pretty(&CensusOutput {
        len: args.len,
        n_relations: ds.graph.n_relations,
        occupied_fraction: fraction,
    })?);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    if args.entities_per_type == 0 {
        return Err(Error::Config("entities-per-type must be positive".into()).into());
    }
    let ds = rule_kg(args.entities_per_type, args.seed);
    write_dataset(&args.output, &ds)?;
    let rels: HashSet<_> = ds.train.iter().map(|t| t.relation).collect();
    eprintln!(
        "wrote {}: {} entities, {} relations ({} in train), {} train / {} valid / {} test",
        args.output.display(),
        ds.entities.len(),
        ds.relations.len(),
        rels.len(),
        ds.train.len(),
        ds.valid.len(),
        ds.test.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_defaults_match_published_settings() {
        assert_eq!(dataset_defaults("DDB14"), Some((3, 4)));
        assert_eq!(dataset_defaults("wn18rr"), Some((3, 4)));
        assert_eq!(dataset_defaults("WN18"), Some((3, 3)));
        assert_eq!(dataset_defaults("FB15K"), Some((2, 2)));
        assert_eq!(dataset_defaults("FB15K-237"), Some((2, 3)));
        assert_eq!(dataset_defaults("NELL995"), Some((2, 3)));
        assert_eq!(dataset_defaults("mystery"), None);
    }
}
