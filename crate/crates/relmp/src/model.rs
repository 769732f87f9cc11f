//! The relation predictor: combines the context branch (message passing) and
//! the path branch (per-path vectors pooled by attention or mean) into
//! relation scores, with hand-structured reverse-mode gradients for the whole
//! pipeline.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{
    context_backward, context_forward, ContextTape, Layer0Tables, PairSubgraph, SubgraphScratch,
};
use crate::error::{Error, Result};
use crate::graph::{EdgeId, EntityId, KnowledgeGraph, RelationId};
use crate::params::{
    AggregatorKind, ContextGrads, ContextParams, ExampleGrads, ParameterStore, PathAggKind,
    PathGrads, PathParams, PathReprKind,
};
use crate::paths::{PathVocabulary, RelationalPath};
use crate::tensor::{axpy, dot, log_softmax_at, matvec_t_acc, outer_acc, softmax, vecmat_acc};

/// Which branches run and how they are parameterized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub use_context: bool,
    pub use_path: bool,
    pub context_hops: usize,
    pub max_path_len: usize,
    pub hidden_dim: usize,
    pub context_aggregator: AggregatorKind,
    pub path_repr: PathReprKind,
    pub path_aggregator: PathAggKind,
    pub n_relations: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_context: true,
            use_path: true,
            context_hops: 2,
            max_path_len: 3,
            hidden_dim: 64,
            context_aggregator: AggregatorKind::Concat,
            path_repr: PathReprKind::Embedding,
            path_aggregator: PathAggKind::Attention,
            n_relations: 0,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_context && !self.use_path {
            return Err(Error::Config(
                "at least one of the context and path branches must be enabled".into(),
            ));
        }
        if self.use_path
            && self.path_aggregator == PathAggKind::Attention
            && !self.use_context
        {
            return Err(Error::Config(
                "the attention path aggregator needs the context branch (use --path-aggregator mean)"
                    .into(),
            ));
        }
        if self.use_context && !(1..=4).contains(&self.context_hops) {
            return Err(Error::Config(format!(
                "context hops must be in 1..=4, got {}",
                self.context_hops
            )));
        }
        if self.use_path && !(1..=4).contains(&self.max_path_len) {
            return Err(Error::Config(format!(
                "max path length must be in 1..=4, got {}",
                self.max_path_len
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden dimension must be positive".into()));
        }
        if self.n_relations == 0 {
            return Err(Error::Config("relation count must be positive".into()));
        }
        Ok(())
    }

    /// Initialize a parameter store for this configuration. All randomness
    /// (here and in training) flows from one seeded generator.
    pub fn init_params(&self, vocab_size: usize, rng: &mut ChaCha8Rng) -> Result<ParameterStore> {
        self.validate()?;
        let context = self.use_context.then(|| {
            ContextParams::new(
                self.context_aggregator,
                self.context_hops,
                self.n_relations,
                self.hidden_dim,
                rng,
            )
        });
        let path = self.use_path.then(|| match self.path_repr {
            PathReprKind::Embedding => PathParams::new_embedding(vocab_size, self.n_relations, rng),
            PathReprKind::Rnn => PathParams::new_rnn(self.n_relations, self.hidden_dim, rng),
        });
        Ok(ParameterStore {
            context,
            path,
            step: 0,
        })
    }
}

/// Per-example path inputs, already shaped for the configured representation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathData {
    /// Vocabulary ids (embedding representation).
    Ids(Vec<u32>),
    /// Raw relation sequences (recurrent representation).
    Raw(Vec<RelationalPath>),
}

impl PathData {
    pub fn from_paths(
        paths: &[RelationalPath],
        vocab: &PathVocabulary,
        repr: PathReprKind,
    ) -> PathData {
        match repr {
            PathReprKind::Embedding => {
                PathData::Ids(paths.iter().map(|p| vocab.lookup(p)).collect())
            }
            PathReprKind::Rnn => PathData::Raw(paths.to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            PathData::Ids(v) => v.len(),
            PathData::Raw(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Recurrent-cell intermediates for one path.
#[derive(Debug, Clone)]
pub struct RnnTape {
    pub rels: Vec<RelationId>,
    /// Post-tanh hidden states, one per step.
    pub hidden: Vec<Vec<f64>>,
}

/// Forward intermediates of the path branch.
#[derive(Debug)]
pub struct PathTape {
    pub ids: Vec<u32>,
    pub rnn: Vec<RnnTape>,
    /// Per-path vectors `s_P`.
    pub vectors: Vec<Vec<f64>>,
    /// Attention weights (empty for the mean aggregator or an empty path set).
    pub attention: Vec<f64>,
    /// Pooled `s_{h->t}`.
    pub aggregated: Vec<f64>,
}

/// Everything forward computed for one example.
#[derive(Debug)]
pub struct ForwardTape {
    pub scores: Vec<f64>,
    pub context: Option<ContextTape>,
    pub path: Option<PathTape>,
}

/// Compute per-path vectors. Embedding kind expects vocabulary ids (the OOV
/// id maps to the zero-initialized final row); the recurrent kind consumes
/// raw relation sequences and needs no vocabulary.
pub fn path_representation(params: &PathParams, data: &PathData) -> (Vec<Vec<f64>>, Vec<RnnTape>) {
    match (params, data) {
        (PathParams::Embedding { table }, PathData::Ids(ids)) => {
            let vectors = ids
                .iter()
                .map(|&id| {
                    assert!(
                        (id as usize) < table.rows,
                        "path id {id} outside the embedding table"
                    );
                    table.row(id as usize).to_vec()
                })
                .collect();
            (vectors, Vec::new())
        }
        (PathParams::Rnn { .. }, PathData::Raw(raw)) => {
            let mut vectors = Vec::with_capacity(raw.len());
            let mut tapes = Vec::with_capacity(raw.len());
            for rels in raw {
                let (v, tape) = rnn_forward(params, rels);
                vectors.push(v);
                tapes.push(tape);
            }
            (vectors, tapes)
        }
        _ => panic!("path data does not match the path representation kind"),
    }
}

fn rnn_forward(params: &PathParams, rels: &[RelationId]) -> (Vec<f64>, RnnTape) {
    let PathParams::Rnn {
        embed,
        wx,
        wh,
        bh,
        wo,
        bo,
    } = params
    else {
        unreachable!()
    };
    let d = wx.cols;
    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(rels.len());
    let mut h = vec![0.0; d];
    for &r in rels {
        let mut z = bh.data.clone();
        vecmat_acc(embed.row(r as usize), &wx.data, d, &mut z);
        vecmat_acc(&h, &wh.data, d, &mut z);
        for v in &mut z {
            *v = v.tanh();
        }
        h = z;
        hidden.push(h.clone());
    }
    let mut out = bo.data.clone();
    vecmat_acc(&h, &wo.data, wo.cols, &mut out);
    (
        out,
        RnnTape {
            rels: rels.to_vec(),
            hidden,
        },
    )
}

/// Pool per-path vectors into `s_{h->t}`.
///
/// Attention weighs each path by `exp(s_P . s_(h,t))`, normalized over the
/// pair's path set; mean is the unweighted arithmetic mean. An empty path set
/// pools to the zero vector.
pub fn aggregate_paths(
    vectors: &[Vec<f64>],
    context: Option<&[f64]>,
    kind: PathAggKind,
    n_relations: usize,
) -> (Vec<f64>, Vec<f64>) {
    if vectors.is_empty() {
        return (vec![0.0; n_relations], Vec::new());
    }
    match kind {
        PathAggKind::Mean => {
            let mut agg = vec![0.0; n_relations];
            for v in vectors {
                axpy(1.0, v, &mut agg);
            }
            let inv = 1.0 / vectors.len() as f64;
            agg.iter_mut().for_each(|x| *x *= inv);
            (agg, Vec::new())
        }
        PathAggKind::Attention => {
            let ctx = context.expect("attention aggregation requires the context vector");
            let logits: Vec<f64> = vectors.iter().map(|v| dot(v, ctx)).collect();
            let weights = softmax(&logits);
            let mut agg = vec![0.0; n_relations];
            for (v, &w) in vectors.iter().zip(&weights) {
                axpy(w, v, &mut agg);
            }
            (agg, weights)
        }
    }
}

/// The composed predictor over a fixed graph and parameter store.
pub struct Model<'a> {
    pub config: &'a ModelConfig,
    pub store: &'a ParameterStore,
    pub graph: &'a KnowledgeGraph,
    /// First-layer projection tables; must correspond to the store's current
    /// weights when present.
    pub layer0: Option<&'a Layer0Tables>,
}

impl<'a> Model<'a> {
    pub fn new(config: &'a ModelConfig, store: &'a ParameterStore, graph: &'a KnowledgeGraph) -> Self {
        Model {
            config,
            store,
            graph,
            layer0: None,
        }
    }

    pub fn with_tables(mut self, tables: Option<&'a Layer0Tables>) -> Self {
        self.layer0 = tables;
        self
    }

    /// Forward pass for one pair. `scores = s_(h,t) + s_{h->t}`, with the
    /// disabled branch contributing zero; softmax is applied downstream.
    pub fn forward(
        &self,
        head: EntityId,
        tail: EntityId,
        masked_edge: Option<EdgeId>,
        path_data: Option<&PathData>,
        scratch: &mut SubgraphScratch,
    ) -> ForwardTape {
        let n_rel = self.config.n_relations;
        let mut scores = vec![0.0; n_rel];

        let context = self.store.context.as_ref().map(|ctx| {
            let sub = PairSubgraph::build(
                self.graph,
                head,
                tail,
                masked_edge,
                ctx.hops,
                scratch,
            );
            let tape = context_forward(self.graph, sub, masked_edge, ctx, self.layer0);
            axpy(1.0, &tape.output, &mut scores);
            tape
        });

        let path = self.store.path.as_ref().map(|pp| {
            let data = path_data.expect("path branch enabled but no path data supplied");
            let (vectors, rnn) = path_representation(pp, data);
            let ctx_vec = context.as_ref().map(|t| t.output.as_slice());
            let (aggregated, attention) = aggregate_paths(
                &vectors,
                ctx_vec,
                self.config.path_aggregator,
                n_rel,
            );
            axpy(1.0, &aggregated, &mut scores);
            let ids = match data {
                PathData::Ids(ids) => ids.clone(),
                PathData::Raw(_) => Vec::new(),
            };
            PathTape {
                ids,
                rnn,
                vectors,
                attention,
                aggregated,
            }
        });

        ForwardTape {
            scores,
            context,
            path,
        }
    }

    /// Probability distribution over relation types for a pair.
    pub fn predict(
        &self,
        head: EntityId,
        tail: EntityId,
        masked_edge: Option<EdgeId>,
        path_data: Option<&PathData>,
        scratch: &mut SubgraphScratch,
    ) -> Vec<f64> {
        softmax(
            &self
                .forward(head, tail, masked_edge, path_data, scratch)
                .scores,
        )
    }

    /// Cross-entropy of the tape's scores against `label`.
    pub fn cross_entropy(&self, tape: &ForwardTape, label: RelationId) -> f64 {
        -log_softmax_at(&tape.scores, label as usize)
    }

    /// Reverse-mode gradients of `scale * CE(scores, label)` for one example.
    /// `scale` is typically `1 / batch_size` so that summed example gradients
    /// differentiate the mean batch loss.
    pub fn backward(&self, tape: &ForwardTape, label: RelationId, scale: f64) -> ExampleGrads {
        let n_rel = self.config.n_relations;
        let probs = softmax(&tape.scores);
        let mut d_scores: Vec<f64> = probs.iter().map(|&p| p * scale).collect();
        d_scores[label as usize] -= scale;

        // ds_(h,t) collects the direct score term plus, under attention, the
        // logit term through every path weight.
        let mut d_context_out = if tape.context.is_some() {
            d_scores.clone()
        } else {
            Vec::new()
        };

        let path_grads = tape.path.as_ref().map(|pt| {
            let pp = self.store.path.as_ref().unwrap();
            let n = pt.vectors.len();
            let mut d_vectors: Vec<Vec<f64>> = vec![vec![0.0; n_rel]; n];
            if n > 0 {
                match self.config.path_aggregator {
                    PathAggKind::Mean => {
                        let inv = 1.0 / n as f64;
                        for dv in &mut d_vectors {
                            axpy(inv, &d_scores, dv);
                        }
                    }
                    PathAggKind::Attention => {
                        let ctx_out = &tape.context.as_ref().unwrap().output;
                        let alpha = &pt.attention;
                        // s_agg = sum_i alpha_i s_i with alpha = softmax(s_i . s_c)
                        let d_alpha: Vec<f64> = pt
                            .vectors
                            .iter()
                            .map(|v| dot(v, &d_scores))
                            .collect();
                        let mean: f64 = alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
                        for i in 0..n {
                            let d_logit = alpha[i] * (d_alpha[i] - mean);
                            // through the weighted sum
                            axpy(alpha[i], &d_scores, &mut d_vectors[i]);
                            // through the logit s_i . s_c
                            axpy(d_logit, ctx_out, &mut d_vectors[i]);
                            axpy(d_logit, &pt.vectors[i], &mut d_context_out);
                        }
                    }
                }
            }
            path_backward(pp, pt, &d_vectors)
        });

        let context_grads = tape.context.as_ref().map(|ct| {
            let ctx = self.store.context.as_ref().unwrap();
            let mut grads = ContextGrads {
                layers: ctx.layers.iter().map(|l| l.zeroed_grads()).collect(),
                pair: ctx.pair.zeroed_grads(),
            };
            let mut layer_grads = std::mem::take(&mut grads.layers);
            context_backward(
                self.graph,
                ct,
                ctx,
                &d_context_out,
                &mut layer_grads,
                &mut grads.pair,
            );
            grads.layers = layer_grads;
            grads
        });

        ExampleGrads {
            context: context_grads,
            path: path_grads,
        }
    }
}

fn path_backward(params: &PathParams, tape: &PathTape, d_vectors: &[Vec<f64>]) -> PathGrads {
    match params {
        PathParams::Embedding { table } => {
            let rows = tape
                .ids
                .iter()
                .zip(d_vectors)
                .map(|(&id, dv)| (id, dv.clone()))
                .collect();
            let _ = table;
            PathGrads::Embedding { rows }
        }
        PathParams::Rnn {
            embed,
            wx,
            wh,
            bh,
            wo,
            bo,
        } => {
            let d = wx.cols;
            let mut g_embed: Vec<(u32, Vec<f64>)> = Vec::new();
            let mut g_wx = vec![0.0; wx.len()];
            let mut g_wh = vec![0.0; wh.len()];
            let mut g_bh = vec![0.0; bh.len()];
            let mut g_wo = vec![0.0; wo.len()];
            let mut g_bo = vec![0.0; bo.len()];
            for (rt, d_out) in tape.rnn.iter().zip(d_vectors) {
                let steps = rt.rels.len();
                let h_last = &rt.hidden[steps - 1];
                outer_acc(h_last, d_out, &mut g_wo);
                axpy(1.0, d_out, &mut g_bo);
                let mut dh = vec![0.0; d];
                matvec_t_acc(d_out, &wo.data, wo.cols, &mut dh);
                for j in (0..steps).rev() {
                    let hj = &rt.hidden[j];
                    let dz: Vec<f64> = dh
                        .iter()
                        .zip(hj)
                        .map(|(&g, &h)| g * (1.0 - h * h))
                        .collect();
                    axpy(1.0, &dz, &mut g_bh);
                    let x = embed.row(rt.rels[j] as usize);
                    outer_acc(x, &dz, &mut g_wx);
                    let mut dx = vec![0.0; d];
                    matvec_t_acc(&dz, &wx.data, d, &mut dx);
                    g_embed.push((rt.rels[j], dx));
                    if j > 0 {
                        outer_acc(&rt.hidden[j - 1], &dz, &mut g_wh);
                        dh.iter_mut().for_each(|v| *v = 0.0);
                        matvec_t_acc(&dz, &wh.data, d, &mut dh);
                    }
                }
            }
            PathGrads::Rnn {
                embed_rows: g_embed,
                wx: g_wx,
                wh: g_wh,
                bh: g_bh,
                wo: g_wo,
                bo: g_bo,
            }
        }
    }
}
