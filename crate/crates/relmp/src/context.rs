//! Relational context via alternate message passing: edge states are summed
//! into node messages, node messages are combined back into edge states, and
//! after `K` rounds the two endpoint messages of a query pair are mapped to
//! per-relation scores.
//!
//! Two implementations live here. [`run_context_passing`] is the direct
//! full-graph form and serves as the reference. [`PairSubgraph`] restricts the
//! same computation to the K-hop neighborhood of a query pair, exploiting that
//! iteration `i` only ever needs messages within `K-1-i` hops of the pair; the
//! two produce identical messages (covered by integration tests) but the
//! pair-centric form does per-example work independent of graph size.

use crate::graph::{EdgeId, EntityId, KnowledgeGraph};
use crate::params::{AggregatorKind, AggregatorLayer, ContextParams, LayerGrads};
use crate::tensor::{axpy, relu_inplace};

/// Per-edge hidden vectors at one message-passing iteration.
#[derive(Debug, Clone)]
pub struct EdgeStateBuffer {
    pub dim: usize,
    pub iteration: usize,
    /// Row-major `n_edges x dim`.
    pub states: Vec<f64>,
}

impl EdgeStateBuffer {
    pub fn state(&self, e: EdgeId) -> &[f64] {
        &self.states[e as usize * self.dim..(e as usize + 1) * self.dim]
    }
}

/// Per-node message vectors at one iteration.
#[derive(Debug, Clone)]
pub struct NodeMessageBuffer {
    pub dim: usize,
    /// Row-major `n_nodes x dim`.
    pub messages: Vec<f64>,
}

impl NodeMessageBuffer {
    pub fn message(&self, v: EntityId) -> &[f64] {
        &self.messages[v as usize * self.dim..(v as usize + 1) * self.dim]
    }
}

/// Iteration-0 edge states: the one-hot identity vector of each relation type.
pub fn initial_edge_states(graph: &KnowledgeGraph) -> EdgeStateBuffer {
    let dim = graph.n_relations;
    let mut states = vec![0.0; graph.n_edges() * dim];
    for (e, t) in graph.triples.iter().enumerate() {
        states[e * dim + t.relation as usize] = 1.0;
    }
    EdgeStateBuffer {
        dim,
        iteration: 0,
        states,
    }
}

/// Sum incident edge states into every node's message, excluding
/// `masked_edge` everywhere. Nodes with no unmasked incident edge get the
/// zero vector. A self-loop contributes its state once (the incident set,
/// not stubs).
pub fn node_aggregate(
    graph: &KnowledgeGraph,
    states: &EdgeStateBuffer,
    masked_edge: Option<EdgeId>,
) -> NodeMessageBuffer {
    let dim = states.dim;
    let mut messages = vec![0.0; graph.n_entities * dim];
    for v in 0..graph.n_entities {
        let out = &mut messages[v * dim..(v + 1) * dim];
        let mut prev = None;
        for &e in graph.incident_edges(v as EntityId) {
            if Some(e) == masked_edge || Some(e) == prev {
                prev = Some(e);
                continue;
            }
            prev = Some(e);
            axpy(1.0, states.state(e), out);
        }
    }
    NodeMessageBuffer { dim, messages }
}

/// One edge update `s_e' = relu(agg(m_v, m_u, s_e))` with the stored triple's
/// (head, tail) endpoint order.
pub fn edge_update(
    layer: &AggregatorLayer,
    m_v: &[f64],
    m_u: &[f64],
    s_e: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; layer.out_dim];
    let mut scratch = Vec::new();
    layer.forward(m_v, m_u, Some(s_e), &mut out, &mut scratch);
    relu_inplace(&mut out);
    out
}

/// Final pair readout `s_(h,t) = agg(m_h, m_t)` with identity activation, so
/// scores stay unbounded for the downstream softmax.
pub fn pair_context(m_h: &[f64], m_t: &[f64], pair_layer: &AggregatorLayer) -> Vec<f64> {
    let mut out = vec![0.0; pair_layer.out_dim];
    let mut scratch = Vec::new();
    pair_layer.forward(m_h, m_t, None, &mut out, &mut scratch);
    out
}

/// Reference implementation: run `hops` rounds of alternate message passing
/// over the whole graph and return the final messages of `h` and `t`.
pub fn run_context_passing(
    graph: &KnowledgeGraph,
    pair: (EntityId, EntityId),
    masked_edge: Option<EdgeId>,
    ctx: &ContextParams,
) -> (Vec<f64>, Vec<f64>) {
    assert!(ctx.hops >= 1);
    let mut states = initial_edge_states(graph);
    let mut scratch = Vec::new();
    for i in 0..ctx.hops {
        let msgs = node_aggregate(graph, &states, masked_edge);
        if i == ctx.hops - 1 {
            return (msgs.message(pair.0).to_vec(), msgs.message(pair.1).to_vec());
        }
        let layer = &ctx.layers[i];
        let mut next = vec![0.0; graph.n_edges() * layer.out_dim];
        for (e, t) in graph.triples.iter().enumerate() {
            let out = &mut next[e * layer.out_dim..(e + 1) * layer.out_dim];
            layer.forward(
                msgs.message(t.head),
                msgs.message(t.tail),
                Some(states.state(e as EdgeId)),
                out,
                &mut scratch,
            );
            relu_inplace(out);
        }
        states = EdgeStateBuffer {
            dim: layer.out_dim,
            iteration: i + 1,
            states: next,
        };
    }
    unreachable!()
}

/// An edge of a [`PairSubgraph`] with endpoints as local node indices
/// (`u32::MAX` when the endpoint lies outside the local node set, which can
/// only happen for edges that are never updated).
#[derive(Debug, Clone, Copy)]
pub struct SubEdge {
    pub head: u32,
    pub tail: u32,
    pub relation: u32,
    pub global: EdgeId,
}

/// Reusable per-worker buffers for subgraph extraction.
#[derive(Debug, Default)]
pub struct SubgraphScratch {
    node_gen: Vec<u32>,
    node_slot: Vec<u32>,
    edge_gen: Vec<u32>,
    generation: u32,
}

impl SubgraphScratch {
    fn prepare(&mut self, n_entities: usize, n_edges: usize) {
        if self.node_gen.len() < n_entities {
            self.node_gen.resize(n_entities, 0);
            self.node_slot.resize(n_entities, 0);
        }
        if self.edge_gen.len() < n_edges {
            self.edge_gen.resize(n_edges, 0);
        }
        self.generation += 1;
    }
}

/// The K-hop neighborhood of a query pair, organized so that the edges and
/// nodes needed at iteration `i` form prefixes of the local arrays.
///
/// Levels: `node_dist[v]` is the BFS distance from `{h, t}` (mask excluded);
/// an edge's level is the smaller of its endpoint distances. Iteration `i`
/// updates edge states for levels `<= K-1-i` and node messages for distances
/// `<= K-1-i`, which is exactly what the final pair readout depends on.
#[derive(Debug, Clone)]
pub struct PairSubgraph {
    pub hops: usize,
    pub h_local: u32,
    pub t_local: u32,
    pub nodes: Vec<EntityId>,
    pub node_dist: Vec<u8>,
    /// `nodes_le[j]` = number of local nodes with dist <= j, for j in 0..K.
    pub nodes_le: Vec<usize>,
    pub edges: Vec<SubEdge>,
    /// `edges_le[j]` = number of local edges with level <= j, for j in 0..K-1.
    pub edges_le: Vec<usize>,
    /// CSR stubs (node -> local edge indices) for nodes with dist <= K-2.
    pub stub_off: Vec<usize>,
    pub stubs: Vec<u32>,
}

impl PairSubgraph {
    /// Extract the neighborhood of `(h, t)` for a `hops`-round pass,
    /// excluding `masked_edge` from traversal entirely.
    pub fn build(
        graph: &KnowledgeGraph,
        h: EntityId,
        t: EntityId,
        masked_edge: Option<EdgeId>,
        hops: usize,
        scratch: &mut SubgraphScratch,
    ) -> PairSubgraph {
        assert!(hops >= 1);
        scratch.prepare(graph.n_entities, graph.n_edges());
        let generation = scratch.generation;

        let mut nodes: Vec<EntityId> = Vec::new();
        let mut node_dist: Vec<u8> = Vec::new();
        let visit = |v: EntityId, d: u8, sc: &mut SubgraphScratch, nodes: &mut Vec<EntityId>, dist: &mut Vec<u8>| -> u32 {
            let slot = nodes.len() as u32;
            sc.node_gen[v as usize] = generation;
            sc.node_slot[v as usize] = slot;
            nodes.push(v);
            dist.push(d);
            slot
        };

        let h_local = visit(h, 0, scratch, &mut nodes, &mut node_dist);
        let t_local = if t == h {
            h_local
        } else {
            visit(t, 0, scratch, &mut nodes, &mut node_dist)
        };

        // BFS out to distance hops-2 (the deepest nodes whose incident edges
        // are ever updated).
        let mut nodes_le = vec![0usize; hops];
        nodes_le[0] = nodes.len();
        let mut frontier_start = 0usize;
        for depth in 1..hops.saturating_sub(1) {
            let frontier_end = nodes.len();
            for vi in frontier_start..frontier_end {
                let v = nodes[vi];
                for &e in graph.incident_edges(v) {
                    if Some(e) == masked_edge {
                        continue;
                    }
                    let u = graph.triple(e).other(v);
                    if scratch.node_gen[u as usize] != generation {
                        visit(u, depth as u8, scratch, &mut nodes, &mut node_dist);
                    }
                }
            }
            frontier_start = frontier_end;
            nodes_le[depth] = nodes.len();
        }
        for d in hops.saturating_sub(1).max(1)..hops {
            nodes_le[d] = nodes.len();
        }
        let inner_nodes = nodes.len(); // nodes with dist <= hops-2 (or the seeds when hops == 1)

        // Collect edges incident to the inner nodes, in level order; discover
        // boundary endpoints at distance hops-1.
        let mut edges: Vec<SubEdge> = Vec::new();
        let mut edges_le = vec![0usize; hops.saturating_sub(1)];
        if hops >= 2 {
            for vi in 0..inner_nodes {
                let v = nodes[vi];
                let level = node_dist[vi];
                for &e in graph.incident_edges(v) {
                    if Some(e) == masked_edge || scratch.edge_gen[e as usize] == generation {
                        continue;
                    }
                    scratch.edge_gen[e as usize] = generation;
                    let tr = graph.triple(e);
                    let mut local_of = |w: EntityId, sc: &mut SubgraphScratch| -> u32 {
                        if sc.node_gen[w as usize] == generation {
                            sc.node_slot[w as usize]
                        } else {
                            visit(w, hops as u8 - 1, sc, &mut nodes, &mut node_dist)
                        }
                    };
                    let head = local_of(tr.head, scratch);
                    let tail = local_of(tr.tail, scratch);
                    edges.push(SubEdge {
                        head,
                        tail,
                        relation: tr.relation,
                        global: e,
                    });
                    edges_le[level as usize] += 1;
                }
            }
            // running counts -> prefix sums (edges were appended level-sorted)
            for j in 1..edges_le.len() {
                edges_le[j] += edges_le[j - 1];
            }
            nodes_le[hops - 1] = nodes.len();
        }

        // Incident stubs for inner nodes; a self-loop yields one stub.
        let mut stub_off = vec![0usize; inner_nodes + 1];
        for e in &edges {
            if (e.head as usize) < inner_nodes {
                stub_off[e.head as usize + 1] += 1;
            }
            if e.tail != e.head && (e.tail as usize) < inner_nodes {
                stub_off[e.tail as usize + 1] += 1;
            }
        }
        for i in 1..stub_off.len() {
            stub_off[i] += stub_off[i - 1];
        }
        let mut cursor = stub_off[..inner_nodes].to_vec();
        let mut stubs = vec![0u32; stub_off[inner_nodes]];
        for (ei, e) in edges.iter().enumerate() {
            if (e.head as usize) < inner_nodes {
                stubs[cursor[e.head as usize]] = ei as u32;
                cursor[e.head as usize] += 1;
            }
            if e.tail != e.head && (e.tail as usize) < inner_nodes {
                stubs[cursor[e.tail as usize]] = ei as u32;
                cursor[e.tail as usize] += 1;
            }
        }

        PairSubgraph {
            hops,
            h_local,
            t_local,
            nodes,
            node_dist,
            nodes_le,
            edges,
            edges_le,
            stub_off,
            stubs,
        }
    }
}

/// Per-node projections of the unmasked relation histograms through the
/// first update layer's endpoint blocks.
///
/// The first iteration's inputs are pure relation histograms, so for the
/// concat and mean aggregators the edge update decomposes into
/// `relu(p[head] + q[tail] + w_state_row(rel) + b)` where `p`/`q` depend only
/// on the node and the current weights. Recomputing the two `N x D` tables
/// once per parameter update turns the dominant per-example cost (dense
/// matrix products over every hub-neighborhood edge) into vector adds. The
/// query edge only touches the histograms of its own endpoints, so the mask
/// is a two-row correction. The cross aggregator's bilinear term does not
/// decompose and keeps the generic path.
#[derive(Debug, Clone, Default)]
pub struct Layer0Tables {
    pub dim: usize,
    /// `N x dim` head-block projections.
    pub p: Vec<f64>,
    /// `N x dim` tail-block projections; empty when shared with `p` (mean).
    pub q: Vec<f64>,
    shared: bool,
    /// Sparse unmasked histograms, CSR over nodes: distinct incident relation
    /// types with multiplicities. Graph-only; built once.
    hist_off: Vec<u32>,
    hist_rel: Vec<u32>,
    hist_cnt: Vec<f64>,
}

impl Layer0Tables {
    /// Whether the first layer of `ctx` admits the decomposition.
    pub fn supports(ctx: &ContextParams) -> bool {
        ctx.hops >= 2 && ctx.kind != AggregatorKind::Cross
    }

    pub fn compute(graph: &KnowledgeGraph, ctx: &ContextParams) -> Option<Layer0Tables> {
        if !Self::supports(ctx) {
            return None;
        }
        let mut tables = Layer0Tables::default();
        let n = graph.n_entities;
        tables.hist_off = Vec::with_capacity(n + 1);
        tables.hist_off.push(0);
        let mut row = vec![0.0; graph.n_relations];
        for v in 0..n {
            histogram_into(graph, v as EntityId, None, &mut row);
            for (rel, cnt) in row.iter_mut().enumerate() {
                if *cnt != 0.0 {
                    tables.hist_rel.push(rel as u32);
                    tables.hist_cnt.push(*cnt);
                    *cnt = 0.0;
                }
            }
            tables.hist_off.push(tables.hist_rel.len() as u32);
        }
        tables.refresh(graph, ctx);
        Some(tables)
    }

    /// Sparse histogram entries of node `v`: (relation, multiplicity).
    pub fn hist(&self, v: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        let lo = self.hist_off[v] as usize;
        let hi = self.hist_off[v + 1] as usize;
        self.hist_rel[lo..hi]
            .iter()
            .copied()
            .zip(self.hist_cnt[lo..hi].iter().copied())
    }

    /// Rebuild the projection tables against the current weights.
    pub fn refresh(&mut self, graph: &KnowledgeGraph, ctx: &ContextParams) {
        let layer = &ctx.layers[0];
        let d = layer.out_dim;
        let n = graph.n_entities;
        self.dim = d;
        self.shared = layer.kind == AggregatorKind::Mean;
        let w = layer.w.as_ref().unwrap();
        let in_dim = layer.in_dim;
        let scale = if self.shared { 1.0 / 3.0 } else { 1.0 };

        let mut p = std::mem::take(&mut self.p);
        p.clear();
        p.resize(n * d, 0.0);
        for v in 0..n {
            let pv = &mut p[v * d..(v + 1) * d];
            for (rel, cnt) in self.hist(v) {
                let rel = rel as usize;
                axpy(scale * cnt, &w.data[rel * d..(rel + 1) * d], pv);
            }
        }
        self.p = p;

        let mut q = std::mem::take(&mut self.q);
        q.clear();
        if !self.shared {
            q.resize(n * d, 0.0);
            for v in 0..n {
                let qv = &mut q[v * d..(v + 1) * d];
                for (rel, cnt) in self.hist(v) {
                    let rel = rel as usize;
                    axpy(
                        cnt,
                        &w.data[(in_dim + rel) * d..(in_dim + rel + 1) * d],
                        qv,
                    );
                }
            }
        }
        self.q = q;
    }

    fn p_row(&self, v: usize) -> &[f64] {
        &self.p[v * self.dim..(v + 1) * self.dim]
    }

    fn q_row(&self, v: usize) -> &[f64] {
        if self.shared {
            self.p_row(v)
        } else {
            &self.q[v * self.dim..(v + 1) * self.dim]
        }
    }

    /// Row of the state block for relation `rel` (scaled for mean).
    fn state_row<'a>(&self, layer: &'a AggregatorLayer, rel: usize) -> (f64, &'a [f64]) {
        let d = layer.out_dim;
        let w = layer.w.as_ref().unwrap();
        match layer.kind {
            AggregatorKind::Concat => (1.0, &w.data[(2 * layer.in_dim + rel) * d..(2 * layer.in_dim + rel + 1) * d]),
            AggregatorKind::Mean => (1.0 / 3.0, &w.data[rel * d..(rel + 1) * d]),
            AggregatorKind::Cross => unreachable!(),
        }
    }

    /// Mask correction: the head-block contribution of one edge of relation
    /// `rel` (what the masked edge adds to its endpoints' projections).
    fn head_row<'a>(&self, layer: &'a AggregatorLayer, rel: usize) -> (f64, &'a [f64]) {
        let d = layer.out_dim;
        let w = layer.w.as_ref().unwrap();
        let scale = if self.shared { 1.0 / 3.0 } else { 1.0 };
        (scale, &w.data[rel * d..(rel + 1) * d])
    }

    fn tail_row<'a>(&self, layer: &'a AggregatorLayer, rel: usize) -> (f64, &'a [f64]) {
        let d = layer.out_dim;
        let w = layer.w.as_ref().unwrap();
        match layer.kind {
            AggregatorKind::Concat => (1.0, &w.data[(layer.in_dim + rel) * d..(layer.in_dim + rel + 1) * d]),
            AggregatorKind::Mean => (1.0 / 3.0, &w.data[rel * d..(rel + 1) * d]),
            AggregatorKind::Cross => unreachable!(),
        }
    }
}

/// Forward intermediates of the context branch for one example, retained for
/// the backward pass.
#[derive(Debug)]
pub struct ContextTape {
    pub sub: PairSubgraph,
    pub masked_edge: Option<EdgeId>,
    /// `msgs[i]`: messages at iteration i for the first `nodes_le[K-1-i]`
    /// nodes (all local nodes for i = 0), flattened with stride `dim_at(i)`.
    /// `msgs[0]` is empty when the fast first layer was used.
    pub msgs: Vec<Vec<f64>>,
    /// `states[i]` (i >= 1): post-relu edge states for the first
    /// `edges_le[K-1-i]` edges; `states[0]` holds the one-hot features
    /// (empty when the fast first layer was used).
    pub states: Vec<Vec<f64>>,
    /// Whether layer 0 ran through [`Layer0Tables`].
    pub fast_layer0: bool,
    /// Pair readout `s_(h,t)` (identity activation).
    pub output: Vec<f64>,
}

/// Relation-type histogram of `v`'s unmasked incident edges (iteration-0
/// message).
fn histogram_into(
    graph: &KnowledgeGraph,
    v: EntityId,
    masked_edge: Option<EdgeId>,
    out: &mut [f64],
) {
    let mut prev = None;
    for &e in graph.incident_edges(v) {
        if Some(e) == masked_edge || Some(e) == prev {
            prev = Some(e);
            continue;
        }
        prev = Some(e);
        out[graph.triple(e).relation as usize] += 1.0;
    }
}

/// Run the context branch on a pair subgraph. Identical to
/// [`run_context_passing`] + [`pair_context`] on the full graph. When
/// `tables` are supplied (and applicable) the first layer uses the
/// precomputed projections.
pub fn context_forward(
    graph: &KnowledgeGraph,
    sub: PairSubgraph,
    masked_edge: Option<EdgeId>,
    ctx: &ContextParams,
    tables: Option<&Layer0Tables>,
) -> ContextTape {
    let hops = ctx.hops;
    debug_assert_eq!(sub.hops, hops);
    let n_rel = ctx.n_relations;
    let fast_layer0 = tables.is_some_and(|t| t.dim == ctx.hidden_dim) && Layer0Tables::supports(ctx) && hops >= 2;
    let mut scratch = Vec::new();

    let mut msgs: Vec<Vec<f64>> = Vec::with_capacity(hops);
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(hops);

    if fast_layer0 {
        let tables = tables.unwrap();
        let layer = &ctx.layers[0];
        let d = layer.out_dim;
        let ne = sub.edges_le[hops - 2];
        let masked_rel = masked_edge.map(|e| graph.triple(e).relation as usize);
        let mut s1 = vec![0.0; ne * d];
        for (ei, e) in sub.edges[..ne].iter().enumerate() {
            let out = &mut s1[ei * d..(ei + 1) * d];
            out.copy_from_slice(&layer.b.data);
            let head = sub.nodes[e.head as usize];
            let tail = sub.nodes[e.tail as usize];
            axpy(1.0, tables.p_row(head as usize), out);
            axpy(1.0, tables.q_row(tail as usize), out);
            let (sc, row) = tables.state_row(layer, e.relation as usize);
            axpy(sc, row, out);
            // the masked edge is missing from its endpoints' histograms
            if let Some(mrel) = masked_rel {
                let m = graph.triple(masked_edge.unwrap());
                if head == m.head || head == m.tail {
                    let (sc, row) = tables.head_row(layer, mrel);
                    axpy(-sc, row, out);
                }
                if tail == m.head || tail == m.tail {
                    let (sc, row) = tables.tail_row(layer, mrel);
                    axpy(-sc, row, out);
                }
            }
            relu_inplace(out);
        }
        let nn = sub.nodes_le[hops - 2];
        let mut m1 = vec![0.0; nn * d];
        for vi in 0..nn {
            let out = &mut m1[vi * d..(vi + 1) * d];
            for &ei in &sub.stubs[sub.stub_off[vi]..sub.stub_off[vi + 1]] {
                axpy(1.0, &s1[ei as usize * d..(ei as usize + 1) * d], out);
            }
        }
        msgs.push(Vec::new()); // m^0 never materialized
        msgs.push(m1);
        states.push(Vec::new()); // s^0 never materialized
        states.push(s1);
    } else {
        // m^0: one-hot histograms for every local node.
        let mut m0 = vec![0.0; sub.nodes.len() * n_rel];
        for (vi, &v) in sub.nodes.iter().enumerate() {
            histogram_into(graph, v, masked_edge, &mut m0[vi * n_rel..(vi + 1) * n_rel]);
        }
        msgs.push(m0);
        // s^0: one-hot features for the edges that will be updated.
        let n_upd = if hops >= 2 { sub.edges_le[hops - 2] } else { 0 };
        let mut s0 = vec![0.0; n_upd * n_rel];
        for (ei, e) in sub.edges[..n_upd].iter().enumerate() {
            s0[ei * n_rel + e.relation as usize] = 1.0;
        }
        states.push(s0);
    }

    let start = if fast_layer0 { 2 } else { 1 };
    for i in start..hops {
        let layer = &ctx.layers[i - 1];
        let in_dim = layer.in_dim;
        let out_dim = layer.out_dim;
        let ne = sub.edges_le[hops - 1 - i];
        let prev_m = &msgs[i - 1];
        let prev_s = &states[i - 1];
        let mut s_i = vec![0.0; ne * out_dim];
        for (ei, e) in sub.edges[..ne].iter().enumerate() {
            let out = &mut s_i[ei * out_dim..(ei + 1) * out_dim];
            layer.forward(
                &prev_m[e.head as usize * in_dim..(e.head as usize + 1) * in_dim],
                &prev_m[e.tail as usize * in_dim..(e.tail as usize + 1) * in_dim],
                Some(&prev_s[ei * in_dim..(ei + 1) * in_dim]),
                out,
                &mut scratch,
            );
            relu_inplace(out);
        }
        let nn = sub.nodes_le[hops - 1 - i];
        let mut m_i = vec![0.0; nn * out_dim];
        for vi in 0..nn {
            let out = &mut m_i[vi * out_dim..(vi + 1) * out_dim];
            for &ei in &sub.stubs[sub.stub_off[vi]..sub.stub_off[vi + 1]] {
                axpy(1.0, &s_i[ei as usize * out_dim..(ei as usize + 1) * out_dim], out);
            }
        }
        states.push(s_i);
        msgs.push(m_i);
    }

    let last = &msgs[hops - 1];
    let d = ctx.dim_at(hops - 1);
    let output = pair_context(
        &last[sub.h_local as usize * d..(sub.h_local as usize + 1) * d],
        &last[sub.t_local as usize * d..(sub.t_local as usize + 1) * d],
        &ctx.pair,
    );

    ContextTape {
        sub,
        masked_edge,
        msgs,
        states,
        fast_layer0,
        output,
    }
}


/// Backpropagate a gradient at `s_(h,t)` through the tape, accumulating layer
/// gradients into `layer_grads` / `pair_grads`.
pub fn context_backward(
    graph: &KnowledgeGraph,
    tape: &ContextTape,
    ctx: &ContextParams,
    tables: Option<&Layer0Tables>,
    d_output: &[f64],
    layer_grads: &mut [LayerGrads],
    pair_grads: &mut LayerGrads,
) {
    let hops = ctx.hops;
    let sub = &tape.sub;
    let mut scratch = Vec::new();

    // Pair layer (identity activation).
    let d_last = ctx.dim_at(hops - 1);
    let mut dm: Vec<Vec<f64>> = (0..hops)
        .map(|i| vec![0.0; sub.nodes_le[hops - 1 - i] * ctx.dim_at(i)])
        .collect();
    {
        let h = sub.h_local as usize;
        let t = sub.t_local as usize;
        let m_last = &tape.msgs[hops - 1];
        let mut dmh = vec![0.0; d_last];
        let mut dmt = vec![0.0; d_last];
        ctx.pair.backward(
            d_output,
            &m_last[h * d_last..(h + 1) * d_last],
            &m_last[t * d_last..(t + 1) * d_last],
            None,
            pair_grads,
            &mut dmh,
            &mut dmt,
            None,
            &mut scratch,
        );
        let dm_last = &mut dm[hops - 1];
        axpy(1.0, &dmh, &mut dm_last[h * d_last..(h + 1) * d_last]);
        axpy(1.0, &dmt, &mut dm_last[t * d_last..(t + 1) * d_last]);
    }

    let mut ds: Vec<Vec<f64>> = (0..hops)
        .map(|i| {
            if i == 0 {
                Vec::new() // initial features are constants
            } else {
                vec![0.0; sub.edges_le[hops - 1 - i] * ctx.layers[i - 1].out_dim]
            }
        })
        .collect();

    for i in (1..hops).rev() {
        let layer = &ctx.layers[i - 1];
        let in_dim = layer.in_dim;
        let out_dim = layer.out_dim;
        let nn = sub.nodes_le[hops - 1 - i];
        let ne = sub.edges_le[hops - 1 - i];

        // m^i[v] = sum of incident s^i  =>  distribute dm^i to ds^i.
        {
            let (ds_i, dm_i) = (&mut ds[i], &dm[i]);
            for vi in 0..nn {
                let dmv = &dm_i[vi * out_dim..(vi + 1) * out_dim];
                for &ei in &sub.stubs[sub.stub_off[vi]..sub.stub_off[vi + 1]] {
                    axpy(1.0, dmv, &mut ds_i[ei as usize * out_dim..(ei as usize + 1) * out_dim]);
                }
            }
        }

        if i == 1 && tape.fast_layer0 {
            let tables = tables.expect("tape used the fast first layer but no tables supplied");
            fast_layer0_backward(graph, tape, ctx, tables, &ds[1], &mut layer_grads[0]);
            break;
        }

        let (ds_lo, ds_hi) = ds.split_at_mut(i);
        let ds_i = &ds_hi[0];
        let ds_prev = &mut ds_lo[i - 1];
        let (dm_lo, _) = dm.split_at_mut(i);
        let dm_prev = &mut dm_lo[i - 1];
        let m_prev = &tape.msgs[i - 1];
        let s_prev = &tape.states[i - 1];
        let s_i = &tape.states[i];
        let grads = &mut layer_grads[i - 1];

        let mut dz = vec![0.0; out_dim];
        let mut dmv = vec![0.0; in_dim];
        let mut dmu = vec![0.0; in_dim];
        for (ei, e) in sub.edges[..ne].iter().enumerate() {
            // relu' = 1 where the (post-activation) state is positive
            let mut all_zero = true;
            for c in 0..out_dim {
                let g = if s_i[ei * out_dim + c] > 0.0 {
                    ds_i[ei * out_dim + c]
                } else {
                    0.0
                };
                dz[c] = g;
                all_zero &= g == 0.0;
            }
            if all_zero {
                continue;
            }
            dmv.iter_mut().for_each(|x| *x = 0.0);
            dmu.iter_mut().for_each(|x| *x = 0.0);
            let ds_e = (i >= 2).then(|| &mut ds_prev[ei * in_dim..(ei + 1) * in_dim]);
            layer.backward(
                &dz,
                &m_prev[e.head as usize * in_dim..(e.head as usize + 1) * in_dim],
                &m_prev[e.tail as usize * in_dim..(e.tail as usize + 1) * in_dim],
                Some(&s_prev[ei * in_dim..(ei + 1) * in_dim]),
                grads,
                &mut dmv,
                &mut dmu,
                ds_e.map(|s| s as &mut [f64]),
                &mut scratch,
            );
            axpy(
                1.0,
                &dmv,
                &mut dm_prev[e.head as usize * in_dim..(e.head as usize + 1) * in_dim],
            );
            axpy(
                1.0,
                &dmu,
                &mut dm_prev[e.tail as usize * in_dim..(e.tail as usize + 1) * in_dim],
            );
        }
    }
}

/// Backward of the decomposed first layer: route edge gradients into
/// per-node buffers, then scatter them onto the weight rows of each node's
/// histogram relations (with the masked edge's relation discounted at its
/// endpoints). The histogram inputs are constants, so no input gradients
/// flow further back.
fn fast_layer0_backward(
    graph: &KnowledgeGraph,
    tape: &ContextTape,
    ctx: &ContextParams,
    tables: &Layer0Tables,
    ds1: &[f64],
    grads: &mut LayerGrads,
) {
    let sub = &tape.sub;
    let layer = &ctx.layers[0];
    let d = layer.out_dim;
    let ne = sub.edges_le[ctx.hops - 2];
    let s1 = &tape.states[1];
    let n_rel = layer.in_dim;
    // weight row blocks: (base row, scale) per input slot
    let (head_block, tail_block, state_block) = match layer.kind {
        AggregatorKind::Concat => ((0usize, 1.0f64), (n_rel, 1.0), (2 * n_rel, 1.0)),
        AggregatorKind::Mean => ((0, 1.0 / 3.0), (0, 1.0 / 3.0), (0, 1.0 / 3.0)),
        AggregatorKind::Cross => unreachable!("cross has no decomposed first layer"),
    };

    let n_local = sub.nodes.len();
    let mut dp = vec![0.0; n_local * d];
    let mut dq = vec![0.0; n_local * d];
    let mut touched_p = vec![false; n_local];
    let mut touched_q = vec![false; n_local];
    let mut dz = vec![0.0; d];
    for (ei, e) in sub.edges[..ne].iter().enumerate() {
        let mut all_zero = true;
        for c in 0..d {
            let g = if s1[ei * d + c] > 0.0 { ds1[ei * d + c] } else { 0.0 };
            dz[c] = g;
            all_zero &= g == 0.0;
        }
        if all_zero {
            continue;
        }
        axpy(1.0, &dz, &mut grads.b);
        let rel = e.relation as usize;
        axpy(
            state_block.1,
            &dz,
            &mut grads.w[(state_block.0 + rel) * d..(state_block.0 + rel + 1) * d],
        );
        axpy(1.0, &dz, &mut dp[e.head as usize * d..(e.head as usize + 1) * d]);
        axpy(1.0, &dz, &mut dq[e.tail as usize * d..(e.tail as usize + 1) * d]);
        touched_p[e.head as usize] = true;
        touched_q[e.tail as usize] = true;
    }

    // dW[block rel, :] += scale * count * d{p,q}(v) per histogram entry
    let masked = tape.masked_edge.map(|e| graph.triple(e));
    let masked_rel = masked.map(|t| t.relation as usize);
    for vi in 0..n_local {
        if !touched_p[vi] && !touched_q[vi] {
            continue;
        }
        let v = sub.nodes[vi];
        let correction = masked
            .is_some_and(|t| v == t.head || v == t.tail)
            .then_some(masked_rel.unwrap());
        let dpv = &dp[vi * d..(vi + 1) * d];
        let dqv = &dq[vi * d..(vi + 1) * d];
        for (rel, cnt) in tables.hist(v as usize) {
            let rel = rel as usize;
            let cnt = if correction == Some(rel) { cnt - 1.0 } else { cnt };
            if cnt == 0.0 {
                continue;
            }
            if touched_p[vi] {
                axpy(
                    head_block.1 * cnt,
                    dpv,
                    &mut grads.w[(head_block.0 + rel) * d..(head_block.0 + rel + 1) * d],
                );
            }
            if touched_q[vi] {
                axpy(
                    tail_block.1 * cnt,
                    dqv,
                    &mut grads.w[(tail_block.0 + rel) * d..(tail_block.0 + rel + 1) * d],
                );
            }
        }
    }
}
