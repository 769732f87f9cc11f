//! Model parameters: aggregator layers, path-representation weights, the
//! parameter store with per-tensor Adam state, and per-example gradient
//! buffers that merge deterministically.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, matvec_t_acc, outer_acc, vecmat_acc, Tensor};

/// How an edge update combines the two endpoint messages (and its own state).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    Mean,
    Concat,
    Cross,
}

/// How a relational path is turned into a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathReprKind {
    Embedding,
    Rnn,
}

/// How the per-path vectors are pooled into one vector per pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathAggKind {
    Mean,
    Attention,
}

/// One learnable aggregation layer.
///
/// Hidden layers (`includes_state`) combine `(m_v, m_u, s_e)`; the final pair
/// layer combines `(m_h, m_t)` only, since the query edge is unobserved.
///
/// - concat: `[inputs] * w + b`
/// - mean:   `(sum(inputs) / k) * w + b`
/// - cross:  `flatten(m_v m_u^T) * w1 (+ s_e * w2) + b`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregatorLayer {
    pub kind: AggregatorKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub includes_state: bool,
    pub w: Option<Tensor>,
    pub w1: Option<Tensor>,
    pub w2: Option<Tensor>,
    pub b: Tensor,
}

impl AggregatorLayer {
    pub fn new(
        kind: AggregatorKind,
        in_dim: usize,
        out_dim: usize,
        includes_state: bool,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Self {
        let n_inputs = if includes_state { 3 } else { 2 };
        let (w, w1, w2) = match kind {
            AggregatorKind::Concat => (
                Some(Tensor::xavier(
                    format!("{prefix}.w"),
                    n_inputs * in_dim,
                    out_dim,
                    rng,
                )),
                None,
                None,
            ),
            AggregatorKind::Mean => (
                Some(Tensor::xavier(format!("{prefix}.w"), in_dim, out_dim, rng)),
                None,
                None,
            ),
            AggregatorKind::Cross => (
                None,
                Some(Tensor::xavier(
                    format!("{prefix}.w1"),
                    in_dim * in_dim,
                    out_dim,
                    rng,
                )),
                includes_state
                    .then(|| Tensor::xavier(format!("{prefix}.w2"), in_dim, out_dim, rng)),
            ),
        };
        AggregatorLayer {
            kind,
            in_dim,
            out_dim,
            includes_state,
            w,
            w1,
            w2,
            b: Tensor::bias(format!("{prefix}.b"), out_dim),
        }
    }

    /// Compute the pre-activation output into `out` (overwritten).
    pub fn forward(
        &self,
        m_v: &[f64],
        m_u: &[f64],
        s_e: Option<&[f64]>,
        out: &mut [f64],
        scratch: &mut Vec<f64>,
    ) {
        debug_assert_eq!(m_v.len(), self.in_dim);
        debug_assert_eq!(m_u.len(), self.in_dim);
        debug_assert_eq!(s_e.is_some(), self.includes_state);
        debug_assert_eq!(out.len(), self.out_dim);
        out.copy_from_slice(&self.b.data);
        match self.kind {
            AggregatorKind::Concat => {
                let w = self.w.as_ref().unwrap();
                let d = self.in_dim * self.out_dim;
                vecmat_acc(m_v, &w.data[..d], self.out_dim, out);
                vecmat_acc(m_u, &w.data[d..2 * d], self.out_dim, out);
                if let Some(s) = s_e {
                    vecmat_acc(s, &w.data[2 * d..3 * d], self.out_dim, out);
                }
            }
            AggregatorKind::Mean => {
                let k = if self.includes_state { 3.0 } else { 2.0 };
                scratch.clear();
                scratch.extend_from_slice(m_v);
                axpy(1.0, m_u, scratch);
                if let Some(s) = s_e {
                    axpy(1.0, s, scratch);
                }
                scratch.iter_mut().for_each(|x| *x /= k);
                let w = self.w.as_ref().unwrap();
                vecmat_acc(scratch, &w.data, self.out_dim, out);
            }
            AggregatorKind::Cross => {
                // out += flatten(m_v m_u^T) * w1, without materializing the
                // outer product: row (i*in + j) of w1 is scaled by m_v[i]*m_u[j].
                let w1 = self.w1.as_ref().unwrap();
                let d = self.in_dim;
                for (i, &vi) in m_v.iter().enumerate() {
                    if vi == 0.0 {
                        continue;
                    }
                    for (j, &uj) in m_u.iter().enumerate() {
                        let c = vi * uj;
                        if c == 0.0 {
                            continue;
                        }
                        let row = &w1.data[(i * d + j) * self.out_dim..(i * d + j + 1) * self.out_dim];
                        axpy(c, row, out);
                    }
                }
                if let Some(s) = s_e {
                    let w2 = self.w2.as_ref().unwrap();
                    vecmat_acc(s, &w2.data, self.out_dim, out);
                }
            }
        }
    }

    /// Backpropagate `dz` (gradient at the pre-activation output) into input
    /// gradients and this layer's gradient buffer.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        dz: &[f64],
        m_v: &[f64],
        m_u: &[f64],
        s_e: Option<&[f64]>,
        grads: &mut LayerGrads,
        dm_v: &mut [f64],
        dm_u: &mut [f64],
        mut ds_e: Option<&mut [f64]>,
        scratch: &mut Vec<f64>,
    ) {
        axpy(1.0, dz, &mut grads.b);
        match self.kind {
            AggregatorKind::Concat => {
                let w = self.w.as_ref().unwrap();
                let d = self.in_dim * self.out_dim;
                outer_acc(m_v, dz, &mut grads.w[..d]);
                outer_acc(m_u, dz, &mut grads.w[d..2 * d]);
                matvec_t_acc(dz, &w.data[..d], self.out_dim, dm_v);
                matvec_t_acc(dz, &w.data[d..2 * d], self.out_dim, dm_u);
                if let Some(s) = s_e {
                    outer_acc(s, dz, &mut grads.w[2 * d..3 * d]);
                    // input gradient only when the state is not a constant
                    if let Some(ds) = ds_e.as_deref_mut() {
                        matvec_t_acc(dz, &w.data[2 * d..3 * d], self.out_dim, ds);
                    }
                }
            }
            AggregatorKind::Mean => {
                let k = if self.includes_state { 3.0 } else { 2.0 };
                // forward input: t = (m_v + m_u [+ s_e]) / k
                scratch.clear();
                scratch.extend_from_slice(m_v);
                axpy(1.0, m_u, scratch);
                if let Some(s) = s_e {
                    axpy(1.0, s, scratch);
                }
                scratch.iter_mut().for_each(|x| *x /= k);
                outer_acc(scratch, dz, &mut grads.w);
                let w = self.w.as_ref().unwrap();
                // dt, then split evenly across inputs
                let mut dt = vec![0.0; self.in_dim];
                matvec_t_acc(dz, &w.data, self.out_dim, &mut dt);
                dt.iter_mut().for_each(|x| *x /= k);
                axpy(1.0, &dt, dm_v);
                axpy(1.0, &dt, dm_u);
                if let Some(ds) = ds_e.as_deref_mut() {
                    axpy(1.0, &dt, ds);
                }
            }
            AggregatorKind::Cross => {
                let w1 = self.w1.as_ref().unwrap();
                let d = self.in_dim;
                let o = self.out_dim;
                for (i, &vi) in m_v.iter().enumerate() {
                    let mut acc_v = 0.0;
                    for (j, &uj) in m_u.iter().enumerate() {
                        let row = &w1.data[(i * d + j) * o..(i * d + j + 1) * o];
                        let rd = dot(row, dz);
                        acc_v += uj * rd;
                        dm_u[j] += vi * rd;
                        let c = vi * uj;
                        if c != 0.0 {
                            axpy(c, dz, &mut grads.w1[(i * d + j) * o..(i * d + j + 1) * o]);
                        }
                    }
                    dm_v[i] += acc_v;
                }
                if let Some(s) = s_e {
                    let w2 = self.w2.as_ref().unwrap();
                    outer_acc(s, dz, &mut grads.w2);
                    if let Some(ds) = ds_e.as_deref_mut() {
                        matvec_t_acc(dz, &w2.data, self.out_dim, ds);
                    }
                }
            }
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        [self.w.as_ref(), self.w1.as_ref(), self.w2.as_ref(), Some(&self.b)]
            .into_iter()
            .flatten()
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        [
            self.w.as_mut(),
            self.w1.as_mut(),
            self.w2.as_mut(),
            Some(&mut self.b),
        ]
        .into_iter()
        .flatten()
    }
}

/// Context-branch parameters: `hops - 1` hidden edge-update layers plus the
/// final pair layer producing relation scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextParams {
    pub kind: AggregatorKind,
    pub hops: usize,
    pub hidden_dim: usize,
    pub n_relations: usize,
    pub layers: Vec<AggregatorLayer>,
    pub pair: AggregatorLayer,
}

impl ContextParams {
    pub fn new(
        kind: AggregatorKind,
        hops: usize,
        n_relations: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(hops >= 1);
        let mut layers = Vec::with_capacity(hops - 1);
        for i in 0..hops - 1 {
            let in_dim = if i == 0 { n_relations } else { hidden_dim };
            layers.push(AggregatorLayer::new(
                kind,
                in_dim,
                hidden_dim,
                true,
                &format!("context.layer{i}"),
                rng,
            ));
        }
        let pair_in = if hops == 1 { n_relations } else { hidden_dim };
        let pair = AggregatorLayer::new(kind, pair_in, n_relations, false, "context.pair", rng);
        ContextParams {
            kind,
            hops,
            hidden_dim,
            n_relations,
            layers,
            pair,
        }
    }

    /// Message dimension at iteration `i` (0-based).
    pub fn dim_at(&self, i: usize) -> usize {
        if i == 0 {
            self.n_relations
        } else {
            self.hidden_dim
        }
    }
}

/// Path-branch parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PathParams {
    /// One embedding row per vocabulary path; the final row is the
    /// zero-initialized out-of-vocabulary slot.
    Embedding { table: Tensor },
    /// Vanilla recurrent cell over learned relation embeddings:
    /// `h_j = tanh(x_j wx + h_{j-1} wh + bh)`, projected by `wo, bo`.
    Rnn {
        embed: Tensor,
        wx: Tensor,
        wh: Tensor,
        bh: Tensor,
        wo: Tensor,
        bo: Tensor,
    },
}

impl PathParams {
    pub fn new_embedding(vocab_size: usize, n_relations: usize, rng: &mut impl Rng) -> Self {
        let mut table = Tensor::xavier("path.embed", vocab_size + 1, n_relations, rng);
        // OOV row stays zero so unseen paths are neutral.
        for v in &mut table.data[vocab_size * n_relations..] {
            *v = 0.0;
        }
        PathParams::Embedding { table }
    }

    pub fn new_rnn(n_relations: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        PathParams::Rnn {
            embed: Tensor::xavier("path.rnn.embed", n_relations, hidden_dim, rng),
            wx: Tensor::xavier("path.rnn.wx", hidden_dim, hidden_dim, rng),
            wh: Tensor::xavier("path.rnn.wh", hidden_dim, hidden_dim, rng),
            bh: Tensor::bias("path.rnn.bh", hidden_dim),
            wo: Tensor::xavier("path.rnn.wo", hidden_dim, n_relations, rng),
            bo: Tensor::bias("path.rnn.bo", n_relations),
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            PathParams::Embedding { table } => vec![table],
            PathParams::Rnn {
                embed,
                wx,
                wh,
                bh,
                wo,
                bo,
            } => vec![embed, wx, wh, bh, wo, bo],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            PathParams::Embedding { table } => vec![table],
            PathParams::Rnn {
                embed,
                wx,
                wh,
                bh,
                wo,
                bo,
            } => vec![embed, wx, wh, bh, wo, bo],
        }
    }
}

/// All trainable state: both branches' tensors plus the Adam step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterStore {
    pub context: Option<ContextParams>,
    pub path: Option<PathParams>,
    pub step: u64,
}

impl ParameterStore {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some(c) = &self.context {
            for l in &c.layers {
                out.extend(l.tensors());
            }
            out.extend(c.pair.tensors());
        }
        if let Some(p) = &self.path {
            out.extend(p.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(c) = &mut self.context {
            for l in &mut c.layers {
                out.extend(l.tensors_mut());
            }
            out.extend(c.pair.tensors_mut());
        }
        if let Some(p) = &mut self.path {
            out.extend(p.tensors_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Sum of squared entries over regularized tensors (the raw L2 penalty,
    /// before multiplication by the loss weight).
    pub fn l2_penalty(&self) -> f64 {
        self.tensors()
            .iter()
            .filter(|t| t.regularized)
            .map(|t| t.sq_norm())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Add the gradient of `l2_weight * l2_penalty()` to the gradient buffers.
    pub fn add_l2_gradients(&mut self, l2_weight: f64) {
        if l2_weight == 0.0 {
            return;
        }
        for t in self.tensors_mut() {
            if t.regularized {
                for (g, &x) in t.grad.iter_mut().zip(t.data.iter()) {
                    *g += 2.0 * l2_weight * x;
                }
            }
        }
    }

    /// Merge one example's gradients into the store's buffers. Shapes were
    /// fixed at construction, so this is pure accumulation.
    pub fn accumulate(&mut self, g: &ExampleGrads) {
        if let (Some(c), Some(cg)) = (&mut self.context, &g.context) {
            for (layer, lg) in c.layers.iter_mut().zip(&cg.layers) {
                layer.accumulate(lg);
            }
            c.pair.accumulate(&cg.pair);
        }
        if let (Some(p), Some(pg)) = (&mut self.path, &g.path) {
            match (p, pg) {
                (PathParams::Embedding { table }, PathGrads::Embedding { rows }) => {
                    let cols = table.cols;
                    for (row, dg) in rows {
                        let base = *row as usize * cols;
                        axpy(1.0, dg, &mut table.grad[base..base + cols]);
                    }
                }
                (
                    PathParams::Rnn {
                        embed,
                        wx,
                        wh,
                        bh,
                        wo,
                        bo,
                    },
                    PathGrads::Rnn {
                        embed_rows,
                        wx: dwx,
                        wh: dwh,
                        bh: dbh,
                        wo: dwo,
                        bo: dbo,
                    },
                ) => {
                    let cols = embed.cols;
                    for (row, dg) in embed_rows {
                        let base = *row as usize * cols;
                        axpy(1.0, dg, &mut embed.grad[base..base + cols]);
                    }
                    axpy(1.0, dwx, &mut wx.grad);
                    axpy(1.0, dwh, &mut wh.grad);
                    axpy(1.0, dbh, &mut bh.grad);
                    axpy(1.0, dwo, &mut wo.grad);
                    axpy(1.0, dbo, &mut bo.grad);
                }
                _ => unreachable!("path grads do not match path params"),
            }
        }
    }

    /// One Adam update with bias correction over every tensor. The L2 term is
    /// folded into the gradient here (part of the differentiated loss, not
    /// decoupled weight decay).
    pub fn adam_step(&mut self, opt: &AdamConfig) -> Result<()> {
        self.add_l2_gradients(opt.l2_weight);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for tensor in self.tensors_mut() {
            if let Some(pos) = tensor.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: tensor.name.clone(),
                    context: format!("gradient index {pos} at adam step {t}"),
                });
            }
            for i in 0..tensor.data.len() {
                let g = tensor.grad[i];
                tensor.adam_m[i] = opt.beta1 * tensor.adam_m[i] + (1.0 - opt.beta1) * g;
                tensor.adam_v[i] = opt.beta2 * tensor.adam_v[i] + (1.0 - opt.beta2) * g * g;
                let m_hat = tensor.adam_m[i] / bc1;
                let v_hat = tensor.adam_v[i] / bc2;
                tensor.data[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
        }
        Ok(())
    }

    /// Restore grad/moment buffers after deserialization.
    pub fn reset_state(&mut self) {
        for t in self.tensors_mut() {
            t.reset_state();
        }
    }
}

impl AggregatorLayer {
    fn accumulate(&mut self, g: &LayerGrads) {
        if let Some(w) = &mut self.w {
            axpy(1.0, &g.w, &mut w.grad);
        }
        if let Some(w1) = &mut self.w1 {
            axpy(1.0, &g.w1, &mut w1.grad);
        }
        if let Some(w2) = &mut self.w2 {
            axpy(1.0, &g.w2, &mut w2.grad);
        }
        axpy(1.0, &g.b, &mut self.b.grad);
    }

    pub fn zeroed_grads(&self) -> LayerGrads {
        LayerGrads {
            w: vec![0.0; self.w.as_ref().map_or(0, Tensor::len)],
            w1: vec![0.0; self.w1.as_ref().map_or(0, Tensor::len)],
            w2: vec![0.0; self.w2.as_ref().map_or(0, Tensor::len)],
            b: vec![0.0; self.b.len()],
        }
    }
}

/// Adam hyperparameters (defaults: lr 0.005, betas 0.9/0.999, eps 1e-8,
/// L2 weight 1e-7).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2_weight: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2_weight: 1e-7,
        }
    }
}

/// Dense gradient buffers for one aggregator layer (empty vecs for absent
/// tensors).
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub w: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b: Vec<f64>,
}

/// Gradients of the path branch; embedding rows are sparse because an example
/// touches only its own paths.
#[derive(Debug, Clone)]
pub enum PathGrads {
    Embedding {
        rows: Vec<(u32, Vec<f64>)>,
    },
    Rnn {
        embed_rows: Vec<(u32, Vec<f64>)>,
        wx: Vec<f64>,
        wh: Vec<f64>,
        bh: Vec<f64>,
        wo: Vec<f64>,
        bo: Vec<f64>,
    },
}

/// Gradients produced by one example's backward pass.
#[derive(Debug, Clone)]
pub struct ContextGrads {
    pub layers: Vec<LayerGrads>,
    pub pair: LayerGrads,
}

#[derive(Debug, Clone)]
pub struct ExampleGrads {
    pub context: Option<ContextGrads>,
    pub path: Option<PathGrads>,
}

/// Per-batch loss decomposition: `total = mean_ce + l2_weight * l2_penalty`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub mean_ce: f64,
    pub l2_penalty: f64,
    pub l2_weight: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(mean_ce: f64, l2_penalty: f64, l2_weight: f64) -> Self {
        LossReport {
            mean_ce,
            l2_penalty,
            l2_weight,
            total: mean_ce + l2_weight * l2_penalty,
        }
    }
}
