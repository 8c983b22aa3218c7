//! Graph self-attention, graph-to-graph attention, and the standard
//! multi-head attention and feed-forward sublayers they are stacked with.
//!
//! Node sets are row matrices (`n × d`). Every graph is fully connected over
//! its valid nodes, self-loops included; padded nodes are removed from each
//! softmax by exclusion rather than by zeroing afterwards.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::nn::{
    xavier, BatchNorm, EvalNorm, Linear, NodeMask, ParamId, ParamKind, ParamStore, Session,
};

/// Shape and regularization settings shared by the attention sublayers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionDims {
    pub dim: usize,
    pub heads: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub eval_norm: EvalNorm,
}

impl AttentionDims {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        let dims = Self {
            dim,
            heads,
            leaky_slope: 0.01,
            dropout: 0.0,
            eval_norm: EvalNorm::Running,
        };
        dims.head_dim()?;
        Ok(dims)
    }

    pub fn head_dim(&self) -> Result<usize> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(shape_err!(
                "model dimension {} is not divisible into {} heads",
                self.dim,
                self.heads
            ));
        }
        Ok(self.dim / self.heads)
    }
}

fn check_nodes(s: &Session<'_>, x: Var, dim: usize, mask: &NodeMask) -> Result<usize> {
    let shape = s.tape.shape(x);
    match *shape {
        [n, d] if d == dim && n == mask.len() => Ok(n),
        _ => Err(shape_err!(
            "expected {} nodes of width {dim}, got {shape:?}",
            mask.len()
        )),
    }
}

/// Attention logits `f(aᵀ[z_i ‖ z'_j])` for all pairs, computed as the
/// outer sum of the two halves of `a` applied separately.
fn pair_logits(
    s: &mut Session<'_>,
    z_left: Var,
    z_right: Var,
    attn: Var,
    head_dim: usize,
    slope: f64,
) -> Result<Var> {
    let a_left = s.tape.slice(attn, 0, 0, head_dim)?;
    let a_right = s.tape.slice(attn, 0, head_dim, head_dim)?;
    let left = s.tape.matmul(z_left, a_left)?;
    let right = s.tape.matmul(z_right, a_right)?;
    let e = s.tape.outer_sum(left, right);
    Ok(s.tape.leaky_relu(e, slope))
}

/// Message passing with learned coefficients over one graph:
/// `x'_i = x_i + ‖_k σ(Σ_j α^k_ij W^k x_j)`.
#[derive(Clone, Debug)]
pub struct GraphAttention {
    pub transforms: Vec<ParamId>,
    pub attention: Vec<ParamId>,
    pub dims: AttentionDims,
}

impl GraphAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: AttentionDims,
    ) -> Result<Self> {
        let dh = dims.head_dim()?;
        let transforms = (0..dims.heads)
            .map(|k| {
                store.add(
                    format!("{name}.W_g.{k}"),
                    ParamKind::Weight,
                    xavier(rng, dims.dim, dh),
                )
            })
            .collect();
        let attention = (0..dims.heads)
            .map(|k| {
                store.add(
                    format!("{name}.w_a.{k}"),
                    ParamKind::Weight,
                    xavier(rng, 2 * dh, 1),
                )
            })
            .collect();
        Ok(Self {
            transforms,
            attention,
            dims,
        })
    }

    fn head_inputs(&self, s: &mut Session<'_>, x: Var, k: usize) -> Result<(Var, Var)> {
        let w = s.param(self.transforms[k]);
        let z = s.tape.matmul(x, w)?;
        let dh = self.dims.head_dim()?;
        let a = s.param(self.attention[k]);
        let e = pair_logits(s, z, z, a, dh, self.dims.leaky_slope)?;
        Ok((z, e))
    }

    /// Per-head `n × n` coefficient matrices; row `i` is a distribution over
    /// the valid neighbours of node `i`.
    pub fn coefficients(&self, s: &mut Session<'_>, x: Var, mask: &NodeMask) -> Result<Vec<Var>> {
        check_nodes(s, x, self.dims.dim, mask)?;
        (0..self.dims.heads)
            .map(|k| {
                let (_, e) = self.head_inputs(s, x, k)?;
                s.tape.masked_softmax_rows(e, Some(mask.as_slice()))
            })
            .collect()
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, mask: &NodeMask) -> Result<Var> {
        check_nodes(s, x, self.dims.dim, mask)?;
        let mut heads = Vec::with_capacity(self.dims.heads);
        for k in 0..self.dims.heads {
            let (z, e) = self.head_inputs(s, x, k)?;
            let alpha = s.tape.masked_softmax_rows(e, Some(mask.as_slice()))?;
            let msg = s.tape.matmul(alpha, z)?;
            heads.push(s.tape.leaky_relu(msg, self.dims.leaky_slope));
        }
        let msg = s.tape.concat(&heads, 1)?;
        let msg = s.tape.mask_rows(msg, mask.as_slice())?;
        let msg = s.dropout(msg, self.dims.dropout)?;
        s.tape.add(x, msg)
    }
}

/// Message passing from a source graph into a target graph:
/// `x'_t,i = x_t,i + ‖_k σ(Σ_j β^k_ij W_s^k x_s,j)` with `β` normalized over
/// the valid source nodes for each target node.
#[derive(Clone, Debug)]
pub struct GraphToGraphAttention {
    pub source_transforms: Vec<ParamId>,
    pub target_transforms: Vec<ParamId>,
    pub attention: Vec<ParamId>,
    pub dims: AttentionDims,
}

impl GraphToGraphAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: AttentionDims,
    ) -> Result<Self> {
        let dh = dims.head_dim()?;
        let mut mk = |tag: &str, rows: usize, cols: usize| -> Vec<ParamId> {
            (0..dims.heads)
                .map(|k| {
                    store.add(
                        format!("{name}.{tag}.{k}"),
                        ParamKind::Weight,
                        xavier(rng, rows, cols),
                    )
                })
                .collect()
        };
        let source_transforms = mk("W_s", dims.dim, dh);
        let target_transforms = mk("W_t", dims.dim, dh);
        let attention = mk("w_st", 2 * dh, 1);
        Ok(Self {
            source_transforms,
            target_transforms,
            attention,
            dims,
        })
    }

    fn head_inputs(
        &self,
        s: &mut Session<'_>,
        target: Var,
        source: Var,
        k: usize,
    ) -> Result<(Var, Var)> {
        let ws = s.param(self.source_transforms[k]);
        let wt = s.param(self.target_transforms[k]);
        let zs = s.tape.matmul(source, ws)?;
        let zt = s.tape.matmul(target, wt)?;
        let a = s.param(self.attention[k]);
        let e = pair_logits(s, zt, zs, a, self.dims.head_dim()?, self.dims.leaky_slope)?;
        Ok((zs, e))
    }

    fn check(
        &self,
        s: &Session<'_>,
        target: Var,
        source: Var,
        source_mask: &NodeMask,
    ) -> Result<()> {
        check_nodes(s, source, self.dims.dim, source_mask)?;
        match *s.tape.shape(target) {
            [_, d] if d == self.dims.dim => Ok(()),
            ref other => Err(shape_err!(
                "target graph must be n×{}, got {other:?}",
                self.dims.dim
            )),
        }
    }

    /// Per-head `n_t × n_s` coefficient matrices.
    pub fn coefficients(
        &self,
        s: &mut Session<'_>,
        target: Var,
        source: Var,
        source_mask: &NodeMask,
    ) -> Result<Vec<Var>> {
        self.check(s, target, source, source_mask)?;
        (0..self.dims.heads)
            .map(|k| {
                let (_, e) = self.head_inputs(s, target, source, k)?;
                s.tape.masked_softmax_rows(e, Some(source_mask.as_slice()))
            })
            .collect()
    }

    pub fn forward(
        &self,
        s: &mut Session<'_>,
        target: Var,
        source: Var,
        source_mask: &NodeMask,
    ) -> Result<Var> {
        self.check(s, target, source, source_mask)?;
        let mut heads = Vec::with_capacity(self.dims.heads);
        for k in 0..self.dims.heads {
            let (zs, e) = self.head_inputs(s, target, source, k)?;
            let beta = s
                .tape
                .masked_softmax_rows(e, Some(source_mask.as_slice()))?;
            let msg = s.tape.matmul(beta, zs)?;
            heads.push(s.tape.leaky_relu(msg, self.dims.leaky_slope));
        }
        let msg = s.tape.concat(&heads, 1)?;
        let msg = s.dropout(msg, self.dims.dropout)?;
        s.tape.add(target, msg)
    }
}

/// Scaled dot-product self-attention with per-head projections, an output
/// projection, and a residual connection. No biases.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    pub dims: AttentionDims,
}

impl MultiHeadSelfAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: AttentionDims,
    ) -> Result<Self> {
        let dh = dims.head_dim()?;
        let mut mk = |tag: &str| -> Vec<ParamId> {
            (0..dims.heads)
                .map(|k| {
                    store.add(
                        format!("{name}.{tag}.{k}"),
                        ParamKind::Weight,
                        xavier(rng, dims.dim, dh),
                    )
                })
                .collect()
        };
        let query = mk("W_q");
        let key = mk("W_k");
        let value = mk("W_v");
        let output = store.add(
            format!("{name}.W_o"),
            ParamKind::Weight,
            xavier(rng, dims.dim, dims.dim),
        );
        Ok(Self {
            query,
            key,
            value,
            output,
            dims,
        })
    }

    /// Per-head attention weights over keys.
    pub fn weights(&self, s: &mut Session<'_>, x: Var, mask: &NodeMask) -> Result<Vec<Var>> {
        check_nodes(s, x, self.dims.dim, mask)?;
        (0..self.dims.heads)
            .map(|k| self.head_weights(s, x, mask, k))
            .collect()
    }

    fn head_weights(&self, s: &mut Session<'_>, x: Var, mask: &NodeMask, k: usize) -> Result<Var> {
        let scale = 1.0 / (self.dims.head_dim()? as f64).sqrt();
        let wq = s.param(self.query[k]);
        let wk = s.param(self.key[k]);
        let q = s.tape.matmul(x, wq)?;
        let kk = s.tape.matmul(x, wk)?;
        let kt = s.tape.transpose(kk)?;
        let scores = s.tape.matmul(q, kt)?;
        let scores = s.tape.scale(scores, scale);
        s.tape.masked_softmax_rows(scores, Some(mask.as_slice()))
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, mask: &NodeMask) -> Result<Var> {
        check_nodes(s, x, self.dims.dim, mask)?;
        let mut heads = Vec::with_capacity(self.dims.heads);
        for k in 0..self.dims.heads {
            let attn = self.head_weights(s, x, mask, k)?;
            let wv = s.param(self.value[k]);
            let v = s.tape.matmul(x, wv)?;
            heads.push(s.tape.matmul(attn, v)?);
        }
        let cat = s.tape.concat(&heads, 1)?;
        let wo = s.param(self.output);
        let out = s.tape.matmul(cat, wo)?;
        let out = s.dropout(out, self.dims.dropout)?;
        s.tape.add(x, out)
    }
}

/// Position-wise two-layer network with a ReLU and a residual connection.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout: f64,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.linear1"), dim, hidden, true),
            output: Linear::new(store, rng, &format!("{name}.linear2"), hidden, dim, true),
            dropout,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(s, x)?;
        let h = s.tape.relu(h);
        let h = s.dropout(h, self.dropout)?;
        let y = self.output.forward(s, h)?;
        let y = s.dropout(y, self.dropout)?;
        s.tape.add(x, y)
    }
}

/// Normalization and linear layer applied after message passing, as a
/// residual sublayer: `x + Linear(BatchNorm(x))`.
#[derive(Clone, Debug)]
pub struct NormProjection {
    pub norm: BatchNorm,
    pub linear: Linear,
}

impl NormProjection {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        eval_norm: EvalNorm,
    ) -> Self {
        Self {
            norm: BatchNorm::new(store, &format!("{name}.norm"), dim, eval_norm),
            linear: Linear::new(store, rng, &format!("{name}.linear"), dim, dim, true),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, mask: &NodeMask) -> Result<Var> {
        let h = self.norm.forward(s, x, mask.as_slice())?;
        let h = self.linear.forward(s, h)?;
        s.tape.add(x, h)
    }
}

/// Graph self-attention module: message passing, normalization + linear,
/// then standard multi-head self-attention.
#[derive(Clone, Debug)]
pub struct GraphSelfAttentionBlock {
    pub message: GraphAttention,
    pub post: NormProjection,
    pub self_attn: MultiHeadSelfAttention,
}

impl GraphSelfAttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: AttentionDims,
    ) -> Result<Self> {
        Ok(Self {
            message: GraphAttention::new(store, rng, &format!("{name}.graph_attn"), dims)?,
            post: NormProjection::new(store, rng, name, dims.dim, dims.eval_norm),
            self_attn: MultiHeadSelfAttention::new(store, rng, &format!("{name}.self_attn"), dims)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, mask: &NodeMask) -> Result<Var> {
        let h = self.message.forward(s, x, mask)?;
        let h = self.post.forward(s, h, mask)?;
        self.self_attn.forward(s, h, mask)
    }
}

/// Graph-to-graph attention module: source→target message passing,
/// normalization + linear, then multi-head self-attention over the target.
#[derive(Clone, Debug)]
pub struct GraphToGraphBlock {
    pub message: GraphToGraphAttention,
    pub post: NormProjection,
    pub self_attn: MultiHeadSelfAttention,
}

impl GraphToGraphBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: AttentionDims,
    ) -> Result<Self> {
        Ok(Self {
            message: GraphToGraphAttention::new(store, rng, &format!("{name}.g2g_attn"), dims)?,
            post: NormProjection::new(store, rng, &format!("{name}.g2g"), dims.dim, dims.eval_norm),
            self_attn: MultiHeadSelfAttention::new(
                store,
                rng,
                &format!("{name}.g2g_self_attn"),
                dims,
            )?,
        })
    }

    pub fn forward(
        &self,
        s: &mut Session<'_>,
        target: Var,
        source: Var,
        source_mask: &NodeMask,
    ) -> Result<Var> {
        let targets = NodeMask::all(s.tape.shape(target)[0]);
        let h = self.message.forward(s, target, source, source_mask)?;
        let h = self.post.forward(s, h, &targets)?;
        self.self_attn.forward(s, h, &targets)
    }
}

#[cfg(test)]
mod tests;
