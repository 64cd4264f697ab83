//! Structure-aware encoding of the evidence graph.
//!
//! Two stages, both multi-head attention over the tape:
//!
//! 1. Tree-aware attention: self-attention over graph nodes restricted by
//!    the adjacency mask (a node sees itself and its neighbors), with
//!    residual + LayerNorm and a feed-forward block.
//! 2. Graph former: a fixed set of learnable query vectors cross-attends
//!    into the encoded nodes, self-attends, and is projected to the
//!    language-model width — a constant token budget whatever the graph
//!    size.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::EvidenceGraph;
use crate::matrix::Matrix;
use crate::rng::standard_normal;
use crate::tape::{masked_softmax, Tape, Var};

/// Which node pairs may exchange attention: `i == j` or `(i, j)` an edge.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }
}

/// Mask straight off the graph: self-connections plus the edge set.
pub fn build_mask(graph: &EvidenceGraph) -> AttentionMask {
    let n = graph.len();
    let mut allowed = graph.adjacency();
    for i in 0..n {
        allowed[i * n + i] = true;
    }
    AttentionMask { n, allowed }
}

/// Per-head projections stored stacked (`d x d`, head rows contiguous)
/// plus the output projection.
#[derive(Debug, Clone)]
pub struct AttnProjParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl AttnProjParams {
    pub fn init<R: rand::Rng>(dim: usize, rng: &mut R) -> Self {
        let mut mk = |rows: usize, cols: usize| {
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| standard_normal(rng) * 0.02).collect(),
            )
        };
        AttnProjParams {
            wq: mk(dim, dim),
            wk: mk(dim, dim),
            wv: mk(dim, dim),
            wo: mk(dim, dim),
        }
    }
}

/// Tape handles for one projection set.
#[derive(Debug, Clone, Copy)]
pub struct AttnProjVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl AttnProjParams {
    pub fn register(&self, tape: &mut Tape) -> AttnProjVars {
        AttnProjVars {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            wo: tape.leaf(self.wo.clone()),
        }
    }
}

/// Masked multi-head attention: `queries_x` attends into `keys_x`.
/// `mask`, when present, is row-major `M x N` over (query, key) pairs.
pub fn multi_head_attention(
    tape: &mut Tape,
    queries_x: Var,
    keys_x: Var,
    proj: &AttnProjVars,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Var {
    let d = queries_x.cols();
    assert_eq!(keys_x.cols(), d, "query/key width mismatch");
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    let hd = d / heads;
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mask_slice = mask.map(|m| {
        assert_eq!(m.n(), keys_x.rows(), "mask size vs key count");
        assert_eq!(queries_x.rows(), keys_x.rows(), "masked attention is self-attention");
        m.allowed()
    });

    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq_h = tape.slice_rows(proj.wq, h * hd, hd);
        let wk_h = tape.slice_rows(proj.wk, h * hd, hd);
        let wv_h = tape.slice_rows(proj.wv, h * hd, hd);
        let wq_t = tape.transpose(wq_h);
        let wk_t = tape.transpose(wk_h);
        let wv_t = tape.transpose(wv_h);
        let q = tape.matmul(queries_x, wq_t);
        let k = tape.matmul(keys_x, wk_t);
        let v = tape.matmul(keys_x, wv_t);
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt);
        let logits = tape.scale(logits, scale);
        let weights = tape.softmax_rows(logits, mask_slice);
        contexts.push(tape.matmul(weights, v));
    }
    let ctx = if contexts.len() == 1 {
        contexts[0]
    } else {
        tape.concat_cols(&contexts)
    };
    let wo_t = tape.transpose(proj.wo);
    tape.matmul(ctx, wo_t)
}

/// Tree-aware attention block parameters.
#[derive(Debug, Clone)]
pub struct TreeAttentionParams {
    pub proj: AttnProjParams,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    /// `d_ff x d_g`.
    pub ffn_w1: Matrix,
    /// `d_g x d_ff`.
    pub ffn_w2: Matrix,
    pub heads: usize,
    /// When set, the block ends at `FFN(LayerNorm(x + attn))` with no
    /// second residual or norm (the literal single-norm form).
    pub strict_ffn: bool,
}

impl TreeAttentionParams {
    pub fn init<R: rand::Rng>(d_g: usize, d_ff: usize, heads: usize, rng: &mut R) -> Self {
        let mut mk = |rows: usize, cols: usize| {
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| standard_normal(rng) * 0.02).collect(),
            )
        };
        let ffn_w1 = mk(d_ff, d_g);
        let ffn_w2 = mk(d_g, d_ff);
        TreeAttentionParams {
            proj: AttnProjParams::init(d_g, rng),
            ln1_gain: Matrix::from_vec(1, d_g, vec![1.0; d_g]),
            ln1_bias: Matrix::zeros(1, d_g),
            ln2_gain: Matrix::from_vec(1, d_g, vec![1.0; d_g]),
            ln2_bias: Matrix::zeros(1, d_g),
            ffn_w1,
            ffn_w2,
            heads,
            strict_ffn: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreeAttentionVars {
    pub proj: AttnProjVars,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ffn_w1: Var,
    pub ffn_w2: Var,
    pub heads: usize,
    pub strict_ffn: bool,
}

impl TreeAttentionParams {
    pub fn register(&self, tape: &mut Tape) -> TreeAttentionVars {
        TreeAttentionVars {
            proj: self.proj.register(tape),
            ln1_gain: tape.leaf(self.ln1_gain.clone()),
            ln1_bias: tape.leaf(self.ln1_bias.clone()),
            ln2_gain: tape.leaf(self.ln2_gain.clone()),
            ln2_bias: tape.leaf(self.ln2_bias.clone()),
            ffn_w1: tape.leaf(self.ffn_w1.clone()),
            ffn_w2: tape.leaf(self.ffn_w2.clone()),
            heads: self.heads,
            strict_ffn: self.strict_ffn,
        }
    }
}

/// Masked self-attention + residual/norm + feed-forward over node features.
pub fn tree_attention_t(
    tape: &mut Tape,
    x: Var,
    mask: &AttentionMask,
    vars: &TreeAttentionVars,
) -> Var {
    let attn = multi_head_attention(tape, x, x, &vars.proj, vars.heads, Some(mask));
    let res = tape.add(x, attn);
    let y = tape.layer_norm_rows(res, vars.ln1_gain, vars.ln1_bias);
    let w1t = tape.transpose(vars.ffn_w1);
    let hidden = tape.matmul(y, w1t);
    let hidden = tape.gelu(hidden);
    let w2t = tape.transpose(vars.ffn_w2);
    let ffn = tape.matmul(hidden, w2t);
    if vars.strict_ffn {
        ffn
    } else {
        let res2 = tape.add(y, ffn);
        tape.layer_norm_rows(res2, vars.ln2_gain, vars.ln2_bias)
    }
}

/// Forward-only convenience wrapper.
pub fn tree_attention(features: &Matrix, mask: &AttentionMask, params: &TreeAttentionParams) -> Matrix {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let vars = params.register(&mut tape);
    let out = tree_attention_t(&mut tape, x, mask, &vars);
    tape.value(out).clone()
}

/// Per-head masked attention weight matrices for the block's first stage.
/// Probe for testing the mask semantics; rows over allowed pairs sum to 1
/// and blocked pairs are exactly zero.
pub fn attention_weights(
    features: &Matrix,
    mask: &AttentionMask,
    params: &TreeAttentionParams,
) -> Vec<Matrix> {
    let d = features.cols();
    let heads = params.heads;
    let hd = d / heads;
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let take = |m: &Matrix| {
            let mut sub = Matrix::zeros(hd, d);
            for r in 0..hd {
                let src = m.row(h * hd + r).to_vec();
                sub.row_mut(r).copy_from_slice(&src);
            }
            sub
        };
        let q = features.matmul(&take(&params.proj.wq).transpose());
        let k = features.matmul(&take(&params.proj.wk).transpose());
        let logits = q.matmul(&k.transpose()).scale(scale);
        out.push(masked_softmax(&logits, Some(mask.allowed())));
    }
    out
}

/// Graph-former parameters: learnable queries, two attention stages, and
/// the output projection to the language-model width.
#[derive(Debug, Clone)]
pub struct GraphFormerParams {
    /// `Q x d_g`.
    pub queries: Matrix,
    pub cross: AttnProjParams,
    pub selfa: AttnProjParams,
    /// `d_llm x d_g`.
    pub w_llm: Matrix,
    pub heads: usize,
}

impl GraphFormerParams {
    pub fn init<R: rand::Rng>(
        d_g: usize,
        d_llm: usize,
        query_count: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let mut mk = |rows: usize, cols: usize| {
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| standard_normal(rng) * 0.02).collect(),
            )
        };
        let queries = mk(query_count, d_g);
        let w_llm = mk(d_llm, d_g);
        GraphFormerParams {
            queries,
            cross: AttnProjParams::init(d_g, rng),
            selfa: AttnProjParams::init(d_g, rng),
            w_llm,
            heads,
        }
    }

    pub fn query_count(&self) -> usize {
        self.queries.rows()
    }

    pub fn llm_dim(&self) -> usize {
        self.w_llm.rows()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GraphFormerVars {
    pub queries: Var,
    pub cross: AttnProjVars,
    pub selfa: AttnProjVars,
    pub w_llm: Var,
    pub heads: usize,
}

impl GraphFormerParams {
    pub fn register(&self, tape: &mut Tape) -> GraphFormerVars {
        GraphFormerVars {
            queries: tape.leaf(self.queries.clone()),
            cross: self.cross.register(tape),
            selfa: self.selfa.register(tape),
            w_llm: tape.leaf(self.w_llm.clone()),
            heads: self.heads,
        }
    }
}

/// Distills an encoded graph into `Q` tokens of width `d_llm`:
/// unmasked cross-attention from the learnable queries, self-attention
/// among them, then the output projection.
pub fn graph_former_t(tape: &mut Tape, encoded: Var, vars: &GraphFormerVars) -> Var {
    let q1 = multi_head_attention(tape, vars.queries, encoded, &vars.cross, vars.heads, None);
    let q2 = multi_head_attention(tape, q1, q1, &vars.selfa, vars.heads, None);
    let w_t = tape.transpose(vars.w_llm);
    tape.matmul(q2, w_t)
}

/// Forward-only convenience wrapper.
pub fn graph_former(encoded: &Matrix, params: &GraphFormerParams) -> Matrix {
    let mut tape = Tape::new();
    let x = tape.constant(encoded.clone());
    let vars = params.register(&mut tape);
    let out = graph_former_t(&mut tape, x, &vars);
    tape.value(out).clone()
}
