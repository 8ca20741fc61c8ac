//! Temporal aggregation by decomposed cross-attention.
//!
//! Each block runs two pre-norm decoder branches: a learned token attends over
//! the full period-aware memory, and a second token attends over its seasonal
//! part. The seasonal token is combined with the temporal mean of the trend,
//! passed through a lateral linear layer, and averaged with the full-branch
//! token to form the next block's query.

use ndarray::Array2;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::nn::{join, normal_matrix, Activation, LayerNorm, Linear, Parameters, SeedRng};

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_LAYERS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionParams {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl CrossAttentionParams {
    pub fn init(rng: &mut SeedRng, width: usize, heads: usize) -> Self {
        CrossAttentionParams {
            heads,
            query: Linear::init(rng, width, width),
            key: Linear::init(rng, width, width),
            value: Linear::init(rng, width, width),
            output: Linear::init(rng, width, width),
        }
    }

    pub fn width(&self) -> usize {
        self.query.output_dim()
    }

    fn check(&self) -> Result<()> {
        let c = self.width();
        ensure!(self.heads >= 1, "attention needs at least one head");
        ensure!(
            c % self.heads == 0,
            "model width {c} is not divisible by {} heads",
            self.heads
        );
        for (name, l) in [
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("output", &self.output),
        ] {
            l.check()?;
            ensure!(
                l.w.dim() == (c, c),
                "{name} projection is {:?}, expected {c}×{c}",
                l.w.dim()
            );
        }
        Ok(())
    }
}

impl Parameters for CrossAttentionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams {
    pub inner: Linear,
    pub outer: Linear,
    pub activation: Activation,
}

impl FeedForwardParams {
    pub fn init(rng: &mut SeedRng, width: usize, inner: usize) -> Self {
        FeedForwardParams {
            inner: Linear::init(rng, width, inner),
            outer: Linear::init(rng, inner, width),
            activation: Activation::Gelu,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.inner.forward(g, x);
        let h = self.activation.forward(g, h);
        self.outer.forward(g, h)
    }
}

impl Parameters for FeedForwardParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.inner.visit(&join(prefix, "inner"), f);
        self.outer.visit(&join(prefix, "outer"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.inner.visit_mut(&join(prefix, "inner"), f);
        self.outer.visit_mut(&join(prefix, "outer"), f);
    }
}

/// One decoder branch: `u = q + MHCA(LN(q), LN(mem))`, `out = u + FFN(LN(u))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TamBranchParams {
    pub norm_query: LayerNorm,
    pub norm_memory: LayerNorm,
    pub attention: CrossAttentionParams,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForwardParams,
}

impl TamBranchParams {
    pub fn init(rng: &mut SeedRng, width: usize, heads: usize, inner: usize) -> Self {
        TamBranchParams {
            norm_query: LayerNorm::identity(width),
            norm_memory: LayerNorm::identity(width),
            attention: CrossAttentionParams::init(rng, width, heads),
            norm_ffn: LayerNorm::identity(width),
            ffn: FeedForwardParams::init(rng, width, inner),
        }
    }

    pub fn forward(&self, g: &mut Graph, token: Var, memory: Var) -> Result<Var> {
        let q = self.norm_query.forward(g, token);
        let m = self.norm_memory.forward(g, memory);
        let a = mhca_graph(g, q, m, &self.attention)?;
        let u = g.add(token, a);
        let h = self.norm_ffn.forward(g, u);
        let f = self.ffn.forward(g, h);
        Ok(g.add(u, f))
    }
}

impl Parameters for TamBranchParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.norm_query.visit(&join(prefix, "norm_query"), f);
        self.norm_memory.visit(&join(prefix, "norm_memory"), f);
        self.attention.visit(&join(prefix, "attention"), f);
        self.norm_ffn.visit(&join(prefix, "norm_ffn"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm_query.visit_mut(&join(prefix, "norm_query"), f);
        self.norm_memory.visit_mut(&join(prefix, "norm_memory"), f);
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.norm_ffn.visit_mut(&join(prefix, "norm_ffn"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TamBlockParams {
    pub full: TamBranchParams,
    pub seasonal: TamBranchParams,
    pub lateral: Linear,
}

impl TamBlockParams {
    pub fn init(rng: &mut SeedRng, width: usize, heads: usize, inner: usize) -> Self {
        TamBlockParams {
            full: TamBranchParams::init(rng, width, heads, inner),
            seasonal: TamBranchParams::init(rng, width, heads, inner),
            lateral: Linear::init(rng, width, width),
        }
    }

    pub fn width(&self) -> usize {
        self.full.attention.width()
    }

    fn check(&self) -> Result<()> {
        self.full.attention.check()?;
        self.seasonal.attention.check()?;
        self.lateral.check()?;
        let c = self.width();
        ensure!(
            self.seasonal.attention.width() == c && self.lateral.w.dim() == (c, c),
            "branch widths disagree inside a block"
        );
        Ok(())
    }
}

impl Parameters for TamBlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.full.visit(&join(prefix, "full"), f);
        self.seasonal.visit(&join(prefix, "seasonal"), f);
        self.lateral.visit(&join(prefix, "lateral"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.full.visit_mut(&join(prefix, "full"), f);
        self.seasonal.visit_mut(&join(prefix, "seasonal"), f);
        self.lateral.visit_mut(&join(prefix, "lateral"), f);
    }
}

/// The pair of tokens threaded through the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct TamState {
    /// `[1 × C]`
    pub token_full: Tensor,
    /// `[1 × C]`
    pub token_seasonal: Tensor,
    pub block_index: usize,
}

/// Learned initial tokens plus the block stack.
#[derive(Clone, Debug, PartialEq)]
pub struct TamParams {
    pub init_full: Tensor,
    pub init_seasonal: Tensor,
    pub blocks: Vec<TamBlockParams>,
}

impl TamParams {
    pub fn init(rng: &mut SeedRng, width: usize, heads: usize, inner: usize, layers: usize) -> Self {
        let init_full = normal_matrix(rng, 1, width, 0.02);
        let init_seasonal = normal_matrix(rng, 1, width, 0.02);
        let blocks = (0..layers)
            .map(|_| TamBlockParams::init(rng, width, heads, inner))
            .collect();
        TamParams {
            init_full,
            init_seasonal,
            blocks,
        }
    }

    pub fn initial_state(&self) -> TamState {
        TamState {
            token_full: self.init_full.clone(),
            token_seasonal: self.init_seasonal.clone(),
            block_index: 0,
        }
    }

    /// Tape version of the whole stack for one part; returns the final full token.
    pub fn forward(&self, g: &mut Graph, x_pe: Var, seasonal: Var, trend: Var) -> Result<Var> {
        ensure!(!self.blocks.is_empty(), "aggregation stack needs at least one block");
        let mut full = g.param(&self.init_full);
        let mut seas = g.param(&self.init_seasonal);
        for block in &self.blocks {
            (full, seas) = tam_block_graph(g, full, seas, x_pe, seasonal, trend, block)?;
        }
        Ok(full)
    }
}

impl Parameters for TamParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "init_full"), &self.init_full);
        f(join(prefix, "init_seasonal"), &self.init_seasonal);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "init_full"), &mut self.init_full);
        f(join(prefix, "init_seasonal"), &mut self.init_seasonal);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

/// Multi-head cross-attention of a `[1 × C]` query over a `[T_s × C]` memory.
///
/// Returns the output row and the per-head attention weights `[h × T_s]`.
pub fn mhca_graph_with_weights(
    g: &mut Graph,
    query: Var,
    memory: Var,
    p: &CrossAttentionParams,
) -> Result<(Var, Vec<Var>)> {
    p.check()?;
    let c = p.width();
    let (frames, mem_width) = g.value(memory).dim();
    ensure!(frames >= 1, "cross-attention memory is empty");
    ensure!(
        mem_width == c && g.value(query).dim() == (1, c),
        "cross-attention width mismatch: query {:?}, memory {:?}, model {c}",
        g.value(query).dim(),
        g.value(memory).dim()
    );
    let d = c / p.heads;
    let q = p.query.forward(g, query);
    let k = p.key.forward(g, memory);
    let v = p.value.forward(g, memory);
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.slice_cols(q, h * d, d);
        let kh = g.slice_cols(k, h * d, d);
        let vh = g.slice_cols(v, h * d, d);
        let logits = g.matmul_bt(qh, kh);
        let logits = g.scale(logits, scale);
        let w = g.softmax_rows(logits);
        heads.push(g.matmul(w, vh));
        weights.push(w);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
    Ok((p.output.forward(g, cat), weights))
}

pub fn mhca_graph(g: &mut Graph, query: Var, memory: Var, p: &CrossAttentionParams) -> Result<Var> {
    Ok(mhca_graph_with_weights(g, query, memory, p)?.0)
}

/// Attended output `[1 × C]` and per-head weights `[h × T_s]`.
pub fn mhca(
    query: &Tensor,
    memory: &Tensor,
    params: &CrossAttentionParams,
) -> Result<(Tensor, Array2<f64>)> {
    let mut g = Graph::new();
    let q = g.constant(query.clone());
    let m = g.constant(memory.clone());
    let (out, ws) = mhca_graph_with_weights(&mut g, q, m, params)?;
    let mut weights = Array2::zeros((params.heads, memory.nrows()));
    for (h, w) in ws.iter().enumerate() {
        weights.row_mut(h).assign(&g.value(*w).row(0));
    }
    Ok((g.value(out).clone(), weights))
}

/// One block on the tape; returns `(token_full, token_seasonal)`.
pub fn tam_block_graph(
    g: &mut Graph,
    token_full: Var,
    token_seasonal: Var,
    x_pe: Var,
    seasonal: Var,
    trend: Var,
    p: &TamBlockParams,
) -> Result<(Var, Var)> {
    p.check()?;
    let c = p.width();
    let shape = g.value(x_pe).dim();
    ensure!(
        shape.1 == c && g.value(seasonal).dim() == shape && g.value(trend).dim() == shape,
        "memory shapes must agree and have width {c}: x_pe {:?}, seasonal {:?}, trend {:?}",
        shape,
        g.value(seasonal).dim(),
        g.value(trend).dim()
    );
    ensure!(
        g.value(token_full).dim() == (1, c) && g.value(token_seasonal).dim() == (1, c),
        "token width mismatch"
    );
    let x_hat = p.full.forward(g, token_full, x_pe)?;
    let s_new = p.seasonal.forward(g, token_seasonal, seasonal)?;
    let trend_token = g.mean_rows(trend);
    let lat_in = g.add(trend_token, s_new);
    let lat = p.lateral.forward(g, lat_in);
    let sum = g.add(x_hat, lat);
    Ok((g.scale(sum, 0.5), s_new))
}

pub fn tam_block(
    state: &TamState,
    x_pe: &Tensor,
    seasonal: &Tensor,
    trend: &Tensor,
    params: &TamBlockParams,
) -> Result<TamState> {
    let mut g = Graph::new();
    let tf = g.constant(state.token_full.clone());
    let ts = g.constant(state.token_seasonal.clone());
    let x = g.constant(x_pe.clone());
    let s = g.constant(seasonal.clone());
    let t = g.constant(trend.clone());
    let (f, s_new) = tam_block_graph(&mut g, tf, ts, x, s, t, params)?;
    Ok(TamState {
        token_full: g.value(f).clone(),
        token_seasonal: g.value(s_new).clone(),
        block_index: state.block_index + 1,
    })
}

/// Folds [`tam_block`] over `blocks` starting from `init`; returns the final full token.
pub fn tam_stack(
    x_pe: &Tensor,
    seasonal: &Tensor,
    trend: &Tensor,
    init: &TamState,
    blocks: &[TamBlockParams],
) -> Result<Tensor> {
    ensure!(!blocks.is_empty(), "aggregation stack needs at least one block");
    let mut state = init.clone();
    for b in blocks {
        state = tam_block(&state, x_pe, seasonal, trend, b)?;
    }
    Ok(state.token_full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    fn random(rng: &mut SeedRng, r: usize, c: usize) -> Tensor {
        normal_matrix(rng, r, c, 1.0)
    }

    #[test]
    fn single_frame_memory_gets_full_weight() {
        let mut rng = seeded_rng(1, 0);
        let p = CrossAttentionParams::init(&mut rng, 8, 2);
        let q = random(&mut rng, 1, 8);
        let m = random(&mut rng, 1, 8);
        let (out, w) = mhca(&q, &m, &p).unwrap();
        assert!(w.iter().all(|v| (*v - 1.0).abs() < 1e-15));
        let expect = p.output.apply(&p.value.apply(&m));
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_gives_uniform_weights_and_mean_of_values() {
        let mut rng = seeded_rng(2, 0);
        let mut p = CrossAttentionParams::init(&mut rng, 8, 4);
        p.query = Linear::zeros(8, 8);
        let q = random(&mut rng, 1, 8);
        let m = random(&mut rng, 5, 8);
        let (out, w) = mhca(&q, &m, &p).unwrap();
        assert!(w.iter().all(|v| (*v - 0.2).abs() < 1e-15));
        let mean_v = p.value.apply(&m).mean_axis(ndarray::Axis(0)).unwrap().insert_axis(ndarray::Axis(0));
        let expect = p.output.apply(&mean_v);
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_shift_leaves_output_unchanged() {
        // a query bias adds q_b·k_t to every logit; shifting the key bias adds
        // q·Δ to every logit of a head, the same for all frames
        let mut rng = seeded_rng(3, 0);
        let p = CrossAttentionParams::init(&mut rng, 8, 2);
        let q = random(&mut rng, 1, 8);
        let m = random(&mut rng, 6, 8);
        let (base, _) = mhca(&q, &m, &p).unwrap();
        let mut shifted = p.clone();
        shifted.key.b += &random(&mut rng, 1, 8);
        let (out, _) = mhca(&q, &m, &shifted).unwrap();
        for (a, b) in out.iter().zip(base.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one_per_head() {
        let mut rng = seeded_rng(4, 0);
        for _ in 0..20 {
            let p = CrossAttentionParams::init(&mut rng, 12, 3);
            let q = random(&mut rng, 1, 12);
            let m = random(&mut rng, 7, 12);
            let (_, w) = mhca(&q, &m, &p).unwrap();
            for row in w.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn empty_memory_and_bad_heads_are_rejected() {
        let mut rng = seeded_rng(5, 0);
        let p = CrossAttentionParams::init(&mut rng, 8, 2);
        let q = random(&mut rng, 1, 8);
        assert!(mhca(&q, &Tensor::zeros((0, 8)), &p).is_err());
        let mut bad = p.clone();
        bad.heads = 3;
        assert!(mhca(&q, &random(&mut rng, 2, 8), &bad).is_err());
    }

    #[test]
    fn duplicated_frame_does_not_change_uniform_attention() {
        let mut rng = seeded_rng(6, 0);
        let mut p = CrossAttentionParams::init(&mut rng, 8, 2);
        p.key = Linear::zeros(8, 8);
        let q = random(&mut rng, 1, 8);
        let m = random(&mut rng, 3, 8);
        let mut m2 = Tensor::zeros((6, 8));
        for i in 0..6 {
            m2.row_mut(i).assign(&m.row(i / 2));
        }
        let (a, _) = mhca(&q, &m, &p).unwrap();
        let (b, _) = mhca(&q, &m2, &p).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn zeroed_block(width: usize) -> TamBlockParams {
        let mut rng = seeded_rng(0, 0);
        let mut b = TamBlockParams::init(&mut rng, width, 2, 2 * width);
        b.visit_mut("", &mut |name, t| {
            if !name.ends_with("gamma") {
                t.fill(0.0)
            }
        });
        b
    }

    #[test]
    fn zeroed_block_halves_the_full_branch() {
        let mut rng = seeded_rng(7, 0);
        let block = zeroed_block(8);
        let state = TamState {
            token_full: random(&mut rng, 1, 8),
            token_seasonal: random(&mut rng, 1, 8),
            block_index: 0,
        };
        let x = random(&mut rng, 5, 8);
        let zero = Tensor::zeros((5, 8));
        let out = tam_block(&state, &x, &zero, &zero, &block).unwrap();
        // with every projection zeroed both residual branches pass the token through
        let x_hat = &state.token_full;
        for (a, b) in out.token_full.iter().zip(x_hat.iter()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
        assert_eq!(out.token_seasonal, state.token_seasonal);
        assert_eq!(out.block_index, 1);
    }

    #[test]
    fn fusion_of_equal_operands_is_that_operand() {
        // x̂ = token (zeroed branch) and Lateral = identity on a zero trend and
        // a seasonal token equal to the full token: fusion returns the token
        let mut rng = seeded_rng(8, 0);
        let mut block = zeroed_block(6);
        block.lateral.w = Tensor::eye(6);
        let tok = random(&mut rng, 1, 6);
        let state = TamState {
            token_full: tok.clone(),
            token_seasonal: tok.clone(),
            block_index: 0,
        };
        let x = random(&mut rng, 4, 6);
        let zero = Tensor::zeros((4, 6));
        let out = tam_block(&state, &x, &zero, &zero, &block).unwrap();
        for (a, b) in out.token_full.iter().zip(tok.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_frame_block_matches_hand_computation() {
        let mut rng = seeded_rng(9, 0);
        let c = 8;
        let block = TamBlockParams::init(&mut rng, c, 2, 16);
        let state = TamState {
            token_full: random(&mut rng, 1, c),
            token_seasonal: random(&mut rng, 1, c),
            block_index: 2,
        };
        let x = random(&mut rng, 1, c);
        let s = random(&mut rng, 1, c);
        let t = random(&mut rng, 1, c);
        let out = tam_block(&state, &x, &s, &t, &block).unwrap();

        // straight-line evaluation: single-frame attention is the value path
        let ln = |v: &Tensor, n: &LayerNorm| {
            let mean = v.mean().unwrap();
            let var = v.mapv(|a| (a - mean) * (a - mean)).mean().unwrap();
            (v.mapv(|a| (a - mean) / (var + crate::nn::LAYER_NORM_EPS).sqrt())) * &n.gamma + &n.beta
        };
        let branch = |tok: &Tensor, mem: &Tensor, p: &TamBranchParams| {
            let m = ln(mem, &p.norm_memory);
            let a = p.attention.output.apply(&p.attention.value.apply(&m));
            let u = tok + &a;
            let h = p.ffn.inner.apply(&ln(&u, &p.norm_ffn)).mapv(crate::graph::gelu_scalar);
            &u + &p.ffn.outer.apply(&h)
        };
        let x_hat = branch(&state.token_full, &x, &block.full);
        let s_new = branch(&state.token_seasonal, &s, &block.seasonal);
        let lat = block.lateral.apply(&(&t + &s_new));
        let expect = (&x_hat + &lat) * 0.5;
        for (a, b) in out.token_full.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for (a, b) in out.token_seasonal.iter().zip(s_new.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.block_index, 3);
    }

    #[test]
    fn stack_of_one_is_one_block_and_is_deterministic() {
        let mut rng = seeded_rng(10, 0);
        let params = TamParams::init(&mut rng, 8, 2, 16, 1);
        let x = random(&mut rng, 5, 8);
        let s = random(&mut rng, 5, 8);
        let t = random(&mut rng, 5, 8);
        let init = params.initial_state();
        let a = tam_stack(&x, &s, &t, &init, &params.blocks).unwrap();
        let b = tam_block(&init, &x, &s, &t, &params.blocks[0]).unwrap().token_full;
        assert_eq!(a, b);
        let c = tam_stack(&x, &s, &t, &init, &params.blocks).unwrap();
        assert_eq!(a, c);
        assert!(tam_stack(&x, &s, &t, &init, &[]).is_err());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut rng = seeded_rng(11, 0);
        let params = TamParams::init(&mut rng, 8, 2, 16, 1);
        let x = random(&mut rng, 5, 8);
        let bad = random(&mut rng, 4, 8);
        assert!(tam_block(&params.initial_state(), &x, &bad, &x, &params.blocks[0]).is_err());
        let narrow = random(&mut rng, 5, 6);
        assert!(tam_block(&params.initial_state(), &narrow, &narrow, &narrow, &params.blocks[0]).is_err());
    }
}
