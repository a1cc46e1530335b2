//! Parallel-expert layers: the SMoE baseline and the multi-head variant.
//!
//! Both share one pipeline: compute gates, pick top-k experts per routed row,
//! gather rows into per-expert batches, run each expert FFN, scale by the
//! selected gate values, scatter back, and add the residual. The multi-head
//! layer wraps that pipeline in a head projection, a token-split reshape, the
//! inverse merge reshape, and a merge projection, so each token is routed as
//! `h` independent sub-tokens of width `d/h`.

use std::sync::Arc;

use crate::budget::expert_inner_dim;
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::rng::{xavier_uniform, SeededRng};
use crate::routing::{
    balance_loss, dispatch, topk_select, Counting, Router, RouterBinding, RouterMode,
    RoutingDecision,
};
use crate::telemetry::AssignmentLog;
use crate::tensor::Tensor;

/// Reduction width of the reduced (cosine) router at token level; multi-head
/// layers use `max(1, 16 / h)` per head.
pub const REDUCED_ROUTER_DIM: usize = 16;
/// Initial gating temperature for the reduced router.
pub const REDUCED_ROUTER_TAU0: f64 = 0.3;

/// Two-layer feed-forward expert: GELU(x W1 + b1) W2 + b2.
#[derive(Debug, Clone)]
pub struct ExpertFfn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnBinding {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

impl ExpertFfn {
    pub fn new(in_dim: usize, inner_dim: usize, rng: &mut SeededRng) -> Self {
        ExpertFfn {
            w1: xavier_uniform(rng, in_dim, inner_dim, 1.0),
            b1: Tensor::zeros(vec![1, inner_dim]).expect("bias shape"),
            w2: xavier_uniform(rng, inner_dim, in_dim, 1.0),
            b2: Tensor::zeros(vec![1, in_dim]).expect("bias shape"),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn inner_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn bind(&self, g: &mut Graph) -> FfnBinding {
        FfnBinding {
            w1: g.param(&self.w1),
            b1: g.param(&self.b1),
            w2: g.param(&self.w2),
            b2: g.param(&self.b2),
        }
    }

    pub fn forward(g: &mut Graph, b: &FfnBinding, x: TensorId) -> Result<TensorId> {
        let h = g.matmul(x, b.w1)?;
        let h = g.add_bias_row(h, b.b1)?;
        let a = g.gelu(h)?;
        let out = g.matmul(a, b.w2)?;
        g.add_bias_row(out, b.b2)
    }
}

/// Split `[l x d]` into `[(l*h) x (d/h)]`: row `i*h + j` is the j-th
/// contiguous d/h-slice of input row i. Pure reshape, no arithmetic.
pub fn split_tokens(g: &mut Graph, x: TensorId, h: usize) -> Result<TensorId> {
    let (l, d) = g.tensor(x).expect_matrix("split_tokens")?;
    if h == 0 || d % h != 0 {
        return Err(Error::Contract(format!(
            "split_tokens: token width d={d} not divisible by h={h}"
        )));
    }
    g.reshape(x, vec![l * h, d / h])
}

/// Exact inverse of [`split_tokens`]: `[(l*h) x (d/h)] -> [l x d]`.
pub fn merge_tokens(g: &mut Graph, o: TensorId, h: usize) -> Result<TensorId> {
    let (rows, sub) = g.tensor(o).expect_matrix("merge_tokens")?;
    if h == 0 || rows % h != 0 {
        return Err(Error::Contract(format!(
            "merge_tokens: row count {rows} not divisible by h={h}"
        )));
    }
    g.reshape(o, vec![rows / h, sub * h])
}

/// Result of one MoE layer forward.
pub struct MoeOutput {
    pub output: TensorId,
    /// Load-balancing loss (hard counting) over the routed rows.
    pub balance: TensorId,
    pub log: AssignmentLog,
    pub decision: RoutingDecision,
    /// Events dropped by the optional capacity limit.
    pub overflowed: usize,
}

/// Shared routing pipeline over `[rows x dim]`: residual + gate-weighted
/// expert outputs (the layer equation for both variants).
///
/// `included` restricts routing, balance loss and telemetry to a subset of
/// rows (padding exclusion); excluded rows pass through on the residual only.
#[allow(clippy::too_many_arguments)]
fn route_and_process(
    g: &mut Graph,
    x: TensorId,
    router: &Router,
    rb: &RouterBinding,
    experts: &[ExpertFfn],
    ebs: &[FfnBinding],
    k: usize,
    capacity: Option<f64>,
    included: Option<Arc<Vec<usize>>>,
) -> Result<(TensorId, TensorId, RoutingDecision, usize)> {
    let (rows, _) = g.tensor(x).expect_matrix("route_and_process")?;
    let routed_x = match &included {
        None => x,
        Some(idx) => g.row_gather(x, idx.clone())?,
    };
    let gates = router.gate_scores(g, rb, routed_x)?;
    let decision = topk_select(g.tensor(gates), k)?;
    let plan = dispatch(&decision, capacity)?;

    let n = router.num_experts;
    let routed_rows = decision.topk_indices.len();
    let gates_flat = g.reshape(gates, vec![routed_rows * n, 1])?;

    let mut combined: Option<TensorId> = None;
    for (p, expert) in experts.iter().enumerate() {
        let expert_rows = &plan.rows_per_expert[p];
        if expert_rows.is_empty() {
            continue;
        }
        // Keep each intermediate under ~16 MB so the allocator reuses the
        // buffers across steps instead of faulting fresh pages.
        let chunk_rows = (2_000_000 / expert.inner_dim().max(1)).max(64);
        let mut start = 0;
        while start < expert_rows.len() {
            let end = (start + chunk_rows).min(expert_rows.len());
            let rows_chunk: Arc<Vec<usize>> = Arc::new(expert_rows[start..end].to_vec());
            let gates_chunk: Arc<Vec<usize>> =
                Arc::new(plan.gate_index_per_expert[p][start..end].to_vec());
            let xp = g.row_gather(routed_x, rows_chunk.clone())?;
            let yp = ExpertFfn::forward(g, &ebs[p], xp)?;
            let wp = g.row_gather(gates_flat, gates_chunk)?;
            let scaled = g.scale_rows(yp, wp)?;
            let targets = match &included {
                None => rows_chunk,
                Some(idx) => Arc::new(rows_chunk.iter().map(|&r| idx[r]).collect::<Vec<_>>()),
            };
            let scattered = g.row_scatter_add(scaled, targets, rows)?;
            combined = Some(match combined {
                None => scattered,
                Some(acc) => g.add(acc, scattered)?,
            });
            start = end;
        }
    }
    let output = match combined {
        Some(c) => g.add(x, c)?,
        None => x,
    };
    let balance = balance_loss(g, gates, &decision, Counting::Hard)?;
    Ok((output, balance, decision, plan.overflowed))
}

fn log_from_decision(
    layer: usize,
    heads: Option<usize>,
    num_experts: usize,
    decision: &RoutingDecision,
) -> AssignmentLog {
    let h = heads.unwrap_or(1) as u32;
    let events = decision.topk_indices.len();
    let mut token_of_event = Vec::with_capacity(events);
    let mut head_of_event = Vec::with_capacity(events);
    let mut experts_of_event = Vec::with_capacity(events * decision.k);
    for (row, experts) in decision.topk_indices.iter().enumerate() {
        token_of_event.push(row as u32 / h);
        head_of_event.push(row as u32 % h);
        experts_of_event.extend(experts.iter().map(|&p| p as u32));
    }
    AssignmentLog {
        layer,
        heads,
        num_experts,
        k: decision.k,
        num_tokens: events / h as usize,
        token_of_event,
        head_of_event,
        experts_of_event,
    }
}

/// SMoE baseline layer: token-level top-k routing over N experts with inner
/// width 4d, token-level residual.
#[derive(Debug, Clone)]
pub struct SmoeLayer {
    pub router: Router,
    pub experts: Vec<ExpertFfn>,
    pub k: usize,
    pub d: usize,
    pub capacity_factor: Option<f64>,
}

pub struct SmoeBinding {
    pub router: RouterBinding,
    pub experts: Vec<FfnBinding>,
}

impl SmoeLayer {
    pub fn new(
        d: usize,
        num_experts: usize,
        k: usize,
        mode: RouterMode,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if k == 0 || k > num_experts {
            return Err(Error::Contract(format!(
                "smoe layer: k={k} out of range for {num_experts} experts"
            )));
        }
        let router = match mode {
            RouterMode::Direct => Router::direct(num_experts, d, rng)?,
            RouterMode::Reduced => {
                Router::reduced(num_experts, d, REDUCED_ROUTER_DIM, REDUCED_ROUTER_TAU0, rng)?
            }
        };
        let experts = (0..num_experts)
            .map(|_| ExpertFfn::new(d, 4 * d, rng))
            .collect();
        Ok(SmoeLayer {
            router,
            experts,
            k,
            d,
            capacity_factor: None,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> SmoeBinding {
        SmoeBinding {
            router: self.router.bind(g),
            experts: self.experts.iter().map(|e| e.bind(g)).collect(),
        }
    }

    /// One token is routed per row: `Y[i] = X[i] + sum_{p in Phi_i} g_p f_p(X[i])`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &SmoeBinding,
        x: TensorId,
        layer_id: usize,
        mask: Option<&[bool]>,
    ) -> Result<MoeOutput> {
        let (rows, cols) = g.tensor(x).expect_matrix("smoe_forward")?;
        if cols != self.d {
            return Err(Error::Dimension(format!(
                "smoe_forward: input width {cols}, layer expects {}",
                self.d
            )));
        }
        let included = included_rows(mask, rows, 1)?;
        let (output, balance, decision, overflowed) = route_and_process(
            g,
            x,
            &self.router,
            &b.router,
            &self.experts,
            &b.experts,
            self.k,
            self.capacity_factor,
            included,
        )?;
        let log = log_from_decision(layer_id, None, self.router.num_experts, &decision);
        Ok(MoeOutput {
            output,
            balance,
            log,
            decision,
            overflowed,
        })
    }
}

/// Multi-head MoE layer: head projection, token split into `h` sub-tokens,
/// sub-token routing through experts of width `round(4 beta d)`, merge back,
/// merge projection. Input and output shapes match.
#[derive(Debug, Clone)]
pub struct MhmoeLayer {
    pub w_head: Tensor,
    pub b_head: Tensor,
    pub w_merge: Tensor,
    pub b_merge: Tensor,
    pub router: Router,
    pub experts: Vec<ExpertFfn>,
    pub heads: usize,
    pub k: usize,
    pub d: usize,
    pub beta: f64,
    pub capacity_factor: Option<f64>,
}

pub struct MhmoeBinding {
    pub w_head: TensorId,
    pub b_head: TensorId,
    pub w_merge: TensorId,
    pub b_merge: TensorId,
    pub router: RouterBinding,
    pub experts: Vec<FfnBinding>,
}

impl MhmoeLayer {
    pub fn new(
        d: usize,
        num_experts: usize,
        k: usize,
        heads: usize,
        beta: f64,
        mode: RouterMode,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "mhmoe layer: d={d} not divisible by h={heads}"
            )));
        }
        if k == 0 || k > num_experts {
            return Err(Error::Contract(format!(
                "mhmoe layer: k={k} out of range for {num_experts} experts"
            )));
        }
        if beta <= 0.0 {
            return Err(Error::Contract(format!(
                "mhmoe layer: beta must be positive, got {beta}"
            )));
        }
        let sub_dim = d / heads;
        // Multi-head projection gets gain 1/sqrt(2); merge projection plain
        // Xavier with zero bias.
        let w_head = xavier_uniform(rng, d, d, 1.0 / 2.0_f64.sqrt());
        let w_merge = xavier_uniform(rng, d, d, 1.0);
        let router = match mode {
            RouterMode::Direct => Router::direct(num_experts, sub_dim, rng)?,
            RouterMode::Reduced => Router::reduced(
                num_experts,
                sub_dim,
                (REDUCED_ROUTER_DIM / heads).max(1),
                REDUCED_ROUTER_TAU0,
                rng,
            )?,
        };
        let inner = expert_inner_dim(d, beta);
        let experts = (0..num_experts)
            .map(|_| ExpertFfn::new(sub_dim, inner, rng))
            .collect();
        Ok(MhmoeLayer {
            w_head,
            b_head: Tensor::zeros(vec![1, d]).expect("bias shape"),
            w_merge,
            b_merge: Tensor::zeros(vec![1, d]).expect("bias shape"),
            router,
            experts,
            heads,
            k,
            d,
            beta,
            capacity_factor: None,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> MhmoeBinding {
        MhmoeBinding {
            w_head: g.param(&self.w_head),
            b_head: g.param(&self.b_head),
            w_merge: g.param(&self.w_merge),
            b_merge: g.param(&self.b_merge),
            router: self.router.bind(g),
            experts: self.experts.iter().map(|e| e.bind(g)).collect(),
        }
    }

    /// The full pipeline: project, split, route sub-tokens with sub-token
    /// residual, restore original sub-token order, merge, project.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &MhmoeBinding,
        x: TensorId,
        layer_id: usize,
        mask: Option<&[bool]>,
    ) -> Result<MoeOutput> {
        let (rows, cols) = g.tensor(x).expect_matrix("mhmoe_forward")?;
        if cols != self.d {
            return Err(Error::Dimension(format!(
                "mhmoe_forward: input width {cols}, layer expects {}",
                self.d
            )));
        }
        let wt = g.transpose(b.w_head)?;
        let projected = g.matmul(x, wt)?;
        let projected = g.add_bias_row(projected, b.b_head)?;
        let sub = split_tokens(g, projected, self.heads)?;
        let included = included_rows(mask, rows, self.heads)?;
        let (processed, balance, decision, overflowed) = route_and_process(
            g,
            sub,
            &self.router,
            &b.router,
            &self.experts,
            &b.experts,
            self.k,
            self.capacity_factor,
            included,
        )?;
        let merged = merge_tokens(g, processed, self.heads)?;
        let mt = g.transpose(b.w_merge)?;
        let output = g.matmul(merged, mt)?;
        let output = g.add_bias_row(output, b.b_merge)?;
        let log = log_from_decision(layer_id, Some(self.heads), self.router.num_experts, &decision);
        Ok(MoeOutput {
            output,
            balance,
            log,
            decision,
            overflowed,
        })
    }
}

/// Expand a token mask into routed-row indices (repeated per head).
/// Returns None when every row is included.
fn included_rows(mask: Option<&[bool]>, tokens: usize, heads: usize) -> Result<Option<Arc<Vec<usize>>>> {
    let Some(mask) = mask else {
        return Ok(None);
    };
    if mask.len() != tokens {
        return Err(Error::Contract(format!(
            "mask length {} does not match {tokens} tokens",
            mask.len()
        )));
    }
    if mask.iter().all(|&m| m) {
        return Ok(None);
    }
    if mask.iter().all(|&m| !m) {
        return Err(Error::Contract("mask excludes every token".into()));
    }
    let mut rows = Vec::new();
    for (t, &keep) in mask.iter().enumerate() {
        if keep {
            for j in 0..heads {
                rows.push(t * heads + j);
            }
        }
    }
    Ok(Some(Arc::new(rows)))
}
