//! Analytic parameter and FLOP accounting for the parallel-expert layers,
//! plus the beta solver used to match parameter budgets across variants.
//!
//! Parameter formulas (per layer, weights only — biases are counted but
//! reported outside these buckets):
//!
//! - baseline:   router `d*N`, experts `8*d^2*N`, total `d*N*(1 + 8d)`
//! - multi-head: head+merge `2*d^2`, router `d*N/h`, experts
//!   `N * 2 * (d/h) * round(4*beta*d)` (the `8*beta*d^2*N/h` term evaluated
//!   at the integer inner width actually built)
//!
//! Per-token multiply-accumulate model (at sequence length l = 1):
//!
//! - `theta_smoe  = d*(N + 8d)`
//! - `theta_mhmoe = d*(N + 8*beta*d + N/h)`
//! - `delta = theta_smoe - theta_mhmoe = d * epsilon`, with
//!   `epsilon = 8d*(1 - beta) - N/h`; the multi-head variant is cheaper
//!   exactly when `epsilon > 0`, which requires `beta <= 1`.

use crate::error::{Error, Result};

/// Accounting bucket a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBucket {
    /// Expert FFN weights/biases.
    Expert,
    /// Router embeddings (plus reduction and temperature in reduced mode).
    Router,
    /// Multi-head and merge projections.
    HeadMerge,
    /// Token/position embeddings.
    Embedding,
    /// Attention projections.
    Attention,
    /// Layer norm gains/biases.
    Norm,
    /// Final vocabulary projection.
    LmHead,
}

/// Inner hidden width of an expert FFN: round(4 * beta * d), at least 1.
pub fn expert_inner_dim(d: usize, beta: f64) -> usize {
    ((4.0 * beta * d as f64).round() as usize).max(1)
}

/// Per-layer parameter counts (weights only), split by bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub router: u64,
    pub experts: u64,
    pub head_merge: u64,
}

impl LayerParams {
    pub fn total(&self) -> u64 {
        self.router + self.experts + self.head_merge
    }
}

/// Baseline layer parameters: d*N*(1 + 8d), split router d*N + experts 8d^2*N.
pub fn smoe_params(d: u64, n_experts: u64) -> LayerParams {
    LayerParams {
        router: d * n_experts,
        experts: 8 * d * d * n_experts,
        head_merge: 0,
    }
}

/// Multi-head layer parameters at inner width round(4*beta*d).
pub fn mhmoe_params(d: u64, n_experts: u64, h: u64, beta: f64) -> Result<LayerParams> {
    if h == 0 || d % h != 0 {
        return Err(Error::Contract(format!(
            "mhmoe_params: d={d} not divisible by h={h}"
        )));
    }
    if beta <= 0.0 {
        return Err(Error::Contract(format!(
            "mhmoe_params: beta must be positive, got {beta}"
        )));
    }
    Ok(mhmoe_params_inner(
        d,
        n_experts,
        h,
        expert_inner_dim(d as usize, beta) as u64,
    ))
}

/// Integer core of [`mhmoe_params`] at an explicit inner width.
pub fn mhmoe_params_inner(d: u64, n_experts: u64, h: u64, inner: u64) -> LayerParams {
    LayerParams {
        router: d * n_experts / h,
        experts: n_experts * 2 * (d / h) * inner,
        head_merge: 2 * d * d,
    }
}

/// Outcome of the beta search for a per-layer parameter target.
#[derive(Debug, Clone, Copy)]
pub struct BetaSolution {
    pub beta: f64,
    pub inner_dim: u64,
    pub params: LayerParams,
    /// target - achieved total (always >= 0).
    pub gap: u64,
}

/// Largest beta (equivalently: integer inner width) whose per-layer total
/// stays within `target_params`. The search is exact: the returned width
/// satisfies total(inner) <= target < total(inner + 1).
pub fn solve_beta(d: u64, n_experts: u64, h: u64, target_params: u64) -> Result<BetaSolution> {
    if h == 0 || d % h != 0 {
        return Err(Error::Contract(format!(
            "solve_beta: d={d} not divisible by h={h}"
        )));
    }
    let fixed = 2 * d * d + d * n_experts / h;
    let per_inner = 2 * (d / h) * n_experts;
    let minimum = fixed + per_inner; // inner width 1
    if target_params < minimum {
        return Err(Error::Contract(format!(
            "solve_beta: target {target_params} below minimum achievable {minimum} \
             (beta-independent terms {fixed} + one inner unit {per_inner})"
        )));
    }
    let inner = (target_params - fixed) / per_inner;
    let params = mhmoe_params_inner(d, n_experts, h, inner);
    debug_assert!(params.total() <= target_params);
    debug_assert!(mhmoe_params_inner(d, n_experts, h, inner + 1).total() > target_params);
    let beta = inner as f64 / (4.0 * d as f64);
    // The float beta must reproduce the integer width it came from.
    debug_assert_eq!(expert_inner_dim(d as usize, beta) as u64, inner);
    Ok(BetaSolution {
        beta,
        inner_dim: inner,
        params,
        gap: target_params - params.total(),
    })
}

/// Per-token multiply-accumulate counts and the delta/epsilon diagnostics.
#[derive(Debug, Clone)]
pub struct FlopReport {
    pub d: u64,
    pub n_experts: u64,
    pub h: u64,
    pub beta: f64,
    /// d * (N + 8d)
    pub theta_smoe: f64,
    /// d * (N + 8*beta*d + N/h)
    pub theta_mhmoe: f64,
    pub smoe_router: f64,
    pub smoe_experts: f64,
    pub mh_multihead: f64,
    pub mh_router: f64,
    pub mh_experts: f64,
    pub mh_merge: f64,
    /// theta_smoe - theta_mhmoe
    pub delta: f64,
    /// 8d*(1 - beta) - N/h; delta = d * epsilon
    pub epsilon: f64,
    pub warnings: Vec<String>,
}

/// Evaluate the per-token cost model at l = 1.
pub fn flops_per_token(d: u64, n_experts: u64, h: u64, beta: f64) -> Result<FlopReport> {
    if h == 0 {
        return Err(Error::Contract("flops_per_token: h must be >= 1".into()));
    }
    let (df, nf, hf) = (d as f64, n_experts as f64, h as f64);
    let theta_smoe = df * (nf + 8.0 * df);
    let theta_mhmoe = df * (nf + 8.0 * beta * df + nf / hf);
    let epsilon = 8.0 * df * (1.0 - beta) - nf / hf;
    let delta = theta_smoe - theta_mhmoe;
    let mut warnings = Vec::new();
    if beta > 1.0 {
        warnings.push(format!(
            "beta = {beta:.4} > 1: parameter parity forces wider experts, so the \
             per-token cost model gives delta = {delta:.1} < 0 (multi-head variant \
             costs more than the baseline); the cost-saving bound requires beta <= 1"
        ));
    } else if delta < 0.0 {
        warnings.push(format!(
            "delta = {delta:.1} < 0: multi-head variant costs more per token (epsilon = {epsilon:.3})"
        ));
    }
    Ok(FlopReport {
        d,
        n_experts,
        h,
        beta,
        theta_smoe,
        theta_mhmoe,
        smoe_router: df * nf,
        smoe_experts: 8.0 * df * df,
        mh_multihead: df * df,
        mh_router: df * nf,
        mh_experts: 8.0 * beta * df * df,
        mh_merge: df * df,
        delta,
        epsilon,
        warnings,
    })
}

/// One named parameter of a built model (shape only).
#[derive(Debug, Clone)]
pub struct ParamRecord {
    pub name: String,
    pub bucket: ParamBucket,
    pub is_bias: bool,
    pub numel: u64,
}

/// What the formulas expect of one model, for [`verify_params`].
#[derive(Debug, Clone, Copy)]
pub struct ModelShape {
    pub d: u64,
    pub n_experts: u64,
    pub heads: u64,
    pub beta: f64,
    pub moe_layers: u64,
    pub has_head_merge: bool,
    /// Direct routers carry exactly the `d*N` (or `d*N/h`) embedding table
    /// the formula counts; reduced routers fall outside formula scope.
    pub direct_router: bool,
}

/// Bucket-by-bucket comparison of measured counts against the formulas.
#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub measured_expert_weights: u64,
    pub measured_router_weights: u64,
    pub measured_head_merge_weights: u64,
    pub formula_experts: u64,
    pub formula_router: u64,
    pub formula_head_merge: u64,
    /// Router bucket only participates for direct routers.
    pub router_in_scope: bool,
    pub expert_match: bool,
    pub router_match: bool,
    pub head_merge_match: bool,
    /// Bias parameters per bucket (outside the formula scope).
    pub bias_params: u64,
    /// Everything the formulas do not model: embeddings, attention, norms,
    /// lm head, biases, reduced-router extras. Names with counts.
    pub excluded: Vec<(String, u64)>,
    pub total_params: u64,
}

impl VerificationReport {
    pub fn all_match(&self) -> bool {
        self.expert_match && self.head_merge_match && (!self.router_in_scope || self.router_match)
    }
}

/// Walk a model's parameter records, bucket them, and compare against the
/// per-layer formulas scaled by the MoE layer count. Exact equality is
/// required for every formula-scope bucket.
pub fn verify_params(shape: &ModelShape, records: &[ParamRecord]) -> Result<VerificationReport> {
    let mut expert_w = 0u64;
    let mut router_w = 0u64;
    let mut head_merge_w = 0u64;
    let mut bias = 0u64;
    let mut excluded: Vec<(String, u64)> = Vec::new();
    let mut total = 0u64;
    for r in records {
        total += r.numel;
        if r.is_bias {
            bias += r.numel;
            excluded.push((format!("{} (bias)", r.name), r.numel));
            continue;
        }
        match r.bucket {
            ParamBucket::Expert => expert_w += r.numel,
            ParamBucket::Router => {
                router_w += r.numel;
                if !shape.direct_router {
                    excluded.push((format!("{} (reduced router)", r.name), r.numel));
                }
            }
            ParamBucket::HeadMerge => head_merge_w += r.numel,
            ParamBucket::Embedding | ParamBucket::Attention | ParamBucket::Norm | ParamBucket::LmHead => {
                excluded.push((r.name.clone(), r.numel));
            }
        }
    }
    let per_layer = if shape.has_head_merge {
        mhmoe_params(shape.d, shape.n_experts, shape.heads, shape.beta)?
    } else {
        smoe_params(shape.d, shape.n_experts)
    };
    let formula_experts = per_layer.experts * shape.moe_layers;
    let formula_router = per_layer.router * shape.moe_layers;
    let formula_head_merge = per_layer.head_merge * shape.moe_layers;
    Ok(VerificationReport {
        measured_expert_weights: expert_w,
        measured_router_weights: router_w,
        measured_head_merge_weights: head_merge_w,
        formula_experts,
        formula_router,
        formula_head_merge,
        router_in_scope: shape.direct_router,
        expert_match: expert_w == formula_experts,
        router_match: router_w == formula_router,
        head_merge_match: head_merge_w == formula_head_merge,
        bias_params: bias,
        excluded,
        total_params: total,
    })
}
