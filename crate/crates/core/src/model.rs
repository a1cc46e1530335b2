//! Tiny causal decoder language model hosting the parallel-expert layers.
//!
//! Byte-level vocabulary, learned positional embeddings, pre-norm blocks of
//! [attention -> residual] then [FFN-or-MoE -> residual]. The MoE layer
//! replaces the dense FFN in every block where
//! `block_index % moe_every == moe_every - 1`. Training minimizes mean
//! next-token cross-entropy plus `alpha` times the mean load-balancing loss,
//! with Adam (bias-corrected), global grad-norm clipping and a linear
//! warmup/decay schedule.

use std::collections::HashMap;
use std::sync::Arc;

use crate::budget::{self, expert_inner_dim, ModelShape, ParamBucket, ParamRecord};
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::layers::{
    ExpertFfn, FfnBinding, MhmoeBinding, MhmoeLayer, SmoeBinding, SmoeLayer,
};
use crate::rng::{xavier_uniform, SeededRng};
use crate::routing::{RouterMode, MIN_TEMPERATURE};
use crate::telemetry::AssignmentLog;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Dense,
    Smoe,
    Mhmoe,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Smoe => "smoe",
            Variant::Mhmoe => "mhmoe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSpec {
    /// Solve beta for parameter parity with the baseline of the same config.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub n_blocks: usize,
    pub n_attn_heads: usize,
    pub context: usize,
    /// MoE replaces the dense FFN every `moe_every` blocks.
    pub moe_every: usize,
    pub n_experts: usize,
    pub k: usize,
    /// Sub-token heads of the multi-head MoE variant.
    pub heads: usize,
    pub beta: BetaSpec,
    /// Weight of the load-balancing loss in the training objective.
    pub alpha: f64,
    pub variant: Variant,
    pub router_mode: RouterMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d: 128,
            n_blocks: 4,
            n_attn_heads: 4,
            context: 128,
            moe_every: 2,
            n_experts: 8,
            k: 2,
            heads: 4,
            beta: BetaSpec::Auto,
            alpha: 1e-2,
            variant: Variant::Smoe,
            router_mode: RouterMode::Direct,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.d == 0 || self.n_blocks == 0 || self.context == 0 {
            return Err(Error::Config("d, n_blocks and context must be positive".into()));
        }
        if self.n_attn_heads == 0 || self.d % self.n_attn_heads != 0 {
            return Err(Error::Config(format!(
                "d = {} not divisible by n_attn_heads = {}",
                self.d, self.n_attn_heads
            )));
        }
        if self.moe_every == 0 {
            return Err(Error::Config("moe_every must be >= 1".into()));
        }
        if self.variant != Variant::Dense {
            if self.n_experts == 0 || self.k == 0 || self.k > self.n_experts {
                return Err(Error::Config(format!(
                    "k = {} out of range for {} experts",
                    self.k, self.n_experts
                )));
            }
        }
        if self.variant == Variant::Mhmoe {
            if self.heads == 0 || self.d % self.heads != 0 {
                return Err(Error::Config(format!(
                    "d = {} not divisible by h = {}",
                    self.d, self.heads
                )));
            }
            if let BetaSpec::Fixed(b) = self.beta {
                if b <= 0.0 {
                    return Err(Error::Config(format!("beta must be positive, got {b}")));
                }
            }
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Block indices that carry a MoE layer instead of the dense FFN.
    pub fn moe_blocks(&self) -> Vec<usize> {
        if self.variant == Variant::Dense {
            return Vec::new();
        }
        (0..self.n_blocks)
            .filter(|b| b % self.moe_every == self.moe_every - 1)
            .collect()
    }

    /// Effective expert inner scale: solved for parameter parity with the
    /// baseline of this config when `beta = auto`.
    pub fn resolve_beta(&self) -> Result<f64> {
        if self.variant != Variant::Mhmoe {
            return Ok(1.0);
        }
        match self.beta {
            BetaSpec::Fixed(b) => Ok(b),
            BetaSpec::Auto => {
                let target = budget::smoe_params(self.d as u64, self.n_experts as u64).total();
                let sol = budget::solve_beta(
                    self.d as u64,
                    self.n_experts as u64,
                    self.heads as u64,
                    target,
                )?;
                Ok(sol.beta)
            }
        }
    }
}

#[derive(Debug)]
enum FfnKind {
    Dense(ExpertFfn),
    Smoe(SmoeLayer),
    Mhmoe(MhmoeLayer),
}

#[derive(Debug)]
struct Block {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    ffn: FfnKind,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// Effective beta used to size multi-head experts (1.0 otherwise).
    pub beta: f64,
    tok_embed: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    lnf_gain: Tensor,
    lnf_bias: Tensor,
    lm_head: Tensor,
}

/// Deterministic construction from a config: same seed, bit-identical weights.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let beta = config.resolve_beta()?;
    let mut rng = SeededRng::new(config.seed);
    let d = config.d;
    let ones = |n: usize| Tensor::new(vec![1, n], vec![1.0; n]).expect("gain shape");
    let zeros = |n: usize| Tensor::zeros(vec![1, n]).expect("bias shape");

    let tok_embed = xavier_uniform(&mut rng, config.vocab_size, d, 1.0);
    let pos_embed = xavier_uniform(&mut rng, config.context, d, 1.0);
    let moe_blocks = config.moe_blocks();
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for b in 0..config.n_blocks {
        let ffn = if moe_blocks.contains(&b) {
            match config.variant {
                Variant::Dense => unreachable!("dense configs have no moe blocks"),
                Variant::Smoe => FfnKind::Smoe(SmoeLayer::new(
                    d,
                    config.n_experts,
                    config.k,
                    config.router_mode,
                    &mut rng,
                )?),
                Variant::Mhmoe => FfnKind::Mhmoe(MhmoeLayer::new(
                    d,
                    config.n_experts,
                    config.k,
                    config.heads,
                    beta,
                    config.router_mode,
                    &mut rng,
                )?),
            }
        } else {
            FfnKind::Dense(ExpertFfn::new(d, 4 * d, &mut rng))
        };
        blocks.push(Block {
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            wq: xavier_uniform(&mut rng, d, d, 1.0),
            bq: zeros(d),
            wk: xavier_uniform(&mut rng, d, d, 1.0),
            bk: zeros(d),
            wv: xavier_uniform(&mut rng, d, d, 1.0),
            bv: zeros(d),
            wo: xavier_uniform(&mut rng, d, d, 1.0),
            bo: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
            ffn,
        });
    }
    Ok(Model {
        config: config.clone(),
        beta,
        tok_embed,
        pos_embed,
        blocks,
        lnf_gain: ones(d),
        lnf_bias: zeros(d),
        // Small gain keeps initial logits near uniform, so an untrained
        // model's perplexity starts at the vocab-size bound.
        lm_head: xavier_uniform(&mut rng, d, config.vocab_size, 0.1),
    })
}

/// One named parameter: (name, bucket, is_bias, tensor).
pub type ParamEntry<'a> = (String, ParamBucket, bool, &'a Tensor);
pub type ParamEntryMut<'a> = (String, ParamBucket, bool, &'a mut Tensor);

macro_rules! enumerate_params {
    ($model:expr, $ref_kind:ident) => {{
        let model = $model;
        let mut out: Vec<_> = Vec::new();
        out.push(("tok_embed".to_string(), ParamBucket::Embedding, false, $ref_kind!(model.tok_embed)));
        out.push(("pos_embed".to_string(), ParamBucket::Embedding, false, $ref_kind!(model.pos_embed)));
        for (i, block) in $ref_kind!(iter model.blocks).enumerate() {
            let p = format!("block{i}");
            out.push((format!("{p}.ln1.gain"), ParamBucket::Norm, false, $ref_kind!(block.ln1_gain)));
            out.push((format!("{p}.ln1.bias"), ParamBucket::Norm, true, $ref_kind!(block.ln1_bias)));
            out.push((format!("{p}.attn.wq"), ParamBucket::Attention, false, $ref_kind!(block.wq)));
            out.push((format!("{p}.attn.bq"), ParamBucket::Attention, true, $ref_kind!(block.bq)));
            out.push((format!("{p}.attn.wk"), ParamBucket::Attention, false, $ref_kind!(block.wk)));
            out.push((format!("{p}.attn.bk"), ParamBucket::Attention, true, $ref_kind!(block.bk)));
            out.push((format!("{p}.attn.wv"), ParamBucket::Attention, false, $ref_kind!(block.wv)));
            out.push((format!("{p}.attn.bv"), ParamBucket::Attention, true, $ref_kind!(block.bv)));
            out.push((format!("{p}.attn.wo"), ParamBucket::Attention, false, $ref_kind!(block.wo)));
            out.push((format!("{p}.attn.bo"), ParamBucket::Attention, true, $ref_kind!(block.bo)));
            out.push((format!("{p}.ln2.gain"), ParamBucket::Norm, false, $ref_kind!(block.ln2_gain)));
            out.push((format!("{p}.ln2.bias"), ParamBucket::Norm, true, $ref_kind!(block.ln2_bias)));
            match $ref_kind!(block.ffn) {
                FfnKind::Dense(e) => {
                    out.push((format!("{p}.ffn.w1"), ParamBucket::Attention, false, $ref_kind!(e.w1)));
                    out.push((format!("{p}.ffn.b1"), ParamBucket::Attention, true, $ref_kind!(e.b1)));
                    out.push((format!("{p}.ffn.w2"), ParamBucket::Attention, false, $ref_kind!(e.w2)));
                    out.push((format!("{p}.ffn.b2"), ParamBucket::Attention, true, $ref_kind!(e.b2)));
                }
                FfnKind::Smoe(layer) => {
                    out.push((format!("{p}.moe.router.embeddings"), ParamBucket::Router, false, $ref_kind!(layer.router.expert_embeddings)));
                    if let Some(r) = $ref_kind!(opt layer.router.reduction) {
                        out.push((format!("{p}.moe.router.reduction"), ParamBucket::Router, false, r));
                    }
                    if let Some(t) = $ref_kind!(opt layer.router.temperature) {
                        out.push((format!("{p}.moe.router.temperature"), ParamBucket::Router, false, t));
                    }
                    for (ei, e) in $ref_kind!(iter layer.experts).enumerate() {
                        out.push((format!("{p}.moe.expert{ei}.w1"), ParamBucket::Expert, false, $ref_kind!(e.w1)));
                        out.push((format!("{p}.moe.expert{ei}.b1"), ParamBucket::Expert, true, $ref_kind!(e.b1)));
                        out.push((format!("{p}.moe.expert{ei}.w2"), ParamBucket::Expert, false, $ref_kind!(e.w2)));
                        out.push((format!("{p}.moe.expert{ei}.b2"), ParamBucket::Expert, true, $ref_kind!(e.b2)));
                    }
                }
                FfnKind::Mhmoe(layer) => {
                    out.push((format!("{p}.moe.head.w"), ParamBucket::HeadMerge, false, $ref_kind!(layer.w_head)));
                    out.push((format!("{p}.moe.head.b"), ParamBucket::HeadMerge, true, $ref_kind!(layer.b_head)));
                    out.push((format!("{p}.moe.merge.w"), ParamBucket::HeadMerge, false, $ref_kind!(layer.w_merge)));
                    out.push((format!("{p}.moe.merge.b"), ParamBucket::HeadMerge, true, $ref_kind!(layer.b_merge)));
                    out.push((format!("{p}.moe.router.embeddings"), ParamBucket::Router, false, $ref_kind!(layer.router.expert_embeddings)));
                    if let Some(r) = $ref_kind!(opt layer.router.reduction) {
                        out.push((format!("{p}.moe.router.reduction"), ParamBucket::Router, false, r));
                    }
                    if let Some(t) = $ref_kind!(opt layer.router.temperature) {
                        out.push((format!("{p}.moe.router.temperature"), ParamBucket::Router, false, t));
                    }
                    for (ei, e) in $ref_kind!(iter layer.experts).enumerate() {
                        out.push((format!("{p}.moe.expert{ei}.w1"), ParamBucket::Expert, false, $ref_kind!(e.w1)));
                        out.push((format!("{p}.moe.expert{ei}.b1"), ParamBucket::Expert, true, $ref_kind!(e.b1)));
                        out.push((format!("{p}.moe.expert{ei}.w2"), ParamBucket::Expert, false, $ref_kind!(e.w2)));
                        out.push((format!("{p}.moe.expert{ei}.b2"), ParamBucket::Expert, true, $ref_kind!(e.b2)));
                    }
                }
            }
        }
        out.push(("lnf.gain".to_string(), ParamBucket::Norm, false, $ref_kind!(model.lnf_gain)));
        out.push(("lnf.bias".to_string(), ParamBucket::Norm, true, $ref_kind!(model.lnf_bias)));
        out.push(("lm_head".to_string(), ParamBucket::LmHead, false, $ref_kind!(model.lm_head)));
        out
    }};
}

macro_rules! by_ref {
    (iter $e:expr) => { $e.iter() };
    (opt $e:expr) => { $e.as_ref() };
    ($e:expr) => { &$e };
}
macro_rules! by_mut {
    (iter $e:expr) => { $e.iter_mut() };
    (opt $e:expr) => { $e.as_mut() };
    ($e:expr) => { &mut $e };
}

/// Forward output of the language model over one flattened batch.
pub struct LmForward {
    /// `[total_rows x vocab]`
    pub logits: TensorId,
    /// One balance-loss node per MoE layer (empty for dense).
    pub balances: Vec<TensorId>,
    pub logs: Vec<AssignmentLog>,
    /// Soft-counting balance value per MoE layer (monitoring metric).
    pub soft_balances: Vec<f64>,
}

pub struct BlockBinding {
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
    pub ffn: FfnBindingKind,
}

pub enum FfnBindingKind {
    Dense(FfnBinding),
    Smoe(SmoeBinding),
    Mhmoe(MhmoeBinding),
}

pub struct ModelBinding {
    pub tok_embed: TensorId,
    pub pos_embed: TensorId,
    pub blocks: Vec<BlockBinding>,
    pub lnf_gain: TensorId,
    pub lnf_bias: TensorId,
    pub lm_head: TensorId,
}

impl Model {
    pub fn params(&self) -> Vec<ParamEntry<'_>> {
        enumerate_params!(self, by_ref)
    }

    pub fn params_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
        enumerate_params!(self, by_mut)
    }

    pub fn num_params(&self) -> u64 {
        self.params().iter().map(|(_, _, _, t)| t.numel() as u64).sum()
    }

    /// Shape summary for the analytic accounting.
    pub fn shape_summary(&self) -> ModelShape {
        ModelShape {
            d: self.config.d as u64,
            n_experts: self.config.n_experts as u64,
            heads: self.config.heads as u64,
            beta: self.beta,
            moe_layers: self.config.moe_blocks().len() as u64,
            has_head_merge: self.config.variant == Variant::Mhmoe,
            direct_router: self.config.router_mode == RouterMode::Direct,
        }
    }

    pub fn param_records(&self) -> Vec<ParamRecord> {
        self.params()
            .into_iter()
            .map(|(name, bucket, is_bias, t)| ParamRecord {
                name,
                bucket,
                is_bias,
                numel: t.numel() as u64,
            })
            .collect()
    }

    /// Register every parameter on a graph, structurally.
    pub fn bind(&self, g: &mut Graph) -> ModelBinding {
        ModelBinding {
            tok_embed: g.param(&self.tok_embed),
            pos_embed: g.param(&self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockBinding {
                    ln1_gain: g.param(&b.ln1_gain),
                    ln1_bias: g.param(&b.ln1_bias),
                    wq: g.param(&b.wq),
                    bq: g.param(&b.bq),
                    wk: g.param(&b.wk),
                    bk: g.param(&b.bk),
                    wv: g.param(&b.wv),
                    bv: g.param(&b.bv),
                    wo: g.param(&b.wo),
                    bo: g.param(&b.bo),
                    ln2_gain: g.param(&b.ln2_gain),
                    ln2_bias: g.param(&b.ln2_bias),
                    ffn: match &b.ffn {
                        FfnKind::Dense(e) => FfnBindingKind::Dense(e.bind(g)),
                        FfnKind::Smoe(l) => FfnBindingKind::Smoe(l.bind(g)),
                        FfnKind::Mhmoe(l) => FfnBindingKind::Mhmoe(l.bind(g)),
                    },
                })
                .collect(),
            lnf_gain: g.param(&self.lnf_gain),
            lnf_bias: g.param(&self.lnf_bias),
            lm_head: g.param(&self.lm_head),
        }
    }

    /// Flattened parameter ids in the exact order of [`Model::params`].
    fn param_ids(binding: &ModelBinding) -> Vec<TensorId> {
        let mut ids = vec![binding.tok_embed, binding.pos_embed];
        for b in &binding.blocks {
            ids.extend([
                b.ln1_gain, b.ln1_bias, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo,
                b.ln2_gain, b.ln2_bias,
            ]);
            match &b.ffn {
                FfnBindingKind::Dense(f) => ids.extend([f.w1, f.b1, f.w2, f.b2]),
                FfnBindingKind::Smoe(s) => {
                    push_router_ids(&mut ids, &s.router);
                    for f in &s.experts {
                        ids.extend([f.w1, f.b1, f.w2, f.b2]);
                    }
                }
                FfnBindingKind::Mhmoe(m) => {
                    ids.extend([m.w_head, m.b_head, m.w_merge, m.b_merge]);
                    push_router_ids(&mut ids, &m.router);
                    for f in &m.experts {
                        ids.extend([f.w1, f.b1, f.w2, f.b2]);
                    }
                }
            }
        }
        ids.extend([binding.lnf_gain, binding.lnf_bias, binding.lm_head]);
        ids
    }

    /// Forward over a batch of sequences. Sequences are flattened row-wise;
    /// attention is causal within each sequence.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        binding: &ModelBinding,
        seqs: &[&[u16]],
    ) -> Result<LmForward> {
        if seqs.is_empty() {
            return Err(Error::Data("forward: empty batch".into()));
        }
        let cfg = &self.config;
        let mut token_rows: Vec<usize> = Vec::new();
        let mut pos_rows: Vec<usize> = Vec::new();
        let mut bounds: Vec<(usize, usize)> = Vec::new();
        for seq in seqs {
            if seq.is_empty() {
                return Err(Error::Data("forward: empty sequence".into()));
            }
            if seq.len() > cfg.context {
                return Err(Error::Data(format!(
                    "forward: sequence length {} exceeds context {}",
                    seq.len(),
                    cfg.context
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(Error::Data(format!(
                    "forward: token id {bad} out of range for vocab {}",
                    cfg.vocab_size
                )));
            }
            bounds.push((token_rows.len(), seq.len()));
            token_rows.extend(seq.iter().map(|&t| t as usize));
            pos_rows.extend(0..seq.len());
        }

        let tok = g.row_gather(binding.tok_embed, Arc::new(token_rows))?;
        let pos = g.row_gather(binding.pos_embed, Arc::new(pos_rows))?;
        let mut x = g.add(tok, pos)?;

        // Causal masks shared across blocks, one per distinct sequence length.
        let mut masks: HashMap<usize, TensorId> = HashMap::new();
        for &(_, len) in &bounds {
            if !masks.contains_key(&len) {
                let mut values = vec![0.0; len * len];
                for i in 0..len {
                    for j in (i + 1)..len {
                        values[i * len + j] = -1e30;
                    }
                }
                masks.insert(len, g.constant(vec![len, len], values)?);
            }
        }

        let mut balances = Vec::new();
        let mut logs = Vec::new();
        let mut soft_balances = Vec::new();
        let mut moe_ordinal = 0usize;
        for (block, bb) in self.blocks.iter().zip(&binding.blocks) {
            let normed = g.layer_norm_rows(x, bb.ln1_gain, bb.ln1_bias)?;
            let attn = self.attention(g, bb, normed, &bounds, &masks)?;
            x = g.add(x, attn)?;

            let normed = g.layer_norm_rows(x, bb.ln2_gain, bb.ln2_bias)?;
            let ffn_out = match (&block.ffn, &bb.ffn) {
                (FfnKind::Dense(_), FfnBindingKind::Dense(fb)) => {
                    ExpertFfn::forward(g, fb, normed)?
                }
                (FfnKind::Smoe(layer), FfnBindingKind::Smoe(sb)) => {
                    let out = layer.forward(g, sb, normed, moe_ordinal, None)?;
                    soft_balances.push(soft_balance_of(&out));
                    balances.push(out.balance);
                    logs.push(out.log);
                    moe_ordinal += 1;
                    out.output
                }
                (FfnKind::Mhmoe(layer), FfnBindingKind::Mhmoe(mb)) => {
                    let out = layer.forward(g, mb, normed, moe_ordinal, None)?;
                    soft_balances.push(soft_balance_of(&out));
                    balances.push(out.balance);
                    logs.push(out.log);
                    moe_ordinal += 1;
                    out.output
                }
                _ => unreachable!("binding kind always matches layer kind"),
            };
            x = g.add(x, ffn_out)?;
        }
        let x = g.layer_norm_rows(x, binding.lnf_gain, binding.lnf_bias)?;
        let logits = g.matmul(x, binding.lm_head)?;
        Ok(LmForward {
            logits,
            balances,
            logs,
            soft_balances,
        })
    }

    fn attention(
        &self,
        g: &mut Graph,
        bb: &BlockBinding,
        x: TensorId,
        bounds: &[(usize, usize)],
        masks: &HashMap<usize, TensorId>,
    ) -> Result<TensorId> {
        let d = self.config.d;
        let n_heads = self.config.n_attn_heads;
        let dh = d / n_heads;
        let total_rows = g.tensor(x).rows();

        let q = g.matmul(x, bb.wq)?;
        let q = g.add_bias_row(q, bb.bq)?;
        let k = g.matmul(x, bb.wk)?;
        let k = g.add_bias_row(k, bb.bk)?;
        let v = g.matmul(x, bb.wv)?;
        let v = g.add_bias_row(v, bb.bv)?;

        // Row r of the [rows*n_heads x dh] reshape holds head (r % n_heads)
        // of token (r / n_heads).
        let qh = g.reshape(q, vec![total_rows * n_heads, dh])?;
        let kh = g.reshape(k, vec![total_rows * n_heads, dh])?;
        let vh = g.reshape(v, vec![total_rows * n_heads, dh])?;

        let scale = 1.0 / (dh as f64).sqrt();
        let mut gathered: Option<TensorId> = None;
        for &(start, len) in bounds {
            for head in 0..n_heads {
                let rows: Arc<Vec<usize>> =
                    Arc::new((0..len).map(|t| (start + t) * n_heads + head).collect());
                let qs = g.row_gather(qh, rows.clone())?;
                let ks = g.row_gather(kh, rows.clone())?;
                let vs = g.row_gather(vh, rows.clone())?;
                let kt = g.transpose(ks)?;
                let scores = g.matmul(qs, kt)?;
                let scores = g.scale_const(scores, scale)?;
                let scores = g.add(scores, masks[&len])?;
                let probs = g.softmax_rows(scores)?;
                let ctx = g.matmul(probs, vs)?;
                let scattered = g.row_scatter_add(ctx, rows, total_rows * n_heads)?;
                gathered = Some(match gathered {
                    None => scattered,
                    Some(acc) => g.add(acc, scattered)?,
                });
            }
        }
        let merged = g.reshape(gathered.expect("at least one sequence"), vec![total_rows, d])?;
        let out = g.matmul(merged, bb.wo)?;
        g.add_bias_row(out, bb.bo)
    }

    /// Forward one sequence, returning plain values (logits row per input
    /// position), balance-loss values, and assignment logs.
    pub fn forward_lm(&self, tokens: &[u16]) -> Result<(Tensor, Vec<f64>, Vec<AssignmentLog>)> {
        let mut g = Graph::new();
        let binding = self.bind(&mut g);
        let fwd = self.forward_batch(&mut g, &binding, &[tokens])?;
        let balances = fwd.balances.iter().map(|&b| g.values(b)[0]).collect();
        Ok((g.tensor(fwd.logits).clone(), balances, fwd.logs))
    }
}

fn soft_balance_of(out: &crate::layers::MoeOutput) -> f64 {
    crate::routing::balance_loss_value(
        &out.decision.gates,
        &out.decision,
        crate::routing::Counting::Soft,
    )
    .expect("decision is non-empty")
}

fn push_router_ids(ids: &mut Vec<TensorId>, rb: &crate::routing::RouterBinding) {
    ids.push(rb.embeddings);
    if let Some(r) = rb.reduction {
        ids.push(r);
    }
    if let Some(t) = rb.temperature {
        ids.push(t);
    }
}

/// Shape-only parameter enumeration from a config, without materializing
/// weights. Mirrors [`build_model`]; a test pins the two to each other.
pub fn param_manifest(config: &ModelConfig) -> Result<(ModelShape, Vec<ParamRecord>)> {
    config.validate()?;
    let beta = config.resolve_beta()?;
    let d = config.d as u64;
    let mut records = Vec::new();
    let mut push = |name: String, bucket: ParamBucket, is_bias: bool, numel: u64| {
        records.push(ParamRecord { name, bucket, is_bias, numel });
    };
    push("tok_embed".into(), ParamBucket::Embedding, false, config.vocab_size as u64 * d);
    push("pos_embed".into(), ParamBucket::Embedding, false, config.context as u64 * d);
    let moe_blocks = config.moe_blocks();
    for b in 0..config.n_blocks {
        let p = format!("block{b}");
        push(format!("{p}.ln1.gain"), ParamBucket::Norm, false, d);
        push(format!("{p}.ln1.bias"), ParamBucket::Norm, true, d);
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("{p}.attn.{w}"), ParamBucket::Attention, false, d * d);
            push(format!("{p}.attn.b{}", &w[1..]), ParamBucket::Attention, true, d);
        }
        push(format!("{p}.ln2.gain"), ParamBucket::Norm, false, d);
        push(format!("{p}.ln2.bias"), ParamBucket::Norm, true, d);
        if moe_blocks.contains(&b) {
            let (in_dim, inner, router_dim) = match config.variant {
                Variant::Dense => unreachable!("dense configs have no moe blocks"),
                Variant::Smoe => (d, 4 * d, d),
                Variant::Mhmoe => {
                    let sub = d / config.heads as u64;
                    (sub, expert_inner_dim(config.d, beta) as u64, sub)
                }
            };
            if config.variant == Variant::Mhmoe {
                push(format!("{p}.moe.head.w"), ParamBucket::HeadMerge, false, d * d);
                push(format!("{p}.moe.head.b"), ParamBucket::HeadMerge, true, d);
                push(format!("{p}.moe.merge.w"), ParamBucket::HeadMerge, false, d * d);
                push(format!("{p}.moe.merge.b"), ParamBucket::HeadMerge, true, d);
            }
            match config.router_mode {
                RouterMode::Direct => {
                    push(
                        format!("{p}.moe.router.embeddings"),
                        ParamBucket::Router,
                        false,
                        config.n_experts as u64 * router_dim,
                    );
                }
                RouterMode::Reduced => {
                    let r = match config.variant {
                        Variant::Mhmoe => {
                            (crate::layers::REDUCED_ROUTER_DIM / config.heads).max(1) as u64
                        }
                        _ => crate::layers::REDUCED_ROUTER_DIM as u64,
                    };
                    push(
                        format!("{p}.moe.router.embeddings"),
                        ParamBucket::Router,
                        false,
                        config.n_experts as u64 * r,
                    );
                    push(format!("{p}.moe.router.reduction"), ParamBucket::Router, false, router_dim * r);
                    push(format!("{p}.moe.router.temperature"), ParamBucket::Router, false, 1);
                }
            }
            for e in 0..config.n_experts {
                push(format!("{p}.moe.expert{e}.w1"), ParamBucket::Expert, false, in_dim * inner);
                push(format!("{p}.moe.expert{e}.b1"), ParamBucket::Expert, true, inner);
                push(format!("{p}.moe.expert{e}.w2"), ParamBucket::Expert, false, inner * in_dim);
                push(format!("{p}.moe.expert{e}.b2"), ParamBucket::Expert, true, in_dim);
            }
        } else {
            push(format!("{p}.ffn.w1"), ParamBucket::Attention, false, d * 4 * d);
            push(format!("{p}.ffn.b1"), ParamBucket::Attention, true, 4 * d);
            push(format!("{p}.ffn.w2"), ParamBucket::Attention, false, 4 * d * d);
            push(format!("{p}.ffn.b2"), ParamBucket::Attention, true, d);
        }
    }
    push("lnf.gain".into(), ParamBucket::Norm, false, d);
    push("lnf.bias".into(), ParamBucket::Norm, true, d);
    push("lm_head".into(), ParamBucket::LmHead, false, d * config.vocab_size as u64);
    let shape = ModelShape {
        d,
        n_experts: config.n_experts as u64,
        heads: config.heads as u64,
        beta,
        moe_layers: moe_blocks.len() as u64,
        has_head_merge: config.variant == Variant::Mhmoe,
        direct_router: config.router_mode == RouterMode::Direct,
    };
    Ok((shape, records))
}

// ── Training ─────────────────────────────────────────────────────────

/// Adam hyperparameters and the linear warmup/decay schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub clip_norm: f64,
}

impl OptimizerConfig {
    pub fn new(max_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            max_lr,
            warmup_steps,
            total_steps,
            clip_norm: 1.0,
        }
    }

    /// Learning rate applied at 1-based update `step`: linear warmup to
    /// `max_lr`, then linear decay to 0 at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.max_lr * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.max_lr;
        }
        let decay = (self.total_steps.saturating_sub(step)) as f64
            / (self.total_steps - self.warmup_steps) as f64;
        self.max_lr * decay.max(0.0)
    }
}

/// Adam first/second moments per parameter, in [`Model::params`] order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &Model, config: OptimizerConfig) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|(_, _, _, t)| t.numel()).collect();
        OptimizerState {
            config,
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }
}

/// Metrics from one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub task_loss: f64,
    /// Mean hard-counting balance loss over MoE layers (0 for dense).
    pub balance_loss: f64,
    pub total_loss: f64,
    /// Mean soft-counting balance over MoE layers (monitoring only).
    pub soft_balance: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Combine task and balance terms: total = task + alpha * mean(balances).
/// Returns (total, task, mean_balance) node ids; the balance ids are absent
/// for dense models.
pub fn loss_total(
    g: &mut Graph,
    logits: TensorId,
    targets: Arc<Vec<usize>>,
    balances: &[TensorId],
    alpha: f64,
) -> Result<(TensorId, TensorId, Option<TensorId>)> {
    let task = g.cross_entropy_mean(logits, targets)?;
    if balances.is_empty() {
        return Ok((task, task, None));
    }
    let mut acc = balances[0];
    for &b in &balances[1..] {
        acc = g.add(acc, b)?;
    }
    let mean = g.scale_const(acc, 1.0 / balances.len() as f64)?;
    let weighted = g.scale_const(mean, alpha)?;
    let total = g.add(task, weighted)?;
    Ok((total, task, Some(mean)))
}

/// One Adam update on a batch of token windows (each window length >= 2;
/// position t predicts position t+1).
pub fn train_step(model: &mut Model, batch: &[Vec<u16>], opt: &mut OptimizerState) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Data("train_step: empty batch".into()));
    }
    for w in batch {
        if w.len() < 2 {
            return Err(Error::Data("train_step: window shorter than 2 tokens".into()));
        }
    }
    let inputs: Vec<&[u16]> = batch.iter().map(|w| &w[..w.len() - 1]).collect();
    let targets: Vec<usize> = batch
        .iter()
        .flat_map(|w| w[1..].iter().map(|&t| t as usize))
        .collect();

    let mut g = Graph::new();
    let binding = model.bind(&mut g);
    let fwd = model.forward_batch(&mut g, &binding, &inputs)?;
    let (total, task, balance) =
        loss_total(&mut g, fwd.logits, Arc::new(targets), &fwd.balances, model.config.alpha)?;
    let task_loss = g.values(task)[0];
    let balance_loss = balance.map_or(0.0, |b| g.values(b)[0]);
    let total_loss = g.values(total)[0];
    let soft_balance = if fwd.soft_balances.is_empty() {
        0.0
    } else {
        fwd.soft_balances.iter().sum::<f64>() / fwd.soft_balances.len() as f64
    };

    g.backward(total)?;
    let ids = Model::param_ids(&binding);

    if !total_loss.is_finite() {
        let mut first_bad = "<none>".to_string();
        for ((name, _, _, _), &id) in model.params().iter().zip(&ids) {
            if let Some(grad) = g.grad(id) {
                if grad.iter().any(|v| !v.is_finite()) {
                    first_bad = name.clone();
                    break;
                }
            }
        }
        return Err(Error::Numeric(format!(
            "train_step: non-finite loss {total_loss}; first non-finite gradient in parameter '{first_bad}'"
        )));
    }

    // Global grad-norm clipping at clip_norm.
    let mut sq_sum = 0.0;
    for &id in &ids {
        if let Some(grad) = g.grad(id) {
            sq_sum += grad.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let grad_norm = sq_sum.sqrt();
    let clip_scale = if grad_norm > opt.config.clip_norm {
        opt.config.clip_norm / grad_norm
    } else {
        1.0
    };

    opt.step += 1;
    let lr = opt.config.lr_at(opt.step);
    let (b1, b2, eps) = (opt.config.beta1, opt.config.beta2, opt.config.eps);
    let bias1 = 1.0 - b1.powi(opt.step as i32);
    let bias2 = 1.0 - b2.powi(opt.step as i32);

    for (pi, (name, _, _, tensor)) in model.params_mut().into_iter().enumerate() {
        let grad = g.grad(ids[pi]);
        let m = &mut opt.m[pi];
        let v = &mut opt.v[pi];
        for j in 0..tensor.numel() {
            let gj = grad.map_or(0.0, |gr| gr[j]) * clip_scale;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            tensor.values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if name.ends_with("router.temperature") {
            for val in tensor.values.iter_mut() {
                if *val < MIN_TEMPERATURE {
                    *val = MIN_TEMPERATURE;
                }
            }
        }
    }

    Ok(StepMetrics {
        task_loss,
        balance_loss,
        total_loss,
        soft_balance,
        grad_norm,
        lr,
    })
}

/// Evaluation outcome over a token stream.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub perplexity: f64,
    pub cross_entropy: f64,
    /// Predicted token count.
    pub predictions: u64,
    pub logs: Vec<AssignmentLog>,
    /// Mean soft-counting balance over MoE layers and eval batches.
    pub soft_balance: f64,
    /// Per-token assign diversity (multi-head variants only): distinct
    /// experts per token, averaged across layers, one entry per input token.
    pub diversity: Vec<f64>,
}

impl Model {
    /// exp(mean next-token cross-entropy) over consecutive non-overlapping
    /// context windows (each token after the first is predicted exactly once).
    pub fn evaluate(&self, corpus: &[u16], batch_windows: usize) -> Result<EvalOutcome> {
        if corpus.len() < 2 {
            return Err(Error::Data(format!(
                "evaluate: corpus has {} tokens, need at least 2",
                corpus.len()
            )));
        }
        let context = self.config.context;
        let mut windows: Vec<&[u16]> = Vec::new();
        let mut start = 0usize;
        while start + 1 < corpus.len() {
            let end = (start + context + 1).min(corpus.len());
            windows.push(&corpus[start..end]);
            start = end - 1; // the last token of one window is the first input of the next
        }
        let mut total_ce = 0.0;
        let mut total_pred = 0u64;
        let mut logs: Vec<AssignmentLog> = Vec::new();
        let mut soft_sum = 0.0;
        let mut soft_count = 0u64;
        let mut diversity = Vec::new();
        for chunk in windows.chunks(batch_windows.max(1)) {
            let inputs: Vec<&[u16]> = chunk.iter().map(|w| &w[..w.len() - 1]).collect();
            let targets: Vec<usize> = chunk
                .iter()
                .flat_map(|w| w[1..].iter().map(|&t| t as usize))
                .collect();
            let pred = targets.len() as u64;
            let mut g = Graph::new();
            let binding = self.bind(&mut g);
            let fwd = self.forward_batch(&mut g, &binding, &inputs)?;
            let ce = g.cross_entropy_mean(fwd.logits, Arc::new(targets))?;
            total_ce += g.values(ce)[0] * pred as f64;
            total_pred += pred;
            for s in fwd.soft_balances {
                soft_sum += s;
                soft_count += 1;
            }
            if fwd.logs.iter().any(|l| l.heads.is_some()) {
                diversity.extend(crate::telemetry::assign_diversity(&fwd.logs)?);
            }
            logs.extend(fwd.logs);
        }
        let mean_ce = total_ce / total_pred as f64;
        Ok(EvalOutcome {
            perplexity: mean_ce.exp(),
            cross_entropy: mean_ce,
            predictions: total_pred,
            logs,
            soft_balance: if soft_count == 0 { 0.0 } else { soft_sum / soft_count as f64 },
            diversity,
        })
    }
}

/// Perplexity of a model over a corpus (balance loss excluded).
pub fn perplexity(model: &Model, corpus: &[u16]) -> Result<f64> {
    Ok(model.evaluate(corpus, 16)?.perplexity)
}
