//! Expert routing: gate computation, top-k selection, dispatch, and the
//! load-balancing auxiliary loss.
//!
//! Two router flavors are supported. `Direct` takes softmax over raw
//! token-embedding dot products. `Reduced` first projects the input to a
//! small routing space, then uses cosine similarity against L2-normalized
//! expert embeddings divided by a learnable temperature.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::rng::{xavier_uniform, SeededRng};
use crate::tensor::Tensor;

/// Lower clamp for the learnable gating temperature.
pub const MIN_TEMPERATURE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterMode {
    /// softmax(x . e_p)
    Direct,
    /// softmax(cos(normalize(x W_r), normalize(e_p)) / tau)
    Reduced,
}

/// Learnable routing parameters over `num_experts` experts.
#[derive(Debug, Clone)]
pub struct Router {
    pub num_experts: usize,
    pub input_dim: usize,
    pub mode: RouterMode,
    /// `[num_experts x embed_dim]`; embed_dim is `input_dim` in direct mode
    /// and the reduction width in reduced mode.
    pub expert_embeddings: Tensor,
    /// `[input_dim x r]`, reduced mode only.
    pub reduction: Option<Tensor>,
    /// `[1 x 1]` learnable temperature, reduced mode only. Kept above
    /// [`MIN_TEMPERATURE`] by the optimizer-side clamp.
    pub temperature: Option<Tensor>,
}

/// Graph handles for a router's parameters within one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct RouterBinding {
    pub embeddings: TensorId,
    pub reduction: Option<TensorId>,
    pub temperature: Option<TensorId>,
}

impl Router {
    pub fn direct(num_experts: usize, input_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        if num_experts == 0 || input_dim == 0 {
            return Err(Error::Contract(
                "router: num_experts and input_dim must be positive".into(),
            ));
        }
        Ok(Router {
            num_experts,
            input_dim,
            mode: RouterMode::Direct,
            expert_embeddings: xavier_uniform(rng, num_experts, input_dim, 1.0),
            reduction: None,
            temperature: None,
        })
    }

    pub fn reduced(
        num_experts: usize,
        input_dim: usize,
        reduction_dim: usize,
        tau0: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if num_experts == 0 || input_dim == 0 || reduction_dim == 0 {
            return Err(Error::Contract(
                "router: num_experts, input_dim and reduction_dim must be positive".into(),
            ));
        }
        if tau0 <= 0.0 {
            return Err(Error::Contract(format!(
                "router: initial temperature must be positive, got {tau0}"
            )));
        }
        Ok(Router {
            num_experts,
            input_dim,
            mode: RouterMode::Reduced,
            expert_embeddings: xavier_uniform(rng, num_experts, reduction_dim, 1.0),
            reduction: Some(xavier_uniform(rng, input_dim, reduction_dim, 1.0)),
            temperature: Some(Tensor::scalar(tau0)),
        })
    }

    /// Register this router's parameters on a graph.
    pub fn bind(&self, g: &mut Graph) -> RouterBinding {
        RouterBinding {
            embeddings: g.param(&self.expert_embeddings),
            reduction: self.reduction.as_ref().map(|t| g.param(t)),
            temperature: self.temperature.as_ref().map(|t| g.param(t)),
        }
    }

    /// Full gate distribution `[T x num_experts]` for a batch of rows.
    pub fn gate_scores(
        &self,
        g: &mut Graph,
        binding: &RouterBinding,
        x: TensorId,
    ) -> Result<TensorId> {
        let (_, cols) = g.tensor(x).expect_matrix("gate_scores")?;
        if cols != self.input_dim {
            return Err(Error::Dimension(format!(
                "gate_scores: input width {cols} does not match router input_dim {}",
                self.input_dim
            )));
        }
        let logits = match self.mode {
            RouterMode::Direct => {
                let et = g.transpose(binding.embeddings)?;
                g.matmul(x, et)?
            }
            RouterMode::Reduced => {
                let reduction = binding
                    .reduction
                    .ok_or_else(|| Error::Contract("reduced router missing reduction".into()))?;
                let tau = binding
                    .temperature
                    .ok_or_else(|| Error::Contract("reduced router missing temperature".into()))?;
                let projected = g.matmul(x, reduction)?;
                let xn = g.l2_normalize_rows(projected)?;
                let en = g.l2_normalize_rows(binding.embeddings)?;
                let ent = g.transpose(en)?;
                let cosine = g.matmul(xn, ent)?;
                g.div_by_scalar(cosine, tau)?
            }
        };
        g.softmax_rows(logits)
    }
}

/// Per-row top-k routing outcome.
#[derive(Debug, Clone)]
pub struct RoutingDecision {
    /// Full softmax distribution, `[T x N]`.
    pub gates: Tensor,
    /// Per row: k distinct expert ids, largest gate first, ties broken by
    /// lowest expert index.
    pub topk_indices: Vec<Vec<usize>>,
    /// Gate values at `topk_indices`, unrenormalized.
    pub topk_gates: Vec<Vec<f64>>,
    pub k: usize,
}

/// Select the k largest gates per row. Pure function of the gate values.
pub fn topk_select(gates: &Tensor, k: usize) -> Result<RoutingDecision> {
    let (rows, n) = gates.expect_matrix("topk_select")?;
    if k == 0 || k > n {
        return Err(Error::Contract(format!(
            "topk_select: k={k} out of range for {n} experts"
        )));
    }
    let mut topk_indices = Vec::with_capacity(rows);
    let mut topk_gates = Vec::with_capacity(rows);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..rows {
        let row = gates.row(i);
        order.clear();
        order.extend(0..n);
        // descending by gate, ascending index on ties
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let chosen = &order[..k];
        topk_indices.push(chosen.to_vec());
        topk_gates.push(chosen.iter().map(|&p| row[p]).collect());
    }
    Ok(RoutingDecision {
        gates: gates.clone(),
        topk_indices,
        topk_gates,
        k,
    })
}

/// Index plan mapping routed rows to per-expert batches and back.
#[derive(Debug, Clone)]
pub struct Dispatch {
    pub num_experts: usize,
    pub num_rows: usize,
    /// Row indices routed to each expert, ascending (stable by row, then slot).
    pub rows_per_expert: Vec<Arc<Vec<usize>>>,
    /// Matching flat indices `row * N + expert` into the gate matrix, used to
    /// pick each event's gate weight.
    pub gate_index_per_expert: Vec<Arc<Vec<usize>>>,
    /// Events dropped by the capacity limit (residual passthrough only).
    pub overflowed: usize,
}

/// Build the dispatch plan for a routing decision. With `capacity` set, each
/// expert accepts at most `ceil(capacity * T * k / N)` events (in row order);
/// the rest overflow and keep only their residual path.
pub fn dispatch(decision: &RoutingDecision, capacity: Option<f64>) -> Result<Dispatch> {
    let rows = decision.topk_indices.len();
    let n = decision.gates.cols();
    if rows == 0 {
        return Err(Error::Contract("dispatch: empty decision".into()));
    }
    let cap = match capacity {
        Some(c) => {
            if c <= 0.0 {
                return Err(Error::Contract(format!(
                    "dispatch: capacity factor must be positive, got {c}"
                )));
            }
            let events = rows * decision.k;
            (c * events as f64 / n as f64).ceil() as usize
        }
        None => usize::MAX,
    };
    let mut rows_per_expert = vec![Vec::new(); n];
    let mut gate_index_per_expert = vec![Vec::new(); n];
    let mut overflowed = 0usize;
    for (row, experts) in decision.topk_indices.iter().enumerate() {
        for &p in experts {
            if rows_per_expert[p].len() < cap {
                rows_per_expert[p].push(row);
                gate_index_per_expert[p].push(row * n + p);
            } else {
                overflowed += 1;
            }
        }
    }
    Ok(Dispatch {
        num_experts: n,
        num_rows: rows,
        rows_per_expert: rows_per_expert.into_iter().map(Arc::new).collect(),
        gate_index_per_expert: gate_index_per_expert.into_iter().map(Arc::new).collect(),
        overflowed,
    })
}

impl Dispatch {
    /// Materialize per-expert input batches (None for experts that received
    /// no rows). Scattering the batches back by the same indices restores
    /// the original rows.
    pub fn gather_batches(&self, x: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (_, cols) = x.expect_matrix("gather_batches")?;
        let mut out = Vec::with_capacity(self.num_experts);
        for rows in &self.rows_per_expert {
            if rows.is_empty() {
                out.push(None);
                continue;
            }
            let mut values = Vec::with_capacity(rows.len() * cols);
            for &r in rows.iter() {
                values.extend_from_slice(x.row(r));
            }
            out.push(Some(Tensor::new(vec![rows.len(), cols], values)?));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Counting {
    /// t_p = (#events routed to p) / (T * k)
    Hard,
    /// t_p = mean over rows of gates[., p]
    Soft,
}

/// Load-balancing loss on the graph: N * sum_p t_p * mean_row(gates[., p]).
/// In hard mode t_p is a constant fraction of routed events; in soft mode it
/// equals the mean gate, making the loss N * sum_p mean_p^2.
pub fn balance_loss(
    g: &mut Graph,
    gates: TensorId,
    decision: &RoutingDecision,
    counting: Counting,
) -> Result<TensorId> {
    let (rows, n) = g.tensor(gates).expect_matrix("balance_loss")?;
    if decision.topk_indices.is_empty() || rows == 0 {
        return Err(Error::Contract("balance_loss: empty batch".into()));
    }
    let ones = g.constant(vec![1, rows], vec![1.0; rows])?;
    let sums = g.matmul(ones, gates)?;
    let mean_gates = g.scale_const(sums, 1.0 / rows as f64)?;
    match counting {
        Counting::Hard => {
            let fractions = hard_fractions(decision, n);
            let t = g.constant(vec![n, 1], fractions)?;
            let dotted = g.matmul(mean_gates, t)?;
            g.scale_const(dotted, n as f64)
        }
        Counting::Soft => {
            let sq = g.mul(mean_gates, mean_gates)?;
            let sum = g.sum_all(sq)?;
            g.scale_const(sum, n as f64)
        }
    }
}

/// Plain-arithmetic evaluation of the balance loss (for metrics and as an
/// independent route in tests).
pub fn balance_loss_value(
    gates: &Tensor,
    decision: &RoutingDecision,
    counting: Counting,
) -> Result<f64> {
    let (rows, n) = gates.expect_matrix("balance_loss_value")?;
    if decision.topk_indices.is_empty() || rows == 0 {
        return Err(Error::Contract("balance_loss: empty batch".into()));
    }
    let mut mean_gates = vec![0.0; n];
    for i in 0..rows {
        for (m, v) in mean_gates.iter_mut().zip(gates.row(i)) {
            *m += v;
        }
    }
    for m in mean_gates.iter_mut() {
        *m /= rows as f64;
    }
    let t = match counting {
        Counting::Hard => hard_fractions(decision, n),
        Counting::Soft => mean_gates.clone(),
    };
    Ok(n as f64 * t.iter().zip(&mean_gates).map(|(a, b)| a * b).sum::<f64>())
}

fn hard_fractions(decision: &RoutingDecision, n: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n];
    for experts in &decision.topk_indices {
        for &p in experts {
            counts[p] += 1;
        }
    }
    let total = decision.topk_indices.len() * decision.k;
    counts
        .into_iter()
        .map(|c| c as f64 / total as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;

    fn direct_router_with_embeddings(rows: &[Vec<f64>]) -> Router {
        let e = Tensor::from_rows(rows).unwrap();
        Router {
            num_experts: e.rows(),
            input_dim: e.cols(),
            mode: RouterMode::Direct,
            expert_embeddings: e,
            reduction: None,
            temperature: None,
        }
    }

    fn gates_for(router: &Router, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let binding = router.bind(&mut g);
        let gid = router.gate_scores(&mut g, &binding, xid).unwrap();
        g.tensor(gid).clone()
    }

    #[test]
    fn zero_embeddings_give_uniform_gates() {
        let router = direct_router_with_embeddings(&vec![vec![0.0; 3]; 4]);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 3.0, 3.0]]).unwrap();
        let gates = gates_for(&router, &x);
        for i in 0..2 {
            assert!(max_abs_diff(gates.row(i), &[0.25; 4]) < 1e-15);
        }
    }

    #[test]
    fn direct_gates_hand_evaluated() {
        // e_0 = [1,0], e_1 = [0,1], x = [1,0]: logits (1, 0),
        // gates (e/(e+1), 1/(e+1)).
        let router = direct_router_with_embeddings(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let gates = gates_for(&router, &x);
        let e = std::f64::consts::E;
        let expected = [e / (e + 1.0), 1.0 / (e + 1.0)];
        assert!(max_abs_diff(gates.row(0), &expected) < 1e-12);
        assert!((gates.row(0)[0] - 0.7311).abs() < 1e-4);
        assert!((gates.row(0)[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn reduced_mode_saturates_with_small_temperature() {
        // Identity reduction; x parallel to e_0 after projection. As tau
        // shrinks, gate_0 approaches 1.
        let mut router = Router {
            num_experts: 2,
            input_dim: 2,
            mode: RouterMode::Reduced,
            expert_embeddings: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            reduction: Some(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()),
            temperature: Some(Tensor::scalar(0.01)),
        };
        let x = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let gates = gates_for(&router, &x);
        assert!(gates.row(0)[0] > 0.999999, "gate_0 = {}", gates.row(0)[0]);

        // sanity: at high temperature the gates move toward uniform
        router.temperature = Some(Tensor::scalar(100.0));
        let gates = gates_for(&router, &x);
        assert!((gates.row(0)[0] - 0.5).abs() < 0.01);
    }

    #[test]
    fn gate_rows_sum_to_one() {
        let mut rng = SeededRng::new(3);
        let router = Router::direct(8, 16, &mut rng).unwrap();
        let x = xavier_uniform(&mut rng, 10, 16, 1.0);
        let gates = gates_for(&router, &x);
        for i in 0..10 {
            let s: f64 = gates.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn input_width_mismatch_is_dimension_error() {
        let mut rng = SeededRng::new(3);
        let router = Router::direct(4, 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 5]).unwrap());
        let binding = router.bind(&mut g);
        assert!(matches!(
            router.gate_scores(&mut g, &binding, x),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn topk_breaks_ties_toward_lower_index() {
        let gates = Tensor::from_rows(&[vec![0.5, 0.25, 0.25]]).unwrap();
        let d = topk_select(&gates, 2).unwrap();
        assert_eq!(d.topk_indices[0], vec![0, 1]);
        assert_eq!(d.topk_gates[0], vec![0.5, 0.25]);
    }

    #[test]
    fn topk_with_k_equal_n_returns_full_row() {
        let gates = Tensor::from_rows(&[vec![0.2, 0.5, 0.3]]).unwrap();
        let d = topk_select(&gates, 3).unwrap();
        assert_eq!(d.topk_indices[0], vec![1, 2, 0]);
        assert_eq!(d.topk_gates[0], vec![0.5, 0.3, 0.2]);
    }

    #[test]
    fn topk_uniform_row_selects_index_zero() {
        let gates = Tensor::from_rows(&[vec![0.25; 4]]).unwrap();
        let d = topk_select(&gates, 1).unwrap();
        assert_eq!(d.topk_indices[0], vec![0]);
    }

    #[test]
    fn topk_k_out_of_range() {
        let gates = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(matches!(topk_select(&gates, 0), Err(Error::Contract(_))));
        assert!(matches!(topk_select(&gates, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn dispatch_all_to_one_expert() {
        let gates = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2], vec![0.7, 0.3]]).unwrap();
        let decision = topk_select(&gates, 1).unwrap();
        let plan = dispatch(&decision, None).unwrap();
        assert_eq!(plan.rows_per_expert[0].as_slice(), &[0, 1, 2]);
        assert!(plan.rows_per_expert[1].is_empty());
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let batches = plan.gather_batches(&x).unwrap();
        assert_eq!(batches[0].as_ref().unwrap().values, x.values);
        assert!(batches[1].is_none());
    }

    #[test]
    fn dispatch_k_equals_n_fills_every_expert() {
        let gates = Tensor::from_rows(&vec![vec![0.6, 0.4]; 3]).unwrap();
        let decision = topk_select(&gates, 2).unwrap();
        let plan = dispatch(&decision, None).unwrap();
        for p in 0..2 {
            assert_eq!(plan.rows_per_expert[p].len(), 3);
        }
    }

    #[test]
    fn dispatch_inverse_is_identity_permutation() {
        let mut rng = SeededRng::new(17);
        let logits = xavier_uniform(&mut rng, 12, 5, 3.0);
        let mut g = Graph::new();
        let lid = g.leaf(logits);
        let gid = g.softmax_rows(lid).unwrap();
        let decision = topk_select(g.tensor(gid), 1).unwrap();
        let plan = dispatch(&decision, None).unwrap();
        // With k=1 every row lands in exactly one batch; scattering the
        // gathered batches back must reproduce the input.
        let x = xavier_uniform(&mut rng, 12, 4, 1.0);
        let xid = g.leaf(x.clone());
        let mut scattered = None;
        for p in 0..plan.num_experts {
            let rows = plan.rows_per_expert[p].clone();
            if rows.is_empty() {
                continue;
            }
            let batch = g.row_gather(xid, rows.clone()).unwrap();
            let back = g.row_scatter_add(batch, rows, 12).unwrap();
            scattered = Some(match scattered {
                None => back,
                Some(acc) => g.add(acc, back).unwrap(),
            });
        }
        assert_eq!(g.values(scattered.unwrap()), &x.values[..]);
    }

    #[test]
    fn capacity_drops_overflow_in_row_order() {
        let gates = Tensor::from_rows(&vec![vec![1.0, 0.0]; 4]).unwrap();
        let decision = topk_select(&gates, 1).unwrap();
        // cap = ceil(0.5 * 4 * 1 / 2) = 1
        let plan = dispatch(&decision, Some(0.5)).unwrap();
        assert_eq!(plan.rows_per_expert[0].as_slice(), &[0]);
        assert_eq!(plan.overflowed, 3);
    }

    #[test]
    fn balance_uniform_is_one_in_both_modes() {
        let n = 6;
        let gates = Tensor::from_rows(&vec![vec![1.0 / n as f64; n]; 9]).unwrap();
        let decision = topk_select(&gates, 2).unwrap();
        for counting in [Counting::Hard, Counting::Soft] {
            let v = balance_loss_value(&gates, &decision, counting).unwrap();
            assert!((v - 1.0).abs() < 1e-12, "{counting:?}: {v}");
        }
    }

    #[test]
    fn balance_all_mass_on_one_expert_is_n() {
        let n = 5;
        let mut row = vec![0.0; n];
        row[0] = 1.0;
        let gates = Tensor::from_rows(&vec![row; 7]).unwrap();
        let decision = topk_select(&gates, 1).unwrap();
        let v = balance_loss_value(&gates, &decision, Counting::Hard).unwrap();
        assert!((v - n as f64).abs() < 1e-12);
    }

    #[test]
    fn soft_mode_matches_sum_of_squares_identity_and_graph_route() {
        let mut rng = SeededRng::new(23);
        for _ in 0..20 {
            let logits = xavier_uniform(&mut rng, 11, 4, 2.0);
            let mut g = Graph::new();
            let lid = g.leaf(logits);
            let gid = g.softmax_rows(lid).unwrap();
            let gates = g.tensor(gid).clone();
            let decision = topk_select(&gates, 2).unwrap();

            let v = balance_loss_value(&gates, &decision, Counting::Soft).unwrap();
            // identity: N * sum_p (mean gate_p)^2
            let n = gates.cols();
            let mut means = vec![0.0; n];
            for i in 0..gates.rows() {
                for (m, x) in means.iter_mut().zip(gates.row(i)) {
                    *m += x / gates.rows() as f64;
                }
            }
            let direct: f64 = n as f64 * means.iter().map(|m| m * m).sum::<f64>();
            assert!((v - direct).abs() < 1e-12);
            assert!(v >= 1.0 - 1e-12, "soft balance {v} < 1");

            let bid = balance_loss(&mut g, gid, &decision, Counting::Soft).unwrap();
            assert!((g.values(bid)[0] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_shift_leaves_everything_unchanged() {
        let mut rng = SeededRng::new(31);
        let logits = xavier_uniform(&mut rng, 6, 5, 1.0);
        let shifted = {
            let mut t = logits.clone();
            for i in 0..6 {
                for j in 0..5 {
                    t.values[i * 5 + j] += 3.7 * (i as f64 + 1.0);
                }
            }
            t
        };
        let run = |l: &Tensor| {
            let mut g = Graph::new();
            let lid = g.leaf(l.clone());
            let gid = g.softmax_rows(lid).unwrap();
            let gates = g.tensor(gid).clone();
            let d = topk_select(&gates, 2).unwrap();
            let b = balance_loss_value(&gates, &d, Counting::Hard).unwrap();
            (gates, d.topk_indices, b)
        };
        let (g1, i1, b1) = run(&logits);
        let (g2, i2, b2) = run(&shifted);
        assert_eq!(i1, i2);
        assert!(max_abs_diff(&g1.values, &g2.values) < 1e-12);
        assert!((b1 - b2).abs() < 1e-12);
    }

    #[test]
    fn topk_is_permutation_covariant() {
        let mut rng = SeededRng::new(41);
        let gates_raw = xavier_uniform(&mut rng, 8, 6, 1.0);
        let mut g = Graph::new();
        let lid = g.leaf(gates_raw);
        let gid = g.softmax_rows(lid).unwrap();
        let gates = g.tensor(gid).clone();
        // relabel experts by rotation p -> (p + 2) % 6
        let n = 6;
        let perm: Vec<usize> = (0..n).map(|p| (p + 2) % n).collect();
        let mut relabeled = gates.clone();
        for i in 0..gates.rows() {
            for p in 0..n {
                relabeled.values[i * n + perm[p]] = gates.at(i, p);
            }
        }
        let d1 = topk_select(&gates, 2).unwrap();
        let d2 = topk_select(&relabeled, 2).unwrap();
        for i in 0..gates.rows() {
            let mapped: Vec<usize> = d1.topk_indices[i].iter().map(|&p| perm[p]).collect();
            let mut sorted_mapped = mapped.clone();
            sorted_mapped.sort_unstable();
            let mut sorted_new = d2.topk_indices[i].clone();
            sorted_new.sort_unstable();
            assert_eq!(sorted_mapped, sorted_new);
        }
    }
}
