//! Finite-difference sweep over every graph operation: analytic gradients
//! must match central differences within relative 1e-5 on random small
//! tensors, across well over 100 cases.

use std::sync::Arc;

use moelab_core::gradcheck::gradcheck;
use moelab_core::graph::{Graph, TensorId};
use moelab_core::rng::SeededRng;
use moelab_core::tensor::Tensor;
use moelab_core::Result;

const TOL: f64 = 1e-5;
const EPS: f64 = 1e-5;

fn random(rng: &mut SeededRng, m: usize, n: usize) -> Tensor {
    let values = (0..m * n).map(|_| rng.uniform(-1.5, 1.5)).collect();
    Tensor::new(vec![m, n], values).unwrap()
}

fn dims(rng: &mut SeededRng) -> (usize, usize) {
    (1 + rng.below(4), 1 + rng.below(5))
}

/// Run one gradcheck case and panic with context on excess error.
fn check<F>(label: &str, case: usize, x: &Tensor, f: F) -> usize
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    let err = gradcheck(f, x, EPS).unwrap_or_else(|e| panic!("{label} case {case}: {e}"));
    assert!(err < TOL, "{label} case {case}: rel error {err}");
    1
}

#[test]
fn every_operation_matches_central_differences() {
    let mut rng = SeededRng::new(20240601);
    let mut cases = 0usize;
    for case in 0..6 {
        let (m, n) = dims(&mut rng);

        // add, wrt each operand
        let other = random(&mut rng, m, n);
        cases += check("add lhs", case, &random(&mut rng, m, n), |g, x| {
            let o = g.leaf(other.clone());
            let s = g.add(x, o)?;
            g.sum_all(s)
        });
        cases += check("add rhs", case, &random(&mut rng, m, n), |g, x| {
            let o = g.leaf(other.clone());
            let s = g.add(o, x)?;
            let sq = g.mul(s, s)?;
            g.mean_all(sq)
        });

        // add_bias_row, wrt matrix and bias
        let bias = random(&mut rng, 1, n);
        cases += check("add_bias_row x", case, &random(&mut rng, m, n), |g, x| {
            let b = g.leaf(bias.clone());
            let s = g.add_bias_row(x, b)?;
            let sq = g.mul(s, s)?;
            g.sum_all(sq)
        });
        let mat = random(&mut rng, m, n);
        cases += check("add_bias_row bias", case, &random(&mut rng, 1, n), |g, x| {
            let a = g.leaf(mat.clone());
            let s = g.add_bias_row(a, x)?;
            let sq = g.mul(s, s)?;
            g.sum_all(sq)
        });

        // mul elementwise
        let mul_other = random(&mut rng, m, n);
        cases += check("mul", case, &random(&mut rng, m, n), |g, x| {
            let o = g.leaf(mul_other.clone());
            let p = g.mul(x, o)?;
            g.sum_all(p)
        });

        // scale_const
        cases += check("scale_const", case, &random(&mut rng, m, n), |g, x| {
            let s = g.scale_const(x, -0.37)?;
            let sq = g.mul(s, s)?;
            g.sum_all(sq)
        });

        // scale_rows, wrt matrix and scale column
        let col = random(&mut rng, m, 1);
        cases += check("scale_rows x", case, &random(&mut rng, m, n), |g, x| {
            let c = g.leaf(col.clone());
            let s = g.scale_rows(x, c)?;
            g.sum_all(s)
        });
        let mat2 = random(&mut rng, m, n);
        cases += check("scale_rows col", case, &random(&mut rng, m, 1), |g, x| {
            let a = g.leaf(mat2.clone());
            let s = g.scale_rows(a, x)?;
            let sq = g.mul(s, s)?;
            g.sum_all(sq)
        });

        // div_by_scalar, wrt numerator and the scalar
        cases += check("div_by_scalar x", case, &random(&mut rng, m, n), |g, x| {
            let s = g.leaf(Tensor::scalar(0.8));
            let d = g.div_by_scalar(x, s)?;
            g.sum_all(d)
        });
        let numer = random(&mut rng, m, n);
        cases += check("div_by_scalar s", case, &Tensor::scalar(1.3), |g, x| {
            let a = g.leaf(numer.clone());
            let d = g.div_by_scalar(a, x)?;
            let sq = g.mul(d, d)?;
            g.sum_all(sq)
        });

        // matmul, wrt both operands
        let k = 1 + rng.below(4);
        let rhs = random(&mut rng, k, n);
        cases += check("matmul lhs", case, &random(&mut rng, m, k), |g, x| {
            let b = g.leaf(rhs.clone());
            let c = g.matmul(x, b)?;
            let sq = g.mul(c, c)?;
            g.sum_all(sq)
        });
        let lhs = random(&mut rng, m, k);
        cases += check("matmul rhs", case, &random(&mut rng, k, n), |g, x| {
            let a = g.leaf(lhs.clone());
            let c = g.matmul(a, x)?;
            let sq = g.mul(c, c)?;
            g.sum_all(sq)
        });

        // transpose
        cases += check("transpose", case, &random(&mut rng, m, n), |g, x| {
            let t = g.transpose(x)?;
            let sq = g.mul(t, t)?;
            g.mean_all(sq)
        });

        // reshape
        cases += check("reshape", case, &random(&mut rng, m, n), |g, x| {
            let r = g.reshape(x, vec![n * m, 1])?;
            let sq = g.mul(r, r)?;
            g.sum_all(sq)
        });

        // softmax_rows
        cases += check("softmax_rows", case, &random(&mut rng, m, n), |g, x| {
            let s = g.softmax_rows(x)?;
            let sq = g.mul(s, s)?;
            g.sum_all(sq)
        });

        // gelu
        cases += check("gelu", case, &random(&mut rng, m, n), |g, x| {
            let a = g.gelu(x)?;
            g.sum_all(a)
        });

        // layer_norm_rows, wrt x / gain / bias (columns >= 2 so variance moves)
        let ln_cols = 2 + rng.below(4);
        let gain = random(&mut rng, 1, ln_cols);
        let lbias = random(&mut rng, 1, ln_cols);
        cases += check("layer_norm x", case, &random(&mut rng, m, ln_cols), |g, x| {
            let gn = g.leaf(gain.clone());
            let bs = g.leaf(lbias.clone());
            let o = g.layer_norm_rows(x, gn, bs)?;
            let sq = g.mul(o, o)?;
            g.sum_all(sq)
        });
        let ln_x = random(&mut rng, m, ln_cols);
        cases += check("layer_norm gain", case, &random(&mut rng, 1, ln_cols), |g, x| {
            let xv = g.leaf(ln_x.clone());
            let bs = g.leaf(lbias.clone());
            let o = g.layer_norm_rows(xv, x, bs)?;
            let sq = g.mul(o, o)?;
            g.sum_all(sq)
        });
        cases += check("layer_norm bias", case, &random(&mut rng, 1, ln_cols), |g, x| {
            let xv = g.leaf(ln_x.clone());
            let gn = g.leaf(gain.clone());
            let o = g.layer_norm_rows(xv, gn, x)?;
            let sq = g.mul(o, o)?;
            g.sum_all(sq)
        });

        // l2_normalize_rows
        cases += check("l2_normalize", case, &random(&mut rng, m, n), |g, x| {
            let o = g.l2_normalize_rows(x)?;
            let sq = g.mul(o, o)?;
            g.sum_all(sq)
        });

        // row_gather with duplicate indices (fan-out accumulation)
        let idx: Arc<Vec<usize>> = Arc::new((0..m + 2).map(|i| i % m).collect());
        cases += check("row_gather", case, &random(&mut rng, m, n), |g, x| {
            let gth = g.row_gather(x, idx.clone())?;
            let sq = g.mul(gth, gth)?;
            g.sum_all(sq)
        });

        // row_scatter_add with colliding targets
        let sidx: Arc<Vec<usize>> = Arc::new((0..m).map(|i| i / 2).collect());
        cases += check("row_scatter_add", case, &random(&mut rng, m, n), |g, x| {
            let sc = g.row_scatter_add(x, sidx.clone(), m)?;
            let sq = g.mul(sc, sc)?;
            g.sum_all(sq)
        });

        // reductions
        cases += check("sum_all", case, &random(&mut rng, m, n), |g, x| g.sum_all(x));
        cases += check("mean_all", case, &random(&mut rng, m, n), |g, x| {
            let sq = g.mul(x, x)?;
            g.mean_all(sq)
        });

        // cross_entropy_mean
        let classes = 3 + rng.below(4);
        let targets: Arc<Vec<usize>> = Arc::new((0..m).map(|_| rng.below(classes)).collect());
        cases += check("cross_entropy", case, &random(&mut rng, m, classes), |g, x| {
            g.cross_entropy_mean(x, targets.clone())
        });
    }
    assert!(cases >= 100, "only {cases} gradcheck cases ran");
}

/// Composite functions checked at tighter tolerances than the per-op sweep.
#[test]
fn composite_functions_pass_their_stated_tolerances() {
    let mut rng = SeededRng::new(7);

    // row softmax then sum of squares on a random 3x5: < 1e-6
    let x = random(&mut rng, 3, 5);
    let err = gradcheck(
        |g, x| {
            let s = g.softmax_rows(x)?;
            let sq = g.mul(s, s)?;
            g.sum_all(sq)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "softmax composite: {err}");

    // matmul + softmax + cross-entropy on random 4x6: < 1e-6
    let w = random(&mut rng, 6, 6);
    let targets = Arc::new(vec![2usize, 0, 5, 3]);
    let x = random(&mut rng, 4, 6);
    let err = gradcheck(
        |g, x| {
            let wid = g.leaf(w.clone());
            let h = g.matmul(x, wid)?;
            let s = g.softmax_rows(h)?;
            g.cross_entropy_mean(s, targets.clone())
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "lm composite: {err}");
}
