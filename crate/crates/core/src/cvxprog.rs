//! The convex training program: squared loss on one-hot targets plus a group
//! norm penalty over the pattern blocks.
//!
//! *Relaxed* mode drops the cone constraints and optimizes one difference block
//! `S_p = V_p - W_p` per pattern (a group lasso). *Exact* mode keeps `(V, W)`
//! as `2P` blocks with every column constrained to its pattern cone.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CldError, Result};
use crate::gates::{cone_violation, project_cone, ConeSpec};
use crate::linops::{BlockWeights, GatedOperator};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// Sum of per-class column norms.
    #[default]
    L21,
    /// Frobenius norm per block.
    Frobenius,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Relaxed,
    Exact,
}

impl std::fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PenaltyKind::L21 => "l21",
            PenaltyKind::Frobenius => "frobenius",
        })
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Relaxed => "relaxed",
            Mode::Exact => "exact",
        })
    }
}

#[derive(Clone, Debug)]
pub struct ConvexProblem {
    pub op: GatedOperator,
    pub y: Array2<f64>,
    pub beta: f64,
    pub penalty: PenaltyKind,
    pub mode: Mode,
    cone_masks: Vec<Vec<bool>>,
}

impl ConvexProblem {
    /// The operator must be split exactly when `mode` is exact.
    pub fn new(op: GatedOperator, y: Array2<f64>, beta: f64, penalty: PenaltyKind, mode: Mode) -> Result<Self> {
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(CldError::Parameter(format!("beta must be finite and >= 0, got {beta}")));
        }
        if y.dim() != (op.n(), op.k()) {
            return Err(CldError::Shape(format!(
                "targets {:?}, operator expects ({}, {})",
                y.dim(),
                op.n(),
                op.k()
            )));
        }
        if op.split() != (mode == Mode::Exact) {
            return Err(CldError::Parameter(format!(
                "{mode} mode requires a {} operator",
                if mode == Mode::Exact { "split" } else { "non-split" }
            )));
        }
        let masks = op.masks();
        let cone_masks = (0..op.patterns())
            .map(|p| masks.column(p).iter().map(|&m| m != 0.0).collect())
            .collect();
        Ok(Self {
            op,
            y,
            beta,
            penalty,
            mode,
            cone_masks,
        })
    }

    pub fn zeros(&self) -> BlockWeights {
        self.op.zeros()
    }

    /// Cone for block `b` (pattern `b mod P`).
    pub fn cone(&self, b: usize) -> ConeSpec<'_> {
        let p = b % self.op.patterns();
        ConeSpec::from_mask(&self.cone_masks[p], self.op.x())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub fit: f64,
    pub penalty: f64,
    pub cone_violation: f64,
}

/// `½ ‖pred - Y‖_F²`
pub fn loss(pred: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> f64 {
    0.5 * Zip::from(pred).and(y).fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t))
}

/// Gradient of [`loss`] with respect to `pred`.
pub fn loss_grad(pred: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array2<f64> {
    &pred - &y
}

fn group_norms(block: ArrayView2<'_, f64>, kind: PenaltyKind) -> f64 {
    match kind {
        PenaltyKind::L21 => block
            .axis_iter(Axis(1))
            .map(|c| c.dot(&c).sqrt())
            .sum(),
        PenaltyKind::Frobenius => block.iter().map(|t| t * t).sum::<f64>().sqrt(),
    }
}

/// Sum over blocks of the per-block group norm.
pub fn penalty(s: &BlockWeights, kind: PenaltyKind) -> f64 {
    (0..s.n_blocks()).map(|b| group_norms(s.block(b), kind)).sum()
}

fn shrink(norm: f64, t: f64) -> f64 {
    if norm <= t || norm == 0.0 {
        0.0
    } else {
        1.0 - t / norm
    }
}

/// Proximal operator of `t · penalty`: block soft-thresholding per group
/// (a column for l21, a whole block for Frobenius).
pub fn group_prox(z: &BlockWeights, t: f64, kind: PenaltyKind) -> BlockWeights {
    assert!(t >= 0.0, "prox threshold must be >= 0");
    let mut out = z.clone();
    if t == 0.0 {
        return out;
    }
    out.w.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut block| match kind {
        PenaltyKind::L21 => {
            for mut col in block.axis_iter_mut(Axis(1)) {
                let f = shrink(col.dot(&col).sqrt(), t);
                col *= f;
            }
        }
        PenaltyKind::Frobenius => {
            let f = shrink(block.iter().map(|v| v * v).sum::<f64>().sqrt(), t);
            block *= f;
        }
    });
    out
}

/// Largest cone violation over every column of every block.
pub fn blocks_cone_violation(prob: &ConvexProblem, s: &BlockWeights) -> f64 {
    (0..s.n_blocks())
        .map(|b| {
            let cone = prob.cone(b);
            s.block(b)
                .axis_iter(Axis(1))
                .map(|col| cone_violation(&cone, col))
                .fold(0.0f64, f64::max)
        })
        .fold(0.0f64, f64::max)
}

/// Projects every column of every block onto its pattern cone.
/// Returns the projected weights and whether every projection converged.
pub fn project_blocks(prob: &ConvexProblem, z: &BlockWeights, tol: f64, max_iters: usize) -> Result<(BlockWeights, bool)> {
    let (nb, d, k) = z.w.dim();
    let cols: Vec<(usize, usize)> = (0..nb).flat_map(|b| (0..k).map(move |c| (b, c))).collect();
    let projected: Vec<_> = cols
        .par_iter()
        .map(|&(b, c)| {
            let col = z.w.slice(ndarray::s![b, .., c]);
            project_cone(&prob.cone(b), col, tol, max_iters)
        })
        .collect::<Result<_>>()?;
    let mut out = BlockWeights::zeros(nb, d, k);
    let mut all = true;
    for (&(b, c), proj) in cols.iter().zip(projected) {
        all &= proj.converged;
        out.w.slice_mut(ndarray::s![b, .., c]).assign(&proj.point);
    }
    Ok((out, all))
}

pub fn objective(prob: &ConvexProblem, vars: &BlockWeights) -> Result<ObjectiveValue> {
    let pred = prob.op.apply_f(vars)?;
    let fit = loss(pred.view(), prob.y.view());
    let pen = penalty(vars, prob.penalty);
    let viol = match prob.mode {
        Mode::Relaxed => 0.0,
        Mode::Exact => blocks_cone_violation(prob, vars),
    };
    Ok(ObjectiveValue {
        total: fit + prob.beta * pen,
        fit,
        penalty: pen,
        cone_violation: viol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{sample_gates, stream_rng};
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn rand3(shape: (usize, usize, usize), seed: u64) -> BlockWeights {
        let mut rng = stream_rng(seed, 1);
        BlockWeights::from_array(Array3::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng)))
    }

    fn small_problem(seed: u64, mode: Mode, beta: f64) -> ConvexProblem {
        let mut rng = stream_rng(seed, 2);
        let x = Array2::from_shape_fn((15, 3), |_| StandardNormal.sample(&mut rng));
        let gates = sample_gates(x.view(), 4, seed, true).unwrap();
        let mut y = Array2::zeros((15, 2));
        for i in 0..15 {
            y[[i, i % 2]] = 1.0;
        }
        let op = GatedOperator::new(x, &gates, 2, mode == Mode::Exact).unwrap();
        ConvexProblem::new(op, y, beta, PenaltyKind::L21, mode).unwrap()
    }

    #[test]
    fn loss_examples() {
        let y = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert_eq!(loss(y.view(), y.view()), 0.0);
        assert_eq!(loss((&y + 1.0).view(), y.view()), 3.0);
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        let mut rng = stream_rng(3, 0);
        let pred = Array2::from_shape_fn((4, 3), |_| StandardNormal.sample(&mut rng));
        let y = Array2::from_shape_fn((4, 3), |(i, j)| ((i + j) % 3 == 0) as u8 as f64);
        let g = loss_grad(pred.view(), y.view());
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..3 {
                let mut up = pred.clone();
                up[[i, j]] += h;
                let mut dn = pred.clone();
                dn[[i, j]] -= h;
                let fd = (loss(up.view(), y.view()) - loss(dn.view(), y.view())) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() <= 1e-6 * g[[i, j]].abs().max(1.0));
            }
        }
    }

    #[test]
    fn penalty_examples() {
        let block = BlockWeights::from_array(array![[[1.0, 0.0], [0.0, 2.0]]]);
        assert_eq!(penalty(&block, PenaltyKind::L21), 3.0);
        assert_eq!(penalty(&block, PenaltyKind::Frobenius), 5f64.sqrt());
        let eye = BlockWeights::from_array(array![[[1.0, 0.0], [0.0, 1.0]]]);
        let l21 = penalty(&eye, PenaltyKind::L21);
        let fro = penalty(&eye, PenaltyKind::Frobenius);
        assert_eq!(l21, 2.0);
        assert_eq!(fro, 2f64.sqrt());
        assert!((l21 - 2f64.sqrt() * fro).abs() < 1e-15);
    }

    #[test]
    fn prox_examples() {
        let z = BlockWeights::from_array(array![[[3.0], [4.0]]]);
        let out = group_prox(&z, 0.5, PenaltyKind::L21);
        assert!((out.w[[0, 0, 0]] - 2.7).abs() < 1e-15 && (out.w[[0, 1, 0]] - 3.6).abs() < 1e-15);
        let small = BlockWeights::from_array(array![[[0.24], [0.32]]]);
        assert_eq!(group_prox(&small, 0.5, PenaltyKind::L21), BlockWeights::zeros(1, 2, 1));
        let r = rand3((3, 4, 2), 1);
        assert_eq!(group_prox(&r, 0.0, PenaltyKind::L21), r);
        assert_eq!(group_prox(&BlockWeights::zeros(2, 3, 2), 1.0, PenaltyKind::Frobenius), BlockWeights::zeros(2, 3, 2));
    }

    #[test]
    fn objective_at_zero() {
        let prob = small_problem(1, Mode::Relaxed, 0.3);
        let v = objective(&prob, &prob.zeros()).unwrap();
        assert_eq!(v.fit, 15.0 / 2.0);
        assert_eq!(v.penalty, 0.0);
        assert_eq!(v.total, v.fit);
        let exact = small_problem(1, Mode::Exact, 0.3);
        assert_eq!(objective(&exact, &exact.zeros()).unwrap().cone_violation, 0.0);
    }

    #[test]
    fn objective_matches_dense_least_squares() {
        let prob = small_problem(5, Mode::Relaxed, 0.0);
        let a = prob.op.dense_matrix();
        let am = nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
        let mut s = prob.zeros();
        let mut fit = 0.0;
        for c in 0..2 {
            let yc = nalgebra::DVector::from_iterator(15, prob.y.column(c).iter().copied());
            let sol = am.clone().svd(true, true).solve(&yc, 1e-12).unwrap();
            let r = &am * &sol - &yc;
            fit += 0.5 * r.norm_squared();
            for b in 0..prob.op.n_blocks() {
                for j in 0..3 {
                    s.w[[b, j, c]] = sol[b * 3 + j];
                }
            }
        }
        let v = objective(&prob, &s).unwrap();
        assert!((v.fit - fit).abs() < 1e-10, "{} vs {fit}", v.fit);
    }

    #[test]
    fn objective_shape_mismatch() {
        let prob = small_problem(1, Mode::Relaxed, 0.1);
        assert!(objective(&prob, &BlockWeights::zeros(1, 3, 2)).is_err());
    }

    #[test]
    fn mode_and_operator_must_agree() {
        let prob = small_problem(1, Mode::Relaxed, 0.1);
        assert!(ConvexProblem::new(prob.op.clone(), prob.y.clone(), 0.1, PenaltyKind::L21, Mode::Exact).is_err());
        assert!(ConvexProblem::new(prob.op.clone(), prob.y.clone(), -1.0, PenaltyKind::L21, Mode::Relaxed).is_err());
    }

    #[test]
    fn projected_blocks_are_feasible() {
        let prob = small_problem(9, Mode::Exact, 0.1);
        let z = rand3((8, 3, 2), 4);
        let (p, ok) = project_blocks(&prob, &z, 1e-10, 100_000).unwrap();
        assert!(ok);
        assert!(blocks_cone_violation(&prob, &p) <= 1e-9);
    }

    #[test]
    fn objective_invariant_under_block_permutation() {
        let prob = small_problem(2, Mode::Relaxed, 0.2);
        let s = rand3((4, 3, 2), 8);
        let base = objective(&prob, &s).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut gates = sample_gates(prob.op.x(), 4, 2, true).unwrap();
        gates.patterns = perm.iter().map(|&p| gates.patterns[p].clone()).collect();
        let op = GatedOperator::new(prob.op.x().to_owned(), &gates, 2, false).unwrap();
        let permuted_prob = ConvexProblem::new(op, prob.y.clone(), 0.2, PenaltyKind::L21, Mode::Relaxed).unwrap();
        let ps = BlockWeights::from_array(s.w.select(Axis(0), &perm));
        let again = objective(&permuted_prob, &ps).unwrap();
        assert!((base.total - again.total).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prox_is_exact_minimizer(seed in 0u64..100_000, t in 0.0f64..3.0, fro in any::<bool>()) {
            let kind = if fro { PenaltyKind::Frobenius } else { PenaltyKind::L21 };
            let z = rand3((2, 3, 2), seed);
            let u = group_prox(&z, t, kind);
            let obj = |v: &BlockWeights| t * penalty(v, kind) + 0.5 * v.sub(&z).frob_norm().powi(2);
            let at = obj(&u);
            let mut rng = stream_rng(seed, 3);
            let unif = Uniform::new(-0.1, 0.1).unwrap();
            for _ in 0..100 {
                let mut pert = u.clone();
                pert.w.mapv_inplace(|x| x + unif.sample(&mut rng));
                prop_assert!(at <= obj(&pert) + 1e-12);
            }
        }

        #[test]
        fn relaxed_penalty_is_min_over_splits(seed in 0u64..100_000) {
            // min over w = α S of ‖S + w‖ + ‖w‖ is attained at α = 0
            let s = rand3((2, 3, 2), seed);
            let base = penalty(&s, PenaltyKind::L21);
            for k in -40..=40 {
                let alpha = k as f64 / 20.0;
                let w = s.scaled(alpha);
                let v = s.add(&w);
                prop_assert!(penalty(&v, PenaltyKind::L21) + penalty(&w, PenaltyKind::L21) >= base - 1e-12);
            }
        }

        #[test]
        fn objective_is_convex(seed in 0u64..100_000) {
            let prob = small_problem(seed, Mode::Relaxed, 0.7);
            let a = rand3((prob.op.n_blocks(), 3, 2), seed + 1);
            let b = rand3((prob.op.n_blocks(), 3, 2), seed + 2);
            let lam = 0.3;
            let mix = a.scaled(lam).add(&b.scaled(1.0 - lam));
            let lhs = objective(&prob, &mix).unwrap().total;
            let rhs = lam * objective(&prob, &a).unwrap().total + (1.0 - lam) * objective(&prob, &b).unwrap().total;
            prop_assert!(lhs <= rhs + 1e-10);
        }
    }
}
