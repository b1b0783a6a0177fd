//! Reference solvers for cross-checking the trainer.
//!
//! [`fista_solve`] is an accelerated proximal gradient method on the relaxed
//! program; it shares `group_prox` with ADMM. [`dense_solve_smallest`]
//! materializes the operator and shrinks inline, so a prox bug cannot hide in
//! both. Everything here is single-threaded on purpose.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::cvxprog::{group_prox, loss, objective, penalty, ConvexProblem, Mode, PenaltyKind};
use crate::error::{CldError, Result};
use crate::gates::stream_rng;
use crate::linops::{power_iteration, BlockWeights, NormalOperator};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FistaConfig {
    pub max_iters: usize,
    pub rel_obj_tol: f64,
    pub lipschitz_safety: f64,
}

impl Default for FistaConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            rel_obj_tol: 1e-10,
            lipschitz_safety: 1.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FistaResult {
    pub s: BlockWeights,
    pub objective: f64,
    /// Objective after every iteration; non-increasing.
    pub history: Vec<f64>,
    pub converged: bool,
}

fn fit_gradient(prob: &ConvexProblem, s: &BlockWeights) -> Result<(f64, BlockWeights)> {
    let pred = prob.op.apply_f(s)?;
    let fit = loss(pred.view(), prob.y.view());
    let resid = &pred - &prob.y;
    Ok((fit, prob.op.apply_ft(resid.view())?))
}

fn total(prob: &ConvexProblem, s: &BlockWeights) -> Result<f64> {
    Ok(objective(prob, s)?.total)
}

/// Monotone FISTA on `fit + β·penalty`. Whenever the accelerated point would
/// raise the objective, a plain proximal step from the current iterate is
/// taken instead and momentum restarts; momentum also restarts when it
/// opposes the latest step.
pub fn fista_solve(prob: &ConvexProblem, cfg: &FistaConfig) -> Result<FistaResult> {
    if prob.mode != Mode::Relaxed {
        return Err(CldError::Parameter("FISTA oracle handles the relaxed program only".into()));
    }
    if cfg.max_iters == 0 || !(cfg.lipschitz_safety >= 1.0) {
        return Err(CldError::Parameter("FISTA needs max_iters >= 1 and safety >= 1".into()));
    }
    let normal = NormalOperator { op: &prob.op, shift: 0.0 };
    let lmax = power_iteration(&normal, 200, 0xF157A);
    let mut x = prob.zeros();
    let mut fx = total(prob, &x)?;
    let mut history = Vec::with_capacity(cfg.max_iters);
    if lmax <= 0.0 {
        history.push(fx);
        return Ok(FistaResult {
            s: x,
            objective: fx,
            history,
            converged: true,
        });
    }
    let step = 1.0 / (cfg.lipschitz_safety * lmax);
    let thresh = step * prob.beta;
    let value = |pred: &Array2<f64>, s: &BlockWeights| loss(pred.view(), prob.y.view()) + prob.beta * penalty(s, prob.penalty);
    // Predictions are linear in the weights, so `F y` follows from `F x` and `F z`.
    let prox_step = |point: &BlockWeights, pred: &Array2<f64>| -> Result<BlockWeights> {
        let g = prob.op.apply_ft((pred - &prob.y).view())?;
        Ok(group_prox(&point.sub(&g.scaled(step)), thresh, prob.penalty))
    };

    let mut fx_pred = prob.op.apply_f(&x)?;
    let mut y = x.clone();
    let mut fy_pred = fx_pred.clone();
    let mut t = 1.0f64;
    let mut converged = false;
    let mut calm = 0;
    for it in 0..cfg.max_iters {
        let z = prox_step(&y, &fy_pred)?;
        let fz_pred = prob.op.apply_f(&z)?;
        let fz = value(&fz_pred, &z);
        let (next, next_pred, fnext) = if fz <= fx {
            // Drop momentum when it points against the gradient step.
            let uphill = ((&y.w - &z.w) * (&z.w - &x.w)).sum() > 0.0;
            if uphill {
                t = 1.0;
                y = z.clone();
                fy_pred = fz_pred.clone();
            } else {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let m = (t - 1.0) / t_next;
                y = z.add(&z.sub(&x).scaled(m));
                fy_pred = &fz_pred + &((&fz_pred - &fx_pred) * m);
                t = t_next;
            }
            (z, fz_pred, fz)
        } else {
            let plain = prox_step(&x, &fx_pred)?;
            let fp_pred = prob.op.apply_f(&plain)?;
            let fp = value(&fp_pred, &plain);
            t = 1.0;
            if fp <= fx {
                y = plain.clone();
                fy_pred = fp_pred.clone();
                (plain, fp_pred, fp)
            } else {
                y = x.clone();
                fy_pred = fx_pred.clone();
                (x.clone(), fx_pred.clone(), fx)
            }
        };
        if !fnext.is_finite() {
            return Err(CldError::Numeric {
                stage: "fista",
                iteration: it,
            });
        }
        let change = fx - fnext;
        x = next;
        fx_pred = next_pred;
        fx = fnext;
        history.push(fx);
        if change <= cfg.rel_obj_tol * fx.abs().max(f64::MIN_POSITIVE) {
            calm += 1;
            if calm >= 10 {
                converged = true;
                break;
            }
        } else {
            calm = 0;
        }
    }
    Ok(FistaResult {
        s: x,
        objective: fx,
        history,
        converged,
    })
}

/// Largest relative error between central differences of `f` and `grad`
/// over the given coordinates.
pub fn fd_gradcheck(
    f: &dyn Fn(ArrayView1<'_, f64>) -> f64,
    grad: ArrayView1<'_, f64>,
    point: ArrayView1<'_, f64>,
    coords: &[usize],
    step: f64,
) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = point.to_owned();
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(probe.view());
        probe[i] = orig - step;
        let down = f(probe.view());
        probe[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let scale = grad[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max((fd - grad[i]).abs() / scale);
    }
    worst
}

pub const GRADCHECK_COORDS: usize = 20;
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Checks `Fᵀ(F S - Y)` against finite differences of the fit term at
/// `GRADCHECK_COORDS` random coordinates.
pub fn fit_gradcheck(prob: &ConvexProblem, s: &BlockWeights, seed: u64) -> Result<f64> {
    let (_, g) = fit_gradient(prob, s)?;
    let dims = (s.n_blocks(), s.d(), s.k());
    let f = |flat: ArrayView1<'_, f64>| {
        let w = BlockWeights::from_flat(flat, dims.0, dims.1, dims.2);
        let pred = prob.op.apply_f(&w).expect("shape fixed");
        loss(pred.view(), prob.y.view())
    };
    let mut rng = stream_rng(seed, 0x6AD);
    let coords: Vec<usize> = (0..GRADCHECK_COORDS).map(|_| rng.random_range(0..s.len())).collect();
    Ok(fd_gradcheck(&f, g.to_flat().view(), s.to_flat().view(), &coords, GRADCHECK_STEP))
}

pub const DENSE_GUARD: usize = 131_072;
/// Optimality-condition tolerance, relative to β.
pub const DENSE_KKT_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct DenseSolution {
    pub s: BlockWeights,
    pub objective: f64,
    pub iterations: usize,
    /// Largest relative breach of the zero-group optimality condition.
    pub kkt_violation: f64,
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Column groups of the dense `(blocks·d) × K` variable matrix.
fn dense_penalty(s: &Array2<f64>, blocks: usize, d: usize, kind: PenaltyKind) -> f64 {
    let mut total = 0.0;
    for b in 0..blocks {
        let blk = s.slice(ndarray::s![b * d..(b + 1) * d, ..]);
        total += match kind {
            PenaltyKind::L21 => blk.columns().into_iter().map(|c| c.dot(&c).sqrt()).sum::<f64>(),
            PenaltyKind::Frobenius => blk.iter().map(|t| t * t).sum::<f64>().sqrt(),
        };
    }
    total
}

fn dense_shrink(s: &mut Array2<f64>, blocks: usize, d: usize, t: f64, kind: PenaltyKind) {
    for b in 0..blocks {
        let mut blk = s.slice_mut(ndarray::s![b * d..(b + 1) * d, ..]);
        match kind {
            PenaltyKind::L21 => {
                for mut c in blk.columns_mut() {
                    let n = c.dot(&c).sqrt();
                    let f = if n > t { 1.0 - t / n } else { 0.0 };
                    c.mapv_inplace(|v| v * f);
                }
            }
            PenaltyKind::Frobenius => {
                let n = blk.iter().map(|v| v * v).sum::<f64>().sqrt();
                let f = if n > t { 1.0 - t / n } else { 0.0 };
                blk.mapv_inplace(|v| v * f);
            }
        }
    }
}

/// Groups of the dense `(blocks·d) × K` variable matrix as `(rows, columns)`.
fn dense_groups(blocks: usize, d: usize, k: usize, kind: PenaltyKind) -> Vec<(std::ops::Range<usize>, Vec<usize>)> {
    match kind {
        PenaltyKind::L21 => (0..blocks)
            .flat_map(|b| (0..k).map(move |c| (b * d..(b + 1) * d, vec![c])))
            .collect(),
        PenaltyKind::Frobenius => (0..blocks).map(|b| (b * d..(b + 1) * d, (0..k).collect())).collect(),
    }
}

struct DenseProblem<'a> {
    a: &'a Array2<f64>,
    y: &'a Array2<f64>,
    gram: Array2<f64>,
    aty: Array2<f64>,
    blocks: usize,
    d: usize,
    beta: f64,
    kind: PenaltyKind,
}

impl DenseProblem<'_> {
    fn value(&self, s: &Array2<f64>) -> f64 {
        let r = self.a.dot(s) - self.y;
        0.5 * r.iter().map(|t| t * t).sum::<f64>() + self.beta * dense_penalty(s, self.blocks, self.d, self.kind)
    }

    fn fit_grad(&self, s: &Array2<f64>) -> Array2<f64> {
        self.gram.dot(s) - &self.aty
    }

    /// Accelerated proximal gradient with gradient-based momentum restarts.
    fn prox_gradient(&self, mut x: Array2<f64>, lmax: f64, max_iters: usize, tol: f64) -> (Array2<f64>, usize) {
        let step = 1.0 / lmax;
        let mut fx = self.value(&x);
        let mut y = x.clone();
        let mut t = 1.0f64;
        let mut calm = 0;
        let mut iters = 0;
        while iters < max_iters {
            iters += 1;
            let mut z = &y - &(self.fit_grad(&y) * step);
            dense_shrink(&mut z, self.blocks, self.d, step * self.beta, self.kind);
            let fz = self.value(&z);
            let uphill = ((&y - &z) * (&z - &x)).sum() > 0.0;
            if uphill || fz > fx {
                t = 1.0;
                y = x.clone();
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &z + &((&z - &x) * ((t - 1.0) / t_next));
            t = t_next;
            let change = fx - fz;
            x = z;
            fx = fz;
            if change <= tol * fx.abs().max(f64::MIN_POSITIVE) {
                calm += 1;
                if calm >= 10 {
                    break;
                }
            } else {
                calm = 0;
            }
        }
        (x, iters)
    }

    /// Damped Newton on the groups that are currently nonzero, where the
    /// objective is smooth. Groups that collapse to zero are dropped.
    fn newton_polish(&self, s: &mut Array2<f64>, groups: &[(std::ops::Range<usize>, Vec<usize>)]) {
        for _ in 0..100 {
            let active: Vec<usize> = (0..groups.len())
                .filter(|&g| group_norm(s, &groups[g]) > 0.0)
                .collect();
            if active.is_empty() {
                return;
            }
            let vars: Vec<(usize, usize, usize)> = active
                .iter()
                .enumerate()
                .flat_map(|(ai, &g)| {
                    let (rows, cols) = &groups[g];
                    cols.iter().flat_map(move |&c| rows.clone().map(move |r| (r, c, ai)))
                })
                .collect();
            let m = vars.len();
            let norms: Vec<f64> = active.iter().map(|&g| group_norm(s, &groups[g])).collect();
            let fg = self.fit_grad(s);
            let grad = DVector::from_fn(m, |i, _| {
                let (r, c, ai) = vars[i];
                fg[[r, c]] + self.beta * s[[r, c]] / norms[ai]
            });
            let hess = DMatrix::from_fn(m, m, |i, j| {
                let (ri, ci, gi) = vars[i];
                let (rj, cj, gj) = vars[j];
                let mut h = if ci == cj { self.gram[[ri, rj]] } else { 0.0 };
                if gi == gj {
                    let n = norms[gi];
                    if i == j {
                        h += self.beta / n;
                    }
                    h -= self.beta * s[[ri, ci]] * s[[rj, cj]] / (n * n * n);
                }
                h
            });
            let dir = match hess.clone().cholesky() {
                Some(ch) => -ch.solve(&grad),
                None => match hess.lu().solve(&grad) {
                    Some(x) => -x,
                    None => return,
                },
            };
            let decrement = -grad.dot(&dir);
            let f0 = self.value(s);
            if !(decrement > 0.0) || decrement <= 1e-15 * f0.abs().max(f64::MIN_POSITIVE) {
                return;
            }
            let mut t = 1.0;
            loop {
                let mut trial = s.clone();
                for (i, &(r, c, _)) in vars.iter().enumerate() {
                    trial[[r, c]] += t * dir[i];
                }
                if self.value(&trial) <= f0 - 0.25 * t * decrement {
                    *s = trial;
                    break;
                }
                t *= 0.5;
                if t < 1e-12 {
                    return;
                }
            }
            let biggest = norms.iter().copied().fold(0.0, f64::max);
            for &g in &active {
                if group_norm(s, &groups[g]) <= 1e-13 * biggest {
                    let (rows, cols) = &groups[g];
                    for &c in cols {
                        for r in rows.clone() {
                            s[[r, c]] = 0.0;
                        }
                    }
                }
            }
        }
    }

    /// Largest breach of the optimality conditions, relative to β: zero
    /// groups need `‖∇_g fit‖ <= β`, nonzero groups need
    /// `∇_g fit + β s_g/‖s_g‖ = 0`.
    fn kkt_violation(&self, s: &Array2<f64>, groups: &[(std::ops::Range<usize>, Vec<usize>)]) -> f64 {
        let fg = self.fit_grad(s);
        groups
            .iter()
            .map(|g| {
                let n = group_norm(s, g);
                if n == 0.0 {
                    group_norm(&fg, g) / self.beta - 1.0
                } else {
                    let (rows, cols) = g;
                    let mut acc = 0.0;
                    for &c in cols {
                        for r in rows.clone() {
                            let t = fg[[r, c]] + self.beta * s[[r, c]] / n;
                            acc += t * t;
                        }
                    }
                    acc.sqrt() / self.beta
                }
            })
            .fold(0.0, f64::max)
    }
}

fn group_norm(s: &Array2<f64>, (rows, cols): &(std::ops::Range<usize>, Vec<usize>)) -> f64 {
    cols.iter()
        .map(|&c| s.slice(ndarray::s![rows.clone(), c]).iter().map(|t| t * t).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Brute-force solve of the relaxed program on the materialized operator.
/// `β = 0` is a minimum-norm least-squares solve. Otherwise accelerated
/// proximal gradient runs until the objective changes by less than `1e-12`
/// relative, then Newton steps on the active groups polish the optimum and
/// the inactive groups are checked against their optimality condition.
pub fn dense_solve_smallest(prob: &ConvexProblem) -> Result<DenseSolution> {
    if prob.mode != Mode::Relaxed {
        return Err(CldError::Parameter("dense oracle handles the relaxed program only".into()));
    }
    let op = &prob.op;
    let (n, d, blocks, k) = (op.n(), op.d(), op.n_blocks(), op.k());
    if n * blocks * d > DENSE_GUARD {
        return Err(CldError::Guard(format!(
            "dense oracle needs n·P·d <= {DENSE_GUARD}, got {}",
            n * blocks * d
        )));
    }
    let a = op.dense_matrix();
    let to_blocks = |s: &Array2<f64>| {
        let flat: Vec<f64> = (0..blocks * d).flat_map(|r| s.row(r).to_vec()).collect();
        BlockWeights::from_flat(ArrayView1::from(&flat), blocks, d, k)
    };

    if prob.beta == 0.0 {
        let svd = to_na(&a).svd(true, true);
        let sol = svd
            .solve(&to_na(&prob.y), 1e-12 * svd.singular_values.max().max(1.0))
            .map_err(|e| CldError::Training(format!("dense least squares: {e}")))?;
        let s = to_blocks(&from_na(&sol));
        let obj = objective(prob, &s)?.total;
        return Ok(DenseSolution {
            s,
            objective: obj,
            iterations: 0,
            kkt_violation: 0.0,
        });
    }

    let dp = DenseProblem {
        a: &a,
        y: &prob.y,
        gram: a.t().dot(&a),
        aty: a.t().dot(&prob.y),
        blocks,
        d,
        beta: prob.beta,
        kind: prob.penalty,
    };
    let lmax = SymmetricEigen::new(to_na(&dp.gram)).eigenvalues.max();
    let mut x = Array2::<f64>::zeros((blocks * d, k));
    let mut iterations = 0;
    let mut kkt = 0.0;
    if lmax > 0.0 {
        let groups = dense_groups(blocks, d, k, prob.penalty);
        let (pg, it) = dp.prox_gradient(x, lmax, 200_000, 1e-6);
        x = pg;
        iterations += it;
        for _ in 0..20 {
            match prob.penalty {
                // Column groups decouple across classes.
                PenaltyKind::L21 => {
                    for c in 0..k {
                        let class_groups: Vec<_> = groups.iter().filter(|g| g.1 == [c]).cloned().collect();
                        dp.newton_polish(&mut x, &class_groups);
                    }
                }
                PenaltyKind::Frobenius => dp.newton_polish(&mut x, &groups),
            }
            kkt = dp.kkt_violation(&x, &groups);
            if kkt <= DENSE_KKT_TOL {
                break;
            }
            // Let proximal steps settle the support, then polish again.
            let (pg, it) = dp.prox_gradient(x, lmax, 1_000, 0.0);
            x = pg;
            iterations += it;
        }
    }
    let s = to_blocks(&x);
    let obj = objective(prob, &s)?.total;
    Ok(DenseSolution {
        s,
        objective: obj,
        iterations,
        kkt_violation: kkt,
    })
}

/// Objective gap `|a - b| / max(|a|, |b|, tiny)`.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
