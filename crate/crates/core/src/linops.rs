//! Matrix-free linear algebra for the gated operator
//! `F(S) = Σ_p D_p X S_p` and the normal equations `(FᵀF + σI) s = b`.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CldError, Result};
use crate::gates::{stream_rng, GateSet};

/// `blocks × d × K` weights, one `d × K` block per pattern.
///
/// In split (exact) layout the first `P` blocks hold `V` and the last `P` hold `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub w: Array3<f64>,
}

impl BlockWeights {
    pub fn zeros(blocks: usize, d: usize, k: usize) -> Self {
        Self {
            w: Array3::zeros((blocks, d, k)),
        }
    }

    pub fn from_array(w: Array3<f64>) -> Self {
        Self {
            w: w.as_standard_layout().into_owned(),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.w.dim().0
    }

    pub fn d(&self) -> usize {
        self.w.dim().1
    }

    pub fn k(&self) -> usize {
        self.w.dim().2
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn block(&self, p: usize) -> ArrayView2<'_, f64> {
        self.w.index_axis(Axis(0), p)
    }

    pub fn to_flat(&self) -> Array1<f64> {
        Array1::from_iter(self.w.iter().copied())
    }

    pub fn from_flat(flat: ArrayView1<'_, f64>, blocks: usize, d: usize, k: usize) -> Self {
        Self {
            w: Array3::from_shape_vec((blocks, d, k), flat.to_vec()).expect("flat length matches"),
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.w.iter().map(|t| t * t).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            w: &self.w - &other.w,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            w: &self.w + &other.w,
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { w: &self.w * a }
    }

    /// `V - W` for split layout; a copy otherwise.
    pub fn difference(&self, split: bool) -> Array3<f64> {
        if split {
            let p = self.n_blocks() / 2;
            &self.w.slice(s![..p, .., ..]) - &self.w.slice(s![p.., .., ..])
        } else {
            self.w.clone()
        }
    }
}

/// The stacked gated operator over a fixed data matrix and pattern set.
#[derive(Clone, Debug)]
pub struct GatedOperator {
    x: Array2<f64>,
    masks: Array2<f64>,
    split: bool,
    k: usize,
}

impl GatedOperator {
    pub fn new(x: Array2<f64>, gates: &GateSet, k: usize, split: bool) -> Result<Self> {
        let masks = gates.mask_matrix();
        if masks.nrows() != x.nrows() {
            return Err(CldError::Shape(format!(
                "gates derived from {} rows, X has {}",
                masks.nrows(),
                x.nrows()
            )));
        }
        if gates.d() != x.ncols() {
            return Err(CldError::Shape(format!(
                "gate generators in R^{}, X has d = {}",
                gates.d(),
                x.ncols()
            )));
        }
        Ok(Self { x, masks, split, k })
    }

    /// Operator over explicit 0/1 indicators (`n × P`), e.g. gates evaluated on new rows.
    pub fn from_masks(x: Array2<f64>, masks: Array2<f64>, k: usize, split: bool) -> Result<Self> {
        if masks.nrows() != x.nrows() {
            return Err(CldError::Shape(format!(
                "{} mask rows for {} data rows",
                masks.nrows(),
                x.nrows()
            )));
        }
        Ok(Self { x, masks, split, k })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Pattern count `P`.
    pub fn patterns(&self) -> usize {
        self.masks.ncols()
    }

    pub fn split(&self) -> bool {
        self.split
    }

    pub fn n_blocks(&self) -> usize {
        if self.split {
            2 * self.patterns()
        } else {
            self.patterns()
        }
    }

    pub fn var_dim(&self) -> usize {
        self.n_blocks() * self.d() * self.k
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn masks(&self) -> ArrayView2<'_, f64> {
        self.masks.view()
    }

    pub fn zeros(&self) -> BlockWeights {
        BlockWeights::zeros(self.n_blocks(), self.d(), self.k)
    }

    fn check_blocks(&self, s: &BlockWeights) -> Result<()> {
        let want = (self.n_blocks(), self.d(), self.k);
        if s.w.dim() != want {
            return Err(CldError::Shape(format!(
                "block weights {:?}, operator expects {want:?}",
                s.w.dim()
            )));
        }
        Ok(())
    }

    /// Row `i` of the output is `Σ_p mask_p[i] · x_i · S_p`.
    pub fn apply_f(&self, s: &BlockWeights) -> Result<Array2<f64>> {
        self.check_blocks(s)?;
        let (n, d, k, p) = (self.n(), self.d(), self.k, self.patterns());
        let diff = s.difference(self.split);
        // d × (P·K) with column p·K + c holding S_p[:, c]
        let stacked = diff
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((d, p * k))
            .expect("contiguous");
        let xs = self.x.dot(&stacked);
        let mut out = Array2::<f64>::zeros((n, k));
        Zip::from(out.rows_mut())
            .and(xs.rows())
            .and(self.masks.rows())
            .par_for_each(|mut o, xr, m| {
                for (pi, &mi) in m.iter().enumerate() {
                    if mi != 0.0 {
                        for c in 0..k {
                            o[c] += xr[pi * k + c];
                        }
                    }
                }
            });
        Ok(out)
    }

    /// Block `p` is `Xᵀ D_p R` (negated for the `W` half in split layout).
    pub fn apply_ft(&self, r: ArrayView2<'_, f64>) -> Result<BlockWeights> {
        let (n, d, k, p) = (self.n(), self.d(), self.k, self.patterns());
        if r.dim() != (n, k) {
            return Err(CldError::Shape(format!("residual {:?}, expected ({n}, {k})", r.dim())));
        }
        let mut gated = Array2::<f64>::zeros((n, p * k));
        Zip::from(gated.rows_mut())
            .and(r.rows())
            .and(self.masks.rows())
            .par_for_each(|mut g, rr, m| {
                for (pi, &mi) in m.iter().enumerate() {
                    if mi != 0.0 {
                        for c in 0..k {
                            g[pi * k + c] = rr[c];
                        }
                    }
                }
            });
        let prod = self.x.t().dot(&gated); // d × P·K
        let blocks = prod
            .into_shape_with_order((d, p, k))
            .expect("contiguous")
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned();
        if self.split {
            let mut w = Array3::zeros((2 * p, d, k));
            w.slice_mut(s![..p, .., ..]).assign(&blocks);
            w.slice_mut(s![p.., .., ..]).assign(&(-&blocks));
            Ok(BlockWeights { w })
        } else {
            Ok(BlockWeights { w: blocks })
        }
    }

    /// Exact diagonal of `FᵀF`: entry `(p, j, ·)` is `Σ_i mask_p[i] x_ij²`.
    pub fn normal_diagonal(&self) -> BlockWeights {
        let sq = self.x.mapv(|t| t * t);
        let per_pattern = self.masks.t().dot(&sq); // P × d
        let mut w = Array3::zeros((self.n_blocks(), self.d(), self.k));
        for b in 0..self.n_blocks() {
            let p = b % self.patterns();
            for j in 0..self.d() {
                w.slice_mut(s![b, j, ..]).fill(per_pattern[[p, j]]);
            }
        }
        BlockWeights { w }
    }

    /// Dense `n × (blocks·d)` matrix acting on one class column; for oracles.
    pub fn dense_matrix(&self) -> Array2<f64> {
        let (n, d) = (self.n(), self.d());
        let mut m = Array2::zeros((n, self.n_blocks() * d));
        for b in 0..self.n_blocks() {
            let p = b % self.patterns();
            let sign = if self.split && b >= self.patterns() { -1.0 } else { 1.0 };
            for i in 0..n {
                if self.masks[[i, p]] != 0.0 {
                    for j in 0..d {
                        m[[i, b * d + j]] = sign * self.x[[i, j]];
                    }
                }
            }
        }
        m
    }
}

/// A symmetric linear map on flat vectors.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64>;
}

/// `FᵀF + shift·I` on flattened block weights.
pub struct NormalOperator<'a> {
    pub op: &'a GatedOperator,
    pub shift: f64,
}

impl LinearOperator for NormalOperator<'_> {
    fn dim(&self) -> usize {
        self.op.var_dim()
    }

    fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let op = self.op;
        let s = BlockWeights::from_flat(x, op.n_blocks(), op.d(), op.k());
        let fs = op.apply_f(&s).expect("shape from operator");
        let mut out = op.apply_ft(fs.view()).expect("shape from operator").to_flat();
        if self.shift != 0.0 {
            out.scaled_add(self.shift, &x);
        }
        out
    }
}

pub struct DenseOperator(pub Array2<f64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.0.dot(&x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerKind {
    Identity,
    Jacobi,
    Nystrom { rank: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcgConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub preconditioner: PreconditionerKind,
}

impl Default for PcgConfig {
    fn default() -> Self {
        Self {
            max_iters: 32,
            rel_tol: 1e-8,
            preconditioner: PreconditionerKind::Nystrom { rank: 20 },
        }
    }
}

impl PcgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(CldError::Parameter("PCG max_iters must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(CldError::Parameter("PCG rel_tol must be > 0".into()));
        }
        if let PreconditionerKind::Nystrom { rank } = self.preconditioner {
            if rank < 1 {
                return Err(CldError::Parameter("Nystrom rank must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Randomized Nyström approximation `A ≈ U diag(λ) Uᵀ` turned into an
/// approximate inverse of `A + σI`.
#[derive(Clone, Debug)]
pub struct NystromPreconditioner {
    pub u: Array2<f64>,
    pub lambda: Array1<f64>,
    pub sigma: f64,
}

impl NystromPreconditioner {
    /// Applies `(λ_r + σ) U diag(1/(λ+σ)) Uᵀ + (I - UUᵀ)`.
    pub fn apply(&self, r: ArrayView1<'_, f64>) -> Array1<f64> {
        let lam_min = self.lambda.iter().copied().fold(f64::INFINITY, f64::min);
        let coef = self.u.t().dot(&r);
        let scaled = Zip::from(&coef)
            .and(&self.lambda)
            .map_collect(|&c, &l| c * ((lam_min + self.sigma) / (l + self.sigma) - 1.0));
        let mut out = r.to_owned();
        out += &self.u.dot(&scaled);
        out
    }
}

fn to_dmatrix(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Builds a rank-`rank` Nyström preconditioner for `A + σI`, where `matvec`
/// applies the PSD part `A`.
pub fn nystrom_precond(
    matvec: &dyn LinearOperator,
    rank: usize,
    sigma: f64,
    seed: u64,
) -> Result<NystromPreconditioner> {
    let dim = matvec.dim();
    if rank < 1 || rank > dim {
        return Err(CldError::Parameter(format!(
            "Nystrom rank must satisfy 1 <= rank <= {dim}, got {rank}"
        )));
    }
    let mut rng = stream_rng(seed, 0x4e79);
    let omega = DMatrix::from_fn(dim, rank, |_, _| StandardNormal.sample(&mut rng));
    let q = omega.qr().q();
    let q_nd = from_dmatrix(&q);

    let mut y = Array2::<f64>::zeros((dim, rank));
    for (j, col) in q_nd.columns().into_iter().enumerate() {
        y.column_mut(j).assign(&matvec.apply(col));
    }
    let y_norm = y.iter().map(|t| t * t).sum::<f64>().sqrt();
    let nu = (dim as f64).sqrt() * f64::EPSILON * y_norm.max(f64::MIN_POSITIVE);
    y.scaled_add(nu, &q_nd);

    let y_m = to_dmatrix(y.view());
    let core = q.transpose() * &y_m;
    let core = (&core + core.transpose()) * 0.5;
    let chol = core.cholesky().ok_or_else(|| {
        CldError::Numeric {
            stage: "nystrom cholesky",
            iteration: 0,
        }
    })?;
    // B = Y C^{-T}: solve C Bᵀ = Yᵀ
    let bt = chol
        .l()
        .solve_lower_triangular(&y_m.transpose())
        .ok_or(CldError::Numeric {
            stage: "nystrom triangular solve",
            iteration: 0,
        })?;
    let svd = bt.transpose().svd(true, false);
    let u = svd.u.expect("requested U");
    let lambda: Array1<f64> = svd.singular_values.iter().map(|s| (s * s - nu).max(0.0)).collect();
    let u = from_dmatrix(&u);
    if !lambda.iter().all(|l| l.is_finite()) || !u.iter().all(|t| t.is_finite()) {
        return Err(CldError::Numeric {
            stage: "nystrom factors",
            iteration: 0,
        });
    }
    Ok(NystromPreconditioner { u, lambda, sigma })
}

#[derive(Clone, Debug)]
pub enum Preconditioner {
    Identity,
    Jacobi(Array1<f64>),
    Nystrom(NystromPreconditioner),
}

impl Preconditioner {
    /// Jacobi from an exact diagonal (inverse taken here).
    pub fn jacobi(diagonal: Array1<f64>) -> Self {
        Preconditioner::Jacobi(diagonal.mapv(|d| if d > 0.0 { 1.0 / d } else { 1.0 }))
    }

    pub fn apply(&self, r: ArrayView1<'_, f64>) -> Array1<f64> {
        match self {
            Preconditioner::Identity => r.to_owned(),
            Preconditioner::Jacobi(inv) => &r * inv,
            Preconditioner::Nystrom(ny) => ny.apply(r),
        }
    }

    /// Builds the configured preconditioner for `FᵀF + shift·I`.
    pub fn for_normal(op: &GatedOperator, shift: f64, kind: PreconditionerKind, seed: u64) -> Result<Self> {
        Ok(match kind {
            PreconditionerKind::Identity => Preconditioner::Identity,
            PreconditionerKind::Jacobi => {
                let mut diag = op.normal_diagonal().to_flat();
                diag += shift;
                Preconditioner::jacobi(diag)
            }
            PreconditionerKind::Nystrom { rank } => {
                let gram = NormalOperator { op, shift: 0.0 };
                let rank = rank.min(gram.dim());
                Preconditioner::Nystrom(nystrom_precond(&gram, rank, shift, seed)?)
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct PcgOutcome {
    /// Final iterate. CG decreases the `A`-norm error monotonically, not the
    /// residual, so the last iterate is the best available answer.
    pub x: Array1<f64>,
    pub iters: usize,
    /// `‖b - A x‖` at the returned iterate (recursively updated).
    pub residual: f64,
    pub converged: bool,
    /// Residual norm per iteration; entry 0 is the start.
    pub history: Vec<f64>,
}

/// Preconditioned conjugate gradient for SPD `a`.
///
/// Stops when `‖r‖ <= rel_tol · ‖b‖` or after `max_iters` iterations.
pub fn pcg_solve(
    a: &dyn LinearOperator,
    b: ArrayView1<'_, f64>,
    x0: Option<ArrayView1<'_, f64>>,
    precond: &Preconditioner,
    cfg: &PcgConfig,
) -> Result<PcgOutcome> {
    cfg.validate()?;
    let dim = a.dim();
    if b.len() != dim {
        return Err(CldError::Shape(format!("rhs of length {}, operator dim {dim}", b.len())));
    }
    let b_norm = b.dot(&b).sqrt();
    let mut x = match x0 {
        Some(x0) => x0.to_owned(),
        None => Array1::zeros(dim),
    };
    let mut r = &b - &a.apply(x.view());
    let mut r_norm = r.dot(&r).sqrt();
    let target = cfg.rel_tol * b_norm;

    let mut history = vec![r_norm];
    if r_norm <= target {
        return Ok(PcgOutcome {
            x,
            iters: 0,
            residual: r_norm,
            converged: true,
            history,
        });
    }

    let mut z = precond.apply(r.view());
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for it in 1..=cfg.max_iters {
        let ap = a.apply(p.view());
        let pap = p.dot(&ap);
        if !pap.is_finite() || !rz.is_finite() {
            return Err(CldError::Numeric { stage: "pcg", iteration: it });
        }
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        r_norm = r.dot(&r).sqrt();
        if !r_norm.is_finite() {
            return Err(CldError::Numeric { stage: "pcg", iteration: it });
        }
        history.push(r_norm);
        if r_norm <= target {
            return Ok(PcgOutcome {
                x,
                iters: it,
                residual: r_norm,
                converged: true,
                history,
            });
        }
        z = precond.apply(r.view());
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + &(&p * beta);
    }
    let iters = history.len() - 1;
    Ok(PcgOutcome {
        x,
        iters,
        residual: r_norm,
        converged: r_norm <= target,
        history,
    })
}

/// Largest eigenvalue estimate of an SPD operator by power iteration.
pub fn power_iteration(matvec: &dyn LinearOperator, iters: usize, seed: u64) -> f64 {
    let dim = matvec.dim();
    let mut rng = stream_rng(seed, 0x9077);
    let mut v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    v /= norm;
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let w = matvec.apply(v.view());
        estimate = v.dot(&w);
        norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
    }
    estimate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{sample_gates, GatePattern};
    use ndarray::array;
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, 5);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    fn random_blocks(op: &GatedOperator, seed: u64) -> BlockWeights {
        let mut rng = stream_rng(seed, 6);
        BlockWeights::from_array(Array3::from_shape_fn(
            (op.n_blocks(), op.d(), op.k()),
            |_| StandardNormal.sample(&mut rng),
        ))
    }

    fn identity_gates(n: usize, d: usize) -> GateSet {
        GateSet {
            patterns: vec![GatePattern {
                active: vec![true; n],
                generator: Array1::zeros(d),
            }],
            seed: 0,
            dedup: true,
            shortfall: 0,
        }
    }

    #[test]
    fn ungated_apply_is_matmul() {
        let x = random_matrix(7, 3, 1);
        let op = GatedOperator::new(x.clone(), &identity_gates(7, 3), 2, false).unwrap();
        let s = random_blocks(&op, 2);
        let out = op.apply_f(&s).unwrap();
        let expect: Array2<f64> = x.dot(&s.block(0));
        assert!((&out - &expect).iter().all(|t| t.abs() < 1e-12));
        assert_eq!(op.apply_f(&op.zeros()).unwrap(), Array2::<f64>::zeros((7, 2)));
        let r = random_matrix(7, 2, 3);
        let ft = op.apply_ft(r.view()).unwrap();
        assert!((&ft.block(0) - &x.t().dot(&r)).iter().all(|t| t.abs() < 1e-12));
        assert_eq!(op.apply_ft(Array2::zeros((7, 2)).view()).unwrap(), op.zeros());
    }

    #[test]
    fn apply_matches_dense_construction() {
        let x = random_matrix(9, 3, 4);
        let gates = sample_gates(x.view(), 2, 8, true).unwrap();
        for split in [false, true] {
            let op = GatedOperator::new(x.clone(), &gates, 2, split).unwrap();
            let s = random_blocks(&op, 9);
            let dense = op.dense_matrix();
            let out = op.apply_f(&s).unwrap();
            for c in 0..2 {
                let col: Array1<f64> = (0..op.n_blocks())
                    .flat_map(|b| s.w.slice(s![b, .., c]).to_vec())
                    .collect();
                let expect = dense.dot(&col);
                assert!((&out.column(c) - &expect).iter().all(|t| t.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let x = random_matrix(5, 2, 1);
        let op = GatedOperator::new(x, &identity_gates(5, 2), 2, false).unwrap();
        assert!(op.apply_f(&BlockWeights::zeros(2, 2, 2)).is_err());
        assert!(op.apply_ft(Array2::zeros((4, 2)).view()).is_err());
    }

    #[test]
    fn pcg_small_examples() {
        let cfg = PcgConfig {
            preconditioner: PreconditionerKind::Identity,
            ..Default::default()
        };
        let a = DenseOperator(Array2::eye(4));
        let b = array![1.0, -2.0, 3.0, 0.5];
        let out = pcg_solve(&a, b.view(), None, &Preconditioner::Identity, &cfg).unwrap();
        assert_eq!(out.iters, 1);
        assert!((&out.x - &b).iter().all(|t| t.abs() < 1e-14));

        let a = DenseOperator(array![[1.0, 0.0], [0.0, 2.0]]);
        let out = pcg_solve(&a, array![1.0, 2.0].view(), None, &Preconditioner::Identity, &cfg).unwrap();
        assert!((&out.x - &array![1.0, 1.0]).iter().all(|t| t.abs() < 1e-12));
    }

    #[test]
    fn pcg_matches_dense_solve() {
        let m = random_matrix(30, 30, 11);
        let a = m.t().dot(&m) + Array2::<f64>::eye(30);
        let b: Array1<f64> = random_matrix(30, 1, 12).column(0).to_owned();
        let expect = {
            let am = to_dmatrix(a.view());
            let chol = am.cholesky().unwrap();
            chol.solve(&nalgebra::DVector::from_iterator(30, b.iter().copied()))
        };
        let cfg = PcgConfig {
            max_iters: 200,
            rel_tol: 1e-12,
            preconditioner: PreconditionerKind::Identity,
        };
        let op = DenseOperator(a.clone());
        for pre in [
            Preconditioner::Identity,
            Preconditioner::jacobi(a.diag().to_owned()),
        ] {
            let out = pcg_solve(&op, b.view(), None, &pre, &cfg).unwrap();
            let err = out.x.iter().zip(expect.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-6, "err {err}");
        }
    }

    #[test]
    fn pcg_energy_error_is_monotone() {
        let m = random_matrix(40, 40, 13);
        let a = m.t().dot(&m) + Array2::<f64>::eye(40) * 1e-3;
        let b: Array1<f64> = random_matrix(40, 1, 14).column(0).to_owned();
        let exact = to_dmatrix(a.view())
            .cholesky()
            .unwrap()
            .solve(&nalgebra::DVector::from_iterator(40, b.iter().copied()));
        let exact = Array1::from_iter(exact.iter().copied());
        let op = DenseOperator(a.clone());
        let x0 = random_matrix(40, 1, 15).column(0).to_owned();
        let mut prev = f64::INFINITY;
        for k in 1..=40 {
            let cfg = PcgConfig {
                max_iters: k,
                rel_tol: 1e-14,
                preconditioner: PreconditionerKind::Identity,
            };
            let out = pcg_solve(&op, b.view(), Some(x0.view()), &Preconditioner::Identity, &cfg).unwrap();
            let e = &out.x - &exact;
            let energy = e.dot(&a.dot(&e));
            assert!(energy <= prev * (1.0 + 1e-9) + 1e-20, "iteration {k}: {energy} > {prev}");
            prev = energy;
        }
    }

    #[test]
    fn nystrom_identity_converges_fast() {
        let dim = 25;
        let psd = DenseOperator(Array2::eye(dim));
        let sigma = 1e-4;
        let pre = nystrom_precond(&psd, 5, sigma, 3).unwrap();
        let shifted = DenseOperator(Array2::eye(dim) * (1.0 + sigma));
        let b: Array1<f64> = random_matrix(dim, 1, 2).column(0).to_owned();
        let cfg = PcgConfig {
            max_iters: 10,
            rel_tol: 1e-10,
            preconditioner: PreconditionerKind::Nystrom { rank: 5 },
        };
        let out = pcg_solve(&shifted, b.view(), None, &Preconditioner::Nystrom(pre), &cfg).unwrap();
        assert!(out.converged && out.iters <= 2, "iters {}", out.iters);
    }

    #[test]
    fn nystrom_full_rank_matches_spectrum() {
        let dim = 12;
        let m = random_matrix(dim, dim, 21);
        let a = m.t().dot(&m);
        let sigma = 1e-3;
        let pre = nystrom_precond(&DenseOperator(a.clone()), dim, sigma, 4).unwrap();
        // dense eigendecomposition oracle
        let eig = to_dmatrix(a.view()).symmetric_eigen();
        let mut want: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let mut got = pre.lambda.to_vec();
        want.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-6 * want[dim - 1], "{g} vs {w}");
        }
        let shifted = DenseOperator(&a + &(Array2::<f64>::eye(dim) * sigma));
        let b: Array1<f64> = random_matrix(dim, 1, 5).column(0).to_owned();
        let cfg = PcgConfig {
            max_iters: 50,
            rel_tol: 1e-8,
            preconditioner: PreconditionerKind::Nystrom { rank: dim },
        };
        let out = pcg_solve(&shifted, b.view(), None, &Preconditioner::Nystrom(pre), &cfg).unwrap();
        assert!(out.converged && out.iters <= 3, "iters {}", out.iters);
    }

    #[test]
    fn nystrom_deterministic_and_guarded() {
        let m = random_matrix(10, 10, 1);
        let a = DenseOperator(m.t().dot(&m));
        let p1 = nystrom_precond(&a, 4, 0.1, 9).unwrap();
        let p2 = nystrom_precond(&a, 4, 0.1, 9).unwrap();
        assert_eq!(p1.u, p2.u);
        assert_eq!(p1.lambda, p2.lambda);
        assert!(matches!(nystrom_precond(&a, 11, 0.1, 9), Err(CldError::Parameter(_))));
    }

    #[test]
    fn power_iteration_examples() {
        let est = power_iteration(&DenseOperator(array![[1.0, 0.0], [0.0, 3.0]]), 100, 1);
        assert!((est - 3.0).abs() < 1e-4);
        let est = power_iteration(&DenseOperator(Array2::eye(5)), 3, 1);
        assert!((est - 1.0).abs() < 1e-12);
        let m = random_matrix(15, 15, 31);
        let a = m.t().dot(&m);
        let top = to_dmatrix(a.view()).symmetric_eigen().eigenvalues.max();
        let est = power_iteration(&DenseOperator(a), 2000, 2);
        assert!((est - top).abs() <= 0.01 * top, "{est} vs {top}");
    }

    #[test]
    fn gated_pcg_agrees_across_preconditioners() {
        let x = random_matrix(40, 4, 41);
        let gates = sample_gates(x.view(), 4, 2, true).unwrap();
        let op = GatedOperator::new(x, &gates, 3, false).unwrap();
        let shift = 1.0;
        let normal = NormalOperator { op: &op, shift };
        let b = random_blocks(&op, 3).to_flat();
        let mut sols = Vec::new();
        for kind in [
            PreconditionerKind::Identity,
            PreconditionerKind::Jacobi,
            PreconditionerKind::Nystrom { rank: 8 },
        ] {
            let cfg = PcgConfig {
                max_iters: 500,
                rel_tol: 1e-12,
                preconditioner: kind,
            };
            let pre = Preconditioner::for_normal(&op, shift, kind, 7).unwrap();
            sols.push(pcg_solve(&normal, b.view(), None, &pre, &cfg).unwrap().x);
        }
        for s in &sols[1..] {
            let err = (s - &sols[0]).iter().fold(0.0f64, |m, t| m.max(t.abs()));
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn jacobi_diagonal_is_exact() {
        let x = random_matrix(12, 3, 51);
        let gates = sample_gates(x.view(), 3, 1, true).unwrap();
        for split in [false, true] {
            let op = GatedOperator::new(x.clone(), &gates, 2, split).unwrap();
            let diag = op.normal_diagonal().to_flat();
            let normal = NormalOperator { op: &op, shift: 0.0 };
            for i in 0..op.var_dim() {
                let mut e = Array1::zeros(op.var_dim());
                e[i] = 1.0;
                assert!((normal.apply(e.view())[i] - diag[i]).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn adjoint_consistency(seed in 0u64..1_000_000, split in any::<bool>()) {
            let x = random_matrix(11, 3, seed);
            let gates = sample_gates(x.view(), 3, seed, true).unwrap();
            let op = GatedOperator::new(x, &gates, 2, split).unwrap();
            let s = random_blocks(&op, seed + 1);
            let r = random_matrix(11, 2, seed + 2);
            let lhs = (&op.apply_f(&s).unwrap() * &r).sum();
            let rhs = (&s.w * &op.apply_ft(r.view()).unwrap().w).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
        }
    }
}
