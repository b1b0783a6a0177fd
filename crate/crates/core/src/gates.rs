//! ReLU activation patterns, their generating vectors and pattern cones.
//!
//! A pattern `D = diag(1(Xg >= 0))` records which training rows a hidden unit
//! with weight `g` fires on; ties at zero count as active. The cone
//! `K(D) = {v : (2D - I) X v >= 0}` holds every weight vector that reproduces
//! the same pattern.

use std::collections::HashSet;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{CldError, Result};

/// Absolute tolerance used by [`gate_identity_check`].
pub const GATE_IDENTITY_TOL: f64 = 1e-12;

/// Per-stream RNG derived from a seed and a stream index.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatePattern {
    pub active: Vec<bool>,
    pub generator: Array1<f64>,
}

impl GatePattern {
    /// Pattern induced by `g` on the rows of `x`.
    pub fn from_generator(x: ArrayView2<'_, f64>, g: Array1<f64>) -> Self {
        let active = x.dot(&g).iter().map(|&s| s >= 0.0).collect();
        Self {
            active,
            generator: g,
        }
    }

    pub fn bitstring(&self) -> String {
        self.active.iter().map(|&a| if a { '1' } else { '0' }).collect()
    }

    pub fn parse_bits(bits: &str) -> Result<Vec<bool>> {
        bits.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(CldError::Model(format!("bad pattern character {other:?}"))),
            })
            .collect()
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateSet {
    pub patterns: Vec<GatePattern>,
    pub seed: u64,
    pub dedup: bool,
    /// How many requested patterns could not be drawn distinct within the retry budget.
    pub shortfall: usize,
}

impl GateSet {
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn d(&self) -> usize {
        self.patterns.first().map_or(0, |p| p.generator.len())
    }

    /// `n × P` matrix of 0/1 pattern indicators.
    pub fn mask_matrix(&self) -> ndarray::Array2<f64> {
        let n = self.patterns.first().map_or(0, |p| p.active.len());
        ndarray::Array2::from_shape_fn((n, self.len()), |(i, p)| {
            if self.patterns[p].active[i] {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Draws `p` standard-normal generators and records their patterns on `x`.
///
/// With `dedup`, draws continue until `p` distinct patterns are found or `8p`
/// draws are spent; the shortfall is recorded rather than treated as an error.
/// Draw `j` uses RNG stream `j`, so output does not depend on thread count.
pub fn sample_gates(x: ArrayView2<'_, f64>, p: usize, seed: u64, dedup: bool) -> Result<GateSet> {
    if p == 0 {
        return Err(CldError::Parameter("pattern count P must be >= 1".into()));
    }
    let d = x.ncols();
    let draw = |j: usize| {
        let mut rng = stream_rng(seed, j as u64);
        let g: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        GatePattern::from_generator(x, g)
    };

    if !dedup {
        let patterns = (0..p).into_par_iter().map(draw).collect();
        return Ok(GateSet {
            patterns,
            seed,
            dedup,
            shortfall: 0,
        });
    }

    let budget = 8 * p;
    let mut seen: HashSet<Vec<bool>> = HashSet::new();
    let mut patterns = Vec::with_capacity(p);
    let mut next = 0;
    while patterns.len() < p && next < budget {
        let batch_end = (next + p).min(budget);
        let batch: Vec<GatePattern> = (next..batch_end).into_par_iter().map(draw).collect();
        next = batch_end;
        for pat in batch {
            if patterns.len() == p {
                break;
            }
            if seen.insert(pat.active.clone()) {
                patterns.push(pat);
            }
        }
    }
    let shortfall = p - patterns.len();
    if shortfall > 0 {
        log::warn!(
            "only {} distinct activation patterns found in {budget} draws ({shortfall} short)",
            patterns.len()
        );
    }
    Ok(GateSet {
        patterns,
        seed,
        dedup,
        shortfall,
    })
}

/// The polyhedral cone `K(D)` as `n` half-space constraints `a_i · v >= 0`.
#[derive(Clone, Copy, Debug)]
pub struct ConeSpec<'a> {
    pub active: &'a [bool],
    pub x: ArrayView2<'a, f64>,
}

impl<'a> ConeSpec<'a> {
    pub fn new(pattern: &'a GatePattern, x: ArrayView2<'a, f64>) -> Self {
        Self::from_mask(&pattern.active, x)
    }

    pub fn from_mask(active: &'a [bool], x: ArrayView2<'a, f64>) -> Self {
        assert_eq!(active.len(), x.nrows(), "pattern length must match rows of X");
        Self { active, x }
    }

    fn sign(&self, i: usize) -> f64 {
        if self.active[i] {
            1.0
        } else {
            -1.0
        }
    }

    /// `(2D - I) X v`
    pub fn slacks(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut s = self.x.dot(&v);
        for (i, si) in s.iter_mut().enumerate() {
            *si *= self.sign(i);
        }
        s
    }
}

/// True iff `[Xv]_+ == D X v` elementwise within [`GATE_IDENTITY_TOL`].
pub fn gate_identity_check(cone: &ConeSpec<'_>, v: ArrayView1<'_, f64>) -> bool {
    let xv = cone.x.dot(&v);
    xv.iter().enumerate().all(|(i, &t)| {
        let relu = t.max(0.0);
        let gated = if cone.active[i] { t } else { 0.0 };
        (relu - gated).abs() <= GATE_IDENTITY_TOL
    })
}

/// `max(0, max_i -((2D - I) X v)_i)`; zero iff `v` lies in the cone.
pub fn cone_violation(cone: &ConeSpec<'_>, v: ArrayView1<'_, f64>) -> f64 {
    cone.slacks(v).iter().fold(0.0f64, |m, &s| m.max(-s))
}

#[derive(Clone, Debug)]
pub struct ConeProjection {
    pub point: Array1<f64>,
    pub converged: bool,
    pub cycles: usize,
}

pub const DEFAULT_PROJECTION_TOL: f64 = 1e-8;
pub const DEFAULT_PROJECTION_CYCLES: usize = 10_000;

/// Euclidean projection onto `K(D)` by Dykstra's cyclic projections over the
/// half-spaces `a_i · v >= 0`.
///
/// Stops once a full cycle moves the iterate by less than `tol` and the
/// remaining violation is at most `tol`. On budget exhaustion the last iterate
/// is returned with `converged = false`.
pub fn project_cone(
    cone: &ConeSpec<'_>,
    v: ArrayView1<'_, f64>,
    tol: f64,
    max_iters: usize,
) -> Result<ConeProjection> {
    if !(tol > 0.0) {
        return Err(CldError::Parameter(format!("projection tol must be > 0, got {tol}")));
    }
    let (n, d) = cone.x.dim();
    if v.len() != d {
        return Err(CldError::Shape(format!("vector of length {} for cone in R^{d}", v.len())));
    }
    if cone_violation(cone, v) == 0.0 {
        return Ok(ConeProjection {
            point: v.to_owned(),
            converged: true,
            cycles: 0,
        });
    }

    let rows: Vec<(Array1<f64>, f64)> = (0..n)
        .map(|i| {
            let a = cone.x.row(i).mapv(|t| t * cone.sign(i));
            let nrm2 = a.dot(&a);
            (a, nrm2)
        })
        .filter(|(_, nrm2)| *nrm2 > 0.0)
        .collect();

    let mut point = v.to_owned();
    let mut increments = vec![Array1::<f64>::zeros(d); rows.len()];
    let mut prev = point.clone();
    for cycle in 1..=max_iters {
        for ((a, nrm2), inc) in rows.iter().zip(increments.iter_mut()) {
            let y = &point + &*inc;
            let s = a.dot(&y);
            let projected = if s < 0.0 { &y - &(a * (s / nrm2)) } else { y.clone() };
            *inc = &y - &projected;
            point = projected;
        }
        let moved = (&point - &prev).mapv(|t| t * t).sum().sqrt();
        if moved < tol && cone_violation(cone, point.view()) <= tol {
            return Ok(ConeProjection {
                point,
                converged: true,
                cycles: cycle,
            });
        }
        prev.assign(&point);
    }
    Ok(ConeProjection {
        point,
        converged: false,
        cycles: max_iters,
    })
}

pub const ENUM_MAX_N: usize = 16;
pub const ENUM_MAX_D: usize = 4;

/// All full-dimensional cells of the arrangement `{x_i · v = 0}`, each with a
/// strictly interior witness generator.
///
/// Sign vectors are grown one hyperplane at a time; every extension is tested
/// by a small LP that maximizes the minimum slack over a box. Lower-dimensional
/// faces (including `v = 0`) are measure-zero and are not reported. Rows equal
/// to zero are active for every generator.
pub fn enumerate_patterns(x: ArrayView2<'_, f64>) -> Result<GateSet> {
    let (n, d) = x.dim();
    if n > ENUM_MAX_N || d > ENUM_MAX_D {
        return Err(CldError::Guard(format!(
            "exact pattern enumeration is limited to n <= {ENUM_MAX_N}, d <= {ENUM_MAX_D} (got n = {n}, d = {d}); \
             the number of cells grows like n^d, use sample_gates instead"
        )));
    }
    let scale = x
        .outer_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0f64, f64::max);
    let live: Vec<usize> = (0..n).filter(|&i| x.row(i).iter().any(|&t| t != 0.0)).collect();
    let eps = 1e-9 * scale.max(f64::MIN_POSITIVE);

    // (signs over live[..depth], witness)
    let mut cells: Vec<(Vec<f64>, Array1<f64>)> = vec![(Vec::new(), Array1::from_elem(d, 1.0))];
    for depth in 0..live.len() {
        let mut next = Vec::with_capacity(cells.len() * 2);
        for (signs, _) in &cells {
            for s in [1.0, -1.0] {
                let mut ext = signs.clone();
                ext.push(s);
                if let Some(w) = max_min_slack(x, &live[..=depth], &ext, eps) {
                    next.push((ext, w));
                }
            }
        }
        cells = next;
    }

    let mut patterns: Vec<GatePattern> = cells
        .into_iter()
        .map(|(_, w)| GatePattern::from_generator(x, w))
        .collect();
    patterns.sort_by(|a, b| b.active.cmp(&a.active));
    patterns.dedup_by(|a, b| a.active == b.active);
    Ok(GateSet {
        patterns,
        seed: 0,
        dedup: true,
        shortfall: 0,
    })
}

/// Maximizes `t` subject to `s_k x_{rows[k]} · v >= t`, `|v_j| <= 1`, `0 <= t <= 1`.
/// Returns a witness `v` when the optimum exceeds `eps`.
fn max_min_slack(x: ArrayView2<'_, f64>, rows: &[usize], signs: &[f64], eps: f64) -> Option<Array1<f64>> {
    let d = x.ncols();
    // variables: t, v+ (d), v- (d)
    let nv = 1 + 2 * d;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (&i, &s) in rows.iter().zip(signs) {
        let mut row = vec![0.0; nv];
        row[0] = 1.0;
        for j in 0..d {
            row[1 + j] = -s * x[[i, j]];
            row[1 + d + j] = s * x[[i, j]];
        }
        a.push(row);
        b.push(0.0);
    }
    for j in 0..d {
        let mut row = vec![0.0; nv];
        row[1 + j] = 1.0;
        row[1 + d + j] = 1.0;
        a.push(row);
        b.push(1.0);
    }
    let mut row = vec![0.0; nv];
    row[0] = 1.0;
    a.push(row);
    b.push(1.0);
    let mut c = vec![0.0; nv];
    c[0] = 1.0;

    let sol = simplex_max(&a, &b, &c)?;
    if sol[0] > eps {
        Some((0..d).map(|j| sol[1 + j] - sol[1 + d + j]).collect())
    } else {
        None
    }
}

/// Dense tableau simplex for `max c·x s.t. A x <= b, x >= 0` with `b >= 0`,
/// using Bland's rule. Returns `None` if unbounded.
pub(crate) fn simplex_max(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Option<Vec<f64>> {
    const PIVOT_EPS: f64 = 1e-12;
    let m = a.len();
    let nv = c.len();
    let width = nv + m + 1;
    let mut tab = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        tab[i][..nv].copy_from_slice(&a[i]);
        tab[i][nv + i] = 1.0;
        tab[i][width - 1] = b[i];
    }
    for j in 0..nv {
        tab[m][j] = -c[j];
    }
    let mut basis: Vec<usize> = (nv..nv + m).collect();

    for _ in 0..10_000 {
        let Some(enter) = (0..nv + m).find(|&j| tab[m][j] < -PIVOT_EPS) else {
            let mut x = vec![0.0; nv];
            for (i, &bv) in basis.iter().enumerate() {
                if bv < nv {
                    x[bv] = tab[i][width - 1];
                }
            }
            return Some(x);
        };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            let coef = tab[i][enter];
            if coef > PIVOT_EPS {
                let ratio = tab[i][width - 1] / coef;
                match leave {
                    Some((li, lr))
                        if ratio > lr + PIVOT_EPS
                            || ((ratio - lr).abs() <= PIVOT_EPS && basis[i] > basis[li]) => {}
                    _ => leave = Some((i, ratio)),
                }
            }
        }
        let (pr, _) = leave?;
        let piv = tab[pr][enter];
        for v in tab[pr].iter_mut() {
            *v /= piv;
        }
        let pivot_row = tab[pr].clone();
        for (i, row) in tab.iter_mut().enumerate() {
            if i != pr {
                let f = row[enter];
                if f != 0.0 {
                    for (v, p) in row.iter_mut().zip(&pivot_row) {
                        *v -= f * p;
                    }
                }
            }
        }
        basis[pr] = enter;
    }
    None
}

/// Upper bound on the number of regions of a central arrangement of `n`
/// hyperplanes in a rank-`r` space: `2 Σ_{k<r} C(n-1, k)`.
pub fn arrangement_bound(n: usize, r: usize) -> usize {
    if n == 0 {
        return 1;
    }
    let mut total = 0usize;
    let mut binom = 1usize; // C(n-1, 0)
    for k in 0..r.min(n) {
        total += binom;
        binom = binom * (n - 1 - k) / (k + 1);
    }
    2 * total
}
