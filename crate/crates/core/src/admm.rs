//! Consensus ADMM for the relaxed and exact convex programs.
//!
//! The fit variable `u` is coupled to a prox copy `z1` (group norm) and, in
//! exact mode, a cone copy `z2`, each through a scaled dual:
//!
//! ```text
//! u   <- argmin ½‖F u - Y‖² + ρ/2 Σ_c ‖u - z_c + λ_c‖²     (PCG on FᵀF + cρI)
//! z1  <- prox_{β/ρ · penalty}(u + λ1)
//! z2  <- Π_cones(u + λ2)
//! λ_c <- λ_c + u - z_c
//! ```

use std::io::Write;
use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::cvxprog::{group_prox, objective, project_blocks, ConvexProblem, Mode, PenaltyKind};
use crate::dataio::{FeatureMatrix, LabelSet};
use crate::error::{CldError, Result};
use crate::gates::{enumerate_patterns, sample_gates, GateSet, DEFAULT_PROJECTION_CYCLES};
use crate::head::{TrainMeta, TrainedHead};
use crate::linops::{pcg_solve, BlockWeights, GatedOperator, NormalOperator, PcgConfig, Preconditioner};

/// Which ADMM variable becomes the trained weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// The PCG fit variable `u`.
    #[default]
    Fit,
    /// The group-sparse prox copy `z1`.
    Prox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub rho: f64,
    pub beta: f64,
    pub admm_iters: usize,
    pub pcg: PcgConfig,
    pub mode: Mode,
    pub penalty: PenaltyKind,
    pub seed: u64,
    /// Early stop once both residuals fall to this level.
    pub stop_tol: Option<f64>,
    pub readout: Readout,
    pub projection_tol: f64,
    pub projection_max_iters: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1e-4,
            beta: 1e-3,
            admm_iters: 6,
            pcg: PcgConfig::default(),
            mode: Mode::Relaxed,
            penalty: PenaltyKind::L21,
            seed: 0,
            stop_tol: None,
            readout: Readout::Fit,
            projection_tol: 1e-8,
            projection_max_iters: DEFAULT_PROJECTION_CYCLES,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(CldError::Parameter(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(CldError::Parameter(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.admm_iters < 1 {
            return Err(CldError::Parameter("admm_iters must be >= 1".into()));
        }
        if let Some(t) = self.stop_tol {
            if !(t > 0.0) {
                return Err(CldError::Parameter(format!("stop_tol must be > 0, got {t}")));
            }
        }
        self.pcg.validate()
    }

    fn copies(&self) -> f64 {
        match self.mode {
            Mode::Relaxed => 1.0,
            Mode::Exact => 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    /// Objective at the prox copy `z1`.
    pub objective: f64,
    pub primal: f64,
    pub dual: f64,
    pub pcg_iters: usize,
}

#[derive(Clone, Debug)]
pub struct AdmmState {
    pub u: BlockWeights,
    pub z1: BlockWeights,
    pub z2: Option<BlockWeights>,
    pub lam1: BlockWeights,
    pub lam2: Option<BlockWeights>,
    pub history: Vec<IterRecord>,
    primal: f64,
    dual: f64,
}

impl AdmmState {
    pub fn zeros(prob: &ConvexProblem) -> Self {
        let z = prob.zeros();
        let exact = prob.mode == Mode::Exact;
        Self {
            u: z.clone(),
            z1: z.clone(),
            z2: exact.then(|| z.clone()),
            lam1: z.clone(),
            lam2: exact.then(|| z.clone()),
            history: Vec::new(),
            primal: 0.0,
            dual: 0.0,
        }
    }
}

/// `(primal, dual)` residuals from the most recent step.
pub fn residuals(state: &AdmmState) -> (f64, f64) {
    (state.primal, state.dual)
}

/// Primal `sqrt(Σ_c ‖u - z_c‖²)`; dual `ρ · sqrt(Σ_c ‖z_c - z_c^prev‖²)`.
fn compute_residuals(
    u: &BlockWeights,
    copies: [(&BlockWeights, &BlockWeights); 2],
    n_copies: usize,
    rho: f64,
) -> (f64, f64) {
    let mut primal = 0.0;
    let mut dual = 0.0;
    for (z, z_prev) in copies.into_iter().take(n_copies) {
        primal += u.sub(z).frob_norm().powi(2);
        dual += z.sub(z_prev).frob_norm().powi(2);
    }
    (primal.sqrt(), rho * dual.sqrt())
}

/// The fixed parts of an ADMM run: problem, configuration, preconditioner, `FᵀY`.
pub struct AdmmSolver<'a> {
    pub prob: &'a ConvexProblem,
    pub cfg: &'a AdmmConfig,
    precond: Preconditioner,
    fty: BlockWeights,
}

impl<'a> AdmmSolver<'a> {
    pub fn new(prob: &'a ConvexProblem, cfg: &'a AdmmConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode != prob.mode {
            return Err(CldError::Parameter(format!(
                "config mode {} does not match problem mode {}",
                cfg.mode, prob.mode
            )));
        }
        let shift = cfg.copies() * cfg.rho;
        let precond = Preconditioner::for_normal(&prob.op, shift, cfg.pcg.preconditioner, cfg.seed)?;
        let fty = prob.op.apply_ft(prob.y.view())?;
        Ok(Self {
            prob,
            cfg,
            precond,
            fty,
        })
    }

    pub fn step(&self, state: &mut AdmmState) -> Result<()> {
        let prob = self.prob;
        let cfg = self.cfg;
        let rho = cfg.rho;
        let iter = state.history.len() + 1;

        // (1) u-update
        let mut rhs = self.fty.w.clone();
        rhs.scaled_add(rho, &(&state.z1.w - &state.lam1.w));
        if let (Some(z2), Some(l2)) = (&state.z2, &state.lam2) {
            rhs.scaled_add(rho, &(&z2.w - &l2.w));
        }
        let rhs = BlockWeights { w: rhs }.to_flat();
        let normal = NormalOperator {
            op: &prob.op,
            shift: cfg.copies() * rho,
        };
        let warm = state.u.to_flat();
        let sol = pcg_solve(&normal, rhs.view(), Some(warm.view()), &self.precond, &cfg.pcg).map_err(|e| match e {
            CldError::Numeric { stage, iteration } => CldError::Training(format!(
                "ADMM iteration {iter}: non-finite value in {stage} at inner iteration {iteration}"
            )),
            other => other,
        })?;
        let (nb, d, k) = state.u.w.dim();
        state.u = BlockWeights::from_flat(sol.x.view(), nb, d, k);

        // (2) prox copy
        let z1_prev = std::mem::replace(&mut state.z1, group_prox(&state.u.add(&state.lam1), cfg.beta / rho, cfg.penalty));

        // (3) cone copy
        let z2_prev = match (&mut state.z2, &state.lam2) {
            (Some(z2), Some(l2)) => {
                let (proj, _) =
                    project_blocks(prob, &state.u.add(l2), cfg.projection_tol, cfg.projection_max_iters)?;
                Some(std::mem::replace(z2, proj))
            }
            _ => None,
        };

        // (4) duals
        state.lam1.w += &(&state.u.w - &state.z1.w);
        if let (Some(l2), Some(z2)) = (&mut state.lam2, &state.z2) {
            l2.w += &(&state.u.w - &z2.w);
        }

        let placeholder = BlockWeights::zeros(0, 0, 0);
        let (n_copies, second) = match (&state.z2, &z2_prev) {
            (Some(z2), Some(prev)) => (2, (z2, prev)),
            _ => (1, (&placeholder, &placeholder)),
        };
        let (primal, dual) = compute_residuals(&state.u, [(&state.z1, &z1_prev), second], n_copies, rho);
        if !primal.is_finite() || !dual.is_finite() {
            return Err(CldError::Training(format!("non-finite residual at ADMM iteration {iter}")));
        }
        state.primal = primal;
        state.dual = dual;

        let obj = objective(prob, &state.z1)?;
        state.history.push(IterRecord {
            iter,
            objective: obj.total,
            primal,
            dual,
            pcg_iters: sol.iters,
        });
        Ok(())
    }

    /// Runs up to `admm_iters` steps (fewer if `stop_tol` is met), writing one
    /// JSON line per iteration to `log` when given.
    pub fn run(&self, log: Option<&mut dyn Write>, log_timing: bool) -> Result<AdmmState> {
        let mut state = AdmmState::zeros(self.prob);
        let mut log = log;
        let start = Instant::now();
        for _ in 0..self.cfg.admm_iters {
            self.step(&mut state)?;
            let rec = *state.history.last().expect("just pushed");
            if let Some(sink) = log.as_deref_mut() {
                let mut line = serde_json::to_value(rec).expect("record serializes");
                if log_timing {
                    line["wall_ms"] = serde_json::json!(start.elapsed().as_secs_f64() * 1e3);
                }
                writeln!(sink, "{line}").map_err(|e| CldError::io("<training log>", e))?;
            }
            if let Some(tol) = self.cfg.stop_tol {
                if rec.primal <= tol && rec.dual <= tol {
                    break;
                }
            }
        }
        Ok(state)
    }

    /// Final weights per the configured readout; cone-projected in exact mode.
    pub fn readout(&self, state: &AdmmState) -> Result<BlockWeights> {
        let raw = match self.cfg.readout {
            Readout::Fit => state.u.clone(),
            Readout::Prox => state.z1.clone(),
        };
        match self.prob.mode {
            Mode::Relaxed => Ok(raw),
            Mode::Exact => {
                let tol = self.cfg.projection_tol.min(1e-10);
                let budget = self.cfg.projection_max_iters.max(100_000);
                let (proj, converged) = project_blocks(self.prob, &raw, tol, budget)?;
                if !converged {
                    log::warn!("final cone projection did not converge to {tol:e}");
                }
                Ok(proj)
            }
        }
    }
}

pub fn admm_step(solver: &AdmmSolver<'_>, state: &mut AdmmState) -> Result<()> {
    solver.step(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GateSource {
    Sampled { patterns: usize, seed: u64, dedup: bool },
    Enumerated,
}

impl GateSource {
    pub fn sampled(patterns: usize, seed: u64) -> Self {
        GateSource::Sampled {
            patterns,
            seed,
            dedup: true,
        }
    }

    pub fn build(&self, x: &FeatureMatrix) -> Result<GateSet> {
        match *self {
            GateSource::Sampled { patterns, seed, dedup } => sample_gates(x.view(), patterns, seed, dedup),
            GateSource::Enumerated => enumerate_patterns(x.view()),
        }
    }
}

/// Sensible pattern count: 10 for binary problems, 32 otherwise.
pub fn default_pattern_count(k: usize) -> usize {
    if k <= 2 {
        10
    } else {
        32
    }
}

pub struct TrainOptions<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub log_timing: bool,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            log: None,
            log_timing: false,
        }
    }
}

fn check_training_inputs(x: &FeatureMatrix, labels: &LabelSet) -> Result<Vec<String>> {
    if x.n() != labels.n() {
        return Err(CldError::Alignment(format!("{} feature rows but {} labels", x.n(), labels.n())));
    }
    if x.n() < labels.k() {
        return Err(CldError::Training(format!(
            "need at least K = {} examples, got {}",
            labels.k(),
            x.n()
        )));
    }
    let mut warnings = Vec::new();
    for (c, &count) in labels.class_counts().iter().enumerate() {
        if count == 0 {
            return Err(CldError::Training(format!(
                "class {c} ({:?}) has no training examples",
                labels.label(c)
            )));
        }
        if count < 2 {
            let msg = format!("class {c} ({:?}) has a single training example", labels.label(c));
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(warnings)
}

/// Builds the convex problem for `x`, `labels` and a fixed gate set.
pub fn build_problem(x: &FeatureMatrix, labels: &LabelSet, gates: &GateSet, cfg: &AdmmConfig) -> Result<ConvexProblem> {
    let op = GatedOperator::new(x.view().to_owned(), gates, labels.k(), cfg.mode == Mode::Exact)?;
    ConvexProblem::new(op, labels.one_hot(), cfg.beta, cfg.penalty, cfg.mode)
}

/// Samples gates, runs ADMM and assembles a certified head.
pub fn train(
    x: &FeatureMatrix,
    labels: &LabelSet,
    gate_source: &GateSource,
    cfg: &AdmmConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainedHead> {
    let warnings = check_training_inputs(x, labels)?;
    let gates = gate_source.build(x)?;
    let prob = build_problem(x, labels, &gates, cfg)?;
    let solver = AdmmSolver::new(&prob, cfg)?;
    let state = solver.run(opts.log, opts.log_timing)?;
    let weights = solver.readout(&state)?;
    let final_objective = objective(&prob, &weights)?;
    let (primal, dual) = residuals(&state);

    let p = gates.len();
    let (v, w) = split_weights(&weights, p, cfg.mode);
    let meta = TrainMeta {
        config: cfg.clone(),
        gate_source: gate_source.clone(),
        n_train: x.n(),
        iterations: state.history.len(),
        converged: cfg.stop_tol.is_some_and(|t| primal <= t && dual <= t),
        final_objective,
        history: state.history,
        warnings,
    };
    TrainedHead::new(gates, v, w, cfg.penalty, cfg.mode, labels.label_map().to_vec(), meta)
}

/// `(V, W)` blocks from solver weights; `W = 0` in relaxed mode.
pub fn split_weights(weights: &BlockWeights, p: usize, mode: Mode) -> (BlockWeights, BlockWeights) {
    let (_, d, k) = weights.w.dim();
    match mode {
        Mode::Relaxed => (weights.clone(), BlockWeights::zeros(p, d, k)),
        Mode::Exact => {
            let v = weights.w.slice(ndarray::s![..p, .., ..]).to_owned();
            let w = weights.w.slice(ndarray::s![p.., .., ..]).to_owned();
            (BlockWeights::from_array(v), BlockWeights::from_array(w))
        }
    }
}

/// Reassembles solver-layout weights from `(V, W)`.
pub fn join_weights(v: &BlockWeights, w: &BlockWeights, mode: Mode) -> BlockWeights {
    match mode {
        Mode::Relaxed => v.clone(),
        Mode::Exact => {
            let (p, d, k) = v.w.dim();
            let mut out = Array3::zeros((2 * p, d, k));
            out.slice_mut(ndarray::s![..p, .., ..]).assign(&v.w);
            out.slice_mut(ndarray::s![p.., .., ..]).assign(&w.w);
            BlockWeights { w: out }
        }
    }
}
