//! Command-line surface. `main.rs` parses arguments, sizes the thread pool and
//! maps the returned [`CliError`] to an exit code.
//!
//! Every output file is written through [`write_atomic`]. Wall-clock figures go
//! to stderr, or to files that are only written on request, so reruns with the
//! same flags produce byte-identical outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::admm::{build_problem, default_pattern_count, train, AdmmConfig, GateSource, Readout, TrainOptions};
use crate::cert::{certify_batch, gated_relu_gap, margin_gap_check, summarize, CertSummary, ExampleCertificate};
use crate::cvxprog::{Mode, PenaltyKind};
use crate::dataio::{
    load_manifest_full, pool_masked_mean, read_features, read_sequence, write_atomic, FeatureMatrix, LabelSet,
    ManifestData,
};
use crate::error::CldError;
use crate::gates::{arrangement_bound, enumerate_patterns, stream_rng, GatePattern};
use crate::head::{argmax, InferenceMode, TrainedHead};
use crate::linops::PreconditionerKind;
use crate::metrics::{evaluate, EvalReport};
use crate::oracle::{dense_solve_smallest, fista_solve, FistaConfig, DENSE_GUARD};
use crate::synth::{generate, split, subsample, SynthSpec, DEFAULT_FRACTIONS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Relative objective mismatch tolerated by oracle verification.
pub const VERIFY_TOL: f64 = 1e-4;
/// Largest `n·P·d` for which oracle verification runs FISTA.
pub const FISTA_VERIFY_GUARD: usize = 1_000_000;
/// Max-abs logit gap tolerated between gated and ReLU evaluation of an exact
/// head on its own training rows.
pub const EXACT_LOGIT_TOL: f64 = 1e-6;

pub const DEFAULT_EPS_GRID: [f64; 8] = [0.0, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, msg: msg.into() }
    }

    pub fn verification(msg: impl Into<String>) -> Self {
        Self { code: EXIT_VERIFY, msg: msg.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<CldError> for CliError {
    fn from(e: CldError) -> Self {
        let code = match e {
            CldError::CertificateMismatch { .. } => EXIT_VERIFY,
            CldError::Numeric { .. } | CldError::Training(_) => EXIT_FAILURE,
            _ => EXIT_USAGE,
        };
        Self { code, msg: e.to_string() }
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "cld", version, about = "Convex ReLU language-detection head with certificates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a head on a labeled manifest.
    Train(TrainArgs),
    /// Predict classes for feature rows or pooled sequence files.
    Predict(PredictArgs),
    /// Per-example certificates and a summary.
    Certify(CertifyArgs),
    /// Accuracy, confusion matrix and per-accent breakdown.
    Eval(EvalArgs),
    /// Generate a synthetic accented-language dataset.
    Synth(SynthArgs),
    /// Accuracy and certificates across training-set sizes.
    Bench(BenchArgs),
    /// Re-check a model file, optionally against its training data.
    Verify(VerifyArgs),
    /// Enumerate every activation pattern of a small feature matrix.
    GatesEnum(GatesEnumArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Relaxed,
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyArg {
    L21,
    Frobenius,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutArg {
    Fit,
    Prox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecondArg {
    Nystrom,
    Jacobi,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InferenceArg {
    Gated,
    Relu,
}

impl From<InferenceArg> for InferenceMode {
    fn from(a: InferenceArg) -> Self {
        match a {
            InferenceArg::Gated => InferenceMode::Gated,
            InferenceArg::Relu => InferenceMode::Relu,
        }
    }
}

/// Solver settings readable from a TOML or JSON config file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub beta: Option<f64>,
    pub rho: Option<f64>,
    pub admm_iters: Option<usize>,
    pub pcg_iters: Option<usize>,
    pub pcg_tol: Option<f64>,
    pub preconditioner: Option<PrecondArg>,
    pub nystrom_rank: Option<usize>,
    pub patterns: Option<usize>,
    pub enumerate_gates: Option<bool>,
    pub mode: Option<ModeArg>,
    pub penalty: Option<PenaltyArg>,
    pub readout: Option<ReadoutArg>,
    pub stop_tol: Option<f64>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CldError::io(path, e))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let parsed = if is_toml {
            toml::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    /// Fields set here win over `lower`.
    fn over(self, lower: RunConfig) -> RunConfig {
        RunConfig {
            beta: self.beta.or(lower.beta),
            rho: self.rho.or(lower.rho),
            admm_iters: self.admm_iters.or(lower.admm_iters),
            pcg_iters: self.pcg_iters.or(lower.pcg_iters),
            pcg_tol: self.pcg_tol.or(lower.pcg_tol),
            preconditioner: self.preconditioner.or(lower.preconditioner),
            nystrom_rank: self.nystrom_rank.or(lower.nystrom_rank),
            patterns: self.patterns.or(lower.patterns),
            enumerate_gates: self.enumerate_gates.or(lower.enumerate_gates),
            mode: self.mode.or(lower.mode),
            penalty: self.penalty.or(lower.penalty),
            readout: self.readout.or(lower.readout),
            stop_tol: self.stop_tol.or(lower.stop_tol),
            seed: self.seed.or(lower.seed),
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct SolverArgs {
    /// TOML or JSON file with solver settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub admm_iters: Option<usize>,
    #[arg(long)]
    pub pcg_iters: Option<usize>,
    #[arg(long)]
    pub pcg_tol: Option<f64>,
    #[arg(long, value_enum)]
    pub preconditioner: Option<PrecondArg>,
    #[arg(long)]
    pub nystrom_rank: Option<usize>,
    /// Number of sampled gate patterns (default 10 for K = 2, else 32).
    #[arg(long)]
    pub patterns: Option<usize>,
    /// Use every activation pattern instead of sampling (tiny inputs only).
    #[arg(long)]
    pub enumerate_gates: bool,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub penalty: Option<PenaltyArg>,
    #[arg(long, value_enum)]
    pub readout: Option<ReadoutArg>,
    /// Stop early once primal and dual residuals fall below this.
    #[arg(long)]
    pub stop_tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SolverArgs {
    fn flags(&self) -> RunConfig {
        RunConfig {
            beta: self.beta,
            rho: self.rho,
            admm_iters: self.admm_iters,
            pcg_iters: self.pcg_iters,
            pcg_tol: self.pcg_tol,
            preconditioner: self.preconditioner,
            nystrom_rank: self.nystrom_rank,
            patterns: self.patterns,
            enumerate_gates: self.enumerate_gates.then_some(true),
            mode: self.mode,
            penalty: self.penalty,
            readout: self.readout,
            stop_tol: self.stop_tol,
            seed: self.seed,
        }
    }

    fn merged(&self) -> CliResult<RunConfig> {
        let file = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(self.flags().over(file))
    }

    pub fn seed(&self) -> CliResult<u64> {
        Ok(self.merged()?.seed.unwrap_or(0))
    }

    /// Solver and gate settings for a `k`-class problem: flags, then the
    /// config file, then defaults.
    pub fn resolve(&self, k: usize) -> CliResult<(AdmmConfig, GateSource)> {
        let rc = self.merged()?;
        let mut cfg = AdmmConfig::default();
        let seed = rc.seed.unwrap_or(0);
        cfg.seed = seed;
        if let Some(v) = rc.beta {
            cfg.beta = v;
        }
        if let Some(v) = rc.rho {
            cfg.rho = v;
        }
        if let Some(v) = rc.admm_iters {
            cfg.admm_iters = v;
        }
        if let Some(v) = rc.pcg_iters {
            cfg.pcg.max_iters = v;
        }
        if let Some(v) = rc.pcg_tol {
            cfg.pcg.rel_tol = v;
        }
        let rank = match cfg.pcg.preconditioner {
            PreconditionerKind::Nystrom { rank } => rc.nystrom_rank.unwrap_or(rank),
            _ => rc.nystrom_rank.unwrap_or(20),
        };
        cfg.pcg.preconditioner = match rc.preconditioner.unwrap_or(PrecondArg::Nystrom) {
            PrecondArg::Nystrom => PreconditionerKind::Nystrom { rank },
            PrecondArg::Jacobi => PreconditionerKind::Jacobi,
            PrecondArg::Identity => PreconditionerKind::Identity,
        };
        if let Some(m) = rc.mode {
            cfg.mode = match m {
                ModeArg::Relaxed => Mode::Relaxed,
                ModeArg::Exact => Mode::Exact,
            };
        }
        if let Some(p) = rc.penalty {
            cfg.penalty = match p {
                PenaltyArg::L21 => PenaltyKind::L21,
                PenaltyArg::Frobenius => PenaltyKind::Frobenius,
            };
        }
        if let Some(r) = rc.readout {
            cfg.readout = match r {
                ReadoutArg::Fit => Readout::Fit,
                ReadoutArg::Prox => Readout::Prox,
            };
        }
        cfg.stop_tol = rc.stop_tol;
        cfg.validate()?;
        let gates = if rc.enumerate_gates.unwrap_or(false) {
            GateSource::Enumerated
        } else {
            let p = rc.patterns.unwrap_or_else(|| default_pattern_count(k));
            if p == 0 {
                return Err(CliError::usage("--patterns must be positive"));
            }
            GateSource::sampled(p, seed)
        };
        Ok((cfg, gates))
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model JSON to write.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Per-iteration JSON-lines log (default: the model path with `.log.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Add wall-clock milliseconds to each log line.
    #[arg(long)]
    pub log_timing: bool,
    /// Compare the final objective against an independent solver.
    #[arg(long)]
    pub verify: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One feature file, or sequence files with `--pool`.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Treat inputs as frame sequences and mean-pool their valid frames.
    #[arg(long)]
    pub pool: bool,
    /// Inference mode (default: gated for relaxed heads, relu for exact heads).
    #[arg(long, value_enum)]
    pub mode: Option<InferenceArg>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CertifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Per-example certificate CSV.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Summary JSON (default: the CSV path with `.summary.json`).
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub eps_grid: Option<Vec<f64>>,
    /// Encoder Lipschitz constant; adds audio-space radii.
    #[arg(long = "L-E", alias = "l-e")]
    pub l_e: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<InferenceArg>,
    /// Report JSON.
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub confusion_csv: Option<PathBuf>,
    #[arg(long)]
    pub accent_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory: the full set plus `train/`, `test/` and `val/`.
    #[arg(long, short)]
    pub out: PathBuf,
    /// TOML or JSON generator spec; flags take precedence.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub accents: Option<Vec<usize>>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub accent_spread: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub samples_per_accent: Option<usize>,
    /// Seed for the generator and the split.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Results directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Synthetic spec (TOML or JSON); the default spec when no data is given.
    #[arg(long, conflicts_with = "manifest")]
    pub spec: Option<PathBuf>,
    /// Training pool manifest; requires `--test-manifest`.
    #[arg(long, requires = "test_manifest")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [100usize, 500, 1000, 10000])]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub eps_grid: Option<Vec<f64>>,
    /// Also write per-phase wall-clock seconds to `timings.csv`.
    #[arg(long)]
    pub timings: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled data; enables margin and representation checks.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Re-solve the training problem with independent solvers (needs the
    /// training manifest).
    #[arg(long)]
    pub oracle: bool,
    /// Report JSON (default: stdout).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GatesEnumArgs {
    /// Feature file (CLDF or CSV).
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Certify(a) => cmd_certify(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::GatesEnum(a) => cmd_gates_enum(&a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn load_head(path: &Path) -> CliResult<TrainedHead> {
    Ok(TrainedHead::load(path)?)
}

fn check_labels(head: &TrainedHead, labels: &LabelSet) -> CliResult {
    if head.k() != labels.k() {
        return Err(CliError::usage(format!("model has {} classes, data has {}", head.k(), labels.k())));
    }
    if head.label_map.as_slice() != labels.label_map() {
        return Err(CliError::usage(format!(
            "label map mismatch: model {:?}, data {:?}",
            head.label_map,
            labels.label_map()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub admm_objective: f64,
    pub fista_objective: Option<f64>,
    pub dense_objective: Option<f64>,
    pub reference: f64,
    pub relative_mismatch: f64,
    pub passed: bool,
}

/// Re-solves the training problem of a relaxed head with FISTA (and the dense
/// solver when small enough) and compares objectives. `None` when the
/// instance is too large or the head is exact.
pub fn oracle_check(head: &TrainedHead, x: &FeatureMatrix, labels: &LabelSet) -> CliResult<Option<OracleReport>> {
    let cfg = &head.meta.config;
    if head.mode == Mode::Exact {
        log::warn!("oracle verification covers relaxed heads only; skipped");
        return Ok(None);
    }
    let size = x.n() * head.patterns() * x.d();
    if size > FISTA_VERIFY_GUARD {
        log::warn!("oracle verification skipped: n·P·d = {size} exceeds {FISTA_VERIFY_GUARD}");
        return Ok(None);
    }
    let prob = build_problem(x, labels, &head.gates, cfg)?;
    let fista = fista_solve(
        &prob,
        &FistaConfig {
            max_iters: 30_000,
            ..FistaConfig::default()
        },
    )?;
    let dense = if size <= DENSE_GUARD {
        Some(dense_solve_smallest(&prob)?.objective)
    } else {
        None
    };
    let admm = head.meta.final_objective.total;
    let reference = dense.map_or(fista.objective, |d| d.min(fista.objective));
    // Objective at S = 0 sets the scale when the optimum is (near) zero.
    let scale = 0.5 * prob.y.iter().map(|v| v * v).sum::<f64>();
    let denom = admm.abs().max(reference.abs()).max(1e-12 * scale).max(f64::MIN_POSITIVE);
    let mismatch = (admm - reference).abs() / denom;
    Ok(Some(OracleReport {
        admm_objective: admm,
        fista_objective: Some(fista.objective),
        dense_objective: dense,
        reference,
        relative_mismatch: mismatch,
        passed: mismatch <= VERIFY_TOL,
    }))
}

pub fn cmd_train(a: &TrainArgs) -> CliResult {
    let data = load_manifest_full(&a.manifest)?;
    let (cfg, gates) = a.solver.resolve(data.labels.k())?;
    let mut log_buf: Vec<u8> = Vec::new();
    let start = Instant::now();
    let head = train(
        &data.features,
        &data.labels,
        &gates,
        &cfg,
        TrainOptions {
            log: Some(&mut log_buf),
            log_timing: a.log_timing,
        },
    )?;
    eprintln!(
        "trained on {} rows: P = {}, objective {:.6e}, {:.3} s",
        data.features.n(),
        head.patterns(),
        head.meta.final_objective.total,
        start.elapsed().as_secs_f64()
    );
    head.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    write_atomic(&log_path, &log_buf)?;
    if a.verify {
        match oracle_check(&head, &data.features, &data.labels)? {
            Some(r) => {
                eprintln!("{}", serde_json::to_string(&r).expect("report serializes"));
                if !r.passed {
                    return Err(CliError::verification(format!(
                        "objective mismatch {:.3e} exceeds {VERIFY_TOL:e} (ADMM {:.10e}, oracle {:.10e})",
                        r.relative_mismatch, r.admm_objective, r.reference
                    )));
                }
            }
            None => eprintln!("verification skipped"),
        }
    }
    Ok(())
}

fn predict_inputs(a: &PredictArgs) -> CliResult<Array2<f64>> {
    if a.pool {
        let mut rows = Vec::with_capacity(a.input.len());
        for p in &a.input {
            let seq = read_sequence(p)?;
            rows.push(pool_masked_mean(&seq).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?);
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(CliError::usage(format!(
                "{} has frame dimension {}, expected {d}",
                a.input[bad].display(),
                rows[bad].len()
            )));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Ok(ndarray::stack(Axis(0), &views).expect("equal lengths"))
    } else {
        if a.input.len() != 1 {
            return Err(CliError::usage("several inputs need --pool; otherwise pass one feature file"));
        }
        Ok(read_features(&a.input[0])?.into_inner())
    }
}

fn fmt_logits(out: &mut String, logits: &Array1<f64>) {
    for v in logits {
        let _ = write!(out, ",{v}");
    }
}

pub fn cmd_predict(a: &PredictArgs) -> CliResult {
    let head = load_head(&a.model)?;
    let x = predict_inputs(a)?;
    if x.ncols() != head.d() {
        return Err(CliError::usage(format!(
            "input dimension {} does not match model dimension {}",
            x.ncols(),
            head.d()
        )));
    }
    let mode = a.mode.map_or(head.default_inference(), InferenceMode::from);
    let mut csv = String::from("id,pred_class,pred_label");
    for k in 0..head.k() {
        let _ = write!(csv, ",logit_{k}");
    }
    csv.push('\n');
    let mut latencies = Vec::with_capacity(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let t = Instant::now();
        let logits = head.predict(row, mode)?;
        let c = argmax(logits.view());
        let ms = t.elapsed().as_secs_f64() * 1e3;
        log::debug!("example {i}: {ms:.4} ms");
        latencies.push(ms);
        let _ = write!(csv, "{i},{c},{}", head.label_map[c]);
        fmt_logits(&mut csv, &logits);
        csv.push('\n');
    }
    write_atomic(&a.out, csv.as_bytes())?;
    if !latencies.is_empty() {
        let mut sorted = latencies.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = latencies.iter().sum::<f64>() / latencies.len() as f64;
        eprintln!(
            "latency per example (ms): mean {mean:.4}, median {:.4}, max {:.4} over {}",
            sorted[sorted.len() / 2],
            sorted[sorted.len() - 1],
            sorted.len()
        );
    }
    Ok(())
}

fn certificate_csv(certs: &[ExampleCertificate], labels: &[usize]) -> String {
    let mut out = String::from("id,pred,true,margin,radius_feature,radius_audio,certified\n");
    for (i, (c, y)) in certs.iter().zip(labels).enumerate() {
        let audio = c.radius_audio.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{i},{},{y},{},{},{audio},{}",
            c.pred, c.margin, c.radius_feature, c.certified
        );
    }
    out
}

#[derive(Serialize)]
struct CertifyReport<'a> {
    #[serde(flatten)]
    summary: &'a CertSummary,
    l_e: Option<f64>,
}

fn eps_grid(grid: &Option<Vec<f64>>) -> CliResult<Vec<f64>> {
    let g = grid.clone().unwrap_or_else(|| DEFAULT_EPS_GRID.to_vec());
    if g.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(CliError::usage("--eps-grid entries must be finite and non-negative"));
    }
    Ok(g)
}

pub fn cmd_certify(a: &CertifyArgs) -> CliResult {
    let head = load_head(&a.model)?;
    let data = load_manifest_full(&a.manifest)?;
    check_labels(&head, &data.labels)?;
    if data.features.d() != head.d() {
        return Err(CliError::usage(format!(
            "feature dimension {} does not match model dimension {}",
            data.features.d(),
            head.d()
        )));
    }
    let grid = eps_grid(&a.eps_grid)?;
    let ys = data.labels.class_ids();
    let certs = certify_batch(&head, data.features.view(), ys, a.l_e)?;
    let summary = summarize(&head, data.features.view(), ys, &certs, &grid)?;
    write_atomic(&a.out, certificate_csv(&certs, ys).as_bytes())?;
    let summary_path = a.summary.clone().unwrap_or_else(|| a.out.with_extension("summary.json"));
    write_json(&summary_path, &CertifyReport { summary: &summary, l_e: a.l_e })?;
    eprintln!(
        "certified {:.4} of {} rows; median radius {:.4e}; B_l21 {:.4e}",
        summary.certified_fraction, summary.n, summary.median_radius, summary.b_l21
    );
    Ok(())
}

fn predictions(head: &TrainedHead, x: &FeatureMatrix, mode: InferenceMode) -> CliResult<Vec<usize>> {
    let logits = head.predict_batch(x.view(), mode)?;
    Ok(logits.rows().into_iter().map(argmax).collect())
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult {
    let head = load_head(&a.model)?;
    let data = load_manifest_full(&a.manifest)?;
    check_labels(&head, &data.labels)?;
    let mode = a.mode.map_or(head.default_inference(), InferenceMode::from);
    let preds = predictions(&head, &data.features, mode)?;
    let report = evaluate(&preds, &data.labels, data.accents.as_deref())?;
    report.write_json(&a.out)?;
    if let Some(p) = &a.confusion_csv {
        write_atomic(p, report.confusion_csv().as_bytes())?;
    }
    if let Some(p) = &a.accent_csv {
        let csv = report
            .accent_csv()
            .ok_or_else(|| CliError::usage("--accent-csv needs a manifest with accents"))?;
        write_atomic(p, csv.as_bytes())?;
    }
    eprintln!("accuracy {:.4} on {} rows", report.accuracy, report.n);
    Ok(())
}

fn load_spec(path: &Path) -> CliResult<SynthSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| CldError::io(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml")) {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::usage(format!("spec {}: {e}", path.display())))
}

#[derive(Serialize)]
struct SynthReport<'a> {
    spec: &'a SynthSpec,
    n: usize,
    nearest_center_accuracy: f64,
    train: usize,
    test: usize,
    val: usize,
    stratified: bool,
}

fn write_subset(dir: &Path, data: &crate::synth::SynthData, idx: &[usize], accents: &[String]) -> CliResult {
    let x = data.x.select_rows(idx)?;
    let y = data.labels.select(idx)?;
    let acc: Vec<String> = idx.iter().map(|&i| accents[i].clone()).collect();
    crate::synth::write_dataset(dir, &x, &y, Some(&acc))?;
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult {
    let mut spec = match &a.spec {
        Some(p) => load_spec(p)?,
        None => SynthSpec::default(),
    };
    if let Some(k) = a.k {
        spec.k = k;
        if a.accents.is_none() && spec.accents_per_language.len() != k {
            spec.accents_per_language = vec![spec.accents_per_language.first().copied().unwrap_or(1); k];
        }
    }
    if let Some(v) = &a.accents {
        spec.accents_per_language = v.clone();
    }
    if let Some(v) = a.d {
        spec.d = v;
    }
    if let Some(v) = a.separation {
        spec.language_separation = v;
    }
    if let Some(v) = a.accent_spread {
        spec.accent_spread = v;
    }
    if let Some(v) = a.noise_sigma {
        spec.noise_sigma = v;
    }
    if let Some(v) = a.samples_per_accent {
        spec.samples_per_accent = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    let data = generate(&spec)?;
    let accents = data.accent_labels();
    crate::synth::write_dataset(&a.out, &data.x, &data.labels, Some(&accents))?;
    let sp = split(data.labels.class_ids(), DEFAULT_FRACTIONS, spec.seed)?;
    for (name, idx) in [("train", &sp.train), ("test", &sp.test), ("val", &sp.val)] {
        if !idx.is_empty() {
            write_subset(&a.out.join(name), &data, idx, &accents)?;
        }
    }
    write_json(
        &a.out.join("synth.json"),
        &SynthReport {
            spec: &spec,
            n: data.x.n(),
            nearest_center_accuracy: data.nearest_center_accuracy,
            train: sp.train.len(),
            test: sp.test.len(),
            val: sp.val.len(),
            stratified: sp.stratified,
        },
    )?;
    eprintln!(
        "wrote {} samples ({} train / {} test / {} val); nearest-center accuracy {:.4}",
        data.x.n(),
        sp.train.len(),
        sp.test.len(),
        sp.val.len(),
        data.nearest_center_accuracy
    );
    Ok(())
}

/// Training pool and held-out set for a benchmark.
pub struct BenchData {
    pub pool: ManifestData,
    pub test: ManifestData,
}

fn bench_data(a: &BenchArgs, seed: u64) -> CliResult<BenchData> {
    if let Some(m) = &a.manifest {
        let test_path = a.test_manifest.as_ref().expect("clap enforces --test-manifest");
        let pool = load_manifest_full(m)?;
        let test = load_manifest_full(test_path)?;
        if pool.labels.label_map() != test.labels.label_map() {
            return Err(CliError::usage("train and test manifests have different label maps"));
        }
        return Ok(BenchData { pool, test });
    }
    let spec = match &a.spec {
        Some(p) => load_spec(p)?,
        None => SynthSpec::default(),
    };
    let data = generate(&spec)?;
    let accents = data.accent_labels();
    let sp = split(data.labels.class_ids(), DEFAULT_FRACTIONS, seed)?;
    let take = |idx: &[usize]| -> CliResult<ManifestData> {
        Ok(ManifestData {
            features: data.x.select_rows(idx)?,
            labels: data.labels.select(idx)?,
            accents: Some(idx.iter().map(|&i| accents[i].clone()).collect()),
        })
    };
    Ok(BenchData {
        pool: take(&sp.train)?,
        test: take(&sp.test)?,
    })
}

/// Requested sizes capped to the pool; sizes that collapse onto an earlier
/// one are dropped. Returns `(requested, effective)` pairs.
pub fn plan_sizes(sizes: &[usize], available: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &s in sizes {
        let eff = s.min(available);
        if s == 0 {
            log::warn!("skipping training size 0");
            continue;
        }
        if s > available {
            log::warn!("training size {s} exceeds the {available} available rows; capped");
        }
        if out.iter().any(|&(_, e)| e == eff) {
            log::warn!("training size {s} duplicates an earlier size after capping; skipped");
            continue;
        }
        out.push((s, eff));
    }
    out
}

#[derive(Serialize)]
struct SizeMetrics<'a> {
    requested_size: usize,
    n_train: usize,
    n_test: usize,
    objective: f64,
    iterations: usize,
    patterns: usize,
    inference: InferenceMode,
    eval: &'a EvalReport,
    cert: &'a CertSummary,
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult {
    let seed = a.solver.seed()?;
    let data = bench_data(a, seed)?;
    let (cfg, gates) = a.solver.resolve(data.pool.labels.k())?;
    let grid = eps_grid(&a.eps_grid)?;
    let plan = plan_sizes(&a.sizes, data.pool.features.n());
    if plan.is_empty() {
        return Err(CliError::usage("no usable training sizes"));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| CldError::io(&a.out, e))?;

    let mut curve = String::from(
        "requested_size,n_train,accuracy,relu_accuracy,certified_fraction,mean_radius,median_radius,b_l21\n",
    );
    let mut accent_rows = String::from("n_train,accent,language,n,correct,accuracy\n");
    let mut timings = String::from("n_train,phase,seconds\n");
    let test = &data.test;
    for (requested, n_train) in plan {
        let idx = subsample(data.pool.labels.class_ids(), &(0..data.pool.features.n()).collect::<Vec<_>>(), n_train, seed)?;
        let x = data.pool.features.select_rows(&idx)?;
        let y = data.pool.labels.select(&idx)?;

        let t = Instant::now();
        let head = train(&x, &y, &gates, &cfg, TrainOptions::default())?;
        let t_train = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let mode = head.default_inference();
        let preds = predictions(&head, &test.features, mode)?;
        let report = evaluate(&preds, &test.labels, test.accents.as_deref())?;
        let t_eval = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let ys = test.labels.class_ids();
        let certs = certify_batch(&head, test.features.view(), ys, None)?;
        let summary = summarize(&head, test.features.view(), ys, &certs, &grid)?;
        let t_cert = t.elapsed().as_secs_f64();

        write_json(
            &a.out.join(format!("size_{n_train}")).join("metrics.json"),
            &SizeMetrics {
                requested_size: requested,
                n_train,
                n_test: test.features.n(),
                objective: head.meta.final_objective.total,
                iterations: head.meta.iterations,
                patterns: head.patterns(),
                inference: mode,
                eval: &report,
                cert: &summary,
            },
        )?;
        let _ = writeln!(
            curve,
            "{requested},{n_train},{},{},{},{},{},{}",
            report.accuracy,
            summary.relu_accuracy,
            summary.certified_fraction,
            summary.mean_radius,
            summary.median_radius,
            summary.b_l21
        );
        if let Some(pa) = &report.per_accent {
            for (acc, s) in pa {
                let _ = writeln!(accent_rows, "{n_train},{acc},{},{},{},{}", s.language, s.n, s.correct, s.accuracy);
            }
        }
        for (phase, secs) in [("train", t_train), ("evaluate", t_eval), ("certify", t_cert)] {
            let _ = writeln!(timings, "{n_train},{phase},{secs}");
        }
        eprintln!(
            "size {n_train}: accuracy {:.4}, certified {:.4}; train {t_train:.2} s, evaluate {t_eval:.2} s, certify {t_cert:.2} s",
            report.accuracy, summary.certified_fraction
        );
    }
    write_atomic(&a.out.join("accuracy_vs_size.csv"), curve.as_bytes())?;
    if test.accents.is_some() {
        write_atomic(&a.out.join("per_accent.csv"), accent_rows.as_bytes())?;
    }
    if a.timings {
        write_atomic(&a.out.join("timings.csv"), timings.as_bytes())?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub model: PathBuf,
    pub passed: bool,
    pub checks: Vec<Check>,
}

/// True when the stored gate patterns are exactly the patterns of `x`, i.e.
/// `x` is the training matrix.
fn is_training_data(head: &TrainedHead, x: &FeatureMatrix) -> bool {
    head.gates.patterns.iter().all(|p| {
        p.active.len() == x.n() && GatePattern::from_generator(x.view(), p.generator.clone()).active == p.active
    })
}

pub fn cmd_verify(a: &VerifyArgs) -> CliResult {
    // Loading recomputes the certificate bundle and rejects a mismatch.
    let head = load_head(&a.model)?;
    let mut checks = vec![Check {
        name: "certificate_recomputed".into(),
        passed: true,
        detail: serde_json::json!({
            "b_l21": head.cert.b_l21,
            "b_fro_scaled": head.cert.b_fro_scaled,
            "b_amgm": head.cert.b_amgm,
        }),
    }];
    checks.push(Check {
        name: "bound_ordering".into(),
        passed: head.cert.b_l21 <= head.cert.b_fro_scaled && head.cert.b_l21 <= head.cert.b_amgm,
        detail: serde_json::Value::Null,
    });
    if a.oracle && a.manifest.is_none() {
        return Err(CliError::usage("--oracle needs --manifest with the training data"));
    }
    if let Some(m) = &a.manifest {
        let data = load_manifest_full(m)?;
        check_labels(&head, &data.labels)?;
        if data.features.d() != head.d() {
            return Err(CliError::usage("feature dimension does not match the model"));
        }
        let x = &data.features;
        let ys = data.labels.class_ids();

        let mut failures = 0usize;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..x.n() {
            let mut rng = stream_rng(a.seed, 0x7_0000 + i as u64);
            let delta: Array1<f64> = (0..x.d()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let g = margin_gap_check(&head, x.row(i), ys[i], delta.view())?;
            failures += usize::from(!g.holds);
            worst = worst.max(g.rhs - g.lhs);
        }
        checks.push(Check {
            name: "margin_gap".into(),
            passed: failures == 0,
            detail: serde_json::json!({ "rows": x.n(), "failures": failures, "worst_slack": worst }),
        });

        let training = is_training_data(&head, x);
        if head.mode == Mode::Exact && training {
            let gap = gated_relu_gap(&head, x.view())?;
            checks.push(Check {
                name: "exact_representation".into(),
                passed: gap.max_abs_logit_gap <= EXACT_LOGIT_TOL,
                detail: serde_json::to_value(&gap).expect("gap serializes"),
            });
        }
        if a.oracle {
            if !training {
                return Err(CliError::usage("--oracle needs the training manifest the model was fit on"));
            }
            if let Some(r) = oracle_check(&head, x, &data.labels)? {
                checks.push(Check {
                    name: "oracle_objective".into(),
                    passed: r.passed,
                    detail: serde_json::to_value(&r).expect("report serializes"),
                });
            }
        }
    }
    let report = VerifyReport {
        model: a.model.clone(),
        passed: checks.iter().all(|c| c.passed),
        checks,
    };
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::verification(format!("failed checks: {}", failed.join(", "))))
    }
}

#[derive(Serialize)]
struct EnumReport {
    n: usize,
    d: usize,
    rank: usize,
    count: usize,
    arrangement_bound: usize,
    patterns: Vec<String>,
    generators: Vec<Vec<f64>>,
}

fn numerical_rank(x: &FeatureMatrix) -> usize {
    let m = nalgebra::DMatrix::from_fn(x.n(), x.d(), |i, j| x.view()[[i, j]]);
    let sv = m.singular_values();
    let top = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > top * 1e-10 * (x.n().max(x.d()) as f64)).count()
}

pub fn cmd_gates_enum(a: &GatesEnumArgs) -> CliResult {
    let x = read_features(&a.features)?;
    let gates = enumerate_patterns(x.view())?;
    let rank = numerical_rank(&x);
    let report = EnumReport {
        n: x.n(),
        d: x.d(),
        rank,
        count: gates.len(),
        arrangement_bound: arrangement_bound(x.n(), rank),
        patterns: gates.patterns.iter().map(|p| p.bitstring()).collect(),
        generators: gates.patterns.iter().map(|p| p.generator.to_vec()).collect(),
    };
    write_json(&a.out, &report)?;
    eprintln!("{} patterns (bound {})", report.count, report.arrangement_bound);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("cld").chain(args.iter().copied())).unwrap()
    }

    fn solver_of(cli: Cli) -> SolverArgs {
        match cli.command {
            Command::Train(a) => a.solver,
            Command::Bench(a) => a.solver,
            _ => panic!("no solver args"),
        }
    }

    #[test]
    fn defaults_follow_class_count() {
        let s = solver_of(parse(&["train", "--manifest", "m.json", "--out", "o.json"]));
        let (cfg, gates) = s.resolve(2).unwrap();
        assert_eq!((cfg.rho, cfg.beta, cfg.admm_iters, cfg.pcg.max_iters), (1e-4, 1e-3, 6, 32));
        assert_eq!(cfg.pcg.preconditioner, PreconditionerKind::Nystrom { rank: 20 });
        assert_eq!(gates, GateSource::sampled(10, 0));
        assert_eq!(s.resolve(5).unwrap().1, GateSource::sampled(32, 0));
    }

    #[test]
    fn flags_beat_config_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("run.toml");
        std::fs::write(&toml_path, "rho = 0.5\nbeta = 0.2\npatterns = 7\nmode = \"exact\"\n").unwrap();
        let cfg_arg = toml_path.to_str().unwrap();
        let s = solver_of(parse(&["train", "--manifest", "m", "--out", "o", "--config", cfg_arg, "--beta", "0.3"]));
        let (cfg, gates) = s.resolve(3).unwrap();
        assert_eq!(cfg.beta, 0.3);
        assert_eq!(cfg.rho, 0.5);
        assert_eq!(cfg.mode, Mode::Exact);
        assert_eq!(cfg.admm_iters, 6);
        assert_eq!(gates, GateSource::sampled(7, 0));

        let json_path = dir.path().join("run.json");
        std::fs::write(&json_path, r#"{"admm_iters": 9, "preconditioner": "jacobi", "seed": 4}"#).unwrap();
        let s = solver_of(parse(&["train", "--manifest", "m", "--out", "o", "--config", json_path.to_str().unwrap()]));
        let (cfg, gates) = s.resolve(2).unwrap();
        assert_eq!(cfg.admm_iters, 9);
        assert_eq!(cfg.pcg.preconditioner, PreconditionerKind::Jacobi);
        assert_eq!(gates, GateSource::sampled(10, 4));

        std::fs::write(&json_path, r#"{"rhoo": 1}"#).unwrap();
        let s = solver_of(parse(&["train", "--manifest", "m", "--out", "o", "--config", json_path.to_str().unwrap()]));
        assert_eq!(s.resolve(2).unwrap_err().code, EXIT_USAGE);
    }

    #[test]
    fn invalid_solver_values_are_usage_errors() {
        let s = solver_of(parse(&["train", "--manifest", "m", "--out", "o", "--rho=-1"]));
        assert_eq!(s.resolve(2).unwrap_err().code, EXIT_USAGE);
        let s = solver_of(parse(&["train", "--manifest", "m", "--out", "o", "--patterns", "0"]));
        assert_eq!(s.resolve(2).unwrap_err().code, EXIT_USAGE);
    }

    #[test]
    fn size_plan_caps_and_dedups() {
        assert_eq!(
            plan_sizes(&[100, 500, 1000, 10000], 9600),
            vec![(100, 100), (500, 500), (1000, 1000), (10000, 9600)]
        );
        assert_eq!(plan_sizes(&[100], 50), vec![(100, 50)]);
        assert_eq!(plan_sizes(&[60, 100, 0], 50), vec![(60, 50)]);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let io = CldError::io("x", std::io::Error::other("boom"));
        assert_eq!(CliError::from(io).code, EXIT_USAGE);
        let mismatch = CldError::CertificateMismatch {
            field: "b_l21",
            stored: 1.0,
            recomputed: 2.0,
        };
        assert_eq!(CliError::from(mismatch).code, EXIT_VERIFY);
        assert_eq!(CliError::from(CldError::Training("x".into())).code, EXIT_FAILURE);
    }

    #[test]
    fn bench_sizes_and_certify_flags_parse() {
        match parse(&["bench", "--out", "d", "--sizes", "100"]).command {
            Command::Bench(a) => assert_eq!(a.sizes, vec![100]),
            _ => unreachable!(),
        }
        match parse(&["certify", "--model", "m", "--manifest", "x", "--out", "c", "--L-E", "2", "--eps-grid", "0,0.5"]).command {
            Command::Certify(a) => {
                assert_eq!(a.l_e, Some(2.0));
                assert_eq!(a.eps_grid, Some(vec![0.0, 0.5]));
            }
            _ => unreachable!(),
        }
        assert!(Cli::try_parse_from(["cld", "bench", "--out", "d", "--manifest", "m"]).is_err());
    }
}
