//! The trained detection head: gated and ReLU inference, the mapping from
//! convex blocks to an explicit two-layer ReLU network, margins, and the model
//! file format.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::admm::{AdmmConfig, GateSource, IterRecord};
use crate::cert::{compute_bundle, CertificateBundle};
use crate::cvxprog::{loss, Mode, ObjectiveValue, PenaltyKind};
use crate::dataio::write_atomic;
use crate::error::{CldError, Result};
use crate::gates::{GatePattern, GateSet};
use crate::linops::{BlockWeights, GatedOperator};

pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// `Σ_p 1(g_p · h >= 0) · h · (V_p - W_p)`
    Gated,
    /// `Σ_p [h · V_p]_+ - [h · W_p]_+`
    Relu,
}

impl std::str::FromStr for InferenceMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gated" => Ok(InferenceMode::Gated),
            "relu" => Ok(InferenceMode::Relu),
            other => Err(format!("unknown inference mode {other:?} (expected gated|relu)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub config: AdmmConfig,
    pub gate_source: GateSource,
    pub n_train: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: ObjectiveValue,
    pub history: Vec<IterRecord>,
    pub warnings: Vec<String>,
}

/// One hidden unit `a [u · h]_+`.
#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub u: Array1<f64>,
    pub a: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReluNetwork {
    pub atoms: Vec<Atom>,
    pub d: usize,
    pub k: usize,
}

impl ReluNetwork {
    pub fn width(&self) -> usize {
        self.atoms.len()
    }

    /// Logits for every row of `x`.
    pub fn eval_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = x.nrows();
        if self.atoms.is_empty() {
            return Array2::zeros((n, self.k));
        }
        let u = Array2::from_shape_fn((self.d, self.width()), |(j, m)| self.atoms[m].u[j]);
        let a = Array2::from_shape_fn((self.width(), self.k), |(m, c)| self.atoms[m].a[c]);
        let hidden = x.dot(&u).mapv(|t| t.max(0.0));
        hidden.dot(&a)
    }

    pub fn eval(&self, h: ArrayView1<'_, f64>) -> Array1<f64> {
        self.eval_batch(h.insert_axis(Axis(0))).row(0).to_owned()
    }

    /// Rescales every atom to `‖u‖ = ‖a‖` without changing the function.
    pub fn balanced(&self) -> Self {
        let atoms = self
            .atoms
            .iter()
            .map(|at| {
                let nu = at.u.dot(&at.u).sqrt();
                let na = at.a.dot(&at.a).sqrt();
                if nu == 0.0 || na == 0.0 {
                    return at.clone();
                }
                let c = (na / nu).sqrt();
                Atom {
                    u: &at.u * c,
                    a: &at.a / c,
                }
            })
            .collect();
        Self {
            atoms,
            d: self.d,
            k: self.k,
        }
    }
}

/// `½ ‖f(X) - Y‖² + β/2 Σ_j (‖u_j‖² + ‖a_j‖²)`
pub fn nonconvex_objective(net: &ReluNetwork, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, beta: f64) -> f64 {
    let pred = net.eval_batch(x);
    let reg: f64 = net.atoms.iter().map(|at| at.u.dot(&at.u) + at.a.dot(&at.a)).sum();
    loss(pred.view(), y) + 0.5 * beta * reg
}

/// One atom per nonzero column: `(V_{p,k}, +e_k)` and `(W_{p,k}, -e_k)`.
pub fn relu_from_blocks(v: &BlockWeights, w: &BlockWeights) -> ReluNetwork {
    let (p, d, k) = v.w.dim();
    let mut atoms = Vec::new();
    for (blocks, sign) in [(v, 1.0), (w, -1.0)] {
        for b in 0..p {
            for c in 0..k {
                let u = blocks.w.slice(ndarray::s![b, .., c]).to_owned();
                if u.iter().any(|&t| t != 0.0) {
                    let mut a = Array1::zeros(k);
                    a[c] = sign;
                    atoms.push(Atom { u, a });
                }
            }
        }
    }
    ReluNetwork { atoms, d, k }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedHead {
    pub gates: GateSet,
    pub v: BlockWeights,
    pub w: BlockWeights,
    pub penalty_kind: PenaltyKind,
    pub mode: Mode,
    pub label_map: Vec<String>,
    pub cert: CertificateBundle,
    pub meta: TrainMeta,
    relu: ReluNetwork,
}

impl TrainedHead {
    pub fn new(
        gates: GateSet,
        v: BlockWeights,
        w: BlockWeights,
        penalty_kind: PenaltyKind,
        mode: Mode,
        label_map: Vec<String>,
        meta: TrainMeta,
    ) -> Result<Self> {
        let p = gates.len();
        let d = gates.d();
        let k = label_map.len();
        for (name, b) in [("V", &v), ("W", &w)] {
            if b.w.dim() != (p, d, k) {
                return Err(CldError::Shape(format!(
                    "{name} blocks {:?}, expected ({p}, {d}, {k})",
                    b.w.dim()
                )));
            }
            if b.w.iter().any(|t| !t.is_finite()) {
                return Err(CldError::Model(format!("non-finite entry in {name}")));
            }
        }
        let relu = relu_from_blocks(&v, &w);
        let cert = compute_bundle(&v, &w, &relu, penalty_kind);
        Ok(Self {
            gates,
            v,
            w,
            penalty_kind,
            mode,
            label_map,
            cert,
            meta,
            relu,
        })
    }

    /// Head assembled from given weights, with empty training metadata.
    pub fn from_weights(
        gates: GateSet,
        v: BlockWeights,
        w: BlockWeights,
        penalty_kind: PenaltyKind,
        mode: Mode,
        label_map: Vec<String>,
    ) -> Result<Self> {
        let meta = TrainMeta {
            config: AdmmConfig {
                mode,
                penalty: penalty_kind,
                seed: gates.seed,
                ..Default::default()
            },
            gate_source: GateSource::Sampled {
                patterns: gates.len(),
                seed: gates.seed,
                dedup: gates.dedup,
            },
            n_train: 0,
            iterations: 0,
            converged: false,
            final_objective: ObjectiveValue {
                total: 0.0,
                fit: 0.0,
                penalty: 0.0,
                cone_violation: 0.0,
            },
            history: Vec::new(),
            warnings: Vec::new(),
        };
        Self::new(gates, v, w, penalty_kind, mode, label_map, meta)
    }

    pub fn d(&self) -> usize {
        self.gates.d()
    }

    pub fn k(&self) -> usize {
        self.label_map.len()
    }

    pub fn patterns(&self) -> usize {
        self.gates.len()
    }

    pub fn default_inference(&self) -> InferenceMode {
        match self.mode {
            Mode::Relaxed => InferenceMode::Gated,
            Mode::Exact => InferenceMode::Relu,
        }
    }

    pub fn to_relu(&self) -> ReluNetwork {
        self.relu.clone()
    }

    pub fn relu_network(&self) -> &ReluNetwork {
        &self.relu
    }

    /// `d × P` matrix of gate generators.
    pub fn generator_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.d(), self.patterns()), |(j, p)| self.gates.patterns[p].generator[j])
    }

    pub fn predict_batch(&self, x: ArrayView2<'_, f64>, mode: InferenceMode) -> Result<Array2<f64>> {
        if x.ncols() != self.d() {
            return Err(CldError::Shape(format!(
                "input dimension {} does not match head dimension {}",
                x.ncols(),
                self.d()
            )));
        }
        match mode {
            InferenceMode::Relu => Ok(self.relu.eval_batch(x)),
            InferenceMode::Gated => {
                let masks = x.dot(&self.generator_matrix()).mapv(|t| if t >= 0.0 { 1.0 } else { 0.0 });
                let op = GatedOperator::from_masks(x.to_owned(), masks, self.k(), false)?;
                let diff = BlockWeights {
                    w: &self.v.w - &self.w.w,
                };
                op.apply_f(&diff)
            }
        }
    }

    pub fn predict(&self, h: ArrayView1<'_, f64>, mode: InferenceMode) -> Result<Array1<f64>> {
        Ok(self.predict_batch(h.insert_axis(Axis(0)), mode)?.row(0).to_owned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&ModelFile::from_head(self)).expect("model serializes");
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CldError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from_head(self)).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CldError::Model(format!("invalid JSON: {e}")))?;
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MODEL_VERSION as u64 => {}
            Some(v) => {
                return Err(CldError::Version {
                    found: v as u32,
                    expected: MODEL_VERSION,
                })
            }
            None => return Err(CldError::Model("missing version field".into())),
        }
        let file: ModelFile =
            serde_json::from_value(raw).map_err(|e| CldError::Model(format!("malformed model: {e}")))?;
        file.into_head()
    }
}

pub fn save_model(head: &TrainedHead, path: &Path) -> Result<()> {
    head.save(path)
}

pub fn load_model(path: &Path) -> Result<TrainedHead> {
    TrainedHead::load(path)
}

/// Lowest index wins ties.
pub fn argmax(logits: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = k;
        }
    }
    best
}

/// `f_y - max_{k != y} f_k`
pub fn margin(logits: ArrayView1<'_, f64>, y: usize) -> f64 {
    assert!(logits.len() >= 2, "margin needs at least two classes");
    let runner_up = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[y] - runner_up
}

#[derive(Serialize, Deserialize)]
struct GatesFile {
    seed: u64,
    dedup: bool,
    shortfall: usize,
    generators: Vec<Vec<f64>>,
    patterns: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
struct ModelFile {
    version: u32,
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "P")]
    p: usize,
    mode: Mode,
    penalty_kind: PenaltyKind,
    label_map: Vec<String>,
    gates: GatesFile,
    #[serde(rename = "V")]
    v: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "W")]
    w: Vec<Vec<Vec<f64>>>,
    cert: CertificateBundle,
    train_meta: TrainMeta,
}

fn blocks_to_nested(b: &BlockWeights) -> Vec<Vec<Vec<f64>>> {
    b.w.outer_iter()
        .map(|blk| blk.outer_iter().map(|row| row.to_vec()).collect())
        .collect()
}

fn nested_to_blocks(name: &str, nested: &[Vec<Vec<f64>>], p: usize, d: usize, k: usize) -> Result<BlockWeights> {
    if nested.len() != p || nested.iter().any(|b| b.len() != d || b.iter().any(|r| r.len() != k)) {
        return Err(CldError::Model(format!("{name} does not have shape ({p}, {d}, {k})")));
    }
    let flat: Vec<f64> = nested.iter().flatten().flatten().copied().collect();
    Ok(BlockWeights::from_flat(ArrayView1::from(&flat), p, d, k))
}

impl ModelFile {
    fn from_head(h: &TrainedHead) -> Self {
        Self {
            version: MODEL_VERSION,
            d: h.d(),
            k: h.k(),
            p: h.patterns(),
            mode: h.mode,
            penalty_kind: h.penalty_kind,
            label_map: h.label_map.clone(),
            gates: GatesFile {
                seed: h.gates.seed,
                dedup: h.gates.dedup,
                shortfall: h.gates.shortfall,
                generators: h.gates.patterns.iter().map(|p| p.generator.to_vec()).collect(),
                patterns: h.gates.patterns.iter().map(|p| p.bitstring()).collect(),
            },
            v: blocks_to_nested(&h.v),
            w: blocks_to_nested(&h.w),
            cert: h.cert.clone(),
            train_meta: h.meta.clone(),
        }
    }

    fn into_head(self) -> Result<TrainedHead> {
        let (p, d, k) = (self.p, self.d, self.k);
        if self.gates.generators.len() != p || self.gates.patterns.len() != p {
            return Err(CldError::Model(format!("expected {p} gates")));
        }
        if self.label_map.len() != k {
            return Err(CldError::Model(format!("label_map has {} entries, K = {k}", self.label_map.len())));
        }
        let patterns = self
            .gates
            .generators
            .into_iter()
            .zip(&self.gates.patterns)
            .map(|(g, bits)| {
                if g.len() != d {
                    return Err(CldError::Model(format!("generator of length {}, d = {d}", g.len())));
                }
                Ok(GatePattern {
                    active: GatePattern::parse_bits(bits)?,
                    generator: Array1::from(g),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gates = GateSet {
            patterns,
            seed: self.gates.seed,
            dedup: self.gates.dedup,
            shortfall: self.gates.shortfall,
        };
        let v = nested_to_blocks("V", &self.v, p, d, k)?;
        let w = nested_to_blocks("W", &self.w, p, d, k)?;
        let head = TrainedHead::new(gates, v, w, self.penalty_kind, self.mode, self.label_map, self.train_meta)?;
        head.cert.verify_against(&self.cert)?;
        Ok(head)
    }
}
