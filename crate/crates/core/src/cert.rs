//! Robustness certificates for a trained head.
//!
//! Every bound here upper-bounds the variation norm of the ReLU network read
//! off the convex blocks, and hence its logit Lipschitz constant in the
//! `‖·‖_∞ / ‖·‖_2` sense. Radii always use the column-wise bound `B_l21`,
//! the tightest of the three.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cvxprog::PenaltyKind;
use crate::dataio::LabelSet;
use crate::error::{CldError, Result};
use crate::head::{argmax, margin, InferenceMode, ReluNetwork, TrainedHead};
use crate::linops::BlockWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateBundle {
    pub b_l21: f64,
    pub b_fro_scaled: f64,
    pub b_amgm: f64,
    pub k: usize,
    pub penalty_kind_used: PenaltyKind,
}

impl CertificateBundle {
    /// Exact comparison against a stored bundle; any difference is tampering.
    pub fn verify_against(&self, stored: &CertificateBundle) -> Result<()> {
        let fields = [
            ("b_l21", stored.b_l21, self.b_l21),
            ("b_fro_scaled", stored.b_fro_scaled, self.b_fro_scaled),
            ("b_amgm", stored.b_amgm, self.b_amgm),
            ("k", stored.k as f64, self.k as f64),
        ];
        for (field, s, r) in fields {
            if s.to_bits() != r.to_bits() {
                return Err(CldError::CertificateMismatch {
                    field,
                    stored: s,
                    recomputed: r,
                });
            }
        }
        if stored.penalty_kind_used != self.penalty_kind_used {
            return Err(CldError::Model(format!(
                "certificate penalty kind {} does not match model penalty {}",
                stored.penalty_kind_used, self.penalty_kind_used
            )));
        }
        Ok(())
    }
}

fn column_norm_sum(b: &BlockWeights) -> f64 {
    b.w.outer_iter()
        .map(|blk| blk.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).sum::<f64>())
        .sum()
}

fn block_frob_sum(b: &BlockWeights) -> f64 {
    b.w.outer_iter().map(|blk| blk.iter().map(|t| t * t).sum::<f64>().sqrt()).sum()
}

/// `Σ_p Σ_k (‖V_{p,k}‖ + ‖W_{p,k}‖)`
pub fn blocks_bound_l21(v: &BlockWeights, w: &BlockWeights) -> f64 {
    column_norm_sum(v) + column_norm_sum(w)
}

/// `√K Σ_p (‖V_p‖_F + ‖W_p‖_F)`
pub fn blocks_bound_fro(v: &BlockWeights, w: &BlockWeights) -> f64 {
    (v.k() as f64).sqrt() * (block_frob_sum(v) + block_frob_sum(w))
}

pub fn var_bound_l21(head: &TrainedHead) -> f64 {
    blocks_bound_l21(&head.v, &head.w)
}

pub fn var_bound_fro(head: &TrainedHead) -> f64 {
    blocks_bound_fro(&head.v, &head.w)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmgmBound {
    /// `½ Σ_j (‖u_j‖² + ‖a_j‖²)`
    pub bound: f64,
    /// The weight-decay term `β/2 Σ_j (…)`; equals `β · bound`.
    pub regularizer: f64,
}

pub fn amgm_bound(net: &ReluNetwork, beta: f64) -> AmgmBound {
    let bound = 0.5 * net.atoms.iter().map(|at| at.u.dot(&at.u) + at.a.dot(&at.a)).sum::<f64>();
    AmgmBound {
        bound,
        regularizer: beta * bound,
    }
}

pub fn compute_bundle(v: &BlockWeights, w: &BlockWeights, net: &ReluNetwork, penalty_kind: PenaltyKind) -> CertificateBundle {
    CertificateBundle {
        b_l21: blocks_bound_l21(v, w),
        b_fro_scaled: blocks_bound_fro(v, w),
        b_amgm: amgm_bound(net, 0.0).bound,
        k: v.k(),
        penalty_kind_used: penalty_kind,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleCertificate {
    pub pred: usize,
    pub margin: f64,
    pub radius_feature: f64,
    pub radius_audio: Option<f64>,
    pub certified: bool,
}

/// `max(0, m) / (2B)`; infinite for a positive margin under a zero head.
pub fn radius(margin: f64, b: f64) -> f64 {
    if margin <= 0.0 {
        0.0
    } else if b == 0.0 {
        f64::INFINITY
    } else {
        margin / (2.0 * b)
    }
}

/// Certificate for one example, always on ReLU-mode logits.
pub fn certify_example(head: &TrainedHead, h: ArrayView1<'_, f64>, y: usize, l_e: Option<f64>) -> Result<ExampleCertificate> {
    let logits = head.predict(h, InferenceMode::Relu)?;
    certificate_from_logits(logits.view(), y, head.cert.b_l21, l_e)
}

fn certificate_from_logits(logits: ArrayView1<'_, f64>, y: usize, b: f64, l_e: Option<f64>) -> Result<ExampleCertificate> {
    if y >= logits.len() {
        return Err(CldError::Label(format!("class {y} out of range for K = {}", logits.len())));
    }
    if let Some(l) = l_e {
        if !(l > 0.0 && l.is_finite()) {
            return Err(CldError::Parameter(format!("L_E must be positive and finite, got {l}")));
        }
    }
    let m = margin(logits, y);
    let r = radius(m, b);
    Ok(ExampleCertificate {
        pred: argmax(logits),
        margin: m,
        radius_feature: r,
        radius_audio: l_e.map(|l| r / l),
        certified: m > 0.0,
    })
}

/// Certificates for every row of `x`.
pub fn certify_batch(head: &TrainedHead, x: ArrayView2<'_, f64>, labels: &[usize], l_e: Option<f64>) -> Result<Vec<ExampleCertificate>> {
    if x.nrows() != labels.len() {
        return Err(CldError::Alignment(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    let logits = head.predict_batch(x, InferenceMode::Relu)?;
    let b = head.cert.b_l21;
    logits
        .axis_iter(Axis(0))
        .into_par_iter()
        .zip(labels.par_iter())
        .map(|(row, &y)| certificate_from_logits(row, y, b, l_e))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginGap {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub const MARGIN_GAP_TOL: f64 = 1e-9;

/// `mar(h + δ) >= mar(h) - 2 B ‖δ‖`
pub fn margin_gap_check(head: &TrainedHead, h: ArrayView1<'_, f64>, y: usize, delta: ArrayView1<'_, f64>) -> Result<MarginGap> {
    let moved: Array1<f64> = &h + &delta;
    let lhs = margin(head.predict(moved.view(), InferenceMode::Relu)?.view(), y);
    let base = margin(head.predict(h, InferenceMode::Relu)?.view(), y);
    let rhs = base - 2.0 * head.cert.b_l21 * delta.dot(&delta).sqrt();
    Ok(MarginGap {
        lhs,
        rhs,
        holds: lhs >= rhs - MARGIN_GAP_TOL,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub eps: f64,
    pub certified_accuracy: f64,
}

/// Fraction of examples correctly classified with radius at least `ε`.
pub fn certified_accuracy_from(certs: &[ExampleCertificate], labels: &[usize], eps_grid: &[f64]) -> Vec<CurvePoint> {
    let n = certs.len().max(1) as f64;
    eps_grid
        .iter()
        .map(|&eps| {
            let hits = certs
                .iter()
                .zip(labels)
                .filter(|(c, &y)| c.pred == y && c.radius_feature >= eps)
                .count();
            CurvePoint {
                eps,
                certified_accuracy: hits as f64 / n,
            }
        })
        .collect()
}

pub fn certified_accuracy(head: &TrainedHead, x: ArrayView2<'_, f64>, labels: &LabelSet, eps_grid: &[f64]) -> Result<Vec<CurvePoint>> {
    if x.nrows() == 0 {
        return Err(CldError::Parameter("certified accuracy needs a nonempty test set".into()));
    }
    let certs = certify_batch(head, x, labels.class_ids(), None)?;
    Ok(certified_accuracy_from(&certs, labels.class_ids(), eps_grid))
}

/// How far gated predictions drift from the ReLU network on a given set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub n: usize,
    pub disagreement_rate: f64,
    pub max_abs_logit_gap: f64,
}

pub fn gated_relu_gap(head: &TrainedHead, x: ArrayView2<'_, f64>) -> Result<GapReport> {
    let gated = head.predict_batch(x, InferenceMode::Gated)?;
    let relu = head.predict_batch(x, InferenceMode::Relu)?;
    let n = x.nrows();
    let disagree = gated
        .axis_iter(Axis(0))
        .zip(relu.axis_iter(Axis(0)))
        .filter(|(g, r)| argmax(*g) != argmax(*r))
        .count();
    let max_gap = (&gated - &relu).iter().fold(0.0f64, |m, t| m.max(t.abs()));
    Ok(GapReport {
        n,
        disagreement_rate: if n == 0 { 0.0 } else { disagree as f64 / n as f64 },
        max_abs_logit_gap: max_gap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertSummary {
    pub b_l21: f64,
    pub b_fro_scaled: f64,
    pub b_amgm: f64,
    pub n: usize,
    pub relu_accuracy: f64,
    pub certified_fraction: f64,
    pub mean_radius: f64,
    pub median_radius: f64,
    pub curve: Vec<CurvePoint>,
    pub gap: GapReport,
    /// Set when the head was trained in relaxed mode, whose default inference
    /// is gated: certified ReLU predictions may then differ off the training set.
    pub relaxed_head: bool,
}

pub fn summarize(head: &TrainedHead, x: ArrayView2<'_, f64>, labels: &[usize], certs: &[ExampleCertificate], eps_grid: &[f64]) -> Result<CertSummary> {
    let n = certs.len();
    let correct = certs.iter().zip(labels).filter(|(c, &y)| c.pred == y).count();
    let mut radii: Vec<f64> = certs.iter().map(|c| c.radius_feature).collect();
    radii.sort_by(f64::total_cmp);
    let median = match n {
        0 => 0.0,
        _ if n % 2 == 1 => radii[n / 2],
        _ => 0.5 * (radii[n / 2 - 1] + radii[n / 2]),
    };
    let mean = if n == 0 { 0.0 } else { radii.iter().sum::<f64>() / n as f64 };
    Ok(CertSummary {
        b_l21: head.cert.b_l21,
        b_fro_scaled: head.cert.b_fro_scaled,
        b_amgm: head.cert.b_amgm,
        n,
        relu_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        certified_fraction: if n == 0 { 0.0 } else { certs.iter().filter(|c| c.certified).count() as f64 / n as f64 },
        mean_radius: mean,
        median_radius: median,
        curve: certified_accuracy_from(certs, labels, eps_grid),
        gap: gated_relu_gap(head, x)?,
        relaxed_head: head.mode == crate::cvxprog::Mode::Relaxed,
    })
}
