//! Synthetic language/accent embeddings: isotropic Gaussian clusters arranged
//! as languages, each with several accent sub-clusters.
//!
//! `accent_spread` and `noise_sigma` are RMS Euclidean distances, so each
//! coordinate draws `N(0, σ²/d)`.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{write_accents, write_features, write_labels, write_manifest, FeatureMatrix, LabelSet, Manifest};
use crate::error::{CldError, Result};
use crate::gates::stream_rng;

pub const MAX_SEPARATION_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub k: usize,
    pub accents_per_language: Vec<usize>,
    pub d: usize,
    pub language_separation: f64,
    pub accent_spread: f64,
    pub noise_sigma: f64,
    pub samples_per_accent: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            k: 5,
            accents_per_language: vec![5, 5, 5, 5, 4],
            d: 64,
            language_separation: 6.0,
            accent_spread: 1.0,
            noise_sigma: 1.0,
            samples_per_accent: 500,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CldError::Parameter(m));
        if self.k < 2 {
            return bad(format!("need at least 2 languages, got {}", self.k));
        }
        if self.accents_per_language.len() != self.k {
            return bad(format!(
                "accents_per_language has {} entries for {} languages",
                self.accents_per_language.len(),
                self.k
            ));
        }
        if self.accents_per_language.contains(&0) {
            return bad("every language needs at least one accent".into());
        }
        if self.d == 0 || self.samples_per_accent == 0 {
            return bad("d and samples_per_accent must be positive".into());
        }
        if !(self.language_separation > 0.0 && self.language_separation.is_finite()) {
            return bad(format!("language_separation must be positive, got {}", self.language_separation));
        }
        for (name, v) in [("accent_spread", self.accent_spread), ("noise_sigma", self.noise_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn n_accents(&self) -> usize {
        self.accents_per_language.iter().sum()
    }

    pub fn n_samples(&self) -> usize {
        self.n_accents() * self.samples_per_accent
    }

    pub fn language_names(&self) -> Vec<String> {
        (0..self.k).map(|l| format!("lang{l}")).collect()
    }
}

pub struct SynthData {
    pub x: FeatureMatrix,
    pub labels: LabelSet,
    /// Accent index of every sample.
    pub accent_ids: Vec<usize>,
    /// Accent names, indexed by accent id.
    pub accent_names: Vec<String>,
    pub language_centers: Array2<f64>,
    pub accent_centers: Array2<f64>,
    /// Accuracy of classifying each sample by its nearest language center.
    pub nearest_center_accuracy: f64,
}

impl SynthData {
    /// Per-sample accent names, as written to `accents.csv`.
    pub fn accent_labels(&self) -> Vec<String> {
        self.accent_ids.iter().map(|&a| self.accent_names[a].clone()).collect()
    }
}

fn gaussian_rows(rows: usize, d: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, d), |_| StandardNormal.sample(rng))
}

fn min_pairwise_distance(c: ArrayView2<'_, f64>) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..c.nrows() {
        for j in i + 1..c.nrows() {
            let diff = &c.row(i) - &c.row(j);
            best = best.min(diff.dot(&diff).sqrt());
        }
    }
    best
}

/// Language centers at pairwise distance at least `sep`. When `K <= d` the
/// Gaussian draws are orthogonalized and scaled to norm `sep/√2`, giving
/// pairwise distance exactly `sep`; otherwise the whole draw is rescaled so
/// its closest pair sits at `sep`.
fn language_centers(spec: &SynthSpec) -> Result<Array2<f64>> {
    let mut rng = stream_rng(spec.seed, 0);
    let sep = spec.language_separation;
    for _ in 0..MAX_SEPARATION_ATTEMPTS {
        let mut c = gaussian_rows(spec.k, spec.d, &mut rng);
        if spec.k <= spec.d {
            let mut ok = true;
            for i in 0..spec.k {
                for j in 0..i {
                    let proj = c.row(i).dot(&c.row(j));
                    let prev = c.row(j).to_owned();
                    c.row_mut(i).scaled_add(-proj, &prev);
                }
                let norm = c.row(i).dot(&c.row(i)).sqrt();
                if norm < 1e-8 {
                    ok = false;
                    break;
                }
                c.row_mut(i).mapv_inplace(|v| v / norm);
            }
            if !ok {
                continue;
            }
            c *= sep / std::f64::consts::SQRT_2;
        } else {
            let m = min_pairwise_distance(c.view());
            if !(m > 1e-8) {
                continue;
            }
            c *= sep / m;
        }
        if min_pairwise_distance(c.view()) >= sep * (1.0 - 1e-12) {
            return Ok(c);
        }
    }
    Err(CldError::Generation(format!(
        "could not place {} language centers {sep} apart in {} dimensions after {MAX_SEPARATION_ATTEMPTS} attempts",
        spec.k, spec.d
    )))
}

/// Draws the dataset. Samples are ordered by accent; accent `a` draws from
/// its own RNG stream, so generation parallelizes per accent.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let d = spec.d;
    let scale = 1.0 / (d as f64).sqrt();
    let centers = language_centers(spec)?;

    let accent_language: Vec<usize> = spec
        .accents_per_language
        .iter()
        .enumerate()
        .flat_map(|(l, &n)| std::iter::repeat_n(l, n))
        .collect();
    let mut accent_names = Vec::with_capacity(accent_language.len());
    for (l, &n) in spec.accents_per_language.iter().enumerate() {
        accent_names.extend((0..n).map(|a| format!("lang{l}-acc{a}")));
    }

    let m = spec.samples_per_accent;
    let blocks: Vec<(Array1<f64>, Array2<f64>)> = accent_language
        .par_iter()
        .enumerate()
        .map(|(a, &l)| {
            let mut rng = stream_rng(spec.seed, 1 + a as u64);
            let offset: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let center = &centers.row(l) + &(offset * (spec.accent_spread * scale));
            let noise = gaussian_rows(m, d, &mut rng) * (spec.noise_sigma * scale);
            let samples = noise + &center;
            (center, samples)
        })
        .collect();

    let n_acc = accent_language.len();
    let mut x = Array2::zeros((n_acc * m, d));
    let mut accent_centers = Array2::zeros((n_acc, d));
    for (a, (center, samples)) in blocks.into_iter().enumerate() {
        accent_centers.row_mut(a).assign(&center);
        x.slice_mut(s![a * m..(a + 1) * m, ..]).assign(&samples);
    }
    let accent_ids: Vec<usize> = (0..n_acc).flat_map(|a| std::iter::repeat_n(a, m)).collect();
    let class_ids: Vec<usize> = accent_ids.iter().map(|&a| accent_language[a]).collect();

    let nearest_center_accuracy = nearest_center_accuracy(x.view(), &class_ids, centers.view());
    log::info!("synthetic data: nearest language center accuracy {nearest_center_accuracy:.4}");
    Ok(SynthData {
        x: FeatureMatrix::new(x)?,
        labels: LabelSet::new(class_ids, spec.language_names())?,
        accent_ids,
        accent_names,
        language_centers: centers,
        accent_centers,
        nearest_center_accuracy,
    })
}

/// Fraction of rows whose nearest center (lowest index on ties) is their class.
pub fn nearest_center_accuracy(x: ArrayView2<'_, f64>, class_ids: &[usize], centers: ArrayView2<'_, f64>) -> f64 {
    if x.nrows() == 0 {
        return 0.0;
    }
    let hits = x
        .axis_iter(Axis(0))
        .zip(class_ids)
        .filter(|(row, &y)| {
            let mut best = (f64::INFINITY, 0);
            for (c, center) in centers.axis_iter(Axis(0)).enumerate() {
                let diff = row - &center;
                let dist = diff.dot(&diff);
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            best.1 == y
        })
        .count();
    hits as f64 / x.nrows() as f64
}

/// Index sets in train, test, validation order; each sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
    pub stratified: bool,
}

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Stratified split: within each class, shuffles and takes
/// `round(f·m)` for train and test, the rest for validation. Falls back to a
/// global shuffle with a warning when a class has fewer than 3 examples.
pub fn split(class_ids: &[usize], fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (ftr, fte, fva) = fractions;
    if [ftr, fte, fva].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ftr + fte + fva) - 1.0).abs() > 1e-9 {
        return Err(CldError::Parameter(format!("split fractions must be in [0,1] and sum to 1, got {fractions:?}")));
    }
    let k = class_ids.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in class_ids.iter().enumerate() {
        by_class[c].push(i);
    }
    let stratified = by_class.iter().all(|v| v.is_empty() || v.len() >= 3);
    if !stratified {
        log::warn!("a class has fewer than 3 examples; falling back to an unstratified split");
        by_class = vec![(0..class_ids.len()).collect()];
    }
    let mut out = Split {
        train: Vec::new(),
        test: Vec::new(),
        val: Vec::new(),
        stratified,
    };
    for (c, mut idx) in by_class.into_iter().enumerate() {
        let mut rng = stream_rng(seed, 0x5_0000 + c as u64);
        idx.shuffle(&mut rng);
        let m = idx.len();
        let n_tr = ((ftr * m as f64).round() as usize).min(m);
        let n_te = ((fte * m as f64).round() as usize).min(m - n_tr);
        out.train.extend_from_slice(&idx[..n_tr]);
        out.test.extend_from_slice(&idx[n_tr..n_tr + n_te]);
        out.val.extend_from_slice(&idx[n_tr + n_te..]);
    }
    out.train.sort_unstable();
    out.test.sort_unstable();
    out.val.sort_unstable();
    Ok(out)
}

/// Class-stratified subsample of `pool` with `size` entries, returned sorted.
/// Per-class quotas use largest remainders; each class is shuffled once per
/// seed, so smaller sizes are nested inside larger ones up to quota rounding.
pub fn subsample(class_ids: &[usize], pool: &[usize], size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > pool.len() {
        return Err(CldError::Parameter(format!("subsample of {size} from a pool of {}", pool.len())));
    }
    let k = pool.iter().map(|&i| class_ids[i]).max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in pool {
        by_class[class_ids[i]].push(i);
    }
    let total = pool.len() as f64;
    let exact: Vec<f64> = by_class.iter().map(|v| v.len() as f64 * size as f64 / total).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = size - quota.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut out = Vec::with_capacity(size);
    for (c, mut idx) in by_class.into_iter().enumerate() {
        let mut rng = stream_rng(seed, 0x6_0000 + c as u64);
        idx.shuffle(&mut rng);
        out.extend_from_slice(&idx[..quota[c]]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Writes `features.cldf`, `labels.csv`, `accents.csv` and `manifest.json`
/// into `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, x: &FeatureMatrix, labels: &LabelSet, accents: Option<&[String]>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CldError::io(dir, e))?;
    write_features(&dir.join("features.cldf"), x)?;
    write_labels(&dir.join("labels.csv"), labels)?;
    if let Some(a) = accents {
        write_accents(&dir.join("accents.csv"), a)?;
    }
    let manifest = Manifest {
        features: "features.cldf".into(),
        labels: "labels.csv".into(),
        label_map: labels.label_map().iter().enumerate().map(|(i, l)| (l.clone(), i)).collect(),
        accents: accents.map(|_| "accents.csv".into()),
    };
    let path = dir.join("manifest.json");
    write_manifest(&path, &manifest)?;
    Ok(path)
}
