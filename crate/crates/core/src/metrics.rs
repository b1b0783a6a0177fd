use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{write_atomic, LabelSet};
use crate::error::{CldError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccentStats {
    pub language: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub label_map: Vec<String>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    /// Accuracy per true class; `None` for classes absent from the set.
    pub per_class: Vec<Option<f64>>,
    pub per_accent: Option<BTreeMap<String, AccentStats>>,
    /// Reserved for externally computed transcription metrics.
    pub wer: Option<f64>,
    pub cer: Option<f64>,
}

/// Accuracy, confusion matrix and per-class / per-accent breakdowns.
pub fn evaluate(preds: &[usize], labels: &LabelSet, accents: Option<&[String]>) -> Result<EvalReport> {
    let n = labels.n();
    if preds.len() != n {
        return Err(CldError::Alignment(format!("{} predictions for {n} labels", preds.len())));
    }
    if let Some(a) = accents {
        if a.len() != n {
            return Err(CldError::Alignment(format!("{} accent ids for {n} labels", a.len())));
        }
    }
    let k = labels.k();
    if let Some(&p) = preds.iter().find(|&&p| p >= k) {
        return Err(CldError::Label(format!("predicted class {p} out of range for K = {k}")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&y, &p) in labels.class_ids().iter().zip(preds) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class = (0..k)
        .map(|c| {
            let total: usize = confusion[c].iter().sum();
            (total > 0).then(|| confusion[c][c] as f64 / total as f64)
        })
        .collect();
    let per_accent = accents.map(|a| {
        let mut stats: BTreeMap<String, AccentStats> = BTreeMap::new();
        for ((acc, &y), &p) in a.iter().zip(labels.class_ids()).zip(preds) {
            let e = stats.entry(acc.clone()).or_insert_with(|| AccentStats {
                language: labels.label(y).to_string(),
                n: 0,
                correct: 0,
                accuracy: 0.0,
            });
            e.n += 1;
            e.correct += usize::from(y == p);
        }
        for s in stats.values_mut() {
            s.accuracy = s.correct as f64 / s.n as f64;
        }
        stats
    });
    Ok(EvalReport {
        n,
        accuracy: correct as f64 / n as f64,
        label_map: labels.label_map().to_vec(),
        confusion,
        per_class,
        per_accent,
        wer: None,
        cer: None,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Confusion matrix as CSV with a `true\pred` header row.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for l in &self.label_map {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.label_map.iter().zip(&self.confusion) {
            out.push_str(l);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// `accent,language,n,correct,accuracy` rows, sorted by accent.
    pub fn accent_csv(&self) -> Option<String> {
        self.per_accent.as_ref().map(|m| {
            let mut out = String::from("accent,language,n,correct,accuracy\n");
            for (a, s) in m {
                out.push_str(&format!("{a},{},{},{},{}\n", s.language, s.n, s.correct, s.accuracy));
            }
            out
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }
}
