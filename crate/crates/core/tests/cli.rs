use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cld_core::dataio::{
    pool_masked_mean, read_sequence, write_features, write_sequence, FeatureMatrix, LabelSet, SequenceFeature,
};
use cld_core::gates::stream_rng;
use cld_core::head::{argmax, margin, InferenceMode, TrainedHead};
use cld_core::linops::GatedOperator;
use cld_core::synth::write_dataset;
use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};

fn cld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cld"))
        .args(args)
        .env("CLD_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn synth_small(dir: &Path) -> PathBuf {
    let out = dir.join("syn");
    ok(&cld(&["synth", "--out", s(&out), "--k", "3", "--accents", "2,2,1", "--d", "8", "--samples-per-accent", "30"]));
    out
}

/// Two well separated classes in 3 dimensions, features shifted by +-5 along x0.
fn separated(dir: &Path, n: usize, seed: u64) -> (PathBuf, FeatureMatrix, Vec<usize>) {
    let mut rng = stream_rng(seed, 1);
    let ids: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Array2::from_shape_fn((n, 3), |(i, j)| {
        let e: f64 = StandardNormal.sample(&mut rng);
        let c = if j == 0 { 5.0 * (2.0 * ids[i] as f64 - 1.0) } else { 0.0 };
        c + 0.5 * e
    });
    let x = FeatureMatrix::new(x).unwrap();
    let labels = LabelSet::new(ids.clone(), vec!["en".into(), "fr".into()]).unwrap();
    let m = write_dataset(&dir.join(format!("sep{seed}")), &x, &labels, None).unwrap();
    (m, x, ids)
}

#[test]
fn train_is_deterministic_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth_small(dir.path());
    let manifest = syn.join("train/manifest.json");
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for m in [&a, &b] {
        ok(&cld(&["train", "--manifest", s(&manifest), "--out", s(m), "--seed", "3"]));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(a.with_extension("log.jsonl")).unwrap(),
        std::fs::read(b.with_extension("log.jsonl")).unwrap()
    );
    let head = TrainedHead::load(&a).unwrap();
    assert_eq!(head.patterns(), 32);
    assert!(head.cert.b_l21 > 0.0);
}

#[test]
fn beta_zero_training_passes_oracle_verification() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _, _) = separated(dir.path(), 40, 1);
    let model = dir.path().join("m.json");
    let out = cld(&[
        "train", "--manifest", s(&m), "--out", s(&model), "--beta", "0", "--patterns", "4", "--verify",
    ]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"passed\":true"));
}

#[test]
fn undertrained_model_fails_verification_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth_small(dir.path());
    let model = dir.path().join("m.json");
    let manifest = syn.join("train/manifest.json");
    let out = cld(&[
        "train", "--manifest", s(&manifest), "--out", s(&model), "--readout", "prox", "--patterns", "8", "--verify",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_labels_file_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _, _) = separated(dir.path(), 20, 2);
    let labels = m.parent().unwrap().join("labels.csv");
    std::fs::remove_file(&labels).unwrap();
    let out = cld(&["train", "--manifest", s(&m), "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&labels)));
}

#[test]
fn predict_matches_training_fit_and_breaks_ties_to_class_0() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth_small(dir.path());
    let model = dir.path().join("m.json");
    ok(&cld(&["train", "--manifest", s(&syn.join("train/manifest.json")), "--out", s(&model)]));
    let preds = dir.path().join("p.csv");
    ok(&cld(&["predict", "--model", s(&model), "--input", s(&syn.join("train/features.cldf")), "--out", s(&preds)]));

    let head = TrainedHead::load(&model).unwrap();
    let x = cld_core::dataio::read_features(&syn.join("train/features.cldf")).unwrap();
    let op = GatedOperator::new(x.into_inner(), &head.gates, head.k(), false).unwrap();
    let fit = op.apply_f(&head.v.sub(&head.w)).unwrap();
    let rows = csv_rows(&preds);
    assert_eq!(rows.len(), fit.nrows());
    for (row, logits) in rows.iter().zip(fit.rows()) {
        assert_eq!(row[1].parse::<usize>().unwrap(), argmax(logits));
        assert_eq!(row[2], head.label_map[argmax(logits)]);
    }

    let zero = dir.path().join("zero.csv");
    std::fs::write(&zero, "0,0,0,0,0,0,0,0\n").unwrap();
    ok(&cld(&["predict", "--model", s(&model), "--input", s(&zero), "--out", s(&preds)]));
    assert_eq!(csv_rows(&preds)[0][1], "0");

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "1,2,3\n").unwrap();
    let out = cld(&["predict", "--model", s(&model), "--input", s(&bad), "--out", s(&preds)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pooled_sequences_predict_like_manual_pooling() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _, _) = separated(dir.path(), 40, 3);
    let model = dir.path().join("m.json");
    ok(&cld(&["train", "--manifest", s(&m), "--out", s(&model)]));
    let head = TrainedHead::load(&model).unwrap();

    let mut rng = stream_rng(3, 2);
    let mut paths = Vec::new();
    let mut pooled = Vec::new();
    for i in 0..4 {
        let frames = Array2::from_shape_fn((6, 3), |_| StandardNormal.sample(&mut rng)) * 3.0;
        let mask: Vec<bool> = (0..6).map(|t| t < 3 + i % 3).collect();
        let seq = SequenceFeature::new(frames, mask).unwrap();
        let p = dir.path().join(format!("s{i}.clds"));
        write_sequence(&p, &seq).unwrap();
        pooled.push(pool_masked_mean(&read_sequence(&p).unwrap()).unwrap());
        paths.push(p);
    }
    let out = dir.path().join("p.csv");
    let mut args = vec!["predict", "--model", s(&model), "--pool", "--out", s(&out), "--input"];
    args.extend(paths.iter().map(|p| s(p)));
    ok(&cld(&args));
    for (row, h) in csv_rows(&out).iter().zip(&pooled) {
        let logits: Array1<f64> = head.predict(h.view(), InferenceMode::Gated).unwrap();
        assert_eq!(row[1].parse::<usize>().unwrap(), argmax(logits.view()));
        for (k, v) in logits.iter().enumerate() {
            assert_eq!(row[3 + k].parse::<f64>().unwrap(), *v);
        }
    }
}

#[test]
fn certify_separated_data_and_audio_radii() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _, ids) = separated(dir.path(), 60, 4);
    // Features are stored as f32; compare against what the CLI reads.
    let x = cld_core::dataio::load_manifest(&m).unwrap().0;
    let model = dir.path().join("m.json");
    // Exact heads evaluate identically in gated and ReLU form on training rows.
    ok(&cld(&["train", "--manifest", s(&m), "--out", s(&model), "--mode", "exact", "--patterns", "8"]));
    let csv = dir.path().join("c.csv");
    ok(&cld(&["certify", "--model", s(&model), "--manifest", s(&m), "--out", s(&csv), "--L-E", "2.0"]));
    let head = TrainedHead::load(&model).unwrap();
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 60);
    for (i, row) in rows.iter().enumerate() {
        let logits = head.relu_network().eval(x.row(i));
        let m_oracle = margin(logits.view(), ids[i]);
        assert!(m_oracle > 0.0);
        assert_eq!(row[3].parse::<f64>().unwrap(), m_oracle);
        let rf: f64 = row[4].parse().unwrap();
        let ra: f64 = row[5].parse().unwrap();
        assert_eq!(ra, rf / 2.0);
        assert_eq!(row[6], "true");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(csv.with_extension("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["curve"][0]["eps"], 0.0);
    assert_eq!(summary["curve"][0]["certified_accuracy"], 1.0);
    assert_eq!(summary["l_e"], 2.0);
}

#[test]
fn misclassified_rows_get_radius_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (m, x, ids) = separated(dir.path(), 40, 5);
    let model = dir.path().join("m.json");
    ok(&cld(&["train", "--manifest", s(&m), "--out", s(&model)]));
    let flipped: Vec<usize> = ids.iter().enumerate().map(|(i, &c)| if i < 3 { 1 - c } else { c }).collect();
    let labels = LabelSet::new(flipped, vec!["en".into(), "fr".into()]).unwrap();
    let m2 = write_dataset(&dir.path().join("flip"), &x, &labels, None).unwrap();
    let csv = dir.path().join("c.csv");
    ok(&cld(&["certify", "--model", s(&model), "--manifest", s(&m2), "--out", s(&csv)]));
    let rows = csv_rows(&csv);
    for row in &rows[..3] {
        assert_ne!(row[1], row[2]);
        assert_eq!(row[4], "0");
        assert_eq!(row[5], "");
        assert_eq!(row[6], "false");
    }
}

#[test]
fn eval_writes_report_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth_small(dir.path());
    let model = dir.path().join("m.json");
    ok(&cld(&["train", "--manifest", s(&syn.join("train/manifest.json")), "--out", s(&model)]));
    let (rep, conf, acc) = (dir.path().join("e.json"), dir.path().join("c.csv"), dir.path().join("a.csv"));
    ok(&cld(&[
        "eval", "--model", s(&model), "--manifest", s(&syn.join("test/manifest.json")), "--out", s(&rep),
        "--confusion-csv", s(&conf), "--accent-csv", s(&acc),
    ]));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    let total: u64 = r["confusion"].as_array().unwrap().iter().flat_map(|row| row.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, r["n"].as_u64().unwrap());
    assert!(r["wer"].is_null());
    assert_eq!(csv_rows(&acc).len(), 5);
}

#[test]
fn bench_single_size_is_one_row_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, "k = 3\naccents_per_language = [2, 2, 2]\nd = 8\nsamples_per_accent = 50\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&cld(&["bench", "--out", s(d), "--spec", s(&spec), "--sizes", "100"]));
    }
    let rows = csv_rows(&a.join("accuracy_vs_size.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "100");
    for f in ["accuracy_vs_size.csv", "per_accent.csv", "size_100/metrics.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(!a.join("timings.csv").exists());
}

#[test]
fn verify_detects_a_tampered_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _, _) = separated(dir.path(), 30, 6);
    let model = dir.path().join("m.json");
    let converged = ["--rho", "0.03", "--admm-iters", "300", "--pcg-iters", "200", "--patterns", "6"];
    let mut args = vec!["train", "--manifest", s(&m), "--out", s(&model)];
    args.extend(converged);
    ok(&cld(&args));
    ok(&cld(&["verify", "--model", s(&model), "--manifest", s(&m), "--oracle", "--out", s(&dir.path().join("v.json"))]));

    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    let b = json["cert"]["b_l21"].as_f64().unwrap();
    json["cert"]["b_l21"] = serde_json::json!(b * 0.5);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, serde_json::to_string(&json).unwrap()).unwrap();
    let out = cld(&["verify", "--model", s(&bad)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gates_enum_reports_count_within_bound() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = stream_rng(7, 1);
    let x = FeatureMatrix::new(Array2::from_shape_fn((6, 2), |_| StandardNormal.sample(&mut rng))).unwrap();
    let f = dir.path().join("x.cldf");
    write_features(&f, &x).unwrap();
    let out = dir.path().join("g.json");
    ok(&cld(&["gates-enum", "--features", s(&f), "--out", s(&out)]));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    // Six generic lines through the origin cut the plane into 12 sectors.
    assert_eq!(r["count"], 12);
    assert_eq!(r["arrangement_bound"], 12);
    assert_eq!(r["patterns"].as_array().unwrap().len(), 12);
}
