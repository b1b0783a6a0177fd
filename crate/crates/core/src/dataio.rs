//! On-disk formats for pooled features, labels and frame sequences, plus
//! masked mean pooling.
//!
//! Binary feature files (`CLDF`) store 32-bit floats; everything is widened to
//! `f64` on load. CSV feature files (one row per example, no header) are
//! accepted for hand-written fixtures.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CldError, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CLDF";
pub const SEQUENCE_MAGIC: &[u8; 4] = b"CLDS";
pub const FORMAT_VERSION: u32 = 1;

const FEATURE_HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// `n × d` matrix of pooled utterance embeddings, one example per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, d) = values.dim();
        if n == 0 || d == 0 {
            return Err(CldError::Shape(format!(
                "feature matrix must be non-empty, got {n}x{d}"
            )));
        }
        if let Some(((i, j), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(CldError::Shape(format!(
                "non-finite feature at row {i}, col {j}"
            )));
        }
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    /// Rows selected by `idx`, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        Self::new(self.values.select(Axis(0), idx))
    }
}

/// Class ids for `n` examples plus the class-index ↔ language-string map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    class_ids: Vec<usize>,
    label_map: Vec<String>,
}

impl LabelSet {
    pub fn new(class_ids: Vec<usize>, label_map: Vec<String>) -> Result<Self> {
        let k = label_map.len();
        if k < 2 {
            return Err(CldError::Label(format!("need at least 2 classes, got {k}")));
        }
        if class_ids.is_empty() {
            return Err(CldError::Label("label set is empty".into()));
        }
        if let Some((i, c)) = class_ids.iter().enumerate().find(|(_, &c)| c >= k) {
            return Err(CldError::Label(format!(
                "class id {c} at row {i} is out of range for {k} classes"
            )));
        }
        Ok(Self {
            class_ids,
            label_map,
        })
    }

    pub fn n(&self) -> usize {
        self.class_ids.len()
    }

    pub fn k(&self) -> usize {
        self.label_map.len()
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn label_map(&self) -> &[String] {
        &self.label_map
    }

    pub fn label(&self, class: usize) -> &str {
        &self.label_map[class]
    }

    pub fn class_of(&self, label: &str) -> Option<usize> {
        self.label_map.iter().position(|l| l == label)
    }

    /// One-hot `n × K` target matrix.
    pub fn one_hot(&self) -> Array2<f64> {
        let mut y = Array2::zeros((self.n(), self.k()));
        for (i, &c) in self.class_ids.iter().enumerate() {
            y[[i, c]] = 1.0;
        }
        y
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k()];
        for &c in &self.class_ids {
            counts[c] += 1;
        }
        counts
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            idx.iter().map(|&i| self.class_ids[i]).collect(),
            self.label_map.clone(),
        )
    }
}

/// Frame-level encoder outputs for one utterance with an explicit validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFeature {
    pub frames: Array2<f64>,
    pub mask: Vec<bool>,
}

impl SequenceFeature {
    pub fn new(frames: Array2<f64>, mask: Vec<bool>) -> Result<Self> {
        if frames.nrows() != mask.len() {
            return Err(CldError::Shape(format!(
                "{} frames but mask of length {}",
                frames.nrows(),
                mask.len()
            )));
        }
        Ok(Self { frames, mask })
    }
}

/// Mean of the frames whose mask entry is set.
pub fn pool_masked_mean(seq: &SequenceFeature) -> Result<Array1<f64>> {
    let mut acc = Array1::<f64>::zeros(seq.frames.ncols());
    let mut count = 0usize;
    for (frame, &keep) in seq.frames.outer_iter().zip(&seq.mask) {
        if keep {
            acc += &frame;
            count += 1;
        }
    }
    if count == 0 {
        return Err(CldError::EmptyPool);
    }
    acc /= count as f64;
    Ok(acc)
}

/// Write bytes to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| CldError::io(dir, e))?;
    }
    let mut tmp_name = path
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| CldError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| CldError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CldError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CldError::io(path, e))
}

pub fn encode_features(x: &FeatureMatrix) -> Vec<u8> {
    let (n, d) = (x.n(), x.d());
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * n * d);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    for &v in x.values.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

/// Writes the binary `CLDF` format. Values are narrowed to `f32`.
pub fn write_features(path: &Path, x: &FeatureMatrix) -> Result<()> {
    write_atomic(path, &encode_features(x))
}

pub fn write_features_csv(path: &Path, x: &FeatureMatrix) -> Result<()> {
    let mut out = String::new();
    for row in x.values.outer_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(CldError::format(
                self.path,
                format!(
                    "truncated payload at byte offset {}: expected {len} bytes of {what}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(CldError::format(
                self.path,
                format!(
                    "bad magic at byte offset 0: expected {:?}, found {:?}",
                    String::from_utf8_lossy(magic),
                    String::from_utf8_lossy(found)
                ),
            ));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CldError::format(
                self.path,
                format!("unsupported version {version} at byte offset 4"),
            ));
        }
        Ok(())
    }

    fn f32_matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let len = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| CldError::format(self.path, "declared shape overflows"))?;
        let start = self.pos;
        let raw = self.take(len, "f32 payload")?;
        let mut values = Vec::with_capacity(rows * cols);
        for (k, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(CldError::format(
                    self.path,
                    format!(
                        "non-finite entry at row {}, col {} (byte offset {})",
                        k / cols,
                        k % cols,
                        start + 4 * k
                    ),
                ));
            }
            values.push(v as f64);
        }
        Ok(Array2::from_shape_vec((rows, cols), values).expect("shape checked"))
    }
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = ByteReader {
        path,
        bytes,
        pos: 0,
    };
    r.header(FEATURE_MAGIC)?;
    let n = r.u64("n")? as usize;
    let d = r.u64("d")? as usize;
    if n == 0 || d == 0 {
        return Err(CldError::format(path, format!("empty shape {n}x{d}")));
    }
    let values = r.f32_matrix(n, d)?;
    if r.pos != bytes.len() {
        return Err(CldError::format(
            path,
            format!("{} trailing bytes after payload", bytes.len() - r.pos),
        ));
    }
    FeatureMatrix::new(values)
}

fn parse_features_csv(path: &Path, bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut values = Vec::new();
    let mut d = None;
    let mut n = 0usize;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CldError::format(path, format!("row {row}: {e}")))?;
        if d.is_some_and(|d| d != rec.len()) {
            return Err(CldError::format(
                path,
                format!("row {row} has {} columns, expected {}", rec.len(), d.unwrap()),
            ));
        }
        d = Some(rec.len());
        for (col, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                CldError::format(path, format!("unparsable entry {cell:?} at row {row}, col {col}"))
            })?;
            if !v.is_finite() {
                return Err(CldError::format(
                    path,
                    format!("non-finite entry at row {row}, col {col}"),
                ));
            }
            values.push(v);
        }
        n += 1;
    }
    let d = d.ok_or_else(|| CldError::format(path, "no rows"))?;
    FeatureMatrix::new(Array2::from_shape_vec((n, d), values).expect("rectangular"))
}

/// Reads a `CLDF` binary file, or a headerless CSV when the magic is absent.
pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| CldError::io(path, e))?;
    if bytes.starts_with(FEATURE_MAGIC) {
        decode_features(path, &bytes)
    } else if bytes.first().is_some_and(|b| b.is_ascii_graphic() || b.is_ascii_whitespace())
        && !bytes.starts_with(b"CLD")
    {
        parse_features_csv(path, &bytes)
    } else {
        decode_features(path, &bytes)
    }
}

pub fn encode_sequence(seq: &SequenceFeature) -> Vec<u8> {
    let (t, d) = seq.frames.dim();
    let mut buf = Vec::with_capacity(24 + 4 * t * d + t);
    buf.extend_from_slice(SEQUENCE_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    for &v in seq.frames.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf.extend(seq.mask.iter().map(|&m| m as u8));
    buf
}

pub fn write_sequence(path: &Path, seq: &SequenceFeature) -> Result<()> {
    write_atomic(path, &encode_sequence(seq))
}

pub fn read_sequence(path: &Path) -> Result<SequenceFeature> {
    let bytes = fs::read(path).map_err(|e| CldError::io(path, e))?;
    let mut r = ByteReader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    r.header(SEQUENCE_MAGIC)?;
    let t = r.u64("T")? as usize;
    let d = r.u64("d")? as usize;
    let frames = r.f32_matrix(t, d)?;
    let mask_start = r.pos;
    let mask = r
        .take(t, "mask")?
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(CldError::format(
                path,
                format!("mask byte {other} at byte offset {} is not 0/1", mask_start + i),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    SequenceFeature::new(frames, mask)
}

/// Reads `id,label` rows (header optional) and maps labels through `label_map`.
/// Ids must be a permutation of `0..n`; output is ordered by id.
pub fn read_labels(path: &Path, label_map: &[String]) -> Result<LabelSet> {
    let text = fs::read_to_string(path).map_err(|e| CldError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CldError::Label(format!("{}: {e}", path.display())))?;
        if rec.len() != 2 {
            return Err(CldError::Label(format!(
                "{} line {}: expected `id,label`",
                path.display(),
                line + 1
            )));
        }
        if line == 0 && rec[0].eq_ignore_ascii_case("id") {
            continue;
        }
        let id: usize = rec[0].parse().map_err(|_| {
            CldError::Label(format!("{} line {}: bad id {:?}", path.display(), line + 1, &rec[0]))
        })?;
        let class = label_map.iter().position(|l| l == &rec[1]).ok_or_else(|| {
            CldError::Label(format!(
                "{} line {}: unknown class {:?}",
                path.display(),
                line + 1,
                &rec[1]
            ))
        })?;
        rows.push((id, class));
    }
    if rows.is_empty() {
        return Err(CldError::Label(format!("{} has no labels", path.display())));
    }
    rows.sort_unstable();
    for (expect, &(id, _)) in rows.iter().enumerate() {
        if id != expect {
            return Err(CldError::Label(format!(
                "{}: ids must be exactly 0..{}, found {id} where {expect} expected",
                path.display(),
                rows.len()
            )));
        }
    }
    LabelSet::new(rows.into_iter().map(|(_, c)| c).collect(), label_map.to_vec())
}

pub fn write_labels(path: &Path, labels: &LabelSet) -> Result<()> {
    let mut out = String::from("id,label\n");
    for (i, &c) in labels.class_ids().iter().enumerate() {
        out.push_str(&format!("{i},{}\n", labels.label(c)));
    }
    write_atomic(path, out.as_bytes())
}

/// Reads `id,accent` rows into a vector indexed by example id.
pub fn read_accents(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CldError::io(path, e))?;
    let mut rows = Vec::new();
    for (line, l) in text.lines().enumerate() {
        let l = l.trim();
        if l.is_empty() || (line == 0 && l.starts_with("id,")) {
            continue;
        }
        let (id, accent) = l
            .split_once(',')
            .ok_or_else(|| CldError::format(path, format!("line {}: expected `id,accent`", line + 1)))?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| CldError::format(path, format!("line {}: bad id", line + 1)))?;
        rows.push((id, accent.trim().to_string()));
    }
    rows.sort();
    if rows.iter().enumerate().any(|(i, (id, _))| *id != i) {
        return Err(CldError::format(path, "ids must be exactly 0..n"));
    }
    Ok(rows.into_iter().map(|(_, a)| a).collect())
}

pub fn write_accents(path: &Path, accents: &[String]) -> Result<()> {
    let mut out = String::from("id,accent\n");
    for (i, a) in accents.iter().enumerate() {
        out.push_str(&format!("{i},{a}\n"));
    }
    write_atomic(path, out.as_bytes())
}

/// JSON manifest tying a feature file to its label file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub features: PathBuf,
    pub labels: PathBuf,
    pub label_map: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accents: Option<PathBuf>,
}

impl Manifest {
    /// Label strings ordered by class index. Indices must cover `0..K` exactly.
    pub fn ordered_labels(&self) -> Result<Vec<String>> {
        let k = self.label_map.len();
        let mut out = vec![None; k];
        for (label, &idx) in &self.label_map {
            if idx >= k || out[idx].is_some() {
                return Err(CldError::Label(format!(
                    "label_map indices must be a permutation of 0..{k}; bad index {idx} for {label:?}"
                )));
            }
            out[idx] = Some(label.clone());
        }
        Ok(out.into_iter().map(|l| l.expect("filled")).collect())
    }

    fn resolve(&self, base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| CldError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CldError::format(path, e.to_string()))
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(path, text.as_bytes())
}

/// Loaded manifest contents. `accents` is present when the manifest names an accent file.
pub struct ManifestData {
    pub features: FeatureMatrix,
    pub labels: LabelSet,
    pub accents: Option<Vec<String>>,
}

pub fn load_manifest_full(path: &Path) -> Result<ManifestData> {
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let label_map = manifest.ordered_labels()?;
    let features = read_features(&manifest.resolve(base, &manifest.features))?;
    let labels = read_labels(&manifest.resolve(base, &manifest.labels), &label_map)?;
    if features.n() != labels.n() {
        return Err(CldError::Alignment(format!(
            "{} feature rows but {} labels",
            features.n(),
            labels.n()
        )));
    }
    let accents = match &manifest.accents {
        Some(p) => {
            let a = read_accents(&manifest.resolve(base, p))?;
            if a.len() != features.n() {
                return Err(CldError::Alignment(format!(
                    "{} feature rows but {} accent ids",
                    features.n(),
                    a.len()
                )));
            }
            Some(a)
        }
        None => None,
    };
    Ok(ManifestData {
        features,
        labels,
        accents,
    })
}

pub fn load_manifest(path: &Path) -> Result<(FeatureMatrix, LabelSet)> {
    let data = load_manifest_full(path)?;
    Ok((data.features, data.labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn seq(frames: Array2<f64>, mask: &[u8]) -> SequenceFeature {
        SequenceFeature::new(frames, mask.iter().map(|&m| m == 1).collect()).unwrap()
    }

    #[test]
    fn csv_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "1,0\n0,1").unwrap();
        let x = read_features(&p).unwrap();
        assert_eq!(x.view(), Array2::<f64>::eye(2));
    }

    #[test]
    fn binary_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<f64> = (0..1600).map(|_| rng.random::<f32>() as f64 * 4.0 - 2.0).collect();
        let x = FeatureMatrix::new(Array2::from_shape_vec((100, 16), vals).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.cldf");
        write_features(&p, &x).unwrap();
        assert_eq!(read_features(&p).unwrap(), x);
    }

    #[test]
    fn nan_entry_names_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "1,2\n3,NaN\n").unwrap();
        let err = read_features(&p).unwrap_err().to_string();
        assert!(err.contains("row 1, col 1"), "{err}");

        let mut bytes = encode_features(&FeatureMatrix::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap());
        bytes[FEATURE_HEADER_LEN + 8..FEATURE_HEADER_LEN + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_features(&p, &bytes).unwrap_err().to_string();
        assert!(err.contains("row 1, col 0") && err.contains("byte offset 32"), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let p = Path::new("mem");
        let mut bytes = encode_features(&FeatureMatrix::new(array![[1.0, 2.0]]).unwrap());
        let err = decode_features(p, &bytes[..bytes.len() - 1]).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("byte offset 24"), "{err}");
        bytes[0] = b'X';
        let err = decode_features(p, &bytes).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn pooling_examples() {
        let f = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(pool_masked_mean(&seq(f.clone(), &[1, 1])).unwrap(), array![2.0, 3.0]);
        assert_eq!(pool_masked_mean(&seq(f.clone(), &[1, 0])).unwrap(), array![1.0, 2.0]);
        assert!(matches!(
            pool_masked_mean(&seq(f, &[0, 0])),
            Err(CldError::EmptyPool)
        ));
        let rep = Array2::from_shape_fn((5, 3), |(_, j)| [0.5, -1.25, 3.0][j]);
        assert_eq!(pool_masked_mean(&seq(rep, &[1; 5])).unwrap(), array![0.5, -1.25, 3.0]);
    }

    #[test]
    fn sequence_round_trip() {
        let s = seq(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.5]], &[1, 0, 1]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.clds");
        write_sequence(&p, &s).unwrap();
        assert_eq!(read_sequence(&p).unwrap(), s);
    }

    fn write_manifest_fixture(dir: &Path, feat_rows: usize, labels: &str) -> PathBuf {
        let x = Array2::from_shape_fn((feat_rows, 2), |(i, j)| (i + j) as f64);
        write_features(&dir.join("f.cldf"), &FeatureMatrix::new(x).unwrap()).unwrap();
        fs::write(dir.join("l.csv"), labels).unwrap();
        let m = Manifest {
            features: "f.cldf".into(),
            labels: "l.csv".into(),
            label_map: [("en".to_string(), 0), ("zh".to_string(), 1)].into(),
            accents: None,
        };
        let p = dir.join("m.json");
        write_manifest(&p, &m).unwrap();
        p
    }

    #[test]
    fn manifest_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest_fixture(dir.path(), 3, "id,label\n0,en\n1,zh\n2,en\n");
        let (x, y) = load_manifest(&p).unwrap();
        assert_eq!(x.n(), 3);
        assert_eq!(y.class_ids(), &[0, 1, 0]);
        assert_eq!(y.label_map(), &["en".to_string(), "zh".to_string()]);

        let labels9: String = (0..9).map(|i| format!("{i},en\n")).collect();
        let p = write_manifest_fixture(dir.path(), 10, &labels9);
        assert!(matches!(load_manifest(&p), Err(CldError::Alignment(_))));

        let p = write_manifest_fixture(dir.path(), 3, "");
        assert!(matches!(load_manifest(&p), Err(CldError::Label(_))));

        let p = write_manifest_fixture(dir.path(), 2, "0,en\n1,fr\n");
        assert!(matches!(load_manifest(&p), Err(CldError::Label(_))));
    }

    proptest! {
        #[test]
        fn pooling_ignores_masked_out_order(
            rows in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 2..8),
            mask_bits in proptest::collection::vec(any::<bool>(), 8),
            rot in 0usize..8,
        ) {
            let t = rows.len();
            let mut mask: Vec<bool> = mask_bits[..t].to_vec();
            mask[0] = true;
            let frames = Array2::from_shape_fn((t, 3), |(i, j)| rows[i][j]);
            let base = pool_masked_mean(&SequenceFeature::new(frames.clone(), mask.clone()).unwrap()).unwrap();
            // rotate the masked-out frames among themselves
            let out_idx: Vec<usize> = (0..t).filter(|&i| !mask[i]).collect();
            let mut perm: Vec<usize> = (0..t).collect();
            for (k, &i) in out_idx.iter().enumerate() {
                perm[i] = out_idx[(k + rot) % out_idx.len()];
            }
            let permuted = frames.select(Axis(0), &perm);
            let again = pool_masked_mean(&SequenceFeature::new(permuted, mask).unwrap()).unwrap();
            prop_assert_eq!(base, again);
        }

        #[test]
        fn binary_round_trip_is_bit_exact(vals in proptest::collection::vec(-1e6f32..1e6, 1..64), d in 1usize..4) {
            let n = vals.len() / d;
            prop_assume!(n >= 1);
            let x = FeatureMatrix::new(Array2::from_shape_fn((n, d), |(i, j)| vals[i * d + j] as f64)).unwrap();
            let bytes = encode_features(&x);
            prop_assert_eq!(decode_features(Path::new("mem"), &bytes).unwrap(), x);
        }
    }
}
