//! Exact cosine-similarity index over corpus items.
//!
//! Every corpus item carries a unit-norm caption embedding. The index keeps
//! the embeddings as a row-major `f32` matrix (the on-disk representation) and
//! widens to `f64` for scoring, so persisted and in-memory scores agree
//! bit-for-bit.
//!
//! On disk an index is two files:
//!
//! * `<name>.umvr`: magic `UMVR`, `u32` version, `u32` dimension, `u64` count,
//!   then `count * dimension` little-endian `f32` values.
//! * `<name>.meta.jsonl`: one JSON object per record, in row order.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default embedding dimension.
pub const DEFAULT_DIM: usize = 768;

const MAGIC: &[u8; 4] = b"UMVR";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;
const ZERO_EPS: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("vector has no non-zero component")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector is not unit norm (norm = {norm})")]
    NotUnitNorm { norm: f64 },
    #[error("vector contains a non-finite component")]
    NonFinite,
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("unknown record id `{0}`")]
    UnknownId(String),
    #[error("record `{id}` has {count} {field}; at most 5 allowed")]
    TooManyItems {
        id: String,
        field: &'static str,
        count: usize,
    },
    #[error("unsupported index format: {0}")]
    FormatVersionMismatch(String),
    #[error("metadata line {line}: {source}")]
    Metadata {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// A unit-norm dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps a vector that is already unit norm (within 1e-6).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite);
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(StoreError::NotUnitNorm { norm });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales `raw` to unit L2 norm.
///
/// `dim` is the dimension the caller expects; a mismatch is rejected.
pub fn normalize(raw: &[f64], dim: usize) -> Result<Embedding> {
    if raw.len() != dim {
        return Err(StoreError::DimensionMismatch {
            expected: dim,
            actual: raw.len(),
        });
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(StoreError::NonFinite);
    }
    if raw.iter().all(|v| v.abs() < ZERO_EPS) {
        return Err(StoreError::ZeroVector);
    }
    // Scale by the max magnitude first so the squared sum cannot overflow.
    let scale = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scaled: Vec<f64> = raw.iter().map(|v| v / scale).collect();
    let norm = l2_norm(&scaled);
    Ok(Embedding(scaled.into_iter().map(|v| v / norm).collect()))
}

/// Dot product of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(StoreError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(dot(a.values(), b.values()).clamp(-1.0, 1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Metadata describing one corpus video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    #[serde(default)]
    pub caption: String,
    #[serde(default)]
    pub objects: Vec<String>,
    #[serde(default)]
    pub scene_keywords: Vec<String>,
    #[serde(default)]
    pub frame_timestamps: Vec<f64>,
}

impl VideoRecord {
    /// Plain-text rendering used wherever the video's meta-information is
    /// passed to a generation backend instead of frames.
    pub fn meta_text(&self) -> String {
        format!(
            "caption: {}; objects: {}; scene: {}",
            self.caption,
            self.objects.join(", "),
            self.scene_keywords.join(", ")
        )
    }
}

/// One `(id, score)` hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub score: f64,
}

/// Hits ordered by descending score, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityList(Vec<Scored>);

impl SimilarityList {
    pub fn entries(&self) -> &[Scored] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.0.iter().map(|s| s.score).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.0.iter().map(|s| s.id.as_str()).collect()
    }

    /// 1-based position of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.0.iter().position(|s| s.id == id).map(|p| p + 1)
    }

    pub fn truncated(&self, k: usize) -> SimilarityList {
        SimilarityList(self.0.iter().take(k).cloned().collect())
    }
}

/// Total order used for every ranking: score descending, then id ascending.
pub fn rank_order(a: &Scored, b: &Scored) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

/// Brute-force cosine index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    records: Vec<VideoRecord>,
    matrix: Vec<f32>,
    rows: HashMap<String, usize>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
            matrix: Vec::new(),
            rows: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[VideoRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&VideoRecord> {
        self.rows.get(id).map(|&r| &self.records[r])
    }

    /// Adds a record with its caption embedding.
    pub fn insert(&mut self, record: VideoRecord, embedding: &Embedding) -> Result<()> {
        if embedding.dim() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                actual: embedding.dim(),
            });
        }
        if self.rows.contains_key(&record.id) {
            return Err(StoreError::DuplicateId(record.id));
        }
        validate_record(&record)?;
        self.rows.insert(record.id.clone(), self.records.len());
        self.matrix
            .extend(embedding.values().iter().map(|&v| v as f32));
        self.records.push(record);
        Ok(())
    }

    fn row(&self, r: usize) -> &[f32] {
        &self.matrix[r * self.dim..(r + 1) * self.dim]
    }

    /// The stored caption embedding of `id`, widened to `f64`.
    pub fn embedding(&self, id: &str) -> Result<Embedding> {
        let r = *self
            .rows
            .get(id)
            .ok_or_else(|| StoreError::UnknownId(id.to_string()))?;
        Ok(Embedding(self.row(r).iter().map(|&v| f64::from(v)).collect()))
    }

    fn score_row(&self, r: usize, query: &[f64]) -> f64 {
        self.row(r)
            .iter()
            .zip(query)
            .map(|(&a, b)| f64::from(a) * b)
            .sum::<f64>()
            .clamp(-1.0, 1.0)
    }

    /// Every item ranked against `query`.
    pub fn rank_all(&self, query: &Embedding) -> Result<SimilarityList> {
        if self.is_empty() {
            return Err(StoreError::EmptyIndex);
        }
        if query.dim() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let mut hits: Vec<Scored> = self
            .records
            .iter()
            .enumerate()
            .map(|(r, rec)| Scored {
                id: rec.id.clone(),
                score: self.score_row(r, query.values()),
            })
            .collect();
        hits.sort_by(rank_order);
        Ok(SimilarityList(hits))
    }

    /// The `k` most similar items; `k` larger than the index returns all.
    pub fn top_k(&self, query: &Embedding, k: usize) -> Result<SimilarityList> {
        if k == 0 {
            return Err(StoreError::InvalidK);
        }
        let mut all = self.rank_all(query)?;
        all.0.truncate(k);
        Ok(all)
    }

    /// Writes `<path>` and its `.meta.jsonl` sidecar. Both files are written
    /// to temporaries and renamed into place.
    pub fn persist(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let meta_path = meta_path(path);

        let tmp = tmp_path(path);
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            w.write_all(&(self.dim as u32).to_le_bytes())?;
            w.write_all(&(self.records.len() as u64).to_le_bytes())?;
            for v in &self.matrix {
                w.write_all(&v.to_le_bytes())?;
            }
            w.flush()?;
        }

        let meta_tmp = tmp_path(&meta_path);
        {
            let mut w = BufWriter::new(fs::File::create(&meta_tmp)?);
            for rec in &self.records {
                serde_json::to_writer(&mut w, rec).map_err(io::Error::from)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }

        fs::rename(&meta_tmp, &meta_path)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;

        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(StoreError::FormatVersionMismatch("bad magic".into()));
            }
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated header").into());
        }
        if &bytes[..4] != MAGIC {
            return Err(StoreError::FormatVersionMismatch("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(StoreError::FormatVersionMismatch(format!(
                "version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let expected = (count as u128) * (dim as u128) * 4 + HEADER_LEN as u128;
        if (bytes.len() as u128) != expected {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("expected {expected} bytes, found {}", bytes.len()),
            )
            .into());
        }
        let count = count as usize;
        let matrix: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let meta = BufReader::new(fs::File::open(meta_path(path))?);
        let mut records = Vec::with_capacity(count);
        for (i, line) in meta.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VideoRecord = serde_json::from_str(&line)
                .map_err(|source| StoreError::Metadata { line: i + 1, source })?;
            records.push(rec);
        }
        if records.len() != count {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("metadata has {} records, matrix has {count}", records.len()),
            )
            .into());
        }

        let mut rows = HashMap::with_capacity(count);
        for (r, rec) in records.iter().enumerate() {
            if rows.insert(rec.id.clone(), r).is_some() {
                return Err(StoreError::DuplicateId(rec.id.clone()));
            }
        }
        Ok(Self {
            dim,
            records,
            matrix,
            rows,
        })
    }
}

fn validate_record(record: &VideoRecord) -> Result<()> {
    for (field, items) in [
        ("objects", &record.objects),
        ("scene_keywords", &record.scene_keywords),
    ] {
        if items.len() > 5 {
            return Err(StoreError::TooManyItems {
                id: record.id.clone(),
                field,
                count: items.len(),
            });
        }
    }
    Ok(())
}

/// Sidecar path: `dir/name.umvr` -> `dir/name.meta.jsonl`.
pub fn meta_path(index_path: &Path) -> PathBuf {
    let stem = index_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "index".to_string());
    index_path.with_file_name(format!("{stem}.meta.jsonl"))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis(dim: usize, i: usize) -> Embedding {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Embedding::from_unit(v).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
        let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(&raw, dim).unwrap()
    }

    fn record(id: &str) -> VideoRecord {
        VideoRecord {
            id: id.to_string(),
            caption: format!("caption of {id}"),
            objects: vec!["man".into()],
            scene_keywords: vec!["indoor".into()],
            frame_timestamps: vec![0.0, 1.5],
        }
    }

    #[test]
    fn normalize_three_four_five() {
        let mut v = vec![0.0; 8];
        v[0] = 3.0;
        v[1] = 4.0;
        let e = normalize(&v, 8).unwrap();
        assert!((e.values()[0] - 0.6).abs() < 1e-15);
        assert!((e.values()[1] - 0.8).abs() < 1e-15);
        assert!(e.values()[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_basis_is_identity() {
        let e = normalize(basis(5, 2).values(), 5).unwrap();
        assert_eq!(e, basis(5, 2));
    }

    #[test]
    fn normalize_random_768_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<f64> = (0..768).map(|_| rng.random_range(-5.0..5.0)).collect();
        let e = normalize(&raw, 768).unwrap();
        // Recompute the norm in reverse order.
        let norm: f64 = e.values().iter().rev().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        // Direction preserved.
        let ratio = e.values()[0] / raw[0];
        for (a, b) in e.values().iter().zip(&raw) {
            assert!((a - b * ratio).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_errors() {
        assert!(matches!(normalize(&[0.0; 4], 4), Err(StoreError::ZeroVector)));
        assert!(matches!(normalize(&[1e-13; 4], 4), Err(StoreError::ZeroVector)));
        assert!(matches!(
            normalize(&[1.0; 3], 4),
            Err(StoreError::DimensionMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&basis(4, 0), &basis(4, 0)).unwrap(), 1.0);
        assert_eq!(cosine(&basis(4, 0), &basis(4, 1)).unwrap(), 0.0);
        assert!(cosine(&basis(4, 0), &basis(3, 0)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_unit(&mut rng, 64);
            let b = random_unit(&mut rng, 64);
            let mut brute = 0.0;
            for i in 0..64 {
                brute += a.values()[i] * b.values()[i];
            }
            assert!((cosine(&a, &b).unwrap() - brute).abs() < 1e-9);
        }
    }

    #[test]
    fn top_k_orthogonal() {
        let mut idx = EmbeddingIndex::new(3);
        for i in 0..3 {
            idx.insert(record(&format!("id{i}")), &basis(3, i)).unwrap();
        }
        let hits = idx.top_k(&basis(3, 2), 1).unwrap();
        assert_eq!(hits.entries(), &[Scored { id: "id2".into(), score: 1.0 }]);

        let all = idx.top_k(&basis(3, 2), 3).unwrap();
        assert_eq!(all.ids(), vec!["id2", "id0", "id1"]);
        assert_eq!(idx.top_k(&basis(3, 2), 10).unwrap().len(), 3);
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut idx = EmbeddingIndex::new(16);
        let mut items = Vec::new();
        for i in 0..50 {
            let e = random_unit(&mut rng, 16);
            idx.insert(record(&format!("v{i:02}")), &e).unwrap();
            items.push((format!("v{i:02}"), e));
        }
        let q = random_unit(&mut rng, 16);
        let mut oracle: Vec<(String, f64)> = items
            .iter()
            .map(|(id, e)| {
                let stored: Vec<f64> = e.values().iter().map(|&v| f64::from(v as f32)).collect();
                let s: f64 = stored.iter().zip(q.values()).map(|(a, b)| a * b).sum();
                (id.clone(), s)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got = idx.top_k(&q, 10).unwrap();
        let expect: Vec<&str> = oracle.iter().take(10).map(|(id, _)| id.as_str()).collect();
        assert_eq!(got.ids(), expect);
        for w in got.entries().windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let mut idx = EmbeddingIndex::new(2);
        idx.insert(record("b"), &basis(2, 0)).unwrap();
        idx.insert(record("a"), &basis(2, 0)).unwrap();
        idx.insert(record("c"), &basis(2, 1)).unwrap();
        assert_eq!(idx.top_k(&basis(2, 0), 3).unwrap().ids(), vec!["a", "b", "c"]);
    }

    #[test]
    fn insert_rejects_bad_input() {
        let mut idx = EmbeddingIndex::new(2);
        idx.insert(record("a"), &basis(2, 0)).unwrap();
        assert!(matches!(
            idx.insert(record("a"), &basis(2, 1)),
            Err(StoreError::DuplicateId(_))
        ));
        assert!(matches!(
            idx.insert(record("b"), &basis(3, 1)),
            Err(StoreError::DimensionMismatch { .. })
        ));
        let mut r = record("c");
        r.objects = (0..6).map(|i| i.to_string()).collect();
        assert!(matches!(
            idx.insert(r, &basis(2, 1)),
            Err(StoreError::TooManyItems { .. })
        ));
    }

    #[test]
    fn empty_index_and_zero_k() {
        let idx = EmbeddingIndex::new(2);
        assert!(matches!(idx.top_k(&basis(2, 0), 1), Err(StoreError::EmptyIndex)));
        let mut idx = EmbeddingIndex::new(2);
        idx.insert(record("a"), &basis(2, 0)).unwrap();
        assert!(matches!(idx.top_k(&basis(2, 0), 0), Err(StoreError::InvalidK)));
    }

    #[test]
    fn persist_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.umvr");

        let empty = EmbeddingIndex::new(4);
        empty.persist(&path).unwrap();
        assert_eq!(EmbeddingIndex::load(&path).unwrap(), empty);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut idx = EmbeddingIndex::new(8);
        for i in 0..10 {
            idx.insert(record(&format!("r{i}")), &random_unit(&mut rng, 8))
                .unwrap();
        }
        idx.persist(&path).unwrap();
        assert!(dir.path().join("corpus.meta.jsonl").exists());
        let back = EmbeddingIndex::load(&path).unwrap();
        for rec in idx.records() {
            assert_eq!(back.get(&rec.id), Some(rec));
            let a = idx.embedding(&rec.id).unwrap();
            let b = back.embedding(&rec.id).unwrap();
            let bits_a: Vec<u64> = a.values().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back, idx);
    }

    #[test]
    fn truncated_or_foreign_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.umvr");
        let mut idx = EmbeddingIndex::new(4);
        idx.insert(record("a"), &basis(4, 0)).unwrap();
        idx.persist(&path).unwrap();

        let bytes = fs::read(&path).unwrap();
        for cut in [0, 3, 10, HEADER_LEN, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            match EmbeddingIndex::load(&path) {
                Err(StoreError::Io(_)) | Err(StoreError::FormatVersionMismatch(_)) => {}
                other => panic!("cut {cut}: unexpected {other:?}"),
            }
        }

        let mut bad = bytes.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            EmbeddingIndex::load(&path),
            Err(StoreError::FormatVersionMismatch(_))
        ));
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            EmbeddingIndex::load(&path),
            Err(StoreError::FormatVersionMismatch(_))
        ));
    }
}
