//! On-disk formats shared by every stage of the pipeline.
//!
//! Embedding files are a 24-byte little-endian header followed by a dense
//! row-major `f32` payload:
//!
//! | bytes  | content                          |
//! |--------|----------------------------------|
//! | 0..8   | magic `b"LABOEMB\0"`             |
//! | 8..12  | version `u32` (= 1)              |
//! | 12..16 | rows `u32`                       |
//! | 16..20 | dim `u32`                        |
//! | 20..24 | flags `u32` (bit 0 = normalized) |
//!
//! Concept catalogs and image labels are JSON Lines.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"LABOEMB\0";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
const FLAG_NORMALIZED: u32 = 1;
const NORM_TOLERANCE: f64 = 1e-4;

pub type ConceptId = u64;
pub type ClassId = usize;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic header")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("payload holds {actual} bytes, header implies {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("row {row} has norm {norm}, but matrix is flagged normalized")]
    NotNormalized { row: usize, norm: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate concept_id {0}")]
    DuplicateId(ConceptId),
    #[error("line {line}: class_id {class_id} out of range for {n_classes} classes")]
    LabelOutOfRange {
        line: usize,
        class_id: ClassId,
        n_classes: usize,
    },
    #[error("label index {index} exceeds embedding rows {rows}")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major matrix of `f32` feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Builds a matrix, checking the shape and that every value is finite.
    /// The `normalized` flag is verified against the actual row norms.
    pub fn new(rows: usize, dim: usize, values: Vec<f32>, normalized: bool) -> Result<Self, StoreError> {
        if rows * dim != values.len() {
            return Err(StoreError::DimMismatch {
                expected: rows * dim * 4,
                actual: values.len() * 4,
            });
        }
        let m = Self {
            rows,
            dim,
            values,
            normalized,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            values: vec![0.0; rows * dim],
            normalized: false,
        }
    }

    /// Stacks rows of equal length. An empty iterator yields a `0 x dim` matrix.
    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: impl IntoIterator<Item = R>) -> Result<Self, StoreError> {
        let mut values = Vec::new();
        let mut n = 0;
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(StoreError::Invalid(format!(
                    "row {n} has length {}, expected {dim}",
                    row.len()
                )));
            }
            values.extend_from_slice(row);
            n += 1;
        }
        Self::new(n, dim, values, false)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            dim: self.dim,
            values,
            normalized: self.normalized,
        }
    }

    /// Divides each row by its L2 norm (computed in f64).
    pub fn normalize_rows(&self) -> Result<Self, StoreError> {
        let mut values = Vec::with_capacity(self.values.len());
        for (i, row) in self.iter_rows().enumerate() {
            let norm = l2_norm(row);
            if norm == 0.0 {
                return Err(StoreError::ZeroNormRow(i));
            }
            values.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
        }
        Ok(Self {
            rows: self.rows,
            dim: self.dim,
            values,
            normalized: true,
        })
    }

    fn validate(&self) -> Result<(), StoreError> {
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                row: pos / self.dim,
                col: pos % self.dim,
            });
        }
        if self.normalized {
            for (row, r) in self.iter_rows().enumerate() {
                let norm = l2_norm(r);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(StoreError::NotNormalized { row, norm });
                }
            }
        }
        Ok(())
    }

    /// Serializes header and payload into a byte vector.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        let flags = if self.normalized { FLAG_NORMALIZED } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(8);
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let rows = word(12) as usize;
        let dim = word(16) as usize;
        let flags = word(20);
        let payload = &bytes[HEADER_LEN..];
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or(StoreError::DimMismatch {
                expected: usize::MAX,
                actual: payload.len(),
            })?;
        if payload.len() != expected {
            return Err(StoreError::DimMismatch {
                expected,
                actual: payload.len(),
            });
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, dim, values, flags & FLAG_NORMALIZED != 0)
    }
}

fn l2_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, StoreError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    EmbeddingMatrix::from_bytes(&bytes)
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&m.to_bytes())?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub concept_id: ConceptId,
    pub text: String,
    pub class_id: ClassId,
    pub prompt_id: u32,
    pub sanitized: bool,
}

/// Ordered list of candidate concepts. Row `r` of the concept embedding file
/// embeds entry `r`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptCatalog {
    entries: Vec<ConceptEntry>,
}

impl ConceptCatalog {
    pub fn new(entries: Vec<ConceptEntry>) -> Result<Self, StoreError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.concept_id) {
                return Err(StoreError::DuplicateId(e.concept_id));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ConceptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ConceptId) -> Option<&ConceptEntry> {
        self.entries.iter().find(|e| e.concept_id == id)
    }

    /// Checks that no sanitized entry still mentions its own class name.
    pub fn validate_sanitized(&self, class_names: &[String]) -> Result<(), StoreError> {
        for e in self.entries.iter().filter(|e| e.sanitized) {
            let Some(name) = class_names.get(e.class_id) else {
                continue;
            };
            if crate::concept_prep::contains_phrase(&e.text, name) {
                return Err(StoreError::Invalid(format!(
                    "sanitized concept {} still contains class name {name:?}",
                    e.concept_id
                )));
            }
        }
        Ok(())
    }
}

/// Reads a JSON Lines file into typed records. Blank lines are skipped;
/// line numbers in errors are 1-based.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>, StoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<ConceptCatalog, StoreError> {
    ConceptCatalog::new(read_jsonl(path)?)
}

pub fn save_catalog(catalog: &ConceptCatalog, path: impl AsRef<Path>) -> Result<(), StoreError> {
    write_jsonl(path, catalog.entries())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub index: usize,
    pub class_id: ClassId,
    pub split: Split,
}

/// All label records of a dataset, across splits.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTable {
    records: Vec<LabelRecord>,
    n_classes: usize,
}

impl LabelTable {
    pub fn new(records: Vec<LabelRecord>, n_classes: usize) -> Result<Self, StoreError> {
        for (i, r) in records.iter().enumerate() {
            if r.class_id >= n_classes {
                return Err(StoreError::LabelOutOfRange {
                    line: i + 1,
                    class_id: r.class_id,
                    n_classes,
                });
            }
        }
        Ok(Self { records, n_classes })
    }

    pub fn records(&self) -> &[LabelRecord] {
        &self.records
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Extracts one split, gathering the referenced embedding rows.
    pub fn split(&self, embeddings: &EmbeddingMatrix, split: Split) -> Result<LabeledImageSet, StoreError> {
        let mut indices = Vec::new();
        let mut labels = Vec::new();
        for r in self.records.iter().filter(|r| r.split == split) {
            if r.index >= embeddings.rows() {
                return Err(StoreError::IndexOutOfRange {
                    index: r.index,
                    rows: embeddings.rows(),
                });
            }
            indices.push(r.index);
            labels.push(r.class_id);
        }
        LabeledImageSet::new(embeddings.select_rows(&indices), labels, split, self.n_classes)
    }
}

pub fn load_labels(path: impl AsRef<Path>, n_classes: usize) -> Result<LabelTable, StoreError> {
    LabelTable::new(read_jsonl(path)?, n_classes)
}

pub fn save_labels(table: &LabelTable, path: impl AsRef<Path>) -> Result<(), StoreError> {
    write_jsonl(path, table.records())
}

/// Image embeddings of one split together with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub embeddings: EmbeddingMatrix,
    pub labels: Vec<ClassId>,
    pub split: Split,
    n_classes: usize,
}

impl LabeledImageSet {
    pub fn new(
        embeddings: EmbeddingMatrix,
        labels: Vec<ClassId>,
        split: Split,
        n_classes: usize,
    ) -> Result<Self, StoreError> {
        if labels.len() != embeddings.rows() {
            return Err(StoreError::Invalid(format!(
                "{} labels for {} embedding rows",
                labels.len(),
                embeddings.rows()
            )));
        }
        if let Some((line, &class_id)) = labels.iter().enumerate().find(|(_, &c)| c >= n_classes) {
            return Err(StoreError::LabelOutOfRange {
                line: line + 1,
                class_id,
                n_classes,
            });
        }
        Ok(Self {
            embeddings,
            labels,
            split,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    /// Row indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_classes];
        for (i, &c) in self.labels.iter().enumerate() {
            groups[c].push(i);
        }
        groups
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            embeddings: self.embeddings.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            n_classes: self.n_classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_three_four_five() {
        let m = EmbeddingMatrix::new(1, 2, vec![3.0, 4.0], false).unwrap();
        let n = m.normalize_rows().unwrap();
        assert!(n.is_normalized());
        assert!((n.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_row_is_rejected() {
        let m = EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0], false).unwrap();
        assert!(matches!(m.normalize_rows(), Err(StoreError::ZeroNormRow(1))));
    }

    #[test]
    fn empty_matrix_is_header_only() {
        let m = EmbeddingMatrix::zeros(0, 16);
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 24);
        let back = EmbeddingMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(back.rows(), 0);
        assert_eq!(back.dim(), 16);
    }

    #[test]
    fn short_payload_is_dim_mismatch() {
        let mut bytes = EmbeddingMatrix::zeros(2, 3).to_bytes();
        bytes.truncate(HEADER_LEN + 5 * 4);
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes),
            Err(StoreError::DimMismatch { expected: 24, actual: 20 })
        ));
        // trailing garbage is not silently ignored either
        let mut bytes = EmbeddingMatrix::zeros(2, 3).to_bytes();
        bytes.push(0);
        assert!(matches!(EmbeddingMatrix::from_bytes(&bytes), Err(StoreError::DimMismatch { .. })));
    }

    #[test]
    fn bad_magic_and_truncated_header() {
        let mut bytes = EmbeddingMatrix::zeros(1, 1).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(EmbeddingMatrix::from_bytes(&bytes), Err(StoreError::BadMagic)));
        assert!(matches!(EmbeddingMatrix::from_bytes(&MAGIC[..]), Err(StoreError::BadMagic)));
    }

    #[test]
    fn nan_is_rejected_on_load() {
        let mut bytes = EmbeddingMatrix::zeros(2, 2).to_bytes();
        bytes[HEADER_LEN + 12..HEADER_LEN + 16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes),
            Err(StoreError::NonFinite { row: 1, col: 1 })
        ));
    }

    #[test]
    fn normalized_flag_is_verified() {
        assert!(matches!(
            EmbeddingMatrix::new(1, 2, vec![1.0, 1.0], true),
            Err(StoreError::NotNormalized { row: 0, .. })
        ));
    }

    #[test]
    fn header_layout_is_fixed() {
        let m = EmbeddingMatrix::new(1, 2, vec![0.6, 0.8], true).unwrap();
        let b = m.to_bytes();
        assert_eq!(&b[..8], b"LABOEMB\0");
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(&b[12..16], &[1, 0, 0, 0]);
        assert_eq!(&b[16..20], &[2, 0, 0, 0]);
        assert_eq!(&b[20..24], &[1, 0, 0, 0]);
        assert_eq!(&b[24..28], &0.6f32.to_le_bytes());
    }

    #[test]
    fn duplicate_concept_id_rejected() {
        let e = |id| ConceptEntry {
            concept_id: id,
            text: "x".into(),
            class_id: 0,
            prompt_id: 0,
            sanitized: false,
        };
        assert!(matches!(
            ConceptCatalog::new(vec![e(7), e(3), e(7)]),
            Err(StoreError::DuplicateId(7))
        ));
    }

    #[test]
    fn label_out_of_range() {
        let r = LabelRecord {
            index: 0,
            class_id: 3,
            split: Split::Train,
        };
        assert!(matches!(
            LabelTable::new(vec![r], 3),
            Err(StoreError::LabelOutOfRange { line: 1, class_id: 3, .. })
        ));
    }

    #[test]
    fn split_extraction_gathers_rows() {
        let emb = EmbeddingMatrix::new(3, 1, vec![10.0, 20.0, 30.0], false).unwrap();
        let recs = vec![
            LabelRecord { index: 2, class_id: 1, split: Split::Test },
            LabelRecord { index: 0, class_id: 0, split: Split::Train },
            LabelRecord { index: 1, class_id: 1, split: Split::Test },
        ];
        let table = LabelTable::new(recs, 2).unwrap();
        let test = table.split(&emb, Split::Test).unwrap();
        assert_eq!(test.labels, vec![1, 1]);
        assert_eq!(test.embeddings.values(), &[30.0, 20.0]);
    }
}
