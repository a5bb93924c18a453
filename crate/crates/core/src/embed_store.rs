//! Exact cosine top-k search over precomputed embeddings.
//!
//! Two on-disk formats are supported:
//!
//! * JSONL, one `{"id": ..., "vector": [...]}` object per line.
//! * A packed little-endian layout: magic `EMBV1\0`, `u8` version (1),
//!   `u32` dimension, `u64` count, then per record a `u16` id length, the id
//!   bytes, and `dimension` `f32` values.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

pub const PACKED_MAGIC: &[u8; 6] = b"EMBV1\0";
pub const PACKED_VERSION: u8 = 1;
/// Magic, version, dimension and count.
pub const PACKED_HEADER_LEN: usize = 6 + 1 + 4 + 8;

/// Vectors whose L2 norm is already within this distance of 1 are stored as-is.
const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("malformed packed store at byte offset {offset}: {message}")]
    MalformedPacked { offset: usize, message: String },
    #[error("record `{id}` has dimension {found}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("empty id")]
    EmptyId,
    #[error("record `{0}` has a zero or non-finite vector")]
    DegenerateVector(String),
    #[error("query has dimension {found}, store has dimension {expected}")]
    QueryDimension { expected: usize, found: usize },
    #[error("query vector is zero or non-finite")]
    DegenerateQuery,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("id `{0}` is longer than 65535 bytes")]
    IdTooLong(String),
    #[error("unknown store format `{0}` (expected jsonl or packed)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreFormat {
    Jsonl,
    Packed,
}

impl FromStr for StoreFormat {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(StoreFormat::Jsonl),
            "packed" => Ok(StoreFormat::Packed),
            other => Err(StoreError::UnknownFormat(other.to_string())),
        }
    }
}

impl StoreFormat {
    /// Guess from the file extension: `.jsonl`/`.json` is JSONL, anything else packed.
    pub fn from_path(path: &Path) -> StoreFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => StoreFormat::Jsonl,
            _ => StoreFormat::Packed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    /// Zero only for a store ingested from an empty JSONL file.
    pub dimension: usize,
    pub count: usize,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    pub normalize: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { normalize: true }
    }
}

/// Immutable in-memory embedding store. Safe to query from many threads.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dimension: usize,
    normalized: bool,
    ids: Vec<String>,
    data: Vec<f32>,
    inv_norms: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn from_records<I>(records: I, options: IngestOptions) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = EmbeddingRecord>,
    {
        let mut builder = Builder::new(options, None);
        for rec in records {
            builder.push(rec.id, rec.vector)?;
        }
        Ok(builder.finish())
    }

    pub fn ingest(
        path: &Path,
        format: StoreFormat,
        options: IngestOptions,
    ) -> Result<Self, StoreError> {
        let bytes = fs::read(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        match format {
            StoreFormat::Jsonl => Self::parse_jsonl(&bytes, options),
            StoreFormat::Packed => Self::parse_packed(&bytes, options),
        }
    }

    pub fn parse_jsonl(bytes: &[u8], options: IngestOptions) -> Result<Self, StoreError> {
        let text = std::str::from_utf8(bytes).map_err(|e| {
            let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
            StoreError::MalformedLine {
                line,
                message: "invalid UTF-8".into(),
            }
        })?;
        let mut builder = Builder::new(options, None);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord =
                serde_json::from_str(line).map_err(|e| StoreError::MalformedLine {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            builder.push(rec.id, rec.vector)?;
        }
        Ok(builder.finish())
    }

    pub fn parse_packed(bytes: &[u8], options: IngestOptions) -> Result<Self, StoreError> {
        let mut cur = Cursor { bytes, offset: 0 };
        let magic = cur.take(PACKED_MAGIC.len())?;
        if magic != PACKED_MAGIC {
            return Err(StoreError::MalformedPacked {
                offset: 0,
                message: "bad magic".into(),
            });
        }
        let version = cur.take(1)?[0];
        if version != PACKED_VERSION {
            return Err(StoreError::MalformedPacked {
                offset: 6,
                message: format!("unsupported version {version}"),
            });
        }
        let dimension = u32::from_le_bytes(cur.array()?) as usize;
        if dimension == 0 {
            return Err(StoreError::MalformedPacked {
                offset: 7,
                message: "dimension must be positive".into(),
            });
        }
        let count = u64::from_le_bytes(cur.array()?);
        let mut builder = Builder::new(options, Some(dimension));
        for _ in 0..count {
            let id_offset = cur.offset;
            let id_len = u16::from_le_bytes(cur.array()?) as usize;
            let id = std::str::from_utf8(cur.take(id_len)?)
                .map_err(|_| StoreError::MalformedPacked {
                    offset: id_offset + 2,
                    message: "id is not valid UTF-8".into(),
                })?
                .to_string();
            let mut vector = Vec::with_capacity(dimension);
            for _ in 0..dimension {
                vector.push(f32::from_le_bytes(cur.array()?));
            }
            builder.push(id, vector)?;
        }
        if cur.offset != bytes.len() {
            return Err(StoreError::MalformedPacked {
                offset: cur.offset,
                message: "trailing bytes after last record".into(),
            });
        }
        Ok(builder.finish())
    }

    pub fn manifest(&self) -> StoreManifest {
        StoreManifest {
            dimension: self.dimension,
            count: self.ids.len(),
            normalized: self.normalized,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.vector(i))
    }

    fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn records(&self) -> impl Iterator<Item = EmbeddingRecord> + '_ {
        self.ids.iter().enumerate().map(|(i, id)| EmbeddingRecord {
            id: id.clone(),
            vector: self.vector(i).to_vec(),
        })
    }

    /// Exact top-k by cosine similarity, ties broken by id ascending.
    pub fn topk(&self, query: &[f32], k: usize) -> Result<Vec<ScoredHit>, StoreError> {
        if k == 0 {
            return Err(StoreError::ZeroK);
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if query.len() != self.dimension {
            return Err(StoreError::QueryDimension {
                expected: self.dimension,
                found: query.len(),
            });
        }
        let qnorm = l2_norm(query);
        if !(qnorm.is_finite() && qnorm > 0.0) {
            return Err(StoreError::DegenerateQuery);
        }
        let q: Vec<f64> = query.iter().map(|&x| x as f64 / qnorm).collect();

        let scores = par::map_range(self.len(), |i| {
            let dot: f64 = self
                .vector(i)
                .iter()
                .zip(&q)
                .map(|(&v, &w)| v as f64 * w)
                .sum();
            let score = if self.normalized {
                dot
            } else {
                dot * self.inv_norms[i]
            };
            // Fold -0.0 into +0.0 so equal scores tie-break on id.
            score + 0.0
        });

        let mut order: Vec<usize> = (0..self.len()).collect();
        let cmp = |a: &usize, b: &usize| {
            scores[*b]
                .total_cmp(&scores[*a])
                .then_with(|| self.ids[*a].cmp(&self.ids[*b]))
        };
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| ScoredHit {
                id: self.ids[i].clone(),
                score: scores[i],
            })
            .collect())
    }

    pub fn export(&self, path: &Path, format: StoreFormat) -> Result<(), StoreError> {
        let bytes = match format {
            StoreFormat::Jsonl => self.to_jsonl(),
            StoreFormat::Packed => self.to_packed()?,
        };
        let io = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for rec in self.records() {
            serde_json::to_writer(&mut out, &rec).expect("serializing a record cannot fail");
            out.push(b'\n');
        }
        out
    }

    pub fn to_packed(&self) -> Result<Vec<u8>, StoreError> {
        let mut out = Vec::with_capacity(PACKED_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(PACKED_MAGIC);
        out.push(PACKED_VERSION);
        // An empty JSONL store has no dimension; packed headers require one.
        out.extend_from_slice(&(self.dimension.max(1) as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            let len = u16::try_from(id.len()).map_err(|_| StoreError::IdTooLong(id.clone()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in self.vector(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

struct Builder {
    options: IngestOptions,
    dimension: Option<usize>,
    ids: Vec<String>,
    data: Vec<f32>,
    inv_norms: Vec<f64>,
    index: HashMap<String, usize>,
}

impl Builder {
    fn new(options: IngestOptions, dimension: Option<usize>) -> Self {
        Builder {
            options,
            dimension,
            ids: Vec::new(),
            data: Vec::new(),
            inv_norms: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, id: String, mut vector: Vec<f32>) -> Result<(), StoreError> {
        if id.is_empty() {
            return Err(StoreError::EmptyId);
        }
        let expected = *self.dimension.get_or_insert(vector.len());
        if vector.len() != expected || expected == 0 {
            return Err(StoreError::DimensionMismatch {
                id,
                expected,
                found: vector.len(),
            });
        }
        if self.index.contains_key(&id) {
            return Err(StoreError::DuplicateId(id));
        }
        let norm = l2_norm(&vector);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(StoreError::DegenerateVector(id));
        }
        let mut inv = 1.0 / norm;
        if self.options.normalize && (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            for x in vector.iter_mut() {
                *x = (*x as f64 / norm) as f32;
            }
            inv = 1.0 / l2_norm(&vector);
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(&vector);
        self.inv_norms.push(inv);
        Ok(())
    }

    fn finish(self) -> EmbeddingStore {
        EmbeddingStore {
            dimension: self.dimension.unwrap_or(0),
            normalized: self.options.normalize,
            ids: self.ids,
            data: self.data,
            inv_norms: self.inv_norms,
            index: self.index,
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(s)
            }
            None => Err(StoreError::MalformedPacked {
                offset: self.offset,
                message: format!("unexpected end of file, wanted {n} bytes"),
            }),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], StoreError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, v: &[f32]) -> EmbeddingRecord {
        EmbeddingRecord {
            id: id.into(),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn signed_zero_scores_tie_on_id() {
        // "b" scores 0.0 * -1 = -0.0, "a" scores +0.0.
        let store = EmbeddingStore::from_records(
            [rec("b", &[-1.0, 0.0]), rec("a", &[1.0, 0.0]), rec("c", &[0.0, 1.0])],
            IngestOptions::default(),
        )
        .unwrap();
        let ids: Vec<String> = store.topk(&[0.0, 1.0], 3).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn jsonl_ingest_counts_records() {
        let text = br#"{"id":"a","vector":[1,0,0,0]}
{"id":"b","vector":[0,1,0,0]}

{"id":"c","vector":[0,0,1,0.5]}
"#;
        let store = EmbeddingStore::parse_jsonl(text, IngestOptions::default()).unwrap();
        assert_eq!(
            store.manifest(),
            StoreManifest {
                dimension: 4,
                count: 3,
                normalized: true
            }
        );
    }

    #[test]
    fn dimension_mismatch_names_offending_id() {
        let text = br#"{"id":"a","vector":[1,0,0,0]}
{"id":"short","vector":[1,0,0]}"#;
        let err = EmbeddingStore::parse_jsonl(text, IngestOptions::default()).unwrap_err();
        match err {
            StoreError::DimensionMismatch { id, expected, found } => {
                assert_eq!((id.as_str(), expected, found), ("short", 4, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = b"{\"id\":\"a\",\"vector\":[1]}\nnot json\n";
        let err = EmbeddingStore::parse_jsonl(text, IngestOptions::default()).unwrap_err();
        assert!(matches!(err, StoreError::MalformedLine { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_and_zero_vectors_rejected() {
        let dup = EmbeddingStore::from_records(
            [rec("a", &[1.0]), rec("a", &[2.0])],
            IngestOptions::default(),
        );
        assert!(matches!(dup, Err(StoreError::DuplicateId(_))));
        let zero = EmbeddingStore::from_records([rec("z", &[0.0, 0.0])], IngestOptions::default());
        assert!(matches!(zero, Err(StoreError::DegenerateVector(_))));
    }

    #[test]
    fn self_and_orthogonal_similarity() {
        let store = EmbeddingStore::from_records(
            [rec("x", &[3.0, 4.0, 0.0])],
            IngestOptions::default(),
        )
        .unwrap();
        let hits = store.topk(&[3.0, 4.0, 0.0], 5).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, "x");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        let hits = store.topk(&[0.0, 0.0, 2.0], 1).unwrap();
        assert!(hits[0].score.abs() < 1e-6);
    }

    #[test]
    fn ties_break_on_id() {
        let store = EmbeddingStore::from_records(
            [rec("b", &[1.0, 0.0]), rec("a", &[1.0, 0.0]), rec("c", &[0.0, 1.0])],
            IngestOptions::default(),
        )
        .unwrap();
        let ids: Vec<_> = store
            .topk(&[1.0, 0.0], 3)
            .unwrap()
            .into_iter()
            .map(|h| h.id)
            .collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn query_errors() {
        let store =
            EmbeddingStore::from_records([rec("a", &[1.0, 0.0])], IngestOptions::default()).unwrap();
        assert!(matches!(
            store.topk(&[1.0], 1),
            Err(StoreError::QueryDimension { expected: 2, found: 1 })
        ));
        assert!(matches!(store.topk(&[1.0, 0.0], 0), Err(StoreError::ZeroK)));
        assert!(matches!(
            store.topk(&[0.0, 0.0], 1),
            Err(StoreError::DegenerateQuery)
        ));
        let empty = EmbeddingStore::from_records([], IngestOptions::default()).unwrap();
        assert!(empty.topk(&[1.0, 2.0, 3.0], 4).unwrap().is_empty());
    }

    #[test]
    fn unnormalized_store_still_scores_cosine() {
        let opts = IngestOptions { normalize: false };
        let store = EmbeddingStore::from_records([rec("a", &[2.0, 0.0])], opts).unwrap();
        assert_eq!(store.get("a").unwrap(), &[2.0, 0.0]);
        let hit = &store.topk(&[5.0, 5.0], 1).unwrap()[0];
        assert!((hit.score - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn packed_layout_length() {
        let store =
            EmbeddingStore::from_records([rec("a", &[1.0, 0.0])], IngestOptions::default()).unwrap();
        let bytes = store.to_packed().unwrap();
        assert_eq!(bytes.len(), PACKED_HEADER_LEN + 2 + 1 + 8);
        assert_eq!(&bytes[..6], b"EMBV1\0");
        assert_eq!(bytes[6], 1);
        assert_eq!(&bytes[7..11], &2u32.to_le_bytes());
        assert_eq!(&bytes[11..19], &1u64.to_le_bytes());
    }

    #[test]
    fn truncated_packed_reports_offset() {
        let store =
            EmbeddingStore::from_records([rec("a", &[1.0, 0.0])], IngestOptions::default()).unwrap();
        let bytes = store.to_packed().unwrap();
        let err = EmbeddingStore::parse_packed(&bytes[..bytes.len() - 3], IngestOptions::default())
            .unwrap_err();
        assert!(matches!(err, StoreError::MalformedPacked { offset: 26, .. }), "{err}");
    }

    #[test]
    fn jsonl_export_is_one_line_per_record() {
        let store =
            EmbeddingStore::from_records([rec("a", &[0.5])], IngestOptions { normalize: false })
                .unwrap();
        let text = String::from_utf8(store.to_jsonl()).unwrap();
        assert_eq!(text, "{\"id\":\"a\",\"vector\":[0.5]}\n");
    }
}
