//! Exact inner-product top-K retrieval over a normalized gallery, with
//! on-disk caching and hard-negative mining.
//!
//! Both the stored rows and the query are unit-normalized, so inner product
//! equals cosine similarity. Search is an exact full scan with a bounded
//! heap; ties break by ascending row index so results are reproducible.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{atomic_write, read_emb1, write_emb1, DataError, Gallery};
use crate::tensor::{dot, l2_normalize_rows, l2_normalized, Matrix, TensorError};

pub const FIP1_MAGIC: [u8; 4] = *b"FIP1";
pub const FIP1_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index over an empty gallery")]
    EmptyGallery,
    #[error("query dim {got} does not match index dim {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("gallery has a single row; no negative can be mined")]
    NoNegative,
    #[error("row {row} is out of range for an index of {rows} rows")]
    NotFound { row: usize, rows: usize },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("format version {found} is not the supported {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// One retrieved gallery entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub id: String,
    pub row: usize,
    pub score: f64,
}

/// Hits sorted by descending score, ties by ascending row.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub entries: Vec<SearchHit>,
}

impl SearchResult {
    /// Rank of `id` in the result list, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }
}

/// Exact inner-product index: unit-normalized gallery snapshot plus ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIpIndex {
    ids: Vec<String>,
    normalized: Matrix,
    id_to_row: std::collections::HashMap<String, usize>,
}

/// Candidate ordering for the bounded heap: "worse" means lower score, or
/// equal score with a higher row index.
#[derive(PartialEq)]
struct HeapEntry {
    score: f64,
    row: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Max-heap on "badness": the peek is the worst kept candidate.
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.row.cmp(&other.row))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl FlatIpIndex {
    /// Normalizes every gallery row and snapshots it (on the f32 grid, so a
    /// cache file round-trips bit-exactly).
    pub fn build(gallery: &Gallery) -> Result<Self, IndexError> {
        if gallery.is_empty() {
            return Err(IndexError::EmptyGallery);
        }
        let mut normalized = l2_normalize_rows(gallery.embeddings())?;
        normalized.quantize_f32();
        Ok(Self::from_parts(gallery.ids().to_vec(), normalized))
    }

    fn from_parts(ids: Vec<String>, normalized: Matrix) -> Self {
        let id_to_row = ids
            .iter()
            .enumerate()
            .map(|(row, id)| (id.clone(), row))
            .collect();
        Self {
            ids,
            normalized,
            id_to_row,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.normalized.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn normalized(&self) -> &Matrix {
        &self.normalized
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.id_to_row.get(id).copied()
    }

    /// Exact top-k by inner product. The query is normalized internally;
    /// k larger than the gallery clamps to the gallery size.
    pub fn search(&self, query: &[f64], k: usize) -> Result<SearchResult, IndexError> {
        assert!(k >= 1, "search requires k >= 1");
        if query.len() != self.dim() {
            return Err(IndexError::DimMismatch {
                expected: self.dim(),
                got: query.len(),
            });
        }
        let q = l2_normalized(query)?;
        let k = k.min(self.len());
        let mut heap = std::collections::BinaryHeap::with_capacity(k + 1);
        for row in 0..self.len() {
            let score = dot(&q, self.normalized.row(row));
            if heap.len() < k {
                heap.push(HeapEntry { score, row });
            } else if let Some(worst) = heap.peek() {
                // Later rows never beat an equal-scored earlier row.
                if score > worst.score {
                    heap.pop();
                    heap.push(HeapEntry { score, row });
                }
            }
        }
        let mut picked: Vec<HeapEntry> = heap.into_vec();
        picked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.row.cmp(&b.row)));
        let entries = picked
            .into_iter()
            .map(|e| SearchHit {
                id: self.ids[e.row].clone(),
                row: e.row,
                score: e.score,
            })
            .collect();
        Ok(SearchResult { entries })
    }

    /// Searches many queries; parallel over queries, output order matches
    /// input order regardless of thread count.
    pub fn search_batch(
        &self,
        queries: &Matrix,
        k: usize,
    ) -> Result<Vec<SearchResult>, IndexError> {
        (0..queries.rows())
            .into_par_iter()
            .map(|r| self.search(queries.row(r), k))
            .collect()
    }

    /// Mines a hard negative for `positive_row`: queries the index with the
    /// positive's own stored embedding and returns the first of the top-k
    /// neighbors whose row differs.
    pub fn mine_hard_negative(&self, positive_row: usize, k: usize) -> Result<usize, IndexError> {
        if positive_row >= self.len() {
            return Err(IndexError::NotFound {
                row: positive_row,
                rows: self.len(),
            });
        }
        if self.len() < 2 {
            return Err(IndexError::NoNegative);
        }
        // k >= 2 guarantees at least one non-self candidate survives.
        let result = self.search(self.normalized.row(positive_row), k.max(2))?;
        result
            .entries
            .iter()
            .find(|e| e.row != positive_row)
            .map(|e| e.row)
            .ok_or(IndexError::NoNegative)
    }
}

/// Writes the index cache: `FIP1` magic, u32 version, then the EMB1 payload
/// of the normalized matrix and id mapping.
pub fn save_index(ix: &FlatIpIndex, path: &Path) -> Result<(), IndexError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&FIP1_MAGIC);
    buf.extend_from_slice(&FIP1_VERSION.to_le_bytes());
    write_emb1(&mut buf, ix.ids(), ix.normalized()).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    atomic_write(path, &buf)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<FlatIpIndex, IndexError> {
    let file = File::open(path).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| IndexError::TruncatedFile("magic".into()))?;
    if magic != FIP1_MAGIC {
        return Err(IndexError::BadMagic {
            expected: FIP1_MAGIC,
            found: magic,
        });
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)
        .map_err(|_| IndexError::TruncatedFile("version".into()))?;
    let version = u32::from_le_bytes(vbuf);
    if version != FIP1_VERSION {
        return Err(IndexError::VersionMismatch {
            expected: FIP1_VERSION,
            found: version,
        });
    }
    let (ids, normalized) = read_emb1(&mut r)?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe).ok() == Some(1) {
        return Err(IndexError::TruncatedFile("trailing bytes".into()));
    }
    Ok(FlatIpIndex::from_parts(ids, normalized))
}
