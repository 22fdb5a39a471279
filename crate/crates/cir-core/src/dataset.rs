//! Data contracts: embedding galleries, triplet files, split handling,
//! caption tokenization, and the planted synthetic generator.
//!
//! The synthetic dataset plants a linear map: each target embedding is a
//! fixed seeded transform of its reference embedding plus the mean edit
//! direction of its caption tokens, so retrieval quality is measurable
//! against an exact oracle without any pretrained encoder.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{fnv1a64, gaussian_matrix, l2_normalized, Matrix, SeededRng, TensorError};

pub const PAD_TOKEN: u32 = 0;
pub const IMAGE_MARKER_TOKEN: u32 = 1;
/// First token id assignable to a caption word; ids below are reserved.
pub const FIRST_WORD_TOKEN: u32 = 2;

pub const DEFAULT_MAX_LEN: usize = 77;

/// Categories assigned round-robin to synthetic records.
pub const CATEGORIES: [&str; 3] = ["shirt", "dress", "toptee"];

/// Image preprocessing constants recorded for anyone attaching a real
/// encoder; no pixel processing happens in this crate. The CLIP and
/// ImageNet normalization statistics disagree; both are kept verbatim.
pub mod preprocess {
    pub const IMAGE_SIZE: u32 = 224;
    pub const RESIZE_FILTER: &str = "bicubic";
    pub const CLIP_MEAN: [f64; 3] = [0.481, 0.457, 0.408];
    pub const CLIP_STD: [f64; 3] = [0.268, 0.261, 0.276];
    pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
    pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("trailing bytes after payload")]
    TrailingData,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("id {id:?} not present in the gallery")]
    UnknownId { id: String },
    #[error("image id {id:?} appears in both {first} and {second} splits")]
    SplitLeak {
        id: String,
        first: Split,
        second: Split,
    },
    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` atomically: temp file in the same directory,
/// then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Splits and tokenization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Fixed-length token sequence: image marker, hashed word ids, then padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub pad_mask: Vec<bool>,
}

impl TokenSeq {
    pub fn len_tokens(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    /// Word token ids (skips the image marker and padding).
    pub fn word_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.ids
            .iter()
            .zip(&self.pad_mask)
            .skip(1)
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
    }
}

/// Tokenizes a caption: position 0 is the image-marker token, whitespace
/// words hash stably into [2, vocab_size), then zero padding up to `max_len`.
pub fn tokenize(caption: &str, vocab_size: usize, max_len: usize) -> TokenSeq {
    assert!(max_len >= 2, "max_len must be at least 2");
    assert!(
        vocab_size >= 3,
        "vocab_size must leave room for word tokens"
    );
    let mut ids = Vec::with_capacity(max_len);
    let mut pad_mask = Vec::with_capacity(max_len);
    ids.push(IMAGE_MARKER_TOKEN);
    pad_mask.push(true);
    for word in caption.split_whitespace() {
        if ids.len() == max_len {
            break;
        }
        let span = vocab_size as u64 - u64::from(FIRST_WORD_TOKEN);
        ids.push(FIRST_WORD_TOKEN + (fnv1a64(word.as_bytes()) % span) as u32);
        pad_mask.push(true);
    }
    while ids.len() < max_len {
        ids.push(PAD_TOKEN);
        pad_mask.push(false);
    }
    TokenSeq { ids, pad_mask }
}

// ---------------------------------------------------------------------------
// Gallery
// ---------------------------------------------------------------------------

/// The retrieval corpus: an ordered id list and one embedding row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    ids: Vec<String>,
    embeddings: Matrix,
    id_to_row: HashMap<String, usize>,
}

impl Gallery {
    pub fn new(ids: Vec<String>, embeddings: Matrix) -> Result<Self, DataError> {
        if ids.len() != embeddings.rows() {
            return Err(DataError::DimMismatch {
                expected: ids.len(),
                found: embeddings.rows(),
            });
        }
        let mut id_to_row = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if id_to_row.insert(id.clone(), row).is_some() {
                return Err(DataError::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            ids,
            embeddings,
            id_to_row,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.id_to_row.get(id).copied()
    }

    pub fn embedding_of(&self, id: &str) -> Option<&[f64]> {
        self.row_of(id).map(|r| self.embeddings.row(r))
    }

    /// Sub-gallery restricted to `keep`, rows ordered by ascending id.
    pub fn subset_sorted(&self, keep: &BTreeSet<String>) -> Result<Gallery, DataError> {
        let mut ids = Vec::with_capacity(keep.len());
        let mut rows = Vec::with_capacity(keep.len());
        for id in keep {
            let row = self
                .row_of(id)
                .ok_or_else(|| DataError::UnknownId { id: id.clone() })?;
            ids.push(id.clone());
            rows.push(self.embeddings.row(row).to_vec());
        }
        Gallery::new(ids, Matrix::from_rows(&rows)?)
    }
}

// ---------------------------------------------------------------------------
// EMB1 binary format
// ---------------------------------------------------------------------------

pub const EMB1_MAGIC: [u8; 4] = *b"EMB1";

fn read_exact_or_truncated<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    what: &str,
) -> Result<(), DataError> {
    r.read_exact(buf)
        .map_err(|_| DataError::TruncatedFile(what.to_string()))
}

/// Writes the EMB1 payload: magic, u32 row count, u32 dim, then per row a
/// u16 id length, the UTF-8 id bytes, and dim little-endian f32 values.
pub fn write_emb1<W: Write>(w: &mut W, ids: &[String], m: &Matrix) -> std::io::Result<()> {
    assert_eq!(ids.len(), m.rows());
    w.write_all(&EMB1_MAGIC)?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for (row, id) in ids.iter().enumerate() {
        let id_bytes = id.as_bytes();
        assert!(id_bytes.len() <= u16::MAX as usize, "id too long for EMB1");
        w.write_all(&(id_bytes.len() as u16).to_le_bytes())?;
        w.write_all(id_bytes)?;
        for &v in m.row(row) {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads one EMB1 payload from `r`, leaving the reader positioned after it.
pub fn read_emb1<R: Read>(r: &mut R) -> Result<(Vec<String>, Matrix), DataError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic, "magic")?;
    if magic != EMB1_MAGIC {
        return Err(DataError::BadMagic {
            expected: EMB1_MAGIC,
            found: magic,
        });
    }
    let mut u32buf = [0u8; 4];
    read_exact_or_truncated(r, &mut u32buf, "row count")?;
    let rows = u32::from_le_bytes(u32buf) as usize;
    read_exact_or_truncated(r, &mut u32buf, "dim")?;
    let dim = u32::from_le_bytes(u32buf) as usize;

    let mut ids = Vec::with_capacity(rows);
    let mut data = Vec::with_capacity(rows * dim);
    for row in 0..rows {
        let mut lenbuf = [0u8; 2];
        read_exact_or_truncated(r, &mut lenbuf, &format!("id length of row {row}"))?;
        let id_len = u16::from_le_bytes(lenbuf) as usize;
        let mut id_bytes = vec![0u8; id_len];
        read_exact_or_truncated(r, &mut id_bytes, &format!("id of row {row}"))?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| DataError::TruncatedFile(format!("id of row {row} is not UTF-8")))?;
        ids.push(id);
        let mut valbuf = vec![0u8; dim * 4];
        read_exact_or_truncated(r, &mut valbuf, &format!("values of row {row}"))?;
        for chunk in valbuf.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(DataError::NonFinite { row });
            }
            data.push(f64::from(v));
        }
    }
    let m = Matrix::from_vec(rows, dim, data)?;
    Ok((ids, m))
}

pub fn save_gallery(g: &Gallery, path: &Path) -> Result<(), DataError> {
    let mut buf = Vec::new();
    write_emb1(&mut buf, g.ids(), g.embeddings()).map_err(|e| io_err(path, e))?;
    atomic_write(path, &buf)
}

pub fn load_gallery(path: &Path) -> Result<Gallery, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let (ids, m) = read_emb1(&mut r)?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(|e| io_err(path, e))? != 0 {
        return Err(DataError::TrailingData);
    }
    Gallery::new(ids, m)
}

// ---------------------------------------------------------------------------
// Triplets
// ---------------------------------------------------------------------------

/// One (caption, reference, target) record with its split and category tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletRecord {
    pub caption: String,
    pub caption_tokens: TokenSeq,
    pub reference_id: String,
    pub target_id: String,
    pub category: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet {
    pub records: Vec<TripletRecord>,
}

impl TripletSet {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TripletRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Image ids referenced by any record in `splits`, ascending.
    pub fn image_ids(&self, splits: &[Split]) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for rec in &self.records {
            if splits.contains(&rec.split) {
                out.insert(rec.reference_id.clone());
                out.insert(rec.target_id.clone());
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct TripletLine {
    caption: String,
    reference: String,
    target: String,
    category: String,
    split: Split,
}

/// Validates id resolution and split disjointness, then tokenizes captions.
fn build_triplet_set(
    lines: Vec<TripletLine>,
    gallery: &Gallery,
    vocab_size: usize,
    max_len: usize,
) -> Result<TripletSet, DataError> {
    let mut split_of: HashMap<String, Split> = HashMap::new();
    let mut records = Vec::with_capacity(lines.len());
    for line in lines {
        for id in [&line.reference, &line.target] {
            if gallery.row_of(id).is_none() {
                return Err(DataError::UnknownId { id: id.clone() });
            }
            match split_of.get(id) {
                Some(&prev) if prev != line.split => {
                    return Err(DataError::SplitLeak {
                        id: id.clone(),
                        first: prev,
                        second: line.split,
                    });
                }
                Some(_) => {}
                None => {
                    split_of.insert(id.clone(), line.split);
                }
            }
        }
        records.push(TripletRecord {
            caption_tokens: tokenize(&line.caption, vocab_size, max_len),
            caption: line.caption,
            reference_id: line.reference,
            target_id: line.target,
            category: line.category,
            split: line.split,
        });
    }
    Ok(TripletSet { records })
}

/// Loads a line-delimited JSON triplet file and validates it against the
/// gallery: every id must resolve and no image id may span two splits.
pub fn load_triplets(
    path: &Path,
    gallery: &Gallery,
    vocab_size: usize,
    max_len: usize,
) -> Result<TripletSet, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: TripletLine = serde_json::from_str(raw).map_err(|source| DataError::Json {
            line: i + 1,
            source,
        })?;
        lines.push(line);
    }
    build_triplet_set(lines, gallery, vocab_size, max_len)
}

pub fn save_triplets(triplets: &TripletSet, path: &Path) -> Result<(), DataError> {
    let mut buf = Vec::new();
    for rec in &triplets.records {
        let line = TripletLine {
            caption: rec.caption.clone(),
            reference: rec.reference_id.clone(),
            target: rec.target_id.clone(),
            category: rec.category.clone(),
            split: rec.split,
        };
        buf.extend_from_slice(&serde_json::to_vec(&line).expect("triplet line serializes"));
        buf.push(b'\n');
    }
    atomic_write(path, &buf)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Configuration of the planted synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub gallery_size: usize,
    pub dim: usize,
    pub vocab_size: usize,
    pub edit_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub split_fractions: (f64, f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            gallery_size: 2000,
            dim: 64,
            vocab_size: 50,
            edit_dim: 16,
            noise_sigma: 0.05,
            seed: 7,
            split_fractions: (0.8, 0.1, 0.1),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let (a, b, c) = self.split_fractions;
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidConfig(format!(
                "split fractions {:?} do not sum to 1",
                self.split_fractions
            )));
        }
        if self.gallery_size < 10 {
            return Err(DataError::InvalidConfig(
                "gallery_size must be at least 10".into(),
            ));
        }
        if self.vocab_size < 3 {
            return Err(DataError::InvalidConfig(
                "vocab_size must be at least 3".into(),
            ));
        }
        if self.dim == 0 || self.edit_dim == 0 {
            return Err(DataError::InvalidConfig("dims must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// The generative map of the synthetic dataset, kept for oracle use:
/// `target = l2_normalize(reference · A + edit · B + noise)` where `edit` is
/// the mean of the caption tokens' direction rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    /// A: dim x dim reference transform.
    pub reference_map: Matrix,
    /// B: edit_dim x dim edit transform.
    pub edit_map: Matrix,
    /// One edit direction row (edit_dim wide) per token id.
    pub token_directions: Matrix,
}

impl PlantedTruth {
    /// Mean edit direction of the caption's word tokens; zero if none.
    pub fn edit_vector(&self, tokens: &TokenSeq) -> Vec<f64> {
        let mut e = vec![0.0; self.token_directions.cols()];
        let mut count = 0usize;
        for id in tokens.word_ids() {
            let row = self.token_directions.row(id as usize);
            for (acc, v) in e.iter_mut().zip(row) {
                *acc += v;
            }
            count += 1;
        }
        if count > 0 {
            for v in &mut e {
                *v /= count as f64;
            }
        }
        e
    }

    /// The noise-free planted query for a record: where the target sits.
    pub fn ideal_query(
        &self,
        reference: &[f64],
        tokens: &TokenSeq,
    ) -> Result<Vec<f64>, TensorError> {
        let mut q = crate::tensor::vecmat(reference, &self.reference_map);
        let e = self.edit_vector(tokens);
        let shift = crate::tensor::vecmat(&e, &self.edit_map);
        for (a, b) in q.iter_mut().zip(&shift) {
            *a += b;
        }
        l2_normalized(&q)
    }
}

fn row_ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn save_truth(truth: &PlantedTruth, dir: &Path) -> Result<(), DataError> {
    let files = [
        ("truth_a.emb1", &truth.reference_map),
        ("truth_b.emb1", &truth.edit_map),
        ("truth_tokens.emb1", &truth.token_directions),
    ];
    for (name, m) in files {
        let mut buf = Vec::new();
        write_emb1(&mut buf, &row_ids("", m.rows()), m).map_err(|e| io_err(&dir.join(name), e))?;
        atomic_write(&dir.join(name), &buf)?;
    }
    Ok(())
}

pub fn load_truth(dir: &Path) -> Result<PlantedTruth, DataError> {
    let load = |name: &str| -> Result<Matrix, DataError> {
        let path = dir.join(name);
        let file = File::open(&path).map_err(|e| io_err(&path, e))?;
        let (_, m) = read_emb1(&mut BufReader::new(file))?;
        Ok(m)
    };
    let reference_map = load("truth_a.emb1")?;
    let edit_map = load("truth_b.emb1")?;
    let token_directions = load("truth_tokens.emb1")?;
    if edit_map.cols() != reference_map.cols() {
        return Err(DataError::DimMismatch {
            expected: reference_map.cols(),
            found: edit_map.cols(),
        });
    }
    if token_directions.cols() != edit_map.rows() {
        return Err(DataError::DimMismatch {
            expected: edit_map.rows(),
            found: token_directions.cols(),
        });
    }
    Ok(PlantedTruth {
        reference_map,
        edit_map,
        token_directions,
    })
}

/// Generates the planted dataset: gallery, triplet records, and truth.
///
/// Images come in (reference, target) pairs. Pairs are assigned wholly to
/// one split, so no image id can cross splits. Captions are 1-5 words drawn
/// from a fixed synthetic lexicon whose hashed token ids index the planted
/// edit-direction table.
pub fn generate_synthetic(
    cfg: &SynthConfig,
) -> Result<(Gallery, TripletSet, PlantedTruth), DataError> {
    cfg.validate()?;
    let dim = cfg.dim;
    let edit_dim = cfg.edit_dim;

    let mut truth_rng = SeededRng::derive(cfg.seed, "planted-truth");
    let mut reference_map = gaussian_matrix(dim, dim, &mut truth_rng, 1.0 / (dim as f64).sqrt());
    let mut edit_map = gaussian_matrix(
        edit_dim,
        dim,
        &mut truth_rng,
        1.0 / (edit_dim as f64).sqrt(),
    );
    let mut token_directions = gaussian_matrix(
        cfg.vocab_size,
        edit_dim,
        &mut truth_rng,
        1.0 / (edit_dim as f64).sqrt(),
    );
    reference_map.quantize_f32();
    edit_map.quantize_f32();
    token_directions.quantize_f32();
    let truth = PlantedTruth {
        reference_map,
        edit_map,
        token_directions,
    };

    // Lexicon of caption words; their hashed ids index the direction table.
    let lexicon: Vec<String> = (0..cfg.vocab_size.max(8) * 2)
        .map(|i| format!("attr{i:03}"))
        .collect();

    let n_images = cfg.gallery_size;
    let n_pairs = n_images / 2;
    let ids: Vec<String> = (0..n_images).map(|i| format!("img{i:05}")).collect();
    let mut embeddings = Matrix::zeros(n_images, dim);

    let (f_train, f_val, _) = cfg.split_fractions;
    let n_train = (n_pairs as f64 * f_train).round() as usize;
    let n_val = ((n_pairs as f64 * f_val).round() as usize).min(n_pairs - n_train);

    let mut data_rng = SeededRng::derive(cfg.seed, "synthetic-data");
    let ref_scale = 1.0 / (dim as f64).sqrt();
    let mut records = Vec::with_capacity(n_pairs);
    for pair in 0..n_pairs {
        let ref_row = 2 * pair;
        let tgt_row = 2 * pair + 1;

        let mut reference: Vec<f64> = (0..dim)
            .map(|_| ref_scale * data_rng.next_gaussian())
            .collect();
        for v in &mut reference {
            *v = *v as f32 as f64;
        }

        let n_words = 1 + data_rng.next_range(5);
        let words: Vec<&str> = (0..n_words)
            .map(|_| lexicon[data_rng.next_range(lexicon.len())].as_str())
            .collect();
        let caption = words.join(" ");
        let tokens = tokenize(&caption, cfg.vocab_size, DEFAULT_MAX_LEN);

        let mut target = crate::tensor::vecmat(&reference, &truth.reference_map);
        let edit = truth.edit_vector(&tokens);
        let shift = crate::tensor::vecmat(&edit, &truth.edit_map);
        for (t, s) in target.iter_mut().zip(&shift) {
            *t += s;
        }
        if cfg.noise_sigma > 0.0 {
            for t in target.iter_mut() {
                *t += cfg.noise_sigma * data_rng.next_gaussian();
            }
        }
        let mut target = l2_normalized(&target)?;
        for v in &mut target {
            *v = *v as f32 as f64;
        }

        embeddings.row_mut(ref_row).copy_from_slice(&reference);
        embeddings.row_mut(tgt_row).copy_from_slice(&target);

        let split = if pair < n_train {
            Split::Train
        } else if pair < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        records.push(TripletRecord {
            caption,
            caption_tokens: tokens,
            reference_id: ids[ref_row].clone(),
            target_id: ids[tgt_row].clone(),
            category: CATEGORIES[pair % CATEGORIES.len()].to_string(),
            split,
        });
    }

    let gallery = Gallery::new(ids, embeddings)?;
    Ok((gallery, TripletSet { records }, truth))
}
