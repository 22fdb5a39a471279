//! Dense row-major matrices, a portable seeded RNG, and the scalar numerics
//! shared by every other module.
//!
//! Values are stored and accumulated in 64-bit floats. Anything that must
//! survive a 32-bit file format bit-exactly is snapped onto the f32 grid with
//! [`Matrix::quantize_f32`] at creation time, so a save/load round trip never
//! changes a single bit.

use thiserror::Error;

/// Errors raised by the numeric kernels.
#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("row {row} has norm {norm:e}, below the 1e-12 normalization floor")]
    ZeroVector { row: usize, norm: f64 },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    ShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("data length {len} does not fill {rows}x{cols}")]
    DataLength {
        len: usize,
        rows: usize,
        cols: usize,
    },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// Row-major dense matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                len: data.len(),
                rows,
                cols,
            });
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    row: i / cols.max(1),
                    col: i % cols.max(1),
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Stacks row slices into a matrix. All rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    expected_rows: rows.len(),
                    expected_cols: cols,
                    rows: rows.len(),
                    cols: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    /// `self · other`, accumulating each entry in f64.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                expected_rows: self.cols,
                expected_cols: other.cols,
                rows: other.rows,
                cols: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let orow = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b = other.row(k);
                for (j, &bkj) in b.iter().enumerate() {
                    orow[j] += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self += scale * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<(), TensorError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                expected_rows: self.rows,
                expected_cols: self.cols,
                rows: other.rows,
                cols: other.cols,
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Rank-1 update `self[i][j] += scale * a[i] * b[j]`.
    pub fn rank1_add(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let row = self.row_mut(i);
            for (j, &bj) in b.iter().enumerate() {
                row[j] += scale * ai * bj;
            }
        }
    }

    /// Snaps every entry onto the nearest f32 value (kept in f64 storage), so
    /// the f32 file payloads round-trip without loss.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `v · m` for a row vector `v` of length `m.rows()`.
pub fn vecmat(v: &[f64], m: &Matrix) -> Vec<f64> {
    debug_assert_eq!(v.len(), m.rows());
    let mut out = vec![0.0; m.cols()];
    for (k, &vk) in v.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        for (j, &mkj) in m.row(k).iter().enumerate() {
            out[j] += vk * mkj;
        }
    }
    out
}

/// `v · mᵀ`: one dot product against every row of `m`.
pub fn vecmat_t(v: &[f64], m: &Matrix) -> Vec<f64> {
    debug_assert_eq!(v.len(), m.cols());
    (0..m.rows()).map(|i| dot(v, m.row(i))).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a += scale * b` on slices.
pub fn axpy(a: &mut [f64], b: &[f64], scale: f64) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += scale * y;
    }
}

const NORM_FLOOR: f64 = 1e-12;

/// Normalizes one vector to unit Euclidean norm.
pub fn l2_normalized(v: &[f64]) -> Result<Vec<f64>, TensorError> {
    let n = norm(v);
    if n < NORM_FLOOR {
        return Err(TensorError::ZeroVector { row: 0, norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalizes every row of `m` to unit norm, preserving direction.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix, TensorError> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let n = norm(m.row(r));
        if n < NORM_FLOOR {
            return Err(TensorError::ZeroVector { row: r, norm: n });
        }
        for v in out.row_mut(r) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Max-subtracted softmax of `v / temperature`; entries sum to one and no
/// intermediate can overflow.
pub fn stable_softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>, TensorError> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(TensorError::InvalidTemperature(temperature));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// log σ(x) computed as −softplus(−x); finite for every finite input.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// FNV-1a 64-bit hash; the stable hash used for tokenization, substream
/// derivation, and tensor fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic RNG: xoshiro256** seeded through SplitMix64.
///
/// The generator and the derived samplers below (53-bit uniform doubles,
/// Box-Muller gaussians, modulo range reduction, Fisher-Yates shuffle) are
/// pinned here so that a given seed produces the identical stream on every
/// platform. Single-owner: not meant to be shared across threads.
#[derive(Debug, Clone)]
pub struct SeededRng {
    s: [u64; 4],
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        // SplitMix64 expansion of the seed into the xoshiro state.
        let mut x = seed;
        let mut next = || {
            x = x.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = x;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^ (z >> 31)
        };
        Self {
            s: [next(), next(), next(), next()],
        }
    }

    /// Independent substream for `seed`, keyed by a label. Used to keep data
    /// generation, parameter init, and batch shuffling on separate streams.
    pub fn derive(seed: u64, tag: &str) -> Self {
        Self::new(seed ^ fnv1a64(tag.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform double in [0, 1) from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; draws two uniforms per call.
    pub fn next_gaussian(&mut self) -> f64 {
        // u1 in (0, 1] so the log stays finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in [0, n). Modulo reduction; the bias is below n/2^64
    /// and irrelevant at the scales used here.
    pub fn next_range(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_range(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Matrix of i.i.d. N(0, scale²) draws.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut SeededRng, scale: f64) -> Matrix {
    assert!(
        rows >= 1 && cols >= 1,
        "gaussian_matrix needs a nonempty shape"
    );
    assert!(scale > 0.0, "gaussian_matrix needs scale > 0");
    let data = (0..rows * cols)
        .map(|_| scale * rng.next_gaussian())
        .collect();
    Matrix { rows, cols, data }
}

/// FNV-1a fingerprint of a matrix's shape and exact bit pattern.
pub fn matrix_fingerprint(m: &Matrix) -> u64 {
    let mut bytes = Vec::with_capacity(16 + m.data().len() * 8);
    bytes.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fnv1a64(&bytes)
}
