//! Small dense kernels shared by the attention, locality and simulation code.
//!
//! Everything here is 64-bit and deterministic. Matrices are row-major and
//! owned; there is no broadcasting and no SIMD.

use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("matrix data has {got} entries, expected {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },
    #[error("softmax over an empty support (every entry is -inf)")]
    EmptySupport,
    #[error("top-k with k = {k} exceeds the {len} available scores")]
    TopKTooLarge { k: usize, len: usize },
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = NumericsError;

    fn try_from(raw: RawMatrix) -> Result<Self, Self::Error> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DataLength {
                rows,
                cols,
                got: data.len(),
            });
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row slices; all rows must have the same width.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericsError::Shape {
                    op: "from_rows",
                    lhs: (1, cols),
                    rhs: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// An empty matrix with a fixed width, ready for [`Matrix::push_row`].
    pub fn with_cols(cols: usize) -> Self {
        Self {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<(), NumericsError> {
        if row.len() != self.cols {
            return Err(NumericsError::Shape {
                op: "push_row",
                lhs: self.shape(),
                rhs: (1, row.len()),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copies columns `[start, start + width)` into a new matrix.
    pub fn column_slice(&self, start: usize, width: usize) -> Result<Self, NumericsError> {
        if start + width > self.cols {
            return Err(NumericsError::Shape {
                op: "column_slice",
                lhs: self.shape(),
                rhs: (start, width),
            });
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Ok(Self {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield `rows` empty slices.
        let cols = self.cols;
        (0..self.rows).map(move |i| &self.data[i * cols..(i + 1) * cols])
    }
}

/// Per-token or per-block scores. Entries may be `-inf` where a mask says so.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for ScoreVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ScoreVector {
    type Target = Vec<f64>;

    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for ScoreVector {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a · b` in row-major order with an i-k-j loop.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    if a.cols != b.rows {
        return Err(NumericsError::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (kk, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(kk)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Row vector times matrix: `x · m`.
pub fn vecmat(x: &[f64], m: &Matrix) -> Result<Vec<f64>, NumericsError> {
    if x.len() != m.rows {
        return Err(NumericsError::Shape {
            op: "vecmat",
            lhs: (1, x.len()),
            rhs: m.shape(),
        });
    }
    let mut out = vec![0.0; m.cols];
    for (kk, &xk) in x.iter().enumerate() {
        for (o, &mkj) in out.iter_mut().zip(m.row(kk)) {
            *o += xk * mkj;
        }
    }
    Ok(out)
}

/// Max-shifted softmax. `-inf` entries come back as exactly zero.
pub fn softmax_stable(scores: &ScoreVector) -> Result<ScoreVector, NumericsError> {
    let max = scores
        .iter()
        .copied()
        .filter(|s| *s != f64::NEG_INFINITY)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NumericsError::EmptySupport);
    }
    let mut out: Vec<f64> = scores
        .iter()
        .map(|&s| {
            if s == f64::NEG_INFINITY {
                0.0
            } else {
                (s - max).exp()
            }
        })
        .collect();
    let total: f64 = out.iter().sum();
    for w in &mut out {
        *w /= total;
    }
    Ok(ScoreVector(out))
}

/// Indices of the `k` largest scores, returned in ascending index order.
///
/// Ordering is total: higher score first, equal scores resolved toward the
/// lower index. The result is therefore unique for any input.
pub fn argtopk(scores: &[f64], k: usize) -> Result<Vec<usize>, NumericsError> {
    if k > scores.len() {
        return Err(NumericsError::TopKTooLarge {
            k,
            len: scores.len(),
        });
    }
    let idx: Vec<usize> = (0..scores.len()).collect();
    Ok(topk_of(scores, idx, k))
}

/// Top-k restricted to `candidates` (indices into `scores`), same tie rule.
pub(crate) fn topk_of(scores: &[f64], mut candidates: Vec<usize>, k: usize) -> Vec<usize> {
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, order);
        candidates.truncate(k);
    }
    candidates.sort_unstable();
    candidates
}

/// Element precision used when reproducing the precision-sensitivity of
/// score compression. Computation stays in `f64`; `F32` rounds values
/// through `f32` at the point where it is applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
        }
    }
}

/// ChaCha8 stream keyed by `(seed, stream)`. Distinct streams of one seed
/// are independent, which is how per-layer and per-head generators split.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard-normal matrix, bit-reproducible for a given seed.
pub fn seeded_normal(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = stream_rng(seed, 0);
    normal_from(&mut rng, rows, cols)
}

pub fn normal_from(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix { rows, cols, data }
}
