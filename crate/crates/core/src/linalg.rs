//! Minimal dense linear algebra and deterministic random initialization.
//!
//! Everything here works on row-major `f64` matrices. The sizes involved are
//! tiny (desk scale), so clarity and reproducibility win over throughput:
//! plain triple loops, no blocking, no BLAS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense 2-D array of `f64` with explicit shape, row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!(
                "matrix shape must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(
                "from_vec",
                format!("{rows}x{cols}"),
                format!("data length {}", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("matrix entries must be finite".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Test/readability helper: builds from nested row slices.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Matrix {
            rows: r,
            cols: c,
            data: rows.iter().flat_map(|row| row.iter().copied()).collect(),
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// Row-major backing slice.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of column `j`.
    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (i, val) in v.iter().enumerate() {
            self.data[i * self.cols + j] = *val;
        }
    }

    /// Assembles a matrix from equal-length columns.
    pub fn from_cols(cols: &[Vec<f64>]) -> Matrix {
        assert!(!cols.is_empty());
        let rows = cols[0].len();
        let mut m = Matrix::zeros(rows, cols.len());
        for (j, c) in cols.iter().enumerate() {
            m.set_col(j, c);
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard matrix product, shape `(self.rows, other.cols)`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a_ik = self.data[i * self.cols + k];
                if a_ik == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a_ik * s;
                }
            }
        }
        Ok(out)
    }

    /// Matrix–vector product.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.cols != x.len() {
            return Err(Error::dim(
                "matvec",
                format!("{}x{}", self.rows, self.cols),
                format!("vector length {}", x.len()),
            ));
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            out[i] = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        }
        Ok(out)
    }

    /// Transposed-matrix–vector product `self^T x` without materializing the
    /// transpose.
    pub fn matvec_transposed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.rows != x.len() {
            return Err(Error::dim(
                "matvec_transposed",
                format!("{}x{}", self.rows, self.cols),
                format!("vector length {}", x.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += xi * a;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "add",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "sub",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| c * v).collect(),
        }
    }

    /// Square root of the sum of squared entries.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing e.g. `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Keeps entries on and below the main diagonal, zeroes the rest.
    pub fn lower_mask(&self) -> Result<Matrix> {
        self.masked(|i, j| j <= i)
    }

    /// Keeps entries strictly above the main diagonal, zeroes the rest.
    /// Together with `lower_mask` this partitions a square matrix: the
    /// diagonal belongs to the lower part.
    pub fn upper_mask(&self) -> Result<Matrix> {
        self.masked(|i, j| j > i)
    }

    fn masked(&self, keep: impl Fn(usize, usize) -> bool) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(Error::dim(
                "triangular mask",
                format!("{}x{}", self.rows, self.cols),
                "square matrix required".to_string(),
            ));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if !keep(i, j) {
                    out.data[i * self.cols + j] = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// True if every entry strictly above the diagonal is exactly zero.
    pub fn is_lower_triangular(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (i + 1..self.cols).all(|j| self.get(i, j) == 0.0))
    }

    /// True if every entry on or below the diagonal is exactly zero.
    pub fn is_strictly_upper_triangular(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..=i.min(self.cols - 1)).all(|j| self.get(i, j) == 0.0))
    }

    /// I.i.d. Gaussian entries with mean 0 and the given standard deviation.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut RngState) -> Result<Matrix> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!(
                "gaussian matrix shape must be positive, got {rows}x{cols}"
            )));
        }
        if !std.is_finite() || std <= 0.0 {
            return Err(Error::Config(format!(
                "gaussian std must be positive, got {std}"
            )));
        }
        let data = (0..rows * cols).map(|_| rng.next_gaussian(std)).collect();
        Ok(Matrix { rows, cols, data })
    }
}

/// Counter-based deterministic random number generator.
///
/// The state is just a seed and a stream position, so the n-th draw is a pure
/// function of `(seed, n)`: reproducible across runs regardless of how the
/// stream got consumed, and trivially serializable. The mixing function is
/// SplitMix64.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    seed: u64,
    pos: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, pos: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    /// Derives an independent stream for a sub-task. Seeds are hashed with
    /// the label rather than plainly XORed so that nearby run seeds do not
    /// share site streams.
    pub fn derive(&self, label: u64) -> RngState {
        RngState::new(mix64(self.seed ^ mix64(label.wrapping_add(GOLDEN))))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.pos = self.pos.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.pos.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in the half-open unit interval (0, 1].
    #[inline]
    fn next_unit(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64
    }

    /// One Gaussian sample via Box–Muller; consumes two uniform draws.
    pub fn next_gaussian(&mut self, std: f64) -> f64 {
        let u1 = self.next_unit();
        let u2 = self.next_unit();
        std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }
}
