//! Dense vectors and matrices in `f64`, a counter-based random stream, and
//! the handful of linear-algebra kernels the rest of the crate needs.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A dense column vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVec {
    data: Vec<f64>,
}

impl DenseVec {
    /// Wraps `data`; rejects empty or non-finite input.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("vector must have dim >= 1"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("vector entry {i} is not finite")));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "vector must have dim >= 1");
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec())
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        Self { data }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_dim(&self, other: &DenseVec) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(invalid(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &DenseVec) -> Result<DenseVec> {
        self.check_dim(other)?;
        Ok(Self::from_vec_unchecked(
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &DenseVec) -> Result<DenseVec> {
        self.check_dim(other)?;
        Ok(Self::from_vec_unchecked(
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn scale(&self, s: f64) -> DenseVec {
        Self::from_vec_unchecked(self.data.iter().map(|v| v * s).collect())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &DenseVec) -> Result<()> {
        self.check_dim(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &DenseVec) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

impl std::ops::Index<usize> for DenseVec {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid("matrix dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data length {} != {rows} x {cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(invalid("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m.set(i, i, *v);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> DenseMat {
        let mut t = DenseMat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMat) -> Result<DenseMat> {
        if self.cols != other.rows {
            return Err(invalid(format!(
                "matmul mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMat::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            false,
            &other.data,
            false,
            &mut out.data,
            0.0,
        );
        Ok(out)
    }

    pub fn add(&self, other: &DenseMat) -> Result<DenseMat> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(invalid("matrix add shape mismatch"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        DenseMat::new(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: f64) -> DenseMat {
        DenseMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// `(A + Aᵀ) / 2`; square matrices only.
    pub fn symmetrized(&self) -> DenseMat {
        assert_eq!(self.rows, self.cols);
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..r {
                let v = 0.5 * (self.get(r, c) + self.get(c, r));
                out.set(r, c, v);
                out.set(c, r, v);
            }
        }
        out
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in 0..r {
                worst = worst.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        worst
    }

    pub(crate) fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &nalgebra::DMatrix<f64>) -> DenseMat {
        let mut out = DenseMat::zeros(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.set(r, c, m[(r, c)]);
            }
        }
        out
    }
}

/// Matrix-vector product with `f64` accumulation.
pub fn matvec(m: &DenseMat, v: &DenseVec) -> Result<DenseVec> {
    if m.cols() != v.dim() {
        return Err(invalid(format!(
            "matvec mismatch: {}x{} * {}",
            m.rows(),
            m.cols(),
            v.dim()
        )));
    }
    let out = (0..m.rows())
        .map(|r| m.row(r).iter().zip(v.iter()).map(|(a, b)| a * b).sum())
        .collect();
    Ok(DenseVec::from_vec_unchecked(out))
}

/// `C = op(A) · op(B) + beta · C` on row-major slices, where `op(A)` is
/// `m × k` and `op(B)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe
    // row-major (or transposed row-major) layouts inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Eigen-decomposition of a symmetric matrix. Eigenvalues are returned in
/// descending order; eigenvector `i` is column `i` of the returned matrix.
pub fn symmetric_eigen(m: &DenseMat) -> Result<(Vec<f64>, DenseMat)> {
    if m.rows() != m.cols() {
        return Err(invalid("symmetric_eigen needs a square matrix"));
    }
    let eig = nalgebra::SymmetricEigen::new(m.symmetrized().to_nalgebra());
    let n = m.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DenseMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, dst, eig.eigenvectors[(r, src)]);
        }
    }
    Ok((values, vectors))
}

/// A `rows × cols` matrix (`rows >= cols`) with orthonormal columns drawn
/// from the Haar measure.
pub fn random_orthonormal_columns(rows: usize, cols: usize, rng: &mut RngStream) -> Result<DenseMat> {
    if cols == 0 || cols > rows {
        return Err(invalid(format!(
            "cannot draw {cols} orthonormal columns in dimension {rows}"
        )));
    }
    let mut g = vec![0.0; rows * cols];
    rng.fill_standard_normal(&mut g);
    let qr = nalgebra::DMatrix::from_row_slice(rows, cols, &g).qr();
    let (q, r) = (qr.q(), qr.r());
    let mut out = DenseMat::from_nalgebra(&q);
    // Sign fix so the distribution is Haar rather than QR-convention biased.
    for c in 0..cols {
        if r[(c, c)] < 0.0 {
            for row in 0..rows {
                out.set(row, c, -out.get(row, c));
            }
        }
    }
    Ok(out)
}

const STREAM_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(STREAM_MIX);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream keyed by `(seed, stream_id)`.
///
/// The keystream position is the only mutable state, so a stream can be
/// checkpointed as `(seed, stream_id, word_pos)` and resumed exactly.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    core: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut core = ChaCha20Rng::seed_from_u64(seed);
        core.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            core,
        }
    }

    pub fn from_state(seed: u64, stream_id: u64, word_pos: u128) -> Self {
        let mut s = Self::new(seed, stream_id);
        s.core.set_word_pos(word_pos);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn word_pos(&self) -> u128 {
        self.core.get_word_pos()
    }

    /// A new stream with the same seed and a stream id derived from this
    /// stream's id and `index`. Independent of how far this stream has been
    /// consumed.
    pub fn child(&self, index: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(1)));
        RngStream::new(self.seed, id)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is below 2^-64 * n, irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fills `out` with independent standard normals (Box–Muller).
    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.box_muller();
            pair[0] = a;
            pair[1] = b;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.box_muller().0;
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.box_muller().0
    }

    fn box_muller(&mut self) -> (f64, f64) {
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }
}

/// A standard-normal draw in `dim` dimensions.
pub fn gaussian_sample(rng: &mut RngStream, dim: usize) -> Result<DenseVec> {
    if dim == 0 {
        return Err(invalid("gaussian_sample: dim must be >= 1"));
    }
    let mut data = vec![0.0; dim];
    rng.fill_standard_normal(&mut data);
    Ok(DenseVec::from_vec_unchecked(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gaussian_mean_and_variance() {
        let mut rng = RngStream::new(7, 0);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sum_sq = [0.0; 2];
        for _ in 0..n {
            let v = gaussian_sample(&mut rng, 2).unwrap();
            for i in 0..2 {
                sum[i] += v[i];
                sum_sq[i] += v[i] * v[i];
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = (sum_sq[i] - n as f64 * mean * mean) / (n as f64 - 1.0);
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.03, "var {var}");
        }
    }

    #[test]
    fn gaussian_is_deterministic() {
        let mut a = RngStream::new(11, 3);
        let mut b = RngStream::new(11, 3);
        for _ in 0..10 {
            let x = gaussian_sample(&mut a, 5).unwrap();
            let y = gaussian_sample(&mut b, 5).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn gaussian_rejects_zero_dim() {
        let mut rng = RngStream::new(1, 0);
        assert!(matches!(
            gaussian_sample(&mut rng, 0),
            Err(crate::Error::InvalidArgument(_))
        ));
    }

    /// Bins are equiprobable under N(0, 1): edges at the deciles.
    #[test]
    fn gaussian_chi_squared_ten_bins() {
        const DECILES: [f64; 9] = [
            -1.281_551_565_5,
            -0.841_621_233_6,
            -0.524_400_512_7,
            -0.253_347_103_1,
            0.0,
            0.253_347_103_1,
            0.524_400_512_7,
            0.841_621_233_6,
            1.281_551_565_5,
        ];
        let mut rng = RngStream::new(2024, 1);
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            let z = rng.standard_normal();
            let bin = DECILES.iter().take_while(|&&e| z >= e).count();
            counts[bin] += 1;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // chi-squared, 9 dof, upper 0.001 quantile
        assert!(chi2 < 27.877, "chi2 = {chi2}");
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let mut a = RngStream::new(5, 0);
        let mut b = RngStream::new(5, 1);
        let n = 50_000;
        let mut cross = 0.0;
        for _ in 0..n {
            cross += a.standard_normal() * b.standard_normal();
        }
        // sd of the mean product is 1/sqrt(n) ~ 0.0045
        assert!((cross / n as f64).abs() < 0.02);
    }

    #[test]
    fn state_round_trip() {
        let mut a = RngStream::new(9, 4);
        for _ in 0..17 {
            a.next_u64();
        }
        let mut b = RngStream::from_state(a.seed(), a.stream_id(), a.word_pos());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn matvec_examples() {
        let id = DenseMat::identity(3);
        let v = DenseVec::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(matvec(&id, &v).unwrap(), v);

        let z = DenseMat::zeros(2, 3);
        assert_eq!(matvec(&z, &v).unwrap().as_slice(), &[0.0, 0.0]);

        let m = DenseMat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let ones = DenseVec::new(vec![1.0, 1.0]).unwrap();
        assert_eq!(matvec(&m, &ones).unwrap().as_slice(), &[3.0, 7.0]);

        assert!(matvec(&m, &v).is_err());
    }

    #[test]
    fn gemm_matches_naive() {
        let mut rng = RngStream::new(1, 2);
        let (m, k, n) = (5, 7, 3);
        let mut a = vec![0.0; m * k];
        let mut b = vec![0.0; k * n];
        rng.fill_standard_normal(&mut a);
        rng.fill_standard_normal(&mut b);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, 0.0);
        for i in 0..m {
            for j in 0..n {
                let naive: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - naive).abs() < 1e-12);
            }
        }
        // transposed operands: treat a as (k x m) stored, b as (n x k) stored
        let at = DenseMat::new(m, k, a.clone()).unwrap().transpose();
        let bt = DenseMat::new(k, n, b.clone()).unwrap().transpose();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, at.as_slice(), true, bt.as_slice(), true, &mut c2, 0.0);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn eigen_of_diagonal() {
        let m = DenseMat::diag(&[1.0, 3.0, 2.0]);
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
        assert!((vecs.get(1, 0).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_columns() {
        let mut rng = RngStream::new(3, 0);
        let q = random_orthonormal_columns(8, 2, &mut rng).unwrap();
        let gram = q.transpose().matmul(&q).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((gram.get(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn matvec_is_linear(
            a in proptest::collection::vec(-1e3f64..1e3, 12),
            x in proptest::collection::vec(-1e3f64..1e3, 4),
            y in proptest::collection::vec(-1e3f64..1e3, 4),
        ) {
            let m = DenseMat::new(3, 4, a).unwrap();
            let x = DenseVec::new(x).unwrap();
            let y = DenseVec::new(y).unwrap();
            let lhs = matvec(&m, &x.add(&y).unwrap()).unwrap();
            let rhs = matvec(&m, &x).unwrap().add(&matvec(&m, &y).unwrap()).unwrap();
            for i in 0..3 {
                // relative to the magnitude of the summed terms
                let scale: f64 = (0..4)
                    .map(|j| m.get(i, j).abs() * (x[j].abs() + y[j].abs()))
                    .sum::<f64>()
                    .max(1.0);
                prop_assert!((lhs[i] - rhs[i]).abs() <= 1e-12 * scale);
            }
        }
    }
}
