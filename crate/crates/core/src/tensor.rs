//! Dense double-precision linear algebra, plus a GEMM generic over the
//! element type for the batched training path.
//!
//! [`Matrix`] stores entries in row-major order. The vectorization operator
//! [`vec`] stacks columns (first column first), which is the convention under
//! which `vec(A X B) = (Bᵀ ⊗ A) vec(X)` holds. All Jacobians are in numerator
//! layout: row index over outputs, column index over inputs.

use std::fmt;
use std::ops::{AddAssign, Index, IndexMut, MulAssign, SubAssign};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of elements a materialized Kronecker or
/// commutation matrix may hold.
pub const DEFAULT_ELEMENT_BUDGET: usize = 1 << 24;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Convergence tolerance of the Jacobi eigen-solver used by [`singular_values`].
pub const SVD_TOLERANCE: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Contract(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Length {
                op: "Matrix::new",
                expected: rows * cols,
                got: data.len(),
            });
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from row slices; all rows must share one length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Length {
                    op: "Matrix::from_rows",
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector((0..self.rows).map(|i| self[(i, j)]).collect())
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        matmul(self, rhs)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, rhs: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Self> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Self> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Matrix) -> Result<Self> {
        self.zip_with(rhs, "hadamard", |a, b| a * b)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Matrix-vector product `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::Shape {
                op: "mul_vec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        Ok(Vector(
            (0..self.rows)
                .map(|i| dot(self.row(i), v))
                .collect(),
        ))
    }

    /// `‖self − other‖_F / max(‖other‖_F, floor)`.
    pub fn relative_error(&self, reference: &Matrix) -> Result<f64> {
        let diff = self.sub(reference)?;
        Ok(diff.frobenius_norm() / reference.frobenius_norm().max(1e-300))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

/// A dense real vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Contract("vector must have at least one entry".into()));
        }
        Ok(Self(data))
    }

    pub fn from_slice(data: &[f64]) -> Self {
        assert!(!data.is_empty(), "vector must have at least one entry");
        Self(data.to_vec())
    }

    pub fn zeros(len: usize) -> Self {
        Self::from_slice(&vec![0.0; len])
    }

    pub fn ones(len: usize) -> Self {
        Self::from_slice(&vec![1.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self(self.0.iter().map(|x| c * x).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Floating-point element type of the batched training path.
pub trait Real:
    num_traits::Float + std::iter::Sum + AddAssign + SubAssign + MulAssign + Default + Send + Sync + fmt::Debug + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Strided `C ← α·A·B + β·C`.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing
    /// `m x k`, `k x n` and `m x n` extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
}

macro_rules! real_impl {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn of(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
            ) {
                $kernel(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
            }
        }
    };
}

real_impl!(f64, matrixmultiply::dgemm);
real_impl!(f32, matrixmultiply::sgemm);

/// Operand description for [`gemm`]: a row-major buffer viewed as
/// `rows x cols`, optionally transposed.
#[derive(Clone, Copy)]
pub struct Operand<'a, T = f64> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Operand<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn effective_shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out ← beta·out + op(a)·op(b)`, `out` row-major with `op(a).rows` rows.
pub fn gemm<T: Real>(a: Operand<'_, T>, b: Operand<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.effective_shape();
    let (k2, n) = b.effective_shape();
    assert_eq!(k, k2, "gemm inner dimensions differ");
    assert_eq!(out.len(), m * n, "gemm output buffer has wrong length");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the slices cover exactly the strided extents computed above and
    // `out` does not alias either input.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
        );
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(
        Operand::new(&a.data, a.rows, a.cols),
        Operand::new(&b.data, b.rows, b.cols),
        0.0,
        &mut out.data,
    );
    Ok(out)
}

fn check_budget(op: &'static str, rows: usize, cols: usize, budget: usize) -> Result<()> {
    let requested = rows.saturating_mul(cols);
    if requested > budget {
        return Err(Error::Size {
            op,
            requested,
            budget,
        });
    }
    Ok(())
}

pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    kron_with_budget(a, b, DEFAULT_ELEMENT_BUDGET)
}

pub fn kron_with_budget(a: &Matrix, b: &Matrix, budget: usize) -> Result<Matrix> {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    check_budget("kron", rows, cols, budget)?;
    let mut out = Matrix::zeros(rows, cols);
    for ai in 0..a.rows {
        for aj in 0..a.cols {
            let s = a[(ai, aj)];
            if s == 0.0 {
                continue;
            }
            for bi in 0..b.rows {
                let dst = (ai * b.rows + bi) * cols + aj * b.cols;
                let src = b.row(bi);
                for (o, &v) in out.data[dst..dst + b.cols].iter_mut().zip(src) {
                    *o = s * v;
                }
            }
        }
    }
    Ok(out)
}

/// Column-stacking vectorization.
pub fn vec(a: &Matrix) -> Vector {
    let mut out = Vec::with_capacity(a.len());
    for j in 0..a.cols {
        for i in 0..a.rows {
            out.push(a[(i, j)]);
        }
    }
    Vector(out)
}

pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(Error::Length {
            op: "unvec",
            expected: rows * cols,
            got: v.len(),
        });
    }
    let mut m = Matrix::zeros(rows.max(1), cols.max(1));
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = v[j * rows + i];
        }
    }
    Ok(m)
}

/// The permutation `K` with `K·vec(A) = vec(Aᵀ)` for every `m x n` matrix `A`.
pub fn commutation_matrix(m: usize, n: usize) -> Result<Matrix> {
    if m == 0 || n == 0 {
        return Err(Error::Contract("commutation matrix needs m, n >= 1".into()));
    }
    let size = m * n;
    check_budget("commutation_matrix", size, size, DEFAULT_ELEMENT_BUDGET)?;
    let mut k = Matrix::zeros(size, size);
    for i in 0..m {
        for j in 0..n {
            // vec(A)[i + j m] = A_ij = vec(Aᵀ)[j + i n]
            k[(j + i * n, i + j * m)] = 1.0;
        }
    }
    Ok(k)
}

/// Block-diagonal matrix from square or rectangular blocks.
pub fn block_diag(blocks: &[Matrix]) -> Result<Matrix> {
    let rows: usize = blocks.iter().map(Matrix::rows).sum();
    let cols: usize = blocks.iter().map(Matrix::cols).sum();
    check_budget("block_diag", rows, cols, DEFAULT_ELEMENT_BUDGET)?;
    let mut out = Matrix::zeros(rows.max(1), cols.max(1));
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for i in 0..b.rows {
            for j in 0..b.cols {
                out[(r0 + i, c0 + j)] = b[(i, j)];
            }
        }
        r0 += b.rows;
        c0 += b.cols;
    }
    Ok(out)
}

/// Singular values in non-increasing order.
///
/// Forms the smaller Gram matrix (`AᵀA` or `AAᵀ`) and diagonalizes it with
/// the cyclic Jacobi method: sweeps of plane rotations over every
/// off-diagonal pair until the off-diagonal Frobenius mass falls below
/// [`SVD_TOLERANCE`] times the Gram matrix's norm.
pub fn singular_values(a: &Matrix) -> Result<Vector> {
    if !a.is_finite() {
        return Err(Error::NonFinite("singular_values input".into()));
    }
    let gram = if a.cols <= a.rows {
        let mut g = Matrix::zeros(a.cols, a.cols);
        gemm(
            Operand::new(&a.data, a.rows, a.cols).t(),
            Operand::new(&a.data, a.rows, a.cols),
            0.0,
            &mut g.data,
        );
        g
    } else {
        let mut g = Matrix::zeros(a.rows, a.rows);
        gemm(
            Operand::new(&a.data, a.rows, a.cols),
            Operand::new(&a.data, a.rows, a.cols).t(),
            0.0,
            &mut g.data,
        );
        g
    };
    let mut eig = symmetric_eigenvalues(gram)?;
    for e in eig.iter_mut() {
        *e = e.max(0.0).sqrt();
    }
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(Vector(eig))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(mut g: Matrix) -> Result<Vec<f64>> {
    let n = g.rows;
    let scale = g.frobenius_norm();
    if scale == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let off = |g: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += g[(i, j)] * g[(i, j)];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&g) > SVD_TOLERANCE * scale {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NonConvergence {
                op: "symmetric_eigenvalues",
                iterations: sweeps,
            });
        }
        for p in 0..n {
            for q in p + 1..n {
                let gpq = g[(p, q)];
                if gpq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (g[(q, q)] - g[(p, p)]) / (2.0 * gpq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let gkp = g[(k, p)];
                    let gkq = g[(k, q)];
                    g[(k, p)] = c * gkp - s * gkq;
                    g[(k, q)] = s * gkp + c * gkq;
                }
                for k in 0..n {
                    let gpk = g[(p, k)];
                    let gqk = g[(q, k)];
                    g[(p, k)] = c * gpk - s * gqk;
                    g[(q, k)] = s * gpk + c * gqk;
                }
            }
        }
        sweeps += 1;
    }
    Ok((0..n).map(|i| g[(i, i)]).collect())
}

/// Largest singular value by power iteration on `AᵀA`, for matrices too large
/// for [`singular_values`]. Stops when the Rayleigh quotient changes by less
/// than `tol` relative between iterations.
pub fn top_singular_value(a: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    let (m, n) = a.shape();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * ((i * 7919) % 101) as f64).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut u = vec![0.0; m];
    let mut prev = 0.0;
    for _ in 0..max_iter {
        gemm(Operand::new(&a.data, m, n), Operand::new(&v, n, 1), 0.0, &mut u);
        gemm(Operand::new(&a.data, m, n).t(), Operand::new(&u, m, 1), 0.0, &mut v);
        let lambda = norm(&v);
        if lambda == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|x| *x /= lambda);
        if (lambda - prev).abs() <= tol * lambda {
            return Ok(lambda.sqrt());
        }
        prev = lambda;
    }
    Err(Error::NonConvergence {
        op: "top_singular_value",
        iterations: max_iter,
    })
}

/// Central-difference Jacobian of `f` at `x` in numerator layout.
pub fn finite_diff_jacobian<F>(f: F, x: &[f64], h: f64) -> Result<Matrix>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let out_len = f(x).len();
    if out_len == 0 || x.is_empty() {
        return Err(Error::Contract("finite-difference map must have non-empty input and output".into()));
    }
    let mut jac = Matrix::zeros(out_len, x.len());
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let plus = f(&probe);
        probe[j] = x[j] - h;
        let minus = f(&probe);
        probe[j] = x[j];
        if plus.len() != out_len || minus.len() != out_len {
            return Err(Error::Contract(format!(
                "map returned inconsistent output lengths ({out_len}, {}, {})",
                plus.len(),
                minus.len()
            )));
        }
        for i in 0..out_len {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let jac = finite_diff_jacobian(|p| vec![f(p)], x, h)?;
    Ok(jac.into_vec())
}

/// Seeded pseudorandom stream: ChaCha8 keyed by the 64-bit seed, with a
/// 64-bit stream id selecting independent sub-streams.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent sub-stream identified by `label`; depends only on the seed,
    /// this stream's id and `label`, never on how much of `self` was consumed.
    pub fn split(&self, label: u64) -> Rng {
        let stream = splitmix64(self.stream ^ splitmix64(label.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        rand::Rng::random_range(&mut self.inner, 0..n)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `m x n` matrix of i.i.d. `N(0, sigma²)` entries.
pub fn gaussian_matrix(rng: &mut Rng, m: usize, n: usize, sigma: f64) -> Matrix {
    assert!(sigma > 0.0, "sigma must be positive");
    let data = (0..m * n).map(|_| sigma * rng.normal()).collect();
    Matrix { rows: m, cols: n, data }
}

pub fn gaussian_vector(rng: &mut Rng, n: usize, sigma: f64) -> Vector {
    assert!(sigma > 0.0, "sigma must be positive");
    Vector((0..n).map(|_| sigma * rng.normal()).collect())
}
