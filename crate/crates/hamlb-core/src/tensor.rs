//! Dense multilinear algebra kernel.
//!
//! Everything downstream (model building, channel application, SDP constraint
//! evaluation, certification) is expressed through a handful of primitives on
//! row-major dense matrices viewed as operators on a tensor product of
//! factors: Kronecker products, partial traces over arbitrary factor subsets,
//! two-sided Kraus application on a consecutive factor range, and Hermitian
//! eigensolves (dense below a size cutoff, Lanczos above it).
//!
//! All primitives are generic over the matrix element type so that real
//! symmetric data takes the fast real path while genuinely complex Hermitian
//! data runs through the identical code. A complex Hermitian block is
//! mathematically interchangeable with its doubled real symmetric embedding;
//! we keep the compact complex storage and use the real part of the
//! Hilbert-Schmidt pairing as the inner product, which is the same real
//! Euclidean structure.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Abbreviation used throughout the crate.
pub type C64 = Complex64;

/// Side length above which `min_eigenvalue` switches from a dense
/// eigendecomposition to restarted Lanczos iteration.
pub const DENSE_EIG_CUTOFF: usize = 4096;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("factor dimensions {dims:?} are inconsistent with side {side}")]
    FactorMismatch { dims: Vec<usize>, side: usize },
    #[error("invalid factor range start={start} span={span} over {nfactors} factors")]
    BadRange {
        start: usize,
        span: usize,
        nfactors: usize,
    },
    #[error("non-finite entry encountered in {0}")]
    NonFinite(&'static str),
    #[error("eigensolver failed: {0}")]
    EigFailure(String),
    #[error("Lanczos did not converge within {0} restarts")]
    LanczosStalled(usize),
    #[error("entry count {count} does not match shape {shape:?}")]
    EntryCount { count: usize, shape: Vec<usize> },
}

/// Matrix element types the kernel accepts: `f64` (real symmetric data) and
/// `Complex64` (general Hermitian data).
pub trait Element:
    ndarray::LinalgScalar
    + ndarray_linalg::Lapack
    + ndarray_linalg::Scalar<Real = f64>
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    const IS_COMPLEX: bool;

    /// Lift into the complex field (for interop with the public complex API).
    fn to_c64(self) -> C64;

    /// Truncate a complex scalar into this field. Callers are responsible for
    /// only doing this when the imaginary part is negligible.
    fn from_c64(z: C64) -> Self;
}

impl Element for f64 {
    const IS_COMPLEX: bool = false;

    fn to_c64(self) -> C64 {
        C64::new(self, 0.0)
    }

    fn from_c64(z: C64) -> Self {
        z.re
    }
}

impl Element for C64 {
    const IS_COMPLEX: bool = true;

    fn to_c64(self) -> C64 {
        self
    }

    fn from_c64(z: C64) -> Self {
        z
    }
}

/// Real part of the Hilbert-Schmidt inner product `tr(a† b)`.
///
/// This is the Euclidean inner product of the underlying real vector space
/// for both real symmetric and complex Hermitian matrices.
pub fn hs_inner<T: Element>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let p = x.conj() * *y;
        acc += p.re();
    }
    acc
}

/// Frobenius norm.
pub fn fro_norm<T: Element>(a: &ArrayView2<T>) -> f64 {
    a.iter().map(|x| x.square()).sum::<f64>().sqrt()
}

/// Largest absolute entry.
pub fn max_abs<T: Element>(a: &ArrayView2<T>) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Kronecker product `a ⊗ b`.
pub fn kron<T: Element>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Array2<T> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::<T>::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            let mut block = out.slice_mut(ndarray::s![i * br..(i + 1) * br, j * bc..(j + 1) * bc]);
            block.zip_mut_with(b, |o, &bb| *o = aij * bb);
        }
    }
    out
}

/// Identity matrix of side `n`.
pub fn eye<T: Element>(n: usize) -> Array2<T> {
    Array2::<T>::eye(n)
}

/// Conjugate transpose.
pub fn dagger<T: Element>(a: &ArrayView2<T>) -> Array2<T> {
    a.t().mapv(|x| x.conj())
}

fn check_factors<T: Element>(m: &ArrayView2<T>, dims: &[usize]) -> Result<(), TensorError> {
    let (r, c) = m.dim();
    if r != c {
        return Err(TensorError::NotSquare { rows: r, cols: c });
    }
    let side: usize = dims.iter().product();
    if side != r {
        return Err(TensorError::FactorMismatch {
            dims: dims.to_vec(),
            side: r,
        });
    }
    Ok(())
}

/// Partial trace over the factor positions listed in `traced` (0-based,
/// strictly increasing) of an operator on `⊗_i C^{dims[i]}`.
///
/// The output acts on the kept factors in their original order. Tracing all
/// factors yields a 1×1 matrix holding the full trace, so the operation is
/// trace-preserving by construction.
pub fn partial_trace<T: Element>(
    m: &ArrayView2<T>,
    dims: &[usize],
    traced: &[usize],
) -> Result<Array2<T>, TensorError> {
    check_factors(m, dims)?;
    for w in traced.windows(2) {
        if w[0] >= w[1] {
            return Err(TensorError::ShapeMismatch(
                "traced factor list must be strictly increasing".into(),
            ));
        }
    }
    if traced.iter().any(|&t| t >= dims.len()) {
        return Err(TensorError::ShapeMismatch(format!(
            "traced factor out of range: {traced:?} over {} factors",
            dims.len()
        )));
    }
    let n = dims.len();
    let mut strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let kept: Vec<usize> = (0..n).filter(|i| !traced.contains(i)).collect();
    let kept_dim: usize = kept.iter().map(|&i| dims[i]).product();
    let traced_dim: usize = traced.iter().map(|&i| dims[i]).product();

    // Enumerate flat offsets contributed by kept and traced multi-indices.
    let offsets = |idxs: &[usize], count: usize| -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        let mut digits = vec![0usize; idxs.len()];
        loop {
            let off: usize = digits
                .iter()
                .zip(idxs.iter())
                .map(|(&d, &i)| d * strides[i])
                .sum();
            out.push(off);
            // mixed-radix increment
            let mut pos = idxs.len();
            loop {
                if pos == 0 {
                    return out;
                }
                pos -= 1;
                digits[pos] += 1;
                if digits[pos] < dims[idxs[pos]] {
                    break;
                }
                digits[pos] = 0;
            }
        }
    };
    let kept_off = offsets(&kept, kept_dim);
    let traced_off = offsets(traced, traced_dim);

    let mut out = Array2::<T>::zeros((kept_dim, kept_dim));
    for (r, &kr) in kept_off.iter().enumerate() {
        for (c, &kc) in kept_off.iter().enumerate() {
            let mut acc = T::zero();
            for &t in &traced_off {
                acc = acc + m[(kr + t, kc + t)];
            }
            out[(r, c)] = acc;
        }
    }
    Ok(out)
}

/// Trace over the first `k` factors.
pub fn trace_first<T: Element>(
    m: &ArrayView2<T>,
    dims: &[usize],
    k: usize,
) -> Result<Array2<T>, TensorError> {
    let traced: Vec<usize> = (0..k).collect();
    partial_trace(m, dims, &traced)
}

/// Trace over the last `k` factors.
pub fn trace_last<T: Element>(
    m: &ArrayView2<T>,
    dims: &[usize],
    k: usize,
) -> Result<Array2<T>, TensorError> {
    if k > dims.len() {
        return Err(TensorError::BadRange {
            start: dims.len() - k.min(dims.len()),
            span: k,
            nfactors: dims.len(),
        });
    }
    let traced: Vec<usize> = (dims.len() - k..dims.len()).collect();
    partial_trace(m, dims, &traced)
}

/// `(I_L ⊗ K ⊗ I_R) · M` where `K` acts on the middle group of a row index
/// factored as `(L, A, R)`; `M` has `L·A·R` rows and arbitrary columns.
fn embed_left_mul<T: Element>(
    k: &ArrayView2<T>,
    m: &ArrayView2<T>,
    l: usize,
    r: usize,
) -> Array2<T> {
    let (b, a) = k.dim();
    let cols = m.ncols();
    debug_assert_eq!(m.nrows(), l * a * r);
    let mut out = Array2::<T>::zeros((l * b * r, cols));
    // Batched GEMM over the left index; the (A, R·cols) slab of m for fixed l
    // is contiguous because the row index is row-major in (L, A, R).
    let m_std = m.as_standard_layout();
    let m3 = m_std.view().into_shape((l, a, r * cols)).expect("reshape");
    for li in 0..l {
        let slab = m3.index_axis(Axis(0), li);
        let prod = k.dot(&slab); // (B, R·cols)
        let mut dst = out.slice_mut(ndarray::s![li * b * r..(li + 1) * b * r, ..]);
        let dst3 = prod.into_shape((b * r, cols)).expect("reshape");
        dst.assign(&dst3);
    }
    out
}

/// Apply the completely positive map `X ↦ Σ_k (I_L ⊗ K_k ⊗ I_R) X (…)†`
/// where each Kraus operator `K_k` (`out_dim × in_dim`) acts on the
/// consecutive factor range `[start, start+span)` of `dims`.
///
/// The output operator acts on `dims` with that range replaced by the single
/// factor `out_dim`.
pub fn apply_kraus_range<T: Element>(
    kraus: &[Array2<T>],
    m: &ArrayView2<T>,
    dims: &[usize],
    start: usize,
    span: usize,
) -> Result<Array2<T>, TensorError> {
    check_factors(m, dims)?;
    if span == 0 || start + span > dims.len() {
        return Err(TensorError::BadRange {
            start,
            span,
            nfactors: dims.len(),
        });
    }
    let l: usize = dims[..start].iter().product();
    let a: usize = dims[start..start + span].iter().product();
    let r: usize = dims[start + span..].iter().product();
    let out_dim = kraus
        .first()
        .ok_or_else(|| TensorError::ShapeMismatch("empty Kraus list".into()))?
        .nrows();
    for k in kraus {
        if k.ncols() != a || k.nrows() != out_dim {
            return Err(TensorError::ShapeMismatch(format!(
                "Kraus operator {}x{} does not map factor range of dim {} uniformly to {}",
                k.nrows(),
                k.ncols(),
                a,
                out_dim
            )));
        }
    }
    let side_out = l * out_dim * r;
    let mut out = Array2::<T>::zeros((side_out, side_out));
    for k in kraus {
        let kv = k.view();
        let left = embed_left_mul(&kv, m, l, r);
        let left_dag = dagger(&left.view());
        let both = embed_left_mul(&kv, &left_dag.view(), l, r);
        out = out + dagger(&both.view());
    }
    Ok(out)
}

/// Hermitian (or real-symmetric) eigendecomposition, eigenvalues ascending,
/// eigenvectors as columns: `m = V·diag(λ)·V†`.
pub fn eigh_all<T: Element>(m: &ArrayView2<T>) -> Result<(Array1<f64>, Array2<T>), TensorError> {
    use ndarray_linalg::{Eigh, UPLO};
    let owned = m.to_owned();
    let (vals, vecs) = owned
        .eigh(UPLO::Lower)
        .map_err(|e| TensorError::EigFailure(e.to_string()))?;
    // The backend hands row-major storage to a column-major routine, so for
    // complex input the raw columns are eigenvectors of mᵀ = conj(m);
    // conjugating restores the stated contract (no-op for real data).
    Ok((vals, vecs.mapv(|v| v.conj())))
}

/// Eigenvalues only, ascending.
pub fn eigvalsh<T: Element>(m: &ArrayView2<T>) -> Result<Array1<f64>, TensorError> {
    use ndarray_linalg::{EighInto, UPLO};
    let owned = m.to_owned();
    let (vals, _) = owned
        .eigh_into(UPLO::Lower)
        .map_err(|e| TensorError::EigFailure(e.to_string()))?;
    Ok(vals)
}

/// Smallest eigenvalue of a Hermitian matrix.
///
/// Dense eigendecomposition up to side [`DENSE_EIG_CUTOFF`], restarted
/// Lanczos with full reorthogonalization above it. The Lanczos path targets a
/// relative accuracy of 1e-11 on the extremal eigenvalue.
pub fn min_eigenvalue<T: Element>(m: &ArrayView2<T>) -> Result<f64, TensorError> {
    if m.iter().any(|x| !x.abs().is_finite()) {
        return Err(TensorError::NonFinite("min_eigenvalue input"));
    }
    let n = m.nrows();
    if n != m.ncols() {
        return Err(TensorError::NotSquare {
            rows: n,
            cols: m.ncols(),
        });
    }
    if n == 0 {
        return Err(TensorError::ShapeMismatch("empty matrix".into()));
    }
    if n <= DENSE_EIG_CUTOFF {
        let vals = eigvalsh(m)?;
        return Ok(vals[0]);
    }
    let apply = |v: &Array1<T>| m.dot(v);
    lanczos_smallest(apply, n, 1e-11, 0x5eed_0001, 60)
}

/// Ground eigenpair via restarted Lanczos on a matrix-free Hermitian operator.
///
/// Returns the smallest Ritz value once its residual bound drops below
/// `tol · max(1, |θ|)`. Deterministic for a fixed seed.
pub fn lanczos_smallest<T: Element>(
    apply: impl Fn(&Array1<T>) -> Array1<T>,
    n: usize,
    tol: f64,
    seed: u64,
    max_rounds: usize,
) -> Result<f64, TensorError> {
    let max_basis = 220.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v0 = Array1::<T>::zeros(n);
    for x in v0.iter_mut() {
        *x = T::from_c64(C64::new(rng.gen_range(-1.0..1.0), 0.0));
    }
    let mut best: Option<f64> = None;
    for round in 0..max_rounds {
        // Normalize the start vector.
        let norm = v0.iter().map(|x| x.square()).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(TensorError::NonFinite("Lanczos start vector"));
        }
        let inv = T::from_c64(C64::new(1.0 / norm, 0.0));
        let mut basis: Vec<Array1<T>> = vec![v0.mapv(|x| x * inv)];
        let mut alphas: Vec<f64> = Vec::new();
        let mut betas: Vec<f64> = Vec::new();
        let mut converged = None;
        for j in 0..max_basis {
            let mut w = apply(&basis[j]);
            let alpha = {
                let mut acc = 0.0;
                for (x, y) in basis[j].iter().zip(w.iter()) {
                    acc += (x.conj() * *y).re();
                }
                acc
            };
            alphas.push(alpha);
            // Full reorthogonalization for numerical robustness.
            for _ in 0..2 {
                for b in &basis {
                    let mut ip = C64::new(0.0, 0.0);
                    for (x, y) in b.iter().zip(w.iter()) {
                        ip += (x.conj() * *y).to_c64();
                    }
                    let ip_t = T::from_c64(ip);
                    for (wx, bx) in w.iter_mut().zip(b.iter()) {
                        *wx = *wx - ip_t * *bx;
                    }
                }
            }
            let beta = w.iter().map(|x| x.square()).sum::<f64>().sqrt();
            // Ritz estimate on the current tridiagonal.
            let k = alphas.len();
            let mut tri = Array2::<f64>::zeros((k, k));
            for i in 0..k {
                tri[(i, i)] = alphas[i];
                if i + 1 < k {
                    tri[(i, i + 1)] = betas[i];
                    tri[(i + 1, i)] = betas[i];
                }
            }
            let (tvals, tvecs) = eigh_all(&tri.view())?;
            let theta = tvals[0];
            let last = tvecs[(k - 1, 0)].abs();
            let resid = beta * last;
            if resid <= tol * theta.abs().max(1.0) {
                // Converged; also rebuild the Ritz vector as the next-round
                // start in case an outer restart wants it.
                converged = Some(theta);
                let mut ritz = Array1::<T>::zeros(n);
                for (i, b) in basis.iter().enumerate() {
                    let c = T::from_c64(C64::new(tvecs[(i, 0)], 0.0));
                    for (rx, bx) in ritz.iter_mut().zip(b.iter()) {
                        *rx = *rx + c * *bx;
                    }
                }
                v0 = ritz;
                break;
            }
            if j + 1 == max_basis || beta < 1e-14 {
                // Restart from the best Ritz vector.
                let mut ritz = Array1::<T>::zeros(n);
                for (i, b) in basis.iter().enumerate() {
                    let c = T::from_c64(C64::new(tvecs[(i, 0)], 0.0));
                    for (rx, bx) in ritz.iter_mut().zip(b.iter()) {
                        *rx = *rx + c * *bx;
                    }
                }
                v0 = ritz;
                best = Some(theta);
                break;
            }
            let invb = T::from_c64(C64::new(1.0 / beta, 0.0));
            basis.push(w.mapv(|x| x * invb));
            betas.push(beta);
        }
        if let Some(theta) = converged {
            return Ok(theta);
        }
        if round + 1 == max_rounds {
            break;
        }
    }
    best.ok_or(TensorError::LanczosStalled(max_rounds))
}

/// A dense tensor with row-major storage and explicit shape.
///
/// Thin container used for tensor-network data (for example the `(D, d, D)`
/// site tensor of a uniform matrix-product state) and for serialization.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    entries: Vec<C64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, entries: Vec<C64>) -> Result<Self, TensorError> {
        let count: usize = shape.iter().product();
        if count != entries.len() {
            return Err(TensorError::EntryCount {
                count: entries.len(),
                shape,
            });
        }
        Ok(Self { shape, entries })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count: usize = shape.iter().product();
        Self {
            shape,
            entries: vec![C64::new(0.0, 0.0); count],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn entries(&self) -> &[C64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [C64] {
        &mut self.entries
    }

    /// Reinterpret under a new shape with the same entry count; the row-major
    /// entry order is preserved.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let count: usize = shape.iter().product();
        if count != self.entries.len() {
            return Err(TensorError::EntryCount {
                count: self.entries.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            entries: self.entries.clone(),
        })
    }

    /// Flat row-major offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &x) in idx.iter().enumerate() {
            debug_assert!(x < self.shape[i]);
            off = off * self.shape[i] + x;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> C64 {
        self.entries[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: C64) {
        let off = self.offset(idx);
        self.entries[off] = v;
    }

    /// View as a matrix splitting the shape after `row_factors` leading axes.
    pub fn as_matrix(&self, row_factors: usize) -> Result<Array2<C64>, TensorError> {
        let rows: usize = self.shape[..row_factors].iter().product();
        let cols: usize = self.shape[row_factors..].iter().product();
        Array2::from_shape_vec((rows, cols), self.entries.clone())
            .map_err(|e| TensorError::ShapeMismatch(e.to_string()))
    }
}

/// A Hermitian matrix; construction symmetrizes via `(M + M†)/2` so the
/// stored operator is Hermitian to machine precision by fiat.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HermitianMatrix {
    mat: Array2<C64>,
}

impl HermitianMatrix {
    pub fn new(m: Array2<C64>) -> Result<Self, TensorError> {
        let (r, c) = m.dim();
        if r != c {
            return Err(TensorError::NotSquare { rows: r, cols: c });
        }
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(TensorError::NonFinite("HermitianMatrix::new"));
        }
        let herm = (&m + &dagger(&m.view())).mapv(|z| z * 0.5);
        Ok(Self { mat: herm })
    }

    pub fn from_real(m: Array2<f64>) -> Result<Self, TensorError> {
        Self::new(m.mapv(|x| C64::new(x, 0.0)))
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn mat(&self) -> &Array2<C64> {
        &self.mat
    }

    /// Largest absolute imaginary part; zero (to roundoff) for real data.
    pub fn max_imag(&self) -> f64 {
        self.mat.iter().map(|z| z.im.abs()).fold(0.0, f64::max)
    }

    /// Real part as an `f64` matrix (exact when `max_imag` is negligible).
    pub fn real_part(&self) -> Array2<f64> {
        self.mat.mapv(|z| z.re)
    }

    pub fn min_eigenvalue(&self) -> Result<f64, TensorError> {
        min_eigenvalue(&self.mat.view())
    }

    pub fn trace(&self) -> f64 {
        self.mat.diag().iter().map(|z| z.re).sum()
    }
}

/// Seeded dense random matrix with entries uniform in [-1, 1] (+ i[-1, 1] in
/// the complex case). Used by probe tests and deterministic initializers.
pub fn random_matrix<T: Element>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let mut m = Array2::<T>::zeros((rows, cols));
    for x in m.iter_mut() {
        let re = rng.gen_range(-1.0..1.0);
        let im = if T::IS_COMPLEX {
            rng.gen_range(-1.0..1.0)
        } else {
            0.0
        };
        *x = T::from_c64(C64::new(re, im));
    }
    m
}

/// Seeded random Hermitian PSD matrix with unit trace (a random state).
pub fn random_state<T: Element>(n: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let g: Array2<T> = random_matrix(n, n, rng);
    let p = g.dot(&dagger(&g.view()));
    let tr: f64 = p.diag().iter().map(|x| x.re()).sum();
    p.mapv(|x| x * T::from_c64(C64::new(1.0 / tr, 0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    /// The eigendecomposition contract m = V·diag(λ)·V† must hold with V's
    /// *columns* as eigenvectors for genuinely complex input (backends that
    /// hand row-major storage to column-major routines silently diagonalize
    /// the transpose instead).
    #[test]
    fn eigh_columns_are_eigenvectors_for_complex_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = random_matrix::<C64>(6, 6, &mut rng);
        let m = {
            let d = dagger(&raw.view());
            (&raw + &d).mapv(|z| z * c(0.5, 0.0))
        };
        assert!(
            m.iter().any(|z| z.im.abs() > 0.1),
            "probe must be genuinely complex"
        );
        let (vals, vecs) = eigh_all(&m.view()).unwrap();
        for j in 0..6 {
            let v = vecs.column(j).to_owned();
            let mv = m.dot(&v);
            let resid: f64 = mv
                .iter()
                .zip(v.iter())
                .map(|(a, b)| (*a - *b * c(vals[j], 0.0)).norm())
                .sum();
            assert!(resid <= 1e-12, "column {j} residual {resid}");
        }
        let mut w = vecs.clone();
        for (j, lam) in vals.iter().enumerate() {
            w.column_mut(j).mapv_inplace(|v| v * c(*lam, 0.0));
        }
        let rec = w.dot(&dagger(&vecs.view()));
        assert!(max_abs(&(&rec - &m).view()) <= 1e-12);
    }

    #[test]
    fn partial_trace_preserves_trace_and_matches_hand_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = [2usize, 3, 2];
        let side: usize = dims.iter().product();
        let m: Array2<C64> = random_state(side, &mut rng);
        let full_tr: C64 = m.diag().sum();

        let t0 = partial_trace(&m.view(), &dims, &[0]).unwrap();
        let t02 = partial_trace(&m.view(), &dims, &[0, 2]).unwrap();
        let tall = partial_trace(&m.view(), &dims, &[0, 1, 2]).unwrap();
        assert_eq!(t0.nrows(), 6);
        assert_eq!(t02.nrows(), 3);
        assert_eq!(tall.nrows(), 1);
        let tr0: C64 = t0.diag().sum();
        let tr02: C64 = t02.diag().sum();
        assert!((tr0 - full_tr).norm() < 1e-12, "trace preserved within 1e-12");
        assert!((tr02 - full_tr).norm() < 1e-12);
        assert!((tall[(0, 0)] - full_tr).norm() < 1e-12);

        // Hand check on a Kronecker product: tr_first of a ⊗ b is tr(a)·b.
        let a = array![[c(1.0, 0.0), c(0.0, 2.0)], [c(0.0, -2.0), c(3.0, 0.0)]];
        let b = array![[c(0.5, 0.0), c(0.1, 0.3)], [c(0.1, -0.3), c(2.0, 0.0)]];
        let ab = kron(&a.view(), &b.view());
        let got = trace_first(&ab.view(), &[2, 2], 1).unwrap();
        let want = b.mapv(|z| z * c(4.0, 0.0));
        let err = max_abs(&(&got - &want).view());
        assert!(err < 1e-13, "tr_first(a⊗b) = tr(a)·b, err={err}");

        let got2 = trace_last(&ab.view(), &[2, 2], 1).unwrap();
        let want2 = a.mapv(|z| z * c(2.5, 0.0));
        assert!(max_abs(&(&got2 - &want2).view()) < 1e-13);
    }

    #[test]
    fn apply_kraus_preserves_psd_and_matches_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Two Kraus operators 3x4 acting on the middle range (factors 1..3)
        // of dims (2, 2, 2, 3): in-dim 4, out-dim 3.
        let dims = [2usize, 2, 2, 3];
        let side: usize = dims.iter().product();
        let m: Array2<C64> = random_state(side, &mut rng);
        let k1: Array2<C64> = random_matrix(3, 4, &mut rng);
        let k2: Array2<C64> = random_matrix(3, 4, &mut rng);
        let kraus = vec![k1.clone(), k2.clone()];

        let fast = apply_kraus_range(&kraus, &m.view(), &dims, 1, 2).unwrap();

        // Reference: materialized embedding I_2 ⊗ K ⊗ I_3.
        let mut slow = Array2::<C64>::zeros((2 * 3 * 3, 2 * 3 * 3));
        for k in &kraus {
            let e = kron(&kron(&eye::<C64>(2).view(), &k.view()).view(), &eye::<C64>(3).view());
            slow = slow + e.dot(&m).dot(&dagger(&e.view()));
        }
        let err = max_abs(&(&fast - &slow).view());
        assert!(err < 1e-12, "kraus application matches embedding, err={err}");

        // PSD preservation: smallest eigenvalue above -1e-10.
        let lam = min_eigenvalue(&fast.view()).unwrap();
        assert!(lam > -1e-10, "CP map keeps PSD, min eig {lam}");
    }

    #[test]
    fn kraus_adjoint_identity_holds_on_random_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dims = [2usize, 4, 3];
        let side: usize = dims.iter().product();
        let out_dims = [2usize, 2, 3];
        let out_side: usize = out_dims.iter().product();
        let k1: Array2<C64> = random_matrix(2, 4, &mut rng);
        let k2: Array2<C64> = random_matrix(2, 4, &mut rng);
        let kraus = vec![k1, k2];
        let adj: Vec<Array2<C64>> = kraus.iter().map(|k| dagger(&k.view())).collect();

        for _ in 0..3 {
            let x: Array2<C64> = random_state(side, &mut rng);
            let y: Array2<C64> = random_state(out_side, &mut rng);
            let fx = apply_kraus_range(&kraus, &x.view(), &dims, 1, 1).unwrap();
            let ay = apply_kraus_range(&adj, &y.view(), &out_dims, 1, 1).unwrap();
            let lhs = hs_inner(&fx.view(), &y.view());
            let rhs = hs_inner(&x.view(), &ay.view());
            assert!(
                (lhs - rhs).abs() < 1e-10,
                "⟨Φ(x), y⟩ = ⟨x, Φ†(y)⟩ within 1e-10: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn min_eigenvalue_dense_matches_rayleigh_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m: Array2<C64> = {
            let g: Array2<C64> = random_matrix(40, 40, &mut rng);
            (&g + &dagger(&g.view())).mapv(|z| z * 0.5)
        };
        let lam = min_eigenvalue(&m.view()).unwrap();
        // Rayleigh quotients of random probes never undercut the minimum.
        for _ in 0..5 {
            let v: Array2<C64> = random_matrix(40, 1, &mut rng);
            let nv = fro_norm(&v.view());
            let q = hs_inner(&v.view(), &m.dot(&v).view()) / (nv * nv);
            assert!(q >= lam - 1e-10, "Rayleigh {q} below min eig {lam}");
        }
    }

    #[test]
    fn lanczos_matches_dense_on_moderate_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 120;
        let g: Array2<f64> = random_matrix(n, n, &mut rng);
        let m = (&g + &g.t()).mapv(|x| x * 0.5);
        let dense = eigvalsh(&m.view()).unwrap()[0];
        let fast = lanczos_smallest(|v| m.dot(v), n, 1e-11, 42, 60).unwrap();
        assert!(
            (dense - fast).abs() < 1e-9 * dense.abs().max(1.0),
            "Lanczos {fast} vs dense {dense}"
        );
    }

    #[test]
    fn dense_tensor_reshape_preserves_order_and_validates_counts() {
        let t = DenseTensor::new(vec![2, 3], (0..6).map(|i| c(i as f64, 0.0)).collect()).unwrap();
        let r = t.reshape(vec![3, 2]).unwrap();
        assert_eq!(r.entries(), t.entries());
        assert_eq!(r.get(&[2, 1]), c(5.0, 0.0));
        assert!(t.reshape(vec![4, 2]).is_err());
        assert!(DenseTensor::new(vec![2, 2], vec![c(0.0, 0.0); 3]).is_err());
    }

    #[test]
    fn hermitian_matrix_symmetrizes_on_construction() {
        let m = array![[c(1.0, 0.5), c(2.0, 1.0)], [c(0.0, 0.0), c(3.0, -0.5)]];
        let h = HermitianMatrix::new(m).unwrap();
        let d = max_abs(&(&dagger(&h.mat().view()) - h.mat()).view());
        assert!(d < 1e-15, "stored matrix Hermitian to machine precision");
    }
}
