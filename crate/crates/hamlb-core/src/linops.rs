//! Matrix-free linear operators on block variables, and the block-SDP
//! problem description built from them.
//!
//! A problem is a list of Hermitian block variables (each a product of named
//! site factors), a set of affine equality rows whose left-hand sides are
//! sums of structured operators applied to blocks, an objective on one block,
//! and metadata used later by the dual certification cascade. Operators are
//! never materialized as sparse matrices; forward and adjoint applications
//! are implemented directly in terms of partial traces, Kraus conjugations,
//! and compositions.

use ndarray::{Array2, ArrayView2};
use ndarray_linalg::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::tensor::{
    dagger, eye, hs_inner, kron, max_abs, partial_trace, random_matrix, C64, Element, TensorError,
};
use crate::umps::TraceBehavior;

/// Errors from operator application and problem assembly.
#[derive(Debug, Error)]
pub enum LinOpError {
    #[error("operator expects {expected} input factors, block has {found}")]
    FactorMismatch { expected: usize, found: usize },
    #[error("adjoint probe failed on row `{row}`: relative deviation {dev:.3e} > {tol:.1e}")]
    AdjointProbe { row: String, dev: f64, tol: f64 },
    #[error("row `{row}` output dim {found} does not match declared {declared}")]
    RowDimMismatch {
        row: String,
        found: usize,
        declared: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A structured linear map between spaces of square matrices.
///
/// Inputs carry a factor list (site extents whose product is the matrix side
/// length); each variant transforms both the matrix and the factor list.
#[derive(Debug, Clone)]
pub enum LinOp<T: Element> {
    /// Identity.
    Id,
    /// Trace out the first `k` factors.
    TraceFirst { k: usize },
    /// Trace out the last `k` factors.
    TraceLast { k: usize },
    /// Full trace, producing a 1×1 output.
    TraceAll,
    /// Apply a Kraus family to the contiguous factor range
    /// `start..start+span`, replacing it with one factor of `out_dim`.
    Kraus {
        kraus: Vec<Array2<T>>,
        adj: Vec<Array2<T>>,
        start: usize,
        span: usize,
        out_dim: usize,
    },
    /// Sequential composition, applied left to right.
    Compose(Vec<LinOp<T>>),
    /// Formal adjoint of the wrapped operator. The wrapped input factors
    /// must be supplied at construction since they are not recoverable from
    /// the adjoint's own input.
    Adj {
        inner: Box<LinOp<T>>,
        inner_factors: Vec<usize>,
    },
    /// Dense rectangular map on row-major vectorized matrices:
    /// vec(out) = m · vec(in). Used where no structured form exists
    /// (channel-variable rows in the map optimizer).
    GeneralLinear { m: Array2<T>, out_dim: usize },
}

impl<T: Element> LinOp<T> {
    /// Build a Kraus variant, caching the daggered operators.
    pub fn kraus(kraus: Vec<Array2<T>>, start: usize, span: usize) -> Self {
        let out_dim = kraus[0].nrows();
        let adj = kraus.iter().map(|k| dagger(&k.view())).collect();
        LinOp::Kraus {
            kraus,
            adj,
            start,
            span,
            out_dim,
        }
    }

    /// Output factor list for a given input factor list.
    pub fn out_factors(&self, factors: &[usize]) -> Vec<usize> {
        match self {
            LinOp::Id => factors.to_vec(),
            LinOp::TraceFirst { k } => factors[*k..].to_vec(),
            LinOp::TraceLast { k } => factors[..factors.len() - k].to_vec(),
            LinOp::TraceAll => vec![1],
            LinOp::Kraus {
                start,
                span,
                out_dim,
                ..
            } => {
                let mut out = factors[..*start].to_vec();
                out.push(*out_dim);
                out.extend_from_slice(&factors[start + span..]);
                out
            }
            LinOp::Compose(ops) => {
                let mut f = factors.to_vec();
                for op in ops {
                    f = op.out_factors(&f);
                }
                f
            }
            LinOp::Adj { inner_factors, .. } => inner_factors.clone(),
            LinOp::GeneralLinear { out_dim, .. } => vec![*out_dim],
        }
    }

    /// Forward application. `factors` describes the input block.
    pub fn apply(&self, x: &ArrayView2<T>, factors: &[usize]) -> Result<Array2<T>, LinOpError> {
        match self {
            LinOp::Id => Ok(x.to_owned()),
            LinOp::TraceFirst { k } => {
                let traced: Vec<usize> = (0..*k).collect();
                Ok(partial_trace(x, factors, &traced)?)
            }
            LinOp::TraceLast { k } => {
                let n = factors.len();
                let traced: Vec<usize> = (n - k..n).collect();
                Ok(partial_trace(x, factors, &traced)?)
            }
            LinOp::TraceAll => {
                let mut out = Array2::<T>::zeros((1, 1));
                out[(0, 0)] = x.diag().sum();
                Ok(out)
            }
            LinOp::Kraus {
                kraus, start, span, ..
            } => Ok(crate::tensor::apply_kraus_range(
                kraus, x, factors, *start, *span,
            )?),
            LinOp::Compose(ops) => {
                let mut m = x.to_owned();
                let mut f = factors.to_vec();
                for op in ops {
                    m = op.apply(&m.view(), &f)?;
                    f = op.out_factors(&f);
                }
                Ok(m)
            }
            LinOp::Adj {
                inner,
                inner_factors,
            } => inner.apply_adjoint(x, inner_factors),
            LinOp::GeneralLinear { m, .. } => {
                let n_in = x.nrows();
                let vec_in: Vec<T> = x.iter().copied().collect();
                let o = (m.nrows() as f64).sqrt().round() as usize;
                let mut out = Array2::<T>::zeros((o, o));
                for r in 0..m.nrows() {
                    let mut acc = T::zero();
                    for c in 0..n_in * n_in {
                        acc += m[(r, c)] * vec_in[c];
                    }
                    out[(r / o, r % o)] = acc;
                }
                Ok(out)
            }
        }
    }

    /// Adjoint application: maps a matrix on the output space back to the
    /// input space, satisfying ⟨L(x), y⟩ = ⟨x, L†(y)⟩ in the Hilbert–Schmidt
    /// inner product. `factors` describes the forward *input* block.
    pub fn apply_adjoint(
        &self,
        y: &ArrayView2<T>,
        factors: &[usize],
    ) -> Result<Array2<T>, LinOpError> {
        match self {
            LinOp::Id => Ok(y.to_owned()),
            LinOp::TraceFirst { k } => {
                let d: usize = factors[..*k].iter().product();
                Ok(kron(&eye::<T>(d).view(), y))
            }
            LinOp::TraceLast { k } => {
                let d: usize = factors[factors.len() - k..].iter().product();
                Ok(kron(y, &eye::<T>(d).view()))
            }
            LinOp::TraceAll => {
                let d: usize = factors.iter().product();
                Ok(eye::<T>(d).mapv(|e| e * y[(0, 0)]))
            }
            LinOp::Kraus {
                adj, start, span, ..
            } => {
                // The forward output has one factor of out_dim at `start`;
                // conjugating by the daggered Kraus family restores the span.
                let mut yf = factors[..*start].to_vec();
                yf.push(adj[0].ncols());
                yf.extend_from_slice(&factors[start + span..]);
                Ok(crate::tensor::apply_kraus_range(
                    adj, y, &yf, *start, 1,
                )?)
            }
            LinOp::Compose(ops) => {
                // Adjoint of a composition applies the adjoints in reverse,
                // each against the factor list its forward stage consumed.
                let mut stages = Vec::with_capacity(ops.len());
                let mut f = factors.to_vec();
                for op in ops {
                    stages.push(f.clone());
                    f = op.out_factors(&f);
                }
                let mut m = y.to_owned();
                for (op, fin) in ops.iter().zip(stages.iter()).rev() {
                    m = op.apply_adjoint(&m.view(), fin)?;
                }
                Ok(m)
            }
            LinOp::Adj {
                inner,
                inner_factors,
            } => inner.apply(y, inner_factors),
            LinOp::GeneralLinear { m, .. } => {
                let o = (m.nrows() as f64).sqrt().round() as usize;
                let n = (m.ncols() as f64).sqrt().round() as usize;
                let vec_y: Vec<T> = y.iter().copied().collect();
                let mut out = Array2::<T>::zeros((n, n));
                for c in 0..m.ncols() {
                    let mut acc = T::zero();
                    for r in 0..o * o {
                        acc += m[(r, c)].conj() * vec_y[r];
                    }
                    out[(c / n, c % n)] = acc;
                }
                Ok(out)
            }
        }
    }

    fn realify(&self) -> Option<LinOp<f64>>
    where
        T: Element,
    {
        const IM_TOL: f64 = 1e-13;
        let real_mat = |m: &Array2<T>| -> Option<Array2<f64>> {
            let mut out = Array2::<f64>::zeros(m.dim());
            for (o, v) in out.iter_mut().zip(m.iter()) {
                let z = v.to_c64();
                if z.im.abs() > IM_TOL {
                    return None;
                }
                *o = z.re;
            }
            Some(out)
        };
        Some(match self {
            LinOp::Id => LinOp::Id,
            LinOp::TraceFirst { k } => LinOp::TraceFirst { k: *k },
            LinOp::TraceLast { k } => LinOp::TraceLast { k: *k },
            LinOp::TraceAll => LinOp::TraceAll,
            LinOp::Kraus {
                kraus, start, span, ..
            } => {
                let rk: Option<Vec<_>> = kraus.iter().map(real_mat).collect();
                LinOp::kraus(rk?, *start, *span)
            }
            LinOp::Compose(ops) => {
                let ros: Option<Vec<_>> = ops.iter().map(|o| o.realify()).collect();
                LinOp::Compose(ros?)
            }
            LinOp::Adj {
                inner,
                inner_factors,
            } => LinOp::Adj {
                inner: Box::new(inner.realify()?),
                inner_factors: inner_factors.clone(),
            },
            LinOp::GeneralLinear { m, out_dim } => LinOp::GeneralLinear {
                m: real_mat(m)?,
                out_dim: *out_dim,
            },
        })
    }
}

/// Cone membership of a block variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Cone {
    /// Positive semidefinite Hermitian.
    Psd,
    /// Unconstrained Hermitian (used for multiplier blocks in dual-form
    /// problems).
    Free,
}

/// One declared block variable.
#[derive(Debug, Clone, Serialize)]
pub struct BlockVarSpec {
    pub label: String,
    pub dim: usize,
    pub factor_list: Vec<usize>,
    pub cone: Cone,
}

impl BlockVarSpec {
    pub fn psd(label: impl Into<String>, factor_list: Vec<usize>) -> Self {
        let dim = factor_list.iter().product();
        BlockVarSpec {
            label: label.into(),
            dim,
            factor_list,
            cone: Cone::Psd,
        }
    }

    pub fn free(label: impl Into<String>, factor_list: Vec<usize>) -> Self {
        let dim = factor_list.iter().product();
        BlockVarSpec {
            label: label.into(),
            dim,
            factor_list,
            cone: Cone::Free,
        }
    }
}

/// One summand of a constraint row: `coeff · op(blocks[block])`.
#[derive(Debug, Clone)]
pub struct Term<T: Element> {
    pub block: usize,
    pub coeff: f64,
    pub op: LinOp<T>,
}

/// Right-hand side of a row.
#[derive(Debug, Clone)]
pub enum Rhs<T: Element> {
    Zero,
    ScalarOne,
    Matrix(Array2<T>),
}

/// Coarse classification of rows, used by certification and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RowKind {
    /// Normalization `tr(ρ) = 1`.
    Trace,
    /// Local-translation-invariance row (shift-insensitive multiplier).
    Lti,
    /// Marginal row tying adjacent exact blocks.
    Marginal,
    /// Compression row tying a block to the next level through channels.
    Link,
    /// Trace-preservation row on a Choi block.
    ChoiTp,
    /// Row of a dual-form problem (slack definition).
    DualSlack,
}

/// One affine equality row: Σ_t coeff_t · op_t(block_t) = rhs.
#[derive(Debug, Clone)]
pub struct AffineConstraint<T: Element> {
    pub label: String,
    pub kind: RowKind,
    pub out_dim: usize,
    pub terms: Vec<Term<T>>,
    pub rhs: Rhs<T>,
}

impl<T: Element> AffineConstraint<T> {
    /// Forward application against a full set of block values.
    pub fn apply(
        &self,
        blocks: &[Array2<T>],
        vars: &[BlockVarSpec],
    ) -> Result<Array2<T>, LinOpError> {
        let mut out = Array2::<T>::zeros((self.out_dim, self.out_dim));
        for t in &self.terms {
            let img = t
                .op
                .apply(&blocks[t.block].view(), &vars[t.block].factor_list)?;
            out.zip_mut_with(&img, |o, v| *o += *v * T::from_real(t.coeff));
        }
        Ok(out)
    }

    /// Right-hand side as a matrix.
    pub fn rhs_matrix(&self) -> Array2<T> {
        match &self.rhs {
            Rhs::Zero => Array2::zeros((self.out_dim, self.out_dim)),
            Rhs::ScalarOne => {
                let mut m = Array2::zeros((self.out_dim, self.out_dim));
                m[(0, 0)] = T::one();
                m
            }
            Rhs::Matrix(m) => m.clone(),
        }
    }
}

/// A step of the certification cascade: shifting the designated row's
/// multiplier by `shift · δ · I` adds `+δ·I` to `block`'s dual slack, and the
/// resulting perturbation reaches only shallower blocks through
/// trace-monotone operators.
#[derive(Debug, Clone, Serialize)]
pub struct CascadeStep {
    pub block: usize,
    pub row: usize,
    pub shift: f64,
}

/// Audit metadata attached by the builders.
#[derive(Debug, Clone, Serialize)]
pub struct ProblemMeta {
    /// Problem family tag (`lti`, `mps`, `ttn`, `shift2-lti`, `dual-form`).
    pub family: String,
    /// Measured trace behavior of the channel carried by each row, if any.
    pub row_channel_behavior: Vec<Option<TraceBehavior>>,
}

/// A block SDP: minimize ⟨objective, blocks[norm]⟩ subject to the affine
/// rows, with each block in its declared cone.
#[derive(Debug, Clone)]
pub struct SdpProblem<T: Element> {
    pub vars: Vec<BlockVarSpec>,
    pub constraints: Vec<AffineConstraint<T>>,
    /// (block index, Hermitian coefficient matrix). The objective block is
    /// also the trace-normalized base ensemble.
    pub objective: (usize, Array2<T>),
    /// Index of the trace-one row.
    pub trace_row: usize,
    /// Deepest-first repair schedule for dual certification; the base block
    /// is always repaired last through the trace row.
    pub cascade: Vec<CascadeStep>,
    /// An exactly feasible primal point (used to start the solver and to
    /// check strong duality assumptions).
    pub witness: Vec<Array2<T>>,
    pub meta: ProblemMeta,
}

impl<T: Element> SdpProblem<T> {
    /// Objective value of a set of blocks.
    pub fn objective_value(&self, blocks: &[Array2<T>]) -> f64 {
        let (b, c) = (&self.objective.0, &self.objective.1);
        hs_inner(&c.view(), &blocks[*b].view()).re()
    }

    /// Total number of real scalar degrees of freedom over all blocks.
    pub fn scalar_count(&self) -> usize {
        self.vars
            .iter()
            .map(|v| {
                if T::IS_COMPLEX {
                    v.dim * v.dim
                } else {
                    v.dim * (v.dim + 1) / 2
                }
            })
            .sum()
    }

    /// Maximum violation of the affine rows at a point.
    pub fn max_row_violation(&self, blocks: &[Array2<T>]) -> Result<f64, LinOpError> {
        let mut worst = 0f64;
        for row in &self.constraints {
            let lhs = row.apply(blocks, &self.vars)?;
            let diff = &lhs - &row.rhs_matrix();
            worst = worst.max(max_abs(&diff.view()));
        }
        Ok(worst)
    }

    /// Verify ⟨row(x), y⟩ = Σ_t coeff·⟨x, op†(y)⟩ on seeded random probes.
    ///
    /// Run at build time by every builder; failures indicate a mismatched
    /// adjoint implementation, not bad data.
    pub fn check_adjoints(&self, probes: usize, tol: f64, seed: u64) -> Result<(), LinOpError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for row in &self.constraints {
            for _ in 0..probes {
                let xs: Vec<Array2<T>> = self
                    .vars
                    .iter()
                    .map(|v| random_matrix::<T>(v.dim, v.dim, &mut rng))
                    .collect();
                let y = random_matrix::<T>(row.out_dim, row.out_dim, &mut rng);
                let lhs = hs_inner(&row.apply(&xs, &self.vars)?.view(), &y.view());
                let mut rhs = C64::new(0.0, 0.0);
                let mut scale = 1f64;
                for t in &row.terms {
                    let adj = t
                        .op
                        .apply_adjoint(&y.view(), &self.vars[t.block].factor_list)?;
                    rhs += hs_inner(&xs[t.block].view(), &adj.view()).to_c64()
                        * C64::new(t.coeff, 0.0);
                    scale = scale.max(max_abs(&adj.view()) * max_abs(&xs[t.block].view()));
                }
                let dev = (lhs.to_c64() - rhs).norm() / scale.max(1.0);
                if dev > tol {
                    return Err(LinOpError::AdjointProbe {
                        row: row.label.clone(),
                        dev,
                        tol,
                    });
                }
            }
        }
        Ok(())
    }

    /// Check that every row's declared output dimension matches what its
    /// first term produces.
    pub fn check_row_dims(&self) -> Result<(), LinOpError> {
        for row in &self.constraints {
            for t in &row.terms {
                let f = t.op.out_factors(&self.vars[t.block].factor_list);
                let found: usize = f.iter().product();
                if found != row.out_dim {
                    return Err(LinOpError::RowDimMismatch {
                        row: row.label.clone(),
                        found,
                        declared: row.out_dim,
                    });
                }
            }
        }
        Ok(())
    }

    /// Summary record: block count, real scalar count, constraint rows.
    pub fn stats(&self) -> ProblemStats {
        ProblemStats {
            blocks: self.vars.len(),
            scalars: self.scalar_count(),
            rows: self.constraints.len(),
            row_scalars: self
                .constraints
                .iter()
                .map(|r| {
                    if T::IS_COMPLEX {
                        r.out_dim * r.out_dim
                    } else {
                        r.out_dim * (r.out_dim + 1) / 2
                    }
                })
                .sum(),
        }
    }

    /// Problem description (labels, dims, row names) for audit output.
    pub fn describe(&self) -> ProblemDescription {
        ProblemDescription {
            family: self.meta.family.clone(),
            blocks: self
                .vars
                .iter()
                .map(|v| BlockDescription {
                    label: v.label.clone(),
                    dim: v.dim,
                    factors: v.factor_list.clone(),
                    cone: v.cone,
                })
                .collect(),
            rows: self
                .constraints
                .iter()
                .map(|r| RowDescription {
                    label: r.label.clone(),
                    kind: r.kind,
                    out_dim: r.out_dim,
                })
                .collect(),
            stats: self.stats(),
        }
    }
}

impl SdpProblem<C64> {
    /// Real restriction when every datum (Kraus entries, objective, right
    /// hand sides) is real. The optimum of a real-data SDP is attained on
    /// real symmetric blocks — conjugating any feasible point gives another
    /// with the same objective, so the midpoint is real and feasible — and
    /// real blocks halve the cost of every projection eigendecomposition.
    pub fn realify(&self) -> Option<SdpProblem<f64>> {
        const IM_TOL: f64 = 1e-13;
        let real_mat = |m: &Array2<C64>| -> Option<Array2<f64>> {
            let mut out = Array2::<f64>::zeros(m.dim());
            for (o, v) in out.iter_mut().zip(m.iter()) {
                if v.im.abs() > IM_TOL {
                    return None;
                }
                *o = v.re;
            }
            Some(out)
        };
        let constraints: Option<Vec<AffineConstraint<f64>>> = self
            .constraints
            .iter()
            .map(|r| {
                let terms: Option<Vec<Term<f64>>> = r
                    .terms
                    .iter()
                    .map(|t| {
                        Some(Term {
                            block: t.block,
                            coeff: t.coeff,
                            op: t.op.realify()?,
                        })
                    })
                    .collect();
                let rhs = match &r.rhs {
                    Rhs::Zero => Rhs::Zero,
                    Rhs::ScalarOne => Rhs::ScalarOne,
                    Rhs::Matrix(m) => Rhs::Matrix(real_mat(m)?),
                };
                Some(AffineConstraint {
                    label: r.label.clone(),
                    kind: r.kind,
                    out_dim: r.out_dim,
                    terms: terms?,
                    rhs,
                })
            })
            .collect();
        Some(SdpProblem {
            vars: self.vars.clone(),
            constraints: constraints?,
            objective: (self.objective.0, real_mat(&self.objective.1)?),
            trace_row: self.trace_row,
            cascade: self.cascade.clone(),
            witness: self
                .witness
                .iter()
                .map(real_mat)
                .collect::<Option<Vec<_>>>()?,
            meta: self.meta.clone(),
        })
    }
}

/// A built problem in whichever scalar field its data require.
#[derive(Debug, Clone)]
pub enum AnyProblem {
    Real(SdpProblem<f64>),
    Complex(SdpProblem<C64>),
}

impl AnyProblem {
    /// Wrap a complex-built problem, dropping to the real field when exact.
    pub fn from_complex(p: SdpProblem<C64>) -> Self {
        match p.realify() {
            Some(r) => AnyProblem::Real(r),
            None => AnyProblem::Complex(p),
        }
    }

    pub fn stats(&self) -> ProblemStats {
        match self {
            AnyProblem::Real(p) => p.stats(),
            AnyProblem::Complex(p) => p.stats(),
        }
    }

    pub fn describe(&self) -> ProblemDescription {
        match self {
            AnyProblem::Real(p) => p.describe(),
            AnyProblem::Complex(p) => p.describe(),
        }
    }
}

/// Size summary of a built problem.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProblemStats {
    pub blocks: usize,
    pub scalars: usize,
    pub rows: usize,
    pub row_scalars: usize,
}

/// JSON-serializable audit record.
#[derive(Debug, Clone, Serialize)]
pub struct ProblemDescription {
    pub family: String,
    pub blocks: Vec<BlockDescription>,
    pub rows: Vec<RowDescription>,
    pub stats: ProblemStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockDescription {
    pub label: String,
    pub dim: usize,
    pub factors: Vec<usize>,
    pub cone: Cone,
}

#[derive(Debug, Clone, Serialize)]
pub struct RowDescription {
    pub label: String,
    pub kind: RowKind,
    pub out_dim: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::random_state;
    use ndarray::array;

    fn probe_pair<T: Element>(
        op: &LinOp<T>,
        factors: &[usize],
        seed: u64,
    ) -> (C64, C64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim: usize = factors.iter().product();
        let x = random_matrix::<T>(dim, dim, &mut rng);
        let out_f = op.out_factors(factors);
        let out_dim: usize = out_f.iter().product();
        let y = random_matrix::<T>(out_dim, out_dim, &mut rng);
        let lhs = hs_inner(&op.apply(&x.view(), factors).unwrap().view(), &y.view());
        let rhs = hs_inner(
            &x.view(),
            &op.apply_adjoint(&y.view(), factors).unwrap().view(),
        );
        (lhs.to_c64(), rhs.to_c64())
    }

    #[test]
    fn adjoint_identity_holds_for_every_variant() {
        let factors = [2usize, 3, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k1: Array2<C64> = random_matrix(2, 6, &mut rng);
        let k2: Array2<C64> = random_matrix(2, 6, &mut rng);
        let ops: Vec<LinOp<C64>> = vec![
            LinOp::Id,
            LinOp::TraceFirst { k: 1 },
            LinOp::TraceLast { k: 2 },
            LinOp::TraceAll,
            LinOp::kraus(vec![k1.clone(), k2.clone()], 0, 2),
            LinOp::Compose(vec![
                LinOp::kraus(vec![k1.clone(), k2.clone()], 0, 2),
                LinOp::TraceLast { k: 1 },
            ]),
        ];
        for (i, op) in ops.iter().enumerate() {
            let (lhs, rhs) = probe_pair(op, &factors, 10 + i as u64);
            assert!(
                (lhs - rhs).norm() <= 1e-10 * (1.0 + lhs.norm()),
                "variant {i}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn adj_wrapper_swaps_forward_and_adjoint() {
        let factors = vec![2usize, 2];
        let op = LinOp::<C64>::TraceLast { k: 1 };
        let wrapped = LinOp::Adj {
            inner: Box::new(op.clone()),
            inner_factors: factors.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Array2<C64> = random_matrix(2, 2, &mut rng);
        let via_wrap = wrapped.apply(&y.view(), &[2]).unwrap();
        let direct = op.apply_adjoint(&y.view(), &factors).unwrap();
        assert!(max_abs(&(&via_wrap - &direct).view()) == 0.0);
        // And the wrapper's adjoint is the original forward.
        let x: Array2<C64> = random_matrix(4, 4, &mut rng);
        let via_wrap_adj = wrapped.apply_adjoint(&x.view(), &[2]).unwrap();
        let direct_fwd = op.apply(&x.view(), &factors).unwrap();
        assert!(max_abs(&(&via_wrap_adj - &direct_fwd).view()) == 0.0);
    }

    #[test]
    fn general_linear_matches_dense_expectations() {
        // A 1-qubit transpose map written densely: out[(i,j)] = in[(j,i)].
        let mut m = Array2::<C64>::zeros((4, 4));
        m[(0, 0)] = C64::new(1.0, 0.0); // (0,0) <- (0,0)
        m[(1, 2)] = C64::new(1.0, 0.0); // (0,1) <- (1,0)
        m[(2, 1)] = C64::new(1.0, 0.0); // (1,0) <- (0,1)
        m[(3, 3)] = C64::new(1.0, 0.0); // (1,1) <- (1,1)
        let op = LinOp::GeneralLinear { m, out_dim: 2 };
        let x = array![
            [C64::new(1.0, 0.0), C64::new(2.0, 3.0)],
            [C64::new(4.0, -1.0), C64::new(5.0, 0.0)]
        ];
        let out = op.apply(&x.view(), &[2]).unwrap();
        assert_eq!(out[(0, 1)], x[(1, 0)]);
        assert_eq!(out[(1, 0)], x[(0, 1)]);
        let (lhs, rhs) = probe_pair(&op, &[2], 8);
        assert!((lhs - rhs).norm() <= 1e-12);
    }

    fn toy_problem() -> SdpProblem<C64> {
        // One 4-dim block (factors 2×2): trace-one plus an LTI row.
        let vars = vec![BlockVarSpec::psd("rho", vec![2, 2])];
        let trace = AffineConstraint {
            label: "trace".into(),
            kind: RowKind::Trace,
            out_dim: 1,
            terms: vec![Term {
                block: 0,
                coeff: 1.0,
                op: LinOp::TraceAll,
            }],
            rhs: Rhs::ScalarOne,
        };
        let lti = AffineConstraint {
            label: "lti".into(),
            kind: RowKind::Lti,
            out_dim: 2,
            terms: vec![
                Term {
                    block: 0,
                    coeff: 1.0,
                    op: LinOp::TraceFirst { k: 1 },
                },
                Term {
                    block: 0,
                    coeff: -1.0,
                    op: LinOp::TraceLast { k: 1 },
                },
            ],
            rhs: Rhs::Zero,
        };
        let c = eye::<C64>(4);
        SdpProblem {
            vars,
            constraints: vec![trace, lti],
            objective: (0, c),
            trace_row: 0,
            cascade: vec![],
            witness: vec![eye::<C64>(4).mapv(|z| z * C64::new(0.25, 0.0))],
            meta: ProblemMeta {
                family: "toy".into(),
                row_channel_behavior: vec![None, None],
            },
        }
    }

    #[test]
    fn problem_checks_and_witness_feasibility() {
        let p = toy_problem();
        p.check_row_dims().unwrap();
        p.check_adjoints(2, 1e-10, 42).unwrap();
        assert!(p.max_row_violation(&p.witness).unwrap() <= 1e-15);
        let stats = p.stats();
        assert_eq!((stats.blocks, stats.rows), (1, 2));
        assert_eq!(stats.scalars, 16);
    }

    #[test]
    fn adjoint_probe_catches_a_wrong_adjoint() {
        let mut p = toy_problem();
        // Sabotage: a Kraus operator whose cached adjoint list is scaled —
        // dimensions stay valid, the adjoint identity does not.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k: Array2<C64> = random_matrix(2, 4, &mut rng);
        let bad_adj = dagger(&k.view()).mapv(|z| z * C64::new(1.5, 0.0));
        p.constraints[1].terms = vec![Term {
            block: 0,
            coeff: 1.0,
            op: LinOp::Kraus {
                kraus: vec![k],
                adj: vec![bad_adj],
                start: 0,
                span: 2,
                out_dim: 2,
            },
        }];
        p.check_row_dims().unwrap();
        assert!(matches!(
            p.check_adjoints(2, 1e-10, 7),
            Err(LinOpError::AdjointProbe { .. })
        ));
    }

    #[test]
    fn realify_accepts_real_data_and_rejects_complex() {
        let p = toy_problem();
        let r = p.realify().expect("toy data is real");
        assert_eq!(r.vars[0].dim, 4);
        r.check_adjoints(2, 1e-10, 9).unwrap();

        let mut pc = toy_problem();
        pc.objective.1[(0, 1)] = C64::new(0.0, 0.5);
        pc.objective.1[(1, 0)] = C64::new(0.0, -0.5);
        assert!(pc.realify().is_none());
        match AnyProblem::from_complex(pc) {
            AnyProblem::Complex(_) => {}
            AnyProblem::Real(_) => panic!("complex data must stay complex"),
        }
    }

    #[test]
    fn kraus_adjoint_round_trip_on_states() {
        // Channel X ↦ K X K† on the middle factor of a 3-factor block,
        // adjoint applied to identity reproduces the Gram matrix padding.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k: Array2<C64> = random_matrix(5, 3, &mut rng);
        let op = LinOp::kraus(vec![k.clone()], 1, 1);
        let factors = [2usize, 3, 2];
        let x = random_state::<C64>(12, &mut rng);
        let out = op.apply(&x.view(), &factors).unwrap();
        assert_eq!(out.nrows(), 2 * 5 * 2);
        let gram = dagger(&k.view()).dot(&k);
        let adj_id = op
            .apply_adjoint(&eye::<C64>(20).view(), &factors)
            .unwrap();
        let expect = kron(&eye::<C64>(2).view(), &kron(&gram.view(), &eye::<C64>(2).view()).view());
        assert!(max_abs(&(&adj_id - &expect).view()) <= 1e-12);
    }
}
