//! Binary tree tensor networks: layer-uniform partial isometries, their
//! variational optimization on small periodic chains, and the conversion of
//! each isometry layer into a trace-preserving coarse-graining channel.
//!
//! A stack covers `2^N` sites with `N` layers; layer `l` holds one tensor
//! `T_l : H_{l-1}⊗H_{l-1} → H_l` repeated across all `2^{N-l}` positions of
//! that level, with `dim H_0 = d` and `dim H_N = 1`, so contracting the
//! adjoints top-down yields a normalized state. Each `T_l` satisfies
//! `T_l T_l† = I` (a partial isometry).
//!
//! To turn a layer into a channel, the isometry keeps its action on the span
//! of its rows while everything orthogonal to it — including all sectors that
//! involve the garbage level appended by layers below — is routed to one
//! fresh garbage level on the output: Kraus `|g⟩⟨k|` for every orthonormal
//! kernel vector `|k⟩`. The result is exactly trace preserving and the coarse
//! dimension grows by exactly one level per layer.

use ndarray::{Array1, Array2};
use ndarray_linalg::SVD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ring_apply, HamiltonianSpec, ModelError};
use crate::tensor::{
    dagger, eigh_all, eigvalsh, eye, kron, max_abs, C64, DenseTensor, HermitianMatrix, TensorError,
};
use crate::umps::CoarseGrainChannel;

/// Largest statevector dimension the tree optimizer and channel composer
/// accept.
pub const MAX_TREE_DIM: usize = 1 << 13;

/// Errors from tree construction and optimization.
#[derive(Debug, Error)]
pub enum TtnError {
    #[error("a tree needs at least two levels, got {0}")]
    BadLevels(usize),
    #[error("statevector dimension {dim} exceeds the tree limit {max}")]
    TooLarge { dim: usize, max: usize },
    #[error("input is not a partial isometry (‖TT† − I‖ = {deviation:.3e} > 1e-8)")]
    NotIsometry { deviation: f64 },
    #[error("channel failed the trace-preservation invariant (‖ΣK†K − I‖ = {deviation:.3e})")]
    NotTracePreserving { deviation: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A layer-uniform binary tree of partial isometries over `2^N` sites.
///
/// `dims` lists the level dimensions `[dim H_0, …, dim H_N]` with
/// `dims[0] = d` and `dims[N] = 1`; `layers[l-1]` stores `T_l` as a tensor of
/// shape `(dims[l], dims[l-1], dims[l-1])`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeStack {
    pub layers: Vec<DenseTensor>,
    pub dims: Vec<usize>,
}

impl TreeStack {
    /// Number of levels `N` (the chain has `2^N` sites).
    pub fn levels(&self) -> usize {
        self.layers.len()
    }

    /// Layer `l` (1-based) as a matrix `dims[l] × dims[l-1]²`.
    pub fn layer_matrix(&self, l: usize) -> Array2<C64> {
        let t = &self.layers[l - 1];
        let (o, c) = (self.dims[l], self.dims[l - 1]);
        let mut m = Array2::zeros((o, c * c));
        for a in 0..o {
            for b in 0..c * c {
                m[(a, b)] = t.entries()[a * c * c + b];
            }
        }
        m
    }

    fn set_layer(&mut self, l: usize, m: &Array2<C64>) {
        let (o, c) = (self.dims[l], self.dims[l - 1]);
        let entries: Vec<C64> = (0..o * c * c).map(|i| m[(i / (c * c), i % (c * c))]).collect();
        self.layers[l - 1] = DenseTensor::new(vec![o, c, c], entries).expect("layer shape");
    }

    /// Verify the partial-isometry invariant on every layer.
    pub fn check_isometries(&self) -> Result<(), TtnError> {
        for l in 1..=self.levels() {
            let t = self.layer_matrix(l);
            isometry_deviation(&t)?;
        }
        Ok(())
    }
}

fn isometry_deviation(t: &Array2<C64>) -> Result<f64, TtnError> {
    let g = t.dot(&dagger(&t.view()));
    let dev = max_abs(&(&g - &eye::<C64>(t.nrows())).view());
    if dev > 1e-8 {
        return Err(TtnError::NotIsometry { deviation: dev });
    }
    Ok(dev)
}

/// One isometry layer converted to a trace-preserving channel with a single
/// appended garbage level.
#[derive(Debug, Clone)]
pub struct CptpLayer {
    /// The channel; `trace_behavior` is `Preserving` by construction.
    pub channel: CoarseGrainChannel,
    /// Output dimension `dims[l] + 1` (core levels plus garbage, always).
    pub out_dim: usize,
}

/// Convert a partial isometry `T : c⊗c → D_out` into a CPTP layer.
///
/// When `prior_garbage` is set the incoming factors carry one garbage level
/// each (appended last), so the channel input is `(c+1)²` with `T` acting on
/// the core sector; every direction orthogonal to the rows of the embedded
/// `T` — kernel directions of `T` itself and all garbage-touching sectors
/// alike — is sent to the fresh output garbage level by a rank-one Kraus
/// operator. `ΣK†K = I` then holds by completeness of the singular basis.
pub fn isometry_to_cptp(t: &Array2<C64>, prior_garbage: bool) -> Result<CptpLayer, TtnError> {
    isometry_deviation(t)?;
    let d_out = t.nrows();
    let c2 = t.ncols();
    let c = (c2 as f64).sqrt().round() as usize;
    assert_eq!(c * c, c2, "tree layers take a pair of equal factors");
    let in_side = if prior_garbage { c + 1 } else { c };
    let n_in = in_side * in_side;
    // Embed T: input core sector (i1, i2 < c), output core sector (< D_out).
    let mut k0 = Array2::<C64>::zeros((d_out + 1, n_in));
    for o in 0..d_out {
        for i1 in 0..c {
            for i2 in 0..c {
                k0[(o, i1 * in_side + i2)] = t[(o, i1 * c + i2)];
            }
        }
    }
    // Kernel of the embedded isometry: the right singular vectors beyond the
    // first D_out span everything T does not reach. A full singular basis
    // keeps ΣK†K = I exact up to roundoff.
    let (_u, _s, vt) = k0
        .svd(false, true)
        .map_err(|e| TtnError::Tensor(TensorError::EigFailure(e.to_string())))?;
    let vt = vt.expect("requested");
    let mut kraus = vec![k0];
    for j in d_out..n_in {
        // Kernel covector ⟨k| = row j of V†; fix its phase deterministically
        // (largest-magnitude entry rotated positive real).
        let mut row: Vec<C64> = (0..n_in).map(|i| vt[(j, i)]).collect();
        let mut arg = 0usize;
        for (i, z) in row.iter().enumerate() {
            if z.norm() > row[arg].norm() {
                arg = i;
            }
        }
        if row[arg].norm() > 0.0 {
            let phase = row[arg] / row[arg].norm();
            for z in row.iter_mut() {
                *z *= phase.conj();
            }
        }
        let mut k = Array2::<C64>::zeros((d_out + 1, n_in));
        for (i, z) in row.iter().enumerate() {
            k[(d_out, i)] = *z;
        }
        kraus.push(k);
    }
    let channel = CoarseGrainChannel::new(kraus);
    let dev = max_abs(&(&channel.gram() - &eye::<C64>(n_in)).view());
    if dev > 1e-10 {
        return Err(TtnError::NotTracePreserving { deviation: dev });
    }
    Ok(CptpLayer {
        channel,
        out_dim: d_out + 1,
    })
}

/// Compose the first `j` layers into one channel from `2^j` physical sites to
/// a single coarse site: `V_j = W_j ∘ (V_{j-1} ⊗ V_{j-1})`, `V_1` the base
/// layer.
pub fn compose_layers(stack: &TreeStack, j: usize) -> Result<CoarseGrainChannel, TtnError> {
    let n = stack.levels();
    assert!(j >= 1 && j + 2 <= n, "compose_layers expects 1 ≤ j ≤ N−2");
    let d = stack.dims[0];
    let in_dim = d.pow(1 << j as u32);
    if in_dim > MAX_TREE_DIM {
        return Err(TtnError::TooLarge {
            dim: in_dim,
            max: MAX_TREE_DIM,
        });
    }
    let mut v = isometry_to_cptp(&stack.layer_matrix(1), false)?.channel;
    for l in 2..=j {
        let w = isometry_to_cptp(&stack.layer_matrix(l), true)?.channel;
        let mut kraus = Vec::with_capacity(w.kraus.len() * v.kraus.len() * v.kraus.len());
        for kw in &w.kraus {
            for ka in &v.kraus {
                for kb in &v.kraus {
                    let pair = kron(&ka.view(), &kb.view());
                    kraus.push(kw.dot(&pair));
                }
            }
        }
        v = CoarseGrainChannel::new(kraus);
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Variational optimization
// ---------------------------------------------------------------------------

/// Result of a tree ground-state search.
#[derive(Debug, Clone)]
pub struct TreeSearch {
    pub stack: TreeStack,
    /// Per-site energy density of the periodic `2^N`-site chain.
    pub energy: f64,
    /// Whether the sweep-to-sweep energy change stalled below 1e-11.
    pub converged: bool,
    /// Energy after every accepted layer update (non-increasing within
    /// 1e-12 by construction).
    pub history: Vec<f64>,
}

/// Apply a matrix to factor `i` of a tensor-product vector.
fn apply_to_factor(
    v: &Array1<C64>,
    factor_dims: &[usize],
    i: usize,
    m: &Array2<C64>,
) -> Array1<C64> {
    let p = factor_dims[i];
    let q = m.nrows();
    assert_eq!(m.ncols(), p);
    let left: usize = factor_dims[..i].iter().product();
    let right: usize = factor_dims[i + 1..].iter().product();
    let mut out = Array1::<C64>::zeros(left * q * right);
    for lft in 0..left {
        for a in 0..q {
            for r in 0..right {
                let mut acc = C64::new(0.0, 0.0);
                for b in 0..p {
                    acc += m[(a, b)] * v[(lft * p + b) * right + r];
                }
                out[(lft * q + a) * right + r] = acc;
            }
        }
    }
    out
}

/// Contract the stack top-down into the physical statevector, optionally
/// replacing the tensor at one (layer, position) with an override matrix.
fn tree_state(stack: &TreeStack, hole: Option<(usize, usize, &Array2<C64>)>) -> Array1<C64> {
    let n = stack.levels();
    // Top: T_N is 1×c²; the state below it is T_N† as a vector on two
    // factors of dim c.
    let top = match hole {
        Some((l, _p, m)) if l == n => m.clone(),
        _ => stack.layer_matrix(n),
    };
    let c_top = stack.dims[n - 1];
    let mut v = Array1::<C64>::zeros(c_top * c_top);
    for i in 0..c_top * c_top {
        v[i] = top[(0, i)].conj();
    }
    let mut factor_dims = vec![c_top; 2];
    for l in (1..n).rev() {
        let t = stack.layer_matrix(l);
        let td = dagger(&t.view());
        let c = stack.dims[l - 1];
        let positions = factor_dims.len();
        // Walk positions back to front so earlier factor indices stay valid
        // while each factor of dim dims[l] splits into a pair of dim c.
        for p in (0..positions).rev() {
            let m = match hole {
                Some((hl, hp, hm)) if hl == l && hp == p => dagger(&hm.view()),
                _ => td.clone(),
            };
            v = apply_to_factor(&v, &factor_dims, p, &m);
            factor_dims[p] = c * c;
        }
        factor_dims = vec![c; 2 * positions];
    }
    v
}

/// Tree levels for a physical dimension, bond cap, and level count.
fn level_dims(d: usize, d_cap: usize, n: usize) -> Vec<usize> {
    let mut dims = vec![d];
    for l in 1..n {
        let grown = dims[l - 1] * dims[l - 1];
        dims.push(grown.min(d_cap));
    }
    dims.push(1);
    dims
}

/// Energy density of the stack's state on the periodic `2^N`-site chain.
pub fn tree_energy_density(stack: &TreeStack, spec: &HamiltonianSpec) -> Result<f64, TtnError> {
    let n = stack.levels();
    let sites = 1usize << n;
    let psi = tree_state(stack, None);
    let hpsi = ring_apply(&spec.term, spec.d, spec.k, sites, &psi)?;
    let e: C64 = psi.iter().zip(hpsi.iter()).map(|(a, b)| a.conj() * b).sum();
    Ok(e.re / sites as f64)
}

/// Unitary polar factor (closest isometry) of a rectangular matrix.
fn polar_u(m: &Array2<C64>) -> Result<Array2<C64>, TtnError> {
    let (u, _s, vt) = m
        .svd(true, true)
        .map_err(|e| TtnError::Tensor(TensorError::EigFailure(e.to_string())))?;
    let u = u.expect("requested");
    let vt = vt.expect("requested");
    let r = m.nrows().min(m.ncols());
    Ok(u.slice(ndarray::s![.., ..r])
        .to_owned()
        .dot(&vt.slice(ndarray::s![..r, ..]).to_owned()))
}

/// Variational ground-state search over layer-uniform trees on the periodic
/// `2^N`-site chain.
///
/// Layers below the top are improved by linearized environment sweeps with
/// polar-projected candidates, accepted only when the exactly re-evaluated
/// energy does not increase (monotone within 1e-12); the top layer is an
/// exact eigensolve in the coarse basis. Runs a deterministic eigenbasis
/// initialization plus two seeded random restarts and returns the best stack;
/// non-convergence is flagged, never an error.
pub fn optimize_tree(
    spec: &HamiltonianSpec,
    n_levels: usize,
    d_cap: usize,
    seed: u64,
) -> Result<TreeSearch, TtnError> {
    if n_levels < 2 {
        return Err(TtnError::BadLevels(n_levels));
    }
    let sites = 1usize << n_levels;
    let dim = spec
        .d
        .checked_pow(sites as u32)
        .filter(|&x| x <= MAX_TREE_DIM)
        .ok_or(TtnError::TooLarge {
            dim: usize::MAX,
            max: MAX_TREE_DIM,
        })?;
    let _ = dim;
    let dims = level_dims(spec.d, d_cap, n_levels);

    let mut best: Option<TreeSearch> = None;
    for attempt in 0..3u64 {
        let stack = init_stack(spec, &dims, attempt, seed)?;
        let run = sweep_to_convergence(spec, stack, 80)?;
        eprintln!(
            "ttn: {} N={n_levels} D={d_cap} attempt={attempt} e={:.9}{}",
            spec.label(),
            run.energy,
            if run.converged { "" } else { " (not converged)" },
        );
        let better = match &best {
            None => true,
            Some(b) => run.energy < b.energy,
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("attempts ran"))
}

/// Initial stack: attempt 0 seeds the base layer with the lowest eigenvectors
/// of the two-site term and identity embeddings above; later attempts draw
/// seeded random isometries.
fn init_stack(
    spec: &HamiltonianSpec,
    dims: &[usize],
    attempt: u64,
    seed: u64,
) -> Result<TreeStack, TtnError> {
    let n = dims.len() - 1;
    let mut layers = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9)));
    for l in 1..=n {
        let (o, c) = (dims[l], dims[l - 1]);
        let m = if attempt == 0 {
            if l == 1 && spec.k == 2 && o <= spec.d * spec.d {
                // Rows = lowest eigenvectors of the local term.
                let (_vals, vecs) = eigh_all(&spec.term.mat().view())?;
                let mut t = Array2::<C64>::zeros((o, c * c));
                for a in 0..o {
                    for b in 0..c * c {
                        t[(a, b)] = vecs[(b, a)].conj();
                    }
                }
                t
            } else {
                let mut t = Array2::<C64>::zeros((o, c * c));
                for a in 0..o {
                    t[(a, a)] = C64::new(1.0, 0.0);
                }
                t
            }
        } else {
            let mut t = Array2::<C64>::zeros((o, c * c));
            for x in t.iter_mut() {
                *x = C64::new(rng.gen_range(-1.0..1.0), 0.0);
            }
            polar_u(&t)?
        };
        let entries: Vec<C64> = (0..o * c * c).map(|i| m[(i / (c * c), i % (c * c))]).collect();
        layers.push(DenseTensor::new(vec![o, c, c], entries).expect("layer shape"));
    }
    Ok(TreeStack {
        layers,
        dims: dims.to_vec(),
    })
}

fn sweep_to_convergence(
    spec: &HamiltonianSpec,
    mut stack: TreeStack,
    max_sweeps: usize,
) -> Result<TreeSearch, TtnError> {
    let n = stack.levels();
    let sites = 1usize << n;
    // Negative shift so polar directions point downhill: H̃ = H − μI ≺ 0.
    let vals = eigvalsh(&spec.term.mat().view())?;
    let n_windows = if sites == spec.k { 1 } else { sites };
    let mu = vals[vals.len() - 1] * n_windows as f64 + 0.1;

    let mut history = Vec::new();
    let mut e = tree_energy_density(&stack, spec)?;
    let mut converged = false;
    let mut prev_sweep_e = f64::INFINITY;
    let mut stall = 0usize;
    for _sweep in 0..max_sweeps {
        for l in 1..n {
            e = update_layer(spec, &mut stack, l, mu, e)?;
            history.push(e);
        }
        e = update_top(spec, &mut stack, mu)?;
        history.push(e);
        if (prev_sweep_e - e).abs() < 1e-11 {
            stall += 1;
            if stall >= 2 {
                converged = true;
                break;
            }
        } else {
            stall = 0;
        }
        prev_sweep_e = e;
    }
    Ok(TreeSearch {
        stack,
        energy: e,
        converged,
        history,
    })
}

/// Linearized environment update for layer `l` with accept-if-better.
fn update_layer(
    spec: &HamiltonianSpec,
    stack: &mut TreeStack,
    l: usize,
    mu: f64,
    e_cur: f64,
) -> Result<f64, TtnError> {
    let n = stack.levels();
    let sites = 1usize << n;
    let t_cur = stack.layer_matrix(l);
    let (o, c2) = (t_cur.nrows(), t_cur.ncols());

    let psi = tree_state(stack, None);
    let mut phi = ring_apply(&spec.term, spec.d, spec.k, sites, &psi)?;
    for (x, p) in phi.iter_mut().zip(psi.iter()) {
        *x -= *p * C64::new(mu, 0.0);
    }

    // Environment G[α,b] = Σ_positions ⟨φ|ψ(T = e_{αb} at that position)⟩;
    // by linearity  ⟨ψ|H̃|ψ⟩-variations along the layer are 2·Re⟨G, T⟩.
    let positions = 1usize << (n - l);
    let mut g = Array2::<C64>::zeros((o, c2));
    let mut basis = Array2::<C64>::zeros((o, c2));
    for a in 0..o {
        for b in 0..c2 {
            basis[(a, b)] = C64::new(1.0, 0.0);
            for p in 0..positions {
                let psi_ab = tree_state(stack, Some((l, p, &basis)));
                let s: C64 = phi
                    .iter()
                    .zip(psi_ab.iter())
                    .map(|(f, x)| f.conj() * x)
                    .sum();
                g[(a, b)] += s;
            }
            basis[(a, b)] = C64::new(0.0, 0.0);
        }
    }

    // Candidate minimizing the linear model over isometries, then shrinking
    // blends back toward the current tensor until the exact energy agrees.
    let full = polar_u(&g.mapv(|z| -z.conj()))?;
    for tstep in [1.0f64, 0.5, 0.25, 0.1] {
        let blend = &full.mapv(|z| z * C64::new(tstep, 0.0))
            + &t_cur.mapv(|z| z * C64::new(1.0 - tstep, 0.0));
        let cand = polar_u(&blend)?;
        stack.set_layer(l, &cand);
        let e_new = tree_energy_density(stack, spec)?;
        if e_new <= e_cur + 1e-12 {
            return Ok(e_new);
        }
    }
    stack.set_layer(l, &t_cur);
    Ok(e_cur)
}

/// Exact top-layer update: the global composition of the lower layers is an
/// isometry, so the best top vector is the ground eigenvector of the coarse
/// effective Hamiltonian.
fn update_top(
    spec: &HamiltonianSpec,
    stack: &mut TreeStack,
    mu: f64,
) -> Result<f64, TtnError> {
    let n = stack.levels();
    let sites = 1usize << n;
    let c = stack.dims[n - 1];
    let dim_top = c * c;
    // Columns: states generated by top basis vectors.
    let mut cols = Vec::with_capacity(dim_top);
    let mut basis = Array2::<C64>::zeros((1, dim_top));
    for i in 0..dim_top {
        basis[(0, i)] = C64::new(1.0, 0.0);
        cols.push(tree_state(stack, Some((n, 0, &basis))));
        basis[(0, i)] = C64::new(0.0, 0.0);
    }
    let mut m = Array2::<C64>::zeros((dim_top, dim_top));
    for (j, col) in cols.iter().enumerate() {
        let mut hcol = ring_apply(&spec.term, spec.d, spec.k, sites, col)?;
        for (x, p) in hcol.iter_mut().zip(col.iter()) {
            *x -= *p * C64::new(mu, 0.0);
        }
        for (i, row) in cols.iter().enumerate() {
            m[(i, j)] = row.iter().zip(hcol.iter()).map(|(a, b)| a.conj() * b).sum();
        }
    }
    let hm = HermitianMatrix::new(m)?;
    let (_vals, vecs) = eigh_all(&hm.mat().view())?;
    let mut top = Array2::<C64>::zeros((1, dim_top));
    let ground = vecs.column(0);
    let mut arg = 0usize;
    for (i, z) in ground.iter().enumerate() {
        if z.norm() > ground[arg].norm() {
            arg = i;
        }
    }
    let phase = if ground[arg].norm() > 0.0 {
        ground[arg] / ground[arg].norm()
    } else {
        C64::new(1.0, 0.0)
    };
    for i in 0..dim_top {
        // T_N = ⟨t|, so the stored row is the conjugate of the eigenvector.
        top[(0, i)] = (ground[i] * phase.conj()).conj();
    }
    stack.set_layer(n, &top);
    tree_energy_density(stack, spec)
}
