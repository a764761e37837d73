//! Assembly of the three block-SDP families: the exact hierarchy of locally
//! translation-invariant (LTI) marginal problems, its matrix-product
//! compression, and its tree-tensor-network compression.
//!
//! Every builder returns a problem carrying
//! - matrix-free affine rows (verified against their adjoints on random
//!   probes at build time),
//! - an exactly feasible primal point (the push-forward of the maximally
//!   mixed chain state, which doubles as a strong-duality witness and as the
//!   solver's starting iterate), and
//! - the deepest-first multiplier-repair schedule used by dual
//!   certification.

use ndarray::Array2;
use thiserror::Error;

use crate::linops::{
    AffineConstraint, BlockVarSpec, CascadeStep, LinOp, LinOpError, ProblemMeta, ProblemStats,
    Rhs, RowKind, SdpProblem, Term,
};
use crate::models::{averaged_window_term, HamiltonianSpec, ModelError};
use crate::tensor::{dagger, eye, kron, C64, TensorError};
use crate::ttn::{isometry_to_cptp, TreeStack, TtnError};
use crate::umps::{
    build_l, build_r, build_w, frame_for_mps, CoarseGrainChannel, Gauge, UmpsError, UniformMps,
};

/// Largest dense block side length any builder will emit.
pub const MAX_BLOCK_DIM: usize = 1 << 13;

/// Errors from problem assembly.
#[derive(Debug, Error)]
pub enum SdpError {
    #[error("block of side {dim} exceeds the dense limit {max}")]
    TooLarge { dim: usize, max: usize },
    #[error("hierarchy of size {n} needs at least {min} sites")]
    TooSmall { n: usize, min: usize },
    #[error("the matrix-product compression requires a left-gauged tensor")]
    GaugeRequired,
    #[error("interaction spans {k} sites; this builder supports at most {max}")]
    UnsupportedLocality { k: usize, max: usize },
    #[error("tree stack has {found} layers, need at least {need}")]
    MissingLayers { found: usize, need: usize },
    #[error(transparent)]
    LinOp(#[from] LinOpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Umps(#[from] UmpsError),
    #[error(transparent)]
    Ttn(#[from] TtnError),
}

fn finish_problem(p: SdpProblem<C64>) -> Result<SdpProblem<C64>, SdpError> {
    p.check_row_dims()?;
    p.check_adjoints(2, 1e-10, 0xC0FF_EE)?;
    debug_assert!(p.max_row_violation(&p.witness)? <= 1e-10);
    Ok(p)
}

// ---------------------------------------------------------------------------
// Exact LTI hierarchy
// ---------------------------------------------------------------------------

/// Build the exact LTI problem of window size `n`:
/// minimize ⟨h, ρ⁽ᵏ⁾⟩ over chains ρ⁽ᵏ⁾,…,ρ⁽ⁿ⁾ ⪰ 0 with tr ρ⁽ᵏ⁾ = 1 and
/// ρ⁽ᵐ⁻¹⁾ equal to both one-site marginals of ρ⁽ᵐ⁾.
///
/// The optimum is non-decreasing in `n` and lower-bounds the
/// thermodynamic-limit ground energy density.
pub fn build_lti(spec: &HamiltonianSpec, n: usize) -> Result<SdpProblem<C64>, SdpError> {
    let (d, k) = (spec.d, spec.k);
    if n < k {
        return Err(SdpError::TooSmall { n, min: k });
    }
    let top = d
        .checked_pow(n as u32)
        .filter(|&x| x <= MAX_BLOCK_DIM)
        .ok_or(SdpError::TooLarge {
            dim: usize::MAX,
            max: MAX_BLOCK_DIM,
        })?;
    let _ = top;

    let mut vars = Vec::new();
    let mut witness = Vec::new();
    for m in k..=n {
        vars.push(BlockVarSpec::psd(format!("rho_{m}"), vec![d; m]));
        let dim = d.pow(m as u32);
        witness.push(eye::<C64>(dim).mapv(|z| z / C64::new(dim as f64, 0.0)));
    }
    let idx = |m: usize| m - k;

    let mut constraints = Vec::new();
    let mut behavior = Vec::new();
    constraints.push(AffineConstraint {
        label: "trace".into(),
        kind: RowKind::Trace,
        out_dim: 1,
        terms: vec![Term {
            block: idx(k),
            coeff: 1.0,
            op: LinOp::TraceAll,
        }],
        rhs: Rhs::ScalarOne,
    });
    behavior.push(None);
    if n == k {
        // With a single window the shift symmetry must be imposed directly;
        // for n > k it follows from commuting the two marginal rows of the
        // next level.
        constraints.push(AffineConstraint {
            label: "lti_base".into(),
            kind: RowKind::Lti,
            out_dim: d.pow((k - 1) as u32),
            terms: vec![
                Term {
                    block: idx(k),
                    coeff: 1.0,
                    op: LinOp::TraceFirst { k: 1 },
                },
                Term {
                    block: idx(k),
                    coeff: -1.0,
                    op: LinOp::TraceLast { k: 1 },
                },
            ],
            rhs: Rhs::Zero,
        });
        behavior.push(None);
    }
    let mut cascade = Vec::new();
    for m in (k + 1..=n).rev() {
        let out_dim = d.pow((m - 1) as u32);
        cascade.push(CascadeStep {
            block: idx(m),
            row: constraints.len(),
            shift: -1.0,
        });
        constraints.push(AffineConstraint {
            label: format!("marg_first_{m}"),
            kind: RowKind::Marginal,
            out_dim,
            terms: vec![
                Term {
                    block: idx(m),
                    coeff: 1.0,
                    op: LinOp::TraceFirst { k: 1 },
                },
                Term {
                    block: idx(m - 1),
                    coeff: -1.0,
                    op: LinOp::Id,
                },
            ],
            rhs: Rhs::Zero,
        });
        behavior.push(None);
        constraints.push(AffineConstraint {
            label: format!("marg_last_{m}"),
            kind: RowKind::Marginal,
            out_dim,
            terms: vec![
                Term {
                    block: idx(m),
                    coeff: 1.0,
                    op: LinOp::TraceLast { k: 1 },
                },
                Term {
                    block: idx(m - 1),
                    coeff: -1.0,
                    op: LinOp::Id,
                },
            ],
            rhs: Rhs::Zero,
        });
        behavior.push(None);
    }

    finish_problem(SdpProblem {
        vars,
        constraints,
        objective: (idx(k), spec.term.mat().clone()),
        trace_row: 0,
        cascade,
        witness,
        meta: ProblemMeta {
            family: "lti".into(),
            row_channel_behavior: behavior,
        },
    })
}

// ---------------------------------------------------------------------------
// Matrix-product compression
// ---------------------------------------------------------------------------

/// The compressed-window start size: the smallest k₀ with d^(k₀−1) strictly
/// larger than D² (compression below that would grow the problem), floored
/// at the interaction width and capped at n−1 so at least one compressed
/// level exists. In the capped regime the compression is injective and the
/// optimum equals the exact hierarchy's.
pub fn mps_base_window(d: usize, d_bond: usize, k: usize, n: usize) -> usize {
    let dd = d_bond * d_bond;
    let mut rule = 2usize;
    while d.pow((rule - 1) as u32) <= dd {
        rule += 1;
    }
    rule.min(n - 1).max(k)
}

/// Build the matrix-product compression of the LTI problem of size `n`.
///
/// Variables are a base window ρ⁽ᵏ⁰⁾ and one compressed state ω_m of factor
/// shape (d, D², d) per size m = k₀+1..n. The base is tied to ω_{k₀+1} by the
/// window-compression channel, and consecutive ω's by the one-site extension
/// channels, so the optimum lower-bounds the exact value at the same `n`.
///
/// The tensor must be left-gauged: the extension channels are then trace
/// non-increasing, which certification needs for its additivity guarantee.
/// For sublattice-rotated working frames the emitted objective uses the
/// rotated term; the optimum is unchanged because conjugating every other
/// site by the (involutive) rotation maps the feasible chains of the two
/// frames onto each other at equal objective.
pub fn build_mps_relaxation(
    spec: &HamiltonianSpec,
    n: usize,
    mps: &UniformMps,
) -> Result<SdpProblem<C64>, SdpError> {
    if mps.gauge != Gauge::Left {
        return Err(SdpError::GaugeRequired);
    }
    let frame = frame_for_mps(spec, mps)?;
    let d = frame.d_site;
    let dd = mps.d_bond * mps.d_bond;
    if n < 3 {
        return Err(SdpError::TooSmall { n, min: 3 });
    }
    let k0 = mps_base_window(d, mps.d_bond, 2, n);
    let base_dim = d
        .checked_pow(k0 as u32)
        .filter(|&x| x <= MAX_BLOCK_DIM)
        .ok_or(SdpError::TooLarge {
            dim: usize::MAX,
            max: MAX_BLOCK_DIM,
        })?;
    if d * dd * d > MAX_BLOCK_DIM {
        return Err(SdpError::TooLarge {
            dim: d * dd * d,
            max: MAX_BLOCK_DIM,
        });
    }

    let v = build_w(mps, k0 - 1)?;
    let l = build_l(mps)?;
    let r = build_r(mps)?;

    let mut vars = vec![BlockVarSpec::psd(format!("rho_{k0}"), vec![d; k0])];
    let mut witness = vec![eye::<C64>(base_dim).mapv(|z| z / C64::new(base_dim as f64, 0.0))];
    for m in k0 + 1..=n {
        vars.push(BlockVarSpec::psd(format!("omega_{m}"), vec![d, dd, d]));
    }
    let omega = |m: usize| m - k0; // block index of ω_m

    // Push-forward witness: ω_m = (id ⊗ W_{m−2} ⊗ id)(I/d^m). The middle
    // factor W_{m−2}(I) obeys the recursion W_{m+1}(I) = R(W_m(I) ⊗ I),
    // which is the extension law applied to the identity — so the witness
    // satisfies every link row exactly without materializing d^m-dim blocks.
    let mut img = apply_single(&v_first_kraus(&build_w(mps, 1)?), &eye::<C64>(d));
    for _ in 1..k0 - 1 {
        let grown = kron(&img.view(), &eye::<C64>(d).view());
        img = apply_single(&v_first_kraus(&r), &grown);
    }
    for m in k0 + 1..=n {
        if m > k0 + 1 {
            let grown = kron(&img.view(), &eye::<C64>(d).view());
            img = apply_single(&v_first_kraus(&r), &grown);
        }
        let scale = (d as f64).powi(-(m as i32));
        let mid = img.mapv(|z| z * C64::new(scale, 0.0));
        let w = kron(
            &kron(&eye::<C64>(d).view(), &mid.view()).view(),
            &eye::<C64>(d).view(),
        );
        witness.push(w);
    }

    let mut constraints = Vec::new();
    let mut behavior = Vec::new();
    constraints.push(AffineConstraint {
        label: "trace".into(),
        kind: RowKind::Trace,
        out_dim: 1,
        terms: vec![Term {
            block: 0,
            coeff: 1.0,
            op: LinOp::TraceAll,
        }],
        rhs: Rhs::ScalarOne,
    });
    behavior.push(None);
    constraints.push(AffineConstraint {
        label: "lti_base".into(),
        kind: RowKind::Lti,
        out_dim: d.pow((k0 - 1) as u32),
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
    });
    behavior.push(None);

    let mut cascade = Vec::new();
    // Base links: compress all but one edge site of ρ and match the first
    // compressed state's one-site marginals.
    let base_link_right = constraints.len();
    constraints.push(AffineConstraint {
        label: "link_base_right".into(),
        kind: RowKind::Link,
        out_dim: d * dd,
        terms: vec![
            Term {
                block: 0,
                coeff: 1.0,
                op: LinOp::kraus(v.kraus.clone(), 1, k0 - 1),
            },
            Term {
                block: omega(k0 + 1),
                coeff: -1.0,
                op: LinOp::TraceLast { k: 1 },
            },
        ],
        rhs: Rhs::Zero,
    });
    behavior.push(Some(v.trace_behavior));
    constraints.push(AffineConstraint {
        label: "link_base_left".into(),
        kind: RowKind::Link,
        out_dim: dd * d,
        terms: vec![
            Term {
                block: 0,
                coeff: 1.0,
                op: LinOp::kraus(v.kraus.clone(), 0, k0 - 1),
            },
            Term {
                block: omega(k0 + 1),
                coeff: -1.0,
                op: LinOp::TraceFirst { k: 1 },
            },
        ],
        rhs: Rhs::Zero,
    });
    behavior.push(Some(v.trace_behavior));

    let mut level_right_rows = Vec::new();
    for m in k0 + 2..=n {
        level_right_rows.push(constraints.len());
        constraints.push(AffineConstraint {
            label: format!("link_right_{m}"),
            kind: RowKind::Link,
            out_dim: d * dd,
            terms: vec![
                Term {
                    block: omega(m - 1),
                    coeff: 1.0,
                    op: LinOp::kraus(r.kraus.clone(), 1, 2),
                },
                Term {
                    block: omega(m),
                    coeff: -1.0,
                    op: LinOp::TraceLast { k: 1 },
                },
            ],
            rhs: Rhs::Zero,
        });
        behavior.push(Some(r.trace_behavior));
        constraints.push(AffineConstraint {
            label: format!("link_left_{m}"),
            kind: RowKind::Link,
            out_dim: dd * d,
            terms: vec![
                Term {
                    block: omega(m - 1),
                    coeff: 1.0,
                    op: LinOp::kraus(l.kraus.clone(), 0, 2),
                },
                Term {
                    block: omega(m),
                    coeff: -1.0,
                    op: LinOp::TraceFirst { k: 1 },
                },
            ],
            rhs: Rhs::Zero,
        });
        behavior.push(Some(l.trace_behavior));
    }
    // Deepest-first repair schedule. Only the right-family rows are used:
    // their partial-trace side makes the multiplier shift exact on the deep
    // block, and their channel side (W or R, trace non-increasing in left
    // gauge) cannot amplify the propagated deficit. The left-extension
    // channel is generically not contractive and never enters the cascade.
    for i in (0..level_right_rows.len()).rev() {
        cascade.push(CascadeStep {
            block: omega(k0 + 2 + i),
            row: level_right_rows[i],
            shift: 1.0,
        });
    }
    cascade.push(CascadeStep {
        block: omega(k0 + 1),
        row: base_link_right,
        shift: 1.0,
    });

    let objective = averaged_window_term(&frame.term, d, 2, k0)?;
    finish_problem(SdpProblem {
        vars,
        constraints,
        objective: (0, objective.mat().clone()),
        trace_row: 0,
        cascade,
        witness,
        meta: ProblemMeta {
            family: "mps".into(),
            row_channel_behavior: behavior,
        },
    })
}

fn v_first_kraus(c: &CoarseGrainChannel) -> Array2<C64> {
    c.kraus[0].clone()
}

fn apply_single(k: &Array2<C64>, x: &Array2<C64>) -> Array2<C64> {
    k.dot(x).dot(&dagger(&k.view()))
}

// ---------------------------------------------------------------------------
// Tree compression
// ---------------------------------------------------------------------------

/// A built tree relaxation together with the data needed to rebuild it with
/// different channels (used by the coarse-graining map optimizer).
#[derive(Debug, Clone)]
pub struct TtnRelaxation {
    pub problem: SdpProblem<C64>,
    /// Per-level coarse-graining channels W_1..W_{N−2} — single-site-output
    /// factor maps when built from a tree stack, joint pair maps when built
    /// by [`build_ttn_relaxation_from_pair_channels`].
    pub channels: Vec<CoarseGrainChannel>,
    /// Averaged four-site interaction (the objective matrix).
    pub h4: Array2<C64>,
    pub n_levels: usize,
}

/// Build the tree-compressed relaxation of the 2^N-site LTI problem from an
/// optimized tree stack. Layers 1..N−2 are converted to trace-preserving
/// channels (one garbage level each) and handed to
/// [`build_ttn_relaxation_from_channels`].
pub fn build_ttn_relaxation(
    spec: &HamiltonianSpec,
    n_levels: usize,
    stack: &TreeStack,
) -> Result<TtnRelaxation, SdpError> {
    if n_levels < 3 {
        return Err(SdpError::TooSmall {
            n: n_levels,
            min: 3,
        });
    }
    if stack.levels() + 2 < n_levels {
        return Err(SdpError::MissingLayers {
            found: stack.levels(),
            need: n_levels - 2,
        });
    }
    let mut channels = Vec::new();
    for l in 1..=n_levels - 2 {
        let layer = isometry_to_cptp(&stack.layer_matrix(l), l > 1)?;
        channels.push(layer.channel);
    }
    build_ttn_relaxation_from_channels(spec, n_levels, channels)
}

/// Build the tree relaxation from explicit per-level channels.
///
/// Variables: a four-site base ρ⁽⁴⁾ and one state ω_m on four coarse sites
/// per level m = 2..N−1. Rows: normalization, one-site shift symmetry of the
/// base, a coarse-site shift symmetry per level, and the channel linkage
/// (W_m ⊗ W_m)(·) = tr_{last two coarse sites}(ω_{m+1}). Objective: the
/// four-site window average of the interaction.
pub fn build_ttn_relaxation_from_channels(
    spec: &HamiltonianSpec,
    n_levels: usize,
    channels: Vec<CoarseGrainChannel>,
) -> Result<TtnRelaxation, SdpError> {
    let (d, k) = (spec.d, spec.k);
    if k > 4 {
        return Err(SdpError::UnsupportedLocality { k, max: 4 });
    }
    if channels.len() + 2 < n_levels {
        return Err(SdpError::MissingLayers {
            found: channels.len(),
            need: n_levels - 2,
        });
    }
    let h4 = averaged_window_term(&spec.term, d, k, 4)?;

    let mut vars = vec![BlockVarSpec::psd("rho_4", vec![d; 4])];
    let d4 = d.pow(4);
    if d4 > MAX_BLOCK_DIM {
        return Err(SdpError::TooLarge {
            dim: d4,
            max: MAX_BLOCK_DIM,
        });
    }
    let mut witness = vec![eye::<C64>(d4).mapv(|z| z / C64::new(d4 as f64, 0.0))];
    // Per-site push-forward of the maximally mixed pair: q_1 = W_1(I/d²),
    // q_m = W_m(q_{m−1} ⊗ q_{m−1}); all trace one because the channels are
    // trace preserving, so ω_m = q_{m−1}^{⊗4} satisfies every row exactly.
    let mut site_states: Vec<Array2<C64>> = Vec::new();
    for (i, w) in channels.iter().enumerate() {
        let input = if i == 0 {
            eye::<C64>(d * d).mapv(|z| z / C64::new((d * d) as f64, 0.0))
        } else {
            let q = &site_states[i - 1];
            kron(&q.view(), &q.view())
        };
        site_states.push(w.apply(&input));
    }
    let mut coarse_dims = Vec::new();
    for m in 2..=n_levels - 1 {
        let q = &site_states[m - 2];
        let c = q.nrows();
        coarse_dims.push(c);
        let c4 = c.pow(4);
        if c4 > MAX_BLOCK_DIM {
            return Err(SdpError::TooLarge {
                dim: c4,
                max: MAX_BLOCK_DIM,
            });
        }
        vars.push(BlockVarSpec::psd(format!("omega_{m}"), vec![c; 4]));
        let qq = kron(&q.view(), &q.view());
        witness.push(kron(&qq.view(), &qq.view()));
    }
    let omega = |m: usize| m - 1; // block index of ω_m

    let mut constraints = Vec::new();
    let mut behavior = Vec::new();
    constraints.push(AffineConstraint {
        label: "trace".into(),
        kind: RowKind::Trace,
        out_dim: 1,
        terms: vec![Term {
            block: 0,
            coeff: 1.0,
            op: LinOp::TraceAll,
        }],
        rhs: Rhs::ScalarOne,
    });
    behavior.push(None);
    constraints.push(AffineConstraint {
        label: "lti_base".into(),
        kind: RowKind::Lti,
        out_dim: d.pow(3),
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
    });
    behavior.push(None);

    let mut link_rows = Vec::new();
    for m in 1..=n_levels - 2 {
        let w = &channels[m - 1];
        let (deep, cdim) = (omega(m + 1), coarse_dims[m - 1]);
        link_rows.push(constraints.len());
        constraints.push(AffineConstraint {
            label: format!("link_level_{m}"),
            kind: RowKind::Link,
            out_dim: cdim * cdim,
            terms: vec![
                Term {
                    block: if m == 1 { 0 } else { omega(m) },
                    coeff: 1.0,
                    op: LinOp::Compose(vec![
                        LinOp::kraus(w.kraus.clone(), 0, 2),
                        LinOp::kraus(w.kraus.clone(), 1, 2),
                    ]),
                },
                Term {
                    block: deep,
                    coeff: -1.0,
                    op: LinOp::TraceLast { k: 2 },
                },
            ],
            rhs: Rhs::Zero,
        });
        behavior.push(Some(w.trace_behavior));
    }
    for m in 2..=n_levels - 1 {
        let c = coarse_dims[m - 2];
        constraints.push(AffineConstraint {
            label: format!("lti2_omega_{m}"),
            kind: RowKind::Lti,
            out_dim: c.pow(3),
            terms: vec![
                Term {
                    block: omega(m),
                    coeff: 1.0,
                    op: LinOp::TraceFirst { k: 1 },
                },
                Term {
                    block: omega(m),
                    coeff: -1.0,
                    op: LinOp::TraceLast { k: 1 },
                },
            ],
            rhs: Rhs::Zero,
        });
        behavior.push(None);
    }
    let cascade = (1..=n_levels - 2)
        .rev()
        .map(|m| CascadeStep {
            block: omega(m + 1),
            row: link_rows[m - 1],
            shift: 1.0,
        })
        .collect();

    let problem = finish_problem(SdpProblem {
        vars,
        constraints,
        objective: (0, h4.mat().clone()),
        trace_row: 0,
        cascade,
        witness,
        meta: ProblemMeta {
            family: "ttn".into(),
            row_channel_behavior: behavior,
        },
    })?;
    Ok(TtnRelaxation {
        problem,
        channels,
        h4: h4.mat().clone(),
        n_levels,
    })
}

/// Build the tree relaxation from explicit per-level *pair* channels, each
/// acting jointly on all four coarse sites of its level (Kraus operators of
/// shape `c_m² × c_m⁴`) and producing the two coarser sites in one step.
///
/// This is the rebuild path for the coarse-graining map optimizer, whose
/// improved channels are symmetrized two-factor maps ½(w′⊗w″ + w″⊗w′) that
/// do not factor over the two site pairs. The one-coarse-site shift row of
/// each level remains valid for exactly the swap-symmetric maps that
/// optimizer produces; handing in an asymmetric pair map yields a problem
/// whose witness violates that row, which the build-time check rejects.
pub fn build_ttn_relaxation_from_pair_channels(
    spec: &HamiltonianSpec,
    n_levels: usize,
    pair_channels: Vec<CoarseGrainChannel>,
) -> Result<TtnRelaxation, SdpError> {
    let (d, k) = (spec.d, spec.k);
    if k > 4 {
        return Err(SdpError::UnsupportedLocality { k, max: 4 });
    }
    if pair_channels.len() + 2 < n_levels {
        return Err(SdpError::MissingLayers {
            found: pair_channels.len(),
            need: n_levels - 2,
        });
    }
    let h4 = averaged_window_term(&spec.term, d, k, 4)?;

    let mut vars = vec![BlockVarSpec::psd("rho_4", vec![d; 4])];
    let d4 = d.pow(4);
    if d4 > MAX_BLOCK_DIM {
        return Err(SdpError::TooLarge {
            dim: d4,
            max: MAX_BLOCK_DIM,
        });
    }
    let mut witness = vec![eye::<C64>(d4).mapv(|z| z / C64::new(d4 as f64, 0.0))];
    // Two-site push-forward of the maximally mixed base: σ_2 = P_1(I/d⁴),
    // σ_{m+1} = P_m(σ_m ⊗ σ_m). Swap symmetry of each pair map makes the
    // two single-site marginals of every σ agree, so ω_m = σ_m ⊗ σ_m
    // satisfies the shift row as well as the linkage rows.
    let mut pair_states: Vec<Array2<C64>> = Vec::new();
    let mut coarse_dims = Vec::new();
    for (i, p) in pair_channels.iter().enumerate() {
        let input = if i == 0 {
            witness[0].clone()
        } else {
            let s = &pair_states[i - 1];
            kron(&s.view(), &s.view())
        };
        let sigma = p.apply(&input);
        let side = sigma.nrows();
        let c = (side as f64).sqrt().round() as usize;
        debug_assert_eq!(c * c, side, "pair channel output must be a site pair");
        coarse_dims.push(c);
        pair_states.push(sigma);
    }
    for m in 2..=n_levels - 1 {
        let c = coarse_dims[m - 2];
        let c4 = c.pow(4);
        if c4 > MAX_BLOCK_DIM {
            return Err(SdpError::TooLarge {
                dim: c4,
                max: MAX_BLOCK_DIM,
            });
        }
        vars.push(BlockVarSpec::psd(format!("omega_{m}"), vec![c; 4]));
        let s = &pair_states[m - 2];
        witness.push(kron(&s.view(), &s.view()));
    }
    let omega = |m: usize| m - 1;

    let mut constraints = Vec::new();
    let mut behavior = Vec::new();
    constraints.push(AffineConstraint {
        label: "trace".into(),
        kind: RowKind::Trace,
        out_dim: 1,
        terms: vec![Term {
            block: 0,
            coeff: 1.0,
            op: LinOp::TraceAll,
        }],
        rhs: Rhs::ScalarOne,
    });
    behavior.push(None);
    constraints.push(AffineConstraint {
        label: "lti_base".into(),
        kind: RowKind::Lti,
        out_dim: d.pow(3),
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
    });
    behavior.push(None);

    let mut link_rows = Vec::new();
    for m in 1..=n_levels - 2 {
        let p = &pair_channels[m - 1];
        let (deep, cdim) = (omega(m + 1), coarse_dims[m - 1]);
        link_rows.push(constraints.len());
        constraints.push(AffineConstraint {
            label: format!("link_level_{m}"),
            kind: RowKind::Link,
            out_dim: cdim * cdim,
            terms: vec![
                Term {
                    block: if m == 1 { 0 } else { omega(m) },
                    coeff: 1.0,
                    op: LinOp::kraus(p.kraus.clone(), 0, 4),
                },
                Term {
                    block: deep,
                    coeff: -1.0,
                    op: LinOp::TraceLast { k: 2 },
                },
            ],
            rhs: Rhs::Zero,
        });
        behavior.push(Some(p.trace_behavior));
    }
    for m in 2..=n_levels - 1 {
        let c = coarse_dims[m - 2];
        constraints.push(AffineConstraint {
            label: format!("lti2_omega_{m}"),
            kind: RowKind::Lti,
            out_dim: c.pow(3),
            terms: vec![
                Term {
                    block: omega(m),
                    coeff: 1.0,
                    op: LinOp::TraceFirst { k: 1 },
                },
                Term {
                    block: omega(m),
                    coeff: -1.0,
                    op: LinOp::TraceLast { k: 1 },
                },
            ],
            rhs: Rhs::Zero,
        });
        behavior.push(None);
    }
    let cascade = (1..=n_levels - 2)
        .rev()
        .map(|m| CascadeStep {
            block: omega(m + 1),
            row: link_rows[m - 1],
            shift: 1.0,
        })
        .collect();

    let problem = finish_problem(SdpProblem {
        vars,
        constraints,
        objective: (0, h4.mat().clone()),
        trace_row: 0,
        cascade,
        witness,
        meta: ProblemMeta {
            family: "ttn".into(),
            row_channel_behavior: behavior,
        },
    })?;
    Ok(TtnRelaxation {
        problem,
        channels: pair_channels,
        h4: h4.mat().clone(),
        n_levels,
    })
}

// ---------------------------------------------------------------------------
// Two-site-shift LTI baseline
// ---------------------------------------------------------------------------

/// The eight-site shift-by-two LTI relaxation: a four-site base tied to an
/// eight-site state that is locally invariant under translation by two
/// sites. This is the exact problem the tree relaxation reproduces when its
/// first layer is unitary, and serves as that acceptance baseline.
///
/// The two-site shift row makes all three aligned four-site marginals of the
/// eight-site state coincide, so a single end-marginal row suffices.
pub fn build_shift2_lti(spec: &HamiltonianSpec) -> Result<SdpProblem<C64>, SdpError> {
    let (d, k) = (spec.d, spec.k);
    if k > 4 {
        return Err(SdpError::UnsupportedLocality { k, max: 4 });
    }
    let d8 = d
        .checked_pow(8)
        .filter(|&x| x <= MAX_BLOCK_DIM)
        .ok_or(SdpError::TooLarge {
            dim: usize::MAX,
            max: MAX_BLOCK_DIM,
        })?;
    let d4 = d.pow(4);
    let h4 = averaged_window_term(&spec.term, d, k, 4)?;

    let vars = vec![
        BlockVarSpec::psd("rho_4", vec![d; 4]),
        BlockVarSpec::psd("sigma_8", vec![d; 8]),
    ];
    let witness = vec![
        eye::<C64>(d4).mapv(|z| z / C64::new(d4 as f64, 0.0)),
        eye::<C64>(d8).mapv(|z| z / C64::new(d8 as f64, 0.0)),
    ];
    let constraints = vec![
        AffineConstraint {
            label: "trace".into(),
            kind: RowKind::Trace,
            out_dim: 1,
            terms: vec![Term {
                block: 0,
                coeff: 1.0,
                op: LinOp::TraceAll,
            }],
            rhs: Rhs::ScalarOne,
        },
        AffineConstraint {
            label: "lti_base".into(),
            kind: RowKind::Lti,
            out_dim: d.pow(3),
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
        },
        AffineConstraint {
            label: "marg_base".into(),
            kind: RowKind::Marginal,
            out_dim: d4,
            terms: vec![
                Term {
                    block: 1,
                    coeff: 1.0,
                    op: LinOp::TraceLast { k: 4 },
                },
                Term {
                    block: 0,
                    coeff: -1.0,
                    op: LinOp::Id,
                },
            ],
            rhs: Rhs::Zero,
        },
        AffineConstraint {
            label: "lti2_sigma".into(),
            kind: RowKind::Lti,
            out_dim: d.pow(6),
            terms: vec![
                Term {
                    block: 1,
                    coeff: 1.0,
                    op: LinOp::TraceFirst { k: 2 },
                },
                Term {
                    block: 1,
                    coeff: -1.0,
                    op: LinOp::TraceLast { k: 2 },
                },
            ],
            rhs: Rhs::Zero,
        },
    ];
    let behavior = vec![None, None, None, None];
    let cascade = vec![CascadeStep {
        block: 1,
        row: 2,
        shift: -1.0,
    }];
    finish_problem(SdpProblem {
        vars,
        constraints,
        objective: (0, h4.mat().clone()),
        trace_row: 0,
        cascade,
        witness,
        meta: ProblemMeta {
            family: "shift2-lti".into(),
            row_channel_behavior: behavior,
        },
    })
}

/// Size summary (block count, scalar variables, constraint rows).
pub fn problem_stats<T: crate::tensor::Element>(p: &SdpProblem<T>) -> ProblemStats {
    p.stats()
}
