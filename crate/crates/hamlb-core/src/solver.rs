//! First-order conic solver for the block problems emitted by the builders:
//! minimize ⟨C, X⟩ over block-diagonal X with A(X) = b and each block either
//! positive semidefinite or free.
//!
//! The method is an operator-splitting scheme — ADMM on the consensus form
//! X = Z, run in its Douglas–Rachford form on the single combined point
//! w = Z + U: the cone step projects each block of w onto PSD/free by full
//! eigendecomposition, the affine step projects the reflected point through
//! a conjugate-gradient solve of the row-space normal equations, and the
//! scaled accumulator U = w − Z yields the equality multipliers `y` and the
//! dual slack `S = C − A†(y) = −ρU` on convergence. Free blocks keep a zero
//! accumulator, so their slack vanishes identically. Because the sweep is a
//! single fixed-point map w ↦ T(w), a safeguarded Anderson window
//! extrapolates it — this is what rescues the tail on problems whose
//! solution sits on a degenerate face, where plain splitting creeps.
//!
//! Row equilibration (one scale per row, estimated by power iteration on
//! A_r A_r†) and penalty adaptation keep the iteration well conditioned; the
//! normal system is solved matrix-free and may be singular when marginal
//! rows overlap — conjugate gradients on the consistent system is unaffected,
//! and the recovered multiplier's null-space component never reaches either
//! `A†(y)` or `⟨b, y⟩`.

use std::io::Write as _;
use std::path::PathBuf;

use ndarray::{Array2, Zip};
use thiserror::Error;

use crate::linops::{Cone, LinOpError, SdpProblem};
use crate::tensor::{dagger, eigh_all, fro_norm, hs_inner, min_eigenvalue, Element, TensorError};

/// Relaxation factor of the consensus update.
const ALPHA: f64 = 1.6;
/// Window size of the Anderson extrapolation on the Douglas–Rachford point.
const AA_MEMORY: usize = 10;
/// Plain sweeps to run before extrapolation engages.
const AA_BURN_IN: usize = 20;
/// Tikhonov scale, relative to the largest Gram diagonal, of the window's
/// difference least squares.
const AA_REGULARIZATION: f64 = 1e-9;
/// Penalty bounds and adaptation cadence.
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const ADAPT_EVERY: usize = 100;
/// Divergence heuristic: give up when the combined residual has not improved
/// for this many iterations while sitting far above its best.
const STALL_WINDOW: usize = 10_000;

/// Errors from the conic solver.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("problem has {scalars} scalar variables, dense-small limit is {max}")]
    TooLarge { scalars: usize, max: usize },
    #[error("starting point has {found} blocks, problem has {expect}")]
    BadStart { found: usize, expect: usize },
    #[error(transparent)]
    LinOp(#[from] LinOpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("trace file: {0}")]
    Io(#[from] std::io::Error),
}

/// Termination state of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum SolveStatus {
    /// All three relative residuals reached the requested tolerance.
    Optimal,
    /// Iteration budget exhausted; the returned point is the last iterate.
    MaxIters,
    /// Residuals stopped improving and sat far above their best value.
    Diverging,
}

/// From-scratch quality measures of a primal/dual pair.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct Residuals {
    /// ‖A(X) − b‖_F / (1 + ‖b‖_F).
    pub primal: f64,
    /// Cone infeasibility of the dual slack C − A†(y): the worst negative
    /// eigenvalue over PSD blocks and Frobenius norm over free blocks,
    /// relative to 1 + ‖C‖_F.
    pub dual: f64,
    /// |⟨C, X⟩ − ⟨b, y⟩| / (1 + |⟨C, X⟩| + |⟨b, y⟩|).
    pub gap: f64,
    pub objective: f64,
    pub dual_objective: f64,
}

/// Primal/dual output of a solve.
#[derive(Debug, Clone)]
pub struct ConicSolution<T: Element> {
    /// Cone-feasible primal blocks (the consensus iterate Z).
    pub primal_blocks: Vec<Array2<T>>,
    /// One Hermitian multiplier per affine row, in the problem's row scaling.
    pub row_duals: Vec<Array2<T>>,
    pub residuals: Residuals,
    pub status: SolveStatus,
    pub iterations: usize,
}

/// Solver knobs. `eps` bounds all three relative residuals at termination.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub eps: f64,
    pub max_iters: usize,
    pub rho0: f64,
    /// Residual evaluation cadence (iterations).
    pub check_every: usize,
    /// Optional CSV convergence trace (iter, rho, primal, dual, gap, objective).
    pub trace: Option<PathBuf>,
    pub verbose: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            eps: 1e-8,
            max_iters: 200_000,
            rho0: 1.0,
            check_every: 25,
            trace: None,
            verbose: false,
        }
    }
}

/// Solve from the problem's built-in feasible witness.
pub fn solve<T: Element>(
    p: &SdpProblem<T>,
    opts: &SolveOptions,
) -> Result<ConicSolution<T>, SolverError> {
    let start = p.witness.clone();
    solve_from(p, start, opts)
}

/// Solve with every tolerance tightened for small problems where runtime is
/// irrelevant but the answer feeds further algebra.
pub fn solve_dense_small<T: Element>(p: &SdpProblem<T>) -> Result<ConicSolution<T>, SolverError> {
    const MAX_SCALARS: usize = 200_000;
    let scalars = p.scalar_count();
    if scalars > MAX_SCALARS {
        return Err(SolverError::TooLarge {
            scalars,
            max: MAX_SCALARS,
        });
    }
    let opts = SolveOptions {
        eps: 1e-10,
        max_iters: 500_000,
        ..SolveOptions::default()
    };
    solve(p, &opts)
}

/// Solve a complex-data problem on the cheapest faithful path: if every
/// matrix entry is real the whole iteration runs in real symmetric
/// arithmetic (identical algebra, markedly faster eigendecompositions) and
/// the solution is lifted back; otherwise the complex Hermitian problem is
/// solved directly.
pub fn solve_auto(
    p: &SdpProblem<crate::tensor::C64>,
    opts: &SolveOptions,
) -> Result<ConicSolution<crate::tensor::C64>, SolverError> {
    if let Some(rp) = p.realify() {
        if opts.verbose {
            eprintln!("solver: real symmetric path");
        }
        let sol = solve(&rp, opts)?;
        Ok(ConicSolution {
            primal_blocks: sol
                .primal_blocks
                .into_iter()
                .map(|b| b.mapv(|x| x.to_c64()))
                .collect(),
            row_duals: sol
                .row_duals
                .into_iter()
                .map(|y| y.mapv(|x| x.to_c64()))
                .collect(),
            residuals: sol.residuals,
            status: sol.status,
            iterations: sol.iterations,
        })
    } else {
        if opts.verbose {
            eprintln!("solver: complex Hermitian path");
        }
        solve(p, opts)
    }
}

/// Recompute the honest residuals of a primal/dual pair: row violations from
/// a fresh forward pass, dual cone deficit from the eigenvalues of
/// C − A†(y), and the duality gap from both objectives.
pub fn residuals<T: Element>(
    p: &SdpProblem<T>,
    blocks: &[Array2<T>],
    row_duals: &[Array2<T>],
) -> Result<Residuals, SolverError> {
    let mut viol2 = 0.0;
    let mut b_norm2 = 0.0;
    for row in &p.constraints {
        let img = row.apply(blocks, &p.vars)?;
        let rhs = row.rhs_matrix();
        let diff = &img - &rhs;
        viol2 += fro_norm(&diff.view()).powi(2);
        b_norm2 += fro_norm(&rhs.view()).powi(2);
    }
    let primal = viol2.sqrt() / (1.0 + b_norm2.sqrt());

    let slacks = dual_slacks(p, row_duals)?;
    let c_norm = fro_norm(&p.objective.1.view());
    let mut deficit: f64 = 0.0;
    for (b, s) in slacks.iter().enumerate() {
        match p.vars[b].cone {
            Cone::Psd => deficit = deficit.max(-min_eigenvalue(&s.view())?),
            Cone::Free => deficit = deficit.max(fro_norm(&s.view())),
        }
    }
    let dual = deficit.max(0.0) / (1.0 + c_norm);

    let objective = p.objective_value(blocks);
    let dual_objective = dual_objective(p, row_duals);
    let gap =
        (objective - dual_objective).abs() / (1.0 + objective.abs() + dual_objective.abs());
    Ok(Residuals {
        primal,
        dual,
        gap,
        objective,
        dual_objective,
    })
}

/// Dual slack per block: S_b = C_b − Σ_r Σ_{terms on b} coeff · T†(y_r).
pub fn dual_slacks<T: Element>(
    p: &SdpProblem<T>,
    row_duals: &[Array2<T>],
) -> Result<Vec<Array2<T>>, SolverError> {
    let mut slacks: Vec<Array2<T>> = p
        .vars
        .iter()
        .map(|v| Array2::zeros((v.dim, v.dim)))
        .collect();
    slacks[p.objective.0] = p.objective.1.clone();
    for (r, row) in p.constraints.iter().enumerate() {
        for t in &row.terms {
            let back = t
                .op
                .apply_adjoint(&row_duals[r].view(), &p.vars[t.block].factor_list)?;
            slacks[t.block].zip_mut_with(&back, |s, v| *s -= *v * T::from_real(t.coeff));
        }
    }
    // Numerical hygiene: the slack of Hermitian data under Hermitian
    // multipliers is Hermitian; fold in any roundoff asymmetry.
    for s in &mut slacks {
        let h = dagger(&s.view());
        s.zip_mut_with(&h, |a, b| *a = (*a + *b) * T::from_real(0.5));
    }
    Ok(slacks)
}

/// ⟨b, y⟩ — the certified objective of the multipliers.
pub fn dual_objective<T: Element>(p: &SdpProblem<T>, row_duals: &[Array2<T>]) -> f64 {
    p.constraints
        .iter()
        .zip(row_duals)
        .map(|(row, y)| hs_inner(&row.rhs_matrix().view(), &y.view()))
        .sum()
}

/// Solve from an explicit starting point (block values only; accumulators
/// start at zero).
pub fn solve_from<T: Element>(
    p: &SdpProblem<T>,
    start: Vec<Array2<T>>,
    opts: &SolveOptions,
) -> Result<ConicSolution<T>, SolverError> {
    if start.len() != p.vars.len() {
        return Err(SolverError::BadStart {
            found: start.len(),
            expect: p.vars.len(),
        });
    }
    let rhs_mats: Vec<Array2<T>> = p.constraints.iter().map(|r| r.rhs_matrix()).collect();
    let scales = row_scales(p)?;
    let b_norm = rhs_mats
        .iter()
        .map(|m| fro_norm(&m.view()).powi(2))
        .sum::<f64>()
        .sqrt();

    let mut trace_file = match &opts.trace {
        Some(path) => {
            let mut f = std::fs::File::create(path)?;
            writeln!(f, "iter,rho,primal,dual,gap,objective")?;
            Some(f)
        }
        None => None,
    };

    // Douglas–Rachford consensus state: w = Z + U, where Z = Π_cone(w) is
    // the cone-feasible iterate and U = w − Z the scaled accumulator.
    // Folding the pair into one point makes the sweep a single fixed-point
    // map w ↦ T(w), the form the Anderson window extrapolates.
    let mut w = start;
    let mut z: Vec<Array2<T>> = w.clone();
    let mut mu: Vec<Array2<T>> = p
        .constraints
        .iter()
        .map(|r| Array2::zeros((r.out_dim, r.out_dim)))
        .collect();
    let mut rho = opts.rho0;
    let mut aa = Anderson::new(AA_MEMORY);
    let mut f_prev = f64::INFINITY;

    // Work in a tightening loop: stop on the cheap in-loop residual trio,
    // verify with the honest from-scratch measures, and keep iterating with
    // a tighter inner target if verification fails.
    let mut inner_eps = opts.eps;
    let mut iter = 0usize;
    let mut best_combined = f64::INFINITY;
    let mut best_iter = 0usize;
    let mut bad_checks = 0usize;
    let mut adapt_lean: i32 = 0;
    let mut last_adapt = 0usize;
    let mut status = SolveStatus::MaxIters;

    'outer: while iter < opts.max_iters {
        iter += 1;

        // Z-update: project the consensus point onto the cones.
        for (zb, (wb, v)) in z.iter_mut().zip(w.iter().zip(&p.vars)) {
            *zb = match v.cone {
                Cone::Psd => project_psd(wb)?,
                Cone::Free => wb.clone(),
            };
        }

        // X-update: project the reflection 2Z − w, shifted by −C/ρ, onto
        // the affine rows.
        let mut g: Vec<Array2<T>> = z
            .iter()
            .zip(&w)
            .map(|(zb, wb)| {
                let mut m = zb.mapv(|v| v * T::from_real(2.0));
                m.zip_mut_with(wb, |a, b| *a -= *b);
                m
            })
            .collect();
        let inv_rho = T::from_real(-1.0 / rho);
        g[p.objective.0].zip_mut_with(&p.objective.1, |gb, c| *gb += *c * inv_rho);

        let mut cg_rhs = forward_scaled(p, &g, &scales)?;
        for (r, m) in cg_rhs.iter_mut().enumerate() {
            let scaled_rhs = rhs_mats[r].mapv(|x| x * T::from_real(scales[r]));
            m.zip_mut_with(&scaled_rhs, |a, b| *a = *b - *a);
        }
        // The projection must be solved more exactly than the residual level
        // we are trying to reach, or its error becomes the convergence
        // floor; the last fixed-point residual is the natural yardstick.
        let cg_tol = (1e-2 * f_prev).clamp(1e-14, 1e-10);
        cg_normal(p, &scales, &cg_rhs, &mut mu, cg_tol, 500)?;
        let correction = adjoint_scaled(p, &mu, &scales)?;
        let x: Vec<Array2<T>> = g
            .iter()
            .zip(&correction)
            .map(|(gb, cb)| gb + cb)
            .collect();

        // Residual of the relaxed fixed-point step w ← w + α(X − Z).
        let f: Vec<Array2<T>> = x
            .iter()
            .zip(&z)
            .map(|(xb, zb)| {
                let mut m = xb - zb;
                m.mapv_inplace(|v| v * T::from_real(ALPHA));
                m
            })
            .collect();
        let f_norm = norm_vecs(&f);

        if iter % opts.check_every == 0 {
            let (primal, dual_proxy, gap, objective) =
                cheap_residuals(p, &z, &x, rho, &mu, &scales, b_norm, &rhs_mats)?;
            let combined = primal.max(dual_proxy).max(gap);
            if combined < best_combined {
                best_combined = combined;
                best_iter = iter;
            }
            if combined > 10.0 * best_combined {
                bad_checks += 1;
            } else {
                bad_checks = 0;
            }
            if let Some(tf) = trace_file.as_mut() {
                writeln!(
                    tf,
                    "{iter},{rho:.3e},{primal:.6e},{dual_proxy:.6e},{gap:.6e},{objective:.12e}"
                )?;
            }
            if opts.verbose && iter % (opts.check_every * 40) == 0 {
                eprintln!(
                    "solver: iter={iter} rho={rho:.2e} primal={primal:.2e} dual={dual_proxy:.2e} gap={gap:.2e} e={objective:.9} f={f_norm:.2e} aa={}/{}",
                    aa.accepted, aa.rejected
                );
            }

            if primal <= inner_eps && dual_proxy <= inner_eps && gap <= inner_eps {
                let y = unscaled_duals(&mu, &scales, rho);
                let honest = residuals(p, &z, &y)?;
                if honest.primal <= opts.eps && honest.dual <= opts.eps && honest.gap <= opts.eps
                {
                    status = SolveStatus::Optimal;
                    break 'outer;
                }
                inner_eps *= 0.25;
            }
            // Genuine divergence shows as a *persistent* regression; a single
            // spike (e.g. the transient right after a penalty change) must
            // not trip this.
            if iter - best_iter >= STALL_WINDOW
                && bad_checks * opts.check_every >= STALL_WINDOW / 2
            {
                status = SolveStatus::Diverging;
                break 'outer;
            }

            // Penalty adaptation, fed by the fresh residual pair. A change is
            // made only when the imbalance direction has persisted across
            // consecutive checks and the previous change has had time to wash
            // out, which prevents bump/transient/bump-back limit cycles. The
            // accumulator part of w carries a 1/ρ scale, so w is rebuilt
            // around the unchanged Z, and the accelerator window — tied to
            // the old map — is dropped.
            let lean = if primal > 10.0 * dual_proxy {
                1
            } else if dual_proxy > 10.0 * primal {
                -1
            } else {
                0
            };
            adapt_lean = if lean != 0 && lean == adapt_lean.signum() {
                adapt_lean + lean
            } else {
                lean
            };
            if iter >= last_adapt + 5 * ADAPT_EVERY && adapt_lean.unsigned_abs() >= 4 {
                let factor = if adapt_lean > 0 { 2.0 } else { 0.5 };
                let next = (rho * factor).clamp(RHO_MIN, RHO_MAX);
                last_adapt = iter;
                adapt_lean = 0;
                if next != rho {
                    let ratio = T::from_real(rho / next);
                    for (wb, zb) in w.iter_mut().zip(&z) {
                        wb.zip_mut_with(zb, |a, b| *a = *b + (*a - *b) * ratio);
                    }
                    for m in &mut mu {
                        m.mapv_inplace(|v| v * ratio);
                    }
                    rho = next;
                    aa.reset();
                    f_prev = f64::INFINITY;
                    // The step prepared above mixes penalties; open the next
                    // sweep cleanly from the rescaled point.
                    continue 'outer;
                }
            }
        }

        let plain: Vec<Array2<T>> = w.iter().zip(&f).map(|(wb, fb)| wb + fb).collect();
        w = aa.next(plain, f, f_norm, iter >= AA_BURN_IN);
        f_prev = f_norm;
    }

    let row_duals = unscaled_duals(&mu, &scales, rho);
    let final_res = residuals(p, &z, &row_duals)?;
    if status == SolveStatus::Optimal
        && !(final_res.primal <= opts.eps && final_res.dual <= opts.eps && final_res.gap <= opts.eps)
    {
        status = SolveStatus::MaxIters;
    }
    if opts.verbose {
        eprintln!(
            "solver: {status:?} after {iter} iters e={:.9} (primal={:.2e} dual={:.2e} gap={:.2e})",
            final_res.objective, final_res.primal, final_res.dual, final_res.gap
        );
    }
    Ok(ConicSolution {
        primal_blocks: z,
        row_duals,
        residuals: final_res,
        status,
        iterations: iter,
    })
}

fn unscaled_duals<T: Element>(mu: &[Array2<T>], scales: &[f64], rho: f64) -> Vec<Array2<T>> {
    mu.iter()
        .zip(scales)
        .map(|(m, s)| m.mapv(|v| v * T::from_real(rho * s)))
        .collect()
}

/// In-loop residual trio: honest primal violation, the standard consensus
/// dual proxy ρ‖X − Z‖ (at the current iterate X equals Z up to the cone
/// projection step, so this tracks stationarity), and the duality gap.
#[allow(clippy::too_many_arguments)]
fn cheap_residuals<T: Element>(
    p: &SdpProblem<T>,
    z: &[Array2<T>],
    x: &[Array2<T>],
    rho: f64,
    mu: &[Array2<T>],
    scales: &[f64],
    b_norm: f64,
    rhs_mats: &[Array2<T>],
) -> Result<(f64, f64, f64, f64), SolverError> {
    let mut viol2 = 0.0;
    for (r, row) in p.constraints.iter().enumerate() {
        let img = row.apply(z, &p.vars)?;
        let diff = &img - &rhs_mats[r];
        viol2 += fro_norm(&diff.view()).powi(2);
    }
    let primal = viol2.sqrt() / (1.0 + b_norm);

    let mut dz2 = 0.0;
    let mut z2 = 0.0;
    for (xb, zb) in x.iter().zip(z) {
        let diff = xb - zb;
        dz2 += fro_norm(&diff.view()).powi(2);
        z2 += fro_norm(&zb.view()).powi(2);
    }
    let dual = rho * dz2.sqrt() / (1.0 + z2.sqrt());

    let objective = p.objective_value(z);
    let y = unscaled_duals(mu, scales, rho);
    let dual_obj = dual_objective(p, &y);
    let gap = (objective - dual_obj).abs() / (1.0 + objective.abs() + dual_obj.abs());
    Ok((primal, dual, gap, objective))
}

/// One scale per row, 1/‖A_r‖, with the operator norm estimated by a short
/// power iteration on A_r A_r†.
fn row_scales<T: Element>(p: &SdpProblem<T>) -> Result<Vec<f64>, SolverError> {
    let mut scales = Vec::with_capacity(p.constraints.len());
    for row in &p.constraints {
        let mut probe = Array2::<T>::zeros((row.out_dim, row.out_dim));
        // Deterministic full-support Hermitian seed.
        for i in 0..row.out_dim {
            for j in 0..row.out_dim {
                let v = 1.0 + ((i * 31 + j * 17) % 23) as f64 / 23.0;
                probe[(i, j)] = T::from_real(v);
            }
        }
        let h = dagger(&probe.view());
        probe.zip_mut_with(&h, |a, b| *a = (*a + *b) * T::from_real(0.5));
        let mut norm2 = 1.0;
        for _ in 0..20 {
            let nrm = fro_norm(&probe.view()).max(1e-300);
            probe.mapv_inplace(|v| v * T::from_real(1.0 / nrm));
            // A_r A_r† against the single row r.
            let mut back: Vec<Array2<T>> = p
                .vars
                .iter()
                .map(|v| Array2::zeros((v.dim, v.dim)))
                .collect();
            for t in &row.terms {
                let img = t
                    .op
                    .apply_adjoint(&probe.view(), &p.vars[t.block].factor_list)?;
                back[t.block].zip_mut_with(&img, |a, b| *a += *b * T::from_real(t.coeff));
            }
            let fwd = row.apply(&back, &p.vars)?;
            norm2 = hs_inner(&probe.view(), &fwd.view()).max(0.0);
            probe = fwd;
        }
        let op_norm = norm2.sqrt().max(1e-8);
        scales.push(1.0 / op_norm);
    }
    Ok(scales)
}

/// Scaled forward map: (s_r · A_r(blocks))_r.
fn forward_scaled<T: Element>(
    p: &SdpProblem<T>,
    blocks: &[Array2<T>],
    scales: &[f64],
) -> Result<Vec<Array2<T>>, SolverError> {
    let mut out = Vec::with_capacity(p.constraints.len());
    for (r, row) in p.constraints.iter().enumerate() {
        let mut img = row.apply(blocks, &p.vars)?;
        img.mapv_inplace(|v| v * T::from_real(scales[r]));
        out.push(img);
    }
    Ok(out)
}

/// Scaled adjoint map: Σ_r s_r · A_r†(μ_r), assembled per block.
fn adjoint_scaled<T: Element>(
    p: &SdpProblem<T>,
    mu: &[Array2<T>],
    scales: &[f64],
) -> Result<Vec<Array2<T>>, SolverError> {
    let mut out: Vec<Array2<T>> = p
        .vars
        .iter()
        .map(|v| Array2::zeros((v.dim, v.dim)))
        .collect();
    for (r, row) in p.constraints.iter().enumerate() {
        for t in &row.terms {
            let img = t
                .op
                .apply_adjoint(&mu[r].view(), &p.vars[t.block].factor_list)?;
            out[t.block].zip_mut_with(&img, |a, b| *a += *b * T::from_real(scales[r] * t.coeff));
        }
    }
    Ok(out)
}

/// Warm-started conjugate gradients on the row-space normal equations
/// (ÃÃ†)μ = rhs. The operator is positive semidefinite; redundant rows make
/// it singular but the system stays consistent, which CG tolerates.
fn cg_normal<T: Element>(
    p: &SdpProblem<T>,
    scales: &[f64],
    rhs: &[Array2<T>],
    mu: &mut [Array2<T>],
    tol_rel: f64,
    max_iter: usize,
) -> Result<(), SolverError> {
    let norm = |v: &[Array2<T>]| -> f64 {
        v.iter()
            .map(|m| fro_norm(&m.view()).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let inner = |a: &[Array2<T>], b: &[Array2<T>]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| hs_inner(&x.view(), &y.view()))
            .sum()
    };
    let apply = |v: &[Array2<T>]| -> Result<Vec<Array2<T>>, SolverError> {
        let back = adjoint_scaled(p, v, scales)?;
        forward_scaled(p, &back, scales)
    };

    let rhs_norm = norm(rhs).max(1e-300);
    let tol = tol_rel * rhs_norm;
    let amu = apply(mu)?;
    let mut r: Vec<Array2<T>> = rhs.iter().zip(&amu).map(|(b, a)| b - a).collect();
    if norm(&r) <= tol {
        return Ok(());
    }
    let mut d = r.clone();
    let mut r2 = inner(&r, &r);
    for _ in 0..max_iter {
        let ad = apply(&d)?;
        let dad = inner(&d, &ad);
        if dad <= 0.0 {
            break;
        }
        let alpha = r2 / dad;
        for (m, db) in mu.iter_mut().zip(&d) {
            m.zip_mut_with(db, |a, b| *a += *b * T::from_real(alpha));
        }
        for (rb, adb) in r.iter_mut().zip(&ad) {
            rb.zip_mut_with(adb, |a, b| *a -= *b * T::from_real(alpha));
        }
        let r2_new = inner(&r, &r);
        if r2_new.sqrt() <= tol {
            break;
        }
        let beta = r2_new / r2;
        for (db, rb) in d.iter_mut().zip(&r) {
            db.zip_mut_with(rb, |a, b| *a = *b + *a * T::from_real(beta));
        }
        r2 = r2_new;
    }
    Ok(())
}

/// Projection onto the PSD cone by full eigendecomposition (the input is
/// Hermitized first; accumulator updates only drift by roundoff).
fn project_psd<T: Element>(m: &Array2<T>) -> Result<Array2<T>, SolverError> {
    let mut h = m.clone();
    let hd = dagger(&m.view());
    h.zip_mut_with(&hd, |a, b| *a = (*a + *b) * T::from_real(0.5));
    let (vals, vecs) = eigh_all(&h.view())?;
    let mut w = vecs.clone();
    for (j, lam) in vals.iter().enumerate() {
        let lp = lam.max(0.0);
        w.column_mut(j).mapv_inplace(|v| v * T::from_real(lp));
    }
    Ok(w.dot(&dagger(&vecs.view())))
}

fn norm_vecs<T: Element>(v: &[Array2<T>]) -> f64 {
    v.iter()
        .map(|m| fro_norm(&m.view()).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn inner_vecs<T: Element>(a: &[Array2<T>], b: &[Array2<T>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| hs_inner(&x.view(), &y.view()))
        .sum()
}

/// Safeguarded Anderson extrapolation (type II) of a fixed-point map
/// w ↦ T(w).
///
/// The window holds the visited pairs (T(wᵢ), F(wᵢ)), F = T − id, and each
/// sweep proposes the affine combination of the T-values whose combined
/// residual is least-squares smallest. Acceptance is tentative: the next
/// sweep measures the residual at the proposed point, and if it exceeds the
/// residual at the jump-off point the window is dropped and the iteration
/// reverts to the stored plain step — so the accelerated sequence is never
/// more than one sweep behind the unaccelerated one.
struct Anderson<T: Element> {
    mem: usize,
    g_hist: Vec<Vec<Array2<T>>>,
    f_hist: Vec<Vec<Array2<T>>>,
    fallback: Option<(Vec<Array2<T>>, f64)>,
    accepted: usize,
    rejected: usize,
}

impl<T: Element> Anderson<T> {
    fn new(mem: usize) -> Self {
        Anderson {
            mem,
            g_hist: Vec::new(),
            f_hist: Vec::new(),
            fallback: None,
            accepted: 0,
            rejected: 0,
        }
    }

    fn reset(&mut self) {
        self.g_hist.clear();
        self.f_hist.clear();
        self.fallback = None;
    }

    /// Choose the next iterate from this sweep's plain step T(w) and
    /// residual F(w) = T(w) − w.
    fn next(
        &mut self,
        plain: Vec<Array2<T>>,
        f: Vec<Array2<T>>,
        f_norm: f64,
        engaged: bool,
    ) -> Vec<Array2<T>> {
        if let Some((revert, base_norm)) = self.fallback.take() {
            // NaN residuals must also revert, hence the negated comparison.
            if !(f_norm <= base_norm) {
                self.rejected += 1;
                self.g_hist.clear();
                self.f_hist.clear();
                return revert;
            }
            self.accepted += 1;
        }
        self.g_hist.push(plain);
        self.f_hist.push(f);
        if self.g_hist.len() > self.mem + 1 {
            self.g_hist.remove(0);
            self.f_hist.remove(0);
        }
        let n = self.g_hist.len() - 1;
        if engaged && n > 0 {
            if let Some(accel) = self.extrapolate(n) {
                self.fallback = Some((self.g_hist.last().unwrap().clone(), f_norm));
                return accel;
            }
        }
        self.g_hist.last().unwrap().clone()
    }

    /// Difference-form least squares over the window — minimize
    /// ‖F_k − ΔF·θ‖², then return G_k − ΔG·θ.
    fn extrapolate(&self, n: usize) -> Option<Vec<Array2<T>>> {
        let df: Vec<Vec<Array2<T>>> = (0..n)
            .map(|i| {
                self.f_hist[i + 1]
                    .iter()
                    .zip(&self.f_hist[i])
                    .map(|(a, b)| a - b)
                    .collect()
            })
            .collect();
        let fk = self.f_hist.last().unwrap();
        let mut gram = vec![vec![0.0; n]; n];
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            for j in i..n {
                let v = inner_vecs(&df[i], &df[j]);
                gram[i][j] = v;
                gram[j][i] = v;
            }
            rhs[i] = inner_vecs(&df[i], fk);
        }
        let lam = AA_REGULARIZATION
            * gram
                .iter()
                .enumerate()
                .map(|(i, row)| row[i])
                .fold(0.0, f64::max);
        if !(lam > 0.0) {
            return None;
        }
        for (i, row) in gram.iter_mut().enumerate() {
            row[i] += lam;
        }
        let theta = solve_small(gram, rhs)?;
        if theta.iter().any(|t| !t.is_finite() || t.abs() > 1e8) {
            return None;
        }
        let mut out = self.g_hist.last().unwrap().clone();
        for (i, &th) in theta.iter().enumerate() {
            let c = T::from_real(-th);
            for (ob, (g1, g0)) in out
                .iter_mut()
                .zip(self.g_hist[i + 1].iter().zip(&self.g_hist[i]))
            {
                Zip::from(ob)
                    .and(g1)
                    .and(g0)
                    .for_each(|o, a, b| *o += (*a - *b) * c);
            }
        }
        Some(out)
    }
}

/// Gaussian elimination with partial pivoting for the tiny Anderson
/// systems; `None` when numerically singular.
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if !(a[piv][col].abs() > 1e-300) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let fac = a[row][col] / a[col][col];
            if fac != 0.0 {
                for k in col..n {
                    a[row][k] -= fac * a[col][k];
                }
                b[row] -= fac * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{AffineConstraint, BlockVarSpec, LinOp, Rhs, RowKind, Term};
    use crate::models::build_model;
    use crate::sdp::{build_lti, build_mps_relaxation, build_ttn_relaxation};
    use crate::tensor::{eye, C64};
    use ndarray::array;

    #[test]
    fn dbg_tmp_tree() {
        let spec = build_model("tfi", &[]).unwrap();
        let tree = crate::ttn::optimize_tree(&spec, 3, 2, 1).unwrap();
        let built = crate::sdp::build_ttn_relaxation(&spec, 3, &tree.stack).unwrap();
        let opts = SolveOptions {
            max_iters: 4_000,
            verbose: true,
            ..SolveOptions::default()
        };
        let t0 = std::time::Instant::now();
        let sol = solve_auto(&built.problem, &opts).unwrap();
        eprintln!(
            "DBG status={:?} iters={} obj={:.12} primal={:.3e} dual={:.3e} gap={:.3e} secs={:.1}",
            sol.status,
            sol.iterations,
            sol.residuals.objective,
            sol.residuals.primal,
            sol.residuals.dual,
            sol.residuals.gap,
            t0.elapsed().as_secs_f64()
        );
    }

    /// min ⟨h, ρ⟩ over PSD trace-one ρ is exactly the smallest eigenvalue,
    /// with dual y = λ_min and slack h − λ_min·I.
    #[test]
    fn trace_normalized_minimum_is_the_smallest_eigenvalue() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let raw = crate::tensor::random_matrix::<C64>(8, 8, &mut rng);
        let h = {
            let d = dagger(&raw.view());
            (&raw + &d).mapv(|z| z * C64::new(0.5, 0.0))
        };
        let p = SdpProblem {
            vars: vec![BlockVarSpec::psd("rho", vec![8])],
            constraints: vec![AffineConstraint {
                label: "trace".into(),
                kind: RowKind::Trace,
                out_dim: 1,
                terms: vec![Term {
                    block: 0,
                    coeff: 1.0,
                    op: LinOp::TraceAll,
                }],
                rhs: Rhs::ScalarOne,
            }],
            objective: (0, h.clone()),
            trace_row: 0,
            cascade: vec![],
            witness: vec![eye::<C64>(8).mapv(|z| z / C64::new(8.0, 0.0))],
            meta: crate::linops::ProblemMeta {
                family: "test".into(),
                row_channel_behavior: vec![None],
            },
        };
        let sol = solve_dense_small(&p).unwrap();
        let lam = crate::tensor::eigvalsh(&h.view()).unwrap()[0];
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.residuals.objective - lam).abs() <= 1e-8);
        assert!((sol.residuals.dual_objective - lam).abs() <= 1e-8);
        // The multiplier of the trace row is the optimal value itself.
        assert!((sol.row_duals[0][(0, 0)].re - lam).abs() <= 1e-7);
    }

    /// min −t with X + t·I fixed: the optimum is the smallest eigenvalue
    /// again, now reached through a free scalar block and a matrix-valued
    /// right-hand side. Free blocks must come back with zero dual slack.
    #[test]
    fn free_block_shifts_carry_zero_slack() {
        let a0 = array![
            [C64::new(2.0, 0.0), C64::new(0.4, 0.3)],
            [C64::new(0.4, -0.3), C64::new(1.0, 0.0)],
        ];
        let lam = crate::tensor::eigvalsh(&a0.view()).unwrap()[0];
        // GeneralLinear t ↦ t·I₂ as a vec-to-vec map (column = vec(I)).
        let mut m = Array2::<C64>::zeros((4, 1));
        m[(0, 0)] = C64::new(1.0, 0.0);
        m[(3, 0)] = C64::new(1.0, 0.0);
        let p = SdpProblem {
            vars: vec![
                BlockVarSpec::psd("x", vec![2]),
                BlockVarSpec::free("t", vec![1]),
            ],
            constraints: vec![AffineConstraint {
                label: "shift".into(),
                kind: RowKind::Marginal,
                out_dim: 2,
                terms: vec![
                    Term {
                        block: 0,
                        coeff: 1.0,
                        op: LinOp::Id,
                    },
                    Term {
                        block: 1,
                        coeff: 1.0,
                        op: LinOp::GeneralLinear { m, out_dim: 2 },
                    },
                ],
                rhs: Rhs::Matrix(a0.clone()),
            }],
            objective: (1, -eye::<C64>(1)),
            trace_row: 0,
            cascade: vec![],
            witness: vec![a0.clone(), Array2::zeros((1, 1))],
            meta: crate::linops::ProblemMeta {
                family: "test".into(),
                row_channel_behavior: vec![None],
            },
        };
        let sol = solve_dense_small(&p).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.residuals.objective - (-lam)).abs() <= 1e-8);
        let slacks = dual_slacks(&p, &sol.row_duals).unwrap();
        assert!(crate::tensor::max_abs(&slacks[1].view()) <= 1e-8);
    }

    #[test]
    fn four_site_heisenberg_hierarchy_value_is_minus_half() {
        let spec = build_model("heis", &[]).unwrap();
        let p = build_lti(&spec, 4).unwrap().realify().unwrap();
        let sol = solve_dense_small(&p).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(
            (sol.residuals.objective - (-0.5)).abs() <= 1e-6,
            "got {}",
            sol.residuals.objective
        );
        assert!(sol.residuals.gap <= 1e-9);
        assert!(sol.residuals.dual <= 1e-9);
    }

    #[test]
    fn compressed_problem_stays_below_its_variational_seed() {
        let spec = build_model("tfi", &[]).unwrap();
        let found = crate::umps::optimize_ground_state(&spec, 2, 7).unwrap();
        let p = build_mps_relaxation(&spec, 6, &found.mps).unwrap();
        let sol = solve_auto(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        // A relaxation optimum sits below the true density, hence below any
        // variational upper bound; the free-fermion value pins the truth.
        let exact = crate::models::tfi_free_fermion_density(1.0);
        assert!(sol.residuals.objective <= found.energy + 1e-7);
        assert!(sol.residuals.objective <= exact + 1e-7);
        assert!(sol.residuals.objective >= exact - 0.05, "not wildly loose");
    }

    #[test]
    fn tree_problem_lower_bounds_the_true_density() {
        let spec = build_model("tfi", &[]).unwrap();
        let tree = crate::ttn::optimize_tree(&spec, 3, 2, 1).unwrap();
        let built = build_ttn_relaxation(&spec, 3, &tree.stack).unwrap();
        let sol = solve_auto(&built.problem, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let exact = crate::models::tfi_free_fermion_density(1.0);
        assert!(sol.residuals.objective <= exact + 1e-7);
        assert!(sol.residuals.objective >= exact - 0.05);
    }

    #[test]
    fn convergence_trace_is_written_as_csv() {
        let spec = build_model("tfi", &[]).unwrap();
        let p = build_lti(&spec, 3).unwrap().realify().unwrap();
        let path = std::env::temp_dir().join(format!("hamlb-trace-{}.csv", std::process::id()));
        let opts = SolveOptions {
            trace: Some(path.clone()),
            ..SolveOptions::default()
        };
        let sol = solve(&p, &opts).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::remove_file(&path).ok();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iter,rho,primal,dual,gap,objective"));
        assert!(lines.count() >= 1);
    }

    #[test]
    fn dense_small_guard_rejects_large_problems() {
        let spec = build_model("tfi", &[]).unwrap();
        let p = build_lti(&spec, 10).unwrap().realify().unwrap();
        assert!(matches!(
            solve_dense_small(&p),
            Err(SolverError::TooLarge { .. })
        ));
    }

    #[test]
    fn duals_certify_from_scratch_on_rebuilt_slacks() {
        let spec = build_model("xx", &[]).unwrap();
        let p = build_lti(&spec, 5).unwrap().realify().unwrap();
        let sol = solve_dense_small(&p).unwrap();
        // Recompute everything the solution claims, independently.
        let res = residuals(&p, &sol.primal_blocks, &sol.row_duals).unwrap();
        assert!(res.primal <= 1e-9);
        assert!(res.dual <= 1e-9);
        assert!(res.gap <= 1e-9);
        assert!(res.dual_objective <= res.objective + 1e-9, "weak duality");
    }
}
