//! Post-hoc certification: turn approximate multipliers from the solver into
//! a rigorously valid lower bound.
//!
//! The dual of every relaxation built here reads: maximize ε subject to
//! C − A†(y) ⪰ 0 blockwise, with ε the multiplier of the normalization row.
//! Any y whose slacks are genuinely positive semidefinite certifies ε as a
//! bound — no trust in the solver is needed, only in the final verification.
//!
//! A solver's y is feasible only up to numerical error, so each block's
//! slack may dip slightly negative. The repair walks the problem's cascade
//! schedule from the deepest block toward the base: a deficit `e < 0` on the
//! designated block is lifted by shifting that block's linkage-row
//! multiplier by `±δ·I` (δ = pad − e), which raises the deep slack by
//! exactly δ and lowers the next-shallower block's slack by at most δ —
//! the linkage operator's adjoint maps the identity to at most the identity
//! because the underlying channel is trace preserving or trace
//! non-increasing. Deficits therefore accumulate additively toward the base
//! block, where the normalization multiplier absorbs them as a plain
//! subtraction from ε. Every slack is then re-verified from scratch.

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::linops::{Cone, LinOp, LinOpError, SdpProblem};
use crate::solver::{dual_objective, dual_slacks, ConicSolution, SolverError};
use crate::tensor::{dagger, eye, min_eigenvalue, Element, TensorError};
use crate::umps::TraceBehavior;

/// Target slack floor installed by each repair.
const PAD: f64 = 1e-9;
/// Post-repair verification tolerance.
const VERIFY_TOL: f64 = 1e-12;

/// Errors from certification.
#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("row '{row}' drives a cascade step but its channel is not trace monotone")]
    UntrustedChannel { row: String },
    #[error("block '{block}' is a free variable; only all-PSD problems are certified")]
    FreeBlock { block: String },
    #[error(
        "repair left block '{block}' with slack eigenvalue {min_eig:.3e} below -{tol:.0e}"
    )]
    RepairFailed {
        block: String,
        min_eig: f64,
        tol: f64,
    },
    #[error("duals have {found} rows, problem has {expect}")]
    BadDuals { found: usize, expect: usize },
    #[error(transparent)]
    LinOp(#[from] LinOpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// One cascade repair event.
#[derive(Debug, Clone, Serialize)]
pub struct CascadeCorrection {
    pub block: String,
    pub row: String,
    /// Slack floor found before the repair (negative when a repair fired).
    pub min_eig: f64,
    /// Multiplier shift actually applied (0 when the slack was already safe).
    pub delta: f64,
}

/// Serializable summary of a certification run.
#[derive(Debug, Clone, Serialize)]
pub struct CertifiedBound {
    /// The rigorously valid lower bound ⟨b, y⟩ after repair.
    pub value: f64,
    /// Dual objective of the multipliers as handed in.
    pub pre_certification_value: f64,
    pub corrections: Vec<CascadeCorrection>,
    /// Adjustment folded into the normalization multiplier (≤ 0).
    pub base_correction: f64,
    /// Smallest slack eigenvalue over all blocks at final verification.
    pub verified_min_eig: f64,
    pub pad: f64,
}

/// A certified bound together with the repaired multipliers that witness it.
#[derive(Debug, Clone)]
pub struct Certificate<T: Element> {
    pub bound: CertifiedBound,
    pub row_duals: Vec<Array2<T>>,
}

/// Certify a solved problem's multipliers. See the module docs for the
/// repair contract; fails rather than weaken if any cascade row's channel
/// lacks the required trace monotonicity.
pub fn certify_solution<T: Element>(
    p: &SdpProblem<T>,
    sol: &ConicSolution<T>,
) -> Result<Certificate<T>, CertifyError> {
    certify(p, &sol.row_duals)
}

/// Certify explicit row multipliers.
pub fn certify<T: Element>(
    p: &SdpProblem<T>,
    row_duals: &[Array2<T>],
) -> Result<Certificate<T>, CertifyError> {
    if row_duals.len() != p.constraints.len() {
        return Err(CertifyError::BadDuals {
            found: row_duals.len(),
            expect: p.constraints.len(),
        });
    }
    for v in &p.vars {
        if v.cone == Cone::Free {
            return Err(CertifyError::FreeBlock {
                block: v.label.clone(),
            });
        }
    }
    for step in &p.cascade {
        check_cascade_row(p, step.row)?;
    }

    // Hermitize the incoming multipliers: the adjoint algebra assumes it,
    // and solver iterates only drift from it by roundoff.
    let mut y: Vec<Array2<T>> = row_duals
        .iter()
        .map(|m| {
            let d = dagger(&m.view());
            let mut h = m.clone();
            h.zip_mut_with(&d, |a, b| *a = (*a + *b) * T::from_real(0.5));
            h
        })
        .collect();
    let pre_certification_value = dual_objective(p, &y);

    let mut slacks = dual_slacks(p, &y)?;
    let mut corrections = Vec::with_capacity(p.cascade.len());
    for step in &p.cascade {
        let e = min_eigenvalue(&slacks[step.block].view())?;
        let mut delta = 0.0;
        if e < 0.0 {
            delta = PAD - e;
            let row = &p.constraints[step.row];
            let shift = T::from_real(step.shift * delta);
            let id = eye::<T>(row.out_dim).mapv(|v| v * shift);
            y[step.row].zip_mut_with(&id, |a, b| *a += *b);
            for t in &row.terms {
                let img = t
                    .op
                    .apply_adjoint(&id.view(), &p.vars[t.block].factor_list)?;
                slacks[t.block].zip_mut_with(&img, |s, v| *s -= *v * T::from_real(t.coeff));
            }
        }
        corrections.push(CascadeCorrection {
            block: p.vars[step.block].label.clone(),
            row: p.constraints[step.row].label.clone(),
            min_eig: e,
            delta,
        });
    }

    // Base block last: its deficit is paid by the normalization multiplier,
    // whose adjoint is exactly the identity and whose right-hand side is the
    // scalar one — the bound moves by the same amount.
    let base_block = p.objective.0;
    let e0 = min_eigenvalue(&slacks[base_block].view())?;
    let mut base_correction = 0.0;
    if e0 < 0.0 {
        base_correction = e0 - PAD;
        let row = &p.constraints[p.trace_row];
        let shift = T::from_real(base_correction);
        let id = eye::<T>(row.out_dim).mapv(|v| v * shift);
        y[p.trace_row].zip_mut_with(&id, |a, b| *a += *b);
        for t in &row.terms {
            let img = t
                .op
                .apply_adjoint(&id.view(), &p.vars[t.block].factor_list)?;
            slacks[t.block].zip_mut_with(&img, |s, v| *s -= *v * T::from_real(t.coeff));
        }
    }

    // Independent verification from scratch; refuse to return on failure.
    let (value, verified_min_eig) = verify_feasibility(p, &y, VERIFY_TOL)?;
    Ok(Certificate {
        bound: CertifiedBound {
            value,
            pre_certification_value,
            corrections,
            base_correction,
            verified_min_eig,
            pad: PAD,
        },
        row_duals: y,
    })
}

/// Recompute every dual slack from scratch and check blockwise positive
/// semidefiniteness down to `-tol`. Returns the certified objective ⟨b, y⟩
/// and the worst slack eigenvalue encountered.
pub fn verify_feasibility<T: Element>(
    p: &SdpProblem<T>,
    row_duals: &[Array2<T>],
    tol: f64,
) -> Result<(f64, f64), CertifyError> {
    let slacks = dual_slacks(p, row_duals)?;
    let mut worst = f64::INFINITY;
    for (b, s) in slacks.iter().enumerate() {
        let e = min_eigenvalue(&s.view())?;
        if e < worst {
            worst = e;
        }
        if e < -tol {
            return Err(CertifyError::RepairFailed {
                block: p.vars[b].label.clone(),
                min_eig: e,
                tol,
            });
        }
    }
    Ok((dual_objective(p, row_duals), worst))
}

/// A cascade row may only be repaired through channels whose adjoint cannot
/// amplify the identity: structurally exact for the partial-trace family,
/// and certified by the measured trace behavior for Kraus-backed operators.
fn check_cascade_row<T: Element>(p: &SdpProblem<T>, row: usize) -> Result<(), CertifyError> {
    let declared = p.meta.row_channel_behavior.get(row).copied().flatten();
    let needs_channel_evidence = p.constraints[row]
        .terms
        .iter()
        .any(|t| op_contains_kraus(&t.op));
    if needs_channel_evidence
        && !matches!(
            declared,
            Some(TraceBehavior::Preserving) | Some(TraceBehavior::Nonincreasing)
        )
    {
        return Err(CertifyError::UntrustedChannel {
            row: p.constraints[row].label.clone(),
        });
    }
    Ok(())
}

pub(crate) fn op_contains_kraus<T: Element>(op: &LinOp<T>) -> bool {
    match op {
        LinOp::Id | LinOp::TraceFirst { .. } | LinOp::TraceLast { .. } | LinOp::TraceAll => false,
        LinOp::Kraus { .. } | LinOp::GeneralLinear { .. } => true,
        LinOp::Compose(ops) => ops.iter().any(op_contains_kraus),
        LinOp::Adj { inner, .. } => op_contains_kraus(inner),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_model;
    use crate::sdp::{build_lti, build_mps_relaxation, build_ttn_relaxation};
    use crate::solver::{solve_auto, solve_dense_small, SolveOptions};
    use crate::tensor::C64;

    #[test]
    fn certified_bound_is_tight_and_idempotent_on_the_exact_hierarchy() {
        let spec = build_model("heis", &[]).unwrap();
        let p = build_lti(&spec, 4).unwrap();
        let rp = p.realify().unwrap();
        let sol = solve_dense_small(&rp).unwrap();
        let cert = certify_solution(&rp, &sol).unwrap();
        // The certified value must be a true lower bound within solver
        // accuracy of the primal optimum.
        assert!(cert.bound.value <= sol.residuals.objective + 1e-9);
        assert!((cert.bound.value - sol.residuals.objective).abs() <= 1e-7);
        assert!((cert.bound.value - (-0.5)).abs() <= 1e-5);
        // Certifying the repaired multipliers again changes nothing.
        let again = certify(&rp, &cert.row_duals).unwrap();
        assert!((again.bound.value - cert.bound.value).abs() <= 1e-12);
        assert!(again.bound.corrections.iter().all(|c| c.delta == 0.0));
        assert_eq!(again.bound.base_correction, 0.0);
    }

    #[test]
    fn sloppy_multipliers_still_certify_a_valid_bound() {
        let spec = build_model("tfi", &[]).unwrap();
        let p = build_lti(&spec, 5).unwrap().realify().unwrap();
        let loose = SolveOptions {
            eps: 1e-4,
            ..SolveOptions::default()
        };
        let sol = crate::solver::solve(&p, &loose).unwrap();
        let cert = certify_solution(&p, &sol).unwrap();
        let tight = solve_dense_small(&p).unwrap();
        assert!(
            cert.bound.value <= tight.residuals.objective + 1e-9,
            "certified {} vs optimum {}",
            cert.bound.value,
            tight.residuals.objective
        );
        assert!(cert.bound.value >= tight.residuals.objective - 1e-2);
        assert!(cert.bound.verified_min_eig >= -VERIFY_TOL);
    }

    #[test]
    fn corrupted_designated_multiplier_costs_at_most_the_cascade_depth() {
        let spec = build_model("tfi", &[]).unwrap();
        let p = build_lti(&spec, 5).unwrap().realify().unwrap();
        let sol = solve_dense_small(&p).unwrap();
        let clean = certify_solution(&p, &sol).unwrap();
        let delta = 1e-4;
        let mut dirty = sol.row_duals.clone();
        let step = &p.cascade[0];
        let dim = p.constraints[step.row].out_dim;
        let bump = eye::<f64>(dim).mapv(|v| v * (step.shift * delta));
        dirty[step.row].zip_mut_with(&bump, |a, b| *a -= *b);
        let repaired = certify(&p, &dirty).unwrap();
        let levels = p.cascade.len() as f64 + 1.0;
        assert!(repaired.bound.value <= clean.bound.value + 1e-12);
        assert!(
            repaired.bound.value >= clean.bound.value - levels * delta - 1e-9,
            "drop {} exceeds {}",
            clean.bound.value - repaired.bound.value,
            levels * delta
        );
    }

    #[test]
    fn compressed_problem_certifies_through_its_channels() {
        let spec = build_model("tfi", &[]).unwrap();
        let found = crate::umps::optimize_ground_state(&spec, 2, 7).unwrap();
        let p = build_mps_relaxation(&spec, 6, &found.mps).unwrap();
        let sol = solve_auto(&p, &SolveOptions::default()).unwrap();
        let cert = certify_solution(&p, &sol).unwrap();
        assert!(cert.bound.value <= found.energy + 1e-7);
        assert!((cert.bound.value - sol.residuals.dual_objective).abs() <= 1e-5);
    }

    #[test]
    fn tree_problem_certifies_and_reports_corrections() {
        let spec = build_model("tfi", &[]).unwrap();
        let tree = crate::ttn::optimize_tree(&spec, 3, 2, 1).unwrap();
        let built = build_ttn_relaxation(&spec, 3, &tree.stack).unwrap();
        let sol = solve_auto(&built.problem, &SolveOptions::default()).unwrap();
        let cert = certify_solution(&built.problem, &sol).unwrap();
        assert_eq!(cert.bound.corrections.len(), 1);
        let exact = crate::models::tfi_free_fermion_density(1.0);
        assert!(cert.bound.value <= exact + 1e-7);
        let dump = serde_json::to_string(&cert.bound).unwrap();
        assert!(dump.contains("pre_certification_value"));
    }

    #[test]
    fn general_trace_behavior_on_a_cascade_row_is_refused() {
        let spec = build_model("tfi", &[]).unwrap();
        let found = crate::umps::optimize_ground_state(&spec, 2, 7).unwrap();
        let mut p = build_mps_relaxation(&spec, 6, &found.mps).unwrap();
        let row = p.cascade[0].row;
        p.meta.row_channel_behavior[row] = Some(TraceBehavior::General);
        let duals: Vec<Array2<C64>> = p
            .constraints
            .iter()
            .map(|r| Array2::zeros((r.out_dim, r.out_dim)))
            .collect();
        assert!(matches!(
            certify(&p, &duals),
            Err(CertifyError::UntrustedChannel { .. })
        ));
    }
}
