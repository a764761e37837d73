//! Rigorous lower bounds on ground-state energy densities of one-dimensional
//! translation-invariant local Hamiltonians.
//!
//! The library builds semidefinite relaxations of the translation-invariant
//! ground-energy problem in three flavours — the exact locally
//! translation-invariant (LTI) hierarchy, a matrix-product-state-compressed
//! relaxation, and a tree-tensor-network-compressed relaxation — solves them
//! with a self-contained first-order operator-splitting solver, and converts
//! the approximate dual solutions into rigorous certified lower bounds.
//! Variational upper bounds from the same tensor-network ansatzes close the
//! sandwich from above.

pub mod certify;
pub mod cgopt;
pub mod linops;
pub mod models;
pub mod sdp;
pub mod solver;
pub mod tensor;
pub mod ttn;
pub mod umps;

pub use certify::{
    certify, certify_solution, verify_feasibility, Certificate, CertifiedBound, CertifyError,
};
pub use cgopt::{
    build_dual_form, channel_choi, choi_to_channel, improve_maps, project_cptp,
    symmetrized_pair_channel, CgOptError, DualFormProblem, ImproveOptions, ImproveOutcome,
    ImproveStep,
};
pub use sdp::{
    build_lti, build_mps_relaxation, build_shift2_lti, build_ttn_relaxation,
    build_ttn_relaxation_from_channels, build_ttn_relaxation_from_pair_channels, TtnRelaxation,
};
pub use solver::{
    residuals, solve, solve_auto, solve_dense_small, ConicSolution, Residuals, SolveOptions,
    SolveStatus,
};
pub use tensor::{DenseTensor, HermitianMatrix};
pub use ttn::{compose_layers, isometry_to_cptp, optimize_tree, CptpLayer, TreeStack};
pub use umps::{
    build_l, build_r, build_w, energy_density, optimize_ground_state, to_left_gauge,
    CoarseGrainChannel, Gauge, TraceBehavior, UniformMps,
};
