//! Eigenbasis sorting with a step-function signal processor.
//!
//! The aux qubit is rotated between controlled density-matrix exponentials.
//! An eigenvector of `rho` with eigenvalue `r_k` sees the scalar phase
//! `tau = r_k x`, and the aux ends in `|0>` with amplitude `f(tau)` where `f`
//! approximates a periodic step. Measuring the aux therefore sorts eigenvectors
//! above and below the step.

mod angles;
mod filter;
mod plan;
mod poly;

pub use angles::{angles_from_pair, complementary, poly_to_angles, scalar_response, QspAngles};
pub use filter::{
    filter_circuit, filter_ideal, sample_branch, sweep_csv, two_stage_filter, two_stage_ideal, Fidelity, FilterEngine,
    FilterLabel, FilterOutcome, SimMode, SweepRow,
};
pub use plan::{noisy_levels, plan, plan_two_stage, plan_with_x, PlanMode, QspPlan, DEFAULT_X};
pub use poly::{build_step_poly, StepSpec, TrigPolynomial, GRID_POINTS};
