//! Time-optimal single-excitation transfer in nearest-neighbor qubit chains.
//!
//! The library solves the two-point boundary-value problem posed by the
//! quantum brachistochrone equation for an N-site chain with tunable
//! couplings under the budget sum_m J_m^2 = J0^2: shooting for short
//! chains, adjoint-gradient optimization seeded by continuation for long
//! ones. Exactly solvable baseline protocols (stepwise swaps and the
//! static perfect-transfer profile) and independent dense-matrix oracles
//! validate every structured computation.

pub mod adjoint;
pub mod baseline;
pub mod chain;
pub mod dynamics;
pub mod error;
pub mod ode;
pub mod optim;
pub mod oracle;
pub mod solver;

pub use baseline::{
    perfect_transfer_schedule, perfect_transfer_time, simulate_schedule, stepwise_schedule,
    stepwise_time, Schedule,
};
pub use chain::{
    build_generator, build_hamiltonian, coupling_norm, multiplier_index, multiplier_unindex,
    ChainSpec, ControlState, GeneratorMatrix, WaveState,
};
pub use dynamics::{
    conservation_report, from_real_gauge, integrate, qbe_rhs, schrodinger_rhs, to_real_gauge,
    ConservationReport, Trajectory,
};
pub use error::{Error, Result};
pub use oracle::{brute_force_min_time, commutator_rhs_oracle, expm_propagate, OracleReport};
pub use solver::{
    continuation_guess, fit_scaling, initial_control, rescale_solution, shooting_residual,
    solve_gradient, solve_shooting, ContinuationSolver, ScalingFit, ShootingParams, Solution,
    SolveOptions,
};
