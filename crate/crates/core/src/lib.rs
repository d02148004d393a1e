//! Numerical homogenization of degenerate cross-diffusion systems.
//!
//! Modules, bottom-up: [`geometry`] (periodicity cell, grids, coefficients),
//! [`models`] (diffusion matrices, entropies, assumption checks),
//! [`cellproblem`] (corrector problems), [`effective`] (homogenized tensors),
//! [`timestepping`] (implicit entropy-variable schemes) and [`harness`]
//! (configuration, convergence sweeps, reports).

pub mod cellproblem;
pub mod effective;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod timestepping;

pub use cellproblem::{
    delta_continuation, solve_coupled_cell, solve_scalar_cell, CellSolutionKind, CellSolutionSet,
    CellSolveOptions, DeltaContinuation, InitialGuess,
};
pub use effective::{
    ahat, clamp_state, dhom, dhom_perforated, effective_tensor_local, effective_tensor_perforated,
    AverageNormalization, EffectiveTensor, TensorCache, TensorKind,
};
pub use error::{Error, Result};
pub use geometry::{
    build_cell_grid, sample_coefficient, CellGeometry, CellGrid, CoefficientSpec, HoleShape,
    HoleSpec, PeriodicCoefficient,
};
pub use harness::{emit_report, eps_sweep, Config, ConvergenceReport, Report};
pub use models::{
    builtin_model, check_assumptions, entropy_production_density, AssumptionReport, Composition,
    DegeneracyKind, DiffusionModel,
};
pub use timestepping::{
    run_transient, step_macro, step_micro, DomainGrid, MacroTensor, StateField, Stepper,
    StepperConfig, TrajectoryLog,
};
