//! Nonlinear Schwarz domain decomposition for finite element problems.
//!
//! One-level ASPEN/ASPIN/RASPEN and additive or hybrid two-level nonlinear Schwarz
//! methods with GDSW, RGDSW and MsFEM coarse spaces (optionally with the Dirichlet-edge
//! modification, monolithic for saddle-point problems), applied to lid-driven cavity
//! Navier-Stokes flow, a Neo-Hookean beam and a scalar nonlinear diffusion problem,
//! plus a Newton-Krylov-Schwarz baseline.

pub mod assembly;
pub mod coarse;
pub mod error;
pub mod mesh;
pub mod outer;
pub mod schwarz;
pub mod sparse;

pub use assembly::{DiffusionLaw, LocalSpace, Model, ProblemSpec};
pub use coarse::{build_coarse_space, CoarseConfig, CoarseKind, CoarseSpace};
pub use error::{Error, Result};
pub use mesh::{BoundaryLayout, BoundaryTag, Decomposition, InterfaceSkeleton, Mesh, Rect};
pub use outer::{
    solve, solve_newton, solve_nks, solve_nonlinear_schwarz, IterationRecord, Method,
    SolveReport, SolverConfig, StopReason,
};
pub use schwarz::{
    Levels, LineSearch, NewtonTolerances, NonlinearSchwarz, Recombination, TangentMode,
    VariantConfig,
};
pub use sparse::{CsrMatrix, Factorization, GmresConfig};
