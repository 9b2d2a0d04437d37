//! Shared fixtures for the criterion benchmarks.

use nlschwarz::outer::decompose;
use nlschwarz::{Decomposition, Method, Model, ProblemSpec, SolverConfig};

/// Cavity model, its initial guess and a Schwarz decomposition on a `p x p` grid.
pub fn cavity(cells: usize, p: usize, reynolds: f64) -> (Model, Vec<f64>, Decomposition, SolverConfig) {
    let model = Model::structured(ProblemSpec::cavity(reynolds), cells, cells).expect("cavity mesh");
    let cfg = SolverConfig::cavity();
    let decomp = decompose(&model, p, p, &cfg, Method::Schwarz).expect("decomposition");
    let u0 = model.initial_guess();
    (model, u0, decomp, cfg)
}

/// Nonlinear diffusion model on the unit square.
pub fn diffusion(cells: usize) -> (Model, Vec<f64>) {
    let model = Model::structured(ProblemSpec::diffusion(2.0, 10.0), cells, cells).expect("diffusion mesh");
    let u0 = model.initial_guess();
    (model, u0)
}
