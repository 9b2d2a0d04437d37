//! Nonlinear Schwarz operators.
//!
//! For a state `u`, local corrections `T_i(u)` solve `R_i F(u - P_i T_i(u)) = 0` on the
//! overlapping subdomains (ghost layer frozen) and the coarse correction `T_0(u)` solves
//! `P_0ᵀ F(u - P_0 T_0(u)) = 0`. They are recombined into a preconditioned residual
//! (one-level, additive or hybrid two-level), whose exact or inexact tangent is applied
//! from the factorizations stored during the last evaluation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{LocalSpace, Model};
use crate::coarse::CoarseSpace;
use crate::error::{Error, Result};
use crate::mesh::Decomposition;
use crate::sparse::{axpy, norm2, CsrMatrix, Factorization};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonTolerances {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iter: usize,
}

/// Backtracking parameters: accept the first `s = 1, θ, θ², ...` with
/// `‖F(u - s δ)‖ ≤ (1 - t s (1 - η̄)) ‖F(u)‖`; once `s` drops below `s_min` damping stops
/// and the current `s` is taken regardless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    pub enabled: bool,
    pub eta_bar: f64,
    pub t: f64,
    pub theta: f64,
    pub s_min: f64,
}

impl Default for LineSearch {
    fn default() -> Self {
        LineSearch {
            enabled: true,
            eta_bar: 1e-3,
            t: 1e-3,
            theta: 0.5,
            s_min: 1e-2,
        }
    }
}

impl LineSearch {
    pub fn disabled() -> Self {
        LineSearch { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.eta_bar >= 0.0
            && self.eta_bar < 1.0
            && self.t > 0.0
            && self.theta > 0.0
            && self.theta < 1.0
            && self.s_min > 0.0
            && self.s_min <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid line search parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOutcome {
    pub step: f64,
    pub norm: f64,
    /// Number of step reductions.
    pub reductions: usize,
    /// The step fell below `s_min` and was accepted without the decrease test.
    pub escaped: bool,
}

/// Backtracking on a residual norm. `trial(s)` returns the norm at step `s`;
/// non-physical states count as an infinite norm. Disabled searches take the full step.
pub fn backtrack(
    ls: &LineSearch,
    norm0: f64,
    mut trial: impl FnMut(f64) -> Result<f64>,
) -> Result<LineSearchOutcome> {
    let mut eval = |s: f64| match trial(s) {
        Ok(n) if n.is_finite() => Ok(n),
        Ok(_) | Err(Error::NonPhysicalState { .. }) | Err(Error::SingularMatrix { .. }) => {
            Ok(f64::INFINITY)
        }
        Err(e) => Err(e),
    };
    if !ls.enabled {
        let norm = eval(1.0)?;
        return Ok(LineSearchOutcome { step: 1.0, norm, reductions: 0, escaped: false });
    }
    let mut s = 1.0;
    let mut reductions = 0;
    loop {
        let norm = eval(s)?;
        if norm <= (1.0 - ls.t * s * (1.0 - ls.eta_bar)) * norm0 {
            return Ok(LineSearchOutcome { step: s, norm, reductions, escaped: false });
        }
        s *= ls.theta;
        reductions += 1;
        if s < ls.s_min {
            let norm = eval(s)?;
            return Ok(LineSearchOutcome { step: s, norm, reductions, escaped: true });
        }
    }
}

/// Local recombination: plain prolongation (ASPEN) or multiplicity averaging (RASPEN).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recombination {
    Additive,
    Restricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Levels {
    One,
    Additive,
    Hybrid,
}

/// Exact tangents use `DF(u - P_i T_i(u))`; inexact ones substitute `DF(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TangentMode {
    Exact,
    Inexact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub recombination: Recombination,
    pub levels: Levels,
    pub tangent: TangentMode,
}

impl VariantConfig {
    pub fn aspen() -> Self {
        VariantConfig { recombination: Recombination::Additive, levels: Levels::One, tangent: TangentMode::Exact }
    }

    pub fn aspin() -> Self {
        VariantConfig { tangent: TangentMode::Inexact, ..Self::aspen() }
    }

    pub fn raspen() -> Self {
        VariantConfig { recombination: Recombination::Restricted, ..Self::aspen() }
    }

    pub fn additive() -> Self {
        VariantConfig { recombination: Recombination::Restricted, levels: Levels::Additive, tangent: TangentMode::Exact }
    }

    pub fn hybrid() -> Self {
        VariantConfig { levels: Levels::Hybrid, ..Self::additive() }
    }

    /// Parse `aspen`, `aspin`, `raspen`, `additive`, `hybrid`.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "aspen" => Self::aspen(),
            "aspin" => Self::aspin(),
            "raspen" => Self::raspen(),
            "additive" => Self::additive(),
            "hybrid" => Self::hybrid(),
            _ => return None,
        })
    }

    pub fn label(&self) -> &'static str {
        match (self.levels, self.recombination, self.tangent) {
            (Levels::One, Recombination::Additive, TangentMode::Exact) => "aspen",
            (Levels::One, Recombination::Additive, TangentMode::Inexact) => "aspin",
            (Levels::One, Recombination::Restricted, _) => "raspen",
            (Levels::Additive, _, _) => "additive",
            (Levels::Hybrid, _, _) => "hybrid",
        }
    }

    pub fn needs_coarse(&self) -> bool {
        self.levels != Levels::One
    }
}

/// Result of one local nonlinear solve.
pub struct LocalSolveState {
    /// `T_i(u)` on the overlapping subdomain's dofs.
    pub correction: Vec<f64>,
    /// Ghost columns of `R_i DF(u_i)`; the inner columns live in `factor`, since
    /// `(R_i DF P_i)⁻¹ R_i DF x = x_i + (R_i DF P_i)⁻¹ B x_ghost`.
    pub ghost_coupling: CsrMatrix,
    /// Factorization of the square part `R_i DF(u_i) P_i`.
    pub factor: Factorization,
    pub iterations: usize,
    pub converged: bool,
}

/// Result of one coarse nonlinear solve.
pub struct CoarseSolveState {
    /// `T_0(u)` in coarse coefficients.
    pub coefficients: Vec<f64>,
    /// `P_0ᵀ DF(u_0)`.
    pub restricted_tangent: CsrMatrix,
    /// Factorization of `P_0ᵀ DF(u_0) P_0`.
    pub factor: Factorization,
    pub iterations: usize,
    pub converged: bool,
}

/// Split a rectangular local tangent (first `n` columns are the inner dofs) into the
/// square inner block and the inner-to-ghost block (ghost columns renumbered from 0).
fn split_inner_ghost(a: &CsrMatrix, n: usize) -> (CsrMatrix, CsrMatrix) {
    let mut sq = (vec![0u32], Vec::new(), Vec::new());
    let mut gh = (vec![0u32], Vec::new(), Vec::new());
    for i in 0..n {
        let (cols, vals) = a.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            let c = c as usize;
            if c < n {
                sq.1.push(c as u32);
                sq.2.push(v);
            } else {
                gh.1.push((c - n) as u32);
                gh.2.push(v);
            }
        }
        sq.0.push(sq.1.len() as u32);
        gh.0.push(gh.1.len() as u32);
    }
    let square = CsrMatrix::from_parts(n, n, sq.0, sq.1, sq.2).expect("sorted rows stay sorted");
    let ghost =
        CsrMatrix::from_parts(n, a.ncols() - n, gh.0, gh.1, gh.2).expect("sorted rows stay sorted");
    (square, ghost)
}

fn subdomain_error(i: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::SingularMatrix { pivot } => Error::SingularSubdomain { subdomain: i, pivot },
        other => other,
    }
}

/// Damping used by the local and coarse Newton solves.
pub const INNER_SEARCH: LineSearch = LineSearch { enabled: true, eta_bar: 0.0, t: 1e-4, theta: 0.5, s_min: 1e-2 };

/// Solve the local problem of subdomain `i` at state `u` (inner dofs start from `u`,
/// ghost dofs are frozen).
pub fn local_correction(
    model: &Model,
    space: &LocalSpace,
    i: usize,
    u: &[f64],
    tol: &NewtonTolerances,
    mode: TangentMode,
) -> Result<LocalSolveState> {
    let ni = space.n_inner;
    let mut ul = space.restrict(u);
    let start = ul[..ni].to_vec();
    let (mut r, mut jac) = model.local_residual_and_tangent(space, &ul)?;
    let first = (mode == TangentMode::Inexact).then(|| jac.clone());
    let r0 = norm2(&r);
    let mut norm = r0;
    let target = (tol.rel_tol * r0).max(tol.abs_tol);
    let mut iterations = 0;
    let mut trial = ul.clone();
    while norm > target && iterations < tol.max_iter {
        let factor = Factorization::new(&split_inner_ghost(&jac, ni).0).map_err(subdomain_error(i))?;
        let delta = factor.solve(&r);
        let ls = backtrack(&INNER_SEARCH, norm, |s| {
            trial.copy_from_slice(&ul);
            axpy(-s, &delta, &mut trial[..ni]);
            Ok(norm2(&model.local_residual(space, &trial)?))
        })?;
        if !ls.norm.is_finite() {
            return Err(Error::NonPhysicalState { element: usize::MAX, det: f64::NAN });
        }
        axpy(-ls.step, &delta, &mut ul[..ni]);
        iterations += 1;
        (r, jac) = model.local_residual_and_tangent(space, &ul)?;
        norm = norm2(&r);
    }
    let converged = norm <= target;
    if !converged {
        log::warn!("subdomain {i}: inner Newton stopped at {norm:.3e} after {iterations} iterations");
    }
    let (square, ghost_coupling) = split_inner_ghost(&first.unwrap_or(jac), ni);
    let factor = Factorization::new(&square).map_err(subdomain_error(i))?;
    let correction = start.iter().zip(&ul[..ni]).map(|(a, b)| a - b).collect();
    Ok(LocalSolveState { correction, ghost_coupling, factor, iterations, converged })
}

/// Coarse Newton solve at state `u`.
pub fn coarse_correction(
    model: &Model,
    coarse: &CoarseSpace,
    p0t: &CsrMatrix,
    u: &[f64],
    tol: &NewtonTolerances,
    search: &LineSearch,
    mode: TangentMode,
) -> Result<CoarseSolveState> {
    let m = coarse.dim();
    let mut c = vec![0.0; m];
    let shifted = |c: &[f64]| -> Vec<f64> {
        let mut v = u.to_vec();
        let pc = coarse.p0.mul_vec(c);
        axpy(-1.0, &pc, &mut v);
        v
    };
    let galerkin = |v: &[f64]| -> Result<(Vec<f64>, CsrMatrix, CsrMatrix)> {
        let (f, a) = model.residual_and_tangent(v)?;
        let w = p0t.matmul(&a)?;
        let mm = w.matmul(&coarse.p0)?;
        Ok((p0t.mul_vec(&f), w, mm))
    };
    let (mut r, mut w, mut mm) = galerkin(u)?;
    let first = (mode == TangentMode::Inexact).then(|| (w.clone(), mm.clone()));
    let r0 = norm2(&r);
    let mut norm = r0;
    let target = (tol.rel_tol * r0).max(tol.abs_tol);
    let mut iterations = 0;
    while norm > target && iterations < tol.max_iter {
        let factor = Factorization::new(&mm)?;
        let delta = factor.solve(&r);
        let ls = backtrack(search, norm, |s| {
            let trial: Vec<f64> = c.iter().zip(&delta).map(|(a, b)| a + s * b).collect();
            let f = model.residual(&shifted(&trial))?;
            Ok(norm2(&p0t.mul_vec(&f)))
        })?;
        if !ls.norm.is_finite() {
            return Err(Error::NonPhysicalState { element: usize::MAX, det: f64::NAN });
        }
        axpy(ls.step, &delta, &mut c);
        iterations += 1;
        (r, w, mm) = galerkin(&shifted(&c))?;
        norm = norm2(&r);
    }
    let converged = norm <= target;
    if !converged {
        log::warn!("coarse Newton stopped at {norm:.3e} after {iterations} iterations");
    }
    let (w, mm) = first.unwrap_or((w, mm));
    let factor = Factorization::new(&mm)?;
    Ok(CoarseSolveState { coefficients: c, restricted_tangent: w, factor, iterations, converged })
}

/// Counters and timings of one evaluation of the preconditioned residual.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationStats {
    pub avg_inner_iterations: f64,
    pub max_inner_iterations: usize,
    pub inner_converged: bool,
    pub coarse_iterations: usize,
    pub coarse_converged: bool,
    pub time_inner: f64,
    pub time_coarse: f64,
}

/// A nonlinear Schwarz preconditioned operator bound to a model and decomposition.
pub struct NonlinearSchwarz<'a> {
    pub model: &'a Model,
    pub variant: VariantConfig,
    pub inner: NewtonTolerances,
    pub coarse_tol: NewtonTolerances,
    /// Backtracking in the coarse Newton solve; on by default.
    pub coarse_search: LineSearch,
    spaces: Vec<LocalSpace>,
    /// `1 / multiplicity` per dof (RASPEN weights).
    weights: Vec<f64>,
    coarse: Option<(&'a CoarseSpace, CsrMatrix)>,
    state_u: Vec<f64>,
    locals: Vec<LocalSolveState>,
    coarse_state: Option<CoarseSolveState>,
}

impl<'a> NonlinearSchwarz<'a> {
    pub fn new(
        model: &'a Model,
        decomp: &Decomposition,
        coarse: Option<&'a CoarseSpace>,
        variant: VariantConfig,
        inner: NewtonTolerances,
        coarse_tol: NewtonTolerances,
    ) -> Result<Self> {
        if variant.needs_coarse() && coarse.is_none() {
            return Err(Error::Config(format!("variant {} needs a coarse space", variant.label())));
        }
        let spaces: Vec<LocalSpace> = (0..decomp.num_subdomains)
            .map(|i| model.local_space(&decomp.overlap[i], &decomp.ghost[i]))
            .collect::<Result<_>>()?;
        let mut mult = vec![0usize; model.ndofs()];
        for s in &spaces {
            for &d in s.inner_dofs() {
                mult[d] += 1;
            }
        }
        if let Some(d) = mult.iter().position(|&m| m == 0) {
            return Err(Error::Partition(format!("dof {d} is not covered by any subdomain")));
        }
        let weights = mult.iter().map(|&m| 1.0 / m as f64).collect();
        let coarse = if variant.needs_coarse() { coarse.map(|c| (c, c.p0.transpose())) } else { None };
        Ok(NonlinearSchwarz {
            model,
            variant,
            inner,
            coarse_tol,
            coarse_search: INNER_SEARCH,
            spaces,
            weights,
            coarse,
            state_u: Vec::new(),
            locals: Vec::new(),
            coarse_state: None,
        })
    }

    pub fn num_subdomains(&self) -> usize {
        self.spaces.len()
    }

    pub fn spaces(&self) -> &[LocalSpace] {
        &self.spaces
    }

    /// `1 / multiplicity` per dof.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn local_states(&self) -> &[LocalSolveState] {
        &self.locals
    }

    pub fn coarse_state(&self) -> Option<&CoarseSolveState> {
        self.coarse_state.as_ref()
    }

    fn local_weight(&self, d: usize) -> f64 {
        match self.variant.recombination {
            Recombination::Additive => 1.0,
            Recombination::Restricted => self.weights[d],
        }
    }

    /// `Σ P̃_i R_i x` (or `Σ P_i R_i x` for additive recombination).
    pub fn recombine_restrictions(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        for s in &self.spaces {
            for &d in s.inner_dofs() {
                y[d] += self.local_weight(d) * x[d];
            }
        }
        y
    }

    fn solve_locals(&self, v: &[f64]) -> Result<Vec<LocalSolveState>> {
        let mode = self.variant.tangent;
        self.spaces
            .par_iter()
            .enumerate()
            .map(|(i, s)| local_correction(self.model, s, i, v, &self.inner, mode))
            .collect()
    }

    fn add_locals(&self, locals: &[LocalSolveState], y: &mut [f64]) {
        for (s, st) in self.spaces.iter().zip(locals) {
            for (k, &d) in s.inner_dofs().iter().enumerate() {
                y[d] += self.local_weight(d) * st.correction[k];
            }
        }
    }

    /// Evaluate the preconditioned residual at `u`, refreshing the stored solve states.
    pub fn evaluate(&mut self, u: &[f64]) -> Result<(Vec<f64>, EvaluationStats)> {
        let n = self.model.ndofs();
        if u.len() != n {
            return Err(Error::Dimension("state length mismatch".into()));
        }
        // drop the previous states first: they are stale and hold most of the memory
        self.locals.clear();
        self.coarse_state = None;
        self.state_u.clear();
        let mut stats = EvaluationStats { inner_converged: true, coarse_converged: true, ..Default::default() };
        let mut y = vec![0.0; n];
        let mut coarse_state = None;
        let mut v = u.to_vec();
        if let Some((cs, p0t)) = &self.coarse {
            let t = Instant::now();
            let st = coarse_correction(self.model, cs, p0t, u, &self.coarse_tol, &self.coarse_search, self.variant.tangent)?;
            stats.time_coarse = t.elapsed().as_secs_f64();
            stats.coarse_iterations = st.iterations;
            stats.coarse_converged = st.converged;
            let pc = cs.p0.mul_vec(&st.coefficients);
            axpy(1.0, &pc, &mut y);
            if self.variant.levels == Levels::Hybrid {
                axpy(-1.0, &pc, &mut v);
            }
            coarse_state = Some(st);
        }
        let t = Instant::now();
        let locals = self.solve_locals(&v)?;
        stats.time_inner = t.elapsed().as_secs_f64();
        let total: usize = locals.iter().map(|s| s.iterations).sum();
        stats.avg_inner_iterations = total as f64 / locals.len().max(1) as f64;
        stats.max_inner_iterations = locals.iter().map(|s| s.iterations).max().unwrap_or(0);
        stats.inner_converged = locals.iter().all(|s| s.converged);
        self.add_locals(&locals, &mut y);
        self.locals = locals;
        self.coarse_state = coarse_state;
        self.state_u = u.to_vec();
        Ok((y, stats))
    }

    fn apply_locals(&self, x: &[f64]) -> Vec<f64> {
        let parts: Vec<Vec<f64>> = self
            .spaces
            .par_iter()
            .zip(self.locals.par_iter())
            .map(|(s, st)| {
                let ni = s.n_inner;
                let xg: Vec<f64> = s.global_dofs[ni..].iter().map(|&d| x[d]).collect();
                let mut b = st.ghost_coupling.mul_vec(&xg);
                st.factor.solve_in_place(&mut b);
                for (v, &d) in b.iter_mut().zip(s.inner_dofs()) {
                    *v += x[d];
                }
                b
            })
            .collect();
        let mut y = vec![0.0; x.len()];
        for (s, b) in self.spaces.iter().zip(&parts) {
            for (k, &d) in s.inner_dofs().iter().enumerate() {
                y[d] += self.local_weight(d) * b[k];
            }
        }
        y
    }

    fn apply_coarse(&self, x: &[f64]) -> Vec<f64> {
        let (cs, _) = self.coarse.as_ref().expect("coarse level present");
        let st = self.coarse_state.as_ref().expect("coarse state present");
        let mut b = st.restricted_tangent.mul_vec(x);
        st.factor.solve_in_place(&mut b);
        cs.p0.mul_vec(&b)
    }

    /// Tangent of the preconditioned residual at `u` applied to `x`. `u` must be the
    /// state of the latest [`evaluate`](Self::evaluate) call.
    pub fn apply_tangent(&self, u: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if self.state_u.is_empty() || self.state_u != u {
            return Err(Error::StaleState);
        }
        Ok(self.apply_tangent_unchecked(x))
    }

    pub(crate) fn apply_tangent_unchecked(&self, x: &[f64]) -> Vec<f64> {
        match self.variant.levels {
            Levels::One => self.apply_locals(x),
            Levels::Additive => {
                let mut y = self.apply_coarse(x);
                axpy(1.0, &self.apply_locals(x), &mut y);
                y
            }
            Levels::Hybrid => {
                let q = self.apply_coarse(x);
                let z: Vec<f64> = x.iter().zip(&q).map(|(a, b)| a - b).collect();
                let mut y = self.apply_locals(&z);
                axpy(1.0, &q, &mut y);
                y
            }
        }
    }

    /// Whether an evaluation has been stored.
    pub fn has_state(&self) -> bool {
        !self.state_u.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{dual_graph, extend_overlap, ghost_layer, partition_structured};
    use crate::sparse::norm_inf;

    fn setup(nx: usize, p: usize, k: usize, spec: crate::assembly::ProblemSpec) -> (Model, Decomposition) {
        let m = Model::structured(spec, nx, nx).unwrap();
        let d = partition_structured(&m.mesh, p, p).unwrap();
        let d = ghost_layer(extend_overlap(d, &dual_graph(&m.mesh), k), &m.mesh);
        (m, d)
    }

    const TIGHT: NewtonTolerances = NewtonTolerances { rel_tol: 1e-12, abs_tol: 1e-14, max_iter: 20 };

    #[test]
    fn backtracking_accepts_full_step_on_decrease() {
        let mut calls = 0;
        let out = backtrack(&LineSearch::default(), 1.0, |s| {
            calls += 1;
            Ok(1.0 - 0.5 * s)
        })
        .unwrap();
        assert_eq!((out.step, out.reductions, calls), (1.0, 0, 1));
        let out = backtrack(&LineSearch::default(), 1.0, |s| Ok(if s > 0.3 { 2.0 } else { 0.5 })).unwrap();
        assert_eq!(out.step, 0.25);
        let out = backtrack(&LineSearch::default(), 1.0, |s| {
            if s > 0.1 { Err(Error::NonPhysicalState { element: 0, det: -1.0 }) } else { Ok(0.9) }
        })
        .unwrap();
        assert_eq!((out.step, out.norm), (0.0625, 0.9));
    }

    #[test]
    fn backtracking_escapes_after_seven_dampings() {
        let out = backtrack(&LineSearch::default(), 1.0, |_| Ok(2.0)).unwrap();
        assert!(out.escaped);
        assert_eq!(out.reductions, 7);
        assert_eq!(out.step, 0.5f64.powi(7));
    }

    #[test]
    fn backtracking_on_scalar_cubic() {
        // Newton from 0.6 on x^3 - x overshoots; brute force over the damping sequence.
        let f = |x: f64| x * x * x - x;
        let x = 0.6;
        let d = f(x) / (3.0 * x * x - 1.0);
        let ls = LineSearch::default();
        let out = backtrack(&ls, f(x).abs(), |s| Ok(f(x - s * d).abs())).unwrap();
        let expected = (0..8)
            .map(|k| 0.5f64.powi(k))
            .find(|&s| f(x - s * d).abs() <= (1.0 - ls.t * s * (1.0 - ls.eta_bar)) * f(x).abs())
            .unwrap();
        assert!(expected < 1.0);
        assert_eq!(out.step, expected);
        assert!(!out.escaped);
    }

    #[test]
    fn zero_correction_at_local_root() {
        let (m, d) = setup(6, 2, 1, crate::assembly::ProblemSpec::linear_diffusion(1.0, 0.0));
        let s = m.local_space(&d.overlap[0], &d.ghost[0]).unwrap();
        let st = local_correction(&m, &s, 0, &m.initial_guess(), &TIGHT, TangentMode::Exact).unwrap();
        assert_eq!(st.iterations, 0);
        assert!(st.correction.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_local_correction_is_a_subdomain_solve() {
        let (m, d) = setup(8, 2, 1, crate::assembly::ProblemSpec::linear_diffusion(1.5, 3.0));
        let u: Vec<f64> = (0..m.ndofs())
            .map(|k| if m.dofs.dirichlet[k] { 0.0 } else { (k as f64 * 0.37).sin() })
            .collect();
        let (f, a) = m.residual_and_tangent(&u).unwrap();
        for i in 0..4 {
            let s = m.local_space(&d.overlap[i], &d.ghost[i]).unwrap();
            let st = local_correction(&m, &s, i, &u, &TIGHT, TangentMode::Exact).unwrap();
            assert_eq!(st.iterations, 1);
            let idx = s.inner_dofs().to_vec();
            let ai = a.submatrix(&idx, &idx);
            let fi: Vec<f64> = idx.iter().map(|&k| f[k]).collect();
            let t = Factorization::new(&ai).unwrap().solve(&fi);
            let diff: Vec<f64> = t.iter().zip(&st.correction).map(|(a, b)| a - b).collect();
            assert!(norm_inf(&diff) <= 1e-12 * norm_inf(&t).max(1.0));
        }
    }

    #[test]
    fn raspen_weights_form_a_partition_of_unity() {
        let (m, d) = setup(8, 2, 2, crate::assembly::ProblemSpec::diffusion(1.0, 1.0));
        let op = NonlinearSchwarz::new(&m, &d, None, VariantConfig::raspen(), TIGHT, TIGHT).unwrap();
        let x: Vec<f64> = (0..m.ndofs()).map(|k| (k as f64).cos()).collect();
        let y = op.recombine_restrictions(&x);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn stale_state_is_rejected() {
        let (m, d) = setup(6, 2, 1, crate::assembly::ProblemSpec::diffusion(1.0, 1.0));
        let mut op = NonlinearSchwarz::new(&m, &d, None, VariantConfig::aspen(), TIGHT, TIGHT).unwrap();
        let u = m.initial_guess();
        assert!(matches!(op.apply_tangent(&u, &u), Err(Error::StaleState)));
        op.evaluate(&u).unwrap();
        let zero = vec![0.0; m.ndofs()];
        assert_eq!(op.apply_tangent(&u, &zero).unwrap(), zero);
        let mut w = u.clone();
        w[10] += 1.0;
        assert!(matches!(op.apply_tangent(&w, &zero), Err(Error::StaleState)));
    }

    #[test]
    fn hybrid_requires_coarse_space() {
        let (m, d) = setup(6, 2, 1, crate::assembly::ProblemSpec::diffusion(1.0, 1.0));
        assert!(NonlinearSchwarz::new(&m, &d, None, VariantConfig::hybrid(), TIGHT, TIGHT).is_err());
    }

    #[test]
    fn aspin_and_aspen_agree_at_zero_corrections() {
        let (m, d) = setup(6, 2, 1, crate::assembly::ProblemSpec::linear_diffusion(1.0, 0.0));
        let u = m.initial_guess();
        let mut a = NonlinearSchwarz::new(&m, &d, None, VariantConfig::aspen(), TIGHT, TIGHT).unwrap();
        let mut b = NonlinearSchwarz::new(&m, &d, None, VariantConfig::aspin(), TIGHT, TIGHT).unwrap();
        a.evaluate(&u).unwrap();
        b.evaluate(&u).unwrap();
        let x: Vec<f64> = (0..m.ndofs()).map(|k| (k as f64 * 1.3).sin()).collect();
        assert_eq!(a.apply_tangent(&u, &x).unwrap(), b.apply_tangent(&u, &x).unwrap());
    }
}
