//! Outer Newton drivers: nonlinear Schwarz (ASPEN/RASPEN/additive/hybrid), the
//! Newton-Krylov-Schwarz baseline and plain Newton with a direct solver.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::Model;
use crate::coarse::{build_coarse_space, CoarseConfig, CoarseSpace};
use crate::error::{Error, Result};
use crate::mesh::{dual_graph, extend_overlap, extend_overlap_nodal, ghost_layer, partition_structured, Decomposition};
use crate::schwarz::{backtrack, EvaluationStats, LineSearch, NewtonTolerances, NonlinearSchwarz, VariantConfig};
use crate::sparse::{axpy, gmres, norm2, CsrMatrix, Factorization, GmresConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub outer: NewtonTolerances,
    pub inner: NewtonTolerances,
    pub coarse: NewtonTolerances,
    pub gmres: GmresConfig,
    pub line_search: LineSearch,
    /// Dual-graph overlap layers for nonlinear Schwarz.
    pub overlap: usize,
    /// Nodal-graph overlap layers for the NKS baseline.
    pub nks_overlap: usize,
    pub variant: VariantConfig,
    pub coarse_space: Option<CoarseConfig>,
    /// Backtracking inside the coarse Newton solve of two-level variants.
    #[serde(default = "enabled")]
    pub coarse_backtracking: bool,
}

fn enabled() -> bool {
    true
}

impl SolverConfig {
    /// Cavity defaults.
    pub fn cavity() -> Self {
        SolverConfig {
            outer: NewtonTolerances { rel_tol: 1e-6, abs_tol: 1e-6, max_iter: 10 },
            inner: NewtonTolerances { rel_tol: 1e-3, abs_tol: 1e-14, max_iter: 10 },
            coarse: NewtonTolerances { rel_tol: 1e-3, abs_tol: 1e-14, max_iter: 10 },
            gmres: GmresConfig { rel_tol: 1e-4, max_iter: 1000, restart: 500 },
            line_search: LineSearch::default(),
            overlap: 5,
            nks_overlap: 2,
            variant: VariantConfig::hybrid(),
            coarse_space: Some(CoarseConfig { kind: crate::coarse::CoarseKind::Rgdsw, modified: true }),
            coarse_backtracking: true,
        }
    }

    /// Beam defaults: no line search, no GMRES restart.
    pub fn beam() -> Self {
        SolverConfig {
            outer: NewtonTolerances { rel_tol: 1e-4, abs_tol: 1e-300, max_iter: 10 },
            inner: NewtonTolerances { rel_tol: 1e-3, abs_tol: 1e-9, max_iter: 15 },
            coarse: NewtonTolerances { rel_tol: 1e-3, abs_tol: 1e-9, max_iter: 15 },
            gmres: GmresConfig { rel_tol: 1e-6, max_iter: 100, restart: 100 },
            line_search: LineSearch::disabled(),
            overlap: 10,
            nks_overlap: 5,
            variant: VariantConfig::hybrid(),
            coarse_space: Some(CoarseConfig { kind: crate::coarse::CoarseKind::Msfem, modified: true }),
            coarse_backtracking: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("outer", &self.outer), ("inner", &self.inner), ("coarse", &self.coarse)] {
            if !(t.rel_tol > 0.0 && t.abs_tol > 0.0) {
                return Err(Error::Config(format!("{name} tolerances must be positive")));
            }
        }
        let g = &self.gmres;
        if !(g.rel_tol > 0.0) || g.max_iter == 0 || g.restart == 0 {
            return Err(Error::Config("gmres settings must be positive".into()));
        }
        self.line_search.validate()?;
        if self.variant.needs_coarse() && self.coarse_space.is_none() {
            return Err(Error::Config(format!("variant {} needs a coarse space", self.variant.label())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    GmresFailure,
    LineSearchStagnation,
    NonPhysicalState,
    SingularMatrix,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `‖F(u_k)‖ / ‖F(u_0)‖`.
    pub rel_residual: f64,
    pub abs_residual: f64,
    /// Preconditioned residual norm that produced this step, relative to the first one
    /// (nonlinear Schwarz only).
    pub precond_rel_residual: Option<f64>,
    pub gmres_iterations: usize,
    pub avg_inner_iterations: f64,
    pub coarse_iterations: usize,
    pub line_search_steps: usize,
    pub time_inner: f64,
    pub time_coarse: f64,
    pub time_gmres: f64,
    pub time_other: f64,
    pub precond_residual: Option<f64>,
    pub step: f64,
    pub line_search_escaped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: String,
    pub converged: bool,
    pub reason: StopReason,
    pub message: Option<String>,
    pub initial_residual: f64,
    pub final_residual: f64,
    /// Entry 0 is the initial state; entry `k` describes outer iteration `k`.
    pub history: Vec<IterationRecord>,
    pub wall_time: f64,
}

impl SolveReport {
    pub fn outer_iterations(&self) -> usize {
        self.history.len().saturating_sub(1)
    }

    pub fn total_gmres_iterations(&self) -> usize {
        self.history.iter().map(|r| r.gmres_iterations).sum()
    }

    pub fn total_coarse_iterations(&self) -> usize {
        self.history.iter().map(|r| r.coarse_iterations).sum()
    }

    /// Sum over outer iterations of the subdomain-averaged inner iteration counts.
    pub fn total_avg_inner_iterations(&self) -> f64 {
        self.history.iter().map(|r| r.avg_inner_iterations).sum()
    }

    pub fn final_rel_residual(&self) -> f64 {
        self.history.last().map_or(1.0, |r| r.rel_residual)
    }
}

/// Convergence history bookkeeping shared by the drivers.
struct Monitor {
    method: String,
    tol: NewtonTolerances,
    start: Instant,
    f0: f64,
    history: Vec<IterationRecord>,
}

impl Monitor {
    fn new(method: &str, tol: NewtonTolerances, f0: f64) -> Self {
        let history = vec![IterationRecord { abs_residual: f0, rel_residual: 1.0, step: 0.0, ..Default::default() }];
        Monitor { method: method.to_string(), tol, start: Instant::now(), f0, history }
    }

    fn converged(&self, norm: f64) -> bool {
        norm <= self.tol.abs_tol || norm <= self.tol.rel_tol * self.f0
    }

    fn push(&mut self, mut rec: IterationRecord, norm: f64, elapsed: f64) {
        rec.iteration = self.history.len();
        rec.abs_residual = norm;
        rec.rel_residual = if self.f0 > 0.0 { norm / self.f0 } else { 0.0 };
        rec.time_other = (elapsed - rec.time_inner - rec.time_coarse - rec.time_gmres).max(0.0);
        log::info!(
            "{} it {}: |F| = {:.3e} (rel {:.3e}), gmres {}, step {}",
            self.method,
            rec.iteration,
            norm,
            rec.rel_residual,
            rec.gmres_iterations,
            rec.step
        );
        self.history.push(rec);
    }

    fn finish(self, reason: StopReason, message: Option<String>) -> SolveReport {
        let final_residual = self.history.last().map_or(self.f0, |r| r.abs_residual);
        SolveReport {
            method: self.method,
            converged: reason == StopReason::Converged,
            reason,
            message,
            initial_residual: self.f0,
            final_residual,
            history: self.history,
            wall_time: self.start.elapsed().as_secs_f64(),
        }
    }
}

/// Map recoverable numerical failures to a stop reason; other errors propagate.
fn failure(e: Error) -> Result<(StopReason, String)> {
    match e {
        Error::NonPhysicalState { .. } => Ok((StopReason::NonPhysicalState, e.to_string())),
        Error::SingularMatrix { .. } | Error::SingularSubdomain { .. } => {
            Ok((StopReason::SingularMatrix, e.to_string()))
        }
        other => Err(other),
    }
}

/// Damped update `u <- u - s δ` with the configured line search on `‖F‖`.
/// An unusable trial state is reported as the stop reason.
fn line_search_update(
    model: &Model,
    ls: &LineSearch,
    u: &mut [f64],
    delta: &[f64],
    norm: f64,
    rec: &mut IterationRecord,
) -> Result<std::result::Result<f64, StopReason>> {
    let mut trial = u.to_vec();
    let out = backtrack(ls, norm, |s| {
        trial.copy_from_slice(u);
        axpy(-s, delta, &mut trial);
        Ok(norm2(&model.residual(&trial)?))
    })?;
    rec.step = out.step;
    rec.line_search_steps = out.reductions;
    rec.line_search_escaped = out.escaped;
    axpy(-out.step, delta, u);
    if out.norm.is_finite() {
        Ok(Ok(out.norm))
    } else if ls.enabled {
        Ok(Err(StopReason::LineSearchStagnation))
    } else {
        Ok(Err(StopReason::NonPhysicalState))
    }
}

/// Newton on the nonlinear Schwarz preconditioned system, GMRES on its tangent without
/// further preconditioning. Convergence is monitored on the unpreconditioned `‖F‖`; the
/// line search backtracks on the preconditioned residual, the system being solved.
pub fn solve_nonlinear_schwarz(
    model: &Model,
    decomp: &Decomposition,
    coarse: Option<&CoarseSpace>,
    cfg: &SolverConfig,
    u0: Option<Vec<f64>>,
) -> Result<(Vec<f64>, SolveReport)> {
    cfg.validate()?;
    let mut op = NonlinearSchwarz::new(model, decomp, coarse, cfg.variant, cfg.inner, cfg.coarse)?;
    op.coarse_search.enabled = cfg.coarse_backtracking;
    let mut u = u0.unwrap_or_else(|| model.initial_guess());
    let mut norm = norm2(&model.residual(&u)?);
    let mut mon = Monitor::new(cfg.variant.label(), cfg.outer, norm);
    let mut g0: Option<f64> = None;
    // preconditioned residual at the current iterate, when already evaluated
    let mut current: Option<(Vec<f64>, EvaluationStats)> = None;
    while !mon.converged(norm) {
        if mon.history.len() > cfg.outer.max_iter {
            return Ok((u, mon.finish(StopReason::MaxIterations, None)));
        }
        let t = Instant::now();
        let mut rec = IterationRecord::default();
        let (g, stats) = match current.take() {
            Some(v) => v,
            None => match op.evaluate(&u) {
                Ok((g, st)) => {
                    rec.time_inner += st.time_inner;
                    rec.time_coarse += st.time_coarse;
                    (g, st)
                }
                Err(e) => {
                    let (reason, msg) = failure(e)?;
                    return Ok((u, mon.finish(reason, Some(msg))));
                }
            },
        };
        rec.avg_inner_iterations = stats.avg_inner_iterations;
        rec.coarse_iterations = stats.coarse_iterations;
        let gn = norm2(&g);
        let g0v = *g0.get_or_insert(gn);
        rec.precond_residual = Some(gn);
        rec.precond_rel_residual = Some(if g0v > 0.0 { gn / g0v } else { 0.0 });
        let tg = Instant::now();
        let sol = gmres(
            |x: &[f64], y: &mut [f64]| {
                y.copy_from_slice(&op.apply_tangent(&u, x)?);
                Ok(())
            },
            None::<fn(&[f64], &mut [f64]) -> Result<()>>,
            &g,
            &cfg.gmres,
        )?;
        rec.time_gmres = tg.elapsed().as_secs_f64();
        rec.gmres_iterations = sol.iterations;
        if !sol.converged {
            let msg = format!("GMRES stopped at relative residual {:.3e}", sol.rel_residual);
            mon.push(rec, norm, t.elapsed().as_secs_f64());
            return Ok((u, mon.finish(StopReason::GmresFailure, Some(msg))));
        }
        if cfg.line_search.enabled {
            let mut trial = u.clone();
            let mut last: Option<(Vec<f64>, EvaluationStats)> = None;
            let (mut ti, mut tc) = (0.0, 0.0);
            let out = backtrack(&cfg.line_search, gn, |s| {
                trial.copy_from_slice(&u);
                axpy(-s, &sol.x, &mut trial);
                last = None;
                let (gs, st) = op.evaluate(&trial)?;
                ti += st.time_inner;
                tc += st.time_coarse;
                let n = norm2(&gs);
                last = Some((gs, st));
                Ok(n)
            })?;
            rec.time_inner += ti;
            rec.time_coarse += tc;
            rec.step = out.step;
            rec.line_search_steps = out.reductions;
            rec.line_search_escaped = out.escaped;
            axpy(-out.step, &sol.x, &mut u);
            current = last;
        } else {
            rec.step = 1.0;
            axpy(-1.0, &sol.x, &mut u);
        }
        match model.residual(&u) {
            Ok(f) => norm = norm2(&f),
            Err(e) => {
                let (reason, msg) = failure(e)?;
                mon.push(rec, f64::INFINITY, t.elapsed().as_secs_f64());
                return Ok((u, mon.finish(reason, Some(msg))));
            }
        }
        mon.push(rec, norm, t.elapsed().as_secs_f64());
    }
    Ok((u, mon.finish(StopReason::Converged, None)))
}

/// Linear additive two-level Schwarz preconditioner
/// `P_0 (R_0 A P_0)⁻¹ R_0 + Σ P_i (R_i A P_i)⁻¹ R_i`.
pub struct LinearSchwarz<'a> {
    dofs: &'a [Vec<usize>],
    factors: Vec<Factorization>,
    coarse: Option<(&'a CsrMatrix, &'a CsrMatrix, Factorization)>,
}

impl<'a> LinearSchwarz<'a> {
    pub fn new(
        a: &CsrMatrix,
        dofs: &'a [Vec<usize>],
        coarse: Option<(&'a CsrMatrix, &'a CsrMatrix)>,
    ) -> Result<Self> {
        let factors = dofs
            .par_iter()
            .enumerate()
            .map(|(i, idx)| {
                Factorization::new(&a.submatrix(idx, idx)).map_err(|e| match e {
                    Error::SingularMatrix { pivot } => Error::SingularSubdomain { subdomain: i, pivot },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let coarse = match coarse {
            Some((p0, p0t)) => {
                let a0 = p0t.matmul(&a.matmul(p0)?)?;
                Some((p0, p0t, Factorization::new(&a0)?))
            }
            None => None,
        };
        Ok(LinearSchwarz { dofs, factors, coarse })
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let parts: Vec<Vec<f64>> = self
            .dofs
            .par_iter()
            .zip(self.factors.par_iter())
            .map(|(idx, f)| {
                let mut b: Vec<f64> = idx.iter().map(|&d| x[d]).collect();
                f.solve_in_place(&mut b);
                b
            })
            .collect();
        y.iter_mut().for_each(|v| *v = 0.0);
        if let Some((p0, p0t, f)) = &self.coarse {
            let mut b = p0t.mul_vec(x);
            f.solve_in_place(&mut b);
            p0.matvec(&b, y);
        }
        for (idx, b) in self.dofs.iter().zip(&parts) {
            for (&d, v) in idx.iter().zip(b) {
                y[d] += v;
            }
        }
    }
}

/// Sorted dofs of the elements of each overlapping subdomain.
pub fn subdomain_dofs(model: &Model, decomp: &Decomposition) -> Vec<Vec<usize>> {
    decomp
        .overlap
        .iter()
        .map(|elems| {
            let mut d: Vec<usize> = elems
                .iter()
                .flat_map(|&e| model.dofs.element_dofs(e).iter().map(|&k| k as usize))
                .collect();
            d.sort_unstable();
            d.dedup();
            d
        })
        .collect()
}

/// Newton-Krylov-Schwarz: Newton on `F(u) = 0`, each step solved by GMRES left
/// preconditioned with the linear additive two-level Schwarz operator.
pub fn solve_nks(
    model: &Model,
    decomp: &Decomposition,
    coarse: Option<&CoarseSpace>,
    cfg: &SolverConfig,
    u0: Option<Vec<f64>>,
) -> Result<(Vec<f64>, SolveReport)> {
    cfg.validate()?;
    let dofs = subdomain_dofs(model, decomp);
    let p0t = coarse.map(|c| c.p0.transpose());
    let cpair = coarse.zip(p0t.as_ref()).map(|(c, t)| (&c.p0, t));
    let mut u = u0.unwrap_or_else(|| model.initial_guess());
    let (mut f, mut a) = model.residual_and_tangent(&u)?;
    let mut norm = norm2(&f);
    let mut mon = Monitor::new("nks", cfg.outer, norm);
    while !mon.converged(norm) {
        if mon.history.len() > cfg.outer.max_iter {
            return Ok((u, mon.finish(StopReason::MaxIterations, None)));
        }
        let t = Instant::now();
        let mut rec = IterationRecord::default();
        let prec = match LinearSchwarz::new(&a, &dofs, cpair) {
            Ok(p) => p,
            Err(e) => {
                let (reason, msg) = failure(e)?;
                return Ok((u, mon.finish(reason, Some(msg))));
            }
        };
        rec.time_inner = t.elapsed().as_secs_f64();
        let tg = Instant::now();
        let sol = gmres(
            |x: &[f64], y: &mut [f64]| {
                a.matvec(x, y);
                Ok(())
            },
            Some(|x: &[f64], y: &mut [f64]| {
                prec.apply(x, y);
                Ok(())
            }),
            &f,
            &cfg.gmres,
        )?;
        rec.time_gmres = tg.elapsed().as_secs_f64();
        rec.gmres_iterations = sol.iterations;
        if !sol.converged {
            let msg = format!("GMRES stopped at relative residual {:.3e}", sol.rel_residual);
            mon.push(rec, norm, t.elapsed().as_secs_f64());
            return Ok((u, mon.finish(StopReason::GmresFailure, Some(msg))));
        }
        if let Err(reason) = line_search_update(model, &cfg.line_search, &mut u, &sol.x, norm, &mut rec)? {
            mon.push(rec, f64::INFINITY, t.elapsed().as_secs_f64());
            return Ok((u, mon.finish(reason, None)));
        }
        match model.residual_and_tangent(&u) {
            Ok((fi, ai)) => {
                f = fi;
                a = ai;
            }
            Err(e) => {
                let (reason, msg) = failure(e)?;
                mon.push(rec, f64::INFINITY, t.elapsed().as_secs_f64());
                return Ok((u, mon.finish(reason, Some(msg))));
            }
        }
        norm = norm2(&f);
        mon.push(rec, norm, t.elapsed().as_secs_f64());
    }
    Ok((u, mon.finish(StopReason::Converged, None)))
}

/// Plain Newton with a sparse direct solver.
pub fn solve_newton(model: &Model, cfg: &SolverConfig, u0: Option<Vec<f64>>) -> Result<(Vec<f64>, SolveReport)> {
    cfg.line_search.validate()?;
    let mut u = u0.unwrap_or_else(|| model.initial_guess());
    let (mut f, mut a) = model.residual_and_tangent(&u)?;
    let mut norm = norm2(&f);
    let mut mon = Monitor::new("newton", cfg.outer, norm);
    let mut factor: Option<Factorization> = None;
    while !mon.converged(norm) {
        if mon.history.len() > cfg.outer.max_iter {
            return Ok((u, mon.finish(StopReason::MaxIterations, None)));
        }
        let t = Instant::now();
        let mut rec = IterationRecord::default();
        let fact = match factor.as_ref().map_or_else(|| Factorization::new(&a), |p| p.refactor(&a)) {
            Ok(x) => x,
            Err(e) => {
                let (reason, msg) = failure(e)?;
                return Ok((u, mon.finish(reason, Some(msg))));
            }
        };
        let delta = fact.solve(&f);
        factor = Some(fact);
        rec.time_gmres = t.elapsed().as_secs_f64();
        if let Err(reason) = line_search_update(model, &cfg.line_search, &mut u, &delta, norm, &mut rec)? {
            mon.push(rec, f64::INFINITY, t.elapsed().as_secs_f64());
            return Ok((u, mon.finish(reason, None)));
        }
        match model.residual_and_tangent(&u) {
            Ok((fi, ai)) => {
                f = fi;
                a = ai;
            }
            Err(e) => {
                let (reason, msg) = failure(e)?;
                mon.push(rec, f64::INFINITY, t.elapsed().as_secs_f64());
                return Ok((u, mon.finish(reason, Some(msg))));
            }
        }
        norm = norm2(&f);
        mon.push(rec, norm, t.elapsed().as_secs_f64());
    }
    Ok((u, mon.finish(StopReason::Converged, None)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Nonlinear Schwarz with the configured variant.
    Schwarz,
    Nks,
    Newton,
}

impl Method {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "schwarz" => Some(Method::Schwarz),
            "nks" => Some(Method::Nks),
            "newton" => Some(Method::Newton),
            _ => None,
        }
    }
}

/// Decomposition with overlap and ghost layer for a method on a `px x py` subdomain grid.
pub fn decompose(model: &Model, px: usize, py: usize, cfg: &SolverConfig, method: Method) -> Result<Decomposition> {
    let d = partition_structured(&model.mesh, px, py)?;
    let d = match method {
        Method::Nks => extend_overlap_nodal(d, &model.mesh, cfg.nks_overlap),
        _ => extend_overlap(d, &dual_graph(&model.mesh), cfg.overlap),
    };
    Ok(ghost_layer(d, &model.mesh))
}

/// Coarse space for `cfg` built from the tangent at the initial iterate.
pub fn initial_coarse_space(model: &Model, decomp: &Decomposition, cfg: &SolverConfig) -> Result<Option<CoarseSpace>> {
    match cfg.coarse_space {
        Some(cc) => {
            let a = model.tangent(&model.initial_guess())?;
            Ok(Some(build_coarse_space(model, decomp, &a, cc)?))
        }
        None => Ok(None),
    }
}

/// Decompose, build the coarse space and run `method`.
pub fn solve(model: &Model, px: usize, py: usize, cfg: &SolverConfig, method: Method) -> Result<(Vec<f64>, SolveReport)> {
    match method {
        Method::Newton => solve_newton(model, cfg, None),
        Method::Nks => {
            let d = decompose(model, px, py, cfg, method)?;
            let cs = initial_coarse_space(model, &d, cfg)?;
            solve_nks(model, &d, cs.as_ref(), cfg, None)
        }
        Method::Schwarz => {
            let d = decompose(model, px, py, cfg, method)?;
            let cs = if cfg.variant.needs_coarse() { initial_coarse_space(model, &d, cfg)? } else { None };
            solve_nonlinear_schwarz(model, &d, cs.as_ref(), cfg, None)
        }
    }
}
