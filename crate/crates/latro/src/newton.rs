//! Load-incremented Newton–Raphson driver with Armijo backtracking.
//!
//! Both solver paths share the outer loop: the residual is always assembled
//! at full quadrature, so the reduced-basis path is a quasi-Newton method
//! (approximate tangent, exact residual) converging to the same equilibrium
//! as the direct path. Imposed displacements enter as ramped inhomogeneous
//! Dirichlet values; on a failed line search the current load increment is
//! halved once before giving up.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assembly::{
    assemble_external, full_rule, gather_cell, global_residual, global_tangent_triplets,
    local_tangent, local_tangent_unmasked, reduced_rule, snapshot, AssemblyError,
    DirichletElim, Discretization, ExternalLoads, LocalTangent, QuadratureRule,
};
use crate::fetidp::{
    build_preconditioner, solve_direct, solve_rb, CellOp, FetidpError, MultiplierState,
    SaddleSystem, SolveStats, SolverPath, SolverSettings, TornLayout,
};
use crate::hyperelastic::MaterialParams;
use crate::lattice::{enrich_primal, partition_dofs, DofPartition, LatticeError, LatticeModel, PrimalLevel};
use crate::rom::{build_reduced_basis, RomError};

#[derive(Debug, thiserror::Error)]
pub enum NewtonError {
    #[error("Newton iteration did not converge within {max_iter} iterations (increment {increment}, relative residual {rel_residual:e})")]
    NonConvergence { increment: usize, max_iter: usize, rel_residual: f64, trace: Box<NewtonTrace> },
    #[error("line search failed at increment {increment}, iteration {iteration}")]
    StepFailure { increment: usize, iteration: usize, trace: Box<NewtonTrace> },
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Solver(#[from] FetidpError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Rom(#[from] RomError),
}

/// Load stepping: scale factors strictly increasing to one.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoadProgram {
    pub factors: Vec<f64>,
}

impl LoadProgram {
    /// Uniform ramp `k/n`, `k = 1..=n`.
    pub fn uniform(n_increments: usize) -> Self {
        assert!(n_increments >= 1);
        Self {
            factors: (1..=n_increments)
                .map(|k| k as f64 / n_increments as f64)
                .collect(),
        }
    }

    pub fn validate(&self) -> bool {
        !self.factors.is_empty()
            && self.factors.windows(2).all(|w| w[0] < w[1])
            && (self.factors.last().copied().unwrap() - 1.0).abs() < 1e-12
            && self.factors[0] > 0.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NewtonSettings {
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Armijo reduction factor β
    pub beta: f64,
    /// Armijo sufficient-decrease constant c
    pub c: f64,
    pub max_backtracks: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self { rel_tol: 1e-6, max_iter: 50, beta: 0.5, c: 1e-4, max_backtracks: 20 }
    }
}

/// One Newton iteration record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub increment: usize,
    pub iteration: usize,
    pub residual_norm: f64,
    pub rel_residual: f64,
    pub step_length: f64,
    pub n_r: Option<usize>,
    pub principal_cells: Option<Vec<usize>>,
    pub greedy_certificate: Option<f64>,
    pub solver: Option<SolveStats>,
    pub memory_proxy_bytes: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IncrementRecord {
    pub factor: f64,
    pub converged: bool,
    pub iterations: usize,
    pub initial_residual: f64,
    pub final_rel_residual: f64,
}

/// Full trace of one run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NewtonTrace {
    pub path: String,
    pub increments: Vec<IncrementRecord>,
    pub iterations: Vec<IterationRecord>,
    pub total_iterations: usize,
    /// (increment, iteration, new primal level)
    pub enrichment_events: Vec<(usize, usize, usize)>,
    /// load factors inserted by increment halving
    pub halvings: Vec<f64>,
    pub fallback_direct: bool,
    /// iterations whose saddle solve stalled and fell back to the direct
    /// factorization, as (increment, iteration)
    pub rb_solve_fallbacks: Vec<(usize, usize)>,
    pub peak_memory_proxy_bytes: usize,
    pub assembly_ms: f64,
    pub solve_ms: f64,
}

pub struct NewtonOutcome {
    pub u: Vec<f64>,
    pub trace: NewtonTrace,
    /// converged state after each load increment, as (factor, u)
    pub increment_states: Vec<(f64, Vec<f64>)>,
}

/// Armijo backtracking: the smallest `m ≥ 0` with
/// `‖r(u + βᵐ Δu)‖₂ ≤ (1 − c βᵐ) ‖r(u)‖₂`.
///
/// `eval` returns the residual norm and a payload at a trial point, or
/// `None` when the trial state is invalid (inverted element); invalid
/// trials count as condition failures and backtracking continues.
pub fn line_search<T>(
    u: &[f64],
    delta_u: &[f64],
    r0_norm: f64,
    mut eval: impl FnMut(&[f64]) -> Option<(f64, T)>,
    settings: &NewtonSettings,
) -> Option<(f64, f64, T)> {
    assert!(r0_norm > 0.0, "line search requires a nonzero residual");
    let mut alpha = 1.0;
    for _ in 0..=settings.max_backtracks {
        let trial: Vec<f64> = u.iter().zip(delta_u).map(|(a, b)| a + alpha * b).collect();
        if let Some((norm, payload)) = eval(&trial) {
            if norm <= (1.0 - settings.c * alpha) * r0_norm {
                return Some((alpha, norm, payload));
            }
        }
        alpha *= settings.beta;
    }
    None
}

/// Reusable per-model assembly state.
pub struct Workspace {
    pub disc: Discretization,
    pub rule: QuadratureRule,
    pub red_rule: QuadratureRule,
    pub ext: ExternalLoads,
}

impl Workspace {
    pub fn new(model: &LatticeModel, solver: &SolverSettings) -> Result<Self, NewtonError> {
        let disc = Discretization::new(model);
        let rule = full_rule(model, &disc)?;
        let red_rule = reduced_rule(model, &disc, solver.reduced_points)?;
        let ext = assemble_external(model, &disc, &rule)?;
        Ok(Self { disc, rule, red_rule, ext })
    }
}

struct RbState {
    partition: DofPartition,
    layout: TornLayout,
    fallback_direct: bool,
    multipliers: Option<MultiplierState>,
}

/// Solve the load-incremented equilibrium problem.
pub fn newton_solve(
    model: &LatticeModel,
    params: &MaterialParams,
    program: &LoadProgram,
    newton: &NewtonSettings,
    solver: &SolverSettings,
) -> Result<NewtonOutcome, NewtonError> {
    assert!(program.validate(), "load factors must increase strictly to 1");
    let ws = Workspace::new(model, solver)?;
    let mut trace = NewtonTrace {
        path: match solver.path {
            SolverPath::Standard => "standard".into(),
            SolverPath::Rb => "rb".into(),
        },
        ..Default::default()
    };
    let mut u = vec![0.0; model.n_dof()];
    let mut rb_state = match solver.path {
        SolverPath::Rb => {
            let partition = partition_dofs(model, PrimalLevel(0))?;
            let layout = TornLayout::new(model, &partition);
            Some(RbState { partition, layout, fallback_direct: false, multipliers: None })
        }
        SolverPath::Standard => None,
    };

    let mut increment_states = Vec::new();
    let mut pending: Vec<f64> = program.factors.iter().rev().copied().collect();
    let mut prev_factor = 0.0;
    let mut halved_here = false;
    while let Some(factor) = pending.pop() {
        let increment = trace.increments.len();
        match run_increment(
            model, &ws, params, newton, solver, &mut u, factor, increment, &mut trace,
            &mut rb_state,
        ) {
            Ok(()) => {
                increment_states.push((factor, u.clone()));
                prev_factor = factor;
                halved_here = false;
            }
            Err(StepOutcome::Failed { iteration }) => {
                if halved_here {
                    return Err(NewtonError::StepFailure {
                        increment,
                        iteration,
                        trace: Box::new(trace),
                    });
                }
                // halve the increment once: insert the midpoint and retry
                let mid = 0.5 * (prev_factor + factor);
                trace.halvings.push(mid);
                pending.push(factor);
                pending.push(mid);
                halved_here = true;
            }
            Err(StepOutcome::NoConvergence { rel_residual }) => {
                return Err(NewtonError::NonConvergence {
                    increment,
                    max_iter: newton.max_iter,
                    rel_residual,
                    trace: Box::new(trace),
                });
            }
            Err(StepOutcome::Hard(e)) => return Err(e),
        }
    }
    if let Some(rb) = &rb_state {
        trace.fallback_direct = rb.fallback_direct;
    }
    trace.total_iterations = trace.iterations.len();
    Ok(NewtonOutcome { u, trace, increment_states })
}

enum StepOutcome {
    Failed { iteration: usize },
    NoConvergence { rel_residual: f64 },
    Hard(NewtonError),
}

impl From<NewtonError> for StepOutcome {
    fn from(e: NewtonError) -> Self {
        StepOutcome::Hard(e)
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[allow(clippy::too_many_arguments)]
fn run_increment(
    model: &LatticeModel,
    ws: &Workspace,
    params: &MaterialParams,
    newton: &NewtonSettings,
    solver: &SolverSettings,
    u: &mut [f64],
    factor: f64,
    increment: usize,
    trace: &mut NewtonTrace,
    rb_state: &mut Option<RbState>,
) -> Result<(), StepOutcome> {
    let d = model.dim();
    let _ = d;
    // ramped Dirichlet lifting
    let saved: Vec<f64> = u.to_vec();
    for (i, m) in model.dirichlet_mask().iter().enumerate() {
        if *m {
            u[i] = factor * model.dirichlet_value()[i];
        }
    }

    let with_locals = matches!(solver.path, SolverPath::Rb);
    let first = global_residual(model, &ws.disc, &ws.rule, u, params, &ws.ext, factor, with_locals);
    let (mut r, mut locals) = match first {
        Ok(v) => v,
        Err(AssemblyError::InvertedElement { .. }) => {
            // the lifting jump inverted a boundary element: distribute the
            // jump through the mesh with a tangent predictor at the last
            // valid state
            let jump: Vec<f64> = u
                .iter()
                .zip(saved.iter())
                .map(|(new, old)| new - old)
                .collect();
            u.copy_from_slice(&saved);
            match lifting_predictor(
                model, ws, params, solver, u, &jump, factor, increment, trace,
                rb_state, with_locals,
            ) {
                Ok(res) => res,
                Err(out) => {
                    u.copy_from_slice(&saved);
                    return Err(out);
                }
            }
        }
        Err(e) => return Err(NewtonError::from(e).into()),
    };
    let r0 = norm2(&r);
    let mut rec = IncrementRecord {
        factor,
        converged: false,
        iterations: 0,
        initial_residual: r0,
        final_rel_residual: 0.0,
    };
    if r0 == 0.0 {
        rec.converged = true;
        trace.increments.push(rec);
        return Ok(());
    }

    let mut r_norm = r0;
    for iteration in 0..newton.max_iter {
        let rel = r_norm / r0;
        if rel <= newton.rel_tol {
            rec.converged = true;
            rec.final_rel_residual = rel;
            trace.increments.push(rec);
            return Ok(());
        }

        let (delta_u, iter_info) = tangent_solve(
            model, ws, params, solver, u, &r, locals.as_deref(), rb_state, increment,
            iteration, trace,
        )?;

        // Armijo backtracking on the full-quadrature residual
        let search = line_search(u, &delta_u, r_norm, |trial| {
            match global_residual(model, &ws.disc, &ws.rule, trial, params, &ws.ext, factor, with_locals)
            {
                Ok((rt, lt)) => Some((norm2(&rt), (rt, lt))),
                Err(AssemblyError::InvertedElement { .. }) => None,
                Err(_) => None,
            }
        }, newton);
        let Some((alpha, new_norm, (new_r, new_locals))) = search else {
            u.copy_from_slice(&saved);
            // drop the partial increment record; the caller retries
            return Err(StepOutcome::Failed { iteration });
        };
        for (ui, di) in u.iter_mut().zip(&delta_u) {
            *ui += alpha * di;
        }
        r = new_r;
        locals = new_locals;
        r_norm = new_norm;
        rec.iterations += 1;

        trace.peak_memory_proxy_bytes = trace.peak_memory_proxy_bytes.max(iter_info.memory);
        trace.iterations.push(IterationRecord {
            increment,
            iteration,
            residual_norm: r_norm,
            rel_residual: r_norm / r0,
            step_length: alpha,
            n_r: iter_info.n_r,
            principal_cells: iter_info.principal,
            greedy_certificate: iter_info.certificate,
            solver: iter_info.stats,
            memory_proxy_bytes: iter_info.memory,
            wall_ms: 0.0,
        });
    }

    let rel = r_norm / r0;
    rec.final_rel_residual = rel;
    trace.increments.push(rec);
    Err(StepOutcome::NoConvergence { rel_residual: rel })
}

struct IterInfo {
    n_r: Option<usize>,
    principal: Option<Vec<usize>>,
    certificate: Option<f64>,
    stats: Option<SolveStats>,
    memory: usize,
}

/// Solve the tangent system `K(u) Δu = −rhs` with the configured path.
#[allow(clippy::too_many_arguments)]
fn tangent_solve(
    model: &LatticeModel,
    ws: &Workspace,
    params: &MaterialParams,
    solver: &SolverSettings,
    u: &[f64],
    rhs_global: &[f64],
    rhs_locals: Option<&[Vec<f64>]>,
    rb_state: &mut Option<RbState>,
    increment: usize,
    iteration: usize,
    trace: &mut NewtonTrace,
) -> Result<(Vec<f64>, IterInfo), StepOutcome> {
    let direct = |trace: &mut NewtonTrace| -> Result<(Vec<f64>, IterInfo), StepOutcome> {
        let t_assembly = Instant::now();
        let elim = DirichletElim::new(model);
        let tri = global_tangent_triplets(model, &ws.disc, &ws.rule, u, params, &elim)
            .map_err(NewtonError::from)?;
        trace.assembly_ms += t_assembly.elapsed().as_secs_f64() * 1e3;
        let t_solve = Instant::now();
        let rhs: Vec<f64> = elim.restrict(rhs_global).iter().map(|v| -v).collect();
        let (x, stats) = solve_direct(elim.n_free(), &tri, &rhs).map_err(NewtonError::from)?;
        trace.solve_ms += t_solve.elapsed().as_secs_f64() * 1e3;
        Ok((
            elim.expand(&x),
            IterInfo {
                n_r: None,
                principal: None,
                certificate: None,
                stats: Some(stats.clone()),
                memory: stats.memory_bytes,
            },
        ))
    };
    match solver.path {
        SolverPath::Standard => direct(trace),
        SolverPath::Rb => {
            let fallback = rb_state.as_ref().map(|rb| rb.fallback_direct).unwrap_or(true);
            if fallback {
                direct(trace)
            } else {
                let rb = rb_state.as_mut().expect("rb state exists on the rb path");
                rb_tangent_solve(
                    model,
                    ws,
                    params,
                    solver,
                    u,
                    rhs_global,
                    rhs_locals.expect("torn right-hand sides on the rb path"),
                    rb,
                    increment,
                    iteration,
                    trace,
                )
            }
        }
    }
}

/// Tangent predictor for imposed-displacement lifting: distribute the
/// Dirichlet jump through the mesh by solving `K_ff Δu_f = −K_fc jump` at
/// the last valid state, then evaluate the residual there.
#[allow(clippy::too_many_arguments)]
fn lifting_predictor(
    model: &LatticeModel,
    ws: &Workspace,
    params: &MaterialParams,
    solver: &SolverSettings,
    u: &mut [f64],
    jump: &[f64],
    factor: f64,
    increment: usize,
    trace: &mut NewtonTrace,
    rb_state: &mut Option<RbState>,
    with_locals: bool,
) -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>), StepOutcome> {
    let d = model.dim();
    let mut pseudo_global = vec![0.0; model.n_dof()];
    let mut pseudo_locals = Vec::with_capacity(model.num_cells());
    for s in 0..model.num_cells() {
        let u_s = gather_cell(model, s, u);
        let k = local_tangent_unmasked(model, &ws.disc, &ws.rule, s, &u_s, params)
            .map_err(NewtonError::from)?;
        let j_s = gather_cell(model, s, jump);
        let mut v = vec![0.0; j_s.len()];
        k.matvec_add(&j_s, &mut v);
        let map = model.assembly_map(s);
        for (a, g) in map.iter().enumerate() {
            for c in 0..d {
                if model.dirichlet_mask()[g * d + c] {
                    v[a * d + c] = 0.0;
                }
            }
        }
        for (a, g) in map.iter().enumerate() {
            for c in 0..d {
                pseudo_global[g * d + c] += v[a * d + c];
            }
        }
        pseudo_locals.push(v);
    }
    let (delta, _) = tangent_solve(
        model,
        ws,
        params,
        solver,
        u,
        &pseudo_global,
        Some(&pseudo_locals),
        rb_state,
        increment,
        0,
        trace,
    )?;
    for i in 0..u.len() {
        u[i] += jump[i] + delta[i];
    }
    match global_residual(model, &ws.disc, &ws.rule, u, params, &ws.ext, factor, with_locals) {
        Ok(v) => Ok(v),
        Err(AssemblyError::InvertedElement { .. }) => {
            Err(StepOutcome::Failed { iteration: 0 })
        }
        Err(e) => Err(NewtonError::from(e).into()),
    }
}

#[allow(clippy::too_many_arguments)]
fn rb_tangent_solve(
    model: &LatticeModel,
    ws: &Workspace,
    params: &MaterialParams,
    solver: &SolverSettings,
    u: &[f64],
    r: &[f64],
    locals: &[Vec<f64>],
    rb: &mut RbState,
    increment: usize,
    iteration: usize,
    trace: &mut NewtonTrace,
) -> Result<(Vec<f64>, IterInfo), StepOutcome> {
    let t_assembly = Instant::now();
    // snapshots under reduced quadrature, greedy selection, principal
    // tangents at full quadrature — rebuilt from scratch every iteration
    let snaps: Vec<Vec<f64>> = (0..model.num_cells())
        .map(|s| {
            let u_s = gather_cell(model, s, u);
            snapshot(model, &ws.disc, &ws.red_rule, s, &u_s, params)
        })
        .collect::<Result<_, _>>()
        .map_err(NewtonError::from)?;
    let snap_bytes: usize = snaps.iter().map(|t| t.len() * 8).sum();
    let basis = build_reduced_basis(&snaps, solver.epsilon).map_err(NewtonError::from)?;
    debug_assert!(basis.certificate <= solver.epsilon);

    let principal_tangents: Vec<LocalTangent> = basis
        .principal
        .iter()
        .map(|s| {
            let u_s = gather_cell(model, *s, u);
            local_tangent(model, &ws.disc, &ws.rule, *s, &u_s, params)
        })
        .collect::<Result<_, _>>()
        .map_err(NewtonError::from)?;
    let tangent_bytes: usize = principal_tangents.iter().map(|k| k.values.len() * 8).sum();

    trace.assembly_ms += t_assembly.elapsed().as_secs_f64() * 1e3;
    // preconditioner build with definiteness-triggered enrichment
    let t_solve = Instant::now();
    let precond = loop {
        match build_preconditioner(
            model,
            &rb.partition,
            &rb.layout,
            &basis.principal,
            &basis.alpha,
            &basis.surrogate,
            &principal_tangents,
            solver,
        ) {
            Ok(p) => break p,
            Err(FetidpError::NeedsEnrichment { .. }) => {
                match enrich_primal(model, &rb.partition) {
                    Ok(next) => {
                        trace.enrichment_events.push((increment, iteration, next.level()));
                        rb.partition = next;
                        rb.layout = TornLayout::new(model, &rb.partition);
                        rb.multipliers = None;
                    }
                    Err(LatticeError::EnrichmentExhausted) => {
                        rb.fallback_direct = true;
                        // this and all later systems go through the direct path
                        let elim = DirichletElim::new(model);
                        let tri = global_tangent_triplets(
                            model, &ws.disc, &ws.rule, u, params, &elim,
                        )
                        .map_err(NewtonError::from)?;
                        let rhs: Vec<f64> = elim.restrict(r).iter().map(|v| -v).collect();
                        let (x, stats) = solve_direct(elim.n_free(), &tri, &rhs)
                            .map_err(NewtonError::from)?;
                        return Ok((
                            elim.expand(&x),
                            IterInfo {
                                n_r: Some(basis.n_r()),
                                principal: Some(basis.principal.clone()),
                                certificate: Some(basis.certificate),
                                stats: Some(stats.clone()),
                                memory: stats.memory_bytes,
                            },
                        ));
                    }
                    Err(e) => return Err(NewtonError::from(e).into()),
                }
            }
            Err(e) => return Err(NewtonError::from(e).into()),
        }
    };

    let cell_ops: Vec<CellOp> = (0..model.num_cells())
        .map(|s| CellOp::Rb { alpha: &basis.alpha[s], principals: &principal_tangents })
        .collect();
    let saddle = SaddleSystem::new(model, &rb.partition, &rb.layout, cell_ops, locals, r);
    let (delta_u, stats) = match solve_rb(&saddle, &precond, solver, rb.multipliers.as_ref()) {
        Ok((delta_u, multipliers, stats)) => {
            rb.multipliers = Some(multipliers);
            (delta_u, stats)
        }
        Err(FetidpError::NonConvergence { .. }) => {
            // a stalled saddle solve (typically right at a buckling onset)
            // falls back to the direct factorization for this one system
            trace.rb_solve_fallbacks.push((increment, iteration));
            rb.multipliers = None;
            let elim = DirichletElim::new(model);
            let tri = global_tangent_triplets(model, &ws.disc, &ws.rule, u, params, &elim)
                .map_err(NewtonError::from)?;
            let rhs: Vec<f64> = elim.restrict(r).iter().map(|v| -v).collect();
            let (x, stats) =
                solve_direct(elim.n_free(), &tri, &rhs).map_err(NewtonError::from)?;
            (elim.expand(&x), stats)
        }
        Err(e) => return Err(NewtonError::from(e).into()),
    };
    trace.solve_ms += t_solve.elapsed().as_secs_f64() * 1e3;

    let memory = snap_bytes + tangent_bytes + stats.memory_bytes;
    Ok((
        delta_u,
        IterInfo {
            n_r: Some(basis.n_r()),
            principal: Some(basis.principal.clone()),
            certificate: Some(basis.certificate),
            stats: Some(stats),
            memory,
        },
    ))
}
