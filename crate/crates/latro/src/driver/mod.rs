//! Configuration-driven front end: parse a run config, build the lattice,
//! run the solve, and export fields and reports.
//!
//! Artifacts of a run: `displacement.vtk` (legacy ASCII unstructured grid
//! sampled per element), `displacement.json` (raw DOF vector, used by the
//! cross-path diff), `load_displacement.csv`, `residuals.csv`,
//! `report.json`, and `trace.json`. Exit codes: 0 success, 2 configuration
//! error, 3 solver non-convergence (partial artifacts kept).

mod vtk;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assembly::{global_residual_raw, Discretization};
use crate::fetidp::{SolverPath, SolverSettings};
use crate::hyperelastic::MaterialParams;
use crate::lattice::{
    build_lattice, geometry_from_json, grid_macro, uc1_cross, uc3_hole, BcSpec, FaceDirichlet,
    FaceTag, FaceTraction, LatticeModel,
};
use crate::newton::{newton_solve, LoadProgram, NewtonError, NewtonSettings, NewtonTrace};

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
    #[error("step failure: {0}")]
    StepFailure(String),
    #[error("run failed: {0}")]
    Run(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl DriverError {
    pub fn exit_code(&self) -> i32 {
        match self {
            DriverError::Config(_) => 2,
            DriverError::NonConvergence(_) | DriverError::StepFailure(_) => 3,
            _ => 1,
        }
    }
}

fn config_err<E: std::fmt::Display>(e: E) -> DriverError {
    DriverError::Config(e.to_string())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub material: MaterialConfig,
    #[serde(default)]
    pub bcs: BcsConfig,
    pub program: ProgramConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    /// built-in generator name (`uc1_cross` or `uc3_hole`) …
    #[serde(default)]
    pub generator: Option<String>,
    /// … or a geometry JSON file
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default = "one")]
    pub nx: usize,
    #[serde(default = "one")]
    pub ny: usize,
    /// spline degree of the cell discretization
    #[serde(default = "two")]
    pub p: usize,
    /// elements per direction per patch (h = 1 / n_e)
    #[serde(default = "two")]
    pub n_e: usize,
    /// physical macro extents (grid generators)
    #[serde(default = "fone")]
    pub lx: f64,
    #[serde(default = "fone")]
    pub ly: f64,
    #[serde(default = "def_frame_t")]
    pub frame_t: f64,
    #[serde(default = "def_strut_s")]
    pub strut_s: f64,
    #[serde(default = "def_hole_r")]
    pub hole_r: f64,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn fone() -> f64 {
    1.0
}
fn def_frame_t() -> f64 {
    0.2
}
fn def_strut_s() -> f64 {
    0.08
}
fn def_hole_r() -> f64 {
    0.3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    pub e: f64,
    pub nu: f64,
}

/// One face condition: clamp, per-component imposed displacement (absent
/// component = free), or traction.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceConfig {
    #[serde(default)]
    pub clamp: bool,
    #[serde(default)]
    pub ux: Option<f64>,
    #[serde(default)]
    pub uy: Option<f64>,
    #[serde(default)]
    pub traction: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcsConfig {
    #[serde(default)]
    pub left: Option<FaceConfig>,
    #[serde(default)]
    pub right: Option<FaceConfig>,
    #[serde(default)]
    pub bottom: Option<FaceConfig>,
    #[serde(default)]
    pub top: Option<FaceConfig>,
    #[serde(default)]
    pub body_force: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramConfig {
    pub increments: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "def_path")]
    pub path: String,
    #[serde(default = "def_epsilon")]
    pub epsilon: f64,
    #[serde(default = "def_outer_tol")]
    pub outer_tol: f64,
    #[serde(default = "def_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "def_max_outer")]
    pub max_outer: usize,
    #[serde(default = "def_max_inner")]
    pub max_inner: usize,
    #[serde(default = "def_reduced_points")]
    pub reduced_points: usize,
    #[serde(default = "def_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "def_max_iter")]
    pub max_iter: usize,
}

fn def_path() -> String {
    "rb".into()
}
fn def_epsilon() -> f64 {
    3e-4
}
fn def_outer_tol() -> f64 {
    1e-8
}
fn def_inner_tol() -> f64 {
    1e-2
}
fn def_max_outer() -> usize {
    400
}
fn def_max_inner() -> usize {
    300
}
fn def_reduced_points() -> usize {
    2
}
fn def_rel_tol() -> f64 {
    1e-6
}
fn def_max_iter() -> usize {
    50
}

impl Default for SolverConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// Timing breakdown mirrored into the report.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timing {
    pub assembly_ms: f64,
    pub solve_ms: f64,
    pub total_ms: f64,
}

/// Summary of one run; the compare command works on pairs of these.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub geometry_summary: String,
    pub path: String,
    pub n_dof: usize,
    pub n_cells: usize,
    pub n_scalar_basis: usize,
    pub total_newton_iterations: usize,
    pub increments: usize,
    pub n_r_per_iteration: Vec<usize>,
    pub principal_cells_per_iteration: Vec<Vec<usize>>,
    pub greedy_certificates: Vec<f64>,
    pub max_local_factorizations: usize,
    pub enrichment_events: Vec<(usize, usize, usize)>,
    pub final_primal_level: usize,
    pub fallback_direct: bool,
    pub achieved_rel_residuals: Vec<f64>,
    pub peak_memory_proxy_bytes: usize,
    pub timing: Timing,
    pub converged: bool,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub output_dir: PathBuf,
}

/// Parse and semantically validate a config file.
pub fn load_config(path: &Path) -> Result<RunConfig, DriverError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DriverError::Config(format!("cannot read {}: {}", path.display(), e)))?;
    let cfg: RunConfig = toml::from_str(&text).map_err(config_err)?;
    validate_config(&cfg)?;
    Ok(cfg)
}

pub fn validate_config(cfg: &RunConfig) -> Result<(), DriverError> {
    let g = &cfg.geometry;
    match (&g.generator, &g.file) {
        (Some(name), None) => {
            if name != "uc1_cross" && name != "uc3_hole" {
                return Err(DriverError::Config(format!("unknown generator '{}'", name)));
            }
        }
        (None, Some(_)) => {}
        _ => {
            return Err(DriverError::Config(
                "geometry needs exactly one of `generator` or `file`".into(),
            ))
        }
    }
    if g.nx < 1 || g.ny < 1 {
        return Err(DriverError::Config("grid must be at least 1×1".into()));
    }
    if g.p < 1 || g.p > 4 {
        return Err(DriverError::Config("degree p must lie in 1..=4".into()));
    }
    if g.n_e < 1 {
        return Err(DriverError::Config("n_e must be at least 1".into()));
    }
    MaterialParams::new(cfg.material.e, cfg.material.nu).map_err(config_err)?;
    if cfg.program.increments < 1 {
        return Err(DriverError::Config("at least one load increment required".into()));
    }
    let s = &cfg.solver;
    if s.path != "standard" && s.path != "rb" {
        return Err(DriverError::Config(format!("unknown solver path '{}'", s.path)));
    }
    if s.epsilon <= 0.0 || s.outer_tol <= 0.0 || s.inner_tol <= 0.0 || s.rel_tol <= 0.0 {
        return Err(DriverError::Config("tolerances must be positive".into()));
    }
    for face in [&cfg.bcs.left, &cfg.bcs.right, &cfg.bcs.bottom, &cfg.bcs.top]
        .into_iter()
        .flatten()
    {
        let has_dirichlet = face.clamp || face.ux.is_some() || face.uy.is_some();
        if has_dirichlet && face.traction.is_some() {
            return Err(DriverError::Config(
                "a face cannot carry both Dirichlet values and a traction".into(),
            ));
        }
        if face.clamp && (face.ux.is_some() || face.uy.is_some()) {
            return Err(DriverError::Config(
                "use either `clamp` or explicit components, not both".into(),
            ));
        }
    }
    Ok(())
}

fn bc_spec_from_config(bcs: &BcsConfig) -> BcSpec {
    let mut spec = BcSpec::default();
    let faces = [
        (FaceTag::Left, &bcs.left),
        (FaceTag::Right, &bcs.right),
        (FaceTag::Bottom, &bcs.bottom),
        (FaceTag::Top, &bcs.top),
    ];
    for (tag, face) in faces {
        let Some(face) = face else { continue };
        if face.clamp {
            spec.dirichlet.push(FaceDirichlet {
                face: tag,
                components: [Some(0.0), Some(0.0), None],
            });
        } else if face.ux.is_some() || face.uy.is_some() {
            spec.dirichlet.push(FaceDirichlet {
                face: tag,
                components: [face.ux, face.uy, None],
            });
        }
        if let Some(g0) = face.traction {
            spec.tractions.push(FaceTraction { face: tag, g0: [g0[0], g0[1], 0.0] });
        }
    }
    if let Some(f0) = bcs.body_force {
        spec.body_force = [f0[0], f0[1], 0.0];
    }
    spec
}

/// Build the lattice model described by a validated config.
pub fn build_model(cfg: &RunConfig) -> Result<LatticeModel, DriverError> {
    let g = &cfg.geometry;
    let bc = bc_spec_from_config(&cfg.bcs);
    let (ref_cell, elements) = match (&g.generator, &g.file) {
        (Some(name), None) => {
            let cell = match name.as_str() {
                "uc1_cross" => uc1_cross(g.p, g.n_e, g.frame_t, g.strut_s),
                "uc3_hole" => uc3_hole(g.p, g.n_e, g.hole_r),
                _ => unreachable!("validated"),
            }
            .map_err(config_err)?;
            (cell, grid_macro(g.nx, g.ny, g.lx, g.ly))
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                DriverError::Config(format!("cannot read {}: {}", path.display(), e))
            })?;
            geometry_from_json(&text).map_err(config_err)?
        }
        _ => unreachable!("validated"),
    };
    build_lattice(ref_cell, elements, bc).map_err(config_err)
}

pub fn solver_settings(cfg: &RunConfig) -> SolverSettings {
    SolverSettings {
        path: if cfg.solver.path == "standard" {
            SolverPath::Standard
        } else {
            SolverPath::Rb
        },
        outer_tol: cfg.solver.outer_tol,
        inner_tol: cfg.solver.inner_tol,
        max_outer: cfg.solver.max_outer,
        max_inner: cfg.solver.max_inner,
        epsilon: cfg.solver.epsilon,
        reduced_points: cfg.solver.reduced_points,
    }
}

pub fn newton_settings(cfg: &RunConfig) -> NewtonSettings {
    NewtonSettings {
        rel_tol: cfg.solver.rel_tol,
        max_iter: cfg.solver.max_iter,
        ..Default::default()
    }
}

fn geometry_summary(cfg: &RunConfig) -> String {
    let g = &cfg.geometry;
    match (&g.generator, &g.file) {
        (Some(name), _) => format!(
            "{} nx={} ny={} p={} n_e={} lx={} ly={}",
            name, g.nx, g.ny, g.p, g.n_e, g.lx, g.ly
        ),
        (_, Some(path)) => format!("file {}", path.display()),
        _ => String::new(),
    }
}

fn report_from_trace(cfg: &RunConfig, model: &LatticeModel, trace: &NewtonTrace, converged: bool, total_ms: f64) -> RunReport {
    RunReport {
        config: cfg.clone(),
        geometry_summary: geometry_summary(cfg),
        path: trace.path.clone(),
        n_dof: model.n_dof(),
        n_cells: model.num_cells(),
        n_scalar_basis: model.n_scalar(),
        total_newton_iterations: trace.total_iterations,
        increments: trace.increments.len(),
        n_r_per_iteration: trace.iterations.iter().filter_map(|i| i.n_r).collect(),
        principal_cells_per_iteration: trace
            .iterations
            .iter()
            .filter_map(|i| i.principal_cells.clone())
            .collect(),
        greedy_certificates: trace.iterations.iter().filter_map(|i| i.greedy_certificate).collect(),
        max_local_factorizations: trace
            .iterations
            .iter()
            .filter_map(|i| i.solver.as_ref().map(|s| s.n_local_factorizations))
            .max()
            .unwrap_or(0),
        enrichment_events: trace.enrichment_events.clone(),
        final_primal_level: trace.enrichment_events.last().map(|e| e.2).unwrap_or(0),
        fallback_direct: trace.fallback_direct,
        achieved_rel_residuals: trace.increments.iter().map(|i| i.final_rel_residual).collect(),
        peak_memory_proxy_bytes: trace.peak_memory_proxy_bytes,
        timing: Timing {
            assembly_ms: trace.assembly_ms,
            solve_ms: trace.solve_ms,
            total_ms,
        },
        converged,
    }
}

fn fmt_num(v: f64) -> String {
    format!("{:.12e}", v)
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<(), DriverError> {
    let mut text = String::from(header);
    text.push_str("\r\n");
    for row in rows {
        text.push_str(&row.join(","));
        text.push_str("\r\n");
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Run a configured simulation and write all artifacts.
pub fn run(config_path: &Path) -> Result<RunArtifacts, DriverError> {
    let cfg = load_config(config_path)?;
    let t0 = std::time::Instant::now();
    let model = build_model(&cfg)?;
    let params = MaterialParams::new(cfg.material.e, cfg.material.nu).map_err(config_err)?;
    let program = LoadProgram::uniform(cfg.program.increments);
    let newton = newton_settings(&cfg);
    let solver = solver_settings(&cfg);

    std::fs::create_dir_all(&cfg.output.dir)?;
    let out = newton_solve(&model, &params, &program, &newton, &solver);
    let total_ms = t0.elapsed().as_secs_f64() * 1e3;

    match out {
        Ok(outcome) => {
            let report = report_from_trace(&cfg, &model, &outcome.trace, true, total_ms);
            write_artifacts(&cfg, &model, &params, &report, &outcome.trace, Some(&outcome))?;
            Ok(RunArtifacts { report, output_dir: cfg.output.dir.clone() })
        }
        Err(NewtonError::NonConvergence { trace, increment, rel_residual, .. }) => {
            let report = report_from_trace(&cfg, &model, &trace, false, total_ms);
            write_artifacts(&cfg, &model, &params, &report, &trace, None)?;
            Err(DriverError::NonConvergence(format!(
                "increment {} stalled at relative residual {:e} (partial artifacts in {})",
                increment,
                rel_residual,
                cfg.output.dir.display()
            )))
        }
        Err(NewtonError::StepFailure { trace, increment, iteration }) => {
            let report = report_from_trace(&cfg, &model, &trace, false, total_ms);
            write_artifacts(&cfg, &model, &params, &report, &trace, None)?;
            Err(DriverError::StepFailure(format!(
                "line search failed at increment {}, iteration {}",
                increment, iteration
            )))
        }
        Err(e) => Err(DriverError::Run(e.to_string())),
    }
}

fn write_artifacts(
    cfg: &RunConfig,
    model: &LatticeModel,
    params: &MaterialParams,
    report: &RunReport,
    trace: &NewtonTrace,
    outcome: Option<&crate::newton::NewtonOutcome>,
) -> Result<(), DriverError> {
    let dir = &cfg.output.dir;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report).map_err(|e| DriverError::Run(e.to_string()))?,
    )?;
    std::fs::write(
        dir.join("trace.json"),
        serde_json::to_string_pretty(trace).map_err(|e| DriverError::Run(e.to_string()))?,
    )?;

    // residual history
    let rows: Vec<Vec<String>> = trace
        .iterations
        .iter()
        .map(|it| {
            vec![
                it.increment.to_string(),
                it.iteration.to_string(),
                fmt_num(it.residual_norm),
                fmt_num(it.rel_residual),
                fmt_num(it.step_length),
            ]
        })
        .collect();
    write_csv(
        &dir.join("residuals.csv"),
        "increment,iteration,residual_norm,rel_residual,step_length",
        &rows,
    )?;

    if let Some(outcome) = outcome {
        // load–displacement curve: reaction at constrained DOFs (unmasked
        // residual) against the imposed displacement / load factor
        let disc = Discretization::new(model);
        let ws_rule = crate::assembly::full_rule(model, &disc).map_err(|e| DriverError::Run(e.to_string()))?;
        let ext = crate::assembly::assemble_external(model, &disc, &ws_rule)
            .map_err(|e| DriverError::Run(e.to_string()))?;
        let imposed_scale = model
            .dirichlet_value()
            .iter()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { *v } else { m });
        let mut rows = Vec::new();
        for (k, (factor, u)) in outcome.increment_states.iter().enumerate() {
            let raw = global_residual_raw(model, &disc, &ws_rule, u, params, &ext, *factor)
                .map_err(|e| DriverError::Run(e.to_string()))?;
            let mut reaction = [0.0f64; 2];
            for (i, m) in model.dirichlet_mask().iter().enumerate() {
                if *m {
                    reaction[i % 2] += raw[i];
                }
            }
            rows.push(vec![
                (k + 1).to_string(),
                fmt_num(*factor),
                fmt_num(factor * imposed_scale),
                fmt_num(reaction[0]),
                fmt_num(reaction[1]),
            ]);
        }
        write_csv(
            &dir.join("load_displacement.csv"),
            "increment,load_factor,imposed,reaction_x,reaction_y",
            &rows,
        )?;

        std::fs::write(
            dir.join("displacement.json"),
            serde_json::to_string(&outcome.u).map_err(|e| DriverError::Run(e.to_string()))?,
        )?;
        vtk::write_displacement_vtk(&dir.join("displacement.vtk"), model, &outcome.u)?;
    }
    Ok(())
}

/// Comparison row of two runs.
#[derive(Debug, Serialize)]
pub struct CompareRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub ratio: f64,
}

/// Compare two run reports; the runs must share geometry and program.
pub fn compare(report_a: &Path, report_b: &Path) -> Result<(Vec<CompareRow>, String), DriverError> {
    let a: RunReport = serde_json::from_str(&std::fs::read_to_string(report_a)?)
        .map_err(|e| DriverError::Config(format!("{}: {}", report_a.display(), e)))?;
    let b: RunReport = serde_json::from_str(&std::fs::read_to_string(report_b)?)
        .map_err(|e| DriverError::Config(format!("{}: {}", report_b.display(), e)))?;
    if a.geometry_summary != b.geometry_summary || a.increments != b.increments {
        return Err(DriverError::Config(format!(
            "reports describe different problems: '{}' with {} increments vs '{}' with {}",
            a.geometry_summary, a.increments, b.geometry_summary, b.increments
        )));
    }
    let mut rows = Vec::new();
    let mut push = |metric: &str, va: f64, vb: f64| {
        rows.push(CompareRow {
            metric: metric.into(),
            a: va,
            b: vb,
            ratio: if va != 0.0 { vb / va } else { f64::NAN },
        });
    };
    push("dofs", a.n_dof as f64, b.n_dof as f64);
    push(
        "newton_iterations",
        a.total_newton_iterations as f64,
        b.total_newton_iterations as f64,
    );
    push("assembly_ms", a.timing.assembly_ms, b.timing.assembly_ms);
    push("solve_ms", a.timing.solve_ms, b.timing.solve_ms);
    push("total_ms", a.timing.total_ms, b.timing.total_ms);
    push(
        "peak_memory_proxy_bytes",
        a.peak_memory_proxy_bytes as f64,
        b.peak_memory_proxy_bytes as f64,
    );
    push(
        "max_local_factorizations",
        a.max_local_factorizations as f64,
        b.max_local_factorizations as f64,
    );

    // cross-path field diff when displacement artifacts sit next to the
    // reports
    let mut field_note = String::new();
    let ua = report_a.parent().map(|p| p.join("displacement.json"));
    let ub = report_b.parent().map(|p| p.join("displacement.json"));
    if let (Some(ua), Some(ub)) = (ua, ub) {
        if ua.exists() && ub.exists() {
            let va: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(&ua)?)
                .map_err(|e| DriverError::Run(e.to_string()))?;
            let vb: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(&ub)?)
                .map_err(|e| DriverError::Run(e.to_string()))?;
            if va.len() == vb.len() {
                let scale = va.iter().map(|x| x * x).sum::<f64>().sqrt();
                let diff = va
                    .iter()
                    .zip(&vb)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                let rel = if scale > 0.0 { diff / scale } else { diff };
                push("field_rel_l2_diff", 0.0, rel);
                field_note = format!("displacement fields differ by {:.3e} relative l2", rel);
            }
        }
    }

    let mut table = format!("{:<28} {:>14} {:>14} {:>10}\n", "metric", "a", "b", "b/a");
    for row in &rows {
        table.push_str(&format!(
            "{:<28} {:>14.6} {:>14.6} {:>10.4}\n",
            row.metric, row.a, row.b, row.ratio
        ));
    }
    if !field_note.is_empty() {
        table.push_str(&field_note);
        table.push('\n');
    }
    Ok((rows, table))
}
