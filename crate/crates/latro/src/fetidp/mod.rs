//! Tangent linear solvers: a sparse direct reference path and the
//! reduced-basis path iterating on the augmented saddle-point system with a
//! ROM-based inexact FETI-DP block preconditioner.
//!
//! The saddle system ties per-cell copies of the remaining DOFs with signed
//! jump constraints (multipliers `λ`) plus redundant edge-average rows
//! (multipliers `μ`); primal DOFs stay globally assembled. The
//! preconditioner factorizes only the principal cells' remaining blocks,
//! approximates every other cell through the reduced-basis coefficients,
//! eliminates interiors onto a primal coarse problem, and solves the
//! interface problem with PCG to a loose tolerance.

mod krylov;

pub use krylov::{fgmres, pcg, KrylovResult};

use std::cell::Cell;
use std::collections::HashMap;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::assembly::{AssemblyError, LocalTangent};
use crate::lattice::{DofPartition, LatticeModel};
use crate::rom::RbTangent;

#[derive(Debug, thiserror::Error)]
pub enum FetidpError {
    #[error("local remaining matrices of cells {cells:?} are not positive definite; primal enrichment needed")]
    NeedsEnrichment { cells: Vec<usize> },
    #[error("iterative solve did not converge: {outer} outer iterations, relative residual {rel_residual:e}")]
    NonConvergence { outer: usize, rel_residual: f64 },
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}

/// Which tangent-solver path a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverPath {
    Standard,
    Rb,
}

/// Solver configuration (file-format names fixed by the CLI config).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverSettings {
    pub path: SolverPath,
    pub outer_tol: f64,
    pub inner_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// reduced-basis tolerance ε of the greedy selection
    pub epsilon: f64,
    /// reduced-quadrature points per direction for snapshots
    pub reduced_points: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            path: SolverPath::Rb,
            outer_tol: 1e-8,
            inner_tol: 1e-2,
            max_outer: 400,
            max_inner: 300,
            epsilon: 3e-4,
            reduced_points: 2,
        }
    }
}

/// Statistics of one tangent solve.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SolveStats {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub rel_residual: f64,
    pub jump_inf: f64,
    pub n_local_factorizations: usize,
    pub memory_bytes: usize,
}

/// Index layout of the torn displacement vector:
/// `[R_1 | … | R_{N_s} | P_free]`, with Dirichlet-masked remaining entries
/// kept in place (pinned to zero) and masked primal coordinates dropped.
pub struct TornLayout {
    pub r_len: usize,
    pub n_cells: usize,
    pub n_primal: usize,
    /// per cell, per (primal position × d + comp): free primal coordinate
    cell_primal: Vec<Vec<Option<usize>>>,
    /// free primal coordinate → (global scalar, comp)
    primal_dofs: Vec<(usize, usize)>,
    /// per cell, per remaining coordinate: free in this cell?
    free_mask: Vec<Vec<bool>>,
    /// q-column per multiplier row
    q_col: Vec<usize>,
    n_qcols: usize,
}

impl TornLayout {
    pub fn new(model: &LatticeModel, partition: &DofPartition) -> Self {
        let d = model.dim();
        let n_cells = model.num_cells();
        let r_len = partition.r_len();

        let mut primal_index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut primal_dofs = Vec::new();
        let mut cell_primal = vec![Vec::new(); n_cells];
        for (s, cp) in cell_primal.iter_mut().enumerate() {
            let map = model.assembly_map(s);
            for a in partition.primal() {
                let g = map[*a];
                for c in 0..d {
                    if model.dirichlet_mask()[g * d + c] {
                        cp.push(None);
                    } else {
                        let id = *primal_index.entry((g, c)).or_insert_with(|| {
                            primal_dofs.push((g, c));
                            primal_dofs.len() - 1
                        });
                        cp.push(Some(id));
                    }
                }
            }
        }

        let mut free_mask = vec![vec![true; r_len]; n_cells];
        for (s, fm) in free_mask.iter_mut().enumerate() {
            let map = model.assembly_map(s);
            for (i, a) in partition.remaining().iter().enumerate() {
                for c in 0..d {
                    if model.dirichlet_mask()[map[*a] * d + c] {
                        fm[i * d + c] = false;
                    }
                }
            }
        }

        let q_col: Vec<usize> = partition
            .lambda_rows()
            .iter()
            .map(|row| partition.q_col_of_row(row).expect("every row has a column"))
            .collect();

        Self {
            r_len,
            n_cells,
            n_primal: primal_dofs.len(),
            cell_primal,
            primal_dofs,
            free_mask,
            q_col,
            n_qcols: partition.q_cols().len(),
        }
    }

    pub fn u_len(&self) -> usize {
        self.n_cells * self.r_len + self.n_primal
    }

    pub fn total_len(&self, partition: &DofPartition) -> usize {
        self.u_len() + partition.n_lambda() + self.n_qcols
    }

    fn r_offset(&self, s: usize) -> usize {
        s * self.r_len
    }

    /// Average the torn copies back to an assembled global vector
    /// (Dirichlet entries zero).
    pub fn average_to_global(
        &self,
        model: &LatticeModel,
        partition: &DofPartition,
        torn: &[f64],
    ) -> Vec<f64> {
        let d = model.dim();
        let mut sum = vec![0.0; model.n_dof()];
        let mut count = vec![0usize; model.n_dof()];
        for s in 0..self.n_cells {
            let map = model.assembly_map(s);
            let off = self.r_offset(s);
            for (i, a) in partition.remaining().iter().enumerate() {
                for c in 0..d {
                    let g = map[*a] * d + c;
                    if !model.dirichlet_mask()[g] {
                        sum[g] += torn[off + i * d + c];
                        count[g] += 1;
                    }
                }
            }
        }
        for (k, (g, c)) in self.primal_dofs.iter().enumerate() {
            sum[g * d + c] += torn[self.n_cells * self.r_len + k];
            count[g * d + c] += 1;
        }
        for i in 0..sum.len() {
            if count[i] > 1 {
                sum[i] /= count[i] as f64;
            }
        }
        sum
    }

    /// Scatter an assembled global vector into the torn layout (gather).
    pub fn torn_from_global(
        &self,
        model: &LatticeModel,
        partition: &DofPartition,
        global: &[f64],
    ) -> Vec<f64> {
        let d = model.dim();
        let mut torn = vec![0.0; self.u_len()];
        for s in 0..self.n_cells {
            let map = model.assembly_map(s);
            let off = self.r_offset(s);
            for (i, a) in partition.remaining().iter().enumerate() {
                for c in 0..d {
                    if self.free_mask[s][i * d + c] {
                        torn[off + i * d + c] = global[map[*a] * d + c];
                    }
                }
            }
        }
        for (k, (g, c)) in self.primal_dofs.iter().enumerate() {
            torn[self.n_cells * self.r_len + k] = global[g * d + c];
        }
        torn
    }
}

/// Local tangent operator of one cell: assembled exactly or held as a
/// reduced-basis combination of principal tangents.
pub enum CellOp<'a> {
    Exact(&'a LocalTangent),
    Rb { alpha: &'a [f64], principals: &'a [LocalTangent] },
}

impl<'a> CellOp<'a> {
    fn matvec_add(&self, x: &[f64], y: &mut [f64]) {
        match self {
            CellOp::Exact(k) => k.matvec_add(x, y),
            CellOp::Rb { alpha, principals } => {
                RbTangent { alpha, principals }.matvec_add(x, y)
            }
        }
    }
}

/// The augmented saddle-point system of one Newton iteration.
pub struct SaddleSystem<'a> {
    pub model: &'a LatticeModel,
    pub partition: &'a DofPartition,
    pub layout: &'a TornLayout,
    pub cell_ops: Vec<CellOp<'a>>,
    pub rhs: Vec<f64>,
}

impl<'a> SaddleSystem<'a> {
    /// Assemble the right-hand side `(−r_torn, 0, 0)` from per-cell masked
    /// residuals (remaining rows) and the assembled residual (primal rows).
    pub fn new(
        model: &'a LatticeModel,
        partition: &'a DofPartition,
        layout: &'a TornLayout,
        cell_ops: Vec<CellOp<'a>>,
        local_residuals: &[Vec<f64>],
        global_residual: &[f64],
    ) -> Self {
        let d = model.dim();
        let mut rhs = vec![0.0; layout.total_len(partition)];
        for s in 0..layout.n_cells {
            let off = layout.r_offset(s);
            for (i, a) in partition.remaining().iter().enumerate() {
                for c in 0..d {
                    if layout.free_mask[s][i * d + c] {
                        rhs[off + i * d + c] = -local_residuals[s][a * d + c];
                    }
                }
            }
        }
        for (k, (g, c)) in layout.primal_dofs.iter().enumerate() {
            rhs[layout.n_cells * layout.r_len + k] = -global_residual[g * d + c];
        }
        Self { model, partition, layout, cell_ops, rhs }
    }

    fn gather_local(&self, s: usize, u: &[f64]) -> Vec<f64> {
        let d = self.model.dim();
        let n_ref = self.model.ref_cell().n_ref();
        let off = self.layout.r_offset(s);
        let mut local = vec![0.0; n_ref * d];
        for (i, a) in self.partition.remaining().iter().enumerate() {
            for c in 0..d {
                local[a * d + c] = u[off + i * d + c];
            }
        }
        for (pi, a) in self.partition.primal().iter().enumerate() {
            for c in 0..d {
                if let Some(id) = self.layout.cell_primal[s][pi * d + c] {
                    local[a * d + c] = u[self.layout.n_cells * self.layout.r_len + id];
                }
            }
        }
        local
    }

    fn scatter_local_add(&self, s: usize, local: &[f64], y: &mut [f64]) {
        let d = self.model.dim();
        let off = self.layout.r_offset(s);
        for (i, a) in self.partition.remaining().iter().enumerate() {
            for c in 0..d {
                if self.layout.free_mask[s][i * d + c] {
                    y[off + i * d + c] += local[a * d + c];
                }
            }
        }
        for (pi, a) in self.partition.primal().iter().enumerate() {
            for c in 0..d {
                if let Some(id) = self.layout.cell_primal[s][pi * d + c] {
                    y[self.layout.n_cells * self.layout.r_len + id] += local[a * d + c];
                }
            }
        }
    }

    /// `K̃ x` on the torn displacement block only.
    pub fn apply_k(&self, x: &[f64], y: &mut [f64]) {
        let d = self.model.dim();
        let n_ref = self.model.ref_cell().n_ref();
        let mut y_local = vec![0.0; n_ref * d];
        for s in 0..self.layout.n_cells {
            let x_local = self.gather_local(s, x);
            y_local.iter_mut().for_each(|v| *v = 0.0);
            self.cell_ops[s].matvec_add(&x_local, &mut y_local);
            self.scatter_local_add(s, &y_local, y);
        }
    }

    /// Jump values `B x` per multiplier row.
    pub fn apply_b(&self, x: &[f64]) -> Vec<f64> {
        let d = self.model.dim();
        self.partition
            .lambda_rows()
            .iter()
            .map(|row| {
                let lo = self.layout.r_offset(row.lo_cell)
                    + self.partition.r_dof(row.lo_scalar, row.comp).unwrap();
                let hi = self.layout.r_offset(row.hi_cell)
                    + self.partition.r_dof(row.hi_scalar, row.comp).unwrap();
                let _ = d;
                x[lo] - x[hi]
            })
            .collect()
    }

    /// `y += Bᵀ v` for a multiplier-space vector.
    pub fn apply_bt_add(&self, v: &[f64], y: &mut [f64]) {
        for (k, row) in self.partition.lambda_rows().iter().enumerate() {
            let lo = self.layout.r_offset(row.lo_cell)
                + self.partition.r_dof(row.lo_scalar, row.comp).unwrap();
            let hi = self.layout.r_offset(row.hi_cell)
                + self.partition.r_dof(row.hi_scalar, row.comp).unwrap();
            y[lo] += v[k];
            y[hi] -= v[k];
        }
    }

    /// Full augmented operator.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let u_len = self.layout.u_len();
        let n_l = self.partition.n_lambda();
        let n_q = self.layout.n_qcols;
        let (x_u, rest) = x.split_at(u_len);
        let (x_l, x_m) = rest.split_at(n_l);

        let mut y = vec![0.0; x.len()];
        // u rows: K̃ x_u + Bᵀ(λ + Q μ)
        self.apply_k(x_u, &mut y[..u_len]);
        let lam_eff: Vec<f64> = x_l
            .iter()
            .enumerate()
            .map(|(k, l)| l + x_m[self.layout.q_col[k]])
            .collect();
        {
            let (yu, _) = y.split_at_mut(u_len);
            self.apply_bt_add(&lam_eff, yu);
        }
        // λ rows: B x_u; μ rows: Qᵀ B x_u
        let jumps = self.apply_b(x_u);
        for (k, j) in jumps.iter().enumerate() {
            y[u_len + k] = *j;
            y[u_len + n_l + self.layout.q_col[k]] += *j;
        }
        let _ = n_q;
        y
    }
}

type SparseF = SparseColMat<usize, f64>;

fn triplet_bytes(nnz: usize) -> usize {
    nnz * 16
}

/// Sparse direct reference path: LU with iterative refinement to a `1e-12`
/// relative residual.
pub fn solve_direct(
    n: usize,
    triplets: &[(usize, usize, f64)],
    rhs: &[f64],
) -> Result<(Vec<f64>, SolveStats), FetidpError> {
    if n == 0 {
        return Ok((Vec::new(), SolveStats::default()));
    }
    let tri: Vec<Triplet<usize, usize, f64>> =
        triplets.iter().map(|(r, c, v)| Triplet::new(*r, *c, *v)).collect();
    let mat = SparseF::try_new_from_triplets(n, n, &tri)
        .map_err(|e| FetidpError::Factorization(format!("{:?}", e)))?;
    let lu = mat
        .as_ref()
        .sp_lu()
        .map_err(|e| FetidpError::Factorization(format!("{:?}", e)))?;

    let b = faer::Mat::<f64>::from_fn(n, 1, |i, _| rhs[i]);
    let mut x = lu.solve(b.as_ref());
    let b_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut rel = f64::INFINITY;
    for _ in 0..3 {
        // residual in the original matrix
        let mut r = b.clone();
        for (col, row, v) in triplets.iter().map(|(r, c, v)| (*c, *r, *v)) {
            let val = r[(row, 0)] - v * x[(col, 0)];
            r[(row, 0)] = val;
        }
        let r_norm = (0..n).map(|i| r[(i, 0)] * r[(i, 0)]).sum::<f64>().sqrt();
        rel = if b_norm > 0.0 { r_norm / b_norm } else { 0.0 };
        if rel <= 1e-12 {
            break;
        }
        let dx = lu.solve(r.as_ref());
        for i in 0..n {
            x[(i, 0)] += dx[(i, 0)];
        }
    }
    let nnz = mat.compute_nnz();
    Ok((
        (0..n).map(|i| x[(i, 0)]).collect(),
        SolveStats {
            rel_residual: rel,
            n_local_factorizations: 0,
            memory_bytes: 2 * triplet_bytes(nnz),
            ..Default::default()
        },
    ))
}

/// Check positive definiteness of the assembled free tangent by attempting
/// a sparse Cholesky factorization.
pub fn is_positive_definite(n: usize, triplets: &[(usize, usize, f64)]) -> bool {
    if n == 0 {
        return true;
    }
    let tri: Vec<Triplet<usize, usize, f64>> =
        triplets.iter().map(|(r, c, v)| Triplet::new(*r, *c, *v)).collect();
    match SparseF::try_new_from_triplets(n, n, &tri) {
        Ok(mat) => mat.as_ref().sp_cholesky(faer::Side::Lower).is_ok(),
        Err(_) => false,
    }
}

/// ROM-based inexact FETI-DP block preconditioner data.
pub struct PreconditionerState {
    /// sparse Cholesky factors of the principal remaining blocks
    factors: Vec<faer::sparse::linalg::solvers::Llt<usize, f64>>,
    /// per principal: free remaining coordinates
    free_r: Vec<Vec<usize>>,
    /// per principal: remaining-to-primal coupling block
    k_rp: Vec<DMatrix<f64>>,
    /// per principal: dual Schur complement embedded in the full dual space
    f_dd: Vec<DMatrix<f64>>,
    /// surrogate assignment per cell: nearest principal and its coefficient
    rho: Vec<usize>,
    scale: Vec<f64>,
    /// projection coefficients δ^s (the reduced-basis α^s)
    delta: Vec<Vec<f64>>,
    /// coarse (primal + edge-average feed) factorization
    coarse: faer::sparse::linalg::solvers::Lu<usize, f64>,
    /// Tikhonov floor keeping the interface preconditioner positive
    eta: f64,
    settings: SolverSettings,
    pub n_local_factorizations: usize,
    pub memory_bytes: usize,
    inner_counter: Cell<usize>,
}

/// Build the block preconditioner from the principal cells.
///
/// Fails with [`FetidpError::NeedsEnrichment`] carrying every principal cell
/// whose remaining block is not positive definite.
pub fn build_preconditioner(
    model: &LatticeModel,
    partition: &DofPartition,
    layout: &TornLayout,
    principal_cells: &[usize],
    alpha: &[Vec<f64>],
    surrogate: &[(usize, f64)],
    principal_tangents: &[LocalTangent],
    settings: &SolverSettings,
) -> Result<PreconditionerState, FetidpError> {
    let d = model.dim();
    let n_r = principal_cells.len();
    assert_eq!(principal_tangents.len(), n_r);
    let r_len = layout.r_len;
    let p_len = partition.primal().len() * d;
    let dual_len = partition.dual().len() * d;
    let mut memory = 0usize;

    // factorize principal remaining blocks over their free coordinates
    let mut factors = Vec::with_capacity(n_r);
    let mut free_r = Vec::with_capacity(n_r);
    let mut free_r_index = Vec::with_capacity(n_r);
    let mut indefinite = Vec::new();
    for (r, s_r) in principal_cells.iter().enumerate() {
        let k = &principal_tangents[r];
        let free: Vec<usize> = (0..r_len).filter(|i| layout.free_mask[*s_r][*i]).collect();
        let mut index = vec![None; r_len];
        for (j, i) in free.iter().enumerate() {
            index[*i] = Some(j);
        }
        let mut tri: Vec<Triplet<usize, usize, f64>> = Vec::new();
        for (ia, a) in partition.remaining().iter().enumerate() {
            for slot in k.pattern.row_ptr[*a]..k.pattern.row_ptr[*a + 1] {
                let b = k.pattern.col_idx[slot];
                let Some(ib) = partition.r_scalar_index(b) else { continue };
                for i in 0..d {
                    let Some(row) = index[ia * d + i] else { continue };
                    for j in 0..d {
                        let Some(col) = index[ib * d + j] else { continue };
                        let v = k.values[slot * d * d + i * d + j];
                        if v != 0.0 {
                            tri.push(Triplet::new(row, col, v));
                        }
                    }
                }
            }
        }
        let mat = SparseF::try_new_from_triplets(free.len(), free.len(), &tri)
            .map_err(|e| FetidpError::Factorization(format!("{:?}", e)))?;
        memory += 2 * triplet_bytes(mat.compute_nnz());
        match mat.as_ref().sp_cholesky(faer::Side::Lower) {
            Ok(f) => factors.push(f),
            Err(_) => {
                indefinite.push(*s_r);
                continue;
            }
        }
        free_r.push(free);
        free_r_index.push(index);
    }
    if !indefinite.is_empty() {
        return Err(FetidpError::NeedsEnrichment { cells: indefinite });
    }

    // dense coupling blocks of the principal cells
    let mut k_rp = Vec::with_capacity(n_r);
    let mut k_pp = Vec::with_capacity(n_r);
    for k in principal_tangents {
        let mut rp = DMatrix::zeros(r_len, p_len);
        let mut pp = DMatrix::zeros(p_len, p_len);
        for (ia, a) in partition.remaining().iter().enumerate() {
            for slot in k.pattern.row_ptr[*a]..k.pattern.row_ptr[*a + 1] {
                let b = k.pattern.col_idx[slot];
                if let Some(pb) = partition.primal().iter().position(|x| x == &b) {
                    for i in 0..d {
                        for j in 0..d {
                            rp[(ia * d + i, pb * d + j)] = k.values[slot * d * d + i * d + j];
                        }
                    }
                }
            }
        }
        for (pa, a) in partition.primal().iter().enumerate() {
            for slot in k.pattern.row_ptr[*a]..k.pattern.row_ptr[*a + 1] {
                let b = k.pattern.col_idx[slot];
                if let Some(pb) = partition.primal().iter().position(|x| x == &b) {
                    for i in 0..d {
                        for j in 0..d {
                            pp[(pa * d + i, pb * d + j)] = k.values[slot * d * d + i * d + j];
                        }
                    }
                }
            }
        }
        memory += (rp.len() + pp.len()) * 8;
        k_rp.push(rp);
        k_pp.push(pp);
    }

    // dual Schur complements F_dd = ((K_RR⁻¹)_ΔΔ)⁻¹ of the principal cells,
    // embedded into the shared full dual space
    let mut f_dd = Vec::with_capacity(n_r);
    for r in 0..n_r {
        let free = &free_r[r];
        let index = &free_r_index[r];
        let dual_free: Vec<(usize, usize)> = partition
            .dual()
            .iter()
            .enumerate()
            .flat_map(|(pos, a)| {
                let ri = partition.r_scalar_index(*a).unwrap();
                (0..d).filter_map(move |c| {
                    index[ri * d + c].map(|fi| (pos * d + c, fi))
                })
            })
            .collect();
        let n_dual = dual_free.len();
        let mut rhs = faer::Mat::<f64>::zeros(free.len(), n_dual);
        for (col, (_, fi)) in dual_free.iter().enumerate() {
            rhs[(*fi, col)] = 1.0;
        }
        let sol = factors[r].solve(rhs.as_ref());
        let mut inv_block = DMatrix::zeros(n_dual, n_dual);
        for (col, _) in dual_free.iter().enumerate() {
            for (row, (_, fi)) in dual_free.iter().enumerate() {
                inv_block[(row, col)] = sol[(*fi, col)];
            }
        }
        let schur = inv_block.try_inverse().ok_or_else(|| {
            FetidpError::Factorization("dual block of the local inverse is singular".into())
        })?;
        let mut full = DMatrix::zeros(dual_len, dual_len);
        for (i, (di, _)) in dual_free.iter().enumerate() {
            for (j, (dj, _)) in dual_free.iter().enumerate() {
                full[(*di, *dj)] = schur[(i, j)];
            }
        }
        memory += full.len() * 8;
        f_dd.push(full);
    }

    // surrogate per cell: nearest principal with its least-squares scale
    let n_cells = layout.n_cells;
    assert_eq!(surrogate.len(), n_cells);
    let rho: Vec<usize> = surrogate.iter().map(|(r, _)| *r).collect();
    let scale: Vec<f64> = surrogate
        .iter()
        .map(|(_, c)| if c.abs() > 1e-12 { *c } else { 1.0 })
        .collect();

    // coarse problem: primal Schur complement of the surrogate operator
    let eta;
    let coarse = {
        let mut tri: Vec<Triplet<usize, usize, f64>> = Vec::new();
        let mut krp_s = DMatrix::zeros(r_len, p_len);
        let mut kpp_s = DMatrix::zeros(p_len, p_len);
        for s in 0..n_cells {
            krp_s.fill(0.0);
            kpp_s.fill(0.0);
            for (r, a) in alpha[s].iter().enumerate() {
                if a.abs() > 1e-14 {
                    krp_s += &k_rp[r] * *a;
                    kpp_s += &k_pp[r] * *a;
                }
            }
            // W = K̂_RR⁻¹ K_RP, column by column through the surrogate factor
            let r = rho[s];
            let free = &free_r[r];
            let mut rhs = faer::Mat::<f64>::zeros(free.len(), p_len);
            for col in 0..p_len {
                for (fi, i) in free.iter().enumerate() {
                    // skip rows masked in cell s
                    if layout.free_mask[s][*i] {
                        rhs[(fi, col)] = krp_s[(*i, col)];
                    }
                }
            }
            let sol = factors[r].solve(rhs.as_ref());
            let inv_c = 1.0 / scale[s];
            // S^s = K_PP − K_PR W
            let mut s_block = kpp_s.clone();
            for col in 0..p_len {
                for row in 0..p_len {
                    let mut acc = 0.0;
                    for (fi, i) in free.iter().enumerate() {
                        if layout.free_mask[s][*i] {
                            acc += krp_s[(*i, row)] * sol[(fi, col)] * inv_c;
                        }
                    }
                    s_block[(row, col)] -= acc;
                }
            }
            for (pi_loc, pi) in layout.cell_primal[s].iter().enumerate() {
                let Some(row) = pi else { continue };
                for (pj_loc, pj) in layout.cell_primal[s].iter().enumerate() {
                    let Some(col) = pj else { continue };
                    let v = s_block[(pi_loc, pj_loc)];
                    if v != 0.0 {
                        tri.push(Triplet::new(*row, *col, v));
                    }
                }
            }
        }
        let n_p = layout.n_primal;
        let mat = SparseF::try_new_from_triplets(n_p.max(1), n_p.max(1), &tri)
            .map_err(|e| FetidpError::Factorization(format!("{:?}", e)))?;
        memory += 2 * triplet_bytes(mat.compute_nnz());
        eta = 1e-8
            * f_dd
                .iter()
                .map(|m| m.amax())
                .fold(1.0f64, f64::max);
        if n_p == 0 {
            // degenerate but well-formed 1×1 placeholder
            let one = SparseF::try_new_from_triplets(
                1,
                1,
                &[Triplet::new(0usize, 0usize, 1.0f64)],
            )
            .unwrap();
            one.as_ref()
                .sp_lu()
                .map_err(|e| FetidpError::Factorization(format!("{:?}", e)))?
        } else {
            mat.as_ref()
                .sp_lu()
                .map_err(|e| FetidpError::Factorization(format!("{:?}", e)))?
        }
    };

    Ok(PreconditionerState {
        n_local_factorizations: factors.len(),
        factors,
        free_r,
        k_rp,
        f_dd,
        rho,
        scale,
        delta: alpha.to_vec(),
        coarse,
        eta,
        settings: settings.clone(),
        memory_bytes: memory,
        inner_counter: Cell::new(0),
    })
}

impl PreconditionerState {
    /// Approximate solve of one cell's remaining block through its nearest
    /// principal factorization, scaled by the dominant coefficient.
    fn solve_cell(
        &self,
        layout: &TornLayout,
        s: usize,
        b_r: &[f64],
        out: &mut [f64],
    ) {
        let r = self.rho[s];
        let free = &self.free_r[r];
        let inv_c = 1.0 / self.scale[s];
        let mut rhs = faer::Mat::<f64>::zeros(free.len(), 1);
        for (fi, i) in free.iter().enumerate() {
            rhs[(fi, 0)] = if layout.free_mask[s][*i] { b_r[*i] } else { 0.0 };
        }
        let sol = self.factors[r].solve(rhs.as_ref());
        out.iter_mut().for_each(|v| *v = 0.0);
        for (fi, i) in free.iter().enumerate() {
            if layout.free_mask[s][*i] {
                out[*i] = sol[(fi, 0)] * inv_c;
            }
        }
    }

    /// Substructured approximate solve of the torn displacement block:
    /// per-cell surrogate solves plus the primal coarse correction.
    pub fn ksolve(&self, saddle: &SaddleSystem, b_u: &[f64]) -> Vec<f64> {
        let layout = saddle.layout;
        let d = saddle.model.dim();
        let r_len = layout.r_len;
        let p_len = saddle.partition.primal().len() * d;
        let n_cells = layout.n_cells;
        let mut x = vec![0.0; layout.u_len()];

        // forward solves and coarse right-hand side
        let mut g_p = vec![0.0; layout.n_primal];
        for (k, _) in layout.primal_dofs.iter().enumerate() {
            g_p[k] = b_u[n_cells * r_len + k];
        }
        let mut t_all = vec![0.0; n_cells * r_len];
        let mut krp_s = DMatrix::zeros(r_len, p_len);
        for s in 0..n_cells {
            let off = layout.r_offset(s);
            let (t, _) = t_all.split_at_mut(off + r_len);
            let t_s = &mut t[off..off + r_len];
            self.solve_cell(layout, s, &b_u[off..off + r_len], t_s);
            // g_P −= K_PR t_s
            krp_s.fill(0.0);
            for (r, a) in self.delta[s].iter().enumerate() {
                if a.abs() > 1e-14 {
                    krp_s += &self.k_rp[r] * *a;
                }
            }
            for (pi_loc, pi) in layout.cell_primal[s].iter().enumerate() {
                let Some(id) = pi else { continue };
                let mut acc = 0.0;
                for i in 0..r_len {
                    acc += krp_s[(i, pi_loc)] * t_s[i];
                }
                g_p[*id] -= acc;
            }
        }

        // coarse solve
        let u_p = if layout.n_primal > 0 {
            let rhs = faer::Mat::<f64>::from_fn(layout.n_primal, 1, |i, _| g_p[i]);
            let sol = self.coarse.solve(rhs.as_ref());
            (0..layout.n_primal).map(|i| sol[(i, 0)]).collect::<Vec<f64>>()
        } else {
            Vec::new()
        };

        // back substitution
        let mut w = vec![0.0; r_len];
        let mut corr = vec![0.0; r_len];
        for s in 0..n_cells {
            let off = layout.r_offset(s);
            krp_s.fill(0.0);
            for (r, a) in self.delta[s].iter().enumerate() {
                if a.abs() > 1e-14 {
                    krp_s += &self.k_rp[r] * *a;
                }
            }
            w.iter_mut().for_each(|v| *v = 0.0);
            for (pi_loc, pi) in layout.cell_primal[s].iter().enumerate() {
                let Some(id) = pi else { continue };
                let up = u_p[*id];
                for i in 0..r_len {
                    w[i] += krp_s[(i, pi_loc)] * up;
                }
            }
            self.solve_cell(layout, s, &w, &mut corr);
            for i in 0..r_len {
                x[off + i] = t_all[off + i] - corr[i];
            }
        }
        for (k, up) in u_p.iter().enumerate() {
            x[n_cells * r_len + k] = *up;
        }
        x
    }

    /// Scaled Dirichlet preconditioner on the combined multiplier space,
    /// built from the reduced-basis dual Schur complements.
    fn dirichlet_precond(&self, saddle: &SaddleSystem, w: &[f64]) -> Vec<f64> {
        let partition = saddle.partition;
        let layout = saddle.layout;
        let d = saddle.model.dim();
        let n_l = partition.n_lambda();
        let dual_len = partition.dual().len() * d;
        let dual_pos: Vec<usize> = partition.dual().to_vec();

        // effective row weights: u = w_λ + Q w_μ
        let u_row: Vec<f64> = (0..n_l)
            .map(|k| w[k] + w[n_l + layout.q_col[k]])
            .collect();

        let mut v_out = vec![0.0; n_l];
        let mut gather = vec![0.0; dual_len];
        let mut dual_index = vec![usize::MAX; saddle.model.ref_cell().n_ref()];
        for (pos, a) in dual_pos.iter().enumerate() {
            dual_index[*a] = pos;
        }
        for s in 0..layout.n_cells {
            gather.iter_mut().for_each(|v| *v = 0.0);
            let mut touched = false;
            for (k, row) in partition.lambda_rows().iter().enumerate() {
                if row.lo_cell == s {
                    gather[dual_index[row.lo_scalar] * d + row.comp] += 0.5 * u_row[k];
                    touched = true;
                } else if row.hi_cell == s {
                    gather[dual_index[row.hi_scalar] * d + row.comp] -= 0.5 * u_row[k];
                    touched = true;
                }
            }
            if !touched {
                continue;
            }
            // y = (Σ_r δ_r F_dd^r) gather
            let mut y = vec![0.0; dual_len];
            for (r, a) in self.delta[s].iter().enumerate() {
                if a.abs() <= 1e-14 {
                    continue;
                }
                let f = &self.f_dd[r];
                for i in 0..dual_len {
                    let mut acc = 0.0;
                    for j in 0..dual_len {
                        acc += f[(i, j)] * gather[j];
                    }
                    y[i] += a * acc;
                }
            }
            for (k, row) in partition.lambda_rows().iter().enumerate() {
                if row.lo_cell == s {
                    v_out[k] += 0.5 * y[dual_index[row.lo_scalar] * d + row.comp];
                } else if row.hi_cell == s {
                    v_out[k] -= 0.5 * y[dual_index[row.hi_scalar] * d + row.comp];
                }
            }
        }

        let mut out = vec![0.0; w.len()];
        for k in 0..n_l {
            out[k] = v_out[k] + self.eta * w[k];
            out[n_l + layout.q_col[k]] += v_out[k];
        }
        for q in 0..layout.n_qcols {
            out[n_l + q] += self.eta * w[n_l + q];
        }
        out
    }

    /// Inner interface solve: PCG on `C K̂⁻¹ Cᵀ y = w` to the loose inner
    /// tolerance.
    fn interface_solve(&self, saddle: &SaddleSystem, w: &[f64]) -> Vec<f64> {
        let layout = saddle.layout;
        let n_l = saddle.partition.n_lambda();
        let u_len = layout.u_len();
        let apply = |v: &[f64]| -> Vec<f64> {
            // Cᵀ v
            let mut u = vec![0.0; u_len];
            let lam_eff: Vec<f64> = (0..n_l)
                .map(|k| v[k] + v[n_l + layout.q_col[k]])
                .collect();
            saddle.apply_bt_add(&lam_eff, &mut u);
            let t = self.ksolve(saddle, &u);
            let jumps = saddle.apply_b(&t);
            let mut out = vec![0.0; v.len()];
            for (k, j) in jumps.iter().enumerate() {
                out[k] = *j;
                out[n_l + layout.q_col[k]] += *j;
            }
            out
        };
        let res = pcg(
            apply,
            |r| self.dirichlet_precond(saddle, r),
            w,
            self.settings.inner_tol,
            self.settings.max_inner,
        );
        self.inner_counter.set(self.inner_counter.get() + res.iterations);
        res.x
    }

    /// Full block-preconditioner application on `(r_u, r_λ, r_μ)`.
    pub fn apply(&self, saddle: &SaddleSystem, r: &[f64]) -> Vec<f64> {
        let layout = saddle.layout;
        let u_len = layout.u_len();
        let n_l = saddle.partition.n_lambda();
        let n_q = layout.n_qcols;
        let (r_u, rest) = r.split_at(u_len);
        let (r_l, r_m) = rest.split_at(n_l);

        let z = self.ksolve(saddle, r_u);
        if n_l == 0 {
            let mut out = vec![0.0; r.len()];
            out[..u_len].copy_from_slice(&z);
            return out;
        }
        // w = r_c − C z
        let jumps = saddle.apply_b(&z);
        let mut w = vec![0.0; n_l + n_q];
        for k in 0..n_l {
            w[k] = r_l[k] - jumps[k];
            w[n_l + layout.q_col[k]] -= jumps[k];
        }
        for q in 0..n_q {
            w[n_l + q] += r_m[q];
        }
        // y_c = −S⁻¹ w via the inner PCG
        let y = self.interface_solve(saddle, &w);
        let y_c: Vec<f64> = y.iter().map(|v| -v).collect();
        // x_u = z − K̂⁻¹ Cᵀ y_c
        let mut u = vec![0.0; u_len];
        let lam_eff: Vec<f64> = (0..n_l)
            .map(|k| y_c[k] + y_c[n_l + layout.q_col[k]])
            .collect();
        saddle.apply_bt_add(&lam_eff, &mut u);
        let corr = self.ksolve(saddle, &u);

        let mut out = vec![0.0; r.len()];
        for i in 0..u_len {
            out[i] = z[i] - corr[i];
        }
        out[u_len..].copy_from_slice(&y_c);
        out
    }

    pub fn reset_inner_counter(&self) {
        self.inner_counter.set(0);
    }

    pub fn inner_iterations(&self) -> usize {
        self.inner_counter.get()
    }
}

/// Interface multipliers carried between Newton iterations.
///
/// The torn right-hand side keeps O(load) interface fluxes even at
/// equilibrium (they cancel only after assembly), so the multipliers are
/// warm-started: the outer iteration then works on the flux defect, which
/// shrinks with the Newton residual and keeps the relative tolerance
/// meaningful near convergence.
#[derive(Clone, Debug, Default)]
pub struct MultiplierState {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
}

/// Solve the augmented saddle system with the flexible outer iteration and
/// the block preconditioner; returns the assembled displacement update, the
/// interface multipliers, and solve statistics.
pub fn solve_rb(
    saddle: &SaddleSystem,
    precond: &PreconditionerState,
    settings: &SolverSettings,
    warm: Option<&MultiplierState>,
) -> Result<(Vec<f64>, MultiplierState, SolveStats), FetidpError> {
    precond.reset_inner_counter();
    let u_len = saddle.layout.u_len();
    let n_l = saddle.partition.n_lambda();
    let n_q = saddle.layout.n_qcols;
    let total = saddle.rhs.len();

    let mut x0 = vec![0.0; total];
    if let Some(w) = warm {
        if w.lambda.len() == n_l && w.mu.len() == n_q {
            x0[u_len..u_len + n_l].copy_from_slice(&w.lambda);
            x0[u_len + n_l..].copy_from_slice(&w.mu);
        }
    }
    let ax0 = saddle.apply(&x0);
    let defect: Vec<f64> = saddle.rhs.iter().zip(&ax0).map(|(b, a)| b - a).collect();

    let res = fgmres(
        |x| saddle.apply(x),
        |r| precond.apply(saddle, r),
        &defect,
        settings.outer_tol,
        settings.max_outer,
    );
    if !res.converged {
        return Err(FetidpError::NonConvergence {
            outer: res.iterations,
            rel_residual: res.rel_residual,
        });
    }
    let x: Vec<f64> = x0.iter().zip(&res.x).map(|(a, b)| a + b).collect();
    let jumps = saddle.apply_b(&x[..u_len]);
    let jump_inf = jumps.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let delta_u = saddle
        .layout
        .average_to_global(saddle.model, saddle.partition, &x[..u_len]);
    let multipliers = MultiplierState {
        lambda: x[u_len..u_len + n_l].to_vec(),
        mu: x[u_len + n_l..].to_vec(),
    };
    let stats = SolveStats {
        outer_iterations: res.iterations,
        inner_iterations: precond.inner_iterations(),
        rel_residual: res.rel_residual,
        jump_inf,
        n_local_factorizations: precond.n_local_factorizations,
        memory_bytes: precond.memory_bytes,
    };
    Ok((delta_u, multipliers, stats))
}

#[cfg(test)]
mod tests;
