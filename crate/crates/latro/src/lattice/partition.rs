//! Primal/dual/interior DOF partition and interface constraint structure.
//!
//! The partition is defined on the reference cell, so every cell shares the
//! identical local split. Primal scalars sit at (or nearest to) the unit
//! domain corners, plus `level` evenly spaced picks per cell edge. Dual
//! scalars are the remaining cell-boundary functions; their interface copies
//! are tied by signed (+1/−1) Lagrange rows, grouped per interface edge for
//! the edge-average constraint columns.

use super::{Face, LatticeError, LatticeModel, PARAM_TOL};

/// Number of primal enrichment sweeps: 0 keeps corners only, each increment
/// adds one DOF per cell edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct PrimalLevel(pub usize);

/// One Lagrange multiplier row: `+u[lo] − u[hi] = 0` for one displacement
/// component of one shared dual function.
#[derive(Clone, Copy, Debug)]
pub struct LambdaRow {
    pub edge: usize,
    pub comp: usize,
    pub lo_cell: usize,
    pub lo_scalar: usize,
    pub hi_cell: usize,
    pub hi_scalar: usize,
}

#[derive(Clone, Debug)]
pub struct DofPartition {
    level: usize,
    dim: usize,
    primal: Vec<usize>,
    dual: Vec<usize>,
    interior: Vec<usize>,
    remaining: Vec<usize>,
    r_index: Vec<Option<usize>>,
    lambda_rows: Vec<LambdaRow>,
    n_edges: usize,
    /// nonempty edge-average columns as (edge, component)
    q_cols: Vec<(usize, usize)>,
}

impl DofPartition {
    pub fn level(&self) -> usize {
        self.level
    }

    /// Cell-local primal scalars (identical for every cell).
    pub fn primal(&self) -> &[usize] {
        &self.primal
    }

    pub fn dual(&self) -> &[usize] {
        &self.dual
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    /// Non-primal scalars in ascending order; the per-cell remaining block
    /// is this list expanded by `d` components, scalar-major.
    pub fn remaining(&self) -> &[usize] {
        &self.remaining
    }

    /// Index of a scalar within the remaining list, if non-primal.
    pub fn r_scalar_index(&self, scalar: usize) -> Option<usize> {
        self.r_index[scalar]
    }

    /// Coordinate of `(scalar, comp)` within one cell's remaining block.
    pub fn r_dof(&self, scalar: usize, comp: usize) -> Option<usize> {
        self.r_index[scalar].map(|i| i * self.dim + comp)
    }

    /// Length of one cell's remaining block.
    pub fn r_len(&self) -> usize {
        self.remaining.len() * self.dim
    }

    pub fn lambda_rows(&self) -> &[LambdaRow] {
        &self.lambda_rows
    }

    pub fn n_lambda(&self) -> usize {
        self.lambda_rows.len()
    }

    /// Number of interface edges.
    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    /// Nonempty edge-average constraint columns `(edge, comp)`.
    pub fn q_cols(&self) -> &[(usize, usize)] {
        &self.q_cols
    }

    /// Column of the edge-average matrix a multiplier row feeds, if any.
    pub fn q_col_of_row(&self, row: &LambdaRow) -> Option<usize> {
        self.q_cols
            .iter()
            .position(|(e, c)| *e == row.edge && *c == row.comp)
    }
}

/// Edges of the unit parametric domain in 2D: (fixed axis, fixed value,
/// free axis).
fn unit_edges_2d() -> Vec<(usize, f64, usize)> {
    vec![(1, 0.0, 0), (0, 1.0, 1), (1, 1.0, 0), (0, 0.0, 1)]
}

/// Build the primal/dual/interior partition at the given enrichment level.
pub fn partition_dofs(
    model: &LatticeModel,
    level: PrimalLevel,
) -> Result<DofPartition, LatticeError> {
    let dim = model.dim();
    assert_eq!(dim, 2, "DOF partition is implemented for 2D lattices");
    let ref_cell = model.ref_cell();
    let n_ref = ref_cell.n_ref();
    let level = level.0;

    // corner scalars: nearest control point to each unit-domain corner;
    // ties break on position so opposite faces make mirror-image picks
    let mut primal: Vec<usize> = Vec::new();
    for cy in [0.0, 1.0] {
        for cx in [0.0, 1.0] {
            let mut best = (f64::INFINITY, [f64::INFINITY; 2], usize::MAX);
            for a in 0..n_ref {
                if !ref_cell.is_cell_boundary(a) {
                    continue;
                }
                let p = ref_cell.position(a);
                let d2 = (p[0] - cx).powi(2) + (p[1] - cy).powi(2);
                let pos = [p[0], p[1]];
                if d2 < best.0 - PARAM_TOL || ((d2 - best.0).abs() <= PARAM_TOL && pos < best.1)
                {
                    best = (d2, pos, a);
                }
            }
            primal.push(best.2);
        }
    }
    primal.sort_unstable();
    primal.dedup();

    // per-edge picks, nearest on-edge function to each target fraction
    for (axis, value, free) in unit_edges_2d() {
        let on_edge: Vec<usize> = (0..n_ref)
            .filter(|a| (ref_cell.position(*a)[axis] - value).abs() <= PARAM_TOL)
            .collect();
        for k in 1..=level {
            let target = k as f64 / (level + 1) as f64;
            let mut best = (f64::INFINITY, f64::INFINITY, usize::MAX);
            for a in &on_edge {
                if primal.contains(a) {
                    continue;
                }
                let pos = ref_cell.position(*a)[free];
                let d = (pos - target).abs();
                // geometric tie-break: the lower coordinate wins, so the
                // picks on opposite faces sit at matching positions
                if d < best.0 - PARAM_TOL || ((d - best.0).abs() <= PARAM_TOL && pos < best.1) {
                    best = (d, pos, *a);
                }
            }
            if best.2 != usize::MAX {
                primal.push(best.2);
            }
        }
    }
    primal.sort_unstable();
    primal.dedup();

    let dual: Vec<usize> = (0..n_ref)
        .filter(|a| ref_cell.is_cell_boundary(*a) && !primal.contains(a))
        .collect();
    let interior: Vec<usize> = (0..n_ref)
        .filter(|a| !ref_cell.is_cell_boundary(*a) && !primal.contains(a))
        .collect();
    let remaining: Vec<usize> = (0..n_ref).filter(|a| !primal.contains(a)).collect();
    let mut r_index = vec![None; n_ref];
    for (i, a) in remaining.iter().enumerate() {
        r_index[*a] = Some(i);
    }

    // dual functions must be shared by at most two cells (corners are primal)
    let mut owners: std::collections::HashMap<usize, Vec<(usize, usize)>> =
        std::collections::HashMap::new();
    for s in 0..model.num_cells() {
        let map = model.assembly_map(s);
        for a in &dual {
            owners.entry(map[*a]).or_default().push((s, *a));
        }
    }
    for v in owners.values() {
        if v.len() > 2 {
            return Err(LatticeError::UnsupportedSharing { count: v.len() });
        }
    }

    // one nonredundant multiplier row per shared dual pair per component
    let mut lambda_rows = Vec::new();
    for (edge, itf) in model.interfaces().iter().enumerate() {
        let lo_face: Vec<usize> = face_scalars_of(model, itf.lo_face);
        let hi_face: Vec<usize> = face_scalars_of(model, itf.hi_face);
        let hi_map = model.assembly_map(itf.hi);
        let lo_map = model.assembly_map(itf.lo);
        let mut hi_by_global = std::collections::HashMap::new();
        for b in &hi_face {
            hi_by_global.insert(hi_map[*b], *b);
        }
        for a in &lo_face {
            if r_index[*a].is_none() {
                continue; // primal
            }
            let g = lo_map[*a];
            let b = match hi_by_global.get(&g) {
                Some(b) => *b,
                None => continue, // not shared through this interface
            };
            assert!(
                r_index[b].is_some(),
                "partner of a dual function must be dual; the partition picks are face-asymmetric"
            );
            for comp in 0..dim {
                if model.dirichlet_mask()[g * dim + comp] {
                    continue;
                }
                lambda_rows.push(LambdaRow {
                    edge,
                    comp,
                    lo_cell: itf.lo,
                    lo_scalar: *a,
                    hi_cell: itf.hi,
                    hi_scalar: b,
                });
            }
        }
    }

    let n_edges = model.interfaces().len();
    let mut q_cols = Vec::new();
    for e in 0..n_edges {
        for c in 0..dim {
            if lambda_rows.iter().any(|r| r.edge == e && r.comp == c) {
                q_cols.push((e, c));
            }
        }
    }

    Ok(DofPartition {
        level,
        dim,
        primal,
        dual,
        interior,
        remaining,
        r_index,
        lambda_rows,
        n_edges,
        q_cols,
    })
}

fn face_scalars_of(model: &LatticeModel, face: Face) -> Vec<usize> {
    model.ref_cell().face_scalars(face)
}

/// Promote one more DOF per cell edge to primal; the new partition replaces
/// the old one for the remainder of the simulation.
pub fn enrich_primal(
    model: &LatticeModel,
    partition: &DofPartition,
) -> Result<DofPartition, LatticeError> {
    let new = partition_dofs(model, PrimalLevel(partition.level + 1))?;
    if new.primal.len() <= partition.primal.len() {
        return Err(LatticeError::EnrichmentExhausted);
    }
    Ok(new)
}
