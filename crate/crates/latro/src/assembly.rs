//! Quadrature rules and operator assembly on the reference unit cell.
//!
//! All integrals are pulled back to the reference cell: the micro-patch
//! geometry and basis gradients are precomputed once per rule and shared by
//! every cell and Newton iteration; only the macro mapping and the
//! deformation state vary per cell. Local tangent matrices share one
//! reference-cell sparsity pattern, which also fixes the snapshot readout
//! order for the reduced-basis stage.

use std::sync::Arc;

use crate::hyperelastic::{
    cauchy_stress, combined_tensor, pullback_combined, MaterialError, MaterialParams,
};
use crate::lattice::{Face, LatticeModel};
use crate::math::{gauss_legendre, SqMat, MAX_DIM};

#[derive(Debug, thiserror::Error)]
pub enum AssemblyError {
    #[error("inverted element in cell {cell}: det F = {det}")]
    InvertedElement { cell: usize, det: f64 },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("configuration error: {0}")]
    Config(String),
}

fn material_error(cell: usize, e: MaterialError) -> AssemblyError {
    match e {
        MaterialError::InvertedElement { det } => AssemblyError::InvertedElement { cell, det },
        other => AssemblyError::Geometry(other.to_string()),
    }
}

/// Reference-cell sparsity pattern over scalar basis pairs, CSR by row.
///
/// Identical for every cell and iteration; nodal blocks are dense `d × d`.
#[derive(Debug)]
pub struct Pattern {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl Pattern {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn slot(&self, a: usize, b: usize) -> Option<usize> {
        let lo = self.row_ptr[a];
        let hi = self.row_ptr[a + 1];
        self.col_idx[lo..hi].binary_search(&b).ok().map(|k| lo + k)
    }
}

/// One knot-span element of one micro patch.
#[derive(Debug)]
struct Element {
    patch: usize,
    lo: [f64; MAX_DIM],
    hi: [f64; MAX_DIM],
    /// cell-local scalars active on the element, tensor order
    active: Vec<usize>,
    /// pattern slots for all active pairs, `a`-major
    slots: Vec<usize>,
}

/// Elements and sparsity pattern of the reference cell (rule-independent).
#[derive(Debug)]
pub struct Discretization {
    dim: usize,
    n_ref: usize,
    elements: Vec<Element>,
    pattern: Arc<Pattern>,
}

impl Discretization {
    pub fn new(model: &LatticeModel) -> Self {
        let ref_cell = model.ref_cell();
        let dim = ref_cell.dim();
        let n_ref = ref_cell.n_ref();

        let mut elements = Vec::new();
        for (k, patch) in ref_cell.patches().iter().enumerate() {
            let spans: Vec<Vec<(f64, f64)>> =
                (0..dim).map(|d| patch.knot_vector(d).spans()).collect();
            let counts: Vec<usize> = spans.iter().map(|s| s.len()).collect();
            let total: usize = counts.iter().product();
            for flat in 0..total {
                let mut rem = flat;
                let mut lo = [0.0; MAX_DIM];
                let mut hi = [0.0; MAX_DIM];
                let mut mid = [0.0; MAX_DIM];
                for d in 0..dim {
                    let i = rem % counts[d];
                    rem /= counts[d];
                    lo[d] = spans[d][i].0;
                    hi[d] = spans[d][i].1;
                    mid[d] = 0.5 * (lo[d] + hi[d]);
                }
                // active tensor functions at the span, i0 fastest (matches
                // the basis evaluation order)
                let firsts: Vec<usize> = (0..dim)
                    .map(|d| patch.knot_vector(d).find_span(mid[d]) - patch.knot_vector(d).degree())
                    .collect();
                let m_per: Vec<usize> =
                    (0..dim).map(|d| patch.knot_vector(d).degree() + 1).collect();
                let m: usize = m_per.iter().product();
                let ns = patch.num_basis_per_dir();
                let mut active = Vec::with_capacity(m);
                let mut multi = vec![0usize; dim];
                for _ in 0..m {
                    let mut pf = 0;
                    for d in (0..dim).rev() {
                        pf = pf * ns[d] + (firsts[d] + multi[d]);
                    }
                    active.push(ref_cell.glue(k, pf));
                    for d in 0..dim {
                        multi[d] += 1;
                        if multi[d] < m_per[d] {
                            break;
                        }
                        multi[d] = 0;
                    }
                }
                elements.push(Element { patch: k, lo, hi, active, slots: Vec::new() });
            }
        }

        // pattern from element-wise overlaps
        let mut rows: Vec<std::collections::BTreeSet<usize>> =
            vec![std::collections::BTreeSet::new(); n_ref];
        for el in &elements {
            for a in &el.active {
                for b in &el.active {
                    rows[*a].insert(*b);
                }
            }
        }
        let mut row_ptr = vec![0usize; n_ref + 1];
        let mut col_idx = Vec::new();
        for (a, set) in rows.iter().enumerate() {
            col_idx.extend(set.iter().copied());
            row_ptr[a + 1] = col_idx.len();
        }
        let pattern = Arc::new(Pattern { row_ptr, col_idx });

        for el in &mut elements {
            let m = el.active.len();
            let mut slots = Vec::with_capacity(m * m);
            for a in &el.active {
                for b in &el.active {
                    slots.push(pattern.slot(*a, *b).expect("pair is in the pattern"));
                }
            }
            el.slots = slots;
        }

        Self { dim, n_ref, elements, pattern }
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn n_ref(&self) -> usize {
        self.n_ref
    }

    /// Snapshot length: pattern entries times the dense block size.
    pub fn snapshot_len(&self) -> usize {
        self.pattern.nnz() * self.dim * self.dim
    }
}

/// One precomputed quadrature point (cell-independent data only).
struct QuadPoint {
    element: usize,
    /// parametric weight: Gauss weights mapped to the knot span
    w_param: f64,
    /// micro image of the point: position in the reference/macro domain
    xi: [f64; MAX_DIM],
    det_js: f64,
    /// values of the active basis functions
    values: Vec<f64>,
    /// reference-domain gradients `J_S^{-T} ∇_θ φ`
    grad_xi: Vec<[f64; MAX_DIM]>,
}

/// Tensor-product Gauss–Legendre rule over all elements of the reference
/// cell, with basis data precomputed.
pub struct QuadratureRule {
    points_per_dir: usize,
    qpts: Vec<QuadPoint>,
}

impl QuadratureRule {
    fn build(
        model: &LatticeModel,
        disc: &Discretization,
        points_per_dir: usize,
    ) -> Result<Self, AssemblyError> {
        let dim = disc.dim;
        let ref_cell = model.ref_cell();
        let (nodes, weights) = gauss_legendre(points_per_dir);
        let mut qpts = Vec::new();
        for (ei, el) in disc.elements.iter().enumerate() {
            let patch = &ref_cell.patches()[el.patch];
            let n_loc: usize = points_per_dir.pow(dim as u32);
            for flat in 0..n_loc {
                let mut rem = flat;
                let mut theta = [0.0; MAX_DIM];
                let mut w = 1.0;
                for d in 0..dim {
                    let i = rem % points_per_dir;
                    rem /= points_per_dir;
                    let half = 0.5 * (el.hi[d] - el.lo[d]);
                    theta[d] = el.lo[d] + half * (nodes[i] + 1.0);
                    w *= weights[i] * half;
                }
                let (indices, values, grads) = patch
                    .eval_basis_grad(&theta[..dim])
                    .map_err(|e| AssemblyError::Geometry(e.to_string()))?;
                debug_assert_eq!(
                    indices.iter().map(|f| ref_cell.glue(el.patch, *f)).collect::<Vec<_>>(),
                    el.active
                );
                let me = patch
                    .eval(&theta[..dim])
                    .map_err(|e| AssemblyError::Geometry(e.to_string()))?;
                let det_js = me.jacobian.det();
                if det_js <= 0.0 {
                    return Err(AssemblyError::Geometry(format!(
                        "micro patch {} has nonpositive Jacobian at {:?}",
                        el.patch,
                        &theta[..dim]
                    )));
                }
                let js_inv_t = me
                    .jacobian
                    .inverse()
                    .expect("checked determinant")
                    .transpose();
                let mut xi = [0.0; MAX_DIM];
                for d in 0..dim {
                    let v = me.x[d];
                    if v < -1e-12 || v > 1.0 + 1e-12 {
                        return Err(AssemblyError::Geometry(format!(
                            "micro image {:?} leaves the macro domain",
                            &me.x[..dim]
                        )));
                    }
                    xi[d] = v.clamp(0.0, 1.0);
                }
                let grad_xi: Vec<[f64; MAX_DIM]> = grads
                    .iter()
                    .map(|g| js_inv_t.matvec(&g[..dim]))
                    .collect();
                qpts.push(QuadPoint { element: ei, w_param: w, xi, det_js, values, grad_xi });
            }
        }
        Ok(Self { points_per_dir, qpts })
    }

    pub fn points_per_dir(&self) -> usize {
        self.points_per_dir
    }

    pub fn num_points(&self) -> usize {
        self.qpts.len()
    }

    /// Sum of parametric weights per patch (each patch covers `[0,1]^d`).
    pub fn patch_weight_sums(&self, disc: &Discretization) -> Vec<f64> {
        let n_patches = disc.elements.iter().map(|e| e.patch).max().unwrap_or(0) + 1;
        let mut sums = vec![0.0; n_patches];
        for q in &self.qpts {
            sums[disc.elements[q.element].patch] += q.w_param;
        }
        sums
    }
}

/// Full-order rule: `(p + 1)^d` points per element.
pub fn full_rule(model: &LatticeModel, disc: &Discretization) -> Result<QuadratureRule, AssemblyError> {
    let p = model.ref_cell().patches()[0].knot_vector(0).degree();
    QuadratureRule::build(model, disc, p + 1)
}

/// Reduced rule for snapshot generation (default 2 points per direction).
pub fn reduced_rule(
    model: &LatticeModel,
    disc: &Discretization,
    points_per_dir: usize,
) -> Result<QuadratureRule, AssemblyError> {
    assert!(points_per_dir >= 1);
    QuadratureRule::build(model, disc, points_per_dir)
}

/// Cell-local tangent matrix on the shared reference pattern.
#[derive(Clone, Debug)]
pub struct LocalTangent {
    pub cell: usize,
    pub pattern: Arc<Pattern>,
    /// block values, `slot * d² + i * d + j`
    pub values: Vec<f64>,
    pub dim: usize,
}

impl LocalTangent {
    pub fn block(&self, slot: usize, i: usize, j: usize) -> f64 {
        self.values[slot * self.dim * self.dim + i * self.dim + j]
    }

    /// `y += K · x` on cell-local DOF vectors (scalar-major).
    pub fn matvec_add(&self, x: &[f64], y: &mut [f64]) {
        let d = self.dim;
        for a in 0..self.pattern.row_ptr.len() - 1 {
            for k in self.pattern.row_ptr[a]..self.pattern.row_ptr[a + 1] {
                let b = self.pattern.col_idx[k];
                for i in 0..d {
                    let mut s = 0.0;
                    for j in 0..d {
                        s += self.values[k * d * d + i * d + j] * x[b * d + j];
                    }
                    y[a * d + i] += s;
                }
            }
        }
    }

    /// Maximum relative asymmetry over paired slots.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for a in 0..self.pattern.row_ptr.len() - 1 {
            for k in self.pattern.row_ptr[a]..self.pattern.row_ptr[a + 1] {
                let b = self.pattern.col_idx[k];
                let kt = self.pattern.slot(b, a).expect("pattern is symmetric");
                for i in 0..d {
                    for j in 0..d {
                        let v = self.values[k * d * d + i * d + j];
                        let w = self.values[kt * d * d + j * d + i];
                        worst = worst.max((v - w).abs());
                        scale = scale.max(v.abs());
                    }
                }
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }
}

/// Gather the cell-local DOF vector of cell `s` from a global vector.
pub fn gather_cell(model: &LatticeModel, s: usize, u: &[f64]) -> Vec<f64> {
    let d = model.dim();
    let map = model.assembly_map(s);
    let mut out = vec![0.0; map.len() * d];
    for (a, g) in map.iter().enumerate() {
        for c in 0..d {
            out[a * d + c] = u[g * d + c];
        }
    }
    out
}

/// Geometry of the macro mapping at one quadrature point.
struct MacroPoint {
    jb: SqMat,
    jb_inv_t: SqMat,
    det_jb: f64,
}

fn macro_point(model: &LatticeModel, s: usize, xi: &[f64]) -> Result<MacroPoint, AssemblyError> {
    let me = model
        .macro_element(s)
        .eval(xi)
        .map_err(|e| AssemblyError::Geometry(e.to_string()))?;
    let det_jb = me.jacobian.det();
    if det_jb <= 0.0 {
        return Err(AssemblyError::Geometry(format!(
            "macro element {} has nonpositive Jacobian",
            s
        )));
    }
    Ok(MacroPoint {
        jb: me.jacobian,
        jb_inv_t: me.jacobian.inverse().expect("checked determinant").transpose(),
        det_jb,
    })
}

/// Deformation gradient from the cell-local DOFs at one quadrature point.
fn point_deformation(
    dim: usize,
    q: &QuadPoint,
    active: &[usize],
    mp: &MacroPoint,
    u_s: &[f64],
) -> SqMat {
    let mut grad_u = SqMat::zeros(dim);
    for (a_loc, a) in active.iter().enumerate() {
        let g_x = mp.jb_inv_t.matvec(&q.grad_xi[a_loc][..dim]);
        for i in 0..dim {
            let ui = u_s[a * dim + i];
            for j in 0..dim {
                grad_u.add_to(i, j, ui * g_x[j]);
            }
        }
    }
    SqMat::identity(dim).add(&grad_u)
}

/// Assemble the local tangent of cell `s` at state `u_s` with the given
/// rule; rows and columns of Dirichlet-constrained local DOFs are zeroed.
pub fn local_tangent(
    model: &LatticeModel,
    disc: &Discretization,
    rule: &QuadratureRule,
    s: usize,
    u_s: &[f64],
    params: &MaterialParams,
) -> Result<LocalTangent, AssemblyError> {
    local_tangent_impl(model, disc, rule, s, u_s, params, true)
}

/// Local tangent without Dirichlet elimination; the constrained coupling
/// columns are needed to predict lifting steps of imposed displacements.
pub fn local_tangent_unmasked(
    model: &LatticeModel,
    disc: &Discretization,
    rule: &QuadratureRule,
    s: usize,
    u_s: &[f64],
    params: &MaterialParams,
) -> Result<LocalTangent, AssemblyError> {
    local_tangent_impl(model, disc, rule, s, u_s, params, false)
}

fn local_tangent_impl(
    model: &LatticeModel,
    disc: &Discretization,
    rule: &QuadratureRule,
    s: usize,
    u_s: &[f64],
    params: &MaterialParams,
    mask: bool,
) -> Result<LocalTangent, AssemblyError> {
    let d = model.dim();
    let mut values = vec![0.0; disc.pattern.nnz() * d * d];
    for q in &rule.qpts {
        let el = &disc.elements[q.element];
        let mp = macro_point(model, s, &q.xi[..d])?;
        let f = point_deformation(d, q, &el.active, &mp, u_s);
        let det_f = f.det();
        if det_f <= 0.0 || !det_f.is_finite() {
            return Err(AssemblyError::InvertedElement { cell: s, det: det_f });
        }
        let dt = combined_tensor(&f, params).map_err(|e| material_error(s, e))?;
        let j_psi = f.matmul(&mp.jb);
        let d_ref = pullback_combined(&dt, &j_psi).map_err(|e| material_error(s, e))?;
        let w = q.w_param * q.det_js;

        let m = el.active.len();
        for ai in 0..m {
            let ga = &q.grad_xi[ai];
            for bi in 0..m {
                let gb = &q.grad_xi[bi];
                let slot = el.slots[ai * m + bi];
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for k in 0..d {
                            for l in 0..d {
                                acc += d_ref.get(i, j, k, l) * ga[k] * gb[l];
                            }
                        }
                        values[slot * d * d + i * d + j] += w * acc;
                    }
                }
            }
        }
    }

    // Dirichlet elimination at the cell level
    if mask {
        let map = model.assembly_map(s);
        for a in 0..disc.n_ref {
            for k in disc.pattern.row_ptr[a]..disc.pattern.row_ptr[a + 1] {
                let b = disc.pattern.col_idx[k];
                for i in 0..d {
                    for j in 0..d {
                        if model.dirichlet_mask()[map[a] * d + i]
                            || model.dirichlet_mask()[map[b] * d + j]
                        {
                            values[k * d * d + i * d + j] = 0.0;
                        }
                    }
                }
            }
        }
    }

    Ok(LocalTangent { cell: s, pattern: disc.pattern.clone(), values, dim: d })
}

/// Internal force vector of cell `s` (unmasked).
pub fn local_internal_force(
    model: &LatticeModel,
    disc: &Discretization,
    rule: &QuadratureRule,
    s: usize,
    u_s: &[f64],
    params: &MaterialParams,
) -> Result<Vec<f64>, AssemblyError> {
    let d = model.dim();
    let mut f_int = vec![0.0; disc.n_ref * d];
    for q in &rule.qpts {
        let el = &disc.elements[q.element];
        let mp = macro_point(model, s, &q.xi[..d])?;
        let f = point_deformation(d, q, &el.active, &mp, u_s);
        let det_f = f.det();
        if det_f <= 0.0 || !det_f.is_finite() {
            return Err(AssemblyError::InvertedElement { cell: s, det: det_f });
        }
        let sigma = cauchy_stress(&f, params).map_err(|e| material_error(s, e))?;
        let j_psi = f.matmul(&mp.jb);
        let j_psi_inv_t = j_psi
            .inverse()
            .ok_or(AssemblyError::InvertedElement { cell: s, det: j_psi.det() })?
            .transpose();
        let det_j_psi = det_f * mp.det_jb;
        let w = q.w_param * q.det_js * det_j_psi;
        for (a_loc, a) in el.active.iter().enumerate() {
            let g_x = j_psi_inv_t.matvec(&q.grad_xi[a_loc][..d]);
            let sg = sigma.matvec(&g_x[..d]);
            for i in 0..d {
                f_int[a * d + i] += w * sg[i];
            }
        }
    }
    Ok(f_int)
}

/// External load vectors, assembled once per model (independent of `u`).
pub struct ExternalLoads {
    /// per-cell local vectors at load factor 1 (unmasked)
    pub local: Vec<Vec<f64>>,
    /// assembled global vector at load factor 1 (unmasked)
    pub global: Vec<f64>,
}

/// Assemble body-force and traction contributions in the initial
/// configuration.
pub fn assemble_external(
    model: &LatticeModel,
    disc: &Discretization,
    rule: &QuadratureRule,
) -> Result<ExternalLoads, AssemblyError> {
    let d = model.dim();
    let n_cells = model.num_cells();
    let mut local = vec![vec![0.0; disc.n_ref * d]; n_cells];

    // body force: ∫ f0 φ |det J_B| |det J_S| dθ
    let f0 = model.bc().body_force;
    if f0[..d].iter().any(|v| *v != 0.0) {
        for s in 0..n_cells {
            for q in &rule.qpts {
                let el = &disc.elements[q.element];
                let mp = macro_point(model, s, &q.xi[..d])?;
                let w = q.w_param * q.det_js * mp.det_jb;
                for (a_loc, a) in el.active.iter().enumerate() {
                    for i in 0..d {
                        local[s][a * d + i] += w * f0[i] * q.values[a_loc];
                    }
                }
            }
        }
    }

    // tractions on tagged outer faces
    for spec in &model.bc().tractions {
        let faces = model.faces_on_tag(spec.face);
        if faces.is_empty() {
            return Err(AssemblyError::Config(format!(
                "traction face {:?} lies on no lattice boundary face",
                spec.face
            )));
        }
        for (s, face) in faces {
            integrate_traction(model, disc, s, face, &spec.g0, &mut local[s])?;
        }
    }

    let mut global = vec![0.0; model.n_dof()];
    for s in 0..n_cells {
        let map = model.assembly_map(s);
        for a in 0..disc.n_ref {
            for c in 0..d {
                global[map[a] * d + c] += local[s][a * d + c];
            }
        }
    }
    Ok(ExternalLoads { local, global })
}

/// 1D quadrature of `g0 φ ds` along the micro-patch edges of one cell face.
fn integrate_traction(
    model: &LatticeModel,
    disc: &Discretization,
    s: usize,
    face: Face,
    g0: &[f64; MAX_DIM],
    out: &mut [f64],
) -> Result<(), AssemblyError> {
    let d = model.dim();
    assert_eq!(d, 2, "traction integration is implemented for 2D");
    let ref_cell = model.ref_cell();
    let p = ref_cell.patches()[0].knot_vector(0).degree();
    let (nodes, weights) = gauss_legendre(p + 1);
    let _ = disc;
    for (k, side) in ref_cell.patch_sides_on_face(face) {
        let patch = &ref_cell.patches()[k];
        let free = 1 - side.dir;
        for (lo, hi) in patch.knot_vector(free).spans() {
            let half = 0.5 * (hi - lo);
            for (x, w) in nodes.iter().zip(&weights) {
                let t = lo + half * (x + 1.0);
                let mut theta = [0.0; MAX_DIM];
                theta[side.dir] = side.coord();
                theta[free] = t;
                let (indices, values, _) = patch
                    .eval_basis_grad(&theta[..d])
                    .map_err(|e| AssemblyError::Geometry(e.to_string()))?;
                let me = patch
                    .eval(&theta[..d])
                    .map_err(|e| AssemblyError::Geometry(e.to_string()))?;
                let mp = macro_point(model, s, &me.x[..d])?;
                // dX/dt = J_B · J_S · e_free
                let mut e_free = [0.0; MAX_DIM];
                e_free[free] = 1.0;
                let dxi = me.jacobian.matvec(&e_free[..d]);
                let dx = mp.jb.matvec(&dxi[..d]);
                let ds = (0..d).map(|i| dx[i] * dx[i]).sum::<f64>().sqrt();
                for (a_loc, flat) in indices.iter().enumerate() {
                    let a = ref_cell.glue(k, *flat);
                    for i in 0..d {
                        out[a * d + i] += w * half * g0[i] * values[a_loc] * ds;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Zero the Dirichlet-constrained entries of a global vector in place.
pub fn mask_global(model: &LatticeModel, v: &mut [f64]) {
    for (i, m) in model.dirichlet_mask().iter().enumerate() {
        if *m {
            v[i] = 0.0;
        }
    }
}

/// Global residual `r(u) = f_int(u) − λ f_ext`, Dirichlet rows zeroed.
///
/// With `with_locals`, the per-cell masked local residuals are returned too
/// (torn right-hand sides for the FETI-DP path).
pub fn global_residual(
    model: &LatticeModel,
    disc: &Discretization,
    rule: &QuadratureRule,
    u: &[f64],
    params: &MaterialParams,
    ext: &ExternalLoads,
    load_factor: f64,
    with_locals: bool,
) -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>), AssemblyError> {
    let d = model.dim();
    let mut global = vec![0.0; model.n_dof()];
    let mut locals = if with_locals {
        Some(Vec::with_capacity(model.num_cells()))
    } else {
        None
    };
    for s in 0..model.num_cells() {
        let u_s = gather_cell(model, s, u);
        let mut r_s = local_internal_force(model, disc, rule, s, &u_s, params)?;
        for (r, f) in r_s.iter_mut().zip(&ext.local[s]) {
            *r -= load_factor * f;
        }
        let map = model.assembly_map(s);
        for a in 0..disc.n_ref {
            for c in 0..d {
                global[map[a] * d + c] += r_s[a * d + c];
            }
        }
        if let Some(locals) = locals.as_mut() {
            for a in 0..disc.n_ref {
                for c in 0..d {
                    if model.dirichlet_mask()[map[a] * d + c] {
                        r_s[a * d + c] = 0.0;
                    }
                }
            }
            locals.push(r_s);
        }
    }
    mask_global(model, &mut global);
    Ok((global, locals))
}

/// Residual without Dirichlet masking (reaction-force post-processing).
pub fn global_residual_raw(
    model: &LatticeModel,
    disc: &Discretization,
    rule: &QuadratureRule,
    u: &[f64],
    params: &MaterialParams,
    ext: &ExternalLoads,
    load_factor: f64,
) -> Result<Vec<f64>, AssemblyError> {
    let d = model.dim();
    let mut global = vec![0.0; model.n_dof()];
    for s in 0..model.num_cells() {
        let u_s = gather_cell(model, s, u);
        let r_s = local_internal_force(model, disc, rule, s, &u_s, params)?;
        let map = model.assembly_map(s);
        for a in 0..disc.n_ref {
            for c in 0..d {
                global[map[a] * d + c] += r_s[a * d + c] - load_factor * ext.local[s][a * d + c];
            }
        }
    }
    Ok(global)
}

/// Snapshot vector of cell `s`: the masked reduced-quadrature tangent read
/// out in the fixed pattern order.
pub fn snapshot(
    model: &LatticeModel,
    disc: &Discretization,
    reduced: &QuadratureRule,
    s: usize,
    u_s: &[f64],
    params: &MaterialParams,
) -> Result<Vec<f64>, AssemblyError> {
    Ok(local_tangent(model, disc, reduced, s, u_s, params)?.values)
}

/// Map between masked global DOFs and the condensed free numbering.
pub struct DirichletElim {
    pub free_of_dof: Vec<Option<usize>>,
    pub dof_of_free: Vec<usize>,
}

impl DirichletElim {
    pub fn new(model: &LatticeModel) -> Self {
        let mut free_of_dof = vec![None; model.n_dof()];
        let mut dof_of_free = Vec::new();
        for (i, m) in model.dirichlet_mask().iter().enumerate() {
            if !m {
                free_of_dof[i] = Some(dof_of_free.len());
                dof_of_free.push(i);
            }
        }
        Self { free_of_dof, dof_of_free }
    }

    pub fn n_free(&self) -> usize {
        self.dof_of_free.len()
    }

    pub fn restrict(&self, v: &[f64]) -> Vec<f64> {
        self.dof_of_free.iter().map(|i| v[*i]).collect()
    }

    pub fn expand(&self, v_free: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.free_of_dof.len()];
        for (k, i) in self.dof_of_free.iter().enumerate() {
            out[*i] = v_free[k];
        }
        out
    }
}

/// Assemble the Dirichlet-eliminated global tangent as sparse triplets in
/// the free numbering.
pub fn global_tangent_triplets(
    model: &LatticeModel,
    disc: &Discretization,
    rule: &QuadratureRule,
    u: &[f64],
    params: &MaterialParams,
    elim: &DirichletElim,
) -> Result<Vec<(usize, usize, f64)>, AssemblyError> {
    let d = model.dim();
    let mut triplets = Vec::new();
    for s in 0..model.num_cells() {
        let u_s = gather_cell(model, s, u);
        let k_s = local_tangent(model, disc, rule, s, &u_s, params)?;
        let map = model.assembly_map(s);
        for a in 0..disc.n_ref {
            for k in disc.pattern.row_ptr[a]..disc.pattern.row_ptr[a + 1] {
                let b = disc.pattern.col_idx[k];
                for i in 0..d {
                    let Some(row) = elim.free_of_dof[map[a] * d + i] else { continue };
                    for j in 0..d {
                        let Some(col) = elim.free_of_dof[map[b] * d + j] else { continue };
                        let v = k_s.values[k * d * d + i * d + j];
                        if v != 0.0 {
                            triplets.push((row, col, v));
                        }
                    }
                }
            }
        }
    }
    Ok(triplets)
}
