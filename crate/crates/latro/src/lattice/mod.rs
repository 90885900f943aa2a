//! Lattice model construction: reference unit-cell gluing, cell tiling via
//! Bézier macro-elements, global C⁰ DOF numbering, boundary conditions, and
//! the primal/dual/interior DOF partition used by the FETI-DP solver.

mod generators;
mod partition;

pub use generators::{geometry_from_json, grid_macro, uc1_cross, uc3_hole, GeometryJson};
pub use partition::{enrich_primal, partition_dofs, DofPartition, LambdaRow, PrimalLevel};

use crate::math::MAX_DIM;
use crate::splines::{BezierMacroElement, SplinePatch};

/// Relative geometric coincidence tolerance (times the bounding-box diameter).
pub const GLUE_TOL_REL: f64 = 1e-10;
/// Upper end of the ambiguous band: nearest distinct control points closer
/// than this (times the diameter) indicate a broken interface.
pub const AMBIGUOUS_TOL_REL: f64 = 1e-4;
/// Tolerance for classifying reference positions against the faces of the
/// unit parametric domain.
pub const PARAM_TOL: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum LatticeError {
    #[error("patches do not share a common degree")]
    DegreeMismatch,
    #[error("ambiguous geometry: nearest control-point distance {dist:e} lies between the glue tolerance and {band:e}")]
    AmbiguousGeometry { dist: f64, band: f64 },
    #[error("glued control points carry inconsistent weights ({a} vs {b})")]
    WeightMismatch { a: f64, b: f64 },
    #[error("non-conforming macro tiling: {0}")]
    NonConformingMacro(String),
    #[error("macro/micro dimension mismatch")]
    DimensionMismatch,
    #[error("interface function shared by {count} cells; only pairwise sharing is supported for dual DOFs")]
    UnsupportedSharing { count: usize },
    #[error("no remaining non-primal edge DOF to promote")]
    EnrichmentExhausted,
    #[error("invalid geometry description: {0}")]
    InvalidGeometry(String),
    #[error(transparent)]
    Spline(#[from] crate::splines::SplineError),
}

/// One face of the unit parametric domain: coordinate `dir` pinned low/high.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Face {
    pub dir: usize,
    pub high: bool,
}

impl Face {
    pub fn all(dim: usize) -> Vec<Face> {
        let mut out = Vec::with_capacity(2 * dim);
        for dir in 0..dim {
            out.push(Face { dir, high: false });
            out.push(Face { dir, high: true });
        }
        out
    }

    pub fn coord(&self) -> f64 {
        if self.high {
            1.0
        } else {
            0.0
        }
    }
}

/// Named outer faces of the lattice bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceTag {
    Left,
    Right,
    Bottom,
    Top,
    Back,
    Front,
}

impl FaceTag {
    pub fn axis_high(&self) -> (usize, bool) {
        match self {
            FaceTag::Left => (0, false),
            FaceTag::Right => (0, true),
            FaceTag::Bottom => (1, false),
            FaceTag::Top => (1, true),
            FaceTag::Back => (2, false),
            FaceTag::Front => (2, true),
        }
    }
}

/// Dirichlet values per component on a tagged outer face (`None` = free).
#[derive(Clone, Debug)]
pub struct FaceDirichlet {
    pub face: FaceTag,
    pub components: [Option<f64>; MAX_DIM],
}

/// Traction (force per unit initial boundary measure) on a tagged outer face.
#[derive(Clone, Debug)]
pub struct FaceTraction {
    pub face: FaceTag,
    pub g0: [f64; MAX_DIM],
}

/// Boundary conditions and loads in the initial configuration.
#[derive(Clone, Debug, Default)]
pub struct BcSpec {
    pub dirichlet: Vec<FaceDirichlet>,
    pub tractions: Vec<FaceTraction>,
    pub body_force: [f64; MAX_DIM],
}

/// Multi-patch reference unit cell with strongly glued C⁰ basis functions.
#[derive(Clone, Debug)]
pub struct ReferenceUnitCell {
    dim: usize,
    patches: Vec<SplinePatch>,
    /// patch-local flat index → cell-local scalar index
    glue_map: Vec<Vec<usize>>,
    n_ref: usize,
    /// cell-local scalar index → control-point position in the reference
    /// parametric domain
    positions: Vec<[f64; MAX_DIM]>,
    /// whether the function sits on the boundary of the unit domain
    on_cell_boundary: Vec<bool>,
}

impl ReferenceUnitCell {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patches(&self) -> &[SplinePatch] {
        &self.patches
    }

    pub fn n_ref(&self) -> usize {
        self.n_ref
    }

    pub fn glue_map(&self) -> &[Vec<usize>] {
        &self.glue_map
    }

    pub fn glue(&self, patch: usize, flat: usize) -> usize {
        self.glue_map[patch][flat]
    }

    pub fn position(&self, scalar: usize) -> &[f64] {
        &self.positions[scalar][..self.dim]
    }

    pub fn is_cell_boundary(&self, scalar: usize) -> bool {
        self.on_cell_boundary[scalar]
    }

    /// Scalars whose reference position lies on a face of the unit domain.
    pub fn face_scalars(&self, face: Face) -> Vec<usize> {
        (0..self.n_ref)
            .filter(|a| (self.positions[*a][face.dir] - face.coord()).abs() <= PARAM_TOL)
            .collect()
    }

    /// Patch sides (patch index, side) whose image lies on a face of the
    /// unit domain.
    pub fn patch_sides_on_face(&self, face: Face) -> Vec<(usize, Face)> {
        let mut out = Vec::new();
        for (k, patch) in self.patches.iter().enumerate() {
            for dir in 0..self.dim {
                for high in [false, true] {
                    let idx = patch.side_indices(dir, high);
                    let on = idx.iter().all(|flat| {
                        (patch.control_point(*flat)[face.dir] - face.coord()).abs() <= PARAM_TOL
                    });
                    if on {
                        out.push((k, Face { dir, high }));
                    }
                }
            }
        }
        out
    }
}

fn bbox_diameter(points: impl Iterator<Item = [f64; MAX_DIM]> + Clone, dim: usize) -> f64 {
    let mut lo = [f64::INFINITY; MAX_DIM];
    let mut hi = [f64::NEG_INFINITY; MAX_DIM];
    for p in points {
        for k in 0..dim {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (0..dim).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }
    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let r = self.find(self.0[i]);
            self.0[i] = r;
        }
        self.0[i]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // lower root wins, keeps numbering deterministic
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

/// Glue matching basis functions across patch interfaces into a C⁰ basis.
///
/// Boundary control points of distinct patches are identified when they
/// coincide within `GLUE_TOL_REL` of the cell diameter. Nearest distinct
/// points inside the ambiguous band abort the build.
pub fn glue_reference_cell(patches: Vec<SplinePatch>) -> Result<ReferenceUnitCell, LatticeError> {
    assert!(!patches.is_empty(), "a unit cell needs at least one patch");
    let dim = patches[0].dim();
    let degree: Vec<usize> = (0..dim).map(|k| patches[0].knot_vector(k).degree()).collect();
    for p in &patches {
        if p.dim() != dim {
            return Err(LatticeError::DimensionMismatch);
        }
        let deg: Vec<usize> = (0..dim).map(|k| p.knot_vector(k).degree()).collect();
        if deg != degree {
            return Err(LatticeError::DegreeMismatch);
        }
    }

    let mut all_points = Vec::new();
    for p in &patches {
        for flat in 0..p.num_basis() {
            let mut q = [0.0; MAX_DIM];
            q[..dim].copy_from_slice(p.control_point(flat));
            all_points.push(q);
        }
    }
    let diam = bbox_diameter(all_points.iter().copied(), dim).max(f64::MIN_POSITIVE);
    let tol = GLUE_TOL_REL * diam;
    let band = AMBIGUOUS_TOL_REL * diam;

    // collect boundary control points: (patch, flat, position, weight)
    let mut boundary: Vec<(usize, usize, [f64; MAX_DIM], f64)> = Vec::new();
    for (k, p) in patches.iter().enumerate() {
        for flat in 0..p.num_basis() {
            if p.is_boundary_index(flat) {
                let mut q = [0.0; MAX_DIM];
                q[..dim].copy_from_slice(p.control_point(flat));
                boundary.push((k, flat, q, p.weight(flat)));
            }
        }
    }

    let m = boundary.len();
    let mut uf = UnionFind::new(m);
    let mut min_above_tol = f64::INFINITY;
    for i in 0..m {
        for j in (i + 1)..m {
            if boundary[i].0 == boundary[j].0 {
                continue; // same patch: distinct functions by construction
            }
            let dist = (0..dim)
                .map(|c| (boundary[i].2[c] - boundary[j].2[c]).powi(2))
                .sum::<f64>()
                .sqrt();
            if dist <= tol {
                if (boundary[i].3 - boundary[j].3).abs() > 1e-12 * boundary[i].3.abs().max(1.0) {
                    return Err(LatticeError::WeightMismatch {
                        a: boundary[i].3,
                        b: boundary[j].3,
                    });
                }
                uf.union(i, j);
            } else if dist < min_above_tol {
                min_above_tol = dist;
            }
        }
    }
    if min_above_tol < band {
        return Err(LatticeError::AmbiguousGeometry { dist: min_above_tol, band });
    }

    // assign cell-local scalar indices in deterministic first-encounter order
    let mut glue_map: Vec<Vec<usize>> = patches.iter().map(|p| vec![usize::MAX; p.num_basis()]).collect();
    let mut positions = Vec::new();
    let mut boundary_of: Vec<usize> = vec![usize::MAX; m]; // uf root -> scalar id
    let mut bidx = std::collections::HashMap::new();
    for (i, (k, flat, _, _)) in boundary.iter().enumerate() {
        bidx.insert((*k, *flat), i);
    }
    let mut n_ref = 0;
    let mut on_cell_boundary = Vec::new();
    for (k, p) in patches.iter().enumerate() {
        for flat in 0..p.num_basis() {
            let id = if let Some(bi) = bidx.get(&(k, flat)) {
                let root = uf.find(*bi);
                if boundary_of[root] == usize::MAX {
                    boundary_of[root] = n_ref;
                    positions.push(boundary[*bi].2);
                    on_cell_boundary.push(false); // classified below
                    n_ref += 1;
                }
                boundary_of[root]
            } else {
                let mut q = [0.0; MAX_DIM];
                q[..dim].copy_from_slice(p.control_point(flat));
                positions.push(q);
                on_cell_boundary.push(false);
                n_ref += 1;
                n_ref - 1
            };
            glue_map[k][flat] = id;
        }
    }
    for (a, pos) in positions.iter().enumerate() {
        on_cell_boundary[a] = (0..dim)
            .any(|k| pos[k].abs() <= PARAM_TOL || (pos[k] - 1.0).abs() <= PARAM_TOL);
    }

    Ok(ReferenceUnitCell {
        dim,
        patches,
        glue_map,
        n_ref,
        positions,
        on_cell_boundary,
    })
}

/// One cell-to-cell interface: the shared macro face, oriented low → high
/// cell index.
#[derive(Clone, Copy, Debug)]
pub struct Interface {
    pub lo: usize,
    pub lo_face: Face,
    pub hi: usize,
    pub hi_face: Face,
}

/// Composed multi-cell lattice with a global C⁰ DOF numbering.
#[derive(Clone, Debug)]
pub struct LatticeModel {
    dim: usize,
    ref_cell: ReferenceUnitCell,
    macro_elements: Vec<BezierMacroElement>,
    /// cell-local scalar → global scalar, one map per cell
    assembly_maps: Vec<Vec<usize>>,
    n_scalar: usize,
    dirichlet_mask: Vec<bool>,
    dirichlet_value: Vec<f64>,
    bc: BcSpec,
    interfaces: Vec<Interface>,
    boundary_faces: Vec<(usize, Face)>,
}

impl LatticeModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ref_cell(&self) -> &ReferenceUnitCell {
        &self.ref_cell
    }

    pub fn num_cells(&self) -> usize {
        self.macro_elements.len()
    }

    pub fn macro_element(&self, s: usize) -> &BezierMacroElement {
        &self.macro_elements[s]
    }

    pub fn assembly_map(&self, s: usize) -> &[usize] {
        &self.assembly_maps[s]
    }

    /// Total number of global scalar basis functions.
    pub fn n_scalar(&self) -> usize {
        self.n_scalar
    }

    /// Total number of displacement DOFs.
    pub fn n_dof(&self) -> usize {
        self.n_scalar * self.dim
    }

    pub fn global_dof(&self, s: usize, scalar: usize, comp: usize) -> usize {
        self.assembly_maps[s][scalar] * self.dim + comp
    }

    pub fn dirichlet_mask(&self) -> &[bool] {
        &self.dirichlet_mask
    }

    pub fn dirichlet_value(&self) -> &[f64] {
        &self.dirichlet_value
    }

    pub fn is_masked(&self, s: usize, scalar: usize, comp: usize) -> bool {
        self.dirichlet_mask[self.global_dof(s, scalar, comp)]
    }

    pub fn bc(&self) -> &BcSpec {
        &self.bc
    }

    pub fn interfaces(&self) -> &[Interface] {
        &self.interfaces
    }

    /// Cell faces lying on the outer boundary of the lattice.
    pub fn boundary_faces(&self) -> &[(usize, Face)] {
        &self.boundary_faces
    }

    /// Cell faces on the outer boundary belonging to a tagged plane; empty
    /// when the tag names an axis the lattice does not have.
    pub fn faces_on_tag(&self, tag: FaceTag) -> Vec<(usize, Face)> {
        let (axis, _) = tag.axis_high();
        if axis >= self.dim {
            return Vec::new();
        }
        let plane = self.tag_plane(tag);
        let tol = self.physical_tol();
        self.boundary_faces
            .iter()
            .copied()
            .filter(|(s, face)| {
                let pts = self.macro_elements[*s].face_points(face.dir, face.high);
                pts.iter().all(|p| (p[axis] - plane).abs() <= tol)
            })
            .collect()
    }

    /// Coordinate of the tagged bounding plane.
    pub fn tag_plane(&self, tag: FaceTag) -> f64 {
        let (axis, high) = tag.axis_high();
        let mut v = if high { f64::NEG_INFINITY } else { f64::INFINITY };
        for el in &self.macro_elements {
            for p in el.points() {
                v = if high { v.max(p[axis]) } else { v.min(p[axis]) };
            }
        }
        v
    }

    fn physical_tol(&self) -> f64 {
        let pts = self
            .macro_elements
            .iter()
            .flat_map(|el| el.points().iter())
            .map(|p| {
                let mut q = [0.0; MAX_DIM];
                q[..self.dim].copy_from_slice(p);
                q
            })
            .collect::<Vec<_>>();
        GLUE_TOL_REL * bbox_diameter(pts.iter().copied(), self.dim).max(f64::MIN_POSITIVE)
    }
}

/// Assemble a lattice from a reference cell and a conforming macro tiling.
pub fn build_lattice(
    ref_cell: ReferenceUnitCell,
    macro_elements: Vec<BezierMacroElement>,
    bc: BcSpec,
) -> Result<LatticeModel, LatticeError> {
    let dim = ref_cell.dim();
    assert!(!macro_elements.is_empty(), "a lattice needs at least one cell");
    for el in &macro_elements {
        if el.dim() != dim {
            return Err(LatticeError::DimensionMismatch);
        }
    }
    let n_cells = macro_elements.len();

    let all_pts: Vec<[f64; MAX_DIM]> = macro_elements
        .iter()
        .flat_map(|el| el.points().iter())
        .map(|p| {
            let mut q = [0.0; MAX_DIM];
            q[..dim].copy_from_slice(p);
            q
        })
        .collect();
    let diam = bbox_diameter(all_pts.iter().copied(), dim).max(f64::MIN_POSITIVE);
    let tol = GLUE_TOL_REL * diam;

    // pair up macro faces by their control nets
    let faces: Vec<(usize, Face, Vec<Vec<f64>>, Vec<f64>)> = macro_elements
        .iter()
        .enumerate()
        .flat_map(|(s, el)| {
            Face::all(dim).into_iter().map(move |f| {
                let pts = el.face_points(f.dir, f.high);
                let centroid = (0..dim)
                    .map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / pts.len() as f64)
                    .collect::<Vec<f64>>();
                (s, f, pts, centroid)
            })
        })
        .collect();

    let same_set = |a: &[Vec<f64>], b: &[Vec<f64>]| -> bool {
        a.len() == b.len()
            && a.iter().all(|p| {
                b.iter().any(|q| {
                    (0..dim).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt() <= tol
                })
            })
    };

    let mut partner = vec![None; faces.len()];
    for i in 0..faces.len() {
        for j in (i + 1)..faces.len() {
            if faces[i].0 == faces[j].0 {
                continue;
            }
            let cd = (0..dim)
                .map(|k| (faces[i].3[k] - faces[j].3[k]).powi(2))
                .sum::<f64>()
                .sqrt();
            if cd > tol {
                continue;
            }
            if !same_set(&faces[i].2, &faces[j].2) {
                return Err(LatticeError::NonConformingMacro(format!(
                    "faces of cells {} and {} overlap without matching control nets",
                    faces[i].0, faces[j].0
                )));
            }
            if partner[i].is_some() || partner[j].is_some() {
                return Err(LatticeError::NonConformingMacro(
                    "a macro face matches more than one neighbor".into(),
                ));
            }
            partner[i] = Some(j);
            partner[j] = Some(i);
        }
    }

    let mut interfaces = Vec::new();
    let mut boundary_faces = Vec::new();
    for i in 0..faces.len() {
        match partner[i] {
            Some(j) if i < j => {
                let (s_a, f_a) = (faces[i].0, faces[i].1);
                let (s_b, f_b) = (faces[j].0, faces[j].1);
                let (lo, lo_face, hi, hi_face) = if s_a < s_b {
                    (s_a, f_a, s_b, f_b)
                } else {
                    (s_b, f_b, s_a, f_a)
                };
                interfaces.push(Interface { lo, lo_face, hi, hi_face });
            }
            Some(_) => {}
            None => boundary_faces.push((faces[i].0, faces[i].1)),
        }
    }

    // physical signatures of cell-boundary functions: macro image of the
    // reference control position; conforming tilings map matching functions
    // to the same point
    let n_ref = ref_cell.n_ref();
    let boundary_scalars: Vec<usize> =
        (0..n_ref).filter(|a| ref_cell.is_cell_boundary(*a)).collect();
    let sig_index: Vec<Option<usize>> = {
        let mut v = vec![None; n_ref];
        for (i, a) in boundary_scalars.iter().enumerate() {
            v[*a] = Some(i);
        }
        v
    };
    let mut signatures = vec![[0.0; MAX_DIM]; n_cells * boundary_scalars.len()];
    for (s, el) in macro_elements.iter().enumerate() {
        for (i, a) in boundary_scalars.iter().enumerate() {
            let e = el.eval(ref_cell.position(*a))?;
            signatures[s * boundary_scalars.len() + i] = e.x;
        }
    }

    let mut uf = UnionFind::new(n_cells * boundary_scalars.len());
    for itf in &interfaces {
        let lo_on = ref_cell.face_scalars(itf.lo_face);
        let hi_on = ref_cell.face_scalars(itf.hi_face);
        for a in &lo_on {
            let ia = itf.lo * boundary_scalars.len() + sig_index[*a].unwrap();
            let pa = signatures[ia];
            let mut matched = None;
            for b in &hi_on {
                let ib = itf.hi * boundary_scalars.len() + sig_index[*b].unwrap();
                let pb = signatures[ib];
                let dist =
                    (0..dim).map(|k| (pa[k] - pb[k]).powi(2)).sum::<f64>().sqrt();
                if dist <= tol {
                    matched = Some(ib);
                    break;
                }
            }
            match matched {
                Some(ib) => uf.union(ia, ib),
                None => {
                    return Err(LatticeError::NonConformingMacro(format!(
                        "function on interface {}–{} has no partner",
                        itf.lo, itf.hi
                    )))
                }
            }
        }
    }

    // global numbering in first-encounter order
    let mut assembly_maps = vec![vec![usize::MAX; n_ref]; n_cells];
    let mut cluster_id: Vec<usize> = vec![usize::MAX; n_cells * boundary_scalars.len()];
    let mut n_scalar = 0;
    for s in 0..n_cells {
        for a in 0..n_ref {
            let g = match sig_index[a] {
                Some(i) => {
                    let root = uf.find(s * boundary_scalars.len() + i);
                    if cluster_id[root] == usize::MAX {
                        cluster_id[root] = n_scalar;
                        n_scalar += 1;
                    }
                    cluster_id[root]
                }
                None => {
                    n_scalar += 1;
                    n_scalar - 1
                }
            };
            assembly_maps[s][a] = g;
        }
    }

    let mut model = LatticeModel {
        dim,
        ref_cell,
        macro_elements,
        assembly_maps,
        n_scalar,
        dirichlet_mask: vec![false; n_scalar * dim],
        dirichlet_value: vec![0.0; n_scalar * dim],
        bc,
        interfaces,
        boundary_faces,
    };
    apply_dirichlet_spec(&mut model)?;
    Ok(model)
}

fn apply_dirichlet_spec(model: &mut LatticeModel) -> Result<(), LatticeError> {
    let dim = model.dim;
    let tol = model.physical_tol();
    let specs = model.bc.dirichlet.clone();
    for spec in &specs {
        let (axis, _) = spec.face.axis_high();
        if axis >= dim {
            return Err(LatticeError::InvalidGeometry(format!(
                "Dirichlet face {:?} names an axis the lattice does not have",
                spec.face
            )));
        }
        let plane = model.tag_plane(spec.face);
        let mut hit_any = false;
        for s in 0..model.num_cells() {
            let el = &model.macro_elements[s];
            for a in 0..model.ref_cell.n_ref() {
                if !model.ref_cell.is_cell_boundary(a) {
                    continue;
                }
                let sig = el.eval(model.ref_cell.position(a))?;
                if (sig.x[axis] - plane).abs() <= tol {
                    hit_any = true;
                    let g = model.assembly_maps[s][a];
                    for (c, v) in spec.components.iter().enumerate().take(dim) {
                        if let Some(v) = v {
                            model.dirichlet_mask[g * dim + c] = true;
                            model.dirichlet_value[g * dim + c] = *v;
                        }
                    }
                }
            }
        }
        if !hit_any {
            return Err(LatticeError::InvalidGeometry(format!(
                "Dirichlet face {:?} selects no basis functions",
                spec.face
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
