//! Built-in unit-cell and macro-geometry generators, plus the geometry file
//! format.
//!
//! Cells are described analytically and sampled onto degree-`p`,
//! `n_e`-elements-per-direction patches at the Greville abscissae. For the
//! piecewise-bilinear cross cell this reproduces the geometry exactly; for
//! the hole cell the circular arc is approximated by its spline quasi
//! interpolant at the requested resolution (interfaces stay exactly
//! matching either way).

use serde::{Deserialize, Serialize};

use super::{glue_reference_cell, LatticeError, ReferenceUnitCell};
use crate::splines::{BezierMacroElement, KnotVector, SplinePatch};

/// Degree-`p`, `n_e`-element patch sampling an analytic map at the Greville
/// tensor grid.
fn sampled_patch(
    p: usize,
    n_e: usize,
    map: impl Fn(f64, f64) -> [f64; 2],
) -> SplinePatch {
    let kv = KnotVector::uniform(p, n_e);
    let n = kv.num_basis();
    let mut points = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let x = map(kv.greville(i), kv.greville(j));
            points.push(vec![x[0], x[1]]);
        }
    }
    SplinePatch::polynomial(vec![kv.clone(), kv], points).expect("sampled patch is valid")
}

/// Bilinear quad patch from its four parametric corners
/// `(θ₁, θ₂) ∈ {0,1}²`, refined to degree `p` with `n_e` elements.
fn quad_patch(p: usize, n_e: usize, p00: [f64; 2], p10: [f64; 2], p01: [f64; 2], p11: [f64; 2]) -> SplinePatch {
    sampled_patch(p, n_e, move |t1, t2| {
        let mut x = [0.0; 2];
        for k in 0..2 {
            x[k] = (1.0 - t1) * (1.0 - t2) * p00[k]
                + t1 * (1.0 - t2) * p10[k]
                + (1.0 - t1) * t2 * p01[k]
                + t1 * t2 * p11[k];
        }
        x
    })
}

/// Crossed-truss unit cell: a hollow square frame with two diagonal struts
/// meeting in a small central diamond, 28 quad patches.
///
/// `frame_t` is the frame thickness, `strut_s` the axis-aligned half-width
/// of the diagonal strips (`|y − x| ≤ strut_s`). Requires
/// `strut_s < frame_t` and `frame_t + strut_s < 1/2`.
pub fn uc1_cross(p: usize, n_e: usize, frame_t: f64, strut_s: f64) -> Result<ReferenceUnitCell, LatticeError> {
    let t = frame_t;
    let s = strut_s;
    if !(s > 0.0 && t > s && t + s < 0.5) {
        return Err(LatticeError::InvalidGeometry(format!(
            "cross cell needs 0 < s < t and t + s < 1/2, got t = {}, s = {}",
            t, s
        )));
    }
    let mut quads: Vec<[[f64; 2]; 4]> = Vec::new();
    let rect = |x0: f64, x1: f64, y0: f64, y1: f64| -> [[f64; 2]; 4] {
        [[x0, y0], [x1, y0], [x0, y1], [x1, y1]]
    };

    // frame: 4 corner blocks + 3 pieces per side
    quads.push(rect(0.0, t, 0.0, t));
    quads.push(rect(1.0 - t, 1.0, 0.0, t));
    quads.push(rect(0.0, t, 1.0 - t, 1.0));
    quads.push(rect(1.0 - t, 1.0, 1.0 - t, 1.0));
    for &(a, b) in &[(t, t + s), (t + s, 1.0 - t - s), (1.0 - t - s, 1.0 - t)] {
        quads.push(rect(a, b, 0.0, t)); // bottom
        quads.push(rect(a, b, 1.0 - t, 1.0)); // top
        quads.push(rect(0.0, t, a, b)); // left
        quads.push(rect(1.0 - t, 1.0, a, b)); // right
    }

    // central diamond vertices and edge midpoints
    let c0 = [0.5, 0.5];
    let vs = [0.5, 0.5 - s];
    let ve = [0.5 + s, 0.5];
    let vn = [0.5, 0.5 + s];
    let vw = [0.5 - s, 0.5];
    let msw = [0.5 - s / 2.0, 0.5 - s / 2.0];
    let mse = [0.5 + s / 2.0, 0.5 - s / 2.0];
    let mne = [0.5 + s / 2.0, 0.5 + s / 2.0];
    let mnw = [0.5 - s / 2.0, 0.5 + s / 2.0];

    // diamond split along both cell diagonals
    quads.push([vs, mse, msw, c0]);
    quads.push([ve, mne, mse, c0]);
    quads.push([vn, mnw, mne, c0]);
    quads.push([vw, msw, mnw, c0]);

    // strut arms, two quads per arm split along the strut axis
    // main diagonal, south-west arm
    quads.push([[t, t], [t + s, t], msw, vs]);
    quads.push([[t, t], msw, [t, t + s], vw]);
    // main diagonal, north-east arm (180° rotation)
    quads.push([[1.0 - t, 1.0 - t], [1.0 - t - s, 1.0 - t], mne, vn]);
    quads.push([[1.0 - t, 1.0 - t], mne, [1.0 - t, 1.0 - t - s], ve]);
    // anti-diagonal, south-east arm
    quads.push([[1.0 - t, t], mse, [1.0 - t - s, t], vs]);
    quads.push([[1.0 - t, t], [1.0 - t, t + s], mse, ve]);
    // anti-diagonal, north-west arm (180° rotation)
    quads.push([[t, 1.0 - t], mnw, [t + s, 1.0 - t], vn]);
    quads.push([[t, 1.0 - t], [t, 1.0 - t - s], mnw, vw]);

    let patches = quads
        .into_iter()
        .map(|q| quad_patch(p, n_e, q[0], q[1], q[2], q[3]))
        .collect();
    glue_reference_cell(patches)
}

/// Hole unit cell: a square with a central circular void, 4 patches blending
/// the hole boundary to the cell sides.
pub fn uc3_hole(p: usize, n_e: usize, hole_r: f64) -> Result<ReferenceUnitCell, LatticeError> {
    if !(hole_r > 0.05 && hole_r < 0.5) {
        return Err(LatticeError::InvalidGeometry(format!(
            "hole radius {} outside (0.05, 0.5)",
            hole_r
        )));
    }
    use std::f64::consts::PI;
    // radial blend first (θ1), angle second (θ2): right-handed orientation
    let quadrant = |a0: f64, outer: [[f64; 2]; 2]| -> SplinePatch {
        sampled_patch(p, n_e, move |t1, t2| {
            let ang = a0 + t2 * PI / 2.0;
            let c = [0.5 + hole_r * ang.cos(), 0.5 + hole_r * ang.sin()];
            let o = [
                outer[0][0] + t2 * (outer[1][0] - outer[0][0]),
                outer[0][1] + t2 * (outer[1][1] - outer[0][1]),
            ];
            [
                (1.0 - t1) * c[0] + t1 * o[0],
                (1.0 - t1) * c[1] + t1 * o[1],
            ]
        })
    };
    let patches = vec![
        quadrant(-PI / 4.0, [[1.0, 0.0], [1.0, 1.0]]), // east
        quadrant(PI / 4.0, [[1.0, 1.0], [0.0, 1.0]]),  // north
        quadrant(3.0 * PI / 4.0, [[0.0, 1.0], [0.0, 0.0]]), // west
        quadrant(-3.0 * PI / 4.0, [[0.0, 0.0], [1.0, 0.0]]), // south
    ];
    glue_reference_cell(patches)
}

/// `nx × ny` grid of affine macro-elements covering `[0, lx] × [0, ly]`,
/// cell index `s = i + nx·j`.
pub fn grid_macro(nx: usize, ny: usize, lx: f64, ly: f64) -> Vec<BezierMacroElement> {
    assert!(nx >= 1 && ny >= 1);
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (x0, x1) = (lx * i as f64 / nx as f64, lx * (i + 1) as f64 / nx as f64);
            let (y0, y1) = (ly * j as f64 / ny as f64, ly * (j + 1) as f64 / ny as f64);
            out.push(
                BezierMacroElement::from_corners(
                    2,
                    vec![vec![x0, y0], vec![x1, y0], vec![x0, y1], vec![x1, y1]],
                )
                .expect("grid element is valid"),
            );
        }
    }
    out
}

/// Geometry file: a reference cell plus either a spline macro model
/// (Bézier-extracted into elements) or an explicit element list.
#[derive(Serialize, Deserialize)]
pub struct GeometryJson {
    pub ref_cell: RefCellJson,
    pub r#macro: MacroJson,
}

#[derive(Serialize, Deserialize)]
pub struct RefCellJson {
    pub patches: Vec<SplinePatch>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
pub enum MacroJson {
    /// Tensor B-spline macro model on a uniform open knot grid: degree `q`
    /// per direction, `grid = [nx, ny]` elements, control points in
    /// lexicographic order (first direction fastest).
    Spline {
        grid: Vec<usize>,
        degree: Vec<usize>,
        points: Vec<Vec<f64>>,
    },
    /// Explicit Bézier elements.
    Elements { elements: Vec<MacroElementJson> },
}

#[derive(Serialize, Deserialize)]
pub struct MacroElementJson {
    pub degree: Vec<usize>,
    pub points: Vec<Vec<f64>>,
}

/// Parse a geometry file into a glued reference cell and macro elements.
pub fn geometry_from_json(
    text: &str,
) -> Result<(ReferenceUnitCell, Vec<BezierMacroElement>), LatticeError> {
    let geo: GeometryJson =
        serde_json::from_str(text).map_err(|e| LatticeError::InvalidGeometry(e.to_string()))?;
    let ref_cell = glue_reference_cell(geo.ref_cell.patches)?;
    let elements = match geo.r#macro {
        MacroJson::Elements { elements } => elements
            .into_iter()
            .map(|e| BezierMacroElement::new(e.degree, e.points).map_err(LatticeError::from))
            .collect::<Result<Vec<_>, _>>()?,
        MacroJson::Spline { grid, degree, points } => {
            bezier_extract_macro(&grid, &degree, points)?
        }
    };
    Ok((ref_cell, elements))
}

/// Bézier-extract a tensor B-spline macro model with uniform open knots into
/// one Bernstein element per knot span.
///
/// Implemented by Boehm knot insertion up to full interior multiplicity;
/// private to the generators (cell-level refinement is out of scope).
fn bezier_extract_macro(
    grid: &[usize],
    degree: &[usize],
    points: Vec<Vec<f64>>,
) -> Result<Vec<BezierMacroElement>, LatticeError> {
    if grid.len() != 2 || degree.len() != 2 {
        return Err(LatticeError::InvalidGeometry(
            "spline macro requires 2D grid and degree".into(),
        ));
    }
    let (nx, ny) = (grid[0], grid[1]);
    let (qx, qy) = (degree[0], degree[1]);
    let n_basis = [nx + qx, ny + qy];
    if points.len() != n_basis[0] * n_basis[1] {
        return Err(LatticeError::InvalidGeometry(format!(
            "spline macro needs {} control points, got {}",
            n_basis[0] * n_basis[1],
            points.len()
        )));
    }
    if points.iter().any(|p| p.len() != 2) {
        return Err(LatticeError::InvalidGeometry("macro control points must be 2D".into()));
    }

    // raise every interior knot to multiplicity q, direction by direction
    let (knots_x, net) = full_multiplicity(qx, nx, &points, n_basis[0], n_basis[1], 0);
    let cols_x = knots_x;
    let (knots_y, net) = full_multiplicity(qy, ny, &net, cols_x, n_basis[1], 1);
    let _cols_y = knots_y;

    // after extraction: cols_x = nx*qx + 1 columns, cols_y = ny*qy + 1 rows;
    // element (i, j) owns the (qx+1) × (qy+1) block starting at (i*qx, j*qy)
    let mut elements = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let mut pts = Vec::with_capacity((qx + 1) * (qy + 1));
            for jj in 0..=qy {
                for ii in 0..=qx {
                    pts.push(net[(j * qy + jj) * cols_x + (i * qx + ii)].clone());
                }
            }
            elements.push(BezierMacroElement::new(vec![qx, qy], pts)?);
        }
    }
    Ok(elements)
}

/// Insert interior knots until each reaches multiplicity `q` along one
/// direction of a tensor net; returns the new basis count along that
/// direction and the updated net.
fn full_multiplicity(
    q: usize,
    n_elem: usize,
    net: &[Vec<f64>],
    nx: usize,
    ny: usize,
    dir: usize,
) -> (usize, Vec<Vec<f64>>) {
    let mut knots: Vec<f64> = KnotVector::uniform(q, n_elem).knots().to_vec();
    // rows of the working direction
    let n_lines = if dir == 0 { ny } else { nx };
    let mut line_len = if dir == 0 { nx } else { ny };
    let get = |net: &[Vec<f64>], line: usize, i: usize, len: usize| -> Vec<f64> {
        if dir == 0 {
            net[line * len + i].clone()
        } else {
            net[i * nx + line].clone()
        }
    };
    let mut lines: Vec<Vec<Vec<f64>>> = (0..n_lines)
        .map(|l| (0..line_len).map(|i| get(net, l, i, line_len)).collect())
        .collect();

    for e in 1..n_elem {
        let u = e as f64 / n_elem as f64;
        loop {
            let mult = knots.iter().filter(|k| **k == u).count();
            if mult >= q {
                break;
            }
            // Boehm insertion of u
            let span = {
                let mut s = 0;
                while knots[s + 1] <= u {
                    s += 1;
                }
                s
            };
            for line in lines.iter_mut() {
                let mut new_line = Vec::with_capacity(line.len() + 1);
                for i in 0..=line.len() {
                    if i + q <= span || i > span {
                        // unchanged: copy (clamp index for the appended tail)
                        let src = if i + q <= span { i } else { i - 1 };
                        new_line.push(line[src].clone());
                    } else {
                        let a = (u - knots[i]) / (knots[i + q] - knots[i]);
                        let prev = &line[i - 1];
                        let cur = &line[i];
                        new_line.push(
                            prev.iter()
                                .zip(cur.iter())
                                .map(|(pp, cc)| (1.0 - a) * pp + a * cc)
                                .collect(),
                        );
                    }
                }
                *line = new_line;
            }
            knots.insert(span + 1, u);
            line_len += 1;
        }
    }

    // repack to a dense net with the working direction fastest when dir == 0
    let mut out = vec![Vec::new(); n_lines * line_len];
    for (l, line) in lines.iter().enumerate() {
        for (i, p) in line.iter().enumerate() {
            if dir == 0 {
                out[l * line_len + i] = p.clone();
            } else {
                out[i * nx + l] = p.clone();
            }
        }
    }
    (line_len, out)
}
