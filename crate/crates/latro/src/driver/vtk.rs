//! Legacy ASCII VTK export of the displacement field.
//!
//! Every knot-span element of every patch of every cell becomes one
//! VTK_QUAD with corner samples of the initial-configuration geometry; the
//! displacement is attached as point vectors. Points are duplicated across
//! element boundaries, which keeps the writer simple and the output
//! deterministic.

use std::io::Write;
use std::path::Path;

use super::DriverError;
use crate::lattice::LatticeModel;

pub fn write_displacement_vtk(
    path: &Path,
    model: &LatticeModel,
    u: &[f64],
) -> Result<(), DriverError> {
    let d = model.dim();
    assert_eq!(d, 2, "VTK export is implemented for 2D lattices");
    let ref_cell = model.ref_cell();

    let mut points: Vec<[f64; 3]> = Vec::new();
    let mut vectors: Vec<[f64; 3]> = Vec::new();
    let mut quads: Vec<[usize; 4]> = Vec::new();

    for s in 0..model.num_cells() {
        let map = model.assembly_map(s);
        for (k, patch) in ref_cell.patches().iter().enumerate() {
            let spans_x = patch.knot_vector(0).spans();
            let spans_y = patch.knot_vector(1).spans();
            for (y0, y1) in &spans_y {
                for (x0, x1) in &spans_x {
                    let corners = [[*x0, *y0], [*x1, *y0], [*x1, *y1], [*x0, *y1]];
                    let base = points.len();
                    for theta in corners {
                        let micro = patch
                            .eval(&theta)
                            .map_err(|e| DriverError::Run(e.to_string()))?;
                        let macro_pt = model
                            .macro_element(s)
                            .eval(&micro.x[..2])
                            .map_err(|e| DriverError::Run(e.to_string()))?;
                        let (idx, vals, _) = patch
                            .eval_basis_grad(&theta)
                            .map_err(|e| DriverError::Run(e.to_string()))?;
                        let mut disp = [0.0f64; 3];
                        for (a_loc, flat) in idx.iter().enumerate() {
                            let g = map[ref_cell.glue(k, *flat)];
                            for c in 0..2 {
                                disp[c] += vals[a_loc] * u[g * 2 + c];
                            }
                        }
                        points.push([macro_pt.x[0], macro_pt.x[1], 0.0]);
                        vectors.push(disp);
                    }
                    quads.push([base, base + 1, base + 2, base + 3]);
                }
            }
        }
    }

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# vtk DataFile Version 3.0")?;
    writeln!(f, "latro displacement field")?;
    writeln!(f, "ASCII")?;
    writeln!(f, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(f, "POINTS {} double", points.len())?;
    for p in &points {
        writeln!(f, "{:.12e} {:.12e} {:.12e}", p[0], p[1], p[2])?;
    }
    writeln!(f, "CELLS {} {}", quads.len(), 5 * quads.len())?;
    for q in &quads {
        writeln!(f, "4 {} {} {} {}", q[0], q[1], q[2], q[3])?;
    }
    writeln!(f, "CELL_TYPES {}", quads.len())?;
    for _ in &quads {
        writeln!(f, "9")?;
    }
    writeln!(f, "POINT_DATA {}", points.len())?;
    writeln!(f, "VECTORS displacement double")?;
    for v in &vectors {
        writeln!(f, "{:.12e} {:.12e} {:.12e}", v[0], v[1], v[2])?;
    }
    Ok(())
}
