use latro::hyperelastic::MaterialParams;
use latro::lattice::*;
use latro::newton::*;
use latro::fetidp::{SolverPath, SolverSettings};
use std::time::Instant;

#[test]
#[ignore]
fn probe_bend_rb() {
    let p = MaterialParams::new(500.0, 0.40).unwrap();
    for load in [-3.0f64, -1.5, -0.8] {
        let cell = uc1_cross(2, 4, 0.2, 0.08).unwrap();
        let bc = BcSpec {
            dirichlet: vec![FaceDirichlet { face: FaceTag::Left, components: [Some(0.0), Some(0.0), None] }],
            tractions: vec![FaceTraction { face: FaceTag::Right, g0: [0.0, load, 0.0] }],
            ..Default::default()
        };
        let model = build_lattice(cell, grid_macro(4, 2, 4.0, 2.0), bc).unwrap();
        let t0 = Instant::now();
        let std_out = newton_solve(&model, &p, &LoadProgram::uniform(4), &NewtonSettings::default(),
            &SolverSettings { path: SolverPath::Standard, ..Default::default() });
        let t_std = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let rb_out = newton_solve(&model, &p, &LoadProgram::uniform(4), &NewtonSettings::default(),
            &SolverSettings { path: SolverPath::Rb, epsilon: 3e-4, ..Default::default() });
        let t_rb = t0.elapsed().as_secs_f64();
        match (&std_out, &rb_out) {
            (Ok(s), Ok(r)) => {
                let max_outer = r.trace.iterations.iter().filter_map(|i| i.solver.as_ref().map(|x| x.outer_iterations)).max().unwrap_or(0);
                let nr: Vec<_> = r.trace.iterations.iter().filter_map(|i| i.n_r).collect();
                println!("load {}: std {} its ({:.0}s) | rb {} its ({:.0}s) max_outer {} fallbacks {} n_r last {:?}",
                    load, s.trace.total_iterations, t_std, r.trace.total_iterations, t_rb, max_outer,
                    r.trace.rb_solve_fallbacks.len(), nr.last());
                let scale: f64 = s.u.iter().map(|x| x*x).sum::<f64>().sqrt();
                let diff: f64 = s.u.iter().zip(&r.u).map(|(a,b)| (a-b)*(a-b)).sum::<f64>().sqrt();
                println!("   field rel diff {:.2e}, max |u| {:.3}", diff/scale, s.u.iter().fold(0.0f64, |m,v| m.max(v.abs())));
            }
            (s, r) => println!("load {}: std {:?} rb {:?}", load,
                s.as_ref().err().map(|e| e.to_string()), r.as_ref().err().map(|e| e.to_string())),
        }
    }
}
