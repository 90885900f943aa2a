use super::*;
use crate::assembly::{
    assemble_external, full_rule, gather_cell, global_residual, global_tangent_triplets,
    reduced_rule, snapshot, DirichletElim, Discretization,
};
use crate::hyperelastic::MaterialParams;
use crate::lattice::{
    build_lattice, grid_macro, partition_dofs, uc1_cross, BcSpec, FaceDirichlet, FaceTag,
    FaceTraction, PrimalLevel,
};
use crate::rom::build_reduced_basis;
use rand::{Rng, SeedableRng};

fn params() -> MaterialParams {
    MaterialParams::new(500.0, 0.40).unwrap()
}

fn bend_model(nx: usize, ny: usize) -> crate::lattice::LatticeModel {
    let cell = uc1_cross(1, 1, 0.2, 0.08).unwrap();
    let bc = BcSpec {
        dirichlet: vec![FaceDirichlet {
            face: FaceTag::Left,
            components: [Some(0.0), Some(0.0), None],
        }],
        tractions: vec![FaceTraction { face: FaceTag::Right, g0: [0.0, -2.0, 0.0] }],
        ..Default::default()
    };
    build_lattice(cell, grid_macro(nx, ny, nx as f64, ny as f64), bc).unwrap()
}

struct Setup {
    model: crate::lattice::LatticeModel,
    disc: Discretization,
    rule: crate::assembly::QuadratureRule,
}

fn setup(nx: usize, ny: usize) -> Setup {
    let model = bend_model(nx, ny);
    let disc = Discretization::new(&model);
    let rule = full_rule(&model, &disc).unwrap();
    Setup { model, disc, rule }
}

/// Small random admissible state vanishing on the Dirichlet face.
fn random_state(model: &crate::lattice::LatticeModel, seed: u64, amp: f64) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut u = vec![0.0; model.n_dof()];
    for (i, m) in model.dirichlet_mask().iter().enumerate() {
        if !m {
            u[i] = rng.gen_range(-amp..amp);
        }
    }
    u
}

#[test]
fn direct_identity_and_dense_oracle() {
    // identity matrix
    let tri = vec![(0usize, 0usize, 1.0), (1, 1, 1.0), (2, 2, 1.0)];
    let (x, _) = solve_direct(3, &tri, &[3.0, -1.0, 0.5]).unwrap();
    assert_eq!(x, vec![3.0, -1.0, 0.5]);

    // 2×2 lattice tangent at u = 0 against a dense factorization
    let s = setup(2, 2);
    let p = params();
    let elim = DirichletElim::new(&s.model);
    let u = vec![0.0; s.model.n_dof()];
    let tri = global_tangent_triplets(&s.model, &s.disc, &s.rule, &u, &p, &elim).unwrap();
    let n = elim.n_free();
    let mut dense = nalgebra::DMatrix::zeros(n, n);
    for (r, c, v) in &tri {
        dense[(*r, *c)] += v;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (x, stats) = solve_direct(n, &tri, &rhs).unwrap();
    assert!(stats.rel_residual <= 1e-12);
    let dense_x = dense
        .lu()
        .solve(&nalgebra::DVector::from_vec(rhs.clone()))
        .unwrap();
    let scale = dense_x.amax();
    for (a, b) in x.iter().zip(dense_x.iter()) {
        assert!((a - b).abs() <= 1e-10 * scale, "{} vs {}", a, b);
    }

    // the tangent at rest is positive definite under Dirichlet elimination
    assert!(is_positive_definite(n, &tri));
}

#[test]
fn jump_operator_vanishes_on_conforming_vectors() {
    let s = setup(2, 2);
    let partition = partition_dofs(&s.model, PrimalLevel(0)).unwrap();
    let layout = TornLayout::new(&s.model, &partition);
    let u = random_state(&s.model, 11, 0.1);
    let torn = layout.torn_from_global(&s.model, &partition, &u);
    let saddle = SaddleSystem {
        model: &s.model,
        partition: &partition,
        layout: &layout,
        cell_ops: Vec::new(),
        rhs: Vec::new(),
    };
    let jumps = saddle.apply_b(&torn);
    assert!(!jumps.is_empty());
    for j in &jumps {
        assert_eq!(*j, 0.0, "conforming gather has exactly zero jump");
    }
    // round trip: averaging the torn copies returns the free part of u
    let back = layout.average_to_global(&s.model, &partition, &torn);
    for i in 0..u.len() {
        if !s.model.dirichlet_mask()[i] {
            assert!((back[i] - u[i]).abs() < 1e-15);
        }
    }
}

fn all_tangents(
    s: &Setup,
    u: &[f64],
    p: &MaterialParams,
) -> Vec<crate::assembly::LocalTangent> {
    (0..s.model.num_cells())
        .map(|c| {
            let u_c = gather_cell(&s.model, c, u);
            crate::assembly::local_tangent(&s.model, &s.disc, &s.rule, c, &u_c, p).unwrap()
        })
        .collect()
}

fn residual_parts(
    s: &Setup,
    u: &[f64],
    p: &MaterialParams,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let ext = assemble_external(&s.model, &s.disc, &s.rule).unwrap();
    let (g, locals) =
        global_residual(&s.model, &s.disc, &s.rule, u, p, &ext, 1.0, true).unwrap();
    (g, locals.unwrap())
}

/// Complete-basis identity coefficients.
fn identity_alpha(n_cells: usize) -> Vec<Vec<f64>> {
    (0..n_cells)
        .map(|s| {
            let mut a = vec![0.0; n_cells];
            a[s] = 1.0;
            a
        })
        .collect()
}

/// Complete-basis self surrogates.
fn identity_surrogate(n_cells: usize) -> Vec<(usize, f64)> {
    (0..n_cells).map(|s| (s, 1.0)).collect()
}

#[test]
fn exact_saddle_matches_direct_solve() {
    let s = setup(2, 1);
    let p = params();
    let u = random_state(&s.model, 29, 0.005);
    let (g_res, locals) = residual_parts(&s, &u, &p);

    // direct path
    let elim = DirichletElim::new(&s.model);
    let tri = global_tangent_triplets(&s.model, &s.disc, &s.rule, &u, &p, &elim).unwrap();
    let rhs: Vec<f64> = elim.restrict(&g_res).iter().map(|v| -v).collect();
    let (x_free, _) = solve_direct(elim.n_free(), &tri, &rhs).unwrap();
    let x_direct = elim.expand(&x_free);

    // saddle path with the complete exact basis
    let partition = partition_dofs(&s.model, PrimalLevel(0)).unwrap();
    let layout = TornLayout::new(&s.model, &partition);
    let tangents = all_tangents(&s, &u, &p);
    let cell_ops: Vec<CellOp> = tangents.iter().map(CellOp::Exact).collect();
    let saddle = SaddleSystem::new(&s.model, &partition, &layout, cell_ops, &locals, &g_res);
    let n_cells = s.model.num_cells();
    let principal: Vec<usize> = (0..n_cells).collect();
    let alpha = identity_alpha(n_cells);
    let mut settings = SolverSettings::default();
    settings.outer_tol = 1e-10;
    settings.inner_tol = 1e-8;
    let precond = build_preconditioner(
        &s.model,
        &partition,
        &layout,
        &principal,
        &alpha,
        &identity_surrogate(n_cells),
        &tangents,
        &settings,
    )
    .unwrap();
    let (delta_u, multipliers, stats) = solve_rb(&saddle, &precond, &settings, None).unwrap();

    assert!(stats.jump_inf <= 1e-8, "interface continuity: {}", stats.jump_inf);
    assert_eq!(stats.n_local_factorizations, n_cells);
    assert_eq!(multipliers.lambda.len(), partition.n_lambda());
    // with exact blocks the preconditioner is the exact inverse: very few
    // outer iterations
    assert!(
        stats.outer_iterations <= 5,
        "exact preconditioner should converge immediately, took {}",
        stats.outer_iterations
    );
    let scale = x_direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..x_direct.len() {
        assert!(
            (delta_u[i] - x_direct[i]).abs() <= 1e-8 * scale,
            "dof {}: {} vs {}",
            i,
            delta_u[i],
            x_direct[i]
        );
    }
}

#[test]
fn single_cell_reduces_to_block_solve() {
    let s = setup(1, 1);
    let p = params();
    let u = random_state(&s.model, 31, 0.02);
    let (g_res, locals) = residual_parts(&s, &u, &p);

    let elim = DirichletElim::new(&s.model);
    let tri = global_tangent_triplets(&s.model, &s.disc, &s.rule, &u, &p, &elim).unwrap();
    let rhs: Vec<f64> = elim.restrict(&g_res).iter().map(|v| -v).collect();
    let (x_free, _) = solve_direct(elim.n_free(), &tri, &rhs).unwrap();
    let x_direct = elim.expand(&x_free);

    let partition = partition_dofs(&s.model, PrimalLevel(0)).unwrap();
    assert_eq!(partition.n_lambda(), 0);
    let layout = TornLayout::new(&s.model, &partition);
    let tangents = all_tangents(&s, &u, &p);
    let cell_ops: Vec<CellOp> = tangents.iter().map(CellOp::Exact).collect();
    let saddle = SaddleSystem::new(&s.model, &partition, &layout, cell_ops, &locals, &g_res);
    let mut settings = SolverSettings::default();
    settings.outer_tol = 1e-10;
    let precond = build_preconditioner(
        &s.model,
        &partition,
        &layout,
        &[0],
        &identity_alpha(1),
        &identity_surrogate(1),
        &tangents,
        &settings,
    )
    .unwrap();
    let (delta_u, _, _) = solve_rb(&saddle, &precond, &settings, None).unwrap();
    let scale = x_direct.iter().fold(1e-30f64, |m, v| m.max(v.abs()));
    for i in 0..x_direct.len() {
        assert!(
            (delta_u[i] - x_direct[i]).abs() <= 1e-10 * scale,
            "dof {}: {} vs {}",
            i,
            delta_u[i],
            x_direct[i]
        );
    }
}

#[test]
fn rb_path_with_tight_epsilon_matches_direct() {
    // the full pipeline: snapshots → greedy at ε = 1e-12 → preconditioner →
    // saddle solve, against the direct factorization
    let s = setup(2, 2);
    let p = params();
    let u = random_state(&s.model, 37, 0.01);
    let (g_res, locals) = residual_parts(&s, &u, &p);

    let elim = DirichletElim::new(&s.model);
    let tri = global_tangent_triplets(&s.model, &s.disc, &s.rule, &u, &p, &elim).unwrap();
    let rhs: Vec<f64> = elim.restrict(&g_res).iter().map(|v| -v).collect();
    let (x_free, _) = solve_direct(elim.n_free(), &tri, &rhs).unwrap();
    let x_direct = elim.expand(&x_free);

    let red = reduced_rule(&s.model, &s.disc, 2).unwrap();
    let snaps: Vec<Vec<f64>> = (0..s.model.num_cells())
        .map(|c| {
            let u_c = gather_cell(&s.model, c, &u);
            snapshot(&s.model, &s.disc, &red, c, &u_c, &p).unwrap()
        })
        .collect();
    let rb = build_reduced_basis(&snaps, 1e-12).unwrap();
    assert!(rb.n_r() >= 2, "random state should distinguish some cells");

    let partition = partition_dofs(&s.model, PrimalLevel(0)).unwrap();
    let layout = TornLayout::new(&s.model, &partition);
    let principal_tangents: Vec<crate::assembly::LocalTangent> = rb
        .principal
        .iter()
        .map(|c| {
            let u_c = gather_cell(&s.model, *c, &u);
            crate::assembly::local_tangent(&s.model, &s.disc, &s.rule, *c, &u_c, &p).unwrap()
        })
        .collect();
    let cell_ops: Vec<CellOp> = (0..s.model.num_cells())
        .map(|c| CellOp::Rb { alpha: &rb.alpha[c], principals: &principal_tangents })
        .collect();
    let saddle = SaddleSystem::new(&s.model, &partition, &layout, cell_ops, &locals, &g_res);
    let mut settings = SolverSettings::default();
    settings.outer_tol = 1e-10;
    settings.inner_tol = 1e-4;
    let precond = build_preconditioner(
        &s.model,
        &partition,
        &layout,
        &rb.principal,
        &rb.alpha,
        &rb.surrogate,
        &principal_tangents,
        &settings,
    )
    .unwrap();
    assert_eq!(precond.n_local_factorizations, rb.n_r());
    let (delta_u, _, stats) = solve_rb(&saddle, &precond, &settings, None).unwrap();
    assert!(stats.rel_residual <= 1e-10);
    let scale = x_direct.iter().fold(1e-30f64, |m, v| m.max(v.abs()));
    for i in 0..x_direct.len() {
        assert!(
            (delta_u[i] - x_direct[i]).abs() <= 1e-8 * scale,
            "dof {}: {} vs {}",
            i,
            delta_u[i],
            x_direct[i]
        );
    }
}

#[test]
fn saddle_operator_is_symmetric() {
    let s = setup(2, 1);
    let p = params();
    let u = random_state(&s.model, 41, 0.01);
    let (g_res, locals) = residual_parts(&s, &u, &p);
    let partition = partition_dofs(&s.model, PrimalLevel(0)).unwrap();
    let layout = TornLayout::new(&s.model, &partition);
    let tangents = all_tangents(&s, &u, &p);
    let cell_ops: Vec<CellOp> = tangents.iter().map(CellOp::Exact).collect();
    let saddle = SaddleSystem::new(&s.model, &partition, &layout, cell_ops, &locals, &g_res);
    let n = layout.total_len(&partition);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(43);
    for _ in 0..5 {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ax = saddle.apply(&x);
        let ay = saddle.apply(&y);
        let xay: f64 = x.iter().zip(&ay).map(|(a, b)| a * b).sum();
        let yax: f64 = y.iter().zip(&ax).map(|(a, b)| a * b).sum();
        let scale = xay.abs().max(yax.abs()).max(1.0);
        assert!((xay - yax).abs() <= 1e-10 * scale, "{} vs {}", xay, yax);
    }
}

#[test]
fn edge_average_columns_kill_conforming_jumps() {
    let s = setup(2, 2);
    let partition = partition_dofs(&s.model, PrimalLevel(0)).unwrap();
    let layout = TornLayout::new(&s.model, &partition);
    let u = random_state(&s.model, 47, 0.05);
    let torn = layout.torn_from_global(&s.model, &partition, &u);
    let saddle = SaddleSystem {
        model: &s.model,
        partition: &partition,
        layout: &layout,
        cell_ops: Vec::new(),
        rhs: Vec::new(),
    };
    let jumps = saddle.apply_b(&torn);
    let mut q_sums = vec![0.0; layout.n_qcols];
    for (k, j) in jumps.iter().enumerate() {
        q_sums[layout.q_col[k]] += j;
    }
    assert!(q_sums.iter().all(|v| *v == 0.0), "Qᵀ B u = 0 for conforming u");
    // every edge feeds one column per component
    assert_eq!(layout.n_qcols, partition.n_edges() * 2);
}
