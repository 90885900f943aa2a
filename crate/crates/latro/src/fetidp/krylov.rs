//! Krylov kernels for the saddle-point solver: a flexible, restart-free
//! GMRES for the outer iteration (the preconditioner contains an inner
//! iterative solve, so it changes between applications) and a guarded PCG
//! for the interface problem.

/// Result of a Krylov solve.
pub struct KrylovResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Flexible right-preconditioned GMRES without restart.
///
/// `apply_a` is the (possibly singular, consistent) symmetric operator,
/// `apply_m` the preconditioner; `x = Σ_j y_j M(v_j)` uses the stored
/// preconditioned directions, so `M` may vary between calls.
pub fn fgmres(
    mut apply_a: impl FnMut(&[f64]) -> Vec<f64>,
    mut apply_m: impl FnMut(&[f64]) -> Vec<f64>,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> KrylovResult {
    let n = b.len();
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return KrylovResult { x: vec![0.0; n], iterations: 0, rel_residual: 0.0, converged: true };
    }

    let mut v: Vec<Vec<f64>> = vec![b.iter().map(|x| x / b_norm).collect()];
    let mut z: Vec<Vec<f64>> = Vec::new();
    let mut h: Vec<Vec<f64>> = Vec::new(); // h[j] = column j, length j+2
    let mut c: Vec<f64> = Vec::new();
    let mut s: Vec<f64> = Vec::new();
    let mut g = vec![b_norm];

    for j in 0..max_iter {
        let iters = j + 1;
        let zj = apply_m(&v[j]);
        let mut w = apply_a(&zj);
        z.push(zj);

        // modified Gram-Schmidt
        let mut col = vec![0.0; j + 2];
        for (i, vi) in v.iter().enumerate() {
            let hij = dot(&w, vi);
            col[i] = hij;
            for (wk, vk) in w.iter_mut().zip(vi) {
                *wk -= hij * vk;
            }
        }
        let w_norm = norm2(&w);
        col[j + 1] = w_norm;

        // apply accumulated Givens rotations
        for i in 0..j {
            let t = c[i] * col[i] + s[i] * col[i + 1];
            col[i + 1] = -s[i] * col[i] + c[i] * col[i + 1];
            col[i] = t;
        }
        let denom = (col[j] * col[j] + col[j + 1] * col[j + 1]).sqrt();
        let (cj, sj) = if denom == 0.0 { (1.0, 0.0) } else { (col[j] / denom, col[j + 1] / denom) };
        c.push(cj);
        s.push(sj);
        col[j] = denom;
        col[j + 1] = 0.0;
        g.push(-sj * g[j]);
        g[j] *= cj;
        h.push(col);

        let rel = g[j + 1].abs() / b_norm;
        let stagnated = w_norm <= 1e-14 * b_norm;
        if rel <= tol || stagnated || j + 1 == max_iter {
            // back substitution on the triangular system
            let m = j + 1;
            let mut y = vec![0.0; m];
            for i in (0..m).rev() {
                let mut sum = g[i];
                for k in (i + 1)..m {
                    sum -= h[k][i] * y[k];
                }
                y[i] = if h[i][i] != 0.0 { sum / h[i][i] } else { 0.0 };
            }
            let mut x = vec![0.0; n];
            for (k, yk) in y.iter().enumerate() {
                for (xi, zi) in x.iter_mut().zip(&z[k]) {
                    *xi += yk * zi;
                }
            }
            return KrylovResult { x, iterations: iters, rel_residual: rel, converged: rel <= tol };
        }
        v.push(w.iter().map(|x| x / w_norm).collect());
    }
    unreachable!("loop returns at max_iter");
}

/// Preconditioned conjugate gradients with breakdown guards for
/// semidefinite operators; returns the best iterate reached.
pub fn pcg(
    mut apply_a: impl FnMut(&[f64]) -> Vec<f64>,
    mut apply_m: impl FnMut(&[f64]) -> Vec<f64>,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> KrylovResult {
    let n = b.len();
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return KrylovResult { x: vec![0.0; n], iterations: 0, rel_residual: 0.0, converged: true };
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = apply_m(&r);
    let mut rz = dot(&r, &z);
    let mut p = z.clone();
    let mut rel = 1.0;
    for it in 0..max_iter {
        if rz <= 0.0 {
            // preconditioner lost positivity: stop with the current iterate
            return KrylovResult { x, iterations: it, rel_residual: rel, converged: false };
        }
        let q = apply_a(&p);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            // operator is only semidefinite along p
            return KrylovResult { x, iterations: it, rel_residual: rel, converged: false };
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        rel = norm2(&r) / b_norm;
        if rel <= tol {
            return KrylovResult { x, iterations: it + 1, rel_residual: rel, converged: true };
        }
        z = apply_m(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    KrylovResult { x, iterations: max_iter, rel_residual: rel, converged: false }
}
