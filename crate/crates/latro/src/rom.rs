//! Greedy identification of principal cells and reduced-basis
//! reconstruction of local tangent operators.
//!
//! The greedy pass is a truncated Gram–Schmidt on normalized snapshot
//! columns: it repeatedly selects the cell with the largest ∞-norm
//! residual, orthonormalizes its residual into the basis, and updates all
//! residuals, stopping once every residual drops to the tolerance. Each
//! cell's full tangent is then expressed as a linear combination of the
//! principal cells' tangents with least-squares coefficients on the raw
//! snapshots.

use nalgebra::{DMatrix, DVector};

use crate::assembly::LocalTangent;

#[derive(Debug, thiserror::Error)]
pub enum RomError {
    #[error("snapshot Gram matrix is ill-conditioned (cond = {cond:e})")]
    DegenerateBasis { cond: f64 },
    #[error("reduced basis is empty")]
    EmptyBasis,
}

/// Output of the greedy selection plus per-cell projection coefficients.
#[derive(Clone, Debug)]
pub struct ReducedBasis {
    pub epsilon: f64,
    /// principal cell indices in selection order
    pub principal: Vec<usize>,
    /// orthonormal residual basis, one column per principal cell
    pub basis: Vec<Vec<f64>>,
    /// snapshot 2-norms per cell
    pub norms: Vec<f64>,
    /// certified decomposition coordinates: `t̃^s = ‖t̄^s‖₂ Z β^s`
    pub beta: Vec<Vec<f64>>,
    /// least-squares coefficients on the raw principal snapshots:
    /// `K̃^s = Σ_r α_r^s K^{s_r}`
    pub alpha: Vec<Vec<f64>>,
    /// final `max_s ‖Δ^s‖∞` (the Algorithm loop guard at exit)
    pub certificate: f64,
    /// `max_s ‖Δ_i^s‖∞` before each selection
    pub residual_history: Vec<f64>,
    /// cells whose snapshot vanished entirely (fully constrained)
    pub zero_cells: Vec<usize>,
    /// per cell: most similar principal cell (by normalized snapshot
    /// direction) and the least-squares scale fitting it
    pub surrogate: Vec<(usize, f64)>,
}

impl ReducedBasis {
    pub fn n_r(&self) -> usize {
        self.principal.len()
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Greedy principal-cell identification (without the α projection).
///
/// Zero-norm snapshot columns are treated as exactly representable: their
/// residual is zero and they are never selected.
pub fn greedy_select(snapshots: &[Vec<f64>], epsilon: f64) -> ReducedBasis {
    assert!(epsilon > 0.0, "tolerance must be positive");
    let n_s = snapshots.len();
    assert!(n_s >= 1, "at least one snapshot column required");
    let len = snapshots[0].len();
    assert!(snapshots.iter().all(|t| t.len() == len));

    let norms: Vec<f64> = snapshots.iter().map(|t| norm2(t)).collect();
    let zero_cells: Vec<usize> = norms
        .iter()
        .enumerate()
        .filter(|(_, n)| **n == 0.0)
        .map(|(s, _)| s)
        .collect();

    let mut residuals: Vec<Vec<f64>> = snapshots
        .iter()
        .zip(&norms)
        .map(|(t, n)| {
            if *n == 0.0 {
                vec![0.0; len]
            } else {
                t.iter().map(|x| x / n).collect()
            }
        })
        .collect();

    let mut principal = Vec::new();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut beta: Vec<Vec<f64>> = vec![Vec::new(); n_s];
    let mut history = Vec::new();
    let mut selected = vec![false; n_s];

    loop {
        // loop guard: max_s ‖Δ^s‖∞ over all cells
        let mut max_res = 0.0;
        let mut arg = usize::MAX;
        for (s, r) in residuals.iter().enumerate() {
            let ni = norm_inf(r);
            // strict inequality keeps the lowest index on ties
            if ni > max_res {
                max_res = ni;
                arg = s;
            }
        }
        if max_res <= epsilon {
            return ReducedBasis {
                epsilon,
                principal,
                basis,
                norms,
                beta,
                alpha: Vec::new(),
                certificate: max_res,
                residual_history: history,
                zero_cells,
                surrogate: Vec::new(),
            };
        }
        history.push(max_res);
        debug_assert!(!selected[arg], "a selected cell has an exactly zero residual");
        selected[arg] = true;
        principal.push(arg);

        let r_norm = norm2(&residuals[arg]);
        let zeta: Vec<f64> = residuals[arg].iter().map(|x| x / r_norm).collect();
        for s in 0..n_s {
            let b: f64 = residuals[s].iter().zip(&zeta).map(|(x, z)| x * z).sum();
            beta[s].push(b);
            if s == arg {
                // exact in exact arithmetic; forcing it avoids re-selection
                residuals[s].iter_mut().for_each(|x| *x = 0.0);
            } else {
                for (x, z) in residuals[s].iter_mut().zip(&zeta) {
                    *x -= b * z;
                }
            }
        }
        basis.push(zeta);
    }
}

/// Least-squares projector onto the span of raw principal snapshots:
/// `α = [t̄_εᵀ t̄_ε]⁻¹ t̄_εᵀ t̄`.
pub struct SnapshotProjector {
    principal_raw: Vec<Vec<f64>>,
    gram_inv: DMatrix<f64>,
}

impl SnapshotProjector {
    /// Build from the snapshot set and selected indices; fails when the
    /// Gram matrix condition number exceeds `1e12`.
    pub fn new(snapshots: &[Vec<f64>], principal: &[usize]) -> Result<Self, RomError> {
        if principal.is_empty() {
            return Err(RomError::EmptyBasis);
        }
        let n_r = principal.len();
        let principal_raw: Vec<Vec<f64>> =
            principal.iter().map(|s| snapshots[*s].clone()).collect();
        let mut gram = DMatrix::zeros(n_r, n_r);
        for i in 0..n_r {
            for j in 0..n_r {
                gram[(i, j)] = principal_raw[i]
                    .iter()
                    .zip(&principal_raw[j])
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        let svd = gram.clone().svd(false, false);
        let s_max = svd.singular_values.max();
        let s_min = svd.singular_values.min();
        let cond = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
        if cond > 1e12 {
            return Err(RomError::DegenerateBasis { cond });
        }
        let gram_inv = gram
            .try_inverse()
            .ok_or(RomError::DegenerateBasis { cond })?;
        Ok(Self { principal_raw, gram_inv })
    }

    pub fn n_r(&self) -> usize {
        self.principal_raw.len()
    }

    pub fn project(&self, t_new: &[f64]) -> Vec<f64> {
        let n_r = self.n_r();
        let rhs = DVector::from_fn(n_r, |i, _| {
            self.principal_raw[i].iter().zip(t_new).map(|(a, b)| a * b).sum()
        });
        let alpha = &self.gram_inv * rhs;
        alpha.iter().copied().collect()
    }

    /// ℓ₂ error of the projection `t_new ≈ t̄_ε α`.
    pub fn reconstruction_error(&self, t_new: &[f64], alpha: &[f64]) -> f64 {
        let mut err = 0.0;
        for i in 0..t_new.len() {
            let mut rec = 0.0;
            for (r, a) in alpha.iter().enumerate() {
                rec += a * self.principal_raw[r][i];
            }
            err += (t_new[i] - rec).powi(2);
        }
        err.sqrt()
    }
}

/// Run the greedy pass and attach per-cell α coefficients plus the
/// single-principal surrogate used by the preconditioner's local solves.
///
/// Zero-norm cells get `α = 0` (they stay flagged in `zero_cells`).
pub fn build_reduced_basis(snapshots: &[Vec<f64>], epsilon: f64) -> Result<ReducedBasis, RomError> {
    let mut rb = greedy_select(snapshots, epsilon);
    if rb.principal.is_empty() {
        // every snapshot vanished: nothing to represent
        rb.alpha = vec![vec![]; snapshots.len()];
        rb.surrogate = vec![(0, 1.0); snapshots.len()];
        return Ok(rb);
    }
    let projector = SnapshotProjector::new(snapshots, &rb.principal)?;
    rb.alpha = snapshots
        .iter()
        .enumerate()
        .map(|(s, t)| {
            if rb.norms[s] == 0.0 {
                vec![0.0; rb.principal.len()]
            } else {
                projector.project(t)
            }
        })
        .collect();
    // nearest principal by snapshot direction; the scale is the
    // least-squares single-term fit t̄^s ≈ c t̄^{s_r}
    rb.surrogate = snapshots
        .iter()
        .enumerate()
        .map(|(s, t)| {
            if rb.norms[s] == 0.0 {
                return (0, 1.0);
            }
            let mut best = (f64::NEG_INFINITY, 0usize, 1.0f64);
            for (r, sr) in rb.principal.iter().enumerate() {
                let tr = &snapshots[*sr];
                let dot: f64 = t.iter().zip(tr).map(|(a, b)| a * b).sum();
                let cos = dot / (rb.norms[s] * rb.norms[*sr]);
                if cos > best.0 {
                    best = (cos, r, dot / (rb.norms[*sr] * rb.norms[*sr]));
                }
            }
            let scale = if best.2.abs() > 1e-12 { best.2 } else { 1.0 };
            (best.1, scale)
        })
        .collect();
    Ok(rb)
}

/// Reduced-order local tangent: a linear combination of principal tangents,
/// applied without ever densifying per cell.
pub struct RbTangent<'a> {
    pub alpha: &'a [f64],
    pub principals: &'a [LocalTangent],
}

impl<'a> RbTangent<'a> {
    /// `y += (Σ_r α_r K^{s_r}) x` on cell-local DOF vectors.
    pub fn matvec_add(&self, x: &[f64], y: &mut [f64]) {
        let mut tmp = vec![0.0; y.len()];
        for (a, k) in self.alpha.iter().zip(self.principals) {
            if *a == 0.0 {
                continue;
            }
            tmp.iter_mut().for_each(|v| *v = 0.0);
            k.matvec_add(x, &mut tmp);
            for (yy, tt) in y.iter_mut().zip(&tmp) {
                *yy += a * tt;
            }
        }
    }

    /// Densified combination (test and principal-block extraction helper).
    pub fn materialize(&self) -> LocalTangent {
        let proto = &self.principals[0];
        let mut values = vec![0.0; proto.values.len()];
        for (a, k) in self.alpha.iter().zip(self.principals) {
            for (v, kv) in values.iter_mut().zip(&k.values) {
                *v += a * kv;
            }
        }
        LocalTangent {
            cell: usize::MAX,
            pattern: proto.pattern.clone(),
            values,
            dim: proto.dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rank_k_snapshots(rng: &mut impl Rng, len: usize, n_s: usize, k: usize) -> Vec<Vec<f64>> {
        let factors: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        (0..n_s)
            .map(|_| {
                let coefs: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..2.0)).collect();
                (0..len)
                    .map(|i| (0..k).map(|r| coefs[r] * factors[r][i]).sum())
                    .collect()
            })
            .collect()
    }

    /// Independent rank oracle: Gram–Schmidt with a hard threshold.
    fn numerical_rank(snapshots: &[Vec<f64>], tol: f64) -> usize {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for t in snapshots {
            let mut r = t.clone();
            for b in &basis {
                let c: f64 = r.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in r.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
            let n = norm2(&r);
            if n > tol * norm2(t).max(1e-300) {
                basis.push(r.iter().map(|x| x / n).collect());
            }
        }
        basis.len()
    }

    #[test]
    fn identical_columns_give_one_principal_cell() {
        let col = vec![1.0, -2.0, 0.5];
        let snaps = vec![col.clone(), col.clone(), col.clone(), col];
        let rb = build_reduced_basis(&snaps, 1e-12).unwrap();
        assert_eq!(rb.n_r(), 1);
        assert_eq!(rb.principal, vec![0], "tie-break picks the lowest cell index");
        for alpha in &rb.alpha {
            assert!((alpha[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_three_matrix_needs_three_cells() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let snaps = rank_k_snapshots(&mut rng, 40, 25, 3);
        assert_eq!(numerical_rank(&snaps, 1e-8), 3, "oracle sanity");
        let rb = build_reduced_basis(&snaps, 1e-10).unwrap();
        assert_eq!(rb.n_r(), 3);
    }

    #[test]
    fn synthetic_rank_k_identification() {
        // N_s = 200 columns of known rank k ≤ 8
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(43);
        for k in [1usize, 4, 8] {
            let snaps = rank_k_snapshots(&mut rng, 120, 200, k);
            assert_eq!(numerical_rank(&snaps, 1e-8), k);
            let rb = build_reduced_basis(&snaps, 1e-10).unwrap();
            assert_eq!(rb.n_r(), k, "N_r must equal the snapshot rank at ε = 1e-10");
            assert!(rb.certificate <= 1e-10);
        }
    }

    #[test]
    fn termination_certificate_and_monotone_residuals() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(47);
        let snaps = rank_k_snapshots(&mut rng, 60, 40, 6);
        let eps = 1e-3;
        let rb = greedy_select(&snaps, eps);
        // exact loop-guard semantics
        assert!(rb.certificate <= eps);
        for (i, t) in snaps.iter().enumerate() {
            let n = rb.norms[i];
            let mut rec = vec![0.0; t.len()];
            for (r, z) in rb.basis.iter().enumerate() {
                for (x, zz) in rec.iter_mut().zip(z) {
                    *x += rb.beta[i][r] * zz;
                }
            }
            let res_inf = t
                .iter()
                .zip(&rec)
                .map(|(x, r)| (x / n - r).abs())
                .fold(0.0f64, f64::max);
            assert!(res_inf <= eps * (1.0 + 1e-10), "certified residual violated: {}", res_inf);
        }
        for w in rb.residual_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "max residual must not increase");
        }
    }

    #[test]
    fn basis_orthonormality() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(53);
        let snaps = rank_k_snapshots(&mut rng, 80, 30, 7);
        let rb = greedy_select(&snaps, 1e-9);
        for i in 0..rb.n_r() {
            for j in 0..rb.n_r() {
                let dot: f64 = rb.basis[i].iter().zip(&rb.basis[j]).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() <= 1e-10, "ZᵀZ[{},{}] = {}", i, j, dot);
            }
        }
    }

    #[test]
    fn idempotence_on_reconstructions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(59);
        let snaps = rank_k_snapshots(&mut rng, 50, 30, 5);
        let eps = 1e-4;
        let rb = greedy_select(&snaps, eps);
        let recon: Vec<Vec<f64>> = (0..snaps.len())
            .map(|s| {
                let mut t = vec![0.0; snaps[s].len()];
                for (r, z) in rb.basis.iter().enumerate() {
                    for (x, zz) in t.iter_mut().zip(z) {
                        *x += rb.norms[s] * rb.beta[s][r] * zz;
                    }
                }
                t
            })
            .collect();
        let rb2 = greedy_select(&recon, eps);
        assert!(rb2.n_r() <= rb.n_r());
    }

    #[test]
    fn determinism() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(61);
        let snaps = rank_k_snapshots(&mut rng, 70, 50, 6);
        let a = greedy_select(&snaps, 1e-6);
        let b = greedy_select(&snaps, 1e-6);
        assert_eq!(a.principal, b.principal);
        for (x, y) in a.basis.iter().zip(&b.basis) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn zero_norm_columns_flagged_and_skipped() {
        let snaps = vec![
            vec![0.0, 0.0, 0.0],
            vec![1.0, 2.0, 3.0],
            vec![2.0, 4.0, 6.0],
        ];
        let rb = build_reduced_basis(&snaps, 1e-10).unwrap();
        assert_eq!(rb.zero_cells, vec![0]);
        assert_eq!(rb.n_r(), 1);
        assert_eq!(rb.principal, vec![1]);
        assert!(rb.alpha[0].iter().all(|a| *a == 0.0));
        assert!((rb.alpha[2][0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn projection_recovers_exact_combinations() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(67);
        let snaps = rank_k_snapshots(&mut rng, 30, 10, 4);
        let rb = greedy_select(&snaps, 1e-10);
        let proj = SnapshotProjector::new(&snaps, &rb.principal).unwrap();

        // t_new = t̄^{s_1} → α = e_1
        let alpha = proj.project(&snaps[rb.principal[0]]);
        assert!((alpha[0] - 1.0).abs() < 1e-9);
        for a in &alpha[1..] {
            assert!(a.abs() < 1e-9);
        }

        // t_new = 2 t̄^{s_1} + 3 t̄^{s_2}
        let t_new: Vec<f64> = snaps[rb.principal[0]]
            .iter()
            .zip(&snaps[rb.principal[1]])
            .map(|(a, b)| 2.0 * a + 3.0 * b)
            .collect();
        let alpha = proj.project(&t_new);
        assert!((alpha[0] - 2.0).abs() < 1e-9 && (alpha[1] - 3.0).abs() < 1e-9);
        assert!(proj.reconstruction_error(&t_new, &alpha) <= 1e-10 * norm2(&t_new));

        // random in-span vector
        let coef: Vec<f64> = (0..proj.n_r()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t_new: Vec<f64> = (0..30)
            .map(|i| {
                (0..proj.n_r())
                    .map(|r| coef[r] * snaps[rb.principal[r]][i])
                    .sum()
            })
            .collect();
        let alpha = proj.project(&t_new);
        assert!(
            proj.reconstruction_error(&t_new, &alpha) <= 1e-10 * norm2(&t_new).max(1.0),
            "in-span reconstruction"
        );

        // α and the orthonormal-route β reconstructions agree in span
        let mut via_beta = vec![0.0; 30];
        for (r, z) in rb.basis.iter().enumerate() {
            let b: f64 = t_new
                .iter()
                .zip(z.iter())
                .map(|(x, zz)| x * zz)
                .sum();
            for (v, zz) in via_beta.iter_mut().zip(z) {
                *v += b * zz;
            }
            let _ = r;
        }
        let mut via_alpha = vec![0.0; 30];
        for (r, a) in alpha.iter().enumerate() {
            for (v, t) in via_alpha.iter_mut().zip(&snaps[rb.principal[r]]) {
                *v += a * t;
            }
        }
        for (x, y) in via_beta.iter().zip(&via_alpha) {
            assert!((x - y).abs() <= 1e-8 * norm2(&t_new).max(1.0));
        }
    }

    #[test]
    fn degenerate_gram_detected() {
        // two numerically identical principal columns force an
        // ill-conditioned Gram matrix
        let snaps = vec![vec![1.0, 0.0], vec![1.0, 1e-14]];
        assert!(matches!(
            SnapshotProjector::new(&snaps, &[0, 1]),
            Err(RomError::DegenerateBasis { .. })
        ));
    }
}
