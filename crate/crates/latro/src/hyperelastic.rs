//! Pointwise neo-Hookean constitutive evaluations.
//!
//! Cauchy stress `σ = (μ/J)(F Fᵀ − I) + (λ/J) ln J · I`, spatial moduli
//! `𝒞_ijkl = (λ/J) δ_ij δ_kl + ((μ − λ ln J)/J)(δ_ik δ_jl + δ_il δ_jk)`,
//! and the combined tensor `𝒟_ijkl = 𝒞_ikjl + δ_ij σ_kl` that contracts
//! basis-function gradients into nodal tangent blocks. All functions are
//! pure; inverted states (`det F ≤ 0`) surface as recoverable errors so the
//! line search can shrink past them.

use crate::math::{SqMat, Tensor4};

#[derive(Debug, thiserror::Error)]
pub enum MaterialError {
    #[error("invalid material parameters: {0}")]
    InvalidParams(String),
    #[error("inverted element: det F = {det}")]
    InvertedElement { det: f64 },
    #[error("singular geometric Jacobian: det J = {det}")]
    SingularJacobian { det: f64 },
}

/// Young modulus / Poisson ratio pair with derived Lamé coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaterialParams {
    pub e: f64,
    pub nu: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl MaterialParams {
    pub fn new(e: f64, nu: f64) -> Result<Self, MaterialError> {
        if e <= 0.0 {
            return Err(MaterialError::InvalidParams(format!("E = {} must be positive", e)));
        }
        if nu <= -1.0 || nu >= 0.5 {
            return Err(MaterialError::InvalidParams(format!(
                "nu = {} must lie in (-1, 0.5)",
                nu
            )));
        }
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        let mu = e / (2.0 * (1.0 + nu));
        Ok(Self { e, nu, lambda, mu })
    }
}

/// `F = I + ∇u`; fails when the state is inverted.
pub fn deformation_gradient(grad_u: &SqMat) -> Result<SqMat, MaterialError> {
    let d = grad_u.dim();
    let f = SqMat::identity(d).add(grad_u);
    let det = f.det();
    if det <= 0.0 || !det.is_finite() {
        return Err(MaterialError::InvertedElement { det });
    }
    Ok(f)
}

/// Cauchy stress of the compressible neo-Hookean law.
pub fn cauchy_stress(f: &SqMat, params: &MaterialParams) -> Result<SqMat, MaterialError> {
    let d = f.dim();
    let det = f.det();
    if det <= 0.0 || !det.is_finite() {
        return Err(MaterialError::InvertedElement { det });
    }
    let b = f.matmul(&f.transpose());
    let c1 = params.mu / det;
    let c2 = params.lambda / det * det.ln();
    let mut sigma = SqMat::zeros(d);
    for i in 0..d {
        for j in 0..d {
            let id = if i == j { 1.0 } else { 0.0 };
            sigma.set(i, j, c1 * (b.get(i, j) - id) + c2 * id);
        }
    }
    Ok(sigma)
}

/// Fourth-order spatial hyperelasticity tensor `𝒞`.
pub fn moduli(f: &SqMat, params: &MaterialParams) -> Result<Tensor4, MaterialError> {
    let d = f.dim();
    let det = f.det();
    if det <= 0.0 || !det.is_finite() {
        return Err(MaterialError::InvertedElement { det });
    }
    let a = params.lambda / det;
    let b = (params.mu - params.lambda * det.ln()) / det;
    let mut c = Tensor4::zeros(d);
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    let dij_kl = if i == j && k == l { 1.0 } else { 0.0 };
                    let dik_jl = if i == k && j == l { 1.0 } else { 0.0 };
                    let dil_jk = if i == l && j == k { 1.0 } else { 0.0 };
                    c.set(i, j, k, l, a * dij_kl + b * (dik_jl + dil_jk));
                }
            }
        }
    }
    Ok(c)
}

/// Combined tensor `𝒟_ijkl = 𝒞_ikjl + δ_ij σ_kl`.
///
/// Contracting `𝒟` with `∇φ_a ⊗ ∇φ_b` over the last two indices produces the
/// material plus geometric nodal tangent block in one pass.
pub fn combined_tensor(f: &SqMat, params: &MaterialParams) -> Result<Tensor4, MaterialError> {
    let d = f.dim();
    let c = moduli(f, params)?;
    let sigma = cauchy_stress(f, params)?;
    let mut t = Tensor4::zeros(d);
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    let dij = if i == j { 1.0 } else { 0.0 };
                    t.set(i, j, k, l, c.get(i, k, j, l) + dij * sigma.get(k, l));
                }
            }
        }
    }
    Ok(t)
}

/// Pull-back of `𝒟` through a geometric mapping with Jacobian `j_psi`
/// (convention `J_ij = ∂x_i/∂ξ_j`):
/// `𝒟^ref_ijkl = 𝒟_ij k̄ l̄ [J⁻ᵀ]_k k̄ [J⁻ᵀ]_l l̄ |det J|`,
/// so that contracting with reference gradients equals the spatial
/// contraction with pushed-forward gradients `J⁻ᵀ ∇_ξ φ` times `|det J|`.
pub fn pullback_combined(t: &Tensor4, j_psi: &SqMat) -> Result<Tensor4, MaterialError> {
    let d = t.dim();
    let det = j_psi.det();
    let inv = j_psi
        .inverse()
        .ok_or(MaterialError::SingularJacobian { det })?;
    let scale = det.abs();
    let mut out = Tensor4::zeros(d);
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    let mut s = 0.0;
                    for kb in 0..d {
                        for lb in 0..d {
                            s += t.get(i, j, kb, lb) * inv.get(k, kb) * inv.get(l, lb);
                        }
                    }
                    out.set(i, j, k, l, s * scale);
                }
            }
        }
    }
    Ok(out)
}

/// Compressible neo-Hookean strain energy density.
///
/// `W(F) = (μ/2)(tr(FᵀF) − d) − μ ln J + (λ/2)(ln J)²`. Consistent with the
/// Cauchy stress above via `σ = (1/J) ∂W/∂F Fᵀ`; kept as a test oracle, the
/// solver path never evaluates it.
pub fn strain_energy(f: &SqMat, params: &MaterialParams) -> Result<f64, MaterialError> {
    let d = f.dim();
    let det = f.det();
    if det <= 0.0 || !det.is_finite() {
        return Err(MaterialError::InvertedElement { det });
    }
    let tr_c = f.transpose().matmul(f).trace();
    let ln_j = det.ln();
    Ok(0.5 * params.mu * (tr_c - d as f64) - params.mu * ln_j
        + 0.5 * params.lambda * ln_j * ln_j)
}
