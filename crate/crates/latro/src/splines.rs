//! B-spline, NURBS, and Bernstein basis evaluation and geometric mappings.
//!
//! Univariate bases follow the Cox–de Boor recursion and return only the
//! `p + 1` functions that may be nonzero at a parameter value. Tensor-product
//! patches evaluate points and Jacobians in one pass; rational (weighted)
//! patches use the projective quotient rule. Composed mappings chain the two
//! analytic Jacobians, never finite differences.

use serde::{Deserialize, Serialize};

use crate::math::{SqMat, MAX_DIM};

/// Point and Jacobian of a geometric mapping at one parameter value.
#[derive(Clone, Copy, Debug)]
pub struct MappingEval {
    pub x: [f64; MAX_DIM],
    pub jacobian: SqMat,
}

#[derive(Debug, thiserror::Error)]
pub enum SplineError {
    #[error("parameter {value} outside [0,1] in direction {dir}")]
    Domain { dir: usize, value: f64 },
    #[error("invalid knot vector: {0}")]
    InvalidKnots(String),
    #[error("invalid patch: {0}")]
    InvalidPatch(String),
    #[error("micro mapping leaves the macro parametric domain: coordinate {dir} = {value}")]
    OutsideMacroDomain { dir: usize, value: f64 },
}

/// Open knot vector of degree `p` on `[0, 1]`.
///
/// The first and last knots are repeated `p + 1` times; interior knot
/// multiplicities stay at or below `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    degree: usize,
    knots: Vec<f64>,
}

impl KnotVector {
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self, SplineError> {
        let p = degree;
        if knots.len() < 2 * (p + 1) {
            return Err(SplineError::InvalidKnots(format!(
                "need at least {} knots for degree {}",
                2 * (p + 1),
                p
            )));
        }
        if knots.windows(2).any(|w| w[0] > w[1]) {
            return Err(SplineError::InvalidKnots("knots must be nondecreasing".into()));
        }
        if knots[..=p].iter().any(|k| *k != 0.0) {
            return Err(SplineError::InvalidKnots(format!(
                "first knot must be 0 with multiplicity {}",
                p + 1
            )));
        }
        let m = knots.len() - 1;
        if knots[m - p..].iter().any(|k| *k != 1.0) {
            return Err(SplineError::InvalidKnots(format!(
                "last knot must be 1 with multiplicity {}",
                p + 1
            )));
        }
        // interior multiplicities <= p
        let interior = &knots[p + 1..m - p];
        let mut run = 1;
        for w in interior.windows(2) {
            if w[0] == w[1] {
                run += 1;
                if run > p {
                    return Err(SplineError::InvalidKnots(format!(
                        "interior knot {} has multiplicity > {}",
                        w[0], p
                    )));
                }
            } else {
                run = 1;
            }
        }
        Ok(Self { degree, knots })
    }

    /// Open uniform knot vector with `n_elem` equal spans.
    pub fn uniform(degree: usize, n_elem: usize) -> Self {
        let p = degree;
        let mut knots = vec![0.0; p + 1];
        for k in 1..n_elem {
            knots.push(k as f64 / n_elem as f64);
        }
        knots.extend(std::iter::repeat(1.0).take(p + 1));
        Self { degree, knots }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions.
    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// Distinct nonempty spans as `(left, right)` pairs.
    pub fn spans(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for w in self.knots.windows(2) {
            if w[1] > w[0] {
                out.push((w[0], w[1]));
            }
        }
        out
    }

    /// Greville abscissa of basis function `i`.
    pub fn greville(&self, i: usize) -> f64 {
        let p = self.degree;
        if p == 0 {
            return 0.5 * (self.knots[i] + self.knots[i + 1]);
        }
        self.knots[i + 1..=i + p].iter().sum::<f64>() / p as f64
    }

    /// Index of the knot span containing `xi` (last nonempty span at `xi = 1`).
    pub fn find_span(&self, xi: f64) -> usize {
        let p = self.degree;
        let n = self.num_basis();
        if xi >= self.knots[n] {
            return n - 1;
        }
        if xi <= self.knots[p] {
            return p;
        }
        let mut lo = p;
        let mut hi = n;
        let mut mid = (lo + hi) / 2;
        while xi < self.knots[mid] || xi >= self.knots[mid + 1] {
            if xi < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
            mid = (lo + hi) / 2;
        }
        mid
    }

    /// Values and derivatives of the `p + 1` possibly-nonzero basis functions
    /// at `xi`.
    ///
    /// Returns `(first_index, ders)` with `ders[k][j]` the `k`-th derivative
    /// of function `first_index + j`, for `k = 0..=deriv_order`.
    pub fn eval_basis(
        &self,
        xi: f64,
        deriv_order: usize,
    ) -> Result<(usize, Vec<Vec<f64>>), SplineError> {
        if !(0.0..=1.0).contains(&xi) {
            return Err(SplineError::Domain { dir: 0, value: xi });
        }
        assert!(deriv_order <= 2, "derivative order limited to 2");
        let p = self.degree;
        let span = self.find_span(xi);
        let ders = self.ders_basis_funs(span, xi, deriv_order);
        Ok((span - p, ders))
    }

    // Piegl & Tiller algorithm A2.3.
    fn ders_basis_funs(&self, span: usize, xi: f64, n_der: usize) -> Vec<Vec<f64>> {
        let p = self.degree;
        let u = &self.knots;
        let n = n_der.min(p);
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = xi - u[span + 1 - j];
            right[j] = u[span + j] - xi;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; n_der + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        if n == 0 {
            return ders;
        }
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let mut s1 = 0usize;
            let mut s2 = 1usize;
            a[0][0] = 1.0;
            for k in 1..=n {
                let mut dv = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    dv = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize {
                    k - 1
                } else {
                    p - r
                };
                for j in j1..=j2 {
                    a[s2][j] =
                        (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][(rk + j as isize) as usize];
                    dv += a[s2][j] * ndu[(rk + j as isize) as usize][pk];
                }
                if r as isize <= pk as isize {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    dv += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = dv;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut r = p as f64;
        for k in 1..=n {
            for j in 0..=p {
                ders[k][j] *= r;
            }
            r *= (p - k) as f64;
        }
        ders
    }
}

/// Tensor-product B-spline or NURBS patch in `d` dimensions.
///
/// Control points are flat-indexed as `i0 + n0 * (i1 + n1 * i2)`. All
/// evaluation goes through the rational form; with unit weights the weight
/// function is the partition of unity and the rational values coincide with
/// the plain B-spline values to rounding.
#[derive(Clone, Debug)]
pub struct SplinePatch {
    dim: usize,
    kvs: Vec<KnotVector>,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Serialized form of [`SplinePatch`]; field names are part of the geometry
/// file format.
#[derive(Serialize, Deserialize)]
struct PatchJson {
    degree: Vec<usize>,
    knots: Vec<Vec<f64>>,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl Serialize for SplinePatch {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PatchJson {
            degree: self.kvs.iter().map(|kv| kv.degree()).collect(),
            knots: self.kvs.iter().map(|kv| kv.knots().to_vec()).collect(),
            points: self.points.clone(),
            weights: self.weights.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SplinePatch {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = PatchJson::deserialize(d)?;
        let kvs = raw
            .degree
            .iter()
            .zip(raw.knots)
            .map(|(p, k)| KnotVector::new(*p, k))
            .collect::<Result<Vec<_>, _>>()
            .map_err(serde::de::Error::custom)?;
        SplinePatch::new(kvs, raw.points, raw.weights).map_err(serde::de::Error::custom)
    }
}

impl SplinePatch {
    pub fn new(
        kvs: Vec<KnotVector>,
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self, SplineError> {
        let dim = kvs.len();
        if dim < 1 || dim > MAX_DIM {
            return Err(SplineError::InvalidPatch(format!("dimension {} unsupported", dim)));
        }
        let n_expected: usize = kvs.iter().map(|kv| kv.num_basis()).product();
        if points.len() != n_expected {
            return Err(SplineError::InvalidPatch(format!(
                "{} control points given, {} required",
                points.len(),
                n_expected
            )));
        }
        if points.iter().any(|p| p.len() != dim) {
            return Err(SplineError::InvalidPatch("control point dimension mismatch".into()));
        }
        if weights.len() != n_expected {
            return Err(SplineError::InvalidPatch("one weight per control point required".into()));
        }
        if weights.iter().any(|w| *w <= 0.0) {
            return Err(SplineError::InvalidPatch("weights must be strictly positive".into()));
        }
        Ok(Self { dim, kvs, points, weights })
    }

    /// Polynomial patch with all weights 1.
    pub fn polynomial(kvs: Vec<KnotVector>, points: Vec<Vec<f64>>) -> Result<Self, SplineError> {
        let n = points.len();
        Self::new(kvs, points, vec![1.0; n])
    }

    /// Bilinear/trilinear patch spanned by `2^d` corner points at degree 1.
    ///
    /// Corners are ordered like control points: `i0` fastest.
    pub fn from_corners(dim: usize, corners: Vec<Vec<f64>>) -> Result<Self, SplineError> {
        let kvs = vec![KnotVector::uniform(1, 1); dim];
        Self::polynomial(kvs, corners)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn knot_vector(&self, dir: usize) -> &KnotVector {
        &self.kvs[dir]
    }

    pub fn num_basis_per_dir(&self) -> Vec<usize> {
        self.kvs.iter().map(|kv| kv.num_basis()).collect()
    }

    pub fn num_basis(&self) -> usize {
        self.kvs.iter().map(|kv| kv.num_basis()).product()
    }

    pub fn control_point(&self, flat: usize) -> &[f64] {
        &self.points[flat]
    }

    pub fn weight(&self, flat: usize) -> f64 {
        self.weights[flat]
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let ns = self.num_basis_per_dir();
        let mut flat = 0;
        for dir in (0..self.dim).rev() {
            flat = flat * ns[dir] + multi[dir];
        }
        flat
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let ns = self.num_basis_per_dir();
        let mut rem = flat;
        let mut multi = vec![0; self.dim];
        for dir in 0..self.dim {
            multi[dir] = rem % ns[dir];
            rem /= ns[dir];
        }
        multi
    }

    /// Whether control point `flat` sits on the patch parametric boundary.
    pub fn is_boundary_index(&self, flat: usize) -> bool {
        let ns = self.num_basis_per_dir();
        self.multi_index(flat)
            .iter()
            .zip(&ns)
            .any(|(i, n)| *i == 0 || *i + 1 == *n)
    }

    /// Flat indices of the basis functions supported on a patch side
    /// (`dir`, low/high end).
    pub fn side_indices(&self, dir: usize, high: bool) -> Vec<usize> {
        let ns = self.num_basis_per_dir();
        let fixed = if high { ns[dir] - 1 } else { 0 };
        (0..self.num_basis())
            .filter(|flat| self.multi_index(*flat)[dir] == fixed)
            .collect()
    }

    /// Active basis functions with values and parametric gradients at `theta`.
    ///
    /// Returns `(flat_indices, values, gradients)` where `gradients[a]` is
    /// `∇_θ` of the (rational) basis function.
    pub fn eval_basis_grad(
        &self,
        theta: &[f64],
    ) -> Result<(Vec<usize>, Vec<f64>, Vec<[f64; MAX_DIM]>), SplineError> {
        let d = self.dim;
        let mut firsts = vec![0usize; d];
        let mut uni = Vec::with_capacity(d);
        for dir in 0..d {
            if !(0.0..=1.0).contains(&theta[dir]) {
                return Err(SplineError::Domain { dir, value: theta[dir] });
            }
            let (first, ders) = self.kvs[dir].eval_basis(theta[dir], 1)?;
            firsts[dir] = first;
            uni.push(ders);
        }
        let ns = self.num_basis_per_dir();
        let counts: Vec<usize> = self.kvs.iter().map(|kv| kv.degree() + 1).collect();
        let n_active: usize = counts.iter().product();

        let mut indices = Vec::with_capacity(n_active);
        let mut phi_w = Vec::with_capacity(n_active);
        let mut grad_w = Vec::with_capacity(n_active);
        let mut wsum = 0.0;
        let mut wgrad = [0.0; MAX_DIM];

        let mut multi = vec![0usize; d];
        for _ in 0..n_active {
            let mut flat = 0;
            for dir in (0..d).rev() {
                flat = flat * ns[dir] + (firsts[dir] + multi[dir]);
            }
            let mut val = 1.0;
            let mut grad = [0.0; MAX_DIM];
            for k in 0..d {
                let mut g = 1.0;
                for dir in 0..d {
                    let row = if dir == k { 1 } else { 0 };
                    g *= uni[dir][row][multi[dir]];
                }
                grad[k] = g;
            }
            for dir in 0..d {
                val *= uni[dir][0][multi[dir]];
            }
            let w = self.weights[flat];
            wsum += w * val;
            for k in 0..d {
                wgrad[k] += w * grad[k];
            }
            indices.push(flat);
            phi_w.push(w * val);
            grad_w.push([w * grad[0], w * grad[1], w * grad[2]]);

            // advance tensor multi-index
            for dir in 0..d {
                multi[dir] += 1;
                if multi[dir] < counts[dir] {
                    break;
                }
                multi[dir] = 0;
            }
        }

        // rational quotient: R = wφ / W, ∇R = (∇(wφ) W − wφ ∇W) / W²
        let inv_w = 1.0 / wsum;
        let mut values = Vec::with_capacity(n_active);
        let mut grads = Vec::with_capacity(n_active);
        for a in 0..n_active {
            let v = phi_w[a] * inv_w;
            let mut g = [0.0; MAX_DIM];
            for k in 0..d {
                g[k] = (grad_w[a][k] - v * wgrad[k]) * inv_w;
            }
            values.push(v);
            grads.push(g);
        }
        Ok((indices, values, grads))
    }

    /// Point and Jacobian of the patch mapping at `theta`.
    pub fn eval(&self, theta: &[f64]) -> Result<MappingEval, SplineError> {
        let d = self.dim;
        let (indices, values, grads) = self.eval_basis_grad(theta)?;
        let mut x = [0.0; MAX_DIM];
        let mut jac = SqMat::zeros(d);
        for (a, flat) in indices.iter().enumerate() {
            let p = &self.points[*flat];
            for i in 0..d {
                x[i] += values[a] * p[i];
                for k in 0..d {
                    jac.add_to(i, k, grads[a][k] * p[i]);
                }
            }
        }
        Ok(MappingEval { x, jacobian: jac })
    }
}

/// Single Bézier macro-element: Bernstein basis of per-direction degree `q`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BezierMacroElement {
    dim: usize,
    degree: Vec<usize>,
    points: Vec<Vec<f64>>,
}

impl BezierMacroElement {
    pub fn new(
        degree: Vec<usize>,
        points: Vec<Vec<f64>>,
    ) -> Result<Self, SplineError> {
        let dim = degree.len();
        if dim < 1 || dim > MAX_DIM {
            return Err(SplineError::InvalidPatch(format!("dimension {} unsupported", dim)));
        }
        let n: usize = degree.iter().map(|q| q + 1).product();
        if points.len() != n {
            return Err(SplineError::InvalidPatch(format!(
                "{} control points given, {} required",
                points.len(),
                n
            )));
        }
        if points.iter().any(|p| p.len() != dim) {
            return Err(SplineError::InvalidPatch("control point dimension mismatch".into()));
        }
        Ok(Self { dim, degree, points })
    }

    /// Affine element spanned by `2^d` corners (degree 1 in every direction).
    pub fn from_corners(dim: usize, corners: Vec<Vec<f64>>) -> Result<Self, SplineError> {
        Self::new(vec![1; dim], corners)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> &[usize] {
        &self.degree
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Control points of the face `{xi_dir = 0 or 1}`, in lexicographic order
    /// of the remaining directions.
    pub fn face_points(&self, dir: usize, high: bool) -> Vec<Vec<f64>> {
        let ns: Vec<usize> = self.degree.iter().map(|q| q + 1).collect();
        let fixed = if high { ns[dir] - 1 } else { 0 };
        let mut out = Vec::new();
        let total: usize = ns.iter().product();
        for flat in 0..total {
            let mut rem = flat;
            let mut multi = vec![0usize; self.dim];
            for k in 0..self.dim {
                multi[k] = rem % ns[k];
                rem /= ns[k];
            }
            if multi[dir] == fixed {
                out.push(self.points[flat].clone());
            }
        }
        out
    }

    /// Point and Jacobian of the Bézier mapping at `xi ∈ [0,1]^d`.
    pub fn eval(&self, xi: &[f64]) -> Result<MappingEval, SplineError> {
        let d = self.dim;
        for (dir, v) in xi.iter().enumerate().take(d) {
            if !(0.0..=1.0).contains(v) {
                return Err(SplineError::Domain { dir, value: *v });
            }
        }
        let mut uni_vals = Vec::with_capacity(d);
        let mut uni_ders = Vec::with_capacity(d);
        for dir in 0..d {
            let (v, dv) = bernstein_all(self.degree[dir], xi[dir]);
            uni_vals.push(v);
            uni_ders.push(dv);
        }
        let ns: Vec<usize> = self.degree.iter().map(|q| q + 1).collect();
        let total: usize = ns.iter().product();
        let mut x = [0.0; MAX_DIM];
        let mut jac = SqMat::zeros(d);
        for flat in 0..total {
            let mut rem = flat;
            let mut multi = [0usize; MAX_DIM];
            for k in 0..d {
                multi[k] = rem % ns[k];
                rem /= ns[k];
            }
            let mut val = 1.0;
            for dir in 0..d {
                val *= uni_vals[dir][multi[dir]];
            }
            let p = &self.points[flat];
            for i in 0..d {
                x[i] += val * p[i];
            }
            for k in 0..d {
                let mut g = 1.0;
                for dir in 0..d {
                    g *= if dir == k {
                        uni_ders[dir][multi[dir]]
                    } else {
                        uni_vals[dir][multi[dir]]
                    };
                }
                for i in 0..d {
                    jac.add_to(i, k, g * p[i]);
                }
            }
        }
        Ok(MappingEval { x, jacobian: jac })
    }
}

/// All Bernstein polynomials of degree `q` at `t`, with first derivatives.
pub fn bernstein_all(q: usize, t: f64) -> (Vec<f64>, Vec<f64>) {
    // triangular de Casteljau-style construction
    let mut vals = vec![0.0; q + 1];
    vals[0] = 1.0;
    for deg in 1..=q {
        let mut saved = 0.0;
        for j in 0..deg {
            let tmp = vals[j];
            vals[j] = saved + (1.0 - t) * tmp;
            saved = t * tmp;
        }
        vals[deg] = saved;
    }
    // derivative from degree q-1 values: B'_{i,q} = q (B_{i-1,q-1} - B_{i,q-1})
    let mut low = vec![0.0; q + 1];
    low[0] = 1.0;
    for deg in 1..q {
        let mut saved = 0.0;
        for j in 0..deg {
            let tmp = low[j];
            low[j] = saved + (1.0 - t) * tmp;
            saved = t * tmp;
        }
        low[deg] = saved;
    }
    let mut ders = vec![0.0; q + 1];
    if q > 0 {
        for i in 0..=q {
            let left = if i > 0 { low[i - 1] } else { 0.0 };
            let right = if i < q { low[i] } else { 0.0 };
            ders[i] = q as f64 * (left - right);
        }
    }
    (vals, ders)
}

/// Tolerance for the micro image leaving the macro parametric domain.
const COMPOSITION_TOL: f64 = 1e-12;

/// Point and chain-rule Jacobian of the composed mapping `B ∘ S` at `theta`.
pub fn eval_composed(
    macro_el: &BezierMacroElement,
    micro: &SplinePatch,
    theta: &[f64],
) -> Result<MappingEval, SplineError> {
    let d = micro.dim();
    assert_eq!(macro_el.dim(), d, "macro/micro dimension mismatch");
    let me = micro.eval(theta)?;
    let mut xi = [0.0; MAX_DIM];
    for dir in 0..d {
        let v = me.x[dir];
        if v < -COMPOSITION_TOL || v > 1.0 + COMPOSITION_TOL {
            return Err(SplineError::OutsideMacroDomain { dir, value: v });
        }
        xi[dir] = v.clamp(0.0, 1.0);
    }
    let be = macro_el.eval(&xi[..d])?;
    Ok(MappingEval {
        x: be.x,
        jacobian: be.jacobian.matmul(&me.jacobian),
    })
}

/// Identity patch on `[0,1]^d`: control points at the Greville abscissae.
pub fn identity_patch(dim: usize, degree: usize, n_elem: usize) -> SplinePatch {
    let kvs = vec![KnotVector::uniform(degree, n_elem); dim];
    let ns: Vec<usize> = kvs.iter().map(|kv| kv.num_basis()).collect();
    let total: usize = ns.iter().product();
    let mut points = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut p = vec![0.0; dim];
        for dir in 0..dim {
            let i = rem % ns[dir];
            rem /= ns[dir];
            p[dir] = kvs[dir].greville(i);
        }
        points.push(p);
    }
    SplinePatch::polynomial(kvs, points).expect("identity patch is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, theta: &[f64], h: f64) -> Vec<Vec<f64>> {
        let d = theta.len();
        let mut jac = vec![vec![0.0; d]; d];
        for k in 0..d {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[k] += h;
            tm[k] -= h;
            let fp = f(&tp);
            let fm = f(&tm);
            for i in 0..d {
                jac[i][k] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn linear_hat_values() {
        let kv = KnotVector::new(1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let (first, ders) = kv.eval_basis(0.25, 0).unwrap();
        assert_eq!(first, 0);
        assert!((ders[0][0] - 0.75).abs() < 1e-15);
        assert!((ders[0][1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn bernstein_quadratic_midpoint() {
        let kv = KnotVector::new(2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let (first, ders) = kv.eval_basis(0.5, 0).unwrap();
        assert_eq!(first, 0);
        assert!((ders[0][0] - 0.25).abs() < 1e-15);
        assert!((ders[0][1] - 0.5).abs() < 1e-15);
        assert!((ders[0][2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cubic_derivatives_match_finite_differences() {
        let kv =
            KnotVector::new(3, vec![0.0, 0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let xi = 0.3;
        let (first, ders) = kv.eval_basis(xi, 1).unwrap();
        let sum_d1: f64 = ders[1].iter().sum();
        assert!(sum_d1.abs() < 1e-10, "derivatives sum to 0, got {}", sum_d1);
        // central differences of order-0 values
        let h = 1e-7;
        let (f_p, dp) = kv.eval_basis(xi + h, 0).unwrap();
        let (f_m, dm) = kv.eval_basis(xi - h, 0).unwrap();
        assert_eq!(f_p, first);
        assert_eq!(f_m, first);
        for j in 0..4 {
            let fd = (dp[0][j] - dm[0][j]) / (2.0 * h);
            assert!(
                (ders[1][j] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                "j={} analytic {} fd {}",
                j,
                ders[1][j],
                fd
            );
        }
    }

    #[test]
    fn domain_error_outside_unit_interval() {
        let kv = KnotVector::new(1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(kv.eval_basis(-0.1, 0).is_err());
        assert!(kv.eval_basis(1.1, 0).is_err());
    }

    #[test]
    fn partition_of_unity_and_derivative_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let kv =
            KnotVector::new(3, vec![0.0, 0.0, 0.0, 0.0, 0.2, 0.2, 0.5, 0.8, 1.0, 1.0, 1.0, 1.0])
                .unwrap();
        for _ in 0..1000 {
            let xi: f64 = rng.gen();
            let (_, ders) = kv.eval_basis(xi, 1).unwrap();
            let s0: f64 = ders[0].iter().sum();
            let s1: f64 = ders[1].iter().sum();
            assert!((s0 - 1.0).abs() <= 1e-13, "PoU violated at {}: {}", xi, s0);
            assert!(s1.abs() <= 1e-10, "derivative sum violated at {}: {}", xi, s1);
        }
    }

    #[test]
    fn identity_patch_eval() {
        let patch = identity_patch(2, 2, 3);
        let e = patch.eval(&[0.3, 0.7]).unwrap();
        assert!((e.x[0] - 0.3).abs() < 1e-14);
        assert!((e.x[1] - 0.7).abs() < 1e-14);
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((e.jacobian.get(i, j) - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn affine_patch_jacobian() {
        // x = 2 θ₁, y = θ₂
        let patch = SplinePatch::from_corners(
            2,
            vec![
                vec![0.0, 0.0],
                vec![2.0, 0.0],
                vec![0.0, 1.0],
                vec![2.0, 1.0],
            ],
        )
        .unwrap();
        for theta in [[0.1, 0.2], [0.9, 0.5], [0.5, 1.0]] {
            let e = patch.eval(&theta).unwrap();
            assert!((e.jacobian.get(0, 0) - 2.0).abs() < 1e-14);
            assert!((e.jacobian.get(1, 1) - 1.0).abs() < 1e-14);
            assert!(e.jacobian.get(0, 1).abs() < 1e-14);
            assert!(e.jacobian.get(1, 0).abs() < 1e-14);
        }
    }

    /// Quarter annulus between radii 1 and 2, exact with quadratic NURBS.
    pub(crate) fn quarter_annulus() -> SplinePatch {
        let kv_ang = KnotVector::new(2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let kv_rad = KnotVector::new(1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let w = std::f64::consts::FRAC_1_SQRT_2;
        // angular fastest (dir 0), radial slowest (dir 1)
        let points = vec![
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 1.0],
            vec![2.0, 0.0],
            vec![2.0, 2.0],
            vec![0.0, 2.0],
        ];
        let weights = vec![1.0, w, 1.0, 1.0, w, 1.0];
        SplinePatch::new(vec![kv_ang, kv_rad], points, weights).unwrap()
    }

    #[test]
    fn rational_jacobian_matches_finite_differences() {
        let patch = quarter_annulus();
        let theta = [0.5, 0.5];
        let e = patch.eval(&theta).unwrap();
        // on-circle check: radius 1.5 at 45 degrees
        let r = (e.x[0] * e.x[0] + e.x[1] * e.x[1]).sqrt();
        assert!((r - 1.5).abs() < 1e-12);
        let fd = fd_jacobian(
            |t| {
                let e = patch.eval(t).unwrap();
                vec![e.x[0], e.x[1]]
            },
            &theta,
            1e-6,
        );
        for i in 0..2 {
            for j in 0..2 {
                let a = e.jacobian.get(i, j);
                assert!(
                    (a - fd[i][j]).abs() <= 1e-6 * (1.0 + a.abs()),
                    "J[{}][{}] analytic {} fd {}",
                    i,
                    j,
                    a,
                    fd[i][j]
                );
            }
        }
    }

    #[test]
    fn rational_reduces_to_polynomial_with_unit_weights() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let patch = identity_patch(2, 3, 4);
        for _ in 0..100 {
            let theta = [rng.gen::<f64>(), rng.gen::<f64>()];
            let (idx, vals, _) = patch.eval_basis_grad(&theta).unwrap();
            // reference: plain tensor B-spline values
            let (f0, d0) = patch.knot_vector(0).eval_basis(theta[0], 0).unwrap();
            let (f1, d1) = patch.knot_vector(1).eval_basis(theta[1], 0).unwrap();
            let n0 = patch.num_basis_per_dir()[0];
            for (a, flat) in idx.iter().enumerate() {
                let i0 = flat % n0;
                let i1 = flat / n0;
                let plain = d0[0][i0 - f0] * d1[0][i1 - f1];
                assert!(
                    (vals[a] - plain).abs() <= 1e-15,
                    "rational {} vs plain {}",
                    vals[a],
                    plain
                );
            }
        }
    }

    #[test]
    fn identity_composition_equals_patch() {
        let macro_el = BezierMacroElement::from_corners(
            2,
            vec![
                vec![0.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
            ],
        )
        .unwrap();
        let micro = identity_patch(2, 2, 2);
        let theta = [0.4, 0.6];
        let a = eval_composed(&macro_el, &micro, &theta).unwrap();
        let b = micro.eval(&theta).unwrap();
        for i in 0..2 {
            assert!((a.x[i] - b.x[i]).abs() < 1e-13);
            for j in 0..2 {
                assert!((a.jacobian.get(i, j) - b.jacobian.get(i, j)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn scaled_composition_jacobian() {
        let macro_el = BezierMacroElement::from_corners(
            2,
            vec![
                vec![0.0, 0.0],
                vec![2.0, 0.0],
                vec![0.0, 2.0],
                vec![2.0, 2.0],
            ],
        )
        .unwrap();
        let micro = identity_patch(2, 1, 1);
        let e = eval_composed(&macro_el, &micro, &[0.3, 0.8]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 2.0 } else { 0.0 };
                assert!((e.jacobian.get(i, j) - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn curved_macro_composition_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        // quadratic macro bending the unit square into a curved beam
        let macro_el = BezierMacroElement::new(
            vec![2, 2],
            vec![
                vec![0.0, 0.0],
                vec![1.0, 0.4],
                vec![2.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.5],
                vec![2.0, 1.0],
                vec![0.2, 2.0],
                vec![1.0, 2.6],
                vec![1.8, 2.0],
            ],
        )
        .unwrap();
        // cross-cell-like micro patch strictly inside the unit square
        let micro = SplinePatch::from_corners(
            2,
            vec![
                vec![0.1, 0.1],
                vec![0.9, 0.2],
                vec![0.2, 0.8],
                vec![0.8, 0.9],
            ],
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let theta = [rng.gen::<f64>(), rng.gen::<f64>()];
            let e = eval_composed(&macro_el, &micro, &theta).unwrap();
            let fd = fd_jacobian(
                |t| {
                    let e = eval_composed(&macro_el, &micro, t).unwrap();
                    vec![e.x[0], e.x[1]]
                },
                &[theta[0].clamp(1e-5, 1.0 - 1e-5), theta[1].clamp(1e-5, 1.0 - 1e-5)],
                1e-6,
            );
            let ec = eval_composed(
                &macro_el,
                &micro,
                &[theta[0].clamp(1e-5, 1.0 - 1e-5), theta[1].clamp(1e-5, 1.0 - 1e-5)],
            )
            .unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let a = ec.jacobian.get(i, j);
                    assert!(
                        (a - fd[i][j]).abs() <= 1e-6 * (1.0 + a.abs()),
                        "J[{}][{}] analytic {} fd {}",
                        i,
                        j,
                        a,
                        fd[i][j]
                    );
                }
            }
            let _ = e;
        }
    }

    #[test]
    fn composition_rejects_escaping_micro() {
        let macro_el = BezierMacroElement::from_corners(
            2,
            vec![
                vec![0.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
            ],
        )
        .unwrap();
        let micro = SplinePatch::from_corners(
            2,
            vec![
                vec![0.0, 0.0],
                vec![1.5, 0.0],
                vec![0.0, 1.0],
                vec![1.5, 1.0],
            ],
        )
        .unwrap();
        assert!(matches!(
            eval_composed(&macro_el, &micro, &[1.0, 0.5]),
            Err(SplineError::OutsideMacroDomain { .. })
        ));
    }

    #[test]
    fn patch_json_round_trip() {
        let patch = quarter_annulus();
        let json = serde_json::to_string(&patch).unwrap();
        assert!(json.contains("\"degree\""));
        assert!(json.contains("\"knots\""));
        assert!(json.contains("\"points\""));
        assert!(json.contains("\"weights\""));
        let back: SplinePatch = serde_json::from_str(&json).unwrap();
        let a = patch.eval(&[0.3, 0.6]).unwrap();
        let b = back.eval(&[0.3, 0.6]).unwrap();
        assert!((a.x[0] - b.x[0]).abs() < 1e-15);
        assert!((a.x[1] - b.x[1]).abs() < 1e-15);
    }
}
