//! Small fixed-capacity linear algebra for pointwise kinematics, plus
//! Gauss–Legendre node generation.
//!
//! The solver works in `d = 2` or `d = 3` spatial dimensions. All
//! per-quadrature-point objects (deformation gradients, stress tensors,
//! moduli) are tiny, so they live on the stack with capacity for `d = 3`
//! and a runtime dimension tag.

/// Maximum supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// Dense `d × d` matrix with fixed capacity, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SqMat {
    d: usize,
    a: [f64; MAX_DIM * MAX_DIM],
}

impl SqMat {
    pub fn zeros(d: usize) -> Self {
        assert!(d >= 1 && d <= MAX_DIM);
        Self { d, a: [0.0; 9] }
    }

    pub fn identity(d: usize) -> Self {
        let mut m = Self::zeros(d);
        for i in 0..d {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(d: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let d = rows.len();
        Self::from_fn(d, |i, j| rows[i][j])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.d && j < self.d);
        self.a[i * MAX_DIM + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.d && j < self.d);
        self.a[i * MAX_DIM + j] = v;
    }

    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.d && j < self.d);
        self.a[i * MAX_DIM + j] += v;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.d, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        debug_assert_eq!(self.d, rhs.d);
        let mut out = Self::zeros(self.d);
        for i in 0..self.d {
            for j in 0..self.d {
                let mut s = 0.0;
                for k in 0..self.d {
                    s += self.get(i, k) * rhs.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    /// `self * v` for a `d`-vector.
    pub fn matvec(&self, v: &[f64]) -> [f64; MAX_DIM] {
        debug_assert_eq!(v.len(), self.d);
        let mut out = [0.0; MAX_DIM];
        for i in 0..self.d {
            let mut s = 0.0;
            for j in 0..self.d {
                s += self.get(i, j) * v[j];
            }
            out[i] = s;
        }
        out
    }

    /// `selfᵀ * v` for a `d`-vector.
    pub fn tr_matvec(&self, v: &[f64]) -> [f64; MAX_DIM] {
        debug_assert_eq!(v.len(), self.d);
        let mut out = [0.0; MAX_DIM];
        for j in 0..self.d {
            let mut s = 0.0;
            for i in 0..self.d {
                s += self.get(i, j) * v[i];
            }
            out[j] = s;
        }
        out
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = *self;
        for v in out.a.iter_mut() {
            *v *= c;
        }
        out
    }

    pub fn add(&self, rhs: &Self) -> Self {
        debug_assert_eq!(self.d, rhs.d);
        let mut out = *self;
        for (v, w) in out.a.iter_mut().zip(rhs.a.iter()) {
            *v += w;
        }
        out
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        debug_assert_eq!(self.d, rhs.d);
        let mut out = *self;
        for (v, w) in out.a.iter_mut().zip(rhs.a.iter()) {
            *v -= w;
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.d).map(|i| self.get(i, i)).sum()
    }

    pub fn det(&self) -> f64 {
        match self.d {
            1 => self.get(0, 0),
            2 => self.get(0, 0) * self.get(1, 1) - self.get(0, 1) * self.get(1, 0),
            3 => {
                self.get(0, 0) * (self.get(1, 1) * self.get(2, 2) - self.get(1, 2) * self.get(2, 1))
                    - self.get(0, 1)
                        * (self.get(1, 0) * self.get(2, 2) - self.get(1, 2) * self.get(2, 0))
                    + self.get(0, 2)
                        * (self.get(1, 0) * self.get(2, 1) - self.get(1, 1) * self.get(2, 0))
            }
            _ => unreachable!(),
        }
    }

    /// Inverse by cofactors; `None` if the determinant vanishes.
    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let inv_det = 1.0 / det;
        let m = match self.d {
            1 => Self::from_fn(1, |_, _| inv_det),
            2 => {
                let mut m = Self::zeros(2);
                m.set(0, 0, self.get(1, 1) * inv_det);
                m.set(0, 1, -self.get(0, 1) * inv_det);
                m.set(1, 0, -self.get(1, 0) * inv_det);
                m.set(1, 1, self.get(0, 0) * inv_det);
                m
            }
            3 => {
                let c = |i: usize, j: usize| -> f64 {
                    let r = [(i + 1) % 3, (i + 2) % 3];
                    let s = [(j + 1) % 3, (j + 2) % 3];
                    self.get(r[0], s[0]) * self.get(r[1], s[1])
                        - self.get(r[0], s[1]) * self.get(r[1], s[0])
                };
                // adjugate transpose
                Self::from_fn(3, |i, j| c(j, i) * inv_det)
            }
            _ => unreachable!(),
        };
        Some(m)
    }

    pub fn norm_inf(&self) -> f64 {
        self.a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Fourth-order `d⁴` tensor with fixed capacity and stride-3 indexing.
#[derive(Clone, Debug)]
pub struct Tensor4 {
    d: usize,
    a: [f64; MAX_DIM * MAX_DIM * MAX_DIM * MAX_DIM],
}

impl Tensor4 {
    pub fn zeros(d: usize) -> Self {
        assert!(d >= 1 && d <= MAX_DIM);
        Self { d, a: [0.0; 81] }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    fn idx(i: usize, j: usize, k: usize, l: usize) -> usize {
        ((i * MAX_DIM + j) * MAX_DIM + k) * MAX_DIM + l
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.a[Self::idx(i, j, k, l)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        self.a[Self::idx(i, j, k, l)] = v;
    }
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
///
/// Roots of the Legendre polynomial `P_n` by Newton iteration on the
/// three-term recurrence, weights `2 / ((1 - x²) P_n'(x)²)`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-like initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_inverse() {
        for d in 1..=3 {
            let m = SqMat::identity(d);
            assert_eq!(m.inverse().unwrap(), m);
            assert!((m.det() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let m = SqMat::from_rows(&[&[2.0, 1.0, 0.5], &[0.3, 3.0, 1.0], &[0.0, -1.0, 4.0]]);
        let inv = m.inverse().unwrap();
        let prod = m.matmul(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod.get(i, j) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn det_2d() {
        let m = SqMat::from_rows(&[&[1.1, 0.0], &[0.0, 0.95]]);
        assert!((m.det() - 1.045).abs() < 1e-15);
    }

    #[test]
    fn gauss_low_orders() {
        let (x, w) = gauss_legendre(1);
        assert!(x[0].abs() < 1e-15 && (w[0] - 2.0).abs() < 1e-15);

        let (x, w) = gauss_legendre(2);
        let r = 1.0 / 3f64.sqrt();
        assert!((x[0] + r).abs() < 1e-14 && (x[1] - r).abs() < 1e-14);
        assert!((w[0] - 1.0).abs() < 1e-14 && (w[1] - 1.0).abs() < 1e-14);

        let (x, w) = gauss_legendre(3);
        let r = (3.0f64 / 5.0).sqrt();
        assert!((x[0] + r).abs() < 1e-14 && x[1].abs() < 1e-14 && (x[2] - r).abs() < 1e-14);
        assert!((w[1] - 8.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn gauss_exactness() {
        // n points integrate monomials up to degree 2n-1 exactly
        for n in 1..=6 {
            let (x, w) = gauss_legendre(n);
            for deg in 0..=(2 * n - 1) {
                let num: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg as i32)).sum();
                let exact = if deg % 2 == 0 {
                    2.0 / (deg as f64 + 1.0)
                } else {
                    0.0
                };
                assert!(
                    (num - exact).abs() < 1e-13,
                    "n={} deg={} got {} want {}",
                    n,
                    deg,
                    num,
                    exact
                );
            }
        }
    }
}
