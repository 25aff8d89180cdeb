//! SO(3) and SE_k(3) algebra.
//!
//! An element of SE_k(3) is a rotation together with `k` column vectors that
//! share it. As a `(3+k)×(3+k)` matrix:
//!
//! ```text
//! [ R  c_1 ... c_k ]
//! [ 0      I_k     ]
//! ```
//!
//! Tangent vectors are ordered `[phi, xi_1, ..., xi_k]` (dimension `3+3k`).
//! Elements are stored as rotation + column list; dense matrices are only
//! built on request (`to_matrix`, `adjoint`, `odot`).

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};

pub type Rotation = Matrix3<f64>;

/// Below this angle the closed forms switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Coefficients `(sin θ/θ, (1-cos θ)/θ²)` of the Rodrigues formula.
pub(crate) fn rodrigues_coeffs(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        rodrigues_coeffs_series(theta)
    } else {
        rodrigues_coeffs_closed(theta)
    }
}

pub(crate) fn rodrigues_coeffs_closed(theta: f64) -> (f64, f64) {
    let half = (0.5 * theta).sin();
    (theta.sin() / theta, 2.0 * half * half / (theta * theta))
}

pub(crate) fn rodrigues_coeffs_series(theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
}

/// Coefficients `((1-cos θ)/θ², (θ-sin θ)/θ³)` of the SO(3) left Jacobian.
pub(crate) fn left_jacobian_coeffs(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        left_jacobian_coeffs_series(theta)
    } else {
        left_jacobian_coeffs_closed(theta)
    }
}

pub(crate) fn left_jacobian_coeffs_closed(theta: f64) -> (f64, f64) {
    let half = (0.5 * theta).sin();
    let t3 = theta * theta * theta;
    (
        2.0 * half * half / (theta * theta),
        (theta - theta.sin()) / t3,
    )
}

pub(crate) fn left_jacobian_coeffs_series(theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
}

pub fn so3_exp(phi: &Vector3<f64>) -> Rotation {
    let theta = phi.norm();
    let k = hat(phi);
    let (a, b) = rodrigues_coeffs(theta);
    Matrix3::identity() + k * a + k * k * b
}

/// Principal logarithm, `‖φ‖ ≤ π`. At exactly `π` the axis sign is chosen so
/// that its first non-zero component is positive.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let skew = vee(&(r - r.transpose()));
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = (0.5 * skew.norm()).min(1.0);
    let theta = sin.atan2(cos);

    if theta < SMALL_ANGLE {
        return skew * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if theta < std::f64::consts::PI - 1e-2 {
        return skew * (0.5 * theta / theta.sin());
    }

    // Near π: recover the axis from the symmetric part.
    let sym = (r + r.transpose()) * 0.5;
    let outer = (sym - Matrix3::identity() * cos) / (1.0 - cos);
    let col = (0..3)
        .max_by(|&i, &j| outer[(i, i)].total_cmp(&outer[(j, j)]))
        .unwrap_or(0);
    let mut axis = outer.column(col).into_owned();
    axis /= axis.norm();
    if skew.norm() > 1e-9 {
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
    } else if let Some(first) = axis.iter().find(|c| c.abs() > 1e-12) {
        if *first < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

pub fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let (a, b) = left_jacobian_coeffs(theta);
    Matrix3::identity() + k * a + k * k * b
}

pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let c = if theta < 1e-3 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    left_jacobian(&-phi)
}

/// Projects a nearly-orthogonal matrix back onto SO(3).
pub fn orthonormalize(r: &Matrix3<f64>) -> Rotation {
    UnitQuaternion::from_matrix(r).to_rotation_matrix().into_inner()
}

/// Coupling block `Q(φ, ρ)` of the SE(3) left Jacobian, in the
/// `[phi, rho]` ordering used here it sits below the diagonal.
fn se3_q_block(phi: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let p = hat(phi);
    let r = hat(rho);
    let (c1, c2, c3) = if theta < 1e-2 {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let pp = p * p;
    r * 0.5 + (pr + rp + prp) * c1 + (pp * r + rp * p - prp * 3.0) * c2
        + (prp * p + pp * r * p) * c3
}

/// Element of SE_k(3).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupElement {
    rotation: Rotation,
    columns: Vec<Vector3<f64>>,
}

impl GroupElement {
    pub fn new(rotation: Rotation, columns: Vec<Vector3<f64>>) -> Self {
        Self { rotation, columns }
    }

    pub fn identity(k: usize) -> Self {
        Self {
            rotation: Matrix3::identity(),
            columns: vec![Vector3::zeros(); k],
        }
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    /// Matrix side length `3+k`.
    pub fn matrix_dim(&self) -> usize {
        3 + self.columns.len()
    }

    /// Tangent dimension `3+3k`.
    pub fn tangent_dim(&self) -> usize {
        3 + 3 * self.columns.len()
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn set_rotation(&mut self, r: Rotation) {
        self.rotation = r;
    }

    pub fn columns(&self) -> &[Vector3<f64>] {
        &self.columns
    }

    pub fn column(&self, i: usize) -> &Vector3<f64> {
        &self.columns[i]
    }

    pub fn column_mut(&mut self, i: usize) -> &mut Vector3<f64> {
        &mut self.columns[i]
    }

    pub fn push_column(&mut self, c: Vector3<f64>) {
        self.columns.push(c);
    }

    pub fn remove_column(&mut self, i: usize) -> Vector3<f64> {
        self.columns.remove(i)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            columns: self.columns.iter().map(|c| -(rt * c)).collect(),
        }
    }

    /// Group product `self · other`. Both must have the same `k`.
    pub fn compose(&self, other: &Self) -> Self {
        assert_eq!(self.k(), other.k(), "SE_k(3) dimension mismatch");
        Self {
            rotation: self.rotation * other.rotation,
            columns: self
                .columns
                .iter()
                .zip(&other.columns)
                .map(|(a, b)| self.rotation * b + a)
                .collect(),
        }
    }

    /// Matrix-vector product with a `(3+k)` vector.
    pub fn act(&self, b: &DVector<f64>) -> DVector<f64> {
        assert_eq!(b.len(), self.matrix_dim());
        let mut top = self.rotation * Vector3::new(b[0], b[1], b[2]);
        for (i, c) in self.columns.iter().enumerate() {
            top += c * b[3 + i];
        }
        let mut out = b.clone();
        out.fixed_rows_mut::<3>(0).copy_from(&top);
        out
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.matrix_dim();
        let mut m = DMatrix::identity(n, n);
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        for (i, c) in self.columns.iter().enumerate() {
            m.fixed_view_mut::<3, 1>(0, 3 + i).copy_from(c);
        }
        m
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        assert!(n >= 3 && m.ncols() == n);
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let columns = (3..n)
            .map(|j| m.fixed_view::<3, 1>(0, j).into_owned())
            .collect();
        Self { rotation, columns }
    }

    pub fn orthonormalized(mut self) -> Self {
        self.rotation = orthonormalize(&self.rotation);
        self
    }
}

impl std::ops::Mul for &GroupElement {
    type Output = GroupElement;
    fn mul(self, rhs: &GroupElement) -> GroupElement {
        self.compose(rhs)
    }
}

/// Tangent vector of SE_k(3): `[phi, xi_1, ..., xi_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tangent {
    pub phi: Vector3<f64>,
    pub xis: Vec<Vector3<f64>>,
}

impl Tangent {
    pub fn new(phi: Vector3<f64>, xis: Vec<Vector3<f64>>) -> Self {
        Self { phi, xis }
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            phi: Vector3::zeros(),
            xis: vec![Vector3::zeros(); k],
        }
    }

    pub fn k(&self) -> usize {
        self.xis.len()
    }

    pub fn dim(&self) -> usize {
        3 + 3 * self.xis.len()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v.fixed_rows_mut::<3>(0).copy_from(&self.phi);
        for (i, x) in self.xis.iter().enumerate() {
            v.fixed_rows_mut::<3>(3 + 3 * i).copy_from(x);
        }
        v
    }

    /// Panics unless `v.len() == 3 + 3k` for some `k`.
    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() >= 3 && v.len() % 3 == 0, "bad tangent length {}", v.len());
        let phi = Vector3::new(v[0], v[1], v[2]);
        let xis = v[3..]
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        Self { phi, xis }
    }

    pub fn norm(&self) -> f64 {
        (self.phi.norm_squared() + self.xis.iter().map(|x| x.norm_squared()).sum::<f64>()).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            phi: self.phi * s,
            xis: self.xis.iter().map(|x| x * s).collect(),
        }
    }

    /// Lie-algebra matrix `(3+k)×(3+k)`.
    pub fn hat(&self) -> DMatrix<f64> {
        let n = 3 + self.k();
        let mut m = DMatrix::zeros(n, n);
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&self.phi));
        for (i, x) in self.xis.iter().enumerate() {
            m.fixed_view_mut::<3, 1>(0, 3 + i).copy_from(x);
        }
        m
    }

    pub fn vee(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let phi = vee(&m.fixed_view::<3, 3>(0, 0).into_owned());
        let xis = (3..n)
            .map(|j| m.fixed_view::<3, 1>(0, j).into_owned())
            .collect();
        Self { phi, xis }
    }
}

impl std::ops::Neg for &Tangent {
    type Output = Tangent;
    fn neg(self) -> Tangent {
        self.scaled(-1.0)
    }
}

pub fn sek3_exp(xi: &Tangent) -> GroupElement {
    let jl = left_jacobian(&xi.phi);
    GroupElement {
        rotation: so3_exp(&xi.phi),
        columns: xi.xis.iter().map(|x| jl * x).collect(),
    }
}

pub fn sek3_log(x: &GroupElement) -> Tangent {
    let phi = so3_log(&x.rotation);
    let jinv = left_jacobian_inv(&phi);
    Tangent {
        phi,
        xis: x.columns.iter().map(|c| jinv * c).collect(),
    }
}

/// Adjoint matrix `(3+3k)×(3+3k)`: `R` on the diagonal and `c_i^ R` in the
/// first block column.
pub fn adjoint(x: &GroupElement) -> DMatrix<f64> {
    let n = x.tangent_dim();
    let r = x.rotation;
    let mut ad = DMatrix::zeros(n, n);
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    for (i, c) in x.columns.iter().enumerate() {
        let o = 3 + 3 * i;
        ad.fixed_view_mut::<3, 3>(o, o).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(o, 0).copy_from(&(hat(c) * r));
    }
    ad
}

/// The `⊙` operator: for a `(3+k)` vector `b`, the `(3+k)×(3+3k)` matrix
/// satisfying `hat(ξ)·b = odot(b)·ξ`.
pub fn odot(b: &DVector<f64>) -> DMatrix<f64> {
    assert!(b.len() >= 3);
    let k = b.len() - 3;
    let mut m = DMatrix::zeros(3 + k, 3 + 3 * k);
    let top = Vector3::new(b[0], b[1], b[2]);
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(&top)));
    for i in 0..k {
        m.fixed_view_mut::<3, 3>(0, 3 + 3 * i)
            .copy_from(&(Matrix3::identity() * b[3 + i]));
    }
    m
}

/// Left Jacobian of SE_k(3): `Exp(ξ+δ) ≈ Exp(J_l(ξ)δ)·Exp(ξ)`.
pub fn sek3_left_jacobian(xi: &Tangent) -> DMatrix<f64> {
    let n = xi.dim();
    let jl = left_jacobian(&xi.phi);
    let mut m = DMatrix::zeros(n, n);
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    for (i, rho) in xi.xis.iter().enumerate() {
        let o = 3 + 3 * i;
        m.fixed_view_mut::<3, 3>(o, o).copy_from(&jl);
        m.fixed_view_mut::<3, 3>(o, 0).copy_from(&se3_q_block(&xi.phi, rho));
    }
    m
}

/// Inverse of [`sek3_left_jacobian`]: `Log(Exp(δ)·X) ≈ Log(X) + J_l⁻¹ δ`.
pub fn sek3_left_jacobian_inv(xi: &Tangent) -> DMatrix<f64> {
    let n = xi.dim();
    let jinv = left_jacobian_inv(&xi.phi);
    let mut m = DMatrix::zeros(n, n);
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    for (i, rho) in xi.xis.iter().enumerate() {
        let o = 3 + 3 * i;
        m.fixed_view_mut::<3, 3>(o, o).copy_from(&jinv);
        let q = se3_q_block(&xi.phi, rho);
        m.fixed_view_mut::<3, 3>(o, 0).copy_from(&(-jinv * q * jinv));
    }
    m
}
