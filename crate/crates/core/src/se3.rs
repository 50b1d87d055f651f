//! SO(3)/SE(3) primitives.
//!
//! Tangent vectors are ordered `(rho, theta)`: the first three components are
//! the translational part, the last three the rotational part in radians. The
//! same ordering is used for covariance and information matrices throughout the
//! crate, and matches the block layout of g2o `EDGE_SE3:QUAT` information
//! matrices.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{
    DMatrix, DVector, Matrix3, Matrix4, Matrix6, Quaternion, Rotation3, SMatrix, SVector,
    UnitQuaternion, Vector3, Vector6,
};

use crate::error::{Error, Result};

pub type Rotation = Rotation3<f64>;
pub type Tangent = Vector6<f64>;
pub type Covariance6 = Matrix6<f64>;
pub type FlatVector = SVector<f64, 12>;
pub type Covariance12 = SMatrix<f64, 12, 12>;
pub type FlatJacobian = SMatrix<f64, 12, 6>;

/// Below this angle the closed-form expressions switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Logarithms of rotations closer than this to an angle of pi are rejected.
pub const PI_TOLERANCE: f64 = 1e-9;

/// Relative eigenvalue cutoff of the Moore-Penrose pseudo-inverse.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rigid-body transform: `x -> rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// Builds a pose from a translation and a (not necessarily unit) quaternion.
    pub fn from_quaternion(t: Vector3<f64>, q: Quaternion<f64>) -> Self {
        let unit = UnitQuaternion::from_quaternion(q);
        Self::new(unit.to_rotation_matrix(), t)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// `self^-1 * other`, the pose of `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose) -> Self {
        let rt = self.rotation.inverse();
        Self::new(rt * other.rotation, rt * (other.translation - self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Right retraction `self * exp(delta)`, re-orthonormalizing the rotation.
    pub fn retract(&self, delta: &Tangent) -> Self {
        let mut p = self.compose(&exp_se3(delta));
        p.rotation = renormalize(&p.rotation);
        p
    }

    /// Adjoint in `(rho, theta)` ordering: `self * exp(xi) * self^-1 = exp(Ad * xi)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = *self.rotation.matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * r));
        ad
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.translation;
        let q = self.quaternion();
        write!(
            f,
            "Pose(t: [{:.4}, {:.4}, {:.4}], q: [{:.4}, {:.4}, {:.4}, {:.4}])",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
    }
}

pub fn rotation_angle(r: &Rotation) -> f64 {
    let m = r.matrix();
    let s = vee(&(m - m.transpose())).norm() * 0.5;
    let c = (m.trace() - 1.0) * 0.5;
    s.atan2(c)
}

/// Snaps a nearly orthonormal matrix back onto SO(3) through the unit quaternion.
pub fn renormalize(r: &Rotation) -> Rotation {
    UnitQuaternion::from_rotation_matrix(r).to_rotation_matrix()
}

pub fn exp_so3(phi: &Vector3<f64>) -> Rotation {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation::from_matrix_unchecked(Matrix3::identity() + k * a + k * k * b)
}

pub fn log_so3(r: &Rotation) -> Result<Vector3<f64>> {
    let m = r.matrix();
    let w = vee(&(m - m.transpose())) * 0.5;
    let s = w.norm();
    let c = (m.trace() - 1.0) * 0.5;
    let theta = s.atan2(c);
    if PI - theta < PI_TOLERANCE {
        return Err(Error::AngleAtPi);
    }
    if theta < SMALL_ANGLE {
        return Ok(w * (1.0 + theta * theta / 6.0));
    }
    if theta > PI - 1e-2 {
        // sin(theta) is tiny here; recover the axis from the symmetric part,
        // (R + R^T)/2 - cos(theta) I = (1 - cos(theta)) a a^T.
        let b = (m + m.transpose()) * 0.5 - Matrix3::identity() * c;
        let col = (0..3)
            .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
            .unwrap_or(0);
        let mut axis = b.column(col).into_owned().normalize();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        return Ok(axis * theta);
    }
    Ok(w * (theta / s))
}

/// Left Jacobian of SO(3).
pub fn left_jacobian_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn left_jacobian_inv_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let b = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * b
}

/// Coupling block of the SE(3) left Jacobian.
fn q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let p = hat(phi);
    let r = hat(rho);
    let (c1, c2, c3) = if theta < SMALL_ANGLE {
        (
            1.0 / 6.0 - theta2 / 120.0,
            1.0 / 24.0 - theta2 / 720.0,
            1.0 / 120.0 - theta2 / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (theta2 * theta),
            (theta2 + 2.0 * c - 2.0) / (2.0 * theta2 * theta2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta2 * theta2 * theta),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5
        + (pr + rp + prp) * c1
        + (p * pr + rp * p - prp * 3.0) * c2
        + (prp * p + p * prp) * c3
}

pub fn left_jacobian_se3(xi: &Tangent) -> Matrix6<f64> {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let jl = left_jacobian_so3(&phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&q_block(&rho, &phi));
    out
}

pub fn left_jacobian_inv_se3(xi: &Tangent) -> Matrix6<f64> {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let jinv = left_jacobian_inv_so3(&phi);
    let q = q_block(&rho, &phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-jinv * q * jinv));
    out
}

/// Inverse right Jacobian: `log(exp(xi) * exp(d)) ~ xi + Jr^-1(xi) d`.
pub fn right_jacobian_inv_se3(xi: &Tangent) -> Matrix6<f64> {
    left_jacobian_inv_se3(&(-xi))
}

/// V matrix mapping the translational tangent to the translation of `exp`.
fn v_matrix(phi: &Vector3<f64>) -> Matrix3<f64> {
    left_jacobian_so3(phi)
}

pub fn exp_se3(v: &Tangent) -> Pose {
    let rho = v.fixed_rows::<3>(0).into_owned();
    let phi = v.fixed_rows::<3>(3).into_owned();
    Pose::new(exp_so3(&phi), v_matrix(&phi) * rho)
}

pub fn log_se3(x: &Pose) -> Result<Tangent> {
    let phi = log_so3(&x.rotation)?;
    let rho = left_jacobian_inv_so3(&phi) * x.translation;
    let mut out = Tangent::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&rho);
    out.fixed_rows_mut::<3>(3).copy_from(&phi);
    Ok(out)
}

/// Stacks the rotation columns followed by the translation.
pub fn flat(x: &Pose) -> FlatVector {
    let r = x.rotation.matrix();
    let mut z = FlatVector::zeros();
    for c in 0..3 {
        z.fixed_rows_mut::<3>(3 * c).copy_from(&r.column(c));
    }
    z.fixed_rows_mut::<3>(9).copy_from(&x.translation);
    z
}

/// Jacobian of `flat(x * exp(d))` with respect to `d` at `d = 0`.
pub fn flat_jacobian(x: &Pose) -> FlatJacobian {
    let r = *x.rotation.matrix();
    let mut j = FlatJacobian::zeros();
    // d(R e_c)/d theta = R * hat(theta) e_c = -R hat(e_c) theta
    for c in 0..3 {
        let block = -r * hat(&Vector3::ith(c, 1.0));
        j.fixed_view_mut::<3, 3>(3 * c, 3).copy_from(&block);
    }
    j.fixed_view_mut::<3, 3>(9, 0).copy_from(&r);
    j
}

/// First-order propagation `J sigma J^T`.
pub fn propagate_covariance(sigma: &Covariance6, j: &FlatJacobian) -> Covariance12 {
    let out = j * sigma * j.transpose();
    (out + out.transpose()) * 0.5
}

/// Closest rotation in Frobenius norm, `U diag(1, 1, det(U V^T)) V^T`.
pub fn project_to_so3(a: &Matrix3<f64>) -> Result<Rotation> {
    let svd = a.svd(true, true);
    let smallest = svd.singular_values.min();
    if !(smallest > 1e-12) {
        return Err(Error::RankDeficient);
    }
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::RankDeficient);
    };
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    Ok(Rotation::from_matrix_unchecked(r))
}

/// Moore-Penrose pseudo-inverse of a symmetric positive semi-definite matrix.
///
/// Eigenvalues below `PINV_CUTOFF` times the largest one are treated as zero.
pub fn pseudo_inverse(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let n = sigma.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let largest = eig.eigenvalues.iter().fold(0.0_f64, |m, &e| m.max(e.abs()));
    if largest == 0.0 {
        return DMatrix::zeros(n, n);
    }
    let cutoff = PINV_CUTOFF * largest;
    let mut out = DMatrix::zeros(n, n);
    for (k, &e) in eig.eigenvalues.iter().enumerate() {
        if e > cutoff {
            let v = eig.eigenvectors.column(k);
            out += v * v.transpose() / e;
        }
    }
    out
}

pub fn pseudo_inverse6(sigma: &Matrix6<f64>) -> Matrix6<f64> {
    let d = pseudo_inverse(&DMatrix::from_column_slice(6, 6, sigma.as_slice()));
    Matrix6::from_column_slice(d.as_slice())
}

pub fn pseudo_inverse12(sigma: &Covariance12) -> Covariance12 {
    let d = pseudo_inverse(&DMatrix::from_column_slice(12, 12, sigma.as_slice()));
    Covariance12::from_column_slice(d.as_slice())
}

/// `v^T sigma^+ v`.
pub fn mahalanobis_sq(v: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let q = (v.transpose() * pseudo_inverse(sigma) * v)[(0, 0)];
    q.max(0.0)
}
