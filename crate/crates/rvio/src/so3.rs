//! Quaternion and rotation-matrix kernel.
//!
//! Uses the JPL convention: unit quaternions are stored scalar-last as
//! `[x, y, z, w]`, the small-angle error quaternion is left-multiplicative
//! (`q = dq ⊗ q̂`), and composition satisfies `C(a ⊗ b) = C(a) C(b)`.

use crate::{Error, Mat3, Result, Vec3};
use nalgebra::{Matrix4, Vector4};

/// Unit quaternion in JPL (scalar-last) convention.
///
/// `C(q)` maps vectors from the source frame to the target frame of the
/// rotation the quaternion encodes, and `C(a ⊗ b) = C(a) C(b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Default for UnitQuat {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuat {
    pub fn identity() -> Self {
        UnitQuat { x: 0.0, y: 0.0, z: 0.0, w: 1.0 }
    }

    /// Builds from raw components and renormalizes.
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Self {
        let mut q = UnitQuat { x, y, z, w };
        q.normalize();
        q
    }

    pub fn vector_part(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn coords(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.z, self.w)
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt()
    }

    pub fn normalize(&mut self) {
        let n = self.norm();
        self.x /= n;
        self.y /= n;
        self.z /= n;
        self.w /= n;
    }

    /// Quaternion product `self ⊗ rhs` (JPL order), renormalized.
    pub fn multiply(&self, rhs: &UnitQuat) -> UnitQuat {
        let av = self.vector_part();
        let bv = rhs.vector_part();
        let v = self.w * bv + rhs.w * av - av.cross(&bv);
        let w = self.w * rhs.w - av.dot(&bv);
        UnitQuat::new(v.x, v.y, v.z, w)
    }

    pub fn inverse(&self) -> UnitQuat {
        UnitQuat { x: -self.x, y: -self.y, z: -self.z, w: self.w }
    }

    /// Rotation matrix `C(q) = (2w² − 1) I − 2w ⌊q_v×⌋ + 2 q_v q_vᵀ`.
    pub fn to_matrix(&self) -> Mat3 {
        let v = self.vector_part();
        let w = self.w;
        Mat3::identity() * (2.0 * w * w - 1.0) - skew(&v) * (2.0 * w) + v * v.transpose() * 2.0
    }

    /// Inverse of [`to_matrix`](Self::to_matrix) via Shepperd's method.
    ///
    /// `m` must be a proper rotation (orthonormal, det +1).
    pub fn from_matrix(m: &Mat3) -> UnitQuat {
        let tr = m.trace();
        // Pick the largest of (w², x², y², z²) for numerical stability.
        let ww = (tr + 1.0) / 4.0;
        let xx = (1.0 + 2.0 * m[(0, 0)] - tr) / 4.0;
        let yy = (1.0 + 2.0 * m[(1, 1)] - tr) / 4.0;
        let zz = (1.0 + 2.0 * m[(2, 2)] - tr) / 4.0;
        let (x, y, z, w);
        if ww >= xx && ww >= yy && ww >= zz {
            w = ww.sqrt();
            x = (m[(1, 2)] - m[(2, 1)]) / (4.0 * w);
            y = (m[(2, 0)] - m[(0, 2)]) / (4.0 * w);
            z = (m[(0, 1)] - m[(1, 0)]) / (4.0 * w);
        } else if xx >= yy && xx >= zz {
            x = xx.sqrt();
            w = (m[(1, 2)] - m[(2, 1)]) / (4.0 * x);
            y = (m[(0, 1)] + m[(1, 0)]) / (4.0 * x);
            z = (m[(2, 0)] + m[(0, 2)]) / (4.0 * x);
        } else if yy >= zz {
            y = yy.sqrt();
            w = (m[(2, 0)] - m[(0, 2)]) / (4.0 * y);
            x = (m[(0, 1)] + m[(1, 0)]) / (4.0 * y);
            z = (m[(1, 2)] + m[(2, 1)]) / (4.0 * y);
        } else {
            z = zz.sqrt();
            w = (m[(0, 1)] - m[(1, 0)]) / (4.0 * z);
            x = (m[(2, 0)] + m[(0, 2)]) / (4.0 * z);
            y = (m[(1, 2)] + m[(2, 1)]) / (4.0 * z);
        }
        UnitQuat::new(x, y, z, w)
    }

    /// Exact quaternion for a rotation of `angle` radians about unit `axis`,
    /// in the same convention as [`to_matrix`](Self::to_matrix).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> UnitQuat {
        let half = 0.5 * angle;
        let v = axis * half.sin();
        UnitQuat::new(v.x, v.y, v.z, half.cos())
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.vector_part().norm().atan2(self.w.abs())
    }
}

/// Error quaternion for a small error angle, `dq ≃ [½ δθᵀ, 1]ᵀ` to first
/// order; realized as the exact exponential map so the rotation angle equals
/// `|δθ|`.
///
/// Rejects `|δθ| ≥ π`, which signals misuse of the small-angle constructor.
pub fn small_angle_quat(delta_theta: &Vec3) -> Result<UnitQuat> {
    let n = delta_theta.norm();
    if n >= std::f64::consts::PI {
        return Err(Error::SmallAngleTooLarge(n));
    }
    if n < 1e-9 {
        let h = delta_theta * 0.5;
        return Ok(UnitQuat::new(h.x, h.y, h.z, 1.0));
    }
    Ok(UnitQuat::from_axis_angle(&(delta_theta / n), n))
}

/// Skew-symmetric operator `⌊a×⌋` with `⌊a×⌋ b = a × b`.
pub fn skew(a: &Vec3) -> Mat3 {
    Mat3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// The 4×4 matrix of the quaternion derivative `q̇ = ½ Ω(ω) q`.
///
/// The scalar corner is 0: the kinematics only preserve the unit norm with a
/// zero corner.
pub fn omega_matrix(w: &Vec3) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(w)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(w);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-w.transpose()));
    m
}

/// One zeroth-order integration step of `q̇ = ½ Ω(ω) q` with `ω` held
/// constant over `dt`: left-multiplies by the exact constant-rate rotation.
pub fn integrate_step(q: &UnitQuat, omega: &Vec3, dt: f64) -> UnitQuat {
    let angle = omega.norm() * dt;
    let dq = if angle < 1e-12 {
        let h = omega * (0.5 * dt);
        UnitQuat::new(h.x, h.y, h.z, 1.0)
    } else {
        UnitQuat::from_axis_angle(&(omega / omega.norm()), angle)
    };
    dq.multiply(q)
}
