//! Attitude algebra on unit quaternions, vector part first and scalar last:
//! `q = [q_v; q_o]`.
//!
//! The product is defined through the 4x4 operator
//!
//! ```text
//! mu ⊗ q = (mu_o * I + Omega(mu_v)) q,   Omega(v) = [ -[v x]   v ]
//!                                                   [ -v'      0 ]
//! ```
//!
//! With this operator the rotation-matrix homomorphism REVERSES the factor
//! order: `A(p ⊗ q) = A(q) A(p)`. That direction is pinned once by
//! `composition_convention` below and every frame composition in the crate
//! relies on it; do not "fix" a sign here without re-running the estimator
//! and planner oracles.
//!
//! `A(q) = I + 2 q_o [q_v x] + 2 [q_v x]^2` maps body coordinates into the
//! parent (camera) frame for a body whose orientation is `q`.

use serde::{Deserialize, Serialize};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Mat4 = nalgebra::Matrix4<f64>;

/// Cross-product matrix: `skew(a) * b == a x b`.
pub fn skew(a: &Vec3) -> Mat3 {
    Mat3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Left-product operator of a pure vector: `mu ⊗ q = (mu_o I + omega_matrix(mu_v)) q`.
pub fn omega_matrix(v: &Vec3) -> Mat4 {
    let k = skew(v);
    let mut m = Mat4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-k));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(v);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-v.transpose()));
    m
}

/// Unit quaternion, vector part `v`, scalar part `s`.
///
/// Constructors normalize; arithmetic that can drift (integration) must call
/// [`Quat::normalized`] afterwards, which the dynamics integrator does every
/// step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub v: Vec3,
    pub s: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { v: Vec3::new(0.0, 0.0, 0.0), s: 1.0 };

    pub fn new(v: Vec3, s: f64) -> Self {
        Quat { v, s }.normalized()
    }

    /// Rotation of `angle` radians about `axis` (need not be unit).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Quat::IDENTITY;
        }
        let (sin, cos) = (0.5 * angle).sin_cos();
        Quat { v: axis * (sin / n), s: cos }
    }

    /// Reconstruct from a vector part with the scalar chosen non-negative
    /// (canonical hemisphere). `|v| > 1` is clamped onto the equator.
    pub fn from_vector_part(v: &Vec3) -> Self {
        let n2 = v.norm_squared();
        if n2 >= 1.0 {
            Quat { v: v / n2.sqrt(), s: 0.0 }
        } else {
            Quat { v: *v, s: (1.0 - n2).sqrt() }
        }
    }

    pub fn normalized(self) -> Self {
        let n = (self.v.norm_squared() + self.s * self.s).sqrt();
        Quat { v: self.v / n, s: self.s / n }
    }

    /// Flip into the `s >= 0` hemisphere.
    pub fn canonical(self) -> Self {
        if self.s < 0.0 {
            Quat { v: -self.v, s: -self.s }
        } else {
            self
        }
    }

    pub fn conjugate(self) -> Self {
        Quat { v: -self.v, s: self.s }
    }

    /// `self ⊗ rhs` per the module-level operator. Not normalized.
    pub fn product(&self, rhs: &Quat) -> Quat {
        Quat {
            v: self.s * rhs.v + rhs.s * self.v - self.v.cross(&rhs.v),
            s: self.s * rhs.s - self.v.dot(&rhs.v),
        }
    }

    /// Direction cosine matrix `A(q) = I + 2 q_o [q_v x] + 2 [q_v x]^2`.
    pub fn rotation_matrix(&self) -> Mat3 {
        let k = skew(&self.v);
        Mat3::identity() + 2.0 * self.s * k + 2.0 * k * k
    }

    /// Kinematics `q_dot = 1/2 Omega(w) q` for body rate `w`. Result is not
    /// a unit quaternion; it is the tangent used by the integrators.
    pub fn rate(&self, w: &Vec3) -> Quat {
        Quat {
            v: 0.5 * (self.s * w - w.cross(&self.v)),
            s: -0.5 * w.dot(&self.v),
        }
    }

    /// Four-component dot product (used for hemisphere alignment).
    pub fn dot4(&self, rhs: &Quat) -> f64 {
        self.v.dot(&rhs.v) + self.s * rhs.s
    }

    /// Geodesic distance in radians, hemisphere-insensitive. atan2-based so
    /// tiny angles are not lost to acos roundoff.
    pub fn angle_to(&self, rhs: &Quat) -> f64 {
        let d = self.conjugate().product(rhs);
        2.0 * d.v.norm().atan2(d.s.abs())
    }
}

/// Multiplicative attitude error `dq = qhat^-1 ⊗ q`, vector part only,
/// sign-aligned so the (implicit) scalar part is non-negative. Inverse of
/// `q = qhat ⊗ from_vector_part(dq_v)` for small errors.
pub fn small_quat_error(qhat: &Quat, q: &Quat) -> Vec3 {
    let d = qhat.conjugate().product(q);
    if d.s < 0.0 {
        -d.v
    } else {
        d.v
    }
}
