//! Torque-free rigid-body dynamics of the target in dimensionless inertia
//! form.
//!
//! The tumble is parameterized by two inertia ratios
//! `s1 = (Iyy - Izz)/Ixx`, `s2 = (Izz - Ixx)/Iyy`; the third ratio
//! `s3 = (Ixx - Iyy)/Izz = -(s1 + s2)/(1 + s1 s2)` is dependent, and the
//! four-term constraint `s1 + s2 + s3 + s1 s2 s3 = 0` holds identically.
//! Physical (triangle-inequality) inertias give `-1 < si < 1`.
//!
//! `phi` is the torque-free angular acceleration; `b_matrix` is the
//! dimensionless input map `B = diag(pi/(1 - s2), pi/(1 + s1), pi/(1 + s1 s2))`
//! with `pi = 3 + s1 s2 + s1 - s2`, satisfying `B_ii * I_ii = tr(I_c)`, so a
//! torque `tau` produces `omega_dot = phi + B tau / tr(I_c)`.

use crate::error::Error;
use crate::so3::{Mat3, Quat, Vec3};
use crate::Result;
use serde::{Deserialize, Serialize};

/// Principal moments of inertia, kg m^2. Must be positive and satisfy the
/// triangle inequalities (each moment less than the sum of the others).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrincipalInertia {
    pub ixx: f64,
    pub iyy: f64,
    pub izz: f64,
}

impl PrincipalInertia {
    pub fn new(ixx: f64, iyy: f64, izz: f64) -> Result<Self> {
        let i = PrincipalInertia { ixx, iyy, izz };
        i.validate()?;
        Ok(i)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ixx > 0.0 && self.iyy > 0.0 && self.izz > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "inertia moments must be positive, got ({}, {}, {})",
                self.ixx, self.iyy, self.izz
            )));
        }
        if self.ixx + self.iyy <= self.izz
            || self.iyy + self.izz <= self.ixx
            || self.izz + self.ixx <= self.iyy
        {
            return Err(Error::InvalidParameter(format!(
                "inertia moments violate the triangle inequality: ({}, {}, {})",
                self.ixx, self.iyy, self.izz
            )));
        }
        Ok(())
    }

    pub fn trace(&self) -> f64 {
        self.ixx + self.iyy + self.izz
    }

    pub fn as_vec(&self) -> Vec3 {
        Vec3::new(self.ixx, self.iyy, self.izz)
    }
}

/// The two free inertia ratios, each strictly inside (-1, 1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InertiaRatios {
    pub s1: f64,
    pub s2: f64,
}

impl InertiaRatios {
    pub fn new(s1: f64, s2: f64) -> Result<Self> {
        if !(s1 > -1.0 && s1 < 1.0 && s2 > -1.0 && s2 < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "inertia ratios must lie strictly inside (-1, 1), got ({s1}, {s2})"
            )));
        }
        Ok(InertiaRatios { s1, s2 })
    }

    pub fn from_inertia(i: &PrincipalInertia) -> Result<Self> {
        i.validate()?;
        Self::new((i.iyy - i.izz) / i.ixx, (i.izz - i.ixx) / i.iyy)
    }

    /// Dependent third ratio `s3 = -(s1 + s2)/(1 + s1 s2)`; automatically in
    /// (-1, 1) whenever s1 and s2 are ((s1^2 - 1)(1 - s2^2) < 0).
    pub fn third(&self) -> f64 {
        -(self.s1 + self.s2) / (1.0 + self.s1 * self.s2)
    }

    /// Residual of `s1 + s2 + s3 + s1 s2 s3`; zero for every consistent pair.
    pub fn constraint_residual(&self) -> f64 {
        let s3 = self.third();
        self.s1 + self.s2 + s3 + self.s1 * self.s2 * s3
    }

    /// Dimensionless torque map; diagonal, strictly positive entries.
    pub fn b_matrix(&self) -> Mat3 {
        let p = 3.0 + self.s1 * self.s2 + self.s1 - self.s2;
        Mat3::from_diagonal(&Vec3::new(
            p / (1.0 - self.s2),
            p / (1.0 + self.s1),
            p / (1.0 + self.s1 * self.s2),
        ))
    }

    /// A compatible principal inertia with `ixx = scale`; inverse of
    /// `from_inertia` up to overall scale (ratios destroy it). Useful for
    /// building conserved quantities in tests and scenario generators.
    pub fn to_inertia(&self, scale: f64) -> PrincipalInertia {
        PrincipalInertia {
            ixx: scale,
            iyy: scale * (1.0 + self.s1) / (1.0 - self.s2),
            izz: scale * (1.0 + self.s1 * self.s2) / (1.0 - self.s2),
        }
    }
}

/// Torque-free angular acceleration `phi(w) = (s1 wy wz, s2 wx wz, s3 wx wy)`.
pub fn phi(w: &Vec3, r: &InertiaRatios) -> Vec3 {
    Vec3::new(
        r.s1 * w.y * w.z,
        r.s2 * w.x * w.z,
        r.third() * w.x * w.y,
    )
}

/// Jacobian of `phi` with respect to the body rate.
pub fn dphi_domega(w: &Vec3, r: &InertiaRatios) -> Mat3 {
    let s3 = r.third();
    Mat3::new(
        0.0,
        r.s1 * w.z,
        r.s1 * w.y,
        r.s2 * w.z,
        0.0,
        r.s2 * w.x,
        s3 * w.y,
        s3 * w.x,
        0.0,
    )
}

/// Jacobian of `phi` with respect to (s1, s2); the third row carries the
/// chain rule through the dependent s3.
pub fn dphi_dsigma(w: &Vec3, r: &InertiaRatios) -> nalgebra::SMatrix<f64, 3, 2> {
    let d = 1.0 + r.s1 * r.s2;
    let wxy = w.x * w.y;
    nalgebra::SMatrix::<f64, 3, 2>::new(
        w.y * w.z,
        0.0,
        0.0,
        w.x * w.z,
        (r.s2 * r.s2 - 1.0) / (d * d) * wxy,
        (r.s1 * r.s1 - 1.0) / (d * d) * wxy,
    )
}

/// Physical description of the target used by the truth simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetParams {
    pub mass: f64,
    pub inertia: PrincipalInertia,
    /// Grasp fixture offset from the center of mass, body frame (m).
    pub grasp_offset: Vec3,
    /// Fixture frame misalignment relative to the body frame.
    pub fixture_misalign: Quat,
}

impl TargetParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mass must be positive, got {}",
                self.mass
            )));
        }
        self.inertia.validate()?;
        Ok(())
    }

    pub fn ratios(&self) -> InertiaRatios {
        // validate() guarantees the ratios exist.
        InertiaRatios::from_inertia(&self.inertia).expect("validated inertia")
    }
}

/// Kinematic state of the target: attitude `q` (body -> camera), body rate
/// `w` (rad/s), center-of-mass position `pos` and velocity `vel` in the
/// camera frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TargetState {
    pub q: Quat,
    pub w: Vec3,
    pub pos: Vec3,
    pub vel: Vec3,
}

impl TargetState {
    /// One RK4 step of length `dt` with piecewise-constant disturbance
    /// accelerations: `w_tau` enters through `B` (rad/s^2 after the map),
    /// `w_f` is a direct linear acceleration (m/s^2).
    pub fn step(&self, r: &InertiaRatios, dt: f64, w_tau: &Vec3, w_f: &Vec3) -> TargetState {
        let b = r.b_matrix();
        let ang = b * w_tau;
        let deriv = |s: &TargetState| {
            (
                s.q.rate(&s.w),
                phi(&s.w, r) + ang,
                s.vel,
                *w_f,
            )
        };
        let k1 = deriv(self);
        let s2 = self.offset(&k1, 0.5 * dt);
        let k2 = deriv(&s2);
        let s3 = self.offset(&k2, 0.5 * dt);
        let k3 = deriv(&s3);
        let s4 = self.offset(&k3, dt);
        let k4 = deriv(&s4);
        let sixth = dt / 6.0;
        TargetState {
            q: Quat {
                v: self.q.v + sixth * (k1.0.v + 2.0 * k2.0.v + 2.0 * k3.0.v + k4.0.v),
                s: self.q.s + sixth * (k1.0.s + 2.0 * k2.0.s + 2.0 * k3.0.s + k4.0.s),
            }
            .normalized(),
            w: self.w + sixth * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
            pos: self.pos + sixth * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2),
            vel: self.vel + sixth * (k1.3 + 2.0 * k2.3 + 2.0 * k3.3 + k4.3),
        }
    }

    fn offset(&self, k: &(Quat, Vec3, Vec3, Vec3), h: f64) -> TargetState {
        TargetState {
            q: Quat { v: self.q.v + h * k.0.v, s: self.q.s + h * k.0.s },
            w: self.w + h * k.1,
            pos: self.pos + h * k.2,
            vel: self.vel + h * k.3,
        }
    }
}

/// Propagate the torque-free state over `dur` in fixed substeps of at most
/// `dt`. Deterministic: identical inputs give bitwise-identical output.
pub fn propagate(s0: &TargetState, r: &InertiaRatios, dur: f64, dt: f64) -> TargetState {
    debug_assert!(dt > 0.0 && dur >= 0.0);
    let zero = Vec3::zeros();
    let n = (dur / dt).floor() as usize;
    let mut s = *s0;
    for _ in 0..n {
        s = s.step(r, dt, &zero, &zero);
    }
    let rem = dur - n as f64 * dt;
    if rem > 1e-12 {
        s = s.step(r, rem, &zero, &zero);
    }
    s
}

/// Grasp point position and velocity in the camera frame:
/// `rho = pos + A(q) g`, `rho_dot = vel + A(q)(w x g)` for body-frame
/// fixture offset `g`.
pub fn grasp_point_kinematics(s: &TargetState, grasp_offset: &Vec3) -> (Vec3, Vec3) {
    let a = s.q.rotation_matrix();
    (s.pos + a * grasp_offset, s.vel + a * s.w.cross(grasp_offset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn table_ratios() -> InertiaRatios {
        InertiaRatios::from_inertia(&PrincipalInertia::new(400.0, 500.0, 700.0).unwrap()).unwrap()
    }

    #[test]
    fn ratios_from_reference_inertia() {
        let r = table_ratios();
        assert_abs_diff_eq!(r.s1, -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.s2, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(r.third(), -1.0 / 7.0, epsilon = 1e-15);
    }

    #[test]
    fn constraint_residual_vanishes() {
        let r = InertiaRatios::from_inertia(&PrincipalInertia::new(2.0, 3.0, 4.0).unwrap())
            .unwrap();
        assert!(r.constraint_residual().abs() < 1e-15);
        assert!(table_ratios().constraint_residual().abs() < 1e-15);
    }

    #[test]
    fn phi_reference_value() {
        let got = phi(&Vec3::new(1.0, 2.0, 3.0), &table_ratios());
        assert_abs_diff_eq!(got.x, -3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(got.y, 1.8, epsilon = 1e-12);
        assert_abs_diff_eq!(got.z, -2.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn b_matrix_reference_value() {
        let b = table_ratios().b_matrix();
        assert_abs_diff_eq!(b[(0, 0)], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b[(1, 1)], 3.2, epsilon = 1e-12);
        assert_abs_diff_eq!(b[(2, 2)], 16.0 / 7.0, epsilon = 1e-12);
    }

    /// B_ii * I_ii = tr(I_c): the dimensionless map times the generating
    /// inertia recovers the trace, for any physical inertia.
    #[test]
    fn b_identity_against_generating_inertia() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..200 {
            let ixx = 1.0 + 9.0 * rng.random::<f64>();
            let iyy = 1.0 + 9.0 * rng.random::<f64>();
            let izz = 1.0 + 9.0 * rng.random::<f64>();
            let Ok(i) = PrincipalInertia::new(ixx, iyy, izz) else {
                continue;
            };
            let r = InertiaRatios::from_inertia(&i).unwrap();
            let b = r.b_matrix();
            let tr = i.trace();
            for (k, m) in [i.ixx, i.iyy, i.izz].iter().enumerate() {
                assert_abs_diff_eq!(b[(k, k)] * m / tr, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn to_inertia_round_trips() {
        let r = table_ratios();
        let i = r.to_inertia(400.0);
        let back = InertiaRatios::from_inertia(&i).unwrap();
        assert_abs_diff_eq!(back.s1, r.s1, epsilon = 1e-14);
        assert_abs_diff_eq!(back.s2, r.s2, epsilon = 1e-14);
    }

    #[test]
    fn phi_scale_invariance() {
        let r = table_ratios();
        let w = Vec3::new(0.3, -0.8, 0.5);
        for c in [0.1, 2.0, -3.5] {
            let lhs = phi(&(c * w), &r);
            let rhs = c * c * phi(&w, &r);
            assert!((lhs - rhs).norm() < 1e-12 * rhs.norm().max(1.0));
        }
    }

    #[test]
    fn phi_jacobians_match_finite_differences() {
        let r = table_ratios();
        let w = Vec3::new(0.07, -0.04, 0.09);
        let h = 1e-6;
        let dw = dphi_domega(&w, &r);
        for j in 0..3 {
            let mut wp = w;
            let mut wm = w;
            wp[j] += h;
            wm[j] -= h;
            let col = (phi(&wp, &r) - phi(&wm, &r)) / (2.0 * h);
            assert!((col - dw.column(j)).norm() < 1e-9);
        }
        let ds = dphi_dsigma(&w, &r);
        for j in 0..2 {
            let (mut sp, mut sm) = (r, r);
            if j == 0 {
                sp.s1 += h;
                sm.s1 -= h;
            } else {
                sp.s2 += h;
                sm.s2 -= h;
            }
            let col = (phi(&w, &sp) - phi(&w, &sm)) / (2.0 * h);
            assert!((col - ds.column(j)).norm() < 1e-9);
        }
    }

    /// Angular momentum (in the camera frame) and kinetic energy against the
    /// generating inertia must be conserved by the integrator: relative
    /// drift below 1e-9 over 100 s of tumbling.
    #[test]
    fn conservation_under_propagation() {
        let r = table_ratios();
        let i = r.to_inertia(400.0).as_vec();
        let s0 = TargetState {
            q: Quat::from_axis_angle(&Vec3::new(0.3, -1.0, 0.8), 1.1),
            w: Vec3::new(0.08, -0.11, 0.06),
            pos: Vec3::new(5.0, 1.0, -2.0),
            vel: Vec3::new(-0.01, 0.002, 0.0),
        };
        let momentum = |s: &TargetState| s.q.rotation_matrix() * s.w.component_mul(&i);
        let energy = |s: &TargetState| 0.5 * s.w.component_mul(&i).dot(&s.w);
        let (h0, e0) = (momentum(&s0), energy(&s0));
        let s = propagate(&s0, &r, 100.0, 0.01);
        assert!((momentum(&s) - h0).norm() / h0.norm() < 1e-9);
        assert!((energy(&s) - e0).abs() / e0 < 1e-9);
        // Translation is ballistic.
        assert!((s.pos - (s0.pos + 100.0 * s0.vel)).norm() < 1e-9);
    }

    #[test]
    fn propagation_is_deterministic() {
        let r = table_ratios();
        let s0 = TargetState {
            q: Quat::from_axis_angle(&Vec3::y(), 0.4),
            w: Vec3::new(0.02, 0.1, -0.05),
            pos: Vec3::zeros(),
            vel: Vec3::new(0.01, 0.0, 0.0),
        };
        let a = propagate(&s0, &r, 7.3, 0.01);
        let b = propagate(&s0, &r, 7.3, 0.01);
        assert_eq!(a.q.v, b.q.v);
        assert_eq!(a.q.s, b.q.s);
        assert_eq!(a.w, b.w);
        assert_eq!(a.pos, b.pos);
        assert_eq!(a.vel, b.vel);
    }

    /// Central difference of the grasp-point position over the propagated
    /// trajectory matches the analytic grasp-point velocity.
    #[test]
    fn grasp_kinematics_match_central_difference()
    {
        let r = table_ratios();
        let g = Vec3::new(-0.25, -0.1, 0.05);
        let s0 = TargetState {
            q: Quat::from_axis_angle(&Vec3::new(1.0, 0.3, -0.2), 0.9),
            w: Vec3::new(0.09, -0.03, 0.12),
            pos: Vec3::new(4.0, 0.5, -0.3),
            vel: Vec3::new(-0.005, 0.001, 0.002),
        };
        let h = 1e-4;
        let sp = propagate(&s0, &r, h, h);
        // Step backwards by negating rates: propagate the reversed state.
        let rev = TargetState { w: -s0.w, vel: -s0.vel, ..s0 };
        let sm_rev = propagate(&rev, &r, h, h);
        let sm = TargetState { w: -sm_rev.w, vel: -sm_rev.vel, ..sm_rev };
        let (pp, _) = grasp_point_kinematics(&sp, &g);
        let (pm, _) = grasp_point_kinematics(&sm, &g);
        let (_, vd) = grasp_point_kinematics(&s0, &g);
        let fd = (pp - pm) / (2.0 * h);
        assert!((fd - vd).norm() < 1e-7);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ratios_always_inside_open_interval(
                ixx in 0.5f64..10.0,
                iyy in 0.5f64..10.0,
                izz in 0.5f64..10.0,
            ) {
                if let Ok(i) = PrincipalInertia::new(ixx, iyy, izz) {
                    let r = InertiaRatios::from_inertia(&i).unwrap();
                    prop_assert!(r.s1.abs() < 1.0);
                    prop_assert!(r.s2.abs() < 1.0);
                    prop_assert!(r.third().abs() < 1.0);
                    prop_assert!(r.constraint_residual().abs() < 1e-14);
                }
            }

            #[test]
            fn b_matrix_positive_definite(s1 in -0.99f64..0.99, s2 in -0.99f64..0.99) {
                let r = InertiaRatios::new(s1, s2).unwrap();
                let b = r.b_matrix();
                prop_assert!(b[(0, 0)] > 0.0 && b[(1, 1)] > 0.0 && b[(2, 2)] > 0.0);
            }
        }
    }
}
