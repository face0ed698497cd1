//! Constrained multiplicative extended Kalman filter over the target state.
//!
//! Error-state layout (20 components):
//!
//! | rows  | quantity                                          |
//! |-------|---------------------------------------------------|
//! | 0-2   | attitude error vector (right multiplicative)      |
//! | 3-5   | body rate (rad/s)                                 |
//! | 6-8   | center-of-mass position (m, camera frame)         |
//! | 9-11  | center-of-mass velocity (m/s)                     |
//! | 12-13 | inertia ratios (s1, s2)                           |
//! | 14-16 | grasp fixture offset (m, body frame)              |
//! | 17-19 | fixture misalignment error vector (left mult.)    |
//!
//! Attitude error is `dq = qhat^-1 (x) q`, folded back as
//! `q = qhat (x) from_vector_part(dq_v)`. Under the module-wide composition
//! rule this right error is *constant* whenever the rate estimate is exact,
//! so the attitude/attitude block of the process Jacobian is exactly zero
//! and the rate coupling is `1/2 A(qhat)`. The misalignment error sits on
//! the other side, `dmu = mu (x) muhat^-1`, because the misalignment
//! composes from the fixture side of the measured attitude.
//!
//! The filter departs from a vanilla EKF in two contractual ways:
//!
//! * a fault gate: when the registration fit error reaches `eps_star` the
//!   epoch's measurement is discarded and the posterior *is* the prior,
//!   bit for bit;
//! * a gain projection on the inertia-ratio rows: whenever the unconstrained
//!   additive update would leave the open interval (-1, 1), the offending
//!   gain row is rescaled so the posterior lands exactly on
//!   `+/-(1 - RATIO_MARGIN)`.
//!
//! Mean propagation calls `dynamics::propagate`, the same fixed-step RK4 the
//! truth simulation uses, so a gated interval reduces to pure prediction with
//! no integrator mismatch. Covariance propagation uses the first-order
//! transition `Phi = I + dt F` and the closed-form noise integral
//! `Q = dt M + dt^2/2 (F M + M F^T) + dt^3/3 F M F^T`.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, InertiaRatios, TargetState};
use crate::error::Error;
use crate::so3::{skew, Mat3, Quat, Vec3};
use crate::vision::{FitError, Mat6, PoseMeasurement};
use crate::Result;

/// Error-state dimension.
pub const DIM: usize = 20;
/// First row of each block.
pub const ATT: usize = 0;
pub const RATE: usize = 3;
pub const POS: usize = 6;
pub const VEL: usize = 9;
pub const SIG: usize = 12;
pub const GRASP: usize = 14;
pub const MIS: usize = 17;

/// Half-width of the forbidden band at the inertia-ratio boundary.
pub const RATIO_MARGIN: f64 = 1e-6;

pub type Cov = SMatrix<f64, DIM, DIM>;
pub type ErrorVec = SVector<f64, DIM>;
pub type ObsVec = SVector<f64, 6>;
pub type ObsMat = SMatrix<f64, 6, DIM>;
pub type GainMat = SMatrix<f64, DIM, 6>;

/// Filter tuning. `r` and `eps_star` normally come from a sensor
/// calibration pass; the defaults keep the gate open (`eps_star` infinite)
/// so an uncalibrated filter never silently drops measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Angular disturbance density feeding the torque map (N m / tr,
    /// white, per sqrt(Hz)).
    pub sigma_tau: f64,
    /// Linear acceleration disturbance density (m/s^2 per sqrt(Hz)).
    pub sigma_f: f64,
    /// Measurement noise covariance of the registered pose (m^2 and
    /// quaternion-vector units).
    pub r: Mat6,
    /// Fit-error gate: a measurement with `eps >= eps_star` is discarded.
    pub eps_star: f64,
    /// Use the Joseph covariance form on updates (slower, more robust).
    pub joseph: bool,
    /// Substep for the mean propagation integrator (s).
    pub integrator_dt: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            sigma_tau: 1e-4,
            sigma_f: 1e-4,
            r: Mat6::from_diagonal_element(1e-6),
            eps_star: f64::INFINITY,
            joseph: false,
            integrator_dt: 0.01,
        }
    }
}

/// Filter mean and covariance at time `t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Belief {
    pub t: f64,
    /// Target attitude, body -> camera.
    pub q: Quat,
    /// Body rate (rad/s).
    pub w: Vec3,
    /// Center-of-mass position (m, camera frame).
    pub pos: Vec3,
    /// Center-of-mass velocity (m/s).
    pub vel: Vec3,
    /// Inertia ratios, strictly inside (-1, 1) by construction.
    pub sig: InertiaRatios,
    /// Grasp fixture offset (m, body frame).
    pub grasp: Vec3,
    /// Fixture misalignment quaternion.
    pub mu: Quat,
    pub cov: Cov,
}

impl Belief {
    /// Kinematic sub-state consumed by the shared integrator.
    pub fn target_state(&self) -> TargetState {
        TargetState { q: self.q, w: self.w, pos: self.pos, vel: self.vel }
    }

    /// Fold an error vector into the mean. Quaternion components compose
    /// multiplicatively on their respective sides; ratio components are
    /// clamped to the open interval so the result is always a valid belief
    /// (callers sampling large errors keep the filter invariant).
    pub fn compose_error(&self, d: &ErrorVec) -> Belief {
        let bound = 1.0 - RATIO_MARGIN;
        Belief {
            t: self.t,
            q: self
                .q
                .product(&Quat::from_vector_part(&d.fixed_rows::<3>(ATT).into_owned()))
                .normalized(),
            w: self.w + d.fixed_rows::<3>(RATE).into_owned(),
            pos: self.pos + d.fixed_rows::<3>(POS).into_owned(),
            vel: self.vel + d.fixed_rows::<3>(VEL).into_owned(),
            sig: InertiaRatios {
                s1: (self.sig.s1 + d[SIG]).clamp(-bound, bound),
                s2: (self.sig.s2 + d[SIG + 1]).clamp(-bound, bound),
            },
            grasp: self.grasp + d.fixed_rows::<3>(GRASP).into_owned(),
            mu: Quat::from_vector_part(&d.fixed_rows::<3>(MIS).into_owned())
                .product(&self.mu)
                .normalized(),
            cov: self.cov,
        }
    }

    /// Error vector such that `reference.compose_error(e) ~ self`. Exact
    /// inverse of `compose_error` (up to roundoff) while the quaternion
    /// errors stay inside the canonical hemisphere.
    pub fn error_from(&self, reference: &Belief) -> ErrorVec {
        let mut e = ErrorVec::zeros();
        let dq = crate::so3::small_quat_error(&reference.q, &self.q);
        let dm = self.mu.product(&reference.mu.conjugate());
        let dm_v = if dm.s < 0.0 { -dm.v } else { dm.v };
        for k in 0..3 {
            e[ATT + k] = dq[k];
            e[RATE + k] = self.w[k] - reference.w[k];
            e[POS + k] = self.pos[k] - reference.pos[k];
            e[VEL + k] = self.vel[k] - reference.vel[k];
            e[GRASP + k] = self.grasp[k] - reference.grasp[k];
            e[MIS + k] = dm_v[k];
        }
        e[SIG] = self.sig.s1 - reference.sig.s1;
        e[SIG + 1] = self.sig.s2 - reference.sig.s2;
        e
    }

    /// Frobenius norm of the covariance; the scalar the supervisor
    /// thresholds to declare the learning phase converged.
    pub fn convergence_metric(&self) -> f64 {
        self.cov.norm()
    }
}

/// Default initial covariance: independent blocks sized for a cold start
/// right after the first registration fix.
pub fn default_initial_cov() -> Cov {
    let mut d = ErrorVec::zeros();
    for k in 0..3 {
        d[ATT + k] = 0.1 * 0.1;
        d[RATE + k] = 0.05 * 0.05;
        d[POS + k] = 0.1 * 0.1;
        d[VEL + k] = 0.05 * 0.05;
        d[GRASP + k] = 0.2 * 0.2;
        d[MIS + k] = 0.1 * 0.1;
    }
    d[SIG] = 0.3 * 0.3;
    d[SIG + 1] = 0.3 * 0.3;
    Cov::from_diagonal(&d)
}

/// Continuous-time error-state Jacobian at the belief mean.
///
/// The attitude/attitude block is exactly zero: the right multiplicative
/// error is frozen under matched rates (see the module notes), so only the
/// rate error drives it, through half the direction cosine matrix.
pub fn process_jacobian(b: &Belief) -> Cov {
    let mut f = Cov::zeros();
    f.fixed_view_mut::<3, 3>(ATT, RATE)
        .copy_from(&(0.5 * b.q.rotation_matrix()));
    f.fixed_view_mut::<3, 3>(RATE, RATE)
        .copy_from(&dynamics::dphi_domega(&b.w, &b.sig));
    f.fixed_view_mut::<3, 2>(RATE, SIG)
        .copy_from(&dynamics::dphi_dsigma(&b.w, &b.sig));
    f.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&Mat3::identity());
    f
}

/// First-order state transition over one covariance step. Adequate because
/// the epoch spacing keeps `||F dt||` well under one; the tests pin the
/// O(dt^2) gap against a matrix exponential.
pub fn transition_matrix(f: &Cov, dt: f64) -> Cov {
    Cov::identity() + dt * f
}

/// Closed-form process noise over one covariance step:
/// `Q = dt M + dt^2/2 (F M + M F^T) + dt^3/3 F M F^T`, the exact integral
/// of `(I + s F) M (I + s F)^T` over the step. `M` carries the torque
/// disturbance through the dimensionless torque map and the linear
/// disturbance directly into the velocity rows.
pub fn process_noise(f: &Cov, sig: &InertiaRatios, dt: f64, cfg: &FilterConfig) -> Cov {
    let bmap = sig.b_matrix();
    let mut m = Cov::zeros();
    m.fixed_view_mut::<3, 3>(RATE, RATE)
        .copy_from(&(cfg.sigma_tau * cfg.sigma_tau * bmap * bmap));
    m.fixed_view_mut::<3, 3>(VEL, VEL)
        .copy_from(&(Mat3::identity() * (cfg.sigma_f * cfg.sigma_f)));
    let fm = f * m;
    dt * m + (dt * dt / 2.0) * (fm + fm.transpose()) + (dt * dt * dt / 3.0) * (fm * f.transpose())
}

/// Predicted pose measurement: grasp-fixture position and the vector part
/// of the fixture attitude `eta = mu (x) q`. Returns the stacked 6-vector
/// and the full predicted quaternion (needed for hemisphere alignment; it
/// is deliberately *not* canonicalized, the linearization lives in whatever
/// hemisphere the product lands in).
pub fn predict_measurement(b: &Belief) -> (ObsVec, Quat) {
    let a = b.q.rotation_matrix();
    let rho_g = b.pos + a * b.grasp;
    let eta = b.mu.product(&b.q).normalized();
    let mut v = ObsVec::zeros();
    for k in 0..3 {
        v[k] = rho_g[k];
        v[3 + k] = eta.v[k];
    }
    (v, eta)
}

/// Measurement Jacobian at the belief mean.
///
/// The lever-arm block is the skew of the *rotated* offset,
/// `-2[(A rho)x] = -2 A [rho x] A^T`, not `-2 A [rho x]`; the two differ by
/// a frame conjugation and only the former matches the finite-difference
/// oracle under this module's error conventions.
pub fn observation_jacobian(b: &Belief) -> ObsMat {
    let a = b.q.rotation_matrix();
    let eta = b.mu.product(&b.q).normalized();
    let mut h = ObsMat::zeros();
    h.fixed_view_mut::<3, 3>(0, ATT)
        .copy_from(&(-2.0 * skew(&(a * b.grasp))));
    h.fixed_view_mut::<3, 3>(0, POS).copy_from(&Mat3::identity());
    h.fixed_view_mut::<3, 3>(0, GRASP).copy_from(&a);
    h.fixed_view_mut::<3, 3>(3, ATT)
        .copy_from(&(eta.s * Mat3::identity() - skew(&eta.v)));
    h.fixed_view_mut::<3, 3>(3, MIS)
        .copy_from(&(eta.s * Mat3::identity() + skew(&eta.v)));
    h
}

/// Innovation with the measured quaternion sign-aligned to the prediction
/// before its vector parts are differenced.
pub fn innovation(b: &Belief, meas: &PoseMeasurement) -> ObsVec {
    let (pred, eta_hat) = predict_measurement(b);
    let mv = if meas.eta.dot4(&eta_hat) < 0.0 { -meas.eta.v } else { meas.eta.v };
    let mut e = ObsVec::zeros();
    for k in 0..3 {
        e[k] = meas.rho[k] - pred[k];
        e[3 + k] = mv[k] - pred[3 + k];
    }
    e
}

/// Scale factor for a ratio-row gain so the additive update lands inside
/// the open interval: 1 when the unconstrained posterior already does,
/// otherwise the factor that puts it exactly on `sign(step)(1 - margin)`.
pub fn ratio_gain_scale(prior: f64, step: f64) -> f64 {
    if step == 0.0 {
        return 1.0;
    }
    let proposed = prior + step;
    if proposed.abs() < 1.0 {
        return 1.0;
    }
    let target = step.signum() * (1.0 - RATIO_MARGIN);
    (target - prior) / step
}

fn gain_parts(b: &Belief, meas: &PoseMeasurement, cfg: &FilterConfig) -> Result<(GainMat, ObsVec, f64, ObsMat)> {
    let h = observation_jacobian(b);
    let e = innovation(b, meas);
    let s_mat = h * b.cov * h.transpose() + cfg.r;
    match s_mat.cholesky() {
        Some(ch) => {
            let k = ch.solve(&(h * b.cov)).transpose();
            let nis = e.dot(&ch.solve(&e));
            Ok((k, e, nis, h))
        }
        None => {
            let inv = s_mat.try_inverse().ok_or_else(|| {
                Error::Numeric("innovation covariance is singular".into())
            })?;
            let k = b.cov * h.transpose() * inv;
            let nis = e.dot(&(inv * e));
            Ok((k, e, nis, h))
        }
    }
}

/// Pre-projection Kalman gain, innovation, and normalized innovation
/// squared: the raw internals of `update`, exposed so analyses can see the
/// unconstrained step the ratio projection acts on.
pub fn gain_and_innovation(
    b: &Belief,
    meas: &PoseMeasurement,
    cfg: &FilterConfig,
) -> Result<(GainMat, ObsVec, f64)> {
    let (k, e, nis, _) = gain_parts(b, meas, cfg)?;
    Ok((k, e, nis))
}

/// Per-update report for traces and gating diagnostics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UpdateOutcome {
    /// False when the fit-error gate discarded the measurement.
    pub accepted: bool,
    pub innovation: ObsVec,
    /// Normalized innovation squared (zero on gated epochs).
    pub nis: f64,
}

/// Measurement update. The belief and the measurement must refer to the
/// same instant; the supervisor guarantees that by propagating to the scan
/// epoch first. On a gated epoch the returned belief is the input, field
/// for field.
pub fn update(
    b: &Belief,
    meas: &PoseMeasurement,
    fit: &FitError,
    cfg: &FilterConfig,
) -> Result<(Belief, UpdateOutcome)> {
    if fit.eps >= cfg.eps_star {
        let out = UpdateOutcome { accepted: false, innovation: ObsVec::zeros(), nis: 0.0 };
        return Ok((b.clone(), out));
    }
    let (mut k, e, nis, h) = gain_parts(b, meas, cfg)?;
    let mut delta = k * e;
    for slot in SIG..SIG + 2 {
        let prior = if slot == SIG { b.sig.s1 } else { b.sig.s2 };
        let lam = ratio_gain_scale(prior, delta[slot]);
        if lam != 1.0 {
            delta[slot] *= lam;
            for c in 0..6 {
                k[(slot, c)] *= lam;
            }
        }
    }
    let ikh = Cov::identity() - k * h;
    let p = if cfg.joseph {
        ikh * b.cov * ikh.transpose() + k * cfg.r * k.transpose()
    } else {
        ikh * b.cov
    };
    let bound = 1.0 - RATIO_MARGIN;
    let next = Belief {
        t: b.t,
        q: b
            .q
            .product(&Quat::from_vector_part(&delta.fixed_rows::<3>(ATT).into_owned()))
            .normalized(),
        w: b.w + delta.fixed_rows::<3>(RATE).into_owned(),
        pos: b.pos + delta.fixed_rows::<3>(POS).into_owned(),
        vel: b.vel + delta.fixed_rows::<3>(VEL).into_owned(),
        sig: InertiaRatios {
            s1: (b.sig.s1 + delta[SIG]).clamp(-bound, bound),
            s2: (b.sig.s2 + delta[SIG + 1]).clamp(-bound, bound),
        },
        grasp: b.grasp + delta.fixed_rows::<3>(GRASP).into_owned(),
        mu: Quat::from_vector_part(&delta.fixed_rows::<3>(MIS).into_owned())
            .product(&b.mu)
            .normalized(),
        cov: 0.5 * (p + p.transpose()),
    };
    Ok((next, UpdateOutcome { accepted: true, innovation: e, nis }))
}

/// Time update over `dt`: the mean runs through the shared fixed-step
/// integrator (bit-identical to the truth propagation it mirrors), the
/// covariance through the same substep sequence with one first-order
/// transition per substep, relinearized along the mean path. A single
/// transition over the full interval would hold the attitude-rate coupling
/// `0.5 A(q_hat)` frozen while the mean rotates underneath it; the resulting
/// cross-covariance error compounds across epochs and drags long-run NEES
/// out of its chi-square envelope.
pub fn propagate(b: &Belief, dt: f64, cfg: &FilterConfig) -> Belief {
    let zero = Vec3::zeros();
    // Substep bookkeeping mirrors dynamics::propagate exactly so the mean
    // stays bitwise equal to the shared integrator.
    let n = (dt / cfg.integrator_dt).floor() as usize;
    let rem = dt - n as f64 * cfg.integrator_dt;
    let mut s = b.target_state();
    let mut p = b.cov;
    let substep = |s: &mut dynamics::TargetState, p: &mut Cov, h: f64| {
        let at = Belief {
            t: 0.0,
            q: s.q,
            w: s.w,
            pos: s.pos,
            vel: s.vel,
            sig: b.sig,
            grasp: b.grasp,
            mu: b.mu,
            cov: Cov::zeros(),
        };
        let f = process_jacobian(&at);
        let phi = transition_matrix(&f, h);
        let qk = process_noise(&f, &b.sig, h, cfg);
        *p = phi * *p * phi.transpose() + qk;
        *s = s.step(&b.sig, h, &zero, &zero);
    };
    for _ in 0..n {
        substep(&mut s, &mut p, cfg.integrator_dt);
    }
    if rem > 1e-12 {
        substep(&mut s, &mut p, rem);
    }
    Belief {
        t: b.t + dt,
        q: s.q,
        w: s.w,
        pos: s.pos,
        vel: s.vel,
        sig: b.sig,
        grasp: b.grasp,
        mu: b.mu,
        cov: 0.5 * (p + p.transpose()),
    }
}
