//! End-to-end approach planning against the analytic rest-to-rest family.

use approx::assert_relative_eq;
use capsim::dynamics::InertiaRatios;
use capsim::estimator::{Belief, Cov};
use capsim::parallel::Exec;
use capsim::rendezvous::{solve, ChaserState, PlannerConfig};
use capsim::{Quat, Vec3};

fn stationary_belief(rho: Vec3) -> Belief {
    Belief {
        t: 0.0,
        q: Quat::IDENTITY,
        w: Vec3::zeros(),
        pos: rho,
        vel: Vec3::zeros(),
        sig: InertiaRatios::new(-0.5, 0.6).unwrap(),
        grasp: Vec3::zeros(),
        mu: Quat::IDENTITY,
        cov: Cov::zeros(),
    }
}

/// For a stationary target at distance d with the chaser at rest, the
/// minimum time is the symmetric accelerate/brake profile 2 sqrt(d / a_max).
#[test]
fn rest_to_rest_family_matches_analytic_times() {
    let cfg = PlannerConfig { los_weight: 0.0, ..PlannerConfig::default() };
    let dir = Vec3::new(0.6, -0.8, 0.0);
    for d in [0.1, 0.25, 0.5, 1.0] {
        let chaser = ChaserState { r: Vec3::new(0.3, 0.1, -0.2), v: Vec3::zeros() };
        let b = stationary_belief(chaser.r + d * dir);
        let plan = solve(&chaser, &b, &cfg, Exec::Parallel).unwrap();
        assert!(plan.converged, "d = {d}: no convergence");
        assert!(plan.residual < 1e-6, "d = {d}: residual {}", plan.residual);

        let expect = 2.0 * (d / cfg.a_max).sqrt();
        assert_relative_eq!(plan.t1 - plan.t0, expect, max_relative = 1e-3);

        for s in &plan.samples {
            assert!(
                (s.accel.norm() - cfg.a_max).abs() < 1e-9,
                "d = {d}: thrust off the rail at t = {}",
                s.t
            );
        }
    }
}
