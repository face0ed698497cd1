//! Synthetic range scans of the target and point-cloud pose registration.
//!
//! The scanner model is the inverse of the registration model: for a true
//! fixture pose `(rho, eta)` (fixture origin in the camera frame, fixture
//! orientation), a model point `d` (fixture frame) is observed at
//! `c = A(eta)' (d - rho)` plus isotropic noise. Registration then minimizes
//!
//! ```text
//! eps(eta, rho) = 1/m * sum_i | A(eta) c_i + rho - d_i |^2
//! ```
//!
//! over unit `eta` and free `rho` with the q-method: the optimal `eta` is
//! the dominant eigenvector of the symmetric 4x4 gain matrix `G` built from
//! the centered correlation `D` and its axial vector `z`, and
//! `rho = d_bar - A(eta) c_bar`. `eps` (a mean, not a sum) doubles as the
//! fault-gate statistic: occlusion and intruder returns inflate it by
//! orders of magnitude over the clean-scan median.

use crate::error::Error;
use crate::so3::{Mat3, Mat4, Quat, Vec3};
use crate::Result;
use nalgebra::{SMatrix, Vector4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Mat6 = SMatrix<f64, 6, 6>;

/// Reference points of the target surface, fixture-frame coordinates (m).
#[derive(Debug, Clone)]
pub struct ModelPointSet {
    pub points: Vec<Vec3>,
}

/// One scan: observed points in the camera frame.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

/// Known data association `(cloud index, model index)`.
#[derive(Debug, Clone)]
pub struct Correspondences {
    pub pairs: Vec<(usize, usize)>,
}

/// Registration output: fixture pose in the camera frame.
#[derive(Debug, Clone, Copy)]
pub struct PoseMeasurement {
    pub rho: Vec3,
    pub eta: Quat,
}

/// Mean squared point-matching error and the pair count behind it.
#[derive(Debug, Clone, Copy)]
pub struct FitError {
    pub eps: f64,
    pub m_used: usize,
}

/// Scan corruption model. `occlusion_fraction` removes a contiguous angular
/// sector of returns (manipulator shadowing); `outlier_rate` replaces
/// surviving returns by uniform draws inside the 1.5x cloud bounding box
/// (intruder-surface hits). Correspondences keep pointing at the original
/// model indices, which is what makes outliers visible to `eps`.
#[derive(Debug, Clone, Copy)]
pub struct ScanParams {
    pub noise_std: f64,
    pub outlier_rate: f64,
    pub occlusion_fraction: f64,
    /// Azimuth (rad) where the removed sector starts.
    pub occlusion_start: f64,
}

impl Default for ScanParams {
    fn default() -> Self {
        ScanParams {
            noise_std: 0.0,
            outlier_rate: 0.0,
            occlusion_fraction: 0.0,
            occlusion_start: 0.0,
        }
    }
}

impl ModelPointSet {
    /// Parse `x y z` per line, `#` comments and blank lines ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            let mut next = || {
                it.next()
                    .ok_or_else(|| Error::Config(format!("model line {}: expected 3 numbers", lineno + 1)))?
                    .map_err(|e| Error::Config(format!("model line {}: {e}", lineno + 1)))
            };
            let p = Vec3::new(next()?, next()?, next()?);
            points.push(p);
        }
        let set = ModelPointSet { points };
        set.validate()?;
        Ok(set)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# model points, fixture frame, one 'x y z' per line (m)\n");
        for p in &self.points {
            s.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
        }
        s
    }

    /// At least 4 points and non-coplanar (full-rank centered scatter).
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 4 {
            return Err(Error::DegenerateGeometry(format!(
                "model needs >= 4 points, got {}",
                self.points.len()
            )));
        }
        let c = centroid(&self.points);
        let mut scatter = Mat3::zeros();
        for p in &self.points {
            let d = p - c;
            scatter += d * d.transpose();
        }
        let eig = scatter.symmetric_eigenvalues();
        let max = eig.max();
        if eig.min() < 1e-12 * max.max(1e-300) {
            return Err(Error::DegenerateGeometry(
                "model points are coplanar or collinear".into(),
            ));
        }
        Ok(())
    }

    /// Deterministic demo target: a boxy bus with an antenna mast, expressed
    /// in the fixture frame (fixture on the -x face, box center offset).
    pub fn demo() -> Self {
        let (hx, hy, hz) = (0.5, 0.4, 0.3);
        let center = Vec3::new(0.5, 0.05, -0.1);
        let mut points = Vec::new();
        // Corners, edge midpoints, face centers of the bus.
        for &x in &[-1.0, 0.0, 1.0] {
            for &y in &[-1.0, 0.0, 1.0] {
                for &z in &[-1.0f64, 0.0, 1.0] {
                    if x == 0.0 && y == 0.0 && z == 0.0 {
                        continue;
                    }
                    points.push(center + Vec3::new(hx * x, hy * y, hz * z));
                }
            }
        }
        // Antenna mast and tip along +z.
        for k in 1..=4 {
            points.push(center + Vec3::new(0.1, -0.05, hz + 0.12 * k as f64));
        }
        // Panel stub along +y.
        for k in 1..=4 {
            points.push(center + Vec3::new(-0.1, hy + 0.15 * k as f64, 0.05));
        }
        ModelPointSet { points }
    }
}

fn centroid(points: &[Vec3]) -> Vec3 {
    let mut c = Vec3::zeros();
    for p in points {
        c += p;
    }
    c / points.len() as f64
}

/// Generate one scan of the model at fixture pose `(rho, eta)`.
///
/// The surviving point count after occlusion is `m - round(m * fraction)`
/// exactly (sector membership is quantile-based in azimuth, so uneven
/// angular densities still shed the right count).
pub fn synth_scan(
    model: &ModelPointSet,
    rho: &Vec3,
    eta: &Quat,
    params: &ScanParams,
    rng: &mut ChaCha8Rng,
) -> (PointCloud, Correspondences) {
    let a_t = eta.rotation_matrix().transpose();
    let ideal: Vec<Vec3> = model.points.iter().map(|d| a_t * (d - rho)).collect();

    // Occlusion: drop a contiguous angular run (camera-frame azimuth about
    // the cloud centroid) holding round(m * fraction) points.
    let mut keep: Vec<usize> = (0..ideal.len()).collect();
    let frac = params.occlusion_fraction.clamp(0.0, 1.0);
    if frac > 0.0 {
        let c = centroid(&ideal);
        let mut order: Vec<(f64, usize)> = ideal
            .iter()
            .enumerate()
            .map(|(i, p)| ((p.y - c.y).atan2(p.x - c.x), i))
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let m = order.len();
        let drop_n = ((m as f64) * frac).round() as usize;
        let start = order
            .iter()
            .position(|(ang, _)| *ang >= params.occlusion_start)
            .unwrap_or(0);
        let dropped: std::collections::HashSet<usize> = (0..drop_n)
            .map(|k| order[(start + k) % m].1)
            .collect();
        keep.retain(|i| !dropped.contains(i));
    }

    // Bounding box of the surviving ideal returns, inflated 1.5x, for
    // outlier placement.
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for &i in &keep {
        lo = lo.inf(&ideal[i]);
        hi = hi.sup(&ideal[i]);
    }
    let mid = 0.5 * (lo + hi);
    let half = 0.75 * (hi - lo); // 1.5x box half-extent
    let (blo, bhi) = (mid - half, mid + half);

    let mut points = Vec::with_capacity(keep.len());
    let mut pairs = Vec::with_capacity(keep.len());
    for (cloud_idx, &i) in keep.iter().enumerate() {
        let noise = Vec3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ) * params.noise_std;
        points.push(ideal[i] + noise);
        pairs.push((cloud_idx, i));
    }

    // Exactly round(rate * m) returns become outliers, so a requested rate
    // is honored in every scan, not just in expectation.
    let n_out = (params.outlier_rate.clamp(0.0, 1.0) * points.len() as f64).round() as usize;
    if n_out > 0 {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        for j in 0..n_out {
            let r = rng.random_range(j..idx.len());
            idx.swap(j, r);
        }
        let mut chosen = idx[..n_out].to_vec();
        chosen.sort_unstable();
        for i in chosen {
            points[i] = Vec3::new(
                blo.x + rng.random::<f64>() * (bhi.x - blo.x),
                blo.y + rng.random::<f64>() * (bhi.y - blo.y),
                blo.z + rng.random::<f64>() * (bhi.z - blo.z),
            );
        }
    }
    (PointCloud { points }, Correspondences { pairs })
}

/// Dominant eigenpair of a symmetric 4x4 by cyclic Jacobi sweeps.
///
/// Returns the largest eigenvalue and its unit eigenvector, with residual
/// `|G v - lambda v| <= 1e-10 max(1, |G|)` guaranteed (checked), or a
/// numeric error after the sweep cap.
pub fn eig_max_sym4(g: &Mat4) -> Result<(f64, Vector4<f64>)> {
    let scale = g.norm();
    if scale == 0.0 {
        return Ok((0.0, Vector4::new(1.0, 0.0, 0.0, 0.0)));
    }
    let mut a = *g;
    let mut v = Mat4::identity();
    let mut converged = false;
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..4 {
            for q in (p + 1)..4 {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..4 {
            for q in (p + 1)..4 {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e12 {
                    1.0 / (2.0 * theta)
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- J' A J on rows/cols p, q.
                for k in 0..4 {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..4 {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numeric("Jacobi eigensolver did not converge".into()));
    }
    let mut best = 0;
    for k in 1..4 {
        if a[(k, k)] > a[(best, best)] {
            best = k;
        }
    }
    let lambda = a[(best, best)];
    let vec = v.column(best).normalize();
    let res = (g * vec - lambda * vec).norm();
    if res > 1e-10 * scale.max(1.0) {
        return Err(Error::Numeric(format!(
            "eigenpair residual {res:.3e} above tolerance"
        )));
    }
    Ok((lambda, vec))
}

/// q-method pose fit over known correspondences.
///
/// Errors on fewer than 3 pairs or a degenerate configuration (collinear
/// points leave the dominant eigenvalue ambiguous, detected by the spectral
/// gap).
pub fn qmethod_register(
    cloud: &PointCloud,
    model: &ModelPointSet,
    corr: &Correspondences,
) -> Result<(PoseMeasurement, FitError)> {
    let m = corr.pairs.len();
    if m < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "registration needs >= 3 pairs, got {m}"
        )));
    }
    let mut c_bar = Vec3::zeros();
    let mut d_bar = Vec3::zeros();
    for &(ci, di) in &corr.pairs {
        c_bar += cloud.points[ci];
        d_bar += model.points[di];
    }
    c_bar /= m as f64;
    d_bar /= m as f64;

    let mut d_mat = Mat3::zeros();
    let mut z = Vec3::zeros();
    for &(ci, di) in &corr.pairs {
        let c = cloud.points[ci] - c_bar;
        let d = model.points[di] - d_bar;
        d_mat += c * d.transpose();
        z += c.cross(&d);
    }
    let mut g = Mat4::zeros();
    let sym = d_mat + d_mat.transpose() - Mat3::identity() * d_mat.trace();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&sym);
    g.fixed_view_mut::<3, 1>(0, 3).copy_from(&z);
    g.fixed_view_mut::<1, 3>(3, 0).copy_from(&z.transpose());
    g[(3, 3)] = d_mat.trace();

    let (lambda, vec) = eig_max_sym4(&g)?;
    // Spectral gap guard: collinear geometry makes the optimal rotation
    // non-unique and the top eigenvalue (near-)repeated.
    let mut a = g;
    for k in 0..4 {
        a[(k, k)] -= lambda;
    }
    let evs = nalgebra::SymmetricEigen::new(g).eigenvalues;
    let mut sorted: Vec<f64> = evs.iter().copied().collect();
    sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
    if sorted[0] - sorted[1] < 1e-9 * sorted[0].abs().max(1.0) {
        return Err(Error::DegenerateGeometry(
            "ambiguous registration: dominant eigenvalue is repeated".into(),
        ));
    }

    let eta = Quat { v: Vec3::new(vec[0], vec[1], vec[2]), s: vec[3] }
        .normalized()
        .canonical();
    let rho = d_bar - eta.rotation_matrix() * c_bar;

    let a_eta = eta.rotation_matrix();
    let mut eps = 0.0;
    for &(ci, di) in &corr.pairs {
        eps += (a_eta * cloud.points[ci] + rho - model.points[di]).norm_squared();
    }
    eps /= m as f64;
    Ok((PoseMeasurement { rho, eta }, FitError { eps, m_used: m }))
}

/// Empirical measurement statistics at a representative pose and noise
/// level: pose-error covariance (for the filter's R) and the clean-scan
/// median fit error (the fault threshold is `5 x` this median).
#[derive(Debug, Clone)]
pub struct Calibration {
    pub r: Mat6,
    pub eps_median: f64,
    pub eps_star: f64,
}

pub fn calibrate(
    model: &ModelPointSet,
    poses: &[(Vec3, Quat)],
    params: &ScanParams,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Calibration> {
    assert!(trials >= 8 && !poses.is_empty(), "calibration needs a sane trial count");
    let clean = ScanParams { occlusion_fraction: 0.0, ..*params };
    let mut errs: Vec<nalgebra::SVector<f64, 6>> = Vec::with_capacity(trials);
    let mut eps_all = Vec::with_capacity(trials);
    for k in 0..trials {
        let (rho, eta) = &poses[k % poses.len()];
        let (cloud, corr) = synth_scan(model, rho, eta, &clean, rng);
        let (meas, fit) = qmethod_register(&cloud, model, &corr)?;
        let mut e = nalgebra::SVector::<f64, 6>::zeros();
        let dr = meas.rho - rho;
        // Sign-align the quaternion before differencing the vector parts.
        let mq = if meas.eta.dot4(eta) < 0.0 {
            Quat { v: -meas.eta.v, s: -meas.eta.s }
        } else {
            meas.eta
        };
        let de = mq.v - eta.v;
        for i in 0..3 {
            e[i] = dr[i];
            e[i + 3] = de[i];
        }
        errs.push(e);
        eps_all.push(fit.eps);
    }
    let mean = errs.iter().sum::<nalgebra::SVector<f64, 6>>() / trials as f64;
    let mut r = Mat6::zeros();
    for e in &errs {
        let d = e - mean;
        r += d * d.transpose();
    }
    r /= (trials - 1) as f64;
    r += Mat6::identity() * 1e-12;
    eps_all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let eps_median = if trials % 2 == 0 {
        0.5 * (eps_all[trials / 2 - 1] + eps_all[trials / 2])
    } else {
        eps_all[trials / 2]
    };
    Ok(Calibration { r, eps_median, eps_star: 5.0 * eps_median })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rand_pose(rng: &mut StdRng) -> (Vec3, Quat) {
        let axis = Vec3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        let q = Quat::from_axis_angle(
            &(axis + Vec3::new(0.01, 0.0, 0.0)),
            (rng.random::<f64>() * 2.0 - 1.0) * std::f64::consts::PI,
        );
        let rho = Vec3::new(
            rng.random::<f64>() * 8.0 - 4.0,
            rng.random::<f64>() * 8.0 - 4.0,
            rng.random::<f64>() * 8.0 - 4.0,
        );
        (rho, q)
    }

    fn spec_model() -> ModelPointSet {
        ModelPointSet {
            points: vec![
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
                Vec3::new(1.0, 1.0, 1.0),
            ],
        }
    }

    #[test]
    fn registration_recovers_reference_pose() {
        let model = spec_model();
        let eta = Quat::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let rho = Vec3::new(1.0, 0.0, 0.0);
        let mut rng = SeedTree::new(0).stream("scan", 0);
        let (cloud, corr) = synth_scan(&model, &rho, &eta, &ScanParams::default(), &mut rng);
        let (meas, fit) = qmethod_register(&cloud, &model, &corr).unwrap();
        let half = std::f64::consts::FRAC_PI_4;
        assert_abs_diff_eq!(meas.eta.v.z, half.sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(meas.eta.s, half.cos(), epsilon = 1e-12);
        assert!(meas.eta.v.xy().norm() < 1e-12);
        assert!((meas.rho - rho).norm() < 1e-12, "trans err {:e} rot err {:e} rho {:?}", (meas.rho - rho).norm(), meas.eta.angle_to(&eta), rho);
        assert!(fit.eps < 1e-20);
        assert_eq!(fit.m_used, 4);
    }

    /// Forward-transform oracle: noiseless scans at random poses must
    /// register back exactly.
    #[test]
    fn noiseless_round_trip_at_random_poses() {
        let model = ModelPointSet::demo();
        let mut rng = StdRng::seed_from_u64(21);
        let mut scan_rng = SeedTree::new(1).stream("scan", 0);
        for _ in 0..100 {
            let (rho, eta) = rand_pose(&mut rng);
            let (cloud, corr) =
                synth_scan(&model, &rho, &eta, &ScanParams::default(), &mut scan_rng);
            let (meas, fit) = qmethod_register(&cloud, &model, &corr).unwrap();
            assert!(meas.eta.angle_to(&eta) < 1e-10, "rot err {}", meas.eta.angle_to(&eta));
            assert!((meas.rho - rho).norm() < 1e-12, "trans err {:e} rot err {:e} rho {:?}", (meas.rho - rho).norm(), meas.eta.angle_to(&eta), rho);
            assert!(fit.eps < 1e-20);
        }
    }

    #[test]
    fn outliers_inflate_fit_error_tenfold() {
        let model = ModelPointSet::demo();
        let tree = SeedTree::new(9);
        let clean = ScanParams { noise_std: 0.005, ..Default::default() };
        let dirty = ScanParams { noise_std: 0.005, outlier_rate: 0.10, ..Default::default() };
        let mut rng = StdRng::seed_from_u64(2);
        let mut clean_eps = Vec::new();
        let mut dirty_eps = Vec::new();
        for k in 0..40u64 {
            let (rho, eta) = rand_pose(&mut rng);
            let mut r1 = tree.stream("clean", k);
            let (c1, p1) = synth_scan(&model, &rho, &eta, &clean, &mut r1);
            clean_eps.push(qmethod_register(&c1, &model, &p1).unwrap().1.eps);
            let mut r2 = tree.stream("dirty", k);
            let (c2, p2) = synth_scan(&model, &rho, &eta, &dirty, &mut r2);
            dirty_eps.push(qmethod_register(&c2, &model, &p2).unwrap().1.eps);
        }
        let mut sorted = clean_eps.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        for (c, d) in clean_eps.iter().zip(&dirty_eps) {
            assert!(*d >= 10.0 * median, "outlier eps {d} vs clean median {median}");
            assert!(d > c, "outlier eps must dominate the clean eps per seed");
        }
    }

    /// No small perturbation of the fitted pose may reduce eps: the
    /// registration output is a local (indeed global) minimizer.
    #[test]
    fn fit_is_locally_optimal() {
        let model = ModelPointSet::demo();
        let (rho, eta) = (Vec3::new(3.0, -1.0, 0.5), Quat::from_axis_angle(&Vec3::new(1.0, 2.0, 0.5), 1.2));
        let mut rng = SeedTree::new(3).stream("scan", 7);
        let params = ScanParams { noise_std: 0.01, ..Default::default() };
        let (cloud, corr) = synth_scan(&model, &rho, &eta, &params, &mut rng);
        let (meas, fit) = qmethod_register(&cloud, &model, &corr).unwrap();
        let eval = |eta: &Quat, rho: &Vec3| {
            let a = eta.rotation_matrix();
            let mut e = 0.0;
            for &(ci, di) in &corr.pairs {
                e += (a * cloud.points[ci] + rho - model.points[di]).norm_squared();
            }
            e / corr.pairs.len() as f64
        };
        let mut pert = StdRng::seed_from_u64(4);
        for _ in 0..1000 {
            let dv = Vec3::new(
                pert.random::<f64>() - 0.5,
                pert.random::<f64>() - 0.5,
                pert.random::<f64>() - 0.5,
            ) * 2e-3;
            let dr = Vec3::new(
                pert.random::<f64>() - 0.5,
                pert.random::<f64>() - 0.5,
                pert.random::<f64>() - 0.5,
            ) * 2e-3;
            let eta_p = meas.eta.product(&Quat::from_vector_part(&dv));
            let e = eval(&eta_p, &(meas.rho + dr));
            assert!(e >= fit.eps * (1.0 - 1e-9) - 1e-18);
        }
    }

    #[test]
    fn eig_reference_and_quartic_oracle() {
        // Frozen: diag(1,2,3,4).
        let g = Mat4::from_diagonal(&Vector4::new(1.0, 2.0, 3.0, 4.0));
        let (l, v) = eig_max_sym4(&g).unwrap();
        assert_abs_diff_eq!(l, 4.0, epsilon = 1e-12);
        assert!(v[3].abs() > 1.0 - 1e-12);

        // Independent oracle: largest root of det(G - lambda I) by downward
        // scan + bisection from the Gershgorin bound.
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let mut m = Mat4::zeros();
            for i in 0..4 {
                for j in i..4 {
                    let x = rng.random::<f64>() * 4.0 - 2.0;
                    m[(i, j)] = x;
                    m[(j, i)] = x;
                }
            }
            let (l, v) = eig_max_sym4(&m).unwrap();
            assert!((m * v - l * v).norm() <= 1e-10 * m.norm().max(1.0));

            let p = |lam: f64| (m - Mat4::identity() * lam).determinant();
            let mut hi = (0..4)
                .map(|i| (0..4).map(|j| m[(i, j)].abs()).sum::<f64>())
                .fold(f64::MIN, f64::max)
                + 1.0;
            // p > 0 beyond the top root; walk down until the sign flips.
            let mut lo = hi;
            let step = 1e-3 * hi.max(1.0);
            while p(lo) > 0.0 {
                lo -= step;
            }
            hi = lo + step;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if p(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            assert!((0.5 * (lo + hi) - l).abs() < 1e-9 * l.abs().max(1.0));
        }
    }

    #[test]
    fn occlusion_halves_point_count() {
        let model = ModelPointSet::demo();
        let m = model.points.len();
        let params = ScanParams { occlusion_fraction: 0.5, ..Default::default() };
        let mut rng = SeedTree::new(4).stream("scan", 0);
        let (cloud, corr) =
            synth_scan(&model, &Vec3::new(2.0, 0.0, 0.0), &Quat::IDENTITY, &params, &mut rng);
        let expect = m - ((m as f64) * 0.5).round() as usize;
        assert_eq!(cloud.points.len(), expect);
        assert_eq!(corr.pairs.len(), expect);
        assert!((cloud.points.len() as i64 - (m as i64 - cloud.points.len() as i64)).abs() <= 1);
    }

    #[test]
    fn degenerate_geometry_is_rejected() {
        let model = spec_model();
        let two = PointCloud { points: vec![Vec3::zeros(), Vec3::x()] };
        let corr = Correspondences { pairs: vec![(0, 0), (1, 1)] };
        assert!(matches!(
            qmethod_register(&two, &model, &corr),
            Err(Error::DegenerateGeometry(_))
        ));

        // Collinear: rotation about the common line is unobservable.
        let line_model = ModelPointSet {
            points: vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(2.0, 0.0, 0.0),
                Vec3::new(3.0, 0.0, 0.0),
            ],
        };
        let cloud = PointCloud { points: line_model.points.clone() };
        let corr = Correspondences { pairs: (0..4).map(|i| (i, i)).collect() };
        assert!(matches!(
            qmethod_register(&cloud, &line_model, &corr),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn scans_are_deterministic_per_stream() {
        let model = ModelPointSet::demo();
        let params = ScanParams { noise_std: 0.01, outlier_rate: 0.1, ..Default::default() };
        let tree = SeedTree::new(11);
        let (a, _) = synth_scan(
            &model,
            &Vec3::new(3.0, 1.0, 0.0),
            &Quat::IDENTITY,
            &params,
            &mut tree.stream("scan", 5),
        );
        let (b, _) = synth_scan(
            &model,
            &Vec3::new(3.0, 1.0, 0.0),
            &Quat::IDENTITY,
            &params,
            &mut tree.stream("scan", 5),
        );
        for (p, q) in a.points.iter().zip(&b.points) {
            assert_eq!(p, q);
        }
    }

    #[test]
    fn model_text_round_trip() {
        let model = ModelPointSet::demo();
        let text = model.to_text();
        let back = ModelPointSet::from_text(&text).unwrap();
        assert_eq!(model.points.len(), back.points.len());
        for (p, q) in model.points.iter().zip(&back.points) {
            assert!((p - q).norm() < 1e-12);
        }
        assert!(ModelPointSet::from_text("0 0 0\n1 0 0\n0 1 0\n").is_err());
    }

    #[test]
    fn calibration_scales_with_noise() {
        let model = ModelPointSet::demo();
        let eta = Quat::from_axis_angle(&Vec3::new(0.2, 1.0, -0.4), 0.8);
        let rho = Vec3::new(4.0, 0.5, -0.3);
        let tree = SeedTree::new(12);
        let poses = [
            (rho, eta),
            (rho, Quat::from_axis_angle(&Vec3::new(1.0, 0.0, 0.0), 0.5).product(&eta)),
            (rho, Quat::from_axis_angle(&Vec3::new(0.0, 0.0, 1.0), -0.5).product(&eta)),
        ];
        let lo = calibrate(
            &model,
            &poses,
            &ScanParams { noise_std: 0.002, ..Default::default() },
            128,
            &mut tree.stream("calib", 0),
        )
        .unwrap();
        let hi = calibrate(
            &model,
            &poses,
            &ScanParams { noise_std: 0.02, ..Default::default() },
            128,
            &mut tree.stream("calib", 1),
        )
        .unwrap();
        assert!(hi.eps_median > 20.0 * lo.eps_median);
        assert!(hi.r.trace() > 20.0 * lo.r.trace());
        assert_abs_diff_eq!(lo.eps_star, 5.0 * lo.eps_median);
    }
}
