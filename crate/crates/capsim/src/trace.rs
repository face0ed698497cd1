//! Trace emission and replay: CSV files with unit header comments, JSON
//! records, and the stage-snapshot formats.
//!
//! Layout notes. Every CSV starts with '#' comment lines naming the units,
//! then one header row of column names, then data rows. Floats print in
//! Rust's shortest round-trip form, so identical runs produce byte-identical
//! files and a parsed-back value equals the written one exactly. The scan
//! log is both an output (recorded by a mission) and an input (replayed by
//! the estimate stage); its reader checks the header row before trusting the
//! data. JSON documents go through serde with fixed field order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detumble::DetumblePlan;
use crate::dynamics::InertiaRatios;
use crate::error::Error;
use crate::estimator::Belief;
use crate::rendezvous::PreCapturePlan;
use crate::so3::{Quat, Vec3};
use crate::Result;

/// One registered scan: the measurement the filter saw, before gating.
#[derive(Debug, Clone, Copy)]
pub struct ScanRecord {
    pub t: f64,
    /// Registered fixture position (m, camera frame).
    pub rho: Vec3,
    /// Registered fixture attitude.
    pub eta: Quat,
    /// Mean squared point-matching error (m^2).
    pub eps: f64,
    /// Point pairs behind the fit.
    pub m_used: usize,
}

/// Belief mean and filter diagnostics at one measurement epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub t: f64,
    /// False when the fit-error gate discarded the epoch's measurement.
    pub accepted: bool,
    /// Fit error of the epoch's scan (m^2).
    pub eps: f64,
    /// Normalized innovation squared (zero on gated epochs).
    pub nis: f64,
    /// Covariance Frobenius norm, the learning-phase convergence metric.
    pub conv: f64,
    pub q: Quat,
    pub w: Vec3,
    pub pos: Vec3,
    pub vel: Vec3,
    pub sig: InertiaRatios,
    pub grasp: Vec3,
    pub mu: Quat,
}

impl EpochRecord {
    pub fn from_belief(b: &Belief, accepted: bool, eps: f64, nis: f64) -> EpochRecord {
        EpochRecord {
            t: b.t,
            accepted,
            eps,
            nis,
            conv: b.convergence_metric(),
            q: b.q,
            w: b.w,
            pos: b.pos,
            vel: b.vel,
            sig: b.sig,
            grasp: b.grasp,
            mu: b.mu,
        }
    }
}

/// One mission loop sample: chaser kinematics against the true fixture.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub t: f64,
    /// Phase code: 0 learning, 1 pre-capture, 2 post-capture, 3 done,
    /// 4 aborted.
    pub phase: u8,
    /// End-effector position (m, camera frame).
    pub r: Vec3,
    /// End-effector velocity (m/s).
    pub v: Vec3,
    /// Commanded end-effector acceleration (m/s^2).
    pub accel: Vec3,
    /// True fixture position (m).
    pub fixture_pos: Vec3,
    /// True fixture velocity (m/s).
    pub fixture_vel: Vec3,
    /// End-effector to fixture distance (m).
    pub separation: f64,
    /// End-effector to fixture speed (m/s).
    pub rel_speed: f64,
    /// Occlusion trigger active.
    pub occluded: bool,
}

/// Belief plus chaser kinematics, the approach-planning stage input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApproachSnapshot {
    pub belief: Belief,
    pub chaser_r: Vec3,
    pub chaser_v: Vec3,
}

/// Post-capture hand-off state in believed parameters, the detumble-planning
/// stage input.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DetumbleSnapshot {
    pub t: f64,
    /// Body-frame stack velocity (m/s).
    pub v: Vec3,
    /// Body rate (rad/s).
    pub w: Vec3,
    /// Attitude, body to camera.
    pub q: Quat,
    /// Believed inertia ratios.
    pub sig: InertiaRatios,
    /// Believed grasp offset (m, body frame).
    pub grasp: Vec3,
}

/// Provenance stamp written before any trace: what ran, on what input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: String,
    pub config_hash: String,
    pub seed: u64,
    pub out_dir: String,
    pub tool_version: String,
}

/// FNV-1a 64 over the canonical config text; hex string.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Streamed CSV emitter; all data cells are floats (flags and counts are
/// written as exact small integers).
pub struct CsvWriter {
    w: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, comments: &[&str], columns: &[&str]) -> Result<CsvWriter> {
        let mut w = BufWriter::new(File::create(path)?);
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "{}", columns.join(","))?;
        Ok(CsvWriter { w })
    }

    pub fn row(&mut self, fields: &[f64]) -> Result<()> {
        let mut first = true;
        for f in fields {
            if !first {
                self.w.write_all(b",")?;
            }
            write!(self.w, "{f}")?;
            first = false;
        }
        self.w.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

const SCAN_COLUMNS: [&str; 10] =
    ["t", "rho_x", "rho_y", "rho_z", "eta_x", "eta_y", "eta_z", "eta_s", "eps", "m_used"];

pub fn write_scan_log(path: &Path, records: &[ScanRecord]) -> Result<()> {
    let mut w = CsvWriter::create(
        path,
        &[
            "registered scans, one row per measurement epoch",
            "t (s), rho (m, camera frame), eta (fixture attitude, x y z s), eps (m^2), m_used (pairs)",
        ],
        &SCAN_COLUMNS,
    )?;
    for r in records {
        w.row(&[
            r.t, r.rho.x, r.rho.y, r.rho.z, r.eta.v.x, r.eta.v.y, r.eta.v.z, r.eta.s, r.eps,
            r.m_used as f64,
        ])?;
    }
    w.finish()
}

/// Parse a scan log written by [`write_scan_log`]; the header row must
/// match.
pub fn read_scan_log(path: &Path) -> Result<Vec<ScanRecord>> {
    let rd = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut header_seen = false;
    for (idx, line) in rd.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line != SCAN_COLUMNS.join(",") {
                return Err(Error::Config(format!(
                    "scan log {}: unexpected header '{line}'",
                    path.display()
                )));
            }
            header_seen = true;
            continue;
        }
        let mut f = [0.0; 10];
        let mut parts = line.split(',');
        for (k, slot) in f.iter_mut().enumerate() {
            let cell = parts.next().ok_or_else(|| {
                Error::Config(format!(
                    "scan log {} line {}: expected 10 cells, got {k}",
                    path.display(),
                    idx + 1
                ))
            })?;
            *slot = cell.trim().parse::<f64>().map_err(|e| {
                Error::Config(format!("scan log {} line {}: {e}", path.display(), idx + 1))
            })?;
        }
        if parts.next().is_some() {
            return Err(Error::Config(format!(
                "scan log {} line {}: more than 10 cells",
                path.display(),
                idx + 1
            )));
        }
        records.push(ScanRecord {
            t: f[0],
            rho: Vec3::new(f[1], f[2], f[3]),
            eta: Quat { v: Vec3::new(f[4], f[5], f[6]), s: f[7] },
            eps: f[8],
            m_used: f[9] as usize,
        });
    }
    if !header_seen {
        return Err(Error::Config(format!(
            "scan log {}: no header row",
            path.display()
        )));
    }
    Ok(records)
}

pub fn write_estimator_trace(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = CsvWriter::create(
        path,
        &[
            "belief mean and filter diagnostics, one row per measurement epoch",
            "t (s), accepted (1 taken, 0 gated), eps (m^2), nis (dimensionless), conv (covariance Frobenius norm)",
            "q (target attitude, x y z s), w (rad/s), pos (m), vel (m/s), sig (inertia ratios), grasp (m, body), mu (misalignment, x y z s)",
        ],
        &[
            "t", "accepted", "eps", "nis", "conv", "q_x", "q_y", "q_z", "q_s", "w_x", "w_y",
            "w_z", "pos_x", "pos_y", "pos_z", "vel_x", "vel_y", "vel_z", "sig_1", "sig_2",
            "grasp_x", "grasp_y", "grasp_z", "mu_x", "mu_y", "mu_z", "mu_s",
        ],
    )?;
    for r in records {
        w.row(&[
            r.t,
            r.accepted as u8 as f64,
            r.eps,
            r.nis,
            r.conv,
            r.q.v.x,
            r.q.v.y,
            r.q.v.z,
            r.q.s,
            r.w.x,
            r.w.y,
            r.w.z,
            r.pos.x,
            r.pos.y,
            r.pos.z,
            r.vel.x,
            r.vel.y,
            r.vel.z,
            r.sig.s1,
            r.sig.s2,
            r.grasp.x,
            r.grasp.y,
            r.grasp.z,
            r.mu.v.x,
            r.mu.v.y,
            r.mu.v.z,
            r.mu.s,
        ])?;
    }
    w.finish()
}

pub fn write_mission_trace(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = CsvWriter::create(
        path,
        &[
            "mission loop samples",
            "t (s), phase (0 learning, 1 pre-capture, 2 post-capture, 3 done, 4 aborted)",
            "r end-effector (m), v (m/s), accel commanded (m/s^2), fixture_* true fixture (m, m/s)",
            "separation (m), rel_speed (m/s), occluded (1 trigger active)",
        ],
        &[
            "t", "phase", "r_x", "r_y", "r_z", "v_x", "v_y", "v_z", "accel_x", "accel_y",
            "accel_z", "fixture_x", "fixture_y", "fixture_z", "fixture_vx", "fixture_vy",
            "fixture_vz", "separation", "rel_speed", "occluded",
        ],
    )?;
    for r in records {
        w.row(&[
            r.t,
            r.phase as f64,
            r.r.x,
            r.r.y,
            r.r.z,
            r.v.x,
            r.v.y,
            r.v.z,
            r.accel.x,
            r.accel.y,
            r.accel.z,
            r.fixture_pos.x,
            r.fixture_pos.y,
            r.fixture_pos.z,
            r.fixture_vel.x,
            r.fixture_vel.y,
            r.fixture_vel.z,
            r.separation,
            r.rel_speed,
            r.occluded as u8 as f64,
        ])?;
    }
    w.finish()
}

pub fn write_approach_plan(path: &Path, plan: &PreCapturePlan) -> Result<()> {
    let mut w = CsvWriter::create(
        path,
        &[
            "approach plan samples",
            "t (s), r end-effector (m), v (m/s), accel (m/s^2), rho predicted fixture (m), rho_dot (m/s), cos_alpha (sight-line alignment)",
        ],
        &[
            "t", "r_x", "r_y", "r_z", "v_x", "v_y", "v_z", "accel_x", "accel_y", "accel_z",
            "rho_x", "rho_y", "rho_z", "rho_dot_x", "rho_dot_y", "rho_dot_z", "cos_alpha",
        ],
    )?;
    for s in &plan.samples {
        w.row(&[
            s.t,
            s.r.x,
            s.r.y,
            s.r.z,
            s.v.x,
            s.v.y,
            s.v.z,
            s.accel.x,
            s.accel.y,
            s.accel.z,
            s.rho.x,
            s.rho.y,
            s.rho.z,
            s.rho_dot.x,
            s.rho_dot.y,
            s.rho_dot.z,
            s.cos_alpha,
        ])?;
    }
    w.finish()
}

pub fn write_detumble_plan(path: &Path, plan: &DetumblePlan) -> Result<()> {
    let mut w = CsvWriter::create(
        path,
        &[
            "detumble plan samples",
            "t (s), v body velocity (m/s), w body rate (rad/s), f force (N), tau torque (N m)",
            "f_norm (N), tau_norm (N m), h2 (Hamiltonian, dimensionless)",
        ],
        &[
            "t", "v_x", "v_y", "v_z", "w_x", "w_y", "w_z", "f_x", "f_y", "f_z", "tau_x",
            "tau_y", "tau_z", "f_norm", "tau_norm", "h2",
        ],
    )?;
    for s in &plan.samples {
        w.row(&[
            s.t,
            s.v.x,
            s.v.y,
            s.v.z,
            s.w.x,
            s.w.y,
            s.w.z,
            s.f.x,
            s.f.y,
            s.f.z,
            s.tau.x,
            s.tau.y,
            s.tau.z,
            s.f.norm(),
            s.tau.norm(),
            s.h2,
        ])?;
    }
    w.finish()
}

/// Pretty-printed JSON document with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)
        .map_err(|e| Error::Config(format!("JSON serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn demo_scans() -> Vec<ScanRecord> {
        vec![
            ScanRecord {
                t: 0.0,
                rho: Vec3::new(2.7123456789012345, 0.4, -0.3),
                eta: Quat::from_axis_angle(&Vec3::new(0.2, -0.7, 0.4), 1.1),
                eps: 3.5e-6,
                m_used: 29,
            },
            ScanRecord {
                t: 0.5,
                rho: Vec3::new(2.71, 0.41, -0.29),
                eta: Quat::from_axis_angle(&Vec3::new(0.2, -0.7, 0.41), 1.12),
                eps: 1.0 / 3.0,
                m_used: 17,
            },
        ]
    }

    #[test]
    fn scan_log_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan_log.csv");
        let recs = demo_scans();
        write_scan_log(&path, &recs).unwrap();
        let back = read_scan_log(&path).unwrap();
        assert_eq!(back.len(), recs.len());
        for (a, b) in back.iter().zip(&recs) {
            // Shortest round-trip printing makes re-parsed floats bitwise
            // equal, not merely close.
            assert_eq!(a.t.to_bits(), b.t.to_bits());
            for k in 0..3 {
                assert_eq!(a.rho[k].to_bits(), b.rho[k].to_bits());
                assert_eq!(a.eta.v[k].to_bits(), b.eta.v[k].to_bits());
            }
            assert_eq!(a.eta.s.to_bits(), b.eta.s.to_bits());
            assert_eq!(a.eps.to_bits(), b.eps.to_bits());
            assert_eq!(a.m_used, b.m_used);
        }
    }

    #[test]
    fn scan_log_reader_rejects_foreign_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "# comment\nt,x,y\n0,1,2\n").unwrap();
        assert!(read_scan_log(&path).is_err());
        std::fs::write(&path, "# only comments\n").unwrap();
        assert!(read_scan_log(&path).is_err());
    }

    #[test]
    fn csv_files_start_with_units_then_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan_log.csv");
        write_scan_log(&path, &demo_scans()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with('#'));
        assert!(lines.find(|l| !l.starts_with('#')).unwrap().starts_with("t,"));
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 3);
    }

    #[test]
    fn identical_records_produce_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_scan_log(&p1, &demo_scans()).unwrap();
        write_scan_log(&p2, &demo_scans()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn json_snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.json");
        let snap = DetumbleSnapshot {
            t: 97.5,
            v: Vec3::new(0.01, -0.02, 0.005),
            w: Vec3::new(0.03, -0.06, 0.01),
            q: Quat::from_axis_angle(&Vec3::new(0.2, -0.7, 0.4), 1.1),
            sig: InertiaRatios::new(-0.5, 0.6).unwrap(),
            grasp: Vec3::new(-0.25, -0.1, 0.05),
        };
        write_json(&path, &snap).unwrap();
        let back: DetumbleSnapshot = read_json(&path).unwrap();
        assert_abs_diff_eq!(back.v, snap.v);
        assert_abs_diff_eq!(back.q.s, snap.q.s);
        assert_abs_diff_eq!(back.sig.s1, snap.sig.s1);
        assert_eq!(back.t.to_bits(), snap.t.to_bits());
    }

    #[test]
    fn config_hash_is_stable_and_content_sensitive() {
        let a = config_hash("sim.dt = 0.01\n");
        assert_eq!(a, config_hash("sim.dt = 0.01\n"));
        assert_ne!(a, config_hash("sim.dt = 0.02\n"));
        assert_eq!(a.len(), 16);
    }
}
