//! Scenario configuration: one flat text file of `section.key = value`
//! lines describes a full mission.
//!
//! Layout notes. The format is deliberately primitive: '#' starts a comment
//! anywhere on a line, blank lines are skipped, every value is SI, vectors
//! are space-separated components, quaternions are `x y z s` (vector first,
//! scalar last, matching the attitude algebra). Unknown keys are errors, not
//! warnings, so a typo cannot silently fall back to a default. Parsing
//! applies overrides onto [`ScenarioConfig::default`], which is itself the
//! nominal tumbling-capture scenario; an empty file is a valid config.
//!
//! [`ScenarioConfig::to_text`] is the canonical serialization: it emits
//! every key in a fixed order with unit comments, and `from_text` of that
//! text reproduces the struct exactly (floats print in shortest round-trip
//! form). The mission echoes this canonical text into its event log, so a
//! recorded run can be re-parsed and re-run without the original file.

use crate::detumble::DetumbleConfig;
use crate::dynamics::{PrincipalInertia, TargetParams, TargetState};
use crate::error::Error;
use crate::rendezvous::PlannerConfig;
use crate::so3::{Quat, Vec3};
use crate::Result;

/// Fixed-step loop, phase thresholds, and capture envelopes.
#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Integrator step of the mission loop (s).
    pub dt: f64,
    /// Measurement (and re-planning) rate (Hz); the period must be an
    /// integer multiple of `dt`.
    pub measurement_hz: f64,
    /// Hard mission time limit (s); exceeding it aborts the run.
    pub max_duration: f64,
    /// Wait between estimator convergence and approach start (s).
    pub margin: f64,
    /// Learning ends when the belief covariance Frobenius norm falls below
    /// this threshold.
    pub convergence_threshold: f64,
    /// Capture position envelope (m).
    pub capture_pos_tol: f64,
    /// Capture relative-speed envelope (m/s).
    pub capture_vel_tol: f64,
    /// Extra time past the planned intercept before declaring a miss (s).
    pub capture_grace: f64,
    /// Independent missions per invocation (seeds derived from the base).
    pub batch_runs: usize,
    /// Emit every n-th loop step into the mission trace.
    pub trace_stride: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.01,
            measurement_hz: 2.0,
            max_duration: 600.0,
            margin: 5.0,
            convergence_threshold: 0.02,
            capture_pos_tol: 0.04,
            capture_vel_tol: 0.01,
            capture_grace: 10.0,
            batch_runs: 1,
            trace_stride: 10,
        }
    }
}

/// Target truth: mass properties and the initial kinematic state.
#[derive(Debug, Clone)]
pub struct TargetConfig {
    pub mass: f64,
    pub inertia: PrincipalInertia,
    /// Grasp fixture offset from the center of mass, body frame (m).
    pub grasp_offset: Vec3,
    /// Fixture frame misalignment relative to the body frame.
    pub fixture_misalign: Quat,
    pub q0: Quat,
    /// Initial body rate (rad/s).
    pub w0: Vec3,
    /// Initial center-of-mass position, camera frame (m).
    pub pos0: Vec3,
    /// Initial center-of-mass velocity (m/s).
    pub vel0: Vec3,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            mass: 1500.0,
            inertia: PrincipalInertia { ixx: 450.0, iyy: 562.5, izz: 787.5 },
            grasp_offset: Vec3::new(-0.25, -0.1, 0.05),
            fixture_misalign: Quat::IDENTITY,
            q0: Quat::IDENTITY,
            w0: Vec3::new(0.02, -0.045, 0.03),
            pos0: Vec3::new(2.8, 0.4, -0.3),
            vel0: Vec3::new(-0.002, 0.001, 0.0015),
        }
    }
}

impl TargetConfig {
    pub fn params(&self) -> TargetParams {
        TargetParams {
            mass: self.mass,
            inertia: self.inertia,
            grasp_offset: self.grasp_offset,
            fixture_misalign: self.fixture_misalign,
        }
    }

    pub fn initial_state(&self) -> TargetState {
        TargetState { q: self.q0, w: self.w0, pos: self.pos0, vel: self.vel0 }
    }
}

/// Chaser end-effector initial kinematics (camera frame).
#[derive(Debug, Clone)]
pub struct ChaserConfig {
    pub r0: Vec3,
    pub v0: Vec3,
}

impl Default for ChaserConfig {
    fn default() -> Self {
        ChaserConfig { r0: Vec3::new(0.4, -1.6, 0.8), v0: Vec3::zeros() }
    }
}

/// Vision sensor model and its calibration budget.
#[derive(Debug, Clone)]
pub struct VisionConfig {
    /// Per-axis scan noise standard deviation (m).
    pub noise_std: f64,
    /// Baseline outlier fraction of every scan.
    pub outlier_rate: f64,
    /// Registration trials behind the measurement covariance and the
    /// fit-error gate threshold.
    pub calibration_trials: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig { noise_std: 0.002, outlier_rate: 0.0, calibration_trials: 64 }
    }
}

/// When the manipulator corrupts the view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionMode {
    /// Never.
    Off,
    /// Geometry-driven: end-effector inside the camera-target sight cone or
    /// closer to the fixture than the range threshold.
    Auto,
    /// Scripted time window.
    Fixed,
}

impl OcclusionMode {
    fn as_str(&self) -> &'static str {
        match self {
            OcclusionMode::Off => "off",
            OcclusionMode::Auto => "auto",
            OcclusionMode::Fixed => "fixed",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(OcclusionMode::Off),
            "auto" => Ok(OcclusionMode::Auto),
            "fixed" => Ok(OcclusionMode::Fixed),
            other => Err(Error::Config(format!(
                "occlusion mode must be off, auto, or fixed, got '{other}'"
            ))),
        }
    }
}

/// Occlusion trigger geometry and the scan corruption it injects.
#[derive(Debug, Clone)]
pub struct OcclusionConfig {
    pub mode: OcclusionMode,
    /// Auto mode: half-angle of the sight cone (rad).
    pub cone_half_angle: f64,
    /// Auto mode: end-effector-to-fixture range threshold (m).
    pub range: f64,
    /// Fixed mode: window start and end (s).
    pub window_start: f64,
    pub window_end: f64,
    /// Angular sector of returns shadowed while triggered.
    pub fraction: f64,
    /// Fraction of surviving returns replaced by manipulator-surface hits
    /// while triggered; this is what drives the fit error over its gate.
    pub outlier_rate: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            mode: OcclusionMode::Auto,
            cone_half_angle: 10.0_f64.to_radians(),
            range: 0.5,
            window_start: 0.0,
            window_end: 0.0,
            fraction: 0.4,
            outlier_rate: 0.3,
        }
    }
}

/// Filter disturbance densities and the fault-gate switch. The measurement
/// covariance and the gate threshold themselves come from the calibration
/// pass at mission start, not from the file.
#[derive(Debug, Clone)]
pub struct FilterKnobs {
    /// Angular disturbance density (rad/s^2 per sqrt(Hz)).
    pub sigma_tau: f64,
    /// Linear disturbance density (m/s^2 per sqrt(Hz)).
    pub sigma_f: f64,
    /// Joseph-form covariance updates.
    pub joseph: bool,
    /// False runs the filter with the fit-error gate wide open.
    pub gate_enabled: bool,
}

impl Default for FilterKnobs {
    fn default() -> Self {
        FilterKnobs { sigma_tau: 1e-4, sigma_f: 1e-4, joseph: false, gate_enabled: true }
    }
}

/// Input files for the single-stage subcommands; a full mission run needs
/// none of them and records fresh ones instead.
#[derive(Debug, Clone, Default)]
pub struct StageInputs {
    /// Recorded scan log replayed by the estimate stage.
    pub scan_log: Option<String>,
    /// Belief plus chaser snapshot consumed by the approach-planning stage.
    pub approach_snapshot: Option<String>,
    /// Hand-off state snapshot consumed by the detumble-planning stage.
    pub detumble_snapshot: Option<String>,
}

/// Everything a mission run needs besides the seed.
#[derive(Debug, Clone, Default)]
pub struct ScenarioConfig {
    pub sim: SimConfig,
    pub target: TargetConfig,
    pub chaser: ChaserConfig,
    pub vision: VisionConfig,
    pub occlusion: OcclusionConfig,
    pub filter: FilterKnobs,
    pub approach: PlannerConfig,
    pub detumble: DetumbleConfig,
    pub stage: StageInputs,
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|e| Error::Config(format!("{key}: {e} in '{v}'")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|e| Error::Config(format!("{key}: {e} in '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true or false, got '{other}'"))),
    }
}

fn parse_components<const N: usize>(key: &str, v: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = v.split_whitespace().collect();
    if parts.len() != N {
        return Err(Error::Config(format!(
            "{key}: expected {N} components, got {} in '{v}'",
            parts.len()
        )));
    }
    let mut out = [0.0; N];
    for (i, p) in parts.iter().enumerate() {
        out[i] = parse_f64(key, p)?;
    }
    Ok(out)
}

fn parse_vec3(key: &str, v: &str) -> Result<Vec3> {
    let c = parse_components::<3>(key, v)?;
    Ok(Vec3::new(c[0], c[1], c[2]))
}

fn parse_quat(key: &str, v: &str) -> Result<Quat> {
    let c = parse_components::<4>(key, v)?;
    let q = Quat { v: Vec3::new(c[0], c[1], c[2]), s: c[3] };
    let n = (q.v.norm_squared() + q.s * q.s).sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("{key}: quaternion norm {n} is not 1")));
    }
    Ok(q)
}

fn fmt_vec3(v: &Vec3) -> String {
    format!("{} {} {}", v.x, v.y, v.z)
}

fn fmt_quat(q: &Quat) -> String {
    format!("{} {} {} {}", q.v.x, q.v.y, q.v.z, q.s)
}

impl ScenarioConfig {
    /// Parse overrides onto the default scenario. Errors carry the
    /// offending line number.
    pub fn from_text(text: &str) -> Result<ScenarioConfig> {
        let mut cfg = ScenarioConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'section.key = value'", idx + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", idx + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and parse a config file.
    pub fn load(path: &std::path::Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path)?;
        ScenarioConfig::from_text(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "sim.dt" => self.sim.dt = parse_f64(key, v)?,
            "sim.measurement_hz" => self.sim.measurement_hz = parse_f64(key, v)?,
            "sim.max_duration" => self.sim.max_duration = parse_f64(key, v)?,
            "sim.margin" => self.sim.margin = parse_f64(key, v)?,
            "sim.convergence_threshold" => self.sim.convergence_threshold = parse_f64(key, v)?,
            "sim.capture_pos_tol" => self.sim.capture_pos_tol = parse_f64(key, v)?,
            "sim.capture_vel_tol" => self.sim.capture_vel_tol = parse_f64(key, v)?,
            "sim.capture_grace" => self.sim.capture_grace = parse_f64(key, v)?,
            "sim.batch_runs" => self.sim.batch_runs = parse_usize(key, v)?,
            "sim.trace_stride" => self.sim.trace_stride = parse_usize(key, v)?,

            "target.mass" => self.target.mass = parse_f64(key, v)?,
            "target.inertia" => {
                let c = parse_components::<3>(key, v)?;
                self.target.inertia = PrincipalInertia { ixx: c[0], iyy: c[1], izz: c[2] };
            }
            "target.grasp_offset" => self.target.grasp_offset = parse_vec3(key, v)?,
            "target.fixture_misalign" => self.target.fixture_misalign = parse_quat(key, v)?,
            "target.q0" => self.target.q0 = parse_quat(key, v)?,
            "target.w0" => self.target.w0 = parse_vec3(key, v)?,
            "target.pos0" => self.target.pos0 = parse_vec3(key, v)?,
            "target.vel0" => self.target.vel0 = parse_vec3(key, v)?,

            "chaser.r0" => self.chaser.r0 = parse_vec3(key, v)?,
            "chaser.v0" => self.chaser.v0 = parse_vec3(key, v)?,

            "vision.noise_std" => self.vision.noise_std = parse_f64(key, v)?,
            "vision.outlier_rate" => self.vision.outlier_rate = parse_f64(key, v)?,
            "vision.calibration_trials" => self.vision.calibration_trials = parse_usize(key, v)?,

            "occlusion.mode" => self.occlusion.mode = OcclusionMode::parse(v)?,
            "occlusion.cone_half_angle" => self.occlusion.cone_half_angle = parse_f64(key, v)?,
            "occlusion.range" => self.occlusion.range = parse_f64(key, v)?,
            "occlusion.window_start" => self.occlusion.window_start = parse_f64(key, v)?,
            "occlusion.window_end" => self.occlusion.window_end = parse_f64(key, v)?,
            "occlusion.fraction" => self.occlusion.fraction = parse_f64(key, v)?,
            "occlusion.outlier_rate" => self.occlusion.outlier_rate = parse_f64(key, v)?,

            "filter.sigma_tau" => self.filter.sigma_tau = parse_f64(key, v)?,
            "filter.sigma_f" => self.filter.sigma_f = parse_f64(key, v)?,
            "filter.joseph" => self.filter.joseph = parse_bool(key, v)?,
            "filter.gate_enabled" => self.filter.gate_enabled = parse_bool(key, v)?,

            "approach.a_max" => self.approach.a_max = parse_f64(key, v)?,
            "approach.los_weight" => self.approach.los_weight = parse_f64(key, v)?,
            "approach.fixture_normal" => self.approach.fixture_normal = parse_vec3(key, v)?,
            "approach.tol" => self.approach.tol = parse_f64(key, v)?,
            "approach.max_iter" => self.approach.max_iter = parse_usize(key, v)?,
            "approach.fd_step" => self.approach.fd_step = parse_f64(key, v)?,
            "approach.dt" => self.approach.dt = parse_f64(key, v)?,
            "approach.sample_dt" => self.approach.sample_dt = parse_f64(key, v)?,

            "detumble.f_max" => self.detumble.limits.f_max = parse_f64(key, v)?,
            "detumble.tau_max" => self.detumble.limits.tau_max = parse_f64(key, v)?,
            "detumble.a_2max" => self.detumble.limits.a_2max = parse_f64(key, v)?,
            "detumble.gamma_max" => self.detumble.limits.gamma_max = parse_f64(key, v)?,
            "detumble.kappa" => self.detumble.limits.kappa = parse_f64(key, v)?,
            "detumble.dt" => self.detumble.dt = parse_f64(key, v)?,
            "detumble.sample_dt" => self.detumble.sample_dt = parse_f64(key, v)?,
            "detumble.tol" => self.detumble.tol = parse_f64(key, v)?,
            "detumble.rest_tol" => self.detumble.rest_tol = parse_f64(key, v)?,
            "detumble.max_iter" => self.detumble.max_iter = parse_usize(key, v)?,
            "detumble.fd_step" => self.detumble.fd_step = parse_f64(key, v)?,

            "stage.scan_log" => self.stage.scan_log = Some(v.to_string()),
            "stage.approach_snapshot" => self.stage.approach_snapshot = Some(v.to_string()),
            "stage.detumble_snapshot" => self.stage.detumble_snapshot = Some(v.to_string()),

            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Canonical serialization: every key, fixed order, unit comments.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(4096);
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };

        line("# mission loop, thresholds, envelopes (s, m, m/s)", String::new());
        let sim = &self.sim;
        line("sim.dt", sim.dt.to_string());
        line("sim.measurement_hz", sim.measurement_hz.to_string());
        line("sim.max_duration", sim.max_duration.to_string());
        line("sim.margin", sim.margin.to_string());
        line("sim.convergence_threshold", sim.convergence_threshold.to_string());
        line("sim.capture_pos_tol", sim.capture_pos_tol.to_string());
        line("sim.capture_vel_tol", sim.capture_vel_tol.to_string());
        line("sim.capture_grace", sim.capture_grace.to_string());
        line("sim.batch_runs", sim.batch_runs.to_string());
        line("sim.trace_stride", sim.trace_stride.to_string());

        line("# target truth (kg, kg m^2, m, rad/s, m/s; quaternions x y z s)", String::new());
        let t = &self.target;
        line("target.mass", t.mass.to_string());
        line(
            "target.inertia",
            format!("{} {} {}", t.inertia.ixx, t.inertia.iyy, t.inertia.izz),
        );
        line("target.grasp_offset", fmt_vec3(&t.grasp_offset));
        line("target.fixture_misalign", fmt_quat(&t.fixture_misalign));
        line("target.q0", fmt_quat(&t.q0));
        line("target.w0", fmt_vec3(&t.w0));
        line("target.pos0", fmt_vec3(&t.pos0));
        line("target.vel0", fmt_vec3(&t.vel0));

        line("# chaser end-effector start (m, m/s)", String::new());
        line("chaser.r0", fmt_vec3(&self.chaser.r0));
        line("chaser.v0", fmt_vec3(&self.chaser.v0));

        line("# vision sensor (m)", String::new());
        let v = &self.vision;
        line("vision.noise_std", v.noise_std.to_string());
        line("vision.outlier_rate", v.outlier_rate.to_string());
        line("vision.calibration_trials", v.calibration_trials.to_string());

        line("# occlusion trigger and injected corruption (rad, m, s)", String::new());
        let o = &self.occlusion;
        line("occlusion.mode", o.mode.as_str().to_string());
        line("occlusion.cone_half_angle", o.cone_half_angle.to_string());
        line("occlusion.range", o.range.to_string());
        line("occlusion.window_start", o.window_start.to_string());
        line("occlusion.window_end", o.window_end.to_string());
        line("occlusion.fraction", o.fraction.to_string());
        line("occlusion.outlier_rate", o.outlier_rate.to_string());

        line("# filter disturbance densities and gate switch", String::new());
        let f = &self.filter;
        line("filter.sigma_tau", f.sigma_tau.to_string());
        line("filter.sigma_f", f.sigma_f.to_string());
        line("filter.joseph", f.joseph.to_string());
        line("filter.gate_enabled", f.gate_enabled.to_string());

        line("# approach planner (m/s^2, s)", String::new());
        let a = &self.approach;
        line("approach.a_max", a.a_max.to_string());
        line("approach.los_weight", a.los_weight.to_string());
        line("approach.fixture_normal", fmt_vec3(&a.fixture_normal));
        line("approach.tol", a.tol.to_string());
        line("approach.max_iter", a.max_iter.to_string());
        line("approach.fd_step", a.fd_step.to_string());
        line("approach.dt", a.dt.to_string());
        line("approach.sample_dt", a.sample_dt.to_string());

        line("# detumble planner (N, N m, m/s^2, rad/s^2, m, s)", String::new());
        let d = &self.detumble;
        line("detumble.f_max", d.limits.f_max.to_string());
        line("detumble.tau_max", d.limits.tau_max.to_string());
        line("detumble.a_2max", d.limits.a_2max.to_string());
        line("detumble.gamma_max", d.limits.gamma_max.to_string());
        line("detumble.kappa", d.limits.kappa.to_string());
        line("detumble.dt", d.dt.to_string());
        line("detumble.sample_dt", d.sample_dt.to_string());
        line("detumble.tol", d.tol.to_string());
        line("detumble.rest_tol", d.rest_tol.to_string());
        line("detumble.max_iter", d.max_iter.to_string());
        line("detumble.fd_step", d.fd_step.to_string());

        if self.stage.scan_log.is_some()
            || self.stage.approach_snapshot.is_some()
            || self.stage.detumble_snapshot.is_some()
        {
            line("# stage-subcommand inputs", String::new());
            if let Some(p) = &self.stage.scan_log {
                line("stage.scan_log", p.clone());
            }
            if let Some(p) = &self.stage.approach_snapshot {
                line("stage.approach_snapshot", p.clone());
            }
            if let Some(p) = &self.stage.detumble_snapshot {
                line("stage.detumble_snapshot", p.clone());
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let sim = &self.sim;
        for (name, v) in [
            ("sim.dt", sim.dt),
            ("sim.measurement_hz", sim.measurement_hz),
            ("sim.max_duration", sim.max_duration),
            ("sim.convergence_threshold", sim.convergence_threshold),
            ("sim.capture_pos_tol", sim.capture_pos_tol),
            ("sim.capture_vel_tol", sim.capture_vel_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("sim.margin", sim.margin),
            ("sim.capture_grace", sim.capture_grace),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        let period = 1.0 / sim.measurement_hz;
        let steps = period / sim.dt;
        if (steps - steps.round()).abs() > 1e-9 || steps.round() < 1.0 {
            return Err(Error::Config(format!(
                "measurement period {period} s must be an integer multiple of sim.dt {}",
                sim.dt
            )));
        }
        if sim.batch_runs == 0 {
            return Err(Error::Config("sim.batch_runs must be at least 1".into()));
        }
        if sim.trace_stride == 0 {
            return Err(Error::Config("sim.trace_stride must be at least 1".into()));
        }

        self.target.params().validate().map_err(cfg_err)?;

        let v = &self.vision;
        if !(v.noise_std.is_finite() && v.noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "vision.noise_std must be non-negative, got {}",
                v.noise_std
            )));
        }
        if !(0.0..=1.0).contains(&v.outlier_rate) {
            return Err(Error::Config(format!(
                "vision.outlier_rate must be in [0, 1], got {}",
                v.outlier_rate
            )));
        }
        if v.calibration_trials < 8 {
            return Err(Error::Config(format!(
                "vision.calibration_trials must be at least 8, got {}",
                v.calibration_trials
            )));
        }

        let o = &self.occlusion;
        if !(o.cone_half_angle.is_finite() && o.cone_half_angle > 0.0) {
            return Err(Error::Config(format!(
                "occlusion.cone_half_angle must be positive, got {}",
                o.cone_half_angle
            )));
        }
        if !(o.range.is_finite() && o.range >= 0.0) {
            return Err(Error::Config(format!(
                "occlusion.range must be non-negative, got {}",
                o.range
            )));
        }
        if o.mode == OcclusionMode::Fixed && o.window_end < o.window_start {
            return Err(Error::Config(format!(
                "occlusion window end {} precedes start {}",
                o.window_end, o.window_start
            )));
        }
        for (name, r) in [
            ("occlusion.fraction", o.fraction),
            ("occlusion.outlier_rate", o.outlier_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {r}")));
            }
        }

        let f = &self.filter;
        if !(f.sigma_tau.is_finite() && f.sigma_tau > 0.0)
            || !(f.sigma_f.is_finite() && f.sigma_f > 0.0)
        {
            return Err(Error::Config(format!(
                "filter disturbance densities must be positive, got {} and {}",
                f.sigma_tau, f.sigma_f
            )));
        }

        self.approach.validate().map_err(cfg_err)?;
        self.detumble.validate().map_err(cfg_err)?;
        Ok(())
    }
}

fn cfg_err(e: Error) -> Error {
    Error::Config(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn default_scenario_is_valid() {
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_text_parses_to_default() {
        let cfg = ScenarioConfig::from_text("").unwrap();
        assert_eq!(cfg.to_text(), ScenarioConfig::default().to_text());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = ScenarioConfig::default();
        cfg.sim.dt = 0.005;
        cfg.sim.batch_runs = 3;
        cfg.target.w0 = Vec3::new(0.031, -0.062, 0.0125);
        cfg.occlusion.mode = OcclusionMode::Fixed;
        cfg.occlusion.window_start = 80.0;
        cfg.occlusion.window_end = 95.5;
        cfg.filter.gate_enabled = false;
        cfg.detumble.rest_tol = 2e-4;
        cfg.stage.scan_log = Some("runs/scan_log.csv".into());
        let text = cfg.to_text();
        let back = ScenarioConfig::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = ScenarioConfig::from_text(
            "# a full-line comment\n\n  sim.dt = 0.02  # trailing comment\n\ttarget.mass = 900\n",
        )
        .unwrap();
        assert_abs_diff_eq!(cfg.sim.dt, 0.02);
        assert_abs_diff_eq!(cfg.target.mass, 900.0);
    }

    #[test]
    fn vectors_and_quaternions_parse_componentwise() {
        let cfg = ScenarioConfig::from_text(
            "target.w0 = 0.1 -0.2 0.3\ntarget.q0 = 0 0.6 0 0.8\n",
        )
        .unwrap();
        assert_abs_diff_eq!(cfg.target.w0, Vec3::new(0.1, -0.2, 0.3));
        assert_abs_diff_eq!(cfg.target.q0.v.y, 0.6);
        assert_abs_diff_eq!(cfg.target.q0.s, 0.8);
    }

    #[test]
    fn unknown_key_is_an_error_with_line_number() {
        let err = ScenarioConfig::from_text("sim.dt = 0.01\nsim.dtt = 0.01\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("sim.dtt"), "{msg}");
    }

    #[test]
    fn malformed_values_are_errors() {
        for bad in [
            "sim.dt = fast",
            "target.w0 = 0.1 0.2",
            "target.q0 = 0 0 0 2",
            "filter.joseph = yes",
            "occlusion.mode = sometimes",
            "sim.dt",
        ] {
            assert!(
                ScenarioConfig::from_text(bad).is_err(),
                "'{bad}' should not parse"
            );
        }
    }

    #[test]
    fn cross_field_validation_rejects_bad_scenarios() {
        for bad in [
            "sim.capture_pos_tol = 0",
            "sim.batch_runs = 0",
            "sim.measurement_hz = 3", // 1/3 s is not a multiple of dt = 0.01
            "vision.outlier_rate = 1.5",
            "occlusion.mode = fixed\nocclusion.window_start = 10\nocclusion.window_end = 5",
            "target.inertia = 100 100 300", // violates the triangle bound
            "detumble.rest_tol = 1e-9",     // undercuts the Newton target
        ] {
            assert!(
                ScenarioConfig::from_text(bad).is_err(),
                "'{bad}' should fail validation"
            );
        }
    }

    #[test]
    fn stage_inputs_default_to_none_and_round_trip() {
        let cfg = ScenarioConfig::default();
        assert!(cfg.stage.scan_log.is_none());
        assert!(!cfg.to_text().contains("stage."));
        let cfg = ScenarioConfig::from_text("stage.detumble_snapshot = snap.json\n").unwrap();
        assert_eq!(cfg.stage.detumble_snapshot.as_deref(), Some("snap.json"));
        let text = cfg.to_text();
        assert!(text.contains("stage.detumble_snapshot = snap.json"));
        assert_eq!(ScenarioConfig::from_text(&text).unwrap().to_text(), text);
    }
}
