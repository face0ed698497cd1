//! Simulation stack for vision-guided capture and stabilization of a
//! free-tumbling, non-cooperative space object.
//!
//! The pipeline mirrors the mission timeline:
//!
//! 1. [`vision`] - synthetic range scans of the target and point-cloud pose
//!    registration (q-method), producing pose measurements and a fit error
//!    used for fault gating.
//! 2. [`estimator`] - constrained multiplicative EKF that learns the target
//!    state together with its inertial parameters (inertia ratios, grasp
//!    fixture offset and misalignment).
//! 3. [`rendezvous`] - minimum-time approach planner driving the end effector
//!    to a moving grasp point with a terminal line-of-sight objective.
//! 4. [`detumble`] - post-capture minimum-time detumble planner for the
//!    combined stack under force/torque bounds.
//! 5. [`mission`] - supervisor tying the phases together on a fixed-step
//!    clock with occlusion fault injection and event logging.
//!
//! [`so3`] and [`dynamics`] carry the attitude algebra and the dimensionless
//! torque-free dynamics everything else is built on. All randomness is
//! derived from a single 64-bit seed via [`rng`]; a run is reproducible
//! byte-for-byte from `(config, seed)`.

pub mod config;
pub mod detumble;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod mission;
pub mod parallel;
pub mod rendezvous;
pub mod rng;
pub mod so3;
pub mod trace;
pub mod vision;

pub use error::Error;
pub use so3::{Mat3, Quat, Vec3};

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
