//! Spherical pendulum model of a swaying pole head.
//!
//! θ̈ = φ̇² sinθ cosθ − (g/r) sinθ
//! φ̈ = −2 φ̇ θ̇ cosθ / sinθ
//!
//! Gravity is inverted in the sense that the rod is anchored at the ground
//! and the sensor sits at its top; the deflection dynamics are the usual
//! ones in (θ, φ). Negative θ is allowed and equivalent to (|θ|, φ + π).

use lidarfuse_core::geom::axis_angle_matrix;
use lidarfuse_core::{Point3, RigidTransform};
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const GRAVITY: f64 = 9.81;
/// Smallest |θ| at which the right-hand side is evaluated.
pub const THETA_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    pub theta: f64,
    pub phi: f64,
    pub theta_dot: f64,
    pub phi_dot: f64,
}

impl PendulumState {
    pub const REST: PendulumState = PendulumState {
        theta: 0.0,
        phi: 0.0,
        theta_dot: 0.0,
        phi_dot: 0.0,
    };

    fn to_array(self) -> [f64; 4] {
        [self.theta, self.phi, self.theta_dot, self.phi_dot]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self {
            theta: a[0],
            phi: a[1],
            theta_dot: a[2],
            phi_dot: a[3],
        }
    }

    /// Initial values drawn uniformly from the ranges
    /// φ ∈ [0, 0.7π], φ̇ ∈ [−0.2π, 0.2π], θ ∈ [−0.02π, 0.02π], θ̇ ∈ [−0.01π, 0.01π].
    pub fn sample_initial(rng: &mut impl Rng) -> Self {
        use std::f64::consts::PI;
        Self {
            phi: rng.gen_range(0.0..=0.7 * PI),
            phi_dot: rng.gen_range(-0.2 * PI..=0.2 * PI),
            theta: rng.gen_range(-0.02 * PI..=0.02 * PI),
            theta_dot: rng.gen_range(-0.01 * PI..=0.01 * PI),
        }
    }

    /// Energy per unit mass and r², `½(θ̇² + φ̇² sin²θ) − (g/r) cosθ`.
    pub fn energy(&self, g: f64, r: f64) -> f64 {
        let s = self.theta.sin();
        0.5 * (self.theta_dot.powi(2) + self.phi_dot.powi(2) * s * s) - g / r * self.theta.cos()
    }

    /// Vertical angular momentum per unit mass and r², `φ̇ sin²θ`.
    pub fn angular_momentum_z(&self) -> f64 {
        self.phi_dot * self.theta.sin().powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumDerivative {
    pub theta_dot: f64,
    pub phi_dot: f64,
    pub theta_ddot: f64,
    pub phi_ddot: f64,
    /// The state was inside the |θ| clamp.
    pub clamped: bool,
}

pub fn pendulum_derivative(s: &PendulumState, g: f64, r: f64) -> PendulumDerivative {
    let clamped = s.theta.abs() < THETA_CLAMP;
    let theta = if clamped {
        THETA_CLAMP.copysign(if s.theta == 0.0 { 1.0 } else { s.theta })
    } else {
        s.theta
    };
    let (sn, cs) = theta.sin_cos();
    PendulumDerivative {
        theta_dot: s.theta_dot,
        phi_dot: s.phi_dot,
        theta_ddot: s.phi_dot * s.phi_dot * sn * cs - g / r * sn,
        phi_ddot: -2.0 * s.phi_dot * s.theta_dot * cs / sn,
        clamped,
    }
}

fn rhs(y: &[f64; 4], g: f64, r: f64, clamps: &mut usize) -> [f64; 4] {
    let d = pendulum_derivative(&PendulumState::from_array(*y), g, r);
    if d.clamped {
        *clamps += 1;
    }
    [d.theta_dot, d.phi_dot, d.theta_ddot, d.phi_ddot]
}

fn axpy(y: &[f64; 4], h: f64, k: &[f64; 4]) -> [f64; 4] {
    [y[0] + h * k[0], y[1] + h * k[1], y[2] + h * k[2], y[3] + h * k[3]]
}

fn rk4_step(y: &[f64; 4], h: f64, g: f64, r: f64, clamps: &mut usize) -> [f64; 4] {
    let k1 = rhs(y, g, r, clamps);
    let k2 = rhs(&axpy(y, 0.5 * h, &k1), g, r, clamps);
    let k3 = rhs(&axpy(y, 0.5 * h, &k2), g, r, clamps);
    let k4 = rhs(&axpy(y, h, &k3), g, r, clamps);
    let mut out = *y;
    for i in 0..4 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorParams {
    /// At least this many RK4 substeps per output interval.
    pub min_substeps: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for IntegratorParams {
    fn default() -> Self {
        Self {
            min_substeps: 10,
            rel_tol: 1e-12,
            abs_tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `states[k]` is the state at `k·dt`; `states[0]` is the initial state.
    pub states: Vec<PendulumState>,
    /// Right-hand-side evaluations that hit the |θ| clamp.
    pub clamp_events: usize,
    /// RK4 steps taken in total (accepted and rejected).
    pub rk4_steps: usize,
}

/// RK4 sampled every `dt`, with at least `min_substeps` steps per sample.
/// Each substep is checked by step doubling and halved until the local
/// error estimate is within tolerance; close passes by θ = 0 (where φ̇
/// grows like 1/sin²θ) are thereby resolved instead of diverging.
pub fn integrate_pendulum(
    s0: &PendulumState,
    g: f64,
    r: f64,
    dt: f64,
    steps: usize,
    p: &IntegratorParams,
) -> Trajectory {
    assert!(dt > 0.0 && r > 0.0);
    let mut states = Vec::with_capacity(steps + 1);
    states.push(*s0);
    let mut y = s0.to_array();
    let mut clamps = 0;
    let mut rk4_steps = 0;
    let h_max = dt / p.min_substeps.max(1) as f64;
    let mut h_next = h_max;
    for _ in 0..steps {
        let mut t = 0.0;
        while t < dt {
            let mut h = h_next.min(h_max).min(dt - t);
            if dt - t - h < 1e-12 * dt {
                h = dt - t;
            }
            loop {
                let full = rk4_step(&y, h, g, r, &mut clamps);
                let half = rk4_step(&y, 0.5 * h, g, r, &mut clamps);
                let two = rk4_step(&half, 0.5 * h, g, r, &mut clamps);
                rk4_steps += 3;
                let mut err: f64 = 0.0;
                for i in 0..4 {
                    let scale = p.abs_tol + p.rel_tol * y[i].abs().max(two[i].abs());
                    err = err.max((two[i] - full[i]).abs() / 15.0 / scale);
                }
                if err <= 1.0 || h < 1e-12 * dt {
                    for i in 0..4 {
                        y[i] = two[i] + (two[i] - full[i]) / 15.0;
                    }
                    t += h;
                    let grow = if err > 0.0 { 0.9 * err.powf(-0.2) } else { 4.0 };
                    h_next = h * grow.clamp(0.2, 4.0);
                    break;
                }
                h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.5);
            }
        }
        states.push(PendulumState::from_array(y));
    }
    Trajectory {
        states,
        clamp_events: clamps,
        rk4_steps,
    }
}

/// Rigid offset of a pole head of length `r` deflected to `(θ, φ)`:
/// translation is the tip displacement from rest, rotation is the rod's
/// tilt by θ about the horizontal axis perpendicular to azimuth φ.
pub fn pendulum_to_pose_offset(s: &PendulumState, r: f64) -> RigidTransform {
    let (st, ct) = s.theta.sin_cos();
    let (sp, cp) = s.phi.sin_cos();
    let axis = Vector3::new(-sp, cp, 0.0);
    let rotation = axis_angle_matrix(&axis, s.theta);
    RigidTransform::new(rotation, Point3::new(r * st * cp, r * st * sp, r * (ct - 1.0)))
}

/// Pose of a sensor mounted at `mount` whose pole is deflected by `offset`
/// (rotation about the pole base `r` below the sensor).
pub fn apply_offset(offset: &RigidTransform, mount: &RigidTransform) -> RigidTransform {
    RigidTransform::new(offset.rotation * mount.rotation, mount.translation + offset.translation)
}
