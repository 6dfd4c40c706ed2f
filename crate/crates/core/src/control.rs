//! Task-space references, sliding variable, the projected control laws,
//! parameter adaptation and tendon tension allocation.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::AssembledDynamics;
use crate::error::{Error, Result};
use crate::kinematics::TaskJac;
use crate::model::{GenMat, GenVec, ParamVector, TendonMap, N_PARAMS};
use crate::regressor::Regressor;

pub type ParamMat = SMatrix<f64, N_PARAMS, N_PARAMS>;

/// Relative damping of the task Jacobian pseudoinverse.
pub const TASK_DAMPING: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerVariant {
    Adaptive,
    Nominal,
    Baseline,
}

impl ControllerVariant {
    pub const ALL: [ControllerVariant; 3] = [
        ControllerVariant::Adaptive,
        ControllerVariant::Nominal,
        ControllerVariant::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerVariant::Adaptive => "adaptive",
            ControllerVariant::Nominal => "nominal",
            ControllerVariant::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for ControllerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "nominal" => Ok(Self::Nominal),
            "baseline" => Ok(Self::Baseline),
            other => Err(Error::Config(format!("unknown controller '{other}'"))),
        }
    }
}

fn check_spd<const N: usize>(name: &str, m: &SMatrix<f64, N, N>) -> Result<()> {
    let asym = (m - m.transpose()).amax();
    if !m.iter().all(|v| v.is_finite()) || asym > 1e-12 * m.amax().max(1.0) {
        return Err(Error::Config(format!("{name} must be symmetric")));
    }
    if m.cholesky().is_none() {
        return Err(Error::Config(format!("{name} must be positive definite")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gains {
    pub lambda: Matrix3<f64>,
    pub ks: GenMat,
    pub gamma: ParamMat,
    pub tension_bound: f64,
}

impl Gains {
    pub fn new(
        lambda: Matrix3<f64>,
        ks: GenMat,
        gamma: ParamMat,
        tension_bound: f64,
    ) -> Result<Self> {
        check_spd("Lambda", &lambda)?;
        check_spd("K_s", &ks)?;
        check_spd("Gamma", &gamma)?;
        if !(tension_bound > 0.0) {
            return Err(Error::Config("tension bound must be positive".into()));
        }
        Ok(Self {
            lambda,
            ks,
            gamma,
            tension_bound,
        })
    }

    /// Regulation gains of the laboratory setup.
    pub fn regulation() -> Self {
        Self::new(
            Matrix3::from_diagonal(&Vector3::new(20.0, 1.0, 5.0)) * 1.5e5,
            GenMat::identity() * 0.07,
            ParamMat::identity() * 1e-4,
            20.0,
        )
        .expect("valid defaults")
    }

    /// Tracking gains of the laboratory setup.
    pub fn tracking() -> Self {
        Self::new(
            Matrix3::identity() * 1e5,
            GenMat::identity() * 0.07,
            ParamMat::identity() * 1e-4,
            20.0,
        )
        .expect("valid defaults")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub variant: ControllerVariant,
    pub theta_hat: ParamVector,
    pub qdot_r_prev: Option<GenVec>,
}

impl ControllerState {
    /// Estimates start at the nominal parameters for every variant.
    pub fn new(variant: ControllerVariant, theta_nominal: ParamVector) -> Self {
        Self {
            variant,
            theta_hat: theta_nominal,
            qdot_r_prev: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlOutput {
    pub tau_p: GenVec,
    /// Realised (saturated) tensions.
    pub u: Vector3<f64>,
    pub u_cmd: Vector3<f64>,
    pub saturated: bool,
    pub s: GenVec,
    pub e: Vector3<f64>,
    pub lyapunov: f64,
    pub allocation_residual: f64,
}

/// `xdot_r = xdot_d + Lambda (x_d - x)`.
pub fn reference_velocity(
    x: &Vector3<f64>,
    xd_dot: &Vector3<f64>,
    xd: &Vector3<f64>,
    lambda: &Matrix3<f64>,
) -> Vector3<f64> {
    xd_dot + lambda * (xd - x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointReference {
    pub qdot_r: GenVec,
    pub qddot_r: GenVec,
    /// `|J qdot_r - xdot_r|`.
    pub task_residual: f64,
    /// Condition number of the projected task Jacobian.
    pub condition: f64,
}

/// Damped pseudoinverse `J^T (J J^T + mu^2 I)^-1` of a 3×16 block, with its
/// condition number.
fn damped_pinv(j: &TaskJac) -> (SMatrix<f64, 16, 3>, f64) {
    let jjt = j * j.transpose();
    let eig = jjt.symmetric_eigenvalues();
    let smax = eig.max().max(0.0).sqrt();
    let smin = eig.min().max(0.0).sqrt();
    let mu = TASK_DAMPING * smax;
    let inv = (jjt + Matrix3::identity() * mu * mu)
        .try_inverse()
        .unwrap_or_else(Matrix3::zeros);
    let cond = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    (j.transpose() * inv, cond)
}

/// `qdot_r = P (J P)^+ xdot_r`, and `qddot_r` by backward difference.
pub fn joint_reference(
    task_jac: &TaskJac,
    projector: &GenMat,
    xdot_r: &Vector3<f64>,
    state: &mut ControllerState,
    dt: f64,
) -> JointReference {
    let jp = task_jac * projector;
    let (pinv, condition) = damped_pinv(&jp);
    let qdot_r = projector * (pinv * xdot_r);
    let qddot_r = match state.qdot_r_prev {
        Some(prev) => (qdot_r - prev) / dt,
        None => GenVec::zeros(),
    };
    state.qdot_r_prev = Some(qdot_r);
    JointReference {
        task_residual: (task_jac * qdot_r - xdot_r).norm(),
        qdot_r,
        qddot_r,
        condition,
    }
}

/// `s = qdot - qdot_r` and the residual `|P s - s|`.
pub fn sliding_variable(qdot: &GenVec, qdot_r: &GenVec, projector: &GenMat) -> (GenVec, f64) {
    let s = qdot - qdot_r;
    let residual = (projector * s - s).norm();
    (s, residual)
}

/// Projected generalized force `tau_p`.
#[allow(clippy::too_many_arguments)]
pub fn control_law(
    variant: ControllerVariant,
    dynamics: &AssembledDynamics,
    projector: &GenMat,
    y: &Regressor,
    s: &GenVec,
    theta_hat: &ParamVector,
    gains: &Gains,
    q: &GenVec,
    qdot: &GenVec,
) -> GenVec {
    let mut known = dynamics.stiffness * q + dynamics.damping * qdot - dynamics.external;
    if variant != ControllerVariant::Baseline {
        known += y * theta_hat;
    }
    projector * known - gains.ks * s
}

/// `theta_hat - dt Gamma Y^T P s`.
pub fn adaptation_step(
    theta_hat: &ParamVector,
    y: &Regressor,
    projector: &GenMat,
    s: &GenVec,
    gamma: &ParamMat,
    dt: f64,
) -> ParamVector {
    theta_hat - dt * gamma * (y.transpose() * (projector * s))
}

/// `V = 1/2 s^T M s + 1/2 theta_tilde^T Gamma^-1 theta_tilde`.
pub fn lyapunov_value(
    mass: &GenMat,
    s: &GenVec,
    theta_hat: &ParamVector,
    theta_true: &ParamVector,
    gamma: &ParamMat,
) -> f64 {
    let tilde = theta_hat - theta_true;
    let gamma_inv = gamma.try_inverse().expect("Gamma is positive definite");
    0.5 * (s.transpose() * mass * s)[0] + 0.5 * (tilde.transpose() * gamma_inv * tilde)[0]
}

/// Least-squares tensions `u = (P H)^+ tau_p` and the residual `|P H u - tau_p|`.
pub fn tension_allocation(
    h: &TendonMap,
    projector: &GenMat,
    tau_p: &GenVec,
) -> (Vector3<f64>, f64) {
    let ph = projector * h;
    let svd = ph.svd(true, true);
    let tol = 1e-10 * svd.singular_values.max();
    let u = svd.solve(tau_p, tol).unwrap_or_else(|_| Vector3::zeros());
    let residual = (ph * u - tau_p).norm();
    (u, residual)
}

/// Clips each channel to `[-bound, bound]`; reports whether any channel hit it.
pub fn saturate(u: &Vector3<f64>, bound: f64) -> (Vector3<f64>, bool) {
    let clipped = u.map(|v| v.clamp(-bound, bound));
    let hit = u.iter().any(|v| v.abs() >= bound);
    (clipped, hit)
}
