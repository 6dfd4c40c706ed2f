//! JSON scenario files.
//!
//! A file names a preset (`regulation` or `tracking`) and overrides any
//! subset of its fields. Unknown keys are rejected.

use std::path::Path;

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

use crate::constraints::Baumgarte;
use crate::control::{ControllerVariant, Gains};
use crate::dynamics::ConcentratedWrench;
use crate::error::{Error, Result};
use crate::model::{ModelParams, SystemModel};
use crate::sim::{InitialPerturbation, Scenario, TrajectorySpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Regulation,
    Tracking,
}

/// A gain matrix written as a scalar multiple of the identity, a diagonal,
/// or a full row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix<const N: usize>(&self, name: &str) -> Result<SMatrix<f64, N, N>> {
        match self {
            MatrixSpec::Scalar(s) => Ok(SMatrix::identity() * *s),
            MatrixSpec::Diagonal(d) => {
                if d.len() != N {
                    return Err(Error::Config(format!(
                        "{name}: expected {N} diagonal entries, got {}",
                        d.len()
                    )));
                }
                Ok(SMatrix::from_fn(|i, j| if i == j { d[i] } else { 0.0 }))
            }
            MatrixSpec::Full(rows) => {
                if rows.len() != N || rows.iter().any(|r| r.len() != N) {
                    return Err(Error::Config(format!("{name}: expected a {N}x{N} matrix")));
                }
                Ok(SMatrix::from_fn(|i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GainsConfig {
    pub lambda: Option<MatrixSpec>,
    pub ks: Option<MatrixSpec>,
    pub gamma: Option<MatrixSpec>,
    pub tension_bound: Option<f64>,
}

impl GainsConfig {
    fn apply(&self, base: &Gains) -> Result<Gains> {
        let lambda = match &self.lambda {
            Some(m) => m.to_matrix("lambda")?,
            None => base.lambda,
        };
        let ks = match &self.ks {
            Some(m) => m.to_matrix("ks")?,
            None => base.ks,
        };
        let gamma = match &self.gamma {
            Some(m) => m.to_matrix("gamma")?,
            None => base.gamma,
        };
        Gains::new(
            lambda,
            ks,
            gamma,
            self.tension_bound.unwrap_or(base.tension_bound),
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub preset: Preset,
    pub model: ModelParams,
    pub controller: Option<ControllerVariant>,
    pub gains: GainsConfig,
    pub trajectory: Option<TrajectorySpec>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub record_stride: Option<usize>,
    pub baumgarte: Option<Baumgarte>,
    pub wrenches: Vec<ConcentratedWrench>,
    pub initial: InitialPerturbation,
    pub transient: Option<f64>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn build_model(&self) -> Result<SystemModel> {
        SystemModel::from_params(&self.model).map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(format!("model: {other}")),
        })
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let variant = self.controller.unwrap_or(ControllerVariant::Adaptive);
        let base = match self.preset {
            Preset::Regulation => Scenario::regulation(variant),
            Preset::Tracking => Scenario::tracking(variant),
        };
        let sc = Scenario {
            gains: self.gains.apply(&base.gains)?,
            trajectory: self.trajectory.clone().unwrap_or(base.trajectory),
            dt: self.dt.unwrap_or(base.dt),
            horizon: self.horizon.unwrap_or(base.horizon),
            record_stride: self.record_stride.unwrap_or(base.record_stride),
            baumgarte: self.baumgarte.unwrap_or(base.baumgarte),
            wrenches: self.wrenches.clone(),
            initial: self.initial.clone(),
            transient: self.transient.unwrap_or(base.transient),
            variant,
        };
        sc.validate()?;
        Ok(sc)
    }
}
