//! Trace CSV and JSON summaries.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! value parsed back from the CSV is bit-identical to the one recorded.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::ControllerVariant;
use crate::error::Result;
use crate::model::N_PARAMS;
use crate::sim::{ComparisonEntry, Metrics, Scenario, StepRecord};

/// Column names of `trace.csv`, in order. Wall time is deliberately absent.
pub fn trace_header() -> Vec<String> {
    let mut h: Vec<String> = ["step", "t", "x", "y", "z", "x_d", "y_d", "z_d", "e_norm"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for prefix in ["u_cmd", "u", "s"] {
        h.extend((1..=3).map(|i| format!("{prefix}{i}")));
    }
    h.push("saturated".into());
    h.extend((0..N_PARAMS).map(|i| format!("theta_hat{i}")));
    h.extend(
        [
            "lyapunov",
            "phi_norm",
            "aqdot_norm",
            "lambda_norm",
            "allocation_residual",
            "ps_residual",
            "aqdot_r_norm",
            "rank",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    h
}

pub fn trace_row(r: &StepRecord) -> String {
    let mut line = format!("{},{}", r.step, r.t);
    let mut push = |v: f64| {
        let _ = write!(line, ",{v}");
    };
    r.x.iter().chain(r.x_d.iter()).for_each(|v| push(*v));
    push(r.e_norm);
    r.u_cmd
        .iter()
        .chain(r.u.iter())
        .chain(r.tendon.iter())
        .for_each(|v| push(*v));
    let _ = write!(line, ",{}", u8::from(r.saturated));
    let mut push = |v: f64| {
        let _ = write!(line, ",{v}");
    };
    r.theta_hat.iter().for_each(|v| push(*v));
    for v in [
        r.lyapunov,
        r.phi_norm,
        r.aqdot_norm,
        r.lambda_norm,
        r.allocation_residual,
        r.ps_residual,
        r.aqdot_r_norm,
    ] {
        push(v);
    }
    let _ = write!(line, ",{}", r.rank);
    line
}

pub fn write_trace<W: Write>(mut w: W, records: &[StepRecord]) -> Result<()> {
    writeln!(w, "{}", trace_header().join(","))?;
    for r in records {
        writeln!(w, "{}", trace_row(r))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub controller: ControllerVariant,
    pub dt: f64,
    pub horizon: f64,
    pub record_stride: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

impl RunSummary {
    pub fn new(scenario: &Scenario, metrics: Metrics) -> Self {
        Self {
            controller: scenario.variant,
            dt: scenario.dt,
            horizon: scenario.horizon,
            record_stride: scenario.record_stride,
            metrics,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample statistics; the spread of a single value is zero.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self {
                mean: 0.0,
                std: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub controller: ControllerVariant,
    pub rmse_mm: MeanStd,
    pub tv_e_mm: MeanStd,
    pub tv_s_mm: MeanStd,
    pub saturation_events: MeanStd,
    pub trials: Vec<Metrics>,
}

impl ControllerSummary {
    pub fn new(controller: ControllerVariant, trials: Vec<Metrics>) -> Self {
        let stat = |f: fn(&Metrics) -> f64| MeanStd::of(&trials.iter().map(f).collect::<Vec<_>>());
        Self {
            controller,
            rmse_mm: stat(|m| m.rmse_mm),
            tv_e_mm: stat(|m| m.tv_e_mm),
            tv_s_mm: stat(|m| m.tv_s_mm),
            saturation_events: stat(|m| m.saturation_events as f64),
            trials,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dt: f64,
    pub horizon: f64,
    pub n_trials: usize,
    pub controllers: Vec<ControllerSummary>,
}

impl Comparison {
    /// Aggregates per-trial entries, each trial listing every controller.
    pub fn from_trials(scenario: &Scenario, trials: &[Vec<ComparisonEntry>]) -> Self {
        let controllers = ControllerVariant::ALL
            .iter()
            .map(|v| {
                let runs = trials
                    .iter()
                    .flat_map(|t| t.iter().filter(|e| e.controller == *v))
                    .map(|e| e.metrics.clone())
                    .collect();
                ControllerSummary::new(*v, runs)
            })
            .collect();
        Self {
            dt: scenario.dt,
            horizon: scenario.horizon,
            n_trials: trials.len(),
            controllers,
        }
    }

    pub fn get(&self, v: ControllerVariant) -> Option<&ControllerSummary> {
        self.controllers.iter().find(|c| c.controller == v)
    }

    /// Violated orderings of mean RMSE and TV_e: adaptive <= baseline <= nominal.
    pub fn ordering_violations(&self) -> Vec<String> {
        let (Some(a), Some(b), Some(n)) = (
            self.get(ControllerVariant::Adaptive),
            self.get(ControllerVariant::Baseline),
            self.get(ControllerVariant::Nominal),
        ) else {
            return vec!["comparison lacks a controller".into()];
        };
        let mut out = Vec::new();
        for (name, f) in [
            (
                "rmse_mm",
                (|c: &ControllerSummary| c.rmse_mm.mean) as fn(&ControllerSummary) -> f64,
            ),
            ("tv_e_mm", |c: &ControllerSummary| c.tv_e_mm.mean),
        ] {
            if f(a) > f(b) {
                out.push(format!("{name}: adaptive {} > baseline {}", f(a), f(b)));
            }
            if f(b) > f(n) {
                out.push(format!("{name}: baseline {} > nominal {}", f(b), f(n)));
            }
        }
        out
    }
}

/// Writes `contents` to `path` through a sibling temporary file, so an
/// interrupted write never leaves a truncated file behind.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}
