//! Fixed-step explicit Euler closed-loop simulation, desired trajectories,
//! run metrics and the three-controller comparison.

use std::time::Instant;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{self, Baumgarte};
use crate::control::{self, ControllerState, ControllerVariant, Gains};
use crate::dynamics::{self, ConcentratedWrench};
use crate::error::{Error, Result};
use crate::kinematics::KinematicsCache;
use crate::model::{GenVec, ParamVector, SystemModel, TendonMap};
use crate::regressor;

/// Harmonic series `sum_k a_k sin(k t + phi_k) + c` of one task axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierAxis {
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
    pub offset: f64,
}

impl FourierAxis {
    fn eval(&self, t: f64) -> (f64, f64) {
        let mut x = self.offset;
        let mut v = 0.0;
        for (k, (a, p)) in self.amplitudes.iter().zip(&self.phases).enumerate() {
            let w = (k + 1) as f64;
            x += a * (w * t + p).sin();
            v += a * w * (w * t + p).cos();
        }
        (x, v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum TrajectorySpec {
    Setpoint {
        x_d: [f64; 3],
    },
    Fourier {
        x: FourierAxis,
        y: FourierAxis,
        z: FourierAxis,
    },
}

impl TrajectorySpec {
    /// Regulation target of the laboratory setup (m).
    pub fn regulation() -> Self {
        TrajectorySpec::Setpoint {
            x_d: [0.3156, 0.0182, 0.3316],
        }
    }

    /// Tracking trajectory of the laboratory setup (m).
    pub fn tracking() -> Self {
        TrajectorySpec::Fourier {
            x: FourierAxis {
                amplitudes: vec![0.000107, 0.00008],
                phases: vec![1.517, 1.458],
                offset: 0.3146,
            },
            y: FourierAxis {
                amplitudes: vec![-0.01554],
                phases: vec![1.534],
                offset: -0.005173,
            },
            z: FourierAxis {
                amplitudes: vec![-0.000344, -0.000257],
                phases: vec![1.533, 1.492],
                offset: 0.3323,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let TrajectorySpec::Fourier { x, y, z } = self {
            for axis in [x, y, z] {
                if axis.amplitudes.len() != axis.phases.len() {
                    return Err(Error::Config(
                        "each Fourier axis needs as many phases as amplitudes".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Desired position and velocity at time `t`.
pub fn desired(traj: &TrajectorySpec, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    match traj {
        TrajectorySpec::Setpoint { x_d } => (Vector3::from(*x_d), Vector3::zeros()),
        TrajectorySpec::Fourier { x, y, z } => {
            let (px, vx) = x.eval(t);
            let (py, vy) = y.eval(t);
            let (pz, vz) = z.eval(t);
            (Vector3::new(px, py, pz), Vector3::new(vx, vy, vz))
        }
    }
}

/// Perturbation of the initial configuration along admissible directions.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialPerturbation {
    pub seed: u64,
    /// Half-width of the uniform perturbation of each coordinate.
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub variant: ControllerVariant,
    pub gains: Gains,
    pub trajectory: TrajectorySpec,
    pub dt: f64,
    pub horizon: f64,
    pub record_stride: usize,
    pub baumgarte: Baumgarte,
    pub wrenches: Vec<ConcentratedWrench>,
    pub initial: InitialPerturbation,
    /// Saturation events before this time are excluded from the late count.
    pub transient: f64,
}

impl Scenario {
    pub fn regulation(variant: ControllerVariant) -> Self {
        Self {
            variant,
            gains: Gains::regulation(),
            trajectory: TrajectorySpec::regulation(),
            dt: 3.5e-4,
            horizon: 20.0,
            record_stride: 10,
            baumgarte: Baumgarte::default(),
            wrenches: Vec::new(),
            initial: InitialPerturbation::default(),
            transient: 0.5,
        }
    }

    pub fn tracking(variant: ControllerVariant) -> Self {
        Self {
            gains: Gains::tracking(),
            trajectory: TrajectorySpec::tracking(),
            dt: 4e-4,
            ..Self::regulation(variant)
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.horizon >= 0.0) || !(self.horizon / self.dt < u32::MAX as f64) {
            return Err(Error::Config(format!("invalid horizon {}", self.horizon)));
        }
        if self.record_stride == 0 {
            return Err(Error::Config("record_stride must be at least 1".into()));
        }
        if !(self.baumgarte.alpha >= 0.0 && self.baumgarte.beta >= 0.0) {
            return Err(Error::Config("Baumgarte gains must be non-negative".into()));
        }
        self.trajectory.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralizedState {
    pub q: GenVec,
    pub qdot: GenVec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub x: Vector3<f64>,
    pub x_d: Vector3<f64>,
    pub e_norm: f64,
    pub u_cmd: Vector3<f64>,
    pub u: Vector3<f64>,
    pub saturated: bool,
    /// Tendon displacements (m).
    pub tendon: Vector3<f64>,
    pub theta_hat: ParamVector,
    pub lyapunov: f64,
    pub phi_norm: f64,
    pub aqdot_norm: f64,
    pub lambda_norm: f64,
    pub allocation_residual: f64,
    pub ps_residual: f64,
    pub aqdot_r_norm: f64,
    pub rank: usize,
    /// Wall time of the step (s); kept out of the trace for determinism.
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub steps: usize,
    pub rmse_mm: f64,
    pub tv_e_mm: f64,
    pub tv_s_mm: f64,
    pub saturation_events: usize,
    pub saturation_events_after_transient: usize,
    pub final_error_mm: f64,
    pub max_phi: f64,
    pub max_aqdot: f64,
    pub max_ps_residual: f64,
    pub max_allocation_residual: f64,
    pub min_rank: usize,
    pub mean_step_time_ms: f64,
    pub real_time_factor: f64,
}

/// Running accumulation of [`Metrics`] on the full-rate signal.
#[derive(Clone, Debug, Default)]
struct MetricsAccumulator {
    m: Metrics,
    sum_e2: f64,
    prev_e: Option<f64>,
    prev_s: Option<f64>,
    wall: f64,
}

impl MetricsAccumulator {
    fn push(&mut self, r: &StepRecord, transient: f64) {
        let m = &mut self.m;
        m.steps += 1;
        self.sum_e2 += r.e_norm * r.e_norm;
        let s_norm = r.tendon.norm();
        if let Some(p) = self.prev_e {
            m.tv_e_mm += (r.e_norm - p).abs() * 1e3;
        }
        if let Some(p) = self.prev_s {
            m.tv_s_mm += (s_norm - p).abs() * 1e3;
        }
        self.prev_e = Some(r.e_norm);
        self.prev_s = Some(s_norm);
        if r.saturated {
            m.saturation_events += 1;
            if r.t >= transient {
                m.saturation_events_after_transient += 1;
            }
        }
        m.final_error_mm = r.e_norm * 1e3;
        m.max_phi = m.max_phi.max(r.phi_norm);
        m.max_aqdot = m.max_aqdot.max(r.aqdot_norm);
        m.max_ps_residual = m.max_ps_residual.max(r.ps_residual);
        m.max_allocation_residual = m.max_allocation_residual.max(r.allocation_residual);
        m.min_rank = if m.steps == 1 {
            r.rank
        } else {
            m.min_rank.min(r.rank)
        };
        self.wall += r.wall_time;
    }

    fn finish(mut self, dt: f64) -> Metrics {
        if self.m.steps > 0 {
            let n = self.m.steps as f64;
            self.m.rmse_mm = (self.sum_e2 / n).sqrt() * 1e3;
            self.m.mean_step_time_ms = self.wall / n * 1e3;
            self.m.real_time_factor = if self.wall > 0.0 {
                n * dt / self.wall
            } else {
                0.0
            };
        }
        self.m
    }
}

/// Static equilibrium of the unactuated plant, optionally perturbed along
/// admissible directions and re-closed.
pub fn initial_state(model: &SystemModel, scenario: &Scenario) -> Result<GeneralizedState> {
    let (mut q, _) =
        constraints::static_equilibrium(model, &model.arch_guess(), &model.theta_true)?;
    if scenario.initial.magnitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.initial.seed);
        let cache = KinematicsCache::new(model, &q, None);
        let p = constraints::constraint_data(model, &cache)?.projector;
        let mag = scenario.initial.magnitude;
        let noise = GenVec::from_fn(|_, _| rng.gen_range(-mag..=mag));
        q = constraints::assemble_closure(model, &(q + p * noise))?.0;
    }
    Ok(GeneralizedState {
        q,
        qdot: GenVec::zeros(),
    })
}

/// One closed-loop plant with its controller.
pub struct Simulation<'a> {
    model: &'a SystemModel,
    scenario: &'a Scenario,
    tendon_map: TendonMap,
    pub state: GeneralizedState,
    pub controller: ControllerState,
    pub step_index: usize,
}

impl<'a> Simulation<'a> {
    pub fn new(
        model: &'a SystemModel,
        scenario: &'a Scenario,
        state: GeneralizedState,
    ) -> Result<Self> {
        scenario.validate()?;
        Ok(Self {
            model,
            scenario,
            tendon_map: dynamics::tendon_map(model),
            state,
            controller: ControllerState::new(scenario.variant, model.theta_nominal),
            step_index: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.scenario.dt
    }

    /// Records the state at the current time and advances one Euler step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let (model, sc) = (self.model, self.scenario);
        let dt = sc.dt;
        let t = self.time();
        let GeneralizedState { q, qdot } = self.state.clone();

        let cache = KinematicsCache::new(model, &q, Some(&qdot));
        let cd = constraints::constraint_data(model, &cache)?;
        let plant = dynamics::assemble(model, &cache, &model.theta_true, &sc.wrenches)?;
        let p = cd.projector;

        let x = cache.task_output(model);
        let (x_d, xd_dot) = desired(&sc.trajectory, t);
        let xdot_r = control::reference_velocity(&x, &xd_dot, &x_d, &sc.gains.lambda);
        let jref = control::joint_reference(
            &cache.task_jacobian(model),
            &p,
            &xdot_r,
            &mut self.controller,
            dt,
        );
        let (s, ps_residual) = control::sliding_variable(&qdot, &jref.qdot_r, &p);
        let y = regressor::control_regressor(model, &cache, &jref.qdot_r, &jref.qddot_r);
        let theta_hat = match self.controller.variant {
            ControllerVariant::Nominal => model.theta_nominal,
            _ => self.controller.theta_hat,
        };
        let tau_p = control::control_law(
            self.controller.variant,
            &plant,
            &p,
            &y,
            &s,
            &theta_hat,
            &sc.gains,
            &q,
            &qdot,
        );
        let (u_cmd, allocation_residual) =
            control::tension_allocation(&self.tendon_map, &p, &tau_p);
        let (u, saturated) = control::saturate(&u_cmd, sc.gains.tension_bound);
        let tau = self.tendon_map * u;
        let (qddot, lambda) =
            constraints::constrained_accel(&plant, &cd, &q, &qdot, &tau, sc.baumgarte)?;
        let lyapunov = control::lyapunov_value(
            &plant.mass,
            &s,
            &theta_hat,
            &model.theta_true,
            &sc.gains.gamma,
        );

        let vq = DVector::from_column_slice(qdot.as_slice());
        let vr = DVector::from_column_slice(jref.qdot_r.as_slice());
        let mut record = StepRecord {
            step: self.step_index,
            t,
            x,
            x_d,
            e_norm: (x_d - x).norm(),
            u_cmd,
            u,
            saturated,
            tendon: dynamics::tendon_displacements(model, &q),
            theta_hat,
            lyapunov,
            phi_norm: cd.phi.norm(),
            aqdot_norm: (&cd.a * vq).norm(),
            lambda_norm: lambda.norm(),
            allocation_residual,
            ps_residual,
            aqdot_r_norm: (&cd.a * vr).norm(),
            rank: cd.rank,
            wall_time: 0.0,
        };

        let next_q = q + dt * qdot;
        let next_qdot = qdot + dt * qddot;
        if !next_q.iter().chain(next_qdot.iter()).all(|v| v.is_finite())
            || !record.lyapunov.is_finite()
            || !u.iter().all(|v| v.is_finite())
        {
            return Err(Error::NonFinite {
                step: self.step_index,
                time: t,
                what: format!(
                    "state diverged (|e| = {:.3e} m, |qddot| = {:.3e})",
                    record.e_norm,
                    qddot.amax()
                ),
            });
        }
        if self.controller.variant == ControllerVariant::Adaptive {
            self.controller.theta_hat = control::adaptation_step(
                &self.controller.theta_hat,
                &y,
                &p,
                &s,
                &sc.gains.gamma,
                dt,
            );
        }
        self.state = GeneralizedState {
            q: next_q,
            qdot: next_qdot,
        };
        self.step_index += 1;
        record.wall_time = start.elapsed().as_secs_f64();
        Ok(record)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Every `record_stride`-th record.
    pub records: Vec<StepRecord>,
    pub metrics: Metrics,
    pub final_state: GeneralizedState,
    pub final_theta_hat: ParamVector,
}

/// Runs from the given state, calling `observe` on every full-rate record.
pub fn run_from<F: FnMut(&StepRecord)>(
    model: &SystemModel,
    scenario: &Scenario,
    state: GeneralizedState,
    mut observe: F,
) -> Result<RunOutput> {
    let mut sim = Simulation::new(model, scenario, state)?;
    let n = scenario.n_steps();
    let mut acc = MetricsAccumulator::default();
    let mut records = Vec::with_capacity(n / scenario.record_stride + 1);
    for k in 0..n {
        let r = sim.step()?;
        acc.push(&r, scenario.transient);
        observe(&r);
        if k % scenario.record_stride == 0 {
            records.push(r);
        }
    }
    Ok(RunOutput {
        records,
        metrics: acc.finish(scenario.dt),
        final_theta_hat: sim.controller.theta_hat,
        final_state: sim.state,
    })
}

pub fn run(model: &SystemModel, scenario: &Scenario) -> Result<RunOutput> {
    scenario.validate()?;
    let state = initial_state(model, scenario)?;
    run_from(model, scenario, state, |_| {})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub controller: ControllerVariant,
    pub metrics: Metrics,
}

/// Magnitude of the initial perturbation used for repeated trials when the
/// scenario itself has none (rad, per coordinate).
pub const TRIAL_PERTURBATION: f64 = 1e-3;

/// Scenario of trial `k`: trial 0 is the scenario as given, later trials
/// draw their initial perturbation from successive seeds.
pub fn trial_scenario(scenario: &Scenario, k: usize) -> Scenario {
    let mut sc = scenario.clone();
    if k > 0 {
        sc.initial.seed = scenario.initial.seed.wrapping_add(k as u64);
        if sc.initial.magnitude == 0.0 {
            sc.initial.magnitude = TRIAL_PERTURBATION;
        }
    }
    sc
}

/// Runs every controller variant on `trials` initial states, with
/// identical gains, on up to `threads` workers. The outer vector is indexed
/// by trial, the inner one follows [`ControllerVariant::ALL`].
pub fn compare_trials(
    model: &SystemModel,
    scenario: &Scenario,
    trials: usize,
    threads: usize,
) -> Result<Vec<Vec<(ComparisonEntry, RunOutput)>>> {
    scenario.validate()?;
    let bases: Vec<Scenario> = (0..trials).map(|k| trial_scenario(scenario, k)).collect();
    let states = parallel_map(&bases, threads, |sc| initial_state(model, sc));
    let mut jobs = Vec::with_capacity(trials * ControllerVariant::ALL.len());
    for (sc, state) in bases.iter().zip(states) {
        let state = state?;
        for v in ControllerVariant::ALL {
            jobs.push((
                Scenario {
                    variant: v,
                    ..sc.clone()
                },
                state.clone(),
            ));
        }
    }
    let results = parallel_map(&jobs, threads, |(sc, state)| {
        run_from(model, sc, state.clone(), |_| {})
    });
    let mut out: Vec<Vec<(ComparisonEntry, RunOutput)>> = Vec::with_capacity(trials);
    for (k, ((sc, _), res)) in jobs.iter().zip(results).enumerate() {
        if k % ControllerVariant::ALL.len() == 0 {
            out.push(Vec::new());
        }
        let res = res?;
        out.last_mut().expect("pushed above").push((
            ComparisonEntry {
                controller: sc.variant,
                metrics: res.metrics.clone(),
            },
            res,
        ));
    }
    Ok(out)
}

/// Single-trial [`compare_trials`].
pub fn compare(
    model: &SystemModel,
    scenario: &Scenario,
    threads: usize,
) -> Result<Vec<(ComparisonEntry, RunOutput)>> {
    Ok(compare_trials(model, scenario, 1, threads)?.remove(0))
}

/// Order-preserving map over `items` on at most `threads` scoped workers.
pub fn parallel_map<T: Sync, R: Send, F: Fn(&T) -> R + Sync>(
    items: &[T],
    threads: usize,
    f: F,
) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                scope.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}
