//! Property suite behind `ccr verify`: projector identities, skew symmetry
//! of `M_dot - 2C`, regressor equivalence, Magnus order, finite-difference
//! Jacobians and constraint drift under the stabilized plant.

use std::time::Instant;

use nalgebra::{DVector, Matrix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constraints::{self, Baumgarte};
use crate::dynamics::{self, assemble_coriolis_with_sign, assemble_mass, gravity_force};
use crate::error::{Error, Result};
use crate::kinematics::KinematicsCache;
use crate::liegroup::{exp_se3, hat, log_se3, magnus_increment, Pose, Twist};
use crate::model::{GenVec, LinkId, ParamVector, SystemModel};
use crate::regressor::control_regressor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fast,
    Thorough,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "thorough" => Ok(Level::Thorough),
            other => Err(Error::Config(format!("unknown verify level '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub threshold: f64,
    pub samples: usize,
    pub seconds: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, worst: f64, threshold: f64, samples: usize) -> Self {
        Self {
            name,
            passed: worst.is_finite() && worst < threshold,
            worst,
            threshold,
            samples,
            seconds: 0.0,
            detail: String::new(),
        }
    }
}

/// Random state with `q` on the closure manifold and `qdot` admissible.
pub fn random_consistent_state(
    model: &SystemModel,
    rng: &mut ChaCha8Rng,
    spread: f64,
    speed: f64,
) -> (GenVec, GenVec) {
    let guess = model.arch_guess();
    loop {
        let noise = GenVec::from_fn(|_, _| rng.gen_range(-spread..=spread));
        let Ok((q, _)) = constraints::assemble_closure(model, &(guess + noise)) else {
            continue;
        };
        let cache = KinematicsCache::new(model, &q, None);
        let Ok(cd) = constraints::constraint_data(model, &cache) else {
            continue;
        };
        let v = GenVec::from_fn(|_, _| rng.gen_range(-speed..=speed));
        return (q, cd.projector * v);
    }
}

fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> GenVec {
    GenVec::from_fn(|_, _| rng.gen_range(-scale..=scale))
}

fn random_theta(rng: &mut ChaCha8Rng, model: &SystemModel) -> ParamVector {
    ParamVector::from_fn(|i, _| model.theta_nominal[i] * rng.gen_range(0.2..2.0))
}

/// Worst of `||P^2 - P||_F`, `||P^T - P||_F`, `||A P||_F`.
pub fn check_projector(model: &SystemModel, samples: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (q, _) = random_consistent_state(model, &mut rng, 0.3, 0.0);
        let cache = KinematicsCache::new(model, &q, None);
        match constraints::constraint_data(model, &cache) {
            Ok(cd) => {
                let p = cd.projector;
                let pd = nalgebra::DMatrix::from_column_slice(16, 16, p.as_slice());
                worst = worst
                    .max((p * p - p).norm())
                    .max((p.transpose() - p).norm())
                    .max((&cd.a * pd).norm());
            }
            Err(_) => worst = f64::INFINITY,
        }
    }
    CheckResult::new("projector identities", worst, 1e-10, samples)
}

/// Worst `|x^T (M_dot - 2C) x| / (||x||^2 ||M_dot||_F)` with a central
/// difference `M_dot` (step `1e-7`). `coad_sign = -1` is the mutation that
/// must fail.
pub fn check_skew(model: &SystemModel, samples: usize, seed: u64, coad_sign: f64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-7;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let q = random_vec(&mut rng, 1.0);
        let qd = random_vec(&mut rng, 1.0);
        let th = random_theta(&mut rng, model);
        let mp = assemble_mass(
            model,
            &KinematicsCache::new(model, &(q + h * qd), None),
            &th,
        );
        let mm = assemble_mass(
            model,
            &KinematicsCache::new(model, &(q - h * qd), None),
            &th,
        );
        let mdot = (mp - mm) / (2.0 * h);
        let c = assemble_coriolis_with_sign(
            model,
            &KinematicsCache::new(model, &q, Some(&qd)),
            &th,
            coad_sign,
        );
        let n = mdot - 2.0 * c;
        for _ in 0..4 {
            let x = random_vec(&mut rng, 1.0);
            let v = (x.transpose() * n * x)[0].abs() / (x.norm_squared() * mdot.norm());
            worst = worst.max(v);
        }
    }
    CheckResult::new("skew symmetry of M_dot - 2C", worst, 1e-6, samples)
}

/// Worst `||Y theta - (M a + C v - F_g)|| / ||M a + C v - F_g||`.
pub fn check_regressor(model: &SystemModel, samples: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let q = random_vec(&mut rng, 1.0);
        let qd = random_vec(&mut rng, 1.0);
        let v = random_vec(&mut rng, 1.0);
        let a = random_vec(&mut rng, 1.0);
        let th = random_theta(&mut rng, model);
        let cache = KinematicsCache::new(model, &q, Some(&qd));
        let rhs = assemble_mass(model, &cache, &th) * a
            + dynamics::assemble_coriolis(model, &cache, &th) * v
            - gravity_force(model, &cache, &th);
        let y = control_regressor(model, &cache, &v, &a) * th;
        worst = worst.max((y - rhs).norm() / rhs.norm());
    }
    CheckResult::new("regressor identity", worst, 1e-9, samples)
}

/// Non-commuting strain field used for the order check.
pub fn order_test_field(x: f64) -> Twist {
    Twist::new(
        (2.0 * x).sin(),
        1.0 + x * x,
        -0.7 * x,
        1.0,
        0.3 * x.cos(),
        0.2 * x,
    )
}

/// Classical RK4 on `g' = g xi^` with 4x4 matrices.
pub fn rk4_oracle<F: Fn(f64) -> Twist>(field: F, x0: f64, len: f64, steps: usize) -> Matrix4<f64> {
    let mut g = Matrix4::identity();
    let dx = len / steps as f64;
    let f = |x: f64, g: &Matrix4<f64>| g * hat(&field(x));
    for i in 0..steps {
        let x = x0 + i as f64 * dx;
        let k1 = f(x, &g);
        let k2 = f(x + 0.5 * dx, &(g + 0.5 * dx * k1));
        let k3 = f(x + 0.5 * dx, &(g + 0.5 * dx * k2));
        let k4 = f(x + dx, &(g + dx * k3));
        g += dx / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    g
}

/// Pose error over `[0, len]` with `n` equal Magnus steps.
pub fn magnus_error(len: f64, n: usize, oracle: &Matrix4<f64>) -> f64 {
    let h = len / n as f64;
    let mut g = Pose::identity();
    for i in 0..n {
        let inc = magnus_increment(order_test_field, i as f64 * h, h).expect("positive step");
        g = g.compose(&exp_se3(&inc.0));
    }
    (g.to_matrix() - oracle).norm()
}

/// Error ratios per halving of the Magnus step over a fixed span, starting
/// from two steps. Fourth order gives ratios near 16.
pub fn magnus_ratios(halvings: usize) -> Vec<f64> {
    let len = 1.0;
    let oracle = rk4_oracle(order_test_field, 0.0, len, 20_000);
    let errs: Vec<f64> = (0..=halvings)
        .map(|k| magnus_error(len, 2 << k, &oracle))
        .collect();
    errs.windows(2).map(|w| w[0] / w[1]).collect()
}

/// Worst deviation of the halving ratio from 16, relative to 16.
pub fn check_magnus_order(halvings: usize) -> CheckResult {
    let ratios = magnus_ratios(halvings);
    let worst = ratios
        .iter()
        .map(|r| (r / 16.0 - 1.0).abs())
        .fold(0.0, f64::max);
    let mut r = CheckResult::new("Magnus fourth order", worst, 0.2, halvings);
    r.detail = format!("ratios {ratios:.2?}");
    r
}

/// Worst column error of `J` and `J_dot` against central differences of
/// the forward kinematics (step `1e-6`) at every backbone station.
pub fn jacobian_errors(model: &SystemModel, samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let (mut ej, mut ejd) = (0.0f64, 0.0f64);
    for _ in 0..samples {
        let q = random_vec(&mut rng, 1.0);
        let qd = random_vec(&mut rng, 1.0);
        let base = KinematicsCache::new(model, &q, Some(&qd));
        let shifted: Vec<(KinematicsCache, KinematicsCache)> = (0..16)
            .map(|i| {
                let mut e = GenVec::zeros();
                e[i] = h;
                (
                    KinematicsCache::new(model, &(q + e), None),
                    KinematicsCache::new(model, &(q - e), None),
                )
            })
            .collect();
        let fwd = KinematicsCache::new(model, &(q + h * qd), None);
        let bwd = KinematicsCache::new(model, &(q - h * qd), None);
        for link in LinkId::ALL {
            for (k, f) in base.frames(link).iter().enumerate() {
                let inv = f.pose.inverse();
                for (i, (p, m)) in shifted.iter().enumerate() {
                    let dp = log_se3(&inv.compose(&p.frames(link)[k].pose));
                    let dm = log_se3(&inv.compose(&m.frames(link)[k].pose));
                    let col = (dp - dm) / (2.0 * h);
                    ej = ej.max((col - f.jac.column(i)).amax());
                }
                let jd = (fwd.frames(link)[k].jac - bwd.frames(link)[k].jac) / (2.0 * h);
                ejd = ejd.max((jd - f.jac_dot).amax());
            }
        }
    }
    (ej, ejd)
}

pub fn check_jacobians(model: &SystemModel, samples: usize, seed: u64) -> Vec<CheckResult> {
    let (ej, ejd) = jacobian_errors(model, samples, seed);
    vec![
        CheckResult::new("Jacobian vs finite differences", ej, 1e-6, samples),
        CheckResult::new("Jacobian rate vs finite differences", ejd, 1e-5, samples),
    ]
}

/// Max `||Phi||` and `||A qdot||` of the unactuated plant integrated with
/// explicit Euler, starting at static equilibrium with a random admissible
/// velocity.
pub fn constraint_drift(
    model: &SystemModel,
    dt: f64,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut q, _) =
        constraints::static_equilibrium(model, &model.arch_guess(), &model.theta_true)?;
    let cd = constraints::constraint_data(model, &KinematicsCache::new(model, &q, None))?;
    let mut qd = cd.projector * random_vec(&mut rng, 0.5);
    let (mut max_phi, mut max_aqd) = (0.0f64, 0.0f64);
    let zero = GenVec::zeros();
    for k in 0..steps {
        let cache = KinematicsCache::new(model, &q, Some(&qd));
        let cd = constraints::constraint_data(model, &cache)?;
        max_phi = max_phi.max(cd.phi.norm());
        max_aqd = max_aqd.max((&cd.a * DVector::from_column_slice(qd.as_slice())).norm());
        let plant = dynamics::assemble(model, &cache, &model.theta_true, &[])?;
        let (qdd, _) =
            constraints::constrained_accel(&plant, &cd, &q, &qd, &zero, Baumgarte::default())?;
        q += dt * qd;
        qd += dt * qdd;
        if !q.iter().chain(qd.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                step: k,
                time: k as f64 * dt,
                what: "passive drift run diverged".into(),
            });
        }
    }
    Ok((max_phi, max_aqd))
}

pub fn check_constraint_drift(model: &SystemModel, steps: usize, seed: u64) -> Vec<CheckResult> {
    match constraint_drift(model, 3.5e-4, steps, seed) {
        Ok((phi, aqd)) => vec![
            CheckResult::new("constraint drift ||Phi||", phi, 1e-6, steps),
            CheckResult::new("constraint drift ||A qdot||", aqd, 1e-6, steps),
        ],
        Err(e) => {
            let mut r = CheckResult::new("constraint drift", f64::INFINITY, 1e-6, steps);
            r.detail = e.to_string();
            vec![r]
        }
    }
}

fn timed<F: FnOnce() -> Vec<CheckResult>>(f: F) -> Vec<CheckResult> {
    let start = Instant::now();
    let mut out = f();
    let secs = start.elapsed().as_secs_f64() / out.len().max(1) as f64;
    for r in &mut out {
        r.seconds = secs;
    }
    out
}

/// Runs every check. `coad_sign` other than `1` injects the Coriolis
/// mutation into the skew check.
pub fn run_suite(model: &SystemModel, level: Level, coad_sign: f64) -> Vec<CheckResult> {
    let (np, ns, nr, nj, nd) = match level {
        Level::Fast => (100, 30, 30, 5, 1500),
        Level::Thorough => (1000, 200, 200, 50, 6000),
    };
    let mut out = Vec::new();
    out.extend(timed(|| vec![check_projector(model, np, 1)]));
    out.extend(timed(|| vec![check_skew(model, ns, 2, coad_sign)]));
    out.extend(timed(|| vec![check_regressor(model, nr, 3)]));
    out.extend(timed(|| vec![check_magnus_order(4)]));
    out.extend(timed(|| check_jacobians(model, nj, 4)));
    out.extend(timed(|| check_constraint_drift(model, nd, 5)));
    out
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!(
        "{:<38} {:>6} {:>11} {:>9} {:>8} {:>8}\n",
        "check", "status", "worst", "limit", "samples", "time[s]"
    );
    for r in results {
        s += &format!(
            "{:<38} {:>6} {:>11.3e} {:>9.1e} {:>8} {:>8.2}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.worst,
            r.threshold,
            r.samples,
            r.seconds
        );
        if !r.detail.is_empty() {
            s += &format!("  {}", r.detail);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_parsing() {
        assert_eq!("fast".parse::<Level>().unwrap(), Level::Fast);
        assert_eq!("thorough".parse::<Level>().unwrap(), Level::Thorough);
        assert!("quick".parse::<Level>().is_err());
    }

    #[test]
    fn skew_mutation_is_caught() {
        let m = SystemModel::build_default(0.7).unwrap();
        assert!(check_skew(&m, 3, 9, 1.0).passed);
        let bad = check_skew(&m, 3, 9, -1.0);
        assert!(!bad.passed && bad.worst > 1e-3, "{}", bad.worst);
    }

    #[test]
    fn magnus_ratios_near_sixteen() {
        let r = magnus_ratios(3);
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|v| (12.8..19.2).contains(v)), "{r:?}");
    }

    #[test]
    fn consistent_states_close_the_loops() {
        let m = SystemModel::build_default(0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, qd) = random_consistent_state(&m, &mut rng, 0.3, 1.0);
        let cd = constraints::constraint_data(&m, &KinematicsCache::new(&m, &q, None)).unwrap();
        assert!(cd.phi.norm() < 1e-10);
        let aqd = &cd.a * DVector::from_column_slice(qd.as_slice());
        assert!(aqd.norm() < 1e-10 * qd.norm().max(1.0));
        assert!(qd.norm() > 0.1);
    }

    #[test]
    fn failing_result_on_nan() {
        assert!(!CheckResult::new("x", f64::NAN, 1.0, 1).passed);
        let table = format_table(&[CheckResult::new("x", 2.0, 1.0, 1)]);
        assert!(table.contains("FAIL"));
    }
}
