//! Acceptance criteria, each printed as one PASS/FAIL line.
//!
//! Runs the full 20 s regulation and tracking scenarios with the bundled
//! configurations; the process exits non-zero if any criterion fails.

use std::path::PathBuf;
use std::time::Instant;

use ccr_core::config::ScenarioConfig;
use ccr_core::control::ControllerVariant;
use ccr_core::model::SystemModel;
use ccr_core::report;
use ccr_core::sim::{self, RunOutput, Scenario};
use ccr_core::verify;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome {
        id,
        name,
        passed,
        detail,
    }
}

/// Full-rate samples kept for the Lyapunov and settling checks.
#[derive(Clone, Copy)]
struct Sample {
    t: f64,
    e: f64,
    v: f64,
    saturated: bool,
}

struct Run {
    out: RunOutput,
    samples: Vec<Sample>,
    trace: Vec<u8>,
}

fn config(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn execute(model: &SystemModel, sc: &Scenario) -> Result<Run, String> {
    let state = sim::initial_state(model, sc).map_err(|e| e.to_string())?;
    let mut samples = Vec::with_capacity(sc.n_steps());
    let out = sim::run_from(model, sc, state, |r| {
        samples.push(Sample {
            t: r.t,
            e: r.e_norm,
            v: r.lyapunov,
            saturated: r.saturated,
        })
    })
    .map_err(|e| e.to_string())?;
    let mut trace = Vec::new();
    report::write_trace(&mut trace, &out.records).map_err(|e| e.to_string())?;
    Ok(Run {
        out,
        samples,
        trace,
    })
}

fn timed_check(id: usize, name: &'static str, budget: f64, r: verify::CheckResult) -> Outcome {
    let ok = r.passed && r.seconds <= budget;
    outcome(
        id,
        name,
        ok,
        format!(
            "worst {:.3e} (limit {:.0e}), {} samples, {:.2} s (budget {budget} s)",
            r.worst, r.threshold, r.samples, r.seconds
        ),
    )
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed().as_secs_f64())
}

/// Per-record Lyapunov increases on unsaturated segments, and the decay
/// from the post-transient peak to the end of the run.
fn lyapunov_stats(samples: &[Sample], transient: f64) -> (f64, usize, f64) {
    let mut worst_rise = 0.0f64;
    let mut pairs = 0;
    for w in samples.windows(2) {
        if !w[0].saturated && !w[1].saturated {
            pairs += 1;
            let rise = (w[1].v - w[0].v) / w[0].v.max(f64::MIN_POSITIVE);
            worst_rise = worst_rise.max(rise);
        }
    }
    let peak = samples
        .iter()
        .filter(|s| s.t >= transient)
        .map(|s| s.v)
        .fold(0.0, f64::max);
    let last = samples.last().map_or(f64::NAN, |s| s.v);
    (worst_rise, pairs, peak / last)
}

fn main() {
    let start = Instant::now();
    let model = SystemModel::build_default(0.7).expect("default model");
    let mut results = Vec::new();

    let (r, secs) = timed(|| verify::check_projector(&model, 1000, 11));
    results.push(timed_check(
        1,
        "projector algebra",
        10.0,
        verify::CheckResult { seconds: secs, ..r },
    ));

    let (r, secs) = timed(|| verify::check_skew(&model, 200, 12, 1.0));
    let mutant = verify::check_skew(&model, 20, 12, -1.0);
    let mut o = timed_check(
        2,
        "skew symmetry",
        30.0,
        verify::CheckResult { seconds: secs, ..r },
    );
    o.passed &= !mutant.passed;
    o.detail += &format!("; coad-sign mutant worst {:.3e}", mutant.worst);
    results.push(o);

    let (r, secs) = timed(|| verify::check_regressor(&model, 200, 13));
    results.push(timed_check(
        3,
        "regressor identity",
        30.0,
        verify::CheckResult { seconds: secs, ..r },
    ));

    let ratios = verify::magnus_ratios(4);
    let ok = ratios.len() == 4 && ratios.iter().all(|r| (16.0 * 0.8..=16.0 * 1.2).contains(r));
    results.push(outcome(
        4,
        "Magnus order",
        ok,
        format!("halving ratios {ratios:.3?} (target 16 +- 20%)"),
    ));

    let (ej, ejd) = verify::jacobian_errors(&model, 50, 14);
    results.push(outcome(
        5,
        "Jacobian correctness",
        ej < 1e-6 && ejd < 1e-5,
        format!("J max column error {ej:.3e} (< 1e-6), J_dot {ejd:.3e} (< 1e-5)"),
    ));

    // Closed-loop runs, all on independent workers.
    let reg_cfg = config("regulation_adaptive.json");
    let trk_cfg = config("tracking_adaptive.json");
    let reg = reg_cfg.scenario().expect("regulation config");
    let trk = trk_cfg.scenario().expect("tracking config");
    let with = |sc: &Scenario, v: ControllerVariant| Scenario {
        variant: v,
        ..sc.clone()
    };
    let jobs = vec![
        with(&reg, ControllerVariant::Adaptive),
        with(&reg, ControllerVariant::Nominal),
        with(&reg, ControllerVariant::Baseline),
        with(&trk, ControllerVariant::Adaptive),
        with(&trk, ControllerVariant::Nominal),
        with(&trk, ControllerVariant::Baseline),
        with(&reg, ControllerVariant::Adaptive),
    ];
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let runs = sim::parallel_map(&jobs, threads, |sc| execute(&model, sc));
    let [reg_a, reg_n, reg_b, trk_a, trk_n, trk_b, reg_a2]: [Result<Run, String>; 7] =
        runs.try_into().ok().expect("seven runs");
    let describe = |r: &Result<Run, String>| match r {
        Ok(_) => String::new(),
        Err(e) => format!("run aborted: {e}"),
    };

    // 6. Constraint integrity over the adaptive regulation run.
    results.push(match &reg_a {
        Ok(run) => {
            let m = &run.out.metrics;
            outcome(
                6,
                "constraint integrity",
                m.max_phi < 1e-6 && m.max_aqdot < 1e-6 && m.max_ps_residual < 1e-8,
                format!(
                    "max |Phi| {:.3e} (< 1e-6), max |A qdot| {:.3e} (< 1e-6), max |Ps - s| {:.3e} (< 1e-8)",
                    m.max_phi, m.max_aqdot, m.max_ps_residual
                ),
            )
        }
        Err(_) => outcome(6, "constraint integrity", false, describe(&reg_a)),
    });

    // 7. Lyapunov monotonicity on both adaptive runs.
    results.push(match (&reg_a, &trk_a) {
        (Ok(ra), Ok(ta)) => {
            let mut ok = true;
            let mut detail = Vec::new();
            for (label, run, sc) in [("regulation", ra, &reg), ("tracking", ta, &trk)] {
                let (rise, pairs, decay) = lyapunov_stats(&run.samples, sc.transient);
                ok &= rise <= 1e-6 && decay >= 1e3;
                detail.push(format!(
                    "{label}: worst relative rise {rise:.3e} over {pairs} unsaturated steps, peak/final {decay:.3e}"
                ));
            }
            outcome(7, "Lyapunov monotonicity", ok, detail.join("; "))
        }
        _ => outcome(
            7,
            "Lyapunov monotonicity",
            false,
            format!("{} {}", describe(&reg_a), describe(&trk_a)),
        ),
    });

    // 8. Regulation reproduction.
    results.push(match (&reg_a, &reg_n, &reg_b) {
        (Ok(a), Ok(n), Ok(b)) => {
            let (a, n, b) = (&a.out.metrics, &n.out.metrics, &b.out.metrics);
            let in_band = (1.0..=3.1).contains(&a.rmse_mm);
            let tv = n.tv_e_mm >= 3.0 * a.tv_e_mm;
            let order = a.rmse_mm <= b.rmse_mm && b.rmse_mm <= n.rmse_mm;
            outcome(
                8,
                "regulation reproduction",
                in_band && tv && order,
                format!(
                    "RMSE adaptive/baseline/nominal {:.3}/{:.3}/{:.3} mm (adaptive in [1.0, 3.1]: {in_band}, ordered: {order}); TV_e nominal {:.2} vs adaptive {:.2} mm (>= 3x: {tv})",
                    a.rmse_mm, b.rmse_mm, n.rmse_mm, n.tv_e_mm, a.tv_e_mm
                ),
            )
        }
        _ => outcome(
            8,
            "regulation reproduction",
            false,
            format!("{} {} {}", describe(&reg_a), describe(&reg_n), describe(&reg_b)),
        ),
    });

    // 9. Tracking reproduction.
    results.push(match (&trk_a, &trk_n, &trk_b) {
        (Ok(a), Ok(n), Ok(b)) => {
            let settle = a.samples.iter().find(|s| s.e < 1e-3).map(|s| s.t);
            let settled = settle.is_some_and(|t| t <= 0.5);
            let (am, nm, bm) = (&a.out.metrics, &n.out.metrics, &b.out.metrics);
            let rmse = am.rmse_mm < 1.1;
            let late = am.saturation_events_after_transient == 0;
            let sep = |o: usize| o > am.saturation_events && o >= 100 * am.saturation_events;
            let separated = sep(nm.saturation_events) && sep(bm.saturation_events);
            outcome(
                9,
                "tracking reproduction",
                settled && rmse && late && separated,
                format!(
                    "first |e| < 1 mm at {} (<= 0.5 s: {settled}); RMSE {:.3} mm (< 1.1: {rmse}); adaptive saturation after 0.5 s {} (= 0: {late}); saturation adaptive/nominal/baseline {}/{}/{} (>= 100x: {separated})",
                    settle.map_or("never".into(), |t| format!("{t:.4} s")),
                    am.rmse_mm,
                    am.saturation_events_after_transient,
                    am.saturation_events,
                    nm.saturation_events,
                    bm.saturation_events
                ),
            )
        }
        _ => outcome(
            9,
            "tracking reproduction",
            false,
            format!("{} {} {}", describe(&trk_a), describe(&trk_n), describe(&trk_b)),
        ),
    });

    // 10. Real-time budget.
    results.push(match &reg_a {
        Ok(run) => {
            let m = &run.out.metrics;
            outcome(
                10,
                "real-time budget",
                m.mean_step_time_ms < 5.0,
                format!(
                    "mean step {:.4} ms (< 5 ms), real-time factor {:.2} at dt {} s ({} concurrent runs)",
                    m.mean_step_time_ms, m.real_time_factor, reg.dt, jobs.len().min(threads)
                ),
            )
        }
        Err(_) => outcome(10, "real-time budget", false, describe(&reg_a)),
    });

    // 11. Determinism.
    results.push(match (&reg_a, &reg_a2) {
        (Ok(a), Ok(b)) => outcome(
            11,
            "determinism",
            !a.trace.is_empty() && a.trace == b.trace,
            format!(
                "two regulation_adaptive.json traces, {} and {} bytes, identical: {}",
                a.trace.len(),
                b.trace.len(),
                a.trace == b.trace
            ),
        ),
        _ => outcome(
            11,
            "determinism",
            false,
            format!("{} {}", describe(&reg_a), describe(&reg_a2)),
        ),
    });

    println!();
    for o in &results {
        println!(
            "{} {:>2} {:<24} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail
        );
    }
    let failed = results.iter().filter(|o| !o.passed).count();
    println!(
        "\nacceptance: {} passed, {failed} failed ({:.1} s)",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
