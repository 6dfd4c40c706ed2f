//! Loop closures: residual, Pfaffian Jacobian and its rate, the orthogonal
//! projector onto admissible velocities, closure assembly, static
//! equilibrium and the multiplier solve used by the plant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, AssembledDynamics};
use crate::error::{Error, Result};
use crate::kinematics::KinematicsCache;
use crate::liegroup::{ad, adjoint_inv_apply, dexp, log_se3, Mat6, Twist};
use crate::model::{GenMat, GenVec, ParamVector, SystemModel, N_COORDS};

/// Relative singular value below which a direction counts as rank loss.
pub const SVD_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Baumgarte {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for Baumgarte {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            beta: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintData {
    pub a: DMatrix<f64>,
    pub a_dot: DMatrix<f64>,
    pub projector: GenMat,
    pub rank: usize,
    pub phi: DVector<f64>,
}

/// Residuals `Phi_i = log(g_B^-1 g_A')`, stacked and projected on the
/// constrained directions.
pub fn residual(model: &SystemModel, cache: &KinematicsCache) -> Result<DVector<f64>> {
    let mut phi = DVector::zeros(model.n_constraints());
    let mut row = 0;
    for j in &model.loop_joints {
        let ga = cache.frame(j.link_a, j.x_a)?.pose.compose(&j.offset_a);
        let gb = cache.frame(j.link_b, j.x_b)?.pose;
        let rel = log_se3(&gb.inverse().compose(&ga));
        let bp = j.constrained.columns(0, j.n_constraints);
        phi.rows_mut(row, j.n_constraints)
            .copy_from(&(bp.transpose() * rel));
        row += j.n_constraints;
    }
    Ok(phi)
}

/// `(A, A_dot)`; `A_dot` is zero when the cache carries no rates.
pub fn constraint_jacobian(
    model: &SystemModel,
    cache: &KinematicsCache,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let nc = model.n_constraints();
    let mut a = DMatrix::zeros(nc, N_COORDS);
    let mut a_dot = DMatrix::zeros(nc, N_COORDS);
    let mut row = 0;
    for j in &model.loop_joints {
        let fa = cache.frame(j.link_a, j.x_a)?;
        let fb = cache.frame(j.link_b, j.x_b)?;
        let ga = fa.pose.compose(&j.offset_a);
        // Relative pose of joint frame A' seen from B.
        let h = fb.pose.inverse().compose(&ga);
        let ja = adjoint_inv_apply(&j.offset_a, &fa.jac);
        let jb = adjoint_inv_apply(&h, &fb.jac);
        let rel = ja - jb;
        let bp = j.constrained.columns(0, j.n_constraints).transpose();
        a.rows_mut(row, j.n_constraints).copy_from(&(&bp * rel));
        if cache.with_rates {
            let nu: Twist = rel * cache.qdot;
            let rel_dot = adjoint_inv_apply(&j.offset_a, &fa.jac_dot)
                - adjoint_inv_apply(&h, &fb.jac_dot)
                + ad(&nu) * jb;
            a_dot
                .rows_mut(row, j.n_constraints)
                .copy_from(&(&bp * rel_dot));
        }
        row += j.n_constraints;
    }
    Ok((a, a_dot))
}

/// `P = I - A^+ A` from the SVD of `A`, with its numerical rank.
pub fn projector(a: &DMatrix<f64>) -> (GenMat, usize) {
    assert_eq!(
        a.ncols(),
        N_COORDS,
        "constraint Jacobian must have 16 columns"
    );
    if a.nrows() == 0 || a.amax() == 0.0 {
        return (GenMat::identity(), 0);
    }
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let smax = svd.singular_values.max();
    let mut p = GenMat::identity();
    let mut rank = 0;
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s > SVD_TOL * smax {
            rank += 1;
            let v = v_t.row(k);
            for r in 0..N_COORDS {
                for c in 0..N_COORDS {
                    p[(r, c)] -= v[r] * v[c];
                }
            }
        }
    }
    (0.5 * (p + p.transpose()), rank)
}

pub fn constraint_data(model: &SystemModel, cache: &KinematicsCache) -> Result<ConstraintData> {
    let (a, a_dot) = constraint_jacobian(model, cache)?;
    let (projector, rank) = projector(&a);
    Ok(ConstraintData {
        phi: residual(model, cache)?,
        a,
        a_dot,
        projector,
        rank,
    })
}

/// Exact derivative of the residual: `dPhi/dq = dexp(-Phi)^-1 A` per joint.
fn residual_jacobian(
    model: &SystemModel,
    cache: &KinematicsCache,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (a, _) = constraint_jacobian(model, cache)?;
    let phi = residual(model, cache)?;
    let mut jac = a.clone();
    let mut row = 0;
    for j in &model.loop_joints {
        if j.n_constraints == 6 && j.constrained == Mat6::identity() {
            let rel: Twist = phi
                .rows(row, 6)
                .into_owned()
                .fixed_rows::<6>(0)
                .into_owned();
            let inv = dexp(&-rel)
                .try_inverse()
                .ok_or_else(|| Error::InvalidArgument("log map singular".into()))?;
            let block = a.rows(row, 6).into_owned();
            jac.rows_mut(row, 6)
                .copy_from(&(DMatrix::from_column_slice(6, 6, inv.as_slice()) * block));
        }
        row += j.n_constraints;
    }
    Ok((phi, jac))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosureReport {
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

/// Newton iteration with minimal-norm steps on `Phi(q) = 0`.
pub fn assemble_closure(model: &SystemModel, q_guess: &GenVec) -> Result<(GenVec, ClosureReport)> {
    const TOL: f64 = 1e-10;
    const MAX_ITER: usize = 100;
    let mut q = *q_guess;
    let mut history = Vec::new();
    for it in 0..=MAX_ITER {
        let cache = KinematicsCache::new(model, &q, None);
        let (phi, jac) = residual_jacobian(model, &cache)?;
        let norm = phi.norm();
        history.push(norm);
        if norm < TOL {
            return Ok((
                q,
                ClosureReport {
                    iterations: it,
                    residual_history: history,
                },
            ));
        }
        if it == MAX_ITER || !norm.is_finite() {
            break;
        }
        let step = jac
            .svd(true, true)
            .solve(&phi, SVD_TOL)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        // Damp large steps; full steps near the solution.
        let scale = (0.5 / step.amax()).min(1.0);
        for i in 0..N_COORDS {
            q[i] -= scale * step[i];
        }
    }
    Err(Error::Assembly {
        iterations: MAX_ITER,
        residual: *history.last().unwrap_or(&f64::NAN),
    })
}

/// Static equilibrium `K q = F_g(q) + A^T lambda`, `Phi(q) = 0` of the
/// unactuated chain, by Newton iteration with a finite-difference Jacobian.
pub fn static_equilibrium(
    model: &SystemModel,
    q_guess: &GenVec,
    theta: &ParamVector,
) -> Result<(GenVec, DVector<f64>)> {
    let nc = model.n_constraints();
    let n = N_COORDS + nc;
    let (q0, _) = assemble_closure(model, q_guess)?;
    let eval = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let q = GenVec::from_iterator(z.rows(0, N_COORDS).iter().copied());
        let lambda = z.rows(N_COORDS, nc).into_owned();
        let cache = KinematicsCache::new(model, &q, None);
        let fg = dynamics::gravity_force(model, &cache, theta);
        let (a, _) = constraint_jacobian(model, &cache)?;
        let force = model.stiffness() * q - fg;
        let mut r = DVector::zeros(n);
        let reaction = a.transpose() * &lambda;
        for i in 0..N_COORDS {
            r[i] = force[i] - reaction[i];
        }
        r.rows_mut(N_COORDS, nc)
            .copy_from(&residual(model, &cache)?);
        Ok(r)
    };
    let mut z = DVector::zeros(n);
    z.rows_mut(0, N_COORDS).copy_from(&q0);
    let force_scale = model.stiffness().amax();
    for _ in 0..50 {
        let r = eval(&z)?;
        let force_res = r.rows(0, N_COORDS).amax() / force_scale;
        let phi_res = r.rows(N_COORDS, nc).amax();
        if force_res < 1e-12 && phi_res < 1e-12 {
            let q = GenVec::from_iterator(z.rows(0, N_COORDS).iter().copied());
            return Ok((q, z.rows(N_COORDS, nc).into_owned()));
        }
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            let h = 1e-7 * z[k].abs().max(1e-2);
            let mut zp = z.clone();
            zp[k] += h;
            let mut zm = z.clone();
            zm[k] -= h;
            let col = (eval(&zp)? - eval(&zm)?) / (2.0 * h);
            jac.set_column(k, &col);
        }
        let step = jac
            .svd(true, true)
            .solve(&r, 1e-14)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        z -= step;
    }
    let r = eval(&z)?;
    Err(Error::Assembly {
        iterations: 50,
        residual: r.amax(),
    })
}

/// Baumgarte right-hand side `-A_dot qdot - 2 alpha A qdot - beta^2 Phi`.
pub fn stabilized_rhs(cd: &ConstraintData, qdot: &GenVec, gains: Baumgarte) -> DVector<f64> {
    let v = DVector::from_column_slice(qdot.as_slice());
    -(&cd.a_dot * &v) - 2.0 * gains.alpha * (&cd.a * &v) - gains.beta * gains.beta * &cd.phi
}

/// Solves `[M, -A^T; A, 0] [qddot; lambda] = [tau + passive; gamma]` through
/// the Schur complement `A M^-1 A^T`, pseudo-inverted when `A` loses rank.
pub fn constrained_accel(
    dynamics: &AssembledDynamics,
    cd: &ConstraintData,
    q: &GenVec,
    qdot: &GenVec,
    tau: &GenVec,
    gains: Baumgarte,
) -> Result<(GenVec, DVector<f64>)> {
    let h = tau + dynamics.passive_force(q, qdot);
    let chol = dynamics.mass.cholesky().ok_or_else(|| {
        Error::SingularInertia(format!(
            "Cholesky failed, max |M| = {:.3e}",
            dynamics.mass.amax()
        ))
    })?;
    let minv_h = chol.solve(&h);
    let gamma = stabilized_rhs(cd, qdot, gains);
    let nc = cd.a.nrows();
    if nc == 0 {
        return Ok((minv_h, DVector::zeros(0)));
    }
    let at = cd.a.transpose();
    let mut minv_at = DMatrix::zeros(N_COORDS, nc);
    for k in 0..nc {
        let col = GenVec::from_iterator(at.column(k).iter().copied());
        minv_at.set_column(k, &chol.solve(&col));
    }
    let schur = &cd.a * &minv_at;
    let svd = schur.svd(true, true);
    let solve = |r: &DVector<f64>| -> Result<DVector<f64>> {
        let l = svd
            .solve(r, SVD_TOL * svd.singular_values.max())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        if l.iter().all(|v| v.is_finite()) {
            Ok(l)
        } else {
            Err(Error::SingularInertia("non-finite multipliers".into()))
        }
    };
    let minv_h_d = DVector::from_column_slice(minv_h.as_slice());
    let mut lambda = solve(&(&gamma - &cd.a * &minv_h_d))?;
    // One refinement pass recovers digits lost to the Schur conditioning.
    let qdd = &minv_h_d + &minv_at * &lambda;
    lambda += solve(&(&gamma - &cd.a * &qdd))?;
    let qddot = minv_h + GenVec::from_iterator((&minv_at * &lambda).iter().copied());
    Ok((qddot, lambda))
}
