//! Parameter-linear regressors: `Y(q, qdot, v, a) theta = M a + C v - F_g`.

use nalgebra::SMatrix;

use crate::dynamics::{body_coriolis, quadrature_frames, unit_inertia};
use crate::kinematics::KinematicsCache;
use crate::liegroup::{adjoint_inv_apply, Mat6};
use crate::model::{GenVec, SystemModel, N_COORDS, N_PARAMS};

pub type Regressor = SMatrix<f64, N_COORDS, N_PARAMS>;

/// Selectors `E_x, E_y, E_z, E_A`; their sum is the identity.
pub fn selectors() -> [Mat6; 4] {
    [0, 1, 2, 3].map(unit_inertia)
}

#[derive(Clone, Copy, Debug, Default)]
struct Terms {
    mass: bool,
    coriolis: bool,
    gravity: bool,
}

fn build(
    model: &SystemModel,
    cache: &KinematicsCache,
    a: &GenVec,
    v: &GenVec,
    terms: Terms,
) -> Regressor {
    let sel = selectors();
    let mut y = Regressor::zeros();
    for (id, w, f) in quadrature_frames(model, cache) {
        let ja = f.jac * a;
        let jv = f.jac * v;
        let jdv = f.jac_dot * v;
        let grav = adjoint_inv_apply::<1>(&f.pose, &model.gravity);
        let jt = f.jac.transpose();
        for (i, e) in sel.iter().enumerate() {
            let mut body = nalgebra::Vector6::zeros();
            if terms.mass {
                body += e * ja;
            }
            if terms.coriolis && cache.with_rates {
                body += e * jdv + body_coriolis(e, &f.eta, 1.0) * jv;
            }
            if terms.gravity {
                body -= e * grav;
            }
            let mut col = y.column_mut(4 * id.index() + i);
            col += w * (jt * body);
        }
    }
    y
}

/// Columns `(int_k J^T E_i J dX) a`.
pub fn regressor_m(model: &SystemModel, cache: &KinematicsCache, a: &GenVec) -> Regressor {
    build(
        model,
        cache,
        a,
        &GenVec::zeros(),
        Terms {
            mass: true,
            ..Terms::default()
        },
    )
}

/// Columns `(int_k J^T (E_i J_dot + C_b(E_i, J qdot) J) dX) v`, with the
/// state velocity taken from the cache.
pub fn regressor_c(model: &SystemModel, cache: &KinematicsCache, v: &GenVec) -> Regressor {
    build(
        model,
        cache,
        &GenVec::zeros(),
        v,
        Terms {
            coriolis: true,
            ..Terms::default()
        },
    )
}

/// Gravity regressor with `Y_g theta = F_g`.
pub fn regressor_g(model: &SystemModel, cache: &KinematicsCache) -> Regressor {
    -build(
        model,
        cache,
        &GenVec::zeros(),
        &GenVec::zeros(),
        Terms {
            gravity: true,
            ..Terms::default()
        },
    )
}

/// `Y_M(qddot_r) + Y_C(qdot_r) - Y_g` in one quadrature pass.
pub fn control_regressor(
    model: &SystemModel,
    cache: &KinematicsCache,
    qdot_r: &GenVec,
    qddot_r: &GenVec,
) -> Regressor {
    build(
        model,
        cache,
        qddot_r,
        qdot_r,
        Terms {
            mass: true,
            coriolis: true,
            gravity: true,
        },
    )
}
