//! Generalized inertia, Coriolis, stiffness, damping, gravity, external and
//! tendon forces, assembled by Gauss quadrature along each rod.

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{self, Frame, KinematicsCache};
use crate::liegroup::{ad, adjoint_inv_apply, coad_wrench, Mat6, Twist, Wrench};
use crate::model::{screw_inertia, GenMat, GenVec, LinkId, ParamVector, SystemModel, TendonMap};

/// Point wrench in the body frame of `link` at backbone coordinate `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentratedWrench {
    pub link: LinkId,
    pub x: f64,
    /// `(moment, force)` in N·m and N.
    pub wrench: [f64; 6],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledDynamics {
    pub mass: GenMat,
    pub coriolis: GenMat,
    pub stiffness: GenMat,
    pub damping: GenMat,
    pub gravity: GenVec,
    pub external: GenVec,
}

impl AssembledDynamics {
    /// `F_ext + F_g - C qdot - K q - D qdot`.
    pub fn passive_force(&self, q: &GenVec, qdot: &GenVec) -> GenVec {
        self.external + self.gravity
            - self.coriolis * qdot
            - self.stiffness * q
            - self.damping * qdot
    }
}

/// Quadrature frames with their weights and link ids.
pub(crate) fn quadrature_frames<'a>(
    model: &'a SystemModel,
    cache: &'a KinematicsCache,
) -> impl Iterator<Item = (LinkId, f64, &'a Frame)> + 'a {
    LinkId::ALL.into_iter().flat_map(move |id| {
        let layout = &model.layouts[id.index()];
        let frames = cache.frames(id);
        layout
            .quad_station
            .iter()
            .zip(&layout.quad_weights)
            .map(move |(s, w)| (id, *w, &frames[*s]))
    })
}

fn link_inertia(theta: &ParamVector, id: LinkId) -> Mat6 {
    screw_inertia(&SystemModel::theta_block(theta, id))
}

pub fn assemble_mass(model: &SystemModel, cache: &KinematicsCache, theta: &ParamVector) -> GenMat {
    let mut m = GenMat::zeros();
    for (id, w, f) in quadrature_frames(model, cache) {
        let mj = link_inertia(theta, id) * f.jac;
        m += w * f.jac.transpose() * mj;
    }
    // Restore exact symmetry lost to rounding.
    (m + m.transpose()) * 0.5
}

/// Body Coriolis operator with `C_b eta = ad*_eta M eta` and `C_b` skew
/// whenever `M` is symmetric. `coad_sign = -1` flips the coadjoint for
/// mutation testing.
pub fn body_coriolis(mm: &Mat6, eta: &Twist, coad_sign: f64) -> Mat6 {
    let a = ad(eta);
    let coad = -coad_sign * a.transpose();
    let w: Wrench = mm * eta;
    0.5 * (mm * a + coad * mm - coad_sign * coad_wrench(&w))
}

pub fn assemble_coriolis(
    model: &SystemModel,
    cache: &KinematicsCache,
    theta: &ParamVector,
) -> GenMat {
    assemble_coriolis_with_sign(model, cache, theta, 1.0)
}

#[doc(hidden)]
pub fn assemble_coriolis_with_sign(
    model: &SystemModel,
    cache: &KinematicsCache,
    theta: &ParamVector,
    coad_sign: f64,
) -> GenMat {
    let mut c = GenMat::zeros();
    if !cache.with_rates {
        return c;
    }
    for (id, w, f) in quadrature_frames(model, cache) {
        let mm = link_inertia(theta, id);
        let inner = mm * f.jac_dot + body_coriolis(&mm, &f.eta, coad_sign) * f.jac;
        c += w * f.jac.transpose() * inner;
    }
    c
}

pub fn assemble_stiffness_damping(model: &SystemModel) -> (GenMat, GenMat) {
    (*model.stiffness(), model.damping())
}

pub fn gravity_force(model: &SystemModel, cache: &KinematicsCache, theta: &ParamVector) -> GenVec {
    let mut fg = GenVec::zeros();
    for (id, w, f) in quadrature_frames(model, cache) {
        let local = adjoint_inv_apply::<1>(&f.pose, &model.gravity);
        fg += w * f.jac.transpose() * (link_inertia(theta, id) * local);
    }
    fg
}

pub fn external_force(
    model: &SystemModel,
    cache: &KinematicsCache,
    wrenches: &[ConcentratedWrench],
) -> Result<GenVec> {
    let mut f = GenVec::zeros();
    for cw in wrenches {
        let length = model.links[cw.link.index()].length;
        if !(0.0..=length).contains(&cw.x) {
            return Err(Error::InvalidArgument(format!(
                "wrench at X = {} outside [0, {length}] on {:?}",
                cw.x, cw.link
            )));
        }
        let jac = match cache.frame(cw.link, cw.x) {
            Ok(frame) => frame.jac,
            Err(_) => kinematics::jacobian(model, &cache.q, cw.link, cw.x)?,
        };
        f += jac.transpose() * Wrench::from(cw.wrench);
    }
    Ok(f)
}

/// Generalized force per unit tension of each channel.
///
/// A tensioned antagonistic pair acts as an internal bending moment of
/// `r_t * u` about the channel axis along the whole routed length, so it
/// loads only that rod's strain coordinates.
pub fn tendon_map(model: &SystemModel) -> TendonMap {
    let mut h = TendonMap::zeros();
    for t in model.tendons.iter().filter(|t| t.active) {
        let axis = t.moment_axis();
        let moment = Twist::new(
            t.radial_offset * axis.x,
            t.radial_offset * axis.y,
            t.radial_offset * axis.z,
            0.0,
            0.0,
            0.0,
        );
        let layout = &model.layouts[t.link.index()];
        for (s, w) in layout.quad_station.iter().zip(&layout.quad_weights) {
            let b = model.basis(t.link, layout.stations[*s]);
            let col = *w * b.transpose() * moment;
            let mut target = h.column_mut(t.channel);
            target += col;
        }
    }
    h
}

/// Length of the tendon routed at section offset `r`: `int |v + w x r| dX`.
fn routed_length(model: &SystemModel, q: &GenVec, link: LinkId, r: &Vector3<f64>) -> f64 {
    let layout = &model.layouts[link.index()];
    layout
        .quad_station
        .iter()
        .zip(&layout.quad_weights)
        .map(|(s, w)| {
            let xi = kinematics::strain_at(model, q, link, layout.stations[*s]);
            let omega = xi.fixed_rows::<3>(0).into_owned();
            let v = xi.fixed_rows::<3>(3).into_owned();
            w * (v + omega.cross(r)).norm()
        })
        .sum()
}

/// Signed pull of each channel: half the difference between the shortening
/// of the pulled tendon and of its antagonist (m).
pub fn tendon_displacements(model: &SystemModel, q: &GenVec) -> Vector3<f64> {
    let mut s = Vector3::zeros();
    let q0 = GenVec::zeros();
    for t in model.tendons.iter().filter(|t| t.active) {
        let r = t.offset();
        let pulled = routed_length(model, &q0, t.link, &r) - routed_length(model, q, t.link, &r);
        let anta = routed_length(model, &q0, t.link, &-r) - routed_length(model, q, t.link, &-r);
        s[t.channel] += 0.5 * (pulled - anta);
    }
    s
}

pub fn assemble(
    model: &SystemModel,
    cache: &KinematicsCache,
    theta: &ParamVector,
    wrenches: &[ConcentratedWrench],
) -> Result<AssembledDynamics> {
    let (stiffness, damping) = assemble_stiffness_damping(model);
    Ok(AssembledDynamics {
        mass: assemble_mass(model, cache, theta),
        coriolis: assemble_coriolis(model, cache, theta),
        stiffness,
        damping,
        gravity: gravity_force(model, cache, theta),
        external: external_force(model, cache, wrenches)?,
    })
}

/// Unit inertia block `E_i` selecting parameter `i` of a link's `(Jx, Jy, Jz, A)`.
pub(crate) fn unit_inertia(i: usize) -> Mat6 {
    let mut th = Vector4::zeros();
    th[i] = 1.0;
    screw_inertia(&th)
}
