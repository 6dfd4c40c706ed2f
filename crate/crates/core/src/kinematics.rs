//! Forward kinematics, geometric Jacobians and their time derivatives along
//! each rod, by fourth-order Magnus steps between backbone stations.
//!
//! The Jacobian recursion is the exact derivative of the discrete forward map,
//! so `J` matches finite differences of the poses to rounding error.

use nalgebra::{SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::liegroup::{
    ad, adjoint_inv_apply, dexp, dexp_dot, exp_se3, magnus_from_samples, Pose, Twist, GAUSS2_NODES,
    SQRT3_OVER_12,
};
use crate::model::{GenVec, Jac, LinkId, SystemModel, N_COORDS, N_LINKS, OBJECT_JOINT};

pub type TaskJac = SMatrix<f64, 3, N_COORDS>;

/// Kinematic state of one backbone station.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub x: f64,
    pub pose: Pose,
    /// Body-frame geometric Jacobian.
    pub jac: Jac,
    /// Zero unless rates were requested.
    pub jac_dot: Jac,
    /// Body twist `jac * qdot`; zero unless rates were requested.
    pub eta: Twist,
}

/// Frames at every station of every link for one `(q, qdot)`.
#[derive(Clone, Debug)]
pub struct KinematicsCache {
    pub q: GenVec,
    pub qdot: GenVec,
    pub with_rates: bool,
    pub links: [Vec<Frame>; N_LINKS],
}

impl KinematicsCache {
    /// Poses and Jacobians; Jacobian rates only when `qdot` is given.
    pub fn new(model: &SystemModel, q: &GenVec, qdot: Option<&GenVec>) -> Self {
        let links = LinkId::ALL.map(|id| {
            propagate(
                model,
                q,
                qdot,
                id,
                &model.layouts[id.index()].stations,
                true,
            )
        });
        Self {
            q: *q,
            qdot: qdot.copied().unwrap_or_else(GenVec::zeros),
            with_rates: qdot.is_some(),
            links,
        }
    }

    pub fn frames(&self, link: LinkId) -> &[Frame] {
        &self.links[link.index()]
    }

    /// Frame at a station coordinate `x` of `link`.
    pub fn frame(&self, link: LinkId, x: f64) -> Result<&Frame> {
        self.links[link.index()]
            .iter()
            .find(|f| (f.x - x).abs() < 1e-12)
            .ok_or_else(|| Error::InvalidArgument(format!("no station at X = {x} on {link:?}")))
    }

    /// Midpoint frame of the object.
    pub fn task_frame(&self, model: &SystemModel) -> &Frame {
        self.frame(LinkId::Object, 0.5 * model.links[2].length)
            .expect("object midpoint is a station")
    }

    /// World position of the object midpoint.
    pub fn task_output(&self, model: &SystemModel) -> Vector3<f64> {
        self.task_frame(model).pose.pos
    }

    /// `d(task_output)/dq`, the body linear rows rotated into the world frame.
    pub fn task_jacobian(&self, model: &SystemModel) -> TaskJac {
        let f = self.task_frame(model);
        f.pose.rot * f.jac.fixed_rows::<3>(3)
    }

    /// Time derivative of [`Self::task_jacobian`]; needs rates.
    pub fn task_jacobian_dot(&self, model: &SystemModel) -> TaskJac {
        let f = self.task_frame(model);
        let w = f.eta.fixed_rows::<3>(0).into_owned();
        f.pose.rot
            * (crate::liegroup::skew(&w) * f.jac.fixed_rows::<3>(3) + f.jac_dot.fixed_rows::<3>(3))
    }
}

/// Pose of the first frame of `link`.
fn link_base(model: &SystemModel, q: &GenVec, link: LinkId) -> Pose {
    match link {
        LinkId::Cr1 => model.base_poses[0],
        LinkId::Cr2 => model.base_poses[1],
        LinkId::Object => {
            if model.object_free_joint {
                let qj: Twist = q.fixed_rows::<6>(OBJECT_JOINT).into_owned();
                model.object_attachment.compose(&exp_se3(&qj))
            } else {
                model.object_attachment
            }
        }
    }
}

fn strain(model: &SystemModel, q: &GenVec, link: LinkId, b: &Jac) -> Twist {
    b * q + model.links[link.index()].reference_strain
}

/// Strain twist of `link` at backbone coordinate `x`.
pub fn strain_at(model: &SystemModel, q: &GenVec, link: LinkId, x: f64) -> Twist {
    strain(model, q, link, &model.basis(link, x))
}

/// Walks `link` through the sorted `points` (the first must be 0).
fn propagate(
    model: &SystemModel,
    q: &GenVec,
    qdot: Option<&GenVec>,
    link: LinkId,
    points: &[f64],
    want_jac: bool,
) -> Vec<Frame> {
    debug_assert!(points.first() == Some(&0.0));
    let mut pose = link_base(model, q, link);
    let mut jac = Jac::zeros();
    let mut jac_dot = Jac::zeros();
    if link == LinkId::Object && model.object_free_joint && want_jac {
        let qj: Twist = -q.fixed_rows::<6>(OBJECT_JOINT).into_owned();
        jac.fixed_columns_mut::<6>(OBJECT_JOINT)
            .copy_from(&dexp(&qj));
        if let Some(qd) = qdot {
            let qjd: Twist = -qd.fixed_rows::<6>(OBJECT_JOINT).into_owned();
            jac_dot
                .fixed_columns_mut::<6>(OBJECT_JOINT)
                .copy_from(&dexp_dot(&qj, &qjd));
        }
    }
    let eta_of = |j: &Jac| qdot.map(|qd| j * qd).unwrap_or_else(Twist::zeros);
    let mut out = Vec::with_capacity(points.len());
    out.push(Frame {
        x: points[0],
        pose,
        jac,
        jac_dot,
        eta: eta_of(&jac),
    });
    for w in points.windows(2) {
        let (a, h) = (w[0], w[1] - w[0]);
        let b1 = model.basis(link, a + GAUSS2_NODES[0] * h);
        let b2 = model.basis(link, a + GAUSS2_NODES[1] * h);
        let xi1 = strain(model, q, link, &b1);
        let xi2 = strain(model, q, link, &b2);
        let omega = magnus_from_samples(&xi1, &xi2, h);
        let step = exp_se3(&omega);
        pose = pose.compose(&step);
        pose.reorthonormalize();
        if want_jac {
            let c = SQRT3_OVER_12 * h * h;
            let s = 0.5 * h * (b1 + b2) + c * (ad(&xi1) * b2 - ad(&xi2) * b1);
            let t = dexp(&omega);
            let next = adjoint_inv_apply(&step, &(jac + t * s));
            if let Some(qd) = qdot {
                let omega_dot = s * qd;
                let s_dot = c * (ad(&(b1 * qd)) * b2 - ad(&(b2 * qd)) * b1);
                let t_dot = dexp_dot(&omega, &omega_dot);
                let delta = adjoint_inv_apply(&step, &(t * omega_dot));
                jac_dot = -ad(&delta) * next
                    + adjoint_inv_apply(&step, &(jac_dot + t_dot * s + t * s_dot));
            }
            jac = next;
        }
        out.push(Frame {
            x: w[1],
            pose,
            jac,
            jac_dot,
            eta: eta_of(&jac),
        });
    }
    out
}

fn points_to(model: &SystemModel, link: LinkId, x: f64) -> Result<Vec<f64>> {
    let length = model.links[link.index()].length;
    if !(0.0..=length).contains(&x) {
        return Err(Error::InvalidArgument(format!(
            "X = {x} outside [0, {length}] on {link:?}"
        )));
    }
    let mut pts: Vec<f64> = model.layouts[link.index()]
        .stations
        .iter()
        .copied()
        .filter(|s| *s < x - 1e-12)
        .collect();
    if pts.is_empty() {
        pts.push(0.0);
    }
    if x > 0.0 {
        pts.push(x);
    }
    Ok(pts)
}

/// Poses at every station of every link.
pub fn forward_kinematics(model: &SystemModel, q: &GenVec) -> [Vec<Pose>; N_LINKS] {
    LinkId::ALL.map(|id| {
        propagate(
            model,
            q,
            None,
            id,
            &model.layouts[id.index()].stations,
            false,
        )
        .into_iter()
        .map(|f| f.pose)
        .collect()
    })
}

/// Pose of `link` at an arbitrary `x` (clamped to the rod).
pub fn link_pose_at(model: &SystemModel, q: &GenVec, link: LinkId, x: f64) -> Pose {
    let length = model.links[link.index()].length;
    let pts = points_to(model, link, x.clamp(0.0, length)).expect("clamped");
    propagate(model, q, None, link, &pts, false)
        .last()
        .expect("non-empty")
        .pose
}

pub fn jacobian(model: &SystemModel, q: &GenVec, link: LinkId, x: f64) -> Result<Jac> {
    let pts = points_to(model, link, x)?;
    Ok(propagate(model, q, None, link, &pts, true)
        .last()
        .expect("non-empty")
        .jac)
}

pub fn jacobian_dot(
    model: &SystemModel,
    q: &GenVec,
    qdot: &GenVec,
    link: LinkId,
    x: f64,
) -> Result<Jac> {
    let pts = points_to(model, link, x)?;
    Ok(propagate(model, q, Some(qdot), link, &pts, true)
        .last()
        .expect("non-empty")
        .jac_dot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{hat, log_se3};
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> SystemModel {
        SystemModel::build_default(1.0).unwrap()
    }

    fn random_q(rng: &mut ChaCha8Rng, scale: f64) -> GenVec {
        GenVec::from_fn(|_, _| scale * rng.gen_range(-1.0..1.0))
    }

    /// RK4 on `g' = g xi^` with homogeneous matrices.
    fn fine_pose(m: &SystemModel, q: &GenVec, link: LinkId, x_end: f64, steps: usize) -> Pose {
        let mut g = link_base(m, q, link).to_matrix();
        let h = x_end / steps as f64;
        let f = |g: &Matrix4<f64>, x: f64| g * hat(&strain_at(m, q, link, x));
        for i in 0..steps {
            let x = i as f64 * h;
            let k1 = f(&g, x);
            let k2 = f(&(g + 0.5 * h * k1), x + 0.5 * h);
            let k3 = f(&(g + 0.5 * h * k2), x + 0.5 * h);
            let k4 = f(&(g + h * k3), x + h);
            g += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        Pose::from_matrix(&g)
    }

    #[test]
    fn zero_strain_is_straight() {
        let m = model();
        let q = GenVec::zeros();
        let tip = link_pose_at(&m, &q, LinkId::Cr1, 0.4);
        let base = m.base_poses[0];
        assert!((tip.pos - (base.pos + base.rot * Vector3::new(0.4, 0.0, 0.0))).norm() < 1e-14);
        assert!((tip.rot - base.rot).norm() < 1e-14);
    }

    #[test]
    fn constant_curvature_arc() {
        let m = model();
        let mut q = GenVec::zeros();
        let kappa = 2.5;
        q[2] = kappa;
        let tip = link_pose_at(&m, &q, LinkId::Cr1, 0.4);
        let local = m.base_poses[0].inverse().compose(&tip);
        let th = kappa * 0.4;
        let expected = Vector3::new(th.sin() / kappa, (1.0 - th.cos()) / kappa, 0.0);
        assert!((local.pos - expected).norm() < 1e-14);
    }

    #[test]
    fn station_poses_match_fine_integration() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let q = random_q(&mut rng, 1.0);
            for id in LinkId::ALL {
                let l = m.links[id.index()].length;
                let a = link_pose_at(&m, &q, id, l);
                let b = fine_pose(&m, &q, id, l, 4000);
                worst = worst
                    .max((a.pos - b.pos).norm())
                    .max((a.rot - b.rot).norm());
            }
        }
        // Fourth-order steps over nine stations; error grows with strain cubed.
        assert!(worst < 1e-6, "worst {worst}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-7;
        for _ in 0..5 {
            let q = random_q(&mut rng, 2.0);
            let cache = KinematicsCache::new(&m, &q, None);
            for id in LinkId::ALL {
                for f in cache.frames(id) {
                    for i in 0..N_COORDS {
                        let mut qp = q;
                        qp[i] += eps;
                        let gp = link_pose_at(&m, &qp, id, f.x);
                        let fd = log_se3(&f.pose.inverse().compose(&gp)) / eps;
                        let err = (fd - f.jac.column(i)).amax();
                        assert!(err < 1e-6, "{id:?} X={} col {i}: {err}", f.x);
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_dot_matches_central_difference() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dt = 1e-6;
        for _ in 0..5 {
            let q = random_q(&mut rng, 2.0);
            let qd = random_q(&mut rng, 3.0);
            let cache = KinematicsCache::new(&m, &q, Some(&qd));
            let plus = KinematicsCache::new(&m, &(q + dt * qd), None);
            let minus = KinematicsCache::new(&m, &(q - dt * qd), None);
            for id in LinkId::ALL {
                let k = id.index();
                for (s, f) in cache.links[k].iter().enumerate() {
                    let fd = (plus.links[k][s].jac - minus.links[k][s].jac) / (2.0 * dt);
                    let err = (fd - f.jac_dot).amax();
                    assert!(err < 1e-5, "{id:?} station {s}: {err}");
                    assert!((f.eta - f.jac * qd).amax() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn arbitrary_point_queries_agree_with_cache() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_q(&mut rng, 1.0);
        let qd = random_q(&mut rng, 1.0);
        let cache = KinematicsCache::new(&m, &q, Some(&qd));
        let f = cache.frame(LinkId::Cr2, 0.4).unwrap();
        assert!((jacobian(&m, &q, LinkId::Cr2, 0.4).unwrap() - f.jac).amax() < 1e-13);
        assert!((jacobian_dot(&m, &q, &qd, LinkId::Cr2, 0.4).unwrap() - f.jac_dot).amax() < 1e-12);
        assert!(jacobian(&m, &q, LinkId::Cr2, 0.5).is_err());
        assert!(cache.frame(LinkId::Cr2, 0.123).is_err());
    }

    #[test]
    fn task_jacobian_matches_finite_differences() {
        let m = model();
        let q = m.arch_guess();
        let cache = KinematicsCache::new(&m, &q, None);
        let jt = cache.task_jacobian(&m);
        let x0 = cache.task_output(&m);
        for i in 0..N_COORDS {
            let mut qp = q;
            qp[i] += 1e-7;
            let x1 = KinematicsCache::new(&m, &qp, None).task_output(&m);
            assert!(((x1 - x0) / 1e-7 - jt.column(i)).amax() < 1e-6);
        }
    }

    #[test]
    fn task_jacobian_dot_matches_central_difference() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = m.arch_guess() + random_q(&mut rng, 0.3);
        let qd = random_q(&mut rng, 1.0);
        let dt = 1e-6;
        let c = KinematicsCache::new(&m, &q, Some(&qd));
        let p = KinematicsCache::new(&m, &(q + dt * qd), None).task_jacobian(&m);
        let n = KinematicsCache::new(&m, &(q - dt * qd), None).task_jacobian(&m);
        assert!(((p - n) / (2.0 * dt) - c.task_jacobian_dot(&m)).amax() < 1e-6);
    }

    #[test]
    fn arch_guess_closes_first_joint_and_rises() {
        let m = model();
        let q = m.arch_guess();
        let cache = KinematicsCache::new(&m, &q, None);
        let tip = cache.frame(LinkId::Cr1, 0.4).unwrap().pose;
        let obj0 = cache.frame(LinkId::Object, 0.0).unwrap().pose;
        assert!((tip.pos - obj0.pos).norm() < 1e-14);
        let x = cache.task_output(&m);
        assert!(x.z > 0.25 && x.z < 0.4, "{x}");
        assert!((x.x - 0.3145).abs() < 0.02, "{x}");
    }
}
