//! Immutable description of the closed chain: two continuum robots, the
//! flexible object, their strain bases, base placements, loop joints and
//! tendon routing.
//!
//! Generalized coordinates (16):
//!
//! | range  | meaning                                              |
//! |--------|------------------------------------------------------|
//! | 0..4   | CR1 bending `(wy0, wy1, wz0, wz1)`, affine in `X/L`  |
//! | 4..8   | CR2 bending, same layout                             |
//! | 8..14  | object free joint, exponential coordinates          |
//! | 14..16 | object bending `(wy0, wz0)`, constant                |

use std::f64::consts::PI;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{exp_se3, Mat6, Pose, Twist};
use crate::quadrature::GaussRule;

pub const N_COORDS: usize = 16;
pub const N_PARAMS: usize = 12;
pub const N_LINKS: usize = 3;
pub const N_CHANNELS: usize = 3;

pub type GenVec = SVector<f64, N_COORDS>;
pub type GenMat = SMatrix<f64, N_COORDS, N_COORDS>;
/// 6×16 block: a geometric Jacobian or a strain basis in global columns.
pub type Jac = SMatrix<f64, 6, N_COORDS>;
/// Stacked inertial parameters `[theta_CR1; theta_CR2; theta_obj]`,
/// each `rho * (Jx, Jy, Jz, A)`.
pub type ParamVector = SVector<f64, N_PARAMS>;
pub type TendonMap = SMatrix<f64, N_COORDS, N_CHANNELS>;

/// First coordinate of the object's free joint block.
pub const OBJECT_JOINT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkId {
    Cr1,
    Cr2,
    Object,
}

impl LinkId {
    pub const ALL: [LinkId; N_LINKS] = [LinkId::Cr1, LinkId::Cr2, LinkId::Object];

    pub fn index(self) -> usize {
        match self {
            LinkId::Cr1 => 0,
            LinkId::Cr2 => 1,
            LinkId::Object => 2,
        }
    }
}

/// Polynomial order per strain row; `-1` marks an inactive row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StrainBasisSpec {
    pub orders: [i8; 6],
}

impl StrainBasisSpec {
    /// Two affine bending rows (wy, wz).
    pub fn affine_bending() -> Self {
        Self {
            orders: [-1, 1, 1, -1, -1, -1],
        }
    }

    /// Two constant bending rows (wy, wz).
    pub fn constant_bending() -> Self {
        Self {
            orders: [-1, 0, 0, -1, -1, -1],
        }
    }

    pub fn n_coords(&self) -> usize {
        self.orders
            .iter()
            .filter(|o| **o >= 0)
            .map(|o| *o as usize + 1)
            .sum()
    }

    /// Writes `B(X)` into columns `first..first + n_coords()` of `out`.
    /// `s` is the normalised backbone coordinate `X / L`.
    pub fn write_into(&self, s: f64, first: usize, out: &mut Jac) {
        let mut col = first;
        for (row, order) in self.orders.iter().enumerate() {
            if *order < 0 {
                continue;
            }
            let mut power = 1.0;
            for _ in 0..=*order {
                out[(row, col)] = power;
                power *= s;
                col += 1;
            }
        }
    }
}

/// One Cosserat rod with a single division.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLinkSpec {
    pub length: f64,
    pub radius: f64,
    pub density: f64,
    pub youngs: f64,
    pub poisson: f64,
    pub quadrature_points: usize,
    pub basis: StrainBasisSpec,
    pub reference_strain: Twist,
}

impl SoftLinkSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("length", self.length),
            ("radius", self.radius),
            ("density", self.density),
            ("youngs", self.youngs),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if !(self.poisson > 0.0 && self.poisson < 0.5) {
            return Err(Error::Config(format!(
                "poisson ratio must lie in (0, 0.5), got {}",
                self.poisson
            )));
        }
        if self.quadrature_points < 2 {
            return Err(Error::Config(
                "at least two quadrature points per link".into(),
            ));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        PI * self.radius * self.radius
    }

    pub fn j_y(&self) -> f64 {
        PI * self.radius.powi(4) / 4.0
    }

    pub fn j_z(&self) -> f64 {
        self.j_y()
    }

    /// Polar moment; perpendicular-axis relation for a circular section.
    pub fn j_x(&self) -> f64 {
        self.j_y() + self.j_z()
    }

    pub fn shear_modulus(&self) -> f64 {
        self.youngs / (2.0 * (1.0 + self.poisson))
    }

    /// Diagonal of the Kelvin–Voigt stiffness `diag(G Jx, E Jy, E Jz, E A, G A, G A)`.
    pub fn stiffness_diagonal(&self) -> SVector<f64, 6> {
        let (e, g, a) = (self.youngs, self.shear_modulus(), self.area());
        SVector::<f64, 6>::from([
            g * self.j_x(),
            e * self.j_y(),
            e * self.j_z(),
            e * a,
            g * a,
            g * a,
        ])
    }
}

/// `rho * (Jx, Jy, Jz, A)` of one link.
pub fn theta_of_link(spec: &SoftLinkSpec) -> Vector4<f64> {
    spec.density * Vector4::new(spec.j_x(), spec.j_y(), spec.j_z(), spec.area())
}

/// Screw inertia `diag(tx, ty, tz, tA, tA, tA)` from a 4-entry parameter block.
pub fn screw_inertia(theta: &Vector4<f64>) -> Mat6 {
    Mat6::from_diagonal(&SVector::<f64, 6>::from([
        theta[0], theta[1], theta[2], theta[3], theta[3], theta[3],
    ]))
}

/// Antagonistic tendon pair driving one input channel.
#[derive(Clone, Debug, PartialEq)]
pub struct TendonSpec {
    pub link: LinkId,
    pub radial_offset: f64,
    /// Angle of the pulled tendon in the section plane, from local +Y toward +Z.
    /// The antagonist sits diametrically opposite.
    pub angle: f64,
    pub active: bool,
    pub channel: usize,
}

impl TendonSpec {
    /// Section-plane offset of the pulled tendon.
    pub fn offset(&self) -> Vector3<f64> {
        self.radial_offset * Vector3::new(0.0, self.angle.cos(), self.angle.sin())
    }

    /// Bending axis of the internal moment produced by positive tension.
    pub fn moment_axis(&self) -> Vector3<f64> {
        Vector3::new(0.0, -self.angle.sin(), self.angle.cos())
    }
}

/// Loop-closure joint between a frame on link `a` and a frame on link `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopJoint {
    pub link_a: LinkId,
    pub x_a: f64,
    /// Fixed transform from the backbone frame of `a` to the joint frame.
    pub offset_a: Pose,
    pub link_b: LinkId,
    pub x_b: f64,
    /// Columns span the constraint wrench subspace (`I6` for a weld).
    pub constrained: SMatrix<f64, 6, 6>,
    pub n_constraints: usize,
}

impl LoopJoint {
    pub fn weld(link_a: LinkId, x_a: f64, offset_a: Pose, link_b: LinkId, x_b: f64) -> Self {
        Self {
            link_a,
            x_a,
            offset_a,
            link_b,
            x_b,
            constrained: SMatrix::<f64, 6, 6>::identity(),
            n_constraints: 6,
        }
    }
}

/// Serializable physical parameters of one link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    pub length: f64,
    pub radius: f64,
    pub density: f64,
    pub youngs: f64,
    pub poisson: f64,
}

/// Every physical knob of the system, defaulting to the laboratory platform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Plant inertia as a multiple of the nominal inertia.
    pub inertia_scale: f64,
    pub cr: LinkParams,
    pub object: LinkParams,
    pub quadrature_points: usize,
    /// Distance between the two robot bases along world x (m).
    pub base_separation: f64,
    /// Row-major base orientation shared by both robots.
    pub base_rotation: [[f64; 3]; 3],
    /// Spatial gravity acceleration (m/s^2).
    pub gravity: [f64; 3],
    /// Kelvin–Voigt damping time `beta` in `D = beta K` (s).
    pub damping_beta: f64,
    pub tendon_offset: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            inertia_scale: 0.7,
            cr: LinkParams {
                length: 0.4,
                radius: 0.9e-3,
                // Backbone plus tendons and spacer disks.
                density: 39317.0,
                youngs: 120e9,
                poisson: 0.3,
            },
            object: LinkParams {
                length: 0.22,
                radius: 0.8e-3,
                density: 6450.0,
                youngs: 50e9,
                poisson: 0.3,
            },
            quadrature_points: 7,
            base_separation: 0.629,
            // Backbone X along world +z, section Y along world +x.
            base_rotation: [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]],
            gravity: [0.0, 0.0, -9.81],
            damping_beta: 0.01,
            tendon_offset: 1.8e-3,
        }
    }
}

/// Backbone stations of one link: quadrature nodes plus the frames other
/// modules need (base, tip, midpoint, joint locations).
#[derive(Clone, Debug, PartialEq)]
pub struct LinkLayout {
    pub stations: Vec<f64>,
    /// Station index of each quadrature node.
    pub quad_station: Vec<usize>,
    pub quad_weights: Vec<f64>,
}

impl LinkLayout {
    fn new(rule: &GaussRule, length: f64, extra: &[f64]) -> Self {
        let mut stations: Vec<f64> = vec![0.0, length];
        stations.extend(&rule.nodes);
        stations.extend(extra);
        stations.sort_by(|a, b| a.total_cmp(b));
        stations.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let quad_station = rule
            .nodes
            .iter()
            .map(|x| {
                stations
                    .iter()
                    .position(|s| (s - x).abs() < 1e-12)
                    .expect("node was inserted")
            })
            .collect();
        Self {
            stations,
            quad_station,
            quad_weights: rule.weights.clone(),
        }
    }

    pub fn station_of(&self, x: f64) -> Option<usize> {
        self.stations.iter().position(|s| (s - x).abs() < 1e-12)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemModel {
    /// CR1, CR2, object.
    pub links: [SoftLinkSpec; N_LINKS],
    /// Base placements of CR1 and CR2 in the spatial frame.
    pub base_poses: [Pose; 2],
    /// Reference frame of the object's free joint: `g_obj(0) = attachment * exp(q_joint)`.
    pub object_attachment: Pose,
    pub object_free_joint: bool,
    pub loop_joints: Vec<LoopJoint>,
    pub tendons: Vec<TendonSpec>,
    /// First global column of each link's strain coordinates.
    pub strain_offset: [usize; N_LINKS],
    pub theta_true: ParamVector,
    pub theta_nominal: ParamVector,
    pub gravity: Twist,
    pub damping_beta: f64,
    pub layouts: [LinkLayout; N_LINKS],
    stiffness: GenMat,
}

impl SystemModel {
    /// The two-arm platform with the given plant inertia scale.
    pub fn build_default(inertia_scale: f64) -> Result<Self> {
        Self::from_params(&ModelParams {
            inertia_scale,
            ..ModelParams::default()
        })
    }

    pub fn from_params(p: &ModelParams) -> Result<Self> {
        if !(p.inertia_scale > 0.0) || !p.inertia_scale.is_finite() {
            return Err(Error::Config(format!(
                "inertia_scale must be positive, got {}",
                p.inertia_scale
            )));
        }
        if !(p.damping_beta >= 0.0) {
            return Err(Error::Config("damping_beta must be non-negative".into()));
        }
        if !(p.base_separation > 0.0) || !(p.tendon_offset > 0.0) {
            return Err(Error::Config(
                "base_separation and tendon_offset must be positive".into(),
            ));
        }
        let xi_star = Twist::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        let link = |lp: &LinkParams, basis| SoftLinkSpec {
            length: lp.length,
            radius: lp.radius,
            density: lp.density,
            youngs: lp.youngs,
            poisson: lp.poisson,
            quadrature_points: p.quadrature_points,
            basis,
            reference_strain: xi_star,
        };
        let links = [
            link(&p.cr, StrainBasisSpec::affine_bending()),
            link(&p.cr, StrainBasisSpec::affine_bending()),
            link(&p.object, StrainBasisSpec::constant_bending()),
        ];
        for l in &links {
            l.validate()?;
        }
        let rot = Matrix3::from_fn(|i, j| p.base_rotation[i][j]);
        if (rot.transpose() * rot - Matrix3::identity()).norm() > 1e-9
            || (rot.determinant() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(
                "base_rotation is not a rotation matrix".into(),
            ));
        }
        let base_poses = [
            Pose::new(rot, Vector3::zeros()),
            Pose::new(rot, Vector3::new(p.base_separation, 0.0, 0.0)),
        ];

        let l_obj = links[2].length;
        // Object tangent continues CR1's tip; at CR2 the backbone direction is reversed.
        let loop_joints = vec![
            LoopJoint::weld(
                LinkId::Cr1,
                links[0].length,
                Pose::identity(),
                LinkId::Object,
                0.0,
            ),
            LoopJoint::weld(
                LinkId::Cr2,
                links[1].length,
                exp_se3(&Twist::new(0.0, 0.0, PI, 0.0, 0.0, 0.0)),
                LinkId::Object,
                l_obj,
            ),
        ];

        let tendon = |link, angle, channel| TendonSpec {
            link,
            radial_offset: p.tendon_offset,
            angle,
            active: true,
            channel,
        };
        // u1: CR1 xz-plane pair, u2: CR1 yz-plane pair, u3: CR2 xz-plane pair.
        let tendons = vec![
            tendon(LinkId::Cr1, 0.0, 0),
            tendon(LinkId::Cr1, -PI / 2.0, 1),
            tendon(LinkId::Cr2, 0.0, 2),
        ];

        let mut theta_nominal = ParamVector::zeros();
        for (k, l) in links.iter().enumerate() {
            theta_nominal
                .fixed_rows_mut::<4>(4 * k)
                .copy_from(&theta_of_link(l));
        }
        let theta_true = theta_nominal * p.inertia_scale;

        let mut layouts = Vec::with_capacity(N_LINKS);
        for (k, l) in links.iter().enumerate() {
            let rule = GaussRule::legendre(l.quadrature_points, 0.0, l.length)?;
            let mut extra: Vec<f64> = Vec::new();
            if k == 2 {
                extra.push(0.5 * l.length);
            }
            for j in &loop_joints {
                if j.link_a.index() == k {
                    extra.push(j.x_a);
                }
                if j.link_b.index() == k {
                    extra.push(j.x_b);
                }
            }
            layouts.push(LinkLayout::new(&rule, l.length, &extra));
        }
        let layouts: [LinkLayout; N_LINKS] = layouts.try_into().expect("three layouts");

        let mut model = Self {
            links,
            base_poses,
            object_attachment: Pose::identity(),
            object_free_joint: true,
            loop_joints,
            tendons,
            strain_offset: [0, 4, 14],
            theta_true,
            theta_nominal,
            gravity: Twist::new(0.0, 0.0, 0.0, p.gravity[0], p.gravity[1], p.gravity[2]),
            damping_beta: p.damping_beta,
            layouts,
            stiffness: GenMat::zeros(),
        };
        model.stiffness = model.compute_stiffness();
        model.object_attachment = model.arch_guess_attachment();
        model.check_coordinate_map()?;
        Ok(model)
    }

    /// Global column of local strain coordinate `local` on `link`.
    pub fn global_index(&self, link: LinkId, local: usize) -> usize {
        self.strain_offset[link.index()] + local
    }

    /// Link-local coordinate index to global index, free joint first for the object.
    pub fn coordinate_map(&self) -> Vec<usize> {
        let mut map = Vec::with_capacity(N_COORDS);
        for id in LinkId::ALL {
            if id == LinkId::Object && self.object_free_joint {
                map.extend(OBJECT_JOINT..OBJECT_JOINT + 6);
            }
            let n = self.links[id.index()].basis.n_coords();
            map.extend((0..n).map(|i| self.global_index(id, i)));
        }
        map
    }

    fn check_coordinate_map(&self) -> Result<()> {
        let mut map = self.coordinate_map();
        if map.len() != N_COORDS {
            return Err(Error::Config(format!(
                "model has {} generalized coordinates, expected {N_COORDS}",
                map.len()
            )));
        }
        map.sort_unstable();
        if map.iter().enumerate().any(|(i, g)| i != *g) {
            return Err(Error::Config("coordinate map is not a bijection".into()));
        }
        Ok(())
    }

    /// Strain basis of `link` at backbone coordinate `x`, in global columns.
    pub fn basis(&self, link: LinkId, x: f64) -> Jac {
        let spec = &self.links[link.index()];
        let mut b = Jac::zeros();
        spec.basis
            .write_into(x / spec.length, self.strain_offset[link.index()], &mut b);
        b
    }

    pub fn theta_block(theta: &ParamVector, link: LinkId) -> Vector4<f64> {
        theta.fixed_rows::<4>(4 * link.index()).into_owned()
    }

    pub fn n_constraints(&self) -> usize {
        self.loop_joints.iter().map(|j| j.n_constraints).sum()
    }

    pub fn stiffness(&self) -> &GenMat {
        &self.stiffness
    }

    pub fn damping(&self) -> GenMat {
        self.stiffness * self.damping_beta
    }

    /// `K = sum_links int B^T Kc B dX`, exact by Gauss quadrature for polynomial bases.
    fn compute_stiffness(&self) -> GenMat {
        let mut k = GenMat::zeros();
        for id in LinkId::ALL {
            let spec = &self.links[id.index()];
            let kc = Mat6::from_diagonal(&spec.stiffness_diagonal());
            let layout = &self.layouts[id.index()];
            for (node, w) in layout.quad_station.iter().zip(&layout.quad_weights) {
                let b = self.basis(id, layout.stations[*node]);
                k += *w * b.transpose() * kc * b;
            }
        }
        k
    }

    /// A closed-chain initial guess: all three rods bent into one arch of
    /// uniform curvature running from CR1's base over to CR2's base.
    pub fn arch_guess(&self) -> GenVec {
        let total = self.links[0].length + self.links[1].length + self.links[2].length;
        let kappa = PI / total;
        let mut q = GenVec::zeros();
        // Bending toward the other robot is about local z.
        q[self.global_index(LinkId::Cr1, 2)] = kappa;
        q[self.global_index(LinkId::Cr2, 2)] = -kappa;
        q[self.global_index(LinkId::Object, 1)] = kappa;
        q
    }

    /// Chooses the free-joint reference frame so that the arch guess has zero
    /// joint coordinates and closes the first loop joint exactly.
    fn arch_guess_attachment(&self) -> Pose {
        let q = self.arch_guess();
        let tip = crate::kinematics::link_pose_at(self, &q, LinkId::Cr1, self.links[0].length);
        tip.compose(&self.loop_joints[0].offset_a)
    }
}
