//! SE(3) / se(3) kernel.
//!
//! Every twist and wrench in this crate is a 6-vector with the **angular block
//! first** (indices 0..3) and the linear block second (indices 3..6). This is
//! the layout of the screw inertia `rho * diag(Jx, Jy, Jz, A, A, A)` and every
//! other module relies on it.

use nalgebra::{Matrix3, Matrix4, Matrix6, SMatrix, Vector3, Vector6};

use crate::error::{Error, Result};

/// 6-vector twist `(omega, v)`: strain, body velocity or increment depending on context.
pub type Twist = Vector6<f64>;
/// 6-vector wrench `(moment, force)`.
pub type Wrench = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

/// Below this rotation magnitude `exp`/`log` switch to their series branches.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Tangent-operator coefficients use their Taylor series below this angle.
const TANGENT_SERIES_ANGLE: f64 = 0.5;
/// Re-orthonormalise when `||R^T R - I||_F` exceeds this.
pub const ORTHO_TOL: f64 = 1e-9;

pub fn twist(omega: Vector3<f64>, v: Vector3<f64>) -> Twist {
    Twist::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
}

#[inline]
pub fn angular(xi: &Twist) -> Vector3<f64> {
    xi.fixed_rows::<3>(0).into_owned()
}

#[inline]
pub fn linear(xi: &Twist) -> Vector3<f64> {
    xi.fixed_rows::<3>(3).into_owned()
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn unskew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

pub fn hat(xi: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&skew(&angular(xi)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&linear(xi));
    m
}

pub fn vee(m: &Matrix4<f64>) -> Twist {
    let w = unskew(&m.fixed_view::<3, 3>(0, 0).into_owned());
    let v = m.fixed_view::<3, 1>(0, 3).into_owned();
    twist(w, v)
}

/// Rigid transform `g = (R, p)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rot: Matrix3<f64>,
    pub pos: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rot: Matrix3<f64>, pos: Vector3<f64>) -> Self {
        Self { rot, pos }
    }

    pub fn identity() -> Self {
        Self {
            rot: Matrix3::identity(),
            pos: Vector3::zeros(),
        }
    }

    pub fn from_translation(pos: Vector3<f64>) -> Self {
        Self {
            rot: Matrix3::identity(),
            pos,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rot.transpose();
        Self {
            rot: rt,
            pos: -(rt * self.pos),
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rot: self.rot * other.rot,
            pos: self.rot * other.pos + self.pos,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.pos);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self {
            rot: m.fixed_view::<3, 3>(0, 0).into_owned(),
            pos: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// `||R^T R - I||_F`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.rot.transpose() * self.rot - Matrix3::identity()).norm()
    }

    /// Projects `R` back onto SO(3) (polar factor) when drift exceeds [`ORTHO_TOL`].
    pub fn reorthonormalize(&mut self) {
        if self.orthogonality_error() <= ORTHO_TOL {
            return;
        }
        let svd = self.rot.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        self.rot = r;
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let wx = skew(w);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + wx + 0.5 * wx * wx;
    }
    let half = 0.5 * theta;
    let s = theta.sin() / theta;
    let c = 2.0 * (half.sin() / theta).powi(2);
    Matrix3::identity() + s * wx + c * wx * wx
}

/// Closed-form exponential of `hat(xi)`.
pub fn exp_se3(xi: &Twist) -> Pose {
    let w = angular(xi);
    let v = linear(xi);
    let theta = w.norm();
    let wx = skew(&w);
    let wx2 = wx * wx;
    let (rot, left) = if theta < SMALL_ANGLE {
        (
            Matrix3::identity() + wx + 0.5 * wx2,
            Matrix3::identity() + 0.5 * wx + wx2 / 6.0,
        )
    } else {
        let half = 0.5 * theta;
        // 1 - cos(theta) written as 2 sin^2(theta/2) to avoid cancellation.
        let one_minus_cos = 2.0 * half.sin().powi(2);
        let t2 = theta * theta;
        let a = theta.sin() / theta;
        let b = one_minus_cos / t2;
        let c = (theta - theta.sin()) / (t2 * theta);
        (
            Matrix3::identity() + a * wx + b * wx2,
            Matrix3::identity() + b * wx + c * wx2,
        )
    };
    Pose::new(rot, left * v)
}

pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_t = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_t.acos();
    let asym = unskew(&(r - r.transpose())) * 0.5;
    if theta < SMALL_ANGLE {
        return asym;
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Axis from the symmetric part: R + I = 2 a a^T near theta = pi.
        let b = (r + Matrix3::identity()) * 0.5;
        let (mut idx, mut best) = (0, b[(0, 0)]);
        for i in 1..3 {
            if b[(i, i)] > best {
                best = b[(i, i)];
                idx = i;
            }
        }
        let mut axis = b.column(idx).into_owned() / best.max(1e-300).sqrt();
        axis.normalize_mut();
        if axis.dot(&asym) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    asym * (theta / theta.sin())
}

/// Inverse of [`exp_se3`] on the principal branch.
pub fn log_se3(g: &Pose) -> Twist {
    let w = log_so3(&g.rot);
    let theta = w.norm();
    let wx = skew(&w);
    let vinv = if theta < SMALL_ANGLE {
        Matrix3::identity() - 0.5 * wx + wx * wx / 12.0
    } else {
        let half = 0.5 * theta;
        let coef = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
        Matrix3::identity() - 0.5 * wx + coef * wx * wx
    };
    twist(w, vinv * g.pos)
}

/// `Ad_g = [R, 0; p^ R, R]`.
pub fn adjoint(g: &Pose) -> Mat6 {
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&g.rot);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&g.rot);
    m.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(skew(&g.pos) * g.rot));
    m
}

/// `Ad_{g^-1}` without forming the inverse pose first.
pub fn adjoint_inv(g: &Pose) -> Mat6 {
    let rt = g.rot.transpose();
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&rt);
    m.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-rt * skew(&g.pos)));
    m
}

/// Applies `Ad_g` to a 6×N block without building the 6×6 matrix.
pub fn adjoint_apply<const N: usize>(g: &Pose, x: &SMatrix<f64, 6, N>) -> SMatrix<f64, 6, N> {
    let top = g.rot * x.fixed_rows::<3>(0);
    let bottom = g.rot * x.fixed_rows::<3>(3) + skew(&g.pos) * top;
    let mut out = SMatrix::<f64, 6, N>::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&top);
    out.fixed_rows_mut::<3>(3).copy_from(&bottom);
    out
}

/// Applies `Ad_{g^-1}` to a 6×N block.
pub fn adjoint_inv_apply<const N: usize>(g: &Pose, x: &SMatrix<f64, 6, N>) -> SMatrix<f64, 6, N> {
    let rt = g.rot.transpose();
    let top = rt * x.fixed_rows::<3>(0);
    let bottom = rt * (x.fixed_rows::<3>(3) - skew(&g.pos) * x.fixed_rows::<3>(0));
    let mut out = SMatrix::<f64, 6, N>::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&top);
    out.fixed_rows_mut::<3>(3).copy_from(&bottom);
    out
}

/// `ad_xi = [w^, 0; v^, w^]`.
pub fn ad(xi: &Twist) -> Mat6 {
    let wx = skew(&angular(xi));
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&wx);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&wx);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&linear(xi)));
    m
}

/// Coadjoint `ad*_xi = -ad_xi^T`.
pub fn coad(xi: &Twist) -> Mat6 {
    -ad(xi).transpose()
}

/// Lie bracket `[x, y] = ad_x y`.
pub fn bracket(x: &Twist, y: &Twist) -> Twist {
    let (wx, vx) = (angular(x), linear(x));
    let (wy, vy) = (angular(y), linear(y));
    twist(wx.cross(&wy), wx.cross(&vy) + vx.cross(&wy))
}

/// Skew matrix `W(w) = [m^, f^; f^, 0]` with `ad*_eta w = -W(w) eta` for every twist `eta`.
pub fn coad_wrench(w: &Wrench) -> Mat6 {
    let mx = skew(&angular(w));
    let fx = skew(&linear(w));
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&mx);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&fx);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&fx);
    m
}

/// Scalar coefficients of `dexp_Omega = I + a1 ad + a2 ad^2 + a3 ad^3 + a4 ad^4`
/// together with their derivatives with respect to `theta^2`.
fn tangent_coefficients(theta: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = theta * theta;
    if theta < TANGENT_SERIES_ANGLE {
        let poly = |c: &[f64]| c.iter().rev().fold(0.0, |acc, ci| acc * t2 + ci);
        let a = [
            poly(&[
                0.5,
                0.0,
                -1.0 / 720.0,
                1.0 / 20160.0,
                -1.0 / 1209600.0,
                1.0 / 119750400.0,
            ]),
            poly(&[
                1.0 / 6.0,
                0.0,
                -1.0 / 5040.0,
                1.0 / 181440.0,
                -1.0 / 13305600.0,
                1.0 / 1556755200.0,
            ]),
            poly(&[
                1.0 / 24.0,
                -1.0 / 360.0,
                1.0 / 13440.0,
                -1.0 / 907200.0,
                1.0 / 95800320.0,
                -1.0 / 14529715200.0,
            ]),
            poly(&[
                1.0 / 120.0,
                -1.0 / 2520.0,
                1.0 / 120960.0,
                -1.0 / 9979200.0,
                1.0 / 1245404160.0,
                -1.0 / 217945728000.0,
            ]),
        ];
        let b3 = poly(&[
            -1.0 / 360.0,
            1.0 / 6720.0,
            -1.0 / 302400.0,
            1.0 / 23950080.0,
            -1.0 / 2905943040.0,
        ]);
        let b4 = poly(&[
            -1.0 / 2520.0,
            1.0 / 60480.0,
            -1.0 / 3326400.0,
            1.0 / 311351040.0,
            -1.0 / 43589145600.0,
        ]);
        return (a, [t2 * b3, t2 * b4, b3, b4]);
    }
    let (s, c) = theta.sin_cos();
    let t = theta;
    let a = [
        (4.0 - 4.0 * c - t * s) / (2.0 * t2),
        (4.0 * t - 5.0 * s + t * c) / (2.0 * t2 * t),
        (2.0 - 2.0 * c - t * s) / (2.0 * t2 * t2),
        (2.0 * t - 3.0 * s + t * c) / (2.0 * t2 * t2 * t),
    ];
    let b1 = (-t2 * c + 5.0 * t * s + 8.0 * c - 8.0) / (4.0 * t2 * t2);
    let b2 = (-t2 * s - 7.0 * t * c - 8.0 * t + 15.0 * s) / (4.0 * t2 * t2 * t);
    (a, [b1, b2, b1 / t2, b2 / t2])
}

/// Tangent operator `dexp_Omega = sum_k ad_Omega^k / (k+1)!` in closed form.
///
/// For `g = exp(Omega^)`, the body velocity is `dexp_{-Omega} Omega_dot`.
pub fn dexp(omega: &Twist) -> Mat6 {
    let theta = angular(omega).norm();
    let (a, _) = tangent_coefficients(theta);
    let x = ad(omega);
    let x2 = x * x;
    let x3 = x2 * x;
    let x4 = x2 * x2;
    Mat6::identity() + a[0] * x + a[1] * x2 + a[2] * x3 + a[3] * x4
}

/// Time derivative of [`dexp`] along `omega_dot`.
pub fn dexp_dot(omega: &Twist, omega_dot: &Twist) -> Mat6 {
    let w = angular(omega);
    let theta = w.norm();
    let (a, b) = tangent_coefficients(theta);
    // d(theta^2)/dt
    let dt2 = 2.0 * w.dot(&angular(omega_dot));
    let x = ad(omega);
    let xd = ad(omega_dot);
    let x2 = x * x;
    let x3 = x2 * x;
    let x4 = x2 * x2;
    let d1 = xd;
    let d2 = xd * x + x * xd;
    let d3 = xd * x2 + x * xd * x + x2 * xd;
    let d4 = xd * x3 + x * xd * x2 + x2 * xd * x + x3 * xd;
    dt2 * (b[0] * x + b[1] * x2 + b[2] * x3 + b[3] * x4)
        + a[0] * d1
        + a[1] * d2
        + a[2] * d3
        + a[3] * d4
}

/// Increment `Omega` such that `g(X0 + h) = g(X0) exp(Omega^)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MagnusIncrement(pub Twist);

/// Offsets (as fractions of `h`) of the two Gauss abscissae on `[0, h]`.
pub const GAUSS2_NODES: [f64; 2] = [
    0.5 - 0.288_675_134_594_812_9, // 1/2 - sqrt(3)/6
    0.5 + 0.288_675_134_594_812_9,
];
pub const SQRT3_OVER_12: f64 = 0.144_337_567_297_406_43;

/// Fourth-order two-stage Gauss Magnus increment from two field samples.
pub fn magnus_from_samples(xi1: &Twist, xi2: &Twist, h: f64) -> Twist {
    0.5 * h * (xi1 + xi2) + SQRT3_OVER_12 * h * h * bracket(xi1, xi2)
}

/// Fourth-order Magnus increment of `g' = g xi^` over `[x0, x0 + h]`.
pub fn magnus_increment<F>(xi_field: F, x0: f64, h: f64) -> Result<MagnusIncrement>
where
    F: Fn(f64) -> Twist,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Magnus step length must be positive, got {h}"
        )));
    }
    let xi1 = xi_field(x0 + GAUSS2_NODES[0] * h);
    let xi2 = xi_field(x0 + GAUSS2_NODES[1] * h);
    Ok(MagnusIncrement(magnus_from_samples(&xi1, &xi2, h)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rand_twist(rng: &mut ChaCha8Rng, scale: f64) -> Twist {
        Twist::from_fn(|_, _| rng.gen_range(-scale..scale))
    }

    fn rand_pose(rng: &mut ChaCha8Rng) -> Pose {
        exp_se3(&rand_twist(rng, 2.0))
    }

    /// Independent vee: reads the entries directly off the 4x4 matrix.
    fn vee_oracle(m: &Matrix4<f64>) -> Twist {
        Twist::new(
            m[(2, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(0, 3)],
            m[(1, 3)],
            m[(2, 3)],
        )
    }

    /// Truncated power series of the matrix exponential.
    fn expm_series(m: &Matrix4<f64>) -> Matrix4<f64> {
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..60 {
            term = term * m / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn hat_of_zero_and_generator() {
        assert_eq!(hat(&Twist::zeros()), Matrix4::zeros());
        let m = hat(&Twist::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        let mut expected = Matrix4::zeros();
        expected
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&skew(&Vector3::x()));
        assert_eq!(m, expected);
        assert_eq!(m.column(3).norm(), 0.0);
    }

    #[test]
    fn vee_inverts_hat() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = rand_twist(&mut rng, 3.0);
            assert_eq!(vee_oracle(&hat(&x)), x);
            assert_eq!(vee(&hat(&x)), x);
        }
    }

    #[test]
    fn exp_special_cases() {
        let g = exp_se3(&Twist::zeros());
        assert_eq!(g, Pose::identity());

        let g = exp_se3(&Twist::new(0.0, 0.0, PI / 2.0, 0.0, 0.0, 0.0));
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((g.rot - rz).norm() < 1e-15);
        assert!(g.pos.norm() < 1e-15);

        let g = exp_se3(&Twist::new(0.0, 0.0, 0.0, 0.3, -1.2, 2.5));
        assert_eq!(g.rot, Matrix3::identity());
        assert_eq!(g.pos, Vector3::new(0.3, -1.2, 2.5));
    }

    #[test]
    fn exp_matches_series_and_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..200 {
            // Rotation magnitudes up to 4 pi, plus a band of tiny ones.
            let scale = if i % 4 == 0 {
                1e-9
            } else {
                4.0 * PI / 3f64.sqrt()
            };
            let mut xi = rand_twist(&mut rng, scale);
            if angular(&xi).norm() > 4.0 * PI {
                xi *= 0.5;
            }
            let g = exp_se3(&xi);
            assert!(g.orthogonality_error() < 1e-10);
            assert!((g.rot.determinant() - 1.0).abs() < 1e-10);
            if angular(&xi).norm() < 3.0 {
                let reference = expm_series(&hat(&xi));
                assert!((g.to_matrix() - reference).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn log_inverts_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let xi = rand_twist(&mut rng, 1.5);
            let back = log_se3(&exp_se3(&xi));
            assert!((back - xi).norm() < 1e-10, "{back} vs {xi}");
        }
        let small = Twist::new(1e-10, -2e-10, 0.0, 1e-3, 0.0, 2e-3);
        assert!((log_se3(&exp_se3(&small)) - small).norm() < 1e-15);
        let near_pi = Twist::new(0.0, PI - 1e-9, 0.0, 0.1, 0.2, 0.3);
        let back = log_se3(&exp_se3(&near_pi));
        assert!((exp_se3(&back).to_matrix() - exp_se3(&near_pi).to_matrix()).norm() < 1e-7);
    }

    #[test]
    fn adjoint_identity_composition_and_inverse() {
        assert_eq!(adjoint(&Pose::identity()), Mat6::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (g1, g2) = (rand_pose(&mut rng), rand_pose(&mut rng));
            let lhs = adjoint(&(g1 * g2));
            let rhs = adjoint(&g1) * adjoint(&g2);
            assert!((lhs - rhs).amax() < 1e-10);

            let inv = adjoint(&g1).try_inverse().unwrap();
            assert!((adjoint(&g1.inverse()) - inv).amax() < 1e-10);
            assert!((adjoint_inv(&g1) - inv).amax() < 1e-10);

            let block = SMatrix::<f64, 6, 4>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            assert!((adjoint_apply(&g1, &block) - adjoint(&g1) * block).amax() < 1e-12);
            assert!((adjoint_inv_apply(&g1, &block) - inv * block).amax() < 1e-10);
        }
    }

    #[test]
    fn adjoint_conjugates_hat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = rand_pose(&mut rng);
        let x = rand_twist(&mut rng, 1.0);
        let lhs = g.to_matrix() * hat(&x) * g.inverse().to_matrix();
        assert!((lhs - hat(&(adjoint(&g) * x))).norm() < 1e-12);
    }

    #[test]
    fn small_ad_properties() {
        assert_eq!(ad(&Twist::zeros()), Mat6::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let (x, y) = (rand_twist(&mut rng, 1.0), rand_twist(&mut rng, 1.0));
            assert!((ad(&x) * y + ad(&y) * x).norm() < 1e-14);
            assert!((ad(&x) * y - bracket(&x, &y)).norm() < 1e-14);
            assert_eq!(coad(&x), -ad(&x).transpose());
            // Matrix commutator of hats equals hat of the bracket.
            let comm = hat(&x) * hat(&y) - hat(&y) * hat(&x);
            assert!((comm - hat(&bracket(&x, &y))).norm() < 1e-14);
        }
    }

    #[test]
    fn coad_wrench_is_skew_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (eta, w) = (rand_twist(&mut rng, 1.0), rand_twist(&mut rng, 1.0));
            let m = coad_wrench(&w);
            assert!((m + m.transpose()).norm() < 1e-15);
            assert!((coad(&eta) * w + m * eta).norm() < 1e-14);
        }
    }

    #[test]
    fn derivative_of_adjoint_is_ad() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let step = 1e-6;
        for _ in 0..20 {
            let x = rand_twist(&mut rng, 1.0);
            let fd =
                (adjoint(&exp_se3(&(step * x))) - adjoint(&exp_se3(&(-step * x)))) / (2.0 * step);
            assert!((fd - ad(&x)).amax() < 1e-8);
        }
    }

    /// Oracle: `sum_k ad^k / (k+1)!` truncated.
    fn dexp_series(omega: &Twist) -> Mat6 {
        let x = ad(omega);
        let mut term = Mat6::identity();
        let mut sum = Mat6::identity();
        for k in 1..60 {
            term = term * x / (k + 1) as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn dexp_matches_series_on_both_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for scale in [1e-7, 1e-3, 0.1, 0.28, 0.3, 0.5, 1.0, 2.0] {
            for _ in 0..10 {
                let om = rand_twist(&mut rng, scale);
                let err = (dexp(&om) - dexp_series(&om)).amax();
                assert!(err < 1e-13, "scale {scale}: {err}");
            }
        }
    }

    #[test]
    fn dexp_gives_body_velocity_of_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let om = rand_twist(&mut rng, 1.0);
            let om_dot = rand_twist(&mut rng, 1.0);
            let h = 1e-6;
            let gp = exp_se3(&(om + h * om_dot)).to_matrix();
            let gm = exp_se3(&(om - h * om_dot)).to_matrix();
            let g = exp_se3(&om);
            let eta_fd = vee(&(g.inverse().to_matrix() * (gp - gm) / (2.0 * h)));
            let eta = dexp(&(-om)) * om_dot;
            assert!((eta - eta_fd).norm() < 1e-8);
        }
    }

    #[test]
    fn dexp_dot_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for scale in [1e-4, 0.2, 0.45, 0.55, 1.5] {
            for _ in 0..10 {
                let om = rand_twist(&mut rng, scale);
                let om_dot = rand_twist(&mut rng, 1.0);
                let h = 1e-6;
                let fd = (dexp(&(om + h * om_dot)) - dexp(&(om - h * om_dot))) / (2.0 * h);
                let err = (dexp_dot(&om, &om_dot) - fd).amax();
                assert!(err < 1e-8, "scale {scale}: {err}");
            }
        }
    }

    #[test]
    fn reorthonormalize_restores_rotation() {
        let mut g = exp_se3(&Twist::new(0.3, -0.2, 0.9, 0.0, 0.0, 0.0));
        g.rot[(0, 1)] += 1e-6;
        assert!(g.orthogonality_error() > ORTHO_TOL);
        g.reorthonormalize();
        assert!(g.orthogonality_error() < 1e-12);
        assert!((g.rot.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn magnus_trivial_fields() {
        let c = Twist::new(0.1, 0.2, -0.3, 1.0, 0.0, 0.5);
        let inc = magnus_increment(|_| c, 0.3, 0.4).unwrap();
        assert!((inc.0 - 0.4 * c).norm() < 1e-15);
        let inc = magnus_increment(|_| Twist::zeros(), 0.0, 0.4).unwrap();
        assert_eq!(inc.0, Twist::zeros());
        assert!(magnus_increment(|_| c, 0.0, 0.0).is_err());
        assert!(magnus_increment(|_| c, 0.0, -1.0).is_err());
    }

    /// Fine fixed-step RK4 integration of `g' = g xi^` on 4x4 matrices.
    fn fine_oracle<F: Fn(f64) -> Twist>(field: F, x0: f64, h: f64, steps: usize) -> Matrix4<f64> {
        let mut g = Matrix4::identity();
        let dx = h / steps as f64;
        for i in 0..steps {
            let x = x0 + i as f64 * dx;
            let f = |x: f64, g: &Matrix4<f64>| g * hat(&field(x));
            let k1 = f(x, &g);
            let k2 = f(x + 0.5 * dx, &(g + 0.5 * dx * k1));
            let k3 = f(x + 0.5 * dx, &(g + 0.5 * dx * k2));
            let k4 = f(x + dx, &(g + dx * k3));
            g += dx / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        g
    }

    #[test]
    fn magnus_affine_field_matches_fine_integration() {
        // Bending field of the magnitude seen on the robot backbones, stepped
        // across 0.4 m with one increment per gap between 7-point Gauss nodes.
        let a = Twist::new(0.0, 0.5, -0.3, 1.0, 0.0, 0.0);
        let b = Twist::new(0.0, 1.0, 0.8, 0.0, 0.0, 0.0);
        let field = |x: f64| a + b * x;
        let len = 0.4;
        let rule = crate::quadrature::GaussRule::legendre(7, 0.0, len).unwrap();
        let mut stations = vec![0.0];
        stations.extend(&rule.nodes);
        stations.push(len);
        let mut g = Pose::identity();
        for w in stations.windows(2) {
            let inc = magnus_increment(field, w[0], w[1] - w[0]).unwrap();
            g = g * exp_se3(&inc.0);
        }
        let err = (g.to_matrix() - fine_oracle(field, 0.0, len, 10_000)).norm();
        // Fourth-order global error at h ~ 0.05 m with unit curvature: ~9e-8.
        assert!(err < 1e-7, "{err}");

        // A single 0.4 m step is still accurate to the fifth-order term.
        let inc = magnus_increment(field, 0.0, len).unwrap();
        let err = (exp_se3(&inc.0).to_matrix() - fine_oracle(field, 0.0, len, 10_000)).norm();
        assert!(err < 2e-4, "{err}");
    }

    #[test]
    fn magnus_single_interval_error_is_fifth_order() {
        let field = |x: f64| {
            Twist::new(
                (2.0 * x).sin(),
                1.0 + x * x,
                -0.7 * x,
                1.0,
                0.3 * x.cos(),
                0.0,
            )
        };
        let err = |h: f64| {
            let inc = magnus_increment(field, 0.1, h).unwrap();
            (exp_se3(&inc.0).to_matrix() - fine_oracle(field, 0.1, h, 4000)).norm()
        };
        let mut h = 0.4;
        for _ in 0..3 {
            let ratio = err(h) / err(h / 2.0);
            assert!(ratio > 16.0 * 0.8, "ratio {ratio} at h {h}");
            h /= 2.0;
        }
    }
}
