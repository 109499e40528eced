//! SE(3) and so(3) machinery.
//!
//! Twists use the `[rho, omega]` ordering: the first three coordinates are the
//! translational part, the last three the axis-angle rotation. Perturbations
//! are applied on the left, `T' = exp(delta) * T`, everywhere in the crate.

mod trajectory;

pub use trajectory::{
    bernstein, read_tum, write_tum, BezierTrajectory, LinearTrajectory, SplineTrajectory,
    Trajectory, TrajectoryKind,
};

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix6, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

/// Angles below this use truncated Taylor series for the trigonometric
/// coefficients.
const SERIES_EPS: f64 = 1e-4;

/// Logarithm is refused once the rotation angle gets this close to pi.
pub const LOG_PI_MARGIN: f64 = 1e-6;

/// Lie-algebra coordinates of a rigid motion.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Self { rho, omega }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Self {
            rho: Vector3::new(v[0], v[1], v[2]),
            omega: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rho: v.fixed_rows::<3>(0).into_owned(),
            omega: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x,
            self.rho.y,
            self.rho.z,
            self.omega.x,
            self.omega.y,
            self.omega.z,
        )
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rho: self.rho * s,
            omega: self.omega * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().chain(self.omega.iter()).all(|v| v.is_finite())
    }
}

/// Rigid transform `x -> R x + t`.
///
/// Camera poses are stored world-to-camera, so `transform_point` maps world
/// points into the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for SE3Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.quaternion();
        let t = self.translation;
        write!(
            f,
            "SE3(t: [{:.4}, {:.4}, {:.4}], q: [w {:.4}, x {:.4}, y {:.4}, z {:.4}])",
            t.x, t.y, t.z, q.w, q.i, q.j, q.k
        )
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// positive determinant (tolerance 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        let err = pose.orthonormality_error();
        if !(err < 1e-9) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidTrajectory(format!(
                "rotation is not orthonormal (error {err:e})"
            )));
        }
        Ok(pose)
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    /// World-to-camera pose of a camera at `eye` looking at `target`, with
    /// camera +y pointing along the image's downward direction (`down`).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self {
            rotation: r,
            translation: -(r * eye),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates for a world-to-camera pose.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Adjoint in the `[rho, omega]` ordering: `T exp(x) T^-1 = exp(Ad_T x)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        let tr = hat(&self.translation) * self.rotation;
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad
    }

    /// Max of `|R^T R - I|` and `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let ortho = gram.amax();
        let det = (self.rotation.determinant() - 1.0).abs();
        ortho.max(det)
    }

    /// Frobenius distance between the 4x4 homogeneous matrices.
    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        let dr = (self.rotation - other.rotation).norm_squared();
        let dt = (self.translation - other.translation).norm_squared();
        (dr + dt).sqrt()
    }

    /// Re-orthonormalizes the rotation through the closest unit quaternion.
    pub fn renormalized(&self) -> Self {
        let q = self.quaternion();
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation: self.translation,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }
}

impl Mul for SE3Pose {
    type Output = SE3Pose;

    fn mul(self, rhs: SE3Pose) -> SE3Pose {
        <&SE3Pose as Mul>::mul(&self, &rhs)
    }
}

impl<'a> Mul<&'a SE3Pose> for &'a SE3Pose {
    type Output = SE3Pose;

    fn mul(self, rhs: &'a SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

/// Skew-symmetric matrix with `hat(a) * b = a x b`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)` for `t = sqrt(theta_sq)`.
fn rodrigues_coefficients(theta_sq: f64) -> (f64, f64, f64) {
    let theta = theta_sq.sqrt();
    if theta < SERIES_EPS {
        let t2 = theta_sq;
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            s / theta,
            (1.0 - c) / theta_sq,
            (theta - s) / (theta_sq * theta),
        )
    }
}

pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _) = rodrigues_coefficients(omega.norm_squared());
    let w = hat(omega);
    Matrix3::identity() + w * a + w * w * b
}

/// Rotation vector of `r`; fails when the angle is within `LOG_PI_MARGIN` of pi.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let v = vee(&(r - r.transpose()));
    let cos_theta = 0.5 * (r.trace() - 1.0);
    let sin_theta = 0.5 * v.norm();
    let theta = sin_theta.atan2(cos_theta);
    if theta >= std::f64::consts::PI - LOG_PI_MARGIN || !theta.is_finite() {
        return Err(Error::RotationNearPi { angle: theta });
    }
    if theta < SERIES_EPS {
        Ok(v * (0.5 * (1.0 + theta * theta / 6.0)))
    } else {
        Ok(v * (theta / (2.0 * sin_theta)))
    }
}

/// Left Jacobian of SO(3) (equal to the V matrix of the SE(3) exponential).
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let (_, b, c) = rodrigues_coefficients(omega.norm_squared());
    let w = hat(omega);
    Matrix3::identity() + w * b + w * w * c
}

pub fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let k = if theta < SERIES_EPS {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        let (s, c) = theta.sin_cos();
        1.0 / theta_sq - (1.0 + c) / (2.0 * theta * s)
    };
    let w = hat(omega);
    Matrix3::identity() - w * 0.5 + w * w * k
}

/// Closed-form SE(3) exponential.
pub fn se3_exp(xi: &Twist) -> SE3Pose {
    let (a, b, c) = rodrigues_coefficients(xi.omega.norm_squared());
    let w = hat(&xi.omega);
    let w2 = w * w;
    let rotation = Matrix3::identity() + w * a + w2 * b;
    let v = Matrix3::identity() + w * b + w2 * c;
    SE3Pose {
        rotation,
        translation: v * xi.rho,
    }
}

/// SE(3) logarithm; the inverse of [`se3_exp`] for rotation angles below pi.
pub fn se3_log(pose: &SE3Pose) -> Result<Twist> {
    let omega = so3_log(&pose.rotation)?;
    let rho = so3_left_jacobian_inv(&omega) * pose.translation;
    Ok(Twist { rho, omega })
}

/// The coupling block Q of the SE(3) left Jacobian.
fn se3_q_block(xi: &Twist) -> Matrix3<f64> {
    let theta_sq = xi.omega.norm_squared();
    let theta = theta_sq.sqrt();
    let (c1, c2, c3) = if theta < 1e-3 {
        (
            1.0 / 6.0 - theta_sq / 120.0,
            1.0 / 24.0 - theta_sq / 720.0,
            1.0 / 120.0 - theta_sq / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta_sq * theta;
        (
            (theta - s) / t3,
            (theta_sq + 2.0 * c - 2.0) / (2.0 * theta_sq * theta_sq),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta_sq * t3),
        )
    };
    let p = hat(&xi.rho);
    let w = hat(&xi.omega);
    let wp = w * p;
    let pw = p * w;
    let wpw = wp * w;
    let wwp = w * wp;
    let pww = pw * w;
    p * 0.5 + (wp + pw + wpw) * c1 + (wwp + pww - wpw * 3.0) * c2 + (wpw * w + w * wpw) * c3
}

/// Left Jacobian of SE(3): `exp(xi + d) ~= exp(J_l(xi) d) exp(xi)`.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&xi.omega);
    let q = se3_q_block(xi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let j_inv = so3_left_jacobian_inv(&xi.omega);
    let q = se3_q_block(xi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-(j_inv * q * j_inv)));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out
}

/// Unit quaternion `(w, x, y, z)` to rotation matrix.
pub fn quaternion_to_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    UnitQuaternion::from_quaternion(*q).to_rotation_matrix().into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
        let rho = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.random_range(0.0..max_angle);
        Twist::new(rho, axis * angle)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = se3_exp(&Twist::zero());
        assert_eq!(p, SE3Pose::identity());
    }

    #[test]
    fn exp_pure_translation() {
        let p = se3_exp(&Twist::from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert_abs_diff_eq!(*p.rotation(), Matrix3::identity(), epsilon = 1e-15);
        assert_abs_diff_eq!(*p.translation(), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let p = se3_exp(&Twist::from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2]));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(*p.rotation(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(*p.translation(), Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn log_examples() {
        assert_eq!(se3_log(&SE3Pose::identity()).unwrap(), Twist::zero());
        let t = se3_log(&SE3Pose::from_translation(Vector3::new(0.0, 2.0, 0.0))).unwrap();
        assert_abs_diff_eq!(t.to_vector(), Vector6::new(0.0, 2.0, 0.0, 0.0, 0.0, 0.0), epsilon = 1e-15);
        let xi = Twist::from_slice(&[0.3, -0.1, 0.2, 0.1, 0.2, -0.3]);
        let back = se3_log(&se3_exp(&xi)).unwrap();
        assert!((back.to_vector() - xi.to_vector()).amax() < 1e-9);
    }

    #[test]
    fn log_rejects_half_turn() {
        let p = se3_exp(&Twist::from_slice(&[0.0, 0.0, 0.0, std::f64::consts::PI, 0.0, 0.0]));
        assert!(matches!(se3_log(&p), Err(Error::RotationNearPi { .. })));
    }

    #[test]
    fn roundtrip_and_orthonormality_over_random_twists() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let xi = random_twist(&mut rng, 3.0);
            let pose = se3_exp(&xi);
            assert!(pose.orthonormality_error() < 1e-9);
            let back = se3_log(&pose).unwrap();
            assert!((back.to_vector() - xi.to_vector()).amax() < 1e-9);
            let again = se3_exp(&back);
            assert!(again.frobenius_distance(&pose) < 1e-9);
        }
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let omega = Vector3::new(3e-5, -2e-5, 1e-5);
        let xi = Twist::new(Vector3::new(0.5, 0.1, -0.2), omega);
        let above = Twist::new(xi.rho, omega * 10.0);
        let p = se3_exp(&xi);
        let q = se3_exp(&above);
        assert!(p.frobenius_distance(&q) < 1e-3);
        let back = se3_log(&p).unwrap();
        assert!((back.to_vector() - xi.to_vector()).amax() < 1e-14);
    }

    /// Finite-difference oracle for the left Jacobian: log(exp(xi+d) exp(xi)^-1) / h.
    #[test]
    fn left_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for scale in [1e-5, 1e-2, 1.0, 2.5] {
            let xi = random_twist(&mut rng, 1.0);
            let xi = Twist::new(xi.rho, xi.omega.normalize() * scale);
            let jac = se3_left_jacobian(&xi);
            let base_inv = se3_exp(&xi).inverse();
            let h = 1e-6;
            for k in 0..6 {
                let mut plus = xi.to_vector();
                plus[k] += h;
                let mut minus = xi.to_vector();
                minus[k] -= h;
                let dp = se3_log(&(se3_exp(&Twist::from_vector(&plus)) * base_inv))
                    .unwrap()
                    .to_vector();
                let dm = se3_log(&(se3_exp(&Twist::from_vector(&minus)) * base_inv))
                    .unwrap()
                    .to_vector();
                let fd = (dp - dm) / (2.0 * h);
                let col = jac.column(k);
                assert!((fd - col).amax() < 1e-7, "scale {scale} col {k}: {fd} vs {col}");
            }
            let inv = se3_left_jacobian_inv(&xi);
            assert!((jac * inv - Matrix6::identity()).amax() < 1e-10);
        }
    }

    #[test]
    fn adjoint_conjugation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = se3_exp(&random_twist(&mut rng, 2.0));
        let x = random_twist(&mut rng, 0.5);
        let lhs = t * se3_exp(&x) * t.inverse();
        let rhs = se3_exp(&Twist::from_vector(&(t.adjoint() * x.to_vector())));
        assert!(lhs.frobenius_distance(&rhs) < 1e-12);
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let eye = Vector3::new(1.0, -0.5, -6.0);
        let pose = SE3Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0));
        assert!(pose.orthonormality_error() < 1e-12);
        let c = pose.transform_point(&Vector3::zeros());
        assert_abs_diff_eq!(c.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.y, 0.0, epsilon = 1e-12);
        assert!(c.z > 0.0);
        assert_abs_diff_eq!(pose.camera_center(), eye, epsilon = 1e-12);
    }
}
