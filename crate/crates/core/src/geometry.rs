//! Rigid-body transforms on SO(3) / SE(3).
//!
//! Rotations are stored as unit quaternions and renormalized after every
//! composition. Tangent vectors are ordered `[ω, ρ]`: rotational part first
//! (radians), translational part second (meters). Perturbations in the
//! solver are applied on the right, `T · exp(ξ)`.

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};

const SMALL_ANGLE: f64 = 1e-1;

/// Skew-symmetric (hat) matrix of a 3-vector.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Unit-quaternion rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Builds a rotation from raw quaternion components, normalizing them.
    /// Returns `None` for a zero or non-finite quaternion.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return None;
        }
        // already-unit input is kept bit-for-bit so text round trips are exact
        if (norm - 1.0).abs() <= f64::EPSILON {
            return Some(Self(UnitQuaternion::new_unchecked(q)));
        }
        Some(Self(UnitQuaternion::new_unchecked(q / norm)))
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self(UnitQuaternion::new_normalize(q.into_inner()))
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    /// `(w, x, y, z)`
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Self::from_quaternion(self.0 * other.0)
    }

    pub fn inverse(&self) -> Rotation {
        Self(self.0.inverse())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// SO(3) exponential of a rotation vector.
    pub fn exp(omega: &Vector3<f64>) -> Rotation {
        let theta = omega.norm();
        let half = 0.5 * theta;
        let (w, k) = if theta < 1e-8 {
            // sin(θ/2)/θ ≈ 1/2 − θ²/48
            (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
        } else {
            (half.cos(), half.sin() / theta)
        };
        let q = Quaternion::new(w, omega.x * k, omega.y * k, omega.z * k);
        Self(UnitQuaternion::new_normalize(q))
    }

    /// SO(3) logarithm. The quaternion is first mapped to the hemisphere
    /// `w ≥ 0`, so the returned angle lies in `[0, π]`. At exactly `π` the
    /// axis is taken from the stored quaternion's vector part as-is.
    pub fn log(&self) -> Vector3<f64> {
        let q = self.0.quaternion();
        let (w, v) = if q.w < 0.0 {
            (-q.w, -q.imag())
        } else {
            (q.w, q.imag())
        };
        let sin_half = v.norm();
        if sin_half < 1e-10 {
            // θ/sin(θ/2) ≈ 2 (1 + θ²/24)
            return v * (2.0 / w);
        }
        let theta = 2.0 * sin_half.atan2(w);
        v * (theta / sin_half)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

/// Tangent coordinates on SE(3), `[ω, ρ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(omega: Vector3<f64>, rho: Vector3<f64>) -> Self {
        Self(Vector6::new(omega.x, omega.y, omega.z, rho.x, rho.y, rho.z))
    }

    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rho(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }
}

/// Rigid transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Rotation::identity(), Vector3::new(x, y, z))
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::new(Rotation::exp(&Vector3::new(0.0, 0.0, yaw)), translation)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -inv.rotate(&self.translation),
        }
    }

    /// `self⁻¹ ∘ other`
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// SE(3) exponential.
    pub fn exp(xi: &Twist) -> Pose {
        let omega = xi.omega();
        Pose {
            rotation: Rotation::exp(&omega),
            translation: so3_left_jacobian(&omega) * xi.rho(),
        }
    }

    /// SE(3) logarithm; unique for rotation angles below π.
    pub fn log(&self) -> Twist {
        let omega = self.rotation.log();
        Twist::new(omega, so3_left_jacobian_inv(&omega) * self.translation)
    }

    /// Adjoint in `[ω, ρ]` ordering: `exp(Ad·ξ) = T·exp(ξ)·T⁻¹`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(hat(&self.translation) * r));
        ad
    }

    /// 4×4 homogeneous matrix.
    pub fn matrix(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.wxyz().iter().all(|v| v.is_finite())
    }
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let w = hat(omega);
    Matrix3::identity() + w * a + w * w * b
}

/// Inverse of the left Jacobian of SO(3).
pub fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    let w = hat(omega);
    Matrix3::identity() - w * 0.5 + w * w * c
}

/// Translational coupling block of the SE(3) left Jacobian.
fn se3_q(omega: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (c1, c2, c3) = if theta < SMALL_ANGLE {
        (
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
            1.0 / 24.0 - theta2 / 720.0 + theta2 * theta2 / 40320.0,
            1.0 / 120.0 - theta2 / 2520.0 + theta2 * theta2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t4 = theta2 * theta2;
        (
            (theta - s) / (theta2 * theta),
            (theta2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let w = hat(omega);
    let v = hat(rho);
    let wv = w * v;
    let vw = v * w;
    let wvw = wv * w;
    v * 0.5 + (wv + vw + wvw) * c1 + (w * wv + vw * w - wvw * 3.0) * c2
        + (wvw * w + w * wvw) * c3
}

/// Inverse left Jacobian of SE(3) in `[ω, ρ]` ordering.
pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let omega = xi.omega();
    let jinv = so3_left_jacobian_inv(&omega);
    let q = se3_q(&omega, &xi.rho());
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    m.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-(jinv * q * jinv)));
    m
}

/// Inverse right Jacobian of SE(3): `log(exp(ξ)·exp(δ)) ≈ ξ + Jr⁻¹(ξ)·δ`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&Twist(-xi.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(0.0..max_angle);
        let t = Vector3::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        );
        Pose::new(Rotation::from_axis_angle(&axis, angle), t)
    }

    fn pose_distance(a: &Pose, b: &Pose) -> (f64, f64) {
        let d = a.between(b);
        (d.rotation.angle(), d.translation.norm())
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng, 3.0);
        let (ra, ta) = pose_distance(&Pose::identity().compose(&p), &p);
        assert!(ra < 1e-12 && ta < 1e-12);
        let id = p.compose(&p.inverse());
        assert!(id.rotation.angle() < 1e-9);
        assert!(id.translation.norm() < 1e-9);
    }

    #[test]
    fn compose_quarter_turns_matches_hand_product() {
        let a = Pose::from_yaw(FRAC_PI_2, Vector3::new(1.0, 0.0, 0.0));
        let c = a.compose(&a);
        let expected = Pose::from_yaw(PI, Vector3::new(1.0, 1.0, 0.0));
        let (ra, ta) = pose_distance(&c, &expected);
        assert!(ra < 1e-12, "{ra}");
        assert!(ta < 1e-12, "{ta}");
        // the 4×4 route agrees
        let m = a.matrix() * a.matrix();
        assert!((m - expected.matrix()).norm() < 1e-12);
    }

    #[test]
    fn transform_point_cases() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().transform_point(&p), p);
        let t = Pose::from_translation(1.0, 0.0, 0.0);
        assert_eq!(t.transform_point(&Vector3::zeros()), Vector3::new(1.0, 0.0, 0.0));
        let r = Pose::from_yaw(FRAC_PI_2, Vector3::zeros());
        let q = r.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert!((q - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn exp_log_examples() {
        let id = Pose::exp(&Twist::zero());
        assert_eq!(id.translation, Vector3::zeros());
        assert!(id.rotation.angle() < 1e-15);

        let xi = Twist(Vector6::new(0.1, 0.0, 0.0, 0.2, 0.0, 0.0));
        let back = Pose::exp(&xi).log();
        assert!((back.0 - xi.0).norm() < 1e-9);

        let t = Pose::exp(&Twist(Vector6::new(0.0, 0.0, 0.0, 1.0, 2.0, 3.0)));
        assert_eq!(t.translation, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(t.rotation.wxyz(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn log_at_pi_picks_nonnegative_w_branch() {
        let r = Rotation::from_wxyz(0.0, 0.0, 0.0, 1.0).unwrap();
        let w = r.log();
        assert!((w - Vector3::new(0.0, 0.0, PI)).norm() < 1e-12);
        let r = Rotation::from_wxyz(-0.0, 0.0, 0.0, -1.0).unwrap();
        assert!((r.log().norm() - PI).abs() < 1e-12);
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = random_pose(&mut rng, PI);
            let r = p.rotation.matrix();
            assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
            assert!((p.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn group_axioms_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = random_pose(&mut rng, PI);
            let b = random_pose(&mut rng, PI);
            let c = random_pose(&mut rng, PI);
            let (r, t) = pose_distance(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c)));
            assert!(r < 1e-9 && t < 1e-9);
            let (r, t) = pose_distance(&a.compose(&a.inverse()), &Pose::identity());
            assert!(r < 1e-9 && t < 1e-9);
            let (r, t) = pose_distance(&a.inverse().compose(&a), &Pose::identity());
            assert!(r < 1e-9 && t < 1e-9);
            let p = Vector3::new(rng.random(), rng.random(), rng.random());
            let lhs = a.compose(&b).transform_point(&p);
            let rhs = a.transform_point(&b.transform_point(&p));
            assert!((lhs - rhs).norm() < 1e-9);
            assert!((a.compose(&b).rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let p = random_pose(&mut rng, PI - 0.1);
            let (r, t) = pose_distance(&Pose::exp(&p.log()), &p);
            assert!(r < 1e-9 && t < 1e-9);
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let angle = rng.random_range(1e-6..PI - 0.1);
            let rho = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let xi = Twist::new(axis * angle, rho);
            assert!((Pose::exp(&xi).log().0 - xi.0).norm() < 1e-9);
        }
    }

    #[test]
    fn adjoint_conjugates_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = random_pose(&mut rng, 3.0);
            let xi = Twist(Vector6::from_fn(|_, _| rng.random_range(-0.5..0.5)));
            let lhs = Pose::exp(&Twist(t.adjoint() * xi.0));
            let rhs = t.compose(&Pose::exp(&xi)).compose(&t.inverse());
            let (r, d) = pose_distance(&lhs, &rhs);
            assert!(r < 1e-9 && d < 1e-9);
        }
    }

    #[test]
    fn right_jacobian_inverse_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for scale in [1e-3, 0.05, 0.5, 2.0] {
            let xi = Twist(Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)) * scale);
            let analytic = se3_right_jacobian_inv(&xi);
            let base = Pose::exp(&xi);
            let h = 1e-6;
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let plus = base.compose(&Pose::exp(&Twist(d))).log().0;
                let minus = base.compose(&Pose::exp(&Twist(-d))).log().0;
                let col = (plus - minus) / (2.0 * h);
                assert!(
                    (col - analytic.column(k)).norm() < 1e-6,
                    "scale {scale} col {k}: {col} vs {}",
                    analytic.column(k)
                );
            }
        }
    }
}
