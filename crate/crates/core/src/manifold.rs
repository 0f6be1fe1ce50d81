//! Navigation states and the retraction/difference operators used by every
//! factor and by the solver.
//!
//! Conventions, fixed once for the whole crate:
//! - quaternions are Hamilton, stored (w, x, y, z), and rotate body to world;
//! - rotation error is a local (right) perturbation: `R(q ⊗ Exp(δθ))`;
//! - the per-state error vector is `[δθ, δp, δv, δb_a, δb_g]`, 15 dimensions.

use nalgebra::{Matrix3, Matrix4, Quaternion, SMatrix, SVector, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;
pub type Vec15 = SVector<f64, 15>;
pub type Mat15 = SMatrix<f64, 15, 15>;

/// Skew-symmetric matrix `[v]×` such that `[v]× w = v × w`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exact SO(3) exponential as a unit quaternion, `exp(θ/2)`.
///
/// Falls back to the first-order series below 1e-8 rad to avoid the 0/0 in
/// `sin(θ/2)/θ`.
pub fn quat_from_small_angle(theta: &Vec3) -> Quat {
    let angle = theta.norm();
    if angle < 1e-8 {
        let half = theta * 0.5;
        Quat::new_normalize(Quaternion::new(1.0, half.x, half.y, half.z))
    } else {
        let half = angle * 0.5;
        let s = half.sin() / angle;
        Quat::new_normalize(Quaternion::new(half.cos(), theta.x * s, theta.y * s, theta.z * s))
    }
}

/// Exact SO(3) log map, sign-corrected to the w ≥ 0 hemisphere.
pub fn small_angle_from_quat(q: &Quat) -> Vec3 {
    let (w, v) = if q.w >= 0.0 {
        (q.w, Vec3::new(q.i, q.j, q.k))
    } else {
        (-q.w, -Vec3::new(q.i, q.j, q.k))
    };
    let vn = v.norm();
    if vn < 1e-9 {
        // 2·atan2(x, w)/x → 2/w as x → 0.
        v * (2.0 / w)
    } else {
        v * (2.0 * vn.atan2(w) / vn)
    }
}

/// Right Jacobian of the SO(3) exponential.
///
/// `Exp(θ + δ) ≈ Exp(θ) Exp(Jr(θ) δ)` to first order in δ.
pub fn so3_right_jacobian(theta: &Vec3) -> Mat3 {
    let angle = theta.norm();
    if angle < 1e-8 {
        return Mat3::identity() - 0.5 * skew(theta);
    }
    let s = skew(theta);
    let a2 = angle * angle;
    Mat3::identity() - (1.0 - angle.cos()) / a2 * s
        + (angle - angle.sin()) / (a2 * angle) * (s * s)
}

/// 4×4 left-multiplication matrix: `p ⊗ q = quat_left(p) · [q_w, q_x, q_y, q_z]ᵀ`.
pub fn quat_left(p: &Quat) -> Matrix4<f64> {
    let (w, x, y, z) = (p.w, p.i, p.j, p.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// 4×4 right-multiplication matrix: `p ⊗ q = quat_right(q) · [p_w, p_x, p_y, p_z]ᵀ`.
pub fn quat_right(q: &Quat) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// Per-window navigation state: attitude, position, velocity and IMU biases,
/// plus the bookkeeping needed by the time-offset compensation.
///
/// `t_dj` is the offset estimate in effect when this key state was built; it
/// is frozen so later offset updates act only through pose compensation.
/// `gyro_raw` is the (interpolated) gyro measurement at `t_stamp`, kept on the
/// state so the bias-corrected angular velocity survives IMU buffer trimming.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuKeyState {
    /// Body-to-world rotation.
    pub q: Quat,
    /// Position in the world frame, meters.
    pub p: Vec3,
    /// Velocity in the world frame, m/s.
    pub v: Vec3,
    /// Accelerometer bias, m/s².
    pub b_a: Vec3,
    /// Gyroscope bias, rad/s.
    pub b_g: Vec3,
    /// Timestamp on the IMU clock, seconds.
    pub t_stamp: f64,
    /// Time-offset estimate at construction time, seconds. Immutable.
    pub t_dj: f64,
    /// Raw gyro measurement at `t_stamp`, rad/s.
    pub gyro_raw: Vec3,
}

impl ImuKeyState {
    /// Bias-corrected body angular velocity at `t_stamp`.
    pub fn omega_body(&self) -> Vec3 {
        self.gyro_raw - self.b_g
    }

    pub fn rotation(&self) -> Mat3 {
        self.q.to_rotation_matrix().into_inner()
    }
}

/// 15-dimensional error state `[δθ, δp, δv, δb_a, δb_g]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorState {
    pub dtheta: Vec3,
    pub dp: Vec3,
    pub dv: Vec3,
    pub db_a: Vec3,
    pub db_g: Vec3,
}

impl ErrorState {
    pub fn from_vector(v: &Vec15) -> Self {
        Self {
            dtheta: v.fixed_rows::<3>(0).into(),
            dp: v.fixed_rows::<3>(3).into(),
            dv: v.fixed_rows::<3>(6).into(),
            db_a: v.fixed_rows::<3>(9).into(),
            db_g: v.fixed_rows::<3>(12).into(),
        }
    }

    pub fn to_vector(&self) -> Vec15 {
        let mut v = Vec15::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.dtheta);
        v.fixed_rows_mut::<3>(3).copy_from(&self.dp);
        v.fixed_rows_mut::<3>(6).copy_from(&self.dv);
        v.fixed_rows_mut::<3>(9).copy_from(&self.db_a);
        v.fixed_rows_mut::<3>(12).copy_from(&self.db_g);
        v
    }
}

/// Retraction: apply an error state to a key state.
///
/// Rotation composes on the right; the vector parts add. Timestamps and the
/// frozen `t_dj` are untouched; the bias-corrected angular velocity follows
/// the updated gyro bias automatically through `omega_body()`.
pub fn boxplus(state: &ImuKeyState, delta: &ErrorState) -> ImuKeyState {
    let mut out = state.clone();
    out.q = Quat::new_normalize(*(state.q * quat_from_small_angle(&delta.dtheta)).quaternion());
    out.p += delta.dp;
    out.v += delta.dv;
    out.b_a += delta.db_a;
    out.b_g += delta.db_g;
    out
}

/// Difference: the error state taking `b` to `a`, inverse of [`boxplus`].
pub fn boxminus(a: &ImuKeyState, b: &ImuKeyState) -> ErrorState {
    ErrorState {
        dtheta: small_angle_from_quat(&(b.q.inverse() * a.q)),
        dp: a.p - b.p,
        dv: a.v - b.v,
        db_a: a.b_a - b.b_a,
        db_g: a.b_g - b.b_g,
    }
}

/// Camera-to-IMU extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraExtrinsics {
    /// Rotation taking camera-frame vectors into the IMU frame.
    pub r_ic: Mat3,
    /// Camera origin expressed in the IMU frame, meters.
    pub p_ic: Vec3,
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        Self { r_ic: Mat3::identity(), p_ic: Vec3::zeros() }
    }

    /// Orthonormal with determinant +1, within 1e-9.
    pub fn is_valid(&self) -> bool {
        let rtr = self.r_ic.transpose() * self.r_ic;
        (rtr - Mat3::identity()).norm() < 1e-9 && (self.r_ic.determinant() - 1.0).abs() < 1e-9
    }
}

/// World-frame constants shared by all factors.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConstants {
    /// Gravitational acceleration vector in the world frame, m/s².
    pub gravity: Vec3,
}

impl Default for WorldConstants {
    fn default() -> Self {
        Self { gravity: Vec3::new(0.0, 0.0, -9.81) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rodrigues(theta: &Vec3) -> Mat3 {
        // Independent rotation-matrix exponential oracle.
        let angle = theta.norm();
        if angle < 1e-12 {
            return Mat3::identity();
        }
        let k = skew(&(theta / angle));
        Mat3::identity() + angle.sin() * k + (1.0 - angle.cos()) * (k * k)
    }

    fn random_state(rng: &mut ChaCha8Rng) -> ImuKeyState {
        let r = |rng: &mut ChaCha8Rng| {
            Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        };
        ImuKeyState {
            q: quat_from_small_angle(&(r(rng) * 2.0)),
            p: r(rng) * 5.0,
            v: r(rng),
            b_a: r(rng) * 0.05,
            b_g: r(rng) * 0.01,
            t_stamp: 1.0,
            t_dj: 0.0,
            gyro_raw: r(rng),
        }
    }

    #[test]
    fn exp_identity_and_axis() {
        let q = quat_from_small_angle(&Vec3::zeros());
        assert_eq!((q.w, q.i, q.j, q.k), (1.0, 0.0, 0.0, 0.0));

        let q = quat_from_small_angle(&Vec3::new(0.0, 0.0, std::f64::consts::PI));
        assert_relative_eq!(q.w, 0.0, epsilon = 1e-12);
        assert_relative_eq!(q.k, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn exp_matches_rodrigues_oracle() {
        let theta = Vec3::new(0.3, -0.2, 0.1);
        let r_quat = quat_from_small_angle(&theta).to_rotation_matrix().into_inner();
        assert_relative_eq!(r_quat, rodrigues(&theta), epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let axis = Vec3::new(rng.random(), rng.random(), rng.random()).normalize();
            let theta = axis * rng.random_range(0.0..std::f64::consts::PI);
            let r_quat = quat_from_small_angle(&theta).to_rotation_matrix().into_inner();
            assert_relative_eq!(r_quat, rodrigues(&theta), epsilon = 1e-12);
        }
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let theta = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let jr = so3_right_jacobian(&theta);
            for col in 0..3 {
                let mut d = Vec3::zeros();
                let h = 1e-6;
                d[col] = h;
                let q_plus = quat_from_small_angle(&(theta + d));
                let q_minus = quat_from_small_angle(&(theta - d));
                let base = quat_from_small_angle(&theta);
                let fd = (small_angle_from_quat(&(base.inverse() * q_plus))
                    - small_angle_from_quat(&(base.inverse() * q_minus)))
                    / (2.0 * h);
                assert_relative_eq!(Vec3::from(jr.column(col)), fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn quat_product_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = quat_from_small_angle(&Vec3::new(rng.random(), rng.random(), rng.random()));
            let q = quat_from_small_angle(&Vec3::new(rng.random(), rng.random(), rng.random()));
            let pq = p * q;
            let via_left = quat_left(&p) * nalgebra::Vector4::new(q.w, q.i, q.j, q.k);
            let via_right = quat_right(&q) * nalgebra::Vector4::new(p.w, p.i, p.j, p.k);
            for v in [via_left, via_right] {
                assert_relative_eq!(v.x, pq.w, epsilon = 1e-14);
                assert_relative_eq!(v.y, pq.i, epsilon = 1e-14);
                assert_relative_eq!(v.z, pq.j, epsilon = 1e-14);
                assert_relative_eq!(v.w, pq.k, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn boxplus_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_state(&mut rng);
        let y = boxplus(&x, &ErrorState::default());
        assert_eq!(x, y);
    }

    #[test]
    fn boxplus_shifts_position_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_state(&mut rng);
        let d = ErrorState { dp: Vec3::new(1.0, 2.0, 3.0), ..Default::default() };
        let y = boxplus(&x, &d);
        assert_eq!(y.p, x.p + Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(y.q, x.q);
    }

    #[test]
    fn boxminus_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_state(&mut rng);
        assert!(boxminus(&x, &x).to_vector().amax() < 1e-12);

        let mut y = x.clone();
        y.q = Quat::new_normalize(*(x.q * quat_from_small_angle(&Vec3::new(0.1, 0.0, 0.0))).quaternion());
        let d = boxminus(&y, &x);
        assert_relative_eq!(d.dtheta, Vec3::new(0.1, 0.0, 0.0), epsilon = 1e-6);

        let mut z = x.clone();
        z.p += Vec3::new(0.0, 0.0, 5.0);
        assert_eq!(boxminus(&z, &x).dp, Vec3::new(0.0, 0.0, 5.0));
    }

    proptest! {
        #[test]
        fn boxplus_boxminus_round_trip(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_state(&mut rng);
            let d = ErrorState {
                dtheta: Vec3::new(rng.random_range(-0.057..0.057), rng.random_range(-0.057..0.057), rng.random_range(-0.057..0.057)),
                dp: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                dv: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                db_a: Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
                db_g: Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
            };
            let back = boxminus(&boxplus(&x, &d), &x);
            prop_assert!((back.to_vector() - d.to_vector()).norm() < 1e-9);
        }

        #[test]
        fn boxplus_preserves_quaternion_norm(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
            let mut x = random_state(&mut rng);
            for _ in 0..100 {
                let d = ErrorState {
                    dtheta: Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
                    ..Default::default()
                };
                x = boxplus(&x, &d);
                prop_assert!((x.q.as_ref().norm() - 1.0).abs() < 1e-9);
            }
        }
    }
}
