//! IMU preintegration between consecutive key states.
//!
//! A batch of IMU samples is accumulated into position/velocity/attitude
//! preintegrals (α, β, γ) by midpoint-rule propagation, together with a 15×15
//! covariance and the first-order bias sensitivities used to re-linearize the
//! batch when the bias estimates move. The 15-dimensional inertial residual
//! couples two key states through these preintegrals.
//!
//! Internal block order for residual rows and the covariance is
//! `[δα(p), δβ(v), δθ, δb_a, δb_g]`; Jacobian columns follow the error-state
//! order `[δθ, δp, δv, δb_a, δb_g]` of [`crate::manifold::ErrorState`].

use nalgebra::SMatrix;
use thiserror::Error;

use crate::manifold::{
    boxplus, quat_from_small_angle, quat_left, quat_right, skew, ErrorState, ImuKeyState, Mat15,
    Mat3, Quat, Vec15, Vec3, WorldConstants,
};

/// Largest admissible gap between consecutive samples, seconds.
const MAX_SAMPLE_DT: f64 = 0.1;
/// Bias excursion beyond which the first-order correction is unreliable.
const RELIN_THRESHOLD: f64 = 0.1;

type Mat15x18 = SMatrix<f64, 15, 18>;

#[derive(Debug, Error, PartialEq)]
pub enum PreintError {
    #[error("non-positive sample interval dt={0}")]
    NonPositiveDt(f64),
    #[error("sample gap dt={0} exceeds {MAX_SAMPLE_DT} s")]
    SampleGap(f64),
    #[error("bias moved {0} from linearization point, re-linearization required")]
    RelinearizationRequired(f64),
}

/// One IMU measurement: specific force and angular rate in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    /// Timestamp, seconds.
    pub t: f64,
    /// Specific force, m/s².
    pub accel: Vec3,
    /// Angular rate, rad/s.
    pub gyro: Vec3,
}

/// Continuous-time IMU noise densities and random walks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImuNoise {
    /// Accelerometer noise density, m/s²/√Hz.
    pub accel_noise_density: f64,
    /// Gyroscope noise density, rad/s/√Hz.
    pub gyro_noise_density: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub accel_random_walk: f64,
    /// Gyroscope bias random walk, rad/s²/√Hz.
    pub gyro_random_walk: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            accel_noise_density: 2.0e-3,
            gyro_noise_density: 1.6968e-4,
            accel_random_walk: 3.0e-3,
            gyro_random_walk: 1.9393e-5,
        }
    }
}

/// Accumulated preintegrals between two key states.
#[derive(Debug, Clone, PartialEq)]
pub struct Preintegration {
    /// Position preintegral, meters.
    pub alpha: Vec3,
    /// Velocity preintegral, m/s.
    pub beta: Vec3,
    /// Attitude preintegral.
    pub gamma: Quat,
    /// Integrated duration, seconds.
    pub dt_total: f64,
    /// 15×15 covariance of the preintegration error.
    pub cov: Mat15,
    /// Chained transition; bias-sensitivity blocks are read out of it.
    jac: Mat15,
    /// Accelerometer bias at linearization.
    pub lin_ba: Vec3,
    /// Gyroscope bias at linearization.
    pub lin_bg: Vec3,
    noise: ImuNoise,
}

impl Preintegration {
    pub fn new(lin_ba: Vec3, lin_bg: Vec3, noise: ImuNoise) -> Self {
        Self {
            alpha: Vec3::zeros(),
            beta: Vec3::zeros(),
            gamma: Quat::identity(),
            dt_total: 0.0,
            cov: Mat15::zeros(),
            jac: Mat15::identity(),
            lin_ba,
            lin_bg,
            noise,
        }
    }

    pub fn j_alpha_ba(&self) -> Mat3 {
        self.jac.fixed_view::<3, 3>(0, 9).into()
    }
    pub fn j_alpha_bg(&self) -> Mat3 {
        self.jac.fixed_view::<3, 3>(0, 12).into()
    }
    pub fn j_beta_ba(&self) -> Mat3 {
        self.jac.fixed_view::<3, 3>(3, 9).into()
    }
    pub fn j_beta_bg(&self) -> Mat3 {
        self.jac.fixed_view::<3, 3>(3, 12).into()
    }
    pub fn j_gamma_bg(&self) -> Mat3 {
        self.jac.fixed_view::<3, 3>(6, 12).into()
    }

    /// Midpoint-rule propagation over one sample interval.
    pub fn integrate(&mut self, s0: &ImuSample, s1: &ImuSample) -> Result<(), PreintError> {
        let dt = s1.t - s0.t;
        if dt <= 0.0 {
            return Err(PreintError::NonPositiveDt(dt));
        }
        if dt > MAX_SAMPLE_DT {
            return Err(PreintError::SampleGap(dt));
        }

        let a0 = s0.accel - self.lin_ba;
        let a1 = s1.accel - self.lin_ba;
        let w_mid = 0.5 * (s0.gyro + s1.gyro) - self.lin_bg;

        let gamma0 = self.gamma;
        let gamma1 = gamma0 * quat_from_small_angle(&(w_mid * dt));
        let r0 = gamma0.to_rotation_matrix().into_inner();
        let r1 = gamma1.to_rotation_matrix().into_inner();

        let a_mid = 0.5 * (r0 * a0 + r1 * a1);
        let alpha1 = self.alpha + self.beta * dt + 0.5 * a_mid * dt * dt;
        let beta1 = self.beta + a_mid * dt;

        // Discrete error-state transition; block order (α, β, θ, b_a, b_g).
        let i3 = Mat3::identity();
        let x = r0 * skew(&a0);
        let y = r1 * skew(&a1) * (i3 - skew(&w_mid) * dt);
        let r1a1 = r1 * skew(&a1);

        let mut f = Mat15::identity();
        f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(i3 * dt));
        f.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-0.25 * dt * dt * (x + y)));
        f.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-0.25 * dt * dt * (r0 + r1)));
        f.fixed_view_mut::<3, 3>(0, 12).copy_from(&(0.25 * dt * dt * dt * r1a1));
        f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-0.5 * dt * (x + y)));
        f.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-0.5 * dt * (r0 + r1)));
        f.fixed_view_mut::<3, 3>(3, 12).copy_from(&(0.5 * dt * dt * r1a1));
        f.fixed_view_mut::<3, 3>(6, 6).copy_from(&(i3 - skew(&w_mid) * dt));
        f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-i3 * dt));

        // Noise input map; columns (n_a0, n_g0, n_a1, n_g1, n_ba, n_bg).
        let mut v = Mat15x18::zeros();
        v.fixed_view_mut::<3, 3>(0, 0).copy_from(&(0.25 * dt * dt * r0));
        v.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-0.125 * dt * dt * dt * r1a1));
        v.fixed_view_mut::<3, 3>(0, 6).copy_from(&(0.25 * dt * dt * r1));
        v.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-0.125 * dt * dt * dt * r1a1));
        v.fixed_view_mut::<3, 3>(3, 0).copy_from(&(0.5 * dt * r0));
        v.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-0.25 * dt * dt * r1a1));
        v.fixed_view_mut::<3, 3>(3, 6).copy_from(&(0.5 * dt * r1));
        v.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-0.25 * dt * dt * r1a1));
        v.fixed_view_mut::<3, 3>(6, 3).copy_from(&(0.5 * dt * i3));
        v.fixed_view_mut::<3, 3>(6, 9).copy_from(&(0.5 * dt * i3));
        v.fixed_view_mut::<3, 3>(9, 12).copy_from(&(dt * i3));
        v.fixed_view_mut::<3, 3>(12, 15).copy_from(&(dt * i3));

        // Continuous densities discretized over dt.
        let n = &self.noise;
        let mut q = SMatrix::<f64, 18, 18>::zeros();
        let an2 = n.accel_noise_density * n.accel_noise_density / dt;
        let gn2 = n.gyro_noise_density * n.gyro_noise_density / dt;
        let aw2 = n.accel_random_walk * n.accel_random_walk / dt;
        let gw2 = n.gyro_random_walk * n.gyro_random_walk / dt;
        for k in 0..3 {
            q[(k, k)] = an2;
            q[(3 + k, 3 + k)] = gn2;
            q[(6 + k, 6 + k)] = an2;
            q[(9 + k, 9 + k)] = gn2;
            q[(12 + k, 12 + k)] = aw2;
            q[(15 + k, 15 + k)] = gw2;
        }

        self.cov = f * self.cov * f.transpose() + v * q * v.transpose();
        self.cov = 0.5 * (self.cov + self.cov.transpose());
        self.jac = f * self.jac;
        self.alpha = alpha1;
        self.beta = beta1;
        self.gamma = Quat::new_normalize(*gamma1.quaternion());
        self.dt_total += dt;
        Ok(())
    }

    /// Integrate a whole batch of consecutive samples.
    pub fn integrate_batch(&mut self, samples: &[ImuSample]) -> Result<(), PreintError> {
        for pair in samples.windows(2) {
            self.integrate(&pair[0], &pair[1])?;
        }
        Ok(())
    }

    /// First-order re-linearized preintegrals at biases (ba, bg).
    pub fn bias_corrected(&self, ba: &Vec3, bg: &Vec3) -> Result<(Vec3, Vec3, Quat), PreintError> {
        let dba = ba - self.lin_ba;
        let dbg = bg - self.lin_bg;
        let excursion = dba.norm().max(dbg.norm());
        if excursion > RELIN_THRESHOLD {
            return Err(PreintError::RelinearizationRequired(excursion));
        }
        Ok(self.bias_corrected_unchecked(&dba, &dbg))
    }

    fn bias_corrected_unchecked(&self, dba: &Vec3, dbg: &Vec3) -> (Vec3, Vec3, Quat) {
        let alpha = self.alpha + self.j_alpha_ba() * dba + self.j_alpha_bg() * dbg;
        let beta = self.beta + self.j_beta_ba() * dba + self.j_beta_bg() * dbg;
        let gamma = self.gamma * quat_from_small_angle(&(self.j_gamma_bg() * dbg));
        (alpha, beta, gamma)
    }

    /// Whitener: inverse Cholesky factor of the covariance, so
    /// `sqrt_info() * r` has unit covariance. A small diagonal jitter keeps
    /// the factorization alive for short batches.
    pub fn sqrt_info(&self) -> Mat15 {
        let mut c = self.cov;
        for k in 0..15 {
            c[(k, k)] += 1e-12;
        }
        let chol = c.cholesky().expect("jittered preintegration covariance not PSD");
        chol.l()
            .solve_lower_triangular(&Mat15::identity())
            .expect("singular Cholesky factor")
    }
}

/// The 15-dimensional inertial residual between key states `xj` and `xj1`.
///
/// Sign convention is predicted-minus-preintegrated throughout; rows are
/// (position, velocity, attitude, Δb_a, Δb_g). The attitude row is
/// `2·vec(γ'⁻¹ ⊗ q_j⁻¹ ⊗ q_{j+1})`.
pub fn imu_residual(
    preint: &Preintegration,
    xj: &ImuKeyState,
    xj1: &ImuKeyState,
    world: &WorldConstants,
) -> Vec15 {
    let dt = preint.dt_total;
    let g = world.gravity;
    let (alpha, beta, gamma) =
        preint.bias_corrected_unchecked(&(xj.b_a - preint.lin_ba), &(xj.b_g - preint.lin_bg));
    let rjt = xj.rotation().transpose();

    let gamma_p = rjt * (xj1.p - xj.p - xj.v * dt - 0.5 * g * dt * dt);
    let gamma_v = rjt * (xj1.v - xj.v - g * dt);
    let dq = gamma.inverse() * (xj.q.inverse() * xj1.q);

    let mut r = Vec15::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&(gamma_p - alpha));
    r.fixed_rows_mut::<3>(3).copy_from(&(gamma_v - beta));
    r.fixed_rows_mut::<3>(6)
        .copy_from(&(2.0 * Vec3::new(dq.i, dq.j, dq.k)));
    r.fixed_rows_mut::<3>(9).copy_from(&(xj1.b_a - xj.b_a));
    r.fixed_rows_mut::<3>(12).copy_from(&(xj1.b_g - xj.b_g));
    r
}

/// Analytic Jacobians of [`imu_residual`] with respect to the boxplus error
/// states of `xj` and `xj1`.
pub fn imu_residual_jacobians(
    preint: &Preintegration,
    xj: &ImuKeyState,
    xj1: &ImuKeyState,
    world: &WorldConstants,
) -> (Mat15, Mat15) {
    let dt = preint.dt_total;
    let g = world.gravity;
    let (_, _, gamma) =
        preint.bias_corrected_unchecked(&(xj.b_a - preint.lin_ba), &(xj.b_g - preint.lin_bg));
    let rjt = xj.rotation().transpose();
    let i3 = Mat3::identity();

    let gamma_p = rjt * (xj1.p - xj.p - xj.v * dt - 0.5 * g * dt * dt);
    let gamma_v = rjt * (xj1.v - xj.v - g * dt);
    let b = xj.q.inverse() * xj1.q;
    let a = gamma.inverse() * b;

    let vv = |m: &nalgebra::Matrix4<f64>| -> Mat3 { m.fixed_view::<3, 3>(1, 1).into() };

    let mut jj = Mat15::zeros();
    let mut jj1 = Mat15::zeros();

    // Position row.
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&gamma_p));
    jj.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rjt));
    jj.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-rjt * dt));
    jj.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-preint.j_alpha_ba()));
    jj.fixed_view_mut::<3, 3>(0, 12).copy_from(&(-preint.j_alpha_bg()));
    jj1.fixed_view_mut::<3, 3>(0, 3).copy_from(&rjt);

    // Velocity row.
    jj.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&gamma_v));
    jj.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-rjt));
    jj.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-preint.j_beta_ba()));
    jj.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-preint.j_beta_bg()));
    jj1.fixed_view_mut::<3, 3>(3, 6).copy_from(&rjt);

    // Attitude row, exact derivatives of 2·vec(γ'⁻¹ ⊗ q_j⁻¹ ⊗ q_{j+1}).
    jj.fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&(-vv(&(quat_left(&gamma.inverse()) * quat_right(&b)))));
    // The γ bias correction is already a finite rotation at the current bias;
    // chain its right Jacobian so the δb_g column stays exact there.
    let corr = preint.j_gamma_bg() * (xj.b_g - preint.lin_bg);
    jj.fixed_view_mut::<3, 3>(6, 12).copy_from(
        &(-vv(&quat_right(&a)) * crate::manifold::so3_right_jacobian(&corr) * preint.j_gamma_bg()),
    );
    jj1.fixed_view_mut::<3, 3>(6, 0).copy_from(&vv(&quat_left(&a)));

    // Bias random-walk rows.
    jj.fixed_view_mut::<3, 3>(9, 9).copy_from(&(-i3));
    jj.fixed_view_mut::<3, 3>(12, 12).copy_from(&(-i3));
    jj1.fixed_view_mut::<3, 3>(9, 9).copy_from(&i3);
    jj1.fixed_view_mut::<3, 3>(12, 12).copy_from(&i3);

    (jj, jj1)
}

/// Predict the key state at the end of the batch from the state at its start.
pub fn propagate(
    preint: &Preintegration,
    x0: &ImuKeyState,
    world: &WorldConstants,
) -> ImuKeyState {
    let dt = preint.dt_total;
    let g = world.gravity;
    let (alpha, beta, gamma) =
        preint.bias_corrected_unchecked(&(x0.b_a - preint.lin_ba), &(x0.b_g - preint.lin_bg));
    let r0 = x0.rotation();
    let mut out = x0.clone();
    out.q = Quat::new_normalize(*(x0.q * gamma).quaternion());
    out.p = x0.p + x0.v * dt + 0.5 * g * dt * dt + r0 * alpha;
    out.v = x0.v + g * dt + r0 * beta;
    out.t_stamp = x0.t_stamp + dt;
    out
}

/// Slice `[t0, t1]` out of an IMU buffer, linearly interpolating the boundary
/// samples to the exact endpoints. The buffer must bracket both endpoints.
pub fn slice_interpolated(buffer: &[ImuSample], t0: f64, t1: f64) -> Option<Vec<ImuSample>> {
    if t1 <= t0 || buffer.len() < 2 {
        return None;
    }
    if buffer.first()?.t > t0 || buffer.last()?.t < t1 {
        return None;
    }
    let lerp = |a: &ImuSample, b: &ImuSample, t: f64| {
        let w = (t - a.t) / (b.t - a.t);
        ImuSample {
            t,
            accel: a.accel * (1.0 - w) + b.accel * w,
            gyro: a.gyro * (1.0 - w) + b.gyro * w,
        }
    };
    let mut out = Vec::new();
    for pair in buffer.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.t <= t0 {
            continue;
        }
        if a.t >= t1 {
            break;
        }
        if out.is_empty() {
            out.push(lerp(a, b, t0));
        }
        if b.t < t1 {
            out.push(*b);
        } else {
            out.push(lerp(a, b, t1));
            break;
        }
    }
    if out.len() >= 2 {
        Some(out)
    } else {
        None
    }
}

/// Interpolate the gyro reading at time `t`.
pub fn gyro_at(buffer: &[ImuSample], t: f64) -> Option<Vec3> {
    let s = slice_interpolated(buffer, t, t + 1e-6)?;
    Some(s[0].gyro)
}

/// Evaluate the whitened inertial residual after a boxplus perturbation of
/// one of the two states; shared by the finite-difference tests.
#[doc(hidden)]
pub fn residual_perturbed(
    preint: &Preintegration,
    xj: &ImuKeyState,
    xj1: &ImuKeyState,
    world: &WorldConstants,
    which: usize,
    delta: &Vec15,
) -> Vec15 {
    let d = ErrorState::from_vector(delta);
    let (a, b) = if which == 0 {
        (boxplus(xj, &d), xj1.clone())
    } else {
        (xj.clone(), boxplus(xj1, &d))
    };
    imu_residual(preint, &a, &b, world)
}
