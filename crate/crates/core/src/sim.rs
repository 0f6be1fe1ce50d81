//! Synthetic sensor generation: analytic ground-truth trajectories, a static
//! feature cloud, noisy high-rate IMU and 30 Hz camera feature tracks with a
//! configurable injected camera-IMU time offset.
//!
//! The two clocks are modeled as one ideal clock plus a constant offset: the
//! frame *stamped* `t_image` contains projections of the true pose at
//! `t_image + true_td`. Attitude follows a rotation-vector program
//! `q(t) = Exp(φ(t))` with sinusoidal `φ`, so the body rate is available in
//! closed form as `ω = Jr(φ)·φ̇`.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{
    quat_from_small_angle, so3_right_jacobian, CameraExtrinsics, Mat3, Quat, Vec3, WorldConstants,
};
use crate::preintegration::{ImuNoise, ImuSample};
use crate::visual::{pinhole_project, Intrinsics, Vec2};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("time {t} outside trajectory duration [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },
    #[error("average visible features {avg:.1} below required minimum {min}")]
    InsufficientVisibility { avg: f64, min: usize },
    #[error("waypoint spline needs at least 2 waypoints with strictly increasing times")]
    BadWaypoints,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

/// Sinusoidal rotation-vector attitude program shared by all trajectory
/// kinds: `φ_i(t) = A_i·sin(ω_i t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttitudeProgram {
    pub amplitude: [f64; 3],
    pub rates: [f64; 3],
}

impl Default for AttitudeProgram {
    fn default() -> Self {
        // Peak body rate stays below ~1 rad/s.
        Self { amplitude: [0.25, 0.3, 0.4], rates: [0.8, 0.6, 0.7] }
    }
}

impl AttitudeProgram {
    fn phi(&self, t: f64) -> (Vec3, Vec3) {
        let mut phi = Vec3::zeros();
        let mut dphi = Vec3::zeros();
        for i in 0..3 {
            phi[i] = self.amplitude[i] * (self.rates[i] * t).sin();
            dphi[i] = self.amplitude[i] * self.rates[i] * (self.rates[i] * t).cos();
        }
        (phi, dphi)
    }

    fn attitude(&self, t: f64) -> (Quat, Vec3) {
        let (phi, dphi) = self.phi(t);
        let q = quat_from_small_angle(&phi);
        let omega = so3_right_jacobian(&phi) * dphi;
        (q, omega)
    }
}

/// Analytic ground-truth trajectory description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// `p_i(t) = A_i·sin(ω_i t)`; excitation on all axes.
    Sinusoid3d {
        amplitude: [f64; 3],
        rates: [f64; 3],
        attitude: AttitudeProgram,
        duration: f64,
        seed: u64,
    },
    /// Horizontal circle of the given radius plus an optional vertical bob.
    Circle {
        radius: f64,
        rate: f64,
        z_amplitude: f64,
        z_rate: f64,
        attitude: AttitudeProgram,
        duration: f64,
        seed: u64,
    },
    /// Natural cubic spline through `(t, p)` waypoints (C²-continuous).
    WaypointSpline {
        waypoints: Vec<(f64, [f64; 3])>,
        attitude: AttitudeProgram,
        duration: f64,
        seed: u64,
    },
}

impl TrajectorySpec {
    /// Desk-scale default: ≤ 2 m/s, ≤ 1 rad/s, excitation on every axis.
    pub fn default_sinusoid3d(duration: f64, seed: u64) -> Self {
        TrajectorySpec::Sinusoid3d {
            amplitude: [1.0, 0.8, 0.5],
            rates: [0.9, 0.7, 1.1],
            attitude: AttitudeProgram::default(),
            duration,
            seed,
        }
    }

    pub fn duration(&self) -> f64 {
        match self {
            TrajectorySpec::Sinusoid3d { duration, .. }
            | TrajectorySpec::Circle { duration, .. }
            | TrajectorySpec::WaypointSpline { duration, .. } => *duration,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            TrajectorySpec::Sinusoid3d { seed, .. }
            | TrajectorySpec::Circle { seed, .. }
            | TrajectorySpec::WaypointSpline { seed, .. } => *seed,
        }
    }
}

/// Ground-truth kinematic state at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthState {
    pub q: Quat,
    pub p: Vec3,
    pub v: Vec3,
    pub a_world: Vec3,
    pub omega_body: Vec3,
}

/// One axis of a natural cubic spline: knots `t_i`, values `y_i`, and second
/// derivatives `m_i` from the tridiagonal natural-spline system.
#[derive(Debug, Clone)]
struct SplineAxis {
    t: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl SplineAxis {
    fn fit(t: &[f64], y: &[f64]) -> Self {
        let n = t.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations; natural ends m=0.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                let h0 = t[i + 1] - t[i];
                let h1 = t[i + 2] - t[i + 1];
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h1 - (y[i + 1] - y[i]) / h0);
            }
            for i in 1..k {
                let h0 = t[i + 1] - t[i];
                let w = h0 / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (1..k).rev() {
                m[i] = (rhs[i - 1] - upper[i - 1] * m[i + 1]) / diag[i - 1];
            }
        }
        Self { t: t.to_vec(), y: y.to_vec(), m }
    }

    /// Value, first and second derivative at `t` (clamped to the knot range).
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let n = self.t.len();
        let t = t.clamp(self.t[0], self.t[n - 1]);
        let mut i = match self.t.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        i = i.min(n - 2);
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - t) / h;
        let b = (t - self.t[i]) / h;
        let (y0, y1, m0, m1) = (self.y[i], self.y[i + 1], self.m[i], self.m[i + 1]);
        let val = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let dv = (y1 - y0) / h + ((1.0 - 3.0 * a * a) * m0 + (3.0 * b * b - 1.0) * m1) * h / 6.0;
        let ddv = a * m0 + b * m1;
        (val, dv, ddv)
    }
}

/// Trajectory with precomputed spline coefficients, evaluable in closed form.
#[derive(Debug, Clone)]
pub struct Trajectory {
    spec: TrajectorySpec,
    spline: Option<[SplineAxis; 3]>,
}

impl Trajectory {
    pub fn new(spec: &TrajectorySpec) -> Result<Self, SimError> {
        let spline = match spec {
            TrajectorySpec::WaypointSpline { waypoints, .. } => {
                if waypoints.len() < 2 || waypoints.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(SimError::BadWaypoints);
                }
                let t: Vec<f64> = waypoints.iter().map(|w| w.0).collect();
                let axis = |k: usize| {
                    SplineAxis::fit(&t, &waypoints.iter().map(|w| w.1[k]).collect::<Vec<_>>())
                };
                Some([axis(0), axis(1), axis(2)])
            }
            _ => None,
        };
        Ok(Self { spec: spec.clone(), spline })
    }

    pub fn spec(&self) -> &TrajectorySpec {
        &self.spec
    }

    pub fn truth_state(&self, t: f64) -> Result<TruthState, SimError> {
        let duration = self.spec.duration();
        if !(0.0..=duration).contains(&t) {
            return Err(SimError::OutOfRange { t, duration });
        }
        let (p, v, a_world, attitude) = match &self.spec {
            TrajectorySpec::Sinusoid3d { amplitude, rates, attitude, .. } => {
                let mut p = Vec3::zeros();
                let mut v = Vec3::zeros();
                let mut a = Vec3::zeros();
                for i in 0..3 {
                    let (s, c) = (rates[i] * t).sin_cos();
                    p[i] = amplitude[i] * s;
                    v[i] = amplitude[i] * rates[i] * c;
                    a[i] = -amplitude[i] * rates[i] * rates[i] * s;
                }
                (p, v, a, attitude)
            }
            TrajectorySpec::Circle { radius, rate, z_amplitude, z_rate, attitude, .. } => {
                let (s, c) = (rate * t).sin_cos();
                let (zs, zc) = (z_rate * t).sin_cos();
                let p = Vec3::new(radius * c, radius * s, z_amplitude * zs);
                let v = Vec3::new(-radius * rate * s, radius * rate * c, z_amplitude * z_rate * zc);
                let a = Vec3::new(
                    -radius * rate * rate * c,
                    -radius * rate * rate * s,
                    -z_amplitude * z_rate * z_rate * zs,
                );
                (p, v, a, attitude)
            }
            TrajectorySpec::WaypointSpline { attitude, .. } => {
                let sp = self.spline.as_ref().expect("spline fitted at construction");
                let mut p = Vec3::zeros();
                let mut v = Vec3::zeros();
                let mut a = Vec3::zeros();
                for k in 0..3 {
                    let (y, dy, ddy) = sp[k].eval(t);
                    p[k] = y;
                    v[k] = dy;
                    a[k] = ddy;
                }
                (p, v, a, attitude)
            }
        };
        let (q, omega_body) = attitude.attitude(t);
        Ok(TruthState { q, p, v, a_world, omega_body })
    }
}

/// Convenience wrapper evaluating a spec directly.
pub fn truth_state(spec: &TrajectorySpec, t: f64) -> Result<TruthState, SimError> {
    Trajectory::new(spec)?.truth_state(t)
}

/// Noise configuration: IMU densities/random walks plus camera pixel noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub imu: ImuNoise,
    pub pixel_sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            imu: ImuNoise {
                accel_noise_density: 0.0,
                gyro_noise_density: 0.0,
                accel_random_walk: 0.0,
                gyro_random_walk: 0.0,
            },
            pixel_sigma: 0.0,
            seed,
        }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { imu: ImuNoise::default(), pixel_sigma: 1.0, seed: 0 }
    }
}

/// Static landmark cloud: points uniform in a spherical shell around the
/// given center, seeded by the trajectory seed so ground truth is independent
/// of the noise seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureCloudSpec {
    pub count: usize,
    pub center: [f64; 3],
    pub radius_min: f64,
    pub radius_max: f64,
}

impl Default for FeatureCloudSpec {
    fn default() -> Self {
        Self { count: 1400, center: [0.0; 3], radius_min: 5.0, radius_max: 9.0 }
    }
}

/// Full simulation scenario; serialized verbatim into scenario.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub schema_version: u32,
    pub trajectory: TrajectorySpec,
    pub features: FeatureCloudSpec,
    pub intrinsics: Intrinsics,
    /// Camera-to-IMU rotation as a rotation vector, radians.
    pub extrinsics_rotvec: [f64; 3],
    /// Camera position in the IMU frame, meters.
    pub extrinsics_translation: [f64; 3],
    pub image_width: u32,
    pub image_height: u32,
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub true_td: f64,
    pub noise: NoiseSpec,
    /// Scenario generation fails if the mean visible count drops below this.
    pub min_visible: usize,
}

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

impl SimScenario {
    /// Default desk-scale scenario: 60 s sinusoid, 752×480 pinhole camera
    /// looking along the body x axis, 1 kHz IMU, 30 Hz camera.
    pub fn default_sinusoid3d(duration: f64, true_td: f64, noise: NoiseSpec) -> Self {
        // Camera x = -body y, camera y = -body z, camera z (optical axis) =
        // body x; forward-looking camera with a small lever arm.
        let r_ic = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let rotvec = rotvec_from_mat(&r_ic);
        Self {
            schema_version: SCENARIO_SCHEMA_VERSION,
            trajectory: TrajectorySpec::default_sinusoid3d(duration, 1),
            features: FeatureCloudSpec::default(),
            intrinsics: Intrinsics { fx: 460.0, fy: 460.0, cx: 376.0, cy: 240.0 },
            extrinsics_rotvec: [rotvec.x, rotvec.y, rotvec.z],
            extrinsics_translation: [0.05, 0.02, 0.01],
            image_width: 752,
            image_height: 480,
            imu_rate: 1000.0,
            cam_rate: 30.0,
            true_td,
            noise,
            min_visible: 50,
        }
    }

    pub fn extrinsics(&self) -> CameraExtrinsics {
        let r = Vec3::new(
            self.extrinsics_rotvec[0],
            self.extrinsics_rotvec[1],
            self.extrinsics_rotvec[2],
        );
        let t = Vec3::new(
            self.extrinsics_translation[0],
            self.extrinsics_translation[1],
            self.extrinsics_translation[2],
        );
        CameraExtrinsics { r_ic: quat_from_small_angle(&r).to_rotation_matrix().into_inner(), p_ic: t }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.imu_rate < 10.0 * self.cam_rate {
            return Err(SimError::InvalidScenario(format!(
                "imu_rate {} must be at least 10× cam_rate {}",
                self.imu_rate, self.cam_rate
            )));
        }
        if self.trajectory.duration() < 10.0 {
            return Err(SimError::InvalidScenario(
                "trajectory duration must be at least 10 s".into(),
            ));
        }
        let n = &self.noise.imu;
        if self.noise.pixel_sigma < 0.0
            || n.accel_noise_density < 0.0
            || n.gyro_noise_density < 0.0
            || n.accel_random_walk < 0.0
            || n.gyro_random_walk < 0.0
        {
            return Err(SimError::InvalidScenario("noise parameters must be ≥ 0".into()));
        }
        if self.true_td.abs() > crate::visual::MAX_ABS_TD {
            return Err(SimError::InvalidScenario(format!(
                "true_td {} exceeds sanity bound {}",
                self.true_td,
                crate::visual::MAX_ABS_TD
            )));
        }
        Ok(())
    }
}

fn rotvec_from_mat(r: &Mat3) -> Vec3 {
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(*r));
    q.scaled_axis()
}

/// One synthesized camera frame: stamped `t_image`, containing projections of
/// the true pose at `t_image + true_td`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub t_image: f64,
    /// (feature id, pixel measurement); ids persist across frames.
    pub observations: Vec<(u64, Vec2)>,
}

/// Scenario bound to its generated feature cloud.
#[derive(Debug, Clone)]
pub struct Simulator {
    scn: SimScenario,
    trajectory: Trajectory,
    cloud: Vec<(u64, Vec3)>,
    extrinsics: CameraExtrinsics,
    world: WorldConstants,
}

impl Simulator {
    pub fn new(scn: SimScenario) -> Result<Self, SimError> {
        scn.validate()?;
        let trajectory = Trajectory::new(&scn.trajectory)?;
        let mut rng = ChaCha8Rng::seed_from_u64(scn.trajectory.seed());
        rng.set_stream(0xfeed);
        let mut cloud = Vec::with_capacity(scn.features.count);
        let c = Vec3::new(scn.features.center[0], scn.features.center[1], scn.features.center[2]);
        for id in 0..scn.features.count as u64 {
            // Uniform direction via normalized Gaussians; uniform radius.
            let dir = loop {
                let v = Vec3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                if v.norm() > 1e-6 {
                    break v / v.norm();
                }
            };
            let r = rng.random_range(scn.features.radius_min..scn.features.radius_max);
            cloud.push((id, c + r * dir));
        }
        let extrinsics = scn.extrinsics();
        let sim = Self { scn, trajectory, cloud, extrinsics, world: WorldConstants::default() };
        sim.check_visibility()?;
        Ok(sim)
    }

    pub fn scenario(&self) -> &SimScenario {
        &self.scn
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn cloud(&self) -> &[(u64, Vec3)] {
        &self.cloud
    }

    fn check_visibility(&self) -> Result<(), SimError> {
        let stamps = self.frame_stamps();
        let stride = (stamps.len() / 40).max(1);
        let mut total = 0usize;
        let mut frames = 0usize;
        for t in stamps.iter().step_by(stride) {
            total += self.project_noise_free(*t)?.len();
            frames += 1;
        }
        let avg = total as f64 / frames.max(1) as f64;
        if avg < self.scn.min_visible as f64 {
            return Err(SimError::InsufficientVisibility { avg, min: self.scn.min_visible });
        }
        Ok(())
    }

    /// Image timestamps `k/cam_rate` such that `t_image + true_td` stays
    /// inside the trajectory duration.
    pub fn frame_stamps(&self) -> Vec<f64> {
        // Timestamps live on an integer-nanosecond grid so the CSV round
        // trip (t → t_ns → t) is bit-exact.
        let step_ns = (1e9 / self.scn.cam_rate).round() as u64;
        let dur = self.scn.trajectory.duration();
        let mut out = Vec::new();
        let mut k = 0u64;
        loop {
            let t = (k * step_ns) as f64 / 1e9;
            let t_state = t + self.scn.true_td;
            if t > dur || t_state > dur {
                break;
            }
            if t_state >= 0.0 {
                out.push(t);
            }
            k += 1;
        }
        out
    }

    fn project_noise_free(&self, t_image: f64) -> Result<Vec<(u64, Vec2)>, SimError> {
        let s = self.trajectory.truth_state(t_image + self.scn.true_td)?;
        let r_wb = s.q.to_rotation_matrix().into_inner();
        let r_wc = r_wb * self.extrinsics.r_ic;
        let p_cam_w = s.p + r_wb * self.extrinsics.p_ic;
        let (w, h) = (self.scn.image_width as f64, self.scn.image_height as f64);
        let mut out = Vec::new();
        for (id, f) in &self.cloud {
            let p_c = r_wc.transpose() * (f - p_cam_w);
            if p_c.z < 0.2 {
                continue;
            }
            if let Ok(px) = pinhole_project(&p_c, &self.scn.intrinsics) {
                if px.x >= 0.0 && px.x <= w && px.y >= 0.0 && px.y <= h {
                    out.push((*id, px));
                }
            }
        }
        Ok(out)
    }

    /// Noisy camera frame stamped `t_image`. Deterministic per (noise seed,
    /// frame index) regardless of generation order.
    pub fn synth_frame(&self, t_image: f64) -> Result<FrameInput, SimError> {
        let clean = self.project_noise_free(t_image)?;
        let frame_idx = (t_image * self.scn.cam_rate).round() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.scn.noise.seed);
        rng.set_stream(1 + frame_idx);
        let sigma = self.scn.noise.pixel_sigma;
        let observations = clean
            .into_iter()
            .map(|(id, px)| {
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ny: f64 = StandardNormal.sample(&mut rng);
                (id, Vec2::new(px.x + sigma * nx, px.y + sigma * ny))
            })
            .collect();
        Ok(FrameInput { t_image, observations })
    }

    pub fn synth_frames(&self) -> Result<Vec<FrameInput>, SimError> {
        self.frame_stamps().iter().map(|&t| self.synth_frame(t)).collect()
    }

    /// Full IMU stream at `imu_rate`, with white noise scaled by √rate from
    /// the densities and bias random walks accumulated at the sample rate.
    pub fn synth_imu(&self) -> Result<Vec<ImuSample>, SimError> {
        let step_ns = (1e9 / self.scn.imu_rate).round() as u64;
        let dt = step_ns as f64 / 1e9;
        let n = (self.scn.trajectory.duration() / dt).floor() as usize + 1;
        let noise = &self.scn.noise.imu;
        let sigma_a = noise.accel_noise_density * self.scn.imu_rate.sqrt();
        let sigma_g = noise.gyro_noise_density * self.scn.imu_rate.sqrt();
        let walk_a = noise.accel_random_walk * dt.sqrt();
        let walk_g = noise.gyro_random_walk * dt.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.scn.noise.seed);
        rng.set_stream(0);
        let mut b_a = Vec3::zeros();
        let mut b_g = Vec3::zeros();
        let g = self.world.gravity;
        let mut out = Vec::with_capacity(n);
        let normal3 = |rng: &mut ChaCha8Rng| {
            Vec3::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            )
        };
        for k in 0..n {
            let t = (k as u64 * step_ns) as f64 / 1e9;
            let s = self.trajectory.truth_state(t.min(self.scn.trajectory.duration()))?;
            let r_wb = s.q.to_rotation_matrix().into_inner();
            let accel = r_wb.transpose() * (s.a_world - g) + b_a + sigma_a * normal3(&mut rng);
            let gyro = s.omega_body + b_g + sigma_g * normal3(&mut rng);
            out.push(ImuSample { t, accel, gyro });
            b_a += walk_a * normal3(&mut rng);
            b_g += walk_g * normal3(&mut rng);
        }
        Ok(out)
    }

    /// Ground-truth records at IMU rate: (t, q, p, v).
    pub fn ground_truth(&self) -> Result<Vec<(f64, TruthState)>, SimError> {
        let step_ns = (1e9 / self.scn.imu_rate).round() as u64;
        let dt = step_ns as f64 / 1e9;
        let n = (self.scn.trajectory.duration() / dt).floor() as usize + 1;
        (0..n)
            .map(|k| {
                let t = (k as u64 * step_ns) as f64 / 1e9;
                Ok((t, self.trajectory.truth_state(t)?))
            })
            .collect()
    }
}
