//! Visual reprojection factors with time-offset compensation.
//!
//! A camera measurement stamped `t_image` actually belongs to the IMU state
//! at `t_image + t_d`. Each key state is built with the offset estimate in
//! force at construction time (`t_dj`); when the global estimate `t_d` moves,
//! the key-state pose is shifted to the image-aligned instant,
//!
//! ```text
//! Ř = R · Exp(ω_j · Δ),   p̌ = p + v_j · Δ,   Δ = t_d − t_dj,
//! ```
//!
//! and the reprojection residual is evaluated at (Ř, p̌). This makes the
//! residual differentiable in `t_d`, so the offset is optimized jointly with
//! the motion states. Both feature parameterizations (world 3D point and
//! inverse depth anchored to a key state) are supported.
//!
//! Jacobian columns per key state follow the error-state order
//! `[δθ, δp, δv, δb_a, δb_g]`.

use nalgebra::{SMatrix, Vector2};
use thiserror::Error;

use crate::manifold::{
    quat_from_small_angle, skew, so3_right_jacobian, CameraExtrinsics, ImuKeyState, Mat3, Vec3,
};

pub type Vec2 = Vector2<f64>;
pub type Mat2x3 = SMatrix<f64, 2, 3>;
pub type Mat2x15 = SMatrix<f64, 2, 15>;

/// Compensation window: |t_d − t_dj| must stay below this, seconds.
const MAX_DELTA_TD: f64 = 0.1;
/// Global sanity bound on |t_d|, seconds.
pub const MAX_ABS_TD: f64 = 0.5;
/// Features closer than 1e-4 m⁻¹ inverse depth (10 km) are degenerate.
pub const MIN_INVERSE_DEPTH: f64 = 1e-4;
const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum VisualError {
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("inverse depth {0} below {MIN_INVERSE_DEPTH}")]
    DegenerateDepth(f64),
    #[error("offset delta {0} s exceeds compensation window")]
    OffsetOutOfRange(f64),
    #[error("time offset {0} s violates |t_d| < {MAX_ABS_TD} sanity bound")]
    OffsetInsane(f64),
}

/// Pinhole intrinsics; observations are pre-undistorted.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Landmark as a world-frame 3D point.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureXyz {
    pub id: u64,
    pub p_world: Vec3,
}

/// Landmark as inverse depth along the anchor frame's observation ray.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureInvDepth {
    pub id: u64,
    /// Inverse depth in the anchor camera frame, 1/m.
    pub lambda: f64,
    /// Window index of the anchor key state.
    pub anchor_idx: usize,
    /// Undistorted normalized image coordinates on the anchor frame.
    pub anchor_obs: Vec2,
}

/// One feature measurement in one frame, undistorted pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub feature_id: u64,
    pub frame_idx: usize,
    pub z: Vec2,
    pub sigma_px: f64,
}

/// The camera-IMU time offset, a solver variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeOffset {
    pub td: f64,
}

impl TimeOffset {
    pub fn new(td: f64) -> Result<Self, VisualError> {
        if td.abs() < MAX_ABS_TD {
            Ok(Self { td })
        } else {
            Err(VisualError::OffsetInsane(td))
        }
    }
}

/// Which couplings the pose-block Jacobians carry.
///
/// The printed Jacobians zero the velocity and bias columns even though the
/// compensated pose depends on `v_j` and (through `ω_j`) on `b_g`;
/// `PaperZeros` reproduces that, `FullCoupling` differentiates the
/// compensation exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CompensationMode {
    PaperZeros,
    FullCoupling,
}

/// Shift a key-state pose to the image-aligned instant.
///
/// Uses the exact rotation exponential instead of the first-order
/// `I + [ωΔ]×` so the result stays orthonormal.
pub fn compensate_pose(x: &ImuKeyState, td: &TimeOffset) -> Result<(Mat3, Vec3), VisualError> {
    let delta = td.td - x.t_dj;
    if delta.abs() >= MAX_DELTA_TD {
        return Err(VisualError::OffsetOutOfRange(delta));
    }
    let dr = quat_from_small_angle(&(x.omega_body() * delta));
    Ok((
        (x.q * dr).to_rotation_matrix().into_inner(),
        x.p + x.v * delta,
    ))
}

/// Project a camera-frame point to pixels.
pub fn pinhole_project(p_cam: &Vec3, k: &Intrinsics) -> Result<Vec2, VisualError> {
    if p_cam.z <= MIN_DEPTH {
        return Err(VisualError::BehindCamera(p_cam.z));
    }
    Ok(Vec2::new(
        k.fx * p_cam.x / p_cam.z + k.cx,
        k.fy * p_cam.y / p_cam.z + k.cy,
    ))
}

/// ∂π/∂p of the pinhole projection.
pub fn projection_jacobian(p_cam: &Vec3, k: &Intrinsics) -> Mat2x3 {
    let z_inv = 1.0 / p_cam.z;
    Mat2x3::new(
        k.fx * z_inv,
        0.0,
        -k.fx * p_cam.x * z_inv * z_inv,
        0.0,
        k.fy * z_inv,
        -k.fy * p_cam.y * z_inv * z_inv,
    )
}

fn camera_point(
    x_j: &ImuKeyState,
    p_world: &Vec3,
    ext: &CameraExtrinsics,
    td: &TimeOffset,
) -> Result<(Vec3, Mat3, Vec3), VisualError> {
    let (r_comp, p_comp) = compensate_pose(x_j, td)?;
    let p_cam = ext.r_ic.transpose() * (r_comp.transpose() * (p_world - p_comp) - ext.p_ic);
    Ok((p_cam, r_comp, p_comp))
}

/// Reprojection residual of a world-point feature, whitened by `1/σ_px`.
pub fn residual_xyz(
    obs: &Observation,
    x_j: &ImuKeyState,
    f: &FeatureXyz,
    ext: &CameraExtrinsics,
    k: &Intrinsics,
    td: &TimeOffset,
) -> Result<Vec2, VisualError> {
    let (p_cam, _, _) = camera_point(x_j, &f.p_world, ext, td)?;
    Ok((obs.z - pinhole_project(&p_cam, k)?) / obs.sigma_px)
}

/// Analytic Jacobians of [`residual_xyz`], whitened.
pub struct XyzJacobians {
    pub pose: Mat2x15,
    pub feat: Mat2x3,
    pub td: Vec2,
}

pub fn jacobian_xyz(
    obs: &Observation,
    x_j: &ImuKeyState,
    f: &FeatureXyz,
    ext: &CameraExtrinsics,
    k: &Intrinsics,
    td: &TimeOffset,
    mode: CompensationMode,
) -> Result<XyzJacobians, VisualError> {
    let delta = td.td - x_j.t_dj;
    let omega = x_j.omega_body();
    let (p_cam, r_comp, p_comp) = camera_point(x_j, &f.p_world, ext, td)?;
    if p_cam.z <= MIN_DEPTH {
        return Err(VisualError::BehindCamera(p_cam.z));
    }
    // r = z − π(P_c); every block is −Jπ · ∂P_c, then whitened.
    let w = -projection_jacobian(&p_cam, k) / obs.sigma_px;
    let rict = ext.r_ic.transpose();
    let dr = quat_from_small_angle(&(omega * delta)).to_rotation_matrix().into_inner();
    let u = f.p_world - p_comp;
    let comp_u = r_comp.transpose() * u;

    let mut pose = Mat2x15::zeros();
    pose.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(w * (rict * dr.transpose() * skew(&(x_j.rotation().transpose() * u)))));
    pose.fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(w * (-rict * r_comp.transpose())));
    if mode == CompensationMode::FullCoupling {
        pose.fixed_view_mut::<2, 3>(0, 6)
            .copy_from(&(w * (-rict * r_comp.transpose() * delta)));
        let jr = so3_right_jacobian(&(omega * delta));
        pose.fixed_view_mut::<2, 3>(0, 12)
            .copy_from(&(w * (-rict * skew(&comp_u) * jr * delta)));
    }

    let feat = w * (rict * r_comp.transpose());
    let d_td = w * (rict * (-skew(&omega) * comp_u - r_comp.transpose() * x_j.v));
    Ok(XyzJacobians { pose, feat, td: d_td })
}

/// Lift an inverse-depth feature to a world point via its compensated anchor
/// pose.
pub fn feature_world_from_anchor(
    f: &FeatureInvDepth,
    x_i: &ImuKeyState,
    ext: &CameraExtrinsics,
    td: &TimeOffset,
) -> Result<Vec3, VisualError> {
    if f.lambda < MIN_INVERSE_DEPTH {
        return Err(VisualError::DegenerateDepth(f.lambda));
    }
    let (r_i, p_i) = compensate_pose(x_i, td)?;
    let p_ci = Vec3::new(f.anchor_obs.x, f.anchor_obs.y, 1.0) / f.lambda;
    Ok(r_i * (ext.r_ic * p_ci + ext.p_ic) + p_i)
}

/// Reprojection residual of an inverse-depth feature into frame `j`,
/// whitened by `1/σ_px`. The anchor (`i`) and projection (`j`) poses are both
/// compensated; `i == j` carries no information and is rejected upstream.
pub fn residual_invdepth(
    obs: &Observation,
    x_j: &ImuKeyState,
    x_i: &ImuKeyState,
    f: &FeatureInvDepth,
    ext: &CameraExtrinsics,
    k: &Intrinsics,
    td: &TimeOffset,
) -> Result<Vec2, VisualError> {
    let p_world = feature_world_from_anchor(f, x_i, ext, td)?;
    let (p_cam, _, _) = camera_point(x_j, &p_world, ext, td)?;
    Ok((obs.z - pinhole_project(&p_cam, k)?) / obs.sigma_px)
}

/// Analytic Jacobians of [`residual_invdepth`], whitened.
pub struct InvDepthJacobians {
    pub pose_i: Mat2x15,
    pub pose_j: Mat2x15,
    pub lambda: Vec2,
    pub td: Vec2,
}

pub fn jacobian_invdepth(
    obs: &Observation,
    x_j: &ImuKeyState,
    x_i: &ImuKeyState,
    f: &FeatureInvDepth,
    ext: &CameraExtrinsics,
    k: &Intrinsics,
    td: &TimeOffset,
    mode: CompensationMode,
) -> Result<InvDepthJacobians, VisualError> {
    if f.lambda < MIN_INVERSE_DEPTH {
        return Err(VisualError::DegenerateDepth(f.lambda));
    }
    let delta_i = td.td - x_i.t_dj;
    let delta_j = td.td - x_j.t_dj;
    let omega_i = x_i.omega_body();
    let omega_j = x_j.omega_body();

    let (r_i, p_i) = compensate_pose(x_i, td)?;
    let h = Vec3::new(f.anchor_obs.x, f.anchor_obs.y, 1.0);
    // Anchor-IMU-frame feature point, before the anchor rotation.
    let m0 = ext.r_ic * (h / f.lambda) + ext.p_ic;
    let p_world = r_i * m0 + p_i;

    let (p_cam, r_j, p_j) = camera_point(x_j, &p_world, ext, td)?;
    if p_cam.z <= MIN_DEPTH {
        return Err(VisualError::BehindCamera(p_cam.z));
    }
    let w = -projection_jacobian(&p_cam, k) / obs.sigma_px;
    let rict = ext.r_ic.transpose();
    let dr_i = quat_from_small_angle(&(omega_i * delta_i)).to_rotation_matrix().into_inner();
    let dr_j = quat_from_small_angle(&(omega_j * delta_j)).to_rotation_matrix().into_inner();
    // Chain from a world-point displacement into the camera residual.
    let chain = rict * r_j.transpose();
    let u = p_world - p_j;
    let comp_u = r_j.transpose() * u;

    // Projection-frame blocks, identical in form to the world-point factor.
    let mut pose_j = Mat2x15::zeros();
    pose_j.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(w * (rict * dr_j.transpose() * skew(&(x_j.rotation().transpose() * u)))));
    pose_j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(w * (-chain)));
    if mode == CompensationMode::FullCoupling {
        pose_j.fixed_view_mut::<2, 3>(0, 6).copy_from(&(w * (-chain * delta_j)));
        let jr_j = so3_right_jacobian(&(omega_j * delta_j));
        pose_j.fixed_view_mut::<2, 3>(0, 12)
            .copy_from(&(w * (-rict * skew(&comp_u) * jr_j * delta_j)));
    }

    // Anchor-frame blocks.
    let mut pose_i = Mat2x15::zeros();
    pose_i.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(w * (chain * (-x_i.rotation() * skew(&(dr_i * m0))))));
    pose_i.fixed_view_mut::<2, 3>(0, 3).copy_from(&(w * chain));
    if mode == CompensationMode::FullCoupling {
        pose_i.fixed_view_mut::<2, 3>(0, 6).copy_from(&(w * (chain * delta_i)));
        let jr_i = so3_right_jacobian(&(omega_i * delta_i));
        pose_i.fixed_view_mut::<2, 3>(0, 12)
            .copy_from(&(w * (chain * r_i * skew(&m0) * jr_i * delta_i)));
    }

    let lambda = w * (chain * r_i * ext.r_ic * (-h / (f.lambda * f.lambda)));

    // ∂r/∂t_d sums the anchor compensation, the velocity difference and the
    // projection-frame compensation.
    let d_td = w
        * (chain * (-r_i * skew(&m0) * omega_i + x_i.v)
            + rict * (-skew(&omega_j) * comp_u - r_j.transpose() * x_j.v));

    Ok(InvDepthJacobians { pose_i, pose_j, lambda, td: d_td })
}
