//! Trajectory evaluation: absolute trajectory error after rigid alignment.
//!
//! The estimate is associated to ground truth by timestamp (linear
//! interpolation of the ground-truth positions), aligned with a 6-DoF
//! least-squares fit (Umeyama without scale — monocular scale is observable
//! from the IMU), and scored as the root-mean-square position error.

use nalgebra::{DMatrix, Matrix3};
use thiserror::Error;

use crate::manifold::{Quat, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("only {0} temporally overlapping records; at least 10 required")]
    InsufficientOverlap(usize),
}

/// One pose sample of a trajectory, timestamps strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub p: Vec3,
    pub q: Quat,
}

/// Interpolate the ground-truth position at `t`; `None` outside the range.
fn interp_position(gt: &[TrajectoryRecord], t: f64) -> Option<Vec3> {
    let (first, last) = (gt.first()?, gt.last()?);
    if t < first.t || t > last.t {
        return None;
    }
    let i = match gt.binary_search_by(|r| r.t.partial_cmp(&t).unwrap()) {
        Ok(i) => return Some(gt[i].p),
        Err(i) => i,
    };
    let (a, b) = (&gt[i - 1], &gt[i]);
    let alpha = (t - a.t) / (b.t - a.t);
    Some(a.p * (1.0 - alpha) + b.p * alpha)
}

/// Rigid (rotation + translation) least-squares alignment mapping `src`
/// points onto `dst`: returns (R, t) minimizing Σ‖R·src + t − dst‖².
fn align_se3(src: &[Vec3], dst: &[Vec3]) -> (Matrix3<f64>, Vec3) {
    let n = src.len() as f64;
    let c_src = src.iter().sum::<Vec3>() / n;
    let c_dst = dst.iter().sum::<Vec3>() / n;
    let mut w = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        w += (d - c_dst) * (s - c_src).transpose();
    }
    let svd = DMatrix::from_fn(3, 3, |r, c| w[(r, c)]).svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rot_dyn = u * s * v_t;
    let r = Matrix3::from_fn(|i, j| rot_dyn[(i, j)]);
    let t = c_dst - r * c_src;
    (r, t)
}

/// RMSE absolute trajectory error in centimeters after SE(3) alignment of
/// the estimate onto the ground truth.
pub fn rmse_ate_cm(est: &[TrajectoryRecord], gt: &[TrajectoryRecord]) -> Result<f64, MetricsError> {
    let mut pairs: Vec<(Vec3, Vec3)> = Vec::with_capacity(est.len());
    for r in est {
        if let Some(p_gt) = interp_position(gt, r.t) {
            pairs.push((r.p, p_gt));
        }
    }
    if pairs.len() < 10 {
        return Err(MetricsError::InsufficientOverlap(pairs.len()));
    }
    let src: Vec<Vec3> = pairs.iter().map(|(e, _)| *e).collect();
    let dst: Vec<Vec3> = pairs.iter().map(|(_, g)| *g).collect();
    let (r, t) = align_se3(&src, &dst);
    let mut acc = 0.0;
    for (e, g) in &pairs {
        acc += (r * e + t - g).norm_squared();
    }
    Ok((acc / pairs.len() as f64).sqrt() * 100.0)
}
