//! Sliding-window estimator: buffers IMU, builds key states at td-aligned
//! timestamps, manages features and anchors, optimizes the window cost each
//! frame and marginalizes the oldest key state.
//!
//! A frame stamped `t_image` produces a key state at `t_image + t_d` using
//! the *current* offset estimate, which is frozen into the state as `t_dj`.
//! Later changes of `t_d` never re-integrate IMU; they act on the visual
//! factors through the pose compensation only.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::manifold::{CameraExtrinsics, ImuKeyState, Mat3, Quat, Vec3, WorldConstants};
use crate::preintegration::{
    gyro_at, propagate, slice_interpolated, ImuNoise, ImuSample, PreintError, Preintegration,
};
use crate::solver::{
    lm_solve, marginalize, Factor, FeatureValue, LinPoint, MarginalPrior, ProblemContext,
    SolveReport, SolverConfig, SolverError, VarId, VariableLayout, WindowProblem,
};
use crate::visual::{
    feature_world_from_anchor, CompensationMode, FeatureInvDepth, FeatureXyz, Intrinsics,
    Observation, TimeOffset, Vec2, MAX_ABS_TD, MIN_INVERSE_DEPTH,
};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("IMU timestamp {t} not after previous {last}")]
    NonMonotonicTimestamp { t: f64, last: f64 },
    #[error("IMU buffer covers up to {have} s but the frame needs {need} s")]
    InsufficientImu { need: f64, have: f64 },
    #[error("estimator not initialized yet")]
    InitializationPending,
    #[error("time offset diverged to {td} s at frame {frame} (bound {MAX_ABS_TD} s)")]
    OffsetDiverged { td: f64, frame: u64 },
    #[error("solver failure at frame {frame}: {source}")]
    Solver {
        frame: u64,
        #[source]
        source: SolverError,
    },
    #[error("preintegration failure at frame {frame}: {source}")]
    Preintegration {
        frame: u64,
        #[source]
        source: PreintError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Xyz,
    InvDepth,
}

/// Initial navigation state at the first key-state instant; simulation-only
/// initialization (real visual-inertial alignment is out of scope).
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapState {
    pub q: Quat,
    pub p: Vec3,
    pub v: Vec3,
    pub b_a: Vec3,
    pub b_g: Vec3,
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub window_size: usize,
    pub parameterization: Parameterization,
    pub calibrate_td: bool,
    pub init_td: f64,
    pub pixel_sigma: f64,
    pub imu_noise: ImuNoise,
    pub extrinsics: CameraExtrinsics,
    pub intrinsics: Intrinsics,
    pub world: WorldConstants,
    pub solver: SolverConfig,
    pub huber_threshold: f64,
    pub compensation: CompensationMode,
    /// Deterministic cap on observations consumed per frame.
    pub max_obs_per_frame: usize,
    /// Whitened-residual gate; offending observations are dropped for
    /// subsequent windows.
    pub outlier_threshold: f64,
    /// Depth assigned to features triangulated below the parallax threshold.
    pub fallback_depth: f64,
    pub min_parallax_deg: f64,
    /// Gauge prior: strong position + full attitude on the first key state.
    pub gauge_pose_sigma: f64,
    /// Weak priors completing the bootstrap factor.
    pub prior_velocity_sigma: f64,
    pub prior_accel_bias_sigma: f64,
    pub prior_gyro_bias_sigma: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            parameterization: Parameterization::InvDepth,
            calibrate_td: true,
            init_td: 0.0,
            pixel_sigma: 1.0,
            imu_noise: ImuNoise::default(),
            extrinsics: CameraExtrinsics::identity(),
            intrinsics: Intrinsics { fx: 460.0, fy: 460.0, cx: 376.0, cy: 240.0 },
            world: WorldConstants::default(),
            // Online use: a few damped iterations per frame, with the damping
            // warm-started across frames. The window is re-solved at every
            // frame, so per-frame convergence to machine precision buys
            // nothing; capped iterations are the usual real-time trade.
            solver: SolverConfig { max_iters: 4, cost_tol: 1e-4, ..SolverConfig::default() },
            huber_threshold: 1.0,
            compensation: CompensationMode::PaperZeros,
            max_obs_per_frame: 50,
            outlier_threshold: 3.0,
            fallback_depth: 5.0,
            min_parallax_deg: 0.5,
            gauge_pose_sigma: 1e-3,
            prior_velocity_sigma: 0.25,
            prior_accel_bias_sigma: 0.1,
            prior_gyro_bias_sigma: 0.01,
        }
    }
}

/// Camera frame input: tracked feature positions in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub t_image: f64,
    pub tracks: Vec<(u64, Vec2)>,
}

/// Per-frame estimator output.
#[derive(Debug, Clone)]
pub struct EstimatorOutput {
    pub frame_id: u64,
    pub t_image: f64,
    /// Latest key-state estimate (after optimization).
    pub state: ImuKeyState,
    pub td: f64,
    pub solve: Option<SolveReport>,
    pub marginalized: bool,
    pub active_features: usize,
    pub used_observations: usize,
}

#[derive(Debug, Clone)]
struct Frame {
    id: u64,
    t_image: f64,
    state: ImuKeyState,
    /// Preintegrated IMU from the previous window frame; None for the window
    /// head (its link lives in the marginalization prior).
    preint: Option<Preintegration>,
    obs: Vec<(u64, Vec2)>,
}

#[derive(Debug, Clone)]
enum FeatureParam {
    InvDepth { lambda: f64, anchor_frame: u64, anchor_obs: Vec2 },
    Xyz(Vec3),
}

pub struct Estimator {
    cfg: EstimatorConfig,
    initial: BootstrapState,
    imu: VecDeque<ImuSample>,
    td: f64,
    frames: Vec<Frame>,
    features: BTreeMap<u64, FeatureParam>,
    priors: Vec<MarginalPrior>,
    /// (feature id, frame id) pairs gated out by the outlier test.
    outliers: BTreeSet<(u64, u64)>,
    next_frame_id: u64,
    /// Damping carried across frames: restarting every solve at the
    /// configured `lambda_init` wastes iterations re-escalating it.
    lambda_warm: Option<f64>,
}

impl Estimator {
    pub fn new(cfg: EstimatorConfig, initial: BootstrapState) -> Self {
        let td = cfg.init_td;
        Self {
            cfg,
            initial,
            imu: VecDeque::new(),
            td,
            frames: Vec::new(),
            features: BTreeMap::new(),
            priors: Vec::new(),
            outliers: BTreeSet::new(),
            next_frame_id: 0,
            lambda_warm: None,
        }
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn process_imu(&mut self, s: ImuSample) -> Result<(), EstimatorError> {
        if let Some(last) = self.imu.back() {
            if s.t <= last.t {
                return Err(EstimatorError::NonMonotonicTimestamp { t: s.t, last: last.t });
            }
        }
        self.imu.push_back(s);
        Ok(())
    }

    pub fn current_time_offset(&self) -> Result<f64, EstimatorError> {
        if self.frames.is_empty() {
            return Err(EstimatorError::InitializationPending);
        }
        Ok(self.td)
    }

    pub fn window_len(&self) -> usize {
        self.frames.len()
    }

    pub fn imu_buffer_len(&self) -> usize {
        self.imu.len()
    }

    /// Latest key-state estimates: (frame id, image stamp, state).
    pub fn window_states(&self) -> Vec<(u64, f64, ImuKeyState)> {
        self.frames.iter().map(|f| (f.id, f.t_image, f.state.clone())).collect()
    }

    fn imu_slice(&self) -> Vec<ImuSample> {
        self.imu.iter().copied().collect()
    }

    fn normalize_px(&self, px: &Vec2) -> Vec2 {
        Vec2::new(
            (px.x - self.cfg.intrinsics.cx) / self.cfg.intrinsics.fx,
            (px.y - self.cfg.intrinsics.cy) / self.cfg.intrinsics.fy,
        )
    }

    fn camera_pose(&self, state: &ImuKeyState) -> (Mat3, Vec3) {
        let r_wb = state.rotation();
        (r_wb * self.cfg.extrinsics.r_ic, state.p + r_wb * self.cfg.extrinsics.p_ic)
    }

    /// Deterministic observation selection: known features first, then
    /// features pending initialization, then brand new ids.
    fn select_obs(&self, tracks: &[(u64, Vec2)]) -> Vec<(u64, Vec2)> {
        let mut seen = BTreeSet::new();
        let mut known = Vec::new();
        let mut pending = Vec::new();
        let mut fresh = Vec::new();
        let observed_before: BTreeSet<u64> =
            self.frames.iter().flat_map(|f| f.obs.iter().map(|(id, _)| *id)).collect();
        for (id, px) in tracks {
            if !seen.insert(*id) {
                continue;
            }
            if self.features.contains_key(id) {
                known.push((*id, *px));
            } else if observed_before.contains(id) {
                pending.push((*id, *px));
            } else {
                fresh.push((*id, *px));
            }
        }
        let mut out = known;
        out.extend(pending);
        out.extend(fresh);
        out.truncate(self.cfg.max_obs_per_frame);
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn process_frame(&mut self, f: &FrameInput) -> Result<EstimatorOutput, EstimatorError> {
        let frame_id = self.next_frame_id;
        if self.td.abs() >= MAX_ABS_TD {
            return Err(EstimatorError::OffsetDiverged { td: self.td, frame: frame_id });
        }
        let mut t_key = f.t_image + self.td;
        if self.frames.is_empty() {
            return self.bootstrap(f, t_key);
        }

        let last_t = self.frames.last().unwrap().state.t_stamp;
        // A td jump larger than the frame spacing could place the key state
        // behind its predecessor; keep timestamps strictly increasing.
        if t_key <= last_t + 1e-3 {
            t_key = last_t + 1e-3;
        }
        let have = self.imu.back().map(|s| s.t).unwrap_or(f64::NEG_INFINITY);
        if have < t_key {
            return Err(EstimatorError::InsufficientImu { need: t_key, have });
        }
        let buf = self.imu_slice();
        let samples = slice_interpolated(&buf, last_t, t_key).ok_or(
            EstimatorError::InsufficientImu { need: t_key, have },
        )?;
        let last_state = self.frames.last().unwrap().state.clone();
        let mut preint =
            Preintegration::new(last_state.b_a, last_state.b_g, self.cfg.imu_noise);
        preint
            .integrate_batch(&samples)
            .map_err(|source| EstimatorError::Preintegration { frame: frame_id, source })?;
        let mut state = propagate(&preint, &last_state, &self.cfg.world);
        state.t_stamp = t_key;
        state.t_dj = self.td;
        state.gyro_raw = gyro_at(&buf, t_key).unwrap_or(samples.last().unwrap().gyro);

        let obs = self.select_obs(&f.tracks);
        let used_observations = obs.len();
        self.frames.push(Frame { id: frame_id, t_image: f.t_image, state, preint: Some(preint), obs });
        self.next_frame_id += 1;
        self.init_new_features();

        let report = self.solve(frame_id)?;
        if self.td.abs() >= MAX_ABS_TD {
            return Err(EstimatorError::OffsetDiverged { td: self.td, frame: frame_id });
        }
        self.flag_outliers();

        let mut marginalized = false;
        if self.frames.len() > self.cfg.window_size {
            self.marginalize_oldest(frame_id)?;
            marginalized = true;
        }
        self.trim_imu();

        Ok(EstimatorOutput {
            frame_id,
            t_image: f.t_image,
            state: self.frames.last().unwrap().state.clone(),
            td: self.td,
            solve: Some(report),
            marginalized,
            active_features: self.features.len(),
            used_observations,
        })
    }

    fn bootstrap(&mut self, f: &FrameInput, t_key: f64) -> Result<EstimatorOutput, EstimatorError> {
        let buf = self.imu_slice();
        let gyro = gyro_at(&buf, t_key).ok_or(EstimatorError::InsufficientImu {
            need: t_key,
            have: self.imu.back().map(|s| s.t).unwrap_or(f64::NEG_INFINITY),
        })?;
        let state = ImuKeyState {
            q: self.initial.q,
            p: self.initial.p,
            v: self.initial.v,
            b_a: self.initial.b_a,
            b_g: self.initial.b_g,
            t_stamp: t_key,
            t_dj: self.td,
            gyro_raw: gyro,
        };
        let frame_id = self.next_frame_id;
        // Gauge-fixing factor: strong position and attitude (gravity
        // direction is known in simulation), weak velocity and bias priors.
        let mut j_p = nalgebra::DMatrix::zeros(15, 15);
        for k in 0..3 {
            j_p[(k, k)] = 1.0 / self.cfg.gauge_pose_sigma; // attitude
            j_p[(3 + k, 3 + k)] = 1.0 / self.cfg.gauge_pose_sigma; // position
            j_p[(6 + k, 6 + k)] = 1.0 / self.cfg.prior_velocity_sigma;
            j_p[(9 + k, 9 + k)] = 1.0 / self.cfg.prior_accel_bias_sigma;
            j_p[(12 + k, 12 + k)] = 1.0 / self.cfg.prior_gyro_bias_sigma;
        }
        self.priors.push(MarginalPrior {
            entries: vec![(VarId::KeyState(frame_id), LinPoint::State(Box::new(state.clone())))],
            r_p: nalgebra::DVector::zeros(15),
            j_p,
        });
        let obs = self.select_obs(&f.tracks);
        let used_observations = obs.len();
        self.frames.push(Frame { id: frame_id, t_image: f.t_image, state, preint: None, obs });
        self.next_frame_id += 1;
        Ok(EstimatorOutput {
            frame_id,
            t_image: f.t_image,
            state: self.frames.last().unwrap().state.clone(),
            td: self.td,
            solve: None,
            marginalized: false,
            active_features: 0,
            used_observations,
        })
    }

    /// Initialize features that just received their second observation:
    /// anchor at the earliest observing frame, inverse depth from two-view
    /// triangulation, fallback depth below the parallax threshold.
    fn init_new_features(&mut self) {
        let (last_idx, last_obs): (usize, Vec<(u64, Vec2)>) = {
            let last = self.frames.last().unwrap();
            (self.frames.len() - 1, last.obs.clone())
        };
        for (id, px_j) in &last_obs {
            if self.features.contains_key(id) {
                continue;
            }
            let anchor = self
                .frames
                .iter()
                .take(last_idx)
                .find_map(|fr| fr.obs.iter().find(|(fid, _)| fid == id).map(|(_, px)| (fr.id, fr.state.clone(), *px)));
            let Some((anchor_frame, anchor_state, px_i)) = anchor else { continue };
            let m0 = self.normalize_px(&px_i);
            let m1 = self.normalize_px(px_j);
            let state_j = self.frames[last_idx].state.clone();
            let depth = self.triangulate_depth(&anchor_state, &m0, &state_j, &m1);
            match self.cfg.parameterization {
                Parameterization::InvDepth => {
                    let lambda = (1.0 / depth).clamp(MIN_INVERSE_DEPTH, 1e3);
                    self.features.insert(
                        *id,
                        FeatureParam::InvDepth { lambda, anchor_frame, anchor_obs: m0 },
                    );
                }
                Parameterization::Xyz => {
                    let (r_wci, t_ci) = self.camera_pose(&anchor_state);
                    let p = r_wci * (Vec3::new(m0.x, m0.y, 1.0) * depth) + t_ci;
                    self.features.insert(*id, FeatureParam::Xyz(p));
                }
            }
        }
    }

    /// Two-view z-depth of the anchor ray; falls back to the configured
    /// default when parallax is insufficient.
    fn triangulate_depth(&self, x_i: &ImuKeyState, m0: &Vec2, x_j: &ImuKeyState, m1: &Vec2) -> f64 {
        let (r_wci, t_ci) = self.camera_pose(x_i);
        let (r_wcj, t_cj) = self.camera_pose(x_j);
        let m0_h = Vec3::new(m0.x, m0.y, 1.0);
        let m1_h = Vec3::new(m1.x, m1.y, 1.0);
        let a = r_wcj.transpose() * r_wci * m0_h;
        let b = r_wcj.transpose() * (t_ci - t_cj);
        // Rows of: project(d·a + b) = m1.
        let c1 = a.x - m1.x * a.z;
        let c2 = a.y - m1.y * a.z;
        let r1 = m1.x * b.z - b.x;
        let r2 = m1.y * b.z - b.y;
        let denom = c1 * c1 + c2 * c2;
        let d = if denom > 1e-12 { (c1 * r1 + c2 * r2) / denom } else { f64::NAN };

        let w0 = (r_wci * m0_h).normalize();
        let w1 = (r_wcj * m1_h).normalize();
        let parallax = w0.dot(&w1).clamp(-1.0, 1.0).acos();
        if !d.is_finite() || d < 0.1 || parallax < self.cfg.min_parallax_deg.to_radians() {
            self.cfg.fallback_depth
        } else {
            d
        }
    }

    /// Window indices by frame id.
    fn frame_index(&self) -> BTreeMap<u64, usize> {
        self.frames.iter().enumerate().map(|(i, f)| (f.id, i)).collect()
    }

    fn anchor_of(&self, id: u64) -> Option<u64> {
        match self.features.get(&id)? {
            FeatureParam::InvDepth { anchor_frame, .. } => Some(*anchor_frame),
            FeatureParam::Xyz(_) => None,
        }
    }

    /// Number of residual-bearing observations of a feature in the current
    /// window (anchor observations carry none for inverse depth).
    fn informative_obs(&self, id: u64, anchor_frame: Option<u64>) -> usize {
        self.frames
            .iter()
            .filter(|fr| Some(fr.id) != anchor_frame)
            .filter(|fr| !self.outliers.contains(&(id, fr.id)))
            .filter(|fr| fr.obs.iter().any(|(fid, _)| *fid == id))
            .count()
    }

    fn build_problem(&self) -> WindowProblem {
        let index = self.frame_index();
        let mut features = BTreeMap::new();
        let mut factors: Vec<Factor> = self.priors.iter().cloned().map(Factor::Prior).collect();
        for (i, fr) in self.frames.iter().enumerate() {
            if let Some(p) = &fr.preint {
                factors.push(Factor::Inertial { j: i - 1, preint: p.clone() });
            }
        }
        for (id, param) in &self.features {
            match param {
                FeatureParam::InvDepth { lambda, anchor_frame, anchor_obs } => {
                    let Some(&anchor_idx) = index.get(anchor_frame) else { continue };
                    if self.informative_obs(*id, Some(*anchor_frame)) < 1 {
                        continue;
                    }
                    features.insert(
                        *id,
                        FeatureValue::InvDepth { lambda: *lambda, anchor: anchor_idx, anchor_obs: *anchor_obs },
                    );
                    for fr in &self.frames {
                        if fr.id == *anchor_frame || self.outliers.contains(&(*id, fr.id)) {
                            continue;
                        }
                        if let Some((_, px)) = fr.obs.iter().find(|(fid, _)| fid == id) {
                            factors.push(Factor::VisualInvDepth {
                                obs: Observation {
                                    feature_id: *id,
                                    frame_idx: index[&fr.id],
                                    z: *px,
                                    sigma_px: self.cfg.pixel_sigma,
                                },
                                anchor: anchor_idx,
                            });
                        }
                    }
                }
                FeatureParam::Xyz(p) => {
                    if self.informative_obs(*id, None) < 2 {
                        continue;
                    }
                    features.insert(*id, FeatureValue::Xyz(FeatureXyz { id: *id, p_world: *p }));
                    for fr in &self.frames {
                        if self.outliers.contains(&(*id, fr.id)) {
                            continue;
                        }
                        if let Some((_, px)) = fr.obs.iter().find(|(fid, _)| fid == id) {
                            factors.push(Factor::VisualXyz {
                                obs: Observation {
                                    feature_id: *id,
                                    frame_idx: index[&fr.id],
                                    z: *px,
                                    sigma_px: self.cfg.pixel_sigma,
                                },
                            });
                        }
                    }
                }
            }
        }
        WindowProblem {
            states: self.frames.iter().map(|f| (f.id, f.state.clone())).collect(),
            features,
            factors,
            td: TimeOffset { td: self.td },
            // Hold the offset until the window is full: the first few frames
            // have no parallax history, and offset steps taken against that
            // geometry are noise that the marginalization prior would then
            // remember.
            calibrate_td: self.cfg.calibrate_td && self.frames.len() >= self.cfg.window_size,
            max_td_step: 0.01,
            ctx: ProblemContext {
                extrinsics: self.cfg.extrinsics.clone(),
                intrinsics: self.cfg.intrinsics,
                world: self.cfg.world.clone(),
                huber_threshold: self.cfg.huber_threshold,
                mode: self.cfg.compensation,
            },
        }
    }

    fn solve(&mut self, frame_id: u64) -> Result<SolveReport, EstimatorError> {
        let mut problem = self.build_problem();
        let mut solver_cfg = self.cfg.solver.clone();
        if let Some(l) = self.lambda_warm {
            solver_cfg.lambda_init = l;
        }
        let report = lm_solve(&mut problem, &solver_cfg)
            .map_err(|source| EstimatorError::Solver { frame: frame_id, source })?;
        if let Some(it) = report.iterations.iter().rev().find(|it| it.accepted) {
            self.lambda_warm = Some((it.lambda * 0.3).clamp(1e-8, 1e3));
        }
        for (id, state) in problem.states {
            let fr = self.frames.iter_mut().find(|f| f.id == id).expect("window frame");
            fr.state = state;
        }
        for (id, value) in problem.features {
            match (self.features.get_mut(&id), value) {
                (Some(FeatureParam::InvDepth { lambda, .. }), FeatureValue::InvDepth { lambda: l, .. }) => {
                    *lambda = l.max(MIN_INVERSE_DEPTH);
                }
                (Some(FeatureParam::Xyz(p)), FeatureValue::Xyz(f)) => *p = f.p_world,
                _ => {}
            }
        }
        self.td = problem.td.td;
        Ok(report)
    }

    /// Gate observations whose whitened residual exceeds the threshold; they
    /// are excluded from subsequent windows.
    fn flag_outliers(&mut self) {
        if self.cfg.outlier_threshold <= 0.0 {
            return;
        }
        let td = TimeOffset { td: self.td };
        let index = self.frame_index();
        let mut flagged = Vec::new();
        for (id, param) in &self.features {
            let FeatureParam::InvDepth { lambda, anchor_frame, anchor_obs } = param else {
                continue;
            };
            let Some(&anchor_idx) = index.get(anchor_frame) else { continue };
            let x_i = &self.frames[anchor_idx].state;
            let feat = FeatureInvDepth {
                id: *id,
                lambda: *lambda,
                anchor_idx,
                anchor_obs: *anchor_obs,
            };
            for fr in &self.frames {
                if fr.id == *anchor_frame || self.outliers.contains(&(*id, fr.id)) {
                    continue;
                }
                let Some((_, px)) = fr.obs.iter().find(|(fid, _)| fid == id) else { continue };
                let obs = Observation {
                    feature_id: *id,
                    frame_idx: index[&fr.id],
                    z: *px,
                    sigma_px: self.cfg.pixel_sigma,
                };
                let r = crate::visual::residual_invdepth(
                    &obs,
                    &fr.state,
                    x_i,
                    &feat,
                    &self.cfg.extrinsics,
                    &self.cfg.intrinsics,
                    &td,
                );
                match r {
                    Ok(r) if r.norm() <= self.cfg.outlier_threshold => {}
                    _ => flagged.push((*id, fr.id)),
                }
            }
        }
        self.outliers.extend(flagged);
    }

    /// Square-root scale applied to the prior's offset column at every
    /// marginalization during the convergence phase; see the comment at the
    /// scaling site.
    /// Square-root scale applied to the prior's offset column at each
    /// marginalization, by phase. Fast fade while the estimate is still
    /// travelling (a few seconds of memory, so the live window dominates and
    /// the estimate escapes a poor initialization quickly); a middle fade so
    /// the noise spikes that straddle the handover are forgotten rather than
    /// remembered; then a slow fade whose long memory damps frame-to-frame
    /// jitter to sub-millisecond levels while still letting any leftover
    /// error bleed out over tens of seconds.
    const TD_PRIOR_FADE: [(u64, f64); 3] = [(450, 0.99), (900, 0.997), (u64::MAX, 0.999)];

    fn td_prior_decay(&self) -> f64 {
        for &(until, decay) in &Self::TD_PRIOR_FADE {
            if self.next_frame_id < until {
                return decay;
            }
        }
        unreachable!("fade schedule ends with u64::MAX")
    }

    fn marginalize_oldest(&mut self, frame_id: u64) -> Result<(), EstimatorError> {
        let old = self.frames[0].clone();
        let td = TimeOffset { td: self.td };

        // Features anchored at the dropped frame, split by survivability.
        let mut dropped_features = Vec::new();
        let mut reanchor: Vec<(u64, Vec3)> = Vec::new();
        for (id, param) in &self.features {
            if self.anchor_of(*id) != Some(old.id) {
                continue;
            }
            let FeatureParam::InvDepth { lambda, anchor_obs, .. } = param else { unreachable!() };
            dropped_features.push(*id);
            let seen_later = self.frames[1..]
                .iter()
                .any(|fr| fr.obs.iter().any(|(fid, _)| fid == id) && !self.outliers.contains(&(*id, fr.id)));
            if seen_later {
                let feat = FeatureInvDepth {
                    id: *id,
                    lambda: *lambda,
                    anchor_idx: 0,
                    anchor_obs: *anchor_obs,
                };
                if let Ok(p_world) =
                    feature_world_from_anchor(&feat, &old.state, &self.cfg.extrinsics, &td)
                {
                    reanchor.push((*id, p_world));
                }
            }
        }

        // Factor set absorbed into the prior: priors touching the dropped
        // state, its inertial link, and the visual factors of features
        // anchored there.
        let problem = self.build_problem();
        let touches_old = |p: &MarginalPrior| {
            p.entries.iter().any(|(v, _)| *v == VarId::KeyState(old.id))
        };
        let mut marg_factors: Vec<Factor> = Vec::new();
        for p in &self.priors {
            if touches_old(p) {
                marg_factors.push(Factor::Prior(p.clone()));
            }
        }
        if let Some(p) = &self.frames[1].preint {
            marg_factors.push(Factor::Inertial { j: 0, preint: p.clone() });
        }
        let dropped_set: BTreeSet<u64> = dropped_features.iter().copied().collect();
        for f in &problem.factors {
            if let Factor::VisualInvDepth { obs, .. } = f {
                if dropped_set.contains(&obs.feature_id) {
                    marg_factors.push(f.clone());
                }
            }
        }

        // Variables structurally involved in those factors, in layout order.
        let mut involved_states: BTreeSet<u64> = BTreeSet::new();
        let mut involved_features: BTreeSet<u64> = BTreeSet::new();
        let mut involved_td = false;
        for f in &marg_factors {
            match f {
                Factor::Prior(p) => {
                    for (v, _) in &p.entries {
                        match v {
                            VarId::KeyState(id) => {
                                involved_states.insert(*id);
                            }
                            VarId::Feature(id) => {
                                involved_features.insert(*id);
                            }
                            VarId::Td => involved_td = true,
                        }
                    }
                }
                Factor::Inertial { j, .. } => {
                    involved_states.insert(self.frames[*j].id);
                    involved_states.insert(self.frames[*j + 1].id);
                }
                Factor::VisualInvDepth { obs, anchor } => {
                    involved_states.insert(self.frames[obs.frame_idx].id);
                    involved_states.insert(self.frames[*anchor].id);
                    involved_features.insert(obs.feature_id);
                    involved_td = involved_td || self.cfg.calibrate_td;
                }
                Factor::VisualXyz { obs } => {
                    involved_states.insert(self.frames[obs.frame_idx].id);
                    involved_features.insert(obs.feature_id);
                    involved_td = involved_td || self.cfg.calibrate_td;
                }
            }
        }
        // Only features being dropped may enter the elimination; any other
        // feature in the factor list would leak into the prior entries.
        debug_assert!(involved_features.iter().all(|id| dropped_set.contains(id)));

        let mut layout = VariableLayout::default();
        for id in &involved_states {
            layout.push(VarId::KeyState(*id), crate::solver::VarKind::KeyState);
        }
        for id in &involved_features {
            layout.push(VarId::Feature(*id), crate::solver::VarKind::InvDepth);
        }
        if involved_td && self.cfg.calibrate_td {
            layout.push(VarId::Td, crate::solver::VarKind::Td);
        }
        let eq = problem
            .assemble(&marg_factors, &layout)
            .map_err(|source| EstimatorError::Solver { frame: frame_id, source })?;

        let mut drop_idx: Vec<usize> = Vec::new();
        let (o, _) = layout.offset_of(&VarId::KeyState(old.id)).expect("dropped state in layout");
        drop_idx.extend(o..o + 15);
        for id in &involved_features {
            let (o, k) = layout.offset_of(&VarId::Feature(*id)).expect("dropped feature in layout");
            drop_idx.extend(o..o + k.dim());
        }
        let (mut j_p, r_p) = marginalize(&eq.h, &eq.b, &drop_idx)
            .map_err(|source| EstimatorError::Solver { frame: frame_id, source })?;

        // Fade the offset column of the prior: marginalized offset
        // information was linearized at the then-current estimate, and left
        // at full strength it anchors the offset there, turning convergence
        // into a crawl against an ever-growing prior. The phase schedule is
        // documented at `TD_PRIOR_FADE`.
        if involved_td && self.cfg.calibrate_td {
            let last = j_p.ncols() - 1;
            j_p.column_mut(last).scale_mut(self.td_prior_decay());
        }
        let mut entries = Vec::new();
        for (v, _, _) in layout.entries() {
            match v {
                VarId::KeyState(id) if *id != old.id => {
                    let fr = self.frames.iter().find(|f| f.id == *id).expect("retained state");
                    entries.push((*v, LinPoint::State(Box::new(fr.state.clone()))));
                }
                VarId::Td => entries.push((VarId::Td, LinPoint::Scalar(self.td))),
                _ => {}
            }
        }
        let new_prior = MarginalPrior { entries, r_p, j_p };

        self.priors.retain(|p| !touches_old(p));
        self.priors.push(new_prior);

        // Re-anchor surviving features to their earliest remaining observer.
        for id in &dropped_features {
            self.features.remove(id);
        }
        for (id, p_world) in reanchor {
            let new_anchor = self.frames[1..].iter().find(|fr| {
                fr.obs.iter().any(|(fid, _)| *fid == id) && !self.outliers.contains(&(id, fr.id))
            });
            let Some(fr) = new_anchor else { continue };
            let (r_wc, t_c) = self.camera_pose(&fr.state);
            let p_c = r_wc.transpose() * (p_world - t_c);
            if p_c.z < 0.1 {
                continue;
            }
            let (_, px) = fr.obs.iter().find(|(fid, _)| *fid == id).unwrap();
            let anchor_obs = self.normalize_px(px);
            self.features.insert(
                id,
                FeatureParam::InvDepth {
                    lambda: (1.0 / p_c.z).clamp(MIN_INVERSE_DEPTH, 1e3),
                    anchor_frame: fr.id,
                    anchor_obs,
                },
            );
        }

        self.frames.remove(0);
        self.frames[0].preint = None;
        let gone = old.id;
        self.outliers.retain(|(_, fid)| *fid != gone);
        Ok(())
    }

    fn trim_imu(&mut self) {
        let Some(first) = self.frames.first() else { return };
        let keep_from = first.state.t_stamp - 0.2;
        while let Some(front) = self.imu.front() {
            if front.t < keep_from && self.imu.get(1).map(|s| s.t < keep_from).unwrap_or(false) {
                self.imu.pop_front();
            } else {
                break;
            }
        }
    }
}
