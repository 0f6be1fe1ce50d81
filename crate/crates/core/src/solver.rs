//! Sliding-window nonlinear least squares.
//!
//! Assembles the window cost (prior + inertial + visual factors) into normal
//! equations on the product manifold, solves by Levenberg-Marquardt with
//! multiplicative diagonal damping, and produces marginalization priors by
//! Schur complement. The feature block is eliminated first during the linear
//! solve; the reduction is exact.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::manifold::{
    boxminus, boxplus, CameraExtrinsics, ErrorState, ImuKeyState, Vec15, WorldConstants,
};
use crate::preintegration::{imu_residual, imu_residual_jacobians, Preintegration};
use crate::visual::{
    jacobian_invdepth, jacobian_xyz, residual_invdepth, residual_xyz, CompensationMode,
    FeatureInvDepth, FeatureXyz, Intrinsics, Observation, TimeOffset, Vec2,
};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("marginalization drop block numerically singular (cond {0:.3e})")]
    SingularBlock(f64),
    #[error("normal equations not positive definite")]
    NotPositiveDefinite,
    #[error("variable {0:?} missing from layout")]
    UnknownVariable(VarId),
}

/// Identity of one solver variable across windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarId {
    /// Key state by global frame id.
    KeyState(u64),
    /// Landmark by feature id.
    Feature(u64),
    /// The camera-IMU time offset; appears exactly once.
    Td,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    KeyState,
    FeatureXyz,
    InvDepth,
    Td,
}

impl VarKind {
    pub fn dim(&self) -> usize {
        match self {
            VarKind::KeyState => 15,
            VarKind::FeatureXyz => 3,
            VarKind::InvDepth | VarKind::Td => 1,
        }
    }
}

/// Ordered variable layout: key states first, then features, td last.
#[derive(Debug, Clone, Default)]
pub struct VariableLayout {
    entries: Vec<(VarId, VarKind, usize)>,
    offsets: BTreeMap<VarId, usize>,
    dim: usize,
}

impl VariableLayout {
    pub fn push(&mut self, id: VarId, kind: VarKind) {
        assert!(
            !self.offsets.contains_key(&id),
            "duplicate variable {id:?} in layout"
        );
        self.entries.push((id, kind, self.dim));
        self.offsets.insert(id, self.entries.len() - 1);
        self.dim += kind.dim();
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(VarId, VarKind, usize)] {
        &self.entries
    }

    pub fn offset_of(&self, id: &VarId) -> Option<(usize, VarKind)> {
        self.offsets.get(id).map(|&i| (self.entries[i].2, self.entries[i].1))
    }
}

/// Linearization point of one prior variable.
#[derive(Debug, Clone, PartialEq)]
pub enum LinPoint {
    State(Box<ImuKeyState>),
    Scalar(f64),
}

impl LinPoint {
    pub fn dim(&self) -> usize {
        match self {
            LinPoint::State(_) => 15,
            LinPoint::Scalar(_) => 1,
        }
    }
}

/// Linearized prior `r(x) = r_p + J_p · (x ⊟ x_lin)` over the listed
/// variables; the output of marginalization and also the gauge-fixing
/// bootstrap factor.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPrior {
    pub entries: Vec<(VarId, LinPoint)>,
    pub r_p: DVector<f64>,
    pub j_p: DMatrix<f64>,
}

impl MarginalPrior {
    pub fn local_dim(&self) -> usize {
        self.entries.iter().map(|(_, l)| l.dim()).sum()
    }
}

/// One term of the window cost.
#[derive(Debug, Clone)]
pub enum Factor {
    Prior(MarginalPrior),
    /// Inertial constraint between window states `j` and `j+1`.
    Inertial { j: usize, preint: Preintegration },
    /// Reprojection of a world-point feature into window frame `obs.frame_idx`.
    VisualXyz { obs: Observation },
    /// Reprojection of an inverse-depth feature; `anchor` is a window index.
    VisualInvDepth { obs: Observation, anchor: usize },
}

/// Landmark value inside a window problem.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValue {
    Xyz(FeatureXyz),
    InvDepth {
        lambda: f64,
        /// Window index of the anchor key state.
        anchor: usize,
        anchor_obs: Vec2,
    },
}

/// Shared geometric/stochastic context for factor evaluation.
#[derive(Debug, Clone)]
pub struct ProblemContext {
    pub extrinsics: CameraExtrinsics,
    pub intrinsics: Intrinsics,
    pub world: WorldConstants,
    pub huber_threshold: f64,
    pub mode: CompensationMode,
}

/// The full sliding-window problem: ordered key states, features, factors,
/// the current time offset and the marginalization prior context.
#[derive(Debug, Clone)]
pub struct WindowProblem {
    /// (global frame id, state), window order.
    pub states: Vec<(u64, ImuKeyState)>,
    /// Feature id → value; BTreeMap for a deterministic layout.
    pub features: BTreeMap<u64, FeatureValue>,
    pub factors: Vec<Factor>,
    pub td: TimeOffset,
    /// When false the td column is left out of the layout entirely.
    pub calibrate_td: bool,
    /// Per-iteration clamp on the td step; the pose compensation is only
    /// first-order valid, so larger moves are meaningless.
    pub max_td_step: f64,
    pub ctx: ProblemContext,
}

/// Dense normal equations of one linearization.
pub struct NormalEquations {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub cost: f64,
    /// Visual factors dropped this evaluation (behind camera etc.).
    pub dropped: usize,
}

struct EvaluatedFactor {
    residual: DVector<f64>,
    /// (layout column offset, width, jacobian block).
    blocks: Vec<(usize, usize, DMatrix<f64>)>,
}

impl WindowProblem {
    pub fn layout(&self) -> VariableLayout {
        let mut layout = VariableLayout::default();
        for (id, _) in &self.states {
            layout.push(VarId::KeyState(*id), VarKind::KeyState);
        }
        for (fid, fv) in &self.features {
            let kind = match fv {
                FeatureValue::Xyz(_) => VarKind::FeatureXyz,
                FeatureValue::InvDepth { .. } => VarKind::InvDepth,
            };
            layout.push(VarId::Feature(*fid), kind);
        }
        if self.calibrate_td {
            layout.push(VarId::Td, VarKind::Td);
        }
        layout
    }

    fn state(&self, j: usize) -> &ImuKeyState {
        &self.states[j].1
    }

    fn huber_scale(&self, r_norm: f64) -> f64 {
        let k = self.ctx.huber_threshold;
        if r_norm <= k || k <= 0.0 {
            1.0
        } else {
            (k / r_norm).sqrt()
        }
    }

    /// Local deviation of the current values from a prior's linearization
    /// point, stacked in the prior's entry order.
    fn prior_dx(&self, prior: &MarginalPrior) -> Result<DVector<f64>, SolverError> {
        let mut dx = DVector::zeros(prior.local_dim());
        let mut row = 0;
        for (id, lin) in &prior.entries {
            match lin {
                LinPoint::State(lin_state) => {
                    let cur = match id {
                        VarId::KeyState(fid) => {
                            &self
                                .states
                                .iter()
                                .find(|(sid, _)| sid == fid)
                                .ok_or(SolverError::UnknownVariable(*id))?
                                .1
                        }
                        _ => return Err(SolverError::UnknownVariable(*id)),
                    };
                    dx.rows_mut(row, 15).copy_from(&boxminus(cur, lin_state).to_vector());
                    row += 15;
                }
                LinPoint::Scalar(lin_v) => {
                    let cur = match id {
                        VarId::Td => self.td.td,
                        _ => return Err(SolverError::UnknownVariable(*id)),
                    };
                    dx[row] = cur - lin_v;
                    row += 1;
                }
            }
        }
        Ok(dx)
    }

    fn evaluate(&self, factor: &Factor, layout: &VariableLayout) -> Result<Option<EvaluatedFactor>, SolverError> {
        match factor {
            Factor::Prior(prior) => {
                let dx = self.prior_dx(prior)?;
                let residual = &prior.r_p + &prior.j_p * dx;
                let mut blocks = Vec::new();
                let mut col = 0;
                for (id, lin) in &prior.entries {
                    let w = lin.dim();
                    let (offset, _) = layout.offset_of(id).ok_or(SolverError::UnknownVariable(*id))?;
                    blocks.push((offset, w, prior.j_p.columns(col, w).into_owned()));
                    col += w;
                }
                Ok(Some(EvaluatedFactor { residual, blocks }))
            }
            Factor::Inertial { j, preint } => {
                let xj = self.state(*j);
                let xj1 = self.state(*j + 1);
                let sqrt_info = preint.sqrt_info();
                let r = sqrt_info * imu_residual(preint, xj, xj1, &self.ctx.world);
                let (jj, jj1) = imu_residual_jacobians(preint, xj, xj1, &self.ctx.world);
                let (oj, _) = layout
                    .offset_of(&VarId::KeyState(self.states[*j].0))
                    .ok_or(SolverError::UnknownVariable(VarId::KeyState(self.states[*j].0)))?;
                let (oj1, _) = layout
                    .offset_of(&VarId::KeyState(self.states[*j + 1].0))
                    .ok_or(SolverError::UnknownVariable(VarId::KeyState(self.states[*j + 1].0)))?;
                let to_dyn = |m: &nalgebra::SMatrix<f64, 15, 15>| {
                    DMatrix::from_fn(15, 15, |r, c| m[(r, c)])
                };
                Ok(Some(EvaluatedFactor {
                    residual: DVector::from_fn(15, |i, _| r[i]),
                    blocks: vec![
                        (oj, 15, to_dyn(&(sqrt_info * jj))),
                        (oj1, 15, to_dyn(&(sqrt_info * jj1))),
                    ],
                }))
            }
            Factor::VisualXyz { obs } => {
                let Some(FeatureValue::Xyz(f)) = self.features.get(&obs.feature_id) else {
                    return Err(SolverError::UnknownVariable(VarId::Feature(obs.feature_id)));
                };
                let x_j = self.state(obs.frame_idx);
                let (r, jac) = match (
                    residual_xyz(obs, x_j, f, &self.ctx.extrinsics, &self.ctx.intrinsics, &self.td),
                    jacobian_xyz(obs, x_j, f, &self.ctx.extrinsics, &self.ctx.intrinsics, &self.td, self.ctx.mode),
                ) {
                    (Ok(r), Ok(j)) => (r, j),
                    _ => return Ok(None),
                };
                let s = self.huber_scale(r.norm());
                let (oj, _) = layout
                    .offset_of(&VarId::KeyState(self.states[obs.frame_idx].0))
                    .ok_or(SolverError::UnknownVariable(VarId::KeyState(self.states[obs.frame_idx].0)))?;
                let (of, _) = layout
                    .offset_of(&VarId::Feature(obs.feature_id))
                    .ok_or(SolverError::UnknownVariable(VarId::Feature(obs.feature_id)))?;
                // Without the velocity/bias couplings the pose block only
                // touches the attitude and position columns; keep it narrow.
                let wp = match self.ctx.mode {
                    CompensationMode::PaperZeros => 6,
                    CompensationMode::FullCoupling => 15,
                };
                let mut blocks = vec![
                    (oj, wp, DMatrix::from_fn(2, wp, |r, c| s * jac.pose[(r, c)])),
                    (of, 3, DMatrix::from_fn(2, 3, |r, c| s * jac.feat[(r, c)])),
                ];
                if self.calibrate_td {
                    let (ot, _) = layout.offset_of(&VarId::Td).ok_or(SolverError::UnknownVariable(VarId::Td))?;
                    blocks.push((ot, 1, DMatrix::from_fn(2, 1, |r, _| s * jac.td[r])));
                }
                Ok(Some(EvaluatedFactor {
                    residual: DVector::from_fn(2, |i, _| s * r[i]),
                    blocks,
                }))
            }
            Factor::VisualInvDepth { obs, anchor } => {
                let Some(FeatureValue::InvDepth { lambda, anchor_obs, .. }) =
                    self.features.get(&obs.feature_id)
                else {
                    return Err(SolverError::UnknownVariable(VarId::Feature(obs.feature_id)));
                };
                let f = FeatureInvDepth {
                    id: obs.feature_id,
                    lambda: *lambda,
                    anchor_idx: *anchor,
                    anchor_obs: *anchor_obs,
                };
                let x_i = self.state(*anchor);
                let x_j = self.state(obs.frame_idx);
                let (r, jac) = match (
                    residual_invdepth(obs, x_j, x_i, &f, &self.ctx.extrinsics, &self.ctx.intrinsics, &self.td),
                    jacobian_invdepth(obs, x_j, x_i, &f, &self.ctx.extrinsics, &self.ctx.intrinsics, &self.td, self.ctx.mode),
                ) {
                    (Ok(r), Ok(j)) => (r, j),
                    _ => return Ok(None),
                };
                let s = self.huber_scale(r.norm());
                let (oi, _) = layout
                    .offset_of(&VarId::KeyState(self.states[*anchor].0))
                    .ok_or(SolverError::UnknownVariable(VarId::KeyState(self.states[*anchor].0)))?;
                let (oj, _) = layout
                    .offset_of(&VarId::KeyState(self.states[obs.frame_idx].0))
                    .ok_or(SolverError::UnknownVariable(VarId::KeyState(self.states[obs.frame_idx].0)))?;
                let (of, _) = layout
                    .offset_of(&VarId::Feature(obs.feature_id))
                    .ok_or(SolverError::UnknownVariable(VarId::Feature(obs.feature_id)))?;
                let wp = match self.ctx.mode {
                    CompensationMode::PaperZeros => 6,
                    CompensationMode::FullCoupling => 15,
                };
                let mut blocks = vec![
                    (oi, wp, DMatrix::from_fn(2, wp, |r, c| s * jac.pose_i[(r, c)])),
                    (oj, wp, DMatrix::from_fn(2, wp, |r, c| s * jac.pose_j[(r, c)])),
                    (of, 1, DMatrix::from_fn(2, 1, |r, _| s * jac.lambda[r])),
                ];
                if self.calibrate_td {
                    let (ot, _) = layout.offset_of(&VarId::Td).ok_or(SolverError::UnknownVariable(VarId::Td))?;
                    blocks.push((ot, 1, DMatrix::from_fn(2, 1, |r, _| s * jac.td[r])));
                }
                Ok(Some(EvaluatedFactor {
                    residual: DVector::from_fn(2, |i, _| s * r[i]),
                    blocks,
                }))
            }
        }
    }

    /// Assemble `H = ΣJᵀJ`, `b = −ΣJᵀr` and `cost = ½Σ‖r‖²` over the given
    /// factors at the current values.
    pub fn assemble(&self, factors: &[Factor], layout: &VariableLayout) -> Result<NormalEquations, SolverError> {
        let n = layout.dim();
        let mut h = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        let mut cost = 0.0;
        let mut dropped = 0;
        for factor in factors {
            let Some(ev) = self.evaluate(factor, layout)? else {
                dropped += 1;
                continue;
            };
            cost += 0.5 * ev.residual.norm_squared();
            let m = ev.residual.len();
            let rs = ev.residual.as_slice();
            // Accumulate on raw column-major storage: the per-element DMatrix
            // indexing otherwise dominates the whole assembly.
            let hs = h.as_mut_slice();
            for (oi, wi, ji) in &ev.blocks {
                let js = ji.as_slice();
                for r in 0..*wi {
                    let mut acc = 0.0;
                    for k in 0..m {
                        acc += js[r * m + k] * rs[k];
                    }
                    b[oi + r] -= acc;
                }
            }
            // JᵀJ is symmetric: accumulate the upper block pairs and mirror.
            for (bi, (oi, wi, ji)) in ev.blocks.iter().enumerate() {
                let js_i = ji.as_slice();
                for (oj, wj, jj) in &ev.blocks[bi..] {
                    let js_j = jj.as_slice();
                    let diagonal = oi == oj;
                    for c in 0..*wj {
                        let col = (oj + c) * n;
                        for r in 0..*wi {
                            // Visual factors (m = 2) dominate; give the
                            // compiler a branch it can unroll.
                            let acc = if m == 2 {
                                js_i[r * 2] * js_j[c * 2] + js_i[r * 2 + 1] * js_j[c * 2 + 1]
                            } else {
                                (0..m).map(|k| js_i[r * m + k] * js_j[c * m + k]).sum()
                            };
                            hs[col + oi + r] += acc;
                            if !diagonal {
                                hs[(oi + r) * n + oj + c] += acc;
                            }
                        }
                    }
                }
            }
        }
        Ok(NormalEquations { h, b, cost, dropped })
    }

    /// Cost contribution of one factor without forming Jacobians; `None` on
    /// the same evaluation failures that make [`Self::evaluate`] drop it.
    fn factor_cost(&self, factor: &Factor) -> Result<Option<f64>, SolverError> {
        match factor {
            Factor::Prior(prior) => {
                let dx = self.prior_dx(prior)?;
                let residual = &prior.r_p + &prior.j_p * dx;
                Ok(Some(0.5 * residual.norm_squared()))
            }
            Factor::Inertial { j, preint } => {
                let r = preint.sqrt_info() * imu_residual(preint, self.state(*j), self.state(*j + 1), &self.ctx.world);
                Ok(Some(0.5 * r.norm_squared()))
            }
            Factor::VisualXyz { obs } => {
                let Some(FeatureValue::Xyz(f)) = self.features.get(&obs.feature_id) else {
                    return Err(SolverError::UnknownVariable(VarId::Feature(obs.feature_id)));
                };
                let Ok(r) = residual_xyz(obs, self.state(obs.frame_idx), f, &self.ctx.extrinsics, &self.ctx.intrinsics, &self.td)
                else {
                    return Ok(None);
                };
                let s = self.huber_scale(r.norm());
                Ok(Some(0.5 * ((s * r[0]).powi(2) + (s * r[1]).powi(2))))
            }
            Factor::VisualInvDepth { obs, anchor } => {
                let Some(FeatureValue::InvDepth { lambda, anchor_obs, .. }) =
                    self.features.get(&obs.feature_id)
                else {
                    return Err(SolverError::UnknownVariable(VarId::Feature(obs.feature_id)));
                };
                let f = FeatureInvDepth {
                    id: obs.feature_id,
                    lambda: *lambda,
                    anchor_idx: *anchor,
                    anchor_obs: *anchor_obs,
                };
                let Ok(r) = residual_invdepth(
                    obs,
                    self.state(obs.frame_idx),
                    self.state(*anchor),
                    &f,
                    &self.ctx.extrinsics,
                    &self.ctx.intrinsics,
                    &self.td,
                ) else {
                    return Ok(None);
                };
                let s = self.huber_scale(r.norm());
                Ok(Some(0.5 * ((s * r[0]).powi(2) + (s * r[1]).powi(2))))
            }
        }
    }

    /// Cost only (used for step acceptance).
    pub fn cost(&self) -> Result<(f64, usize), SolverError> {
        let mut cost = 0.0;
        let mut dropped = 0;
        for factor in &self.factors {
            match self.factor_cost(factor)? {
                Some(c) => cost += c,
                None => dropped += 1,
            }
        }
        Ok((cost, dropped))
    }

    /// Retract a step vector onto the problem values.
    pub fn step(&self, layout: &VariableLayout, dx: &DVector<f64>) -> Self {
        let mut out = self.clone();
        for (id, kind, offset) in layout.entries() {
            match (id, kind) {
                (VarId::KeyState(fid), VarKind::KeyState) => {
                    let mut v = Vec15::zeros();
                    for k in 0..15 {
                        v[k] = dx[offset + k];
                    }
                    let s = out.states.iter_mut().find(|(sid, _)| sid == fid).expect("layout state");
                    s.1 = boxplus(&s.1, &ErrorState::from_vector(&v));
                }
                (VarId::Feature(fid), VarKind::FeatureXyz) => {
                    if let Some(FeatureValue::Xyz(f)) = out.features.get_mut(fid) {
                        f.p_world += nalgebra::Vector3::new(dx[*offset], dx[offset + 1], dx[offset + 2]);
                    }
                }
                (VarId::Feature(fid), VarKind::InvDepth) => {
                    if let Some(FeatureValue::InvDepth { lambda, .. }) = out.features.get_mut(fid) {
                        *lambda += dx[*offset];
                    }
                }
                (VarId::Td, VarKind::Td) => {
                    let step = dx[*offset].clamp(-self.max_td_step, self.max_td_step);
                    out.td = TimeOffset { td: out.td.td + step };
                }
                _ => unreachable!("layout kind mismatch"),
            }
        }
        out
    }

    /// Column ranges of the feature block, for Schur elimination.
    fn feature_range(&self, layout: &VariableLayout) -> (usize, usize) {
        let start = self.states.len() * 15;
        let len: usize = layout
            .entries()
            .iter()
            .filter(|(id, _, _)| matches!(id, VarId::Feature(_)))
            .map(|(_, k, _)| k.dim())
            .sum();
        (start, len)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub lambda_init: f64,
    pub grad_tol: f64,
    pub cost_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iters: 10, lambda_init: 1e-4, grad_tol: 1e-8, cost_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StopReason {
    GradientSmall,
    CostChangeSmall,
    MaxIterations,
    /// Damping exhausted without an acceptable step; state left unchanged.
    LambdaExceeded,
}

#[derive(Debug, Clone)]
pub struct IterRecord {
    pub cost: f64,
    pub lambda: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: Vec<IterRecord>,
    pub accepted_steps: usize,
    pub dropped_obs: usize,
    pub stop: StopReason,
}

/// Solve the damped system `(H + λ·diag(H)) dx = b`, eliminating the feature
/// block first. Exact for any λ ≥ 0.
fn solve_damped(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    lambda: f64,
    feat_start: usize,
    feat_len: usize,
) -> Option<DVector<f64>> {
    let n = h.nrows();
    let mut hd = h.clone();
    for k in 0..n {
        hd[(k, k)] += lambda * h[(k, k)] + 1e-12;
    }
    let nd = n - feat_len;
    if feat_len == 0 {
        let chol = hd.cholesky()?;
        return Some(chol.solve(b));
    }
    // Dense index set: everything outside [feat_start, feat_start+feat_len).
    let dense_idx: Vec<usize> = (0..feat_start).chain(feat_start + feat_len..n).collect();
    let feat_idx: Vec<usize> = (feat_start..feat_start + feat_len).collect();

    let mut h_dd = DMatrix::zeros(nd, nd);
    let mut h_df = DMatrix::zeros(nd, feat_len);
    let mut b_d = DVector::zeros(nd);
    let mut b_f = DVector::zeros(feat_len);
    for (r, &ir) in dense_idx.iter().enumerate() {
        b_d[r] = b[ir];
        for (c, &ic) in dense_idx.iter().enumerate() {
            h_dd[(r, c)] = hd[(ir, ic)];
        }
        for (c, &ic) in feat_idx.iter().enumerate() {
            h_df[(r, c)] = hd[(ir, ic)];
        }
    }
    for (r, &ir) in feat_idx.iter().enumerate() {
        b_f[r] = b[ir];
    }
    // Scalar feature block (inverse-depth landmarks, no off-diagonal
    // coupling): eliminate by sparse rank-one downdates. Each feature column
    // of `h_df` touches only the states observing it, so the dense
    // `H_df H_ff⁻¹ H_dfᵀ` product wastes almost all its work.
    let scalar_only = (0..feat_len).all(|k| {
        (k + 1..feat_len).take(2).all(|l| hd[(feat_idx[k], feat_idx[l])] == 0.0)
    });
    if scalar_only {
        let mut hs = h_dd;
        let mut bs = b_d;
        let mut inv_d = vec![0.0; feat_len];
        let mut nz: Vec<(usize, f64)> = Vec::with_capacity(nd);
        {
            let hss = hs.as_mut_slice();
            for c in 0..feat_len {
                let d = hd[(feat_idx[c], feat_idx[c])];
                if d <= 0.0 {
                    return None;
                }
                inv_d[c] = 1.0 / d;
                nz.clear();
                for r in 0..nd {
                    let v = h_df[(r, c)];
                    if v != 0.0 {
                        nz.push((r, v * inv_d[c]));
                    }
                }
                for &(ri, vi) in &nz {
                    bs[ri] -= vi * b_f[c];
                    for &(rj, vj) in &nz {
                        hss[rj * nd + ri] -= vi * vj * d;
                    }
                }
            }
        }
        let chol = hs.cholesky()?;
        let dx_d = chol.solve(&bs);
        let mut dx = DVector::zeros(n);
        for (r, &ir) in dense_idx.iter().enumerate() {
            dx[ir] = dx_d[r];
        }
        for c in 0..feat_len {
            let mut acc = b_f[c];
            for r in 0..nd {
                acc -= h_df[(r, c)] * dx_d[r];
            }
            dx[feat_idx[c]] = inv_d[c] * acc;
        }
        return Some(dx);
    }

    // Feature block is diagonal for inverse-depth landmarks; invert per entry.
    // (World-point features produce 3×3 blocks; those windows fall back to a
    // blockwise inverse below.)
    let mut h_ff_inv = DMatrix::zeros(feat_len, feat_len);
    let mut k = 0;
    while k < feat_len {
        // Detect the 3×3 block by off-diagonal coupling.
        let is_block3 = k + 2 < feat_len
            && (hd[(feat_idx[k], feat_idx[k + 1])] != 0.0
                || hd[(feat_idx[k], feat_idx[k + 2])] != 0.0
                || hd[(feat_idx[k + 1], feat_idx[k + 2])] != 0.0);
        if is_block3 {
            let blk = DMatrix::from_fn(3, 3, |r, c| hd[(feat_idx[k + r], feat_idx[k + c])]);
            let inv = blk.try_inverse()?;
            for r in 0..3 {
                for c in 0..3 {
                    h_ff_inv[(k + r, k + c)] = inv[(r, c)];
                }
            }
            k += 3;
        } else {
            let d = hd[(feat_idx[k], feat_idx[k])];
            if d <= 0.0 {
                return None;
            }
            h_ff_inv[(k, k)] = 1.0 / d;
            k += 1;
        }
    }
    let h_df_ffinv = &h_df * &h_ff_inv;
    let hs = &h_dd - &h_df_ffinv * h_df.transpose();
    let bs = &b_d - &h_df_ffinv * &b_f;
    let chol = hs.cholesky()?;
    let dx_d = chol.solve(&bs);
    let dx_f = &h_ff_inv * (&b_f - h_df.transpose() * &dx_d);

    let mut dx = DVector::zeros(n);
    for (r, &ir) in dense_idx.iter().enumerate() {
        dx[ir] = dx_d[r];
    }
    for (r, &ir) in feat_idx.iter().enumerate() {
        dx[ir] = dx_f[r];
    }
    Some(dx)
}

/// Reference solve without the feature elimination; used by tests.
#[doc(hidden)]
pub fn solve_damped_dense(h: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    solve_damped(h, b, lambda, 0, 0)
}

/// Damped Gauss-Newton on the window problem. Accepted steps never increase
/// the cost; terminates on gradient, relative cost change or iteration count.
pub fn lm_solve(problem: &mut WindowProblem, cfg: &SolverConfig) -> Result<SolveReport, SolverError> {
    let mut lambda = cfg.lambda_init;
    let mut iterations = Vec::new();
    let mut accepted_steps = 0;
    let mut dropped_obs = 0;

    let layout = problem.layout();
    let (feat_start, feat_len) = problem.feature_range(&layout);
    let mut eq = problem.assemble(&problem.factors, &layout)?;
    let initial_cost = eq.cost;
    let mut stop = StopReason::MaxIterations;

    for _ in 0..cfg.max_iters {
        dropped_obs = eq.dropped;
        if eq.b.amax() < cfg.grad_tol {
            stop = StopReason::GradientSmall;
            break;
        }
        loop {
            if lambda > 1e12 {
                // No acceptable step at any damping; keep the current state.
                stop = StopReason::LambdaExceeded;
                break;
            }
            let Some(dx) = solve_damped(&eq.h, &eq.b, lambda, feat_start, feat_len) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = problem.step(&layout, &dx);
            let (cand_cost, cand_dropped) = candidate.cost()?;
            // Never accept a step whose cost drop comes from factors failing
            // to evaluate (e.g. points pushed behind the camera). The small
            // tolerance admits no-op steps at extreme damping.
            if cand_cost <= eq.cost * (1.0 + 1e-12) && cand_dropped <= eq.dropped {
                let rel_change = (eq.cost - cand_cost) / eq.cost.max(1e-300);
                *problem = candidate;
                iterations.push(IterRecord { cost: cand_cost, lambda, accepted: true });
                lambda = (lambda * 0.3).max(1e-12);
                accepted_steps += 1;
                if rel_change < cfg.cost_tol {
                    stop = StopReason::CostChangeSmall;
                    eq.cost = cand_cost;
                    eq.dropped = cand_dropped;
                } else {
                    // Relinearize at the accepted values for the next iteration.
                    eq = problem.assemble(&problem.factors, &layout)?;
                }
                break;
            }
            iterations.push(IterRecord { cost: cand_cost, lambda, accepted: false });
            lambda *= 10.0;
        }
        if stop != StopReason::MaxIterations {
            break;
        }
    }

    Ok(SolveReport {
        initial_cost,
        final_cost: eq.cost,
        iterations,
        accepted_steps,
        dropped_obs,
        stop,
    })
}

/// Schur-complement marginalization of `drop` indices out of (H, b).
///
/// Returns the reduced information recovered as a square-root factor:
/// `H' = J_pᵀ J_p` (negative eigenvalues clamped at zero) and `r_p` with
/// `J_pᵀ r_p = −b'`.
pub fn marginalize(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    drop: &[usize],
) -> Result<(DMatrix<f64>, DVector<f64>), SolverError> {
    let n = h.nrows();
    let keep: Vec<usize> = (0..n).filter(|i| !drop.contains(i)).collect();
    let nd = drop.len();
    let nk = keep.len();

    let mut h_dd = DMatrix::zeros(nd, nd);
    let mut h_kd = DMatrix::zeros(nk, nd);
    let mut h_kk = DMatrix::zeros(nk, nk);
    let mut b_d = DVector::zeros(nd);
    let mut b_k = DVector::zeros(nk);
    for (r, &ir) in drop.iter().enumerate() {
        b_d[r] = b[ir];
        for (c, &ic) in drop.iter().enumerate() {
            h_dd[(r, c)] = h[(ir, ic)];
        }
    }
    for (r, &ir) in keep.iter().enumerate() {
        b_k[r] = b[ir];
        for (c, &ic) in drop.iter().enumerate() {
            h_kd[(r, c)] = h[(ir, ic)];
        }
        for (c, &ic) in keep.iter().enumerate() {
            h_kk[(r, c)] = h[(ir, ic)];
        }
    }
    let eig_dd = h_dd.clone().symmetric_eigen();
    let max_ev = eig_dd.eigenvalues.amax();
    let min_ev = eig_dd.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_ev > 0.0) || max_ev / min_ev > 1e15 {
        return Err(SolverError::SingularBlock(max_ev / min_ev.max(1e-300)));
    }
    // Jitter the spectrum before inverting; harmless for well-posed blocks.
    let h_dd_inv = eig_dd.recompose_inverse(1e-10);

    let h_prime = &h_kk - &h_kd * &h_dd_inv * h_kd.transpose();
    let b_prime = &b_k - &h_kd * &h_dd_inv * &b_d;

    // Recover a square-root factor by eigendecomposition, clamping negatives.
    let h_sym = 0.5 * (&h_prime + h_prime.transpose());
    let eig = h_sym.symmetric_eigen();
    let tol = 1e-12 * eig.eigenvalues.amax().max(1.0);
    let kept: Vec<usize> = (0..nk).filter(|&i| eig.eigenvalues[i] > tol).collect();
    let rank = kept.len();
    let mut j_p = DMatrix::zeros(rank, nk);
    let mut s_inv = DVector::zeros(rank);
    for (row, &i) in kept.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        s_inv[row] = 1.0 / s;
        for c in 0..nk {
            j_p[(row, c)] = s * eig.eigenvectors[(c, i)];
        }
    }
    // r_p = −S⁻¹ Vᵀ b'.
    let mut r_p = DVector::zeros(rank);
    for (row, &i) in kept.iter().enumerate() {
        let mut acc = 0.0;
        for c in 0..nk {
            acc += eig.eigenvectors[(c, i)] * b_prime[c];
        }
        r_p[row] = -s_inv[row] * acc;
    }
    Ok((j_p, r_p))
}

trait RecomposeInverse {
    fn recompose_inverse(&self, jitter: f64) -> DMatrix<f64>;
}

impl RecomposeInverse for nalgebra::SymmetricEigen<f64, nalgebra::Dyn> {
    fn recompose_inverse(&self, jitter: f64) -> DMatrix<f64> {
        let n = self.eigenvalues.len();
        let mut out = DMatrix::zeros(n, n);
        for k in 0..n {
            let vi = self.eigenvectors.column(k);
            let scale = 1.0 / (self.eigenvalues[k] + jitter);
            for r in 0..n {
                for c in 0..n {
                    out[(r, c)] += scale * vi[r] * vi[c];
                }
            }
        }
        out
    }
}
