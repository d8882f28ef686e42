//! Per-frame estimation of body pose and joint angles from landmark
//! reprojections in the static and dynamic cameras.
//!
//! The state of a frame is the world-to-body transform `T^{I:W}` and the
//! joint angles `β`. Each solve optimizes a left perturbation
//! `T^{I:W} = T(δ)·T₀` together with `β`, starting from the prior.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix2xX, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, PixelPoint};
use crate::chain::{Chain, ModelIndex};
use crate::error::{Error, Result};
use crate::geometry::{Pose6, RigidTransform};
use crate::kinematics::{JointState, KinematicModel};
use crate::measurement::Observation;
use crate::solver::{levenberg_marquardt, LeastSquaresProblem, SolveOptions, SolveReport, Termination};

/// Calibrated chain plus the body-to-static-camera extrinsic `T^{s:I}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigExtrinsics {
    pub model: KinematicModel,
    pub t_s_i: RigidTransform,
}

impl RigExtrinsics {
    pub fn new(model: KinematicModel, t_s_i: RigidTransform) -> Result<Self> {
        model.validate()?;
        Ok(RigExtrinsics { model, t_s_i })
    }

    /// Body frame coincides with the static camera.
    pub fn from_model(model: KinematicModel) -> Result<Self> {
        Self::new(model, RigidTransform::identity())
    }
}

/// Rig extrinsics together with both cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerRig {
    pub extrinsics: RigExtrinsics,
    pub intrinsics_s: CameraIntrinsics,
    pub intrinsics_d: CameraIntrinsics,
}

impl TrackerRig {
    pub fn intrinsics(&self, cam: CameraSel) -> &CameraIntrinsics {
        match cam {
            CameraSel::Static => &self.intrinsics_s,
            CameraSel::Dynamic => &self.intrinsics_d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraSel {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub id: usize,
    pub p_w: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerFrame {
    pub timestamp: f64,
    pub landmarks: Vec<Landmark>,
    pub obs_static: Vec<Observation>,
    pub obs_dynamic: Vec<Observation>,
    /// Encoder angles, when known, for evaluation only.
    pub truth_angles: Option<JointState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerEstimate {
    /// World to body.
    pub t_i_w: RigidTransform,
    pub beta: JointState,
}

impl TrackerEstimate {
    pub fn new(t_i_w: RigidTransform, beta: JointState) -> Self {
        TrackerEstimate { t_i_w, beta }
    }
}

/// `T^{d:I}(β) = T(τ_d)·A_1⋯A_L·T(τ_s)·T^{s:I}`.
pub fn dynamic_extrinsic(rig: &RigExtrinsics, beta: &JointState) -> Result<RigidTransform> {
    Ok(rig.model.full_chain(beta)? * rig.t_s_i)
}

fn camera_from_world(rig: &RigExtrinsics, estimate: &TrackerEstimate, cam: CameraSel) -> Result<RigidTransform> {
    Ok(match cam {
        CameraSel::Static => rig.t_s_i * estimate.t_i_w,
        CameraSel::Dynamic => dynamic_extrinsic(rig, &estimate.beta)? * estimate.t_i_w,
    })
}

/// Reprojection error `z − ψ(T^{c:I} T^{I:W} p^W)` in the selected camera.
pub fn tracker_residual(
    rig: &TrackerRig,
    estimate: &TrackerEstimate,
    cam: CameraSel,
    p_w: &Vector3<f64>,
    z: &PixelPoint,
) -> Result<Vector2<f64>> {
    let t = camera_from_world(&rig.extrinsics, estimate, cam)?;
    Ok(*z - rig.intrinsics(cam).project(&t.apply(p_w))?)
}

fn residual_chain(rig: &RigExtrinsics, t0: &RigidTransform, delta: &Pose6, beta: &JointState, cam: CameraSel) -> Chain {
    let mut chain = Chain::new();
    if cam == CameraSel::Dynamic {
        chain.push_model(
            &rig.model,
            beta,
            ModelIndex {
                kinematics: None,
                joints: Some(6),
            },
        );
    }
    chain.push_fixed(rig.t_s_i).push_pose(delta, Some(0)).push_fixed(*t0);
    chain
}

/// `∂e/∂β` of the dynamic-camera residual, `2 × L` in pixels per radian.
pub fn joint_jacobian(rig: &TrackerRig, estimate: &TrackerEstimate, p_w: &Vector3<f64>) -> Result<Matrix2xX<f64>> {
    let l = rig.extrinsics.model.num_links();
    if estimate.beta.len() != l {
        return Err(Error::DimensionMismatch {
            expected: l,
            found: estimate.beta.len(),
        });
    }
    let chain = residual_chain(
        &rig.extrinsics,
        &estimate.t_i_w,
        &Pose6::IDENTITY,
        &estimate.beta,
        CameraSel::Dynamic,
    );
    let lin = chain.linearize();
    let mut derivs = Vec::new();
    let q = lin.apply_with_derivatives(p_w, &mut derivs);
    let (_, jp) = rig.intrinsics_d.project_with_jacobian(&q)?;
    let mut out = Matrix2xX::zeros(l);
    for (k, dq) in derivs {
        if k >= 6 {
            let col = -(jp * dq);
            let mut c = out.column_mut(k - 6);
            c += col;
        }
    }
    Ok(out)
}

/// Observation counts below which a frame is not solved.
pub fn required_observations(links: usize) -> (usize, usize) {
    (3, 3.max(links + 1))
}

struct FrameProblem<'a> {
    rig: &'a TrackerRig,
    t0: RigidTransform,
    /// `(camera, landmark, measurement)` in residual order.
    obs: Vec<(CameraSel, Vector3<f64>, PixelPoint)>,
    links: usize,
}

impl FrameProblem<'_> {
    fn split(&self, x: &DVector<f64>) -> (Pose6, JointState) {
        let delta = Pose6::from_slice(&x.as_slice()[..6]).expect("six entries");
        (delta, JointState::new(x.as_slice()[6..].to_vec()))
    }

    fn estimate(&self, x: &DVector<f64>) -> TrackerEstimate {
        let (delta, beta) = self.split(x);
        TrackerEstimate::new(delta.to_transform() * self.t0, beta)
    }

    fn eval(&self, x: &DVector<f64>, jac: Option<&mut DMatrix<f64>>) -> Result<DVector<f64>> {
        let (delta, beta) = self.split(x);
        let chains = [CameraSel::Static, CameraSel::Dynamic]
            .map(|cam| residual_chain(&self.rig.extrinsics, &self.t0, &delta, &beta, cam));
        let lins = [chains[0].linearize(), chains[1].linearize()];
        let mut r = DVector::zeros(2 * self.obs.len());
        let mut derivs = Vec::new();
        let mut jac = jac;
        for (i, (cam, p_w, z)) in self.obs.iter().enumerate() {
            let lin = &lins[*cam as usize];
            let q = lin.apply_with_derivatives(p_w, &mut derivs);
            let (px, jp) = self.rig.intrinsics(*cam).project_with_jacobian(&q)?;
            let e = *z - px;
            r[2 * i] = e.x;
            r[2 * i + 1] = e.y;
            if let Some(j) = jac.as_deref_mut() {
                for (k, dq) in &derivs {
                    let d = jp * dq;
                    j[(2 * i, *k)] -= d.x;
                    j[(2 * i + 1, *k)] -= d.y;
                }
            }
        }
        Ok(r)
    }
}

impl LeastSquaresProblem for FrameProblem<'_> {
    fn num_params(&self) -> usize {
        6 + self.links
    }

    fn num_residuals(&self) -> usize {
        2 * self.obs.len()
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.eval(x, None)
    }

    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut j = DMatrix::zeros(self.num_residuals(), self.num_params());
        let r = self.eval(x, Some(&mut j))?;
        Ok((r, j))
    }
}

fn gather(
    landmarks: &HashMap<usize, Vector3<f64>>,
    obs: &[Observation],
    cam: CameraSel,
) -> Result<Vec<(CameraSel, Vector3<f64>, PixelPoint)>> {
    let mut sorted: Vec<&Observation> = obs.iter().collect();
    sorted.sort_by_key(|o| o.id);
    sorted
        .into_iter()
        .map(|o| {
            landmarks
                .get(&o.id)
                .map(|p| (cam, *p, o.px))
                .ok_or(Error::UnknownPointId(o.id))
        })
        .collect()
}

/// Minimizes the static and dynamic reprojection errors of one frame over
/// pose and joint angles, starting from `prior`.
pub fn estimate_frame(
    rig: &TrackerRig,
    frame: &TrackerFrame,
    prior: &TrackerEstimate,
    opts: &SolveOptions,
) -> Result<(TrackerEstimate, SolveReport)> {
    let links = rig.extrinsics.model.num_links();
    if prior.beta.len() != links {
        return Err(Error::DimensionMismatch {
            expected: links,
            found: prior.beta.len(),
        });
    }
    let (required_static, required_dynamic) = required_observations(links);
    if frame.obs_static.len() < required_static || frame.obs_dynamic.len() < required_dynamic {
        return Err(Error::InsufficientObservations {
            static_obs: frame.obs_static.len(),
            dynamic_obs: frame.obs_dynamic.len(),
            required_static,
            required_dynamic,
        });
    }
    let map: HashMap<usize, Vector3<f64>> = frame.landmarks.iter().map(|l| (l.id, l.p_w)).collect();
    let mut obs = gather(&map, &frame.obs_static, CameraSel::Static)?;
    obs.extend(gather(&map, &frame.obs_dynamic, CameraSel::Dynamic)?);
    let problem = FrameProblem {
        rig,
        t0: prior.t_i_w,
        obs,
        links,
    };
    let mut x0 = DVector::zeros(6 + links);
    x0.as_mut_slice()[6..].copy_from_slice(prior.beta.angles());
    let report = levenberg_marquardt(&problem, x0, opts)?;
    if report.termination == Termination::MaxIterations {
        return Err(Error::NotConverged {
            iterations: report.iterations,
        });
    }
    Ok((problem.estimate(&report.params), report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Ok,
    Failed,
}

/// Outcome of a tracked sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleTrackReport {
    /// Per-joint RMSE over frames with ground truth, or `None` without any.
    pub per_joint_rmse: Option<Vec<f64>>,
    pub status: Vec<FrameStatus>,
    pub failures: Vec<(usize, String)>,
}

impl AngleTrackReport {
    pub fn failed_frames(&self) -> Vec<usize> {
        self.failures.iter().map(|(i, _)| *i).collect()
    }
}

/// Per-joint RMSE of wrapped angle differences.
pub fn angle_rmse(estimates: &[JointState], truth: &[JointState]) -> Vec<f64> {
    let l = truth.first().map_or(0, JointState::len);
    let n = estimates.len().min(truth.len()).max(1) as f64;
    (0..l)
        .map(|j| {
            let ss: f64 = estimates
                .iter()
                .zip(truth)
                .map(|(e, t)| crate::geometry::canonical_angle(e.angles()[j] - t.angles()[j]).powi(2))
                .sum();
            (ss / n).sqrt()
        })
        .collect()
}

/// Runs [`estimate_frame`] over time-ordered frames, seeding each with the
/// previous estimate. A frame that fails keeps its prior and is flagged.
pub fn track_sequence(
    rig: &TrackerRig,
    frames: &[TrackerFrame],
    initial: &TrackerEstimate,
    opts: &SolveOptions,
) -> Result<(Vec<TrackerEstimate>, AngleTrackReport)> {
    if frames.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::InsufficientData("frames are not time-ordered".into()));
    }
    let mut prior = initial.clone();
    let mut estimates = Vec::with_capacity(frames.len());
    let mut status = Vec::with_capacity(frames.len());
    let mut failures = Vec::new();
    for (k, frame) in frames.iter().enumerate() {
        match estimate_frame(rig, frame, &prior, opts) {
            Ok((est, _)) => {
                prior = est;
                status.push(FrameStatus::Ok);
            }
            Err(e @ Error::DimensionMismatch { .. }) => return Err(e),
            Err(e) => {
                log::warn!("frame {k} at t={:.3}s failed: {e}", frame.timestamp);
                failures.push((k, e.to_string()));
                status.push(FrameStatus::Failed);
            }
        }
        estimates.push(prior.clone());
    }
    let (est, truth): (Vec<JointState>, Vec<JointState>) = estimates
        .iter()
        .zip(frames)
        .filter_map(|(e, f)| f.truth_angles.clone().map(|t| (e.beta.clone(), t)))
        .unzip();
    let per_joint_rmse = (!truth.is_empty()).then(|| angle_rmse(&est, &truth));
    Ok((
        estimates,
        AngleTrackReport {
            per_joint_rmse,
            status,
            failures,
        },
    ))
}
