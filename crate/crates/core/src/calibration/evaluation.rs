//! Parameter-space comparison of an estimate with ground truth.
//!
//! The chain has exact gauge freedoms: the first joint's angle offset and
//! `d_1` can be absorbed into `τ_d`, and the last joint's angle offset and
//! `(d_L, a_L, α_L)` into `τ_s`. [`Gauge`] parameterizes these moves and
//! [`align_to_truth`] moves an estimate along them to the observationally
//! equivalent estimate nearest the truth, so that errors can be reported
//! both raw and modulo gauge.

use nalgebra::{DVector, Vector3};

use super::{mean, std_dev, CalibrationEstimate, CalibrationMode};
use crate::error::{Error, Result};
use crate::geometry::{canonical_angle, rot_z, RigidTransform};
use crate::kinematics::{dh_transform, kinematic_parameter_count, DhLink, JointState, KinematicModel, ParamRole};
use crate::solver::{levenberg_marquardt, FnProblem, SolveOptions};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl ErrorStats {
    pub fn from_errors(errors: &[f64]) -> Self {
        ErrorStats {
            mean: mean(errors),
            std: std_dev(errors),
            count: errors.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthErrorReport {
    /// Absolute angle error of each joint over all sets, radians.
    pub joints: Vec<ErrorStats>,
    /// Translation-role parameters of `τ_s`, `τ_d` and every link, meters.
    pub translation: ErrorStats,
    /// Rotation-role parameters of `τ_s`, `τ_d` and every link, radians.
    pub rotation: ErrorStats,
    /// As `translation`, with `τ_s` left out.
    pub translation_without_tau_s: ErrorStats,
    /// As `rotation`, with `τ_s` left out.
    pub rotation_without_tau_s: ErrorStats,
}

fn angle_error(a: f64, b: f64) -> f64 {
    canonical_angle(a - b).abs()
}

/// Per-joint and pooled parameter errors of `estimate` against the truth.
pub fn evaluate_against_truth(
    estimate: &CalibrationEstimate,
    truth_model: &KinematicModel,
    truth_angles: &[JointState],
) -> Result<TruthErrorReport> {
    let links = truth_model.num_links();
    if estimate.model.num_links() != links {
        return Err(Error::ShapeMismatch(format!(
            "estimate has {} links, truth has {links}",
            estimate.model.num_links()
        )));
    }
    if estimate.joint_trajectory.len() != truth_angles.len() {
        return Err(Error::ShapeMismatch(format!(
            "estimate has {} joint states, truth has {}",
            estimate.joint_trajectory.len(),
            truth_angles.len()
        )));
    }
    let mut joints = vec![Vec::with_capacity(truth_angles.len()); links];
    for (est, truth) in estimate.joint_trajectory.iter().zip(truth_angles) {
        if est.len() != links || truth.len() != links {
            return Err(Error::DimensionMismatch {
                expected: links,
                found: est.len().min(truth.len()),
            });
        }
        for (l, (a, b)) in est.angles().iter().zip(truth.angles()).enumerate() {
            joints[l].push(angle_error(*a, *b));
        }
    }

    let roles = KinematicModel::parameter_roles(links);
    let tau_s_start = kinematic_parameter_count(links) - 6;
    let (mut trans, mut rot, mut trans_inner, mut rot_inner) = (vec![], vec![], vec![], vec![]);
    for (j, ((e, t), role)) in estimate.model.pack().iter().zip(truth_model.pack()).zip(roles).enumerate() {
        let inner = j < tau_s_start;
        match role {
            ParamRole::Translation => {
                let err = (e - t).abs();
                trans.push(err);
                if inner {
                    trans_inner.push(err);
                }
            }
            ParamRole::Rotation => {
                let err = angle_error(*e, t);
                rot.push(err);
                if inner {
                    rot_inner.push(err);
                }
            }
        }
    }
    Ok(TruthErrorReport {
        joints: joints.iter().map(|e| ErrorStats::from_errors(e)).collect(),
        translation: ErrorStats::from_errors(&trans),
        rotation: ErrorStats::from_errors(&rot),
        translation_without_tau_s: ErrorStats::from_errors(&trans_inner),
        rotation_without_tau_s: ErrorStats::from_errors(&rot_inner),
    })
}

/// An exact reparameterization of the chain. Applied to a model and its
/// joint trajectory it changes no static-to-dynamic transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gauge {
    /// Added to the first joint angle of every set.
    pub first_offset: f64,
    /// Added to `d_1`.
    pub first_d: f64,
    /// Added to the last joint angle of every set (chains with two or more
    /// links).
    pub last_offset: f64,
    /// Replacement last link. For a single link its `d` is ignored.
    pub last_link: DhLink,
}

impl Gauge {
    pub fn identity(model: &KinematicModel) -> Self {
        Gauge {
            first_offset: 0.0,
            first_d: 0.0,
            last_offset: 0.0,
            last_link: model.links.last().copied().unwrap_or(DhLink::new(0.0, 0.0, 0.0)),
        }
    }

    pub fn apply(&self, model: &KinematicModel, angles: &[JointState]) -> Result<(KinematicModel, Vec<JointState>)> {
        let links = model.num_links();
        if links == 0 {
            return Ok((model.clone(), angles.to_vec()));
        }
        let mut m = model.clone();
        let first = RigidTransform::from_rotation(rot_z(-self.first_offset))
            * RigidTransform::from_translation(Vector3::new(0.0, 0.0, -self.first_d));
        m.tau_d = (model.tau_d.to_transform() * first).to_pose()?;
        m.links[0].d += self.first_d;

        let last = m.links[links - 1];
        let mut new_last = self.last_link;
        let last_offset = if links == 1 {
            new_last.d = last.d;
            0.0
        } else {
            self.last_offset
        };
        let tail = RigidTransform::from_rotation(rot_z(-last_offset)) * dh_transform(0.0, &last) * m.tau_s.to_transform();
        m.tau_s = (dh_transform(0.0, &new_last).inverse() * tail).to_pose()?;
        m.links[links - 1] = new_last;

        let shifted = angles
            .iter()
            .map(|b| {
                let mut v = b.angles().to_vec();
                if let Some(first) = v.first_mut() {
                    *first += self.first_offset;
                }
                if links > 1 {
                    v[links - 1] += last_offset;
                }
                JointState::new(v)
            })
            .collect();
        Ok((m, shifted))
    }
}

fn alignment_options() -> SolveOptions {
    SolveOptions {
        cost_tolerance: 1e-15,
        gradient_tolerance: 1e-15,
        ..SolveOptions::default()
    }
    .serial()
}

/// The gauge that brings `estimate` closest to the truth in parameter
/// space. Joint offsets are only moved when the angles are free.
pub fn fit_gauge(
    estimate: &CalibrationEstimate,
    truth_model: &KinematicModel,
    truth_angles: &[JointState],
) -> Result<Gauge> {
    let links = estimate.model.num_links();
    let k = estimate.joint_trajectory.len();
    if truth_model.num_links() != links || truth_angles.len() != k {
        return Err(Error::ShapeMismatch("estimate and truth differ in shape".into()));
    }
    let identity = Gauge::identity(&estimate.model);
    if links == 0 || estimate.mode == CalibrationMode::Validation {
        return Ok(identity);
    }
    let free_angles = estimate.mode == CalibrationMode::Encoderless;
    let decode = |g: &DVector<f64>| -> Gauge {
        let offsets = if free_angles { (g[0], g[2]) } else { (0.0, 0.0) };
        Gauge {
            first_offset: offsets.0,
            first_d: g[1],
            last_offset: offsets.1,
            last_link: DhLink::new(g[3], g[4], g[5]),
        }
    };
    let roles = KinematicModel::parameter_roles(links);
    let truth_x = truth_model.pack();
    let residual = |g: &DVector<f64>| -> Result<DVector<f64>> {
        let (m, angles) = decode(g).apply(&estimate.model, &estimate.joint_trajectory)?;
        let mut r: Vec<f64> = m
            .pack()
            .iter()
            .zip(&truth_x)
            .zip(&roles)
            .map(|((v, t), role)| match role {
                ParamRole::Rotation => canonical_angle(v - t),
                ParamRole::Translation => v - t,
            })
            .collect();
        if free_angles {
            for (a, t) in angles.iter().zip(truth_angles) {
                r.extend(a.angles().iter().zip(t.angles()).map(|(x, y)| canonical_angle(x - y)));
            }
        }
        Ok(DVector::from_vec(r))
    };
    let m = kinematic_parameter_count(links) + if free_angles { k * links } else { 0 };
    let last = identity.last_link;
    let g0 = DVector::from_vec(vec![0.0, 0.0, 0.0, last.d, last.a, last.alpha]);
    let report = levenberg_marquardt(&FnProblem::new(6, m, residual), g0, &alignment_options())?;
    Ok(decode(&report.params))
}

/// The observationally equivalent estimate nearest the truth. Validation
/// estimates are returned unchanged; use [`align_validation`] with the
/// calibration's gauge.
pub fn align_to_truth(
    estimate: &CalibrationEstimate,
    truth_model: &KinematicModel,
    truth_angles: &[JointState],
) -> Result<CalibrationEstimate> {
    let gauge = fit_gauge(estimate, truth_model, truth_angles)?;
    let (model, joint_trajectory) = gauge.apply(&estimate.model, &estimate.joint_trajectory)?;
    Ok(CalibrationEstimate {
        model,
        joint_trajectory,
        mode: estimate.mode,
    })
}

/// Moves a validation estimate into the gauge fitted on its calibration.
pub fn align_validation(validation: &CalibrationEstimate, gauge: &Gauge) -> Result<CalibrationEstimate> {
    let (model, joint_trajectory) = gauge.apply(&validation.model, &validation.joint_trajectory)?;
    Ok(CalibrationEstimate {
        model,
        joint_trajectory,
        mode: CalibrationMode::Validation,
    })
}
