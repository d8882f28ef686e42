//! Synthetic dynamic camera cluster: configuration sampling, noisy forward
//! projection, initialization perturbation, end-to-end studies and
//! tracking sequences.
//!
//! Randomness comes from ChaCha8 streams keyed by `(seed, stream)`: each set
//! draws its pixel noise from its own stream, and the initialization and
//! random-angle draws use reserved streams, so parallel and serial
//! synthesis produce identical data.

use std::f64::consts::FRAC_PI_2;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    align_validation, calibrate_encoderless, evaluate_against_truth, fit_gauge, validate, CalibrationEstimate,
    CalibrationOptions, CalibrationResult, TruthErrorReport,
};
use crate::camera::{CameraIntrinsics, PixelPoint};
use crate::error::{Error, Result};
use crate::geometry::{Pose6, RigidTransform};
use crate::kinematics::{DhLink, JointState, KinematicModel, ParamRole};
use crate::measurement::{
    build_measurement_set, measurement_set_from_poses, target_points, Dataset, FiducialTarget, MeasurementOptions,
    MeasurementSet, Observation,
};
use crate::tracker::{Landmark, TrackerEstimate, TrackerFrame};

const STREAM_INIT: u64 = u64::MAX;
const STREAM_ANGLES: u64 = u64::MAX - 1;
const STREAM_LANDMARKS: u64 = u64::MAX - 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"))
}

/// Evenly spaced samples of one joint, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointRange {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl JointRange {
    pub fn new(min: f64, max: f64, count: usize) -> Self {
        JointRange { min, max, count }
    }

    fn value(&self, i: usize) -> f64 {
        if self.count <= 1 {
            self.min
        } else {
            self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitNoise {
    pub sigma_translation_m: f64,
    pub sigma_rotation_rad: f64,
}

impl InitNoise {
    pub const ZERO: InitNoise = InitNoise {
        sigma_translation_m: 0.0,
        sigma_rotation_rad: 0.0,
    };
}

/// How joint configurations are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampling {
    /// Cartesian product of the per-joint ranges.
    #[default]
    Grid,
    /// `count` states drawn uniformly within the ranges.
    Random { count: usize },
}

/// Where measurement-set 3D points come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    /// PnP on the noisy detections, as with real data.
    #[default]
    Pnp,
    /// Ground-truth target poses; for debugging.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub truth_model: KinematicModel,
    #[serde(default)]
    pub target: FiducialTarget,
    pub intrinsics_s: CameraIntrinsics,
    pub intrinsics_d: CameraIntrinsics,
    /// Target frame in the static camera frame, `T^{s:t}`.
    pub target_pose: Pose6,
    /// Optional per-set target poses overriding `target_pose`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_poses: Option<Vec<Pose6>>,
    pub joint_grid: Vec<JointRange>,
    #[serde(default)]
    pub sampling: Sampling,
    pub pixel_noise_sigma: f64,
    pub init_noise: InitNoise,
    pub rng_seed: u64,
    /// Set `i` draws its pixel noise from stream `noise_stream_offset + i`.
    #[serde(default)]
    pub noise_stream_offset: u64,
    #[serde(default)]
    pub point_source: PointSource,
    /// Record the true joint angles as encoder readings.
    #[serde(default)]
    pub encoder_angles: bool,
    /// Reject a configuration unless every target point is visible in both
    /// cameras.
    #[serde(default = "default_true")]
    pub require_full_board: bool,
    #[serde(default)]
    pub measurement: MeasurementOptions,
}

fn default_true() -> bool {
    true
}

/// Default simulated gimbal: joint 1 rolls the dynamic camera about its
/// optical axis, joint 2 pans it about the static camera's y axis, with a
/// 10 cm baseline along x.
pub fn default_truth_model() -> KinematicModel {
    KinematicModel {
        tau_s: Pose6::new(FRAC_PI_2, 0.0, 0.0, -0.1, 0.012, 0.0),
        links: vec![DhLink::new(0.02, 0.015, -FRAC_PI_2), DhLink::new(0.015, 0.01, 0.05)],
        tau_d: Pose6::new(-0.04, -0.03, 0.02, -0.02444, -0.0164, -0.00813),
    }
}

impl SimulationConfig {
    /// 81-set grid calibration protocol: ±0.6 rad roll, ±0.2 rad pan,
    /// 0.4 px pixel noise, 3 cm / 10° initialization noise.
    pub fn calibration_default(seed: u64) -> Self {
        SimulationConfig {
            truth_model: default_truth_model(),
            target: FiducialTarget::default(),
            intrinsics_s: CameraIntrinsics::simulation_default(),
            intrinsics_d: CameraIntrinsics::simulation_default(),
            target_pose: Pose6::new(0.08, -0.06, 0.0, -0.05, -0.075, 0.65),
            target_poses: None,
            joint_grid: vec![JointRange::new(-0.6, 0.6, 9), JointRange::new(-0.2, 0.2, 9)],
            sampling: Sampling::Grid,
            pixel_noise_sigma: 0.4,
            init_noise: InitNoise {
                sigma_translation_m: 0.03,
                sigma_rotation_rad: 10f64.to_radians(),
            },
            rng_seed: seed,
            noise_stream_offset: 0,
            point_source: PointSource::Pnp,
            encoder_angles: false,
            require_full_board: true,
            measurement: MeasurementOptions::default(),
        }
    }

    /// 81 uniformly random configurations over the calibration ranges,
    /// with noise streams disjoint from the calibration set of the same
    /// seed.
    pub fn validation_default(seed: u64) -> Self {
        SimulationConfig {
            sampling: Sampling::Random { count: 81 },
            noise_stream_offset: 1 << 32,
            ..Self::calibration_default(seed)
        }
    }

    pub fn noiseless(self) -> Self {
        SimulationConfig {
            pixel_noise_sigma: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.truth_model.validate()?;
        self.target.validate()?;
        self.intrinsics_s.validate()?;
        self.intrinsics_d.validate()?;
        if self.joint_grid.len() != self.truth_model.num_links() {
            return Err(Error::Config(format!(
                "joint_grid has {} entries, model has {} links",
                self.joint_grid.len(),
                self.truth_model.num_links()
            )));
        }
        for (j, r) in self.joint_grid.iter().enumerate() {
            if r.count == 0 || !(r.min.is_finite() && r.max.is_finite()) || r.max < r.min {
                return Err(Error::Config(format!("joint_grid[{j}] is invalid")));
            }
        }
        if let Sampling::Random { count: 0 } = self.sampling {
            return Err(Error::Config("random sampling needs a positive count".into()));
        }
        let sigmas = [
            self.pixel_noise_sigma,
            self.init_noise.sigma_translation_m,
            self.init_noise.sigma_rotation_rad,
        ];
        if !sigmas.iter().all(|s| *s >= 0.0 && s.is_finite()) {
            return Err(Error::Config("noise sigmas must be finite and non-negative".into()));
        }
        if let Some(poses) = &self.target_poses {
            if poses.len() != self.num_configurations() {
                return Err(Error::Config(format!(
                    "{} target poses for {} configurations",
                    poses.len(),
                    self.num_configurations()
                )));
            }
        }
        Ok(())
    }

    pub fn num_configurations(&self) -> usize {
        match self.sampling {
            Sampling::Grid => self.joint_grid.iter().map(|r| r.count).product(),
            Sampling::Random { count } => count,
        }
    }

    fn configurations(&self) -> Vec<JointState> {
        match self.sampling {
            Sampling::Grid => sample_configurations(&self.joint_grid),
            Sampling::Random { count } => {
                let mut rng = rng_for(self.rng_seed, STREAM_ANGLES);
                (0..count)
                    .map(|_| {
                        JointState::new(
                            self.joint_grid
                                .iter()
                                .map(|r| if r.max > r.min { rng.random_range(r.min..=r.max) } else { r.min })
                                .collect(),
                        )
                    })
                    .collect()
            }
        }
    }
}

/// Cartesian product of the per-joint ranges; the last joint varies fastest.
pub fn sample_configurations(grid: &[JointRange]) -> Vec<JointState> {
    let total: usize = grid.iter().map(|r| r.count).product();
    (0..total)
        .map(|mut flat| {
            let mut angles = vec![0.0; grid.len()];
            for (j, r) in grid.iter().enumerate().rev() {
                angles[j] = r.value(flat % r.count);
                flat /= r.count;
            }
            JointState::new(angles)
        })
        .collect()
}

/// A configuration that produced no measurement set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub angles: JointState,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationBundle {
    pub dataset: Dataset,
    /// True joint states of the kept sets.
    pub truth_angles: Vec<JointState>,
    pub truth_model: KinematicModel,
    pub init_model: KinematicModel,
    pub init_angles: Vec<JointState>,
    pub rejections: Vec<Rejection>,
}

fn project_board(cam: &CameraIntrinsics, t: &RigidTransform, pts: &[Vector3<f64>]) -> Vec<Option<PixelPoint>> {
    pts.iter()
        .map(|p| {
            let q = t.apply(p);
            cam.is_visible(&q).then(|| cam.project(&q).ok()).flatten()
        })
        .collect()
}

fn synthesize_set(config: &SimulationConfig, index: usize, beta: &JointState) -> std::result::Result<MeasurementSet, String> {
    let pts = target_points(&config.target);
    let t_s_t = config
        .target_poses
        .as_ref()
        .map_or(config.target_pose, |p| p[index])
        .to_transform();
    let t_d_s = config.truth_model.full_chain(beta).map_err(|e| e.to_string())?;
    let t_d_t = t_d_s * t_s_t;
    let px_s = project_board(&config.intrinsics_s, &t_s_t, &pts);
    let px_d = project_board(&config.intrinsics_d, &t_d_t, &pts);
    if config.require_full_board {
        let hidden_s = px_s.iter().filter(|p| p.is_none()).count();
        let hidden_d = px_d.iter().filter(|p| p.is_none()).count();
        if hidden_s + hidden_d > 0 {
            return Err(format!(
                "target not fully visible ({hidden_s} points hidden in static camera, {hidden_d} in dynamic camera)"
            ));
        }
    }
    let mut rng = rng_for(config.rng_seed, config.noise_stream_offset + index as u64);
    let noise = gaussian(config.pixel_noise_sigma);
    let observe = |px: &[Option<PixelPoint>], rng: &mut ChaCha8Rng| -> Vec<Observation> {
        px.iter()
            .enumerate()
            .filter_map(|(id, p)| {
                p.map(|p| {
                    let q = match &noise {
                        Some(n) => PixelPoint::new(p.u + n.sample(rng), p.v + n.sample(rng)),
                        None => p,
                    };
                    Observation::new(id, q)
                })
            })
            .collect()
    };
    let obs_s = observe(&px_s, &mut rng);
    let obs_d = observe(&px_d, &mut rng);
    let known = config.encoder_angles.then(|| beta.clone());
    let set = match config.point_source {
        PointSource::Pnp => build_measurement_set(
            &config.intrinsics_s,
            &config.intrinsics_d,
            &config.target,
            &obs_s,
            &obs_d,
            known,
            &config.measurement,
        ),
        PointSource::GroundTruth => measurement_set_from_poses(
            &config.target,
            &t_s_t,
            &t_d_t,
            &obs_s,
            &obs_d,
            known,
            config.measurement.min_common_points,
        ),
    };
    set.map_err(|e| e.to_string())
}

/// Samples configurations, projects the target into both cameras through
/// the true chain, adds pixel noise and builds the measurement sets.
pub fn synthesize_dataset(config: &SimulationConfig) -> Result<SimulationBundle> {
    synthesize_dataset_with(config, true)
}

pub fn synthesize_dataset_with(config: &SimulationConfig, parallel: bool) -> Result<SimulationBundle> {
    config.validate()?;
    let configurations = config.configurations();
    let work = |(i, beta): (usize, &JointState)| synthesize_set(config, i, beta);
    let outcomes: Vec<_> = if parallel {
        configurations.par_iter().enumerate().map(work).collect()
    } else {
        configurations.iter().enumerate().map(work).collect()
    };
    let mut sets = Vec::new();
    let mut truth_angles = Vec::new();
    let mut rejections = Vec::new();
    for (index, (outcome, beta)) in outcomes.into_iter().zip(configurations).enumerate() {
        match outcome {
            Ok(set) => {
                sets.push(set);
                truth_angles.push(beta);
            }
            Err(reason) => {
                log::debug!("configuration {index} rejected: {reason}");
                rejections.push(Rejection {
                    index,
                    angles: beta,
                    reason,
                })
            }
        }
    }
    if sets.is_empty() {
        return Err(Error::AllSetsRejected {
            rejected: rejections.len(),
        });
    }
    let mut rng = rng_for(config.rng_seed, STREAM_INIT);
    let (init_model, init_angles) =
        perturb_initialization(&config.truth_model, &truth_angles, &config.init_noise, &mut rng);
    Ok(SimulationBundle {
        dataset: Dataset {
            intrinsics_s: config.intrinsics_s,
            intrinsics_d: config.intrinsics_d,
            target: config.target,
            sets,
        },
        truth_angles,
        truth_model: config.truth_model.clone(),
        init_model,
        init_angles,
        rejections,
    })
}

/// Adds independent zero-mean Gaussian noise: `sigma_translation_m` to every
/// translation-role parameter, `sigma_rotation_rad` to every rotation-role
/// parameter and every joint angle.
pub fn perturb_initialization<R: Rng + ?Sized>(
    truth_model: &KinematicModel,
    truth_angles: &[JointState],
    noise: &InitNoise,
    rng: &mut R,
) -> (KinematicModel, Vec<JointState>) {
    let nt = gaussian(noise.sigma_translation_m);
    let nr = gaussian(noise.sigma_rotation_rad);
    let draw = |n: &Option<Normal<f64>>, rng: &mut R| n.as_ref().map_or(0.0, |n| n.sample(rng));
    let roles = KinematicModel::parameter_roles(truth_model.num_links());
    let x: Vec<f64> = truth_model
        .pack()
        .iter()
        .zip(roles)
        .map(|(v, role)| {
            v + match role {
                ParamRole::Translation => draw(&nt, rng),
                ParamRole::Rotation => draw(&nr, rng),
            }
        })
        .collect();
    let model = KinematicModel::unpack(&x, truth_model.num_links()).expect("length preserved");
    let angles = truth_angles
        .iter()
        .map(|b| JointState::new(b.angles().iter().map(|a| a + draw(&nr, rng)).collect()))
        .collect();
    (model, angles)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Row {
    pub dataset: String,
    pub n_images: usize,
    pub mean_reproj_px: f64,
    pub std_reproj_px: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table2Row {
    pub joint: String,
    pub mean_err_rad: f64,
    pub std_err_rad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table3Row {
    pub param_class: String,
    pub mean_err: f64,
    pub std_err: f64,
    pub unit: String,
}

/// Reprojection, joint-angle and parameter error tables of a study.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StudyTables {
    pub table1: Vec<Table1Row>,
    pub table2: Vec<Table2Row>,
    pub table3: Vec<Table3Row>,
}

/// Truth comparison of a calibration and its validation run, raw and modulo
/// gauge.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyEvaluation {
    pub calibration: TruthErrorReport,
    pub validation: TruthErrorReport,
    pub calibration_aligned: TruthErrorReport,
    pub validation_aligned: TruthErrorReport,
}

pub fn evaluate_study(
    calibration: &CalibrationEstimate,
    calibration_truth: &[JointState],
    validation_estimate: &CalibrationEstimate,
    validation_truth: &[JointState],
    truth_model: &KinematicModel,
) -> Result<StudyEvaluation> {
    let gauge = fit_gauge(calibration, truth_model, calibration_truth)?;
    let (model, joint_trajectory) = gauge.apply(&calibration.model, &calibration.joint_trajectory)?;
    let aligned = CalibrationEstimate {
        model,
        joint_trajectory,
        mode: calibration.mode,
    };
    let val_aligned = align_validation(validation_estimate, &gauge)?;
    Ok(StudyEvaluation {
        calibration: evaluate_against_truth(calibration, truth_model, calibration_truth)?,
        validation: evaluate_against_truth(validation_estimate, truth_model, validation_truth)?,
        calibration_aligned: evaluate_against_truth(&aligned, truth_model, calibration_truth)?,
        validation_aligned: evaluate_against_truth(&val_aligned, truth_model, validation_truth)?,
    })
}

/// Summary of the reprojection residuals used for the first table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectionSummary {
    pub n_images: usize,
    pub mean_px: f64,
    pub std_px: f64,
}

impl StudyTables {
    pub fn build(calibration: ReprojectionSummary, validation: ReprojectionSummary, eval: &StudyEvaluation) -> Self {
        let table1 = [("calibration", calibration), ("validation", validation)]
            .into_iter()
            .map(|(name, s)| Table1Row {
                dataset: name.to_string(),
                n_images: s.n_images,
                mean_reproj_px: s.mean_px,
                std_reproj_px: s.std_px,
            })
            .collect();
        let mut table2 = Vec::new();
        for (name, rep) in [
            ("calibration", &eval.calibration),
            ("validation", &eval.validation),
            ("calibration", &eval.calibration_aligned),
            ("validation", &eval.validation_aligned),
        ]
        .iter()
        .enumerate()
        .map(|(i, (n, r))| (if i < 2 { n.to_string() } else { format!("{n}_gauge_aligned") }, *r))
        {
            for (j, stats) in rep.joints.iter().enumerate() {
                let label = match name.strip_suffix("_gauge_aligned") {
                    Some(base) => format!("{base}_joint_{}_gauge_aligned", j + 1),
                    None => format!("{name}_joint_{}", j + 1),
                };
                table2.push(Table2Row {
                    joint: label,
                    mean_err_rad: stats.mean,
                    std_err_rad: stats.std,
                });
            }
        }
        let row = |class: &str, s: &crate::calibration::ErrorStats, unit: &str| Table3Row {
            param_class: class.to_string(),
            mean_err: s.mean,
            std_err: s.std,
            unit: unit.to_string(),
        };
        let c = &eval.calibration;
        let a = &eval.calibration_aligned;
        let table3 = vec![
            row("translation", &c.translation, "m"),
            row("rotation", &c.rotation, "rad"),
            row("translation_without_tau_s", &c.translation_without_tau_s, "m"),
            row("rotation_without_tau_s", &c.rotation_without_tau_s, "rad"),
            row("translation_gauge_aligned", &a.translation, "m"),
            row("rotation_gauge_aligned", &a.rotation, "rad"),
        ];
        StudyTables { table1, table2, table3 }
    }
}

/// Reprojection summary from a result's statistics: the mean and spread of
/// the per-set coordinate RMS.
pub fn reprojection_summary(result: &CalibrationResult) -> ReprojectionSummary {
    ReprojectionSummary {
        n_images: result.estimate.joint_trajectory.len(),
        mean_px: result.stats.mean_set_rms_px(),
        std_px: result.stats.std_set_rms_px(),
    }
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub calibration_bundle: SimulationBundle,
    pub validation_bundle: SimulationBundle,
    pub calibration: CalibrationResult,
    pub validation: CalibrationResult,
    pub evaluation: StudyEvaluation,
    pub tables: StudyTables,
}

/// Synthesizes both datasets, calibrates encoderless, validates with the
/// frozen chain and compares everything with the truth.
pub fn run_sim_study(
    config_cal: &SimulationConfig,
    config_val: &SimulationConfig,
    opts: &CalibrationOptions,
) -> Result<StudyReport> {
    if config_cal.truth_model != config_val.truth_model {
        return Err(Error::Config("calibration and validation configs use different truth models".into()));
    }
    let parallel = opts.solve.parallel;
    let cal = synthesize_dataset_with(config_cal, parallel)?;
    let val = synthesize_dataset_with(config_val, parallel)?;
    let calibration = calibrate_encoderless(&cal.dataset, &cal.init_model, &cal.init_angles, opts)?;
    let validation = validate(&val.dataset, &calibration.estimate.model, &val.init_angles, opts)?;
    let evaluation = evaluate_study(
        &calibration.estimate,
        &cal.truth_angles,
        &validation.estimate,
        &val.truth_angles,
        &cal.truth_model,
    )?;
    let tables = StudyTables::build(
        reprojection_summary(&calibration),
        reprojection_summary(&validation),
        &evaluation,
    );
    Ok(StudyReport {
        calibration_bundle: cal,
        validation_bundle: val,
        calibration,
        validation,
        evaluation,
        tables,
    })
}

/// Sinusoidal gimbal motion seen against a static landmark field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingScenario {
    pub model: KinematicModel,
    /// Body (IMU) frame to static camera frame.
    #[serde(default)]
    pub t_s_i: Pose6,
    pub intrinsics_s: CameraIntrinsics,
    pub intrinsics_d: CameraIntrinsics,
    pub frames: usize,
    pub frame_rate_hz: f64,
    pub landmarks: usize,
    pub landmark_depth_m: (f64, f64),
    /// Half-angle of the cone around the static optical axis holding the
    /// landmarks.
    pub landmark_half_angle_rad: f64,
    /// Per joint: `θ(t) = offset + amplitude · sin(2π f t + phase)`.
    pub joint_amplitude_rad: Vec<f64>,
    pub joint_frequency_hz: Vec<f64>,
    pub joint_phase_rad: Vec<f64>,
    pub joint_offset_rad: Vec<f64>,
    /// Amplitude of the slow body sway, rotation and translation.
    pub body_sway_rad: f64,
    pub body_sway_m: f64,
    pub pixel_noise_sigma: f64,
    pub rng_seed: u64,
}

impl TrackingScenario {
    /// 200 frames at 20 Hz, 100 landmarks 5–15 m away, 0.4 px noise.
    pub fn default_with_model(model: KinematicModel, seed: u64) -> Self {
        TrackingScenario {
            model,
            t_s_i: Pose6::IDENTITY,
            intrinsics_s: CameraIntrinsics::simulation_default(),
            intrinsics_d: CameraIntrinsics::simulation_default(),
            frames: 200,
            frame_rate_hz: 20.0,
            landmarks: 100,
            landmark_depth_m: (5.0, 15.0),
            landmark_half_angle_rad: 0.35,
            joint_amplitude_rad: vec![0.5, 0.18],
            joint_frequency_hz: vec![0.2, 0.35],
            joint_phase_rad: vec![0.0, 1.0],
            joint_offset_rad: vec![0.0, 0.0],
            body_sway_rad: 0.05,
            body_sway_m: 0.1,
            pixel_noise_sigma: 0.4,
            rng_seed: seed,
        }
    }

    pub fn truth_angles(&self, t: f64) -> JointState {
        JointState::new(
            (0..self.model.num_links())
                .map(|j| {
                    let w = 2.0 * std::f64::consts::PI * self.joint_frequency_hz[j];
                    self.joint_offset_rad[j] + self.joint_amplitude_rad[j] * (w * t + self.joint_phase_rad[j]).sin()
                })
                .collect(),
        )
    }

    /// World-to-body transform at time `t`.
    pub fn truth_pose(&self, t: f64) -> RigidTransform {
        let a = self.body_sway_rad;
        let m = self.body_sway_m;
        Pose6::new(
            a * (0.3 * t).sin(),
            a * (0.23 * t + 0.5).sin(),
            a * (0.17 * t + 1.0).sin(),
            m * (0.2 * t).sin(),
            m * (0.13 * t + 0.3).sin(),
            m * (0.11 * t + 0.7).sin(),
        )
        .to_transform()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let l = self.model.num_links();
        let lens = [
            self.joint_amplitude_rad.len(),
            self.joint_frequency_hz.len(),
            self.joint_phase_rad.len(),
            self.joint_offset_rad.len(),
        ];
        if lens.iter().any(|n| *n != l) {
            return Err(Error::Config(format!("joint motion needs {l} entries per field")));
        }
        if self.frames == 0 || self.landmarks == 0 || !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return Err(Error::Config("frames, landmarks and frame rate must be positive".into()));
        }
        let (lo, hi) = self.landmark_depth_m;
        if !(lo > 0.0 && hi >= lo) || self.pixel_noise_sigma < 0.0 {
            return Err(Error::Config("invalid landmark depth range or noise".into()));
        }
        Ok(())
    }
}

/// A synthetic tracking run with its truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingSequence {
    pub landmarks: Vec<Landmark>,
    pub frames: Vec<TrackerFrame>,
    pub truth: Vec<TrackerEstimate>,
}

pub fn synthesize_tracking_sequence(s: &TrackingScenario) -> Result<TrackingSequence> {
    s.validate()?;
    let t_s_i = s.t_s_i.to_transform();
    let mut rng = rng_for(s.rng_seed, STREAM_LANDMARKS);
    let (lo, hi) = s.landmark_depth_m;
    let t_i_s = t_s_i.inverse();
    let landmarks: Vec<Landmark> = (0..s.landmarks)
        .map(|id| {
            let depth = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let h = s.landmark_half_angle_rad;
            let (ax, ay) = (rng.random_range(-h..h), rng.random_range(-h..h));
            let p_s = Vector3::new(ax.tan() * depth, ay.tan() * depth, depth);
            // Landmarks are placed around the body's initial view.
            let p_w = s.truth_pose(0.0).inverse().apply(&t_i_s.apply(&p_s));
            Landmark { id, p_w }
        })
        .collect();
    let noise = gaussian(s.pixel_noise_sigma);
    let mut frames = Vec::with_capacity(s.frames);
    let mut truth = Vec::with_capacity(s.frames);
    for k in 0..s.frames {
        let t = k as f64 / s.frame_rate_hz;
        let beta = s.truth_angles(t);
        let t_i_w = s.truth_pose(t);
        let t_s_w = t_s_i * t_i_w;
        let t_d_w = s.model.full_chain(&beta)? * t_s_w;
        let mut frame_rng = rng_for(s.rng_seed, k as u64);
        let observe = |cam: &CameraIntrinsics, t: &RigidTransform, rng: &mut ChaCha8Rng| -> Vec<Observation> {
            landmarks
                .iter()
                .filter_map(|l| {
                    let q = t.apply(&l.p_w);
                    if !cam.is_visible(&q) {
                        return None;
                    }
                    let px = cam.project(&q).ok()?;
                    let px = match &noise {
                        Some(n) => PixelPoint::new(px.u + n.sample(rng), px.v + n.sample(rng)),
                        None => px,
                    };
                    Some(Observation::new(l.id, px))
                })
                .collect()
        };
        let obs_static = observe(&s.intrinsics_s, &t_s_w, &mut frame_rng);
        let obs_dynamic = observe(&s.intrinsics_d, &t_d_w, &mut frame_rng);
        frames.push(TrackerFrame {
            timestamp: t,
            landmarks: landmarks.clone(),
            obs_static,
            obs_dynamic,
            truth_angles: Some(beta.clone()),
        });
        truth.push(TrackerEstimate { t_i_w, beta });
    }
    Ok(TrackingSequence {
        landmarks,
        frames,
        truth,
    })
}
