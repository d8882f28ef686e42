//! File formats: JSON datasets, trajectories, calibration results and
//! tracking sequences, TOML configurations, and CSV tables.
//!
//! Every JSON document carries a `schema_version`. Angles are radians,
//! lengths meters, pixels pixels. Writes go to a temporary file in the
//! destination directory which is then renamed over the target.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationEstimate, CalibrationMode, CalibrationOptions, CalibrationResult, ReprojectionStats};
use crate::camera::{CameraIntrinsics, PixelPoint};
use crate::error::{Error, Result};
use crate::geometry::Pose6;
use crate::kinematics::{DhLink, JointState, KinematicModel};
use crate::measurement::{Dataset, FiducialTarget, MeasuredPoint, MeasurementSet, Observation};
use crate::simulator::{Rejection, StudyTables};
use crate::solver::{SolveOptions, SolveReport, Termination};
use crate::tracker::{AngleTrackReport, FrameStatus, Landmark, TrackerEstimate, TrackerFrame};

pub const SCHEMA_VERSION: u32 = 1;

/// Writes `bytes` to `path` atomically, creating parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

fn from_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| parse_error(path, e.to_string()))
}

fn check_version(found: u32, path: &Path) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(parse_error(
            path,
            format!("unsupported schema_version {found}, expected {SCHEMA_VERSION}"),
        ));
    }
    Ok(())
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value).as_bytes())
}

/// Parses a TOML document, rejecting unknown keys. Errors carry the line.
pub fn parse_toml<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| parse_error(path, e.to_string()))
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_toml(&read_text(path)?, path)
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}

/// Solver settings for the calibrate, validate and track commands.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub calibration: CalibrationOptions,
    pub tracker: SolveOptions,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointDto {
    id: usize,
    q_s_px: [f64; 2],
    q_d_px: [f64; 2],
    p_s_m: [f64; 3],
    p_d_m: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    known_angles_rad: Option<Vec<f64>>,
    points: Vec<PointDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetDto {
    schema_version: u32,
    intrinsics_s: CameraIntrinsics,
    intrinsics_d: CameraIntrinsics,
    target: FiducialTarget,
    sets: Vec<SetDto>,
}

fn px(p: PixelPoint) -> [f64; 2] {
    [p.u, p.v]
}

fn v3(p: &Vector3<f64>) -> [f64; 3] {
    [p.x, p.y, p.z]
}

pub fn dataset_to_json(dataset: &Dataset) -> String {
    to_json(&DatasetDto {
        schema_version: SCHEMA_VERSION,
        intrinsics_s: dataset.intrinsics_s,
        intrinsics_d: dataset.intrinsics_d,
        target: dataset.target,
        sets: dataset
            .sets
            .iter()
            .map(|s| SetDto {
                known_angles_rad: s.known_angles.as_ref().map(|b| b.angles().to_vec()),
                points: s
                    .points
                    .iter()
                    .map(|p| PointDto {
                        id: p.id,
                        q_s_px: px(p.q_s),
                        q_d_px: px(p.q_d),
                        p_s_m: v3(&p.p_s),
                        p_d_m: v3(&p.p_d),
                    })
                    .collect(),
            })
            .collect(),
    })
}

pub fn dataset_from_json(text: &str, path: &Path) -> Result<Dataset> {
    let dto: DatasetDto = from_json(text, path)?;
    check_version(dto.schema_version, path)?;
    let dataset = Dataset {
        intrinsics_s: dto.intrinsics_s,
        intrinsics_d: dto.intrinsics_d,
        target: dto.target,
        sets: dto
            .sets
            .into_iter()
            .map(|s| MeasurementSet {
                known_angles: s.known_angles_rad.map(JointState::new),
                points: s
                    .points
                    .into_iter()
                    .map(|p| MeasuredPoint {
                        id: p.id,
                        q_s: PixelPoint::new(p.q_s_px[0], p.q_s_px[1]),
                        q_d: PixelPoint::new(p.q_d_px[0], p.q_d_px[1]),
                        p_s: Vector3::from(p.p_s_m),
                        p_d: Vector3::from(p.p_d_m),
                    })
                    .collect(),
            })
            .collect(),
    };
    dataset.validate().map_err(|e| parse_error(path, e.to_string()))?;
    Ok(dataset)
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_atomic(path, dataset_to_json(dataset).as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_json(&read_text(path)?, path)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryDto {
    schema_version: u32,
    #[serde(rename = "L")]
    links: usize,
    tau_d: [f64; 6],
    dh: Vec<[f64; 3]>,
    tau_s: [f64; 6],
    joint_angles_rad: Vec<Vec<f64>>,
}

fn model_from_parts(path: &Path, links: usize, tau_d: [f64; 6], dh: &[[f64; 3]], tau_s: [f64; 6]) -> Result<KinematicModel> {
    if dh.len() != links {
        return Err(parse_error(path, format!("L = {links} but {} DH rows", dh.len())));
    }
    let model = KinematicModel {
        tau_s: Pose6::from_slice(&tau_s)?,
        links: dh.iter().map(|r| DhLink::new(r[0], r[1], r[2])).collect(),
        tau_d: Pose6::from_slice(&tau_d)?,
    };
    model.validate().map_err(|e| parse_error(path, e.to_string()))?;
    Ok(model)
}

fn angles_from_rows(path: &Path, links: usize, rows: Vec<Vec<f64>>) -> Result<Vec<JointState>> {
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != links {
                return Err(parse_error(path, format!("joint_angles_rad[{i}] has {} entries, expected {links}", r.len())));
            }
            Ok(JointState::new(r))
        })
        .collect()
}

/// A kinematic model with one joint state per measurement set, used for
/// ground truth and initial guesses.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTrajectory {
    pub model: KinematicModel,
    pub joint_angles: Vec<JointState>,
}

pub fn model_trajectory_to_json(m: &ModelTrajectory) -> String {
    to_json(&TrajectoryDto {
        schema_version: SCHEMA_VERSION,
        links: m.model.num_links(),
        tau_d: m.model.tau_d.to_array(),
        dh: m.model.links.iter().map(|l| [l.d, l.a, l.alpha]).collect(),
        tau_s: m.model.tau_s.to_array(),
        joint_angles_rad: m.joint_angles.iter().map(|b| b.angles().to_vec()).collect(),
    })
}

pub fn model_trajectory_from_json(text: &str, path: &Path) -> Result<ModelTrajectory> {
    let dto: TrajectoryDto = from_json(text, path)?;
    check_version(dto.schema_version, path)?;
    Ok(ModelTrajectory {
        model: model_from_parts(path, dto.links, dto.tau_d, &dto.dh, dto.tau_s)?,
        joint_angles: angles_from_rows(path, dto.links, dto.joint_angles_rad)?,
    })
}

pub fn save_model_trajectory(path: &Path, m: &ModelTrajectory) -> Result<()> {
    write_atomic(path, model_trajectory_to_json(m).as_bytes())
}

pub fn load_model_trajectory(path: &Path) -> Result<ModelTrajectory> {
    model_trajectory_from_json(&read_text(path)?, path)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RejectionDto {
    index: usize,
    angles_rad: Vec<f64>,
    reason: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RejectionsDto {
    schema_version: u32,
    rejections: Vec<RejectionDto>,
}

pub fn save_rejections(path: &Path, rejections: &[Rejection]) -> Result<()> {
    save_json(
        path,
        &RejectionsDto {
            schema_version: SCHEMA_VERSION,
            rejections: rejections
                .iter()
                .map(|r| RejectionDto {
                    index: r.index,
                    angles_rad: r.angles.angles().to_vec(),
                    reason: r.reason.clone(),
                })
                .collect(),
        },
    )
}

pub fn load_rejections(path: &Path) -> Result<Vec<Rejection>> {
    let dto: RejectionsDto = from_json(&read_text(path)?, path)?;
    check_version(dto.schema_version, path)?;
    Ok(dto
        .rejections
        .into_iter()
        .map(|r| Rejection {
            index: r.index,
            angles: JointState::new(r.angles_rad),
            reason: r.reason,
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsDto {
    mean_px: f64,
    std_px: f64,
    n_points: usize,
    rms_px: f64,
    per_set_mean_px: Vec<f64>,
    per_set_rms_px: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverDto {
    iterations: usize,
    initial_cost: f64,
    final_cost: f64,
    termination: Termination,
    max_gradient: f64,
    cost_trace: Vec<f64>,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultDto {
    schema_version: u32,
    mode: CalibrationMode,
    #[serde(rename = "L")]
    links: usize,
    tau_d: [f64; 6],
    dh: Vec<[f64; 3]>,
    tau_s: [f64; 6],
    joint_angles_rad: Vec<Vec<f64>>,
    stats: StatsDto,
    solver: SolverDto,
}

pub fn result_to_json(result: &CalibrationResult) -> String {
    let m = &result.estimate.model;
    let s = &result.stats;
    let r = &result.report;
    to_json(&ResultDto {
        schema_version: SCHEMA_VERSION,
        mode: result.estimate.mode,
        links: m.num_links(),
        tau_d: m.tau_d.to_array(),
        dh: m.links.iter().map(|l| [l.d, l.a, l.alpha]).collect(),
        tau_s: m.tau_s.to_array(),
        joint_angles_rad: result.estimate.joint_trajectory.iter().map(|b| b.angles().to_vec()).collect(),
        stats: StatsDto {
            mean_px: s.mean_px,
            std_px: s.std_px,
            n_points: s.n_points,
            rms_px: s.rms_px,
            per_set_mean_px: s.per_set_mean_px.clone(),
            per_set_rms_px: s.per_set_rms_px.clone(),
        },
        solver: SolverDto {
            iterations: r.iterations,
            initial_cost: r.initial_cost,
            final_cost: r.final_cost,
            termination: r.termination,
            max_gradient: r.max_gradient,
            cost_trace: r.cost_trace.clone(),
            params: r.params.as_slice().to_vec(),
        },
    })
}

pub fn result_from_json(text: &str, path: &Path) -> Result<CalibrationResult> {
    let dto: ResultDto = from_json(text, path)?;
    check_version(dto.schema_version, path)?;
    let model = model_from_parts(path, dto.links, dto.tau_d, &dto.dh, dto.tau_s)?;
    let joint_trajectory = angles_from_rows(path, dto.links, dto.joint_angles_rad)?;
    Ok(CalibrationResult {
        estimate: CalibrationEstimate {
            model,
            joint_trajectory,
            mode: dto.mode,
        },
        report: SolveReport {
            params: DVector::from_vec(dto.solver.params),
            initial_cost: dto.solver.initial_cost,
            final_cost: dto.solver.final_cost,
            iterations: dto.solver.iterations,
            termination: dto.solver.termination,
            cost_trace: dto.solver.cost_trace,
            max_gradient: dto.solver.max_gradient,
        },
        stats: ReprojectionStats {
            mean_px: dto.stats.mean_px,
            std_px: dto.stats.std_px,
            n_points: dto.stats.n_points,
            rms_px: dto.stats.rms_px,
            per_set_mean_px: dto.stats.per_set_mean_px,
            per_set_rms_px: dto.stats.per_set_rms_px,
        },
    })
}

pub fn save_result(path: &Path, result: &CalibrationResult) -> Result<()> {
    write_atomic(path, result_to_json(result).as_bytes())
}

pub fn load_result(path: &Path) -> Result<CalibrationResult> {
    result_from_json(&read_text(path)?, path)
}

/// Per-set reprojection CSV: `set,n_points,mean_reproj_px,rms_reproj_px`.
pub fn stats_csv(stats: &ReprojectionStats, points_per_set: &[usize]) -> String {
    let mut out = String::from("set,n_points,mean_reproj_px,rms_reproj_px\n");
    for (i, ((m, r), n)) in stats
        .per_set_mean_px
        .iter()
        .zip(&stats.per_set_rms_px)
        .zip(points_per_set)
        .enumerate()
    {
        writeln!(out, "{i},{n},{m},{r}").unwrap();
    }
    out
}

pub fn table1_csv(tables: &StudyTables) -> String {
    let mut out = String::from("dataset,n_images,mean_reproj_px,std_reproj_px\n");
    for r in &tables.table1 {
        writeln!(out, "{},{},{},{}", r.dataset, r.n_images, r.mean_reproj_px, r.std_reproj_px).unwrap();
    }
    out
}

pub fn table2_csv(tables: &StudyTables) -> String {
    let mut out = String::from("joint,mean_err_rad,std_err_rad\n");
    for r in &tables.table2 {
        writeln!(out, "{},{},{}", r.joint, r.mean_err_rad, r.std_err_rad).unwrap();
    }
    out
}

pub fn table3_csv(tables: &StudyTables) -> String {
    let mut out = String::from("param_class,mean_err,std_err,unit\n");
    for r in &tables.table3 {
        writeln!(out, "{},{},{},{}", r.param_class, r.mean_err, r.std_err, r.unit).unwrap();
    }
    out
}

pub fn summary_text(tables: &StudyTables) -> String {
    let mut out = String::from("Reprojection error (per-set coordinate RMS)\n");
    for r in &tables.table1 {
        writeln!(
            out,
            "  {:<12} {:>3} images  mean {:.4} px  std {:.4} px",
            r.dataset, r.n_images, r.mean_reproj_px, r.std_reproj_px
        )
        .unwrap();
    }
    out.push_str("Joint angle error\n");
    for r in &tables.table2 {
        writeln!(out, "  {:<34} mean {:.3e} rad  std {:.3e} rad", r.joint, r.mean_err_rad, r.std_err_rad).unwrap();
    }
    out.push_str("Kinematic parameter error\n");
    for r in &tables.table3 {
        writeln!(
            out,
            "  {:<26} mean {:.3e} {u}  std {:.3e} {u}",
            r.param_class,
            r.mean_err,
            r.std_err,
            u = r.unit
        )
        .unwrap();
    }
    out
}

pub const TABLE_FILES: [&str; 4] = ["table1.csv", "table2.csv", "table3.csv", "summary.txt"];

/// Writes the three tables and the summary into `dir`.
pub fn write_tables(dir: &Path, tables: &StudyTables) -> Result<Vec<PathBuf>> {
    let contents = [table1_csv(tables), table2_csv(tables), table3_csv(tables), summary_text(tables)];
    let mut written = Vec::new();
    for (name, text) in TABLE_FILES.iter().zip(contents) {
        let path = dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LandmarkDto {
    id: usize,
    p_w_m: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationDto {
    id: usize,
    px: [f64; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateDto {
    t_i_w: [f64; 6],
    beta_rad: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameDto {
    timestamp_s: f64,
    obs_static: Vec<ObservationDto>,
    obs_dynamic: Vec<ObservationDto>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth_angles_rad: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceDto {
    schema_version: u32,
    intrinsics_s: CameraIntrinsics,
    intrinsics_d: CameraIntrinsics,
    #[serde(default)]
    t_s_i: [f64; 6],
    landmarks: Vec<LandmarkDto>,
    initial: EstimateDto,
    frames: Vec<FrameDto>,
}

/// Everything the track command needs apart from the calibrated chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFile {
    pub intrinsics_s: CameraIntrinsics,
    pub intrinsics_d: CameraIntrinsics,
    pub t_s_i: Pose6,
    pub landmarks: Vec<Landmark>,
    pub initial: TrackerEstimate,
    pub frames: Vec<TrackerFrame>,
}

fn observations(obs: &[Observation]) -> Vec<ObservationDto> {
    obs.iter().map(|o| ObservationDto { id: o.id, px: px(o.px) }).collect()
}

fn from_observations(obs: Vec<ObservationDto>) -> Vec<Observation> {
    obs.into_iter().map(|o| Observation::new(o.id, PixelPoint::new(o.px[0], o.px[1]))).collect()
}

pub fn sequence_to_json(seq: &SequenceFile) -> Result<String> {
    Ok(to_json(&SequenceDto {
        schema_version: SCHEMA_VERSION,
        intrinsics_s: seq.intrinsics_s,
        intrinsics_d: seq.intrinsics_d,
        t_s_i: seq.t_s_i.to_array(),
        landmarks: seq.landmarks.iter().map(|l| LandmarkDto { id: l.id, p_w_m: v3(&l.p_w) }).collect(),
        initial: EstimateDto {
            t_i_w: seq.initial.t_i_w.to_pose()?.to_array(),
            beta_rad: seq.initial.beta.angles().to_vec(),
        },
        frames: seq
            .frames
            .iter()
            .map(|f| FrameDto {
                timestamp_s: f.timestamp,
                obs_static: observations(&f.obs_static),
                obs_dynamic: observations(&f.obs_dynamic),
                truth_angles_rad: f.truth_angles.as_ref().map(|b| b.angles().to_vec()),
            })
            .collect(),
    }))
}

pub fn sequence_from_json(text: &str, path: &Path) -> Result<SequenceFile> {
    let dto: SequenceDto = from_json(text, path)?;
    check_version(dto.schema_version, path)?;
    let landmarks: Vec<Landmark> = dto
        .landmarks
        .into_iter()
        .map(|l| Landmark {
            id: l.id,
            p_w: Vector3::from(l.p_w_m),
        })
        .collect();
    let frames = dto
        .frames
        .into_iter()
        .map(|f| TrackerFrame {
            timestamp: f.timestamp_s,
            landmarks: landmarks.clone(),
            obs_static: from_observations(f.obs_static),
            obs_dynamic: from_observations(f.obs_dynamic),
            truth_angles: f.truth_angles_rad.map(JointState::new),
        })
        .collect();
    Ok(SequenceFile {
        intrinsics_s: dto.intrinsics_s,
        intrinsics_d: dto.intrinsics_d,
        t_s_i: Pose6::from_slice(&dto.t_s_i)?,
        landmarks,
        initial: TrackerEstimate::new(
            Pose6::from_slice(&dto.initial.t_i_w)?.to_transform(),
            JointState::new(dto.initial.beta_rad),
        ),
        frames,
    })
}

pub fn save_sequence(path: &Path, seq: &SequenceFile) -> Result<()> {
    write_atomic(path, sequence_to_json(seq)?.as_bytes())
}

pub fn load_sequence(path: &Path) -> Result<SequenceFile> {
    sequence_from_json(&read_text(path)?, path)
}

/// Per-frame CSV: `timestamp,rx,ry,rz,tx,ty,tz,beta_1..beta_L,status`,
/// pose of `T^{I:W}`.
pub fn track_csv(frames: &[TrackerFrame], estimates: &[TrackerEstimate], report: &AngleTrackReport) -> Result<String> {
    let links = estimates.first().map_or(0, |e| e.beta.len());
    let mut out = String::from("timestamp,rx,ry,rz,tx,ty,tz");
    for j in 1..=links {
        write!(out, ",beta_{j}").unwrap();
    }
    out.push_str(",status\n");
    for ((f, e), s) in frames.iter().zip(estimates).zip(&report.status) {
        write!(out, "{}", f.timestamp).unwrap();
        for v in e.t_i_w.to_pose()?.to_array() {
            write!(out, ",{v}").unwrap();
        }
        for b in e.beta.angles() {
            write!(out, ",{b}").unwrap();
        }
        let status = match s {
            FrameStatus::Ok => "ok",
            FrameStatus::Failed => "failed",
        };
        writeln!(out, ",{status}").unwrap();
    }
    Ok(out)
}

/// `joint,rmse_rad` rows, or only the header without ground truth.
pub fn rmse_csv(report: &AngleTrackReport) -> String {
    let mut out = String::from("joint,rmse_rad\n");
    for (j, r) in report.per_joint_rmse.iter().flatten().enumerate() {
        writeln!(out, "joint_{},{r}", j + 1).unwrap();
    }
    out
}
