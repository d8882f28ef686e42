//! Reprojection residuals and the three calibration problems: encoderless
//! (kinematics and joint angles), with encoders (kinematics only) and
//! validation (joint angles only).

mod evaluation;

pub use evaluation::{
    align_to_truth, align_validation, evaluate_against_truth, fit_gauge, ErrorStats, Gauge, TruthErrorReport,
};

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, PixelPoint};
use crate::chain::{Chain, ModelIndex};
use crate::error::{Error, Result};
use crate::kinematics::{kinematic_parameter_count, JointState, KinematicModel};
use crate::measurement::{Dataset, MeasurementSet};
use crate::solver::{
    levenberg_marquardt, sum_squares, LeastSquaresProblem, Loss, NormalEquations, SolveOptions, SolveReport,
};

/// Residual rows contributed by one measured point: `[e_d, e_s]`.
pub const ROWS_PER_POINT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    Encoderless,
    WithEncoders,
    Validation,
}

impl CalibrationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationMode::Encoderless => "encoderless",
            CalibrationMode::WithEncoders => "with-encoders",
            CalibrationMode::Validation => "validation",
        }
    }

    fn kinematics_free(self) -> bool {
        !matches!(self, CalibrationMode::Validation)
    }

    fn joints_free(self) -> bool {
        !matches!(self, CalibrationMode::WithEncoders)
    }
}

impl std::str::FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoderless" => Ok(CalibrationMode::Encoderless),
            "with-encoders" | "encoders" => Ok(CalibrationMode::WithEncoders),
            "validation" => Ok(CalibrationMode::Validation),
            other => Err(Error::Config(format!("unknown calibration mode {other:?}"))),
        }
    }
}

/// Length of the optimization vector: `12 + (3+K)L`, `12 + 3L` or `K·L`.
pub fn parameter_count(mode: CalibrationMode, links: usize, sets: usize) -> usize {
    let kin = if mode.kinematics_free() { kinematic_parameter_count(links) } else { 0 };
    let joints = if mode.joints_free() { sets * links } else { 0 };
    kin + joints
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationEstimate {
    pub model: KinematicModel,
    /// One joint state per measurement set.
    pub joint_trajectory: Vec<JointState>,
    pub mode: CalibrationMode,
}

/// Reprojection error summary. Per-point errors are the Euclidean norms of
/// each 2-vector residual, counted once per camera.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReprojectionStats {
    pub mean_px: f64,
    pub std_px: f64,
    /// Number of 2-vector residuals (two per measured point).
    pub n_points: usize,
    /// Root mean square over individual pixel coordinates.
    pub rms_px: f64,
    pub per_set_mean_px: Vec<f64>,
    pub per_set_rms_px: Vec<f64>,
}

impl ReprojectionStats {
    /// Statistics of a stacked residual laid out as consecutive 2-vectors,
    /// with `set_rows[i]` rows belonging to set `i`.
    pub fn from_residuals(residuals: &[f64], set_rows: &[usize]) -> Self {
        let norms: Vec<f64> = residuals.chunks_exact(2).map(|c| c[0].hypot(c[1])).collect();
        let n = norms.len();
        if n == 0 {
            return ReprojectionStats::default();
        }
        let mean = norms.iter().sum::<f64>() / n as f64;
        let var = norms.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
        let mut per_set_mean_px = Vec::with_capacity(set_rows.len());
        let mut per_set_rms_px = Vec::with_capacity(set_rows.len());
        let mut start = 0;
        for rows in set_rows {
            let block = &residuals[start..start + rows];
            let set_norms = &norms[start / 2..(start + rows) / 2];
            per_set_mean_px.push(set_norms.iter().sum::<f64>() / set_norms.len().max(1) as f64);
            per_set_rms_px.push((sum_squares(block) / (*rows).max(1) as f64).sqrt());
            start += rows;
        }
        ReprojectionStats {
            mean_px: mean,
            std_px: var.sqrt(),
            n_points: n,
            rms_px: (sum_squares(residuals) / residuals.len() as f64).sqrt(),
            per_set_mean_px,
            per_set_rms_px,
        }
    }

    /// Mean of the per-set coordinate RMS values.
    pub fn mean_set_rms_px(&self) -> f64 {
        mean(&self.per_set_rms_px)
    }

    /// Spread of the per-set coordinate RMS values.
    pub fn std_set_rms_px(&self) -> f64 {
        std_dev(&self.per_set_rms_px)
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub(crate) fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub estimate: CalibrationEstimate,
    pub report: SolveReport,
    pub stats: ReprojectionStats,
}

/// `e_d = z_d − ψ_d(T^{d:s} p_s)`.
pub fn residual_dynamic(
    model: &KinematicModel,
    beta: &JointState,
    intrinsics_d: &CameraIntrinsics,
    p_s: &Vector3<f64>,
    z_d: &PixelPoint,
) -> Result<Vector2<f64>> {
    let t = model.full_chain(beta)?;
    Ok(*z_d - intrinsics_d.project(&t.apply(p_s))?)
}

/// `e_s = z_s − ψ_s((T^{d:s})⁻¹ p_d)`.
pub fn residual_static(
    model: &KinematicModel,
    beta: &JointState,
    intrinsics_s: &CameraIntrinsics,
    p_d: &Vector3<f64>,
    z_s: &PixelPoint,
) -> Result<Vector2<f64>> {
    let t = model.full_chain(beta)?;
    Ok(*z_s - intrinsics_s.project(&t.inverse().apply(p_d))?)
}

fn set_residuals_into(
    dataset: &Dataset,
    set: &MeasurementSet,
    model: &KinematicModel,
    beta: &JointState,
    out: &mut [f64],
) -> Result<()> {
    let t = model.full_chain(beta)?;
    let inv = t.inverse();
    for (p, rows) in set.points.iter().zip(out.chunks_exact_mut(ROWS_PER_POINT)) {
        let e_d = p.q_d - dataset.intrinsics_d.project(&t.apply(&p.p_s))?;
        let e_s = p.q_s - dataset.intrinsics_s.project(&inv.apply(&p.p_d))?;
        rows.copy_from_slice(&[e_d.x, e_d.y, e_s.x, e_s.y]);
    }
    Ok(())
}

fn check_trajectory(dataset: &Dataset, model: &KinematicModel, angles: &[JointState]) -> Result<()> {
    if angles.len() != dataset.sets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} joint states for {} measurement sets",
            angles.len(),
            dataset.sets.len()
        )));
    }
    for beta in angles {
        if beta.len() != model.num_links() {
            return Err(Error::DimensionMismatch {
                expected: model.num_links(),
                found: beta.len(),
            });
        }
    }
    Ok(())
}

/// The residual vector optimized by every calibration mode: for each set in
/// order and each point in id order, `[e_d.u, e_d.v, e_s.u, e_s.v]`.
pub fn stacked_residuals(dataset: &Dataset, model: &KinematicModel, angles: &[JointState]) -> Result<DVector<f64>> {
    check_trajectory(dataset, model, angles)?;
    let mut r = DVector::zeros(ROWS_PER_POINT * dataset.num_points());
    let mut start = 0;
    for (set, beta) in dataset.sets.iter().zip(angles) {
        let rows = ROWS_PER_POINT * set.len();
        set_residuals_into(dataset, set, model, beta, &mut r.as_mut_slice()[start..start + rows])?;
        start += rows;
    }
    Ok(r)
}

/// Total squared reprojection error `Λ` (no ½ factor).
pub fn total_cost(dataset: &Dataset, estimate: &CalibrationEstimate) -> Result<f64> {
    let r = stacked_residuals(dataset, &estimate.model, &estimate.joint_trajectory)?;
    Ok(sum_squares(r.as_slice()))
}

pub fn reprojection_stats(dataset: &Dataset, model: &KinematicModel, angles: &[JointState]) -> Result<ReprojectionStats> {
    let r = stacked_residuals(dataset, model, angles)?;
    let rows: Vec<usize> = dataset.sets.iter().map(|s| ROWS_PER_POINT * s.len()).collect();
    Ok(ReprojectionStats::from_residuals(r.as_slice(), &rows))
}

/// Per-set linearization: residual rows and the dense block of the
/// Jacobian over the set's free columns.
struct SetBlock {
    residuals: Vec<f64>,
    jacobian: DMatrix<f64>,
    columns: Vec<usize>,
}

/// Calibration least-squares problem in one of the three modes.
///
/// Parameter layout: `[kinematics (12+3L), β_1, …, β_K]` with the fixed
/// blocks omitted.
pub struct CalibrationProblem<'a> {
    dataset: &'a Dataset,
    mode: CalibrationMode,
    links: usize,
    fixed_model: KinematicModel,
    fixed_angles: Vec<JointState>,
    row_offsets: Vec<usize>,
    parallel: bool,
}

impl<'a> CalibrationProblem<'a> {
    /// `model` and `angles` supply the values of whichever blocks are fixed
    /// in `mode`, and the initial point via [`Self::pack`].
    pub fn new(
        dataset: &'a Dataset,
        mode: CalibrationMode,
        model: &KinematicModel,
        angles: &[JointState],
        parallel: bool,
    ) -> Result<Self> {
        model.validate()?;
        check_trajectory(dataset, model, angles)?;
        let mut row_offsets = Vec::with_capacity(dataset.sets.len() + 1);
        let mut acc = 0;
        row_offsets.push(0);
        for set in &dataset.sets {
            acc += ROWS_PER_POINT * set.len();
            row_offsets.push(acc);
        }
        Ok(CalibrationProblem {
            dataset,
            mode,
            links: model.num_links(),
            fixed_model: model.clone(),
            fixed_angles: angles.to_vec(),
            row_offsets,
            parallel,
        })
    }

    pub fn mode(&self) -> CalibrationMode {
        self.mode
    }

    fn kin_len(&self) -> usize {
        if self.mode.kinematics_free() {
            kinematic_parameter_count(self.links)
        } else {
            0
        }
    }

    pub fn pack(&self, model: &KinematicModel, angles: &[JointState]) -> DVector<f64> {
        let mut x = Vec::with_capacity(self.num_params());
        if self.mode.kinematics_free() {
            x.extend(model.pack());
        }
        if self.mode.joints_free() {
            for beta in angles {
                x.extend_from_slice(beta.angles());
            }
        }
        DVector::from_vec(x)
    }

    pub fn unpack(&self, x: &DVector<f64>) -> Result<(KinematicModel, Vec<JointState>)> {
        if x.len() != self.num_params() {
            return Err(Error::ParameterLength {
                expected: self.num_params(),
                found: x.len(),
            });
        }
        let kin = self.kin_len();
        let model = if self.mode.kinematics_free() {
            KinematicModel::unpack(&x.as_slice()[..kin], self.links)?
        } else {
            self.fixed_model.clone()
        };
        let angles = if self.mode.joints_free() {
            x.as_slice()[kin..]
                .chunks_exact(self.links)
                .map(|c| JointState::new(c.to_vec()))
                .collect()
        } else {
            self.fixed_angles.clone()
        };
        Ok((model, angles))
    }

    fn map_sets<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        let k = self.dataset.sets.len();
        if self.parallel {
            (0..k).into_par_iter().map(f).collect()
        } else {
            (0..k).map(f).collect()
        }
    }

    fn set_block(&self, i: usize, model: &KinematicModel, beta: &JointState) -> Result<SetBlock> {
        let set = &self.dataset.sets[i];
        let kin = self.kin_len();
        let mut columns: Vec<usize> = (0..kin).collect();
        let joints_local = if self.mode.joints_free() {
            columns.extend((0..self.links).map(|j| kin + i * self.links + j));
            Some(kin)
        } else {
            None
        };
        let index = ModelIndex {
            kinematics: self.mode.kinematics_free().then_some(0),
            joints: joints_local,
        };
        let mut chain = Chain::new();
        chain.push_model(model, beta, index);
        let lin = chain.linearize();
        let rows = ROWS_PER_POINT * set.len();
        let mut residuals = vec![0.0; rows];
        let mut jacobian = DMatrix::zeros(rows, columns.len());
        let mut derivs = Vec::with_capacity(columns.len());
        let (cam_s, cam_d) = (&self.dataset.intrinsics_s, &self.dataset.intrinsics_d);
        for (j, p) in set.points.iter().enumerate() {
            let row = ROWS_PER_POINT * j;
            let y = lin.apply_with_derivatives(&p.p_s, &mut derivs);
            let (px, jp) = cam_d.project_with_jacobian(&y)?;
            let e = p.q_d - px;
            residuals[row] = e.x;
            residuals[row + 1] = e.y;
            for (k, d) in &derivs {
                let g = jp * d;
                jacobian[(row, *k)] -= g.x;
                jacobian[(row + 1, *k)] -= g.y;
            }
            let q = lin.apply_inverse_with_derivatives(&p.p_d, &mut derivs);
            let (px, jp) = cam_s.project_with_jacobian(&q)?;
            let e = p.q_s - px;
            residuals[row + 2] = e.x;
            residuals[row + 3] = e.y;
            for (k, d) in &derivs {
                let g = jp * d;
                jacobian[(row + 2, *k)] -= g.x;
                jacobian[(row + 3, *k)] -= g.y;
            }
        }
        Ok(SetBlock {
            residuals,
            jacobian,
            columns,
        })
    }

    fn blocks(&self, x: &DVector<f64>) -> Result<Vec<SetBlock>> {
        let (model, angles) = self.unpack(x)?;
        self.map_sets(|i| self.set_block(i, &model, &angles[i]))
    }
}

impl LeastSquaresProblem for CalibrationProblem<'_> {
    fn num_params(&self) -> usize {
        parameter_count(self.mode, self.links, self.dataset.sets.len())
    }

    fn num_residuals(&self) -> usize {
        *self.row_offsets.last().unwrap_or(&0)
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (model, angles) = self.unpack(x)?;
        let blocks = self.map_sets(|i| {
            let set = &self.dataset.sets[i];
            let mut out = vec![0.0; ROWS_PER_POINT * set.len()];
            set_residuals_into(self.dataset, set, &model, &angles[i], &mut out)?;
            Ok(out)
        })?;
        Ok(DVector::from_vec(blocks.concat()))
    }

    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let blocks = self.blocks(x)?;
        let mut r = DVector::zeros(self.num_residuals());
        let mut jac = DMatrix::zeros(self.num_residuals(), self.num_params());
        for (i, b) in blocks.iter().enumerate() {
            let start = self.row_offsets[i];
            for (row, value) in b.residuals.iter().enumerate() {
                r[start + row] = *value;
                for (local, global) in b.columns.iter().enumerate() {
                    jac[(start + row, *global)] = b.jacobian[(row, local)];
                }
            }
        }
        Ok((r, jac))
    }

    fn normal_equations(&self, x: &DVector<f64>, loss: &Loss) -> Result<NormalEquations> {
        let n = self.num_params();
        let (model, angles) = self.unpack(x)?;
        let local = self.map_sets(|i| {
            let mut b = self.set_block(i, &model, &angles[i])?;
            let mut weighted = b.residuals.clone();
            if !matches!(loss, Loss::Squared) {
                for (row, r) in b.residuals.iter().enumerate() {
                    let w = loss.weight(*r).sqrt();
                    weighted[row] *= w;
                    b.jacobian.row_mut(row).scale_mut(w);
                }
            }
            let jtj = b.jacobian.tr_mul(&b.jacobian);
            let jtr = b.jacobian.tr_mul(&DVector::from_column_slice(&weighted));
            Ok((b.columns, jtj, jtr, b.residuals))
        })?;
        let mut jtj = DMatrix::zeros(n, n);
        let mut jtr = DVector::zeros(n);
        let mut residuals = Vec::with_capacity(self.num_residuals());
        for (columns, h, g, r) in local {
            for (a, ga) in columns.iter().enumerate() {
                jtr[*ga] += g[a];
                for (b, gb) in columns.iter().enumerate() {
                    jtj[(*ga, *gb)] += h[(a, b)];
                }
            }
            residuals.extend(r);
        }
        Ok(NormalEquations {
            jtj,
            jtr,
            residuals: DVector::from_vec(residuals),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationOptions {
    pub solve: SolveOptions,
    /// Minimum number of measurement sets before calibration is attempted.
    pub min_sets: usize,
    /// Run below `min_sets` with a warning instead of failing.
    pub force: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            solve: SolveOptions::default(),
            min_sets: 10,
            force: false,
        }
    }
}

impl CalibrationOptions {
    pub fn serial(self) -> Self {
        CalibrationOptions {
            solve: self.solve.serial(),
            ..self
        }
    }
}

fn check_excitation(dataset: &Dataset, opts: &CalibrationOptions) -> Result<()> {
    dataset.validate()?;
    let k = dataset.sets.len();
    if k < opts.min_sets {
        if !opts.force {
            return Err(Error::InsufficientData(format!(
                "{k} measurement sets, at least {} required",
                opts.min_sets
            )));
        }
        log::warn!("calibrating with only {k} measurement sets (minimum {})", opts.min_sets);
    }
    Ok(())
}

fn run(
    dataset: &Dataset,
    mode: CalibrationMode,
    model: &KinematicModel,
    angles: &[JointState],
    opts: &CalibrationOptions,
) -> Result<CalibrationResult> {
    let problem = CalibrationProblem::new(dataset, mode, model, angles, opts.solve.parallel)?;
    let x0 = problem.pack(model, angles);
    log::info!(
        "{} calibration: {} parameters, {} residuals",
        mode.as_str(),
        problem.num_params(),
        problem.num_residuals()
    );
    let report = levenberg_marquardt(&problem, x0, &opts.solve)?;
    let (model, angles) = problem.unpack(&report.params)?;
    let stats = reprojection_stats(dataset, &model, &angles)?;
    log::info!(
        "{}: {} iterations, cost {:.6e} -> {:.6e} ({})",
        mode.as_str(),
        report.iterations,
        report.initial_cost,
        report.final_cost,
        report.termination.as_str()
    );
    let result = CalibrationResult {
        estimate: CalibrationEstimate {
            model,
            joint_trajectory: angles,
            mode,
        },
        report,
        stats,
    };
    if !result.report.termination.converged() {
        return Err(Error::CalibrationNotConverged(Box::new(result)));
    }
    Ok(result)
}

/// Jointly estimates the kinematics and every set's joint angles.
pub fn calibrate_encoderless(
    dataset: &Dataset,
    init_model: &KinematicModel,
    init_angles: &[JointState],
    opts: &CalibrationOptions,
) -> Result<CalibrationResult> {
    check_excitation(dataset, opts)?;
    run(dataset, CalibrationMode::Encoderless, init_model, init_angles, opts)
}

/// Estimates the kinematics with joint angles fixed at the encoder readings.
pub fn calibrate_with_encoders(
    dataset: &Dataset,
    init_model: &KinematicModel,
    opts: &CalibrationOptions,
) -> Result<CalibrationResult> {
    check_excitation(dataset, opts)?;
    let angles = encoder_angles(dataset)?;
    run(dataset, CalibrationMode::WithEncoders, init_model, &angles, opts)
}

/// Estimates only the joint angles with the kinematics frozen.
pub fn validate(
    dataset: &Dataset,
    frozen_model: &KinematicModel,
    init_angles: &[JointState],
    opts: &CalibrationOptions,
) -> Result<CalibrationResult> {
    check_excitation(dataset, opts)?;
    run(dataset, CalibrationMode::Validation, frozen_model, init_angles, opts)
}

/// The encoder readings of every set.
pub fn encoder_angles(dataset: &Dataset) -> Result<Vec<JointState>> {
    dataset
        .sets
        .iter()
        .enumerate()
        .map(|(i, s)| s.known_angles.clone().ok_or(Error::MissingEncoderAngles { set: i }))
        .collect()
}
