//! Fiducial target, planar PnP and construction of measurement sets.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, PixelPoint};
use crate::chain::Chain;
use crate::error::{Error, Result};
use crate::geometry::{Pose6, RigidTransform};
use crate::kinematics::JointState;
use crate::solver::{levenberg_marquardt, LeastSquaresProblem, SolveOptions, SolveReport};

/// Chessboard-style planar grid of `rows × cols` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiducialTarget {
    pub rows: usize,
    pub cols: usize,
    #[serde(rename = "spacing_m", default = "default_spacing")]
    pub spacing: f64,
}

fn default_spacing() -> f64 {
    FiducialTarget::DEFAULT_SPACING
}

impl Default for FiducialTarget {
    /// The 7×9 interior-corner board with 2.5 cm squares.
    fn default() -> Self {
        FiducialTarget {
            rows: 7,
            cols: 9,
            spacing: Self::DEFAULT_SPACING,
        }
    }
}

impl FiducialTarget {
    pub const DEFAULT_SPACING: f64 = 0.025;

    pub fn new(rows: usize, cols: usize, spacing: f64) -> Result<Self> {
        let t = FiducialTarget { rows, cols, spacing };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::InvalidTarget(format!(
                "grid must be at least 2x2, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidTarget(format!("spacing must be positive, got {}", self.spacing)));
        }
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.rows * self.cols
    }

    /// Position of point `id` in the target frame, row-major.
    pub fn point(&self, id: usize) -> Result<Vector3<f64>> {
        if id >= self.num_points() {
            return Err(Error::UnknownPointId(id));
        }
        let (r, c) = (id / self.cols, id % self.cols);
        Ok(Vector3::new(c as f64 * self.spacing, r as f64 * self.spacing, 0.0))
    }

    /// Centroid of the grid in the target frame.
    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            (self.cols - 1) as f64 * self.spacing / 2.0,
            (self.rows - 1) as f64 * self.spacing / 2.0,
            0.0,
        )
    }
}

/// All grid points: point `(r, c)` sits at `(c·spacing, r·spacing, 0)`.
pub fn target_points(target: &FiducialTarget) -> Vec<Vector3<f64>> {
    (0..target.num_points())
        .map(|id| Vector3::new((id % target.cols) as f64 * target.spacing, (id / target.cols) as f64 * target.spacing, 0.0))
        .collect()
}

/// A detected target point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub id: usize,
    pub px: PixelPoint,
}

impl Observation {
    pub fn new(id: usize, px: PixelPoint) -> Self {
        Observation { id, px }
    }
}

/// One target point seen by both cameras.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredPoint {
    pub id: usize,
    /// Pixel in the static camera.
    pub q_s: PixelPoint,
    /// Pixel in the dynamic camera.
    pub q_d: PixelPoint,
    /// Position in the static camera frame, meters.
    pub p_s: Vector3<f64>,
    /// Position in the dynamic camera frame, meters.
    pub p_d: Vector3<f64>,
}

/// One synchronized snapshot `Z_i`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasurementSet {
    /// Sorted by ascending id.
    pub points: Vec<MeasuredPoint>,
    /// Encoder readings, when available.
    pub known_angles: Option<JointState>,
}

pub const MIN_COMMON_POINTS: usize = 4;

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < MIN_COMMON_POINTS {
            return Err(Error::InsufficientOverlap {
                common: self.points.len(),
                required: MIN_COMMON_POINTS,
            });
        }
        for w in self.points.windows(2) {
            if w[1].id <= w[0].id {
                return Err(Error::ShapeMismatch(format!(
                    "point ids must be strictly increasing ({} after {})",
                    w[1].id, w[0].id
                )));
            }
        }
        for p in &self.points {
            if p.p_s.z <= 0.0 || p.p_d.z <= 0.0 {
                return Err(Error::BehindCamera {
                    depth: p.p_s.z.min(p.p_d.z),
                });
            }
        }
        Ok(())
    }
}

/// The calibration input `Γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics_s: CameraIntrinsics,
    pub intrinsics_d: CameraIntrinsics,
    pub target: FiducialTarget,
    pub sets: Vec<MeasurementSet>,
}

impl Dataset {
    pub fn num_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn num_points(&self) -> usize {
        self.sets.iter().map(|s| s.len()).sum()
    }

    pub fn has_known_angles(&self) -> bool {
        self.sets.iter().all(|s| s.known_angles.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics_s.validate()?;
        self.intrinsics_d.validate()?;
        self.target.validate()?;
        if self.sets.is_empty() {
            return Err(Error::InsufficientData("dataset has no measurement sets".into()));
        }
        for set in &self.sets {
            set.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PnpOptions {
    pub solve: SolveOptions,
    /// Largest acceptable RMS reprojection error of the refined pose.
    pub max_rms_px: f64,
}

impl Default for PnpOptions {
    fn default() -> Self {
        PnpOptions {
            solve: SolveOptions {
                max_iterations: 100,
                cost_tolerance: 1e-15,
                gradient_tolerance: 1e-12,
                ..SolveOptions::default()
            },
            max_rms_px: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PnpSolution {
    /// Camera-from-target transform `T^{c:t}`.
    pub transform: RigidTransform,
    pub initial_rms_px: f64,
    pub rms_px: f64,
    pub report: SolveReport,
}

fn check_planar_config(object_points: &[Vector3<f64>]) -> Result<()> {
    let n = object_points.len();
    if n < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "planar pose needs at least 4 points, got {n}"
        )));
    }
    let scale = object_points.iter().map(|p| p.norm()).fold(0.0, f64::max).max(1.0);
    if object_points.iter().any(|p| p.z.abs() > 1e-9 * scale) {
        return Err(Error::DegenerateConfiguration(
            "object points must lie on the target plane z = 0".into(),
        ));
    }
    let mean = object_points.iter().fold(Vector2::zeros(), |acc, p| acc + p.xy()) / n as f64;
    let cov = object_points.iter().fold(nalgebra::Matrix2::zeros(), |acc, p| {
        let d = p.xy() - mean;
        acc + d * d.transpose()
    });
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if hi <= 0.0 || lo <= 1e-10 * hi {
        return Err(Error::DegenerateConfiguration("object points are collinear".into()));
    }
    Ok(())
}

/// Similarity transform that centers points and scales their mean distance
/// from the origin to √2.
fn normalizing_transform(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn apply_h(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Homography from target `(x, y)` to normalized image coordinates by the
/// normalized DLT.
pub fn estimate_homography(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Result<Matrix3<f64>> {
    let ts = normalizing_transform(src);
    let td = normalizing_transform(dst);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (s, d) in src.iter().zip(dst) {
        let s = apply_h(&ts, s);
        let d = apply_h(&td, d);
        let rows = [
            [-s.x, -s.y, -1.0, 0.0, 0.0, 0.0, d.x * s.x, d.x * s.y, d.x],
            [0.0, 0.0, 0.0, -s.x, -s.y, -1.0, d.y * s.x, d.y * s.y, d.y],
        ];
        for row in rows {
            let r = SMatrix::<f64, 1, 9>::from_row_slice(&row);
            ata += r.transpose() * r;
        }
    }
    let eig = SymmetricEigen::new(ata);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, v)| if *v < best.1 { (i, *v) } else { best });
    let h = eig.eigenvectors.column(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("singular image normalization".into()))?;
    let hm = td_inv * hn * ts;
    if !hm.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateConfiguration("homography estimate is not finite".into()));
    }
    Ok(hm)
}

/// Camera-from-target pose from a plane-induced homography `H ~ [r1 r2 t]`.
pub fn pose_from_homography(h: &Matrix3<f64>) -> Result<RigidTransform> {
    let h1 = h.column(0).into_owned();
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();
    let norm = (h1.norm() + h2.norm()) / 2.0;
    if norm <= 0.0 {
        return Err(Error::DegenerateConfiguration("degenerate homography".into()));
    }
    let mut scale = 1.0 / norm;
    if h3.z * scale < 0.0 {
        scale = -scale;
    }
    let r1 = h1 * scale;
    let r2 = h2 * scale;
    let t = h3 * scale;
    let r3 = r1.cross(&r2);
    let approx = Matrix3::from_columns(&[r1, r2, r3]);
    let svd = approx.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    Ok(RigidTransform::new(r, t))
}

/// Reprojection of a pose refinement `T = T(δ)·T₀`.
struct PnpProblem<'a> {
    cam: &'a CameraIntrinsics,
    object_points: &'a [Vector3<f64>],
    pixels: &'a [PixelPoint],
    base: RigidTransform,
}

impl PnpProblem<'_> {
    fn chain(&self, x: &DVector<f64>) -> Chain {
        let mut chain = Chain::new();
        let delta = Pose6::new(x[0], x[1], x[2], x[3], x[4], x[5]);
        chain.push_pose(&delta, Some(0)).push_fixed(self.base);
        chain
    }

    fn transform(&self, x: &DVector<f64>) -> RigidTransform {
        self.chain(x).transform()
    }
}

impl LeastSquaresProblem for PnpProblem<'_> {
    fn num_params(&self) -> usize {
        6
    }

    fn num_residuals(&self) -> usize {
        2 * self.pixels.len()
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let t = self.transform(x);
        let mut r = DVector::zeros(self.num_residuals());
        for (i, (p, z)) in self.object_points.iter().zip(self.pixels).enumerate() {
            let e = *z - self.cam.project(&t.apply(p))?;
            r[2 * i] = e.x;
            r[2 * i + 1] = e.y;
        }
        Ok(r)
    }

    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let chain = self.chain(x);
        let lin = chain.linearize();
        let mut r = DVector::zeros(self.num_residuals());
        let mut jac = DMatrix::zeros(self.num_residuals(), 6);
        let mut derivs = Vec::with_capacity(6);
        for (i, (p, z)) in self.object_points.iter().zip(self.pixels).enumerate() {
            let y = lin.apply_with_derivatives(p, &mut derivs);
            let (px, jp) = self.cam.project_with_jacobian(&y)?;
            let e = *z - px;
            r[2 * i] = e.x;
            r[2 * i + 1] = e.y;
            for (k, d) in &derivs {
                let g = -(jp * d);
                jac[(2 * i, *k)] += g.x;
                jac[(2 * i + 1, *k)] += g.y;
            }
        }
        Ok((r, jac))
    }
}

fn rms(cost: f64, n: usize) -> f64 {
    (cost / n as f64).sqrt()
}

/// Camera-from-target pose of a planar target from ≥ 4 correspondences,
/// with diagnostics.
pub fn solve_pnp_with_report(
    cam: &CameraIntrinsics,
    object_points: &[Vector3<f64>],
    pixels: &[PixelPoint],
    opts: &PnpOptions,
) -> Result<PnpSolution> {
    if object_points.len() != pixels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} object points but {} pixels",
            object_points.len(),
            pixels.len()
        )));
    }
    check_planar_config(object_points)?;
    cam.validate()?;
    let src: Vec<Vector2<f64>> = object_points.iter().map(|p| p.xy()).collect();
    let dst: Vec<Vector2<f64>> = pixels.iter().map(|px| cam.normalize(px)).collect();
    let h = estimate_homography(&src, &dst)?;
    let init = pose_from_homography(&h)?;
    let problem = PnpProblem {
        cam,
        object_points,
        pixels,
        base: init,
    };
    let report = levenberg_marquardt(&problem, DVector::zeros(6), &opts.solve)?;
    let transform = problem.transform(&report.params);
    let n = pixels.len();
    let initial_rms_px = rms(report.initial_cost, n);
    let rms_px = rms(report.final_cost, n);
    if rms_px > opts.max_rms_px {
        return Err(Error::PnpNotConverged { rms_px });
    }
    Ok(PnpSolution {
        transform,
        initial_rms_px,
        rms_px,
        report,
    })
}

pub fn solve_pnp(cam: &CameraIntrinsics, object_points: &[Vector3<f64>], pixels: &[PixelPoint]) -> Result<RigidTransform> {
    solve_pnp_with_report(cam, object_points, pixels, &PnpOptions::default()).map(|s| s.transform)
}

fn index_observations(target: &FiducialTarget, obs: &[Observation]) -> Result<BTreeMap<usize, PixelPoint>> {
    let mut map = BTreeMap::new();
    for o in obs {
        if o.id >= target.num_points() {
            return Err(Error::UnknownPointId(o.id));
        }
        if !o.px.is_finite() {
            return Err(Error::ShapeMismatch(format!("observation {} is not finite", o.id)));
        }
        if map.insert(o.id, o.px).is_some() {
            return Err(Error::ShapeMismatch(format!("point id {} observed twice", o.id)));
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementOptions {
    pub pnp: PnpOptions,
    pub min_common_points: usize,
}

impl Default for MeasurementOptions {
    fn default() -> Self {
        MeasurementOptions {
            pnp: PnpOptions::default(),
            min_common_points: MIN_COMMON_POINTS,
        }
    }
}

/// Builds `Z_i` from target poses that are already known. `t_s_t` and
/// `t_d_t` map target coordinates into the static and dynamic camera frames.
pub fn measurement_set_from_poses(
    target: &FiducialTarget,
    t_s_t: &RigidTransform,
    t_d_t: &RigidTransform,
    obs_s: &[Observation],
    obs_d: &[Observation],
    known_angles: Option<JointState>,
    min_common_points: usize,
) -> Result<MeasurementSet> {
    let s = index_observations(target, obs_s)?;
    let d = index_observations(target, obs_d)?;
    let mut points = Vec::new();
    for (id, q_s) in &s {
        if let Some(q_d) = d.get(id) {
            let pt = target.point(*id)?;
            points.push(MeasuredPoint {
                id: *id,
                q_s: *q_s,
                q_d: *q_d,
                p_s: t_s_t.apply(&pt),
                p_d: t_d_t.apply(&pt),
            });
        }
    }
    let required = min_common_points.max(MIN_COMMON_POINTS);
    if points.len() < required {
        return Err(Error::InsufficientOverlap {
            common: points.len(),
            required,
        });
    }
    let set = MeasurementSet { points, known_angles };
    set.validate()?;
    Ok(set)
}

fn pnp_from_observations(
    cam: &CameraIntrinsics,
    target: &FiducialTarget,
    obs: &BTreeMap<usize, PixelPoint>,
    opts: &PnpOptions,
) -> Result<RigidTransform> {
    let mut object = Vec::with_capacity(obs.len());
    let mut pixels = Vec::with_capacity(obs.len());
    for (id, px) in obs {
        object.push(target.point(*id)?);
        pixels.push(*px);
    }
    Ok(solve_pnp_with_report(cam, &object, &pixels, opts)?.transform)
}

/// Builds `Z_i` from raw detections: each camera's target pose is
/// estimated by PnP on all of its observations, then the common points are
/// mapped into both camera frames.
pub fn build_measurement_set(
    cam_s: &CameraIntrinsics,
    cam_d: &CameraIntrinsics,
    target: &FiducialTarget,
    obs_s: &[Observation],
    obs_d: &[Observation],
    known_angles: Option<JointState>,
    opts: &MeasurementOptions,
) -> Result<MeasurementSet> {
    let s = index_observations(target, obs_s)?;
    let d = index_observations(target, obs_d)?;
    let common = s.keys().filter(|id| d.contains_key(id)).count();
    let required = opts.min_common_points.max(MIN_COMMON_POINTS);
    if common < required {
        return Err(Error::InsufficientOverlap { common, required });
    }
    let t_s_t = pnp_from_observations(cam_s, target, &s, &opts.pnp)?;
    let t_d_t = pnp_from_observations(cam_d, target, &d, &opts.pnp)?;
    measurement_set_from_poses(target, &t_s_t, &t_d_t, obs_s, obs_d, known_angles, required)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_x;
    use approx::assert_abs_diff_eq;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::simulation_default()
    }

    /// Target roughly facing the camera at `depth`, centered on the axis.
    fn random_pose(rng: &mut impl Rng, target: &FiducialTarget, depth: f64) -> RigidTransform {
        let tilt = Pose6::new(
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            0.0,
            0.0,
            0.0,
        )
        .to_transform();
        let offset = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), depth);
        // Center the board on the line of sight, then tilt it in place.
        RigidTransform::from_translation(offset) * tilt * RigidTransform::from_translation(-target.center())
    }

    fn project_all(cam: &CameraIntrinsics, t: &RigidTransform, pts: &[Vector3<f64>]) -> Vec<PixelPoint> {
        pts.iter().map(|p| cam.project(&t.apply(p)).unwrap()).collect()
    }

    fn pose_error(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
        a.distance(b)
    }

    #[test]
    fn target_grid_layout() {
        let t = FiducialTarget::new(2, 2, 0.1).unwrap();
        let pts = target_points(&t);
        let expected = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::new(0.0, 0.1, 0.0),
            Vector3::new(0.1, 0.1, 0.0),
        ];
        assert_eq!(pts, expected);
        let board = FiducialTarget::new(7, 9, 0.025).unwrap();
        let pts = target_points(&board);
        assert_eq!(pts.len(), 63);
        assert!(pts.iter().all(|p| p.z == 0.0));
        for (id, p) in pts.iter().enumerate() {
            assert_eq!(board.point(id).unwrap(), *p);
        }
        assert!(FiducialTarget::new(1, 5, 0.1).is_err());
        assert!(FiducialTarget::new(3, 3, 0.0).is_err());
        assert!(matches!(board.point(63), Err(Error::UnknownPointId(63))));
    }

    #[test]
    fn noiseless_pnp_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = FiducialTarget::default();
        let pts = target_points(&target);
        for _ in 0..50 {
            let truth = random_pose(&mut rng, &target, 0.5);
            let px = project_all(&cam(), &truth, &pts);
            let sol = solve_pnp_with_report(&cam(), &pts, &px, &PnpOptions::default()).unwrap();
            let (rot, trans) = pose_error(&sol.transform, &truth);
            assert!(rot < 1e-6 && trans < 1e-6, "rot {rot} trans {trans}");
            assert!(sol.rms_px <= sol.initial_rms_px);
        }
    }

    #[test]
    fn four_point_square() {
        let target = FiducialTarget::new(2, 2, 0.2).unwrap();
        let pts = target_points(&target);
        let truth = RigidTransform::new(rot_x(0.3), Vector3::new(-0.1, -0.1, 1.0));
        let px = project_all(&cam(), &truth, &pts);
        let t = solve_pnp(&cam(), &pts, &px).unwrap();
        let (rot, trans) = pose_error(&t, &truth);
        assert!(rot < 1e-9 && trans < 1e-9);
    }

    /// Predicted covariance traces of the rotation vector and translation
    /// for one pose, from the Fisher information `JᵀJ / σ²` at the truth.
    fn cramer_rao_traces(truth: &RigidTransform, pts: &[Vector3<f64>], sigma: f64) -> (f64, f64) {
        let px = project_all(&cam(), truth, pts);
        let problem = PnpProblem {
            cam: &cam(),
            object_points: pts,
            pixels: &px,
            base: *truth,
        };
        let (_, j) = problem.residuals_and_jacobian(&DVector::zeros(6)).unwrap();
        let cov = (j.tr_mul(&j)).try_inverse().unwrap() * (sigma * sigma);
        // Translation of T(δ)·T₀ moves by δ_t + δ_r × t₀.
        let t0 = truth.translation;
        let mut a = DMatrix::zeros(3, 6);
        a.view_mut((0, 0), (3, 3)).copy_from(&(-t0.cross_matrix()));
        a.view_mut((0, 3), (3, 3)).fill_with_identity();
        let cov_t = &a * &cov * a.transpose();
        (cov.view((0, 0), (3, 3)).trace(), cov_t.trace())
    }

    #[test]
    fn noisy_pnp_is_efficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = FiducialTarget::default();
        let pts = target_points(&target);
        let sigma = 0.4;
        let noise = Normal::new(0.0, sigma).unwrap();
        let (mut rot_sq, mut rot_pred, mut trans_sq, mut trans_pred) = (0.0, 0.0, 0.0, 0.0);
        let mut trans_err = Vec::new();
        for _ in 0..100 {
            let truth = random_pose(&mut rng, &target, 0.5);
            let px: Vec<PixelPoint> = project_all(&cam(), &truth, &pts)
                .into_iter()
                .map(|p| PixelPoint::new(p.u + noise.sample(&mut rng), p.v + noise.sample(&mut rng)))
                .collect();
            let t = solve_pnp(&cam(), &pts, &px).unwrap();
            let (r, d) = pose_error(&t, &truth);
            let (pr, pt) = cramer_rao_traces(&truth, &pts, sigma);
            rot_sq += r * r;
            rot_pred += pr;
            trans_sq += d * d;
            trans_pred += pt;
            trans_err.push(d);
        }
        let rot_ratio = rot_sq / rot_pred;
        let trans_ratio = trans_sq / trans_pred;
        assert!((0.75..1.33).contains(&rot_ratio), "rotation efficiency {rot_ratio}");
        assert!((0.75..1.33).contains(&trans_ratio), "translation efficiency {trans_ratio}");
        trans_err.sort_by(f64::total_cmp);
        assert!(trans_err[94] < 5e-3, "translation p95 {}", trans_err[94]);
    }

    #[test]
    fn degenerate_inputs() {
        let target = FiducialTarget::default();
        let pts = target_points(&target);
        let truth = random_pose(&mut ChaCha8Rng::seed_from_u64(3), &target, 0.5);
        let px = project_all(&cam(), &truth, &pts);
        assert!(matches!(
            solve_pnp(&cam(), &pts[..3], &px[..3]),
            Err(Error::DegenerateConfiguration(_))
        ));
        // One row of the board is collinear.
        assert!(matches!(
            solve_pnp(&cam(), &pts[..9], &px[..9]),
            Err(Error::DegenerateConfiguration(_))
        ));
        let mut lifted = pts.clone();
        lifted[5].z = 0.01;
        assert!(matches!(
            solve_pnp(&cam(), &lifted, &px),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn garbage_pixels_do_not_converge() {
        let target = FiducialTarget::default();
        let pts = target_points(&target);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let px: Vec<PixelPoint> = (0..pts.len())
            .map(|_| PixelPoint::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
            .collect();
        match solve_pnp(&cam(), &pts, &px) {
            Err(Error::PnpNotConverged { .. }) | Err(Error::BehindCamera { .. }) | Err(Error::DegenerateConfiguration(_)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pnp_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = FiducialTarget::default();
        let pts = target_points(&target);
        let truth = random_pose(&mut rng, &target, 0.6);
        let noise = Normal::new(0.0, 0.4).unwrap();
        let px: Vec<PixelPoint> = project_all(&cam(), &truth, &pts)
            .into_iter()
            .map(|p| PixelPoint::new(p.u + noise.sample(&mut rng), p.v + noise.sample(&mut rng)))
            .collect();
        let a = solve_pnp(&cam(), &pts, &px).unwrap();
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.shuffle(&mut rng);
        let pts2: Vec<_> = order.iter().map(|&i| pts[i]).collect();
        let px2: Vec<_> = order.iter().map(|&i| px[i]).collect();
        let b = solve_pnp(&cam(), &pts2, &px2).unwrap();
        assert_abs_diff_eq!(a.rotation, b.rotation, epsilon = 1e-9);
        assert_abs_diff_eq!(a.translation, b.translation, epsilon = 1e-9);
    }

    #[test]
    fn pnp_jacobian_matches_numeric() {
        let target = FiducialTarget::default();
        let pts = target_points(&target);
        let truth = random_pose(&mut ChaCha8Rng::seed_from_u64(6), &target, 0.5);
        let px = project_all(&cam(), &truth, &pts);
        let problem = PnpProblem {
            cam: &cam(),
            object_points: &pts,
            pixels: &px,
            base: truth,
        };
        let x = DVector::from_vec(vec![0.01, -0.02, 0.03, 0.004, -0.002, 0.01]);
        let (_, analytic) = problem.residuals_and_jacobian(&x).unwrap();
        let numeric = crate::solver::numeric_jacobian(|y| problem.residuals(y), &x, 1e-6).unwrap();
        assert!(crate::solver::jacobian_relative_error(&analytic, &numeric) < 1e-4);
    }

    fn synthetic_snapshot() -> (FiducialTarget, RigidTransform, RigidTransform, Vec<Observation>, Vec<Observation>) {
        let target = FiducialTarget::default();
        let pts = target_points(&target);
        let t_s_t = RigidTransform::new(rot_x(0.1), Vector3::new(-0.1, -0.075, 0.6));
        let t_d_s = RigidTransform::new(rot_x(-0.05) * crate::geometry::rot_y(0.1), Vector3::new(-0.1, 0.0, 0.01));
        let t_d_t = t_d_s * t_s_t;
        let obs = |t: &RigidTransform| {
            project_all(&cam(), t, &pts)
                .into_iter()
                .enumerate()
                .map(|(id, px)| Observation::new(id, px))
                .collect::<Vec<_>>()
        };
        let (os, od) = (obs(&t_s_t), obs(&t_d_t));
        (target, t_s_t, t_d_t, os, od)
    }

    #[test]
    fn noiseless_measurement_set_matches_ground_truth() {
        let (target, t_s_t, t_d_t, os, od) = synthetic_snapshot();
        let set = build_measurement_set(&cam(), &cam(), &target, &os, &od, None, &MeasurementOptions::default()).unwrap();
        assert_eq!(set.len(), 63);
        for p in &set.points {
            let pt = target.point(p.id).unwrap();
            assert_abs_diff_eq!(p.p_s, t_s_t.apply(&pt), epsilon = 1e-6);
            assert_abs_diff_eq!(p.p_d, t_d_t.apply(&pt), epsilon = 1e-6);
            let back = cam().project(&p.p_s).unwrap() - p.q_s;
            assert!(back.norm() < 1e-6);
        }
    }

    #[test]
    fn partial_overlap_keeps_common_ids() {
        let (target, _, _, os, od) = synthetic_snapshot();
        let od: Vec<_> = od.into_iter().filter(|o| o.id % 2 == 0).collect();
        let os: Vec<_> = os.into_iter().rev().collect();
        let set = build_measurement_set(&cam(), &cam(), &target, &os, &od, None, &MeasurementOptions::default()).unwrap();
        assert_eq!(set.ids(), (0..63).filter(|i| i % 2 == 0).collect::<Vec<_>>());
        set.validate().unwrap();
    }

    #[test]
    fn disjoint_observations_are_rejected() {
        let (target, _, _, os, od) = synthetic_snapshot();
        let os: Vec<_> = os.into_iter().filter(|o| o.id < 30).collect();
        let od: Vec<_> = od.into_iter().filter(|o| o.id >= 30).collect();
        let err = build_measurement_set(&cam(), &cam(), &target, &os, &od, None, &MeasurementOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientOverlap { common: 0, .. }));
    }
}
