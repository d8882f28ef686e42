//! Pinhole projection with an optional two-term radial distortion.

use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to the image plane cannot be projected.
pub const MIN_DEPTH: f64 = 1e-9;
/// Minimum depth for a point to count as visible.
pub const VISIBLE_DEPTH: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        PixelPoint { u, v }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

impl From<Vector2<f64>> for PixelPoint {
    fn from(v: Vector2<f64>) -> Self {
        PixelPoint::new(v.x, v.y)
    }
}

impl From<[f64; 2]> for PixelPoint {
    fn from(v: [f64; 2]) -> Self {
        PixelPoint::new(v[0], v[1])
    }
}

impl From<PixelPoint> for [f64; 2] {
    fn from(p: PixelPoint) -> Self {
        [p.u, p.v]
    }
}

impl std::ops::Sub for PixelPoint {
    type Output = Vector2<f64>;

    fn sub(self, rhs: PixelPoint) -> Vector2<f64> {
        Vector2::new(self.u - rhs.u, self.v - rhs.v)
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let cam = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            k1: 0.0,
            k2: 0.0,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_distortion(self, k1: f64, k2: f64) -> Self {
        CameraIntrinsics { k1, k2, ..self }
    }

    /// 640×480 camera with a 60° horizontal field of view and no distortion.
    pub fn simulation_default() -> Self {
        CameraIntrinsics {
            fx: 554.26,
            fy: 554.26,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            k1: 0.0,
            k2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.k1, self.k2]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..=self.width as f64).contains(&self.cx)
            || !(0.0..=self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    fn distortion_scale(&self, r2: f64) -> f64 {
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    /// Projects a camera-frame point to pixels.
    pub fn project(&self, p: &Vector3<f64>) -> Result<PixelPoint> {
        if p.z <= MIN_DEPTH {
            return Err(Error::BehindCamera { depth: p.z });
        }
        let xn = p.x / p.z;
        let yn = p.y / p.z;
        let s = self.distortion_scale(xn * xn + yn * yn);
        Ok(PixelPoint::new(
            self.fx * xn * s + self.cx,
            self.fy * yn * s + self.cy,
        ))
    }

    /// Projection together with its 2×3 Jacobian with respect to `p`.
    pub fn project_with_jacobian(&self, p: &Vector3<f64>) -> Result<(PixelPoint, Matrix2x3<f64>)> {
        if p.z <= MIN_DEPTH {
            return Err(Error::BehindCamera { depth: p.z });
        }
        let inv_z = 1.0 / p.z;
        let xn = p.x * inv_z;
        let yn = p.y * inv_z;
        let r2 = xn * xn + yn * yn;
        let s = self.distortion_scale(r2);
        let ds_dr2 = self.k1 + 2.0 * self.k2 * r2;
        // d(normalized distorted)/d(normalized)
        let dxd_dxn = s + 2.0 * xn * xn * ds_dr2;
        let dxd_dyn = 2.0 * xn * yn * ds_dr2;
        let dyd_dxn = dxd_dyn;
        let dyd_dyn = s + 2.0 * yn * yn * ds_dr2;
        // d(normalized)/dp = [[1/z, 0, -x/z²], [0, 1/z, -y/z²]]
        let a = Matrix2x3::new(
            dxd_dxn * inv_z,
            dxd_dyn * inv_z,
            -(dxd_dxn * xn + dxd_dyn * yn) * inv_z,
            dyd_dxn * inv_z,
            dyd_dyn * inv_z,
            -(dyd_dxn * xn + dyd_dyn * yn) * inv_z,
        );
        let mut jac = a;
        jac.row_mut(0).scale_mut(self.fx);
        jac.row_mut(1).scale_mut(self.fy);
        let px = PixelPoint::new(self.fx * xn * s + self.cx, self.fy * yn * s + self.cy);
        Ok((px, jac))
    }

    pub fn in_image(&self, px: &PixelPoint) -> bool {
        (0.0..=self.width as f64).contains(&px.u) && (0.0..=self.height as f64).contains(&px.v)
    }

    /// True when `p` is at least 5 cm in front of the camera and projects
    /// inside the image.
    pub fn is_visible(&self, p: &Vector3<f64>) -> bool {
        if p.z <= VISIBLE_DEPTH {
            return false;
        }
        self.project(p).is_ok_and(|px| self.in_image(&px))
    }

    /// Inverse of the undistorted projection at a given depth.
    pub fn back_project(&self, px: &PixelPoint, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (px.u - self.cx) / self.fx * depth,
            (px.v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Undistorted normalized image coordinates of a pixel. Distortion, when
    /// present, is removed by fixed-point iteration.
    pub fn normalize(&self, px: &PixelPoint) -> Vector2<f64> {
        let xd = (px.u - self.cx) / self.fx;
        let yd = (px.v - self.cy) / self.fy;
        if self.k1 == 0.0 && self.k2 == 0.0 {
            return Vector2::new(xd, yd);
        }
        let (mut x, mut y) = (xd, yd);
        for _ in 0..20 {
            let s = self.distortion_scale(x * x + y * y);
            x = xd / s;
            y = yd / s;
        }
        Vector2::new(x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_camera() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 2,
            height: 2,
            k1: 0.0,
            k2: 0.0,
        }
    }

    fn cam500() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn optical_axis_and_principal_point() {
        let px = unit_camera().project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, PixelPoint::new(0.0, 0.0));
        let px = cam500().project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(px, PixelPoint::new(320.0, 240.0));
    }

    #[test]
    fn matches_pinhole_formula() {
        let cam = CameraIntrinsics::new(512.3, 498.7, 311.0, 250.5, 640, 480).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let z = rng.random_range(0.5..5.0);
            let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), z);
            let px = cam.project(&p).unwrap();
            assert_abs_diff_eq!(px.u, 512.3 * (p.x / p.z) + 311.0, epsilon = 1e-12);
            assert_abs_diff_eq!(px.v, 498.7 * (p.y / p.z) + 250.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn behind_camera_is_an_error() {
        let cam = cam500();
        assert!(matches!(
            cam.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(cam.project(&Vector3::new(0.0, 0.0, 1e-10)).is_err());
    }

    #[test]
    fn visibility() {
        let cam = cam500();
        assert!(cam.is_visible(&Vector3::new(0.0, 0.0, 1.0)));
        assert!(!cam.is_visible(&Vector3::new(0.0, 0.0, -1.0)));
        assert!(!cam.is_visible(&Vector3::new(0.0, 0.0, 0.04)));
        let outside = cam.back_project(&PixelPoint::new(cam.width as f64 + 1.0, 100.0), 2.0);
        assert!(!cam.is_visible(&outside));
        let inside = cam.back_project(&PixelPoint::new(cam.width as f64 - 1.0, 100.0), 2.0);
        assert!(cam.is_visible(&inside));
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(-1.0, 1.0, 0.0, 0.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 20.0, 0.0, 10, 10).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cam = cam500().with_distortion(-0.2, 0.05);
        let p = Vector3::new(0.3, -0.2, 1.7);
        let (_, jac) = cam.project_with_jacobian(&p).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut plus = p;
            let mut minus = p;
            plus[k] += h;
            minus[k] -= h;
            let d = (cam.project(&plus).unwrap() - cam.project(&minus).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(jac[(0, k)], d.x, epsilon = 1e-5);
            assert_abs_diff_eq!(jac[(1, k)], d.y, epsilon = 1e-5);
        }
    }

    #[test]
    fn normalize_inverts_distortion() {
        let cam = cam500().with_distortion(-0.1, 0.01);
        let p = Vector3::new(0.2, 0.1, 1.0);
        let n = cam.normalize(&cam.project(&p).unwrap());
        assert_abs_diff_eq!(n, Vector2::new(0.2, 0.1), epsilon = 1e-10);
    }

    proptest! {
        #[test]
        fn projection_is_scale_invariant(
            x in -1.0..1.0f64, y in -1.0..1.0f64, z in 0.2..5.0f64, s in 0.01..100.0f64,
        ) {
            let cam = cam500();
            let p = Vector3::new(x, y, z);
            let a = cam.project(&p).unwrap();
            let b = cam.project(&(p * s)).unwrap();
            prop_assert!((a - b).amax() < 1e-10);
        }

        #[test]
        fn zero_distortion_matches_undistorted_path(
            x in -1.0..1.0f64, y in -1.0..1.0f64, z in 0.2..5.0f64,
        ) {
            let cam = cam500().with_distortion(0.0, 0.0);
            let p = Vector3::new(x, y, z);
            let px = cam.project(&p).unwrap();
            prop_assert_eq!(px.u, cam.fx * (x / z) + cam.cx);
            prop_assert_eq!(px.v, cam.fy * (y / z) + cam.cy);
        }
    }
}
