//! Denavit–Hartenberg links and the static-to-dynamic camera chain.
//!
//! Each link uses the classic DH factor order
//! `A(θ) = RotZ(θ) · TransZ(d) · TransX(a) · RotX(α)`, and the full chain is
//! `T^{d:s}(π, β) = T(τ_d) · A_1(θ_1) ⋯ A_L(θ_L) · T(τ_s)`.
//!
//! Packed parameter order is `[τ_d (6), ω_1 … ω_L (3 each), τ_s (6)]` with
//! `τ = [rx, ry, rz, tx, ty, tz]` and `ω = [d, a, α]`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{canonical_angle, Pose6, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct DhLink {
    pub d: f64,
    pub a: f64,
    pub alpha: f64,
}

impl DhLink {
    pub fn new(d: f64, a: f64, alpha: f64) -> Self {
        DhLink { d, a, alpha }
    }
}

impl From<[f64; 3]> for DhLink {
    fn from(v: [f64; 3]) -> Self {
        DhLink::new(v[0], v[1], v[2])
    }
}

impl From<DhLink> for [f64; 3] {
    fn from(l: DhLink) -> Self {
        [l.d, l.a, l.alpha]
    }
}

/// Whether a packed parameter is a length or an angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Translation,
    Rotation,
}

/// Joint angles of the mechanism at one snapshot, radians.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointState(pub Vec<f64>);

impl JointState {
    pub fn new(angles: Vec<f64>) -> Self {
        JointState(angles)
    }

    pub fn zeros(len: usize) -> Self {
        JointState(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn angles(&self) -> &[f64] {
        &self.0
    }

    pub fn canonical(&self) -> JointState {
        JointState(self.0.iter().map(|a| canonical_angle(*a)).collect())
    }
}

impl From<Vec<f64>> for JointState {
    fn from(v: Vec<f64>) -> Self {
        JointState(v)
    }
}

/// Kinematic parameters `π` of the static-to-dynamic camera chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicModel {
    /// Static camera frame to mechanism base frame.
    pub tau_s: Pose6,
    pub links: Vec<DhLink>,
    /// End-effector frame to dynamic camera frame.
    pub tau_d: Pose6,
}

/// Number of packed kinematic parameters for `links` joints: `12 + 3L`.
pub fn kinematic_parameter_count(links: usize) -> usize {
    12 + 3 * links
}

impl KinematicModel {
    pub fn new(tau_s: Pose6, links: Vec<DhLink>, tau_d: Pose6) -> Result<Self> {
        let model = KinematicModel {
            tau_s,
            links,
            tau_d,
        };
        model.validate()?;
        Ok(model)
    }

    /// Model with `links` zero links and identity end transforms.
    pub fn zeros(links: usize) -> Self {
        KinematicModel {
            tau_s: Pose6::IDENTITY,
            links: vec![DhLink::default(); links],
            tau_d: Pose6::IDENTITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.links.is_empty() {
            return Err(Error::InvalidModel("at least one link is required".into()));
        }
        if !self.pack().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidModel("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn parameter_count(&self) -> usize {
        kinematic_parameter_count(self.links.len())
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        v.extend_from_slice(&self.tau_d.to_array());
        for link in &self.links {
            v.extend_from_slice(&[link.d, link.a, link.alpha]);
        }
        v.extend_from_slice(&self.tau_s.to_array());
        v
    }

    pub fn unpack(v: &[f64], links: usize) -> Result<Self> {
        let expected = kinematic_parameter_count(links);
        if v.len() != expected {
            return Err(Error::ParameterLength {
                expected,
                found: v.len(),
            });
        }
        if links == 0 {
            return Err(Error::InvalidModel("at least one link is required".into()));
        }
        let tau_d = Pose6::from_slice(&v[..6])?;
        let dh = v[6..6 + 3 * links]
            .chunks_exact(3)
            .map(|c| DhLink::new(c[0], c[1], c[2]))
            .collect();
        let tau_s = Pose6::from_slice(&v[6 + 3 * links..])?;
        Ok(KinematicModel {
            tau_s,
            links: dh,
            tau_d,
        })
    }

    /// Role of every packed parameter, in packing order.
    pub fn parameter_roles(links: usize) -> Vec<ParamRole> {
        use ParamRole::*;
        let pose = [Rotation, Rotation, Rotation, Translation, Translation, Translation];
        let mut roles = pose.to_vec();
        for _ in 0..links {
            roles.extend_from_slice(&[Translation, Translation, Rotation]);
        }
        roles.extend_from_slice(&pose);
        roles
    }

    /// Same model with every angle wrapped into `[-π, π)`.
    pub fn canonical(&self) -> KinematicModel {
        KinematicModel {
            tau_s: self.tau_s.canonical(),
            links: self
                .links
                .iter()
                .map(|l| DhLink::new(l.d, l.a, canonical_angle(l.alpha)))
                .collect(),
            tau_d: self.tau_d.canonical(),
        }
    }

    fn check_joints(&self, beta: &JointState) -> Result<()> {
        if beta.len() != self.links.len() {
            return Err(Error::DimensionMismatch {
                expected: self.links.len(),
                found: beta.len(),
            });
        }
        Ok(())
    }

    /// `T^{d:s}` for the given joint angles.
    pub fn full_chain(&self, beta: &JointState) -> Result<RigidTransform> {
        self.check_joints(beta)?;
        let fk = forward_kinematics(&self.links, beta)?;
        Ok(self.tau_d.to_transform() * fk * self.tau_s.to_transform())
    }
}

/// Single classic DH transform `RotZ(θ)·TransZ(d)·TransX(a)·RotX(α)`.
pub fn dh_transform(theta: f64, link: &DhLink) -> RigidTransform {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = link.alpha.sin_cos();
    RigidTransform::new(
        Matrix3::new(ct, -st * ca, st * sa, st, ct * ca, -ct * sa, 0.0, sa, ca),
        Vector3::new(link.a * ct, link.a * st, link.d),
    )
}

/// Product of the link transforms in order, `A_1(θ_1) ⋯ A_L(θ_L)`.
pub fn forward_kinematics(links: &[DhLink], beta: &JointState) -> Result<RigidTransform> {
    if links.len() != beta.len() {
        return Err(Error::DimensionMismatch {
            expected: links.len(),
            found: beta.len(),
        });
    }
    Ok(links
        .iter()
        .zip(beta.angles())
        .fold(RigidTransform::identity(), |acc, (link, theta)| {
            acc * dh_transform(*theta, link)
        }))
}

pub fn full_chain(model: &KinematicModel, beta: &JointState) -> Result<RigidTransform> {
    model.full_chain(beta)
}

pub fn pack_parameters(model: &KinematicModel) -> Vec<f64> {
    model.pack()
}

pub fn unpack_parameters(v: &[f64], links: usize) -> Result<KinematicModel> {
    KinematicModel::unpack(v, links)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_x, rot_z};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_pose(rng: &mut impl Rng) -> Pose6 {
        Pose6::new(
            rng.random_range(-PI..PI),
            rng.random_range(-1.2..1.2),
            rng.random_range(-PI..PI),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        )
    }

    fn random_model(rng: &mut impl Rng, links: usize) -> KinematicModel {
        KinematicModel {
            tau_s: random_pose(rng),
            links: (0..links)
                .map(|_| {
                    DhLink::new(
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-PI..PI),
                    )
                })
                .collect(),
            tau_d: random_pose(rng),
        }
    }

    #[test]
    fn zero_link_is_identity() {
        assert_eq!(
            dh_transform(0.0, &DhLink::default()),
            RigidTransform::identity()
        );
    }

    #[test]
    fn offsets_only_translate() {
        let t = dh_transform(0.0, &DhLink::new(0.1, 0.2, 0.0));
        assert_eq!(t.rotation, Matrix3::identity());
        assert_abs_diff_eq!(t.translation, Vector3::new(0.2, 0.0, 0.1));
    }

    #[test]
    fn quarter_turn_moves_link_length_onto_y() {
        let t = dh_transform(FRAC_PI_2, &DhLink::new(0.0, 0.2, 0.0));
        assert_abs_diff_eq!(
            t.apply(&Vector3::zeros()),
            Vector3::new(0.0, 0.2, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn closed_form_matches_four_factor_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let theta = rng.random_range(-PI..PI);
            let link = DhLink::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-PI..PI),
            );
            let product = RigidTransform::from_rotation(rot_z(theta))
                * RigidTransform::from_translation(Vector3::new(0.0, 0.0, link.d))
                * RigidTransform::from_translation(Vector3::new(link.a, 0.0, 0.0))
                * RigidTransform::from_rotation(rot_x(link.alpha));
            let t = dh_transform(theta, &link);
            assert_abs_diff_eq!(t.rotation, product.rotation, epsilon = 1e-14);
            assert_abs_diff_eq!(t.translation, product.translation, epsilon = 1e-14);
        }
    }

    #[test]
    fn forward_kinematics_cases() {
        let zero = vec![DhLink::default(); 3];
        assert_eq!(
            forward_kinematics(&zero, &JointState::zeros(3)).unwrap(),
            RigidTransform::identity()
        );
        let link = DhLink::new(0.03, -0.1, 0.7);
        let one = forward_kinematics(&[link], &JointState::new(vec![0.4])).unwrap();
        assert_eq!(one, dh_transform(0.4, &link));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(&mut rng, 2);
        let beta = JointState::new(vec![0.3, -1.1]);
        let fk = forward_kinematics(&m.links, &beta).unwrap();
        let manual = dh_transform(0.3, &m.links[0]).compose(&dh_transform(-1.1, &m.links[1]));
        assert_abs_diff_eq!(fk.rotation, manual.rotation, epsilon = 1e-12);
        assert_abs_diff_eq!(fk.translation, manual.translation, epsilon = 1e-12);

        assert!(matches!(
            forward_kinematics(&m.links, &JointState::zeros(3)),
            Err(Error::DimensionMismatch {
                expected: 2,
                found: 3
            })
        ));
    }

    #[test]
    fn full_chain_cases() {
        let m = KinematicModel::zeros(2);
        let beta = JointState::zeros(2);
        assert_eq!(m.full_chain(&beta).unwrap(), RigidTransform::identity());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = random_model(&mut rng, 2);
        let beta = JointState::new(vec![0.2, 0.9]);
        m.tau_s = Pose6::IDENTITY;
        m.tau_d = Pose6::IDENTITY;
        assert_eq!(
            m.full_chain(&beta).unwrap(),
            forward_kinematics(&m.links, &beta).unwrap()
        );

        for _ in 0..50 {
            let m = random_model(&mut rng, 3);
            let beta = JointState::new((0..3).map(|_| rng.random_range(-PI..PI)).collect());
            let expected = m.tau_d.to_transform().compose(
                &forward_kinematics(&m.links, &beta)
                    .unwrap()
                    .compose(&m.tau_s.to_transform()),
            );
            let t = full_chain(&m, &beta).unwrap();
            assert_abs_diff_eq!(t.rotation, expected.rotation, epsilon = 1e-12);
            assert_abs_diff_eq!(t.translation, expected.translation, epsilon = 1e-12);
        }
        assert!(m.full_chain(&JointState::zeros(1)).is_err());
    }

    #[test]
    fn packing_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_model(&mut rng, 2);
        let v = pack_parameters(&m);
        assert_eq!(v.len(), 18);
        assert_eq!(unpack_parameters(&v, 2).unwrap(), m);
        assert_eq!(pack_parameters(&KinematicModel::zeros(1)), vec![0.0; 15]);
        assert_eq!(&v[..6], &m.tau_d.to_array());
        assert_eq!(&v[6..9], &[m.links[0].d, m.links[0].a, m.links[0].alpha]);
        assert_eq!(&v[12..], &m.tau_s.to_array());
        assert!(matches!(
            unpack_parameters(&v, 3),
            Err(Error::ParameterLength {
                expected: 21,
                found: 18
            })
        ));
        assert_eq!(KinematicModel::parameter_roles(2).len(), 18);
    }

    #[test]
    fn chain_is_smooth_in_every_parameter() {
        // Two central-difference estimates at h and h/2 must agree.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_model(&mut rng, 2);
        let beta = JointState::new(vec![0.4, -0.3]);
        let n = m.parameter_count();
        let entries = |m: &KinematicModel, b: &JointState| {
            let t = m.full_chain(b).unwrap();
            let mut e: Vec<f64> = t.rotation.iter().copied().collect();
            e.extend(t.translation.iter());
            e
        };
        let diff = |k: usize, h: f64| -> Vec<f64> {
            let mut x = m.pack();
            let mut b = beta.clone();
            let eval = |x: &[f64], b: &JointState| entries(&KinematicModel::unpack(x, 2).unwrap(), b);
            let (plus, minus) = if k < n {
                x[k] += h;
                let p = eval(&x, &b);
                x[k] -= 2.0 * h;
                (p, eval(&x, &b))
            } else {
                b.0[k - n] += h;
                let p = eval(&x, &b);
                b.0[k - n] -= 2.0 * h;
                (p, eval(&x, &b))
            };
            plus.iter().zip(&minus).map(|(p, q)| (p - q) / (2.0 * h)).collect()
        };
        for k in 0..n + 2 {
            let a = diff(k, 1e-6);
            let b = diff(k, 5e-7);
            for (x, y) in a.iter().zip(&b) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
                assert!(rel < 1e-5, "param {k}: {x} vs {y}");
            }
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_bijective(seed in any::<u64>(), links in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng, links);
            let v = m.pack();
            prop_assert_eq!(v.len(), 12 + 3 * links);
            let back = KinematicModel::unpack(&v, links).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(back.pack(), v);
        }

        #[test]
        fn chain_is_rigid(seed in any::<u64>(), links in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng, links);
            let beta = JointState::new((0..links).map(|_| rng.random_range(-PI..PI)).collect());
            let t = m.full_chain(&beta).unwrap();
            prop_assert!(t.orthonormality_error() < 1e-9);
            prop_assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        }
    }
}
