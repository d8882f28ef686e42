//! Transform chains built from single-parameter elementary motions.
//!
//! Every Euler pose and DH link is expanded into a product of pure rotations
//! and pure translations about coordinate axes. For a chain
//! `T = F_1 ⋯ F_N` applied to a point `p`, the derivative with respect to the
//! parameter of factor `k` is
//!
//! ```text
//! ∂(T p)/∂q_k = R(F_1 ⋯ F_{k-1}) · g_k(s_k),   s_k = F_k ⋯ F_N p
//! ```
//!
//! where `g_k(s) = a × s` for a rotation about axis `a` and `g_k(s) = a` for
//! a translation along it. This is independent of the closed-form
//! evaluation in [`crate::kinematics`], which makes the two useful as mutual
//! checks.

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{rot_x, rot_y, rot_z, Pose6, RigidTransform};
use crate::kinematics::{DhLink, JointState, KinematicModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn unit(self) -> Vector3<f64> {
        match self {
            Axis::X => Vector3::x(),
            Axis::Y => Vector3::y(),
            Axis::Z => Vector3::z(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    Rotation(Axis),
    Translation(Axis),
}

impl Motion {
    fn transform(self, value: f64) -> RigidTransform {
        match self {
            Motion::Rotation(axis) => RigidTransform::from_rotation(match axis {
                Axis::X => rot_x(value),
                Axis::Y => rot_y(value),
                Axis::Z => rot_z(value),
            }),
            Motion::Translation(axis) => RigidTransform::from_translation(axis.unit() * value),
        }
    }
}

#[derive(Debug, Clone)]
struct Factor {
    transform: RigidTransform,
    /// Parameter index and motion type for free factors.
    free: Option<(usize, Motion)>,
}

/// Ordered product of elementary and fixed transforms, leftmost first.
#[derive(Debug, Clone, Default)]
pub struct Chain {
    factors: Vec<Factor>,
}

/// Where the parameters of a kinematic model live in an optimization vector.
#[derive(Debug, Clone, Copy, Default)]
pub struct ModelIndex {
    /// Offset of the packed `12 + 3L` kinematic block, if it is free.
    pub kinematics: Option<usize>,
    /// Offset of the `L` joint angles, if they are free.
    pub joints: Option<usize>,
}

impl Chain {
    pub fn new() -> Self {
        Chain::default()
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn push_elementary(&mut self, motion: Motion, value: f64, param: Option<usize>) -> &mut Self {
        self.factors.push(Factor {
            transform: motion.transform(value),
            free: param.map(|i| (i, motion)),
        });
        self
    }

    pub fn push_fixed(&mut self, transform: RigidTransform) -> &mut Self {
        self.factors.push(Factor {
            transform,
            free: None,
        });
        self
    }

    /// Appends `T(τ)`; when `first_param` is given the six parameters are
    /// free at indices `first_param + [0..6)` in `[rx, ry, rz, tx, ty, tz]`
    /// order.
    pub fn push_pose(&mut self, pose: &Pose6, first_param: Option<usize>) -> &mut Self {
        let idx = |k: usize| first_param.map(|i| i + k);
        self.push_elementary(Motion::Translation(Axis::X), pose.tx, idx(3))
            .push_elementary(Motion::Translation(Axis::Y), pose.ty, idx(4))
            .push_elementary(Motion::Translation(Axis::Z), pose.tz, idx(5))
            .push_elementary(Motion::Rotation(Axis::Z), pose.rz, idx(2))
            .push_elementary(Motion::Rotation(Axis::Y), pose.ry, idx(1))
            .push_elementary(Motion::Rotation(Axis::X), pose.rx, idx(0))
    }

    /// Appends one DH link. `link_param` indexes `[d, a, α]`.
    pub fn push_dh(
        &mut self,
        theta: f64,
        theta_param: Option<usize>,
        link: &DhLink,
        link_param: Option<usize>,
    ) -> &mut Self {
        let idx = |k: usize| link_param.map(|i| i + k);
        self.push_elementary(Motion::Rotation(Axis::Z), theta, theta_param)
            .push_elementary(Motion::Translation(Axis::Z), link.d, idx(0))
            .push_elementary(Motion::Translation(Axis::X), link.a, idx(1))
            .push_elementary(Motion::Rotation(Axis::X), link.alpha, idx(2))
    }

    /// Appends the full static-to-dynamic chain `T(τ_d)·A_1⋯A_L·T(τ_s)`.
    pub fn push_model(&mut self, model: &KinematicModel, beta: &JointState, index: ModelIndex) -> &mut Self {
        let l = model.num_links();
        let kin = |offset: usize| index.kinematics.map(|k| k + offset);
        self.push_pose(&model.tau_d, kin(0));
        for (j, (link, theta)) in model.links.iter().zip(beta.angles()).enumerate() {
            self.push_dh(*theta, index.joints.map(|b| b + j), link, kin(6 + 3 * j));
        }
        self.push_pose(&model.tau_s, kin(6 + 3 * l))
    }

    pub fn transform(&self) -> RigidTransform {
        self.factors
            .iter()
            .fold(RigidTransform::identity(), |acc, f| acc * f.transform)
    }

    /// Precomputes prefix rotations for repeated point derivatives.
    pub fn linearize(&self) -> LinearizedChain<'_> {
        let mut prefix_rotation = Vec::with_capacity(self.factors.len());
        let mut acc = RigidTransform::identity();
        for f in &self.factors {
            prefix_rotation.push(acc.rotation);
            acc = acc * f.transform;
        }
        LinearizedChain {
            chain: self,
            prefix_rotation,
            total: acc,
        }
    }
}

/// A chain with cached prefix products.
pub struct LinearizedChain<'a> {
    chain: &'a Chain,
    /// Rotation of `F_1 ⋯ F_{k-1}` for each factor `k`.
    prefix_rotation: Vec<Matrix3<f64>>,
    total: RigidTransform,
}

impl LinearizedChain<'_> {
    pub fn transform(&self) -> &RigidTransform {
        &self.total
    }

    /// Returns `T p` and pushes `(parameter, ∂(T p)/∂q)` for every free
    /// factor into `out` (cleared first). Repeated parameter indices are
    /// reported separately and must be summed by the caller.
    pub fn apply_with_derivatives(&self, p: &Vector3<f64>, out: &mut Vec<(usize, Vector3<f64>)>) -> Vector3<f64> {
        out.clear();
        let mut s = *p;
        for (k, f) in self.chain.factors.iter().enumerate().rev() {
            s = f.transform.apply(&s);
            if let Some((param, motion)) = f.free {
                let g = match motion {
                    Motion::Rotation(axis) => axis.unit().cross(&s),
                    Motion::Translation(axis) => axis.unit(),
                };
                out.push((param, self.prefix_rotation[k] * g));
            }
        }
        s
    }

    /// Returns `q = T⁻¹ p` and its derivatives,
    /// `∂q/∂x = -Rᵀ · ∂(T y)/∂x |_{y=q}`.
    pub fn apply_inverse_with_derivatives(
        &self,
        p: &Vector3<f64>,
        out: &mut Vec<(usize, Vector3<f64>)>,
    ) -> Vector3<f64> {
        let inv = self.total.inverse();
        let q = inv.apply(p);
        self.apply_with_derivatives(&q, out);
        for (_, d) in out.iter_mut() {
            *d = -(inv.rotation * *d);
        }
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_model(rng: &mut impl Rng, links: usize) -> KinematicModel {
        let pose = |rng: &mut dyn rand::RngCore| {
            Pose6::new(
                rng.random_range(-PI..PI),
                rng.random_range(-1.2..1.2),
                rng.random_range(-PI..PI),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            )
        };
        KinematicModel {
            tau_s: pose(rng),
            links: (0..links)
                .map(|_| {
                    DhLink::new(
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-PI..PI),
                    )
                })
                .collect(),
            tau_d: pose(rng),
        }
    }

    #[test]
    fn elementary_product_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for links in 1..4 {
            let m = random_model(&mut rng, links);
            let beta = JointState::new((0..links).map(|_| rng.random_range(-PI..PI)).collect());
            let mut chain = Chain::new();
            chain.push_model(&m, &beta, ModelIndex::default());
            let a = chain.transform();
            let b = m.full_chain(&beta).unwrap();
            assert_abs_diff_eq!(a.rotation, b.rotation, epsilon = 1e-12);
            assert_abs_diff_eq!(a.translation, b.translation, epsilon = 1e-12);
        }
    }

    #[test]
    fn point_derivatives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let links = 2;
        let m = random_model(&mut rng, links);
        let beta = JointState::new(vec![0.7, -0.4]);
        let n = m.parameter_count();
        let index = ModelIndex {
            kinematics: Some(0),
            joints: Some(n),
        };
        let mut chain = Chain::new();
        chain.push_model(&m, &beta, index);
        let lin = chain.linearize();
        let p = Vector3::new(0.3, -0.1, 0.8);

        let eval = |x: &[f64], inverse: bool| {
            let model = KinematicModel::unpack(&x[..n], links).unwrap();
            let t = model.full_chain(&JointState::new(x[n..].to_vec())).unwrap();
            if inverse {
                t.inverse().apply(&p)
            } else {
                t.apply(&p)
            }
        };
        let mut x = m.pack();
        x.extend_from_slice(beta.angles());

        for inverse in [false, true] {
            let mut derivs = Vec::new();
            let value = if inverse {
                lin.apply_inverse_with_derivatives(&p, &mut derivs)
            } else {
                lin.apply_with_derivatives(&p, &mut derivs)
            };
            assert_abs_diff_eq!(value, eval(&x, inverse), epsilon = 1e-12);
            assert_eq!(derivs.len(), n + links);
            for (param, d) in derivs {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[param] += h;
                xm[param] -= h;
                let fd = (eval(&xp, inverse) - eval(&xm, inverse)) / (2.0 * h);
                assert_abs_diff_eq!(d, fd, epsilon = 1e-8);
            }
        }
    }
}
