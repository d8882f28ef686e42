//! Dense Levenberg–Marquardt for nonlinear least squares.
//!
//! Minimizes the total squared residual `Σ ρ(r_i)` (no ½ factor), where `ρ`
//! is the plain square unless a Huber loss is requested. Each iteration
//! solves the Marquardt-scaled normal equations
//! `(JᵀJ + λ·diag(JᵀJ)) δ = -Jᵀr` by Cholesky factorization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest diagonal entry used for damping, so that parameters the
/// residual does not depend on still receive a regularized step of zero.
const MIN_DIAGONAL: f64 = 1e-12;
/// Floor on the damping factor; keeps exact gauge directions bounded.
const MIN_DAMPING: f64 = 1e-12;
/// Damping beyond which the solver declares that no step reduces the cost.
const MAX_DAMPING: f64 = 1e32;

pub trait LeastSquaresProblem {
    fn num_params(&self) -> usize;

    fn num_residuals(&self) -> usize;

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Residuals and the `m × n` Jacobian at `x`. Falls back to central
    /// differences unless overridden.
    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let r = self.residuals(x)?;
        let j = numeric_jacobian(|y| self.residuals(y), x, DEFAULT_STEP)?;
        Ok((r, j))
    }

    /// Loss-weighted Gauss–Newton system at `x`. Problems with block
    /// structure can override this to avoid forming the dense Jacobian.
    fn normal_equations(&self, x: &DVector<f64>, loss: &Loss) -> Result<NormalEquations> {
        let (r, mut jac) = self.residuals_and_jacobian(x)?;
        let mut weighted = r.clone();
        if !matches!(loss, Loss::Squared) {
            for i in 0..r.len() {
                let w = loss.weight(r[i]).sqrt();
                weighted[i] *= w;
                jac.row_mut(i).scale_mut(w);
            }
        }
        Ok(NormalEquations {
            jtj: jac.tr_mul(&jac),
            jtr: jac.tr_mul(&weighted),
            residuals: r,
        })
    }
}

/// `JᵀWJ`, `JᵀWr` and the unweighted residuals at one linearization point.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub jtj: DMatrix<f64>,
    pub jtr: DVector<f64>,
    pub residuals: DVector<f64>,
}

/// Least-squares problem from closures, mainly for small ad-hoc fits.
pub struct FnProblem<F, J = fn(&DVector<f64>) -> Result<DMatrix<f64>>> {
    params: usize,
    residual_count: usize,
    residual: F,
    jacobian: Option<J>,
}

impl<F> FnProblem<F>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    pub fn new(params: usize, residual_count: usize, residual: F) -> Self {
        FnProblem {
            params,
            residual_count,
            residual,
            jacobian: None,
        }
    }
}

impl<F, J> FnProblem<F, J>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    J: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    pub fn with_jacobian(params: usize, residual_count: usize, residual: F, jacobian: J) -> Self {
        FnProblem {
            params,
            residual_count,
            residual,
            jacobian: Some(jacobian),
        }
    }
}

impl<F, J> LeastSquaresProblem for FnProblem<F, J>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    J: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    fn num_params(&self) -> usize {
        self.params
    }

    fn num_residuals(&self) -> usize {
        self.residual_count
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (self.residual)(x)
    }

    fn residuals_and_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let r = (self.residual)(x)?;
        let j = match &self.jacobian {
            Some(jac) => jac(x)?,
            None => numeric_jacobian(|y| (self.residual)(y), x, DEFAULT_STEP)?,
        };
        Ok((r, j))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Loss {
    #[default]
    Squared,
    /// Quadratic inside `|r| ≤ width`, linear outside.
    Huber { width: f64 },
}

impl Loss {
    fn rho(&self, r: f64) -> f64 {
        match *self {
            Loss::Squared => r * r,
            Loss::Huber { width } => {
                let a = r.abs();
                if a <= width {
                    r * r
                } else {
                    2.0 * width * a - width * width
                }
            }
        }
    }

    /// IRLS weight `ρ'(r) / 2r`.
    pub fn weight(&self, r: f64) -> f64 {
        match *self {
            Loss::Squared => 1.0,
            Loss::Huber { width } => {
                let a = r.abs();
                if a <= width {
                    1.0
                } else {
                    width / a
                }
            }
        }
    }

    pub fn cost(&self, r: &DVector<f64>) -> f64 {
        match self {
            Loss::Squared => sum_squares(r.as_slice()),
            _ => r.iter().fold(0.0, |acc, v| acc + self.rho(*v)),
        }
    }
}

/// Sequential sum of squares; the accumulation order is part of the
/// determinism contract.
pub fn sum_squares(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v * v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    /// Stop when `max |Jᵀr|` falls below this value.
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub loss: Loss,
    /// Evaluate independent residual blocks on the rayon pool. Results are
    /// identical either way; serial mode only changes scheduling.
    pub parallel: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iterations: 200,
            cost_tolerance: 1e-10,
            gradient_tolerance: 1e-10,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.1,
            loss: Loss::Squared,
            parallel: true,
        }
    }
}

impl SolveOptions {
    pub fn serial(self) -> Self {
        SolveOptions {
            parallel: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.cost_tolerance,
            self.gradient_tolerance,
            self.initial_damping,
            self.damping_up,
            self.damping_down,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if !positive || self.max_iterations == 0 {
            return Err(Error::Config("solver options must be positive".into()));
        }
        if self.damping_up <= 1.0 || self.damping_down >= 1.0 {
            return Err(Error::Config(
                "damping_up must exceed 1 and damping_down must be below 1".into(),
            ));
        }
        if let Loss::Huber { width } = self.loss {
            if !(width.is_finite() && width > 0.0) {
                return Err(Error::Config("Huber width must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The cost reached exactly zero.
    ZeroResidual,
    GradientTolerance,
    CostTolerance,
    /// No damped step lowers the cost any further.
    Stalled,
    MaxIterations,
}

impl Termination {
    pub fn converged(self) -> bool {
        !matches!(self, Termination::MaxIterations)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Termination::ZeroResidual => "zero_residual",
            Termination::GradientTolerance => "gradient_tolerance",
            Termination::CostTolerance => "cost_tolerance",
            Termination::Stalled => "stalled",
            Termination::MaxIterations => "max_iterations",
        }
    }
}

impl std::str::FromStr for Termination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "zero_residual" => Termination::ZeroResidual,
            "gradient_tolerance" => Termination::GradientTolerance,
            "cost_tolerance" => Termination::CostTolerance,
            "stalled" => Termination::Stalled,
            "max_iterations" => Termination::MaxIterations,
            other => return Err(Error::Config(format!("unknown termination reason {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub params: DVector<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
    /// `max |Jᵀr|` at the last linearization point.
    pub max_gradient: f64,
}

pub const DEFAULT_STEP: f64 = 1e-6;

/// Central-difference Jacobian with per-parameter step `h · max(1, |x_j|)`.
pub fn numeric_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut jac: Option<DMatrix<f64>> = None;
    let mut xp = x.clone();
    for j in 0..x.len() {
        let step = h * x[j].abs().max(1.0);
        xp[j] = x[j] + step;
        let plus = f(&xp)?;
        xp[j] = x[j] - step;
        let minus = f(&xp)?;
        xp[j] = x[j];
        if !plus.iter().chain(minus.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteEvaluation { param: j });
        }
        let jac = jac.get_or_insert_with(|| DMatrix::zeros(plus.len(), x.len()));
        let col = (plus - minus) / (2.0 * step);
        jac.set_column(j, &col);
    }
    Ok(jac.unwrap_or_else(|| DMatrix::zeros(f(x).map(|r| r.len()).unwrap_or(0), 0)))
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Runs Levenberg–Marquardt from `x0`.
///
/// Trial points whose residuals cannot be evaluated (for example a point
/// pushed behind a camera) are treated as rejected steps. Only a
/// non-finite residual at `x0` is an error.
pub fn levenberg_marquardt<P>(problem: &P, x0: DVector<f64>, opts: &SolveOptions) -> Result<SolveReport>
where
    P: LeastSquaresProblem + ?Sized,
{
    opts.validate()?;
    let loss = opts.loss;
    let n = x0.len();
    if n != problem.num_params() {
        return Err(Error::ParameterLength {
            expected: problem.num_params(),
            found: n,
        });
    }
    let mut x = x0;
    let r0 = problem.residuals(&x)?;
    if !all_finite(&r0) {
        return Err(Error::NonFiniteResidual {
            iteration: 0,
            params: x.iter().copied().collect(),
        });
    }
    let mut cost = loss.cost(&r0);
    let initial_cost = cost;
    let mut trace = vec![cost];
    let mut lambda = opts.initial_damping;
    let mut iterations = 0;
    let mut max_gradient = f64::NAN;

    let finish = |x: DVector<f64>, cost: f64, iterations, termination, trace, max_gradient| SolveReport {
        params: x,
        initial_cost,
        final_cost: cost,
        iterations,
        termination,
        cost_trace: trace,
        max_gradient,
    };

    if cost == 0.0 {
        return Ok(finish(x, cost, 0, Termination::ZeroResidual, trace, 0.0));
    }

    loop {
        if iterations >= opts.max_iterations {
            return Ok(finish(x, cost, iterations, Termination::MaxIterations, trace, max_gradient));
        }
        let NormalEquations {
            jtj: hessian,
            jtr: gradient,
            residuals: r,
        } = problem.normal_equations(&x, &loss)?;
        if !all_finite(&r) || !hessian.iter().chain(gradient.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteResidual {
                iteration: iterations,
                params: x.iter().copied().collect(),
            });
        }
        max_gradient = gradient.amax();
        if max_gradient <= opts.gradient_tolerance {
            return Ok(finish(x, cost, iterations, Termination::GradientTolerance, trace, max_gradient));
        }
        iterations += 1;

        // Inner loop: raise damping until a step lowers the cost.
        loop {
            let mut damped = hessian.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * hessian[(i, i)].max(MIN_DIAGONAL);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= opts.damping_up;
                if lambda > MAX_DAMPING {
                    return Ok(finish(x, cost, iterations, Termination::Stalled, trace, max_gradient));
                }
                continue;
            };
            let step = chol.solve(&(-&gradient));
            let candidate = &x + &step;
            let accepted = match problem.residuals(&candidate) {
                Ok(rc) if all_finite(&rc) => {
                    let c = loss.cost(&rc);
                    (c < cost).then_some(c)
                }
                _ => None,
            };
            match accepted {
                Some(new_cost) => {
                    let decrease = (cost - new_cost) / cost;
                    x = candidate;
                    cost = new_cost;
                    trace.push(cost);
                    lambda = (lambda * opts.damping_down).max(MIN_DAMPING);
                    if cost == 0.0 {
                        return Ok(finish(x, cost, iterations, Termination::ZeroResidual, trace, max_gradient));
                    }
                    if decrease < opts.cost_tolerance {
                        return Ok(finish(x, cost, iterations, Termination::CostTolerance, trace, max_gradient));
                    }
                    break;
                }
                None => {
                    lambda *= opts.damping_up;
                    if lambda > MAX_DAMPING {
                        return Ok(finish(x, cost, iterations, Termination::Stalled, trace, max_gradient));
                    }
                }
            }
        }
    }
}

/// `max |Jᵀr|` of a problem at `x`.
pub fn max_gradient<P: LeastSquaresProblem + ?Sized>(problem: &P, x: &DVector<f64>) -> Result<f64> {
    Ok(problem.normal_equations(x, &Loss::Squared)?.jtr.amax())
}

/// Largest elementwise discrepancy between two Jacobians, each entry
/// divided by `max(1, |reference|)`.
pub fn jacobian_relative_error(analytic: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    analytic
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rosenbrock() -> impl LeastSquaresProblem {
        FnProblem::new(2, 2, |x: &DVector<f64>| {
            Ok(DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]))
        })
    }

    #[test]
    fn linear_problem_converges_in_three_iterations() {
        let p = FnProblem::with_jacobian(
            1,
            1,
            |x: &DVector<f64>| Ok(DVector::from_element(1, x[0] - 3.0)),
            |_: &DVector<f64>| Ok(DMatrix::from_element(1, 1, 1.0)),
        );
        let report = levenberg_marquardt(&p, DVector::zeros(1), &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(report.params[0], 3.0, epsilon = 1e-10);
        assert!(report.iterations <= 3, "{} iterations", report.iterations);
    }

    #[test]
    fn rosenbrock_reaches_minimum() {
        let report = levenberg_marquardt(
            &rosenbrock(),
            DVector::from_vec(vec![-1.2, 1.0]),
            &SolveOptions::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(report.params[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(report.params[1], 1.0, epsilon = 1e-6);
        assert!(report.termination.converged());
        assert!(report.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(report.final_cost <= report.initial_cost);
    }

    #[test]
    fn zero_residual_start_returns_immediately() {
        let p = FnProblem::new(1, 1, |x: &DVector<f64>| Ok(DVector::from_element(1, x[0] - 2.0)));
        let report = levenberg_marquardt(&p, DVector::from_element(1, 2.0), &SolveOptions::default()).unwrap();
        assert_eq!(report.iterations, 0);
        assert_eq!(report.final_cost, 0.0);
        assert_eq!(report.termination, Termination::ZeroResidual);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let p = FnProblem::new(1, 1, |x: &DVector<f64>| Ok(DVector::from_element(1, x[0].ln())));
        let err = levenberg_marquardt(&p, DVector::from_element(1, -1.0), &SolveOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteResidual { iteration: 0, .. }));
    }

    #[test]
    fn rank_deficient_problem_is_handled_by_damping() {
        // Only x0 + x1 is observable.
        let p = FnProblem::new(2, 2, |x: &DVector<f64>| {
            Ok(DVector::from_vec(vec![x[0] + x[1] - 1.0, 2.0 * (x[0] + x[1] - 1.0)]))
        });
        let report = levenberg_marquardt(&p, DVector::from_vec(vec![3.0, 0.5]), &SolveOptions::default()).unwrap();
        assert!(report.final_cost < 1e-18);
        assert_abs_diff_eq!(report.params[0] + report.params[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn unevaluable_trial_points_are_rejected() {
        // Residual undefined for x < 0; the minimizer sits at the boundary side.
        let p = FnProblem::new(1, 1, |x: &DVector<f64>| {
            if x[0] < 0.0 {
                Err(Error::BehindCamera { depth: x[0] })
            } else {
                Ok(DVector::from_element(1, x[0].sqrt() - 0.5))
            }
        });
        let report = levenberg_marquardt(&p, DVector::from_element(1, 4.0), &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(report.params[0], 0.25, epsilon = 1e-8);
    }

    #[test]
    fn huber_loss_downweights_outlier() {
        // Fit a constant to data with one gross outlier.
        let data = [1.0, 1.1, 0.9, 1.05, 0.95, 25.0];
        let p = FnProblem::new(1, data.len(), move |x: &DVector<f64>| {
            Ok(DVector::from_iterator(data.len(), data.iter().map(|d| d - x[0])))
        });
        let plain = levenberg_marquardt(&p, DVector::zeros(1), &SolveOptions::default()).unwrap();
        let opts = SolveOptions {
            loss: Loss::Huber { width: 2.0 },
            ..SolveOptions::default()
        };
        let robust = levenberg_marquardt(&p, DVector::zeros(1), &opts).unwrap();
        assert_abs_diff_eq!(plain.params[0], 5.0, epsilon = 1e-9);
        assert!((robust.params[0] - 1.0).abs() < 0.5, "{}", robust.params[0]);
        assert!(robust.cost_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn numeric_jacobian_examples() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -3.0, 0.5, 4.0, -1.0]);
        let lin = |x: &DVector<f64>| Ok(&a * x);
        let j = numeric_jacobian(lin, &DVector::from_vec(vec![0.3, -2.0]), DEFAULT_STEP).unwrap();
        assert_abs_diff_eq!(j, a, epsilon = 1e-8);

        let f = |x: &DVector<f64>| Ok(DVector::from_vec(vec![x[0] * x[0], x[0] * x[1]]));
        let j = numeric_jacobian(f, &DVector::from_vec(vec![2.0, 3.0]), DEFAULT_STEP).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 3.0, 2.0]);
        assert_abs_diff_eq!(j, expected, epsilon = 1e-6);

        let c = |_: &DVector<f64>| Ok(DVector::from_vec(vec![1.0, 2.0]));
        let j = numeric_jacobian(c, &DVector::from_vec(vec![5.0, 6.0, 7.0]), DEFAULT_STEP).unwrap();
        assert_eq!(j, DMatrix::zeros(2, 3));
    }

    #[test]
    fn numeric_jacobian_rejects_non_finite() {
        let f = |x: &DVector<f64>| Ok(DVector::from_element(1, (x[0] - 1e-7).ln()));
        let err = numeric_jacobian(f, &DVector::zeros(1), DEFAULT_STEP).unwrap_err();
        assert!(matches!(err, Error::NonFiniteEvaluation { param: 0 }));
    }

    #[test]
    fn deterministic_iterates() {
        let run = || {
            levenberg_marquardt(&rosenbrock(), DVector::from_vec(vec![-1.2, 1.0]), &SolveOptions::default().serial())
                .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.cost_trace, b.cost_trace);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn stationary_at_solution() {
        let report = levenberg_marquardt(
            &rosenbrock(),
            DVector::from_vec(vec![-1.2, 1.0]),
            &SolveOptions::default(),
        )
        .unwrap();
        let g = max_gradient(&rosenbrock(), &report.params).unwrap();
        assert!(g <= 1e-6 * (1.0 + report.final_cost));
    }
}
