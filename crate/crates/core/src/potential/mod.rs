//! Convex potentials and their proximal operators.
//!
//! `prox_{lambda F}(z) = argmin_u F(u) + |u - z|^2 / (2 lambda)`. For OT-CFM the
//! prox of the transport potential at `y / beta_t` with step `alpha_t / beta_t`
//! is exactly the map from a path point back to its clean endpoint.

mod convergence;
mod empirical;

use nalgebra::{DMatrix, DVector};

pub use convergence::{minibatch_prox_convergence, ConvergenceRow};
pub(crate) use convergence::empirical_from_batch;
pub use empirical::{build_empirical, EmpiricalPotential, PROX_MAX_ITERS, PROX_TOL};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng;
use crate::schedule::Schedule;

/// `1/2 (x - m)^T B (x - m) + <b, x>` with `B` symmetric positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticPotential {
    matrix: DMatrix<f64>,
    linear: Vec<f64>,
    center: Vec<f64>,
}

impl QuadraticPotential {
    pub fn new(matrix: DMatrix<f64>, linear: Vec<f64>, center: Vec<f64>) -> Result<Self> {
        let d = matrix.nrows();
        if d == 0 || matrix.ncols() != d {
            return Err(Error::InvalidArgument("quadratic matrix must be square and nonempty".into()));
        }
        check_dim(d, linear.len())?;
        check_dim(d, center.len())?;
        let norm = matrix.amax().max(1.0);
        if (&matrix - matrix.transpose()).amax() > 1e-12 * norm {
            return Err(Error::InvalidArgument("quadratic matrix must be symmetric".into()));
        }
        let min_eig = matrix.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-12 * norm {
            return Err(Error::InvalidArgument(format!(
                "quadratic matrix must be positive semidefinite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(Self {
            matrix,
            linear,
            center,
        })
    }

    /// `1/2 |x|^2` in dimension `d`.
    pub fn isotropic(d: usize) -> Self {
        Self {
            matrix: DMatrix::identity(d, d),
            linear: vec![0.0; d],
            center: vec![0.0; d],
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn linear(&self) -> &[f64] {
        &self.linear
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let r = DVector::from_iterator(x.len(), x.iter().zip(&self.center).map(|(a, b)| a - b));
        0.5 * r.dot(&(&self.matrix * &r)) + linalg::dot(&self.linear, x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let r = DVector::from_iterator(x.len(), x.iter().zip(&self.center).map(|(a, b)| a - b));
        let g = &self.matrix * r;
        g.iter().zip(&self.linear).map(|(a, b)| a + b).collect()
    }

    /// `(I + lambda B)^{-1} (z + lambda (B m - b))`
    fn prox(&self, lambda: f64, z: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let m = DVector::from_column_slice(&self.center);
        let bm = &self.matrix * m;
        let rhs = DVector::from_iterator(
            d,
            (0..d).map(|i| z[i] + lambda * (bm[i] - self.linear[i])),
        );
        let sys = DMatrix::identity(d, d) + &self.matrix * lambda;
        let chol = sys
            .cholesky()
            .ok_or_else(|| Error::NonFinite("I + lambda B is not positive definite".into()))?;
        Ok(chol.solve(&rhs).iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    Quadratic(QuadraticPotential),
    /// `1/2 p^2 + indicator(q = c)` on the plane: the potential of a Gaussian
    /// target supported on the horizontal line `q = c`.
    LineManifold { c: f64 },
    Empirical(EmpiricalPotential),
    /// `1/4 |x|^4`, a smooth but non-quadratic test potential.
    Quartic { dim: usize },
}

/// Minimiser of the prox objective with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxResult {
    pub point: Vec<f64>,
    /// `F(u) + |u - z|^2 / (2 lambda)` at the minimiser.
    pub objective: f64,
    /// Solver iterations; 0 for closed forms.
    pub iterations: usize,
    /// Planes active at the solution (empirical potentials only).
    pub active_set: Vec<usize>,
}

impl ProxResult {
    fn closed_form(point: Vec<f64>, objective: f64) -> Self {
        Self {
            point,
            objective,
            iterations: 0,
            active_set: Vec::new(),
        }
    }
}

impl Potential {
    pub fn half_norm_sq(d: usize) -> Self {
        Potential::Quadratic(QuadraticPotential::isotropic(d))
    }

    pub fn dim(&self) -> usize {
        match self {
            Potential::Quadratic(q) => q.dim(),
            Potential::LineManifold { .. } => 2,
            Potential::Empirical(e) => e.dim(),
            Potential::Quartic { dim } => *dim,
        }
    }

    pub fn is_smooth(&self) -> bool {
        matches!(self, Potential::Quadratic(_) | Potential::Quartic { .. })
    }

    /// Value in the extended reals; `+inf` off the domain.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(match self {
            Potential::Quadratic(q) => q.value(x),
            Potential::LineManifold { c } => {
                if x[1] == *c {
                    0.5 * x[0] * x[0]
                } else {
                    f64::INFINITY
                }
            }
            Potential::Empirical(e) => e.value(x),
            Potential::Quartic { .. } => 0.25 * linalg::norm_sq(x).powi(2),
        })
    }

    /// Gradient of a smooth potential.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        match self {
            Potential::Quadratic(q) => Ok(q.gradient(x)),
            Potential::Quartic { .. } => Ok(linalg::scale(x, linalg::norm_sq(x))),
            _ => Err(Error::Unsupported("gradient of a non-smooth potential".into())),
        }
    }

    /// One element of the subdifferential at `x`: the gradient for smooth
    /// potentials, the minimum-norm subgradient on the line, and the slope of the
    /// lowest-index active plane for empirical potentials.
    pub fn subgradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        match self {
            Potential::LineManifold { c } => {
                if x[1] != *c {
                    return Err(Error::InvalidArgument(format!(
                        "point ({}, {}) is outside the domain q = {c}",
                        x[0], x[1]
                    )));
                }
                Ok(vec![x[0], 0.0])
            }
            Potential::Empirical(e) => Ok(e.slope(e.argmax(x).1).to_vec()),
            _ => self.gradient(x),
        }
    }

    pub fn prox(&self, lambda: f64, z: &[f64]) -> Result<ProxResult> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::domain("lambda", lambda, "(0, inf)"));
        }
        check_dim(self.dim(), z.len())?;
        if !linalg::all_finite(z) {
            return Err(Error::NonFinite("prox input".into()));
        }
        let objective = |u: &[f64], f: f64| f + linalg::norm_sq(&linalg::sub(u, z)) / (2.0 * lambda);
        match self {
            Potential::Quadratic(q) => {
                let u = q.prox(lambda, z)?;
                let obj = objective(&u, q.value(&u));
                Ok(ProxResult::closed_form(u, obj))
            }
            Potential::LineManifold { c } => {
                let u = vec![z[0] / (1.0 + lambda), *c];
                let obj = objective(&u, 0.5 * u[0] * u[0]);
                Ok(ProxResult::closed_form(u, obj))
            }
            Potential::Empirical(e) => e.prox(lambda, z),
            Potential::Quartic { .. } => {
                // u = s z/|z| with s + lambda s^3 = |z|; Newton from s = |z| decreases monotonically.
                let r = linalg::norm(z);
                let u = if r == 0.0 {
                    vec![0.0; z.len()]
                } else {
                    let mut s = r;
                    for _ in 0..200 {
                        let g = s + lambda * s * s * s - r;
                        let next = s - g / (1.0 + 3.0 * lambda * s * s);
                        if next >= s || next <= 0.0 {
                            break;
                        }
                        s = next;
                    }
                    linalg::scale(z, s / r)
                };
                let obj = objective(&u, 0.25 * linalg::norm_sq(&u).powi(2));
                Ok(ProxResult::closed_form(u, obj))
            }
        }
    }

    /// Moreau envelope value and gradient `(z - prox(z)) / lambda`.
    pub fn moreau(&self, lambda: f64, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = self.prox(lambda, z)?;
        let grad = linalg::scale(&linalg::sub(z, &p.point), 1.0 / lambda);
        Ok((p.objective, grad))
    }
}

/// `grad psi_t^*(y) = prox_{lambda_t phi}(y / beta_t)`: the clean endpoint
/// recovered from a path point `y` at time `t`.
pub fn grad_psi_star(phi: &Potential, schedule: &Schedule, t: f64, y: &[f64]) -> Result<Vec<f64>> {
    let s = schedule.eval(t)?;
    let z = linalg::scale(y, 1.0 / s.beta);
    Ok(phi.prox(s.lambda, &z)?.point)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityReport {
    /// Smallest value of `phi(w) - phi(u) - <g, w - u>` over the probes.
    pub worst_slack: f64,
    pub ok: bool,
}

/// Checks that `g = (y - beta_t u) / alpha_t` is a subgradient of `phi` at
/// `u = grad_psi_star(y)` by sampling the subgradient inequality at 32 seeded
/// probes around `u` (on the line for the line potential) plus, for empirical
/// potentials, the plane anchors `u + a_k - g`.
pub fn verify_psi_star_duality(
    phi: &Potential,
    schedule: &Schedule,
    t: f64,
    y: &[f64],
    seed: u64,
) -> Result<DualityReport> {
    let s = schedule.eval(t)?;
    let u = grad_psi_star(phi, schedule, t, y)?;
    let g = linalg::scale(&linalg::axpy(y, -s.beta, &u), 1.0 / s.alpha);
    let fu = phi.value(&u)?;
    let mut r = rng::seeded(seed);
    let mut probes: Vec<Vec<f64>> = (0..32)
        .map(|_| {
            let step = rng::normal_vec(&mut r, u.len());
            let mut w = linalg::add(&u, &step);
            if let Potential::LineManifold { c } = phi {
                w[1] = *c;
            }
            w
        })
        .collect();
    if let Potential::Empirical(e) = phi {
        for k in 0..e.n_planes().min(256) {
            probes.push(linalg::add(&u, &linalg::sub(e.slope(k), &g)));
        }
    }
    let mut worst = f64::INFINITY;
    let mut scale = 1.0f64;
    for w in &probes {
        let fw = phi.value(w)?;
        let lin = linalg::dot(&g, &linalg::sub(w, &u));
        scale = scale.max(fw.abs().min(1e300)).max(lin.abs());
        worst = worst.min(fw - fu - lin);
    }
    Ok(DualityReport {
        worst_slack: worst,
        ok: worst >= -1e-7 * scale,
    })
}

/// Remainders `|prox_{lambda phi}(x) - (x - lambda grad phi(x))|` for each step.
pub fn prox_expansion_residual(phi: &Potential, x: &[f64], lambdas: &[f64]) -> Result<Vec<(f64, f64)>> {
    if !phi.is_smooth() {
        return Err(Error::Unsupported("first-order expansion needs a smooth potential".into()));
    }
    let grad = phi.gradient(x)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let p = phi.prox(lambda, x)?.point;
            let explicit = linalg::axpy(x, -lambda, &grad);
            Ok((lambda, linalg::dist(&p, &explicit)))
        })
        .collect()
}

/// Log-log least-squares slope of `|R_lambda|` against `lambda`.
pub fn expansion_slope(residuals: &[(f64, f64)]) -> f64 {
    let xs: Vec<f64> = residuals.iter().map(|r| r.0.ln()).collect();
    let ys: Vec<f64> = residuals.iter().map(|r| r.1.ln()).collect();
    linalg::linear_fit(&xs, &ys).0
}

/// Step sizes for the one-sided differences of [`prox_semiderivative`].
pub const SEMIDERIVATIVE_STEPS: [f64; 3] = [1e-3, 5e-4, 2.5e-4];

/// Semiderivative `DP_lambda(x1; h)` of `P_lambda = prox_{lambda f}` for the
/// shifted potential `f = phi - <x0, .>`, where `x0` is [`Potential::subgradient`]
/// at `x1` (so `x1` minimises `f`). Computed from one-sided differences with
/// two rounds of Richardson extrapolation.
pub fn prox_semiderivative(phi: &Potential, lambda: f64, x1: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    check_dim(phi.dim(), h.len())?;
    let x0 = phi.subgradient(x1)?;
    let shifted = |y: &[f64]| -> Result<Vec<f64>> {
        Ok(phi.prox(lambda, &linalg::axpy(y, lambda, &x0))?.point)
    };
    let base = shifted(x1)?;
    let quotients = SEMIDERIVATIVE_STEPS
        .iter()
        .map(|&eps| {
            let p = shifted(&linalg::axpy(x1, eps, h))?;
            Ok(linalg::scale(&linalg::sub(&p, &base), 1.0 / eps))
        })
        .collect::<Result<Vec<_>>>()?;
    // Each step halves eps, so first-order Richardson is 2 D(eps/2) - D(eps).
    let r1a: Vec<f64> = linalg::axpy(&linalg::scale(&quotients[1], 2.0), -1.0, &quotients[0]);
    let r1b: Vec<f64> = linalg::axpy(&linalg::scale(&quotients[2], 2.0), -1.0, &quotients[1]);
    let spread = linalg::dist(&r1a, &r1b);
    if spread > 1e-3 {
        return Err(Error::Extrapolation(spread));
    }
    Ok(linalg::axpy(&linalg::scale(&r1b, 4.0 / 3.0), -1.0 / 3.0, &r1a))
}

#[cfg(test)]
mod tests;
