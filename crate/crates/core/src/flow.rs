//! Fixed-step integration of vector fields in `t` and in log-time `tau`.
//!
//! In `tau = -log(1 - t)` the system `x' = u_tau(x) = (1 - t) v_t(x)` has no
//! terminal blow-up, so long runs toward `t = 1` are done there.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::DatasetSpec;
use crate::error::{check_dim, Error, Result};
use crate::field::{rescaled_jacobian, FieldKind, FieldSpec, VectorField};
use crate::linalg;
use crate::potential::{empirical_from_batch, Potential};
use crate::rng;
use crate::schedule::{t_of_tau, tau_of_t};
use crate::transport::{empirical_w2, fmt_f64, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    #[default]
    Rk4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `t` values, or `tau` values when `rescaled`.
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub method: Method,
    pub steps: usize,
    pub rescaled: bool,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.states[0].len();
        let mut header = vec![if self.rescaled { "tau" } else { "t" }.to_string()];
        header.extend((1..=d).map(|i| format!("x_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for (t, x) in self.times.iter().zip(&self.states) {
            let row: Vec<String> = std::iter::once(*t).chain(x.iter().copied()).map(fmt_f64).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn step<F>(f: &mut F, t: f64, x: &[f64], h: f64, method: Method) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let k1 = f(t, x)?;
    match method {
        Method::Euler => Ok(linalg::axpy(x, h, &k1)),
        Method::Rk4 => {
            let k2 = f(t + 0.5 * h, &linalg::axpy(x, 0.5 * h, &k1))?;
            let k3 = f(t + 0.5 * h, &linalg::axpy(x, 0.5 * h, &k2))?;
            let k4 = f(t + h, &linalg::axpy(x, h, &k3))?;
            Ok(x.iter()
                .enumerate()
                .map(|(i, xi)| xi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect())
        }
    }
}

fn run<F>(mut f: F, x_start: &[f64], t0: f64, t1: f64, steps: usize, method: Method, rescaled: bool) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let h = (t1 - t0) / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(t0);
    states.push(x_start.to_vec());
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let next = step(&mut f, t, &states[k], h, method)?;
        let t_next = if k + 1 == steps { t1 } else { t0 + (k + 1) as f64 * h };
        if !linalg::all_finite(&next) {
            return Err(Error::Integration { time: t_next });
        }
        times.push(t_next);
        states.push(next);
    }
    Ok(Trajectory {
        times,
        states,
        method,
        steps,
        rescaled,
    })
}

/// Integrates `x' = v_t(x)` from `t0` to `t1` with `steps` equal steps.
pub fn integrate(
    field: &dyn VectorField,
    x_start: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
    method: Method,
) -> Result<Trajectory> {
    check_dim(field.dim(), x_start.len())?;
    let eps = field.eps_t();
    if !(t0 >= eps && t0 < t1 && t1 <= 1.0 - eps) {
        return Err(Error::InvalidArgument(format!(
            "need {eps} <= t0 < t1 <= {}, got t0 = {t0}, t1 = {t1}",
            1.0 - eps
        )));
    }
    run(|t, x| field.eval(t, x), x_start, t0, t1, steps, method, false)
}

/// `u_tau(x)` with `t` clamped into the field's window, so `tau = 0` is usable
/// as a start time (it evaluates at `t = eps_t`).
fn rescaled_eval(field: &dyn VectorField, tau: f64, x: &[f64]) -> Result<Vec<f64>> {
    let eps = field.eps_t();
    let t = t_of_tau(tau)?.clamp(eps, 1.0 - eps);
    field.eval_rescaled(t, x)
}

/// Integrates the log-time system from `tau = 0` to `tau_max`; times are reported in `tau`.
pub fn integrate_rescaled(field: &dyn VectorField, x_start: &[f64], tau_max: f64, steps: usize) -> Result<Trajectory> {
    integrate_rescaled_between(field, x_start, 0.0, tau_max, steps, Method::Rk4)
}

pub fn integrate_rescaled_between(
    field: &dyn VectorField,
    x_start: &[f64],
    tau0: f64,
    tau1: f64,
    steps: usize,
    method: Method,
) -> Result<Trajectory> {
    check_dim(field.dim(), x_start.len())?;
    if !(tau0 >= 0.0 && tau1 > tau0 && tau1.is_finite()) {
        return Err(Error::InvalidArgument(format!("need 0 <= tau0 < tau1, got {tau0}, {tau1}")));
    }
    run(|tau, x| rescaled_eval(field, tau, x), x_start, tau0, tau1, steps, method, true)
}

/// RK4 on the base trajectory together with the variational equation
/// `Xi' = D u_tau(x) Xi`, using central-difference field Jacobians.
/// Returns the final state and the propagated `Xi`.
pub fn variational_flow(
    field: &dyn VectorField,
    x_start: &[f64],
    xi: &DMatrix<f64>,
    tau0: f64,
    tau1: f64,
    steps: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = field.dim();
    check_dim(d, x_start.len())?;
    check_dim(d, xi.nrows())?;
    if tau1 == tau0 {
        return Ok((x_start.to_vec(), xi.clone()));
    }
    if steps == 0 || !(tau1 > tau0) {
        return Err(Error::InvalidArgument("variational flow needs steps >= 1 and tau1 > tau0".into()));
    }
    let h = (tau1 - tau0) / steps as f64;
    let tangent = |tau: f64, x: &[f64], m: &DMatrix<f64>| -> Result<(Vec<f64>, DMatrix<f64>)> {
        let t = t_of_tau(tau)?.clamp(field.eps_t(), 1.0 - field.eps_t());
        let u = field.eval_rescaled(t, x)?;
        let j = rescaled_jacobian(field, t, x)?;
        Ok((u, j * m))
    };
    let mut x = x_start.to_vec();
    let mut m = xi.clone();
    for k in 0..steps {
        let tau = tau0 + k as f64 * h;
        let (k1, m1) = tangent(tau, &x, &m)?;
        let (k2, m2) = tangent(tau + 0.5 * h, &linalg::axpy(&x, 0.5 * h, &k1), &(&m + &m1 * (0.5 * h)))?;
        let (k3, m3) = tangent(tau + 0.5 * h, &linalg::axpy(&x, 0.5 * h, &k2), &(&m + &m2 * (0.5 * h)))?;
        let (k4, m4) = tangent(tau + h, &linalg::axpy(&x, h, &k3), &(&m + &m3 * h))?;
        for i in 0..d {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        m += (m1 + m2 * 2.0 + m3 * 2.0 + m4) * (h / 6.0);
        if !linalg::all_finite(&x) || m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { time: tau + h });
        }
    }
    Ok((x, m))
}

/// `D Phi_{tau_max}(x_start)` of the log-time flow started at `tau = 0`.
pub fn flow_jacobian(field: &dyn VectorField, x_start: &[f64], tau_max: f64, steps: usize) -> Result<DMatrix<f64>> {
    if !(tau_max >= 0.0) {
        return Err(Error::domain("tau_max", tau_max, "[0, inf)"));
    }
    let d = field.dim();
    Ok(variational_flow(field, x_start, &DMatrix::identity(d, d), 0.0, tau_max, steps)?.1)
}

/// Pushes `n` standard-normal draws from `t = eps_t` to `t1`, stepping
/// uniformly in log-time.
pub fn sample_pushforward(field: &dyn VectorField, n: usize, t1: f64, seed: u64, steps: usize) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let eps = field.eps_t();
    if !(t1 > eps && t1 <= 1.0 - eps) {
        return Err(Error::domain("t1", t1, format!("({eps}, {}]", 1.0 - eps)));
    }
    let mut r = rng::seeded(seed);
    let starts: Vec<Vec<f64>> = (0..n).map(|_| rng::normal_vec(&mut r, field.dim())).collect();
    push_all(field, &starts, tau_of_t(eps)?, tau_of_t(t1)?, steps)
}

fn push_all(field: &dyn VectorField, starts: &[Vec<f64>], tau0: f64, tau1: f64, steps: usize) -> Result<PointCloud> {
    let ends = starts
        .par_iter()
        .map(|x| Ok(integrate_rescaled_between(field, x, tau0, tau1, steps, Method::Rk4)?.last().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    PointCloud::new(ends)
}

/// Number of seeded starts in [`convergence_study`].
pub const CONVERGENCE_STARTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    /// Largest endpoint distance at `t = c` between empirical and population flows.
    pub traj_error: f64,
    /// Empirical W2 between the two pushforward clouds at `t = c`.
    pub w2: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "n,traj_error,w2")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.n, fmt_f64(r.traj_error), fmt_f64(r.w2))?;
        }
        Ok(())
    }
}

/// Compares flows of the population field and of exact fields built from
/// minibatch couplings of size `n`, at time `c`. Batches are drawn exactly as
/// in [`crate::potential::minibatch_prox_convergence`] with the same seed.
pub fn convergence_study(
    population: &FieldSpec,
    sampler: &DatasetSpec,
    n_list: &[usize],
    c: f64,
    seed: u64,
    steps: usize,
) -> Result<ConvergenceTable> {
    let FieldKind::ExactProx { potential, schedule } = population.kind() else {
        return Err(Error::InvalidArgument("population field must be an exact prox field".into()));
    };
    if matches!(potential, Potential::Empirical(_)) {
        return Err(Error::InvalidArgument("population potential must have a closed-form prox".into()));
    }
    check_dim(population.dim(), sampler.dim())?;
    let eps = population.eps_t();
    if !(c > eps && c < 1.0) {
        return Err(Error::domain("c", c, "(eps_t, 1)"));
    }
    if n_list.windows(2).any(|w| w[1] <= w[0]) || n_list.first() == Some(&0) {
        return Err(Error::InvalidArgument("n_list must be positive and strictly increasing".into()));
    }
    let mut r = rng::substream(seed, u64::MAX);
    let starts: Vec<Vec<f64>> = (0..CONVERGENCE_STARTS).map(|_| rng::normal_vec(&mut r, population.dim())).collect();
    let (tau0, tau1) = (tau_of_t(eps)?, tau_of_t(c)?);
    let reference = push_all(population, &starts, tau0, tau1, steps)?;
    let rows = n_list
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let phi_n = Potential::Empirical(empirical_from_batch(sampler, n, seed, i as u64)?);
            let field_n = FieldSpec::exact(phi_n, *schedule)?.with_eps_t(eps)?;
            let ends = push_all(&field_n, &starts, tau0, tau1, steps)?;
            let traj_error = ends
                .iter()
                .zip(reference.iter())
                .map(|(a, b)| linalg::dist(a, b))
                .fold(0.0, f64::max);
            Ok(ConvergenceRow {
                n,
                traj_error,
                w2: empirical_w2(&ends, &reference)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceTable { rows })
}
