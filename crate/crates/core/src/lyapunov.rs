//! Terminal Lyapunov analysis of OT-CFM flows.
//!
//! Near `t = 1` the rescaled field `(1 - t) v_t` has a Jacobian whose
//! eigenvalues split into a tangential cluster near 0 and a normal cluster
//! near `-gamma`; exponents of the log-time flow map show the same split.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::{rescaled_jacobian, VectorField};
use crate::flow::{integrate_rescaled_between, variational_flow, Method};
use crate::linalg;
use crate::schedule::tau_of_t;
use crate::transport::{fmt_f64, PointCloud};

/// Log-time step used when advancing trajectories between grid times.
pub const TAU_STEP: f64 = 0.01;
/// Interval between renormalisations of tangent vectors.
pub const RENORM_INTERVAL: f64 = 0.5;

/// An eigenvalue counts as complex when `|imag| > 0.1 |real| + 0.1`.
pub fn is_complex(re: f64, im: f64) -> bool {
    im.abs() > 0.1 * re.abs() + 0.1
}

/// Real parts of the eigenvalues of `m`, sorted descending, and how many were complex.
pub fn sorted_real_eigenvalues(m: &DMatrix<f64>) -> (Vec<f64>, usize) {
    let eig = m.complex_eigenvalues();
    let flagged = eig.iter().filter(|z| is_complex(z.re, z.im)).count();
    let mut re: Vec<f64> = eig.iter().map(|z| z.re).collect();
    re.sort_by(|a, b| b.total_cmp(a));
    (re, flagged)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub t_grid: Vec<f64>,
    /// `mean[k][i]`: mean over starts of the `i`-th largest real part at `t_grid[k]`.
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    /// Complex eigenvalues flagged at each grid time, summed over starts.
    pub complex_flags: Vec<usize>,
    pub n_trajectories: usize,
    /// `per_start[s][k]`: sorted real parts for start `s` at `t_grid[k]`.
    pub per_start: Vec<Vec<Vec<f64>>>,
    /// `states[s][k]`: position of start `s` at `t_grid[k]`.
    pub states: Vec<Vec<Vec<f64>>>,
}

fn mean_std(rows: &[&Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let std = (0..d)
        .map(|i| (rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

impl SpectrumReport {
    fn aggregate(t_grid: Vec<f64>, per_start: Vec<Vec<Vec<f64>>>, states: Vec<Vec<Vec<f64>>>, complex_flags: Vec<usize>) -> Self {
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for k in 0..t_grid.len() {
            let rows: Vec<&Vec<f64>> = per_start.iter().map(|s| &s[k]).collect();
            let (m, s) = mean_std(&rows);
            mean.push(m);
            std.push(s);
        }
        Self {
            t_grid,
            mean,
            std,
            complex_flags,
            n_trajectories: per_start.len(),
            per_start,
            states,
        }
    }

    /// The report restricted to starts with `keep[s]` (flags are not recomputed).
    pub fn subset(&self, keep: &[bool]) -> Result<Self> {
        check_dim(self.n_trajectories, keep.len())?;
        let idx: Vec<usize> = (0..keep.len()).filter(|&s| keep[s]).collect();
        if idx.is_empty() {
            return Err(Error::InvalidArgument("subset keeps no trajectories".into()));
        }
        Ok(Self::aggregate(
            self.t_grid.clone(),
            idx.iter().map(|&s| self.per_start[s].clone()).collect(),
            idx.iter().map(|&s| self.states[s].clone()).collect(),
            self.complex_flags.clone(),
        ))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.mean.first().map_or(0, |m| m.len());
        let mut header = vec!["t".to_string()];
        for i in 1..=d {
            header.push(format!("eig{i}_mean"));
            header.push(format!("eig{i}_std"));
        }
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.t_grid.len() {
            let mut row = vec![fmt_f64(self.t_grid[k])];
            for i in 0..d {
                row.push(fmt_f64(self.mean[k][i]));
                row.push(fmt_f64(self.std[k][i]));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Integrates every start (from `t = eps_t`, in log-time) through the grid and
/// records the spectrum of `(1 - t) D v_t` at each grid time.
pub fn jacobian_spectrum(field: &dyn VectorField, starts: &PointCloud, t_grid: &[f64]) -> Result<SpectrumReport> {
    check_dim(field.dim(), starts.dim())?;
    let eps = field.eps_t();
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("t_grid must be nonempty and strictly increasing".into()));
    }
    if let Some(&bad) = t_grid.iter().find(|&&t| !(t > eps && t < 1.0 - eps)) {
        return Err(Error::domain("t", bad, format!("({eps}, {})", 1.0 - eps)));
    }
    let taus = t_grid.iter().map(|&t| tau_of_t(t)).collect::<Result<Vec<_>>>()?;
    let tau_start = tau_of_t(eps)?;
    let runs = starts
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|x0| {
            let mut x = x0.to_vec();
            let mut tau = tau_start;
            let mut eigs = Vec::with_capacity(taus.len());
            let mut states = Vec::with_capacity(taus.len());
            let mut flags = Vec::with_capacity(taus.len());
            for (&t, &target) in t_grid.iter().zip(&taus) {
                let steps = ((target - tau) / TAU_STEP).ceil().max(1.0) as usize;
                x = integrate_rescaled_between(field, &x, tau, target, steps, Method::Rk4)?.last().to_vec();
                tau = target;
                let (re, flagged) = sorted_real_eigenvalues(&rescaled_jacobian(field, t, &x)?);
                eigs.push(re);
                states.push(x.clone());
                flags.push(flagged);
            }
            Ok((eigs, states, flags))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut complex_flags = vec![0usize; t_grid.len()];
    let (mut per_start, mut states) = (Vec::new(), Vec::new());
    for (e, s, f) in runs {
        for (k, c) in f.into_iter().enumerate() {
            complex_flags[k] += c;
        }
        per_start.push(e);
        states.push(s);
    }
    Ok(SpectrumReport::aggregate(t_grid.to_vec(), per_start, states, complex_flags))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentReport {
    pub directions: Vec<Vec<f64>>,
    pub exponents: Vec<f64>,
    pub fit_window: (f64, f64),
    /// Root-mean-square residual of each log-norm fit.
    pub residuals: Vec<f64>,
}

/// Minimum `tau_max` for [`terminal_exponents`].
pub const MIN_TAU_MAX: f64 = 4.0;

/// Propagates each direction with the variational equation from `tau = 0`,
/// renormalising every [`RENORM_INTERVAL`], and fits the slope of
/// `log |xi(tau)|` over `[tau_max / 2, tau_max]` by least squares.
pub fn terminal_exponents(
    field: &dyn VectorField,
    x_start: &[f64],
    directions: &[Vec<f64>],
    tau_max: f64,
) -> Result<ExponentReport> {
    let d = field.dim();
    check_dim(d, x_start.len())?;
    if !(tau_max >= MIN_TAU_MAX && tau_max.is_finite()) {
        return Err(Error::domain("tau_max", tau_max, format!("[{MIN_TAU_MAX}, inf)")));
    }
    if directions.is_empty() {
        return Err(Error::InvalidArgument("at least one direction is required".into()));
    }
    for v in directions {
        check_dim(d, v.len())?;
        if linalg::norm(v) == 0.0 {
            return Err(Error::InvalidArgument("directions must be nonzero".into()));
        }
    }
    let k = directions.len();
    let mut xi = DMatrix::from_fn(d, k, |i, j| directions[j][i] / linalg::norm(&directions[j]));
    let mut log_acc = vec![0.0f64; k];
    let steps_per_block = (RENORM_INTERVAL / TAU_STEP).round() as usize;
    let h = RENORM_INTERVAL / steps_per_block as f64;
    let blocks = (tau_max / RENORM_INTERVAL).ceil() as usize;
    let lo = tau_max / 2.0;
    let mut samples: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut x = x_start.to_vec();
    let mut tau = 0.0;
    'outer: for _ in 0..blocks {
        for _ in 0..steps_per_block {
            let next = (tau + h).min(tau_max);
            if next <= tau {
                break 'outer;
            }
            let (nx, nxi) = variational_flow(field, &x, &xi, tau, next, 1)?;
            x = nx;
            xi = nxi;
            tau = next;
            if tau >= lo - 1e-12 {
                let logs = (0..k).map(|j| log_acc[j] + xi.column(j).norm().ln()).collect();
                samples.push((tau, logs));
            }
        }
        for j in 0..k {
            let n = xi.column(j).norm();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Underflow(tau));
            }
            log_acc[j] += n.ln();
            xi.column_mut(j).scale_mut(1.0 / n);
        }
    }
    let taus: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let mut exponents = Vec::with_capacity(k);
    let mut residuals = Vec::with_capacity(k);
    for j in 0..k {
        let ys: Vec<f64> = samples.iter().map(|s| s.1[j]).collect();
        let (slope, intercept) = linalg::linear_fit(&taus, &ys);
        let rms = (taus
            .iter()
            .zip(&ys)
            .map(|(t, y)| (y - slope * t - intercept).powi(2))
            .sum::<f64>()
            / taus.len() as f64)
            .sqrt();
        exponents.push(slope);
        residuals.push(rms);
    }
    Ok(ExponentReport {
        directions: directions.to_vec(),
        exponents,
        fit_window: (lo, tau_max),
        residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Manifold {
    /// The horizontal line `q = c` in the plane.
    Line { c: f64 },
    /// The centred circle of radius `r`.
    Circle { r: f64 },
}

impl Manifold {
    pub fn distance(&self, x: &[f64]) -> f64 {
        match *self {
            Manifold::Line { c } => (x[1] - c).abs(),
            Manifold::Circle { r } => (linalg::norm(x) - r).abs(),
        }
    }
}

/// Orthonormal tangent and normal bases at a point within `1e-6` of the manifold.
pub fn tangent_normal_split(manifold: &Manifold, x1: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    check_dim(2, x1.len())?;
    if manifold.distance(x1) > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "point ({}, {}) is {} away from the manifold",
            x1[0],
            x1[1],
            manifold.distance(x1)
        )));
    }
    Ok(match *manifold {
        Manifold::Line { .. } => (vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]),
        Manifold::Circle { .. } => {
            let n = linalg::norm(x1);
            (vec![vec![-x1[1] / n, x1[0] / n]], vec![vec![x1[0] / n, x1[1] / n]])
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub n_tangential: usize,
    pub n_normal: usize,
    /// Largest difference between neighbours in the sorted spectrum.
    pub gap: f64,
}

/// Classifies eigenvalues nearer to 0 than to `-gamma` (above `-gamma / 2`) as tangential.
pub fn classify_spectrum(eigs: &[f64], gamma: f64) -> GapReport {
    let mut sorted = eigs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n_tangential = sorted.iter().filter(|&&e| e > -gamma / 2.0).count();
    let gap = sorted.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
    GapReport {
        n_tangential,
        n_normal: sorted.len() - n_tangential,
        gap,
    }
}

/// [`classify_spectrum`] on the mean spectrum at the latest grid time.
pub fn spectrum_gap(report: &SpectrumReport, gamma: f64) -> GapReport {
    classify_spectrum(report.mean.last().map_or(&[][..], |m| m.as_slice()), gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldSpec;
    use crate::potential::Potential;
    use crate::schedule::Schedule;

    fn line(c: f64, schedule: Schedule) -> FieldSpec {
        FieldSpec::exact(Potential::LineManifold { c }, schedule).unwrap()
    }

    #[test]
    fn line_manifold_spectrum_is_exact() {
        let starts = PointCloud::new(vec![vec![0.3, 2.0], vec![-1.0, -0.5], vec![2.0, 1.0]]).unwrap();
        let rep = jacobian_spectrum(&line(1.0, Schedule::Affine), &starts, &[0.5, 0.7, 0.9, 0.99]).unwrap();
        for m in &rep.mean {
            assert!(m[0].abs() < 1e-6 && (m[1] + 1.0).abs() < 1e-6, "{m:?}");
        }
        assert_eq!(rep.complex_flags, vec![0; 4]);
    }

    #[test]
    fn zero_field_spectrum_is_zero() {
        let starts = PointCloud::new(vec![vec![0.3, 2.0]]).unwrap();
        let rep = jacobian_spectrum(&FieldSpec::zero(2).unwrap(), &starts, &[0.5]).unwrap();
        assert_eq!(rep.mean[0], vec![0.0, 0.0]);
        assert!(jacobian_spectrum(&FieldSpec::zero(2).unwrap(), &starts, &[0.5, 1.0]).is_err());
    }

    #[test]
    fn rotation_is_flagged_complex() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert_eq!(sorted_real_eigenvalues(&m).1, 2);
    }

    #[test]
    fn exponents_on_line_manifold() {
        let rep = terminal_exponents(&line(1.0, Schedule::Affine), &[0.4, 2.5], &[vec![0.0, 1.0], vec![1.0, 0.0]], 8.0).unwrap();
        assert!((rep.exponents[0] + 1.0).abs() < 0.02, "{rep:?}");
        assert!(rep.exponents[1].abs() < 0.05, "{rep:?}");
        assert_eq!(rep.fit_window, (4.0, 8.0));
    }

    #[test]
    fn normal_exponent_tracks_gamma() {
        for gamma in [0.5, 1.0, 2.0] {
            let f = line(0.0, Schedule::power_law(gamma, 1.0));
            let rep = terminal_exponents(&f, &[0.4, 2.5], &[vec![0.0, 1.0]], 8.0).unwrap();
            assert!((rep.exponents[0] + gamma).abs() <= 0.05 * gamma, "gamma {gamma}: {rep:?}");
        }
    }

    #[test]
    fn mixed_direction_takes_the_larger_exponent() {
        let s = 0.5f64.sqrt();
        let rep = terminal_exponents(&line(1.0, Schedule::Affine), &[0.4, 2.5], &[vec![s, s]], 8.0).unwrap();
        assert!(rep.exponents[0].abs() < 0.1, "{rep:?}");
    }

    #[test]
    fn exponent_preconditions() {
        let f = line(1.0, Schedule::Affine);
        assert!(terminal_exponents(&f, &[0.0, 0.0], &[vec![0.0, 1.0]], 3.0).is_err());
        assert!(terminal_exponents(&f, &[0.0, 0.0], &[vec![0.0, 0.0]], 8.0).is_err());
        assert!(terminal_exponents(&f, &[0.0, 0.0], &[], 8.0).is_err());
    }

    #[test]
    fn split_examples() {
        let (t, n) = tangent_normal_split(&Manifold::Line { c: 1.0 }, &[5.0, 1.0]).unwrap();
        assert_eq!((t[0].clone(), n[0].clone()), (vec![1.0, 0.0], vec![0.0, 1.0]));
        let (t, n) = tangent_normal_split(&Manifold::Circle { r: 1.0 }, &[1.0, 0.0]).unwrap();
        assert_eq!(t[0], vec![-0.0, 1.0]);
        assert_eq!(n[0], vec![1.0, 0.0]);
        let (t, n) = tangent_normal_split(&Manifold::Circle { r: 1.0 }, &[0.0, -1.0]).unwrap();
        assert_eq!(t[0], vec![1.0, 0.0]);
        assert_eq!(n[0], vec![0.0, -1.0]);
        assert!(tangent_normal_split(&Manifold::Circle { r: 1.0 }, &[0.5, 0.0]).is_err());
    }

    #[test]
    fn gap_examples() {
        assert_eq!(
            classify_spectrum(&[0.0, -1.0], 1.0),
            GapReport { n_tangential: 1, n_normal: 1, gap: 1.0 }
        );
        let g = classify_spectrum(&[-0.05, -0.1, -0.95, -1.02], 1.0);
        assert_eq!((g.n_tangential, g.n_normal), (2, 2));
        assert_eq!(
            classify_spectrum(&[0.0; 3], 1.0),
            GapReport { n_tangential: 3, n_normal: 0, gap: 0.0 }
        );
    }

    #[test]
    fn report_csv_and_subset() {
        let starts = PointCloud::new(vec![vec![0.3, 2.0], vec![-1.0, -0.5]]).unwrap();
        let rep = jacobian_spectrum(&line(1.0, Schedule::Affine), &starts, &[0.5, 0.9]).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,eig1_mean,eig1_std,eig2_mean,eig2_std\n"));
        assert_eq!(s.lines().count(), 3);
        let sub = rep.subset(&[true, false]).unwrap();
        assert_eq!(sub.n_trajectories, 1);
        assert!(rep.subset(&[false, false]).is_err());
    }
}
