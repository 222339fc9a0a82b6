//! Piecewise-affine potentials `phi(x) = max_l (<a_l, x> - h_l)` built from
//! optimal couplings, and their exact proximal operator.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::transport::{fmt_f64, Coupling};

use super::ProxResult;

pub const PROX_MAX_ITERS: usize = 10_000;
pub const PROX_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPotential {
    dim: usize,
    /// Plane slopes, row-major `n x dim`.
    slopes: Vec<f64>,
    offsets: Vec<f64>,
    max_slope_norm: f64,
}

impl EmpiricalPotential {
    pub fn new(planes: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        let dim = planes
            .first()
            .map(|p| p.0.len())
            .ok_or_else(|| Error::InvalidArgument("empirical potential needs at least one plane".into()))?;
        if dim == 0 {
            return Err(Error::InvalidArgument("plane slopes must have length >= 1".into()));
        }
        let mut slopes = Vec::with_capacity(planes.len() * dim);
        let mut offsets = Vec::with_capacity(planes.len());
        for (a, h) in planes {
            check_dim(dim, a.len())?;
            if !linalg::all_finite(&a) || !h.is_finite() {
                return Err(Error::NonFinite("plane coefficients".into()));
            }
            slopes.extend_from_slice(&a);
            offsets.push(h);
        }
        let max_slope_norm = slopes.chunks_exact(dim).map(linalg::norm).fold(0.0, f64::max);
        Ok(Self {
            dim,
            slopes,
            offsets,
            max_slope_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_planes(&self) -> usize {
        self.offsets.len()
    }

    pub fn slope(&self, k: usize) -> &[f64] {
        &self.slopes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn offset(&self, k: usize) -> f64 {
        self.offsets[k]
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// Mutable access to the offsets, for perturbation experiments.
    pub fn offsets_mut(&mut self) -> &mut [f64] {
        &mut self.offsets
    }

    #[inline]
    pub fn plane_value(&self, k: usize, x: &[f64]) -> f64 {
        linalg::dot(self.slope(k), x) - self.offsets[k]
    }

    /// Value and lowest-index maximising plane.
    pub fn argmax(&self, x: &[f64]) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 0..self.n_planes() {
            let v = self.plane_value(k, x);
            if v > best.0 {
                best = (v, k);
            }
        }
        best
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.argmax(x).0
    }

    /// Writes one plane per row: slope components, then the offset.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for k in 0..self.n_planes() {
            let mut row: Vec<String> = self.slope(k).iter().map(|x| fmt_f64(*x)).collect();
            row.push(fmt_f64(self.offsets[k]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut planes = Vec::new();
        let mut offset = 0usize;
        for line in r.lines() {
            let line = line?;
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let mut row = trimmed
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<f64>().map_err(|e| Error::Format {
                            offset,
                            message: format!("bad number {s:?}: {e}"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                if row.len() < 2 {
                    return Err(Error::Format {
                        offset,
                        message: "plane rows need at least one slope and an offset".into(),
                    });
                }
                let h = row.pop().unwrap();
                planes.push((row, h));
            }
            offset += line.len() + 1;
        }
        Self::new(planes)
    }

    /// Exact `prox_{lambda phi}(z)`.
    ///
    /// By Moreau decomposition `prox(z) = z - lambda * A mu`, where `mu` solves
    /// the simplex QP `min (lambda/2)|A mu|^2 + sum_k mu_k (h_k - <a_k, z>)`.
    /// This runs a primal active-set method on that QP: the working set is kept
    /// affinely independent in the lifted vectors `(a_k, 1)`, so every
    /// equality-constrained subproblem is a nonsingular KKT system of size at
    /// most `dim + 2`. Termination is certified by the KKT conditions: every
    /// plane lies below the common value of the working planes at `u`.
    pub fn prox(&self, lambda: f64, z: &[f64]) -> Result<ProxResult> {
        check_dim(self.dim, z.len())?;
        let n = self.n_planes();

        // Best vertex of the simplex; it is the answer whenever a single plane is active.
        let mut k0 = 0;
        let mut best = f64::INFINITY;
        for k in 0..n {
            let a = self.slope(k);
            let q = 0.5 * lambda * linalg::norm_sq(a) + self.offsets[k] - linalg::dot(a, z);
            if q < best {
                best = q;
                k0 = k;
            }
        }
        let mut work: Vec<usize> = vec![k0];
        let mut mu: Vec<f64> = vec![1.0];
        let mut residual = f64::INFINITY;

        for iter in 0..PROX_MAX_ITERS {
            let u = self.point_from(lambda, z, &work, &mu);
            let level = work
                .iter()
                .map(|&k| self.plane_value(k, &u))
                .fold(f64::NEG_INFINITY, f64::max);
            let (top, j) = self.argmax(&u);
            let scale = 1.0
                + self.offsets.iter().fold(0.0f64, |m, h| m.max(h.abs()))
                + self.max_slope_norm * linalg::norm(&u);
            let viol = top - level;
            residual = viol.max(0.0);
            if viol <= PROX_TOL * scale || work.contains(&j) {
                return Ok(ProxResult {
                    objective: top + linalg::norm_sq(&linalg::sub(&u, z)) / (2.0 * lambda),
                    point: u,
                    iterations: iter,
                    active_set: sorted(work),
                });
            }

            // Add the most violated plane, exchanging if it is dependent on the working set.
            match self.lifted_combination(&work, j) {
                Some(coef) => {
                    let mut theta = f64::INFINITY;
                    let mut drop = usize::MAX;
                    for (i, &c) in coef.iter().enumerate() {
                        if c > 0.0 {
                            let r = mu[i] / c;
                            if r < theta {
                                theta = r;
                                drop = i;
                            }
                        }
                    }
                    if drop == usize::MAX {
                        return Err(Error::ProxNonConvergence {
                            iterations: iter,
                            residual,
                        });
                    }
                    for (i, &c) in coef.iter().enumerate() {
                        mu[i] = (mu[i] - theta * c).max(0.0);
                    }
                    work[drop] = j;
                    mu[drop] = theta;
                }
                None => {
                    work.push(j);
                    mu.push(0.0);
                }
            }

            // Equality-constrained subproblems until the iterate is optimal on the working set.
            loop {
                let target = self.solve_face(lambda, z, &work)?;
                if target.iter().all(|&m| m >= 0.0) {
                    mu = target;
                    break;
                }
                let mut step = 1.0f64;
                for i in 0..work.len() {
                    if target[i] < mu[i] {
                        step = step.min(mu[i] / (mu[i] - target[i]));
                    }
                }
                for i in 0..work.len() {
                    mu[i] += step * (target[i] - mu[i]);
                }
                let keep: Vec<bool> = mu.iter().map(|&m| m > 1e-15).collect();
                let mut w2 = Vec::new();
                let mut m2 = Vec::new();
                for i in 0..work.len() {
                    if keep[i] {
                        w2.push(work[i]);
                        m2.push(mu[i]);
                    }
                }
                if w2.is_empty() {
                    // Numerical corner: keep the largest weight.
                    let i = (0..mu.len()).max_by(|&a, &b| mu[a].total_cmp(&mu[b])).unwrap();
                    w2.push(work[i]);
                    m2.push(1.0);
                }
                let total: f64 = m2.iter().sum();
                m2.iter_mut().for_each(|m| *m /= total);
                work = w2;
                mu = m2;
                if work.len() == 1 {
                    mu = vec![1.0];
                    break;
                }
            }
        }
        Err(Error::ProxNonConvergence {
            iterations: PROX_MAX_ITERS,
            residual,
        })
    }

    fn point_from(&self, lambda: f64, z: &[f64], work: &[usize], mu: &[f64]) -> Vec<f64> {
        let mut u = z.to_vec();
        for (&k, &m) in work.iter().zip(mu) {
            if m != 0.0 {
                for (ui, ai) in u.iter_mut().zip(self.slope(k)) {
                    *ui -= lambda * m * ai;
                }
            }
        }
        u
    }

    /// Solves `lambda G mu + s 1 = A^T z - h`, `1^T mu = 1` on the working set.
    fn solve_face(&self, lambda: f64, z: &[f64], work: &[usize]) -> Result<Vec<f64>> {
        let m = work.len();
        if m == 1 {
            return Ok(vec![1.0]);
        }
        let mut kkt = DMatrix::zeros(m + 1, m + 1);
        let mut rhs = DVector::zeros(m + 1);
        for (i, &ki) in work.iter().enumerate() {
            for (j, &kj) in work.iter().enumerate() {
                kkt[(i, j)] = lambda * linalg::dot(self.slope(ki), self.slope(kj));
            }
            kkt[(i, m)] = 1.0;
            kkt[(m, i)] = 1.0;
            rhs[i] = linalg::dot(self.slope(ki), z) - self.offsets[ki];
        }
        rhs[m] = 1.0;
        let sol = kkt
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::ProxNonConvergence {
                iterations: 0,
                residual: f64::NAN,
            })?;
        Ok(sol.iter().take(m).copied().collect())
    }

    /// If `(a_j, 1)` lies in the span of `{(a_k, 1) : k in work}`, returns the coefficients.
    fn lifted_combination(&self, work: &[usize], j: usize) -> Option<Vec<f64>> {
        let d = self.dim;
        let m = work.len();
        let mut basis = DMatrix::zeros(d + 1, m);
        for (c, &k) in work.iter().enumerate() {
            for i in 0..d {
                basis[(i, c)] = self.slope(k)[i];
            }
            basis[(d, c)] = 1.0;
        }
        let mut target = DVector::zeros(d + 1);
        for i in 0..d {
            target[i] = self.slope(j)[i];
        }
        target[d] = 1.0;
        let svd = basis.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let coef = svd.solve(&target, 1e-12 * smax.max(1.0)).ok()?;
        let resid = (&basis * &coef - &target).norm();
        if resid <= 1e-9 * (1.0 + target.norm()) {
            Some(coef.iter().copied().collect())
        } else {
            None
        }
    }
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Builds `phi_n = max_l (<a_l, x> - h_l)` with `a_l = x0` coupled to `x1_l`, so
/// that `x0_{perm(l)}` is a subgradient of `phi_n` at `x1_l` for every `l`.
///
/// With half-squared cost, the source dual `g` gives the conjugate pair
/// `phi*(x0) = |x0|^2/2 - g(x0)`, which is used as the plane offset. Offsets are
/// shifted by a common constant so `phi_n(0) = 0`. The subgradient condition is
/// verified explicitly before returning.
pub fn build_empirical(coupling: &Coupling) -> Result<EmpiricalPotential> {
    let n = coupling.len();
    if coupling.dual_g.len() != coupling.source.len() {
        return Err(Error::Construction("coupling carries no dual potentials".into()));
    }
    let mut planes = Vec::with_capacity(n);
    for l in 0..n {
        let k = coupling.perm[l];
        let a = coupling.source.point(k).to_vec();
        let h = 0.5 * linalg::norm_sq(&a) - coupling.dual_g[k];
        planes.push((a, h));
    }
    let min_h = planes.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    for p in &mut planes {
        p.1 -= min_h;
    }
    let phi = EmpiricalPotential::new(planes)?;

    let scale = 1.0
        + coupling
            .target
            .iter()
            .map(|x| phi.max_slope_norm * linalg::norm(x))
            .fold(0.0, f64::max)
        + phi.offsets.iter().fold(0.0f64, |m, h| m.max(h.abs()));
    for l in 0..n {
        let x1 = coupling.target.point(l);
        let own = phi.plane_value(l, x1);
        let (top, _) = phi.argmax(x1);
        if top - own > 1e-7 * scale {
            return Err(Error::Construction(format!(
                "plane {l} is not active at its target point (gap {:e})",
                top - own
            )));
        }
    }
    Ok(phi)
}
