//! Exact discrete optimal transport under the cost `1/2 |x0 - x1|^2`.
//!
//! The assignment solver is the shortest-augmenting-path Hungarian method with
//! row/column potentials. Its potentials are Kantorovich duals of the
//! assignment LP and feed the empirical potential construction.

use std::io::{BufRead, Write};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// A finite set of points of a common dimension, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    data: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::InvalidArgument("point cloud must be nonempty".into()))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("point dimension must be at least 1".into()));
        }
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in &points {
            check_dim(dim, p.len())?;
            data.extend_from_slice(p);
        }
        Ok(Self { dim, data })
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "flat buffer of length {} does not hold points of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vecs(&self) -> Vec<Vec<f64>> {
        self.iter().map(<[f64]>::to_vec).collect()
    }

    /// Writes one point per line, comma separated, no header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for p in self.iter() {
            let row: Vec<String> = p.iter().map(|x| fmt_f64(*x)).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut points = Vec::new();
        let mut offset = 0usize;
        for line in r.lines() {
            let line = line?;
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let row = trimmed
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<f64>().map_err(|e| Error::Format {
                            offset,
                            message: format!("bad number {s:?}: {e}"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                points.push(row);
            }
            offset += line.len() + 1;
        }
        Self::new(points)
    }
}

/// Floats are written with 17 significant digits so CSV files round-trip exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Dense row-major square cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidArgument("cost matrix must be nonempty".into()));
        }
        let mut data = Vec::with_capacity(n * n);
        for r in &rows {
            if r.len() != n {
                return Err(Error::SizeMismatch(format!(
                    "cost matrix must be square: row of length {} in {n}x{n}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.n..(row + 1) * self.n]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `cost(l, k) = 1/2 |target_l - source_k|^2`; rows index the target cloud.
pub fn cost_matrix(source: &PointCloud, target: &PointCloud) -> Result<CostMatrix> {
    check_dim(source.dim(), target.dim())?;
    if source.len() != target.len() {
        return Err(Error::SizeMismatch(format!(
            "source has {} points, target has {}",
            source.len(),
            target.len()
        )));
    }
    let n = source.len();
    let mut data = Vec::with_capacity(n * n);
    for b in target.iter() {
        for a in source.iter() {
            data.push(0.5 * linalg::norm_sq(&linalg::sub(b, a)));
        }
    }
    Ok(CostMatrix { n, data })
}

/// Optimal permutation of a square cost matrix with its dual certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Row `l` is matched to column `perm[l]`.
    pub perm: Vec<usize>,
    /// Row potentials.
    pub dual_f: Vec<f64>,
    /// Column potentials, normalised so `dual_g[0] = 0`.
    pub dual_g: Vec<f64>,
    pub total_cost: f64,
}

/// Exact minimum-cost perfect matching (Jonker-Volgenant).
///
/// Column reduction and two passes of augmenting row reduction build a
/// partial matching with feasible prices; the remaining free rows are matched
/// along shortest augmenting paths in reduced costs. All scans run in index
/// order, so ties resolve deterministically.
pub fn solve_assignment(cost: &CostMatrix) -> Result<Assignment> {
    if let Some(bad) = cost.data.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("cost matrix entry {bad}")));
    }
    let n = cost.n;
    let c = |i: usize, j: usize| cost.data[i * n + j];
    const FREE: usize = usize::MAX;
    let mut v = vec![0.0f64; n];
    let mut rowsol = vec![FREE; n];
    let mut colsol = vec![FREE; n];
    let mut matches = vec![0usize; n];

    // Column reduction, last column first.
    for j in (0..n).rev() {
        let mut imin = 0;
        let mut min = c(0, j);
        for i in 1..n {
            if c(i, j) < min {
                min = c(i, j);
                imin = i;
            }
        }
        v[j] = min;
        matches[imin] += 1;
        if matches[imin] == 1 {
            rowsol[imin] = j;
            colsol[j] = imin;
        } else if v[j] < v[rowsol[imin]] {
            let j1 = rowsol[imin];
            rowsol[imin] = j;
            colsol[j] = imin;
            colsol[j1] = FREE;
        } else {
            colsol[j] = FREE;
        }
    }

    // Reduction transfer from uniquely matched rows.
    let mut free = Vec::with_capacity(n);
    for i in 0..n {
        match matches[i] {
            0 => free.push(i),
            1 => {
                let j1 = rowsol[i];
                let min = (0..n)
                    .filter(|&j| j != j1)
                    .map(|j| c(i, j) - v[j])
                    .fold(f64::INFINITY, f64::min);
                if min.is_finite() {
                    v[j1] -= min - (c(i, j1) - v[j1]);
                }
            }
            _ => {}
        }
    }

    // Augmenting row reduction. The budget guards against slow float creep;
    // rows left over are handled by the shortest-path phase.
    let mut budget = 16 * n + 16;
    for _ in 0..2 {
        let mut queue: std::collections::VecDeque<usize> = free.drain(..).collect();
        while let Some(i) = queue.pop_front() {
            if budget == 0 {
                free.push(i);
                continue;
            }
            budget -= 1;
            let mut umin = c(i, 0) - v[0];
            let mut j1 = 0;
            let mut j2 = FREE;
            let mut usubmin = f64::INFINITY;
            for j in 1..n {
                let h = c(i, j) - v[j];
                if h < usubmin {
                    if h >= umin {
                        usubmin = h;
                        j2 = j;
                    } else {
                        usubmin = umin;
                        umin = h;
                        j2 = j1;
                        j1 = j;
                    }
                }
            }
            let mut i0 = colsol[j1];
            let strict = umin < usubmin;
            if strict {
                v[j1] -= usubmin - umin;
            } else if i0 != FREE {
                j1 = j2;
                i0 = colsol[j2];
            }
            rowsol[i] = j1;
            colsol[j1] = i;
            if i0 != FREE {
                rowsol[i0] = FREE;
                if strict {
                    queue.push_front(i0);
                } else {
                    free.push(i0);
                }
            }
        }
    }

    // Shortest augmenting paths for the remaining free rows.
    let mut d = vec![0.0f64; n];
    let mut pred = vec![0usize; n];
    let mut collist: Vec<usize> = (0..n).collect();
    for &freerow in &free {
        for j in 0..n {
            d[j] = c(freerow, j) - v[j];
            pred[j] = freerow;
            collist[j] = j;
        }
        let mut low = 0;
        let mut up = 0;
        let mut last = 0;
        let mut min = 0.0;
        let mut endofpath = FREE;
        while endofpath == FREE {
            if up == low {
                last = low;
                min = d[collist[up]];
                up += 1;
                for k in up..n {
                    let j = collist[k];
                    let h = d[j];
                    if h <= min {
                        if h < min {
                            up = low;
                            min = h;
                        }
                        collist[k] = collist[up];
                        collist[up] = j;
                        up += 1;
                    }
                }
                for &j in &collist[low..up] {
                    if colsol[j] == FREE {
                        endofpath = j;
                        break;
                    }
                }
            }
            if endofpath == FREE {
                let j1 = collist[low];
                low += 1;
                let i = colsol[j1];
                let h = c(i, j1) - v[j1] - min;
                let mut k = up;
                while k < n {
                    let j = collist[k];
                    let v2 = c(i, j) - v[j] - h;
                    if v2 < d[j] {
                        pred[j] = i;
                        if v2 == min {
                            if colsol[j] == FREE {
                                endofpath = j;
                                break;
                            }
                            collist[k] = collist[up];
                            collist[up] = j;
                            up += 1;
                        }
                        d[j] = v2;
                    }
                    k += 1;
                }
            }
        }
        // Columns scanned before the last minimum update get their prices raised.
        for &j in &collist[..last] {
            v[j] += d[j] - min;
        }
        loop {
            let i = pred[endofpath];
            colsol[endofpath] = i;
            let j1 = endofpath;
            endofpath = rowsol[i];
            rowsol[i] = j1;
            if i == freerow {
                break;
            }
        }
    }

    let perm = rowsol;
    let shift = v[0];
    let dual_g: Vec<f64> = v.iter().map(|x| x - shift).collect();
    let dual_f: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| c(i, j) - dual_g[j]).collect();
    let total_cost = perm.iter().enumerate().map(|(l, &k)| c(l, k)).sum();
    Ok(Assignment {
        perm,
        dual_f,
        dual_g,
        total_cost,
    })
}

/// Paired point sets: `source[perm[l]]` is coupled to `target[l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub source: PointCloud,
    pub target: PointCloud,
    pub perm: Vec<usize>,
    /// Potentials on target points.
    pub dual_f: Vec<f64>,
    /// Potentials on source points.
    pub dual_g: Vec<f64>,
    pub total_cost: f64,
}

impl Coupling {
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// The `l`-th coupled pair `(x0, x1)`.
    pub fn pair(&self, l: usize) -> (&[f64], &[f64]) {
        (self.source.point(self.perm[l]), self.target.point(l))
    }

    /// Builds a coupling from an explicit permutation (duals are left empty).
    /// Used to test monotonicity of non-optimal matchings.
    pub fn from_permutation(source: PointCloud, target: PointCloud, perm: Vec<usize>) -> Result<Self> {
        check_dim(source.dim(), target.dim())?;
        if source.len() != target.len() || perm.len() != target.len() {
            return Err(Error::SizeMismatch("permutation and clouds must agree in size".into()));
        }
        let mut seen = vec![false; perm.len()];
        for &k in &perm {
            if k >= perm.len() || seen[k] {
                return Err(Error::InvalidArgument("perm is not a bijection".into()));
            }
            seen[k] = true;
        }
        let total_cost = perm
            .iter()
            .enumerate()
            .map(|(l, &k)| 0.5 * linalg::norm_sq(&linalg::sub(source.point(k), target.point(l))))
            .sum();
        Ok(Self {
            source,
            target,
            perm,
            dual_f: Vec::new(),
            dual_g: Vec::new(),
            total_cost,
        })
    }
}

/// Solves the optimal coupling between two equal-size clouds.
pub fn couple(source: &PointCloud, target: &PointCloud) -> Result<Coupling> {
    let cost = cost_matrix(source, target)?;
    let a = solve_assignment(&cost)?;
    Ok(Coupling {
        source: source.clone(),
        target: target.clone(),
        perm: a.perm,
        dual_f: a.dual_f,
        dual_g: a.dual_g,
        total_cost: a.total_cost,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityReport {
    pub ok: bool,
    /// Most negative cycle sum found (0 when every cycle sum is nonnegative).
    pub worst_violation: f64,
}

pub const MAX_CYCLE_LEN: usize = 5;

/// Checks `sum_i <x0_{perm(l_i)}, x1_{l_i} - x1_{l_{i+1}}> >= 0` over all cycles
/// of distinct indices with length `2..=max_cycle_len`.
pub fn check_cyclical_monotonicity(coupling: &Coupling, max_cycle_len: usize) -> Result<MonotonicityReport> {
    if max_cycle_len > MAX_CYCLE_LEN {
        return Err(Error::InvalidArgument(format!(
            "max_cycle_len {max_cycle_len} exceeds the limit of {MAX_CYCLE_LEN}"
        )));
    }
    let n = coupling.len();
    // g[i][j] = <x0 coupled to x1_i, x1_i - x1_j>
    let mut gain = vec![0.0; n * n];
    let mut scale = 0.0f64;
    for i in 0..n {
        let (x0, x1) = coupling.pair(i);
        for j in 0..n {
            let g = linalg::dot(x0, &linalg::sub(x1, coupling.target.point(j)));
            gain[i * n + j] = g;
            scale = scale.max(g.abs());
        }
    }
    let mut worst = 0.0f64;
    let mut path = Vec::with_capacity(max_cycle_len);
    let mut on_path = vec![false; n];
    for start in 0..n {
        path.clear();
        path.push(start);
        on_path[start] = true;
        extend_cycles(&gain, n, max_cycle_len, &mut path, &mut on_path, 0.0, &mut worst);
        on_path[start] = false;
    }
    let tol = 1e-8 * scale.max(1.0);
    Ok(MonotonicityReport {
        ok: worst >= -tol,
        worst_violation: worst,
    })
}

fn extend_cycles(
    gain: &[f64],
    n: usize,
    max_len: usize,
    path: &mut Vec<usize>,
    on_path: &mut [bool],
    partial: f64,
    worst: &mut f64,
) {
    let start = path[0];
    let last = *path.last().unwrap();
    if path.len() >= 2 {
        let closed = partial + gain[last * n + start];
        *worst = worst.min(closed);
    }
    if path.len() == max_len {
        return;
    }
    // Rotations of a cycle are equivalent: only visit indices above the start.
    for next in start + 1..n {
        if on_path[next] {
            continue;
        }
        path.push(next);
        on_path[next] = true;
        extend_cycles(gain, n, max_len, path, on_path, partial + gain[last * n + next], worst);
        on_path[next] = false;
        path.pop();
    }
}

/// Empirical W2 in the standard metric: `sqrt(2 * OT cost / n)` under the half-squared cost.
pub fn empirical_w2(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let cost = cost_matrix(a, b)?;
    let sol = solve_assignment(&cost)?;
    Ok((2.0 * sol.total_cost / a.len() as f64).max(0.0).sqrt())
}
