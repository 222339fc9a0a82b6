use rayon::prelude::*;

use crate::datasets::DatasetSpec;
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng;
use crate::transport::{couple, PointCloud};

use super::{build_empirical, Potential};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub sup_error: f64,
}

/// Draws `n` Gaussian sources and `n` targets per batch size, builds the
/// empirical potential from their exact coupling, and reports
/// `sup_{z in grid} |prox_{lambda phi_n}(z) - prox_{lambda phi}(z)|`.
pub fn minibatch_prox_convergence(
    population: &Potential,
    sampler: &DatasetSpec,
    n_list: &[usize],
    lambda: f64,
    grid: &PointCloud,
    seed: u64,
) -> Result<Vec<ConvergenceRow>> {
    if matches!(population, Potential::Empirical(_)) {
        return Err(Error::InvalidArgument("population potential must have a closed-form prox".into()));
    }
    let d = population.dim();
    check_dim(d, sampler.dim())?;
    check_dim(d, grid.dim())?;
    let reference = grid
        .iter()
        .map(|z| Ok(population.prox(lambda, z)?.point))
        .collect::<Result<Vec<_>>>()?;
    n_list
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let phi_n = Potential::Empirical(empirical_from_batch(sampler, n, seed, i as u64)?);
            let errs = grid
                .iter()
                .collect::<Vec<_>>()
                .par_iter()
                .zip(reference.par_iter())
                .map(|(z, p)| Ok(linalg::dist(&phi_n.prox(lambda, z)?.point, p)))
                .collect::<Result<Vec<f64>>>()?;
            Ok(ConvergenceRow {
                n,
                sup_error: errs.into_iter().fold(0.0, f64::max),
            })
        })
        .collect()
}

/// Couples `n` standard-normal sources to `n` target draws and builds `phi_n`.
pub(crate) fn empirical_from_batch(
    sampler: &DatasetSpec,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<super::EmpiricalPotential> {
    let mut r = rng::substream(seed, 2 * stream);
    let d = sampler.dim();
    let source = PointCloud::new((0..n).map(|_| rng::normal_vec(&mut r, d)).collect())?;
    let target = sampler.sample(n, seed.wrapping_add(0x9e37_79b9).wrapping_add(stream))?;
    build_empirical(&couple(&source, &target)?)
}
