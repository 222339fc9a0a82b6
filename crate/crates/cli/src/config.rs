//! JSON run configurations. Every struct rejects unknown keys; relative paths
//! are resolved against the directory holding the config file.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flowprox::datasets::DatasetSpec;
use flowprox::lyapunov::Manifold;
use flowprox::neural::{load_checkpoint, TrainConfig};
use flowprox::potential::{EmpiricalPotential, QuadraticPotential};
use flowprox::schedule::{Schedule, DEFAULT_EPS_T};
use flowprox::{FieldSpec, Potential};
use nalgebra::DMatrix;
use serde::Deserialize;

use crate::CliError;

fn default_eps_t() -> f64 {
    DEFAULT_EPS_T
}

fn affine() -> Schedule {
    Schedule::Affine
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialConfig {
    /// `1/2 (x - center)^T matrix (x - center) + <linear, x>`.
    Quadratic {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        linear: Option<Vec<f64>>,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    HalfNormSq { dim: usize },
    LineManifold { c: f64 },
    Quartic { dim: usize },
    /// Planes stored as CSV rows `a_1, ..., a_d, h`.
    Empirical { csv: PathBuf },
}

impl PotentialConfig {
    pub fn build(&self, base: &Path) -> Result<Potential, CliError> {
        Ok(match self {
            PotentialConfig::Quadratic { matrix, linear, center } => {
                let d = matrix.len();
                if matrix.iter().any(|r| r.len() != d) {
                    return Err(CliError::Usage("quadratic matrix must be square".into()));
                }
                let m = DMatrix::from_fn(d, d, |i, j| matrix[i][j]);
                let q = QuadraticPotential::new(
                    m,
                    linear.clone().unwrap_or_else(|| vec![0.0; d]),
                    center.clone().unwrap_or_else(|| vec![0.0; d]),
                )?;
                Potential::Quadratic(q)
            }
            PotentialConfig::HalfNormSq { dim } => Potential::half_norm_sq(*dim),
            PotentialConfig::LineManifold { c } => Potential::LineManifold { c: *c },
            PotentialConfig::Quartic { dim } => Potential::Quartic { dim: *dim },
            PotentialConfig::Empirical { csv } => {
                let f = File::open(resolve(base, csv)).map_err(flowprox::Error::from)?;
                Potential::Empirical(EmpiricalPotential::read_csv(BufReader::new(f))?)
            }
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    Exact {
        potential: PotentialConfig,
        #[serde(default = "affine")]
        schedule: Schedule,
        #[serde(default = "default_eps_t")]
        eps_t: f64,
    },
    Learned {
        checkpoint: PathBuf,
        #[serde(default = "affine")]
        schedule: Schedule,
        #[serde(default = "default_eps_t")]
        eps_t: f64,
    },
}

impl FieldConfig {
    pub fn build(&self, base: &Path) -> Result<FieldSpec, CliError> {
        Ok(match self {
            FieldConfig::Exact { potential, schedule, eps_t } => {
                FieldSpec::exact(potential.build(base)?, *schedule)?.with_eps_t(*eps_t)?
            }
            FieldConfig::Learned { checkpoint, schedule, eps_t } => {
                let model = load_checkpoint(resolve(base, checkpoint))?;
                FieldSpec::learned(Arc::new(model), *schedule)?.with_eps_t(*eps_t)?
            }
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    /// Progress is printed to stderr every this many steps (0 disables it).
    #[serde(default)]
    pub log_every: usize,
}

fn default_starts() -> usize {
    100
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumExpect {
    pub t: f64,
    /// Expected mean eigenvalues, sorted in decreasing order.
    pub eigenvalues: Vec<f64>,
    pub tol: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapExpect {
    pub gamma: f64,
    pub min_tangential: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumRun {
    pub field: FieldConfig,
    pub t_grid: Vec<f64>,
    #[serde(default = "default_starts")]
    pub n_starts: usize,
    #[serde(default)]
    pub seed: u64,
    /// Keep only starts whose state at the last grid time lies farther than
    /// this arc length from a Two Moons endpoint.
    #[serde(default)]
    pub two_moons_interior: Option<f64>,
    #[serde(default)]
    pub expect: Option<SpectrumExpect>,
    #[serde(default)]
    pub gap: Option<GapExpect>,
}

fn default_tau_max() -> f64 {
    8.0
}

fn default_tol() -> f64 {
    0.05
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovRun {
    pub field: FieldConfig,
    pub start: Vec<f64>,
    /// Explicit directions; if absent, the tangent and normal directions of
    /// `manifold` where the trajectory of `start` ends up are used.
    #[serde(default)]
    pub directions: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub manifold: Option<Manifold>,
    #[serde(default = "default_tau_max")]
    pub tau_max: f64,
    /// Expected exponent per direction. Zero entries use `abs_tol`, others `rel_tol`.
    #[serde(default)]
    pub expect: Option<Vec<f64>>,
    #[serde(default = "default_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_tol")]
    pub abs_tol: f64,
}

fn default_t_checks() -> Vec<f64> {
    vec![0.1, 0.5, 0.9]
}

fn default_pairs() -> usize {
    500
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmpiricalSuite {
    pub n: usize,
    pub dim: usize,
    /// Added to every other plane offset after construction (mutation testing).
    #[serde(default)]
    pub corrupt_offsets: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxCheckRun {
    pub potentials: Vec<PotentialConfig>,
    #[serde(default)]
    pub empirical: Option<EmpiricalSuite>,
    #[serde(default = "affine")]
    pub schedule: Schedule,
    #[serde(default = "default_t_checks")]
    pub t_values: Vec<f64>,
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_c() -> f64 {
    0.8
}

fn default_flow_steps() -> usize {
    200
}

fn default_slack() -> f64 {
    0.2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

fn default_grid() -> GridConfig {
    GridConfig {
        lo: -2.0,
        hi: 2.0,
        points: 41,
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeRun {
    pub population: PotentialConfig,
    pub dataset: DatasetSpec,
    pub n_list: Vec<usize>,
    #[serde(default = "affine")]
    pub schedule: Schedule,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Tensor grid, the same 1-D grid along every coordinate.
    #[serde(default = "default_grid")]
    pub grid: GridConfig,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_flow_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Allowed relative increase between consecutive rows.
    #[serde(default = "default_slack")]
    pub monotone_slack: f64,
    /// If set, every last-row value must be below this fraction of the first row.
    #[serde(default)]
    pub final_ratio: Option<f64>,
}

fn default_t1() -> f64 {
    1.0 - DEFAULT_EPS_T
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeldOut {
    /// Drawn with as many points as are sampled.
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub max_w2: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRun {
    pub field: FieldConfig,
    pub n: usize,
    #[serde(default = "default_t1")]
    pub t1: f64,
    #[serde(default = "default_flow_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub held_out: Option<HeldOut>,
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
