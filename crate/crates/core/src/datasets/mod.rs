//! Seeded target distributions and the MNIST IDX reader.

mod mnist;

use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use mnist::{
    load_mnist_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IdxImages,
    IMAGE_MAGIC, LABEL_MAGIC,
};

use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::transport::PointCloud;

pub const DEFAULT_MOONS_NOISE: f64 = 0.05;
const MNIST_DIM: usize = 784;

fn default_radius() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    DEFAULT_MOONS_NOISE
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `mean + cov_sqrt * z` with `z ~ N(0, I)`.
    Gaussian { mean: Vec<f64>, cov_sqrt: Vec<Vec<f64>> },
    /// Uniform on the circle of the given radius.
    Circle {
        #[serde(default = "default_radius")]
        radius: f64,
    },
    /// Two interleaved half circles with isotropic Gaussian noise.
    TwoMoons {
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// `(N(0, 1), c)`: a Gaussian on the horizontal line `q = c`.
    LineManifold { c: f64 },
    MnistIdx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_true")]
        normalize: bool,
    },
}

impl DatasetSpec {
    /// Standard normal in `d` dimensions.
    pub fn standard_gaussian(d: usize) -> Self {
        let cov_sqrt = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        DatasetSpec::Gaussian {
            mean: vec![0.0; d],
            cov_sqrt,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Gaussian { mean, .. } => mean.len(),
            DatasetSpec::Circle { .. } | DatasetSpec::TwoMoons { .. } | DatasetSpec::LineManifold { .. } => 2,
            DatasetSpec::MnistIdx { .. } => MNIST_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Gaussian { mean, cov_sqrt } => {
                let d = mean.len();
                if d == 0 || cov_sqrt.len() != d || cov_sqrt.iter().any(|r| r.len() != d) {
                    return Err(Error::InvalidArgument(
                        "gaussian needs a nonempty mean and a square cov_sqrt of matching size".into(),
                    ));
                }
            }
            DatasetSpec::Circle { radius } if !(*radius > 0.0 && radius.is_finite()) => {
                return Err(Error::InvalidArgument(format!("circle radius must be positive, got {radius}")));
            }
            DatasetSpec::TwoMoons { noise } if !(*noise >= 0.0 && noise.is_finite()) => {
                return Err(Error::InvalidArgument(format!("moons noise must be nonnegative, got {noise}")));
            }
            _ => {}
        }
        Ok(())
    }

    /// Resolves file-backed datasets once so repeated sampling is cheap.
    pub fn load(&self) -> Result<Dataset> {
        self.validate()?;
        let images = match self {
            DatasetSpec::MnistIdx {
                images,
                labels,
                normalize,
            } => Some(Arc::new(load_mnist_idx(images, labels, *normalize)?.0)),
            _ => None,
        };
        Ok(Dataset {
            spec: self.clone(),
            images,
        })
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<PointCloud> {
        self.load()?.sample(&mut rng::seeded(seed), n)
    }
}

/// A dataset ready for repeated sampling.
#[derive(Debug, Clone)]
pub struct Dataset {
    spec: DatasetSpec,
    images: Option<Arc<PointCloud>>,
}

impl Dataset {
    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        match &self.images {
            Some(im) => im.dim(),
            None => self.spec.dim(),
        }
    }

    pub fn sample(&self, r: &mut SeededRng, n: usize) -> Result<PointCloud> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample size must be at least 1".into()));
        }
        let points: Vec<Vec<f64>> = match &self.spec {
            DatasetSpec::Gaussian { mean, cov_sqrt } => (0..n)
                .map(|_| {
                    let z = rng::normal_vec(r, mean.len());
                    mean.iter()
                        .zip(cov_sqrt)
                        .map(|(m, row)| m + row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>())
                        .collect()
                })
                .collect(),
            DatasetSpec::Circle { radius } => (0..n)
                .map(|_| {
                    let theta = 2.0 * PI * r.random::<f64>();
                    vec![radius * theta.cos(), radius * theta.sin()]
                })
                .collect(),
            DatasetSpec::TwoMoons { noise } => {
                // First ceil(n/2) points on the upper moon, the rest on the lower one.
                let n_upper = n.div_ceil(2);
                (0..n)
                    .map(|i| {
                        let theta = PI * r.random::<f64>();
                        let (x, y) = if i < n_upper {
                            (theta.cos(), theta.sin())
                        } else {
                            (1.0 - theta.cos(), 0.5 - theta.sin())
                        };
                        vec![x + noise * rng::standard_normal(r), y + noise * rng::standard_normal(r)]
                    })
                    .collect()
            }
            DatasetSpec::LineManifold { c } => (0..n).map(|_| vec![rng::standard_normal(r), *c]).collect(),
            DatasetSpec::MnistIdx { .. } => {
                let images = self.images.as_ref().expect("mnist images loaded");
                (0..n)
                    .map(|_| images.point(r.random_range(0..images.len())).to_vec())
                    .collect()
            }
        };
        PointCloud::new(points)
    }
}

/// Arc-length from the projection of `p` onto the nearer Two Moons arc to that
/// arc's closest endpoint. Both arcs have unit radius.
pub fn two_moons_boundary_distance(p: &[f64]) -> f64 {
    let upper = (p[1].atan2(p[0])).clamp(0.0, PI);
    let du = (p[0] - upper.cos()).hypot(p[1] - upper.sin());
    let (rx, ry) = (p[0] - 1.0, p[1] - 0.5);
    let lower = ((-ry).atan2(-rx)).clamp(0.0, PI);
    let dl = (p[0] - (1.0 - lower.cos())).hypot(p[1] - (0.5 - lower.sin()));
    let theta = if du <= dl { upper } else { lower };
    theta.min(PI - theta)
}
