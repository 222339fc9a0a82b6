use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Activation, Mlp};
use crate::datasets::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::{Schedule, DEFAULT_EPS_T};
use crate::transport::{couple, fmt_f64, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TSampling {
    /// One `t` per coupled pair, uniform on `(eps_t, 1 - eps_t)`.
    #[default]
    Uniform01,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}

fn default_activation() -> Activation {
    Activation::Silu
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_eps_t() -> f64 {
    DEFAULT_EPS_T
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    pub schedule: Schedule,
    #[serde(default)]
    pub t_sampling: TSampling,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_eps_t")]
    pub eps_t: f64,
}

impl TrainConfig {
    pub fn new(batch_size: usize, steps: usize, lr: f64, schedule: Schedule, seed: u64) -> Self {
        Self {
            batch_size,
            steps,
            lr,
            adam_betas: default_betas(),
            adam_eps: default_adam_eps(),
            seed,
            schedule,
            t_sampling: TSampling::Uniform01,
            hidden: default_hidden(),
            activation: default_activation(),
            eps_t: default_eps_t(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::domain("lr", self.lr, "(0, inf)"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::InvalidArgument(format!("adam betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.eps_t > 0.0 && self.eps_t < 0.5) {
            return Err(Error::domain("eps_t", self.eps_t, "(0, 0.5)"));
        }
        self.schedule.validate()
    }

    pub fn layer_dims(&self, d: usize) -> Vec<usize> {
        let mut dims = vec![d + 1];
        dims.extend(&self.hidden);
        dims.push(d);
        dims
    }
}

/// Per-step training losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(w, "{i},{}", fmt_f64(*l))?;
        }
        Ok(())
    }

    /// Means over consecutive windows of `window` steps (a trailing partial window is dropped).
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks_exact(window)
            .map(|c| c.iter().sum::<f64>() / window as f64)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, (beta1, beta2): (f64, f64), eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// One regression batch: inputs `[x_t; t]` and conditional-field targets, column-wise.
fn ot_batch(data: &Dataset, cfg: &TrainConfig, step: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = data.dim();
    let b = cfg.batch_size;
    // Every step owns a stream, so batches do not depend on how many were drawn before.
    let mut r = rng::substream(cfg.seed, step as u64 + 1);
    let x0 = PointCloud::new((0..b).map(|_| rng::normal_vec(&mut r, d)).collect())?;
    let x1 = data.sample(&mut r, b)?;
    let coupling = couple(&x0, &x1)?;
    let mut inputs = DMatrix::zeros(d + 1, b);
    let mut targets = DMatrix::zeros(d, b);
    for l in 0..b {
        let (a, z) = coupling.pair(l);
        let t = match cfg.t_sampling {
            TSampling::Uniform01 => rng::uniform_open(&mut r, cfg.eps_t, 1.0 - cfg.eps_t),
        };
        let s = cfg.schedule.eval(t)?;
        for i in 0..d {
            inputs[(i, l)] = s.alpha * a[i] + s.beta * z[i];
            targets[(i, l)] = s.alpha_dot * a[i] + s.beta_dot * z[i];
        }
        inputs[(d, l)] = t;
    }
    Ok((inputs, targets))
}

/// Minibatch OT-CFM training on a dataset specification.
pub fn train_otcfm(data: &DatasetSpec, cfg: &TrainConfig) -> Result<(Mlp, LossTrace)> {
    train_otcfm_on(&data.load()?, cfg, |_, _| {})
}

/// Training loop with a per-step callback `(step, loss)`.
pub fn train_otcfm_on<F: FnMut(usize, f64)>(data: &Dataset, cfg: &TrainConfig, mut on_step: F) -> Result<(Mlp, LossTrace)> {
    cfg.validate()?;
    let mut model = Mlp::new_seeded(&cfg.layer_dims(data.dim()), cfg.activation, cfg.seed)?;
    let mut params = model.params();
    let mut adam = Adam::new(params.len(), cfg.lr, cfg.adam_betas, cfg.adam_eps);
    let mut trace = LossTrace::default();
    for step in 0..cfg.steps {
        let (inputs, targets) = ot_batch(data, cfg, step)?;
        let (loss, grad) = model.loss_and_grad(&inputs, &targets)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { step, loss });
        }
        adam.update(&mut params, &grad);
        model.set_params(&params)?;
        trace.losses.push(loss);
        on_step(step, loss);
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_point() -> DatasetSpec {
        DatasetSpec::Gaussian {
            mean: vec![1.5, -0.5],
            cov_sqrt: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        }
    }

    fn small_cfg(steps: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(32, steps, 1e-3, Schedule::Affine, 3);
        cfg.hidden = vec![32, 32];
        cfg
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg(1);
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(1);
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(
            r#"{"batch_size": 4, "steps": 1, "lr": 0.1, "schedule": {"family": "affine"}, "bogus": 1}"#
        )
        .is_err());
    }

    #[test]
    fn single_point_target_is_learned() {
        let mut cfg = small_cfg(2000);
        cfg.batch_size = 128;
        let (_, trace) = train_otcfm(&single_point(), &cfg).unwrap();
        let first = trace.window_means(100)[0];
        let last = *trace.window_means(100).last().unwrap();
        assert!(last < 0.1 * first, "first {first} last {last}");
        let w = trace.window_means(100);
        let ups = w.windows(2).filter(|p| p[1] > p[0]).count();
        assert!(ups as f64 <= 0.05 * (w.len() - 1) as f64, "{ups} increases in {w:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_otcfm(&DatasetSpec::Circle { radius: 1.0 }, &small_cfg(20)).unwrap();
        let b = train_otcfm(&DatasetSpec::Circle { radius: 1.0 }, &small_cfg(20)).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2, 0.1, (0.9, 0.999), 1e-8);
        let mut p = vec![1.0, 1.0];
        adam.update(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn loss_csv_layout() {
        let trace = LossTrace { losses: vec![0.5, 0.25] };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("step,loss\n0,"));
        assert_eq!(s.lines().count(), 3);
    }
}
