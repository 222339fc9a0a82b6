//! Interpolation schedules `x_t = alpha_t x0 + beta_t x1`.
//!
//! Only two parametric families are supported so every derivative and the
//! terminal rate `gamma` are known in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default distance kept from the endpoints `t = 0` and `t = 1` wherever
/// `1/alpha_t` or `1/beta_t` is formed.
pub const DEFAULT_EPS_T: f64 = 1e-6;

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    /// `alpha_t = 1 - t`, `beta_t = t`.
    Affine,
    /// `alpha_t = c_alpha (1 - t)^gamma`, `beta_t = c_beta t^eta`.
    #[serde(rename = "powerlaw")]
    PowerLaw {
        gamma: f64,
        eta: f64,
        #[serde(default = "one")]
        c_alpha: f64,
        #[serde(default = "one")]
        c_beta: f64,
    },
}

/// Values of the schedule and its derivatives at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_dot: f64,
    pub beta_dot: f64,
    /// Prox step `alpha / beta`.
    pub lambda: f64,
}

impl ScheduleValues {
    /// `alpha_dot / alpha`
    pub fn alpha_rate(&self) -> f64 {
        self.alpha_dot / self.alpha
    }

    /// `beta_dot / beta`
    pub fn beta_rate(&self) -> f64 {
        self.beta_dot / self.beta
    }

    /// `c_t = beta_dot/beta - alpha_dot/alpha`
    pub fn c(&self) -> f64 {
        self.beta_rate() - self.alpha_rate()
    }

    /// `b(t) = beta_t * c_t`, the weight of the prox term in the field.
    pub fn b(&self) -> f64 {
        self.beta_dot - self.beta * self.alpha_rate()
    }
}

impl Schedule {
    /// Power-law family with unit constants.
    pub fn power_law(gamma: f64, eta: f64) -> Self {
        Schedule::PowerLaw {
            gamma,
            eta,
            c_alpha: 1.0,
            c_beta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Schedule::PowerLaw {
            gamma,
            eta,
            c_alpha,
            c_beta,
        } = *self
        {
            for (name, v) in [
                ("gamma", gamma),
                ("eta", eta),
                ("c_alpha", c_alpha),
                ("c_beta", c_beta),
            ] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "power-law schedule parameter {name} must be positive, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<ScheduleValues> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::domain("t", t, "(0, 1)"));
        }
        let (alpha, beta, alpha_dot, beta_dot) = match *self {
            Schedule::Affine => (1.0 - t, t, -1.0, 1.0),
            Schedule::PowerLaw {
                gamma,
                eta,
                c_alpha,
                c_beta,
            } => {
                let s = 1.0 - t;
                (
                    c_alpha * s.powf(gamma),
                    c_beta * t.powf(eta),
                    -gamma * c_alpha * s.powf(gamma - 1.0),
                    eta * c_beta * t.powf(eta - 1.0),
                )
            }
        };
        Ok(ScheduleValues {
            alpha,
            beta,
            alpha_dot,
            beta_dot,
            lambda: alpha / beta,
        })
    }

    /// Terminal rate: the limit of `-(1 - t) alpha_dot / alpha` as `t -> 1`.
    pub fn gamma(&self) -> f64 {
        match *self {
            Schedule::Affine => 1.0,
            Schedule::PowerLaw { gamma, .. } => gamma,
        }
    }

    /// `(1 - t) alpha_dot / alpha` evaluated in closed form (no cancellation near `t = 1`).
    pub fn scaled_alpha_rate(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::domain("t", t, "(0, 1)"));
        }
        Ok(-self.gamma())
    }
}

/// `tau = -log(1 - t)`.
pub fn tau_of_t(t: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::domain("t", t, "[0, 1)"));
    }
    Ok(-(-t).ln_1p())
}

/// Inverse of [`tau_of_t`]: `t = 1 - exp(-tau)`.
pub fn t_of_tau(tau: f64) -> Result<f64> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::domain("tau", tau, "[0, inf)"));
    }
    Ok(-(-tau).exp_m1())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn affine_values() {
        let v = Schedule::Affine.eval(0.5).unwrap();
        assert_eq!((v.alpha, v.beta, v.alpha_dot, v.beta_dot, v.lambda), (0.5, 0.5, -1.0, 1.0, 1.0));
        let v = Schedule::Affine.eval(0.9).unwrap();
        assert!(close(v.alpha, 0.1, 1e-15));
        assert!(close(v.beta, 0.9, 1e-15));
        assert!(close(v.lambda, 1.0 / 9.0, 1e-15));
    }

    #[test]
    fn power_law_values() {
        let v = Schedule::power_law(2.0, 1.0).eval(0.5).unwrap();
        assert!(close(v.alpha, 0.25, 1e-15));
        assert!(close(v.alpha_dot, -1.0, 1e-15));
        assert!(close(v.lambda, 0.5, 1e-15));
    }

    #[test]
    fn out_of_domain() {
        for t in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(Schedule::Affine.eval(t).is_err());
        }
        assert!(tau_of_t(1.0).is_err());
        assert!(t_of_tau(-1.0).is_err());
    }

    #[test]
    fn gamma_matches_numeric_probe() {
        let t = 1.0 - 1e-6;
        for (s, g) in [
            (Schedule::Affine, 1.0),
            (Schedule::power_law(2.0, 1.0), 2.0),
            (Schedule::power_law(0.5, 1.0), 0.5),
        ] {
            assert_eq!(s.gamma(), g);
            let v = s.eval(t).unwrap();
            let probe = (1.0 - t) * v.alpha_dot / v.alpha;
            assert!((probe + g).abs() <= 1e-6, "{s:?}: {probe}");
        }
    }

    #[test]
    fn tau_examples() {
        assert_eq!(tau_of_t(0.0).unwrap(), 0.0);
        assert!(close(tau_of_t(1.0 - (-3.0f64).exp()).unwrap(), 3.0, 1e-12));
        assert_eq!(t_of_tau(0.0).unwrap(), 0.0);
    }

    #[test]
    fn lambda_is_ratio_on_random_times() {
        let mut r = rng::seeded(11);
        let families = [Schedule::Affine, Schedule::power_law(2.0, 1.0), Schedule::power_law(0.5, 1.5)];
        for _ in 0..1000 {
            let t = rng::uniform_open(&mut r, 0.0, 1.0);
            for s in &families {
                let v = s.eval(t).unwrap();
                assert_eq!(v.lambda, v.alpha / v.beta);
                assert!(v.alpha > 0.0 && v.beta > 0.0 && v.lambda.is_finite());
            }
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-5;
        let families = [
            Schedule::Affine,
            Schedule::power_law(2.0, 1.0),
            Schedule::power_law(0.5, 2.0),
            Schedule::PowerLaw { gamma: 1.5, eta: 0.7, c_alpha: 2.0, c_beta: 0.5 },
        ];
        let mut r = rng::seeded(5);
        for s in &families {
            for _ in 0..200 {
                let t: f64 = 0.01 + 0.98 * r.random::<f64>();
                let v = s.eval(t).unwrap();
                let p = s.eval(t + h).unwrap();
                let m = s.eval(t - h).unwrap();
                assert!((v.alpha_dot - (p.alpha - m.alpha) / (2.0 * h)).abs() <= 1e-6, "{s:?} t={t}");
                assert!((v.beta_dot - (p.beta - m.beta) / (2.0 * h)).abs() <= 1e-6, "{s:?} t={t}");
            }
        }
    }

    #[test]
    fn tau_round_trip() {
        let mut r = rng::seeded(2);
        for _ in 0..1000 {
            let t = r.random::<f64>() * (1.0 - 1e-8);
            let back = t_of_tau(tau_of_t(t).unwrap()).unwrap();
            assert!((back - t).abs() <= 1e-12 * t.max(f64::MIN_POSITIVE), "t={t} back={back}");
        }
    }

    #[test]
    fn serde_shape() {
        let s: Schedule = serde_json::from_str(r#"{"family":"affine"}"#).unwrap();
        assert_eq!(s, Schedule::Affine);
        let s: Schedule = serde_json::from_str(r#"{"family":"powerlaw","gamma":2,"eta":1}"#).unwrap();
        assert_eq!(s, Schedule::power_law(2.0, 1.0));
        assert!(serde_json::from_str::<Schedule>(r#"{"family":"cosine"}"#).is_err());
    }
}
