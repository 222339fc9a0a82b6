//! Time-dependent vector fields.
//!
//! The exact OT-CFM field in proximal form is
//!
//! `v_t(y) = (alpha_dot/alpha) y + beta (beta_dot/beta - alpha_dot/alpha) prox_{lambda_t phi}(y / beta)`
//!
//! where `prox(y / beta)` is the denoised endpoint. Conditional fields
//! `alpha_dot x0 + beta_dot x1` are the regression targets of training.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::neural::Mlp;
use crate::potential::Potential;
use crate::schedule::{Schedule, ScheduleValues, DEFAULT_EPS_T};
use crate::transport::fmt_f64;

/// A map `(t, y) -> v_t(y)` on `R^d`.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64, y: &[f64]) -> Result<Vec<f64>>;

    /// Evaluations are valid on `[eps_t, 1 - eps_t]`.
    fn eps_t(&self) -> f64 {
        DEFAULT_EPS_T
    }

    /// The log-time field `u_tau = (1 - t) v_t`.
    fn eval_rescaled(&self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::scale(&self.eval(t, y)?, 1.0 - t))
    }
}

#[derive(Debug, Clone)]
pub enum FieldKind {
    ExactProx { potential: Potential, schedule: Schedule },
    Learned { model: Arc<Mlp>, schedule: Schedule },
    Conditional { x0: Vec<f64>, x1: Vec<f64>, schedule: Schedule },
    Zero { dim: usize },
}

#[derive(Debug, Clone)]
pub struct FieldSpec {
    kind: FieldKind,
    dim: usize,
    eps_t: f64,
}

impl FieldSpec {
    pub fn new(kind: FieldKind) -> Result<Self> {
        let dim = match &kind {
            FieldKind::ExactProx { potential, schedule } => {
                schedule.validate()?;
                potential.dim()
            }
            FieldKind::Learned { model, schedule } => {
                schedule.validate()?;
                model.output_dim()
            }
            FieldKind::Conditional { x0, x1, schedule } => {
                schedule.validate()?;
                check_dim(x0.len(), x1.len())?;
                x0.len()
            }
            FieldKind::Zero { dim } => *dim,
        };
        if dim == 0 {
            return Err(Error::InvalidArgument("field dimension must be positive".into()));
        }
        Ok(Self {
            kind,
            dim,
            eps_t: DEFAULT_EPS_T,
        })
    }

    pub fn exact(potential: Potential, schedule: Schedule) -> Result<Self> {
        Self::new(FieldKind::ExactProx { potential, schedule })
    }

    pub fn learned(model: Arc<Mlp>, schedule: Schedule) -> Result<Self> {
        Self::new(FieldKind::Learned { model, schedule })
    }

    pub fn conditional(x0: Vec<f64>, x1: Vec<f64>, schedule: Schedule) -> Result<Self> {
        Self::new(FieldKind::Conditional { x0, x1, schedule })
    }

    pub fn zero(dim: usize) -> Result<Self> {
        Self::new(FieldKind::Zero { dim })
    }

    pub fn with_eps_t(mut self, eps_t: f64) -> Result<Self> {
        if !(eps_t > 0.0 && eps_t < 0.5) {
            return Err(Error::domain("eps_t", eps_t, "(0, 0.5)"));
        }
        self.eps_t = eps_t;
        Ok(self)
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    pub fn schedule(&self) -> Option<&Schedule> {
        match &self.kind {
            FieldKind::ExactProx { schedule, .. }
            | FieldKind::Learned { schedule, .. }
            | FieldKind::Conditional { schedule, .. } => Some(schedule),
            FieldKind::Zero { .. } => None,
        }
    }

    pub fn potential(&self) -> Option<&Potential> {
        match &self.kind {
            FieldKind::ExactProx { potential, .. } => Some(potential),
            _ => None,
        }
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= self.eps_t && t <= 1.0 - self.eps_t) {
            return Err(Error::domain("t", t, format!("[{}, {}]", self.eps_t, 1.0 - self.eps_t)));
        }
        Ok(())
    }

    fn schedule_at(&self, t: f64) -> Result<ScheduleValues> {
        match self.schedule() {
            Some(s) => s.eval(t),
            None => Err(Error::Unsupported("field has no schedule".into())),
        }
    }

    /// The recovered endpoint `x1_hat` at a path point `y`: the prox for exact
    /// fields, the schedule inversion of `(y, v)` for learned ones.
    pub fn denoise(&self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        self.check_time(t)?;
        check_dim(self.dim, y.len())?;
        let s = self.schedule_at(t)?;
        match &self.kind {
            FieldKind::ExactProx { potential, .. } => {
                Ok(potential.prox(s.lambda, &linalg::scale(y, 1.0 / s.beta))?.point)
            }
            FieldKind::Learned { .. } => {
                // y = a x0 + b x1 and v = a' x0 + b' x1, eliminate x0.
                let v = self.eval(t, y)?;
                let det = s.alpha * s.beta_dot - s.alpha_dot * s.beta;
                Ok(y.iter()
                    .zip(&v)
                    .map(|(yi, vi)| (s.alpha * vi - s.alpha_dot * yi) / det)
                    .collect())
            }
            FieldKind::Conditional { x1, .. } => Ok(x1.clone()),
            FieldKind::Zero { .. } => unreachable!(),
        }
    }
}

impl VectorField for FieldSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eps_t(&self) -> f64 {
        self.eps_t
    }

    fn eval(&self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        self.check_time(t)?;
        check_dim(self.dim, y.len())?;
        match &self.kind {
            FieldKind::ExactProx { potential, schedule } => {
                let s = schedule.eval(t)?;
                let p = potential.prox(s.lambda, &linalg::scale(y, 1.0 / s.beta))?.point;
                Ok(linalg::axpy(&linalg::scale(y, s.alpha_rate()), s.b(), &p))
            }
            FieldKind::Learned { model, .. } => model.forward(t, y),
            FieldKind::Conditional { x0, x1, schedule } => {
                let s = schedule.eval(t)?;
                Ok(linalg::axpy(&linalg::scale(x0, s.alpha_dot), s.beta_dot, x1))
            }
            FieldKind::Zero { dim } => Ok(vec![0.0; *dim]),
        }
    }

    fn eval_rescaled(&self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            FieldKind::ExactProx { potential, schedule } => {
                self.check_time(t)?;
                check_dim(self.dim, y.len())?;
                // Use the analytic (1 - t) alpha_dot / alpha so the stiff part is exact.
                let s = schedule.eval(t)?;
                let p = potential.prox(s.lambda, &linalg::scale(y, 1.0 / s.beta))?.point;
                let a = schedule.scaled_alpha_rate(t)?;
                Ok(linalg::axpy(&linalg::scale(y, a), (1.0 - t) * s.beta_dot - a * s.beta, &p))
            }
            _ => Ok(linalg::scale(&self.eval(t, y)?, 1.0 - t)),
        }
    }
}

/// Evaluates `spec` at `(t, y)`; the free-function form of [`VectorField::eval`].
pub fn eval_field(spec: &FieldSpec, t: f64, y: &[f64]) -> Result<Vec<f64>> {
    spec.eval(t, y)
}

/// Residual of the rescaled Moreau-envelope gradient flow together with the
/// magnitude it should be compared against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub residual: f64,
    pub scale: f64,
}

impl Residual {
    pub fn within(&self, rel_tol: f64) -> bool {
        self.residual <= rel_tol * self.scale
    }
}

/// `|dz/dt + c_t lambda_t grad M_{lambda_t phi}(z)|` for `z = x / beta_t`,
/// with `dz/dt = (v_t(x) beta_t - beta_dot_t x) / beta_t^2` taken from the field.
pub fn moreau_flow_residual(spec: &FieldSpec, t: f64, x: &[f64]) -> Result<Residual> {
    let FieldKind::ExactProx { potential, schedule } = &spec.kind else {
        return Err(Error::Unsupported("Moreau flow needs an exact prox field".into()));
    };
    let s = schedule.eval(t)?;
    let v = spec.eval(t, x)?;
    let z = linalg::scale(x, 1.0 / s.beta);
    let dz = linalg::scale(&linalg::axpy(&linalg::scale(&v, s.beta), -s.beta_dot, x), 1.0 / (s.beta * s.beta));
    let (_, grad) = potential.moreau(s.lambda, &z)?;
    let target = linalg::scale(&grad, -s.c() * s.lambda);
    Ok(Residual {
        residual: linalg::dist(&dz, &target),
        scale: 1.0 + linalg::norm(&dz) + linalg::norm(&target) + s.c().abs() * linalg::norm(&z),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OslReport {
    /// Largest `<v(x) - v(y), x - y> - (beta_dot/beta) |x - y|^2` over the pairs.
    pub max_excess: f64,
    pub scale: f64,
    pub ok: bool,
}

/// Relative tolerance of [`osl_check`].
pub const OSL_TOL: f64 = 1e-8;

/// One-sided Lipschitz bound with modulus `beta_dot / beta`, valid whenever
/// `b(t) = beta (beta_dot/beta - alpha_dot/alpha) >= 0`.
pub fn osl_check(spec: &FieldSpec, t: f64, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<OslReport> {
    let s = spec.schedule_at(t)?;
    if s.b() < 0.0 {
        return Err(Error::InvalidArgument(format!("b(t) = {} < 0 at t = {t}", s.b())));
    }
    let mut max_excess = f64::NEG_INFINITY;
    let mut scale = 1.0f64;
    for (x, y) in pairs {
        let vx = spec.eval(t, x)?;
        let vy = spec.eval(t, y)?;
        let dx = linalg::sub(x, y);
        let inner = linalg::dot(&linalg::sub(&vx, &vy), &dx);
        let bound = s.beta_rate() * linalg::norm_sq(&dx);
        max_excess = max_excess.max(inner - bound);
        scale = scale.max(inner.abs()).max(bound);
    }
    if pairs.is_empty() {
        max_excess = 0.0;
    }
    Ok(OslReport {
        max_excess,
        scale,
        ok: max_excess <= OSL_TOL * scale,
    })
}

/// Central-difference Jacobian of `v_t` at `x` with step `1e-4 (1 + |x|)`.
pub fn field_jacobian(field: &dyn VectorField, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
    let h = 1e-4 * (1.0 + linalg::norm(x));
    linalg::fd_jacobian(x, h, |p| field.eval(t, p))
}

/// Jacobian of the log-time field `(1 - t) v_t` at `x`.
pub fn rescaled_jacobian(field: &dyn VectorField, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
    let h = 1e-4 * (1.0 + linalg::norm(x));
    linalg::fd_jacobian(x, h, |p| field.eval_rescaled(t, p))
}

/// `max_ij |J - J^T|` of the field Jacobian; gradient fields give zero.
pub fn gradient_structure_check(spec: &FieldSpec, t: f64, x: &[f64]) -> Result<f64> {
    match &spec.kind {
        FieldKind::ExactProx { potential, .. } if potential.is_smooth() => {}
        _ => {
            return Err(Error::Unsupported(
                "gradient structure check needs an exact field with a smooth potential".into(),
            ))
        }
    }
    let j = field_jacobian(spec, t, x)?;
    Ok((&j - j.transpose()).amax())
}

/// Writes `t, x_1..x_d, v_1..v_d` rows for each point.
pub fn write_field_csv<W: Write>(field: &dyn VectorField, t: f64, points: &[Vec<f64>], mut w: W) -> Result<()> {
    let d = field.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("x_{i}")));
    header.extend((1..=d).map(|i| format!("v_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for p in points {
        let v = field.eval(t, p)?;
        let row: Vec<String> = std::iter::once(t).chain(p.iter().copied()).chain(v).map(fmt_f64).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{build_empirical, QuadraticPotential};
    use crate::rng;
    use crate::transport::{couple, PointCloud};
    use proptest::prelude::*;

    fn line(c: f64) -> FieldSpec {
        FieldSpec::exact(Potential::LineManifold { c }, Schedule::Affine).unwrap()
    }

    #[test]
    fn line_manifold_field_closed_form() {
        let v = line(1.0).eval(0.5, &[1.0, 2.0]).unwrap();
        assert!(v[0].abs() < 1e-15 && (v[1] + 2.0).abs() < 1e-14, "{v:?}");
    }

    #[test]
    fn conditional_affine_is_difference() {
        let f = FieldSpec::conditional(vec![1.0, 0.0], vec![0.0, 1.0], Schedule::Affine).unwrap();
        for t in [0.1, 0.5, 0.9] {
            assert_eq!(f.eval(t, &[3.0, 3.0]).unwrap(), vec![-1.0, 1.0]);
        }
    }

    #[test]
    fn identity_potential_gives_zero_field() {
        let f = FieldSpec::exact(Potential::half_norm_sq(1), Schedule::Affine).unwrap();
        assert!(f.eval(0.5, &[1.0]).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn time_window_enforced() {
        let f = line(1.0);
        assert!(f.eval(0.0, &[0.0, 0.0]).is_err());
        assert!(f.eval(1.0, &[0.0, 0.0]).is_err());
        assert!(f.eval(1.0 - 1e-7, &[0.0, 0.0]).is_err());
        assert!(f.eval(1e-6, &[0.0, 0.0]).is_ok());
    }

    #[test]
    fn denoise_examples() {
        let x = line(1.0).denoise(0.5, &[2.0, 3.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-14 && x[1] == 1.0);
        let f = FieldSpec::exact(Potential::half_norm_sq(1), Schedule::Affine).unwrap();
        assert!((f.denoise(0.5, &[3.0]).unwrap()[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn rescaled_matches_scaled_eval() {
        let f = FieldSpec::exact(Potential::Quartic { dim: 2 }, Schedule::power_law(2.0, 1.0)).unwrap();
        for t in [0.2, 0.6, 0.95] {
            let a = f.eval_rescaled(t, &[0.3, -1.2]).unwrap();
            let b = linalg::scale(&f.eval(t, &[0.3, -1.2]).unwrap(), 1.0 - t);
            assert!(linalg::dist(&a, &b) < 1e-12 * (1.0 + linalg::norm(&b)));
        }
    }

    #[test]
    fn marginal_equals_conditional_on_coupled_paths() {
        let mut r = rng::seeded(11);
        let src = PointCloud::new((0..32).map(|_| rng::normal_vec(&mut r, 2)).collect()).unwrap();
        let tgt = PointCloud::new((0..32).map(|_| rng::normal_vec(&mut r, 2)).collect()).unwrap();
        let coupling = couple(&src, &tgt).unwrap();
        let phi = Potential::Empirical(build_empirical(&coupling).unwrap());
        let field = FieldSpec::exact(phi, Schedule::Affine).unwrap();
        for l in 0..coupling.len() {
            let (x0, x1) = coupling.pair(l);
            let cond = FieldSpec::conditional(x0.to_vec(), x1.to_vec(), Schedule::Affine).unwrap();
            for i in 1..=20 {
                let t = i as f64 / 21.0;
                let y = linalg::axpy(&linalg::scale(x0, 1.0 - t), t, x1);
                let a = field.eval(t, &y).unwrap();
                let b = cond.eval(t, &y).unwrap();
                assert!(linalg::dist(&a, &b) < 1e-6, "l={l} t={t}");
            }
        }
    }

    #[test]
    fn moreau_flow_examples() {
        let f = FieldSpec::exact(Potential::half_norm_sq(1), Schedule::Affine).unwrap();
        assert!(moreau_flow_residual(&f, 0.5, &[1.0]).unwrap().residual < 1e-14);
        assert!(moreau_flow_residual(&line(1.0), 0.7, &[1.0, 2.0]).unwrap().within(1e-8));
    }

    #[test]
    fn osl_examples() {
        let f = FieldSpec::exact(Potential::half_norm_sq(1), Schedule::Affine).unwrap();
        let same = osl_check(&f, 0.5, &[(vec![1.0], vec![1.0])]).unwrap();
        assert_eq!(same.max_excess, 0.0);
        let mut r = rng::seeded(5);
        let pairs: Vec<_> = (0..100).map(|_| (rng::normal_vec(&mut r, 1), rng::normal_vec(&mut r, 1))).collect();
        assert!(osl_check(&f, 0.5, &pairs).unwrap().ok);
    }

    #[test]
    fn osl_needs_a_schedule() {
        let z = FieldSpec::zero(2).unwrap();
        assert!(osl_check(&z, 0.5, &[]).is_err());
    }

    #[test]
    fn gradient_structure_examples() {
        let f = FieldSpec::exact(Potential::half_norm_sq(2), Schedule::Affine).unwrap();
        assert!(gradient_structure_check(&f, 0.5, &[0.3, 0.7]).unwrap() <= 1e-10);
        let b = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 4.0]));
        let q = Potential::Quadratic(QuadraticPotential::new(b, vec![0.0; 2], vec![0.0; 2]).unwrap());
        let f = FieldSpec::exact(q, Schedule::Affine).unwrap();
        assert!(gradient_structure_check(&f, 0.5, &[0.3, 0.7]).unwrap() <= 1e-6);
        assert!(gradient_structure_check(&line(0.0), 0.5, &[0.3, 0.7]).is_err());
    }

    #[test]
    fn learned_denoise_inverts_the_schedule() {
        // A model that outputs the conditional field of a fixed pair recovers x1.
        let x0 = [0.5, -1.0];
        let x1 = [2.0, 3.0];
        let s = Schedule::Affine;
        let t = 0.3;
        let v = s.eval(t).unwrap();
        let y = linalg::axpy(&linalg::scale(&x0, v.alpha), v.beta, &x1);
        let cond = FieldSpec::conditional(x0.to_vec(), x1.to_vec(), s).unwrap();
        let target = cond.eval(t, &y).unwrap();
        let model = Mlp::constant_output(2, &target);
        let f = FieldSpec::learned(Arc::new(model), s).unwrap();
        let got = f.denoise(t, &y).unwrap();
        assert!(linalg::dist(&got, &x1) < 1e-12, "{got:?}");
    }

    #[test]
    fn field_csv_layout() {
        let mut buf = Vec::new();
        write_field_csv(&line(1.0), 0.5, &[vec![1.0, 2.0]], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("t,x_1,x_2,v_1,v_2"));
        assert_eq!(lines.next().unwrap().split(',').count(), 5);
    }

    proptest! {
        #[test]
        fn denoise_is_nonexpansive(a in prop::collection::vec(-5.0f64..5.0, 2), b in prop::collection::vec(-5.0f64..5.0, 2), t in 0.05f64..0.95) {
            for f in [line(0.5), FieldSpec::exact(Potential::Quartic { dim: 2 }, Schedule::Affine).unwrap()] {
                let s = Schedule::Affine.eval(t).unwrap();
                let da = f.denoise(t, &a).unwrap();
                let db = f.denoise(t, &b).unwrap();
                prop_assert!(linalg::dist(&da, &db) <= linalg::dist(&a, &b) / s.beta * (1.0 + 1e-12) + 1e-12);
            }
        }
    }
}
