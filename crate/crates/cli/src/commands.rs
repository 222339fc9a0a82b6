use std::path::Path;

use flowprox::datasets::two_moons_boundary_distance;
use flowprox::flow::{convergence_study, integrate_rescaled, sample_pushforward};
use flowprox::lyapunov::{jacobian_spectrum, spectrum_gap, tangent_normal_split, terminal_exponents, Manifold, MIN_TAU_MAX, TAU_STEP};
use flowprox::neural::{save_checkpoint, train_otcfm_on};
use flowprox::potential::{
    build_empirical, expansion_slope, grad_psi_star, minibatch_prox_convergence, prox_expansion_residual,
    verify_psi_star_duality,
};
use flowprox::transport::{couple, empirical_w2};
use flowprox::{linalg, rng, FieldSpec, PointCloud, Potential, Schedule, VectorField};
use serde_json::json;

use crate::config::*;
use crate::{CliError, Outputs};

fn seeded_cloud(n: usize, d: usize, seed: u64) -> Result<PointCloud, CliError> {
    let mut r = rng::seeded(seed);
    Ok(PointCloud::new((0..n).map(|_| rng::normal_vec(&mut r, d)).collect())?)
}

pub fn train(mut run: TrainRun, seed: Option<u64>, out: &mut Outputs) -> Result<(), CliError> {
    if let Some(s) = seed {
        run.train.seed = s;
    }
    run.train.validate()?;
    let data = run.dataset.load()?;
    let log_every = run.log_every;
    let (model, trace) = train_otcfm_on(&data, &run.train, |step, loss| {
        if log_every > 0 && step % log_every == 0 {
            eprintln!("step {step} loss {loss:.6}");
        }
    })?;
    let ckpt = out.write("model.ckpt", |_| Ok(()))?;
    save_checkpoint(&model, &ckpt)?;
    out.write("loss.csv", |w| trace.write_csv(w))?;
    let final_loss = trace.last().unwrap_or(f64::NAN);
    println!("final loss {final_loss}");
    let window = (trace.losses.len() / 20).max(1);
    let windows = trace.window_means(window);
    let s = out.summary();
    s.check("finite_loss", trace.losses.iter().all(|l| l.is_finite()), format!("final loss {final_loss}"));
    s.results = json!({
        "steps": trace.losses.len(),
        "final_loss": final_loss,
        "first_window_mean": windows.first(),
        "last_window_mean": windows.last(),
        "n_params": model.n_params(),
        "layer_dims": model.layer_dims(),
    });
    Ok(())
}

pub fn spectrum(run: SpectrumRun, base: &Path, seed: Option<u64>, out: &mut Outputs) -> Result<(), CliError> {
    if let Some(&t) = run.t_grid.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
        return Err(CliError::Usage(format!("t_grid entries must lie in (0, 1), got {t}")));
    }
    if run.n_starts == 0 {
        return Err(CliError::Usage("n_starts must be positive".into()));
    }
    let expect_index = match &run.expect {
        Some(e) => Some(
            run.t_grid
                .iter()
                .position(|&t| (t - e.t).abs() < 1e-12)
                .ok_or_else(|| CliError::Usage(format!("expect.t = {} is not in t_grid", e.t)))?,
        ),
        None => None,
    };
    let field = run.field.build(base)?;
    let starts = seeded_cloud(run.n_starts, field.dim(), seed.unwrap_or(run.seed))?;
    let report = jacobian_spectrum(&field, &starts, &run.t_grid)?;
    out.write("spectrum.csv", |w| report.write_csv(w))?;

    let mut judged = report.clone();
    let mut n_interior = None;
    if let Some(margin) = run.two_moons_interior {
        if field.dim() != 2 {
            return Err(CliError::Usage("two_moons_interior needs a 2-D field".into()));
        }
        let keep: Vec<bool> = report
            .states
            .iter()
            .map(|s| two_moons_boundary_distance(s.last().unwrap()) > margin)
            .collect();
        judged = report.subset(&keep)?;
        n_interior = Some(judged.n_trajectories);
        out.write("spectrum_interior.csv", |w| judged.write_csv(w))?;
    }

    let s = out.summary();
    let finite = report.mean.iter().flatten().all(|v| v.is_finite());
    s.check("finite_spectrum", finite, format!("{} trajectories", report.n_trajectories));
    if report.complex_flags.iter().any(|&c| c > 0) {
        s.warn(format!("complex eigenvalues flagged per grid time: {:?}", report.complex_flags));
    }
    if let (Some(e), Some(k)) = (&run.expect, expect_index) {
        let got = &judged.mean[k];
        let ok = got.len() == e.eigenvalues.len()
            && got.iter().zip(&e.eigenvalues).all(|(g, want)| (g - want).abs() <= e.tol);
        s.check(
            "mean_eigenvalues",
            ok,
            format!("t = {}: mean {:?}, expected {:?} +- {}", e.t, got, e.eigenvalues, e.tol),
        );
    }
    let gap = run.gap.as_ref().map(|g| {
        let rep = spectrum_gap(&judged, g.gamma);
        (g.min_tangential, rep)
    });
    if let Some((min, rep)) = gap {
        s.check(
            "spectrum_gap",
            rep.n_tangential >= min,
            format!("{} tangential, {} normal, gap {}", rep.n_tangential, rep.n_normal, rep.gap),
        );
    }
    s.results = json!({
        "t_grid": report.t_grid,
        "mean": judged.mean,
        "std": judged.std,
        "mean_all_starts": report.mean,
        "complex_flags": report.complex_flags,
        "n_trajectories": report.n_trajectories,
        "n_interior": n_interior,
        "gap": gap.map(|g| g.1),
    });
    Ok(())
}

fn project(manifold: &Manifold, x: &[f64]) -> Vec<f64> {
    match *manifold {
        Manifold::Line { c } => vec![x[0], c],
        Manifold::Circle { r } => linalg::scale(x, r / linalg::norm(x)),
    }
}

pub fn lyapunov(run: LyapunovRun, base: &Path, out: &mut Outputs) -> Result<(), CliError> {
    if run.tau_max < MIN_TAU_MAX {
        out.summary().warn(format!(
            "tau_max = {} is below {MIN_TAU_MAX}; the fit window would be dominated by transients",
            run.tau_max
        ));
    }
    let field = run.field.build(base)?;
    let directions = match (&run.directions, &run.manifold) {
        (Some(d), _) => d.clone(),
        (None, Some(m)) => {
            if field.dim() != 2 {
                return Err(CliError::Usage("manifold directions need a 2-D field".into()));
            }
            let steps = (run.tau_max / TAU_STEP).ceil().max(1.0) as usize;
            let end = integrate_rescaled(&field, &run.start, run.tau_max, steps)?;
            let (tangent, normal) = tangent_normal_split(m, &project(m, end.last()))?;
            tangent.into_iter().chain(normal).collect()
        }
        (None, None) => return Err(CliError::Usage("give either directions or a manifold".into())),
    };
    if let Some(e) = &run.expect {
        if e.len() != directions.len() {
            return Err(CliError::Usage(format!("expect has {} entries for {} directions", e.len(), directions.len())));
        }
    }
    let report = terminal_exponents(&field, &run.start, &directions, run.tau_max)?;
    out.write("exponents.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })?;
    let s = out.summary();
    s.check(
        "finite_exponents",
        report.exponents.iter().all(|e| e.is_finite()),
        format!("{:?}", report.exponents),
    );
    if let Some(expect) = &run.expect {
        for (i, (&got, &want)) in report.exponents.iter().zip(expect).enumerate() {
            let tol = if want == 0.0 { run.abs_tol } else { run.rel_tol * want.abs() };
            s.check(format!("exponent_{i}"), (got - want).abs() <= tol, format!("{got} vs {want} +- {tol}"));
        }
    }
    s.results = serde_json::to_value(&report).map_err(flowprox::Error::from)?;
    Ok(())
}

/// A point in the domain of `phi` drawn from the seeded stream.
fn domain_point(phi: &Potential, r: &mut rng::SeededRng) -> Vec<f64> {
    let mut x = rng::normal_vec(r, phi.dim());
    if let Potential::LineManifold { c } = phi {
        x[1] = *c;
    }
    x
}

struct Worst {
    value: f64,
    ok: bool,
}

fn suite_duality(phi: &Potential, schedule: &Schedule, ts: &[f64], seed: u64) -> Result<Worst, CliError> {
    let mut r = rng::seeded(seed);
    let mut w = Worst {
        value: f64::INFINITY,
        ok: true,
    };
    for (i, &t) in ts.iter().enumerate() {
        for j in 0..4 {
            let y = linalg::scale(&rng::normal_vec(&mut r, phi.dim()), 2.0);
            let rep = verify_psi_star_duality(phi, schedule, t, &y, seed.wrapping_add((4 * i + j) as u64))?;
            w.value = w.value.min(rep.worst_slack);
            w.ok &= rep.ok;
        }
    }
    Ok(w)
}

/// Recovers `x1` from `x_t = alpha x0 + beta x1` for every pair.
fn suite_denoiser(phi: &Potential, schedule: &Schedule, ts: &[f64], pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Worst, CliError> {
    let mut worst = 0.0f64;
    let mut ok = true;
    for &t in ts {
        let s = schedule.eval(t)?;
        for (x0, x1) in pairs {
            let xt = linalg::add(&linalg::scale(x0, s.alpha), &linalg::scale(x1, s.beta));
            let err = linalg::dist(&grad_psi_star(phi, schedule, t, &xt)?, x1);
            worst = worst.max(err);
            ok &= err <= 1e-6 * (1.0 + linalg::norm(x1));
        }
    }
    Ok(Worst { value: worst, ok })
}

fn suite_nonexpansive(phi: &Potential, n_pairs: usize, seed: u64) -> Result<Worst, CliError> {
    let mut r = rng::seeded(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..n_pairs {
        let lambda = rng::uniform_open(&mut r, 0.01, 5.0);
        let z1 = linalg::scale(&rng::normal_vec(&mut r, phi.dim()), 2.0);
        let z2 = linalg::scale(&rng::normal_vec(&mut r, phi.dim()), 2.0);
        let gap = linalg::dist(&phi.prox(lambda, &z1)?.point, &phi.prox(lambda, &z2)?.point) - linalg::dist(&z1, &z2);
        worst = worst.max(gap);
    }
    Ok(Worst {
        value: worst,
        ok: worst <= 1e-9,
    })
}

pub const EXPANSION_LAMBDAS: [f64; 7] = [1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1];

pub fn prox_check(run: ProxCheckRun, base: &Path, seed: Option<u64>, out: &mut Outputs) -> Result<(), CliError> {
    if run.potentials.is_empty() && run.empirical.is_none() {
        return Err(CliError::Usage("nothing to check: give potentials or an empirical suite".into()));
    }
    if let Some(&t) = run.t_values.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
        return Err(CliError::Usage(format!("t_values must lie in (0, 1), got {t}")));
    }
    let seed = seed.unwrap_or(run.seed);
    let mut labelled: Vec<(String, Potential, Vec<(Vec<f64>, Vec<f64>)>)> = Vec::new();
    for (i, cfg) in run.potentials.iter().enumerate() {
        let phi = cfg.build(base)?;
        // Population pairs: x0 is a subgradient at x1.
        let mut r = rng::substream(seed, i as u64);
        let pairs = (0..64)
            .map(|_| {
                let x1 = domain_point(&phi, &mut r);
                Ok((phi.subgradient(&x1)?, x1))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        labelled.push((format!("potential_{i}"), phi, pairs));
    }
    if let Some(e) = &run.empirical {
        let c = couple(&seeded_cloud(e.n, e.dim, seed)?, &seeded_cloud(e.n, e.dim, seed.wrapping_add(1))?)?;
        let mut phi = build_empirical(&c)?;
        if e.corrupt_offsets != 0.0 {
            for (k, h) in phi.offsets_mut().iter_mut().enumerate() {
                if k % 2 == 1 {
                    *h += e.corrupt_offsets;
                }
            }
        }
        let pairs = (0..c.len()).map(|l| (c.pair(l).0.to_vec(), c.pair(l).1.to_vec())).collect();
        labelled.push(("empirical".into(), Potential::Empirical(phi), pairs));
    }

    let mut results = serde_json::Map::new();
    for (i, (label, phi, pairs)) in labelled.iter().enumerate() {
        let stream = seed.wrapping_add(1000 * (i as u64 + 1));
        let duality = suite_duality(phi, &run.schedule, &run.t_values, stream)?;
        let denoise = suite_denoiser(phi, &run.schedule, &run.t_values, pairs)?;
        let nonexp = suite_nonexpansive(phi, run.n_pairs, stream + 1)?;
        let s = out.summary();
        s.check(format!("{label}/prox_identity"), duality.ok, format!("worst slack {:e}", duality.value));
        s.check(format!("{label}/perfect_denoiser"), denoise.ok, format!("worst error {:e}", denoise.value));
        s.check(format!("{label}/non_expansive"), nonexp.ok, format!("worst excess {:e}", nonexp.value));
        let mut entry = json!({
            "prox_identity_worst_slack": duality.value,
            "denoiser_worst_error": denoise.value,
            "non_expansive_worst_excess": nonexp.value,
        });
        if phi.is_smooth() {
            let mut r = rng::seeded(stream + 2);
            let x = linalg::axpy(&vec![0.5; phi.dim()], 1.0, &rng::normal_vec(&mut r, phi.dim()));
            let res = prox_expansion_residual(phi, &x, &EXPANSION_LAMBDAS)?;
            let slope = expansion_slope(&res);
            s.check(format!("{label}/expansion_slope"), (slope - 2.0).abs() <= 0.1, format!("slope {slope}"));
            entry["expansion_slope"] = json!(slope);
        }
        results.insert(label.clone(), entry);
    }
    out.summary().results = serde_json::Value::Object(results);
    Ok(())
}

fn tensor_grid(g: &GridConfig, d: usize) -> Result<PointCloud, CliError> {
    if g.points < 2 || !(g.hi > g.lo) {
        return Err(CliError::Usage("grid needs at least 2 points and hi > lo".into()));
    }
    let axis: Vec<f64> = (0..g.points)
        .map(|i| g.lo + (g.hi - g.lo) * i as f64 / (g.points - 1) as f64)
        .collect();
    let mut points = vec![Vec::new()];
    for _ in 0..d {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    Ok(PointCloud::new(points)?)
}

/// Whether each step grows by at most `slack` (relative) and, if asked, the
/// last value is below `ratio` times the first.
fn trend(values: &[f64], slack: f64, ratio: Option<f64>) -> (bool, bool) {
    let monotone = values.windows(2).all(|w| w[1] <= (1.0 + slack) * w[0]);
    let shrink = match ratio {
        Some(r) => values.last().unwrap() < &(r * values[0]),
        None => true,
    };
    (monotone, shrink)
}

pub fn converge(run: ConvergeRun, base: &Path, seed: Option<u64>, out: &mut Outputs) -> Result<(), CliError> {
    if !(run.c > 0.0 && run.c < 1.0) {
        return Err(CliError::Usage(format!("c must lie in (0, 1), got {}", run.c)));
    }
    if run.n_list.is_empty() {
        return Err(CliError::Usage("n_list is empty".into()));
    }
    let seed = seed.unwrap_or(run.seed);
    let population = run.population.build(base)?;
    let grid = tensor_grid(&run.grid, population.dim())?;
    let prox_rows = minibatch_prox_convergence(&population, &run.dataset, &run.n_list, run.lambda, &grid, seed)?;
    let field = FieldSpec::exact(population, run.schedule)?;
    let table = convergence_study(&field, &run.dataset, &run.n_list, run.c, seed, run.steps)?;
    out.write("convergence.csv", |w| {
        writeln!(w, "n,sup_prox_error,traj_error,w2")?;
        for (p, f) in prox_rows.iter().zip(&table.rows) {
            writeln!(
                w,
                "{},{},{},{}",
                p.n,
                flowprox::transport::fmt_f64(p.sup_error),
                flowprox::transport::fmt_f64(f.traj_error),
                flowprox::transport::fmt_f64(f.w2)
            )?;
        }
        Ok(())
    })?;
    let columns = [
        ("sup_prox_error", prox_rows.iter().map(|r| r.sup_error).collect::<Vec<_>>()),
        ("traj_error", table.rows.iter().map(|r| r.traj_error).collect()),
        ("w2", table.rows.iter().map(|r| r.w2).collect()),
    ];
    let s = out.summary();
    for (name, values) in &columns {
        let (monotone, shrink) = trend(values, run.monotone_slack, run.final_ratio);
        s.check(format!("{name}/non_increasing"), monotone, format!("{values:?}"));
        if let Some(r) = run.final_ratio {
            s.check(format!("{name}/final_ratio"), shrink, format!("last / first must be < {r}"));
        }
    }
    s.results = json!({
        "n": run.n_list,
        "sup_prox_error": columns[0].1,
        "traj_error": columns[1].1,
        "w2": columns[2].1,
    });
    Ok(())
}

pub fn sample(run: SampleRun, base: &Path, seed: Option<u64>, out: &mut Outputs) -> Result<(), CliError> {
    if run.n == 0 {
        return Err(CliError::Usage("n must be at least 1".into()));
    }
    let seed = seed.unwrap_or(run.seed);
    let field = run.field.build(base)?;
    let samples = sample_pushforward(&field, run.n, run.t1, seed, run.steps)?;
    out.write("samples.csv", |w| samples.write_csv(w))?;
    let finite = linalg::all_finite(samples.as_flat());
    let mut w2 = None;
    if let Some(h) = &run.held_out {
        let reference = h.dataset.sample(run.n, seed.wrapping_add(0x5eed))?;
        let d = empirical_w2(&samples, &reference)?;
        w2 = Some(d);
        if let Some(max) = h.max_w2 {
            out.summary().check("held_out_w2", d <= max, format!("{d} (max {max})"));
        }
    }
    let s = out.summary();
    s.check("finite_samples", finite, format!("{} points", samples.len()));
    s.results = json!({ "n": run.n, "t1": run.t1, "w2_held_out": w2 });
    Ok(())
}
