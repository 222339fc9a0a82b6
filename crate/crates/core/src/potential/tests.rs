use nalgebra::DMatrix;
use proptest::prelude::*;

use super::*;
use crate::datasets::DatasetSpec;
use crate::rng;
use crate::transport::{couple, PointCloud};

fn gaussian_cloud(n: usize, d: usize, seed: u64) -> PointCloud {
    let mut r = rng::seeded(seed);
    PointCloud::new((0..n).map(|_| rng::normal_vec(&mut r, d)).collect()).unwrap()
}

fn coupled_empirical(n: usize, d: usize, seed: u64) -> (crate::transport::Coupling, EmpiricalPotential) {
    let c = couple(&gaussian_cloud(n, d, seed), &gaussian_cloud(n, d, seed + 1000)).unwrap();
    let phi = build_empirical(&c).unwrap();
    (c, phi)
}

/// Golden-section minimiser of a convex 1-D function on `[lo, hi]`.
fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn quadratic_2d() -> Potential {
    let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    Potential::Quadratic(QuadraticPotential::new(b, vec![0.3, -0.2], vec![1.0, -1.0]).unwrap())
}

fn all_variants() -> Vec<Potential> {
    vec![
        quadratic_2d(),
        Potential::half_norm_sq(2),
        Potential::LineManifold { c: 0.5 },
        Potential::Empirical(coupled_empirical(32, 2, 7).1),
        Potential::Quartic { dim: 2 },
    ]
}

#[test]
fn quadratic_prox_example() {
    let p = Potential::half_norm_sq(1).prox(1.0, &[2.0]).unwrap();
    assert!((p.point[0] - 1.0).abs() < 1e-15);
    assert_eq!(p.iterations, 0);
}

#[test]
fn line_manifold_prox_example() {
    let phi = Potential::LineManifold { c: 1.0 };
    for lambda in [0.1, 1.0, 7.0] {
        let p = phi.prox(lambda, &[2.0, 3.0]).unwrap().point;
        assert!((p[0] - 2.0 / (1.0 + lambda)).abs() < 1e-15);
        assert_eq!(p[1], 1.0);
    }
}

#[test]
fn empirical_prox_matches_golden_section() {
    let x = gaussian_cloud(24, 1, 11);
    let phi = build_empirical(&couple(&x, &x).unwrap()).unwrap();
    let (lambda, z) = (0.5, 0.7);
    let objective = |u: f64| phi.value(&[u]) + (u - z).powi(2) / (2.0 * lambda);
    let oracle = golden_min(objective, -20.0, 20.0);
    let p = Potential::Empirical(phi.clone()).prox(lambda, &[z]).unwrap();
    assert!((p.point[0] - oracle).abs() < 1e-6, "{} vs {oracle}", p.point[0]);
    assert!((p.objective - objective(oracle)).abs() < 1e-9);
    assert!(!p.active_set.is_empty());
}

#[test]
fn prox_rejects_bad_lambda() {
    for phi in all_variants() {
        assert!(phi.prox(0.0, &[0.0, 0.0]).is_err());
        assert!(phi.prox(-1.0, &[0.0, 0.0]).is_err());
        assert!(phi.prox(1.0, &[0.0]).is_err());
    }
}

#[test]
fn moreau_examples() {
    let half = Potential::half_norm_sq(1);
    let (v, g) = half.moreau(1.0, &[2.0]).unwrap();
    assert!((v - 1.0).abs() < 1e-15 && (g[0] - 1.0).abs() < 1e-15);
    let (v, g) = half.moreau(1.0, &[0.0]).unwrap();
    assert_eq!((v, g[0]), (0.0, 0.0));
    let (v, g) = Potential::LineManifold { c: 0.0 }.moreau(1.0, &[0.0, 2.0]).unwrap();
    assert!((v - 2.0).abs() < 1e-15);
    assert_eq!(g, vec![0.0, 2.0]);
}

#[test]
fn grad_psi_star_examples() {
    let u = grad_psi_star(&Potential::half_norm_sq(1), &Schedule::Affine, 0.5, &[1.0]).unwrap();
    assert!((u[0] - 1.0).abs() < 1e-15);
    let u = grad_psi_star(&Potential::LineManifold { c: 1.0 }, &Schedule::Affine, 0.5, &[1.0, 1.5]).unwrap();
    assert!((u[0] - 1.0).abs() < 1e-15 && u[1] == 1.0);
}

#[test]
fn empirical_grad_psi_star_matches_conjugate_oracle() {
    let (_, phi) = coupled_empirical(16, 1, 5);
    let s = Schedule::Affine.eval(0.5).unwrap();
    let psi = |x: f64| s.alpha * phi.value(&[x]) + 0.5 * s.beta * x * x;
    // psi* by direct maximisation of the concave objective x y - psi(x).
    let psi_star = |y: f64| {
        let x = golden_min(|x| psi(x) - x * y, -50.0, 50.0);
        x * y - psi(x)
    };
    let pot = Potential::Empirical(phi.clone());
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..41 {
        let y = -2.0 + 0.1 * i as f64;
        let fd = (psi_star(y + h) - psi_star(y - h)) / (2.0 * h);
        let g = grad_psi_star(&pot, &Schedule::Affine, 0.5, &[y]).unwrap()[0];
        worst = worst.max((fd - g).abs());
    }
    assert!(worst <= 1e-4, "sup error {worst}");
}

#[test]
fn expansion_of_half_square_has_order_two() {
    let phi = Potential::half_norm_sq(1);
    let lambdas = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];
    let res = prox_expansion_residual(&phi, &[1.3], &lambdas).unwrap();
    for &(l, r) in &res {
        let exact = 1.3 * l * l / (1.0 + l);
        assert!((r - exact).abs() < 1e-12 * (1.0 + exact) + 1e-15);
    }
    assert!((expansion_slope(&res) - 2.0).abs() < 0.1);
}

#[test]
fn expansion_of_quartic_matches_root_finding() {
    let phi = Potential::Quartic { dim: 1 };
    let lambda = 1e-3;
    // Bisection for u + lambda u^3 = 1.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid + lambda * mid.powi(3) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let oracle = (0.5 * (lo + hi) - (1.0 - lambda)).abs();
    let res = prox_expansion_residual(&phi, &[1.0], &[lambda]).unwrap();
    assert!((res[0].1 - oracle).abs() < 1e-12);
    assert!(res[0].1 > 1.5e-6 && res[0].1 < 6e-6, "{}", res[0].1);
    let res = prox_expansion_residual(&phi, &[1.0], &[1e-3, 3e-3, 1e-2, 3e-2, 1e-1]).unwrap();
    assert!((expansion_slope(&res) - 2.0).abs() < 0.1);
}

#[test]
fn expansion_vanishes_at_minimiser_and_needs_smoothness() {
    for phi in [Potential::half_norm_sq(2), Potential::Quartic { dim: 2 }] {
        for (_, r) in prox_expansion_residual(&phi, &[0.0, 0.0], &[1e-3, 1e-1, 1.0]).unwrap() {
            assert!(r < 1e-15);
        }
    }
    let res = prox_expansion_residual(&Potential::LineManifold { c: 0.0 }, &[0.0, 0.0], &[0.1]);
    assert!(matches!(res, Err(Error::Unsupported(_))));
}

#[test]
fn semiderivative_on_the_line() {
    let phi = Potential::LineManifold { c: 0.0 };
    let d = prox_semiderivative(&phi, 0.1, &[0.0, 0.0], &[0.0, 1.0]).unwrap();
    assert!(linalg::norm(&d) < 1e-6, "{d:?}");
    let d = prox_semiderivative(&phi, 0.01, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
    assert!(linalg::dist(&d, &[1.0, 0.0]) < 0.2);
    assert!((d[0] - 1.0 / 1.01).abs() < 1e-8);
}

#[test]
fn semiderivative_of_half_square_is_linear() {
    let phi = Potential::half_norm_sq(2);
    for (lambda, h) in [(0.1, [1.0, -2.0]), (2.0, [0.3, 0.4])] {
        let d = prox_semiderivative(&phi, lambda, &[0.5, 0.2], &h).unwrap();
        let expect = linalg::scale(&h, 1.0 / (1.0 + lambda));
        assert!(linalg::dist(&d, &expect) < 1e-8);
    }
}

#[test]
fn build_empirical_single_pair() {
    let x = PointCloud::new(vec![vec![0.0]]).unwrap();
    let phi = build_empirical(&couple(&x, &x).unwrap()).unwrap();
    assert_eq!(phi.n_planes(), 1);
    for z in [-3.0, 0.0, 5.0] {
        assert_eq!(phi.value(&[z]), 0.0);
    }
}

#[test]
fn build_empirical_two_sorted_pairs() {
    let x0 = PointCloud::new(vec![vec![-1.0], vec![1.0]]).unwrap();
    let x1 = PointCloud::new(vec![vec![-1.0], vec![1.0]]).unwrap();
    let c = couple(&x0, &x1).unwrap();
    assert_eq!(c.perm, vec![0, 1]);
    let phi = build_empirical(&c).unwrap();
    assert_eq!(phi.value(&[0.0]), 0.0);
    // Ties are allowed: each pair's own plane only has to attain the max.
    for (l, x) in [(0, -1.0), (1, 1.0)] {
        assert!(phi.argmax(&[x]).0 - phi.plane_value(l, &[x]) <= 1e-12);
    }
    assert_eq!(phi.argmax(&[-1.0]).1, 0);
}

#[test]
fn build_empirical_needs_duals() {
    let x = gaussian_cloud(4, 2, 1);
    let c = crate::transport::Coupling::from_permutation(x.clone(), x, vec![0, 1, 2, 3]).unwrap();
    assert!(matches!(build_empirical(&c), Err(Error::Construction(_))));
}

#[test]
fn build_empirical_gaussian_verifies() {
    let (c, phi) = coupled_empirical(64, 2, 9);
    assert_eq!(phi.value(&[0.0, 0.0]).abs(), 0.0);
    for l in 0..c.len() {
        let (x0, x1) = c.pair(l);
        let (top, _) = phi.argmax(x1);
        assert!(top - (linalg::dot(x0, x1) - phi.offset(l)) <= 1e-9);
    }
}

#[test]
fn empirical_csv_round_trip() {
    let (_, phi) = coupled_empirical(10, 3, 2);
    let mut buf = Vec::new();
    phi.write_csv(&mut buf).unwrap();
    let back = EmpiricalPotential::read_csv(&buf[..]).unwrap();
    assert_eq!(back, phi);
}

#[test]
fn non_expansive_for_every_variant() {
    let mut r = rng::seeded(77);
    for phi in all_variants() {
        for _ in 0..500 {
            let lambda = rng::uniform_open(&mut r, 0.01, 5.0);
            let z1 = linalg::scale(&rng::normal_vec(&mut r, 2), 2.0);
            let z2 = linalg::scale(&rng::normal_vec(&mut r, 2), 2.0);
            let p1 = phi.prox(lambda, &z1).unwrap().point;
            let p2 = phi.prox(lambda, &z2).unwrap().point;
            assert!(linalg::dist(&p1, &p2) <= linalg::dist(&z1, &z2) + 1e-9, "{phi:?}");
        }
    }
}

#[test]
fn minimisers_are_fixed_points() {
    // Quadratic minimiser solves B (x - m) + b = 0.
    let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let shift = b.clone().lu().solve(&nalgebra::DVector::from_vec(vec![0.3, -0.2])).unwrap();
    let xq = vec![1.0 - shift[0], -1.0 - shift[1]];
    let cases = [
        (quadratic_2d(), xq),
        (Potential::LineManifold { c: 0.5 }, vec![0.0, 0.5]),
        (Potential::Quartic { dim: 2 }, vec![0.0, 0.0]),
    ];
    for (phi, x) in &cases {
        for lambda in [0.01, 1.0, 100.0] {
            let p = phi.prox(lambda, x).unwrap().point;
            assert!(linalg::dist(&p, x) < 1e-8, "{phi:?} {lambda}");
        }
    }
    // x1 minimises phi_n - <x0, .>, so prox_{lambda phi_n}(x1 + lambda x0) = x1.
    let (c, phi) = coupled_empirical(32, 2, 13);
    let phi = Potential::Empirical(phi);
    for l in 0..c.len() {
        let (x0, x1) = c.pair(l);
        for lambda in [0.01, 1.0, 100.0] {
            let p = phi.prox(lambda, &linalg::axpy(x1, lambda, x0)).unwrap().point;
            assert!(linalg::dist(&p, x1) < 1e-8 * (1.0 + lambda), "pair {l} lambda {lambda}");
        }
    }
}

#[test]
fn moreau_gradient_matches_central_differences() {
    let mut r = rng::seeded(3);
    let h = 1e-6;
    for phi in all_variants() {
        for _ in 0..20 {
            let lambda = rng::uniform_open(&mut r, 0.2, 2.0);
            let z = rng::normal_vec(&mut r, 2);
            let (_, g) = phi.moreau(lambda, &z).unwrap();
            for i in 0..2 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += h;
                zm[i] -= h;
                let fd = (phi.moreau(lambda, &zp).unwrap().0 - phi.moreau(lambda, &zm).unwrap().0) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-5, "{phi:?}: {fd} vs {}", g[i]);
            }
        }
    }
}

#[test]
fn duality_holds_for_every_variant() {
    let mut r = rng::seeded(8);
    for phi in all_variants() {
        for (i, t) in [0.1, 0.5, 0.9].into_iter().enumerate() {
            let y = rng::normal_vec(&mut r, 2);
            let rep = verify_psi_star_duality(&phi, &Schedule::Affine, t, &y, i as u64).unwrap();
            assert!(rep.ok, "{phi:?} t={t}: {}", rep.worst_slack);
        }
    }
}

#[test]
fn empirical_is_a_perfect_denoiser_on_its_pairs() {
    let (c, phi) = coupled_empirical(48, 2, 21);
    let phi = Potential::Empirical(phi);
    for t in [0.1, 0.5, 0.9] {
        let s = Schedule::Affine.eval(t).unwrap();
        for l in 0..c.len() {
            let (x0, x1) = c.pair(l);
            let xt = linalg::add(&linalg::scale(x0, s.alpha), &linalg::scale(x1, s.beta));
            let u = grad_psi_star(&phi, &Schedule::Affine, t, &xt).unwrap();
            assert!(linalg::dist(&u, x1) < 1e-6, "t={t} pair {l}");
        }
    }
}

#[test]
fn convergence_on_one_d_gaussian() {
    let grid = PointCloud::new((0..41).map(|i| vec![-2.0 + 0.1 * i as f64]).collect()).unwrap();
    let rows = minibatch_prox_convergence(
        &Potential::half_norm_sq(1),
        &DatasetSpec::standard_gaussian(1),
        &[16, 1024],
        1.0,
        &grid,
        4,
    )
    .unwrap();
    assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![16, 1024]);
    assert!(rows[1].sup_error < rows[0].sup_error, "{rows:?}");
}

#[test]
fn convergence_on_the_line() {
    let grid = PointCloud::new(
        (0..9)
            .flat_map(|i| (0..9).map(move |j| vec![-2.0 + 0.5 * i as f64, -2.0 + 0.5 * j as f64]))
            .collect(),
    )
    .unwrap();
    let rows = minibatch_prox_convergence(
        &Potential::LineManifold { c: 0.5 },
        &DatasetSpec::LineManifold { c: 0.5 },
        &[16, 64, 256],
        0.5,
        &grid,
        6,
    )
    .unwrap();
    assert!(rows[2].sup_error < rows[0].sup_error, "{rows:?}");
}

#[test]
fn convergence_rejects_empirical_population() {
    let (_, phi) = coupled_empirical(4, 2, 1);
    let grid = gaussian_cloud(3, 2, 0);
    let res = minibatch_prox_convergence(
        &Potential::Empirical(phi),
        &DatasetSpec::standard_gaussian(2),
        &[4],
        1.0,
        &grid,
        0,
    );
    assert!(res.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prox_never_beats_its_anchor(z0 in -3.0f64..3.0, z1 in -3.0f64..3.0, lambda in 0.01f64..10.0) {
        for phi in all_variants() {
            let z = [z0, z1];
            let p = phi.prox(lambda, &z).unwrap();
            let anchor = phi.value(&z).unwrap();
            prop_assert!(p.objective <= anchor + 1e-12 * (1.0 + anchor.abs()));
            prop_assert!(linalg::all_finite(&p.point));
        }
    }

    #[test]
    fn resolvent_identity(z0 in -3.0f64..3.0, z1 in -3.0f64..3.0, lambda in 0.01f64..10.0) {
        for phi in all_variants() {
            let z = [z0, z1];
            let p = phi.prox(lambda, &z).unwrap().point;
            let (_, g) = phi.moreau(lambda, &z).unwrap();
            let back = linalg::axpy(&p, lambda, &g);
            prop_assert!(linalg::dist(&back, &z) < 1e-12 * (1.0 + linalg::norm(&z)));
        }
    }
}
