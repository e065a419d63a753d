use pmest::basis::{Basis, BasisKind, BasisSpec};
use pmest::inference::{
    cte_band, level_band, marginal_effect_band, simulate_band, simulate_band_brownian_bridge,
    t_process, EvalGrid, GaussianProcess, SimMethod, SimOptions,
};
use pmest::loss::{Link, LossModel};
use pmest::partition::{Domain, KnotRule, Partition};
use pmest::sandwich::SandwichSet;
use pmest::solver::{fit, Dataset, SolverOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn basis(kind: BasisKind, m: usize, cells: usize) -> Basis {
    let p = Partition::build(Domain::unit(1).unwrap(), &[cells], KnotRule::Uniform).unwrap();
    Basis::build(p, BasisSpec::new(kind, m)).unwrap()
}

fn sample(n: usize, seed: u64, f: impl Fn(f64, &mut ChaCha8Rng) -> f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y = x.iter().map(|&t| f(t, &mut rng)).collect();
    Dataset::new(1, x, y).unwrap()
}

fn bernoulli(p: f64, rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

fn opts(n_draws: usize, seed: u64) -> SimOptions {
    SimOptions {
        alpha: 0.05,
        n_draws,
        seed,
    }
}

#[test]
fn single_point_and_independent_pair_critical_values() {
    let data = sample(1000, 1, |x, r| bernoulli(0.3 + 0.4 * x, r));
    let f = fit(
        &data,
        &basis(BasisKind::PiecewisePoly, 1, 2),
        &LossModel::logistic(),
        &[0.0],
        &SolverOptions::default(),
    )
    .unwrap();
    let s = SandwichSet::build(&f, &data).unwrap();
    let one = EvalGrid::new(vec![vec![0.3]], vec![0.0], vec![0]).unwrap();
    let b = simulate_band(&s, &one, &opts(200_000, 3)).unwrap();
    assert!((b.crit - 1.95996).abs() <= 0.02, "{}", b.crit);
    let two = EvalGrid::new(vec![vec![0.25], vec![0.75]], vec![0.0], vec![0]).unwrap();
    let b = simulate_band(&s, &two, &opts(200_000, 4)).unwrap();
    assert!((b.crit - 2.2365).abs() <= 0.02, "{}", b.crit);
    assert!(b
        .lo
        .iter()
        .zip(&b.center)
        .zip(&b.hi)
        .all(|((l, c), h)| l < c && c < h));
}

fn quantile_setup(m: usize) -> (Dataset, pmest::FitResult) {
    let data = sample(1500, 2, |x, r| x + r.random::<f64>());
    let grid: Vec<f64> = (1..=9).map(|j| j as f64 / 10.0).collect();
    let b = if m == 1 {
        basis(BasisKind::PiecewisePoly, 1, 3)
    } else {
        basis(BasisKind::Bspline, m, 3)
    };
    let f = fit(
        &data,
        &b,
        &LossModel::quantile(Link::Identity, 0.05).unwrap(),
        &grid,
        &SolverOptions::default(),
    )
    .unwrap();
    (data, f)
}

#[test]
fn cross_q_correlation_matches_bridge_covariance() {
    let (data, f) = quantile_setup(1);
    let s = SandwichSet::build(&f, &data).unwrap();
    let grid = EvalGrid::new(vec![vec![0.5]], vec![0.2, 0.3, 0.7, 0.8], vec![0]).unwrap();
    // Points 1 and 2 sit at q = 0.3 and 0.7: (0.3 - 0.21) / sqrt(0.21 * 0.21) = 3/7.
    for method in [SimMethod::Generic, SimMethod::BrownianBridge] {
        let p = GaussianProcess::new(&s, &grid, method).unwrap();
        let draws = p.sample(100_000, 5);
        let n = draws.len() as f64;
        let var = |j: usize| draws.iter().map(|d| d[j] * d[j]).sum::<f64>() / n;
        let cov = draws.iter().map(|d| d[1] * d[2]).sum::<f64>() / n;
        for j in 0..4 {
            assert!((var(j) - 1.0).abs() <= 0.05, "{method:?} var {}", var(j));
        }
        assert!(
            (cov / (var(1) * var(2)).sqrt() - 3.0 / 7.0).abs() <= 0.02,
            "{method:?} {cov}"
        );
    }
}

#[test]
fn bridge_and_generic_paths_agree() {
    let (data, f) = quantile_setup(2);
    let s = SandwichSet::build(&f, &data).unwrap();
    let xs = EvalGrid::cell_points(f.basis.partition(), 4);
    let grid = EvalGrid::new(xs, f.q_grid.clone(), vec![0]).unwrap();
    let g = simulate_band(&s, &grid, &opts(100_000, 6)).unwrap();
    let b = simulate_band_brownian_bridge(&s, &grid, &opts(100_000, 6)).unwrap();
    assert!((g.crit - b.crit).abs() <= 0.03, "{} {}", g.crit, b.crit);
    let one = EvalGrid::new(vec![vec![0.4]], vec![0.5], vec![0]).unwrap();
    let g = simulate_band(&s, &one, &opts(100_000, 7)).unwrap();
    let b = simulate_band_brownian_bridge(&s, &one, &opts(100_000, 7)).unwrap();
    assert!((g.crit - b.crit).abs() <= 0.02);
}

#[test]
fn bridge_requires_identity_quantile() {
    let data = sample(400, 3, bernoulli);
    let f = fit(
        &data,
        &basis(BasisKind::Bspline, 2, 2),
        &LossModel::logistic(),
        &[0.0],
        &SolverOptions::default(),
    )
    .unwrap();
    let s = SandwichSet::build(&f, &data).unwrap();
    let grid = EvalGrid::new(vec![vec![0.5]], vec![0.0], vec![0]).unwrap();
    assert!(matches!(
        simulate_band_brownian_bridge(&s, &grid, &opts(1000, 0)),
        Err(pmest::Error::WrongModel { .. })
    ));
}

#[test]
fn seeds_are_deterministic_and_grids_monotone() {
    let (data, f) = quantile_setup(2);
    let s = SandwichSet::build(&f, &data).unwrap();
    let small = EvalGrid::new(vec![vec![0.2], vec![0.6]], vec![0.3, 0.5], vec![0]).unwrap();
    let big = EvalGrid::new(
        vec![vec![0.2], vec![0.6], vec![0.9], vec![0.05]],
        vec![0.3, 0.5],
        vec![0],
    )
    .unwrap();
    let a = simulate_band_brownian_bridge(&s, &small, &opts(5000, 9)).unwrap();
    let b = simulate_band_brownian_bridge(&s, &small, &opts(5000, 9)).unwrap();
    assert_eq!(a, b);
    let c = simulate_band_brownian_bridge(&s, &big, &opts(5000, 9)).unwrap();
    assert!(c.crit >= a.crit);
    let g1 = simulate_band(&s, &small, &opts(5000, 9)).unwrap();
    let g2 = simulate_band(&s, &big, &opts(5000, 9)).unwrap();
    assert!(g2.crit >= g1.crit);
    // Nested alpha on identical draws.
    let lo = simulate_band(
        &s,
        &small,
        &SimOptions {
            alpha: 0.1,
            ..opts(5000, 9)
        },
    )
    .unwrap();
    assert!(lo.crit <= g1.crit);
}

#[test]
fn studentized_process_is_scale_invariant() {
    let data = sample(500, 4, |x, r| (2.0 * x).sin() + r.random::<f64>());
    let b = basis(BasisKind::Bspline, 3, 4);
    let loss = LossModel::lp(2.0, Link::Identity).unwrap();
    let grid = EvalGrid::new(vec![vec![0.1], vec![0.5], vec![0.77]], vec![0.0], vec![0]).unwrap();
    let f1 = fit(&data, &b, &loss, &[0.0], &SolverOptions::default()).unwrap();
    let scaled = data.map_y(|v| 2.0 * v);
    let f2 = fit(&scaled, &b, &loss, &[0.0], &SolverOptions::default()).unwrap();
    let t1 = t_process(&SandwichSet::build(&f1, &data).unwrap(), &grid, None).unwrap();
    let t2 = t_process(&SandwichSet::build(&f2, &scaled).unwrap(), &grid, None).unwrap();
    for (a, b) in t1.iter().zip(&t2) {
        assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
    }
    let s1 = SandwichSet::build(&f1, &data).unwrap();
    let mu: Vec<f64> = grid
        .x_points
        .iter()
        .map(|x| f1.mu_hat(x, &[0], 0).unwrap())
        .collect();
    assert!(t_process(&s1, &grid, Some(&mu))
        .unwrap()
        .iter()
        .all(|&t| t == 0.0));
}

#[test]
fn level_band_transforms() {
    let data = sample(800, 5, |x, r| (x - 0.5) * 2.0 + r.random::<f64>());
    let b = basis(BasisKind::Bspline, 2, 3);
    let f = fit(
        &data,
        &b,
        &LossModel::lp(2.0, Link::Identity).unwrap(),
        &[0.0],
        &SolverOptions::default(),
    )
    .unwrap();
    let s = SandwichSet::build(&f, &data).unwrap();
    let grid = EvalGrid::new(EvalGrid::cell_points(b.partition(), 3), vec![0.0], vec![0]).unwrap();
    assert_eq!(
        level_band(&s, &grid, &opts(2000, 1)).unwrap(),
        simulate_band(&s, &grid, &opts(2000, 1)).unwrap()
    );

    let data = sample(2000, 6, |_, r| bernoulli(0.5, r));
    let f = fit(
        &data,
        &b,
        &LossModel::logistic(),
        &[0.0],
        &SolverOptions::default(),
    )
    .unwrap();
    let s = SandwichSet::build(&f, &data).unwrap();
    let base = simulate_band(&s, &grid, &opts(2000, 2)).unwrap();
    let lvl = level_band(&s, &grid, &opts(2000, 2)).unwrap();
    for i in 0..grid.len() {
        let e = 1.0 / (1.0 + (-base.mu_hat[i]).exp());
        assert!((lvl.center[i] - e).abs() < 1e-15);
        assert!((lvl.se[i] - e * (1.0 - e) * base.se[i]).abs() < 1e-15);
        // Event identity under a strictly increasing link.
        for j in 1..100 {
            let t = j as f64 / 100.0;
            let theta = (t / (1.0 - t)).ln();
            assert_eq!(
                lvl.lo[i] <= t && t <= lvl.hi[i],
                base.lo[i] <= theta && theta <= base.hi[i]
            );
        }
    }
}

#[test]
fn marginal_effect_of_linear_signal() {
    let data = sample(2000, 7, |x, r| 2.0 * x + r.random::<f64>() - 0.5);
    let b = basis(BasisKind::Bspline, 2, 5);
    let f = fit(
        &data,
        &b,
        &LossModel::lp(2.0, Link::Identity).unwrap(),
        &[0.0],
        &SolverOptions::default(),
    )
    .unwrap();
    let s = SandwichSet::build(&f, &data).unwrap();
    let xs: Vec<Vec<f64>> = (1..10).map(|j| vec![j as f64 / 10.0 + 0.01]).collect();
    let grid = EvalGrid::new(xs, vec![0.0], vec![1]).unwrap();
    let me = marginal_effect_band(&s, &grid, &opts(5000, 3)).unwrap();
    for i in 0..grid.len() {
        assert!((me.center[i] - 2.0).abs() <= 3.0 * (me.hi[i] - me.center[i]));
    }
    let flat = EvalGrid::new(vec![vec![0.5]], vec![0.0], vec![1]).unwrap();
    let pc = basis(BasisKind::PiecewisePoly, 1, 4);
    let fpc = fit(
        &data,
        &pc,
        &LossModel::lp(2.0, Link::Identity).unwrap(),
        &[0.0],
        &SolverOptions::default(),
    )
    .unwrap();
    let spc = SandwichSet::build(&fpc, &data).unwrap();
    assert!(matches!(
        marginal_effect_band(&spc, &flat, &opts(1000, 0)),
        Err(pmest::Error::DerivativeOrderTooHigh { .. })
    ));
}

#[test]
fn treatment_effect_variance_adds() {
    let b = basis(BasisKind::Bspline, 2, 3);
    let loss = LossModel::lp(2.0, Link::Identity).unwrap();
    let d1 = sample(1000, 8, |x, r| x + r.random::<f64>());
    let d2 = sample(1000, 9, |x, r| x + 1.0 + r.random::<f64>());
    let f1 = fit(&d1, &b, &loss, &[0.0], &SolverOptions::default()).unwrap();
    let f2 = fit(&d2, &b, &loss, &[0.0], &SolverOptions::default()).unwrap();
    let (s1, s2) = (
        SandwichSet::build(&f1, &d1).unwrap(),
        SandwichSet::build(&f2, &d2).unwrap(),
    );
    let grid = EvalGrid::new(EvalGrid::cell_points(b.partition(), 3), vec![0.0], vec![0]).unwrap();
    let cte = cte_band(&s1, &s2, &grid, &opts(5000, 4)).unwrap();
    let b1 = simulate_band(&s1, &grid, &opts(2000, 0)).unwrap();
    let b2 = simulate_band(&s2, &grid, &opts(2000, 0)).unwrap();
    for i in 0..grid.len() {
        let sum = b1.se[i].powi(2) + b2.se[i].powi(2);
        assert!((cte.omega[i] - sum).abs() <= 1e-10 * sum);
        assert!((cte.center[i] - 1.0).abs() <= 0.2);
    }
    let other = fit(
        &d2,
        &basis(BasisKind::Bspline, 2, 4),
        &loss,
        &[0.0],
        &SolverOptions::default(),
    )
    .unwrap();
    let so = SandwichSet::build(&other, &d2).unwrap();
    assert_eq!(
        cte_band(&s1, &so, &grid, &opts(1000, 0)).unwrap_err(),
        pmest::Error::BasisMismatch
    );
}
