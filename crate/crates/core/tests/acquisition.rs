use hibbo::acquisition::{
    ei_closed_form, evaluate, maximize, AcquisitionConfig, AcquisitionKind, Optimizer, MAX_GRID_POINTS,
};
use hibbo::gp::{fit, GpHyperparams, GpPosterior};
use hibbo::rng::SeededRng;
use hibbo::{Error, Matrix};

fn posterior(seed: u64, shift: f64) -> GpPosterior {
    let mut rng = SeededRng::new(seed);
    let z = Matrix::from_fn(7, 2, |_, _| rng.uniform(-2.5, 2.5));
    let y: Vec<f64> = z
        .row_iter()
        .map(|r| -(r[0] - 0.4).powi(2) - (r[1] + 0.3).powi(2) + shift)
        .collect();
    fit(&z, &y, &GpHyperparams::new(0.9, 1.0, 1e-6).unwrap()).unwrap()
}

fn grid_config(kind: AcquisitionKind, resolution: usize) -> AcquisitionConfig {
    AcquisitionConfig {
        kind,
        optimizer: Optimizer::Grid { resolution },
        ..AcquisitionConfig::cube(2)
    }
}

#[test]
fn grid_mode_equals_brute_force() {
    for kind in [AcquisitionKind::Ucb { beta: 4.0 }, AcquisitionKind::Ei { xi: 0.01 }] {
        for seed in 0..5 {
            let post = posterior(seed, 0.0);
            let res = 25;
            let mut best = (f64::NEG_INFINITY, vec![]);
            for i in 0..res {
                for j in 0..res {
                    let z = [-3.0 + 6.0 * i as f64 / 24.0, -3.0 + 6.0 * j as f64 / 24.0];
                    let v = evaluate(&post, kind, &z).unwrap();
                    if v > best.0 {
                        best = (v, z.to_vec());
                    }
                }
            }
            let (z, v) = maximize(&post, &grid_config(kind, res), &mut SeededRng::new(0)).unwrap();
            assert_eq!(v, best.0);
            for (a, b) in z.iter().zip(&best.1) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn argmax_is_invariant_to_target_shift() {
    for kind in [AcquisitionKind::Ucb { beta: 2.0 }, AcquisitionKind::Ei { xi: 0.0 }] {
        for seed in 0..5 {
            let a = maximize(&posterior(seed, 0.0), &grid_config(kind, 31), &mut SeededRng::new(1)).unwrap();
            let b = maximize(&posterior(seed, 123.0), &grid_config(kind, 31), &mut SeededRng::new(1)).unwrap();
            assert_eq!(a.0, b.0);
        }
    }
}

#[test]
fn ei_matches_monte_carlo() {
    let mut rng = SeededRng::new(5);
    for &(mean, std, best) in &[(0.0, 1.0, 0.5), (2.0, 0.3, 1.9), (-1.0, 2.0, 0.0)] {
        let n = 400_000;
        let mc: f64 = (0..n).map(|_| (mean + std * rng.normal() - best).max(0.0)).sum::<f64>() / n as f64;
        let se = 4.0 * std / (n as f64).sqrt();
        assert!(
            (ei_closed_form(mean, std, best, 0.0) - mc).abs() < se,
            "{mean} {std} {best}"
        );
    }
}

#[test]
fn multistart_returns_a_consistent_point_in_the_box() {
    let post = posterior(2, 0.0);
    let cfg = AcquisitionConfig::cube(2);
    let (z, v) = maximize(&post, &cfg, &mut SeededRng::new(9)).unwrap();
    assert!(z.iter().all(|c| (-3.0..=3.0).contains(c)));
    assert_eq!(v, evaluate(&post, cfg.kind, &z).unwrap());
    let again = maximize(&post, &cfg, &mut SeededRng::new(9)).unwrap();
    assert_eq!(again, (z, v));
    // Not worse than a coarse grid.
    let (_, coarse) = maximize(&post, &grid_config(cfg.kind, 7), &mut SeededRng::new(0)).unwrap();
    assert!(v >= coarse - 1e-9);
}

#[test]
fn oversized_grids_are_refused() {
    let cfg = AcquisitionConfig {
        optimizer: Optimizer::Grid { resolution: 100 },
        ..AcquisitionConfig::cube(4)
    };
    let post = {
        let z = Matrix::from_fn(2, 4, |i, j| (i + j) as f64);
        fit(&z, &[0.0, 1.0], &GpHyperparams::new(1.0, 1.0, 1e-4).unwrap()).unwrap()
    };
    match maximize(&post, &cfg, &mut SeededRng::new(0)) {
        Err(Error::GridTooLarge(n)) => assert!(n > MAX_GRID_POINTS),
        other => panic!("{other:?}"),
    }
}
