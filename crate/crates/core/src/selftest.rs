//! Quick invariant checks runnable from the command line.

use std::time::Instant;

use crate::acquisition::{ei_closed_form, AcquisitionKind, Optimizer};
use crate::benchmarks::{figure2_sequences, sin_manifold, Family};
use crate::bo::{run, AcquisitionSettings, BoConfig, Method};
use crate::error::Result;
use crate::gp::{fit, GpHyperparams, HyperGrid};
use crate::hippo::{build_legs_operator, encode_sequence, hippo_distance, reconstruct_signal};
use crate::record::RunRecord;
use crate::rng::SeededRng;
use crate::vae::{evaluate_loss, Architecture, HippoCache, LossConfig, TrainOptions, VaeModel};
use crate::Matrix;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("hippo/constant-reconstruction", constant_reconstruction),
    ("hippo/similar-trend-ordering", similar_trend_ordering),
    ("vae/loss-gradient", loss_gradient),
    ("vae/checkpoint-round-trip", checkpoint_round_trip),
    ("gp/interpolation", gp_interpolation),
    ("acquisition/ei-quadrature", ei_quadrature),
    ("bo/determinism", bo_determinism),
    ("bo/zero-consistency-equals-base", zero_consistency_equals_base),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check; errors count as failures.
pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let start = Instant::now();
            let (passed, detail) = match check() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn scalar(v: &[f64]) -> Vec<Vec<f64>> {
    v.iter().map(|&x| vec![x]).collect()
}

fn constant_reconstruction() -> Result<(bool, String)> {
    let op = build_legs_operator(8)?;
    let (state, _) = encode_sequence(&op, &scalar(&[2.5; 100]))?;
    let points: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
    let r = reconstruct_signal(&op, &state, &points)?;
    let err = r.data().iter().map(|v| (v - 2.5).abs()).fold(0.0, f64::max) / 2.5;
    Ok((err < 0.05, format!("max relative error {err:.3e}")))
}

fn similar_trend_ordering() -> Result<(bool, String)> {
    let op = build_legs_operator(5)?;
    let mut worst = 1.0f64;
    let mut parts = Vec::new();
    for (same, diff) in [
        ("sin-sin", "sin-tanh"),
        ("cos-cos", "cos-tanh"),
        ("tanh-tanh", "tanh-cos"),
    ] {
        let (same, diff): (Family, Family) = (same.parse()?, diff.parse()?);
        let mut wins = 0;
        for seed in 0..50 {
            let dist = |f: Family| -> Result<f64> {
                let (x, y) = figure2_sequences(f, seed);
                let (cx, _) = encode_sequence(&op, &scalar(&x))?;
                let (cy, _) = encode_sequence(&op, &scalar(&y))?;
                hippo_distance(&cx, &cy)
            };
            if dist(same)? < dist(diff)? {
                wins += 1;
            }
        }
        let frac = wins as f64 / 50.0;
        worst = worst.min(frac);
        parts.push(format!("{same}: {wins}/50"));
    }
    Ok((worst >= 0.9, parts.join(", ")))
}

fn loss_gradient() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(11);
    let arch = Architecture {
        hidden_width: 5,
        hidden_layers: 2,
        ..Architecture::new(3, 1)
    };
    let model = VaeModel::new(arch, &mut rng)?;
    let data = rng.normal_matrix(4, 3);
    let eps = rng.normal_matrix(4, 1);
    let cfg = LossConfig {
        hippo_order: 5,
        ..LossConfig::default()
    };
    let out = evaluate_loss(&model, &data, None, &cfg, &eps, &mut HippoCache::default())?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let layer = rng.index(out.gradients.len());
        let entry = rng.index(out.gradients[layer].len());
        let h = 1e-5;
        let loss_at = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            m.params_mut()[layer].data_mut()[entry] += delta;
            Ok(evaluate_loss(&m, &data, None, &cfg, &eps, &mut HippoCache::default())?.total)
        };
        let fd = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
        let an = out.gradients[layer].data()[entry];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok((worst < 1e-4, format!("worst relative gap {worst:.3e} over 20 probes")))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let model = VaeModel::new(Architecture::new(6, 2), &mut SeededRng::new(5))?;
    let text = model.to_checkpoint();
    let back = VaeModel::from_checkpoint(&text)?;
    let same = back.params() == model.params() && back.to_checkpoint() == text;
    Ok((same, format!("{} parameters", model.num_params())))
}

fn gp_interpolation() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(2);
    let z = Matrix::from_fn(8, 2, |_, _| rng.uniform(-2.0, 2.0));
    let y: Vec<f64> = z.row_iter().map(|r| (r[0] * 1.3).sin() + r[1] * r[1]).collect();
    let post = fit(&z, &y, &GpHyperparams::new(0.8, 1.0, 1e-10)?)?;
    let mut worst = 0.0f64;
    for (row, &target) in z.row_iter().zip(&y) {
        worst = worst.max((post.predict(row)?.mean - target).abs());
    }
    Ok((worst < 1e-6, format!("max error at training points {worst:.3e}")))
}

fn ei_quadrature() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for &(mean, std, best) in &[(0.0, 1.0, 0.0), (1.0, 0.5, 2.0), (-0.3, 2.0, -1.0), (3.0, 0.1, 0.0)] {
        // Trapezoid over ±12σ.
        let n = 20_000;
        let (lo, hi) = (-12.0, 12.0);
        let dz = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let u = lo + i as f64 * dz;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let pdf = (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
            acc += w * pdf * (mean + std * u - best).max(0.0);
        }
        let quad = acc * dz;
        worst = worst.max((quad - ei_closed_form(mean, std, best, 0.0)).abs());
    }
    Ok((worst < 1e-6, format!("max gap {worst:.3e}")))
}

fn tiny(method: Method) -> BoConfig {
    BoConfig {
        budget: 10,
        frequency: 2,
        initial_samples: 4,
        method,
        latent_dim: 1,
        hidden_width: 8,
        hidden_layers: 2,
        pretrain: TrainOptions {
            epochs: 5,
            ..TrainOptions::default()
        },
        retrain: TrainOptions {
            epochs: 2,
            ..TrainOptions::default()
        },
        loss: LossConfig {
            hippo_order: 6,
            ..LossConfig::default()
        },
        acquisition: AcquisitionSettings {
            kind: AcquisitionKind::default(),
            optimizer: Optimizer::Multistart { restarts: 2, steps: 6 },
            ..AcquisitionSettings::default()
        },
        gp_grid: HyperGrid {
            lengthscales: vec![0.5, 1.0],
            signal_variances: vec![1.0],
            noise_variances: vec![1e-4],
        },
        seed: 7,
        ..BoConfig::default()
    }
}

fn bo_determinism() -> Result<(bool, String)> {
    let a = run(&sin_manifold(), &tiny(Method::Hibbo))?.record.to_jsonl();
    let b = run(&sin_manifold(), &tiny(Method::Hibbo))?.record.to_jsonl();
    RunRecord::from_jsonl(&a)?;
    Ok((a == b, format!("{} bytes", a.len())))
}

fn zero_consistency_equals_base() -> Result<(bool, String)> {
    let base = run(&sin_manifold(), &tiny(Method::Base))?.record;
    let mut cfg = tiny(Method::Hibbo);
    cfg.loss.consistency_weight = 0.0;
    let hibbo = run(&sin_manifold(), &cfg)?.record;
    let same = base.trajectory_json() == hibbo.trajectory_json();
    Ok((same, format!("{} queries compared", base.queries.len())))
}
