//! Acquisition functions and their maximization over a latent box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpPosterior;
use crate::rng::SeededRng;

pub const MAX_GRID_POINTS: u128 = 10_000_000;
const GOLDEN_PASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AcquisitionKind {
    Ucb { beta: f64 },
    Ei { xi: f64 },
}

impl Default for AcquisitionKind {
    fn default() -> Self {
        AcquisitionKind::Ucb { beta: 4.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// `restarts` uniform starts, each refined by two passes of coordinate-wise
    /// golden-section search with `steps` bracket reductions per coordinate.
    Multistart { restarts: usize, steps: usize },
    /// All `resolution^d` points of the regular grid including the box corners.
    Grid { resolution: usize },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Multistart {
            restarts: 16,
            steps: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub kind: AcquisitionKind,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub optimizer: Optimizer,
    /// Inner-loop threshold; `None` never triggers.
    pub threshold: Option<f64>,
}

impl AcquisitionConfig {
    /// `[−3, 3]^dim` with UCB(β = 4) and the default multistart optimizer.
    pub fn cube(dim: usize) -> Self {
        Self {
            kind: AcquisitionKind::default(),
            lower: vec![-3.0; dim],
            upper: vec![3.0; dim],
            optimizer: Optimizer::default(),
            threshold: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidAcquisition(m));
        if self.lower.len() != self.upper.len() {
            return bad(format!(
                "bounds have {} lower and {} upper entries",
                self.lower.len(),
                self.upper.len()
            ));
        }
        if self.lower.is_empty() {
            return bad("empty latent box".into());
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(format!("dimension {i}: need finite lo < hi, got [{lo}, {hi}]"));
            }
        }
        match self.kind {
            AcquisitionKind::Ucb { beta } if !(beta >= 0.0 && beta.is_finite()) => {
                return bad(format!("beta must be finite and >= 0, got {beta}"))
            }
            AcquisitionKind::Ei { xi } if !(xi >= 0.0 && xi.is_finite()) => {
                return bad(format!("xi must be finite and >= 0, got {xi}"))
            }
            _ => {}
        }
        match self.optimizer {
            Optimizer::Multistart { restarts: 0, .. } => bad("restarts must be >= 1".into()),
            Optimizer::Grid { resolution } if resolution < 2 => bad("grid resolution must be >= 2".into()),
            _ => Ok(()),
        }
    }
}

/// `μ + √β·σ`
pub fn ucb(post: &GpPosterior, z: &[f64], beta: f64) -> Result<f64> {
    let p = post.predict(z)?;
    Ok(p.mean + beta.sqrt() * p.std())
}

pub fn standard_normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn standard_normal_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u / std::f64::consts::SQRT_2)
}

/// Expected improvement over `best + xi`.
pub fn ei(post: &GpPosterior, z: &[f64], best: f64, xi: f64) -> Result<f64> {
    let p = post.predict(z)?;
    Ok(ei_closed_form(p.mean, p.std(), best, xi))
}

pub fn ei_closed_form(mean: f64, std: f64, best: f64, xi: f64) -> f64 {
    let gap = mean - best - xi;
    if std < 1e-12 {
        return gap.max(0.0);
    }
    let u = gap / std;
    (gap * standard_normal_cdf(u) + std * standard_normal_pdf(u)).max(0.0)
}

/// Acquisition value of `z` under `kind`, with `y⁺` the best training target.
pub fn evaluate(post: &GpPosterior, kind: AcquisitionKind, z: &[f64]) -> Result<f64> {
    match kind {
        AcquisitionKind::Ucb { beta } => ucb(post, z, beta),
        AcquisitionKind::Ei { xi } => ei(post, z, post.best_target(), xi),
    }
}

/// Maximizes the configured acquisition over the box.
pub fn maximize(post: &GpPosterior, config: &AcquisitionConfig, rng: &mut SeededRng) -> Result<(Vec<f64>, f64)> {
    config.validate()?;
    if post.dim() != config.dim() {
        return Err(Error::DimensionMismatch {
            expected: post.dim(),
            got: config.dim(),
        });
    }
    maximize_fn(|z| evaluate(post, config.kind, z), config, rng)
}

/// Maximizes an arbitrary function over the configured box and optimizer.
pub fn maximize_fn<F>(mut f: F, config: &AcquisitionConfig, rng: &mut SeededRng) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    config.validate()?;
    match config.optimizer {
        Optimizer::Grid { resolution } => grid_search(&mut f, &config.lower, &config.upper, resolution),
        Optimizer::Multistart { restarts, steps } => {
            multistart(&mut f, &config.lower, &config.upper, restarts, steps, rng)
        }
    }
}

fn grid_coordinate(lo: f64, hi: f64, i: usize, resolution: usize) -> f64 {
    lo + i as f64 * (hi - lo) / (resolution - 1) as f64
}

/// Row-major enumeration (last coordinate fastest); the first maximizer wins.
fn grid_search<F>(f: &mut F, lower: &[f64], upper: &[f64], resolution: usize) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let d = lower.len();
    let total = (resolution as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
    if total > MAX_GRID_POINTS {
        return Err(Error::GridTooLarge(total));
    }
    let mut idx = vec![0usize; d];
    let mut z: Vec<f64> = lower.to_vec();
    let mut best: Option<(Vec<f64>, f64)> = None;
    loop {
        let v = f(&z)?;
        if best.as_ref().map_or(true, |(_, b)| v > *b) {
            best = Some((z.clone(), v));
        }
        let mut k = d;
        loop {
            if k == 0 {
                let (z, v) = best.expect("grid has at least one point");
                return Ok((z, v));
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < resolution {
                z[k] = grid_coordinate(lower[k], upper[k], idx[k], resolution);
                break;
            }
            idx[k] = 0;
            z[k] = lower[k];
        }
    }
}

fn multistart<F>(
    f: &mut F,
    lower: &[f64],
    upper: &[f64],
    restarts: usize,
    steps: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in 0..restarts {
        let mut start_rng = rng.split_indexed("restart", r as u64);
        let mut z: Vec<f64> = lower
            .iter()
            .zip(upper)
            .map(|(lo, hi)| start_rng.uniform(*lo, *hi))
            .collect();
        let mut value = f(&z)?;
        for _ in 0..GOLDEN_PASSES {
            for k in 0..z.len() {
                let mut probe = z.clone();
                let mut at = |t: f64, f: &mut F| -> Result<f64> {
                    probe[k] = t;
                    f(&probe)
                };
                let (mut a, mut b) = (lower[k], upper[k]);
                let mut c = b - inv_phi * (b - a);
                let mut d = a + inv_phi * (b - a);
                let mut fc = at(c, f)?;
                let mut fd = at(d, f)?;
                for _ in 0..steps {
                    if fc >= fd {
                        b = d;
                        d = c;
                        fd = fc;
                        c = b - inv_phi * (b - a);
                        fc = at(c, f)?;
                    } else {
                        a = c;
                        c = d;
                        fc = fd;
                        d = a + inv_phi * (b - a);
                        fd = at(d, f)?;
                    }
                }
                let (t, ft) = if fc >= fd { (c, fc) } else { (d, fd) };
                if ft > value {
                    z[k] = t;
                    value = ft;
                }
            }
        }
        if best.as_ref().map_or(true, |(_, b)| value > *b) {
            best = Some((z, value));
        }
    }
    Ok(best.expect("restarts >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{fit, GpHyperparams};
    use crate::Matrix;

    fn post() -> GpPosterior {
        let z = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, -1.0], vec![-1.5, 0.5]]).unwrap();
        fit(&z, &[0.2, 1.0, -0.4], &GpHyperparams::new(0.8, 1.0, 1e-10).unwrap()).unwrap()
    }

    #[test]
    fn ucb_cases() {
        let p = post();
        let z = [0.3, 0.4];
        assert_eq!(ucb(&p, &z, 0.0).unwrap(), p.predict(&z).unwrap().mean);
        assert!((ucb(&p, &[1.0, -1.0], 9.0).unwrap() - 1.0).abs() < 1e-4);
        let far = [40.0, 40.0];
        assert!((ucb(&p, &far, 4.0).unwrap() - (p.prior_mean() + 2.0)).abs() < 1e-6);
        assert!(ucb(&p, &[0.0], 1.0).is_err());
    }

    #[test]
    fn ei_closed_form_cases() {
        assert_eq!(ei_closed_form(0.3, 0.0, 0.5, 0.0), 0.0);
        assert_eq!(ei_closed_form(1.5, 0.0, 0.5, 0.0), 1.0);
        let v = ei_closed_form(0.5, 1.0, 0.5, 0.0);
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!(ei_closed_form(-30.0, 0.1, 0.0, 0.0) >= 0.0);
    }

    #[test]
    fn validation() {
        let mut c = AcquisitionConfig::cube(2);
        c.validate().unwrap();
        c.lower[1] = 3.0;
        assert!(c.validate().is_err());
        let mut c = AcquisitionConfig::cube(2);
        c.optimizer = Optimizer::Grid { resolution: 1 };
        assert!(c.validate().is_err());
        c.optimizer = Optimizer::Multistart { restarts: 0, steps: 3 };
        assert!(c.validate().is_err());
        let mut c = AcquisitionConfig::cube(8);
        c.optimizer = Optimizer::Grid { resolution: 10 };
        let mut rng = SeededRng::new(0);
        assert!(matches!(
            maximize_fn(|_| Ok(0.0), &c, &mut rng),
            Err(Error::GridTooLarge(100_000_000))
        ));
    }

    #[test]
    fn constant_function_picks_first_grid_point() {
        let mut c = AcquisitionConfig::cube(2);
        c.optimizer = Optimizer::Grid { resolution: 5 };
        let (z, v) = maximize_fn(|_| Ok(1.25), &c, &mut SeededRng::new(0)).unwrap();
        assert_eq!(z, vec![-3.0, -3.0]);
        assert_eq!(v, 1.25);
    }

    #[test]
    fn grid_visits_every_point_once_in_row_major_order() {
        let mut c = AcquisitionConfig::cube(2);
        c.lower = vec![0.0, 10.0];
        c.upper = vec![1.0, 12.0];
        c.optimizer = Optimizer::Grid { resolution: 3 };
        let mut seen = Vec::new();
        maximize_fn(
            |z| {
                seen.push(z.to_vec());
                Ok(0.0)
            },
            &c,
            &mut SeededRng::new(0),
        )
        .unwrap();
        let expected: Vec<Vec<f64>> = [0.0, 0.5, 1.0]
            .iter()
            .flat_map(|a| [10.0, 11.0, 12.0].iter().map(move |b| vec![*a, *b]))
            .collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn multistart_is_deterministic_and_finds_quadratic_peak() {
        let c = AcquisitionConfig::cube(3);
        let f = |z: &[f64]| Ok(-(z[0] - 1.0).powi(2) - (z[1] + 0.5).powi(2) - z[2] * z[2]);
        let a = maximize_fn(f, &c, &mut SeededRng::new(3)).unwrap();
        let b = maximize_fn(f, &c, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.1 > -1e-8, "{a:?}");
    }
}
