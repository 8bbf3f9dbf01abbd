//! Gaussian-process surrogate over the latent space and the mean/kernel
//! mismatch diagnostics.
//!
//! The prior is `GP(m, k)` with a constant mean `m = mean(y)` and an RBF kernel
//! with a single lengthscale. Hyperparameters come from a grid search on the
//! log marginal likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, cholesky_log_det, squared_distance, triangular_solve, Matrix};
use crate::vae::VaeModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl GpHyperparams {
    pub fn new(lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let h = Self {
            lengthscale,
            signal_variance,
            noise_variance,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite())
            || !(self.signal_variance > 0.0 && self.signal_variance.is_finite())
            || !(self.noise_variance >= 0.0 && self.noise_variance.is_finite())
        {
            return Err(Error::ConfigInvalid(format!("invalid GP hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// `σ_f²·exp(−‖a−b‖²/(2ℓ²))`
pub fn rbf_kernel(a: &[f64], b: &[f64], h: &GpHyperparams) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(rbf(a, b, h))
}

#[inline]
fn rbf(a: &[f64], b: &[f64], h: &GpHyperparams) -> f64 {
    h.signal_variance * (-squared_distance(a, b) / (2.0 * h.lengthscale * h.lengthscale)).exp()
}

/// `K + σ_n² I` over the rows of `z`.
pub fn covariance(z: &Matrix, h: &GpHyperparams) -> Matrix {
    let n = z.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = rbf(z.row(i), z.row(j), h);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = h.signal_variance + h.noise_variance;
    }
    k
}

#[derive(Clone, Debug)]
pub struct GpPosterior {
    z: Matrix,
    y: Vec<f64>,
    hyper: GpHyperparams,
    mean: f64,
    chol: Matrix,
    alpha: Vec<f64>,
    jitter: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    /// How far below zero the raw variance was before flooring (0 if it was not).
    pub clamped: f64,
}

impl Prediction {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

fn check_data(z: &Matrix, y: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::EmptyInput);
    }
    if z.rows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: z.rows(),
            got: y.len(),
        });
    }
    Ok(())
}

/// Conditions the GP on `(z_i, y_i)`.
pub fn fit(z: &Matrix, y: &[f64], h: &GpHyperparams) -> Result<GpPosterior> {
    check_data(z, y)?;
    h.validate()?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let (chol, jitter) = cholesky_jittered(&covariance(z, h))?;
    let centered: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let w = triangular_solve(&chol, &centered, false)?;
    let alpha = triangular_solve(&chol, &w, true)?;
    Ok(GpPosterior {
        z: z.clone(),
        y: y.to_vec(),
        hyper: *h,
        mean,
        chol,
        alpha,
        jitter,
    })
}

impl GpPosterior {
    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hyper
    }

    pub fn prior_mean(&self) -> f64 {
        self.mean
    }

    pub fn training_inputs(&self) -> &Matrix {
        &self.z
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn cholesky(&self) -> &Matrix {
        &self.chol
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Diagonal jitter the factorization needed on top of `σ_n²`.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    /// Posterior mean `m + k*ᵀα` and variance `k** − ‖L⁻¹k*‖²`, floored at 0.
    pub fn predict(&self, z: &[f64]) -> Result<Prediction> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        let k_star: Vec<f64> = self.z.row_iter().map(|zi| rbf(zi, z, &self.hyper)).collect();
        let mean = self.mean + crate::linalg::dot(&k_star, &self.alpha);
        let v = triangular_solve(&self.chol, &k_star, false)?;
        let raw = self.hyper.signal_variance - crate::linalg::dot(&v, &v);
        let (variance, clamped) = if raw < 0.0 { (0.0, -raw) } else { (raw, 0.0) };
        Ok(Prediction {
            mean,
            variance,
            clamped,
        })
    }

    /// Largest observed target.
    pub fn best_target(&self) -> f64 {
        self.y.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn predict(post: &GpPosterior, z: &[f64]) -> Result<Prediction> {
    post.predict(z)
}

/// `−½(y−m)ᵀ(K+σ_n²I)⁻¹(y−m) − ½ log det(K+σ_n²I) − (N/2) log 2π`
pub fn log_marginal_likelihood(z: &Matrix, y: &[f64], h: &GpHyperparams) -> Result<f64> {
    let post = fit(z, y, h)?;
    let centered: Vec<f64> = y.iter().map(|v| v - post.mean).collect();
    let quad = crate::linalg::dot(&centered, &post.alpha);
    let n = y.len() as f64;
    Ok(-0.5 * quad - 0.5 * cholesky_log_det(&post.chol) - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperGrid {
    pub lengthscales: Vec<f64>,
    pub signal_variances: Vec<f64>,
    pub noise_variances: Vec<f64>,
}

impl Default for HyperGrid {
    /// Suited to standardized targets and latents of unit scale.
    fn default() -> Self {
        Self {
            lengthscales: vec![0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0],
            signal_variances: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            noise_variances: vec![1e-6, 1e-4, 1e-3, 1e-2, 1e-1],
        }
    }
}

impl HyperGrid {
    pub fn single(h: GpHyperparams) -> Self {
        Self {
            lengthscales: vec![h.lengthscale],
            signal_variances: vec![h.signal_variance],
            noise_variances: vec![h.noise_variance],
        }
    }

    pub fn len(&self) -> usize {
        self.lengthscales.len() * self.signal_variances.len() * self.noise_variances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Grid argmax of the log marginal likelihood. Ties go to the smallest
/// lengthscale, then the smallest noise variance, then the smallest signal
/// variance. Cells whose covariance cannot be factored are skipped.
pub fn select_hyperparams(z: &Matrix, y: &[f64], grid: &HyperGrid) -> Result<GpHyperparams> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    check_data(z, y)?;
    let mut best: Option<(f64, GpHyperparams)> = None;
    let mut last_err = None;
    for &l in &sorted(&grid.lengthscales) {
        for &sn in &sorted(&grid.noise_variances) {
            for &sf in &sorted(&grid.signal_variances) {
                let h = GpHyperparams::new(l, sf, sn)?;
                match log_marginal_likelihood(z, y, &h) {
                    Ok(lml) if lml.is_finite() => {
                        if best.as_ref().map_or(true, |(b, _)| lml > *b) {
                            best = Some((lml, h));
                        }
                    }
                    Ok(_) => {}
                    Err(e) => last_err = Some(e),
                }
            }
        }
    }
    match best {
        Some((_, h)) => Ok(h),
        None => Err(last_err.unwrap_or(Error::NonFinite("log marginal likelihood"))),
    }
}

/// Something that maps original-space points to latents.
pub trait LatentMap {
    fn encode_mean(&self, x: &Matrix) -> Result<Matrix>;
}

impl LatentMap for VaeModel {
    fn encode_mean(&self, x: &Matrix) -> Result<Matrix> {
        self.encode_mean_batch(x)
    }
}

/// `enc(x) = x`.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityMap;

impl LatentMap for IdentityMap {
    fn encode_mean(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.clone())
    }
}

/// Reference kernel on original inputs for the kernel discrepancy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReferenceKernel {
    /// RBF with lengthscale = median pairwise probe distance and the
    /// posterior's signal variance.
    MedianHeuristic,
    Fixed(GpHyperparams),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub delta_mean: f64,
    pub delta_kernel: f64,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Mean and kernel discrepancy between the latent GP and the original space,
/// using the encoder mean as the inverse of the decoder.
///
/// `Δ_mean` averages `|m_z(enc(x)) − f(x)|` over probes, with `m_z` the
/// posterior mean. `Δ_kernel` averages `|k_z(enc(x), enc(x′)) − k_ref(x, x′)|`
/// over distinct probe pairs and is 0 for a single probe.
pub fn mismatch_diagnostics(
    map: &dyn LatentMap,
    post: &GpPosterior,
    probes: &Matrix,
    objective: &dyn Fn(&[f64]) -> f64,
    reference: ReferenceKernel,
) -> Result<MismatchReport> {
    let n = probes.rows();
    if n == 0 {
        return Err(Error::EmptyProbeSet);
    }
    let latents = map.encode_mean(probes)?;
    let mut delta_mean = 0.0;
    for (x, z) in probes.row_iter().zip(latents.row_iter()) {
        delta_mean += (post.predict(z)?.mean - objective(x)).abs();
    }
    delta_mean /= n as f64;

    let mut pair_dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            pair_dists.push(squared_distance(probes.row(i), probes.row(j)).sqrt());
        }
    }
    let k_ref = match reference {
        ReferenceKernel::Fixed(h) => h,
        ReferenceKernel::MedianHeuristic => {
            let l = median(pair_dists.clone()).filter(|m| *m > 0.0).unwrap_or(1.0);
            GpHyperparams {
                lengthscale: l,
                ..post.hyper
            }
        }
    };
    let mut delta_kernel = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..i {
            let kz = rbf(latents.row(i), latents.row(j), &post.hyper);
            let kx = rbf(probes.row(i), probes.row(j), &k_ref);
            delta_kernel += (kz - kx).abs();
            pairs += 1;
        }
    }
    if pairs > 0 {
        delta_kernel /= pairs as f64;
    }
    Ok(MismatchReport {
        delta_mean,
        delta_kernel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(l: f64, sf: f64, sn: f64) -> GpHyperparams {
        GpHyperparams::new(l, sf, sn).unwrap()
    }

    #[test]
    fn rbf_values() {
        let hp = h(1.0, 1.0, 0.0);
        assert_eq!(rbf_kernel(&[0.3, 0.1], &[0.3, 0.1], &hp).unwrap(), 1.0);
        let v = rbf_kernel(&[0.0, 0.0], &[1.0, 1.0], &hp).unwrap();
        assert!((v - (-1f64).exp()).abs() < 1e-15);
        let far = rbf_kernel(&[0.0], &[40.0], &hp).unwrap();
        let near = rbf_kernel(&[0.0], &[0.5], &hp).unwrap();
        assert!(far < near && far < 1e-300);
        assert!(rbf_kernel(&[0.0], &[0.0, 1.0], &hp).is_err());
    }

    #[test]
    fn single_point_and_far_field() {
        let z = Matrix::from_rows(&[vec![0.5, -0.5]]).unwrap();
        let post = fit(&z, &[2.5], &h(0.7, 1.3, 0.0)).unwrap();
        let p = post.predict(&[0.5, -0.5]).unwrap();
        assert!((p.mean - 2.5).abs() < 1e-9);
        assert!(p.variance < 1e-8);
        let far = post.predict(&[0.5 + 20.0 * 0.7, -0.5]).unwrap();
        assert!((far.mean - 2.5).abs() < 1e-6);
        assert!((far.variance - 1.3).abs() < 1e-6);
        assert!(post.predict(&[0.0]).is_err());
    }

    #[test]
    fn duplicates_without_noise_need_the_jitter_ladder() {
        let z = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let post = fit(&z, &[0.0, 1.0], &h(1.0, 1.0, 0.0)).unwrap();
        assert_eq!(post.jitter(), 1e-10);
    }

    #[test]
    fn interpolates_random_points() {
        let mut rng = crate::rng::SeededRng::new(4);
        let z = Matrix::from_fn(5, 2, |_, _| rng.uniform(-1.0, 1.0));
        let y: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let post = fit(&z, &y, &h(0.5, 1.0, 1e-10)).unwrap();
        for (zi, yi) in z.row_iter().zip(&y) {
            assert!((post.predict(zi).unwrap().mean - yi).abs() < 1e-6);
        }
    }

    #[test]
    fn lml_single_point() {
        let z = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let v = log_marginal_likelihood(&z, &[3.0], &h(1.0, 0.75, 0.25)).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn grid_selection_edge_cases() {
        let z = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.5]]).unwrap();
        let y = [0.1, 0.7, -0.3];
        let only = h(0.8, 1.1, 1e-3);
        assert_eq!(select_hyperparams(&z, &y, &HyperGrid::single(only)).unwrap(), only);
        let empty = HyperGrid {
            lengthscales: vec![],
            ..HyperGrid::default()
        };
        assert!(matches!(select_hyperparams(&z, &y, &empty), Err(Error::EmptyGrid)));

        // All targets equal the mean, so (y−m)ᵀK⁻¹(y−m) = 0 and, with points
        // far apart relative to every lengthscale, K = (σ_f²+σ_n²)·I: cells with
        // equal σ_f²+σ_n² tie exactly and the smallest lengthscale, then the
        // smallest noise, must win.
        let z = Matrix::from_rows(&[vec![0.0], vec![100.0]]).unwrap();
        let grid = HyperGrid {
            lengthscales: vec![0.2, 0.1],
            signal_variances: vec![0.5, 0.75],
            noise_variances: vec![0.5, 0.25],
        };
        let best = select_hyperparams(&z, &[1.0, 1.0], &grid).unwrap();
        assert_eq!(best, h(0.1, 0.5, 0.25));
    }

    #[test]
    fn diagnostics_degenerate_cases() {
        let z = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.5], vec![-0.5, 1.0]]).unwrap();
        let f = |x: &[f64]| x[0] - x[1];
        let y: Vec<f64> = z.row_iter().map(f).collect();
        let hp = h(0.9, 1.0, 1e-8);
        let post = fit(&z, &y, &hp).unwrap();
        let r = mismatch_diagnostics(&IdentityMap, &post, &z, &f, ReferenceKernel::Fixed(hp)).unwrap();
        assert_eq!(r.delta_kernel, 0.0);
        assert!(r.delta_mean < 1e-6);

        let one = z.slice_rows(0, 1);
        let r = mismatch_diagnostics(&IdentityMap, &post, &one, &f, ReferenceKernel::MedianHeuristic).unwrap();
        assert_eq!(r.delta_kernel, 0.0);
        assert!(r.delta_mean.is_finite());

        assert!(matches!(
            mismatch_diagnostics(
                &IdentityMap,
                &post,
                &Matrix::zeros(0, 2),
                &f,
                ReferenceKernel::MedianHeuristic
            ),
            Err(Error::EmptyProbeSet)
        ));
    }
}
