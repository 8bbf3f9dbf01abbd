//! MLP variational autoencoder, its losses, and full-batch training.
//!
//! The encoder is `d -> width -> ... -> width -> (mu, log_sigma)` with tanh
//! hidden units; the decoder mirrors it back to `d`. Training treats the
//! dataset as one ordered sequence (acquisition order) because the
//! consistency term compares the HiPPO memory trajectory of the data with
//! that of its reconstruction. One epoch is one full-batch gradient step.
//!
//! Loss for a dataset `X` of `N` rows, with `X̄` the decoder output at one
//! reparameterized sample per row:
//!
//! ```text
//! recon_w · (1/N) Σ_i w_i ‖x_i − x̄_i‖₂
//!   + kl_w · (1/N) Σ_i KL[N(mu_i, σ_i²) ‖ N(0, I)]
//!   + λ · (1/N) Σ_i ‖c_i − c̄_i‖_F
//! ```
//!
//! where `c_i`/`c̄_i` are the memories of `X`/`X̄` after `i+1` steps and `w_i`
//! are rank weights (all 1 unless reweighting is on). By linearity
//! `c_i − c̄_i` is the memory of the residual sequence `X − X̄`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hippo::{build_legs_operator, StepRule, TrajectoryResponse, DEFAULT_ORDER};
use crate::linalg::Matrix;
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 3.0;
const CHECKPOINT_FORMAT: &str = "hibbo-vae";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Linear,
    /// Logistic squashing into `(0, 1)`.
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub latent_dim: usize,
    #[serde(default = "default_width")]
    pub hidden_width: usize,
    #[serde(default = "default_depth")]
    pub hidden_layers: usize,
    #[serde(default)]
    pub output: OutputActivation,
}

fn default_width() -> usize {
    50
}

fn default_depth() -> usize {
    5
}

impl Architecture {
    pub fn new(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            latent_dim,
            hidden_width: default_width(),
            hidden_layers: default_depth(),
            output: OutputActivation::Linear,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim >= self.input_dim {
            return Err(Error::InvalidModel(format!(
                "latent dim {} must be in [1, input dim {})",
                self.latent_dim, self.input_dim
            )));
        }
        if self.hidden_width == 0 {
            return Err(Error::InvalidModel("hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Fully connected layer `y = x·W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let bound = (3.0 / fan_in as f64).sqrt();
        Self {
            weight: Matrix::from_fn(fan_in, fan_out, |_, _| rng.uniform(-bound, bound)),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        y
    }

    fn forward_tape(&self, tape: &mut Tape, x: Var, params: &mut Vec<Var>) -> Var {
        let w = tape.param(self.weight.clone());
        let b = tape.param(self.bias.clone());
        params.push(w);
        params.push(b);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    arch: Architecture,
    encoder: Vec<Dense>,
    mu_head: Dense,
    log_sigma_head: Dense,
    /// Hidden layers followed by the output layer.
    decoder: Vec<Dense>,
}

/// Result of encoding one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

fn layer_sizes(arch: &Architecture) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let w = arch.hidden_width;
    let mut enc = Vec::new();
    let mut fan_in = arch.input_dim;
    for _ in 0..arch.hidden_layers {
        enc.push((fan_in, w));
        fan_in = w;
    }
    let mut dec = Vec::new();
    let mut fan_in = arch.latent_dim;
    for _ in 0..arch.hidden_layers {
        dec.push((fan_in, w));
        fan_in = w;
    }
    dec.push((fan_in, arch.input_dim));
    (enc, dec)
}

impl VaeModel {
    /// Weights uniform in `±√(3/fan_in)` (unit-variance fan-in scaling),
    /// biases zero.
    pub fn new(arch: Architecture, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let (enc, dec) = layer_sizes(&arch);
        let encoder: Vec<Dense> = enc.iter().map(|&(i, o)| Dense::uniform(i, o, rng)).collect();
        let head_in = enc.last().map_or(arch.input_dim, |l| l.1);
        let mu_head = Dense::uniform(head_in, arch.latent_dim, rng);
        let log_sigma_head = Dense::uniform(head_in, arch.latent_dim, rng);
        let decoder = dec.iter().map(|&(i, o)| Dense::uniform(i, o, rng)).collect();
        Ok(Self {
            arch,
            encoder,
            mu_head,
            log_sigma_head,
            decoder,
        })
    }

    /// Every parameter zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let (enc, dec) = layer_sizes(&arch);
        let head_in = enc.last().map_or(arch.input_dim, |l| l.1);
        Ok(Self {
            arch,
            encoder: enc.iter().map(|&(i, o)| Dense::zeros(i, o)).collect(),
            mu_head: Dense::zeros(head_in, arch.latent_dim),
            log_sigma_head: Dense::zeros(head_in, arch.latent_dim),
            decoder: dec.iter().map(|&(i, o)| Dense::zeros(i, o)).collect(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn decoder_output_layer_mut(&mut self) -> &mut Dense {
        self.decoder.last_mut().expect("decoder has an output layer")
    }

    /// Parameters in a fixed order: encoder layers, mu head, log-sigma head,
    /// decoder layers; weight before bias.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in self
            .encoder
            .iter()
            .chain([&self.mu_head, &self.log_sigma_head])
            .chain(&self.decoder)
        {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in self
            .encoder
            .iter_mut()
            .chain([&mut self.mu_head, &mut self.log_sigma_head])
            .chain(self.decoder.iter_mut())
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|m| m.is_finite())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// `(mu, log_sigma)` for every row of `x`.
    pub fn encode_batch(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.encoder {
            h = l.forward(&h).map(f64::tanh);
        }
        let mu = self.mu_head.forward(&h);
        let ls = self
            .log_sigma_head
            .forward(&h)
            .map(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));
        Ok((mu, ls))
    }

    /// Deterministic latents (encoder means) for every row of `x`.
    pub fn encode_mean_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.encode_batch(x)?.0)
    }

    /// Encodes one point. With `rng` the latent is the reparameterized sample
    /// `mu + exp(log_sigma)⊙ε`; without it, `z = mu`.
    pub fn encode(&self, x: &[f64], rng: Option<&mut SeededRng>) -> Result<Encoding> {
        let (mu, ls) = self.encode_batch(&Matrix::row_vector(x))?;
        let (mu, log_sigma) = (mu.into_vec(), ls.into_vec());
        let z = match rng {
            Some(rng) => mu
                .iter()
                .zip(&log_sigma)
                .map(|(m, s)| m + s.exp() * rng.normal())
                .collect(),
            None => mu.clone(),
        };
        Ok(Encoding { z, mu, log_sigma })
    }

    pub fn decode_batch(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.arch.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.latent_dim,
                got: z.cols(),
            });
        }
        let mut h = z.clone();
        let last = self.decoder.len() - 1;
        for (i, l) in self.decoder.iter().enumerate() {
            h = l.forward(&h);
            if i < last {
                h = h.map(f64::tanh);
            }
        }
        Ok(match self.arch.output {
            OutputActivation::Linear => h,
            OutputActivation::Sigmoid => h.map(sigmoid),
        })
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&Matrix::row_vector(z))?.into_vec())
    }

    /// Deterministic round trip `decode(encode_mean(x))` for every row.
    pub fn reconstruct_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.decode_batch(&self.encode_mean_batch(x)?)
    }

    /// Versioned JSON checkpoint; floats round-trip exactly.
    pub fn to_checkpoint(&self) -> String {
        let doc = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        serde_json::to_string(&doc).expect("model serializes")
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let doc: Checkpoint = serde_json::from_str(text)?;
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint {} v{}",
                doc.format, doc.version
            )));
        }
        doc.model.validate()?;
        Ok(doc.model)
    }

    fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let (enc, dec) = layer_sizes(&self.arch);
        let head_in = enc.last().map_or(self.arch.input_dim, |l| l.1);
        let expected: Vec<(usize, usize)> = enc
            .iter()
            .copied()
            .chain([(head_in, self.arch.latent_dim), (head_in, self.arch.latent_dim)])
            .chain(dec.iter().copied())
            .collect();
        let layers: Vec<&Dense> = self
            .encoder
            .iter()
            .chain([&self.mu_head, &self.log_sigma_head])
            .chain(&self.decoder)
            .collect();
        if layers.len() != expected.len() {
            return Err(Error::InvalidModel(format!(
                "expected {} layers, found {}",
                expected.len(),
                layers.len()
            )));
        }
        for (l, &(i, o)) in layers.iter().zip(&expected) {
            if l.weight.shape() != (i, o) || l.bias.shape() != (1, o) {
                return Err(Error::InvalidModel(format!(
                    "layer shape {:?}/{:?}, expected ({i}, {o})",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    model: VaeModel,
}

fn sigmoid(x: f64) -> f64 {
    0.5 * (0.5 * x).tanh() + 0.5
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionNorm {
    /// `‖x − x̄‖₂`
    #[default]
    L2,
    /// `‖x − x̄‖₂²`, smooth at zero residual.
    SquaredL2,
}

/// How the consistency term is evaluated on the tape. Both give the same
/// value; they differ only in cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyRoute {
    /// Pick the cheaper of the two for the problem size.
    #[default]
    Auto,
    /// Step the residual memory `D_i = Ā D_{i-1} + B̄ r_iᵀ` on the tape
    /// (`O(N ρ² d)`).
    Recurrence,
    /// `‖D_i‖² = Σ_{j,k} (M_iᵀ M_i)_{jk} (R Rᵀ)_{jk}` through the residual
    /// Gram matrix (`O(N² d + N³ ρ)`).
    Gram,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub recon_weight: f64,
    pub kl_weight: f64,
    pub consistency_weight: f64,
    pub hippo_order: usize,
    pub step_rule: StepRule,
    pub reweigh: bool,
    pub reweigh_temperature: f64,
    pub reconstruction: ReconstructionNorm,
    pub route: ConsistencyRoute,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            recon_weight: 1.0,
            kl_weight: 1.0,
            consistency_weight: 1.0,
            hippo_order: DEFAULT_ORDER,
            step_rule: StepRule::default(),
            reweigh: false,
            reweigh_temperature: 1e-3,
            reconstruction: ReconstructionNorm::L2,
            route: ConsistencyRoute::Auto,
        }
    }
}

impl LossConfig {
    /// Plain ELBO: no consistency term, no reweighting.
    pub fn elbo() -> Self {
        Self {
            consistency_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.recon_weight, self.kl_weight, self.consistency_weight];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::ConfigInvalid("loss weights must be finite and ≥ 0".into()));
        }
        if self.consistency_weight > 0.0 && self.hippo_order == 0 {
            return Err(Error::InvalidOrder);
        }
        if self.reweigh && !(self.reweigh_temperature > 0.0 && self.reweigh_temperature.is_finite()) {
            return Err(Error::ConfigInvalid("reweigh temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Loss value, its parts, and gradients in [`VaeModel::params`] order.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub consistency: f64,
    pub gradients: Vec<Matrix>,
}

/// Reuses the HiPPO trajectory response across epochs and retrains.
#[derive(Clone, Debug, Default)]
pub struct HippoCache {
    response: Option<TrajectoryResponse>,
}

impl HippoCache {
    fn response(&mut self, order: usize, rule: StepRule, n: usize) -> Result<&TrajectoryResponse> {
        let stale = match &self.response {
            Some(r) => r.operator().order() != order || r.operator().rule() != rule,
            None => true,
        };
        if stale {
            let op = build_legs_operator(order)?.with_rule(rule);
            self.response = Some(TrajectoryResponse::new(&op));
        }
        let r = self.response.as_mut().expect("just set");
        r.extend_to(n);
        Ok(r)
    }
}

/// Rank weights `w_i ∝ 1/(temperature·N + rank_i)`, rank 0 for the largest
/// objective, ties sharing their average rank, scaled to mean 1.
pub fn reweigh_weights(objectives: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if objectives.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(temperature > 0.0) {
        return Err(Error::ConfigInvalid("reweigh temperature must be positive".into()));
    }
    let n = objectives.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| objectives[b].total_cmp(&objectives[a]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && objectives[order[end]] == objectives[order[start]] {
            end += 1;
        }
        let avg = (start + end - 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    let raw: Vec<f64> = ranks.iter().map(|r| 1.0 / (temperature * n as f64 + r)).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// ELBO on `batch` with one reparameterization sample per row drawn from `rng`.
pub fn elbo_loss(model: &VaeModel, batch: &Matrix, rng: &mut SeededRng) -> Result<LossOutput> {
    hibbo_loss(model, batch, None, &LossConfig::elbo(), rng)
}

/// ELBO plus the HiPPO trajectory consistency term. `objectives` is only
/// read when `cfg.reweigh` is set.
pub fn hibbo_loss(
    model: &VaeModel,
    data: &Matrix,
    objectives: Option<&[f64]>,
    cfg: &LossConfig,
    rng: &mut SeededRng,
) -> Result<LossOutput> {
    let eps = draw_noise(model, data, rng)?;
    let weights = point_weights(data, objectives, cfg)?;
    evaluate_loss(model, data, weights.as_deref(), cfg, &eps, &mut HippoCache::default())
}

fn draw_noise(model: &VaeModel, data: &Matrix, rng: &mut SeededRng) -> Result<Matrix> {
    if data.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    model.check_input(data)?;
    Ok(rng.normal_matrix(data.rows(), model.latent_dim()))
}

fn point_weights(data: &Matrix, objectives: Option<&[f64]>, cfg: &LossConfig) -> Result<Option<Vec<f64>>> {
    if !cfg.reweigh {
        return Ok(None);
    }
    let y = objectives.ok_or_else(|| Error::ConfigInvalid("reweighting needs objective values".into()))?;
    if y.len() != data.rows() {
        return Err(Error::DimensionMismatch {
            expected: data.rows(),
            got: y.len(),
        });
    }
    reweigh_weights(y, cfg.reweigh_temperature).map(Some)
}

/// Loss and gradients for fixed reparameterization noise `eps` (`N x d′`).
pub fn evaluate_loss(
    model: &VaeModel,
    data: &Matrix,
    weights: Option<&[f64]>,
    cfg: &LossConfig,
    eps: &Matrix,
    cache: &mut HippoCache,
) -> Result<LossOutput> {
    let n = data.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    model.check_input(data)?;
    cfg.validate()?;
    let inv_n = 1.0 / n as f64;

    let mut tape = Tape::new();
    let mut params = Vec::with_capacity(model.params().len());
    let x = tape.constant(data.clone());

    let mut h = x;
    for l in &model.encoder {
        let a = l.forward_tape(&mut tape, h, &mut params);
        h = tape.tanh(a);
    }
    let mu = model.mu_head.forward_tape(&mut tape, h, &mut params);
    let ls_raw = model.log_sigma_head.forward_tape(&mut tape, h, &mut params);
    let ls = tape.clamp(ls_raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX);

    let e = tape.constant(eps.clone());
    let sigma = tape.exp(ls);
    let noise = tape.mul(sigma, e);
    let z = tape.add(mu, noise);

    let mut h = z;
    let last = model.decoder.len() - 1;
    for (i, l) in model.decoder.iter().enumerate() {
        h = l.forward_tape(&mut tape, h, &mut params);
        if i < last {
            h = tape.tanh(h);
        }
    }
    let x_bar = match model.arch.output {
        OutputActivation::Linear => h,
        OutputActivation::Sigmoid => {
            let half = tape.scale(h, 0.5);
            let t = tape.tanh(half);
            let t = tape.scale(t, 0.5);
            tape.add_scalar(t, 0.5)
        }
    };

    let resid = tape.sub(x, x_bar);
    let sq = tape.square(resid);
    let per_point = tape.sum_rows(sq);
    let mut recon = match cfg.reconstruction {
        ReconstructionNorm::L2 => tape.sqrt(per_point),
        ReconstructionNorm::SquaredL2 => per_point,
    };
    if let Some(w) = weights {
        let wv = tape.constant(Matrix::column(w));
        recon = tape.mul(recon, wv);
    }
    let recon_sum = tape.sum(recon);
    let recon_mean = tape.scale(recon_sum, inv_n);

    // KL[N(mu, σ²) ‖ N(0, I)] = ½ Σ (σ² + mu² − 1 − 2 log σ)
    let two_ls = tape.scale(ls, 2.0);
    let var = tape.exp(two_ls);
    let mu_sq = tape.square(mu);
    let kl_a = tape.add(var, mu_sq);
    let kl_b = tape.sub(kl_a, two_ls);
    let kl_c = tape.add_scalar(kl_b, -1.0);
    let kl_sum = tape.sum(kl_c);
    let kl_mean = tape.scale(kl_sum, 0.5 * inv_n);

    let r_term = tape.scale(recon_mean, cfg.recon_weight);
    let k_term = tape.scale(kl_mean, cfg.kl_weight);
    let mut total = tape.add(r_term, k_term);

    let mut consistency = 0.0;
    if cfg.consistency_weight > 0.0 {
        let resp = cache.response(cfg.hippo_order, cfg.step_rule, n)?;
        let route = match cfg.route {
            ConsistencyRoute::Auto => cheaper_route(n, cfg.hippo_order, data.cols()),
            r => r,
        };
        let c = match route {
            ConsistencyRoute::Gram => consistency_gram(&mut tape, resid, resp, n),
            _ => consistency_recurrence(&mut tape, resid, resp, n),
        };
        consistency = tape.value(c).item();
        let c_term = tape.scale(c, cfg.consistency_weight);
        total = tape.add(total, c_term);
    }

    let value = tape.value(total).item();
    let grads = tape.backward(total)?;
    Ok(LossOutput {
        total: value,
        reconstruction: tape.value(recon_mean).item(),
        kl: tape.value(kl_mean).item(),
        consistency,
        gradients: params.iter().map(|&p| grads.wrt(p)).collect(),
    })
}

fn cheaper_route(n: usize, order: usize, dim: usize) -> ConsistencyRoute {
    let (n, r, d) = (n as f64, order as f64, dim as f64);
    let recurrence = n * r * r * d;
    let gram = n * n * d + 2.0 * n * n * n * r;
    if gram < recurrence {
        ConsistencyRoute::Gram
    } else {
        ConsistencyRoute::Recurrence
    }
}

/// Mean over steps of `‖D_i‖_F`, stepping the residual memory on the tape.
fn consistency_recurrence(tape: &mut Tape, resid: Var, resp: &TrajectoryResponse, n: usize) -> Var {
    let mut memory: Option<Var> = None;
    let mut norms: Option<Var> = None;
    for i in 0..n {
        let (a_bar, b_bar) = resp.step(i);
        let r_i = tape.slice_rows(resid, i, i + 1);
        let b_col = tape.constant(Matrix::column(b_bar));
        let input = tape.matmul(b_col, r_i);
        let next = match memory {
            Some(prev) => {
                let a = tape.constant(a_bar.clone());
                let carried = tape.matmul(a, prev);
                tape.add(carried, input)
            }
            None => input,
        };
        let sq = tape.square(next);
        let s = tape.sum(sq);
        let norm = tape.sqrt(s);
        norms = Some(match norms {
            Some(acc) => tape.add(acc, norm),
            None => norm,
        });
        memory = Some(next);
    }
    let total = norms.expect("n ≥ 1");
    tape.scale(total, 1.0 / n as f64)
}

/// Same value as [`consistency_recurrence`] through the residual Gram matrix.
fn consistency_gram(tape: &mut Tape, resid: Var, resp: &TrajectoryResponse, n: usize) -> Var {
    let order = resp.operator().order();
    let gram = tape.matmul_t(resid, resid);
    let stacked = tape.constant(resp.stacked(n));
    let projected = tape.matmul(stacked, gram);
    let quad = tape.mul(projected, stacked);
    let per_row = tape.sum_rows(quad);
    let grouping = tape.constant(Matrix::from_fn(
        n,
        n * order,
        |i, k| {
            if k / order == i {
                1.0
            } else {
                0.0
            }
        },
    ));
    let sq_norms = tape.matmul(grouping, per_row);
    let norms = tape.sqrt(sq_norms);
    tape.mean(norms)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    fn new(model: &VaeModel) -> Self {
        let zeros: Vec<Matrix> = model
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut VaeModel, grads: &[Matrix], opts: &TrainOptions) {
        self.t += 1;
        let bc1 = 1.0 - opts.beta1.powi(self.t);
        let bc2 = 1.0 - opts.beta2.powi(self.t);
        for (((p, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (pd, gd) = (p.data_mut(), g.data());
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = opts.beta1 * *mi + (1.0 - opts.beta1) * gi;
                *vi = opts.beta2 * *vi + (1.0 - opts.beta2) * gi * gi;
                *pi -= opts.learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + opts.epsilon);
            }
        }
    }
}

/// Full-batch Adam on the ordered dataset. Returns the updated model and the
/// loss before each update.
pub fn train(
    model: &VaeModel,
    data: &Matrix,
    objectives: Option<&[f64]>,
    cfg: &LossConfig,
    opts: &TrainOptions,
    rng: &mut SeededRng,
) -> Result<(VaeModel, Vec<f64>)> {
    train_cached(model, data, objectives, cfg, opts, rng, &mut HippoCache::default())
}

pub fn train_cached(
    model: &VaeModel,
    data: &Matrix,
    objectives: Option<&[f64]>,
    cfg: &LossConfig,
    opts: &TrainOptions,
    rng: &mut SeededRng,
    cache: &mut HippoCache,
) -> Result<(VaeModel, Vec<f64>)> {
    if data.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    model.check_input(data)?;
    let weights = point_weights(data, objectives, cfg)?;
    let mut model = model.clone();
    let mut adam = Adam::new(&model);
    let mut trace = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let eps = rng.normal_matrix(data.rows(), model.latent_dim());
        let out = evaluate_loss(&model, data, weights.as_deref(), cfg, &eps, cache)?;
        if !out.total.is_finite() || out.gradients.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                value: out.total,
            });
        }
        trace.push(out.total);
        adam.step(&mut model, &out.gradients, opts);
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Architecture {
        Architecture {
            input_dim: 3,
            latent_dim: 1,
            hidden_width: 6,
            hidden_layers: 2,
            output: OutputActivation::Linear,
        }
    }

    #[test]
    fn zero_model_encodes_to_zero_and_decodes_to_zero() {
        let m = VaeModel::zeros(small_arch()).unwrap();
        let mut rng = SeededRng::new(1);
        let e = m.encode(&[0.4, -1.0, 2.0], Some(&mut rng)).unwrap();
        assert_eq!(e.mu, vec![0.0]);
        assert_eq!(e.log_sigma, vec![0.0]);
        assert_eq!(m.decode(&[0.7]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn encode_modes_are_deterministic() {
        let m = VaeModel::new(small_arch(), &mut SeededRng::new(3)).unwrap();
        let x = [0.1, 0.2, 0.3];
        assert_eq!(m.encode(&x, None).unwrap(), m.encode(&x, None).unwrap());
        let a = m.encode(&x, Some(&mut SeededRng::new(9))).unwrap();
        let b = m.encode(&x, Some(&mut SeededRng::new(9))).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.encode(&x, None).unwrap().z, a.mu);
        assert_eq!(m.decode(&a.z).unwrap().len(), 3);
    }

    #[test]
    fn dimension_checks() {
        let m = VaeModel::zeros(small_arch()).unwrap();
        assert!(matches!(m.encode(&[1.0], None), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(m.decode(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        let bad = Architecture {
            latent_dim: 3,
            ..small_arch()
        };
        assert!(matches!(VaeModel::zeros(bad), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn prior_matched_posterior_has_zero_kl_and_perfect_fit_zero_loss() {
        let mut m = VaeModel::zeros(small_arch()).unwrap();
        let target = [0.5, -0.25, 1.5];
        m.decoder_output_layer_mut().bias = Matrix::row_vector(&target);
        let batch = Matrix::from_rows(&[target.to_vec(), target.to_vec()]).unwrap();
        let out = elbo_loss(&m, &batch, &mut SeededRng::new(4)).unwrap();
        assert_eq!(out.kl, 0.0);
        assert_eq!(out.total, 0.0);
    }

    #[test]
    fn zero_consistency_weight_is_bit_identical_to_elbo() {
        let m = VaeModel::new(small_arch(), &mut SeededRng::new(5)).unwrap();
        let x = Matrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64).sin());
        let a = elbo_loss(&m, &x, &mut SeededRng::new(8)).unwrap();
        let cfg = LossConfig {
            consistency_weight: 0.0,
            hippo_order: 5,
            ..LossConfig::default()
        };
        let b = hibbo_loss(&m, &x, None, &cfg, &mut SeededRng::new(8)).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        for (ga, gb) in a.gradients.iter().zip(&b.gradients) {
            assert_eq!(ga, gb);
        }
    }

    #[test]
    fn routes_agree() {
        let m = VaeModel::new(small_arch(), &mut SeededRng::new(6)).unwrap();
        let x = Matrix::from_fn(7, 3, |i, j| ((i + 2 * j) as f64 * 0.37).cos());
        let eps = SeededRng::new(2).normal_matrix(7, 1);
        let mut cfg = LossConfig {
            hippo_order: 5,
            ..LossConfig::default()
        };
        cfg.route = ConsistencyRoute::Recurrence;
        let a = evaluate_loss(&m, &x, None, &cfg, &eps, &mut HippoCache::default()).unwrap();
        cfg.route = ConsistencyRoute::Gram;
        let b = evaluate_loss(&m, &x, None, &cfg, &eps, &mut HippoCache::default()).unwrap();
        assert!((a.consistency - b.consistency).abs() < 1e-12 * a.consistency.max(1.0));
        for (ga, gb) in a.gradients.iter().zip(&b.gradients) {
            assert!(ga.sub(gb).max_abs() < 1e-9);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let m = VaeModel::zeros(small_arch()).unwrap();
        let x = Matrix::zeros(0, 3);
        assert!(matches!(
            hibbo_loss(&m, &x, None, &LossConfig::default(), &mut SeededRng::new(1)),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn reweigh_cases() {
        assert_eq!(reweigh_weights(&[2.0, 2.0, 2.0], 1e-3).unwrap(), vec![1.0; 3]);
        let w = reweigh_weights(&[1.0, 3.0], 1e-3).unwrap();
        assert!(w[1] > w[0]);
        assert!(matches!(reweigh_weights(&[], 1.0), Err(Error::EmptyInput)));
        // hand-evaluated: N=5, temperature 1e-2 → offsets 0.05
        let y = [0.3, 0.9, -1.0, 0.5, 0.1];
        let ranks = [2.0, 0.0, 4.0, 1.0, 3.0];
        let raw: Vec<f64> = ranks.iter().map(|r: &f64| 1.0 / (0.05 + r)).collect();
        let mean = raw.iter().sum::<f64>() / 5.0;
        let w = reweigh_weights(&y, 1e-2).unwrap();
        for (a, b) in w.iter().zip(&raw) {
            assert!((a - b / mean).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() / 5.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let m = VaeModel::new(small_arch(), &mut SeededRng::new(2)).unwrap();
        let x = Matrix::from_fn(3, 3, |i, j| (i + j) as f64 * 0.1);
        let opts = TrainOptions {
            epochs: 0,
            ..TrainOptions::default()
        };
        let (trained, trace) = train(&m, &x, None, &LossConfig::default(), &opts, &mut SeededRng::new(1)).unwrap();
        assert_eq!(trained, m);
        assert!(trace.is_empty());
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let m = VaeModel::new(small_arch(), &mut SeededRng::new(12)).unwrap();
        let text = m.to_checkpoint();
        let back = VaeModel::from_checkpoint(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint(), text);
        assert!(VaeModel::from_checkpoint("{}").is_err());
        let tampered = text.replace("\"version\":1", "\"version\":2");
        assert!(VaeModel::from_checkpoint(&tampered).is_err());
    }
}
