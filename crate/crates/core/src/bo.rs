//! The optimization loop: alternate VAE (re)training with latent-space BO
//! steps, and summaries across runs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::{maximize, AcquisitionConfig, AcquisitionKind, Optimizer};
use crate::benchmarks::BenchmarkProblem;
use crate::error::{Error, Result};
use crate::gp::{fit, select_hyperparams, HyperGrid};
use crate::linalg::Matrix;
use crate::record::{
    config_hash, Phase, PhaseTimings, QueryRecord, RecordFooter, RecordHeader, RecordLine, RoundSummary, RunRecord,
    RECORD_FORMAT, RECORD_VERSION,
};
use crate::rng::SeededRng;
use crate::vae::{train_cached, Architecture, HippoCache, LossConfig, TrainOptions, VaeModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Consistency-regularized VAE.
    #[default]
    #[serde(rename = "HIBBO")]
    Hibbo,
    /// Plain ELBO.
    #[serde(rename = "BASE")]
    Base,
    /// ELBO with rank-weighted reconstruction.
    #[serde(rename = "REWEIGH")]
    Reweigh,
    /// Consistency regularization and rank weighting.
    #[serde(rename = "HIBBO_RW")]
    HibboRw,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Hibbo, Method::Base, Method::Reweigh, Method::HibboRw];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Hibbo => "HIBBO",
            Method::Base => "BASE",
            Method::Reweigh => "REWEIGH",
            Method::HibboRw => "HIBBO_RW",
        }
    }

    /// The loss this method actually trains with, given the configured one.
    pub fn effective_loss(self, loss: &LossConfig) -> LossConfig {
        let (keep_consistency, reweigh) = match self {
            Method::Hibbo => (true, false),
            Method::Base => (false, false),
            Method::Reweigh => (false, true),
            Method::HibboRw => (true, true),
        };
        LossConfig {
            consistency_weight: if keep_consistency { loss.consistency_weight } else { 0.0 },
            reweigh,
            ..*loss
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::ConfigInvalid(format!(
                    "unknown method {s:?}; expected HIBBO, BASE, REWEIGH or HIBBO_RW"
                ))
            })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionSettings {
    pub kind: AcquisitionKind,
    /// Per-dimension latent bounds; `[−3, 3]` each when absent.
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub optimizer: Optimizer,
    /// Stop the current round when the best acquisition value is below this.
    pub threshold: Option<f64>,
}


impl AcquisitionSettings {
    pub fn resolve(&self, latent_dim: usize) -> AcquisitionConfig {
        AcquisitionConfig {
            kind: self.kind,
            lower: self.lower.clone().unwrap_or_else(|| vec![-3.0; latent_dim]),
            upper: self.upper.clone().unwrap_or_else(|| vec![3.0; latent_dim]),
            optimizer: self.optimizer,
            threshold: self.threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoConfig {
    /// Total objective evaluations, initial design included.
    pub budget: usize,
    /// BO steps between VAE retrains.
    pub frequency: usize,
    /// Ignored by problems that bring their own training set.
    pub initial_samples: usize,
    pub method: Method,
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub loss: LossConfig,
    /// First training on the initial design.
    pub pretrain: TrainOptions,
    /// Every later, warm-started training.
    pub retrain: TrainOptions,
    pub acquisition: AcquisitionSettings,
    pub gp_grid: HyperGrid,
    /// Fit the GP to `(y − mean)/std` instead of raw values.
    pub standardize_targets: bool,
    pub record_inputs: bool,
    pub record_latents: bool,
    /// Adds wall-clock phase timings to the footer; records then differ
    /// between otherwise identical runs.
    pub record_timings: bool,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            budget: 100,
            frequency: 5,
            initial_samples: 10,
            method: Method::Hibbo,
            latent_dim: 10,
            hidden_width: 50,
            hidden_layers: 5,
            loss: LossConfig::default(),
            pretrain: TrainOptions {
                epochs: 100,
                ..TrainOptions::default()
            },
            retrain: TrainOptions::default(),
            acquisition: AcquisitionSettings::default(),
            gp_grid: HyperGrid::default(),
            standardize_targets: true,
            record_inputs: true,
            record_latents: true,
            record_timings: false,
            seed: 0,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.into()));
        if self.budget < 1 {
            return bad("budget must be >= 1");
        }
        if self.frequency < 1 {
            return bad("frequency must be >= 1");
        }
        if self.initial_samples < 2 {
            return bad("initial_samples must be >= 2");
        }
        if self.latent_dim < 1 {
            return bad("latent_dim must be >= 1");
        }
        for opts in [&self.pretrain, &self.retrain] {
            if !(opts.learning_rate > 0.0 && opts.learning_rate.is_finite()) {
                return bad("learning_rate must be positive");
            }
        }
        if self.gp_grid.is_empty() {
            return Err(Error::EmptyGrid);
        }
        self.loss.validate()?;
        let acq = self.acquisition.resolve(self.latent_dim);
        acq.validate()?;
        if acq.dim() != self.latent_dim {
            return Err(Error::InvalidAcquisition(format!(
                "latent box has {} dimensions, latent_dim is {}",
                acq.dim(),
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Hash of everything except the seed.
    pub fn hash(&self, problem: &str) -> String {
        config_hash(&(
            problem,
            BoConfig {
                seed: 0,
                ..self.clone()
            },
        ))
    }
}

/// A finished run: the record plus the final model and data for diagnostics.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub model: VaeModel,
    /// Inputs in model coordinates, acquisition order.
    pub data: Matrix,
    pub values: Vec<f64>,
}

fn standardize(y: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    y.iter().map(|v| (v - mean) / sd).collect()
}

struct Clock {
    on: bool,
    t: PhaseTimings,
}

impl Clock {
    fn time<T>(&mut self, slot: fn(&mut PhaseTimings) -> &mut f64, f: impl FnOnce() -> T) -> T {
        if !self.on {
            return f();
        }
        let start = Instant::now();
        let out = f();
        *slot(&mut self.t) += start.elapsed().as_secs_f64();
        out
    }
}

/// Runs the full loop on `problem`.
///
/// Random streams are split from `config.seed` by purpose (initial design,
/// VAE initialization, round `j` training, query `q` acquisition), so two
/// methods on the same seed see the same initial design and the same model
/// initialization.
pub fn run(problem: &BenchmarkProblem, config: &BoConfig) -> Result<RunOutcome> {
    run_observed(problem, config, &mut |_| Ok(()))
}

/// [`run`], handing every record line to `observer` as soon as it is final.
/// An observer error aborts the run.
pub fn run_observed(
    problem: &BenchmarkProblem,
    config: &BoConfig,
    observer: &mut dyn FnMut(&RecordLine) -> Result<()>,
) -> Result<RunOutcome> {
    config.validate()?;
    let root = SeededRng::new(config.seed);
    let n0 = problem.fixed_design_size().unwrap_or(config.initial_samples);
    if config.budget < n0 {
        return Err(Error::BudgetExhaustedBeforeStart {
            budget: config.budget,
            initial: n0,
        });
    }
    let loss = config.method.effective_loss(&config.loss);
    let acq = config.acquisition.resolve(config.latent_dim);
    let mut clock = Clock {
        on: config.record_timings,
        t: PhaseTimings::default(),
    };

    let header = RecordHeader {
        format: RECORD_FORMAT.into(),
        version: RECORD_VERSION,
        problem: problem.name().into(),
        input_dim: problem.dim(),
        method: config.method.to_string(),
        seed: config.seed,
        config_hash: config.hash(problem.name()),
        budget: config.budget,
        frequency: config.frequency,
        initial_samples: n0,
    };
    observer(&RecordLine::Header(header.clone()))?;

    let design = problem.initial_design(n0, &mut root.split("design"))?;
    let mut data = Matrix::zeros(0, problem.dim());
    let mut values = Vec::with_capacity(config.budget);
    let mut queries = Vec::with_capacity(config.budget);
    let mut best = f64::NEG_INFINITY;
    let mut best_index = 0;
    for (i, x) in design.row_iter().enumerate() {
        let v = clock
            .time(|t| &mut t.evaluation, || problem.evaluate(x))
            .map_err(|e| e.at_query(i))?;
        if v > best {
            best = v;
            best_index = i;
        }
        data.push_row(&problem.to_model(x))?;
        values.push(v);
        let query = QueryRecord {
            index: i,
            phase: Phase::Initial,
            round: None,
            retrained: false,
            x: config.record_inputs.then(|| x.to_vec()),
            z: None,
            acquisition: None,
            value: v,
            best_so_far: best,
        };
        observer(&RecordLine::Query(query.clone()))?;
        queries.push(query);
    }

    let arch = Architecture {
        input_dim: problem.dim(),
        latent_dim: config.latent_dim,
        hidden_width: config.hidden_width,
        hidden_layers: config.hidden_layers,
        output: problem.output_activation(),
    };
    let mut model = VaeModel::new(arch, &mut root.split("vae-init"))?;
    let mut cache = HippoCache::default();
    let rounds = (config.budget - n0).div_ceil(config.frequency);
    let mut summaries = Vec::with_capacity(rounds);

    for round in 0..rounds {
        if queries.len() >= config.budget {
            break;
        }
        let opts = if round == 0 { &config.pretrain } else { &config.retrain };
        let next = queries.len();
        let (trained, trace) = clock
            .time(
                |t| &mut t.train,
                || {
                    train_cached(
                        &model,
                        &data,
                        Some(&values),
                        &loss,
                        opts,
                        &mut root.split_indexed("train", round as u64),
                        &mut cache,
                    )
                },
            )
            .map_err(|e| e.at_query(next))?;
        model = trained;
        log::info!(
            "{} seed {} round {round}: trained {} epochs, loss {}",
            config.method,
            config.seed,
            opts.epochs,
            trace.last().map_or("n/a".to_string(), |l| format!("{l:.6}"))
        );
        let mut latents = model.encode_mean_batch(&data).map_err(|e| e.at_query(next))?;
        let mut summary = RoundSummary {
            round,
            epochs: opts.epochs,
            final_loss: trace.last().copied(),
            queries: 0,
            below_threshold: false,
        };

        for _ in 0..config.frequency {
            let q = queries.len();
            if q >= config.budget {
                break;
            }
            let step = (|| -> Result<Option<(Vec<f64>, Vec<f64>, f64, f64)>> {
                let targets = if config.standardize_targets {
                    standardize(&values)
                } else {
                    values.clone()
                };
                let post = clock.time(
                    |t| &mut t.gp,
                    || {
                        let h = select_hyperparams(&latents, &targets, &config.gp_grid)?;
                        fit(&latents, &targets, &h)
                    },
                )?;
                let (z, a) = clock.time(
                    |t| &mut t.acquisition,
                    || maximize(&post, &acq, &mut root.split_indexed("acq", q as u64)),
                )?;
                if acq.threshold.is_some_and(|eta| a < eta) {
                    return Ok(None);
                }
                let xm = model.decode(&z)?;
                let x = problem.from_model(&xm);
                let v = clock.time(|t| &mut t.evaluation, || problem.evaluate(&x))?;
                Ok(Some((z, xm, a, v)))
            })()
            .map_err(|e| e.at_query(q))?;
            let Some((z, xm, a, v)) = step else {
                log::debug!("query {q}: acquisition below threshold, retraining");
                summary.below_threshold = true;
                break;
            };
            if v > best {
                best = v;
                best_index = q;
            }
            log::debug!("query {q}: value {v:.6}, best {best:.6}, acquisition {a:.6}");
            // Until the next retrain the GP sees the latent that produced x̂.
            latents.push_row(&z)?;
            data.push_row(&xm)?;
            values.push(v);
            let query = QueryRecord {
                index: q,
                phase: Phase::Bo,
                round: Some(round),
                retrained: summary.queries == 0,
                x: config.record_inputs.then(|| problem.from_model(&xm)),
                z: config.record_latents.then_some(z),
                acquisition: Some(a),
                value: v,
                best_so_far: best,
            };
            observer(&RecordLine::Query(query.clone()))?;
            queries.push(query);
            summary.queries += 1;
        }
        summaries.push(summary);
    }

    let footer = RecordFooter {
        evaluations: queries.len(),
        best_value: best,
        best_index,
        rounds: summaries,
        timings: config.record_timings.then_some(clock.t),
    };
    observer(&RecordLine::Footer(footer.clone()))?;
    let record = RunRecord {
        header,
        queries,
        footer,
    };
    Ok(RunOutcome {
        record,
        model,
        data,
        values,
    })
}

/// Sample quantile with linear interpolation between order statistics
/// (`h = (n − 1)p`). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    /// Best-so-far quartiles at every query index.
    pub curve: Vec<Quartiles>,
    pub final_best: Quartiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub problem: String,
    pub budget: usize,
    /// Sorted by method name.
    pub methods: Vec<MethodSummary>,
    /// Highest median final best; ties go to the first name.
    pub best_method: String,
}

/// Per-method quartiles of the best-so-far curves. Runs that stopped early
/// are extended with their last best value.
pub fn compare(records: &[RunRecord]) -> Result<Summary> {
    let first = records
        .first()
        .ok_or_else(|| Error::MixedProblems("no records to compare".into()))?;
    let key = |r: &RunRecord| (r.header.problem.clone(), r.header.input_dim, r.header.budget);
    for r in records {
        if key(r) != key(first) {
            return Err(Error::MixedProblems(format!(
                "{} (dim {}, budget {}) vs {} (dim {}, budget {})",
                first.header.problem,
                first.header.input_dim,
                first.header.budget,
                r.header.problem,
                r.header.input_dim,
                r.header.budget
            )));
        }
    }
    let mut groups: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.header.method.as_str()).or_default().push(r);
    }
    let mut methods = Vec::new();
    for (method, runs) in groups {
        let len = runs.iter().map(|r| r.queries.len()).max().unwrap_or(0);
        let curve = (0..len)
            .map(|i| {
                let col: Vec<f64> = runs
                    .iter()
                    .filter_map(|r| r.queries.get(i).or(r.queries.last()).map(|q| q.best_so_far))
                    .collect();
                Quartiles::of(&col)
            })
            .collect();
        let finals: Vec<f64> = runs.iter().map(|r| r.final_best()).collect();
        methods.push(MethodSummary {
            method: method.to_string(),
            runs: runs.len(),
            curve,
            final_best: Quartiles::of(&finals),
        });
    }
    let best_method = methods
        .iter()
        .fold(None::<&MethodSummary>, |acc, m| match acc {
            Some(b) if b.final_best.median >= m.final_best.median => Some(b),
            _ => Some(m),
        })
        .map(|m| m.method.clone())
        .expect("at least one method");
    Ok(Summary {
        problem: first.header.problem.clone(),
        budget: first.header.budget,
        methods,
        best_method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::sin_manifold;

    fn tiny(method: Method, budget: usize) -> BoConfig {
        BoConfig {
            budget,
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
                optimizer: Optimizer::Multistart { restarts: 2, steps: 6 },
                ..AcquisitionSettings::default()
            },
            gp_grid: HyperGrid {
                lengthscales: vec![0.5, 1.0],
                signal_variances: vec![1.0],
                noise_variances: vec![1e-4],
            },
            seed: 3,
            ..BoConfig::default()
        }
    }

    #[test]
    fn budget_equal_to_design_makes_no_queries() {
        let p = sin_manifold();
        let out = run(&p, &tiny(Method::Hibbo, 4)).unwrap();
        assert_eq!(out.record.queries.len(), 4);
        assert_eq!(out.record.bo_queries(), 0);
        assert_eq!(p.evaluations(), 4);
        assert!(matches!(
            run(&p, &tiny(Method::Hibbo, 3)),
            Err(Error::BudgetExhaustedBeforeStart { budget: 3, initial: 4 })
        ));
    }

    #[test]
    fn exact_budget_and_determinism() {
        let p = sin_manifold();
        let a = run(&p, &tiny(Method::Hibbo, 9)).unwrap().record;
        assert_eq!(p.evaluations(), 9);
        assert_eq!(a.queries.len(), 9);
        assert_eq!(a.footer.rounds.len(), 3);
        let b = run(&sin_manifold(), &tiny(Method::Hibbo, 9)).unwrap().record;
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        RunRecord::from_jsonl(&a.to_jsonl()).unwrap();
    }

    #[test]
    fn base_equals_hibbo_without_consistency() {
        let base = run(&sin_manifold(), &tiny(Method::Base, 7)).unwrap().record;
        let mut cfg = tiny(Method::Hibbo, 7);
        cfg.loss.consistency_weight = 0.0;
        let hibbo = run(&sin_manifold(), &cfg).unwrap().record;
        assert_eq!(base.trajectory_json(), hibbo.trajectory_json());
    }

    #[test]
    fn threshold_skips_to_retraining() {
        let mut cfg = tiny(Method::Base, 9);
        cfg.acquisition.threshold = Some(f64::MAX);
        let r = run(&sin_manifold(), &cfg).unwrap().record;
        assert_eq!(r.bo_queries(), 0);
        assert_eq!(r.footer.rounds.len(), 3);
        assert!(r.footer.rounds.iter().all(|s| s.below_threshold));
    }

    #[test]
    fn quantiles_and_compare() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.25), 1.75);
        assert_eq!(quantile(&[5.0], 0.75), 5.0);
        let r = run(&sin_manifold(), &tiny(Method::Base, 6)).unwrap().record;
        let s = compare(std::slice::from_ref(&r)).unwrap();
        assert_eq!(s.methods.len(), 1);
        let medians: Vec<f64> = s.methods[0].curve.iter().map(|q| q.median).collect();
        assert_eq!(medians, r.best_so_far());
        let mut other = r.clone();
        other.header.problem = "other".into();
        assert!(matches!(compare(&[r, other]), Err(Error::MixedProblems(_))));
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("hibo".parse::<Method>().is_err());
    }
}
