//! Benchmark objectives and synthetic data: Ackley, the binary shape-area
//! task, a 1-d manifold embedded in 3-d, and the paired sequence families
//! used to compare HiPPO memories.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;
use crate::vae::OutputActivation;

pub const ACKLEY_BOUND: f64 = 32.768;
pub const FIGURE2_POINTS: usize = 50;
pub const FIGURE2_NOISE: (f64, f64) = (0.1, 0.5);

type Objective = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Serializable description of a problem; together with a seed it fully
/// determines the [`BenchmarkProblem`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Ackley {
        dim: usize,
    },
    ShapeArea {
        #[serde(default = "default_side")]
        side: usize,
        #[serde(default = "default_training_size")]
        training_size: usize,
    },
    SinManifold,
}

fn default_side() -> usize {
    64
}

fn default_training_size() -> usize {
    64
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ProblemSpec::Ackley { dim: 0 } => Err(Error::ConfigInvalid("ackley dim must be >= 1".into())),
            ProblemSpec::ShapeArea { side, .. } if side < 8 => {
                Err(Error::ConfigInvalid(format!("shape side must be >= 8, got {side}")))
            }
            ProblemSpec::ShapeArea { training_size, .. } if training_size < 2 => {
                Err(Error::ConfigInvalid("shape training_size must be >= 2".into()))
            }
            _ => Ok(()),
        }
    }

    /// Builds the problem. `seed` only matters for generated training data.
    pub fn build(&self, seed: u64) -> Result<BenchmarkProblem> {
        self.validate()?;
        Ok(match *self {
            ProblemSpec::Ackley { dim } => ackley(dim),
            ProblemSpec::ShapeArea { side, training_size } => {
                shape_area_problem(side, training_size, &mut SeededRng::new(seed).split("shapes"))
            }
            ProblemSpec::SinManifold => sin_manifold(),
        })
    }
}

#[derive(Clone, Debug)]
enum Design {
    UniformBox,
    Fixed(Matrix),
    SinManifold { t_lo: f64, t_hi: f64 },
}

/// A maximization problem over a box, with an exact evaluation counter.
pub struct BenchmarkProblem {
    name: String,
    lower: Vec<f64>,
    upper: Vec<f64>,
    objective: Objective,
    optimum: Option<f64>,
    /// Inputs are divided by this before reaching the model.
    model_scale: f64,
    output: OutputActivation,
    design: Design,
    evaluations: AtomicU64,
}

impl fmt::Debug for BenchmarkProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BenchmarkProblem")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("evaluations", &self.evaluations())
            .finish_non_exhaustive()
    }
}

impl BenchmarkProblem {
    pub fn new(
        name: impl Into<String>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        objective: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
            objective: Arc::new(objective),
            optimum: None,
            model_scale: 1.0,
            output: OutputActivation::Linear,
            design: Design::UniformBox,
            evaluations: AtomicU64::new(0),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn optimum(&self) -> Option<f64> {
        self.optimum
    }

    /// Decoder output squashing suited to this problem's inputs.
    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    /// Evaluates the objective and counts the call.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let v = (self.objective)(x);
        if !v.is_finite() {
            return Err(Error::NonFinite("objective value"));
        }
        Ok(v)
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Maps an input to the coordinates the VAE is trained on.
    pub fn to_model(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v / self.model_scale).collect()
    }

    pub fn from_model(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v * self.model_scale).collect()
    }

    /// Training set for generated-data problems, `None` for box problems.
    pub fn training_set(&self) -> Option<&Matrix> {
        match &self.design {
            Design::Fixed(m) => Some(m),
            _ => None,
        }
    }

    /// Size of the initial design when the problem fixes it.
    pub fn fixed_design_size(&self) -> Option<usize> {
        self.training_set().map(Matrix::rows)
    }

    /// `n` starting inputs (rows) in original coordinates, not yet evaluated.
    pub fn initial_design(&self, n: usize, rng: &mut SeededRng) -> Result<Matrix> {
        match &self.design {
            Design::UniformBox => Ok(Matrix::from_fn(n, self.dim(), |_, j| {
                rng.uniform(self.lower[j], self.upper[j])
            })),
            Design::SinManifold { t_lo, t_hi } => {
                let mut m = Matrix::zeros(n, 3);
                for i in 0..n {
                    m.row_mut(i)
                        .copy_from_slice(&sin_manifold_point(rng.uniform(*t_lo, *t_hi)));
                }
                Ok(m)
            }
            Design::Fixed(m) if m.rows() == n => Ok(m.clone()),
            Design::Fixed(m) => Err(Error::ConfigInvalid(format!(
                "{} uses its {}-image training set as the initial design, got initial_samples = {n}",
                self.name,
                m.rows()
            ))),
        }
    }
}

/// Standard Ackley (a = 20, b = 0.2, c = 2π); minimum 0 at the origin.
pub fn ackley_value(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let sq = x.iter().map(|v| v * v).sum::<f64>() / d;
    let cos = x.iter().map(|v| (2.0 * std::f64::consts::PI * v).cos()).sum::<f64>() / d;
    -20.0 * (-0.2 * sq.sqrt()).exp() - cos.exp() + 20.0 + std::f64::consts::E
}

/// Negated Ackley on `[−32.768, 32.768]^d`; the model sees `x / 32.768`.
pub fn ackley(d: usize) -> BenchmarkProblem {
    let mut p = BenchmarkProblem::new(
        format!("ackley-{d}"),
        vec![-ACKLEY_BOUND; d],
        vec![ACKLEY_BOUND; d],
        |x| -ackley_value(x),
    );
    p.optimum = Some(0.0);
    p.model_scale = ACKLEY_BOUND;
    p
}

/// Fraction of pixels at or above 0.5.
pub fn lit_fraction(image: &[f64]) -> f64 {
    image.iter().filter(|&&v| v >= 0.5).count() as f64 / image.len() as f64
}

/// `side x side` image with a filled axis-aligned `h x w` rectangle whose
/// top-left pixel is `(top, left)`. Parts outside the canvas are dropped.
pub fn rectangle_image(side: usize, top: usize, left: usize, h: usize, w: usize) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    for r in top..(top + h).min(side) {
        for c in left..(left + w).min(side) {
            img[r * side + c] = 1.0;
        }
    }
    img
}

/// Filled axis-aligned ellipse; a pixel is lit when its center is inside.
pub fn ellipse_image(side: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let dy = (r as f64 + 0.5 - cy) / ry;
            let dx = (c as f64 + 0.5 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                img[r * side + c] = 1.0;
            }
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
        }
    }
}

pub const SHAPE_AREA_RANGE: (f64, f64) = (0.05, 0.40);

/// Random rectangle or ellipse covering a fraction of the canvas inside
/// [`SHAPE_AREA_RANGE`]; redraws until the pixel count lands in range.
pub fn random_shape(side: usize, rng: &mut SeededRng) -> (ShapeKind, Vec<f64>) {
    let (lo, hi) = SHAPE_AREA_RANGE;
    let s = side as f64;
    loop {
        let target = rng.uniform(lo, hi) * s * s;
        let aspect = rng.uniform(0.5f64.ln(), 2f64.ln()).exp();
        let (kind, img) = if rng.uniform(0.0, 1.0) < 0.5 {
            let h = ((target * aspect).sqrt().round() as usize).clamp(1, side);
            let w = ((target / h as f64).round() as usize).clamp(1, side);
            let top = rng.index(side - h + 1);
            let left = rng.index(side - w + 1);
            (ShapeKind::Rectangle, rectangle_image(side, top, left, h, w))
        } else {
            let ry = ((target * aspect / std::f64::consts::PI).sqrt()).min(s / 2.0);
            let rx = (target / (std::f64::consts::PI * ry)).min(s / 2.0);
            let cy = rng.uniform(ry, s - ry);
            let cx = rng.uniform(rx, s - rx);
            (ShapeKind::Ellipse, ellipse_image(side, cy, cx, ry, rx))
        };
        let area = lit_fraction(&img);
        if (lo..=hi).contains(&area) {
            return (kind, img);
        }
    }
}

/// Shape dataset with the kind of each row.
pub fn shape_dataset(side: usize, n: usize, rng: &mut SeededRng) -> (Matrix, Vec<ShapeKind>) {
    let mut m = Matrix::zeros(n, side * side);
    let mut kinds = Vec::with_capacity(n);
    for i in 0..n {
        let (k, img) = random_shape(side, rng);
        m.row_mut(i).copy_from_slice(&img);
        kinds.push(k);
    }
    (m, kinds)
}

/// Maximize the lit fraction of a `side x side` image (flattened row-major,
/// intensities in `[0, 1]`), starting from `training_size` random shapes.
pub fn shape_area_problem(side: usize, training_size: usize, rng: &mut SeededRng) -> BenchmarkProblem {
    let (train, _) = shape_dataset(side, training_size, rng);
    let n = side * side;
    let mut p = BenchmarkProblem::new(format!("shape-area-{side}"), vec![0.0; n], vec![1.0; n], lit_fraction);
    p.optimum = Some(1.0);
    p.output = OutputActivation::Sigmoid;
    p.design = Design::Fixed(train);
    p
}

pub const SIN_MANIFOLD_T: (f64, f64) = (-2.0, 2.0);
pub const SIN_MANIFOLD_TARGET_T: f64 = 1.0;

pub fn sin_manifold_point(t: f64) -> [f64; 3] {
    [t.sin(), (2.0 * t).sin(), t]
}

/// Points `[sin t, sin 2t, t]`, `t ∈ [−2, 2]`; the objective is the negative
/// squared distance to the manifold point at `t = 1`.
pub fn sin_manifold() -> BenchmarkProblem {
    let target = sin_manifold_point(SIN_MANIFOLD_TARGET_T);
    let mut p = BenchmarkProblem::new(
        "sin-manifold",
        vec![-1.0, -1.0, SIN_MANIFOLD_T.0],
        vec![1.0, 1.0, SIN_MANIFOLD_T.1],
        move |x| -crate::linalg::squared_distance(x, &target),
    );
    p.optimum = Some(0.0);
    p.design = Design::SinManifold {
        t_lo: SIN_MANIFOLD_T.0,
        t_hi: SIN_MANIFOLD_T.1,
    };
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaseFunction {
    Sin,
    Cos,
    Tanh,
}

impl BaseFunction {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            BaseFunction::Sin => t.sin(),
            BaseFunction::Cos => t.cos(),
            BaseFunction::Tanh => t.tanh(),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            BaseFunction::Sin => "sin",
            BaseFunction::Cos => "cos",
            BaseFunction::Tanh => "tanh",
        }
    }
}

/// A pair of base functions for the noisy `x`/`y` sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Family {
    pub x: BaseFunction,
    pub y: BaseFunction,
}

impl Family {
    pub const ALL: [&'static str; 6] = ["sin-sin", "sin-tanh", "cos-cos", "cos-tanh", "tanh-tanh", "tanh-cos"];

    pub fn is_matched(&self) -> bool {
        self.x == self.y
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.x.as_str(), self.y.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let f = |name: &str| match name {
            "sin" => Some(BaseFunction::Sin),
            "cos" => Some(BaseFunction::Cos),
            "tanh" => Some(BaseFunction::Tanh),
            _ => None,
        };
        if !Family::ALL.contains(&s) {
            return Err(Error::ConfigInvalid(format!(
                "unknown family {s:?}; expected one of {}",
                Family::ALL.join(", ")
            )));
        }
        let (a, b) = s.split_once('-').expect("listed families contain '-'");
        Ok(Family {
            x: f(a).expect("listed"),
            y: f(b).expect("listed"),
        })
    }
}

/// Uniform grid over `[0, 2π]` shared by every family.
pub fn figure2_grid(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| 2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64)
        .collect()
}

/// Two 50-point sequences: `x = f_x(t) + 0.1ε`, `y = f_y(t) + 0.5ε′`.
pub fn figure2_sequences(family: Family, seed: u64) -> (Vec<f64>, Vec<f64>) {
    figure2_sequences_with_noise(family, seed, FIGURE2_NOISE)
}

pub fn figure2_sequences_with_noise(family: Family, seed: u64, noise: (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    let root = SeededRng::new(seed);
    let mut rx = root.split("fig2/x");
    let mut ry = root.split("fig2/y");
    let t = figure2_grid(FIGURE2_POINTS);
    let x = t.iter().map(|&t| family.x.eval(t) + noise.0 * rx.normal()).collect();
    let y = t.iter().map(|&t| family.y.eval(t) + noise.1 * ry.normal()).collect();
    (x, y)
}
