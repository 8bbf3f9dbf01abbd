//! HiPPO-LegS memory.
//!
//! A sequence `x_1, x_2, ...` is summarized by the coefficients `c_t` of its
//! projection onto scaled Legendre polynomials over the whole history
//! `[0, t]`. The coefficients follow the linear ODE `dc/dt = (1/t)(A c + B x)`
//! which is discretized with the bilinear transform and advanced one sample at
//! a time.
//!
//! Sample `t` is taken to hold on `(t-1, t]`. Under the LegS scaling the ODE is
//! time-invariant in `log t`, so the default [`StepRule::LogElapsed`] uses the
//! elapsed log-time `ln(t/(t-1))` as the bilinear step and takes the first
//! step at its exact limit (`c_1 = x_1 e_0`). [`StepRule::Reciprocal`] is the
//! common `Δ = 1/t` variant.
//!
//! Vector-valued sequences are encoded channel-wise with a shared `(A, B)`, so
//! a state is a `order x channels` matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lower_solve_matrix, triangular_solve, Matrix};

/// Default memory order.
pub const DEFAULT_ORDER: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Bilinear step `ln(t/(t-1))`; exact projection at `t = 1`.
    #[default]
    LogElapsed,
    /// Bilinear step `1/t` at every step, including the first.
    Reciprocal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HippoOperator {
    order: usize,
    a: Matrix,
    b: Vec<f64>,
    rule: StepRule,
}

impl HippoOperator {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn family(&self) -> &'static str {
        "LegS"
    }

    pub fn rule(&self) -> StepRule {
        self.rule
    }

    pub fn with_rule(mut self, rule: StepRule) -> Self {
        self.rule = rule;
        self
    }
}

/// LegS `(A, B)` of the given order:
/// `A[n][k] = -√(2n+1)√(2k+1)` below the diagonal, `A[n][n] = -(n+1)`,
/// `B[n] = √(2n+1)`.
pub fn build_legs_operator(order: usize) -> Result<HippoOperator> {
    if order == 0 {
        return Err(Error::InvalidOrder);
    }
    let a = Matrix::from_fn(order, order, |n, k| match n.cmp(&k) {
        std::cmp::Ordering::Greater => -((2 * n + 1) as f64).sqrt() * ((2 * k + 1) as f64).sqrt(),
        std::cmp::Ordering::Equal => -((n + 1) as f64),
        std::cmp::Ordering::Less => 0.0,
    });
    let b = (0..order).map(|n| ((2 * n + 1) as f64).sqrt()).collect();
    Ok(HippoOperator {
        order,
        a,
        b,
        rule: StepRule::default(),
    })
}

/// Bilinear discretization for an explicit step `delta`:
/// `Ā = (I − Δ/2·A)⁻¹(I + Δ/2·A)`, `B̄ = (I − Δ/2·A)⁻¹ Δ·B`.
pub fn discretize(op: &HippoOperator, delta: f64) -> (Matrix, Vec<f64>) {
    let n = op.order;
    let half = 0.5 * delta;
    let lhs = Matrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - half * op.a[(i, j)]);
    let rhs = Matrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) + half * op.a[(i, j)]);
    let b: Vec<f64> = op.b.iter().map(|v| delta * v).collect();
    // `lhs` is lower-triangular with diagonal 1 + Δ(n+1)/2 > 0.
    let a_bar = lower_solve_matrix(&lhs, &rhs).expect("bilinear lhs is unit-shifted lower-triangular");
    let b_bar = triangular_solve(&lhs, &b, false).expect("bilinear lhs is unit-shifted lower-triangular");
    (a_bar, b_bar)
}

/// `(Ā_t, B̄_t)` for step `t ≥ 1` under the operator's [`StepRule`].
pub fn discretize_step(op: &HippoOperator, t: usize) -> Result<(Matrix, Vec<f64>)> {
    if t == 0 {
        return Err(Error::ShapeMismatch("HiPPO steps are numbered from 1".into()));
    }
    match op.rule {
        StepRule::Reciprocal => Ok(discretize(op, 1.0 / t as f64)),
        StepRule::LogElapsed if t == 1 => {
            // Δ → ∞: the state forgets everything and holds the projection
            // -A⁻¹B·x of a constant signal.
            let neg_b: Vec<f64> = op.b.iter().map(|v| -v).collect();
            let b_bar = triangular_solve(&op.a, &neg_b, false)?;
            Ok((Matrix::zeros(op.order, op.order), b_bar))
        }
        StepRule::LogElapsed => Ok(discretize(op, (t as f64 / (t - 1) as f64).ln())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HippoState {
    coeffs: Matrix,
    step: usize,
}

impl HippoState {
    /// Fresh state whose channel count is fixed by the first input.
    pub fn empty(order: usize) -> Self {
        Self {
            coeffs: Matrix::zeros(order, 0),
            step: 0,
        }
    }

    pub fn zeros(order: usize, channels: usize) -> Self {
        Self {
            coeffs: Matrix::zeros(order, channels),
            step: 0,
        }
    }

    pub fn from_parts(coeffs: Matrix, step: usize) -> Result<Self> {
        if !coeffs.is_finite() {
            return Err(Error::NonFinite("HippoState::from_parts"));
        }
        Ok(Self { coeffs, step })
    }

    pub fn coeffs(&self) -> &Matrix {
        &self.coeffs
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn order(&self) -> usize {
        self.coeffs.rows()
    }

    pub fn channels(&self) -> usize {
        self.coeffs.cols()
    }
}

fn advance(a_bar: &Matrix, b_bar: &[f64], state: &HippoState, x: &[f64]) -> HippoState {
    let mut next = a_bar.matmul(&state.coeffs);
    for (n, &bn) in b_bar.iter().enumerate() {
        for (c, &xj) in next.row_mut(n).iter_mut().zip(x) {
            *c += bn * xj;
        }
    }
    HippoState {
        coeffs: next,
        step: state.step + 1,
    }
}

/// `c_{t+1}[:, j] = Ā_{t+1} c_t[:, j] + B̄_{t+1} x[j]` for every channel `j`.
pub fn hippo_step(op: &HippoOperator, state: &HippoState, x: &[f64]) -> Result<HippoState> {
    if state.order() != op.order {
        return Err(Error::ShapeMismatch(format!(
            "state order {} vs operator order {}",
            state.order(),
            op.order
        )));
    }
    let state = if state.step == 0 && state.channels() == 0 {
        HippoState::zeros(op.order, x.len())
    } else {
        state.clone()
    };
    if x.len() != state.channels() {
        return Err(Error::ChannelMismatch {
            expected: state.channels(),
            got: x.len(),
        });
    }
    let (a_bar, b_bar) = discretize_step(op, state.step + 1)?;
    Ok(advance(&a_bar, &b_bar, &state, x))
}

/// Folds [`hippo_step`] over `xs` from a zero state, keeping every
/// intermediate state. `trajectory[i]` has consumed `xs[0..=i]`.
pub fn encode_sequence(op: &HippoOperator, xs: &[Vec<f64>]) -> Result<(HippoState, Vec<HippoState>)> {
    let first = xs.first().ok_or(Error::EmptySequence)?;
    let channels = first.len();
    let mut state = HippoState::zeros(op.order, channels);
    let mut trajectory = Vec::with_capacity(xs.len());
    for (i, x) in xs.iter().enumerate() {
        if x.len() != channels {
            return Err(Error::ChannelMismatch {
                expected: channels,
                got: x.len(),
            });
        }
        let (a_bar, b_bar) = discretize_step(op, i + 1)?;
        state = advance(&a_bar, &b_bar, &state, x);
        trajectory.push(state.clone());
    }
    Ok((state, trajectory))
}

/// Same as [`encode_sequence`] with one time step per matrix row.
pub fn encode_rows(op: &HippoOperator, xs: &Matrix) -> Result<(HippoState, Vec<HippoState>)> {
    let rows: Vec<Vec<f64>> = xs.row_iter().map(<[f64]>::to_vec).collect();
    encode_sequence(op, &rows)
}

/// Scaled shifted Legendre basis `√(2n+1)·P_n(2s−1)` for `n < order`,
/// orthonormal on `[0, 1]`.
pub fn legendre_basis(order: usize, s: f64) -> Vec<f64> {
    let x = 2.0 * s - 1.0;
    let mut p = Vec::with_capacity(order);
    let (mut prev, mut cur) = (0.0, 1.0);
    for n in 0..order {
        p.push(cur);
        let next = ((2 * n + 1) as f64 * x * cur - n as f64 * prev) / (n + 1) as f64;
        prev = cur;
        cur = next;
    }
    p.iter()
        .enumerate()
        .map(|(n, v)| v * ((2 * n + 1) as f64).sqrt())
        .collect()
}

/// Evaluates `Σ_n c[n][j]·L̃_n(s)` at normalized times `s ∈ [0, 1]`
/// (`s = τ/t`). Returns a `points x channels` matrix.
pub fn reconstruct_signal(op: &HippoOperator, state: &HippoState, points: &[f64]) -> Result<Matrix> {
    if state.step == 0 {
        return Err(Error::EmptyState);
    }
    if state.order() != op.order {
        return Err(Error::ShapeMismatch(format!(
            "state order {} vs operator order {}",
            state.order(),
            op.order
        )));
    }
    if let Some(&bad) = points.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::ShapeMismatch(format!("query point {bad} outside [0, 1]")));
    }
    let basis = Matrix::from_rows(&points.iter().map(|&s| legendre_basis(op.order, s)).collect::<Vec<_>>())?;
    Ok(basis.matmul(&state.coeffs))
}

/// Frobenius distance between two memories of the same shape.
pub fn hippo_distance(a: &HippoState, b: &HippoState) -> Result<f64> {
    if a.coeffs.shape() != b.coeffs.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.coeffs.shape(),
            b.coeffs.shape()
        )));
    }
    Ok(a.coeffs.sub(&b.coeffs).frobenius_norm())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    Linear,
    /// `(aᵀb + offset)^degree`
    Polynomial {
        degree: u32,
        offset: f64,
    },
    Rbf {
        lengthscale: f64,
    },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => crate::linalg::dot(a, b),
            Kernel::Polynomial { degree, offset } => (crate::linalg::dot(a, b) + offset).powi(degree as i32),
            Kernel::Rbf { lengthscale } => {
                (-crate::linalg::squared_distance(a, b) / (2.0 * lengthscale * lengthscale)).exp()
            }
        }
    }

    /// Full `n x n` kernel matrix over `xs`.
    pub fn matrix(&self, xs: &[Vec<f64>]) -> Matrix {
        Matrix::from_fn(xs.len(), xs.len(), |i, j| self.eval(&xs[i], &xs[j]))
    }
}

/// `D_x = (1/N²) Σ_m Σ_n k(x_m, x_n)`.
pub fn average_pair_kernel(xs: &[Vec<f64>], kernel: &Kernel) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = xs.len() as f64;
    let total: f64 = xs
        .iter()
        .map(|a| xs.iter().map(|b| kernel.eval(a, b)).sum::<f64>())
        .sum();
    Ok(total / (n * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposition1Report {
    pub hippo_distance: f64,
    pub kernel_gap: f64,
}

/// Compares two sequences both ways: final-memory distance at `order` and the
/// gap `|D_x − D_y|` of their average pair kernels under a polynomial kernel
/// of `degree` (offset 1).
pub fn proposition1_check(xs: &[Vec<f64>], ys: &[Vec<f64>], order: usize, degree: u32) -> Result<Proposition1Report> {
    if order <= degree as usize {
        return Err(Error::OrderTooLow { order, degree });
    }
    let op = build_legs_operator(order)?;
    let (cx, _) = encode_sequence(&op, xs)?;
    let (cy, _) = encode_sequence(&op, ys)?;
    let kernel = Kernel::Polynomial { degree, offset: 1.0 };
    let dx = average_pair_kernel(xs, &kernel)?;
    let dy = average_pair_kernel(ys, &kernel)?;
    Ok(Proposition1Report {
        hippo_distance: hippo_distance(&cx, &cy)?,
        kernel_gap: (dx - dy).abs(),
    })
}

/// Linear response of the memory trajectory to a sequence of inputs.
///
/// By linearity, the state after step `i` (0-based) is
/// `c_i = Σ_{j ≤ i} M_i[:, j] · x_jᵀ`. `M_i` is `order x (i+1)` and satisfies
/// `M_i = [Ā_{i+1} M_{i-1}, B̄_{i+1}]`. Blocks depend only on the step
/// index, so the response for a longer sequence extends the shorter one.
#[derive(Clone, Debug)]
pub struct TrajectoryResponse {
    op: HippoOperator,
    steps: Vec<(Matrix, Vec<f64>)>,
    blocks: Vec<Matrix>,
}

impl TrajectoryResponse {
    pub fn new(op: &HippoOperator) -> Self {
        Self {
            op: op.clone(),
            steps: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn operator(&self) -> &HippoOperator {
        &self.op
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Makes sure responses for the first `n` steps are available.
    pub fn extend_to(&mut self, n: usize) {
        let order = self.op.order;
        while self.blocks.len() < n {
            let i = self.blocks.len();
            let (a_bar, b_bar) = discretize_step(&self.op, i + 1).expect("step index ≥ 1");
            let mut block = Matrix::zeros(order, i + 1);
            if let Some(prev) = self.blocks.last() {
                let carried = a_bar.matmul(prev);
                for r in 0..order {
                    block.row_mut(r)[..i].copy_from_slice(carried.row(r));
                }
            }
            for (r, &b) in b_bar.iter().enumerate() {
                block[(r, i)] = b;
            }
            self.steps.push((a_bar, b_bar));
            self.blocks.push(block);
        }
    }

    /// `(Ā_t, B̄_t)` for `t = step + 1`.
    pub fn step(&self, step: usize) -> &(Matrix, Vec<f64>) {
        &self.steps[step]
    }

    pub fn block(&self, step: usize) -> &Matrix {
        &self.blocks[step]
    }

    /// Stacks `M_0..M_{n-1}` into a `(n·order) x n` matrix, zero-padded on
    /// the right.
    pub fn stacked(&self, n: usize) -> Matrix {
        let order = self.op.order;
        let mut out = Matrix::zeros(n * order, n);
        for (i, block) in self.blocks[..n].iter().enumerate() {
            for r in 0..order {
                out.row_mut(i * order + r)[..=i].copy_from_slice(block.row(r));
            }
        }
        out
    }
}
