//! Small dense-array kernel shared by the rest of the crate: special
//! functions, stable reductions, initializers, clipping and Adagrad.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix values".into()));
        }
        Ok(Self { rows, cols, values })
    }

    /// Entries drawn i.i.d. from U(low, high).
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, low: f64, high: f64, rng: &mut R) -> Self {
        let values = (0..rows * cols).map(|_| rng.random_range(low..high)).collect();
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// `out += self * x`
    #[inline]
    pub fn gemv_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.values.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ * y`
    #[inline]
    pub fn gemv_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yr, row) in y.iter().zip(self.values.chunks_exact(self.cols)) {
            if yr != 0.0 {
                axpy(yr, row, out);
            }
        }
    }

    /// `self += u vᵀ`
    #[inline]
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (&ur, row) in u.iter().zip(self.values.chunks_exact_mut(self.cols)) {
            if ur != 0.0 {
                axpy(ur, v, row);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without cancellation for large |x|.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Ψ(x), the derivative of ln Γ(x), for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("digamma undefined for x = {x}")));
    }
    Ok(digamma_unchecked(x))
}

/// Recurrence Ψ(x) = Ψ(x+1) − 1/x until x ≥ 6, then the asymptotic series.
pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli terms B_2n / (2n x^2n), n = 1..7
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - series
}

/// ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// log Σ exp(vᵢ), stable for large magnitudes.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput("log_sum_exp"));
    }
    Ok(log_sum_exp_unchecked(v))
}

#[inline]
pub(crate) fn log_sum_exp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

#[inline]
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Random matrix with orthonormal columns (rows ≥ cols) or orthonormal
/// rows (rows < cols), deterministic in `seed`.
pub fn orthogonal_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    orthogonal_matrix_with(rows, cols, &mut rng)
}

pub fn orthogonal_matrix_with<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    assert!(rows >= 1 && cols >= 1, "orthogonal_matrix needs positive dimensions");
    if rows < cols {
        return orthogonal_matrix_with(cols, rows, rng).transpose();
    }
    // Gaussian columns, orthonormalized by modified Gram-Schmidt (two passes).
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while columns.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for _ in 0..2 {
            for q in &columns {
                let proj = dot(q, &v);
                axpy(-proj, q, &mut v);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-12 {
            // numerically dependent draw
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        columns.push(v);
    }
    let mut m = DenseMatrix::zeros(rows, cols);
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

/// L2 norm over all blocks jointly.
pub fn global_norm(blocks: &[&mut [f64]]) -> f64 {
    blocks.iter().flat_map(|b| b.iter()).map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales every block by `clip / n` when the joint L2 norm `n` exceeds
/// `clip`. Returns the pre-clip norm. Non-finite entries are an error and
/// leave the gradients untouched.
pub fn clip_global_norm(blocks: &mut [&mut [f64]], clip: f64) -> Result<f64> {
    if !(clip > 0.0) {
        return Err(Error::Config(format!("clip must be positive, got {clip}")));
    }
    if blocks.iter().any(|b| b.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let norm = global_norm(blocks);
    if norm > clip {
        let scale = clip / norm;
        for b in blocks.iter_mut() {
            b.iter_mut().for_each(|g| *g *= scale);
        }
    }
    Ok(norm)
}

/// Per-coordinate Adagrad accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    accumulators: Vec<Vec<f64>>,
    learning_rate: f64,
    epsilon: f64,
}

impl AdagradState {
    pub fn new(block_sizes: impl IntoIterator<Item = usize>, learning_rate: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(epsilon > 0.0) {
            return Err(Error::Config(format!(
                "adagrad needs positive learning rate and epsilon, got {learning_rate}, {epsilon}"
            )));
        }
        Ok(Self {
            accumulators: block_sizes.into_iter().map(|n| vec![0.0; n]).collect(),
            learning_rate,
            epsilon,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.accumulators
    }

    /// One ascent step: `acc += g²; p += lr·g / (√acc + ε)`. The gradients
    /// are of an objective being maximized (the ELBO).
    pub fn ascend(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.accumulators.len() || grads.len() != self.accumulators.len() {
            return Err(Error::ShapeMismatch(format!(
                "adagrad has {} blocks, got {} params / {} grads",
                self.accumulators.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, acc) in self.accumulators.iter().enumerate() {
            if params[i].len() != acc.len() || grads[i].len() != acc.len() {
                return Err(Error::ShapeMismatch(format!("adagrad block {i} size differs")));
            }
        }
        let (lr, eps) = (self.learning_rate, self.epsilon);
        for ((acc, p), g) in self.accumulators.iter_mut().zip(params.iter_mut()).zip(grads) {
            for ((a, pi), &gi) in acc.iter_mut().zip(p.iter_mut()).zip(g.iter()) {
                if gi != 0.0 {
                    *a += gi * gi;
                    *pi += adagrad_delta(*a, gi, lr, eps);
                }
            }
        }
        Ok(())
    }
}

/// Parameter increment for one coordinate given its updated accumulator.
#[inline]
pub fn adagrad_delta(accumulator: f64, grad: f64, learning_rate: f64, epsilon: f64) -> f64 {
    learning_rate * grad / (accumulator.sqrt() + epsilon)
}

pub fn adagrad_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdagradState) -> Result<()> {
    state.ascend(params, grads)
}
