//! Layer primitives with hand-derived backward passes.
//!
//! Batched layers take a matrix whose rows are independent samples (or, for
//! the sequence layers, time steps). Every `backward` *accumulates* parameter
//! gradients into a caller-provided gradient struct of the same type, so one
//! weight copy that is used twice receives the sum of both contributions.

use rand::Rng;

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches length")
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Affine map `y = W x + b` with `W: out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Dense {
            weight: uniform_matrix(out_dim, in_dim, glorot_bound(in_dim, out_dim), rng),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Dense {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    /// Row-wise forward: `Y = X Wᵀ + 1 bᵀ`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::dim("dense input", self.in_dim(), x.cols()));
        }
        let mut y = Matrix::zeros(x.rows(), self.out_dim());
        for row in 0..y.rows() {
            y.row_mut(row).copy_from_slice(&self.bias);
        }
        gemm(1.0, x, false, &self.weight, true, 1.0, &mut y);
        Ok(y)
    }

    /// Accumulates `dW += dYᵀ X`, `db += 1ᵀ dY` and returns `dX = dY W`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Dense) -> Matrix {
        self.accumulate_param_grads(x, dy, grad);
        let mut dx = Matrix::zeros(dy.rows(), self.in_dim());
        gemm(1.0, dy, false, &self.weight, false, 0.0, &mut dx);
        dx
    }

    /// Parameter gradients only, for layers whose input is not differentiable.
    pub fn accumulate_param_grads(&self, x: &Matrix, dy: &Matrix, grad: &mut Dense) {
        debug_assert_eq!(dy.cols(), self.out_dim());
        debug_assert_eq!(x.rows(), dy.rows());
        gemm(1.0, dy, true, x, false, 1.0, &mut grad.weight);
        for (g, s) in grad.bias.iter_mut().zip(dy.col_sums()) {
            *g += s;
        }
    }
}

/// Single-vector dense evaluation, `W x + b`.
pub fn dense_forward(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::dim("x", w.cols(), x.len()));
    }
    if w.rows() != b.len() {
        return Err(Error::dim("b", w.rows(), b.len()));
    }
    Ok(w
        .row_iter()
        .zip(b)
        .map(|(row, &bias)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bias)
        .collect())
}

// ---------------------------------------------------------------------------
// Conv1d (stride 1, same padding)
// ---------------------------------------------------------------------------

/// Temporal convolution with `kernels: out × (k·in)`; the tap-major layout
/// stores `kernels[o, j·in + c]` for tap `j` and input channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub kernels: Matrix,
    pub bias: Vec<f64>,
    pub width: usize,
}

/// Saved im2col buffer for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Matrix,
    lengths: Vec<usize>,
}

impl Conv1d {
    pub fn zeros(in_dim: usize, out_dim: usize, width: usize) -> Result<Self> {
        if width % 2 == 0 {
            return Err(Error::Config(format!("conv kernel width must be odd, got {width}")));
        }
        Ok(Conv1d {
            kernels: Matrix::zeros(out_dim, width * in_dim),
            bias: vec![0.0; out_dim],
            width,
        })
    }

    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, width: usize, rng: &mut R) -> Result<Self> {
        let mut c = Conv1d::zeros(in_dim, out_dim, width)?;
        c.kernels = uniform_matrix(out_dim, width * in_dim, glorot_bound(width * in_dim, width * out_dim), rng);
        Ok(c)
    }

    pub fn in_dim(&self) -> usize {
        self.kernels.cols() / self.width
    }

    pub fn out_dim(&self) -> usize {
        self.kernels.rows()
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if self.width % 2 == 0 {
            return Err(Error::Config(format!("conv kernel width must be odd, got {}", self.width)));
        }
        if x.cols() != self.in_dim() {
            return Err(Error::dim("conv input channels", self.in_dim(), x.cols()));
        }
        if x.rows() == 0 || self.width > 2 * x.rows() - 1 {
            return Err(Error::Config(format!(
                "conv kernel width {} exceeds 2T-1 for T={}",
                self.width,
                x.rows()
            )));
        }
        Ok(())
    }

    fn im2col_into(&self, x: &Matrix, cols: &mut Matrix, offset: usize) {
        let pad = self.width / 2;
        let d = x.cols();
        let t_len = x.rows() as isize;
        for t in 0..x.rows() {
            let dst = cols.row_mut(offset + t);
            for j in 0..self.width {
                let src = t as isize + j as isize - pad as isize;
                if (0..t_len).contains(&src) {
                    dst[j * d..(j + 1) * d].copy_from_slice(x.row(src as usize));
                }
            }
        }
    }

    /// Convolves each sequence independently and stacks the outputs row-wise.
    pub fn forward_many(&self, xs: &[&Matrix]) -> Result<(Matrix, ConvCache)> {
        let total: usize = xs.iter().map(|x| x.rows()).sum();
        let mut cols = Matrix::zeros(total, self.kernels.cols());
        let mut offset = 0;
        for x in xs {
            self.check(x)?;
            self.im2col_into(x, &mut cols, offset);
            offset += x.rows();
        }
        let mut y = Matrix::zeros(total, self.out_dim());
        for r in 0..total {
            y.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm(1.0, &cols, false, &self.kernels, true, 1.0, &mut y);
        let lengths = xs.iter().map(|x| x.rows()).collect();
        Ok((y, ConvCache { cols, lengths }))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_many(&[x])?.0)
    }

    /// Kernel/bias gradients only, for inputs that need no gradient.
    pub fn accumulate_param_grads(&self, cache: &ConvCache, dy: &Matrix, grad: &mut Conv1d) {
        gemm(1.0, dy, true, &cache.cols, false, 1.0, &mut grad.kernels);
        for (g, s) in grad.bias.iter_mut().zip(dy.col_sums()) {
            *g += s;
        }
    }

    /// Accumulates kernel/bias gradients; returns per-sequence input gradients.
    pub fn backward(&self, cache: &ConvCache, dy: &Matrix, grad: &mut Conv1d) -> Vec<Matrix> {
        self.accumulate_param_grads(cache, dy, grad);
        let mut dcols = Matrix::zeros(dy.rows(), self.kernels.cols());
        gemm(1.0, dy, false, &self.kernels, false, 0.0, &mut dcols);
        let d = self.in_dim();
        let pad = self.width / 2;
        let mut out = Vec::with_capacity(cache.lengths.len());
        let mut offset = 0;
        for &len in &cache.lengths {
            let mut dx = Matrix::zeros(len, d);
            for t in 0..len {
                let src_row = dcols.row(offset + t);
                for j in 0..self.width {
                    let src = t as isize + j as isize - pad as isize;
                    if (0..len as isize).contains(&src) {
                        let dst = dx.row_mut(src as usize);
                        for (a, &b) in dst.iter_mut().zip(&src_row[j * d..(j + 1) * d]) {
                            *a += b;
                        }
                    }
                }
            }
            offset += len;
            out.push(dx);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// BatchNorm1d
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization; statistics pool over every row handed to
/// `forward` (all time steps of all sequences in the batch).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub batch_stats: bool,
    /// Eval-mode forward ran before any running-statistics update.
    pub stale_stats: bool,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    /// Gradient buffer: all slots zero.
    pub fn zeros(dim: usize) -> Self {
        BatchNorm {
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Running statistics still hold their initial values (mean 0, var 1).
    pub fn running_stats_untouched(&self) -> bool {
        self.running_mean.iter().all(|&m| m == 0.0) && self.running_var.iter().all(|&v| v == 1.0)
    }

    pub fn forward(&self, x: &Matrix, batch_stats: bool) -> Result<(Matrix, BnCache)> {
        let d = self.dim();
        if x.cols() != d {
            return Err(Error::dim("batchnorm input channels", d, x.cols()));
        }
        let n = x.rows();
        let (mean, var) = if batch_stats {
            if n < 2 {
                return Err(Error::Config(format!(
                    "batchnorm in train mode needs at least 2 samples per channel, got {n}"
                )));
            }
            let mut mean = x.col_sums();
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; d];
            for row in x.row_iter() {
                for ((v, &xi), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let c = xi - m;
                    *v += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, d);
        let mut y = Matrix::zeros(n, d);
        for r in 0..n {
            let src = x.row(r);
            for c in 0..d {
                let h = (src[c] - mean[c]) * inv_std[c];
                xhat[(r, c)] = h;
                y[(r, c)] = self.gamma[c] * h + self.beta[c];
            }
        }
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                batch_stats,
                stale_stats: !batch_stats && self.running_stats_untouched(),
            },
        ))
    }

    pub fn backward(&self, cache: &BnCache, dy: &Matrix, grad: &mut BatchNorm) -> Matrix {
        let n = dy.rows();
        let d = self.dim();
        let mut sum_dy = vec![0.0; d];
        let mut sum_dy_xhat = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                let g = dy[(r, c)];
                sum_dy[c] += g;
                sum_dy_xhat[c] += g * cache.xhat[(r, c)];
            }
        }
        for c in 0..d {
            grad.gamma[c] += sum_dy_xhat[c];
            grad.beta[c] += sum_dy[c];
        }
        let mut dx = Matrix::zeros(n, d);
        if cache.batch_stats {
            let nf = n as f64;
            for r in 0..n {
                for c in 0..d {
                    let k = self.gamma[c] * cache.inv_std[c] / nf;
                    dx[(r, c)] = k * (nf * dy[(r, c)] - sum_dy[c] - cache.xhat[(r, c)] * sum_dy_xhat[c]);
                }
            }
        } else {
            for r in 0..n {
                for c in 0..d {
                    dx[(r, c)] = dy[(r, c)] * self.gamma[c] * cache.inv_std[c];
                }
            }
        }
        dx
    }

    /// Momentum update of the running statistics from one training batch of
    /// `count` rows; the variance is stored unbiased.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
        for c in 0..self.dim() {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c] * unbias;
        }
    }
}

// ---------------------------------------------------------------------------
// MaxPool1d (size 2, stride 2)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PoolCache {
    /// For each output element, the source row it came from.
    argmax: Vec<usize>,
    in_rows: usize,
    cols: usize,
}

/// Non-overlapping max pooling over time; a trailing odd step is dropped and
/// ties go to the earlier step.
pub fn maxpool1d(x: &Matrix) -> Result<(Matrix, PoolCache)> {
    if x.rows() < 2 {
        return Err(Error::SequenceTooShort { steps: x.rows(), min: 2 });
    }
    let out_rows = x.rows() / 2;
    let d = x.cols();
    let mut y = Matrix::zeros(out_rows, d);
    let mut argmax = vec![0; out_rows * d];
    for t in 0..out_rows {
        let (a, b) = (x.row(2 * t), x.row(2 * t + 1));
        for c in 0..d {
            let (v, src) = if b[c] > a[c] { (b[c], 2 * t + 1) } else { (a[c], 2 * t) };
            y[(t, c)] = v;
            argmax[t * d + c] = src;
        }
    }
    Ok((
        y,
        PoolCache {
            argmax,
            in_rows: x.rows(),
            cols: d,
        },
    ))
}

pub fn maxpool1d_backward(cache: &PoolCache, dy: &Matrix) -> Matrix {
    let d = cache.cols;
    let mut dx = Matrix::zeros(cache.in_rows, d);
    for t in 0..dy.rows() {
        for c in 0..d {
            dx[(cache.argmax[t * d + c], c)] += dy[(t, c)];
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
}

impl Activation {
    /// Applies the activation to one vector (softmax over the whole vector).
    pub fn apply(self, x: &[f64]) -> Vec<f64> {
        match self {
            Activation::Relu => x.iter().map(|&v| relu(v)).collect(),
            Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Activation::Tanh => x.iter().map(|v| v.tanh()).collect(),
            Activation::Softmax => softmax(x),
        }
    }

    /// Row-wise application to a batch.
    pub fn apply_rows(self, x: &Matrix) -> Matrix {
        match self {
            Activation::Softmax => softmax_rows(x),
            Activation::Relu => x.map(relu),
            Activation::Sigmoid => x.map(sigmoid),
            Activation::Tanh => x.map(f64::tanh),
        }
    }

    /// Vector-Jacobian product given the activation's *output* `y`.
    pub fn backward_rows(self, y: &Matrix, dy: &Matrix) -> Matrix {
        match self {
            Activation::Relu => y.zip_map(dy, |o, g| if o > 0.0 { g } else { 0.0 }),
            Activation::Sigmoid => y.zip_map(dy, |o, g| g * o * (1.0 - o)),
            Activation::Tanh => y.zip_map(dy, |o, g| g * (1.0 - o * o)),
            Activation::Softmax => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (a, g)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = a * (g - dot);
                    }
                }
                dx
            }
        }
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
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

/// Shift-by-max softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&softmax(x.row(r)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform_matrix(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn dense_hand_cases() {
        let id = Matrix::identity(2);
        assert_eq!(dense_forward(&[1.0, 0.0], &id, &[0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let w = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(dense_forward(&[1.0, 2.0], &w, &[0.5]).unwrap(), vec![3.5]);
    }

    #[test]
    fn dense_shape_error_names_operand() {
        let w = Matrix::zeros(2, 3);
        match dense_forward(&[1.0, 2.0], &w, &[0.0, 0.0]) {
            Err(Error::Dimension { operand, .. }) => assert_eq!(operand, "x"),
            other => panic!("unexpected {other:?}"),
        }
        match dense_forward(&[1.0, 2.0, 3.0], &w, &[0.0]) {
            Err(Error::Dimension { operand, .. }) => assert_eq!(operand, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dense_matches_triple_loop() {
        let w = random(3, 4, 1);
        let x = random(5, 4, 2);
        let b = vec![0.1, -0.2, 0.3];
        let layer = Dense { weight: w.clone(), bias: b.clone() };
        let y = layer.forward(&x).unwrap();
        for n in 0..5 {
            for o in 0..3 {
                let mut s = b[o];
                for i in 0..4 {
                    s += w[(o, i)] * x[(n, i)];
                }
                assert!((y[(n, o)] - s).abs() < 1e-12);
            }
        }
    }

    fn naive_conv(x: &Matrix, conv: &Conv1d) -> Matrix {
        let (t_len, d_in) = x.shape();
        let pad = conv.width as isize / 2;
        let mut out = Matrix::zeros(t_len, conv.out_dim());
        for t in 0..t_len as isize {
            for o in 0..conv.out_dim() {
                let mut s = conv.bias[o];
                for j in 0..conv.width as isize {
                    let src = t + j - pad;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    for c in 0..d_in {
                        s += conv.kernels[(o, j as usize * d_in + c)] * x[(src as usize, c)];
                    }
                }
                out[(t as usize, o)] = s;
            }
        }
        out
    }

    #[test]
    fn conv_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv1d {
            bias: vec![0.3, -0.1],
            ..Conv1d::glorot(3, 2, 3, &mut rng).unwrap()
        };
        let x = random(5, 3, 10);
        assert!(conv.forward(&x).unwrap().max_abs_diff(&naive_conv(&x, &conv)) < 1e-12);
    }

    #[test]
    fn conv_zero_and_delta_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv1d::glorot(2, 4, 3, &mut rng).unwrap();
        let y = conv.forward(&Matrix::zeros(6, 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut delta = Conv1d::zeros(1, 1, 3).unwrap();
        delta.kernels = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        let x = Matrix::from_vec(4, 1, vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        assert_eq!(delta.forward(&x).unwrap(), x);
    }

    #[test]
    fn conv_config_errors() {
        assert!(matches!(Conv1d::zeros(1, 1, 2), Err(Error::Config(_))));
        let conv = Conv1d::zeros(1, 1, 5).unwrap();
        // k = 5 > 2T - 1 = 3
        assert!(matches!(conv.forward(&Matrix::zeros(2, 1)), Err(Error::Config(_))));
        assert!(conv.forward(&Matrix::zeros(3, 1)).is_ok());
    }

    #[test]
    fn batchnorm_standardizes_and_matches_two_pass_oracle() {
        let x = random(12, 3, 5);
        let bn = BatchNorm {
            gamma: vec![1.5, 0.5, -1.0],
            beta: vec![0.1, 0.0, 2.0],
            ..BatchNorm::new(3)
        };
        let (y, _) = bn.forward(&x, true).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..12).map(|r| x[(r, c)]).collect();
            let mean = col.iter().sum::<f64>() / 12.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            for r in 0..12 {
                let expected = bn.gamma[c] * (x[(r, c)] - mean) / (var + BN_EPS).sqrt() + bn.beta[c];
                assert!((y[(r, c)] - expected).abs() < 1e-10);
            }
        }

        let (z, _) = BatchNorm::new(3).forward(&x, true).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..12).map(|r| z[(r, c)]).collect();
            let mean = col.iter().sum::<f64>() / 12.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-6);
            // The stabilizer shrinks the variance by var / (var + eps).
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_gamma_zero_yields_beta() {
        let bn = BatchNorm {
            gamma: vec![0.0, 0.0],
            beta: vec![0.7, -0.2],
            ..BatchNorm::new(2)
        };
        let (y, _) = bn.forward(&random(6, 2, 3), true).unwrap();
        for r in 0..6 {
            assert_eq!(y.row(r), &[0.7, -0.2]);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats_and_flags_staleness() {
        let bn = BatchNorm::new(2);
        let x = random(4, 2, 8);
        let (y, cache) = bn.forward(&x, false).unwrap();
        assert!(cache.stale_stats);
        assert!(y.max_abs_diff(&x.map(|v| v / (1.0 + BN_EPS).sqrt())) < 1e-15);

        let mut trained = bn.clone();
        trained.update_running(&[1.0, 2.0], &[4.0, 9.0], 2);
        assert!((trained.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((trained.running_var[1] - (0.9 + 0.1 * 18.0)).abs() < 1e-12);
        let (_, cache) = trained.forward(&x, false).unwrap();
        assert!(!cache.stale_stats);
    }

    #[test]
    fn batchnorm_train_needs_two_rows() {
        let bn = BatchNorm::new(2);
        assert!(bn.forward(&Matrix::zeros(1, 2), true).is_err());
    }

    #[test]
    fn maxpool_cases() {
        let x = Matrix::from_vec(4, 1, vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        assert_eq!(maxpool1d(&x).unwrap().0.data(), &[3.0, 2.0]);
        let c = Matrix::filled(6, 2, 1.25);
        assert_eq!(maxpool1d(&c).unwrap().0, Matrix::filled(3, 2, 1.25));
        assert_eq!(maxpool1d(&Matrix::zeros(7, 3)).unwrap().0.rows(), 3);
        assert!(matches!(maxpool1d(&Matrix::zeros(1, 3)), Err(Error::SequenceTooShort { .. })));
    }

    #[test]
    fn maxpool_ties_route_to_first_index() {
        let x = Matrix::from_vec(2, 1, vec![5.0, 5.0]).unwrap();
        let (_, cache) = maxpool1d(&x).unwrap();
        let dx = maxpool1d_backward(&cache, &Matrix::filled(1, 1, 1.0));
        assert_eq!(dx.data(), &[1.0, 0.0]);
    }

    #[test]
    fn activation_cases() {
        assert_eq!(sigmoid(0.0), 0.5);
        let s = softmax(&[0.0, 0.0, 0.0]);
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[1000.0, 0.0]);
        assert_eq!(s[0], 1.0);
        assert!(s[1] >= 0.0 && s[1] < 1e-300);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
        assert_eq!(Activation::Relu.apply(&[-1.0, 2.0]), vec![0.0, 2.0]);
    }
}
