//! Local temporal refinement: conv(k=3, same) → batchnorm → relu → maxpool(2).

use rand::Rng;

use crate::error::Result;
use crate::numerics::layers::{maxpool1d, maxpool1d_backward, BnCache, ConvCache, PoolCache};
use crate::numerics::params::{Params, Slot, SlotMut};
use crate::numerics::{Activation, BatchNorm, Conv1d, Matrix};

pub const REFINER_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Refiner {
    pub conv: Conv1d,
    pub bn: BatchNorm,
}

/// Intermediates of one refiner pass over a batch of sequences.
#[derive(Debug, Clone)]
pub struct RefinerTrace {
    conv: ConvCache,
    bn: BnCache,
    activated: Matrix,
    pools: Vec<PoolCache>,
    in_lengths: Vec<usize>,
    /// Pooled lengths `floor(T/2)` per sequence.
    pub lengths: Vec<usize>,
    /// Stacked refined rows of every sequence (`Σ T'' × d'`).
    pub output: Matrix,
}

impl RefinerTrace {
    pub fn batch_stats(&self) -> Option<(&[f64], &[f64], usize)> {
        self.bn
            .batch_stats
            .then(|| (self.bn.batch_mean.as_slice(), self.bn.batch_var.as_slice(), self.activated.rows()))
    }

    pub fn stale_stats(&self) -> bool {
        self.bn.stale_stats
    }

    /// Start row of every sequence inside `output`.
    pub fn offsets(&self) -> Vec<usize> {
        offsets(&self.lengths)
    }
}

pub(crate) fn offsets(lengths: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    lengths
        .iter()
        .map(|&l| {
            let o = acc;
            acc += l;
            o
        })
        .collect()
}

impl Refiner {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Refiner {
            conv: Conv1d::glorot(d_in, d_out, REFINER_KERNEL, rng)?,
            bn: BatchNorm::new(d_out),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.conv.out_dim()
    }

    pub fn forward(&self, xs: &[&Matrix], batch_stats: bool) -> Result<RefinerTrace> {
        for x in xs {
            if x.rows() < 2 {
                return Err(crate::Error::SequenceTooShort { steps: x.rows(), min: 2 });
            }
        }
        let (conv_out, conv) = self.conv.forward_many(xs)?;
        let (normed, bn) = self.bn.forward(&conv_out, batch_stats)?;
        let activated = Activation::Relu.apply_rows(&normed);
        let in_lengths: Vec<usize> = xs.iter().map(|x| x.rows()).collect();
        let mut pools = Vec::with_capacity(xs.len());
        let mut pooled = Vec::with_capacity(xs.len());
        let mut start = 0;
        for &len in &in_lengths {
            let (y, cache) = maxpool1d(&activated.slice_rows(start, start + len))?;
            start += len;
            pooled.push(y);
            pools.push(cache);
        }
        let lengths = pooled.iter().map(Matrix::rows).collect();
        let output = Matrix::vcat(&pooled.iter().collect::<Vec<_>>())?;
        Ok(RefinerTrace {
            conv,
            bn,
            activated,
            pools,
            in_lengths,
            lengths,
            output,
        })
    }

    /// Parameter gradients from `d_output` (same shape as `trace.output`).
    pub fn backward(&self, trace: &RefinerTrace, d_output: &Matrix, grad: &mut Refiner) {
        let d_conv = self.backward_to_conv(trace, d_output, grad);
        self.conv.accumulate_param_grads(&trace.conv, &d_conv, &mut grad.conv);
    }

    /// Like [`Refiner::backward`] but also returns per-sequence input gradients.
    pub fn backward_with_input(&self, trace: &RefinerTrace, d_output: &Matrix, grad: &mut Refiner) -> Vec<Matrix> {
        let d_conv = self.backward_to_conv(trace, d_output, grad);
        self.conv.backward(&trace.conv, &d_conv, &mut grad.conv)
    }

    fn backward_to_conv(&self, trace: &RefinerTrace, d_output: &Matrix, grad: &mut Refiner) -> Matrix {
        let mut d_act_parts = Vec::with_capacity(trace.pools.len());
        let mut start = 0;
        for (pool, &len) in trace.pools.iter().zip(&trace.lengths) {
            d_act_parts.push(maxpool1d_backward(pool, &d_output.slice_rows(start, start + len)));
            start += len;
        }
        debug_assert_eq!(
            d_act_parts.iter().map(Matrix::rows).collect::<Vec<_>>(),
            trace.in_lengths
        );
        let d_act = Matrix::vcat(&d_act_parts.iter().collect::<Vec<_>>()).expect("uniform width");
        let d_norm = Activation::Relu.backward_rows(&trace.activated, &d_act);
        self.bn.backward(&trace.bn, &d_norm, &mut grad.bn)
    }

    pub fn apply_batch_stats(&mut self, trace: &RefinerTrace) {
        if let Some((mean, var, n)) = trace.batch_stats() {
            self.bn.update_running(mean, var, n);
        }
    }
}

impl Params for Refiner {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a>>) {
        self.conv.collect(&crate::numerics::params::join(prefix, "conv"), out);
        self.bn.collect(&crate::numerics::params::join(prefix, "bn"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a>>) {
        self.conv.collect_mut(&crate::numerics::params::join(prefix, "conv"), out);
        self.bn.collect_mut(&crate::numerics::params::join(prefix, "bn"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::BN_EPS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shape_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Refiner::new(16, 128, &mut rng).unwrap();
        let x = random(8, 16, &mut rng);
        let t = r.forward(&[&x], true).unwrap();
        assert_eq!(t.output.shape(), (4, 128));
        let odd = random(7, 16, &mut rng);
        assert_eq!(r.forward(&[&odd], false).unwrap().output.rows(), 3);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Refiner::new(4, 6, &mut rng).unwrap();
        let t = r.forward(&[&Matrix::zeros(6, 4)], true).unwrap();
        assert!(t.output.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Refiner::new(4, 6, &mut rng).unwrap();
        assert!(matches!(
            r.forward(&[&Matrix::zeros(1, 4)], true),
            Err(crate::Error::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn matches_stage_by_stage_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = Refiner::new(3, 5, &mut rng).unwrap();
        r.conv.bias = vec![0.1, -0.2, 0.0, 0.3, 0.05];
        r.bn.gamma = vec![1.0, 0.5, 2.0, 1.5, 0.8];
        r.bn.beta = vec![0.0, 0.1, -0.1, 0.2, 0.3];
        let xs = [random(6, 3, &mut rng), random(5, 3, &mut rng)];
        let trace = r.forward(&[&xs[0], &xs[1]], true).unwrap();

        // Naive convolution per sequence.
        let conv = |x: &Matrix| -> Matrix {
            let mut out = Matrix::zeros(x.rows(), 5);
            for t in 0..x.rows() as isize {
                for o in 0..5 {
                    let mut s = r.conv.bias[o];
                    for j in 0..3isize {
                        let src = t + j - 1;
                        if src >= 0 && src < x.rows() as isize {
                            for c in 0..3 {
                                s += r.conv.kernels[(o, j as usize * 3 + c)] * x[(src as usize, c)];
                            }
                        }
                    }
                    out[(t as usize, o)] = s;
                }
            }
            out
        };
        let convs: Vec<Matrix> = xs.iter().map(conv).collect();
        // Two-pass batch statistics over all steps of both sequences.
        let all: Vec<&[f64]> = convs.iter().flat_map(|m| m.row_iter()).collect();
        let n = all.len() as f64;
        let mut expected_rows = Vec::new();
        for m in &convs {
            let mut seq = Matrix::zeros(m.rows(), 5);
            for c in 0..5 {
                let mean = all.iter().map(|r| r[c]).sum::<f64>() / n;
                let var = all.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
                for t in 0..m.rows() {
                    let v = r.bn.gamma[c] * (m[(t, c)] - mean) / (var + BN_EPS).sqrt() + r.bn.beta[c];
                    seq[(t, c)] = v.max(0.0);
                }
            }
            for t in 0..m.rows() / 2 {
                expected_rows.push((0..5).map(|c| seq[(2 * t, c)].max(seq[(2 * t + 1, c)])).collect::<Vec<_>>());
            }
        }
        let expected = Matrix::from_rows(&expected_rows).unwrap();
        assert_eq!(trace.lengths, vec![3, 2]);
        assert!(trace.output.max_abs_diff(&expected) < 1e-10);
    }
}
