//! Layer parameter containers and their graph wiring: strided and
//! unit-stride convolutions, batch normalization, and parameter
//! initialization.

use std::cell::Cell;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, NodeId};
use crate::kernels::channel_stats;
use crate::scalar::Scalar;
use crate::tensor::{dims4, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

/// Whether a forward pass treats a layer's parameters as trainable leaves or
/// as constants (the frozen player of the min-max game).
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

pub struct ConvParams<S: Scalar> {
    /// [out_channels, in_channels, k, k]
    pub weights: Tensor<S>,
    /// [out_channels]
    pub bias: Tensor<S>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> ConvParams<S> {
    /// Weights from N(0, 0.02), zero bias. Kernel 3/stride 1 preserves even
    /// spatial dims, kernel 4/stride 2 halves them exactly (padding 1).
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !matches!((kernel, stride), (3, 1) | (4, 2)) {
            return Err(Error::config(format!(
                "unsupported conv geometry: kernel {kernel}, stride {stride}"
            )));
        }
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n = out_channels * in_channels * kernel * kernel;
        let weights: Vec<S> = (0..n)
            .map(|_| S::from_f64(normal.sample(rng)))
            .collect();
        Ok(ConvParams {
            weights: Tensor::from_shape_vec(
                &[out_channels, in_channels, kernel, kernel],
                weights,
            )?
            .requires_grad(),
            bias: Tensor::zeros(&[out_channels]).requires_grad(),
            stride,
            padding: 1,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph<S>, x: NodeId, mode: ParamMode) -> Result<NodeId> {
        let (w, b) = match mode {
            ParamMode::Trainable => (g.leaf(&self.weights), g.leaf(&self.bias)),
            ParamMode::Frozen => (g.leaf_frozen(&self.weights), g.leaf_frozen(&self.bias)),
        };
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

pub struct BatchNormParams<S: Scalar> {
    /// [channels]
    pub gamma: Tensor<S>,
    /// [channels]
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub eps: f64,
    pub momentum: f64,
    mode: Cell<BnMode>,
}

impl<S: Scalar> BatchNormParams<S> {
    pub fn init(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], S::one()).requires_grad(),
            beta: Tensor::zeros(&[channels]).requires_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], S::one()),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            mode: Cell::new(BnMode::Train),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn mode(&self) -> BnMode {
        self.mode.get()
    }

    pub fn set_mode(&self, mode: BnMode) {
        self.mode.set(mode);
    }

    /// Train mode normalizes by batch statistics over (batch, H, W) per
    /// channel and updates the running estimates; eval mode normalizes by the
    /// running estimates only.
    pub fn forward(&self, g: &mut Graph<S>, x: NodeId, mode: ParamMode) -> Result<NodeId> {
        let (n, c, h, w) = dims4(g.shape(x))?;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batch_norm over {} channels applied to {c}-channel input",
                self.channels()
            )));
        }
        let (mean, inv_std) = match self.mode.get() {
            BnMode::Train => {
                if n * h * w < 2 {
                    return Err(Error::shape(
                        "batch_norm train mode needs a population of at least 2 per channel"
                            .to_string(),
                    ));
                }
                let (mean, var) = channel_stats(g.value(x), n, c, h * w);
                self.update_running(&mean, &var);
                let inv_std: Vec<S> = var
                    .iter()
                    .map(|&v| S::one() / (v + S::from_f64(self.eps)).sqrt())
                    .collect();
                (mean, inv_std)
            }
            BnMode::Eval => {
                let mean = self.running_mean.to_vec();
                let inv_std: Vec<S> = self
                    .running_var
                    .to_vec()
                    .iter()
                    .map(|&v| S::one() / (v + S::from_f64(self.eps)).sqrt())
                    .collect();
                (mean, inv_std)
            }
        };
        let (gamma, beta) = match mode {
            ParamMode::Trainable => (g.leaf(&self.gamma), g.leaf(&self.beta)),
            ParamMode::Frozen => (g.leaf_frozen(&self.gamma), g.leaf_frozen(&self.beta)),
        };
        g.batch_norm(x, gamma, beta, self.mode.get(), mean, inv_std)
    }

    fn update_running(&self, mean: &[S], var: &[S]) {
        let m = S::from_f64(self.momentum);
        let keep = S::one() - m;
        {
            let mut rm = self.running_mean.data_mut();
            for (r, b) in rm.data.iter_mut().zip(mean) {
                *r = keep * *r + m * *b;
            }
        }
        let mut rv = self.running_var.data_mut();
        for (r, b) in rv.data.iter_mut().zip(var) {
            *r = keep * *r + m * *b;
        }
    }
}

pub fn leaky_relu<S: Scalar>(g: &mut Graph<S>, x: NodeId) -> NodeId {
    g.leaky_relu(x, S::from_f64(LEAKY_SLOPE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_kernel_preserves_input() {
        // k=3 kernel with center 1, rest 0, pad 1, stride 1.
        let mut w = vec![0.0f64; 9];
        w[4] = 1.0;
        let conv = ConvParams {
            weights: Tensor::from_shape_vec(&[1, 1, 3, 3], w).unwrap(),
            bias: Tensor::zeros(&[1]),
            stride: 1,
            padding: 1,
        };
        let mut g = Graph::new();
        let x = g.leaf(
            &Tensor::from_shape_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let y = conv.forward(&mut g, x, ParamMode::Frozen).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn strided_conv_halves_160() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = ConvParams::<f32>::init(1, 2, 4, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[1, 1, 160, 160]));
        let y = conv.forward(&mut g, x, ParamMode::Frozen).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 80, 80]);
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = ConvParams::<f32>::init(3, 2, 3, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[1, 2, 4, 4]));
        assert!(conv.forward(&mut g, x, ParamMode::Frozen).is_err());
    }

    #[test]
    fn down_then_up_restores_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let down = ConvParams::<f32>::init(1, 1, 4, 2, &mut rng).unwrap();
        let up = ConvParams::<f32>::init(1, 1, 3, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[2, 1, 12, 12]));
        let d = down.forward(&mut g, x, ParamMode::Frozen).unwrap();
        assert_eq!(g.shape(d), &[2, 1, 6, 6]);
        let r = g.resize2x(d).unwrap();
        let u = up.forward(&mut g, r, ParamMode::Frozen).unwrap();
        assert_eq!(g.shape(u), &[2, 1, 12, 12]);
    }

    #[test]
    fn batch_norm_train_statistics() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let c = 3;
        let hw = 8 * 8;
        let x: Vec<f32> = (0..n * c * hw).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let bn = BatchNormParams::<f32>::init(c);
        let mut g = Graph::new();
        let xid = g.leaf(&Tensor::from_shape_vec(&[n, c, 8, 8], x).unwrap());
        let y = bn.forward(&mut g, xid, ParamMode::Frozen).unwrap();
        let (mean, var) = channel_stats(g.value(y), n, c, hw);
        for ch in 0..c {
            assert!(mean[ch].abs() < 1e-5, "channel {ch} mean {}", mean[ch]);
            assert!((var[ch] - 1.0).abs() < 1e-4, "channel {ch} var {}", var[ch]);
        }
    }

    #[test]
    fn batch_norm_gamma_zero_gives_beta() {
        let bn = BatchNormParams::<f32>::init(2);
        bn.gamma.copy_from(&[0.0, 0.0]);
        bn.beta.copy_from(&[0.5, -1.5]);
        let mut g = Graph::new();
        let xid = g.leaf(&Tensor::from_shape_vec(&[1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap());
        let y = bn.forward(&mut g, xid, ParamMode::Frozen).unwrap();
        assert_eq!(g.value(y)[..4], [0.5; 4]);
        assert_eq!(g.value(y)[4..], [-1.5; 4]);
    }

    #[test]
    fn batch_norm_eval_identity_up_to_affine() {
        let bn = BatchNormParams::<f32>::init(1);
        bn.set_mode(BnMode::Eval);
        let mut g = Graph::new();
        let vals = vec![0.25f32, -0.5, 1.0, 2.0];
        let xid = g.leaf(&Tensor::from_shape_vec(&[1, 1, 2, 2], vals.clone()).unwrap());
        let y = bn.forward(&mut g, xid, ParamMode::Frozen).unwrap();
        for (a, b) in g.value(y).iter().zip(&vals) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_singleton_population_errors() {
        let bn = BatchNormParams::<f32>::init(1);
        let mut g = Graph::new();
        let xid = g.leaf(&Tensor::from_shape_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        assert!(bn.forward(&mut g, xid, ParamMode::Frozen).is_err());
    }

    #[test]
    fn init_is_seed_deterministic_with_zero_bias() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let c1 = ConvParams::<f32>::init(2, 4, 3, 1, &mut a).unwrap();
        let c2 = ConvParams::<f32>::init(2, 4, 3, 1, &mut b).unwrap();
        assert_eq!(c1.weights.to_vec(), c2.weights.to_vec());
        assert_eq!(c1.bias.to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn init_weight_sample_mean_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // 10k draws: standard error of the mean is 0.02/sqrt(10000) = 2e-4.
        let conv = ConvParams::<f64>::init(10, 100, 3, 1, &mut rng).unwrap();
        let w = conv.weights.to_vec();
        assert_eq!(w.len(), 9000);
        let more = ConvParams::<f64>::init(10, 112, 3, 1, &mut rng).unwrap();
        let w2 = more.weights.to_vec();
        let sample: Vec<f64> = w.iter().chain(w2.iter()).take(10_000).copied().collect();
        let mean: f64 = sample.iter().sum::<f64>() / sample.len() as f64;
        assert!(mean.abs() < 3.0 * 0.02 / 100.0, "mean {mean}");
    }
}
