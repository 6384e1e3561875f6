//! RMSProp with a sign-flipped variant for the ascending player, and critic
//! weight clipping.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RMSPROP_ALPHA: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;

/// Update direction: the segmentor descends the shared loss, the critic
/// ascends it. Implemented as a sign on the update so the logged loss value
/// is the same expression for both players.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum StepSign {
    Descend,
    Ascend,
}

impl StepSign {
    fn factor<S: Scalar>(self) -> S {
        match self {
            StepSign::Descend => -S::one(),
            StepSign::Ascend => S::one(),
        }
    }
}

/// RMSProp state: one squared-gradient accumulator per parameter.
pub struct RmsProp<S: Scalar> {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    accum: Vec<Vec<S>>,
}

impl<S: Scalar> RmsProp<S> {
    pub fn new(params: &[Tensor<S>], lr: f64, alpha: f64, eps: f64) -> Self {
        RmsProp {
            lr,
            alpha,
            eps,
            accum: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
        }
    }

    pub fn with_defaults(params: &[Tensor<S>], lr: f64) -> Self {
        Self::new(params, lr, RMSPROP_ALPHA, RMSPROP_EPS)
    }

    /// v <- alpha*v + (1-alpha)*g^2; theta <- theta + sign*lr*g/(sqrt(v)+eps).
    pub fn step(&mut self, params: &[Tensor<S>], sign: StepSign) -> Result<()> {
        assert_eq!(params.len(), self.accum.len(), "parameter list changed");
        let alpha = S::from_f64(self.alpha);
        let one_minus = S::one() - alpha;
        let lr = S::from_f64(self.lr) * sign.factor::<S>();
        let eps = S::from_f64(self.eps);
        for (p, v) in params.iter().zip(self.accum.iter_mut()) {
            let mut d = p.data_mut();
            if d.grad.is_none() {
                return Err(Error::config(
                    "rmsprop step on a parameter with no gradient buffer".to_string(),
                ));
            }
            let data_len = d.data.len();
            debug_assert_eq!(data_len, v.len());
            let grads = d.grad.take().expect("checked above");
            for i in 0..data_len {
                let g = grads[i];
                v[i] = alpha * v[i] + one_minus * g * g;
                d.data[i] = d.data[i] + lr * g / (v[i].sqrt() + eps);
            }
            d.grad = Some(grads);
        }
        Ok(())
    }

    /// Zero the squared-gradient accumulators.
    pub fn reset(&mut self) {
        for v in &mut self.accum {
            v.iter_mut().for_each(|x| *x = S::zero());
        }
    }
}

/// Clamp every parameter value into [-c, c].
pub fn clip_weights<S: Scalar>(params: &[Tensor<S>], c: S) {
    assert!(c > S::zero(), "clip range must be positive");
    for p in params {
        let mut d = p.data_mut();
        for v in d.data.iter_mut() {
            if *v > c {
                *v = c;
            } else if *v < -c {
                *v = -c;
            }
        }
    }
}

/// Largest absolute parameter value across a parameter list.
pub fn max_abs<S: Scalar>(params: &[Tensor<S>]) -> f64 {
    params
        .iter()
        .flat_map(|p| p.to_vec())
        .fold(0.0f64, |acc, v| acc.max(v.as_f64().abs()))
}

pub fn zero_grads<S: Scalar>(params: &[Tensor<S>]) {
    for p in params {
        p.zero_grad();
    }
}
