//! Central finite-difference validation of the backward pass.
//!
//! All checks run in f64, where the difference quotient is meaningful; the
//! same generic graph code is what training runs in f32.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::layers::{BatchNormParams, ConvParams, ParamMode};
use crate::loss::{multiscale_l1, LossConfig};
use crate::models::{build_critic, build_segmentor, segmentor_forward, NetSpec};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// max over coordinates of |analytic - numeric| / max(1, |analytic| + |numeric|).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / 1.0f64.max(a.abs() + n.abs()))
        .fold(0.0, f64::max)
}

/// Compare the backward-pass gradient of `build`'s scalar output with
/// central finite differences w.r.t. every coordinate of `target`.
///
/// `build` must construct the full graph from current tensor contents each
/// time it is called; `target` must be one of the tensors it leafs in with
/// gradients enabled.
pub fn finite_diff_check<F>(build: F, target: &Tensor<f64>, eps: f64) -> f64
where
    F: Fn(&mut Graph<f64>) -> NodeId,
{
    assert!(eps > 0.0);
    target.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g);
    g.backward(loss).expect("scalar loss");
    let analytic = target
        .grad_vec()
        .expect("target must require gradients");

    let eval = |values: &Tensor<f64>| -> f64 {
        let _ = values;
        let mut g = Graph::new();
        let loss = build(&mut g);
        g.scalar_value(loss)
    };

    let n = target.numel();
    let mut numeric = vec![0.0; n];
    for i in 0..n {
        let orig = target.to_vec()[i];
        {
            let mut d = target.data_mut();
            d.data[i] = orig + eps;
        }
        let plus = eval(target);
        {
            let mut d = target.data_mut();
            d.data[i] = orig - eps;
        }
        let minus = eval(target);
        {
            let mut d = target.data_mut();
            d.data[i] = orig;
        }
        numeric[i] = (plus - minus) / (2.0 * eps);
    }
    max_rel_error(&analytic, &numeric)
}

pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_shape_vec(shape, vals).unwrap()
}

/// Keep values away from the leaky-ReLU kink at 0.
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_shape_vec(shape, vals).unwrap()
}

/// Smooth, permutation-sensitive scalar readout of an intermediate tensor:
/// mean |r .* y - c| with c far below the attainable range, so the absolute
/// value never crosses its kink.
fn readout(g: &mut Graph<f64>, y: NodeId, weights: &Tensor<f64>) -> NodeId {
    let w = g.leaf(weights);
    let prod = g.hadamard(y, w).expect("matching shapes");
    let numel: usize = g.shape(prod).iter().product();
    let shape = g.shape(prod).to_vec();
    let c = g.constant(&shape, vec![-8.0; numel]).unwrap();
    g.mean_abs(prod, c).unwrap()
}

/// The full per-layer and end-to-end pipeline gradient suite.
pub fn run_suite() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut results = Vec::new();
    let mut push = |name: &str, err: f64| {
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: DEFAULT_TOLERANCE,
        });
    };

    // conv2d in both geometries, w.r.t. input, weights and bias.
    for (kernel, stride, tag) in [(3usize, 1usize, "k3s1"), (4, 2, "k4s2")] {
        let x = rand_tensor(&mut rng, &[2, 2, 6, 6], -1.0, 1.0).requires_grad();
        let conv = ConvParams::<f64>::init(2, 3, kernel, stride, &mut rng).unwrap();
        let out_hw = crate::kernels::conv_out_dim(6, kernel, stride, 1);
        let r = rand_tensor(&mut rng, &[2, 3, out_hw, out_hw], 0.1, 0.9);
        let build = |g: &mut Graph<f64>| -> NodeId {
            let xid = g.leaf(&x);
            let y = conv.forward(g, xid, ParamMode::Trainable).unwrap();
            readout(g, y, &r)
        };
        push(&format!("conv2d_{tag}/input"), finite_diff_check(&build, &x, DEFAULT_EPS));
        push(
            &format!("conv2d_{tag}/weights"),
            finite_diff_check(&build, &conv.weights, DEFAULT_EPS),
        );
        push(
            &format!("conv2d_{tag}/bias"),
            finite_diff_check(&build, &conv.bias, DEFAULT_EPS),
        );
    }

    // resize2x.
    {
        let x = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0).requires_grad();
        let r = rand_tensor(&mut rng, &[2, 2, 6, 6], 0.1, 0.9);
        let build = |g: &mut Graph<f64>| -> NodeId {
            let xid = g.leaf(&x);
            let y = g.resize2x(xid).unwrap();
            readout(g, y, &r)
        };
        push("resize2x/input", finite_diff_check(&build, &x, DEFAULT_EPS));
    }

    // leaky relu, inputs kept away from the kink.
    {
        let x = rand_tensor_off_kink(&mut rng, &[2, 2, 5, 5], 1e-3).requires_grad();
        let r = rand_tensor(&mut rng, &[2, 2, 5, 5], 0.1, 0.9);
        let build = |g: &mut Graph<f64>| -> NodeId {
            let xid = g.leaf(&x);
            let y = g.leaky_relu(xid, 0.2);
            readout(g, y, &r)
        };
        push("leaky_relu/input", finite_diff_check(&build, &x, DEFAULT_EPS));
    }

    // sigmoid.
    {
        let x = rand_tensor(&mut rng, &[2, 1, 4, 4], -2.0, 2.0).requires_grad();
        let r = rand_tensor(&mut rng, &[2, 1, 4, 4], 0.1, 0.9);
        let build = |g: &mut Graph<f64>| -> NodeId {
            let xid = g.leaf(&x);
            let y = g.sigmoid(xid);
            readout(g, y, &r)
        };
        push("sigmoid/input", finite_diff_check(&build, &x, DEFAULT_EPS));
    }

    // batch norm, train and eval modes.
    {
        let x = rand_tensor(&mut rng, &[3, 2, 4, 4], -1.5, 1.5).requires_grad();
        let bn = BatchNormParams::<f64>::init(2);
        bn.gamma.copy_from(&[0.8, 1.3]);
        bn.beta.copy_from(&[0.1, -0.2]);
        let r = rand_tensor(&mut rng, &[3, 2, 4, 4], 0.1, 0.9);
        let build = |g: &mut Graph<f64>| -> NodeId {
            let xid = g.leaf(&x);
            let y = bn.forward(g, xid, ParamMode::Trainable).unwrap();
            readout(g, y, &r)
        };
        push("batch_norm_train/input", finite_diff_check(&build, &x, DEFAULT_EPS));
        push(
            "batch_norm_train/gamma",
            finite_diff_check(&build, &bn.gamma, DEFAULT_EPS),
        );
        push(
            "batch_norm_train/beta",
            finite_diff_check(&build, &bn.beta, DEFAULT_EPS),
        );
        bn.set_mode(crate::graph::BnMode::Eval);
        bn.running_mean.copy_from(&[0.2, -0.1]);
        bn.running_var.copy_from(&[0.9, 1.4]);
        push("batch_norm_eval/input", finite_diff_check(&build, &x, DEFAULT_EPS));
        push(
            "batch_norm_eval/gamma",
            finite_diff_check(&build, &bn.gamma, DEFAULT_EPS),
        );
    }

    // hadamard with channel broadcast.
    {
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0).requires_grad();
        let mask = rand_tensor(&mut rng, &[2, 1, 4, 4], 0.05, 0.95).requires_grad();
        let r = rand_tensor(&mut rng, &[2, 3, 4, 4], 0.1, 0.9);
        let build = |g: &mut Graph<f64>| -> NodeId {
            let xid = g.leaf(&x);
            let mid = g.leaf(&mask);
            let y = g.hadamard(xid, mid).unwrap();
            readout(g, y, &r)
        };
        push("hadamard_broadcast/input", finite_diff_check(&build, &x, DEFAULT_EPS));
        push("hadamard_broadcast/mask", finite_diff_check(&build, &mask, DEFAULT_EPS));
    }

    // concat + channel select.
    {
        let a = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0).requires_grad();
        let b = rand_tensor(&mut rng, &[2, 1, 3, 3], -1.0, 1.0);
        let r = rand_tensor(&mut rng, &[2, 2, 3, 3], 0.1, 0.9);
        let build = |g: &mut Graph<f64>| -> NodeId {
            let aid = g.leaf(&a);
            let bid = g.leaf(&b);
            let cat = g.concat_channels(&[aid, bid]).unwrap();
            let sel = g.select_channels(cat, 1, 2).unwrap();
            readout(g, sel, &r)
        };
        push("concat_select/input", finite_diff_check(&build, &a, DEFAULT_EPS));
    }

    // mean_abs with well-separated operands.
    {
        let a = rand_tensor(&mut rng, &[2, 2, 3, 3], 1.0, 2.0).requires_grad();
        let b = rand_tensor(&mut rng, &[2, 2, 3, 3], -2.0, -1.0).requires_grad();
        let build = |g: &mut Graph<f64>| -> NodeId {
            let aid = g.leaf(&a);
            let bid = g.leaf(&b);
            g.mean_abs(aid, bid).unwrap()
        };
        push("mean_abs/a", finite_diff_check(&build, &a, DEFAULT_EPS));
        push("mean_abs/b", finite_diff_check(&build, &b, DEFAULT_EPS));
    }

    // pixel-wise baseline loss.
    {
        let pred = rand_tensor(&mut rng, &[2, 1, 3, 3], 0.1, 0.9).requires_grad();
        let gt_vals: Vec<f64> = (0..18).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect();
        let gt = Tensor::from_shape_vec(&[2, 1, 3, 3], gt_vals).unwrap();
        let build = |g: &mut Graph<f64>| -> NodeId {
            let pid = g.leaf(&pred);
            let gid = g.leaf(&gt);
            g.bce_mean(pid, gid).unwrap()
        };
        push("bce_mean/pred", finite_diff_check(&build, &pred, DEFAULT_EPS));
    }

    // Full pipeline: segmentor -> mask -> critic -> multi-scale loss, on
    // depth-reduced networks so the input stays tiny.
    {
        let seg_spec = NetSpec::segmentor(2, 1).with_base(2).with_depth(2);
        let critic_spec = NetSpec::critic(2).with_base(2).with_depth(2);
        let seg = build_segmentor::<f64>(&seg_spec, 21).unwrap();
        let critic = build_critic::<f64>(&critic_spec, 22).unwrap();
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4], 0.05, 1.0).requires_grad();
        let gt_vals: Vec<f64> = (0..32).map(|i| ((i / 3) % 2) as f64).collect();
        let gt = Tensor::from_shape_vec(&[2, 1, 4, 4], gt_vals).unwrap();
        let cfg = LossConfig::multiscale(2, true);
        let build = |g: &mut Graph<f64>| -> NodeId {
            let xid = g.leaf(&x);
            let gid = g.leaf(&gt);
            let pred = segmentor_forward(g, &seg, xid, ParamMode::Trainable).unwrap();
            multiscale_l1(g, &critic, xid, pred, gid, &cfg, ParamMode::Trainable).unwrap()
        };
        push("pipeline/input", finite_diff_check(&build, &x, DEFAULT_EPS));
        push(
            "pipeline/segmentor_down0_weights",
            finite_diff_check(&build, &seg.down[0].conv.weights, DEFAULT_EPS),
        );
        push(
            "pipeline/segmentor_up1_weights",
            finite_diff_check(&build, &seg.up[1].conv.weights, DEFAULT_EPS),
        );
        push(
            "pipeline/segmentor_head_weights",
            finite_diff_check(&build, &seg.head.as_ref().unwrap().weights, DEFAULT_EPS),
        );
        push(
            "pipeline/segmentor_up0_bn_gamma",
            finite_diff_check(&build, &seg.up[0].bn.gamma, DEFAULT_EPS),
        );
        push(
            "pipeline/critic_down0_weights",
            finite_diff_check(&build, &critic.down[0].conv.weights, DEFAULT_EPS),
        );
        push(
            "pipeline/critic_down1_bn_gamma",
            finite_diff_check(&build, &critic.down[1].bn.as_ref().unwrap().gamma, DEFAULT_EPS),
        );
    }

    results
}
