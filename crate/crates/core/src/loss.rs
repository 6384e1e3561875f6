//! Masking and the multi-scale L1 objective, its single-scale ablations, and
//! the pixel-wise baseline loss.
//!
//! No operation here reduces critic features to a real/fake scalar decision;
//! the objective is a feature-matching distance between the two masked
//! inputs.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::ParamMode;
use crate::models::{critic_features, NetParams};
use crate::scalar::Scalar;
use crate::tensor::dims4;

/// Which critic layers contribute to the loss. Scale 0 is the masked input
/// itself; scales 1..=L are critic block outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossConfig {
    /// Sorted, non-empty, deduplicated scale indices.
    pub scales: Vec<usize>,
}

impl LossConfig {
    pub fn new(mut scales: Vec<usize>) -> Result<Self> {
        scales.sort_unstable();
        scales.dedup();
        if scales.is_empty() {
            return Err(Error::config("loss needs at least one scale".to_string()));
        }
        Ok(LossConfig { scales })
    }

    /// All scales of a critic with `layers` blocks. With
    /// `include_input_scale` the raw masked input participates as scale 0;
    /// without it the set is exactly the critic block outputs 1..=layers.
    pub fn multiscale(layers: usize, include_input_scale: bool) -> Self {
        let start = if include_input_scale { 0 } else { 1 };
        LossConfig {
            scales: (start..=layers).collect(),
        }
    }

    /// The s0 ablation: input layer only.
    pub fn input_only() -> Self {
        LossConfig { scales: vec![0] }
    }

    /// The s3 ablation: deepest layer only.
    pub fn deepest_only(layers: usize) -> Self {
        LossConfig {
            scales: vec![layers],
        }
    }

    pub fn is_input_only(&self) -> bool {
        self.scales == [0]
    }
}

/// Multiply every channel of `x` by a single-channel label map in [0,1].
pub fn mask_image<S: Scalar>(g: &mut Graph<S>, x: NodeId, label: NodeId) -> Result<NodeId> {
    let (_, lc, _, _) = dims4(g.shape(label))?;
    if lc != 1 {
        return Err(Error::shape(format!(
            "mask label must have 1 channel, got {lc}"
        )));
    }
    debug_assert!(
        g.value(label)
            .iter()
            .all(|&v| v >= S::zero() && v <= S::one()),
        "label map values outside [0,1]"
    );
    g.hadamard(x, label)
}

/// Mean absolute feature distance between two already-masked inputs,
/// averaged over the selected critic scales.
pub fn multiscale_feature_l1<S: Scalar>(
    g: &mut Graph<S>,
    critic: &NetParams<S>,
    masked_a: NodeId,
    masked_b: NodeId,
    cfg: &LossConfig,
    critic_mode: ParamMode,
) -> Result<NodeId> {
    if cfg.is_input_only() {
        // Scale 0 bypasses the critic entirely.
        return g.mean_abs(masked_a, masked_b);
    }
    let fa = critic_features(g, critic, masked_a, critic_mode)?;
    let fb = critic_features(g, critic, masked_b, critic_mode)?;
    let max_scale = fa.len() - 1;
    let mut terms = Vec::with_capacity(cfg.scales.len());
    for &s in &cfg.scales {
        if s > max_scale {
            return Err(Error::config(format!(
                "scale {s} out of range for a critic with {max_scale} layers"
            )));
        }
        terms.push(g.mean_abs(fa.layers[s], fb.layers[s])?);
    }
    g.mean_scalars(&terms)
}

/// The multi-scale objective for one label class: mask the input with the
/// predicted and ground-truth maps, extract critic features from both, and
/// average the per-scale mean absolute differences.
pub fn multiscale_l1<S: Scalar>(
    g: &mut Graph<S>,
    critic: &NetParams<S>,
    x: NodeId,
    pred: NodeId,
    gt: NodeId,
    cfg: &LossConfig,
    critic_mode: ParamMode,
) -> Result<NodeId> {
    for (name, id) in [("pred", pred), ("gt", gt)] {
        let (_, c, h, w) = dims4(g.shape(id))?;
        if c != 1 {
            return Err(Error::shape(format!(
                "{name} label map must have exactly 1 class channel, got {c}"
            )));
        }
        let (_, _, xh, xw) = dims4(g.shape(x))?;
        if (h, w) != (xh, xw) {
            return Err(Error::shape(format!(
                "{name} map {h}x{w} does not match image {xh}x{xw}"
            )));
        }
    }
    let masked_pred = mask_image(g, x, pred)?;
    let masked_gt = mask_image(g, x, gt)?;
    multiscale_feature_l1(g, critic, masked_pred, masked_gt, cfg, critic_mode)
}

/// Arithmetic mean of per-critic losses.
pub fn average_multi_critic_loss<S: Scalar>(
    g: &mut Graph<S>,
    losses: &[NodeId],
) -> Result<NodeId> {
    if losses.is_empty() {
        return Err(Error::config(
            "average of an empty critic loss list".to_string(),
        ));
    }
    g.mean_scalars(losses)
}

/// Mean per-pixel, per-class binary cross-entropy against a binary target,
/// matching the sigmoid output head.
pub fn pixelwise_baseline_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    gt: NodeId,
) -> Result<NodeId> {
    debug_assert!(
        g.value(gt)
            .iter()
            .all(|&v| v == S::zero() || v == S::one()),
        "baseline loss expects a binary ground truth"
    );
    g.bce_mean(pred, gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_critic, NetSpec};
    use crate::tensor::Tensor;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_shape_vec(shape, v).unwrap()
    }

    fn tiny_critic(seed: u64) -> NetParams<f64> {
        build_critic(&NetSpec::critic(3).with_base(2).with_depth(2), seed).unwrap()
    }

    #[test]
    fn mask_identity_zero_and_half() {
        let mut g = Graph::new();
        let x_vals: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = g.leaf(&t(&[1, 3, 2, 2], x_vals.clone()));
        let ones = g.leaf(&t(&[1, 1, 2, 2], vec![1.0; 4]));
        let zeros = g.leaf(&t(&[1, 1, 2, 2], vec![0.0; 4]));
        let half = g.leaf(&t(&[1, 1, 2, 2], vec![0.5; 4]));

        let kept = mask_image(&mut g, x, ones).unwrap();
        assert_eq!(g.value(kept), &x_vals[..]);

        let gone = mask_image(&mut g, x, zeros).unwrap();
        assert!(g.value(gone).iter().all(|&v| v == 0.0));

        let halved = mask_image(&mut g, x, half).unwrap();
        // Per-channel loop oracle.
        for c in 0..3 {
            for i in 0..4 {
                assert_eq!(g.value(halved)[c * 4 + i], x_vals[c * 4 + i] * 0.5);
            }
        }
    }

    #[test]
    fn mask_rejects_multichannel_label() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 3, 2, 2], vec![0.0; 12]));
        let label = g.leaf(&t(&[1, 2, 2, 2], vec![0.0; 8]));
        assert!(mask_image(&mut g, x, label).is_err());
    }

    #[test]
    fn identical_maps_give_zero_loss_exactly() {
        let critic = tiny_critic(5);
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 3, 8, 8], (0..192).map(|i| (i % 13) as f64 / 13.0).collect()));
        let m = g.leaf(&t(&[1, 1, 8, 8], (0..64).map(|i| ((i % 2) as f64)).collect()));
        let cfg = LossConfig::multiscale(2, true);
        let loss =
            multiscale_l1(&mut g, &critic, x, m, m, &cfg, ParamMode::Frozen).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn input_only_equals_masked_mean_abs_and_ignores_critic() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 3, 8, 8], (0..192).map(|i| (i % 7) as f64 / 7.0).collect()));
        let pred = g.leaf(&t(&[1, 1, 8, 8], (0..64).map(|i| (i % 3) as f64 / 3.0).collect()));
        let gt = g.leaf(&t(&[1, 1, 8, 8], (0..64).map(|i| ((i / 8) % 2) as f64).collect()));
        let cfg = LossConfig::input_only();

        let a = multiscale_l1(&mut g, &tiny_critic(1), x, pred, gt, &cfg, ParamMode::Frozen)
            .unwrap();
        let b = multiscale_l1(&mut g, &tiny_critic(2), x, pred, gt, &cfg, ParamMode::Frozen)
            .unwrap();
        let mp = mask_image(&mut g, x, pred).unwrap();
        let mg = mask_image(&mut g, x, gt).unwrap();
        let direct = g.mean_abs(mp, mg).unwrap();
        assert_eq!(g.scalar_value(a), g.scalar_value(direct));
        assert_eq!(g.scalar_value(a), g.scalar_value(b));
    }

    /// Fixed 2x2-input critic with known weights, checked against an
    /// explicit-loop forward oracle computed without the graph.
    #[test]
    fn fixed_tiny_critic_matches_hand_oracle() {
        use crate::layers::ConvParams;
        use crate::models::{DownBlock, NetKind};

        // One down block: conv k4 s2 pad 1 over 2x2 input -> 1x1 output.
        let w_vals: Vec<f64> = (0..16).map(|i| (i as f64 - 8.0) / 16.0).collect();
        let critic = NetParams {
            spec: NetSpec {
                kind: NetKind::Critic,
                in_channels: 1,
                out_channels: 0,
                down_blocks: 1,
                up_blocks: 0,
                base_feature_maps: 1,
                feature_map_schedule: vec![1],
            },
            down: vec![DownBlock {
                conv: ConvParams {
                    weights: t(&[1, 1, 4, 4], w_vals.clone()),
                    bias: t(&[1], vec![0.25]),
                    stride: 2,
                    padding: 1,
                },
                bn: None,
            }],
            up: vec![],
            head: None,
        };

        let x_vals = vec![0.6, 0.9, 0.3, 0.2];
        let pred_vals = vec![1.0, 0.0, 1.0, 1.0];
        let gt_vals = vec![1.0, 1.0, 0.0, 1.0];

        // Oracle: masked images, one conv output each, leaky relu, then the
        // average of the scale-0 and scale-1 mean absolute differences.
        let masked = |m: &[f64]| -> Vec<f64> { x_vals.iter().zip(m).map(|(x, l)| x * l).collect() };
        let conv_1x1 = |inp: &[f64]| -> f64 {
            // Output pixel (0,0): input rows -1..2, cols -1..2 with pad 1.
            let mut acc = 0.25;
            for kh in 0..4usize {
                for kw in 0..4usize {
                    let iy = kh as isize - 1;
                    let ix = kw as isize - 1;
                    if (0..2).contains(&iy) && (0..2).contains(&ix) {
                        acc += inp[(iy * 2 + ix) as usize] * w_vals[kh * 4 + kw];
                    }
                }
            }
            if acc >= 0.0 {
                acc
            } else {
                0.2 * acc
            }
        };
        let mp = masked(&pred_vals);
        let mg = masked(&gt_vals);
        let scale0: f64 =
            mp.iter().zip(&mg).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0;
        let scale1 = (conv_1x1(&mp) - conv_1x1(&mg)).abs();
        let expect = (scale0 + scale1) / 2.0;

        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 1, 2, 2], x_vals.clone()));
        let pred = g.leaf(&t(&[1, 1, 2, 2], pred_vals.clone()));
        let gt = g.leaf(&t(&[1, 1, 2, 2], gt_vals.clone()));
        let cfg = LossConfig::multiscale(1, true);
        let loss = multiscale_l1(&mut g, &critic, x, pred, gt, &cfg, ParamMode::Frozen).unwrap();
        assert!((g.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn multichannel_map_rejected() {
        let critic = tiny_critic(3);
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 3, 8, 8], vec![0.0; 192]));
        let two = g.leaf(&t(&[1, 2, 8, 8], vec![0.0; 128]));
        let one = g.leaf(&t(&[1, 1, 8, 8], vec![0.0; 64]));
        let cfg = LossConfig::multiscale(2, true);
        assert!(multiscale_l1(&mut g, &critic, x, two, one, &cfg, ParamMode::Frozen).is_err());
    }

    #[test]
    fn average_examples_and_gradient_share() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::scalar(1.0f64));
        let single = average_multi_critic_loss(&mut g, &[a]).unwrap();
        assert_eq!(g.scalar_value(single), 1.0);

        let w = Tensor::from_shape_vec(&[1], vec![3.0]).unwrap().requires_grad();
        let wid = g.leaf(&w);
        let b = g.leaf(&Tensor::scalar(2.0f64));
        let c = g.leaf(&Tensor::scalar(1.0f64));
        let avg = average_multi_critic_loss(&mut g, &[wid, b, c]).unwrap();
        assert_eq!(g.scalar_value(avg), 2.0);
        g.backward(avg).unwrap();
        assert_eq!(w.grad_vec().unwrap(), vec![1.0 / 3.0]);

        assert!(average_multi_critic_loss(&mut g, &[]).is_err());
    }

    #[test]
    fn baseline_loss_analytic_values() {
        let mut g = Graph::new();
        let half = g.leaf(&t(&[1, 1, 2, 2], vec![0.5; 4]));
        let gt = g.leaf(&t(&[1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]));
        let l = pixelwise_baseline_loss(&mut g, half, gt).unwrap();
        assert!((g.scalar_value(l) - 2.0f64.ln()).abs() < 1e-9);

        let close = g.leaf(&t(&[1, 1, 1, 1], vec![0.9]));
        let one = g.leaf(&t(&[1, 1, 1, 1], vec![1.0]));
        let l2 = pixelwise_baseline_loss(&mut g, close, one).unwrap();
        assert!((g.scalar_value(l2) + 0.9f64.ln()).abs() < 1e-9);

        // pred -> gt drives the loss toward 0.
        let nearly = g.leaf(&t(&[1, 1, 1, 1], vec![1.0 - 1e-9]));
        let l3 = pixelwise_baseline_loss(&mut g, nearly, one).unwrap();
        assert!(g.scalar_value(l3) < 1e-6);

        let bad = g.leaf(&t(&[1, 1, 1, 2], vec![0.5, 0.5]));
        assert!(pixelwise_baseline_loss(&mut g, bad, one).is_err());
    }

    #[test]
    fn scale_consistency_single_vs_mean() {
        let critic = tiny_critic(11);
        let x_t = t(&[1, 3, 8, 8], (0..192).map(|i| ((i * 31) % 17) as f64 / 17.0).collect());
        let pred_t = t(&[1, 1, 8, 8], (0..64).map(|i| ((i * 7) % 5) as f64 / 5.0).collect());
        let gt_t = t(&[1, 1, 8, 8], (0..64).map(|i| ((i / 5) % 2) as f64).collect());

        let eval = |cfg: &LossConfig| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(&x_t);
            let pred = g.leaf(&pred_t);
            let gt = g.leaf(&gt_t);
            multiscale_l1(&mut g, &critic, x, pred, gt, cfg, ParamMode::Frozen)
                .map(|id| g.scalar_value(id))
                .unwrap()
        };

        let per_scale: Vec<f64> = (0..=2)
            .map(|s| eval(&LossConfig::new(vec![s]).unwrap()))
            .collect();
        let all = eval(&LossConfig::multiscale(2, true));
        let mean = per_scale.iter().sum::<f64>() / per_scale.len() as f64;
        assert!((all - mean).abs() < 1e-6, "{all} vs {mean}");

        // Loss values are non-negative and the per-scale terms symmetric.
        assert!(per_scale.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn feature_term_is_symmetric() {
        let critic = tiny_critic(13);
        let mut g = Graph::new();
        let a = g.leaf(&t(&[1, 3, 8, 8], (0..192).map(|i| (i % 11) as f64 / 11.0).collect()));
        let b = g.leaf(&t(&[1, 3, 8, 8], (0..192).map(|i| (i % 5) as f64 / 5.0).collect()));
        let cfg = LossConfig::multiscale(2, true);
        let ab = multiscale_feature_l1(&mut g, &critic, a, b, &cfg, ParamMode::Frozen).unwrap();
        let ba = multiscale_feature_l1(&mut g, &critic, b, a, &cfg, ParamMode::Frozen).unwrap();
        assert_eq!(g.scalar_value(ab), g.scalar_value(ba));
    }
}
