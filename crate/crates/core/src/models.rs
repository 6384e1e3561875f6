//! Segmentor and critic network construction and forward passes.
//!
//! The segmentor is a fully convolutional encoder-decoder with skip
//! connections; the critic is a feature-extracting encoder with no
//! classification head — its output is the stack of per-layer features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, NodeId};
use crate::layers::{leaky_relu, BatchNormParams, ConvParams, ParamMode};
use crate::scalar::Scalar;
use crate::tensor::{dims4, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NetKind {
    Segmentor,
    Critic,
}

/// Declarative description of one network.
#[derive(Clone, Debug)]
pub struct NetSpec {
    pub kind: NetKind,
    pub in_channels: usize,
    /// Number of label classes; segmentor only.
    pub out_channels: usize,
    pub down_blocks: usize,
    /// Segmentor only; mirrors `down_blocks`.
    pub up_blocks: usize,
    pub base_feature_maps: usize,
    /// Feature maps per down block, doubling from the base.
    pub feature_map_schedule: Vec<usize>,
}

pub const SEGMENTOR_BLOCKS: usize = 4;
pub const CRITIC_BLOCKS: usize = 3;
pub const DEFAULT_BASE_FEATURE_MAPS: usize = 64;

fn doubling_schedule(base: usize, blocks: usize) -> Vec<usize> {
    (0..blocks).map(|i| base << i).collect()
}

impl NetSpec {
    pub fn segmentor(in_channels: usize, classes: usize) -> Self {
        NetSpec {
            kind: NetKind::Segmentor,
            in_channels,
            out_channels: classes,
            down_blocks: SEGMENTOR_BLOCKS,
            up_blocks: SEGMENTOR_BLOCKS,
            base_feature_maps: DEFAULT_BASE_FEATURE_MAPS,
            feature_map_schedule: doubling_schedule(DEFAULT_BASE_FEATURE_MAPS, SEGMENTOR_BLOCKS),
        }
    }

    pub fn critic(in_channels: usize) -> Self {
        NetSpec {
            kind: NetKind::Critic,
            in_channels,
            out_channels: 0,
            down_blocks: CRITIC_BLOCKS,
            up_blocks: 0,
            base_feature_maps: DEFAULT_BASE_FEATURE_MAPS,
            feature_map_schedule: doubling_schedule(DEFAULT_BASE_FEATURE_MAPS, CRITIC_BLOCKS),
        }
    }

    pub fn with_base(mut self, base: usize) -> Self {
        self.base_feature_maps = base;
        self.feature_map_schedule = doubling_schedule(base, self.down_blocks);
        self
    }

    /// Shallower networks for small-input tests.
    pub fn with_depth(mut self, down_blocks: usize) -> Self {
        self.down_blocks = down_blocks;
        if self.kind == NetKind::Segmentor {
            self.up_blocks = down_blocks;
        }
        self.feature_map_schedule = doubling_schedule(self.base_feature_maps, down_blocks);
        self
    }

    fn validate(&self, expect: NetKind) -> Result<()> {
        if self.kind != expect {
            return Err(Error::config(format!(
                "expected a {expect:?} spec, got {:?}",
                self.kind
            )));
        }
        if self.in_channels == 0 || self.down_blocks == 0 || self.base_feature_maps == 0 {
            return Err(Error::config("degenerate network spec".to_string()));
        }
        if self.kind == NetKind::Segmentor {
            if self.out_channels == 0 {
                return Err(Error::config("segmentor needs at least one class".to_string()));
            }
            if self.up_blocks != self.down_blocks {
                return Err(Error::config(
                    "segmentor up_blocks must mirror down_blocks".to_string(),
                ));
            }
        }
        if self.feature_map_schedule != doubling_schedule(self.base_feature_maps, self.down_blocks)
        {
            return Err(Error::config(
                "feature_map_schedule must double from the base per down block".to_string(),
            ));
        }
        Ok(())
    }
}

pub struct DownBlock<S: Scalar> {
    pub conv: ConvParams<S>,
    /// Absent on the first block of either network.
    pub bn: Option<BatchNormParams<S>>,
}

pub struct UpBlock<S: Scalar> {
    pub conv: ConvParams<S>,
    pub bn: BatchNormParams<S>,
}

/// Learned parameters of one network, keyed by block and role.
pub struct NetParams<S: Scalar> {
    pub spec: NetSpec,
    pub down: Vec<DownBlock<S>>,
    pub up: Vec<UpBlock<S>>,
    /// Segmentor output convolution to `out_channels` class maps.
    pub head: Option<ConvParams<S>>,
}

/// Per-layer critic feature tensors; index 0 is the masked input itself.
pub struct CriticFeatures {
    pub layers: Vec<NodeId>,
}

impl CriticFeatures {
    /// Number of scales, counting the input layer.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// 4 down blocks (conv k4 s2, BN except on the first, leaky ReLU), 4 up
/// blocks (resize 2x, conv k3 s1, BN, leaky ReLU) with encoder features
/// concatenated into the matching decoder inputs, then a k3 s1 head to the
/// class channels followed by a per-class sigmoid.
pub fn build_segmentor<S: Scalar>(spec: &NetSpec, seed: u64) -> Result<NetParams<S>> {
    spec.validate(NetKind::Segmentor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = &spec.feature_map_schedule;
    let d = spec.down_blocks;

    let mut down = Vec::with_capacity(d);
    for i in 0..d {
        let in_c = if i == 0 { spec.in_channels } else { f[i - 1] };
        down.push(DownBlock {
            conv: ConvParams::init(in_c, f[i], 4, 2, &mut rng)?,
            bn: (i > 0).then(|| BatchNormParams::init(f[i])),
        });
    }

    let mut up = Vec::with_capacity(d);
    for j in 0..d {
        // Decoder level j consumes the previous decoder output plus the
        // encoder feature at the same resolution (none at full resolution).
        let in_c = if j < d - 1 {
            f[d - 1 - j] + f[d - 2 - j]
        } else {
            f[0]
        };
        let out_c = if j < d - 1 { f[d - 2 - j] } else { f[0] };
        up.push(UpBlock {
            conv: ConvParams::init(in_c, out_c, 3, 1, &mut rng)?,
            bn: BatchNormParams::init(out_c),
        });
    }

    let head = ConvParams::init(f[0], spec.out_channels, 3, 1, &mut rng)?;

    Ok(NetParams {
        spec: spec.clone(),
        down,
        up,
        head: Some(head),
    })
}

/// 3 feature-extracting down blocks (conv k4 s2, BN except on the first,
/// leaky ReLU). There is no classification head: the critic's output is its
/// feature stack.
pub fn build_critic<S: Scalar>(spec: &NetSpec, seed: u64) -> Result<NetParams<S>> {
    spec.validate(NetKind::Critic)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = &spec.feature_map_schedule;

    let mut down = Vec::with_capacity(spec.down_blocks);
    for i in 0..spec.down_blocks {
        let in_c = if i == 0 { spec.in_channels } else { f[i - 1] };
        down.push(DownBlock {
            conv: ConvParams::init(in_c, f[i], 4, 2, &mut rng)?,
            bn: (i > 0).then(|| BatchNormParams::init(f[i])),
        });
    }

    Ok(NetParams {
        spec: spec.clone(),
        down,
        up: Vec::new(),
        head: None,
    })
}

impl<S: Scalar> NetParams<S> {
    /// Learnable parameters in a fixed traversal order.
    pub fn parameters(&self) -> Vec<Tensor<S>> {
        self.named_parameters().into_iter().map(|(_, _, t)| t).collect()
    }

    /// (name, role, tensor) triples in deterministic order.
    pub fn named_parameters(&self) -> Vec<(String, &'static str, Tensor<S>)> {
        let mut out = Vec::new();
        for (i, b) in self.down.iter().enumerate() {
            out.push((format!("down{i}.conv.weight"), "weight", b.conv.weights.clone()));
            out.push((format!("down{i}.conv.bias"), "bias", b.conv.bias.clone()));
            if let Some(bn) = &b.bn {
                out.push((format!("down{i}.bn.gamma"), "gamma", bn.gamma.clone()));
                out.push((format!("down{i}.bn.beta"), "beta", bn.beta.clone()));
            }
        }
        for (j, b) in self.up.iter().enumerate() {
            out.push((format!("up{j}.conv.weight"), "weight", b.conv.weights.clone()));
            out.push((format!("up{j}.conv.bias"), "bias", b.conv.bias.clone()));
            out.push((format!("up{j}.bn.gamma"), "gamma", b.bn.gamma.clone()));
            out.push((format!("up{j}.bn.beta"), "beta", b.bn.beta.clone()));
        }
        if let Some(h) = &self.head {
            out.push(("head.conv.weight".to_string(), "weight", h.weights.clone()));
            out.push(("head.conv.bias".to_string(), "bias", h.bias.clone()));
        }
        out
    }

    /// Non-learned running statistics, in deterministic order.
    pub fn named_buffers(&self) -> Vec<(String, &'static str, Tensor<S>)> {
        let mut out = Vec::new();
        let mut push_bn = |name: String, bn: &BatchNormParams<S>| {
            out.push((format!("{name}.running_mean"), "running_mean", bn.running_mean.clone()));
            out.push((format!("{name}.running_var"), "running_var", bn.running_var.clone()));
        };
        for (i, b) in self.down.iter().enumerate() {
            if let Some(bn) = &b.bn {
                push_bn(format!("down{i}.bn"), bn);
            }
        }
        for (j, b) in self.up.iter().enumerate() {
            push_bn(format!("up{j}.bn"), &b.bn);
        }
        out
    }

    pub fn set_mode(&self, mode: BnMode) {
        for b in &self.down {
            if let Some(bn) = &b.bn {
                bn.set_mode(mode);
            }
        }
        for b in &self.up {
            b.bn.set_mode(mode);
        }
    }

    /// Snapshot of all learnable parameter values, for bitwise comparisons.
    pub fn snapshot(&self) -> Vec<Vec<S>> {
        self.parameters().iter().map(|p| p.to_vec()).collect()
    }
}

fn check_segmentor_input<S: Scalar>(params: &NetParams<S>, shape: &[usize]) -> Result<()> {
    let (_n, c, h, w) = dims4(shape)?;
    if c != params.spec.in_channels {
        return Err(Error::shape(format!(
            "segmentor expects {} input channels, got {c}",
            params.spec.in_channels
        )));
    }
    let stride = 1usize << params.spec.down_blocks;
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(format!(
            "segmentor input {h}x{w} not divisible by 2^{} = {stride}",
            params.spec.down_blocks
        )));
    }
    Ok(())
}

/// Forward pass producing per-class probability maps in (0,1) with the same
/// spatial dims as the input.
pub fn segmentor_forward<S: Scalar>(
    g: &mut Graph<S>,
    params: &NetParams<S>,
    x: NodeId,
    mode: ParamMode,
) -> Result<NodeId> {
    segmentor_forward_opts(g, params, x, mode, None)
}

/// As [`segmentor_forward`], optionally zeroing one encoder skip connection
/// (wiring diagnostics).
pub fn segmentor_forward_opts<S: Scalar>(
    g: &mut Graph<S>,
    params: &NetParams<S>,
    x: NodeId,
    mode: ParamMode,
    zero_skip: Option<usize>,
) -> Result<NodeId> {
    check_segmentor_input(params, g.shape(x))?;
    let d = params.spec.down_blocks;

    let mut enc = Vec::with_capacity(d);
    let mut cur = x;
    for block in &params.down {
        cur = block.conv.forward(g, cur, mode)?;
        if let Some(bn) = &block.bn {
            cur = bn.forward(g, cur, mode)?;
        }
        cur = leaky_relu(g, cur);
        enc.push(cur);
    }

    for (j, block) in params.up.iter().enumerate() {
        cur = g.resize2x(cur)?;
        if j < d - 1 {
            let skip_idx = d - 2 - j;
            let mut skip = enc[skip_idx];
            if zero_skip == Some(skip_idx) {
                skip = g.scale(skip, S::zero());
            }
            cur = g.concat_channels(&[cur, skip])?;
        }
        cur = block.conv.forward(g, cur, mode)?;
        cur = block.bn.forward(g, cur, mode)?;
        cur = leaky_relu(g, cur);
    }

    let head = params.head.as_ref().expect("segmentor has a head");
    let logits = head.forward(g, cur, mode)?;
    Ok(g.sigmoid(logits))
}

/// Hierarchical feature stack [masked input, block 1 out, ..., block L out];
/// spatial dims halve per successive layer.
pub fn critic_features<S: Scalar>(
    g: &mut Graph<S>,
    params: &NetParams<S>,
    x_masked: NodeId,
    mode: ParamMode,
) -> Result<CriticFeatures> {
    let (_n, c, _h, _w) = dims4(g.shape(x_masked))?;
    if c != params.spec.in_channels {
        return Err(Error::shape(format!(
            "critic expects {} input channels, got {c}",
            params.spec.in_channels
        )));
    }
    let mut layers = Vec::with_capacity(params.down.len() + 1);
    layers.push(x_masked);
    let mut cur = x_masked;
    for block in &params.down {
        cur = block.conv.forward(g, cur, mode)?;
        if let Some(bn) = &block.bn {
            cur = bn.forward(g, cur, mode)?;
        }
        cur = leaky_relu(g, cur);
        layers.push(cur);
    }
    Ok(CriticFeatures { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_segmentor_maps_160_to_160() {
        let spec = NetSpec::segmentor(3, 3).with_base(4);
        let params = build_segmentor::<f32>(&spec, 1).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::full(&[1, 3, 160, 160], 0.3));
        let y = segmentor_forward(&mut g, &params, x, ParamMode::Frozen).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 160, 160]);
        assert!(g.value(y).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn desk_scale_64_roundtrip_shape() {
        let spec = NetSpec::segmentor(3, 3).with_base(8);
        let params = build_segmentor::<f32>(&spec, 2).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::full(&[2, 3, 64, 64], 0.1));
        let y = segmentor_forward(&mut g, &params, x, ParamMode::Frozen).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 64, 64]);
    }

    #[test]
    fn odd_input_size_rejected() {
        // 161 is not divisible by 2^4.
        let spec = NetSpec::segmentor(3, 3).with_base(4);
        let params = build_segmentor::<f32>(&spec, 1).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[1, 3, 160, 161]));
        assert!(segmentor_forward(&mut g, &params, x, ParamMode::Frozen).is_err());
    }

    #[test]
    fn batch_items_are_independent_for_identical_inputs() {
        let spec = NetSpec::segmentor(2, 1).with_base(4);
        let params = build_segmentor::<f32>(&spec, 3).unwrap();
        let mut slice = Vec::new();
        for i in 0..2 * 16 * 16 {
            slice.push(((i * 37 % 101) as f32) / 101.0);
        }
        let mut batch = slice.clone();
        batch.extend_from_slice(&slice);
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::from_shape_vec(&[2, 2, 16, 16], batch).unwrap());
        let y = segmentor_forward(&mut g, &params, x, ParamMode::Frozen).unwrap();
        let v = g.value(y);
        let half = v.len() / 2;
        assert_eq!(v[..half], v[half..]);
    }

    #[test]
    fn critic_feature_dims_halve_and_count_blocks_plus_one() {
        let spec = NetSpec::critic(3).with_base(4);
        let params = build_critic::<f32>(&spec, 4).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::full(&[1, 3, 64, 64], 0.2));
        let feats = critic_features(&mut g, &params, x, ParamMode::Frozen).unwrap();
        assert_eq!(feats.len(), CRITIC_BLOCKS + 1);
        let spatial: Vec<usize> = feats.layers.iter().map(|&id| g.shape(id)[2]).collect();
        assert_eq!(spatial, vec![64, 32, 16, 8]);
        let channels: Vec<usize> = feats.layers.iter().map(|&id| g.shape(id)[1]).collect();
        assert_eq!(channels, vec![3, 4, 8, 16]);
    }

    #[test]
    fn default_critic_channel_schedule() {
        let spec = NetSpec::critic(3);
        assert_eq!(spec.feature_map_schedule, vec![64, 128, 256]);
        let params = build_critic::<f32>(&spec, 0).unwrap();
        let audited: Vec<usize> = params.down.iter().map(|b| b.conv.out_channels()).collect();
        assert_eq!(audited, vec![64, 128, 256]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let spec = NetSpec::critic(1).with_base(4);
        let params = build_critic::<f32>(&spec, 9).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[1, 1, 16, 16]));
        let feats = critic_features(&mut g, &params, x, ParamMode::Frozen).unwrap();
        for &id in &feats.layers {
            assert!(g.value(id).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn builds_are_seed_deterministic() {
        let spec = NetSpec::segmentor(3, 3).with_base(4);
        let a = build_segmentor::<f32>(&spec, 42).unwrap();
        let b = build_segmentor::<f32>(&spec, 42).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
        let c = build_segmentor::<f32>(&spec, 43).unwrap();
        assert_ne!(a.snapshot(), c.snapshot());
    }

    #[test]
    fn zeroing_an_encoder_skip_changes_the_output() {
        let spec = NetSpec::segmentor(2, 1).with_base(4);
        let params = build_segmentor::<f32>(&spec, 7).unwrap();
        let vals: Vec<f32> = (0..2 * 32 * 32).map(|i| ((i % 17) as f32) / 17.0).collect();
        let x_t = Tensor::from_shape_vec(&[1, 2, 32, 32], vals).unwrap();
        let mut g1 = Graph::new();
        let x1 = g1.leaf(&x_t);
        let y1 = segmentor_forward(&mut g1, &params, x1, ParamMode::Frozen).unwrap();
        for skip in 0..3 {
            let mut g2 = Graph::new();
            let x2 = g2.leaf(&x_t);
            let y2 =
                segmentor_forward_opts(&mut g2, &params, x2, ParamMode::Frozen, Some(skip))
                    .unwrap();
            assert_ne!(g1.value(y1), g2.value(y2), "skip {skip} is not wired in");
        }
    }

    #[test]
    fn wrong_spec_kind_rejected() {
        let spec = NetSpec::critic(3);
        assert!(build_segmentor::<f32>(&spec, 0).is_err());
        let spec = NetSpec::segmentor(3, 3);
        assert!(build_critic::<f32>(&spec, 0).is_err());
    }
}
