//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] visits each node exactly once in reverse order.
//! Gradients of leaf nodes are scattered back into the gradient buffers of
//! the tensors they were created from.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::{dims4, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

enum OpKind<S: Scalar> {
    Leaf {
        // Kept alive for the graph's lifetime so the storage-identity cache
        // key cannot be reused by a later allocation.
        source: Option<Tensor<S>>,
        trainable: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: S,
    },
    Hadamard {
        a: NodeId,
        b: NodeId,
        broadcast_b: bool,
    },
    ConcatChannels {
        inputs: Vec<NodeId>,
    },
    SelectChannels {
        x: NodeId,
        start: usize,
        count: usize,
    },
    MeanAbs {
        a: NodeId,
        b: NodeId,
    },
    MeanScalars {
        inputs: Vec<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    },
    Resize2x {
        x: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: S,
    },
    Sigmoid {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    BceMean {
        pred: NodeId,
        target: NodeId,
    },
}

impl<S: Scalar> OpKind<S> {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf { .. } => "leaf",
            OpKind::Add { .. } => "add",
            OpKind::Scale { .. } => "scale",
            OpKind::Hadamard { .. } => "hadamard",
            OpKind::ConcatChannels { .. } => "concat_channels",
            OpKind::SelectChannels { .. } => "select_channels",
            OpKind::MeanAbs { .. } => "mean_abs",
            OpKind::MeanScalars { .. } => "mean_scalars",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Resize2x { .. } => "resize2x",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Sigmoid { .. } => "sigmoid",
            OpKind::BatchNorm { .. } => "batch_norm",
            OpKind::BceMean { .. } => "bce_mean",
        }
    }
}

struct Node<S: Scalar> {
    op: OpKind<S>,
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    // (storage id, frozen) -> node, so a parameter used several times in one
    // pass maps to a single node and its gradients accumulate there.
    leaf_cache: HashMap<(usize, bool), NodeId>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn wants_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, id: NodeId) -> S {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient accumulated at a node during the last backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Detached copy of a node's value.
    pub fn detach(&self, id: NodeId) -> Tensor<S> {
        Tensor::from_shape_vec(&self.nodes[id.0].shape, self.nodes[id.0].data.clone())
            .expect("node shape is consistent")
    }

    fn push(&mut self, op: OpKind<S>, shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> NodeId {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {} op",
            op.name()
        );
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
            grad: None,
        });
        id
    }

    /// Bring an external tensor into the graph. Gradients flow back into the
    /// tensor's own buffer if it requires grad.
    pub fn leaf(&mut self, t: &Tensor<S>) -> NodeId {
        self.leaf_with(t, false)
    }

    /// Bring an external tensor in as a constant, regardless of its
    /// requires-grad flag. Used to freeze one player's parameters.
    pub fn leaf_frozen(&mut self, t: &Tensor<S>) -> NodeId {
        self.leaf_with(t, true)
    }

    fn leaf_with(&mut self, t: &Tensor<S>, frozen: bool) -> NodeId {
        let key = (t.storage_id(), frozen);
        if let Some(&id) = self.leaf_cache.get(&key) {
            return id;
        }
        let requires = !frozen && t.wants_grad();
        let d = t.data();
        let (shape, data) = (d.shape.clone(), d.data.clone());
        drop(d);
        let id = self.push(
            OpKind::Leaf {
                source: Some(t.clone()),
                trainable: requires,
            },
            shape,
            data,
            requires,
        );
        self.leaf_cache.insert(key, id);
        id
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "constant shape {shape:?} expected {numel} values, got {}",
                data.len()
            )));
        }
        Ok(self.push(
            OpKind::Leaf {
                source: None,
                trainable: false,
            },
            shape.to_vec(),
            data,
            false,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let requires = self.wants_grad(a) || self.wants_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(OpKind::Add { a, b }, shape, data, requires))
    }

    pub fn scale(&mut self, a: NodeId, factor: S) -> NodeId {
        let data: Vec<S> = self.value(a).iter().map(|x| *x * factor).collect();
        let requires = self.wants_grad(a);
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Scale { a, factor }, shape, data, requires)
    }

    /// Elementwise product. `b` may instead be a single-channel 4-D map that
    /// matches `a` in batch and spatial dims; it is then broadcast over the
    /// channels of `a`.
    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let broadcast_b = if sa == sb {
            false
        } else {
            let (na, _ca, ha, wa) = dims4(&sa)?;
            let (nb, cb, hb, wb) = dims4(&sb)?;
            if cb == 1 && na == nb && ha == hb && wa == wb {
                true
            } else {
                return Err(Error::shape(format!(
                    "hadamard shape mismatch: {sa:?} vs {sb:?}"
                )));
            }
        };
        let data = if broadcast_b {
            let (n, c, h, w) = dims4(&sa)?;
            let av = self.value(a);
            let bv = self.value(b);
            let mut out = vec![S::zero(); av.len()];
            let hw = h * w;
            for ni in 0..n {
                let mask = &bv[ni * hw..(ni + 1) * hw];
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        out[base + i] = av[base + i] * mask[i];
                    }
                }
            }
            out
        } else {
            self.value(a)
                .iter()
                .zip(self.value(b))
                .map(|(x, y)| *x * *y)
                .collect()
        };
        let requires = self.wants_grad(a) || self.wants_grad(b);
        Ok(self.push(OpKind::Hadamard { a, b, broadcast_b }, sa, data, requires))
    }

    /// Concatenate 4-D tensors along the channel dimension, order preserved.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::shape("concat_channels of empty list".to_string()));
        }
        let (n0, _c0, h0, w0) = dims4(self.shape(inputs[0]))?;
        let mut channels = 0;
        for &id in inputs {
            let (n, c, h, w) = dims4(self.shape(id))?;
            if (n, h, w) != (n0, h0, w0) {
                return Err(Error::shape(format!(
                    "concat_channels mismatch: {:?} vs {:?}",
                    self.shape(inputs[0]),
                    self.shape(id)
                )));
            }
            channels += c;
        }
        let hw = h0 * w0;
        let mut data = vec![S::zero(); n0 * channels * hw];
        for ni in 0..n0 {
            let mut off = 0;
            for &id in inputs {
                let c = self.shape(id)[1];
                let src = &self.value(id)[ni * c * hw..(ni + 1) * c * hw];
                data[(ni * channels + off) * hw..(ni * channels + off + c) * hw]
                    .copy_from_slice(src);
                off += c;
            }
        }
        let requires = inputs.iter().any(|&id| self.wants_grad(id));
        Ok(self.push(
            OpKind::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            vec![n0, channels, h0, w0],
            data,
            requires,
        ))
    }

    /// Take a contiguous channel range out of a 4-D tensor.
    pub fn select_channels(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if start + count > c {
            return Err(Error::shape(format!(
                "select_channels {start}..{} out of {c} channels",
                start + count
            )));
        }
        let hw = h * w;
        let mut data = vec![S::zero(); n * count * hw];
        let xv = self.value(x);
        for ni in 0..n {
            let src = &xv[(ni * c + start) * hw..(ni * c + start + count) * hw];
            data[ni * count * hw..(ni + 1) * count * hw].copy_from_slice(src);
        }
        let requires = self.wants_grad(x);
        Ok(self.push(
            OpKind::SelectChannels { x, start, count },
            vec![n, count, h, w],
            data,
            requires,
        ))
    }

    /// Mean absolute difference, a scalar: (1/numel) * sum |a_i - b_i|.
    pub fn mean_abs(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mean_abs shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut acc = 0.0f64;
        for (x, y) in self.value(a).iter().zip(self.value(b)) {
            acc += (*x - *y).abs().as_f64();
        }
        let numel = self.value(a).len();
        let mean = S::from_f64(acc / numel as f64);
        let requires = self.wants_grad(a) || self.wants_grad(b);
        Ok(self.push(OpKind::MeanAbs { a, b }, vec![1], vec![mean], requires))
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean_scalars(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::shape("mean_scalars of empty list".to_string()));
        }
        let mut acc = 0.0f64;
        for &id in inputs {
            if self.value(id).len() != 1 {
                return Err(Error::shape(format!(
                    "mean_scalars expects scalar nodes, got shape {:?}",
                    self.shape(id)
                )));
            }
            acc += self.scalar_value(id).as_f64();
        }
        let mean = S::from_f64(acc / inputs.len() as f64);
        let requires = inputs.iter().any(|&id| self.wants_grad(id));
        Ok(self.push(
            OpKind::MeanScalars {
                inputs: inputs.to_vec(),
            },
            vec![1],
            vec![mean],
            requires,
        ))
    }

    /// Cross-correlation with bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (n, c, h, wd) = dims4(self.shape(x))?;
        let (oc, ic, kh, kw) = dims4(self.shape(w))?;
        if kh != kw {
            return Err(Error::shape(format!("non-square kernel {kh}x{kw}")));
        }
        if ic != c {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {ic}"
            )));
        }
        if self.shape(b) != [oc] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?}, expected [{oc}]",
                self.shape(b)
            )));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kh {
            return Err(Error::shape(format!(
                "conv2d input {h}x{wd} smaller than kernel {kh} with padding {padding}"
            )));
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: wd,
            out_channels: oc,
            kernel: kh,
            stride,
            padding,
            out_h: kernels::conv_out_dim(h, kh, stride, padding),
            out_w: kernels::conv_out_dim(wd, kh, stride, padding),
        };
        let data = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        let shape = vec![n, oc, geom.out_h, geom.out_w];
        let requires = self.wants_grad(x) || self.wants_grad(w) || self.wants_grad(b);
        Ok(self.push(
            OpKind::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            shape,
            data,
            requires,
        ))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn resize2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        let data = kernels::resize2x_forward(self.value(x), n, c, h, w);
        let requires = self.wants_grad(x);
        Ok(self.push(
            OpKind::Resize2x { x },
            vec![n, c, 2 * h, 2 * w],
            data,
            requires,
        ))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: S) -> NodeId {
        let data: Vec<S> = self
            .value(x)
            .iter()
            .map(|&v| if v >= S::zero() { v } else { slope * v })
            .collect();
        let requires = self.wants_grad(x);
        let shape = self.shape(x).to_vec();
        self.push(OpKind::LeakyRelu { x, slope }, shape, data, requires)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data: Vec<S> = self
            .value(x)
            .iter()
            .map(|&v| {
                // Numerically stable in both tails.
                if v >= S::zero() {
                    S::one() / (S::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (S::one() + e)
                }
            })
            .collect();
        let requires = self.wants_grad(x);
        let shape = self.shape(x).to_vec();
        self.push(OpKind::Sigmoid { x }, shape, data, requires)
    }

    /// Channel-wise affine normalization with the given statistics.
    /// `mean`/`inv_std` are per-channel; in train mode they are batch
    /// statistics and the backward pass differentiates through them.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        mean: Vec<S>,
        inv_std: Vec<S>,
    ) -> Result<NodeId> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if mean.len() != c || inv_std.len() != c {
            return Err(Error::shape(format!(
                "batch_norm stats for {} channels, input has {c}",
                mean.len()
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch_norm affine shapes {:?}/{:?}, expected [{c}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let hw = h * w;
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut data = vec![S::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let (m, is, ga, be) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for i in 0..hw {
                    data[base + i] = ga * (xv[base + i] - m) * is + be;
                }
            }
        }
        let requires = self.wants_grad(x) || self.wants_grad(gamma) || self.wants_grad(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            OpKind::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                mean,
                inv_std,
            },
            shape,
            data,
            requires,
        ))
    }

    /// Mean binary cross-entropy with probabilities clamped to
    /// [1e-7, 1 - 1e-7]. The target carries no gradient.
    pub fn bce_mean(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(format!(
                "bce shape mismatch: {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let lo = 1e-7f64;
        let hi = 1.0 - 1e-7f64;
        let mut acc = 0.0f64;
        for (p, t) in self.value(pred).iter().zip(self.value(target)) {
            let pc = p.as_f64().clamp(lo, hi);
            let tv = t.as_f64();
            acc -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
        }
        let numel = self.value(pred).len();
        let loss = S::from_f64(acc / numel as f64);
        let requires = self.wants_grad(pred);
        Ok(self.push(OpKind::BceMean { pred, target }, vec![1], vec![loss], requires))
    }

    /// Populate gradients of every requires-grad node reachable from `loss`,
    /// then scatter leaf gradients into their source tensors (accumulating).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i);
        }
        // Scatter into external tensors.
        for node in &self.nodes {
            if let (
                OpKind::Leaf {
                    source: Some(t),
                    trainable: true,
                },
                Some(g),
            ) = (&node.op, &node.grad)
            {
                t.accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn accumulate(head: &mut [Node<S>], id: NodeId, contribution: &[S]) {
        let node = &mut head[id.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += *ci;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    fn backprop_node(&mut self, i: usize) {
        let (head, tail) = self.nodes.split_at_mut(i);
        let node = &tail[0];
        let g = node.grad.as_ref().expect("checked by caller");
        let wants = |head: &[Node<S>], id: NodeId| head[id.0].requires_grad;
        match &node.op {
            OpKind::Leaf { .. } => {}
            OpKind::Add { a, b } => {
                Self::accumulate(head, *a, g);
                Self::accumulate(head, *b, g);
            }
            OpKind::Scale { a, factor } => {
                let contrib: Vec<S> = g.iter().map(|&v| v * *factor).collect();
                Self::accumulate(head, *a, &contrib);
            }
            OpKind::Hadamard { a, b, broadcast_b } => {
                let (n, c, hw) = if *broadcast_b {
                    let s = &head[a.0].shape;
                    (s[0], s[1], s[2] * s[3])
                } else {
                    (1, 1, g.len())
                };
                if wants(head, *a) {
                    let bv = &head[b.0].data;
                    let mut contrib = vec![S::zero(); head[a.0].data.len()];
                    if *broadcast_b {
                        for ni in 0..n {
                            let mask = &bv[ni * hw..(ni + 1) * hw];
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                for k in 0..hw {
                                    contrib[base + k] = g[base + k] * mask[k];
                                }
                            }
                        }
                    } else {
                        for (out, (gi, bi)) in contrib.iter_mut().zip(g.iter().zip(bv)) {
                            *out = *gi * *bi;
                        }
                    }
                    Self::accumulate(head, *a, &contrib);
                }
                if wants(head, *b) {
                    let av = &head[a.0].data;
                    let mut contrib = vec![S::zero(); head[b.0].data.len()];
                    if *broadcast_b {
                        for ni in 0..n {
                            let dst = &mut contrib[ni * hw..(ni + 1) * hw];
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                for k in 0..hw {
                                    dst[k] += g[base + k] * av[base + k];
                                }
                            }
                        }
                    } else {
                        for (out, (gi, ai)) in contrib.iter_mut().zip(g.iter().zip(av)) {
                            *out = *gi * *ai;
                        }
                    }
                    Self::accumulate(head, *b, &contrib);
                }
            }
            OpKind::ConcatChannels { inputs } => {
                let n = node.shape[0];
                let total_c = node.shape[1];
                let hw = node.shape[2] * node.shape[3];
                let inputs = inputs.clone();
                let mut off = 0;
                for id in inputs {
                    let c = head[id.0].shape[1];
                    if wants(head, id) {
                        let mut contrib = vec![S::zero(); n * c * hw];
                        for ni in 0..n {
                            let src = &g[(ni * total_c + off) * hw..(ni * total_c + off + c) * hw];
                            contrib[ni * c * hw..(ni + 1) * c * hw].copy_from_slice(src);
                        }
                        Self::accumulate(head, id, &contrib);
                    }
                    off += c;
                }
            }
            OpKind::SelectChannels { x, start, count } => {
                let (n, c) = (head[x.0].shape[0], head[x.0].shape[1]);
                let hw = head[x.0].shape[2] * head[x.0].shape[3];
                let mut contrib = vec![S::zero(); head[x.0].data.len()];
                for ni in 0..n {
                    let dst =
                        &mut contrib[(ni * c + start) * hw..(ni * c + start + count) * hw];
                    dst.copy_from_slice(&g[ni * count * hw..(ni + 1) * count * hw]);
                }
                Self::accumulate(head, *x, &contrib);
            }
            OpKind::MeanAbs { a, b } => {
                let scale = g[0] / S::from_usize(head[a.0].data.len());
                let signs: Vec<S> = head[a.0]
                    .data
                    .iter()
                    .zip(&head[b.0].data)
                    .map(|(x, y)| {
                        // Subgradient 0 at the kink.
                        if *x > *y {
                            scale
                        } else if *x < *y {
                            -scale
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                if wants(head, *a) {
                    Self::accumulate(head, *a, &signs);
                }
                if wants(head, *b) {
                    let neg: Vec<S> = signs.iter().map(|&v| -v).collect();
                    Self::accumulate(head, *b, &neg);
                }
            }
            OpKind::MeanScalars { inputs } => {
                let share = [g[0] / S::from_usize(inputs.len())];
                for id in inputs.clone() {
                    Self::accumulate(head, id, &share);
                }
            }
            OpKind::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let xs = &head[x.0].shape;
                let ws = &head[w.0].shape;
                let geom = ConvGeometry {
                    batch: xs[0],
                    in_channels: xs[1],
                    in_h: xs[2],
                    in_w: xs[3],
                    out_channels: ws[0],
                    kernel: ws[2],
                    stride: *stride,
                    padding: *padding,
                    out_h: node.shape[2],
                    out_w: node.shape[3],
                };
                let grads = kernels::conv2d_backward(
                    &head[x.0].data,
                    &head[w.0].data,
                    g,
                    &geom,
                    wants(head, *x),
                    wants(head, *w),
                    wants(head, *b),
                );
                if let Some(dx) = grads.dx {
                    Self::accumulate(head, *x, &dx);
                }
                if let Some(dw) = grads.dw {
                    Self::accumulate(head, *w, &dw);
                }
                if let Some(db) = grads.db {
                    Self::accumulate(head, *b, &db);
                }
            }
            OpKind::Resize2x { x } => {
                let s = &head[x.0].shape;
                let dx = kernels::resize2x_backward(g, s[0], s[1], s[2], s[3]);
                Self::accumulate(head, *x, &dx);
            }
            OpKind::LeakyRelu { x, slope } => {
                let contrib: Vec<S> = head[x.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| {
                        if xv > S::zero() {
                            gv
                        } else if xv < S::zero() {
                            gv * *slope
                        } else {
                            // Subgradient 0 at the kink.
                            S::zero()
                        }
                    })
                    .collect();
                Self::accumulate(head, *x, &contrib);
            }
            OpKind::Sigmoid { x } => {
                let contrib: Vec<S> = node
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (S::one() - y))
                    .collect();
                Self::accumulate(head, *x, &contrib);
            }
            OpKind::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                mean,
                inv_std,
            } => {
                let (n, c) = (head[x.0].shape[0], head[x.0].shape[1]);
                let hw = head[x.0].shape[2] * head[x.0].shape[3];
                let m = (n * hw) as f64;
                let xv = &head[x.0].data;
                let gv = &head[gamma.0].data;

                // Per-channel reductions in f64.
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let (mu, is) = (mean[ci].as_f64(), inv_std[ci].as_f64());
                        for k in 0..hw {
                            let dy = g[base + k].as_f64();
                            let xhat = (xv[base + k].as_f64() - mu) * is;
                            sum_dy[ci] += dy;
                            sum_dy_xhat[ci] += dy * xhat;
                        }
                    }
                }

                if wants(head, *x) {
                    let mut contrib = vec![S::zero(); xv.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let (mu, is) = (mean[ci].as_f64(), inv_std[ci].as_f64());
                            let ga = gv[ci].as_f64();
                            match mode {
                                BnMode::Train => {
                                    let mean_dy = sum_dy[ci] / m;
                                    let mean_dy_xhat = sum_dy_xhat[ci] / m;
                                    for k in 0..hw {
                                        let dy = g[base + k].as_f64();
                                        let xhat = (xv[base + k].as_f64() - mu) * is;
                                        contrib[base + k] = S::from_f64(
                                            ga * is * (dy - mean_dy - xhat * mean_dy_xhat),
                                        );
                                    }
                                }
                                BnMode::Eval => {
                                    for k in 0..hw {
                                        let dy = g[base + k].as_f64();
                                        contrib[base + k] = S::from_f64(ga * is * dy);
                                    }
                                }
                            }
                        }
                    }
                    Self::accumulate(head, *x, &contrib);
                }
                if wants(head, *gamma) {
                    let contrib: Vec<S> = sum_dy_xhat.iter().map(|&v| S::from_f64(v)).collect();
                    Self::accumulate(head, *gamma, &contrib);
                }
                if wants(head, *beta) {
                    let contrib: Vec<S> = sum_dy.iter().map(|&v| S::from_f64(v)).collect();
                    Self::accumulate(head, *beta, &contrib);
                }
            }
            OpKind::BceMean { pred, target } => {
                if wants(head, *pred) {
                    let lo = 1e-7f64;
                    let hi = 1.0 - 1e-7f64;
                    let numel = head[pred.0].data.len() as f64;
                    let g0 = g[0].as_f64();
                    let contrib: Vec<S> = head[pred.0]
                        .data
                        .iter()
                        .zip(&head[target.0].data)
                        .map(|(p, t)| {
                            let pv = p.as_f64();
                            if pv < lo || pv > hi {
                                // Clamp is active; no gradient through it.
                                S::zero()
                            } else {
                                let tv = t.as_f64();
                                S::from_f64(g0 * (-tv / pv + (1.0 - tv) / (1.0 - pv)) / numel)
                            }
                        })
                        .collect();
                    Self::accumulate(head, *pred, &contrib);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_shape_vec(shape, v).unwrap()
    }

    #[test]
    fn hadamard_identity_and_zero_masks() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let ones = g.leaf(&t(&[4], vec![1.0; 4]));
        let zeros = g.leaf(&t(&[4], vec![0.0; 4]));
        let id = g.hadamard(a, ones).unwrap();
        assert_eq!(g.value(id), &[1.0, 2.0, 3.0, 4.0]);
        let z = g.hadamard(a, zeros).unwrap();
        assert_eq!(g.value(z), &[0.0; 4]);
    }

    #[test]
    fn hadamard_channel_broadcast_matches_per_channel_loop() {
        let a_vals: Vec<f64> = (0..12).map(|i| i as f64 + 1.0).collect();
        let mask_vals = vec![0.5; 4];
        let mut g = Graph::new();
        let a = g.leaf(&t(&[1, 3, 2, 2], a_vals.clone()));
        let b = g.leaf(&t(&[1, 1, 2, 2], mask_vals.clone()));
        let out = g.hadamard(a, b).unwrap();
        // Explicit per-channel oracle.
        let mut expect = vec![0.0; 12];
        for c in 0..3 {
            for i in 0..4 {
                expect[c * 4 + i] = a_vals[c * 4 + i] * mask_vals[i];
            }
        }
        assert_eq!(g.value(out), &expect[..]);
    }

    #[test]
    fn hadamard_incompatible_shapes_error() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[1, 3, 2, 2], vec![0.0; 12]));
        let b = g.leaf(&t(&[1, 2, 2, 2], vec![0.0; 8]));
        assert!(g.hadamard(a, b).is_err());
    }

    #[test]
    fn concat_channels_shapes_and_order() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[1, 1, 2, 2], vec![1.0; 4]));
        let b = g.leaf(&t(&[1, 1, 2, 2], vec![2.0; 4]));
        let out = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(out), &[1, 2, 2, 2]);
        assert_eq!(g.value(out), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);

        let c3: Vec<NodeId> = (0..3)
            .map(|i| g.leaf(&t(&[1, 1, 160, 160], vec![i as f64; 160 * 160])))
            .collect();
        let out3 = g.concat_channels(&c3).unwrap();
        assert_eq!(g.shape(out3), &[1, 3, 160, 160]);

        let tall = g.leaf(&t(&[1, 1, 3, 2], vec![0.0; 6]));
        assert!(g.concat_channels(&[a, tall]).is_err());
    }

    #[test]
    fn mean_abs_values() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2], vec![1.0, 2.0]));
        let b = g.leaf(&t(&[2], vec![0.0, 0.0]));
        let m = g.mean_abs(a, b).unwrap();
        assert_eq!(g.scalar_value(m), 1.5);

        let same = g.mean_abs(a, a).unwrap();
        assert_eq!(g.scalar_value(same), 0.0);

        let x = g.leaf(&t(&[1], vec![-1.0]));
        let y = g.leaf(&t(&[1], vec![1.0]));
        let d = g.mean_abs(x, y).unwrap();
        assert_eq!(g.scalar_value(d), 2.0);

        let bad = g.leaf(&t(&[3], vec![0.0; 3]));
        assert!(g.mean_abs(a, bad).is_err());
    }

    #[test]
    fn backward_sign_of_l1() {
        let w = t(&[1], vec![3.0]).requires_grad();
        let mut g = Graph::new();
        let wid = g.leaf(&w);
        let c = g.constant(&[1], vec![1.0]).unwrap();
        let loss = g.mean_abs(wid, c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(w.grad_vec().unwrap(), vec![1.0]);
    }

    #[test]
    fn backward_fan_out_doubles_gradient() {
        let w = t(&[1], vec![2.0]).requires_grad();
        let mut g = Graph::new();
        let wid = g.leaf(&w);
        let sum = g.add(wid, wid).unwrap();
        let c = g.constant(&[1], vec![0.0]).unwrap();
        let loss = g.mean_abs(sum, c).unwrap();
        g.backward(loss).unwrap();
        // d|2w|/dw = 2 for w > 0.
        assert_eq!(w.grad_vec().unwrap(), vec![2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2], vec![1.0, 2.0]).requires_grad());
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn leaf_dedup_accumulates_once_per_pass() {
        let w = t(&[2], vec![1.0, 2.0]).requires_grad();
        let mut g = Graph::new();
        let a = g.leaf(&w);
        let b = g.leaf(&w);
        assert_eq!(a, b);
    }

    #[test]
    fn backward_linearity_on_shared_leaves() {
        // grad of a*f + b*g equals a*grad(f) + b*grad(g).
        let make = |coeff_f: f64, coeff_g: f64| -> Vec<f64> {
            let x = t(&[3], vec![0.5, -1.5, 2.0]).requires_grad();
            let mut g = Graph::new();
            let xid = g.leaf(&x);
            let c1 = g.constant(&[3], vec![0.1, 0.2, 0.3]).unwrap();
            let c2 = g.constant(&[3], vec![1.0, -1.0, 0.5]).unwrap();
            let f = g.mean_abs(xid, c1).unwrap();
            let h = g.hadamard(xid, c2).unwrap();
            let gl = g.mean_abs(h, c1).unwrap();
            let sf = g.scale(f, coeff_f);
            let sg = g.scale(gl, coeff_g);
            let loss = g.add(sf, sg).unwrap();
            g.backward(loss).unwrap();
            x.grad_vec().unwrap()
        };
        let gf = make(1.0, 0.0);
        let gg = make(0.0, 1.0);
        let combined = make(2.0, 3.0);
        for i in 0..3 {
            assert!((combined[i] - (2.0 * gf[i] + 3.0 * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_values_and_gradient() {
        let x = t(&[3], vec![0.0, 40.0, -40.0]).requires_grad();
        let mut g = Graph::new();
        let xid = g.leaf(&x);
        let y = g.sigmoid(xid);
        let v = g.value(y);
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!(v[2] >= 0.0 && v[2] < 1e-12);

        // Gradient at 0 is 0.25.
        let c = g.constant(&[3], vec![0.0; 3]).unwrap();
        let diff = g.mean_abs(y, c).unwrap();
        g.backward(diff).unwrap();
        let grad = x.grad_vec().unwrap();
        // loss = mean(|sigmoid(x)|)/1, d/dx0 = 0.25/3
        assert!((grad[0] - 0.25 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], vec![2.0, -1.0]));
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y), &[2.0, -0.2]);
    }
}
