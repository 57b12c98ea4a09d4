//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is the tape: every op appends one node holding its output
//! value and whatever the backward rule needs. [`Graph::backward`] walks the
//! nodes once in reverse order and accumulates gradients into every node that
//! depends on a trainable leaf.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnDims, ConvDims, ConvGeometry};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

enum Op {
    Leaf,
    Reshape {
        x: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dims: ConvDims,
    },
    /// `dims` describes the adjoint convolution (output map → input map).
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dims: ConvDims,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        dim: usize,
    },
    Activation {
        x: NodeId,
        kind: Activation,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
    Gather {
        x: NodeId,
        index: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bias: Option<NodeId>,
        probs: Vec<f64>,
        scale: f64,
        dims: AttnDims,
    },
    MeanTokens {
        x: NodeId,
        batch: usize,
        tokens: usize,
        dim: usize,
    },
    Sum {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Reshape { .. } => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Linear { .. } => "linear",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Activation { kind: Activation::Relu, .. } => "relu",
            Op::Activation { kind: Activation::Gelu, .. } => "gelu",
            Op::Add { .. } => "add",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Gather { .. } => "gather",
            Op::Attention { .. } => "window_attention",
            Op::MeanTokens { .. } => "mean_tokens",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, NodeId>,
    trainable_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A tape whose parameters are trainable leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            trainable_params: true,
        }
    }

    /// A tape whose parameters are bound as constants (evaluation).
    pub fn inference() -> Self {
        Self {
            trainable_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Every node in recording order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[Option<NodeId>]) -> bool {
        ids.iter().flatten().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter from `store`. Binding the same name twice
    /// returns the original node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let id = self.push(value, Op::Leaf, self.trainable_params);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn bound_params(&self) -> &IndexMap<String, NodeId> {
        &self.params
    }

    /// A constant copy of `id`; gradients do not flow through it.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.nodes[id.0].value.clone();
        self.constant(value)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        geom.validate()?;
        let [n, cin, ih, iw] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} has {cin} channels but kernel {:?} expects {wcin}",
                    self.shape(x),
                    self.shape(w)
                ),
            ));
        }
        self.check_bias("conv2d", b, cout)?;
        let (oh, ow) = geom
            .conv_output_size((ih, iw), (kh, kw))
            .filter(|&(h, w)| h > 0 && w > 0)
            .ok_or_else(|| {
                Error::shape(
                    "conv2d",
                    format!("kernel {kh}x{kw} with {geom:?} yields an empty output for {ih}x{iw} input"),
                )
            })?;
        let dims = ConvDims {
            n,
            cin,
            ih,
            iw,
            cout,
            kh,
            kw,
            oh,
            ow,
            geom,
        };
        let out = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let value = Tensor::new(&[n, cout, oh, ow], out)?;
        let rg = self.any_grad(&[Some(x), Some(w), b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, dims }, rg))
    }

    /// Transposed convolution with kernel layout `(in_channels, out_channels, kh, kw)`.
    /// It is the exact adjoint of [`Graph::conv2d`] with the same kernel and geometry.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        geom.validate()?;
        let [n, cin, ih, iw] = self.value(x).dims4()?;
        let [wcin, cout, kh, kw] = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::shape(
                "conv_transpose2d",
                format!(
                    "input {:?} has {cin} channels but kernel {:?} expects {wcin}",
                    self.shape(x),
                    self.shape(w)
                ),
            ));
        }
        self.check_bias("conv_transpose2d", b, cout)?;
        let (oh, ow) = geom.transposed_output_size((ih, iw), (kh, kw)).ok_or_else(|| {
            Error::shape(
                "conv_transpose2d",
                format!("geometry {geom:?} yields an empty output for {ih}x{iw} input"),
            )
        })?;
        let dims = ConvDims {
            n,
            cin: cout,
            ih: oh,
            iw: ow,
            cout: cin,
            kh,
            kw,
            oh: ih,
            ow: iw,
            geom,
        };
        let mut out = kernels::conv_backward_input(self.value(x).data(), self.value(w).data(), &dims);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (idx, plane) in out.chunks_mut(oh * ow).enumerate() {
                let bv = bias[idx % cout];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(&[n, cout, oh, ow], out)?;
        let rg = self.any_grad(&[Some(x), Some(w), b]);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, dims }, rg))
    }

    fn check_bias(&self, op: &'static str, b: Option<NodeId>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(Error::shape(
                    op,
                    format!("bias {:?} does not match {channels} output channels", self.shape(b)),
                ));
            }
        }
        Ok(())
    }

    /// `y = x W^T + b` over the last axis of `x`; `w` is `(out, in)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let (fan_out, fan_in) = match *self.shape(w) {
            [o, i] => (o, i),
            _ => {
                return Err(Error::shape(
                    "linear",
                    format!("weight must be (out, in), got {:?}", self.shape(w)),
                ))
            }
        };
        if xs.last() != Some(&fan_in) {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?} does not end in {fan_in} features (weight {:?})", self.shape(w)),
            ));
        }
        self.check_bias("linear", b, fan_out)?;
        let rows = xs[..xs.len() - 1].iter().product();
        let out = kernels::matmul_xwt(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            rows,
            fan_in,
            fan_out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = fan_out;
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[Some(x), Some(w), b]);
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
            rg,
        ))
    }

    /// Normalizes over the last axis, then applies per-feature gain and shift.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        let dim = *xs.last().filter(|&&d| d > 0).ok_or_else(|| {
            Error::shape("layer_norm", format!("input {xs:?} has no feature axis"))
        })?;
        for p in [gain, shift] {
            if self.shape(p) != [dim] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("parameter {:?} does not match feature size {dim}", self.shape(p)),
                ));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let rows = src.len() / dim;
        let mut normalized = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * dim..][..dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..dim {
                let nv = (row[j] - mean) * inv;
                normalized[r * dim + j] = nv;
                out[r * dim + j] = nv * g[j] + s[j];
            }
        }
        let value = Tensor::new(&xs, out)?;
        let rg = self.any_grad(&[Some(x), Some(gain), Some(shift)]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
                dim,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let value = match kind {
            Activation::Relu => self.value(x).map(|v| v.max(0.0)),
            Activation::Gelu => self.value(x).map(gelu),
        };
        let rg = self.requires_grad(x);
        self.push(value, Op::Activation { x, kind }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Gelu)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// `sum_i w_i * x_i`, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let (&(first, _), rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("weighted_sum needs at least one term".into()))?;
        let shape = self.shape(first).to_vec();
        for &(id, _) in rest {
            if self.shape(id) != shape.as_slice() {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("{shape:?} vs {:?}", self.shape(id)),
                ));
            }
        }
        let mut data = vec![0.0; shape.iter().product()];
        for (i, &(id, w)) in terms.iter().enumerate() {
            let src = self.value(id).data();
            if i == 0 {
                data.iter_mut().zip(src).for_each(|(d, s)| *d = w * s);
            } else {
                data.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
            }
        }
        let value = Tensor::new(&shape, data)?;
        let ids: Vec<Option<NodeId>> = terms.iter().map(|&(id, _)| Some(id)).collect();
        let rg = self.any_grad(&ids);
        Ok(self.push(
            value,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.weighted_sum(&[(x, factor)])
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: NodeId, index: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices cannot fill shape {shape:?}", index.len()),
            ));
        }
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for input of {} values", src.len()),
            ));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    /// Permutes the axes of `x`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if perm.len() != shape.len() {
            return Err(Error::shape(
                "permute",
                format!("permutation {perm:?} does not match rank of {shape:?}"),
            ));
        }
        let (out_shape, index) = crate::layout::permute(&shape, perm);
        self.gather(x, index, &out_shape)
    }

    /// Fused scaled dot-product attention applied independently per
    /// `(group, head)`. `q`, `k`, `v` are `(groups, heads, tokens, head_dim)`;
    /// `bias` is `(heads, tokens, tokens)`; `mask` is `(windows, tokens, tokens)`
    /// and group `g` uses mask `g % windows`.
    pub fn window_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bias: Option<NodeId>,
        mask: Option<&Tensor>,
        scale: f64,
    ) -> Result<NodeId> {
        let qs = self.shape(q).to_vec();
        let [groups, heads, tokens, head_dim] = match *qs.as_slice() {
            [g, h, n, d] => [g, h, n, d],
            _ => {
                return Err(Error::shape(
                    "window_attention",
                    format!("q must be (groups, heads, tokens, head_dim), got {qs:?}"),
                ))
            }
        };
        for t in [k, v] {
            if self.shape(t) != qs.as_slice() {
                return Err(Error::shape(
                    "window_attention",
                    format!("q {qs:?} vs {:?}", self.shape(t)),
                ));
            }
        }
        if let Some(b) = bias {
            if self.shape(b) != [heads, tokens, tokens] {
                return Err(Error::shape(
                    "window_attention",
                    format!("bias {:?} must be ({heads}, {tokens}, {tokens})", self.shape(b)),
                ));
            }
        }
        let windows = match mask {
            Some(m) => match *m.shape() {
                [nw, a, b] if a == tokens && b == tokens && nw > 0 && groups % nw == 0 => nw,
                _ => {
                    return Err(Error::shape(
                        "window_attention",
                        format!(
                            "mask {:?} must be (windows, {tokens}, {tokens}) with windows dividing {groups}",
                            m.shape()
                        ),
                    ))
                }
            },
            None => 1,
        };
        let dims = AttnDims {
            groups,
            heads,
            tokens,
            head_dim,
            windows,
        };
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            bias.map(|b| self.value(b).data()),
            mask.map(Tensor::data),
            scale,
            &dims,
        );
        let value = Tensor::new(&qs, out)?;
        let rg = self.any_grad(&[Some(q), Some(k), Some(v), bias]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                bias,
                probs,
                scale,
                dims,
            },
            rg,
        ))
    }

    /// Attention probabilities saved by a [`Graph::window_attention`] node,
    /// laid out `(groups, heads, tokens, tokens)`.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `(batch, tokens, dim)` → `(batch, dim)` mean over tokens.
    pub fn mean_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let [batch, tokens, dim] = match *self.shape(x) {
            [b, n, d] if n > 0 => [b, n, d],
            _ => {
                return Err(Error::shape(
                    "mean_tokens",
                    format!("expected (batch, tokens>0, dim), got {:?}", self.shape(x)),
                ))
            }
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; batch * dim];
        for b in 0..batch {
            for t in 0..tokens {
                let row = &src[(b * tokens + t) * dim..][..dim];
                for (o, v) in out[b * dim..][..dim].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= tokens as f64);
        let value = Tensor::new(&[batch, dim], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            Op::MeanTokens {
                x,
                batch,
                tokens,
                dim,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(value, Op::Sum { x }, rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let [batch, classes] = match *self.shape(logits) {
            [b, c] => [b, c],
            _ => {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("logits must be (batch, classes), got {:?}", self.shape(logits)),
                ))
            }
        };
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy needs at least 2 classes, got {classes}"
            )));
        }
        if labels.len() != batch || batch == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch of {batch}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / batch as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// The earliest node whose value contains NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (NodeId(i), n.op.name()))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |id: NodeId, contribution: Vec<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Conv2d { x, w, b, dims } => {
                if self.requires_grad(*x) {
                    acc(*x, kernels::conv_backward_input(g, self.value(*w).data(), dims));
                }
                if self.requires_grad(*w) {
                    acc(*w, kernels::conv_backward_weight(self.value(*x).data(), g, dims));
                }
                if let Some(b) = b {
                    acc(*b, kernels::channel_sums(g, dims.n, dims.cout, dims.oh * dims.ow));
                }
            }
            Op::ConvTranspose2d { x, w, b, dims } => {
                if self.requires_grad(*x) {
                    acc(*x, kernels::conv_forward(g, self.value(*w).data(), None, dims));
                }
                if self.requires_grad(*w) {
                    acc(*w, kernels::conv_backward_weight(g, self.value(*x).data(), dims));
                }
                if let Some(b) = b {
                    acc(*b, kernels::channel_sums(g, dims.n, dims.cin, dims.ih * dims.iw));
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            } => {
                if self.requires_grad(*x) {
                    acc(*x, kernels::matmul_gw(g, self.value(*w).data(), *rows, *fan_in, *fan_out));
                }
                if self.requires_grad(*w) {
                    acc(*w, kernels::matmul_gtx(g, self.value(*x).data(), *rows, *fan_in, *fan_out));
                }
                if let Some(b) = b {
                    acc(*b, kernels::channel_sums(g, *rows, *fan_out, 1));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
                dim,
            } => {
                let dim = *dim;
                let gv = self.value(*gain).data();
                let rows = g.len() / dim;
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * dim..][..dim];
                        let nr = &normalized[r * dim..][..dim];
                        let mut mean_d = 0.0;
                        let mut mean_dn = 0.0;
                        for j in 0..dim {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dn += d * nr[j];
                        }
                        mean_d /= dim as f64;
                        mean_dn /= dim as f64;
                        for j in 0..dim {
                            let d = gr[j] * gv[j];
                            dx[r * dim + j] = inv_std[r] * (d - mean_d - nr[j] * mean_dn);
                        }
                    }
                    acc(*x, dx);
                }
                let mut dgain = vec![0.0; dim];
                let mut dshift = vec![0.0; dim];
                for r in 0..rows {
                    for j in 0..dim {
                        dgain[j] += g[r * dim + j] * normalized[r * dim + j];
                        dshift[j] += g[r * dim + j];
                    }
                }
                acc(*gain, dgain);
                acc(*shift, dshift);
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x).data();
                let dx = match kind {
                    Activation::Relu => xv
                        .iter()
                        .zip(g)
                        .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                        .collect(),
                    Activation::Gelu => xv.iter().zip(g).map(|(&v, &gi)| gi * gelu_grad(v)).collect(),
                };
                acc(*x, dx);
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::WeightedSum { terms } => {
                for &(id, w) in terms {
                    acc(id, g.iter().map(|v| w * v).collect());
                }
            }
            Op::Gather { x, index } => {
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (&i, &gv) in index.iter().zip(g) {
                        dx[i] += gv;
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                probs,
                scale,
                dims,
            } => {
                let (dq, dk, dv, ds) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    *scale,
                    dims,
                );
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
                if let Some(b) = bias {
                    let nn = dims.tokens * dims.tokens;
                    let mut db = vec![0.0; dims.heads * nn];
                    for grp in 0..dims.groups {
                        for h in 0..dims.heads {
                            let src = &ds[(grp * dims.heads + h) * nn..][..nn];
                            for (d, s) in db[h * nn..][..nn].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::MeanTokens {
                x,
                batch,
                tokens,
                dim,
            } => {
                let mut dx = vec![0.0; batch * tokens * dim];
                let inv = 1.0 / *tokens as f64;
                for b in 0..*batch {
                    for t in 0..*tokens {
                        for d in 0..*dim {
                            dx[(b * tokens + t) * dim + d] = g[b * dim + d] * inv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Sum { x } => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = probs.len() / labels.len();
                let inv = g[0] / labels.len() as f64;
                let mut dl = probs.clone();
                for (row, &label) in dl.chunks_mut(classes).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                acc(*logits, dl);
            }
        }
    }
}

/// Exact GELU: `x * Phi(x)` with the Gaussian CDF `Phi`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter bound on `graph`; parameters the loss
    /// does not reach get zeros.
    pub fn param_grads(&self, graph: &Graph) -> IndexMap<String, Tensor> {
        graph
            .bound_params()
            .iter()
            .map(|(name, &id)| {
                let grad = self
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(id)));
                (name.clone(), grad)
            })
            .collect()
    }
}
