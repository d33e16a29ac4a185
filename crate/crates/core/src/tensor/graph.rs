//! Static compute graph with reverse-mode differentiation.
//!
//! A [`Graph`] holds the topology and all static shapes; per-evaluation state
//! (activations, gradients, scratch buffers) lives in a [`Workspace`], so one
//! graph can be evaluated concurrently from several workspaces. Parameters are
//! passed in as a [`ParamSet`] aligned with the graph's parameter registry.
//!
//! Node inputs always have smaller ids than the node itself, so construction
//! order is a topological order and forward/backward are single index sweeps.

use std::sync::Arc;

use super::{Result, Scalar, Tensor, TensorError};

pub type NodeId = usize;

/// Padding behaviour of convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Zero padding on both axes.
    Zero,
    /// Wrap the width axis (panoramas), zero-pad the height axis.
    CircularHorizontal,
}

/// Parameters of a rolling-&-matching node.
#[derive(Debug, Clone, Copy)]
pub struct RollMatchSpec {
    /// Number of orientation bins R.
    pub r_bins: usize,
    /// Element shift per bin; `r_bins * step` must equal the descriptor length.
    pub step: usize,
    /// First element of the matched window, in rolled coordinates.
    pub crop_start: usize,
    /// Window length; equals the ground descriptor length.
    pub crop_len: usize,
}

#[derive(Debug, Clone)]
enum OpKind {
    Input,
    Param(usize),
    Conv2d { pad: PadMode, stride: usize },
    Deconv2d,
    Dense,
    Relu,
    SoftmaxAllPixels,
    L2NormChannels,
    MaxChannels,
    ConcatChannels,
    Roll { shift: usize },
    CosineSim,
    RollMatch(RollMatchSpec),
    Reshape,
    Gather { index: Arc<Vec<u32>> },
    WeightedSum { weights: Vec<f64> },
    DotConst,
    InfoNce { tau: f64 },
    CrossEntropy,
    OrientationLoss,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Param(_) => "param",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Deconv2d => "deconv2d",
            OpKind::Dense => "dense",
            OpKind::Relu => "relu",
            OpKind::SoftmaxAllPixels => "softmax_over_all_pixels",
            OpKind::L2NormChannels => "l2_normalize_along_channels",
            OpKind::MaxChannels => "max_over_channels",
            OpKind::ConcatChannels => "concat_along_channels",
            OpKind::Roll { .. } => "roll_vector",
            OpKind::CosineSim => "cosine_similarity",
            OpKind::RollMatch(_) => "roll_match",
            OpKind::Reshape => "reshape",
            OpKind::Gather { .. } => "gather",
            OpKind::WeightedSum { .. } => "scalar_weighted_sum",
            OpKind::DotConst => "dot_const",
            OpKind::InfoNce { .. } => "infonce",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::OrientationLoss => "orientation_loss",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    kind: OpKind,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
}

/// Declared trainable parameter.
#[derive(Debug, Clone)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub node: NodeId,
}

/// Values for every parameter declared by a graph, in declaration order.
#[derive(Debug, Clone)]
pub struct ParamSet<T = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn zeros_like(graph: &Graph) -> Self {
        ParamSet {
            tensors: graph
                .params
                .iter()
                .map(|p| Tensor::zeros(&p.shape))
                .collect(),
        }
    }
}

const LOG_CLAMP: f64 = -30.0;

/// Per-evaluation state for one graph.
pub struct Workspace<T = f32> {
    values: Vec<Option<Tensor<T>>>,
    grads: Vec<Option<Tensor<T>>>,
    argmax: Vec<Option<Vec<u32>>>,
    scratch: Vec<Vec<T>>,
    evaluated: Vec<bool>,
    grads_ready: Vec<bool>,
    degenerate: u64,
}

impl<T: Scalar> Workspace<T> {
    pub fn new(graph: &Graph) -> Self {
        let n = graph.nodes.len();
        Workspace {
            values: (0..n).map(|_| None).collect(),
            grads: (0..n).map(|_| None).collect(),
            argmax: (0..n).map(|_| None).collect(),
            scratch: (0..n).map(|_| Vec::new()).collect(),
            evaluated: vec![false; n],
            grads_ready: vec![false; n],
            degenerate: 0,
        }
    }

    /// Binds a per-sample input tensor.
    pub fn set_input(&mut self, graph: &Graph, id: NodeId, value: Tensor<T>) -> Result<()> {
        let node = &graph.nodes[id];
        if !matches!(node.kind, OpKind::Input) {
            return Err(TensorError::State(format!(
                "node {id} is {}, not an input",
                node.kind.name()
            )));
        }
        if node.shape != value.shape() {
            return Err(TensorError::Shape(format!(
                "input {id} expects {:?}, got {:?}",
                node.shape,
                value.shape()
            )));
        }
        self.values[id] = Some(value);
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.values[id].as_ref()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        if self.grads_ready[id] {
            self.grads[id].as_ref()
        } else {
            None
        }
    }

    /// Arg-max channel indices recorded by a `max_over_channels` node.
    pub fn argmax(&self, id: NodeId) -> Option<&[u32]> {
        self.argmax[id].as_deref()
    }

    /// Number of degenerate events (zero-norm vectors) seen since creation.
    pub fn degeneracy_count(&self) -> u64 {
        self.degenerate
    }
}

/// Immutable graph topology plus the parameter registry.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<ParamDecl>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn params(&self) -> &[ParamDecl] {
        &self.params
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, shape: Vec<usize>) -> Result<NodeId> {
        if shape.len() > super::MAX_NDIM {
            return Err(TensorError::Shape(format!(
                "{}: rank {} output unsupported",
                kind.name(),
                shape.len()
            )));
        }
        for &i in &inputs {
            if i >= self.nodes.len() {
                return Err(TensorError::State(format!(
                    "{}: input id {i} does not exist",
                    kind.name()
                )));
            }
        }
        self.nodes.push(Node {
            kind,
            inputs,
            shape,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: &[usize]) -> Result<NodeId> {
        self.push(OpKind::Input, vec![], shape.to_vec())
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(TensorError::State(format!("duplicate parameter {name}")));
        }
        let idx = self.params.len();
        let node = self.push(OpKind::Param(idx), vec![], shape.to_vec())?;
        self.params.push(ParamDecl {
            name: name.to_string(),
            shape: shape.to_vec(),
            node,
        });
        Ok(node)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        pad: PadMode,
        stride: usize,
    ) -> Result<NodeId> {
        let xs = self.nodes[x].shape.clone();
        let ks = self.nodes[kernel].shape.clone();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(TensorError::Shape(format!(
                "conv2d expects image [h,w,ci] and kernel [kh,kw,ci,co], got {xs:?} and {ks:?}"
            )));
        }
        let (kh, kw, ci, co) = (ks[0], ks[1], ks[2], ks[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Shape(format!(
                "conv2d kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if !matches!(stride, 1 | 2) {
            return Err(TensorError::Shape(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        if xs[2] != ci {
            return Err(TensorError::Shape(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {ci}",
                xs[2]
            )));
        }
        let out = vec![xs[0].div_ceil(stride), xs[1].div_ceil(stride), co];
        let mut inputs = vec![x, kernel];
        if let Some(b) = bias {
            if self.nodes[b].shape != [co] {
                return Err(TensorError::Shape(format!(
                    "conv2d bias must have shape [{co}], got {:?}",
                    self.nodes[b].shape
                )));
            }
            inputs.push(b);
        }
        self.push(OpKind::Conv2d { pad, stride }, inputs, out)
    }

    /// Transposed convolution, the linear adjoint of a stride-2 `conv2d`.
    /// Kernel layout is `[kh, kw, co, ci]`; output is exactly `2n x 2n x co`.
    pub fn deconv2d(&mut self, x: NodeId, kernel: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xs = self.nodes[x].shape.clone();
        let ks = self.nodes[kernel].shape.clone();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(TensorError::Shape(format!(
                "deconv2d expects image [n,n,ci] and kernel [kh,kw,co,ci], got {xs:?} and {ks:?}"
            )));
        }
        if xs[0] != xs[1] {
            return Err(TensorError::Shape(format!(
                "deconv2d requires a square input, got {}x{}",
                xs[0], xs[1]
            )));
        }
        let (kh, kw, co, ci) = (ks[0], ks[1], ks[2], ks[3]);
        if kh % 2 == 0 || kw % 2 == 0 || kh != kw {
            return Err(TensorError::Shape(format!(
                "deconv2d kernel must be square with odd extent, got {kh}x{kw}"
            )));
        }
        if xs[2] != ci {
            return Err(TensorError::Shape(format!(
                "deconv2d channel mismatch: input has {} channels, kernel expects {ci}",
                xs[2]
            )));
        }
        let out = vec![2 * xs[0], 2 * xs[1], co];
        let mut inputs = vec![x, kernel];
        if let Some(b) = bias {
            if self.nodes[b].shape != [co] {
                return Err(TensorError::Shape(format!(
                    "deconv2d bias must have shape [{co}], got {:?}",
                    self.nodes[b].shape
                )));
            }
            inputs.push(b);
        }
        self.push(OpKind::Deconv2d, inputs, out)
    }

    /// Fully connected layer on row-major `[rows, ci]` input with `[ci, co]` weights.
    pub fn dense(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xs = self.nodes[x].shape.clone();
        let ws = self.nodes[w].shape.clone();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(TensorError::Shape(format!(
                "dense expects [rows,ci] x [ci,co], got {xs:?} and {ws:?}"
            )));
        }
        let out = vec![xs[0], ws[1]];
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            if self.nodes[b].shape != [ws[1]] {
                return Err(TensorError::Shape(format!(
                    "dense bias must have shape [{}], got {:?}",
                    ws[1],
                    self.nodes[b].shape
                )));
            }
            inputs.push(b);
        }
        self.push(OpKind::Dense, inputs, out)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x].shape.clone();
        self.push(OpKind::Relu, vec![x], shape)
    }

    /// Softmax over every element of the tensor (one distribution per map).
    pub fn softmax_all(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x].shape.clone();
        self.push(OpKind::SoftmaxAllPixels, vec![x], shape)
    }

    /// Per-location L2 normalization along the channel axis of `[h,w,c]`.
    pub fn l2norm_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x].shape.clone();
        if shape.len() != 3 {
            return Err(TensorError::Shape(format!(
                "l2_normalize_along_channels expects [h,w,c], got {shape:?}"
            )));
        }
        self.push(OpKind::L2NormChannels, vec![x], shape)
    }

    /// Per-location maximum over channels, optionally restricted to channels
    /// where `mask > 0.5`. Ties break toward the lowest channel index.
    pub fn max_channels(&mut self, x: NodeId, mask: Option<NodeId>) -> Result<NodeId> {
        let xs = self.nodes[x].shape.clone();
        if xs.len() != 3 {
            return Err(TensorError::Shape(format!(
                "max_over_channels expects [h,w,c], got {xs:?}"
            )));
        }
        let mut inputs = vec![x];
        if let Some(m) = mask {
            if self.nodes[m].shape != [xs[2]] {
                return Err(TensorError::Shape(format!(
                    "channel mask must have shape [{}], got {:?}",
                    xs[2], self.nodes[m].shape
                )));
            }
            inputs.push(m);
        }
        self.push(OpKind::MaxChannels, inputs, vec![xs[0], xs[1], 1])
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(TensorError::Shape("concat of zero tensors".into()));
        }
        let first = self.nodes[xs[0]].shape.clone();
        if first.len() != 3 {
            return Err(TensorError::Shape(format!(
                "concat_along_channels expects [h,w,c] inputs, got {first:?}"
            )));
        }
        let mut channels = 0;
        for &x in xs {
            let s = &self.nodes[x].shape;
            if s.len() != 3 || s[0] != first[0] || s[1] != first[1] {
                return Err(TensorError::Shape(format!(
                    "concat spatial mismatch: {:?} vs {:?}",
                    s, first
                )));
            }
            channels += s[2];
        }
        self.push(
            OpKind::ConcatChannels,
            xs.to_vec(),
            vec![first[0], first[1], channels],
        )
    }

    /// Cyclic shift of a 1-D vector: `out[e] = in[(e + shift) mod n]`.
    pub fn roll(&mut self, x: NodeId, shift: usize) -> Result<NodeId> {
        let xs = self.nodes[x].shape.clone();
        if xs.len() != 1 {
            return Err(TensorError::Shape(format!(
                "roll_vector expects a 1-D tensor, got {xs:?}"
            )));
        }
        let shift = shift % xs[0];
        self.push(OpKind::Roll { shift }, vec![x], xs)
    }

    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a].shape.clone();
        let sb = self.nodes[b].shape.clone();
        if sa.len() != 1 || sa != sb {
            return Err(TensorError::Shape(format!(
                "cosine_similarity expects equal-length vectors, got {sa:?} and {sb:?}"
            )));
        }
        self.push(OpKind::CosineSim, vec![a, b], vec![1])
    }

    /// Cosine similarity of a ground descriptor against every rolled (and
    /// cropped) aerial descriptor of an `[n, n, c]` descriptor map.
    pub fn roll_match(
        &mut self,
        ground: NodeId,
        aerial: NodeId,
        spec: RollMatchSpec,
    ) -> Result<NodeId> {
        let gs = self.nodes[ground].shape.clone();
        let as_ = self.nodes[aerial].shape.clone();
        if gs.len() != 1 || as_.len() != 3 || as_[0] != as_[1] {
            return Err(TensorError::Shape(format!(
                "roll_match expects ground [c] and aerial [n,n,c], got {gs:?} and {as_:?}"
            )));
        }
        let c = as_[2];
        if spec.r_bins == 0 || spec.step * spec.r_bins != c {
            return Err(TensorError::Shape(format!(
                "roll step {} times {} bins must cover descriptor length {c}",
                spec.step, spec.r_bins
            )));
        }
        if spec.crop_len != gs[0] || spec.crop_start + spec.crop_len > c {
            return Err(TensorError::Shape(format!(
                "crop window [{}, {}) incompatible with ground length {} / aerial length {c}",
                spec.crop_start,
                spec.crop_start + spec.crop_len,
                gs[0]
            )));
        }
        self.push(
            OpKind::RollMatch(spec),
            vec![ground, aerial],
            vec![as_[0], as_[1], spec.r_bins],
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x].shape.iter().product::<usize>() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.nodes[x].shape, shape
            )));
        }
        self.push(OpKind::Reshape, vec![x], shape.to_vec())
    }

    /// `out[i] = in[index[i]]`; the backward pass scatter-adds.
    pub fn gather(&mut self, x: NodeId, index: Arc<Vec<u32>>, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(TensorError::Shape(format!(
                "gather shape {:?} needs {} indices, got {}",
                shape,
                n,
                index.len()
            )));
        }
        let src = self.nodes[x].shape.iter().product::<usize>();
        if index.iter().any(|&i| i as usize >= src) {
            return Err(TensorError::Shape(format!(
                "gather index out of range for source with {src} elements"
            )));
        }
        self.push(OpKind::Gather { index }, vec![x], shape.to_vec())
    }

    /// `out = sum_i weights[i] * xs[i]` over same-shape tensors.
    pub fn weighted_sum(&mut self, xs: &[NodeId], weights: &[f64]) -> Result<NodeId> {
        if xs.is_empty() || xs.len() != weights.len() {
            return Err(TensorError::Shape(
                "weighted_sum needs one weight per input".into(),
            ));
        }
        let shape = self.nodes[xs[0]].shape.clone();
        for &x in xs {
            if self.nodes[x].shape != shape {
                return Err(TensorError::Shape(format!(
                    "weighted_sum shape mismatch: {:?} vs {:?}",
                    self.nodes[x].shape, shape
                )));
            }
        }
        self.push(
            OpKind::WeightedSum {
                weights: weights.to_vec(),
            },
            xs.to_vec(),
            shape,
        )
    }

    /// Scalar `sum(x * c)`; gradient flows to `x` only.
    pub fn dot_const(&mut self, x: NodeId, c: NodeId) -> Result<NodeId> {
        if self.nodes[x].shape != self.nodes[c].shape {
            return Err(TensorError::Shape(format!(
                "dot_const shape mismatch: {:?} vs {:?}",
                self.nodes[x].shape, self.nodes[c].shape
            )));
        }
        self.push(OpKind::DotConst, vec![x, c], vec![1])
    }

    /// Weighted infoNCE over a score volume; gradient flows to scores only.
    pub fn infonce(&mut self, scores: NodeId, weights: NodeId, tau: f64) -> Result<NodeId> {
        if self.nodes[scores].shape != self.nodes[weights].shape {
            return Err(TensorError::Shape(format!(
                "infonce shape mismatch: {:?} vs {:?}",
                self.nodes[scores].shape, self.nodes[weights].shape
            )));
        }
        if tau <= 0.0 {
            return Err(TensorError::Shape("infonce temperature must be > 0".into()));
        }
        self.push(OpKind::InfoNce { tau }, vec![scores, weights], vec![1])
    }

    /// `-sum(dgt * log d)` with the log clamped at -30; gradient to `d` only.
    pub fn cross_entropy(&mut self, d: NodeId, dgt: NodeId) -> Result<NodeId> {
        if self.nodes[d].shape != self.nodes[dgt].shape {
            return Err(TensorError::Shape(format!(
                "cross_entropy shape mismatch: {:?} vs {:?}",
                self.nodes[d].shape, self.nodes[dgt].shape
            )));
        }
        self.push(OpKind::CrossEntropy, vec![d, dgt], vec![1])
    }

    /// Label-weighted squared error between a `[h,w,2]` vector field and a
    /// target unit vector `trig = [cos, sin]`; gradient to the field only.
    pub fn orientation_loss(&mut self, y: NodeId, dgt: NodeId, trig: NodeId) -> Result<NodeId> {
        let ys = self.nodes[y].shape.clone();
        let ds = self.nodes[dgt].shape.clone();
        if ys.len() != 3 || ys[2] != 2 || ds != [ys[0], ys[1]] {
            return Err(TensorError::Shape(format!(
                "orientation_loss expects field [h,w,2] and label [h,w], got {ys:?} and {ds:?}"
            )));
        }
        if self.nodes[trig].shape != [2] {
            return Err(TensorError::Shape("orientation target must be [2]".into()));
        }
        self.push(OpKind::OrientationLoss, vec![y, dgt, trig], vec![1])
    }

    fn mark_ancestors(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut marked = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = targets.to_vec();
        while let Some(id) = stack.pop() {
            if marked[id] {
                continue;
            }
            marked[id] = true;
            stack.extend_from_slice(&self.nodes[id].inputs);
        }
        marked
    }

    /// Evaluates every ancestor of `targets` in topological order.
    pub fn forward<T: Scalar>(
        &self,
        ws: &mut Workspace<T>,
        params: &ParamSet<T>,
        targets: &[NodeId],
    ) -> Result<()> {
        if params.tensors.len() != self.params.len() {
            return Err(TensorError::State(format!(
                "parameter set has {} tensors, graph declares {}",
                params.tensors.len(),
                self.params.len()
            )));
        }
        let marked = self.mark_ancestors(targets);
        for id in 0..self.nodes.len() {
            if !marked[id] {
                continue;
            }
            match &self.nodes[id].kind {
                OpKind::Input => {
                    if ws.values[id].is_none() {
                        return Err(TensorError::State(format!("input node {id} is not bound")));
                    }
                }
                OpKind::Param(pid) => {
                    if params.tensors[*pid].shape() != self.nodes[id].shape {
                        return Err(TensorError::Shape(format!(
                            "parameter {} has shape {:?}, expected {:?}",
                            self.params[*pid].name,
                            params.tensors[*pid].shape(),
                            self.nodes[id].shape
                        )));
                    }
                }
                _ => {
                    self.forward_node(ws, params, id)?;
                    let out = ws.values[id].as_ref().unwrap();
                    if !out.all_finite() {
                        return Err(TensorError::NonFinite(format!(
                            "{} (node {id})",
                            self.nodes[id].kind.name()
                        )));
                    }
                }
            }
            ws.evaluated[id] = true;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss node. Requires a prior forward pass
    /// that evaluated `loss`.
    pub fn backward<T: Scalar>(
        &self,
        ws: &mut Workspace<T>,
        params: &ParamSet<T>,
        loss: NodeId,
    ) -> Result<()> {
        if self.nodes[loss].shape != [1] {
            return Err(TensorError::Shape(format!(
                "backward requires a scalar loss, node {loss} has shape {:?}",
                self.nodes[loss].shape
            )));
        }
        if !ws.evaluated[loss] {
            return Err(TensorError::State(
                "gradients requested before forward evaluation".into(),
            ));
        }
        let marked = self.mark_ancestors(&[loss]);
        for id in 0..self.nodes.len() {
            ws.grads_ready[id] = false;
            if marked[id] {
                let shape = self.nodes[id].shape.clone();
                match &mut ws.grads[id] {
                    Some(g) if g.shape() == shape.as_slice() => g.fill(T::ZERO),
                    slot => *slot = Some(Tensor::zeros(&shape)),
                }
                ws.grads_ready[id] = true;
            }
        }
        ws.grads[loss].as_mut().unwrap().data_mut()[0] = T::ONE;
        for id in (0..self.nodes.len()).rev() {
            if !marked[id] {
                continue;
            }
            match &self.nodes[id].kind {
                OpKind::Input | OpKind::Param(_) => {}
                _ => self.backward_node(ws, params, id)?,
            }
        }
        Ok(())
    }

    /// Gradient tensors for all declared parameters, in declaration order.
    /// Parameters unused by the differentiated loss get zero gradients.
    pub fn param_grads<T: Scalar>(&self, ws: &Workspace<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|p| match ws.grad(p.node) {
                Some(g) => g.clone(),
                None => Tensor::zeros(&p.shape),
            })
            .collect()
    }

    fn value_of<'a, T: Scalar>(
        &self,
        values: &'a [Option<Tensor<T>>],
        params: &'a ParamSet<T>,
        id: NodeId,
    ) -> &'a Tensor<T> {
        match &self.nodes[id].kind {
            OpKind::Param(pid) => &params.tensors[*pid],
            _ => values[id].as_ref().expect("value not computed"),
        }
    }

    fn forward_node<T: Scalar>(
        &self,
        ws: &mut Workspace<T>,
        params: &ParamSet<T>,
        id: NodeId,
    ) -> Result<()> {
        let node = &self.nodes[id];
        let numel: usize = node.shape.iter().product();
        let mut out = match ws.values[id].take() {
            Some(t) => {
                let mut d = t.into_data();
                d.resize(numel, T::ZERO);
                d
            }
            None => vec![T::ZERO; numel],
        };
        let (before, after) = ws.values.split_at_mut(id);
        let _ = after;
        let val = |nid: NodeId| -> &Tensor<T> { self.value_of(before, params, nid) };

        match &node.kind {
            OpKind::Input | OpKind::Param(_) => unreachable!(),
            OpKind::Conv2d { pad, stride } => {
                let x = val(node.inputs[0]);
                let k = val(node.inputs[1]);
                let bias = node.inputs.get(2).map(|&b| val(b));
                conv_forward(x, k, bias, *pad, *stride, &mut ws.scratch[id], &mut out);
            }
            OpKind::Deconv2d => {
                let x = val(node.inputs[0]);
                let k = val(node.inputs[1]);
                let bias = node.inputs.get(2).map(|&b| val(b));
                deconv_forward(x, k, bias, &mut ws.scratch[id], &mut out);
            }
            OpKind::Dense => {
                let x = val(node.inputs[0]);
                let w = val(node.inputs[1]);
                let bias = node.inputs.get(2).map(|&b| val(b));
                dense_forward(x, w, bias, &mut out);
            }
            OpKind::Relu => {
                let x = val(node.inputs[0]);
                for (o, &v) in out.iter_mut().zip(x.data()) {
                    *o = if v > T::ZERO { v } else { T::ZERO };
                }
            }
            OpKind::SoftmaxAllPixels => {
                let x = val(node.inputs[0]).data();
                let mut m = x[0];
                for &v in x {
                    if v > m {
                        m = v;
                    }
                }
                let mut sum = T::ZERO;
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = (v - m).exp();
                    sum += *o;
                }
                for o in out.iter_mut() {
                    *o = *o / sum;
                }
            }
            OpKind::L2NormChannels => {
                let x = val(node.inputs[0]);
                let c = node.shape[2];
                for p in 0..numel / c {
                    let xs = &x.data()[p * c..(p + 1) * c];
                    let mut n2 = T::ZERO;
                    for &v in xs {
                        n2 += v * v;
                    }
                    if n2 == T::ZERO {
                        out[p * c..(p + 1) * c].fill(T::ZERO);
                        ws.degenerate += 1;
                    } else {
                        let n = n2.sqrt();
                        for (o, &v) in out[p * c..(p + 1) * c].iter_mut().zip(xs) {
                            *o = v / n;
                        }
                    }
                }
            }
            OpKind::MaxChannels => {
                let x = val(node.inputs[0]);
                let c = x.shape()[2];
                let mask: Option<Vec<bool>> = node.inputs.get(1).map(|&m| {
                    val(m).data().iter().map(|&v| v.to_f64() > 0.5).collect()
                });
                if let Some(m) = &mask {
                    if !m.iter().any(|&r| r) {
                        return Err(TensorError::EmptyPriorMask);
                    }
                }
                let arg = ws.argmax[id].get_or_insert_with(Vec::new);
                arg.clear();
                arg.resize(numel, 0);
                for p in 0..numel {
                    let xs = &x.data()[p * c..(p + 1) * c];
                    let mut best: Option<(usize, T)> = None;
                    for (ch, &v) in xs.iter().enumerate() {
                        if let Some(m) = &mask {
                            if !m[ch] {
                                continue;
                            }
                        }
                        match best {
                            None => best = Some((ch, v)),
                            Some((_, bv)) if v > bv => best = Some((ch, v)),
                            _ => {}
                        }
                    }
                    let (ch, v) = best.unwrap();
                    out[p] = v;
                    arg[p] = ch as u32;
                }
            }
            OpKind::ConcatChannels => {
                let (h, w, _) = (node.shape[0], node.shape[1], node.shape[2]);
                let co = node.shape[2];
                let mut offset = 0;
                for &src in &node.inputs {
                    let x = val(src);
                    let c = x.shape()[2];
                    for p in 0..h * w {
                        out[p * co + offset..p * co + offset + c]
                            .copy_from_slice(&x.data()[p * c..(p + 1) * c]);
                    }
                    offset += c;
                }
            }
            OpKind::Roll { shift } => {
                let x = val(node.inputs[0]).data();
                let n = x.len();
                for (e, o) in out.iter_mut().enumerate() {
                    *o = x[(e + shift) % n];
                }
            }
            OpKind::CosineSim => {
                let a = val(node.inputs[0]).data();
                let b = val(node.inputs[1]).data();
                let (mut na, mut nb, mut dot) = (T::ZERO, T::ZERO, T::ZERO);
                for (&x, &y) in a.iter().zip(b) {
                    na += x * x;
                    nb += y * y;
                    dot += x * y;
                }
                if na == T::ZERO || nb == T::ZERO {
                    ws.degenerate += 1;
                    out[0] = T::ZERO;
                } else {
                    out[0] = dot / (na.sqrt() * nb.sqrt());
                }
            }
            OpKind::RollMatch(spec) => {
                let g = val(node.inputs[0]);
                let a = val(node.inputs[1]);
                ws.degenerate += roll_match_forward(g, a, spec, &mut out);
            }
            OpKind::Reshape => {
                out.copy_from_slice(val(node.inputs[0]).data());
            }
            OpKind::Gather { index } => {
                let x = val(node.inputs[0]).data();
                for (o, &i) in out.iter_mut().zip(index.iter()) {
                    *o = x[i as usize];
                }
            }
            OpKind::WeightedSum { weights } => {
                out.fill(T::ZERO);
                for (&src, &w) in node.inputs.iter().zip(weights) {
                    let wv = T::from_f64(w);
                    for (o, &v) in out.iter_mut().zip(val(src).data()) {
                        *o += wv * v;
                    }
                }
            }
            OpKind::DotConst => {
                let x = val(node.inputs[0]).data();
                let c = val(node.inputs[1]).data();
                let mut acc = T::ZERO;
                for (&a, &b) in x.iter().zip(c) {
                    acc += a * b;
                }
                out[0] = acc;
            }
            OpKind::InfoNce { tau } => {
                let s = val(node.inputs[0]).data();
                let w = val(node.inputs[1]).data();
                let tau = T::from_f64(*tau);
                let mut m = s[0];
                for &v in s {
                    if v > m {
                        m = v;
                    }
                }
                let mut z = T::ZERO;
                for &v in s {
                    z += ((v - m) / tau).exp();
                }
                let lse = m / tau + z.ln();
                let (mut sumw, mut dotws) = (T::ZERO, T::ZERO);
                for (&wi, &si) in w.iter().zip(s) {
                    sumw += wi;
                    dotws += wi * si;
                }
                out[0] = sumw * lse - dotws / tau;
            }
            OpKind::CrossEntropy => {
                let d = val(node.inputs[0]).data();
                let dgt = val(node.inputs[1]).data();
                let clamp = T::from_f64(LOG_CLAMP);
                let mut acc = T::ZERO;
                for (&p, &q) in d.iter().zip(dgt) {
                    let lnp = if p > T::ZERO {
                        let l = p.ln();
                        if l > clamp {
                            l
                        } else {
                            clamp
                        }
                    } else {
                        clamp
                    };
                    acc += q * lnp;
                }
                out[0] = -acc;
            }
            OpKind::OrientationLoss => {
                let y = val(node.inputs[0]);
                let dgt = val(node.inputs[1]).data();
                let trig = val(node.inputs[2]).data();
                let (cg, sg) = (trig[0], trig[1]);
                let mut acc = T::ZERO;
                for (p, &wgt) in dgt.iter().enumerate() {
                    let y1 = y.data()[2 * p];
                    let y2 = y.data()[2 * p + 1];
                    let (dc, dsn) = (cg - y1, sg - y2);
                    acc += wgt * (dc * dc + dsn * dsn);
                }
                out[0] = acc;
            }
        }
        ws.values[id] = Some(Tensor::from_vec(&node.shape, out)?);
        Ok(())
    }

    fn backward_node<T: Scalar>(
        &self,
        ws: &mut Workspace<T>,
        params: &ParamSet<T>,
        id: NodeId,
    ) -> Result<()> {
        let node = &self.nodes[id];
        let (glo, ghi) = ws.grads.split_at_mut(id);
        let g = ghi[0].as_ref().expect("missing upstream grad");
        let values = &ws.values;
        let val = |nid: NodeId| -> &Tensor<T> { self.value_of(values, params, nid) };
        // Gradient buffer of input `k`; absent when that branch was not marked
        // (cannot happen for ancestors of the loss, which are always marked).
        macro_rules! gin {
            ($k:expr) => {
                glo[node.inputs[$k]].as_mut().unwrap().data_mut()
            };
        }

        match &node.kind {
            OpKind::Input | OpKind::Param(_) => {}
            OpKind::Conv2d { pad, stride } => {
                let has_bias = node.inputs.len() == 3;
                let x = val(node.inputs[0]);
                let k = val(node.inputs[1]);
                // Kernel grad from the cached im2col matrix.
                {
                    let cols = &ws.scratch[id];
                    let dk = glo[node.inputs[1]].as_mut().unwrap();
                    conv_kernel_grad(x, k, g, cols, dk);
                }
                {
                    let dx = glo[node.inputs[0]].as_mut().unwrap();
                    conv_input_grad(x, k, g, *pad, *stride, dx);
                }
                if has_bias {
                    bias_grad(g, gin!(2));
                }
            }
            OpKind::Deconv2d => {
                let has_bias = node.inputs.len() == 3;
                let x = val(node.inputs[0]);
                let k = val(node.inputs[1]);
                {
                    let dx = glo[node.inputs[0]].as_mut().unwrap();
                    deconv_input_grad(k, g, dx);
                }
                {
                    let dk = glo[node.inputs[1]].as_mut().unwrap();
                    deconv_kernel_grad(x, g, dk);
                }
                if has_bias {
                    bias_grad(g, gin!(2));
                }
            }
            OpKind::Dense => {
                let has_bias = node.inputs.len() == 3;
                let x = val(node.inputs[0]);
                let w = val(node.inputs[1]);
                let (rows, ci) = (x.shape()[0], x.shape()[1]);
                let co = w.shape()[1];
                unsafe {
                    // dW += x^T g
                    T::gemm(
                        ci,
                        rows,
                        co,
                        T::ONE,
                        x.data().as_ptr(),
                        1,
                        ci as isize,
                        g.data().as_ptr(),
                        co as isize,
                        1,
                        T::ONE,
                        gin!(1).as_mut_ptr(),
                        co as isize,
                        1,
                    );
                    // dx += g W^T
                    T::gemm(
                        rows,
                        co,
                        ci,
                        T::ONE,
                        g.data().as_ptr(),
                        co as isize,
                        1,
                        w.data().as_ptr(),
                        1,
                        co as isize,
                        T::ONE,
                        gin!(0).as_mut_ptr(),
                        ci as isize,
                        1,
                    );
                }
                if has_bias {
                    bias_grad(g, gin!(2));
                }
            }
            OpKind::Relu => {
                let x = val(node.inputs[0]).data();
                let dst = gin!(0);
                for (i, &v) in x.iter().enumerate() {
                    if v > T::ZERO {
                        dst[i] += g.data()[i];
                    }
                }
            }
            OpKind::SoftmaxAllPixels => {
                let y = values[id].as_ref().unwrap().data();
                let mut dot = T::ZERO;
                for (&gi, &yi) in g.data().iter().zip(y) {
                    dot += gi * yi;
                }
                let dst = gin!(0);
                for i in 0..y.len() {
                    dst[i] += y[i] * (g.data()[i] - dot);
                }
            }
            OpKind::L2NormChannels => {
                let x = val(node.inputs[0]);
                let y = values[id].as_ref().unwrap();
                let c = node.shape[2];
                let dst = gin!(0);
                for p in 0..x.numel() / c {
                    let xs = &x.data()[p * c..(p + 1) * c];
                    let ys = &y.data()[p * c..(p + 1) * c];
                    let gs = &g.data()[p * c..(p + 1) * c];
                    let mut n2 = T::ZERO;
                    for &v in xs {
                        n2 += v * v;
                    }
                    if n2 == T::ZERO {
                        continue;
                    }
                    let n = n2.sqrt();
                    let mut dot = T::ZERO;
                    for (&gi, &yi) in gs.iter().zip(ys) {
                        dot += gi * yi;
                    }
                    for i in 0..c {
                        dst[p * c + i] += (gs[i] - ys[i] * dot) / n;
                    }
                }
            }
            OpKind::MaxChannels => {
                let c = val(node.inputs[0]).shape()[2];
                let arg = ws.argmax[id].as_ref().expect("argmax not recorded");
                let dst = gin!(0);
                for (p, &ch) in arg.iter().enumerate() {
                    dst[p * c + ch as usize] += g.data()[p];
                }
            }
            OpKind::ConcatChannels => {
                let co = node.shape[2];
                let hw = node.shape[0] * node.shape[1];
                let mut offset = 0;
                for (k, &src) in node.inputs.iter().enumerate() {
                    let c = self.nodes[src].shape[2];
                    let dst = gin!(k);
                    for p in 0..hw {
                        for i in 0..c {
                            dst[p * c + i] += g.data()[p * co + offset + i];
                        }
                    }
                    offset += c;
                }
            }
            OpKind::Roll { shift } => {
                let n = node.shape[0];
                let dst = gin!(0);
                for e in 0..n {
                    dst[(e + shift) % n] += g.data()[e];
                }
            }
            OpKind::CosineSim => {
                let a = val(node.inputs[0]).data();
                let b = val(node.inputs[1]).data();
                let (mut na2, mut nb2, mut dot) = (T::ZERO, T::ZERO, T::ZERO);
                for (&x, &y) in a.iter().zip(b) {
                    na2 += x * x;
                    nb2 += y * y;
                    dot += x * y;
                }
                if na2 == T::ZERO || nb2 == T::ZERO {
                    // Degenerate score is the constant 0; no gradient.
                } else {
                    let (na, nb) = (na2.sqrt(), nb2.sqrt());
                    let s = dot / (na * nb);
                    let gv = g.data()[0];
                    {
                        let da = gin!(0);
                        for i in 0..a.len() {
                            da[i] += gv * (b[i] / (na * nb) - s * a[i] / na2);
                        }
                    }
                    let db = gin!(1);
                    for i in 0..b.len() {
                        db[i] += gv * (a[i] / (na * nb) - s * b[i] / nb2);
                    }
                }
            }
            OpKind::RollMatch(spec) => {
                let gr = val(node.inputs[0]);
                let ae = val(node.inputs[1]);
                let (dg_vec, da_vec) = roll_match_backward(gr, ae, spec, g);
                {
                    let dg = gin!(0);
                    for (d, v) in dg.iter_mut().zip(&dg_vec) {
                        *d += *v;
                    }
                }
                let da = gin!(1);
                for (d, v) in da.iter_mut().zip(&da_vec) {
                    *d += *v;
                }
            }
            OpKind::Reshape => {
                let dst = gin!(0);
                for (d, &v) in dst.iter_mut().zip(g.data()) {
                    *d += v;
                }
            }
            OpKind::Gather { index } => {
                let dst = gin!(0);
                for (e, &i) in index.iter().enumerate() {
                    dst[i as usize] += g.data()[e];
                }
            }
            OpKind::WeightedSum { weights } => {
                for (k, &w) in weights.iter().enumerate() {
                    let wv = T::from_f64(w);
                    let dst = gin!(k);
                    for (d, &gv) in dst.iter_mut().zip(g.data()) {
                        *d += wv * gv;
                    }
                }
            }
            OpKind::DotConst => {
                let c = val(node.inputs[1]).data();
                let gv = g.data()[0];
                let dst = gin!(0);
                for (d, &cv) in dst.iter_mut().zip(c) {
                    *d += gv * cv;
                }
            }
            OpKind::InfoNce { tau } => {
                let s = val(node.inputs[0]).data();
                let w = val(node.inputs[1]).data();
                let tau = T::from_f64(*tau);
                let mut m = s[0];
                for &v in s {
                    if v > m {
                        m = v;
                    }
                }
                let mut z = T::ZERO;
                for &v in s {
                    z += ((v - m) / tau).exp();
                }
                let mut sumw = T::ZERO;
                for &wi in w {
                    sumw += wi;
                }
                let gv = g.data()[0];
                let dst = gin!(0);
                for i in 0..s.len() {
                    let p = ((s[i] - m) / tau).exp() / z;
                    dst[i] += gv * (sumw * p - w[i]) / tau;
                }
            }
            OpKind::CrossEntropy => {
                let d = val(node.inputs[0]).data();
                let dgt = val(node.inputs[1]).data();
                let floor = T::from_f64(LOG_CLAMP.exp());
                let gv = g.data()[0];
                let dst = gin!(0);
                for i in 0..d.len() {
                    if d[i] > floor {
                        dst[i] += -gv * dgt[i] / d[i];
                    }
                }
            }
            OpKind::OrientationLoss => {
                let y = val(node.inputs[0]).data();
                let dgt = val(node.inputs[1]).data();
                let trig = val(node.inputs[2]).data();
                let (cg, sg) = (trig[0], trig[1]);
                let two = T::from_f64(2.0);
                let gv = g.data()[0];
                let dst = gin!(0);
                for (p, &wgt) in dgt.iter().enumerate() {
                    dst[2 * p] += gv * two * wgt * (y[2 * p] - cg);
                    dst[2 * p + 1] += gv * two * wgt * (y[2 * p + 1] - sg);
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Convolution kernels: im2col / col2im plus GEMM.
// ---------------------------------------------------------------------------

/// Gathers conv windows of `x` into `cols` as a `[oh*ow, kh*kw*ci]` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: PadMode,
    oh: usize,
    ow: usize,
    cols: &mut Vec<T>,
) {
    let (h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let kk = kh * kw * ci;
    cols.clear();
    cols.resize(oh * ow * kk, T::ZERO);
    let xd = x.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * kk;
            for dy in 0..kh {
                let iy = (oy * stride + dy) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue; // height is always zero-padded
                }
                let iy = iy as usize;
                for dx in 0..kw {
                    let mut ix = (ox * stride + dx) as isize - pw as isize;
                    match pad {
                        PadMode::Zero => {
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                        }
                        PadMode::CircularHorizontal => {
                            ix = ix.rem_euclid(w as isize);
                        }
                    }
                    let src = (iy * w + ix as usize) * ci;
                    let dst = row + (dy * kw + dx) * ci;
                    cols[dst..dst + ci].copy_from_slice(&xd[src..src + ci]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back onto an `[h, w, ci]` grid.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: PadMode,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ci: usize,
    out: &mut [T],
) {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let kk = kh * kw * ci;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * kk;
            for dy in 0..kh {
                let iy = (oy * stride + dy) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let iy = iy as usize;
                for dx in 0..kw {
                    let mut ix = (ox * stride + dx) as isize - pw as isize;
                    match pad {
                        PadMode::Zero => {
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                        }
                        PadMode::CircularHorizontal => {
                            ix = ix.rem_euclid(w as isize);
                        }
                    }
                    let dst = (iy * w + ix as usize) * ci;
                    let src = row + (dy * kw + dx) * ci;
                    for c in 0..ci {
                        out[dst + c] += cols[src + c];
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: PadMode,
    stride: usize,
    cols: &mut Vec<T>,
    out: &mut [T],
) {
    let (kh, kw, ci, co) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let oh = x.shape()[0].div_ceil(stride);
    let ow = x.shape()[1].div_ceil(stride);
    im2col(x, kh, kw, stride, pad, oh, ow, cols);
    let m = oh * ow;
    let kk = kh * kw * ci;
    unsafe {
        T::gemm(
            m,
            kk,
            co,
            T::ONE,
            cols.as_ptr(),
            kk as isize,
            1,
            k.data().as_ptr(),
            co as isize,
            1,
            T::ZERO,
            out.as_mut_ptr(),
            co as isize,
            1,
        );
    }
    if let Some(b) = bias {
        for p in 0..m {
            for c in 0..co {
                out[p * co + c] += b.data()[c];
            }
        }
    }
}

fn conv_kernel_grad<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &Tensor<T>,
    cols: &[T],
    dk: &mut Tensor<T>,
) {
    let _ = x;
    let (kh, kw, ci, co) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let m = g.numel() / co;
    let kk = kh * kw * ci;
    debug_assert_eq!(cols.len(), m * kk);
    unsafe {
        // dK += cols^T g
        T::gemm(
            kk,
            m,
            co,
            T::ONE,
            cols.as_ptr(),
            1,
            kk as isize,
            g.data().as_ptr(),
            co as isize,
            1,
            T::ONE,
            dk.data_mut().as_mut_ptr(),
            co as isize,
            1,
        );
    }
}

fn conv_input_grad<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &Tensor<T>,
    pad: PadMode,
    stride: usize,
    dx: &mut Tensor<T>,
) {
    let (kh, kw, ci, co) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let m = oh * ow;
    let kk = kh * kw * ci;
    let mut dcols = vec![T::ZERO; m * kk];
    unsafe {
        // dcols = g K^T
        T::gemm(
            m,
            co,
            kk,
            T::ONE,
            g.data().as_ptr(),
            co as isize,
            1,
            k.data().as_ptr(),
            1,
            co as isize,
            T::ZERO,
            dcols.as_mut_ptr(),
            kk as isize,
            1,
        );
    }
    col2im_add(
        &dcols,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
        h,
        w,
        ci,
        dx.data_mut(),
    );
}

fn deconv_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cols: &mut Vec<T>,
    out: &mut [T],
) {
    let (kh, kw, co, ci) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let n = x.shape()[0];
    let m = n * n;
    let kk = kh * kw * co;
    cols.clear();
    cols.resize(m * kk, T::ZERO);
    unsafe {
        // cols = x K^T where K is reshaped [kh*kw*co, ci]
        T::gemm(
            m,
            ci,
            kk,
            T::ONE,
            x.data().as_ptr(),
            ci as isize,
            1,
            k.data().as_ptr(),
            1,
            ci as isize,
            T::ZERO,
            cols.as_mut_ptr(),
            kk as isize,
            1,
        );
    }
    out.fill(T::ZERO);
    col2im_add(cols, kh, kw, 2, PadMode::Zero, n, n, 2 * n, 2 * n, co, out);
    if let Some(b) = bias {
        let pixels = 4 * n * n;
        for p in 0..pixels {
            for c in 0..co {
                out[p * co + c] += b.data()[c];
            }
        }
    }
}

fn deconv_input_grad<T: Scalar>(k: &Tensor<T>, g: &Tensor<T>, dx: &mut Tensor<T>) {
    let (kh, kw, co, ci) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let n = dx.shape()[0];
    let mut gcols = Vec::new();
    im2col(g, kh, kw, 2, PadMode::Zero, n, n, &mut gcols);
    let m = n * n;
    let kk = kh * kw * co;
    unsafe {
        // dx += im2col(g) K
        T::gemm(
            m,
            kk,
            ci,
            T::ONE,
            gcols.as_ptr(),
            kk as isize,
            1,
            k.data().as_ptr(),
            ci as isize,
            1,
            T::ONE,
            dx.data_mut().as_mut_ptr(),
            ci as isize,
            1,
        );
    }
}

fn deconv_kernel_grad<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, dk: &mut Tensor<T>) {
    let (kh, kw, co, ci) = (
        dk.shape()[0],
        dk.shape()[1],
        dk.shape()[2],
        dk.shape()[3],
    );
    let n = x.shape()[0];
    let mut gcols = Vec::new();
    im2col(g, kh, kw, 2, PadMode::Zero, n, n, &mut gcols);
    let m = n * n;
    let kk = kh * kw * co;
    unsafe {
        // dK += im2col(g)^T x
        T::gemm(
            kk,
            m,
            ci,
            T::ONE,
            gcols.as_ptr(),
            1,
            kk as isize,
            x.data().as_ptr(),
            ci as isize,
            1,
            T::ONE,
            dk.data_mut().as_mut_ptr(),
            ci as isize,
            1,
        );
    }
}

fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, out: &mut [T]) {
    let (rows, ci) = (x.shape()[0], x.shape()[1]);
    let co = w.shape()[1];
    unsafe {
        T::gemm(
            rows,
            ci,
            co,
            T::ONE,
            x.data().as_ptr(),
            ci as isize,
            1,
            w.data().as_ptr(),
            co as isize,
            1,
            T::ZERO,
            out.as_mut_ptr(),
            co as isize,
            1,
        );
    }
    if let Some(b) = bias {
        for r in 0..rows {
            for c in 0..co {
                out[r * co + c] += b.data()[c];
            }
        }
    }
}

fn bias_grad<T: Scalar>(g: &Tensor<T>, db: &mut [T]) {
    let co = db.len();
    for chunk in g.data().chunks_exact(co) {
        for (d, &v) in db.iter_mut().zip(chunk) {
            *d += v;
        }
    }
}

// ---------------------------------------------------------------------------
// Rolling & matching.
// ---------------------------------------------------------------------------

/// Returns the number of degenerate (zero-norm) events encountered.
fn roll_match_forward<T: Scalar>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    spec: &RollMatchSpec,
    out: &mut [T],
) -> u64 {
    let n = a.shape()[0];
    let c = a.shape()[2];
    let gd = g.data();
    let mut gn2 = T::ZERO;
    for &v in gd {
        gn2 += v * v;
    }
    let mut degenerate = 0u64;
    if gn2 == T::ZERO {
        degenerate += 1;
        out.fill(T::ZERO);
        return degenerate;
    }
    let gn = gn2.sqrt();
    let full = spec.crop_len == c;
    for cell in 0..n * n {
        let ad = &a.data()[cell * c..(cell + 1) * c];
        let mut an2_full = T::ZERO;
        for &v in ad {
            an2_full += v * v;
        }
        for r in 0..spec.r_bins {
            let base = (spec.crop_start + r * spec.step) % c;
            let an2 = if full {
                an2_full
            } else {
                let mut s = T::ZERO;
                for e in 0..spec.crop_len {
                    let v = ad[(base + e) % c];
                    s += v * v;
                }
                s
            };
            let o = cell * spec.r_bins + r;
            if an2 == T::ZERO {
                out[o] = T::ZERO;
                degenerate += 1;
                continue;
            }
            let mut dot = T::ZERO;
            for (e, &gv) in gd.iter().enumerate() {
                dot += gv * ad[(base + e) % c];
            }
            out[o] = dot / (gn * an2.sqrt());
        }
    }
    degenerate
}

fn roll_match_backward<T: Scalar>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    spec: &RollMatchSpec,
    upstream: &Tensor<T>,
) -> (Vec<T>, Vec<T>) {
    let n = a.shape()[0];
    let c = a.shape()[2];
    let gd = g.data();
    let mut dg = vec![T::ZERO; gd.len()];
    let mut da = vec![T::ZERO; a.numel()];
    let mut gn2 = T::ZERO;
    for &v in gd {
        gn2 += v * v;
    }
    if gn2 == T::ZERO {
        return (dg, da);
    }
    let gn = gn2.sqrt();
    let full = spec.crop_len == c;
    for cell in 0..n * n {
        let ad = &a.data()[cell * c..(cell + 1) * c];
        let dac = &mut da[cell * c..(cell + 1) * c];
        let mut an2_full = T::ZERO;
        for &v in ad {
            an2_full += v * v;
        }
        for r in 0..spec.r_bins {
            let up = upstream.data()[cell * spec.r_bins + r];
            if up == T::ZERO {
                continue;
            }
            let base = (spec.crop_start + r * spec.step) % c;
            let an2 = if full {
                an2_full
            } else {
                let mut s = T::ZERO;
                for e in 0..spec.crop_len {
                    let v = ad[(base + e) % c];
                    s += v * v;
                }
                s
            };
            if an2 == T::ZERO {
                continue;
            }
            let an = an2.sqrt();
            let mut dot = T::ZERO;
            for (e, &gv) in gd.iter().enumerate() {
                dot += gv * ad[(base + e) % c];
            }
            let s = dot / (gn * an);
            for e in 0..spec.crop_len {
                let ai = (base + e) % c;
                let av = ad[ai];
                let gv = gd[e];
                dg[e] += up * (av / (gn * an) - s * gv / gn2);
                dac[ai] += up * (gv / (gn * an) - s * av / an2);
            }
        }
    }
    (dg, da)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: &[usize]) -> Tensor<f64> {
        Tensor::filled(shape, 1.0)
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut g = Graph::new();
        let x = g.input(&[2, 2]).unwrap();
        let c = g.input(&[2, 2]).unwrap();
        let loss = g.dot_const(x, c).unwrap();
        let mut ws = Workspace::<f64>::new(&g);
        let params = ParamSet { tensors: vec![] };
        let err = g.backward(&mut ws, &params, loss).unwrap_err();
        assert!(matches!(err, TensorError::State(_)));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.input(&[4, 4, 2]).unwrap();
        let k = g.input(&[3, 3, 3, 1]).unwrap();
        let err = g.conv2d(x, k, None, PadMode::Zero, 1).unwrap_err();
        assert!(matches!(err, TensorError::Shape(_)));
    }

    #[test]
    fn deconv_rejects_non_square_input() {
        let mut g = Graph::new();
        let x = g.input(&[2, 3, 1]).unwrap();
        let k = g.input(&[3, 3, 1, 1]).unwrap();
        let err = g.deconv2d(x, k, None).unwrap_err();
        assert!(matches!(err, TensorError::Shape(_)));
    }

    #[test]
    fn weighted_sum_forward_and_grad() {
        let mut g = Graph::new();
        let a = g.input(&[1]).unwrap();
        let b = g.input(&[1]).unwrap();
        let s = g.weighted_sum(&[a, b], &[2.0, -3.0]).unwrap();
        let mut ws = Workspace::<f64>::new(&g);
        let params = ParamSet { tensors: vec![] };
        ws.set_input(&g, a, Tensor::scalar(5.0)).unwrap();
        ws.set_input(&g, b, Tensor::scalar(1.0)).unwrap();
        g.forward(&mut ws, &params, &[s]).unwrap();
        assert_eq!(ws.value(s).unwrap().data()[0], 7.0);
        g.backward(&mut ws, &params, s).unwrap();
        assert_eq!(ws.grad(a).unwrap().data()[0], 2.0);
        assert_eq!(ws.grad(b).unwrap().data()[0], -3.0);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::new();
        let x = g.input(&[3]).unwrap();
        let zeros = g.input(&[3]).unwrap();
        let loss = g.dot_const(x, zeros).unwrap();
        let mut ws = Workspace::<f64>::new(&g);
        let params = ParamSet { tensors: vec![] };
        ws.set_input(&g, x, ones(&[3])).unwrap();
        ws.set_input(&g, zeros, Tensor::zeros(&[3])).unwrap();
        g.forward(&mut ws, &params, &[loss]).unwrap();
        g.backward(&mut ws, &params, loss).unwrap();
        assert!(ws.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_mask_is_rejected_at_forward() {
        let mut g = Graph::new();
        let x = g.input(&[1, 1, 3]).unwrap();
        let m = g.input(&[3]).unwrap();
        let y = g.max_channels(x, Some(m)).unwrap();
        let mut ws = Workspace::<f64>::new(&g);
        let params = ParamSet { tensors: vec![] };
        ws.set_input(&g, x, ones(&[1, 1, 3])).unwrap();
        ws.set_input(&g, m, Tensor::zeros(&[3])).unwrap();
        let err = g.forward(&mut ws, &params, &[y]).unwrap_err();
        assert!(matches!(err, TensorError::EmptyPriorMask));
    }
}
