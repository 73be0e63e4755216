use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvDims, Mat, NormDims};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Operand order is given in each comment; the leading
/// axis of every activation is the batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Named feed; `item_shape` excludes the batch axis.
    Input { name: String, item_shape: Vec<usize> },
    Param { name: String },
    /// `[x (N,Ci,H,W), w (Co,Ci,k,k)]`, stride 1, zero padding `k/2`.
    Conv2d,
    /// `[x (N,In), w (Out,In)]`.
    Linear,
    /// `[x (N,C,..), b (C)]`.
    BiasAdd,
    /// `[x (N,C,H,W), v (N,C)]`: adds `v[n,c]` at every spatial position.
    AddChannelVector,
    /// `[src (1,..), like (N,..)]`: repeats `src` along the batch of `like`.
    ExpandBatch,
    Silu,
    /// `[x (N,C,..), gamma (C), beta (C)]`.
    GroupNorm { groups: usize, eps: f64 },
    Downsample2x,
    Upsample2x,
    /// Concatenation along the channel axis.
    Concat,
    Add,
    Mul,
    Scale(f64),
    Mean,
    Sum,
    /// `[prediction, target]`: mean absolute difference.
    L1Loss,
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Conv2d => "conv2d",
            Op::Linear => "linear",
            Op::BiasAdd => "bias_add",
            Op::AddChannelVector => "add_channel_vector",
            Op::ExpandBatch => "expand_batch",
            Op::Silu => "silu",
            Op::GroupNorm { .. } => "group_norm",
            Op::Downsample2x => "downsample2x",
            Op::Upsample2x => "upsample2x",
            Op::Concat => "concat",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::L1Loss => "l1_loss",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    label: String,
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    inputs: Vec<(String, NodeId)>,
    outputs: Vec<(String, NodeId)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        let id = NodeId(self.nodes.len());
        let label = format!("{}#{}", op.kind(), id.0);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            label,
        });
        id
    }

    /// Replaces the auto-generated label used in error messages.
    pub fn label(&mut self, node: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[node.0].label = label.into();
        node
    }

    pub fn input(&mut self, name: &str, item_shape: &[usize]) -> NodeId {
        let id = self.push(
            Op::Input {
                name: name.to_string(),
                item_shape: item_shape.to_vec(),
            },
            &[],
        );
        self.label(id, name);
        self.inputs.push((name.to_string(), id));
        id
    }

    /// Parameter reference; repeated names share one node.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(
            Op::Param {
                name: name.to_string(),
            },
            &[],
        );
        self.label(id, name);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> NodeId {
        self.push(Op::Conv2d, &[x, w])
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        self.push(Op::Linear, &[x, w])
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.push(Op::BiasAdd, &[x, b])
    }

    pub fn add_channel_vector(&mut self, x: NodeId, v: NodeId) -> NodeId {
        self.push(Op::AddChannelVector, &[x, v])
    }

    pub fn expand_batch(&mut self, src: NodeId, like: NodeId) -> NodeId {
        self.push(Op::ExpandBatch, &[src, like])
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Silu, &[x])
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        self.push(Op::GroupNorm { groups, eps: 1e-5 }, &[x, gamma, beta])
    }

    pub fn downsample2x(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Downsample2x, &[x])
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Upsample2x, &[x])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat, parts)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(factor), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, &[x])
    }

    pub fn l1_loss(&mut self, prediction: NodeId, target: NodeId) -> NodeId {
        self.push(Op::L1Loss, &[prediction, target])
    }

    pub fn output(&mut self, name: &str, node: NodeId) {
        self.outputs.push((name.to_string(), node));
    }

    pub fn build(self) -> Graph {
        Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: self.outputs,
        }
    }
}

/// Topologically ordered primitive nodes. Construction through
/// [`GraphBuilder`] guarantees every operand precedes its consumer.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<(String, NodeId)>,
    outputs: Vec<(String, NodeId)>,
}

/// Values of every node from one evaluation.
#[derive(Debug)]
pub struct Forward<'a> {
    values: Vec<Cow<'a, Tensor>>,
}

impl Forward<'_> {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }
}

/// Gradients of a scalar with respect to graph nodes.
#[derive(Debug)]
pub struct Backward {
    grads: Vec<Option<Tensor>>,
}

impl Backward {
    pub fn node_grad(&self, node: NodeId) -> Option<&Tensor> {
        self.grads[node.0].as_ref()
    }
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node.0].op
    }

    pub fn operands(&self, node: NodeId) -> &[NodeId] {
        &self.nodes[node.0].inputs
    }

    pub fn node_label(&self, node: NodeId) -> &str {
        &self.nodes[node.0].label
    }

    /// Last node carrying `label`.
    pub fn labelled(&self, label: &str) -> Option<NodeId> {
        self.nodes.iter().rposition(|n| n.label == label).map(NodeId)
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    pub fn input_node(&self, name: &str) -> Option<NodeId> {
        self.inputs.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().map(|(n, _)| n.as_str())
    }

    /// Names of the parameters this graph reads.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param { name } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Evaluates every node. Inputs are matched by name; each must carry a
    /// leading batch axis followed by the declared item shape.
    pub fn eval<'a>(
        &self,
        feed: &[(&str, &'a Tensor)],
        params: &'a ParamStore,
    ) -> Result<Forward<'a>> {
        for (name, _) in feed {
            if !self.inputs.iter().any(|(n, _)| n == name) {
                return Err(Error::Unknown {
                    kind: "graph input",
                    name: name.to_string(),
                });
            }
        }
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let shape_err = |detail: String| Error::Shape {
                node: node.label.clone(),
                detail,
            };
            let value = match &node.op {
                Op::Input { name, item_shape } => {
                    let t = feed
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|&(_, t)| t)
                        .ok_or_else(|| shape_err("missing input".into()))?;
                    if t.shape().len() != item_shape.len() + 1 || &t.shape()[1..] != item_shape {
                        return Err(shape_err(format!(
                            "expected [N, {item_shape:?}], got {:?}",
                            t.shape()
                        )));
                    }
                    Cow::Borrowed(t)
                }
                Op::Param { name } => Cow::Borrowed(params.require(name)?),
                op => {
                    let args: Vec<&Tensor> =
                        node.inputs.iter().map(|i| values[i.0].as_ref()).collect();
                    Cow::Owned(forward_op(op, &args).map_err(shape_err)?)
                }
            };
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    node: node.label.clone(),
                });
            }
            values.push(value);
        }
        Ok(Forward { values })
    }

    /// Evaluates and returns the named outputs.
    pub fn eval_outputs(
        &self,
        feed: &[(&str, &Tensor)],
        params: &ParamStore,
    ) -> Result<BTreeMap<String, Tensor>> {
        let fwd = self.eval(feed, params)?;
        Ok(self
            .outputs
            .iter()
            .map(|(n, id)| (n.clone(), fwd.value(*id).clone()))
            .collect())
    }

    /// Reverse pass from the scalar `loss`. Gradients are produced for nodes
    /// that depend on a trainable parameter (and on inputs when
    /// `wrt_inputs`); each contributing node is visited once.
    pub fn backward(
        &self,
        fwd: &Forward<'_>,
        loss: NodeId,
        params: &ParamStore,
        wrt_inputs: bool,
    ) -> Result<Backward> {
        let loss_val = fwd.value(loss);
        if loss_val.len() != 1 {
            return Err(Error::Shape {
                node: self.nodes[loss.0].label.clone(),
                detail: format!("loss must be scalar, got shape {:?}", loss_val.shape()),
            });
        }
        let n = loss.0 + 1;
        let mut needs = vec![false; n];
        for (i, node) in self.nodes[..n].iter().enumerate() {
            needs[i] = match &node.op {
                Op::Param { name } => params.is_trainable(name),
                Op::Input { .. } => wrt_inputs,
                _ => node.inputs.iter().any(|j| needs[j.0]),
            };
        }
        let mut reach = vec![false; n];
        reach[loss.0] = true;
        for i in (0..n).rev() {
            if reach[i] {
                for j in &self.nodes[i].inputs {
                    reach[j.0] = true;
                }
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(loss_val.shape().to_vec(), vec![1.0]));
        for i in (0..n).rev() {
            if !reach[i] || !needs[i] {
                continue;
            }
            let node = &self.nodes[i];
            if node.inputs.is_empty() {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let args: Vec<&Tensor> = node.inputs.iter().map(|j| fwd.value(*j)).collect();
            let want: Vec<bool> = node.inputs.iter().map(|j| needs[j.0]).collect();
            let out = fwd.value(NodeId(i));
            let input_grads = backward_op(&node.op, &args, out, &dy, &want);
            for ((j, g), w) in node.inputs.iter().zip(input_grads).zip(want) {
                let Some(g) = g else { continue };
                debug_assert!(w);
                match &mut grads[j.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
            grads[i] = Some(dy);
        }
        Ok(Backward { grads })
    }

    /// Gradient of the scalar `loss` for every trainable parameter the graph
    /// reads. Frozen parameters get no entry; trainable parameters the loss
    /// does not depend on get zeros.
    pub fn backprop(
        &self,
        fwd: &Forward<'_>,
        loss: NodeId,
        params: &ParamStore,
    ) -> Result<BTreeMap<String, Tensor>> {
        let bwd = self.backward(fwd, loss, params, false)?;
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { name } = &node.op {
                if !params.is_trainable(name) {
                    continue;
                }
                let g = match (i <= loss.0).then(|| bwd.grads[i].clone()).flatten() {
                    Some(g) => g,
                    None => Tensor::zeros(params.require(name)?.shape().to_vec()),
                };
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<(), String> {
    if t.shape().len() != rank {
        return Err(format!("{what} must be rank {rank}, got {:?}", t.shape()));
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn conv_dims(x: &Tensor, w: &Tensor) -> Result<ConvDims, String> {
    expect_rank(x, 4, "conv input")?;
    expect_rank(w, 4, "conv kernel")?;
    let (xs, ws) = (x.shape(), w.shape());
    if ws[1] != xs[1] {
        return Err(format!(
            "kernel {ws:?} expects {} input channels, input has {}",
            ws[1], xs[1]
        ));
    }
    if ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(format!("kernel must be square with odd size, got {ws:?}"));
    }
    Ok(ConvDims {
        n: xs[0],
        cin: xs[1],
        cout: ws[0],
        h: xs[2],
        w: xs[3],
        k: ws[2],
    })
}

fn norm_dims(x: &Tensor, groups: usize) -> Result<NormDims, String> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(format!("group norm needs [N, C, ..], got {s:?}"));
    }
    if groups == 0 || s[1] % groups != 0 {
        return Err(format!("{} channels not divisible into {groups} groups", s[1]));
    }
    Ok(NormDims {
        n: s[0],
        c: s[1],
        spatial: s[2..].iter().product(),
        groups,
    })
}

/// `(batch*channels, h, w)` view of an NCHW tensor.
fn planes(x: &Tensor) -> Result<(usize, usize, usize), String> {
    expect_rank(x, 4, "resampling input")?;
    let s = x.shape();
    Ok((s[0] * s[1], s[2], s[3]))
}

fn forward_op(op: &Op, a: &[&Tensor]) -> Result<Tensor, String> {
    Ok(match op {
        Op::Input { .. } | Op::Param { .. } => unreachable!("leaf nodes are not computed"),
        Op::Conv2d => {
            let d = conv_dims(a[0], a[1])?;
            let data = kernels::conv2d_forward(a[0].data(), a[1].data(), &d);
            Tensor::from_parts(vec![d.n, d.cout, d.h, d.w], data)
        }
        Op::Linear => {
            expect_rank(a[0], 2, "linear input")?;
            expect_rank(a[1], 2, "linear weight")?;
            let (n, inp) = (a[0].shape()[0], a[0].shape()[1]);
            let (out, win) = (a[1].shape()[0], a[1].shape()[1]);
            if inp != win {
                return Err(format!("weight {:?} cannot take {inp} features", a[1].shape()));
            }
            let mut y = vec![0.0; n * out];
            kernels::gemm(
                Mat::new(a[0].data(), n, inp),
                Mat::new(a[1].data(), out, inp).t(),
                &mut y,
                0.0,
            );
            Tensor::from_parts(vec![n, out], y)
        }
        Op::BiasAdd => {
            let (x, b) = (a[0], a[1]);
            if x.shape().len() < 2 || b.shape() != [x.shape()[1]] {
                return Err(format!("bias {:?} does not match input {:?}", b.shape(), x.shape()));
            }
            let c = x.shape()[1];
            let spatial: usize = x.shape()[2..].iter().product();
            let mut y = x.data().to_vec();
            for (i, v) in y.iter_mut().enumerate() {
                *v += b.data()[(i / spatial) % c];
            }
            Tensor::from_parts(x.shape().to_vec(), y)
        }
        Op::AddChannelVector => {
            let (x, v) = (a[0], a[1]);
            expect_rank(x, 4, "feature map")?;
            if v.shape() != &x.shape()[..2] {
                return Err(format!(
                    "channel vector {:?} does not match feature map {:?}",
                    v.shape(),
                    x.shape()
                ));
            }
            let spatial = x.shape()[2] * x.shape()[3];
            let mut y = x.data().to_vec();
            for (i, val) in y.iter_mut().enumerate() {
                *val += v.data()[i / spatial];
            }
            Tensor::from_parts(x.shape().to_vec(), y)
        }
        Op::ExpandBatch => {
            let (src, like) = (a[0], a[1]);
            if src.shape().first() != Some(&1) {
                return Err(format!("expand source must have batch 1, got {:?}", src.shape()));
            }
            let n = like.shape()[0];
            let mut shape = src.shape().to_vec();
            shape[0] = n;
            Tensor::from_parts(shape, src.data().repeat(n))
        }
        Op::Silu => a[0].map(kernels::silu),
        Op::GroupNorm { groups, eps } => {
            let d = norm_dims(a[0], *groups)?;
            if a[1].shape() != [d.c] || a[2].shape() != [d.c] {
                return Err(format!("affine parameters must have shape [{}]", d.c));
            }
            let y = kernels::group_norm_forward(a[0].data(), a[1].data(), a[2].data(), &d, *eps);
            Tensor::from_parts(a[0].shape().to_vec(), y)
        }
        Op::Downsample2x => {
            let (p, h, w) = planes(a[0])?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(format!("cannot halve odd extents {:?}", a[0].shape()));
            }
            let s = a[0].shape();
            Tensor::from_parts(
                vec![s[0], s[1], h / 2, w / 2],
                kernels::downsample2x(a[0].data(), p, h, w),
            )
        }
        Op::Upsample2x => {
            let (p, h, w) = planes(a[0])?;
            let s = a[0].shape();
            Tensor::from_parts(
                vec![s[0], s[1], 2 * h, 2 * w],
                kernels::upsample2x(a[0].data(), p, h, w),
            )
        }
        Op::Concat => {
            let first = a[0].shape();
            if first.len() < 2 {
                return Err(format!("concat needs [N, C, ..], got {first:?}"));
            }
            let mut channels = 0;
            for t in a {
                let s = t.shape();
                if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                    return Err(format!("cannot concat {first:?} with {s:?}"));
                }
                channels += s[1];
            }
            let n = first[0];
            let spatial: usize = first[2..].iter().product();
            let mut data = Vec::with_capacity(n * channels * spatial);
            for b in 0..n {
                for t in a {
                    let per = t.shape()[1] * spatial;
                    data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
                }
            }
            let mut shape = first.to_vec();
            shape[1] = channels;
            Tensor::from_parts(shape, data)
        }
        Op::Add => {
            same_shape(a[0], a[1])?;
            a[0].zip_map(a[1], |x, y| x + y).expect("shapes checked")
        }
        Op::Mul => {
            same_shape(a[0], a[1])?;
            a[0].zip_map(a[1], |x, y| x * y).expect("shapes checked")
        }
        Op::Scale(c) => a[0].map(|v| v * c),
        Op::Mean => Tensor::scalar(a[0].mean()),
        Op::Sum => Tensor::scalar(a[0].sum()),
        Op::L1Loss => {
            same_shape(a[0], a[1])?;
            let n = a[0].len() as f64;
            let s: f64 = a[0]
                .data()
                .iter()
                .zip(a[1].data())
                .map(|(p, t)| (p - t).abs())
                .sum();
            Tensor::scalar(s / n)
        }
    })
}

/// Gradients for each operand; `None` where not requested.
fn backward_op(
    op: &Op,
    a: &[&Tensor],
    _out: &Tensor,
    dy: &Tensor,
    want: &[bool],
) -> Vec<Option<Tensor>> {
    let like = |t: &Tensor, data: Vec<f64>| Tensor::from_parts(t.shape().to_vec(), data);
    match op {
        Op::Input { .. } | Op::Param { .. } => vec![],
        Op::Conv2d => {
            let d = conv_dims(a[0], a[1]).expect("validated in forward");
            let (dx, dw) =
                kernels::conv2d_backward(a[0].data(), a[1].data(), dy.data(), &d, want[0], want[1]);
            vec![dx.map(|g| like(a[0], g)), dw.map(|g| like(a[1], g))]
        }
        Op::Linear => {
            let (n, inp) = (a[0].shape()[0], a[0].shape()[1]);
            let out = a[1].shape()[0];
            let dym = Mat::new(dy.data(), n, out);
            let dx = want[0].then(|| {
                let mut g = vec![0.0; n * inp];
                kernels::gemm(dym, Mat::new(a[1].data(), out, inp), &mut g, 0.0);
                like(a[0], g)
            });
            let dw = want[1].then(|| {
                let mut g = vec![0.0; out * inp];
                kernels::gemm(dym.t(), Mat::new(a[0].data(), n, inp), &mut g, 0.0);
                like(a[1], g)
            });
            vec![dx, dw]
        }
        Op::BiasAdd => {
            let c = a[0].shape()[1];
            let spatial: usize = a[0].shape()[2..].iter().product();
            let db = want[1].then(|| {
                let mut g = vec![0.0; c];
                for (i, v) in dy.data().iter().enumerate() {
                    g[(i / spatial) % c] += v;
                }
                like(a[1], g)
            });
            vec![want[0].then(|| dy.clone()), db]
        }
        Op::AddChannelVector => {
            let spatial = a[0].shape()[2] * a[0].shape()[3];
            let dv = want[1].then(|| {
                let g = dy.data().chunks(spatial).map(|c| c.iter().sum()).collect();
                like(a[1], g)
            });
            vec![want[0].then(|| dy.clone()), dv]
        }
        Op::ExpandBatch => {
            let per = a[0].len();
            let dsrc = want[0].then(|| {
                let mut g = vec![0.0; per];
                for chunk in dy.data().chunks(per) {
                    g.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                }
                like(a[0], g)
            });
            vec![dsrc, None]
        }
        Op::Silu => vec![Some(
            a[0].zip_map(dy, |x, g| g * kernels::silu_grad(x))
                .expect("shapes match"),
        )],
        Op::GroupNorm { groups, eps } => {
            let d = norm_dims(a[0], *groups).expect("validated in forward");
            let (dx, dg, db) =
                kernels::group_norm_backward(a[0].data(), a[1].data(), dy.data(), &d, *eps);
            vec![
                want[0].then(|| like(a[0], dx)),
                want[1].then(|| like(a[1], dg)),
                want[2].then(|| like(a[2], db)),
            ]
        }
        Op::Downsample2x => {
            let (p, h, w) = planes(a[0]).expect("validated in forward");
            vec![Some(like(a[0], kernels::downsample2x_backward(dy.data(), p, h, w)))]
        }
        Op::Upsample2x => {
            let (p, h, w) = planes(a[0]).expect("validated in forward");
            vec![Some(like(a[0], kernels::upsample2x_backward(dy.data(), p, h, w)))]
        }
        Op::Concat => {
            let n = a[0].shape()[0];
            let spatial: usize = a[0].shape()[2..].iter().product();
            let total: usize = a.iter().map(|t| t.shape()[1]).sum::<usize>() * spatial;
            let mut offset = 0;
            a.iter()
                .zip(want)
                .map(|(t, &w)| {
                    let per = t.shape()[1] * spatial;
                    let g = w.then(|| {
                        let mut g = Vec::with_capacity(n * per);
                        for b in 0..n {
                            let start = b * total + offset;
                            g.extend_from_slice(&dy.data()[start..start + per]);
                        }
                        like(t, g)
                    });
                    offset += per;
                    g
                })
                .collect()
        }
        Op::Add => vec![want[0].then(|| dy.clone()), want[1].then(|| dy.clone())],
        Op::Mul => vec![
            want[0].then(|| dy.zip_map(a[1], |g, b| g * b).expect("shapes match")),
            want[1].then(|| dy.zip_map(a[0], |g, x| g * x).expect("shapes match")),
        ],
        Op::Scale(c) => vec![Some(dy.map(|g| g * c))],
        Op::Mean => {
            let g = dy.data()[0] / a[0].len() as f64;
            vec![Some(Tensor::full(a[0].shape().to_vec(), g))]
        }
        Op::Sum => vec![Some(Tensor::full(a[0].shape().to_vec(), dy.data()[0]))],
        Op::L1Loss => {
            let scale = dy.data()[0] / a[0].len() as f64;
            // subgradient of |r| at r = 0 is taken as 0
            let sign = a[0]
                .zip_map(a[1], |p, t| {
                    let r = p - t;
                    if r > 0.0 {
                        scale
                    } else if r < 0.0 {
                        -scale
                    } else {
                        0.0
                    }
                })
                .expect("shapes match");
            let neg = want[1].then(|| sign.map(|v| -v));
            vec![want[0].then_some(sign), neg]
        }
    }
}
