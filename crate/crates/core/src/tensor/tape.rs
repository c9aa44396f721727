use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::{spatial_dims, spatial_shape, Tensor};
use crate::blocks::pooling;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// Per-channel mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval(&'a ChannelStats),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize },
    AvgPool2d { input: Var, window: usize, stride: usize },
    GlobalAvgPool(Var),
    Dense { input: Var, weight: Var, bias: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Add(Var, Var),
    ConcatChannels(Var, Var),
    BatchNorm { input: Var, gamma: Var, beta: Var, running: Option<ChannelStats> },
    ClassWiseAvg { input: Var, maps_per_class: usize },
    MaxMinPool { input: Var, k_plus: usize, k_minus: usize, alpha: f64 },
    Sum(Var),
    Mean(Var),
    Bce { probs: Var, targets: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Dense { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Mul(a, b) | Op::Add(a, b) | Op::ConcatChannels(a, b) => vec![*a, *b],
            Op::AvgPool2d { input, .. }
            | Op::ClassWiseAvg { input, .. }
            | Op::MaxMinPool { input, .. }
            | Op::GlobalAvgPool(input)
            | Op::Relu(input)
            | Op::Sigmoid(input)
            | Op::ScalarMul(input, _)
            | Op::Sum(input)
            | Op::Mean(input)
            | Op::Bce { probs: input, .. }
            | Op::BceWithLogits { logits: input, .. } => vec![*input],
        }
    }
}

/// Saved forward by-products needed by the backward rule.
#[derive(Clone, Debug, Default)]
enum Aux {
    #[default]
    None,
    /// Batch mean and biased variance.
    Moments { mean: Vec<f64>, var: Vec<f64> },
    /// Flat input indices picked by max-min pooling, `k` per (sample, class).
    Extremes { top: Vec<usize>, bottom: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    aux: Aux,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one between backward calls.
    grad: Vec<f64>,
}

trait NodeValues {
    fn shape_of(&self, v: Var) -> &[usize];
    fn value_of(&self, v: Var) -> &[f64];
}

impl NodeValues for [Node] {
    fn shape_of(&self, v: Var) -> &[usize] {
        &self[v.0].shape
    }
    fn value_of(&self, v: Var) -> &[f64] {
        &self[v.0].value
    }
}

impl NodeValues for [(Vec<usize>, Vec<f64>)] {
    fn shape_of(&self, v: Var) -> &[usize] {
        &self[v.0].0
    }
    fn value_of(&self, v: Var) -> &[f64] {
        &self[v.0].1
    }
}

/// Define-by-run recording of one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is topologically
/// sorted by construction. Leaves copy their tensor's values at registration.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, t.into_values(), false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        let grad = if requires_grad { vec![0.0; value.len()] } else { Vec::new() };
        self.nodes.push(Node { shape, value, op: Op::Leaf, aux: Aux::None, requires_grad, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded node shape is consistent")
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let n = &self.nodes[v.0];
        (matches!(n.op, Op::Leaf) && n.requires_grad).then_some(n.grad.as_slice())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Batch statistics (mean, unbiased variance) seen by a train-mode batchnorm node.
    pub fn batch_stats(&self, v: Var) -> Option<ChannelStats> {
        let n = &self.nodes[v.0];
        match (&n.op, &n.aux) {
            (Op::BatchNorm { .. }, Aux::Moments { mean, var }) => {
                let c = mean.len();
                let count = (n.value.len() / c) as f64;
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                Some(ChannelStats { mean: mean.clone(), var: var.iter().map(|v| v * unbiased).collect() })
            }
            _ => None,
        }
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (shape, value, aux) = evaluate(&op, self.nodes.as_slice())?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, value, op, aux, requires_grad, grad: Vec::new() });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Recomputes every node from the leaves, returning the fresh values in node order.
    pub fn replay(&self) -> Result<Vec<Vec<f64>>> {
        let mut fresh: Vec<(Vec<usize>, Vec<f64>)> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let entry = match n.op {
                Op::Leaf => (n.shape.clone(), n.value.clone()),
                ref op => {
                    let (shape, value, _) = evaluate(op, fresh.as_slice())?;
                    (shape, value)
                }
            };
            fresh.push(entry);
        }
        Ok(fresh.into_iter().map(|(_, v)| v).collect())
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.record(Op::Conv2d { input, kernel, bias, stride, padding })
    }

    pub fn avg_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        self.record(Op::AvgPool2d { input, window, stride })
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.record(Op::GlobalAvgPool(input))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.record(Op::Dense { input, weight, bias })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.record(Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.record(Op::Sigmoid(input))
    }

    /// Elementwise product; `b` may also be a per-channel vector (`[C]` or `[N,C]`)
    /// broadcast over the spatial axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::ScalarMul(a, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::ConcatChannels(a, b))
    }

    pub fn batchnorm(&mut self, input: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let running = match mode {
            BnMode::Train => None,
            BnMode::Eval(stats) => Some(stats.clone()),
        };
        self.record(Op::BatchNorm { input, gamma, beta, running })
    }

    pub fn class_wise_avg(&mut self, input: Var, maps_per_class: usize) -> Result<Var> {
        self.record(Op::ClassWiseAvg { input, maps_per_class })
    }

    pub fn max_min_pool(&mut self, input: Var, k_plus: usize, k_minus: usize, alpha: f64) -> Result<Var> {
        self.record(Op::MaxMinPool { input, k_plus, k_minus, alpha })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.record(Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        self.record(Op::Mean(input))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    pub fn bce(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        self.record(Op::Bce { probs, targets: targets.to_vec() })
    }

    /// Same loss as [`Tape::bce`] applied to `sigmoid(logits)`, computed stably.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        self.record(Op::BceWithLogits { logits, targets: targets.to_vec() })
    }

    /// Propagates d`loss`/d(node) back to every differentiable leaf, adding into
    /// the leaves' gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                for (acc, d) in self.nodes[i].grad.iter_mut().zip(&g) {
                    *acc += d;
                }
                continue;
            }
            for (v, delta) in vjp(&self.nodes, i, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }
}

enum Broadcast {
    Same,
    /// `a` is `[n, positions, c]`, `b` is `[n, c]`.
    Channel { n: usize, positions: usize, c: usize },
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let channel = match (a, b) {
        ([h, w, c], [cb]) if c == cb => Some((1, h * w, *c)),
        ([n, h, w, c], [nb, cb]) if n == nb && c == cb => Some((*n, h * w, *c)),
        _ => None,
    };
    channel
        .map(|(n, positions, c)| Broadcast::Channel { n, positions, c })
        .ok_or_else(|| Error::shape("mul", format!("cannot combine {a:?} with {b:?}")))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn evaluate<V: NodeValues + ?Sized>(op: &Op, nodes: &V) -> Result<(Vec<usize>, Vec<f64>, Aux)> {
    let plain = |shape: Vec<usize>, value: Vec<f64>| Ok((shape, value, Aux::None));
    match op {
        Op::Leaf => unreachable!("leaves are never evaluated"),
        Op::Conv2d { input, kernel, bias, stride, padding } => {
            let xs = nodes.shape_of(*input);
            let (n, h, w, cin) = spatial_dims("conv2d", xs)?;
            let [kh, kw, kcin, cout] = *nodes.shape_of(*kernel) else {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be [Kh,Kw,Cin,Cout], got {:?}", nodes.shape_of(*kernel)),
                ));
            };
            if kcin != cin {
                return Err(Error::shape("conv2d", format!("input has {cin} channels, kernel expects {kcin}")));
            }
            if *stride == 0 {
                return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
            }
            if kh > h + 2 * padding || kw > w + 2 * padding {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
                ));
            }
            if let Some(b) = bias {
                if nodes.shape_of(*b) != [cout] {
                    return Err(Error::shape("conv2d", format!("bias must be [{cout}], got {:?}", nodes.shape_of(*b))));
                }
            }
            let g = ConvGeometry { n, h, w, cin, kh, kw, cout, stride: *stride, padding: *padding };
            let out = kernels::conv2d_forward(&g, nodes.value_of(*input), nodes.value_of(*kernel), bias.map(|b| nodes.value_of(b)));
            plain(spatial_shape(xs, n, g.out_h(), g.out_w(), cout), out)
        }
        Op::AvgPool2d { input, window, stride } => {
            let xs = nodes.shape_of(*input);
            let (n, h, w, c) = spatial_dims("avg_pool2d", xs)?;
            if *window == 0 || *stride == 0 || *window > h || *window > w {
                return Err(Error::shape("avg_pool2d", format!("window {window} (stride {stride}) invalid for {h}x{w}")));
            }
            let g = PoolGeometry { n, h, w, c, window: *window, stride: *stride };
            let out = kernels::avg_pool_forward(&g, nodes.value_of(*input));
            plain(spatial_shape(xs, n, g.out_h(), g.out_w(), c), out)
        }
        Op::GlobalAvgPool(input) => {
            let xs = nodes.shape_of(*input);
            let (n, h, w, c) = spatial_dims("global_avg_pool", xs)?;
            let x = nodes.value_of(*input);
            let area = (h * w) as f64;
            let mut out = vec![0.0; n * c];
            for b in 0..n {
                let dst = &mut out[b * c..][..c];
                for row in x[b * h * w * c..][..h * w * c].chunks_exact(c) {
                    dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                dst.iter_mut().for_each(|d| *d /= area);
            }
            plain(if xs.len() == 3 { vec![c] } else { vec![n, c] }, out)
        }
        Op::Dense { input, weight, bias } => {
            let xs = nodes.shape_of(*input);
            let (batch, nin) = match *xs {
                [k] => (1, k),
                [b, k] => (b, k),
                _ => return Err(Error::shape("dense", format!("input must be [N] or [B,N], got {xs:?}"))),
            };
            let [mout, wn] = *nodes.shape_of(*weight) else {
                return Err(Error::shape("dense", format!("weight must be rank 2, got {:?}", nodes.shape_of(*weight))));
            };
            if wn != nin {
                return Err(Error::shape("dense", format!("weight has {wn} columns, input length is {nin}")));
            }
            if let Some(b) = bias {
                if nodes.shape_of(*b) != [mout] {
                    return Err(Error::shape("dense", format!("bias must be [{mout}]")));
                }
            }
            let (x, wv) = (nodes.value_of(*input), nodes.value_of(*weight));
            let mut out = vec![0.0; batch * mout];
            for b in 0..batch {
                let xr = &x[b * nin..][..nin];
                for o in 0..mout {
                    let wr = &wv[o * nin..][..nin];
                    let mut acc: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                    if let Some(bv) = bias {
                        acc += nodes.value_of(*bv)[o];
                    }
                    out[b * mout + o] = acc;
                }
            }
            plain(if xs.len() == 1 { vec![mout] } else { vec![batch, mout] }, out)
        }
        Op::Relu(x) => plain(
            nodes.shape_of(*x).to_vec(),
            nodes.value_of(*x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        ),
        Op::Sigmoid(x) => plain(nodes.shape_of(*x).to_vec(), nodes.value_of(*x).iter().map(|&v| sigmoid(v)).collect()),
        Op::Mul(a, b) => {
            let (av, bv) = (nodes.value_of(*a), nodes.value_of(*b));
            let out = match broadcast_kind(nodes.shape_of(*a), nodes.shape_of(*b))? {
                Broadcast::Same => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
                Broadcast::Channel { n, positions, c } => {
                    let mut out = Vec::with_capacity(av.len());
                    for s in 0..n {
                        let gate = &bv[s * c..][..c];
                        for row in av[s * positions * c..][..positions * c].chunks_exact(c) {
                            out.extend(row.iter().zip(gate).map(|(x, g)| x * g));
                        }
                    }
                    out
                }
            };
            plain(nodes.shape_of(*a).to_vec(), out)
        }
        Op::ScalarMul(a, s) => plain(nodes.shape_of(*a).to_vec(), nodes.value_of(*a).iter().map(|v| v * s).collect()),
        Op::Add(a, b) => {
            if nodes.shape_of(*a) != nodes.shape_of(*b) {
                return Err(Error::shape("add", format!("{:?} vs {:?}", nodes.shape_of(*a), nodes.shape_of(*b))));
            }
            plain(
                nodes.shape_of(*a).to_vec(),
                nodes.value_of(*a).iter().zip(nodes.value_of(*b)).map(|(x, y)| x + y).collect(),
            )
        }
        Op::ConcatChannels(a, b) => {
            let (sa, sb) = (nodes.shape_of(*a), nodes.shape_of(*b));
            if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
                return Err(Error::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
            }
            let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
            let mut out = Vec::with_capacity(nodes.value_of(*a).len() + nodes.value_of(*b).len());
            for (ra, rb) in nodes.value_of(*a).chunks_exact(ca).zip(nodes.value_of(*b).chunks_exact(cb)) {
                out.extend_from_slice(ra);
                out.extend_from_slice(rb);
            }
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = ca + cb;
            plain(shape, out)
        }
        Op::BatchNorm { input, gamma, beta, running } => {
            let xs = nodes.shape_of(*input);
            let c = *xs.last().ok_or_else(|| Error::shape("batchnorm", "rank-0 input"))?;
            if nodes.shape_of(*gamma) != [c] || nodes.shape_of(*beta) != [c] {
                return Err(Error::shape("batchnorm", format!("gamma/beta must be [{c}]")));
            }
            let x = nodes.value_of(*input);
            match running {
                Some(stats) => {
                    if stats.mean.len() != c || stats.var.len() != c {
                        return Err(Error::shape("batchnorm", format!("running stats must have {c} channels")));
                    }
                    let out = kernels::batchnorm_apply(x, c, &stats.mean, &stats.var, nodes.value_of(*gamma), nodes.value_of(*beta));
                    plain(xs.to_vec(), out)
                }
                None => {
                    if x.len() / c < 2 {
                        return Err(Error::shape("batchnorm", "train mode needs at least 2 positions per channel"));
                    }
                    let (mean, var) = kernels::channel_moments(x, c);
                    let out = kernels::batchnorm_apply(x, c, &mean, &var, nodes.value_of(*gamma), nodes.value_of(*beta));
                    Ok((xs.to_vec(), out, Aux::Moments { mean, var }))
                }
            }
        }
        Op::ClassWiseAvg { input, maps_per_class } => {
            let xs = nodes.shape_of(*input);
            let out_shape = pooling::class_wise_shape(xs, *maps_per_class)?;
            plain(out_shape, pooling::class_wise_avg(nodes.value_of(*input), *maps_per_class))
        }
        Op::MaxMinPool { input, k_plus, k_minus, alpha } => {
            let xs = nodes.shape_of(*input);
            let (n, h, w, c) = spatial_dims("max_min_pool", xs)?;
            pooling::check_k(h * w, *k_plus, *k_minus)?;
            let (out, top, bottom) = pooling::max_min_forward(nodes.value_of(*input), n, h * w, c, *k_plus, *k_minus, *alpha);
            let shape = if xs.len() == 3 { vec![c] } else { vec![n, c] };
            Ok((shape, out, Aux::Extremes { top, bottom }))
        }
        Op::Sum(x) => plain(vec![1], vec![nodes.value_of(*x).iter().sum()]),
        Op::Mean(x) => {
            let v = nodes.value_of(*x);
            plain(vec![1], vec![v.iter().sum::<f64>() / v.len() as f64])
        }
        Op::Bce { probs, targets } => {
            let p = nodes.value_of(*probs);
            check_targets(p.len(), targets)?;
            let total: f64 = p
                .iter()
                .zip(targets)
                .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
                .sum();
            plain(vec![1], vec![total / p.len() as f64])
        }
        Op::BceWithLogits { logits, targets } => {
            let r = nodes.value_of(*logits);
            check_targets(r.len(), targets)?;
            let total: f64 = r
                .iter()
                .zip(targets)
                .map(|(&r, &y)| r.max(0.0) - r * y + (-r.abs()).exp().ln_1p())
                .sum();
            plain(vec![1], vec![total / r.len() as f64])
        }
    }
}

fn check_targets(n: usize, targets: &[f64]) -> Result<()> {
    if targets.len() != n {
        return Err(Error::shape("bce", format!("{n} predictions vs {} targets", targets.len())));
    }
    Ok(())
}

/// Vector-Jacobian products of node `i` for upstream gradient `g`.
fn vjp(nodes: &[Node], i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let node = &nodes[i];
    let needs = |v: Var| nodes[v.0].requires_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { input, kernel, bias, stride, padding } => {
            let (n, h, w, cin) = spatial_dims("conv2d", &nodes[input.0].shape).unwrap();
            let ks = &nodes[kernel.0].shape;
            let geom = ConvGeometry { n, h, w, cin, kh: ks[0], kw: ks[1], cout: ks[3], stride: *stride, padding: *padding };
            let want_b = bias.is_some_and(needs);
            let (dx, dk, db) = kernels::conv2d_backward(
                &geom,
                &nodes[input.0].value,
                &nodes[kernel.0].value,
                g,
                needs(*input),
                needs(*kernel),
                want_b,
            );
            out.extend(dx.map(|d| (*input, d)));
            out.extend(dk.map(|d| (*kernel, d)));
            if let (Some(b), Some(d)) = (bias, db) {
                out.push((*b, d));
            }
        }
        Op::AvgPool2d { input, window, stride } => {
            let (n, h, w, c) = spatial_dims("avg_pool2d", &nodes[input.0].shape).unwrap();
            let geom = PoolGeometry { n, h, w, c, window: *window, stride: *stride };
            out.push((*input, kernels::avg_pool_backward(&geom, g)));
        }
        Op::GlobalAvgPool(input) => {
            let (n, h, w, c) = spatial_dims("global_avg_pool", &nodes[input.0].shape).unwrap();
            let area = (h * w) as f64;
            let mut dx = Vec::with_capacity(n * h * w * c);
            for b in 0..n {
                let gb = &g[b * c..][..c];
                for _ in 0..h * w {
                    dx.extend(gb.iter().map(|v| v / area));
                }
            }
            out.push((*input, dx));
        }
        Op::Dense { input, weight, bias } => {
            let x = &nodes[input.0].value;
            let wv = &nodes[weight.0].value;
            let (mout, nin) = (nodes[weight.0].shape[0], nodes[weight.0].shape[1]);
            let batch = x.len() / nin;
            if needs(*input) {
                let mut dx = vec![0.0; batch * nin];
                for b in 0..batch {
                    for o in 0..mout {
                        let go = g[b * mout + o];
                        for (d, wv) in dx[b * nin..][..nin].iter_mut().zip(&wv[o * nin..][..nin]) {
                            *d += go * wv;
                        }
                    }
                }
                out.push((*input, dx));
            }
            if needs(*weight) {
                let mut dw = vec![0.0; mout * nin];
                for b in 0..batch {
                    for o in 0..mout {
                        let go = g[b * mout + o];
                        for (d, xv) in dw[o * nin..][..nin].iter_mut().zip(&x[b * nin..][..nin]) {
                            *d += go * xv;
                        }
                    }
                }
                out.push((*weight, dw));
            }
            if let Some(b) = bias.filter(|b| needs(*b)) {
                let mut db = vec![0.0; mout];
                for row in g.chunks_exact(mout) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                out.push((b, db));
            }
        }
        Op::Relu(x) => {
            let d = nodes[x.0].value.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
            out.push((*x, d));
        }
        Op::Sigmoid(x) => {
            let d = node.value.iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
            out.push((*x, d));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            match broadcast_kind(&nodes[a.0].shape, &nodes[b.0].shape).unwrap() {
                Broadcast::Same => {
                    if needs(*a) {
                        out.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                    }
                    if needs(*b) {
                        out.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                    }
                }
                Broadcast::Channel { n, positions, c } => {
                    if needs(*a) {
                        let mut da = Vec::with_capacity(av.len());
                        for s in 0..n {
                            let gate = &bv[s * c..][..c];
                            for row in g[s * positions * c..][..positions * c].chunks_exact(c) {
                                da.extend(row.iter().zip(gate).map(|(x, y)| x * y));
                            }
                        }
                        out.push((*a, da));
                    }
                    if needs(*b) {
                        let mut db = vec![0.0; n * c];
                        for s in 0..n {
                            let dst = &mut db[s * c..][..c];
                            let rows = av[s * positions * c..][..positions * c]
                                .chunks_exact(c)
                                .zip(g[s * positions * c..][..positions * c].chunks_exact(c));
                            for (ar, gr) in rows {
                                for ch in 0..c {
                                    dst[ch] += ar[ch] * gr[ch];
                                }
                            }
                        }
                        out.push((*b, db));
                    }
                }
            }
        }
        Op::ScalarMul(a, s) => out.push((*a, g.iter().map(|v| v * s).collect())),
        Op::Add(a, b) => {
            out.push((*a, g.to_vec()));
            out.push((*b, g.to_vec()));
        }
        Op::ConcatChannels(a, b) => {
            let ca = *nodes[a.0].shape.last().unwrap();
            let cb = *nodes[b.0].shape.last().unwrap();
            let mut da = Vec::with_capacity(nodes[a.0].value.len());
            let mut db = Vec::with_capacity(nodes[b.0].value.len());
            for row in g.chunks_exact(ca + cb) {
                da.extend_from_slice(&row[..ca]);
                db.extend_from_slice(&row[ca..]);
            }
            out.push((*a, da));
            out.push((*b, db));
        }
        Op::BatchNorm { input, gamma, beta, running } => {
            let x = &nodes[input.0].value;
            let gam = &nodes[gamma.0].value;
            let c = gam.len();
            match (running, &node.aux) {
                (None, Aux::Moments { mean, var }) => {
                    let (dx, dg, db) = kernels::batchnorm_train_backward(x, c, mean, var, gam, g);
                    out.push((*input, dx));
                    out.push((*gamma, dg));
                    out.push((*beta, db));
                }
                (Some(stats), _) => {
                    let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + kernels::BN_EPS).sqrt()).collect();
                    let mut dx = Vec::with_capacity(x.len());
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (row, gr) in x.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for ch in 0..c {
                            dx.push(gr[ch] * gam[ch] * inv[ch]);
                            dg[ch] += gr[ch] * (row[ch] - stats.mean[ch]) * inv[ch];
                            db[ch] += gr[ch];
                        }
                    }
                    out.push((*input, dx));
                    out.push((*gamma, dg));
                    out.push((*beta, db));
                }
                (None, _) => unreachable!("train-mode batchnorm always records moments"),
            }
        }
        Op::ClassWiseAvg { input, maps_per_class } => {
            out.push((*input, pooling::class_wise_avg_backward(g, *maps_per_class)));
        }
        Op::MaxMinPool { input, k_plus, k_minus, alpha } => {
            let Aux::Extremes { top, bottom } = &node.aux else { unreachable!("max-min pool records its picks") };
            let mut dx = vec![0.0; nodes[input.0].value.len()];
            pooling::max_min_backward(&mut dx, g, top, bottom, *k_plus, *k_minus, *alpha);
            out.push((*input, dx));
        }
        Op::Sum(x) => out.push((*x, vec![g[0]; nodes[x.0].value.len()])),
        Op::Mean(x) => {
            let n = nodes[x.0].value.len();
            out.push((*x, vec![g[0] / n as f64; n]));
        }
        Op::Bce { probs, targets } => {
            let p = &nodes[probs.0].value;
            let scale = g[0] / p.len() as f64;
            let d = p.iter().zip(targets).map(|(&p, &y)| scale * ((1.0 - y) / (1.0 - p) - y / p)).collect();
            out.push((*probs, d));
        }
        Op::BceWithLogits { logits, targets } => {
            let r = &nodes[logits.0].value;
            let scale = g[0] / r.len() as f64;
            let d = r.iter().zip(targets).map(|(&r, &y)| scale * (sigmoid(r) - y)).collect();
            out.push((*logits, d));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::param(shape.to_vec(), values).unwrap()
    }

    #[test]
    fn conv_pointwise_scales() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([3, 3, 1], 3.0));
        let k = tape.constant(Tensor::full([1, 1, 1, 1], 2.0));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 6.0));
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([4, 4, 2], 1.5));
        let k = tape.constant(Tensor::zeros([3, 3, 2, 2]));
        let b = tape.constant(Tensor::new([2], vec![0.25, -1.0]).unwrap());
        let y = tape.conv2d(x, k, Some(b), 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[4, 4, 2]);
        for px in tape.value(y).chunks(2) {
            assert_eq!(px, &[0.25, -1.0]);
        }
    }

    #[test]
    fn conv_box_filter_interior() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([5, 5, 1], 5.0));
        let k = tape.constant(Tensor::full([3, 3, 1, 1], 1.0 / 9.0));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[3, 3, 1]);
        for &v in tape.value(y) {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_output_extent_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 9, 8, 3]));
        let k = tape.constant(Tensor::zeros([3, 3, 3, 5]));
        let y = tape.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, (9 + 2 - 3) / 2 + 1, (8 + 2 - 3) / 2 + 1, 5]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([4, 4, 3]));
        let k = tape.constant(Tensor::zeros([3, 3, 2, 1]));
        let err = tape.conv2d(x, k, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("3 channels"), "{err}");
    }

    #[test]
    fn avg_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 2, 1], vec![1., 2., 3., 4.]).unwrap());
        let y = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y), &[2.5]);

        let ramp = tape.constant(Tensor::new([4, 4, 1], (1..=16).map(f64::from).collect()).unwrap());
        let y = tape.avg_pool2d(ramp, 2, 2).unwrap();
        assert_eq!(tape.value(y), &[3.5, 5.5, 11.5, 13.5]);

        let c = tape.constant(Tensor::full([6, 6, 2], -1.25));
        let y = tape.avg_pool2d(c, 2, 2).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == -1.25));

        assert!(tape.avg_pool2d(x, 3, 1).is_err());
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 2, 1], vec![1., 2., 3., 4.]).unwrap());
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y), &[2.5]);
        let two = tape.constant(Tensor::new([2, 1, 2], vec![7., -7., 7., -7.]).unwrap());
        let y = tape.global_avg_pool(two).unwrap();
        assert_eq!(tape.value(y), &[7., -7.]);
        let z = tape.constant(Tensor::zeros([3, 3, 4]));
        let y = tape.global_avg_pool(z).unwrap();
        assert_eq!(tape.value(y), &[0.0; 4]);
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([3], vec![1., -2., 3.]).unwrap());
        let eye = tape.constant(Tensor::new([3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let y = tape.dense(x, eye, None).unwrap();
        assert_eq!(tape.value(y), &[1., -2., 3.]);
        let zero = tape.constant(Tensor::zeros([2, 3]));
        let y = tape.dense(x, zero, None).unwrap();
        assert_eq!(tape.value(y), &[0., 0.]);
        let ones = tape.constant(Tensor::new([2], vec![1., 1.]).unwrap());
        let w = tape.constant(Tensor::new([1, 2], vec![1., 1.]).unwrap());
        let y = tape.dense(ones, w, None).unwrap();
        assert_eq!(tape.value(y), &[2.]);
        assert!(tape.dense(ones, eye, None).is_err());
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([4], vec![0.0, -3.0, 3.0, 2.0]).unwrap());
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s)[0], 0.5);
        assert!((tape.value(s)[3] - 0.880_797_077_977_882_3).abs() < 1e-15);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 0.0, 3.0, 2.0]);
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([4], vec![-700.0, -30.0, 30.0, 0.1]).unwrap());
        let s = tape.sigmoid(x).unwrap();
        assert!(tape.value(s)[..2].iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn batchnorm_examples() {
        let mut tape = Tape::new();
        // zero mean, unit (biased) variance
        let x = tape.constant(Tensor::new([4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap());
        let g = tape.constant(Tensor::full([1], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.batchnorm(x, g, b, BnMode::Train).unwrap();
        for (o, i) in tape.value(y).iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((o - i).abs() < 1e-5);
        }
        let c = tape.constant(Tensor::full([2, 2, 1], 3.0));
        let beta = tape.constant(Tensor::full([1], 0.7));
        let y = tape.batchnorm(c, g, beta, BnMode::Train).unwrap();
        assert!(tape.value(y).iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let gz = tape.constant(Tensor::zeros([1]));
        let y = tape.batchnorm(x, gz, beta, BnMode::Train).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.7));

        let one = tape.constant(Tensor::zeros([1, 1]));
        assert!(tape.batchnorm(one, g, b, BnMode::Train).is_err());
        let stats = ChannelStats { mean: vec![2.0], var: vec![4.0 - 1e-5] };
        let y = tape.batchnorm(one, g, b, BnMode::Eval(&stats)).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_stats_are_unbiased() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 1], vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::full([1], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.batchnorm(x, g, b, BnMode::Train).unwrap();
        let s = tape.batch_stats(y).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.var, vec![2.0]);
    }

    #[test]
    fn mul_broadcasts_channel_vectors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new([1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let s = tape.constant(Tensor::new([2], vec![10., 0.5]).unwrap());
        let y = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(y), &[10., 1., 30., 2.]);
        let bad = tape.constant(Tensor::zeros([3]));
        assert!(tape.mul(a, bad).is_err());
    }

    #[test]
    fn concat_then_slice_recovers_operands() {
        let a = Tensor::new([2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new([2, 2, 2], (10..18).map(f64::from).collect()).unwrap();
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let cat = tape.concat_channels(va, vb).unwrap();
        let y = tape.tensor(cat);
        assert_eq!(y.shape(), &[2, 2, 3]);
        assert_eq!(y.slice_channels(0, 1).unwrap().values(), a.values());
        assert_eq!(y.slice_channels(1, 3).unwrap().values(), b.values());
        let c = tape.constant(Tensor::zeros([3, 2, 1]));
        assert!(tape.concat_channels(va, c).is_err());
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], vec![0.0]));
        let s = tape.sigmoid(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_product_sum_and_accumulation() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[3], vec![1., 2., 3.]));
        let b = tape.leaf(&t(&[3], vec![-4., 5., 0.5]));
        let p = tape.mul(a, b).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[-4., 5., 0.5]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[-8., 10., 1.0]);
        tape.zero_grads();
        assert_eq!(tape.grad(a).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn off_path_leaves_get_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], vec![1., 2.]));
        let unused = tape.leaf(&t(&[2], vec![3., 4.]));
        let _dangling = tape.relu(unused).unwrap();
        let l = tape.sum(a).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], vec![1., 2.]));
        let r = tape.relu(a).unwrap();
        assert!(matches!(tape.backward(r), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], vec![0.0, 1.0]));
        let r = tape.relu(a).unwrap();
        let l = tape.sum(r).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new([1], vec![0.5]).unwrap());
        let l = tape.bce(p, &[1.0]).unwrap();
        assert!((tape.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let p = tape.constant(Tensor::new([1], vec![0.9]).unwrap());
        let l = tape.bce(p, &[0.0]).unwrap();
        assert!((tape.value(l)[0] - 2.302_585_092_994_046).abs() < 1e-12);
        let p = tape.constant(Tensor::new([2], vec![1.0 - 1e-12, 1e-12]).unwrap());
        let l = tape.bce(p, &[1.0, 0.0]).unwrap();
        assert!(tape.value(l)[0] < 1e-11);
    }

    #[test]
    fn bce_with_logits_matches_bce_of_sigmoid() {
        let logits = vec![-3.0, -0.2, 0.0, 1.7, 6.0];
        let targets = [0.0, 1.0, 1.0, 0.0, 1.0];
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::new([5], logits).unwrap());
        let p = tape.sigmoid(r).unwrap();
        let a = tape.bce(p, &targets).unwrap();
        let b = tape.bce_with_logits(r, &targets).unwrap();
        assert!((tape.value(a)[0] - tape.value(b)[0]).abs() < 1e-14);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 4, 4, 2], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()));
        let k = tape.leaf(&t(&[3, 3, 2, 3], (0..54).map(|i| (i as f64 * 0.11).cos()).collect()));
        let g = tape.leaf(&t(&[3], vec![1.0, 0.5, 2.0]));
        let b = tape.leaf(&t(&[3], vec![0.0, 0.1, -0.1]));
        let y = tape.conv2d(x, k, None, 1, 1).unwrap();
        let y = tape.batchnorm(y, g, b, BnMode::Train).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.avg_pool2d(y, 2, 2).unwrap();
        let l = tape.mean(y).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v.as_slice(), tape.value(Var(i)));
        }
        assert_eq!(l.index(), tape.len() - 1);
    }
}
