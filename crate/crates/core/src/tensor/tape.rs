use super::kernels::{col2im, gemm, im2col, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule supplied from outside the tape (quantizers, surrogates).
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input, in input order. `None` means
    /// the op does not propagate into that input.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        upstream: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

#[derive(Clone, Debug)]
pub enum BatchNormMode<T> {
    /// Normalize with batch statistics.
    Train { eps: T },
    /// Normalize with fixed running statistics.
    Eval {
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    },
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    GlobalAvgPool(NodeId),
    ShortcutPad {
        x: NodeId,
        stride: usize,
        front: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Linear(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::GlobalAvgPool(x) => vec![*x],
            Op::ShortcutPad { x, .. } => vec![*x],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so gradients can be replayed in reverse.
///
/// Nodes are appended in construction order, which is a valid topological
/// order because an op can only reference nodes that already exist.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::invalid(format!("node {} is not on this tape", id.0)))
        }
    }

    /// Records an input. Trainable leaves receive gradients in [`backward`](Self::backward).
    pub fn leaf(&mut self, mut value: Tensor<T>, trainable: bool) -> NodeId {
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// `[n, k] x [k, m] -> [n, m]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("{} x {}", shape_str(sa), shape_str(sb)),
            ));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        gemm(
            n,
            k,
            m,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (m as isize, 1),
            T::zero(),
            &mut out,
            (m as isize, 1),
        );
        Ok(self.push(Tensor::new([n, m], out)?, Op::MatMul(a, b)))
    }

    /// Fully connected layer without bias: `x [n, in]`, `w [out, in]` -> `[n, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape(
                "linear",
                format!("input {} with weight {}", shape_str(sx), shape_str(sw)),
            ));
        }
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); n * o];
        gemm(
            n,
            i,
            o,
            T::one(),
            self.value(x).data(),
            (i as isize, 1),
            self.value(w).data(),
            (1, i as isize),
            T::zero(),
            &mut out,
            (o as isize, 1),
        );
        Ok(self.push(Tensor::new([n, o], out)?, Op::Linear(x, w)))
    }

    /// Adds a per-channel bias along dimension 1.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape(
                "add_bias",
                format!("input {} with bias {}", shape_str(sx), shape_str(sb)),
            ));
        }
        let (c, inner) = (sx[1], sx[2..].iter().product::<usize>());
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + bias[(j / inner) % c];
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let s: T = self.value(x).data().iter().copied().sum();
        let out = Tensor::scalar(s / T::from_usize(n).unwrap());
        Ok(self.push(out, Op::Mean(x)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// `[n, c, h, w] -> [n, c * h * w]`
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::shape("flatten", "scalar input"));
        }
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// `[n, c, h, w] -> [n, c]`
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", shape_str(&s)));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::from_usize(hw).unwrap();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(Tensor::new([n, c], data)?, Op::GlobalAvgPool(x)))
    }

    /// Parameter-free residual shortcut: spatial subsampling by `stride`
    /// plus zero-padding of the channel dimension to `out_channels`.
    pub fn shortcut_pad(&mut self, x: NodeId, stride: usize, out_channels: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_channels < s[1] || stride == 0 {
            return Err(Error::shape(
                "shortcut_pad",
                format!("{} to {out_channels} channels, stride {stride}", shape_str(&s)),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let front = (out_channels - c) / 2;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * out_channels * oh * ow];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[((b * out_channels + ch + front) * oh + y) * ow + xx] =
                            src[((b * c + ch) * h + y * stride) * w + xx * stride];
                    }
                }
            }
        }
        let out = Tensor::new([n, out_channels, oh, ow], out)?;
        Ok(self.push(out, Op::ShortcutPad { x, stride, front }))
    }

    /// 2-D convolution without bias: `x [n, c, h, w]`, `w [o, c, k, k]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4
            || sw.len() != 4
            || sx[1] != sw[1]
            || sw[2] != sw[3]
            || stride == 0
            || sx[2] + 2 * padding < sw[2]
            || sx[3] + 2 * padding < sw[3]
        {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {} with weight {} (stride {stride}, padding {padding})",
                    shape_str(&sx),
                    shape_str(&sw)
                ),
            ));
        }
        let geom = ConvGeometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
            stride,
            padding,
        };
        let (n, o) = (sx[0], sw[0]);
        let (p, hw) = (geom.patch_len(), geom.out_pixels());
        let img = geom.channels * geom.height * geom.width;
        let mut cols = vec![T::zero(); n * p * hw];
        let mut out = vec![T::zero(); n * o * hw];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for b in 0..n {
            let c = &mut cols[b * p * hw..(b + 1) * p * hw];
            im2col(&xd[b * img..(b + 1) * img], &geom, c);
            gemm(
                o,
                p,
                hw,
                T::one(),
                wd,
                (p as isize, 1),
                c,
                (hw as isize, 1),
                T::zero(),
                &mut out[b * o * hw..(b + 1) * o * hw],
                (hw as isize, 1),
            );
        }
        let out = Tensor::new([n, o, geom.out_height(), geom.out_width()], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, geom, cols }))
    }

    /// Batch normalization over every dimension except 1 (channels).
    ///
    /// In `Train` mode the batch mean and biased variance are returned so
    /// the caller can maintain running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode<T>,
    ) -> Result<(NodeId, Option<(Vec<T>, Vec<T>)>)> {
        let sx = self.shape(x).to_vec();
        let c = *sx.get(1).unwrap_or(&0);
        if sx.len() < 2 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "input {} with gamma {} and beta {}",
                    shape_str(&sx),
                    shape_str(self.shape(gamma)),
                    shape_str(self.shape(beta))
                ),
            ));
        }
        let n = sx[0];
        let inner: usize = sx[2..].iter().product();
        let count = n * inner;
        if count == 0 {
            return Err(Error::shape("batch_norm", "empty batch"));
        }
        let xd = self.value(x).data();
        let (mean, var, eps, batch_stats) = match mode {
            BatchNormMode::Train { eps } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for (j, &v) in xd.iter().enumerate() {
                    let ch = (j / inner) % c;
                    mean[ch] = mean[ch] + v;
                }
                let inv_count = T::one() / T::from_usize(count).unwrap();
                mean.iter_mut().for_each(|m| *m = *m * inv_count);
                for (j, &v) in xd.iter().enumerate() {
                    let ch = (j / inner) % c;
                    let d = v - mean[ch];
                    var[ch] = var[ch] + d * d;
                }
                var.iter_mut().for_each(|v| *v = *v * inv_count);
                (mean, var, eps, true)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running statistics of length {} for {c} channels", mean.len()),
                    ));
                }
                (mean, var, eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (j, &v) in xd.iter().enumerate() {
            let ch = (j / inner) % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat[j] = h;
            out[j] = g[ch] * h + bt[ch];
        }
        let out = Tensor::new(sx, out)?;
        let id = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((id, batch_stats.then_some((mean, var))))
    }

    /// Mean softmax cross-entropy of `logits [n, k]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {} with {} labels", shape_str(&s), labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom = denom + *p;
            }
            probs[i * k..(i + 1) * k]
                .iter_mut()
                .for_each(|p| *p = *p / denom);
            loss = loss - (row[label] - max - denom.ln());
        }
        let loss = loss / T::from_usize(n).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Records an externally computed value whose gradient is given by `op`.
    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp<T>>,
        inputs: &[NodeId],
        output: Tensor<T>,
    ) -> Result<NodeId> {
        for &i in inputs {
            self.check(i)?;
        }
        Ok(self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients of earlier passes are
    /// discarded, so repeated calls yield identical results.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", shape_str(self.shape(loss))),
            ));
        }
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(up) = grads[idx].take() else {
                continue;
            };
            let mut acc = |id: NodeId, contrib: Vec<T>| {
                if !nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(contrib),
                }
            };
            let val = |id: NodeId| &nodes[id.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (sa, sb) = (val(*a).shape(), val(*b).shape());
                    let (n, k, m) = (sa[0], sa[1], sb[1]);
                    let mut da = vec![T::zero(); n * k];
                    gemm(n, m, k, T::one(), &up, (m as isize, 1), val(*b).data(), (1, m as isize), T::zero(), &mut da, (k as isize, 1));
                    let mut db = vec![T::zero(); k * m];
                    gemm(k, n, m, T::one(), val(*a).data(), (1, k as isize), &up, (m as isize, 1), T::zero(), &mut db, (m as isize, 1));
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Linear(x, w) => {
                    let (sx, sw) = (val(*x).shape(), val(*w).shape());
                    let (n, i, o) = (sx[0], sx[1], sw[0]);
                    let mut dx = vec![T::zero(); n * i];
                    gemm(n, o, i, T::one(), &up, (o as isize, 1), val(*w).data(), (i as isize, 1), T::zero(), &mut dx, (i as isize, 1));
                    let mut dw = vec![T::zero(); o * i];
                    gemm(o, n, i, T::one(), &up, (1, o as isize), val(*x).data(), (i as isize, 1), T::zero(), &mut dw, (i as isize, 1));
                    acc(*x, dx);
                    acc(*w, dw);
                }
                Op::AddBias(x, b) => {
                    let sx = val(*x).shape();
                    let (c, inner) = (sx[1], sx[2..].iter().product::<usize>());
                    let mut db = vec![T::zero(); c];
                    for (j, &g) in up.iter().enumerate() {
                        let ch = (j / inner) % c;
                        db[ch] = db[ch] + g;
                    }
                    acc(*b, db);
                    acc(*x, up);
                }
                Op::Add(a, b) => {
                    acc(*a, up.clone());
                    acc(*b, up);
                }
                Op::Mul(a, b) => {
                    let da = up.iter().zip(val(*b).data()).map(|(&g, &v)| g * v).collect();
                    let db = up.iter().zip(val(*a).data()).map(|(&g, &v)| g * v).collect();
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Scale(x, c) => acc(*x, up.iter().map(|&g| g * *c).collect()),
                Op::Relu(x) => {
                    let dx = up
                        .iter()
                        .zip(val(*x).data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    acc(*x, dx);
                }
                Op::Sum(x) => acc(*x, vec![up[0]; val(*x).numel()]),
                Op::Mean(x) => {
                    let n = val(*x).numel();
                    acc(*x, vec![up[0] / T::from_usize(n).unwrap(); n]);
                }
                Op::Reshape(x) => acc(*x, up),
                Op::GlobalAvgPool(x) => {
                    let s = val(*x).shape();
                    let hw = s[2] * s[3];
                    let inv = T::one() / T::from_usize(hw).unwrap();
                    let dx = up.iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect();
                    acc(*x, dx);
                }
                Op::ShortcutPad { x, stride, front } => {
                    let s = val(*x).shape();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let os = node.value.shape();
                    let (oc, oh, ow) = (os[1], os[2], os[3]);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for b in 0..n {
                        for ch in 0..c {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    dx[((b * c + ch) * h + y * stride) * w + xx * stride] =
                                        up[((b * oc + ch + front) * oh + y) * ow + xx];
                                }
                            }
                        }
                    }
                    acc(*x, dx);
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let n = val(*x).shape()[0];
                    let o = val(*w).shape()[0];
                    let (p, hw) = (geom.patch_len(), geom.out_pixels());
                    let img = geom.channels * geom.height * geom.width;
                    let wd = val(*w).data();
                    let mut dw = vec![T::zero(); o * p];
                    let mut dx = vec![T::zero(); n * img];
                    let mut dcols = vec![T::zero(); p * hw];
                    for b in 0..n {
                        let dy = &up[b * o * hw..(b + 1) * o * hw];
                        let c = &cols[b * p * hw..(b + 1) * p * hw];
                        gemm(o, hw, p, T::one(), dy, (hw as isize, 1), c, (1, hw as isize), T::one(), &mut dw, (p as isize, 1));
                        gemm(p, o, hw, T::one(), wd, (1, p as isize), dy, (hw as isize, 1), T::zero(), &mut dcols, (hw as isize, 1));
                        col2im(&dcols, geom, &mut dx[b * img..(b + 1) * img]);
                    }
                    acc(*x, dx);
                    acc(*w, dw);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let s = val(*x).shape();
                    let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                    let count = T::from_usize(s[0] * inner).unwrap();
                    let g = val(*gamma).data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for (j, &d) in up.iter().enumerate() {
                        let ch = (j / inner) % c;
                        dbeta[ch] = dbeta[ch] + d;
                        dgamma[ch] = dgamma[ch] + d * xhat[j];
                    }
                    let dx: Vec<T> = up
                        .iter()
                        .enumerate()
                        .map(|(j, &d)| {
                            let ch = (j / inner) % c;
                            if *batch_stats {
                                g[ch] * inv_std[ch] / count
                                    * (count * d - dbeta[ch] - xhat[j] * dgamma[ch])
                            } else {
                                d * g[ch] * inv_std[ch]
                            }
                        })
                        .collect();
                    acc(*x, dx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let k = val(*logits).shape()[1];
                    let scale = up[0] / T::from_usize(labels.len()).unwrap();
                    let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        dz[i * k + l] = dz[i * k + l] - scale;
                    }
                    acc(*logits, dz);
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
                    let contribs = op.backward(&ins, &node.value, &up);
                    for (&id, g) in inputs.iter().zip(contribs) {
                        if let Some(g) = g {
                            acc(id, g);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros([2, 3]), false);
        let b = tape.leaf(Tensor::zeros([3, 4]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim_with_named_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros([2, 3]), false);
        let b = tape.leaf(Tensor::zeros([4, 4]), false);
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 4]"));
    }

    #[test]
    fn relu_clamps_negative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[-1.5, 2.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn batchnorm_of_identical_rows_is_centered() {
        let mut tape = Tape::<f64>::new();
        let row = [0.3, -1.2, 4.0];
        let data: Vec<f64> = row.iter().cycle().take(12).copied().collect();
        let x = tape.leaf(t(&[4, 3], &data), false);
        let g = tape.leaf(Tensor::full([3], 1.0), false);
        let b = tape.leaf(Tensor::zeros([3]), false);
        let (y, stats) = tape
            .batch_norm(x, g, b, BatchNormMode::Train { eps: 1e-5 })
            .unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-6));
        let (mean, var) = stats.unwrap();
        assert_eq!(mean, row.to_vec());
        assert!(var.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[5], &[1.0, -2.0, 3.0, 0.5, 0.0]), true);
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn half_squared_norm_gradient_is_input() {
        let mut tape = Tape::<f64>::new();
        let vals = [0.4, -1.0, 2.5];
        let w = tape.leaf(t(&[3], &vals), true);
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &vals);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.add(w, w).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new([2, 3], vec![0.1, -0.2, 0.3, 0.9, 0.5, -0.7]).unwrap(), false);
        let w = tape.leaf(Tensor::new([4, 3], (0..12).map(|i| i as f32 * 0.1 - 0.5).collect()).unwrap(), true);
        let y = tape.linear(x, w).unwrap();
        let l = tape.softmax_cross_entropy(y, &[1, 3]).unwrap();
        tape.backward(l).unwrap();
        let first = tape.grad(w).unwrap().to_vec();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &first[..]);
    }

    #[test]
    fn shortcut_pad_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([2, 4, 5, 5], 1.0), true);
        let y = tape.shortcut_pad(x, 2, 8).unwrap();
        assert_eq!(tape.shape(y), &[2, 8, 3, 3]);
        let total: f64 = tape.value(y).data().iter().sum();
        assert_eq!(total, 2.0 * 4.0 * 9.0);
    }
}
