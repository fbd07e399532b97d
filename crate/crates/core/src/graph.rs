//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid reverse topological order.

use std::collections::HashMap;

use crate::bn::{self, BatchNormState, BatchStats, Mode};
use crate::exec::Exec;
use crate::param::{Param, ParamId};
use crate::tensor::{self, conv2d_backward_input, conv2d_backward_weights, ConvGeometry, FilterBank};
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        mode: Mode,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Shift {
        x: NodeId,
        dy: isize,
        dx: isize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    GlobalAvgPool(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum(NodeId),
    WeightedSum {
        x: NodeId,
        weights: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bn_stats: Vec<(ParamId, BatchStats<T>)>,
    exec: Exec,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.params.iter()
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            bn_stats: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Graph(format!("node {} is not part of this graph", id.0)))
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Batch statistics observed by train-mode batch-norm nodes, keyed by the
    /// id of the state's `gamma` parameter.
    pub fn batch_stats(&self) -> &[(ParamId, BatchStats<T>)] {
        &self.bn_stats
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, p: &Param<T>) -> NodeId {
        self.push(p.value.clone(), Op::Param(p.id))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        let bias = match b {
            Some(b) => {
                self.check(b)?;
                Some(self.value(b).data().to_vec())
            }
            None => None,
        };
        let bank = FilterBank::new(self.value(w).clone(), bias)?;
        let y = tensor::conv2d_with(self.exec, self.value(x), &bank, geom)?;
        Ok(self.push(y, Op::Conv { x, w, b, geom }))
    }

    pub fn batch_norm(&mut self, x: NodeId, state: &BatchNormState<T>, mode: Mode) -> Result<NodeId> {
        self.check(x)?;
        let c = self.value(x).dims()[1];
        if c != state.channels() {
            return Err(Error::ChannelMismatch {
                op: "batch_norm",
                expected: state.channels(),
                got: c,
            });
        }
        let gamma = self.param(&state.gamma);
        let beta = self.param(&state.beta);
        let (xhat, inv_std) = match mode {
            Mode::Train => {
                let stats = bn::batch_stats(self.value(x));
                let r = bn::normalize(self.value(x), &stats.mean, &stats.var, state.eps);
                self.bn_stats.push((state.gamma.id, stats));
                r
            }
            Mode::Eval => {
                state.sigma()?;
                bn::normalize(self.value(x), &state.running_mean, &state.running_var, state.eps)
            }
        };
        let y = bn::affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let y = self.value(x).map(|v| v.max(T::zero()));
        Ok(self.push(y, Op::Relu(x)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// `out[y][x] = in[y + dy][x + dx]` with zero fill.
    pub fn shift(&mut self, x: NodeId, dy: isize, dx: isize) -> Result<NodeId> {
        self.check(x)?;
        if dy == 0 && dx == 0 {
            return Ok(x);
        }
        let y = tensor::shift(self.value(x), dy, dx);
        Ok(self.push(y, Op::Shift { x, dy, dx }))
    }

    /// Fully connected layer over the flattened `(c, h, w)` features;
    /// `w` has dims `(classes, features, 1, 1)` and `b` `(classes, 1, 1, 1)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let xv = self.value(x);
        let [n, c, h, ww] = xv.dims();
        let feats = c * h * ww;
        let [k, wf, _, _] = self.value(w).dims();
        if wf != feats {
            return Err(Error::Shape(format!("linear: {feats} input features, weights expect {wf}")));
        }
        if self.value(b).len() != k {
            return Err(Error::Shape(format!("linear: bias has {} entries for {k} outputs", self.value(b).len())));
        }
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(n * k);
        for s in 0..n {
            let xs = xv.sample(s);
            for o in 0..k {
                let row = &wd[o * feats..(o + 1) * feats];
                let dot: T = row.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                out.push(dot + bd[o]);
            }
        }
        let y = Tensor::new([n, k, 1, 1], out)?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims();
        let denom = T::from_usize(h * w).unwrap();
        let mut out = Vec::with_capacity(n * c);
        for s in 0..n {
            for ch in 0..c {
                out.push(xv.plane(s, ch).iter().copied().sum::<T>() / denom);
            }
        }
        let y = Tensor::new([n, c, 1, 1], out)?;
        Ok(self.push(y, Op::GlobalAvgPool(x)))
    }

    /// Unpadded max pooling with a `k x k` window.
    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims();
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(Error::Shape(format!("max_pool {k}/{stride} on {h}x{w}")));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = xv.data();
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for a in 0..k {
                        for b in 0..k {
                            let o = base + (i * stride + a) * w + j * stride + b;
                            if data[o] > data[best] {
                                best = o;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let y = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    /// Mean softmax cross-entropy of `(n, classes, 1, 1)` logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let lv = self.value(logits);
        let [n, k, h, w] = lv.dims();
        if h * w != 1 || labels.len() != n {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: logits {:?} with {} labels",
                lv.dims(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax(lv);
        let mut loss = T::zero();
        for (s, &l) in labels.iter().enumerate() {
            loss -= probs.data()[s * k + l].max(T::min_positive_value()).ln();
        }
        loss /= T::from_usize(n.max(1)).unwrap();
        let y = Tensor::new([1, 1, 1, 1], vec![loss])?;
        Ok(self.push(
            y,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let y = Tensor::new([1, 1, 1, 1], vec![self.value(x).sum()])?;
        Ok(self.push(y, Op::Sum(x)))
    }

    /// `sum(x * weights)`, a scalar probe with a non-uniform upstream gradient.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor<T>) -> Result<NodeId> {
        self.check(x)?;
        self.value(x).expect_same_dims(&weights, "weighted_sum")?;
        let s = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let y = Tensor::new([1, 1, 1, 1], vec![s])?;
        Ok(self.push(y, Op::WeightedSum { x, weights }))
    }

    /// Propagates `d loss / d node` from a scalar `loss` back to every node
    /// and parameter it depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full([1, 1, 1, 1], T::one()));
        let mut params: HashMap<ParamId, Tensor<T>> = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match params.get_mut(id) {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                    None => {
                        params.insert(*id, g.clone());
                    }
                },
                Op::Conv { x, w, b, geom } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let dx = conv2d_backward_input(self.exec, &g, wv, *geom, xv.dims());
                    let dw = conv2d_backward_weights(self.exec, &g, xv, *geom, wv.dims());
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        let [n, d, r, t] = g.dims();
                        let mut db = vec![T::zero(); d];
                        for s in 0..n {
                            for (f, acc) in db.iter_mut().enumerate() {
                                *acc += g.data()[(s * d + f) * r * t..(s * d + f + 1) * r * t]
                                    .iter()
                                    .copied()
                                    .sum::<T>();
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::new(self.value(*b).dims(), db)?);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    mode,
                } => {
                    let [n, c, h, w] = g.dims();
                    let hw = h * w;
                    let gam = self.value(*gamma).data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for s in 0..n {
                        for ch in 0..c {
                            let o = (s * c + ch) * hw;
                            for i in o..o + hw {
                                dgamma[ch] += g.data()[i] * xhat.data()[i];
                                dbeta[ch] += g.data()[i];
                            }
                        }
                    }
                    let mut dx = Tensor::zeros(g.dims());
                    match mode {
                        Mode::Eval => {
                            for s in 0..n {
                                for ch in 0..c {
                                    let o = (s * c + ch) * hw;
                                    let k = gam[ch] * inv_std[ch];
                                    for i in o..o + hw {
                                        dx.data_mut()[i] = g.data()[i] * k;
                                    }
                                }
                            }
                        }
                        Mode::Train => {
                            let m = T::from_usize(n * hw).unwrap();
                            for ch in 0..c {
                                // dxhat = g * gamma; sums over the channel
                                let sum_d = dbeta[ch] * gam[ch];
                                let sum_dx = dgamma[ch] * gam[ch];
                                let k = inv_std[ch] / m;
                                for s in 0..n {
                                    let o = (s * c + ch) * hw;
                                    for i in o..o + hw {
                                        let dxh = g.data()[i] * gam[ch];
                                        dx.data_mut()[i] = k * (m * dxh - sum_d - xhat.data()[i] * sum_dx);
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    let gd = self.value(*gamma).dims();
                    accumulate(&mut grads, *gamma, Tensor::new(gd, dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(gd, dbeta)?);
                }
                Op::Relu(x) => {
                    let dx = self.value(*x).zip_map(&g, |v, d| if v > T::zero() { d } else { T::zero() })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Shift { x, dy, dx } => {
                    accumulate(&mut grads, *x, tensor::shift(&g, -dy, -dx));
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let [n, k, _, _] = g.dims();
                    let feats = wv.dims()[1];
                    let mut dx = vec![T::zero(); n * feats];
                    let mut dw = vec![T::zero(); k * feats];
                    let mut db = vec![T::zero(); k];
                    for s in 0..n {
                        let xs = xv.sample(s);
                        for o in 0..k {
                            let go = g.data()[s * k + o];
                            db[o] += go;
                            let row = &wv.data()[o * feats..(o + 1) * feats];
                            for f in 0..feats {
                                dx[s * feats + f] += go * row[f];
                                dw[o * feats + f] += go * xs[f];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.dims(), dx)?);
                    accumulate(&mut grads, *w, Tensor::new(wv.dims(), dw)?);
                    accumulate(&mut grads, *b, Tensor::new(self.value(*b).dims(), db)?);
                }
                Op::GlobalAvgPool(x) => {
                    let dims = self.value(*x).dims();
                    let hw = dims[2] * dims[3];
                    let denom = T::from_usize(hw).unwrap();
                    let mut dx = Tensor::zeros(dims);
                    for (p, &gv) in g.data().iter().enumerate() {
                        let v = gv / denom;
                        dx.data_mut()[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d = v);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).dims());
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx.data_mut()[src] += gv;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let [n, k, _, _] = probs.dims();
                    let scale = g.data()[0] / T::from_usize(n.max(1)).unwrap();
                    let mut dl = probs.clone();
                    for (s, &l) in labels.iter().enumerate() {
                        dl.data_mut()[s * k + l] -= T::one();
                    }
                    dl.data_mut().iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Sum(x) => {
                    let dims = self.value(*x).dims();
                    accumulate(&mut grads, *x, Tensor::full(dims, g.data()[0]));
                }
                Op::WeightedSum { x, weights } => {
                    accumulate(&mut grads, *x, weights.scale(g.data()[0]));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { nodes: grads, params })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise softmax of `(n, classes, 1, 1)` logits.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, k, _, _] = logits.dims();
    let mut out = logits.clone();
    for s in 0..n {
        let row = &mut out.data_mut()[s * k..(s + 1) * k];
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}
