//! Plain conv-BN blocks, asymmetric convolution blocks and sequential models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bn::{BatchNormState, Mode};
use crate::graph::{Gradients, Graph, NodeId};
use crate::param::{IdGen, Param};
use crate::spec::{BlockKind, ConvDesc, LayerDesc, ModelSpec};
use crate::tensor::{ConvGeometry, FilterBank};
use crate::{Error, Real, Result, Tensor};

/// A convolution optionally followed by batch norm.
///
/// `shift` is applied to the input before convolving; the border ACB variant
/// uses it to move the asymmetric windows off the kernel center.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub bn: Option<BatchNormState<T>>,
    pub geom: ConvGeometry,
    pub shift: (isize, isize),
}

impl<T: Real> ConvBranch<T> {
    pub fn filters(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dims()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        let d = self.weight.value.dims();
        (d[2], d[3])
    }

    /// Current weights and bias as a standalone bank.
    pub fn filter_bank(&self) -> FilterBank<T> {
        FilterBank::new(
            self.weight.value.clone(),
            self.bias.as_ref().map(|b| b.value.data().to_vec()),
        )
        .expect("branch shapes are validated at construction")
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let xs = g.shift(x, self.shift.0, self.shift.1)?;
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        let y = g.conv2d(xs, w, b, self.geom)?;
        match &self.bn {
            Some(bn) => g.batch_norm(y, bn, mode),
            None => Ok(y),
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.iter());
        if let Some(bn) = &self.bn {
            v.extend(bn.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.iter_mut());
        if let Some(bn) = &mut self.bn {
            v.extend(bn.params_mut());
        }
        v
    }

    fn cast<U: Real>(&self) -> ConvBranch<U> {
        ConvBranch {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(|b| b.cast()),
            bn: self.bn.as_ref().map(|b| b.cast()),
            geom: self.geom,
            shift: self.shift,
        }
    }
}

/// Where the asymmetric kernels land inside the 3x3 kernel: the row of the
/// horizontal `1x3` kernel and the column of the vertical `3x1` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedOffsets {
    pub horizontal_row: usize,
    pub vertical_col: usize,
}

impl EmbedOffsets {
    /// Central crisscross (the kernel skeleton).
    pub const CENTER: Self = Self {
        horizontal_row: 1,
        vertical_col: 1,
    };
    /// Bottom row and right column.
    pub const BORDER: Self = Self {
        horizontal_row: 2,
        vertical_col: 2,
    };
}

/// Which parts of an ACB to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub use_horizontal: bool,
    pub use_vertical: bool,
    /// `false` moves batch norm from each branch to after the summation.
    pub bn_in_branch: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_horizontal: true,
            use_vertical: true,
            bn_in_branch: true,
        }
    }
}

/// Parallel 3x3, 1x3 and 3x1 branches whose outputs are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct AcBlock<T> {
    pub square: ConvBranch<T>,
    pub horizontal: Option<ConvBranch<T>>,
    pub vertical: Option<ConvBranch<T>>,
    pub post_bn: Option<BatchNormState<T>>,
    pub offsets: EmbedOffsets,
}

impl<T: Real> AcBlock<T> {
    pub fn branches(&self) -> impl Iterator<Item = &ConvBranch<T>> {
        std::iter::once(&self.square)
            .chain(self.horizontal.iter())
            .chain(self.vertical.iter())
    }

    pub fn stride(&self) -> (usize, usize) {
        self.square.geom.stride
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let mut acc = self.square.forward(g, x, mode)?;
        for branch in self.horizontal.iter().chain(self.vertical.iter()) {
            let y = branch.forward(g, x, mode)?;
            acc = g.add(acc, y)?;
        }
        match &self.post_bn {
            Some(bn) => g.batch_norm(acc, bn, mode),
            None => Ok(acc),
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.branches().flat_map(|b| b.params()).collect();
        if let Some(bn) = &self.post_bn {
            v.extend(bn.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.square.params_mut();
        if let Some(h) = &mut self.horizontal {
            v.extend(h.params_mut());
        }
        if let Some(b) = &mut self.vertical {
            v.extend(b.params_mut());
        }
        if let Some(bn) = &mut self.post_bn {
            v.extend(bn.params_mut());
        }
        v
    }

    fn bn_states_mut(&mut self) -> Vec<&mut BatchNormState<T>> {
        let mut v = Vec::new();
        v.extend(self.square.bn.as_mut());
        if let Some(h) = &mut self.horizontal {
            v.extend(h.bn.as_mut());
        }
        if let Some(b) = &mut self.vertical {
            v.extend(b.bn.as_mut());
        }
        v.extend(self.post_bn.as_mut());
        v
    }

    fn cast<U: Real>(&self) -> AcBlock<U> {
        AcBlock {
            square: self.square.cast(),
            horizontal: self.horizontal.as_ref().map(|b| b.cast()),
            vertical: self.vertical.as_ref().map(|b| b.cast()),
            post_bn: self.post_bn.as_ref().map(|b| b.cast()),
            offsets: self.offsets,
        }
    }
}

/// Evaluates one block on a standalone input.
pub fn acb_forward<T: Real>(block: &AcBlock<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let y = block.forward(&mut g, xn, mode)?;
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `(classes, features, 1, 1)`
    pub weight: Param<T>,
    /// `(classes, 1, 1, 1)`
    pub bias: Param<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(ConvBranch<T>),
    Acb(AcBlock<T>),
    Relu,
    MaxPool { k: usize, stride: usize },
    GlobalAvgPool,
    Linear(Linear<T>),
}

impl<T: Real> Layer<T> {
    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        match self {
            Layer::Conv(c) => c.forward(g, x, mode),
            Layer::Acb(b) => b.forward(g, x, mode),
            Layer::Relu => g.relu(x),
            Layer::MaxPool { k, stride } => g.max_pool(x, *k, *stride),
            Layer::GlobalAvgPool => g.global_avg_pool(x),
            Layer::Linear(l) => {
                let w = g.param(&l.weight);
                let b = g.param(&l.bias);
                g.linear(x, w, b)
            }
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv(c) => c.params(),
            Layer::Acb(b) => b.params(),
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(c) => c.params_mut(),
            Layer::Acb(b) => b.params_mut(),
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    fn bn_states_mut(&mut self) -> Vec<&mut BatchNormState<T>> {
        match self {
            Layer::Conv(c) => c.bn.as_mut().into_iter().collect(),
            Layer::Acb(b) => b.bn_states_mut(),
            _ => Vec::new(),
        }
    }

    fn cast<U: Real>(&self) -> Layer<U> {
        match self {
            Layer::Conv(c) => Layer::Conv(c.cast()),
            Layer::Acb(b) => Layer::Acb(b.cast()),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool { k, stride } => Layer::MaxPool { k: *k, stride: *stride },
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::Linear(l) => Layer::Linear(Linear {
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            }),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(c) if c.bn.is_some() => "conv-bn",
            Layer::Conv(_) => "conv",
            Layer::Acb(_) => "acb",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::GlobalAvgPool => "gap",
            Layer::Linear(_) => "linear",
        }
    }
}

/// A sequential network together with the spec it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer<T>>,
}

struct Builder {
    rng: ChaCha8Rng,
    ids: IdGen,
}

impl Builder {
    /// Zero-mean uniform weights with variance `2 / fan_in`.
    fn he_uniform<T: Real>(&mut self, dims: [usize; 4], fan_in: usize) -> Tensor<T> {
        let a = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(dims, |_| T::from_f64_lossy(self.rng.gen_range(-a..a)))
    }

    fn branch<T: Real>(
        &mut self,
        d: usize,
        c: usize,
        kernel: (usize, usize),
        geom: ConvGeometry,
        shift: (isize, isize),
        with_bn: bool,
    ) -> ConvBranch<T> {
        let weight = self.he_uniform([d, c, kernel.0, kernel.1], c * kernel.0 * kernel.1);
        ConvBranch {
            weight: Param::new(self.ids.next_id(), weight),
            bias: None,
            bn: with_bn.then(|| BatchNormState::new(d, &mut self.ids)),
            geom,
            shift,
        }
    }
}

fn layer_err(layer: usize, msg: impl Into<String>) -> Error {
    Error::Layer { layer, msg: msg.into() }
}

/// Builds the training-time network for `spec`, turning every conv marked
/// `acb` / `acb-shifted` into an ACB shaped by `ablation`.
pub fn expand_to_acnet<T: Real>(spec: &ModelSpec, ablation: Ablation, seed: u64) -> Result<Model<T>> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        ids: IdGen::default(),
    };
    let (mut c, mut h, mut w) = spec.input;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (idx, desc) in spec.layers.iter().enumerate() {
        let layer = match *desc {
            LayerDesc::Conv(cd) => {
                let layer = build_conv(&mut b, idx, &cd, c, ablation)?;
                let geom = ConvGeometry::new(cd.stride, cd.padding).map_err(|e| layer_err(idx, e.to_string()))?;
                let (r, t) = geom
                    .output_extent(h, w, cd.kernel.0, cd.kernel.1)
                    .map_err(|e| layer_err(idx, e.to_string()))?;
                (c, h, w) = (cd.filters, r, t);
                layer
            }
            LayerDesc::Relu => Layer::Relu,
            LayerDesc::MaxPool { k, stride } => {
                if k == 0 || stride == 0 || k > h || k > w {
                    return Err(layer_err(idx, format!("maxpool {k}/{stride} does not fit {h}x{w}")));
                }
                (h, w) = ((h - k) / stride + 1, (w - k) / stride + 1);
                Layer::MaxPool { k, stride }
            }
            LayerDesc::GlobalAvgPool => {
                (h, w) = (1, 1);
                Layer::GlobalAvgPool
            }
            LayerDesc::Linear { classes } => {
                if classes == 0 {
                    return Err(layer_err(idx, "linear layer needs at least one output"));
                }
                let feats = c * h * w;
                let weight = b.he_uniform([classes, feats, 1, 1], feats);
                let l = Linear {
                    weight: Param::new(b.ids.next_id(), weight),
                    bias: Param::new(b.ids.next_id(), Tensor::zeros([classes, 1, 1, 1])),
                };
                (c, h, w) = (classes, 1, 1);
                Layer::Linear(l)
            }
        };
        layers.push(layer);
    }
    Ok(Model {
        spec: spec.clone(),
        layers,
    })
}

/// The baseline network: every conv is a plain conv-BN block.
pub fn build_plain<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    let mut plain = expand_to_acnet(&spec.with_block(BlockKind::Plain), Ablation::default(), seed)?;
    plain.spec = spec.with_block(BlockKind::Plain);
    Ok(plain)
}

fn build_conv<T: Real>(b: &mut Builder, idx: usize, cd: &ConvDesc, c: usize, ablation: Ablation) -> Result<Layer<T>> {
    if cd.dilation != 1 {
        return Err(layer_err(idx, format!("dilation {} is not supported", cd.dilation)));
    }
    if cd.groups != 1 {
        return Err(layer_err(idx, format!("grouped convolution (groups={}) is not supported", cd.groups)));
    }
    if cd.filters == 0 || cd.kernel.0 == 0 || cd.kernel.1 == 0 {
        return Err(layer_err(idx, "conv needs at least one filter and a non-empty kernel"));
    }
    let geom = ConvGeometry::new(cd.stride, cd.padding).map_err(|e| layer_err(idx, e.to_string()))?;
    if cd.block == BlockKind::Plain {
        return Ok(Layer::Conv(b.branch(cd.filters, c, cd.kernel, geom, (0, 0), true)));
    }
    if !cd.acb_eligible() {
        return Err(layer_err(
            idx,
            format!(
                "ACB needs a 3x3 conv with padding 1, got {}x{} padding {:?}",
                cd.kernel.0, cd.kernel.1, cd.padding
            ),
        ));
    }
    let offsets = match cd.block {
        BlockKind::AcbShifted => EmbedOffsets::BORDER,
        _ => EmbedOffsets::CENTER,
    };
    let bn = ablation.bn_in_branch;
    let d = cd.filters;
    let square = b.branch(d, c, (3, 3), geom, (0, 0), bn);
    let horizontal = ablation.use_horizontal.then(|| {
        let g = ConvGeometry { stride: cd.stride, padding: (0, 1) };
        b.branch(d, c, (1, 3), g, (offsets.horizontal_row as isize - 1, 0), bn)
    });
    let vertical = ablation.use_vertical.then(|| {
        let g = ConvGeometry { stride: cd.stride, padding: (1, 0) };
        b.branch(d, c, (3, 1), g, (0, offsets.vertical_col as isize - 1), bn)
    });
    let post_bn = (!bn).then(|| BatchNormState::new(d, &mut b.ids));
    Ok(Layer::Acb(AcBlock {
        square,
        horizontal,
        vertical,
        post_bn,
        offsets,
    }))
}

impl<T: Real> Model<T> {
    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.spec.input
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        Ok(*self.forward_trace(g, x, mode)?.last().unwrap_or(&x))
    }

    /// Output node of every layer, in order.
    pub fn forward_trace(&self, g: &mut Graph<T>, x: NodeId, mode: Mode) -> Result<Vec<NodeId>> {
        let [_, c, h, w] = g.value(x).dims();
        if (c, h, w) != self.spec.input {
            return Err(Error::Shape(format!(
                "model expects input {:?}, got {:?}",
                self.spec.input,
                (c, h, w)
            )));
        }
        let mut cur = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(g, cur, mode).map_err(|e| match e {
                Error::Layer { .. } => e,
                other => layer_err(i, other.to_string()),
            })?;
            out.push(cur);
        }
        Ok(out)
    }

    /// Eval-mode outputs for a batch, evaluated in chunks.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        const CHUNK: usize = 256;
        let n = x.dims()[0];
        let mut data = Vec::new();
        let mut dims = None;
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let mut g = Graph::new();
            let xn = g.input(x.gather(&idx));
            let y = self.forward(&mut g, xn, Mode::Eval)?;
            let v = g.value(y);
            dims.get_or_insert(v.dims());
            data.extend_from_slice(v.data());
        }
        let [_, k, h, w] = dims.unwrap_or([0, self.spec.classes().unwrap_or(0), 1, 1]);
        Tensor::new([n, k, h, w], data)
    }

    /// Predicted class of each sample.
    pub fn classify(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.predict(x)?;
        let k = logits.dims()[1] * logits.dims()[2] * logits.dims()[3];
        Ok((0..logits.dims()[0])
            .map(|s| {
                let row = logits.sample(s);
                (0..k).fold(0, |best, i| if row[i] > row[best] { i } else { best })
            })
            .collect())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn bn_states_mut(&mut self) -> Vec<&mut BatchNormState<T>> {
        self.layers.iter_mut().flat_map(|l| l.bn_states_mut()).collect()
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Folds the batch statistics recorded in `g` into the running statistics.
    pub fn commit_bn_stats(&mut self, g: &Graph<T>) {
        for bn in self.bn_states_mut() {
            for (id, stats) in g.batch_stats() {
                if *id == bn.gamma.id {
                    bn.update_running(stats);
                }
            }
        }
    }

    pub fn accumulate_grads(&mut self, grads: &Gradients<T>) {
        for p in self.params_mut() {
            if let Some(g) = grads.param(p.id) {
                for (a, &v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn has_acb(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Acb(_)))
    }

    pub fn has_bn(&self) -> bool {
        self.layers.iter().any(|l| match l {
            Layer::Conv(c) => c.bn.is_some(),
            Layer::Acb(_) => true,
            _ => false,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }
}
