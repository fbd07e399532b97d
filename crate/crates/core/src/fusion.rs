//! BN fusion and branch fusion: turning a trained ACNet into the plain
//! architecture with one biased 3x3 conv per block.
//!
//! Each branch first absorbs its eval-mode batch norm (`w' = w * gamma / sigma`,
//! `b' = (b - mean) * gamma / sigma + beta` with `sigma = sqrt(running_var + eps)`),
//! then the 1x3 and 3x1 kernels are embedded into the 3x3 kernel and all
//! biases are summed. The identities hold in eval mode only; batch statistics
//! during training are input dependent.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bn::BatchNormState;
use crate::graph::Graph;
use crate::model::{AcBlock, ConvBranch, EmbedOffsets, Layer, Linear, Model};
use crate::param::{IdGen, Param};
use crate::spec::BlockKind;
use crate::tensor::{embed_kernel, kernel_add, ConvGeometry, FilterBank};
use crate::{Error, Mode, Precision, Real, Result, Tensor};

/// Folds an eval-mode batch norm into the conv that precedes it.
///
/// The scale and shift are computed in f64 and rounded once.
pub fn fold_bn<T: Real>(bank: &FilterBank<T>, bn: &BatchNormState<T>) -> Result<FilterBank<T>> {
    let d = bank.d();
    if bn.channels() != d {
        return Err(Error::ChannelMismatch {
            op: "fold_bn",
            expected: d,
            got: bn.channels(),
        });
    }
    let per_filter = bank.c() * bank.kh() * bank.kw();
    let mut weights = bank.weights().clone();
    let mut bias = Vec::with_capacity(d);
    for j in 0..d {
        let s = bn.running_var[j].as_f64() + bn.eps;
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::DegenerateStats { channel: j, value: s });
        }
        let scale = bn.gamma()[j].as_f64() / s.sqrt();
        for w in &mut weights.data_mut()[j * per_filter..(j + 1) * per_filter] {
            *w = T::from_f64_lossy(w.as_f64() * scale);
        }
        let b = bank.bias().map_or(0.0, |b| b[j].as_f64());
        bias.push(T::from_f64_lossy((b - bn.running_mean[j].as_f64()) * scale + bn.beta()[j].as_f64()));
    }
    FilterBank::new(weights, Some(bias))
}

/// The branch's conv with its batch norm folded in. Branches without batch
/// norm come back unchanged.
pub fn bn_fuse<T: Real>(branch: &ConvBranch<T>) -> Result<FilterBank<T>> {
    let bank = branch.filter_bank();
    match &branch.bn {
        Some(bn) => fold_bn(&bank, bn),
        None => Ok(bank),
    }
}

/// Embeds the asymmetric kernels into the square one and sums the biases.
///
/// `horiz` lands on row `offsets.horizontal_row`, `vert` on column
/// `offsets.vertical_col`. Missing banks and missing biases count as zero.
pub fn branch_fuse<T: Real>(
    square: &FilterBank<T>,
    horiz: Option<&FilterBank<T>>,
    vert: Option<&FilterBank<T>>,
    offsets: EmbedOffsets,
) -> Result<FilterBank<T>> {
    let (d, c) = (square.d(), square.c());
    if (square.kh(), square.kw()) != (3, 3) {
        return Err(Error::Shape(format!(
            "square branch must be 3x3, got {}x{}",
            square.kh(),
            square.kw()
        )));
    }
    let parts = [
        (horiz, (1, 3), (offsets.horizontal_row, 0), "horizontal"),
        (vert, (3, 1), (0, offsets.vertical_col), "vertical"),
    ];
    for (bank, extent, _, name) in &parts {
        if let Some(b) = bank {
            if (b.d(), b.c()) != (d, c) || (b.kh(), b.kw()) != *extent {
                return Err(Error::Shape(format!(
                    "{name} branch is {}x{}x{}x{}, expected {d}x{c}x{}x{}",
                    b.d(),
                    b.c(),
                    b.kh(),
                    b.kw(),
                    extent.0,
                    extent.1
                )));
            }
        }
    }
    let mut out = square.clone();
    for f in 0..d {
        for ch in 0..c {
            let mut k = square.kernel(f, ch);
            for (bank, _, (row, col), _) in &parts {
                if let Some(b) = bank {
                    k = kernel_add(&k, &embed_kernel(&b.kernel(f, ch), 3, 3, *row, *col)?)?;
                }
            }
            out.set_kernel(f, ch, &k)?;
        }
    }
    let mut bias = square.bias().map_or_else(|| vec![T::zero(); d], <[T]>::to_vec);
    for b in parts.iter().filter_map(|p| p.0).filter_map(|b| b.bias()) {
        bias.iter_mut().zip(b).for_each(|(acc, &v)| *acc += v);
    }
    out.set_bias(Some(bias))?;
    Ok(out)
}

/// The single biased 3x3 bank equivalent to `block` in eval mode.
///
/// With per-branch batch norm every branch is folded first; with a single
/// post-summation batch norm the raw kernels are fused first and the norm is
/// folded into the sum.
pub fn fuse_block<T: Real>(block: &AcBlock<T>) -> Result<FilterBank<T>> {
    let sq = bn_fuse(&block.square)?;
    let h = block.horizontal.as_ref().map(bn_fuse).transpose()?;
    let v = block.vertical.as_ref().map(bn_fuse).transpose()?;
    let sum = branch_fuse(&sq, h.as_ref(), v.as_ref(), block.offsets)?;
    match &block.post_bn {
        Some(bn) => fold_bn(&sum, bn),
        None => Ok(sum),
    }
}

/// What happened to one layer during fusion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFusion {
    pub index: usize,
    pub before: &'static str,
    /// Conv branches merged into the output conv.
    pub branches: usize,
    /// Batch norms folded away.
    pub bn_folded: usize,
    pub filters: usize,
    pub in_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FusionSummary {
    pub layers: Vec<LayerFusion>,
}

impl fmt::Display for FusionSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layer  before   branches  bn_folded  filters  in_channels")?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<6} {:<8} {:<9} {:<10} {:<8} {}",
                l.index, l.before, l.branches, l.bn_folded, l.filters, l.in_channels
            )?;
        }
        Ok(())
    }
}

/// Converts a trained ACNet into its plain counterpart: every ACB and every
/// conv-BN pair becomes one conv with bias and no batch norm.
pub fn fuse_model<T: Real>(acnet: &Model<T>) -> Result<Model<T>> {
    fuse_model_with_summary(acnet).map(|(m, _)| m)
}

pub fn fuse_model_with_summary<T: Real>(acnet: &Model<T>) -> Result<(Model<T>, FusionSummary)> {
    if !acnet.has_acb() && !acnet.has_bn() {
        return Err(Error::NothingToFuse);
    }
    let mut ids = IdGen::default();
    let mut summary = FusionSummary::default();
    let mut layers = Vec::with_capacity(acnet.layers.len());
    for (index, layer) in acnet.layers.iter().enumerate() {
        let wrap = |e: Error| match e {
            Error::Layer { .. } => e,
            other => Error::Layer {
                layer: index,
                msg: other.to_string(),
            },
        };
        let fused = match layer {
            Layer::Conv(c) => {
                let bank = bn_fuse(c).map_err(wrap)?;
                if c.bn.is_some() {
                    summary.layers.push(LayerFusion {
                        index,
                        before: layer.kind_name(),
                        branches: 1,
                        bn_folded: 1,
                        filters: bank.d(),
                        in_channels: bank.c(),
                    });
                }
                Layer::Conv(plain_branch(bank, c.geom, &mut ids))
            }
            Layer::Acb(b) => {
                let bank = fuse_block(b).map_err(wrap)?;
                summary.layers.push(LayerFusion {
                    index,
                    before: layer.kind_name(),
                    branches: b.branches().count(),
                    bn_folded: b.branches().filter(|br| br.bn.is_some()).count() + usize::from(b.post_bn.is_some()),
                    filters: bank.d(),
                    in_channels: bank.c(),
                });
                Layer::Conv(plain_branch(bank, b.square.geom, &mut ids))
            }
            Layer::Linear(l) => Layer::Linear(Linear {
                weight: Param::new(ids.next_id(), l.weight.value.clone()),
                bias: Param::new(ids.next_id(), l.bias.value.clone()),
            }),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool { k, stride } => Layer::MaxPool { k: *k, stride: *stride },
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
        };
        layers.push(fused);
    }
    let model = Model {
        spec: acnet.spec.with_block(BlockKind::Plain),
        layers,
    };
    Ok((model, summary))
}

fn plain_branch<T: Real>(bank: FilterBank<T>, geom: ConvGeometry, ids: &mut IdGen) -> ConvBranch<T> {
    let d = bank.d();
    let (w, b) = bank.into_parts();
    ConvBranch {
        weight: Param::new(ids.next_id(), w),
        bias: b.map(|b| Param::new(ids.next_id(), Tensor::new([d, 1, 1, 1], b).expect("bias length is d"))),
        bn: None,
        geom,
        shift: (0, 0),
    }
}

/// Magnitudes below this do not shrink the denominator of a relative deviation.
pub const REL_FLOOR: f64 = 1e-6;

/// Default pass threshold for [`verify_equivalence`] at the given precision.
pub fn default_tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::F32 => 1e-4,
        Precision::F64 => 1e-9,
    }
}

/// Input scales every random probe is evaluated at.
pub const PROBE_SCALES: [f64; 3] = [1.0, 1e3, 1e-3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub n_inputs: usize,
    pub seed: u64,
    /// Overrides [`default_tolerance`].
    pub tolerance: Option<f64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            n_inputs: 200,
            seed: 0,
            tolerance: None,
        }
    }
}

/// Largest deviation seen at one layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDeviation {
    pub index: usize,
    pub kind: &'static str,
    pub max_abs: f64,
    pub max_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub precision: Precision,
    pub max_abs: f64,
    /// Max over samples of `max_k |a_k - b_k| / (max_k |a_k| + REL_FLOOR)`.
    pub max_rel: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Number of forward evaluations per model (inputs times scales).
    pub evaluated: usize,
    /// Per-layer deviations on the unscaled inputs, when both models have the
    /// same layer structure.
    pub layers: Vec<LayerDeviation>,
}

impl EquivalenceReport {
    /// `key=value` lines for scripts.
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "precision={}\nevaluated={}\nmax_abs={:e}\nmax_rel={:e}\ntolerance={:e}\npass={}\n",
            self.precision, self.evaluated, self.max_abs, self.max_rel, self.tolerance, self.pass
        );
        for l in &self.layers {
            s += &format!("layer.{}.{}.max_abs={:e}\n", l.index, l.kind, l.max_abs);
            s += &format!("layer.{}.{}.max_rel={:e}\n", l.index, l.kind, l.max_rel);
        }
        s
    }
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: max_abs {:.3e}, max_rel {:.3e} over {} evaluations ({}, tolerance {:.0e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_abs,
            self.max_rel,
            self.evaluated,
            self.precision,
            self.tolerance
        )?;
        for l in &self.layers {
            writeln!(f, "  layer {:>2} {:<8} max_abs {:.3e}  max_rel {:.3e}", l.index, l.kind, l.max_abs, l.max_rel)?;
        }
        Ok(())
    }
}

/// Seeded standard-normal inputs shaped for `model`.
pub fn random_inputs<T: Real>(dims: (usize, usize, usize), n: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = dims;
    Tensor::from_fn([n, c, h, w], |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::from_f64_lossy(v)
    })
}

/// Compares eval-mode outputs of two models on the same random probes.
pub fn verify_equivalence<T: Real>(a: &Model<T>, b: &Model<T>, opts: &VerifyOptions) -> Result<EquivalenceReport> {
    if a.input_dims() != b.input_dims() {
        return Err(Error::Shape(format!(
            "models take different inputs: {:?} vs {:?}",
            a.input_dims(),
            b.input_dims()
        )));
    }
    let precision = Precision::of::<T>();
    let tolerance = opts.tolerance.unwrap_or_else(|| default_tolerance(precision));
    let base = random_inputs::<T>(a.input_dims(), opts.n_inputs, opts.seed);
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for &scale in &PROBE_SCALES {
        let x = base.scale(T::from_f64_lossy(scale));
        let ya = a.predict(&x)?;
        let yb = b.predict(&x)?;
        if ya.dims() != yb.dims() {
            return Err(Error::Shape(format!("outputs differ in shape: {:?} vs {:?}", ya.dims(), yb.dims())));
        }
        for s in 0..opts.n_inputs {
            let (ra, rb) = (ya.sample(s), yb.sample(s));
            let (dev, mag) = deviation(ra, rb);
            max_abs = max_abs.max(dev);
            max_rel = max_rel.max(dev / (mag + REL_FLOOR));
        }
    }
    let pass = max_rel <= tolerance && max_abs.is_finite();
    Ok(EquivalenceReport {
        precision,
        max_abs,
        max_rel,
        tolerance,
        pass,
        evaluated: opts.n_inputs * PROBE_SCALES.len(),
        layers: layer_deviations(a, b, &base)?,
    })
}

/// `(max |a - b|, max |a|)`; a NaN on either side counts as infinite deviation.
fn deviation<T: Real>(a: &[T], b: &[T]) -> (f64, f64) {
    a.iter().zip(b).fold((0.0f64, 0.0f64), |(dev, mag), (&x, &y)| {
        let d = (x.as_f64() - y.as_f64()).abs();
        (if d.is_nan() { f64::INFINITY } else { dev.max(d) }, mag.max(x.as_f64().abs()))
    })
}

fn layer_deviations<T: Real>(a: &Model<T>, b: &Model<T>, x: &Tensor<T>) -> Result<Vec<LayerDeviation>> {
    if a.layers.len() != b.layers.len() || x.dims()[0] == 0 {
        return Ok(Vec::new());
    }
    let trace = |m: &Model<T>| -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let nodes = m.forward_trace(&mut g, xn, Mode::Eval)?;
        Ok(nodes.into_iter().map(|n| g.value(n).clone()).collect())
    };
    let (ta, tb) = (trace(a)?, trace(b)?);
    let mut out = Vec::new();
    for (i, (va, vb)) in ta.iter().zip(&tb).enumerate() {
        if va.dims() != vb.dims() {
            return Ok(Vec::new());
        }
        let (dev, mag) = deviation(va.data(), vb.data());
        out.push(LayerDeviation {
            index: i,
            kind: b.layers[i].kind_name(),
            max_abs: dev,
            max_rel: dev / (mag + REL_FLOOR),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{acb_forward, expand_to_acnet, Ablation};
    use crate::spec::ModelSpec;
    use crate::tensor::{conv2d, Kernel2D};
    use crate::{bn_forward, ConvGeometry};
    use rand::Rng;

    const TOY: &str = "input 2 8 8\nconv 4 3x3 pad=1 block=acb\nrelu\nmaxpool 2\nconv 6 3x3 pad=1 block=acb\nrelu\ngap\nlinear 3\n";

    fn randomize<T: Real>(m: &mut Model<T>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for bn in m.bn_states_mut() {
            for v in bn.gamma.value.data_mut() {
                *v = T::from_f64_lossy(rng.gen_range(0.5..1.5));
            }
            for v in bn.beta.value.data_mut() {
                *v = T::from_f64_lossy(rng.gen_range(-0.5..0.5));
            }
            for v in bn.running_mean.iter_mut() {
                *v = T::from_f64_lossy(rng.gen_range(-0.5..0.5));
            }
            for v in bn.running_var.iter_mut() {
                *v = T::from_f64_lossy(rng.gen_range(0.3..2.0));
            }
        }
    }

    fn bn_with(gamma: f64, beta: f64, mean: f64, var: f64) -> BatchNormState<f64> {
        let mut bn = BatchNormState::new(1, &mut IdGen::default());
        bn.gamma.value.data_mut()[0] = gamma;
        bn.beta.value.data_mut()[0] = beta;
        bn.running_mean[0] = mean;
        bn.running_var[0] = var;
        bn
    }

    #[test]
    fn identity_bn_leaves_kernel_alone() {
        let w = Tensor::from_fn([1, 2, 3, 3], |[_, c, y, x]| (c * 9 + y * 3 + x) as f64 - 4.0);
        let bank = FilterBank::new(w.clone(), None).unwrap();
        let bn = bn_with(1.0, 0.0, 0.0, 1.0 - 1e-5);
        let fused = fold_bn(&bank, &bn).unwrap();
        for (a, b) in fused.weights().data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(fused.bias().unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_bn_fold() {
        // sqrt(var + eps) = 4
        let bn = bn_with(2.0, 0.5, 1.0, 16.0 - 1e-5);
        let w = Tensor::full([1, 1, 3, 3], 3.0);
        let fused = fold_bn(&FilterBank::new(w, None).unwrap(), &bn).unwrap();
        assert!(fused.weights().data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
        assert!(fused.bias().unwrap()[0].abs() < 1e-12);
    }

    #[test]
    fn degenerate_variance_is_rejected() {
        let bn = bn_with(1.0, 0.0, 0.0, -1.0);
        let bank = FilterBank::new(Tensor::full([1, 1, 3, 3], 1.0), None).unwrap();
        assert!(matches!(fold_bn(&bank, &bn), Err(Error::DegenerateStats { channel: 0, .. })));
    }

    #[test]
    fn fold_matches_bn_after_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 3;
        let w = Tensor::from_fn([d, 2, 3, 3], |_| rng.gen_range(-1.0..1.0f32));
        let bank = FilterBank::new(w, None).unwrap();
        let mut bn = BatchNormState::<f32>::new(d, &mut IdGen::default());
        for j in 0..d {
            bn.gamma.value.data_mut()[j] = rng.gen_range(0.5..2.0);
            bn.beta.value.data_mut()[j] = rng.gen_range(-1.0..1.0);
            bn.running_mean[j] = rng.gen_range(-1.0..1.0);
            bn.running_var[j] = rng.gen_range(0.2..3.0);
        }
        let fused = fold_bn(&bank, &bn).unwrap();
        let geom = ConvGeometry::new((1, 1), (1, 1)).unwrap();
        let x = random_inputs::<f32>((2, 6, 5), 200, 9);
        let expect = bn_forward(&conv2d(&x, &bank, geom).unwrap(), &mut bn, Mode::Eval).unwrap();
        let got = conv2d(&x, &fused, geom).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() <= 1e-5);
    }

    #[test]
    fn crisscross_example() {
        let sq = FilterBank::<f64>::zeros(1, 1, 3, 3);
        let h = FilterBank::new(Tensor::new([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap(), None).unwrap();
        let v = FilterBank::new(Tensor::new([1, 1, 3, 1], vec![4.0, 5.0, 6.0]).unwrap(), None).unwrap();
        let fused = branch_fuse(&sq, Some(&h), Some(&v), EmbedOffsets::CENTER).unwrap();
        assert_eq!(fused.weights().data(), &[0.0, 4.0, 0.0, 1.0, 7.0, 3.0, 0.0, 6.0, 0.0]);
        assert_eq!(fused.bias().unwrap(), &[0.0]);
        let border = branch_fuse(&sq, Some(&h), Some(&v), EmbedOffsets::BORDER).unwrap();
        assert_eq!(border.weights().data(), &[0.0, 0.0, 4.0, 0.0, 0.0, 5.0, 1.0, 2.0, 9.0]);
    }

    #[test]
    fn zero_asymmetric_banks_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::from_fn([2, 3, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let sq = FilterBank::new(w, Some(vec![0.25, -0.5])).unwrap();
        let h = FilterBank::zeros(2, 3, 1, 3);
        let v = FilterBank::zeros(2, 3, 3, 1);
        assert_eq!(branch_fuse(&sq, Some(&h), Some(&v), EmbedOffsets::CENTER).unwrap(), sq);
        assert_eq!(branch_fuse(&sq, None, None, EmbedOffsets::CENTER).unwrap(), sq);
    }

    #[test]
    fn branch_fuse_rejects_bad_shapes() {
        let sq = FilterBank::<f64>::zeros(2, 3, 3, 3);
        let h = FilterBank::zeros(2, 3, 3, 1);
        assert!(branch_fuse(&sq, Some(&h), None, EmbedOffsets::CENTER).is_err());
        let h = FilterBank::zeros(2, 2, 1, 3);
        assert!(branch_fuse(&sq, Some(&h), None, EmbedOffsets::CENTER).is_err());
        let h = FilterBank::zeros(2, 3, 1, 3);
        let bad = EmbedOffsets {
            horizontal_row: 3,
            vertical_col: 1,
        };
        assert!(matches!(
            branch_fuse(&sq, Some(&h), None, bad),
            Err(Error::InvalidOffset { .. })
        ));
    }

    #[test]
    fn fused_block_matches_three_branch_sum() {
        let spec = ModelSpec::parse("input 3 7 7\nconv 5 3x3 pad=1 stride=2 block=acb").unwrap();
        let mut m = expand_to_acnet::<f64>(&spec, Ablation::default(), 5).unwrap();
        randomize(&mut m, 6);
        let Layer::Acb(block) = &m.layers[0] else { panic!() };
        let fused = fuse_block(block).unwrap();
        let x = random_inputs::<f64>((3, 7, 7), 200, 8);
        let expect = acb_forward(block, &x, Mode::Eval).unwrap();
        let got = conv2d(&x, &fused, block.square.geom).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() <= 1e-10);
    }

    #[test]
    fn gamma_scales_the_fused_contribution() {
        let spec = ModelSpec::parse("input 2 5 5\nconv 3 3x3 pad=1 block=acb").unwrap();
        let mut m = expand_to_acnet::<f64>(&spec, Ablation::default(), 1).unwrap();
        randomize(&mut m, 2);
        let Layer::Acb(block) = &m.layers[0] else { panic!() };
        let alpha = 2.5;
        let mut scaled = block.clone();
        let hb = scaled.horizontal.as_mut().unwrap().bn.as_mut().unwrap();
        hb.gamma.value.data_mut().iter_mut().for_each(|g| *g *= alpha);
        let before = bn_fuse(block.horizontal.as_ref().unwrap()).unwrap();
        let after = bn_fuse(scaled.horizontal.as_ref().unwrap()).unwrap();
        for (a, b) in after.weights().data().iter().zip(before.weights().data()) {
            assert!((a - alpha * b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn post_summation_bn_fuses() {
        let spec = ModelSpec::parse(TOY).unwrap();
        let ablation = Ablation {
            bn_in_branch: false,
            ..Ablation::default()
        };
        let mut m = expand_to_acnet::<f64>(&spec, ablation, 11).unwrap();
        randomize(&mut m, 12);
        let fused = fuse_model(&m).unwrap();
        let r = verify_equivalence(&m, &fused, &VerifyOptions { n_inputs: 20, ..Default::default() }).unwrap();
        assert!(r.pass, "{r}");
    }

    #[test]
    fn fused_model_structure() {
        let spec = ModelSpec::parse(TOY).unwrap();
        let m = expand_to_acnet::<f32>(&spec, Ablation::default(), 4).unwrap();
        let (fused, summary) = fuse_model_with_summary(&m).unwrap();
        assert_eq!(fused.spec, spec.with_block(BlockKind::Plain));
        assert!(!fused.has_acb() && !fused.has_bn());
        assert_eq!(summary.layers.len(), 2);
        assert_eq!(summary.layers[0].branches, 3);
        assert_eq!(summary.layers[0].bn_folded, 3);
        // conv weights of the original structure plus one bias per filter
        let conv_weights = 4 * 2 * 9 + 6 * 4 * 9;
        let linear = 3 * 6 + 3;
        assert_eq!(fused.param_count(), conv_weights + (4 + 6) + linear);
        assert!(matches!(fuse_model(&fused), Err(Error::NothingToFuse)));
    }

    #[test]
    fn zeroed_asymmetric_branches_keep_square_weights() {
        let spec = ModelSpec::parse(TOY).unwrap();
        let mut m = expand_to_acnet::<f64>(&spec, Ablation::default(), 4).unwrap();
        for l in &mut m.layers {
            if let Layer::Acb(b) = l {
                for br in [b.horizontal.as_mut(), b.vertical.as_mut()].into_iter().flatten() {
                    br.weight.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
                b.square.bn.as_mut().unwrap().running_var.iter_mut().for_each(|v| *v = 1.0 - 1e-5);
            }
        }
        let fused = fuse_model(&m).unwrap();
        for (orig, new) in m.layers.iter().zip(&fused.layers) {
            if let (Layer::Acb(b), Layer::Conv(c)) = (orig, new) {
                for (x, y) in c.weight.value.data().iter().zip(b.square.weight.value.data()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn untrained_fusion_is_equivalent_in_both_precisions() {
        let spec = ModelSpec::parse(TOY).unwrap();
        let m = expand_to_acnet::<f64>(&spec, Ablation::default(), 21).unwrap();
        let fused = fuse_model(&m).unwrap();
        let opts = VerifyOptions { n_inputs: 50, ..Default::default() };
        let r = verify_equivalence(&m, &fused, &opts).unwrap();
        assert!(r.pass, "{r}");
        assert_eq!(r.layers.len(), m.layers.len());
        let (m32, f32m) = (m.cast::<f32>(), fuse_model(&m.cast::<f32>()).unwrap());
        let r = verify_equivalence(&m32, &f32m, &opts).unwrap();
        assert!(r.pass, "{r}");
        assert_eq!(r.tolerance, 1e-4);
    }

    #[test]
    fn self_comparison_is_exact_and_perturbation_fails() {
        let spec = ModelSpec::parse(TOY).unwrap();
        let mut m = expand_to_acnet::<f64>(&spec, Ablation::default(), 2).unwrap();
        randomize(&mut m, 3);
        let opts = VerifyOptions { n_inputs: 30, ..Default::default() };
        let r = verify_equivalence(&m, &m, &opts).unwrap();
        assert_eq!(r.max_abs, 0.0);
        let mut fused = fuse_model(&m).unwrap();
        let Layer::Conv(c) = &mut fused.layers[3] else { panic!() };
        c.bias.as_mut().unwrap().value.data_mut()[0] += 1e-2;
        let r = verify_equivalence(&m, &fused, &opts).unwrap();
        assert!(!r.pass, "{r}");
        assert!(r.to_kv().contains("pass=false"));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let a = expand_to_acnet::<f64>(&ModelSpec::parse(TOY).unwrap(), Ablation::default(), 1).unwrap();
        let b = expand_to_acnet::<f64>(
            &ModelSpec::parse(&TOY.replace("input 2 8 8", "input 2 10 10")).unwrap(),
            Ablation::default(),
            1,
        )
        .unwrap();
        assert!(verify_equivalence(&a, &b, &VerifyOptions::default()).is_err());
    }

    #[test]
    fn batch_statistics_break_equivalence() {
        let spec = ModelSpec::parse("input 1 6 6\nconv 2 3x3 pad=1 block=acb").unwrap();
        let m = expand_to_acnet::<f64>(&spec, Ablation::default(), 7).unwrap();
        let Layer::Acb(block) = &m.layers[0] else { panic!() };
        let fused = fuse_block(block).unwrap();
        // running mean is 0; this batch sits around 3
        let x = random_inputs::<f64>((1, 6, 6), 8, 1).map(|v| v + 3.0);
        let train = acb_forward(block, &x, Mode::Train).unwrap();
        let eval = conv2d(&x, &fused, block.square.geom).unwrap();
        assert!(train.max_abs_diff(&eval).unwrap() > 1e-2);
        let eval_block = acb_forward(block, &x, Mode::Eval).unwrap();
        assert!(eval_block.max_abs_diff(&eval).unwrap() < 1e-10);
    }

    #[test]
    fn border_variant_puts_mass_on_bottom_right() {
        let spec = ModelSpec::parse("input 1 5 5\nconv 1 3x3 pad=1 block=acb-shifted").unwrap();
        let mut m = expand_to_acnet::<f64>(&spec, Ablation::default(), 3).unwrap();
        let Layer::Acb(block) = &mut m.layers[0] else { panic!() };
        block.square.weight.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        block.horizontal.as_mut().unwrap().weight.value.data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        block.vertical.as_mut().unwrap().weight.value.data_mut().copy_from_slice(&[4.0, 5.0, 6.0]);
        let fused = fuse_block(block).unwrap();
        let k = Kernel2D::new(3, 3, fused.weights().data().to_vec()).unwrap();
        let s = (1.0f64 + 1e-5).sqrt().recip();
        for r in 0..3 {
            for c in 0..3 {
                let expect = match (r, c) {
                    (2, 2) => 9.0,
                    (2, _) => [1.0, 2.0][c],
                    (_, 2) => [4.0, 5.0][r],
                    _ => 0.0,
                };
                assert!((k.get(r, c) - expect * s).abs() < 1e-12, "({r},{c})");
            }
        }
        // impulse: the fused conv reproduces the shifted block everywhere
        let mut x = Tensor::zeros([1, 1, 5, 5]);
        x.set([0, 0, 2, 2], 1.0);
        let expect = acb_forward(block, &x, Mode::Eval).unwrap();
        let got = conv2d(&x, &fused, block.square.geom).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
    }
}
