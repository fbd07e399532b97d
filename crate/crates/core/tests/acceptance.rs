//! End-to-end acceptance checks. Runs as a plain binary so every check prints
//! one PASS / FAIL line even when cargo captures test output.

use std::panic::{self, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use acnet::analysis::{magnitude_matrix, prune_by_location, sparsity_sweep, Distortion, LocationSet};
use acnet::data::{encode_cifar10, gen_synthetic, parse_cifar10, AugmentConfig, Dataset, CIFAR_RECORD};
use acnet::fusion::{fuse_block, fuse_model, verify_equivalence, VerifyOptions};
use acnet::gradcheck::{finite_diff_check, numeric_grad, rel_error};
use acnet::graph::{Graph, NodeId};
use acnet::io::{decode_model, encode_model};
use acnet::train::{accuracy, fit, predictions, staircase, TrainConfig};
use acnet::{
    acb_forward, build_plain, conv2d, embed_kernel, expand_to_acnet, flip_lr, flip_ud, kernel_add, rot180,
    Ablation, BatchNormState, ConvGeometry, Exec, FilterBank, Layer, Mode, Model, ModelSpec,
    Real, Tensor,
};

const TOY: &str = "input 1 16 16
conv 8 3x3 pad=1 block=acb
relu
maxpool 2
conv 16 3x3 pad=1 block=acb
relu
maxpool 2
conv 16 3x3 pad=1 block=acb
relu
gap
linear 4
";

const SEEDS: u64 = 5;
const EPOCHS: usize = 10;

struct Trained {
    acnet: Model<f32>,
    fused: Model<f32>,
    plain: Model<f32>,
}

struct Fixture {
    eval: Dataset,
    runs: Vec<Trained>,
    elapsed: Duration,
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        schedule: staircase(0.05, EPOCHS),
        momentum: 0.9,
        weight_decay: 1e-4,
        batch_size: 64,
        epochs: EPOCHS,
        seed,
        augment: Some(AugmentConfig::standard(16)),
        exec: Exec::default(),
    }
}

/// Five ACNets and five plain baselines trained on the synthetic set with
/// pad-crop and left-right flip augmentation.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let start = Instant::now();
        let train = gen_synthetic(4000, 1001, 16, 4).unwrap();
        let eval = gen_synthetic(1000, 2002, 16, 4).unwrap();
        let spec = ModelSpec::parse(TOY).unwrap();
        let runs = (0..SEEDS)
            .map(|seed| {
                let cfg = train_config(seed);
                let mut acnet = expand_to_acnet::<f32>(&spec, Ablation::default(), seed).unwrap();
                fit(&mut acnet, &train, None, &cfg).unwrap();
                let mut plain = build_plain::<f32>(&spec, seed).unwrap();
                fit(&mut plain, &train, None, &cfg).unwrap();
                let fused = fuse_model(&acnet).unwrap();
                Trained { acnet, fused, plain }
            })
            .collect();
        Fixture {
            eval,
            runs,
            elapsed: start.elapsed(),
        }
    })
}

fn randomize_bn<T: Real>(m: &mut Model<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for bn in m.bn_states_mut() {
        for v in bn.gamma.value.data_mut() {
            *v = T::from_f64_lossy(rng.gen_range(0.3..2.0));
        }
        for v in bn.beta.value.data_mut() {
            *v = T::from_f64_lossy(rng.gen_range(-1.0..1.0));
        }
        for v in bn.running_mean.iter_mut() {
            *v = T::from_f64_lossy(rng.gen_range(-1.0..1.0));
        }
        for v in bn.running_var.iter_mut() {
            *v = T::from_f64_lossy(rng.gen_range(0.2..3.0));
        }
    }
}

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fusion_equivalence() -> Outcome {
    let spec = ModelSpec::parse(TOY).unwrap();
    let opts = |seed| VerifyOptions {
        n_inputs: 200,
        seed,
        tolerance: None,
    };
    let mut models: Vec<(String, Model<f64>)> = (0..20)
        .map(|s| {
            let mut m = expand_to_acnet::<f64>(&spec, Ablation::default(), 100 + s).unwrap();
            randomize_bn(&mut m, 200 + s);
            (format!("random {s}"), m)
        })
        .collect();
    let fx = fixture();
    let start = Instant::now();
    models.extend(fx.runs.iter().enumerate().map(|(i, r)| (format!("trained {i}"), r.acnet.cast())));
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    let mut failures = Vec::new();
    for (i, (name, m64)) in models.iter().enumerate() {
        let m32 = m64.cast::<f32>();
        let r32 = verify_equivalence(&m32, &fuse_model(&m32).unwrap(), &opts(i as u64)).unwrap();
        let r64 = verify_equivalence(m64, &fuse_model(m64).unwrap(), &opts(i as u64)).unwrap();
        worst32 = worst32.max(r32.max_rel);
        worst64 = worst64.max(r64.max_rel);
        if !r32.pass || !r64.pass {
            failures.push(format!("{name}: f32 {:.2e} f64 {:.2e}", r32.max_rel, r64.max_rel));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failures.is_empty() && worst32 <= 1e-4 && worst64 <= 1e-9 && secs <= 120.0,
        format!(
            "{} models (20 random, {} trained) x 200 inputs x 3 scales: worst rel dev f32 {worst32:.2e} (<= 1e-4), f64 {worst64:.2e} (<= 1e-9), {secs:.1}s {failures:?}",
            models.len(),
            fx.runs.len()
        ),
    )
}

/// `2^(exponent(x) - 52)`, the spacing of doubles near `x`.
fn ulp(x: f64) -> f64 {
    if x == 0.0 {
        return f64::MIN_POSITIVE;
    }
    2f64.powi(x.abs().log2().floor() as i32 - 52)
}

fn additivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let cases = 1000;
    let rand_bank = |rng: &mut ChaCha8Rng, h, w| {
        FilterBank::new(Tensor::from_fn([1, 1, h, w], |_| rng.gen_range(-1.0..1.0)), None).unwrap()
    };
    for _ in 0..cases {
        let (h, w) = (rng.gen_range(3..10), rng.gen_range(3..10));
        let s = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = Tensor::from_fn([1, 1, h, w], |_| rng.gen_range(-1.0..1.0));
        let (k1, k2, k3) = (rand_bank(&mut rng, 3, 3), rand_bank(&mut rng, 1, 3), rand_bank(&mut rng, 3, 1));
        let g = |p| ConvGeometry::new(s, p).unwrap();
        let (g1, g2, g3) = (g((1, 1)), g((0, 1)), g((1, 0)));
        let sum = conv2d(&x, &k1, g1)
            .unwrap()
            .add(&conv2d(&x, &k2, g2).unwrap())
            .unwrap()
            .add(&conv2d(&x, &k3, g3).unwrap())
            .unwrap();
        let k = kernel_add(
            &kernel_add(&k1.kernel(0, 0), &embed_kernel(&k2.kernel(0, 0), 3, 3, 1, 0).unwrap()).unwrap(),
            &embed_kernel(&k3.kernel(0, 0), 3, 3, 0, 1).unwrap(),
        )
        .unwrap();
        let fused = FilterBank::new(Tensor::new([1, 1, 3, 3], k.values().to_vec()).unwrap(), None).unwrap();
        let one = conv2d(&x, &fused, g1).unwrap();
        // magnitude of the summed terms at each output
        let abs = |b: &FilterBank<f64>| FilterBank::new(b.weights().map(f64::abs), None).unwrap();
        let xa = x.map(f64::abs);
        let scale = conv2d(&xa, &abs(&k1), g1)
            .unwrap()
            .add(&conv2d(&xa, &abs(&k2), g2).unwrap())
            .unwrap()
            .add(&conv2d(&xa, &abs(&k3), g3).unwrap())
            .unwrap();
        for ((a, b), m) in sum.data().iter().zip(one.data()).zip(scale.data()) {
            worst = worst.max((a - b).abs() / ulp(*m));
        }
    }
    check(worst <= 8.0, format!("{cases} random tuples, strides 1-3: worst {worst:.2} ulps (<= 8)"))
}

fn input_grad_error(dims: [usize; 4], seed: u64, op: impl Fn(&mut Graph<f64>, NodeId) -> NodeId) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0));
    let out_dims = {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = op(&mut g, x);
        g.value(y).dims()
    };
    let probe = Tensor::from_fn(out_dims, |_| rng.gen_range(-1.0..1.0));
    let loss = |g: &mut Graph<f64>, x: Tensor<f64>| {
        let xn = g.input(x);
        let y = op(g, xn);
        (xn, g.weighted_sum(y, probe.clone()).unwrap())
    };
    let mut g = Graph::new();
    let (xn, l) = loss(&mut g, x0.clone());
    let analytic = g.backward(l).unwrap().node(xn).unwrap().clone();
    let numeric = numeric_grad(
        |xs| {
            let mut g = Graph::new();
            let (_, l) = loss(&mut g, Tensor::new(dims, xs.to_vec()).unwrap());
            g.value(l).data()[0]
        },
        x0.data(),
        1e-5,
    );
    analytic.data().iter().zip(&numeric).map(|(&a, &b)| rel_error(a, b)).fold(0.0, f64::max)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rt = |d: [usize; 4]| Tensor::<f64>::from_fn(d, |_| rng.gen_range(-1.0..1.0));
    let (w, b) = (rt([3, 2, 3, 3]), rt([3, 1, 1, 1]));
    let (wl, bl) = (rt([4, 18, 1, 1]), rt([4, 1, 1, 1]));
    let mut bn = BatchNormState::<f64>::new(2, &mut Default::default());
    bn.gamma.value.data_mut().copy_from_slice(&[1.3, -0.7]);
    bn.beta.value.data_mut().copy_from_slice(&[0.2, -0.1]);
    bn.running_mean = vec![0.3, -0.2];
    bn.running_var = vec![0.8, 1.7];
    let geom = ConvGeometry::new((2, 1), (1, 1)).unwrap();
    let mut errs: Vec<(&str, f64)> = vec![
        ("conv2d", input_grad_error([2, 2, 5, 4], 1, |g, x| {
            let (wn, bn_) = (g.input(w.clone()), g.input(b.clone()));
            g.conv2d(x, wn, Some(bn_), geom).unwrap()
        })),
        ("conv2d/w", {
            let x = rt([2, 2, 5, 4]);
            input_grad_error([3, 2, 3, 3], 2, |g, wn| {
                let xn = g.input(x.clone());
                g.conv2d(xn, wn, None, geom).unwrap()
            })
        }),
        ("bn/train", input_grad_error([6, 2, 3, 3], 3, |g, x| g.batch_norm(x, &bn, Mode::Train).unwrap())),
        ("bn/eval", input_grad_error([3, 2, 3, 3], 4, |g, x| g.batch_norm(x, &bn, Mode::Eval).unwrap())),
        ("relu", input_grad_error([2, 3, 4, 4], 5, |g, x| g.relu(x).unwrap())),
        ("add", input_grad_error([2, 2, 3, 3], 6, |g, x| {
            let r = g.relu(x).unwrap();
            g.add(x, r).unwrap()
        })),
        ("shift", input_grad_error([2, 2, 4, 4], 7, |g, x| g.shift(x, -1, 1).unwrap())),
        ("linear", input_grad_error([3, 2, 3, 3], 8, |g, x| {
            let (wn, bn_) = (g.input(wl.clone()), g.input(bl.clone()));
            g.linear(x, wn, bn_).unwrap()
        })),
        ("gap", input_grad_error([2, 3, 4, 5], 9, |g, x| g.global_avg_pool(x).unwrap())),
        ("maxpool", input_grad_error([2, 3, 6, 6], 10, |g, x| g.max_pool(x, 2, 2).unwrap())),
        ("softmax-ce", input_grad_error([5, 4, 1, 1], 11, |g, x| {
            g.softmax_cross_entropy(x, &[0, 3, 2, 1, 1]).unwrap()
        })),
    ];
    let spec = ModelSpec::parse(
        "input 2 6 6\nconv 3 3x3 pad=1 block=acb\nrelu\nmaxpool 2\nconv 4 3x3 pad=1 stride=2 block=acb-shifted\nrelu\ngap\nlinear 3",
    )
    .unwrap();
    let mut model = expand_to_acnet::<f64>(&spec, Ablation::default(), 5).unwrap();
    randomize_bn(&mut model, 6);
    let x = Tensor::from_fn([4, 2, 6, 6], |_| rng.gen_range(-1.0..1.0));
    let labels = [0, 2, 1, 2];
    for (name, mode) in [("acnet/train", Mode::Train), ("acnet/eval", Mode::Eval)] {
        let r = finite_diff_check(
            &model,
            |m, g| {
                let xn = g.input(x.clone());
                let y = m.forward(g, xn, mode)?;
                g.softmax_cross_entropy(y, &labels)
            },
            1e-5,
            12,
            9,
        )
        .unwrap();
        errs.push((name, r.max_rel_error));
    }
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let list: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(worst <= 1e-4 && secs <= 60.0, format!("worst {worst:.2e} (<= 1e-4), {secs:.1}s [{}]", list.join(", ")))
}

fn train_eval_asymmetry() -> Outcome {
    let acnet: Model<f64> = fixture().runs[0].acnet.cast();
    let Layer::Acb(block) = &acnet.layers[0] else {
        return Err("first layer is not an ACB".into());
    };
    let mut block = block.clone();
    let x: Tensor<f64> = fixture().eval.images.gather(&(0..32).collect::<Vec<_>>()).cast();
    // running means 1.5 away from this batch's means, variances equal to it
    for br in [Some(&mut block.square), block.horizontal.as_mut(), block.vertical.as_mut()].into_iter().flatten() {
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let xs = g.shift(xn, br.shift.0, br.shift.1).unwrap();
        let w = g.param(&br.weight);
        let y = g.conv2d(xs, w, None, br.geom).unwrap();
        let stats = acnet::bn::batch_stats(g.value(y));
        let bn = br.bn.as_mut().unwrap();
        bn.running_mean = stats.mean.iter().map(|m| m + 1.5).collect();
        bn.running_var = stats.var.clone();
    }
    let fused = fuse_block(&block).unwrap();
    let conv = conv2d(&x, &fused, block.square.geom).unwrap();
    let train_gap = acb_forward(&block, &x, Mode::Train).unwrap().max_abs_diff(&conv).unwrap();
    let eval_gap = acb_forward(&block, &x, Mode::Eval).unwrap().max_abs_diff(&conv).unwrap();
    let eval_rel = eval_gap / conv.max_abs();
    check(
        train_gap > 1e-2 && eval_rel < 1e-9,
        format!("running mean offset 1.5: train-mode vs fused max diff {train_gap:.3} (> 1e-2); eval-mode vs fused rel {eval_rel:.1e}"),
    )
}

fn accuracy_direction() -> Outcome {
    let fx = fixture();
    let mut acb_accs = Vec::new();
    let mut plain_accs = Vec::new();
    let mut mismatched = 0;
    for r in &fx.runs {
        acb_accs.push(accuracy(&r.acnet, &fx.eval).unwrap());
        plain_accs.push(accuracy(&r.plain, &fx.eval).unwrap());
        let a = predictions(&r.acnet, &fx.eval).unwrap();
        let b = predictions(&r.fused, &fx.eval).unwrap();
        mismatched += a.iter().zip(&b).filter(|(x, y)| x != y).count();
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mp) = (mean(&acb_accs), mean(&plain_accs));
    let secs = fx.elapsed.as_secs_f64();
    let direction = ma >= mp - 0.005;
    let detail = format!(
        "acnet mean {:.2}% vs plain {:.2}% over {} seeds, {EPOCHS} epochs (direction {}); fused/unfused prediction mismatches {mismatched}; training {secs:.0}s",
        100.0 * ma,
        100.0 * mp,
        fx.runs.len(),
        if direction { "holds" } else { "NOT met, reported only" }
    );
    check(mismatched == 0 && secs <= 900.0, detail)
}

fn skeleton_dominance() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for r in &fixture().runs {
        let a = magnitude_matrix(&r.fused).unwrap();
        let (s, c) = (a.skeleton_mean(), a.corner_mean());
        wins += usize::from(s > c);
        rows.push(format!("{s:.3}/{c:.3}"));
    }
    check(wins >= 4, format!("skeleton > corner mean magnitude in {wins}/5 seeds (skeleton/corner: {})", rows.join(" ")))
}

fn pruning_order() -> Outcome {
    let fx = fixture();
    let fused = &fx.runs[0].fused;
    let grid = [0.1, 0.2, 0.3, 0.4];
    let seeds: Vec<u64> = (0..5).collect();
    let rows = sparsity_sweep(fused, &[LocationSet::Corner, LocationSet::Skeleton], &grid, &seeds, &fx.eval, Exec::default()).unwrap();
    let mut ok = true;
    let mut pts = Vec::new();
    for (i, s) in grid.iter().enumerate() {
        let (c, k) = (rows[i].mean_acc, rows[grid.len() + i].mean_acc);
        ok &= c >= k;
        pts.push(format!("{:.0}%: corner {:.3} skeleton {:.3}", s * 100.0, c, k));
    }
    let saturated = prune_by_location(fused, LocationSet::Corner, 4.0 / 9.0, 0).unwrap();
    let all_zero = saturated.layers.iter().all(|l| match l {
        Layer::Conv(c) if c.kernel() == (3, 3) => c
            .weight
            .value
            .data()
            .chunks(9)
            .all(|k| [0, 2, 6, 8].iter().all(|&p| k[p] == 0.0)),
        _ => true,
    });
    check(ok && all_zero, format!("{}; 44% corner pruning zeroes every corner: {all_zero}", pts.join(", ")))
}

fn distortion_identities() -> Outcome {
    let fx = fixture();
    let imgs = &fx.eval.images;
    let exact_rot = rot180(imgs) == flip_ud(&flip_lr(imgs));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = imgs.gather(&(0..64).collect::<Vec<_>>());
    let h = FilterBank::new(Tensor::from_fn([3, 1, 1, 3], |_| rng.gen_range(-1.0f32..1.0)), None).unwrap();
    let v = FilterBank::new(Tensor::from_fn([3, 1, 3, 1], |_| rng.gen_range(-1.0f32..1.0)), None).unwrap();
    let gh = ConvGeometry::new((1, 1), (0, 1)).unwrap();
    let gv = ConvGeometry::new((1, 1), (1, 0)).unwrap();
    let commute_h = flip_ud(&conv2d(&x, &h, gh).unwrap()) == conv2d(&flip_ud(&x), &h, gh).unwrap();
    let commute_v = flip_lr(&conv2d(&x, &v, gv).unwrap()) == conv2d(&flip_lr(&x), &v, gv).unwrap();
    let mut gaps = Vec::new();
    for r in &fx.runs {
        let acc = |d: Distortion| accuracy(&r.fused, &fx.eval.map_images(|t| d.apply(t)).unwrap()).unwrap();
        gaps.push((acc(Distortion::Rot180), acc(Distortion::FlipUd)));
    }
    let mean_gap = gaps.iter().map(|(a, b)| (a - b).abs()).sum::<f64>() / gaps.len() as f64;
    let per: Vec<String> = gaps.iter().map(|(a, b)| format!("{:.1}/{:.1}", 100.0 * a, 100.0 * b)).collect();
    check(
        exact_rot && commute_h && commute_v && mean_gap <= 0.01,
        format!(
            "rot180 == flip_ud . flip_lr: {exact_rot}; 1x3 flip_ud commutes: {commute_h}; 3x1 flip_lr commutes: {commute_v}; rot180/flip_ud accuracy % per seed {} (mean gap {:.2} points, <= 1)",
            per.join(" "),
            100.0 * mean_gap
        ),
    )
}

fn serialization_and_determinism() -> Outcome {
    let fx = fixture();
    let r = &fx.runs[0];
    let round = decode_model::<f32>(&encode_model(&r.acnet)).unwrap() == r.acnet
        && decode_model::<f32>(&encode_model(&r.fused)).unwrap() == r.fused
        && {
            let m64: Model<f64> = r.acnet.cast();
            decode_model::<f64>(&encode_model(&m64)).unwrap() == m64
        };
    let train = gen_synthetic(400, 11, 16, 4).unwrap();
    let spec = ModelSpec::parse(TOY).unwrap();
    let run = || {
        let mut m = expand_to_acnet::<f32>(&spec, Ablation::default(), 77).unwrap();
        let logs = fit(&mut m, &train, Some(&train), &TrainConfig { epochs: 2, schedule: vec![(0, 0.05)], ..train_config(3) }).unwrap();
        (m, logs)
    };
    let (a, la) = run();
    let (b, lb) = run();
    let bits = |m: &Model<f32>| -> Vec<u32> { m.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect() };
    let same_train = bits(&a) == bits(&b) && la == lb && a == b;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ds = Dataset::new(
        Tensor::from_fn([10, 3, 32, 32], |_| rng.gen_range(0..=255u8) as f32 / 255.0),
        (0..10).collect(),
        10,
    )
    .unwrap();
    let bytes = encode_cifar10(&ds).unwrap();
    let parsed = parse_cifar10(&bytes).unwrap();
    let cifar_ok = bytes.len() == 10 * CIFAR_RECORD && parsed == ds;
    let truncated_rejected = parse_cifar10(&bytes[..bytes.len() - 1]).is_err();
    check(
        round && same_train && cifar_ok && truncated_rejected,
        format!(
            "model round trip bit-exact: {round}; repeated seeded training identical: {same_train}; 10-record CIFAR file parsed: {cifar_ok}; truncated file rejected: {truncated_rejected}"
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags; a name filter selects checks.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [Check; 9] = [
        ("fusion equivalence", fusion_equivalence),
        ("additivity", additivity),
        ("gradient correctness", gradient_correctness),
        ("train/eval non-equivalence", train_eval_asymmetry),
        ("accuracy direction", accuracy_direction),
        ("skeleton dominance", skeleton_dominance),
        ("pruning-sweep ordering", pruning_order),
        ("distortion identities", distortion_identities),
        ("serialization and determinism", serialization_and_determinism),
    ];
    let mut failed = 0;
    let start = Instant::now();
    for (i, (name, f)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("[{}] PASS {name} ({secs:.1}s): {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("[{}] FAIL {name} ({secs:.1}s): {d}", i + 1);
            }
        }
    }
    println!("acceptance: {failed} failed, total {:.0}s", start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
