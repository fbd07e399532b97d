//! Momentum SGD with a staircase learning-rate schedule.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, AugmentConfig, Dataset};
use crate::graph::Graph;
use crate::param::{Param, ParamId};
use crate::{Error, Exec, Mode, Model, Real, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `(first epoch, rate)` steps, sorted, starting at epoch 0.
    pub schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: staircase(0.1, 30),
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            augment: None,
            exec: Exec::default(),
        }
    }
}

/// `base`, then a tenth of it at half of `epochs`, a hundredth at three
/// quarters and a thousandth at seven eighths. Steps that would start on the
/// same epoch as an earlier one are dropped.
pub fn staircase(base: f64, epochs: usize) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (num, den, div) in [(0, 1, 1.0), (1, 2, 10.0), (3, 4, 100.0), (7, 8, 1000.0)] {
        let at = epochs * num / den;
        if out.last().is_none_or(|last| last.0 < at) {
            out.push((at, base / div));
        }
    }
    out
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.schedule.first().map(|s| s.0) != Some(0) {
            return bad("learning-rate schedule must start at epoch 0".into());
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("learning-rate schedule epochs must increase".into());
        }
        if let Some(&(_, lr)) = self.schedule.iter().find(|s| !(s.1 > 0.0 && s.1.is_finite())) {
            return bad(format!("learning rate {lr} is not positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} is negative", self.weight_decay));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .take_while(|s| s.0 <= epoch)
            .last()
            .map_or(self.schedule[0].1, |s| s.1)
    }
}

/// Velocity buffers keyed by parameter id.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    velocity: HashMap<ParamId, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new() -> Self {
        Self {
            velocity: HashMap::new(),
        }
    }

    /// `v = momentum * v + g; theta -= lr * (v + decay * theta)`, then clears
    /// the gradients.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param<T>>, lr: f64, momentum: f64, decay: f64) {
        let (lr, m, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(decay));
        for p in params {
            let v = self.velocity.entry(p.id).or_insert_with(|| vec![T::zero(); p.len()]);
            for ((theta, &g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.iter_mut()) {
                *vel = m * *vel + g;
                *theta -= lr * (*vel + wd * *theta);
            }
            p.zero_grad();
        }
    }
}

/// One optimizer step on every model parameter at the rate for `epoch`.
pub fn sgd_step<T: Real>(model: &mut Model<T>, sgd: &mut Sgd<T>, config: &TrainConfig, epoch: usize) {
    sgd.step(model.params_mut(), config.lr_at(epoch), config.momentum, config.weight_decay);
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
}

pub const LOG_CSV_HEADER: &str = "epoch,lr,train_loss,eval_acc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let acc = self.eval_acc.map_or(String::new(), |a| format!("{a:.6}"));
        format!("{},{},{:.6},{}", self.epoch, self.lr, self.train_loss, acc)
    }
}

pub fn log_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from(LOG_CSV_HEADER);
    s.push('\n');
    for l in logs {
        s += &l.csv_row();
        s.push('\n');
    }
    s
}

/// Mean cross-entropy of one training step; updates the model in place.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    sgd: &mut Sgd<T>,
    config: &TrainConfig,
    epoch: usize,
    x: Tensor<T>,
    labels: &[usize],
) -> Result<f64> {
    let mut g = Graph::with_exec(config.exec);
    let xn = g.input(x);
    let logits = model.forward(&mut g, xn, Mode::Train)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Invalid(format!("training diverged at epoch {epoch} (loss {value})")));
    }
    let grads = g.backward(loss)?;
    model.accumulate_grads(&grads);
    model.commit_bn_stats(&g);
    sgd_step(model, sgd, config, epoch);
    Ok(value)
}

/// Trains `model` on `train`, evaluating on `eval` after every epoch.
pub fn fit<T: Real>(model: &mut Model<T>, train: &Dataset, eval: Option<&Dataset>, config: &TrainConfig) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut x: Tensor<T> = train.images.gather(batch).cast();
            if let Some(aug) = &config.augment {
                x = augment(&x, aug, &mut rng)?;
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            total += train_step(model, &mut sgd, config, epoch, x, &labels)? * batch.len() as f64;
        }
        logs.push(EpochLog {
            epoch,
            lr: config.lr_at(epoch),
            train_loss: total / train.len() as f64,
            eval_acc: eval.map(|e| accuracy(model, e)).transpose()?,
        });
    }
    Ok(logs)
}

/// Predicted class of every image.
pub fn predictions<T: Real>(model: &Model<T>, ds: &Dataset) -> Result<Vec<usize>> {
    model.classify(&ds.images.cast())
}

/// Fraction of correctly classified images.
pub fn accuracy<T: Real>(model: &Model<T>, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions(model, ds)?.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::model::{expand_to_acnet, Ablation};
    use crate::param::IdGen;
    use crate::spec::ModelSpec;

    fn param(values: &[f64]) -> Param<f64> {
        Param::new(IdGen::default().next_id(), Tensor::new([values.len(), 1, 1, 1], values.to_vec()).unwrap())
    }

    #[test]
    fn plain_step_moves_by_lr_times_grad() {
        let mut p = param(&[1.0, -2.0]);
        p.grad.data_mut().copy_from_slice(&[0.5, 3.0]);
        Sgd::new().step([&mut p], 0.1, 0.0, 0.0);
        assert_eq!(p.value.data(), &[1.0 - 0.05, -2.0 - 0.30000000000000004]);
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn decay_alone_shrinks_geometrically() {
        let mut p = param(&[2.0]);
        let mut sgd = Sgd::new();
        for k in 1..=5 {
            sgd.step([&mut p], 0.1, 0.0, 0.5);
            assert!((p.value.data()[0] - 2.0 * 0.95f64.powi(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = param(&[0.0]);
        let mut sgd = Sgd::new();
        for _ in 0..2 {
            p.grad.data_mut()[0] = 1.0;
            sgd.step([&mut p], 1.0, 0.5, 0.0);
        }
        // v1 = 1, v2 = 1.5
        assert_eq!(p.value.data()[0], -2.5);
    }

    #[test]
    fn quadratic_bowl_loss_decreases() {
        // f(x) = sum a_i x_i^2 / 2 has curvature a_i; lr below 2 / max(a)
        let a = [0.5, 2.0, 4.0];
        let mut p = param(&[1.0, -1.0, 0.5]);
        let loss = |x: &[f64]| x.iter().zip(&a).map(|(x, a)| 0.5 * a * x * x).sum::<f64>();
        let mut sgd = Sgd::new();
        let mut prev = loss(p.value.data());
        for _ in 0..100 {
            let g: Vec<f64> = p.value.data().iter().zip(&a).map(|(x, a)| a * x).collect();
            p.grad.data_mut().copy_from_slice(&g);
            sgd.step([&mut p], 0.2, 0.0, 0.0);
            let cur = loss(p.value.data());
            assert!(cur < prev);
            prev = cur;
        }
        // closed form: x_i (1 - lr a_i)^100
        let x0 = [1.0, -1.0, 0.5];
        for i in 0..3 {
            let expect = x0[i] * (1.0 - 0.2 * a[i]).powi(100);
            assert!((p.value.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_lookup_and_validation() {
        let cfg = TrainConfig {
            schedule: staircase(0.1, 8),
            epochs: 8,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.schedule, vec![(0, 0.1), (4, 0.01), (6, 0.001), (7, 0.0001)]);
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(5), 0.01);
        assert_eq!(cfg.lr_at(100), 0.0001);
        assert!(cfg.validate().is_ok());
        assert_eq!(staircase(0.5, 1), vec![(0, 0.5)]);
        for bad in [
            TrainConfig { epochs: 0, ..cfg.clone() },
            TrainConfig { schedule: vec![(1, 0.1)], ..cfg.clone() },
            TrainConfig { schedule: vec![(0, -0.1)], ..cfg.clone() },
            TrainConfig { momentum: 1.0, ..cfg.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn tiny() -> (Model<f64>, Dataset, TrainConfig) {
        let spec = ModelSpec::parse("input 1 8 8\nconv 4 3x3 pad=1 block=acb\nrelu\nmaxpool 2\ngap\nlinear 2").unwrap();
        let m = expand_to_acnet(&spec, Ablation::default(), 3).unwrap();
        let ds = gen_synthetic(48, 4, 8, 2).unwrap();
        let cfg = TrainConfig {
            schedule: vec![(0, 0.05)],
            epochs: 2,
            batch_size: 16,
            seed: 9,
            augment: Some(AugmentConfig::standard(8)),
            ..TrainConfig::default()
        };
        (m, ds, cfg)
    }

    #[test]
    fn seeded_training_is_bit_identical() {
        let (m0, ds, cfg) = tiny();
        let run = |exec| {
            let mut m = m0.clone();
            let logs = fit(&mut m, &ds, Some(&ds), &TrainConfig { exec, ..cfg.clone() }).unwrap();
            (m, logs)
        };
        let (a, la) = run(Exec::Sequential);
        let (b, lb) = run(Exec::Sequential);
        let (c, _) = run(Exec::Parallel);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(a, c);
        assert_ne!(a, m0);
        assert_eq!(la.len(), 2);
        // running statistics moved away from their initial values
        let mut a = a;
        assert!(a.bn_states_mut()[0].running_var.iter().any(|&v| v != 1.0));
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let logs = vec![EpochLog {
            epoch: 0,
            lr: 0.1,
            train_loss: 1.25,
            eval_acc: Some(0.5),
        }];
        assert_eq!(log_csv(&logs), "epoch,lr,train_loss,eval_acc\n0,0.1,1.250000,0.500000\n");
    }
}
