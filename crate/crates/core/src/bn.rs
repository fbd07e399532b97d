//! Per-channel batch normalization with a learned affine transform.

use crate::param::{IdGen, Param};
use crate::{Error, Real, Result, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm parameters and running statistics.
///
/// At inference the channel output is `(x - running_mean) * gamma / sigma + beta`
/// with `sigma = sqrt(running_var + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Per-channel statistics of one training batch (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchNormState<T> {
    /// `gamma = 1`, `beta = 0`, running statistics `(0, 1)`.
    pub fn new(channels: usize, ids: &mut IdGen) -> Self {
        Self {
            gamma: Param::new(ids.next_id(), Tensor::full([channels, 1, 1, 1], T::one())),
            beta: Param::new(ids.next_id(), Tensor::zeros([channels, 1, 1, 1])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn gamma(&self) -> &[T] {
        self.gamma.value.data()
    }

    pub fn beta(&self) -> &[T] {
        self.beta.value.data()
    }

    /// `sqrt(running_var + eps)` per channel.
    pub fn sigma(&self) -> Result<Vec<T>> {
        let eps = T::from_f64_lossy(self.eps);
        self.running_var
            .iter()
            .enumerate()
            .map(|(ch, &v)| {
                let s = v + eps;
                if s > T::zero() && s.is_finite() {
                    Ok(s.sqrt())
                } else {
                    Err(Error::DegenerateStats {
                        channel: ch,
                        value: s.as_f64(),
                    })
                }
            })
            .collect()
    }

    /// Blends running statistics towards `stats` by `momentum`.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64_lossy(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn cast<U: Real>(&self) -> BatchNormState<U> {
        BatchNormState {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: cast_vec(&self.running_mean),
            running_var: cast_vec(&self.running_var),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

pub(crate) fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect()
}

/// Mean and biased variance of each channel over `(n, h, w)`.
pub fn batch_stats<T: Real>(x: &Tensor<T>) -> BatchStats<T> {
    let [n, c, h, w] = x.dims();
    let count = T::from_usize(n * h * w).unwrap_or_else(T::one);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x.plane(b, ch).iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut q = T::zero();
        for b in 0..n {
            for &v in x.plane(b, ch) {
                q += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    BatchStats { mean, var }
}

/// Normalized values `xhat` and the inverse deviation used, for the given statistics.
pub(crate) fn normalize<T: Real>(
    x: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
) -> (Tensor<T>, Vec<T>) {
    let [n, c, h, w] = x.dims();
    let eps = T::from_f64_lossy(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = x.clone();
    let hw = h * w;
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * hw;
            for v in &mut out.data_mut()[start..start + hw] {
                *v = (*v - mean[ch]) * inv_std[ch];
            }
        }
    }
    (out, inv_std)
}

pub(crate) fn affine<T: Real>(xhat: &Tensor<T>, gamma: &[T], beta: &[T]) -> Tensor<T> {
    let [n, c, h, w] = xhat.dims();
    let mut out = xhat.clone();
    let hw = h * w;
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * hw;
            for v in &mut out.data_mut()[start..start + hw] {
                *v = *v * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

/// Applies batch norm; in train mode normalizes with the batch statistics
/// and blends them into the running statistics.
pub fn bn_forward<T: Real>(x: &Tensor<T>, bn: &mut BatchNormState<T>, mode: Mode) -> Result<Tensor<T>> {
    if x.dims()[1] != bn.channels() {
        return Err(Error::ChannelMismatch {
            op: "batch_norm",
            expected: bn.channels(),
            got: x.dims()[1],
        });
    }
    let xhat = match mode {
        Mode::Train => {
            let stats = batch_stats(x);
            let (xhat, _) = normalize(x, &stats.mean, &stats.var, bn.eps);
            bn.update_running(&stats);
            xhat
        }
        Mode::Eval => {
            bn.sigma()?;
            normalize(x, &bn.running_mean, &bn.running_var, bn.eps).0
        }
    };
    Ok(affine(&xhat, bn.gamma(), bn.beta()))
}
