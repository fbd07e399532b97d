//! Dense NCHW tensors and the convolution / geometric primitives built on them.

use crate::exec::{for_each_chunk, Exec};
use crate::{Error, Real, Result};

/// Dense row-major 4-axis array with dims `(n, c, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([a, b, y, x]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.dims;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Values of sample `n`, channel `c` as an `h*w` slice.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Values of sample `n` as a `c*h*w` slice.
    pub fn sample(&self, n: usize) -> &[T] {
        let chw = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[n * chw..(n + 1) * chw]
    }

    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// Samples `indices` stacked in order along the batch axis.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let chw = self.dims[1] * self.dims[2] * self.dims[3];
        let mut data = Vec::with_capacity(indices.len() * chw);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            dims: [indices.len(), self.dims[1], self.dims[2], self.dims[3]],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_dims(other, "zip_map")?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_dims(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub(crate) fn expect_same_dims(&self, other: &Self, op: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// A single `h x w` kernel slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D<T> {
    h: usize,
    w: usize,
    values: Vec<T>,
}

impl<T: Real> Kernel2D<T> {
    pub fn new(h: usize, w: usize, values: Vec<T>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("kernel extents must be >= 1, got {h}x{w}")));
        }
        if values.len() != h * w {
            return Err(Error::Shape(format!(
                "{h}x{w} kernel needs {} values, got {}",
                h * w,
                values.len()
            )));
        }
        Ok(Self { h, w, values })
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Self::new(h, w, vec![T::zero(); h * w])
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.w + col]
    }
}

/// Places `small` inside a zero `target_h x target_w` kernel with its top-left
/// corner at `(row_off, col_off)`.
pub fn embed_kernel<T: Real>(
    small: &Kernel2D<T>,
    target_h: usize,
    target_w: usize,
    row_off: usize,
    col_off: usize,
) -> Result<Kernel2D<T>> {
    if row_off + small.h > target_h || col_off + small.w > target_w {
        return Err(Error::InvalidOffset {
            small_h: small.h,
            small_w: small.w,
            row: row_off,
            col: col_off,
            target_h,
            target_w,
        });
    }
    let mut out = Kernel2D::zeros(target_h, target_w)?;
    for r in 0..small.h {
        for c in 0..small.w {
            out.values[(r + row_off) * target_w + c + col_off] = small.get(r, c);
        }
    }
    Ok(out)
}

/// Element-wise sum of two equally sized kernels.
pub fn kernel_add<T: Real>(a: &Kernel2D<T>, b: &Kernel2D<T>) -> Result<Kernel2D<T>> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::Shape(format!(
            "kernel_add: {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    let values = a.values.iter().zip(&b.values).map(|(&x, &y)| x + y).collect();
    Kernel2D::new(a.h, a.w, values)
}

/// Convolution weights `(d, c, h, w)` with an optional per-filter bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T> {
    weights: Tensor<T>,
    bias: Option<Vec<T>>,
}

impl<T: Real> FilterBank<T> {
    pub fn new(weights: Tensor<T>, bias: Option<Vec<T>>) -> Result<Self> {
        let d = weights.dims()[0];
        if let Some(b) = &bias {
            if b.len() != d {
                return Err(Error::Shape(format!(
                    "bias has {} entries for {d} filters",
                    b.len()
                )));
            }
        }
        if weights.dims()[2] == 0 || weights.dims()[3] == 0 {
            return Err(Error::Shape("kernel extents must be >= 1".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(d: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            weights: Tensor::zeros([d, c, h, w]),
            bias: None,
        }
    }

    pub fn d(&self) -> usize {
        self.weights.dims()[0]
    }
    pub fn c(&self) -> usize {
        self.weights.dims()[1]
    }
    pub fn kh(&self) -> usize {
        self.weights.dims()[2]
    }
    pub fn kw(&self) -> usize {
        self.weights.dims()[3]
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn set_bias(&mut self, bias: Option<Vec<T>>) -> Result<()> {
        if let Some(b) = &bias {
            if b.len() != self.d() {
                return Err(Error::Shape(format!(
                    "bias has {} entries for {} filters",
                    b.len(),
                    self.d()
                )));
            }
        }
        self.bias = bias;
        Ok(())
    }

    pub fn into_parts(self) -> (Tensor<T>, Option<Vec<T>>) {
        (self.weights, self.bias)
    }

    /// The 2D slice of filter `f` acting on input channel `c`.
    pub fn kernel(&self, f: usize, c: usize) -> Kernel2D<T> {
        let (h, w) = (self.kh(), self.kw());
        let start = self.weights.offset([f, c, 0, 0]);
        Kernel2D {
            h,
            w,
            values: self.weights.data()[start..start + h * w].to_vec(),
        }
    }

    pub fn set_kernel(&mut self, f: usize, c: usize, k: &Kernel2D<T>) -> Result<()> {
        if k.h != self.kh() || k.w != self.kw() {
            return Err(Error::Shape(format!(
                "set_kernel: {}x{} into {}x{} bank",
                k.h,
                k.w,
                self.kh(),
                self.kw()
            )));
        }
        let start = self.weights.offset([f, c, 0, 0]);
        self.weights.data_mut()[start..start + k.values.len()].copy_from_slice(&k.values);
        Ok(())
    }
}

/// Stride and symmetric zero padding of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Invalid(format!("stride must be positive, got {stride:?}")));
        }
        Ok(Self { stride, padding })
    }

    /// Output `(rows, cols)` for an `in_h x in_w` input and `kh x kw` kernel.
    pub fn output_extent(
        &self,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
    ) -> Result<(usize, usize)> {
        let r = extent("height", in_h, kh, self.stride.0, self.padding.0)?;
        let t = extent("width", in_w, kw, self.stride.1, self.padding.1)?;
        Ok((r, t))
    }
}

fn extent(dim: &'static str, input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return Err(Error::DegenerateOutput {
            dim,
            input,
            kernel,
            stride,
            padding,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output columns `j` whose tap `kj` lands inside `0..in_w`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    // col = stride*j + tap - pad must satisfy 0 <= col < in_len
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let hi_num = in_len + pad;
    let hi = if hi_num > tap {
        ((hi_num - tap - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Cross-correlation of `input` with `filters`; see [`conv2d_with`].
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    filters: &FilterBank<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    conv2d_with(Exec::default(), input, filters, geom)
}

/// Direct 2D cross-correlation (no kernel flip) with zero padding.
///
/// Each output value accumulates its terms channel-major, then kernel row,
/// then kernel column, and adds the bias last. Work is split per
/// `(sample, filter)` output plane, so the result does not depend on `exec`.
pub fn conv2d_with<T: Real>(
    exec: Exec,
    input: &Tensor<T>,
    filters: &FilterBank<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let [n, c, u, v] = input.dims();
    if c != filters.c() {
        return Err(Error::ChannelMismatch {
            op: "conv2d",
            expected: filters.c(),
            got: c,
        });
    }
    let (d, kh, kw) = (filters.d(), filters.kh(), filters.kw());
    let (r, t) = geom.output_extent(u, v, kh, kw)?;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let x = input.data();
    let wts = filters.weights().data();
    let bias = filters.bias();
    let mut out = vec![T::zero(); n * d * r * t];
    for_each_chunk(exec, &mut out, r * t, |idx, plane| {
        let (b, f) = (idx / d, idx % d);
        for ci in 0..c {
            let xin = &x[(b * c + ci) * u * v..(b * c + ci + 1) * u * v];
            let wk = &wts[(f * c + ci) * kh * kw..(f * c + ci + 1) * kh * kw];
            for ki in 0..kh {
                let (i_lo, i_hi) = valid_range(r, u, sh, ki, ph);
                for kj in 0..kw {
                    let wv = wk[ki * kw + kj];
                    let (j_lo, j_hi) = valid_range(t, v, sw, kj, pw);
                    if j_lo >= j_hi {
                        continue;
                    }
                    for i in i_lo..i_hi {
                        let row = sh * i + ki - ph;
                        let in_row = &xin[row * v..(row + 1) * v];
                        let o_row = &mut plane[i * t + j_lo..i * t + j_hi];
                        let c0 = sw * j_lo + kj - pw;
                        if sw == 1 {
                            for (o, &s) in o_row.iter_mut().zip(&in_row[c0..c0 + (j_hi - j_lo)]) {
                                *o += wv * s;
                            }
                        } else {
                            for (o, &s) in o_row.iter_mut().zip(in_row[c0..].iter().step_by(sw)) {
                                *o += wv * s;
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            for o in plane.iter_mut() {
                *o += bias[f];
            }
        }
    });
    Tensor::new([n, d, r, t], out)
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv2d_backward_input<T: Real>(
    exec: Exec,
    grad_out: &Tensor<T>,
    weights: &Tensor<T>,
    geom: ConvGeometry,
    input_dims: [usize; 4],
) -> Tensor<T> {
    let [n, c, u, v] = input_dims;
    let [d, _, kh, kw] = weights.dims();
    let [_, _, r, t] = grad_out.dims();
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let dy = grad_out.data();
    let wts = weights.data();
    let mut dx = vec![T::zero(); n * c * u * v];
    for_each_chunk(exec, &mut dx, c * u * v, |b, sample| {
        for f in 0..d {
            let gy = &dy[(b * d + f) * r * t..(b * d + f + 1) * r * t];
            for ci in 0..c {
                let gx = &mut sample[ci * u * v..(ci + 1) * u * v];
                let wk = &wts[(f * c + ci) * kh * kw..(f * c + ci + 1) * kh * kw];
                for ki in 0..kh {
                    let (i_lo, i_hi) = valid_range(r, u, sh, ki, ph);
                    for kj in 0..kw {
                        let wv = wk[ki * kw + kj];
                        let (j_lo, j_hi) = valid_range(t, v, sw, kj, pw);
                        if j_lo >= j_hi {
                            continue;
                        }
                        for i in i_lo..i_hi {
                            let row = sh * i + ki - ph;
                            let src = &gy[i * t + j_lo..i * t + j_hi];
                            let c0 = sw * j_lo + kj - pw;
                            let dst = &mut gx[row * v..(row + 1) * v];
                            if sw == 1 {
                                for (o, &g) in dst[c0..c0 + src.len()].iter_mut().zip(src) {
                                    *o += wv * g;
                                }
                            } else {
                                for (k, &g) in src.iter().enumerate() {
                                    dst[c0 + k * sw] += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor { dims: input_dims, data: dx }
}

/// Gradient of a convolution with respect to its weights.
pub(crate) fn conv2d_backward_weights<T: Real>(
    exec: Exec,
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    geom: ConvGeometry,
    weight_dims: [usize; 4],
) -> Tensor<T> {
    let [n, c, u, v] = input.dims();
    let [d, _, kh, kw] = weight_dims;
    let [_, _, r, t] = grad_out.dims();
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let dy = grad_out.data();
    let x = input.data();
    let mut dw = vec![T::zero(); d * c * kh * kw];
    for_each_chunk(exec, &mut dw, c * kh * kw, |f, filt| {
        for ci in 0..c {
            for ki in 0..kh {
                let (i_lo, i_hi) = valid_range(r, u, sh, ki, ph);
                for kj in 0..kw {
                    let (j_lo, j_hi) = valid_range(t, v, sw, kj, pw);
                    if j_lo >= j_hi {
                        continue;
                    }
                    let c0 = sw * j_lo + kj - pw;
                    let mut acc = T::zero();
                    for b in 0..n {
                        let gy = &dy[(b * d + f) * r * t..(b * d + f + 1) * r * t];
                        let xin = &x[(b * c + ci) * u * v..(b * c + ci + 1) * u * v];
                        for i in i_lo..i_hi {
                            let row = sh * i + ki - ph;
                            let g = &gy[i * t + j_lo..i * t + j_hi];
                            let in_row = &xin[row * v..(row + 1) * v];
                            if sw == 1 {
                                for (&a, &s) in g.iter().zip(&in_row[c0..c0 + g.len()]) {
                                    acc += a * s;
                                }
                            } else {
                                for (&a, &s) in g.iter().zip(in_row[c0..].iter().step_by(sw)) {
                                    acc += a * s;
                                }
                            }
                        }
                    }
                    filt[(ci * kh + ki) * kw + kj] = acc;
                }
            }
        }
    });
    Tensor { dims: weight_dims, data: dw }
}

fn spatial_map<T: Real>(
    input: &Tensor<T>,
    out_hw: (usize, usize),
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Tensor<T> {
    let [n, c, _, _] = input.dims();
    let (oh, ow) = out_hw;
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = src(y, x);
                    data.push(input.get([b, ch, sy, sx]));
                }
            }
        }
    }
    Tensor {
        dims: [n, c, oh, ow],
        data,
    }
}

/// Counterclockwise quarter turn of the spatial axes.
pub fn rot90<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = input.dims();
    spatial_map(input, (w, h), |y, x| (x, w - 1 - y))
}

pub fn rot180<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = input.dims();
    spatial_map(input, (h, w), |y, x| (h - 1 - y, w - 1 - x))
}

/// Up-down flip (reverses rows).
pub fn flip_ud<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = input.dims();
    spatial_map(input, (h, w), |y, x| (h - 1 - y, x))
}

/// Left-right flip (reverses columns).
pub fn flip_lr<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = input.dims();
    spatial_map(input, (h, w), |y, x| (y, w - 1 - x))
}

/// `out[y][x] = input[y + dy][x + dx]`, zero where the source falls outside.
pub fn shift<T: Real>(input: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    let [_, _, h, w] = input.dims();
    let mut out = Tensor::zeros(input.dims());
    if dy.unsigned_abs() >= h || dx.unsigned_abs() >= w {
        return out;
    }
    let [n, c, _, _] = input.dims();
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx).min(w as isize) as usize;
    for p in 0..n * c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let sy = sy as usize;
            let src_start = p * h * w + sy * w;
            let dst_start = p * h * w + y * w;
            for x in x_lo..x_hi {
                out.data[dst_start + x] = input.data[src_start + (x as isize + dx) as usize];
            }
        }
    }
    out
}
