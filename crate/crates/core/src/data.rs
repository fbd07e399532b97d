//! Datasets: the CIFAR-10 binary format, a seeded synthetic stand-in, a small
//! dataset file format, and pad / crop / flip augmentation.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::io::checksum;
use crate::{Error, Real, Result, Tensor};

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_CLASSES: usize = 10;

/// Images with values in `[0, 1]` (before optional normalization) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.dims()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.dims()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Invalid(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(c, h, w)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let [_, c, h, w] = self.images.dims();
        (c, h, w)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Same labels, images passed through `f`.
    pub fn map_images(&self, f: impl Fn(&Tensor<f32>) -> Tensor<f32>) -> Result<Self> {
        Self::new(f(&self.images), self.labels.clone(), self.class_count)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }
}

/// Parses concatenated CIFAR-10 records: one label byte, then 1024 red,
/// 1024 green and 1024 blue bytes, each plane row-major 32x32.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 data is {} bytes, not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {i} has label byte {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new([n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?, labels, CIFAR_CLASSES)
}

/// Inverse of [`parse_cifar10`] for 3x32x32 datasets with at most 10 classes.
/// Pixels are rounded to the nearest `k / 255`.
pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.image_dims() != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::Shape(format!("CIFAR-10 images are 3x32x32, got {:?}", ds.image_dims())));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (s, &label) in ds.labels.iter().enumerate() {
        if label >= CIFAR_CLASSES {
            return Err(Error::Invalid(format!("label {label} does not fit CIFAR-10")));
        }
        out.push(label as u8);
        out.extend(ds.images.sample(s).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

/// Loads and concatenates CIFAR-10 binary files, optionally normalizing each
/// channel to zero mean and unit variance over the loaded images.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P], normalize: bool) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = fs::read(p.as_ref())?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a multiple of {CIFAR_RECORD}",
                p.as_ref().display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    let mut ds = parse_cifar10(&bytes)?;
    if normalize {
        let stats = channel_stats(&ds.images);
        apply_channel_stats(&mut ds.images, &stats);
    }
    Ok(ds)
}

/// `data_batch_{1..5}.bin` and `test_batch.bin` from a CIFAR-10 directory.
/// With `normalize`, both sets use the training-set channel statistics.
pub fn load_cifar10_dir(dir: &Path, normalize: bool) -> Result<(Dataset, Dataset)> {
    let train: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let mut train = load_cifar10_binary(&train, false)?;
    let mut test = load_cifar10_binary(&[dir.join("test_batch.bin")], false)?;
    if normalize {
        let stats = channel_stats(&train.images);
        apply_channel_stats(&mut train.images, &stats);
        apply_channel_stats(&mut test.images, &stats);
    }
    Ok((train, test))
}

/// Per-channel `(mean, std)` over all samples and pixels.
fn channel_stats(images: &Tensor<f32>) -> Vec<(f64, f64)> {
    let [n, c, h, w] = images.dims();
    let count = (n * h * w).max(1) as f64;
    (0..c)
        .map(|ch| {
            let (mut sum, mut sq) = (0.0f64, 0.0f64);
            for s in 0..n {
                for &v in images.plane(s, ch) {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / count;
            (mean, (sq / count - mean * mean).max(0.0).sqrt().max(1e-8))
        })
        .collect()
}

fn apply_channel_stats(images: &mut Tensor<f32>, stats: &[(f64, f64)]) {
    let [n, _, h, w] = images.dims();
    for s in 0..n {
        for (ch, &(mean, std)) in stats.iter().enumerate() {
            let start = images.offset([s, ch, 0, 0]);
            for v in &mut images.data_mut()[start..start + h * w] {
                *v = ((*v as f64 - mean) / std) as f32;
            }
        }
    }
}

/// Seeded grayscale chevrons.
///
/// Class `k` of `classes` draws `0.5 + contrast * cos(omega * u + phase)` with
/// `u = |x - cx| * sin(a) + (y - cy) * cos(a)` and `a = pi * k / classes`, plus
/// Gaussian noise, clamped to `[0, 1]` and quantized to 8 bits. Every pattern
/// is mirror symmetric about `x = cx`, so left-right flips keep the class;
/// up-down flips and half turns map class `k` to `classes - k`.
/// Labels cycle `0, 1, .., classes - 1`, so the classes stay balanced.
pub fn gen_synthetic(n: usize, seed: u64, size: usize, classes: usize) -> Result<Dataset> {
    gen_synthetic_with_noise(n, seed, size, classes, SYNTHETIC_NOISE)
}

/// Pixel noise standard deviation of [`gen_synthetic`].
pub const SYNTHETIC_NOISE: f64 = 0.5;

/// [`gen_synthetic`] with a chosen noise level.
pub fn gen_synthetic_with_noise(n: usize, seed: u64, size: usize, classes: usize, noise: f64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Invalid(format!("need at least 2 classes, got {classes}")));
    }
    if size < 4 {
        return Err(Error::Invalid(format!("image size {size} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise).map_err(|_| Error::Invalid(format!("bad noise level {noise}")))?;
    let mid = (size as f64 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let a = PI * k as f64 / classes as f64;
        let (sa, ca) = a.sin_cos();
        let cx = mid + rng.gen_range(-2.0..2.0);
        let cy = mid + rng.gen_range(-2.0..2.0);
        let omega = 2.0 * PI / rng.gen_range(3.5..5.5);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let contrast = rng.gen_range(0.25..0.45);
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 - cx).abs() * sa + (y as f64 - cy) * ca;
                let v = 0.5 + contrast * (omega * u + phase).cos() + noise.sample(&mut rng);
                pixels.push(((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32);
            }
        }
        labels.push(k);
    }
    Dataset::new(Tensor::new([n, 1, size, size], pixels)?, labels, classes)
}

const DATASET_MAGIC: &[u8; 8] = b"ACNDATA1";

/// Dataset file: magic, `n c h w classes` as u32 LE, labels as u32 LE,
/// pixels as f32 LE, then a CRC-64 of everything before it as u64 LE.
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let [n, c, h, w] = ds.images.dims();
    let mut out = Vec::with_capacity(28 + 4 * n + 4 * ds.images.len() + 8);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [n, c, h, w, ds.class_count] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &v in ds.images.data() {
        v.write_le(&mut out);
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let short = || Error::Format("dataset file is truncated".into());
    if bytes.len() < DATASET_MAGIC.len() + 28 || &bytes[..8] != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let u32_at = |off: usize| -> Result<usize> {
        body.get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(short)
    };
    let dims: Vec<usize> = (0..5).map(|i| u32_at(8 + 4 * i)).collect::<Result<_>>()?;
    let (n, c, h, w, classes) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
    let pixels = n
        .checked_mul(c * h * w)
        .ok_or_else(|| Error::Format("dataset dimensions overflow".into()))?;
    if body.len() != 28 + 4 * n + 4 * pixels {
        return Err(short());
    }
    let labels = (0..n).map(|i| u32_at(28 + 4 * i)).collect::<Result<Vec<_>>>()?;
    let start = 28 + 4 * n;
    let data = body[start..].chunks_exact(4).map(f32::read_le).collect();
    Dataset::new(Tensor::new([n, c, h, w], data)?, labels, classes)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Zero-pad by `pad` on every side, crop a random window of `crop` (the
/// original extent when `None`), then flip left-right with `flip_prob`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub pad: usize,
    pub crop: Option<(usize, usize)>,
    pub flip_prob: f64,
}

impl AugmentConfig {
    /// Pad by one eighth of the side (4 pixels at 32x32) and flip half the time.
    pub fn standard(side: usize) -> Self {
        Self {
            pad: (side / 8).max(1),
            crop: None,
            flip_prob: 0.5,
        }
    }

    pub fn flip_only(flip_prob: f64) -> Self {
        Self {
            pad: 0,
            crop: None,
            flip_prob,
        }
    }

    fn crop_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ch, cw) = self.crop.unwrap_or((h, w));
        if ch == 0 || cw == 0 || ch > h + 2 * self.pad || cw > w + 2 * self.pad {
            return Err(Error::Invalid(format!(
                "crop {ch}x{cw} does not fit {h}x{w} padded by {}",
                self.pad
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Invalid(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        Ok((ch, cw))
    }
}

/// Per-image crop offsets into the padded image and flip decisions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentDraw {
    pub offsets: Vec<(usize, usize)>,
    pub flips: Vec<bool>,
}

/// Draws a random crop and flip for each image in `batch`.
pub fn draw_augment<T: Real, R: Rng>(batch: &Tensor<T>, cfg: &AugmentConfig, rng: &mut R) -> Result<AugmentDraw> {
    let [n, _, h, w] = batch.dims();
    let (ch, cw) = cfg.crop_extent(h, w)?;
    let (ph, pw) = (h + 2 * cfg.pad, w + 2 * cfg.pad);
    let mut draw = AugmentDraw {
        offsets: Vec::with_capacity(n),
        flips: Vec::with_capacity(n),
    };
    for _ in 0..n {
        draw.offsets.push((rng.gen_range(0..=ph - ch), rng.gen_range(0..=pw - cw)));
        draw.flips.push(cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob));
    }
    Ok(draw)
}

pub fn augment<T: Real, R: Rng>(batch: &Tensor<T>, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor<T>> {
    let draw = draw_augment(batch, cfg, rng)?;
    augment_with(batch, cfg, &draw)
}

/// Applies pre-drawn crops and flips.
pub fn augment_with<T: Real>(batch: &Tensor<T>, cfg: &AugmentConfig, draw: &AugmentDraw) -> Result<Tensor<T>> {
    let [n, c, h, w] = batch.dims();
    let (ch, cw) = cfg.crop_extent(h, w)?;
    if draw.offsets.len() != n || draw.flips.len() != n {
        return Err(Error::Shape(format!("augment draw covers {} images, batch has {n}", draw.offsets.len())));
    }
    let p = cfg.pad as isize;
    let mut out = Tensor::zeros([n, c, ch, cw]);
    for s in 0..n {
        let (oy, ox) = draw.offsets[s];
        for k in 0..c {
            for y in 0..ch {
                let sy = (oy + y) as isize - p;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..cw {
                    let xx = if draw.flips[s] { cw - 1 - x } else { x };
                    let sx = (ox + xx) as isize - p;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out.set([s, k, y, x], batch.get([s, k, sy as usize, sx as usize]));
                }
            }
        }
    }
    Ok(out)
}
