//! Model files.
//!
//! A UTF-8 header, then a binary section, then a CRC-64 (XZ) of the binary
//! section as u64 LE:
//!
//! ```text
//! ACNET-MODEL
//! version 1
//! precision f32
//! fused false
//! spec 3
//! input 1 8 8
//! conv 4 3x3 stride=1 pad=1 block=acb
//! gap
//! layers 2
//! layer acb filters=4 in=1 stride=1x1 horizontal=1 vertical=1 bn=branch offsets=1,1 eps=1e-5,1e-5,1e-5 momentum=0.1,0.1,0.1
//! layer gap
//! end-header
//! ```
//!
//! The binary section lists every array of every layer in order (branch
//! weight, bias, then gamma, beta, running mean, running variance), each as a
//! u32 LE element count followed by little-endian values at the declared
//! precision. Parameter ids are reassigned in that order on load, which is
//! also the order models are built in.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::bn::BatchNormState;
use crate::model::{AcBlock, ConvBranch, EmbedOffsets, Layer, Linear, Model};
use crate::param::{IdGen, Param};
use crate::spec::ModelSpec;
use crate::tensor::ConvGeometry;
use crate::{Error, Precision, Real, Result, Tensor};

pub const MAGIC: &str = "ACNET-MODEL";
pub const FORMAT_VERSION: u32 = 1;
const END_HEADER: &str = "end-header\n";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// A model loaded at whatever precision its file declares.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    pub fn precision(&self) -> Precision {
        match self {
            AnyModel::F32(_) => Precision::F32,
            AnyModel::F64(_) => Precision::F64,
        }
    }

    pub fn to_f32(&self) -> Model<f32> {
        match self {
            AnyModel::F32(m) => m.clone(),
            AnyModel::F64(m) => m.cast(),
        }
    }

    pub fn to_f64(&self) -> Model<f64> {
        match self {
            AnyModel::F32(m) => m.cast(),
            AnyModel::F64(m) => m.clone(),
        }
    }
}

impl<T: Real> From<Model<T>> for AnyModel {
    fn from(m: Model<T>) -> Self {
        match Precision::of::<T>() {
            Precision::F32 => AnyModel::F32(m.cast()),
            Precision::F64 => AnyModel::F64(m.cast()),
        }
    }
}

/// No ACBs and no batch norms left.
pub fn is_fused<T: Real>(m: &Model<T>) -> bool {
    !m.has_acb() && !m.has_bn()
}

pub fn encode_model<T: Real>(m: &Model<T>) -> Vec<u8> {
    let spec = m.spec.to_string();
    let mut header = format!(
        "{MAGIC}\nversion {FORMAT_VERSION}\nprecision {}\nfused {}\nspec {}\n{spec}layers {}\n",
        T::NAME,
        is_fused(m),
        spec.lines().count(),
        m.layers.len()
    );
    let mut body = Vec::new();
    for layer in &m.layers {
        header += "layer ";
        header += &layer_line(layer);
        header.push('\n');
        write_layer(layer, &mut body);
    }
    header += END_HEADER;
    let mut out = header.into_bytes();
    let sum = checksum(&body);
    out.extend_from_slice(&body);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn save_model<T: Real>(m: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_model(m))?;
    Ok(())
}

/// Loads a model stored at precision `T`.
pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    decode_model(&fs::read(path)?)
}

pub fn load_any(path: &Path) -> Result<AnyModel> {
    decode_any(&fs::read(path)?)
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyModel> {
    let (header, _) = split_header(bytes)?;
    let precision: Precision = header_value(&header, 2, "precision")?.parse()?;
    Ok(match precision {
        Precision::F32 => AnyModel::F32(decode_model(bytes)?),
        Precision::F64 => AnyModel::F64(decode_model(bytes)?),
    })
}

pub fn decode_model<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let (header, rest) = split_header(bytes)?;
    let version: u32 = header_value(&header, 1, "version")?
        .parse()
        .map_err(|_| Error::Format("bad version line".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let precision = header_value(&header, 2, "precision")?;
    if precision != T::NAME {
        return Err(Error::Format(format!("file holds {precision} weights, requested {}", T::NAME)));
    }
    let spec_len = count_value(&header, 4, "spec")?;
    let spec_end = 5 + spec_len;
    if header.len() < spec_end + 1 {
        return Err(Error::Format("header ends inside the spec".into()));
    }
    let spec = ModelSpec::parse(&header[5..spec_end].join("\n"))?;
    let n_layers = count_value(&header, spec_end, "layers")?;
    let layer_lines = &header[spec_end + 1..];
    if layer_lines.len() != n_layers {
        return Err(Error::Format(format!(
            "header declares {n_layers} layers but lists {}",
            layer_lines.len()
        )));
    }

    if rest.len() < 8 {
        return Err(Error::Format("model file is truncated".into()));
    }
    let (body, tail) = rest.split_at(rest.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
        ids: IdGen::default(),
    };
    let layers = layer_lines
        .iter()
        .map(|line| {
            let line = line
                .strip_prefix("layer ")
                .ok_or_else(|| Error::Format(format!("expected a layer line, got {line:?}")))?;
            read_layer(line, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last layer", body.len() - r.pos)));
    }
    Ok(Model { spec, layers })
}

fn split_header(bytes: &[u8]) -> Result<(Vec<String>, &[u8])> {
    let marker = END_HEADER.as_bytes();
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Format("no end-header line".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let lines: Vec<String> = text.lines().map(str::to_owned).collect();
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(Error::Format("not a model file".into()));
    }
    Ok((lines, &bytes[end + marker.len()..]))
}

fn header_value<'a>(lines: &'a [String], idx: usize, key: &str) -> Result<&'a str> {
    lines
        .get(idx)
        .and_then(|l| l.strip_prefix(key))
        .and_then(|l| l.strip_prefix(' '))
        .ok_or_else(|| Error::Format(format!("header line {} should be `{key} ..`", idx + 1)))
}

fn count_value(lines: &[String], idx: usize, key: &str) -> Result<usize> {
    header_value(lines, idx, key)?
        .parse()
        .map_err(|_| Error::Format(format!("bad `{key}` count")))
}

fn pair(p: (usize, usize)) -> String {
    format!("{}x{}", p.0, p.1)
}

fn bn_lists<'a, T: Real + 'a>(bns: impl Iterator<Item = &'a BatchNormState<T>>) -> String {
    let (eps, mom): (Vec<_>, Vec<_>) = bns.map(|b| (format!("{:?}", b.eps), format!("{:?}", b.momentum))).unzip();
    format!("eps={} momentum={}", eps.join(","), mom.join(","))
}

fn layer_line<T: Real>(layer: &Layer<T>) -> String {
    match layer {
        Layer::Conv(c) => format!(
            "conv filters={} in={} kernel={} stride={} pad={} shift={},{} bias={} bn={} {}",
            c.filters(),
            c.in_channels(),
            pair(c.kernel()),
            pair(c.geom.stride),
            pair(c.geom.padding),
            c.shift.0,
            c.shift.1,
            u8::from(c.bias.is_some()),
            u8::from(c.bn.is_some()),
            bn_lists(c.bn.iter())
        ),
        Layer::Acb(b) => {
            let bns = b.branches().filter_map(|br| br.bn.as_ref()).chain(b.post_bn.iter());
            format!(
                "acb filters={} in={} stride={} horizontal={} vertical={} bn={} offsets={},{} {}",
                b.square.filters(),
                b.square.in_channels(),
                pair(b.stride()),
                u8::from(b.horizontal.is_some()),
                u8::from(b.vertical.is_some()),
                if b.post_bn.is_some() { "post" } else { "branch" },
                b.offsets.horizontal_row,
                b.offsets.vertical_col,
                bn_lists(bns)
            )
        }
        Layer::Relu => "relu".into(),
        Layer::MaxPool { k, stride } => format!("maxpool k={k} stride={stride}"),
        Layer::GlobalAvgPool => "gap".into(),
        Layer::Linear(l) => format!("linear classes={} features={}", l.weight.value.dims()[0], l.weight.value.dims()[1]),
    }
}

fn write_array<T: Real>(values: &[T], out: &mut Vec<u8>) {
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    values.iter().for_each(|v| v.write_le(out));
}

fn write_bn<T: Real>(bn: &BatchNormState<T>, out: &mut Vec<u8>) {
    write_array(bn.gamma(), out);
    write_array(bn.beta(), out);
    write_array(&bn.running_mean, out);
    write_array(&bn.running_var, out);
}

fn write_branch<T: Real>(b: &ConvBranch<T>, out: &mut Vec<u8>) {
    write_array(b.weight.value.data(), out);
    if let Some(bias) = &b.bias {
        write_array(bias.value.data(), out);
    }
    if let Some(bn) = &b.bn {
        write_bn(bn, out);
    }
}

fn write_layer<T: Real>(layer: &Layer<T>, out: &mut Vec<u8>) {
    match layer {
        Layer::Conv(c) => write_branch(c, out),
        Layer::Acb(b) => {
            b.branches().for_each(|br| write_branch(br, out));
            if let Some(bn) = &b.post_bn {
                write_bn(bn, out);
            }
        }
        Layer::Linear(l) => {
            write_array(l.weight.value.data(), out);
            write_array(l.bias.value.data(), out);
        }
        Layer::Relu | Layer::MaxPool { .. } | Layer::GlobalAvgPool => {}
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    ids: IdGen,
}

impl Reader<'_> {
    fn array<T: Real>(&mut self, expected: usize) -> Result<Vec<T>> {
        let truncated = || Error::Format("model file is truncated".into());
        let head = self.bytes.get(self.pos..self.pos + 4).ok_or_else(truncated)?;
        let n = u32::from_le_bytes(head.try_into().unwrap()) as usize;
        if n != expected {
            return Err(Error::Format(format!("array holds {n} values, header implies {expected}")));
        }
        let start = self.pos + 4;
        let end = start + n * T::BYTES;
        let raw = self.bytes.get(start..end).ok_or_else(truncated)?;
        self.pos = end;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    fn param<T: Real>(&mut self, dims: [usize; 4]) -> Result<Param<T>> {
        let data = self.array(dims.iter().product())?;
        Ok(Param::new(self.ids.next_id(), Tensor::new(dims, data)?))
    }

    fn bn<T: Real>(&mut self, d: usize, eps: f64, momentum: f64) -> Result<BatchNormState<T>> {
        let gamma = self.param([d, 1, 1, 1])?;
        let beta = self.param([d, 1, 1, 1])?;
        Ok(BatchNormState {
            gamma,
            beta,
            running_mean: self.array(d)?,
            running_var: self.array(d)?,
            eps,
            momentum,
        })
    }
}

struct Fields<'a> {
    line: &'a str,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn parse(line: &'a str) -> (&'a str, Self) {
        let mut toks = line.split_whitespace();
        let kind = toks.next().unwrap_or("");
        let pairs = toks.filter_map(|t| t.split_once('=')).collect();
        (kind, Self { line, pairs })
    }

    fn raw(&self, key: &str) -> Result<&'a str> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Format(format!("layer line {:?} lacks `{key}`", self.line)))
    }

    fn bad(&self, key: &str) -> Error {
        Error::Format(format!("bad `{key}` in layer line {:?}", self.line))
    }

    fn count(&self, key: &str) -> Result<usize> {
        self.raw(key)?.parse().map_err(|_| self.bad(key))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key)? {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(self.bad(key)),
        }
    }

    fn pair(&self, key: &str, sep: char) -> Result<(&'a str, &'a str)> {
        self.raw(key)?.split_once(sep).ok_or_else(|| self.bad(key))
    }

    fn upair(&self, key: &str) -> Result<(usize, usize)> {
        let (a, b) = self.pair(key, 'x')?;
        Ok((a.parse().map_err(|_| self.bad(key))?, b.parse().map_err(|_| self.bad(key))?))
    }

    fn floats(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.raw(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',').map(|v| v.parse().map_err(|_| self.bad(key))).collect()
    }
}

fn read_branch<T: Real>(
    r: &mut Reader,
    dims: [usize; 4],
    geom: ConvGeometry,
    shift: (isize, isize),
    bias: bool,
    bn: Option<(f64, f64)>,
) -> Result<ConvBranch<T>> {
    let weight = r.param(dims)?;
    let bias = if bias { Some(r.param([dims[0], 1, 1, 1])?) } else { None };
    let bn = bn.map(|(eps, m)| r.bn(dims[0], eps, m)).transpose()?;
    Ok(ConvBranch {
        weight,
        bias,
        bn,
        geom,
        shift,
    })
}

fn read_layer<T: Real>(line: &str, r: &mut Reader) -> Result<Layer<T>> {
    let (kind, f) = Fields::parse(line);
    let bn_params = |n: usize| -> Result<Vec<(f64, f64)>> {
        let (eps, mom) = (f.floats("eps")?, f.floats("momentum")?);
        if eps.len() != n || mom.len() != n {
            return Err(Error::Format(format!("layer line {line:?} needs {n} eps/momentum values")));
        }
        Ok(eps.into_iter().zip(mom).collect())
    };
    match kind {
        "conv" => {
            let (d, c) = (f.count("filters")?, f.count("in")?);
            let (kh, kw) = f.upair("kernel")?;
            let geom = ConvGeometry::new(f.upair("stride")?, f.upair("pad")?)?;
            let (dy, dx) = f.pair("shift", ',')?;
            let shift = (dy.parse().map_err(|_| f.bad("shift"))?, dx.parse().map_err(|_| f.bad("shift"))?);
            let has_bn = f.flag("bn")?;
            let bn = bn_params(usize::from(has_bn))?.first().copied();
            Ok(Layer::Conv(read_branch(r, [d, c, kh, kw], geom, shift, f.flag("bias")?, bn)?))
        }
        "acb" => {
            let (d, c) = (f.count("filters")?, f.count("in")?);
            let stride = f.upair("stride")?;
            let (use_h, use_v) = (f.flag("horizontal")?, f.flag("vertical")?);
            let post = match f.raw("bn")? {
                "post" => true,
                "branch" => false,
                _ => return Err(f.bad("bn")),
            };
            let (row, col) = f.pair("offsets", ',')?;
            let offsets = EmbedOffsets {
                horizontal_row: row.parse().map_err(|_| f.bad("offsets"))?,
                vertical_col: col.parse().map_err(|_| f.bad("offsets"))?,
            };
            if offsets.horizontal_row > 2 || offsets.vertical_col > 2 {
                return Err(f.bad("offsets"));
            }
            let branches = 1 + usize::from(use_h) + usize::from(use_v);
            let mut bns = bn_params(if post { 1 } else { branches })?.into_iter();
            let mut branch_bn = || if post { None } else { bns.next() };
            let square = read_branch(r, [d, c, 3, 3], ConvGeometry::new(stride, (1, 1))?, (0, 0), false, branch_bn())?;
            let horizontal = use_h
                .then(|| {
                    let g = ConvGeometry::new(stride, (0, 1))?;
                    read_branch(r, [d, c, 1, 3], g, (offsets.horizontal_row as isize - 1, 0), false, branch_bn())
                })
                .transpose()?;
            let vertical = use_v
                .then(|| {
                    let g = ConvGeometry::new(stride, (1, 0))?;
                    read_branch(r, [d, c, 3, 1], g, (0, offsets.vertical_col as isize - 1), false, branch_bn())
                })
                .transpose()?;
            let post_bn = if post {
                let (eps, m) = bns.next().expect("one post-summation entry");
                Some(r.bn(d, eps, m)?)
            } else {
                None
            };
            Ok(Layer::Acb(AcBlock {
                square,
                horizontal,
                vertical,
                post_bn,
                offsets,
            }))
        }
        "relu" => Ok(Layer::Relu),
        "gap" => Ok(Layer::GlobalAvgPool),
        "maxpool" => Ok(Layer::MaxPool {
            k: f.count("k")?,
            stride: f.count("stride")?,
        }),
        "linear" => {
            let (k, feats) = (f.count("classes")?, f.count("features")?);
            let weight = r.param([k, feats, 1, 1])?;
            let bias = r.param([k, 1, 1, 1])?;
            Ok(Layer::Linear(Linear { weight, bias }))
        }
        other => Err(Error::Format(format!("unknown layer kind {other:?}"))),
    }
}
