//! Textual model descriptions.
//!
//! One layer per line, `#` starts a comment:
//!
//! ```text
//! input 1 16 16
//! conv 8 3x3 stride=1 pad=1 block=acb
//! relu
//! maxpool 2 stride=2
//! conv 16 3x3 pad=1 block=acb-shifted
//! relu
//! gap
//! linear 4
//! ```
//!
//! `conv` takes the filter count and kernel `HxW` (or a single `K`), plus
//! optional `stride=`, `pad=` (each `N` or `HxW`), `block=plain|acb|acb-shifted`,
//! `dilation=` and `groups=`. Only dilation 1 and groups 1 can be built.

use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Plain,
    Acb,
    AcbShifted,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Plain => "plain",
            BlockKind::Acb => "acb",
            BlockKind::AcbShifted => "acb-shifted",
        }
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(BlockKind::Plain),
            "acb" => Ok(BlockKind::Acb),
            "acb-shifted" | "shifted" => Ok(BlockKind::AcbShifted),
            other => Err(Error::Invalid(format!("unknown block kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDesc {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub block: BlockKind,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvDesc {
    pub fn new(filters: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize), block: BlockKind) -> Self {
        Self {
            filters,
            kernel,
            stride,
            padding,
            block,
            dilation: 1,
            groups: 1,
        }
    }

    /// 3x3 with padding 1, the only shape an ACB can replace.
    pub fn acb_eligible(&self) -> bool {
        self.kernel == (3, 3) && self.padding == (1, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDesc {
    Conv(ConvDesc),
    Relu,
    MaxPool { k: usize, stride: usize },
    GlobalAvgPool,
    Linear { classes: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// `(channels, height, width)` of one input sample.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerDesc>,
}

impl ModelSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut input = None;
        let mut layers = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Spec { line: line_no, msg };
            let mut toks = line.split_whitespace();
            let head = toks.next().unwrap();
            let rest: Vec<&str> = toks.collect();
            let (pos, kv) = split_args(&rest);
            match head {
                "input" => {
                    if pos.len() != 3 || !kv.is_empty() {
                        return Err(err("expected `input C H W`".into()));
                    }
                    let v = pos.iter().map(|s| parse_count(s)).collect::<Result<Vec<_>, _>>().map_err(err)?;
                    input = Some((v[0], v[1], v[2]));
                }
                "conv" => {
                    if pos.len() != 2 {
                        return Err(err("expected `conv FILTERS KHxKW [key=value..]`".into()));
                    }
                    let filters = parse_count(pos[0]).map_err(err)?;
                    let kernel = parse_pair(pos[1]).map_err(err)?;
                    let mut desc = ConvDesc::new(filters, kernel, (1, 1), (0, 0), BlockKind::Plain);
                    for (k, v) in kv {
                        match k {
                            "stride" => desc.stride = parse_pair(v).map_err(err)?,
                            "pad" | "padding" => desc.padding = parse_pair(v).map_err(err)?,
                            "block" => desc.block = v.parse().map_err(|e: Error| err(e.to_string()))?,
                            "dilation" => desc.dilation = parse_count(v).map_err(err)?,
                            "groups" => desc.groups = parse_count(v).map_err(err)?,
                            other => return Err(err(format!("unknown conv option {other:?}"))),
                        }
                    }
                    layers.push(LayerDesc::Conv(desc));
                }
                "relu" => {
                    no_args(&pos, &kv).map_err(err)?;
                    layers.push(LayerDesc::Relu);
                }
                "gap" | "global-avg-pool" => {
                    no_args(&pos, &kv).map_err(err)?;
                    layers.push(LayerDesc::GlobalAvgPool);
                }
                "maxpool" => {
                    if pos.len() != 1 {
                        return Err(err("expected `maxpool K [stride=S]`".into()));
                    }
                    let k = parse_count(pos[0]).map_err(err)?;
                    let mut stride = k;
                    for (key, v) in kv {
                        match key {
                            "stride" => stride = parse_count(v).map_err(err)?,
                            other => return Err(err(format!("unknown maxpool option {other:?}"))),
                        }
                    }
                    layers.push(LayerDesc::MaxPool { k, stride });
                }
                "linear" => {
                    if pos.len() != 1 || !kv.is_empty() {
                        return Err(err("expected `linear CLASSES`".into()));
                    }
                    layers.push(LayerDesc::Linear {
                        classes: parse_count(pos[0]).map_err(err)?,
                    });
                }
                other => return Err(err(format!("unknown layer {other:?}"))),
            }
        }
        let input = input.ok_or(Error::Spec {
            line: 0,
            msg: "missing `input C H W` line".into(),
        })?;
        Ok(Self { input, layers })
    }

    /// Same architecture with every ACB-eligible conv set to `block`.
    pub fn with_block(&self, block: BlockKind) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            if let LayerDesc::Conv(c) = l {
                c.block = if c.acb_eligible() { block } else { BlockKind::Plain };
            }
        }
        out
    }

    pub fn acb_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerDesc::Conv(c) if c.block != BlockKind::Plain))
            .count()
    }

    /// Output class count (the last linear layer).
    pub fn classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerDesc::Linear { classes } => Some(*classes),
            _ => None,
        })
    }
}

fn split_args<'a>(toks: &[&'a str]) -> (Vec<&'a str>, Vec<(&'a str, &'a str)>) {
    let mut pos = Vec::new();
    let mut kv = Vec::new();
    for t in toks {
        match t.split_once('=') {
            Some((k, v)) => kv.push((k, v)),
            None => pos.push(*t),
        }
    }
    (pos, kv)
}

fn no_args(pos: &[&str], kv: &[(&str, &str)]) -> Result<(), String> {
    if pos.is_empty() && kv.is_empty() {
        Ok(())
    } else {
        Err("takes no arguments".into())
    }
}

fn parse_count(s: &str) -> Result<usize, String> {
    s.parse().map_err(|_| format!("expected a non-negative integer, got {s:?}"))
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    match s.split_once('x') {
        Some((a, b)) => Ok((parse_count(a)?, parse_count(b)?)),
        None => {
            let v = parse_count(s)?;
            Ok((v, v))
        }
    }
}

fn fmt_pair(p: (usize, usize)) -> String {
    if p.0 == p.1 {
        p.0.to_string()
    } else {
        format!("{}x{}", p.0, p.1)
    }
}

impl fmt::Display for LayerDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerDesc::Conv(c) => {
                write!(
                    f,
                    "conv {} {}x{} stride={} pad={} block={}",
                    c.filters,
                    c.kernel.0,
                    c.kernel.1,
                    fmt_pair(c.stride),
                    fmt_pair(c.padding),
                    c.block.name()
                )?;
                if c.dilation != 1 {
                    write!(f, " dilation={}", c.dilation)?;
                }
                if c.groups != 1 {
                    write!(f, " groups={}", c.groups)?;
                }
                Ok(())
            }
            LayerDesc::Relu => f.write_str("relu"),
            LayerDesc::MaxPool { k, stride } => write!(f, "maxpool {k} stride={stride}"),
            LayerDesc::GlobalAvgPool => f.write_str("gap"),
            LayerDesc::Linear { classes } => write!(f, "linear {classes}"),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {} {} {}", self.input.0, self.input.1, self.input.2)?;
        for l in &self.layers {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
