use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("channel mismatch in {op}: input has {got} channels, expected {expected}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error(
        "degenerate output {dim}: input extent {input}, kernel {kernel}, stride {stride}, padding {padding}"
    )]
    DegenerateOutput {
        dim: &'static str,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("kernel {small_h}x{small_w} at offset ({row}, {col}) does not fit in {target_h}x{target_w}")]
    InvalidOffset {
        small_h: usize,
        small_w: usize,
        row: usize,
        col: usize,
        target_h: usize,
        target_w: usize,
    },

    #[error("model spec line {line}: {msg}")]
    Spec { line: usize, msg: String },

    #[error("layer {layer}: {msg}")]
    Layer { layer: usize, msg: String },

    #[error("degenerate batch-norm statistics in channel {channel}: running_var + eps = {value}")]
    DegenerateStats { channel: usize, value: f64 },

    #[error("model has no conv-BN or ACB layers left to fuse")]
    NothingToFuse,

    #[error("sparsity {target} is infeasible for location set {set}: at most {cap} can be pruned")]
    InfeasibleSparsity {
        set: &'static str,
        target: f64,
        cap: f64,
    },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("data format error: {0}")]
    Format(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
