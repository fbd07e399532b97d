//! Asymmetric convolution blocks (ACBs): a 3x3 convolution trained alongside
//! parallel 1x3 and 3x1 branches, each with its own batch norm, and fused
//! after training into a single 3x3 convolution with bias that produces the
//! same inference outputs.
//!
//! The crate covers the whole pipeline: exact direct convolution
//! ([`tensor`]), a small reverse-mode autograd ([`graph`]) with momentum SGD
//! ([`train`]), block and model construction ([`model`], [`spec`]), the
//! BN / branch fusion itself ([`fusion`]), kernel-skeleton diagnostics
//! ([`analysis`]), and dataset / model file IO ([`data`], [`io`]).

pub mod analysis;
pub mod bn;
pub mod data;
mod error;
pub mod exec;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod model;
pub mod param;
mod scalar;
pub mod spec;
pub mod tensor;
pub mod train;

pub use bn::{bn_forward, BatchNormState, Mode};
pub use error::{Error, Result};
pub use exec::Exec;
pub use model::{acb_forward, build_plain, expand_to_acnet, AcBlock, Ablation, ConvBranch, EmbedOffsets, Layer, Model};
pub use scalar::{Precision, Real};
pub use spec::{BlockKind, ModelSpec};
pub use tensor::{conv2d, embed_kernel, flip_lr, flip_ud, kernel_add, rot180, rot90, ConvGeometry, FilterBank, Kernel2D, Tensor};
