//! Baseline attentions and the assembled DyDiLA block.

mod baseline;
mod block;
mod dwc;
mod map;
mod stack;

pub use baseline::{linear_attention, softmax_attention};
pub use block::{
    dydila_forward, multihead_forward, BlockConfig, BlockDiagnostics, DydilaParams, HeadDiagnostics, HeadParams,
    StreamKernels, Variant,
};
pub use dwc::{dwc_forward, reparam_merge, DwcParams, Grid, Kernel3x3};
pub use map::{extract_attention_row, MapKind};
pub use stack::{stack_forward, AttentionStack};
