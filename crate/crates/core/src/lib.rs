//! Dynamic differential linear attention (DyDiLA).
//!
//! A forward-only numerical library for the DyDiLA attention block and its
//! baselines:
//!
//! - [`projection`]: token-shared Q/K/V projections plus routed, token-specific
//!   projectors producing the redundancy streams Q′ and K′.
//! - [`kernels`]: the norm-preserving focused kernel and its routed variant,
//!   where every token picks one of `n_F` learnable kernel factors γ.
//! - [`differential`]: the token differential operator with routed λ factors,
//!   the attention-map-wise variant and the exact four-term expansion.
//! - [`attention`]: softmax and vanilla linear baselines, depth-wise convolution
//!   with reparameterization, the assembled block, multi-head wrapping and
//!   residual stacks.
//! - [`oracle`]: slow, independent reference implementations used to check the
//!   fast paths.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`). Row-parallel loops run
//! on rayon when the `parallel` feature is enabled (the default) and fall back
//! to plain iteration otherwise; per-element summation order is identical in
//! both modes, so results are bit-reproducible.

pub mod attention;
pub mod differential;
pub mod error;
pub mod kernels;
pub mod numerics;
pub mod oracle;
pub mod par;
pub mod projection;
pub mod routing;

pub use error::{Error, Result, Shape};
pub use numerics::{Matrix, Real, SeededRng, TokenMatrix};
