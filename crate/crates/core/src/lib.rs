//! Block-sparse attention engine for diffusion-transformer style workloads.
//!
//! Work is scheduled in Update/Dispatch cycles. An Update step computes
//! everything densely, derives per-head cache and skip masks from a pooled
//! attention map, packs them into byte symbols and refreshes the feature
//! cache. The following Dispatch steps read those symbols to skip query
//! projection rows, whole attention tiles and individual key blocks, and
//! fold cached heads into the output projection as a precomputed bias.
//!
//! Module map:
//!
//! - [`tensor`]: dense reference numerics (the oracle for every sparse path)
//! - [`symbols`]: logical masks and their packed 8-bit symbol encoding
//! - [`policy`]: mask generation from the compressed attention map
//! - [`attention`]: the tiled sparse attention engine and the feature cache
//! - [`gemm`]: sparse query projection and cached-bias output projection
//! - [`pipeline`]: the Update/Dispatch scheduler over a synthetic workload
//! - [`costs`]: work accounting and analytical speedup formulas
//! - [`verify`]: the property suite behind `omni verify`

pub mod attention;
pub mod costs;
pub mod error;
pub mod gemm;
mod par;
pub mod pipeline;
pub mod policy;
pub mod reference;
pub mod symbols;
pub mod tensor;
pub mod verify;

pub use error::{OmniError, Result};
pub use tensor::Matrix;
