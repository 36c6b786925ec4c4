//! Selective KV-cache recomputation at desk scale.
//!
//! Independently precomputed per-chunk KV caches are fused into one coherent
//! cache by recomputing, layer by layer, only the tokens whose K/V deviate
//! most from a full prefill — with rotary positional recovery so a chunk's
//! cache can be reused at any offset, a tiered persistent KV store, and a
//! loading controller that pipelines cache fetching with recompute.
//!
//! Modules:
//! - [`model`]: deterministic miniature decoder-only transformer (the oracle
//!   and the layer primitives).
//! - [`rope`]: rotary positional embedding and on-the-fly realignment.
//! - [`kvcache`]: cache data model, chunk identity, deviation metrics.
//! - [`blend`]: the fusor — gradual-filtering token selection and partial
//!   prefill.
//! - [`kvstore`]: tiered store with LRU eviction and a layer-indexed binary
//!   format.
//! - [`pipeline`]: loading controller and the fetch/compute pipelined
//!   executor.
//! - [`bench`]: synthetic workloads and the method-comparison experiment
//!   runner.
//!
//! The `parallel` feature (on by default) runs the data-parallel inner loops
//! on a rayon pool; without it everything is sequential. Results are bitwise
//! identical either way.

pub mod bench;
pub mod blend;
pub mod error;
pub mod kvcache;
pub mod kvstore;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod rope;

pub use error::{Error, Result};
