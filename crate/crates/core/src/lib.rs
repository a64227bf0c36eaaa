//! Layer-wise effectiveness diagnostics and score-driven mixed-precision
//! quantization for small pre-norm decoder transformers.
//!
//! The crate is `no_std` + `alloc`. It holds the numerical pipeline only:
//! the forward pass, the spectral and ablation diagnostics, the bit
//! allocator, the group-wise quantizer with its packed layout, and the
//! experiment harness. File formats, reports and the CLI live in the `lieq`
//! crate.
//!
//! Enable the `parallel` feature to spread forward passes and spectral
//! analysis over a rayon pool. Results are reduced in a fixed order, so the
//! output does not depend on the thread count.
#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod allocator;
pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod quant;
pub mod spectral;
pub mod stats;
pub mod tensor;

mod par;

pub use allocator::{BitPlan, CompressionReport, NormalizedMetrics, Partition, ScoreWeights};
pub use diagnostics::{BucketSpec, DiagnosticsConfig, LayerDiagnostics, PerplexityResult};
pub use error::{Error, Result};
pub use forward::{DecoderWeights, LinearMap};
pub use harness::{EvalReport, FixtureSpec, SweepPoint, SweepResult};
pub use model::{ArchConfig, HiddenMatrix, ModelCheckpoint, Proj, SkipSet, TokenCorpus};
pub use quant::{QuantGroup, QuantLinear, QuantModel, QuantTensor};
pub use tensor::{Matrix, Tensor};
