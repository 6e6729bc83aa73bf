//! Extract object-like crops from a classifier's attribution maps and test
//! whether they carry the evidence the classifier relies on.
//!
//! The stages, in order:
//!
//! - [`ingest`]: dataset manifests, image loading and preprocessing;
//! - [`classifier`]: the adapter trait, a small trainable CNN, stub and
//!   external adapters;
//! - [`attribution`]: attribution backends and top-p thresholding;
//! - [`segmentation`]: segment proposals, including a model-free fallback;
//! - [`selection`]: segment scoring, deduplication and padded boxes;
//! - [`faithfulness`]: deletion and insertion tests against a
//!   size-matched random baseline;
//! - [`pipeline`] and [`report`]: run directories, caching, sweeps and the
//!   static report behind the `geoxplain` binary.
//!
//! [`synthetic`] generates a planted-cue dataset where the deciding object's
//! location is known, which makes the pipeline checkable end to end.

pub mod attribution;
pub mod classifier;
pub mod config;
pub mod external;
pub mod faithfulness;
pub mod grid;
pub mod ingest;
pub mod pipeline;
pub mod report;
pub mod segmentation;
pub mod selection;
pub mod synthetic;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/attribution.md")]
    mod attribution {}
    #[doc = include_str!("../../../book/src/segmentation.md")]
    mod segmentation {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/faithfulness.md")]
    mod faithfulness {}
    #[doc = include_str!("../../../book/src/runs.md")]
    mod runs {}
    #[doc = include_str!("../../../book/src/external.md")]
    mod external {}
}
