//! Building-footprint generation for map tiles: dataset construction from
//! vector map data, a conditional pixel-space diffusion model, vectorization,
//! and tile-level evaluation including completeness assessment.
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doc-tests of this crate.

pub mod completeness;
pub mod condition;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod geom;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod synthcity;
pub mod tilegrid;
pub mod vector;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tiles.md")]
    mod tiles {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/conditioning.md")]
    mod conditioning {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/vectorization.md")]
    mod vectorization {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/completeness.md")]
    mod completeness {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
