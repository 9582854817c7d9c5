//! Disparity-aware region distillation for compact BEV detectors.

pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod mask;
pub mod optim;
pub mod regions;
pub mod scene;
pub mod tensor;

pub use error::{Error, LoadError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/detector.md")]
    mod detector {}
    #[doc = include_str!("../../../book/src/regions.md")]
    mod regions {}
    #[doc = include_str!("../../../book/src/mask.md")]
    mod mask {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
