//! Hierarchical cross-granularity contrastive and matching objectives for
//! vision-language retrieval, with toy encoders, a synthetic scene benchmark,
//! and a retrieval evaluation harness.
//!
//! The guide in `book/` walks through each module; its examples run as
//! doc-tests.

pub mod diffcore;
pub mod encoders;
pub mod momentum;
pub mod losses;
pub mod data;
pub mod eval;
pub mod train;
pub mod ablate;
pub mod verify;

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/encoders.md")]
    pub mod encoders {}
    #[doc = include_str!("../../../book/src/momentum.md")]
    pub mod momentum {}
    #[doc = include_str!("../../../book/src/losses.md")]
    pub mod losses {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
