//! Crystal structures as token sequences, and a property-conditioned
//! transformer that learns to write them.
//!
//! The guide in `book/` walks through each module; its Rust snippets are
//! compiled as doc-tests of this crate.

pub mod crystal;
pub mod data;
pub mod elements;
pub mod evaluator;
pub mod fsutil;
pub mod model;
pub mod sampler;
pub mod tokenizer;
pub mod trainer;

// One module per chapter so a failing snippet names its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/crystals.md")]
    mod crystals {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/data-format.md")]
    mod data_format {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
