pub mod adapter;
pub mod error;
pub mod eval;
pub mod mbti;
pub mod model;
pub mod pipeline;
pub mod sweep;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{CompatError, Error, FormatError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/composition.md")]
    mod composition {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/sweep.md")]
    mod sweep {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
