//! Graph surrogate for flood routing that predicts node water volume and edge
//! flow jointly, trained with global and local mass-balance regularizers.

pub mod checkpoint;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod model;
pub mod synthetic;
pub mod tape;
pub mod train;

pub use error::{FloodError, Result};

// The guide's snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
