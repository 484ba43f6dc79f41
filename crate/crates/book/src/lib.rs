//! The guide's chapters, compiled so their snippets run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/games.md")]
pub mod games {}
#[doc = include_str!("../../../book/src/attribution.md")]
pub mod attribution {}
#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}
#[doc = include_str!("../../../book/src/backtesting.md")]
pub mod backtesting {}
#[doc = include_str!("../../../book/src/weighting.md")]
pub mod weighting {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
