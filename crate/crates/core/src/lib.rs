pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mim;
pub mod model;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod pipeline;
pub mod preproc;
pub mod real;
pub mod riskhead;
pub mod tokenizer;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;

/// The guide's code blocks, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/phantoms.md")]
    mod phantoms {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/risk-head.md")]
    mod risk_head {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
}
