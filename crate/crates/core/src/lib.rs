//! Contextual dueling bandits with generalized-linear preference feedback.

pub mod baselines;
pub mod dataset;
pub mod ellipsoid;
pub mod env;
pub mod glm;
pub mod harness;
pub mod vacdb;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/environment.md")]
    mod environment {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/vacdb.md")]
    mod vacdb {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
}
