//! Simulation-driven RTL generation.
//!
//! A Generator model writes Verilog, a simulator judges it, a Reflector
//! model diagnoses failures and a Coordinator keeps an evolving record of
//! what has been tried, restarting from distilled insights when the loop
//! stalls. Several loops can race on one task; the first to pass wins.
//!
//! The crate also carries the dataset curation filters used to build
//! training corpora and the Pass@1 / APR metrics used to score runs.

pub mod cancel;
pub mod coordinator;
pub mod eval;
pub mod forge;
pub mod generator;
pub mod llm;
pub mod model;
pub mod orchestrator;
pub mod reflector;
pub mod sim;

pub use cancel::CancelToken;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tasks.md")]
    mod tasks {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
    #[doc = include_str!("../../../book/src/loop.md")]
    mod repair_loop {}
    #[doc = include_str!("../../../book/src/racing.md")]
    mod racing {}
    #[doc = include_str!("../../../book/src/forge.md")]
    mod forge {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
