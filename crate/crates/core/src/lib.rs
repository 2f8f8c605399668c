//! Declarative multi-domain, multi-cluster slice orchestration over simulated
//! infrastructure.
//!
//! The guide in `book/` walks through each module; its code blocks are
//! compiled and run as doc-tests of this crate.

pub mod appcatalog;
pub mod descriptor;
pub mod engine;
pub mod fixtures;
pub mod infra;
pub mod lifecycle;
pub mod planner;
pub mod store;
pub mod time;

// Runs the book's code blocks under `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/descriptor.md")]
    mod descriptor {}
    #[doc = include_str!("../../../book/src/placement.md")]
    mod placement {}
    #[doc = include_str!("../../../book/src/lifecycle.md")]
    mod lifecycle {}
    #[doc = include_str!("../../../book/src/peering.md")]
    mod peering {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/event-log.md")]
    mod event_log {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
