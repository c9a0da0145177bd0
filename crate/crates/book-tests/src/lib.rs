//! The guide's chapters, compiled so that `cargo test --doc` runs their
//! snippets. One module per chapter keeps failures attributable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/systems.md")]
pub mod systems {}

#[doc = include_str!("../../../book/src/curves.md")]
pub mod curves {}

#[doc = include_str!("../../../book/src/flows.md")]
pub mod flows {}

#[doc = include_str!("../../../book/src/perron.md")]
pub mod perron {}

#[doc = include_str!("../../../book/src/smoothness.md")]
pub mod smoothness {}

#[doc = include_str!("../../../book/src/graph-transform.md")]
pub mod graph_transform {}

#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
