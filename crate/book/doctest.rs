// mdbook cannot run listings that depend on external crates, so each chapter
// is pulled in as the docs of an empty module and `cargo test` runs its code
// blocks as doctests. A failing doctest names the module, which names the
// chapter.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/prior.md")]
pub mod prior {}
#[doc = include_str!("src/forward.md")]
pub mod forward {}
#[doc = include_str!("src/rto.md")]
pub mod rto {}
#[doc = include_str!("src/samplers.md")]
pub mod samplers {}
#[doc = include_str!("src/diagnostics.md")]
pub mod diagnostics {}
#[doc = include_str!("src/cli.md")]
pub mod cli {}
