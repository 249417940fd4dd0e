//! The guide's listings, run as doc-tests.
//!
//! mdbook cannot link listings against workspace crates, so every chapter is
//! included here and `cargo test --doc` runs its code blocks. One module per
//! chapter keeps failures traceable to their source file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/extended-input.md")]
pub mod extended_input {}
#[doc = include_str!("../../../book/src/hypersurfaces.md")]
pub mod hypersurfaces {}
#[doc = include_str!("../../../book/src/modes.md")]
pub mod modes {}
#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}
#[doc = include_str!("../../../book/src/files-and-cli.md")]
pub mod files_and_cli {}
#[doc = include_str!("../../../README.md")]
pub mod readme {}
