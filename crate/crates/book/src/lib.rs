//! Compiles and runs the guide's code blocks as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/mechanism.md")]
pub mod mechanism {}
#[doc = include_str!("../../../book/src/modes.md")]
pub mod modes {}
#[doc = include_str!("../../../book/src/dynamics.md")]
pub mod dynamics {}
#[doc = include_str!("../../../book/src/identification.md")]
pub mod identification {}
#[doc = include_str!("../../../book/src/observer.md")]
pub mod observer {}
#[doc = include_str!("../../../book/src/control.md")]
pub mod control {}
#[doc = include_str!("../../../book/src/case_studies.md")]
pub mod case_studies {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
