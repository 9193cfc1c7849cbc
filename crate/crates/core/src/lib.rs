//! Compiler and simulated intermittent runtime for a continuation-passing,
//! event-driven language.

pub mod bench;
pub mod catalog;
pub mod frontend;
pub mod lowering;
pub mod nvm;
pub mod powersim;
pub mod types;
pub mod vm;

use thiserror::Error;

use frontend::{ParseError, VmConfig};
use lowering::{ContinuationProgram, LowerError};
use types::TypeError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error("{0}")]
    Parse(#[from] ParseError),
    #[error("{0}")]
    Type(#[from] TypeError),
    #[error("{0}")]
    Lower(#[from] LowerError),
}

/// Parses, type checks and lowers one source file.
pub fn compile_source(source: &str, name: &str, cfg: &VmConfig) -> Result<ContinuationProgram, BuildError> {
    let ast = frontend::parse_named(source, name)?;
    let typed = types::infer_program(&ast)?;
    Ok(lowering::compile(&typed, cfg)?)
}
