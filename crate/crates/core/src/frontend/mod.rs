//! Source text and configuration parsing.

pub mod ast;
pub mod config;
pub mod lexer;
pub mod parser;
pub mod render;

use thiserror::Error;

pub use ast::*;
pub use config::{parse_config, render_config, Backend, ConfigError, Optimization, VmConfig};
pub use parser::{parse, parse_named};
pub use render::{render, render_expr, render_type};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("{line}:{col}: syntax error: expected {}, found {found}", .expected.join(" or "))]
    Syntax {
        line: u32,
        col: u32,
        offset: usize,
        expected: Vec<String>,
        found: String,
    },
    #[error("{line}:{col}: `{name}` is declared more than once")]
    DuplicateName { name: String, line: u32, col: u32 },
    #[error("{line}:{col}: invalid metadata: {message}")]
    InvalidMetadata { line: u32, col: u32, message: String },
}

impl ParseError {
    pub fn position(&self) -> (u32, u32) {
        match self {
            ParseError::Syntax { line, col, .. }
            | ParseError::DuplicateName { line, col, .. }
            | ParseError::InvalidMetadata { line, col, .. } => (*line, *col),
        }
    }
}
