//! Typed programs to continuation IR, and the passes over it.

mod analysis;
mod container;
mod ir;
mod layout;
mod lower;
mod transform;
mod validate;

use thiserror::Error;

pub use analysis::{
    dynamic_targets, interrupt_blocks, isr_only_blocks, object_pages, points_to, undo_entries_needed, write_pages,
    write_pages_with, Loc,
};
pub use container::{decode, encode, DecodeError, MAGIC, VERSION};
pub use ir::*;
pub use layout::*;
pub use lower::{literal_bits, lower};
pub use transform::{compact, fuse_blocks, is_self_loop, loop_optimize, select_to_terminator, split_io};
pub use validate::validate;

use crate::frontend::{ConfigError, Optimization, VmConfig};
use crate::types::TypedProgram;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LowerError {
    #[error("layout overflow: {needed} bytes needed, {available} available")]
    LayoutOverflow { needed: u32, available: u32 },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("non-tail call from `{caller}` to `{callee}` may re-enter `{caller}`")]
    ReentrancyHazard { caller: String, callee: String },
    #[error("handler `{0}` is listed in the config but not declared as an event")]
    MissingHandler(String),
    #[error("event `{0}` is not listed in the config")]
    UnlistedHandler(String),
    #[error("`{0}` has too many parameters")]
    TooManyParams(String),
    #[error("invalid program: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Recomputes the undo log size after the blocks changed.
pub fn size_undo(cp: &mut ContinuationProgram) -> Result<(), LowerError> {
    let n = undo_entries_needed(cp);
    cp.layout.set_undo_entries(n)
}

/// The full pipeline: lower, split at IO, then the optimizations the
/// config enables. The validator runs after every step.
pub fn compile(p: &TypedProgram, cfg: &VmConfig) -> Result<ContinuationProgram, LowerError> {
    let cp = select_to_terminator(lower(p, cfg)?);
    validate(&cp, false)?;
    let mut cp = split_io(cp);
    validate(&cp, true)?;
    if cfg.has(Optimization::BlockFusion) {
        cp = fuse_blocks(cp, cfg);
        validate(&cp, true)?;
    }
    if cfg.has(Optimization::LoopOpt) {
        cp = loop_optimize(cp, cfg);
        validate(&cp, true)?;
    }
    size_undo(&mut cp)?;
    Ok(cp)
}
