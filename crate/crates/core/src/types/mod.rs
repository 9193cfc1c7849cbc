//! Type inference for parsed programs.

mod infer;
pub mod term;

pub use infer::{
    infer_program, signature_lines, TExpr, TExprKind, TStmt, TypeError, TypeErrorKind, TypedDecl,
    TypedProgram,
};
pub use term::{unify, Scheme, Substitution, TypeTerm, UnifyError, VarId};
