//! Raw syntax tree produced by the parser.

use std::fmt;

/// Byte range plus line/column of the first byte.
///
/// Spans never participate in equality: two trees that differ only in
/// where they came from compare equal.
#[derive(Debug, Clone, Copy, Default)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub line: u32,
    pub col: u32,
}

impl PartialEq for Span {
    fn eq(&self, _: &Span) -> bool {
        true
    }
}

impl Eq for Span {}

impl Span {
    pub fn to(self, other: Span) -> Span {
        Span {
            start: self.start,
            end: other.end.max(self.end),
            line: self.line,
            col: self.col,
        }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ident {
    pub name: String,
    pub span: Span,
}

impl Ident {
    pub fn new(name: impl Into<String>, span: Span) -> Self {
        Ident {
            name: name.into(),
            span,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TypeExpr {
    Int,
    Float,
    Bool,
    Void,
    /// `%a`, stored without the sigil.
    Var(String),
    Arrow(Box<TypeExpr>, Box<TypeExpr>),
    Array(Box<TypeExpr>, ArrayLen),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArrayLen {
    Fixed(u32),
    Var(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Binder {
    pub name: Ident,
    pub ty: Option<TypeExpr>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metadata {
    Io,
    Write(String),
    Builtin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DeclKind {
    Primitive,
    Function,
    Global,
    Event,
    Interrupt,
}

impl DeclKind {
    pub fn keyword(self) -> &'static str {
        match self {
            DeclKind::Primitive => "primitive",
            DeclKind::Function => "func",
            DeclKind::Global => "global",
            DeclKind::Event => "event",
            DeclKind::Interrupt => "interrupt",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Int(i32),
    Float(f32),
    Bool(bool),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Initializer {
    Scalar(Literal),
    List(Vec<Literal>),
}

/// One top-level declaration.
///
/// Globals reuse `flow_out` for their declared type and leave `flow_in`
/// empty. Event and interrupt handlers have no parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Declaration {
    pub kind: DeclKind,
    pub name: Ident,
    pub flow_in: Option<Binder>,
    pub params: Vec<Binder>,
    pub flow_out: Option<TypeExpr>,
    pub metadata: Vec<Metadata>,
    pub body: Vec<Statement>,
    pub init: Option<Initializer>,
    pub span: Span,
}

impl Declaration {
    pub fn is_io(&self) -> bool {
        self.metadata.contains(&Metadata::Io)
    }

    pub fn is_builtin(&self) -> bool {
        self.metadata.contains(&Metadata::Builtin)
    }

    pub fn write_targets(&self) -> impl Iterator<Item = &str> {
        self.metadata.iter().filter_map(|m| match m {
            Metadata::Write(n) => Some(n.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Statement {
    pub binding: Option<Ident>,
    pub expr: Expr,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Var(String),
    Lit(Literal),
    /// `head.c1(..).c2(..)`; a missing head pipes `Void` into the first call.
    /// `calls` is never empty.
    Chain {
        head: Option<Box<Expr>>,
        calls: Vec<Call>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub callee: Ident,
    pub args: Vec<Expr>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SourceProgram {
    pub declarations: Vec<Declaration>,
    pub source_name: String,
}

impl SourceProgram {
    pub fn get(&self, name: &str) -> Option<&Declaration> {
        self.declarations.iter().find(|d| d.name.name == name)
    }
}
