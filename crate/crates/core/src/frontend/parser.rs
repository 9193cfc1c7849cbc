use std::collections::HashSet;

use super::ast::*;
use super::lexer::{tokenize, Tok, Token};
use super::ParseError;

/// Declaration keywords are contextual; only these are reserved everywhere.
const KEYWORDS: &[&str] = &["let", "true", "false"];

/// Parses one source file into a [`SourceProgram`].
pub fn parse(source: &str) -> Result<SourceProgram, ParseError> {
    parse_named(source, "<input>")
}

pub fn parse_named(source: &str, source_name: &str) -> Result<SourceProgram, ParseError> {
    let tokens = tokenize(source)?;
    let mut p = Parser { tokens, pos: 0 };
    let mut declarations = Vec::new();
    let mut seen = HashSet::new();
    while !p.at(&Tok::Eof) {
        let decl = p.declaration()?;
        if !seen.insert(decl.name.name.clone()) {
            return Err(ParseError::DuplicateName {
                name: decl.name.name.clone(),
                line: decl.name.span.line,
                col: decl.name.span.col,
            });
        }
        declarations.push(decl);
    }
    Ok(SourceProgram {
        declarations,
        source_name: source_name.to_string(),
    })
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn peek_tok_at(&self, off: usize) -> &Tok {
        let i = (self.pos + off).min(self.tokens.len() - 1);
        &self.tokens[i].tok
    }

    fn at(&self, t: &Tok) -> bool {
        &self.peek().tok == t
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == kw)
    }

    fn advance(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &[&str]) -> Result<T, ParseError> {
        let t = self.peek();
        Err(ParseError::Syntax {
            line: t.span.line,
            col: t.span.col,
            offset: t.span.start,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: t.tok.describe(),
        })
    }

    fn expect(&mut self, t: Tok) -> Result<Span, ParseError> {
        if self.at(&t) {
            Ok(self.advance().span)
        } else {
            let sym = format!("`{}`", t.symbol());
            self.fail(&[sym.as_str()])
        }
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.at(t) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Result<Ident, ParseError> {
        match &self.peek().tok {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                let name = s.clone();
                let span = self.advance().span;
                Ok(Ident { name, span })
            }
            _ => self.fail(&["identifier"]),
        }
    }

    fn declaration(&mut self) -> Result<Declaration, ParseError> {
        let start = self.peek().span;
        let kind = match &self.peek().tok {
            Tok::Ident(k) if k == "primitive" => DeclKind::Primitive,
            Tok::Ident(k) if k == "func" => DeclKind::Function,
            Tok::Ident(k) if k == "global" => DeclKind::Global,
            Tok::Ident(k) if k == "event" => DeclKind::Event,
            Tok::Ident(k) if k == "interrupt" => DeclKind::Interrupt,
            _ => return self.fail(&["`primitive`", "`func`", "`global`", "`event`", "`interrupt`"]),
        };
        self.advance();
        let name = self.ident()?;
        let mut decl = Declaration {
            kind,
            name,
            flow_in: None,
            params: Vec::new(),
            flow_out: None,
            metadata: Vec::new(),
            body: Vec::new(),
            init: None,
            span: start,
        };
        match kind {
            DeclKind::Global => {
                self.expect(Tok::Colon)?;
                decl.flow_out = Some(self.type_expr()?);
                if self.eat(&Tok::Eq) {
                    decl.init = Some(self.initializer()?);
                }
            }
            DeclKind::Primitive => {
                decl.flow_in = Some(self.flow_in(true)?);
                if self.at(&Tok::LParen) {
                    decl.params = self.param_list(true)?;
                }
                self.expect(Tok::Arrow)?;
                decl.flow_out = Some(self.type_expr()?);
                decl.metadata = self.metadata()?;
            }
            DeclKind::Function => {
                decl.flow_in = Some(self.flow_in(false)?);
                if self.at(&Tok::LParen) {
                    decl.params = self.param_list(false)?;
                }
                if self.eat(&Tok::Arrow) {
                    decl.flow_out = Some(self.type_expr()?);
                }
                let meta_span = self.peek().span;
                decl.metadata = self.metadata()?;
                if let Some(bad) = decl.metadata.first() {
                    return Err(ParseError::InvalidMetadata {
                        line: meta_span.line,
                        col: meta_span.col,
                        message: format!(
                            "functions cannot carry {} metadata; it is inherited from the primitives they call",
                            render_meta_name(bad)
                        ),
                    });
                }
                decl.body = self.block()?;
            }
            DeclKind::Event => {
                decl.flow_in = Some(self.flow_in(false)?);
                if self.eat(&Tok::Arrow) {
                    decl.flow_out = Some(self.type_expr()?);
                }
                decl.body = self.block()?;
            }
            DeclKind::Interrupt => {
                decl.flow_in = Some(self.flow_in(false)?);
                decl.body = self.block()?;
            }
        }
        let end = self.tokens[self.pos.saturating_sub(1)].span;
        decl.span = start.to(end);
        if kind == DeclKind::Primitive {
            self.check_write_targets(&decl)?;
        }
        Ok(decl)
    }

    fn check_write_targets(&self, decl: &Declaration) -> Result<(), ParseError> {
        for target in decl.write_targets() {
            let known = decl
                .flow_in
                .iter()
                .chain(decl.params.iter())
                .any(|b| b.name.name == target);
            if !known {
                return Err(ParseError::InvalidMetadata {
                    line: decl.name.span.line,
                    col: decl.name.span.col,
                    message: format!("`write {target}` does not name the flow-in object or a parameter"),
                });
            }
        }
        Ok(())
    }

    /// `(x: T)`; `()` stands for an anonymous `Void` flow-in.
    fn flow_in(&mut self, typed: bool) -> Result<Binder, ParseError> {
        let open = self.expect(Tok::LParen)?;
        if self.at(&Tok::RParen) && !typed {
            self.advance();
            return Ok(Binder {
                name: Ident::new("_", open),
                ty: Some(TypeExpr::Void),
            });
        }
        let b = self.binder(typed)?;
        self.expect(Tok::RParen)?;
        Ok(b)
    }

    fn param_list(&mut self, typed: bool) -> Result<Vec<Binder>, ParseError> {
        self.expect(Tok::LParen)?;
        let mut out = Vec::new();
        if self.eat(&Tok::RParen) {
            return Ok(out);
        }
        loop {
            out.push(self.binder(typed)?);
            if self.eat(&Tok::Comma) {
                continue;
            }
            self.expect(Tok::RParen)?;
            return Ok(out);
        }
    }

    fn binder(&mut self, typed: bool) -> Result<Binder, ParseError> {
        let name = self.ident()?;
        let ty = if typed {
            self.expect(Tok::Colon)?;
            Some(self.type_expr()?)
        } else if self.eat(&Tok::Colon) {
            Some(self.type_expr()?)
        } else {
            None
        };
        Ok(Binder { name, ty })
    }

    fn metadata(&mut self) -> Result<Vec<Metadata>, ParseError> {
        let mut out = Vec::new();
        while self.eat(&Tok::LBracket) {
            match &self.peek().tok {
                Tok::Ident(s) if s == "IO" => {
                    self.advance();
                    out.push(Metadata::Io);
                }
                Tok::Ident(s) if s == "builtin" => {
                    self.advance();
                    out.push(Metadata::Builtin);
                }
                Tok::Ident(s) if s == "write" => {
                    self.advance();
                    let target = self.ident()?;
                    out.push(Metadata::Write(target.name));
                }
                _ => return self.fail(&["`IO`", "`write`", "`builtin`"]),
            }
            self.expect(Tok::RBracket)?;
        }
        Ok(out)
    }

    fn type_expr(&mut self) -> Result<TypeExpr, ParseError> {
        let lhs = self.type_atom()?;
        if self.eat(&Tok::Arrow) {
            let rhs = self.type_expr()?;
            return Ok(TypeExpr::Arrow(Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn type_atom(&mut self) -> Result<TypeExpr, ParseError> {
        match self.peek().tok.clone() {
            Tok::TyVar(v) => {
                self.advance();
                Ok(TypeExpr::Var(v))
            }
            Tok::LParen => {
                self.advance();
                let t = self.type_expr()?;
                self.expect(Tok::RParen)?;
                Ok(t)
            }
            Tok::Ident(s) => {
                let t = match s.as_str() {
                    "Int" => TypeExpr::Int,
                    "Float" => TypeExpr::Float,
                    "Bool" => TypeExpr::Bool,
                    "Void" => TypeExpr::Void,
                    "Array" => {
                        self.advance();
                        self.expect(Tok::Lt)?;
                        let elem = self.type_expr()?;
                        self.expect(Tok::Comma)?;
                        let len = match self.peek().tok.clone() {
                            Tok::Int(n) if n > 0 => ArrayLen::Fixed(n as u32),
                            Tok::TyVar(v) => ArrayLen::Var(v),
                            _ => return self.fail(&["positive array length", "length variable"]),
                        };
                        self.advance();
                        self.expect(Tok::Gt)?;
                        return Ok(TypeExpr::Array(Box::new(elem), len));
                    }
                    _ => return self.fail(&["`Int`", "`Float`", "`Bool`", "`Void`", "`Array`", "type variable"]),
                };
                self.advance();
                Ok(t)
            }
            _ => self.fail(&["type"]),
        }
    }

    fn literal(&mut self) -> Result<Literal, ParseError> {
        let lit = match &self.peek().tok {
            Tok::Int(v) => Literal::Int(*v),
            Tok::Float(v) => Literal::Float(*v),
            Tok::Ident(s) if s == "true" => Literal::Bool(true),
            Tok::Ident(s) if s == "false" => Literal::Bool(false),
            _ => return self.fail(&["literal"]),
        };
        self.advance();
        Ok(lit)
    }

    fn initializer(&mut self) -> Result<Initializer, ParseError> {
        if self.eat(&Tok::LBracket) {
            let mut items = Vec::new();
            if !self.eat(&Tok::RBracket) {
                loop {
                    items.push(self.literal()?);
                    if self.eat(&Tok::Comma) {
                        continue;
                    }
                    self.expect(Tok::RBracket)?;
                    break;
                }
            }
            Ok(Initializer::List(items))
        } else {
            Ok(Initializer::Scalar(self.literal()?))
        }
    }

    fn block(&mut self) -> Result<Vec<Statement>, ParseError> {
        self.expect(Tok::LBrace)?;
        let mut out = Vec::new();
        loop {
            while self.eat(&Tok::Semi) {}
            if self.eat(&Tok::RBrace) {
                return Ok(out);
            }
            if self.at(&Tok::Eof) {
                return self.fail(&["statement", "`}`"]);
            }
            out.push(self.statement()?);
        }
    }

    fn statement(&mut self) -> Result<Statement, ParseError> {
        let start = self.peek().span;
        let binding = if self.at_keyword("let") {
            self.advance();
            let name = self.ident()?;
            self.expect(Tok::Eq)?;
            Some(name)
        } else {
            None
        };
        let expr = self.expr()?;
        let span = start.to(expr.span);
        Ok(Statement {
            binding,
            expr,
            span,
        })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let start = self.peek().span;
        let mut head: Option<Expr> = None;
        let mut calls = Vec::new();
        match self.peek().tok.clone() {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                if self.peek_tok_at(1) == &Tok::LParen {
                    calls.push(self.call()?);
                } else {
                    let id = self.ident()?;
                    head = Some(Expr {
                        kind: ExprKind::Var(id.name),
                        span: id.span,
                    });
                }
            }
            Tok::LParen => {
                self.advance();
                let inner = self.expr()?;
                self.expect(Tok::RParen)?;
                head = Some(inner);
            }
            Tok::Int(_) | Tok::Float(_) => {
                let span = self.peek().span;
                let lit = self.literal()?;
                head = Some(Expr {
                    kind: ExprKind::Lit(lit),
                    span,
                });
            }
            Tok::Ident(s) if s == "true" || s == "false" => {
                let span = self.peek().span;
                let lit = self.literal()?;
                head = Some(Expr {
                    kind: ExprKind::Lit(lit),
                    span,
                });
            }
            _ => return self.fail(&["expression"]),
        }
        while self.eat(&Tok::Dot) {
            calls.push(self.call()?);
        }
        let end = self.tokens[self.pos.saturating_sub(1)].span;
        if calls.is_empty() {
            return Ok(head.expect("head present when no calls"));
        }
        Ok(Expr {
            kind: ExprKind::Chain {
                head: head.map(Box::new),
                calls,
            },
            span: start.to(end),
        })
    }

    fn call(&mut self) -> Result<Call, ParseError> {
        let callee = self.ident()?;
        self.expect(Tok::LParen)?;
        let mut args = Vec::new();
        if !self.eat(&Tok::RParen) {
            loop {
                args.push(self.expr()?);
                if self.eat(&Tok::Comma) {
                    continue;
                }
                self.expect(Tok::RParen)?;
                break;
            }
        }
        let end = self.tokens[self.pos.saturating_sub(1)].span;
        let span = callee.span.to(end);
        Ok(Call { callee, args, span })
    }
}

fn render_meta_name(m: &Metadata) -> &'static str {
    match m {
        Metadata::Io => "IO",
        Metadata::Write(_) => "write",
        Metadata::Builtin => "builtin",
    }
}
