//! Pretty-printer; `parse(render(p))` reproduces `p`.

use std::fmt::Write;

use super::ast::*;

pub fn render(program: &SourceProgram) -> String {
    let mut out = String::new();
    for (i, d) in program.declarations.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        render_decl(&mut out, d);
    }
    out
}

pub fn render_type(t: &TypeExpr) -> String {
    match t {
        TypeExpr::Int => "Int".into(),
        TypeExpr::Float => "Float".into(),
        TypeExpr::Bool => "Bool".into(),
        TypeExpr::Void => "Void".into(),
        TypeExpr::Var(v) => format!("%{v}"),
        TypeExpr::Arrow(a, b) => {
            let lhs = render_type(a);
            if matches!(**a, TypeExpr::Arrow(..)) {
                format!("({lhs}) -> {}", render_type(b))
            } else {
                format!("{lhs} -> {}", render_type(b))
            }
        }
        TypeExpr::Array(e, len) => {
            let len = match len {
                ArrayLen::Fixed(n) => n.to_string(),
                ArrayLen::Var(v) => format!("%{v}"),
            };
            format!("Array<{}, {len}>", render_type(e))
        }
    }
}

pub fn render_literal(l: &Literal) -> String {
    match l {
        Literal::Int(v) => v.to_string(),
        Literal::Float(v) => format!("{v:?}"),
        Literal::Bool(b) => b.to_string(),
    }
}

fn render_binder(b: &Binder) -> String {
    match &b.ty {
        Some(t) => format!("{}: {}", b.name.name, render_type(t)),
        None => b.name.name.clone(),
    }
}

fn render_decl(out: &mut String, d: &Declaration) {
    let _ = write!(out, "{} {}", d.kind.keyword(), d.name.name);
    if d.kind == DeclKind::Global {
        if let Some(t) = &d.flow_out {
            let _ = write!(out, ": {}", render_type(t));
        }
        match &d.init {
            Some(Initializer::Scalar(l)) => {
                let _ = write!(out, " = {}", render_literal(l));
            }
            Some(Initializer::List(items)) => {
                let items: Vec<_> = items.iter().map(render_literal).collect();
                let _ = write!(out, " = [{}]", items.join(", "));
            }
            None => {}
        }
        out.push('\n');
        return;
    }
    match &d.flow_in {
        Some(fi) => {
            let _ = write!(out, "({})", render_binder(fi));
        }
        None => out.push_str("()"),
    }
    if !d.params.is_empty() {
        let ps: Vec<_> = d.params.iter().map(render_binder).collect();
        let _ = write!(out, "({})", ps.join(", "));
    }
    if let Some(t) = &d.flow_out {
        let _ = write!(out, " -> {}", render_type(t));
    }
    for m in &d.metadata {
        match m {
            Metadata::Io => out.push_str(" [IO]"),
            Metadata::Builtin => out.push_str(" [builtin]"),
            Metadata::Write(n) => {
                let _ = write!(out, " [write {n}]");
            }
        }
    }
    if d.kind == DeclKind::Primitive {
        out.push('\n');
        return;
    }
    out.push_str(" {\n");
    for s in &d.body {
        out.push_str("    ");
        if let Some(b) = &s.binding {
            let _ = write!(out, "let {} = ", b.name);
        }
        out.push_str(&render_expr(&s.expr));
        out.push('\n');
    }
    out.push_str("}\n");
}

pub fn render_expr(e: &Expr) -> String {
    match &e.kind {
        ExprKind::Var(v) => v.clone(),
        ExprKind::Lit(l) => render_literal(l),
        ExprKind::Chain { head, calls } => {
            let mut s = String::new();
            if let Some(h) = head {
                if matches!(h.kind, ExprKind::Chain { .. }) {
                    let _ = write!(s, "({})", render_expr(h));
                } else {
                    s.push_str(&render_expr(h));
                }
            }
            for (i, c) in calls.iter().enumerate() {
                if i > 0 || head.is_some() {
                    s.push('.');
                }
                let args: Vec<_> = c.args.iter().map(render_expr).collect();
                let _ = write!(s, "{}({})", c.callee.name, args.join(", "));
            }
            s
        }
    }
}
