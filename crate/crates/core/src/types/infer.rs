use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

use super::term::{Scheme, Substitution, TypeTerm, UnifyError, VarId};
use crate::catalog::PRELUDE;
use crate::frontend::{
    parse_named, ArrayLen, DeclKind, Declaration, Expr, ExprKind, Initializer, Literal, Metadata,
    SourceProgram, Span, TypeExpr,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TypeErrorKind {
    TypeMismatch,
    OccursCheck,
    UnboundName,
    NonGroundHandler,
    ArityMismatch,
    TooGeneral,
    ArrayNotFirstClass,
    AddEventOutsideInterrupt,
    HandlerSignature,
    NotCallable,
    NotAValue,
    InvalidGlobal,
    PreludeConflict,
    NonGroundIo,
    BadEventTarget,
}

impl fmt::Display for TypeErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{col}: {kind}: {message}")]
pub struct TypeError {
    pub kind: TypeErrorKind,
    pub line: u32,
    pub col: u32,
    pub message: String,
}

impl TypeError {
    fn new(kind: TypeErrorKind, span: Span, message: impl Into<String>) -> Self {
        TypeError {
            kind,
            line: span.line,
            col: span.col,
            message: message.into(),
        }
    }

    fn from_unify(e: UnifyError, span: Span, context: &str) -> Self {
        let kind = match e {
            UnifyError::Mismatch(..) => TypeErrorKind::TypeMismatch,
            UnifyError::OccursCheck(..) => TypeErrorKind::OccursCheck,
            UnifyError::Rigid(..) => TypeErrorKind::TooGeneral,
        };
        TypeError::new(kind, span, format!("{context}: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TExprKind {
    /// Input of a chain written without a head.
    Unit,
    Lit(Literal),
    Local(String),
    Global(String),
    /// A function or event handler used as a value.
    FuncRef(String),
    Call {
        callee: String,
        flow: Box<TExpr>,
        args: Vec<TExpr>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TExpr {
    pub kind: TExprKind,
    pub ty: TypeTerm,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TStmt {
    pub binding: Option<String>,
    pub expr: TExpr,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypedDecl {
    pub kind: DeclKind,
    pub name: String,
    pub span: Span,
    pub flow_in_name: String,
    pub param_names: Vec<String>,
    /// For globals only `flow_out` is meaningful.
    pub scheme: Scheme,
    pub body: Vec<TStmt>,
    pub metadata: Vec<Metadata>,
    pub init: Option<Initializer>,
    /// Declared by the user (as opposed to only by the prelude).
    pub user: bool,
}

impl TypedDecl {
    pub fn is_io(&self) -> bool {
        self.metadata.contains(&Metadata::Io)
    }

    /// Positions written by a primitive: 0 is the flow-in, `i + 1` parameter `i`.
    pub fn written_positions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for m in &self.metadata {
            if let Metadata::Write(t) = m {
                if *t == self.flow_in_name {
                    out.push(0);
                } else if let Some(i) = self.param_names.iter().position(|p| p == t) {
                    out.push(i + 1);
                }
            }
        }
        out
    }

    pub fn signature(&self) -> String {
        match self.kind {
            DeclKind::Global => format!("global {} : {}", self.name, self.scheme.flow_out),
            k => format!("{} {} : {}", k.keyword(), self.name, self.scheme.render()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypedProgram {
    pub decls: Vec<TypedDecl>,
    /// Per declaration, the externally visible objects it may modify: its own
    /// flow-in or parameter names, or global names.
    pub write_sets: BTreeMap<String, BTreeSet<String>>,
    pub source_name: String,
}

impl TypedProgram {
    pub fn get(&self, name: &str) -> Option<&TypedDecl> {
        self.decls.iter().find(|d| d.name == name)
    }

    pub fn user_decls(&self) -> impl Iterator<Item = &TypedDecl> {
        self.decls.iter().filter(|d| d.user)
    }
}

/// One line per user declaration, in source order.
pub fn signature_lines(p: &TypedProgram) -> Vec<String> {
    p.user_decls().map(|d| d.signature()).collect()
}

fn prelude() -> &'static SourceProgram {
    static P: OnceLock<SourceProgram> = OnceLock::new();
    P.get_or_init(|| parse_named(PRELUDE, "<prelude>").expect("prelude parses"))
}

pub fn infer_program(p: &SourceProgram) -> Result<TypedProgram, TypeError> {
    let merged = merge_prelude(p)?;
    let mut cx = Infer::default();
    let mut typed: Vec<Option<TypedDecl>> = vec![None; merged.len()];
    let index: HashMap<&str, usize> = merged
        .iter()
        .enumerate()
        .map(|(i, (d, _))| (d.name.name.as_str(), i))
        .collect();

    // Globals and primitives have declared types.
    for (i, (d, user)) in merged.iter().enumerate() {
        match d.kind {
            DeclKind::Global => {
                let t = cx.global_type(d)?;
                cx.globals.insert(d.name.name.clone(), t.clone());
                typed[i] = Some(TypedDecl {
                    kind: d.kind,
                    name: d.name.name.clone(),
                    span: d.span,
                    flow_in_name: String::new(),
                    param_names: Vec::new(),
                    scheme: Scheme::mono(TypeTerm::Void, Vec::new(), t),
                    body: Vec::new(),
                    metadata: Vec::new(),
                    init: d.init.clone(),
                    user: *user,
                });
            }
            DeclKind::Primitive => {
                let s = cx.declared_scheme(d);
                cx.schemes.insert(d.name.name.clone(), s.clone());
                typed[i] = Some(bare_decl(d, s, *user));
            }
            _ => {}
        }
    }

    for (i, (d, _)) in merged.iter().enumerate() {
        cx.kinds.insert(d.name.name.clone(), (d.kind, d.params.len()));
        let _ = i;
    }

    // Bodies, one strongly connected group of the reference graph at a time.
    let bodies: Vec<usize> = (0..merged.len())
        .filter(|&i| merged[i].0.kind != DeclKind::Global && merged[i].0.kind != DeclKind::Primitive)
        .collect();
    let mut edges: HashMap<usize, Vec<usize>> = HashMap::new();
    for &i in &bodies {
        let mut refs = BTreeSet::new();
        for s in &merged[i].0.body {
            collect_refs(&s.expr, &mut refs);
        }
        let targets = refs
            .iter()
            .filter_map(|n| index.get(n.as_str()).copied())
            .filter(|j| bodies.contains(j))
            .collect();
        edges.insert(i, targets);
    }
    for group in tarjan(&bodies, &edges) {
        let decls: Vec<(usize, &Declaration, bool)> =
            group.iter().map(|&i| (i, &merged[i].0, merged[i].1)).collect();
        for (i, td) in cx.infer_group(&decls)? {
            typed[i] = Some(td);
        }
    }

    let decls: Vec<TypedDecl> = typed.into_iter().map(|d| d.expect("every declaration typed")).collect();
    let write_sets = write_sets(&decls);
    Ok(TypedProgram {
        decls,
        write_sets,
        source_name: p.source_name.clone(),
    })
}

fn bare_decl(d: &Declaration, scheme: Scheme, user: bool) -> TypedDecl {
    TypedDecl {
        kind: d.kind,
        name: d.name.name.clone(),
        span: d.span,
        flow_in_name: d.flow_in.as_ref().map(|b| b.name.name.clone()).unwrap_or_default(),
        param_names: d.params.iter().map(|b| b.name.name.clone()).collect(),
        scheme,
        body: Vec::new(),
        metadata: d.metadata.clone(),
        init: None,
        user,
    }
}

/// Prelude declarations first, then user declarations. A user declaration
/// that repeats a prelude primitive must agree with it; a user `func` may
/// replace a prelude function of the same name.
fn merge_prelude(p: &SourceProgram) -> Result<Vec<(Declaration, bool)>, TypeError> {
    let mut out: Vec<(Declaration, bool)> = Vec::new();
    let mut cx = Infer::default();
    for pd in &prelude().declarations {
        match p.get(&pd.name.name) {
            None => out.push((pd.clone(), false)),
            Some(ud) => {
                let conflict = |why: &str| {
                    Err(TypeError::new(
                        TypeErrorKind::PreludeConflict,
                        ud.name.span,
                        format!("`{}` {why}", ud.name.name),
                    ))
                };
                match (pd.kind, ud.kind) {
                    (DeclKind::Primitive, DeclKind::Primitive) => {
                        let a = cx.declared_scheme(pd);
                        let b = cx.declared_scheme(ud);
                        let meta = |d: &Declaration| -> Vec<String> {
                            let mut m: Vec<String> = d
                                .metadata
                                .iter()
                                .filter(|m| **m != Metadata::Builtin)
                                .map(|m| match m {
                                    Metadata::Write(t) => {
                                        let pos = d.flow_in.iter().chain(&d.params).position(|b| b.name.name == *t);
                                        format!("write#{pos:?}")
                                    }
                                    other => format!("{other:?}"),
                                })
                                .collect();
                            m.sort();
                            m
                        };
                        if !a.alpha_eq(&b) {
                            return conflict(&format!(
                                "is a built-in primitive with signature {}, not {}",
                                a.render(),
                                b.render()
                            ));
                        }
                        if meta(pd) != meta(ud) {
                            return conflict("repeats a built-in primitive with different metadata");
                        }
                        out.push((pd.clone(), true));
                    }
                    (DeclKind::Function, DeclKind::Function) => {}
                    _ => return conflict("clashes with a built-in declaration"),
                }
            }
        }
    }
    for ud in &p.declarations {
        let replaced = out.iter().any(|(d, user)| *user && d.name.name == ud.name.name);
        if !replaced {
            out.push((ud.clone(), true));
        }
    }
    Ok(out)
}

fn collect_refs(e: &Expr, out: &mut BTreeSet<String>) {
    match &e.kind {
        ExprKind::Var(v) => {
            out.insert(v.clone());
        }
        ExprKind::Lit(_) => {}
        ExprKind::Chain { head, calls } => {
            if let Some(h) = head {
                collect_refs(h, out);
            }
            for c in calls {
                out.insert(c.callee.name.clone());
                for a in &c.args {
                    collect_refs(a, out);
                }
            }
        }
    }
}

/// Strongly connected components, dependencies before dependents.
fn tarjan(nodes: &[usize], edges: &HashMap<usize, Vec<usize>>) -> Vec<Vec<usize>> {
    struct St<'a> {
        edges: &'a HashMap<usize, Vec<usize>>,
        index: HashMap<usize, usize>,
        low: HashMap<usize, usize>,
        on: BTreeSet<usize>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }
    fn visit(s: &mut St, v: usize) {
        s.index.insert(v, s.next);
        s.low.insert(v, s.next);
        s.next += 1;
        s.stack.push(v);
        s.on.insert(v);
        for &w in s.edges.get(&v).map(|e| e.as_slice()).unwrap_or(&[]) {
            if !s.index.contains_key(&w) {
                visit(s, w);
                let lw = s.low[&w];
                let lv = s.low.get_mut(&v).unwrap();
                *lv = (*lv).min(lw);
            } else if s.on.contains(&w) {
                let iw = s.index[&w];
                let lv = s.low.get_mut(&v).unwrap();
                *lv = (*lv).min(iw);
            }
        }
        if s.low[&v] == s.index[&v] {
            let mut comp = Vec::new();
            loop {
                let w = s.stack.pop().unwrap();
                s.on.remove(&w);
                comp.push(w);
                if w == v {
                    break;
                }
            }
            comp.sort();
            s.out.push(comp);
        }
    }
    let mut s = St {
        edges,
        index: HashMap::new(),
        low: HashMap::new(),
        on: BTreeSet::new(),
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for &n in nodes {
        if !s.index.contains_key(&n) {
            visit(&mut s, n);
        }
    }
    s.out
}

#[derive(Default)]
struct Infer {
    next: VarId,
    subst: Substitution,
    rigid: BTreeSet<VarId>,
    /// Variables created by instantiating a scheme; they may not become arrays.
    instance_vars: Vec<(VarId, Span, String)>,
    schemes: HashMap<String, Scheme>,
    mono: HashMap<String, Scheme>,
    globals: HashMap<String, TypeTerm>,
    kinds: HashMap<String, (DeclKind, usize)>,
}

struct Local {
    name: String,
    ty: TypeTerm,
}

impl Infer {
    fn fresh(&mut self) -> TypeTerm {
        let v = self.next;
        self.next += 1;
        TypeTerm::Var(v)
    }

    fn convert(&mut self, te: &TypeExpr, names: &mut HashMap<String, VarId>, rigid: bool) -> TypeTerm {
        match te {
            TypeExpr::Int => TypeTerm::Int,
            TypeExpr::Float => TypeTerm::Float,
            TypeExpr::Bool => TypeTerm::Bool,
            TypeExpr::Void => TypeTerm::Void,
            TypeExpr::Var(n) => TypeTerm::Var(self.named_var(n, names, rigid)),
            TypeExpr::Arrow(a, b) => {
                let a = self.convert(a, names, rigid);
                let b = self.convert(b, names, rigid);
                TypeTerm::arrow(a, b)
            }
            TypeExpr::Array(e, len) => {
                let e = self.convert(e, names, rigid);
                let len = match len {
                    ArrayLen::Fixed(n) => TypeTerm::Nat(*n),
                    ArrayLen::Var(n) => TypeTerm::Var(self.named_var(n, names, rigid)),
                };
                TypeTerm::array(e, len)
            }
        }
    }

    fn named_var(&mut self, n: &str, names: &mut HashMap<String, VarId>, rigid: bool) -> VarId {
        if let Some(v) = names.get(n) {
            return *v;
        }
        let TypeTerm::Var(v) = self.fresh() else { unreachable!() };
        if rigid {
            self.rigid.insert(v);
        }
        names.insert(n.to_string(), v);
        v
    }

    fn declared_scheme(&mut self, d: &Declaration) -> Scheme {
        let mut names = HashMap::new();
        let fi = d
            .flow_in
            .as_ref()
            .and_then(|b| b.ty.as_ref())
            .map(|t| self.convert(t, &mut names, false))
            .unwrap_or(TypeTerm::Void);
        let params = d
            .params
            .iter()
            .map(|b| {
                b.ty.as_ref()
                    .map(|t| self.convert(t, &mut names, false))
                    .unwrap_or(TypeTerm::Void)
            })
            .collect();
        let fo = d
            .flow_out
            .as_ref()
            .map(|t| self.convert(t, &mut names, false))
            .unwrap_or(TypeTerm::Void);
        let mut vars: Vec<VarId> = names.values().copied().collect();
        vars.sort();
        Scheme {
            vars,
            flow_in: fi,
            params,
            flow_out: fo,
        }
    }

    fn global_type(&mut self, d: &Declaration) -> Result<TypeTerm, TypeError> {
        let te = d.flow_out.as_ref().expect("globals carry a type");
        let t = self.convert(te, &mut HashMap::new(), false);
        let bad = |m: String| Err(TypeError::new(TypeErrorKind::InvalidGlobal, d.name.span, m));
        if !t.is_ground() {
            return bad(format!("global `{}` must have a ground type", d.name.name));
        }
        let elem = match &t {
            TypeTerm::Arrow(..) => return bad(format!("global `{}` cannot hold a function", d.name.name)),
            TypeTerm::Array(e, _) if matches!(**e, TypeTerm::Array(..) | TypeTerm::Arrow(..)) => {
                return bad(format!("array `{}` must hold scalars", d.name.name))
            }
            TypeTerm::Array(e, _) => Some((**e).clone()),
            _ => None,
        };
        let lit_ty = |l: &Literal| match l {
            Literal::Int(_) => TypeTerm::Int,
            Literal::Float(_) => TypeTerm::Float,
            Literal::Bool(_) => TypeTerm::Bool,
        };
        match (&d.init, &elem) {
            (None, _) => {}
            (Some(Initializer::Scalar(l)), None) => {
                if lit_ty(l) != t {
                    return bad(format!("initializer of `{}` has type {}, expected {t}", d.name.name, lit_ty(l)));
                }
            }
            (Some(Initializer::List(items)), Some(e)) => {
                let TypeTerm::Array(_, n) = &t else { unreachable!() };
                let TypeTerm::Nat(n) = **n else { unreachable!() };
                if items.len() > n as usize {
                    return bad(format!("`{}` has {} initializers but length {n}", d.name.name, items.len()));
                }
                if let Some(l) = items.iter().find(|l| lit_ty(l) != *e) {
                    return bad(format!("array `{}` holds {e}, found {}", d.name.name, lit_ty(l)));
                }
            }
            (Some(Initializer::Scalar(_)), Some(_)) => {
                return bad(format!("array `{}` needs a list initializer", d.name.name))
            }
            (Some(Initializer::List(_)), None) => {
                return bad(format!("scalar `{}` cannot take a list initializer", d.name.name))
            }
        }
        Ok(t)
    }

    fn instantiate(&mut self, s: &Scheme, span: Span, callee: &str) -> Scheme {
        let mut map = BTreeMap::new();
        for v in &s.vars {
            let f = self.fresh();
            if let TypeTerm::Var(fv) = f {
                self.instance_vars.push((fv, span, callee.to_string()));
            }
            map.insert(*v, f);
        }
        let sub = |t: &TypeTerm| subst_vars(t, &map);
        Scheme {
            vars: Vec::new(),
            flow_in: sub(&s.flow_in),
            params: s.params.iter().map(sub).collect(),
            flow_out: sub(&s.flow_out),
        }
    }

    fn unify(&mut self, a: &TypeTerm, b: &TypeTerm, span: Span, ctx: &str) -> Result<(), TypeError> {
        let rigid = std::mem::take(&mut self.rigid);
        let r = self.subst.unify_with(a, b, &rigid);
        self.rigid = rigid;
        r.map_err(|e| TypeError::from_unify(e, span, ctx))
    }

    fn signature_of(&mut self, name: &str, span: Span) -> Option<Scheme> {
        if let Some(m) = self.mono.get(name) {
            return Some(m.clone());
        }
        let s = self.schemes.get(name)?.clone();
        Some(self.instantiate(&s, span, name))
    }

    fn infer_group(&mut self, group: &[(usize, &Declaration, bool)]) -> Result<Vec<(usize, TypedDecl)>, TypeError> {
        self.instance_vars.clear();
        let mut sigs = Vec::new();
        for (_, d, _) in group {
            let mut names = HashMap::new();
            let mut ann = |cx: &mut Infer, t: Option<&TypeExpr>| match t {
                Some(t) => cx.convert(t, &mut names, true),
                None => cx.fresh(),
            };
            let fi = ann(self, d.flow_in.as_ref().and_then(|b| b.ty.as_ref()));
            let params: Vec<TypeTerm> = d.params.iter().map(|b| ann(self, b.ty.as_ref())).collect();
            let fo = match (d.kind, &d.flow_out) {
                (_, Some(t)) => ann(self, Some(t)),
                (DeclKind::Function, None) => self.fresh(),
                _ => TypeTerm::Void,
            };
            if matches!(d.kind, DeclKind::Event | DeclKind::Interrupt) && fo != TypeTerm::Void {
                return Err(TypeError::new(
                    TypeErrorKind::HandlerSignature,
                    d.name.span,
                    format!("handler `{}` must return Void", d.name.name),
                ));
            }
            let s = Scheme::mono(fi, params, fo);
            self.mono.insert(d.name.name.clone(), s.clone());
            sigs.push(s);
        }

        let mut bodies = Vec::new();
        for ((_, d, _), sig) in group.iter().zip(&sigs) {
            let mut locals = Vec::new();
            if let Some(b) = &d.flow_in {
                locals.push(Local {
                    name: b.name.name.clone(),
                    ty: sig.flow_in.clone(),
                });
            }
            for (b, t) in d.params.iter().zip(&sig.params) {
                locals.push(Local {
                    name: b.name.name.clone(),
                    ty: t.clone(),
                });
            }
            let mut body = Vec::new();
            let mut last = TypeTerm::Void;
            for s in &d.body {
                let e = self.expr(&s.expr, &mut locals, d)?;
                last = e.ty.clone();
                if let Some(b) = &s.binding {
                    locals.push(Local {
                        name: b.name.clone(),
                        ty: e.ty.clone(),
                    });
                }
                body.push(TStmt {
                    binding: s.binding.as_ref().map(|b| b.name.clone()),
                    expr: e,
                    span: s.span,
                });
            }
            let span = d.body.last().map(|s| s.span).unwrap_or(d.name.span);
            self.unify(&last, &sig.flow_out, span, &format!("result of `{}`", d.name.name))?;
            bodies.push(body);
        }

        for (v, span, callee) in &self.instance_vars {
            let t = self.subst.apply(&TypeTerm::Var(*v));
            if t.is_array() {
                return Err(TypeError::new(
                    TypeErrorKind::ArrayNotFirstClass,
                    *span,
                    format!("`{callee}` cannot be used generically at an array type {t}"),
                ));
            }
        }

        let mut out = Vec::new();
        for (((i, d, user), sig), body) in group.iter().zip(&sigs).zip(bodies) {
            let sig = Scheme {
                vars: Vec::new(),
                flow_in: self.subst.apply(&sig.flow_in),
                params: sig.params.iter().map(|p| self.subst.apply(p)).collect(),
                flow_out: self.subst.apply(&sig.flow_out),
            };
            if matches!(d.kind, DeclKind::Event | DeclKind::Interrupt) && !sig.flow_in.is_ground() {
                return Err(TypeError::new(
                    TypeErrorKind::NonGroundHandler,
                    d.name.span,
                    format!("handler `{}` has non-ground flow-in type {}", d.name.name, sig.render()),
                ));
            }
            if matches!(d.kind, DeclKind::Event | DeclKind::Interrupt) && sig.flow_in.is_array() {
                return Err(TypeError::new(
                    TypeErrorKind::HandlerSignature,
                    d.name.span,
                    format!("handler `{}` cannot take an array", d.name.name),
                ));
            }
            let body: Vec<TStmt> = body
                .into_iter()
                .map(|s| TStmt {
                    binding: s.binding,
                    expr: self.finish(s.expr),
                    span: s.span,
                })
                .collect();
            for s in &body {
                check_io_ground(&s.expr)?;
            }
            let mut fv = BTreeSet::new();
            sig.flow_in.free_vars(&mut fv);
            for p in &sig.params {
                p.free_vars(&mut fv);
            }
            sig.flow_out.free_vars(&mut fv);
            let scheme = Scheme {
                vars: fv.into_iter().collect(),
                ..sig
            };
            let mut td = bare_decl(d, scheme.clone(), *user);
            td.body = body;
            out.push((*i, td));
        }
        for (i, td) in &out {
            let _ = i;
            self.mono.remove(&td.name);
            self.schemes.insert(td.name.clone(), td.scheme.clone());
        }
        Ok(out)
    }

    fn finish(&self, e: TExpr) -> TExpr {
        let ty = self.subst.apply(&e.ty);
        let kind = match e.kind {
            TExprKind::Call { callee, flow, args } => TExprKind::Call {
                callee,
                flow: Box::new(self.finish(*flow)),
                args: args.into_iter().map(|a| self.finish(a)).collect(),
            },
            k => k,
        };
        TExpr { kind, ty, span: e.span }
    }

    fn expr(&mut self, e: &Expr, locals: &mut Vec<Local>, d: &Declaration) -> Result<TExpr, TypeError> {
        match &e.kind {
            ExprKind::Lit(l) => Ok(TExpr {
                kind: TExprKind::Lit(l.clone()),
                ty: match l {
                    Literal::Int(_) => TypeTerm::Int,
                    Literal::Float(_) => TypeTerm::Float,
                    Literal::Bool(_) => TypeTerm::Bool,
                },
                span: e.span,
            }),
            ExprKind::Var(v) => self.var(v, e.span, locals),
            ExprKind::Chain { head, calls } => {
                let mut cur = match head {
                    Some(h) => self.expr(h, locals, d)?,
                    None => TExpr {
                        kind: TExprKind::Unit,
                        ty: TypeTerm::Void,
                        span: e.span,
                    },
                };
                for c in calls {
                    let name = &c.callee.name;
                    if locals.iter().any(|l| l.name == *name) {
                        return Err(TypeError::new(
                            TypeErrorKind::NotCallable,
                            c.callee.span,
                            format!("`{name}` is a local object; call it with `apply`"),
                        ));
                    }
                    match self.kinds.get(name) {
                        Some((DeclKind::Primitive | DeclKind::Function, _)) => {}
                        Some((k, _)) => {
                            return Err(TypeError::new(
                                TypeErrorKind::NotCallable,
                                c.callee.span,
                                format!("{} `{name}` cannot be called", k.keyword()),
                            ))
                        }
                        None => {
                            return Err(TypeError::new(
                                TypeErrorKind::UnboundName,
                                c.callee.span,
                                format!("unknown function `{name}`"),
                            ))
                        }
                    }
                    if name == "addEventQ" && d.kind != DeclKind::Interrupt {
                        return Err(TypeError::new(
                            TypeErrorKind::AddEventOutsideInterrupt,
                            c.callee.span,
                            "`addEventQ` may only be called from an interrupt handler",
                        ));
                    }
                    let sig = self.signature_of(name, c.callee.span).expect("callable has a signature");
                    if sig.params.len() != c.args.len() {
                        return Err(TypeError::new(
                            TypeErrorKind::ArityMismatch,
                            c.span,
                            format!("`{name}` takes {} parameter(s), {} given", sig.params.len(), c.args.len()),
                        ));
                    }
                    self.unify(&cur.ty, &sig.flow_in, c.callee.span, &format!("flow-in of `{name}`"))?;
                    let mut args = Vec::new();
                    for (i, (a, pt)) in c.args.iter().zip(&sig.params).enumerate() {
                        let ta = self.expr(a, locals, d)?;
                        self.unify(&ta.ty, pt, a.span, &format!("argument {} of `{name}`", i + 1))?;
                        args.push(ta);
                    }
                    if name == "addEventQ" {
                        let ok = matches!(&args[0].kind, TExprKind::FuncRef(h)
                            if matches!(self.kinds.get(h), Some((DeclKind::Event, _))));
                        if !ok {
                            return Err(TypeError::new(
                                TypeErrorKind::BadEventTarget,
                                c.args[0].span,
                                "`addEventQ` needs the name of an event handler",
                            ));
                        }
                    }
                    let span = cur.span.to(c.span);
                    cur = TExpr {
                        kind: TExprKind::Call {
                            callee: name.clone(),
                            flow: Box::new(cur),
                            args,
                        },
                        ty: sig.flow_out.clone(),
                        span,
                    };
                }
                Ok(cur)
            }
        }
    }

    fn var(&mut self, v: &str, span: Span, locals: &[Local]) -> Result<TExpr, TypeError> {
        if let Some(l) = locals.iter().rev().find(|l| l.name == v) {
            return Ok(TExpr {
                kind: TExprKind::Local(v.to_string()),
                ty: l.ty.clone(),
                span,
            });
        }
        if let Some(t) = self.globals.get(v) {
            return Ok(TExpr {
                kind: TExprKind::Global(v.to_string()),
                ty: t.clone(),
                span,
            });
        }
        match self.kinds.get(v).copied() {
            Some((DeclKind::Function | DeclKind::Event, 0)) => {
                let s = self.signature_of(v, span).expect("declared");
                Ok(TExpr {
                    kind: TExprKind::FuncRef(v.to_string()),
                    ty: TypeTerm::arrow(s.flow_in, s.flow_out),
                    span,
                })
            }
            Some((DeclKind::Function, n)) => Err(TypeError::new(
                TypeErrorKind::NotAValue,
                span,
                format!("`{v}` takes {n} parameter(s) and cannot be used as a value"),
            )),
            Some((k, _)) => Err(TypeError::new(
                TypeErrorKind::NotAValue,
                span,
                format!("{} `{v}` cannot be used as a value", k.keyword()),
            )),
            None => Err(TypeError::new(TypeErrorKind::UnboundName, span, format!("unbound name `{v}`"))),
        }
    }
}

fn check_io_ground(e: &TExpr) -> Result<(), TypeError> {
    if let TExprKind::Call { callee, flow, args } = &e.kind {
        if callee == "emit" && !flow.ty.is_ground() {
            return Err(TypeError::new(
                TypeErrorKind::NonGroundIo,
                e.span,
                format!("`emit` needs a ground type, found {}", flow.ty),
            ));
        }
        check_io_ground(flow)?;
        for a in args {
            check_io_ground(a)?;
        }
    }
    Ok(())
}

fn subst_vars(t: &TypeTerm, map: &BTreeMap<VarId, TypeTerm>) -> TypeTerm {
    match t {
        TypeTerm::Var(v) => map.get(v).cloned().unwrap_or_else(|| t.clone()),
        TypeTerm::Arrow(a, b) => TypeTerm::arrow(subst_vars(a, map), subst_vars(b, map)),
        TypeTerm::Array(a, b) => TypeTerm::array(subst_vars(a, map), subst_vars(b, map)),
        _ => t.clone(),
    }
}

/// What an argument expression refers to when it is written through.
fn write_root(e: &TExpr, aliases: &HashMap<String, Option<String>>) -> Option<String> {
    match &e.kind {
        TExprKind::Local(n) => match aliases.get(n) {
            Some(a) => a.clone(),
            None => Some(n.clone()),
        },
        TExprKind::Global(g) => Some(g.clone()),
        TExprKind::Call { callee, flow, .. } if callee == "setAt" => write_root(flow, aliases),
        _ => None,
    }
}

fn write_sets(decls: &[TypedDecl]) -> BTreeMap<String, BTreeSet<String>> {
    let by_name: HashMap<&str, &TypedDecl> = decls.iter().map(|d| (d.name.as_str(), d)).collect();
    let mut ws: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for d in decls {
        let mut set = BTreeSet::new();
        if d.kind == DeclKind::Primitive {
            for m in &d.metadata {
                if let Metadata::Write(t) = m {
                    set.insert(t.clone());
                }
            }
        }
        ws.insert(d.name.clone(), set);
    }
    loop {
        let mut changed = false;
        for d in decls.iter().filter(|d| !d.body.is_empty()) {
            let mut own: BTreeSet<&str> = d.param_names.iter().map(|s| s.as_str()).collect();
            own.insert(&d.flow_in_name);
            let mut aliases: HashMap<String, Option<String>> = HashMap::new();
            let mut found = BTreeSet::new();
            for s in &d.body {
                visit_calls(&s.expr, &mut |callee, flow, args| {
                    let Some(cd) = by_name.get(callee) else { return };
                    let Some(cw) = ws.get(callee) else { return };
                    let positions: Vec<usize> = if cd.kind == DeclKind::Primitive {
                        cd.written_positions()
                    } else {
                        cw.iter()
                            .filter_map(|n| {
                                if *n == cd.flow_in_name {
                                    Some(0)
                                } else {
                                    cd.param_names.iter().position(|p| p == n).map(|i| i + 1)
                                }
                            })
                            .collect()
                    };
                    if cd.kind != DeclKind::Primitive {
                        for n in cw.iter() {
                            if n != &cd.flow_in_name && !cd.param_names.contains(n) {
                                found.insert(n.clone());
                            }
                        }
                    }
                    for p in positions {
                        let e = if p == 0 { flow } else { &args[p - 1] };
                        if let Some(r) = write_root(e, &aliases) {
                            found.insert(r);
                        }
                    }
                });
                if let Some(b) = &s.binding {
                    let a = match &s.expr.kind {
                        TExprKind::Local(_) | TExprKind::Global(_) => write_root(&s.expr, &aliases),
                        _ => None,
                    };
                    aliases.insert(b.clone(), a);
                }
            }
            let visible: BTreeSet<String> = found
                .into_iter()
                .filter(|n| own.contains(n.as_str()) || by_name.get(n.as_str()).is_some_and(|g| g.kind == DeclKind::Global))
                .collect();
            let entry = ws.get_mut(&d.name).unwrap();
            for n in visible {
                changed |= entry.insert(n);
            }
        }
        if !changed {
            return ws;
        }
    }
}

fn visit_calls(e: &TExpr, f: &mut dyn FnMut(&str, &TExpr, &[TExpr])) {
    if let TExprKind::Call { callee, flow, args } = &e.kind {
        visit_calls(flow, f);
        for a in args {
            visit_calls(a, f);
        }
        f(callee, flow, args);
    }
}
