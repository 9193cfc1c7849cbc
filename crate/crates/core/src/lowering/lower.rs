//! Typed declarations to continuation blocks.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use super::ir::*;
use super::layout::{Layout, VALUE_BYTES};
use super::LowerError;
use crate::catalog::Prim;
use crate::frontend::{DeclKind, Initializer, Literal, VmConfig};
use crate::types::{TExpr, TExprKind, TypeTerm, TypedDecl, TypedProgram};

pub fn literal_bits(l: &Literal) -> u32 {
    match l {
        Literal::Int(i) => *i as u32,
        Literal::Float(f) => f.to_bits(),
        Literal::Bool(b) => *b as u32,
    }
}

fn literal_kind(l: &Literal) -> ValueKind {
    match l {
        Literal::Int(_) => ValueKind::Int,
        Literal::Float(_) => ValueKind::Float,
        Literal::Bool(_) => ValueKind::Bool,
    }
}

/// Call-graph facts gathered before lowering so staging and re-entrancy
/// decisions can see the whole program.
#[derive(Default)]
struct Graph {
    callees: BTreeMap<String, BTreeSet<String>>,
    dynamic: BTreeSet<String>,
    escaping: BTreeSet<String>,
}

impl Graph {
    fn targets(&self, f: &str) -> BTreeSet<String> {
        let mut out = self.callees.get(f).cloned().unwrap_or_default();
        if self.dynamic.contains(f) {
            out.extend(self.escaping.iter().cloned());
        }
        out
    }

    /// `g` and everything it may call.
    fn reach(&self, g: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut work = vec![g.to_string()];
        while let Some(f) = work.pop() {
            if seen.insert(f.clone()) {
                work.extend(self.targets(&f));
            }
        }
        seen
    }
}

fn is_static_ifelse(p: &TypedProgram, callee: &str, args: &[TExpr]) -> bool {
    callee == "ifElse"
        && p.get("ifElse").is_some_and(|d| !d.user)
        && args.len() == 3
        && args.iter().all(|a| matches!(a.kind, TExprKind::FuncRef(_)))
}

/// `cond.select(F, G)` with both arms named functions, as applied by
/// `x.apply(cond.select(F, G))`.
fn static_choice<'e>(p: &TypedProgram, arg: &'e TExpr) -> Option<(&'e TExpr, String, String)> {
    let TExprKind::Call { callee, flow, args } = &arg.kind else { return None };
    if callee != "select" || !p.get("select").is_some_and(|d| d.kind == DeclKind::Primitive) {
        return None;
    }
    match (&args[0].kind, &args[1].kind) {
        (TExprKind::FuncRef(t), TExprKind::FuncRef(f)) => Some((flow, t.clone(), f.clone())),
        _ => None,
    }
}

fn scan(p: &TypedProgram, e: &TExpr, g: &mut Graph, me: &str, needed: &mut Vec<String>) {
    match &e.kind {
        TExprKind::FuncRef(f) => {
            g.escaping.insert(f.clone());
            needed.push(f.clone());
        }
        TExprKind::Call { callee, flow, args } => {
            scan(p, flow, g, me, needed);
            let decl = p.get(callee);
            let prim = decl.is_some_and(|d| d.kind == DeclKind::Primitive);
            let direct = |f: &str, g: &mut Graph, needed: &mut Vec<String>| {
                g.callees.entry(me.to_string()).or_default().insert(f.to_string());
                needed.push(f.to_string());
            };
            if prim && callee == "apply" {
                if let TExprKind::FuncRef(f) = &args[0].kind {
                    direct(f, g, needed);
                } else if let Some((cond, t, f)) = static_choice(p, &args[0]) {
                    scan(p, cond, g, me, needed);
                    direct(&t, g, needed);
                    direct(&f, g, needed);
                } else {
                    g.dynamic.insert(me.to_string());
                    scan(p, &args[0], g, me, needed);
                }
            } else if prim && callee == "addEventQ" {
                if let TExprKind::FuncRef(f) = &args[0].kind {
                    needed.push(f.clone());
                } else {
                    scan(p, &args[0], g, me, needed);
                }
            } else if is_static_ifelse(p, callee, args) {
                for a in args {
                    if let TExprKind::FuncRef(f) = &a.kind {
                        direct(f, g, needed);
                    }
                }
            } else {
                if !prim {
                    direct(callee, g, needed);
                }
                for a in args {
                    scan(p, a, g, me, needed);
                }
            }
        }
        _ => {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Val {
    In,
    Param(usize),
    Slot(SlotId),
}

struct FnCx {
    name: String,
    nparams: usize,
    in_rest: bool,
    locals: HashMap<String, Val>,
    block: BlockId,
    calls: Vec<PrimitiveCall>,
    parts: usize,
}

impl FnCx {
    fn op(&self, v: Val) -> Operand {
        match (v, self.in_rest) {
            (Val::Slot(s), _) => Operand::Slot(s),
            (Val::In, false) => Operand::FlowIn,
            (Val::In, true) => Operand::Param(0),
            (Val::Param(i), false) => Operand::Param(i as u8),
            (Val::Param(i), true) => Operand::Param(i as u8 + 1),
        }
    }

    fn frame_params(&self) -> u8 {
        if self.in_rest {
            self.nparams as u8 + 1
        } else {
            self.nparams as u8
        }
    }

    fn rest_params(&self) -> Vec<Operand> {
        std::iter::once(self.op(Val::In))
            .chain((0..self.nparams).map(|i| self.op(Val::Param(i))))
            .collect()
    }
}

enum Callee {
    Static(String),
    Dynamic(Val),
}

struct Lowerer<'a> {
    p: &'a TypedProgram,
    graph: Graph,
    blocks: Vec<Option<BasicBlock>>,
    slots: Vec<SlotInfo>,
    consts: Vec<(SlotId, ConstValue)>,
    const_pool: HashMap<(ValueKind, u32), SlotId>,
    func_consts: HashMap<String, SlotId>,
    globals: Vec<GlobalInfo>,
    entry: BTreeMap<String, BlockId>,
    pending: VecDeque<String>,
    void_slot: Option<SlotId>,
}

impl<'a> Lowerer<'a> {
    fn new_slot(&mut self, role: SlotRole, kind: ValueKind) -> SlotId {
        self.slots.push(SlotInfo { role, kind, addr: 0 });
        (self.slots.len() - 1) as SlotId
    }

    fn temp(&mut self, cx: &FnCx, ty: &TypeTerm) -> SlotId {
        self.new_slot(SlotRole::Temp(cx.name.clone()), ValueKind::of(ty))
    }

    fn constant(&mut self, kind: ValueKind, bits: u32) -> SlotId {
        if let Some(s) = self.const_pool.get(&(kind, bits)) {
            return *s;
        }
        let s = self.new_slot(SlotRole::Const, kind);
        self.consts.push((s, ConstValue::Word(bits)));
        self.const_pool.insert((kind, bits), s);
        s
    }

    fn void(&mut self) -> SlotId {
        if let Some(s) = self.void_slot {
            return s;
        }
        let s = self.constant(ValueKind::Void, 0);
        self.void_slot = Some(s);
        s
    }

    fn func_const(&mut self, name: &str) -> SlotId {
        if let Some(s) = self.func_consts.get(name) {
            return *s;
        }
        let b = self.entry_of(name);
        let s = self.new_slot(SlotRole::Const, ValueKind::Func);
        self.consts.push((s, ConstValue::Func(b)));
        self.func_consts.insert(name.to_string(), s);
        s
    }

    fn new_block(&mut self) -> BlockId {
        self.blocks.push(None);
        (self.blocks.len() - 1) as BlockId
    }

    fn entry_of(&mut self, name: &str) -> BlockId {
        if let Some(b) = self.entry.get(name) {
            return *b;
        }
        let b = self.new_block();
        self.entry.insert(name.to_string(), b);
        self.pending.push_back(name.to_string());
        b
    }

    fn decl(&self, name: &str) -> &'a TypedDecl {
        self.p.get(name).expect("typed program refers to declared names")
    }

    fn finish(&mut self, cx: &mut FnCx, terminator: Terminator) {
        let calls = std::mem::take(&mut cx.calls);
        let b = BasicBlock {
            id: cx.block,
            name: format!("{}.{}", cx.name, cx.parts),
            function: cx.name.clone(),
            calls,
            terminator,
            frame_params: cx.frame_params(),
            loop_unroll: 0,
        };
        self.blocks[cx.block as usize] = Some(b);
        cx.parts += 1;
    }

    fn copy(&mut self, cx: &mut FnCx, from: Operand, to: Operand, kind: ValueKind) {
        cx.calls.push(PrimitiveCall {
            prim: Prim::Id,
            flow_in: from,
            params: vec![],
            result: Some(to),
            writes: vec![],
            is_io: false,
            kinds: vec![kind, kind],
        });
    }

    /// Ends the current block with `push` beneath which the rest of the
    /// function continues, then opens the rest block. Returns the slot
    /// holding the callee's result.
    fn continue_after(
        &mut self,
        cx: &mut FnCx,
        make: impl FnOnce(Template) -> Terminator,
        ty: &TypeTerm,
    ) -> Val {
        let rest = self.new_block();
        let tmpl = Template {
            target: Target::Block(rest),
            flow_in: Operand::Flow,
            params: cx.rest_params(),
        };
        let term = make(tmpl);
        self.finish(cx, term);
        cx.block = rest;
        cx.in_rest = true;
        let t = self.temp(cx, ty);
        self.copy(cx, Operand::FlowIn, Operand::Slot(t), ValueKind::of(ty));
        Val::Slot(t)
    }

    fn check_reentry(&self, caller: &str, callee: &Callee) -> Result<(), LowerError> {
        let targets: Vec<String> = match callee {
            Callee::Static(g) => vec![g.clone()],
            Callee::Dynamic(_) => self.graph.escaping.iter().cloned().collect(),
        };
        for g in targets {
            if self.graph.reach(&g).contains(caller) {
                return Err(LowerError::ReentrancyHazard {
                    caller: caller.to_string(),
                    callee: g,
                });
            }
        }
        Ok(())
    }

    fn may_reenter(&self, caller: &str, target: &Target) -> bool {
        match target {
            Target::Block(b) => {
                let name = self.entry.iter().find(|(_, x)| *x == b).map(|(n, _)| n.clone());
                name.is_some_and(|n| self.graph.reach(&n).contains(caller))
            }
            Target::Dynamic(_) => self
                .graph
                .escaping
                .iter()
                .any(|g| self.graph.reach(g).contains(caller)),
        }
    }

    /// Copies this function's temporaries passed to a continuation that may
    /// re-enter the function into call-site slots, in two phases so no copy
    /// reads a slot another copy already overwrote.
    fn stage(&mut self, cx: &mut FnCx, templates: &mut [&mut Template]) {
        let mut moves = Vec::new();
        for t in templates.iter_mut() {
            if !self.may_reenter(&cx.name, &t.target) {
                continue;
            }
            for op in std::iter::once(&mut t.flow_in).chain(t.params.iter_mut()) {
                let Operand::Slot(s) = *op else { continue };
                if self.slots[s as usize].role != SlotRole::Temp(cx.name.clone()) {
                    continue;
                }
                let kind = self.slots[s as usize].kind;
                let role = SlotRole::Temp(format!("{}'", cx.name));
                let stage = self.new_slot(role.clone(), kind);
                let out = self.new_slot(role, kind);
                moves.push((s, stage, out, kind));
                *op = Operand::Slot(out);
            }
        }
        for (s, stage, _, kind) in &moves {
            self.copy(cx, Operand::Slot(*s), Operand::Slot(*stage), *kind);
        }
        for (_, stage, out, kind) in &moves {
            self.copy(cx, Operand::Slot(*stage), Operand::Slot(*out), *kind);
        }
    }

    fn call(
        &mut self,
        cx: &mut FnCx,
        callee: Callee,
        flow: Val,
        args: Vec<Val>,
        tail: bool,
        ty: &TypeTerm,
    ) -> Result<Option<Val>, LowerError> {
        let target = match &callee {
            Callee::Static(g) => Target::Block(self.entry_of(g)),
            Callee::Dynamic(v) => Target::Dynamic(cx.op(*v)),
        };
        let mut tmpl = Template {
            target,
            flow_in: cx.op(flow),
            params: args.iter().map(|a| cx.op(*a)).collect(),
        };
        if tail {
            self.stage(cx, &mut [&mut tmpl]);
            self.finish(cx, Terminator::Push(vec![tmpl]));
            return Ok(None);
        }
        self.check_reentry(&cx.name, &callee)?;
        Ok(Some(self.continue_after(cx, |rest| Terminator::Push(vec![rest, tmpl]), ty)))
    }

    fn static_ifelse(
        &mut self,
        cx: &mut FnCx,
        flow: &TExpr,
        args: &[TExpr],
        tail: bool,
        ty: &TypeTerm,
    ) -> Result<Option<Val>, LowerError> {
        let name = |e: &TExpr| match &e.kind {
            TExprKind::FuncRef(f) => f.clone(),
            _ => unreachable!("checked by is_static_ifelse"),
        };
        let (s, t, f) = (name(&args[0]), name(&args[1]), name(&args[2]));
        let p = self.value(cx, flow)?;
        let cond = self
            .call(cx, Callee::Static(s), p, vec![], false, &TypeTerm::Bool)?
            .expect("non-tail call yields a value");
        self.branch(cx, cond, p, t, f, tail, ty)
    }

    /// Continues with `t(p)` if `cond` holds, else with `f(p)`.
    #[allow(clippy::too_many_arguments)]
    fn branch(
        &mut self,
        cx: &mut FnCx,
        cond: Val,
        p: Val,
        t: String,
        f: String,
        tail: bool,
        ty: &TypeTerm,
    ) -> Result<Option<Val>, LowerError> {
        let mut then = Template {
            target: Target::Block(self.entry_of(&t)),
            flow_in: cx.op(p),
            params: vec![],
        };
        let mut otherwise = Template {
            target: Target::Block(self.entry_of(&f)),
            flow_in: cx.op(p),
            params: vec![],
        };
        let cond = cx.op(cond);
        if tail {
            self.stage(cx, &mut [&mut then, &mut otherwise]);
            self.finish(
                cx,
                Terminator::Select {
                    cond,
                    then,
                    otherwise,
                    below: vec![],
                },
            );
            return Ok(None);
        }
        self.check_reentry(&cx.name, &Callee::Static(t))?;
        self.check_reentry(&cx.name, &Callee::Static(f))?;
        let v = self.continue_after(
            cx,
            |rest| Terminator::Select {
                cond,
                then,
                otherwise,
                below: vec![rest],
            },
            ty,
        );
        Ok(Some(v))
    }

    fn value(&mut self, cx: &mut FnCx, e: &TExpr) -> Result<Val, LowerError> {
        Ok(self.expr(cx, e, false)?.expect("non-tail expression yields a value"))
    }

    /// Lowers `e`; `None` means it ended the function with a tail call.
    fn expr(&mut self, cx: &mut FnCx, e: &TExpr, tail: bool) -> Result<Option<Val>, LowerError> {
        let v = match &e.kind {
            TExprKind::Unit => Val::Slot(self.void()),
            TExprKind::Lit(l) => Val::Slot(self.constant(literal_kind(l), literal_bits(l))),
            TExprKind::Local(n) => *cx
                .locals
                .get(n)
                .ok_or_else(|| LowerError::Invalid(format!("unbound local `{n}`")))?,
            TExprKind::Global(g) => {
                let info = self.globals.iter().find(|x| &x.name == g);
                let info = info.ok_or_else(|| LowerError::Invalid(format!("unknown global `{g}`")))?;
                Val::Slot(info.slot)
            }
            TExprKind::FuncRef(f) => Val::Slot(self.func_const(f)),
            TExprKind::Call { callee, flow, args } => {
                let decl = self.decl(callee);
                if decl.kind != DeclKind::Primitive {
                    if is_static_ifelse(self.p, callee, args) {
                        return self.static_ifelse(cx, flow, args, tail, &e.ty);
                    }
                    let fv = self.value(cx, flow)?;
                    let mut av = Vec::new();
                    for a in args {
                        av.push(self.value(cx, a)?);
                    }
                    return self.call(cx, Callee::Static(callee.clone()), fv, av, tail, &e.ty);
                }
                let prim = Prim::from_name(callee)
                    .ok_or_else(|| LowerError::UnknownPrimitive(callee.clone()))?;
                if prim == Prim::Apply {
                    if let Some((c, t, f)) = static_choice(self.p, &args[0]) {
                        let fv = self.value(cx, flow)?;
                        let cond = self.value(cx, c)?;
                        return self.branch(cx, cond, fv, t, f, tail, &e.ty);
                    }
                    let fv = self.value(cx, flow)?;
                    let callee = match &args[0].kind {
                        TExprKind::FuncRef(g) => Callee::Static(g.clone()),
                        _ => Callee::Dynamic(self.value(cx, &args[0])?),
                    };
                    return self.call(cx, callee, fv, vec![], tail, &e.ty);
                }
                let fv = self.value(cx, flow)?;
                let mut av = Vec::new();
                for a in args {
                    let v = match (&a.kind, prim) {
                        (TExprKind::FuncRef(h), Prim::AddEventQ) => {
                            let b = self.entry_of(h);
                            let s = self.new_slot(SlotRole::Const, ValueKind::Func);
                            self.consts.push((s, ConstValue::Func(b)));
                            Val::Slot(s)
                        }
                        _ => self.value(cx, a)?,
                    };
                    av.push(v);
                }
                let result = if e.ty == TypeTerm::Void {
                    None
                } else {
                    Some(self.temp(cx, &e.ty))
                };
                let flow_op = cx.op(fv);
                let params: Vec<Operand> = av.iter().map(|v| cx.op(*v)).collect();
                let written = self.decl(callee).written_positions();
                let writes = written
                    .iter()
                    .map(|&i| if i == 0 { flow_op } else { params[i - 1] })
                    .collect();
                let kinds = std::iter::once(&flow.ty)
                    .chain(args.iter().map(|a| &a.ty))
                    .chain(std::iter::once(&e.ty))
                    .map(ValueKind::of)
                    .collect();
                cx.calls.push(PrimitiveCall {
                    prim,
                    flow_in: flow_op,
                    params,
                    result: result.map(Operand::Slot),
                    writes,
                    is_io: prim.is_io(),
                    kinds,
                });
                match result {
                    Some(s) => Val::Slot(s),
                    None => Val::Slot(self.void()),
                }
            }
        };
        Ok(Some(v))
    }

    fn lower_function(&mut self, name: &str) -> Result<(), LowerError> {
        let d = self.decl(name);
        if d.param_names.len() + 1 > u8::MAX as usize {
            return Err(LowerError::TooManyParams(name.to_string()));
        }
        let mut locals = HashMap::new();
        locals.insert(d.flow_in_name.clone(), Val::In);
        for (i, p) in d.param_names.iter().enumerate() {
            locals.insert(p.clone(), Val::Param(i));
        }
        let mut cx = FnCx {
            name: name.to_string(),
            nparams: d.param_names.len(),
            in_rest: false,
            locals,
            block: self.entry_of(name),
            calls: Vec::new(),
            parts: 0,
        };
        let n = d.body.len();
        let mut last = Some(Val::Slot(self.void()));
        for (i, st) in d.body.iter().enumerate() {
            last = self.expr(&mut cx, &st.expr, i + 1 == n)?;
            match (last, &st.binding) {
                (Some(v), Some(b)) => {
                    cx.locals.insert(b.clone(), v);
                }
                (None, _) => break,
                _ => {}
            }
        }
        if let Some(v) = last {
            let op = cx.op(v);
            self.finish(&mut cx, Terminator::Return(op));
        }
        Ok(())
    }

    fn add_globals(&mut self) {
        for d in self.p.decls.iter().filter(|d| d.kind == DeclKind::Global) {
            let ty = d.scheme.flow_out.clone();
            let kind = ValueKind::of(&ty);
            let slot = self.new_slot(SlotRole::Global(d.name.clone()), kind);
            let mut info = GlobalInfo {
                name: d.name.clone(),
                slot,
                ty: ty.clone(),
                kind,
                array: None,
                init: Vec::new(),
            };
            if let TypeTerm::Array(elem, len) = &ty {
                let len = match **len {
                    TypeTerm::Nat(n) => n,
                    _ => 0,
                };
                let ek = ValueKind::of(elem);
                let first = self.slots.len() as SlotId;
                for i in 0..len {
                    self.new_slot(SlotRole::Element(d.name.clone(), i), ek);
                }
                info.array = Some((ek, first, len));
                info.init = match &d.init {
                    Some(Initializer::List(items)) => {
                        let mut v: Vec<u32> = items.iter().map(literal_bits).collect();
                        v.resize(len as usize, 0);
                        v
                    }
                    Some(Initializer::Scalar(l)) => vec![literal_bits(l); len as usize],
                    None => vec![0; len as usize],
                };
            } else {
                info.init = vec![match &d.init {
                    Some(Initializer::Scalar(l)) => literal_bits(l),
                    _ => 0,
                }];
            }
            self.globals.push(info);
        }
    }
}

/// Lowers every handler and the functions they reach into blocks and lays
/// out all objects in memory.
pub fn lower(p: &TypedProgram, cfg: &VmConfig) -> Result<ContinuationProgram, LowerError> {
    cfg.validate()?;
    for h in &cfg.event_handlers {
        match p.get(h) {
            Some(d) if d.kind == DeclKind::Event => {}
            _ => return Err(LowerError::MissingHandler(h.clone())),
        }
    }
    for d in p.decls.iter().filter(|d| d.kind == DeclKind::Event) {
        if !cfg.event_handlers.contains(&d.name) {
            return Err(LowerError::UnlistedHandler(d.name.clone()));
        }
    }
    let interrupts: Vec<String> = p
        .decls
        .iter()
        .filter(|d| d.kind == DeclKind::Interrupt)
        .map(|d| d.name.clone())
        .collect();

    // Call graph over everything reachable from the handlers.
    let mut graph = Graph::default();
    let mut work: Vec<String> = cfg.event_handlers.iter().chain(&interrupts).cloned().collect();
    let mut seen = BTreeSet::new();
    while let Some(f) = work.pop() {
        if !seen.insert(f.clone()) {
            continue;
        }
        let d = p.get(&f).ok_or_else(|| LowerError::Invalid(format!("unknown function `{f}`")))?;
        for st in &d.body {
            scan(p, &st.expr, &mut graph, &f, &mut work);
        }
    }

    let mut lw = Lowerer {
        p,
        graph,
        blocks: Vec::new(),
        slots: Vec::new(),
        consts: Vec::new(),
        const_pool: HashMap::new(),
        func_consts: HashMap::new(),
        globals: Vec::new(),
        entry: BTreeMap::new(),
        pending: VecDeque::new(),
        void_slot: None,
    };
    lw.add_globals();
    for h in cfg.event_handlers.iter().chain(&interrupts) {
        lw.entry_of(h);
    }
    while let Some(f) = lw.pending.pop_front() {
        lw.lower_function(&f)?;
    }

    let blocks: Vec<BasicBlock> = lw
        .blocks
        .into_iter()
        .map(|b| b.expect("every allocated block is finished"))
        .collect();
    let handler_entry = cfg
        .event_handlers
        .iter()
        .map(|h| (h.clone(), lw.entry[h]))
        .collect();
    let interrupt_entry = interrupts.iter().map(|h| (h.clone(), lw.entry[h])).collect();
    let function_entry = lw
        .entry
        .iter()
        .filter(|(n, _)| p.get(n).is_some_and(|d| d.kind == DeclKind::Function))
        .map(|(n, b)| (n.clone(), *b))
        .collect();
    let primitive_catalog = p
        .decls
        .iter()
        .filter(|d| d.kind == DeclKind::Primitive)
        .filter_map(|d| Prim::from_name(&d.name).map(|x| (d.name.clone(), x)))
        .collect();

    let max_params = blocks.iter().map(|b| b.frame_params as u32).max().unwrap_or(0);
    let mut slots = lw.slots;
    let layout = Layout::new(cfg, max_params, slots.len() as u32 * VALUE_BYTES);
    let base = layout.base(super::layout::Region::Globals);
    for (i, s) in slots.iter_mut().enumerate() {
        s.addr = (base + i as u32 * VALUE_BYTES) as u16;
    }
    let needed = base + slots.len() as u32 * VALUE_BYTES;
    if needed > cfg.nvm_size_bytes {
        return Err(LowerError::LayoutOverflow {
            needed,
            available: cfg.nvm_size_bytes,
        });
    }
    let mut cp = ContinuationProgram {
        name: p.source_name.clone(),
        blocks,
        handler_entry,
        interrupt_entry,
        function_entry,
        slots,
        globals: lw.globals,
        consts: lw.consts,
        primitive_catalog,
        layout,
    };
    super::size_undo(&mut cp)?;
    Ok(cp)
}
