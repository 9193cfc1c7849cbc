//! Continuation IR: blocks of primitive calls joined by continuation templates.

use std::collections::BTreeMap;
use std::fmt::{self, Write};

use super::layout::Layout;
use crate::catalog::Prim;
use crate::types::TypeTerm;

pub type BlockId = u16;
pub type SlotId = u32;

/// Where an instruction finds an object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operand {
    Slot(SlotId),
    /// The current frame's flow-in object.
    FlowIn,
    /// The current frame's `i`-th parameter object.
    Param(u8),
    /// The runtime flow register, written by `Return`.
    Flow,
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Slot(s) => write!(f, "s{s}"),
            Operand::FlowIn => f.write_str("in"),
            Operand::Param(i) => write!(f, "p{i}"),
            Operand::Flow => f.write_str("flow"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ValueKind {
    Int,
    Float,
    Bool,
    Void,
    Func,
    Array,
    /// Parametric at this point; not checked.
    Any,
}

impl ValueKind {
    pub fn of(t: &TypeTerm) -> ValueKind {
        match t {
            TypeTerm::Int => ValueKind::Int,
            TypeTerm::Float => ValueKind::Float,
            TypeTerm::Bool => ValueKind::Bool,
            TypeTerm::Void => ValueKind::Void,
            TypeTerm::Arrow(..) => ValueKind::Func,
            TypeTerm::Array(..) => ValueKind::Array,
            TypeTerm::Var(_) | TypeTerm::Nat(_) => ValueKind::Any,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<ValueKind> {
        use ValueKind::*;
        [Int, Float, Bool, Void, Func, Array, Any].get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ValueKind::Int => "Int",
            ValueKind::Float => "Float",
            ValueKind::Bool => "Bool",
            ValueKind::Void => "Void",
            ValueKind::Func => "Func",
            ValueKind::Array => "Array",
            ValueKind::Any => "Any",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimitiveCall {
    pub prim: Prim,
    pub flow_in: Operand,
    pub params: Vec<Operand>,
    /// `Slot` or `Flow`; `None` for Void results.
    pub result: Option<Operand>,
    /// Objects modified besides the result; a subset of flow-in and params.
    pub writes: Vec<Operand>,
    pub is_io: bool,
    /// Kinds of flow-in, params, then result.
    pub kinds: Vec<ValueKind>,
}

impl PrimitiveCall {
    pub fn operands(&self) -> impl Iterator<Item = &Operand> {
        std::iter::once(&self.flow_in).chain(self.params.iter())
    }

    pub fn operands_mut(&mut self) -> impl Iterator<Item = &mut Operand> {
        std::iter::once(&mut self.flow_in)
            .chain(self.params.iter_mut())
            .chain(self.result.iter_mut())
            .chain(self.writes.iter_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Block(BlockId),
    /// Block id read from a function-valued object.
    Dynamic(Operand),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub target: Target,
    pub flow_in: Operand,
    pub params: Vec<Operand>,
}

impl Template {
    pub fn operands_mut(&mut self) -> impl Iterator<Item = &mut Operand> {
        let dynamic = match &mut self.target {
            Target::Dynamic(op) => Some(op),
            Target::Block(_) => None,
        };
        dynamic
            .into_iter()
            .chain(std::iter::once(&mut self.flow_in))
            .chain(self.params.iter_mut())
    }

    pub fn operands(&self) -> Vec<Operand> {
        let mut v = Vec::new();
        if let Target::Dynamic(op) = self.target {
            v.push(op);
        }
        v.push(self.flow_in);
        v.extend(self.params.iter().copied());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminator {
    Return(Operand),
    /// Frames pushed bottom first; the last one runs next.
    Push(Vec<Template>),
    Select {
        cond: Operand,
        then: Template,
        otherwise: Template,
        /// Pushed beneath the chosen arm.
        below: Vec<Template>,
    },
}

impl Terminator {
    pub fn templates(&self) -> Vec<&Template> {
        match self {
            Terminator::Return(_) => Vec::new(),
            Terminator::Push(ts) => ts.iter().collect(),
            Terminator::Select {
                then, otherwise, below, ..
            } => below.iter().chain([then, otherwise]).collect(),
        }
    }

    pub fn templates_mut(&mut self) -> Vec<&mut Template> {
        match self {
            Terminator::Return(_) => Vec::new(),
            Terminator::Push(ts) => ts.iter_mut().collect(),
            Terminator::Select {
                then, otherwise, below, ..
            } => below.iter_mut().chain([then, otherwise]).collect(),
        }
    }

    /// Largest number of frames this terminator pushes.
    pub fn max_pushes(&self) -> usize {
        match self {
            Terminator::Return(_) => 0,
            Terminator::Push(ts) => ts.len(),
            Terminator::Select { below, .. } => below.len() + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub id: BlockId,
    /// Owning declaration and position, e.g. `control.1`.
    pub name: String,
    pub function: String,
    pub calls: Vec<PrimitiveCall>,
    pub terminator: Terminator,
    /// Parameter objects the frame running this block carries.
    pub frame_params: u8,
    /// Iterations of a self-loop allowed in one transaction; 0 when not a loop.
    pub loop_unroll: u16,
}

impl BasicBlock {
    pub fn has_io(&self) -> bool {
        self.calls.iter().any(|c| c.is_io)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotRole {
    Global(String),
    /// Element `index` of the array global.
    Element(String, u32),
    Const,
    Temp(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotInfo {
    pub role: SlotRole,
    pub kind: ValueKind,
    /// Byte address in object memory.
    pub addr: u16,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstValue {
    Word(u32),
    /// Entry block of a function, patched when blocks are renumbered.
    Func(BlockId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalInfo {
    pub name: String,
    pub slot: SlotId,
    pub ty: TypeTerm,
    pub kind: ValueKind,
    /// Element kind, first element slot and length for arrays.
    pub array: Option<(ValueKind, SlotId, u32)>,
    /// Raw initial contents: one word pair per scalar or element.
    pub init: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationProgram {
    pub name: String,
    pub blocks: Vec<BasicBlock>,
    pub handler_entry: BTreeMap<String, BlockId>,
    pub interrupt_entry: BTreeMap<String, BlockId>,
    /// Entry block of every lowered function, for naming function values.
    pub function_entry: BTreeMap<String, BlockId>,
    pub slots: Vec<SlotInfo>,
    pub globals: Vec<GlobalInfo>,
    pub consts: Vec<(SlotId, ConstValue)>,
    pub primitive_catalog: BTreeMap<String, Prim>,
    pub layout: Layout,
}

impl ContinuationProgram {
    pub fn block(&self, id: BlockId) -> &BasicBlock {
        &self.blocks[id as usize]
    }

    pub fn slot_addr(&self, s: SlotId) -> u16 {
        self.slots[s as usize].addr
    }

    pub fn global(&self, name: &str) -> Option<&GlobalInfo> {
        self.globals.iter().find(|g| g.name == name)
    }

    /// Name of the function whose entry block is `id`.
    pub fn function_name(&self, id: BlockId) -> Option<&str> {
        self.function_entry
            .iter()
            .chain(self.handler_entry.iter())
            .find(|(_, b)| **b == id)
            .map(|(n, _)| n.as_str())
    }

    pub fn max_frame_params(&self) -> u8 {
        self.blocks.iter().map(|b| b.frame_params).max().unwrap_or(0)
    }

    pub fn commit_count_hint(&self) -> usize {
        self.blocks.len()
    }

    /// Human-readable listing, one block per paragraph.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let l = &self.layout;
        let _ = writeln!(
            out,
            "program {} page_size={} pages={} blocks={}",
            self.name,
            l.page_size,
            l.page_count(),
            self.blocks.len()
        );
        for (r, first, count) in l.regions() {
            let _ = writeln!(out, "region {} pages {}..{}", r.name(), first, first + count);
        }
        for (h, b) in &self.handler_entry {
            let _ = writeln!(out, "event {h} -> b{b}");
        }
        for (h, b) in &self.interrupt_entry {
            let _ = writeln!(out, "interrupt {h} -> b{b}");
        }
        for (f, b) in &self.function_entry {
            let _ = writeln!(out, "func {f} -> b{b}");
        }
        for (i, s) in self.slots.iter().enumerate() {
            let role = match &s.role {
                SlotRole::Global(g) => format!("global {g}"),
                SlotRole::Element(g, i) => format!("elem {g}[{i}]"),
                SlotRole::Const => {
                    let v = self.consts.iter().find(|(c, _)| *c == i as SlotId).map(|(_, v)| *v);
                    match v {
                        Some(ConstValue::Word(w)) => format!("const {w:#x}"),
                        Some(ConstValue::Func(b)) => format!("const b{b}"),
                        None => "const".into(),
                    }
                }
                SlotRole::Temp(f) => format!("temp {f}"),
            };
            if matches!(s.role, SlotRole::Element(_, i) if i > 0) {
                continue;
            }
            let _ = writeln!(
                out,
                "s{i} {role} {} @{:#06x} page {}",
                s.kind.name(),
                s.addr,
                s.addr as u32 / l.page_size
            );
        }
        for b in &self.blocks {
            out.push('\n');
            let _ = write!(out, "b{} {} frame={}", b.id, b.name, b.frame_params);
            if b.loop_unroll > 0 {
                let _ = write!(out, " unroll={}", b.loop_unroll);
            }
            out.push('\n');
            for c in &b.calls {
                out.push_str("  ");
                if let Some(r) = c.result {
                    let _ = write!(out, "{r} = ");
                }
                let args: Vec<String> = c.params.iter().map(|p| p.to_string()).collect();
                let _ = write!(out, "{}.{}({})", c.flow_in, c.prim.name(), args.join(", "));
                if c.is_io {
                    out.push_str(" [IO]");
                }
                for w in &c.writes {
                    let _ = write!(out, " [write {w}]");
                }
                out.push('\n');
            }
            let _ = writeln!(out, "  {}", render_terminator(&b.terminator));
        }
        out
    }
}

pub fn render_template(t: &Template) -> String {
    let target = match t.target {
        Target::Block(b) => format!("b{b}"),
        Target::Dynamic(op) => format!("*{op}"),
    };
    if t.params.is_empty() {
        format!("{target}({})", t.flow_in)
    } else {
        let ps: Vec<String> = t.params.iter().map(|p| p.to_string()).collect();
        format!("{target}({}; {})", t.flow_in, ps.join(", "))
    }
}

pub fn render_terminator(t: &Terminator) -> String {
    match t {
        Terminator::Return(op) => format!("return {op}"),
        Terminator::Push(ts) => {
            let ts: Vec<String> = ts.iter().map(render_template).collect();
            format!("push [{}]", ts.join(", "))
        }
        Terminator::Select {
            cond,
            then,
            otherwise,
            below,
        } => {
            let mut s = format!(
                "select {cond} ? {} : {}",
                render_template(then),
                render_template(otherwise)
            );
            if !below.is_empty() {
                let ts: Vec<String> = below.iter().map(render_template).collect();
                s.push_str(&format!(" over [{}]", ts.join(", ")));
            }
            s
        }
    }
}
