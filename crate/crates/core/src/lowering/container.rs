//! `CIR1` binary container: magic, version, payload length, payload.
//! All integers little endian; strings and lists are length prefixed.

use std::collections::BTreeMap;

use thiserror::Error;

use super::ir::*;
use super::layout::Layout;
use crate::catalog::Prim;
use crate::types::TypeTerm;

pub const MAGIC: &[u8; 4] = b"CIR1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("not a CIR1 container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("container truncated")]
    Truncated,
    #[error("malformed container: {0}")]
    Malformed(String),
}

struct W(Vec<u8>);

impl W {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(n as u32);
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn op(&mut self, op: Operand) {
        match op {
            Operand::Slot(s) => {
                self.u8(0);
                self.u32(s);
            }
            Operand::FlowIn => self.u8(1),
            Operand::Param(i) => {
                self.u8(2);
                self.u8(i);
            }
            Operand::Flow => self.u8(3),
        }
    }
    fn ops(&mut self, ops: &[Operand]) {
        self.len(ops.len());
        for o in ops {
            self.op(*o);
        }
    }
    fn template(&mut self, t: &Template) {
        match t.target {
            Target::Block(b) => {
                self.u8(0);
                self.u16(b);
            }
            Target::Dynamic(op) => {
                self.u8(1);
                self.op(op);
            }
        }
        self.op(t.flow_in);
        self.ops(&t.params);
    }
    fn templates(&mut self, ts: &[Template]) {
        self.len(ts.len());
        for t in ts {
            self.template(t);
        }
    }
    fn ty(&mut self, t: &TypeTerm) {
        match t {
            TypeTerm::Int => self.u8(0),
            TypeTerm::Float => self.u8(1),
            TypeTerm::Bool => self.u8(2),
            TypeTerm::Void => self.u8(3),
            TypeTerm::Var(v) => {
                self.u8(4);
                self.u32(*v);
            }
            TypeTerm::Arrow(a, b) => {
                self.u8(5);
                self.ty(a);
                self.ty(b);
            }
            TypeTerm::Array(e, n) => {
                self.u8(6);
                self.ty(e);
                self.ty(n);
            }
            TypeTerm::Nat(n) => {
                self.u8(7);
                self.u32(*n);
            }
        }
    }
    fn entries(&mut self, m: &BTreeMap<String, BlockId>) {
        self.len(m.len());
        for (k, v) in m {
            self.str(k);
            self.u16(*v);
        }
    }
}

pub fn encode(cp: &ContinuationProgram) -> Vec<u8> {
    let mut w = W(Vec::new());
    w.str(&cp.name);
    let l = &cp.layout;
    for v in [
        l.page_size,
        l.nvm_size,
        l.max_params,
        l.queue_capacity,
        l.runtime_pages,
        l.queue_pages,
        l.globals_pages,
        l.undo_pages,
        l.undo_entries,
    ] {
        w.u32(v);
    }
    w.len(cp.blocks.len());
    for b in &cp.blocks {
        w.u16(b.id);
        w.str(&b.name);
        w.str(&b.function);
        w.u8(b.frame_params);
        w.u16(b.loop_unroll);
        w.len(b.calls.len());
        for c in &b.calls {
            w.u8(c.prim.code());
            w.op(c.flow_in);
            w.ops(&c.params);
            match c.result {
                None => w.u8(0),
                Some(r) => {
                    w.u8(1);
                    w.op(r);
                }
            }
            w.ops(&c.writes);
            w.u8(c.is_io as u8);
            w.len(c.kinds.len());
            for k in &c.kinds {
                w.u8(k.code());
            }
        }
        match &b.terminator {
            Terminator::Return(op) => {
                w.u8(0);
                w.op(*op);
            }
            Terminator::Push(ts) => {
                w.u8(1);
                w.templates(ts);
            }
            Terminator::Select {
                cond,
                then,
                otherwise,
                below,
            } => {
                w.u8(2);
                w.op(*cond);
                w.template(then);
                w.template(otherwise);
                w.templates(below);
            }
        }
    }
    w.entries(&cp.handler_entry);
    w.entries(&cp.interrupt_entry);
    w.entries(&cp.function_entry);
    w.len(cp.slots.len());
    for s in &cp.slots {
        match &s.role {
            SlotRole::Global(g) => {
                w.u8(0);
                w.str(g);
            }
            SlotRole::Element(g, i) => {
                w.u8(1);
                w.str(g);
                w.u32(*i);
            }
            SlotRole::Const => w.u8(2),
            SlotRole::Temp(f) => {
                w.u8(3);
                w.str(f);
            }
        }
        w.u8(s.kind.code());
        w.u16(s.addr);
    }
    w.len(cp.globals.len());
    for g in &cp.globals {
        w.str(&g.name);
        w.u32(g.slot);
        w.ty(&g.ty);
        w.u8(g.kind.code());
        match g.array {
            None => w.u8(0),
            Some((k, first, len)) => {
                w.u8(1);
                w.u8(k.code());
                w.u32(first);
                w.u32(len);
            }
        }
        w.len(g.init.len());
        for v in &g.init {
            w.u32(*v);
        }
    }
    w.len(cp.consts.len());
    for (s, v) in &cp.consts {
        w.u32(*s);
        match v {
            ConstValue::Word(x) => {
                w.u8(0);
                w.u32(*x);
            }
            ConstValue::Func(b) => {
                w.u8(1);
                w.u16(*b);
            }
        }
    }
    w.len(cp.primitive_catalog.len());
    for (n, p) in &cp.primitive_catalog {
        w.str(n);
        w.u8(p.code());
    }

    let mut out = Vec::with_capacity(w.0.len() + 10);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(w.0.len() as u32).to_le_bytes());
    out.extend_from_slice(&w.0);
    out
}

struct R<'a> {
    buf: &'a [u8],
    pos: usize,
}

type Res<T> = Result<T, DecodeError>;

fn malformed<T>(what: &str) -> Res<T> {
    Err(DecodeError::Malformed(what.to_string()))
}

impl<'a> R<'a> {
    fn take(&mut self, n: usize) -> Res<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Res<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Res<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Res<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Res<usize> {
        let n = self.u32()? as usize;
        if n > self.buf.len() {
            return Err(DecodeError::Truncated);
        }
        Ok(n)
    }
    fn str(&mut self) -> Res<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).or_else(|_| malformed("string is not UTF-8"))
    }
    fn kind(&mut self) -> Res<ValueKind> {
        ValueKind::from_code(self.u8()?).map_or_else(|| malformed("value kind"), Ok)
    }
    fn op(&mut self) -> Res<Operand> {
        Ok(match self.u8()? {
            0 => Operand::Slot(self.u32()?),
            1 => Operand::FlowIn,
            2 => Operand::Param(self.u8()?),
            3 => Operand::Flow,
            _ => return malformed("operand tag"),
        })
    }
    fn ops(&mut self) -> Res<Vec<Operand>> {
        let n = self.len()?;
        (0..n).map(|_| self.op()).collect()
    }
    fn template(&mut self) -> Res<Template> {
        let target = match self.u8()? {
            0 => Target::Block(self.u16()?),
            1 => Target::Dynamic(self.op()?),
            _ => return malformed("target tag"),
        };
        Ok(Template {
            target,
            flow_in: self.op()?,
            params: self.ops()?,
        })
    }
    fn templates(&mut self) -> Res<Vec<Template>> {
        let n = self.len()?;
        (0..n).map(|_| self.template()).collect()
    }
    fn ty(&mut self, depth: u32) -> Res<TypeTerm> {
        if depth > 64 {
            return malformed("type nesting");
        }
        Ok(match self.u8()? {
            0 => TypeTerm::Int,
            1 => TypeTerm::Float,
            2 => TypeTerm::Bool,
            3 => TypeTerm::Void,
            4 => TypeTerm::Var(self.u32()?),
            5 => TypeTerm::arrow(self.ty(depth + 1)?, self.ty(depth + 1)?),
            6 => TypeTerm::array(self.ty(depth + 1)?, self.ty(depth + 1)?),
            7 => TypeTerm::Nat(self.u32()?),
            _ => return malformed("type tag"),
        })
    }
    fn entries(&mut self) -> Res<BTreeMap<String, BlockId>> {
        let n = self.len()?;
        let mut m = BTreeMap::new();
        for _ in 0..n {
            let k = self.str()?;
            m.insert(k, self.u16()?);
        }
        Ok(m)
    }
}

pub fn decode(bytes: &[u8]) -> Result<ContinuationProgram, DecodeError> {
    if bytes.len() < 10 {
        return Err(if bytes.starts_with(MAGIC) || bytes.len() < 4 {
            DecodeError::Truncated
        } else {
            DecodeError::BadMagic
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let payload = bytes.get(10..10 + len).ok_or(DecodeError::Truncated)?;
    if bytes.len() != 10 + len {
        return malformed("trailing bytes");
    }
    let mut r = R { buf: payload, pos: 0 };
    let name = r.str()?;
    let mut f = [0u32; 9];
    for v in f.iter_mut() {
        *v = r.u32()?;
    }
    let layout = Layout {
        page_size: f[0],
        nvm_size: f[1],
        max_params: f[2],
        queue_capacity: f[3],
        runtime_pages: f[4],
        queue_pages: f[5],
        globals_pages: f[6],
        undo_pages: f[7],
        undo_entries: f[8],
    };
    if layout.page_size == 0 || layout.nvm_size % layout.page_size != 0 {
        return malformed("page size");
    }
    let nblocks = r.len()?;
    let mut blocks = Vec::with_capacity(nblocks);
    for _ in 0..nblocks {
        let id = r.u16()?;
        let name = r.str()?;
        let function = r.str()?;
        let frame_params = r.u8()?;
        let loop_unroll = r.u16()?;
        let ncalls = r.len()?;
        let mut calls = Vec::with_capacity(ncalls);
        for _ in 0..ncalls {
            let prim = Prim::from_code(r.u8()?).map_or_else(|| malformed("primitive code"), Ok)?;
            let flow_in = r.op()?;
            let params = r.ops()?;
            let result = match r.u8()? {
                0 => None,
                1 => Some(r.op()?),
                _ => return malformed("result tag"),
            };
            let writes = r.ops()?;
            let is_io = r.u8()? != 0;
            let nk = r.len()?;
            let kinds = (0..nk).map(|_| r.kind()).collect::<Res<_>>()?;
            calls.push(PrimitiveCall {
                prim,
                flow_in,
                params,
                result,
                writes,
                is_io,
                kinds,
            });
        }
        let terminator = match r.u8()? {
            0 => Terminator::Return(r.op()?),
            1 => Terminator::Push(r.templates()?),
            2 => Terminator::Select {
                cond: r.op()?,
                then: r.template()?,
                otherwise: r.template()?,
                below: r.templates()?,
            },
            _ => return malformed("terminator tag"),
        };
        blocks.push(BasicBlock {
            id,
            name,
            function,
            calls,
            terminator,
            frame_params,
            loop_unroll,
        });
    }
    let handler_entry = r.entries()?;
    let interrupt_entry = r.entries()?;
    let function_entry = r.entries()?;
    let nslots = r.len()?;
    let mut slots = Vec::with_capacity(nslots);
    for _ in 0..nslots {
        let role = match r.u8()? {
            0 => SlotRole::Global(r.str()?),
            1 => SlotRole::Element(r.str()?, r.u32()?),
            2 => SlotRole::Const,
            3 => SlotRole::Temp(r.str()?),
            _ => return malformed("slot role"),
        };
        slots.push(SlotInfo {
            role,
            kind: r.kind()?,
            addr: r.u16()?,
        });
    }
    let nglobals = r.len()?;
    let mut globals = Vec::with_capacity(nglobals);
    for _ in 0..nglobals {
        let name = r.str()?;
        let slot = r.u32()?;
        let ty = r.ty(0)?;
        let kind = r.kind()?;
        let array = match r.u8()? {
            0 => None,
            1 => Some((r.kind()?, r.u32()?, r.u32()?)),
            _ => return malformed("array tag"),
        };
        let n = r.len()?;
        let init = (0..n).map(|_| r.u32()).collect::<Res<_>>()?;
        globals.push(GlobalInfo {
            name,
            slot,
            ty,
            kind,
            array,
            init,
        });
    }
    let nconsts = r.len()?;
    let mut consts = Vec::with_capacity(nconsts);
    for _ in 0..nconsts {
        let s = r.u32()?;
        let v = match r.u8()? {
            0 => ConstValue::Word(r.u32()?),
            1 => ConstValue::Func(r.u16()?),
            _ => return malformed("constant tag"),
        };
        consts.push((s, v));
    }
    let ncat = r.len()?;
    let mut primitive_catalog = BTreeMap::new();
    for _ in 0..ncat {
        let n = r.str()?;
        let p = Prim::from_code(r.u8()?).map_or_else(|| malformed("primitive code"), Ok)?;
        primitive_catalog.insert(n, p);
    }
    if r.pos != payload.len() {
        return malformed("payload has trailing bytes");
    }
    let cp = ContinuationProgram {
        name,
        blocks,
        handler_entry,
        interrupt_entry,
        function_entry,
        slots,
        globals,
        consts,
        primitive_catalog,
        layout,
    };
    super::validate::validate(&cp, false).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    for s in &cp.slots {
        if s.addr as u32 + 4 > cp.layout.nvm_size {
            return malformed("slot address outside memory");
        }
    }
    Ok(cp)
}
