//! Static write sets: which pages a block's transaction may modify.

use std::collections::BTreeSet;

use super::ir::*;
use super::layout::{Region, RT_EVENT_DATA, RT_FLOW, RT_ISR_DATA};
use crate::catalog::Prim;

/// An object a frame position may refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Loc {
    Slot(SlotId),
    Flow,
    EventData,
    IsrData,
}

/// Per block, per frame position (0 = flow-in, `i + 1` = param `i`), the
/// objects the position may refer to.
pub fn points_to(cp: &ContinuationProgram) -> Vec<Vec<BTreeSet<Loc>>> {
    let mut pt: Vec<Vec<BTreeSet<Loc>>> = cp
        .blocks
        .iter()
        .map(|b| vec![BTreeSet::new(); b.frame_params as usize + 1])
        .collect();
    for b in cp.handler_entry.values() {
        pt[*b as usize][0].insert(Loc::EventData);
    }
    for b in cp.interrupt_entry.values() {
        pt[*b as usize][0].insert(Loc::IsrData);
    }
    let dynamic = dynamic_targets(cp);
    loop {
        let mut changed = false;
        for b in &cp.blocks {
            for t in b.terminator.templates() {
                let sources: Vec<BTreeSet<Loc>> = std::iter::once(t.flow_in)
                    .chain(t.params.iter().copied())
                    .map(|op| resolve(&pt, b.id, op))
                    .collect();
                let targets: Vec<BlockId> = match t.target {
                    Target::Block(x) => vec![x],
                    Target::Dynamic(_) => dynamic.clone(),
                };
                for x in targets {
                    let row = &mut pt[x as usize];
                    for (k, src) in sources.iter().enumerate().take(row.len()) {
                        for l in src {
                            changed |= row[k].insert(*l);
                        }
                    }
                }
            }
        }
        if !changed {
            return pt;
        }
    }
}

/// Blocks a dynamic continuation may name: every block stored as a
/// function value.
pub fn dynamic_targets(cp: &ContinuationProgram) -> Vec<BlockId> {
    let set: BTreeSet<BlockId> = cp
        .consts
        .iter()
        .filter_map(|(_, v)| match v {
            ConstValue::Func(b) => Some(*b),
            ConstValue::Word(_) => None,
        })
        .collect();
    set.into_iter().collect()
}

fn resolve(pt: &[Vec<BTreeSet<Loc>>], b: BlockId, op: Operand) -> BTreeSet<Loc> {
    match op {
        Operand::Slot(s) => BTreeSet::from([Loc::Slot(s)]),
        Operand::Flow => BTreeSet::from([Loc::Flow]),
        Operand::FlowIn => pt[b as usize][0].clone(),
        Operand::Param(i) => pt[b as usize].get(i as usize + 1).cloned().unwrap_or_default(),
    }
}

fn loc_addr(cp: &ContinuationProgram, l: Loc) -> u32 {
    match l {
        Loc::Slot(s) => cp.slot_addr(s) as u32,
        Loc::Flow => RT_FLOW as u32,
        Loc::EventData => RT_EVENT_DATA as u32,
        Loc::IsrData => RT_ISR_DATA as u32,
    }
}

fn array_pages(cp: &ContinuationProgram, g: &GlobalInfo) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    if let Some((_, first, len)) = g.array {
        let lo = cp.slot_addr(first) as u32;
        let hi = lo + len * 4;
        for p in cp.layout.page_of(lo)..=cp.layout.page_of(hi.max(lo + 1) - 1) {
            out.insert(p);
        }
    }
    out
}

/// Pages written through the objects of a block's calls, not counting the
/// runtime and stack regions.
pub fn object_pages(
    cp: &ContinuationProgram,
    pt: &[Vec<BTreeSet<Loc>>],
    block: BlockId,
) -> BTreeSet<u32> {
    let l = &cp.layout;
    let mut out = BTreeSet::new();
    let add = |out: &mut BTreeSet<u32>, addr: u32| {
        let p = l.page_of(addr);
        if l.region_of_page(p) != Some(Region::Runtime) {
            out.insert(p);
        }
    };
    for c in &cp.block(block).calls {
        if c.prim == Prim::AddEventQ {
            out.insert(l.page_of(l.queue_tail() as u32));
        }
        if let Some(r) = c.result {
            for loc in resolve(pt, block, r) {
                add(&mut out, loc_addr(cp, loc));
            }
        }
        for w in &c.writes {
            for loc in resolve(pt, block, *w) {
                if c.prim == Prim::SetAt {
                    let owner = match loc {
                        Loc::Slot(s) => cp.globals.iter().find(|g| g.slot == s && g.array.is_some()),
                        _ => None,
                    };
                    match owner {
                        Some(g) => out.extend(array_pages(cp, g)),
                        None => {
                            for g in cp.globals.iter().filter(|g| g.array.is_some()) {
                                out.extend(array_pages(cp, g));
                            }
                        }
                    }
                } else {
                    add(&mut out, loc_addr(cp, loc));
                }
            }
        }
    }
    out
}

/// Statically known superset of the pages a block's transaction modifies.
pub fn write_pages(cp: &ContinuationProgram, block: BlockId) -> BTreeSet<u32> {
    let pt = points_to(cp);
    write_pages_with(cp, &pt, block)
}

pub fn write_pages_with(
    cp: &ContinuationProgram,
    pt: &[Vec<BTreeSet<Loc>>],
    block: BlockId,
) -> BTreeSet<u32> {
    let l = &cp.layout;
    let mut out = object_pages(cp, pt, block);
    out.extend(l.pages_of_region(Region::Runtime));
    out.extend(l.pages_of_region(Region::Stack));
    out
}

/// Undo-log entries the largest transaction of the program can need.
pub fn undo_entries_needed(cp: &ContinuationProgram) -> u32 {
    let l = &cp.layout;
    let pt = points_to(cp);
    let isr_blocks = isr_only_blocks(cp);
    let mut need = l.runtime_pages + 1 + l.stack_span(1);
    // Delivering an interrupt logs the producer page and whatever the
    // handler wrote outside the runtime region.
    let mut isr_pages = BTreeSet::from([l.page_of(l.queue_tail() as u32)]);
    for b in interrupt_blocks(cp) {
        isr_pages.extend(object_pages(cp, &pt, b));
    }
    need = need.max(isr_pages.len() as u32);
    for b in &cp.blocks {
        if isr_blocks.contains(&b.id) {
            continue;
        }
        let n = object_pages(cp, &pt, b.id).len() as u32
            + l.runtime_pages
            + l.stack_span(b.terminator.max_pushes());
        need = need.max(n);
    }
    need
}

fn reachable(cp: &ContinuationProgram, roots: Vec<BlockId>) -> BTreeSet<BlockId> {
    let dynamic = dynamic_targets(cp);
    let mut seen = BTreeSet::new();
    let mut work = roots;
    while let Some(b) = work.pop() {
        if !seen.insert(b) {
            continue;
        }
        for t in cp.block(b).terminator.templates() {
            match t.target {
                Target::Block(x) => work.push(x),
                Target::Dynamic(_) => work.extend(dynamic.iter().copied()),
            }
        }
    }
    seen
}

/// Blocks an interrupt handler may run.
pub fn interrupt_blocks(cp: &ContinuationProgram) -> BTreeSet<BlockId> {
    reachable(cp, cp.interrupt_entry.values().copied().collect())
}

/// Blocks only reachable from interrupt handlers; they never run as
/// transactions.
pub fn isr_only_blocks(cp: &ContinuationProgram) -> BTreeSet<BlockId> {
    let main = reachable(cp, cp.handler_entry.values().copied().collect());
    interrupt_blocks(cp).difference(&main).copied().collect()
}
