//! IR-to-IR passes: IO splitting, block fusion, loop marking.

use std::collections::BTreeMap;

use super::ir::*;
use crate::catalog::Prim;
use crate::frontend::VmConfig;

fn pass_through(target: BlockId, frame_params: u8) -> Template {
    Template {
        target: Target::Block(target),
        flow_in: Operand::FlowIn,
        params: (0..frame_params).map(Operand::Param).collect(),
    }
}

/// Isolates every IO call in a block of its own. The code before the call
/// stays in the original block, the code after it moves to a new one.
pub fn split_io(mut cp: ContinuationProgram) -> ContinuationProgram {
    let mut i = 0;
    while i < cp.blocks.len() {
        let b = &cp.blocks[i];
        let Some(k) = b.calls.iter().position(|c| c.is_io) else {
            i += 1;
            continue;
        };
        if b.calls.len() == 1 {
            i += 1;
            continue;
        }
        let next = cp.blocks.len() as BlockId;
        let b = &mut cp.blocks[i];
        let (keep, moved) = if k > 0 { (k, "io") } else { (1, "post") };
        let tail = b.calls.split_off(keep);
        let terminator = std::mem::replace(
            &mut b.terminator,
            Terminator::Push(vec![pass_through(next, b.frame_params)]),
        );
        let nb = BasicBlock {
            id: next,
            name: format!("{}:{moved}", b.name),
            function: b.function.clone(),
            calls: tail,
            terminator,
            frame_params: b.frame_params,
            loop_unroll: 0,
        };
        cp.blocks.push(nb);
        if k > 0 {
            i += 1;
        }
    }
    cp
}

/// Number of references to each block; entries and function values count
/// as unknown references.
fn reference_counts(cp: &ContinuationProgram) -> Vec<u32> {
    let mut rc = vec![0u32; cp.blocks.len()];
    let pinned = u32::MAX / 2;
    for b in cp.handler_entry.values().chain(cp.interrupt_entry.values()) {
        rc[*b as usize] += pinned;
    }
    for (_, v) in &cp.consts {
        if let ConstValue::Func(b) = v {
            rc[*b as usize] += pinned;
        }
    }
    for b in &cp.blocks {
        for t in b.terminator.templates() {
            if let Target::Block(x) = t.target {
                rc[x as usize] += 1;
            }
        }
    }
    rc
}

fn remap(op: Operand, t: &Template) -> Operand {
    match op {
        Operand::FlowIn => t.flow_in,
        Operand::Param(i) => t.params[i as usize],
        other => other,
    }
}

fn remap_template(u: &Template, t: &Template) -> Template {
    let mut u = u.clone();
    for op in u.operands_mut() {
        *op = remap(*op, t);
    }
    u
}

/// Merges a block into its only predecessor when the predecessor's next
/// continuation is that block and neither does IO.
pub fn fuse_blocks(mut cp: ContinuationProgram, _cfg: &VmConfig) -> ContinuationProgram {
    let mut alive = vec![true; cp.blocks.len()];
    loop {
        let rc = reference_counts(&cp);
        let candidate = cp.blocks.iter().enumerate().find_map(|(a, blk)| {
            if !alive[a] || blk.has_io() || blk.loop_unroll > 0 {
                return None;
            }
            let Terminator::Push(ts) = &blk.terminator else { return None };
            let Target::Block(b) = ts.last()?.target else { return None };
            let b = b as usize;
            let ok = b != a && alive[b] && rc[b] == 1 && !cp.blocks[b].has_io();
            ok.then_some((a, b))
        });
        let Some((a, b)) = candidate else { break };
        let callee = cp.blocks[b].clone();
        let blk = &mut cp.blocks[a];
        let Terminator::Push(mut ts) = std::mem::replace(&mut blk.terminator, Terminator::Return(Operand::Flow)) else {
            unreachable!()
        };
        let top = ts.pop().expect("candidate has a template");
        for c in &callee.calls {
            let mut c = c.clone();
            c.flow_in = remap(c.flow_in, &top);
            for p in c.params.iter_mut() {
                *p = remap(*p, &top);
            }
            for w in c.writes.iter_mut() {
                *w = remap(*w, &top);
            }
            blk.calls.push(c);
        }
        blk.terminator = match &callee.terminator {
            Terminator::Return(op) => {
                let op = remap(*op, &top);
                if ts.is_empty() {
                    Terminator::Return(op)
                } else {
                    if op != Operand::Flow {
                        blk.calls.push(PrimitiveCall {
                            prim: Prim::Id,
                            flow_in: op,
                            params: vec![],
                            result: Some(Operand::Flow),
                            writes: vec![],
                            is_io: false,
                            kinds: vec![ValueKind::Any, ValueKind::Any],
                        });
                    }
                    Terminator::Push(ts)
                }
            }
            Terminator::Push(us) => {
                ts.extend(us.iter().map(|u| remap_template(u, &top)));
                Terminator::Push(ts)
            }
            Terminator::Select {
                cond,
                then,
                otherwise,
                below,
            } => {
                ts.extend(below.iter().map(|u| remap_template(u, &top)));
                Terminator::Select {
                    cond: remap(*cond, &top),
                    then: remap_template(then, &top),
                    otherwise: remap_template(otherwise, &top),
                    below: ts,
                }
            }
        };
        alive[b] = false;
        // Keep the dead block's references from counting.
        cp.blocks[b].terminator = Terminator::Return(Operand::Flow);
        cp.blocks[b].calls.clear();
    }
    compact(cp, &alive)
}

/// Drops dead blocks and renumbers the survivors densely.
pub fn compact(mut cp: ContinuationProgram, alive: &[bool]) -> ContinuationProgram {
    let mut map = BTreeMap::new();
    let mut blocks = Vec::new();
    for (i, b) in std::mem::take(&mut cp.blocks).into_iter().enumerate() {
        if alive[i] {
            map.insert(i as BlockId, blocks.len() as BlockId);
            blocks.push(b);
        }
    }
    for b in blocks.iter_mut() {
        b.id = map[&b.id];
        for t in b.terminator.templates_mut() {
            if let Target::Block(x) = &mut t.target {
                *x = map[x];
            }
        }
    }
    cp.blocks = blocks;
    cp.function_entry.retain(|_, b| map.contains_key(b));
    for v in cp
        .handler_entry
        .values_mut()
        .chain(cp.interrupt_entry.values_mut())
        .chain(cp.function_entry.values_mut())
    {
        *v = map[v];
    }
    for (_, v) in cp.consts.iter_mut() {
        if let ConstValue::Func(b) = v {
            *b = map[b];
        }
    }
    cp
}

/// True when block `id` continues with itself and nothing else below.
pub fn is_self_loop(b: &BasicBlock) -> bool {
    let me = Target::Block(b.id);
    match &b.terminator {
        Terminator::Select {
            then,
            otherwise,
            below,
            ..
        } => below.is_empty() && (then.target == me || otherwise.target == me),
        Terminator::Push(ts) => ts.len() == 1 && ts[0].target == me,
        Terminator::Return(_) => false,
    }
}

/// Lets IO-free self-loops whose writes do not depend on an index run
/// several iterations per transaction.
pub fn loop_optimize(mut cp: ContinuationProgram, cfg: &VmConfig) -> ContinuationProgram {
    let k = cfg.loop_unroll.min(u16::MAX as u32) as u16;
    for b in cp.blocks.iter_mut() {
        let eligible = is_self_loop(b)
            && !b.has_io()
            && !b.calls.iter().any(|c| matches!(c.prim, Prim::SetAt | Prim::AddEventQ));
        if eligible {
            b.loop_unroll = k;
        }
    }
    cp
}

/// Turns `select` feeding a dynamic continuation into a select terminator
/// when nothing else reads the selected function.
pub fn select_to_terminator(mut cp: ContinuationProgram) -> ContinuationProgram {
    let mut uses: BTreeMap<SlotId, usize> = BTreeMap::new();
    for b in &cp.blocks {
        for c in &b.calls {
            for op in c.operands() {
                if let Operand::Slot(s) = op {
                    *uses.entry(*s).or_default() += 1;
                }
            }
        }
        for t in b.terminator.templates() {
            for op in t.operands() {
                if let Operand::Slot(s) = op {
                    *uses.entry(s).or_default() += 1;
                }
            }
        }
        if let Terminator::Select { cond: Operand::Slot(s), .. } | Terminator::Return(Operand::Slot(s)) = &b.terminator {
            *uses.entry(*s).or_default() += 1;
        }
    }
    for b in cp.blocks.iter_mut() {
        let Terminator::Push(ts) = &b.terminator else { continue };
        let Some(Template {
            target: Target::Dynamic(Operand::Slot(g)),
            ..
        }) = ts.last()
        else {
            continue;
        };
        let g = *g;
        let Some(last) = b.calls.last() else { continue };
        if last.prim != Prim::Select || last.result != Some(Operand::Slot(g)) || uses.get(&g) != Some(&1) {
            continue;
        }
        let sel = b.calls.pop().expect("checked above");
        let Terminator::Push(mut ts) = std::mem::replace(&mut b.terminator, Terminator::Return(Operand::Flow)) else {
            unreachable!()
        };
        let top = ts.pop().expect("checked above");
        let arm = |f: Operand| Template {
            target: Target::Dynamic(f),
            ..top.clone()
        };
        b.terminator = Terminator::Select {
            cond: sel.flow_in,
            then: arm(sel.params[0]),
            otherwise: arm(sel.params[1]),
            below: ts,
        };
    }
    cp
}
