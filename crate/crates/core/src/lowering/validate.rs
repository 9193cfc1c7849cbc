//! Structural checks run after every pass.

use super::ir::*;
use super::LowerError;

pub fn validate(cp: &ContinuationProgram, io_split: bool) -> Result<(), LowerError> {
    let bad = |m: String| Err(LowerError::Invalid(m));
    let nblocks = cp.blocks.len();
    let nslots = cp.slots.len() as SlotId;
    let block_ok = |b: BlockId| (b as usize) < nblocks;
    for (i, b) in cp.blocks.iter().enumerate() {
        if b.id as usize != i {
            return bad(format!("block {} stored at index {i}", b.id));
        }
        let operand_ok = |op: &Operand| match op {
            Operand::Slot(s) => *s < nslots,
            Operand::Param(p) => *p < b.frame_params,
            Operand::FlowIn | Operand::Flow => true,
        };
        for c in &b.calls {
            if !c.operands().all(operand_ok) || !c.writes.iter().all(operand_ok) {
                return bad(format!("b{i}: call {} has an invalid operand", c.prim.name()));
            }
            for w in &c.writes {
                if !c.operands().any(|o| o == w) {
                    return bad(format!("b{i}: {} writes {w} which it does not receive", c.prim.name()));
                }
            }
            match c.result {
                None | Some(Operand::Flow) => {}
                Some(Operand::Slot(s)) if s < nslots => {}
                Some(r) => return bad(format!("b{i}: result written to {r}")),
            }
        }
        if io_split && b.has_io() && b.calls.len() != 1 {
            return bad(format!("b{i}: IO call shares its block"));
        }
        if let Terminator::Return(op) | Terminator::Select { cond: op, .. } = &b.terminator {
            if !operand_ok(op) {
                return bad(format!("b{i}: terminator reads invalid {op}"));
            }
        }
        for t in b.terminator.templates() {
            if !t.operands().iter().all(operand_ok) {
                return bad(format!("b{i}: template has an invalid operand"));
            }
            if let Target::Block(x) = t.target {
                if !block_ok(x) {
                    return bad(format!("b{i}: dangling target b{x}"));
                }
                if cp.blocks[x as usize].frame_params as usize != t.params.len() {
                    return bad(format!("b{i}: b{x} expects {} params", cp.blocks[x as usize].frame_params));
                }
            }
        }
        if b.loop_unroll > 0 && !super::transform::is_self_loop(b) {
            return bad(format!("b{i}: loop mark on a block that is not a self-loop"));
        }
    }
    for b in cp
        .handler_entry
        .values()
        .chain(cp.interrupt_entry.values())
        .chain(cp.function_entry.values())
    {
        if !block_ok(*b) {
            return bad(format!("entry b{b} does not exist"));
        }
    }
    for (s, v) in &cp.consts {
        if *s >= nslots {
            return bad(format!("constant slot s{s} does not exist"));
        }
        if let ConstValue::Func(b) = v {
            if !block_ok(*b) {
                return bad(format!("function value names missing b{b}"));
            }
        }
    }
    Ok(())
}
