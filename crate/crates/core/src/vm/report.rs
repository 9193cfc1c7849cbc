//! What a run leaves behind: outputs, counters and the overhead split.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::frontend::Backend;
use crate::lowering::ValueKind;

/// One `emit`. `(seq, iter, instr)` names the emitting instruction within
/// its transaction, so a re-executed emit repeats the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputRecord {
    pub seq: u32,
    pub iter: u32,
    pub instr: u32,
    pub kind: ValueKind,
    pub bits: u32,
    pub text: String,
}

impl OutputRecord {
    pub fn key(&self) -> (u32, u32, u32) {
        (self.seq, self.iter, self.instr)
    }
}

/// Keeps the last record per key, in key order.
pub fn dedup_outputs(records: &[OutputRecord]) -> Vec<OutputRecord> {
    let mut m = BTreeMap::new();
    for r in records {
        m.insert(r.key(), r.clone());
    }
    m.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Phase {
    #[default]
    Useful,
    UndoLog,
    Stack,
    ConsumeCommit,
    Checkpoint,
}

/// Micro-steps by what they were spent on. Sums to the run's steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverheadSplit {
    pub useful: u64,
    pub undo_log: u64,
    pub stack: u64,
    pub consume_commit: u64,
    pub checkpoint: u64,
}

impl OverheadSplit {
    pub fn total(&self) -> u64 {
        self.useful + self.undo_log + self.stack + self.consume_commit + self.checkpoint
    }

    pub fn add(&mut self, p: Phase) {
        match p {
            Phase::Useful => self.useful += 1,
            Phase::UndoLog => self.undo_log += 1,
            Phase::Stack => self.stack += 1,
            Phase::ConsumeCommit => self.consume_commit += 1,
            Phase::Checkpoint => self.checkpoint += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Counters {
    pub steps: u64,
    pub commits: u64,
    pub logged_pages: u64,
    pub stack_ops: u64,
    pub crashes: u64,
    pub reboots: u64,
    pub dropped_events: u64,
    pub events_consumed: u64,
    pub interrupts: u64,
    pub checkpoints: u64,
    pub reexecutions: u64,
    pub duplicate_outputs: u64,
    pub blocks_run: u64,
    pub loop_iterations: u64,
    pub commit_violations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub program: String,
    pub backend: Backend,
    pub counters: Counters,
    pub split: OverheadSplit,
    /// Every emit, repeats included.
    pub outputs: Vec<OutputRecord>,
    /// Named globals with their final raw contents.
    pub globals: Vec<(String, Vec<u32>)>,
}

impl RunReport {
    pub fn deduped(&self) -> Vec<OutputRecord> {
        dedup_outputs(&self.outputs)
    }

    /// Deduplicated output values, for comparing runs of any backend.
    pub fn values(&self) -> Vec<(ValueKind, u32)> {
        self.deduped().iter().map(|r| (r.kind, r.bits)).collect()
    }

    pub fn texts(&self) -> Vec<String> {
        self.deduped().into_iter().map(|r| r.text).collect()
    }

    /// Flat `key = value` text.
    pub fn to_text(&self) -> String {
        let c = &self.counters;
        let s = &self.split;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("program", self.program.clone());
        kv("backend", self.backend.to_string());
        for (k, v) in [
            ("steps", c.steps),
            ("commits", c.commits),
            ("logged_pages", c.logged_pages),
            ("stack_ops", c.stack_ops),
            ("crashes", c.crashes),
            ("reboots", c.reboots),
            ("dropped_events", c.dropped_events),
            ("events_consumed", c.events_consumed),
            ("interrupts", c.interrupts),
            ("checkpoints", c.checkpoints),
            ("reexecutions", c.reexecutions),
            ("duplicate_outputs", c.duplicate_outputs),
            ("blocks_run", c.blocks_run),
            ("loop_iterations", c.loop_iterations),
            ("commit_violations", c.commit_violations),
            ("split.useful", s.useful),
            ("split.undo_log", s.undo_log),
            ("split.stack", s.stack),
            ("split.consume_commit", s.consume_commit),
            ("split.checkpoint", s.checkpoint),
        ] {
            kv(k, v.to_string());
        }
        let outs = self.deduped();
        kv("outputs", outs.len().to_string());
        for (i, r) in outs.iter().enumerate() {
            kv(&format!("output.{i}"), format!("{} {}", r.seq, r.text));
        }
        for (name, words) in &self.globals {
            let v: Vec<String> = words.iter().map(|w| format!("{w:#x}")).collect();
            kv(&format!("global.{name}"), v.join(" "));
        }
        out
    }
}
