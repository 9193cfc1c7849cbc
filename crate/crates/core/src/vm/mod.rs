//! The runtime: event queue, continuation stack and block interpreter,
//! with an undo-logging backend, a checkpointing backend and a test backend
//! that never loses power.

mod report;
mod sensors;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

pub use report::{dedup_outputs, Counters, OutputRecord, OverheadSplit, Phase, RunReport};
pub use sensors::{isr_index, Lcg, SensorModel, DEFAULT_SEED, ISR_READ_BASE};

use crate::catalog::{Prim, SENSOR_CHANNELS, TEMP_CHANNEL};
use crate::frontend::{Backend, VmConfig};
use crate::lowering::*;
use crate::nvm::{Crash, Meter, MicroOp, NvmError, ObjectMemory, UndoLog};
use crate::powersim::{EnergyModel, PowerDecision, PowerDriver, PowerMode};

/// Blocks an interrupt handler may run before it is declared stuck.
const ISR_BLOCK_LIMIT: u64 = 1_000_000;
/// Sensor reads inside interrupt handlers use their own index range.
const UNKNOWN: u8 = u8::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VmError {
    #[error("division by zero in block `{block}`")]
    TrapDivideByZero { block: String },
    #[error("index {index} out of bounds for length {len} in block `{block}`")]
    TrapIndexOutOfBounds { block: String, index: i32, len: u32 },
    #[error("type confusion in block `{block}`: expected {expected}, found {found}")]
    TypeConfusion {
        block: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("continuation stack overflow ({frames} frames)")]
    StackOverflow { frames: u32 },
    #[error("no termination within {0} micro-steps")]
    NonTermination(u64),
    #[error("corrupt runtime state: {0}")]
    CorruptState(String),
    #[error("undo log full ({0} pages)")]
    LogFull(u32),
    #[error("already booted")]
    AlreadyBooted,
    #[error("not booted")]
    NotBooted,
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Memory(NvmError),
    #[error("no interrupt handler `{0}`")]
    UnknownInterrupt(String),
    #[error("power failed; call reboot")]
    PowerFailure,
}

/// How a step was cut short.
enum Fault {
    Crash,
    /// Deliberate power-down after a checkpoint.
    Off,
    Err(VmError),
}

impl From<VmError> for Fault {
    fn from(e: VmError) -> Self {
        Fault::Err(e)
    }
}

impl From<NvmError> for Fault {
    fn from(e: NvmError) -> Self {
        match e {
            NvmError::Crash(_) => Fault::Crash,
            NvmError::LogFull { capacity } => Fault::Err(VmError::LogFull(capacity)),
            e => Fault::Err(VmError::Memory(e)),
        }
    }
}

impl From<Crash> for Fault {
    fn from(_: Crash) -> Self {
        Fault::Crash
    }
}

/// What one turn of the main loop did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Interrupt,
    Block,
    Consume,
    Idle,
    Sleep,
    Rebooted,
    Halted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub target: BlockId,
    /// Byte address of the flow-in object.
    pub flow_in: u16,
    pub params: Vec<u16>,
}

/// Volatile position inside a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Engine {
    pub frame: Frame,
    pub instr: u32,
    pub iter: u32,
}

#[derive(Debug, Clone)]
struct VmMeter {
    power: PowerDriver,
    phase: Phase,
    split: OverheadSplit,
    ticks: u64,
    budget: u64,
    exhausted: bool,
    low_energy: bool,
    page_size: u32,
    trace: Option<Vec<String>>,
}

impl Meter for VmMeter {
    fn tick(&mut self, op: MicroOp) -> Result<(), Crash> {
        self.ticks += 1;
        self.split.add(self.phase);
        if self.ticks > self.budget {
            self.exhausted = true;
            return Err(Crash);
        }
        if let Some(t) = &mut self.trace {
            t.push(format!("{} {} {}", self.power.step() + 1, phase_name(self.phase), op_name(op)));
        }
        match self.power.tick(op) {
            PowerDecision::Continue => Ok(()),
            PowerDecision::LowEnergySignal => {
                self.low_energy = true;
                Ok(())
            }
            PowerDecision::Crash => {
                if let Some(t) = &mut self.trace {
                    if let Some(l) = t.last_mut() {
                        l.push_str(" crash");
                    }
                }
                Err(Crash)
            }
        }
    }

    fn wrote(&mut self, addr: u32) {
        let page = addr / self.page_size;
        if let Some(l) = self.trace.as_mut().and_then(|t| t.last_mut()) {
            l.push_str(&format!(" page {page}"));
        }
    }
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Useful => "useful",
        Phase::UndoLog => "undo",
        Phase::Stack => "stack",
        Phase::ConsumeCommit => "commit",
        Phase::Checkpoint => "ckpt",
    }
}

fn op_name(op: MicroOp) -> String {
    match op {
        MicroOp::WordRead => "read".into(),
        MicroOp::WordWrite => "write".into(),
        MicroOp::PageCopy => "copy".into(),
        MicroOp::Primitive(p) => format!("prim {}", p.name()),
        MicroOp::Io(p) => format!("io {}", p.name()),
    }
}

/// Interrupt handlers run against a volatile overlay of memory.
#[derive(Debug, Clone, Default)]
struct Overlay {
    words: BTreeMap<u32, u16>,
    events: Vec<(u32, u32)>,
    ordinal: u64,
    reads: u64,
}

/// Hook run after every commit; returning false counts a violation.
pub type CommitCheck = fn(&Vm) -> bool;

#[derive(Clone)]
pub struct Vm {
    prog: Arc<ContinuationProgram>,
    backend: Backend,
    mem: ObjectMemory,
    log: UndoLog,
    meter: VmMeter,
    sensors: SensorModel,
    booted: bool,
    counters: Counters,
    outputs: Vec<OutputRecord>,
    tags: Option<Vec<u8>>,
    logged: BTreeSet<u32>,
    overlay: Option<Overlay>,
    irq_blocks: Vec<BlockId>,
    resume: Option<Engine>,
    insn_trace: Vec<(BlockId, u32)>,
    ckpt_trace: [usize; 2],
    commit_check: Option<CommitCheck>,
}

impl std::fmt::Debug for Vm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vm")
            .field("program", &self.prog.name)
            .field("backend", &self.backend)
            .field("counters", &self.counters)
            .finish_non_exhaustive()
    }
}

impl Vm {
    pub fn new(prog: impl Into<Arc<ContinuationProgram>>, cfg: &VmConfig) -> Result<Vm, VmError> {
        cfg.validate().map_err(|e| VmError::Config(e.to_string()))?;
        let prog: Arc<ContinuationProgram> = prog.into();
        let l = &prog.layout;
        for h in ["boot", "reboot", "sleep"] {
            if !prog.handler_entry.contains_key(h) {
                return Err(VmError::Config(format!("program has no `{h}` handler")));
            }
        }
        let mem = ObjectMemory::with_layout(l);
        let log = UndoLog::from_layout(l);
        Ok(Vm {
            backend: cfg.vm_backend,
            mem,
            log,
            meter: VmMeter {
                power: PowerDriver::continuous(),
                phase: Phase::Useful,
                split: OverheadSplit::default(),
                ticks: 0,
                budget: cfg.step_budget,
                exhausted: false,
                low_energy: false,
                page_size: l.page_size,
                trace: None,
            },
            sensors: SensorModel::default(),
            booted: false,
            counters: Counters::default(),
            outputs: Vec::new(),
            tags: (cfg.vm_backend == Backend::Test).then(Vec::new),
            logged: BTreeSet::new(),
            overlay: None,
            irq_blocks: Vec::new(),
            resume: None,
            insn_trace: Vec::new(),
            ckpt_trace: [0; 2],
            commit_check: None,
            prog,
        })
    }

    pub fn with_sensors(mut self, s: SensorModel) -> Self {
        self.sensors = s;
        self
    }

    /// Records one line per micro-step.
    pub fn with_trace(mut self) -> Self {
        self.meter.trace = Some(Vec::new());
        self
    }

    pub fn with_commit_check(mut self, f: CommitCheck) -> Self {
        self.commit_check = Some(f);
        self
    }

    pub fn set_budget(&mut self, budget: u64) {
        self.meter.budget = budget;
    }

    pub fn program(&self) -> &ContinuationProgram {
        &self.prog
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn memory(&self) -> &ObjectMemory {
        &self.mem
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn outputs(&self) -> &[OutputRecord] {
        &self.outputs
    }

    pub fn steps(&self) -> u64 {
        self.meter.ticks
    }

    pub fn power(&self) -> &PowerDriver {
        &self.meter.power
    }

    /// Replaces the failure mode, keeping the step count and interrupts.
    pub fn schedule_crashes(&mut self, s: crate::powersim::CrashSchedule) {
        self.meter.power.set_schedule(s);
    }

    pub fn trace(&self) -> &[String] {
        self.meter.trace.as_deref().unwrap_or(&[])
    }

    /// Instructions started outside interrupt handlers and the `reboot`
    /// handler, in order; rolled back with each restored checkpoint.
    pub fn instruction_trace(&self) -> &[(BlockId, u32)] {
        &self.insn_trace
    }

    /// Zeroes memory, lays out globals and constants and enqueues `boot`.
    pub fn boot(&mut self) -> Result<(), VmError> {
        if self.booted {
            return Err(VmError::AlreadyBooted);
        }
        let prog = Arc::clone(&self.prog);
        let l = &prog.layout;
        let mem_err = VmError::Memory;
        if let Some(tags) = &mut self.tags {
            *tags = vec![UNKNOWN; (l.nvm_size / VALUE_BYTES) as usize];
            for (i, s) in prog.slots.iter().enumerate() {
                let _ = i;
                if s.kind != ValueKind::Any {
                    tags[(s.addr as u32 / VALUE_BYTES) as usize] = s.kind.code();
                }
            }
        }
        for g in &prog.globals {
            let addr = prog.slot_addr(g.slot) as u32;
            match g.array {
                Some((_, first, len)) => {
                    let base = prog.slot_addr(first) as u32;
                    self.mem.write_u32(addr, base | len << 16).map_err(mem_err)?;
                    for (i, w) in g.init.iter().enumerate() {
                        self.mem.write_u32(base + i as u32 * VALUE_BYTES, *w).map_err(mem_err)?;
                    }
                }
                None => self.mem.write_u32(addr, g.init.first().copied().unwrap_or(0)).map_err(mem_err)?,
            }
        }
        for (s, v) in &prog.consts {
            let bits = match v {
                ConstValue::Word(w) => *w,
                ConstValue::Func(b) => *b as u32,
            };
            self.mem.write_u32(prog.slot_addr(*s) as u32, bits).map_err(mem_err)?;
        }
        let boot = prog.handler_entry["boot"];
        self.mem.write_word(l.queue_entry(0) as u32, boot).map_err(mem_err)?;
        self.mem.write_word(l.queue_tail() as u32, 1).map_err(mem_err)?;
        self.booted = true;
        Ok(())
    }

    /// Installs a power driver and its interrupt script.
    pub fn set_power(&mut self, power: PowerDriver) -> Result<(), VmError> {
        if self.backend == Backend::Test && !power.is_continuous() {
            return Err(VmError::Config("the test backend runs on continuous power".into()));
        }
        let mut irq_blocks = Vec::new();
        for e in &power.interrupts.entries {
            let b = self
                .prog
                .interrupt_entry
                .get(&e.handler)
                .ok_or_else(|| VmError::UnknownInterrupt(e.handler.clone()))?;
            irq_blocks.push(*b);
        }
        self.irq_blocks = irq_blocks;
        self.meter.power = power;
        if self.backend == Backend::JustInTime {
            if let PowerMode::Energy(m) = &self.meter.power.mode {
                let margin = self.jit_margin(m);
                let need = self.min_jit_window(m);
                if m.threshold_on - m.threshold_off < need {
                    return Err(VmError::Config(format!(
                        "energy window {} too small to checkpoint (needs {need})",
                        m.threshold_on - m.threshold_off,
                    )));
                }
                self.meter.power.arm_signal(margin);
            }
        }
        Ok(())
    }

    /// Runs until the sleep handler has run and nothing is left to do.
    pub fn run_until_idle(&mut self, power: PowerDriver) -> Result<RunReport, VmError> {
        self.set_power(power)?;
        self.run()
    }

    /// Runs with the installed driver.
    pub fn run(&mut self) -> Result<RunReport, VmError> {
        if !self.booted {
            return Err(VmError::NotBooted);
        }
        while self.step()? != Step::Halted {}
        Ok(self.report())
    }

    /// One turn of the main loop, including any recovery it needs.
    pub fn step(&mut self) -> Result<Step, VmError> {
        if !self.booted {
            return Err(VmError::NotBooted);
        }
        let r = self.step_inner();
        self.settle(r)
    }

    pub fn is_halted(&self) -> bool {
        self.resume.is_none()
            && self.peek(RT_SP as u32) == 0
            && self.queue_len() == 0
            && self.irq_pending().is_none()
            && self.peek(RT_SLEEP_DONE as u32) != 0
    }

    pub fn report(&self) -> RunReport {
        let mut counters = self.counters.clone();
        counters.steps = self.meter.ticks;
        counters.dropped_events = self.peek(self.prog.layout.queue_drops() as u32) as u64;
        counters.duplicate_outputs = (self.outputs.len() - dedup_outputs(&self.outputs).len()) as u64;
        RunReport {
            program: self.prog.name.clone(),
            backend: self.backend,
            counters,
            split: self.meter.split,
            outputs: self.outputs.clone(),
            globals: self.global_values(),
        }
    }

    /// Raw contents of every named global: one word pair per scalar or
    /// array element.
    pub fn global_values(&self) -> Vec<(String, Vec<u32>)> {
        self.prog
            .globals
            .iter()
            .map(|g| {
                let vals = match g.array {
                    Some((_, first, len)) => (0..len)
                        .map(|i| self.mem.read_u32(self.prog.slot_addr(first + i) as u32).unwrap_or(0))
                        .collect(),
                    None => vec![self.mem.read_u32(self.prog.slot_addr(g.slot) as u32).unwrap_or(0)],
                };
                (g.name.clone(), vals)
            })
            .collect()
    }

    /// Current value of a scalar global.
    pub fn global(&self, name: &str) -> Option<u32> {
        let g = self.prog.global(name)?;
        self.mem.read_u32(self.prog.slot_addr(g.slot) as u32).ok()
    }

    pub fn queue_len(&self) -> u32 {
        let l = &self.prog.layout;
        let (h, t) = (self.peek(l.queue_head() as u32), self.peek(l.queue_tail() as u32));
        (t as u32 + l.ring_len() - h as u32) % l.ring_len()
    }

    /// Queued events, head first, as `(handler block, payload)`.
    pub fn queued_events(&self) -> Vec<(BlockId, u32)> {
        let l = &self.prog.layout;
        let h = self.peek(l.queue_head() as u32) as u32;
        (0..self.queue_len())
            .map(|k| {
                let e = l.queue_entry((h + k) % l.ring_len()) as u32;
                (self.peek(e), self.mem.read_u32(e + 2).unwrap_or(0))
            })
            .collect()
    }

    /// Frames on the continuation stack, bottom first.
    pub fn stack_frames(&self) -> Vec<Frame> {
        let l = &self.prog.layout;
        (0..self.peek(RT_SP as u32) as u32)
            .map(|i| {
                let a = l.frame_addr(i) as u32;
                let target = self.peek(a);
                let n = self.prog.blocks.get(target as usize).map_or(0, |b| b.frame_params);
                Frame {
                    target,
                    flow_in: self.peek(a + 2),
                    params: (0..n as u32).map(|k| self.peek(a + 4 + 2 * k)).collect(),
                }
            })
            .collect()
    }

    // Single operations, for callers driving the machine by hand. A power
    // failure leaves the machine as it is and returns `PowerFailure`.

    /// Enqueues an event for `handler` from outside an interrupt.
    pub fn add_event(&mut self, handler: &str, payload: u32) -> Result<(), VmError> {
        let h = *self
            .prog
            .handler_entry
            .get(handler)
            .ok_or_else(|| VmError::Config(format!("no event handler `{handler}`")))?;
        let r = (|| {
            self.begin();
            self.meter.phase = Phase::ConsumeCommit;
            self.enqueue(h as u32, payload)?;
            self.wr(RT_SLEEP_DONE as u32, 0)?;
            self.commit()
        })();
        self.manual(r)
    }

    pub fn vm_consume(&mut self) -> Result<(), VmError> {
        let r = self.consume();
        self.manual(r)
    }

    pub fn run_block(&mut self) -> Result<(), VmError> {
        let r = self.pop_and_run();
        self.manual(r)
    }

    pub fn jit_checkpoint(&mut self) -> Result<(), VmError> {
        if self.backend != Backend::JustInTime {
            return Err(VmError::Config("checkpoints need the jit backend".into()));
        }
        let r = self.checkpoint(None);
        self.manual(r)
    }

    /// Recovers after a power failure.
    pub fn reboot(&mut self) -> Result<(), VmError> {
        if !self.booted {
            return Err(VmError::NotBooted);
        }
        self.recover()
    }

    fn manual(&mut self, r: Result<(), Fault>) -> Result<(), VmError> {
        if !self.booted {
            return Err(VmError::NotBooted);
        }
        match r {
            Ok(()) => Ok(()),
            Err(Fault::Err(e)) => Err(e),
            Err(_) if self.meter.exhausted => Err(VmError::NonTermination(self.meter.budget)),
            Err(_) => {
                self.counters.crashes += 1;
                self.clear_volatile();
                Err(VmError::PowerFailure)
            }
        }
    }

    fn settle(&mut self, r: Result<Step, Fault>) -> Result<Step, VmError> {
        match r {
            Ok(s) => Ok(s),
            Err(Fault::Err(e)) => {
                self.overlay = None;
                Err(e)
            }
            Err(f) => {
                if self.meter.exhausted {
                    return Err(VmError::NonTermination(self.meter.budget));
                }
                if matches!(f, Fault::Crash) {
                    self.counters.crashes += 1;
                }
                self.recover()?;
                Ok(Step::Rebooted)
            }
        }
    }

    fn clear_volatile(&mut self) {
        self.overlay = None;
        self.logged.clear();
        self.meter.low_energy = false;
        self.resume = None;
    }

    fn recover(&mut self) -> Result<(), VmError> {
        loop {
            self.clear_volatile();
            self.meter.power.recharge();
            match self.restart() {
                Ok(()) => return Ok(()),
                Err(Fault::Err(e)) => return Err(e),
                Err(_) if self.meter.exhausted => return Err(VmError::NonTermination(self.meter.budget)),
                Err(_) => self.counters.crashes += 1,
            }
        }
    }

    fn restart(&mut self) -> Result<(), Fault> {
        self.counters.reboots += 1;
        match self.backend {
            Backend::Rewinding => {
                self.meter.phase = Phase::UndoLog;
                self.log.undo_restore(&mut self.mem, &mut self.meter)?;
            }
            Backend::JustInTime => {
                self.meter.phase = Phase::Checkpoint;
                self.resume = self.restore_checkpoint()?;
            }
            Backend::Test => {
                return Err(VmError::CorruptState("the test backend cannot reboot".into()).into());
            }
        }
        let sp = self.peek(RT_SP as u32) as u32;
        if sp > self.prog.layout.max_frames() {
            return Err(VmError::CorruptState(format!("stack pointer {sp} after restore")).into());
        }
        self.enqueue_reboot()
    }

    fn enqueue_reboot(&mut self) -> Result<(), Fault> {
        let l = self.prog.layout.clone();
        let rb = self.prog.handler_entry["reboot"] as u32;
        self.begin();
        self.meter.phase = Phase::ConsumeCommit;
        let head = self.rd(l.queue_head() as u32)? as u32;
        let tail = self.rd(l.queue_tail() as u32)? as u32;
        let last = (tail + l.ring_len() - 1) % l.ring_len();
        let queued = head != tail && self.rd(l.queue_entry(last) as u32)? as u32 == rb;
        if !queued {
            self.enqueue(rb, 0)?;
        }
        self.commit()
    }

    fn irq_pending(&self) -> Option<usize> {
        let next = self.peek(self.prog.layout.irq_next() as u32) as usize;
        (next < self.meter.power.interrupts.entries.len()).then_some(next)
    }

    fn step_inner(&mut self) -> Result<Step, Fault> {
        if let Some(eng) = self.resume.take() {
            self.exec(eng)?;
            return Ok(Step::Block);
        }
        if self.backend == Backend::JustInTime && self.meter.low_energy {
            self.checkpoint(None)?;
            return Err(Fault::Off);
        }
        let pending = self.irq_pending();
        if let Some(i) = pending {
            if self.meter.power.interrupts.entries[i].step <= self.meter.power.step() {
                self.deliver_interrupt(i)?;
                return Ok(Step::Interrupt);
            }
        }
        if self.peek(RT_SP as u32) > 0 {
            self.pop_and_run()?;
            return Ok(Step::Block);
        }
        if self.queue_len() > 0 {
            self.consume()?;
            return Ok(Step::Consume);
        }
        if let Some(i) = pending {
            let at = self.meter.power.interrupts.entries[i].step;
            self.meter.power.idle_until(at);
            return Ok(Step::Idle);
        }
        if self.peek(RT_SLEEP_DONE as u32) == 0 {
            self.dispatch_sleep()?;
            return Ok(Step::Sleep);
        }
        Ok(Step::Halted)
    }

    // Memory access.

    fn peek(&self, addr: u32) -> u16 {
        self.mem.read_word(addr).unwrap_or(0)
    }

    fn rd(&mut self, addr: u32) -> Result<u16, Fault> {
        if let Some(o) = &self.overlay {
            return match o.words.get(&addr) {
                Some(w) => Ok(*w),
                None => Ok(self.mem.read_word(addr)?),
            };
        }
        Ok(self.mem.read(&mut self.meter, addr)?)
    }

    fn wr(&mut self, addr: u32, w: u16) -> Result<(), Fault> {
        if let Some(o) = &mut self.overlay {
            self.mem.read_word(addr)?;
            o.words.insert(addr, w);
            return Ok(());
        }
        if self.backend == Backend::Rewinding {
            let page = addr / self.prog.layout.page_size;
            if !self.logged.contains(&page) {
                let phase = std::mem::replace(&mut self.meter.phase, Phase::UndoLog);
                if self.log.log_page(&mut self.mem, &mut self.meter, page)? {
                    self.counters.logged_pages += 1;
                }
                self.meter.phase = phase;
                self.logged.insert(page);
            }
        }
        Ok(self.mem.write(&mut self.meter, addr, w)?)
    }

    /// Write that bypasses the undo log.
    fn wr_raw(&mut self, addr: u32, w: u16) -> Result<(), Fault> {
        Ok(self.mem.write(&mut self.meter, addr, w)?)
    }

    fn rd32(&mut self, addr: u32) -> Result<u32, Fault> {
        Ok(self.rd(addr)? as u32 | (self.rd(addr + 2)? as u32) << 16)
    }

    fn wr32(&mut self, addr: u32, v: u32) -> Result<(), Fault> {
        self.wr(addr, v as u16)?;
        self.wr(addr + 2, (v >> 16) as u16)
    }

    fn tag(&self, addr: u32) -> u8 {
        self.tags.as_ref().map_or(UNKNOWN, |t| t[(addr / VALUE_BYTES) as usize])
    }

    fn load(&mut self, addr: u32, expect: ValueKind, block: &BasicBlock) -> Result<u32, Fault> {
        if let Some(tags) = &self.tags {
            let t = tags[(addr / VALUE_BYTES) as usize];
            if expect != ValueKind::Any && t != UNKNOWN && t != expect.code() {
                let found = ValueKind::from_code(t).map_or("?", |k| k.name());
                return Err(VmError::TypeConfusion {
                    block: block.name.clone(),
                    expected: expect.name(),
                    found,
                }
                .into());
            }
        }
        self.rd32(addr)
    }

    fn store(&mut self, addr: u32, v: u32, tag: u8) -> Result<(), Fault> {
        self.wr32(addr, v)?;
        if let Some(tags) = &mut self.tags {
            tags[(addr / VALUE_BYTES) as usize] = tag;
        }
        Ok(())
    }

    // Transactions.

    fn begin(&mut self) {
        self.logged.clear();
    }

    fn commit(&mut self) -> Result<(), Fault> {
        self.meter.phase = Phase::ConsumeCommit;
        if self.backend == Backend::Rewinding {
            self.log.commit_clear(&mut self.mem, &mut self.meter)?;
        }
        self.logged.clear();
        self.counters.commits += 1;
        if let Some(f) = self.commit_check {
            if !f(self) {
                self.counters.commit_violations += 1;
            }
        }
        Ok(())
    }

    fn enqueue(&mut self, handler: u32, payload: u32) -> Result<(), Fault> {
        let prog = Arc::clone(&self.prog);
        let l = &prog.layout;
        match prog.blocks.get(handler as usize) {
            Some(b) if b.frame_params == 0 => {}
            _ => return Err(VmError::CorruptState(format!("event for non-handler block {handler}")).into()),
        }
        let head = self.rd(l.queue_head() as u32)? as u32;
        let tail = self.rd(l.queue_tail() as u32)? as u32;
        if (tail + 1) % l.ring_len() == head {
            let d = self.rd(l.queue_drops() as u32)?;
            return self.wr(l.queue_drops() as u32, d.wrapping_add(1));
        }
        // The entry is invisible until the tail moves past it.
        let e = l.queue_entry(tail) as u32;
        self.wr_raw(e, handler as u16)?;
        self.wr_raw(e + 2, payload as u16)?;
        self.wr_raw(e + 4, (payload >> 16) as u16)?;
        self.wr(l.queue_tail() as u32, ((tail + 1) % l.ring_len()) as u16)
    }

    fn consume(&mut self) -> Result<(), Fault> {
        let prog = Arc::clone(&self.prog);
        let l = &prog.layout;
        self.begin();
        self.meter.phase = Phase::ConsumeCommit;
        let head = self.rd(l.queue_head() as u32)? as u32;
        let tail = self.rd(l.queue_tail() as u32)? as u32;
        if head == tail {
            return Err(VmError::CorruptState("consume from an empty queue".into()).into());
        }
        let e = l.queue_entry(head) as u32;
        let h = self.rd(e)?;
        let payload = self.rd32(e + 2)?;
        self.store(RT_EVENT_DATA as u32, payload, UNKNOWN)?;
        self.push_frames(&[Frame {
            target: h,
            flow_in: RT_EVENT_DATA,
            params: Vec::new(),
        }])?;
        self.meter.phase = Phase::ConsumeCommit;
        self.wr(l.queue_head() as u32, ((head + 1) % l.ring_len()) as u16)?;
        self.commit()?;
        self.counters.events_consumed += 1;
        Ok(())
    }

    fn dispatch_sleep(&mut self) -> Result<(), Fault> {
        let sleep = self.prog.handler_entry["sleep"];
        self.begin();
        self.meter.phase = Phase::ConsumeCommit;
        self.wr(RT_SLEEP_DONE as u32, 1)?;
        self.store(RT_EVENT_DATA as u32, 0, ValueKind::Void.code())?;
        self.push_frames(&[Frame {
            target: sleep,
            flow_in: RT_EVENT_DATA,
            params: Vec::new(),
        }])?;
        self.commit()
    }

    fn deliver_interrupt(&mut self, i: usize) -> Result<(), Fault> {
        let payload = self.meter.power.interrupts.entries[i].payload;
        let ov = self.run_isr(self.irq_blocks[i], payload, i as u64)?;
        let l = self.prog.layout.clone();
        self.begin();
        self.meter.phase = Phase::ConsumeCommit;
        for (addr, w) in &ov.words {
            if l.region_of_page(addr / l.page_size) == Some(Region::Globals) {
                self.wr(*addr, *w)?;
            }
        }
        let room = l.queue_capacity.saturating_sub(self.queue_len()) as usize;
        for (h, p) in ov.events.iter().take(room) {
            self.enqueue(*h, *p)?;
        }
        let lost = ov.events.len().saturating_sub(room);
        if lost > 0 {
            let d = self.rd(l.queue_drops() as u32)?;
            self.wr(l.queue_drops() as u32, d.wrapping_add(lost as u16))?;
        }
        self.wr(l.irq_next() as u32, i as u16 + 1)?;
        self.commit()?;
        self.counters.interrupts += 1;
        Ok(())
    }

    /// Runs an interrupt handler to completion without touching memory or
    /// spending energy; returns what it wrote and enqueued.
    fn run_isr(&mut self, entry: BlockId, payload: u32, ordinal: u64) -> Result<Overlay, Fault> {
        self.overlay = Some(Overlay {
            ordinal,
            ..Overlay::default()
        });
        let r = (|| {
            let sp0 = self.rd(RT_SP as u32)?;
            self.store(RT_ISR_DATA as u32, payload, UNKNOWN)?;
            self.push_frames(&[Frame {
                target: entry,
                flow_in: RT_ISR_DATA,
                params: Vec::new(),
            }])?;
            let mut n = 0;
            while self.rd(RT_SP as u32)? > sp0 {
                n += 1;
                if n > ISR_BLOCK_LIMIT {
                    return Err(VmError::NonTermination(ISR_BLOCK_LIMIT).into());
                }
                self.pop_and_run()?;
            }
            Ok(())
        })();
        let ov = self.overlay.take().unwrap_or_default();
        r.map(|_| ov)
    }

    // Blocks.

    fn read_frame(&mut self, i: u32) -> Result<Frame, Fault> {
        let a = self.prog.layout.frame_addr(i) as u32;
        let target = self.rd(a)?;
        let Some(b) = self.prog.blocks.get(target as usize) else {
            return Err(VmError::CorruptState(format!("frame {i} names block {target}")).into());
        };
        let n = b.frame_params as u32;
        let flow_in = self.rd(a + 2)?;
        let mut params = Vec::with_capacity(n as usize);
        for k in 0..n {
            params.push(self.rd(a + 4 + 2 * k)?);
        }
        Ok(Frame {
            target,
            flow_in,
            params,
        })
    }

    fn push_frames(&mut self, frames: &[Frame]) -> Result<(), Fault> {
        let l = self.prog.layout.clone();
        let phase = std::mem::replace(&mut self.meter.phase, Phase::Stack);
        let sp = self.rd(RT_SP as u32)? as u32;
        if sp + frames.len() as u32 > l.max_frames() {
            return Err(VmError::StackOverflow { frames: l.max_frames() }.into());
        }
        for (k, f) in frames.iter().enumerate() {
            let a = l.frame_addr(sp + k as u32) as u32;
            self.wr(a, f.target)?;
            self.wr(a + 2, f.flow_in)?;
            for (j, p) in f.params.iter().enumerate() {
                self.wr(a + 4 + 2 * j as u32, *p)?;
            }
        }
        self.wr(RT_SP as u32, (sp + frames.len() as u32) as u16)?;
        self.counters.stack_ops += frames.len() as u64;
        self.meter.phase = phase;
        Ok(())
    }

    fn pop_and_run(&mut self) -> Result<(), Fault> {
        self.begin();
        self.meter.phase = Phase::Stack;
        let sp = self.rd(RT_SP as u32)? as u32;
        if sp == 0 {
            return Err(VmError::CorruptState("pop from an empty stack".into()).into());
        }
        let frame = self.read_frame(sp - 1)?;
        self.wr(RT_SP as u32, (sp - 1) as u16)?;
        self.counters.stack_ops += 1;
        self.exec(Engine {
            frame,
            instr: 0,
            iter: 0,
        })
    }

    fn exec(&mut self, mut eng: Engine) -> Result<(), Fault> {
        let prog = Arc::clone(&self.prog);
        let jit = self.backend == Backend::JustInTime && self.overlay.is_none();
        loop {
            let b = prog.block(eng.frame.target);
            let traced = self.overlay.is_none() && b.function != "reboot";
            if eng.instr == 0 {
                self.counters.blocks_run += 1;
            }
            loop {
                if jit && self.meter.low_energy {
                    self.checkpoint(Some(&eng))?;
                    return Err(Fault::Off);
                }
                if traced {
                    self.insn_trace.push((b.id, eng.instr));
                }
                let Some(call) = b.calls.get(eng.instr as usize) else {
                    break;
                };
                self.meter.phase = Phase::Useful;
                self.exec_call(b, call, &eng)?;
                eng.instr += 1;
            }
            self.meter.phase = Phase::Stack;
            match self.exec_terminator(b, &eng)? {
                Some(frame) => {
                    eng = Engine {
                        frame,
                        instr: 0,
                        iter: eng.iter + 1,
                    };
                    self.counters.loop_iterations += 1;
                }
                None => break,
            }
        }
        if self.overlay.is_some() {
            return Ok(());
        }
        self.meter.phase = Phase::ConsumeCommit;
        let seq = self.rd32(RT_SEQ as u32)?;
        self.wr32(RT_SEQ as u32, seq.wrapping_add(1))?;
        self.commit()
    }

    fn addr_of(&self, op: Operand, frame: &Frame) -> Result<u32, Fault> {
        Ok(match op {
            Operand::Slot(s) => match self.prog.slots.get(s as usize) {
                Some(info) => info.addr as u32,
                None => return Err(VmError::CorruptState(format!("no slot {s}")).into()),
            },
            Operand::FlowIn => frame.flow_in as u32,
            Operand::Param(i) => match frame.params.get(i as usize) {
                Some(a) => *a as u32,
                None => return Err(VmError::CorruptState(format!("frame has no parameter {i}")).into()),
            },
            Operand::Flow => RT_FLOW as u32,
        })
    }

    fn resolve(&mut self, t: &Template, b: &BasicBlock, frame: &Frame) -> Result<Frame, Fault> {
        let target = match t.target {
            Target::Block(x) => x,
            Target::Dynamic(op) => {
                let a = self.addr_of(op, frame)?;
                let v = self.load(a, ValueKind::Func, b)?;
                match self.prog.blocks.get(v as usize) {
                    Some(tb) if tb.frame_params as usize == t.params.len() => v as BlockId,
                    _ => return Err(VmError::CorruptState(format!("bad function value {v}")).into()),
                }
            }
        };
        let flow_in = self.addr_of(t.flow_in, frame)? as u16;
        let mut params = Vec::with_capacity(t.params.len());
        for p in &t.params {
            params.push(self.addr_of(*p, frame)? as u16);
        }
        Ok(Frame {
            target,
            flow_in,
            params,
        })
    }

    /// Runs a terminator. Returns the next frame when a self-loop may
    /// continue inside the current transaction.
    fn exec_terminator(&mut self, b: &BasicBlock, eng: &Engine) -> Result<Option<Frame>, Fault> {
        let mut frames = match &b.terminator {
            Terminator::Return(op) => {
                let a = self.addr_of(*op, &eng.frame)?;
                if a != RT_FLOW as u32 {
                    let v = self.rd32(a)?;
                    let t = self.tag(a);
                    self.store(RT_FLOW as u32, v, t)?;
                }
                Vec::new()
            }
            Terminator::Push(ts) => {
                let mut v = Vec::with_capacity(ts.len());
                for t in ts {
                    v.push(self.resolve(t, b, &eng.frame)?);
                }
                v
            }
            Terminator::Select {
                cond,
                then,
                otherwise,
                below,
            } => {
                let a = self.addr_of(*cond, &eng.frame)?;
                let c = self.load(a, ValueKind::Bool, b)?;
                let mut v = Vec::with_capacity(below.len() + 1);
                for t in below {
                    v.push(self.resolve(t, b, &eng.frame)?);
                }
                v.push(self.resolve(if c != 0 { then } else { otherwise }, b, &eng.frame)?);
                v
            }
        };
        if b.loop_unroll > 0
            && frames.len() == 1
            && frames[0].target == b.id
            && eng.iter + 1 < b.loop_unroll as u32
        {
            return Ok(frames.pop());
        }
        self.push_frames(&frames)?;
        Ok(None)
    }

    fn sense(&mut self, ch: u32) -> Result<u32, Fault> {
        if let Some(o) = &mut self.overlay {
            let n = sensors::isr_index(o.ordinal, o.reads);
            o.reads += 1;
            return Ok(self.sensors.read(ch, n));
        }
        let cursor = RT_CURSORS as u32 + 2 * ch;
        let n = self.rd(cursor)?;
        self.wr(cursor, n.wrapping_add(1))?;
        Ok(self.sensors.read(ch, n as u64))
    }

    fn exec_call(&mut self, b: &BasicBlock, c: &PrimitiveCall, eng: &Engine) -> Result<(), Fault> {
        let kind = |i: usize| c.kinds.get(i).copied().unwrap_or(ValueKind::Any);
        let fa = self.addr_of(c.flow_in, &eng.frame)?;
        let x = self.load(fa, kind(0), b)?;
        let mut pa = [0u32; 2];
        let mut pv = [0u32; 2];
        for (i, op) in c.params.iter().enumerate().take(2) {
            pa[i] = self.addr_of(*op, &eng.frame)?;
            pv[i] = self.load(pa[i], kind(i + 1), b)?;
        }
        if self.overlay.is_none() {
            let op = if c.is_io { MicroOp::Io(c.prim) } else { MicroOp::Primitive(c.prim) };
            self.meter.tick(op)?;
        }
        let rk = kind(c.params.len() + 1);
        let rtag = if rk == ValueKind::Any { UNKNOWN } else { rk.code() };
        let (y, z) = (pv[0], pv[1]);
        let (xi, yi) = (x as i32, y as i32);
        let (xf, yf) = (f32::from_bits(x), f32::from_bits(y));
        let int = |v: i32| Some((v as u32, rtag));
        let flt = |v: f32| Some((v.to_bits(), rtag));
        let boolean = |v: bool| Some((v as u32, rtag));
        let trap_div = || -> Fault { VmError::TrapDivideByZero { block: b.name.clone() }.into() };
        let result: Option<(u32, u8)> = match c.prim {
            Prim::Id => Some((x, self.tag(fa))),
            Prim::Void => Some((0, ValueKind::Void.code())),
            Prim::Select => {
                let a = if x != 0 { pa[0] } else { pa[1] };
                Some((if x != 0 { y } else { z }, self.tag(a)))
            }
            Prim::Set => {
                let t = self.tag(pa[0]);
                self.store(fa, y, t)?;
                Some((y, t))
            }
            Prim::GetAt | Prim::SetAt => {
                let (base, len) = (x & 0xffff, x >> 16);
                if yi < 0 || yi as u32 >= len {
                    return Err(VmError::TrapIndexOutOfBounds {
                        block: b.name.clone(),
                        index: yi,
                        len,
                    }
                    .into());
                }
                let ea = base + yi as u32 * VALUE_BYTES;
                if c.prim == Prim::GetAt {
                    let v = self.load(ea, rk, b)?;
                    Some((v, self.tag(ea)))
                } else {
                    let t = self.tag(pa[1]);
                    self.store(ea, z, t)?;
                    Some((x, self.tag(fa)))
                }
            }
            Prim::Add => int(xi.wrapping_add(yi)),
            Prim::Sub => int(xi.wrapping_sub(yi)),
            Prim::Mul => int(xi.wrapping_mul(yi)),
            Prim::Div => int(xi.checked_div(yi).or_else(|| (yi == -1).then(|| xi.wrapping_neg())).ok_or_else(trap_div)?),
            Prim::Rem => int(if yi == 0 { return Err(trap_div()) } else { xi.wrapping_rem(yi) }),
            Prim::And => int(xi & yi),
            Prim::Or => int(xi | yi),
            Prim::Xor => int(xi ^ yi),
            Prim::Shl => int(if (0..32).contains(&yi) { (x << yi) as i32 } else { 0 }),
            Prim::Shr => int(if (0..32).contains(&yi) { (x >> yi) as i32 } else { 0 }),
            Prim::Lt => boolean(xi < yi),
            Prim::Le => boolean(xi <= yi),
            Prim::Gt => boolean(xi > yi),
            Prim::Ge => boolean(xi >= yi),
            Prim::Eq => boolean(xi == yi),
            Prim::Ne => boolean(xi != yi),
            Prim::FAdd => flt(xf + yf),
            Prim::FSub => flt(xf - yf),
            Prim::FMul => flt(xf * yf),
            Prim::FDiv => flt(xf / yf),
            Prim::FSqrt => flt(xf.sqrt()),
            Prim::FLt => boolean(xf < yf),
            Prim::FLe => boolean(xf <= yf),
            Prim::FGt => boolean(xf > yf),
            Prim::FGe => boolean(xf >= yf),
            Prim::IToF => flt(xi as f32),
            Prim::FToI => int(xf as i32),
            Prim::Not => boolean(x == 0),
            Prim::BAnd => boolean(x != 0 && y != 0),
            Prim::BOr => boolean(x != 0 || y != 0),
            Prim::GetTemp => {
                let v = self.sense(TEMP_CHANNEL)?;
                let t = ValueKind::Float.code();
                self.store(fa, v, t)?;
                Some((v, t))
            }
            Prim::Sample => {
                if x >= SENSOR_CHANNELS {
                    return Err(VmError::TrapIndexOutOfBounds {
                        block: b.name.clone(),
                        index: xi,
                        len: SENSOR_CHANNELS,
                    }
                    .into());
                }
                let v = self.sense(x)?;
                Some((v, ValueKind::Int.code()))
            }
            Prim::Emit => {
                if self.overlay.is_none() {
                    let seq = self.rd32(RT_SEQ as u32)?.wrapping_add(1);
                    let k = match kind(0) {
                        ValueKind::Any => ValueKind::from_code(self.tag(fa)).unwrap_or(ValueKind::Any),
                        k => k,
                    };
                    self.outputs.push(OutputRecord {
                        seq,
                        iter: eng.iter,
                        instr: eng.instr,
                        kind: k,
                        bits: x,
                        text: render_value(&self.prog, k, x),
                    });
                }
                None
            }
            Prim::AddEventQ => {
                match &mut self.overlay {
                    Some(o) => o.events.push((y, x)),
                    None => self.enqueue(y, x)?,
                }
                None
            }
            Prim::Apply => {
                return Err(VmError::CorruptState("apply cannot run as a call".into()).into());
            }
        };
        if let (Some(r), Some((v, t))) = (c.result, result) {
            let a = self.addr_of(r, &eng.frame)?;
            self.store(a, v, t)?;
        }
        Ok(())
    }

    // Checkpoints.

    fn checkpoint(&mut self, eng: Option<&Engine>) -> Result<(), Fault> {
        let l = self.prog.layout.clone();
        self.meter.phase = Phase::Checkpoint;
        let seq = self.rd(RT_CKPT_SEQ as u32)?;
        let next = if seq == u16::MAX { 2 } else { seq + 1 };
        let buf = l.ckpt_buf(next as u32 % 2) as u32;
        let mut words = vec![0u16; l.ckpt_words() as usize];
        if let Some(e) = eng {
            words[0] = 1;
            words[1] = e.instr as u16;
            words[2] = e.iter as u16;
            words[3] = e.frame.target;
            words[4] = e.frame.flow_in;
            for (k, p) in e.frame.params.iter().enumerate() {
                words[5 + k] = *p;
            }
        }
        for (k, w) in words.iter().enumerate() {
            self.wr_raw(buf + 2 * k as u32, *w)?;
        }
        self.wr_raw(RT_CKPT_SEQ as u32, next)?;
        self.counters.checkpoints += 1;
        self.ckpt_trace[next as usize % 2] = self.insn_trace.len();
        Ok(())
    }

    /// Reads the newest complete checkpoint; `Some` when it was taken
    /// inside a block.
    fn restore_checkpoint(&mut self) -> Result<Option<Engine>, Fault> {
        let l = self.prog.layout.clone();
        let seq = self.rd(RT_CKPT_SEQ as u32)?;
        let saved = if seq == 0 { 0 } else { self.ckpt_trace[seq as usize % 2] };
        self.counters.reexecutions += self.insn_trace.len().saturating_sub(saved) as u64;
        self.insn_trace.truncate(saved);
        if seq == 0 {
            return Ok(None);
        }
        let buf = l.ckpt_buf(seq as u32 % 2) as u32;
        if self.rd(buf)? == 0 {
            return Ok(None);
        }
        let instr = self.rd(buf + 2)? as u32;
        let iter = self.rd(buf + 4)? as u32;
        let target = self.rd(buf + 6)?;
        let flow_in = self.rd(buf + 8)?;
        let Some(b) = self.prog.blocks.get(target as usize) else {
            return Err(VmError::CorruptState(format!("checkpoint names block {target}")).into());
        };
        let mut params = Vec::new();
        for k in 0..b.frame_params as u32 {
            params.push(self.rd(buf + 10 + 2 * k)?);
        }
        Ok(Some(Engine {
            frame: Frame {
                target,
                flow_in,
                params,
            },
            instr,
            iter,
        }))
    }

    /// Units of energy a checkpoint costs.
    pub fn checkpoint_cost(&self, m: &EnergyModel) -> u64 {
        (self.prog.layout.ckpt_words() as u64 + 1) * m.costs.word_write + m.costs.word_read
    }

    /// Level above the off threshold at which the checkpointing backend
    /// is warned: enough to finish the current instruction and checkpoint.
    pub fn jit_margin(&self, m: &EnergyModel) -> u64 {
        let ckpt = self.checkpoint_cost(m);
        (2 * ckpt).max(ckpt + self.max_unit_cost(m) + m.costs.max_word())
    }

    /// Smallest on/off window that lets the checkpointing backend finish
    /// at least one unit of work per charge.
    pub fn min_jit_window(&self, m: &EnergyModel) -> u64 {
        self.jit_margin(m) + self.restart_cost(m) + self.max_unit_cost(m) + 1
    }

    fn restart_cost(&self, m: &EnergyModel) -> u64 {
        let r = m.costs.word_read;
        let w = m.costs.word_write;
        let l = &self.prog.layout;
        (l.ckpt_words() as u64 + 1) * r + 6 * r + 6 * w
    }

    /// Upper bound on the energy of the longest stretch that cannot stop
    /// for a checkpoint: one instruction, a terminator, or a queue
    /// operation.
    pub fn max_unit_cost(&self, m: &EnergyModel) -> u64 {
        let c = &m.costs;
        let (r, w) = (c.word_read, c.word_write);
        let l = &self.prog.layout;
        let fw = l.frame_words() as u64;
        let enqueue = 4 * r + 5 * w;
        let mut best = (2 + fw) * r + 2 * w + fw * w + 2 * w + 2 * w;
        for b in &self.prog.blocks {
            for call in &b.calls {
                let reads = 2 * (1 + call.params.len() as u64) + 2 + 2 + 1;
                let writes = 4 + 1;
                let prim = if call.is_io { c.io } else { c.primitive };
                best = best.max(reads * r + writes * w + prim + enqueue);
            }
            let n = b.terminator.max_pushes() as u64;
            let term = (2 + 2 * n + 1 + 2) * r + (2 + n * fw + 1) * w + 2 * r + 2 * w + w;
            best = best.max(term);
        }
        let isr_words: u64 = {
            let pt = points_to(&self.prog);
            let pages: BTreeSet<u32> = interrupt_blocks(&self.prog)
                .into_iter()
                .flat_map(|b| object_pages(&self.prog, &pt, b))
                .collect();
            pages.len() as u64 * (l.page_size as u64 / 2)
        };
        let delivery = isr_words * w + l.queue_capacity as u64 * enqueue + 3 * r + 3 * w;
        best.max(delivery)
    }
}

/// Text form of a value for output records.
pub fn render_value(p: &ContinuationProgram, kind: ValueKind, bits: u32) -> String {
    match kind {
        ValueKind::Int | ValueKind::Any => (bits as i32).to_string(),
        ValueKind::Float => format!("{:?}", f32::from_bits(bits)),
        ValueKind::Bool => (bits != 0).to_string(),
        ValueKind::Void => "()".into(),
        ValueKind::Func => p
            .function_name(bits as BlockId)
            .map_or_else(|| format!("b{bits}"), str::to_string),
        ValueKind::Array => format!("array[{}]", bits >> 16),
    }
}
