//! Power failure injection: capacitor energy accounting, scripted crash
//! points and scripted interrupts.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nvm::{Crash, Meter, MicroOp};

mod fuzz;

pub use fuzz::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PowerError {
    #[error("invalid energy model: {0}")]
    InvalidModel(String),
    #[error("crash steps must be strictly increasing")]
    Unordered,
    #[error("line {line}: {message}")]
    Script { line: usize, message: String },
    #[error("no cost for micro-op {0}")]
    CostUnknown(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostTable {
    pub word_read: u64,
    pub word_write: u64,
    /// Cost of copying a whole page.
    pub page_copy: u64,
    pub primitive: u64,
    pub io: u64,
}

impl CostTable {
    pub fn for_page(page_size: u32) -> Self {
        CostTable {
            word_read: 1,
            word_write: 2,
            page_copy: 2 * (page_size as u64 / 2),
            primitive: 4,
            io: 16,
        }
    }

    /// Cost of one micro-step; page copies are charged per word.
    pub fn cost(&self, op: MicroOp, words_per_page: u32) -> u64 {
        match op {
            MicroOp::WordRead => self.word_read,
            MicroOp::WordWrite => self.word_write,
            MicroOp::PageCopy => self.page_copy.div_ceil(words_per_page.max(1) as u64).max(1),
            MicroOp::Primitive(_) => self.primitive,
            MicroOp::Io(_) => self.io,
        }
    }

    pub fn max_word(&self) -> u64 {
        self.word_read.max(self.word_write)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnergyModel {
    pub capacity: u64,
    pub threshold_on: u64,
    pub threshold_off: u64,
    pub costs: CostTable,
    /// `(duration in micro-steps, units gained per step)`, repeated cyclically.
    pub harvest: Vec<(u64, u64)>,
    pub words_per_page: u32,
}

impl EnergyModel {
    pub fn new(capacity: u64, threshold_on: u64, threshold_off: u64, page_size: u32) -> Self {
        EnergyModel {
            capacity,
            threshold_on,
            threshold_off,
            costs: CostTable::for_page(page_size),
            harvest: Vec::new(),
            words_per_page: page_size / 2,
        }
    }

    pub fn validate(&self) -> Result<(), PowerError> {
        let bad = |m: &str| Err(PowerError::InvalidModel(m.to_string()));
        if !(self.threshold_off < self.threshold_on && self.threshold_on <= self.capacity) {
            return bad("need threshold_off < threshold_on <= capacity");
        }
        let c = &self.costs;
        if [c.word_read, c.word_write, c.page_copy, c.primitive, c.io].contains(&0) {
            return bad("all costs must be positive");
        }
        if self.words_per_page == 0 {
            return bad("page has no words");
        }
        Ok(())
    }

    pub fn cost(&self, op: MicroOp) -> u64 {
        self.costs.cost(op, self.words_per_page)
    }

    /// A random capacitor and harvest trace whose on/off window fits at
    /// least `min_window` units.
    pub fn random(seed: u64, page_size: u32, min_window: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let off = rng.gen_range(10..100);
        let window = min_window + rng.gen_range(0..=min_window);
        let on = off + window;
        let capacity = on + rng.gen_range(0..50);
        let mut m = EnergyModel::new(capacity, on, off, page_size);
        let segments = rng.gen_range(1..6);
        for _ in 0..segments {
            let rate = if rng.gen_bool(0.5) { 0 } else { rng.gen_range(0..2) };
            m.harvest.push((rng.gen_range(50..5000), rate));
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CrashSchedule {
    steps: Vec<u64>,
}

impl CrashSchedule {
    pub fn new(steps: Vec<u64>) -> Result<Self, PowerError> {
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PowerError::Unordered);
        }
        Ok(CrashSchedule { steps })
    }

    pub fn single(step: u64) -> Self {
        CrashSchedule { steps: vec![step] }
    }

    /// `count` distinct crash points drawn from `1..=horizon`.
    pub fn random(seed: u64, count: usize, horizon: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps: Vec<u64> = (0..count).map(|_| rng.gen_range(1..=horizon.max(1))).collect();
        steps.sort_unstable();
        steps.dedup();
        CrashSchedule { steps }
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedInterrupt {
    pub step: u64,
    pub handler: String,
    /// Raw bits of the interrupt's flow-in object.
    pub payload: u32,
}

/// Interrupts raised at fixed micro-steps, in step order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InterruptScript {
    pub entries: Vec<ScriptedInterrupt>,
}

impl InterruptScript {
    pub fn new(entries: Vec<ScriptedInterrupt>) -> Result<Self, PowerError> {
        if entries.windows(2).any(|w| w[0].step > w[1].step) {
            return Err(PowerError::Unordered);
        }
        Ok(InterruptScript { entries })
    }

    /// `count` interrupts of `handler`, `every` steps apart.
    pub fn periodic(handler: &str, first: u64, every: u64, count: usize) -> Self {
        InterruptScript {
            entries: (0..count as u64)
                .map(|i| ScriptedInterrupt {
                    step: first + i * every,
                    handler: handler.to_string(),
                    payload: 0,
                })
                .collect(),
        }
    }

    /// Lines of `step handler [value]`; `#` starts a comment. Values with a
    /// decimal point are floats.
    pub fn parse(text: &str) -> Result<Self, PowerError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| PowerError::Script {
                line: i + 1,
                message: m.to_string(),
            };
            let mut parts = line.split_whitespace();
            let step = parts
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| err("expected a step number"))?;
            let handler = parts.next().ok_or_else(|| err("expected a handler name"))?;
            let payload = match parts.next() {
                None => 0,
                Some(v) if v.contains('.') => v.parse::<f32>().map_err(|_| err("bad value"))?.to_bits(),
                Some(v) => v.parse::<i32>().map_err(|_| err("bad value"))? as u32,
            };
            if parts.next().is_some() {
                return Err(err("trailing text"));
            }
            entries.push(ScriptedInterrupt {
                step,
                handler: handler.to_string(),
                payload,
            });
        }
        InterruptScript::new(entries).map_err(|_| PowerError::Script {
            line: 0,
            message: "interrupt steps must not decrease".into(),
        })
    }
}

/// Harvest trace lines of `duration rate`.
pub fn parse_harvest(text: &str) -> Result<Vec<(u64, u64)>, PowerError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let nums: Vec<u64> = line.split_whitespace().filter_map(|s| s.parse().ok()).collect();
        if nums.len() != 2 || line.split_whitespace().count() != 2 {
            return Err(PowerError::Script {
                line: i + 1,
                message: "expected `duration rate`".into(),
            });
        }
        out.push((nums[0], nums[1]));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PowerMode {
    Continuous,
    Energy(EnergyModel),
    Schedule(CrashSchedule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerDecision {
    Continue,
    LowEnergySignal,
    Crash,
}

#[derive(Debug, Clone)]
pub struct PowerDriver {
    pub mode: PowerMode,
    pub interrupts: InterruptScript,
    step: u64,
    level: u64,
    next_crash: usize,
    /// Level below which the low-energy signal fires; only used by the
    /// checkpointing backend.
    signal_below: Option<u64>,
    signalled: bool,
    harvest_pos: usize,
    harvest_left: u64,
}

impl PowerDriver {
    pub fn new(mode: PowerMode) -> Self {
        let level = match &mode {
            PowerMode::Energy(m) => m.threshold_on,
            _ => 0,
        };
        let harvest_left = match &mode {
            PowerMode::Energy(m) => m.harvest.first().map_or(0, |h| h.0),
            _ => 0,
        };
        PowerDriver {
            mode,
            interrupts: InterruptScript::default(),
            step: 0,
            level,
            next_crash: 0,
            signal_below: None,
            signalled: false,
            harvest_pos: 0,
            harvest_left,
        }
    }

    pub fn continuous() -> Self {
        PowerDriver::new(PowerMode::Continuous)
    }

    pub fn schedule(s: CrashSchedule) -> Self {
        PowerDriver::new(PowerMode::Schedule(s))
    }

    pub fn energy(m: EnergyModel) -> Result<Self, PowerError> {
        m.validate()?;
        Ok(PowerDriver::new(PowerMode::Energy(m)))
    }

    pub fn with_interrupts(mut self, s: InterruptScript) -> Self {
        self.interrupts = s;
        self
    }

    /// Micro-steps taken so far, including idle time skipped over.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn level(&self) -> u64 {
        self.level
    }

    /// Moves the clock forward without spending energy.
    pub fn idle_until(&mut self, step: u64) {
        self.step = self.step.max(step);
    }

    /// Arms the low-energy signal `margin` units above the off threshold.
    pub fn arm_signal(&mut self, margin: u64) {
        if let PowerMode::Energy(m) = &self.mode {
            self.signal_below = Some(m.threshold_off + margin);
        }
    }

    /// Refills the capacitor after a power failure.
    pub fn recharge(&mut self) {
        if let PowerMode::Energy(m) = &self.mode {
            self.level = m.threshold_on;
        }
        self.signalled = false;
    }

    pub fn is_continuous(&self) -> bool {
        self.mode == PowerMode::Continuous
    }

    /// Ends scheduled or energy-driven failures; the rest of the run is on
    /// continuous power.
    /// Switches to scheduled failures; steps already passed never fire.
    pub fn set_schedule(&mut self, s: CrashSchedule) {
        self.mode = PowerMode::Schedule(s);
        self.next_crash = 0;
        self.signal_below = None;
    }

    pub fn go_continuous(&mut self) {
        self.mode = PowerMode::Continuous;
        self.signal_below = None;
    }

    pub fn tick(&mut self, op: MicroOp) -> PowerDecision {
        self.step += 1;
        match &self.mode {
            PowerMode::Continuous => PowerDecision::Continue,
            PowerMode::Schedule(s) => {
                while self.next_crash < s.steps.len() && s.steps[self.next_crash] < self.step {
                    self.next_crash += 1;
                }
                if s.steps.get(self.next_crash) == Some(&self.step) {
                    self.next_crash += 1;
                    PowerDecision::Crash
                } else {
                    PowerDecision::Continue
                }
            }
            PowerMode::Energy(m) => {
                if !m.harvest.is_empty() {
                    if self.harvest_left == 0 {
                        self.harvest_pos = (self.harvest_pos + 1) % m.harvest.len();
                        self.harvest_left = m.harvest[self.harvest_pos].0;
                    }
                    self.harvest_left = self.harvest_left.saturating_sub(1);
                    self.level = (self.level + m.harvest[self.harvest_pos].1).min(m.capacity);
                }
                let cost = m.cost(op);
                if self.level < m.threshold_off + cost {
                    return PowerDecision::Crash;
                }
                self.level -= cost;
                match self.signal_below {
                    Some(t) if !self.signalled && self.level < t => {
                        self.signalled = true;
                        PowerDecision::LowEnergySignal
                    }
                    _ => PowerDecision::Continue,
                }
            }
        }
    }
}

impl Meter for PowerDriver {
    fn tick(&mut self, op: MicroOp) -> Result<(), Crash> {
        match PowerDriver::tick(self, op) {
            PowerDecision::Crash => Err(Crash),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PowerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PowerMode::Continuous => f.write_str("continuous"),
            PowerMode::Energy(m) => write!(
                f,
                "energy(capacity={}, on={}, off={})",
                m.capacity, m.threshold_on, m.threshold_off
            ),
            PowerMode::Schedule(s) => write!(f, "schedule({} crashes)", s.steps.len()),
        }
    }
}
