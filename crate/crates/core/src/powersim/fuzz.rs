//! Crash-point fuzzing against the continuous-power oracle.

use std::fmt::Write;
use std::sync::Arc;

use rayon::prelude::*;

use super::{CrashSchedule, EnergyModel, InterruptScript, PowerDriver};
use crate::frontend::{Backend, VmConfig};
use crate::lowering::{BlockId, ContinuationProgram, ValueKind};
use crate::vm::{CommitCheck, RunReport, SensorModel, Step, Vm, VmError};

/// Ticks between snapshots of the reference run.
const SNAPSHOT_EVERY: u64 = 512;

/// A program with everything that decides its behavior.
#[derive(Clone)]
pub struct FuzzTarget {
    pub prog: Arc<ContinuationProgram>,
    pub cfg: VmConfig,
    pub sensors: SensorModel,
    pub interrupts: InterruptScript,
    pub commit_check: Option<CommitCheck>,
}

impl FuzzTarget {
    pub fn new(prog: impl Into<Arc<ContinuationProgram>>, cfg: VmConfig) -> Self {
        FuzzTarget {
            prog: prog.into(),
            cfg,
            sensors: SensorModel::default(),
            interrupts: InterruptScript::default(),
            commit_check: None,
        }
    }

    pub fn with_sensors(mut self, s: SensorModel) -> Self {
        self.sensors = s;
        self
    }

    pub fn with_interrupts(mut self, s: InterruptScript) -> Self {
        self.interrupts = s;
        self
    }

    pub fn with_commit_check(mut self, f: CommitCheck) -> Self {
        self.commit_check = Some(f);
        self
    }

    /// A booted machine on `backend`, not yet given power.
    pub fn machine(&self, backend: Backend) -> Result<Vm, VmError> {
        let cfg = VmConfig {
            vm_backend: backend,
            ..self.cfg.clone()
        };
        let mut vm = Vm::new(Arc::clone(&self.prog), &cfg)?.with_sensors(self.sensors.clone());
        if let Some(f) = self.commit_check {
            vm = vm.with_commit_check(f);
        }
        vm.boot()?;
        Ok(vm)
    }

    /// The continuous-power run every intermittent run must match.
    pub fn oracle(&self) -> Result<Oracle, VmError> {
        let mut vm = self.machine(Backend::Test)?;
        let report = vm.run_until_idle(PowerDriver::continuous().with_interrupts(self.interrupts.clone()))?;
        Ok(Oracle {
            values: report.values(),
            globals: report.globals.clone(),
            trace: vm.instruction_trace().to_vec(),
            report,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Oracle {
    pub values: Vec<(ValueKind, u32)>,
    pub globals: Vec<(String, Vec<u32>)>,
    pub trace: Vec<(BlockId, u32)>,
    pub report: RunReport,
}

impl Oracle {
    /// Why `r` differs from the oracle, if it does.
    pub fn diff(&self, r: &RunReport) -> Option<String> {
        let values = r.values();
        if values != self.values {
            return Some(format!("outputs {:?}, expected {:?}", values, self.values));
        }
        for ((n, got), (_, want)) in r.globals.iter().zip(&self.globals) {
            if got != want {
                return Some(format!("global {n} = {got:?}, expected {want:?}"));
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    /// Crash step or seed of the failing run.
    pub case: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FuzzReport {
    pub program: String,
    pub backend: String,
    pub runs: u64,
    pub mismatches: Vec<Mismatch>,
    pub crashes: u64,
    pub reboots: u64,
    pub checkpoints: u64,
    pub reexecutions: u64,
    pub duplicate_outputs: u64,
    pub commit_violations: u64,
    pub steps: u64,
}

impl FuzzReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }

    fn absorb(&mut self, case: u64, r: Result<(RunReport, Option<String>), VmError>) {
        self.runs += 1;
        match r {
            Ok((rep, diff)) => {
                let c = &rep.counters;
                self.crashes += c.crashes;
                self.reboots += c.reboots;
                self.checkpoints += c.checkpoints;
                self.reexecutions += c.reexecutions;
                self.duplicate_outputs += c.duplicate_outputs;
                self.commit_violations += c.commit_violations;
                self.steps += c.steps;
                if let Some(reason) = diff {
                    self.mismatches.push(Mismatch { case, reason });
                }
            }
            Err(e) => self.mismatches.push(Mismatch {
                case,
                reason: e.to_string(),
            }),
        }
    }

    /// Summary line followed by a `key = value` block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} on {}: {} runs, {} mismatches",
            self.program,
            self.backend,
            self.runs,
            self.mismatches.len()
        );
        for (k, v) in [
            ("runs", self.runs),
            ("mismatches", self.mismatches.len() as u64),
            ("crashes", self.crashes),
            ("reboots", self.reboots),
            ("checkpoints", self.checkpoints),
            ("reexecutions", self.reexecutions),
            ("duplicate_outputs", self.duplicate_outputs),
            ("commit_violations", self.commit_violations),
            ("steps", self.steps),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        for m in self.mismatches.iter().take(20) {
            let _ = writeln!(out, "mismatch.{} = {}", m.case, m.reason);
        }
        out
    }
}

struct Snapshot {
    vm: Vm,
    /// Driver steps this snapshot's turn of the main loop may crash at.
    first: u64,
}

/// Runs the undo-logging backend once per crash step `k` in
/// `1..=min(steps of the continuous run, budget)`, with power failing at
/// `k` only, and compares each run with the oracle.
pub fn exhaustive_single_crash(t: &FuzzTarget, budget: u64) -> Result<FuzzReport, VmError> {
    let oracle = t.oracle()?;
    let mut vm = t.machine(Backend::Rewinding)?;
    vm.set_power(PowerDriver::continuous().with_interrupts(t.interrupts.clone()))?;

    // Reference run, remembering which driver steps did work.
    let mut snaps: Vec<Snapshot> = Vec::new();
    let mut ks: Vec<(u64, usize)> = Vec::new();
    let mut last_snap_ticks = None;
    loop {
        let ticks = vm.steps();
        if last_snap_ticks.map_or(true, |s| ticks - s >= SNAPSHOT_EVERY) {
            snaps.push(Snapshot {
                vm: vm.clone(),
                first: vm.power().step() + 1,
            });
            last_snap_ticks = Some(ticks);
        }
        let before = vm.power().step();
        let step = vm.step()?;
        let after = vm.power().step();
        if step != Step::Idle {
            for k in before + 1..=after {
                ks.push((k, snaps.len() - 1));
            }
        }
        if step == Step::Halted || ks.len() as u64 >= budget {
            break;
        }
    }
    ks.truncate(budget as usize);

    let results: Vec<(u64, Result<(RunReport, Option<String>), VmError>)> = ks
        .par_iter()
        .map(|&(k, s)| {
            let mut vm = snaps[s].vm.clone();
            debug_assert!(snaps[s].first <= k);
            vm.schedule_crashes(CrashSchedule::single(k));
            let r = vm.run().map(|rep| {
                let diff = if rep.counters.crashes == 0 {
                    Some(format!("no crash at step {k}"))
                } else {
                    oracle.diff(&rep)
                };
                (rep, diff)
            });
            (k, r)
        })
        .collect();
    let mut report = FuzzReport {
        program: t.prog.name.clone(),
        backend: Backend::Rewinding.to_string(),
        ..FuzzReport::default()
    };
    for (k, r) in results {
        report.absorb(k, r);
    }
    Ok(report)
}

/// Runs `backend` once per seed with `crashes` random failure points in
/// the first `horizon` steps.
pub fn random_crash_fuzz(
    t: &FuzzTarget,
    backend: Backend,
    seeds: std::ops::Range<u64>,
    crashes: usize,
    horizon: u64,
) -> Result<FuzzReport, VmError> {
    let oracle = t.oracle()?;
    let results: Vec<_> = seeds
        .clone()
        .into_par_iter()
        .map(|seed| {
            let r = t.machine(backend).and_then(|mut vm| {
                let power = PowerDriver::schedule(CrashSchedule::random(seed, crashes, horizon))
                    .with_interrupts(t.interrupts.clone());
                vm.run_until_idle(power).map(|rep| {
                    let d = oracle.diff(&rep);
                    (rep, d)
                })
            });
            (seed, r)
        })
        .collect();
    let mut report = FuzzReport {
        program: t.prog.name.clone(),
        backend: backend.to_string(),
        ..FuzzReport::default()
    };
    for (seed, r) in results {
        report.absorb(seed, r);
    }
    Ok(report)
}

/// Smallest on/off window the checkpointing backend accepts for `t`.
pub fn min_energy_window(t: &FuzzTarget) -> Result<u64, VmError> {
    let vm = t.machine(Backend::JustInTime)?;
    let probe = EnergyModel::new(1 << 40, 1 << 39, 1, t.cfg.page_size_bytes);
    Ok(vm.min_jit_window(&probe))
}

/// Runs `backend` once per seed under a random capacitor and harvest
/// trace. Checkpointing runs must also resume exactly where they stopped:
/// no instruction may run twice and the instruction trace must equal the
/// oracle's.
pub fn random_energy_fuzz(
    t: &FuzzTarget,
    backend: Backend,
    seeds: std::ops::Range<u64>,
) -> Result<FuzzReport, VmError> {
    let oracle = t.oracle()?;
    let window = min_energy_window(t)?;
    let results: Vec<_> = seeds
        .clone()
        .into_par_iter()
        .map(|seed| {
            let model = EnergyModel::random(seed, t.cfg.page_size_bytes, window);
            let r = t.machine(backend).and_then(|mut vm| {
                let power = PowerDriver::energy(model)
                    .map_err(|e| VmError::Config(e.to_string()))?
                    .with_interrupts(t.interrupts.clone());
                let rep = vm.run_until_idle(power)?;
                let mut d = oracle.diff(&rep);
                if backend == Backend::JustInTime && d.is_none() {
                    if rep.counters.reexecutions > 0 {
                        d = Some(format!("{} instructions re-executed", rep.counters.reexecutions));
                    } else if vm.instruction_trace() != oracle.trace.as_slice() {
                        d = Some("instruction trace differs from the oracle".into());
                    }
                }
                Ok((rep, d))
            });
            (seed, r)
        })
        .collect();
    let mut report = FuzzReport {
        program: t.prog.name.clone(),
        backend: backend.to_string(),
        ..FuzzReport::default()
    };
    for (seed, r) in results {
        report.absorb(seed, r);
    }
    Ok(report)
}
