//! Benchmark programs and their harness.

pub mod oracle;

use std::fmt::{self, Write};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use thiserror::Error;

use crate::frontend::{parse_config, Backend, Optimization, VmConfig};
use crate::lowering::{ContinuationProgram, ValueKind};
use crate::powersim::{CrashSchedule, FuzzTarget, InterruptScript, PowerDriver, PowerMode};
use crate::vm::{OverheadSplit, RunReport, SensorModel, Vm, VmError};
use crate::{compile_source, BuildError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BenchName {
    Bc,
    Cf,
    Ar,
    Sense,
}

impl BenchName {
    pub const ALL: [BenchName; 4] = [BenchName::Bc, BenchName::Cf, BenchName::Ar, BenchName::Sense];
}

impl fmt::Display for BenchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchName::Bc => "BC",
            BenchName::Cf => "CF",
            BenchName::Ar => "AR",
            BenchName::Sense => "SENSE",
        })
    }
}

impl FromStr for BenchName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "BC" => Ok(BenchName::Bc),
            "CF" => Ok(BenchName::Cf),
            "AR" => Ok(BenchName::Ar),
            "SENSE" => Ok(BenchName::Sense),
            _ => Err(format!("unknown benchmark `{s}` (expected BC, CF, AR or SENSE)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{0}")]
    Build(#[from] BuildError),
    #[error("{0}")]
    Vm(#[from] VmError),
    #[error("{0}")]
    Config(String),
    #[error("{bench}: output differs from the oracle: {details}")]
    OracleMismatch { bench: String, details: String },
    #[error("{bench}: {details}")]
    Regression { bench: String, details: String },
}

/// Heater threshold in sense.pl.
const SENSE_LIMIT: f32 = 25.0;
const SENSE_TEMPS: [f32; 3] = [22.0, 27.5, 24.0];
const SENSE_TIMERS: u32 = 12;

/// Size of the held-out AR stream.
const AR_TESTS: u32 = 16;

#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub name: BenchName,
    pub path: &'static str,
    pub source: String,
    pub config: VmConfig,
    pub interrupts: InterruptScript,
    pub sensors: SensorModel,
    /// Executions, inserts, samples per class or timer interrupts.
    pub size: u32,
    expected: Arc<OnceLock<Vec<(ValueKind, u32)>>>,
}

impl BenchmarkSpec {
    pub fn load(name: BenchName) -> Self {
        let (path, source, config, size) = match name {
            BenchName::Bc => ("programs/bc.pl", include_str!("../../programs/bc.pl"), include_str!("../../programs/bc.vmcfg"), 100),
            BenchName::Cf => ("programs/cf.pl", include_str!("../../programs/cf.pl"), include_str!("../../programs/cf.vmcfg"), 96),
            BenchName::Ar => ("programs/ar.pl", include_str!("../../programs/ar.pl"), include_str!("../../programs/ar.vmcfg"), 128),
            BenchName::Sense => (
                "programs/sense.pl",
                include_str!("../../programs/sense.pl"),
                include_str!("../../programs/sense.vmcfg"),
                SENSE_TIMERS,
            ),
        };
        let config = parse_config(config).expect("bundled config parses");
        let sensors = match name {
            BenchName::Sense => SensorModel::default().with_temps(&SENSE_TEMPS),
            _ => SensorModel::default(),
        };
        let spec = BenchmarkSpec {
            name,
            path,
            source: source.to_string(),
            config,
            interrupts: InterruptScript::default(),
            sensors,
            size,
            expected: Arc::default(),
        };
        spec.with_size(size)
    }

    pub fn all() -> Vec<Self> {
        BenchName::ALL.iter().map(|&n| Self::load(n)).collect()
    }

    /// The global holding the benchmark's size, if it has one.
    fn size_global(&self) -> Option<&'static str> {
        match self.name {
            BenchName::Bc => Some("runs"),
            BenchName::Cf => Some("inserts"),
            BenchName::Ar => Some("perClass"),
            BenchName::Sense => None,
        }
    }

    /// The same benchmark at another size.
    pub fn with_size(&self, size: u32) -> Self {
        let mut s = self.clone();
        s.size = size;
        s.expected = Arc::default();
        match s.size_global() {
            Some(g) => {
                let prefix = format!("global {g}: Int = ");
                s.source = s
                    .source
                    .lines()
                    .map(|l| match l.strip_prefix(&prefix) {
                        Some(_) => format!("{prefix}{size}"),
                        None => l.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join("\n");
            }
            None => s.interrupts = InterruptScript::periodic("timer", 50, 400, size as usize),
        }
        s
    }

    /// Input small enough to fuzz every crash point.
    pub fn truncated(&self) -> Self {
        match self.name {
            BenchName::Bc => self.with_size(1),
            BenchName::Cf => self.with_size(16),
            BenchName::Ar => self.with_size(8),
            BenchName::Sense => self.with_size(3),
        }
    }

    pub fn compile(&self, cfg: &VmConfig) -> Result<ContinuationProgram, BenchError> {
        Ok(compile_source(&self.source, &self.name.to_string().to_lowercase(), cfg)?)
    }

    /// Outputs a correct run produces.
    pub fn expected(&self) -> &[(ValueKind, u32)] {
        self.expected.get_or_init(|| match self.name {
            BenchName::Bc => oracle::bit_count(self.size, &self.sensors),
            BenchName::Cf => oracle::cuckoo(self.size, &self.sensors),
            BenchName::Ar => oracle::activity(self.size, AR_TESTS, &self.sensors),
            BenchName::Sense => oracle::sense(self.size, SENSE_LIMIT, &self.sensors),
        })
    }

    pub fn fuzz_target(&self, cfg: &VmConfig) -> Result<FuzzTarget, BenchError> {
        Ok(FuzzTarget::new(self.compile(cfg)?, cfg.clone())
            .with_sensors(self.sensors.clone())
            .with_interrupts(self.interrupts.clone()))
    }

    fn check(&self, r: &RunReport) -> Option<String> {
        let got = r.values();
        let want = self.expected();
        if got == want {
            return None;
        }
        let at = got.iter().zip(want).position(|(a, b)| a != b).unwrap_or(got.len().min(want.len()));
        Some(format!(
            "{} outputs, expected {}; first difference at output {at}: {:?} vs {:?}",
            got.len(),
            want.len(),
            got.get(at),
            want.get(at)
        ))
    }
}

fn execute(spec: &BenchmarkSpec, prog: &Arc<ContinuationProgram>, cfg: &VmConfig, driver: &PowerDriver) -> Result<RunReport, BenchError> {
    let mut vm = Vm::new(Arc::clone(prog), cfg)?.with_sensors(spec.sensors.clone());
    vm.boot()?;
    let mut driver = driver.clone();
    if driver.interrupts.entries.is_empty() {
        driver.interrupts = spec.interrupts.clone();
    }
    Ok(vm.run_until_idle(driver)?)
}

/// Runs `spec` to idle under `driver` and checks its outputs. A failing
/// crash schedule is cut down to its shortest failing prefix.
pub fn run_benchmark(spec: &BenchmarkSpec, cfg: &VmConfig, driver: &PowerDriver) -> Result<(RunReport, OverheadSplit), BenchError> {
    let prog = Arc::new(spec.compile(cfg)?);
    let report = execute(spec, &prog, cfg, driver)?;
    let Some(details) = spec.check(&report) else {
        let split = report.split;
        return Ok((report, split));
    };
    let mut details = details;
    if let PowerMode::Schedule(s) = &driver.mode {
        let steps = s.steps().to_vec();
        let fails = |n: usize| {
            let sched = CrashSchedule::new(steps[..n].to_vec()).expect("prefix stays ordered");
            let d = PowerDriver::schedule(sched).with_interrupts(driver.interrupts.clone());
            match execute(spec, &prog, cfg, &d) {
                Ok(r) => spec.check(&r).is_some(),
                Err(_) => true,
            }
        };
        let (mut lo, mut hi) = (0, steps.len());
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if fails(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let _ = write!(details, "; shortest failing crash schedule {:?}", &steps[..hi]);
    }
    Err(BenchError::OracleMismatch {
        bench: spec.name.to_string(),
        details,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptRow {
    pub level: &'static str,
    pub backend: Backend,
    pub commits: u64,
    pub logged_pages: u64,
    pub stack_ops: u64,
    pub crashes: u64,
    pub steps: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptReport {
    pub name: BenchName,
    pub rows: Vec<OptRow>,
}

/// Optimization levels from least to most.
pub const OPT_LEVELS: [(&str, &[Optimization]); 3] = [
    ("none", &[]),
    ("fusion", &[Optimization::BlockFusion]),
    ("fusion+loop", &[Optimization::BlockFusion, Optimization::LoopOpt]),
];

impl OptReport {
    pub fn row(&self, level: &str) -> Option<&OptRow> {
        self.rows.iter().find(|r| r.level == level)
    }
}

fn row(level: &'static str, cfg: &VmConfig, r: &RunReport, passed: bool) -> OptRow {
    OptRow {
        level,
        backend: cfg.vm_backend,
        commits: r.counters.commits,
        logged_pages: r.counters.logged_pages,
        stack_ops: r.counters.stack_ops,
        crashes: r.counters.crashes,
        steps: r.counters.steps,
        passed,
    }
}

/// Runs `spec` under continuous power at every optimization level. Fails
/// if any level's outputs differ from the oracle or if more optimization
/// ever costs more commits or logged pages.
pub fn compare_optimizations(spec: &BenchmarkSpec, cfg: &VmConfig) -> Result<OptReport, BenchError> {
    let mut rows: Vec<OptRow> = Vec::new();
    for (level, opts) in OPT_LEVELS {
        let cfg = VmConfig {
            optimizations: opts.iter().copied().collect(),
            ..cfg.clone()
        };
        let (r, _) = run_benchmark(spec, &cfg, &PowerDriver::continuous())?;
        rows.push(row(level, &cfg, &r, true));
    }
    if let Some(details) = check_monotone(&rows) {
        return Err(BenchError::Regression {
            bench: spec.name.to_string(),
            details,
        });
    }
    Ok(OptReport { name: spec.name, rows })
}

/// Where a level listed after another needs more commits or logged pages.
pub fn check_monotone(rows: &[OptRow]) -> Option<String> {
    rows.windows(2).find_map(|w| {
        let (prev, next) = (&w[0], &w[1]);
        (next.commits > prev.commits || next.logged_pages > prev.logged_pages).then(|| {
            format!(
                "{} needs {} commits and {} logged pages, {} needs {} and {}",
                next.level, next.commits, next.logged_pages, prev.level, prev.commits, prev.logged_pages
            )
        })
    })
}

/// One table row for a single run, whatever its outcome.
pub fn bench_row(spec: &BenchmarkSpec, cfg: &VmConfig, level: &'static str, driver: &PowerDriver) -> Result<OptRow, BenchError> {
    match run_benchmark(spec, cfg, driver) {
        Ok((r, _)) => Ok(row(level, cfg, &r, true)),
        Err(BenchError::OracleMismatch { .. }) => {
            let prog = Arc::new(spec.compile(cfg)?);
            let r = execute(spec, &prog, cfg, driver)?;
            Ok(row(level, cfg, &r, false))
        }
        Err(e) => Err(e),
    }
}

pub const TABLE_HEADER: &str = "name   backend    opt          commits  logged_pages  stack_ops  crashes  result";

pub fn format_rows(name: BenchName, rows: &[OptRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(
            out,
            "{:<6} {:<10} {:<12} {:>7}  {:>12}  {:>9}  {:>7}  {}",
            name.to_string(),
            r.backend.to_string(),
            r.level,
            r.commits,
            r.logged_pages,
            r.stack_ops,
            r.crashes,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    out
}
