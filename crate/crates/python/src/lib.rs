//! Python bindings: compile programs, run them on the simulated device and
//! fuzz them with power failures.

use std::collections::BTreeMap;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use purevm::bench::{self, BenchName, BenchmarkSpec};
use purevm::frontend::{parse_config, Backend, Optimization, VmConfig};
use purevm::lowering::{self, ContinuationProgram};
use purevm::powersim::{self, CrashSchedule, EnergyModel, FuzzTarget, InterruptScript, PowerDriver};
use purevm::vm::{RunReport, SensorModel, Vm};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn config(text: Option<&str>, backend: Option<&str>, opt: Option<Vec<String>>) -> PyResult<VmConfig> {
    let mut cfg = match text {
        Some(t) => parse_config(t).map_err(value_err)?,
        None => VmConfig::default(),
    };
    if let Some(b) = backend {
        cfg.vm_backend = b.parse::<Backend>().map_err(value_err)?;
    }
    if let Some(opts) = opt {
        cfg.optimizations = opts
            .iter()
            .map(|o| o.parse::<Optimization>())
            .collect::<Result<_, _>>()
            .map_err(value_err)?;
    }
    Ok(cfg)
}

/// A compiled program.
#[pyclass(name = "Program", frozen)]
struct PyProgram {
    prog: Arc<ContinuationProgram>,
    cfg: VmConfig,
}

#[pymethods]
impl PyProgram {
    #[getter]
    fn name(&self) -> String {
        self.prog.name.clone()
    }

    #[getter]
    fn block_count(&self) -> usize {
        self.prog.blocks.len()
    }

    fn to_text(&self) -> String {
        self.prog.to_text()
    }

    /// The program as a binary container.
    fn encode<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &lowering::encode(&self.prog))
    }

    #[staticmethod]
    #[pyo3(signature = (data, config=None))]
    fn decode(data: &[u8], config: Option<&str>) -> PyResult<PyProgram> {
        let prog = lowering::decode(data).map_err(value_err)?;
        Ok(PyProgram {
            prog: Arc::new(prog),
            cfg: self::config(config, None, None)?,
        })
    }
}

/// Counters, outputs and final globals of one run.
#[pyclass(name = "Report", frozen)]
struct PyReport {
    report: RunReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn outputs(&self) -> Vec<String> {
        self.report.texts()
    }

    /// Every output including repeats, as (sequence, text).
    #[getter]
    fn raw_outputs(&self) -> Vec<(u32, String)> {
        self.report.outputs.iter().map(|o| (o.seq, o.text.clone())).collect()
    }

    #[getter]
    fn globals(&self) -> BTreeMap<String, Vec<u32>> {
        self.report.globals.iter().cloned().collect()
    }

    /// Numeric counters and overhead split.
    #[getter]
    fn counters(&self) -> BTreeMap<String, u64> {
        self.report
            .to_text()
            .lines()
            .filter_map(|l| {
                let (k, v) = l.split_once(" = ")?;
                Some((k.to_string(), v.parse().ok()?))
            })
            .collect()
    }

    fn to_text(&self) -> String {
        self.report.to_text()
    }

    fn __repr__(&self) -> String {
        let c = &self.report.counters;
        format!(
            "Report(program={:?}, backend={}, steps={}, commits={}, outputs={})",
            self.report.program,
            self.report.backend,
            c.steps,
            c.commits,
            self.report.deduped().len()
        )
    }
}

fn sensors(temps: Option<Vec<f32>>) -> SensorModel {
    match temps {
        Some(t) if !t.is_empty() => SensorModel::default().with_temps(&t),
        _ => SensorModel::default(),
    }
}

fn script(text: Option<&str>) -> PyResult<InterruptScript> {
    match text {
        Some(t) => InterruptScript::parse(t).map_err(value_err),
        None => Ok(InterruptScript::default()),
    }
}

/// Compiles `source` under the configuration text `config`.
#[pyfunction]
#[pyo3(signature = (source, config=None, name="main", backend=None, opt=None))]
fn compile(source: &str, config: Option<&str>, name: &str, backend: Option<&str>, opt: Option<Vec<String>>) -> PyResult<PyProgram> {
    let cfg = self::config(config, backend, opt)?;
    let prog = purevm::compile_source(source, name, &cfg).map_err(value_err)?;
    Ok(PyProgram {
        prog: Arc::new(prog),
        cfg,
    })
}

/// Signature of every declaration in `source`.
#[pyfunction]
fn check(source: &str) -> PyResult<Vec<String>> {
    let ast = purevm::frontend::parse(source).map_err(value_err)?;
    let typed = purevm::types::infer_program(&ast).map_err(value_err)?;
    Ok(purevm::types::signature_lines(&typed))
}

/// Runs `program` until it sleeps. `power` is "continuous", "schedule"
/// (with `crash_at`) or "energy" (a random capacitor model from `seed`).
#[pyfunction]
#[pyo3(signature = (program, power="continuous", crash_at=None, seed=0, interrupts=None, temps=None, backend=None))]
fn run(
    program: &PyProgram,
    power: &str,
    crash_at: Option<Vec<u64>>,
    seed: u64,
    interrupts: Option<&str>,
    temps: Option<Vec<f32>>,
    backend: Option<&str>,
) -> PyResult<PyReport> {
    let mut cfg = program.cfg.clone();
    if let Some(b) = backend {
        cfg.vm_backend = b.parse::<Backend>().map_err(value_err)?;
    }
    let sensors = sensors(temps);
    let driver = match power {
        "continuous" => PowerDriver::continuous(),
        "schedule" => PowerDriver::schedule(CrashSchedule::new(crash_at.unwrap_or_default()).map_err(value_err)?),
        "energy" => {
            let target = FuzzTarget::new(Arc::clone(&program.prog), cfg.clone()).with_sensors(sensors.clone());
            let window = powersim::min_energy_window(&target).map_err(runtime_err)?;
            PowerDriver::energy(EnergyModel::random(seed, cfg.page_size_bytes, window)).map_err(value_err)?
        }
        other => return Err(value_err(format!("unknown power mode `{other}`"))),
    }
    .with_interrupts(script(interrupts)?);
    let mut vm = Vm::new(Arc::clone(&program.prog), &cfg).map_err(value_err)?.with_sensors(sensors);
    vm.boot().map_err(runtime_err)?;
    let report = vm.run_until_idle(driver).map_err(runtime_err)?;
    Ok(PyReport { report })
}

/// Fuzzes `program` with power failures; returns (passed, report text).
/// `mode` is "exhaustive", "random" or "energy".
#[pyfunction]
#[pyo3(signature = (program, mode="exhaustive", seeds=100, crashes=5, budget=100_000, interrupts=None, temps=None))]
fn crashfuzz(
    program: &PyProgram,
    mode: &str,
    seeds: u64,
    crashes: usize,
    budget: u64,
    interrupts: Option<&str>,
    temps: Option<Vec<f32>>,
) -> PyResult<(bool, String)> {
    let target = FuzzTarget::new(Arc::clone(&program.prog), program.cfg.clone())
        .with_sensors(sensors(temps))
        .with_interrupts(script(interrupts)?);
    let report = match mode {
        "exhaustive" => powersim::exhaustive_single_crash(&target, budget),
        "random" => {
            let horizon = target.oracle().map_err(runtime_err)?.report.counters.steps.max(1) * 2;
            powersim::random_crash_fuzz(&target, Backend::Rewinding, 0..seeds, crashes, horizon)
        }
        "energy" => powersim::random_energy_fuzz(&target, Backend::JustInTime, 0..seeds),
        other => return Err(value_err(format!("unknown fuzz mode `{other}`"))),
    }
    .map_err(runtime_err)?;
    Ok((report.passed(), report.to_text()))
}

/// Runs one of BC, CF, AR or SENSE and checks it against its oracle.
#[pyfunction]
#[pyo3(signature = (name, backend="rewinding", opt=None, truncated=false))]
fn run_benchmark(name: &str, backend: &str, opt: Option<Vec<String>>, truncated: bool) -> PyResult<PyReport> {
    let spec = BenchmarkSpec::load(name.parse::<BenchName>().map_err(value_err)?);
    let spec = if truncated { spec.truncated() } else { spec };
    let mut cfg = spec.config.clone();
    cfg.vm_backend = backend.parse::<Backend>().map_err(value_err)?;
    if let Some(opts) = opt {
        cfg.optimizations = opts
            .iter()
            .map(|o| o.parse::<Optimization>())
            .collect::<Result<_, _>>()
            .map_err(value_err)?;
    }
    let (report, _) = bench::run_benchmark(&spec, &cfg, &PowerDriver::continuous()).map_err(runtime_err)?;
    Ok(PyReport { report })
}

#[pymodule]
fn pypurevm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProgram>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(compile, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(crashfuzz, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    Ok(())
}
