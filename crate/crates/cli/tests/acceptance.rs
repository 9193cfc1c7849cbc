//! End-to-end acceptance run. Prints one PASS or FAIL line per criterion
//! and exits non-zero if any failed.

mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use purevm::bench::{self, BenchName, BenchmarkSpec};
use purevm::frontend::{parse, parse_config, Backend, Optimization, VmConfig};
use purevm::nvm::*;
use purevm::powersim::*;
use purevm::types::infer_program;
use purevm::vm::{Vm, VmError};

include!("../../core/tests/common/ill_typed.rs");

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn read(name: &str, ext: &str) -> String {
    std::fs::read_to_string(common::programs().join(format!("{name}.{ext}"))).unwrap()
}

fn alarm_ok(vm: &Vm) -> bool {
    !(vm.global("alarm") == Some(1) && vm.global("tempOK") == Some(1))
}

/// The small programs and truncated benchmarks every crash campaign covers,
/// with their sources.
fn corpus() -> Vec<(String, FuzzTarget)> {
    let mut out = Vec::new();
    for (name, script) in [("war", InterruptScript::default()), ("alarm", InterruptScript::periodic("tick", 20, 300, 4))] {
        let cfg = parse_config(&read(name, "vmcfg")).unwrap();
        let src = read(name, "pl");
        let prog = purevm::compile_source(&src, name, &cfg).unwrap();
        let mut t = FuzzTarget::new(prog, cfg).with_interrupts(script);
        if name == "alarm" {
            t = t.with_commit_check(alarm_ok);
        }
        out.push((src, t));
    }
    let sense = BenchmarkSpec::load(BenchName::Sense);
    out.push((sense.source.clone(), sense.fuzz_target(&sense.config).unwrap()));
    for name in [BenchName::Bc, BenchName::Cf, BenchName::Ar] {
        let spec = BenchmarkSpec::load(name).truncated();
        out.push((spec.source.clone(), spec.fuzz_target(&spec.config).unwrap()));
    }
    out
}

fn exhaustive_undo() -> Outcome {
    let start = Instant::now();
    let mut points = 0;
    for (_, t) in corpus() {
        let r = exhaustive_single_crash(&t, 100_000).map_err(|e| e.to_string())?;
        ensure!(r.passed(), "{}", r.to_text());
        points += r.runs;
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(300), "took {took:?}");
    Ok(format!("{points} crash points, {:.1}s", took.as_secs_f64()))
}

fn energy_jit() -> Outcome {
    let mut runs = 0;
    for (_, t) in corpus() {
        let r = random_energy_fuzz(&t, Backend::JustInTime, 0..1000).map_err(|e| e.to_string())?;
        ensure!(r.passed(), "{}", r.to_text());
        ensure!(r.reexecutions == 0, "{}: {} re-executions", r.program, r.reexecutions);
        runs += r.runs;
    }
    Ok(format!("{runs} energy traces"))
}

const PAGE: u32 = 16;

fn nvm_transaction(mem: &mut ObjectMemory, log: &UndoLog, m: &mut dyn Meter) -> Result<(), NvmError> {
    for (page, value) in [(1u32, 0x1111u16), (5, 0x5555), (1, 0x2222)] {
        log.log_page(mem, m, page)?;
        for w in 0..PAGE / WORD_BYTES {
            mem.write(m, page * PAGE + w * WORD_BYTES, value + w as u16)?;
        }
    }
    log.commit_clear(mem, m)
}

/// Crashes `op` before each of its micro-steps in turn; `check` sees the
/// rebooted machine.
fn crash_everywhere(vm: &Vm, op: impl Fn(&mut Vm) -> Result<(), VmError>, check: impl Fn(&Vm) -> bool) -> Result<u64, String> {
    for k in 1.. {
        let mut m = vm.clone();
        let at = m.power().step() + k;
        m.schedule_crashes(CrashSchedule::single(at));
        match op(&mut m) {
            Ok(()) => {
                ensure!(check(&m), "mixed state after completion");
                return Ok(k);
            }
            Err(VmError::PowerFailure) => {
                m.reboot().map_err(|e| e.to_string())?;
                ensure!(check(&m), "mixed state after a crash at micro-step {k}");
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    unreachable!()
}

fn atomicity() -> Outcome {
    // Undo log: log_page, commit_clear and undo_restore.
    let mut before = ObjectMemory::new(16 * PAGE, PAGE);
    for addr in (0..8 * PAGE).step_by(2) {
        before.write_word(addr, (addr as u16).wrapping_mul(31) ^ 0x5a5a).unwrap();
    }
    let log = UndoLog {
        count_addr: 8 * PAGE,
        first_entry: 8 * PAGE + 2,
        capacity: 3,
        page_size: PAGE,
        own_pages: 8..before.page_count(),
    };
    let data = |m: &ObjectMemory| m.words()[..(8 * PAGE / WORD_BYTES) as usize].to_vec();
    let mut after = before.clone();
    nvm_transaction(&mut after, &log, &mut Unmetered).unwrap();
    let mut cases = 0;
    for n in 1.. {
        let mut mem = before.clone();
        if nvm_transaction(&mut mem, &log, &mut FailOnWrite::new(n)).is_ok() {
            break;
        }
        for r in 1.. {
            let mut rec = mem.clone();
            let crashed = log.undo_restore(&mut rec, &mut FailOnWrite::new(r)).is_err();
            log.undo_restore(&mut rec, &mut Unmetered).unwrap();
            cases += 1;
            ensure!(data(&rec) == data(&before) || data(&rec) == data(&after), "write {n}, recovery write {r}: mixed state");
            if !crashed {
                break;
            }
        }
    }

    // Event queue: enqueue and consume.
    let mut cfg = parse_config("events = boot, reboot, sleep, control\nnvm_size = 4096\npage_size = 32").unwrap();
    cfg.event_queue_capacity = 2;
    cfg.vm_backend = Backend::Rewinding;
    let src = "event boot() {}\nevent reboot() {}\nevent sleep() {}\nevent control(t: Float) { t.emit() }";
    let prog = Arc::new(purevm::compile_source(src, "queue", &cfg).unwrap());
    let (boot, reboot, control) = (prog.handler_entry["boot"], prog.handler_entry["reboot"], prog.handler_entry["control"]);
    let mut vm = Vm::new(Arc::clone(&prog), &cfg).unwrap();
    vm.boot().unwrap();
    let payload = 22.0f32.to_bits();
    cases += crash_everywhere(&vm, |m| m.add_event("control", payload), |m| {
        let q: Vec<_> = m.queued_events().into_iter().filter(|e| e.0 != reboot).collect();
        q == [(boot, 0)] || q == [(boot, 0), (control, payload)]
    })?;
    vm.run_until_idle(PowerDriver::continuous()).unwrap();
    vm.add_event("control", payload).unwrap();
    cases += crash_everywhere(&vm, |m| m.vm_consume(), |m| {
        let queued = m.queued_events().iter().any(|e| e.0 == control);
        let framed = m.stack_frames().iter().any(|f| f.target == control);
        queued != framed
    })?;
    Ok(format!("{cases} crash points"))
}

fn alarm_property() -> Outcome {
    let (_, t) = corpus().into_iter().find(|(_, t)| t.prog.name == "alarm").unwrap();
    let ex = exhaustive_single_crash(&t, 100_000).map_err(|e| e.to_string())?;
    let en = random_energy_fuzz(&t, Backend::JustInTime, 0..1000).map_err(|e| e.to_string())?;
    let rnd = random_crash_fuzz(&t, Backend::Rewinding, 0..1000, 5, t.oracle().unwrap().report.counters.steps).map_err(|e| e.to_string())?;
    let mut commits = 0;
    for r in [&ex, &en, &rnd] {
        ensure!(r.passed(), "{}", r.to_text());
        ensure!(r.commit_violations == 0, "alarm and tempOK both set at {} commits", r.commit_violations);
        commits += r.runs;
    }
    Ok(format!("{commits} fuzzed runs, no commit with both flags set"))
}

fn benchmarks() -> Outcome {
    let mut notes = Vec::new();
    for spec in BenchmarkSpec::all() {
        let start = Instant::now();
        let (r, _) = bench::run_benchmark(&spec, &spec.config, &PowerDriver::continuous()).map_err(|e| e.to_string())?;
        let took = start.elapsed();
        ensure!(took < Duration::from_secs(60), "{} took {took:?}", spec.name);
        let vals: Vec<u32> = r.values().iter().map(|v| v.1).collect();
        match spec.name {
            BenchName::Bc => ensure!(vals.len() == 101 && vals[100] == 100, "BC: methods disagreed: {vals:?}"),
            BenchName::Cf => ensure!(vals == [spec.size, 0], "CF: {vals:?}"),
            BenchName::Ar => {
                let (again, _) = bench::run_benchmark(&spec, &spec.config, &PowerDriver::continuous()).map_err(|e| e.to_string())?;
                ensure!(vals.len() == 16 && again.values() == r.values(), "AR labels: {vals:?}");
            }
            BenchName::Sense => {}
        }
        notes.push(format!("{} {:.2}s", spec.name, took.as_secs_f64()));
    }
    Ok(notes.join(", "))
}

fn with_opts(cfg: &VmConfig, opts: &[Optimization]) -> VmConfig {
    VmConfig {
        optimizations: opts.iter().copied().collect(),
        vm_backend: Backend::Rewinding,
        ..cfg.clone()
    }
}

fn optimizations() -> Outcome {
    let bc = BenchmarkSpec::load(BenchName::Bc);
    let pages = |opts: &[Optimization]| {
        bench::run_benchmark(&bc, &with_opts(&bc.config, opts), &PowerDriver::continuous()).map(|r| r.0.counters.logged_pages)
    };
    let base = pages(&[]).map_err(|e| e.to_string())?;
    let looped = pages(&[Optimization::LoopOpt]).map_err(|e| e.to_string())?;
    ensure!(looped * 2 <= base, "loop optimization: {looped} logged pages vs {base}");

    for (src, t) in corpus() {
        let commits = |opts: &[Optimization]| -> Result<u64, String> {
            let cfg = with_opts(&t.cfg, opts);
            let prog = purevm::compile_source(&src, &t.prog.name, &cfg).map_err(|e| e.to_string())?;
            let mut vm = Vm::new(Arc::new(prog), &cfg).map_err(|e| e.to_string())?.with_sensors(t.sensors.clone());
            vm.boot().map_err(|e| e.to_string())?;
            let r = vm.run_until_idle(PowerDriver::continuous().with_interrupts(t.interrupts.clone())).map_err(|e| e.to_string())?;
            Ok(r.counters.commits)
        };
        let (plain, fused) = (commits(&[])?, commits(&[Optimization::BlockFusion])?);
        ensure!(fused <= plain, "{}: fusion raised commits from {plain} to {fused}", t.prog.name);
    }
    Ok(format!("logged pages {base} -> {looped}"))
}

fn page_sizes() -> Outcome {
    for spec in BenchmarkSpec::all() {
        let mut seen = None;
        for page in [16, 32, 64, 128] {
            let cfg = VmConfig {
                page_size_bytes: page,
                ..spec.config.clone()
            };
            let (r, _) = bench::run_benchmark(&spec, &cfg, &PowerDriver::continuous()).map_err(|e| e.to_string())?;
            match &seen {
                None => seen = Some(r.values()),
                Some(v) => ensure!(*v == r.values(), "{} outputs differ at page size {page}", spec.name),
            }
        }
    }
    let dir = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("reports");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    for name in BenchName::ALL {
        let out = dir.join(format!("{}.txt", name.to_string().to_lowercase()));
        let o = common::purevm(&["report", "--name", &name.to_string(), "--page-sizes", "32,64", "-o", &out.display().to_string()]);
        ensure!(o.status.success(), "report for {name} failed: {}", String::from_utf8_lossy(&o.stderr));
    }
    Ok(format!("reports in {}", dir.display()))
}

fn type_system() -> Outcome {
    let p = infer_program(&parse("").unwrap()).map_err(|e| e.to_string())?;
    for (name, want) in [
        ("select", "(Bool)(%a, %a) -> %a"),
        ("apply", "(%a)(%a -> %b) -> %b"),
        ("getTemp", "(Float) -> Float"),
        ("ifElse", "(%a)(%a -> Bool, %a -> %b, %a -> %b) -> %b"),
    ] {
        let got = p.get(name).unwrap().scheme.render();
        ensure!(got == want, "{name}: {got}");
    }
    for (src, kind, line, marker) in ILL_TYPED {
        let col = src.lines().nth(line as usize - 1).unwrap().find(marker).unwrap() as u32 + 1;
        match infer_program(&parse(src).unwrap()) {
            Ok(_) => return Err(format!("accepted: {src}")),
            Err(e) => ensure!((e.kind, e.line, e.col) == (kind, line, col), "{src}: {e}"),
        }
    }
    for (_, t) in corpus() {
        for backend in [Backend::Test, Backend::Rewinding, Backend::JustInTime] {
            let mut vm = t.machine(backend).map_err(|e| e.to_string())?;
            match vm.run_until_idle(PowerDriver::continuous().with_interrupts(t.interrupts.clone())) {
                Err(e @ VmError::TypeConfusion { .. }) => return Err(format!("{} on {backend}: {e}", t.prog.name)),
                r => {
                    r.map_err(|e| e.to_string())?;
                }
            }
        }
    }
    Ok(format!("{} ill-typed programs rejected", ILL_TYPED.len()))
}

fn determinism() -> Outcome {
    let cases = common::invocations();
    for (args, code) in &cases {
        let (a, b) = (common::run_strs(args), common::run_strs(args));
        ensure!(a.status.code() == Some(*code), "purevm {}: exit {:?}", args.join(" "), a.status.code());
        ensure!(a.stdout == b.stdout && a.stderr == b.stderr, "purevm {} differs between runs", args.join(" "));
    }
    Ok(format!("{} invocations", cases.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("crash consistency, undo logging, every crash point", exhaustive_undo),
        ("crash consistency, checkpointing, random energy traces", energy_jit),
        ("transaction atomicity at the memory layer", atomicity),
        ("alarm and tempOK never both set at a commit", alarm_property),
        ("benchmarks at full size", benchmarks),
        ("optimization direction", optimizations),
        ("page size does not change outputs", page_sizes),
        ("type system", type_system),
        ("CLI determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(note) => println!("PASS {} {name}: {note}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
