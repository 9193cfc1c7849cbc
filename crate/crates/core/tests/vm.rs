use std::sync::Arc;

use purevm::bench::{BenchName, BenchmarkSpec};
use purevm::frontend::{parse_config, Backend, VmConfig};
use purevm::lowering::{ContinuationProgram, RT_CKPT_SEQ};
use purevm::powersim::{self, CrashSchedule, EnergyModel, FuzzTarget, InterruptScript, PowerDriver};
use purevm::vm::{SensorModel, Step, Vm, VmError};

fn programs_dir() -> &'static str {
    concat!(env!("CARGO_MANIFEST_DIR"), "/programs")
}

fn load(name: &str, backend: Backend) -> (Arc<ContinuationProgram>, VmConfig) {
    let read = |ext: &str| std::fs::read_to_string(format!("{}/{name}.{ext}", programs_dir())).unwrap();
    let mut cfg = parse_config(&read("vmcfg")).unwrap();
    cfg.vm_backend = backend;
    let prog = purevm::compile_source(&read("pl"), name, &cfg).unwrap();
    (Arc::new(prog), cfg)
}

fn booted(prog: &Arc<ContinuationProgram>, cfg: &VmConfig) -> Vm {
    let mut vm = Vm::new(Arc::clone(prog), cfg).unwrap();
    vm.boot().unwrap();
    vm
}

fn compile(src: &str, backend: Backend) -> (Arc<ContinuationProgram>, VmConfig) {
    compile_with(src, backend, 2)
}

fn compile_with(src: &str, backend: Backend, queue: u32) -> (Arc<ContinuationProgram>, VmConfig) {
    let mut cfg = parse_config("events = boot, reboot, sleep, control\nnvm_size = 4096\npage_size = 32").unwrap();
    cfg.event_queue_capacity = queue;
    cfg.vm_backend = backend;
    (Arc::new(purevm::compile_source(src, "t", &cfg).unwrap()), cfg)
}

const QUEUE_APP: &str = "event boot() {}\nevent reboot() {}\nevent sleep() {}\nevent control(t: Float) { t.emit() }";

#[test]
fn boot_queues_exactly_the_boot_event() {
    let (prog, cfg) = load("war", Backend::Rewinding);
    let mut vm = booted(&prog, &cfg);
    assert_eq!(vm.queued_events(), vec![(prog.handler_entry["boot"], 0)]);
    assert_eq!(vm.boot(), Err(VmError::AlreadyBooted));

    let mut zero = cfg.clone();
    zero.event_queue_capacity = 0;
    assert!(matches!(Vm::new(Arc::clone(&prog), &zero), Err(VmError::Config(_))));

    let mut fresh = Vm::new(prog, &cfg).unwrap();
    assert_eq!(fresh.step(), Err(VmError::NotBooted));
}

#[test]
fn queue_is_fifo_and_drops_newest_when_full() {
    let (prog, cfg) = compile(QUEUE_APP, Backend::Rewinding);
    let control = prog.handler_entry["control"];
    let mut vm = booted(&prog, &cfg);
    vm.add_event("control", 7).unwrap();
    assert_eq!(vm.queued_events(), vec![(prog.handler_entry["boot"], 0), (control, 7)]);
    vm.add_event("control", 8).unwrap();
    assert_eq!(vm.queue_len(), 2);
    assert_eq!(vm.report().counters.dropped_events, 1);

    let (prog, cfg) = compile_with(QUEUE_APP, Backend::Rewinding, 6);
    let mut vm = booted(&prog, &cfg);
    for p in 1..=5 {
        vm.add_event("control", f32::to_bits(p as f32)).unwrap();
    }
    let r = vm.run_until_idle(PowerDriver::continuous()).unwrap();
    assert_eq!(r.texts(), ["1.0", "2.0", "3.0", "4.0", "5.0"]);
    assert_eq!(r.counters.dropped_events, 0);
}

/// Drives `op` with a crash before its `k`-th micro-step, for every `k`
/// until it completes; `check` sees the machine after recovery.
fn crash_everywhere(vm: &Vm, op: impl Fn(&mut Vm) -> Result<(), VmError>, check: impl Fn(&Vm, bool)) -> u64 {
    let mut k = 1;
    loop {
        let mut m = vm.clone();
        let at = m.power().step() + k;
        m.schedule_crashes(CrashSchedule::single(at));
        match op(&mut m) {
            Ok(()) => {
                check(&m, true);
                return k;
            }
            Err(VmError::PowerFailure) => {
                m.reboot().unwrap();
                check(&m, false);
            }
            Err(e) => panic!("{e}"),
        }
        k += 1;
    }
}

#[test]
fn crash_inside_enqueue_is_all_or_nothing() {
    let (prog, cfg) = compile(QUEUE_APP, Backend::Rewinding);
    let boot = prog.handler_entry["boot"];
    let reboot = prog.handler_entry["reboot"];
    let control = prog.handler_entry["control"];
    let vm = booted(&prog, &cfg);
    let payload = f32::to_bits(22.0);
    let points = crash_everywhere(
        &vm,
        |m| m.add_event("control", payload),
        |m, done| {
            let q: Vec<_> = m.queued_events().into_iter().filter(|e| e.0 != reboot).collect();
            if done {
                assert_eq!(q, vec![(boot, 0), (control, payload)]);
            } else {
                assert!(q == vec![(boot, 0)] || q == vec![(boot, 0), (control, payload)], "{q:?}");
            }
        },
    );
    assert!(points > 5);
}

#[test]
fn crash_inside_consume_never_loses_or_duplicates_the_event() {
    let (prog, cfg) = compile(QUEUE_APP, Backend::Rewinding);
    let control = prog.handler_entry["control"];
    let reboot = prog.handler_entry["reboot"];
    let mut vm = booted(&prog, &cfg);
    vm.run_until_idle(PowerDriver::continuous()).unwrap();
    vm.add_event("control", f32::to_bits(22.0)).unwrap();
    crash_everywhere(
        &vm,
        |m| m.vm_consume(),
        |m, _| {
            let queued = m.queued_events().iter().any(|e| e.0 == control);
            let framed = m.stack_frames().iter().any(|f| f.target == control);
            assert!(queued != framed, "queued {queued}, on stack {framed}");
            assert!(m.queued_events().iter().all(|e| e.0 == control || e.0 == reboot));
        },
    );
}

#[test]
fn consumed_event_becomes_a_frame_with_its_payload() {
    let spec = BenchmarkSpec::load(BenchName::Sense);
    let prog = Arc::new(spec.compile(&spec.config).unwrap());
    let mut vm = booted(&prog, &spec.config);
    vm.run_until_idle(PowerDriver::continuous()).unwrap();
    vm.add_event("control", f32::to_bits(22.0)).unwrap();
    vm.vm_consume().unwrap();
    let frames = vm.stack_frames();
    assert_eq!(frames.len(), 1);
    assert_eq!(frames[0].target, prog.handler_entry["control"]);
    assert_eq!(vm.memory().read_u32(frames[0].flow_in as u32).unwrap(), f32::to_bits(22.0));
}

#[test]
fn one_timer_event_gives_one_heater_command() {
    let spec = BenchmarkSpec::load(BenchName::Sense);
    let prog = Arc::new(spec.compile(&spec.config).unwrap());
    for backend in [Backend::Test, Backend::Rewinding, Backend::JustInTime] {
        let mut cfg = spec.config.clone();
        cfg.vm_backend = backend;
        let mut vm = Vm::new(Arc::clone(&prog), &cfg).unwrap().with_sensors(SensorModel::default().with_temps(&[22.0]));
        vm.boot().unwrap();
        let r = vm
            .run_until_idle(PowerDriver::continuous().with_interrupts(InterruptScript::periodic("timer", 10, 100, 1)))
            .unwrap();
        // 22.0 is below the 25.0 limit: the heater goes on.
        assert_eq!(r.texts(), ["1"], "{backend}");
        assert_eq!(r.counters.interrupts, 1);
        // boot and control; sleep is dispatched, not queued
        assert_eq!(r.counters.events_consumed, 2);
    }
}

#[test]
fn idle_machine_sleeps_then_halts() {
    let (prog, cfg) = load("war", Backend::Rewinding);
    let mut vm = booted(&prog, &cfg);
    let mut steps = Vec::new();
    loop {
        let s = vm.step().unwrap();
        steps.push(s);
        if s == Step::Halted {
            break;
        }
    }
    assert_eq!(steps, [Step::Consume, Step::Block, Step::Sleep, Step::Block, Step::Halted]);
    assert!(vm.is_halted());
    assert_eq!(vm.step().unwrap(), Step::Halted);
}

fn assert_war_once(r: purevm::vm::RunReport, what: &str) {
    let g: std::collections::BTreeMap<_, _> = r.globals.into_iter().collect();
    assert_eq!(g["var"], [1], "{what}");
    assert_eq!(g["vector"], [10, 0, 0, 0], "{what}");
}

#[test]
fn war_increment_happens_once_at_every_crash_point() {
    let (prog, cfg) = load("war", Backend::Rewinding);
    let total = booted(&prog, &cfg).run_until_idle(PowerDriver::continuous()).unwrap().counters.steps;
    for s in 1..=total {
        let mut vm = booted(&prog, &cfg);
        assert_war_once(vm.run_until_idle(PowerDriver::schedule(CrashSchedule::single(s))).unwrap(), &format!("crash at {s}"));
    }
}

#[test]
fn war_increment_happens_once_under_energy_traces() {
    let (prog, cfg) = load("war", Backend::JustInTime);
    let window = powersim::min_energy_window(&FuzzTarget::new(Arc::clone(&prog), cfg.clone())).unwrap();
    let mut outages = 0;
    for seed in 0..200 {
        let mut vm = booted(&prog, &cfg);
        let r = vm.run_until_idle(PowerDriver::energy(EnergyModel::random(seed, cfg.page_size_bytes, window)).unwrap()).unwrap();
        outages += r.counters.checkpoints;
        assert_war_once(r, &format!("seed {seed}"));
    }
    assert!(outages > 0);
}

#[test]
fn rewinding_reexecutes_blocks_from_the_start() {
    let spec = BenchmarkSpec::load(BenchName::Bc).truncated();
    let prog = Arc::new(spec.compile(&spec.config).unwrap());
    let mut mid_block = 0;
    for s in (50..3000).step_by(37) {
        let mut vm = booted(&prog, &spec.config).with_sensors(spec.sensors.clone());
        vm.run_until_idle(PowerDriver::schedule(CrashSchedule::single(s))).unwrap();
        let t = vm.instruction_trace();
        for w in t.windows(2) {
            if w[1].1 > 0 {
                assert_eq!(w[1], (w[0].0, w[0].1 + 1), "crash at {s}: resumed inside a block");
            }
        }
        if t.windows(2).any(|w| w[1].1 == 0 && w[0].1 > 0 && w[1].0 == w[0].0) {
            mid_block += 1;
        }
    }
    assert!(mid_block > 0);
}

#[test]
fn crash_with_empty_log_restores_nothing() {
    let (prog, cfg) = load("war", Backend::Rewinding);
    let mut vm = booted(&prog, &cfg).with_trace();
    let r = vm.run_until_idle(PowerDriver::schedule(CrashSchedule::single(1))).unwrap();
    assert_eq!(r.counters.crashes, 1);
    let t = vm.trace();
    let crash = t.iter().position(|l| l.ends_with("crash")).unwrap();
    let recovery: Vec<_> = t[crash + 1..].iter().take_while(|l| l.contains(" undo ")).collect();
    assert!(!recovery.is_empty());
    assert!(recovery.iter().all(|l| l.contains(" read")), "{recovery:?}");
}

#[test]
fn jit_resumes_at_the_exact_instruction() {
    let spec = BenchmarkSpec::load(BenchName::Bc).truncated();
    let mut cfg = spec.config.clone();
    cfg.vm_backend = Backend::JustInTime;
    let prog = Arc::new(spec.compile(&cfg).unwrap());
    let target = FuzzTarget::new(Arc::clone(&prog), cfg.clone()).with_sensors(spec.sensors.clone());
    let window = powersim::min_energy_window(&target).unwrap();

    let mut clean = booted(&prog, &cfg).with_sensors(spec.sensors.clone());
    clean.run_until_idle(PowerDriver::continuous()).unwrap();

    for seed in 0..20 {
        let mut vm = booted(&prog, &cfg).with_sensors(spec.sensors.clone());
        let driver = PowerDriver::energy(EnergyModel::random(seed, cfg.page_size_bytes, window)).unwrap();
        let r = vm.run_until_idle(driver).unwrap();
        assert!(r.counters.crashes + r.counters.checkpoints > 0, "seed {seed}");
        assert_eq!(r.counters.reexecutions, 0, "seed {seed}");
        assert_eq!(vm.instruction_trace(), clean.instruction_trace(), "seed {seed}");
        assert_eq!(r.texts(), clean.report().texts());
    }
}

#[test]
fn checkpoints_are_double_buffered() {
    let (prog, cfg) = load("war", Backend::JustInTime);
    let mut vm = booted(&prog, &cfg);
    let seq = |vm: &Vm| vm.memory().read_word(RT_CKPT_SEQ as u32).unwrap();
    vm.jit_checkpoint().unwrap();
    let first = seq(&vm);
    vm.jit_checkpoint().unwrap();
    let second = seq(&vm);
    assert!(second > first);

    // Crash at every point of a third checkpoint: the sequence word either
    // stays or advances by one, and recovery always succeeds.
    crash_everywhere(
        &vm,
        |m| m.jit_checkpoint(),
        |m, done| {
            let s = seq(m);
            assert!(s == second || (done && s == second + 1), "{s}");
        },
    );

    let mut rb = Vm::new(Arc::clone(&prog), &parse_config("events = boot, reboot, sleep").unwrap()).unwrap();
    rb.boot().unwrap();
    assert!(matches!(rb.jit_checkpoint(), Err(VmError::Config(_))));
}

#[test]
fn checkpoint_then_crash_resumes_at_the_checkpoint() {
    let (prog, cfg) = load("war", Backend::JustInTime);
    let mut vm = booted(&prog, &cfg);
    vm.step().unwrap();
    vm.jit_checkpoint().unwrap();
    let at = vm.instruction_trace().len();
    let frames = vm.stack_frames();
    let crash = vm.power().step() + 1;
    vm.schedule_crashes(CrashSchedule::single(crash));
    assert_eq!(vm.step().unwrap(), Step::Rebooted);
    assert_eq!(vm.instruction_trace().len(), at);
    assert_eq!(vm.stack_frames(), frames);
    let r = vm.run().unwrap();
    assert_eq!(r.counters.reexecutions, 0);
}

#[test]
fn traps_are_reported() {
    let src = "global a: Array<Int, 2>\nglobal z: Int = 0\n\
               event reboot() {}\nevent sleep() {}\nevent control(t: Float) {}\n";
    let (prog, cfg) = compile(&format!("{src}event boot() {{ 5.div(z).emit() }}"), Backend::Test);
    let err = booted(&prog, &cfg).run_until_idle(PowerDriver::continuous()).unwrap_err();
    assert!(matches!(err, VmError::TrapDivideByZero { .. }), "{err}");

    let (prog, cfg) = compile(&format!("{src}event boot() {{ a.getAt(2).emit() }}"), Backend::Rewinding);
    let err = booted(&prog, &cfg).run_until_idle(PowerDriver::continuous()).unwrap_err();
    assert!(matches!(err, VmError::TrapIndexOutOfBounds { index: 2, len: 2, .. }), "{err}");

    let (prog, mut cfg) = compile(
        &format!("{src}func spin(x: Int) -> Int {{ x.add(1).apply(x.ge(0).select(spin, spin)) }}\nevent boot() {{ 0.spin().void() }}"),
        Backend::Rewinding,
    );
    cfg.step_budget = 10_000;
    let err = booted(&prog, &cfg).run_until_idle(PowerDriver::continuous()).unwrap_err();
    assert_eq!(err, VmError::NonTermination(10_000));
}

#[test]
fn test_backend_refuses_power_failures() {
    let (prog, cfg) = load("war", Backend::Test);
    let mut vm = booted(&prog, &cfg);
    assert!(matches!(
        vm.run_until_idle(PowerDriver::schedule(CrashSchedule::single(3))),
        Err(VmError::Config(_))
    ));
}

#[test]
fn outputs_are_exactly_once_after_dedup() {
    let spec = BenchmarkSpec::load(BenchName::Sense);
    let target = spec.fuzz_target(&spec.config).unwrap();
    let oracle = target.oracle().unwrap();
    for seed in 0..50 {
        let mut vm = target.machine(Backend::Rewinding).unwrap();
        let horizon = oracle.report.counters.steps * 2;
        let driver = PowerDriver::schedule(CrashSchedule::random(seed, 5, horizon)).with_interrupts(spec.interrupts.clone());
        let r = vm.run_until_idle(driver).unwrap();
        let d = r.deduped();
        let mut seqs: Vec<_> = d.iter().map(|o| o.key()).collect();
        seqs.dedup();
        assert_eq!(seqs.len(), d.len());
        assert_eq!(d.iter().map(|o| &o.text).collect::<Vec<_>>(), oracle.report.texts().iter().collect::<Vec<_>>());
        assert_eq!(r.counters.duplicate_outputs as usize, r.outputs.len() - d.len());
    }
}

#[test]
fn full_bit_count_survives_random_crash_schedules() {
    let spec = BenchmarkSpec::load(BenchName::Bc);
    let target = spec.fuzz_target(&spec.config).unwrap();
    let horizon = target.oracle().unwrap().report.counters.steps;
    let r = powersim::random_crash_fuzz(&target, Backend::Rewinding, 0..1000, 5, horizon).unwrap();
    assert!(r.passed(), "{}", r.to_text());
}
