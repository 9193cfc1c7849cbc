use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use purevm::bench::{self, BenchName, BenchmarkSpec, OptRow};
use purevm::frontend::{self, parse_config, Backend, Optimization, VmConfig};
use purevm::lowering::{self, ContinuationProgram};
use purevm::powersim::{
    self, parse_harvest, CrashSchedule, EnergyModel, FuzzTarget, InterruptScript, PowerDriver,
};
use purevm::types;
use purevm::vm::{SensorModel, Vm};

const SEED_VAR: &str = "PUREVM_SEED";

#[derive(Parser)]
#[command(name = "purevm", version, about = "Compile and run programs on a simulated intermittently powered device")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Machine configuration; defaults to <program>.vmcfg next to the program.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optimizations, overriding the configuration (fusion, loop, none).
    #[arg(long, value_delimiter = ',')]
    opt: Vec<String>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    page_size: Option<u32>,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Interrupt script, one `step handler [payload]` per line.
    #[arg(long)]
    interrupts: Option<PathBuf>,
    /// Temperatures the temperature sensor cycles through.
    #[arg(long, value_delimiter = ',')]
    temps: Vec<f32>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PowerKind {
    Continuous,
    Energy,
    Schedule,
}

#[derive(Subcommand)]
enum Cmd {
    /// Type check a program and print every declaration's signature.
    Check { file: PathBuf },
    /// Compile a program to a container or a text listing.
    Compile {
        file: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short = 'o')]
        output: Option<PathBuf>,
        #[arg(long)]
        emit_text: bool,
    },
    /// Run a program until it sleeps with nothing left to do.
    Run {
        file: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_enum)]
        power: Option<PowerKind>,
        /// Driver steps at which power fails.
        #[arg(long, value_delimiter = ',')]
        crash_at: Vec<u64>,
        /// Harvest trace for --power energy, one `duration rate` per line.
        #[arg(long)]
        harvest: Option<PathBuf>,
        /// Seed of the random energy model.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        budget: Option<u64>,
        /// Print one line per metered operation before the report.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        dump_nvm: Option<PathBuf>,
        #[arg(short = 'o')]
        output: Option<PathBuf>,
    },
    /// Compare runs with injected power failures against a continuous run.
    Crashfuzz {
        file: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        input: InputArgs,
        /// One run per crash step within the budget.
        #[arg(long)]
        exhaustive: bool,
        /// Random energy traces instead of random crash schedules.
        #[arg(long)]
        energy: bool,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 5)]
        crashes: usize,
        #[arg(long, default_value_t = 100_000)]
        budget: u64,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(short = 'o')]
        output: Option<PathBuf>,
    },
    /// Run the benchmark programs and print a counter table.
    Bench {
        #[arg(long)]
        name: Option<String>,
        /// none, fusion, fusion+loop or all.
        #[arg(long, default_value = "all")]
        opt: String,
        #[arg(long, default_value = "rewinding")]
        backend: String,
        #[arg(long)]
        page_size: Option<u32>,
        /// Use the small inputs.
        #[arg(long)]
        truncated: bool,
        #[arg(short = 'o')]
        output: Option<PathBuf>,
    },
    /// Print the counter report of one run per page size.
    Report {
        file: Option<PathBuf>,
        /// A benchmark instead of a program file.
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_delimiter = ',', default_value = "32,64")]
        page_sizes: Vec<u32>,
        #[arg(short = 'o')]
        output: Option<PathBuf>,
    },
}

enum Failure {
    /// Bad invocation or unreadable input.
    Usage(String),
    /// The program or a run failed a check.
    Verify(String),
}

type Res<T> = Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn verify(e: impl std::fmt::Display) -> Failure {
    Failure::Verify(e.to_string())
}

fn read(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn emit(output: &Option<PathBuf>, data: &[u8]) -> Res<()> {
    match output {
        Some(p) => fs::write(p, data).map_err(|e| usage(format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(data).map_err(usage),
    }
}

fn backend(s: &str) -> Res<Backend> {
    s.parse().map_err(usage)
}

fn config(args: &ConfigArgs, file: Option<&Path>) -> Res<VmConfig> {
    let path = args.config.clone().or_else(|| {
        let p = file?.with_extension("vmcfg");
        p.exists().then_some(p)
    });
    let mut cfg = match path {
        Some(p) => parse_config(&read(&p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => VmConfig::default(),
    };
    if !args.opt.is_empty() {
        cfg.optimizations.clear();
        for o in &args.opt {
            if o != "none" {
                cfg.optimizations.insert(o.parse::<Optimization>().map_err(usage)?);
            }
        }
    }
    if let Some(b) = &args.backend {
        cfg.vm_backend = backend(b)?;
    }
    if let Some(p) = args.page_size {
        cfg.page_size_bytes = p;
    }
    Ok(cfg)
}

fn program_name(file: &Path) -> String {
    file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Compiles a source file or decodes a container.
fn load(file: &Path, cfg: &VmConfig) -> Res<ContinuationProgram> {
    if file.extension().is_some_and(|e| e == "cir") {
        let bytes = fs::read(file).map_err(|e| usage(format!("{}: {e}", file.display())))?;
        return lowering::decode(&bytes).map_err(|e| usage(format!("{}: {e}", file.display())));
    }
    let src = read(file)?;
    purevm::compile_source(&src, &program_name(file), cfg).map_err(|e| verify(format!("{}:{e}", file.display())))
}

fn inputs(args: &InputArgs) -> Res<(InterruptScript, SensorModel)> {
    let script = match &args.interrupts {
        Some(p) => InterruptScript::parse(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => InterruptScript::default(),
    };
    let mut sensors = SensorModel::default();
    if !args.temps.is_empty() {
        sensors = sensors.with_temps(&args.temps);
    }
    Ok((script, sensors))
}

fn env_seed() -> Res<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| usage(format!("{SEED_VAR} must be an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn check(file: &Path) -> Res<()> {
    let src = read(file)?;
    let ast = frontend::parse_named(&src, &program_name(file)).map_err(|e| verify(format!("{}:{e}", file.display())))?;
    let typed = types::infer_program(&ast).map_err(|e| verify(format!("{}:{e}", file.display())))?;
    let mut out = String::new();
    for line in types::signature_lines(&typed) {
        out.push_str(&line);
        out.push('\n');
    }
    emit(&None, out.as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn run(
    file: &Path,
    cfg: &ConfigArgs,
    input: &InputArgs,
    power: Option<PowerKind>,
    crash_at: &[u64],
    harvest: &Option<PathBuf>,
    seed: u64,
    budget: Option<u64>,
    trace: bool,
    dump_nvm: &Option<PathBuf>,
    output: &Option<PathBuf>,
) -> Res<()> {
    let cfg = config(cfg, Some(file))?;
    let prog = Arc::new(load(file, &cfg)?);
    let (script, sensors) = inputs(input)?;
    let seed = env_seed()?.unwrap_or(seed);
    let kind = power.unwrap_or(if crash_at.is_empty() { PowerKind::Continuous } else { PowerKind::Schedule });
    let driver = match kind {
        PowerKind::Continuous => PowerDriver::continuous(),
        PowerKind::Schedule => PowerDriver::schedule(CrashSchedule::new(crash_at.to_vec()).map_err(usage)?),
        PowerKind::Energy => {
            let target = FuzzTarget::new(Arc::clone(&prog), cfg.clone()).with_sensors(sensors.clone());
            let window = powersim::min_energy_window(&target).map_err(usage)?;
            let mut model = EnergyModel::random(seed, cfg.page_size_bytes, window);
            if let Some(h) = harvest {
                model.harvest = parse_harvest(&read(h)?).map_err(usage)?;
            }
            PowerDriver::energy(model).map_err(usage)?
        }
    }
    .with_interrupts(script);
    let mut vm = Vm::new(prog, &cfg).map_err(usage)?.with_sensors(sensors);
    if trace {
        vm = vm.with_trace();
    }
    if let Some(b) = budget {
        vm.set_budget(b);
    }
    vm.boot().map_err(verify)?;
    let result = vm.run_until_idle(driver);
    if let Some(p) = dump_nvm {
        fs::write(p, vm.memory().dump()).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    }
    let report = result.map_err(verify)?;
    let mut out = String::new();
    for line in vm.trace() {
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(&report.to_text());
    emit(output, out.as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn crashfuzz(
    file: &Path,
    cfg: &ConfigArgs,
    input: &InputArgs,
    exhaustive: bool,
    energy: bool,
    seeds: u64,
    crashes: usize,
    budget: u64,
    jobs: Option<usize>,
    output: &Option<PathBuf>,
) -> Res<()> {
    if let Some(j) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(usage)?;
    }
    let explicit = cfg.backend.is_some();
    let cfg = config(cfg, Some(file))?;
    let prog = load(file, &cfg)?;
    let (script, sensors) = inputs(input)?;
    let target = FuzzTarget::new(prog, cfg.clone()).with_sensors(sensors).with_interrupts(script);
    let base = env_seed()?.unwrap_or(0);
    let pick = |default| if explicit { cfg.vm_backend } else { default };
    let report = if exhaustive {
        powersim::exhaustive_single_crash(&target, budget)
    } else if energy {
        powersim::random_energy_fuzz(&target, pick(Backend::JustInTime), base..base + seeds)
    } else {
        let horizon = target.oracle().map_err(verify)?.report.counters.steps.max(1) * 2;
        powersim::random_crash_fuzz(&target, pick(Backend::Rewinding), base..base + seeds, crashes, horizon.min(budget.max(1)))
    }
    .map_err(verify)?;
    emit(output, report.to_text().as_bytes())?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verify(format!("{} mismatching runs", report.mismatches.len())))
    }
}

fn specs(name: &Option<String>) -> Res<Vec<BenchmarkSpec>> {
    Ok(match name {
        Some(n) => vec![BenchmarkSpec::load(n.parse::<BenchName>().map_err(usage)?)],
        None => BenchmarkSpec::all(),
    })
}

fn bench_cmd(
    name: &Option<String>,
    opt: &str,
    backend_name: &str,
    page_size: Option<u32>,
    truncated: bool,
    output: &Option<PathBuf>,
) -> Res<()> {
    let levels: Vec<_> = match opt {
        "all" => bench::OPT_LEVELS.to_vec(),
        o => vec![*bench::OPT_LEVELS
            .iter()
            .find(|(l, _)| *l == o)
            .ok_or_else(|| usage(format!("unknown optimization level `{o}` (expected none, fusion, fusion+loop or all)")))?],
    };
    let backend = backend(backend_name)?;
    let mut out = format!("{}\n", bench::TABLE_HEADER);
    let mut problems = Vec::new();
    for spec in specs(name)? {
        let spec = if truncated { spec.truncated() } else { spec };
        let mut rows: Vec<OptRow> = Vec::new();
        for (level, opts) in &levels {
            let cfg = VmConfig {
                vm_backend: backend,
                page_size_bytes: page_size.unwrap_or(spec.config.page_size_bytes),
                optimizations: opts.iter().copied().collect(),
                ..spec.config.clone()
            };
            let row = bench::bench_row(&spec, &cfg, level, &PowerDriver::continuous()).map_err(verify)?;
            if !row.passed {
                problems.push(format!("{} {level}: output differs from the oracle", spec.name));
            }
            rows.push(row);
        }
        if let Some(p) = bench::check_monotone(&rows) {
            problems.push(format!("{}: {p}", spec.name));
        }
        out.push_str(&bench::format_rows(spec.name, &rows));
    }
    emit(output, out.as_bytes())?;
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(problems.join("\n")))
    }
}

fn report_cmd(
    file: &Option<PathBuf>,
    name: &Option<String>,
    cfg_args: &ConfigArgs,
    input: &InputArgs,
    page_sizes: &[u32],
    output: &Option<PathBuf>,
) -> Res<()> {
    let mut out = String::new();
    for &ps in page_sizes {
        let args = ConfigArgs {
            page_size: Some(ps),
            ..cfg_args.clone()
        };
        let report = match (file, name) {
            (Some(f), None) => {
                let cfg = config(&args, Some(f))?;
                let prog = load(f, &cfg)?;
                let (script, sensors) = inputs(input)?;
                let mut vm = Vm::new(prog, &cfg).map_err(usage)?.with_sensors(sensors);
                vm.boot().map_err(verify)?;
                vm.run_until_idle(PowerDriver::continuous().with_interrupts(script)).map_err(verify)?
            }
            (None, Some(n)) => {
                let spec = BenchmarkSpec::load(n.parse::<BenchName>().map_err(usage)?);
                let mut cfg = VmConfig {
                    page_size_bytes: ps,
                    ..spec.config.clone()
                };
                if let Some(b) = &cfg_args.backend {
                    cfg.vm_backend = backend(b)?;
                }
                bench::run_benchmark(&spec, &cfg, &PowerDriver::continuous()).map_err(verify)?.0
            }
            _ => return Err(usage("give either a program file or --name")),
        };
        let _ = writeln!(out, "[page_size = {ps}]");
        out.push_str(&report.to_text());
        out.push('\n');
    }
    emit(output, out.as_bytes())
}

fn dispatch(cmd: Cmd) -> Res<()> {
    match cmd {
        Cmd::Check { file } => check(&file),
        Cmd::Compile {
            file,
            cfg,
            output,
            emit_text,
        } => {
            let cfg = config(&cfg, Some(&file))?;
            let prog = load(&file, &cfg)?;
            if emit_text {
                emit(&output, prog.to_text().as_bytes())
            } else {
                let out = output.unwrap_or_else(|| file.with_extension("cir"));
                emit(&Some(out), &lowering::encode(&prog))
            }
        }
        Cmd::Run {
            file,
            cfg,
            input,
            power,
            crash_at,
            harvest,
            seed,
            budget,
            trace,
            dump_nvm,
            output,
        } => run(&file, &cfg, &input, power, &crash_at, &harvest, seed, budget, trace, &dump_nvm, &output),
        Cmd::Crashfuzz {
            file,
            cfg,
            input,
            exhaustive,
            energy,
            seeds,
            crashes,
            budget,
            jobs,
            output,
        } => crashfuzz(&file, &cfg, &input, exhaustive, energy, seeds, crashes, budget, jobs, &output),
        Cmd::Bench {
            name,
            opt,
            backend,
            page_size,
            truncated,
            output,
        } => bench_cmd(&name, &opt, &backend, page_size, truncated, &output),
        Cmd::Report {
            file,
            name,
            cfg,
            input,
            page_sizes,
            output,
        } => report_cmd(&file, &name, &cfg, &input, &page_sizes, &output),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("purevm: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Verify(m)) => {
            eprintln!("purevm: {m}");
            ExitCode::from(1)
        }
    }
}
