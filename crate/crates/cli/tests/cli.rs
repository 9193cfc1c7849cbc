mod common;

use common::*;

fn stdout(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn exit_codes() {
    for (args, code) in invocations() {
        let o = run_strs(&args);
        assert_eq!(o.status.code(), Some(code), "purevm {}\n{}", args.join(" "), stderr(&o));
        if code != 0 {
            assert!(!stderr(&o).is_empty(), "purevm {} failed silently", args.join(" "));
        }
    }
}

#[test]
fn every_invocation_is_byte_reproducible() {
    for (args, _) in invocations() {
        let (a, b) = (run_strs(&args), run_strs(&args));
        assert_eq!(a.stdout, b.stdout, "purevm {}", args.join(" "));
        assert_eq!(a.stderr, b.stderr, "purevm {}", args.join(" "));
    }
}

#[test]
fn check_prints_signatures() {
    let o = purevm(&["check", &program("alarm")]);
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "func raise : (Float) -> Void"), "{out}");
    assert!(out.lines().any(|l| l == "interrupt tick : (Void) -> Void"), "{out}");
}

#[test]
fn diagnostics_carry_positions() {
    let bad = scratch("bad.pl");
    std::fs::write(&bad, "func f(x: Int) -> Int {\n    x.not()\n}\n").unwrap();
    let o = purevm(&["check", &bad.display().to_string()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.pl:2:7: TypeMismatch"), "{}", stderr(&o));
}

#[test]
fn compiled_container_runs_like_the_source() {
    let cir = scratch("war.cir");
    let cfg = programs().join("war.vmcfg").display().to_string();
    let war = program("war");
    let o = purevm(&["compile", &war, "-o", &cir.display().to_string()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let from_source = purevm(&["run", &war, "--crash-at", "40"]);
    let from_cir = purevm(&["run", &cir.display().to_string(), "--config", &cfg, "--crash-at", "40"]);
    assert_eq!(from_cir.status.code(), Some(0), "{}", stderr(&from_cir));
    assert_eq!(stdout(&from_source), stdout(&from_cir));
}

#[test]
fn crashed_run_matches_the_clean_run() {
    let war = program("war");
    let globals = |o: &std::process::Output| stdout(o).lines().filter(|l| l.starts_with("global.")).map(String::from).collect::<Vec<_>>();
    let clean = purevm(&["run", &war]);
    let crashed = purevm(&["run", &war, "--crash-at", "30"]);
    assert_eq!(globals(&clean), ["global.vector = 0xa 0x0 0x0 0x0", "global.var = 0x1"]);
    assert_eq!(globals(&clean), globals(&crashed));
    assert!(stdout(&crashed).contains("crashes = 1\n"));
}

#[test]
fn seed_comes_from_the_environment() {
    let war = program("war");
    let run = |seed: &str| {
        std::process::Command::new(env!("CARGO_BIN_EXE_purevm"))
            .args(["run", &war, "--power", "energy", "--backend", "justintime"])
            .env("PUREVM_SEED", seed)
            .output()
            .unwrap()
    };
    assert_eq!(run("9").stdout, run("9").stdout);
    assert_eq!(run("oops").status.code(), Some(2));
}

#[test]
fn nvm_dump_is_written() {
    let dump = scratch("war.nvm");
    let o = purevm(&["run", &program("war"), "--dump-nvm", &dump.display().to_string()]);
    assert_eq!(o.status.code(), Some(0));
    let bytes = std::fs::read(&dump).unwrap();
    assert!(bytes.len() >= 2048, "{}", bytes.len());
}

#[test]
fn crashfuzz_reports_and_fails_on_mismatch() {
    let war = program("war");
    let o = purevm(&["crashfuzz", &war, "--exhaustive"]);
    let out = stdout(&o);
    assert!(out.starts_with("war on rewinding: "), "{out}");
    assert!(out.contains("\nmismatches = 0\n"));

    let o = purevm(&["crashfuzz", &war, "--backend", "test", "--seeds", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("mismatches = 3"));
}

#[test]
fn bench_prints_a_table() {
    let o = purevm(&["bench", "--name", "BC", "--truncated"]);
    let out = stdout(&o);
    let lines: Vec<_> = out.lines().collect();
    assert!(lines[0].starts_with("name"));
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.starts_with("BC") && l.ends_with("PASS")));
}

#[test]
fn report_covers_each_page_size() {
    let o = purevm(&["report", "--name", "CF"]);
    let out = stdout(&o);
    assert!(out.starts_with("[page_size = 32]\n"));
    assert!(out.contains("\n[page_size = 64]\n"));
}
