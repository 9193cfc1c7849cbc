#![allow(dead_code)]

use std::path::PathBuf;
use std::process::{Command, Output};

pub fn programs() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/programs"))
}

pub fn program(name: &str) -> String {
    programs().join(format!("{name}.pl")).display().to_string()
}

pub fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("purevm-cli");
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

pub fn purevm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_purevm"))
        .args(args)
        .env_remove("PUREVM_SEED")
        .output()
        .expect("binary runs")
}

/// Every invocation the CLI tests make that writes to stdout, with its
/// expected exit code.
pub fn invocations() -> Vec<(Vec<String>, i32)> {
    let war = program("war");
    let alarm = program("alarm");
    let ill = scratch("ill.pl");
    std::fs::write(&ill, "event boot() { 1.fadd(2.0) }\n").unwrap();
    let ill = ill.display().to_string();
    let cases: Vec<(Vec<&str>, i32)> = vec![
        (vec!["check", &war], 0),
        (vec!["check", &alarm], 0),
        (vec!["check", &ill], 1),
        (vec!["compile", &war, "--emit-text"], 0),
        (vec!["compile", &war, "--emit-text", "--opt", "none"], 0),
        (vec!["run", &war], 0),
        (vec!["run", &war, "--crash-at", "30,90"], 0),
        (vec!["run", &war, "--power", "energy", "--seed", "4", "--backend", "justintime"], 0),
        (vec!["run", &war, "--crash-at", "7", "--trace"], 0),
        (vec!["crashfuzz", &war, "--exhaustive"], 0),
        (vec!["crashfuzz", &war, "--seeds", "20"], 0),
        (vec!["crashfuzz", &war, "--energy", "--seeds", "20"], 0),
        (vec!["crashfuzz", &war, "--backend", "test", "--seeds", "3"], 1),
        (vec!["bench", "--name", "BC", "--truncated"], 0),
        (vec!["bench", "--name", "SENSE", "--opt", "fusion", "--backend", "justintime"], 0),
        (vec!["report", "--name", "CF"], 0),
        (vec!["report", &war, "--page-sizes", "16,128"], 0),
        (vec!["run", "no/such/file.pl"], 2),
        (vec!["run", &war, "--backend", "quantum"], 2),
        (vec!["bench", "--opt", "turbo"], 2),
        (vec!["frobnicate"], 2),
    ];
    cases
        .into_iter()
        .map(|(a, c)| (a.into_iter().map(String::from).collect(), c))
        .collect()
}

pub fn run_strs(args: &[String]) -> Output {
    purevm(&args.iter().map(String::as_str).collect::<Vec<_>>())
}
