use std::collections::BTreeSet;

use proptest::prelude::*;

use purevm::bench::{BenchName, BenchmarkSpec};
use purevm::frontend::{parse, parse_config, Backend};
use purevm::powersim::{InterruptScript, PowerDriver};
use purevm::types::*;
use purevm::vm::{Vm, VmError};

fn v(i: u32) -> TypeTerm {
    TypeTerm::Var(i)
}

fn infer(src: &str) -> Result<TypedProgram, TypeError> {
    infer_program(&parse(src).expect("parses"))
}

#[test]
fn unify_examples() {
    let e = Substitution::new();
    let s = unify(&v(0), &TypeTerm::Int, &e).unwrap();
    assert_eq!(s.apply(&v(0)), TypeTerm::Int);

    let s = unify(
        &TypeTerm::arrow(v(0), v(1)),
        &TypeTerm::arrow(TypeTerm::Int, TypeTerm::Bool),
        &e,
    )
    .unwrap();
    assert_eq!(s.apply(&v(0)), TypeTerm::Int);
    assert_eq!(s.apply(&v(1)), TypeTerm::Bool);

    assert!(matches!(
        unify(&v(0), &TypeTerm::arrow(v(0), TypeTerm::Int), &e),
        Err(UnifyError::OccursCheck(0, _))
    ));
    assert!(matches!(unify(&TypeTerm::Int, &TypeTerm::Float, &e), Err(UnifyError::Mismatch(..))));
}

#[test]
fn unify_extends_the_given_substitution() {
    let s = unify(&v(0), &TypeTerm::Int, &Substitution::new()).unwrap();
    let s2 = unify(&v(1), &TypeTerm::arrow(v(0), v(0)), &s).unwrap();
    assert_eq!(s2.apply(&v(0)), TypeTerm::Int);
    assert_eq!(s2.apply(&v(1)), TypeTerm::arrow(TypeTerm::Int, TypeTerm::Int));
    assert!(unify(&v(0), &TypeTerm::Bool, &s2).is_err());
}

fn term() -> impl Strategy<Value = TypeTerm> {
    let leaf = prop_oneof![
        Just(TypeTerm::Int),
        Just(TypeTerm::Bool),
        Just(TypeTerm::Float),
        (0u32..4).prop_map(TypeTerm::Var),
    ];
    leaf.prop_recursive(3, 12, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| TypeTerm::arrow(a, b)),
            (inner, prop_oneof![(1u32..4).prop_map(TypeTerm::Nat), (4u32..6).prop_map(TypeTerm::Var)])
                .prop_map(|(e, n)| TypeTerm::array(e, n)),
        ]
    })
}

proptest! {
    #[test]
    fn unifier_is_idempotent_and_sound(a in term(), b in term(), c in term()) {
        let Ok(s) = unify(&a, &b, &Substitution::new()) else { return Ok(()) };
        for t in [&a, &b, &c] {
            let once = s.apply(t);
            prop_assert_eq!(s.apply(&once), once);
        }
        prop_assert_eq!(s.apply(&a), s.apply(&b));
        for (var, t) in s.bindings() {
            prop_assert!(!s.apply(t).occurs(var), "t{} bound to a term containing itself", var);
        }
    }

    #[test]
    fn unify_is_symmetric_in_success(a in term(), b in term()) {
        let e = Substitution::new();
        prop_assert_eq!(unify(&a, &b, &e).is_ok(), unify(&b, &a, &e).is_ok());
    }
}

// Expected signatures of the control-flow builtins.
const SELECT: &str = "(Bool)(%a, %a) -> %a";
const APPLY: &str = "(%a)(%a -> %b) -> %b";
const IF_ELSE: &str = "(%a)(%a -> Bool, %a -> %b, %a -> %b) -> %b";

fn scheme(p: &TypedProgram, name: &str) -> String {
    p.get(name).unwrap().scheme.render()
}

#[test]
fn builtin_signatures_are_principal() {
    let p = infer("").unwrap();
    assert_eq!(scheme(&p, "select"), SELECT);
    assert_eq!(scheme(&p, "apply"), APPLY);
    assert_eq!(scheme(&p, "ifElse"), IF_ELSE);
    assert!(p.get("getTemp").unwrap().is_io());
}

#[test]
fn control_flow_signatures_are_inferred_without_annotations() {
    let p = infer(
        "func pick(b)(t, f) { b.select(t, f) }\n\
         func app(a)(g) { a.apply(g) }\n\
         func cond(p)(s, t, f) {\n\
             let func = p.apply(s).select(t, f)\n\
             p.apply(func)\n\
         }\n\
         func temp(x) { x.getTemp() }",
    )
    .unwrap();
    assert_eq!(scheme(&p, "pick"), SELECT);
    assert_eq!(scheme(&p, "app"), APPLY);
    assert_eq!(scheme(&p, "cond"), IF_ELSE);
    assert_eq!(scheme(&p, "temp"), "(Float) -> Float");
    assert!(p.get("cond").unwrap().scheme.alpha_eq(&p.get("ifElse").unwrap().scheme));
}

#[test]
fn renaming_does_not_matter() {
    let p = infer("func sel(b: Bool)(t: %z, f: %z) -> %z { b.select(t, f) }").unwrap();
    assert_eq!(scheme(&p, "sel"), SELECT);
}

#[test]
fn write_sets_follow_metadata() {
    let p = infer(
        "global alarm: Bool = false\n\
         global reading: Float = 0.0\n\
         func raise(t: Float) -> Void { alarm.set(true).void() }\n\
         func sense(t: Float) -> Float { reading.getTemp() }\n\
         func pure(t: Float) -> Float { t.fadd(1.0) }",
    )
    .unwrap();
    let set = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    assert_eq!(p.write_sets["getTemp"], set(&["x"]));
    assert_eq!(p.write_sets["raise"], set(&["alarm"]));
    assert_eq!(p.write_sets["sense"], set(&["reading"]));
    assert!(p.write_sets.get("pure").map_or(true, |s| s.is_empty()));
}

#[test]
fn signature_lines_are_stable() {
    let src = "global n: Int = 1\nfunc f(x: Int) -> Int { x.add(n) }\nevent boot() {}";
    let a = signature_lines(&infer(src).unwrap());
    assert_eq!(a, ["global n : Int", "func f : (Int) -> Int", "event boot : (Void) -> Void"]);
    assert_eq!(a, signature_lines(&infer(src).unwrap()));
}

include!("common/ill_typed.rs");

#[test]
fn ill_typed_programs_are_rejected_with_positions() {
    for (src, kind, line, marker) in ILL_TYPED {
        let text = src.lines().nth(line as usize - 1).unwrap();
        let col = text.find(marker).unwrap() as u32 + 1;
        let e = infer(src).expect_err(src);
        assert_eq!(e.kind, kind, "{src}: {e}");
        assert_eq!((e.line, e.col), (line, col), "{src}: {e}");
        assert!(e.to_string().starts_with(&format!("{line}:{col}: {kind}")), "{e}");
    }
}

#[test]
fn more_rejections() {
    let cases = [
        ("func f(x: Int) -> Int { x.fadd(1.0) }", TypeErrorKind::TypeMismatch),
        ("interrupt t(x: Float) { x.addEventQ(nosuch) }", TypeErrorKind::UnboundName),
        ("func f(x: Int) -> Int { x.apply(f).add(x.lt(1)) }", TypeErrorKind::TypeMismatch),
    ];
    for (src, kind) in cases {
        assert_eq!(infer(src).unwrap_err().kind, kind, "{src}");
    }
}

fn corpus() -> Vec<(String, String, String, InterruptScript)> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/programs");
    let read = |f: &str| std::fs::read_to_string(format!("{dir}/{f}")).unwrap();
    let mut out = vec![
        ("war".into(), read("war.pl"), read("war.vmcfg"), InterruptScript::default()),
        ("alarm".into(), read("alarm.pl"), read("alarm.vmcfg"), InterruptScript::periodic("tick", 20, 300, 4)),
    ];
    for name in BenchName::ALL {
        let spec = BenchmarkSpec::load(name).truncated();
        out.push((name.to_string(), spec.source.clone(), std::fs::read_to_string(format!("{dir}/{}.vmcfg", name.to_string().to_lowercase())).unwrap(), spec.interrupts.clone()));
    }
    out
}

#[test]
fn accepted_corpus_never_confuses_types_at_runtime() {
    for (name, src, cfg, script) in corpus() {
        for backend in [Backend::Test, Backend::Rewinding, Backend::JustInTime] {
            let mut cfg = parse_config(&cfg).unwrap();
            cfg.vm_backend = backend;
            let prog = purevm::compile_source(&src, &name, &cfg).unwrap();
            let mut vm = Vm::new(prog, &cfg).unwrap();
            vm.boot().unwrap();
            match vm.run_until_idle(PowerDriver::continuous().with_interrupts(script.clone())) {
                Ok(_) => {}
                Err(e @ VmError::TypeConfusion { .. }) => panic!("{name} on {backend}: {e}"),
                Err(e) => panic!("{name} on {backend} failed: {e}"),
            }
        }
    }
}
