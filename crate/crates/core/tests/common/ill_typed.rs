// Shared by the type checker tests and the acceptance run.

/// (source, expected kind, line, marker): the diagnostic must point at the
/// first occurrence of `marker` on `line`.
const ILL_TYPED: [(&str, purevm::types::TypeErrorKind, u32, &str); 20] = [
    ("func f(x: Int) -> Int { x.not() }", purevm::types::TypeErrorKind::TypeMismatch, 1, "not"),
    ("func f(x: Int) -> Bool { x.inc() }", purevm::types::TypeErrorKind::UnboundName, 1, "inc"),
    ("func f(x: Int) -> Int { x.add(true) }", purevm::types::TypeErrorKind::TypeMismatch, 1, "true"),
    ("func f(x: Int) -> Int { x.nosuch() }", purevm::types::TypeErrorKind::UnboundName, 1, "nosuch"),
    ("func f(x: Int) -> Int { y }", purevm::types::TypeErrorKind::UnboundName, 1, "y"),
    ("func f(x: Int) -> Int { x.add(1, 2) }", purevm::types::TypeErrorKind::ArityMismatch, 1, "add"),
    ("func f(x: Int) -> Float { x.add(1.5) }", purevm::types::TypeErrorKind::TypeMismatch, 1, "1.5"),
    ("event boot() { 1.emit() }\nevent tick(v) { v.void() }", purevm::types::TypeErrorKind::NonGroundHandler, 2, "tick"),
    ("func f(x: Bool)(y: Int) -> Int { x.select(y, 2.0) }", purevm::types::TypeErrorKind::TypeMismatch, 1, "2.0"),
    ("func g(x) { x.apply(x) }", purevm::types::TypeErrorKind::OccursCheck, 1, "x) }"),
    ("global a: Array<Int, 4>\nfunc f(x: Int) -> Void { a.void() }", purevm::types::TypeErrorKind::ArrayNotFirstClass, 2, "void"),
    ("func f(x: Int) -> Int { x.apply(3) }", purevm::types::TypeErrorKind::TypeMismatch, 1, "3"),
    ("func f(x: Int) -> Int { x.itof() }", purevm::types::TypeErrorKind::TypeMismatch, 1, "x.itof"),
    ("global g: Int = 2.5", purevm::types::TypeErrorKind::InvalidGlobal, 1, "g:"),
    ("global a: Array<Int, 2> = [1, 2, 3]", purevm::types::TypeErrorKind::InvalidGlobal, 1, "a:"),
    ("func f(x: %a) -> %a { x.add(1) }", purevm::types::TypeErrorKind::TooGeneral, 1, "add"),
    ("func f(x: Int) -> Void { x.addEventQ(boot) }\nevent boot() {}", purevm::types::TypeErrorKind::AddEventOutsideInterrupt, 1, "addEventQ"),
    ("func f(x: Int) -> Int {\n    let y = x.lt(2)\n    y.add(1)\n}", purevm::types::TypeErrorKind::TypeMismatch, 3, "add"),
    ("func f(x: Float) -> Float { x.getAt(0) }", purevm::types::TypeErrorKind::TypeMismatch, 1, "getAt"),
    ("primitive select(b: Int)(t: %a, f: %a) -> %a [builtin]", purevm::types::TypeErrorKind::PreludeConflict, 1, "select"),
];
