use proptest::prelude::*;

use purevm::frontend::*;

fn id(name: &str) -> Ident {
    Ident::new(name, Span::default())
}

fn expr(kind: ExprKind) -> Expr {
    Expr {
        kind,
        span: Span::default(),
    }
}

#[test]
fn primitive_declaration() {
    let p = parse("primitive select(b: Bool)(t: %a, f: %a) -> %a [builtin]").unwrap();
    let d = &p.declarations[0];
    assert_eq!(d.kind, DeclKind::Primitive);
    assert_eq!(d.name.name, "select");
    assert_eq!(d.flow_in.as_ref().unwrap().name.name, "b");
    assert_eq!(d.flow_in.as_ref().unwrap().ty, Some(TypeExpr::Bool));
    let params: Vec<_> = d.params.iter().map(|b| (b.name.name.as_str(), b.ty.clone().unwrap())).collect();
    assert_eq!(params, vec![("t", TypeExpr::Var("a".into())), ("f", TypeExpr::Var("a".into()))]);
    assert_eq!(d.flow_out, Some(TypeExpr::Var("a".into())));
    assert!(d.is_builtin());
}

#[test]
fn empty_input() {
    assert!(parse("").unwrap().declarations.is_empty());
    assert!(parse("  # nothing here\n").unwrap().declarations.is_empty());
}

#[test]
fn chain_of_two_calls() {
    let p = parse("func f(x: Int) -> Int { x.inc().inc() }").unwrap();
    let body = &p.declarations[0].body;
    assert_eq!(body.len(), 1);
    let ExprKind::Chain { head, calls } = &body[0].expr.kind else { panic!("not a chain") };
    assert_eq!(head.as_ref().unwrap().kind, ExprKind::Var("x".into()));
    let names: Vec<_> = calls.iter().map(|c| c.callee.name.as_str()).collect();
    assert_eq!(names, ["inc", "inc"]);
}

#[test]
fn metadata_and_handlers() {
    let p = parse(
        "primitive getTemp(x: Float) -> Float [IO] [write x]\n\
         global limit: Float = 25.0\n\
         global v: Array<Int, 4> = [1, 2, -3, 4]\n\
         event boot() {}\n\
         interrupt timer(t: Float) { t.getTemp() }",
    )
    .unwrap();
    let g = p.get("getTemp").unwrap();
    assert!(g.is_io());
    assert_eq!(g.write_targets().collect::<Vec<_>>(), ["x"]);
    assert_eq!(p.get("limit").unwrap().init, Some(Initializer::Scalar(Literal::Float(25.0))));
    assert_eq!(
        p.get("v").unwrap().init,
        Some(Initializer::List(vec![Literal::Int(1), Literal::Int(2), Literal::Int(-3), Literal::Int(4)]))
    );
    assert_eq!(p.get("boot").unwrap().kind, DeclKind::Event);
    assert_eq!(p.get("timer").unwrap().kind, DeclKind::Interrupt);
}

#[test]
fn errors_carry_positions() {
    let cases = [
        ("func f(x: Int) -> Int { x.inc( }", (1, 32)),
        ("global a: Int\nglobal a: Int", (2, 8)),
        ("event boot() {\n  let = 3\n}", (2, 7)),
        ("func (x: Int) -> Int {}", (1, 6)),
        ("global g: Array<Int, 4 = 1", (1, 24)),
    ];
    for (src, pos) in cases {
        let e = parse(src).unwrap_err();
        assert_eq!(e.position(), pos, "{src}: {e}");
        assert!(e.to_string().starts_with(&format!("{}:{}:", pos.0, pos.1)), "{e}");
    }
}

#[test]
fn garbage_never_panics() {
    for src in ["{{{{", "))", "func", "global x: Array<", "event e(x: %) {}", "\u{0}", "1.2.3", "0x", "let let"] {
        let _ = parse(src);
    }
}

#[test]
fn config_examples() {
    let c = parse_config("events = boot, reboot, sleep\npage_size = 32\n").unwrap();
    assert_eq!(c.page_size_bytes, 32);
    assert!(c.optimizations.is_empty());
    assert_eq!(c.vm_backend, Backend::Rewinding);

    let e = parse_config("events = boot, sleep\n").unwrap_err();
    assert!(e.to_string().contains("reboot"), "{e}");

    let c = parse_config("events = boot, reboot, sleep, control\nnvm_size = 4096\npage_size = 64\noptimize = fusion, loop\nbackend = jit").unwrap();
    assert_eq!(c.nvm_size_bytes / c.page_size_bytes, 64);
    assert_eq!(c.optimizations.len(), 2);
    assert_eq!(c.vm_backend, Backend::JustInTime);
    assert_eq!(c.event_handlers, ["boot", "reboot", "sleep", "control"]);

    for bad in ["colour = red", "nvm_size = lots", "nvm_size = 1000\npage_size = 64", "page_size = 48"] {
        assert!(parse_config(&format!("events = boot, reboot, sleep\n{bad}")).is_err(), "{bad}");
    }
}

#[test]
fn config_round_trips() {
    let c = parse_config("events = boot, reboot, sleep, tick\nnvm_size = 2048\nqueue_capacity = 3\npage_size = 16\noptimize = fusion").unwrap();
    assert_eq!(parse_config(&render_config(&c)).unwrap(), c);
}

// Random trees for the printer round trip.

fn name() -> impl Strategy<Value = String> {
    "[a-z][a-zA-Z0-9]{0,5}".prop_filter("reserved", |s| !matches!(s.as_str(), "let" | "true" | "false"))
}

fn ty() -> impl Strategy<Value = TypeExpr> {
    let leaf = prop_oneof![
        Just(TypeExpr::Int),
        Just(TypeExpr::Float),
        Just(TypeExpr::Bool),
        Just(TypeExpr::Void),
        "[a-e]".prop_map(TypeExpr::Var),
    ];
    leaf.prop_recursive(3, 8, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| TypeExpr::Arrow(Box::new(a), Box::new(b))),
            (inner, 1u32..200).prop_map(|(e, n)| TypeExpr::Array(Box::new(e), ArrayLen::Fixed(n))),
        ]
    })
}

fn literal() -> impl Strategy<Value = Literal> {
    prop_oneof![
        any::<i32>().prop_map(Literal::Int),
        (-1.0e6f32..1.0e6).prop_map(Literal::Float),
        any::<bool>().prop_map(Literal::Bool),
    ]
}

fn atom() -> impl Strategy<Value = Expr> {
    prop_oneof![name().prop_map(|n| expr(ExprKind::Var(n))), literal().prop_map(|l| expr(ExprKind::Lit(l)))]
}

fn chain() -> impl Strategy<Value = Expr> {
    let call = |arg: BoxedStrategy<Expr>| {
        (name(), prop::collection::vec(arg, 0..3)).prop_map(|(n, args)| Call {
            callee: id(&n),
            args,
            span: Span::default(),
        })
    };
    let flat = (prop::option::of(atom()), prop::collection::vec(call(atom().boxed()), 1..4))
        .prop_map(|(h, calls)| expr(ExprKind::Chain { head: h.map(Box::new), calls }));
    prop_oneof![
        atom(),
        (prop::option::of(atom()), prop::collection::vec(call(flat.boxed()), 1..3))
            .prop_map(|(h, calls)| expr(ExprKind::Chain { head: h.map(Box::new), calls })),
    ]
}

fn statement() -> impl Strategy<Value = Statement> {
    (prop::option::of(name()), chain()).prop_map(|(b, e)| Statement {
        binding: b.map(|n| id(&n)),
        expr: e,
        span: Span::default(),
    })
}

fn binder() -> impl Strategy<Value = Binder> {
    (name(), ty()).prop_map(|(n, t)| Binder { name: id(&n), ty: Some(t) })
}

fn decl(kind: DeclKind) -> BoxedStrategy<Declaration> {
    let base = move |flow_in, params, flow_out, metadata, body, init| Declaration {
        kind,
        name: id("placeholder"),
        flow_in,
        params,
        flow_out,
        metadata,
        body,
        init,
        span: Span::default(),
    };
    match kind {
        DeclKind::Primitive => (binder(), prop::collection::vec(binder(), 0..3), ty(), any::<(bool, bool, bool)>())
            .prop_map(move |(fi, ps, out, (io, wr, bi))| {
                let mut md = Vec::new();
                if io {
                    md.push(Metadata::Io);
                }
                if wr {
                    md.push(Metadata::Write(fi.name.name.clone()));
                }
                if bi {
                    md.push(Metadata::Builtin);
                }
                base(Some(fi), ps, Some(out), md, vec![], None)
            })
            .boxed(),
        DeclKind::Function => (binder(), prop::collection::vec(binder(), 0..3), ty(), prop::collection::vec(statement(), 1..4))
            .prop_map(move |(fi, ps, out, body)| base(Some(fi), ps, Some(out), vec![], body, None))
            .boxed(),
        DeclKind::Global => (
            ty(),
            prop::option::of(prop_oneof![
                literal().prop_map(Initializer::Scalar),
                prop::collection::vec(literal(), 0..5).prop_map(Initializer::List),
            ]),
        )
            .prop_map(move |(t, init)| base(None, vec![], Some(t), vec![], vec![], init))
            .boxed(),
        DeclKind::Event | DeclKind::Interrupt => (prop::option::of(binder()), prop::collection::vec(statement(), 0..3))
            .prop_map(move |(fi, body)| {
                // `()` parses as a unit flow-in.
                let fi = fi.unwrap_or(Binder { name: id("_"), ty: Some(TypeExpr::Void) });
                base(Some(fi), vec![], None, vec![], body, None)
            })
            .boxed(),
    }
}

fn program() -> impl Strategy<Value = SourceProgram> {
    let kind = prop_oneof![
        Just(DeclKind::Primitive),
        Just(DeclKind::Function),
        Just(DeclKind::Global),
        Just(DeclKind::Event),
        Just(DeclKind::Interrupt),
    ];
    prop::collection::vec(kind.prop_flat_map(decl), 0..6).prop_map(|mut ds| {
        for (i, d) in ds.iter_mut().enumerate() {
            d.name = id(&format!("d{i}"));
        }
        SourceProgram {
            declarations: ds,
            source_name: "<input>".into(),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn render_then_parse_is_identity(p in program()) {
        let text = render(&p);
        let back = parse(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(back, p, "{}", text);
    }

    #[test]
    fn parser_is_total(s in "[ -~\n]{0,80}") {
        let _ = parse(&s);
    }
}
