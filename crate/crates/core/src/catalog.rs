//! Built-in primitives: their source declarations and runtime identities.

/// Declarations every program sees. User programs may repeat a primitive
/// declaration verbatim; `ifElse` may be redefined.
pub const PRELUDE: &str = r#"
primitive id(x: %a) -> %a [builtin]
primitive select(b: Bool)(t: %a, f: %a) -> %a [builtin]
primitive apply(a: %a)(func: %a -> %b) -> %b [builtin]
primitive set(x: %a)(v: %a) -> %a [write x] [builtin]
primitive void(x: %a) -> Void [builtin]
primitive getAt(a: Array<%t, %n>)(i: Int) -> %t [builtin]
primitive setAt(a: Array<%t, %n>)(i: Int, v: %t) -> Array<%t, %n> [write a] [builtin]
primitive add(x: Int)(y: Int) -> Int [builtin]
primitive sub(x: Int)(y: Int) -> Int [builtin]
primitive mul(x: Int)(y: Int) -> Int [builtin]
primitive div(x: Int)(y: Int) -> Int [builtin]
primitive rem(x: Int)(y: Int) -> Int [builtin]
primitive and(x: Int)(y: Int) -> Int [builtin]
primitive or(x: Int)(y: Int) -> Int [builtin]
primitive xor(x: Int)(y: Int) -> Int [builtin]
primitive shl(x: Int)(y: Int) -> Int [builtin]
primitive shr(x: Int)(y: Int) -> Int [builtin]
primitive lt(x: Int)(y: Int) -> Bool [builtin]
primitive le(x: Int)(y: Int) -> Bool [builtin]
primitive gt(x: Int)(y: Int) -> Bool [builtin]
primitive ge(x: Int)(y: Int) -> Bool [builtin]
primitive eq(x: Int)(y: Int) -> Bool [builtin]
primitive ne(x: Int)(y: Int) -> Bool [builtin]
primitive fadd(x: Float)(y: Float) -> Float [builtin]
primitive fsub(x: Float)(y: Float) -> Float [builtin]
primitive fmul(x: Float)(y: Float) -> Float [builtin]
primitive fdiv(x: Float)(y: Float) -> Float [builtin]
primitive fsqrt(x: Float) -> Float [builtin]
primitive flt(x: Float)(y: Float) -> Bool [builtin]
primitive fle(x: Float)(y: Float) -> Bool [builtin]
primitive fgt(x: Float)(y: Float) -> Bool [builtin]
primitive fge(x: Float)(y: Float) -> Bool [builtin]
primitive itof(x: Int) -> Float [builtin]
primitive ftoi(x: Float) -> Int [builtin]
primitive not(b: Bool) -> Bool [builtin]
primitive band(a: Bool)(b: Bool) -> Bool [builtin]
primitive bor(a: Bool)(b: Bool) -> Bool [builtin]
primitive getTemp(x: Float)() -> Float [IO] [write x] [builtin]
primitive sample(ch: Int)() -> Int [IO] [builtin]
primitive emit(v: %a)() -> Void [IO] [builtin]
primitive addEventQ(v: %a)(h: %a -> Void) -> Void [builtin]

func ifElse(p: %a)(s: %a -> Bool, t: %a -> %b, f: %a -> %b) -> %b {
    let func = p.apply(s).select(t, f)
    p.apply(func)
}
"#;

/// Sensor channel read by `getTemp`.
pub const TEMP_CHANNEL: u32 = 0;
pub const SENSOR_CHANNELS: u32 = 8;

macro_rules! prims {
    ($($v:ident => $n:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Prim { $($v),* }

        impl Prim {
            pub const ALL: &'static [Prim] = &[$(Prim::$v),*];

            pub fn name(self) -> &'static str {
                match self { $(Prim::$v => $n),* }
            }

            pub fn from_name(s: &str) -> Option<Prim> {
                match s { $($n => Some(Prim::$v),)* _ => None }
            }
        }
    };
}

prims! {
    Id => "id", Select => "select", Apply => "apply", Set => "set", Void => "void",
    GetAt => "getAt", SetAt => "setAt",
    Add => "add", Sub => "sub", Mul => "mul", Div => "div", Rem => "rem",
    And => "and", Or => "or", Xor => "xor", Shl => "shl", Shr => "shr",
    Lt => "lt", Le => "le", Gt => "gt", Ge => "ge", Eq => "eq", Ne => "ne",
    FAdd => "fadd", FSub => "fsub", FMul => "fmul", FDiv => "fdiv", FSqrt => "fsqrt",
    FLt => "flt", FLe => "fle", FGt => "fgt", FGe => "fge",
    IToF => "itof", FToI => "ftoi",
    Not => "not", BAnd => "band", BOr => "bor",
    GetTemp => "getTemp", Sample => "sample", Emit => "emit", AddEventQ => "addEventQ",
}

impl Prim {
    pub fn is_io(self) -> bool {
        matches!(self, Prim::GetTemp | Prim::Sample | Prim::Emit)
    }

    pub fn code(self) -> u8 {
        Prim::ALL.iter().position(|p| *p == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Option<Prim> {
        Prim::ALL.get(c as usize).copied()
    }
}
