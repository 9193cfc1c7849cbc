//! Type terms, substitutions and first-order unification.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

pub type VarId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TypeTerm {
    Int,
    Float,
    Bool,
    Void,
    Var(VarId),
    Arrow(Box<TypeTerm>, Box<TypeTerm>),
    /// Element type and length; the length is a `Nat` or a variable.
    Array(Box<TypeTerm>, Box<TypeTerm>),
    Nat(u32),
}

impl TypeTerm {
    pub fn arrow(a: TypeTerm, b: TypeTerm) -> TypeTerm {
        TypeTerm::Arrow(Box::new(a), Box::new(b))
    }

    pub fn array(elem: TypeTerm, len: TypeTerm) -> TypeTerm {
        TypeTerm::Array(Box::new(elem), Box::new(len))
    }

    pub fn occurs(&self, v: VarId) -> bool {
        match self {
            TypeTerm::Var(w) => *w == v,
            TypeTerm::Arrow(a, b) | TypeTerm::Array(a, b) => a.occurs(v) || b.occurs(v),
            _ => false,
        }
    }

    pub fn free_vars(&self, out: &mut BTreeSet<VarId>) {
        match self {
            TypeTerm::Var(v) => {
                out.insert(*v);
            }
            TypeTerm::Arrow(a, b) | TypeTerm::Array(a, b) => {
                a.free_vars(out);
                b.free_vars(out);
            }
            _ => {}
        }
    }

    /// Variables in first-occurrence order.
    pub fn vars_in_order(&self, out: &mut Vec<VarId>) {
        match self {
            TypeTerm::Var(v) => {
                if !out.contains(v) {
                    out.push(*v);
                }
            }
            TypeTerm::Arrow(a, b) | TypeTerm::Array(a, b) => {
                a.vars_in_order(out);
                b.vars_in_order(out);
            }
            _ => {}
        }
    }

    pub fn is_ground(&self) -> bool {
        let mut vs = BTreeSet::new();
        self.free_vars(&mut vs);
        vs.is_empty()
    }

    pub fn is_array(&self) -> bool {
        matches!(self, TypeTerm::Array(..))
    }

    /// Renders with caller-chosen names for variables.
    pub fn render_with(&self, name: &dyn Fn(VarId) -> String) -> String {
        match self {
            TypeTerm::Int => "Int".into(),
            TypeTerm::Float => "Float".into(),
            TypeTerm::Bool => "Bool".into(),
            TypeTerm::Void => "Void".into(),
            TypeTerm::Nat(n) => n.to_string(),
            TypeTerm::Var(v) => format!("%{}", name(*v)),
            TypeTerm::Arrow(a, b) => {
                let lhs = a.render_with(name);
                if matches!(**a, TypeTerm::Arrow(..)) {
                    format!("({lhs}) -> {}", b.render_with(name))
                } else {
                    format!("{lhs} -> {}", b.render_with(name))
                }
            }
            TypeTerm::Array(e, n) => format!("Array<{}, {}>", e.render_with(name), n.render_with(name)),
        }
    }
}

impl fmt::Display for TypeTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_with(&|v| format!("t{v}")))
    }
}

/// Letter names `a`, `b`, ... `z`, `a1`, ...
pub fn var_letter(i: usize) -> String {
    let c = (b'a' + (i % 26) as u8) as char;
    if i < 26 {
        c.to_string()
    } else {
        format!("{c}{}", i / 26)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UnifyError {
    #[error("cannot unify `{0}` with `{1}`")]
    Mismatch(TypeTerm, TypeTerm),
    #[error("type variable t{0} occurs in `{1}`")]
    OccursCheck(VarId, TypeTerm),
    #[error("type variable t{0} is declared generic but would be fixed to `{1}`")]
    Rigid(VarId, TypeTerm),
}

/// Idempotent substitution: no binding's right-hand side mentions a bound variable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Substitution {
    bindings: BTreeMap<VarId, TypeTerm>,
}

impl Substitution {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, v: VarId) -> Option<&TypeTerm> {
        self.bindings.get(&v)
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }

    pub fn bindings(&self) -> impl Iterator<Item = (VarId, &TypeTerm)> {
        self.bindings.iter().map(|(k, v)| (*k, v))
    }

    pub fn apply(&self, t: &TypeTerm) -> TypeTerm {
        match t {
            TypeTerm::Var(v) => match self.bindings.get(v) {
                Some(b) => b.clone(),
                None => t.clone(),
            },
            TypeTerm::Arrow(a, b) => TypeTerm::arrow(self.apply(a), self.apply(b)),
            TypeTerm::Array(a, b) => TypeTerm::array(self.apply(a), self.apply(b)),
            _ => t.clone(),
        }
    }

    fn bind(&mut self, v: VarId, t: TypeTerm) -> Result<(), UnifyError> {
        if t == TypeTerm::Var(v) {
            return Ok(());
        }
        if t.occurs(v) {
            return Err(UnifyError::OccursCheck(v, t));
        }
        let single = Substitution {
            bindings: BTreeMap::from([(v, t.clone())]),
        };
        for rhs in self.bindings.values_mut() {
            *rhs = single.apply(rhs);
        }
        self.bindings.insert(v, t);
        Ok(())
    }

    /// Extends `self` so that both terms become equal. Variables in `rigid`
    /// may only be bound to flexible variables.
    pub fn unify_with(
        &mut self,
        a: &TypeTerm,
        b: &TypeTerm,
        rigid: &BTreeSet<VarId>,
    ) -> Result<(), UnifyError> {
        let a = self.apply(a);
        let b = self.apply(b);
        match (&a, &b) {
            (TypeTerm::Var(x), TypeTerm::Var(y)) if x == y => Ok(()),
            (TypeTerm::Var(x), _) if !rigid.contains(x) => self.bind(*x, b.clone()),
            (_, TypeTerm::Var(y)) if !rigid.contains(y) => self.bind(*y, a.clone()),
            (TypeTerm::Var(x), _) => Err(UnifyError::Rigid(*x, b.clone())),
            (_, TypeTerm::Var(y)) => Err(UnifyError::Rigid(*y, a.clone())),
            (TypeTerm::Arrow(a1, a2), TypeTerm::Arrow(b1, b2))
            | (TypeTerm::Array(a1, a2), TypeTerm::Array(b1, b2)) => {
                self.unify_with(a1, b1, rigid)?;
                self.unify_with(a2, b2, rigid)
            }
            _ if a == b => Ok(()),
            _ => Err(UnifyError::Mismatch(a.clone(), b.clone())),
        }
    }
}

/// Returns an extension of `s` unifying `a` and `b`.
pub fn unify(a: &TypeTerm, b: &TypeTerm, s: &Substitution) -> Result<Substitution, UnifyError> {
    let mut out = s.clone();
    out.unify_with(a, b, &BTreeSet::new())?;
    Ok(out)
}

/// A generalized type: variables in `vars` are instantiated fresh per use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheme {
    pub vars: Vec<VarId>,
    pub flow_in: TypeTerm,
    pub params: Vec<TypeTerm>,
    pub flow_out: TypeTerm,
}

impl Scheme {
    pub fn mono(flow_in: TypeTerm, params: Vec<TypeTerm>, flow_out: TypeTerm) -> Self {
        Scheme {
            vars: Vec::new(),
            flow_in,
            params,
            flow_out,
        }
    }

    fn order(&self) -> Vec<VarId> {
        let mut order = Vec::new();
        self.flow_in.vars_in_order(&mut order);
        for p in &self.params {
            p.vars_in_order(&mut order);
        }
        self.flow_out.vars_in_order(&mut order);
        order
    }

    /// Canonical text with variables renamed `%a`, `%b`, ... by first occurrence.
    pub fn render(&self) -> String {
        let order = self.order();
        let name = |v: VarId| var_letter(order.iter().position(|w| *w == v).unwrap_or(order.len()));
        let params: Vec<String> = self.params.iter().map(|p| p.render_with(&name)).collect();
        let mut s = format!("({})", self.flow_in.render_with(&name));
        if !params.is_empty() {
            s.push_str(&format!("({})", params.join(", ")));
        }
        s.push_str(&format!(" -> {}", self.flow_out.render_with(&name)));
        s
    }

    /// Equality up to a consistent renaming of variables.
    pub fn alpha_eq(&self, other: &Scheme) -> bool {
        self.params.len() == other.params.len() && self.render() == other.render()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(i: u32) -> TypeTerm {
        TypeTerm::Var(i)
    }

    #[test]
    fn binds_variable() {
        let s = unify(&v(0), &TypeTerm::Int, &Substitution::new()).unwrap();
        assert_eq!(s.get(0), Some(&TypeTerm::Int));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn decomposes_arrows() {
        let s = unify(
            &TypeTerm::arrow(v(0), v(1)),
            &TypeTerm::arrow(TypeTerm::Int, TypeTerm::Bool),
            &Substitution::new(),
        )
        .unwrap();
        assert_eq!(s.get(0), Some(&TypeTerm::Int));
        assert_eq!(s.get(1), Some(&TypeTerm::Bool));
    }

    #[test]
    fn occurs_check() {
        let err = unify(&v(0), &TypeTerm::arrow(v(0), TypeTerm::Int), &Substitution::new()).unwrap_err();
        assert!(matches!(err, UnifyError::OccursCheck(0, _)));
    }

    #[test]
    fn mismatch() {
        assert!(matches!(
            unify(&TypeTerm::Int, &TypeTerm::Bool, &Substitution::new()),
            Err(UnifyError::Mismatch(..))
        ));
        assert!(unify(
            &TypeTerm::array(TypeTerm::Int, TypeTerm::Nat(4)),
            &TypeTerm::array(TypeTerm::Int, TypeTerm::Nat(5)),
            &Substitution::new()
        )
        .is_err());
    }

    #[test]
    fn chained_bindings_stay_idempotent() {
        let mut s = Substitution::new();
        s.unify_with(&v(0), &v(1), &BTreeSet::new()).unwrap();
        s.unify_with(&v(1), &TypeTerm::arrow(v(2), v(2)), &BTreeSet::new()).unwrap();
        s.unify_with(&v(2), &TypeTerm::Float, &BTreeSet::new()).unwrap();
        let t = s.apply(&v(0));
        assert_eq!(t, TypeTerm::arrow(TypeTerm::Float, TypeTerm::Float));
        assert_eq!(s.apply(&t), t);
    }

    #[test]
    fn rigid_variables_refuse_concrete_types() {
        let rigid = BTreeSet::from([7]);
        let mut s = Substitution::new();
        assert!(s.unify_with(&v(7), &TypeTerm::Int, &rigid).is_err());
        assert!(s.unify_with(&v(3), &v(7), &rigid).is_ok());
        assert_eq!(s.apply(&v(3)), v(7));
    }

    #[test]
    fn scheme_render_renames() {
        let s = Scheme {
            vars: vec![5, 9],
            flow_in: v(9),
            params: vec![TypeTerm::arrow(v(9), v(5))],
            flow_out: v(5),
        };
        assert_eq!(s.render(), "(%a)(%a -> %b) -> %b");
    }
}
