//! Arithmetic expression language used to describe terminal payoffs,
//! drivers and obstacles as functions of `t`, `x`, `y` and `z`.
//!
//! Grammar (EBNF):
//!
//! ```text
//! input    = [ identifier "=" ] expr ;
//! expr     = term { ("+" | "-") term } ;
//! term     = unary { ("*" | "/") unary } ;
//! unary    = "-" unary | power ;
//! power    = primary [ "^" unary ] ;
//! primary  = number | variable | call | "(" expr ")" ;
//! call     = function "(" expr { "," expr } ")" ;
//! variable = "t" | "x" | "y" | "z" ;
//! function = "abs" | "min" | "max" | "exp" | "log" | "sqrt" | "pos" | "neg" ;
//! number   = digits [ "." digits ] [ ("e" | "E") [ "+" | "-" ] digits ]
//!          | "." digits [ ("e" | "E") [ "+" | "-" ] digits ] ;
//! ```
//!
//! `^` is right-associative and binds tighter than unary minus, so `-x^2`
//! is `-(x^2)` while `2^-1` is `0.5`. `pos(a) = max(a, 0)` and
//! `neg(a) = max(-a, 0)`. The optional `name =` prefix is a label and is
//! ignored. All error offsets are 0-based byte offsets into the source.

mod eval;
mod lexer;
mod parser;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

pub use eval::{evaluate, evaluate_with_derivative, Bindings, Dual, EvalError};
pub use lexer::{tokenize, Token, TokenKind};
pub use parser::parse_expression;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("invalid character {ch:?} at offset {offset}")]
    InvalidCharacter { offset: usize, ch: char },
    #[error("malformed number at offset {offset}")]
    MalformedNumber { offset: usize },
    #[error("unexpected {found} at offset {offset}, expected {expected}")]
    UnexpectedToken {
        offset: usize,
        found: String,
        expected: &'static str,
    },
    #[error("unbalanced parenthesis at offset {offset}")]
    UnbalancedParen { offset: usize },
    #[error("{function} takes {expected} argument(s), got {found} (offset {offset})")]
    WrongArity {
        offset: usize,
        function: Func,
        expected: usize,
        found: usize,
    },
    #[error("unknown function '{name}' at offset {offset}")]
    UnknownFunction { offset: usize, name: String },
    #[error("unknown variable '{name}' at offset {offset}")]
    UnknownVariable { offset: usize, name: String },
}

impl ExprError {
    pub fn offset(&self) -> usize {
        match self {
            ExprError::InvalidCharacter { offset, .. }
            | ExprError::MalformedNumber { offset }
            | ExprError::UnexpectedToken { offset, .. }
            | ExprError::UnbalancedParen { offset }
            | ExprError::WrongArity { offset, .. }
            | ExprError::UnknownFunction { offset, .. }
            | ExprError::UnknownVariable { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    T,
    X,
    Y,
    Z,
}

impl Var {
    pub const ALL: [Var; 4] = [Var::T, Var::X, Var::Y, Var::Z];

    pub fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::X => "x",
            Var::Y => "y",
            Var::Z => "z",
        }
    }

    pub fn from_name(name: &str) -> Option<Var> {
        match name {
            "t" => Some(Var::T),
            "x" => Some(Var::X),
            "y" => Some(Var::Y),
            "z" => Some(Var::Z),
            _ => None,
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Min,
    Max,
    Exp,
    Log,
    Sqrt,
    /// Positive part, `max(a, 0)`.
    Pos,
    /// Negative part, `max(-a, 0)`.
    Neg,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Pos => "pos",
            Func::Neg => "neg",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "pos" => Func::Pos,
            "neg" => Func::Neg,
            _ => return None,
        })
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Func {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Negate(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn constant(value: f64) -> Expr {
        Expr::Const(value)
    }

    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn call(func: Func, args: Vec<Expr>) -> Expr {
        debug_assert_eq!(args.len(), func.arity());
        Expr::Call(func, args)
    }

    pub fn free_vars(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<Var>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => {
                out.insert(*v);
            }
            Expr::Negate(e) => e.collect_vars(out),
            Expr::Binary(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    /// Replaces every occurrence of `var` with the constant `value`.
    pub fn substitute(&self, var: Var, value: f64) -> Expr {
        match self {
            Expr::Var(v) if *v == var => Expr::Const(value),
            Expr::Const(_) | Expr::Var(_) => self.clone(),
            Expr::Negate(e) => Expr::Negate(Box::new(e.substitute(var, value))),
            Expr::Binary(op, l, r) => Expr::binary(*op, l.substitute(var, value), r.substitute(var, value)),
            Expr::Call(f, args) => Expr::Call(*f, args.iter().map(|a| a.substitute(var, value)).collect()),
        }
    }

    /// `min(max(self, lower), upper)`.
    pub fn clamp(self, lower: Expr, upper: Expr) -> Expr {
        Expr::call(Func::Min, vec![Expr::call(Func::Max, vec![self, lower]), upper])
    }
}

/// Convenience: free variables of an expression.
pub fn free_vars(ast: &Expr) -> BTreeSet<Var> {
    ast.free_vars()
}

impl fmt::Display for Expr {
    /// Fully parenthesised form; reparses to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) if *c < 0.0 => write!(f, "(-{})", -c),
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Negate(e) => write!(f, "(-{e})"),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{func}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_vars_examples() {
        let fv = |s| parse_expression(s).unwrap().free_vars();
        assert_eq!(fv("t*x"), [Var::T, Var::X].into_iter().collect());
        assert!(fv("3.0").is_empty());
        assert_eq!(fv("f = y - z"), [Var::Y, Var::Z].into_iter().collect());
    }

    #[test]
    fn substitute_time() {
        let e = parse_expression("0.2*exp(-t)+0.05*x").unwrap();
        let s = e.substitute(Var::T, 1.0);
        assert_eq!(s.free_vars(), [Var::X].into_iter().collect());
        let v = evaluate(&s, &Bindings::new().with(Var::X, 2.0)).unwrap();
        assert!((v - (0.2 * (-1.0f64).exp() + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn display_reparses() {
        let e = parse_expression("-x^2 + min(max(x,0),2) / 3e-2 - -y").unwrap();
        let again = parse_expression(&e.to_string()).unwrap();
        assert_eq!(e, again);
    }
}
