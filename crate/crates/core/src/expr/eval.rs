//! Evaluation in IEEE double precision, plus forward-mode derivatives.

use thiserror::Error;

use super::{BinOp, Expr, Func, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("variable '{0}' is not bound")]
    UnboundVariable(Var),
    #[error("{operation} is undefined at {argument}")]
    Domain { operation: &'static str, argument: f64 },
    #[error("non-finite result {0}")]
    NonFinite(f64),
}

/// Values for the free variables `t, x, y, z`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Bindings([Option<f64>; 4]);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn txyz(t: f64, x: f64, y: f64, z: f64) -> Self {
        Bindings([Some(t), Some(x), Some(y), Some(z)])
    }

    pub fn tx(t: f64, x: f64) -> Self {
        Bindings([Some(t), Some(x), None, None])
    }

    pub fn with(mut self, var: Var, value: f64) -> Self {
        self.0[var.index()] = Some(value);
        self
    }

    pub fn get(&self, var: Var) -> Option<f64> {
        self.0[var.index()]
    }
}

pub fn evaluate(ast: &Expr, bindings: &Bindings) -> Result<f64, EvalError> {
    let v = eval(ast, bindings)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite(v))
    }
}

fn eval(ast: &Expr, b: &Bindings) -> Result<f64, EvalError> {
    Ok(match ast {
        Expr::Const(c) => *c,
        Expr::Var(v) => b.get(*v).ok_or(EvalError::UnboundVariable(*v))?,
        Expr::Negate(e) => -eval(e, b)?,
        Expr::Binary(op, l, r) => {
            let (l, r) = (eval(l, b)?, eval(r, b)?);
            match op {
                BinOp::Add => l + r,
                BinOp::Sub => l - r,
                BinOp::Mul => l * r,
                BinOp::Div => l / r,
                BinOp::Pow => power(l, r)?,
            }
        }
        Expr::Call(f, args) => {
            let a = eval(&args[0], b)?;
            match f {
                Func::Abs => a.abs(),
                Func::Min => a.min(eval(&args[1], b)?),
                Func::Max => a.max(eval(&args[1], b)?),
                Func::Exp => a.exp(),
                Func::Log => log(a)?,
                Func::Sqrt => sqrt(a)?,
                Func::Pos => a.max(0.0),
                Func::Neg => (-a).max(0.0),
            }
        }
    })
}

fn power(base: f64, exponent: f64) -> Result<f64, EvalError> {
    if base < 0.0 && exponent.fract() != 0.0 {
        return Err(EvalError::Domain {
            operation: "non-integer power of a negative base",
            argument: base,
        });
    }
    Ok(base.powf(exponent))
}

fn log(a: f64) -> Result<f64, EvalError> {
    if a < 0.0 {
        return Err(EvalError::Domain {
            operation: "log",
            argument: a,
        });
    }
    Ok(a.ln())
}

fn sqrt(a: f64) -> Result<f64, EvalError> {
    if a < 0.0 {
        return Err(EvalError::Domain {
            operation: "sqrt",
            argument: a,
        });
    }
    Ok(a.sqrt())
}

/// A value together with its derivative with respect to one variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub value: f64,
    pub deriv: f64,
}

/// Evaluates `ast` and its derivative with respect to `wrt`. At kinks
/// (`abs`, `min`, `max`, `pos`, `neg`) the one-sided derivative of the
/// selected branch is returned. Only the value is checked for finiteness.
pub fn evaluate_with_derivative(ast: &Expr, bindings: &Bindings, wrt: Var) -> Result<Dual, EvalError> {
    let d = eval_dual(ast, bindings, wrt)?;
    if d.value.is_finite() {
        Ok(d)
    } else {
        Err(EvalError::NonFinite(d.value))
    }
}

fn eval_dual(ast: &Expr, b: &Bindings, wrt: Var) -> Result<Dual, EvalError> {
    let dual = |value, deriv| Dual { value, deriv };
    Ok(match ast {
        Expr::Const(c) => dual(*c, 0.0),
        Expr::Var(v) => {
            let value = b.get(*v).ok_or(EvalError::UnboundVariable(*v))?;
            dual(value, if *v == wrt { 1.0 } else { 0.0 })
        }
        Expr::Negate(e) => {
            let a = eval_dual(e, b, wrt)?;
            dual(-a.value, -a.deriv)
        }
        Expr::Binary(op, l, r) => {
            let (l, r) = (eval_dual(l, b, wrt)?, eval_dual(r, b, wrt)?);
            match op {
                BinOp::Add => dual(l.value + r.value, l.deriv + r.deriv),
                BinOp::Sub => dual(l.value - r.value, l.deriv - r.deriv),
                BinOp::Mul => dual(l.value * r.value, l.deriv * r.value + l.value * r.deriv),
                BinOp::Div => dual(
                    l.value / r.value,
                    (l.deriv * r.value - l.value * r.deriv) / (r.value * r.value),
                ),
                BinOp::Pow => {
                    let value = power(l.value, r.value)?;
                    let mut deriv = 0.0;
                    if l.deriv != 0.0 {
                        deriv += r.value * l.value.powf(r.value - 1.0) * l.deriv;
                    }
                    if r.deriv != 0.0 {
                        deriv += value * l.value.ln() * r.deriv;
                    }
                    dual(value, deriv)
                }
            }
        }
        Expr::Call(f, args) => {
            let a = eval_dual(&args[0], b, wrt)?;
            match f {
                Func::Abs => dual(a.value.abs(), if a.value < 0.0 { -a.deriv } else { a.deriv }),
                Func::Min => {
                    let c = eval_dual(&args[1], b, wrt)?;
                    if c.value < a.value {
                        c
                    } else {
                        a
                    }
                }
                Func::Max => {
                    let c = eval_dual(&args[1], b, wrt)?;
                    if c.value > a.value {
                        c
                    } else {
                        a
                    }
                }
                Func::Exp => {
                    let e = a.value.exp();
                    dual(e, e * a.deriv)
                }
                Func::Log => dual(log(a.value)?, a.deriv / a.value),
                Func::Sqrt => {
                    let s = sqrt(a.value)?;
                    dual(s, a.deriv / (2.0 * s))
                }
                Func::Pos => {
                    if a.value > 0.0 {
                        a
                    } else {
                        dual(0.0, 0.0)
                    }
                }
                Func::Neg => {
                    if a.value < 0.0 {
                        dual(-a.value, -a.deriv)
                    } else {
                        dual(0.0, 0.0)
                    }
                }
            }
        }
    })
}
