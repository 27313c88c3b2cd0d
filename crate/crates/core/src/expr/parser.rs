//! Recursive descent parser.

use super::lexer::{tokenize, Token, TokenKind};
use super::{BinOp, Expr, ExprError, Func, Var};

pub fn parse_expression(source: &str) -> Result<Expr, ExprError> {
    let tokens = tokenize(source)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        end: source.len(),
    };
    parser.skip_label();
    let expr = parser.expr()?;
    match parser.peek() {
        None => Ok(expr),
        Some(tok) if tok.is(TokenKind::Paren, ")") => Err(ExprError::UnbalancedParen { offset: tok.offset }),
        Some(tok) => Err(unexpected(tok, "operator or end of input")),
    }
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    end: usize,
}

fn unexpected(tok: &Token, expected: &'static str) -> ExprError {
    ExprError::UnexpectedToken {
        offset: tok.offset,
        found: format!("{} '{}'", tok.kind, tok.lexeme),
        expected,
    }
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_is(&self, kind: TokenKind, lexeme: &str) -> bool {
        self.peek().is_some_and(|t| t.is(kind, lexeme))
    }

    fn advance(&mut self) -> Option<Token> {
        let tok = self.tokens.get(self.pos).cloned();
        if tok.is_some() {
            self.pos += 1;
        }
        tok
    }

    fn end_of_input(&self, expected: &'static str) -> ExprError {
        ExprError::UnexpectedToken {
            offset: self.end,
            found: "end of input".to_string(),
            expected,
        }
    }

    /// Drops a leading `name =`.
    fn skip_label(&mut self) {
        if self.tokens.len() >= 2
            && self.tokens[0].kind == TokenKind::Identifier
            && self.tokens[1].is(TokenKind::Operator, "=")
        {
            self.pos = 2;
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.peek_is(TokenKind::Operator, "+") {
                BinOp::Add
            } else if self.peek_is(TokenKind::Operator, "-") {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.peek_is(TokenKind::Operator, "*") {
                BinOp::Mul
            } else if self.peek_is(TokenKind::Operator, "/") {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.peek_is(TokenKind::Operator, "-") {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Expr::Negate(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.peek_is(TokenKind::Operator, "^") {
            self.pos += 1;
            // Right-associative; the exponent may carry its own sign.
            let exponent = self.unary()?;
            return Ok(Expr::binary(BinOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        const EXPECTED: &str = "number, variable, function call or '('";
        let tok = match self.advance() {
            Some(t) => t,
            None => return Err(self.end_of_input(EXPECTED)),
        };
        match tok.kind {
            TokenKind::Number => {
                let value: f64 = tok
                    .lexeme
                    .parse()
                    .map_err(|_| ExprError::MalformedNumber { offset: tok.offset })?;
                if !value.is_finite() {
                    return Err(ExprError::MalformedNumber { offset: tok.offset });
                }
                Ok(Expr::Const(value))
            }
            TokenKind::Identifier => {
                if self.peek_is(TokenKind::Paren, "(") {
                    self.call(tok)
                } else {
                    Var::from_name(&tok.lexeme)
                        .map(Expr::Var)
                        .ok_or(ExprError::UnknownVariable {
                            offset: tok.offset,
                            name: tok.lexeme,
                        })
                }
            }
            TokenKind::Paren if tok.lexeme == "(" => {
                let inner = self.expr()?;
                self.close_paren(tok.offset)?;
                Ok(inner)
            }
            TokenKind::Paren => Err(ExprError::UnbalancedParen { offset: tok.offset }),
            _ => Err(unexpected(&tok, EXPECTED)),
        }
    }

    fn close_paren(&mut self, open_offset: usize) -> Result<(), ExprError> {
        match self.advance() {
            Some(t) if t.is(TokenKind::Paren, ")") => Ok(()),
            Some(t) => Err(unexpected(&t, "')'")),
            None => Err(ExprError::UnbalancedParen { offset: open_offset }),
        }
    }

    fn call(&mut self, name: Token) -> Result<Expr, ExprError> {
        let func = Func::from_name(&name.lexeme).ok_or_else(|| ExprError::UnknownFunction {
            offset: name.offset,
            name: name.lexeme.clone(),
        })?;
        let open = self.advance().expect("caller checked for '('");
        let mut args = Vec::new();
        if self.peek_is(TokenKind::Paren, ")") {
            self.pos += 1;
        } else {
            loop {
                args.push(self.expr()?);
                if self.peek_is(TokenKind::Comma, ",") {
                    self.pos += 1;
                    continue;
                }
                self.close_paren(open.offset)?;
                break;
            }
        }
        if args.len() != func.arity() {
            return Err(ExprError::WrongArity {
                offset: name.offset,
                function: func,
                expected: func.arity(),
                found: args.len(),
            });
        }
        Ok(Expr::Call(func, args))
    }
}
