//! Expression language for occupancy rate functions `g(k)`.
//!
//! Grammar (whitespace-insensitive, `k` is the single variable):
//!
//! ```text
//! expr   := term  (('+' | '-') term)*          left-associative
//! term   := unary (('*' | '/') unary)*         left-associative
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?                  right-associative
//! atom   := number | 'k' | 'min' '(' expr ',' expr ')'
//!         | 'max' '(' expr ',' expr ')' | 'ind' '(' cond ')' | '(' expr ')'
//! cond   := 'k' '>=' number
//! ```
//!
//! Precedence is `^` over unary `-` over `*`,`/` over `+`,`-`.
//!
//! An indicator factor short-circuits multiplication: in `ind(c) * e` the
//! factor `e` is evaluated only when the condition holds, so guarded forms
//! like `ind(k>=1) * (1/k)` are total on all of ℕ.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown identifier `{name}` at byte {position}")]
    UnknownIdentifier { position: usize, name: String },
    #[error("`{name}` expects {expected} argument(s)")]
    Arity { name: String, expected: usize },
    #[error("empty expression")]
    Empty,
    #[error("expression longer than {max} bytes")]
    TooLong { max: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("rate evaluates to a negative value {value} at k = {k}")]
    Negative { k: u64, value: f64 },
    #[error("rate is not finite at k = {k}")]
    NotFinite { k: u64 },
}

const MAX_SOURCE_LEN: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// Condition carried by an indicator; only `k >= c` is supported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cond {
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RateExpr {
    Num(f64),
    K,
    Bin(BinOp, Box<RateExpr>, Box<RateExpr>),
    Neg(Box<RateExpr>),
    Min(Box<RateExpr>, Box<RateExpr>),
    Max(Box<RateExpr>, Box<RateExpr>),
    Ind(Cond),
}

impl RateExpr {
    /// Parse an expression from source text.
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        if text.trim().is_empty() {
            return Err(ParseError::Empty);
        }
        if text.len() > MAX_SOURCE_LEN {
            return Err(ParseError::TooLong {
                max: MAX_SOURCE_LEN,
            });
        }
        let mut parser = Parser {
            src: text.as_bytes(),
            pos: 0,
        };
        let expr = parser.expr()?;
        parser.skip_ws();
        if parser.pos != parser.src.len() {
            return Err(ParseError::Syntax {
                position: parser.pos,
                message: "trailing input".into(),
            });
        }
        Ok(expr)
    }

    /// Evaluate at occupancy `k`. The result must be finite and nonnegative.
    pub fn eval(&self, k: u64) -> Result<f64, EvalError> {
        let v = self.eval_raw(k as f64);
        if !v.is_finite() {
            Err(EvalError::NotFinite { k })
        } else if v < 0.0 {
            Err(EvalError::Negative { k, value: v })
        } else {
            Ok(v)
        }
    }

    // Raw evaluation: intermediate values may be negative or non-finite;
    // non-finite values propagate and are rejected at the top level.
    fn eval_raw(&self, k: f64) -> f64 {
        match self {
            RateExpr::Num(v) => *v,
            RateExpr::K => k,
            RateExpr::Neg(e) => -e.eval_raw(k),
            RateExpr::Min(a, b) => a.eval_raw(k).min(b.eval_raw(k)),
            RateExpr::Max(a, b) => a.eval_raw(k).max(b.eval_raw(k)),
            RateExpr::Ind(c) => {
                if k >= c.threshold {
                    1.0
                } else {
                    0.0
                }
            }
            RateExpr::Bin(BinOp::Mul, a, b) => {
                // Indicator factors gate evaluation of the other side.
                if let RateExpr::Ind(c) = a.as_ref() {
                    if k < c.threshold {
                        return 0.0;
                    }
                    return b.eval_raw(k);
                }
                if let RateExpr::Ind(c) = b.as_ref() {
                    if k < c.threshold {
                        return 0.0;
                    }
                    return a.eval_raw(k);
                }
                a.eval_raw(k) * b.eval_raw(k)
            }
            RateExpr::Bin(op, a, b) => {
                let (x, y) = (a.eval_raw(k), b.eval_raw(k));
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Div => x / y,
                    BinOp::Pow => x.powf(y),
                    BinOp::Mul => unreachable!(),
                }
            }
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, byte: u8) -> Result<(), ParseError> {
        if self.peek() == Some(byte) {
            self.pos += 1;
            Ok(())
        } else {
            Err(ParseError::Syntax {
                position: self.pos,
                message: format!("expected `{}`", byte as char),
            })
        }
    }

    fn expr(&mut self) -> Result<RateExpr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = RateExpr::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = RateExpr::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<RateExpr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = RateExpr::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = RateExpr::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<RateExpr, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            Ok(RateExpr::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<RateExpr, ParseError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exponent = self.unary()?;
            Ok(RateExpr::Bin(
                BinOp::Pow,
                Box::new(base),
                Box::new(exponent),
            ))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<RateExpr, ParseError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.eat(b')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number().map(RateExpr::Num),
            Some(c) if c.is_ascii_alphabetic() => self.identifier(),
            _ => Err(ParseError::Syntax {
                position: self.pos,
                message: "expected a number, `k`, a function, or `(`".into(),
            }),
        }
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self
            .src
            .get(self.pos)
            .is_some_and(|c| c.is_ascii_digit() || *c == b'.')
        {
            self.pos += 1;
        }
        // Optional exponent part (e.g. 1e-3).
        if self
            .src
            .get(self.pos)
            .is_some_and(|c| *c == b'e' || *c == b'E')
        {
            let mut probe = self.pos + 1;
            if self
                .src
                .get(probe)
                .is_some_and(|c| *c == b'+' || *c == b'-')
            {
                probe += 1;
            }
            if self.src.get(probe).is_some_and(u8::is_ascii_digit) {
                self.pos = probe;
                while self.src.get(self.pos).is_some_and(u8::is_ascii_digit) {
                    self.pos += 1;
                }
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<f64>().map_err(|_| ParseError::Syntax {
            position: start,
            message: format!("invalid number `{text}`"),
        })
    }

    fn identifier(&mut self) -> Result<RateExpr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self
            .src
            .get(self.pos)
            .is_some_and(|c| c.is_ascii_alphanumeric() || *c == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        match name {
            "k" => Ok(RateExpr::K),
            "min" | "max" => {
                let name = name.to_string();
                self.eat(b'(')?;
                let a = self.expr()?;
                if self.peek() != Some(b',') {
                    return Err(ParseError::Arity { name, expected: 2 });
                }
                self.pos += 1;
                let b = self.expr()?;
                if self.peek() == Some(b',') {
                    return Err(ParseError::Arity { name, expected: 2 });
                }
                self.eat(b')')?;
                Ok(if name == "min" {
                    RateExpr::Min(Box::new(a), Box::new(b))
                } else {
                    RateExpr::Max(Box::new(a), Box::new(b))
                })
            }
            "ind" => {
                self.eat(b'(')?;
                self.skip_ws();
                if self.peek() != Some(b'k') {
                    return Err(ParseError::Syntax {
                        position: self.pos,
                        message: "indicator condition must have the form k>=c".into(),
                    });
                }
                self.pos += 1;
                self.skip_ws();
                if !self.src[self.pos..].starts_with(b">=") {
                    return Err(ParseError::Syntax {
                        position: self.pos,
                        message: "indicator condition must have the form k>=c".into(),
                    });
                }
                self.pos += 2;
                let threshold = self.number()?;
                self.eat(b')')?;
                Ok(RateExpr::Ind(Cond { threshold }))
            }
            "" => Err(ParseError::Syntax {
                position: start,
                message: "expected identifier".into(),
            }),
            other => Err(ParseError::UnknownIdentifier {
                position: start,
                name: other.to_string(),
            }),
        }
    }
}

// Canonical printing; `parse(print(e)) == e` (checked by property test).
impl fmt::Display for RateExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

impl RateExpr {
    // Precedence levels: 0 additive, 1 multiplicative, 2 unary minus, 3 power.
    fn prec(&self) -> u8 {
        match self {
            RateExpr::Bin(BinOp::Add | BinOp::Sub, _, _) => 0,
            RateExpr::Bin(BinOp::Mul | BinOp::Div, _, _) => 1,
            RateExpr::Neg(_) => 2,
            RateExpr::Bin(BinOp::Pow, _, _) => 3,
            _ => 4,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        let prec = self.prec();
        let parens = prec < min_prec;
        if parens {
            write!(f, "(")?;
        }
        match self {
            RateExpr::Num(v) => write!(f, "{v}")?,
            RateExpr::K => write!(f, "k")?,
            RateExpr::Neg(e) => {
                write!(f, "-")?;
                e.fmt_prec(f, 2)?;
            }
            RateExpr::Min(a, b) | RateExpr::Max(a, b) => {
                let name = if matches!(self, RateExpr::Min(_, _)) {
                    "min"
                } else {
                    "max"
                };
                write!(f, "{name}(")?;
                a.fmt_prec(f, 0)?;
                write!(f, ",")?;
                b.fmt_prec(f, 0)?;
                write!(f, ")")?;
            }
            RateExpr::Ind(c) => write!(f, "ind(k>={})", c.threshold)?,
            RateExpr::Bin(op, a, b) => {
                let (sym, lp, rp) = match op {
                    BinOp::Add => ("+", 0, 1),
                    BinOp::Sub => ("-", 0, 1),
                    BinOp::Mul => ("*", 1, 2),
                    BinOp::Div => ("/", 1, 2),
                    // Right-associative: parenthesize a left child of equal
                    // precedence, allow it on the right.
                    BinOp::Pow => ("^", 4, 2),
                };
                a.fmt_prec(f, lp)?;
                write!(f, "{sym}")?;
                b.fmt_prec(f, rp)?;
            }
        }
        if parens {
            write!(f, ")")?;
        }
        Ok(())
    }
}
