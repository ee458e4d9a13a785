//! Coefficient expressions: a small recursive-descent parser over named
//! variables with symbolic differentiation.
//!
//! Grammar:
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := ('-' | '+') unary | power
//! power := atom ('^' unary)?
//! atom  := number | name | name '(' expr (',' expr)? ')' | '(' expr ')'
//! ```

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{message} at offset {offset} in `{source_text}`")]
pub struct ParseError {
    pub message: String,
    pub offset: usize,
    pub source_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Sign,
    Sinh,
    Cosh,
    Tanh,
    Atan,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "ln" | "log" => Func::Ln,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "sign" => Func::Sign,
            "sinh" => Func::Sinh,
            "cosh" => Func::Cosh,
            "tanh" => Func::Tanh,
            "atan" => Func::Atan,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Sign => "sign",
            Func::Sinh => "sinh",
            Func::Cosh => "cosh",
            Func::Tanh => "tanh",
            Func::Atan => "atan",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Tan => v.tan(),
            Func::Exp => v.exp(),
            Func::Ln => v.ln(),
            Func::Sqrt => v.sqrt(),
            Func::Abs => v.abs(),
            Func::Sign => {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Func::Sinh => v.sinh(),
            Func::Cosh => v.cosh(),
            Func::Tanh => v.tanh(),
            Func::Atan => v.atan(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// Index into the variable list the expression was parsed against.
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

use Expr::*;

fn num(v: f64) -> Expr {
    Num(v)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Num(x), Num(y)) => Num(x + y),
        (Num(z), e) | (e, Num(z)) if z == 0.0 => e,
        (a, b) => Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Num(x), Num(y)) => Num(x - y),
        (e, Num(z)) if z == 0.0 => e,
        (Num(z), e) if z == 0.0 => neg(e),
        (a, b) => Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Num(x), Num(y)) => Num(x * y),
        (Num(z), _) | (_, Num(z)) if z == 0.0 => Num(0.0),
        (Num(o), e) | (e, Num(o)) if o == 1.0 => e,
        (a, b) => Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Num(x), Num(y)) if y != 0.0 => Num(x / y),
        (Num(z), _) if z == 0.0 => Num(0.0),
        (e, Num(o)) if o == 1.0 => e,
        (a, b) => Div(Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Num(x) => Num(-x),
        Neg(e) => *e,
        e => Neg(Box::new(e)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Num(x), Num(y)) => Num(x.powf(y)),
        (_, Num(z)) if z == 0.0 => Num(1.0),
        (e, Num(o)) if o == 1.0 => e,
        (a, b) => Pow(Box::new(a), Box::new(b)),
    }
}

fn call(f: Func, a: Expr) -> Expr {
    match a {
        Num(x) => Num(f.apply(x)),
        e => Call(f, Box::new(e)),
    }
}

impl Expr {
    pub fn parse(src: &str, vars: &[&str]) -> Result<Expr, ParseError> {
        let mut p = Parser {
            src,
            bytes: src.as_bytes(),
            pos: 0,
            vars,
        };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos < p.bytes.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, vals: &[f64]) -> f64 {
        match self {
            Num(v) => *v,
            Var(i) => vals[*i],
            Neg(a) => -a.eval(vals),
            Add(a, b) => a.eval(vals) + b.eval(vals),
            Sub(a, b) => a.eval(vals) - b.eval(vals),
            Mul(a, b) => a.eval(vals) * b.eval(vals),
            Div(a, b) => a.eval(vals) / b.eval(vals),
            Pow(a, b) => {
                let base = a.eval(vals);
                match **b {
                    Num(e) if e == e.trunc() && e.abs() <= 64.0 => base.powi(e as i32),
                    _ => base.powf(b.eval(vals)),
                }
            }
            Call(f, a) => f.apply(a.eval(vals)),
        }
    }

    pub fn depends_on(&self, var: usize) -> bool {
        match self {
            Num(_) => false,
            Var(i) => *i == var,
            Neg(a) | Call(_, a) => a.depends_on(var),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) => a.depends_on(var) || b.depends_on(var),
        }
    }

    /// Symbolic partial derivative with respect to variable `var`.
    pub fn diff(&self, var: usize) -> Expr {
        if !self.depends_on(var) {
            return num(0.0);
        }
        match self {
            Num(_) => num(0.0),
            Var(i) => num(if *i == var { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.diff(var)),
            Add(a, b) => add(a.diff(var), b.diff(var)),
            Sub(a, b) => sub(a.diff(var), b.diff(var)),
            Mul(a, b) => add(mul(a.diff(var), (**b).clone()), mul((**a).clone(), b.diff(var))),
            Div(a, b) => div(
                sub(mul(a.diff(var), (**b).clone()), mul((**a).clone(), b.diff(var))),
                pow((**b).clone(), num(2.0)),
            ),
            Pow(a, b) => {
                let (f, g) = ((**a).clone(), (**b).clone());
                if !g.depends_on(var) {
                    mul(mul(g.clone(), pow(f, sub(g, num(1.0)))), a.diff(var))
                } else {
                    // d(f^g) = f^g (g' ln f + g f' / f)
                    let inner = add(
                        mul(b.diff(var), call(Func::Ln, f.clone())),
                        div(mul(g.clone(), a.diff(var)), f.clone()),
                    );
                    mul(pow(f, g), inner)
                }
            }
            Call(func, a) => {
                let u = (**a).clone();
                let outer = match func {
                    Func::Sin => call(Func::Cos, u),
                    Func::Cos => neg(call(Func::Sin, u)),
                    Func::Tan => div(num(1.0), pow(call(Func::Cos, u), num(2.0))),
                    Func::Exp => call(Func::Exp, u),
                    Func::Ln => div(num(1.0), u),
                    Func::Sqrt => div(num(0.5), call(Func::Sqrt, u)),
                    Func::Abs => call(Func::Sign, u),
                    Func::Sign => num(0.0),
                    Func::Sinh => call(Func::Cosh, u),
                    Func::Cosh => call(Func::Sinh, u),
                    Func::Tanh => sub(num(1.0), pow(call(Func::Tanh, u), num(2.0))),
                    Func::Atan => div(num(1.0), add(num(1.0), pow(u, num(2.0)))),
                };
                mul(outer, a.diff(var))
            }
        }
    }

    /// Fully parenthesized rendering against a variable list.
    pub fn render(&self, vars: &[&str]) -> String {
        struct R<'a>(&'a Expr, &'a [&'a str]);
        impl fmt::Display for R<'_> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let v = self.1;
                match self.0 {
                    Num(x) if *x < 0.0 => write!(f, "({x:?})"),
                    Num(x) => write!(f, "{x:?}"),
                    Var(i) => write!(f, "{}", v[*i]),
                    Neg(a) => write!(f, "(-{})", R(a, v)),
                    Add(a, b) => write!(f, "({} + {})", R(a, v), R(b, v)),
                    Sub(a, b) => write!(f, "({} - {})", R(a, v), R(b, v)),
                    Mul(a, b) => write!(f, "({} * {})", R(a, v), R(b, v)),
                    Div(a, b) => write!(f, "({} / {})", R(a, v), R(b, v)),
                    Pow(a, b) => write!(f, "({} ^ {})", R(a, v), R(b, v)),
                    Call(g, a) => write!(f, "{}({})", g.name(), R(a, v)),
                }
            }
        }
        R(self, vars).to_string()
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    vars: &'a [&'a str],
}

impl Parser<'_> {
    fn error(&self, message: &str) -> ParseError {
        ParseError {
            message: message.to_string(),
            offset: self.pos,
            source_text: self.src.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat(b'-') {
            return Ok(Neg(Box::new(self.unary()?)));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exp = self.unary()?;
            return Ok(Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.name(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.bytes.len() && (self.bytes[self.pos].is_ascii_digit() || self.bytes[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < self.bytes.len() && matches!(self.bytes[self.pos], b'e' | b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.bytes.len() && matches!(self.bytes[self.pos], b'+' | b'-') {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = mark;
            }
        }
        self.src[start..self.pos]
            .parse::<f64>()
            .map(Num)
            .map_err(|_| ParseError {
                message: "malformed number".into(),
                offset: start,
                source_text: self.src.to_string(),
            })
    }

    fn name(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.bytes.len() && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_') {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        if self.peek() == Some(b'(') {
            self.pos += 1;
            let arg = self.expr()?;
            let out = if name == "pow" {
                if !self.eat(b',') {
                    return Err(self.error("pow takes two arguments"));
                }
                let e = self.expr()?;
                Pow(Box::new(arg), Box::new(e))
            } else {
                let f = Func::from_name(name).ok_or_else(|| ParseError {
                    message: format!("unknown function `{name}`"),
                    offset: start,
                    source_text: self.src.to_string(),
                })?;
                Call(f, Box::new(arg))
            };
            if !self.eat(b')') {
                return Err(self.error("expected `)`"));
            }
            return Ok(out);
        }
        if let Some(i) = self.vars.iter().position(|v| *v == name) {
            return Ok(Var(i));
        }
        match name {
            "pi" => Ok(Num(std::f64::consts::PI)),
            "e" => Ok(Num(std::f64::consts::E)),
            _ => Err(ParseError {
                message: format!("unknown variable `{name}`"),
                offset: start,
                source_text: self.src.to_string(),
            }),
        }
    }
}
