//! Coefficient expressions: AST, parser, printer, evaluation and exact
//! symbolic differentiation.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' factor | base ('^' ['-'] int)?
//! base   := number | ident | func '(' expr ')' | '(' expr ')'
//! func   := sin | cos | exp | tanh | arctan
//! ```
//!
//! `pi` is a reserved constant. Numbers are exact decimals.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

pub type Rational = BigRational;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
    Arctan,
}

impl Func {
    pub const ALL: [Func; 5] = [Func::Sin, Func::Cos, Func::Exp, Func::Tanh, Func::Arctan];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
            Func::Arctan => "arctan",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.iter().copied().find(|f| f.name() == name)
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
            Func::Tanh => v.tanh(),
            Func::Arctan => v.atan(),
        }
    }
}

/// Expression tree. `Num` never holds a negative value when produced by the
/// parser or the smart constructors; negation is explicit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Num(Rational),
    Pi,
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at byte {pos}")]
    UnknownIdentifier { pos: usize, name: String },
    #[error("non-integer exponent at byte {pos}")]
    NonIntegerExponent { pos: usize },
}

impl ParseError {
    pub fn position(&self) -> usize {
        match self {
            ParseError::Syntax { pos, .. }
            | ParseError::UnknownIdentifier { pos, .. }
            | ParseError::NonIntegerExponent { pos } => *pos,
        }
    }
}

pub fn rat(n: i64) -> Rational {
    Rational::from_integer(BigInt::from(n))
}

pub fn rat_frac(n: i64, d: i64) -> Rational {
    Rational::new(BigInt::from(n), BigInt::from(d))
}

pub fn rat_to_f64(r: &Rational) -> f64 {
    match (r.numer().to_f64(), r.denom().to_f64()) {
        (Some(n), Some(d)) if n.is_finite() && d.is_finite() => n / d,
        _ => {
            // huge numerators: scale down via string length
            let n = r.numer().to_string();
            let d = r.denom().to_string();
            let shift = n.len().max(d.len()).saturating_sub(300) as i32;
            let nf: f64 = n[..n.len() - shift as usize].parse().unwrap_or(f64::NAN);
            let df: f64 = d[..d.len() - shift as usize].parse().unwrap_or(f64::NAN);
            nf / df
        }
    }
}

/// An expression lowered to `f64` arithmetic over positional variables.
#[derive(Debug, Clone)]
pub enum Compiled {
    Const(f64),
    Var(usize),
    Neg(Box<Compiled>),
    Add(Box<Compiled>, Box<Compiled>),
    Sub(Box<Compiled>, Box<Compiled>),
    Mul(Box<Compiled>, Box<Compiled>),
    Div(Box<Compiled>, Box<Compiled>),
    Pow(Box<Compiled>, i32),
    Call(Func, Box<Compiled>),
}

impl Compiled {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Compiled::Const(c) => *c,
            Compiled::Var(i) => x[*i],
            Compiled::Neg(a) => -a.eval(x),
            Compiled::Add(a, b) => a.eval(x) + b.eval(x),
            Compiled::Sub(a, b) => a.eval(x) - b.eval(x),
            Compiled::Mul(a, b) => a.eval(x) * b.eval(x),
            Compiled::Div(a, b) => a.eval(x) / b.eval(x),
            Compiled::Pow(a, n) => a.eval(x).powi(*n),
            Compiled::Call(f, a) => f.apply(a.eval(x)),
        }
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Compiled::Const(c) => Some(*c),
            _ => None,
        }
    }
}

impl Expr {
    pub fn int(n: i64) -> Expr {
        Expr::rational(rat(n))
    }

    /// Builds a constant; negatives become `Neg`, non-decimal fractions `Div`.
    pub fn rational(r: Rational) -> Expr {
        if r.is_negative() {
            return Expr::Neg(Box::new(Expr::rational(-r)));
        }
        if is_terminating(&r) {
            Expr::Num(r)
        } else {
            Expr::Div(
                Box::new(Expr::Num(Rational::from_integer(r.numer().clone()))),
                Box::new(Expr::Num(Rational::from_integer(r.denom().clone()))),
            )
        }
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn call(f: Func, arg: Expr) -> Expr {
        Expr::Call(f, Box::new(arg))
    }

    pub fn pow(self, n: i32) -> Expr {
        Expr::Pow(Box::new(self), n)
    }

    pub fn is_zero_literal(&self) -> bool {
        matches!(self, Expr::Num(r) if r.is_zero())
    }

    pub fn is_one_literal(&self) -> bool {
        matches!(self, Expr::Num(r) if r.is_one())
    }

    pub fn eval(&self, env: &dyn Fn(&str) -> Option<f64>) -> Result<f64, String> {
        Ok(match self {
            Expr::Num(r) => rat_to_f64(r),
            Expr::Pi => std::f64::consts::PI,
            Expr::Var(v) => env(v).ok_or_else(|| format!("unbound variable `{v}`"))?,
            Expr::Neg(a) => -a.eval(env)?,
            Expr::Add(a, b) => a.eval(env)? + b.eval(env)?,
            Expr::Sub(a, b) => a.eval(env)? - b.eval(env)?,
            Expr::Mul(a, b) => a.eval(env)? * b.eval(env)?,
            Expr::Div(a, b) => a.eval(env)? / b.eval(env)?,
            Expr::Pow(a, n) => a.eval(env)?.powi(*n),
            Expr::Call(f, a) => f.apply(a.eval(env)?),
        })
    }

    /// Lowers to [`Compiled`] with variables resolved against `vars`.
    pub fn compile(&self, vars: &[&str]) -> Result<Compiled, String> {
        let b = |e: &Expr| e.compile(vars).map(Box::new);
        Ok(match self {
            Expr::Num(r) => Compiled::Const(rat_to_f64(r)),
            Expr::Pi => Compiled::Const(std::f64::consts::PI),
            Expr::Var(v) => {
                Compiled::Var(vars.iter().position(|n| n == v).ok_or_else(|| format!("unbound variable `{v}`"))?)
            }
            Expr::Neg(a) => match a.compile(vars)? {
                Compiled::Const(c) => Compiled::Const(-c),
                c => Compiled::Neg(Box::new(c)),
            },
            Expr::Add(x, y) => Compiled::Add(b(x)?, b(y)?),
            Expr::Sub(x, y) => Compiled::Sub(b(x)?, b(y)?),
            Expr::Mul(x, y) => Compiled::Mul(b(x)?, b(y)?),
            Expr::Div(x, y) => match (x.compile(vars)?, y.compile(vars)?) {
                (Compiled::Const(p), Compiled::Const(q)) => Compiled::Const(p / q),
                (p, q) => Compiled::Div(Box::new(p), Box::new(q)),
            },
            Expr::Pow(a, n) => Compiled::Pow(b(a)?, *n),
            Expr::Call(f, a) => Compiled::Call(*f, b(a)?),
        })
    }

    /// Evaluates with a slice of `(name, value)` bindings.
    pub fn eval_at(&self, bindings: &[(&str, f64)]) -> Result<f64, String> {
        self.eval(&|name| bindings.iter().find(|(n, _)| *n == name).map(|(_, v)| *v))
    }

    pub fn variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_vars(&self, out: &mut Vec<String>) {
        match self {
            Expr::Num(_) | Expr::Pi => {}
            Expr::Var(v) => out.push(v.clone()),
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.collect_vars(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn depends_on(&self, var: &str) -> bool {
        match self {
            Expr::Num(_) | Expr::Pi => false,
            Expr::Var(v) => v == var,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.depends_on(var),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.depends_on(var) || b.depends_on(var)
            }
        }
    }

    pub fn substitute(&self, var: &str, value: &Expr) -> Expr {
        let s = |e: &Expr| Box::new(e.substitute(var, value));
        match self {
            Expr::Var(v) if v == var => value.clone(),
            Expr::Num(_) | Expr::Pi | Expr::Var(_) => self.clone(),
            Expr::Neg(a) => Expr::Neg(s(a)),
            Expr::Add(a, b) => Expr::Add(s(a), s(b)),
            Expr::Sub(a, b) => Expr::Sub(s(a), s(b)),
            Expr::Mul(a, b) => Expr::Mul(s(a), s(b)),
            Expr::Div(a, b) => Expr::Div(s(a), s(b)),
            Expr::Pow(a, n) => Expr::Pow(s(a), *n),
            Expr::Call(f, a) => Expr::Call(*f, s(a)),
        }
    }

    /// Exact derivative with light constant folding; the result stays in
    /// the grammar.
    pub fn differentiate(&self, var: &str) -> Expr {
        use Expr::*;
        match self {
            Num(_) | Pi => Expr::int(0),
            Var(v) => Expr::int(if v == var { 1 } else { 0 }),
            Neg(a) => neg(a.differentiate(var)),
            Add(a, b) => add(a.differentiate(var), b.differentiate(var)),
            Sub(a, b) => sub(a.differentiate(var), b.differentiate(var)),
            Mul(a, b) => add(mul(a.differentiate(var), (**b).clone()), mul((**a).clone(), b.differentiate(var))),
            Div(a, b) => {
                // (a' b - a b') / b^2
                let num = sub(mul(a.differentiate(var), (**b).clone()), mul((**a).clone(), b.differentiate(var)));
                div(num, pow((**b).clone(), 2))
            }
            Pow(a, n) => {
                if *n == 0 {
                    return Expr::int(0);
                }
                mul(mul(Expr::int(*n as i64), pow((**a).clone(), n - 1)), a.differentiate(var))
            }
            Call(f, a) => {
                let inner = a.differentiate(var);
                if inner.is_zero_literal() {
                    return Expr::int(0);
                }
                let a = (**a).clone();
                let outer = match f {
                    Func::Sin => Expr::call(Func::Cos, a),
                    Func::Cos => neg(Expr::call(Func::Sin, a)),
                    Func::Exp => Expr::call(Func::Exp, a),
                    Func::Tanh => sub(Expr::int(1), pow(Expr::call(Func::Tanh, a), 2)),
                    Func::Arctan => div(Expr::int(1), add(Expr::int(1), pow(a, 2))),
                };
                mul(outer, inner)
            }
        }
    }
}

fn is_terminating(r: &Rational) -> bool {
    let mut d = r.denom().clone();
    let two = BigInt::from(2);
    let five = BigInt::from(5);
    while (&d % &two).is_zero() {
        d /= &two;
    }
    while (&d % &five).is_zero() {
        d /= &five;
    }
    d.is_one()
}

// folding constructors used by the differentiator

fn neg(a: Expr) -> Expr {
    match a {
        e if e.is_zero_literal() => e,
        Expr::Neg(inner) => *inner,
        e => Expr::Neg(Box::new(e)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    if a.is_zero_literal() {
        b
    } else if b.is_zero_literal() {
        a
    } else if let Expr::Neg(bb) = b {
        Expr::Sub(Box::new(a), bb)
    } else {
        Expr::Add(Box::new(a), Box::new(b))
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    if b.is_zero_literal() {
        a
    } else if a.is_zero_literal() {
        neg(b)
    } else {
        Expr::Sub(Box::new(a), Box::new(b))
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    if a.is_zero_literal() || b.is_zero_literal() {
        Expr::int(0)
    } else if a.is_one_literal() {
        b
    } else if b.is_one_literal() {
        a
    } else if let Expr::Neg(aa) = a {
        neg(mul(*aa, b))
    } else if let Expr::Neg(bb) = b {
        neg(mul(a, *bb))
    } else {
        Expr::Mul(Box::new(a), Box::new(b))
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    if a.is_zero_literal() {
        a
    } else if b.is_one_literal() {
        a
    } else {
        Expr::Div(Box::new(a), Box::new(b))
    }
}

fn pow(a: Expr, n: i32) -> Expr {
    match n {
        0 => Expr::int(1),
        1 => a,
        _ => Expr::Pow(Box::new(a), n),
    }
}

// ---------------------------------------------------------------- printer

const PREC_SUM: u8 = 1;
const PREC_PRODUCT: u8 = 2;
const PREC_UNARY: u8 = 3;
const PREC_ATOM: u8 = 4;

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => PREC_SUM,
        Expr::Mul(..) | Expr::Div(..) => PREC_PRODUCT,
        Expr::Neg(..) | Expr::Pow(..) => PREC_UNARY,
        _ => PREC_ATOM,
    }
}

fn write_operand(f: &mut fmt::Formatter<'_>, e: &Expr, paren: bool) -> fmt::Result {
    if paren {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(r) => write_rational(f, r),
            Expr::Pi => write!(f, "pi"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => {
                write!(f, "-")?;
                // '-' factor: a factor is Neg, Pow or atom
                write_operand(f, a, precedence(a) < PREC_UNARY)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                let op = if matches!(self, Expr::Add(..)) { "+" } else { "-" };
                write_operand(f, a, precedence(a) < PREC_SUM)?;
                write!(f, " {op} ")?;
                write_operand(f, b, precedence(b) <= PREC_SUM)
            }
            Expr::Mul(a, b) | Expr::Div(a, b) => {
                let op = if matches!(self, Expr::Mul(..)) { "*" } else { "/" };
                write_operand(f, a, precedence(a) < PREC_PRODUCT)?;
                write!(f, "{op}")?;
                write_operand(f, b, precedence(b) <= PREC_PRODUCT)
            }
            Expr::Pow(a, n) => {
                write_operand(f, a, precedence(a) < PREC_ATOM)?;
                write!(f, "^{n}")
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

fn write_rational(f: &mut fmt::Formatter<'_>, r: &Rational) -> fmt::Result {
    if r.is_integer() {
        return write!(f, "{}", r.numer());
    }
    if !is_terminating(r) {
        return write!(f, "{}/{}", r.numer(), r.denom());
    }
    // exact decimal expansion
    let mut digits = 0u32;
    let ten = BigInt::from(10);
    let mut scaled = r.clone();
    while !scaled.is_integer() {
        scaled *= Rational::from_integer(ten.clone());
        digits += 1;
    }
    let n = scaled.to_integer();
    let neg = n.is_negative();
    let s = n.abs().to_string();
    let s = format!("{:0>width$}", s, width = digits as usize + 1);
    let (int_part, frac_part) = s.split_at(s.len() - digits as usize);
    write!(f, "{}{}.{}", if neg { "-" } else { "" }, int_part, frac_part)
}

// ----------------------------------------------------------------- parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(Rational),
    Ident(String),
    Sym(char),
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit()) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            let lit = &text[start..i];
            let value = parse_decimal(lit)
                .ok_or(ParseError::Syntax { pos: start, msg: format!("malformed number `{lit}`") })?;
            out.push((start, Tok::Num(value)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(text[start..i].to_string())));
        } else if "+-*/^()".contains(c) {
            out.push((i, Tok::Sym(c)));
            i += 1;
        } else {
            let ch = text[i..].chars().next().unwrap_or('?');
            return Err(ParseError::Syntax { pos: i, msg: format!("unexpected character `{ch}`") });
        }
    }
    Ok(out)
}

fn parse_decimal(lit: &str) -> Option<Rational> {
    let mut parts = lit.split('.');
    let int_part = parts.next()?;
    let frac_part = parts.next();
    if parts.next().is_some() {
        return None;
    }
    let int_val = if int_part.is_empty() { BigInt::zero() } else { BigInt::from_str(int_part).ok()? };
    match frac_part {
        None => Some(Rational::from_integer(int_val)),
        Some("") => None,
        Some(frac) => {
            let frac_val = BigInt::from_str(frac).ok()?;
            let scale = num_traits::pow(BigInt::from(10), frac.len());
            Some(Rational::new(int_val * &scale + frac_val, scale))
        }
    }
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
    known_vars: Option<&'a [&'a str]>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(ParseError::Syntax { pos: self.offset(), msg: format!("expected `{c}`") })
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        let base = self.base()?;
        if self.eat('^') {
            let pos = self.offset();
            let negative = self.eat('-');
            match self.peek().cloned() {
                Some(Tok::Num(r)) if r.is_integer() => {
                    self.pos += 1;
                    let n = r
                        .to_integer()
                        .to_i32()
                        .ok_or(ParseError::Syntax { pos, msg: "exponent out of range".into() })?;
                    return Ok(Expr::Pow(Box::new(base), if negative { -n } else { n }));
                }
                _ => return Err(ParseError::NonIntegerExponent { pos }),
            }
        }
        Ok(base)
    }

    fn base(&mut self) -> Result<Expr, ParseError> {
        let pos = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(r)) => {
                self.pos += 1;
                Ok(Expr::Num(r))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.eat('(') {
                    let f = Func::from_name(&name).ok_or(ParseError::UnknownIdentifier { pos, name: name.clone() })?;
                    let arg = self.expr()?;
                    self.expect(')')?;
                    return Ok(Expr::Call(f, Box::new(arg)));
                }
                if name == "pi" {
                    return Ok(Expr::Pi);
                }
                if Func::from_name(&name).is_some() {
                    return Err(ParseError::Syntax { pos, msg: format!("`{name}` needs an argument") });
                }
                if let Some(known) = self.known_vars {
                    if !known.contains(&name.as_str()) {
                        return Err(ParseError::UnknownIdentifier { pos, name });
                    }
                }
                Ok(Expr::Var(name))
            }
            Some(Tok::Sym('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Tok::Sym(c)) => Err(ParseError::Syntax { pos, msg: format!("unexpected `{c}`") }),
            None => Err(ParseError::Syntax { pos, msg: "unexpected end of input".into() }),
        }
    }
}

fn parse_with(text: &str, known_vars: Option<&[&str]>) -> Result<Expr, ParseError> {
    let toks = tokenize(text)?;
    let mut p = Parser { toks, pos: 0, end: text.len(), known_vars };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(ParseError::Syntax { pos: p.offset(), msg: "trailing input".into() });
    }
    Ok(e)
}

/// Parses an expression; any identifier that is not a function is a variable.
pub fn parse_expr(text: &str) -> Result<Expr, ParseError> {
    parse_with(text, None)
}

/// Parses an expression, rejecting variables outside `vars`.
pub fn parse_expr_in(text: &str, vars: &[&str]) -> Result<Expr, ParseError> {
    parse_with(text, Some(vars))
}

impl FromStr for Expr {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_expr(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(s: &str) -> Expr {
        parse_expr(s).unwrap()
    }

    #[test]
    fn parses_sum_with_call() {
        let e = p("2 + tanh(t)");
        assert_eq!(e, Expr::Add(Box::new(Expr::int(2)), Box::new(Expr::call(Func::Tanh, Expr::var("t")))));
    }

    #[test]
    fn parses_product_with_power() {
        let e = p("x^2*sin(y) + 1");
        let expected = Expr::Add(
            Box::new(Expr::Mul(Box::new(Expr::var("x").pow(2)), Box::new(Expr::call(Func::Sin, Expr::var("y"))))),
            Box::new(Expr::int(1)),
        );
        assert_eq!(e, expected);
    }

    #[test]
    fn rejects_symbolic_exponent() {
        assert!(matches!(parse_expr("t^t"), Err(ParseError::NonIntegerExponent { pos: 2 })));
        assert!(matches!(parse_expr("x^0.5"), Err(ParseError::NonIntegerExponent { .. })));
    }

    #[test]
    fn reports_unknown_identifiers() {
        assert!(matches!(parse_expr("foo(t)"), Err(ParseError::UnknownIdentifier { pos: 0, .. })));
        assert!(matches!(parse_expr_in("x + q", &["x"]), Err(ParseError::UnknownIdentifier { pos: 4, .. })));
        assert!(parse_expr_in("x + pi", &["x"]).is_ok());
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_expr("1 + (2").unwrap_err();
        assert_eq!(err.position(), 6);
        assert!(parse_expr("1 +").is_err());
        assert!(parse_expr("1 $ 2").is_err());
    }

    #[test]
    fn decimals_are_exact() {
        assert_eq!(p("0.25"), Expr::Num(rat_frac(1, 4)));
        assert_eq!(p("0.25").to_string(), "0.25");
        assert_eq!(Expr::rational(rat_frac(1, 3)).to_string(), "1/3");
    }

    #[test]
    fn derivative_of_tanh() {
        let d = p("tanh(t)").differentiate("t");
        assert_eq!(d, p("1 - tanh(t)^2"));
    }

    #[test]
    fn derivative_of_monomial_times_sine() {
        let d = p("x^2*sin(y)").differentiate("x");
        assert_eq!(d, p("2*x*sin(y)"));
        assert_eq!(p("c").differentiate("y"), Expr::int(0));
        assert_eq!(p("3/4 + pi").differentiate("y"), Expr::int(0));
    }

    #[test]
    fn evaluation() {
        let e = p("x^2*sin(y) + 1");
        let v = e.eval_at(&[("x", 2.0), ("y", 0.5)]).unwrap();
        assert!((v - (4.0 * 0.5f64.sin() + 1.0)).abs() < 1e-15);
        assert!(e.eval_at(&[("x", 1.0)]).is_err());
    }

    pub(crate) fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0i64..20).prop_map(Expr::int),
            (1i64..400).prop_map(|n| Expr::Num(rat_frac(n, 100))),
            Just(Expr::Pi),
            prop::sample::select(vec!["x", "y", "t"]).prop_map(Expr::var),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Div(Box::new(a), Box::new(b))),
                (inner.clone(), -3i32..4).prop_map(|(a, n)| Expr::Pow(Box::new(a), n)),
                (prop::sample::select(Func::ALL.to_vec()), inner).prop_map(|(f, a)| Expr::call(f, a)),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let printed = e.to_string();
            let back = parse_expr(&printed).unwrap();
            prop_assert_eq!(back, e, "printed: {}", printed);
        }
    }

    #[test]
    fn derivative_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let exprs = [
            "tanh(t)*x^2 + arctan(x*y)",
            "exp(-(x^2))*cos(y) + 1/(2 + sin(x))",
            "(x^3 - y)/(1 + x^2 + y^2)",
            "sin(x)^3*tanh(y - x)",
        ];
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for text in exprs {
            let e = p(text);
            for var in ["x", "y"] {
                let d = e.differentiate(var);
                for _ in 0..100 {
                    let (x, y, t) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
                    let h = 1e-5;
                    let at = |dx: f64, dy: f64| e.eval_at(&[("x", x + dx), ("y", y + dy), ("t", t)]).unwrap();
                    let fd = if var == "x" {
                        (at(h, 0.0) - at(-h, 0.0)) / (2.0 * h)
                    } else {
                        (at(0.0, h) - at(0.0, -h)) / (2.0 * h)
                    };
                    let exact = d.eval_at(&[("x", x), ("y", y), ("t", t)]).unwrap();
                    let rel = (fd - exact).abs() / exact.abs().max(1.0);
                    assert!(rel < 1e-7, "{text} d/d{var} at ({x},{y}): fd {fd} vs {exact}");
                }
            }
        }
    }
}
