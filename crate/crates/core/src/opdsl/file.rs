//! Operator specification files.
//!
//! ```text
//! # comment
//! geometry { class = "sc" dim = 1 }
//! operator {
//!   order = 2
//!   coeff "-1" gens [dt, dt]
//!   coeff "2 + tanh(t)" gens []
//! }
//! query { lambda = "0" window = "-5:10" }
//! retag "t=+inf" { group = "F2" amenable = false dim = 1 }
//! ```
//!
//! Commas between entries are optional. Matrix operators address entries
//! with `coeff "..." gens [...] at 0 1`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::canon::Canon;
use super::expr::{parse_expr_in, Expr};
use crate::calculus::{freeze, DiffOp, Frame, Term};
use crate::geometry::{
    build_ah_space, build_b_space, build_edge_space, build_scattering_space, build_smooth_space,
    build_transformation_space, desingularize, CurveCenter, CurveEnd, IsotropyGroup, Shape, StratifiedSpace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Loc {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{loc}: {msg}")]
pub struct FileError {
    pub loc: Loc,
    pub msg: String,
}

fn err<T>(loc: Loc, msg: impl Into<String>) -> Result<T, FileError> {
    Err(FileError { loc, msg: msg.into() })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num(f64),
    Sym(char),
}

fn lex(text: &str) -> Result<Vec<(Tok, Loc)>, FileError> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let loc = Loc { line, col };
        let advance = |n: usize, i: &mut usize, col: &mut usize| {
            *i += n;
            *col += n;
        };
        match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => advance(1, &mut i, &mut col),
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '{' | '}' | '[' | ']' | '=' | ',' => {
                out.push((Tok::Sym(c), loc));
                advance(1, &mut i, &mut col);
            }
            '"' => {
                let mut s = String::new();
                let mut j = i + 1;
                loop {
                    match chars.get(j) {
                        None | Some('\n') => return err(loc, "unterminated string"),
                        Some('"') => break,
                        Some('\\') if chars.get(j + 1) == Some(&'"') => {
                            s.push('"');
                            j += 2;
                        }
                        Some(ch) => {
                            s.push(*ch);
                            j += 1;
                        }
                    }
                }
                out.push((Tok::Str(s), loc));
                let n = j + 1 - i;
                advance(n, &mut i, &mut col);
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let mut j = i + 1;
                while j < chars.len()
                    && (chars[j].is_ascii_digit()
                        || chars[j] == '.'
                        || chars[j] == 'e'
                        || chars[j] == 'E'
                        || ((chars[j] == '-' || chars[j] == '+') && matches!(chars[j - 1], 'e' | 'E')))
                {
                    j += 1;
                }
                let s: String = chars[i..j].iter().collect();
                let v: f64 = s.parse().map_err(|_| FileError { loc, msg: format!("bad number `{s}`") })?;
                out.push((Tok::Num(v), loc));
                advance(j - i, &mut i, &mut col);
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut j = i + 1;
                while j < chars.len() && (chars[j].is_alphanumeric() || chars[j] == '_') {
                    j += 1;
                }
                out.push((Tok::Ident(chars[i..j].iter().collect()), loc));
                advance(j - i, &mut i, &mut col);
            }
            other => return err(loc, format!("unexpected character `{other}`")),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Str(String),
    Num(f64),
    Ident(String),
    List(Vec<(Value, Loc)>),
}

impl Value {
    fn describe(&self) -> &'static str {
        match self {
            Value::Str(_) => "string",
            Value::Num(_) => "number",
            Value::Ident(_) => "identifier",
            Value::List(_) => "list",
        }
    }
}

#[derive(Debug, Clone)]
enum Entry {
    Key { key: String, value: Value, loc: Loc, vloc: Loc },
    Coeff { text: String, tloc: Loc, gens: Vec<(String, Loc)>, at: Option<(usize, usize)>, loc: Loc },
    Sub { kind: String, label: Option<String>, body: Vec<Entry>, loc: Loc },
}

struct Parser {
    toks: Vec<(Tok, Loc)>,
    pos: usize,
    end: Loc,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn loc(&self) -> Loc {
        self.toks.get(self.pos).map(|(_, l)| *l).unwrap_or(self.end)
    }

    fn next(&mut self) -> Option<(Tok, Loc)> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect_sym(&mut self, c: char) -> Result<Loc, FileError> {
        match self.next() {
            Some((Tok::Sym(d), l)) if d == c => Ok(l),
            Some((t, l)) => err(l, format!("expected `{c}`, found {t:?}")),
            None => err(self.end, format!("expected `{c}`, found end of file")),
        }
    }

    fn value(&mut self) -> Result<(Value, Loc), FileError> {
        match self.next() {
            Some((Tok::Str(s), l)) => Ok((Value::Str(s), l)),
            Some((Tok::Num(v), l)) => Ok((Value::Num(v), l)),
            Some((Tok::Ident(s), l)) => Ok((Value::Ident(s), l)),
            Some((Tok::Sym('['), l)) => {
                let mut items = Vec::new();
                loop {
                    if self.peek() == Some(&Tok::Sym(']')) {
                        self.pos += 1;
                        break;
                    }
                    items.push(self.value()?);
                    match self.peek() {
                        Some(Tok::Sym(',')) => self.pos += 1,
                        Some(Tok::Sym(']')) => {}
                        _ => return err(self.loc(), "expected `,` or `]` in list"),
                    }
                }
                Ok((Value::List(items), l))
            }
            Some((t, l)) => err(l, format!("expected a value, found {t:?}")),
            None => err(self.end, "expected a value, found end of file"),
        }
    }

    fn block(&mut self) -> Result<Vec<Entry>, FileError> {
        self.expect_sym('{')?;
        let mut out = Vec::new();
        loop {
            match self.next() {
                Some((Tok::Sym('}'), _)) => return Ok(out),
                Some((Tok::Sym(','), _)) => {}
                Some((Tok::Ident(k), loc)) if k == "coeff" => {
                    let (text, tloc) = match self.next() {
                        Some((Tok::Str(s), l)) => (s, l),
                        _ => return err(loc, "`coeff` expects a quoted expression"),
                    };
                    match self.next() {
                        Some((Tok::Ident(g), _)) if g == "gens" => {}
                        _ => return err(loc, "`coeff` expects `gens [...]` after the expression"),
                    }
                    let (list, lloc) = self.value()?;
                    let Value::List(items) = list else {
                        return err(lloc, "`gens` expects a list");
                    };
                    let mut gens = Vec::new();
                    for (v, l) in items {
                        match v {
                            Value::Ident(s) | Value::Str(s) => gens.push((s, l)),
                            other => {
                                return err(l, format!("generator names are identifiers, found {}", other.describe()))
                            }
                        }
                    }
                    let mut at = None;
                    if matches!(self.peek(), Some(Tok::Ident(a)) if a == "at") {
                        self.pos += 1;
                        let mut idx = [0usize; 2];
                        for slot in &mut idx {
                            match self.next() {
                                Some((Tok::Num(v), _)) if v >= 0.0 && v.fract() == 0.0 => *slot = v as usize,
                                Some((_, l)) => return err(l, "`at` expects two nonnegative integers"),
                                None => return err(self.end, "`at` expects two nonnegative integers"),
                            }
                        }
                        at = Some((idx[0], idx[1]));
                    }
                    out.push(Entry::Coeff { text, tloc, gens, at, loc });
                }
                Some((Tok::Ident(k), loc)) => match self.peek() {
                    Some(Tok::Sym('=')) => {
                        self.pos += 1;
                        let (value, vloc) = self.value()?;
                        out.push(Entry::Key { key: k, value, loc, vloc });
                    }
                    Some(Tok::Str(_)) | Some(Tok::Sym('{')) => {
                        let label = match self.peek() {
                            Some(Tok::Str(s)) => {
                                let s = s.clone();
                                self.pos += 1;
                                Some(s)
                            }
                            _ => None,
                        };
                        let body = self.block()?;
                        out.push(Entry::Sub { kind: k, label, body, loc });
                    }
                    _ => return err(self.loc(), format!("expected `=` after `{k}`")),
                },
                Some((t, l)) => return err(l, format!("unexpected {t:?}")),
                None => return err(self.end, "unterminated block"),
            }
        }
    }
}

/// Accessor over the key-value entries of one block.
struct Keys<'a> {
    entries: &'a [Entry],
    block: &'a str,
    loc: Loc,
}

impl<'a> Keys<'a> {
    fn check_known(&self, known: &[&str]) -> Result<(), FileError> {
        for e in self.entries {
            if let Entry::Key { key, loc, .. } = e {
                if !known.contains(&key.as_str()) {
                    return err(*loc, format!("unknown key `{key}` in {} block", self.block));
                }
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<(&'a Value, Loc)> {
        self.entries.iter().rev().find_map(|e| match e {
            Entry::Key { key: k, value, vloc, .. } if k == key => Some((value, *vloc)),
            _ => None,
        })
    }

    fn string(&self, key: &str) -> Result<Option<(String, Loc)>, FileError> {
        match self.get(key) {
            None => Ok(None),
            Some((Value::Str(s), l)) | Some((Value::Ident(s), l)) => Ok(Some((s.clone(), l))),
            Some((Value::Num(v), l)) => Ok(Some((format!("{v}"), l))),
            Some((v, l)) => err(l, format!("`{key}` expects a string, found {}", v.describe())),
        }
    }

    fn number(&self, key: &str) -> Result<Option<(f64, Loc)>, FileError> {
        match self.get(key) {
            None => Ok(None),
            Some((Value::Num(v), l)) => Ok(Some((*v, l))),
            Some((Value::Str(s), l)) => s
                .trim()
                .parse()
                .map(|v| Some((v, l)))
                .map_err(|_| FileError { loc: l, msg: format!("`{key}` expects a number") }),
            Some((v, l)) => err(l, format!("`{key}` expects a number, found {}", v.describe())),
        }
    }

    fn uint(&self, key: &str) -> Result<Option<(u32, Loc)>, FileError> {
        match self.number(key)? {
            None => Ok(None),
            Some((v, l)) if v >= 0.0 && v.fract() == 0.0 && v < 1e6 => Ok(Some((v as u32, l))),
            Some((_, l)) => err(l, format!("`{key}` expects a nonnegative integer")),
        }
    }

    fn boolean(&self, key: &str) -> Result<Option<bool>, FileError> {
        match self.get(key) {
            None => Ok(None),
            Some((Value::Ident(s), l)) | Some((Value::Str(s), l)) => match s.as_str() {
                "true" => Ok(Some(true)),
                "false" => Ok(Some(false)),
                _ => err(l, format!("`{key}` expects true or false")),
            },
            Some((v, l)) => err(l, format!("`{key}` expects true or false, found {}", v.describe())),
        }
    }

    fn strings(&self, key: &str) -> Result<Vec<(String, Loc)>, FileError> {
        match self.get(key) {
            None => Ok(vec![]),
            Some((Value::List(items), _)) => items
                .iter()
                .map(|(v, l)| match v {
                    Value::Str(s) | Value::Ident(s) => Ok((s.clone(), *l)),
                    other => err(*l, format!("`{key}` expects strings, found {}", other.describe())),
                })
                .collect(),
            Some((Value::Str(s), l)) => Ok(vec![(s.clone(), l)]),
            Some((v, l)) => err(l, format!("`{key}` expects a list, found {}", v.describe())),
        }
    }

    fn numbers(&self, key: &str) -> Result<Option<Vec<f64>>, FileError> {
        match self.get(key) {
            None => Ok(None),
            Some((Value::List(items), _)) => items
                .iter()
                .map(|(v, l)| match v {
                    Value::Num(x) => Ok(*x),
                    other => err(*l, format!("`{key}` expects numbers, found {}", other.describe())),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some((v, l)) => err(l, format!("`{key}` expects a list, found {}", v.describe())),
        }
    }
}

/// The geometry block as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub class: String,
    pub dim: Option<u32>,
    pub shape: Option<String>,
    pub boundary: Option<String>,
    pub base: Option<String>,
    pub points: Vec<String>,
    pub curves: Vec<CurveCenter>,
    pub retags: Vec<(String, IsotropyGroup)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub coeff: String,
    pub gens: Vec<String>,
    pub row: usize,
    pub col: usize,
    pub loc: Loc,
}

/// The operator block as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub order: u32,
    pub size: usize,
    pub sobolev: f64,
    pub lower_order: bool,
    pub terms: Vec<TermSpec>,
}

/// `start:stop:step`, inclusive of `stop` up to rounding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl LambdaGrid {
    pub fn parse(text: &str) -> Result<LambdaGrid, String> {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected start:stop:step, got `{text}`"));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("bad number `{s}` in `{text}`"));
        let g = LambdaGrid { start: num(parts[0])?, stop: num(parts[1])?, step: num(parts[2])? };
        if !(g.step > 0.0) || g.stop < g.start || !g.start.is_finite() || !g.stop.is_finite() {
            return Err(format!("empty or invalid grid `{text}`"));
        }
        if (g.stop - g.start) / g.step > 1e6 {
            return Err(format!("grid `{text}` has too many points"));
        }
        Ok(g)
    }

    pub fn points(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|k| self.start + k as f64 * self.step).collect()
    }
}

/// Parses `a:b` with `a < b`.
pub fn parse_window(text: &str) -> Result<(f64, f64), String> {
    let (a, b) = text.split_once(':').ok_or_else(|| format!("expected a:b, got `{text}`"))?;
    let a: f64 = a.trim().parse().map_err(|_| format!("bad number `{a}`"))?;
    let b: f64 = b.trim().parse().map_err(|_| format!("bad number `{b}`"))?;
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(format!("window `{text}` must satisfy a < b"));
    }
    Ok((a, b))
}

/// Parses `a`, `bi`, `a+bi`, `a-bi`, `i`.
pub fn parse_complex(text: &str) -> Result<Complex64, String> {
    let s: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let bad = || format!("bad complex number `{text}`");
    if s.is_empty() {
        return Err(bad());
    }
    let Some(body) = s.strip_suffix('i') else {
        return s.parse::<f64>().map(|re| Complex64::new(re, 0.0)).map_err(|_| bad());
    };
    // split at the last sign that is not part of an exponent
    let bytes: Vec<char> = body.chars().collect();
    let mut split = None;
    for k in (1..bytes.len()).rev() {
        if (bytes[k] == '+' || bytes[k] == '-') && !matches!(bytes[k - 1], 'e' | 'E') {
            split = Some(k);
            break;
        }
    }
    let imag = |t: &str| -> Result<f64, String> {
        match t {
            "" | "+" => Ok(1.0),
            "-" => Ok(-1.0),
            t => t.parse().map_err(|_| bad()),
        }
    };
    match split {
        Some(k) => {
            let re: String = bytes[..k].iter().collect();
            let im: String = bytes[k..].iter().collect();
            Ok(Complex64::new(re.parse().map_err(|_| bad())?, imag(&im)?))
        }
        None => Ok(Complex64::new(0.0, imag(body)?)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct QuerySpec {
    pub lambda: Option<[f64; 2]>,
    pub lambda_grid: Option<LambdaGrid>,
    pub window: Option<(f64, f64)>,
    /// Compute verdicts even when the groupoid predicate fails.
    pub allow_unjustified: bool,
    pub resolution: Option<usize>,
}

/// A parsed and validated operator file.
#[derive(Debug, Clone)]
pub struct OperatorFile {
    pub geometry: GeometrySpec,
    pub space: StratifiedSpace,
    pub spec: Option<OperatorSpec>,
    pub op: Option<DiffOp>,
    pub queries: Vec<QuerySpec>,
}

impl OperatorFile {
    /// The operator, or an error naming the file position of the geometry.
    pub fn operator(&self) -> Result<&DiffOp, FileError> {
        self.op.as_ref().ok_or(FileError { loc: Loc { line: 1, col: 1 }, msg: "file has no operator block".into() })
    }
}

fn shape_of(text: &str, loc: Loc) -> Result<Shape, FileError> {
    Shape::parse(text).ok_or_else(|| FileError { loc, msg: format!("unknown shape `{text}`") })
}

fn group_of(k: &Keys<'_>) -> Result<IsotropyGroup, FileError> {
    k.check_known(&["group", "amenable", "dim"])?;
    let Some((name, loc)) = k.string("group")? else {
        return err(k.loc, "retag needs `group`");
    };
    let compact: String = name.chars().filter(|c| !c.is_whitespace()).collect();
    let builtin = match compact.as_str() {
        "trivial" | "1" => Some(IsotropyGroup::Trivial),
        "R" => Some(IsotropyGroup::RealVector(1)),
        "Rx|R+" | "RxR+" => Some(IsotropyGroup::SemidirectRnRplus(1)),
        s => {
            if let Some(n) = s.strip_prefix("R^").and_then(|r| r.parse().ok()) {
                Some(IsotropyGroup::RealVector(n))
            } else if let Some(n) =
                s.strip_prefix("R^").and_then(|r| r.strip_suffix("x|R+")).and_then(|r| r.parse().ok())
            {
                Some(IsotropyGroup::SemidirectRnRplus(n))
            } else {
                None
            }
        }
    };
    if let Some(g) = builtin {
        if k.get("amenable").is_some() {
            return err(loc, format!("`amenable` is fixed for the built-in group {g}"));
        }
        return Ok(g);
    }
    let Some(amenable) = k.boolean("amenable")? else {
        return err(loc, format!("tagged group `{name}` needs `amenable = true|false`"));
    };
    let dim = k.uint("dim")?.map(|(d, _)| d).unwrap_or(0);
    Ok(IsotropyGroup::Tagged { name, amenable, dim })
}

fn geometry_spec(body: &[Entry], loc: Loc) -> Result<GeometrySpec, FileError> {
    let k = Keys { entries: body, block: "geometry", loc };
    k.check_known(&["class", "dim", "shape", "boundary", "base", "points", "name"])?;
    let Some((class, _)) = k.string("class")? else {
        return err(loc, "geometry needs `class`");
    };
    let mut curves = Vec::new();
    let points: Vec<String> = k.strings("points")?.into_iter().map(|(s, _)| s).collect();
    for e in body {
        let Entry::Sub { kind, label, body, loc } = e else { continue };
        if kind != "curve" {
            return err(*loc, format!("unknown sub-block `{kind}` in geometry"));
        }
        let Some(label) = label else {
            return err(*loc, "curve needs a label: curve \"L\" { ... }");
        };
        let ck = Keys { entries: body, block: "curve", loc: *loc };
        ck.check_known(&["from", "to", "transverse", "angles"])?;
        let end = |key: &str| -> Result<CurveEnd, FileError> {
            let Some((s, _)) = ck.string(key)? else {
                return err(*loc, format!("curve needs `{key}`"));
            };
            Ok(if points.contains(&s) { CurveEnd::AtPoint(s) } else { CurveEnd::OnHyperface(s) })
        };
        let angles = match ck.numbers("angles")? {
            None => [0.0, std::f64::consts::PI],
            Some(v) if v.len() == 2 => [v[0], v[1]],
            Some(_) => return err(*loc, "`angles` expects two numbers"),
        };
        curves.push(CurveCenter {
            label: label.clone(),
            ends: [end("from")?, end("to")?],
            transverse: ck.boolean("transverse")?.unwrap_or(true),
            tangent_angles: angles,
        });
    }
    Ok(GeometrySpec {
        class,
        dim: k.uint("dim")?.map(|(d, _)| d),
        shape: k.string("shape")?.map(|(s, _)| s),
        boundary: k.string("boundary")?.map(|(s, _)| s),
        base: k.string("base")?.map(|(s, _)| s),
        points,
        curves,
        retags: vec![],
    })
}

fn build_space(g: &GeometrySpec, body: &[Entry], loc: Loc) -> Result<StratifiedSpace, FileError> {
    let k = Keys { entries: body, block: "geometry", loc };
    let geo = |e: crate::geometry::GeometryError| FileError { loc, msg: e.to_string() };
    let need = |key: &str| -> Result<(String, Loc), FileError> {
        k.string(key)?.ok_or(FileError { loc, msg: format!("class `{}` needs `{key}`", g.class) })
    };
    let space = match g.class.as_str() {
        "sc" | "scattering" => build_scattering_space(g.dim.unwrap_or(1)).map_err(geo)?,
        "transformation" => build_transformation_space(g.dim.unwrap_or(1)).map_err(geo)?,
        "b" => {
            let (s, l) = need("shape")?;
            build_b_space(&[shape_of(&s, l)?]).map_err(geo)?
        }
        "edge" => {
            let (b, lb) = need("boundary")?;
            let (z, lz) = need("base")?;
            build_edge_space(&shape_of(&b, lb)?, &shape_of(&z, lz)?).map_err(geo)?
        }
        "ah" => {
            let (b, lb) = need("boundary")?;
            build_ah_space(&shape_of(&b, lb)?).map_err(geo)?
        }
        "smooth" => {
            let name = k.string("name")?.map(|(s, _)| s).unwrap_or_else(|| "M".into());
            build_smooth_space(&name, g.dim.unwrap_or(2))
        }
        other => return err(loc, format!("unknown geometry class `{other}`")),
    };
    if g.points.is_empty() && g.curves.is_empty() {
        return Ok(space);
    }
    desingularize(&space, &g.points, &g.curves).map_err(geo)
}

fn operator_spec(body: &[Entry], loc: Loc) -> Result<OperatorSpec, FileError> {
    let k = Keys { entries: body, block: "operator", loc };
    k.check_known(&["order", "size", "sobolev", "lower_order"])?;
    let Some((order, _)) = k.uint("order")? else {
        return err(loc, "operator needs `order`");
    };
    let size = k.uint("size")?.map(|(n, _)| n as usize).unwrap_or(1);
    if size == 0 {
        return err(loc, "operator `size` must be at least 1");
    }
    let mut terms = Vec::new();
    for e in body {
        match e {
            Entry::Coeff { text, gens, at, loc, .. } => {
                let (row, col) = at.unwrap_or((0, 0));
                if row >= size || col >= size {
                    return err(*loc, format!("entry ({row}, {col}) outside a {size}x{size} operator"));
                }
                terms.push(TermSpec {
                    coeff: text.clone(),
                    gens: gens.iter().map(|(g, _)| g.clone()).collect(),
                    row,
                    col,
                    loc: *loc,
                });
            }
            Entry::Sub { kind, loc, .. } => return err(*loc, format!("unexpected sub-block `{kind}` in operator")),
            Entry::Key { .. } => {}
        }
    }
    if terms.is_empty() {
        return err(loc, "empty operator: no `coeff` terms");
    }
    Ok(OperatorSpec {
        order,
        size,
        sobolev: k.number("sobolev")?.map(|(v, _)| v).unwrap_or(0.0),
        lower_order: k.boolean("lower_order")?.unwrap_or(false),
        terms,
    })
}

fn build_operator(space: &StratifiedSpace, spec: &OperatorSpec, body: &[Entry], loc: Loc) -> Result<DiffOp, FileError> {
    let frame = Arc::new(Frame::from_space(space).map_err(|e| FileError { loc, msg: e.to_string() })?);
    let names: Vec<&str> = space.coords.iter().map(|c| c.name.as_str()).collect();
    let mut terms = Vec::new();
    let coeffs = body.iter().filter_map(|e| match e {
        Entry::Coeff { text, tloc, gens, .. } => Some((text, *tloc, gens)),
        _ => None,
    });
    for (t, (text, tloc, gens)) in spec.terms.iter().zip(coeffs) {
        let expr: Expr = parse_expr_in(text, &names).map_err(|e| FileError {
            loc: Loc { line: tloc.line, col: tloc.col + 1 + e.position() },
            msg: e.to_string(),
        })?;
        let canon = Canon::from_expr(&expr).map_err(|e| FileError { loc: tloc, msg: e.to_string() })?;
        for st in space.boundary_strata() {
            if st.approach.is_empty() {
                continue;
            }
            if let Err(e) = freeze(&canon, st) {
                return err(tloc, format!("coefficient not admissible at stratum {}: {e}", st.id));
            }
        }
        let mut word = Vec::new();
        for (g, gl) in gens {
            match frame.index(g) {
                Some(i) => word.push(i),
                None => {
                    let known: Vec<&str> = space.generators.iter().map(|g| g.name.as_str()).collect();
                    return err(
                        *gl,
                        format!(
                            "generator `{g}` not in frame of {} geometry (frame: {})",
                            space.class.short_name(),
                            known.join(", ")
                        ),
                    );
                }
            }
        }
        terms.push(Term { row: t.row, col: t.col, coeff: canon, word });
    }
    DiffOp::from_terms(frame, spec.order, spec.size, terms, spec.lower_order)
        .map_err(|e| FileError { loc, msg: e.to_string() })
}

fn query_spec(body: &[Entry], loc: Loc) -> Result<QuerySpec, FileError> {
    let k = Keys { entries: body, block: "query", loc };
    k.check_known(&["lambda", "lambda_grid", "window", "override", "resolution"])?;
    let lambda = match k.string("lambda")? {
        Some((s, l)) => {
            let z = parse_complex(&s).map_err(|m| FileError { loc: l, msg: m })?;
            Some([z.re, z.im])
        }
        None => None,
    };
    let lambda_grid = match k.string("lambda_grid")? {
        Some((s, l)) => Some(LambdaGrid::parse(&s).map_err(|m| FileError { loc: l, msg: m })?),
        None => None,
    };
    let window = match k.string("window")? {
        Some((s, l)) => Some(parse_window(&s).map_err(|m| FileError { loc: l, msg: m })?),
        None => None,
    };
    Ok(QuerySpec {
        lambda,
        lambda_grid,
        window,
        allow_unjustified: k.boolean("override")?.unwrap_or(false),
        resolution: k.uint("resolution")?.map(|(n, _)| n as usize),
    })
}

/// Parses and validates an operator file.
pub fn parse_operator_file(text: &str) -> Result<OperatorFile, FileError> {
    let toks = lex(text)?;
    let end = Loc { line: text.lines().count().max(1), col: text.lines().last().map_or(1, |l| l.len() + 1) };
    let mut p = Parser { toks, pos: 0, end };
    let mut geometry: Option<(Vec<Entry>, Loc)> = None;
    let mut operator: Option<(Vec<Entry>, Loc)> = None;
    let mut queries = Vec::new();
    let mut retags = Vec::new();
    while let Some((tok, loc)) = p.next() {
        let Tok::Ident(kw) = tok else {
            return err(loc, "expected `geometry`, `operator`, `query` or `retag`");
        };
        match kw.as_str() {
            "geometry" | "operator" => {
                let body = p.block()?;
                let slot = if kw == "geometry" { &mut geometry } else { &mut operator };
                if slot.is_some() {
                    return err(loc, format!("duplicate `{kw}` block"));
                }
                *slot = Some((body, loc));
            }
            "query" => {
                let body = p.block()?;
                queries.push(query_spec(&body, loc)?);
            }
            "retag" => {
                let label = match p.next() {
                    Some((Tok::Str(s), _)) => s,
                    _ => return err(loc, "retag expects a quoted stratum id"),
                };
                let body = p.block()?;
                let g = group_of(&Keys { entries: &body, block: "retag", loc })?;
                retags.push((label, g, loc));
            }
            other => return err(loc, format!("unknown section `{other}`")),
        }
    }
    let Some((gbody, gloc)) = geometry else {
        return err(Loc { line: 1, col: 1 }, "missing `geometry` block");
    };
    let mut gspec = geometry_spec(&gbody, gloc)?;
    let mut space = build_space(&gspec, &gbody, gloc)?;
    for (id, g, loc) in retags {
        space = space.retag(&id, g.clone()).map_err(|e| FileError { loc, msg: e.to_string() })?;
        gspec.retags.push((id, g));
    }
    let (spec, op) = match operator {
        Some((body, loc)) => {
            let spec = operator_spec(&body, loc)?;
            let op = build_operator(&space, &spec, &body, loc)?;
            (Some(spec), Some(op))
        }
        None => (None, None),
    };
    Ok(OperatorFile { geometry: gspec, space, spec, op, queries })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HVZ: &str = r#"
# step potential
geometry { class = "sc", dim = 1 }
operator {
  order = 2
  coeff "-1" gens [dt, dt]
  coeff "2 + tanh(t)" gens []
}
query { lambda = "0" }
"#;

    #[test]
    fn hvz_file() {
        let f = parse_operator_file(HVZ).unwrap();
        assert_eq!(f.space.id, "sc[1]");
        let op = f.operator().unwrap();
        assert_eq!(op.order, 2);
        assert_eq!(f.queries[0].lambda, Some([0.0, 0.0]));
    }

    #[test]
    fn generator_not_in_frame() {
        let text =
            "geometry { class = \"b\" shape = \"square\" }\noperator {\n  order = 1\n  coeff \"1\" gens [xdz]\n}\n";
        let e = parse_operator_file(text).unwrap_err();
        assert!(e.msg.contains("generator `xdz` not in frame"), "{e}");
        assert_eq!((e.loc.line, e.loc.col), (4, 19));
    }

    #[test]
    fn empty_operator() {
        let e = parse_operator_file("geometry { class = \"sc\" }\noperator { order = 2 }").unwrap_err();
        assert!(e.msg.starts_with("empty operator"), "{e}");
    }

    #[test]
    fn expression_errors_carry_position() {
        let text = "geometry { class = \"sc\" }\noperator {\n order = 0\n coeff \"t^t\" gens []\n}";
        let e = parse_operator_file(text).unwrap_err();
        assert_eq!(e.loc.line, 4);
        assert!(e.msg.contains("non-integer exponent"));
        let text = "geometry { class = \"sc\" }\noperator {\n order = 0\n coeff \"sin(t)\" gens []\n}";
        let e = parse_operator_file(text).unwrap_err();
        assert!(e.msg.contains("not admissible"), "{e}");
        let text = "geometry { class = \"sc\" }\noperator {\n order = 0\n coeff \"q\" gens []\n}";
        assert!(parse_operator_file(text).unwrap_err().msg.contains("unknown identifier"));
    }

    #[test]
    fn retag_and_queries() {
        let text = format!(
            "{HVZ}\nretag \"t=+inf\" {{ group = \"F2\" amenable = false dim = 1 }}\nquery {{ lambda_grid = \"0:4:0.25\" window = \"-1:3\" override = true }}"
        );
        let f = parse_operator_file(&text).unwrap();
        assert!(!f.space.is_fredholm_groupoid().holds);
        let q = &f.queries[1];
        assert_eq!(q.lambda_grid.unwrap().points().len(), 17);
        assert_eq!(q.window, Some((-1.0, 3.0)));
        assert!(q.allow_unjustified);
    }

    #[test]
    fn complex_numbers() {
        assert_eq!(parse_complex("1+2i").unwrap(), Complex64::new(1.0, 2.0));
        assert_eq!(parse_complex("-0.5i").unwrap(), Complex64::new(0.0, -0.5));
        assert_eq!(parse_complex("i").unwrap(), Complex64::new(0.0, 1.0));
        assert_eq!(parse_complex("3").unwrap(), Complex64::new(3.0, 0.0));
        assert_eq!(parse_complex("1e-3-2i").unwrap(), Complex64::new(1e-3, -2.0));
        assert!(parse_complex("1+").is_err());
    }

    #[test]
    fn blown_up_disk() {
        let text = r#"geometry {
  class = "smooth" name = "disk" dim = 2
  points = ["p", "q"]
  curve "L" { from = "p" to = "q" }
}"#;
        let f = parse_operator_file(text).unwrap();
        assert!(f.op.is_none());
        assert!(f.space.stratum("S[L]").is_some());
    }
}
