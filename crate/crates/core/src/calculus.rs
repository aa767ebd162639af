//! The operator algebra generated by a calculus frame: normal-ordered
//! differential operators, composition, principal symbols and ellipticity.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Coord, StratifiedSpace, Stratum};
use crate::opdsl::canon::Canon;
use crate::opdsl::expr::{Compiled, Rational};
use crate::opdsl::limit::{corner_limit, limit_canon, LimitError};

/// Confidence attached to a numerical or symbolic result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Status {
    Exact,
    NumericallyCertified { tol: f64 },
    Approximate,
}

impl Status {
    /// The weaker of two statuses.
    pub fn meet(self, other: Status) -> Status {
        use Status::*;
        match (self, other) {
            (Approximate, _) | (_, Approximate) => Approximate,
            (NumericallyCertified { tol: a }, NumericallyCertified { tol: b }) => {
                NumericallyCertified { tol: a.max(b) }
            }
            (NumericallyCertified { tol }, Exact) | (Exact, NumericallyCertified { tol }) => {
                NumericallyCertified { tol }
            }
            (Exact, Exact) => Exact,
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::Exact => write!(f, "Exact"),
            Status::NumericallyCertified { tol } => write!(f, "NumericallyCertified({tol:e})"),
            Status::Approximate => write!(f, "Approximate"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalculusError {
    #[error("generator `{0}` is not in the frame")]
    UnknownGenerator(String),
    #[error("word of length {len} exceeds the declared order {order}")]
    WordTooLong { len: usize, order: u32 },
    #[error("empty operator")]
    Empty,
    #[error("no term attains the declared order {0}")]
    MissingLeadingTerm(u32),
    #[error("matrix entry ({row}, {col}) outside size {size}")]
    EntryOutOfRange { row: usize, col: usize, size: usize },
    #[error("size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("operators live on different frames (`{0}` vs `{1}`)")]
    FrameMismatch(String, String),
    #[error("commutator [{0}, {1}] does not re-expand in the frame")]
    NotClosed(String, String),
    #[error("two generators differentiate the same coordinate `{0}`")]
    SharedCoordinate(String),
}

/// `multiplier * d/d var`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGenerator {
    pub name: String,
    pub var: String,
    pub multiplier: Canon,
    pub covariable: String,
    pub vanishing_strata: Vec<String>,
}

/// A word over generator indices; normal form has nondecreasing indices.
pub type Word = Vec<usize>;

#[derive(Debug, Clone)]
pub struct Frame {
    pub space: StratifiedSpace,
    pub generators: Vec<FrameGenerator>,
    // comm[i][j] = [g_i, g_j] as sum of c_r g_r
    comm: Vec<Vec<Vec<(usize, Canon)>>>,
    /// Generators acting as Lie-algebra elements of an isotropy group; they
    /// annihilate coefficients.
    pub ghost: Vec<bool>,
    /// Stratum this frame was frozen at, if any.
    pub restricted_to: Option<String>,
}

impl PartialEq for Frame {
    fn eq(&self, other: &Self) -> bool {
        self.id() == other.id() && self.generators == other.generators
    }
}

impl Frame {
    pub fn from_space(space: &StratifiedSpace) -> Result<Frame, CalculusError> {
        let mut generators = Vec::new();
        for g in &space.generators {
            if generators.iter().any(|h: &FrameGenerator| h.var == g.var) {
                return Err(CalculusError::SharedCoordinate(g.var.clone()));
            }
            let multiplier = Canon::from_expr(&g.multiplier)
                .map_err(|_| CalculusError::NotClosed(g.name.clone(), g.name.clone()))?;
            let vanishing_strata =
                space.strata.iter().filter(|s| s.frame.vanishing.contains(&g.name)).map(|s| s.id.clone()).collect();
            generators.push(FrameGenerator {
                name: g.name.clone(),
                var: g.var.clone(),
                multiplier,
                covariable: format!("xi_{}", g.var),
                vanishing_strata,
            });
        }
        let n = generators.len();
        let mut comm = vec![vec![Vec::new(); n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (gi, gj) = (&generators[i], &generators[j]);
                let mut terms = Vec::new();
                // [m_i d_i, m_j d_j] = m_i d_i(m_j) d_j - m_j d_j(m_i) d_i
                let a = gi.multiplier.mul(&gj.multiplier.differentiate(&gi.var));
                if !a.is_zero() {
                    let c = a
                        .div(&gj.multiplier)
                        .map_err(|_| CalculusError::NotClosed(gi.name.clone(), gj.name.clone()))?;
                    terms.push((j, c));
                }
                let b = gj.multiplier.mul(&gi.multiplier.differentiate(&gj.var));
                if !b.is_zero() {
                    let c = b
                        .div(&gi.multiplier)
                        .map_err(|_| CalculusError::NotClosed(gi.name.clone(), gj.name.clone()))?;
                    terms.push((i, c.neg()));
                }
                for (_, c) in &terms {
                    if !finite_on_chart(c, &space.coords) {
                        return Err(CalculusError::NotClosed(gi.name.clone(), gj.name.clone()));
                    }
                }
                terms.sort_by_key(|(r, _)| *r);
                comm[i][j] = terms;
            }
        }
        Ok(Frame { space: space.clone(), ghost: vec![false; n], generators, comm, restricted_to: None })
    }

    /// The frame of limit operators at a stratum: vanishing generators
    /// become ghosts, commutator coefficients are frozen.
    pub fn restricted(&self, stratum: &Stratum) -> Result<Frame, LimitError> {
        let mut comm = self.comm.clone();
        for row in comm.iter_mut() {
            for cell in row.iter_mut() {
                let mut frozen = Vec::new();
                for (r, c) in cell.iter() {
                    let f = freeze(c, stratum)?;
                    if !f.is_zero() {
                        frozen.push((*r, f));
                    }
                }
                *cell = frozen;
            }
        }
        let mut generators = self.generators.clone();
        for g in generators.iter_mut() {
            g.multiplier = freeze(&g.multiplier, stratum)?;
        }
        let ghost = self.generators.iter().map(|g| stratum.frame.vanishing.contains(&g.name)).collect();
        Ok(Frame { space: self.space.clone(), generators, comm, ghost, restricted_to: Some(stratum.id.clone()) })
    }

    pub fn id(&self) -> String {
        match &self.restricted_to {
            Some(s) => format!("{}@{}", self.space.id, s),
            None => self.space.id.clone(),
        }
    }

    pub fn is_ghost(&self, i: usize) -> bool {
        self.ghost[i]
    }

    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.generators.iter().position(|g| g.name == name)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.generators[i].name
    }

    pub fn commutator(&self, i: usize, j: usize) -> &[(usize, Canon)] {
        &self.comm[i][j]
    }

    /// `g_i(f) = m_i * df/dv_i`.
    pub fn apply_generator(&self, i: usize, f: &Canon) -> Canon {
        if self.ghost[i] {
            return Canon::zero();
        }
        let g = &self.generators[i];
        let d = f.differentiate(&g.var);
        if d.is_zero() {
            d
        } else {
            g.multiplier.mul(&d)
        }
    }

    pub fn coord_names(&self) -> Vec<&str> {
        self.space.coords.iter().map(|c| c.name.as_str()).collect()
    }
}

fn finite_on_chart(c: &Canon, coords: &[Coord]) -> bool {
    let names: Vec<&str> = coords.iter().map(|c| c.name.as_str()).collect();
    let Ok(compiled) = c.to_expr().compile(&names) else {
        return false;
    };
    let samples: Vec<Vec<f64>> = coords.iter().map(|c| c.samples(7)).collect();
    (0..7).all(|k| {
        let x: Vec<f64> = samples.iter().map(|s| s[k]).collect();
        compiled.eval(&x).is_finite()
    })
}

/// Moves a coefficient left through a word prefix: `prefix * f` as a sum of
/// `coefficient * word`.
fn move_left(frame: &Frame, prefix: &[usize], f: &Canon) -> Vec<(Canon, Word)> {
    if f.is_zero() {
        return Vec::new();
    }
    let Some((&g, rest)) = prefix.split_last() else {
        return vec![(f.clone(), Vec::new())];
    };
    let mut out: Vec<(Canon, Word)> = move_left(frame, rest, f)
        .into_iter()
        .map(|(c, mut w)| {
            w.push(g);
            (c, w)
        })
        .collect();
    out.extend(move_left(frame, rest, &frame.apply_generator(g, f)));
    out
}

/// Normal-orders a sum of `coefficient * word` terms.
fn normalize(frame: &Frame, terms: impl IntoIterator<Item = (Canon, Word)>) -> BTreeMap<Word, Canon> {
    let mut out: BTreeMap<Word, Canon> = BTreeMap::new();
    let mut stack: Vec<(Canon, Word)> = terms.into_iter().collect();
    while let Some((c, w)) = stack.pop() {
        if c.is_zero() {
            continue;
        }
        match w.windows(2).position(|p| p[0] > p[1]) {
            None => {
                let sum = match out.remove(&w) {
                    Some(prev) => prev.add(&c),
                    None => c,
                };
                if !sum.is_zero() {
                    out.insert(w, sum);
                }
            }
            Some(i) => {
                let (p, q) = (w[i], w[i + 1]);
                let mut swapped = w.clone();
                swapped.swap(i, i + 1);
                stack.push((c.clone(), swapped));
                for (r, coef) in frame.commutator(p, q) {
                    for (c2, mut nw) in move_left(frame, &w[..i], coef) {
                        nw.push(*r);
                        nw.extend_from_slice(&w[i + 2..]);
                        stack.push((c.mul(&c2), nw));
                    }
                }
            }
        }
    }
    out
}

/// A single `coefficient * word` contribution to a matrix entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub row: usize,
    pub col: usize,
    pub coeff: Canon,
    pub word: Word,
}

/// A matrix of normal-ordered differential operators over a frame.
#[derive(Debug, Clone)]
pub struct DiffOp {
    pub frame: Arc<Frame>,
    pub order: u32,
    pub size: usize,
    /// Row-major `size * size` entries.
    pub entries: Vec<BTreeMap<Word, Canon>>,
    pub sobolev: f64,
    pub lower_order: bool,
}

impl PartialEq for DiffOp {
    fn eq(&self, other: &Self) -> bool {
        self.frame.id() == other.frame.id()
            && self.order == other.order
            && self.size == other.size
            && self.entries == other.entries
    }
}

impl DiffOp {
    pub fn zero(frame: Arc<Frame>, order: u32, size: usize) -> DiffOp {
        DiffOp { frame, order, size, entries: vec![BTreeMap::new(); size * size], sobolev: 0.0, lower_order: true }
    }

    pub fn identity(frame: Arc<Frame>, size: usize) -> DiffOp {
        let mut op = DiffOp::zero(frame, 0, size);
        for i in 0..size {
            op.entries[i * size + i].insert(Vec::new(), Canon::one());
        }
        op.lower_order = false;
        op
    }

    /// Scalar multiplication by a function.
    pub fn multiplication(frame: Arc<Frame>, f: Canon) -> DiffOp {
        let mut op = DiffOp::zero(frame, 0, 1);
        if !f.is_zero() {
            op.entries[0].insert(Vec::new(), f);
            op.lower_order = false;
        }
        op
    }

    /// A single scalar generator.
    pub fn generator(frame: Arc<Frame>, i: usize) -> DiffOp {
        let mut op = DiffOp::zero(frame, 1, 1);
        op.entries[0].insert(vec![i], Canon::one());
        op.lower_order = false;
        op
    }

    /// Builds and normal-orders an operator from raw terms.
    pub fn from_terms(
        frame: Arc<Frame>,
        order: u32,
        size: usize,
        terms: Vec<Term>,
        lower_order: bool,
    ) -> Result<DiffOp, CalculusError> {
        if terms.is_empty() {
            return Err(CalculusError::Empty);
        }
        let mut raw: Vec<Vec<(Canon, Word)>> = vec![Vec::new(); size * size];
        for t in terms {
            if t.row >= size || t.col >= size {
                return Err(CalculusError::EntryOutOfRange { row: t.row, col: t.col, size });
            }
            if t.word.len() > order as usize {
                return Err(CalculusError::WordTooLong { len: t.word.len(), order });
            }
            if let Some(&bad) = t.word.iter().find(|&&g| g >= frame.len()) {
                return Err(CalculusError::UnknownGenerator(format!("#{bad}")));
            }
            raw[t.row * size + t.col].push((t.coeff, t.word));
        }
        let entries = raw.into_iter().map(|r| normalize(&frame, r)).collect();
        let op = DiffOp { frame, order, size, entries, sobolev: 0.0, lower_order };
        if !lower_order && op.actual_order() != Some(order) {
            return Err(CalculusError::MissingLeadingTerm(order));
        }
        Ok(op)
    }

    /// Longest word present, `None` for the zero operator.
    pub fn actual_order(&self) -> Option<u32> {
        self.entries.iter().flat_map(|e| e.keys()).map(|w| w.len() as u32).max()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.is_empty())
    }

    pub fn terms(&self) -> impl Iterator<Item = (usize, usize, &Word, &Canon)> {
        let n = self.size;
        self.entries.iter().enumerate().flat_map(move |(k, e)| e.iter().map(move |(w, c)| (k / n, k % n, w, c)))
    }

    /// Re-runs normal ordering; a no-op on well-formed operators.
    pub fn normalized(&self) -> DiffOp {
        let entries = self
            .entries
            .iter()
            .map(|e| normalize(&self.frame, e.iter().map(|(w, c)| (c.clone(), w.clone()))))
            .collect();
        DiffOp { entries, ..self.clone() }
    }

    fn check_compatible(&self, other: &DiffOp) -> Result<(), CalculusError> {
        if self.frame.id() != other.frame.id() {
            return Err(CalculusError::FrameMismatch(self.frame.id(), other.frame.id()));
        }
        if self.size != other.size {
            return Err(CalculusError::SizeMismatch(self.size, other.size));
        }
        Ok(())
    }

    pub fn add(&self, other: &DiffOp) -> Result<DiffOp, CalculusError> {
        self.check_compatible(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| {
                let mut out = a.clone();
                for (w, c) in b {
                    let sum = match out.remove(w) {
                        Some(prev) => prev.add(c),
                        None => c.clone(),
                    };
                    if !sum.is_zero() {
                        out.insert(w.clone(), sum);
                    }
                }
                out
            })
            .collect();
        Ok(DiffOp {
            frame: self.frame.clone(),
            order: self.order.max(other.order),
            size: self.size,
            entries,
            sobolev: self.sobolev,
            lower_order: self.lower_order && other.lower_order,
        })
    }

    pub fn scale(&self, r: &Rational) -> DiffOp {
        let entries = self
            .entries
            .iter()
            .map(|e| e.iter().map(|(w, c)| (w.clone(), c.scale(r))).filter(|(_, c)| !c.is_zero()).collect())
            .collect();
        DiffOp { entries, ..self.clone() }
    }

    pub fn neg(&self) -> DiffOp {
        let entries = self.entries.iter().map(|e| e.iter().map(|(w, c)| (w.clone(), c.neg())).collect()).collect();
        DiffOp { entries, ..self.clone() }
    }

    pub fn sub(&self, other: &DiffOp) -> Result<DiffOp, CalculusError> {
        self.add(&other.neg())
    }

    /// `P - lambda * I`.
    pub fn sub_scalar(&self, lambda: &Rational) -> DiffOp {
        let id = DiffOp::identity(self.frame.clone(), self.size).scale(lambda);
        let mut out = self.add(&id.neg()).expect("same frame and size");
        out.lower_order = self.lower_order;
        out
    }

    /// Operator product `P * Q` in normal form.
    pub fn compose(&self, other: &DiffOp) -> Result<DiffOp, CalculusError> {
        self.check_compatible(other)?;
        let n = self.size;
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let mut raw: Vec<(Canon, Word)> = Vec::new();
                for k in 0..n {
                    for (w1, c1) in &self.entries[i * n + k] {
                        for (w2, c2) in &other.entries[k * n + j] {
                            for (c, mut w) in move_left(&self.frame, w1, c2) {
                                w.extend_from_slice(w2);
                                raw.push((c1.mul(&c), w));
                            }
                        }
                    }
                }
                entries.push(normalize(&self.frame, raw));
            }
        }
        Ok(DiffOp {
            frame: self.frame.clone(),
            order: self.order + other.order,
            size: n,
            entries,
            sobolev: self.sobolev,
            lower_order: self.lower_order || other.lower_order,
        })
    }

    /// Applies the operator to a vector of functions.
    pub fn apply(&self, f: &[Canon]) -> Vec<Canon> {
        let n = self.size;
        (0..n)
            .map(|i| {
                let mut acc = Canon::zero();
                for k in 0..n {
                    for (w, c) in &self.entries[i * n + k] {
                        let mut g = f[k].clone();
                        for &gen in w.iter().rev() {
                            g = self.frame.apply_generator(gen, &g);
                        }
                        acc = acc.add(&c.mul(&g));
                    }
                }
                acc
            })
            .collect()
    }

    pub fn principal_symbol(&self) -> PrincipalSymbol {
        let m = self.order as usize;
        let entries = self
            .entries
            .iter()
            .map(|e| e.iter().filter(|(w, _)| w.len() == m).map(|(w, c)| (w.clone(), c.clone())).collect())
            .collect();
        PrincipalSymbol {
            order: self.order,
            size: self.size,
            covariables: self.frame.generators.iter().map(|g| g.covariable.clone()).collect(),
            entries,
        }
    }

    /// Whether every coefficient is a constant.
    pub fn is_constant_coefficient(&self) -> bool {
        self.terms().all(|(_, _, _, c)| c.as_constant().is_some() || c.is_numeric())
    }

    /// Formats the terms in operator-file syntax.
    pub fn to_file_terms(&self) -> String {
        let mut out = String::new();
        for (i, j, w, c) in self.terms() {
            let gens: Vec<&str> = w.iter().map(|&g| self.frame.name(g)).collect();
            out.push_str(&format!("  coeff \"{}\" gens [{}]", c.to_expr(), gens.join(", ")));
            if self.size > 1 {
                out.push_str(&format!(" at {i} {j}"));
            }
            out.push('\n');
        }
        out
    }
}

fn fmt_sum(f: &mut fmt::Formatter<'_>, entry: &BTreeMap<Word, Canon>, letter: &dyn Fn(usize) -> String) -> fmt::Result {
    if entry.is_empty() {
        return write!(f, "0");
    }
    // highest order first
    let mut items: Vec<(&Word, &Canon)> = entry.iter().collect();
    items.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(b.0)));
    for (k, (w, c)) in items.into_iter().enumerate() {
        if k > 0 {
            write!(f, " + ")?;
        }
        let body: Vec<String> = w.iter().map(|&g| letter(g)).collect();
        match (c.as_constant(), body.is_empty()) {
            (_, true) => write!(f, "{}", c.to_expr())?,
            (Some(r), false) if r == Rational::from_integer(1.into()) => write!(f, "{}", body.join("*"))?,
            (Some(r), false) if r == Rational::from_integer((-1).into()) => write!(f, "-{}", body.join("*"))?,
            _ => write!(f, "({})*{}", c.to_expr(), body.join("*"))?,
        }
    }
    Ok(())
}

impl fmt::Display for DiffOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let letter = |g: usize| self.frame.name(g).to_string();
        if self.size == 1 {
            return fmt_sum(f, &self.entries[0], &letter);
        }
        for i in 0..self.size {
            write!(f, "[")?;
            for j in 0..self.size {
                if j > 0 {
                    write!(f, " | ")?;
                }
                fmt_sum(f, &self.entries[i * self.size + j], &letter)?;
            }
            writeln!(f, "]")?;
        }
        Ok(())
    }
}

/// Order-`m` part of an operator as polynomials in the frame covariables.
/// A sorted word `[i, j, ...]` stands for the monomial `xi_i * xi_j * ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalSymbol {
    pub order: u32,
    pub size: usize,
    pub covariables: Vec<String>,
    pub entries: Vec<BTreeMap<Word, Canon>>,
}

impl PrincipalSymbol {
    pub fn mul(&self, other: &PrincipalSymbol) -> PrincipalSymbol {
        let n = self.size;
        let mut entries = vec![BTreeMap::new(); n * n];
        for i in 0..n {
            for j in 0..n {
                let out: &mut BTreeMap<Word, Canon> = &mut entries[i * n + j];
                for k in 0..n {
                    for (w1, c1) in &self.entries[i * n + k] {
                        for (w2, c2) in &other.entries[k * n + j] {
                            let mut w: Word = w1.iter().chain(w2).copied().collect();
                            w.sort_unstable();
                            let c = c1.mul(c2);
                            let sum = match out.remove(&w) {
                                Some(prev) => prev.add(&c),
                                None => c,
                            };
                            if !sum.is_zero() {
                                out.insert(w, sum);
                            }
                        }
                    }
                }
            }
        }
        PrincipalSymbol { order: self.order + other.order, size: n, covariables: self.covariables.clone(), entries }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.is_empty())
    }

    /// Every monomial has degree `order`.
    pub fn is_homogeneous(&self) -> bool {
        self.entries.iter().flat_map(|e| e.keys()).all(|w| w.len() == self.order as usize)
    }

    /// Replaces every coefficient by `f(coefficient)`, dropping zeros.
    pub fn map_coefficients<E>(&self, f: impl Fn(&Canon) -> Result<Canon, E>) -> Result<PrincipalSymbol, E> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let mut out = BTreeMap::new();
            for (w, c) in e {
                let v = f(c)?;
                if !v.is_zero() {
                    out.insert(w.clone(), v);
                }
            }
            entries.push(out);
        }
        Ok(PrincipalSymbol { entries, ..self.clone() })
    }

    /// Compiles coefficients against the given coordinate names.
    pub fn compile(&self, vars: &[&str]) -> Result<CompiledSymbol, String> {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                e.iter().map(|(w, c)| Ok((w.clone(), c.to_expr().compile(vars)?))).collect::<Result<Vec<_>, String>>()
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(CompiledSymbol { size: self.size, entries })
    }
}

impl fmt::Display for PrincipalSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let letter = |g: usize| self.covariables[g].clone();
        if self.size == 1 {
            return fmt_sum(f, &self.entries[0], &letter);
        }
        for i in 0..self.size {
            write!(f, "[")?;
            for j in 0..self.size {
                if j > 0 {
                    write!(f, " | ")?;
                }
                fmt_sum(f, &self.entries[i * self.size + j], &letter)?;
            }
            write!(f, "]")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CompiledSymbol {
    pub size: usize,
    entries: Vec<Vec<(Word, Compiled)>>,
}

impl CompiledSymbol {
    pub fn eval(&self, x: &[f64], xi: &[f64]) -> DMatrix<f64> {
        let n = self.size;
        DMatrix::from_fn(n, n, |i, j| {
            self.entries[i * n + j].iter().map(|(w, c)| c.eval(x) * w.iter().map(|&g| xi[g]).product::<f64>()).sum()
        })
    }
}

/// Sampling resolution for ellipticity checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    /// Directions on a 2-dimensional cosphere (scaled by 4 in dimension 3).
    pub directions: usize,
    /// Base points per chart coordinate.
    pub base_points: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution { directions: 64, base_points: 17 }
    }
}

pub const DET_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticityWitness {
    pub stratum: String,
    pub point: Vec<(String, f64)>,
    pub xi: Vec<f64>,
    /// `|det|` of the symbol at the witness.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticityReport {
    pub elliptic: bool,
    pub witness: Option<EllipticityWitness>,
    pub status: Status,
    pub resolution: Resolution,
    pub det_threshold: f64,
    /// Strata whose charts could not be sampled, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Unit directions in `R^d`.
pub fn cosphere_directions(d: usize, per_circle: usize) -> Vec<Vec<f64>> {
    use std::f64::consts::PI;
    match d {
        0 => vec![vec![]],
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..per_circle)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / per_circle as f64;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            // Fibonacci lattice on S^2, padded with zeros beyond 3 dims
            let n = 4 * per_circle;
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * k as f64;
                    let mut v = vec![r * phi.cos(), r * phi.sin(), z];
                    v.resize(d, 0.0);
                    v
                })
                .collect()
        }
    }
}

/// Freezes a coefficient on a boundary stratum.
pub fn freeze(c: &Canon, stratum: &Stratum) -> Result<Canon, LimitError> {
    match stratum.approach.len() {
        0 => Ok(c.clone()),
        1 => limit_canon(c, &stratum.approach[0]),
        _ => corner_limit(c, &stratum.approach),
    }
}

/// Coordinates that survive on a stratum chart.
pub fn stratum_coords(space: &StratifiedSpace, stratum: &Stratum) -> Vec<Coord> {
    if stratum.depth == 0 {
        return space.coords.clone();
    }
    stratum.fiber_coords.iter().chain(&stratum.base_coords).cloned().collect()
}

fn grid_points(coords: &[Coord], per_axis: usize) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = coords.iter().map(|c| c.samples(per_axis)).collect();
    let mut pts = vec![Vec::new()];
    for axis in &axes {
        pts = pts.iter().flat_map(|p| axis.iter().map(move |v| [p.clone(), vec![*v]].concat())).collect();
    }
    pts
}

struct ChartSymbol {
    stratum: String,
    coords: Vec<Coord>,
    symbol: CompiledSymbol,
}

fn symbol_value(sym: &CompiledSymbol, x: &[f64], xi: &[f64], shift: Complex64) -> Complex64 {
    let m = sym.eval(x, xi);
    let n = m.nrows();
    let mc = DMatrix::from_fn(n, n, |i, j| {
        Complex64::new(m[(i, j)], 0.0) - if i == j { shift } else { Complex64::new(0.0, 0.0) }
    });
    if n == 1 {
        mc[(0, 0)]
    } else {
        mc.determinant()
    }
}

fn slerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let v: Vec<f64> = a.iter().zip(b).map(|(p, q)| p * (1.0 - t) + q * t).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn bisect<T: Clone>(mut lo: T, mut hi: T, mid: impl Fn(&T, &T) -> T, value: impl Fn(&T) -> f64) -> T {
    let s_lo = value(&lo).signum();
    for _ in 0..200 {
        let m = mid(&lo, &hi);
        let v = value(&m);
        if v == 0.0 {
            return m;
        }
        if v.signum() == s_lo {
            lo = m;
        } else {
            hi = m;
        }
    }
    if value(&lo).abs() <= value(&hi).abs() {
        lo
    } else {
        hi
    }
}

/// Samples the principal symbol of `P - shift` (the shift matters only for
/// order 0) over every stratum chart and the cosphere.
pub fn is_elliptic_shifted(p: &DiffOp, shift: Complex64, res: Resolution) -> EllipticityReport {
    let space = &p.frame.space;
    let sigma = p.principal_symbol();
    let d = p.frame.len();
    let shift = if p.order == 0 { shift } else { Complex64::new(0.0, 0.0) };
    let real = shift.im == 0.0;
    let mut skipped = Vec::new();
    let mut charts = Vec::new();
    for st in &space.strata {
        if st.depth > 0 && st.approach.is_empty() {
            skipped.push((st.id.clone(), "no coefficient chart".to_string()));
            continue;
        }
        let frozen = match sigma.map_coefficients(|c| freeze(c, st)) {
            Ok(s) => s,
            Err(e) => {
                skipped.push((st.id.clone(), e.to_string()));
                continue;
            }
        };
        let coords = stratum_coords(space, st);
        let names: Vec<&str> = coords.iter().map(|c| c.name.as_str()).collect();
        match frozen.compile(&names) {
            Ok(symbol) => charts.push(ChartSymbol { stratum: st.id.clone(), coords, symbol }),
            Err(e) => skipped.push((st.id.clone(), e)),
        }
    }
    let dirs = if p.order == 0 { vec![vec![0.0; d]] } else { cosphere_directions(d, res.directions) };
    let mut witness = None;
    for chart in &charts {
        let pts = grid_points(&chart.coords, res.base_points);
        let val = |x: &[f64], xi: &[f64]| symbol_value(&chart.symbol, x, xi, shift);
        let make = |x: &[f64], xi: &[f64]| EllipticityWitness {
            stratum: chart.stratum.clone(),
            point: chart.coords.iter().zip(x).map(|(c, v)| (c.name.clone(), *v)).collect(),
            xi: xi.to_vec(),
            value: val(x, xi).norm(),
        };
        // exact zeros at sample points
        let found = pts
            .par_iter()
            .find_map_first(|x| dirs.iter().find(|xi| val(x, xi).norm() <= DET_THRESHOLD).map(|xi| make(x, xi)));
        if found.is_some() {
            witness = found;
            break;
        }
        if !real {
            continue;
        }
        // sign changes across directions at a fixed base point
        if d >= 2 && p.order > 0 {
            let found = pts.par_iter().find_map_first(|x| {
                let vals: Vec<f64> = dirs.iter().map(|xi| val(x, xi).re).collect();
                let pair = if d == 2 {
                    (0..dirs.len())
                        .find(|&k| vals[k] * vals[(k + 1) % dirs.len()] < 0.0)
                        .map(|k| (k, (k + 1) % dirs.len()))
                } else {
                    let neg = (0..dirs.len()).find(|&k| vals[k] < 0.0)?;
                    let pos = (0..dirs.len()).filter(|&k| vals[k] > 0.0).min_by(|&a, &b| {
                        let da: f64 = dirs[a].iter().zip(&dirs[neg]).map(|(p, q)| p * q).sum();
                        let db: f64 = dirs[b].iter().zip(&dirs[neg]).map(|(p, q)| p * q).sum();
                        db.partial_cmp(&da).unwrap()
                    })?;
                    Some((pos, neg))
                };
                let (a, b) = pair?;
                let xi = bisect(dirs[a].clone(), dirs[b].clone(), |u, v| slerp(u, v, 0.5), |xi| val(x, xi).re);
                Some(make(x, &xi))
            });
            if found.is_some() {
                witness = found;
                break;
            }
        }
        // sign changes between neighbouring base points along each axis
        let n_ax = res.base_points;
        let axes: Vec<Vec<f64>> = chart.coords.iter().map(|c| c.samples(n_ax)).collect();
        'outer: for xi in &dirs {
            for (k, x) in pts.iter().enumerate() {
                let v0 = val(x, xi).re;
                let mut stride = 1;
                for ax in (0..chart.coords.len()).rev() {
                    let idx = (k / stride) % n_ax;
                    if idx + 1 < n_ax {
                        let mut y = x.clone();
                        y[ax] = axes[ax][idx + 1];
                        if v0 * val(&y, xi).re < 0.0 {
                            let z = bisect(
                                x.clone(),
                                y,
                                |u, v| u.iter().zip(v).map(|(a, b)| 0.5 * (a + b)).collect(),
                                |z| val(z, xi).re,
                            );
                            witness = Some(make(&z, xi));
                            break 'outer;
                        }
                    }
                    stride *= n_ax;
                }
            }
        }
        if witness.is_some() {
            break;
        }
    }
    EllipticityReport {
        elliptic: witness.is_none(),
        witness,
        status: Status::NumericallyCertified { tol: DET_THRESHOLD },
        resolution: res,
        det_threshold: DET_THRESHOLD,
        skipped,
    }
}

pub fn is_elliptic(p: &DiffOp, res: Resolution) -> EllipticityReport {
    is_elliptic_shifted(p, Complex64::new(0.0, 0.0), res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::*;
    use crate::opdsl::expr::{parse_expr, rat};

    fn frame(space: StratifiedSpace) -> Arc<Frame> {
        Arc::new(Frame::from_space(&space).unwrap())
    }

    fn c(s: &str) -> Canon {
        Canon::from_expr(&parse_expr(s).unwrap()).unwrap()
    }

    fn op(f: &Arc<Frame>, order: u32, terms: &[(&str, &[&str])]) -> DiffOp {
        let terms = terms
            .iter()
            .map(|(coef, gens)| Term {
                row: 0,
                col: 0,
                coeff: c(coef),
                word: gens.iter().map(|g| f.index(g).unwrap()).collect(),
            })
            .collect();
        DiffOp::from_terms(f.clone(), order, 1, terms, false).unwrap()
    }

    #[test]
    fn edge_commutator() {
        let f = frame(build_edge_space(&Shape::torus(), &Shape::Circle).unwrap());
        let xdx = f.index("xdx").unwrap();
        let xdz = f.index("xdz").unwrap();
        assert_eq!(f.commutator(xdx, xdz), &[(xdz, Canon::one())]);
        let a = DiffOp::generator(f.clone(), xdx);
        let b = DiffOp::generator(f.clone(), xdz);
        let comm = a.compose(&b).unwrap().sub(&b.compose(&a).unwrap()).unwrap();
        let mut expected = b.clone();
        expected.order = 2;
        assert_eq!(comm, expected);
    }

    #[test]
    fn leibniz_on_collar() {
        let f = frame(build_edge_space(&Shape::Circle, &Shape::Point).unwrap());
        let xdx = DiffOp::generator(f.clone(), f.index("xdx").unwrap());
        let mult = DiffOp::multiplication(f.clone(), c("x^2 + tanh(x)"));
        let lhs = xdx.compose(&mult).unwrap();
        let rhs =
            mult.compose(&xdx).unwrap().add(&DiffOp::multiplication(f.clone(), c("x*(2*x + 1 - tanh(x)^2)"))).unwrap();
        assert_eq!(lhs.entries, rhs.entries);
    }

    #[test]
    fn dt_squared() {
        let f = frame(build_scattering_space(1).unwrap());
        let dt = DiffOp::generator(f.clone(), 0);
        let sq = dt.compose(&dt).unwrap();
        assert_eq!(sq.order, 2);
        assert_eq!(sq.entries[0].len(), 1);
        assert_eq!(sq.entries[0].get(&vec![0, 0]), Some(&Canon::one()));
    }

    #[test]
    fn symbols() {
        let sc1 = frame(build_scattering_space(1).unwrap());
        let p = op(&sc1, 2, &[("-1", &["dt", "dt"]), ("tanh(t)", &["dt"]), ("1", &[])]);
        assert_eq!(p.principal_symbol().to_string(), "-xi_t*xi_t");
        assert!(is_elliptic(&p, Resolution::default()).elliptic);

        let edge = frame(build_edge_space(&Shape::Circle, &Shape::Point).unwrap());
        let q = op(&edge, 2, &[("1", &["xdx", "xdx"]), ("1", &["dy", "dy"])]);
        assert_eq!(q.principal_symbol().to_string(), "xi_x*xi_x + xi_y*xi_y");
        assert!(is_elliptic(&q, Resolution::default()).elliptic);
    }

    #[test]
    fn lightcone_witness() {
        let sc2 = frame(build_scattering_space(2).unwrap());
        let p = op(&sc2, 2, &[("1", &["dx", "dx"]), ("-1", &["dy", "dy"])]);
        let rep = is_elliptic(&p, Resolution::default());
        assert!(!rep.elliptic);
        let w = rep.witness.unwrap();
        assert!((w.xi[0].abs() - w.xi[1].abs()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_coefficient_found_by_bisection() {
        let sc1 = frame(build_scattering_space(1).unwrap());
        let p = op(&sc1, 2, &[("tanh(t) - 1/3", &["dt", "dt"]), ("1", &[])]);
        let rep = is_elliptic(&p, Resolution::default());
        let w = rep.witness.expect("coefficient vanishes");
        assert!((w.point[0].1 - (1.0f64 / 3.0).atanh()).abs() < 1e-9);
    }

    #[test]
    fn boundary_degeneration_detected() {
        // 1 - tanh(t)^2 vanishes only in the limit t -> +/- inf
        let sc1 = frame(build_scattering_space(1).unwrap());
        let p = op(&sc1, 2, &[("1 - tanh(t)^2", &["dt", "dt"])]);
        let rep = is_elliptic(&p, Resolution::default());
        assert!(rep.witness.unwrap().stratum.starts_with("t="));
    }

    #[test]
    fn order_zero_shift() {
        let sc1 = frame(build_scattering_space(1).unwrap());
        let p = op(&sc1, 0, &[("tanh(t)", &[])]);
        assert!(!is_elliptic(&p, Resolution::default()).elliptic);
        assert!(!is_elliptic_shifted(&p, Complex64::new(0.5, 0.0), Resolution::default()).elliptic);
        assert!(is_elliptic_shifted(&p, Complex64::new(2.0, 0.0), Resolution::default()).elliptic);
        assert!(is_elliptic_shifted(&p, Complex64::new(0.5, 0.1), Resolution::default()).elliptic);
    }

    #[test]
    fn rejects_bad_terms() {
        let sc1 = frame(build_scattering_space(1).unwrap());
        assert_eq!(DiffOp::from_terms(sc1.clone(), 2, 1, vec![], false), Err(CalculusError::Empty));
        let t = Term { row: 0, col: 0, coeff: Canon::one(), word: vec![0, 0, 0] };
        assert!(matches!(
            DiffOp::from_terms(sc1.clone(), 2, 1, vec![t], false),
            Err(CalculusError::WordTooLong { .. })
        ));
        let t = Term { row: 0, col: 0, coeff: Canon::one(), word: vec![0] };
        assert_eq!(DiffOp::from_terms(sc1, 2, 1, vec![t], false), Err(CalculusError::MissingLeadingTerm(2)));
    }

    #[test]
    fn apply_matches_direct_differentiation() {
        let b = frame(build_b_space(&[Shape::Interval]).unwrap());
        let p = op(&b, 2, &[("1", &["xdx", "xdx"])]);
        let f = c("x^3");
        let direct = {
            let m = c("x*(1 - x)");
            let g = m.mul(&f.differentiate("x"));
            m.mul(&g.differentiate("x"))
        };
        let got = &p.apply(&[f])[0];
        let (a, b2) = (got.eval_at(&[("x", 0.3)]).unwrap(), direct.eval_at(&[("x", 0.3)]).unwrap());
        assert!((a - b2).abs() < 1e-12);
        assert!(p.sub_scalar(&rat(1)).entries[0].contains_key(&Vec::new()));
    }
}
