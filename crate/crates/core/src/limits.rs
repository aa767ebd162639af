//! Limit operators: coefficients frozen at a boundary stratum, vanishing
//! frame generators promoted to ghost generators of the isotropy group.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calculus::{freeze, CalculusError, DiffOp, Frame, PrincipalSymbol, Word};
use crate::geometry::{Coord, CoordKind, IsotropyGroup, Shape, Stratum};
use crate::opdsl::canon::Canon;
use crate::opdsl::limit::LimitError;

/// Default number of samples on a circle orbit base.
pub const BASE_SAMPLES: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LimitsError {
    #[error("unknown stratum `{0}`")]
    UnknownStratum(String),
    #[error("stratum `{0}` is not a boundary stratum")]
    NotBoundary(String),
    #[error("limit-criterion not justified: stratum `{stratum}`: {reason}")]
    NotJustified { stratum: String, reason: String },
    #[error("stratum `{0}` has no coefficient chart")]
    NoChart(String),
    #[error("on stratum `{stratum}`: {source}")]
    Limit { stratum: String, source: LimitError },
    #[error(transparent)]
    Calculus(#[from] CalculusError),
}

/// Where on the orbit base the operator was frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BasePoint {
    /// Coefficients kept as expressions in the base coordinates.
    Symbolic,
    At(Vec<(String, f64)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitOperator {
    pub source: String,
    pub stratum: String,
    pub base_point: BasePoint,
    pub orbit: Shape,
    pub group: IsotropyGroup,
    pub ghosts: Vec<usize>,
    pub orbit_generators: Vec<usize>,
    pub fiber_coords: Vec<Coord>,
    pub base_coords: Vec<Coord>,
    /// Declared sampling of the orbit base (empty when coefficients do not
    /// depend on it).
    pub base_samples: Vec<Vec<f64>>,
    /// The frozen operator over the restricted frame.
    pub op: DiffOp,
}

impl LimitOperator {
    pub fn frame(&self) -> &Arc<Frame> {
        &self.op.frame
    }

    /// Carrier `orbit x G` in words.
    pub fn carrier(&self) -> String {
        format!("{} x {}", self.orbit, self.group)
    }

    pub fn compose(&self, other: &LimitOperator) -> Result<LimitOperator, CalculusError> {
        let op = self.op.compose(&other.op)?;
        Ok(LimitOperator { op, source: format!("({})*({})", self.source, other.source), ..self.clone() })
    }

    pub fn principal_symbol(&self) -> PrincipalSymbol {
        self.op.principal_symbol()
    }

    /// Coefficients depend on base coordinates.
    pub fn depends_on_base(&self) -> bool {
        self.op.terms().any(|(_, _, _, c)| self.base_coords.iter().any(|b| c.depends_on(&b.name)))
    }

    /// Coefficients depend on fiber coordinates.
    pub fn depends_on_fiber(&self) -> bool {
        self.op.terms().any(|(_, _, _, c)| self.fiber_coords.iter().any(|b| c.depends_on(&b.name)))
    }

    /// Ghost generators in display order, named `X0, X1, ...`.
    pub fn ghost_name(&self, g: usize) -> Option<String> {
        self.ghosts.iter().position(|&h| h == g).map(|k| format!("X{k}"))
    }

    /// Generator classification: `(frame name, "ghost X_k" | "orbit")`.
    pub fn classification(&self) -> Vec<(String, String)> {
        let f = self.frame();
        (0..f.len())
            .map(|g| {
                let role = match self.ghost_name(g) {
                    Some(n) => format!("ghost {n}"),
                    None => "orbit".to_string(),
                };
                (f.name(g).to_string(), role)
            })
            .collect()
    }

    /// Substitutes a base point into the coefficients.
    pub fn at_base(&self, values: &[f64]) -> Result<LimitOperator, LimitsError> {
        let bindings: Vec<(String, f64)> =
            self.base_coords.iter().zip(values).map(|(c, v)| (c.name.clone(), *v)).collect();
        let mut op = self.op.clone();
        for e in op.entries.iter_mut() {
            let mut out = BTreeMap::new();
            for (w, c) in e.iter() {
                let mut v = c.clone();
                for (name, val) in &bindings {
                    v = substitute_float(&v, name, *val);
                }
                if !v.is_zero() {
                    out.insert(w.clone(), v);
                }
            }
            *e = out;
        }
        Ok(LimitOperator { op, base_point: BasePoint::At(bindings), base_samples: Vec::new(), ..self.clone() })
    }

    /// Operator-file style listing with ghost names.
    pub fn listing(&self) -> String {
        self.to_string()
    }
}

fn substitute_float(c: &Canon, var: &str, v: f64) -> Canon {
    // rational approximation good to ~1e-15
    let r = num_rational::BigRational::from_float(v).unwrap_or_default();
    c.substitute(var, &Canon::constant(r)).unwrap_or_else(|_| c.clone())
}

impl fmt::Display for LimitOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let frame = self.frame();
        let letter = |g: usize| self.ghost_name(g).unwrap_or_else(|| frame.name(g).to_string());
        let n = self.op.size;
        for i in 0..n {
            if n > 1 {
                write!(f, "[")?;
            }
            for j in 0..n {
                if j > 0 {
                    write!(f, " | ")?;
                }
                let entry = &self.op.entries[i * n + j];
                if entry.is_empty() {
                    write!(f, "0")?;
                    continue;
                }
                let mut items: Vec<(&Word, &Canon)> = entry.iter().collect();
                items.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(b.0)));
                for (k, (w, c)) in items.into_iter().enumerate() {
                    if k > 0 {
                        write!(f, " + ")?;
                    }
                    let body: Vec<String> = w.iter().map(|&g| letter(g)).collect();
                    let coef = c.to_expr().to_string();
                    if body.is_empty() {
                        write!(f, "{coef}")?;
                    } else if coef == "1" {
                        write!(f, "{}", body.join("*"))?;
                    } else if coef == "-1" {
                        write!(f, "-{}", body.join("*"))?;
                    } else {
                        write!(f, "({coef})*{}", body.join("*"))?;
                    }
                }
            }
            if n > 1 {
                write!(f, "]")?;
            }
        }
        Ok(())
    }
}

fn boundary_stratum<'a>(p: &'a DiffOp, stratum_id: &str) -> Result<&'a Stratum, LimitsError> {
    let st = p.frame.space.stratum(stratum_id).ok_or_else(|| LimitsError::UnknownStratum(stratum_id.to_string()))?;
    if st.depth == 0 {
        return Err(LimitsError::NotBoundary(stratum_id.to_string()));
    }
    if st.approach.is_empty() {
        return Err(LimitsError::NoChart(stratum_id.to_string()));
    }
    Ok(st)
}

fn check_predicate(p: &DiffOp, allow_unjustified: bool) -> Result<(), LimitsError> {
    if allow_unjustified {
        return Ok(());
    }
    let check = p.frame.space.is_fredholm_groupoid();
    if check.holds {
        Ok(())
    } else {
        Err(LimitsError::NotJustified {
            stratum: check.failing_stratum.unwrap_or_default(),
            reason: check.reason.unwrap_or_default(),
        })
    }
}

fn base_grid(coords: &[Coord], n: usize) -> Vec<Vec<f64>> {
    let mut pts = vec![Vec::new()];
    for c in coords {
        let axis = match c.kind {
            CoordKind::Circle => c.samples(n),
            _ => c.samples(n),
        };
        pts = pts.iter().flat_map(|p| axis.iter().map(move |v| [p.clone(), vec![*v]].concat())).collect();
    }
    pts
}

/// Freezes `p` at a boundary stratum. `allow_unjustified` overrides the
/// Fredholm-groupoid predicate.
pub fn limit_operator(
    p: &DiffOp,
    stratum_id: &str,
    base: &BasePoint,
    allow_unjustified: bool,
) -> Result<LimitOperator, LimitsError> {
    check_predicate(p, allow_unjustified)?;
    let st = boundary_stratum(p, stratum_id)?;
    let wrap = |source: LimitError| LimitsError::Limit { stratum: st.id.clone(), source };
    let frame = Arc::new(p.frame.restricted(st).map_err(wrap)?);
    let mut entries = Vec::with_capacity(p.entries.len());
    for e in &p.entries {
        let mut out = BTreeMap::new();
        for (w, c) in e {
            let v = freeze(c, st).map_err(wrap)?;
            if !v.is_zero() {
                out.insert(w.clone(), v);
            }
        }
        entries.push(out);
    }
    let op = DiffOp { frame: frame.clone(), entries, ..p.clone() };
    let ghosts: Vec<usize> = (0..frame.len()).filter(|&g| frame.is_ghost(g)).collect();
    let orbit_generators: Vec<usize> = (0..frame.len()).filter(|&g| !frame.is_ghost(g)).collect();
    let mut out = LimitOperator {
        source: p.to_string(),
        stratum: st.id.clone(),
        base_point: BasePoint::Symbolic,
        orbit: st.fiber.clone(),
        group: st.isotropy.clone().normalized(),
        ghosts,
        orbit_generators,
        fiber_coords: st.fiber_coords.clone(),
        base_coords: st.base_coords.clone(),
        base_samples: Vec::new(),
        op,
    };
    if out.depends_on_base() {
        out.base_samples = base_grid(&out.base_coords, BASE_SAMPLES);
    }
    match base {
        BasePoint::Symbolic => Ok(out),
        BasePoint::At(values) => {
            let vals: Vec<f64> = out
                .base_coords
                .iter()
                .map(|c| values.iter().find(|(n, _)| *n == c.name).map(|(_, v)| *v).unwrap_or(0.0))
                .collect();
            out.at_base(&vals)
        }
    }
}

/// One limit operator per boundary stratum, symbolic over the orbit base.
pub fn all_limit_operators(p: &DiffOp, allow_unjustified: bool) -> Result<Vec<LimitOperator>, LimitsError> {
    check_predicate(p, allow_unjustified)?;
    let ids: Vec<String> = p.frame.space.boundary_strata().map(|s| s.id.clone()).collect();
    ids.par_iter().map(|id| limit_operator(p, id, &BasePoint::Symbolic, true)).collect()
}

/// Applies coefficient freezing again at the operator's own stratum.
pub fn refreeze(l: &LimitOperator) -> Result<LimitOperator, LimitsError> {
    let st = l.op.frame.space.stratum(&l.stratum).ok_or_else(|| LimitsError::UnknownStratum(l.stratum.clone()))?;
    let wrap = |source: LimitError| LimitsError::Limit { stratum: st.id.clone(), source };
    let mut op = l.op.clone();
    for e in op.entries.iter_mut() {
        let mut out = BTreeMap::new();
        for (w, c) in e.iter() {
            let v = freeze(c, st).map_err(wrap)?;
            if !v.is_zero() {
                out.insert(w.clone(), v);
            }
        }
        *e = out;
    }
    Ok(LimitOperator { op, ..l.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::Term;
    use crate::geometry::*;
    use crate::opdsl::expr::parse_expr;

    fn c(s: &str) -> Canon {
        Canon::from_expr(&parse_expr(s).unwrap()).unwrap()
    }

    fn op(space: StratifiedSpace, order: u32, terms: &[(&str, &[&str])]) -> DiffOp {
        let f = Arc::new(Frame::from_space(&space).unwrap());
        let terms = terms
            .iter()
            .map(|(coef, gens)| Term {
                row: 0,
                col: 0,
                coeff: c(coef),
                word: gens.iter().map(|g| f.index(g).unwrap()).collect(),
            })
            .collect();
        DiffOp::from_terms(f, order, 1, terms, false).unwrap()
    }

    #[test]
    fn hvz_limits() {
        let p = op(build_scattering_space(1).unwrap(), 2, &[("-1", &["dt", "dt"]), ("2 + tanh(t)", &[])]);
        let ls = all_limit_operators(&p, false).unwrap();
        assert_eq!(ls.len(), 2);
        let plus = ls.iter().find(|l| l.stratum == "t=+inf").unwrap();
        let minus = ls.iter().find(|l| l.stratum == "t=-inf").unwrap();
        assert_eq!(plus.to_string(), "-X0*X0 + 3");
        assert_eq!(minus.to_string(), "-X0*X0 + 1");
        assert_eq!(plus.group, IsotropyGroup::RealVector(1));
    }

    #[test]
    fn b_interval_freezing() {
        let p = op(build_b_space(&[Shape::Interval]).unwrap(), 2, &[("2 + x", &["xdx", "xdx"])]);
        let l0 = limit_operator(&p, "x=0", &BasePoint::Symbolic, false).unwrap();
        let l1 = limit_operator(&p, "x=1", &BasePoint::Symbolic, false).unwrap();
        assert_eq!(l0.to_string(), "(2)*X0*X0");
        assert_eq!(l1.to_string(), "(3)*X0*X0");
        assert_eq!(l0.ghosts.len(), 1);
    }

    #[test]
    fn edge_classification() {
        let p = op(
            build_edge_space(&Shape::torus(), &Shape::Circle).unwrap(),
            2,
            &[("1", &["xdx", "xdx"]), ("1", &["dy", "dy"]), ("1", &["xdz", "xdz"])],
        );
        let l = limit_operator(&p, "x=0", &BasePoint::Symbolic, false).unwrap();
        let cls = l.classification();
        assert_eq!(
            cls,
            vec![
                ("xdx".to_string(), "ghost X0".to_string()),
                ("dy".to_string(), "orbit".to_string()),
                ("xdz".to_string(), "ghost X1".to_string())
            ]
        );
        assert_eq!(l.group, IsotropyGroup::SemidirectRnRplus(1));
        assert_eq!(l.to_string(), "X0*X0 + dy*dy + X1*X1");
        // ghost bracket survives freezing
        assert_eq!(l.frame().commutator(0, 2), &[(2, Canon::one())]);
    }

    #[test]
    fn b_square_counts() {
        let p = op(
            build_b_space(&[Shape::Interval, Shape::Interval]).unwrap(),
            2,
            &[("1", &["xdx", "xdx"]), ("1", &["ydy", "ydy"]), ("1", &[])],
        );
        let ls = all_limit_operators(&p, false).unwrap();
        assert_eq!(ls.len(), 8);
        assert_eq!(ls.iter().filter(|l| l.ghosts.len() == 1).count(), 4);
        assert_eq!(ls.iter().filter(|l| l.ghosts.len() == 2).count(), 4);
    }

    #[test]
    fn radial_limits_symbolic_in_angle() {
        let p = op(
            build_scattering_space(2).unwrap(),
            2,
            &[("-1", &["dx", "dx"]), ("-1", &["dy", "dy"]), ("x^2/(1 + x^2 + y^2)", &[])],
        );
        let l = limit_operator(&p, "r=inf", &BasePoint::Symbolic, false).unwrap();
        assert!(l.depends_on_base());
        assert_eq!(l.base_samples.len(), BASE_SAMPLES);
        let at = l.at_base(&[0.0]).unwrap();
        assert!(!at.depends_on_base());
    }

    #[test]
    fn predicate_gate() {
        let space = build_scattering_space(1).unwrap();
        let bad = space.retag("t=+inf", IsotropyGroup::Tagged { name: "F_2".into(), amenable: false, dim: 1 }).unwrap();
        let p = op(bad, 2, &[("-1", &["dt", "dt"])]);
        assert!(matches!(all_limit_operators(&p, false), Err(LimitsError::NotJustified { .. })));
        assert_eq!(all_limit_operators(&p, true).unwrap().len(), 2);
        assert!(matches!(limit_operator(&p, "interior", &BasePoint::Symbolic, true), Err(LimitsError::NotBoundary(_))));
    }

    #[test]
    fn inadmissible_coefficient() {
        let p = op(build_scattering_space(1).unwrap(), 2, &[("-1", &["dt", "dt"]), ("sin(t)", &[])]);
        assert!(matches!(limit_operator(&p, "t=+inf", &BasePoint::Symbolic, false), Err(LimitsError::Limit { .. })));
    }
}
