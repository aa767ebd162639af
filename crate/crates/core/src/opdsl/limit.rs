//! Boundary limits of coefficient expressions.
//!
//! Each approach to a boundary stratum is written in terms of a boundary
//! defining function `rho -> 0+`: `x = rho`, `x = 1 - rho`, `t = ±1/rho`, or
//! radially `(x, y) = (cos th, sin th)/rho`. Expressions are expanded as
//! truncated Laurent series in `rho` whose coefficients are canonical forms in
//! the surviving coordinates; the limit is the `rho^0` coefficient.
//!
//! Admissible primitives of escaping arguments: `tanh` and `arctan` of an
//! argument with a pole whose leading coefficient is a nonzero constant, and
//! `exp` of an argument tending to `-inf`. Rational functions need numerator
//! degree at most the denominator degree in the escaping direction.

use std::fmt;

use num_traits::{One, Signed};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::canon::{Canon, CanonError};
use super::expr::{rat, Expr, Func, Rational};

/// Number of series coefficients carried beyond the valuation.
const PRECISION: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Approach {
    /// `var -> 0+`
    ToZero(String),
    /// `var -> 1-`
    ToOne(String),
    /// `var -> +inf`
    ToPosInf(String),
    /// `var -> -inf`
    ToNegInf(String),
    /// `(x, y) -> inf` along the ray of angle `angle`.
    Radial { x: String, y: String, angle: String },
}

impl Approach {
    /// Variables that leave the chart along this approach.
    pub fn escaping(&self) -> Vec<&str> {
        match self {
            Approach::ToZero(v) | Approach::ToOne(v) | Approach::ToPosInf(v) | Approach::ToNegInf(v) => {
                vec![v.as_str()]
            }
            Approach::Radial { x, y, .. } => vec![x.as_str(), y.as_str()],
        }
    }

    /// New coordinate introduced on the stratum, if any.
    pub fn surviving(&self) -> Option<&str> {
        match self {
            Approach::Radial { angle, .. } => Some(angle.as_str()),
            _ => None,
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Approach::ToZero(v) => write!(f, "{v} -> 0+"),
            Approach::ToOne(v) => write!(f, "{v} -> 1-"),
            Approach::ToPosInf(v) => write!(f, "{v} -> +inf"),
            Approach::ToNegInf(v) => write!(f, "{v} -> -inf"),
            Approach::Radial { x, y, angle } => write!(f, "({x}, {y}) -> inf at angle {angle}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LimitError {
    #[error("inadmissible coefficient: `{subterm}` {reason}")]
    Inadmissible { subterm: String, reason: String },
    #[error(transparent)]
    Canon(#[from] CanonError),
}

fn inadmissible(e: &Expr, reason: &str) -> LimitError {
    LimitError::Inadmissible { subterm: e.to_string(), reason: reason.to_string() }
}

/// Truncated Laurent series `sum_k coeffs[k] rho^(val + k)`, known up to
/// `O(rho^(val + coeffs.len()))`. `exact` marks series with no truncation
/// error (finite polynomials in `rho` or exactly zero tails).
#[derive(Debug, Clone)]
struct Series {
    val: i32,
    coeffs: Vec<Canon>,
    exact: bool,
}

impl Series {
    fn constant(c: Canon) -> Series {
        if c.is_zero() {
            return Series::exact_zero();
        }
        let mut coeffs = vec![c];
        coeffs.resize(PRECISION, Canon::zero());
        Series { val: 0, coeffs, exact: true }
    }

    fn exact_zero() -> Series {
        Series { val: i32::MAX / 4, coeffs: Vec::new(), exact: true }
    }

    fn monomial(c: Canon, power: i32) -> Series {
        let mut coeffs = vec![c];
        coeffs.resize(PRECISION, Canon::zero());
        Series { val: power, coeffs, exact: true }
    }

    fn is_exact_zero(&self) -> bool {
        self.coeffs.is_empty() && self.exact
    }

    fn abs_precision(&self) -> i32 {
        if self.exact {
            i32::MAX / 4
        } else {
            self.val + self.coeffs.len() as i32
        }
    }

    fn coeff(&self, power: i32) -> Canon {
        let k = power - self.val;
        if k < 0 {
            return Canon::zero();
        }
        self.coeffs.get(k as usize).cloned().unwrap_or_else(Canon::zero)
    }

    /// Drops leading zero coefficients; keeps relative precision bounded.
    fn normalized(mut self) -> Series {
        let lead = self.coeffs.iter().position(|c| !c.is_zero());
        match lead {
            None => {
                if self.exact {
                    Series::exact_zero()
                } else {
                    let v = self.abs_precision();
                    Series { val: v, coeffs: Vec::new(), exact: false }
                }
            }
            Some(k) => {
                self.coeffs.drain(..k);
                self.val += k as i32;
                if self.coeffs.len() > PRECISION {
                    let tail_zero = self.coeffs[PRECISION..].iter().all(Canon::is_zero);
                    self.coeffs.truncate(PRECISION);
                    self.exact &= tail_zero;
                }
                self
            }
        }
    }

    fn add(&self, other: &Series) -> Series {
        if self.is_exact_zero() {
            return other.clone();
        }
        if other.is_exact_zero() {
            return self.clone();
        }
        let val = self.val.min(other.val);
        let prec = self.abs_precision().min(other.abs_precision());
        let exact = self.exact && other.exact;
        let top =
            if exact { (self.val + self.coeffs.len() as i32).max(other.val + other.coeffs.len() as i32) } else { prec };
        let coeffs = (val..top).map(|p| self.coeff(p).add(&other.coeff(p))).collect();
        Series { val, coeffs, exact }.normalized()
    }

    fn neg(&self) -> Series {
        Series { val: self.val, coeffs: self.coeffs.iter().map(Canon::neg).collect(), exact: self.exact }
    }

    fn mul(&self, other: &Series) -> Series {
        if self.is_exact_zero() || other.is_exact_zero() {
            return Series::exact_zero();
        }
        let n = match (self.exact, other.exact) {
            (true, false) => other.coeffs.len(),
            (false, true) => self.coeffs.len(),
            _ => self.coeffs.len().min(other.coeffs.len()),
        };
        let exact = self.exact && other.exact;
        let len = if exact { self.coeffs.len() + other.coeffs.len() - 1 } else { n };
        let mut coeffs = vec![Canon::zero(); len];
        for (i, a) in self.coeffs.iter().enumerate() {
            if a.is_zero() {
                continue;
            }
            for (j, b) in other.coeffs.iter().enumerate() {
                if i + j < len && !b.is_zero() {
                    coeffs[i + j] = coeffs[i + j].add(&a.mul(b));
                }
            }
        }
        Series { val: self.val + other.val, coeffs, exact }.normalized()
    }

    fn recip(&self, src: &Expr) -> Result<Series, LimitError> {
        if self.coeffs.is_empty() {
            return Err(inadmissible(src, "vanishes to all computed orders"));
        }
        let lead = &self.coeffs[0];
        let lead_inv = lead.recip()?;
        if self.exact && self.coeffs.iter().skip(1).all(Canon::is_zero) {
            return Ok(Series::monomial(lead_inv, -self.val));
        }
        // q_k = -(sum_{j>=1} a_j q_{k-j}) / a_0
        let n = if self.exact { PRECISION } else { self.coeffs.len().min(PRECISION) };
        let mut q: Vec<Canon> = Vec::with_capacity(n);
        q.push(lead_inv.clone());
        for k in 1..n {
            let mut s = Canon::zero();
            for j in 1..=k {
                if let Some(a) = self.coeffs.get(j) {
                    if !a.is_zero() {
                        s = s.add(&a.mul(&q[k - j]));
                    }
                }
            }
            q.push(s.mul(&lead_inv).neg());
        }
        Ok(Series { val: -self.val, coeffs: q, exact: false }.normalized())
    }

    /// Marks the series as known only up to `O(rho^precision)`.
    fn truncate_to(mut self, precision: i32) -> Series {
        if self.is_exact_zero() {
            return Series { val: precision, coeffs: Vec::new(), exact: false };
        }
        let keep = (precision - self.val).max(0) as usize;
        if self.exact {
            self.coeffs.resize(keep, Canon::zero());
        } else {
            self.coeffs.truncate(keep);
        }
        self.exact = false;
        self.normalized()
    }

    fn powi(&self, n: i32, src: &Expr) -> Result<Series, LimitError> {
        let base = if n < 0 { self.recip(src)? } else { self.clone() };
        let mut acc = Series::constant(Canon::one());
        for _ in 0..n.unsigned_abs() {
            acc = acc.mul(&base);
        }
        Ok(acc)
    }
}

struct Expander<'a> {
    approach: &'a Approach,
}

impl<'a> Expander<'a> {
    fn var(&self, name: &str) -> Series {
        match self.approach {
            Approach::ToZero(v) if v == name => Series::monomial(Canon::one(), 1),
            Approach::ToOne(v) if v == name => {
                let mut s = Series::constant(Canon::one());
                s.coeffs[1] = Canon::int(-1);
                s
            }
            Approach::ToPosInf(v) if v == name => Series::monomial(Canon::one(), -1),
            Approach::ToNegInf(v) if v == name => Series::monomial(Canon::int(-1), -1),
            Approach::Radial { x, angle, .. } if x == name => {
                Series::monomial(Canon::call(Func::Cos, Canon::var(angle)), -1)
            }
            Approach::Radial { y, angle, .. } if y == name => {
                Series::monomial(Canon::call(Func::Sin, Canon::var(angle)), -1)
            }
            _ => Series::constant(Canon::var(name)),
        }
    }

    fn expand(&self, e: &Expr) -> Result<Series, LimitError> {
        Ok(match e {
            Expr::Num(r) => Series::constant(Canon::constant(r.clone())),
            Expr::Pi => Series::constant(Canon::pi()),
            Expr::Var(v) => self.var(v),
            Expr::Neg(a) => self.expand(a)?.neg(),
            Expr::Add(a, b) => self.expand(a)?.add(&self.expand(b)?),
            Expr::Sub(a, b) => self.expand(a)?.add(&self.expand(b)?.neg()),
            Expr::Mul(a, b) => self.expand(a)?.mul(&self.expand(b)?),
            Expr::Div(a, b) => {
                let den = self.expand(b)?;
                let num = self.expand(a)?;
                num.mul(&den.recip(e)?)
            }
            Expr::Pow(a, n) => self.expand(a)?.powi(*n, e)?,
            Expr::Call(f, a) => self.call(*f, &self.expand(a)?, e)?,
        })
    }

    fn call(&self, f: Func, arg: &Series, src: &Expr) -> Result<Series, LimitError> {
        if arg.is_exact_zero() {
            return Ok(Series::constant(Canon::call(f, Canon::zero())));
        }
        if arg.coeffs.is_empty() {
            // known to vanish to order >= val but no terms survive
            if arg.val > 0 {
                return Ok(self.taylor(f, &Canon::zero(), arg));
            }
            return Err(inadmissible(src, "argument lost all precision"));
        }
        if arg.val >= 0 {
            let c0 = arg.coeff(0);
            return Ok(self.taylor(f, &c0, arg));
        }
        // argument escapes to infinity
        let lead = &arg.coeffs[0];
        let sign = match lead.as_constant() {
            Some(r) if r.is_positive() => 1,
            Some(r) if r.is_negative() => -1,
            _ => {
                return Err(inadmissible(src, "has an escaping argument whose direction varies along the stratum"));
            }
        };
        match f {
            Func::Tanh => Ok(Series::constant(Canon::int(sign))),
            Func::Exp if sign < 0 => Ok(Series::exact_zero()),
            Func::Exp => Err(inadmissible(src, "grows without bound")),
            Func::Arctan => {
                // arctan(u) = sign*pi/2 - arctan(1/u)
                let inv = arg.recip(src)?;
                let half_pi = Canon::pi().scale(&Rational::new(rat(sign).to_integer(), 2.into()));
                let tail = self.taylor(Func::Arctan, &Canon::zero(), &inv);
                Ok(Series::constant(half_pi).add(&tail.neg()))
            }
            Func::Sin | Func::Cos => Err(inadmissible(src, "oscillates without a limit")),
        }
    }

    /// `f(c0 + h) = sum_k f^(k)(c0) h^k / k!` with `h = arg - c0`.
    fn taylor(&self, f: Func, c0: &Canon, arg: &Series) -> Series {
        let h = arg.add(&Series::constant(c0.neg()));
        let w = "__w";
        let mut deriv = Canon::call(f, Canon::var(w));
        let mut acc = Series::constant(deriv.substitute(w, c0).expect("primitive is finite"));
        if h.is_exact_zero() {
            return acc;
        }
        if h.coeffs.is_empty() {
            return acc.truncate_to(h.val);
        }
        let step = h.val.max(1);
        let terms = (PRECISION as i32 / step) as usize + 1;
        let mut hpow = Series::constant(Canon::one());
        let mut fact = Rational::one();
        for k in 1..=terms {
            deriv = deriv.differentiate(w);
            hpow = hpow.mul(&h);
            fact *= rat(k as i64);
            let coef = deriv.substitute(w, c0).expect("derivative is finite").scale(&fact.recip());
            if !coef.is_zero() {
                acc = acc.add(&hpow.mul(&Series::constant(coef)));
            }
        }
        let precision = (step * (terms as i32 + 1)).min(h.abs_precision());
        acc.truncate_to(precision)
    }
}

/// Limit of a canonical coefficient along one approach.
pub fn limit_canon(c: &Canon, approach: &Approach) -> Result<Canon, LimitError> {
    if approach.escaping().iter().all(|v| !c.depends_on(v)) {
        return Ok(c.clone());
    }
    limit_expr_canon(&c.to_expr(), approach)
}

fn limit_expr_canon(e: &Expr, approach: &Approach) -> Result<Canon, LimitError> {
    let s = Expander { approach }.expand(e)?;
    if s.is_exact_zero() {
        return Ok(Canon::zero());
    }
    if s.coeffs.is_empty() {
        if s.val > 0 {
            return Ok(Canon::zero());
        }
        return Err(inadmissible(e, "limit lost in cancellation"));
    }
    if s.val < 0 {
        return Err(inadmissible(e, "is unbounded at the boundary"));
    }
    Ok(s.coeff(0))
}

/// Limit of an expression along one approach, as a canonical expression in
/// the surviving coordinates.
pub fn boundary_limit(e: &Expr, approach: &Approach) -> Result<Expr, LimitError> {
    Ok(limit_expr_canon(e, approach)?.to_expr())
}

/// Iterated limit at a corner. Both orders are computed and must agree.
pub fn corner_limit(c: &Canon, approaches: &[Approach]) -> Result<Canon, LimitError> {
    let forward = approaches.iter().try_fold(c.clone(), |acc, a| limit_canon(&acc, a))?;
    if approaches.len() > 1 {
        let backward = approaches.iter().rev().try_fold(c.clone(), |acc, a| limit_canon(&acc, a))?;
        if backward != forward {
            let close = numerically_equal(&forward, &backward);
            if !close {
                return Err(LimitError::Inadmissible {
                    subterm: c.to_string(),
                    reason: format!("iterated corner limits disagree ({forward} vs {backward})"),
                });
            }
        }
    }
    Ok(forward)
}

fn numerically_equal(a: &Canon, b: &Canon) -> bool {
    let probes = [0.137, 0.711, 1.93, 2.6];
    probes.iter().all(|p| {
        let env = |_: &str| Some(*p);
        match (a.eval(&env), b.eval(&env)) {
            (Ok(x), Ok(y)) => (x - y).abs() <= 1e-12 * (1.0 + x.abs()),
            _ => false,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opdsl::expr::{parse_expr, rat_frac};

    fn lim(s: &str, a: Approach) -> Result<Canon, LimitError> {
        limit_canon(&Canon::from_expr(&parse_expr(s).unwrap()).unwrap(), &a)
    }

    fn pos_inf() -> Approach {
        Approach::ToPosInf("t".into())
    }

    #[test]
    fn tanh_at_both_ends() {
        assert_eq!(lim("tanh(t)", pos_inf()).unwrap(), Canon::int(1));
        assert_eq!(lim("2 + tanh(t)", Approach::ToNegInf("t".into())).unwrap(), Canon::int(1));
        assert_eq!(lim("2 + tanh(t)", pos_inf()).unwrap(), Canon::int(3));
    }

    #[test]
    fn polynomial_times_bounded_at_zero() {
        let r = boundary_limit(&parse_expr("x^2*sin(y) + 3").unwrap(), &Approach::ToZero("x".into())).unwrap();
        assert_eq!(r, Expr::int(3));
        let r = lim("cos(x)*sin(y) + x", Approach::ToZero("x".into())).unwrap();
        assert_eq!(r, Canon::from_expr(&parse_expr("sin(y)").unwrap()).unwrap());
    }

    #[test]
    fn oscillation_is_inadmissible() {
        let err = lim("sin(t)", pos_inf()).unwrap_err();
        assert!(matches!(err, LimitError::Inadmissible { ref subterm, .. } if subterm == "sin(t)"));
        assert!(lim("t", pos_inf()).is_err());
        assert!(lim("exp(t)", pos_inf()).is_err());
    }

    #[test]
    fn rational_functions() {
        assert_eq!(lim("(3*t^2 + 1)/(1 + t^2)", pos_inf()).unwrap(), Canon::int(3));
        assert_eq!(lim("t/(1 + t^2)", pos_inf()).unwrap(), Canon::zero());
        assert!(lim("t^3/(1 + t^2)", pos_inf()).is_err());
        assert_eq!(lim("(t + 1) - t", pos_inf()).unwrap(), Canon::int(1));
    }

    #[test]
    fn decaying_and_saturating_primitives() {
        assert_eq!(lim("exp(-(t^2)) + 1", pos_inf()).unwrap(), Canon::int(1));
        assert_eq!(lim("arctan(t)", pos_inf()).unwrap(), Canon::pi().scale(&rat_frac(1, 2)));
        assert_eq!(lim("arctan(t)", Approach::ToNegInf("t".into())).unwrap(), Canon::pi().scale(&rat_frac(-1, 2)));
        assert_eq!(lim("t*(arctan(t) - pi/2)", pos_inf()).unwrap(), Canon::int(-1));
    }

    #[test]
    fn b_end_at_one() {
        let a = Approach::ToOne("x".into());
        assert_eq!(lim("x^2 + 1", a.clone()).unwrap(), Canon::int(2));
        assert_eq!(lim("(1 - x)/(1 - x^2)", a).unwrap(), Canon::constant(rat_frac(1, 2)));
    }

    #[test]
    fn radial_limits_depend_on_angle() {
        let a = Approach::Radial { x: "x".into(), y: "y".into(), angle: "th".into() };
        let r = lim("x^2/(1 + x^2 + y^2)", a.clone()).unwrap();
        assert_eq!(r, Canon::from_expr(&parse_expr("cos(th)^2").unwrap()).unwrap());
        assert_eq!(lim("5 + 1/(1 + x^2 + y^2)", a.clone()).unwrap(), Canon::int(5));
        assert!(lim("tanh(x)", a).is_err());
    }

    #[test]
    fn limits_commute_with_addition() {
        let exprs = ["tanh(t)", "1/(1 + t^2)", "arctan(t)", "(2*t^2 - 1)/(t^2 + 3)", "exp(-(t^2))*t", "3/4"];
        for a in exprs {
            for b in exprs {
                let sum = format!("({a}) + ({b})");
                let la = lim(a, pos_inf()).unwrap();
                let lb = lim(b, pos_inf()).unwrap();
                assert_eq!(lim(&sum, pos_inf()).unwrap(), la.add(&lb), "{sum}");
            }
        }
    }

    #[test]
    fn corner_order_agreement() {
        let c = Canon::from_expr(&parse_expr("x*y + 2 + x").unwrap()).unwrap();
        let approaches = [Approach::ToZero("x".into()), Approach::ToZero("y".into())];
        assert_eq!(corner_limit(&c, &approaches).unwrap(), Canon::int(2));
        let bad = Canon::from_expr(&parse_expr("x^2/(x^2 + y^2)").unwrap()).unwrap();
        assert!(corner_limit(&bad, &approaches).is_err());
    }
}
