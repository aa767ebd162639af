//! Invertibility of limit operators, spectra, and the Fredholm verdict.

pub mod family;
pub mod nonabelian;

use std::cmp::Ordering;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calculus::{is_elliptic_shifted, DiffOp, EllipticityReport, Resolution, Status};
use crate::geometry::{GroupoidCheck, IsotropyGroup};
use crate::limits::{all_limit_operators, LimitOperator};

use family::{block_ranges, hermitian_spectrum, is_hermitian, BranchRange};
pub use family::{
    certify_block, fourier_symbol, Block, BlockOutcome, Certificate, SpectralResolution, SymbolFamily, Transverse,
    DEFAULT_GRID, DEFAULT_GRID_2D, DEFAULT_MODES, ZERO_TOL,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectralError {
    #[error("isotropy group {0} is not abelian")]
    NonAbelian(IsotropyGroup),
    #[error("unsupported orbit: {0}")]
    UnsupportedOrbit(String),
    #[error("coefficient evaluation failed: {0}")]
    Eval(String),
    #[error(transparent)]
    Limits(#[from] crate::limits::LimitsError),
}

/// Where invertibility fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertibilityWitness {
    /// Group covariables (empty for the infinite-dimensional branches).
    pub xi: Vec<f64>,
    /// Fourier mode along a circle orbit.
    pub mode: Option<i64>,
    /// Orbit base point, when coefficients depend on it.
    pub base: Vec<(String, f64)>,
    pub sigma: f64,
    /// Representation branch for non-abelian groups.
    pub branch: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Invertibility {
    Invertible { margin: f64, lower_bound: f64 },
    NotInvertible { witness: InvertibilityWitness },
    Indeterminate { reason: String },
}

impl Invertibility {
    pub fn is_invertible(&self) -> bool {
        matches!(self, Invertibility::Invertible { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertibilityReport {
    pub stratum: String,
    pub carrier: String,
    pub group: String,
    pub operator: String,
    pub lambda: [f64; 2],
    pub outcome: Invertibility,
    pub status: Status,
    /// `abelian` or `finite-section`.
    pub path: String,
    pub grid_points: usize,
    pub modes: Option<usize>,
    pub base_samples: usize,
    pub notes: Vec<String>,
}

impl InvertibilityReport {
    pub(crate) fn new(l: &LimitOperator, lambda: Complex64, path: &str) -> Self {
        InvertibilityReport {
            stratum: l.stratum.clone(),
            carrier: l.carrier(),
            group: l.group.to_string(),
            operator: l.op.to_string(),
            lambda: [lambda.re, lambda.im],
            outcome: Invertibility::Indeterminate { reason: "not evaluated".into() },
            status: Status::Approximate,
            path: path.to_string(),
            grid_points: 0,
            modes: None,
            base_samples: 0,
            notes: Vec::new(),
        }
    }
}

fn combine(certs: &[(Certificate, &Block)]) -> (Invertibility, usize) {
    let points = certs.iter().map(|(c, _)| c.points).sum();
    let mut margin = f64::INFINITY;
    let mut lower = f64::INFINITY;
    let mut undecided = None;
    for (c, b) in certs {
        match &c.outcome {
            BlockOutcome::NotInvertible { xi, sigma } => {
                let w = InvertibilityWitness {
                    xi: xi.clone(),
                    mode: b.mode,
                    base: b.base.clone(),
                    sigma: *sigma,
                    branch: None,
                };
                return (Invertibility::NotInvertible { witness: w }, points);
            }
            BlockOutcome::Invertible { margin: m, lower_bound } => {
                margin = margin.min(*m);
                lower = lower.min(*lower_bound);
            }
            BlockOutcome::Indeterminate { reason } => {
                if undecided.is_none() {
                    undecided = Some(match b.mode {
                        Some(k) => format!("mode {k}: {reason}"),
                        None => reason.clone(),
                    });
                }
            }
        }
    }
    match undecided {
        Some(reason) => (Invertibility::Indeterminate { reason }, points),
        None => (Invertibility::Invertible { margin, lower_bound: lower }, points),
    }
}

fn certify_family(f: &SymbolFamily, lambda: Complex64, res: &SpectralResolution) -> (Invertibility, usize) {
    let certs: Vec<Certificate> = f.blocks.par_iter().map(|b| certify_block(b, lambda, res)).collect();
    let pairs: Vec<(Certificate, &Block)> = certs.into_iter().zip(&f.blocks).collect();
    combine(&pairs)
}

fn same_kind(a: &Invertibility, b: &Invertibility) -> bool {
    std::mem::discriminant(a) == std::mem::discriminant(b)
}

/// Decides invertibility of `L - lambda` on `L^2` of its carrier.
pub fn is_invertible(l: &LimitOperator, lambda: Complex64, res: &SpectralResolution) -> InvertibilityReport {
    if nonabelian::supported(l) {
        return match nonabelian::is_invertible(l, lambda, res) {
            Ok(mut r) => {
                r.status = Status::Approximate;
                r
            }
            Err(e) => failed(l, lambda, "finite-section", e),
        };
    }
    let mut report = InvertibilityReport::new(l, lambda, "abelian");
    report.base_samples = l.base_samples.len();
    let fam = match fourier_symbol(l, res.modes) {
        Ok(f) => f,
        Err(e) => return failed(l, lambda, "abelian", e),
    };
    let (outcome, points) = certify_family(&fam, lambda, res);
    report.grid_points = points;
    report.status = fam.status;
    match &fam.transverse {
        Transverse::Fourier { coupled: false, .. } => {
            report.modes = Some(res.modes);
            // modes beyond the truncation must not change the answer
            if outcome.is_invertible() {
                if let Ok(wide) = fourier_symbol(l, 2 * res.modes) {
                    let extra = Ssf {
                        f: &wide,
                        keep: |b: &Block| b.mode.map_or(false, |k| k.unsigned_abs() as usize > res.modes),
                    };
                    let (o2, p2) = extra.certify(lambda, res);
                    report.grid_points += p2;
                    report.outcome = match (&outcome, o2) {
                        (_, o @ Invertibility::NotInvertible { .. }) => o,
                        (
                            Invertibility::Invertible { margin, lower_bound },
                            Invertibility::Invertible { margin: m2, lower_bound: l2 },
                        ) => Invertibility::Invertible { margin: margin.min(m2), lower_bound: lower_bound.min(l2) },
                        (_, Invertibility::Indeterminate { reason }) => Invertibility::Indeterminate { reason },
                        _ => outcome.clone(),
                    };
                    return report;
                }
            }
            report.outcome = outcome;
        }
        Transverse::Fourier { coupled: true, .. } => {
            report.modes = Some(res.modes);
            let half = SpectralResolution { modes: (res.modes / 2).max(1), ..*res };
            report.outcome = match fourier_symbol(l, half.modes) {
                Ok(h) => {
                    let (oh, _) = certify_family(&h, lambda, &half);
                    if same_kind(&oh, &outcome) {
                        outcome
                    } else {
                        Invertibility::Indeterminate {
                            reason: format!("mode truncation unstable between {} and {} modes", half.modes, res.modes),
                        }
                    }
                }
                Err(_) => outcome,
            };
            report.status = report.status.meet(Status::Approximate);
        }
        _ => report.outcome = outcome,
    }
    report
}

struct Ssf<'a, F: Fn(&Block) -> bool> {
    f: &'a SymbolFamily,
    keep: F,
}

impl<F: Fn(&Block) -> bool + Sync> Ssf<'_, F> {
    fn certify(&self, lambda: Complex64, res: &SpectralResolution) -> (Invertibility, usize) {
        let blocks: Vec<&Block> = self.f.blocks.iter().filter(|b| (self.keep)(b)).collect();
        let certs: Vec<Certificate> = blocks.par_iter().map(|b| certify_block(b, lambda, res)).collect();
        let pairs: Vec<(Certificate, &Block)> = certs.into_iter().zip(blocks).collect();
        combine(&pairs)
    }
}

fn failed(l: &LimitOperator, lambda: Complex64, path: &str, e: SpectralError) -> InvertibilityReport {
    let mut r = InvertibilityReport::new(l, lambda, path);
    r.outcome = Invertibility::Indeterminate { reason: e.to_string() };
    r
}

/// A contribution to a spectrum before clipping and merging.
#[derive(Debug, Clone)]
pub struct RawRange {
    pub lo: f64,
    pub hi: f64,
    pub tol: f64,
    pub status: Status,
    pub complex: Vec<Complex64>,
    pub source: String,
}

impl RawRange {
    pub(crate) fn from_branch(b: BranchRange, status: Status, source: &str) -> RawRange {
        match b {
            BranchRange::Interval { lo, hi, tol } => {
                RawRange { lo, hi, tol, status, complex: vec![], source: source.to_string() }
            }
            BranchRange::Complex(pts) => RawRange {
                lo: f64::NAN,
                hi: f64::NAN,
                tol: 0.0,
                status: Status::Approximate,
                complex: pts,
                source: source.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Interval,
    Point,
    Complex,
}

/// One connected piece of a spectrum inside the query window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumItem {
    pub kind: ItemKind,
    pub lo: f64,
    pub hi: f64,
    /// Complex sample points as `[re, im]`.
    pub points: Vec<[f64; 2]>,
    pub tol: f64,
    pub status: Status,
    /// The item continues past the window edge.
    pub extends_below: bool,
    pub extends_above: bool,
    pub sources: Vec<String>,
}

impl SpectrumItem {
    pub fn contains(&self, x: f64) -> bool {
        self.kind != ItemKind::Complex && x >= self.lo - self.tol && x <= self.hi + self.tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumApprox {
    pub window: [f64; 2],
    pub items: Vec<SpectrumItem>,
    pub status: Status,
    pub notes: Vec<String>,
}

impl SpectrumApprox {
    pub fn contains(&self, x: f64) -> bool {
        self.items.iter().any(|i| i.contains(x))
    }

    /// Real intervals, in order.
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        self.items.iter().filter(|i| i.kind != ItemKind::Complex).map(|i| (i.lo, i.hi)).collect()
    }

    pub fn from_raw(raw: Vec<RawRange>, window: (f64, f64), notes: Vec<String>) -> SpectrumApprox {
        let (a, b) = window;
        let mut real: Vec<SpectrumItem> = Vec::new();
        let mut complex: Vec<SpectrumItem> = Vec::new();
        for r in raw {
            if !r.complex.is_empty() {
                let pts: Vec<[f64; 2]> =
                    r.complex.iter().filter(|z| z.re >= a && z.re <= b).map(|z| [z.re, z.im]).collect();
                if pts.is_empty() {
                    continue;
                }
                if pts.iter().all(|p| p[1].abs() <= 1e-9) {
                    for p in pts {
                        real.push(item(ItemKind::Point, p[0], p[0], 1e-9, r.status, false, false, &r.source));
                    }
                } else {
                    complex.push(SpectrumItem {
                        kind: ItemKind::Complex,
                        lo: pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
                        hi: pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
                        points: pts,
                        tol: 0.0,
                        status: Status::Approximate,
                        extends_below: false,
                        extends_above: false,
                        sources: vec![r.source.clone()],
                    });
                }
                continue;
            }
            if r.hi < a || r.lo > b || r.lo.is_nan() {
                continue;
            }
            let (lo, below) = if r.lo < a { (a, true) } else { (r.lo, false) };
            let (hi, above) = if r.hi > b { (b, true) } else { (r.hi, false) };
            let kind = if lo == hi { ItemKind::Point } else { ItemKind::Interval };
            real.push(item(kind, lo, hi, r.tol, r.status, below, above, &r.source));
        }
        real.sort_by(|x, y| x.lo.partial_cmp(&y.lo).unwrap_or(Ordering::Equal));
        let mut merged: Vec<SpectrumItem> = Vec::new();
        for it in real {
            if let Some(last) = merged.last_mut() {
                let gap = 1e-9_f64.max(last.tol.max(it.tol));
                if it.lo <= last.hi + gap {
                    if it.hi > last.hi {
                        last.hi = it.hi;
                        last.extends_above = it.extends_above;
                    } else if it.hi == last.hi {
                        last.extends_above |= it.extends_above;
                    }
                    last.extends_below |= it.extends_below;
                    last.tol = last.tol.max(it.tol);
                    last.status = last.status.meet(it.status);
                    if last.hi > last.lo {
                        last.kind = ItemKind::Interval;
                    }
                    for s in it.sources {
                        if !last.sources.contains(&s) {
                            last.sources.push(s);
                        }
                    }
                    continue;
                }
            }
            merged.push(it);
        }
        merged.extend(complex);
        let status = merged.iter().fold(Status::Exact, |s, i| s.meet(i.status));
        SpectrumApprox { window: [a, b], items: merged, status, notes }
    }
}

#[allow(clippy::too_many_arguments)]
fn item(
    kind: ItemKind,
    lo: f64,
    hi: f64,
    tol: f64,
    status: Status,
    below: bool,
    above: bool,
    source: &str,
) -> SpectrumItem {
    SpectrumItem {
        kind,
        lo,
        hi,
        points: vec![],
        tol,
        status,
        extends_below: below,
        extends_above: above,
        sources: vec![source.to_string()],
    }
}

fn raw_ranges(l: &LimitOperator, window: (f64, f64), res: &SpectralResolution) -> Result<Vec<RawRange>, SpectralError> {
    if nonabelian::supported(l) {
        return nonabelian::spectrum_ranges(l, window, res);
    }
    let fam = fourier_symbol(l, res.modes)?;
    let wabs = window.0.abs().max(window.1.abs());
    let status = match fam.transverse {
        Transverse::Fourier { coupled: true, .. } | Transverse::Discretized { .. } => Status::Approximate,
        _ => fam.status,
    };
    let per_block: Vec<Vec<RawRange>> = fam
        .blocks
        .par_iter()
        .map(|b| block_ranges(b, wabs, res).into_iter().map(|r| RawRange::from_branch(r, status, &l.stratum)).collect())
        .collect();
    Ok(per_block.into_iter().flatten().collect())
}

/// Spectrum of a limit operator inside `window`.
pub fn spectrum(
    l: &LimitOperator,
    window: (f64, f64),
    res: &SpectralResolution,
) -> Result<SpectrumApprox, SpectralError> {
    let raw = raw_ranges(l, window, res)?;
    let mut notes = Vec::new();
    if nonabelian::supported(l) {
        notes.push(format!("{}: finite-section approximation", l.stratum));
    }
    Ok(SpectrumApprox::from_raw(raw, window, notes))
}

/// Range of the order-zero part over the interior, sampled on a tensor grid.
fn interior_range(p: &DiffOp) -> Result<Vec<RawRange>, SpectralError> {
    let space = &p.frame.space;
    let names: Vec<&str> = space.coords.iter().map(|c| c.name.as_str()).collect();
    let per_axis = match space.coords.len() {
        0 | 1 => 2049,
        2 => 129,
        _ => 17,
    };
    let axes: Vec<Vec<f64>> = space.coords.iter().map(|c| c.samples(per_axis)).collect();
    let n = p.size;
    let mut compiled = Vec::new();
    for (r, c, w, e) in p.terms() {
        if w.is_empty() {
            compiled.push((r, c, e.to_expr().compile(&names).map_err(SpectralError::Eval)?));
        }
    }
    let total: usize = axes.iter().map(Vec::len).product();
    let points: Vec<Vec<f64>> = (0..total)
        .map(|mut i| {
            axes.iter()
                .map(|a| {
                    let v = a[i % a.len()];
                    i /= a.len();
                    v
                })
                .collect()
        })
        .collect();
    let mats: Vec<DMatrix<Complex64>> = points
        .par_iter()
        .map(|x| {
            let mut m = DMatrix::zeros(n, n);
            for (r, c, f) in &compiled {
                m[(*r, *c)] += Complex64::new(f.eval(x), 0.0);
            }
            m
        })
        .collect();
    let source = "interior".to_string();
    if mats.iter().all(is_hermitian) {
        let eigs: Vec<Vec<f64>> = mats.par_iter().map(hermitian_spectrum).collect();
        Ok((0..n)
            .map(|j| {
                let lo = eigs.iter().map(|e| e[j]).fold(f64::INFINITY, f64::min);
                let hi = eigs.iter().map(|e| e[j]).fold(f64::NEG_INFINITY, f64::max);
                RawRange { lo, hi, tol: 0.0, status: Status::Approximate, complex: vec![], source: source.clone() }
            })
            .collect())
    } else {
        let pts = mats.iter().step_by((mats.len() / 512).max(1)).flat_map(family::general_eigs).collect();
        Ok(vec![RawRange { lo: f64::NAN, hi: f64::NAN, tol: 0.0, status: Status::Approximate, complex: pts, source }])
    }
}

/// Essential spectrum of `p` inside `window`: the union of the spectra of
/// its limit operators, plus the range of the symbol for order zero.
pub fn essential_spectrum(
    p: &DiffOp,
    window: (f64, f64),
    res: &SpectralResolution,
    allow_unjustified: bool,
) -> Result<SpectrumApprox, SpectralError> {
    let limits = all_limit_operators(p, allow_unjustified)?;
    let mut raw = Vec::new();
    let mut notes = Vec::new();
    for l in &limits {
        raw.extend(raw_ranges(l, window, res)?);
        if nonabelian::supported(l) {
            notes.push(format!("{}: finite-section approximation", l.stratum));
        }
    }
    if p.order == 0 {
        let inner = interior_range(p)?;
        raw.extend(inner);
        notes.push("order zero: includes the sampled range of the coefficient over the interior".into());
    }
    let mut s = SpectrumApprox::from_raw(raw, window, notes);
    if !allow_unjustified {
        return Ok(s);
    }
    let check = p.frame.space.is_fredholm_groupoid();
    if !check.holds {
        s.notes.push("limit-criterion not justified; computed under override".into());
        s.status = Status::Approximate;
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictResult {
    Fredholm,
    NotFredholm,
    Indeterminate,
}

impl std::fmt::Display for VerdictResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VerdictResult::Fredholm => "Fredholm",
            VerdictResult::NotFredholm => "NotFredholm",
            VerdictResult::Indeterminate => "Indeterminate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub lambda: [f64; 2],
    pub sobolev: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VerdictOptions {
    pub allow_unjustified: bool,
    pub ellipticity: Resolution,
    pub spectral: SpectralResolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub query: Query,
    pub result: VerdictResult,
    pub reasons: Vec<String>,
    pub predicate: GroupoidCheck,
    pub override_used: bool,
    pub ellipticity: Option<EllipticityReport>,
    pub limits: Vec<InvertibilityReport>,
    pub status: Status,
    pub notes: Vec<String>,
}

/// Decides whether `p - lambda : H^s -> H^{s-m}` is Fredholm.
pub fn fredholm_verdict(p: &DiffOp, lambda: Complex64, sobolev: f64, opts: &VerdictOptions) -> Verdict {
    let space = &p.frame.space;
    let predicate = space.is_fredholm_groupoid();
    let mut v = Verdict {
        query: Query { lambda: [lambda.re, lambda.im], sobolev },
        result: VerdictResult::Indeterminate,
        reasons: Vec::new(),
        predicate: predicate.clone(),
        override_used: false,
        ellipticity: None,
        limits: Vec::new(),
        status: Status::Exact,
        notes: Vec::new(),
    };
    if !predicate.holds {
        if !opts.allow_unjustified {
            let mut r = "limit-criterion not justified".to_string();
            if let Some(s) = &predicate.failing_stratum {
                r.push_str(&format!(" at stratum {s}"));
            }
            if let Some(why) = &predicate.reason {
                r.push_str(&format!(": {why}"));
            }
            v.reasons.push(r);
            return v;
        }
        v.override_used = true;
        v.notes.push("limit-criterion not justified; verdict computed under override".into());
    }
    if !space.blowups.is_empty() {
        v.reasons.push("operators on blown-up spaces are not analysed".into());
        v.status = Status::Approximate;
        return v;
    }
    v.notes.push("the verdict does not depend on the Sobolev order".into());
    let ell = is_elliptic_shifted(p, lambda, opts.ellipticity);
    v.status = ell.status;
    if !ell.elliptic {
        let reason = match &ell.witness {
            Some(w) => format!("not elliptic: principal symbol singular on stratum {} at xi = {:?}", w.stratum, w.xi),
            None => "not elliptic".to_string(),
        };
        v.reasons.push(reason);
        v.result = VerdictResult::NotFredholm;
        v.ellipticity = Some(ell);
        return v;
    }
    v.ellipticity = Some(ell);
    let limits = match all_limit_operators(p, true) {
        Ok(l) => l,
        Err(e) => {
            v.reasons.push(e.to_string());
            v.status = Status::Approximate;
            return v;
        }
    };
    v.limits = limits.iter().map(|l| is_invertible(l, lambda, &opts.spectral)).collect();
    for r in &v.limits {
        v.status = v.status.meet(r.status);
    }
    if let Some(bad) = v.limits.iter().find(|r| matches!(r.outcome, Invertibility::NotInvertible { .. })) {
        v.result = VerdictResult::NotFredholm;
        v.reasons.push(format!("limit operator at stratum {} is not invertible", bad.stratum));
    } else if let Some(und) = v.limits.iter().find(|r| matches!(r.outcome, Invertibility::Indeterminate { .. })) {
        v.result = VerdictResult::Indeterminate;
        if let Invertibility::Indeterminate { reason } = &und.outcome {
            v.reasons.push(format!("limit operator at stratum {}: {reason}", und.stratum));
        }
    } else {
        v.result = VerdictResult::Fredholm;
        v.reasons.push("elliptic and every limit operator is invertible".into());
    }
    if v.override_used {
        v.status = v.status.meet(Status::Approximate);
    }
    v
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::calculus::{Frame, Term};
    use crate::geometry::*;
    use crate::limits::{limit_operator, BasePoint};
    use crate::opdsl::canon::Canon;
    use crate::opdsl::expr::parse_expr;

    fn canon(s: &str) -> Canon {
        Canon::from_expr(&parse_expr(s).unwrap()).unwrap()
    }

    fn sc1(order: u32, terms: &[(&str, &[usize])]) -> DiffOp {
        let frame = Arc::new(Frame::from_space(&build_scattering_space(1).unwrap()).unwrap());
        let t: Vec<Term> =
            terms.iter().map(|(c, w)| Term { row: 0, col: 0, coeff: canon(c), word: w.to_vec() }).collect();
        DiffOp::from_terms(frame, order, 1, t, false).unwrap()
    }

    fn hvz() -> DiffOp {
        sc1(2, &[("-1", &[0, 0]), ("2 + tanh(t)", &[])])
    }

    #[test]
    fn hvz_limits_and_verdict() {
        let p = hvz();
        let res = SpectralResolution::default();
        let lp = limit_operator(&p, "t=+inf", &BasePoint::Symbolic, false).unwrap();
        match is_invertible(&lp, Complex64::new(0.0, 0.0), &res).outcome {
            Invertibility::Invertible { margin, .. } => assert!((margin - 3.0).abs() < 1e-9),
            o => panic!("{o:?}"),
        }
        let lm = limit_operator(&p, "t=-inf", &BasePoint::Symbolic, false).unwrap();
        match is_invertible(&lm, Complex64::new(2.0, 0.0), &res).outcome {
            Invertibility::NotInvertible { witness } => assert!(witness.sigma < 1e-10),
            o => panic!("{o:?}"),
        }
        let opts = VerdictOptions::default();
        assert_eq!(fredholm_verdict(&p, Complex64::new(0.5, 0.0), 0.0, &opts).result, VerdictResult::Fredholm);
        assert_eq!(fredholm_verdict(&p, Complex64::new(2.0, 0.0), 0.0, &opts).result, VerdictResult::NotFredholm);
        assert_eq!(fredholm_verdict(&p, Complex64::new(2.0, 1.0), 0.0, &opts).result, VerdictResult::Fredholm);
    }

    #[test]
    fn hvz_essential_spectrum() {
        let s = essential_spectrum(&hvz(), (-5.0, 10.0), &SpectralResolution::default(), false).unwrap();
        assert_eq!(s.items.len(), 1);
        let it = &s.items[0];
        assert!((it.lo - 1.0).abs() < 1e-9 && it.hi == 10.0 && it.extends_above && !it.extends_below);
    }

    #[test]
    fn order_zero_range() {
        let p = sc1(0, &[("tanh(t)", &[])]);
        let s = essential_spectrum(&p, (-2.0, 2.0), &SpectralResolution::default(), false).unwrap();
        assert_eq!(s.items.len(), 1);
        assert!((s.items[0].lo + 1.0).abs() < 1e-6 && (s.items[0].hi - 1.0).abs() < 1e-6);
    }

    #[test]
    fn merge_and_clip() {
        let mk = |lo, hi| RawRange { lo, hi, tol: 0.0, status: Status::Exact, complex: vec![], source: "a".into() };
        let s =
            SpectrumApprox::from_raw(vec![mk(3.0, 5.0), mk(-10.0, 1.0), mk(4.0, f64::INFINITY)], (0.0, 8.0), vec![]);
        assert_eq!(s.intervals(), vec![(0.0, 1.0), (3.0, 8.0)]);
        assert!(s.items[0].extends_below && s.items[1].extends_above);
        let json = serde_json_like(&s);
        assert!(!json.contains("inf"));
    }

    fn serde_json_like(s: &SpectrumApprox) -> String {
        format!("{:?}", s.items.iter().map(|i| (i.lo, i.hi)).collect::<Vec<_>>())
    }

    #[test]
    fn bad_isotropy_is_indeterminate() {
        let space = build_scattering_space(1)
            .unwrap()
            .retag("t=+inf", IsotropyGroup::Tagged { name: "F2".into(), amenable: false, dim: 1 })
            .unwrap();
        let frame = Arc::new(Frame::from_space(&space).unwrap());
        let p = DiffOp::from_terms(
            frame,
            2,
            1,
            vec![
                Term { row: 0, col: 0, coeff: canon("-1"), word: vec![0, 0] },
                Term { row: 0, col: 0, coeff: canon("1"), word: vec![] },
            ],
            false,
        )
        .unwrap();
        let v = fredholm_verdict(&p, Complex64::new(0.0, 0.0), 0.0, &VerdictOptions::default());
        assert_eq!(v.result, VerdictResult::Indeterminate);
        assert!(v.reasons[0].starts_with("limit-criterion not justified"));
        let o = VerdictOptions { allow_unjustified: true, ..Default::default() };
        let v = fredholm_verdict(&p, Complex64::new(0.0, 0.0), 0.0, &o);
        assert!(v.override_used);
        assert_eq!(v.result, VerdictResult::Fredholm);
    }
}
