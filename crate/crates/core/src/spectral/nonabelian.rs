//! Approximate invertibility for limit operators whose ghost group is
//! `R ⋊ (0, inf)`.
//!
//! Irreducible representations split into characters (translation
//! covariable `zeta = 0`, dilation covariable `xi`) and two
//! infinite-dimensional ones on `L^2(R_s)` with `X0 = d/ds` and
//! `X1 = ±i e^s`. The first family is abelian; the second is handled by
//! finite sections in `s` on growing boxes.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::calculus::Status;
use crate::geometry::{CoordKind, IsotropyGroup};
use crate::limits::LimitOperator;
use crate::opdsl::canon::Canon;

use super::family::{
    block_ranges, blocks_at, certify_block, hermitian_spectrum, is_hermitian, realizer, sigma_min_dense, BlockOutcome,
    BranchRange, SpectralResolution,
};
use super::{Invertibility, InvertibilityReport, InvertibilityWitness, RawRange, SpectralError};

/// Fourier modes on the fiber circle in the approximate path.
pub const NA_MODES: usize = 8;
/// Upper end of the `s` boxes: beyond it `e^s` dominates.
pub const S_HIGH: f64 = 4.0;
pub const S_STEP: f64 = 0.1;
pub const BOXES: [f64; 3] = [6.0, 10.0, 14.0];

type CMat = DMatrix<Complex64>;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// `(dilation, translation)` ghost indices.
fn split_ghosts(l: &LimitOperator) -> Result<(usize, usize), SpectralError> {
    if l.ghosts.len() != 2 {
        return Err(SpectralError::NonAbelian(l.group.clone()));
    }
    let f = l.frame();
    for &d in &l.ghosts {
        for &t in &l.ghosts {
            if d != t && f.commutator(d, t) == [(t, Canon::one())] {
                return Ok((d, t));
            }
        }
    }
    Err(SpectralError::NonAbelian(l.group.clone()))
}

pub(crate) fn supported(l: &LimitOperator) -> bool {
    l.group == IsotropyGroup::SemidirectRnRplus(1) && split_ghosts(l).is_ok()
}

/// Finite section of the `zeta = sign` representation at one mode.
fn section(
    l: &LimitOperator,
    base: &[f64],
    mode: i64,
    sign: f64,
    box_low: f64,
    dil: usize,
    tr: usize,
) -> Result<CMat, SpectralError> {
    let frame = l.frame();
    let names: Vec<&str> = l.fiber_coords.iter().chain(&l.base_coords).map(|c| c.name.as_str()).collect();
    let at = |e: &Canon| -> Result<f64, SpectralError> {
        let f = e.to_expr().compile(&names).map_err(SpectralError::Eval)?;
        let x: Vec<f64> = l.fiber_coords.iter().map(|_| 0.0).chain(base.iter().cloned()).collect();
        Ok(f.eval(&x))
    };
    let n_s = ((S_HIGH + box_low) / S_STEP).round() as usize - 1;
    let s: Vec<f64> = (0..n_s).map(|i| -box_low + S_STEP * (i as f64 + 1.0)).collect();
    let mut d = CMat::zeros(n_s, n_s);
    for i in 0..n_s {
        if i + 1 < n_s {
            d[(i, i + 1)] = c(0.5 / S_STEP);
        }
        if i > 0 {
            d[(i, i - 1)] = c(-0.5 / S_STEP);
        }
    }
    let e = CMat::from_fn(n_s, n_s, |a, b| if a == b { I * (sign * s[a].exp()) } else { c(0.0) });
    // second differences for repeated dilations keep the stencil compact
    let mut d2 = CMat::zeros(n_s, n_s);
    for i in 0..n_s {
        d2[(i, i)] = c(-2.0 / (S_STEP * S_STEP));
        if i + 1 < n_s {
            d2[(i, i + 1)] = c(1.0 / (S_STEP * S_STEP));
        }
        if i > 0 {
            d2[(i, i - 1)] = c(1.0 / (S_STEP * S_STEP));
        }
    }
    let n = l.op.size;
    let mut out = CMat::zeros(n * n_s, n * n_s);
    for (row, col, word, coef) in l.op.terms() {
        let mut m = CMat::identity(n_s, n_s) * c(at(coef)?);
        let mut k = 0;
        while k < word.len() {
            let g = word[k];
            if g == dil && word.get(k + 1) == Some(&dil) {
                m *= &d2;
                k += 2;
                continue;
            }
            if g == dil {
                m *= &d;
            } else if g == tr {
                m *= &e;
            } else {
                let mult = at(&frame.generators[g].multiplier)?;
                m *= I * (mult * mode as f64);
            }
            k += 1;
        }
        let mut view = out.view_mut((row * n_s, col * n_s), (n_s, n_s));
        view += m;
    }
    Ok(out)
}

fn fiber_modes(l: &LimitOperator) -> Result<Vec<i64>, SpectralError> {
    match l.fiber_coords.as_slice() {
        [] => Ok(vec![0]),
        [c0] if c0.kind == CoordKind::Circle => {
            let on_fiber = l.op.terms().any(|(_, _, _, e)| e.depends_on(&c0.name));
            if on_fiber {
                Err(SpectralError::UnsupportedOrbit("coefficients varying along the fiber circle".into()))
            } else {
                Ok((-(NA_MODES as i64)..=NA_MODES as i64).collect())
            }
        }
        _ => Err(SpectralError::UnsupportedOrbit("fiber beyond one circle".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Trend {
    Bounded(f64),
    Decaying(f64),
    Unclear,
}

fn trend(sig: &[f64], scale: f64) -> Trend {
    let last = *sig.last().unwrap();
    let floor = 1e-3 * scale.max(1.0);
    let decreasing = sig.windows(2).all(|w| w[1] < w[0]);
    if last <= 1e-8 {
        return Trend::Decaying(last);
    }
    if decreasing && last < 0.7 * sig[0] {
        return Trend::Decaying(last);
    }
    let prev = sig[sig.len() - 2];
    if (last - prev).abs() <= 0.1 * last && last > floor {
        return Trend::Bounded(last);
    }
    Trend::Unclear
}

fn base_points(l: &LimitOperator) -> Vec<Vec<f64>> {
    if l.base_samples.is_empty() {
        vec![l.base_coords.iter().map(|_| 0.0).collect()]
    } else {
        l.base_samples.clone()
    }
}

pub(crate) fn is_invertible(
    l: &LimitOperator,
    lambda: Complex64,
    res: &SpectralResolution,
) -> Result<InvertibilityReport, SpectralError> {
    let (dil, tr) = split_ghosts(l)?;
    let modes = fiber_modes(l)?;
    let bases = base_points(l);
    let mut report = InvertibilityReport::new(l, lambda, "finite-section");
    report.modes = Some(NA_MODES);
    report.base_samples = l.base_samples.len();
    // characters: translation acts as zero
    let mut margin = f64::INFINITY;
    let mut lower = f64::INFINITY;
    let mut points = 0;
    for base in &bases {
        let mut r = realizer(l, base.clone(), false);
        r.ghost_slots = vec![(dil, Some(0)), (tr, None)];
        r.k = 1;
        let (_, blocks, _) = blocks_at(&mut r, NA_MODES)?;
        for b in &blocks {
            let cert = certify_block(b, lambda, res);
            points += cert.points;
            match cert.outcome {
                BlockOutcome::Invertible { margin: m, lower_bound } => {
                    margin = margin.min(m);
                    lower = lower.min(lower_bound);
                }
                BlockOutcome::NotInvertible { xi, sigma } => {
                    report.outcome = Invertibility::NotInvertible {
                        witness: InvertibilityWitness {
                            xi,
                            mode: b.mode,
                            base: b.base.clone(),
                            sigma,
                            branch: Some("zeta=0".into()),
                        },
                    };
                    report.grid_points = points;
                    return Ok(report);
                }
                BlockOutcome::Indeterminate { reason } => {
                    report.outcome = Invertibility::Indeterminate { reason: format!("zeta=0 branch: {reason}") };
                    return Ok(report);
                }
            }
        }
    }
    // infinite-dimensional representations
    let scale = l.op.terms().map(|(_, _, _, e)| e.eval_at(&[]).map(f64::abs).unwrap_or(1.0)).fold(1.0, f64::max);
    let jobs: Vec<(Vec<f64>, i64, f64)> =
        bases.iter().flat_map(|b| modes.iter().flat_map(move |&k| [1.0, -1.0].map(|s| (b.clone(), k, s)))).collect();
    let results: Vec<Result<(Vec<f64>, i64, f64, Trend), SpectralError>> = jobs
        .par_iter()
        .map(|(b, k, s)| {
            let mut sig = Vec::new();
            for &bx in &BOXES {
                let m = section(l, b, *k, *s, bx, dil, tr)?;
                let n = m.nrows();
                sig.push(sigma_min_dense(&(m - CMat::identity(n, n) * lambda)));
            }
            Ok((b.clone(), *k, *s, trend(&sig, scale)))
        })
        .collect();
    let mut unclear = None;
    for r in results {
        let (b, k, s, t) = r?;
        match t {
            Trend::Bounded(v) => margin = margin.min(v),
            Trend::Decaying(v) => {
                report.outcome = Invertibility::NotInvertible {
                    witness: InvertibilityWitness {
                        xi: vec![],
                        mode: Some(k),
                        base: l.base_coords.iter().zip(&b).map(|(c, v)| (c.name.clone(), *v)).collect(),
                        sigma: v,
                        branch: Some(format!("zeta={}", if s > 0.0 { "+1" } else { "-1" })),
                    },
                };
                report.grid_points = points;
                return Ok(report);
            }
            Trend::Unclear => unclear = Some((k, s)),
        }
    }
    report.grid_points = points;
    report.outcome = match unclear {
        Some((k, s)) => {
            Invertibility::Indeterminate { reason: format!("finite sections inconclusive at mode {k}, zeta={s:+}") }
        }
        None => Invertibility::Invertible { margin, lower_bound: lower.min(margin) },
    };
    Ok(report)
}

pub(crate) fn spectrum_ranges(
    l: &LimitOperator,
    window: (f64, f64),
    res: &SpectralResolution,
) -> Result<Vec<RawRange>, SpectralError> {
    let (dil, tr) = split_ghosts(l)?;
    let modes = fiber_modes(l)?;
    let wabs = window.0.abs().max(window.1.abs());
    let mut out = Vec::new();
    for base in base_points(l) {
        let mut r = realizer(l, base.clone(), false);
        r.ghost_slots = vec![(dil, Some(0)), (tr, None)];
        r.k = 1;
        let (_, blocks, _) = blocks_at(&mut r, NA_MODES)?;
        let mut bottom = f64::INFINITY;
        for b in &blocks {
            for br in block_ranges(b, wabs, res) {
                if let BranchRange::Interval { lo, .. } = &br {
                    bottom = bottom.min(*lo);
                }
                out.push(RawRange::from_branch(br, Status::Approximate, &l.stratum));
            }
        }
        // bound states of the zeta = ±1 sections below the character range
        for &k in &modes {
            for s in [1.0, -1.0] {
                let mut sets = Vec::new();
                for &bx in &BOXES[1..] {
                    let m = section(l, &base, k, s, bx, dil, tr)?;
                    if !is_hermitian(&m) {
                        sets.clear();
                        break;
                    }
                    sets.push(hermitian_spectrum(&m));
                }
                if sets.len() == 2 {
                    for e in &sets[1] {
                        if *e < bottom - 5e-2
                            && *e >= window.0
                            && *e <= window.1
                            && sets[0].iter().any(|f| (f - e).abs() < 5e-2)
                        {
                            out.push(RawRange {
                                lo: *e,
                                hi: *e,
                                tol: 5e-2,
                                status: Status::Approximate,
                                complex: vec![],
                                source: l.stratum.clone(),
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
