//! Brute-force validation: finite differences on truncated charts,
//! smallest singular values across growing boxes, and persistent
//! eigenvalues.
//!
//! Nothing here uses limit operators or symbols. Coordinates are
//! straightened so that every frame generator becomes a plain derivative
//! times a coefficient: `s = logit(x)` on b-intervals, `s = log x` on
//! collars, the identity on lines, periodic angles on circles.

pub mod band;

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calculus::{DiffOp, Status};
use crate::geometry::CoordKind;
use crate::opdsl::canon::Canon;
use crate::opdsl::expr::Compiled;
use crate::spectral::{RawRange, SpectrumApprox};

pub use band::{count_below, sigma_min, BandLu, HermBand, Sparse};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("discretization supports 1 or 2 chart dimensions, got {0}")]
    Dimension(usize),
    #[error("grid too coarse: axis {axis} has {points} points, order {order} needs at least {}", order + 1)]
    TooCoarse { axis: String, points: usize, order: u32 },
    #[error("coefficient evaluation failed: {0}")]
    Eval(String),
    #[error("need at least 3 increasing box sizes")]
    Boxes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bc {
    Dirichlet,
    Periodic,
}

impl std::fmt::Display for Bc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Bc::Dirichlet => "dirichlet",
            Bc::Periodic => "periodic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    /// Step in the straightened non-periodic coordinates.
    pub h: f64,
    /// Truncation: `[-L, L]` on lines and b-intervals, `[-L, 0]` on collars.
    pub half_width: f64,
    pub circle_points: usize,
    pub bc: Bc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub kind: CoordKind,
    /// Straightened coordinate of the grid points.
    pub s: Vec<f64>,
    pub step: f64,
    pub periodic: bool,
}

impl Axis {
    fn chart(&self, s: f64) -> f64 {
        match self.kind {
            CoordKind::Line | CoordKind::Circle => s,
            CoordKind::UnitInterval => 1.0 / (1.0 + (-s).exp()),
            CoordKind::Collar => s.exp(),
        }
    }

    /// `dx/ds`.
    fn jacobian(&self, s: f64) -> f64 {
        match self.kind {
            CoordKind::Line | CoordKind::Circle => 1.0,
            CoordKind::UnitInterval => {
                let x = self.chart(s);
                x * (1.0 - x)
            }
            CoordKind::Collar => s.exp(),
        }
    }

    /// Storage position of grid index `k`; periodic axes are folded so
    /// the wrap-around coupling stays inside a narrow band.
    fn position(&self, k: usize) -> usize {
        let n = self.s.len();
        if !self.periodic || n < 3 {
            return k;
        }
        if k < n.div_ceil(2) {
            2 * k
        } else {
            2 * (n - 1 - k) + 1
        }
    }

    fn neighbour(&self, k: usize, d: isize) -> Option<usize> {
        let n = self.s.len() as isize;
        let j = k as isize + d;
        if (0..n).contains(&j) {
            Some(j as usize)
        } else if self.periodic {
            Some(j.rem_euclid(n) as usize)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct Discretization {
    pub axes: Vec<Axis>,
    /// Matrix size `N` of the operator.
    pub size: usize,
    pub h: f64,
    pub half_width: f64,
    pub bc: Bc,
    pub substitutions: Vec<String>,
    pub matrix: Sparse,
    /// Largest magnitude of a derivative-term coefficient on the grid.
    pub scale: f64,
    /// Largest change of an order-zero coefficient between neighbouring
    /// grid points.
    pub jump: f64,
}

impl Discretization {
    pub fn points(&self) -> usize {
        self.axes.iter().map(|a| a.s.len()).product()
    }

    pub fn is_hermitian(&self) -> bool {
        self.matrix.hermitian_defect() <= 1e-10
    }

    /// Shift of the low end of the spectrum caused by the box: the lowest
    /// Dirichlet mode of `-d^2/ds^2` summed over the open axes.
    pub fn box_resolution(&self) -> f64 {
        self.axes
            .iter()
            .filter(|a| a.kind != CoordKind::Circle)
            .map(|a| (PI / (a.step * (a.s.len() + 1) as f64)).powi(2))
            .sum()
    }

    /// Discretization-error estimate: `C h^2 scale` with `C = 10` for the
    /// stencils, plus half a jump for sampling the order-zero part.
    pub fn error_estimate(&self) -> f64 {
        10.0 * self.h * self.h * self.scale.max(1.0) + 0.5 * self.jump
    }

    /// Unknown index of the grid multi-index `idx` and component `c`.
    pub fn index(&self, idx: &[usize], c: usize) -> usize {
        let mut flat = 0;
        for (a, &k) in self.axes.iter().zip(idx) {
            flat = flat * a.s.len() + a.position(k);
        }
        flat * self.size + c
    }

    /// Chart coordinates of every grid point, in multi-index order.
    pub fn grid(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        let total = self.points();
        (0..total)
            .map(|mut f| {
                let mut idx = vec![0; self.axes.len()];
                for a in (0..self.axes.len()).rev() {
                    let n = self.axes[a].s.len();
                    idx[a] = f % n;
                    f /= n;
                }
                let x = idx.iter().zip(&self.axes).map(|(&k, ax)| ax.chart(ax.s[k])).collect();
                (idx, x)
            })
            .collect()
    }
}

fn axis_for(kind: CoordKind, name: &str, p: &GridParams) -> Axis {
    let periodic = kind == CoordKind::Circle || p.bc == Bc::Periodic;
    match kind {
        CoordKind::Circle => {
            let n = p.circle_points;
            Axis {
                name: name.into(),
                kind,
                s: (0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect(),
                step: 2.0 * PI / n as f64,
                periodic,
            }
        }
        _ => {
            let (lo, len) = match kind {
                CoordKind::Collar => (-p.half_width, p.half_width),
                _ => (-p.half_width, 2.0 * p.half_width),
            };
            let m = (len / p.h).round() as usize;
            let h = len / m as f64;
            let s = if periodic {
                (0..m).map(|k| lo + k as f64 * h).collect()
            } else {
                (1..m).map(|k| lo + k as f64 * h).collect()
            };
            Axis { name: name.into(), kind, s, step: h, periodic }
        }
    }
}

/// One generator as `f(point) d/ds_axis`.
struct GenOp {
    axis: usize,
    factor: Compiled,
    /// `factor` is already divided by the chart jacobian.
    straightened: bool,
}

/// `dx/ds` as a polynomial in the chart coordinate `x`.
fn jacobian_symbol(kind: CoordKind, x: &str) -> Option<Canon> {
    match kind {
        CoordKind::UnitInterval => Some(Canon::var(x).mul(&Canon::one().sub(&Canon::var(x)))),
        CoordKind::Collar => Some(Canon::var(x)),
        CoordKind::Line | CoordKind::Circle => None,
    }
}

/// Second-order centered differences for every frame generator, with
/// adjacent repeated generators in compact flux form.
pub fn discretize(p: &DiffOp, params: &GridParams) -> Result<Discretization, OracleError> {
    let space = &p.frame.space;
    let coords = &space.coords;
    if coords.is_empty() || coords.len() > 2 {
        return Err(OracleError::Dimension(coords.len()));
    }
    let axes: Vec<Axis> = coords.iter().map(|c| axis_for(c.kind, &c.name, params)).collect();
    for a in &axes {
        if a.s.len() < p.order as usize + 1 {
            return Err(OracleError::TooCoarse { axis: a.name.clone(), points: a.s.len(), order: p.order });
        }
    }
    let names: Vec<&str> = coords.iter().map(|c| c.name.as_str()).collect();
    let compile = |e: &crate::opdsl::canon::Canon| e.to_expr().compile(&names).map_err(OracleError::Eval);
    let gens: Vec<GenOp> = p
        .frame
        .generators
        .iter()
        .map(|g| {
            let axis = coords.iter().position(|c| c.name == g.var).expect("generator variable is a chart coordinate");
            // dividing symbolically avoids 0/0 where the chart saturates
            let ratio = jacobian_symbol(coords[axis].kind, &g.var).and_then(|j| g.multiplier.div(&j).ok());
            Ok(match ratio {
                Some(q) => GenOp { axis, factor: compile(&q)?, straightened: true },
                None => GenOp { axis, factor: compile(&g.multiplier)?, straightened: false },
            })
        })
        .collect::<Result<_, OracleError>>()?;
    let substitutions = axes
        .iter()
        .filter_map(|a| match a.kind {
            CoordKind::UnitInterval => Some(format!("{0} = 1/(1+exp(-s_{0}))", a.name)),
            CoordKind::Collar => Some(format!("{0} = exp(s_{0})", a.name)),
            _ => None,
        })
        .collect();
    let mut d = Discretization {
        axes,
        size: p.size,
        h: params.h,
        half_width: params.half_width,
        bc: params.bc,
        substitutions,
        matrix: Sparse::zeros(0),
        scale: 0.0,
        jump: 0.0,
    };
    let grid = d.grid();
    let npts = grid.len();
    let pos: Vec<usize> = grid.iter().map(|(idx, _)| flat(&d, idx)).collect();
    let at = |x: &[f64]| x.to_vec();
    // factor f of generator g at a grid point displaced by `ds` along its axis
    let factor = |g: &GenOp, idx: &[usize], ds: f64| -> f64 {
        let mut x: Vec<f64> = idx.iter().zip(&d.axes).map(|(&k, ax)| ax.chart(ax.s[k])).collect();
        let ax = &d.axes[g.axis];
        let s = ax.s[idx[g.axis]] + ds;
        x[g.axis] = ax.chart(s);
        if g.straightened {
            g.factor.eval(&at(&x))
        } else {
            g.factor.eval(&at(&x)) / ax.jacobian(s)
        }
    };
    // scalar (grid-point) operators per generator and per repeated pair
    let first = |g: &GenOp| -> Sparse {
        let ax = &d.axes[g.axis];
        let mut m = Sparse::zeros(npts);
        for (i, (idx, _)) in grid.iter().enumerate() {
            let f = factor(g, idx, 0.0);
            for (dir, w) in [(1isize, 0.5), (-1, -0.5)] {
                if let Some(k) = ax.neighbour(idx[g.axis], dir) {
                    let mut j = idx.clone();
                    j[g.axis] = k;
                    m.add_to(pos[i], flat(&d, &j), Complex64::new(f * w / ax.step, 0.0));
                }
            }
        }
        m
    };
    let pair = |g: &GenOp| -> Sparse {
        let ax = &d.axes[g.axis];
        let h2 = ax.step * ax.step;
        let mut m = Sparse::zeros(npts);
        for (i, (idx, _)) in grid.iter().enumerate() {
            let f = factor(g, idx, 0.0);
            let fp = factor(g, idx, 0.5 * ax.step);
            let fm = factor(g, idx, -0.5 * ax.step);
            m.add_to(pos[i], pos[i], Complex64::new(-f * (fp + fm) / h2, 0.0));
            for (dir, fh) in [(1isize, fp), (-1, fm)] {
                if let Some(k) = ax.neighbour(idx[g.axis], dir) {
                    let mut j = idx.clone();
                    j[g.axis] = k;
                    m.add_to(pos[i], flat(&d, &j), Complex64::new(f * fh / h2, 0.0));
                }
            }
        }
        m
    };
    let singles: Vec<Sparse> = gens.iter().map(first).collect();
    let pairs: Vec<Sparse> = gens.iter().map(pair).collect();
    let n = p.size;
    let mut total = Sparse::zeros(npts * n);
    let mut scale: f64 = 0.0;
    let mut jump: f64 = 0.0;
    for (row, col, word, coeff) in p.terms() {
        let c = compile(coeff)?;
        let mut vals = vec![Complex64::new(0.0, 0.0); npts];
        for ((_, x), &q) in grid.iter().zip(&pos) {
            vals[q] = Complex64::new(c.eval(x), 0.0);
        }
        if word.is_empty() {
            for (i, (idx, _)) in grid.iter().enumerate() {
                for (a, ax) in d.axes.iter().enumerate() {
                    if let Some(k) = ax.neighbour(idx[a], 1) {
                        let mut j = idx.clone();
                        j[a] = k;
                        jump = jump.max((vals[pos[i]] - vals[flat(&d, &j)]).norm());
                    }
                }
            }
        } else {
            scale = vals.iter().map(|v| v.norm()).fold(scale, f64::max);
        }
        let mut m = Sparse::diagonal(&vals);
        let mut k = 0;
        while k < word.len() {
            if word.get(k + 1) == Some(&word[k]) {
                m = m.mul(&pairs[word[k]]);
                k += 2;
            } else {
                m = m.mul(&singles[word[k]]);
                k += 1;
            }
        }
        for (i, r) in m.rows.iter().enumerate() {
            for (&j, &v) in r {
                total.add_to(i * n + row, j * n + col, v);
            }
        }
    }
    if !scale.is_finite() || !jump.is_finite() {
        return Err(OracleError::Eval("coefficient not finite on the grid".into()));
    }
    d.matrix = total;
    d.scale = scale;
    d.jump = jump;
    Ok(d)
}

fn flat(d: &Discretization, idx: &[usize]) -> usize {
    d.index(idx, 0) / d.size
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    BoundedBelow,
    Decaying,
    Unclear,
}

impl std::fmt::Display for Trend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Trend::BoundedBelow => "BoundedBelow",
            Trend::Decaying => "Decaying",
            Trend::Unclear => "Unclear",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub trend: Trend,
    pub lambda: [f64; 2],
    pub h: f64,
    pub bc: Bc,
    pub boxes: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub error_estimate: f64,
    /// Level below which `sigma_min` counts as decayed.
    pub floor: f64,
    pub hermitian: bool,
}

/// Oracle resolution: grid step, truncation boxes and boundary conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub h: f64,
    pub boxes: Vec<f64>,
    /// Grid step and boxes for conditioning trends. Larger boxes than the
    /// spectrum ones: inside continuous spectrum `sigma_min` only falls like
    /// the eigenvalue spacing.
    pub trend_h: f64,
    pub trend_boxes: Vec<f64>,
    pub circle_points: usize,
    pub bcs: Vec<Bc>,
    /// Persistence tolerance.
    pub tol: f64,
}

impl OracleParams {
    /// Defaults by the number of non-periodic chart directions.
    pub fn for_operator(p: &DiffOp) -> OracleParams {
        let open = p.frame.space.coords.iter().filter(|c| c.kind != CoordKind::Circle).count();
        let (h, boxes, trend_h, trend_boxes) = match open {
            0 | 1 if p.frame.space.coords.len() == 1 => (0.01, vec![40.0, 60.0, 80.0], 0.02, vec![80.0, 160.0, 320.0]),
            1 => (0.05, vec![10.0, 15.0, 20.0], 0.05, vec![10.0, 20.0, 40.0]),
            _ => (0.2, vec![3.0, 4.5, 6.0], 0.1, vec![3.0, 4.5, 6.0]),
        };
        OracleParams {
            h,
            boxes,
            trend_h,
            trend_boxes,
            circle_points: 16,
            bcs: vec![Bc::Dirichlet, Bc::Periodic],
            tol: 5e-2,
        }
    }

    fn grid(&self, box_: f64, bc: Bc) -> GridParams {
        GridParams { h: self.h, half_width: box_, circle_points: self.circle_points, bc }
    }

    fn trend_grid(&self, box_: f64) -> GridParams {
        GridParams { h: self.trend_h, half_width: box_, circle_points: self.circle_points, bc: Bc::Dirichlet }
    }
}

/// Smallest singular values of the truncations of `p - lambda` over growing
/// boxes (Dirichlet), and their trend.
pub fn conditioning_trend(p: &DiffOp, lambda: Complex64, params: &OracleParams) -> Result<TrendReport, OracleError> {
    let boxes = &params.trend_boxes;
    if boxes.len() < 3 || boxes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(OracleError::Boxes);
    }
    let discs: Vec<Discretization> =
        boxes.par_iter().map(|&b| discretize(p, &params.trend_grid(b))).collect::<Result<_, _>>()?;
    let sigmas: Vec<f64> = discs.par_iter().map(|d| sigma_min(&d.matrix.shift(lambda), 7)).collect();
    let largest = discs.last().unwrap();
    let est = largest.error_estimate();
    let hermitian = discs.iter().all(Discretization::is_hermitian);
    // inside continuous spectrum sigma_min of a box is at most half the
    // local eigenvalue spacing, which bounds how far it can fall
    let spacing = if hermitian && lambda.im == 0.0 {
        let a = HermBand::new(&largest.matrix);
        let count = a.count_below(lambda.re + params.tol) - a.count_below(lambda.re - params.tol);
        if count > 0 {
            2.0 * params.tol / count as f64
        } else {
            0.0
        }
    } else {
        0.0
    };
    let floor = est.max(spacing);
    Ok(TrendReport {
        trend: classify(&sigmas, floor),
        lambda: [lambda.re, lambda.im],
        h: params.trend_h,
        bc: Bc::Dirichlet,
        boxes: boxes.clone(),
        sigmas,
        error_estimate: est,
        floor,
        hermitian,
    })
}

/// BoundedBelow: stabilizes (within 10% over the last box step) above
/// `floor`. Decaying: ends below `floor` after a monotone fall (or two
/// consecutive boxes below it).
pub fn classify(sigmas: &[f64], floor: f64) -> Trend {
    let n = sigmas.len();
    let (last, prev) = (sigmas[n - 1], sigmas[n - 2]);
    if last > floor && (last - prev).abs() <= 0.1 * last {
        return Trend::BoundedBelow;
    }
    let monotone = sigmas.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9));
    if last <= floor && (monotone || prev <= floor) {
        return Trend::Decaying;
    }
    Trend::Unclear
}

const EIG_CAP: usize = 1000;
const GAP_FACTOR: f64 = 4.0;

/// Eigenvalues of a Hermitian truncation inside `[a, b]`, by bisection on
/// inertia, at most `cap` of them.
pub fn eigenvalues_in(a: &HermBand, window: (f64, f64), cap: usize, tol: f64) -> Vec<f64> {
    let chunks = 4 * rayon::current_num_threads();
    let edges: Vec<f64> = (0..=chunks).map(|k| window.0 + (window.1 - window.0) * k as f64 / chunks as f64).collect();
    let counts: Vec<usize> = edges.par_iter().map(|&x| a.count_below(x)).collect();
    let mut out: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| bisect(a, (edges[c], edges[c + 1]), (counts[c], counts[c + 1]), tol))
        .collect();
    out.sort_by(|x, y| x.partial_cmp(y).unwrap());
    out.truncate(cap);
    out
}

fn bisect(a: &HermBand, window: (f64, f64), counts: (usize, usize), tol: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut stack = vec![(window.0, window.1, counts.0, counts.1)];
    while let Some((lo, hi, cl, ch)) = stack.pop() {
        if ch == cl {
            continue;
        }
        if hi - lo <= tol {
            for _ in cl..ch {
                out.push(0.5 * (lo + hi));
            }
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let cm = a.count_below(mid);
        stack.push((mid, hi, cm, ch));
        stack.push((lo, mid, cl, cm));
    }
    out
}

/// Eigenvalues of the reference truncation that every other truncation
/// reproduces, each within its own slack `tol + box resolution`; runs of
/// survivors closer than `GAP_FACTOR` times the reference slack become
/// intervals. The lowest interval also carries the drift of its bottom
/// against the next smaller box, extrapolated as if the bottom converged
/// like `1/box`.
fn persistent_eigenvalues(
    discs: &[Discretization],
    bands: &[HermBand],
    reference: usize,
    previous: Option<usize>,
    window: (f64, f64),
    tol: f64,
) -> Vec<RawRange> {
    let precision = tol / 20.0;
    let slack: Vec<f64> = discs.iter().map(|d| tol + d.box_resolution()).collect();
    let eig: Vec<Vec<f64>> = bands
        .iter()
        .zip(&slack)
        .map(|(a, &g)| {
            let reach = 2.0 * GAP_FACTOR * g;
            eigenvalues_in(a, (window.0 - reach, window.1 + reach), usize::MAX, precision)
        })
        .collect();
    let mut raw = runs(&eig, &slack, reference, window);
    if let (Some(prev), Some(first)) =
        (previous, raw.iter_mut().filter(|r| r.hi > r.lo).min_by(|a, b| a.lo.total_cmp(&b.lo)))
    {
        if let Some(other) =
            runs(&eig, &slack, prev, window).iter().filter(|r| r.hi > r.lo).map(|r| r.lo).reduce(f64::min)
        {
            let (b, bp) = (discs[reference].half_width, discs[prev].half_width);
            first.tol += (first.lo - other).abs() * bp / (b - bp);
        }
    }
    raw
}

fn runs(eig: &[Vec<f64>], slack: &[f64], reference: usize, window: (f64, f64)) -> Vec<RawRange> {
    let own: Vec<f64> = eig[reference].iter().copied().filter(|e| (window.0..=window.1).contains(e)).collect();
    let keep: Vec<bool> =
        own.iter().map(|&e| (0..eig.len()).all(|c| c == reference || reproduces(&eig[c], e, slack[c]))).collect();
    let item_tol = slack[reference];
    let mut raw = Vec::new();
    let mut k = 0;
    while k < own.len() {
        if !keep[k] {
            k += 1;
            continue;
        }
        let start = k;
        k += 1;
        while k < own.len() && keep[k] && own[k] - own[k - 1] <= GAP_FACTOR * item_tol {
            k += 1;
        }
        raw.push(RawRange {
            lo: own[start],
            hi: own[k - 1],
            tol: item_tol,
            status: Status::Approximate,
            complex: vec![],
            source: "oracle".into(),
        });
    }
    raw
}

/// The sorted eigenvalues `eig` come within `tol` of `e`, or two of them at
/// most `2 GAP_FACTOR tol` apart bracket `e`.
fn reproduces(eig: &[f64], e: f64, tol: f64) -> bool {
    let k = eig.partition_point(|&x| x < e);
    let below = k.checked_sub(1).map(|i| eig[i]);
    let above = eig.get(k).copied();
    let near = |x: Option<f64>| x.is_some_and(|x| (x - e).abs() <= tol);
    if near(below) || near(above) {
        return true;
    }
    matches!((below, above), (Some(a), Some(b)) if b - a <= 2.0 * GAP_FACTOR * tol)
}

/// The `k`-th eigenvalue (from zero) of `a`, known to lie in `range`.
fn kth_eigenvalue(a: &HermBand, k: usize, range: (f64, f64), precision: f64) -> f64 {
    let (mut lo, mut hi) = range;
    while hi - lo > precision {
        let mid = 0.5 * (lo + hi);
        if a.count_below(mid) > k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Bins holding spectrum of the reference truncation (by inertia counts, or
/// near-singularity when not self-adjoint) where every other truncation is
/// within one bin.
fn persistent_bins(
    discs: &[Discretization],
    bands: Option<&[HermBand]>,
    reference: usize,
    edges: &[f64],
    tol: f64,
) -> Vec<RawRange> {
    let nbins = edges.len() - 1;
    let centers: Vec<f64> = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let presence: Vec<Vec<bool>> = discs
        .iter()
        .enumerate()
        .map(|(c, d)| {
            if let Some(bands) = bands {
                let c: Vec<usize> = edges.par_iter().map(|&m| bands[c].count_below(m)).collect();
                c.windows(2).map(|w| w[1] > w[0]).collect()
            } else {
                centers
                    .par_iter()
                    .map(|&m| sigma_min(&d.matrix.shift(Complex64::new(m, 0.0)), 3) <= 0.5 * tol)
                    .collect()
            }
        })
        .collect();
    let near = |c: usize, k: usize| {
        let lo = k.saturating_sub(1);
        let hi = (k + 1).min(nbins - 1);
        (lo..=hi).any(|j| presence[c][j])
    };
    let mut raw = Vec::new();
    let mut k = 0;
    while k < nbins {
        if !(presence[reference][k] && (0..discs.len()).all(|c| near(c, k))) {
            k += 1;
            continue;
        }
        let start = k;
        while k < nbins && presence[reference][k] && (0..discs.len()).all(|c| near(c, k)) {
            k += 1;
        }
        // the extreme reference eigenvalues inside the end bins
        let (lo, hi) = match bands {
            Some(bands) => {
                let a = &bands[reference];
                let (lo, hi) = (edges[start], edges[k]);
                let (n_lo, n_hi) = (a.count_below(lo), a.count_below(hi));
                (kth_eigenvalue(a, n_lo, (lo, hi), tol / 1000.0), kth_eigenvalue(a, n_hi - 1, (lo, hi), tol / 1000.0))
            }
            None => (edges[start], edges[k]),
        };
        raw.push(RawRange { lo, hi, tol, status: Status::Approximate, complex: vec![], source: "oracle".into() });
    }
    raw
}

/// Persistent spectrum across boxes and boundary conditions.
pub fn ess_spectrum_oracle(
    p: &DiffOp,
    window: (f64, f64),
    params: &OracleParams,
) -> Result<SpectrumApprox, OracleError> {
    let configs: Vec<(f64, Bc)> = params.boxes.iter().flat_map(|&b| params.bcs.iter().map(move |&c| (b, c))).collect();
    let discs: Vec<Discretization> =
        configs.par_iter().map(|&(b, c)| discretize(p, &params.grid(b, c))).collect::<Result<_, _>>()?;
    let tol = params.tol;
    let nbins = ((window.1 - window.0) / tol).ceil().max(1.0) as usize;
    let edges: Vec<f64> = (0..=nbins).map(|k| (window.0 + k as f64 * tol).min(window.1)).collect();
    let hermitian = discs.iter().all(Discretization::is_hermitian);
    let mut notes = vec![format!(
        "finite differences, h = {}, boxes {:?}, boundary conditions {:?}",
        params.h, params.boxes, params.bcs
    )];
    let reference = configs.iter().position(|&(b, c)| b == *params.boxes.last().unwrap() && c == Bc::Dirichlet);
    let reference = reference.unwrap_or(configs.len() - 1);
    let raw = if hermitian {
        let bands: Vec<HermBand> = discs.par_iter().map(|d| HermBand::new(&d.matrix)).collect();
        let a = &bands[reference];
        if a.count_below(window.1) - a.count_below(window.0) > EIG_CAP {
            persistent_bins(&discs, Some(&bands), reference, &edges, tol)
        } else {
            let previous = configs
                .iter()
                .enumerate()
                .filter(|(_, &(b, c))| c == Bc::Dirichlet && b < configs[reference].0)
                .max_by(|x, y| x.1 .0.total_cmp(&y.1 .0))
                .map(|(i, _)| i);
            persistent_eigenvalues(&discs, &bands, reference, previous, window, tol)
        }
    } else {
        notes.push("non-self-adjoint discretization: indicative only".into());
        persistent_bins(&discs, None, reference, &edges, tol)
    };
    let mut s = SpectrumApprox::from_raw(raw, window, notes);
    // reaching the window edge means the persistent set continues
    for it in &mut s.items {
        let open = it.hi > it.lo;
        if open && it.hi >= window.1 - GAP_FACTOR * it.tol {
            it.hi = window.1;
            it.extends_above = true;
        }
        if open && it.lo <= window.0 + GAP_FACTOR * it.tol {
            it.lo = window.0;
            it.extends_below = true;
        }
    }
    s.status = Status::Approximate;
    Ok(s)
}

/// CSV rows `box,h,bc,sigma_min` of a trend report.
pub fn trend_csv(r: &TrendReport) -> String {
    let mut out = String::from("box,h,bc,sigma_min\n");
    for (b, s) in r.boxes.iter().zip(&r.sigmas) {
        let _ = writeln!(out, "{b},{},{},{s:.12e}", r.h, r.bc);
    }
    out
}

/// CSV rows `box,h,bc,eigenvalues` (space separated, inside the window).
pub fn spectrum_csv(p: &DiffOp, window: (f64, f64), params: &OracleParams, cap: usize) -> Result<String, OracleError> {
    let mut out = String::from("box,h,bc,eigenvalues\n");
    for &b in &params.boxes {
        for &bc in &params.bcs {
            let d = discretize(p, &params.grid(b, bc))?;
            let eig =
                if d.is_hermitian() { eigenvalues_in(&HermBand::new(&d.matrix), window, cap, 1e-9) } else { vec![] };
            let list: Vec<String> = eig.iter().map(|v| format!("{v:.9}")).collect();
            let _ = writeln!(out, "{b},{},{bc},{}", params.h, list.join(" "));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::calculus::{Frame, Term};
    use crate::geometry::*;
    use crate::opdsl::canon::Canon;
    use crate::opdsl::expr::parse_expr;

    fn canon(s: &str) -> Canon {
        Canon::from_expr(&parse_expr(s).unwrap()).unwrap()
    }

    fn op(space: StratifiedSpace, order: u32, terms: &[(&str, &[usize])]) -> DiffOp {
        let frame = Arc::new(Frame::from_space(&space).unwrap());
        let t = terms.iter().map(|(c, w)| Term { row: 0, col: 0, coeff: canon(c), word: w.to_vec() }).collect();
        DiffOp::from_terms(frame, order, 1, t, false).unwrap()
    }

    #[test]
    fn laplacian_stencil() {
        let p = op(build_scattering_space(1).unwrap(), 2, &[("-1", &[0, 0])]);
        let d = discretize(&p, &GridParams { h: 0.5, half_width: 2.0, circle_points: 8, bc: Bc::Dirichlet }).unwrap();
        assert_eq!(d.matrix.n, 7);
        assert_eq!(d.matrix.get(3, 3), Complex64::new(8.0, 0.0));
        assert_eq!(d.matrix.get(3, 4), Complex64::new(-4.0, 0.0));
        assert_eq!(d.matrix.nnz(), 7 + 2 * 6);
        assert!(d.is_hermitian());
    }

    #[test]
    fn b_generator_is_plain_derivative_in_log_coordinates() {
        let p = op(build_b_space(&[Shape::Interval]).unwrap(), 2, &[("1", &[0, 0])]);
        let d = discretize(&p, &GridParams { h: 0.5, half_width: 2.0, circle_points: 8, bc: Bc::Dirichlet }).unwrap();
        assert!((d.matrix.get(3, 3).re + 8.0).abs() < 1e-12);
        assert!((d.matrix.get(3, 2).re - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cylinder_kronecker_sum() {
        let space = build_b_space(&[Shape::Interval, Shape::Circle]).unwrap();
        let p = op(space, 2, &[("-1", &[0, 0]), ("-1", &[1, 1])]);
        let g = GridParams { h: 0.5, half_width: 2.0, circle_points: 8, bc: Bc::Dirichlet };
        let d = discretize(&p, &g).unwrap();
        assert_eq!(d.matrix.n, 7 * 8);
        let h2 = (2.0 * PI / 8.0f64).powi(2);
        let i = d.index(&[3, 0], 0);
        assert!((d.matrix.get(i, i).re - (8.0 + 2.0 / h2)).abs() < 1e-9);
        // periodic neighbour across theta = 0
        let j = d.index(&[3, 7], 0);
        assert!((d.matrix.get(i, j).re + 1.0 / h2).abs() < 1e-9);
        assert!(d.is_hermitian());
    }

    #[test]
    fn periodic_folding_keeps_band_narrow() {
        let p = op(build_scattering_space(1).unwrap(), 2, &[("-1", &[0, 0]), ("1", &[])]);
        let d = discretize(&p, &GridParams { h: 0.1, half_width: 5.0, circle_points: 8, bc: Bc::Periodic }).unwrap();
        assert_eq!(d.matrix.bandwidths(), (2, 2));
        // spectrum of the periodic Laplacian: 1 + (4/h^2) sin^2(pi k / n)
        assert_eq!(count_below(&d.matrix, 1.0 - 1e-9), 0);
        assert_eq!(count_below(&d.matrix, 1.0 + 1e-9), 1);
    }

    #[test]
    fn trend_examples() {
        let p = op(build_scattering_space(1).unwrap(), 2, &[("-1", &[0, 0]), ("2 + tanh(t)", &[])]);
        let prm = OracleParams::for_operator(&p);
        let r = conditioning_trend(&p, Complex64::new(0.0, 0.0), &prm).unwrap();
        assert_eq!(r.trend, Trend::BoundedBelow, "{r:?}");
        let r = conditioning_trend(&p, Complex64::new(2.0, 0.0), &prm).unwrap();
        assert_eq!(r.trend, Trend::Decaying, "{r:?}");
        let id = op(build_scattering_space(1).unwrap(), 0, &[("1", &[])]);
        let r = conditioning_trend(&id, Complex64::new(0.25, 0.0), &OracleParams::for_operator(&id)).unwrap();
        assert_eq!(r.trend, Trend::BoundedBelow);
        assert!((r.sigmas[2] - 0.75).abs() < 1e-9);
        assert!(trend_csv(&r).lines().count() == 4);
    }

    #[test]
    fn persistent_spectra() {
        let p = op(build_scattering_space(1).unwrap(), 2, &[("-1", &[0, 0]), ("2 + tanh(t)", &[])]);
        let s = ess_spectrum_oracle(&p, (-1.0, 3.0), &OracleParams::for_operator(&p)).unwrap();
        assert_eq!(s.items.len(), 1, "{s:?}");
        assert!((s.items[0].lo - 1.0).abs() < 5e-2, "{s:?}");
        assert!(s.items[0].extends_above);
        let m = op(build_scattering_space(1).unwrap(), 0, &[("tanh(t)", &[])]);
        let s = ess_spectrum_oracle(&m, (-2.0, 2.0), &OracleParams::for_operator(&m)).unwrap();
        assert_eq!(s.items.len(), 1, "{s:?}");
        assert!((s.items[0].lo + 1.0).abs() < 5e-2 && (s.items[0].hi - 1.0).abs() < 5e-2, "{s:?}");
    }

    /// Max error of the stencil on `u` over chart points where `inside` holds.
    fn stencil_error(p: &DiffOp, u: &Canon, h: f64, half: f64, inside: &dyn Fn(&[f64]) -> bool) -> f64 {
        let d = discretize(p, &GridParams { h, half_width: half, circle_points: 32, bc: Bc::Dirichlet }).unwrap();
        let names = p.frame.coord_names();
        let pu = &p.apply(std::slice::from_ref(u))[0];
        let at = |c: &Canon, x: &[f64]| {
            let b: Vec<(&str, f64)> = names.iter().cloned().zip(x.iter().cloned()).collect();
            c.eval_at(&b).unwrap()
        };
        let grid = d.grid();
        let mut v = vec![Complex64::new(0.0, 0.0); d.matrix.n];
        for (idx, x) in &grid {
            v[d.index(idx, 0)] = Complex64::new(at(u, x), 0.0);
        }
        let w = d.matrix.matvec(&v);
        grid.iter()
            .filter(|(_, x)| inside(x))
            .map(|(idx, x)| (w[d.index(idx, 0)] - at(pu, x)).norm())
            .fold(0.0, f64::max)
    }

    fn random_functions(template: &str, seed: u64) -> Vec<Canon> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        (0..20)
            .map(|_| {
                let a = rng.gen_range(-8..=8) as f64 / 8.0;
                let b = rng.gen_range(1..=12) as f64 / 4.0;
                canon(&template.replace("A", &format!("({a})")).replace("B", &format!("({b})")))
            })
            .collect()
    }

    #[test]
    fn stencil_is_second_order_on_lines() {
        let p = op(build_scattering_space(1).unwrap(), 2, &[("-1", &[0, 0]), ("tanh(t)", &[0]), ("1/(1 + t^2)", &[])]);
        for u in random_functions("exp(-(t - A)^2)*cos(B*t)", 11) {
            let e1 = stencil_error(&p, &u, 0.04, 8.0, &|x| x[0].abs() < 3.0);
            let e2 = stencil_error(&p, &u, 0.02, 8.0, &|x| x[0].abs() < 3.0);
            assert!(e2 < 0.5 && (3.0..5.0).contains(&(e1 / e2)), "{u:?}: {e1} {e2}");
        }
    }

    #[test]
    fn stencil_is_second_order_on_b_intervals() {
        let p = op(build_b_space(&[Shape::Interval]).unwrap(), 2, &[("-1", &[0, 0]), ("x", &[0]), ("2", &[])]);
        for u in random_functions("x^2*(1 - x)^2*cos(B*x + A)", 12) {
            let e1 = stencil_error(&p, &u, 0.04, 12.0, &|x| x[0] > 0.05 && x[0] < 0.95);
            let e2 = stencil_error(&p, &u, 0.02, 12.0, &|x| x[0] > 0.05 && x[0] < 0.95);
            assert!(e2 < 1e-3 && (3.0..5.0).contains(&(e1 / e2)), "{u:?}: {e1} {e2}");
        }
    }

    #[test]
    fn discrete_commutator_matches_frame() {
        // [t d_t, d_t] = -d_t on sc(1), up to O(h^2) on smooth data
        let space = build_scattering_space(1).unwrap();
        let a = op(space.clone(), 1, &[("t", &[0])]);
        let b = op(space.clone(), 1, &[("1", &[0])]);
        let g = GridParams { h: 0.01, half_width: 6.0, circle_points: 8, bc: Bc::Dirichlet };
        let (da, db) = (discretize(&a, &g).unwrap(), discretize(&b, &g).unwrap());
        let grid = da.grid();
        let u: Vec<Complex64> = grid.iter().map(|(_, x)| Complex64::new((-x[0] * x[0]).exp(), 0.0)).collect();
        let mut v = vec![Complex64::new(0.0, 0.0); u.len()];
        for (k, (idx, _)) in grid.iter().enumerate() {
            v[da.index(idx, 0)] = u[k];
        }
        let ab = da.matrix.matvec(&db.matrix.matvec(&v));
        let ba = db.matrix.matvec(&da.matrix.matvec(&v));
        let dv = db.matrix.matvec(&v);
        for (idx, x) in &grid {
            if x[0].abs() < 3.0 {
                let i = da.index(idx, 0);
                assert!((ab[i] - ba[i] + dv[i]).norm() < 1e-3, "{x:?}");
            }
        }
    }

    #[test]
    fn symmetric_operators_have_real_spectrum() {
        let p = op(
            build_b_space(&[Shape::Interval, Shape::Circle]).unwrap(),
            2,
            &[("-1", &[0, 0]), ("-1", &[1, 1]), ("cos(th)", &[])],
        );
        let d = discretize(&p, &GridParams { h: 0.25, half_width: 4.0, circle_points: 8, bc: Bc::Dirichlet }).unwrap();
        assert!(d.is_hermitian());
        let n = d.matrix.n;
        let dense = nalgebra::DMatrix::from_fn(n, n, |i, j| d.matrix.get(i, j));
        let eig = crate::spectral::family::general_eigs(&dense);
        assert!(eig.iter().all(|z| z.im.abs() < 1e-8));
        let below = eig.iter().filter(|z| z.re < 2.0).count();
        assert_eq!(count_below(&d.matrix, 2.0), below);
    }
}
