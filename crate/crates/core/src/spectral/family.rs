//! Group-Fourier symbol families of limit operators with abelian ghost
//! groups, and the grid certificates built on them.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::Status;
use crate::geometry::{CoordKind, IsotropyGroup};
use crate::limits::LimitOperator;
use crate::opdsl::expr::Compiled;

use super::SpectralError;

pub const ZERO_TOL: f64 = 1e-10;
pub const DEFAULT_MODES: usize = 32;
pub const DEFAULT_GRID: usize = 4097;
pub const DEFAULT_GRID_2D: usize = 65;
/// Cross-section discretization of interval orbits: half-width and step in
/// the logarithmic coordinate.
pub const INTERVAL_HALF_WIDTH: f64 = 10.0;
pub const INTERVAL_STEP: f64 = 0.1;
/// Work budget for refining a certificate, in units of `dim^2` evaluations.
pub const REFINE_WORK: f64 = 2.0e6;

type CMat = DMatrix<Complex64>;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Resolution of the spectral computations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralResolution {
    /// Covariable grid points per axis for one covariable.
    pub grid_1d: usize,
    /// Covariable grid points per axis for two or more covariables.
    pub grid_2d: usize,
    /// Fourier modes `|k| <= modes` on circle orbits.
    pub modes: usize,
}

impl Default for SpectralResolution {
    fn default() -> Self {
        SpectralResolution { grid_1d: DEFAULT_GRID, grid_2d: DEFAULT_GRID_2D, modes: DEFAULT_MODES }
    }
}

/// How the compact orbit factor is represented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transverse {
    Trivial,
    /// Fourier modes `e^{ik v}`, `|k| <= modes`; `coupled` when coefficients
    /// vary along the circle.
    Fourier {
        coord: String,
        modes: usize,
        coupled: bool,
    },
    /// Interval orbit with b-ends and constant coefficients: its logarithmic
    /// coordinate contributes one more covariable.
    Covariable {
        coord: String,
    },
    /// Interval orbit sampled on a truncated logarithmic grid.
    Discretized {
        coord: String,
        points: usize,
        step: f64,
        half_width: f64,
    },
}

/// One direct summand of a family: `F(xi) = sum_alpha A_alpha xi^alpha`.
#[derive(Debug, Clone)]
pub struct Block {
    pub poly: Vec<(Vec<u32>, CMat)>,
    pub dim: usize,
    pub k: usize,
    pub degree: u32,
    pub mode: Option<i64>,
    pub base: Vec<(String, f64)>,
    pub hermitian: bool,
}

impl Block {
    pub fn eval(&self, xi: &[f64]) -> CMat {
        let mut out = CMat::zeros(self.dim, self.dim);
        for (alpha, a) in &self.poly {
            let w: f64 = alpha.iter().zip(xi).map(|(&p, &x)| x.powi(p as i32)).product();
            if w != 0.0 {
                out += a * c(w);
            }
        }
        out
    }

    fn norms_by_degree(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.degree as usize + 1];
        for (alpha, a) in &self.poly {
            let d: u32 = alpha.iter().sum();
            b[d as usize] += a.norm();
        }
        b
    }

    /// `min_omega sigma_min(A_top(omega))` over unit directions, inflated by
    /// the sampling Lipschitz bound.
    pub fn top_coercivity(&self) -> f64 {
        if self.degree == 0 {
            return f64::INFINITY;
        }
        let top: Vec<&(Vec<u32>, CMat)> =
            self.poly.iter().filter(|(a, _)| a.iter().sum::<u32>() == self.degree).collect();
        let eval_top = |w: &[f64]| {
            let mut m = CMat::zeros(self.dim, self.dim);
            for (alpha, a) in &top {
                let s: f64 = alpha.iter().zip(w).map(|(&p, &x)| x.powi(p as i32)).product();
                m += a.map(|z| z * c(s));
            }
            sigma_min(&m)
        };
        match self.k {
            0 => f64::INFINITY,
            1 => eval_top(&[1.0]).min(eval_top(&[-1.0])),
            _ => {
                let dirs = crate::calculus::cosphere_directions(self.k, 256);
                let min = dirs.iter().map(|w| eval_top(w)).fold(f64::INFINITY, f64::min);
                let lip: f64 = top.iter().map(|(_, a)| a.norm()).sum::<f64>() * self.degree as f64;
                let spacing = if self.k == 2 { 2.0 * PI / dirs.len() as f64 } else { 4.0 / (dirs.len() as f64).sqrt() };
                min - lip * spacing / 2.0
            }
        }
    }

    /// Radius beyond which `sigma_min(F(xi) - lambda) >= 1`, if the top part
    /// is coercive.
    pub fn coercivity_radius(&self, lambda_abs: f64) -> Option<f64> {
        if self.degree == 0 {
            return Some(0.0);
        }
        let ct = self.top_coercivity();
        if ct <= 1e-12 {
            return None;
        }
        let b = self.norms_by_degree();
        let bound = |r: f64| {
            ct * r.powi(self.degree as i32)
                - (0..self.degree as usize).map(|j| b[j] * r.powi(j as i32)).sum::<f64>()
                - lambda_abs
        };
        let mut r = 1.0;
        while bound(r) < 1.0 {
            r *= 1.25;
            if r > 1e8 {
                return None;
            }
        }
        Some(r)
    }

    /// Bound on `|grad_xi sigma_min(F)|` on the ball of radius `r`.
    fn lipschitz(&self, r: f64) -> f64 {
        let rk = r * (self.k.max(1) as f64).sqrt();
        self.poly
            .iter()
            .map(|(alpha, a)| {
                let d: u32 = alpha.iter().sum();
                if d == 0 {
                    0.0
                } else {
                    d as f64 * a.norm() * rk.powi(d as i32 - 1)
                }
            })
            .sum()
    }
}

pub fn sigma_min(m: &CMat) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)].norm();
    }
    m.clone().singular_values().iter().cloned().fold(f64::INFINITY, f64::min)
}

fn shifted(m: CMat, lambda: Complex64) -> CMat {
    let n = m.nrows();
    m - CMat::identity(n, n) * lambda
}

fn hermitian_eigs(m: &CMat) -> Vec<f64> {
    let n = m.nrows();
    if n == 1 {
        return vec![m[(0, 0)].re];
    }
    // embed as a real symmetric matrix of twice the size
    let re = DMatrix::from_fn(2 * n, 2 * n, |i, j| {
        let (a, b) = (i % n, j % n);
        let z = m[(a, b)];
        match (i < n, j < n) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    });
    let re = (&re + re.transpose()) * 0.5;
    let mut e: Vec<f64> = re.symmetric_eigenvalues().iter().cloned().collect();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // each eigenvalue appears twice
    e.chunks(2).map(|p| 0.5 * (p[0] + p[1])).collect()
}

pub(crate) fn general_eigs(m: &CMat) -> Vec<Complex64> {
    if m.nrows() == 1 {
        return vec![m[(0, 0)]];
    }
    m.clone().schur().eigenvalues().map(|v| v.iter().cloned().collect()).unwrap_or_default()
}

/// The transform of an abelian limit operator.
#[derive(Debug, Clone)]
pub struct SymbolFamily {
    pub covariables: Vec<String>,
    pub transverse: Transverse,
    pub size: usize,
    pub blocks: Vec<Block>,
    pub status: Status,
    pub base_samples: usize,
}

impl SymbolFamily {
    /// Block-diagonal evaluation of the whole family (small families only).
    pub fn evaluation(&self, xi: &[f64]) -> CMat {
        let total: usize = self.blocks.iter().map(|b| b.dim).sum();
        let mut out = CMat::zeros(total, total);
        let mut off = 0;
        for b in &self.blocks {
            out.view_mut((off, off), (b.dim, b.dim)).copy_from(&b.eval(xi));
            off += b.dim;
        }
        out
    }

    /// Coercivity radius valid for every block.
    pub fn coercivity_radius(&self, lambda_abs: f64) -> Option<f64> {
        self.blocks.iter().map(|b| b.coercivity_radius(lambda_abs)).try_fold(0.0f64, |acc, r| Some(acc.max(r?)))
    }
}

/// Generator action on the transverse factor.
enum Action {
    Covar(usize),
    Mat(CMat),
    Zero,
}

/// Transverse realization of a limit operator at one base point.
pub(crate) struct Realizer<'a> {
    pub l: &'a LimitOperator,
    pub base: Vec<f64>,
    pub names: Vec<String>,
    /// ghost generator index -> covariable slot (None: acts as zero)
    pub ghost_slots: Vec<(usize, Option<usize>)>,
    pub k: usize,
}

impl<'a> Realizer<'a> {
    fn compile(&self, e: &crate::opdsl::canon::Canon) -> Result<Compiled, SpectralError> {
        let names: Vec<&str> = self.names.iter().map(|s| s.as_str()).collect();
        e.to_expr().compile(&names).map_err(SpectralError::Eval)
    }

    fn fiber_len(&self) -> usize {
        self.l.fiber_coords.len()
    }

    fn point(&self, fiber: &[f64]) -> Vec<f64> {
        [fiber, &self.base[..]].concat()
    }

    fn constant(&self, e: &crate::opdsl::canon::Canon) -> Result<f64, SpectralError> {
        let f = self.compile(e)?;
        Ok(f.eval(&self.point(&vec![0.0; self.fiber_len()])))
    }

    fn on_fiber(&self, e: &crate::opdsl::canon::Canon) -> bool {
        self.l.fiber_coords.iter().any(|c| e.depends_on(&c.name))
    }

    fn coefficients_depend_on_fiber(&self) -> bool {
        self.l.op.terms().any(|(_, _, _, e)| self.on_fiber(e))
    }

    fn any_depends_on_fiber(&self) -> bool {
        let frame = self.l.frame();
        self.coefficients_depend_on_fiber()
            || self.l.orbit_generators.iter().any(|&g| self.on_fiber(&frame.generators[g].multiplier))
    }

    /// Builds blocks given per-generator actions and a coefficient
    /// realization.
    fn assemble(
        &self,
        t: usize,
        coeff: &dyn Fn(&crate::opdsl::canon::Canon) -> Result<CMat, SpectralError>,
        action: &dyn Fn(usize) -> Action,
        mode: Option<i64>,
    ) -> Result<Block, SpectralError> {
        let n = self.l.op.size;
        let dim = t * n;
        let mut poly: Vec<(Vec<u32>, CMat)> = Vec::new();
        let mut degree = 0;
        for (row, col, word, e) in self.l.op.terms() {
            let mut m = coeff(e)?;
            let mut alpha = vec![0u32; self.k];
            let mut dead = false;
            for &g in word {
                match action(g) {
                    Action::Covar(j) => {
                        alpha[j] += 1;
                        m *= I;
                    }
                    Action::Mat(a) => m *= a,
                    Action::Zero => {
                        dead = true;
                        break;
                    }
                }
            }
            if dead {
                continue;
            }
            degree = degree.max(alpha.iter().sum());
            let slot = match poly.iter().position(|(a, _)| *a == alpha) {
                Some(p) => p,
                None => {
                    poly.push((alpha.clone(), CMat::zeros(dim, dim)));
                    poly.len() - 1
                }
            };
            let mut view = poly[slot].1.view_mut((row * t, col * t), (t, t));
            view += m;
        }
        poly.retain(|(_, a)| a.norm() > 0.0);
        let mut block = Block {
            poly,
            dim,
            k: self.k,
            degree,
            mode,
            base: self.l.base_coords.iter().zip(&self.base).map(|(c, v)| (c.name.clone(), *v)).collect(),
            hermitian: false,
        };
        block.hermitian = is_hermitian_family(&block);
        Ok(block)
    }
}

fn is_hermitian_family(b: &Block) -> bool {
    let probes: [&[f64]; 3] = [&[0.37, -1.3, 0.8], &[-2.1, 0.6, 1.7], &[1.0, 1.0, -0.4]];
    probes.iter().all(|p| {
        let m = b.eval(&p[..b.k]);
        let scale = m.norm().max(1.0);
        (&m - m.adjoint()).norm() <= 1e-12 * scale
    })
}

fn dft_toeplitz(f: &dyn Fn(f64) -> f64, modes: usize) -> CMat {
    let t = 2 * modes + 1;
    let samples = 4 * modes + 4;
    let vals: Vec<f64> = (0..samples).map(|j| f(2.0 * PI * j as f64 / samples as f64)).collect();
    let coef = |d: i64| -> Complex64 {
        let mut s = Complex64::new(0.0, 0.0);
        for (j, v) in vals.iter().enumerate() {
            let th = 2.0 * PI * j as f64 / samples as f64;
            s += Complex64::from_polar(*v, -(d as f64) * th);
        }
        s / samples as f64
    };
    let cache: Vec<Complex64> = (-(2 * modes as i64)..=(2 * modes as i64)).map(coef).collect();
    CMat::from_fn(t, t, |a, b| cache[(a as i64 - b as i64 + 2 * modes as i64) as usize])
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

pub(crate) fn realizer<'a>(l: &'a LimitOperator, base: Vec<f64>, abelian_ghosts: bool) -> Realizer<'a> {
    let names: Vec<String> = l.fiber_coords.iter().chain(&l.base_coords).map(|c| c.name.clone()).collect();
    let ghost_slots: Vec<(usize, Option<usize>)> =
        if abelian_ghosts { l.ghosts.iter().enumerate().map(|(j, &g)| (g, Some(j))).collect() } else { Vec::new() };
    let k = ghost_slots.iter().filter(|(_, s)| s.is_some()).count();
    Realizer { l, base, names, ghost_slots, k }
}

/// Blocks for one base point. `extra_slots` lets callers supply ghost slots
/// for non-abelian reductions.
pub(crate) fn blocks_at(r: &mut Realizer<'_>, modes: usize) -> Result<(Transverse, Vec<Block>, Status), SpectralError> {
    let l = r.l;
    let frame = l.frame().clone();
    let ghost_of = |g: usize, slots: &[(usize, Option<usize>)]| slots.iter().find(|(h, _)| *h == g).map(|(_, s)| *s);
    match l.fiber_coords.len() {
        0 => {
            let slots = r.ghost_slots.clone();
            let b = r.assemble(
                1,
                &|e| Ok(CMat::from_element(1, 1, c(r.constant(e)?))),
                &|g| match ghost_of(g, &slots) {
                    Some(Some(j)) => Action::Covar(j),
                    _ => Action::Zero,
                },
                None,
            )?;
            Ok((Transverse::Trivial, vec![b], Status::NumericallyCertified { tol: ZERO_TOL }))
        }
        1 => {
            let coord = l.fiber_coords[0].clone();
            let orbit: Vec<usize> = l.orbit_generators.clone();
            match coord.kind {
                CoordKind::Circle => {
                    let coupled = r.any_depends_on_fiber();
                    let slots = r.ghost_slots.clone();
                    if !coupled {
                        let mut blocks = Vec::new();
                        for kk in -(modes as i64)..=(modes as i64) {
                            let mult: Vec<(usize, f64)> = orbit
                                .iter()
                                .map(|&g| Ok((g, r.constant(&frame.generators[g].multiplier)?)))
                                .collect::<Result<_, SpectralError>>()?;
                            let b = r.assemble(
                                1,
                                &|e| Ok(CMat::from_element(1, 1, c(r.constant(e)?))),
                                &|g| match ghost_of(g, &slots) {
                                    Some(Some(j)) => Action::Covar(j),
                                    Some(None) => Action::Zero,
                                    None => {
                                        let m = mult.iter().find(|(h, _)| *h == g).map(|(_, v)| *v).unwrap_or(0.0);
                                        Action::Mat(CMat::from_element(1, 1, I * (m * kk as f64)))
                                    }
                                },
                                Some(kk),
                            )?;
                            blocks.push(b);
                        }
                        Ok((
                            Transverse::Fourier { coord: coord.name.clone(), modes, coupled: false },
                            blocks,
                            Status::NumericallyCertified { tol: ZERO_TOL },
                        ))
                    } else {
                        let t = 2 * modes + 1;
                        let toeplitz = |e: &crate::opdsl::canon::Canon| -> Result<CMat, SpectralError> {
                            let f = r.compile(e)?;
                            Ok(dft_toeplitz(&|th| f.eval(&r.point(&[th])), modes))
                        };
                        let diag_k =
                            CMat::from_fn(t, t, |a, b| if a == b { I * (a as f64 - modes as f64) } else { c(0.0) });
                        let mut gen_mats = Vec::new();
                        for &g in &orbit {
                            gen_mats.push((g, toeplitz(&frame.generators[g].multiplier)? * &diag_k));
                        }
                        let b = r.assemble(
                            t,
                            &toeplitz,
                            &|g| match ghost_of(g, &slots) {
                                Some(Some(j)) => Action::Covar(j),
                                Some(None) => Action::Zero,
                                None => gen_mats
                                    .iter()
                                    .find(|(h, _)| *h == g)
                                    .map(|(_, m)| Action::Mat(m.clone()))
                                    .unwrap_or(Action::Zero),
                            },
                            None,
                        )?;
                        Ok((
                            Transverse::Fourier { coord: coord.name.clone(), modes, coupled: true },
                            vec![b],
                            Status::NumericallyCertified { tol: ZERO_TOL },
                        ))
                    }
                }
                CoordKind::UnitInterval => {
                    // generator m(y) d/dy = m / (y(1-y)) d/du in u = log(y/(1-y))
                    let v = coord.name.clone();
                    let ratio_const = orbit.iter().all(|&g| {
                        let m = &frame.generators[g].multiplier;
                        let b = crate::opdsl::canon::Canon::var(&v)
                            .mul(&crate::opdsl::canon::Canon::one().sub(&crate::opdsl::canon::Canon::var(&v)));
                        m.div(&b).map(|q| !q.depends_on(&v)).unwrap_or(false)
                    });
                    let slots = r.ghost_slots.clone();
                    if !r.coefficients_depend_on_fiber() && ratio_const && orbit.len() == 1 {
                        let g0 = orbit[0];
                        let extra = r.k;
                        r.k += 1;
                        let m = &frame.generators[g0].multiplier;
                        let bq = crate::opdsl::canon::Canon::var(&v)
                            .mul(&crate::opdsl::canon::Canon::one().sub(&crate::opdsl::canon::Canon::var(&v)));
                        let ratio = r.constant(&m.div(&bq).map_err(|e| SpectralError::Eval(e.to_string()))?)?;
                        let b = r.assemble(
                            1,
                            &|e| Ok(CMat::from_element(1, 1, c(r.constant(e)?))),
                            &|g| match ghost_of(g, &slots) {
                                Some(Some(j)) => Action::Covar(j),
                                Some(None) => Action::Zero,
                                None if g == g0 => {
                                    if (ratio - 1.0).abs() < 1e-15 {
                                        Action::Covar(extra)
                                    } else {
                                        Action::Zero
                                    }
                                }
                                None => Action::Zero,
                            },
                            None,
                        )?;
                        if (ratio - 1.0).abs() >= 1e-15 {
                            return Err(SpectralError::UnsupportedOrbit(format!(
                                "interval generator with non-unit log multiplier {ratio}"
                            )));
                        }
                        Ok((
                            Transverse::Covariable { coord: v },
                            vec![b],
                            Status::NumericallyCertified { tol: ZERO_TOL },
                        ))
                    } else {
                        let pts = (2.0 * INTERVAL_HALF_WIDTH / INTERVAL_STEP) as usize - 1;
                        let us: Vec<f64> =
                            (0..pts).map(|i| -INTERVAL_HALF_WIDTH + INTERVAL_STEP * (i as f64 + 1.0)).collect();
                        let diag_of = |e: &crate::opdsl::canon::Canon| -> Result<Vec<f64>, SpectralError> {
                            let f = r.compile(e)?;
                            Ok(us.iter().map(|&u| f.eval(&r.point(&[logistic(u)]))).collect())
                        };
                        let mut d_u = CMat::zeros(pts, pts);
                        for i in 0..pts {
                            if i + 1 < pts {
                                d_u[(i, i + 1)] = c(0.5 / INTERVAL_STEP);
                            }
                            if i > 0 {
                                d_u[(i, i - 1)] = c(-0.5 / INTERVAL_STEP);
                            }
                        }
                        let mut gen_mats = Vec::new();
                        for &g in &orbit {
                            let m = diag_of(&frame.generators[g].multiplier)?;
                            let scale = CMat::from_fn(pts, pts, |a, b| {
                                if a == b {
                                    let y = logistic(us[a]);
                                    c(m[a] / (y * (1.0 - y)))
                                } else {
                                    c(0.0)
                                }
                            });
                            gen_mats.push((g, scale * &d_u));
                        }
                        let b = r.assemble(
                            pts,
                            &|e| {
                                let d = diag_of(e)?;
                                Ok(CMat::from_fn(pts, pts, |a, b| if a == b { c(d[a]) } else { c(0.0) }))
                            },
                            &|g| match ghost_of(g, &slots) {
                                Some(Some(j)) => Action::Covar(j),
                                Some(None) => Action::Zero,
                                None => gen_mats
                                    .iter()
                                    .find(|(h, _)| *h == g)
                                    .map(|(_, m)| Action::Mat(m.clone()))
                                    .unwrap_or(Action::Zero),
                            },
                            None,
                        )?;
                        Ok((
                            Transverse::Discretized {
                                coord: v,
                                points: pts,
                                step: INTERVAL_STEP,
                                half_width: INTERVAL_HALF_WIDTH,
                            },
                            vec![b],
                            Status::Approximate,
                        ))
                    }
                }
                other => Err(SpectralError::UnsupportedOrbit(format!("{other:?} fiber coordinate"))),
            }
        }
        d => Err(SpectralError::UnsupportedOrbit(format!("{d}-dimensional orbit"))),
    }
}

fn ghosts_commute(l: &LimitOperator) -> bool {
    let f = l.frame();
    l.ghosts.iter().all(|&a| l.ghosts.iter().all(|&b| f.commutator(a, b).is_empty()))
}

/// Fourier transform of an abelian limit operator.
pub fn fourier_symbol(l: &LimitOperator, modes: usize) -> Result<SymbolFamily, SpectralError> {
    match l.group.clone().normalized() {
        IsotropyGroup::RealVector(_) | IsotropyGroup::Trivial => {}
        // a retagged group is used through the frame it acts by
        IsotropyGroup::Tagged { .. } if ghosts_commute(l) => {}
        g => return Err(SpectralError::NonAbelian(g)),
    }
    let bases: Vec<Vec<f64>> = if l.base_samples.is_empty() {
        vec![l.base_coords.iter().map(|_| 0.0).collect()]
    } else {
        l.base_samples.clone()
    };
    let mut blocks = Vec::new();
    let mut transverse = Transverse::Trivial;
    let mut status = Status::NumericallyCertified { tol: ZERO_TOL };
    let mut covariables = Vec::new();
    for base in bases {
        let mut r = realizer(l, base, true);
        let (tr, bs, st) = blocks_at(&mut r, modes)?;
        if covariables.is_empty() {
            covariables = l.ghosts.iter().map(|&g| format!("xi_{}", l.frame().generators[g].var)).collect();
            if let Transverse::Covariable { coord } = &tr {
                covariables.push(format!("eta_{coord}"));
            }
        }
        transverse = tr;
        status = status.meet(st);
        blocks.extend(bs);
    }
    Ok(SymbolFamily { covariables, transverse, size: l.op.size, blocks, status, base_samples: l.base_samples.len() })
}

/// Outcome of a grid certificate on one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum BlockOutcome {
    Invertible { margin: f64, lower_bound: f64 },
    NotInvertible { xi: Vec<f64>, sigma: f64 },
    Indeterminate { reason: String },
}

#[derive(Debug, Clone)]
pub struct Certificate {
    pub outcome: BlockOutcome,
    pub radius: f64,
    pub points: usize,
    pub inflation: f64,
}

fn grid_axis(r: f64, n: usize) -> Vec<f64> {
    // odd n keeps 0 on the grid
    let n = if n % 2 == 0 { n + 1 } else { n };
    (0..n).map(|i| -r + 2.0 * r * i as f64 / (n - 1) as f64).collect()
}

fn golden_min(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..120 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
        if (b - a).abs() < 1e-14 {
            break;
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Local minimization of `f` around `x0` with step `h` (coordinate-wise
/// golden sections, repeated).
pub(crate) fn local_min(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], h: f64) -> (Vec<f64>, f64) {
    let mut x = x0.to_vec();
    let mut best = f(&x);
    for _ in 0..if x.len() == 1 { 1 } else { 6 } {
        for i in 0..x.len() {
            let xi = x[i];
            let g = |t: f64| {
                let mut y = x.clone();
                y[i] = t;
                f(&y)
            };
            let (t, v) = golden_min(&g, xi - h, xi + h);
            if v < best {
                best = v;
                x[i] = t;
            }
        }
    }
    (x, best)
}

fn points_of(k: usize, r: f64, res: &SpectralResolution) -> (Vec<Vec<f64>>, f64, usize) {
    match k {
        0 => (vec![vec![]], 0.0, 1),
        1 => {
            let ax = grid_axis(r, res.grid_1d);
            let h = if ax.len() > 1 { ax[1] - ax[0] } else { 0.0 };
            let n = ax.len();
            (ax.into_iter().map(|v| vec![v]).collect(), h, n)
        }
        _ => {
            let ax = grid_axis(r, res.grid_2d);
            let h = ax[1] - ax[0];
            let mut pts = vec![Vec::new()];
            for _ in 0..k {
                pts = pts
                    .iter()
                    .flat_map(|p: &Vec<f64>| ax.iter().map(move |v| [p.clone(), vec![*v]].concat()))
                    .collect();
            }
            (pts, h, ax.len())
        }
    }
}

/// Certifies invertibility of `F(xi) - lambda` over all `xi`.
pub fn certify_block(b: &Block, lambda: Complex64, res: &SpectralResolution) -> Certificate {
    let Some(radius) = b.coercivity_radius(lambda.norm()) else {
        return Certificate {
            outcome: BlockOutcome::Indeterminate { reason: "leading covariable part is not coercive".into() },
            radius: f64::NAN,
            points: 0,
            inflation: f64::NAN,
        };
    };
    let (pts, h, axis_len) = points_of(b.k, radius, res);
    let inflation = b.lipschitz(radius) * h * (b.k.max(1) as f64).sqrt() / 2.0;
    let sig = |xi: &[f64]| sigma_min(&shifted(b.eval(xi), lambda));
    let vals: Vec<f64> = pts.par_iter().map(|x| sig(x)).collect();
    let (imin, vmin) =
        vals.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
    let cert = |outcome| Certificate { outcome, radius, points: pts.len(), inflation };
    if vmin <= ZERO_TOL {
        return cert(BlockOutcome::NotInvertible { xi: pts[imin].clone(), sigma: vmin });
    }
    // Hermitian families with real lambda: an eigenvalue crossing zero
    // between neighbours pins a root by bisection.
    if b.hermitian && lambda.im == 0.0 && b.k >= 1 {
        let inertia =
            |xi: &[f64]| -> usize { hermitian_eigs(&shifted(b.eval(xi), lambda)).iter().filter(|e| **e < 0.0).count() };
        let counts: Vec<usize> = pts.par_iter().map(|x| inertia(x)).collect();
        let stride_last = 1;
        for (i, p) in pts.iter().enumerate() {
            // neighbour along the last axis
            let pos = i % axis_len;
            if pos + 1 < axis_len && counts[i] != counts[i + stride_last] {
                let q = &pts[i + stride_last];
                let c0 = counts[i];
                let mut lo = p.clone();
                let mut hi = q.clone();
                for _ in 0..200 {
                    let mid: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
                    if inertia(&mid) == c0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let (x, s) = if sig(&lo) <= sig(&hi) { (lo.clone(), sig(&lo)) } else { (hi.clone(), sig(&hi)) };
                return cert(BlockOutcome::NotInvertible { xi: x, sigma: s });
            }
        }
    }
    let (x_ref, v_ref) = if b.k == 0 { (vec![], vmin) } else { local_min(&sig, &pts[imin], h.max(1e-12)) };
    if v_ref <= ZERO_TOL {
        return cert(BlockOutcome::NotInvertible { xi: x_ref, sigma: v_ref });
    }
    if vmin - inflation > ZERO_TOL {
        return cert(BlockOutcome::Invertible { margin: v_ref, lower_bound: vmin - inflation });
    }
    // branch and bound: split every cell whose bound fails
    let lip = b.lipschitz(radius);
    let diag = (b.k as f64).sqrt();
    let mut lower = f64::INFINITY;
    let mut cells = Vec::new();
    for (p, v) in pts.iter().zip(&vals) {
        let bound = v - lip * 0.5 * h * diag;
        if bound > ZERO_TOL {
            lower = lower.min(bound);
        } else {
            cells.push((p.clone(), 0.5 * h));
        }
    }
    let mut budget = (REFINE_WORK / (b.dim * b.dim) as f64).max(2000.0) as usize;
    let mut evaluated = pts.len();
    while let Some((c, w)) = cells.pop() {
        for corner in 0..1usize << b.k {
            if budget == 0 {
                return Certificate {
                    outcome: BlockOutcome::Indeterminate {
                        reason: format!(
                            "certified lower bound below tolerance after {evaluated} evaluations (grid minimum {vmin:.3e})"
                        ),
                    },
                    radius,
                    points: evaluated,
                    inflation,
                };
            }
            budget -= 1;
            evaluated += 1;
            let x: Vec<f64> = c
                .iter()
                .enumerate()
                .map(|(a, v)| if corner >> a & 1 == 1 { v + 0.5 * w } else { v - 0.5 * w })
                .collect();
            let v = sig(&x);
            if v <= ZERO_TOL {
                return Certificate {
                    outcome: BlockOutcome::NotInvertible { xi: x, sigma: v },
                    radius,
                    points: evaluated,
                    inflation,
                };
            }
            let bound = v - lip * 0.5 * w * diag;
            if bound > ZERO_TOL {
                lower = lower.min(bound);
            } else {
                cells.push((x, 0.5 * w));
            }
        }
    }
    Certificate {
        outcome: BlockOutcome::Invertible { margin: v_ref, lower_bound: lower },
        radius,
        points: evaluated,
        inflation,
    }
}

/// Real interval or complex sample set contributed by one block.
#[derive(Debug, Clone)]
pub(crate) enum BranchRange {
    Interval { lo: f64, hi: f64, tol: f64 },
    Complex(Vec<Complex64>),
}

/// Ranges of the eigenvalue branches of a block, for spectra inside
/// `[-w, w]` with `w = window_abs`.
pub(crate) fn block_ranges(b: &Block, window_abs: f64, res: &SpectralResolution) -> Vec<BranchRange> {
    if b.degree == 0 {
        let m = b.eval(&vec![0.0; b.k]);
        if b.hermitian {
            return hermitian_eigs(&m).into_iter().map(|e| BranchRange::Interval { lo: e, hi: e, tol: 0.0 }).collect();
        }
        return vec![BranchRange::Complex(general_eigs(&m))];
    }
    let radius = b.coercivity_radius(window_abs).unwrap_or(50.0);
    let (pts, h, _) = points_of(b.k, radius, res);
    if !b.hermitian {
        let mut out = Vec::new();
        for p in pts.iter().step_by((pts.len() / 512).max(1)) {
            out.extend(general_eigs(&b.eval(p)));
        }
        return vec![BranchRange::Complex(out)];
    }
    let eigs: Vec<Vec<f64>> = pts.par_iter().map(|x| hermitian_eigs(&b.eval(x))).collect();
    let dim = b.dim;
    // asymptotic direction of each branch from the inertia of the top part
    let top_eigs = {
        let w = vec![1.0 / (b.k as f64).sqrt(); b.k];
        let mut m = CMat::zeros(dim, dim);
        for (alpha, a) in &b.poly {
            if alpha.iter().sum::<u32>() == b.degree {
                let s: f64 = alpha.iter().zip(&w).map(|(&p, &x)| x.powi(p as i32)).product();
                m += a * c(s);
            }
        }
        hermitian_eigs(&m)
    };
    let pos = top_eigs.iter().filter(|e| **e > 1e-12).count();
    let neg = top_eigs.iter().filter(|e| **e < -1e-12).count();
    let mut out = Vec::new();
    for j in 0..dim {
        let branch = |xi: &[f64]| hermitian_eigs(&b.eval(xi))[j];
        let (imin, vmin) =
            eigs.iter().enumerate().fold((0, f64::INFINITY), |a, (i, e)| if e[j] < a.1 { (i, e[j]) } else { a });
        let (imax, vmax) =
            eigs.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, e)| if e[j] > a.1 { (i, e[j]) } else { a });
        let up = j >= dim - pos;
        let down = j < neg;
        let lo = if down { f64::NEG_INFINITY } else { local_min(&branch, &pts[imin], h.max(1e-12)).1.min(vmin) };
        let hi =
            if up { f64::INFINITY } else { -local_min(&|x: &[f64]| -branch(x), &pts[imax], h.max(1e-12)).1.min(-vmax) };
        // refined extremum vs grid extremum bounds the endpoint error
        let tol = if lo.is_finite() { (vmin - lo).abs().max(1e-12) } else { 1e-12 };
        out.push(BranchRange::Interval { lo, hi, tol });
    }
    out
}

/// Dense solve helper used by the approximate path.
pub(crate) fn sigma_min_dense(m: &CMat) -> f64 {
    sigma_min(m)
}

pub(crate) fn hermitian_spectrum(m: &CMat) -> Vec<f64> {
    hermitian_eigs(m)
}

pub(crate) fn is_hermitian(m: &CMat) -> bool {
    (m - m.adjoint()).norm() <= 1e-12 * m.norm().max(1.0)
}
