//! Sparse assembly and banded factorizations.

use std::collections::BTreeMap;

use num_complex::Complex64;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Row-wise sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Sparse {
    pub n: usize,
    pub rows: Vec<BTreeMap<usize, Complex64>>,
}

impl Sparse {
    pub fn zeros(n: usize) -> Sparse {
        Sparse { n, rows: vec![BTreeMap::new(); n] }
    }

    pub fn identity(n: usize) -> Sparse {
        let mut m = Sparse::zeros(n);
        for i in 0..n {
            m.rows[i].insert(i, Complex64::new(1.0, 0.0));
        }
        m
    }

    pub fn diagonal(d: &[Complex64]) -> Sparse {
        let mut m = Sparse::zeros(d.len());
        for (i, v) in d.iter().enumerate() {
            if *v != ZERO {
                m.rows[i].insert(i, *v);
            }
        }
        m
    }

    pub fn add_to(&mut self, i: usize, j: usize, v: Complex64) {
        if v != ZERO {
            *self.rows[i].entry(j).or_insert(ZERO) += v;
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.rows[i].get(&j).copied().unwrap_or(ZERO)
    }

    pub fn mul(&self, other: &Sparse) -> Sparse {
        let mut out = Sparse::zeros(self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for (&k, &a) in row {
                for (&j, &b) in &other.rows[k] {
                    out.add_to(i, j, a * b);
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Sparse) -> Sparse {
        let mut out = self.clone();
        for (i, row) in other.rows.iter().enumerate() {
            for (&j, &v) in row {
                out.add_to(i, j, v);
            }
        }
        out
    }

    pub fn scale(&self, s: Complex64) -> Sparse {
        let mut out = self.clone();
        for row in &mut out.rows {
            for v in row.values_mut() {
                *v *= s;
            }
        }
        out
    }

    pub fn shift(&self, lambda: Complex64) -> Sparse {
        self.add(&Sparse::identity(self.n).scale(-lambda))
    }

    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.rows.iter().map(|row| row.iter().map(|(&j, &v)| v * x[j]).sum()).collect()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(BTreeMap::len).sum()
    }

    /// `max |A - A^*|` relative to `max |A|`.
    pub fn hermitian_defect(&self) -> f64 {
        let mut scale: f64 = 0.0;
        let mut defect: f64 = 0.0;
        for (i, row) in self.rows.iter().enumerate() {
            for (&j, &v) in row {
                scale = scale.max(v.norm());
                defect = defect.max((v - self.get(j, i).conj()).norm());
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            defect / scale
        }
    }

    /// Lower and upper bandwidths.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for (i, row) in self.rows.iter().enumerate() {
            for &j in row.keys() {
                if j < i {
                    kl = kl.max(i - j);
                } else {
                    ku = ku.max(j - i);
                }
            }
        }
        (kl, ku)
    }

    /// `P A P^T` for the ordering `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Sparse {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut out = Sparse::zeros(self.n);
        for (old_i, row) in self.rows.iter().enumerate() {
            for (&old_j, &v) in row {
                out.rows[inv[old_i]].insert(inv[old_j], v);
            }
        }
        out
    }
}

/// LU factorization with partial pivoting of a banded matrix, stored in
/// the usual `2 kl + ku + 1` row layout.
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    ld: usize,
    ab: Vec<Complex64>,
    piv: Vec<usize>,
    pub singular: bool,
}

impl BandLu {
    fn at(&self, i: usize, j: usize) -> Complex64 {
        self.ab[j * self.ld + self.kl + self.ku + i - j]
    }

    fn at_mut(&mut self, i: usize, j: usize) -> &mut Complex64 {
        let kv = self.kl + self.ku;
        &mut self.ab[j * self.ld + kv + i - j]
    }

    pub fn factor(a: &Sparse) -> BandLu {
        let (kl, ku) = a.bandwidths();
        let n = a.n;
        let ld = 2 * kl + ku + 1;
        let mut lu = BandLu { n, kl, ku, ld, ab: vec![ZERO; ld * n], piv: vec![0; n], singular: false };
        for (i, row) in a.rows.iter().enumerate() {
            for (&j, &v) in row {
                *lu.at_mut(i, j) = v;
            }
        }
        let kv = kl + ku;
        let mut ju = 0;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut jp = 0;
            let mut best = -1.0;
            for p in 0..=km {
                let v = lu.at(j + p, j).norm();
                if v > best {
                    best = v;
                    jp = p;
                }
            }
            lu.piv[j] = j + jp;
            if best == 0.0 {
                lu.singular = true;
                continue;
            }
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let a = lu.at(j, c);
                    let b = lu.at(j + jp, c);
                    *lu.at_mut(j, c) = b;
                    *lu.at_mut(j + jp, c) = a;
                }
            }
            let pivot = lu.at(j, j);
            for i in 1..=km {
                *lu.at_mut(j + i, j) /= pivot;
            }
            for c in j + 1..=ju {
                let u = lu.at(j, c);
                if u == ZERO {
                    continue;
                }
                for i in 1..=km {
                    let l = lu.at(j + i, j);
                    *lu.at_mut(j + i, c) -= l * u;
                }
            }
            debug_assert!(ju <= j + kv);
        }
        lu
    }

    pub fn solve(&self, b: &mut [Complex64]) {
        let n = self.n;
        let kv = self.kl + self.ku;
        for j in 0..n.saturating_sub(1) {
            let km = self.kl.min(n - 1 - j);
            let l = self.piv[j];
            if l != j {
                b.swap(l, j);
            }
            let bj = b[j];
            for i in 1..=km {
                b[j + i] -= self.at(j + i, j) * bj;
            }
        }
        for j in (0..n).rev() {
            b[j] /= self.at(j, j);
            let bj = b[j];
            for i in j.saturating_sub(kv)..j {
                b[i] -= self.at(i, j) * bj;
            }
        }
    }

    /// Solves `A^* x = b`.
    pub fn solve_adjoint(&self, b: &mut [Complex64]) {
        let n = self.n;
        let kv = self.kl + self.ku;
        for j in 0..n {
            let mut s = b[j];
            for i in j.saturating_sub(kv)..j {
                s -= self.at(i, j).conj() * b[i];
            }
            b[j] = s / self.at(j, j).conj();
        }
        for j in (0..n.saturating_sub(1)).rev() {
            let km = self.kl.min(n - 1 - j);
            let mut s = b[j];
            for i in 1..=km {
                s -= self.at(j + i, j).conj() * b[j + i];
            }
            b[j] = s;
            let l = self.piv[j];
            if l != j {
                b.swap(l, j);
            }
        }
    }
}

fn normalize(v: &mut [Complex64]) -> f64 {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        for z in v.iter_mut() {
            *z /= norm;
        }
    }
    norm
}

/// Smallest singular value by inverse iteration on `(A^* A)^{-1}`.
pub fn sigma_min(a: &Sparse, seed: u64) -> f64 {
    let lu = BandLu::factor(a);
    if lu.singular {
        return 0.0;
    }
    // deterministic start vector
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut v: Vec<Complex64> = (0..a.n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            Complex64::new(((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5, 0.0)
        })
        .collect();
    normalize(&mut v);
    let mut est = f64::INFINITY;
    for _ in 0..60 {
        lu.solve_adjoint(&mut v);
        lu.solve(&mut v);
        let g = normalize(&mut v);
        if !g.is_finite() || g == 0.0 {
            return 0.0;
        }
        let s = 1.0 / g.sqrt();
        if (est - s).abs() <= 1e-10 * s {
            est = s;
            break;
        }
        est = s;
    }
    let av = a.matvec(&v);
    let r = av.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    r.min(est)
}

/// Number of eigenvalues below `mu` of a Hermitian banded matrix, from the
/// inertia of an `L D L^*` factorization of `A - mu`.
pub fn count_below(a: &Sparse, mu: f64) -> usize {
    HermBand::new(a).count_below(mu)
}

/// Entries of a Hermitian band: real symmetric bands skip complex
/// arithmetic.
trait Entry:
    Copy + std::ops::Mul<Output = Self> + std::ops::Sub<Output = Self> + std::ops::Div<f64, Output = Self>
{
    const ZERO: Self;
    fn conj_scaled(self, d: f64) -> Self;
    fn norm_sqr(self) -> f64;
}

impl Entry for f64 {
    const ZERO: f64 = 0.0;
    fn conj_scaled(self, d: f64) -> f64 {
        self * d
    }
    fn norm_sqr(self) -> f64 {
        self * self
    }
}

impl Entry for Complex64 {
    const ZERO: Complex64 = ZERO;
    fn conj_scaled(self, d: f64) -> Complex64 {
        self.conj() * d
    }
    fn norm_sqr(self) -> f64 {
        Complex64::norm_sqr(&self)
    }
}

#[derive(Debug, Clone)]
enum Lower {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

/// Lower band of a Hermitian matrix, kept for repeated inertia counts.
#[derive(Debug, Clone)]
pub struct HermBand {
    n: usize,
    b: usize,
    diag: Vec<f64>,
    /// `low[j * b + k - 1] = A(j + k, j)` for `k in 1..=b`.
    low: Lower,
    tiny: f64,
}

impl HermBand {
    pub fn new(a: &Sparse) -> HermBand {
        let n = a.n;
        let (b, _) = a.bandwidths();
        let mut diag = vec![0.0; n];
        let mut low = vec![ZERO; n * b];
        let mut scale: f64 = 0.0;
        for (i, row) in a.rows.iter().enumerate() {
            for (&j, &v) in row {
                scale = scale.max(v.norm());
                if i == j {
                    diag[i] = v.re;
                } else if i > j {
                    low[j * b + i - j - 1] = v;
                }
            }
        }
        let low = if low.iter().all(|v| v.im == 0.0) {
            Lower::Real(low.iter().map(|v| v.re).collect())
        } else {
            Lower::Complex(low)
        };
        HermBand { n, b, diag, low, tiny: 1e-14 * scale.max(1.0) }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of eigenvalues below `mu`, from the inertia of an `LDL^*`
    /// factorization of `A - mu` (Sylvester).
    pub fn count_below(&self, mu: f64) -> usize {
        match &self.low {
            Lower::Real(low) => self.inertia(low, mu),
            Lower::Complex(low) => self.inertia(low, mu),
        }
    }

    fn inertia<T: Entry>(&self, low: &[T], mu: f64) -> usize {
        let (n, b) = (self.n, self.b);
        let w = b + 1;
        // ring buffer over the last b+1 columns: l[slot * w + k] = L(j + k, j)
        let mut l = vec![T::ZERO; w * w];
        let mut d = vec![0.0; w];
        let mut t = vec![T::ZERO; b];
        // base[q] + i indexes L(i, k) for the q-th column k of the window (mod 2^64)
        let mut base = vec![0usize; b];
        let mut negatives = 0;
        for j in 0..n {
            let lo = j.saturating_sub(b);
            let mut dj = self.diag[j] - mu;
            for (q, k) in (lo..j).enumerate() {
                let slot = k % w;
                base[q] = (slot * w).wrapping_sub(k);
                let ljk = l[base[q].wrapping_add(j)];
                t[q] = ljk.conj_scaled(d[slot]);
                dj -= ljk.norm_sqr() * d[slot];
            }
            if dj.abs() < self.tiny {
                dj = -self.tiny;
            }
            let sj = j % w;
            d[sj] = dj;
            if dj < 0.0 {
                negatives += 1;
            }
            let width = j - lo;
            for i in j + 1..=(j + b).min(n - 1) {
                let mut s = low[j * b + i - j - 1];
                let first = i.saturating_sub(b).max(lo) - lo;
                for q in first..width {
                    s = s - l[base[q].wrapping_add(i)] * t[q];
                }
                l[sj * w + i - j] = s / dj;
            }
        }
        negatives
    }
}
