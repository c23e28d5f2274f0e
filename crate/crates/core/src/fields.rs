//! Coefficient ring: band-limited 2π-periodic functions with polynomial-in-x
//! prefactors.
//!
//! A [`CoeffFn`] represents `Σ_d x^d Σ_{|j|≤J} f[d][j] e^{ijx}`. Shifts,
//! derivatives and `(1−Λ)`-inversion act exactly on this representation;
//! products and exponentials are truncated at the hard mode cap and record
//! the dropped L² mass in the shared [`Ledger`].

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rustfft::FftPlanner;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{MethError, Result};

/// Divisors below this magnitude make a `(1−Λ)` inversion resonant.
pub const RESONANCE_TOL: f64 = 1e-12;

const PERIOD: f64 = 2.0 * PI;

/// Discretisation parameters shared by every operation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Lattice spacing ε (string coupling).
    pub epsilon: f64,
    /// Mode cap J for sampled fields.
    pub modes: usize,
    /// Hard mode cap Jmax applied to products.
    pub max_modes: usize,
    /// Maximum polynomial degree in x.
    pub max_xdeg: usize,
    /// Stored Λ-powers are confined to `[-band_cap, band_cap]`.
    #[serde(default = "default_band_cap")]
    pub band_cap: i64,
    /// Maximum power of ε∂ in mixed operators.
    #[serde(default = "default_max_deriv")]
    pub max_deriv: usize,
}

fn default_band_cap() -> i64 {
    12
}

fn default_max_deriv() -> usize {
    2
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            epsilon: 0.1,
            modes: 8,
            max_modes: 64,
            max_xdeg: 6,
            band_cap: default_band_cap(),
            max_deriv: default_max_deriv(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < PERIOD) {
            return Err(MethError::Config(format!("epsilon {} outside (0, 2π)", self.epsilon)));
        }
        if self.modes > self.max_modes {
            return Err(MethError::Config(format!(
                "mode cap J = {} exceeds Jmax = {}",
                self.modes, self.max_modes
            )));
        }
        if self.band_cap < 1 {
            return Err(MethError::Config("band_cap must be positive".into()));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        PERIOD
    }

    /// Collocation grid used for sup norms: `4·Jmax` equispaced points.
    pub fn norm_points(&self) -> usize {
        (4 * self.max_modes).max(16)
    }
}

/// Accumulated squared L² mass of everything dropped by lossy operations.
#[derive(Debug, Default)]
pub struct Ledger {
    bits: AtomicU64,
}

impl Ledger {
    pub fn record(&self, mass: f64) {
        if mass <= 0.0 || !mass.is_finite() {
            return;
        }
        let _ = self.bits.fetch_update(Ordering::Relaxed, Ordering::Relaxed, |b| {
            Some((f64::from_bits(b) + mass).to_bits())
        });
    }

    pub fn total(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::Relaxed))
    }

    pub fn reset(&self) {
        self.bits.store(0f64.to_bits(), Ordering::Relaxed);
    }
}

/// Grid parameters together with the truncation ledger they write into.
#[derive(Clone, Debug)]
pub struct Grid {
    pub spec: GridSpec,
    ledger: Arc<Ledger>,
}

impl Grid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Grid { spec, ledger: Arc::new(Ledger::default()) })
    }

    pub fn eps(&self) -> f64 {
        self.spec.epsilon
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Same parameters with a fresh, independent ledger.
    pub fn detached(&self) -> Grid {
        Grid { spec: self.spec, ledger: Arc::new(Ledger::default()) }
    }

    /// Same ledger with a different degree cap.
    pub fn with_max_xdeg(&self, max_xdeg: usize) -> Grid {
        let mut spec = self.spec;
        spec.max_xdeg = max_xdeg;
        Grid { spec, ledger: self.ledger.clone() }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `Σ_d x^d Σ_{|j|≤J} f[d][j] e^{ijx}`.
#[derive(Clone, PartialEq)]
pub struct CoeffFn {
    cap: usize,
    blocks: Vec<Vec<C64>>,
}

impl fmt::Debug for CoeffFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CoeffFn(xdeg={}, J={}, |.|={:.3e})", self.xdeg(), self.cap, self.coeff_norm())
    }
}

impl CoeffFn {
    pub fn zero() -> Self {
        CoeffFn { cap: 0, blocks: vec![vec![C64::new(0.0, 0.0)]] }
    }

    pub fn constant(c: impl Into<C64>) -> Self {
        CoeffFn { cap: 0, blocks: vec![vec![c.into()]] }
    }

    pub fn one() -> Self {
        Self::constant(1.0)
    }

    /// The monomial `x^d`.
    pub fn x_pow(d: usize) -> Self {
        let mut blocks = vec![vec![C64::new(0.0, 0.0)]; d + 1];
        blocks[d][0] = C64::new(1.0, 0.0);
        CoeffFn { cap: 0, blocks }
    }

    /// `c·e^{ijx}`.
    pub fn fourier(j: i64, c: impl Into<C64>) -> Self {
        let cap = j.unsigned_abs() as usize;
        let mut f = Self::zeros(0, cap);
        f.blocks[0][(j + cap as i64) as usize] = c.into();
        f
    }

    pub fn cos(j: i64) -> Self {
        &Self::fourier(j, 0.5) + &Self::fourier(-j, 0.5)
    }

    pub fn sin(j: i64) -> Self {
        &Self::fourier(j, C64::new(0.0, -0.5)) + &Self::fourier(-j, C64::new(0.0, 0.5))
    }

    /// Periodic function from its modes `j = -J..=J` (length `2J+1`).
    pub fn from_modes(modes: Vec<C64>) -> Self {
        assert!(modes.len() % 2 == 1, "mode vector must have odd length");
        let cap = modes.len() / 2;
        CoeffFn { cap, blocks: vec![modes] }
    }

    /// Function from per-degree mode blocks, all of length `2J+1`.
    /// Real field `Σ_{1≤|j|≤J} a_j e^{ijx}` with `|a_j| ≤ amplitude·|j|^{-2}` and `a_{-j} = conj(a_j)`.
    pub fn random_real(modes: usize, amplitude: f64, rng: &mut impl rand::Rng) -> Self {
        let mut m = vec![C64::new(0.0, 0.0); 2 * modes + 1];
        for j in 1..=modes {
            let r = rng.gen::<f64>() * amplitude / (j * j) as f64;
            let a = C64::from_polar(r, rng.gen::<f64>() * 2.0 * PI);
            m[modes + j] = a;
            m[modes - j] = a.conj();
        }
        Self::from_modes(m)
    }

    pub fn from_blocks(blocks: Vec<Vec<C64>>) -> Self {
        assert!(!blocks.is_empty(), "at least one degree block");
        let len = blocks[0].len();
        assert!(len % 2 == 1 && blocks.iter().all(|b| b.len() == len), "ragged mode blocks");
        let mut f = CoeffFn { cap: len / 2, blocks };
        f.trim_degree();
        f
    }

    fn zeros(xdeg: usize, cap: usize) -> Self {
        CoeffFn { cap, blocks: vec![vec![C64::new(0.0, 0.0); 2 * cap + 1]; xdeg + 1] }
    }

    pub fn xdeg(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn mode_cap(&self) -> usize {
        self.cap
    }

    pub fn blocks(&self) -> &[Vec<C64>] {
        &self.blocks
    }

    /// Coefficient of `x^d e^{ijx}` (zero outside the stored range).
    pub fn coeff(&self, d: usize, j: i64) -> C64 {
        if d >= self.blocks.len() || j.unsigned_abs() as usize > self.cap {
            return C64::new(0.0, 0.0);
        }
        self.blocks[d][(j + self.cap as i64) as usize]
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|c| c.norm_sqr() == 0.0))
    }

    /// Reality flag: `f[d][-j] == conj(f[d][j])` up to `tol`.
    pub fn is_real(&self, tol: f64) -> bool {
        let cap = self.cap as i64;
        self.blocks.iter().all(|b| {
            (-cap..=cap).all(|j| (b[(j + cap) as usize] - b[(cap - j) as usize].conj()).norm() <= tol)
        })
    }

    /// Projects onto the real-valued subspace.
    pub fn real_part(&self) -> CoeffFn {
        let cap = self.cap as i64;
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                (-cap..=cap).map(|j| 0.5 * (b[(j + cap) as usize] + b[(cap - j) as usize].conj())).collect()
            })
            .collect();
        CoeffFn { cap: self.cap, blocks }
    }

    fn padded(&self, cap: usize) -> CoeffFn {
        if cap == self.cap {
            return self.clone();
        }
        let mut out = Self::zeros(self.xdeg(), cap);
        let lo = self.cap.min(cap) as i64;
        for (d, b) in self.blocks.iter().enumerate() {
            for j in -lo..=lo {
                out.blocks[d][(j + cap as i64) as usize] = b[(j + self.cap as i64) as usize];
            }
        }
        out
    }

    /// Truncate to `|j| ≤ cap`, recording dropped mass.
    pub fn truncated(&self, cap: usize, grid: &Grid) -> CoeffFn {
        if cap >= self.cap {
            return self.clone();
        }
        let mut dropped = 0.0;
        for b in &self.blocks {
            for (i, c) in b.iter().enumerate() {
                let j = i as i64 - self.cap as i64;
                if j.unsigned_abs() as usize > cap {
                    dropped += c.norm_sqr();
                }
            }
        }
        grid.ledger().record(dropped);
        self.padded(cap)
    }

    fn trim_degree(&mut self) {
        while self.blocks.len() > 1 && self.blocks.last().unwrap().iter().all(|c| c.norm_sqr() == 0.0) {
            self.blocks.pop();
        }
    }

    /// Drop trailing modes that are negligible relative to the largest coefficient.
    fn trim_modes(&mut self, grid: &Grid) {
        let scale = self.max_abs();
        if scale == 0.0 {
            *self = CoeffFn::zero();
            return;
        }
        let thresh = 1e-17 * scale;
        let mut cap = self.cap;
        while cap > 0 {
            let lo = self.cap - cap;
            let hi = self.cap + cap;
            if self.blocks.iter().all(|b| b[lo].norm() <= thresh && b[hi].norm() <= thresh) {
                cap -= 1;
            } else {
                break;
            }
        }
        if cap < self.cap {
            *self = self.truncated(cap, grid);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().flat_map(|b| b.iter()).map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Sum of coefficient magnitudes: an upper bound of the sup norm on `[0,1]·`-scaled x.
    pub fn coeff_norm(&self) -> f64 {
        self.blocks.iter().flat_map(|b| b.iter()).map(|c| c.norm()).sum()
    }

    /// Coefficient norm of the x-polynomial part (blocks of degree ≥ 1).
    pub fn secular_norm(&self) -> f64 {
        self.blocks.iter().skip(1).flat_map(|b| b.iter()).map(|c| c.norm()).sum()
    }

    /// The degree-0 block alone.
    pub fn periodic_part(&self) -> CoeffFn {
        CoeffFn { cap: self.cap, blocks: vec![self.blocks[0].clone()] }
    }

    /// Discard blocks of degree above `max_deg`, recording their mass.
    pub fn drop_secular(&self, max_deg: usize, grid: &Grid) -> CoeffFn {
        if self.xdeg() <= max_deg {
            return self.clone();
        }
        let dropped: f64 = self.blocks[max_deg + 1..].iter().flat_map(|b| b.iter()).map(|c| c.norm_sqr()).sum();
        grid.ledger().record(dropped);
        let mut out = CoeffFn { cap: self.cap, blocks: self.blocks[..=max_deg].to_vec() };
        out.trim_degree();
        out
    }

    pub fn scale(&self, s: impl Into<C64>) -> CoeffFn {
        let s = s.into();
        let mut out = self.clone();
        out.blocks.iter_mut().flat_map(|b| b.iter_mut()).for_each(|c| *c *= s);
        out.trim_degree();
        out
    }

    /// `f(x + kε)`; exact.
    pub fn shift(&self, k: i64, eps: f64) -> CoeffFn {
        if k == 0 {
            return self.clone();
        }
        let cap = self.cap as i64;
        let h = k as f64 * eps;
        let phases: Vec<C64> = (-cap..=cap).map(|j| C64::from_polar(1.0, j as f64 * h)).collect();
        let mut out = Self::zeros(self.xdeg(), self.cap);
        for (d, b) in self.blocks.iter().enumerate() {
            for i in 0..=d {
                let w = binomial(d, i) * h.powi((d - i) as i32);
                for (idx, c) in b.iter().enumerate() {
                    out.blocks[i][idx] += w * phases[idx] * c;
                }
            }
        }
        out.trim_degree();
        out
    }

    /// Exact x-derivative.
    pub fn ddx(&self) -> CoeffFn {
        let cap = self.cap as i64;
        let mut out = Self::zeros(self.xdeg(), self.cap);
        for (d, b) in self.blocks.iter().enumerate() {
            for (idx, c) in b.iter().enumerate() {
                let j = idx as i64 - cap;
                out.blocks[d][idx] += C64::new(0.0, j as f64) * c;
                if d > 0 {
                    out.blocks[d - 1][idx] += d as f64 * c;
                }
            }
        }
        out.trim_degree();
        out
    }

    /// Product with mode truncation at `Jmax`.
    pub fn mul(&self, other: &CoeffFn, grid: &Grid) -> Result<CoeffFn> {
        let deg = self.xdeg() + other.xdeg();
        if self.is_zero() || other.is_zero() {
            return Ok(CoeffFn::zero());
        }
        if deg > grid.spec.max_xdeg {
            return Err(MethError::DegreeOverflow { degree: deg, cap: grid.spec.max_xdeg });
        }
        let (ca, cb) = (self.cap as i64, other.cap as i64);
        let full = (ca + cb) as usize;
        let cap = full.min(grid.spec.max_modes);
        let mut out = Self::zeros(deg, cap);
        let mut dropped = 0.0;
        for (da, ba) in self.blocks.iter().enumerate() {
            for (db, bb) in other.blocks.iter().enumerate() {
                let target = &mut out.blocks[da + db];
                if full <= cap {
                    for (ia, a) in ba.iter().enumerate() {
                        if a.norm_sqr() == 0.0 {
                            continue;
                        }
                        for (ib, b) in bb.iter().enumerate() {
                            target[ia + ib] += a * b;
                        }
                    }
                } else {
                    let mut acc = vec![C64::new(0.0, 0.0); 2 * full + 1];
                    for (ia, a) in ba.iter().enumerate() {
                        if a.norm_sqr() == 0.0 {
                            continue;
                        }
                        for (ib, b) in bb.iter().enumerate() {
                            acc[ia + ib] += a * b;
                        }
                    }
                    let off = full - cap;
                    for (i, c) in acc.into_iter().enumerate() {
                        if i >= off && i <= off + 2 * cap {
                            target[i - off] += c;
                        } else {
                            dropped += c.norm_sqr();
                        }
                    }
                }
            }
        }
        grid.ledger().record(dropped);
        out.trim_degree();
        out.trim_modes(grid);
        Ok(out)
    }

    /// Values at `n` equispaced points of `[0, 2π)` (degree-0 only).
    fn sample_periodic(&self, n: usize) -> Vec<C64> {
        let cap = self.cap as i64;
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for j in -cap..=cap {
            let idx = j.rem_euclid(n as i64) as usize;
            buf[idx] += self.blocks[0][(j + cap) as usize];
        }
        let mut planner = FftPlanner::new();
        planner.plan_fft_inverse(n).process(&mut buf);
        buf
    }

    fn from_samples(mut vals: Vec<C64>, cap: usize, grid: &Grid) -> CoeffFn {
        let n = vals.len();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut vals);
        let scale = 1.0 / n as f64;
        let half = (n - 1) / 2;
        let mut dropped = 0.0;
        let mut out = Self::zeros(0, cap);
        for (idx, c) in vals.into_iter().enumerate() {
            let j = if idx <= half { idx as i64 } else { idx as i64 - n as i64 };
            let c = c * scale;
            if j.unsigned_abs() as usize <= cap {
                out.blocks[0][(j + cap as i64) as usize] = c;
            } else {
                dropped += c.norm_sqr();
            }
        }
        grid.ledger().record(dropped);
        out.trim_modes(grid);
        out
    }

    /// `e^f` for periodic `f`, by collocation on `4·Jmax` points.
    pub fn exp(&self, grid: &Grid) -> Result<CoeffFn> {
        if self.xdeg() > 0 {
            return Err(MethError::SecularExponent { degree: self.xdeg() });
        }
        let n = grid.spec.norm_points();
        let vals = self.sample_periodic(n).into_iter().map(|v| v.exp()).collect();
        Ok(Self::from_samples(vals, grid.spec.max_modes, grid))
    }

    /// Pointwise reciprocal of a periodic function with no zeros.
    pub fn recip(&self, grid: &Grid) -> Result<CoeffFn> {
        if self.xdeg() > 0 {
            return Err(MethError::SecularExponent { degree: self.xdeg() });
        }
        let n = grid.spec.norm_points();
        let vals: Vec<C64> = self.sample_periodic(n);
        if vals.iter().any(|v| v.norm() < 1e-300) {
            return Err(MethError::NotInvertible);
        }
        Ok(Self::from_samples(vals.into_iter().map(|v| 1.0 / v).collect(), grid.spec.max_modes, grid))
    }

    /// Solves `(1−Λ) g = f`.
    ///
    /// Nonzero modes are divided by `1 − e^{ijε}`; mean content is absorbed by
    /// raising the x-degree by one. Gauge: the constant term of `g` is zero.
    pub fn invert_one_minus_shift(&self, eps: f64) -> Result<CoeffFn> {
        let cap = self.cap as i64;
        let deg = self.xdeg();
        let mut g = Self::zeros(deg + 1, self.cap);
        for j in -cap..=cap {
            let idx = (j + cap) as usize;
            if j == 0 {
                // -Σ_{d>i} C(d,i) ε^{d-i} g_d = f_i, solved for i = deg..0.
                for i in (0..=deg).rev() {
                    let mut rhs = self.blocks[i][idx];
                    for d in i + 2..=deg + 1 {
                        rhs += binomial(d, i) * eps.powi((d - i) as i32) * g.blocks[d][idx];
                    }
                    g.blocks[i + 1][idx] = -rhs / (binomial(i + 1, i) * eps);
                }
            } else {
                let phase = C64::from_polar(1.0, j as f64 * eps);
                let denom = C64::new(1.0, 0.0) - phase;
                if denom.norm() < RESONANCE_TOL && self.blocks.iter().any(|b| b[idx].norm() > 0.0) {
                    return Err(MethError::ResonantMode { mode: j, epsilon: eps });
                }
                for i in (0..=deg).rev() {
                    let mut rhs = self.blocks[i][idx];
                    for d in i + 1..=deg {
                        rhs += phase * binomial(d, i) * eps.powi((d - i) as i32) * g.blocks[d][idx];
                    }
                    g.blocks[i][idx] = if denom.norm() < RESONANCE_TOL { C64::new(0.0, 0.0) } else { rhs / denom };
                }
            }
        }
        g.trim_degree();
        Ok(g)
    }

    /// Period average over `[0, 2π)`.
    pub fn mean(&self) -> C64 {
        let cap = self.cap as i64;
        let mut total = C64::new(0.0, 0.0);
        for (d, b) in self.blocks.iter().enumerate() {
            for j in -cap..=cap {
                let c = b[(j + cap) as usize];
                if c.norm_sqr() == 0.0 {
                    continue;
                }
                total += c * monomial_mean(d, j);
            }
        }
        total
    }

    pub fn eval(&self, x: f64) -> C64 {
        let cap = self.cap as i64;
        let base = C64::from_polar(1.0, x);
        let mut xp = 1.0;
        let mut total = C64::new(0.0, 0.0);
        for b in &self.blocks {
            let mut acc = C64::new(0.0, 0.0);
            let mut e = C64::from_polar(1.0, -(cap as f64) * x);
            for c in b.iter() {
                acc += c * e;
                e *= base;
            }
            total += xp * acc;
            xp *= x;
        }
        total
    }

    /// Max modulus on the `4·Jmax` collocation grid of the centred period `[−π, π)`;
    /// secular parts vanish at the origin, so this window keeps their weight smallest.
    pub fn sup_norm(&self, grid: &Grid) -> f64 {
        let n = grid.spec.norm_points();
        if self.xdeg() == 0 {
            // FFT sampling is exact for band-limited periodic functions when n > 2J.
            if n > 2 * self.cap {
                return self.sample_periodic(n).iter().map(|v| v.norm()).fold(0.0, f64::max);
            }
        }
        (0..n).map(|i| self.eval(-PI + PERIOD * i as f64 / n as f64).norm()).fold(0.0, f64::max)
    }

    /// Complex conjugate function.
    pub fn conj(&self) -> CoeffFn {
        let cap = self.cap as i64;
        let blocks = self
            .blocks
            .iter()
            .map(|b| (-cap..=cap).map(|j| b[(cap - j) as usize].conj()).collect())
            .collect();
        CoeffFn { cap: self.cap, blocks }
    }
}

/// `(1/2π) ∫_0^{2π} x^d e^{ijx} dx`.
fn monomial_mean(d: usize, j: i64) -> C64 {
    if j == 0 {
        return C64::new(PERIOD.powi(d as i32) / (d + 1) as f64, 0.0);
    }
    let ij = C64::new(0.0, j as f64);
    let mut integral = C64::new(0.0, 0.0);
    for k in 1..=d {
        integral = (PERIOD.powi(k as i32) - k as f64 * integral) / ij;
    }
    integral / PERIOD
}

impl Add for &CoeffFn {
    type Output = CoeffFn;
    fn add(self, rhs: &CoeffFn) -> CoeffFn {
        let cap = self.cap.max(rhs.cap);
        let mut out = self.padded(cap);
        out += rhs;
        out
    }
}

impl AddAssign<&CoeffFn> for CoeffFn {
    fn add_assign(&mut self, rhs: &CoeffFn) {
        if rhs.cap > self.cap {
            *self = self.padded(rhs.cap);
        }
        while self.blocks.len() < rhs.blocks.len() {
            self.blocks.push(vec![C64::new(0.0, 0.0); 2 * self.cap + 1]);
        }
        let off = self.cap - rhs.cap;
        for (d, b) in rhs.blocks.iter().enumerate() {
            for (i, c) in b.iter().enumerate() {
                self.blocks[d][i + off] += c;
            }
        }
        self.trim_degree();
    }
}

impl SubAssign<&CoeffFn> for CoeffFn {
    fn sub_assign(&mut self, rhs: &CoeffFn) {
        *self += &(-rhs);
    }
}

impl Sub for &CoeffFn {
    type Output = CoeffFn;
    fn sub(self, rhs: &CoeffFn) -> CoeffFn {
        self + &(-rhs)
    }
}

impl Neg for &CoeffFn {
    type Output = CoeffFn;
    fn neg(self) -> CoeffFn {
        self.scale(-1.0)
    }
}

impl Mul<f64> for &CoeffFn {
    type Output = CoeffFn;
    fn mul(self, rhs: f64) -> CoeffFn {
        self.scale(rhs)
    }
}

#[derive(Serialize, Deserialize)]
struct CoeffFnRepr {
    xdeg: usize,
    #[serde(rename = "J")]
    j: usize,
    modes: Vec<Vec<[f64; 2]>>,
}

impl Serialize for CoeffFn {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CoeffFnRepr {
            xdeg: self.xdeg(),
            j: self.cap,
            modes: self.blocks.iter().map(|b| b.iter().map(|c| [c.re, c.im]).collect()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CoeffFn {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let r = CoeffFnRepr::deserialize(d)?;
        if r.modes.len() != r.xdeg + 1 {
            return Err(D::Error::custom("modes must have xdeg+1 blocks"));
        }
        if r.modes.iter().any(|b| b.len() != 2 * r.j + 1) {
            return Err(D::Error::custom("each block must have 2J+1 modes"));
        }
        let blocks = r.modes.into_iter().map(|b| b.into_iter().map(|[re, im]| C64::new(re, im)).collect()).collect();
        let mut f = CoeffFn { cap: r.j, blocks };
        f.trim_degree();
        Ok(f)
    }
}
