//! Double-double mirror of [`CoeffFn`] for computations whose results are
//! O(1) but are assembled from secular coefficients many orders larger.
//!
//! Only the operations the dressing pipeline needs are provided; results are
//! rounded back to [`CoeffFn`] once the cancellation has happened.

use num_complex::Complex;
use twofloat::TwoFloat;

use crate::error::{MethError, Result};
use crate::fields::{CoeffFn, Grid, RESONANCE_TOL};

pub type Dd = TwoFloat;
pub type Cdd = Complex<TwoFloat>;

const ZERO: Cdd = Complex { re: TwoFloat::from_f64(0.0), im: TwoFloat::from_f64(0.0) };

fn dd(x: f64) -> Dd {
    TwoFloat::from_f64(x)
}

fn is_zero(c: &Cdd) -> bool {
    c.re.hi() == 0.0 && c.im.hi() == 0.0
}

fn lift(c: num_complex::Complex64) -> Cdd {
    Complex::new(dd(c.re), dd(c.im))
}

fn round(c: &Cdd) -> num_complex::Complex64 {
    num_complex::Complex64::new(c.re.hi() + c.re.lo(), c.im.hi() + c.im.lo())
}

/// Double-double quotient by long division (three correction terms).
pub fn ddiv(a: Dd, b: Dd) -> Dd {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    TwoFloat::new_add(q1, q2) + q3
}

/// `1/z` in double-double.
fn cinv(z: Cdd) -> Cdd {
    let n = z.re * z.re + z.im * z.im;
    Complex::new(ddiv(z.re, n), -ddiv(z.im, n))
}

/// `e^{iθ}` to double-double accuracy: Taylor series on `θ/2^s`, then repeated squaring.
pub fn cis(theta: Dd) -> Cdd {
    let mut s = 0;
    let mut t = theta;
    while t.hi().abs() > 1e-3 {
        t = t / 2.0;
        s += 1;
    }
    let it = Complex::new(dd(0.0), t);
    let mut term = Complex::new(dd(1.0), dd(0.0));
    let mut sum = term;
    for n in 1..14 {
        term = term * it;
        term = Complex::new(ddiv(term.re, dd(n as f64)), ddiv(term.im, dd(n as f64)));
        sum = sum + term;
    }
    for _ in 0..s {
        sum = sum * sum;
    }
    sum
}

/// `e^{ijh}` for `j = -cap..=cap`.
fn phases(cap: usize, h: Dd) -> Vec<Cdd> {
    let base = cis(h);
    let inv = base.conj();
    let mut out = vec![ZERO; 2 * cap + 1];
    out[cap] = Complex::new(dd(1.0), dd(0.0));
    for j in 1..=cap {
        out[cap + j] = out[cap + j - 1] * base;
        out[cap - j] = out[cap - j + 1] * inv;
    }
    out
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Clone, Debug)]
pub struct HpFn {
    cap: usize,
    blocks: Vec<Vec<Cdd>>,
}

impl HpFn {
    pub fn zero() -> Self {
        HpFn { cap: 0, blocks: vec![vec![ZERO]] }
    }

    pub fn one() -> Self {
        Self::constant(1.0)
    }

    pub fn constant(c: f64) -> Self {
        HpFn { cap: 0, blocks: vec![vec![Complex::new(dd(c), dd(0.0))]] }
    }

    fn zeros(deg: usize, cap: usize) -> Self {
        HpFn { cap, blocks: vec![vec![ZERO; 2 * cap + 1]; deg + 1] }
    }

    pub fn from_coeff(f: &CoeffFn) -> Self {
        let cap = f.mode_cap();
        HpFn { cap, blocks: f.blocks().iter().map(|b| b.iter().map(|c| lift(*c)).collect()).collect() }
    }

    pub fn to_coeff(&self) -> CoeffFn {
        CoeffFn::from_blocks(self.blocks.iter().map(|b| b.iter().map(round).collect()).collect())
    }

    pub fn xdeg(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(is_zero))
    }

    fn padded(&self, cap: usize) -> Self {
        if cap == self.cap {
            return self.clone();
        }
        let mut out = Self::zeros(self.xdeg(), cap);
        let lo = self.cap.min(cap);
        for (d, b) in self.blocks.iter().enumerate() {
            for j in 0..=2 * lo {
                out.blocks[d][cap - lo + j] = b[self.cap - lo + j];
            }
        }
        out
    }

    fn trim(&mut self) {
        while self.blocks.len() > 1 && self.blocks.last().unwrap().iter().all(is_zero) {
            self.blocks.pop();
        }
        let mut cap = self.cap;
        while cap > 0 && self.blocks.iter().all(|b| is_zero(&b[self.cap - cap]) && is_zero(&b[self.cap + cap])) {
            cap -= 1;
        }
        if cap < self.cap {
            *self = self.padded(cap);
        }
    }

    pub fn add_assign(&mut self, o: &HpFn) {
        if o.cap > self.cap {
            *self = self.padded(o.cap);
        }
        while self.blocks.len() < o.blocks.len() {
            self.blocks.push(vec![ZERO; 2 * self.cap + 1]);
        }
        let off = self.cap - o.cap;
        for (d, b) in o.blocks.iter().enumerate() {
            for (i, c) in b.iter().enumerate() {
                if !is_zero(c) {
                    self.blocks[d][off + i] = self.blocks[d][off + i] + c;
                }
            }
        }
    }

    pub fn sub_assign(&mut self, o: &HpFn) {
        self.add_assign(&o.scale(-1.0));
    }

    pub fn scale(&self, s: f64) -> HpFn {
        let mut out = self.clone();
        out.blocks.iter_mut().flat_map(|b| b.iter_mut()).for_each(|c| *c = Complex::new(c.re * s, c.im * s));
        out
    }

    pub fn scale_dd(&self, s: Dd) -> HpFn {
        let mut out = self.clone();
        out.blocks.iter_mut().flat_map(|b| b.iter_mut()).for_each(|c| *c = Complex::new(c.re * s, c.im * s));
        out
    }

    /// `f(x + kε)`.
    pub fn shift(&self, k: i64, eps: f64) -> HpFn {
        if k == 0 {
            return self.clone();
        }
        let h = dd(eps) * (k as f64);
        let ph = phases(self.cap, h);
        let mut out = Self::zeros(self.xdeg(), self.cap);
        let hp: Vec<Dd> = (0..=self.xdeg()).map(|p| h.powi(p as i32)).collect();
        for (d, b) in self.blocks.iter().enumerate() {
            for i in 0..=d {
                let w = hp[d - i] * binomial(d, i);
                for (idx, c) in b.iter().enumerate() {
                    if is_zero(c) {
                        continue;
                    }
                    let t = ph[idx] * c;
                    out.blocks[i][idx] = out.blocks[i][idx] + Complex::new(t.re * w, t.im * w);
                }
            }
        }
        out.trim();
        out
    }

    pub fn ddx(&self) -> HpFn {
        let cap = self.cap as i64;
        let mut out = Self::zeros(self.xdeg(), self.cap);
        for (d, b) in self.blocks.iter().enumerate() {
            for (idx, c) in b.iter().enumerate() {
                if is_zero(c) {
                    continue;
                }
                let j = (idx as i64 - cap) as f64;
                out.blocks[d][idx] = out.blocks[d][idx] + Complex::new(-(c.im * j), c.re * j);
                if d > 0 {
                    out.blocks[d - 1][idx] = out.blocks[d - 1][idx] + Complex::new(c.re * d as f64, c.im * d as f64);
                }
            }
        }
        out.trim();
        out
    }

    /// Product truncated at `Jmax`; dropped L² mass is recorded in the grid's ledger.
    pub fn mul(&self, o: &HpFn, grid: &Grid) -> Result<HpFn> {
        if self.is_zero() || o.is_zero() {
            return Ok(HpFn::zero());
        }
        let deg = self.xdeg() + o.xdeg();
        if deg > grid.spec.max_xdeg {
            return Err(MethError::DegreeOverflow { degree: deg, cap: grid.spec.max_xdeg });
        }
        let (ca, cb) = (self.cap as i64, o.cap as i64);
        let cap = ((ca + cb) as usize).min(grid.spec.max_modes) as i64;
        let mut out = Self::zeros(deg, cap as usize);
        let mut dropped = 0.0;
        for (da, ba) in self.blocks.iter().enumerate() {
            let nza: Vec<(i64, &Cdd)> =
                ba.iter().enumerate().filter(|(_, c)| !is_zero(c)).map(|(i, c)| (i as i64 - ca, c)).collect();
            if nza.is_empty() {
                continue;
            }
            for (db, bb) in o.blocks.iter().enumerate() {
                let target = &mut out.blocks[da + db];
                for (ib, b) in bb.iter().enumerate() {
                    if is_zero(b) {
                        continue;
                    }
                    let jb = ib as i64 - cb;
                    for &(ja, a) in &nza {
                        let j = ja + jb;
                        let p = a * b;
                        if j.abs() > cap {
                            dropped += round(&p).norm_sqr();
                        } else {
                            let t = &mut target[(j + cap) as usize];
                            *t = *t + p;
                        }
                    }
                }
            }
        }
        grid.ledger().record(dropped);
        out.trim();
        Ok(out)
    }

    /// Solves `(1−Λ)g = f` exactly as [`CoeffFn::invert_one_minus_shift`] does.
    pub fn invert_one_minus_shift(&self, eps: f64) -> Result<HpFn> {
        let cap = self.cap as i64;
        let deg = self.xdeg();
        let mut g = Self::zeros(deg + 1, self.cap);
        let e = dd(eps);
        let ep: Vec<Dd> = (0..=deg + 1).map(|p| e.powi(p as i32)).collect();
        let ph = phases(self.cap, e);
        for j in -cap..=cap {
            let idx = (j + cap) as usize;
            if j == 0 {
                for i in (0..=deg).rev() {
                    let mut rhs = self.blocks[i][idx];
                    for d in i + 2..=deg + 1 {
                        let w = ep[d - i] * binomial(d, i);
                        let gd = g.blocks[d][idx];
                        rhs = rhs + Complex::new(gd.re * w, gd.im * w);
                    }
                    let den = e * ((i + 1) as f64);
                    g.blocks[i + 1][idx] = Complex::new(-ddiv(rhs.re, den), -ddiv(rhs.im, den));
                }
            } else {
                let phase = ph[idx];
                let denom = Complex::new(dd(1.0) - phase.re, -phase.im);
                let dn = round(&denom).norm();
                let nonzero = self.blocks.iter().any(|b| !is_zero(&b[idx]));
                if dn < RESONANCE_TOL {
                    if nonzero {
                        return Err(MethError::ResonantMode { mode: j, epsilon: eps });
                    }
                    continue;
                }
                let inv = cinv(denom);
                for i in (0..=deg).rev() {
                    let mut rhs = self.blocks[i][idx];
                    for d in i + 1..=deg {
                        let w = ep[d - i] * binomial(d, i);
                        let gd = phase * g.blocks[d][idx];
                        rhs = rhs + Complex::new(gd.re * w, gd.im * w);
                    }
                    g.blocks[i][idx] = rhs * inv;
                }
            }
        }
        g.trim();
        Ok(g)
    }
}

/// `Σ_k a_k Λ^k` with double-double coefficients over a contiguous window.
#[derive(Clone, Debug)]
pub struct HpSeries {
    pub kmin: i64,
    pub coeffs: Vec<HpFn>,
}

impl HpSeries {
    pub fn get(&self, k: i64) -> Option<&HpFn> {
        if k < self.kmin {
            return None;
        }
        self.coeffs.get((k - self.kmin) as usize)
    }

    pub fn kmax(&self) -> i64 {
        self.kmin + self.coeffs.len() as i64 - 1
    }

    /// Coefficients of `self ∘ other` for Λ-powers in `[lo, hi]` only.
    pub fn mul_window(&self, other: &HpSeries, lo: i64, hi: i64, grid: &Grid) -> Result<HpSeries> {
        let eps = grid.eps();
        let mut coeffs = vec![HpFn::zero(); (hi - lo + 1).max(0) as usize];
        for (ia, a) in self.coeffs.iter().enumerate() {
            if a.is_zero() {
                continue;
            }
            let i = self.kmin + ia as i64;
            let mut shifted: Option<Vec<HpFn>> = None;
            for (ib, b) in other.coeffs.iter().enumerate() {
                let k = i + other.kmin + ib as i64;
                if k < lo || k > hi || b.is_zero() {
                    continue;
                }
                let sh = shifted.get_or_insert_with(|| vec![HpFn::zero(); other.coeffs.len()]);
                if sh[ib].is_zero() {
                    sh[ib] = b.shift(i, eps);
                }
                let p = a.mul(&sh[ib], grid)?;
                coeffs[(k - lo) as usize].add_assign(&p);
            }
        }
        Ok(HpSeries { kmin: lo, coeffs })
    }

    pub fn derivative(&self, eps: f64) -> HpSeries {
        HpSeries { kmin: self.kmin, coeffs: self.coeffs.iter().map(|c| c.ddx().scale(eps)).collect() }
    }

    pub fn rounded(&self) -> Vec<CoeffFn> {
        self.coeffs.iter().map(|c| c.to_coeff()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::GridSpec;

    #[test]
    fn division_is_double_double() {
        let x = ddiv(dd(1.0), dd(3.0));
        assert!((x * 3.0 - 1.0).hi().abs() < 1e-31);
        let z = Complex::new(dd(0.3), dd(-1.7));
        let w = z * cinv(z) - Complex::new(dd(1.0), dd(0.0));
        assert!(round(&w).norm() < 1e-31);
    }

    #[test]
    fn cis_matches_double() {
        for &t in &[0.1, -0.7, 2.5, 6.0] {
            let z = cis(dd(t));
            assert!((z.re.hi() - t.cos()).abs() < 1e-16);
            assert!((z.im.hi() - t.sin()).abs() < 1e-16);
            let n = z.re * z.re + z.im * z.im - 1.0;
            assert!(n.hi().abs() < 1e-26);
        }
    }

    #[test]
    fn mirrors_double_operations() {
        let g = Grid::new(GridSpec::default()).unwrap();
        let f = &(&CoeffFn::cos(2).scale(0.3) + &CoeffFn::x_pow(1).scale(0.5)) + &CoeffFn::sin(1);
        let h = &CoeffFn::sin(3).scale(0.2) + &CoeffFn::one();
        let hf = HpFn::from_coeff(&f);
        let hh = HpFn::from_coeff(&h);
        let close = |a: &CoeffFn, b: &CoeffFn| (a - b).max_abs() < 1e-14;
        assert!(close(&hf.shift(3, 0.1).to_coeff(), &f.shift(3, 0.1)));
        assert!(close(&hf.ddx().to_coeff(), &f.ddx()));
        assert!(close(&hf.mul(&hh, &g).unwrap().to_coeff(), &f.mul(&h, &g).unwrap()));
        assert!(close(
            &hf.invert_one_minus_shift(0.1).unwrap().to_coeff(),
            &f.invert_one_minus_shift(0.1).unwrap()
        ));
    }

    #[test]
    fn inversion_is_exact_to_double_double() {
        let f = &(&CoeffFn::cos(1) + &CoeffFn::x_pow(2)) + &CoeffFn::constant(0.3);
        let hf = HpFn::from_coeff(&f);
        let g = hf.invert_one_minus_shift(0.1).unwrap();
        let mut back = g.clone();
        back.sub_assign(&g.shift(1, 0.1));
        back.sub_assign(&hf);
        let worst = back.blocks.iter().flatten().map(|c| round(c).norm()).fold(0.0, f64::max);
        assert!(worst < 1e-27, "{worst}");
    }
}
