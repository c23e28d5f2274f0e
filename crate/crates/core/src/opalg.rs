//! Difference operators `Σ_k a_k Λ^k` and their extension by powers of the
//! derivation `ε∂`.
//!
//! Every operator may be a finite window of an infinite formal series. Each
//! [`DiffOp`] therefore carries two intervals: the *support* of the true
//! series, and the *trust* interval of Λ-powers whose stored coefficient
//! (zero when absent) equals the true one. Products and sums propagate both,
//! so residual checks can be restricted to coefficients that truncation
//! cannot have touched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MethError, Result};
use crate::fields::{CoeffFn, Grid};

/// Stand-in for ±∞ in band arithmetic.
pub const INF: i64 = 1 << 40;

/// Closed interval of Λ-powers; empty when `lo > hi`. Bounds at `±INF` are unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub lo: i64,
    pub hi: i64,
}

impl Span {
    pub const ALL: Span = Span { lo: -INF, hi: INF };
    pub const EMPTY: Span = Span { lo: 1, hi: 0 };

    pub fn new(lo: i64, hi: i64) -> Span {
        Span { lo: lo.clamp(-INF, INF), hi: hi.clamp(-INF, INF) }
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn contains(&self, k: i64) -> bool {
        self.lo <= k && k <= self.hi
    }

    pub fn intersect(&self, o: &Span) -> Span {
        let s = Span { lo: self.lo.max(o.lo), hi: self.hi.min(o.hi) };
        if s.is_empty() {
            Span::EMPTY
        } else {
            s
        }
    }

    pub fn hull(&self, o: &Span) -> Span {
        if self.is_empty() {
            return *o;
        }
        if o.is_empty() {
            return *self;
        }
        Span { lo: self.lo.min(o.lo), hi: self.hi.max(o.hi) }
    }

    fn add(&self, o: &Span) -> Span {
        if self.is_empty() || o.is_empty() {
            return Span::EMPTY;
        }
        Span::new(self.lo + o.lo, self.hi + o.hi)
    }

    /// Extend to infinity on any side where this interval already covers the support edge.
    fn extend_past(&self, support: &Span) -> Span {
        if support.is_empty() {
            return Span::ALL;
        }
        if self.is_empty() {
            return Span::EMPTY;
        }
        let lo = if self.lo <= support.lo { -INF } else { self.lo };
        let hi = if self.hi >= support.hi { INF } else { self.hi };
        Span { lo, hi }
    }

    pub fn is_finite(&self) -> bool {
        !self.is_empty() && self.lo > -INF && self.hi < INF
    }
}

/// `Σ_k a_k(x) Λ^k` over a stored window, with support/trust metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffOp {
    kmin: i64,
    coeffs: Vec<CoeffFn>,
    support: Span,
    trust: Span,
}

impl DiffOp {
    pub fn zero() -> DiffOp {
        DiffOp { kmin: 0, coeffs: Vec::new(), support: Span::EMPTY, trust: Span::ALL }
    }

    /// Finite operator, known exactly.
    pub fn exact(kmin: i64, coeffs: Vec<CoeffFn>) -> DiffOp {
        let mut op = DiffOp { kmin, coeffs, support: Span::EMPTY, trust: Span::ALL };
        op.support = op.nonzero_span();
        op.compact();
        op
    }

    pub fn from_map(map: BTreeMap<i64, CoeffFn>) -> DiffOp {
        if map.is_empty() {
            return DiffOp::zero();
        }
        let lo = *map.keys().next().unwrap();
        let hi = *map.keys().last().unwrap();
        let coeffs = (lo..=hi).map(|k| map.get(&k).cloned().unwrap_or_else(CoeffFn::zero)).collect();
        DiffOp::exact(lo, coeffs)
    }

    /// A window of an infinite (or longer) series.
    pub fn truncated(kmin: i64, coeffs: Vec<CoeffFn>, support: Span, trust: Span) -> DiffOp {
        let mut op = DiffOp { kmin, coeffs, support, trust };
        if trust == Span::ALL {
            // fully known: the true support is what is stored
            op.support = op.nonzero_span();
        }
        op.compact();
        op
    }

    /// `f Λ^k`.
    pub fn monomial(k: i64, f: CoeffFn) -> DiffOp {
        DiffOp::exact(k, vec![f])
    }

    pub fn shift_op(k: i64) -> DiffOp {
        DiffOp::monomial(k, CoeffFn::one())
    }

    fn nonzero_span(&self) -> Span {
        let mut s = Span::EMPTY;
        for (i, c) in self.coeffs.iter().enumerate() {
            if !c.is_zero() {
                let k = self.kmin + i as i64;
                s = s.hull(&Span::new(k, k));
            }
        }
        s
    }

    /// Drop stored zeros at both ends.
    fn compact(&mut self) {
        let nz = self.nonzero_span();
        if nz.is_empty() {
            self.coeffs.clear();
            self.kmin = 0;
            return;
        }
        let start = (nz.lo - self.kmin) as usize;
        let end = (nz.hi - self.kmin) as usize;
        self.coeffs = self.coeffs[start..=end].to_vec();
        self.kmin = nz.lo;
    }

    pub fn support(&self) -> Span {
        self.support
    }

    pub fn trust(&self) -> Span {
        self.trust
    }

    /// Stored window (empty for the zero operator).
    pub fn band(&self) -> Span {
        if self.coeffs.is_empty() {
            Span::EMPTY
        } else {
            Span::new(self.kmin, self.kmin + self.coeffs.len() as i64 - 1)
        }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty() && self.support.is_empty()
    }

    pub fn coeff(&self, k: i64) -> Option<&CoeffFn> {
        if k < self.kmin {
            return None;
        }
        self.coeffs.get((k - self.kmin) as usize)
    }

    pub fn coeff_or_zero(&self, k: i64) -> CoeffFn {
        self.coeff(k).cloned().unwrap_or_else(CoeffFn::zero)
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, &CoeffFn)> {
        self.coeffs.iter().enumerate().map(move |(i, c)| (self.kmin + i as i64, c))
    }

    pub fn with_trust(mut self, trust: Span) -> DiffOp {
        self.trust = trust;
        self
    }

    pub fn map_coeffs(&self, f: impl Fn(&CoeffFn) -> CoeffFn) -> DiffOp {
        let mut op = DiffOp {
            kmin: self.kmin,
            coeffs: self.coeffs.iter().map(f).collect(),
            support: self.support,
            trust: self.trust,
        };
        op.compact();
        op
    }

    pub fn scale(&self, s: f64) -> DiffOp {
        if s == 0.0 {
            return DiffOp::zero();
        }
        self.map_coeffs(|c| c.scale(s))
    }

    /// Coefficientwise `ε^i ∂^i`.
    pub fn derivative(&self, order: usize, eps: f64) -> DiffOp {
        if order == 0 {
            return self.clone();
        }
        let e = eps.powi(order as i32);
        self.map_coeffs(|c| {
            let mut d = c.clone();
            for _ in 0..order {
                d = d.ddx();
            }
            d.scale(e)
        })
    }

    /// Trust of `self + other`: both must be exact at `k`.
    pub fn add(&self, other: &DiffOp) -> DiffOp {
        if other.is_zero() {
            return self.clone();
        }
        if self.is_zero() {
            return other.clone();
        }
        let band = self.band().hull(&other.band());
        let coeffs = if band.is_empty() {
            Vec::new()
        } else {
            (band.lo..=band.hi)
                .map(|k| match (self.coeff(k), other.coeff(k)) {
                    (Some(a), Some(b)) => a + b,
                    (Some(a), None) => a.clone(),
                    (None, Some(b)) => b.clone(),
                    (None, None) => CoeffFn::zero(),
                })
                .collect()
        };
        DiffOp::truncated(
            band.lo.min(INF),
            coeffs,
            self.support.hull(&other.support),
            self.trust.intersect(&other.trust),
        )
    }

    pub fn sub(&self, other: &DiffOp) -> DiffOp {
        self.add(&other.scale(-1.0))
    }

    /// Trust interval of a product, from the factors' supports and trusts.
    pub fn product_trust(a_sup: Span, a_tr: Span, b_sup: Span, b_tr: Span) -> Span {
        let sup = a_sup.add(&b_sup);
        if sup.is_empty() {
            return Span::ALL;
        }
        let mut lo = -4 * INF;
        let mut hi = 4 * INF;
        // max(a.lo, k-b.hi) >= TA.lo
        if a_tr.lo > a_sup.lo {
            lo = lo.max(a_tr.lo + b_sup.hi);
        }
        // min(a.hi, k-b.lo) <= TA.hi
        if a_tr.hi < a_sup.hi {
            hi = hi.min(a_tr.hi + b_sup.lo);
        }
        // k - max(a.lo, k-b.hi) <= TB.hi
        if b_tr.hi < b_sup.hi {
            hi = hi.min(a_sup.lo + b_tr.hi);
        }
        // k - min(a.hi, k-b.lo) >= TB.lo
        if b_tr.lo > b_sup.lo {
            lo = lo.max(a_sup.hi + b_tr.lo);
        }
        if a_tr.is_empty() || b_tr.is_empty() {
            return Span::EMPTY;
        }
        Span::new(lo, hi).extend_past(&sup)
    }

    /// `self ∘ other` with normal ordering `Λ^i f = f(x+iε) Λ^i`.
    pub fn mul(&self, other: &DiffOp, grid: &Grid) -> Result<DiffOp> {
        if self.is_zero() || other.is_zero() {
            return Ok(DiffOp::zero());
        }
        let support = self.support.add(&other.support);
        let mut trust = DiffOp::product_trust(self.support, self.trust, other.support, other.trust);
        let window = trust.intersect(&support).intersect(&self.band().add(&other.band()));
        if window.is_empty() {
            if trust.is_empty() {
                return Err(MethError::BandOverflow("product has no trusted coefficients".into()));
            }
            return Ok(DiffOp::truncated(0, Vec::new(), support, trust));
        }
        if !window.is_finite() {
            return Err(MethError::BandOverflow("unbounded product window".into()));
        }
        let eps = grid.eps();
        let mut out: Vec<CoeffFn> = vec![CoeffFn::zero(); (window.hi - window.lo + 1) as usize];
        for (i, a) in self.iter() {
            if a.is_zero() {
                continue;
            }
            for (j, b) in other.iter() {
                let k = i + j;
                if !window.contains(k) || b.is_zero() {
                    continue;
                }
                let term = a.mul(&b.shift(i, eps), grid)?;
                out[(k - window.lo) as usize] += &term;
            }
        }
        let cap = grid.spec.band_cap;
        let mut dropped = 0.0;
        let mut kept = Vec::new();
        let mut kmin = None;
        for (idx, c) in out.into_iter().enumerate() {
            let k = window.lo + idx as i64;
            if k.abs() > cap {
                dropped += c.blocks().iter().flat_map(|b| b.iter()).map(|z| z.norm_sqr()).sum::<f64>();
                continue;
            }
            kmin.get_or_insert(k);
            kept.push(c);
        }
        if window.lo < -cap && support.lo < -cap {
            trust.lo = trust.lo.max(-cap);
        }
        if window.hi > cap && support.hi > cap {
            trust.hi = trust.hi.min(cap);
        }
        grid.ledger().record(dropped);
        if trust.is_empty() {
            return Err(MethError::BandOverflow(format!("product exceeds band cap {cap}")));
        }
        Ok(DiffOp::truncated(kmin.unwrap_or(0), kept, support, trust))
    }

    /// Conjugation by a shift power: `Λ^k A Λ^{-k}` (coefficients shifted by k).
    pub fn shift_conj(&self, k: i64, eps: f64) -> DiffOp {
        self.map_coeffs(|c| c.shift(k, eps))
    }

    /// Strictly negative part `Σ_{k<0}`.
    pub fn minus(&self) -> DiffOp {
        self.select(|k| k < 0, Span::new(-INF, -1))
    }

    /// Non-negative part `Σ_{k≥0}`.
    pub fn plus(&self) -> DiffOp {
        self.select(|k| k >= 0, Span::new(0, INF))
    }

    fn select(&self, keep: impl Fn(i64) -> bool, range: Span) -> DiffOp {
        let coeffs: Vec<CoeffFn> =
            self.iter().map(|(k, c)| if keep(k) { c.clone() } else { CoeffFn::zero() }).collect();
        let support = self.support.intersect(&range);
        let trust = self.trust.intersect(&range).extend_past(&support);
        let trust = if self.trust.intersect(&range).is_empty() && !support.is_empty() {
            Span::EMPTY
        } else {
            trust
        };
        DiffOp::truncated(self.kmin, coeffs, support, trust)
    }

    /// Max coefficient sup norm over trusted Λ-powers inside `window`.
    pub fn norm_on(&self, window: Span, grid: &Grid) -> f64 {
        let w = window.intersect(&self.trust);
        self.iter().filter(|(k, _)| w.contains(*k)).map(|(_, c)| c.sup_norm(grid)).fold(0.0, f64::max)
    }

    /// Same as [`DiffOp::norm_on`] but with the coefficient norm `Σ|f_{d,j}|`.
    pub fn coeff_norm_on(&self, window: Span) -> f64 {
        let w = window.intersect(&self.trust);
        self.iter().filter(|(k, _)| w.contains(*k)).map(|(_, c)| c.coeff_norm()).fold(0.0, f64::max)
    }

    /// Largest x-degree among stored coefficients.
    pub fn xdeg(&self) -> usize {
        self.coeffs.iter().map(|c| c.xdeg()).max().unwrap_or(0)
    }

    pub fn map_trusted(&self, f: impl Fn(&CoeffFn) -> CoeffFn) -> DiffOp {
        self.map_coeffs(f)
    }
}

/// `Σ_d P_d (ε∂)^d` with difference-operator coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedOp {
    parts: Vec<DiffOp>,
}

impl From<DiffOp> for MixedOp {
    fn from(p: DiffOp) -> Self {
        MixedOp { parts: vec![p] }
    }
}

impl MixedOp {
    pub fn zero() -> MixedOp {
        MixedOp { parts: vec![DiffOp::zero()] }
    }

    pub fn identity() -> MixedOp {
        DiffOp::shift_op(0).into()
    }

    pub fn scalar(c: f64) -> MixedOp {
        DiffOp::monomial(0, CoeffFn::constant(c)).into()
    }

    pub fn mult(f: CoeffFn) -> MixedOp {
        DiffOp::monomial(0, f).into()
    }

    pub fn shift_op(k: i64) -> MixedOp {
        DiffOp::shift_op(k).into()
    }

    /// The derivation `ε∂`.
    pub fn eps_d() -> MixedOp {
        MixedOp::from_parts(vec![DiffOp::zero(), DiffOp::shift_op(0)])
    }

    pub fn from_parts(mut parts: Vec<DiffOp>) -> MixedOp {
        if parts.is_empty() {
            parts.push(DiffOp::zero());
        }
        let mut op = MixedOp { parts };
        op.trim();
        op
    }

    fn trim(&mut self) {
        while self.parts.len() > 1 && self.parts.last().unwrap().is_zero() {
            self.parts.pop();
        }
    }

    pub fn parts(&self) -> &[DiffOp] {
        &self.parts
    }

    /// The `(ε∂)^0` part.
    pub fn diff(&self) -> &DiffOp {
        &self.parts[0]
    }

    pub fn part(&self, d: usize) -> Option<&DiffOp> {
        self.parts.get(d)
    }

    pub fn deriv_order(&self) -> usize {
        self.parts.len() - 1
    }

    pub fn is_pure_difference(&self) -> bool {
        self.parts.len() == 1
    }

    /// Trust common to all parts.
    pub fn trust(&self) -> Span {
        self.parts.iter().fold(Span::ALL, |t, p| t.intersect(&p.trust()))
    }

    pub fn add(&self, other: &MixedOp) -> MixedOp {
        let n = self.parts.len().max(other.parts.len());
        let zero = DiffOp::zero();
        let parts = (0..n)
            .map(|d| self.parts.get(d).unwrap_or(&zero).add(other.parts.get(d).unwrap_or(&zero)))
            .collect();
        MixedOp::from_parts(parts)
    }

    pub fn sub(&self, other: &MixedOp) -> MixedOp {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> MixedOp {
        MixedOp::from_parts(self.parts.iter().map(|p| p.scale(s)).collect())
    }

    /// Normal-ordered product, using `(ε∂)^a Q = Σ_i C(a,i) (ε^i ∂^i Q) (ε∂)^{a-i}`.
    pub fn mul(&self, other: &MixedOp, grid: &Grid) -> Result<MixedOp> {
        let eps = grid.eps();
        let mut acc: Vec<DiffOp> = Vec::new();
        for (a, p) in self.parts.iter().enumerate() {
            if p.is_zero() {
                continue;
            }
            for (b, q) in other.parts.iter().enumerate() {
                if q.is_zero() {
                    continue;
                }
                let mut binom = 1.0;
                for i in 0..=a {
                    if i > 0 {
                        binom = binom * (a - i + 1) as f64 / i as f64;
                    }
                    let dq = q.derivative(i, eps);
                    if dq.is_zero() && dq.support().is_empty() {
                        continue;
                    }
                    let term = p.mul(&dq, grid)?.scale(binom);
                    if term.is_zero() {
                        continue;
                    }
                    let d = a + b - i;
                    if d > grid.spec.max_deriv {
                        return Err(MethError::DerivationOverflow { order: d, cap: grid.spec.max_deriv });
                    }
                    while acc.len() <= d {
                        acc.push(DiffOp::zero());
                    }
                    acc[d] = acc[d].add(&term);
                }
            }
        }
        Ok(MixedOp::from_parts(acc))
    }

    pub fn commutator(&self, other: &MixedOp, grid: &Grid) -> Result<MixedOp> {
        Ok(self.mul(other, grid)?.sub(&other.mul(self, grid)?))
    }

    pub fn pow(&self, n: usize, grid: &Grid) -> Result<MixedOp> {
        let mut out = MixedOp::identity();
        for _ in 0..n {
            out = out.mul(self, grid)?;
        }
        Ok(out)
    }

    /// Strictly negative Λ-part of the `d = 0` component; derivation terms all belong to the plus part.
    pub fn minus(&self) -> MixedOp {
        self.parts[0].minus().into()
    }

    pub fn plus(&self) -> MixedOp {
        let mut parts = self.parts.clone();
        parts[0] = parts[0].plus();
        MixedOp::from_parts(parts)
    }

    /// `Res A`: Λ^0 coefficient of the `d = 0` part; derivation terms contribute nothing.
    pub fn residue(&self) -> CoeffFn {
        self.parts[0].coeff_or_zero(0)
    }

    /// Max coefficient sup norm over all parts, restricted to `window ∩ trust`.
    pub fn norm_on(&self, window: Span, grid: &Grid) -> f64 {
        self.parts.iter().map(|p| p.norm_on(window, grid)).fold(0.0, f64::max)
    }

    pub fn norm(&self, grid: &Grid) -> f64 {
        self.norm_on(Span::ALL, grid)
    }

    pub fn coeff_norm_on(&self, window: Span) -> f64 {
        self.parts.iter().map(|p| p.coeff_norm_on(window)).fold(0.0, f64::max)
    }

    pub fn map_coeffs(&self, f: impl Fn(&CoeffFn) -> CoeffFn) -> MixedOp {
        MixedOp::from_parts(self.parts.iter().map(|p| p.map_coeffs(&f)).collect())
    }

    pub fn xdeg(&self) -> usize {
        self.parts.iter().map(|p| p.xdeg()).max().unwrap_or(0)
    }

    /// The Lax operator `Λ + u + e^v Λ^{-1}`.
    pub fn lax(u: &CoeffFn, v: &CoeffFn, grid: &Grid) -> Result<MixedOp> {
        Ok(DiffOp::exact(-1, vec![v.exp(grid)?, u.clone(), CoeffFn::one()]).into())
    }
}

#[derive(Serialize, Deserialize)]
struct DiffOpRepr {
    band: [i64; 2],
    coeffs: BTreeMap<i64, CoeffFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    support: Option<[i64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trust: Option<[i64; 2]>,
}

impl Serialize for DiffOp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let band = self.band();
        DiffOpRepr {
            band: [band.lo, band.hi],
            coeffs: self.iter().map(|(k, c)| (k, c.clone())).collect(),
            support: Some([self.support.lo, self.support.hi]),
            trust: Some([self.trust.lo, self.trust.hi]),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DiffOp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = DiffOpRepr::deserialize(d)?;
        let exact = DiffOp::from_map(r.coeffs.clone());
        match (r.support, r.trust) {
            (Some(s), Some(t)) => {
                let lo = r.coeffs.keys().next().copied().unwrap_or(0);
                let hi = r.coeffs.keys().last().copied().unwrap_or(-1);
                let coeffs = (lo..=hi).map(|k| r.coeffs.get(&k).cloned().unwrap_or_else(CoeffFn::zero)).collect();
                Ok(DiffOp::truncated(lo, coeffs, Span::new(s[0], s[1]), Span::new(t[0], t[1])))
            }
            _ => Ok(exact),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MixedOpRepr {
    parts: BTreeMap<usize, DiffOp>,
}

impl Serialize for MixedOp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MixedOpRepr { parts: self.parts.iter().cloned().enumerate().collect() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MixedOp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = MixedOpRepr::deserialize(d)?;
        let n = r.parts.keys().last().map(|d| d + 1).unwrap_or(1);
        let parts = (0..n).map(|d| r.parts.get(&d).cloned().unwrap_or_else(DiffOp::zero)).collect();
        Ok(MixedOp::from_parts(parts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::GridSpec;

    fn grid() -> Grid {
        Grid::new(GridSpec::default()).unwrap()
    }

    fn fields(g: &Grid) -> (CoeffFn, CoeffFn) {
        let u = &CoeffFn::cos(1).scale(0.2) + &CoeffFn::sin(2).scale(0.05);
        let v = &CoeffFn::sin(1).scale(0.15) + &CoeffFn::cos(3).scale(0.03);
        let _ = g;
        (u, v)
    }

    fn diff_close(a: &CoeffFn, b: &CoeffFn, tol: f64) -> bool {
        (a - b).max_abs() <= tol
    }

    #[test]
    fn shift_through_exponential() {
        let g = grid();
        let (_, v) = fields(&g);
        let ev = v.exp(&g).unwrap();
        let p = MixedOp::shift_op(1).mul(&DiffOp::monomial(-1, ev.clone()).into(), &g).unwrap();
        assert_eq!(p.diff().band(), Span::new(0, 0));
        assert!(diff_close(p.diff().coeff(0).unwrap(), &ev.shift(1, g.eps()), 1e-15));
    }

    #[test]
    fn leibniz_rule() {
        let g = grid();
        let (u, _) = fields(&g);
        let p = MixedOp::eps_d().mul(&MixedOp::mult(u.clone()), &g).unwrap();
        assert!(diff_close(p.part(1).unwrap().coeff(0).unwrap(), &u, 0.0));
        assert!(diff_close(p.diff().coeff(0).unwrap(), &u.ddx().scale(g.eps()), 1e-15));
    }

    #[test]
    fn lax_square_against_hand_expansion() {
        let g = grid();
        let eps = g.eps();
        let (u, v) = fields(&g);
        let l = MixedOp::lax(&u, &v, &g).unwrap();
        let l2 = l.mul(&l, &g).unwrap();
        let ev = v.exp(&g).unwrap();
        let m = |a: &CoeffFn, b: &CoeffFn| a.mul(b, &g).unwrap();
        let want = [
            (2, CoeffFn::one()),
            (1, &u.shift(1, eps) + &u),
            (0, &(&m(&u, &u) + &ev.shift(1, eps)) + &ev),
            (-1, m(&ev, &(&u + &u.shift(-1, eps)))),
            (-2, m(&ev, &ev.shift(-1, eps))),
        ];
        for (k, w) in want {
            assert!(diff_close(l2.diff().coeff(k).unwrap(), &w, 1e-14), "k={k}");
        }
        assert!(diff_close(&l2.residue(), &want_res(&u, &ev, eps, &g), 1e-14));
    }

    fn want_res(u: &CoeffFn, ev: &CoeffFn, eps: f64, g: &Grid) -> CoeffFn {
        &(&u.mul(u, g).unwrap() + &ev.shift(1, eps)) + ev
    }

    #[test]
    fn commutator_examples() {
        let g = grid();
        let eps = g.eps();
        let (u, v) = fields(&g);
        let c = MixedOp::shift_op(1).commutator(&MixedOp::mult(u.clone()), &g).unwrap();
        assert!(diff_close(c.diff().coeff(1).unwrap(), &(&u.shift(1, eps) - &u), 1e-15));
        let c = MixedOp::eps_d().commutator(&MixedOp::mult(u.clone()), &g).unwrap();
        assert!(c.is_pure_difference());
        assert!(diff_close(c.diff().coeff(0).unwrap(), &u.ddx().scale(eps), 1e-15));

        let l = MixedOp::lax(&u, &v, &g).unwrap();
        let c = l.plus().commutator(&l, &g).unwrap();
        let ev = v.exp(&g).unwrap();
        assert!(c.diff().coeff(1).map(|f| f.max_abs()).unwrap_or(0.0) < 1e-15);
        assert!(diff_close(&c.diff().coeff_or_zero(0), &(&ev.shift(1, eps) - &ev), 1e-14));
        let w = ev.mul(&(&u - &u.shift(-1, eps)), &g).unwrap();
        assert!(diff_close(&c.diff().coeff_or_zero(-1), &w, 1e-14));
    }

    #[test]
    fn projections() {
        let g = grid();
        let (u, v) = fields(&g);
        let l = MixedOp::lax(&u, &v, &g).unwrap();
        assert_eq!(l.plus().diff().band(), Span::new(0, 1));
        assert_eq!(l.minus().diff().band(), Span::new(-1, -1));
        let x = MixedOp::eps_d().add(&DiffOp::monomial(-1, u.clone()).into());
        assert_eq!(x.plus(), MixedOp::eps_d());
        assert_eq!(x.plus().plus(), x.plus());
        assert!(x.plus().minus().diff().band().is_empty());
    }

    #[test]
    fn residues() {
        let g = grid();
        let (u, v) = fields(&g);
        let l = MixedOp::lax(&u, &v, &g).unwrap();
        assert!(diff_close(&l.residue(), &u, 0.0));
        assert!(MixedOp::eps_d().residue().is_zero());
    }

    #[test]
    fn norms() {
        let g = grid();
        assert_eq!(MixedOp::zero().norm(&g), 0.0);
        let op = MixedOp::shift_op(1).add(&MixedOp::shift_op(-1));
        assert!((op.norm(&g) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn derivation_consistency() {
        let g = grid();
        let (u, v) = fields(&g);
        let l = MixedOp::lax(&u, &v, &g).unwrap().pow(2, &g).unwrap();
        let c = MixedOp::eps_d().commutator(&l, &g).unwrap();
        let want = l.map_coeffs(|f| f.ddx().scale(g.eps()));
        assert!(c.sub(&want).norm(&g) < 1e-13);
    }

    #[test]
    fn trust_of_capped_product_matches_uncapped() {
        let spec = GridSpec { band_cap: 4, ..GridSpec::default() };
        let g = Grid::new(spec).unwrap();
        let wide = Grid::new(GridSpec { band_cap: 40, ..spec }).unwrap();
        let (u, _) = fields(&g);
        let a = DiffOp::exact(-3, (0..5).map(|i| u.shift(i, 0.1)).collect());
        let b = DiffOp::exact(-2, (0..5).map(|i| u.shift(-i, 0.1).scale(0.5)).collect());
        let capped = a.mul(&b, &g).unwrap();
        let full = a.mul(&b, &wide).unwrap();
        assert_eq!(capped.trust(), Span::new(-4, INF));
        for k in -4..=3 {
            assert!(diff_close(&capped.coeff_or_zero(k), &full.coeff_or_zero(k), 0.0));
        }
        assert!(full.coeff(-5).is_some());
        assert!(g.ledger().total() > 0.0);
    }

    #[test]
    fn truncated_series_trust_brute_force() {
        // S = 1 + Σ_{k≥1} a Λ^{-k}, stored to depth 4, times an exact band-[-1,1] operator.
        let g = grid();
        let s = DiffOp::truncated(-4, vec![CoeffFn::constant(0.3); 5], Span::new(-INF, 0), Span::new(-4, INF));
        let l = DiffOp::exact(-1, vec![CoeffFn::one(), CoeffFn::constant(2.0), CoeffFn::one()]);
        let deep =
            DiffOp::truncated(-9, vec![CoeffFn::constant(0.3); 10], Span::new(-INF, 0), Span::new(-9, INF));
        let p = l.mul(&s, &g).unwrap();
        let q = l.mul(&deep, &g).unwrap();
        assert_eq!(p.trust(), Span::new(-3, INF));
        for k in -3..=1 {
            assert!(diff_close(&p.coeff_or_zero(k), &q.coeff_or_zero(k), 1e-15));
        }
        assert!((&p.coeff_or_zero(-4) - &q.coeff_or_zero(-4)).max_abs() > 0.1);
    }

    #[test]
    fn json_roundtrip() {
        let g = grid();
        let (u, v) = fields(&g);
        let l = MixedOp::lax(&u, &v, &g).unwrap().add(&MixedOp::eps_d());
        let s = serde_json::to_string(&l).unwrap();
        let back: MixedOp = serde_json::from_str(&s).unwrap();
        assert!(back.sub(&l).norm(&g) < 1e-15);
    }
}
