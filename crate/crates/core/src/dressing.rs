//! Dressing operators `S = 1 + Σ_{k≥1} w_k Λ^{-k}` and `S̄ = Σ_{k≥0} w̃_k Λ^k`
//! with `L = SΛS^{-1} = S̄Λ^{-1}S̄^{-1}`, solved order by order, and the
//! logarithms `log_+L = Sε∂S^{-1}`, `log_−L = −S̄ε∂S̄^{-1}` in closed form.
//!
//! `S̄` is kept in factored form `S̄ = Φ·Y` with the frame `Φ = e^{φ+cx}`,
//! `φ(x) − φ(x−ε) = v − cε`, `c = ⟨v⟩/ε`, and `Y = 1 + Σ y_kΛ^k`. The core `Y`
//! dresses the gauge-transformed operator `L̃ = Φ^{-1}LΦ = e^{v(x+ε)}Λ + u + Λ^{-1}`.
//! Conjugating back by `Φ` multiplies the `Λ^k` coefficient by
//! `Φ(x)/Φ(x+kε) = e^{−Σ_{i=1}^k v(x+iε)}`, which stays bounded, whereas `Φ`
//! itself can span several orders of magnitude over one period.


use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{MethError, Result};
use crate::fields::{CoeffFn, Grid};
use crate::hp::{HpFn, HpSeries};
use crate::opalg::{DiffOp, MixedOp, Span, INF};

/// Zero-mode choices made while solving. Offsets are the constants added to
/// each solved coefficient (the kernel of `1 − Λ^{±1}`); all zero by default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Gauge {
    /// Added to `w_k`, `k = 1..=K`.
    pub s_offsets: Vec<f64>,
    /// Added to `y_k`, `k = 1..=K`.
    pub sbar_offsets: Vec<f64>,
}

impl Gauge {
    fn s(&self, k: usize) -> f64 {
        self.s_offsets.get(k - 1).copied().unwrap_or(0.0)
    }

    fn sbar(&self, k: usize) -> f64 {
        self.sbar_offsets.get(k - 1).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct DressingPair {
    /// `1 + w_1Λ^{-1} + … + w_KΛ^{-K}`.
    pub s: DiffOp,
    /// Core `Y = 1 + y_1Λ + … + y_KΛ^K` of `S̄ = ΦY`.
    pub y: DiffOp,
    /// Periodic frame exponent `φ`, pinned by `φ(0) = 0` (so `w̃_0(0) = 1`).
    pub phi: CoeffFn,
    /// Exponential rate `c = ⟨v⟩/ε` of the frame.
    pub rate: f64,
    pub order: usize,
    pub gauge: Gauge,
    u: CoeffFn,
    v: CoeffFn,
    work: Grid,
    hs: HpSeries,
    hs_inv: HpSeries,
    hy: HpSeries,
    hy_inv: HpSeries,
}

impl DressingPair {
    pub fn u(&self) -> &CoeffFn {
        &self.u
    }

    pub fn v(&self) -> &CoeffFn {
        &self.v
    }

    /// Grid with enough x-degree headroom for products of dressing coefficients.
    pub fn work_grid(&self) -> &Grid {
        &self.work
    }

    pub fn lax(&self) -> Result<MixedOp> {
        MixedOp::lax(&self.u, &self.v, &self.work)
    }

    /// `L̃ = e^{v(x+ε)}Λ + u + Λ^{-1}`, the Lax operator seen by `Y`.
    pub fn lax_tilde(&self) -> Result<DiffOp> {
        let ev1 = self.v.exp(&self.work)?.shift(1, self.work.eps());
        Ok(DiffOp::exact(-1, vec![CoeffFn::one(), self.u.clone(), ev1]))
    }

    /// `e^{φ}`: the frame without its `e^{cx}` factor.
    pub fn frame_periodic(&self) -> Result<CoeffFn> {
        self.phi.exp(&self.work)
    }

    /// `S̄' = e^{φ}Y`, so that `S̄ = e^{cx}S̄'`. Equal to `S̄` when `⟨v⟩ = 0`.
    pub fn sbar(&self) -> Result<DiffOp> {
        let f = self.frame_periodic()?;
        let mut coeffs = Vec::with_capacity(self.order + 1);
        for k in 0..=self.order as i64 {
            coeffs.push(f.mul(&self.y.coeff_or_zero(k), &self.work)?);
        }
        Ok(DiffOp::truncated(0, coeffs, self.y.support(), self.y.trust()))
    }

    /// `Φ(x)/Φ(x+kε)`.
    pub fn frame_ratio(&self, k: i64) -> Result<CoeffFn> {
        if k == 0 {
            return Ok(CoeffFn::one());
        }
        let eps = self.work.eps();
        let mut acc = CoeffFn::zero();
        if k > 0 {
            for i in 1..=k {
                acc -= &self.v.shift(i, eps);
            }
        } else {
            for i in 0..-k {
                acc += &self.v.shift(-i, eps);
            }
        }
        acc.exp(&self.work)
    }

    /// `Φ A Φ^{-1}` for a difference operator `A`.
    pub fn frame_conj(&self, a: &DiffOp) -> Result<DiffOp> {
        let band = a.band();
        if band.is_empty() {
            return Ok(a.clone());
        }
        let mut coeffs = Vec::new();
        for (k, c) in a.iter() {
            coeffs.push(if c.is_zero() { CoeffFn::zero() } else { c.mul(&self.frame_ratio(k)?, &self.work)? });
        }
        Ok(DiffOp::truncated(band.lo, coeffs, a.support(), a.trust()))
    }

    pub fn s_inverse(&self) -> DiffOp {
        let k = self.order as i64;
        DiffOp::truncated(-k, self.hs_inv.rounded(), Span::new(-INF, 0), Span::new(-k, INF))
    }

    pub fn y_inverse(&self) -> DiffOp {
        DiffOp::truncated(0, self.hy_inv.rounded(), Span::new(0, INF), Span::new(-INF, self.order as i64))
    }

    /// Extended-precision `S`, `S^{-1}`, `Y`, `Y^{-1}`.
    pub fn hp_parts(&self) -> (&HpSeries, &HpSeries, &HpSeries, &HpSeries) {
        (&self.hs, &self.hs_inv, &self.hy, &self.hy_inv)
    }
}

/// Inverse of `1 + Σ_{i≥1} a_i Λ^{σi}`: `t_m = −Σ_{i=1}^m a_i t_{m−i}(x+σiε)`.
fn unit_series_inverse(a: &[HpFn], sigma: i64, g: &Grid) -> Result<Vec<HpFn>> {
    let eps = g.eps();
    let mut t = vec![HpFn::one()];
    for m in 1..a.len() {
        let mut acc = HpFn::zero();
        for i in 1..=m {
            if a[i].is_zero() || t[m - i].is_zero() {
                continue;
            }
            acc.sub_assign(&a[i].mul(&t[m - i].shift(sigma * i as i64, eps), g)?);
        }
        t.push(acc);
    }
    Ok(t)
}

/// `(1 − Λ^{-1}) y = f`, i.e. `(1 − Λ) y = −f(x+ε)`.
fn invert_one_minus_back_shift(f: &CoeffFn, eps: f64) -> Result<CoeffFn> {
    f.shift(1, eps).scale(-1.0).invert_one_minus_shift(eps)
}

fn hp_back_inverse(f: &HpFn, eps: f64) -> Result<HpFn> {
    f.shift(1, eps).scale(-1.0).invert_one_minus_shift(eps)
}

pub fn solve_dressing(u: &CoeffFn, v: &CoeffFn, order: usize, grid: &Grid) -> Result<DressingPair> {
    solve_dressing_with_gauge(u, v, order, &Gauge::default(), grid)
}

/// Solves both dressing recursions in double-double arithmetic; the secular
/// coefficients grow like `(x/ε)^{⌈m/2⌉}` and everything downstream is an
/// O(1) combination of them.
pub fn solve_dressing_with_gauge(
    u: &CoeffFn,
    v: &CoeffFn,
    order: usize,
    gauge: &Gauge,
    grid: &Grid,
) -> Result<DressingPair> {
    let eps = grid.eps();
    let need = order.div_ceil(2);
    if grid.spec.max_xdeg < need {
        return Err(MethError::DegreeOverflow { degree: need, cap: grid.spec.max_xdeg });
    }
    if v.xdeg() > 0 {
        return Err(MethError::SecularExponent { degree: v.xdeg() });
    }
    // Intermediate products (inverses, S_x S^{-1}) carry degrees up to ~K before cancelling.
    let work = grid.with_max_xdeg(grid.spec.max_xdeg.max(order + 2));
    let ev = v.exp(&work)?;
    let hu = HpFn::from_coeff(u);
    let hev = HpFn::from_coeff(&ev);

    // S: (1 − Λ) w_m = u w_{m−1} + e^v w_{m−2}(x − ε).
    let mut w = vec![HpFn::one()];
    for m in 1..=order {
        let mut rhs = hu.mul(&w[m - 1], &work)?;
        if m >= 2 {
            rhs.add_assign(&hev.mul(&w[m - 2].shift(-1, eps), &work)?);
        }
        let mut wm = rhs.invert_one_minus_shift(eps)?;
        let off = gauge.s(m);
        if off != 0.0 {
            wm.add_assign(&HpFn::constant(off));
        }
        w.push(wm);
    }
    let w_inv = unit_series_inverse(&w, -1, &work)?;
    let k = order as i64;
    let rev = |v: &[HpFn]| v.iter().rev().cloned().collect::<Vec<_>>();
    let hs = HpSeries { kmin: -k, coeffs: rev(&w) };
    let hs_inv = HpSeries { kmin: -k, coeffs: rev(&w_inv) };
    let s = DiffOp::truncated(-k, hs.rounded(), Span::new(-INF, 0), Span::new(-k, INF));

    // Frame: φ(x) − φ(x−ε) = v − cε, φ(0) = 0.
    let rate = v.mean().re / eps;
    let centred = v - &CoeffFn::constant(v.coeff(0, 0));
    let mut phi = invert_one_minus_back_shift(&centred, eps)?;
    let phi0 = phi.eval(0.0);
    phi -= &CoeffFn::constant(phi0);

    // Y: L̃Y = YΛ^{-1}, i.e. y_m − y_m(x−ε) = u y_{m−1} + e^{v(x+ε)} y_{m−2}(x+ε).
    let hev1 = hev.shift(1, eps);
    let mut ys = vec![HpFn::one()];
    for m in 1..=order {
        let mut f = hu.mul(&ys[m - 1], &work)?;
        if m >= 2 {
            f.add_assign(&hev1.mul(&ys[m - 2].shift(1, eps), &work)?);
        }
        let mut y = hp_back_inverse(&f, eps)?;
        let off = gauge.sbar(m);
        if off != 0.0 {
            y.add_assign(&HpFn::constant(off));
        }
        ys.push(y);
    }
    let ys_inv = unit_series_inverse(&ys, 1, &work)?;
    let hy = HpSeries { kmin: 0, coeffs: ys };
    let hy_inv = HpSeries { kmin: 0, coeffs: ys_inv };
    let y = DiffOp::truncated(0, hy.rounded(), Span::new(0, INF), Span::new(-INF, k));

    Ok(DressingPair {
        s,
        y,
        phi,
        rate,
        order,
        gauge: gauge.clone(),
        u: u.clone(),
        v: v.clone(),
        work,
        hs,
        hs_inv,
        hy,
        hy_inv,
    })
}

pub(crate) fn hp_exact(op: &DiffOp) -> HpSeries {
    let band = op.band();
    HpSeries { kmin: band.lo, coeffs: op.iter().map(|(_, c)| HpFn::from_coeff(c)).collect() }
}

pub(crate) fn shifted(a: &HpSeries, by: i64) -> HpSeries {
    HpSeries { kmin: a.kmin + by, coeffs: a.coeffs.clone() }
}

pub(crate) fn hp_sub(a: &HpSeries, b: &HpSeries) -> HpSeries {
    let lo = a.kmin.min(b.kmin);
    let hi = a.kmax().max(b.kmax());
    let coeffs = (lo..=hi)
        .map(|k| {
            let mut c = a.get(k).cloned().unwrap_or_else(HpFn::zero);
            if let Some(x) = b.get(k) {
                c.sub_assign(x);
            }
            c
        })
        .collect();
    HpSeries { kmin: lo, coeffs }
}

pub(crate) fn window_norm(a: &HpSeries, lo: i64, hi: i64, g: &Grid) -> f64 {
    (lo..=hi).filter_map(|k| a.get(k)).map(|c| c.to_coeff().sup_norm(g)).fold(0.0, f64::max)
}

/// Residual of the two dressing recursions, `max(‖SΛ − LS‖, ‖YΛ^{-1} − L̃Y‖)`,
/// over the Λ-powers fixed by the stored orders: `[1−K, 1]` and `[−1, K−1]`
/// (at least one power below/above the leading one, so `K = 0` is checked too).
pub fn dressing_residual(p: &DressingPair, l: &DiffOp) -> Result<f64> {
    let g = &p.work;
    let k = p.order.max(1) as i64;
    let hl = hp_exact(l);
    let r1 = hp_sub(&shifted(&p.hs, 1), &hl.mul_window(&p.hs, 1 - k, 1, g)?);
    let ev = HpFn::from_coeff(&p.v.exp(g)?);
    let lt = HpSeries { kmin: -1, coeffs: vec![HpFn::one(), HpFn::from_coeff(&p.u), ev.shift(1, g.eps())] };
    let r2 = hp_sub(&shifted(&p.hy, -1), &lt.mul_window(&p.hy, -1, k - 1, g)?);
    Ok(window_norm(&r1, 1 - k, 1, g).max(window_norm(&r2, -1, k - 1, g)))
}

/// `SΛS^{-1}` and `S̄Λ^{-1}S̄^{-1} = Φ(YΛ^{-1}Y^{-1})Φ^{-1}`, on their trusted bands.
pub fn dressed_lax(p: &DressingPair) -> Result<(DiffOp, DiffOp)> {
    let g = &p.work;
    let k = p.order as i64;
    let plus = shifted(&p.hs, 1).mul_window(&p.hs_inv, 1 - k, 1, g)?;
    let plus = DiffOp::truncated(1 - k, plus.rounded(), Span::new(-INF, 1), Span::new(1 - k, INF));
    let core = shifted(&p.hy, -1).mul_window(&p.hy_inv, -1, k - 1, g)?;
    let core = DiffOp::truncated(-1, core.rounded(), Span::new(-1, INF), Span::new(-INF, k - 1));
    Ok((plus, p.frame_conj(&core)?))
}

/// `(‖SΛS^{-1} − L‖, ‖S̄Λ^{-1}S̄^{-1} − L‖)` on trusted bands.
pub fn conjugation_residuals(p: &DressingPair) -> Result<(f64, f64)> {
    let g = &p.work;
    let l = p.lax()?;
    let (a, b) = dressed_lax(p)?;
    let ra = a.sub(l.diff());
    let rb = b.sub(l.diff());
    Ok((ra.norm_on(ra.trust(), g), rb.norm_on(rb.trust(), g)))
}

/// `ε∂ − εS_xS^{-1}` before removing secular round-off.
pub fn log_plus_raw(p: &DressingPair) -> Result<MixedOp> {
    let g = &p.work;
    let k = p.order as i64;
    let prod = p.hs.derivative(g.eps()).mul_window(&p.hs_inv, -k, -1, g)?;
    let d0 = DiffOp::truncated(-k, prod.rounded(), Span::new(-INF, -1), Span::new(-k, INF)).scale(-1.0);
    Ok(MixedOp::from_parts(vec![d0, DiffOp::shift_op(0)]))
}

/// `−ε∂ + εφ_x + εc + Φ(εY_xY^{-1})Φ^{-1}` before removing secular round-off.
pub fn log_minus_raw(p: &DressingPair) -> Result<MixedOp> {
    let g = &p.work;
    let eps = g.eps();
    let k = p.order as i64;
    let prod = p.hy.derivative(eps).mul_window(&p.hy_inv, 1, k, g)?;
    let core = DiffOp::truncated(1, prod.rounded(), Span::new(1, INF), Span::new(-INF, k));
    let core = p.frame_conj(&core)?;
    let frame = &p.phi.ddx().scale(eps) + &CoeffFn::constant(eps * p.rate);
    let d0 = core.add(&DiffOp::monomial(0, frame).with_trust(Span::ALL));
    Ok(MixedOp::from_parts(vec![d0, DiffOp::shift_op(0).scale(-1.0)]))
}

/// Both logarithms are 2π-periodic (different solutions differ by right
/// multiplication with constant-coefficient series), so their x-polynomial
/// parts are round-off. They are dropped here and recorded in the ledger.
fn periodize(op: MixedOp, g: &Grid) -> MixedOp {
    op.map_coeffs(|c| c.drop_secular(0, g))
}

pub fn log_plus(p: &DressingPair) -> Result<MixedOp> {
    Ok(periodize(log_plus_raw(p)?, &p.work))
}

pub fn log_minus(p: &DressingPair) -> Result<MixedOp> {
    Ok(periodize(log_minus_raw(p)?, &p.work))
}

/// Relative size of the secular content of an operator: `Σ secular / Σ all` coefficient norms.
pub fn secular_fraction(op: &MixedOp) -> f64 {
    let (mut sec, mut all) = (0.0, 0.0);
    for part in op.parts() {
        for (_, c) in part.iter() {
            sec += c.secular_norm();
            all += c.coeff_norm();
        }
    }
    if all == 0.0 {
        0.0
    } else {
        sec / all
    }
}

/// `w̃_0(0)`; the normalisation pins it to 1.
pub fn sbar_anchor(p: &DressingPair) -> C64 {
    p.phi.eval(0.0).exp()
}

/// Serialized dressing pair with its residuals.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DressingDump {
    /// Spec of the work grid the coefficients live on.
    pub grid: crate::fields::GridSpec,
    pub order: usize,
    pub gauge: Gauge,
    pub u: CoeffFn,
    pub v: CoeffFn,
    pub s: DiffOp,
    pub y: DiffOp,
    pub phi: CoeffFn,
    pub rate: f64,
    /// [`dressing_residual`], evaluated in double-double.
    pub residual: f64,
    /// `‖SΛS^{-1} − L‖`, `‖S̄Λ^{-1}S̄^{-1} − L‖`.
    pub conjugation: [f64; 2],
    /// [`dump_residual`] of the stored (double) coefficients.
    pub stored_residual: f64,
}

impl DressingPair {
    pub fn dump(&self) -> Result<DressingDump> {
        let l = self.lax()?;
        let (a, b) = conjugation_residuals(self)?;
        let mut d = DressingDump {
            grid: self.work.spec,
            order: self.order,
            gauge: self.gauge.clone(),
            u: self.u.clone(),
            v: self.v.clone(),
            s: self.s.clone(),
            y: self.y.clone(),
            phi: self.phi.clone(),
            rate: self.rate,
            residual: dressing_residual(self, l.diff())?,
            conjugation: [a, b],
            stored_residual: 0.0,
        };
        d.stored_residual = dump_residual(&d)?;
        Ok(d)
    }
}

/// The recursions of [`dressing_residual`] recomputed in double from the
/// stored `S` and `Y` alone.
pub fn dump_residual(d: &DressingDump) -> Result<f64> {
    let g = Grid::new(d.grid)?;
    let k = d.order.max(1) as i64;
    let l = DiffOp::exact(-1, vec![d.v.exp(&g)?, d.u.clone(), CoeffFn::one()]);
    let lt = DiffOp::exact(-1, vec![CoeffFn::one(), d.u.clone(), d.v.exp(&g)?.shift(1, g.eps())]);
    let exact = |a: &DiffOp| DiffOp::from_map(a.iter().map(|(k, c)| (k, c.clone())).collect());
    let (s, y) = (exact(&d.s), exact(&d.y));
    let r1 = s.mul(&DiffOp::shift_op(1), &g)?.sub(&l.mul(&s, &g)?);
    let r2 = y.mul(&DiffOp::shift_op(-1), &g)?.sub(&lt.mul(&y, &g)?);
    Ok(r1.norm_on(Span::new(1 - k, 1), &g).max(r2.norm_on(Span::new(-1, k - 1), &g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::GridSpec;

    fn grid() -> Grid {
        Grid::new(GridSpec::default()).unwrap()
    }

    fn fields() -> (CoeffFn, CoeffFn) {
        let u = &CoeffFn::cos(1).scale(0.1) + &CoeffFn::sin(2).scale(0.05);
        let v = &CoeffFn::sin(1).scale(0.1) + &CoeffFn::cos(3).scale(0.04);
        (u, v)
    }

    #[test]
    fn free_lattice_secular_coefficient() {
        let g = grid();
        let p = solve_dressing(&CoeffFn::zero(), &CoeffFn::zero(), 6, &g).unwrap();
        assert!(p.s.coeff_or_zero(-1).is_zero());
        let w2 = p.s.coeff_or_zero(-2);
        let want = CoeffFn::x_pow(1).scale(-1.0 / g.eps());
        assert!((&w2 - &want).max_abs() < 1e-12);
        let l = p.lax().unwrap();
        assert!(dressing_residual(&p, l.diff()).unwrap() < 1e-12);
        let lp = log_plus(&p).unwrap();
        assert!((&lp.diff().coeff_or_zero(-2) - &CoeffFn::one()).max_abs() < 1e-12);
    }

    #[test]
    fn first_coefficient_inverts_u() {
        let g = grid();
        let (u, v) = fields();
        let p = solve_dressing(&u, &v, 3, &g).unwrap();
        let w1 = u.invert_one_minus_shift(g.eps()).unwrap();
        assert!((&p.s.coeff_or_zero(-1) - &w1).max_abs() < 1e-14);
        assert_eq!(p.s.coeff_or_zero(0), CoeffFn::one());
    }

    #[test]
    fn residual_small_for_generic_fields() {
        let g = grid();
        let (u, v) = fields();
        let p = solve_dressing(&u, &v, 8, &g).unwrap();
        let l = p.lax().unwrap();
        let r = dressing_residual(&p, l.diff()).unwrap();
        assert!(r < 1e-9, "residual {r}");
        assert!((sbar_anchor(&p) - C64::new(1.0, 0.0)).norm() < 1e-13);
    }

    #[test]
    fn unsolved_order_leaves_residual() {
        let g = grid();
        let (u, v) = fields();
        let p = solve_dressing(&u, &v, 0, &g).unwrap();
        let l = p.lax().unwrap();
        let r = dressing_residual(&p, l.diff()).unwrap();
        assert!((r - u.sup_norm(&g)).abs() < 1e-12 || r > u.sup_norm(&g));
    }

    #[test]
    fn nonzero_mean_v_uses_exponential_rate() {
        let g = grid();
        let (u, _) = fields();
        let ev = &CoeffFn::one() + &CoeffFn::cos(1).scale(0.1);
        let n = g.spec.norm_points();
        let vals: Vec<C64> = (0..n).map(|i| ev.eval(2.0 * std::f64::consts::PI * i as f64 / n as f64).ln()).collect();
        // log of 1 + 0.1 cos x through its Fourier series (sampled and projected).
        let mut modes = vec![C64::new(0.0, 0.0); 2 * 16 + 1];
        for j in -16i64..=16 {
            let s: C64 = vals
                .iter()
                .enumerate()
                .map(|(i, f)| f * C64::from_polar(1.0, -(j as f64) * 2.0 * std::f64::consts::PI * i as f64 / n as f64))
                .sum();
            modes[(j + 16) as usize] = s / n as f64;
        }
        let v = CoeffFn::from_modes(modes);
        let p = solve_dressing(&u, &v, 6, &g).unwrap();
        assert!(p.rate < 0.0);
        let l = p.lax().unwrap();
        assert!(dressing_residual(&p, l.diff()).unwrap() < 1e-9);
    }

    #[test]
    fn logs_commute_with_lax() {
        let g = grid();
        let (u, v) = fields();
        let p = solve_dressing(&u, &v, 8, &g).unwrap();
        let wg = p.work_grid();
        let l = p.lax().unwrap();
        let lp = log_plus(&p).unwrap();
        let lm = log_minus(&p).unwrap();
        assert_eq!(lp.deriv_order(), 1);
        assert!(lp.diff().band().hi < 0);
        assert!(lm.diff().band().lo >= 0);
        for op in [&lp, &lm] {
            let c = op.commutator(&l, wg).unwrap();
            let r = c.norm_on(c.trust(), wg);
            assert!(r < 1e-8, "commutator {r}");
        }
        assert!(secular_fraction(&log_plus_raw(&p).unwrap()) < 1e-10);
        assert!(secular_fraction(&log_minus_raw(&p).unwrap()) < 1e-10);
    }

    #[test]
    fn gauge_offsets_do_not_change_log_residual() {
        let g = grid();
        let (u, v) = fields();
        let gauge = Gauge { s_offsets: vec![0.3, -0.2, 0.1], sbar_offsets: vec![0.5, 0.25] };
        let a = solve_dressing(&u, &v, 6, &g).unwrap();
        let b = solve_dressing_with_gauge(&u, &v, 6, &gauge, &g).unwrap();
        let la = log_plus(&a).unwrap();
        let lb = log_plus(&b).unwrap();
        let diff = la.sub(&lb);
        assert!(diff.norm_on(diff.trust(), a.work_grid()) < 1e-10);
        let l = b.lax().unwrap();
        assert!(dressing_residual(&b, l.diff()).unwrap() < 1e-9);
    }
}
