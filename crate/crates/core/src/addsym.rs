//! Orlov–Schulman operators `M = SΓS^{-1}`, `M̄ = S̄Γ̄S̄^{-1}`, the additional
//! flows generated by `(M−M̄)^m L^l`, and checks of their commutation with the
//! hierarchy and of the Block-algebra relations.
//!
//! `M` has Λ-powers down to `−∞` and `M̄` up to `+∞`; both are built in
//! double-double from the dressing pair. `M̄` is assembled in the frame of `Y`:
//! `Φ^{-1}M̄Φ = −YΓ̄Y^{-1}` (`Φ` commutes with `x`), and conjugated back only at
//! the end. Because `M−M̄` is infinite in both directions, `(M−M̄)^m` for
//! `m ≥ 2` has no coefficient determined by finitely many dressing
//! coefficients; such powers are refused with `BandOverflow`.
//!
//! The Orlov–Schulman operators depend on the gauge of `S` and `S̄`. An
//! [`OsState`] therefore carries, besides the fields and times, the solver's
//! gauge offsets and the translation `τ` of the right factor `e^{τε∂}` that
//! `S̄` acquires along `t_{1,0}`; these are transported along every flow so that
//! the dressing stays the Sato-evolved one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dressing::{self, hp_exact, hp_sub, shifted, DressingPair, Gauge};
use crate::error::{MethError, Result};
use crate::fields::{CoeffFn, Grid};
use crate::hierarchy::{FlowSpec, LatticeState};
use crate::hp::{HpFn, HpSeries};
use crate::opalg::{DiffOp, MixedOp, Span, INF};

/// The bare operator `Γ`. Its Toda-time term is printed as `Σ(n+1)Λ^n t_{0,n}`
/// in the definition and as `ΣΛ^n/n! t_{0,n}` in the proof.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GammaVariant {
    /// `(n+1)Λ^n t_{0,n}`; no `t_{1,0}` term (`1/(−1)! = 0`).
    AsDefined,
    /// `Λ^n/n! t_{0,n}`; no `t_{1,0}` term. The only normalization under which
    /// `∂M/∂t_{0,n} = [(B_{0,n})_+, M]`.
    #[default]
    ProofForm,
    /// `Λ^n/n! t_{0,n} + 2t_{1,0}Λ^{-1}`: `∂_z` of the bare wave function
    /// `z^{x/ε} exp(Σ t_{0,n}z^{n+1}/(n+1)! + 2t_{1,0} log z + …)`.
    WaveFunction,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

/// Errors unless only `t_{0,n}` and `t_{1,0}` are nonzero (the admissible slice).
pub fn check_slice(times: &BTreeMap<FlowSpec, f64>) -> Result<()> {
    for (f, &t) in times {
        if t != 0.0 && !(f.alpha == 0 || (f.alpha == 1 && f.n == 0)) {
            return Err(MethError::SliceViolation(format!("t_{{{f}}} = {t} is off the admissible slice")));
        }
    }
    Ok(())
}

/// `(Γ, Γ̄)` as mixed operators with `x`-polynomial coefficients. Off the slice
/// the derivation terms of the logarithmic times are included.
pub fn build_gamma(times: &BTreeMap<FlowSpec, f64>, variant: GammaVariant, grid: &Grid) -> Result<(MixedOp, MixedOp)> {
    let eps = grid.eps();
    let xe = CoeffFn::x_pow(1).scale(1.0 / eps);
    let mut gamma = MixedOp::from(DiffOp::monomial(-1, xe.clone()));
    let mut gamma_bar = MixedOp::from(DiffOp::monomial(1, xe.scale(-1.0)));
    let term = |k: i64, c: f64, d: f64| -> MixedOp {
        // c·Λ^k + d·Λ^k ε∂
        MixedOp::from_parts(vec![
            DiffOp::monomial(k, CoeffFn::constant(c)),
            DiffOp::monomial(k, CoeffFn::constant(d)),
        ])
    };
    for (f, &t) in times {
        if t == 0.0 {
            continue;
        }
        let n = f.n;
        match f.alpha {
            0 => {
                let c = match variant {
                    GammaVariant::AsDefined => (n + 1) as f64,
                    _ => 1.0 / factorial(n),
                };
                gamma = gamma.add(&term(n as i64, c * t, 0.0));
            }
            1 if n == 0 => {
                if variant == GammaVariant::WaveFunction {
                    gamma = gamma.add(&term(-1, 2.0 * t, 0.0));
                }
            }
            1 => {
                let a = 2.0 / factorial(n - 1) * t;
                gamma = gamma.add(&term(n as i64 - 1, -a * harmonic(n - 1), a));
            }
            _ => {
                let a = 2.0 / factorial(n) * t;
                gamma_bar = gamma_bar.add(&term(-(n as i64), -a * harmonic(n), -a));
            }
        }
    }
    Ok((gamma, gamma_bar))
}

/// Constant-coefficient Λ-polynomial part of `Γ` (the time terms on the slice),
/// as `(power, coefficient)` pairs.
fn gamma_time_terms(times: &BTreeMap<FlowSpec, f64>, variant: GammaVariant) -> Vec<(i64, f64)> {
    let mut out = Vec::new();
    for (f, &t) in times {
        if t == 0.0 {
            continue;
        }
        match (f.alpha, variant) {
            (0, GammaVariant::AsDefined) => out.push((f.n as i64, (f.n + 1) as f64 * t)),
            (0, _) => out.push((f.n as i64, t / factorial(f.n))),
            (1, GammaVariant::WaveFunction) if f.n == 0 => out.push((-1, 2.0 * t)),
            _ => {}
        }
    }
    out
}

// ---- double-double series helpers -------------------------------------------------

fn hp_add_scaled(a: &HpSeries, b: &HpSeries, s: f64) -> HpSeries {
    hp_sub(a, &hp_scale(b, -s))
}

fn hp_scale(a: &HpSeries, s: f64) -> HpSeries {
    HpSeries { kmin: a.kmin, coeffs: a.coeffs.iter().map(|c| c.scale(s)).collect() }
}

/// `f·A` (left multiplication by a function).
fn hp_left(f: &HpFn, a: &HpSeries, g: &Grid) -> Result<HpSeries> {
    let coeffs = a.coeffs.iter().map(|c| if c.is_zero() { Ok(HpFn::zero()) } else { f.mul(c, g) }).collect::<Result<_>>()?;
    Ok(HpSeries { kmin: a.kmin, coeffs })
}

/// Restriction to `[lo, hi]`, zero-padded.
fn hp_window(a: &HpSeries, lo: i64, hi: i64) -> HpSeries {
    HpSeries { kmin: lo, coeffs: (lo..=hi).map(|k| a.get(k).cloned().unwrap_or_else(HpFn::zero)).collect() }
}

/// `Σ k·a_k Λ^k`.
fn hp_euler(a: &HpSeries) -> HpSeries {
    HpSeries { kmin: a.kmin, coeffs: a.coeffs.iter().enumerate().map(|(i, c)| c.scale((a.kmin + i as i64) as f64)).collect() }
}

fn hp_pow(l: &HpSeries, n: usize, g: &Grid) -> Result<HpSeries> {
    let mut acc = HpSeries { kmin: 0, coeffs: vec![HpFn::one()] };
    for _ in 0..n {
        let (lo, hi) = (acc.kmin + l.kmin, acc.kmax() + l.kmax());
        acc = acc.mul_window(l, lo, hi, g)?;
    }
    Ok(acc)
}

fn to_diffop(a: &HpSeries, support: Span, trust: Span) -> DiffOp {
    DiffOp::truncated(a.kmin, a.rounded(), support, trust)
}

fn hp_norm(a: &HpSeries, window: Span, g: &Grid) -> f64 {
    dressing::window_norm(a, window.lo.max(a.kmin), window.hi.min(a.kmax()), g)
}

/// `Φ A Φ^{-1}` (`forward`) or `Φ^{-1} A Φ` of a double-double series; the
/// frame factors themselves are double accurate.
fn hp_reframe(p: &DressingPair, a: &HpSeries, forward: bool) -> Result<HpSeries> {
    let g = p.work_grid();
    let mut coeffs = Vec::with_capacity(a.coeffs.len());
    for (i, c) in a.coeffs.iter().enumerate() {
        let k = a.kmin + i as i64;
        if c.is_zero() || k == 0 {
            coeffs.push(c.clone());
            continue;
        }
        // frame_ratio(k) = Φ(x)/Φ(x+kε); its inverse is frame_ratio(−k)(x+kε).
        let f = if forward { p.frame_ratio(k)? } else { p.frame_ratio(-k)?.shift(k, g.eps()) };
        coeffs.push(c.mul(&HpFn::from_coeff(&f), g)?);
    }
    Ok(HpSeries { kmin: a.kmin, coeffs })
}

/// `Φ A Φ^{-1}`, rounded.
fn hp_frame(p: &DressingPair, a: &HpSeries, trust: Span) -> Result<DiffOp> {
    p.frame_conj(&to_diffop(a, Span::new(a.kmin, a.kmax()), trust))
}

/// Fields, times and the gauge data that fix `M` and `M̄` along flows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OsState {
    pub lattice: LatticeState,
    /// Solver offsets of `S` and `Y` (length `K` each).
    pub gauge: Gauge,
    /// `S̄` carries the right factor `e^{τε∂}`, so `Γ̄` is effectively `−((x+ετ)/ε)Λ`.
    pub tau: f64,
    pub variant: GammaVariant,
}

impl OsState {
    pub fn new(lattice: LatticeState, order: usize, variant: GammaVariant) -> Result<OsState> {
        check_slice(&lattice.times)?;
        let gauge = Gauge { s_offsets: vec![0.0; order], sbar_offsets: vec![0.0; order] };
        Ok(OsState { lattice, gauge, tau: 0.0, variant })
    }

    pub fn order(&self) -> usize {
        self.gauge.s_offsets.len()
    }

    /// `self + s·V` in every component.
    pub fn displaced(&self, vel: &OsVelocity, s: f64) -> OsState {
        let mut out = self.clone();
        out.lattice = self.lattice.displaced(&vel.du, &vel.dv, s);
        for (o, d) in out.gauge.s_offsets.iter_mut().zip(&vel.ds) {
            *o += s * d;
        }
        for (o, d) in out.gauge.sbar_offsets.iter_mut().zip(&vel.dy) {
            *o += s * d;
        }
        out.tau += s * vel.dtau;
        for (f, dt) in &vel.dtimes {
            *out.lattice.times.entry(*f).or_insert(0.0) += s * dt;
        }
        out
    }
}

/// Tangent vector on [`OsState`]s.
#[derive(Clone, Debug)]
pub struct OsVelocity {
    pub du: CoeffFn,
    pub dv: CoeffFn,
    pub ds: Vec<f64>,
    pub dy: Vec<f64>,
    pub dtau: f64,
    pub dtimes: Vec<(FlowSpec, f64)>,
    /// Trusted `Λ^{≤−2}` content of `−[X_-, L]`, plus secular and imaginary parts of the velocities.
    pub anomaly: f64,
    /// Trusted `Λ^{≥1}` content of `[X_+, L]` (additional flows only).
    pub plus_anomaly: f64,
    /// Largest difference between the `(u_t, v_t)` read off `−[X_-, L]` and `[X_+, L]`.
    pub reps_gap: f64,
}

/// `M` and `M̄` of an [`OsState`], with the double-double data they came from.
pub struct OsOperators {
    pub pair: DressingPair,
    /// `M` on `[−K−1, top]`, all trusted.
    m: HpSeries,
    /// `Φ^{-1}M̄Φ` on `[1, K+1]`, all trusted.
    mt: HpSeries,
    l: HpSeries,
    lt: HpSeries,
}

impl OsOperators {
    pub fn build(os: &OsState, grid: &Grid) -> Result<OsOperators> {
        check_slice(&os.lattice.times)?;
        let k = os.order() as i64;
        let pair = dressing::solve_dressing_with_gauge(&os.lattice.u, &os.lattice.v, os.order(), &os.gauge, grid)?;
        let g = pair.work_grid().clone();
        let eps = g.eps();
        let (hs, hs_inv, hy, hy_inv) = pair.hp_parts();
        let xe = HpFn::from_coeff(&CoeffFn::x_pow(1).scale(1.0 / eps));

        // SΓ_0S^{-1} = (x/ε)SΛ^{-1}S^{-1} − (DS)Λ^{-1}S^{-1}, DS = Σ k w_k Λ^{-k}.
        let linv = shifted(hs, -1).mul_window(hs_inv, -k - 1, -1, &g)?;
        let ds = hp_scale(&hp_euler(hs), -1.0);
        let dpart = shifted(&ds, -1).mul_window(hs_inv, -k - 1, -1, &g)?;
        let mut m = hp_sub(&hp_left(&xe, &linv, &g)?, &dpart);
        let l = hp_exact(pair.lax()?.diff());
        for (power, c) in gamma_time_terms(&os.lattice.times, os.variant) {
            let term = if power < 0 { linv.clone() } else { hp_pow(&l, power as usize, &g)? };
            m = hp_add_scaled(&m, &term, c);
        }
        let top = m.kmax();
        let m = hp_window(&m, -k - 1, top);

        // Φ^{-1}M̄Φ = −(x/ε + τ)YΛY^{-1} − (D̄Y)ΛY^{-1}, D̄Y = Σ k y_k Λ^k.
        let lam = shifted(hy, 1).mul_window(hy_inv, 1, k + 1, &g)?;
        let dpart = shifted(&hp_euler(hy), 1).mul_window(hy_inv, 1, k + 1, &g)?;
        let mut mt = hp_add_scaled(&hp_left(&xe, &lam, &g)?, &dpart, 1.0);
        if os.tau != 0.0 {
            mt = hp_add_scaled(&mt, &lam, os.tau);
        }
        let mt = hp_window(&hp_scale(&mt, -1.0), 1, k + 1);
        let lt = hp_exact(&pair.lax_tilde()?);
        Ok(OsOperators { pair, m, mt, l, lt })
    }

    pub fn order(&self) -> i64 {
        self.pair.order as i64
    }

    /// `M` rounded, trusted on `[−K−1, ∞)`.
    pub fn m(&self) -> DiffOp {
        to_diffop(&self.m, Span::new(-INF, self.m.kmax()), Span::new(-self.order() - 1, INF))
    }

    /// `M̄` rounded, trusted on `(−∞, K+1]`.
    pub fn mbar(&self) -> Result<DiffOp> {
        self.pair.frame_conj(&to_diffop(&self.mt, Span::new(1, INF), Span::new(-INF, self.order() + 1)))
    }
}

/// Sizes of the Orlov–Schulman identities on their trusted bands.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct CanonicalResiduals {
    /// `‖[L, M] − 1‖`.
    pub l_m: f64,
    /// `‖[L, M̄] − 1‖`.
    pub l_mbar: f64,
    /// `‖[M − M̄, L]‖` on the band where both are trusted.
    pub diff_l: f64,
    /// `‖[log_+L, M] − L‖` (reported only).
    pub log_m_minus_l: f64,
    /// `‖[log_+L, M] − SΛ^{-1}S^{-1}‖` (reported only).
    pub log_m_minus_linv: f64,
}

fn hp_commutator(a: &HpSeries, b: &HpSeries, lo: i64, hi: i64, g: &Grid) -> Result<HpSeries> {
    Ok(hp_sub(&a.mul_window(b, lo, hi, g)?, &b.mul_window(a, lo, hi, g)?))
}

fn minus_identity(mut a: HpSeries) -> HpSeries {
    if let Some(c) = a.get(0) {
        let mut c = c.clone();
        c.sub_assign(&HpFn::one());
        a.coeffs[(-a.kmin) as usize] = c;
    }
    a
}

impl OsOperators {
    /// `[L, M] − 1` on `[−K, top+1]`.
    fn l_m_defect(&self) -> Result<HpSeries> {
        let g = self.pair.work_grid();
        Ok(minus_identity(hp_commutator(&self.l, &self.m, -self.order(), self.m.kmax() + 1, g)?))
    }

    /// `[L̃, M̃] − 1` on `[0, K]`.
    fn l_mbar_defect(&self) -> Result<HpSeries> {
        let g = self.pair.work_grid();
        Ok(minus_identity(hp_commutator(&self.lt, &self.mt, 0, self.order(), g)?))
    }

    pub fn canonical_residuals(&self) -> Result<CanonicalResiduals> {
        let g = self.pair.work_grid();
        let k = self.order();
        let rm = self.l_m_defect()?;
        let rmb = self.l_mbar_defect()?;
        let l_m = hp_norm(&rm, Span::ALL, g);
        let rmb_orig = hp_frame(&self.pair, &rmb, Span::ALL)?;
        let l_mbar = rmb_orig.norm_on(Span::ALL, g);
        // [M − M̄, L] = −([L,M] − 1) + ([L,M̄] − 1).
        let both = Span::new(0, k.min(self.m.kmax() + 1));
        let rm_op = to_diffop(&rm, Span::ALL, Span::ALL);
        let diff_l = rmb_orig.sub(&rm_op).norm_on(both, g);

        // [log_+L, M] = εM_x + [W, M], W = −εS_xS^{-1}.
        let (hs, hs_inv, _, _) = self.pair.hp_parts();
        let w = hp_scale(&hs.derivative(g.eps()).mul_window(hs_inv, -k, -1, g)?, -1.0);
        let top = self.m.kmax();
        let lo = -k + top.max(-1) + 1;
        let lm = hp_add_scaled(&hp_commutator(&w, &self.m, lo, top - 1, g)?, &self.m.derivative(g.eps()), 1.0);
        let lm = hp_window(&lm, lo, top);
        let log_m_minus_l = hp_norm(&hp_sub(&lm, &self.l), Span::ALL, g);
        let linv = shifted(hs, -1).mul_window(hs_inv, lo, -1, g)?;
        let log_m_minus_linv = hp_norm(&hp_sub(&lm, &linv), Span::ALL, g);
        Ok(CanonicalResiduals { l_m, l_mbar, diff_l, log_m_minus_l, log_m_minus_linv })
    }
}

/// A flow acting on [`OsState`]s: `∂*_{m,l}` or a hierarchy flow on the slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OsFlow {
    Additional { m: usize, l: usize },
    Hierarchy(FlowSpec),
}

impl std::fmt::Display for OsFlow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OsFlow::Additional { m, l } => write!(f, "*{m},{l}"),
            OsFlow::Hierarchy(s) => write!(f, "{s}"),
        }
    }
}

/// Projections of a generator `X`: `X_-` in the original frame, `Φ^{-1}X_+Φ`
/// without its derivation part, and the constant `d` of a `d·ε∂` term of `X_+`.
struct Projections {
    minus: HpSeries,
    plus_core: HpSeries,
    deriv: f64,
    /// `X_+` is trusted on `[0, plus_top]` (core frame).
    plus_top: i64,
    /// `X_-` is exact (not cut off at `minus.kmin`).
    minus_exact: bool,
}

impl OsOperators {
    /// `(M−M̄)L^l`: `X_- = (ML^l)_- − Φ(M̃L̃^l)_-Φ^{-1}`, `X̃_+ = Φ^{-1}(ML^l)_+Φ − (M̃L̃^l)_+`.
    fn os_projections(&self, l: usize) -> Result<Projections> {
        let g = self.pair.work_grid();
        let (k, li) = (self.order(), l as i64);
        let top = self.m.kmax();
        let ll = hp_pow(&self.l, l, g)?;
        let llt = hp_pow(&self.lt, l, g)?;
        let p = self.m.mul_window(&ll, -k - 1 + li, top + li, g)?;
        let pt = self.mt.mul_window(&llt, 1 - li, k + 1 - li, g)?;
        let mut minus = hp_window(&p, -k - 1 + li, -1);
        if l >= 2 {
            let pt_minus = hp_reframe(&self.pair, &hp_window(&pt, 1 - li, -1), true)?;
            minus = hp_sub(&minus, &pt_minus);
        }
        let p_plus = hp_reframe(&self.pair, &hp_window(&p, 0, (top + li).max(0)), false)?;
        let plus_core = hp_sub(&p_plus, &hp_window(&pt, 0, k + 1 - li));
        Ok(Projections { minus, plus_core, deriv: 0.0, plus_top: k + 1 - li, minus_exact: false })
    }

    fn projections(&self, flow: OsFlow) -> Result<Projections> {
        let g = self.pair.work_grid();
        let k = self.order();
        let finite = |x: HpSeries| -> Result<Projections> {
            let top = x.kmax().max(0);
            let plus_core = hp_reframe(&self.pair, &hp_window(&x, 0, top), false)?;
            Ok(Projections { minus: hp_window(&x, x.kmin.min(-1), -1), plus_core, deriv: 0.0, plus_top: INF, minus_exact: true })
        };
        match flow {
            OsFlow::Additional { m: 0, l } => finite(hp_pow(&self.l, l, g)?),
            OsFlow::Additional { m: 1, l } => self.os_projections(l),
            OsFlow::Additional { m, l } => Err(MethError::BandOverflow(format!(
                "(M−M̄)^{m}L^{l}: M−M̄ is infinite in both directions, so no coefficient of its {m}-th power is determined"
            ))),
            OsFlow::Hierarchy(f) if f.alpha == 0 => {
                finite(hp_scale(&hp_pow(&self.l, f.n + 1, g)?, 1.0 / factorial(f.n + 1)))
            }
            OsFlow::Hierarchy(f) if f.alpha == 1 && f.n == 0 => {
                // B = 2log_+L = 2ε∂ + 2W; Φ^{-1}(2ε∂)Φ = 2ε∂ + 2ε(φ_x + c).
                let (hs, hs_inv, _, _) = self.pair.hp_parts();
                let w = hp_scale(&hs.derivative(g.eps()).mul_window(hs_inv, -k, -1, g)?, -2.0);
                let frame = &self.pair.phi.ddx() + &CoeffFn::constant(self.pair.rate);
                let plus_core = HpSeries { kmin: 0, coeffs: vec![HpFn::from_coeff(&frame.scale(2.0 * g.eps()))] };
                Ok(Projections { minus: w, plus_core, deriv: 2.0, plus_top: INF, minus_exact: false })
            }
            OsFlow::Hierarchy(f) => Err(MethError::SliceViolation(format!("flow t_{{{f}}} leaves the admissible slice"))),
        }
    }
}

fn real_const(c: Option<&HpFn>) -> f64 {
    c.map(|c| c.to_coeff().coeff(0, 0).re).unwrap_or(0.0)
}

/// `(u_t, v_t)` from the `Λ^0`, `Λ^{-1}` coefficients of `∂L`; secular and
/// imaginary parts are returned as the third component.
fn read_velocities(lt: &DiffOp, v: &CoeffFn, g: &Grid) -> Result<(CoeffFn, CoeffFn, f64)> {
    let c0 = lt.coeff_or_zero(0);
    let du = c0.real_part();
    let dv = lt.coeff_or_zero(-1).mul(&v.scale(-1.0).exp(g)?, g)?.real_part();
    let junk = (&c0 - &du).max_abs().max(du.secular_norm()).max(dv.secular_norm());
    Ok((du.drop_secular(0, g), dv.drop_secular(0, g), junk))
}

/// Solution `ψ` of `ψ − ψ(x−ε) = f − ⟨f⟩` with `ψ(0) = 0`.
fn back_difference_inverse(f: &CoeffFn, eps: f64) -> Result<CoeffFn> {
    let centred = f - &CoeffFn::constant(f.coeff(0, 0));
    let psi = centred.shift(1, eps).scale(-1.0).invert_one_minus_shift(eps)?;
    let psi0 = psi.eval(0.0);
    Ok(&psi - &CoeffFn::constant(psi0))
}

/// Velocity of `flow` at `os`: fields, gauge offsets, `τ` and times.
pub fn os_velocity(os: &OsState, flow: OsFlow, grid: &Grid) -> Result<OsVelocity> {
    let ops = OsOperators::build(os, grid)?;
    ops.velocity(flow)
}

impl OsOperators {
    pub fn velocity(&self, flow: OsFlow) -> Result<OsVelocity> {
        let g = self.pair.work_grid();
        let eps = g.eps();
        let k = self.order();
        let pr = self.projections(flow)?;
        let lo = if pr.minus_exact { pr.minus.kmin - 2 } else { pr.minus.kmin };

        // ∂L = −[X_-, L], trusted on [lo+1, 0].
        let dl = hp_scale(&hp_commutator(&pr.minus, &self.l, lo + 1, 0, g)?, -1.0);
        let dl = to_diffop(&dl, Span::new(lo + 1, 0), Span::ALL);
        let (du, dv, junk) = read_velocities(&dl, self.pair.v(), g)?;
        let anomaly = dl.norm_on(Span::new(-INF, -2), g).max(junk);

        // The same from [X_+, L] = Φ[X̃_+, L̃]Φ^{-1}.
        let (mut plus_anomaly, mut reps_gap) = (0.0, 0.0);
        if let OsFlow::Additional { .. } = flow {
            let hi = pr.plus_top.min(k + 4) - 1;
            let dlp = hp_commutator(&pr.plus_core, &self.lt, -1, hi, g)?;
            let dlp = hp_frame(&self.pair, &dlp, Span::ALL)?;
            let (pu, pv, _) = read_velocities(&dlp, self.pair.v(), g)?;
            plus_anomaly = dlp.norm_on(Span::new(1, INF), g);
            reps_gap = (&pu - &du).sup_norm(g).max((&pv - &dv).sup_norm(g));
        }

        // ∂S = −X_-S: offset rates are the constant terms of −(X_-S)_{−m}.
        let (hs, _, hy, _) = self.pair.hp_parts();
        let xs = pr.minus.mul_window(hs, -k, -1, g)?;
        let ds = (1..=k).map(|m| -real_const(xs.get(-m))).collect();

        // ∂S̄ = X_+S̄ with S̄ = e^{a}ΦY: ∂Y = ZY-part − ȧY, Z = X̃_+Y + dεY_x − (φ_t + xċ)Y.
        let mut z = pr.plus_core.mul_window(hy, 0, k, g)?;
        if pr.deriv != 0.0 {
            z = hp_add_scaled(&z, &hy.derivative(eps), pr.deriv);
        }
        let cdot = dv.coeff(0, 0).re / eps;
        let phit = &back_difference_inverse(&dv, eps)? + &CoeffFn::x_pow(1).scale(cdot);
        z = hp_sub(&z, &hp_left(&HpFn::from_coeff(&phit), hy, g)?);
        let adot = real_const(z.get(0));
        let dy = (1..=k)
            .map(|m| real_const(z.get(m)) - adot * real_const(hy.get(m)))
            .collect();

        let dtimes = match flow {
            OsFlow::Hierarchy(f) => vec![(f, 1.0)],
            _ => Vec::new(),
        };
        Ok(OsVelocity { du, dv, ds, dy, dtau: pr.deriv, dtimes, anomaly, plus_anomaly, reps_gap })
    }
}

/// Velocities whose secular or off-band content exceeds this are not tangent
/// to periodic fields and are refused by the bracket checks.
pub const TANGENCY_TOL: f64 = 1e-5;

fn tangent_velocity(os: &OsState, flow: OsFlow, grid: &Grid) -> Result<OsVelocity> {
    let v = os_velocity(os, flow, grid)?;
    if !(v.anomaly <= TANGENCY_TOL) {
        return Err(MethError::AnomalyExceeded { anomaly: v.anomaly, tol: TANGENCY_TOL });
    }
    Ok(v)
}

type FieldPair = (CoeffFn, CoeffFn);

/// `D V_flow · dir` by a central difference of step `h` in the augmented
/// state, with one Richardson step.
fn os_directional(os: &OsState, flow: OsFlow, dir: &OsVelocity, h: f64, grid: &Grid) -> Result<FieldPair> {
    let central = |h: f64| -> Result<FieldPair> {
        let p = os_velocity(&os.displaced(dir, h), flow, grid)?;
        let m = os_velocity(&os.displaced(dir, -h), flow, grid)?;
        let s = 1.0 / (2.0 * h);
        Ok(((&p.du - &m.du).scale(s), (&p.dv - &m.dv).scale(s)))
    };
    let (a, b) = (central(h)?, central(h / 2.0)?);
    Ok(((&b.0.scale(4.0) - &a.0).scale(1.0 / 3.0), (&b.1.scale(4.0) - &a.1).scale(1.0 / 3.0)))
}

/// Field components of the Lie bracket `[∂_a, ∂_b]L = DV_b·V_a − DV_a·V_b`,
/// with gauge offsets, `τ` and times transported along both flows.
pub fn os_bracket(os: &OsState, a: OsFlow, b: OsFlow, h: f64, grid: &Grid) -> Result<FieldPair> {
    let va = tangent_velocity(os, a, grid)?;
    let vb = tangent_velocity(os, b, grid)?;
    let db = os_directional(os, b, &va, h, grid)?;
    let da = os_directional(os, a, &vb, h, grid)?;
    Ok((&db.0 - &da.0, &db.1 - &da.1))
}

fn pair_norm(p: &FieldPair, g: &Grid) -> f64 {
    p.0.sup_norm(g).max(p.1.sup_norm(g))
}

/// `‖[∂*_{m,l}, ∂_f]‖` on `(u, v)`; `f` must keep the state on the slice.
pub fn hierarchy_commutation_residual(os: &OsState, ml: (usize, usize), f: FlowSpec, h: f64, grid: &Grid) -> Result<f64> {
    let a = OsFlow::Additional { m: ml.0, l: ml.1 };
    if ml == (0, 0) {
        return Ok(0.0);
    }
    Ok(pair_norm(&os_bracket(os, a, OsFlow::Hierarchy(f), h, grid)?, grid))
}

/// `Σ_j Re(conj(a_j) b_j)` over the periodic Fourier modes.
fn inner(a: &CoeffFn, b: &CoeffFn) -> f64 {
    let cap = a.mode_cap().min(b.mode_cap()) as i64;
    (-cap..=cap).map(|j| (a.coeff(0, j).conj() * b.coeff(0, j)).re).sum()
}

/// One measured Block relation `[∂*_{m,l}, ∂*_{n,k}] = (km − nl)∂*_{m+n−1,k+l−1}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockBracket {
    pub left: (usize, usize),
    pub right: (usize, usize),
    pub target: Option<(usize, usize)>,
    pub predicted: f64,
    /// Least-squares constant `c` in `bracket ≈ c·∂*_{target}` (Fourier inner product).
    pub measured: f64,
    /// `‖bracket − predicted·∂*_{target}‖`.
    pub residual: f64,
}

pub fn block_bracket_residual(
    os: &OsState,
    ml: (usize, usize),
    nk: (usize, usize),
    h: f64,
    grid: &Grid,
) -> Result<BlockBracket> {
    let (m, l) = ml;
    let (n, k) = nk;
    let predicted = (k * m) as f64 - (n * l) as f64;
    let target = (m + n >= 1 && k + l >= 1).then(|| (m + n - 1, k + l - 1));
    let bracket = if ml == nk {
        (CoeffFn::zero(), CoeffFn::zero())
    } else {
        os_bracket(os, OsFlow::Additional { m, l }, OsFlow::Additional { m: n, l: k }, h, grid)?
    };
    let (measured, residual) = match target {
        Some((p, q)) => {
            let t = tangent_velocity(os, OsFlow::Additional { m: p, l: q }, grid)?;
            let tt = inner(&t.du, &t.du) + inner(&t.dv, &t.dv);
            let bt = inner(&bracket.0, &t.du) + inner(&bracket.1, &t.dv);
            let measured = if tt > 0.0 { bt / tt } else { 0.0 };
            let r = (&bracket.0 - &t.du.scale(predicted), &bracket.1 - &t.dv.scale(predicted));
            (measured, pair_norm(&r, grid))
        }
        // k + l = 0 or m + n = 0: the constant is zero and there is no target.
        None => (0.0, pair_norm(&bracket, grid)),
    };
    Ok(BlockBracket { left: ml, right: nk, target, predicted, measured, residual })
}

/// `∂*_{1,1}` against its explicit form `du = a·u + Σ_f c_f(t) ∂_f u`,
/// `dv = b + Σ_f c_f(t) ∂_f v` (chain-rule terms over the supported times).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct T11Report {
    /// Printed form: `(u, 2v)` plus `Σ n t_{0,n}∂_{t_{0,n}} + t_{1,0}∂_{t_{1,0}} + 2t_{1,0}∂_{t_{0,0}}`.
    pub printed: f64,
    /// `(u, 2)` plus the chain-rule terms implied by the selected `Γ` variant.
    pub corrected: f64,
}

/// Chain-rule coefficients `c_f` of the printed `t*_{1,1}` display on the slice.
fn printed_chain(times: &BTreeMap<FlowSpec, f64>) -> Vec<(FlowSpec, f64)> {
    let mut out = Vec::new();
    for (f, &t) in times {
        match (f.alpha, f.n) {
            (0, n) => out.push((*f, n as f64 * t)),
            (1, 0) => {
                out.push((*f, t));
                out.push((FlowSpec { alpha: 0, n: 0 }, 2.0 * t));
            }
            _ => {}
        }
    }
    out
}

/// Chain-rule coefficients generated by the time terms of `Γ`: a term
/// `c·Λ^n` contributes `c·S Λ^{n+1} S^{-1} = c·L^{n+1}`, i.e. `c·(n+1)!·∂_{t_{0,n}}`,
/// and the `t_{1,0}` term of the wave-function variant adds a constant.
fn gamma_chain(times: &BTreeMap<FlowSpec, f64>, variant: GammaVariant) -> Vec<(FlowSpec, f64)> {
    gamma_time_terms(times, variant)
        .into_iter()
        .filter(|&(p, _)| p >= 0)
        .map(|(p, c)| (FlowSpec { alpha: 0, n: p as usize }, c * factorial(p as usize + 1)))
        .collect()
}

pub fn t11_flow_formula_residual(os: &OsState, grid: &Grid) -> Result<T11Report> {
    let ops = OsOperators::build(os, grid)?;
    let g = ops.pair.work_grid();
    let star = ops.velocity(OsFlow::Additional { m: 1, l: 1 })?;
    let (u, v) = (&os.lattice.u, &os.lattice.v);
    let eval = |base_u: CoeffFn, base_v: CoeffFn, chain: Vec<(FlowSpec, f64)>| -> Result<f64> {
        let (mut du, mut dv) = (base_u, base_v);
        for (f, c) in chain {
            let hv = ops.velocity(OsFlow::Hierarchy(f))?;
            du = &du + &hv.du.scale(c);
            dv = &dv + &hv.dv.scale(c);
        }
        Ok((&du - &star.du).sup_norm(g).max((&dv - &star.dv).sup_norm(g)))
    };
    let printed = eval(u.clone(), v.scale(2.0), printed_chain(&os.lattice.times))?;
    let corrected = eval(u.clone(), CoeffFn::constant(2.0), gamma_chain(&os.lattice.times, os.variant))?;
    Ok(T11Report { printed, corrected })
}

/// `∫Res (M−M̄)^m L^l dx`, with the secular part of the residue kept apart.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdditionalHamiltonian {
    /// Integral of the periodic part of the density.
    pub value: f64,
    /// Sup norm (centred period) of the x-polynomial part of the density.
    pub secular: f64,
}

impl OsOperators {
    /// `Res (M−M̄)^m L^l`.
    pub fn additional_density(&self, m: usize, l: usize) -> Result<CoeffFn> {
        let g = self.pair.work_grid();
        match m {
            0 => Ok(hp_pow(&self.l, l, g)?.get(0).map(|c| c.to_coeff()).unwrap_or_else(CoeffFn::zero)),
            1 => {
                let ll = hp_pow(&self.l, l, g)?;
                let llt = hp_pow(&self.lt, l, g)?;
                let p = self.m.mul_window(&ll, 0, 0, g)?;
                let pt = self.mt.mul_window(&llt, 0, 0, g)?;
                Ok(hp_sub(&p, &pt).coeffs[0].to_coeff())
            }
            _ => Err(MethError::BandOverflow(format!("Res (M−M̄)^{m}L^{l} is an infinite sum"))),
        }
    }
}

pub fn additional_hamiltonian(os: &OsState, m: usize, l: usize, grid: &Grid) -> Result<AdditionalHamiltonian> {
    if m == 0 {
        let h = MixedOp::lax(&os.lattice.u, &os.lattice.v, grid)?.pow(l, grid)?.residue();
        return Ok(AdditionalHamiltonian { value: crate::hamiltonian::integral(&h).re, secular: 0.0 });
    }
    let ops = OsOperators::build(os, grid)?;
    let g = ops.pair.work_grid();
    let h = ops.additional_density(m, l)?;
    let periodic = h.periodic_part();
    let secular = (&h - &periodic).sup_norm(g);
    Ok(AdditionalHamiltonian { value: crate::hamiltonian::integral(&periodic).re, secular })
}

/// First-bracket generation of `∂*_{m,l}` by `H*_{hm}` (`hm = (m, l)` or, as
/// for the Toda flows, `(m, l+1)`): the gradient is taken by finite differences
/// (gauge offsets held fixed), the scale `s` in `∂* = s·{·, H*}_1` is fitted,
/// and `(s, relative residual)` returned.
pub fn additional_hamiltonian_match(
    os: &OsState,
    (m, l): (usize, usize),
    hm: (usize, usize),
    grid: &Grid,
) -> Result<(f64, f64)> {
    let flow = tangent_velocity(os, OsFlow::Additional { m, l }, grid)?;
    let (m, l) = hm;
    let g = grid.detached();
    let functional = |s: &LatticeState| -> Result<f64> {
        let mut o = os.clone();
        o.lattice = s.clone();
        Ok(additional_hamiltonian(&o, m, l, &g)?.value)
    };
    let grad = crate::hamiltonian::var_deriv_of(
        functional,
        &os.lattice,
        crate::hamiltonian::gradient_modes(grid),
        crate::hamiltonian::GRADIENT_STEP,
    )?;
    let (pu, pv) = crate::hamiltonian::pb1_flow(&grad, grid.eps());
    let pp = inner(&pu, &pu) + inner(&pv, &pv);
    let s = if pp > 0.0 { (inner(&pu, &flow.du) + inner(&pv, &flow.dv)) / pp } else { 0.0 };
    let r = (&flow.du - &pu.scale(s)).sup_norm(grid).max((&flow.dv - &pv.scale(s)).sup_norm(grid));
    let norm = flow.du.sup_norm(grid).max(flow.dv.sup_norm(grid)).max(f64::MIN_POSITIVE);
    Ok((s, r / norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::velocities;
    use crate::GridSpec;

    fn spec(jmax: usize) -> GridSpec {
        GridSpec { modes: 4, max_modes: jmax, ..GridSpec::default() }
    }

    fn os(seed: u64, jmax: usize, k: usize, variant: GammaVariant) -> (Grid, OsState) {
        let st = LatticeState::random(spec(jmax), 0.2, seed);
        (Grid::new(spec(jmax)).unwrap(), OsState::new(st, k, variant).unwrap())
    }

    fn t(alpha: u8, n: usize) -> FlowSpec {
        FlowSpec::new(alpha, n).unwrap()
    }

    #[test]
    fn bare_operators() {
        let g = Grid::new(spec(16)).unwrap();
        let mut times = BTreeMap::new();
        let (gam, gbar) = build_gamma(&times, GammaVariant::AsDefined, &g).unwrap();
        assert_eq!(gam.deriv_order(), 0);
        let xe = CoeffFn::x_pow(1).scale(1.0 / g.eps());
        assert!((&gam.diff().coeff_or_zero(-1) - &xe).max_abs() < 1e-15);
        assert!((&gbar.diff().coeff_or_zero(1) + &xe).max_abs() < 1e-15);
        times.insert(t(0, 2), 0.4);
        times.insert(t(0, 0), -1.5);
        for v in [GammaVariant::AsDefined, GammaVariant::ProofForm, GammaVariant::WaveFunction] {
            let (gam, gbar) = build_gamma(&times, v, &g).unwrap();
            let one = |a: &MixedOp, b: &MixedOp| {
                let c = a.commutator(b, &g).unwrap().sub(&MixedOp::identity());
                c.norm(&g)
            };
            assert!(one(&MixedOp::shift_op(1), &gam) < 1e-13);
            assert!(one(&MixedOp::shift_op(-1), &gbar) < 1e-13);
        }
        let (gam, _) = build_gamma(&times, GammaVariant::AsDefined, &g).unwrap();
        assert!((gam.diff().coeff_or_zero(2).coeff(0, 0).re - 1.2).abs() < 1e-15);
        let (gam, _) = build_gamma(&times, GammaVariant::ProofForm, &g).unwrap();
        assert!((gam.diff().coeff_or_zero(2).coeff(0, 0).re - 0.2).abs() < 1e-15);
    }

    #[test]
    fn slice_is_enforced() {
        let mut times = BTreeMap::new();
        times.insert(t(1, 0), 0.3);
        times.insert(t(0, 4), 0.3);
        assert!(check_slice(&times).is_ok());
        times.insert(t(1, 1), 0.1);
        assert!(matches!(check_slice(&times), Err(MethError::SliceViolation(_))));
        let mut st = LatticeState::random(spec(16), 0.1, 1);
        st.times.insert(t(2, 0), 1.0);
        assert!(OsState::new(st, 4, GammaVariant::default()).is_err());
    }

    #[test]
    fn canonical_relations() {
        let (g, mut o) = os(3, 64, 8, GammaVariant::ProofForm);
        o.lattice.times.insert(t(0, 1), 0.4);
        o.lattice.times.insert(t(1, 0), -0.3);
        let r = OsOperators::build(&o, &g).unwrap().canonical_residuals().unwrap();
        assert!(r.l_m < 1e-10 && r.l_mbar < 1e-10 && r.diff_l < 1e-10, "{r:?}");
        assert!(r.log_m_minus_linv < 1e-10 && r.log_m_minus_l > 0.1, "{r:?}");
    }

    #[test]
    fn m_matches_direct_conjugation() {
        let g = Grid::new(spec(16)).unwrap();
        let st = LatticeState::new(CoeffFn::zero(), CoeffFn::zero(), spec(16)).unwrap();
        let o = OsState::new(st, 4, GammaVariant::default()).unwrap();
        let ops = OsOperators::build(&o, &g).unwrap();
        let p = &ops.pair;
        let wg = p.work_grid();
        let xe = DiffOp::monomial(-1, CoeffFn::x_pow(1).scale(1.0 / g.eps()));
        let direct = p.s.mul(&xe, wg).unwrap().mul(&p.s_inverse(), wg).unwrap();
        let diff = direct.sub(&ops.m());
        let w = Span::new(-5, -1);
        assert!(direct.norm_on(w, wg) > 1.0);
        assert!(diff.norm_on(w, wg) < 1e-12 * direct.norm_on(w, wg));
    }

    #[test]
    fn explicit_additional_flows() {
        let (g, o) = os(5, 32, 8, GammaVariant::default());
        let ops = OsOperators::build(&o, &g).unwrap();
        let (u, v) = (&o.lattice.u, &o.lattice.v);
        let vel = |m, l| ops.velocity(OsFlow::Additional { m, l }).unwrap();
        let z = vel(0, 0);
        assert!(z.du.max_abs() < 1e-15 && z.dv.max_abs() < 1e-15);
        let (tu, tv) = velocities(&o.lattice, t(0, 0), 8, &g).unwrap();
        let a = vel(0, 1);
        assert!((&a.du - &tu).sup_norm(&g) < 1e-12 && (&a.dv - &tv).sup_norm(&g) < 1e-12);
        let b = vel(1, 0);
        assert!((&b.du - &CoeffFn::one()).sup_norm(&g) < 1e-10 && b.dv.sup_norm(&g) < 1e-10);
        let c = vel(1, 1);
        assert!((&c.du - u).sup_norm(&g) < 1e-10 && (&c.dv - &CoeffFn::constant(2.0)).sup_norm(&g) < 1e-10);
        let _ = v;
        for f in [b, c, vel(0, 3)] {
            assert!(f.reps_gap < 1e-9 && f.plus_anomaly < 1e-8 && f.anomaly < 1e-8, "{f:?}");
        }
        assert!(vel(1, 2).anomaly > 0.1);
        assert!(matches!(ops.velocity(OsFlow::Additional { m: 2, l: 0 }), Err(MethError::BandOverflow(_))));
        assert!(matches!(ops.velocity(OsFlow::Hierarchy(t(1, 1))), Err(MethError::SliceViolation(_))));
    }

    #[test]
    fn commutation_selects_proof_form() {
        let f = t(0, 1);
        let (g, o) = os(6, 32, 8, GammaVariant::ProofForm);
        assert!(hierarchy_commutation_residual(&o, (1, 1), f, 1e-2, &g).unwrap() < 1e-8);
        assert!(hierarchy_commutation_residual(&o, (1, 0), t(1, 0), 1e-2, &g).unwrap() < 1e-8);
        let (g, o) = os(6, 32, 8, GammaVariant::AsDefined);
        assert!(hierarchy_commutation_residual(&o, (1, 0), f, 1e-2, &g).unwrap() > 1e-3);
        assert_eq!(hierarchy_commutation_residual(&o, (0, 0), f, 1e-2, &g).unwrap(), 0.0);
    }

    #[test]
    fn block_relations() {
        let (g, o) = os(7, 32, 8, GammaVariant::default());
        let r = block_bracket_residual(&o, (1, 0), (1, 1), 1e-2, &g).unwrap();
        assert_eq!(r.target, Some((1, 0)));
        assert!((r.measured - 1.0).abs() < 1e-8 && r.residual < 1e-8, "{r:?}");
        let r = block_bracket_residual(&o, (1, 1), (0, 2), 1e-2, &g).unwrap();
        assert!((r.measured - 2.0).abs() < 1e-7 && r.residual < 1e-7, "{r:?}");
        let r = block_bracket_residual(&o, (1, 1), (1, 1), 1e-2, &g).unwrap();
        assert_eq!(r.residual, 0.0);
        assert!(block_bracket_residual(&o, (1, 1), (2, 1), 1e-2, &g).is_err());
    }

    #[test]
    fn t11_display() {
        let (g, mut o) = os(8, 32, 8, GammaVariant::ProofForm);
        o.lattice.times.insert(t(0, 1), 0.25);
        let r = t11_flow_formula_residual(&o, &g).unwrap();
        assert!(r.corrected < 1e-10 && r.printed > 0.5, "{r:?}");
    }

    #[test]
    fn additional_hamiltonians() {
        let (g, o) = os(9, 16, 6, GammaVariant::default());
        let h = additional_hamiltonian(&o, 0, 1, &g).unwrap();
        assert!((h.value - crate::hamiltonian::integral(&o.lattice.u).re).abs() < 1e-14);
        let (s, r) = additional_hamiltonian_match(&o, (0, 1), (0, 2), &g).unwrap();
        assert!((s - g.eps() / 2.0).abs() < 1e-8 && r < 1e-8, "{s} {r}");
    }
}
