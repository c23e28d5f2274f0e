//! Flow generators `A_{α,n}`, the induced `(u, v)` evolution, time stepping and
//! flow-commutation checks.
//!
//! Every right-hand side is computed from the pure-difference form
//! `∂L/∂t = −[(B_{α,n})_-, L]`, which is the form the Sato equations
//! `∂S = −(B)_-S` produce. For `α = 0, 1` it coincides with `[A_{α,n}, L]`.
//! For `α = 2` the generator as defined is `A_{2,n} = (B_{2,n})_-`, so
//! `[A_{2,n}, L]` differs from it by a sign; the Sato form is used throughout.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dressing::{self, DressingPair};
use crate::error::{MethError, Result};
use crate::fields::{CoeffFn, Grid, GridSpec};
use crate::opalg::{DiffOp, MixedOp, Span};
use num_complex::Complex64 as C64;

/// Largest admissible anomaly of a Lax right-hand side.
pub const ANOMALY_TOL: f64 = 1e-6;

/// Field norm beyond which an evolution is declared to have blown up.
pub const BLOWUP_NORM: f64 = 1e6;

/// `c_n = Σ_{k=1}^n 1/k`.
pub fn harmonic(n: usize) -> Ratio<i64> {
    (1..=n as i64).fold(Ratio::from_integer(0), |acc, k| acc + Ratio::new(1, k))
}

fn harmonic_f64(n: usize) -> f64 {
    let c = harmonic(n);
    *c.numer() as f64 / *c.denom() as f64
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Flow index `(α, n)`, written `"α,n"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowSpec {
    pub alpha: u8,
    pub n: usize,
}

impl FlowSpec {
    pub fn new(alpha: u8, n: usize) -> Result<FlowSpec> {
        if alpha > 2 {
            return Err(MethError::Config(format!("flow family α = {alpha} not in {{0,1,2}}")));
        }
        Ok(FlowSpec { alpha, n })
    }

    /// All nine flows with `n ≤ 2`.
    pub fn basic() -> Vec<FlowSpec> {
        (0..3).flat_map(|alpha| (0..3).map(move |n| FlowSpec { alpha, n })).collect()
    }
}

impl fmt::Display for FlowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.alpha, self.n)
    }
}

impl FromStr for FlowSpec {
    type Err = MethError;

    fn from_str(s: &str) -> Result<FlowSpec> {
        let bad = || MethError::Config(format!("flow `{s}` is not of the form α,n"));
        let (a, n) = s.split_once(',').ok_or_else(bad)?;
        FlowSpec::new(a.trim().parse().map_err(|_| bad())?, n.trim().parse().map_err(|_| bad())?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TimeEntry {
    alpha: u8,
    n: usize,
    t: f64,
}

mod times_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<FlowSpec, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v: Vec<TimeEntry> = m.iter().map(|(f, &t)| TimeEntry { alpha: f.alpha, n: f.n, t }).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<FlowSpec, f64>, D::Error> {
        let v = Vec::<TimeEntry>::deserialize(d)?;
        Ok(v.into_iter().map(|e| (FlowSpec { alpha: e.alpha, n: e.n }, e.t)).collect())
    }
}

/// Periodic fields `(u, v)` plus the flow times reached so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeState {
    pub u: CoeffFn,
    pub v: CoeffFn,
    #[serde(default, with = "times_serde")]
    pub times: BTreeMap<FlowSpec, f64>,
    pub grid: GridSpec,
}

impl LatticeState {
    pub fn new(u: CoeffFn, v: CoeffFn, grid: GridSpec) -> Result<LatticeState> {
        if u.xdeg() > 0 || v.xdeg() > 0 {
            return Err(MethError::SecularExponent { degree: u.xdeg().max(v.xdeg()) });
        }
        Ok(LatticeState { u, v, times: BTreeMap::new(), grid })
    }

    /// Zero-mean random real fields with `J = grid.modes` modes, reproducible from `seed`.
    pub fn random(grid: GridSpec, amplitude: f64, seed: u64) -> LatticeState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = CoeffFn::random_real(grid.modes, amplitude, &mut rng);
        let v = CoeffFn::random_real(grid.modes, amplitude, &mut rng);
        LatticeState { u, v, times: BTreeMap::new(), grid }
    }

    pub fn time(&self, f: FlowSpec) -> f64 {
        self.times.get(&f).copied().unwrap_or(0.0)
    }

    /// `self + s·(du, dv)`, times untouched.
    pub fn displaced(&self, du: &CoeffFn, dv: &CoeffFn, s: f64) -> LatticeState {
        LatticeState { u: &self.u + &du.scale(s), v: &self.v + &dv.scale(s), times: self.times.clone(), grid: self.grid }
    }

    pub fn field_norm(&self, grid: &Grid) -> f64 {
        self.u.sup_norm(grid).max(self.v.sup_norm(grid))
    }
}

/// Lax operator of a state together with its lazily solved dressing and logarithms.
pub struct FlowContext {
    grid: Grid,
    u: CoeffFn,
    v: CoeffFn,
    order: usize,
    lax: MixedOp,
    pair: OnceCell<DressingPair>,
    log_plus: OnceCell<MixedOp>,
    log_minus: OnceCell<MixedOp>,
}

impl FlowContext {
    pub fn new(state: &LatticeState, order: usize, grid: &Grid) -> Result<FlowContext> {
        Ok(FlowContext {
            lax: MixedOp::lax(&state.u, &state.v, grid)?,
            grid: grid.clone(),
            u: state.u.clone(),
            v: state.v.clone(),
            order,
            pair: OnceCell::new(),
            log_plus: OnceCell::new(),
            log_minus: OnceCell::new(),
        })
    }

    /// Context around an already solved dressing pair.
    pub fn from_pair(pair: DressingPair, grid: &Grid) -> Result<FlowContext> {
        let ctx = FlowContext {
            lax: pair.lax()?,
            grid: grid.clone(),
            u: pair.u().clone(),
            v: pair.v().clone(),
            order: pair.order,
            pair: OnceCell::new(),
            log_plus: OnceCell::new(),
            log_minus: OnceCell::new(),
        };
        let _ = ctx.pair.set(pair);
        Ok(ctx)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn lax(&self) -> &MixedOp {
        &self.lax
    }

    pub fn u(&self) -> &CoeffFn {
        &self.u
    }

    pub fn v(&self) -> &CoeffFn {
        &self.v
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn pair(&self) -> Result<&DressingPair> {
        if let Some(p) = self.pair.get() {
            return Ok(p);
        }
        let p = dressing::solve_dressing(&self.u, &self.v, self.order, &self.grid)?;
        Ok(self.pair.get_or_init(|| p))
    }

    pub fn log_plus(&self) -> Result<&MixedOp> {
        if let Some(l) = self.log_plus.get() {
            return Ok(l);
        }
        let l = dressing::log_plus(self.pair()?)?;
        Ok(self.log_plus.get_or_init(|| l))
    }

    pub fn log_minus(&self) -> Result<&MixedOp> {
        if let Some(l) = self.log_minus.get() {
            return Ok(l);
        }
        let l = dressing::log_minus(self.pair()?)?;
        Ok(self.log_minus.get_or_init(|| l))
    }

    /// `L^n (log_±L − c)`, the building block of the extended flows and densities.
    pub fn log_block(&self, plus: bool, n: usize, c: f64) -> Result<MixedOp> {
        let log = if plus { self.log_plus()? } else { self.log_minus()? };
        let shifted = log.sub(&MixedOp::scalar(c));
        self.lax.pow(n, &self.grid)?.mul(&shifted, &self.grid)
    }
}

/// `B_{α,n}`: `L^{n+1}/(n+1)!`, `(2/n!)L^n(log_+L − c_n)` or `−(2/(n+1)!)L^{n+1}(log_−L − c_{n+1})`.
pub fn flow_operator(ctx: &FlowContext, f: FlowSpec) -> Result<MixedOp> {
    let n = f.n;
    match f.alpha {
        0 => Ok(ctx.lax.pow(n + 1, &ctx.grid)?.scale(1.0 / factorial(n + 1))),
        1 => Ok(ctx.log_block(true, n, harmonic_f64(n))?.scale(2.0 / factorial(n))),
        2 => Ok(ctx.log_block(false, n + 1, harmonic_f64(n + 1))?.scale(-2.0 / factorial(n + 1))),
        a => Err(MethError::Config(format!("flow family α = {a} not in {{0,1,2}}"))),
    }
}

/// `A_{α,n}`: `(B)_+` for `α = 0, 1` and `(B)_-` for `α = 2`, as defined.
pub fn flow_generator(ctx: &FlowContext, f: FlowSpec) -> Result<MixedOp> {
    let b = flow_operator(ctx, f)?;
    Ok(if f.alpha == 2 { b.minus() } else { b.plus() })
}

/// Induced field velocities and the size of everything in `∂L/∂t` that must vanish.
#[derive(Clone, Debug)]
pub struct FlowRHS {
    pub du: CoeffFn,
    pub dv: CoeffFn,
    pub anomaly: f64,
}

/// Reads `(u_t, v_t)` off `∂L/∂t = L_t`: `u_t` is the `Λ^0` coefficient and
/// `e^v v_t` the `Λ^{-1}` one; everything else is anomaly.
pub fn extract_velocities(lt: &MixedOp, v: &CoeffFn, grid: &Grid) -> Result<FlowRHS> {
    let trust = lt.trust();
    let d0 = lt.diff();
    let du = d0.coeff_or_zero(0).real_part();
    let dv = d0.coeff_or_zero(-1).mul(&v.scale(-1.0).exp(grid)?, grid)?.real_part();
    let mut anomaly = d0.norm_on(Span::new(1, crate::opalg::INF), grid).max(d0.norm_on(Span::new(-crate::opalg::INF, -2), grid));
    for part in &lt.parts()[1..] {
        anomaly = anomaly.max(part.norm_on(trust, grid));
    }
    // Any imaginary residue or secular content in the velocities is also anomalous.
    let im = (&d0.coeff_or_zero(0) - &du).max_abs();
    Ok(FlowRHS { du: du.drop_secular(0, grid), dv: dv.drop_secular(0, grid), anomaly: anomaly.max(im) })
}

/// `−[(B_{α,n})_-, L]` and its velocities, without the anomaly check.
pub fn lax_rhs_unchecked(ctx: &FlowContext, f: FlowSpec) -> Result<FlowRHS> {
    let bm = flow_operator(ctx, f)?.minus();
    let lt = bm.commutator(&ctx.lax, &ctx.grid)?.scale(-1.0);
    extract_velocities(&lt, &ctx.v, &ctx.grid)
}

/// Velocities of the flow `t_{α,n}`; fails when the anomaly exceeds [`ANOMALY_TOL`].
pub fn lax_rhs(ctx: &FlowContext, f: FlowSpec) -> Result<FlowRHS> {
    let r = lax_rhs_unchecked(ctx, f)?;
    if !(r.anomaly <= ANOMALY_TOL) {
        return Err(MethError::AnomalyExceeded { anomaly: r.anomaly, tol: ANOMALY_TOL });
    }
    Ok(r)
}

/// `‖[(B)_+, L] + [(B)_-, L]‖` on the trusted band: agreement of the two Lax forms.
pub fn projection_mismatch(ctx: &FlowContext, f: FlowSpec) -> Result<f64> {
    let b = flow_operator(ctx, f)?;
    let g = &ctx.grid;
    let sum = b.plus().commutator(&ctx.lax, g)?.add(&b.minus().commutator(&ctx.lax, g)?);
    Ok(sum.norm_on(sum.trust(), g))
}

/// `∫_0^{2π} Res L^{n+1}/(n+1)! dx`, the Toda charges recorded along trajectories.
pub fn toda_charge(lax: &MixedOp, n: usize, grid: &Grid) -> Result<f64> {
    let h = lax.pow(n + 1, grid)?.residue();
    Ok((h.mean() * grid.spec.period() / factorial(n + 1)).re)
}

/// One recorded step of an evolution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    /// `H_{0,0}, H_{0,1}, H_{0,2}`.
    pub charges: Vec<f64>,
    pub u_norm: f64,
    pub v_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub flow: FlowSpec,
    pub dt: f64,
    pub states: Vec<LatticeState>,
    pub records: Vec<StepRecord>,
}

impl Trajectory {
    pub fn last(&self) -> &LatticeState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// `(u_t, v_t)` at a state, dressing re-solved from scratch.
pub fn velocities(state: &LatticeState, f: FlowSpec, order: usize, grid: &Grid) -> Result<(CoeffFn, CoeffFn)> {
    let ctx = FlowContext::new(state, order, grid)?;
    let r = lax_rhs(&ctx, f)?;
    Ok((r.du, r.dv))
}

fn record(state: &LatticeState, step: usize, t: f64, grid: &Grid) -> Result<StepRecord> {
    let lax = MixedOp::lax(&state.u, &state.v, grid)?;
    let charges = (0..3).map(|n| toda_charge(&lax, n, grid)).collect::<Result<Vec<_>>>()?;
    Ok(StepRecord { step, t, charges, u_norm: state.u.sup_norm(grid), v_norm: state.v.sup_norm(grid) })
}

/// One classical RK4 step of size `dt` along `f`.
pub fn rk4_step(state: &LatticeState, f: FlowSpec, dt: f64, order: usize, grid: &Grid) -> Result<LatticeState> {
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let (k1u, k1v) = velocities(state, f, order, grid)?;
    let (k2u, k2v) = velocities(&state.displaced(&k1u, &k1v, dt / 2.0), f, order, grid)?;
    let (k3u, k3v) = velocities(&state.displaced(&k2u, &k2v, dt / 2.0), f, order, grid)?;
    let (k4u, k4v) = velocities(&state.displaced(&k3u, &k3v, dt), f, order, grid)?;
    let du = &(&k1u + &k4u) + &(&k2u + &k3u).scale(2.0);
    let dv = &(&k1v + &k4v) + &(&k2v + &k3v).scale(2.0);
    let mut next = state.displaced(&du, &dv, dt / 6.0);
    *next.times.entry(f).or_insert(0.0) += dt;
    Ok(next)
}

/// `steps` RK4 steps of `f`; the trajectory holds `steps + 1` states with
/// Toda charges and field norms recorded at each.
pub fn evolve(state: &LatticeState, f: FlowSpec, dt: f64, steps: usize, order: usize, grid: &Grid) -> Result<Trajectory> {
    let t0 = state.time(f);
    let mut states = vec![state.clone()];
    let mut records = vec![record(state, 0, t0, grid)?];
    for step in 1..=steps {
        let next = rk4_step(states.last().unwrap(), f, dt, order, grid)?;
        let norm = next.field_norm(grid);
        if !(norm <= BLOWUP_NORM) {
            return Err(MethError::BlowUp(norm));
        }
        records.push(record(&next, step, next.time(f), grid)?);
        states.push(next);
    }
    Ok(Trajectory { flow: f, dt, states, records })
}

/// Central difference `(X(q + hY) − X(q − hY))/(2h)` of the vector field `X = f`.
fn directional(
    state: &LatticeState,
    f: FlowSpec,
    dir: &(CoeffFn, CoeffFn),
    h: f64,
    order: usize,
    grid: &Grid,
) -> Result<(CoeffFn, CoeffFn)> {
    let (pu, pv) = velocities(&state.displaced(&dir.0, &dir.1, h), f, order, grid)?;
    let (mu, mv) = velocities(&state.displaced(&dir.0, &dir.1, -h), f, order, grid)?;
    let s = 1.0 / (2.0 * h);
    Ok(((&pu - &mu).scale(s), (&pv - &mv).scale(s)))
}

/// Central difference with one Richardson step (`h` and `h/2`).
fn directional_richardson(
    state: &LatticeState,
    f: FlowSpec,
    dir: &(CoeffFn, CoeffFn),
    h: f64,
    order: usize,
    grid: &Grid,
) -> Result<(CoeffFn, CoeffFn)> {
    let (au, av) = directional(state, f, dir, h, order, grid)?;
    let (bu, bv) = directional(state, f, dir, h / 2.0, order, grid)?;
    Ok(((&bu.scale(4.0) - &au).scale(1.0 / 3.0), (&bv.scale(4.0) - &av).scale(1.0 / 3.0)))
}

/// Sup norm of the Lie bracket `[X_{f1}, X_{f2}] = DX_{f2}·X_{f1} − DX_{f1}·X_{f2}`
/// of two flows, each Jacobian applied by central differences of step `h`
/// (with Richardson extrapolation). Vanishes for commuting flows.
pub fn flow_commutator_residual(
    state: &LatticeState,
    f1: FlowSpec,
    f2: FlowSpec,
    h: f64,
    order: usize,
    grid: &Grid,
) -> Result<f64> {
    if f1 == f2 {
        return Ok(0.0);
    }
    let x1 = velocities(state, f1, order, grid)?;
    let x2 = velocities(state, f2, order, grid)?;
    let d2 = directional_richardson(state, f2, &x1, h, order, grid)?;
    let d1 = directional_richardson(state, f1, &x2, h, order, grid)?;
    Ok((&d2.0 - &d1.0).sup_norm(grid).max((&d2.1 - &d1.1).sup_norm(grid)))
}

/// Gauge-aligned Sato residuals for `S` and `S̄` (see [`sato_residuals`]).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SatoResidual {
    pub s: f64,
    pub sbar: f64,
    /// Sup norms of the measured `∂S`, `∂S̄` on the compared bands, for scale.
    pub ds_norm: f64,
    pub dsbar_norm: f64,
}

fn dressing_at(state: &LatticeState, order: usize, grid: &Grid) -> Result<DressingPair> {
    dressing::solve_dressing(&state.u, &state.v, order, grid)
}

/// `(X(+h) − X(−h))/(2h)` with one Richardson step, for operators sampled at `±h`, `±h/2`.
fn richardson_op(samples: &[(DiffOp, DiffOp); 2], h: f64) -> DiffOp {
    let d = |(p, m): &(DiffOp, DiffOp), hh: f64| p.sub(m).scale(1.0 / (2.0 * hh));
    d(&samples[1], h / 2.0).scale(4.0).sub(&d(&samples[0], h)).scale(1.0 / 3.0)
}

/// Sup norm over `window` of `R − A·C`, where the constant-coefficient `C` is
/// fitted triangularly along `ks` (`(A·C)_k = Σ_m a_{k−m} c_m`, with `a_0`
/// invertible): each `c_k` is the mean of what is left after the known terms.
fn gauge_aligned(r: &DiffOp, a: &DiffOp, ks: impl Iterator<Item = i64>, window: Span, grid: &Grid) -> Result<f64> {
    let a0 = a.coeff_or_zero(0);
    let inv_lead = a0.recip(grid)?;
    let mut consts: Vec<(i64, C64)> = Vec::new();
    let mut worst: f64 = 0.0;
    for k in ks {
        let mut rest = r.coeff_or_zero(k);
        for &(m, c) in &consts {
            rest -= &a.coeff_or_zero(k - m).scale(c);
        }
        let c = rest.mul(&inv_lead, grid)?.mean();
        let e = &rest - &a0.scale(c);
        if window.contains(k) {
            worst = worst.max(e.sup_norm(grid));
        }
        consts.push((k, c));
    }
    Ok(worst)
}

/// `e^{−cx} B e^{cx}` for `B` of derivation order ≤ 1: `ε∂ ↦ ε∂ + εc`.
fn frame_rate_conj(b: &MixedOp, rate: f64, eps: f64) -> Result<MixedOp> {
    if rate == 0.0 || b.deriv_order() == 0 {
        return Ok(b.clone());
    }
    if b.deriv_order() > 1 {
        return Err(MethError::DerivationOverflow { order: b.deriv_order(), cap: 1 });
    }
    let p1 = b.parts()[1].clone();
    Ok(MixedOp::from_parts(vec![b.diff().add(&p1.scale(eps * rate)), p1]))
}

/// Sato equations along `f`: finite-difference `∂S`, `∂S̄` from RK4 steps of
/// `±h`, `±h/2` (Richardson-extrapolated), compared with `−(B)_-S` and
/// `(B)_+S̄`. The pinned dressing gauge moves with the fields, so the
/// differences are only required to be right multiples `S·C`, `S̄·C̄` with
/// constant coefficients (`C̄` may carry `ε∂`); the remainder after fitting
/// those is reported, on `[−K, −1]` for `S` and `[0, K]` for `S̄`.
pub fn sato_residuals(state: &LatticeState, f: FlowSpec, h: f64, order: usize, grid: &Grid) -> Result<SatoResidual> {
    let ctx = FlowContext::new(state, order, grid)?;
    let p0 = ctx.pair()?;
    let wg = p0.work_grid().clone();
    let b = flow_operator(&ctx, f)?;

    let mut s_samples = Vec::new();
    let mut sb_samples = Vec::new();
    for hh in [h, h / 2.0] {
        let pp = dressing_at(&rk4_step(state, f, hh, order, grid)?, order, grid)?;
        let pm = dressing_at(&rk4_step(state, f, -hh, order, grid)?, order, grid)?;
        s_samples.push((pp.s.clone(), pm.s.clone()));
        sb_samples.push((pp.sbar()?, pm.sbar()?));
    }
    let k = order as i64;

    let s = &p0.s;
    let ds = richardson_op(&[s_samples[0].clone(), s_samples[1].clone()], h);
    let r = ds.add(&b.minus().diff().mul(s, &wg)?);
    let win = Span::new(-k, -1).intersect(&r.trust());
    let res_s = gauge_aligned(&r, s, (1..=k).map(|j| -j), win, &wg)?;

    let sb = p0.sbar()?;
    let dsb = richardson_op(&[sb_samples[0].clone(), sb_samples[1].clone()], h);
    let bp = frame_rate_conj(&b.plus(), p0.rate, grid.eps())?;
    let bps = bp.mul(&MixedOp::from(sb.clone()), &wg)?;
    let mut res_sb: f64 = 0.0;
    for (d, part) in bps.parts().iter().enumerate() {
        let rd = if d == 0 { dsb.sub(part) } else { part.scale(-1.0) };
        let win = Span::new(0, k).intersect(&rd.trust());
        res_sb = res_sb.max(gauge_aligned(&rd, &sb, 0..=k, win, &wg)?);
    }
    Ok(SatoResidual {
        s: res_s,
        sbar: res_sb,
        ds_norm: ds.norm_on(Span::new(-k, -1), &wg),
        dsbar_norm: dsb.norm_on(Span::new(0, k), &wg),
    })
}
