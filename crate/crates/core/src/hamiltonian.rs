//! Hamiltonian densities, variational derivatives, the two Poisson brackets and
//! the checks built on them: Hamiltonian form of the flows, bi-Hamiltonian
//! recursion, tau symmetry, conservation and secular cancellation.
//!
//! Variational derivatives are taken numerically: the functional is
//! differentiated along real Fourier-mode perturbations `cos jx`, `sin jx`
//! (`|j| ≤ modes`) of each field by Richardson-extrapolated central differences.
//! This treats every density uniformly, including the nonlocal-looking
//! logarithmic ones.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::dressing;
use crate::error::{MethError, Result};
use crate::fields::{CoeffFn, Grid};
use crate::hierarchy::{self, harmonic, FlowContext, FlowSpec, LatticeState, Trajectory};
use crate::opalg::MixedOp;

/// Which formula to use for `h_{2,n}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum H2Form {
    /// `(2/n!) Res[L^n (log_−L − c_n)]`.
    #[default]
    AsPrinted,
    /// `−(2/(n+1)!) Res[L^{n+1} (log_−L − c_{n+1})]`, the residue of `B_{2,n}`.
    Shifted,
}

/// Identifies a density `h_{β,n}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DensitySpec {
    pub beta: u8,
    pub n: usize,
    #[serde(default)]
    pub h2: H2Form,
}

impl DensitySpec {
    pub fn new(beta: u8, n: usize) -> DensitySpec {
        DensitySpec { beta, n, h2: H2Form::AsPrinted }
    }

    pub fn with_h2(self, h2: H2Form) -> DensitySpec {
        DensitySpec { h2, ..self }
    }

    /// Smallest dressing order whose logarithms are exact on the Λ-powers the residue reads.
    pub fn dressing_order(&self) -> usize {
        match (self.beta, self.h2) {
            (0, _) => 0,
            (2, H2Form::Shifted) => self.n + 2,
            _ => self.n.max(1) + 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Density {
    pub beta: u8,
    pub n: usize,
    pub value: CoeffFn,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn c(n: usize) -> f64 {
    let r = harmonic(n);
    *r.numer() as f64 / *r.denom() as f64
}

fn residue_of(lax: &MixedOp, log: &MixedOp, n: usize, cn: f64, grid: &Grid) -> Result<CoeffFn> {
    let block = lax.pow(n, grid)?.mul(&log.sub(&MixedOp::scalar(cn)), grid)?;
    Ok(block.residue())
}

/// `h_{β,n}` from a flow context (periodised logarithms).
pub fn density(ctx: &FlowContext, spec: DensitySpec) -> Result<Density> {
    density_with(ctx, spec, false)
}

/// `h_{β,n}` built from the raw logarithms, before their secular round-off is
/// removed; used to measure secular cancellation.
pub fn density_raw(ctx: &FlowContext, spec: DensitySpec) -> Result<Density> {
    density_with(ctx, spec, true)
}

fn density_with(ctx: &FlowContext, spec: DensitySpec, raw: bool) -> Result<Density> {
    let DensitySpec { beta, n, h2 } = spec;
    let lax = ctx.lax();
    let value = match beta {
        0 => lax.pow(n + 1, ctx.grid())?.residue().scale(1.0 / factorial(n + 1)),
        1 | 2 => {
            let (log, grid) = if raw {
                let p = ctx.pair()?;
                let l = if beta == 1 { dressing::log_plus_raw(p)? } else { dressing::log_minus_raw(p)? };
                (l, p.work_grid().clone())
            } else {
                let l = if beta == 1 { ctx.log_plus()?.clone() } else { ctx.log_minus()?.clone() };
                (l, ctx.grid().clone())
            };
            match (beta, h2) {
                (2, H2Form::Shifted) => residue_of(lax, &log, n + 1, c(n + 1), &grid)?.scale(-2.0 / factorial(n + 1)),
                _ => residue_of(lax, &log, n, c(n), &grid)?.scale(2.0 / factorial(n)),
            }
        }
        b => return Err(MethError::Config(format!("density family β = {b} not in {{0,1,2}}"))),
    };
    Ok(Density { beta, n, value })
}

/// `∫_0^{2π} h dx`; the secular part of `h`, if any, is integrated too.
pub fn integral(h: &CoeffFn) -> C64 {
    h.mean() * 2.0 * PI
}

/// `H_{β,n}` at a state, dressing solved at the minimal order.
pub fn hamiltonian(state: &LatticeState, spec: DensitySpec, grid: &Grid) -> Result<f64> {
    let ctx = FlowContext::new(state, spec.dressing_order(), grid)?;
    Ok(integral(&density(&ctx, spec)?.value).re)
}

/// `(δH/δu, δH/δv)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarGrad {
    #[serde(rename = "dHdu")]
    pub dhdu: CoeffFn,
    #[serde(rename = "dHdv")]
    pub dhdv: CoeffFn,
}

impl VarGrad {
    pub fn zero() -> VarGrad {
        VarGrad { dhdu: CoeffFn::zero(), dhdv: CoeffFn::zero() }
    }

    pub fn scale(&self, s: f64) -> VarGrad {
        VarGrad { dhdu: self.dhdu.scale(s), dhdv: self.dhdv.scale(s) }
    }

    pub fn add(&self, o: &VarGrad) -> VarGrad {
        VarGrad { dhdu: &self.dhdu + &o.dhdu, dhdv: &self.dhdv + &o.dhdv }
    }
}

/// Mode count of numerically computed gradients.
pub fn gradient_modes(grid: &Grid) -> usize {
    (4 * grid.spec.modes).min(grid.spec.max_modes)
}

fn directional<F: Fn(&LatticeState) -> Result<f64>>(
    functional: &F,
    state: &LatticeState,
    du: &CoeffFn,
    dv: &CoeffFn,
    step: f64,
) -> Result<f64> {
    let d = |h: f64| -> Result<f64> {
        Ok((functional(&state.displaced(du, dv, h))? - functional(&state.displaced(du, dv, -h))?) / (2.0 * h))
    };
    let a = d(step)?;
    let b = d(step / 2.0)?;
    Ok((4.0 * b - a) / 3.0)
}

/// Gradient of an arbitrary real functional of `(u, v)`, to `modes` Fourier modes.
/// With `g = Σ g_j e^{ijx}` real: `∫g = 2πg_0`, `∫g cos jx = 2π Re g_j`, `∫g sin jx = −2π Im g_j`.
pub fn var_deriv_of<F: Fn(&LatticeState) -> Result<f64>>(
    functional: F,
    state: &LatticeState,
    modes: usize,
    step: f64,
) -> Result<VarGrad> {
    let zero = CoeffFn::zero();
    let mut out = [vec![C64::new(0.0, 0.0); 2 * modes + 1], vec![C64::new(0.0, 0.0); 2 * modes + 1]];
    for (field, coeffs) in out.iter_mut().enumerate() {
        let probe = |f: &CoeffFn| -> Result<f64> {
            if field == 0 {
                directional(&functional, state, f, &zero, step)
            } else {
                directional(&functional, state, &zero, f, step)
            }
        };
        coeffs[modes] = C64::new(probe(&CoeffFn::one())? / (2.0 * PI), 0.0);
        for j in 1..=modes as i64 {
            let re = probe(&CoeffFn::cos(j))? / (2.0 * PI);
            let im = -probe(&CoeffFn::sin(j))? / (2.0 * PI);
            coeffs[modes + j as usize] = C64::new(re, im);
            coeffs[modes - j as usize] = C64::new(re, -im);
        }
    }
    let [u, v] = out;
    Ok(VarGrad { dhdu: CoeffFn::from_modes(u), dhdv: CoeffFn::from_modes(v) })
}

/// Step of the finite-difference gradients.
pub const GRADIENT_STEP: f64 = 1e-3;

/// `(δH_{β,n}/δu, δH_{β,n}/δv)`.
pub fn var_deriv(state: &LatticeState, spec: DensitySpec, grid: &Grid) -> Result<VarGrad> {
    let g = grid.detached();
    var_deriv_of(|s| hamiltonian(s, spec, &g), state, gradient_modes(grid), GRADIENT_STEP)
}

/// First bracket: `u_t = (1/ε)(Λ−1)δH/δv`, `v_t = (1/ε)(1−Λ^{-1})δH/δu`.
pub fn pb1_flow(g: &VarGrad, eps: f64) -> (CoeffFn, CoeffFn) {
    let du = (&g.dhdv.shift(1, eps) - &g.dhdv).scale(1.0 / eps);
    let dv = (&g.dhdu - &g.dhdu.shift(-1, eps)).scale(1.0 / eps);
    (du, dv)
}

/// Second bracket, with kernels
/// `P_uu = (1/ε)(Λ∘e^v − e^v∘Λ^{-1})`, `P_uv = (1/ε) u∘(Λ−1)`,
/// `P_vu = −P_uv^* = (1/ε)(1−Λ^{-1})∘u`, `P_vv = (1/ε)(Λ − Λ^{-1})`.
pub fn pb2_flow(state: &LatticeState, g: &VarGrad, grid: &Grid) -> Result<(CoeffFn, CoeffFn)> {
    let eps = grid.eps();
    let ev = state.v.exp(grid)?;
    let ev_a = ev.mul(&g.dhdu, grid)?;
    let puu = &ev_a.shift(1, eps) - &ev.mul(&g.dhdu.shift(-1, eps), grid)?;
    let puv = state.u.mul(&(&g.dhdv.shift(1, eps) - &g.dhdv), grid)?;
    let ua = state.u.mul(&g.dhdu, grid)?;
    let pvu = &ua - &ua.shift(-1, eps);
    let pvv = &g.dhdv.shift(1, eps) - &g.dhdv.shift(-1, eps);
    Ok(((&puu + &puv).scale(1.0 / eps), (&pvu + &pvv).scale(1.0 / eps)))
}

/// `⟨(a, b), (c, d)⟩ = ∫ (a c + b d) dx`.
pub fn pairing(a: &(CoeffFn, CoeffFn), b: &(CoeffFn, CoeffFn), grid: &Grid) -> Result<f64> {
    Ok((integral(&a.0.mul(&b.0, grid)?) + integral(&a.1.mul(&b.1, grid)?)).re)
}

fn flow_norm(a: &(CoeffFn, CoeffFn), grid: &Grid) -> f64 {
    a.0.sup_norm(grid).max(a.1.sup_norm(grid))
}

fn flow_diff(a: &(CoeffFn, CoeffFn), b: &(CoeffFn, CoeffFn)) -> (CoeffFn, CoeffFn) {
    (&a.0 - &b.0, &a.1 - &b.1)
}

fn flow_scale(a: &(CoeffFn, CoeffFn), s: f64) -> (CoeffFn, CoeffFn) {
    (a.0.scale(s), a.1.scale(s))
}

type Flow = (CoeffFn, CoeffFn);

/// Field velocities of `t_f` read off the Lax equation (anomaly not enforced).
pub fn lax_velocities(state: &LatticeState, f: FlowSpec, order: usize, grid: &Grid) -> Result<Flow> {
    let ctx = FlowContext::new(state, order, grid)?;
    let r = hierarchy::lax_rhs_unchecked(&ctx, f)?;
    Ok((r.du, r.dv))
}

/// A functional built from the densities: a single `H_{β,n}`, or the symmetric
/// logarithmic pair `K_n = H_{1,n} + H_{2,n}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Functional {
    Single(DensitySpec),
    LogPair(usize),
}

impl Functional {
    fn parts(&self) -> Vec<DensitySpec> {
        match *self {
            Functional::Single(d) => vec![d],
            Functional::LogPair(n) => vec![DensitySpec::new(1, n), DensitySpec::new(2, n)],
        }
    }

    pub fn density(&self, state: &LatticeState, grid: &Grid) -> Result<CoeffFn> {
        let mut acc = CoeffFn::zero();
        for d in self.parts() {
            acc += &density(&FlowContext::new(state, d.dressing_order(), grid)?, d)?.value;
        }
        Ok(acc)
    }

    pub fn value(&self, state: &LatticeState, grid: &Grid) -> Result<f64> {
        self.parts().iter().try_fold(0.0, |acc, &d| Ok(acc + hamiltonian(state, d, grid)?))
    }

    pub fn var_deriv(&self, state: &LatticeState, grid: &Grid) -> Result<VarGrad> {
        self.parts().iter().try_fold(VarGrad::zero(), |acc, &d| Ok(acc.add(&var_deriv(state, d, grid)?)))
    }
}

impl std::fmt::Display for Functional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Functional::Single(d) if d.beta == 2 && d.h2 == H2Form::Shifted => write!(f, "H_{{2,{}}}'", d.n),
            Functional::Single(d) => write!(f, "H_{{{},{}}}", d.beta, d.n),
            Functional::LogPair(n) => write!(f, "H_{{1,{n}}}+H_{{2,{n}}}"),
        }
    }
}

/// A vector field on `(u, v)`: one of the basic flows, or the combined
/// logarithmic flow `T_n = t_{1,n} − t_{2,n−1}` (`T_0 = t_{1,0}`), which is
/// free of the reduction anomaly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Generator {
    Flow(FlowSpec),
    LogPair(usize),
}

impl From<FlowSpec> for Generator {
    fn from(f: FlowSpec) -> Self {
        Generator::Flow(f)
    }
}

impl std::fmt::Display for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Generator::Flow(s) => write!(f, "t_{{{s}}}"),
            Generator::LogPair(n) => write!(f, "T_{n}"),
        }
    }
}

impl Generator {
    /// Density paired with the generator in tau symmetry.
    pub fn tau_density(&self, indexing: Indexing, h2: H2Form) -> Functional {
        let off = if indexing == Indexing::Calibrated { 1 } else { 0 };
        match *self {
            Generator::Flow(f) => Functional::Single(DensitySpec { beta: f.alpha, n: f.n + off, h2 }),
            Generator::LogPair(n) => Functional::LogPair(n + off),
        }
    }

    /// Calibrated Hamiltonian: `t_{β,n}` ↔ `ε·H_{β,n+1}`, `T_n` ↔ `ε·K_{n+1}`.
    pub fn hamiltonian(&self, h2: H2Form) -> (Functional, Scale) {
        (self.tau_density(Indexing::Calibrated, h2), Scale::Eps)
    }

    pub fn velocities(&self, state: &LatticeState, order: usize, grid: &Grid) -> Result<Flow> {
        match *self {
            Generator::Flow(f) => lax_velocities(state, f, order, grid),
            Generator::LogPair(n) => {
                let a = lax_velocities(state, FlowSpec { alpha: 1, n }, order, grid)?;
                if n == 0 {
                    return Ok(a);
                }
                let b = lax_velocities(state, FlowSpec { alpha: 2, n: n - 1 }, order, grid)?;
                Ok(flow_diff(&a, &b))
            }
        }
    }
}

/// Which density index a flow is paired with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Indexing {
    /// Flow `(β,n)` ↔ density `h_{β,n}`.
    AsPrinted,
    /// Flow `(β,n)` ↔ density `h_{β,n+1}`, the pairing selected by the Hamiltonian calibration.
    Calibrated,
}

/// Scale factor tried by the calibration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    One,
    InvEps,
    Eps,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::One, Scale::InvEps, Scale::Eps];

    pub fn value(self, eps: f64) -> f64 {
        match self {
            Scale::One => 1.0,
            Scale::InvEps => 1.0 / eps,
            Scale::Eps => eps,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Candidate {
    pub functional: Functional,
    pub scale: Scale,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Calibration {
    pub flow: FlowSpec,
    pub candidates: Vec<Candidate>,
    /// Index of the unique candidate below tolerance, if there is exactly one.
    pub selected: Option<usize>,
}

impl Calibration {
    pub fn selected(&self) -> Option<&Candidate> {
        self.selected.map(|i| &self.candidates[i])
    }

    pub fn best(&self) -> &Candidate {
        self.candidates.iter().min_by(|a, b| a.residual.total_cmp(&b.residual)).expect("candidates are never empty")
    }
}

/// Matches the Lax flow `t_f` against `s·{·, H}_1` for `H ∈ {H_{β,n}, H_{β,n+1}}`
/// and `s ∈ {1, 1/ε, ε}`. With `extended`, logarithmic flows also try the
/// symmetric pair `H_{1,n+1} + H_{2,n+1}`.
pub fn calibrate(
    state: &LatticeState,
    f: FlowSpec,
    h2: H2Form,
    extended: bool,
    tol: f64,
    order: usize,
    grid: &Grid,
) -> Result<Calibration> {
    let eps = grid.eps();
    let lax = lax_velocities(state, f, order, grid)?;
    let mut functionals: Vec<Functional> =
        [f.n, f.n + 1].iter().map(|&n| Functional::Single(DensitySpec { beta: f.alpha, n, h2 })).collect();
    if extended && f.alpha > 0 {
        functionals.push(Functional::LogPair(f.n + 1));
    }
    let mut candidates = Vec::new();
    for functional in functionals {
        let pb = pb1_flow(&functional.var_deriv(state, grid)?, eps);
        for scale in Scale::ALL {
            let r = flow_norm(&flow_diff(&lax, &flow_scale(&pb, scale.value(eps))), grid);
            candidates.push(Candidate { functional, scale, residual: r });
        }
    }
    let below: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].residual <= tol).collect();
    let selected = if below.len() == 1 { Some(below[0]) } else { None };
    Ok(Calibration { flow: f, candidates, selected })
}

/// `‖velocities − s·{·, H}_1‖` with `(H, s)` the calibrated Hamiltonian of `gen`.
pub fn hamiltonian_match_residual(state: &LatticeState, gen: Generator, h2: H2Form, order: usize, grid: &Grid) -> Result<f64> {
    let (functional, scale) = gen.hamiltonian(h2);
    let vel = gen.velocities(state, order, grid)?;
    let pb = flow_scale(&pb1_flow(&functional.var_deriv(state, grid)?, grid.eps()), scale.value(grid.eps()));
    Ok(flow_norm(&flow_diff(&vel, &pb), grid))
}

/// Memoised first- and second-bracket flows of functionals at one state.
struct Brackets<'a> {
    state: &'a LatticeState,
    grid: &'a Grid,
    grads: std::collections::HashMap<Functional, VarGrad>,
}

impl<'a> Brackets<'a> {
    fn new(state: &'a LatticeState, grid: &'a Grid) -> Self {
        Brackets { state, grid, grads: Default::default() }
    }

    fn grad(&mut self, h: Functional) -> Result<&VarGrad> {
        if !self.grads.contains_key(&h) {
            let g = h.var_deriv(self.state, self.grid)?;
            self.grads.insert(h, g);
        }
        Ok(&self.grads[&h])
    }

    fn pb1(&mut self, h: Functional) -> Result<Flow> {
        let eps = self.grid.eps();
        Ok(pb1_flow(self.grad(h)?, eps))
    }

    fn pb2(&mut self, h: Functional) -> Result<Flow> {
        let (state, grid) = (self.state, self.grid);
        pb2_flow(state, self.grad(h)?, grid)
    }

    /// `‖s_0{·,h_0}_2 − Σ c_i{·,h_i}_1‖`.
    fn relation(&mut self, lhs: (f64, Functional), rhs: &[(f64, Functional)]) -> Result<f64> {
        let mut d = flow_scale(&self.pb2(lhs.1)?, lhs.0);
        for &(c, h) in rhs {
            d = flow_diff(&d, &flow_scale(&self.pb1(h)?, c));
        }
        Ok(flow_norm(&d, self.grid))
    }
}

/// One reading of a recursion relation and its residual.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Reading {
    pub name: String,
    pub residual: f64,
}

/// Readings of one bi-Hamiltonian recursion relation, plus least-squares
/// coefficients of its right-hand terms (calibrated indexing).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecursionReport {
    pub branch: u8,
    pub n: usize,
    pub readings: Vec<Reading>,
    pub fitted: Vec<(String, f64)>,
    pub fitted_residual: f64,
}

impl RecursionReport {
    pub fn reading(&self, name: &str) -> Option<f64> {
        self.readings.iter().find(|r| r.name == name).map(|r| r.residual)
    }
}

/// Least squares `lhs ≈ Σ c_i terms_i` in the `L²` pairing.
fn fit(lhs: &Flow, terms: &[Flow], grid: &Grid) -> Result<(Vec<f64>, f64)> {
    let m = terms.len();
    let mut a = vec![vec![0.0; m + 1]; m];
    for i in 0..m {
        for j in 0..m {
            a[i][j] = pairing(&terms[i], &terms[j], grid)?;
        }
        a[i][m] = pairing(&terms[i], lhs, grid)?;
    }
    for i in 0..m {
        let p = (i..m).max_by(|&x, &y| a[x][i].abs().total_cmp(&a[y][i].abs())).unwrap_or(i);
        a.swap(i, p);
        if a[i][i].abs() < 1e-300 {
            return Err(MethError::Config("degenerate recursion fit".into()));
        }
        for r in 0..m {
            if r != i {
                let f = a[r][i] / a[i][i];
                for c in i..=m {
                    a[r][c] -= f * a[i][c];
                }
            }
        }
    }
    let coeffs: Vec<f64> = (0..m).map(|i| a[i][m] / a[i][i]).collect();
    let mut r = lhs.clone();
    for (t, &c) in terms.iter().zip(&coeffs) {
        r = flow_diff(&r, &flow_scale(t, c));
    }
    Ok((coeffs, flow_norm(&r, grid)))
}

/// Printed relations (`n ≥ 1`):
/// branch 0: `{·,H_{0,n−1}}_2 = (n+1){·,H_{0,n}}_1`;
/// branch 1: `{·,H_{1,n−1}}_2 = n{·,H_{1,n}}_1 + 2{·,H_{0,n−1}}_1`;
/// branch 2: `{·,H_{2,n−1}}_2 = n{·,H_{2,n}}_1 + 2{·,H_{2,n−1}}_1`.
/// Under [`Indexing::Calibrated`] every `H_{β,k}` is read as `H_{β,k+1}`.
fn printed_relation(branch: u8, n: usize, off: usize, h2: H2Form) -> ((f64, Functional), Vec<(f64, Functional)>) {
    let h = |beta: u8, k: usize| Functional::Single(DensitySpec { beta, n: k + off, h2 });
    let nf = n as f64;
    match branch {
        0 => ((1.0, h(0, n - 1)), vec![(nf + 1.0, h(0, n))]),
        1 => ((1.0, h(1, n - 1)), vec![(nf, h(1, n)), (2.0, h(0, n - 1))]),
        _ => ((1.0, h(2, n - 1)), vec![(nf, h(2, n)), (2.0, h(2, n - 1))]),
    }
}

fn check_branch(branch: u8, n: usize) -> Result<()> {
    if n == 0 || branch > 2 {
        return Err(MethError::Config(format!("recursion branch {branch} needs n ≥ 1 and branch ≤ 2 (got {n})")));
    }
    Ok(())
}

/// Residual of the printed relation under the given indexing.
pub fn recursion_residual(state: &LatticeState, branch: u8, n: usize, indexing: Indexing, h2: H2Form, grid: &Grid) -> Result<f64> {
    check_branch(branch, n)?;
    let off = if indexing == Indexing::Calibrated { 1 } else { 0 };
    let (lhs, rhs) = printed_relation(branch, n, off, h2);
    Brackets::new(state, grid).relation(lhs, &rhs)
}

/// All readings of one relation: as printed and calibrated indexing; for branch 0
/// the factor `n`; for branch 2 `H_{0,n−1}` in the last term; for branches 1 and 2
/// the symmetric logarithmic pair `½(H_{1,k}+H_{2,k})` in place of the single family.
pub fn recursion_report(state: &LatticeState, branch: u8, n: usize, h2: H2Form, grid: &Grid) -> Result<RecursionReport> {
    check_branch(branch, n)?;
    let mut br = Brackets::new(state, grid);
    let mut readings = Vec::new();
    let mut push = |name: &str, r: f64| readings.push(Reading { name: name.to_string(), residual: r });
    for (name, off) in [("as printed", 0), ("calibrated indexing", 1)] {
        let (lhs, rhs) = printed_relation(branch, n, off, h2);
        push(name, br.relation(lhs, &rhs)?);
    }
    let nf = n as f64;
    let h = |beta: u8, k: usize| Functional::Single(DensitySpec { beta, n: k, h2 });
    match branch {
        0 => push("as printed, factor n", br.relation((1.0, h(0, n - 1)), &[(nf, h(0, n))])?),
        _ => {
            if branch == 2 {
                push("as printed, H_{0,n-1} in last term", br.relation((1.0, h(2, n - 1)), &[(nf, h(2, n)), (2.0, h(0, n - 1))])?);
                push("calibrated, H_{0,n} in last term", br.relation((1.0, h(2, n)), &[(nf, h(2, n + 1)), (2.0, h(0, n))])?);
            }
            let k = |m: usize| Functional::LogPair(m);
            push(
                "calibrated, symmetric log pair",
                br.relation((0.5, k(n)), &[(0.5 * nf, k(n + 1)), (2.0, h(0, n))])?,
            );
        }
    }
    // Fit in calibrated indexing against the printed right-hand terms.
    let (lhs, rhs) = printed_relation(branch, n, 1, h2);
    let target = flow_scale(&br.pb2(lhs.1)?, lhs.0);
    let mut names = Vec::new();
    let mut terms = Vec::new();
    for &(_, f) in &rhs {
        let t = br.pb1(f)?;
        if flow_norm(&t, grid) > 1e-9 && !names.contains(&f.to_string()) {
            names.push(f.to_string());
            terms.push(t);
        }
    }
    let (coeffs, fitted_residual) = if terms.is_empty() { (vec![], flow_norm(&target, grid)) } else { fit(&target, &terms, grid)? };
    Ok(RecursionReport { branch, n, readings, fitted: names.into_iter().zip(coeffs).collect(), fitted_residual })
}

/// Step of the chain-rule differences of densities.
pub const RATE_STEP: f64 = 1e-3;

/// `∂h/∂t` by the chain rule: Richardson-extrapolated central difference of the
/// density along the generator's velocity field (no time stepping).
pub fn density_rate(state: &LatticeState, h: Functional, along: Generator, order: usize, grid: &Grid) -> Result<CoeffFn> {
    let (du, dv) = along.velocities(state, order, grid)?;
    let g = grid.detached();
    let d = |s: f64| -> Result<CoeffFn> {
        let plus = h.density(&state.displaced(&du, &dv, s), &g)?;
        let minus = h.density(&state.displaced(&du, &dv, -s), &g)?;
        Ok((&plus - &minus).scale(0.5 / s))
    };
    let a = d(RATE_STEP)?;
    let b = d(RATE_STEP / 2.0)?;
    Ok((&b.scale(4.0) - &a).scale(1.0 / 3.0))
}

/// `∂h_a/∂t_b − ∂h_b/∂t_a`, densities paired per `indexing`.
pub fn tau_symmetry_defect(
    state: &LatticeState,
    a: Generator,
    b: Generator,
    indexing: Indexing,
    h2: H2Form,
    order: usize,
    grid: &Grid,
) -> Result<CoeffFn> {
    if a == b {
        return Ok(CoeffFn::zero());
    }
    let ha = a.tau_density(indexing, h2);
    let hb = b.tau_density(indexing, h2);
    Ok(&density_rate(state, ha, b, order, grid)? - &density_rate(state, hb, a, order, grid)?)
}

pub fn tau_symmetry_residual(
    state: &LatticeState,
    a: Generator,
    b: Generator,
    indexing: Indexing,
    h2: H2Form,
    order: usize,
    grid: &Grid,
) -> Result<f64> {
    Ok(tau_symmetry_defect(state, a, b, indexing, h2, order, grid)?.sup_norm(grid))
}

/// `(Λ−1)^{-1}` on zero-mean periodic data.
fn inverse_forward_difference(f: &CoeffFn, eps: f64) -> Result<CoeffFn> {
    let centred = f - &CoeffFn::constant(f.coeff(0, 0));
    Ok(centred.invert_one_minus_shift(eps)?.scale(-1.0))
}

/// Closedness of the one-form `Σ (Λ−1)^{-1}h dt`, the condition for `log τ` to exist:
/// `∂_b (Λ−1)^{-1}h_a − ∂_a (Λ−1)^{-1}h_b`. The mean of the defect, which
/// `(Λ−1)^{-1}` cannot absorb, is included.
pub fn closedness_residual(
    state: &LatticeState,
    a: Generator,
    b: Generator,
    indexing: Indexing,
    h2: H2Form,
    order: usize,
    grid: &Grid,
) -> Result<f64> {
    let d = tau_symmetry_defect(state, a, b, indexing, h2, order, grid)?;
    Ok(inverse_forward_difference(&d, grid.eps())?.sup_norm(grid).max(d.coeff(0, 0).norm()))
}

/// Tau-function checks on a trajectory of the `t_{0,0}` flow.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TauRelations {
    /// Closedness for `(t_{0,0}, t_{0,1})` at the first, middle and last states.
    pub closedness: f64,
    /// `u` relation as printed: `F = log(τ(x+ε)/τ(x))` with `ε∂_tF = v` and `u = (1−Λ^{-1})F`.
    pub u_relation_printed: f64,
    /// Roles of `u` and `v` exchanged: `∂_tF = u` and `v = (1−Λ^{-1})F`.
    pub u_relation_swapped: f64,
}

/// `∫_0^T g dt` on uniform steps: trapezoid rule with the Euler–Maclaurin end
/// correction `−dt²/12 (ġ(T) − ġ(0))`.
fn time_integral(samples: &[CoeffFn], rate0: &CoeffFn, rate1: &CoeffFn, dt: f64) -> CoeffFn {
    let n = samples.len();
    let mut acc = (&samples[0] + &samples[n - 1]).scale(0.5);
    for s in &samples[1..n - 1] {
        acc += s;
    }
    &acc.scale(dt) - &(rate1 - rate0).scale(dt * dt / 12.0)
}

pub fn tau_relations_residual(traj: &Trajectory, order: usize, grid: &Grid) -> Result<TauRelations> {
    let t00 = FlowSpec { alpha: 0, n: 0 };
    let t01 = FlowSpec { alpha: 0, n: 1 };
    if traj.flow != t00 || traj.states.len() < 2 {
        return Err(MethError::Config("tau relations need a t_{0,0} trajectory of at least two states".into()));
    }
    let eps = grid.eps();
    let states = &traj.states;
    let last = states.len() - 1;
    let mut closed: f64 = 0.0;
    for i in [0, last / 2, last] {
        let r = closedness_residual(&states[i], t00.into(), t01.into(), Indexing::AsPrinted, H2Form::AsPrinted, order, grid)?;
        closed = closed.max(r);
    }
    let back = |f: &CoeffFn| f - &f.shift(-1, eps);
    let r0 = lax_velocities(&states[0], t00, order, grid)?;
    let r1 = lax_velocities(&states[last], t00, order, grid)?;

    let vs: Vec<CoeffFn> = states.iter().map(|s| s.v.clone()).collect();
    let int_v = time_integral(&vs, &r0.1, &r1.1, traj.dt).scale(1.0 / eps);
    let printed = (&(&states[last].u - &states[0].u) - &back(&int_v)).sup_norm(grid);

    let us: Vec<CoeffFn> = states.iter().map(|s| s.u.clone()).collect();
    let int_u = time_integral(&us, &r0.0, &r1.0, traj.dt);
    let swapped = (&(&states[last].v - &states[0].v) - &back(&int_u)).sup_norm(grid);
    Ok(TauRelations { closedness: closed, u_relation_printed: printed, u_relation_swapped: swapped })
}

/// Largest relative drift `|H(t) − H(0)| / max(|H(0)|, 1)` of `H` along a trajectory.
pub fn conservation_drift(traj: &Trajectory, h: Functional, grid: &Grid) -> Result<f64> {
    let h0 = h.value(&traj.states[0], grid)?;
    let mut worst: f64 = 0.0;
    for s in &traj.states[1..] {
        worst = worst.max((h.value(s, grid)? - h0).abs() / h0.abs().max(1.0));
    }
    Ok(worst)
}

/// Coefficient norm of the x-polynomial part of `h_spec` computed from the raw
/// (unperiodised) logarithms of `ctx`.
pub fn secular_content(ctx: &FlowContext, spec: DensitySpec) -> Result<f64> {
    Ok(density_raw(ctx, spec)?.value.secular_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::GridSpec;
    use rand::SeedableRng;

    fn spec() -> GridSpec {
        GridSpec { modes: 4, max_modes: 32, ..GridSpec::default() }
    }

    fn grid() -> Grid {
        Grid::new(spec()).unwrap()
    }

    fn state(seed: u64) -> LatticeState {
        LatticeState::random(spec(), 0.2, seed)
    }

    fn random_flow(seed: u64) -> Flow {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (CoeffFn::random_real(6, 1.0, &mut rng), CoeffFn::random_real(6, 1.0, &mut rng))
    }

    fn grad(f: &Flow) -> VarGrad {
        VarGrad { dhdu: f.0.clone(), dhdv: f.1.clone() }
    }

    const T00: FlowSpec = FlowSpec { alpha: 0, n: 0 };
    const T01: FlowSpec = FlowSpec { alpha: 0, n: 1 };

    #[test]
    fn low_densities_have_closed_forms() {
        let (g, st) = (grid(), state(1));
        let eps = g.eps();
        let ctx = FlowContext::new(&st, 3, &g).unwrap();
        let h00 = density(&ctx, DensitySpec::new(0, 0)).unwrap().value;
        assert!((&h00 - &st.u).sup_norm(&g) < 1e-14);
        let ev = st.v.exp(&g).unwrap();
        let want = (&(&st.u.mul(&st.u, &g).unwrap() + &ev.shift(1, eps)) + &ev).scale(0.5);
        let h01 = density(&ctx, DensitySpec::new(0, 1)).unwrap().value;
        assert!((&h01 - &want).sup_norm(&g) < 1e-13);
        let h10 = density(&ctx, DensitySpec::new(1, 0)).unwrap().value;
        assert!(h10.sup_norm(&g) < 1e-13);
    }

    #[test]
    fn shifted_h2_is_next_printed_density() {
        let (g, st) = (grid(), state(2));
        let a = hamiltonian(&st, DensitySpec::new(2, 1).with_h2(H2Form::Shifted), &g).unwrap();
        let b = hamiltonian(&st, DensitySpec::new(2, 2), &g).unwrap();
        assert!((a + b).abs() < 1e-12, "{a} {b}");
    }

    #[test]
    fn variational_derivative_examples() {
        let (g, st) = (grid(), state(3));
        let eps = g.eps();
        let m = gradient_modes(&g);
        let gd = var_deriv_of(|s| Ok(integral(&s.u.mul(&s.u, &g)?).re * 0.5), &st, m, GRADIENT_STEP).unwrap();
        assert!((&gd.dhdu - &st.u).sup_norm(&g) < 1e-10 && gd.dhdv.sup_norm(&g) < 1e-10);
        let gd = var_deriv_of(|s| Ok(integral(&s.v.exp(&g)?.shift(1, eps)).re), &st, m, GRADIENT_STEP).unwrap();
        assert!((&gd.dhdv - &st.v.exp(&g).unwrap()).sup_norm(&g) < 1e-9);
        let gd = var_deriv_of(|s| Ok(integral(&s.u.mul(&s.u.shift(1, eps), &g)?).re), &st, m, GRADIENT_STEP).unwrap();
        let want = &st.u.shift(1, eps) + &st.u.shift(-1, eps);
        assert!((&gd.dhdu - &want).sup_norm(&g) < 1e-10);
    }

    #[test]
    fn brackets_vanish_on_zero_gradient_and_are_skew() {
        let (g, st) = (grid(), state(4));
        let eps = g.eps();
        let z = VarGrad::zero();
        assert!(flow_norm(&pb1_flow(&z, eps), &g) == 0.0);
        assert!(flow_norm(&pb2_flow(&st, &z, &g).unwrap(), &g) == 0.0);
        for seed in 0..5 {
            let (a, b) = (random_flow(2 * seed), random_flow(2 * seed + 1));
            let s1 = pairing(&a, &pb1_flow(&grad(&b), eps), &g).unwrap() + pairing(&b, &pb1_flow(&grad(&a), eps), &g).unwrap();
            let s2 = pairing(&a, &pb2_flow(&st, &grad(&b), &g).unwrap(), &g).unwrap()
                + pairing(&b, &pb2_flow(&st, &grad(&a), &g).unwrap(), &g).unwrap();
            assert!(s1.abs() < 1e-10 && s2.abs() < 1e-10, "{s1} {s2}");
        }
    }

    #[test]
    fn first_bracket_of_toda_hamiltonian_is_toda() {
        let (g, st) = (grid(), state(5));
        let eps = g.eps();
        let ev = st.v.exp(&g).unwrap();
        let pb = pb1_flow(&VarGrad { dhdu: st.u.clone(), dhdv: ev.clone() }, eps);
        let du = (&ev.shift(1, eps) - &ev).scale(1.0 / eps);
        let dv = (&st.u - &st.u.shift(-1, eps)).scale(1.0 / eps);
        assert!(flow_norm(&flow_diff(&pb, &(du, dv)), &g) < 1e-12);
    }

    /// Gradient of `⟨a, P_2(q) b⟩` with respect to `q = (u, v)`.
    fn pb2_pairing_gradient(st: &LatticeState, a: &Flow, b: &Flow, g: &Grid) -> Flow {
        let eps = g.eps();
        let m = |x: &CoeffFn, y: &CoeffFn| x.mul(y, g).unwrap();
        let du = (&m(&a.0, &(&b.1.shift(1, eps) - &b.1)) + &m(&b.0, &(&a.1 - &a.1.shift(1, eps)))).scale(1.0 / eps);
        let inner = &m(&a.0.shift(-1, eps), &b.0) - &m(&a.0, &b.0.shift(-1, eps));
        let dv = m(&st.v.exp(g).unwrap(), &inner).scale(1.0 / eps);
        (du, dv)
    }

    #[test]
    fn second_bracket_pairing_gradient_matches_finite_differences() {
        let (g, st) = (grid(), state(6));
        let (a, b) = (random_flow(10), random_flow(11));
        let f = |s: &LatticeState| pairing(&a, &pb2_flow(s, &grad(&b), &g)?, &g);
        let fd = var_deriv_of(f, &st, 24, GRADIENT_STEP).unwrap();
        let exact = pb2_pairing_gradient(&st, &a, &b, &g);
        assert!(flow_norm(&flow_diff(&(fd.dhdu, fd.dhdv), &exact), &g) < 1e-8);
    }

    #[test]
    fn jacobi_identity() {
        let (g, st) = (grid(), state(7));
        for seed in 0..3 {
            let fs = [random_flow(20 + 3 * seed), random_flow(21 + 3 * seed), random_flow(22 + 3 * seed)];
            let mut jac = 0.0;
            let mut scale: f64 = 0.0;
            for i in 0..3 {
                let (a, b, c) = (&fs[i], &fs[(i + 1) % 3], &fs[(i + 2) % 3]);
                let term = pairing(&pb2_pairing_gradient(&st, a, b, &g), &pb2_flow(&st, &grad(c), &g).unwrap(), &g).unwrap();
                jac += term;
                scale = scale.max(term.abs());
            }
            assert!(jac.abs() < 1e-7 * scale.max(1.0), "{jac} {scale}");
        }
        // The first bracket has constant coefficients: the pairing gradient is zero.
    }

    #[test]
    fn leibniz_rule_for_both_brackets() {
        let (g, st) = (grid(), state(8));
        let eps = g.eps();
        let m = gradient_modes(&g);
        let fg = |s: &LatticeState| Ok(integral(&s.u.mul(&s.u, &g)?).re * 0.5);
        let gg = |s: &LatticeState| Ok(integral(&s.v.exp(&g)?).re);
        let hg = |s: &LatticeState| Ok(integral(&s.u.mul(&s.v.shift(1, eps), &g)?).re);
        let df = var_deriv_of(fg, &st, m, GRADIENT_STEP).unwrap();
        let dg = var_deriv_of(gg, &st, m, GRADIENT_STEP).unwrap();
        let dh = var_deriv_of(hg, &st, m, GRADIENT_STEP).unwrap();
        let dgh = var_deriv_of(|s| Ok(gg(s)? * hg(s)?), &st, m, GRADIENT_STEP).unwrap();
        let (gv, hv) = (gg(&st).unwrap(), hg(&st).unwrap());
        let f = (df.dhdu, df.dhdv);
        for p in [0, 1] {
            let br = |x: &VarGrad| if p == 0 { pb1_flow(x, eps) } else { pb2_flow(&st, x, &g).unwrap() };
            let lhs = pairing(&f, &br(&dgh), &g).unwrap();
            let rhs = hv * pairing(&f, &br(&dg), &g).unwrap() + gv * pairing(&f, &br(&dh), &g).unwrap();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{p}: {lhs} {rhs}");
        }
    }

    #[test]
    fn toda_flows_calibrate_uniquely() {
        let (g, st) = (grid(), state(9));
        for f in [T00, T01] {
            let c = calibrate(&st, f, H2Form::AsPrinted, false, 1e-7, 6, &g).unwrap();
            let sel = c.selected().expect("unique match");
            assert_eq!(sel.functional, Functional::Single(DensitySpec::new(0, f.n + 1)));
            assert_eq!(sel.scale, Scale::Eps);
            assert!(hamiltonian_match_residual(&st, f.into(), H2Form::AsPrinted, 6, &g).unwrap() < 1e-8);
        }
    }

    #[test]
    fn combined_log_flows_are_hamiltonian() {
        let (g, st) = (grid(), state(10));
        for n in 0..2 {
            let r = hamiltonian_match_residual(&st, Generator::LogPair(n), H2Form::AsPrinted, 8, &g).unwrap();
            assert!(r < 1e-8, "T_{n}: {r}");
        }
    }

    #[test]
    fn recursion_holds_in_calibrated_indexing() {
        let (g, st) = (grid(), state(11));
        let r = recursion_report(&st, 0, 1, H2Form::AsPrinted, &g).unwrap();
        assert!(r.reading("calibrated indexing").unwrap() < 1e-7, "{r:?}");
        assert!(r.reading("as printed").unwrap() > 1e-2);
        assert!((r.fitted[0].1 - 2.0).abs() < 1e-8);
        let r = recursion_report(&st, 1, 1, H2Form::AsPrinted, &g).unwrap();
        assert!(r.reading("calibrated, symmetric log pair").unwrap() < 1e-7);
        assert!(recursion_residual(&st, 0, 0, Indexing::AsPrinted, H2Form::AsPrinted, &g).is_err());
    }

    #[test]
    fn tau_symmetry_for_toda_and_combined_flows() {
        let (g, st) = (grid(), state(12));
        let ix = Indexing::AsPrinted;
        let h2 = H2Form::AsPrinted;
        assert!(tau_symmetry_residual(&st, T00.into(), T01.into(), ix, h2, 6, &g).unwrap() < 1e-8);
        assert_eq!(tau_symmetry_residual(&st, T01.into(), T01.into(), ix, h2, 6, &g).unwrap(), 0.0);
        let r = tau_symmetry_residual(&st, T00.into(), Generator::LogPair(0), ix, h2, 6, &g).unwrap();
        assert!(r < 1e-8, "{r}");
    }

    #[test]
    fn tau_function_reconstruction_on_toda_trajectory() {
        let (g, st) = (grid(), state(13));
        let traj = hierarchy::evolve(&st, T00, 0.01, 20, 4, &g).unwrap();
        let r = tau_relations_residual(&traj, 4, &g).unwrap();
        assert!(r.closedness < 1e-8 && r.u_relation_swapped < 1e-8, "{r:?}");
        assert!(r.u_relation_printed > 1e-3);
    }

    #[test]
    fn constant_state_has_trivial_tau_relations() {
        let g = grid();
        let st = LatticeState::new(CoeffFn::zero(), CoeffFn::zero(), spec()).unwrap();
        let traj = hierarchy::evolve(&st, T00, 0.01, 4, 4, &g).unwrap();
        let r = tau_relations_residual(&traj, 4, &g).unwrap();
        assert!(r.u_relation_swapped < 1e-14 && r.u_relation_printed < 1e-14);
    }

    #[test]
    fn toda_charges_and_log_pairs_are_conserved() {
        let (g, st) = (grid(), state(14));
        let traj = hierarchy::evolve(&st, T00, 0.01, 20, 4, &g).unwrap();
        for h in [Functional::Single(DensitySpec::new(0, 1)), Functional::Single(DensitySpec::new(2, 1)), Functional::LogPair(2)] {
            assert!(conservation_drift(&traj, h, &g).unwrap() < 1e-10, "{h}");
        }
    }

    #[test]
    fn densities_carry_no_secular_part() {
        let (g, st) = (grid(), state(15));
        let ctx = FlowContext::new(&st, 6, &g).unwrap();
        for beta in 0..3 {
            for n in 0..3 {
                assert!(secular_content(&ctx, DensitySpec::new(beta, n)).unwrap() < 1e-7);
            }
        }
    }
}
