//! Verification suites and their reports.
//!
//! A suite is a list of named checks, each with a measured residual, the
//! tolerance it is held to (none for reported-only quantities), the mass the
//! truncation ledger dropped while it ran, and its wall time. Checks are sorted
//! by name, so two runs with the same configuration serialize identically
//! apart from the timing fields.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::addsym::{self, GammaVariant, OsFlow, OsOperators, OsState};
use crate::dressing;
use crate::error::{MethError, Result};
use crate::fields::{Grid, GridSpec};
use crate::hamiltonian::{self, Functional, Generator, H2Form, Indexing};
use crate::hierarchy::{self, FlowContext, FlowSpec, LatticeState};

/// Run configuration; every key is flat so it maps one-to-one onto a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epsilon: f64,
    pub modes: usize,
    pub max_modes: usize,
    pub max_xdeg: usize,
    pub band_cap: i64,
    pub max_deriv: usize,
    /// Dressing order K.
    pub order: usize,
    pub amplitude: f64,
    pub seed: u64,
    /// Number of random states per suite (seeds `seed, seed+1, …`).
    pub seeds: usize,
    pub mmax: usize,
    pub lmax: usize,
    /// Mode cap and order for the finite-difference checks of additional flows.
    pub fd_max_modes: usize,
    pub fd_order: usize,
    pub fd_step: f64,
    pub gamma: GammaVariant,
    pub h2_form: H2Form,
    /// JSON file holding a `LatticeState` to use instead of random states.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_file: Option<std::path::PathBuf>,
    /// Inline state; takes precedence over `seed` (and is filled from `state_file`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<LatticeState>,
    pub tol_dressing: f64,
    pub tol_anomaly: f64,
    pub tol_projection: f64,
    pub tol_translation: f64,
    pub tol_sato: f64,
    pub tol_hamiltonian: f64,
    pub tol_tau: f64,
    pub tol_tau_relation: f64,
    pub tol_os: f64,
    pub tol_fd: f64,
    pub tol_conservation: f64,
    pub tol_secular: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GridSpec::default();
        RunConfig {
            epsilon: g.epsilon,
            modes: g.modes,
            max_modes: g.max_modes,
            max_xdeg: g.max_xdeg,
            band_cap: g.band_cap,
            max_deriv: g.max_deriv,
            order: 10,
            amplitude: 0.2,
            seed: 1,
            seeds: 2,
            mmax: 3,
            lmax: 3,
            fd_max_modes: 32,
            fd_order: 8,
            fd_step: 1e-2,
            gamma: GammaVariant::default(),
            h2_form: H2Form::AsPrinted,
            state_file: None,
            state: None,
            tol_dressing: 1e-8,
            tol_anomaly: 1e-6,
            tol_projection: 1e-8,
            tol_translation: 1e-9,
            tol_sato: 5e-5,
            tol_hamiltonian: 1e-7,
            tol_tau: 1e-7,
            tol_tau_relation: 1e-5,
            tol_os: 1e-7,
            tol_fd: 1e-4,
            tol_conservation: 1e-7,
            tol_secular: 1e-7,
        }
    }
}

impl RunConfig {
    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            epsilon: self.epsilon,
            modes: self.modes,
            max_modes: self.max_modes,
            max_xdeg: self.max_xdeg,
            band_cap: self.band_cap,
            max_deriv: self.max_deriv,
        }
    }

    pub fn fd_grid_spec(&self) -> GridSpec {
        GridSpec { max_modes: self.fd_max_modes.min(self.max_modes), ..self.grid_spec() }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_spec().validate()?;
        let tols = [
            self.tol_dressing,
            self.tol_anomaly,
            self.tol_projection,
            self.tol_translation,
            self.tol_sato,
            self.tol_hamiltonian,
            self.tol_tau,
            self.tol_tau_relation,
            self.tol_os,
            self.tol_fd,
            self.tol_conservation,
            self.tol_secular,
        ];
        if tols.iter().any(|t| !(*t > 0.0)) {
            return Err(MethError::Config("tolerances must be positive".into()));
        }
        if self.seeds == 0 || !(self.amplitude > 0.0) || !(self.fd_step > 0.0) || self.fd_max_modes == 0 {
            return Err(MethError::Config("seeds, amplitude, fd_step and fd_max_modes must be positive".into()));
        }
        Ok(())
    }

    /// Reads `state_file` into `state`.
    pub fn resolved(&self) -> Result<RunConfig> {
        let mut cfg = self.clone();
        if let Some(path) = cfg.state_file.take() {
            let text = std::fs::read_to_string(&path).map_err(|e| MethError::Config(format!("{}: {e}", path.display())))?;
            let st: LatticeState = serde_json::from_str(&text).map_err(|e| MethError::Config(format!("{}: {e}", path.display())))?;
            cfg.state = Some(st);
        }
        let spec = cfg.grid_spec();
        if let Some(st) = &mut cfg.state {
            *st = LatticeState::new(st.u.clone(), st.v.clone(), spec)?;
        }
        Ok(cfg)
    }

    /// The inline state if there is one, else the random state of `seed`.
    pub fn state(&self, seed: u64) -> LatticeState {
        match &self.state {
            Some(st) => st.clone(),
            None => LatticeState::random(self.grid_spec(), self.amplitude, seed),
        }
    }

    fn seed_list(&self) -> Vec<u64> {
        let n = if self.state.is_some() { 1 } else { self.seeds as u64 };
        (0..n).map(|i| self.seed + i).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    /// Reported only; no tolerance applies.
    Info,
    /// The check could not be evaluated.
    Error,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// The statement being tested.
    pub anchor: String,
    pub residual: Option<f64>,
    pub tolerance: Option<f64>,
    pub ledger_mass: f64,
    pub status: Status,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub pass: usize,
    pub fail: usize,
    pub info: usize,
    pub error: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub suite: String,
    pub config: RunConfig,
    pub checks: Vec<Check>,
    pub summary: Summary,
}

impl Report {
    pub fn new(suite: &str, config: &RunConfig, mut checks: Vec<Check>) -> Report {
        checks.sort_by(|a, b| a.name.cmp(&b.name));
        let mut summary = Summary::default();
        for c in &checks {
            match c.status {
                Status::Pass => summary.pass += 1,
                Status::Fail => summary.fail += 1,
                Status::Info => summary.info += 1,
                Status::Error => summary.error += 1,
            }
        }
        Report { suite: suite.to_string(), config: config.clone(), checks, summary }
    }

    pub fn passed(&self) -> bool {
        self.summary.fail == 0 && self.summary.error == 0
    }

    /// The report with timing fields zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Report {
        let mut r = self.clone();
        for c in &mut r.checks {
            c.wall_time_s = 0.0;
        }
        r
    }

    /// Plain-text table, one row per check.
    pub fn table(&self) -> String {
        let mut out = format!("suite {}: {} pass, {} fail, {} info, {} error\n", self.suite, self.summary.pass, self.summary.fail, self.summary.info, self.summary.error);
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
        out.push_str(&format!("{:<w$}  {:>6}  {:>11}  {:>9}  {:>9}  {:>8}\n", "name", "status", "residual", "tol", "ledger", "time/s"));
        let num = |x: Option<f64>| x.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into());
        for c in &self.checks {
            let status = format!("{:?}", c.status).to_lowercase();
            out.push_str(&format!(
                "{:<w$}  {:>6}  {:>11}  {:>9}  {:>9.1e}  {:>8.2}\n",
                c.name,
                status,
                num(c.residual),
                num(c.tolerance),
                c.ledger_mass,
                c.wall_time_s
            ));
        }
        out
    }
}

/// One measured quantity of a check group.
struct Item {
    suffix: String,
    value: f64,
    tol: Option<f64>,
    note: Option<String>,
}

fn item(suffix: impl Into<String>, value: f64, tol: Option<f64>) -> Item {
    Item { suffix: suffix.into(), value, tol, note: None }
}

/// Runs `f` on a fresh grid and turns its items into checks named `prefix.suffix`.
/// An error becomes a single `Error` check named `prefix`.
fn group(prefix: &str, anchor: &str, spec: GridSpec, f: impl FnOnce(&Grid) -> Result<Vec<Item>>) -> Vec<Check> {
    let start = Instant::now();
    let grid = match Grid::new(spec) {
        Ok(g) => g,
        Err(e) => return vec![error_check(prefix, anchor, &e, 0.0)],
    };
    let out = f(&grid);
    let dt = start.elapsed().as_secs_f64();
    let mass = grid.ledger().total();
    match out {
        Ok(items) => items
            .into_iter()
            .map(|it| {
                let status = match it.tol {
                    None => Status::Info,
                    Some(t) if it.value <= t => Status::Pass,
                    Some(_) => Status::Fail,
                };
                let name = if it.suffix.is_empty() { prefix.to_string() } else { format!("{prefix}.{}", it.suffix) };
                Check {
                    name,
                    anchor: anchor.to_string(),
                    residual: Some(it.value),
                    tolerance: it.tol,
                    ledger_mass: mass,
                    status,
                    wall_time_s: dt,
                    note: it.note,
                }
            })
            .collect(),
        Err(e) => vec![error_check(prefix, anchor, &e, dt)],
    }
}

fn error_check(name: &str, anchor: &str, e: &MethError, dt: f64) -> Check {
    Check {
        name: name.to_string(),
        anchor: anchor.to_string(),
        residual: None,
        tolerance: None,
        ledger_mass: 0.0,
        status: Status::Error,
        wall_time_s: dt,
        note: Some(e.to_string()),
    }
}

/// A refused computation that is expected (outside the verifiable setting):
/// reported as a failed check with the reason attached.
fn refused(name: &str, anchor: &str, e: &MethError) -> Check {
    Check { status: Status::Fail, ..error_check(name, anchor, e, 0.0) }
}

pub const SUITES: [&str; 6] = ["dressing", "hierarchy", "hamiltonian", "addsym", "block-table", "all"];

/// Runs a named suite.
pub fn run_suite(name: &str, cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let cfg = &cfg.resolved()?;
    let checks = match name {
        "dressing" => dressing_suite(cfg),
        "hierarchy" => hierarchy_suite(cfg),
        "hamiltonian" => hamiltonian_suite(cfg),
        "addsym" => addsym_suite(cfg),
        "block-table" => {
            let rows = block_table(cfg)?;
            let mut v: Vec<Check> = rows.iter().map(BlockRow::check).collect();
            v.push(generator_closure(&rows));
            v
        }
        "all" => {
            let mut v = dressing_suite(cfg);
            v.extend(hierarchy_suite(cfg));
            v.extend(hamiltonian_suite(cfg));
            v.extend(addsym_suite(cfg));
            v
        }
        other => return Err(MethError::Config(format!("unknown suite '{other}' (expected one of {})", SUITES.join(", ")))),
    };
    Ok(Report::new(name, cfg, checks))
}

fn op_residual(op: &crate::opalg::MixedOp, g: &Grid) -> f64 {
    op.norm_on(op.trust(), g)
}

fn dressing_suite(cfg: &RunConfig) -> Vec<Check> {
    let mut out = Vec::new();
    for seed in cfg.seed_list() {
        let state = cfg.state(seed);
        let anchor = "L = SΛS⁻¹ = S̄Λ⁻¹S̄⁻¹ with S, S̄ solved order by order";
        out.extend(group(&format!("dressing.s{seed}"), anchor, cfg.grid_spec(), |g| {
            let pair = dressing::solve_dressing(&state.u, &state.v, cfg.order, g)?;
            let l = pair.lax()?;
            let rec = dressing::dressing_residual(&pair, l.diff())?;
            let (cs, csbar) = dressing::conjugation_residuals(&pair)?;
            let tol = Some(cfg.tol_dressing);
            Ok(vec![item("recursion", rec, tol), item("conjugation_s", cs, tol), item("conjugation_sbar", csbar, tol)])
        }));
        let anchor = "log_±L commute with L; log_+L = ε∂ + Λ^{<0} terms, log_−L has Λ^{≥0} terms only";
        out.extend(group(&format!("logs.s{seed}"), anchor, cfg.grid_spec(), |g| {
            let pair = dressing::solve_dressing(&state.u, &state.v, cfg.order, g)?;
            let wg = pair.work_grid();
            let l = pair.lax()?;
            let lp = dressing::log_plus(&pair)?;
            let lm = dressing::log_minus(&pair)?;
            let band_ok = lp.deriv_order() == 1 && lm.deriv_order() == 1 && lp.diff().band().hi < 0 && lm.diff().band().lo >= 0;
            // The derivation parts must be exactly ±ε∂.
            let unit = |op: &crate::opalg::MixedOp, sign: f64| {
                let d = op.parts()[1].sub(&crate::opalg::DiffOp::monomial(0, crate::fields::CoeffFn::constant(sign)));
                d.coeff_norm_on(d.support())
            };
            let tol = Some(cfg.tol_dressing);
            Ok(vec![
                item("commute_plus", op_residual(&lp.commutator(&l, wg)?, wg), tol),
                item("commute_minus", op_residual(&lm.commutator(&l, wg)?, wg), tol),
                item("band_shape", if band_ok { 0.0 } else { 1.0 }, Some(0.5)),
                item("derivation_plus", unit(&lp, 1.0), tol),
                item("derivation_minus", unit(&lm, -1.0), tol),
                item("secular_plus", dressing::secular_fraction(&dressing::log_plus_raw(&pair)?), None),
                item("secular_minus", dressing::secular_fraction(&dressing::log_minus_raw(&pair)?), None),
            ])
        }));
    }
    out
}

const T00: FlowSpec = FlowSpec { alpha: 0, n: 0 };
const T01: FlowSpec = FlowSpec { alpha: 0, n: 1 };
const T10: FlowSpec = FlowSpec { alpha: 1, n: 0 };
const T20: FlowSpec = FlowSpec { alpha: 2, n: 0 };

fn flow_name(f: FlowSpec) -> String {
    format!("t{}{}", f.alpha, f.n)
}

fn hierarchy_suite(cfg: &RunConfig) -> Vec<Check> {
    let mut out = Vec::new();
    for seed in cfg.seed_list() {
        let state = cfg.state(seed);
        let anchor = "∂L/∂t = −[(B)_-, L] = [(B)_+, L] is a flow of (u, v)";
        out.extend(group(&format!("lax.s{seed}"), anchor, cfg.grid_spec(), |g| {
            let ctx = FlowContext::new(&state, cfg.order, g)?;
            let mut items = Vec::new();
            for f in FlowSpec::basic() {
                let r = hierarchy::lax_rhs_unchecked(&ctx, f)?;
                items.push(item(format!("{}.anomaly", flow_name(f)), r.anomaly, Some(cfg.tol_anomaly)));
                items.push(item(format!("{}.projections", flow_name(f)), hierarchy::projection_mismatch(&ctx, f)?, Some(cfg.tol_projection)));
            }
            let r = hierarchy::lax_rhs_unchecked(&ctx, T10)?;
            let e2 = 2.0 * g.eps();
            let tr = (&r.du - &state.u.ddx().scale(e2)).sup_norm(g).max((&r.dv - &state.v.ddx().scale(e2)).sup_norm(g));
            items.push(item("t10.translation", tr, Some(cfg.tol_translation)));
            Ok(items)
        }));
        let anchor = "S_t = −(B)_-S and S̄_t = (B)_+S̄ along the flows";
        for f in [T00, T01, T10] {
            out.extend(group(&format!("sato.s{seed}.{}", flow_name(f)), anchor, cfg.grid_spec(), |g| {
                let r = hierarchy::sato_residuals(&state, f, cfg.fd_step, cfg.order, g)?;
                let rel = |a: f64, n: f64| if n > 0.0 { a / n } else { a };
                Ok(vec![
                    item("s", r.s, Some(cfg.tol_sato)),
                    item("sbar", r.sbar, Some(cfg.tol_sato)),
                    item("s_relative", rel(r.s, r.ds_norm), None),
                    item("sbar_relative", rel(r.sbar, r.dsbar_norm), None),
                ])
            }));
        }
        let anchor = "the hierarchy flows commute";
        out.extend(group(&format!("commute.s{seed}"), anchor, cfg.fd_grid_spec(), |g| {
            let pairs = [(T00, T01), (T00, T10), (T01, T10)];
            pairs
                .iter()
                .map(|&(a, b)| {
                    let r = hierarchy::flow_commutator_residual(&state, a, b, cfg.fd_step, cfg.fd_order, g)?;
                    Ok(item(format!("{}_{}", flow_name(a), flow_name(b)), r, Some(cfg.tol_fd)))
                })
                .collect()
        }));
    }
    out
}

fn single(beta: u8, n: usize, h2: H2Form) -> Functional {
    Functional::Single(hamiltonian::DensitySpec { beta, n, h2 })
}

fn hamiltonian_suite(cfg: &RunConfig) -> Vec<Check> {
    let mut out = Vec::new();
    let h2 = cfg.h2_form;
    for seed in cfg.seed_list() {
        let state = cfg.state(seed);
        let anchor = "each flow is s·{·, H}_1 for the Hamiltonian fixed by calibration";
        out.extend(group(&format!("hamiltonian.s{seed}"), anchor, cfg.grid_spec(), |g| {
            let mut items = Vec::new();
            for f in [T00, T01, T10, T20] {
                let cal = hamiltonian::calibrate(&state, f, h2, false, cfg.tol_hamiltonian, cfg.order, g)?;
                let best = cal.candidates.iter().min_by(|a, b| a.residual.total_cmp(&b.residual)).expect("candidates");
                let mut it = item(format!("{}.strict", flow_name(f)), best.residual, Some(cfg.tol_hamiltonian));
                it.note = Some(match cal.selected() {
                    Some(c) => format!("selected {} with scale {:?}", c.functional, c.scale),
                    None => format!("no unique candidate; best {} with scale {:?}", best.functional, best.scale),
                });
                items.push(it);
                let r = hamiltonian::hamiltonian_match_residual(&state, f.into(), h2, cfg.order, g)?;
                items.push(item(format!("{}.calibrated", flow_name(f)), r, None));
            }
            for n in 0..3 {
                let r = hamiltonian::hamiltonian_match_residual(&state, Generator::LogPair(n), h2, cfg.order, g)?;
                items.push(item(format!("T{n}.log_pair"), r, Some(cfg.tol_hamiltonian)));
            }
            Ok(items)
        }));
        let anchor = "{·, H_{β,n−1}}_2 relates to {·, H_{β,n}}_1 (bi-Hamiltonian recursion)";
        for branch in 0..3u8 {
            for n in 1..3 {
                out.extend(group(&format!("recursion.s{seed}.b{branch}.n{n}"), anchor, cfg.grid_spec(), |g| {
                    let rep = hamiltonian::recursion_report(&state, branch, n, h2, g)?;
                    let mut items: Vec<Item> = rep
                        .readings
                        .iter()
                        .map(|r| {
                            let tol = (branch == 0 && r.name == "calibrated indexing").then_some(cfg.tol_hamiltonian);
                            item(r.name.replace([' ', ','], "_").replace("__", "_"), r.residual, tol)
                        })
                        .collect();
                    items.push(item("fit", rep.fitted_residual, None));
                    Ok(items)
                }));
            }
        }
        let anchor = "∂h_a/∂t_b = ∂h_b/∂t_a (tau symmetry)";
        out.extend(group(&format!("tau_symmetry.s{seed}"), anchor, cfg.grid_spec(), |g| {
            let flows = [T00, T01, T10, T20];
            let mut items = Vec::new();
            for i in 0..flows.len() {
                for j in i + 1..flows.len() {
                    let (a, b) = (flows[i], flows[j]);
                    let r = hamiltonian::tau_symmetry_residual(&state, a.into(), b.into(), Indexing::AsPrinted, h2, cfg.order, g)?;
                    items.push(item(format!("{}_{}", flow_name(a), flow_name(b)), r, Some(cfg.tol_tau)));
                }
            }
            let gens = [Generator::Flow(T00), Generator::Flow(T01), Generator::LogPair(0), Generator::LogPair(1), Generator::LogPair(2)];
            let label = |x: &Generator| match x {
                Generator::Flow(f) => flow_name(*f),
                Generator::LogPair(n) => format!("T{n}"),
            };
            for i in 0..gens.len() {
                for j in i + 1..gens.len() {
                    let r = hamiltonian::tau_symmetry_residual(&state, gens[i], gens[j], Indexing::AsPrinted, h2, cfg.order, g)?;
                    items.push(item(format!("log_pair.{}_{}", label(&gens[i]), label(&gens[j])), r, Some(cfg.tol_tau)));
                }
            }
            Ok(items)
        }));
    }
    let state = cfg.state(cfg.seed);
    let anchor = "u, v and the densities derive from one tau function";
    out.extend(group("tau_relations", anchor, cfg.grid_spec(), |g| {
        let traj = hierarchy::evolve(&state, T00, 0.01, 50, cfg.order, g)?;
        let t = hamiltonian::tau_relations_residual(&traj, cfg.order, g)?;
        Ok(vec![
            item("closedness", t.closedness, Some(cfg.tol_tau_relation)),
            item("swapped", t.u_relation_swapped, Some(cfg.tol_tau_relation)),
            item("printed", t.u_relation_printed, None),
        ])
    }));
    let anchor = "∫h_{β,n} are conserved along the t_{0,0} flow";
    out.extend(group("conservation", anchor, cfg.grid_spec(), |g| {
        let traj = hierarchy::evolve(&state, T00, 0.01, 100, cfg.order, g)?;
        let mut items = Vec::new();
        for beta in 0..3u8 {
            for n in 0..3 {
                let d = hamiltonian::conservation_drift(&traj, single(beta, n, h2), g)?;
                items.push(item(format!("h{beta}{n}"), d, Some(cfg.tol_conservation)));
            }
        }
        for n in 0..3 {
            items.push(item(format!("log_pair{n}"), hamiltonian::conservation_drift(&traj, Functional::LogPair(n), g)?, Some(cfg.tol_conservation)));
        }
        Ok(items)
    }));
    for seed in cfg.seed_list() {
        let state = cfg.state(seed);
        let anchor = "densities h_{β,n} are periodic although S, S̄ are secular";
        out.extend(group(&format!("secular.s{seed}"), anchor, cfg.grid_spec(), |g| {
            let mut items = Vec::new();
            let mut worst_coeff: f64 = 0.0;
            for beta in 0..3u8 {
                for n in 0..4 {
                    let spec = hamiltonian::DensitySpec { beta, n, h2 };
                    let ctx = FlowContext::new(&state, spec.dressing_order().max(1), g)?;
                    items.push(item(format!("h{beta}{n}"), hamiltonian::secular_content(&ctx, spec)?, Some(cfg.tol_secular)));
                }
            }
            let pair = dressing::solve_dressing(&state.u, &state.v, cfg.order, g)?;
            for k in 1..=cfg.order as i64 {
                if let Some(c) = pair.s.coeff(-k) {
                    worst_coeff = worst_coeff.max(c.secular_norm());
                }
            }
            items.push(item("dressing_secular_norm", worst_coeff, None));
            Ok(items)
        }));
    }
    out
}

/// Times on the supported slice at which the additional flows are examined.
fn os_state(cfg: &RunConfig, seed: u64, variant: GammaVariant) -> Result<OsState> {
    let mut lattice = cfg.state(seed);
    lattice.times.insert(T00, 0.3);
    lattice.times.insert(T01, -0.2);
    lattice.times.insert(T10, 0.1);
    OsState::new(lattice, cfg.order, variant)
}

fn fd_os_state(cfg: &RunConfig, seed: u64, variant: GammaVariant) -> Result<OsState> {
    let mut os = os_state(cfg, seed, variant)?;
    os.lattice = LatticeState::new(os.lattice.u.clone(), os.lattice.v.clone(), cfg.fd_grid_spec())
        .map(|mut s| {
            s.times = os.lattice.times.clone();
            s
        })?;
    Ok(OsState::new(os.lattice, cfg.fd_order, variant)?)
}

/// Refusals of flows outside the periodic phase space are failures, not errors.
fn as_refused(mut v: Vec<Check>) -> Vec<Check> {
    for c in &mut v {
        if c.status == Status::Error {
            c.status = Status::Fail;
        }
    }
    v
}

fn addsym_suite(cfg: &RunConfig) -> Vec<Check> {
    let mut out = Vec::new();
    for seed in cfg.seed_list() {
        let anchor = "[L, M] = [L, M̄] = 1 and [M − M̄, L] = 0";
        out.extend(group(&format!("orlov_schulman.s{seed}"), anchor, cfg.grid_spec(), |g| {
            let ops = OsOperators::build(&os_state(cfg, seed, cfg.gamma)?, g)?;
            let r = ops.canonical_residuals()?;
            let tol = Some(cfg.tol_os);
            Ok(vec![
                item("l_m", r.l_m, tol),
                item("l_mbar", r.l_mbar, tol),
                item("m_minus_mbar", r.diff_l, tol),
                item("log_m_minus_l", r.log_m_minus_l, None),
                item("log_m_minus_sls", r.log_m_minus_linv, None),
            ])
        }));
    }
    let seed = cfg.seed;
    let anchor = "∂*_{m,l} preserves L = Λ + u + e^vΛ^{-1}";
    for m in 0..=cfg.mmax {
        for l in 0..=cfg.lmax {
            out.extend(as_refused(group(&format!("reduction.{m}{l}"), anchor, cfg.fd_grid_spec(), |g| {
                let os = fd_os_state(cfg, seed, cfg.gamma)?;
                let v = OsOperators::build(&os, g)?.velocity(OsFlow::Additional { m, l })?;
                let tol = Some(cfg.tol_fd);
                Ok(vec![item("anomaly", v.anomaly, tol), item("plus_anomaly", v.plus_anomaly, tol), item("reps_gap", v.reps_gap, tol)])
            })));
        }
    }
    let anchor = "∂*_{m,l} commutes with the hierarchy flows";
    for m in 0..=cfg.mmax.min(2) {
        for l in 0..=cfg.lmax.min(2) {
            if (m, l) == (0, 0) {
                continue;
            }
            for f in [T00, T01, T10] {
                out.extend(as_refused(group(&format!("commute.{m}{l}.{}", flow_name(f)), anchor, cfg.fd_grid_spec(), |g| {
                    let os = fd_os_state(cfg, seed, cfg.gamma)?;
                    Ok(vec![item("", addsym::hierarchy_commutation_residual(&os, (m, l), f, cfg.fd_step, g)?, Some(cfg.tol_fd))])
                })));
            }
        }
    }
    let anchor = "Γ normalization: (n+1)Λ^n as defined against the commutation with t_{0,1}";
    out.extend(group("gamma_as_defined", anchor, cfg.fd_grid_spec(), |g| {
        let os = fd_os_state(cfg, seed, GammaVariant::AsDefined)?;
        Ok(vec![item("10.t01", addsym::hierarchy_commutation_residual(&os, (1, 0), T01, cfg.fd_step, g)?, None)])
    }));
    let anchor = "explicit form of ∂*_{1,1} on the time slice";
    out.extend(group("t11_formula", anchor, cfg.fd_grid_spec(), |g| {
        let r = addsym::t11_flow_formula_residual(&fd_os_state(cfg, seed, cfg.gamma)?, g)?;
        Ok(vec![item("corrected", r.corrected, Some(cfg.tol_os)), item("printed", r.printed, None)])
    }));
    let anchor = "∂*_{m,l} = s·{·, ∫Res (M−M̄)^m L^{l+1}}_1";
    out.extend(group("additional_hamiltonian", anchor, cfg.fd_grid_spec(), |g| {
        let os = fd_os_state(cfg, seed, cfg.gamma)?;
        let mut items = Vec::new();
        for l in 1..=cfg.lmax {
            let (s, r) = addsym::additional_hamiltonian_match(&os, (0, l), (0, l + 1), g)?;
            items.push(item(format!("0{l}"), r, Some(cfg.tol_hamiltonian)));
            items.push(item(format!("0{l}.scale"), s, None));
        }
        for l in 0..2 {
            let (_, r) = addsym::additional_hamiltonian_match(&os, (1, l), (1, l + 1), g)?;
            items.push(item(format!("1{l}"), r, None));
        }
        Ok(items)
    }));
    out
}

/// One entry of the Block-algebra table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockRow {
    pub left: (usize, usize),
    pub right: (usize, usize),
    pub target: Option<(usize, usize)>,
    pub predicted: f64,
    pub measured: Option<f64>,
    pub residual: Option<f64>,
    pub tolerance: f64,
    pub status: Status,
    pub wall_time_s: f64,
    pub note: Option<String>,
}

const BLOCK_ANCHOR: &str = "[∂*_{m,l}, ∂*_{n,k}] = (km − nl)∂*_{m+n−1,k+l−1}";

/// Generators of the Block algebra examined for closure.
pub const GENERATORS: [(usize, usize); 5] = [(0, 1), (1, 0), (1, 1), (2, 1), (1, 2)];

impl BlockRow {
    pub fn check(&self) -> Check {
        let (m, l) = self.left;
        let (n, k) = self.right;
        Check {
            name: format!("block.{m}{l}_{n}{k}"),
            anchor: BLOCK_ANCHOR.to_string(),
            residual: self.residual,
            tolerance: Some(self.tolerance),
            ledger_mass: 0.0,
            status: self.status,
            wall_time_s: self.wall_time_s,
            note: self.note.clone(),
        }
    }

    pub const CSV_HEADER: &'static str = "m,l,n,k,target,predicted,measured,residual,status,note";

    pub fn csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.left.0,
            self.left.1,
            self.right.0,
            self.right.1,
            self.target.map(|(p, q)| format!("{p}:{q}")).unwrap_or_default(),
            self.predicted,
            opt(self.measured),
            opt(self.residual),
            format!("{:?}", self.status).to_lowercase(),
            self.note.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        )
    }
}

/// Index pairs `(m,l) < (n,k)` with `m+n ≤ mmax+1`, `k+l ≤ lmax+1`.
pub fn block_pairs(cfg: &RunConfig) -> Vec<((usize, usize), (usize, usize))> {
    let (mm, ll) = (cfg.mmax + 1, cfg.lmax + 1);
    let mut out = Vec::new();
    for m in 0..=mm {
        for l in 0..=ll {
            for n in 0..=mm - m {
                for k in 0..=ll - l {
                    if (m, l) < (n, k) {
                        out.push(((m, l), (n, k)));
                    }
                }
            }
        }
    }
    out
}

/// Measures every bracket of [`block_pairs`] on one state.
pub fn block_table(cfg: &RunConfig) -> Result<Vec<BlockRow>> {
    cfg.validate()?;
    let os = fd_os_state(cfg, cfg.seed, cfg.gamma)?;
    let mut rows = Vec::new();
    for (a, b) in block_pairs(cfg) {
        let predicted = (b.1 * a.0) as f64 - (b.0 * a.1) as f64;
        let target = (a.0 + b.0 >= 1 && a.1 + b.1 >= 1).then(|| (a.0 + b.0 - 1, a.1 + b.1 - 1));
        let start = Instant::now();
        let grid = Grid::new(cfg.fd_grid_spec())?;
        let row = match addsym::block_bracket_residual(&os, a, b, cfg.fd_step, &grid) {
            Ok(r) => BlockRow {
                left: a,
                right: b,
                target: r.target,
                predicted: r.predicted,
                measured: Some(r.measured),
                residual: Some(r.residual),
                tolerance: cfg.tol_fd,
                status: if r.residual <= cfg.tol_fd { Status::Pass } else { Status::Fail },
                wall_time_s: start.elapsed().as_secs_f64(),
                note: None,
            },
            Err(e) => {
                let c = refused("", BLOCK_ANCHOR, &e);
                BlockRow {
                    left: a,
                    right: b,
                    target,
                    predicted,
                    measured: None,
                    residual: None,
                    tolerance: cfg.tol_fd,
                    status: c.status,
                    wall_time_s: start.elapsed().as_secs_f64(),
                    note: c.note,
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Closure of [`GENERATORS`]: the worst row among brackets of two generators.
pub fn generator_closure(rows: &[BlockRow]) -> Check {
    let gen_rows: Vec<&BlockRow> =
        rows.iter().filter(|r| GENERATORS.contains(&r.left) && GENERATORS.contains(&r.right)).collect();
    let refused: Vec<String> = gen_rows
        .iter()
        .filter(|r| r.residual.is_none())
        .map(|r| format!("{:?}×{:?}", r.left, r.right))
        .collect();
    let worst = gen_rows.iter().filter_map(|r| r.residual).fold(0.0, f64::max);
    let tol = gen_rows.first().map(|r| r.tolerance).unwrap_or(0.0);
    let ok = refused.is_empty() && worst <= tol && !gen_rows.is_empty();
    Check {
        name: "block.generators".into(),
        anchor: "the generators ∂*_{0,1}, ∂*_{1,0}, ∂*_{1,1}, ∂*_{2,1}, ∂*_{1,2} close onto the predicted targets".into(),
        residual: Some(worst),
        tolerance: Some(tol),
        ledger_mass: 0.0,
        status: if ok { Status::Pass } else { Status::Fail },
        wall_time_s: gen_rows.iter().map(|r| r.wall_time_s).sum(),
        note: (!refused.is_empty()).then(|| format!("not evaluable: {}", refused.join(" "))),
    }
}
