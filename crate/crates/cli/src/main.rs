use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use meth::dressing;
use meth::error::MethError;
use meth::fields::Grid;
use meth::hierarchy::{self, FlowSpec};
use meth::report::{self, BlockRow, Report, RunConfig};

/// Verification and evolution driver for the modified extended Toda hierarchy.
#[derive(Parser)]
#[command(name = "meth", version)]
struct Cli {
    /// Flat TOML configuration file; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(clap::Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    seeds: Option<usize>,
    /// Dressing order K.
    #[arg(long)]
    order: Option<usize>,
    /// JSON file with a lattice state to use instead of a random one.
    #[arg(long)]
    state: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a verification suite and write its JSON report.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        mmax: Option<usize>,
        #[arg(long)]
        lmax: Option<usize>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        #[command(flatten)]
        over: Overrides,
    },
    /// Integrate one flow with RK4; writes trajectory.csv and final_state.json.
    Evolve {
        /// Flow as `alpha,n`.
        #[arg(long, default_value = "0,0")]
        flow: FlowSpec,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        over: Overrides,
    },
    /// Solve the dressing operators and write them with their residuals.
    Dress {
        #[arg(long, default_value = "dressing.json")]
        out: PathBuf,
        #[command(flatten)]
        over: Overrides,
    },
    /// Pretty-print a JSON report.
    Report { file: PathBuf },
}

enum Failure {
    Usage(String),
    Numeric(MethError),
    Other(String),
}

impl From<MethError> for Failure {
    fn from(e: MethError) -> Self {
        match e {
            MethError::Config(m) => Failure::Usage(m),
            MethError::BlowUp(_) => Failure::Other(e.to_string()),
            e => Failure::Numeric(e),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Other(format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.seeds {
            cfg.seeds = n;
        }
        if let Some(k) = self.order {
            cfg.order = k;
        }
        if let Some(p) = &self.state {
            cfg.state_file = Some(p.clone());
            cfg.state = None;
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Other(e.to_string()))
}

fn verify(mut cfg: RunConfig, suite: &str, mmax: Option<usize>, lmax: Option<usize>, out: &Path) -> Result<bool, Failure> {
    if !report::SUITES.contains(&suite) {
        return Err(Failure::Usage(format!("unknown suite '{suite}' (expected one of {})", report::SUITES.join(", "))));
    }
    cfg.mmax = mmax.unwrap_or(cfg.mmax);
    cfg.lmax = lmax.unwrap_or(cfg.lmax);
    let rep = if suite == "block-table" {
        let cfg = cfg.resolved()?;
        let rows = report::block_table(&cfg)?;
        let mut csv = format!("{}\n", BlockRow::CSV_HEADER);
        for r in &rows {
            csv.push_str(&r.csv());
            csv.push('\n');
        }
        write(&out.with_extension("csv"), &csv)?;
        let mut checks: Vec<_> = rows.iter().map(BlockRow::check).collect();
        checks.push(report::generator_closure(&rows));
        Report::new(suite, &cfg, checks)
    } else {
        report::run_suite(suite, &cfg)?
    };
    write(out, &to_json(&rep)?)?;
    print!("{}", rep.table());
    Ok(rep.passed())
}

fn evolve(cfg: RunConfig, flow: FlowSpec, dt: f64, steps: usize, out: &Path) -> Result<bool, Failure> {
    let cfg = cfg.resolved()?;
    let grid = Grid::new(cfg.grid_spec())?;
    let traj = hierarchy::evolve(&cfg.state(cfg.seed), flow, dt, steps, cfg.order, &grid)?;
    let mut csv = String::from("step,t,H00,H01,H02,u_norm,v_norm\n");
    for r in &traj.records {
        let c = &r.charges;
        csv.push_str(&format!("{},{},{:e},{:e},{:e},{:e},{:e}\n", r.step, r.t, c[0], c[1], c[2], r.u_norm, r.v_norm));
    }
    write(&out.join("trajectory.csv"), &csv)?;
    write(&out.join("final_state.json"), &to_json(traj.last())?)?;
    Ok(true)
}

fn dress(cfg: RunConfig, out: &Path) -> Result<bool, Failure> {
    let cfg = cfg.resolved()?;
    let grid = Grid::new(cfg.grid_spec())?;
    let st = cfg.state(cfg.seed);
    let dump = dressing::solve_dressing(&st.u, &st.v, cfg.order, &grid)?.dump()?;
    write(out, &to_json(&dump)?)?;
    println!(
        "K = {}: recursion residual {:.3e}, conjugation {:.3e} / {:.3e}",
        dump.order, dump.residual, dump.conjugation[0], dump.conjugation[1]
    );
    Ok(true)
}

fn show(path: &Path) -> Result<bool, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let rep: Report = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    print!("{}", rep.table());
    Ok(rep.passed())
}

fn run(cli: Cli) -> Result<bool, Failure> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if cli.print_config {
        let text = toml::to_string(&cfg).map_err(|e| Failure::Other(e.to_string()))?;
        print!("{text}");
        return Ok(true);
    }
    let Some(command) = cli.command else {
        return Err(Failure::Usage("no command given (try --help)".into()));
    };
    match command {
        Command::Verify { suite, mmax, lmax, out, over } => {
            over.apply(&mut cfg);
            verify(cfg, &suite, mmax, lmax, &out)
        }
        Command::Evolve { flow, dt, steps, out, over } => {
            over.apply(&mut cfg);
            evolve(cfg, flow, dt, steps, &out)
        }
        Command::Dress { out, over } => {
            over.apply(&mut cfg);
            dress(cfg, &out)
        }
        Command::Report { file } => show(&file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Numeric(e)) => {
            eprintln!("numeric precondition failed: {e}");
            3
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            1
        }
    };
    let _ = std::io::stdout().flush();
    ExitCode::from(code)
}
