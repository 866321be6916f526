//! Command-line front end: TOML configs in, CSV and `key=value` reports out.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 numerical failure,
//! 3 inconclusive verdict under `--strict`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;
use toml::Spanned;

use crate::equilibrium::{homogeneous_equilibrium, solve_equilibrium, trivial_equilibrium, Equilibrium, ShootingOptions};
use crate::error::Error;
use crate::expr::RateExpression;
use crate::linearization::build_linearization;
use crate::model::{AgeGrid, AgeSpaceField, Boundary, ModelSpec, SpatialGrid, VitalRates, DEFAULT_SUBSTEPS, DEFAULT_Z_MAX};
use crate::spectral::{spectral_report, Scan, SpectralContext};
use crate::stability::{verdict_equilibrium, verdict_trivial, verify_by_simulation, NormKind, Verdict, DEFAULT_BAND};
use crate::transport::{simulate, Trajectory};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_INCONCLUSIVE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "agestab", version, about = "Age-structured population models with diffusion: simulation and stability")]
struct Cli {
    #[command(subcommand)]
    command: CommandArg,
    /// Directory for output files.
    #[arg(long, global = true, default_value = "out")]
    output: PathBuf,
    /// Exit with status 3 when a verdict is inconclusive.
    #[arg(long, global = true)]
    strict: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum CommandArg {
    /// Run the nonlinear dynamics and write norms and state snapshots.
    Simulate { config: PathBuf },
    /// Compute an equilibrium and its residual.
    Equilibrium { config: PathBuf },
    /// Spectral radius, lambda0 and the dominant real eigenvalue with the scan curve.
    Spectrum { config: PathBuf },
    /// Stability verdict for the configured equilibrium.
    Verdict { config: PathBuf },
    /// Measure the deviation growth rate by simulation.
    Verify { config: PathBuf },
    /// Tabulate r(Q0), lambda0 and the verdict over a parameter range.
    Sweep { config: PathBuf },
    /// Run the command named in the config's [run] section.
    Run { config: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Equilibrium,
    Spectrum,
    Verdict,
    Verify,
    Sweep,
}

impl Command {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "simulate" => Command::Simulate,
            "equilibrium" => Command::Equilibrium,
            "spectrum" => Command::Spectrum,
            "verdict" => Command::Verdict,
            "verify" => Command::Verify,
            "sweep" => Command::Sweep,
            _ => return None,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    grid: Option<RawGrid>,
    age: Option<RawAge>,
    rates: Option<RawRates>,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    #[serde(default)]
    run: RawRun,
    sweep: Option<RawSweep>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    length: f64,
    n_x: usize,
    boundary: Spanned<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAge {
    a_max: f64,
    n_a: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRates {
    m: Spanned<String>,
    b: Spanned<String>,
    d: Spanned<String>,
    rho: Option<Spanned<String>>,
    dm_dz: Option<Spanned<String>>,
    db_dz: Option<Spanned<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    command: Option<Spanned<String>>,
    n_substeps: Option<usize>,
    z_max: Option<f64>,
    horizon: Option<f64>,
    stride: Option<usize>,
    u0: Option<Spanned<String>>,
    epsilon: Option<f64>,
    band: Option<f64>,
    equilibrium: Option<Spanned<String>>,
    amplitude: Option<[f64; 2]>,
    lambda_min: Option<f64>,
    lambda_max: Option<f64>,
    n_scan: Option<usize>,
    norm: Option<Spanned<String>>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    param: Spanned<String>,
    from: f64,
    to: f64,
    steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquilibriumChoice {
    Trivial,
    Homogeneous,
    Shooting,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub param: String,
    pub from: f64,
    pub to: f64,
    pub steps: usize,
}

/// A validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub command: Option<Command>,
    pub horizon: f64,
    pub stride: usize,
    pub u0: RateExpression,
    pub epsilon: f64,
    pub band: f64,
    pub equilibrium: EquilibriumChoice,
    pub amplitude: (f64, f64),
    pub scan: Option<Scan>,
    pub norm: NormKind,
    pub seed: u64,
    pub sweep: Option<SweepConfig>,
    sources: RateSources,
    params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
struct RateSources {
    m: String,
    b: String,
    d: String,
    rho: String,
    dm_dz: Option<String>,
    db_dz: Option<String>,
}

/// A configuration problem with a `file:line:column` position.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

struct Source<'a> {
    path: &'a str,
    text: &'a str,
}

impl Source<'_> {
    fn position(&self, offset: usize) -> (usize, usize) {
        let before = &self.text[..offset.min(self.text.len())];
        let line = before.matches('\n').count() + 1;
        let col = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
        (line, col)
    }

    fn at(&self, span: Option<Range<usize>>, message: impl std::fmt::Display) -> ConfigError {
        let message = match span {
            Some(s) => {
                let (line, col) = self.position(s.start);
                format!("{}:{line}:{col}: {message}", self.path)
            }
            None => format!("{}: {message}", self.path),
        };
        ConfigError { message }
    }

    /// Parses a rate expression stored in a TOML string, pointing errors at the
    /// offending character inside the string.
    fn expr(&self, name: &str, value: &Spanned<String>, params: &BTreeMap<String, f64>) -> Result<RateExpression, ConfigError> {
        RateExpression::parse_with_params(value.get_ref(), params).map_err(|e| {
            // span starts at the opening quote
            let offset = value.span().start + 1 + e.column.saturating_sub(1);
            self.at(Some(offset..offset), format!("in `{name}`: {}", e.message))
        })
    }
}

fn build_rates(src: &RateSources, params: &BTreeMap<String, f64>) -> Result<VitalRates, String> {
    let p = |name: &str, s: &str| {
        RateExpression::parse_with_params(s, params).map_err(|e| format!("in `{name}`: column {}: {}", e.column, e.message))
    };
    let dm = src.dm_dz.as_deref().map(|s| p("dm_dz", s)).transpose()?;
    let db = src.db_dz.as_deref().map(|s| p("db_dz", s)).transpose()?;
    VitalRates::new(p("m", &src.m)?, p("b", &src.b)?, p("d", &src.d)?, p("rho", &src.rho)?, dm, db).map_err(|e| e.to_string())
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| ConfigError {
        message: format!("{display}: cannot read config: {e}"),
    })?;
    parse_config(&display, &text)
}

/// Parses configuration text; `path` only labels diagnostics.
pub fn parse_config(path: &str, text: &str) -> Result<RunConfig, ConfigError> {
    let src = Source { path, text };
    let raw: RawConfig = toml::from_str(text).map_err(|e| src.at(e.span(), e.message().trim()))?;
    let missing = |name: &str| src.at(None, format!("missing section [{name}]"));
    let grid = raw.grid.ok_or_else(|| missing("grid"))?;
    let age = raw.age.ok_or_else(|| missing("age"))?;
    let rates = raw.rates.ok_or_else(|| missing("rates"))?;
    let params = raw.params;
    let run = raw.run;

    let boundary = match grid.boundary.get_ref().as_str() {
        "dirichlet" => Boundary::Dirichlet,
        "neumann" => Boundary::Neumann,
        other => {
            return Err(src.at(
                Some(grid.boundary.span()),
                format!("unknown boundary `{other}`, expected `dirichlet` or `neumann`"),
            ))
        }
    };
    let spatial = SpatialGrid::new(grid.length, grid.n_x, boundary).map_err(|e| src.at(None, format!("[grid]: {e}")))?;
    let age_grid = AgeGrid::new(age.a_max, age.n_a).map_err(|e| src.at(None, format!("[age]: {e}")))?;

    let one = Spanned::new(0..0, "1".to_string());
    let rho = rates.rho.as_ref().unwrap_or(&one);
    // parse each source once for positioned diagnostics
    for (name, value) in [("m", &rates.m), ("b", &rates.b), ("d", &rates.d), ("rho", rho)] {
        src.expr(name, value, &params)?;
    }
    for (name, value) in [("dm_dz", &rates.dm_dz), ("db_dz", &rates.db_dz)] {
        if let Some(v) = value {
            src.expr(name, v, &params)?;
        }
    }
    let sources = RateSources {
        m: rates.m.get_ref().clone(),
        b: rates.b.get_ref().clone(),
        d: rates.d.get_ref().clone(),
        rho: rho.get_ref().clone(),
        dm_dz: rates.dm_dz.as_ref().map(|s| s.get_ref().clone()),
        db_dz: rates.db_dz.as_ref().map(|s| s.get_ref().clone()),
    };
    let vital = build_rates(&sources, &params).map_err(|e| src.at(Some(rates.m.span()), e))?;
    let n_substeps = run.n_substeps.unwrap_or(DEFAULT_SUBSTEPS);
    if n_substeps == 0 {
        return Err(src.at(None, "[run] n_substeps must be at least 1"));
    }
    let model = ModelSpec::new(spatial, age_grid, vital)
        .map_err(|e| src.at(None, e))?
        .with_substeps(n_substeps)
        .with_z_max(run.z_max.unwrap_or(DEFAULT_Z_MAX));

    let command = match &run.command {
        None => None,
        Some(c) => Some(Command::parse(c.get_ref()).ok_or_else(|| src.at(Some(c.span()), format!("unknown command `{}`", c.get_ref())))?),
    };
    let equilibrium = match run.equilibrium.as_ref().map(|s| (s.get_ref().as_str(), s.span())) {
        None | Some(("trivial", _)) => EquilibriumChoice::Trivial,
        Some(("homogeneous", _)) => EquilibriumChoice::Homogeneous,
        Some(("shooting", _)) => EquilibriumChoice::Shooting,
        Some((other, span)) => return Err(src.at(Some(span), format!("unknown equilibrium `{other}`"))),
    };
    let norm = match run.norm.as_ref().map(|s| (s.get_ref().as_str(), s.span())) {
        None | Some(("L1_age_sup_space", _)) => NormKind::L1AgeSupSpace,
        Some(("L1_age_L2_space", _)) => NormKind::L1AgeL2Space,
        Some((other, span)) => return Err(src.at(Some(span), format!("unknown norm `{other}`"))),
    };
    let u0 = match &run.u0 {
        Some(s) => src.expr("u0", s, &params)?,
        None => RateExpression::constant(1.0),
    };
    let scan = match (run.lambda_min, run.lambda_max) {
        (Some(lo), Some(hi)) => Some(Scan {
            lambda_min: lo,
            lambda_max: hi,
            n: run.n_scan.unwrap_or(crate::spectral::DEFAULT_SCAN_POINTS),
        }),
        (None, None) => None,
        _ => return Err(src.at(None, "[run] lambda_min and lambda_max must be given together")),
    };
    let sweep = match raw.sweep {
        None => None,
        Some(s) => {
            let name = s.param.get_ref();
            let declared = format!("param:{name}");
            let used = [&sources.m, &sources.b, &sources.d, &sources.rho]
                .iter()
                .any(|e| e.contains(&declared));
            if !params.contains_key(name) || !used {
                return Err(src.at(
                    Some(s.param.span()),
                    format!("unknown sweep parameter `{name}`: it must be set in [params] and used as `{declared}` in a rate"),
                ));
            }
            if s.steps == 0 {
                return Err(src.at(None, "[sweep] steps must be at least 1"));
            }
            Some(SweepConfig {
                param: name.clone(),
                from: s.from,
                to: s.to,
                steps: s.steps,
            })
        }
    };
    Ok(RunConfig {
        model,
        command,
        horizon: run.horizon.unwrap_or(10.0),
        stride: run.stride.unwrap_or(0),
        u0,
        epsilon: run.epsilon.unwrap_or(0.05),
        band: run.band.unwrap_or(DEFAULT_BAND),
        equilibrium,
        amplitude: run.amplitude.map_or((0.0, 10.0), |[a, b]| (a, b)),
        scan,
        norm,
        seed: run.seed.unwrap_or(0),
        sweep,
        sources,
        params,
    })
}

impl RunConfig {
    /// The model with one parameter replaced.
    pub fn with_param(&self, name: &str, value: f64) -> crate::Result<ModelSpec> {
        let mut params = self.params.clone();
        params.insert(name.to_string(), value);
        let rates = build_rates(&self.sources, &params).map_err(Error::InvalidSpec)?;
        self.model.with_rates(rates)
    }

    pub fn initial_state(&self) -> crate::Result<AgeSpaceField> {
        let spec = &self.model;
        let mut u = spec.zeros();
        for j in 0..spec.n_age_nodes() {
            let a = spec.age().node(j);
            for i in 0..spec.n_x() {
                u.row_mut(j)[i] = crate::model::eval_rate("u0", &self.u0, 0.0, a, spec.spatial().node(i))?;
            }
        }
        Ok(u)
    }

    pub fn equilibrium(&self) -> crate::Result<Equilibrium> {
        let spec = &self.model;
        match self.equilibrium {
            EquilibriumChoice::Trivial => Ok(trivial_equilibrium(spec)),
            EquilibriumChoice::Homogeneous => homogeneous_equilibrium(spec),
            EquilibriumChoice::Shooting => solve_equilibrium(spec, self.amplitude, &ShootingOptions::default()),
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), num)
}

/// Writes `norms.csv` and one `state_<step>.csv` per snapshot.
pub fn export_trajectory(traj: &Trajectory, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut s = String::from("t,norm_L1sup,norm_L1L2,birth_sup\n");
    for k in 0..traj.len() {
        let birth = traj.birth_series[k].sup_norm();
        let _ = writeln!(s, "{},{},{},{}", num(traj.times[k]), num(traj.norm_l1_sup[k]), num(traj.norm_l1_l2[k]), num(birth));
    }
    fs::write(dir.join("norms.csv"), s)?;
    for snap in &traj.snapshots {
        write_field(&snap.state, &dir.join(format!("state_{}.csv", snap.step)))?;
    }
    Ok(())
}

pub fn write_field(u: &AgeSpaceField, path: &Path) -> std::io::Result<()> {
    let mut s = String::new();
    for row in u.rows() {
        let line: Vec<String> = row.iter().map(|&v| num(v)).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    fs::write(path, s)
}

fn write_report(dir: &Path, lines: &[(&str, String)]) -> std::io::Result<()> {
    let mut s = String::new();
    for (k, v) in lines {
        let _ = writeln!(s, "{k}={v}");
    }
    fs::write(dir.join("report.txt"), s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub r_q0: f64,
    pub lambda0: Option<f64>,
    pub verdict: Verdict,
}

/// `r(Q0(0))`, `lambda0` and the trivial verdict for each parameter value.
pub fn sweep(config: &RunConfig) -> crate::Result<Vec<SweepRow>> {
    let Some(sw) = &config.sweep else {
        return Err(Error::InvalidSpec("no [sweep] section".into()));
    };
    let values: Vec<f64> = if sw.steps == 1 {
        vec![sw.from]
    } else {
        (0..sw.steps).map(|k| sw.from + (sw.to - sw.from) * k as f64 / (sw.steps - 1) as f64).collect()
    };
    values
        .par_iter()
        .map(|&value| {
            let spec = config.with_param(&sw.param, value)?;
            let report = verdict_trivial(&spec, config.band)?;
            let lin = build_linearization(&trivial_equilibrium(&spec), &spec)?;
            let lambda0 = match SpectralContext::new(&lin, &spec)?.find_lambda0() {
                Ok(l) => Some(l),
                Err(Error::NotBracketed { .. }) => None,
                Err(e) => return Err(e),
            };
            Ok(SweepRow {
                value,
                r_q0: report.r_q0,
                lambda0,
                verdict: report.verdict,
            })
        })
        .collect()
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. } | Error::InvalidSpec(_) | Error::Precondition(_) | Error::Shape { .. } | Error::Io(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(format!("I/O error: {e}"))
    }
}

fn execute(command: Command, config: &RunConfig, out: &Path, strict: bool) -> Result<i32, Failure> {
    let spec = &config.model;
    fs::create_dir_all(out)?;
    match command {
        Command::Simulate => {
            let u0 = config.initial_state()?;
            let traj = simulate(&u0, config.horizon, spec, config.stride)?;
            export_trajectory(&traj, out)?;
            write_report(
                out,
                &[
                    ("command", "simulate".into()),
                    ("steps", (traj.len() - 1).to_string()),
                    ("final_time", num(*traj.times.last().unwrap_or(&0.0))),
                    ("final_sup", num(traj.final_state.sup_norm())),
                    ("blew_up", traj.blew_up.to_string()),
                ],
            )?;
            if traj.blew_up {
                return Err(Failure::Numerical(format!(
                    "sup norm exceeded the blow-up cap at t = {}",
                    traj.times.last().unwrap_or(&0.0)
                )));
            }
            Ok(EXIT_OK)
        }
        Command::Equilibrium => {
            let eq = config.equilibrium()?;
            write_field(&eq.phi, &out.join("phi.csv"))?;
            write_report(
                out,
                &[
                    ("command", "equilibrium".into()),
                    ("kind", eq.kind.to_string()),
                    ("residual", num(eq.residual)),
                    ("accepted", eq.accepted.to_string()),
                    ("ubar_sup", num(eq.ubar.sup_norm())),
                ],
            )?;
            if !eq.accepted {
                return Err(Failure::Numerical(format!("equilibrium residual {:e} above threshold", eq.residual)));
            }
            Ok(EXIT_OK)
        }
        Command::Spectrum => {
            let eq = config.equilibrium()?;
            let lin = build_linearization(&eq, spec)?;
            let report = spectral_report(&lin, spec, config.scan)?;
            let mut s = String::from("lambda,sigma_min,r_Q\n");
            for p in &report.scan.curve {
                let _ = writeln!(s, "{},{},{}", num(p.lambda), num(p.sigma_min), num(p.r_q));
            }
            fs::write(out.join("scan.csv"), s)?;
            write_report(
                out,
                &[
                    ("command", "spectrum".into()),
                    ("equilibrium", eq.kind.to_string()),
                    ("r_Q0", num(report.r_q0)),
                    ("lambda0", num(report.lambda0)),
                    ("dominant_real_eigenvalue", opt_num(report.dominant_real_eigenvalue)),
                ],
            )?;
            Ok(EXIT_OK)
        }
        Command::Verdict => {
            let eq = config.equilibrium()?;
            let report = if eq.is_trivial() {
                let mut r = verdict_trivial(spec, config.band)?;
                let lin = build_linearization(&eq, spec)?;
                r.lambda0 = SpectralContext::new(&lin, spec)?.find_lambda0().ok();
                r
            } else {
                verdict_equilibrium(&eq, spec, config.band, config.scan)?
            };
            let mut report = report;
            report.norm_kind = config.norm;
            fs::write(out.join("report.txt"), format!("command=verdict\nequilibrium={}\n{}", eq.kind, report.to_key_values()))?;
            if strict && report.verdict == Verdict::Inconclusive {
                eprintln!("verdict inconclusive: {}", report.notes.join("; "));
                return Ok(EXIT_INCONCLUSIVE);
            }
            Ok(EXIT_OK)
        }
        Command::Verify => {
            let eq = config.equilibrium()?;
            let sim = verify_by_simulation(&eq, spec, config.epsilon, config.horizon, config.norm)?;
            let mut s = String::from("t,deviation\n");
            for (t, d) in &sim.series {
                let _ = writeln!(s, "{},{}", num(*t), num(*d));
            }
            fs::write(out.join("deviation.csv"), s)?;
            write_report(
                out,
                &[
                    ("command", "verify".into()),
                    ("equilibrium", eq.kind.to_string()),
                    ("epsilon", num(config.epsilon)),
                    ("norm_kind", config.norm.to_string()),
                    ("simulated_rate", num(sim.rate)),
                    ("blew_up", sim.blew_up.to_string()),
                ],
            )?;
            Ok(EXIT_OK)
        }
        Command::Sweep => {
            let rows = sweep(config)?;
            let mut s = String::from("value,r_Q0,lambda0,verdict\n");
            for r in &rows {
                let _ = writeln!(s, "{},{},{},{}", num(r.value), num(r.r_q0), opt_num(r.lambda0), r.verdict);
            }
            fs::write(out.join("sweep.csv"), s)?;
            if strict && rows.iter().any(|r| r.verdict == Verdict::Inconclusive) {
                return Ok(EXIT_INCONCLUSIVE);
            }
            Ok(EXIT_OK)
        }
    }
}

/// Entry point; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("cannot configure {n} threads: {e}");
            return EXIT_USAGE;
        }
    }
    let (forced, path) = match &cli.command {
        CommandArg::Simulate { config } => (Some(Command::Simulate), config),
        CommandArg::Equilibrium { config } => (Some(Command::Equilibrium), config),
        CommandArg::Spectrum { config } => (Some(Command::Spectrum), config),
        CommandArg::Verdict { config } => (Some(Command::Verdict), config),
        CommandArg::Verify { config } => (Some(Command::Verify), config),
        CommandArg::Sweep { config } => (Some(Command::Sweep), config),
        CommandArg::Run { config } => (None, config),
    };
    let config = match load_config(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    let Some(command) = forced.or(config.command) else {
        eprintln!("{}: no command given and [run] has no `command`", path.display());
        return EXIT_USAGE;
    };
    if command == Command::Sweep && config.sweep.is_none() {
        eprintln!("{}: missing section [sweep]", path.display());
        return EXIT_USAGE;
    }
    match execute(command, &config, &cli.output, cli.strict) {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("{}: {m}", path.display());
            EXIT_USAGE
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("{}: numerical failure: {m}", path.display());
            EXIT_NUMERICAL
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[grid]
length = 1.0
n_x = 11
boundary = "neumann"

[age]
a_max = 2.0
n_a = 40

[rates]
m = "1"
b = "param:b0"
d = "0.1"

[params]
b0 = 2.0
"#;

    #[test]
    fn parses_defaults() {
        let c = parse_config("base.toml", BASE).unwrap();
        assert_eq!(c.model.n_x(), 11);
        assert_eq!(c.model.n_age_nodes(), 41);
        assert_eq!(c.model.n_substeps(), DEFAULT_SUBSTEPS);
        assert_eq!(c.horizon, 10.0);
        assert_eq!(c.epsilon, 0.05);
        assert_eq!(c.band, DEFAULT_BAND);
        assert_eq!(c.equilibrium, EquilibriumChoice::Trivial);
        assert_eq!(c.amplitude, (0.0, 10.0));
        assert_eq!(c.norm, NormKind::L1AgeSupSpace);
        assert!(c.command.is_none() && c.scan.is_none() && c.sweep.is_none());
        assert_eq!(c.model.rate(crate::model::Rate::B, 0.0, 0.0, 0.0).unwrap(), 2.0);
        assert!(c.initial_state().unwrap().values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn run_section() {
        let text = format!(
            "{BASE}\n[run]\ncommand = \"spectrum\"\nequilibrium = \"shooting\"\namplitude = [0.5, 3.0]\nlambda_min = -2.0\nlambda_max = 1.0\nn_scan = 7\nnorm = \"L1_age_L2_space\"\nu0 = \"exp(-a)*x\"\nn_substeps = 4\n"
        );
        let c = parse_config("run.toml", &text).unwrap();
        assert_eq!(c.command, Some(Command::Spectrum));
        assert_eq!(c.equilibrium, EquilibriumChoice::Shooting);
        assert_eq!(c.amplitude, (0.5, 3.0));
        assert_eq!(c.scan, Some(Scan { lambda_min: -2.0, lambda_max: 1.0, n: 7 }));
        assert_eq!(c.norm, NormKind::L1AgeL2Space);
        assert_eq!(c.model.n_substeps(), 4);
        let u = c.initial_state().unwrap();
        assert!((u.get(40, 10) - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn missing_section_is_named() {
        let text = BASE.replace("[age]\na_max = 2.0\nn_a = 40\n", "");
        let e = parse_config("cfg.toml", &text).unwrap_err();
        assert_eq!(e.message, "cfg.toml: missing section [age]");
    }

    #[test]
    fn diagnostics_carry_positions() {
        let e = parse_config("cfg.toml", &BASE.replace("n_x = 11", "n_x = 11\nspacing = 3")).unwrap_err();
        assert!(e.message.starts_with("cfg.toml:5:1:"), "{}", e.message);
        let e = parse_config("cfg.toml", &BASE.replace("m = \"1\"", "m = \"1 + * z\"")).unwrap_err();
        assert!(e.message.starts_with("cfg.toml:12:10:"), "{}", e.message);
        assert!(e.message.contains("`m`"));
        let e = parse_config("cfg.toml", &BASE.replace("\"neumann\"", "\"periodic\"")).unwrap_err();
        assert!(e.message.starts_with("cfg.toml:5:12:") && e.message.contains("periodic"), "{}", e.message);
        let e = parse_config("cfg.toml", &format!("{BASE}\n[run]\ncommand = \"fly\"\n")).unwrap_err();
        assert!(e.message.contains("unknown command `fly`"));
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let e = parse_config("cfg.toml", &BASE.replace("b0 = 2.0", "c0 = 2.0")).unwrap_err();
        assert!(e.message.contains("b0"), "{}", e.message);
        let text = format!("{BASE}\n[sweep]\nparam = \"q\"\nfrom = 0.0\nto = 1.0\nsteps = 3\n");
        assert!(parse_config("cfg.toml", &text).unwrap_err().message.contains("unknown sweep parameter `q`"));
    }

    #[test]
    fn sweep_rows() {
        let text = format!("{BASE}\n[sweep]\nparam = \"b0\"\nfrom = 0.5\nto = 2.0\nsteps = 4\n");
        let c = parse_config("cfg.toml", &text).unwrap();
        let rows = sweep(&c).unwrap();
        assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![0.5, 1.0, 1.5, 2.0]);
        assert!(rows.windows(2).all(|p| p[1].r_q0 > p[0].r_q0));
        for r in &rows {
            let l0 = r.lambda0.unwrap();
            assert_eq!(r.r_q0 > 1.0, l0 > 0.0);
            assert_eq!(r.verdict == Verdict::Unstable, r.r_q0 > 1.0 + DEFAULT_BAND);
        }
        let changed = c.with_param("b0", 7.0).unwrap();
        assert_eq!(changed.rate(crate::model::Rate::B, 0.0, 1.0, 0.5).unwrap(), 7.0);
    }
}
