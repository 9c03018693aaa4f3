//! Command-line front end.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::backtest::{self, load_prices, metrics, write_ledger, write_metrics, BacktestError, PriceTable};
use crate::config::{ModeName, RunManifest};
use crate::error::MpcError;
use crate::estimation::{classify_regimes, expected_returns, simple_returns};
use crate::markov_chain::estimate_transition_matrix;
use crate::synthetic::simulate_market;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;
pub const EXIT_BANKRUPT: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "regime-mpc",
    version,
    about = "Receding-horizon benchmark tracking in regime-switching markets",
    after_help = "Settings are taken from flags first, then the --config manifest, then built-in \
defaults (the MICEX run: m=10, rho=0.1, R=1e-4 I, mu0=0.0015, beta=-0.6, gamma=3, c=0.0006, \
threshold 0.015, regime volatilities 0.01/0.02, 13-day means, 200-day transition window, r1=r2=0).\n\n\
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 solver error, 5 bankruptcy."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run manifest.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for synthetic data.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Prediction horizon m.
    #[arg(long, global = true, value_name = "M")]
    pub horizon: Option<usize>,
    /// Price CSV (overrides `data.prices`).
    #[arg(long, global = true, value_name = "PATH")]
    pub prices: Option<PathBuf>,
    /// Reject rows with missing prices.
    #[arg(long, global = true, conflicts_with = "lenient_data")]
    pub strict_data: bool,
    /// Forward-fill missing prices and report the filled cells.
    #[arg(long, global = true)]
    pub lenient_data: bool,
    #[arg(long, global = true, value_enum, value_name = "MODE")]
    pub constraint_mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    FirstBlock,
    FullHorizon,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the controller over a price file; writes ledger.csv and metrics.txt.
    Backtest,
    /// Generate a synthetic price file (prices.csv) and its regimes (regimes.csv).
    Simulate {
        /// Number of closes (overrides `simulate.days`).
        #[arg(long)]
        days: Option<usize>,
    },
    /// Classify regimes over the whole file and print the transition
    /// estimate and the current expected returns; also writes estimate.txt.
    Estimate,
}

/// Error with its exit category.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl From<BacktestError> for CliError {
    fn from(e: BacktestError) -> Self {
        let code = match &e {
            BacktestError::Data(_) | BacktestError::Warmup { .. } => EXIT_DATA,
            BacktestError::Config(_) => EXIT_CONFIG,
            BacktestError::Step { source: MpcError::Solver(_), .. } => EXIT_SOLVER,
            BacktestError::Step { source: MpcError::Model(_), .. } => EXIT_SOLVER,
            BacktestError::Bankruptcy { .. } => EXIT_BANKRUPT,
        };
        Self { code, message: format!("backtest: {e}") }
    }
}

/// Manifest after flag overrides.
pub fn resolve(cli: &Cli) -> Result<RunManifest, CliError> {
    let mut m = match &cli.config {
        Some(path) => RunManifest::load(path).map_err(CliError::config)?,
        None => RunManifest::default(),
    };
    if let Some(out) = &cli.out {
        m.output.dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        m.seed = seed;
    }
    if let Some(h) = cli.horizon {
        m.controller.horizon = h;
    }
    if let Some(p) = &cli.prices {
        m.data.prices = Some(p.clone());
    }
    if cli.strict_data {
        m.data.lenient = false;
    }
    if cli.lenient_data {
        m.data.lenient = true;
    }
    if let Some(mode) = cli.constraint_mode {
        m.controller.constraint_mode = match mode {
            ModeArg::FirstBlock => ModeName::FirstBlock,
            ModeArg::FullHorizon => ModeName::FullHorizon,
        };
    }
    m.validate().map_err(|e| CliError::config(format!("manifest: {e}")))?;
    Ok(m)
}

fn load_table(m: &RunManifest) -> Result<PriceTable, CliError> {
    let path = m
        .data
        .prices
        .as_ref()
        .ok_or_else(|| CliError::config("no price file: set data.prices or pass --prices"))?;
    let table = load_prices(path, &m.schema()).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    for (row, column) in table.filled() {
        log::warn!("{}: row {row}, column `{column}` forward-filled", path.display());
    }
    Ok(table)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn write_outputs(dir: &Path, ledger: &backtest::Ledger) -> Result<backtest::Metrics, CliError> {
    write_ledger(ledger, create(dir, "ledger.csv")?).map_err(|e| CliError::data(e.to_string()))?;
    let report = metrics(ledger);
    write_metrics(&report, create(dir, "metrics.txt")?).map_err(|e| CliError::data(e.to_string()))?;
    Ok(report)
}

pub fn cmd_backtest(m: &RunManifest) -> Result<(), CliError> {
    let table = load_table(m)?;
    let cfg = m
        .backtest_config(table.assets().len())
        .map_err(|e| CliError::config(format!("manifest: {e}")))?;
    match backtest::run(&table, &cfg) {
        Ok(ledger) => {
            let report = write_outputs(&m.output.dir, &ledger)?;
            println!(
                "{} decisions, terminal wealth {:.6}, benchmark {:.6}, total cost {:.6}",
                report.decisions, report.terminal_wealth, report.terminal_benchmark, report.total_cost
            );
            println!("wrote {}", m.output.dir.display());
            Ok(())
        }
        Err(BacktestError::Bankruptcy { date, wealth, ledger }) => {
            write_outputs(&m.output.dir, &ledger)?;
            Err(BacktestError::Bankruptcy { date, wealth, ledger }.into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_simulate(m: &RunManifest, days: Option<usize>) -> Result<(), CliError> {
    let market = m.synthetic_market().map_err(|e| CliError::config(format!("simulate: {e}")))?;
    let days = days.unwrap_or(m.simulate.days);
    let path = simulate_market(&market, days, m.seed).map_err(|e| CliError::config(format!("simulate: {e}")))?;
    path.table
        .write_csv(create(&m.output.dir, "prices.csv")?)
        .map_err(|e| CliError::data(e.to_string()))?;
    let mut w = csv::Writer::from_writer(create(&m.output.dir, "regimes.csv")?);
    let io = |e: csv::Error| CliError::data(e.to_string());
    w.write_record(["date", "regime"]).map_err(io)?;
    for (date, q) in path.table.dates().iter().zip(&path.regimes) {
        w.write_record([date.to_string(), (q + 1).to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::data(e.to_string()))?;
    println!("wrote {} days to {}", days, m.output.dir.display());
    Ok(())
}

pub fn estimate_report(m: &RunManifest, table: &PriceTable) -> Result<String, CliError> {
    let cfg = m.estimation_config();
    cfg.validate().map_err(|e| CliError::config(format!("estimation: {e}")))?;
    let returns = simple_returns(table.index());
    let regimes = classify_regimes(&returns, &cfg).map_err(|e| CliError::data(format!("estimate: {e}")))?;
    let est = estimate_transition_matrix(&regimes, 2).map_err(|e| CliError::data(format!("estimate: {e}")))?;
    let mu = expected_returns(table.closes(), cfg.ma_window, table.len())
        .map_err(|e| CliError::data(format!("estimate: {e}")))?;

    let mut s = String::new();
    let counts = regimes.occupancy();
    let _ = writeln!(s, "days = {}", regimes.len());
    for (q, c) in counts.iter().enumerate() {
        let _ = writeln!(s, "regime_{}_days = {c}", q + 1);
    }
    let p = est.matrix.matrix();
    for r in 0..p.nrows() {
        let row: Vec<String> = (0..p.ncols()).map(|c| format!("{:.6}", p[(r, c)])).collect();
        let _ = writeln!(s, "P[{}] = {}", r + 1, row.join(" "));
    }
    for (i, name) in table.assets().iter().enumerate() {
        let _ = writeln!(s, "mu[{name}] = {}", backtest::format_number(mu[i]));
    }
    for q in &est.unvisited {
        let _ = writeln!(s, "warning: regime {} never left; column set to a self-loop", q + 1);
    }
    Ok(s)
}

pub fn cmd_estimate(m: &RunManifest) -> Result<(), CliError> {
    let table = load_table(m)?;
    let report = estimate_report(m, &table)?;
    print!("{report}");
    for line in report.lines().filter(|l| l.starts_with("warning")) {
        eprintln!("{line}");
    }
    use std::io::Write;
    create(&m.output.dir, "estimate.txt")?
        .write_all(report.as_bytes())
        .map_err(|e| CliError::data(e.to_string()))
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let m = resolve(cli)?;
    match &cli.command {
        Command::Backtest => cmd_backtest(&m),
        Command::Simulate { days } => cmd_simulate(&m, *days),
        Command::Estimate => cmd_estimate(&m),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
