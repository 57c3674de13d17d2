use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ldpmean::harness::{audit_all, run_trials, Execution, ExperimentResult, ExperimentSpec, DEFAULT_AUDIT_EPS};
use ldpmean::protocols::{ConstantsProfile, SubgroupSizes};
use ldpmean::{plan_partition, replay, simulate, Error, ProtocolConfig, ProtocolId, SimulationTruth, Transcript, VarianceMode};
use serde::Deserialize;

const OUT_DIR_ENV: &str = "LDPMEAN_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "ldpmean", version, about = "Locally private Gaussian mean estimation simulator")]
struct Cli {
    /// Print plan details and warnings to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one protocol configuration for a number of trials.
    Simulate(SimulateArgs),
    /// Run a grid of configurations and fit the error slope against n.
    Sweep(SweepArgs),
    /// Check every randomizer's privacy bound analytically.
    Audit(AuditArgs),
    /// Recompute the analyst outputs of a transcript and compare them with the recorded ones.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Default, Clone)]
struct CommonArgs {
    /// Flat JSON object with the same keys as the flags (underscores for dashes).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Population scale; also the known scale for kv1/kv2.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    /// First-round subgroup size.
    #[arg(long)]
    k: Option<usize>,
    /// Alias of --k for the unknown-variance protocols.
    #[arg(long)]
    k1: Option<usize>,
    /// One-round second-half group size.
    #[arg(long)]
    k2: Option<usize>,
    /// Number of first-round levels; sets k = (n/2)/levels.
    #[arg(long)]
    levels: Option<usize>,
    /// Constant of the default subgroup size.
    #[arg(long)]
    c_k: Option<f64>,
    /// Use the subgroup sizes and thresholds from the accuracy proofs.
    #[arg(long)]
    paper_constants: bool,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $LDPMEAN_OUT_DIR, else the working directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fill the wall_ms columns. Timed tables are not reproducible.
    #[arg(long)]
    timing: bool,
    /// Run trials on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_parser = parse_count)]
    n: Option<usize>,
    /// Write the JSON-lines transcript of trial 0 here.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Population sizes, e.g. 2^14,2^15,2^16.
    #[arg(long, value_delimiter = ',', value_parser = parse_count)]
    n_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    eps_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    mu_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    sigma_grid: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Privacy budgets to audit.
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    #[arg(long, hide = true)]
    inject_faulty: bool,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    transcript: PathBuf,
}

/// Keys accepted in a `--config` file.
#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    protocol: Option<String>,
    n: Option<usize>,
    eps: Option<f64>,
    beta: Option<f64>,
    mu: Option<f64>,
    sigma: Option<f64>,
    sigma_min: Option<f64>,
    sigma_max: Option<f64>,
    k: Option<usize>,
    k1: Option<usize>,
    k2: Option<usize>,
    levels: Option<usize>,
    c_k: Option<f64>,
    paper_constants: Option<bool>,
    trials: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    n_grid: Option<Vec<usize>>,
    eps_grid: Option<Vec<f64>>,
    mu_grid: Option<Vec<f64>>,
    sigma_grid: Option<Vec<f64>>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Configuration(_) | Error::InvalidParameter(_) | Error::MalformedInput(_) => Failure::Usage(e.to_string()),
            Error::ReplayMismatch(_) => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn parse_count(s: &str) -> std::result::Result<usize, String> {
    let s = s.trim();
    if let Some((base, exp)) = s.split_once('^') {
        let base: usize = base.trim().parse().map_err(|e| format!("{s}: {e}"))?;
        let exp: u32 = exp.trim().parse().map_err(|e| format!("{s}: {e}"))?;
        base.checked_pow(exp).ok_or_else(|| format!("{s} overflows"))
    } else {
        s.parse().map_err(|e| format!("{s}: {e}"))
    }
}

fn load_file(path: &Option<PathBuf>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Flags merged over the file, with defaults filled in.
struct Resolved {
    config: ProtocolConfig,
    mu: f64,
    sigma: f64,
    trials: usize,
    seed: u64,
    out: PathBuf,
    timing: bool,
    execution: Execution,
}

fn resolve(common: &CommonArgs, file: &FileConfig, n: Option<usize>) -> CliResult<Resolved> {
    let protocol: ProtocolId = common
        .protocol
        .clone()
        .or(file.protocol.clone())
        .ok_or_else(|| Failure::Usage("--protocol is required (kv2, kv1, uv2 or uv1)".into()))?
        .parse()
        .map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let eps = common.eps.or(file.eps).unwrap_or(1.0);
    let beta = common.beta.or(file.beta).unwrap_or(0.05);
    let mu = common.mu.or(file.mu).unwrap_or(0.0);
    let sigma = common.sigma.or(file.sigma).unwrap_or(1.0);
    let sigma_min = common.sigma_min.or(file.sigma_min);
    let sigma_max = common.sigma_max.or(file.sigma_max);
    let variance = if protocol.known_variance() {
        if sigma_min.is_some() || sigma_max.is_some() {
            return Err(Failure::Usage(format!(
                "{protocol} uses a known sigma; --sigma-min/--sigma-max apply to uv1 and uv2 only"
            )));
        }
        VarianceMode::KnownSigma { sigma }
    } else {
        match (sigma_min, sigma_max) {
            (Some(sigma_min), Some(sigma_max)) => VarianceMode::BoundedSigma { sigma_min, sigma_max },
            _ => return Err(Failure::Usage(format!("{protocol} needs --sigma-min and --sigma-max"))),
        }
    };
    let k = common.k.or(file.k);
    let k1 = common.k1.or(file.k1);
    if let (Some(a), Some(b)) = (k, k1) {
        if a != b {
            return Err(Failure::Usage(format!("--k {a} and --k1 {b} disagree")));
        }
    }
    let sizes = SubgroupSizes {
        k: k.or(k1),
        levels: common.levels.or(file.levels),
        k2: common.k2.or(file.k2),
    };
    let paper = common.paper_constants || file.paper_constants.unwrap_or(false);
    let mut config = ProtocolConfig::new(protocol, n.or(file.n).unwrap_or(0), eps, beta, variance, 0);
    config.sizes = sizes;
    config.profile = if paper { ConstantsProfile::Paper } else { ConstantsProfile::Desk };
    if let Some(c_k) = common.c_k.or(file.c_k) {
        config.c_k = c_k;
    }
    let out = common
        .out
        .clone()
        .or(file.out.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(Resolved {
        config,
        mu,
        sigma,
        trials: common.trials.or(file.trials).unwrap_or(1),
        seed: common.seed.or(file.seed).unwrap_or(0),
        out,
        timing: common.timing,
        execution: if common.sequential { Execution::Sequential } else { Execution::default() },
    })
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_tables(result: &ExperimentResult, out: &Path, timing: bool) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let results = out.join("results.csv");
    let file = fs::File::create(&results).map_err(|e| io_failure(&results, e))?;
    result
        .write_results_csv(BufWriter::new(file), timing)
        .map_err(|e| io_failure(&results, e))?;
    let summary = out.join("summary.csv");
    let file = fs::File::create(&summary).map_err(|e| io_failure(&summary, e))?;
    result
        .write_summary_csv(BufWriter::new(file), timing)
        .map_err(|e| io_failure(&summary, e))?;
    Ok(())
}

fn print_cells(result: &ExperimentResult) {
    for c in &result.cells {
        let mut line = format!(
            "{} n={} eps={} mu={} sigma={} trials={} median={} p90={} p95={} mean={} mu_hat1_coverage={}",
            result.protocol,
            c.cell.n,
            c.cell.eps,
            c.cell.mu,
            c.cell.sigma,
            c.errors.len(),
            c.summary.p50,
            c.summary.p90,
            c.summary.p95,
            c.summary.mean,
            c.mu_coverage
        );
        if let Some(s) = c.sigma_coverage {
            line.push_str(&format!(" sigma_hat_coverage={s}"));
        }
        println!("{line}");
    }
}

fn report_plan(verbose: bool, spec: &ExperimentSpec) -> CliResult<()> {
    for cell in spec.cells() {
        let config = spec.cell_config(&cell);
        let plan = plan_partition(&config)?;
        if let Some(w) = plan.range_warning(cell.mu) {
            eprintln!("warning: {w}");
        }
        for w in &plan.warnings {
            eprintln!("warning: {w}");
        }
        if verbose {
            eprintln!(
                "plan n={}: levels [{}, {}] of k={}, groups={}, k2={:?}, discarded={}",
                cell.n,
                plan.levels.l_min,
                plan.levels.l_max,
                plan.levels.k,
                plan.group_count(),
                plan.k2(),
                plan.discarded()
            );
        }
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, verbose: bool) -> CliResult<()> {
    let file = load_file(&args.common.config)?;
    let r = resolve(&args.common, &file, args.n)?;
    if r.config.n == 0 {
        return Err(Failure::Usage("--n is required".into()));
    }
    let spec = ExperimentSpec {
        base: r.config.clone(),
        n_grid: vec![r.config.n],
        eps_grid: vec![r.config.eps],
        mu_grid: vec![r.mu],
        sigma_grid: vec![r.sigma],
        trials: r.trials,
        seed: r.seed,
    };
    report_plan(verbose, &spec)?;
    let result = run_trials(&spec, r.execution)?;
    write_tables(&result, &r.out, r.timing)?;
    if let Some(path) = &args.transcript {
        let cell = spec.cells()[0];
        let truth = SimulationTruth { mu: r.mu, sigma: r.sigma };
        let (_, transcript) = simulate(&spec.cell_config(&cell), &truth, 0)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| io_failure(path, e))?;
        transcript
            .write_jsonl(BufWriter::new(file))
            .map_err(|e| io_failure(path, e))?;
    }
    print_cells(&result);
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, verbose: bool) -> CliResult<()> {
    let file = load_file(&args.common.config)?;
    let n_grid = args
        .n_grid
        .clone()
        .or(file.n_grid.clone())
        .ok_or_else(|| Failure::Usage("--n-grid is required".into()))?;
    let r = resolve(&args.common, &file, n_grid.first().copied())?;
    let spec = ExperimentSpec {
        base: r.config.clone(),
        n_grid,
        eps_grid: args.eps_grid.clone().or(file.eps_grid.clone()).unwrap_or(vec![r.config.eps]),
        mu_grid: args.mu_grid.clone().or(file.mu_grid.clone()).unwrap_or(vec![r.mu]),
        sigma_grid: args.sigma_grid.clone().or(file.sigma_grid.clone()).unwrap_or(vec![r.sigma]),
        trials: r.trials,
        seed: r.seed,
    };
    report_plan(verbose, &spec)?;
    let result = run_trials(&spec, r.execution)?;
    write_tables(&result, &r.out, r.timing)?;
    print_cells(&result);
    for fit in result.slopes() {
        let slope = fit.slope.map_or("absent".to_string(), |s| s.to_string());
        println!("slope eps={} mu={} sigma={}: {slope}", fit.eps, fit.mu, fit.sigma);
    }
    Ok(())
}

fn cmd_audit(args: &AuditArgs) -> CliResult<()> {
    let eps_list = args.eps.clone().unwrap_or(DEFAULT_AUDIT_EPS.to_vec());
    let findings = audit_all(&eps_list, args.inject_faulty)?;
    let mut violations = Vec::new();
    for f in &findings {
        let tight = match f.tight {
            Some(true) => " tight",
            Some(false) => " loose",
            None => "",
        };
        let verdict = if f.within_bound { "ok" } else { "VIOLATION" };
        println!("{} eps={} value={} bound={} {verdict}{tight}", f.randomizer, f.eps, f.value, f.bound);
        if !f.within_bound {
            violations.push(format!("{} at eps={}: {} > {}", f.randomizer, f.eps, f.value, f.bound));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("privacy bound violated: {}", violations.join("; "))))
    }
}

fn cmd_replay(args: &ReplayArgs) -> CliResult<()> {
    let path = &args.transcript;
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let transcript = Transcript::parse(&text)?;
    let outcome = replay(&transcript)?;
    let sigma = outcome.sigma_hat.map_or(String::new(), |s| format!(" sigma_hat={s}"));
    println!(
        "replay ok: {} mu_hat1={}{sigma} mu_hat2={} ({} reports)",
        outcome.protocol,
        outcome.mu_hat1,
        outcome.mu_hat2,
        transcript.report_count()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, cli.verbose),
        Command::Sweep(a) => cmd_sweep(a, cli.verbose),
        Command::Audit(a) => cmd_audit(a),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
