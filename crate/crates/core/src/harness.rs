//! Monte Carlo experiments, error statistics, analytic privacy audits and
//! result tables.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::derive_seed;
use crate::protocols::analysis::validate_structure;
use crate::protocols::{plan_partition, simulate, ProtocolConfig, ProtocolId, SimulationTruth, VarianceMode};
use crate::randomizers::{lattice_residual, rr1_distribution, sign_distribution, sign_of, LatticeSpec};

/// A grid of cells, each run for `trials` independent trials.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    /// Protocol, β, sizing and (for unknown variance) the σ range. Its `n`,
    /// `eps`, known σ and seed are replaced per cell.
    pub base: ProtocolConfig,
    pub n_grid: Vec<usize>,
    pub eps_grid: Vec<f64>,
    pub mu_grid: Vec<f64>,
    pub sigma_grid: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

/// One grid point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub n: usize,
    pub eps: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.n_grid.is_empty() || self.eps_grid.is_empty() || self.mu_grid.is_empty() || self.sigma_grid.is_empty() {
            return Err(Error::config("every grid axis needs at least one value"));
        }
        Ok(())
    }

    /// Cells in `n`-major order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &n in &self.n_grid {
            for &eps in &self.eps_grid {
                for &mu in &self.mu_grid {
                    for &sigma in &self.sigma_grid {
                        cells.push(Cell {
                            index: cells.len(),
                            n,
                            eps,
                            mu,
                            sigma,
                        });
                    }
                }
            }
        }
        cells
    }

    pub fn cell_config(&self, cell: &Cell) -> ProtocolConfig {
        let mut config = self.base.clone();
        config.n = cell.n;
        config.eps = cell.eps;
        config.master_seed = derive_seed(self.seed, cell.index as u64);
        if let VarianceMode::KnownSigma { .. } = config.variance {
            config.variance = VarianceMode::KnownSigma { sigma: cell.sigma };
        }
        config
    }
}

/// One protocol execution.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub protocol: ProtocolId,
    pub cell: Cell,
    pub trial: usize,
    pub mu_hat1: f64,
    pub sigma_hat: Option<f64>,
    pub mu_hat2: f64,
    pub abs_error: f64,
    pub wall_ms: f64,
    pub subgroup: Option<String>,
    /// The transcript matched the plan: one message per queried user, right subgroups and rounds.
    pub structure_ok: bool,
}

/// Nearest-rank quantiles and the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorSummary {
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub mean: f64,
}

/// Element of rank `⌈p·N⌉` (1-based) of an ascending slice.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn error_summary(errors: &[f64]) -> Result<ErrorSummary> {
    if errors.is_empty() {
        return Err(Error::malformed("error summary of an empty list"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ErrorSummary {
        p50: nearest_rank(&sorted, 0.5),
        p90: nearest_rank(&sorted, 0.9),
        p95: nearest_rank(&sorted, 0.95),
        mean: errors.iter().sum::<f64>() / errors.len() as f64,
    })
}

/// Per-cell aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct CellStats {
    pub cell: Cell,
    /// `|μ̂₂ − μ|` in trial order.
    pub errors: Vec<f64>,
    pub summary: ErrorSummary,
    /// Fraction of trials with `|μ̂₁ − μ| ≤ 2σ`.
    pub mu_coverage: f64,
    /// Fraction of trials with `σ̂ ∈ [σ, 8σ]`, for unknown variance.
    pub sigma_coverage: Option<f64>,
    pub mean_wall_ms: f64,
    pub structure_ok: bool,
}

/// Least-squares slope of `ln error` against `ln n` for one `(eps, mu, sigma)` series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlopeFit {
    pub eps: f64,
    pub mu: f64,
    pub sigma: f64,
    pub slope: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub protocol: ProtocolId,
    pub records: Vec<TrialRecord>,
    pub cells: Vec<CellStats>,
}

/// How trials are scheduled. Results do not depend on the choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Data-parallel over all `(cell, trial)` pairs; sequential when built without the `parallel` feature.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

fn annotate(e: Error, cell: &Cell) -> Error {
    let ctx = format!("cell n={} eps={} mu={} sigma={}", cell.n, cell.eps, cell.mu, cell.sigma);
    match e {
        Error::InvalidParameter(m) => Error::InvalidParameter(format!("{ctx}: {m}")),
        Error::MalformedInput(m) => Error::MalformedInput(format!("{ctx}: {m}")),
        Error::Configuration(m) => Error::Configuration(format!("{ctx}: {m}")),
        Error::ReplayMismatch(m) => Error::ReplayMismatch(format!("{ctx}: {m}")),
    }
}

/// Runs trial `trial` of `cell`.
pub fn run_cell_trial(spec: &ExperimentSpec, cell: &Cell, trial: usize) -> Result<TrialRecord> {
    let config = spec.cell_config(cell);
    let truth = SimulationTruth {
        mu: cell.mu,
        sigma: cell.sigma,
    };
    let start = Instant::now();
    let (outcome, transcript) = simulate(&config, &truth, trial as u64).map_err(|e| annotate(e, cell))?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let plan = plan_partition(&config).map_err(|e| annotate(e, cell))?;
    let structure_ok = validate_structure(&plan, &transcript).is_ok() && transcript.rounds() == config.protocol.rounds();
    Ok(TrialRecord {
        protocol: config.protocol,
        cell: *cell,
        trial,
        mu_hat1: outcome.mu_hat1,
        sigma_hat: outcome.sigma_hat,
        mu_hat2: outcome.mu_hat2,
        abs_error: (outcome.mu_hat2 - cell.mu).abs(),
        wall_ms,
        subgroup: outcome.subgroup,
        structure_ok,
    })
}

/// Runs every `(cell, trial)` pair and aggregates per cell. Deterministic given `spec.seed`.
pub fn run_trials(spec: &ExperimentSpec, execution: Execution) -> Result<ExperimentResult> {
    spec.validate()?;
    let cells = spec.cells();
    for cell in &cells {
        plan_partition(&spec.cell_config(cell)).map_err(|e| annotate(e, cell))?;
    }
    let jobs: Vec<(Cell, usize)> = cells
        .iter()
        .flat_map(|c| (0..spec.trials).map(move |t| (*c, t)))
        .collect();
    let run = |(cell, trial): (Cell, usize)| run_cell_trial(spec, &cell, trial);
    let results: Vec<Result<TrialRecord>> = match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => jobs.into_par_iter().map(run).collect(),
        _ => jobs.into_iter().map(run).collect(),
    };
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut stats = Vec::with_capacity(cells.len());
    for (cell, chunk) in cells.iter().zip(records.chunks(spec.trials)) {
        let errors: Vec<f64> = chunk.iter().map(|r| r.abs_error).collect();
        let trials = chunk.len() as f64;
        let mu_coverage = chunk.iter().filter(|r| (r.mu_hat1 - cell.mu).abs() <= 2.0 * cell.sigma).count() as f64 / trials;
        let sigma_coverage = chunk[0].sigma_hat.map(|_| {
            chunk
                .iter()
                .filter(|r| r.sigma_hat.is_some_and(|s| s >= cell.sigma && s <= 8.0 * cell.sigma))
                .count() as f64
                / trials
        });
        stats.push(CellStats {
            cell: *cell,
            summary: error_summary(&errors)?,
            errors,
            mu_coverage,
            sigma_coverage,
            mean_wall_ms: chunk.iter().map(|r| r.wall_ms).sum::<f64>() / trials,
            structure_ok: chunk.iter().all(|r| r.structure_ok),
        });
    }
    Ok(ExperimentResult {
        protocol: spec.base.protocol,
        records,
        cells: stats,
    })
}

/// Least-squares slope through `(ln x, ln y)`; `None` with fewer than two distinct `x` or a non-positive value.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let m = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

#[derive(Serialize)]
struct ResultRow<'a> {
    protocol: &'a str,
    n: usize,
    eps: f64,
    mu: f64,
    sigma: f64,
    trial: usize,
    mu_hat1: f64,
    sigma_hat: Option<f64>,
    mu_hat2: f64,
    abs_error: f64,
    wall_ms: Option<f64>,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    protocol: &'a str,
    n: usize,
    eps: f64,
    mu: f64,
    sigma: f64,
    trials: usize,
    median: f64,
    p90: f64,
    p95: f64,
    mean: f64,
    mu_hat1_coverage: f64,
    sigma_hat_coverage: Option<f64>,
    mean_wall_ms: Option<f64>,
    structure_ok: bool,
}

fn csv_error(e: csv::Error) -> Error {
    Error::malformed(format!("writing table: {e}"))
}

impl ExperimentResult {
    /// Median-error slope against `n` for every `(eps, mu, sigma)` series, in first-seen order.
    pub fn slopes(&self) -> Vec<SlopeFit> {
        let mut series: BTreeMap<(usize, u64, u64, u64), Vec<(f64, f64)>> = BTreeMap::new();
        let mut order: Vec<(u64, u64, u64)> = Vec::new();
        for c in &self.cells {
            let key = (c.cell.eps.to_bits(), c.cell.mu.to_bits(), c.cell.sigma.to_bits());
            let pos = order.iter().position(|k| *k == key).unwrap_or_else(|| {
                order.push(key);
                order.len() - 1
            });
            series
                .entry((pos, key.0, key.1, key.2))
                .or_default()
                .push((c.cell.n as f64, c.summary.p50));
        }
        series
            .into_iter()
            .map(|((_, e, m, s), points)| SlopeFit {
                eps: f64::from_bits(e),
                mu: f64::from_bits(m),
                sigma: f64::from_bits(s),
                slope: loglog_slope(&points),
            })
            .collect()
    }

    pub fn cell(&self, n: usize) -> Option<&CellStats> {
        self.cells.iter().find(|c| c.cell.n == n)
    }

    /// One row per trial. `wall_ms` stays empty unless `timing` is set, so
    /// that equal seeds give byte-identical files.
    pub fn write_results_csv<W: Write>(&self, w: W, timing: bool) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(ResultRow {
                protocol: r.protocol.as_str(),
                n: r.cell.n,
                eps: r.cell.eps,
                mu: r.cell.mu,
                sigma: r.cell.sigma,
                trial: r.trial,
                mu_hat1: r.mu_hat1,
                sigma_hat: r.sigma_hat,
                mu_hat2: r.mu_hat2,
                abs_error: r.abs_error,
                wall_ms: timing.then_some(r.wall_ms),
            })
            .map_err(csv_error)?;
        }
        out.flush().map_err(|e| Error::malformed(format!("writing table: {e}")))
    }

    pub fn write_summary_csv<W: Write>(&self, w: W, timing: bool) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for c in &self.cells {
            out.serialize(SummaryRow {
                protocol: self.protocol.as_str(),
                n: c.cell.n,
                eps: c.cell.eps,
                mu: c.cell.mu,
                sigma: c.cell.sigma,
                trials: c.errors.len(),
                median: c.summary.p50,
                p90: c.summary.p90,
                p95: c.summary.p95,
                mean: c.summary.mean,
                mu_hat1_coverage: c.mu_coverage,
                sigma_hat_coverage: c.sigma_coverage,
                mean_wall_ms: timing.then_some(c.mean_wall_ms),
                structure_ok: c.structure_ok,
            })
            .map_err(csv_error)?;
        }
        out.flush().map_err(|e| Error::malformed(format!("writing table: {e}")))
    }
}

/// Discrete randomizers whose output laws are known in closed form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscreteRandomizer {
    Rr1,
    KvRr2,
    OneRoundKvRr2,
}

impl DiscreteRandomizer {
    pub const ALL: [DiscreteRandomizer; 3] = [
        DiscreteRandomizer::Rr1,
        DiscreteRandomizer::KvRr2,
        DiscreteRandomizer::OneRoundKvRr2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DiscreteRandomizer::Rr1 => "rr1",
            DiscreteRandomizer::KvRr2 => "kv_rr2",
            DiscreteRandomizer::OneRoundKvRr2 => "one_round_kv_rr2",
        }
    }
}

/// Public parameters shared by the discrete audits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscreteParams {
    pub level: i32,
    pub mu_hat1: f64,
    pub sigma: f64,
    pub lattice: LatticeSpec,
}

impl Default for DiscreteParams {
    fn default() -> Self {
        DiscreteParams {
            level: 0,
            mu_hat1: 0.3,
            sigma: 1.5,
            lattice: LatticeSpec {
                offset: 0.4,
                spacing: 6.0,
            },
        }
    }
}

/// Exact output law of `randomizer` on input `x`.
pub fn output_distribution(randomizer: DiscreteRandomizer, eps: f64, x: f64, params: &DiscreteParams) -> Vec<f64> {
    match randomizer {
        DiscreteRandomizer::Rr1 => rr1_distribution(eps, x, params.level).to_vec(),
        DiscreteRandomizer::KvRr2 => sign_distribution(eps, sign_of((x - params.mu_hat1) / params.sigma)).to_vec(),
        DiscreteRandomizer::OneRoundKvRr2 => {
            let center = params.lattice.nearest(x);
            sign_distribution(eps, sign_of((x - center) / params.sigma)).to_vec()
        }
    }
}

/// `max P[out = a | x] / P[out = a | x']` over all pairs and outputs; `∞` when some output is possible for one input only.
pub fn max_probability_ratio(distributions: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 1.0;
    for p in distributions {
        for q in distributions {
            for (&pa, &qa) in p.iter().zip(q) {
                if pa > 0.0 {
                    worst = worst.max(if qa > 0.0 { pa / qa } else { f64::INFINITY });
                }
            }
        }
    }
    worst
}

pub fn audit_privacy_discrete(randomizer: DiscreteRandomizer, eps: f64, inputs: &[f64], params: &DiscreteParams) -> f64 {
    let dists: Vec<Vec<f64>> = inputs
        .iter()
        .map(|&x| output_distribution(randomizer, eps, x, params))
        .collect();
    max_probability_ratio(&dists)
}

fn max_laplace_log_ratio(centers: &[(f64, f64)], ys: &[f64], scale: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for &(c, c2) in centers {
        for &y in ys {
            let forward = ((y - c2).abs() - (y - c).abs()) / scale;
            worst = worst.max(forward).max(-forward);
        }
    }
    worst
}

/// Largest log-density ratio of the clipped Laplace randomizer over input pairs and outputs.
pub fn audit_privacy_laplace(eps: f64, lo: f64, hi: f64, pairs: &[(f64, f64)], ys: &[f64]) -> f64 {
    let scale = (hi - lo) / eps;
    let centers: Vec<(f64, f64)> = pairs.iter().map(|&(x, x2)| (x.clamp(lo, hi), x2.clamp(lo, hi))).collect();
    max_laplace_log_ratio(&centers, ys, scale)
}

/// Same audit for the lattice-residual randomizer with scale `numerator / ε`.
pub fn audit_privacy_one_round_uv(eps: f64, lattice: &LatticeSpec, numerator: f64, pairs: &[(f64, f64)], ys: &[f64]) -> f64 {
    let centers: Vec<(f64, f64)> = pairs
        .iter()
        .map(|&(x, x2)| (lattice_residual(x, lattice), lattice_residual(x2, lattice)))
        .collect();
    max_laplace_log_ratio(&centers, ys, numerator / eps)
}

/// One audit verdict.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditFinding {
    pub randomizer: String,
    pub eps: f64,
    /// Max probability ratio (discrete) or max log-density ratio (continuous).
    pub value: f64,
    /// `e^ε` or `ε`.
    pub bound: f64,
    pub within_bound: bool,
    /// Discrete randomizers only: the bound is attained.
    pub tight: Option<bool>,
}

pub const DEFAULT_AUDIT_EPS: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 1.098_612_288_668_109_8];

fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

/// Runs every audit for every budget on fixed grids. With `faulty` the first
/// randomizer is replaced by one that always tells the truth.
pub fn audit_all(eps_list: &[f64], faulty: bool) -> Result<Vec<AuditFinding>> {
    if let Some(e) = eps_list.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::invalid(format!("audit budget must be positive and finite, got {e}")));
    }
    let params = DiscreteParams::default();
    let inputs = linspace(-20.0, 20.0, 161);
    let (lo, hi) = (-1.5, 2.5);
    let xs = linspace(-4.0, 5.0, 19);
    let pairs: Vec<(f64, f64)> = xs.iter().flat_map(|&a| xs.iter().map(move |&b| (a, b))).collect();
    let ys = linspace(-10.0, 10.0, 81);
    let lattice = LatticeSpec::new(0.5, 8.0)?;
    let numerator = 2.0 * 8.0;
    let mut out = Vec::new();
    for &eps in eps_list {
        for r in DiscreteRandomizer::ALL {
            let value = if faulty && r == DiscreteRandomizer::Rr1 {
                let dists: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|&x| {
                        let mut d = vec![0.0; 4];
                        d[crate::numerics::floor_div_mod4(x, params.level) as usize] = 1.0;
                        d
                    })
                    .collect();
                max_probability_ratio(&dists)
            } else {
                audit_privacy_discrete(r, eps, &inputs, &params)
            };
            let bound = eps.exp();
            out.push(AuditFinding {
                randomizer: r.name().to_string(),
                eps,
                value,
                bound,
                within_bound: value <= bound * (1.0 + 1e-12),
                tight: Some((value - bound).abs() <= 1e-9),
            });
        }
        for (name, value) in [
            ("uv_rr2", audit_privacy_laplace(eps, lo, hi, &pairs, &ys)),
            ("one_round_uv_rr2", audit_privacy_one_round_uv(eps, &lattice, numerator, &pairs, &ys)),
        ] {
            out.push(AuditFinding {
                randomizer: name.to_string(),
                eps,
                value,
                bound: eps,
                within_bound: value <= eps + 1e-12,
                tight: None,
            });
        }
    }
    Ok(out)
}
