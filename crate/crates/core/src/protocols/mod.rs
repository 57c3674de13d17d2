//! End-to-end protocols: user responses, rounds, broadcasts and transcripts.
//!
//! The user side reads the [`Population`]; the analyst side (`analysis`) sees
//! only the plan and the transcript, which is what makes replay possible.

pub mod analysis;
pub mod config;
pub mod plan;
pub mod population;
pub mod transcript;

pub use analysis::{replay, RoundOne};
pub use config::{ConstantsProfile, ProtocolConfig, ProtocolId, SimulationTruth, SubgroupSizes, VarianceMode};
pub use plan::{plan_partition, Assignment, PartitionPlan, RoundTwo};
pub use population::Population;
pub use transcript::{Broadcast, EstimateOutcome, Entry, Report, Transcript};

use crate::error::{Error, Result};
use crate::randomizers::{one_round_kv_rr2, one_round_uv_rr2, rr1, kv_rr2, uv_rr2};
use population::user_stream;

fn prepare(config: &ProtocolConfig, population: &Population, expected: ProtocolId) -> Result<PartitionPlan> {
    if config.protocol != expected {
        return Err(Error::config(format!("configuration names {}, not {expected}", config.protocol)));
    }
    let plan = plan_partition(config)?;
    if population.len() != config.n {
        return Err(Error::config(format!(
            "population has {} users but the configuration expects {}",
            population.len(),
            config.n
        )));
    }
    Ok(plan)
}

/// Every first-half user answers the quad randomizer for their level.
fn first_round(plan: &PartitionPlan, population: &Population, seed: u64, trial: u64, t: &mut Transcript) -> Result<()> {
    let eps = plan.levels.eps;
    for j in plan.levels.levels() {
        for user in plan.level_users(j) {
            let mut stream = user_stream(seed, trial, user);
            t.push_report(1, Report::Quad(rr1(&mut stream, user, eps, population.sample(user), j)?));
        }
    }
    Ok(())
}

fn close(plan: &PartitionPlan, r1: &RoundOne, mut t: Transcript) -> Result<(EstimateOutcome, Transcript)> {
    let outcome = analysis::finish(plan, r1, &t)?;
    t.outcome = Some(outcome.clone());
    Ok((outcome, t))
}

/// Known variance, two rounds: mean search, then sign responses centered on the broadcast `μ̂₁`.
pub fn run_kv_two_round(config: &ProtocolConfig, population: &Population, trial: u64) -> Result<(EstimateOutcome, Transcript)> {
    let plan = prepare(config, population, ProtocolId::Kv2)?;
    let mut t = Transcript::new(config.clone());
    first_round(&plan, population, config.master_seed, trial, &mut t)?;
    let r1 = analysis::round_one(&plan, &t)?;
    let broadcast = analysis::broadcast_for(&plan, &r1).expect("two-round broadcast");
    t.push_broadcast(2, broadcast);
    let Broadcast::Center { mu_hat1 } = broadcast else {
        unreachable!("known-variance broadcast is a center")
    };
    let sigma = plan.sigma.expect("known sigma");
    for user in plan.u2() {
        let mut stream = user_stream(config.master_seed, trial, user);
        let r = kv_rr2(&mut stream, user, config.eps, population.sample(user), mu_hat1, sigma)?;
        t.push_report(2, Report::Sign(r));
    }
    close(&plan, &r1, t)
}

/// Known variance, one round: the second half answers against fixed lattices.
pub fn run_kv_one_round(config: &ProtocolConfig, population: &Population, trial: u64) -> Result<(EstimateOutcome, Transcript)> {
    let plan = prepare(config, population, ProtocolId::Kv1)?;
    let mut t = Transcript::new(config.clone());
    first_round(&plan, population, config.master_seed, trial, &mut t)?;
    let RoundTwo::KvOne { lattices, .. } = &plan.round_two else {
        unreachable!("kv1 plan has lattice groups")
    };
    let sigma = plan.sigma.expect("known sigma");
    for (g, lattice) in lattices.iter().enumerate() {
        for user in plan.group_users(g) {
            let mut stream = user_stream(config.master_seed, trial, user);
            let r = one_round_kv_rr2(&mut stream, user, g, config.eps, population.sample(user), lattice, sigma)?;
            t.push_report(1, Report::Sign(r));
        }
    }
    let r1 = analysis::round_one(&plan, &t)?;
    close(&plan, &r1, t)
}

/// Unknown variance, two rounds: scale and mean search, then clipped Laplace responses.
pub fn run_uv_two_round(config: &ProtocolConfig, population: &Population, trial: u64) -> Result<(EstimateOutcome, Transcript)> {
    let plan = prepare(config, population, ProtocolId::Uv2)?;
    let mut t = Transcript::new(config.clone());
    first_round(&plan, population, config.master_seed, trial, &mut t)?;
    let r1 = analysis::round_one(&plan, &t)?;
    let broadcast = analysis::broadcast_for(&plan, &r1).expect("two-round broadcast");
    t.push_broadcast(2, broadcast);
    let Broadcast::Interval { interval_lo, interval_hi } = broadcast else {
        unreachable!("unknown-variance broadcast is an interval")
    };
    for user in plan.u2() {
        let mut stream = user_stream(config.master_seed, trial, user);
        let r = uv_rr2(&mut stream, user, config.eps, population.sample(user), interval_lo, interval_hi)?;
        t.push_report(2, Report::Real(r));
    }
    close(&plan, &r1, t)
}

/// Unknown variance, one round: the second half answers against a lattice per `(level, offset)`.
pub fn run_uv_one_round(config: &ProtocolConfig, population: &Population, trial: u64) -> Result<(EstimateOutcome, Transcript)> {
    let plan = prepare(config, population, ProtocolId::Uv1)?;
    let mut t = Transcript::new(config.clone());
    first_round(&plan, population, config.master_seed, trial, &mut t)?;
    let RoundTwo::UvOne { family, .. } = &plan.round_two else {
        unreachable!("uv1 plan has lattice groups")
    };
    for g in 0..family.group_count() {
        let (level, m) = family.group(g);
        let lattice = family.lattice(level, m);
        let numerator = family.noise_numerator(level);
        for user in plan.group_users(g) {
            let mut stream = user_stream(config.master_seed, trial, user);
            let x = population.sample(user);
            let r = one_round_uv_rr2(&mut stream, user, (level, m), config.eps, x, &lattice, numerator)?;
            t.push_report(1, Report::Real(r));
        }
    }
    let r1 = analysis::round_one(&plan, &t)?;
    close(&plan, &r1, t)
}

/// Dispatches on `config.protocol`.
pub fn run_protocol(config: &ProtocolConfig, population: &Population, trial: u64) -> Result<(EstimateOutcome, Transcript)> {
    match config.protocol {
        ProtocolId::Kv2 => run_kv_two_round(config, population, trial),
        ProtocolId::Kv1 => run_kv_one_round(config, population, trial),
        ProtocolId::Uv2 => run_uv_two_round(config, population, trial),
        ProtocolId::Uv1 => run_uv_one_round(config, population, trial),
    }
}

/// Samples a Gaussian population for `trial` and runs the configured protocol on it.
pub fn simulate(config: &ProtocolConfig, truth: &SimulationTruth, trial: u64) -> Result<(EstimateOutcome, Transcript)> {
    let population = Population::gaussian(truth, config.n, config.master_seed, trial)?;
    run_protocol(config, &population, trial)
}
