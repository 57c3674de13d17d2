//! Analyst side of the protocol engine. Inputs are the plan and the transcript,
//! never the population.

use std::collections::HashSet;

use super::config::ProtocolId;
use super::plan::{Assignment, PartitionPlan, RoundTwo};
use super::transcript::{Broadcast, EstimateOutcome, Report, Transcript};
use crate::aggregation::{kv_agg1, kv_agg2};
use crate::analyst::{est_mean, est_var, refine_known_sigma, select_subgroup_kv, select_subgroup_uv};
use crate::error::{Error, Result};
use crate::randomizers::{QuadReport, SignReport};

/// Analyst state after the first round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundOne {
    pub mu_hat1: f64,
    pub sigma_hat: Option<f64>,
}

/// `μ̂₁` (and `σ̂` for unknown variance) from the first-round quad reports.
pub fn round_one(plan: &PartitionPlan, transcript: &Transcript) -> Result<RoundOne> {
    let quads: Vec<&QuadReport> = transcript
        .reports(1)
        .filter_map(|r| match r {
            Report::Quad(q) => Some(q),
            _ => None,
        })
        .collect();
    let lp = &plan.levels;
    let hists = kv_agg1(lp.eps, lp.k, &lp.levels(), quads)?;
    let mu_hat1 = est_mean(&hists, lp)?;
    let sigma_hat = if plan.protocol.known_variance() {
        None
    } else {
        let paired = hists.iter().map(|(&j, h)| (j, h.paired())).collect();
        Some(est_var(&paired, lp, plan.threshold)?)
    };
    Ok(RoundOne { mu_hat1, sigma_hat })
}

/// Second-round broadcast of a two-round protocol.
pub fn broadcast_for(plan: &PartitionPlan, r1: &RoundOne) -> Option<Broadcast> {
    match plan.protocol {
        ProtocolId::Kv2 => Some(Broadcast::Center { mu_hat1: r1.mu_hat1 }),
        ProtocolId::Uv2 => {
            let sigma_hat = r1.sigma_hat.expect("unknown-variance round one yields a scale");
            let half_width = sigma_hat * (2.0 + (4.0 * plan.n as f64).ln().sqrt());
            Some(Broadcast::Interval {
                interval_lo: r1.mu_hat1 - half_width,
                interval_hi: r1.mu_hat1 + half_width,
            })
        }
        ProtocolId::Kv1 | ProtocolId::Uv1 => None,
    }
}

fn check_count(what: &str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::malformed(format!("{what}: {got} reports, expected {expected}")))
    }
}

/// Final estimate from the round-one state and the second-half reports.
pub fn finish(plan: &PartitionPlan, r1: &RoundOne, transcript: &Transcript) -> Result<EstimateOutcome> {
    let eps = plan.levels.eps;
    let half = plan.n / 2;
    let mut subgroup = None;
    let mu_hat2 = match &plan.round_two {
        RoundTwo::KvTwo => {
            let signs: Vec<&SignReport> = transcript
                .reports(2)
                .filter_map(|r| match r {
                    Report::Sign(s) => Some(s),
                    _ => None,
                })
                .collect();
            let hist = kv_agg2(eps, half, signs)?;
            refine_known_sigma(&hist, half, r1.mu_hat1, plan.sigma.expect("known sigma"))?
        }
        RoundTwo::KvOne { k2, lattices, .. } => {
            let (g, center) = select_subgroup_kv(r1.mu_hat1, lattices)?;
            let signs: Vec<&SignReport> = transcript
                .reports(1)
                .filter_map(|r| match r {
                    Report::Sign(s) if s.subgroup == Some(g) => Some(s),
                    _ => None,
                })
                .collect();
            let hist = kv_agg2(eps, *k2, signs)?;
            subgroup = Some(format!("R{g}"));
            refine_known_sigma(&hist, *k2, center, plan.sigma.expect("known sigma"))?
        }
        RoundTwo::UvTwo => {
            let values: Vec<f64> = transcript
                .reports(2)
                .filter_map(|r| match r {
                    Report::Real(x) => Some(x.value),
                    _ => None,
                })
                .collect();
            check_count("second round", values.len(), half)?;
            values.iter().sum::<f64>() / half as f64
        }
        RoundTwo::UvOne { k2, family } => {
            let sigma_hat = r1.sigma_hat.expect("unknown-variance round one yields a scale");
            let (j1, m, center) = select_subgroup_uv(sigma_hat, r1.mu_hat1, family)?;
            let values: Vec<f64> = transcript
                .reports(1)
                .filter_map(|r| match r {
                    Report::Real(x) if x.subgroup == Some((j1, m)) => Some(x.value),
                    _ => None,
                })
                .collect();
            check_count(&format!("group S{j1}:{m}"), values.len(), *k2)?;
            subgroup = Some(format!("S{j1}:{m}"));
            center + values.iter().sum::<f64>() / *k2 as f64
        }
    };
    Ok(EstimateOutcome {
        protocol: plan.protocol,
        mu_hat1: r1.mu_hat1,
        sigma_hat: r1.sigma_hat,
        mu_hat2,
        subgroup,
    })
}

/// Checks that every message comes from the user the plan assigns to that
/// subgroup and round, that nobody speaks twice and nobody queried is missing.
pub fn validate_structure(plan: &PartitionPlan, transcript: &Transcript) -> Result<()> {
    let two_round = plan.protocol.rounds() == 2;
    let mut seen = HashSet::new();
    for entry in &transcript.entries {
        let super::transcript::Entry::Report { round, report } = entry else {
            continue;
        };
        let user = report.user_id();
        if !seen.insert(user) {
            return Err(Error::malformed(format!("user {user} sends more than one message")));
        }
        let fits = match (plan.assignment(user), report) {
            (Assignment::Level(j), Report::Quad(q)) => q.level == j && *round == 1,
            (Assignment::Second, Report::Sign(s)) => {
                plan.protocol == ProtocolId::Kv2 && s.subgroup.is_none() && *round == 2
            }
            (Assignment::Second, Report::Real(r)) => {
                plan.protocol == ProtocolId::Uv2 && r.subgroup.is_none() && *round == 2
            }
            (Assignment::Group(g), Report::Sign(s)) => {
                plan.protocol == ProtocolId::Kv1 && s.subgroup == Some(g) && *round == 1
            }
            (Assignment::Group(g), Report::Real(r)) => match &plan.round_two {
                RoundTwo::UvOne { family, .. } => r.subgroup == Some(family.group(g)) && *round == 1,
                _ => false,
            },
            _ => false,
        };
        if !fits {
            return Err(Error::malformed(format!(
                "round {round} message from user {user} in subgroup {} does not match the plan",
                report.subgroup_tag()
            )));
        }
    }
    check_count("transcript", seen.len(), plan.n - plan.discarded())?;
    let broadcasts: Vec<(u8, &Broadcast)> = transcript.broadcasts().collect();
    let expected_shape = match (two_round, broadcasts.as_slice()) {
        (false, []) => true,
        (true, [(2, Broadcast::Center { .. })]) => plan.protocol == ProtocolId::Kv2,
        (true, [(2, Broadcast::Interval { .. })]) => plan.protocol == ProtocolId::Uv2,
        _ => false,
    };
    if !expected_shape {
        return Err(Error::malformed(format!("unexpected broadcasts {broadcasts:?}")));
    }
    Ok(())
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

fn mismatch(what: &str, recorded: impl std::fmt::Debug, recomputed: impl std::fmt::Debug) -> Error {
    Error::ReplayMismatch(format!("{what}: recorded {recorded:?}, recomputed {recomputed:?}"))
}

/// Recomputes every analyst output from the transcript alone and compares it
/// bit for bit with what was recorded.
pub fn replay(transcript: &Transcript) -> Result<EstimateOutcome> {
    let plan = super::plan::plan_partition(&transcript.config).map_err(|e| match e {
        Error::Configuration(m) | Error::InvalidParameter(m) => Error::malformed(format!("transcript header: {m}")),
        other => other,
    })?;
    validate_structure(&plan, transcript)?;
    let recorded = transcript
        .outcome
        .as_ref()
        .ok_or_else(|| Error::malformed("transcript has no outcome line"))?;
    let r1 = round_one(&plan, transcript)?;
    if let Some(expected) = broadcast_for(&plan, &r1) {
        let (_, got) = transcript.broadcasts().next().expect("validated above");
        let equal = match (got, &expected) {
            (Broadcast::Center { mu_hat1: a }, Broadcast::Center { mu_hat1: b }) => same(*a, *b),
            (
                Broadcast::Interval { interval_lo: a, interval_hi: b },
                Broadcast::Interval { interval_lo: c, interval_hi: d },
            ) => same(*a, *c) && same(*b, *d),
            _ => false,
        };
        if !equal {
            return Err(mismatch("broadcast", got, expected));
        }
    }
    let outcome = finish(&plan, &r1, transcript)?;
    if recorded.protocol != outcome.protocol {
        return Err(mismatch("protocol", recorded.protocol, outcome.protocol));
    }
    if !same(recorded.mu_hat1, outcome.mu_hat1) {
        return Err(mismatch("mu_hat1", recorded.mu_hat1, outcome.mu_hat1));
    }
    let sigma_equal = match (recorded.sigma_hat, outcome.sigma_hat) {
        (Some(a), Some(b)) => same(a, b),
        (None, None) => true,
        _ => false,
    };
    if !sigma_equal {
        return Err(mismatch("sigma_hat", recorded.sigma_hat, outcome.sigma_hat));
    }
    if recorded.subgroup != outcome.subgroup {
        return Err(mismatch("subgroup", &recorded.subgroup, &outcome.subgroup));
    }
    if !same(recorded.mu_hat2, outcome.mu_hat2) {
        return Err(mismatch("mu_hat2", recorded.mu_hat2, outcome.mu_hat2));
    }
    Ok(outcome)
}
